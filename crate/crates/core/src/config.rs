//! Flat key-value run configuration.
//!
//! The format is one `key = value` pair per line with dotted section keys
//! and `#` comments. Unknown keys are errors so that typos in
//! tolerance-sensitive numerics cannot pass silently.

use crate::coefficients::BuildParams;
use crate::kernel::KernelModel;
use std::collections::HashMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("missing required key '{0}'")]
    MissingKey(String),
    #[error("key '{key}': {msg}")]
    BadValue { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Homogeneous,
    Slab1d,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryKind {
    Periodic,
    Inflow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxwellianSpec {
    pub n0: f64,
    pub u0: [f64; 3],
    pub t0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    HardSphere { b: f64 },
    /// `B(|V|) = b |V|^exponent`
    VhsPower { b: f64, exponent: f64 },
    /// Piecewise-linear `B(|V|)` through `(speed, value)` knots.
    VhsTable { knots: Vec<(f64, f64)> },
}

impl KernelSpec {
    pub fn build(&self) -> KernelModel {
        match self {
            KernelSpec::HardSphere { b } => {
                KernelModel::hard_sphere(*b).expect("validated hard-sphere rate")
            }
            KernelSpec::VhsPower { b, exponent } => {
                let (b, eta) = (*b, *exponent);
                KernelModel::vhs(format!("power(b={b:.17e},eta={eta:.17e})"), move |v: f64| {
                    if v == 0.0 && eta < 0.0 {
                        0.0
                    } else {
                        b * v.powf(eta)
                    }
                })
            }
            KernelSpec::VhsTable { knots } => {
                let knots = knots.clone();
                let id = knots
                    .iter()
                    .map(|(x, y)| format!("{x:.17e}:{y:.17e}"))
                    .collect::<Vec<_>>()
                    .join(";");
                KernelModel::vhs(format!("table({id})"), move |v: f64| {
                    piecewise_linear(&knots, v)
                })
            }
        }
    }
}

fn piecewise_linear(knots: &[(f64, f64)], x: f64) -> f64 {
    if x <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        if x <= x1 {
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    knots[knots.len() - 1].1
}

/// Fully parsed and validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub ell: f64,
    pub active_radius: f64,
    pub kernel: KernelSpec,
    pub params: BuildParams,
    pub scenario: Scenario,
    pub init: MaxwellianSpec,
    pub init2: Option<MaxwellianSpec>,
    /// Cell-rule order for Maxwellian initialization.
    pub init_order: usize,
    pub grid_nodes: usize,
    pub grid_dx: f64,
    pub boundary: BoundaryKind,
    /// Square pulse multiplying the density on a node range, slab runs only.
    pub pulse: Option<(usize, usize, f64)>,
    pub integrator: crate::solver::Integrator,
    pub dt: f64,
    pub t_end: f64,
    pub collisions: bool,
    pub integrate_moments: bool,
    pub record_every: usize,
    pub output_path: Option<PathBuf>,
    pub cache_path: Option<PathBuf>,
    pub threads: usize,
}

pub fn parse_file(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut map: HashMap<String, (String, usize)> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: idx + 1,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = k.trim().to_string();
        if map.contains_key(&key) {
            return Err(ConfigError::Syntax {
                line: idx + 1,
                msg: format!("duplicate key '{key}'"),
            });
        }
        map.insert(key, (v.trim().to_string(), idx + 1));
    }

    const KNOWN: &[&str] = &[
        "lattice.ell",
        "lattice.active_radius",
        "kernel.kind",
        "kernel.b",
        "kernel.exponent",
        "kernel.table",
        "quadrature.cell_order",
        "quadrature.loss_order",
        "quadrature.gain_order",
        "quadrature.sphere_s",
        "quadrature.sphere_theta",
        "build.drop_tolerance",
        "build.leak_budget",
        "scenario",
        "init.n0",
        "init.u0",
        "init.T0",
        "init2.n0",
        "init2.u0",
        "init2.T0",
        "init.order",
        "grid.n_nodes",
        "grid.dx",
        "grid.boundary",
        "grid.pulse_lo",
        "grid.pulse_hi",
        "grid.pulse_amplitude",
        "integrator",
        "run.dt",
        "run.t_end",
        "run.collisions",
        "run.integrate_moments",
        "run.record_every",
        "output.path",
        "cache.path",
        "threads",
    ];
    for key in map.keys() {
        if !KNOWN.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
    }

    let get = |key: &str| -> Option<&str> { map.get(key).map(|(v, _)| v.as_str()) };
    let require = |key: &str| -> Result<&str, ConfigError> {
        get(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    };
    let parse_f64 = |key: &str, v: &str| -> Result<f64, ConfigError> {
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            msg: format!("'{v}' is not a number"),
        })
    };
    let parse_usize = |key: &str, v: &str| -> Result<usize, ConfigError> {
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            msg: format!("'{v}' is not a nonnegative integer"),
        })
    };
    let parse_bool = |key: &str, v: &str| -> Result<bool, ConfigError> {
        match v {
            "true" | "on" | "yes" => Ok(true),
            "false" | "off" | "no" => Ok(false),
            _ => Err(ConfigError::BadValue {
                key: key.into(),
                msg: format!("'{v}' is not a boolean"),
            }),
        }
    };
    let parse_vec3 = |key: &str, v: &str| -> Result<[f64; 3], ConfigError> {
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(ConfigError::BadValue {
                key: key.into(),
                msg: format!("'{v}' is not three comma-separated numbers"),
            });
        }
        Ok([
            parse_f64(key, parts[0])?,
            parse_f64(key, parts[1])?,
            parse_f64(key, parts[2])?,
        ])
    };

    let ell = parse_f64("lattice.ell", require("lattice.ell")?)?;
    let active_radius = parse_f64("lattice.active_radius", require("lattice.active_radius")?)?;
    if !(ell > 0.0) {
        return Err(ConfigError::Invalid(format!(
            "lattice.ell must be positive, got {ell}"
        )));
    }
    if !(active_radius >= ell) {
        return Err(ConfigError::Invalid(format!(
            "lattice.active_radius ({active_radius}) must be at least lattice.ell ({ell})"
        )));
    }

    let kernel = match require("kernel.kind")? {
        "hard_sphere" => {
            let b = parse_f64("kernel.b", get("kernel.b").unwrap_or("1.0"))?;
            if !(b >= 0.0) {
                return Err(ConfigError::Invalid("kernel.b must be nonnegative".into()));
            }
            KernelSpec::HardSphere { b }
        }
        "vhs_power" => {
            let b = parse_f64("kernel.b", get("kernel.b").unwrap_or("1.0"))?;
            let exponent = parse_f64("kernel.exponent", require("kernel.exponent")?)?;
            if !(b >= 0.0) {
                return Err(ConfigError::Invalid("kernel.b must be nonnegative".into()));
            }
            KernelSpec::VhsPower { b, exponent }
        }
        "vhs_table" => {
            let raw = require("kernel.table")?;
            let mut knots = Vec::new();
            for item in raw.split(';') {
                let (x, y) = item.split_once(':').ok_or_else(|| ConfigError::BadValue {
                    key: "kernel.table".into(),
                    msg: format!("'{item}' is not 'speed:value'"),
                })?;
                knots.push((
                    parse_f64("kernel.table", x.trim())?,
                    parse_f64("kernel.table", y.trim())?,
                ));
            }
            if knots.len() < 2 {
                return Err(ConfigError::Invalid(
                    "kernel.table needs at least two knots".into(),
                ));
            }
            if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(ConfigError::Invalid(
                    "kernel.table knots must have increasing speeds".into(),
                ));
            }
            if knots.iter().any(|(_, y)| *y < 0.0) {
                return Err(ConfigError::Invalid(
                    "kernel.table values must be nonnegative".into(),
                ));
            }
            KernelSpec::VhsTable { knots }
        }
        other => {
            return Err(ConfigError::BadValue {
                key: "kernel.kind".into(),
                msg: format!("unknown kernel kind '{other}'"),
            })
        }
    };

    let defaults = BuildParams::default();
    let params = BuildParams {
        cell_order: match get("quadrature.cell_order") {
            Some(v) => parse_usize("quadrature.cell_order", v)?,
            None => defaults.cell_order,
        },
        loss_order: match get("quadrature.loss_order") {
            Some(v) => parse_usize("quadrature.loss_order", v)?,
            None => defaults.loss_order,
        },
        gain_order: match get("quadrature.gain_order") {
            Some(v) => parse_usize("quadrature.gain_order", v)?,
            None => defaults.gain_order,
        },
        sphere_s: match get("quadrature.sphere_s") {
            Some(v) => parse_usize("quadrature.sphere_s", v)?,
            None => defaults.sphere_s,
        },
        sphere_theta: match get("quadrature.sphere_theta") {
            Some(v) => parse_usize("quadrature.sphere_theta", v)?,
            None => defaults.sphere_theta,
        },
        drop_tolerance: match get("build.drop_tolerance") {
            Some(v) => parse_f64("build.drop_tolerance", v)?,
            None => defaults.drop_tolerance,
        },
        leak_budget: match get("build.leak_budget") {
            Some(v) => parse_f64("build.leak_budget", v)?,
            None => defaults.leak_budget,
        },
    };
    params
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let scenario = match get("scenario").unwrap_or("homogeneous") {
        "homogeneous" => Scenario::Homogeneous,
        "slab1d" => Scenario::Slab1d,
        other => {
            return Err(ConfigError::BadValue {
                key: "scenario".into(),
                msg: format!("unknown scenario '{other}'"),
            })
        }
    };

    let maxwellian = |prefix: &str| -> Result<Option<MaxwellianSpec>, ConfigError> {
        let n0_key = format!("{prefix}.n0");
        let u0_key = format!("{prefix}.u0");
        let t0_key = format!("{prefix}.T0");
        match (get(&n0_key), get(&u0_key), get(&t0_key)) {
            (None, None, None) => Ok(None),
            (Some(n0), Some(u0), Some(t0)) => {
                let n0 = parse_f64(&n0_key, n0)?;
                let u0 = parse_vec3(&u0_key, u0)?;
                let t0 = parse_f64(&t0_key, t0)?;
                if !(n0 > 0.0) || !(t0 > 0.0) {
                    return Err(ConfigError::Invalid(format!(
                        "{prefix}: density and temperature must be positive"
                    )));
                }
                Ok(Some(MaxwellianSpec { n0, u0, t0 }))
            }
            _ => Err(ConfigError::Invalid(format!(
                "{prefix}.n0, {prefix}.u0, {prefix}.T0 must be given together"
            ))),
        }
    };
    let init =
        maxwellian("init")?.ok_or_else(|| ConfigError::MissingKey("init.n0".to_string()))?;
    let init2 = maxwellian("init2")?;
    let init_order = match get("init.order") {
        Some(v) => parse_usize("init.order", v)?,
        None => 8,
    };
    if init_order == 0 {
        return Err(ConfigError::Invalid("init.order must be at least 1".into()));
    }

    let (grid_nodes, grid_dx, boundary) = if scenario == Scenario::Slab1d {
        let n = parse_usize("grid.n_nodes", require("grid.n_nodes")?)?;
        let dx = parse_f64("grid.dx", require("grid.dx")?)?;
        if n < 2 || !(dx > 0.0) {
            return Err(ConfigError::Invalid(
                "slab grids need n_nodes >= 2 and dx > 0".into(),
            ));
        }
        let b = match get("grid.boundary").unwrap_or("periodic") {
            "periodic" => BoundaryKind::Periodic,
            "inflow" => BoundaryKind::Inflow,
            other => {
                return Err(ConfigError::BadValue {
                    key: "grid.boundary".into(),
                    msg: format!("unknown boundary '{other}'"),
                })
            }
        };
        (n, dx, b)
    } else {
        (1, 1.0, BoundaryKind::Periodic)
    };

    let pulse = match (
        get("grid.pulse_lo"),
        get("grid.pulse_hi"),
        get("grid.pulse_amplitude"),
    ) {
        (None, None, None) => None,
        (Some(lo), Some(hi), Some(a)) => {
            let lo = parse_usize("grid.pulse_lo", lo)?;
            let hi = parse_usize("grid.pulse_hi", hi)?;
            let a = parse_f64("grid.pulse_amplitude", a)?;
            if scenario != Scenario::Slab1d {
                return Err(ConfigError::Invalid(
                    "grid.pulse_* applies to slab1d runs only".into(),
                ));
            }
            if lo >= hi || hi > grid_nodes {
                return Err(ConfigError::Invalid(format!(
                    "pulse range [{lo}, {hi}) invalid for {grid_nodes} nodes"
                )));
            }
            Some((lo, hi, a))
        }
        _ => {
            return Err(ConfigError::Invalid(
                "grid.pulse_lo, grid.pulse_hi, grid.pulse_amplitude must be given together".into(),
            ))
        }
    };

    let integrator = match get("integrator").unwrap_or("rk4") {
        "euler" => crate::solver::Integrator::Euler,
        "rk4" => crate::solver::Integrator::Rk4,
        other => {
            return Err(ConfigError::BadValue {
                key: "integrator".into(),
                msg: format!("unknown integrator '{other}'"),
            })
        }
    };

    let dt = parse_f64("run.dt", require("run.dt")?)?;
    let t_end = parse_f64("run.t_end", require("run.t_end")?)?;
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(ConfigError::Invalid(
            "run.dt and run.t_end must be positive".into(),
        ));
    }
    let collisions = match get("run.collisions") {
        Some(v) => parse_bool("run.collisions", v)?,
        None => true,
    };
    let integrate_moments = match get("run.integrate_moments") {
        Some(v) => parse_bool("run.integrate_moments", v)?,
        None => true,
    };
    let record_every = match get("run.record_every") {
        Some(v) => parse_usize("run.record_every", v)?.max(1),
        None => 1,
    };
    let threads = match get("threads") {
        Some(v) => parse_usize("threads", v)?,
        None => 0,
    };

    Ok(RunConfig {
        ell,
        active_radius,
        kernel,
        params,
        scenario,
        init,
        init2,
        init_order,
        grid_nodes,
        grid_dx,
        boundary,
        pulse,
        integrator,
        dt,
        t_end,
        collisions,
        integrate_moments,
        record_every,
        output_path: get("output.path").map(PathBuf::from),
        cache_path: get("cache.path").map(PathBuf::from),
        threads,
    })
}
