//! Time integration of the closed semi-discrete system: quadratic
//! collision dynamics for the cell densities, with passive momentum and
//! energy transport in one spatial dimension.
//!
//! The density equations are independent of p and E, so toggling the moment
//! update cannot perturb the density trajectory. Advection uses first-order
//! upwind fluxes in flux-difference form; interface values are shared
//! between neighboring nodes, which telescopes to exact conservation of the
//! spatial sums on periodic grids.

use crate::coefficients::CoefficientSet;
use crate::lattice::{CellRule, VelocityLattice};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("state dimension {got} does not match coefficient set ({want})")]
    DimensionMismatch { got: usize, want: usize },
    #[error("CFL violation: dt*max|m1|/dx = {0:.4} > 0.9")]
    CflViolation(f64),
    #[error("density went non-finite at cell {0}")]
    NonFinite(usize),
    #[error("density went negative at cell {cell}: {value:.3e}")]
    NegativeDensity { cell: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Explicit time integrators for the homogeneous equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Solution state: cell densities per spatial node plus the integrated
/// momentum and energy densities.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticState {
    pub t: f64,
    pub n_nodes: usize,
    /// Node-major density block: `n[node * m + alpha]`.
    pub n: Vec<f64>,
    /// Momentum density per node, 3 components.
    pub p: Vec<[f64; 3]>,
    /// Energy density per node.
    pub e: Vec<f64>,
}

impl KineticState {
    pub fn homogeneous(n: Vec<f64>, p: [f64; 3], e: f64) -> Self {
        Self {
            t: 0.0,
            n_nodes: 1,
            n,
            p: vec![p],
            e: vec![e],
        }
    }

    pub fn node_density(&self, node: usize, m: usize) -> &[f64] {
        &self.n[node * m..(node + 1) * m]
    }

    /// Total particle number: sum of all densities (times dx in 1-D).
    pub fn total_mass(&self) -> f64 {
        self.n.iter().sum()
    }

    pub fn min_density(&self) -> f64 {
        self.n.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// 1-D slab grid.
#[derive(Debug, Clone)]
pub struct Grid1D {
    pub n_nodes: usize,
    pub dx: f64,
    pub boundary: Boundary,
}

#[derive(Debug, Clone)]
pub enum Boundary {
    Periodic,
    /// Fixed ghost densities used as upwind states at the two ends.
    Inflow {
        left: Vec<f64>,
        right: Vec<f64>,
    },
}

impl Grid1D {
    pub fn new(n_nodes: usize, dx: f64, boundary: Boundary) -> Result<Self, SolverError> {
        if n_nodes < 2 {
            return Err(SolverError::InvalidArgument(format!(
                "grid needs at least 2 nodes, got {n_nodes}"
            )));
        }
        if !(dx > 0.0) {
            return Err(SolverError::InvalidArgument(format!(
                "node spacing must be positive, got {dx}"
            )));
        }
        Ok(Self {
            n_nodes,
            dx,
            boundary,
        })
    }
}

/// Collision right-hand side for one node's densities.
///
/// `dN_alpha = 1/2 sum_{b,g} G_{alpha;b,g} N_b N_g - N_alpha sum_b nu_{alpha;b} N_b`,
/// evaluated over the stored sparse support with a fixed summation order.
pub fn collision_rhs(coeffs: &CoefficientSet, n: &[f64]) -> Result<Vec<f64>, SolverError> {
    let m = coeffs.n_cells();
    if n.len() != m {
        return Err(SolverError::DimensionMismatch {
            got: n.len(),
            want: m,
        });
    }
    let mut out = vec![0.0; m];
    collision_rhs_into(coeffs, n, &mut out);
    Ok(out)
}

/// Number of row chunks for the parallel gain accumulation. Fixed so that
/// results are identical for any thread count.
const RHS_CHUNKS: usize = 16;

fn collision_rhs_into(coeffs: &CoefficientSet, n: &[f64], out: &mut [f64]) {
    let m = coeffs.n_cells();
    let (pair_ptr, pair_cols, pair_vals, pair_loss) = coeffs.pair_slices();

    // Loss rates: s[a] = sum_b nu_eff(a, b) n[b], triangular walk.
    let mut rate = vec![0.0f64; m];
    {
        let mut t = 0usize;
        for a in 0..m {
            let na = n[a];
            rate[a] += pair_loss[t] * na; // b == a term
            t += 1;
            for b in (a + 1)..m {
                let l = pair_loss[t];
                rate[a] += l * n[b];
                rate[b] += l * na;
                t += 1;
            }
        }
    }

    // Gain scatter, parallel over fixed row chunks merged in order.
    let chunk = m.div_ceil(RHS_CHUNKS);
    let partials: Vec<Vec<f64>> = (0..RHS_CHUNKS)
        .into_par_iter()
        .map(|ci| {
            let mut acc = vec![0.0f64; m];
            let lo = ci * chunk;
            let hi = ((ci + 1) * chunk).min(m);
            for a in lo..hi {
                let na = n[a];
                if na == 0.0 {
                    // diagonal and off-diagonal terms all carry n[a]
                    continue;
                }
                let base = a * m - a * (a + 1) / 2;
                for b in a..m {
                    let w = if a == b { 0.5 * na * na } else { na * n[b] };
                    if w == 0.0 {
                        continue;
                    }
                    let t = base + b;
                    let (s, e) = (pair_ptr[t], pair_ptr[t + 1]);
                    for k in s..e {
                        acc[pair_cols[k] as usize] += w * pair_vals[k];
                    }
                }
            }
            acc
        })
        .collect();

    for a in 0..m {
        let mut g = 0.0;
        for part in &partials {
            g += part[a];
        }
        out[a] = g - n[a] * rate[a];
    }
}

/// Euler positivity bound `0.5 / max_alpha sum_b nu_{alpha;b} N_b`.
pub fn euler_stability_bound(coeffs: &CoefficientSet, n: &[f64]) -> f64 {
    let m = coeffs.n_cells();
    let mut worst: f64 = 0.0;
    for a in 0..m {
        let mut s = 0.0;
        for b in 0..m {
            s += coeffs.loss(a, b) * n[b];
        }
        worst = worst.max(s);
    }
    if worst > 0.0 {
        0.5 / worst
    } else {
        f64::INFINITY
    }
}

fn check_densities(n: &[f64]) -> Result<(), SolverError> {
    let scale = n.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let floor = -1e-12 * scale.max(f64::MIN_POSITIVE);
    for (i, &v) in n.iter().enumerate() {
        if !v.is_finite() {
            return Err(SolverError::NonFinite(i));
        }
        if v < floor {
            return Err(SolverError::NegativeDensity { cell: i, value: v });
        }
    }
    Ok(())
}

/// Advance a spatially homogeneous state by one step. Momentum and energy
/// have zero right-hand side and are carried over unchanged.
pub fn step_homogeneous(
    coeffs: &CoefficientSet,
    state: &KineticState,
    dt: f64,
    integrator: Integrator,
) -> Result<KineticState, SolverError> {
    if !(dt > 0.0) {
        return Err(SolverError::InvalidArgument(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let m = coeffs.n_cells();
    if state.n_nodes != 1 || state.n.len() != m {
        return Err(SolverError::DimensionMismatch {
            got: state.n.len(),
            want: m,
        });
    }
    let n0 = &state.n;
    let mut next = vec![0.0f64; m];
    match integrator {
        Integrator::Euler => {
            let k1 = collision_rhs(coeffs, n0)?;
            for a in 0..m {
                next[a] = n0[a] + dt * k1[a];
            }
        }
        Integrator::Rk4 => {
            let k1 = collision_rhs(coeffs, n0)?;
            let mut tmp = vec![0.0f64; m];
            for a in 0..m {
                tmp[a] = n0[a] + 0.5 * dt * k1[a];
            }
            let k2 = collision_rhs(coeffs, &tmp)?;
            for a in 0..m {
                tmp[a] = n0[a] + 0.5 * dt * k2[a];
            }
            let k3 = collision_rhs(coeffs, &tmp)?;
            for a in 0..m {
                tmp[a] = n0[a] + dt * k3[a];
            }
            let k4 = collision_rhs(coeffs, &tmp)?;
            let sixth = dt / 6.0;
            for a in 0..m {
                next[a] = n0[a] + sixth * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
            }
        }
    }
    check_densities(&next)?;
    Ok(KineticState {
        t: state.t + dt,
        n_nodes: 1,
        n: next,
        p: state.p.clone(),
        e: state.e.clone(),
    })
}

/// Per-alpha upwind interface states for one velocity cell over the grid.
/// Interface `i` sits between nodes `i-1` and `i`; there are `n_nodes + 1`
/// interfaces (the two end interfaces coincide for periodic grids).
fn upwind_interfaces(
    grid: &Grid1D,
    speed: f64,
    node_val: impl Fn(usize) -> f64,
    ghost: Option<(f64, f64)>,
    out: &mut [f64],
) {
    let n = grid.n_nodes;
    let left_of = |i: usize| -> f64 {
        if i == 0 {
            match (&grid.boundary, ghost) {
                (Boundary::Periodic, _) => node_val(n - 1),
                (Boundary::Inflow { .. }, Some((l, _))) => l,
                _ => unreachable!(),
            }
        } else {
            node_val(i - 1)
        }
    };
    let right_of = |i: usize| -> f64 {
        if i == n {
            match (&grid.boundary, ghost) {
                (Boundary::Periodic, _) => node_val(0),
                (Boundary::Inflow { .. }, Some((_, r))) => r,
                _ => unreachable!(),
            }
        } else {
            node_val(i)
        }
    };
    for (i, o) in out.iter_mut().enumerate().take(n + 1) {
        *o = if speed > 0.0 {
            left_of(i)
        } else if speed < 0.0 {
            right_of(i)
        } else {
            0.5 * (left_of(i) + right_of(i))
        };
    }
}

/// Options for 1-D stepping.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub collisions: bool,
    /// When false the momentum/energy columns are carried unchanged; the
    /// density path is bitwise identical either way.
    pub integrate_moments: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            collisions: true,
            integrate_moments: true,
        }
    }
}

/// Upwind transport right-hand side for the densities only (collision terms
/// added per node when enabled).
pub fn transport_rhs_1d(
    coeffs: &CoefficientSet,
    grid: &Grid1D,
    state: &KineticState,
    collisions: bool,
) -> Result<Vec<f64>, SolverError> {
    let m = coeffs.n_cells();
    let n = grid.n_nodes;
    if state.n.len() != m * n {
        return Err(SolverError::DimensionMismatch {
            got: state.n.len(),
            want: m * n,
        });
    }
    let mut out = vec![0.0f64; m * n];
    let mut iface = vec![0.0f64; n + 1];
    let inv_dx = 1.0 / grid.dx;
    for alpha in 0..m {
        let speed = coeffs.geometry()[alpha].mean_velocity[0];
        let ghost = match &grid.boundary {
            Boundary::Periodic => None,
            Boundary::Inflow { left, right } => Some((left[alpha], right[alpha])),
        };
        upwind_interfaces(grid, speed, |i| state.n[i * m + alpha], ghost, &mut iface);
        for i in 0..n {
            out[i * m + alpha] = -speed * (iface[i + 1] - iface[i]) * inv_dx;
        }
    }
    if collisions {
        for i in 0..n {
            let rhs = collision_rhs(coeffs, state.node_density(i, m))?;
            for a in 0..m {
                out[i * m + a] += rhs[a];
            }
        }
    }
    Ok(out)
}

/// Advance a 1-D slab state by one explicit Euler step: upwind advection
/// plus collisions for the densities, and the same upwind-differenced
/// density gradients driving the momentum and energy columns.
pub fn step_1d(
    coeffs: &CoefficientSet,
    grid: &Grid1D,
    state: &KineticState,
    dt: f64,
    opts: StepOptions,
) -> Result<KineticState, SolverError> {
    let m = coeffs.n_cells();
    let n = grid.n_nodes;
    if state.n.len() != m * n || state.n_nodes != n {
        return Err(SolverError::DimensionMismatch {
            got: state.n.len(),
            want: m * n,
        });
    }
    if !(dt > 0.0) {
        return Err(SolverError::InvalidArgument(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let max_speed = coeffs
        .geometry()
        .iter()
        .map(|g| g.mean_velocity[0].abs())
        .fold(0.0f64, f64::max);
    let cfl = dt * max_speed / grid.dx;
    if cfl > 0.9 {
        return Err(SolverError::CflViolation(cfl));
    }

    let mut next_n = state.n.clone();
    let mut next_p = state.p.clone();
    let mut next_e = state.e.clone();
    let mut iface = vec![0.0f64; n + 1];
    let inv_dx = 1.0 / grid.dx;

    for alpha in 0..m {
        let geo = &coeffs.geometry()[alpha];
        let speed = geo.mean_velocity[0];
        let ghost = match &grid.boundary {
            Boundary::Periodic => None,
            Boundary::Inflow { left, right } => Some((left[alpha], right[alpha])),
        };
        upwind_interfaces(grid, speed, |i| state.n[i * m + alpha], ghost, &mut iface);
        for i in 0..n {
            let grad = (iface[i + 1] - iface[i]) * inv_dx;
            next_n[i * m + alpha] -= dt * speed * grad;
            if opts.integrate_moments {
                // streaming component of the second-moment columns and the
                // energy flux drives p and E passively
                for comp in 0..3 {
                    next_p[i][comp] -= dt * geo.second_moments[0][comp] * grad;
                }
                next_e[i] -= dt * 0.5 * geo.energy_flux[0] * grad;
            }
        }
    }

    if opts.collisions {
        for i in 0..n {
            let rhs = collision_rhs(coeffs, state.node_density(i, m))?;
            for a in 0..m {
                next_n[i * m + a] += dt * rhs[a];
            }
        }
    }

    check_densities(&next_n)?;
    Ok(KineticState {
        t: state.t + dt,
        n_nodes: n,
        n: next_n,
        p: next_p,
        e: next_e,
    })
}

/// Report from Maxwellian initialization.
#[derive(Debug, Clone)]
pub struct MaxwellianInit {
    pub densities: Vec<f64>,
    /// Sum of the cell densities.
    pub captured_mass: f64,
    /// Analytic mass of the Maxwellian inside the active ball.
    pub ball_mass: f64,
    /// Set when the active radius clips the distribution severely.
    pub truncation_warning: bool,
}

/// Cell densities of a drifting Maxwellian
/// `n0 (2 pi T0)^{-3/2} exp(-|xi - u0|^2 / (2 T0))`, one cell integral per
/// active cell.
pub fn initialize_from_maxwellian(
    lattice: &VelocityLattice,
    rule: &CellRule,
    n0: f64,
    u0: [f64; 3],
    t0: f64,
) -> Result<MaxwellianInit, SolverError> {
    if !(n0 > 0.0) || !(t0 > 0.0) {
        return Err(SolverError::InvalidArgument(format!(
            "density and temperature must be positive, got n0={n0}, T0={t0}"
        )));
    }
    let norm = n0 / (2.0 * std::f64::consts::PI * t0).powf(1.5);
    let inv2t = 1.0 / (2.0 * t0);
    let densities: Vec<f64> = lattice
        .cells()
        .par_iter()
        .map(|cell| {
            let c = cell.center(lattice.ell());
            let mut acc = 0.0;
            for (eta, w) in rule.nodes.iter().zip(&rule.weights) {
                let dx = c[0] + eta[0] - u0[0];
                let dy = c[1] + eta[1] - u0[1];
                let dz = c[2] + eta[2] - u0[2];
                acc += w * (-(dx * dx + dy * dy + dz * dz) * inv2t).exp();
            }
            norm * acc
        })
        .collect();
    let captured_mass = densities.iter().sum();
    let u_mag = (u0[0] * u0[0] + u0[1] * u0[1] + u0[2] * u0[2]).sqrt();
    let ball_mass = n0 * gaussian_ball_mass(lattice.active_radius(), u_mag, t0);
    let truncation_warning = lattice.active_radius() < u_mag + 3.0 * t0.sqrt();
    Ok(MaxwellianInit {
        densities,
        captured_mass,
        ball_mass,
        truncation_warning,
    })
}

/// Probability that an isotropic Gaussian with per-axis variance `t` and
/// mean speed `u_mag` lies inside the ball of radius `r`.
pub fn gaussian_ball_mass(r: f64, u_mag: f64, t: f64) -> f64 {
    use statrs::function::erf::erf;
    let sigma = t.sqrt();
    if u_mag < 1e-10 * sigma.max(1.0) {
        // central chi distribution with three degrees of freedom
        let x = r / (sigma * std::f64::consts::SQRT_2);
        erf(x) - 2.0 * x * (-x * x).exp() / std::f64::consts::PI.sqrt()
    } else {
        let phi = |x: f64| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
        let a = (r - u_mag) / sigma;
        let b = (-r - u_mag) / sigma;
        let gauss =
            |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        phi(a) - phi(b) - sigma / u_mag * (gauss(a) - gauss(b))
    }
}
