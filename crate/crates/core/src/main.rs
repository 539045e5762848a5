//! Command-line driver: coefficient builds, cache verification, and runs.

use clap::{Parser, Subcommand};
use octaboltz::cache;
use octaboltz::coefficients::{build_coefficients, CoefficientMeta, CoefficientSet};
use octaboltz::config::{self, BoundaryKind, RunConfig, Scenario};
use octaboltz::diagnostics::{audit_row, write_timeseries, RunRecord};
use octaboltz::lattice::{CellRule, VelocityLattice};
use octaboltz::solver::{
    collision_rhs, initialize_from_maxwellian, step_1d, step_homogeneous, Boundary, Grid1D,
    KineticState, StepOptions,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BUILD: u8 = 3;
const EXIT_SOLVER: u8 = 4;

#[derive(Parser)]
#[command(
    name = "octaboltz",
    about = "Discrete-velocity Boltzmann solver on a truncated-octahedron lattice"
)]
struct Cli {
    /// Worker threads (0 = auto); OCTABOLTZ_THREADS is the fallback.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the coefficient cache for a configuration.
    BuildCoeffs {
        #[arg(long)]
        config: PathBuf,
        /// Cache output path (overrides cache.path from the config).
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Re-verify all invariants of a coefficient cache.
    Check {
        #[arg(long)]
        cache: PathBuf,
    },
    /// Execute a scenario against a prebuilt cache and write the CSV audit.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// CSV output path (overrides output.path from the config).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print cache metadata and summary statistics.
    Info {
        #[arg(long)]
        cache: PathBuf,
    },
}

/// Precedence: --threads, then the config key, then OCTABOLTZ_THREADS,
/// then auto.
fn init_threads(cli_threads: Option<usize>, config_threads: usize) {
    let n = cli_threads
        .or(if config_threads > 0 {
            Some(config_threads)
        } else {
            None
        })
        .or_else(|| {
            std::env::var("OCTABOLTZ_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn expected_meta(cfg: &RunConfig) -> CoefficientMeta {
    CoefficientMeta {
        ell: cfg.ell,
        active_radius: cfg.active_radius,
        kernel_id: cfg.kernel.build().id(),
        params: cfg.params.clone(),
        corrected: true,
    }
}

fn cmd_build(config_path: &Path, cache_override: Option<PathBuf>, cli_threads: Option<usize>) -> u8 {
    let cfg = match config::parse_file(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    init_threads(cli_threads, cfg.threads);
    let cache_path = match cache_override.or_else(|| cfg.cache_path.clone()) {
        Some(p) => p,
        None => {
            eprintln!("config error: no cache path given (cache.path or --cache)");
            return EXIT_CONFIG;
        }
    };
    let lattice = match VelocityLattice::build(cfg.ell, cfg.active_radius) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("build error: {e}");
            return EXIT_BUILD;
        }
    };
    let kernel = cfg.kernel.build();
    let t0 = std::time::Instant::now();
    let set = match build_coefficients(&lattice, &kernel, &cfg.params) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("build error: {e}");
            return EXIT_BUILD;
        }
    };
    let pre_residual = set.max_class_residual();
    let set = set.enforce_conservation();
    if let Err(e) = cache::save_coefficients(&set, &cache_path) {
        eprintln!("build error: {e}");
        return EXIT_BUILD;
    }
    let hash = cache::content_hash(&set);
    println!("OCTB: cells={}", set.n_cells());
    println!("OCTB: classes={}", set.classes().len());
    println!("OCTB: nnz={}", set.nnz());
    println!("OCTB: pre_correction_residual={pre_residual:.3e}");
    println!("OCTB: post_correction_residual={:.3e}", set.max_pair_residual());
    println!(
        "OCTB: max_rescale_deviation={:.3e}",
        set.max_class_factor_deviation()
    );
    println!("OCTB: max_leak_fraction={:.3e}", set.max_leak_fraction());
    println!("OCTB: zero_sum_pairs={}", set.zero_sum_pairs());
    println!("OCTB: hash={hash:#018x}");
    println!("OCTB: build_seconds={:.1}", t0.elapsed().as_secs_f64());
    for w in set.warnings() {
        println!("OCTB: warning: {w}");
    }
    println!("OCTB: cache={}", cache_path.display());
    0
}

struct CheckReport {
    failures: usize,
}

impl CheckReport {
    fn new() -> Self {
        Self { failures: 0 }
    }
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!(
            "OCTB: check {name} {} ({detail})",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            self.failures += 1;
        }
    }
}

fn run_checks(set: &CoefficientSet) -> CheckReport {
    let mut report = CheckReport::new();

    let mut neg_gain = 0usize;
    let mut nonfinite = 0usize;
    for class in set.classes() {
        if !class.loss.is_finite() || class.loss < 0.0 {
            nonfinite += 1;
        }
        for (_, v) in &class.entries {
            if !v.is_finite() {
                nonfinite += 1;
            } else if *v < 0.0 {
                neg_gain += 1;
            }
        }
    }
    report.record(
        "nonnegativity",
        neg_gain == 0 && nonfinite == 0,
        format!("{neg_gain} negative entries, {nonfinite} non-finite values"),
    );

    let class_residual = set.max_class_residual();
    let gate = if set.meta().corrected { 1e-13 } else { 5e-2 };
    report.record(
        "conservation_classes",
        class_residual <= gate,
        format!("max residual {class_residual:.3e} vs gate {gate:.0e}"),
    );

    let pair_residual = set.max_pair_residual();
    report.record(
        "conservation_pairs",
        pair_residual <= 1e-13,
        format!("max residual {pair_residual:.3e}"),
    );

    let m = set.n_cells();
    let mut support_ok = true;
    'outer: for a in 0..m {
        for b in a..m {
            if !set.support_within_reachable_ball(a, b) {
                support_ok = false;
                break 'outer;
            }
        }
    }
    report.record(
        "support_reachable_ball",
        support_ok,
        format!("{} pairs scanned", m * (m + 1) / 2),
    );

    let mut sym_ok = true;
    let probes = [(0usize, m / 2), (m / 3, m - 1), (m / 4, m / 2)];
    for (b, g) in probes {
        for a in 0..m {
            if set.gain(a, b, g) != set.gain(a, g, b) {
                sym_ok = false;
            }
        }
        if (set.loss(b, g) - set.loss(g, b)).abs() != 0.0 {
            sym_ok = false;
        }
    }
    report.record("pair_symmetry", sym_ok, "gain and loss swap-symmetric".into());

    let sorted = set
        .classes()
        .windows(2)
        .all(|w| w[0].rep < w[1].rep)
        && set
            .classes()
            .iter()
            .all(|c| c.entries.windows(2).all(|w| w[0].0 < w[1].0));
    report.record("canonical_ordering", sorted, "classes and entries sorted".into());

    report
}

fn cmd_check(cache_path: &Path) -> u8 {
    let set = match cache::load_coefficients(cache_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("check error: {e}");
            println!("OCTB: check load FAIL ({e})");
            return EXIT_CHECK_FAILED;
        }
    };
    println!("OCTB: check load PASS (hash verified)");
    let report = run_checks(&set);
    if report.failures == 0 {
        println!("OCTB: check result PASS");
        0
    } else {
        println!("OCTB: check result FAIL ({} failures)", report.failures);
        EXIT_CHECK_FAILED
    }
}

fn cmd_info(cache_path: &Path) -> u8 {
    let set = match cache::load_coefficients(cache_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("info error: {e}");
            return EXIT_BUILD;
        }
    };
    let meta = set.meta();
    println!("OCTB: ell={}", meta.ell);
    println!("OCTB: active_radius={}", meta.active_radius);
    println!("OCTB: kernel={}", meta.kernel_id);
    println!(
        "OCTB: orders cell={} loss={} gain={} sphere={}x{}",
        meta.params.cell_order,
        meta.params.loss_order,
        meta.params.gain_order,
        meta.params.sphere_s,
        meta.params.sphere_theta
    );
    println!("OCTB: corrected={}", meta.corrected);
    println!("OCTB: cells={}", set.n_cells());
    println!("OCTB: classes={}", set.classes().len());
    println!("OCTB: nnz={}", set.nnz());
    println!("OCTB: d={:.17e}", set.d());
    println!("OCTB: max_leak_fraction={:.3e}", set.max_leak_fraction());
    println!("OCTB: hash={:#018x}", cache::content_hash(&set));
    for w in set.warnings() {
        println!("OCTB: warning: {w}");
    }
    0
}

fn initial_densities(
    cfg: &RunConfig,
    lattice: &VelocityLattice,
) -> Result<Vec<f64>, String> {
    let rule = CellRule::new(cfg.init_order, cfg.ell).map_err(|e| e.to_string())?;
    let first = initialize_from_maxwellian(lattice, &rule, cfg.init.n0, cfg.init.u0, cfg.init.t0)
        .map_err(|e| e.to_string())?;
    if first.truncation_warning {
        eprintln!("warning: active radius clips the initial Maxwellian severely");
    }
    println!(
        "OCTB: init captured_mass={:.12} ball_mass={:.12}",
        first.captured_mass, first.ball_mass
    );
    let mut n = first.densities;
    if let Some(second) = &cfg.init2 {
        let extra = initialize_from_maxwellian(lattice, &rule, second.n0, second.u0, second.t0)
            .map_err(|e| e.to_string())?;
        if extra.truncation_warning {
            eprintln!("warning: active radius clips the second Maxwellian severely");
        }
        println!(
            "OCTB: init2 captured_mass={:.12} ball_mass={:.12}",
            extra.captured_mass, extra.ball_mass
        );
        for (a, b) in n.iter_mut().zip(extra.densities) {
            *a += b;
        }
    }
    Ok(n)
}

fn cmd_run(config_path: &Path, cache_override: Option<PathBuf>, output_override: Option<PathBuf>, cli_threads: Option<usize>) -> u8 {
    let cfg = match config::parse_file(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    init_threads(cli_threads, cfg.threads);
    let cache_path = match cache_override.or_else(|| cfg.cache_path.clone()) {
        Some(p) => p,
        None => {
            eprintln!("config error: no cache path given (cache.path or --cache)");
            return EXIT_CONFIG;
        }
    };
    let output_path = match output_override.or_else(|| cfg.output_path.clone()) {
        Some(p) => p,
        None => {
            eprintln!("config error: no output path given (output.path or --output)");
            return EXIT_CONFIG;
        }
    };
    let set = match cache::load_coefficients(&cache_path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cache error: {e}");
            return EXIT_BUILD;
        }
    };
    if let Err(e) = cache::verify_meta(&set, &expected_meta(&cfg)) {
        eprintln!("config error: {e}");
        return EXIT_CONFIG;
    }

    let n0 = match initial_densities(&cfg, set.lattice()) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };

    match cfg.scenario {
        Scenario::Homogeneous => run_homogeneous(&cfg, &set, n0, &output_path),
        Scenario::Slab1d => run_slab(&cfg, &set, n0, &output_path),
    }
}

fn rhs_l1(set: &CoefficientSet, state: &KineticState, collisions: bool, dx: f64) -> f64 {
    if !collisions {
        return 0.0;
    }
    let m = set.n_cells();
    let mut total = 0.0;
    for i in 0..state.n_nodes {
        let rhs = collision_rhs(set, state.node_density(i, m)).expect("dimensions match");
        total += rhs.iter().map(|v| v.abs()).sum::<f64>() * dx;
    }
    total
}

fn final_audit(record: &RunRecord) {
    let first = record.rows.first().expect("at least one row");
    let last = record.rows.last().expect("at least one row");
    let mass_drift = (last.mass - first.mass).abs() / first.mass.abs().max(1e-300);
    println!("OCTB: audit mass_drift={mass_drift:.3e}");
    println!(
        "OCTB: audit p_rec_drift={:.3e}",
        (0..3)
            .map(|k| (last.p_rec[k] - first.p_rec[k]).abs())
            .fold(0.0f64, f64::max)
    );
    println!(
        "OCTB: audit E_rec_drift={:.3e}",
        (last.e_rec - first.e_rec).abs()
    );
    if first.rhs_l1 > 0.0 {
        println!(
            "OCTB: audit rhs_l1_ratio={:.3e}",
            last.rhs_l1 / first.rhs_l1
        );
    }
    println!("OCTB: audit min_N={:.3e}", last.min_n);
}

fn run_homogeneous(cfg: &RunConfig, set: &CoefficientSet, n0: Vec<f64>, output: &Path) -> u8 {
    let (p0, e0) = octaboltz::diagnostics::reconstruct_moments(set, &n0);
    let mut state = KineticState::homogeneous(n0, p0, e0);
    let steps = (cfg.t_end / cfg.dt).round().max(1.0) as usize;
    let mut record = RunRecord {
        rows: Vec::new(),
        max_rescale_deviation: set.max_class_factor_deviation(),
    };
    record.push(audit_row(
        set,
        &state,
        rhs_l1(set, &state, cfg.collisions, 1.0),
        1.0,
    ));
    for step in 1..=steps {
        state = match step_homogeneous(set, &state, cfg.dt, cfg.integrator) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("solver abort at t={}: {e}", state.t);
                return EXIT_SOLVER;
            }
        };
        if step % cfg.record_every == 0 || step == steps {
            record.push(audit_row(
                set,
                &state,
                rhs_l1(set, &state, cfg.collisions, 1.0),
                1.0,
            ));
        }
    }
    if let Err(e) = write_timeseries(&record, output) {
        eprintln!("output error: {e}");
        return EXIT_BUILD;
    }
    final_audit(&record);
    println!("OCTB: output={}", output.display());
    0
}

fn run_slab(cfg: &RunConfig, set: &CoefficientSet, node_density: Vec<f64>, output: &Path) -> u8 {
    let m = set.n_cells();
    let boundary = match cfg.boundary {
        BoundaryKind::Periodic => Boundary::Periodic,
        // free-stream inflow: ghost states frozen to the initial profile
        BoundaryKind::Inflow => Boundary::Inflow {
            left: node_density.clone(),
            right: node_density.clone(),
        },
    };
    let grid = match Grid1D::new(cfg.grid_nodes, cfg.grid_dx, boundary) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let mut n = Vec::with_capacity(m * cfg.grid_nodes);
    for node in 0..cfg.grid_nodes {
        let scale = match cfg.pulse {
            Some((lo, hi, amp)) if node >= lo && node < hi => amp,
            _ => 1.0,
        };
        n.extend(node_density.iter().map(|v| v * scale));
    }
    let mut p = Vec::with_capacity(cfg.grid_nodes);
    let mut e = Vec::with_capacity(cfg.grid_nodes);
    for node in 0..cfg.grid_nodes {
        let (pr, er) =
            octaboltz::diagnostics::reconstruct_moments(set, &n[node * m..(node + 1) * m]);
        p.push(pr);
        e.push(er);
    }
    let mut state = KineticState {
        t: 0.0,
        n_nodes: cfg.grid_nodes,
        n,
        p,
        e,
    };
    let opts = StepOptions {
        collisions: cfg.collisions,
        integrate_moments: cfg.integrate_moments,
    };
    let steps = (cfg.t_end / cfg.dt).round().max(1.0) as usize;
    let mut record = RunRecord {
        rows: Vec::new(),
        max_rescale_deviation: set.max_class_factor_deviation(),
    };
    record.push(audit_row(
        set,
        &state,
        rhs_l1(set, &state, cfg.collisions, grid.dx),
        grid.dx,
    ));
    for step in 1..=steps {
        state = match step_1d(set, &grid, &state, cfg.dt, opts) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("solver abort at t={}: {e}", state.t);
                return EXIT_SOLVER;
            }
        };
        if step % cfg.record_every == 0 || step == steps {
            record.push(audit_row(
                set,
                &state,
                rhs_l1(set, &state, cfg.collisions, grid.dx),
                grid.dx,
            ));
        }
    }
    if let Err(e) = write_timeseries(&record, output) {
        eprintln!("output error: {e}");
        return EXIT_BUILD;
    }
    final_audit(&record);
    println!("OCTB: output={}", output.display());
    0
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::BuildCoeffs { config, cache } => cmd_build(&config, cache, cli.threads),
        Command::Check { cache } => {
            init_threads(cli.threads, 0);
            cmd_check(&cache)
        }
        Command::Run {
            config,
            cache,
            output,
        } => cmd_run(&config, cache, output, cli.threads),
        Command::Info { cache } => {
            init_threads(cli.threads, 0);
            cmd_info(&cache)
        }
    };
    ExitCode::from(code)
}
