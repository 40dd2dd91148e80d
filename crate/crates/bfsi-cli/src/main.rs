//! bfsi: drive the coupled strip solver from INI configs.
//!
//! Subcommands: `run` (full simulation with snapshot and CSV observers),
//! `mms` (convergence study against the config's closed-form solution),
//! `stability` (perturbed twin runs under the fitted growth envelope),
//! `check-compat` (interface compatibility of the initial data), and
//! `check-identities` (the discrete operator identity suite). Exit code 0 on
//! success, 1 when data fails validation, 2 on runtime errors.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use bfsi_core::{
    check_compatibility, identity_suite, load_config, regularity_report, run_simulation,
    stability_experiment, write_snapshot, write_timeseries_row, Config, ConfigError, Domain,
    DomainSpec, EnergySeries, Ops, RunSetup, State, StepError,
};

#[derive(Parser)]
#[command(name = "bfsi", version, about = "Coupled fluid / elastic-wall / heat solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulation a config describes, writing snapshots and series.
    Run { config: PathBuf },
    /// Convergence study against the [exact] fields over grid/dt refinements.
    Mms {
        config: PathBuf,
        /// Refinement levels; grid and step halve together per level.
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Twin runs with a perturbed start, reported against the fitted envelope.
    Stability {
        config: PathBuf,
        /// Size of the initial perturbation.
        #[arg(long)]
        delta: f64,
    },
    /// Check the initial data against the interface matching conditions.
    CheckCompat { config: PathBuf },
    /// Run the discrete operator identity suite (seeded from [output].seed).
    CheckIdentities { config: PathBuf },
}

enum AppError {
    Validation(String),
    Runtime(String),
}

impl AppError {
    fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 1,
            AppError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Validation(m) | AppError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(..) => AppError::Runtime(e.to_string()),
            _ => AppError::Validation(e.to_string()),
        }
    }
}

impl From<StepError> for AppError {
    fn from(e: StepError) -> Self {
        AppError::Runtime(e.to_string())
    }
}

fn runtime(e: impl fmt::Display) -> AppError {
    AppError::Runtime(e.to_string())
}

/// BFSI_WORKERS caps the solver's thread pool; unset means all cores.
fn init_workers() -> Result<(), AppError> {
    let Ok(raw) = std::env::var("BFSI_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| AppError::Validation(format!("BFSI_WORKERS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(runtime)
}

fn main() {
    let cli = Cli::parse();
    let result = init_workers().and_then(|()| match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Mms { config, levels } => cmd_mms(&config, levels),
        Command::Stability { config, delta } => cmd_stability(&config, delta),
        Command::CheckCompat { config } => cmd_check_compat(&config),
        Command::CheckIdentities { config } => cmd_check_identities(&config),
    });
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

/// Remove a stale series file so repeated runs produce identical bytes.
fn fresh(path: &Path) -> Result<(), AppError> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(runtime(format!("{}: {e}", path.display()))),
    }
}

fn cmd_run(config_path: &Path) -> Result<(), AppError> {
    let (config, setup) = load_config(config_path)?;
    let RunSetup { grid, state, forcing, projection_correction } = setup;
    println!("initial projection correction: {projection_correction:.3e}");

    let dir = &config.output.directory;
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let energy_csv = dir.join("energy.csv");
    let regularity_csv = dir.join("regularity.csv");
    fresh(&energy_csv)?;
    fresh(&regularity_csv)?;

    let ops = Ops::new(grid.clone());
    let scheme = config.scheme;
    let total_steps = (scheme.t_end / scheme.dt).round() as usize;
    let snapshot_every = config.output.snapshot_every;
    let series_every = config.output.series_every;

    let mut series = EnergySeries::new();
    let mut last_sampled: Option<State> = None;
    let mut snapshots = 0usize;
    let final_state = run_simulation(
        state,
        &forcing,
        &config.params,
        &scheme,
        &ops,
        |step, st, _report| {
            let observer_io = |e: &dyn fmt::Display| StepError::Observer(e.to_string());
            if step % series_every == 0 || step == total_steps {
                let report = series.observe(&ops, &config.params, st, &forcing);
                write_timeseries_row(&report, &energy_csv).map_err(|e| observer_io(&e))?;
                // The regularity quotients difference consecutive samples.
                if let Some(prev) = &last_sampled {
                    let reg = regularity_report(&ops, prev, st);
                    write_timeseries_row(&reg, &regularity_csv).map_err(|e| observer_io(&e))?;
                }
                last_sampled = Some(st.clone());
            }
            if step % snapshot_every == 0 || step == total_steps {
                let path = dir.join(format!("snap_{step:06}.snap"));
                write_snapshot(st, &grid, &path).map_err(|e| observer_io(&e))?;
                snapshots += 1;
            }
            Ok(())
        },
    )?;

    let last = series.reports.last().copied();
    let energy = last.map(|r| r.total()).unwrap_or(f64::NAN);
    println!(
        "reached t = {}, total energy = {energy:.6e}, {snapshots} snapshot(s), series in {}",
        final_state.time,
        dir.display()
    );
    Ok(())
}

struct LevelRow {
    spec: DomainSpec,
    dt: f64,
    err_u: f64,
    err_d: f64,
    err_w: f64,
}

/// One refinement level of the manufactured-solution study: run to T_end on a
/// scaled grid and measure L2 errors against the [exact] fields.
fn mms_level(config: &Config, level: usize) -> Result<LevelRow, AppError> {
    let scale = 1usize << level;
    let mut scaled = config.clone();
    scaled.domain = DomainSpec {
        l: config.domain.l,
        nx: config.domain.nx * scale,
        ny_f: config.domain.ny_f * scale,
        ny_s: config.domain.ny_s * scale,
    };
    scaled.scheme.dt = config.scheme.dt / scale as f64;
    let setup = scaled.realize()?;
    let ops = Ops::new(setup.grid.clone());
    let final_state = run_simulation(
        setup.state,
        &setup.forcing,
        &scaled.params,
        &scaled.scheme,
        &ops,
        |_, _, _| Ok(()),
    )?;
    let (u, d, w) = scaled.exact_fields(&setup.grid, final_state.time)?;

    let mut dv = final_state.v.clone();
    dv.x.data.zip_mut_with(&u.x.data, |a, &b| *a -= b);
    dv.y.data.zip_mut_with(&u.y.data, |a, &b| *a -= b);
    let mut dd = final_state.d.clone();
    dd.data.zip_mut_with(&d.data, |a, &b| *a -= b);
    let mut dw = final_state.w.clone();
    dw.x.data.zip_mut_with(&w.x.data, |a, &b| *a -= b);
    dw.y.data.zip_mut_with(&w.y.data, |a, &b| *a -= b);
    Ok(LevelRow {
        spec: scaled.domain,
        dt: scaled.scheme.dt,
        err_u: ops.norm_l2_vec(&dv, Domain::Fluid),
        err_d: ops.norm_l2(&dd, Domain::Whole),
        err_w: ops.norm_l2_vec(&dw, Domain::Solid),
    })
}

fn cmd_mms(config_path: &Path, levels: usize) -> Result<(), AppError> {
    if levels == 0 {
        return Err(AppError::Validation("mms needs at least one level".into()));
    }
    let (config, _) = load_config(config_path)?;
    if config.exact.is_none() {
        return Err(AppError::Validation(
            "manufactured-solution study needs an [exact] section".into(),
        ));
    }
    let mut rows = Vec::new();
    for level in 0..levels {
        let row = mms_level(&config, level)?;
        println!(
            "level {level}: nx={} ny_f={} ny_s={} dt={:.6e}  err_u={:.6e} err_d={:.6e} err_w={:.6e}",
            row.spec.nx, row.spec.ny_f, row.spec.ny_s, row.dt, row.err_u, row.err_d, row.err_w
        );
        rows.push(row);
    }
    for pair in rows.windows(2) {
        let order = |a: f64, b: f64| (a / b).log2();
        println!(
            "observed orders: u {:.2} d {:.2} w {:.2}",
            order(pair[0].err_u, pair[1].err_u),
            order(pair[0].err_d, pair[1].err_d),
            order(pair[0].err_w, pair[1].err_w)
        );
    }
    Ok(())
}

fn cmd_stability(config_path: &Path, delta: f64) -> Result<(), AppError> {
    let (config, setup) = load_config(config_path)?;
    let ops = Ops::new(setup.grid.clone());
    let samples = stability_experiment(
        &ops,
        &config.params,
        &config.scheme,
        &setup.state,
        &setup.forcing,
        delta,
        config.output.series_every,
    )?;

    let dir = &config.output.directory;
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let csv = dir.join("stability.csv");
    fresh(&csv)?;
    for s in &samples {
        write_timeseries_row(s, &csv).map_err(runtime)?;
    }

    let last = samples.last().expect("at least the initial sample");
    let distance = (last.chi_norm.powi(2) + last.psi_norm.powi(2)).sqrt();
    let enveloped = samples
        .iter()
        .all(|s| s.chi_norm.powi(2) + s.psi_norm.powi(2) <= s.gronwall_envelope * (1.0 + 1e-9));
    println!("delta = {delta:e}, samples = {}", samples.len());
    println!("final distance = {distance:.17e}");
    println!("envelope respected = {enveloped}");
    Ok(())
}

fn cmd_check_compat(config_path: &Path) -> Result<(), AppError> {
    let (config, setup) = load_config(config_path)?;
    let ops = Ops::new(setup.grid.clone());
    let report = check_compatibility(&ops, &config.params, &setup.state);
    println!("tangential_stress_residual = {:.17e}", report.tangential_stress_residual);
    println!("thermal_flux_residual = {:.17e}", report.thermal_flux_residual);
    println!("passed = {}", report.passed);
    if report.passed {
        Ok(())
    } else {
        Err(AppError::Validation("initial data violates the matching conditions".into()))
    }
}

fn cmd_check_identities(config_path: &Path) -> Result<(), AppError> {
    let (config, _) = load_config(config_path)?;
    let checks = identity_suite(config.output.seed);
    let mut all = true;
    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{}: residual {:.3e} tolerance {:.3e} {verdict}", c.name, c.residual, c.tolerance);
        all &= c.passed;
    }
    if all {
        Ok(())
    } else {
        Err(AppError::Validation("identity suite failed".into()))
    }
}
