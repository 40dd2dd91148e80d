//! Solver core for an incompressible, heat-carrying fluid occupying a periodic strip,
//! coupled across two fixed horizontal interfaces to linear elastic, heat-conducting
//! walls. Fourier in x, second-order finite differences in y, semi-implicit stepping
//! with the pressure eliminated per mode through a Schur complement. The
//! `diagnostics` module carries the verification machinery (energy accounting, weak
//! residuals, stability twins, inequality fits).

pub mod config;
pub mod diagnostics;
pub mod expr;
pub mod fields;
pub mod geometry;
pub mod io;
pub mod operators;
pub mod pressure;
pub mod stepper;

pub use diagnostics::{
    check_compatibility, energy_report, fitted_constants, identity_suite, regularity_report,
    stability_experiment, weak_residual, CompatibilityReport, ConstantFit, EnergyReport,
    EnergySeries, IdentityCheck, RegularityReport, StabilityReport, COMPAT_TOL,
};
pub use config::{load_config, parse_config, Config, ConfigError, RunSetup};
pub use expr::{parse_expression, Expr, ParseError};
pub use io::{read_snapshot, write_snapshot, write_timeseries_row, CsvRow, Snapshot, SnapshotError};
pub use fields::{Forcing, ForcingSample, Params, Region, ScalarField, State, VectorField};
pub use geometry::{build_grid, DomainSpec, Grid};
pub use operators::{Domain, Ops, Side, TraceLine};
pub use stepper::{
    advance_one_step, run_simulation, AdvScheme, SchemeConfig, StepError, StepReport, Stepper,
    WaveIntegrator,
};
