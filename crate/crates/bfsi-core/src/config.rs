//! Run configuration: an INI-like text format wiring expressions to fields.
//!
//! Sections and keys are fixed; unknown names are errors so typos cannot
//! silently fall back to defaults. Values may be double-quoted (useful for
//! expressions); quotes are stripped. Loading parses every expression,
//! samples it over the grid, checks the initial data against the coupling
//! constraints, projects the initial velocity, and hands back a ready-to-run
//! setup.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::expr::{parse_expression, Expr};
use crate::fields::{Forcing, ForcingSample, Params, ScalarField, State, VectorField};
use crate::geometry::{build_grid, DomainSpec, Grid};
use crate::operators::{Domain, Ops};
use crate::pressure;
use crate::stepper::{AdvScheme, SchemeConfig};

/// Agreement tolerance for two expressions that must describe the same trace
/// (velocity and temperature continuity at the interfaces, clamped outer
/// walls). Rounding in distinct but equivalent formulas stays far below this.
pub const TRACE_TOL: f64 = 1e-9;

/// Interior divergence allowed after the initial projection.
pub const DIV_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct InitialExprs {
    pub u0: [Expr; 2],
    pub rho0: Expr,
    pub w0: [Expr; 2],
    pub w1: [Expr; 2],
    pub theta0: Expr,
}

#[derive(Debug, Clone)]
pub struct ForcingExprs {
    pub f1: [Expr; 2],
    pub f2: Expr,
    pub f3: [Expr; 2],
    pub f4: Expr,
}

/// Closed-form fields an `mms` study measures errors against. The velocity
/// covers the fluid rows, the displacement the solid rows, the merged
/// temperature everything.
#[derive(Debug, Clone)]
pub struct ExactExprs {
    pub u: [Expr; 2],
    pub d: Expr,
    pub w: [Expr; 2],
}

#[derive(Debug, Clone)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub snapshot_every: usize,
    pub series_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub domain: DomainSpec,
    pub params: Params,
    pub scheme: SchemeConfig,
    pub initial: InitialExprs,
    pub forcing: ForcingExprs,
    pub output: OutputConfig,
    pub exact: Option<ExactExprs>,
}

/// Everything a run needs, derived from a validated Config.
pub struct RunSetup {
    pub grid: Grid,
    pub state: State,
    pub forcing: Forcing,
    /// L2 size of the initial-projection correction (loader reports it).
    pub projection_correction: f64,
}

impl fmt::Debug for RunSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunSetup")
            .field("grid", &self.grid.spec)
            .field("t", &self.state.time)
            .field("projection_correction", &self.projection_correction)
            .finish_non_exhaustive()
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    /// Malformed line, unknown/duplicate name, bad literal; `where_` is
    /// "file:line".
    Syntax { where_: String, message: String },
    MissingKey { section: &'static str, key: &'static str },
    /// Expression rejected by the parser; offset is within the value string.
    Expr { where_: String, key: String, source: crate::expr::ParseError },
    /// A named invariant the realized data violates.
    Validation { invariant: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(path, e) => write!(f, "{}: {e}", path.display()),
            ConfigError::Syntax { where_, message } => write!(f, "{where_}: {message}"),
            ConfigError::MissingKey { section, key } => {
                write!(f, "missing key [{section}].{key}")
            }
            ConfigError::Expr { where_, key, source } => {
                write!(f, "{where_}: in {key}: {source}")
            }
            ConfigError::Validation { invariant } => write!(f, "validation failed: {invariant}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn validation(invariant: impl Into<String>) -> ConfigError {
    ConfigError::Validation { invariant: invariant.into() }
}

/// One raw value with the location it came from.
#[derive(Debug, Clone)]
struct RawValue {
    line: usize,
    text: String,
}

struct RawConfig {
    name: String,
    sections: BTreeMap<String, BTreeMap<String, RawValue>>,
}

const KNOWN_SECTIONS: [&str; 7] =
    ["domain", "params", "scheme", "initial", "forcing", "output", "exact"];

fn parse_raw(name: &str, text: &str) -> Result<RawConfig, ConfigError> {
    let mut sections: BTreeMap<String, BTreeMap<String, RawValue>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let where_ = format!("{name}:{lineno}");
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let Some(section) = rest.strip_suffix(']') else {
                return Err(ConfigError::Syntax {
                    where_,
                    message: "unterminated section header".into(),
                });
            };
            let section = section.trim();
            if !KNOWN_SECTIONS.contains(&section) {
                return Err(ConfigError::Syntax {
                    where_,
                    message: format!("unknown section [{section}]"),
                });
            }
            if sections.contains_key(section) {
                return Err(ConfigError::Syntax {
                    where_,
                    message: format!("duplicate section [{section}]"),
                });
            }
            sections.insert(section.to_string(), BTreeMap::new());
            current = Some(section.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                where_,
                message: "expected `key = value` or a [section] header".into(),
            });
        };
        let Some(section) = &current else {
            return Err(ConfigError::Syntax {
                where_,
                message: "key before any [section] header".into(),
            });
        };
        let key = key.trim().to_string();
        let mut value = value.trim().to_string();
        if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
            value = value[1..value.len() - 1].to_string();
        }
        let entry = sections.get_mut(section).unwrap();
        if entry.contains_key(&key) {
            return Err(ConfigError::Syntax {
                where_,
                message: format!("duplicate key {key} in [{section}]"),
            });
        }
        entry.insert(key, RawValue { line: lineno, text: value });
    }
    Ok(RawConfig { name: name.to_string(), sections })
}

impl RawConfig {
    fn where_at(&self, line: usize) -> String {
        format!("{}:{line}", self.name)
    }

    fn take(
        &mut self,
        section: &'static str,
        key: &'static str,
    ) -> Result<RawValue, ConfigError> {
        self.sections
            .get_mut(section)
            .and_then(|s| s.remove(key))
            .ok_or(ConfigError::MissingKey { section, key })
    }

    fn take_optional(&mut self, section: &'static str, key: &'static str) -> Option<RawValue> {
        self.sections.get_mut(section).and_then(|s| s.remove(key))
    }

    /// Every key must have been consumed by now.
    fn finish(self) -> Result<(), ConfigError> {
        for (section, keys) in &self.sections {
            if let Some((key, v)) = keys.iter().next() {
                return Err(ConfigError::Syntax {
                    where_: self.where_at(v.line),
                    message: format!("unknown key {key} in [{section}]"),
                });
            }
        }
        Ok(())
    }

    fn number<T: std::str::FromStr>(
        &mut self,
        section: &'static str,
        key: &'static str,
    ) -> Result<T, ConfigError> {
        let v = self.take(section, key)?;
        v.text.trim().parse::<T>().map_err(|_| ConfigError::Syntax {
            where_: self.where_at(v.line),
            message: format!("bad value {:?} for {key}", v.text),
        })
    }

    fn expr(&mut self, section: &'static str, key: &'static str) -> Result<Expr, ConfigError> {
        let v = self.take(section, key)?;
        parse_expression(&v.text).map_err(|e| ConfigError::Expr {
            where_: self.where_at(v.line),
            key: format!("[{section}].{key}"),
            source: e,
        })
    }
}

fn parse_config_text(name: &str, text: &str) -> Result<Config, ConfigError> {
    let mut raw = parse_raw(name, text)?;

    let domain = DomainSpec {
        l: raw.number("domain", "L")?,
        nx: raw.number("domain", "Nx")?,
        ny_f: raw.number("domain", "Ny_f")?,
        ny_s: raw.number("domain", "Ny_s")?,
    };

    let e_dir = match raw.take_optional("params", "e_dir") {
        Some(v) => {
            let parts: Vec<&str> = v.text.split(',').map(str::trim).collect();
            let bad = || ConfigError::Syntax {
                where_: raw.where_at(v.line),
                message: format!("e_dir wants two comma-separated numbers, got {:?}", v.text),
            };
            if parts.len() != 2 {
                return Err(bad());
            }
            let ex = parts[0].parse::<f64>().map_err(|_| bad())?;
            let ey = parts[1].parse::<f64>().map_err(|_| bad())?;
            [ex, ey]
        }
        None => [0.0, 1.0],
    };
    let params = Params {
        eps: raw.number("params", "epsilon")?,
        mu: raw.number("params", "mu")?,
        k1: raw.number("params", "k1")?,
        k2: raw.number("params", "k2")?,
        e_dir,
        l: domain.l,
    };

    let adv_scheme = match raw.take_optional("scheme", "adv_scheme") {
        Some(v) => match v.text.trim() {
            "ab2" | "AB2" => AdvScheme::Ab2,
            "rk2" | "RK2" => AdvScheme::Rk2,
            other => {
                return Err(ConfigError::Syntax {
                    where_: raw.where_at(v.line),
                    message: format!("adv_scheme must be ab2 or rk2, got {other:?}"),
                })
            }
        },
        None => AdvScheme::Ab2,
    };
    let diffusion_theta = match raw.take_optional("scheme", "diffusion_theta") {
        Some(v) => v.text.trim().parse::<f64>().map_err(|_| ConfigError::Syntax {
            where_: raw.where_at(v.line),
            message: format!("bad value {:?} for diffusion_theta", v.text),
        })?,
        None => 0.5,
    };
    let scheme = SchemeConfig {
        dt: raw.number("scheme", "dt")?,
        t_end: raw.number("scheme", "T_end")?,
        adv_scheme,
        diffusion_theta,
        coupling_tol: 1e-12,
        max_substeps: 1,
    };

    let initial = InitialExprs {
        u0: [raw.expr("initial", "u0_x")?, raw.expr("initial", "u0_y")?],
        rho0: raw.expr("initial", "rho0")?,
        w0: [raw.expr("initial", "w0_x")?, raw.expr("initial", "w0_y")?],
        w1: [raw.expr("initial", "w1_x")?, raw.expr("initial", "w1_y")?],
        theta0: raw.expr("initial", "theta0")?,
    };
    let forcing = ForcingExprs {
        f1: [raw.expr("forcing", "f1_x")?, raw.expr("forcing", "f1_y")?],
        f2: raw.expr("forcing", "f2")?,
        f3: [raw.expr("forcing", "f3_x")?, raw.expr("forcing", "f3_y")?],
        f4: raw.expr("forcing", "f4")?,
    };

    let directory = PathBuf::from(raw.take("output", "directory")?.text);
    let output = OutputConfig {
        directory,
        snapshot_every: raw.number("output", "snapshot_every")?,
        series_every: raw.number("output", "series_every")?,
        seed: match raw.take_optional("output", "seed") {
            Some(v) => v.text.trim().parse::<u64>().map_err(|_| ConfigError::Syntax {
                where_: raw.where_at(v.line),
                message: format!("bad value {:?} for seed", v.text),
            })?,
            None => 0,
        },
    };
    if output.snapshot_every == 0 || output.series_every == 0 {
        return Err(validation("snapshot_every and series_every must be at least 1"));
    }

    let exact = if raw.sections.contains_key("exact") {
        Some(ExactExprs {
            u: [raw.expr("exact", "u_x")?, raw.expr("exact", "u_y")?],
            d: raw.expr("exact", "d")?,
            w: [raw.expr("exact", "w_x")?, raw.expr("exact", "w_y")?],
        })
    } else {
        None
    };

    raw.finish()?;
    Ok(Config { domain, params, scheme, initial, forcing, output, exact })
}

/// Sample an expression at every node of the grid at one time; any non-finite
/// value rejects the config, naming the offender.
fn sample(
    grid: &Grid,
    expr: &Expr,
    t: f64,
    l: f64,
    what: &str,
) -> Result<ScalarField, ConfigError> {
    let mut field = ScalarField::zeros(grid);
    for r in 0..grid.whole_rows() {
        let y = grid.y_rows[r];
        for (i, &x) in grid.x_coords.iter().enumerate() {
            let v = expr.eval(x, y, t, l);
            if !v.is_finite() {
                return Err(validation(format!(
                    "{what} is {v} at (x, y) = ({x:.6}, {y:.6}), t = {t}"
                )));
            }
            field.data[[r, i]] = v;
        }
    }
    Ok(field)
}

fn sample_pair(
    grid: &Grid,
    exprs: &[Expr; 2],
    t: f64,
    l: f64,
    what: &str,
) -> Result<VectorField, ConfigError> {
    Ok(VectorField {
        x: sample(grid, &exprs[0], t, l, &format!("{what}_x"))?,
        y: sample(grid, &exprs[1], t, l, &format!("{what}_y"))?,
    })
}

/// Largest row mismatch between two fields along the given rows.
fn row_mismatch(a: &ScalarField, b: &ScalarField, rows: &[usize]) -> f64 {
    let mut worst: f64 = 0.0;
    for &r in rows {
        for i in 0..a.data.ncols() {
            worst = worst.max((a.data[[r, i]] - b.data[[r, i]]).abs());
        }
    }
    worst
}

impl Config {
    /// Build the grid, sample and validate the initial data, project the
    /// initial velocity, and wire the forcing closure.
    pub fn realize(&self) -> Result<RunSetup, ConfigError> {
        let grid = build_grid(self.domain)
            .map_err(|e| validation(format!("domain: {e}")))?;
        self.params.validate().map_err(|e| validation(format!("params: {e}")))?;
        self.scheme.validate().map_err(|e| validation(format!("scheme: {e}")))?;
        let ops = Ops::new(grid.clone());
        let l = self.domain.l;
        let [gl, gu] = grid.gamma_rows;
        let [ol, ou] = grid.gamma_out_rows;

        let u0 = sample_pair(&grid, &self.initial.u0, 0.0, l, "[initial].u0")?;
        let rho0 = sample(&grid, &self.initial.rho0, 0.0, l, "[initial].rho0")?;
        let w0 = sample_pair(&grid, &self.initial.w0, 0.0, l, "[initial].w0")?;
        let w1 = sample_pair(&grid, &self.initial.w1, 0.0, l, "[initial].w1")?;
        let theta0 = sample(&grid, &self.initial.theta0, 0.0, l, "[initial].theta0")?;

        // Trace agreement: the merged fields store one value per interface
        // node, so both descriptions must coincide there.
        let gamma = [gl, gu];
        let m = row_mismatch(&u0.x, &w1.x, &gamma).max(row_mismatch(&u0.y, &w1.y, &gamma));
        if m > TRACE_TOL {
            return Err(validation(format!(
                "velocity continuity: u0 and w1 differ by {m:.3e} on an interface"
            )));
        }
        let m = row_mismatch(&rho0, &theta0, &gamma);
        if m > TRACE_TOL {
            return Err(validation(format!(
                "temperature continuity: rho0 and theta0 differ by {m:.3e} on an interface"
            )));
        }
        let zero = ScalarField::zeros(&grid);
        let outer = [ol, ou];
        let m = row_mismatch(&w0.x, &zero, &outer).max(row_mismatch(&w0.y, &zero, &outer));
        if m > TRACE_TOL {
            return Err(validation(format!(
                "clamped walls: w0 reaches {m:.3e} on an outer boundary"
            )));
        }

        // Merge: fluid rows and interfaces take the fluid description, solid
        // interiors the wall's; sub-tolerance seams vanish by construction.
        let mut state = State::zeros(&grid);
        for r in 0..grid.whole_rows() {
            let fluid_side = r >= gl && r <= gu;
            for i in 0..grid.spec.nx {
                if fluid_side {
                    state.v.x.data[[r, i]] = u0.x.data[[r, i]];
                    state.v.y.data[[r, i]] = u0.y.data[[r, i]];
                    state.d.data[[r, i]] = rho0.data[[r, i]];
                } else {
                    state.v.x.data[[r, i]] = w1.x.data[[r, i]];
                    state.v.y.data[[r, i]] = w1.y.data[[r, i]];
                    state.d.data[[r, i]] = theta0.data[[r, i]];
                }
                if !fluid_side || r == gl || r == gu {
                    state.w.x.data[[r, i]] = w0.x.data[[r, i]];
                    state.w.y.data[[r, i]] = w0.y.data[[r, i]];
                }
            }
        }
        for &r in &outer {
            for i in 0..grid.spec.nx {
                state.w.x.data[[r, i]] = 0.0;
                state.w.y.data[[r, i]] = 0.0;
            }
        }

        // Clear interior divergence; the correction size is reported so a
        // config relying on heavy cleanup is visible.
        let (clean, _) = pressure::project(&ops, &state.v)
            .map_err(|e| validation(format!("initial projection: {e}")))?;
        let mut delta = clean.clone();
        delta.x.data.zip_mut_with(&state.v.x.data, |a, &b| *a -= b);
        delta.y.data.zip_mut_with(&state.v.y.data, |a, &b| *a -= b);
        let projection_correction = ops.norm_l2_vec(&delta, Domain::Fluid);
        state.v = clean;
        let div = ops.div(&state.v);
        let mut worst: f64 = 0.0;
        for r in gl + 1..gu {
            for i in 0..grid.spec.nx {
                worst = worst.max(div.data[[r, i]].abs());
            }
        }
        if worst > DIV_TOL {
            return Err(validation(format!(
                "initial velocity keeps interior divergence {worst:.3e} after projection"
            )));
        }

        let f1_0 = sample_pair(&grid, &self.forcing.f1, 0.0, l, "[forcing].f1")?;
        sample(&grid, &self.forcing.f2, 0.0, l, "[forcing].f2")?;
        sample_pair(&grid, &self.forcing.f3, 0.0, l, "[forcing].f3")?;
        sample(&grid, &self.forcing.f4, 0.0, l, "[forcing].f4")?;
        if let Some(exact) = &self.exact {
            sample_pair(&grid, &exact.u, 0.0, l, "[exact].u")?;
            sample(&grid, &exact.d, 0.0, l, "[exact].d")?;
            sample_pair(&grid, &exact.w, 0.0, l, "[exact].w")?;
        }

        state.p = pressure::initial_pressure(&ops, &self.params, &state.v, &state.w, &state.d, &f1_0)
            .map_err(|e| validation(format!("initial pressure: {e}")))?;
        state.enforce_support(&grid);

        let fx = self.forcing.clone();
        let forcing = Forcing::new(move |g: &Grid, t: f64| ForcingSample {
            f1: VectorField {
                x: ScalarField::from_fn(g, |x, y| fx.f1[0].eval(x, y, t, g.spec.l)),
                y: ScalarField::from_fn(g, |x, y| fx.f1[1].eval(x, y, t, g.spec.l)),
            },
            f2: ScalarField::from_fn(g, |x, y| fx.f2.eval(x, y, t, g.spec.l)),
            f3: VectorField {
                x: ScalarField::from_fn(g, |x, y| fx.f3[0].eval(x, y, t, g.spec.l)),
                y: ScalarField::from_fn(g, |x, y| fx.f3[1].eval(x, y, t, g.spec.l)),
            },
            f4: ScalarField::from_fn(g, |x, y| fx.f4.eval(x, y, t, g.spec.l)),
        });

        Ok(RunSetup { grid, state, forcing, projection_correction })
    }

    /// Evaluate the [exact] fields at one time on a grid (missing section is
    /// a named validation failure; the study cannot measure errors blind).
    pub fn exact_fields(
        &self,
        grid: &Grid,
        t: f64,
    ) -> Result<(VectorField, ScalarField, VectorField), ConfigError> {
        let Some(exact) = &self.exact else {
            return Err(validation("manufactured-solution study needs an [exact] section"));
        };
        let l = grid.spec.l;
        Ok((
            sample_pair(grid, &exact.u, t, l, "[exact].u")?,
            sample(grid, &exact.d, t, l, "[exact].d")?,
            sample_pair(grid, &exact.w, t, l, "[exact].w")?,
        ))
    }
}

/// Parse a config from text under a display name ("path:line" in errors).
pub fn parse_config(name: &str, text: &str) -> Result<Config, ConfigError> {
    parse_config_text(name, text)
}

/// Read, parse, and realize: the one-call entry the CLI uses.
pub fn load_config(path: &Path) -> Result<(Config, RunSetup), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
    let config = parse_config_text(&path.display().to_string(), &text)?;
    let setup = config.realize()?;
    Ok((config, setup))
}
