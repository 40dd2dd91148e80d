//! Field storage and the coupled state.
//!
//! All fields live on the whole-strip row layout of [`crate::geometry::Grid`] with
//! shape (rows, Nx), x fastest. Sharing the interface rows between fluid and solid
//! makes velocity and temperature continuity across the interfaces exact by
//! construction: there is only one number per interface node.

use ndarray::Array2;
use thiserror::Error;

pub use crate::geometry::Region;
use crate::geometry::Grid;

/// Scalar grid function on the whole strip, shape (rows, Nx).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub data: Array2<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            data: Array2::zeros((grid.whole_rows(), grid.spec.nx)),
        }
    }

    /// Sample f(x, y) at every node.
    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut s = Self::zeros(grid);
        for r in 0..grid.whole_rows() {
            let y = grid.y_rows[r];
            for (i, &x) in grid.x_coords.iter().enumerate() {
                s.data[[r, i]] = f(x, y);
            }
        }
        s
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn nx(&self) -> usize {
        self.data.ncols()
    }

    /// Largest |value| over all nodes.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }
}

/// Two-component vector grid function.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub x: ScalarField,
    pub y: ScalarField,
}

impl VectorField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            x: ScalarField::zeros(grid),
            y: ScalarField::zeros(grid),
        }
    }

    pub fn from_fns(
        grid: &Grid,
        fx: impl Fn(f64, f64) -> f64,
        fy: impl Fn(f64, f64) -> f64,
    ) -> Self {
        Self {
            x: ScalarField::from_fn(grid, fx),
            y: ScalarField::from_fn(grid, fy),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.x.max_abs().max(self.y.max_abs())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("buoyancy direction must be a unit vector or zero, got |e| = {0}")]
    BadBuoyancyDir(f64),
}

/// Physical coefficients of the coupled system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Params {
    /// Fluid viscosity.
    pub eps: f64,
    /// Elastic modulus of the walls.
    pub mu: f64,
    /// Fluid heat diffusivity.
    pub k1: f64,
    /// Solid heat diffusivity.
    pub k2: f64,
    /// Buoyancy direction; unit length, or zero to switch buoyancy off.
    pub e_dir: [f64; 2],
    /// Strip half-period in y (fluid layer thickness), copied from the domain.
    pub l: f64,
}

impl Params {
    pub fn validate(&self) -> Result<(), ParamError> {
        for (name, value) in [
            ("eps", self.eps),
            ("mu", self.mu),
            ("k1", self.k1),
            ("k2", self.k2),
            ("L", self.l),
        ] {
            if !(value > 0.0) {
                return Err(ParamError::NonPositive { name, value });
            }
        }
        let n = (self.e_dir[0] * self.e_dir[0] + self.e_dir[1] * self.e_dir[1]).sqrt();
        if n != 0.0 && (n - 1.0).abs() > 1e-12 {
            return Err(ParamError::BadBuoyancyDir(n));
        }
        Ok(())
    }

    /// max{2 eps, 2 k1, 2 k2, 1}, the constant floor in the growth-rate envelope.
    pub fn envelope_floor(&self) -> f64 {
        (2.0 * self.eps).max(2.0 * self.k1).max(2.0 * self.k2).max(1.0)
    }
}

/// Full unknown of the coupled system at one time level.
///
/// `v` holds the fluid velocity on fluid rows and the wall velocity w_t on solid
/// rows; the shared interface rows enforce the kinematic condition exactly.
/// `d` likewise holds fluid temperature on fluid rows and wall temperature on solid
/// rows. `w` is the wall displacement (zero on fluid interior rows). `p` is the
/// fluid pressure (zero on solid rows).
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub v: VectorField,
    pub w: VectorField,
    pub d: ScalarField,
    pub p: ScalarField,
    pub time: f64,
}

impl State {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            v: VectorField::zeros(grid),
            w: VectorField::zeros(grid),
            d: ScalarField::zeros(grid),
            p: ScalarField::zeros(grid),
            time: 0.0,
        }
    }

    /// Zero the rows where a field has no meaning: displacement on fluid interior
    /// rows, pressure on solid rows. Interface rows carry both displacement and
    /// pressure and are left alone.
    pub fn enforce_support(&mut self, grid: &Grid) {
        let [gl, gu] = grid.gamma_rows;
        for r in gl + 1..gu {
            for i in 0..grid.spec.nx {
                self.w.x.data[[r, i]] = 0.0;
                self.w.y.data[[r, i]] = 0.0;
            }
        }
        for r in (0..gl).chain(gu + 1..grid.whole_rows()) {
            for i in 0..grid.spec.nx {
                self.p.data[[r, i]] = 0.0;
            }
        }
    }
}

/// One evaluation of the source terms: fluid momentum and heat sources on the
/// fluid rows, wall momentum and heat sources on the solid rows. The pieces stay
/// separate because both sides contribute their own load on the shared
/// interface rows.
pub struct ForcingSample {
    pub f1: VectorField,
    pub f3: VectorField,
    pub f2: ScalarField,
    pub f4: ScalarField,
}

type ForcingFn = dyn Fn(&Grid, f64) -> ForcingSample + Send + Sync;

/// Time-dependent sources. `None` means identically zero and skips all source
/// work in the stepper.
pub struct Forcing {
    eval: Option<Box<ForcingFn>>,
}

impl Forcing {
    pub fn none() -> Self {
        Self { eval: None }
    }

    pub fn new(f: impl Fn(&Grid, f64) -> ForcingSample + Send + Sync + 'static) -> Self {
        Self { eval: Some(Box::new(f)) }
    }

    pub fn sample(&self, grid: &Grid, t: f64) -> Option<ForcingSample> {
        self.eval.as_ref().map(|f| f(grid, t))
    }
}
