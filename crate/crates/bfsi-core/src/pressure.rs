//! Pressure work: the Poisson solve on the fluid strip, the discrete Leray
//! projection, and the compatible initial pressure.
//!
//! Everything here runs mode by mode in x. The projection builds the literal
//! composition D_y D_y of the first-derivative matrix (one-sided rows on the
//! interfaces), so subtracting the discrete gradient of the solved potential
//! cancels the interior divergence identically, not just to truncation order.

use ndarray::Array2;
use num_complex::Complex64;
use thiserror::Error;

use crate::fields::{Params, ScalarField, VectorField};
use crate::geometry::Grid;
use crate::operators::{wavenumber, DenseLu, Ops, Side, Tridiag};

#[derive(Debug, Error)]
pub enum PoissonError {
    #[error("flux data incompatible with the source: integral mismatch {0:.3e}")]
    Incompatible(f64),
    #[error("projection system singular at x-mode {0}")]
    Singular(usize),
}

/// Boundary data on the two interfaces, physical space, length Nx each.
pub enum PoissonBc<'a> {
    /// Prescribed pressure values.
    Dirichlet { lower: &'a [f64], upper: &'a [f64] },
    /// Prescribed outward normal derivative; requires compatible data and
    /// returns the mean-zero representative.
    Neumann { lower: &'a [f64], upper: &'a [f64] },
}

fn spectrum_of_line(ops: &Ops, line: &[f64]) -> Vec<Complex64> {
    let mut f = ScalarField {
        data: Array2::zeros((1, line.len())),
    };
    for (i, &v) in line.iter().enumerate() {
        f.data[[0, i]] = v;
    }
    let hat = ops.forward(&f);
    (0..line.len()).map(|i| hat[[0, i]]).collect()
}

/// Solve -lap p = rhs on the fluid rows with the given interface data. The rhs is
/// read on fluid rows only. Dirichlet keeps the data as given (no gauge shift);
/// Neumann demands integral compatibility and returns the mean-zero solution.
pub fn solve_poisson(
    ops: &Ops,
    rhs: &ScalarField,
    bc: PoissonBc,
) -> Result<ScalarField, PoissonError> {
    let grid = &ops.grid;
    let nx = grid.spec.nx;
    let [gl, gu] = grid.gamma_rows;
    let n = gu - gl + 1;
    let h = grid.hy_f;

    if let PoissonBc::Neumann { lower, upper } = &bc {
        // Solvability of the pure-flux problem: the source must balance the
        // boundary flux. Gate scales with the data so zero problems pass clean.
        let mismatch = ops.integral_fluid(rhs)
            + ops.interface_integral(lower)
            + ops.interface_integral(upper);
        let scale = 1.0
            + rhs.max_abs()
            + lower.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
            + upper.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        if mismatch.abs() > 1e-10 * scale {
            return Err(PoissonError::Incompatible(mismatch));
        }
    }

    let rhs_hat = ops.forward(rhs);
    let (bl_hat, bu_hat) = match &bc {
        PoissonBc::Dirichlet { lower, upper } | PoissonBc::Neumann { lower, upper } => {
            (spectrum_of_line(ops, lower), spectrum_of_line(ops, upper))
        }
    };

    let mut sol_hat: Array2<Complex64> = Array2::zeros((grid.whole_rows(), nx));
    for i in 0..=nx / 2 {
        let k = wavenumber(i, nx);
        let k2 = k * k;
        let mut tri = Tridiag::zeros(n);
        let mut b = vec![Complex64::default(); n];
        match &bc {
            PoissonBc::Dirichlet { .. } => {
                tri.diag[0] = 1.0;
                b[0] = bl_hat[i];
                tri.diag[n - 1] = 1.0;
                b[n - 1] = bu_hat[i];
                for j in 1..n - 1 {
                    tri.sub[j] = -1.0 / (h * h);
                    tri.diag[j] = 2.0 / (h * h) + k2;
                    tri.sup[j] = -1.0 / (h * h);
                    b[j] = rhs_hat[[gl + j, i]];
                }
            }
            PoissonBc::Neumann { .. } => {
                // Symmetric variational rows with lumped mass; the boundary rows
                // carry the prescribed flux.
                tri.diag[0] = 1.0 / h + k2 * h / 2.0;
                tri.sup[0] = -1.0 / h;
                b[0] = rhs_hat[[gl, i]] * (h / 2.0) + bl_hat[i];
                tri.diag[n - 1] = 1.0 / h + k2 * h / 2.0;
                tri.sub[n - 1] = -1.0 / h;
                b[n - 1] = rhs_hat[[gu, i]] * (h / 2.0) + bu_hat[i];
                for j in 1..n - 1 {
                    tri.sub[j] = -1.0 / h;
                    tri.diag[j] = 2.0 / h + k2 * h;
                    tri.sup[j] = -1.0 / h;
                    b[j] = rhs_hat[[gl + j, i]] * h;
                }
                if i == 0 {
                    // Constants span the kernel; pin one value, re-gauge later.
                    tri.diag[0] = 1.0;
                    tri.sup[0] = 0.0;
                    b[0] = Complex64::default();
                }
            }
        }
        tri.factor().solve(&mut b);
        for j in 0..n {
            sol_hat[[gl + j, i]] = b[j];
        }
        if i != 0 && i != nx / 2 {
            for j in 0..n {
                sol_hat[[gl + j, nx - i]] = b[j].conj();
            }
        }
    }

    let mut p = ops.inverse(&sol_hat);
    if matches!(bc, PoissonBc::Neumann { .. }) {
        let mean = ops.integral_fluid(&p) / (2.0 * std::f64::consts::PI * grid.spec.l);
        for r in gl..=gu {
            for i in 0..nx {
                p.data[[r, i]] -= mean;
            }
        }
    }
    Ok(p)
}

/// Dense first-derivative matrix over the fluid rows: centered inside, one-sided
/// second-order rows at the two interfaces. Row-major n x n.
fn dy_dense(n: usize, h: f64) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    let c = 1.0 / (2.0 * h);
    d[0] = -3.0 * c;
    d[1] = 4.0 * c;
    d[2] = -c;
    let last = n - 1;
    d[last * n + last] = 3.0 * c;
    d[last * n + last - 1] = -4.0 * c;
    d[last * n + last - 2] = c;
    for j in 1..last {
        d[j * n + j - 1] = -c;
        d[j * n + j + 1] = c;
    }
    d
}

/// Per-mode factored projection systems, built once per grid.
///
/// Mode k != 0: solve (D_y D_y - k^2) phi = ik u1 + D_y u2 on interior rows with
/// one-sided D_y phi = 0 rows at both interfaces, then subtract (ik phi, D_y phi)
/// at interior rows. Because the operator is the literal composition of the same
/// D_y used afterwards, the corrected interior divergence telescopes to rounding.
/// Interface rows are never written: they carry the kinematic coupling.
///
/// Modes 0 and Nyquist carry no x-derivative; they are not handled here (the
/// stepper constrains mode 0 through the piston unknown, and the standalone
/// projector flattens them).
pub struct Projector {
    n: usize,
    gl: usize,
    nx: usize,
    dy: Vec<f64>,
    lus: Vec<Option<DenseLu>>,
}

impl Projector {
    pub fn new(grid: &Grid) -> Result<Self, PoissonError> {
        let [gl, gu] = grid.gamma_rows;
        let n = gu - gl + 1;
        let nx = grid.spec.nx;
        let dy = dy_dense(n, grid.hy_f);
        // Compose C = D_y * D_y once; per-|k| matrices differ on the diagonal only.
        let mut c = vec![0.0; n * n];
        for r in 0..n {
            for m in 0..n {
                let v = dy[r * n + m];
                if v == 0.0 {
                    continue;
                }
                for col in 0..n {
                    c[r * n + col] += v * dy[m * n + col];
                }
            }
        }
        let mut lus = vec![None; nx / 2 + 1];
        for kk in 1..nx / 2 {
            let k2 = (kk * kk) as f64;
            let mut a = vec![0.0; n * n];
            a[..n].copy_from_slice(&dy[..n]);
            a[(n - 1) * n..].copy_from_slice(&dy[(n - 1) * n..]);
            for r in 1..n - 1 {
                for col in 0..n {
                    a[r * n + col] = c[r * n + col];
                }
                a[r * n + r] -= k2;
            }
            lus[kk] = Some(DenseLu::factor(a, n).ok_or(PoissonError::Singular(kk))?);
        }
        Ok(Self {
            n,
            gl,
            nx,
            dy,
            lus,
        })
    }

    fn dy_apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let mut y = vec![Complex64::default(); n];
        for r in 0..n {
            let mut acc = Complex64::default();
            for col in 0..n {
                let v = self.dy[r * n + col];
                if v != 0.0 {
                    acc += x[col] * v;
                }
            }
            y[r] = acc;
        }
        y
    }

    /// Correct the fluid rows of the spectral velocity in place; returns the
    /// potential (spectral, fluid rows, zero elsewhere and on modes 0/Nyquist).
    pub fn project_hat(
        &self,
        u1h: &mut Array2<Complex64>,
        u2h: &mut Array2<Complex64>,
    ) -> Array2<Complex64> {
        let (rows, nx) = (u1h.nrows(), u1h.ncols());
        debug_assert_eq!(nx, self.nx);
        let n = self.n;
        let gl = self.gl;
        let mut phih: Array2<Complex64> = Array2::zeros((rows, nx));
        for i in 1..nx / 2 {
            let k = i as f64;
            let lu = self.lus[i].as_ref().expect("factored in new()");
            let u2col: Vec<Complex64> = (0..n).map(|j| u2h[[gl + j, i]]).collect();
            let du2 = self.dy_apply(&u2col);
            let mut b = vec![Complex64::default(); n];
            for j in 1..n - 1 {
                b[j] = Complex64::new(0.0, k) * u1h[[gl + j, i]] + du2[j];
            }
            lu.solve(&mut b);
            let dphi = self.dy_apply(&b);
            for j in 1..n - 1 {
                let r = gl + j;
                let du1 = Complex64::new(0.0, k) * b[j];
                u1h[[r, i]] -= du1;
                u2h[[r, i]] -= dphi[j];
                u1h[[r, nx - i]] -= du1.conj();
                u2h[[r, nx - i]] -= dphi[j].conj();
            }
            for j in 0..n {
                phih[[gl + j, i]] = b[j];
                phih[[gl + j, nx - i]] = b[j].conj();
            }
        }
        phih
    }
}

/// Discrete Leray projection of a velocity field on the fluid rows. Returns the
/// projected field and the potential that was subtracted.
///
/// Modes with an x-dependence are corrected by a potential gradient on interior
/// rows (interface rows keep their values). The x-mean and Nyquist parts of the
/// vertical component, whose divergence is purely d/dy, are flattened to their
/// weighted fluid mean, which is the L2-closest constant.
pub fn project(ops: &Ops, u: &VectorField) -> Result<(VectorField, ScalarField), PoissonError> {
    let grid = &ops.grid;
    let nx = grid.spec.nx;
    let [gl, gu] = grid.gamma_rows;
    let n = gu - gl + 1;

    let projector = Projector::new(grid)?;
    let mut u1h = ops.forward(&u.x);
    let mut u2h = ops.forward(&u.y);
    let orig1 = u1h.clone();
    let orig2 = u2h.clone();
    let phih = projector.project_hat(&mut u1h, &mut u2h);

    for i in [0, nx / 2] {
        let mut mean = Complex64::default();
        for j in 0..n {
            mean += u2h[[gl + j, i]] * grid.weight_fluid(gl + j);
        }
        mean /= grid.spec.l;
        for j in 0..n {
            u2h[[gl + j, i]] = mean;
        }
    }

    // Apply the correction as a physical-space increment so rows and modes the
    // projection never touched keep their exact values.
    let d1 = ops.inverse(&(&orig1 - &u1h));
    let d2 = ops.inverse(&(&orig2 - &u2h));
    let mut out = u.clone();
    for r in gl..=gu {
        for i in 0..nx {
            out.x.data[[r, i]] -= d1.data[[r, i]];
            out.y.data[[r, i]] -= d2.data[[r, i]];
        }
    }
    Ok((out, ops.inverse(&phih)))
}

/// Three-point (1/4, 1/2, 1/4) average in y on interior fluid rows; interface
/// rows pass through. Kills the y-Nyquist wiggle the projection cannot see.
pub fn filter_y_fluid(ops: &Ops, f: &ScalarField) -> ScalarField {
    let grid = &ops.grid;
    let [gl, gu] = grid.gamma_rows;
    let mut out = f.clone();
    for r in gl + 1..gu {
        for i in 0..grid.spec.nx {
            out.data[[r, i]] =
                0.25 * f.data[[r - 1, i]] + 0.5 * f.data[[r, i]] + 0.25 * f.data[[r + 1, i]];
        }
    }
    out
}

/// Compatible initial pressure: -lap p0 = div(u0 . grad u0 - rho0 e - f1(0)) with
/// the normal-stress Dirichlet trace on the interfaces.
pub fn initial_pressure(
    ops: &Ops,
    params: &Params,
    u0: &VectorField,
    w0: &VectorField,
    rho0: &ScalarField,
    f1_0: &VectorField,
) -> Result<ScalarField, PoissonError> {
    let grid = &ops.grid;
    let nx = grid.spec.nx;
    let [gl, gu] = grid.gamma_rows;

    let adv = ops.advect_vector(u0, u0);
    let mut bundle = VectorField::zeros(grid);
    for r in gl..=gu {
        for i in 0..nx {
            bundle.x.data[[r, i]] =
                adv.x.data[[r, i]] - params.e_dir[0] * rho0.data[[r, i]] - f1_0.x.data[[r, i]];
            bundle.y.data[[r, i]] =
                adv.y.data[[r, i]] - params.e_dir[1] * rho0.data[[r, i]] - f1_0.y.data[[r, i]];
        }
    }
    let rhs = ops.div(&bundle);

    let mut lower = vec![0.0; nx];
    let mut upper = vec![0.0; nx];
    for (side, row, out) in [
        (Side::Lower, gl, &mut lower),
        (Side::Upper, gu, &mut upper),
    ] {
        let sign = grid.normal_sign(row).expect("interface row");
        let dnu = ops.dn_fluid(&u0.y, side);
        let dnw = ops.dn_solid(&w0.y, side);
        for i in 0..nx {
            let un = sign * u0.y.data[[row, i]];
            out[i] = sign * (params.eps * dnu[i] - params.mu * dnw[i]) - 0.5 * un * un;
        }
    }

    solve_poisson(
        ops,
        &rhs,
        PoissonBc::Dirichlet {
            lower: &lower,
            upper: &upper,
        },
    )
}
