//! Energy ledgers, weak-form residuals, twin-run stability experiments,
//! compatibility and regularity monitors, and fitted functional constants.
//!
//! Every quadratic quantity here is evaluated in the scheme's own quadrature
//! (trapezoid mass in y, cell differences for stiffness, spectral x), so the
//! reported energy is the one the integrator actually dissipates: an unforced
//! run shows a nonincreasing `total()` to rounding, not merely to truncation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::fields::{Forcing, Params, ScalarField, State, VectorField};
use crate::geometry::{build_grid, DomainSpec, Grid};
use crate::operators::{Domain, Ops, TraceLine};
use crate::stepper::{SchemeConfig, StepError, Stepper, WaveIntegrator};

/// Energy split and its rates at one instant.
#[derive(Debug, Clone, Copy)]
pub struct EnergyReport {
    pub t: f64,
    /// 1/2 (|v|^2 + |d|^2) over the whole strip, trapezoid mass.
    pub kinetic_thermal: f64,
    /// mu/2 |grad w|^2 over the wall layers, cell differences in y.
    pub elastic: f64,
    /// eps |grad v|^2 on fluid + k1 |grad d|^2 on fluid + k2 |grad d|^2 on walls.
    pub dissipation_rate: f64,
    /// (f, v) + (g, d) + (d e, v): forcing and buoyancy power.
    pub source_rate: f64,
    /// E(0) exp(C t) with the running fitted C; the raw report carries total().
    pub gronwall_bound: f64,
}

impl EnergyReport {
    pub fn total(&self) -> f64 {
        self.kinetic_thermal + self.elastic
    }
}

/// Cross form of the scheme stiffness on one region:
/// sum over cells of (delta a)(delta b)/h in y plus the spectral x part under
/// the region mass. `stiffness_form(f) = stiffness_inner(f, f)` is |grad f|^2.
fn stiffness_inner(ops: &Ops, a: &ScalarField, b: &ScalarField, dom: Domain) -> f64 {
    let grid = &ops.grid;
    let nx = grid.spec.nx;
    let hx = grid.hx();
    let [gl, gu] = grid.gamma_rows;
    let rows = grid.whole_rows();
    let cells: Vec<(usize, f64)> = match dom {
        Domain::Fluid => (gl..gu).map(|j| (j, grid.hy_f)).collect(),
        Domain::Solid => (0..gl).chain(gu..rows - 1).map(|j| (j, grid.hy_s)).collect(),
        Domain::Whole => {
            return stiffness_inner(ops, a, b, Domain::Fluid)
                + stiffness_inner(ops, a, b, Domain::Solid)
        }
    };
    let mut total = 0.0;
    for (j, h) in cells {
        for i in 0..nx {
            let da = a.data[[j + 1, i]] - a.data[[j, i]];
            let db = b.data[[j + 1, i]] - b.data[[j, i]];
            total += da * db / h;
        }
    }
    let dxa = ops.dx(a);
    let dxb = ops.dx(b);
    let w = |r: usize| match dom {
        Domain::Fluid => grid.weight_fluid(r),
        Domain::Solid => grid.weight_solid(r),
        Domain::Whole => unreachable!(),
    };
    for r in 0..rows {
        let wr = w(r);
        if wr == 0.0 {
            continue;
        }
        for i in 0..nx {
            total += wr * dxa.data[[r, i]] * dxb.data[[r, i]];
        }
    }
    total * hx
}

fn stiffness_inner_vec(ops: &Ops, a: &VectorField, b: &VectorField, dom: Domain) -> f64 {
    stiffness_inner(ops, &a.x, &b.x, dom) + stiffness_inner(ops, &a.y, &b.y, dom)
}

/// The conserved split of the scheme: (kinetic plus thermal, elastic).
pub fn scheme_energy(ops: &Ops, params: &Params, state: &State) -> (f64, f64) {
    let kin_th = 0.5
        * (ops.inner_vec_whole(&state.v, &state.v) + ops.inner_whole(&state.d, &state.d));
    let elastic = 0.5 * params.mu * stiffness_inner_vec(ops, &state.w, &state.w, Domain::Solid);
    (kin_th, elastic)
}

/// Instantaneous energy report. `gronwall_bound` is filled with `total()`;
/// EnergySeries overwrites it with the running fitted envelope.
pub fn energy_report(ops: &Ops, params: &Params, state: &State, forcing: &Forcing) -> EnergyReport {
    let (kinetic_thermal, elastic) = scheme_energy(ops, params, state);
    let dissipation_rate = params.eps * stiffness_inner_vec(ops, &state.v, &state.v, Domain::Fluid)
        + params.k1 * stiffness_inner(ops, &state.d, &state.d, Domain::Fluid)
        + params.k2 * stiffness_inner(ops, &state.d, &state.d, Domain::Solid);
    let e = params.e_dir;
    let mut source_rate = e[0] * ops.inner_fluid(&state.d, &state.v.x)
        + e[1] * ops.inner_fluid(&state.d, &state.v.y);
    if let Some(fs) = forcing.sample(&ops.grid, state.time) {
        source_rate += ops.inner_vec_fluid(&fs.f1, &state.v)
            + ops.inner_vec_solid(&fs.f3, &state.v)
            + ops.inner_fluid(&fs.f2, &state.d)
            + ops.inner_solid(&fs.f4, &state.d);
    }
    EnergyReport {
        t: state.time,
        kinetic_thermal,
        elastic,
        dissipation_rate,
        source_rate,
        gronwall_bound: kinetic_thermal + elastic,
    }
}

/// |(E(next) - E(prev))/dt + D_mid - S_mid| with midpoint rates; the discrete
/// balance defect of one step.
pub fn energy_balance_residual(prev: &EnergyReport, next: &EnergyReport) -> f64 {
    let dt = next.t - prev.t;
    let de = next.total() - prev.total();
    let dmid = 0.5 * (prev.dissipation_rate + next.dissipation_rate);
    let smid = 0.5 * (prev.source_rate + next.source_rate);
    (de / dt + dmid - smid).abs()
}

/// Running energy series: records reports and maintains the fitted exponent
/// C = max(0, max over samples of ln(E/E0)/t), so every recorded bound
/// E0 exp(C t) dominates the energy seen up to that sample.
#[derive(Default)]
pub struct EnergySeries {
    e0: Option<(f64, f64)>,
    c_fit: f64,
    pub reports: Vec<EnergyReport>,
}

impl EnergySeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(
        &mut self,
        ops: &Ops,
        params: &Params,
        state: &State,
        forcing: &Forcing,
    ) -> EnergyReport {
        let mut r = energy_report(ops, params, state, forcing);
        match self.e0 {
            None => {
                self.e0 = Some((r.t, r.total()));
                r.gronwall_bound = r.total();
            }
            Some((t0, e0)) => {
                let dt = r.t - t0;
                let e = r.total();
                if dt > 0.0 && e0 > 0.0 && e > 0.0 {
                    self.c_fit = self.c_fit.max((e / e0).ln() / dt);
                }
                r.gronwall_bound = e0 * (self.c_fit * dt).exp();
            }
        }
        self.reports.push(r);
        r
    }

    pub fn c_fit(&self) -> f64 {
        self.c_fit
    }

    pub fn e0(&self) -> f64 {
        self.e0.map(|(_, e)| e).unwrap_or(0.0)
    }
}

// ---- weak-form residuals ----

/// Sixteen velocity test functions: four x-independent tangential profiles
/// (L^2 - y^2) y^p spanning the whole strip, and twelve streamfunction fields
/// with y-quadratic fluid profiles (grid-exactly divergence free) continued
/// into the walls by linear ramps that vanish on the outer boundaries.
/// Orthonormalized in the combined L2 + stiffness inner product. Linear
/// combinations keep every constraint, so the whole bank is admissible: zero
/// on the outer walls and pointwise divergence free on the fluid rows, which
/// makes the discrete pressure force exactly orthogonal to it.
pub fn velocity_test_bank(ops: &Ops) -> Vec<VectorField> {
    let grid = &ops.grid;
    let l = grid.spec.l;
    let mut bank = Vec::with_capacity(16);
    for p in 0..4u32 {
        bank.push(VectorField {
            x: ScalarField::from_fn(grid, |_, y| (l * l - y * y) * y.powi(p as i32) / (l * l)),
            y: ScalarField::zeros(grid),
        });
    }
    let gs: [(fn(f64, f64) -> f64, fn(f64, f64) -> f64); 3] = [
        (|_l, _y| 1.0, |_l, _y| 0.0),
        (|_l, y| y, |_l, _y| 1.0),
        (|_l, y| y * y, |_l, y| 2.0 * y),
    ];
    for k in [1.0f64, 2.0] {
        for (g, dg) in gs {
            for variant in 0..2 {
                let field = VectorField {
                    x: ScalarField::from_fn(grid, |x, y| {
                        let trig = if variant == 0 { (k * x).cos() } else { (k * x).sin() };
                        let prof = if y.abs() <= l / 2.0 {
                            dg(l, y)
                        } else {
                            let gamma_y = (l / 2.0).copysign(y);
                            dg(l, gamma_y) * (l - y.abs()) / (l / 2.0)
                        };
                        prof * trig / k
                    }),
                    y: ScalarField::from_fn(grid, |x, y| {
                        let trig = if variant == 0 { (k * x).sin() } else { -(k * x).cos() };
                        let prof = if y.abs() <= l / 2.0 {
                            g(l, y)
                        } else {
                            let gamma_y = (l / 2.0).copysign(y);
                            g(l, gamma_y) * (l - y.abs()) / (l / 2.0)
                        };
                        prof * trig
                    }),
                };
                bank.push(field);
            }
        }
    }
    let inner = |a: &VectorField, b: &VectorField| {
        ops.inner_vec_whole(a, b)
            + stiffness_inner_vec(ops, a, b, Domain::Fluid)
            + stiffness_inner_vec(ops, a, b, Domain::Solid)
    };
    orthonormalize(&mut bank, inner, |f, c| {
        f.x.data.mapv_inplace(|v| v * c);
        f.y.data.mapv_inplace(|v| v * c);
    });
    bank
}

/// Sixteen temperature test functions: {1, y, y^2, y^3} times band-one and
/// band-two trigonometric factors, orthonormalized. The flux condition on the
/// outer walls is natural, so the bank carries no boundary constraint.
pub fn temperature_test_bank(ops: &Ops) -> Vec<ScalarField> {
    let grid = &ops.grid;
    let trigs: [fn(f64) -> f64; 4] = [|_| 1.0, |x| x.cos(), |x| x.sin(), |x| (2.0 * x).cos()];
    let mut bank = Vec::with_capacity(16);
    for p in 0..4u32 {
        for t in trigs {
            bank.push(ScalarField::from_fn(grid, |x, y| y.powi(p as i32) * t(x)));
        }
    }
    let inner = |a: &ScalarField, b: &ScalarField| {
        ops.inner_whole(a, b) + stiffness_inner(ops, a, b, Domain::Whole)
    };
    orthonormalize(&mut bank, inner, |f, c| f.data.mapv_inplace(|v| v * c));
    bank
}

trait AddAssignField {
    fn add_assign_field(&mut self, other: &Self);
}

impl AddAssignField for ScalarField {
    fn add_assign_field(&mut self, other: &Self) {
        self.data.zip_mut_with(&other.data, |a, &b| *a += b);
    }
}

impl AddAssignField for VectorField {
    fn add_assign_field(&mut self, other: &Self) {
        self.x.add_assign_field(&other.x);
        self.y.add_assign_field(&other.y);
    }
}

/// Modified Gram-Schmidt in the supplied inner product, one re-orthogonalization
/// sweep. `scale` multiplies a field by a constant in place.
fn orthonormalize<T: Clone + AddAssignField>(
    bank: &mut [T],
    inner: impl Fn(&T, &T) -> f64,
    scale: impl Fn(&mut T, f64),
) {
    let n = bank.len();
    for i in 0..n {
        for _ in 0..2 {
            for j in 0..i {
                let c = inner(&bank[i], &bank[j]);
                let mut bj = bank[j].clone();
                scale(&mut bj, -c);
                bank[i].add_assign_field(&bj);
            }
        }
        let norm = inner(&bank[i], &bank[i]).max(0.0).sqrt();
        assert!(norm > 1e-10, "test bank member {i} degenerated");
        scale(&mut bank[i], 1.0 / norm);
    }
}

/// Defect of one computed step against the continuum weak form, tested on the
/// two banks; returns (velocity residual, temperature residual), each the max
/// absolute pairing over its bank. First order in dt, second order in the grid.
pub fn weak_residual(
    ops: &Ops,
    params: &Params,
    prev: &State,
    next: &State,
    vbank: &[VectorField],
    tbank: &[ScalarField],
    forcing: &Forcing,
) -> (f64, f64) {
    let grid = &ops.grid;
    let dt = next.time - prev.time;
    let load = forcing.sample(grid, 0.5 * (prev.time + next.time));
    let e = params.e_dir;

    let mut vdot = VectorField::zeros(grid);
    vdot.x.data = (&next.v.x.data - &prev.v.x.data) / dt;
    vdot.y.data = (&next.v.y.data - &prev.v.y.data) / dt;
    let mut ddot = ScalarField::zeros(grid);
    ddot.data = (&next.d.data - &prev.d.data) / dt;

    let mut rv = 0.0_f64;
    for phi in vbank {
        let mut r = ops.inner_vec_whole(&vdot, phi)
            + ops.trilinear_b(&next.v, &next.v, phi, Domain::Fluid)
            + params.eps * stiffness_inner_vec(ops, &next.v, phi, Domain::Fluid)
            + params.mu * stiffness_inner_vec(ops, &next.w, phi, Domain::Solid)
            - ops.boundary_gamma(&next.v, &next.v, phi)
            - e[0] * ops.inner_fluid(&next.d, &phi.x)
            - e[1] * ops.inner_fluid(&next.d, &phi.y);
        if let Some(fs) = &load {
            r -= ops.inner_vec_fluid(&fs.f1, phi) + ops.inner_vec_solid(&fs.f3, phi);
        }
        rv = rv.max(r.abs());
    }

    let mut rt = 0.0_f64;
    for th in tbank {
        let mut r = ops.inner_whole(&ddot, th)
            + ops.trilinear_b_scalar(&next.v, &next.d, th, Domain::Fluid)
            + params.k1 * stiffness_inner(ops, &next.d, th, Domain::Fluid)
            + params.k2 * stiffness_inner(ops, &next.d, th, Domain::Solid)
            - ops.boundary_gamma_scalar(&next.v, &next.d, th);
        if let Some(fs) = &load {
            r -= ops.inner_fluid(&fs.f2, th) + ops.inner_solid(&fs.f4, th);
        }
        rt = rt.max(r.abs());
    }
    (rv, rt)
}

// ---- compatibility ----

/// Residual threshold below which initial data counts as compatible: far above
/// rounding on analytic data, far below any physical mismatch.
pub const COMPAT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct CompatibilityReport {
    /// max over both interfaces of |eps dn u1 - (u.n) u1 / 2 - mu dn w1|.
    pub tangential_stress_residual: f64,
    /// max over both interfaces of |k1 dn rho - (u.n) rho / 2 - k2 dn theta|.
    pub thermal_flux_residual: f64,
    pub passed: bool,
}

/// Check the interface matching conditions on initial data, one-sided traces
/// from each side. The normal stress component is balanced by the initial
/// pressure and is not a data constraint; only its tangential part is.
pub fn check_compatibility(ops: &Ops, params: &Params, state0: &State) -> CompatibilityReport {
    let grid = &ops.grid;
    let [gl, gu] = grid.gamma_rows;
    let mut stress = 0.0_f64;
    let mut flux = 0.0_f64;
    for (side, row, sign) in [
        (crate::operators::Side::Lower, gl, -1.0),
        (crate::operators::Side::Upper, gu, 1.0),
    ] {
        let dnu1 = ops.dn_fluid(&state0.v.x, side);
        let dnw1 = ops.dn_solid(&state0.w.x, side);
        let dnr = ops.dn_fluid(&state0.d, side);
        let dnth = ops.dn_solid(&state0.d, side);
        for i in 0..grid.spec.nx {
            let un = sign * state0.v.y.data[[row, i]];
            let rs = params.eps * dnu1[i]
                - 0.5 * un * state0.v.x.data[[row, i]]
                - params.mu * dnw1[i];
            let rf = params.k1 * dnr[i]
                - 0.5 * un * state0.d.data[[row, i]]
                - params.k2 * dnth[i];
            stress = stress.max(rs.abs());
            flux = flux.max(rf.abs());
        }
    }
    CompatibilityReport {
        tangential_stress_residual: stress,
        thermal_flux_residual: flux,
        passed: stress <= COMPAT_TOL && flux <= COMPAT_TOL,
    }
}

// ---- twin-run stability ----

#[derive(Debug, Clone, Copy)]
pub struct StabilityReport {
    pub t: f64,
    /// L2 distance of the velocities over the whole strip.
    pub chi_norm: f64,
    /// L2 distance of the temperatures over the whole strip.
    pub psi_norm: f64,
    /// mu |grad (w - w*)|^2 over the wall layers.
    pub f_seminorm: f64,
    /// Integrand of the stability exponent, evaluated on the base run.
    pub m_t: f64,
    /// D(0) exp(C_fit int M), with C_fit fitted over the whole run.
    pub gronwall_envelope: f64,
}

fn m_integrand(ops: &Ops, params: &Params, state: &State) -> f64 {
    params.envelope_floor()
        + ops.norm_h1(&state.d, Domain::Fluid).powi(2)
        + ops.trace_norm(&state.d, TraceLine::Gamma, 3).powi(3)
        + ops.norm_h1_vec(&state.v, Domain::Fluid).powi(2)
        + ops.trace_norm_vec(&state.v, TraceLine::Gamma, 3).powi(3)
}

fn l2_distance(ops: &Ops, a: &ScalarField, b: &ScalarField) -> f64 {
    let mut diff = a.clone();
    diff.data.zip_mut_with(&b.data, |x, &y| *x -= y);
    ops.norm_l2(&diff, Domain::Whole)
}

/// Perturbation shapes for the twin run: a whole-strip streamfunction field
/// built from the C1 piecewise-quadratic profile (exactly divergence free,
/// zero with its gradient on the outer walls) and a smooth temperature bump.
pub fn perturbation_shapes(grid: &Grid) -> (VectorField, ScalarField) {
    let l = grid.spec.l;
    let b = move |y: f64| {
        if y.abs() <= l / 2.0 {
            l * l / 2.0 - y * y
        } else {
            (y.abs() - l).powi(2)
        }
    };
    let db = move |y: f64| {
        if y.abs() <= l / 2.0 {
            -2.0 * y
        } else {
            2.0 * (y.abs() - l) * y.signum()
        }
    };
    let v = VectorField {
        x: ScalarField::from_fn(grid, |x, y| db(y) * x.sin() / (l * l)),
        y: ScalarField::from_fn(grid, |x, y| -b(y) * x.cos() / (l * l)),
    };
    let d = ScalarField::from_fn(grid, |x, y| (l * l - y * y) * x.cos() / (l * l));
    (v, d)
}

/// Run the base configuration and a twin whose initial velocity and
/// temperature are shifted by `delta` times the fixed perturbation shapes,
/// recording the distance, the stability integrand of the base run and the
/// fitted Gronwall envelope every `sample_every` steps (plus first and last).
pub fn stability_experiment(
    ops: &Ops,
    params: &Params,
    scheme: &SchemeConfig,
    state0: &State,
    forcing: &Forcing,
    delta: f64,
    sample_every: usize,
) -> Result<Vec<StabilityReport>, StepError> {
    scheme.validate()?;
    let grid = &ops.grid;
    let n_steps = (scheme.t_end / scheme.dt).round() as usize;
    let sample_every = sample_every.max(1);

    let mut twin0 = state0.clone();
    let (pv, pd) = perturbation_shapes(grid);
    twin0.v.x.data.zip_mut_with(&pv.x.data, |a, &b| *a += delta * b);
    twin0.v.y.data.zip_mut_with(&pv.y.data, |a, &b| *a += delta * b);
    twin0.d.data.zip_mut_with(&pd.data, |a, &b| *a += delta * b);

    let mut base_stepper = Stepper::new(ops, params, scheme)?;
    let mut twin_stepper = Stepper::new(ops, params, scheme)?;

    // (t, chi, psi, fsem, m, int M up to t)
    let mut samples: Vec<(f64, f64, f64, f64, f64, f64)> = Vec::new();
    let mut int_m = 0.0_f64;
    let mut m_prev = m_integrand(ops, params, state0);

    let observe = |t: f64,
                   base: &State,
                   twin: &State,
                   m: f64,
                   int_m: f64,
                   samples: &mut Vec<(f64, f64, f64, f64, f64, f64)>| {
        let chi = (l2_distance(ops, &base.v.x, &twin.v.x).powi(2)
            + l2_distance(ops, &base.v.y, &twin.v.y).powi(2))
        .sqrt();
        let psi = l2_distance(ops, &base.d, &twin.d);
        let mut fdiff = base.w.clone();
        fdiff.x.data.zip_mut_with(&twin.w.x.data, |a, &b| *a -= b);
        fdiff.y.data.zip_mut_with(&twin.w.y.data, |a, &b| *a -= b);
        let fsem = params.mu * stiffness_inner_vec(ops, &fdiff, &fdiff, Domain::Solid);
        samples.push((t, chi, psi, fsem, m, int_m));
    };

    observe(state0.time, state0, &twin0, m_prev, 0.0, &mut samples);
    let mut base = state0.clone();
    let mut twin = twin0;
    for n in 1..=n_steps {
        let (b_next, _) = base_stepper.advance(&base, forcing)?;
        let (t_next, _) = twin_stepper.advance(&twin, forcing)?;
        base = b_next;
        twin = t_next;
        let m = m_integrand(ops, params, &base);
        int_m += 0.5 * scheme.dt * (m_prev + m);
        m_prev = m;
        if n % sample_every == 0 || n == n_steps {
            observe(base.time, &base, &twin, m, int_m, &mut samples);
        }
    }

    let d0 = samples[0].1.powi(2) + samples[0].2.powi(2);
    let mut c_fit = 0.0_f64;
    if d0 > 0.0 {
        for s in &samples[1..] {
            let dn = s.1.powi(2) + s.2.powi(2);
            if dn > 0.0 && s.5 > 0.0 {
                c_fit = c_fit.max((dn / d0).ln() / s.5);
            }
        }
    }
    Ok(samples
        .into_iter()
        .map(|(t, chi, psi, fsem, m, im)| StabilityReport {
            t,
            chi_norm: chi,
            psi_norm: psi,
            f_seminorm: fsem,
            m_t: m,
            gronwall_envelope: d0 * (c_fit * im).exp(),
        })
        .collect())
}

// ---- regularity monitors ----

#[derive(Debug, Clone, Copy)]
pub struct RegularityReport {
    pub t: f64,
    /// |(v(next) - v(prev)) / dt| over the whole strip.
    pub vt_l2: f64,
    pub dt_l2: f64,
    /// |grad v| over the wall layers (the wall velocity gradient).
    pub grad_v_solid: f64,
    /// L2 of the forward x-difference quotient at spacing hx.
    pub dh_v_l2: f64,
    pub dh_d_l2: f64,
    /// |v| + |dx v| + |dxx v| over the fluid: an x-regularity proxy.
    pub h2_proxy_fluid: f64,
    /// |p| + |grad p| over the fluid.
    pub pressure_h1: f64,
}

pub fn regularity_report(ops: &Ops, prev: &State, next: &State) -> RegularityReport {
    let grid = &ops.grid;
    let dt = next.time - prev.time;
    let hx = grid.hx();

    let mut vdot = VectorField::zeros(grid);
    vdot.x.data = (&next.v.x.data - &prev.v.x.data) / dt;
    vdot.y.data = (&next.v.y.data - &prev.v.y.data) / dt;
    let mut ddot = ScalarField::zeros(grid);
    ddot.data = (&next.d.data - &prev.d.data) / dt;

    let dhvx = ops.diff_quotient_x(&next.v.x, hx).expect("hx is on grid");
    let dhvy = ops.diff_quotient_x(&next.v.y, hx).expect("hx is on grid");
    let dhd = ops.diff_quotient_x(&next.d, hx).expect("hx is on grid");

    let dxv = VectorField { x: ops.dx(&next.v.x), y: ops.dx(&next.v.y) };
    let dxxv = VectorField { x: ops.dxx(&next.v.x), y: ops.dxx(&next.v.y) };

    let dxp = ops.dx(&next.p);
    let dyp = ops.dy_fluid(&next.p);
    let grad_p = (ops.norm_l2(&dxp, Domain::Fluid).powi(2)
        + ops.norm_l2(&dyp, Domain::Fluid).powi(2))
    .sqrt();

    RegularityReport {
        t: next.time,
        vt_l2: ops.norm_l2_vec(&vdot, Domain::Whole),
        dt_l2: ops.norm_l2(&ddot, Domain::Whole),
        grad_v_solid: ops.norm_h1_semi_vec(&next.v, Domain::Solid),
        dh_v_l2: (ops.norm_l2(&dhvx, Domain::Whole).powi(2)
            + ops.norm_l2(&dhvy, Domain::Whole).powi(2))
        .sqrt(),
        dh_d_l2: ops.norm_l2(&dhd, Domain::Whole),
        h2_proxy_fluid: ops.norm_l2_vec(&next.v, Domain::Fluid)
            + ops.norm_l2_vec(&dxv, Domain::Fluid)
            + ops.norm_l2_vec(&dxxv, Domain::Fluid),
        pressure_h1: ops.norm_l2(&next.p, Domain::Fluid) + grad_p,
    }
}

// ---- random fields and fitted constants ----

/// Smooth random scalar field: trigonometric x-band times polynomial y-profiles
/// with decaying random coefficients. The law does not depend on the grid, so
/// refining the grid samples the same function class.
pub fn random_smooth_field(grid: &Grid, rng: &mut impl Rng) -> ScalarField {
    let mut coeffs = Vec::new();
    for k in 0..=4usize {
        for m in 0..=4usize {
            let decay = 1.0 / (1.0 + (k + m) as f64);
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            coeffs.push((k as f64, m as i32, a * decay, b * decay));
        }
    }
    ScalarField::from_fn(grid, move |x, y| {
        coeffs
            .iter()
            .map(|&(k, m, a, b)| (a * (k * x).cos() + b * (k * x).sin()) * y.powi(m))
            .sum()
    })
}

/// Random grid-exactly divergence-free fluid velocity: y-quadratic
/// streamfunction times a random band-limited trigonometric factor, zero
/// outside the fluid rows.
pub fn random_divergence_free(ops: &Ops, rng: &mut impl Rng) -> VectorField {
    let grid = &ops.grid;
    let [gl, gu] = grid.gamma_rows;
    let c: [f64; 3] = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let kmax = (grid.spec.nx / 3).min(5).max(1);
    let k = rng.random_range(1..=kmax) as f64;
    let (ca, sa): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    // Streamfunction psi = g(y) T(x) with u = (psi_y, -psi_x); g quadratic in y,
    // so every y stencil reproduces psi_y exactly and the discrete divergence
    // vanishes pointwise on the fluid rows.
    let g = move |y: f64| c[0] + c[1] * y + c[2] * y * y;
    let dg = move |y: f64| c[1] + 2.0 * c[2] * y;
    let trig = move |x: f64| ca * (k * x).cos() + sa * (k * x).sin();
    let dtrig = move |x: f64| k * (-ca * (k * x).sin() + sa * (k * x).cos());
    let mut u = VectorField {
        x: ScalarField::from_fn(grid, move |x, y| dg(y) * trig(x)),
        y: ScalarField::from_fn(grid, move |x, y| -g(y) * dtrig(x)),
    };
    for r in 0..grid.whole_rows() {
        if r < gl || r > gu {
            for i in 0..grid.spec.nx {
                u.x.data[[r, i]] = 0.0;
                u.y.data[[r, i]] = 0.0;
            }
        }
    }
    u
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantFit {
    pub nx: usize,
    /// Fitted C in |f|_L4 <= C (|f|_L2 + |grad f|_L2)^(1/2) |f|_L2^(1/2), fluid.
    pub ladyzhenskaya: f64,
    /// Fitted C in |f|_L2(Gamma) <= C |f|_H1(fluid)^(1/2) |f|_L2(fluid)^(1/2).
    pub trace: f64,
}

/// Fit the interpolation constants over `fields` random smooth fields at each
/// resolution. The same seed is used at every level, so each level evaluates
/// the same function class and the fits converge with the quadrature.
pub fn fitted_constants(
    l: f64,
    levels: &[usize],
    fields: usize,
    seed: u64,
) -> Result<Vec<ConstantFit>, crate::geometry::GridError> {
    let mut out = Vec::with_capacity(levels.len());
    for &n in levels {
        let grid = build_grid(DomainSpec { l, nx: n, ny_f: n, ny_s: n / 2 })?;
        let ops = Ops::new(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lady = 0.0_f64;
        let mut trace = 0.0_f64;
        for _ in 0..fields {
            let f = random_smooth_field(&ops.grid, &mut rng);
            let l2 = ops.norm_l2(&f, Domain::Fluid);
            let semi = ops.norm_h1_semi(&f, Domain::Fluid);
            let l4 = ops.norm_l4(&f, Domain::Fluid);
            let h1 = ops.norm_h1(&f, Domain::Fluid);
            let tr = ops.trace_norm(&f, TraceLine::Gamma, 2);
            if l2 > 0.0 {
                lady = lady.max(l4 / ((l2 + semi).sqrt() * l2.sqrt()));
                trace = trace.max(tr / (h1.sqrt() * l2.sqrt()));
            }
        }
        out.push(ConstantFit { nx: n, ladyzhenskaya: lady, trace });
    }
    Ok(out)
}

// ---- identity suite ----

#[derive(Debug, Clone)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Fast algebraic checks of the discrete structure: the trilinear interface
/// balance on random divergence-free fields, summation by parts for the
/// difference quotients, the interior projection, and wave-energy conservation.
pub fn identity_suite(seed: u64) -> Vec<IdentityCheck> {
    let mut out = Vec::new();
    let grid = build_grid(DomainSpec { l: 1.0, nx: 32, ny_f: 32, ny_s: 16 }).unwrap();
    let ops = Ops::new(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Trilinear form against the interface flux on divergence-free fields.
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let u = random_divergence_free(&ops, &mut rng);
        let kv = rng.random_range(1..=5) as f64;
        let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (c, d): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let v = VectorField {
            x: ScalarField::from_fn(&ops.grid, move |x, _| a * (kv * x).cos() + b * (kv * x).sin()),
            y: ScalarField::from_fn(&ops.grid, move |x, _| c * (kv * x).sin() + d * (kv * x).cos()),
        };
        let lhs = ops.trilinear_b(&u, &v, &v, Domain::Fluid);
        let rhs = ops.boundary_gamma(&u, &v, &v);
        let scale = ops.norm_h1_vec(&u, Domain::Fluid) * ops.norm_h1_vec(&v, Domain::Fluid).powi(2);
        worst = worst.max((lhs - rhs).abs() / scale.max(1e-300));
    }
    out.push(IdentityCheck {
        name: "trilinear form balances interface flux on divergence-free fields",
        residual: worst,
        tolerance: 1e-8,
        passed: worst <= 1e-8,
    });

    // Difference-quotient summation by parts.
    let f = random_smooth_field(&ops.grid, &mut rng);
    let h = 2.0 * ops.grid.hx();
    let df = ops.diff_quotient_x(&f, h).unwrap();
    let d2f = ops.second_diff_quotient_x(&f, h).unwrap();
    let lhs = ops.inner_whole(&f, &d2f);
    let rhs = -ops.norm_l2(&df, Domain::Whole).powi(2);
    let res = (lhs - rhs).abs() / rhs.abs().max(1e-300);
    out.push(IdentityCheck {
        name: "difference quotients sum by parts",
        residual: res,
        tolerance: 1e-12,
        passed: res <= 1e-12,
    });

    // Interior projection annihilates the divergence it controls.
    let raw = VectorField {
        x: random_smooth_field(&ops.grid, &mut rng),
        y: random_smooth_field(&ops.grid, &mut rng),
    };
    let (proj, _) = crate::pressure::project(&ops, &raw).expect("projection");
    let div = ops.div(&proj);
    let [gl, gu] = ops.grid.gamma_rows;
    let mut divmax = 0.0_f64;
    for r in gl + 1..gu {
        for i in 0..ops.grid.spec.nx {
            divmax = divmax.max(div.data[[r, i]].abs());
        }
    }
    out.push(IdentityCheck {
        name: "projection clears interior divergence",
        residual: divmax,
        tolerance: 1e-10,
        passed: divmax <= 1e-10,
    });

    // Wave-energy conservation of the clamped wall integrator.
    let params = Params { eps: 0.5, mu: 0.8, k1: 0.6, k2: 0.9, e_dir: [0.0, 1.0], l: 1.0 };
    let integ = WaveIntegrator::new(&ops, &params, 2e-3);
    let mut st = State::zeros(&ops.grid);
    let l = ops.grid.spec.l;
    st.w.x = ScalarField::from_fn(&ops.grid, |x, y| {
        if y.abs() >= l / 2.0 {
            (y.abs() - l / 2.0) * (l - y.abs()) * x.sin()
        } else {
            0.0
        }
    });
    st.w.y = ScalarField::from_fn(&ops.grid, |x, y| {
        if y.abs() >= l / 2.0 {
            (y.abs() - l / 2.0) * (l - y.abs()) * (2.0 * x).cos()
        } else {
            0.0
        }
    });
    let e0 = integ.energy(&st);
    for _ in 0..200 {
        st = integ.step(&st);
    }
    let drift = (integ.energy(&st) - e0).abs() / e0;
    out.push(IdentityCheck {
        name: "clamped wall integrator conserves its energy",
        residual: drift,
        tolerance: 1e-9,
        passed: drift <= 1e-9,
    });

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stepper::run_simulation;

    fn setup() -> (Ops, Params) {
        let grid = build_grid(DomainSpec { l: 1.0, nx: 16, ny_f: 12, ny_s: 6 }).unwrap();
        (
            Ops::new(grid),
            Params { eps: 0.5, mu: 0.8, k1: 0.6, k2: 0.9, e_dir: [0.0, 0.0], l: 1.0 },
        )
    }

    fn smooth_state(ops: &Ops) -> State {
        let grid = &ops.grid;
        let pi = std::f64::consts::PI;
        let mut s = State::zeros(grid);
        s.v = VectorField {
            x: ScalarField::from_fn(grid, |x, y| 0.2 * (pi * y).cos() * x.sin()),
            y: ScalarField::from_fn(grid, |x, y| 0.1 * (pi * y).cos() * x.cos()),
        };
        let (pv, _) = crate::pressure::project(ops, &s.v).unwrap();
        s.v = pv;
        let r = grid.whole_rows() - 1;
        for i in 0..grid.spec.nx {
            for c in [0, r] {
                s.v.x.data[[c, i]] = 0.0;
                s.v.y.data[[c, i]] = 0.0;
            }
        }
        s.d = ScalarField::from_fn(grid, |x, y| 0.3 * (pi * y).cos() * x.cos());
        s
    }

    #[test]
    fn unforced_energy_decays_and_balances() {
        let (ops, params) = setup();
        let scheme = SchemeConfig {
            dt: 2e-3,
            t_end: 0.04,
            adv_scheme: crate::stepper::AdvScheme::Ab2,
            diffusion_theta: 0.5,
            coupling_tol: 1e-10,
            max_substeps: 1,
        };
        let state0 = smooth_state(&ops);
        let forcing = Forcing::none();
        let mut series = EnergySeries::new();
        let mut prev: Option<EnergyReport> = None;
        let mut worst_balance = 0.0_f64;
        run_simulation(state0, &forcing, &params, &scheme, &ops, |_, s, _| {
            let r = series.observe(&ops, &params, s, &forcing);
            if let Some(p) = prev {
                worst_balance = worst_balance.max(energy_balance_residual(&p, &r));
                assert!(
                    r.total() <= p.total() * (1.0 + 1e-10),
                    "energy grew: {} -> {}",
                    p.total(),
                    r.total()
                );
            }
            prev = Some(r);
            Ok(())
        })
        .unwrap();
        let e0 = series.reports[0].total();
        let scale = e0.max(series.reports[0].dissipation_rate).max(1.0);
        assert!(worst_balance < 5e-2 * scale, "balance defect {worst_balance}");
        assert!(series.c_fit() == 0.0, "decaying run must fit C = 0");
    }

    #[test]
    fn test_banks_are_orthonormal_and_admissible() {
        let (ops, _) = setup();
        let vbank = velocity_test_bank(&ops);
        assert_eq!(vbank.len(), 16);
        let inner = |a: &VectorField, b: &VectorField| {
            ops.inner_vec_whole(a, b)
                + stiffness_inner_vec(&ops, a, b, Domain::Fluid)
                + stiffness_inner_vec(&ops, a, b, Domain::Solid)
        };
        for i in 0..16 {
            for j in 0..=i {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = inner(&vbank[i], &vbank[j]);
                assert!((got - want).abs() < 1e-9, "({i},{j}) inner {got}");
            }
        }
        let grid = &ops.grid;
        let [gl, gu] = grid.gamma_rows;
        let rlast = grid.whole_rows() - 1;
        for (m, phi) in vbank.iter().enumerate() {
            for i in 0..grid.spec.nx {
                assert!(phi.x.data[[0, i]].abs() < 1e-12, "member {m} outer x");
                assert!(phi.x.data[[rlast, i]].abs() < 1e-12);
                assert!(phi.y.data[[0, i]].abs() < 1e-12);
                assert!(phi.y.data[[rlast, i]].abs() < 1e-12);
            }
            let div = ops.div(phi);
            for r in gl..=gu {
                for i in 0..grid.spec.nx {
                    assert!(
                        div.data[[r, i]].abs() < 1e-10,
                        "member {m} divergence at ({r},{i}): {}",
                        div.data[[r, i]]
                    );
                }
            }
        }
        let tbank = temperature_test_bank(&ops);
        assert_eq!(tbank.len(), 16);
        let tinner = |a: &ScalarField, b: &ScalarField| {
            ops.inner_whole(a, b) + stiffness_inner(&ops, a, b, Domain::Whole)
        };
        for i in 0..16 {
            for j in 0..=i {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((tinner(&tbank[i], &tbank[j]) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn weak_residual_flags_a_corrupted_state() {
        let (ops, params) = setup();
        let scheme = SchemeConfig {
            dt: 1e-3,
            t_end: 0.0,
            adv_scheme: crate::stepper::AdvScheme::Ab2,
            diffusion_theta: 0.5,
            coupling_tol: 1e-10,
            max_substeps: 1,
        };
        let state0 = smooth_state(&ops);
        let forcing = Forcing::none();
        let (next, _) = crate::stepper::advance_one_step(&state0, &forcing, &params, &scheme, &ops)
            .unwrap();
        let vbank = velocity_test_bank(&ops);
        let tbank = temperature_test_bank(&ops);
        let (rv, rt) = weak_residual(&ops, &params, &state0, &next, &vbank, &tbank, &forcing);
        let mut corrupt = next.clone();
        corrupt.v.x.data.mapv_inplace(|v| v + 0.05);
        corrupt
            .d
            .data
            .mapv_inplace(|v| v + 0.05);
        let (cv, ct) = weak_residual(&ops, &params, &state0, &corrupt, &vbank, &tbank, &forcing);
        assert!(cv > 5.0 * rv, "corrupted velocity residual {cv} vs {rv}");
        assert!(ct > 5.0 * rt, "corrupted temperature residual {ct} vs {rt}");
    }

    #[test]
    fn compatibility_splits_clean_from_sheared_data() {
        let (ops, params) = setup();
        let grid = &ops.grid;
        // Compatible pair: fluid at rest, temperature chosen so the fluxes match.
        let mut ok = State::zeros(grid);
        let ratio = params.k1 / params.k2;
        let l = grid.spec.l;
        ok.d = ScalarField::from_fn(grid, move |_, y| {
            if y.abs() <= l / 2.0 {
                0.3 * y * y
            } else {
                ratio * 0.3 * y * y + 0.3 * (l * l / 4.0) * (1.0 - ratio)
            }
        });
        let rep = check_compatibility(&ops, &params, &ok);
        assert!(rep.passed, "clean data flagged: {rep:?}");
        assert!(rep.tangential_stress_residual < 1e-12);
        assert!(rep.thermal_flux_residual < 1e-12);

        // Shear misfit: u = (s y, 0) against a wall at rest.
        let s = 0.4;
        let mut bad = State::zeros(grid);
        bad.v.x = ScalarField::from_fn(grid, move |_, y| s * y);
        let rep = check_compatibility(&ops, &params, &bad);
        assert!(!rep.passed);
        let want = params.eps * s;
        assert!(
            (rep.tangential_stress_residual - want).abs() < 0.1 * want,
            "stress residual {} vs eps s = {want}",
            rep.tangential_stress_residual
        );
    }

    #[test]
    fn twin_runs_are_bitwise_equal_without_perturbation() {
        let (ops, params) = setup();
        let scheme = SchemeConfig {
            dt: 2e-3,
            t_end: 0.02,
            adv_scheme: crate::stepper::AdvScheme::Ab2,
            diffusion_theta: 0.5,
            coupling_tol: 1e-10,
            max_substeps: 1,
        };
        let state0 = smooth_state(&ops);
        let reports =
            stability_experiment(&ops, &params, &scheme, &state0, &Forcing::none(), 0.0, 2)
                .unwrap();
        for r in &reports {
            assert_eq!(r.chi_norm, 0.0, "twin diverged at t = {}", r.t);
            assert_eq!(r.psi_norm, 0.0);
            assert_eq!(r.f_seminorm, 0.0);
            assert_eq!(r.gronwall_envelope, 0.0);
        }
    }

    #[test]
    fn perturbed_twin_stays_under_its_envelope() {
        let (ops, params) = setup();
        let scheme = SchemeConfig {
            dt: 2e-3,
            t_end: 0.04,
            adv_scheme: crate::stepper::AdvScheme::Ab2,
            diffusion_theta: 0.5,
            coupling_tol: 1e-10,
            max_substeps: 1,
        };
        let state0 = smooth_state(&ops);
        let delta = 1e-6;
        let reports =
            stability_experiment(&ops, &params, &scheme, &state0, &Forcing::none(), delta, 2)
                .unwrap();
        let d0 = reports[0].chi_norm.powi(2) + reports[0].psi_norm.powi(2);
        assert!(d0 > 0.0, "perturbation did not register");
        let floor = params.envelope_floor();
        for r in &reports {
            let dn = r.chi_norm.powi(2) + r.psi_norm.powi(2);
            assert!(
                dn <= r.gronwall_envelope * 1.0001,
                "distance {dn} above envelope {} at t = {}",
                r.gronwall_envelope,
                r.t
            );
            assert!(r.m_t >= floor);
        }
        // The perturbation shape is divergence free on the grid.
        let (pv, _) = perturbation_shapes(&ops.grid);
        let div = ops.div(&pv);
        let [gl, gu] = ops.grid.gamma_rows;
        for r in gl + 1..gu {
            for i in 0..ops.grid.spec.nx {
                assert!(div.data[[r, i]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regularity_monitors_are_finite_and_scale() {
        let (ops, params) = setup();
        let scheme = SchemeConfig {
            dt: 1e-3,
            t_end: 0.0,
            adv_scheme: crate::stepper::AdvScheme::Ab2,
            diffusion_theta: 0.5,
            coupling_tol: 1e-10,
            max_substeps: 1,
        };
        let state0 = smooth_state(&ops);
        let (next, _) = crate::stepper::advance_one_step(&state0, &Forcing::none(), &params, &scheme, &ops)
            .unwrap();
        let r = regularity_report(&ops, &state0, &next);
        for (name, v) in [
            ("vt", r.vt_l2),
            ("dt", r.dt_l2),
            ("grad_v_solid", r.grad_v_solid),
            ("dh_v", r.dh_v_l2),
            ("dh_d", r.dh_d_l2),
            ("h2", r.h2_proxy_fluid),
            ("p_h1", r.pressure_h1),
        ] {
            assert!(v.is_finite() && v >= 0.0, "{name} = {v}");
        }
        assert!(r.h2_proxy_fluid > 0.0);
        assert!(r.dh_v_l2 > 0.0);
    }

    #[test]
    fn fitted_constants_stay_stable_under_refinement() {
        let fits = fitted_constants(1.0, &[8, 16, 32], 6, 7).unwrap();
        for w in fits.windows(2) {
            assert!(w[1].ladyzhenskaya <= w[0].ladyzhenskaya * 1.10);
            assert!(w[1].trace <= w[0].trace * 1.10);
        }
        for f in &fits {
            assert!(f.ladyzhenskaya > 0.0 && f.trace > 0.0);
        }
    }

    #[test]
    fn identity_suite_passes() {
        for check in identity_suite(11) {
            assert!(
                check.passed,
                "{}: residual {} over tolerance {}",
                check.name, check.residual, check.tolerance
            );
        }
    }
}
