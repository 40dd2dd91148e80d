//! Convergence of the coupled stepper against a closed-form space-time solution.
//!
//! The exact fields below satisfy every interface and boundary condition of the
//! coupled system identically; the source terms absorb the PDE residuals. The
//! velocity is a single x-mode, so the x discretization is exact and the
//! measured spatial error isolates the y stencils and the time coupling.

use std::f64::consts::PI;

use bfsi_core::diagnostics::{temperature_test_bank, velocity_test_bank, weak_residual};
use bfsi_core::{
    build_grid, AdvScheme, DomainSpec, Forcing, ForcingSample, Grid, Ops, Params, ScalarField,
    SchemeConfig, State, Stepper, VectorField,
};
use bfsi_core::operators::Domain;

const EPS: f64 = 0.5;
const MU: f64 = 0.8;
const K1: f64 = 0.6;
const K2: f64 = 0.9;
const KAP: f64 = 2.0 * PI;

fn amp(t: f64) -> f64 {
    0.2 * t.cos()
}

fn wamp(t: f64) -> f64 {
    0.2 * (1.0 + t.sin())
}

fn u1(x: f64, y: f64, t: f64) -> f64 {
    amp(t) * KAP * (KAP * y).cos() * x.cos()
}

fn u2(x: f64, y: f64, t: f64) -> f64 {
    amp(t) * (KAP * y).sin() * x.sin()
}

fn dex(x: f64, y: f64, t: f64) -> f64 {
    amp(t) * (KAP * y).cos() * x.cos()
}

fn w1(x: f64, y: f64, t: f64) -> f64 {
    -wamp(t) * KAP * (PI * y).sin().powi(2) * x.cos()
}

fn w2(x: f64, y: f64, t: f64) -> f64 {
    0.5 * wamp(t) * (KAP * y).sin() * x.sin()
}

fn w1_t(x: f64, y: f64, t: f64) -> f64 {
    -0.2 * t.cos() * KAP * (PI * y).sin().powi(2) * x.cos()
}

fn w2_t(x: f64, y: f64, t: f64) -> f64 {
    0.1 * t.cos() * (KAP * y).sin() * x.sin()
}

fn p_bar(t: f64) -> f64 {
    KAP * (0.08 * (1.0 + t.sin()) - 0.1 * t.cos())
}

/// Merged velocity: fluid velocity inside the strip, wall velocity in the
/// layers; the two formulas agree on the interfaces.
fn v_exact(x: f64, y: f64, t: f64) -> (f64, f64) {
    if y.abs() <= 0.5 {
        (u1(x, y, t), u2(x, y, t))
    } else {
        (w1_t(x, y, t), w2_t(x, y, t))
    }
}

fn exact_state(grid: &Grid, t: f64) -> State {
    let mut s = State::zeros(grid);
    s.v.x = ScalarField::from_fn(grid, |x, y| v_exact(x, y, t).0);
    s.v.y = ScalarField::from_fn(grid, |x, y| v_exact(x, y, t).1);
    s.d = ScalarField::from_fn(grid, |x, y| dex(x, y, t));
    s.w.x = ScalarField::from_fn(grid, |x, y| w1(x, y, t));
    s.w.y = ScalarField::from_fn(grid, |x, y| w2(x, y, t));
    s.p = ScalarField::from_fn(grid, |x, _| p_bar(t) * x.sin());
    s.time = t;
    s.enforce_support(grid);
    s
}

fn forcing() -> Forcing {
    Forcing::new(|grid, t| {
        let a = amp(t);
        let at = -0.2 * t.sin();
        let b = wamp(t);
        let f1 = VectorField {
            x: ScalarField::from_fn(grid, move |x, y| {
                at * KAP * (KAP * y).cos() * x.cos() - 0.5 * a * a * KAP * KAP * (2.0 * x).sin()
                    + p_bar(t) * x.cos()
                    + EPS * a * KAP * (1.0 + KAP * KAP) * (KAP * y).cos() * x.cos()
            }),
            y: ScalarField::from_fn(grid, move |x, y| {
                at * (KAP * y).sin() * x.sin() + 0.5 * a * a * KAP * (2.0 * KAP * y).sin()
                    + EPS * a * (1.0 + KAP * KAP) * (KAP * y).sin() * x.sin()
                    - a * (KAP * y).cos() * x.cos()
            }),
        };
        let f2 = ScalarField::from_fn(grid, move |x, y| {
            at * (KAP * y).cos() * x.cos() - 0.5 * a * a * KAP * (2.0 * x).sin()
                + K1 * a * (1.0 + KAP * KAP) * (KAP * y).cos() * x.cos()
        });
        let f3 = VectorField {
            x: ScalarField::from_fn(grid, move |x, y| {
                let q = (PI * y).sin().powi(2);
                (0.2 * t.sin() * KAP * q
                    - MU * b * (KAP * q - 0.5 * KAP.powi(3) * (KAP * y).cos()))
                    * x.cos()
            }),
            y: ScalarField::from_fn(grid, move |x, y| {
                (-0.1 * t.sin() + 0.1 * MU * (1.0 + t.sin()) * (1.0 + KAP * KAP))
                    * (KAP * y).sin()
                    * x.sin()
            }),
        };
        let f4 = ScalarField::from_fn(grid, move |x, y| {
            (at + K2 * a * (1.0 + KAP * KAP)) * (KAP * y).cos() * x.cos()
        });
        ForcingSample { f1, f3, f2, f4 }
    })
}

fn params() -> Params {
    Params { eps: EPS, mu: MU, k1: K1, k2: K2, e_dir: [0.0, 1.0], l: 1.0 }
}

fn scheme(dt: f64, t_end: f64) -> SchemeConfig {
    SchemeConfig {
        dt,
        t_end,
        adv_scheme: AdvScheme::Ab2,
        diffusion_theta: 0.5,
        coupling_tol: 1e-12,
        max_substeps: 1,
    }
}

struct LevelErrors {
    u: f64,
    d: f64,
    w: f64,
}

/// Run the manufactured problem to t_end and return the final state.
fn run_states(nx: usize, ny_f: usize, ny_s: usize, dt: f64, t_end: f64) -> State {
    let grid = build_grid(DomainSpec { l: 1.0, nx, ny_f, ny_s }).unwrap();
    let ops = Ops::new(grid);
    let params = params();
    let forcing = forcing();
    let mut state = exact_state(&ops.grid, 0.0);
    // The y stencils are inexact on the trigonometric profile, so the sampled
    // initial velocity carries O(h^2) interior divergence; project it out.
    // The projection only moves interior fluid rows here, so the kinematic
    // interface values stay exact.
    let (clean, _) = bfsi_core::pressure::project(&ops, &state.v).unwrap();
    state.v = clean;
    let sc = scheme(dt, t_end);
    let mut stepper = Stepper::new(&ops, &params, &sc).unwrap();
    let n_steps = (t_end / dt).round() as usize;
    for _ in 0..n_steps {
        let (next, _) = stepper.advance(&state, &forcing).unwrap();
        state = next;
    }
    state
}

/// Run the manufactured problem to t_end; L2 errors per field over each
/// field's own region, and the final interface matching defect.
fn run_level(nx: usize, ny_f: usize, ny_s: usize, dt: f64, t_end: f64) -> LevelErrors {
    let grid = build_grid(DomainSpec { l: 1.0, nx, ny_f, ny_s }).unwrap();
    let ops = Ops::new(grid);
    let params = params();
    let forcing = forcing();
    let mut state = exact_state(&ops.grid, 0.0);
    let (clean, _) = bfsi_core::pressure::project(&ops, &state.v).unwrap();
    state.v = clean;
    let sc = scheme(dt, t_end);
    let mut stepper = Stepper::new(&ops, &params, &sc).unwrap();
    let n_steps = (t_end / dt).round() as usize;
    for _ in 0..n_steps {
        let (next, _) = stepper.advance(&state, &forcing).unwrap();
        state = next;
    }
    let exact = exact_state(&ops.grid, state.time);
    let mut dv = state.v.clone();
    dv.x.data.zip_mut_with(&exact.v.x.data, |a, &b| *a -= b);
    dv.y.data.zip_mut_with(&exact.v.y.data, |a, &b| *a -= b);
    let mut dd = state.d.clone();
    dd.data.zip_mut_with(&exact.d.data, |a, &b| *a -= b);
    let mut dw = state.w.clone();
    dw.x.data.zip_mut_with(&exact.w.x.data, |a, &b| *a -= b);
    dw.y.data.zip_mut_with(&exact.w.y.data, |a, &b| *a -= b);
    LevelErrors {
        u: ops.norm_l2_vec(&dv, Domain::Fluid),
        d: ops.norm_l2(&dd, Domain::Whole),
        w: ops.norm_l2_vec(&dw, Domain::Solid),
    }
}

fn order(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}

#[test]
fn spatial_orders_reach_second() {
    let levels = [(16usize, 4e-3), (32, 1e-3), (64, 2.5e-4)];
    let errs: Vec<LevelErrors> =
        levels.iter().map(|&(n, dt)| run_level(n, n, n / 2, dt, 0.5)).collect();
    for pair in errs.windows(2) {
        let ou = order(pair[0].u, pair[1].u);
        let od = order(pair[0].d, pair[1].d);
        let ow = order(pair[0].w, pair[1].w);
        println!(
            "errors ({:.3e}, {:.3e}, {:.3e}) -> ({:.3e}, {:.3e}, {:.3e}): orders u {ou:.2} d {od:.2} w {ow:.2}",
            pair[0].u, pair[0].d, pair[0].w, pair[1].u, pair[1].d, pair[1].w
        );
        assert!(ou >= 1.8, "velocity order {ou}");
        assert!(od >= 1.8, "temperature order {od}");
        assert!(ow >= 1.8, "displacement order {ow}");
    }
}

#[test]
fn temporal_orders_reach_first() {
    // Errors against the manufactured solution bottom out at the spatial
    // truncation of whatever grid is in use, which buries the time error of
    // the second-order pieces. Differencing against a small-step run on the
    // same grid cancels the spatial part exactly and isolates the step-size
    // behaviour.
    let (nx, ny_f, ny_s) = (16usize, 64usize, 32usize);
    let t_end = 0.5;
    let dts = [0.05, 0.025, 0.0125];
    let reference = run_states(nx, ny_f, ny_s, 0.0015625, t_end);
    let grid = build_grid(DomainSpec { l: 1.0, nx, ny_f, ny_s }).unwrap();
    let ops = Ops::new(grid);
    let errs: Vec<(f64, f64, f64)> = dts
        .iter()
        .map(|&dt| {
            let state = run_states(nx, ny_f, ny_s, dt, t_end);
            let mut dv = state.v.clone();
            dv.x.data.zip_mut_with(&reference.v.x.data, |a, &b| *a -= b);
            dv.y.data.zip_mut_with(&reference.v.y.data, |a, &b| *a -= b);
            let mut dd = state.d.clone();
            dd.data.zip_mut_with(&reference.d.data, |a, &b| *a -= b);
            let mut dw = state.w.clone();
            dw.x.data.zip_mut_with(&reference.w.x.data, |a, &b| *a -= b);
            dw.y.data.zip_mut_with(&reference.w.y.data, |a, &b| *a -= b);
            (
                ops.norm_l2_vec(&dv, Domain::Fluid),
                ops.norm_l2(&dd, Domain::Whole),
                ops.norm_l2_vec(&dw, Domain::Solid),
            )
        })
        .collect();
    for pair in errs.windows(2) {
        let ou = order(pair[0].0, pair[1].0);
        let od = order(pair[0].1, pair[1].1);
        let ow = order(pair[0].2, pair[1].2);
        println!(
            "temporal errors ({:.3e}, {:.3e}, {:.3e}) -> ({:.3e}, {:.3e}, {:.3e}): orders u {ou:.2} d {od:.2} w {ow:.2}",
            pair[0].0, pair[0].1, pair[0].2, pair[1].0, pair[1].1, pair[1].2
        );
        assert!(ou >= 0.9, "velocity temporal order {ou}");
        assert!(od >= 0.9, "temperature temporal order {od}");
        assert!(ow >= 0.9, "displacement temporal order {ow}");
    }
}

#[test]
fn interface_and_weak_residuals_halve_under_refinement() {
    let levels = [(16usize, 2e-3), (32, 1e-3), (64, 5e-4)];
    let mut iface = Vec::new();
    let mut weak_v = Vec::new();
    let mut weak_t = Vec::new();
    for &(n, dt) in &levels {
        let grid = build_grid(DomainSpec { l: 1.0, nx: n, ny_f: n, ny_s: n / 2 }).unwrap();
        let ops = Ops::new(grid);
        let params = params();
        let forcing = forcing();
        let mut state = exact_state(&ops.grid, 0.0);
        let (clean, _) = bfsi_core::pressure::project(&ops, &state.v).unwrap();
        state.v = clean;
        let sc = scheme(dt, 0.04);
        let mut stepper = Stepper::new(&ops, &params, &sc).unwrap();
        let n_steps = (0.04 / dt).round() as usize;
        let mut prev = state.clone();
        let mut last = None;
        for _ in 0..n_steps {
            let (next, report) = stepper.advance(&state, &forcing).unwrap();
            prev = state;
            state = next;
            last = Some(report);
        }
        iface.push(last.unwrap().interface_residual);
        let vbank = velocity_test_bank(&ops);
        let tbank = temperature_test_bank(&ops);
        let (rv, rt) = weak_residual(&ops, &params, &prev, &state, &vbank, &tbank, &forcing);
        weak_v.push(rv);
        weak_t.push(rt);
    }
    println!("interface residuals {iface:?}");
    println!("weak residuals v {weak_v:?} t {weak_t:?}");
    // The temperature residual undershoots its trend near 5e-6 and then sits
    // on a floor set by midpoint-versus-endpoint sampling of the loads, so the
    // halving demand only applies above that floor.
    let floor = 1e-5;
    for series in [&iface, &weak_v, &weak_t] {
        for pair in series.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!(
                ratio >= 1.8 || pair[1] <= floor,
                "residual ratio {ratio} in {series:?}"
            );
        }
    }
}
