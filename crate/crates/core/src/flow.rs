//! The Dirichlet-boundary heat flow to the Poisson metric equation, the
//! shrinking-truncation continuation, and destabilizer extraction.
//!
//! All PDE work happens in the unitary frame of the model metric: the state
//! is the Hermitian positive definite intertwiner `h = H₀^{-1}H`, pinned to
//! the identity on the boundary circles. The flow is
//! `h⁻¹ ∂_t h = -(K(H) - cI)` with
//! `K(H) = K(H₀) - ¼E^{-1} Σ_i ∇_i(h^{-1} ∇̂⁰_i h)`.
//!
//! Two drivers share that right-hand side:
//!
//! * [`Strategy::Explicit`] — forward Euler with the parabolic CFL bound
//!   `dt ≤ κ·min(E)·min(dx,dy)²` and step halving on positivity violations.
//!   This is the honest flow; its monitors (monotone `sup|K-cI|`, conserved
//!   `det h`) carry the dynamical content.
//! * [`Strategy::Accelerated`] — the locally time-rescaled flow
//!   `∂_s h = -E·h(K-cI)` with the flat Laplacian treated implicitly
//!   (FFT + tridiagonal solves per step). Same steady states, no `min(E)`
//!   stiffness, used when `E = sech²x` makes explicit stepping infeasible.

use crate::bundle::{enumerate_flat_subbundles, slope, FlatBundleSpec, FlatSubbundleSpec};
use crate::error::{Error, Result};
use crate::grid::{build_grid, ConformalPreset, CylinderGrid, ScalarField, SpectralSolver};
use crate::linalg::{mul_into, CMat, C64, ONE, ZERO};
use crate::model::{
    covariant_derivative, EndomorphismField, Frame, MatrixField, ModelGeometry,
};
use serde::Serialize;

pub const POSITIVITY_FLOOR: f64 = 1e-12;

/// K(H) for `h = H₀^{-1}H` given in the unitary frame.
///
/// Errors with `SingularH` when some node drops below the positivity floor.
pub fn curvature_k(h: &EndomorphismField, geom: &ModelGeometry) -> Result<EndomorphismField> {
    if h.frame != Frame::Unitary {
        return Err(Error::FrameMismatch {
            expected: Frame::Unitary,
            got: h.frame,
        });
    }
    if !all_posdef(h, POSITIVITY_FLOOR) {
        return Err(Error::SingularH(format!(
            "h not positive definite above the {POSITIVITY_FLOOR} floor"
        )));
    }
    Ok(curvature_k_unchecked(h, geom))
}

/// Same as [`curvature_k`] without the positivity scan (the steppers check
/// positivity themselves when accepting steps).
pub fn curvature_k_unchecked(h: &EndomorphismField, geom: &ModelGeometry) -> EndomorphismField {
    let mut k = crate::model::compact_h_divergence(
        &geom.conn,
        &geom.conn_hat,
        h,
        &geom.e_field,
        -0.25,
    );
    for (kv, k0) in k.values.iter_mut().zip(geom.k0.values.iter()) {
        *kv += k0;
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Explicit,
    Accelerated,
    Auto,
}

#[derive(Debug, Clone)]
pub enum InitialData {
    /// h = I: the canonical flow initial condition H(0) = H₀.
    Identity,
    /// exp of a seeded smooth traceless Hermitian perturbation vanishing on
    /// the boundary circles.
    SeededPerturbation { seed: u64, amplitude: f64 },
    /// Caller-supplied field (boundary rows are reset to the identity).
    Given(EndomorphismField),
}

#[derive(Debug, Clone)]
pub struct FlowOptions {
    pub kappa_cfl: f64,
    pub tol: f64,
    pub t_max: f64,
    pub max_steps: usize,
    pub det_renormalize: bool,
    pub strategy: Strategy,
    pub record_every: usize,
    pub initial: InitialData,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            kappa_cfl: 0.2,
            tol: 1e-8,
            t_max: 1e4,
            max_steps: 2_000_000,
            det_renormalize: false,
            strategy: Strategy::Auto,
            record_every: 25,
            initial: InitialData::Identity,
        }
    }
}

/// One row of the monitor time series.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonitorSample {
    pub t: f64,
    pub sup_k_minus_c: f64,
    pub sup_tr_h: f64,
    pub max_det_drift: f64,
    pub energy: f64,
}

/// Flow state: the intertwiner, flow time, current step size and the latest
/// residual. Boundary rows stay the identity at all times.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub h: EndomorphismField,
    pub t: f64,
    pub dt: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowReport {
    pub converged: bool,
    pub final_residual: f64,
    /// Fitted decay rate of sup|K-cI|² against the driver's time variable.
    pub decay_rate: Option<f64>,
    pub steps: usize,
    pub time: f64,
    pub strategy: Strategy,
    /// "flow-time" for the explicit driver, "rescaled-time" otherwise.
    pub time_variable: &'static str,
    pub monitors: Vec<MonitorSample>,
    /// Largest deviation of boundary rows from the identity seen.
    pub boundary_identity_dev: f64,
    /// x-coordinate where sup Tr h was last achieved.
    pub sup_tr_argmax_x: f64,
    pub sup_tr_h: f64,
    pub diagnosis: Option<String>,
}

pub struct FlowRun {
    pub report: FlowReport,
    pub state: FlowState,
}

/// Build the initial intertwiner per the options.
pub fn initial_h(geom: &ModelGeometry, initial: &InitialData) -> EndomorphismField {
    let n = geom.bundle.rank;
    match initial {
        InitialData::Identity => MatrixField::identity(geom.grid, Frame::Unitary, n),
        InitialData::Given(f) => {
            let mut h = f.clone();
            reset_boundary(&mut h);
            hermitize_field(&mut h);
            h
        }
        InitialData::SeededPerturbation { seed, amplitude } => {
            let mut rng = crate::rng::seeded(*seed);
            // a few low Fourier modes, zero at x = ±X, traceless Hermitian
            let g = geom.grid;
            let mut coeff = Vec::new();
            for kx in 1..=2usize {
                let mut m = CMat::zeros(n);
                for r in 0..n {
                    for cc in r..n {
                        let re = crate::rng::normal(&mut rng);
                        let im = if cc > r { crate::rng::normal(&mut rng) } else { 0.0 };
                        m[(r, cc)] = C64::new(re, im);
                        m[(cc, r)] = m[(r, cc)].conj();
                    }
                }
                let tr = m.trace() / n as f64;
                for k in 0..n {
                    m[(k, k)] -= tr;
                }
                let ky = kx % 2;
                let phase = crate::rng::normal(&mut rng);
                coeff.push((m, kx, ky, phase));
            }
            MatrixField::from_fn(g, Frame::Unitary, n, |i, j| {
                let x = g.x(i);
                let y = g.y(j);
                let mut p = CMat::zeros(n);
                for (m, kx, ky, phase) in &coeff {
                    let w = amplitude
                        * (*kx as f64 * std::f64::consts::PI * (x + g.x_half) / (2.0 * g.x_half))
                            .sin()
                        * (*ky as f64 * y + phase).cos();
                    p = p.add(&m.scale(C64::new(w / 2.0, 0.0)));
                }
                p.exp_hermitian()
            })
        }
    }
}

fn reset_boundary(h: &mut EndomorphismField) {
    let g = h.grid;
    let n = h.n;
    for &i in &[0usize, g.nx] {
        for j in 0..g.ny {
            let m = h.at_mut(i, j);
            for r in 0..n {
                for c in 0..n {
                    m[r * n + c] = if r == c { ONE } else { ZERO };
                }
            }
        }
    }
}

fn hermitize_field(h: &mut EndomorphismField) {
    let n = h.n;
    for chunk in h.values.chunks_mut(n * n) {
        for r in 0..n {
            for c in r..n {
                let m = 0.5 * (chunk[r * n + c] + chunk[c * n + r].conj());
                chunk[r * n + c] = m;
                chunk[c * n + r] = m.conj();
            }
        }
    }
}

/// False if any node fails the positive-definiteness floor.
fn all_posdef(h: &EndomorphismField, floor: f64) -> bool {
    let n = h.n;
    let mut m = CMat::zeros(n);
    for chunk in h.values.chunks(n * n) {
        m.a.copy_from_slice(chunk);
        if m.posdef_det(floor).is_none() {
            return false;
        }
    }
    true
}

fn max_det_drift(h: &EndomorphismField) -> f64 {
    let n = h.n;
    let mut m = CMat::zeros(n);
    let mut worst = 0.0f64;
    for chunk in h.values.chunks(n * n) {
        m.a.copy_from_slice(chunk);
        let d = m.det().norm();
        worst = worst.max((d - 1.0).abs());
    }
    worst
}

pub fn sup_trace(h: &EndomorphismField) -> (f64, f64) {
    let g = h.grid;
    let n = h.n;
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0.0;
    for i in 0..g.nodes_x() {
        for j in 0..g.ny {
            let m = h.at(i, j);
            let tr: f64 = (0..n).map(|k| m[k * n + k].re).sum();
            if tr > best {
                best = tr;
                arg = g.x(i);
            }
        }
    }
    (best, arg)
}

/// sup over interior nodes of |K - cI| (Frobenius).
pub fn residual_sup(k: &EndomorphismField, c: f64) -> f64 {
    let g = k.grid;
    let n = k.n;
    let mut worst = 0.0f64;
    for i in 1..g.nx {
        for j in 0..g.ny {
            let m = k.at(i, j);
            let mut s = 0.0;
            for r in 0..n {
                for cc in 0..n {
                    let v = if r == cc {
                        m[r * n + cc] - C64::new(c, 0.0)
                    } else {
                        m[r * n + cc]
                    };
                    s += v.norm_sqr();
                }
            }
            worst = worst.max(s.sqrt());
        }
    }
    worst
}

fn energy_gradient(h: &EndomorphismField, geom: &ModelGeometry) -> f64 {
    // ∫|∇̂⁰h|² with the conformally invariant weight
    let grad = covariant_derivative(&geom.conn_hat, h);
    let g = h.grid;
    let mut density = ScalarField::zeros(g);
    let nn = h.n * h.n;
    for i in 0..g.nodes_x() {
        for j in 0..g.ny {
            let mut s = 0.0;
            let bx = grad.x.at(i, j);
            let by = grad.y.at(i, j);
            for k in 0..nn {
                s += bx[k].norm_sqr() + by[k].norm_sqr();
            }
            density.values[g.idx(i, j)] = s;
        }
    }
    crate::grid::trapezoid(&density)
}

/// The parabolic CFL bound for explicit stepping.
pub fn cfl_dt(geom: &ModelGeometry, kappa: f64) -> f64 {
    let g = geom.grid;
    let h = g.dx().min(g.dy());
    kappa * geom.e_field.min() * h * h
}

/// One explicit Euler step `h ← h (I - dt (K - cI))`, with Hermitian
/// symmetrization, optional det renormalization and boundary reset. The
/// caller supplies K(h); on a positivity violation the step is retried with
/// dt halved (the state's dt shrinks), failing with StepCollapse when dt
/// underflows.
pub fn flow_step(
    state: &mut FlowState,
    k: &EndomorphismField,
    geom: &ModelGeometry,
    opts: &FlowOptions,
) -> Result<()> {
    let dt_min = 1e-12 * state.dt.max(1e-30);
    let n = state.h.n;
    let nn = n * n;
    let mut update = vec![ZERO; nn];
    let mut prod = vec![ZERO; nn];
    loop {
        let mut trial = state.h.clone();
        let g = trial.grid;
        for i in 1..g.nx {
            for j in 0..g.ny {
                let km = k.at(i, j);
                for r in 0..n {
                    for c in 0..n {
                        let kc = if r == c {
                            km[r * n + c] - C64::new(geom.c, 0.0)
                        } else {
                            km[r * n + c]
                        };
                        update[r * n + c] = if r == c { ONE - state.dt * kc } else { -state.dt * kc };
                    }
                }
                let hm = trial.at_mut(i, j);
                prod.copy_from_slice(hm);
                mul_into(n, &prod, &update, hm);
            }
        }
        hermitize_field(&mut trial);
        if opts.det_renormalize {
            let mut m = CMat::zeros(n);
            for chunk in trial.values.chunks_mut(nn) {
                m.a.copy_from_slice(chunk);
                if let Some(d) = m.posdef_det(POSITIVITY_FLOOR) {
                    let s = d.powf(-1.0 / n as f64);
                    for v in chunk.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
        reset_boundary(&mut trial);
        if all_posdef(&trial, POSITIVITY_FLOOR) {
            state.h = trial;
            state.t += state.dt;
            return Ok(());
        }
        state.dt *= 0.5;
        if state.dt < dt_min {
            return Err(Error::StepCollapse(format!(
                "dt underflowed to {} while restoring positivity",
                state.dt
            )));
        }
    }
}

/// Drive the flow to the steady state `K(H) = cI` with boundary data `H₀`.
///
/// Reaching `t_max`/`max_steps` without meeting `tol` is not a hard error:
/// the report carries `converged = false` plus a diagnosis, and the best
/// state is returned.
pub fn run_flow(geom: &ModelGeometry, opts: &FlowOptions) -> Result<FlowRun> {
    let strategy = match opts.strategy {
        Strategy::Auto => {
            // explicit stepping is fine when the CFL dt resolves t_max within
            // the step budget; the sech² density at large X misses this by
            // orders of magnitude
            let dt = cfl_dt(geom, opts.kappa_cfl);
            if opts.t_max / dt <= opts.max_steps as f64 {
                Strategy::Explicit
            } else {
                Strategy::Accelerated
            }
        }
        s => s,
    };
    match strategy {
        Strategy::Explicit => run_flow_explicit(geom, opts),
        _ => run_flow_accelerated(geom, opts),
    }
}

fn make_report(
    converged: bool,
    monitors: Vec<MonitorSample>,
    steps: usize,
    strategy: Strategy,
    time_variable: &'static str,
    state: &FlowState,
    boundary_dev: f64,
    diagnosis: Option<String>,
) -> FlowReport {
    let (sup_tr, arg) = sup_trace(&state.h);
    FlowReport {
        converged,
        final_residual: state.residual,
        decay_rate: fit_decay_rate(&monitors),
        steps,
        time: state.t,
        strategy,
        time_variable,
        monitors,
        boundary_identity_dev: boundary_dev,
        sup_tr_argmax_x: arg,
        sup_tr_h: sup_tr,
        diagnosis,
    }
}

/// Least-squares slope of log(sup|K-cI|²) against t over the tail of the
/// series (the decaying phase); returns the positive rate ε.
pub fn fit_decay_rate(monitors: &[MonitorSample]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = monitors
        .iter()
        .filter(|s| s.sup_k_minus_c > 0.0)
        .map(|s| (s.t, 2.0 * s.sup_k_minus_c.ln()))
        .collect();
    if pts.len() < 4 {
        return None;
    }
    let tail = &pts[pts.len() / 3..];
    let n = tail.len() as f64;
    let sx: f64 = tail.iter().map(|p| p.0).sum();
    let sy: f64 = tail.iter().map(|p| p.1).sum();
    let sxx: f64 = tail.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = tail.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return None;
    }
    Some(-(n * sxy - sx * sy) / denom)
}

fn boundary_dev(h: &EndomorphismField) -> f64 {
    let g = h.grid;
    let n = h.n;
    let mut worst = 0.0f64;
    for &i in &[0usize, g.nx] {
        for j in 0..g.ny {
            let m = h.at(i, j);
            for r in 0..n {
                for c in 0..n {
                    let t = if r == c { m[r * n + c] - ONE } else { m[r * n + c] };
                    worst = worst.max(t.norm());
                }
            }
        }
    }
    worst
}

fn run_flow_explicit(geom: &ModelGeometry, opts: &FlowOptions) -> Result<FlowRun> {
    let mut state = FlowState {
        h: initial_h(geom, &opts.initial),
        t: 0.0,
        dt: cfl_dt(geom, opts.kappa_cfl),
        residual: f64::INFINITY,
    };
    let mut monitors = Vec::new();
    let mut bdev = 0.0f64;
    let mut steps = 0usize;
    let mut converged = false;
    loop {
        let k = curvature_k_unchecked(&state.h, geom);
        state.residual = residual_sup(&k, geom.c);
        if steps % opts.record_every == 0 {
            let (sup_tr, _) = sup_trace(&state.h);
            monitors.push(MonitorSample {
                t: state.t,
                sup_k_minus_c: state.residual,
                sup_tr_h: sup_tr,
                max_det_drift: max_det_drift(&state.h),
                energy: energy_gradient(&state.h, geom),
            });
            bdev = bdev.max(boundary_dev(&state.h));
        }
        if state.residual < opts.tol {
            converged = true;
            break;
        }
        if steps >= opts.max_steps || state.t >= opts.t_max {
            break;
        }
        flow_step(&mut state, &k, geom, opts)?;
        steps += 1;
    }
    let diagnosis = if converged {
        None
    } else {
        Some(format!(
            "explicit driver stopped at t = {:.3e} after {} steps with residual {:.3e} (tol {:.1e})",
            state.t, steps, state.residual, opts.tol
        ))
    };
    let report = make_report(
        converged,
        monitors,
        steps,
        Strategy::Explicit,
        "flow-time",
        &state,
        bdev,
        diagnosis,
    );
    Ok(FlowRun { report, state })
}

fn run_flow_accelerated(geom: &ModelGeometry, opts: &FlowOptions) -> Result<FlowRun> {
    let g = geom.grid;
    let n = geom.bundle.rank;
    let nn = n * n;
    let solver = SpectralSolver::new(g);
    let mut state = FlowState {
        h: initial_h(geom, &opts.initial),
        t: 0.0,
        dt: 0.05,
        residual: f64::INFINITY,
    };
    let dt_max = 2.0;
    let dt_min = 1e-10;
    let mut monitors = Vec::new();
    let mut bdev = 0.0f64;
    let mut steps = 0usize;
    let mut converged = false;
    let mut comp = vec![ZERO; g.node_count()];
    let mut prev_residual = f64::INFINITY;
    loop {
        let k = curvature_k_unchecked(&state.h, geom);
        state.residual = residual_sup(&k, geom.c);
        if steps % opts.record_every.max(1) == 0 || state.residual < opts.tol {
            let (sup_tr, _) = sup_trace(&state.h);
            monitors.push(MonitorSample {
                t: state.t,
                sup_k_minus_c: state.residual,
                sup_tr_h: sup_tr,
                max_det_drift: max_det_drift(&state.h),
                energy: energy_gradient(&state.h, geom),
            });
            bdev = bdev.max(boundary_dev(&state.h));
        }
        if state.residual < opts.tol {
            converged = true;
            break;
        }
        if steps >= opts.max_steps || state.t >= opts.t_max {
            break;
        }
        // G = -E · h (K - cI); then (Δ - 4/dt) δ = -4G, h ← h + δ
        let mut gfield = MatrixField::zeros(g, Frame::Unitary, n);
        let mut kc = vec![ZERO; nn];
        let mut prod = vec![ZERO; nn];
        for i in 0..g.nodes_x() {
            for j in 0..g.ny {
                let km = k.at(i, j);
                for r in 0..n {
                    for c in 0..n {
                        kc[r * n + c] = if r == c {
                            km[r * n + c] - C64::new(geom.c, 0.0)
                        } else {
                            km[r * n + c]
                        };
                    }
                }
                mul_into(n, state.h.at(i, j), &kc, &mut prod);
                let e = geom.e_field.at(i, j);
                let out = gfield.at_mut(i, j);
                for q in 0..nn {
                    out[q] = -e * prod[q];
                }
            }
        }
        let mut accepted = false;
        while !accepted {
            let s = 4.0 / state.dt;
            let mut trial = state.h.clone();
            for entry in 0..nn {
                for node in 0..g.node_count() {
                    comp[node] = -4.0 * gfield.values[node * nn + entry];
                }
                solver.helmholtz_dirichlet(&mut comp, s);
                for node in 0..g.node_count() {
                    trial.values[node * nn + entry] += comp[node];
                }
            }
            hermitize_field(&mut trial);
            reset_boundary(&mut trial);
            if all_posdef(&trial, POSITIVITY_FLOOR) {
                state.h = trial;
                state.t += state.dt;
                accepted = true;
                if state.residual < prev_residual {
                    state.dt = (state.dt * 1.25).min(dt_max);
                }
                prev_residual = state.residual;
            } else {
                state.dt *= 0.5;
                if state.dt < dt_min {
                    return Err(Error::StepCollapse("accelerated driver dt underflow".into()));
                }
            }
        }
        steps += 1;
    }
    let diagnosis = if converged {
        None
    } else {
        Some(format!(
            "accelerated driver stopped after {} steps with residual {:.3e} (tol {:.1e})",
            steps, state.residual, opts.tol
        ))
    };
    let report = make_report(
        converged,
        monitors,
        steps,
        Strategy::Accelerated,
        "rescaled-time",
        &state,
        bdev,
        diagnosis,
    );
    Ok(FlowRun { report, state })
}

// ---------------------------------------------------------------------------
// ρ-continuation.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuationVerdict {
    Bounded,
    UnboundedTrend,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationLeg {
    pub x_half: f64,
    pub rho: f64,
    pub sup_tr_h: f64,
    pub sup_tr_argmax_x: f64,
    pub converged: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationReport {
    pub legs: Vec<ContinuationLeg>,
    pub verdict: ContinuationVerdict,
    pub plateau_threshold: f64,
}

pub struct ContinuationRun {
    pub report: ContinuationReport,
    /// Geometry and converged intertwiner at the largest truncation.
    pub final_geometry: ModelGeometry,
    pub final_h: EndomorphismField,
}

/// Solve the boundary value problem along an increasing X-schedule
/// (ρ_k = e^{-X_k} decreasing), extending each converged state by the
/// identity on the new band, and track `m_k = sup Tr h`.
pub fn rho_continuation(
    bundle: &FlatBundleSpec,
    schedule: &[f64],
    nx: usize,
    ny: usize,
    preset: &ConformalPreset,
    opts: &FlowOptions,
    plateau_threshold: f64,
) -> Result<ContinuationRun> {
    if schedule.len() < 3 || schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::DomainError(
            "continuation schedule must be an increasing list of at least 3 X values".into(),
        ));
    }
    let mut legs: Vec<ContinuationLeg> = Vec::new();
    let mut prev: Option<(CylinderGrid, EndomorphismField)> = None;
    let mut last: Option<(ModelGeometry, EndomorphismField)> = None;
    for &x_half in schedule {
        let grid = build_grid(x_half, nx, ny)?;
        let geom = ModelGeometry::build(bundle, grid, preset)?;
        let mut leg_opts = opts.clone();
        leg_opts.initial = match &prev {
            None => InitialData::Identity,
            Some((old_grid, old_h)) => InitialData::Given(extend_by_identity(old_grid, old_h, grid)),
        };
        let run = run_flow(&geom, &leg_opts)?;
        let (m, arg) = sup_trace(&run.state.h);
        legs.push(ContinuationLeg {
            x_half,
            rho: (-x_half).exp(),
            sup_tr_h: m,
            sup_tr_argmax_x: arg,
            converged: run.report.converged,
            residual: run.report.final_residual,
        });
        prev = Some((grid, run.state.h.clone()));
        last = Some((geom, run.state.h));
    }
    // plateau when the final two relative increments both stay below the
    // threshold
    let k = legs.len();
    let rel = |a: f64, b: f64| (b - a) / a.abs().max(1e-300);
    let incr1 = rel(legs[k - 3].sup_tr_h, legs[k - 2].sup_tr_h);
    let incr2 = rel(legs[k - 2].sup_tr_h, legs[k - 1].sup_tr_h);
    let verdict = if incr1 < plateau_threshold && incr2 < plateau_threshold {
        ContinuationVerdict::Bounded
    } else {
        ContinuationVerdict::UnboundedTrend
    };
    let (final_geometry, final_h) = last.unwrap();
    Ok(ContinuationRun {
        report: ContinuationReport {
            legs,
            verdict,
            plateau_threshold,
        },
        final_geometry,
        final_h,
    })
}

/// Interpolate `old_h` (on a shorter cylinder) onto `new_grid` in x, extending
/// by the identity on the new band. The y-grids must agree.
pub fn extend_by_identity(
    old_grid: &CylinderGrid,
    old_h: &EndomorphismField,
    new_grid: CylinderGrid,
) -> EndomorphismField {
    assert_eq!(old_grid.ny, new_grid.ny, "y-grids must agree");
    let n = old_h.n;
    let nn = n * n;
    let mut out = MatrixField::identity(new_grid, old_h.frame, n);
    for i in 0..new_grid.nodes_x() {
        let x = new_grid.x(i);
        if x.abs() >= old_grid.x_half {
            continue;
        }
        // linear interpolation on the old x-axis
        let s = (x + old_grid.x_half) / old_grid.dx();
        let i0 = (s.floor() as usize).min(old_grid.nx - 1);
        let w = s - i0 as f64;
        for j in 0..new_grid.ny {
            let a = old_h.at(i0, j);
            let b = old_h.at(i0 + 1, j);
            let base = new_grid.idx(i, j) * nn;
            for q in 0..nn {
                out.values[base + q] = (1.0 - w) * a[q] + w * b[q];
            }
        }
    }
    reset_boundary(&mut out);
    out
}

// ---------------------------------------------------------------------------
// Destabilizer extraction.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DestabilizerCandidate {
    pub rank: usize,
    pub sigma_used: f64,
    pub eigenvalue_gap: f64,
    pub idempotency_residual: f64,
    pub flatness_residual: f64,
    pub matched: FlatSubbundleSpec,
    pub matched_distance: f64,
    pub slope: f64,
    pub mu_bundle: f64,
}

/// Destabilizer extraction by σ-power regularization: normalize
/// `h̃ = h / sup Tr h`, form `I - h̃^σ`
/// along the σ-schedule, find the σ with the cleanest eigenvalue split,
/// round the split eigenvalues to {0, 1} (per-node spectral projection onto
/// the small-h̃ eigenspace), and match the projection against the
/// block-aligned standard family.
///
/// At finite truncation the candidate is read on the interior window
/// `|x| ≤ 3.5` where `sup Tr h` localizes (the boundary layer carries
/// `h ≈ I`, an artifact of the Dirichlet data that disappears as the
/// truncation shrinks, so it is excluded from the split search and the
/// residual integrals).
pub fn extract_destabilizer(
    geom: &ModelGeometry,
    h: &EndomorphismField,
    sigma_schedule: &[f64],
    round_threshold: f64,
) -> Result<DestabilizerCandidate> {
    let g = h.grid;
    let n = h.n;
    let window = 3.5f64.min(g.x_half - 0.5);
    let (m, _) = sup_trace(h);
    if !(m > 0.0) {
        return Err(Error::ZeroInput("sup Tr h must be positive".into()));
    }
    let min_gap = 0.2;
    let in_window = |i: usize| g.x(i).abs() <= window;
    // per-node ascending eigenvalues of h̃ on the window
    let mut eigs: Vec<Vec<f64>> = Vec::with_capacity(g.node_count());
    let mut vecs: Vec<CMat> = Vec::with_capacity(g.node_count());
    for i in 0..g.nodes_x() {
        for j in 0..g.ny {
            let mut hm = h.mat(i, j);
            for v in hm.a.iter_mut() {
                *v /= m;
            }
            let (vals, v) = hm.eigh();
            eigs.push(vals);
            vecs.push(v);
        }
    }
    // choose (σ, rank) with the best window separation of I - h̃^σ
    let mut best: Option<(f64, usize, f64)> = None; // (sigma, rank, gap)
    for &sigma in sigma_schedule {
        for r in 1..n {
            let mut min_upper = f64::INFINITY; // small-h̃ cluster of I - h̃^σ
            let mut max_lower = f64::NEG_INFINITY;
            for i in 0..g.nodes_x() {
                if !in_window(i) {
                    continue;
                }
                for j in 0..g.ny {
                    let vals = &eigs[g.idx(i, j)];
                    let upper = 1.0 - vals[r - 1].max(0.0).powf(sigma);
                    let lower = 1.0 - vals[r].max(0.0).powf(sigma);
                    min_upper = min_upper.min(upper);
                    max_lower = max_lower.max(lower);
                }
            }
            let gap = min_upper - max_lower;
            if gap >= min_gap && min_upper >= round_threshold {
                let better = match best {
                    None => true,
                    Some((_, _, bg)) => gap > bg,
                };
                if better {
                    best = Some((sigma, r, gap));
                }
            }
        }
    }
    let (sigma, rank, gap) = best.ok_or_else(|| {
        Error::NoCandidate(format!(
            "no σ in the schedule separates the spectrum of I - h̃^σ by ≥ {min_gap} \
             on the window |x| <= {window}"
        ))
    })?;
    // spectral projection onto the small-h̃ eigenspace, per node
    let mut pi = MatrixField::zeros(g, Frame::Unitary, n);
    let mut node = 0;
    for i in 0..g.nodes_x() {
        for j in 0..g.ny {
            let v = &vecs[node];
            let mut p = CMat::zeros(n);
            for k in 0..rank {
                for r in 0..n {
                    for c in 0..n {
                        p[(r, c)] += v[(r, k)] * v[(c, k)].conj();
                    }
                }
            }
            pi.set_mat(i, j, &p);
            node += 1;
        }
    }
    // idempotency on the window: sup |π² - π|
    let mut idem = 0.0f64;
    {
        let mut sq = vec![ZERO; n * n];
        for i in 0..g.nodes_x() {
            if !in_window(i) {
                continue;
            }
            for j in 0..g.ny {
                let chunk = pi.at(i, j);
                mul_into(n, chunk, chunk, &mut sq);
                for q in 0..n * n {
                    idem = idem.max((sq[q] - chunk[q]).norm());
                }
            }
        }
    }
    // flatness residual: area-normalized ∫ |π ∇̂⁰(I-π)|² dx dy over the
    // window (conformally invariant weighting)
    let grad = covariant_derivative(&geom.conn_hat, &pi);
    let mut density = ScalarField::zeros(g);
    {
        let nn = n * n;
        let mut t1 = vec![ZERO; nn];
        let mut t2 = vec![ZERO; nn];
        for i in 0..g.nodes_x() {
            if !in_window(i) || g.x(i).abs() > window - 2.0 * g.dx() {
                continue; // keep the difference stencil inside the window
            }
            for j in 0..g.ny {
                // ∇̂⁰(I-π) = -∇̂⁰π; the sign drops under the norm
                let mut s = 0.0;
                for comp in [&grad.x, &grad.y] {
                    mul_into(n, pi.at(i, j), comp.at(i, j), &mut t1);
                    mul_into(n, &t1, pi.at(i, j), &mut t2);
                    for q in 0..nn {
                        s += (t1[q] - t2[q]).norm_sqr();
                    }
                }
                density.values[g.idx(i, j)] = s;
            }
        }
    }
    let area = 2.0 * window * crate::grid::TWO_PI;
    let flatness = crate::grid::trapezoid(&density) / area;
    // nearest block-aligned projection on the window
    let family = enumerate_flat_subbundles(&geom.bundle);
    let mut best_match: Option<(FlatSubbundleSpec, f64)> = None;
    for sub in &family.subs {
        let pattern = prefix_projection_pattern(&geom.bundle, sub, n);
        let mut dist = 0.0f64;
        for i in 0..g.nodes_x() {
            if !in_window(i) {
                continue;
            }
            for j in 0..g.ny {
                let chunk = pi.at(i, j);
                let mut s = 0.0;
                for q in 0..n * n {
                    s += (chunk[q] - pattern.a[q]).norm_sqr();
                }
                dist = dist.max(s.sqrt());
            }
        }
        let better = match &best_match {
            None => true,
            Some((_, bd)) => dist < *bd,
        };
        if better {
            best_match = Some((sub.clone(), dist));
        }
    }
    let (matched, matched_distance) =
        best_match.ok_or_else(|| Error::NoCandidate("bundle has no proper subbundles".into()))?;
    let cand_slope = slope(&geom.bundle, Some(&matched));
    Ok(DestabilizerCandidate {
        rank,
        sigma_used: sigma,
        eigenvalue_gap: gap,
        idempotency_residual: idem,
        flatness_residual: flatness,
        matched,
        matched_distance,
        slope: cand_slope,
        mu_bundle: slope(&geom.bundle, None),
    })
}

/// Diagonal 0/1 pattern of the block-prefix projection in the unitary frame.
fn prefix_projection_pattern(bundle: &FlatBundleSpec, sub: &FlatSubbundleSpec, n: usize) -> CMat {
    let mut p = CMat::zeros(n);
    let mut base = 0;
    for (l, b) in bundle.zero.blocks.iter().enumerate() {
        for a in 0..sub.prefixes[l] {
            p[(base + a, base + a)] = ONE;
        }
        base += b.dim;
    }
    p
}
