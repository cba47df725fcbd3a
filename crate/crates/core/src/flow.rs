//! Time integration of `∂g/∂t = −β(g)` in tensor form, in the scalar
//! Monge-Ampère form `φ̇ = log det(ĝ_t + ∇dφ) − log det g₀` with
//! `ĝ_t = g₀ − tβ(g₀)`, and of the normalized flow `∂g/∂t = −β(g) − g`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, MetricField};
use crate::grid::{ScalarField, SymTensorField};
use crate::stencil;

/// Stability factor of the step guard, before division by the dimension.
pub const DEFAULT_STABILITY_FACTOR: f64 = 0.6;
pub const DEFAULT_CFL: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Tensor,
    Scalar,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtPolicy {
    /// Fixed macro step.
    Fixed(f64),
    /// `dt = c · h² / Λ_max`, recomputed every step.
    Cfl(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub scheme: Scheme,
    pub dt: DtPolicy,
    pub t_end: f64,
    /// Snapshot every `stride` macro steps; the final state is always kept.
    pub stride: usize,
    pub normalized: bool,
    /// Inner explicit steps per macro step.
    pub substeps: usize,
    pub stability_factor: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Both,
            dt: DtPolicy::Cfl(DEFAULT_CFL),
            t_end: 0.01,
            stride: 1,
            normalized: false,
            substeps: 1,
            stability_factor: DEFAULT_STABILITY_FACTOR,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        match self.dt {
            DtPolicy::Fixed(dt) if !(dt > 0.0 && dt.is_finite()) => return bad("dt must be positive"),
            DtPolicy::Cfl(c) if !(c > 0.0 && c.is_finite()) => return bad("CFL factor must be positive"),
            _ => {}
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad("t_end must be positive");
        }
        if self.stride == 0 || self.substeps == 0 {
            return bad("stride and substeps must be at least 1");
        }
        if !(self.stability_factor > 0.0) {
            return bad("stability_factor must be positive");
        }
        if self.normalized && self.scheme != Scheme::Tensor {
            return bad("the normalized flow is integrated in tensor form only");
        }
        Ok(())
    }
}

/// Frozen data of the initial metric.
#[derive(Debug, Clone)]
pub struct FlowRefs {
    pub g0: MetricField,
    pub beta0: SymTensorField,
    pub log_det0: ScalarField,
}

impl FlowRefs {
    pub fn new(g0: MetricField) -> Result<Self> {
        let log_det0 = geometry::log_det_field(&g0)?;
        let beta0 = geometry::beta_from_log_det(&log_det0);
        Ok(Self { g0, beta0, log_det0 })
    }

    /// `ĝ_t = g₀ − tβ(g₀)`.
    pub fn g_hat(&self, t: f64) -> SymTensorField {
        self.g0.tensor().axpy(-t, &self.beta0)
    }
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub phi: ScalarField,
    pub phi_dot: ScalarField,
    pub g: MetricField,
    pub refs: Arc<FlowRefs>,
}

impl FlowState {
    pub fn initial(g0: MetricField) -> Result<Self> {
        let grid = *g0.grid();
        let refs = Arc::new(FlowRefs::new(g0.clone())?);
        Ok(Self { t: 0.0, phi: ScalarField::zeros(grid), phi_dot: ScalarField::zeros(grid), g: g0, refs })
    }
}

/// Largest admissible explicit step for `g`: `(c/n) · h² / Λ_max`.
pub fn step_limit(g: &MetricField, stability_factor: f64) -> f64 {
    let h = g.grid().spacing();
    stability_factor / g.grid().dim() as f64 * h * h / g.max_inverse_radius()
}

fn guard(g: &MetricField, dt: f64, stability_factor: f64) -> Result<()> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::BadParameter(format!("time step {dt}")));
    }
    let limit = step_limit(g, stability_factor);
    if dt > limit {
        return Err(Error::StepTooLarge { dt, limit });
    }
    Ok(())
}

/// Right-hand side of the scalar equation at `(t, φ)`; returns `(φ̇, g)`.
fn scalar_rhs_parts(refs: &FlowRefs, t: f64, phi: &ScalarField) -> Result<(ScalarField, SymTensorField)> {
    let g = refs.g_hat(t).axpy(1.0, &stencil::hessian(phi));
    let ld = geometry::log_det_of(&g)?;
    let values: Vec<f64> = ld.values().par_iter().zip(refs.log_det0.values()).map(|(a, b)| a - b).collect();
    Ok((ScalarField::from_values(*phi.grid(), values)?, g))
}

/// `log det(ĝ_t + ∇dφ) − log det g₀` for the given state.
pub fn ma_rhs(state: &FlowState) -> Result<ScalarField> {
    Ok(scalar_rhs_parts(&state.refs, state.t, &state.phi)?.0)
}

/// Classical four-stage Runge-Kutta step on a flat vector.
fn rk4(y: &[f64], t: f64, dt: f64, f: impl Fn(f64, &[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let comb = |k: &[f64], s: f64| -> Vec<f64> { y.par_iter().zip(k).map(|(a, b)| a + s * b).collect() };
    let k1 = f(t, y)?;
    let k2 = f(t + 0.5 * dt, &comb(&k1, 0.5 * dt))?;
    let k3 = f(t + 0.5 * dt, &comb(&k2, 0.5 * dt))?;
    let k4 = f(t + dt, &comb(&k3, dt))?;
    let w = dt / 6.0;
    Ok((0..y.len())
        .into_par_iter()
        .map(|i| y[i] + w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

fn scalar_step_with(state: &FlowState, dt: f64, stability_factor: f64) -> Result<FlowState> {
    guard(&state.g, dt, stability_factor)?;
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let grid = *state.phi.grid();
    let refs = &state.refs;
    let phi = rk4(state.phi.values(), state.t, dt, |t, y| {
        let f = ScalarField::from_values(grid, y.to_vec())?;
        Ok(scalar_rhs_parts(refs, t, &f)?.0.into_values())
    })?;
    let phi = ScalarField::from_values(grid, phi)?;
    let t = state.t + dt;
    let (phi_dot, g) = scalar_rhs_parts(refs, t, &phi)?;
    Ok(FlowState { t, phi, phi_dot, g: MetricField::new(g)?, refs: Arc::clone(refs) })
}

/// One explicit step of the scalar Monge-Ampère equation; the metric is rebuilt
/// as `ĝ_{t+dt} + ∇dφ` and revalidated.
pub fn step_scalar(state: &FlowState, dt: f64) -> Result<FlowState> {
    scalar_step_with(state, dt, DEFAULT_STABILITY_FACTOR)
}

/// `−β(g) − λg` as a packed vector.
fn tensor_rhs(g: &SymTensorField, damping: f64) -> Result<Vec<f64>> {
    let ld = geometry::log_det_of(g)?;
    let minus_beta = stencil::hessian(&ld);
    if damping == 0.0 {
        return Ok(minus_beta.packed().to_vec());
    }
    Ok(minus_beta.packed().par_iter().zip(g.packed()).map(|(b, x)| b - damping * x).collect())
}

fn tensor_step_with(g: &MetricField, dt: f64, damping: f64, stability_factor: f64) -> Result<MetricField> {
    guard(g, dt, stability_factor)?;
    if dt == 0.0 {
        return Ok(g.clone());
    }
    let grid = *g.grid();
    let y = rk4(g.tensor().packed(), 0.0, dt, |_, y| {
        tensor_rhs(&SymTensorField::from_packed(grid, y.to_vec())?, damping)
    })?;
    MetricField::new(SymTensorField::from_packed(grid, y)?)
}

/// One explicit step of `∂g/∂t = −β(g)`.
pub fn step_tensor(g: &MetricField, dt: f64) -> Result<MetricField> {
    tensor_step_with(g, dt, 0.0, DEFAULT_STABILITY_FACTOR)
}

/// One explicit step of `∂g/∂t = −β(g) − g`.
pub fn normalized_step(g: &MetricField, dt: f64) -> Result<MetricField> {
    tensor_step_with(g, dt, 1.0, DEFAULT_STABILITY_FACTOR)
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub g: SymTensorField,
    pub log_det: ScalarField,
    /// Present for scalar-scheme snapshots.
    pub phi: Option<ScalarField>,
    /// `log det g − log det g₀`; absent for the normalized flow.
    pub phi_dot: Option<ScalarField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub t: f64,
    pub step: usize,
    pub invariant: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub scheme: Scheme,
    pub normalized: bool,
    pub refs: Arc<FlowRefs>,
    pub snapshots: Vec<Snapshot>,
    pub failure: Option<FailureRecord>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("a trajectory holds at least the initial snapshot")
    }
}

/// One or both integrations of the same initial metric.
#[derive(Debug, Clone)]
pub struct FlowRun {
    pub scalar: Option<Trajectory>,
    pub tensor: Option<Trajectory>,
}

impl FlowRun {
    /// The trajectory diagnostics should read: scalar when present.
    pub fn primary(&self) -> &Trajectory {
        self.scalar.as_ref().or(self.tensor.as_ref()).expect("at least one scheme runs")
    }

    pub fn failure(&self) -> Option<&FailureRecord> {
        self.scalar.as_ref().and_then(|t| t.failure.as_ref()).or(self.tensor.as_ref().and_then(|t| t.failure.as_ref()))
    }

    /// Per-snapshot max-node metric deviation between the two schemes, over
    /// the common prefix of snapshot times.
    pub fn cross_deviation(&self) -> Option<Vec<(f64, f64)>> {
        let (a, b) = (self.scalar.as_ref()?, self.tensor.as_ref()?);
        Some(
            a.snapshots
                .iter()
                .zip(&b.snapshots)
                .take_while(|(x, y)| x.t == y.t)
                .map(|(x, y)| (x.t, x.g.max_abs_diff(&y.g)))
                .collect(),
        )
    }
}

fn snapshot_scalar(s: &FlowState) -> Result<Snapshot> {
    Ok(Snapshot {
        t: s.t,
        g: s.g.tensor().clone(),
        log_det: geometry::log_det_field(&s.g)?,
        phi: Some(s.phi.clone()),
        phi_dot: Some(s.phi_dot.clone()),
    })
}

fn snapshot_tensor(t: f64, g: &MetricField, refs: &FlowRefs, normalized: bool) -> Result<Snapshot> {
    let log_det = geometry::log_det_field(g)?;
    let phi_dot = if normalized {
        None
    } else {
        let v = log_det.values().par_iter().zip(refs.log_det0.values()).map(|(a, b)| a - b).collect();
        Some(ScalarField::from_values(*g.grid(), v)?)
    };
    Ok(Snapshot { t, g: g.tensor().clone(), log_det, phi: None, phi_dot })
}

fn failure_of(e: &Error, t: f64, step: usize) -> FailureRecord {
    FailureRecord { t, step, invariant: e.kind().to_string(), message: e.to_string() }
}

/// Macro-step driver shared by both schemes. `advance(state, dt)` performs one
/// inner step; `metric` exposes the current metric for the CFL policy.
fn drive<S>(
    init: S,
    cfg: &FlowConfig,
    metric: impl Fn(&S) -> &MetricField,
    time: impl Fn(&S) -> f64,
    advance: impl Fn(&S, f64) -> Result<S>,
    snap: impl Fn(&S) -> Result<Snapshot>,
    emit: &mut dyn FnMut(Snapshot) -> Result<()>,
) -> Result<Option<FailureRecord>> {
    emit(snap(&init)?)?;
    let mut state = init;
    let mut last_emitted = 0usize;
    let mut step = 0usize;
    let t_end = cfg.t_end;
    let eps = 1e-12 * t_end;
    loop {
        let t = time(&state);
        if t >= t_end - eps {
            break;
        }
        let target = match cfg.dt {
            DtPolicy::Fixed(dt) => {
                let k = (((t + eps) / dt).floor() as usize) + 1;
                (k as f64 * dt).min(t_end)
            }
            DtPolicy::Cfl(c) => {
                let h = metric(&state).grid().spacing();
                let dt = c * h * h / metric(&state).max_inverse_radius();
                (t + cfg.substeps as f64 * dt).min(t_end)
            }
        };
        let target = if t_end - target <= eps { t_end } else { target };
        let inner = (target - t) / cfg.substeps as f64;
        let mut failure = None;
        let mut cur: Option<S> = None;
        for _ in 0..cfg.substeps {
            let from = cur.as_ref().unwrap_or(&state);
            match advance(from, inner) {
                Ok(v) => cur = Some(v),
                Err(e) => {
                    failure = Some(failure_of(&e, time(from), step));
                    break;
                }
            }
        }
        if let Some(f) = failure {
            if last_emitted != step {
                emit(snap(&state)?)?;
            }
            return Ok(Some(f));
        }
        state = cur.expect("substeps >= 1");
        step += 1;
        let done = time(&state) >= t_end - eps;
        if step % cfg.stride == 0 || done {
            emit(snap(&state)?)?;
            last_emitted = step;
        }
    }
    Ok(None)
}

/// Integrate one scheme (`Scalar` or `Tensor`), handing each finalized
/// snapshot to `emit` instead of storing it. Returns the frozen reference data
/// and the failure record, if the run stopped early.
pub fn run_streaming(
    g0: &MetricField,
    cfg: &FlowConfig,
    scheme: Scheme,
    emit: &mut dyn FnMut(Snapshot) -> Result<()>,
) -> Result<(Arc<FlowRefs>, Option<FailureRecord>)> {
    cfg.validate()?;
    let c = cfg.stability_factor;
    match scheme {
        Scheme::Scalar => {
            if cfg.normalized {
                return Err(Error::Config("the normalized flow is integrated in tensor form only".into()));
            }
            let init = FlowState::initial(g0.clone())?;
            let refs = Arc::clone(&init.refs);
            let failure =
                drive(init, cfg, |s| &s.g, |s| s.t, |s, dt| scalar_step_with(s, dt, c), snapshot_scalar, emit)?;
            Ok((refs, failure))
        }
        Scheme::Tensor => {
            let refs = Arc::new(FlowRefs::new(g0.clone())?);
            let damping = if cfg.normalized { 1.0 } else { 0.0 };
            let normalized = cfg.normalized;
            let failure = drive(
                (0.0f64, g0.clone()),
                cfg,
                |s| &s.1,
                |s| s.0,
                |s, dt| Ok((s.0 + dt, tensor_step_with(&s.1, dt, damping, c)?)),
                |s| snapshot_tensor(s.0, &s.1, &refs, normalized),
                emit,
            )?;
            Ok((refs, failure))
        }
        Scheme::Both => Err(Error::Config("streaming runs take a single scheme".into())),
    }
}

fn run_collect(g0: &MetricField, cfg: &FlowConfig, scheme: Scheme) -> Result<Trajectory> {
    let mut snapshots = Vec::new();
    let (refs, failure) = run_streaming(g0, cfg, scheme, &mut |s| {
        snapshots.push(s);
        Ok(())
    })?;
    let normalized = cfg.normalized && scheme == Scheme::Tensor;
    Ok(Trajectory { scheme, normalized, refs, snapshots, failure })
}

/// Integrate from `g₀`. Step failures end the affected trajectory early and
/// are recorded in it; only invalid configuration is returned as an error.
pub fn run_flow(g0: &MetricField, cfg: &FlowConfig) -> Result<FlowRun> {
    cfg.validate()?;
    let scalar = matches!(cfg.scheme, Scheme::Scalar | Scheme::Both).then(|| run_collect(g0, cfg, Scheme::Scalar)).transpose()?;
    let tensor = matches!(cfg.scheme, Scheme::Tensor | Scheme::Both).then(|| run_collect(g0, cfg, Scheme::Tensor)).transpose()?;
    Ok(FlowRun { scalar, tensor })
}

/// `φ(t) = ∫₀ᵗ (log det g − log det g₀) ds` by the trapezoid rule over the
/// snapshot times.
pub fn potential_from_trajectory(traj: &Trajectory) -> Result<Vec<ScalarField>> {
    let grid = *traj.refs.g0.grid();
    let mut out = vec![ScalarField::zeros(grid)];
    for w in traj.snapshots.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let da = rate(a, &traj.refs)?;
        let db = rate(b, &traj.refs)?;
        let half = 0.5 * (b.t - a.t);
        let prev = out.last().expect("non-empty").values();
        let v = (0..grid.len()).into_par_iter().map(|i| prev[i] + half * (da[i] + db[i])).collect();
        out.push(ScalarField::from_values(grid, v)?);
    }
    Ok(out)
}

fn rate(s: &Snapshot, refs: &FlowRefs) -> Result<Vec<f64>> {
    match &s.phi_dot {
        Some(p) => Ok(p.values().to_vec()),
        None => Ok(s.log_det.values().iter().zip(refs.log_det0.values()).map(|(a, b)| a - b).collect()),
    }
}

/// `max |g(t) − (ĝ_t + ∇dφ(t))|` over nodes and snapshots, using the stored
/// potential or, when absent, the trapezoid reconstruction.
pub fn decomposition_defect(traj: &Trajectory) -> Result<f64> {
    let rebuilt;
    let phis: Vec<&ScalarField> = if traj.snapshots.iter().all(|s| s.phi.is_some()) {
        traj.snapshots.iter().map(|s| s.phi.as_ref().expect("checked")).collect()
    } else {
        rebuilt = potential_from_trajectory(traj)?;
        rebuilt.iter().collect()
    };
    let mut worst = 0.0f64;
    for (s, phi) in traj.snapshots.iter().zip(phis) {
        let expect = traj.refs.g_hat(s.t).axpy(1.0, &stencil::hessian(phi));
        worst = worst.max(s.g.max_abs_diff(&expect));
    }
    Ok(worst)
}
