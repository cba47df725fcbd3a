//! Monitors for the evolution identities, barrier bounds, `T` conservation,
//! `β` eigenvalues and decay rates along a trajectory.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, FlowRefs, FlowState, Snapshot, Trajectory};
use crate::geometry::{self, MetricField};
use crate::grid::{GridSpec, ScalarField, SymTensorField};
use crate::linalg::Mat;
use crate::stencil;

/// `(Ψ, Λ) = (tφ̇ − φ − nt, (S₁ − t)φ̇ + φ + nt)`.
pub fn psi_lambda(state: &FlowState, s1: f64) -> (ScalarField, ScalarField) {
    psi_lambda_parts(state.t, &state.phi, &state.phi_dot, s1)
}

fn psi_lambda_parts(t: f64, phi: &ScalarField, phi_dot: &ScalarField, s1: f64) -> (ScalarField, ScalarField) {
    let grid = *phi.grid();
    let n = grid.dim() as f64;
    let (p, pd) = (phi.values(), phi_dot.values());
    let psi = (0..grid.len()).into_par_iter().map(|i| t * pd[i] - p[i] - n * t).collect();
    let lam = (0..grid.len()).into_par_iter().map(|i| (s1 - t) * pd[i] + p[i] + n * t).collect();
    (
        ScalarField::from_values(grid, psi).expect("grid layout"),
        ScalarField::from_values(grid, lam).expect("grid layout"),
    )
}

/// `tr_g h` per node.
fn trace_with_inverse(g: &SymTensorField, h: &SymTensorField) -> Result<Vec<f64>> {
    (0..g.grid().len())
        .into_par_iter()
        .map(|i| {
            let m = g.at(i);
            let inv = m.inverse_spd().ok_or(Error::NotPositiveDefinite { node: i, min_eig: m.min_eigenvalue() })?;
            Ok(inv.mul(&h.at(i)).trace())
        })
        .collect()
}

/// `L_g f = g^{ij} D_iD_j f` per node.
fn laplace(g: &SymTensorField, f: &ScalarField) -> Result<Vec<f64>> {
    trace_with_inverse(g, &stencil::hessian(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub t: f64,
    pub r_psi: f64,
    pub r_lambda: f64,
}

struct WindowEntry {
    t: f64,
    g: SymTensorField,
    psi: ScalarField,
    lambda: ScalarField,
}

/// Residuals of `(∂_t − L_g)Ψ = −tr_g g₀` and
/// `(∂_t − L_g)Λ = −S₁ tr_g β(g₀) + tr_g g₀`, fed one snapshot at a time. The
/// time derivative is the three-point centered difference on the (possibly
/// non-uniform) snapshot times. Snapshots without a stored potential are
/// integrated by the trapezoid rule.
pub struct ResidualStream {
    refs: std::sync::Arc<FlowRefs>,
    s1: f64,
    window: VecDeque<WindowEntry>,
    running: Option<(f64, ScalarField, Vec<f64>)>,
}

impl ResidualStream {
    pub fn new(refs: std::sync::Arc<FlowRefs>, s1: f64) -> Self {
        Self { refs, s1, window: VecDeque::with_capacity(3), running: None }
    }

    fn potential_of(&mut self, s: &Snapshot, rate: &[f64]) -> Result<ScalarField> {
        if let Some(p) = &s.phi {
            return Ok(p.clone());
        }
        let grid = *s.g.grid();
        let phi = match &self.running {
            None => ScalarField::zeros(grid),
            Some((t0, p0, r0)) => {
                let half = 0.5 * (s.t - t0);
                let v = (0..grid.len()).into_par_iter().map(|i| p0.values()[i] + half * (r0[i] + rate[i])).collect();
                ScalarField::from_values(grid, v)?
            }
        };
        self.running = Some((s.t, phi.clone(), rate.to_vec()));
        Ok(phi)
    }

    pub fn push(&mut self, s: &Snapshot) -> Result<Option<ResidualRow>> {
        let rate = snapshot_rate(s, &self.refs)?;
        let phi = self.potential_of(s, &rate)?;
        let grid = *s.g.grid();
        let (psi, lambda) = psi_lambda_parts(s.t, &phi, &ScalarField::from_values(grid, rate)?, self.s1);
        self.window.push_back(WindowEntry { t: s.t, g: s.g.clone(), psi, lambda });
        if self.window.len() < 3 {
            return Ok(None);
        }
        if self.window.len() > 3 {
            self.window.pop_front();
        }
        let (a, b, c) = (&self.window[0], &self.window[1], &self.window[2]);
        let (h1, h2) = (b.t - a.t, c.t - b.t);
        let (wa, wb, wc) = (-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2)));
        let dt = |fa: &ScalarField, fb: &ScalarField, fc: &ScalarField| -> Vec<f64> {
            (0..grid.len())
                .into_par_iter()
                .map(|i| wa * fa.values()[i] + wb * fb.values()[i] + wc * fc.values()[i])
                .collect()
        };
        let dpsi = dt(&a.psi, &b.psi, &c.psi);
        let dlam = dt(&a.lambda, &b.lambda, &c.lambda);
        let lpsi = laplace(&b.g, &b.psi)?;
        let llam = laplace(&b.g, &b.lambda)?;
        let tr_g0 = trace_with_inverse(&b.g, self.refs.g0.tensor())?;
        let tr_b0 = trace_with_inverse(&b.g, &self.refs.beta0)?;
        let s1 = self.s1;
        let rp: Vec<f64> = (0..grid.len()).into_par_iter().map(|i| dpsi[i] - lpsi[i] + tr_g0[i]).collect();
        let rl: Vec<f64> =
            (0..grid.len()).into_par_iter().map(|i| dlam[i] - llam[i] + s1 * tr_b0[i] - tr_g0[i]).collect();
        Ok(Some(ResidualRow { t: b.t, r_psi: stencil::max_abs(&rp), r_lambda: stencil::max_abs(&rl) }))
    }
}

/// Residual rows for every interior snapshot of an unnormalized trajectory.
pub fn scalar_residuals(traj: &Trajectory, s1: f64) -> Result<Vec<ResidualRow>> {
    if traj.normalized {
        return Err(Error::BadParameter("the evolution identities concern the unnormalized flow".into()));
    }
    if traj.snapshots.len() < 3 {
        return Err(Error::InsufficientSnapshots { have: traj.snapshots.len(), need: 3 });
    }
    let mut stream = ResidualStream::new(traj.refs.clone(), s1);
    let mut rows = Vec::new();
    for s in &traj.snapshots {
        if let Some(r) = stream.push(s)? {
            rows.push(r);
        }
    }
    Ok(rows)
}

fn snapshot_rate(s: &Snapshot, refs: &FlowRefs) -> Result<Vec<f64>> {
    match &s.phi_dot {
        Some(p) => Ok(p.values().to_vec()),
        None => Ok(s.log_det.values().par_iter().zip(refs.log_det0.values()).map(|(a, b)| a - b).collect()),
    }
}

/// Derivative bounds of a metric in coordinates normalized to the identity at
/// each node (by the node's Cholesky factor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredK {
    /// `sup |∂_k g_ij|`
    pub first: f64,
    /// `sup ∂_k∂_l g_ij` (an upper bound only)
    pub second_upper: f64,
    /// `sup |∂_i T^k_jl|`
    pub t_derivative: f64,
    /// Largest of the three.
    pub k: f64,
}

pub fn measure_k(g: &SymTensorField) -> Result<MeasuredK> {
    let grid = *g.grid();
    let n = grid.dim();
    let comps: Vec<Vec<f64>> = (0..n * n).map(|ab| g.component(ab / n, ab % n)).collect();
    let d1: Vec<Vec<f64>> = (0..n * n * n).map(|x| stencil::d1(&grid, &comps[x / n], x % n)).collect();
    let d2: Vec<Vec<f64>> =
        (0..n.pow(4)).map(|x| stencil::d2(&grid, &comps[x / (n * n)], (x / n) % n, x % n)).collect();
    let per_node: Vec<[f64; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let m = g.at(idx);
            let l = m.cholesky().ok_or(Error::NotPositiveDefinite { node: idx, min_eig: m.min_eigenvalue() })?;
            let w = l.lower_inverse();
            let mut first = 0.0f64;
            let mut second = f64::NEG_INFINITY;
            let mut tder = 0.0f64;
            let raw1 = |a: usize, b: usize, c: usize| d1[(a * n + b) * n + c][idx];
            let raw2 = |a: usize, b: usize, c: usize, d: usize| d2[((a * n + b) * n + c) * n + d][idx];
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        let mut s = 0.0;
                        for (a2, b2, c2) in triples(n) {
                            s += w.a[a][a2] * w.a[b][b2] * w.a[c][c2] * raw1(a2, b2, c2);
                        }
                        first = first.max(s.abs());
                        for d in 0..n {
                            let mut q = 0.0;
                            let mut tq = 0.0;
                            for (a2, b2, c2) in triples(n) {
                                for d2i in 0..n {
                                    let wt = w.a[a][a2] * w.a[b][b2] * w.a[c][c2] * w.a[d][d2i];
                                    q += wt * raw2(a2, b2, c2, d2i);
                                    // ∂_d T^a_cb = ∂_d∂_c g_ab − ∂_d∂_b g_ac
                                    tq += wt * (raw2(a2, b2, c2, d2i) - raw2(a2, c2, b2, d2i));
                                }
                            }
                            second = second.max(q);
                            tder = tder.max(tq.abs());
                        }
                    }
                }
            }
            Ok([first, second, tder])
        })
        .collect::<Result<_>>()?;
    let col = |k: usize| -> Vec<f64> { per_node.iter().map(|v| v[k]).collect() };
    let first = stencil::max_value(&col(0));
    let second_upper = stencil::max_value(&col(1)).max(0.0);
    let t_derivative = stencil::max_value(&col(2));
    Ok(MeasuredK { first, second_upper, t_derivative, k: first.max(second_upper).max(t_derivative) })
}

fn triples(n: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..n).flat_map(move |a| (0..n).flat_map(move |b| (0..n).map(move |c| (a, b, c))))
}

/// Constants entering the barrier bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    pub k: f64,
    /// `c(n)` of the potential bound.
    pub c_n: f64,
    /// `c₁ = c₂` of the trace bound.
    pub c_trace: f64,
    pub s1: f64,
    /// Threshold `S` of the barrier condition; `None` when unbounded.
    pub s_gate: Option<f64>,
    pub tol_mp: f64,
}

impl BarrierParams {
    pub fn new(n: usize, k: f64, s1: f64, s_gate: Option<f64>, tol_mp: f64) -> Self {
        Self { k, c_n: n as f64, c_trace: n as f64, s1, s_gate, tol_mp }
    }

    /// `(S, S₂, α)` for the trace bound, or `None` if `S₁ ≥ S`.
    pub fn trace_constants(&self) -> Option<(Option<f64>, f64, f64)> {
        match self.s_gate {
            None => Some((None, 2.0 * self.s1, 1.0)),
            Some(s) if s > self.s1 => {
                let s2 = 0.5 * (self.s1 + s);
                Some((Some(s), s2, 1.0 - s2 / s))
            }
            Some(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceBound {
    pub s: Option<f64>,
    pub s2: f64,
    pub alpha: f64,
    pub frak_m: f64,
    pub a: f64,
    /// Natural logarithm of the bound on `tr_{g₀} g`.
    pub log_bound: f64,
}

/// `ln(n + exp(a))` with
/// `a = ln(½c₁K + ½√(c₁²K² + 4c₂K²A(1+2𝔪)³)) + A`, `A = α⁻¹(2𝔪+1)²(c₁K+1)`.
pub fn trace_bound(n: usize, k: f64, c: f64, alpha: f64, frak_m: f64) -> (f64, f64) {
    let big_a = (2.0 * frak_m + 1.0).powi(2) * (c * k + 1.0) / alpha;
    let inner = 0.5 * c * k + 0.5 * (c * c * k * k + 4.0 * c * k * k * big_a * (1.0 + 2.0 * frak_m).powi(3)).sqrt();
    let a = inner.ln() + big_a;
    let ln_n = (n as f64).ln();
    let log_bound = if a == f64::NEG_INFINITY { ln_n } else { ln_n.max(a) + (-(a - ln_n).abs()).exp().ln_1p() };
    (big_a, log_bound)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierRow {
    pub t: f64,
    pub sup_psi: f64,
    /// `tol_mp − sup Ψ`
    pub psi_margin: f64,
    pub sup_phi: f64,
    /// `(n·log(1 + c(n)Kt) + 1)·t`
    pub phi_bound: f64,
    pub phi_margin: f64,
    pub log_sup_trace: f64,
    pub log_trace_bound: Option<f64>,
    pub trace_margin: Option<f64>,
}

impl BarrierRow {
    pub fn passed(&self) -> bool {
        self.psi_margin >= 0.0 && self.phi_margin >= 0.0 && self.trace_margin.is_none_or(|m| m >= 0.0)
    }
}

/// Potentials for every snapshot: stored, or reconstructed by quadrature.
fn potentials(traj: &Trajectory) -> Result<Vec<ScalarField>> {
    if traj.snapshots.iter().all(|s| s.phi.is_some()) {
        Ok(traj.snapshots.iter().map(|s| s.phi.clone().expect("checked")).collect())
    } else {
        flow::potential_from_trajectory(traj)
    }
}

/// Monitored barrier inequalities per snapshot; violations are reported in
/// the margins, never raised.
pub fn barrier_checks(traj: &Trajectory, params: &BarrierParams) -> Result<(Vec<BarrierRow>, Option<TraceBound>)> {
    if traj.normalized {
        return Err(Error::BadParameter("barrier bounds concern the unnormalized flow".into()));
    }
    let grid = *traj.refs.g0.grid();
    let n = grid.dim();
    let phis = potentials(traj)?;
    let rates: Vec<Vec<f64>> = traj.snapshots.iter().map(|s| snapshot_rate(s, &traj.refs)).collect::<Result<_>>()?;

    let bound = params.trace_constants().map(|(s, s2, alpha)| {
        let frak_m = traj
            .snapshots
            .iter()
            .zip(&phis)
            .zip(&rates)
            .map(|((snap, phi), r)| {
                let v: Vec<f64> = (0..grid.len())
                    .into_par_iter()
                    .map(|i| ((s2 - snap.t) * r[i] + phi.values()[i] + n as f64 * snap.t).abs())
                    .collect();
                stencil::max_value(&v)
            })
            .fold(0.0f64, f64::max);
        let (a, log_bound) = trace_bound(n, params.k, params.c_trace, alpha, frak_m);
        TraceBound { s, s2, alpha, frak_m, a, log_bound }
    });

    let mut rows = Vec::with_capacity(traj.snapshots.len());
    for ((snap, phi), r) in traj.snapshots.iter().zip(&phis).zip(&rates) {
        let t = snap.t;
        let (psi, _) = psi_lambda_parts(t, phi, &ScalarField::from_values(grid, r.clone())?, params.s1);
        let sup_psi = stencil::max_value(psi.values());
        let sup_phi = stencil::max_value(phi.values());
        let phi_bound = (n as f64 * (1.0 + params.c_n * params.k * t).ln() + 1.0) * t;
        let upsilon = trace_with_inverse(traj.refs.g0.tensor(), &snap.g)?;
        let log_sup_trace = stencil::max_value(&upsilon).ln();
        let log_trace_bound = bound.as_ref().map(|b| b.log_bound);
        rows.push(BarrierRow {
            t,
            sup_psi,
            psi_margin: params.tol_mp - sup_psi,
            sup_phi,
            phi_bound,
            phi_margin: phi_bound + params.tol_mp - sup_phi,
            log_sup_trace,
            log_trace_bound,
            trace_margin: log_trace_bound.map(|b| b - log_sup_trace),
        });
    }
    Ok((rows, bound))
}

/// `max |T(g(t)) − T(g₀)|` per snapshot.
pub fn t_conservation(traj: &Trajectory) -> Vec<(f64, f64)> {
    let t0 = geometry::t_tensor(traj.refs.g0.tensor());
    traj.snapshots
        .iter()
        .map(|s| {
            let t = geometry::t_tensor(&s.g);
            let d: Vec<f64> = t.values().par_iter().zip(t0.values()).map(|(a, b)| a - b).collect();
            (s.t, stencil::max_abs(&d))
        })
        .collect()
}

/// `max |T(g(t))|` per snapshot.
pub fn t_magnitude(traj: &Trajectory) -> Vec<(f64, f64)> {
    traj.snapshots.iter().map(|s| (s.t, geometry::t_tensor(&s.g).max_abs())).collect()
}

fn generalized_at(g: &Mat, beta: &Mat, node: usize) -> Result<Vec<f64>> {
    Mat::generalized_eigenvalues(beta, g).ok_or(Error::NotPositiveDefinite { node, min_eig: g.min_eigenvalue() })
}

/// Eigenvalues of `β` relative to `g` at a node, descending.
pub fn beta_eigenvalues(g: &MetricField, probe: usize) -> Result<Vec<f64>> {
    let beta = geometry::beta_tensor(g)?;
    generalized_at(&g.at(probe), &beta.at(probe), probe)
}

fn beta_eigenvalues_of(g: &SymTensorField, probes: &[usize]) -> Result<Vec<Vec<f64>>> {
    let beta = geometry::beta_from_log_det(&geometry::log_det_of(g)?);
    probes.iter().map(|&p| generalized_at(&g.at(p), &beta.at(p), p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySeries {
    pub probe: usize,
    pub vector: Vec<f64>,
    /// `(t, (1/t)·log(|v|²_t / |v|²_0))` for `t > 0`.
    pub samples: Vec<(f64, f64)>,
    pub last: Option<f64>,
    /// Limit estimate from the last two samples, eliminating a `c/t` term.
    pub limit_estimate: Option<f64>,
}

/// Decay rate of a fixed tangent vector along a normalized trajectory.
pub fn decay_rate(traj: &Trajectory, v: &[f64], probe: usize) -> Result<DecaySeries> {
    if v.iter().all(|x| *x == 0.0) {
        return Err(Error::ZeroVector);
    }
    let n = traj.refs.g0.grid().dim();
    if v.len() != n {
        return Err(Error::BadParameter(format!("vector of length {} in dimension {n}", v.len())));
    }
    let first = traj.snapshots.first().ok_or(Error::InsufficientSnapshots { have: 0, need: 1 })?;
    let norm0 = first.g.at(probe).quad_form(v);
    let samples: Vec<(f64, f64)> = traj
        .snapshots
        .iter()
        .filter(|s| s.t > 0.0)
        .map(|s| (s.t, (s.g.at(probe).quad_form(v) / norm0).ln() / s.t))
        .collect();
    let last = samples.last().map(|s| s.1);
    let limit_estimate = match samples.len() {
        0 | 1 => last,
        k => {
            let ((t1, r1), (t2, r2)) = (samples[k - 2], samples[k - 1]);
            Some((t2 * r2 - t1 * r1) / (t2 - t1))
        }
    };
    Ok(DecaySeries { probe, vector: v.to_vec(), samples, last, limit_estimate })
}

/// The grid origin plus `extra` distinct seeded pseudo-random nodes.
pub fn default_probes(grid: &GridSpec, seed: u64, extra: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = vec![0usize];
    let want = (extra + 1).min(grid.len());
    while probes.len() < want {
        let p = rng.random_range(0..grid.len());
        if !probes.contains(&p) {
            probes.push(p);
        }
    }
    probes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSettings {
    pub s1: f64,
    pub tol_mp: f64,
    pub probes: Vec<usize>,
    pub k: MeasuredK,
    /// Barrier threshold from the gate; `None` when unbounded.
    pub s_gate: Option<f64>,
}

/// One row per snapshot. Optional entries are `None` where the quantity does
/// not apply (e.g. potentials along the normalized flow).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagRecord {
    pub t: f64,
    pub sup_psi: Option<f64>,
    pub sup_lambda: Option<f64>,
    pub inf_lambda: Option<f64>,
    pub r_psi: Option<f64>,
    pub r_lambda: Option<f64>,
    pub t_deviation: f64,
    pub max_t: f64,
    pub sup_upsilon: f64,
    pub sup_theta: f64,
    pub min_eig_g: f64,
    pub min_eig_beta: f64,
    pub barrier: Option<BarrierRow>,
    /// Per probe, descending eigenvalues of `β` relative to `g`.
    pub beta_eigs: Vec<Vec<f64>>,
    /// Per probe, decay rate of the first coordinate vector (normalized flow).
    pub decay: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub settings: DiagnosticsSettings,
    pub scheme: flow::Scheme,
    pub normalized: bool,
    pub trace_bound: Option<TraceBound>,
    pub records: Vec<DiagRecord>,
    pub decay: Vec<DecaySeries>,
}

impl DiagnosticsReport {
    pub fn compute(traj: &Trajectory, settings: &DiagnosticsSettings) -> Result<Self> {
        let grid = *traj.refs.g0.grid();
        let n = grid.dim();
        let unnormalized = !traj.normalized;
        let zero = SymTensorField::zeros(grid);

        let (barrier_rows, trace_bound) = if unnormalized {
            let params = BarrierParams::new(n, settings.k.k, settings.s1, settings.s_gate, settings.tol_mp);
            let (rows, b) = barrier_checks(traj, &params)?;
            (Some(rows), b)
        } else {
            (None, None)
        };
        let residuals: Vec<ResidualRow> = if unnormalized && traj.snapshots.len() >= 3 {
            scalar_residuals(traj, settings.s1)?
        } else {
            Vec::new()
        };
        let phis = if unnormalized { Some(potentials(traj)?) } else { None };
        let conservation = t_conservation(traj);
        let decay: Vec<DecaySeries> = if traj.normalized {
            let mut v = vec![0.0; n];
            v[0] = 1.0;
            settings.probes.iter().map(|&p| decay_rate(traj, &v, p)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        let mut records = Vec::with_capacity(traj.snapshots.len());
        for (k, snap) in traj.snapshots.iter().enumerate() {
            let (sup_psi, sup_lambda, inf_lambda) = match &phis {
                Some(phis) => {
                    let rate = ScalarField::from_values(grid, snapshot_rate(snap, &traj.refs)?)?;
                    let (psi, lam) = psi_lambda_parts(snap.t, &phis[k], &rate, settings.s1);
                    (
                        Some(stencil::max_value(psi.values())),
                        Some(stencil::max_value(lam.values())),
                        Some(stencil::min_value(lam.values())),
                    )
                }
                None => (None, None, None),
            };
            let residual = residuals.iter().find(|r| r.t == snap.t);
            let beta = geometry::beta_from_log_det(&snap.log_det);
            let decay_here = decay
                .iter()
                .map(|d| d.samples.iter().find(|(t, _)| *t == snap.t).map(|(_, r)| *r))
                .collect();
            records.push(DiagRecord {
                t: snap.t,
                sup_psi,
                sup_lambda,
                inf_lambda,
                r_psi: residual.map(|r| r.r_psi),
                r_lambda: residual.map(|r| r.r_lambda),
                t_deviation: conservation[k].1,
                max_t: geometry::t_tensor(&snap.g).max_abs(),
                sup_upsilon: stencil::max_value(&trace_with_inverse(traj.refs.g0.tensor(), &snap.g)?),
                sup_theta: stencil::max_value(&trace_with_inverse(&snap.g, traj.refs.g0.tensor())?),
                min_eig_g: geometry::min_eigen_gap(&snap.g, &zero)?,
                min_eig_beta: geometry::min_eigen_gap(&beta, &zero)?,
                barrier: barrier_rows.as_ref().map(|r| r[k].clone()),
                beta_eigs: beta_eigenvalues_of(&snap.g, &settings.probes)?,
                decay: decay_here,
            });
        }
        for w in records.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::NonFinite(format!("snapshot times not increasing at t = {}", w[1].t)));
            }
        }
        Ok(Self {
            settings: settings.clone(),
            scheme: traj.scheme,
            normalized: traj.normalized,
            trace_bound,
            records,
            decay,
        })
    }

    /// Column order of [`to_csv`](Self::to_csv).
    pub fn columns(&self) -> Vec<String> {
        let mut c: Vec<String> = [
            "t",
            "sup_psi",
            "sup_lambda",
            "inf_lambda",
            "r_psi",
            "r_lambda",
            "t_deviation",
            "max_t",
            "sup_upsilon",
            "sup_theta",
            "min_eig_g",
            "min_eig_beta",
            "sup_phi",
            "phi_bound",
            "phi_margin",
            "psi_margin",
            "log_sup_trace",
            "log_trace_bound",
            "trace_margin",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let n = self.records.first().and_then(|r| r.beta_eigs.first()).map_or(0, |e| e.len());
        for p in 0..self.settings.probes.len() {
            for i in 0..n {
                c.push(format!("lambda{}_p{p}", i + 1));
            }
        }
        for p in 0..self.decay.len() {
            c.push(format!("decay_p{p}"));
        }
        c
    }

    /// One row per snapshot; empty cells mark quantities that do not apply.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# probes={:?} tol_mp={} s1={} K={} s_gate={}",
            self.settings.probes,
            self.settings.tol_mp,
            self.settings.s1,
            self.settings.k.k,
            self.settings.s_gate.map_or("unbounded".to_string(), |s| s.to_string())
        );
        out.push_str(&self.columns().join(","));
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.records {
            let b = r.barrier.as_ref();
            let mut cells = vec![
                r.t.to_string(),
                opt(r.sup_psi),
                opt(r.sup_lambda),
                opt(r.inf_lambda),
                opt(r.r_psi),
                opt(r.r_lambda),
                r.t_deviation.to_string(),
                r.max_t.to_string(),
                r.sup_upsilon.to_string(),
                r.sup_theta.to_string(),
                r.min_eig_g.to_string(),
                r.min_eig_beta.to_string(),
                opt(b.map(|b| b.sup_phi)),
                opt(b.map(|b| b.phi_bound)),
                opt(b.map(|b| b.phi_margin)),
                opt(b.map(|b| b.psi_margin)),
                opt(b.map(|b| b.log_sup_trace)),
                opt(b.and_then(|b| b.log_trace_bound)),
                opt(b.and_then(|b| b.trace_margin)),
            ];
            for e in &r.beta_eigs {
                cells.extend(e.iter().map(|x| x.to_string()));
            }
            cells.extend(r.decay.iter().map(|d| opt(*d)));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}
