//! Cutoff profiles, the conformal exhaustion metric and the barrier
//! threshold `sup { S : g₀ − Sβ(g₀) + D²u ≥ θg₀ }` for a given `u`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, MetricField};
use crate::grid::{ScalarField, SymTensorField};
use crate::stencil;

/// Absolute error target for the tabulated integral.
pub const QUAD_TOL: f64 = 1e-10;
pub const BISECTION_TOL: f64 = 1e-4;
pub const S_CAP: f64 = 1e6;
const TABLE_CELLS: usize = 512;

/// `r(x) = e(x) / (e(x) + e(1−x))` with `e(x) = exp(−1/x)` on `x > 0`.
fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / x).exp();
        let b = (-1.0 / (1.0 - x)).exp();
        a / (a + b)
    }
}

fn smoothstep_prime(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    let a = (-1.0 / x).exp();
    let b = (-1.0 / (1.0 - x)).exp();
    (a * b * (1.0 / (x * x) + 1.0 / ((1.0 - x) * (1.0 - x)))) / ((a + b) * (a + b))
}

#[derive(Debug, Clone)]
pub struct CutoffProfile {
    kappa: f64,
    /// Ramp `[a, b] = [1−κ+κ², 1−κ+2κ²]`.
    a: f64,
    b: f64,
    /// `𝔉` at the cell boundaries of a uniform mesh on `[a, b]`.
    cumulative: Vec<f64>,
}

pub fn build_cutoff(kappa: f64) -> Result<CutoffProfile> {
    if !(kappa > 0.0 && kappa < 0.125) {
        return Err(Error::BadParameter(format!("cutoff width {kappa} outside (0, 1/8)")));
    }
    let a = 1.0 - kappa + kappa * kappa;
    let b = a + kappa * kappa;
    let mut p = CutoffProfile { kappa, a, b, cumulative: vec![0.0; TABLE_CELLS + 1] };
    let cell = (b - a) / TABLE_CELLS as f64;
    let pieces: Vec<f64> = (0..TABLE_CELLS)
        .into_par_iter()
        .map(|i| p.integrate(a + i as f64 * cell, a + (i + 1) as f64 * cell))
        .collect();
    for i in 0..TABLE_CELLS {
        p.cumulative[i + 1] = p.cumulative[i] + pieces[i];
    }
    Ok(p)
}

impl CutoffProfile {
    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Start and end of the ramp of `ψ`.
    pub fn ramp(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let tol = QUAD_TOL / (4.0 * TABLE_CELLS as f64);
        quadrature::integrate(|s| self.frak_prime(s), lo, hi, tol).integral
    }

    fn w(&self, s: f64) -> f64 {
        (s - 1.0 + self.kappa) / self.kappa
    }

    /// `f(s) = −log(1 − w²)`, `w = (s−1+κ)/κ`, zero up to `1−κ`.
    pub fn f(&self, s: f64) -> f64 {
        let w = self.w(s);
        if w <= 0.0 {
            0.0
        } else if w >= 1.0 {
            f64::INFINITY
        } else {
            -(-w * w).ln_1p()
        }
    }

    pub fn f_prime(&self, s: f64) -> f64 {
        let w = self.w(s);
        if w <= 0.0 {
            0.0
        } else if w >= 1.0 {
            f64::INFINITY
        } else {
            2.0 * w / (self.kappa * (1.0 - w * w))
        }
    }

    pub fn psi(&self, s: f64) -> f64 {
        smoothstep((s - self.a) / (self.b - self.a))
    }

    pub fn psi_prime(&self, s: f64) -> f64 {
        smoothstep_prime((s - self.a) / (self.b - self.a)) / (self.b - self.a)
    }

    /// `𝔉′ = ψf′`.
    pub fn frak_prime(&self, s: f64) -> f64 {
        let p = self.psi(s);
        if p == 0.0 {
            0.0
        } else {
            p * self.f_prime(s)
        }
    }

    /// `𝔉(s) = ∫₀ˢ ψf′`; past the ramp `ψ = 1` and the integral continues as `f`.
    pub fn frak(&self, s: f64) -> f64 {
        if s <= self.a {
            0.0
        } else if s >= self.b {
            self.cumulative[TABLE_CELLS] + self.f(s) - self.f(self.b)
        } else {
            let cell = (self.b - self.a) / TABLE_CELLS as f64;
            let i = (((s - self.a) / cell) as usize).min(TABLE_CELLS - 1);
            let lo = self.a + i as f64 * cell;
            self.cumulative[i] + self.integrate(lo, s)
        }
    }

    /// Rows `(s, f, ψ, 𝔉)` on a uniform mesh of `[0, 1)`.
    pub fn table(&self, points: usize) -> Vec<[f64; 4]> {
        (0..points)
            .into_par_iter()
            .map(|i| {
                let s = i as f64 / points as f64;
                [s, self.f(s), self.psi(s), self.frak(s)]
            })
            .collect()
    }

    pub fn table_csv(&self, points: usize) -> String {
        let mut out = String::from("s,f,psi,frak\n");
        for r in self.table(points) {
            out.push_str(&format!("{},{},{},{}\n", r[0], r[1], r[2], r[3]));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutoffReport {
    pub kappa: f64,
    pub mesh_points: usize,
    /// `sup e^{−k𝔉}|𝔉^{(k)}|` for `k = 1..=k_max`.
    pub weighted_sup: Vec<f64>,
    pub min_frak_prime: f64,
    /// `max |𝔉|` on `[0, 1−κ+κ²]`.
    pub max_frak_before_ramp: f64,
    pub frak_nondecreasing: bool,
    pub f_zero_before: bool,
    pub f_increasing: bool,
    pub psi_in_unit_interval: bool,
    pub psi_support_ok: bool,
    pub min_psi_prime: f64,
    pub max_psi_prime: f64,
    pub psi_prime_bound: f64,
    /// Target for `exp(𝔉(s+τ) − 𝔉(s−τ)) ≤ 1 + c₂κ` used while choosing `τ`.
    pub c2_target: f64,
    /// Achieved `max (exp(Δ)−1)/κ` and `min τe^{𝔉(s−τ)}/κ²` over the samples.
    pub c2: f64,
    pub c3: f64,
    pub samples: usize,
}

impl CutoffReport {
    pub fn passed(&self) -> bool {
        self.min_frak_prime >= -1e-12
            && self.max_frak_before_ramp <= 1e-12
            && self.frak_nondecreasing
            && self.f_zero_before
            && self.f_increasing
            && self.psi_in_unit_interval
            && self.psi_support_ok
            && self.min_psi_prime >= 0.0
            && self.max_psi_prime <= self.psi_prime_bound + 1e-8
    }
}

const C2_TARGET: f64 = 1.0;

/// Checks the support, sign and ramp properties on a fine mesh, the weighted
/// derivative bounds for `k ≤ k_max`, and measures the two-sided oscillation
/// constants near `s = 1`.
///
/// Orders above one are central differences of the exact `𝔉′`, with a step
/// shrinking with the distance to `s = 1`.
pub fn cutoff_property_check(p: &CutoffProfile, k_max: usize) -> Result<CutoffReport> {
    if !(1..=3).contains(&k_max) {
        return Err(Error::BadParameter(format!("derivative order {k_max} outside 1..=3")));
    }
    let kappa = p.kappa;
    let mesh = 20_000usize;
    let end = 1.0 - 1e-3 * kappa;
    let s_at = |i: usize| end * i as f64 / mesh as f64;
    let rows: Vec<(f64, f64, f64, f64, f64, [f64; 3])> = (0..=mesh)
        .into_par_iter()
        .map(|i| {
            let s = s_at(i);
            let fp = p.frak_prime(s);
            let h = (kappa * kappa / 100.0).min((1.0 - s) / 50.0);
            let d2 = (p.frak_prime(s + h) - p.frak_prime(s - h)) / (2.0 * h);
            let d3 = (p.frak_prime(s + h) - 2.0 * fp + p.frak_prime(s - h)) / (h * h);
            (s, p.f(s), p.psi(s), p.frak(s), p.psi_prime(s), [fp, d2, d3])
        })
        .collect();
    let mut weighted = vec![0.0f64; k_max];
    let mut min_fp = f64::INFINITY;
    let mut max_before = 0.0f64;
    let mut nondecreasing = true;
    let mut f_zero_before = true;
    let mut f_increasing = true;
    let mut psi_unit = true;
    let mut psi_support = true;
    let mut max_pp = f64::NEG_INFINITY;
    let mut min_pp = f64::INFINITY;
    for (i, &(s, f, psi, fr, pp, d)) in rows.iter().enumerate() {
        for k in 0..k_max {
            weighted[k] = weighted[k].max((-((k + 1) as f64) * fr).exp() * d[k].abs());
        }
        min_fp = min_fp.min(d[0]);
        if s <= p.a {
            max_before = max_before.max(fr.abs());
        }
        if s <= 1.0 - kappa && f != 0.0 {
            f_zero_before = false;
        }
        if !(0.0..=1.0).contains(&psi) {
            psi_unit = false;
        }
        if (s <= p.a && psi != 0.0) || (s > p.b && psi != 1.0) {
            psi_support = false;
        }
        max_pp = max_pp.max(pp);
        min_pp = min_pp.min(pp);
        if i > 0 {
            let prev = &rows[i - 1];
            if fr < prev.3 {
                nondecreasing = false;
            }
            if prev.0 >= 1.0 - kappa && f <= prev.1 {
                f_increasing = false;
            }
        }
    }
    let (c2, c3, samples) = oscillation_constants(p);
    Ok(CutoffReport {
        kappa,
        mesh_points: mesh + 1,
        weighted_sup: weighted,
        min_frak_prime: min_fp,
        max_frak_before_ramp: max_before,
        frak_nondecreasing: nondecreasing,
        f_zero_before,
        f_increasing,
        psi_in_unit_interval: psi_unit,
        psi_support_ok: psi_support,
        min_psi_prime: min_pp,
        max_psi_prime: max_pp,
        psi_prime_bound: 2.0 / (kappa * kappa),
        c2_target: C2_TARGET,
        c2,
        c3,
        samples,
    })
}

/// For each sampled `s ∈ (1−2κ, 1)` take the largest `τ < min(s, 1−s)` with
/// `exp(𝔉(s+τ) − 𝔉(s−τ)) ≤ 1 + C2_TARGET·κ` (the left side grows with `τ`).
fn oscillation_constants(p: &CutoffProfile) -> (f64, f64, usize) {
    let kappa = p.kappa;
    let samples = 400usize;
    let limit = (1.0 + C2_TARGET * kappa).ln();
    let per: Vec<(f64, f64)> = (1..samples)
        .into_par_iter()
        .map(|i| {
            let s = 1.0 - 2.0 * kappa + 2.0 * kappa * i as f64 / samples as f64;
            let spread = |t: f64| p.frak(s + t) - p.frak(s - t);
            let top = s.min(1.0 - s);
            let (mut lo, mut hi) = (0.0, top);
            if spread(top * (1.0 - 1e-12)) <= limit {
                lo = top * (1.0 - 1e-12);
            } else {
                while hi - lo > 1e-14 * top.max(1e-300) && hi - lo > 1e-15 {
                    let mid = 0.5 * (lo + hi);
                    if spread(mid) <= limit {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
            }
            let tau = lo;
            ((spread(tau).exp() - 1.0) / kappa, tau * p.frak(s - tau).exp() / (kappa * kappa))
        })
        .collect();
    let c2 = per.iter().map(|x| x.0).fold(0.0, f64::max);
    let c3 = per.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    (c2, c3, per.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BisectionStep {
    pub s: f64,
    pub margin: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone)]
pub struct GateResult {
    /// `None` when the cap was reached while still feasible.
    pub s_max: Option<f64>,
    pub theta: f64,
    /// Smallest infeasible `S` found, when there is one.
    pub s_above: Option<f64>,
    pub margin_stats: MarginStats,
    /// Per-node smallest eigenvalue of `g₀ − Sβ₀ + D²u − θg₀` at the last
    /// feasible `S` (at `S = 0` if even that fails).
    pub margin: ScalarField,
    pub trace: Vec<BisectionStep>,
}

impl GateResult {
    pub fn unbounded(&self) -> bool {
        self.s_max.is_none()
    }
}

struct Feasibility {
    base: SymTensorField,
    beta: SymTensorField,
}

impl Feasibility {
    fn gap(&self, s: f64) -> SymTensorField {
        self.base.axpy(-s, &self.beta)
    }

    fn margin(&self, s: f64) -> f64 {
        let zero = SymTensorField::zeros(*self.base.grid());
        geometry::min_eigen_gap(&self.gap(s), &zero).expect("same grid")
    }
}

/// Largest feasible `S` for this `u`, by doubling then dyadic bisection to
/// within [`BISECTION_TOL`]. A lower bound for the optimum over all `u`.
pub fn sb_estimate(g0: &MetricField, u: &ScalarField, theta: f64) -> Result<GateResult> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::BadParameter(format!("theta {theta} outside (0, 1)")));
    }
    g0.grid().same_as(u.grid())?;
    let beta = geometry::beta_tensor(g0)?;
    let base = g0.tensor().scaled(1.0 - theta).axpy(1.0, &stencil::hessian(u));
    let feas = Feasibility { base, beta };
    let mut trace = Vec::new();
    let probe = |s: f64, trace: &mut Vec<BisectionStep>| {
        let margin = feas.margin(s);
        let feasible = margin >= 0.0;
        trace.push(BisectionStep { s, margin, feasible });
        feasible
    };
    let mut lo = 0.0;
    let mut hi = None;
    if !probe(0.0, &mut trace) {
        hi = Some(0.0);
    } else {
        let mut s = 1.0;
        loop {
            if !probe(s, &mut trace) {
                hi = Some(s);
                break;
            }
            lo = s;
            if s >= S_CAP {
                break;
            }
            s = (2.0 * s).min(S_CAP);
        }
    }
    if let Some(mut h) = hi {
        while h - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + h);
            if probe(mid, &mut trace) {
                lo = mid;
            } else {
                h = mid;
            }
        }
        hi = Some(h);
    }
    let margin = geometry::eigen_gap_field(&feas.gap(lo), &SymTensorField::zeros(*g0.grid()))?;
    let v = margin.values();
    let margin_stats = MarginStats {
        min: stencil::min_value(v),
        max: stencil::max_value(v),
        mean: stencil::pairwise_sum(v) / v.len() as f64,
    };
    let s_max = match hi {
        Some(_) => Some(lo),
        None => None,
    };
    Ok(GateResult { s_max, theta, s_above: hi, margin_stats, margin, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExhaustReport {
    pub rho0: f64,
    pub max_ratio: f64,
    /// True when `F = 0` at every node, so `h₀ = g₀`.
    pub untouched: bool,
    pub sup_dg: f64,
    pub sup_ddg: f64,
    pub sup_dh: f64,
    pub sup_ddh: f64,
}

impl ExhaustReport {
    pub fn first_inflation(&self) -> f64 {
        self.sup_dh - self.sup_dg
    }

    pub fn second_inflation(&self) -> f64 {
        self.sup_ddh - self.sup_ddg
    }
}

fn derivative_sups(g: &SymTensorField) -> (f64, f64) {
    let grid = *g.grid();
    let n = grid.dim();
    let mut first = 0.0f64;
    let mut second = 0.0f64;
    for i in 0..n {
        for j in i..n {
            let c = g.component(i, j);
            for a in 0..n {
                first = first.max(stencil::max_abs(&stencil::d1(&grid, &c, a)));
                for b in a..n {
                    second = second.max(stencil::max_abs(&stencil::d2(&grid, &c, a, b)));
                }
            }
        }
    }
    (first, second)
}

/// `h₀ = e^{2F}g₀` with `F = 𝔉(ρ/ρ₀)`.
pub fn conformal_exhaust(g0: &MetricField, rho: &ScalarField, rho0: f64, kappa: f64) -> Result<(MetricField, ExhaustReport)> {
    let profile = build_cutoff(kappa)?;
    g0.grid().same_as(rho.grid())?;
    if !(rho0 > 0.0) {
        return Err(Error::BadParameter(format!("rho0 {rho0} must be positive")));
    }
    let ratios: Vec<f64> = rho.values().iter().map(|r| r / rho0).collect();
    if let Some(r) = ratios.iter().find(|r| !(**r >= 0.0 && **r < 1.0)) {
        return Err(Error::BadParameter(format!("rho/rho0 = {r} outside [0, 1)")));
    }
    let weights: Vec<f64> = ratios.par_iter().map(|&r| (2.0 * profile.frak(r)).exp()).collect();
    let h = g0.tensor().map(|i, m| m.scale(weights[i]));
    let (sup_dg, sup_ddg) = derivative_sups(g0.tensor());
    let (sup_dh, sup_ddh) = derivative_sups(&h);
    let report = ExhaustReport {
        rho0,
        max_ratio: stencil::max_value(&ratios),
        untouched: weights.iter().all(|w| *w == 1.0),
        sup_dg,
        sup_ddg,
        sup_dh,
        sup_ddh,
    };
    Ok((MetricField::new(h)?, report))
}
