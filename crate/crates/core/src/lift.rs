//! The Hermitian metric `Σ (g_ij ∘ π) dz^i dz̄^j` on the tangent bundle, in
//! coordinates `z^j = ξ^j + √−1 ξ^{n+j}`.
//!
//! Components never depend on the fiber coordinates, so with
//! `∂_k = ½(∂_{ξ^k} − √−1 ∂_{ξ^{n+k}})` every mixed derivative `∂_k∂_l̄`
//! becomes a quarter of the base derivative and no 2n-dimensional grid is needed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, HessianStructure, MetricField};
use crate::grid::{GridSpec, SymTensorField, Tensor4Field};
use crate::linalg::Mat;
use crate::stencil;

pub const DEFAULT_FRAMES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct HermitianLift {
    h: MetricField,
}

impl HermitianLift {
    pub fn base_grid(&self) -> &GridSpec {
        self.h.grid()
    }

    /// Complex dimension of the lifted chart.
    pub fn complex_dim(&self) -> usize {
        self.h.grid().dim()
    }

    /// Hermitian components `h_ij̄` at a base node (real symmetric here).
    pub fn at(&self, idx: usize) -> Mat {
        self.h.at(idx)
    }

    pub fn components(&self) -> &SymTensorField {
        self.h.tensor()
    }
}

/// Copy the metric components into the lift, re-checking positivity.
pub fn lift_metric(g: &SymTensorField) -> Result<HermitianLift> {
    Ok(HermitianLift { h: MetricField::new(g.clone())? })
}

/// `R^T_{ij̄} = −∂_i∂_j̄ log det h = −¼ D_iD_j log det g`.
pub fn kahler_ricci(lift: &HermitianLift) -> Result<SymTensorField> {
    let ld = geometry::log_det_field(&lift.h)?;
    Ok(stencil::hessian(&ld).scaled(-0.25))
}

#[derive(Debug, Clone)]
pub struct KahlerCurvature {
    pub r: Tensor4Field,
    /// `max |R^T + ½Q|` against the Hessian curvature of the same structure.
    pub defect: f64,
}

/// `R^T_{ij̄kl̄} = −¼ D_kD_l h_ij + ¼ h^{pq}(D_k h_iq)(D_l h_pj)`, with both
/// derivatives taken as compositions of first differences of the lifted
/// components, compared against `−½Q`.
pub fn kahler_curvature(lift: &HermitianLift, hs: &HessianStructure) -> Result<KahlerCurvature> {
    let grid = *lift.base_grid();
    grid.same_as(hs.grid())?;
    let n = grid.dim();
    let comps: Vec<Vec<f64>> = (0..n * n).map(|ab| lift.components().component(ab / n, ab % n)).collect();
    // d1[(ab)*n + k] = D_k h_ab, dd[((ab)*n + k)*n + l] = D_k D_l h_ab
    let d1: Vec<Vec<f64>> = (0..n * n * n).map(|x| stencil::d1(&grid, &comps[x / n], x % n)).collect();
    let dd: Vec<Vec<f64>> = (0..n.pow(4)).map(|x| stencil::d1(&grid, &d1[x / n], x % n)).collect();
    let mut values = vec![0.0; grid.len() * n.pow(4)];
    values.par_chunks_mut(n.pow(4)).enumerate().try_for_each(|(idx, out)| -> Result<()> {
        let m = lift.at(idx);
        let inv = m.inverse_spd().ok_or(Error::NotPositiveDefinite { node: idx, min_eig: m.min_eigenvalue() })?;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut s = 0.0;
                        for p in 0..n {
                            for q in 0..n {
                                s += inv.a[p][q] * d1[(i * n + q) * n + k][idx] * d1[(p * n + j) * n + l][idx];
                            }
                        }
                        out[((i * n + j) * n + k) * n + l] = -0.25 * dd[((i * n + j) * n + k) * n + l][idx] + 0.25 * s;
                    }
                }
            }
        }
        Ok(())
    })?;
    let r = Tensor4Field::from_values(grid, values)?;
    let q = geometry::hessian_curvature(hs)?;
    let d: Vec<f64> = r.values().par_iter().zip(q.values()).map(|(a, b)| a + 0.5 * b).collect();
    Ok(KahlerCurvature { defect: stencil::max_abs(&d), r })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    /// Minimum of `−Q_iijj` over frames, index pairs and nodes.
    pub min: f64,
    pub node: usize,
    pub frames: usize,
}

/// Gram-Schmidt in the `g` inner product on a seeded uniform random basis.
fn random_frame(rng: &mut ChaCha8Rng, g: &Mat) -> Mat {
    let n = g.n;
    loop {
        let mut e = Mat::zeros(n);
        let mut ok = true;
        for c in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for prev in 0..c {
                let u: Vec<f64> = (0..n).map(|r| e.a[r][prev]).collect();
                let dot: f64 = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).map(|(a, b)| g.a[a][b] * v[a] * u[b]).sum();
                for r in 0..n {
                    v[r] -= dot * u[r];
                }
            }
            let norm2 = g.quad_form(&v);
            if !(norm2 > 1e-16) {
                ok = false;
                break;
            }
            let norm = norm2.sqrt();
            for r in 0..n {
                e.a[r][c] = v[r] / norm;
            }
        }
        if ok {
            return e;
        }
    }
}

/// Sample `frames` seeded `g`-orthonormal frames at each probe node and
/// return the smallest `−Q_iijj` seen. Each node draws from its own stream of
/// the seeded generator, so the result does not depend on scheduling.
pub fn bisectional_sign_scan(
    q: &Tensor4Field,
    g: &SymTensorField,
    probes: Option<&[usize]>,
    frames: usize,
    seed: u64,
) -> Result<ScanResult> {
    let grid = *g.grid();
    grid.same_as(q.grid())?;
    let n = grid.dim();
    let all: Vec<usize>;
    let nodes = match probes {
        Some(p) => p,
        None => {
            all = (0..grid.len()).collect();
            &all
        }
    };
    let best = nodes
        .par_iter()
        .map(|&node| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(node as u64);
            let m = g.at(node);
            let mut worst = f64::INFINITY;
            for _ in 0..frames {
                let e = random_frame(&mut rng, &m);
                for i in 0..n {
                    for j in 0..n {
                        let mut s = 0.0;
                        for a in 0..n {
                            for b in 0..n {
                                for c in 0..n {
                                    for d in 0..n {
                                        s += q.at(node, a, b, c, d) * e.a[a][i] * e.a[b][i] * e.a[c][j] * e.a[d][j];
                                    }
                                }
                            }
                        }
                        worst = worst.min(-s);
                    }
                }
            }
            (node, worst)
        })
        .reduce(
            || (usize::MAX, f64::INFINITY),
            |a, b| match a.1.total_cmp(&b.1) {
                std::cmp::Ordering::Less => a,
                std::cmp::Ordering::Greater => b,
                std::cmp::Ordering::Equal => if a.0 <= b.0 { a } else { b },
            },
        );
    Ok(ScanResult { min: best.1, node: best.0, frames })
}
