//! Pointwise geometry from pre-sampled derivative arrays ("jets").
//!
//! Stencil-based quantities on the periodic grid are first reduced to jets and
//! then run through the same pointwise formulas used for analytically sampled
//! charts, where no finite differencing is possible.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField, SymTensorField, Tensor3Field, Tensor4Field, VectorField};
use crate::linalg::Mat;

/// Derivatives of a convex potential up to fourth order at each sample:
/// `hess = ∂²φ` (the metric), `third[i][j][k] = ∂³φ`, `fourth[i][j][k][l] = ∂⁴φ`.
#[derive(Debug, Clone)]
pub struct PotentialJet {
    pub hess: SymTensorField,
    pub third: Tensor3Field,
    pub fourth: Tensor4Field,
}

/// Metric components with first and second derivatives:
/// `dg[i][j][k] = ∂_k g_ij`, `ddg[i][j][k][l] = ∂_k ∂_l g_ij`.
#[derive(Debug, Clone)]
pub struct MetricJet {
    pub g: SymTensorField,
    pub dg: Tensor3Field,
    pub ddg: Tensor4Field,
}

impl PotentialJet {
    /// Sample a jet from closed-form derivative callbacks. Each callback gets
    /// the node position and returns the full row-major component array.
    pub fn sample(
        grid: GridSpec,
        hess: impl Fn([f64; 3]) -> Mat + Sync,
        third: impl Fn([f64; 3]) -> Vec<f64> + Sync,
        fourth: impl Fn([f64; 3]) -> Vec<f64> + Sync,
    ) -> Result<Self> {
        let n = grid.dim();
        let hess = SymTensorField::from_fn(grid, |i| hess(grid.position(i)));
        let t: Vec<f64> = (0..grid.len()).into_par_iter().flat_map_iter(|i| third(grid.position(i))).collect();
        let f: Vec<f64> = (0..grid.len()).into_par_iter().flat_map_iter(|i| fourth(grid.position(i))).collect();
        if t.len() != grid.len() * n.pow(3) || f.len() != grid.len() * n.pow(4) {
            return Err(Error::GridMismatch("jet callback returned the wrong number of components".into()));
        }
        Ok(Self { hess, third: Tensor3Field::from_values(grid, t)?, fourth: Tensor4Field::from_values(grid, f)? })
    }

    pub fn grid(&self) -> &GridSpec {
        self.hess.grid()
    }

    /// For a Hessian metric `g = ∂²φ` the metric jet is a re-indexing of the potential jet.
    pub fn metric_jet(&self) -> MetricJet {
        MetricJet { g: self.hess.clone(), dg: self.third.clone(), ddg: self.fourth.clone() }
    }
}

fn inverse_at(g: &SymTensorField, idx: usize) -> Result<Mat> {
    let m = g.at(idx);
    m.inverse_spd().ok_or(Error::NotPositiveDefinite { node: idx, min_eig: m.min_eigenvalue() })
}

fn collect_nodes<F>(grid: GridSpec, comps: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    let mut out = vec![0.0; grid.len() * comps];
    out.par_chunks_mut(comps).enumerate().try_for_each(|(idx, chunk)| f(idx, chunk))?;
    Ok(out)
}

/// `γ^i_jk = g^{il} · ½ ∂_l∂_j∂_k φ`.
pub fn christoffel_from_jet(jet: &PotentialJet) -> Result<Tensor3Field> {
    let grid = *jet.grid();
    let n = grid.dim();
    let values = collect_nodes(grid, n * n * n, |idx, out| {
        let ginv = inverse_at(&jet.hess, idx)?;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut s = 0.0;
                    for l in 0..n {
                        s += ginv.a[i][l] * 0.5 * jet.third.at(idx, l, j, k);
                    }
                    out[(i * n + j) * n + k] = s;
                }
            }
        }
        Ok(())
    })?;
    Tensor3Field::from_values(grid, values)
}

/// `Q_ijkl = ½ φ_ijkl − ½ g^{pq} φ_ikp φ_jlq`, evaluated exactly as written.
pub fn hessian_curvature_from_jet(jet: &PotentialJet) -> Result<Tensor4Field> {
    let grid = *jet.grid();
    let n = grid.dim();
    let values = collect_nodes(grid, n.pow(4), |idx, out| {
        let ginv = inverse_at(&jet.hess, idx)?;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mut s = 0.0;
                        for p in 0..n {
                            for q in 0..n {
                                s += ginv.a[p][q] * jet.third.at(idx, i, k, p) * jet.third.at(idx, j, l, q);
                            }
                        }
                        out[((i * n + j) * n + k) * n + l] = 0.5 * jet.fourth.at(idx, i, j, k, l) - 0.5 * s;
                    }
                }
            }
        }
        Ok(())
    })?;
    Tensor4Field::from_values(grid, values)
}

/// `∂_i∂_j log det g = g^{pq}∂_i∂_j g_pq − g^{pa} ∂_j g_ab g^{bq} ∂_i g_pq`.
fn log_det_hessian_at(jet: &MetricJet, idx: usize) -> Result<Mat> {
    let n = jet.g.grid().dim();
    let ginv = inverse_at(&jet.g, idx)?;
    let mut m = Mat::zeros(n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for p in 0..n {
                for q in 0..n {
                    s += ginv.a[p][q] * jet.ddg.at(idx, p, q, i, j);
                    for a in 0..n {
                        for b in 0..n {
                            s -= ginv.a[p][a] * jet.dg.at(idx, a, b, j) * ginv.a[b][q] * jet.dg.at(idx, p, q, i);
                        }
                    }
                }
            }
            m.a[i][j] = s;
            m.a[j][i] = s;
        }
    }
    Ok(m)
}

pub fn log_det_from_jet(jet: &MetricJet) -> Result<ScalarField> {
    let grid = *jet.g.grid();
    let values = collect_nodes(grid, 1, |idx, out| {
        let m = jet.g.at(idx);
        out[0] = m.log_det_spd().ok_or(Error::NotPositiveDefinite { node: idx, min_eig: m.min_eigenvalue() })?;
        Ok(())
    })?;
    ScalarField::from_values(grid, values)
}

/// `β = −∂²log det g` from analytic derivatives.
pub fn beta_from_jet(jet: &MetricJet) -> Result<SymTensorField> {
    let grid = *jet.g.grid();
    let mats: Vec<Mat> = (0..grid.len()).into_par_iter().map(|i| log_det_hessian_at(jet, i)).collect::<Result<_>>()?;
    Ok(SymTensorField::from_fn(grid, |i| mats[i].scale(-1.0)))
}

/// `(α, κ)` with `α_i = ½∂_i log det g`, `κ = ½∂²log det g`, sharing the
/// log-det Hessian with [`beta_from_jet`] so that `β = −2κ` exactly.
pub fn koszul_from_jet(jet: &MetricJet) -> Result<(VectorField, SymTensorField)> {
    let grid = *jet.g.grid();
    let n = grid.dim();
    let alpha = collect_nodes(grid, n, |idx, out| {
        let ginv = inverse_at(&jet.g, idx)?;
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in 0..n {
                for q in 0..n {
                    s += ginv.a[p][q] * jet.dg.at(idx, p, q, i);
                }
            }
            *o = 0.5 * s;
        }
        Ok(())
    })?;
    let mats: Vec<Mat> = (0..grid.len()).into_par_iter().map(|i| log_det_hessian_at(jet, i)).collect::<Result<_>>()?;
    let kappa = SymTensorField::from_fn(grid, |i| mats[i].scale(0.5));
    Ok((VectorField::from_values(grid, alpha)?, kappa))
}

/// `T^k_jl = ∂_j g_kl − ∂_l g_kj` from analytic first derivatives.
pub fn t_from_jet(jet: &MetricJet) -> Result<Tensor3Field> {
    let grid = *jet.g.grid();
    let n = grid.dim();
    let values = collect_nodes(grid, n.pow(3), |idx, out| {
        for k in 0..n {
            for j in 0..n {
                for l in 0..n {
                    out[(k * n + j) * n + l] = jet.dg.at(idx, k, l, j) - jet.dg.at(idx, k, j, l);
                }
            }
        }
        Ok(())
    })?;
    Tensor3Field::from_values(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// g = eˣ on a chart: every derivative of the potential equals eˣ.
    fn exp_jet() -> PotentialJet {
        let grid = GridSpec::unit(1, 16).unwrap();
        PotentialJet::sample(
            grid,
            |x| Mat::from_fn(1, |_, _| x[0].exp()),
            |x| vec![x[0].exp()],
            |x| vec![x[0].exp()],
        )
        .unwrap()
    }

    #[test]
    fn exponential_chart_is_flat_in_log_det() {
        let jet = exp_jet();
        let beta = beta_from_jet(&jet.metric_jet()).unwrap();
        assert!(beta.max_abs() < 1e-14);
        let gamma = christoffel_from_jet(&jet).unwrap();
        assert!(gamma.values().iter().all(|v| (v - 0.5).abs() < 1e-15));
        let q = hessian_curvature_from_jet(&jet).unwrap();
        assert!(q.max_abs() < 1e-14);
    }

    #[test]
    fn koszul_alpha_of_exponential_is_half() {
        let (alpha, kappa) = koszul_from_jet(&exp_jet().metric_jet()).unwrap();
        assert!(alpha.values().iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert!(kappa.max_abs() < 1e-14);
    }
}
