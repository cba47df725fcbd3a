//! Pointwise differential geometry of an affine Riemannian metric on a
//! periodic grid: log-det, `β`, Koszul forms, Christoffel/γ, Hessian
//! curvature `Q`, the Riemann tensor recovered from `Q`, and the `T` tensor
//! that vanishes exactly for Hessian metrics.

pub mod jet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField, SymTensorField, Tensor3Field, Tensor4Field, VectorField};
use crate::linalg::Mat;
use crate::stencil;

pub use jet::{MetricJet, PotentialJet};

/// Default positivity floor for metric eigenvalues.
pub const POSITIVITY_FLOOR: f64 = 1e-10;

/// A symmetric tensor field certified positive definite at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    g: SymTensorField,
    floor: f64,
}

impl MetricField {
    pub fn new(g: SymTensorField) -> Result<Self> {
        Self::with_floor(g, POSITIVITY_FLOOR)
    }

    pub fn with_floor(g: SymTensorField, floor: f64) -> Result<Self> {
        let (node, min_eig) = min_eigen_node(&g);
        if !(min_eig > floor) {
            return Err(Error::NotPositiveDefinite { node, min_eig });
        }
        Ok(Self { g, floor })
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        self.g.grid()
    }

    #[inline]
    pub fn tensor(&self) -> &SymTensorField {
        &self.g
    }

    pub fn into_tensor(self) -> SymTensorField {
        self.g
    }

    #[inline]
    pub fn at(&self, idx: usize) -> Mat {
        self.g.at(idx)
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigen_node(&self.g).1
    }

    /// Largest spectral radius of `g⁻¹` over the nodes.
    pub fn max_inverse_radius(&self) -> f64 {
        let r: Vec<f64> = (0..self.grid().len()).into_par_iter().map(|i| 1.0 / self.g.at(i).min_eigenvalue()).collect();
        stencil::max_value(&r)
    }
}

/// `(node, λ_min)` of the node with the smallest eigenvalue; ties go to the
/// lowest index.
fn min_eigen_node(g: &SymTensorField) -> (usize, f64) {
    (0..g.grid().len())
        .into_par_iter()
        .map(|i| {
            let l = g.at(i).min_eigenvalue();
            (i, if l.is_nan() { f64::NEG_INFINITY } else { l })
        })
        .reduce(
            || (usize::MAX, f64::INFINITY),
            |a, b| match a.1.total_cmp(&b.1) {
                std::cmp::Ordering::Less => a,
                std::cmp::Ordering::Greater => b,
                std::cmp::Ordering::Equal => if a.0 <= b.0 { a } else { b },
            },
        )
}

/// Constant positive-definite base form plus a periodic potential, generating
/// `g = G₀ + ∇dφ` (the global potential is `½xᵀG₀x + φ`).
#[derive(Debug, Clone)]
pub struct HessianStructure {
    g0: Mat,
    phi: ScalarField,
}

impl HessianStructure {
    pub fn new(g0: Mat, phi: ScalarField) -> Result<Self> {
        if g0.n != phi.grid().dim() {
            return Err(Error::GridMismatch(format!("G0 is {0}x{0} on a {1}-d grid", g0.n, phi.grid().dim())));
        }
        if g0.sub(&g0.transpose()).max_abs() != 0.0 {
            return Err(Error::BadParameter("G0 must be symmetric".into()));
        }
        if g0.cholesky().is_none() {
            return Err(Error::BadParameter("G0 must be positive definite".into()));
        }
        if !phi.is_finite() {
            return Err(Error::NonFinite("potential".into()));
        }
        let hs = Self { g0, phi };
        metric_from_potential(&hs)?;
        Ok(hs)
    }

    pub fn grid(&self) -> &GridSpec {
        self.phi.grid()
    }

    pub fn base_form(&self) -> &Mat {
        &self.g0
    }

    pub fn potential(&self) -> &ScalarField {
        &self.phi
    }

    /// Finite-difference jet of the full potential `½xᵀG₀x + φ`.
    pub fn potential_jet(&self) -> Result<PotentialJet> {
        let grid = *self.grid();
        let n = grid.dim();
        let hess = metric_from_potential(self)?.into_tensor();
        let f = self.phi.values();

        let mut third = vec![0.0; grid.len() * n.pow(3)];
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    let d = stencil::d3(&grid, f, i, j, k);
                    for perm in permutations3(i, j, k) {
                        let slot = (perm[0] * n + perm[1]) * n + perm[2];
                        for (idx, v) in d.iter().enumerate() {
                            third[idx * n.pow(3) + slot] = *v;
                        }
                    }
                }
            }
        }
        let mut fourth = vec![0.0; grid.len() * n.pow(4)];
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    for l in k..n {
                        let d = stencil::d4(&grid, f, i, j, k, l);
                        for perm in permutations4(i, j, k, l) {
                            let slot = ((perm[0] * n + perm[1]) * n + perm[2]) * n + perm[3];
                            for (idx, v) in d.iter().enumerate() {
                                fourth[idx * n.pow(4) + slot] = *v;
                            }
                        }
                    }
                }
            }
        }
        Ok(PotentialJet {
            hess,
            third: Tensor3Field::from_values(grid, third)?,
            fourth: Tensor4Field::from_values(grid, fourth)?,
        })
    }
}

fn permutations3(i: usize, j: usize, k: usize) -> Vec<[usize; 3]> {
    let mut v = vec![[i, j, k], [i, k, j], [j, i, k], [j, k, i], [k, i, j], [k, j, i]];
    v.sort_unstable();
    v.dedup();
    v
}

fn permutations4(i: usize, j: usize, k: usize, l: usize) -> Vec<[usize; 4]> {
    let base = [i, j, k, l];
    let mut v = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let mut seen = [false; 4];
                    for x in [a, b, c, d] {
                        seen[x] = true;
                    }
                    if seen.iter().all(|s| *s) {
                        v.push([base[a], base[b], base[c], base[d]]);
                    }
                }
            }
        }
    }
    v.sort_unstable();
    v.dedup();
    v
}

/// `g_ij = (G₀)_ij + D_iD_j φ`.
pub fn metric_from_potential(hs: &HessianStructure) -> Result<MetricField> {
    let hess = stencil::hessian(&hs.phi);
    let g0 = hs.g0;
    MetricField::new(hess.map(|_, m| m.add(&g0)))
}

/// Pointwise `log det g` by Cholesky; no discretization error.
pub fn log_det_field(g: &MetricField) -> Result<ScalarField> {
    log_det_of(g.tensor())
}

pub(crate) fn log_det_of(g: &SymTensorField) -> Result<ScalarField> {
    let grid = *g.grid();
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let m = g.at(i);
            m.log_det_spd().ok_or(Error::NotPositiveDefinite { node: i, min_eig: m.min_eigenvalue() })
        })
        .collect::<Result<_>>()?;
    ScalarField::from_values(grid, values)
}

/// `β_ij = −D_iD_j log det g`.
pub fn beta_tensor(g: &MetricField) -> Result<SymTensorField> {
    Ok(beta_from_log_det(&log_det_field(g)?))
}

pub(crate) fn beta_from_log_det(ld: &ScalarField) -> SymTensorField {
    stencil::hessian(ld).scaled(-1.0)
}

/// First and second Koszul forms, `α_i = ½D_i log det g`, `κ_ij = ½D_iD_j log det g`.
pub fn koszul_forms(g: &MetricField) -> Result<(VectorField, SymTensorField)> {
    let ld = log_det_field(g)?;
    let grad = stencil::gradient(&ld);
    let grid = *grad.grid();
    let alpha = VectorField::from_values(grid, grad.values().par_iter().map(|v| 0.5 * v).collect())?;
    let kappa = stencil::hessian(&ld).scaled(0.5);
    Ok((alpha, kappa))
}

/// Christoffel symbols `γ^i_jk` of a Hessian metric, `g^{il}·½∂³φ_ljk`.
pub fn christoffel_gamma(hs: &HessianStructure) -> Result<Tensor3Field> {
    jet::christoffel_from_jet(&hs.potential_jet()?)
}

/// Lower the first index: `γ_ijk = g_il γ^l_jk`.
pub fn lower_first_index(gamma: &Tensor3Field, g: &SymTensorField) -> Result<Tensor3Field> {
    let grid = *g.grid();
    grid.same_as(gamma.grid())?;
    let n = grid.dim();
    let mut out = vec![0.0; grid.len() * n.pow(3)];
    out.par_chunks_mut(n.pow(3)).enumerate().for_each(|(idx, o)| {
        let m = g.at(idx);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    o[(i * n + j) * n + k] = (0..n).map(|l| m.a[i][l] * gamma.at(idx, l, j, k)).sum();
                }
            }
        }
    });
    Tensor3Field::from_values(grid, out)
}

/// Hessian curvature tensor `Q_ijkl = ½φ_ijkl − ½g^{pq}φ_ikp φ_jlq`.
pub fn hessian_curvature(hs: &HessianStructure) -> Result<Tensor4Field> {
    jet::hessian_curvature_from_jet(&hs.potential_jet()?)
}

/// `R̂_ijkl = ½(Q_ijkl − Q_jikl)`.
pub fn riemann_from_q(q: &Tensor4Field) -> Tensor4Field {
    let grid = *q.grid();
    let n = grid.dim();
    let mut out = vec![0.0; q.values().len()];
    out.par_chunks_mut(n.pow(4)).enumerate().for_each(|(idx, o)| {
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        o[((i * n + j) * n + k) * n + l] = 0.5 * (q.at(idx, i, j, k, l) - q.at(idx, j, i, k, l));
                    }
                }
            }
        }
    });
    Tensor4Field::from_values(grid, out).expect("same layout")
}

/// `T^k_jl = D_j g_kl − D_l g_kj`, stored as `T[k][j][l]`.
pub fn t_tensor(g: &SymTensorField) -> Tensor3Field {
    let grid = *g.grid();
    let n = grid.dim();
    // dg[(k*n + l)*n + j] = D_j g_kl
    let mut dg: Vec<Vec<f64>> = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for l in 0..n {
            let comp = g.component(k, l);
            for j in 0..n {
                dg.push(stencil::d1(&grid, &comp, j));
            }
        }
    }
    let mut out = vec![0.0; grid.len() * n.pow(3)];
    out.par_chunks_mut(n.pow(3)).enumerate().for_each(|(idx, o)| {
        for k in 0..n {
            for j in 0..n {
                for l in 0..n {
                    o[(k * n + j) * n + l] = dg[(k * n + l) * n + j][idx] - dg[(k * n + j) * n + l][idx];
                }
            }
        }
    });
    Tensor3Field::from_values(grid, out).expect("same layout")
}

/// Minimum over nodes of the smallest eigenvalue of `g − h`.
pub fn min_eigen_gap(g: &SymTensorField, h: &SymTensorField) -> Result<f64> {
    g.grid().same_as(h.grid())?;
    let v: Vec<f64> = (0..g.grid().len()).into_par_iter().map(|i| g.at(i).sub(&h.at(i)).min_eigenvalue()).collect();
    Ok(stencil::min_value(&v))
}

/// Per-node smallest eigenvalue of `g − h`.
pub fn eigen_gap_field(g: &SymTensorField, h: &SymTensorField) -> Result<ScalarField> {
    g.grid().same_as(h.grid())?;
    let v: Vec<f64> = (0..g.grid().len()).into_par_iter().map(|i| g.at(i).sub(&h.at(i)).min_eigenvalue()).collect();
    ScalarField::from_values(*g.grid(), v)
}
