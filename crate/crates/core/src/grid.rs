//! Uniform periodic grids and the per-node field containers built on them.
//!
//! Nodes are stored in row-major order: for a multi-index `(i₀, …, i_{n−1})`
//! the flat index is `((i₀·N + i₁)·N + i₂)`, so the last axis varies fastest.
//! Axis `a` is the affine coordinate `x^{a+1}`; node positions are `iₐ·h`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    nodes: usize,
    period: f64,
}

impl GridSpec {
    /// `dim ∈ 1..=3`, `nodes` a power of two ≥ 16, `period > 0`.
    pub fn new(dim: usize, nodes: usize, period: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::BadParameter(format!("grid dimension {dim} not in 1..=3")));
        }
        if nodes < 16 || !nodes.is_power_of_two() {
            return Err(Error::BadParameter(format!(
                "nodes per axis must be a power of two >= 16, got {nodes}"
            )));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::BadParameter(format!("period must be positive, got {period}")));
        }
        Ok(Self { dim, nodes, period })
    }

    /// Unit-period grid.
    pub fn unit(dim: usize, nodes: usize) -> Result<Self> {
        Self::new(dim, nodes, 1.0)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn nodes_per_axis(&self) -> usize {
        self.nodes
    }

    #[inline]
    pub fn period(&self) -> f64 {
        self.period
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        self.period / self.nodes as f64
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.pow(self.dim as u32)
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.nodes.pow((self.dim - 1 - axis) as u32)
    }

    #[inline]
    pub fn coord(&self, idx: usize, axis: usize) -> usize {
        (idx / self.stride(axis)) % self.nodes
    }

    /// Periodic neighbour `k` steps along `axis`.
    #[inline]
    pub fn shift(&self, idx: usize, axis: usize, k: isize) -> usize {
        let n = self.nodes as isize;
        let c = self.coord(idx, axis) as isize;
        let c2 = (c + k).rem_euclid(n);
        let s = self.stride(axis) as isize;
        (idx as isize + (c2 - c) * s) as usize
    }

    pub fn index_of(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dim);
        multi.iter().fold(0, |acc, &c| acc * self.nodes + (c % self.nodes))
    }

    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        (0..self.dim).map(|a| self.coord(idx, a)).collect()
    }

    pub fn position(&self, idx: usize) -> [f64; 3] {
        let h = self.spacing();
        let mut x = [0.0; 3];
        for (a, xa) in x.iter_mut().enumerate().take(self.dim) {
            *xa = self.coord(idx, a) as f64 * h;
        }
        x
    }

    /// Node nearest to a point (wrapped into the period cell).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let h = self.spacing();
        let multi: Vec<usize> = x
            .iter()
            .map(|&xa| ((xa / h).round() as i64).rem_euclid(self.nodes as i64) as usize)
            .collect();
        self.index_of(&multi)
    }

    pub fn same_as(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Number of stored components of a symmetric n×n tensor.
#[inline]
pub fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Packed upper-triangle slot of `(i, j)`; row `i` starts at `Σ_{r<i}(n − r)`.
#[inline]
pub fn sym_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * i.saturating_sub(1) / 2 + (j - i)
}

macro_rules! plain_field {
    ($(#[$m:meta])* $name:ident, $comps:expr) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            grid: GridSpec,
            values: Vec<f64>,
        }

        impl $name {
            pub fn components(grid: &GridSpec) -> usize {
                let n = grid.dim();
                let f: fn(usize) -> usize = $comps;
                f(n)
            }

            pub fn zeros(grid: GridSpec) -> Self {
                let len = grid.len() * Self::components(&grid);
                Self { grid, values: vec![0.0; len] }
            }

            pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
                let want = grid.len() * Self::components(&grid);
                if values.len() != want {
                    return Err(Error::GridMismatch(format!(
                        "{} expects {want} values, got {}",
                        stringify!($name),
                        values.len()
                    )));
                }
                Ok(Self { grid, values })
            }

            #[inline]
            pub fn grid(&self) -> &GridSpec {
                &self.grid
            }

            #[inline]
            pub fn values(&self) -> &[f64] {
                &self.values
            }

            #[inline]
            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_values(self) -> Vec<f64> {
                self.values
            }

            /// Components at one node.
            #[inline]
            pub fn node(&self, idx: usize) -> &[f64] {
                let c = Self::components(&self.grid);
                &self.values[idx * c..(idx + 1) * c]
            }

            pub fn max_abs(&self) -> f64 {
                crate::stencil::max_abs(&self.values)
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|v| v.is_finite())
            }
        }
    };
}

plain_field!(
    /// One scalar per node.
    ScalarField,
    |_n| 1
);
plain_field!(
    /// One covector/vector per node.
    VectorField,
    |n| n
);
plain_field!(
    /// Rank-3 array `T[a][b][c]` per node, row-major in `(a, b, c)`.
    Tensor3Field,
    |n| n * n * n
);
plain_field!(
    /// Rank-4 array `T[a][b][c][d]` per node, row-major.
    Tensor4Field,
    |n| n * n * n * n
);

impl ScalarField {
    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 3]) -> f64 + Sync) -> Self {
        let values = (0..grid.len()).into_par_iter().map(|i| f(grid.position(i))).collect();
        Self { grid, values }
    }

    #[inline]
    pub fn at(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        Self { grid, values: vec![c; grid.len()] }
    }
}

impl VectorField {
    #[inline]
    pub fn at(&self, idx: usize, i: usize) -> f64 {
        self.values[idx * self.grid.dim() + i]
    }
}

impl Tensor3Field {
    #[inline]
    pub fn at(&self, idx: usize, a: usize, b: usize, c: usize) -> f64 {
        let n = self.grid.dim();
        self.values[idx * n * n * n + (a * n + b) * n + c]
    }
}

impl Tensor4Field {
    #[inline]
    pub fn at(&self, idx: usize, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let n = self.grid.dim();
        self.values[idx * n * n * n * n + ((a * n + b) * n + c) * n + d]
    }
}

/// Symmetric n×n tensor per node, stored as the packed upper triangle so that
/// `v_ij = v_ji` holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensorField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl SymTensorField {
    pub fn components(grid: &GridSpec) -> usize {
        sym_len(grid.dim())
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, values: vec![0.0; grid.len() * sym_len(grid.dim())] }
    }

    pub fn from_packed(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        let want = grid.len() * sym_len(grid.dim());
        if values.len() != want {
            return Err(Error::GridMismatch(format!(
                "SymTensorField expects {want} packed values, got {}",
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }

    /// Build from a per-node matrix; only the upper triangle is read.
    pub fn from_fn(grid: GridSpec, f: impl Fn(usize) -> Mat + Sync) -> Self {
        let n = grid.dim();
        let c = sym_len(n);
        let mut values = vec![0.0; grid.len() * c];
        values.par_chunks_mut(c).enumerate().for_each(|(idx, out)| {
            let m = f(idx);
            pack_upper(&m, out);
        });
        Self { grid, values }
    }

    pub fn constant(grid: GridSpec, m: &Mat) -> Self {
        Self::from_fn(grid, |_| *m)
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn packed(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, idx: usize, i: usize, j: usize) -> f64 {
        let n = self.grid.dim();
        self.values[idx * sym_len(n) + sym_index(n, i, j)]
    }

    pub fn at(&self, idx: usize) -> Mat {
        let n = self.grid.dim();
        let c = sym_len(n);
        let s = &self.values[idx * c..(idx + 1) * c];
        Mat::from_fn(n, |i, j| s[sym_index(n, i, j)])
    }

    /// Component `(i, j)` as a scalar node array.
    pub fn component(&self, i: usize, j: usize) -> Vec<f64> {
        let n = self.grid.dim();
        let c = sym_len(n);
        let k = sym_index(n, i, j);
        self.values.par_chunks(c).map(|s| s[k]).collect()
    }

    /// Assemble from one scalar array per upper-triangle component `(i ≤ j)`.
    pub fn from_components(grid: GridSpec, f: impl Fn(usize, usize) -> Vec<f64>) -> Self {
        let n = grid.dim();
        let c = sym_len(n);
        let mut values = vec![0.0; grid.len() * c];
        for i in 0..n {
            for j in i..n {
                let comp = f(i, j);
                let k = sym_index(n, i, j);
                for (idx, v) in comp.into_iter().enumerate() {
                    values[idx * c + k] = v;
                }
            }
        }
        Self { grid, values }
    }

    pub fn map(&self, f: impl Fn(usize, &Mat) -> Mat + Sync) -> Self {
        Self::from_fn(self.grid, |idx| f(idx, &self.at(idx)))
    }

    /// `self + s·other` componentwise.
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        let values = self.values.par_iter().zip(other.values.par_iter()).map(|(a, b)| a + s * b).collect();
        Self { grid: self.grid, values }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { grid: self.grid, values: self.values.par_iter().map(|a| s * a).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        crate::stencil::max_abs(&self.values)
    }

    /// Max-node componentwise distance.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let d: Vec<f64> = self.values.par_iter().zip(other.values.par_iter()).map(|(a, b)| (a - b).abs()).collect();
        crate::stencil::max_abs(&d)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Full row-major `n×n` expansion per node.
    pub fn expanded(&self) -> Vec<f64> {
        let n = self.grid.dim();
        let mut out = Vec::with_capacity(self.grid.len() * n * n);
        for idx in 0..self.grid.len() {
            let m = self.at(idx);
            for i in 0..n {
                for j in 0..n {
                    out.push(m.a[i][j]);
                }
            }
        }
        out
    }
}

fn pack_upper(m: &Mat, out: &mut [f64]) {
    let n = m.n;
    for i in 0..n {
        for j in i..n {
            out[sym_index(n, i, j)] = m.a[i][j];
        }
    }
}
