//! Dense helpers for the small (n ≤ 3) symmetric matrices living at each node.

/// Off-diagonal tolerance for the cyclic Jacobi eigen-solver, relative to ‖A‖_F.
pub const JACOBI_TOL: f64 = 1e-13;
const JACOBI_MAX_SWEEPS: usize = 64;

/// A square matrix of dimension `n ≤ 3` stored in a fixed 3×3 block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat {
    pub n: usize,
    pub a: [[f64; 3]; 3],
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=3).contains(&n), "matrix dimension must be 1..=3");
        Self { n, a: [[0.0; 3]; 3] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i][i] = 1.0;
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.a[i][j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_fn(self.n, |i, j| s * self.a[i][j])
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::from_fn(self.n, |i, j| self.a[i][j] + o.a[i][j])
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self::from_fn(self.n, |i, j| self.a[i][j] - o.a[i][j])
    }

    pub fn mul(&self, o: &Self) -> Self {
        Self::from_fn(self.n, |i, j| (0..self.n).map(|k| self.a[i][k] * o.a[k][j]).sum())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n, |i, j| self.a[j][i])
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[i][i]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0_f64;
        for i in 0..self.n {
            for j in 0..self.n {
                m = m.max(self.a[i][j].abs());
            }
        }
        m
    }

    /// Lower-triangular Cholesky factor; `None` if a pivot is not strictly positive.
    pub fn cholesky(&self) -> Option<Self> {
        let n = self.n;
        let mut l = Self::zeros(n);
        for j in 0..n {
            let mut d = self.a[j][j];
            for k in 0..j {
                d -= l.a[j][k] * l.a[j][k];
            }
            if !(d > 0.0) {
                return None;
            }
            let dj = d.sqrt();
            l.a[j][j] = dj;
            for i in (j + 1)..n {
                let mut s = self.a[i][j];
                for k in 0..j {
                    s -= l.a[i][k] * l.a[j][k];
                }
                l.a[i][j] = s / dj;
            }
        }
        Some(l)
    }

    /// log det via Cholesky.
    pub fn log_det_spd(&self) -> Option<f64> {
        let l = self.cholesky()?;
        Some(2.0 * (0..self.n).map(|i| l.a[i][i].ln()).sum::<f64>())
    }

    /// Inverse of a lower-triangular matrix.
    pub fn lower_inverse(&self) -> Self {
        let n = self.n;
        let mut inv = Self::zeros(n);
        for j in 0..n {
            inv.a[j][j] = 1.0 / self.a[j][j];
            for i in (j + 1)..n {
                let mut s = 0.0;
                for k in j..i {
                    s -= self.a[i][k] * inv.a[k][j];
                }
                inv.a[i][j] = s / self.a[i][i];
            }
        }
        inv
    }

    /// Inverse of a symmetric positive-definite matrix.
    pub fn inverse_spd(&self) -> Option<Self> {
        let linv = self.cholesky()?.lower_inverse();
        Some(linv.transpose().mul(&linv))
    }

    /// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
    pub fn sym_eigen(&self) -> SymEigen {
        let n = self.n;
        let mut a = *self;
        let mut v = Self::identity(n);
        let norm = frobenius(&a).max(f64::MIN_POSITIVE);
        for _ in 0..JACOBI_MAX_SWEEPS {
            if off_diagonal(&a) <= JACOBI_TOL * norm {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.a[p][q];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a.a[q][q] - a.a[p][p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a.a[k][p];
                        let akq = a.a[k][q];
                        a.a[k][p] = c * akp - s * akq;
                        a.a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a.a[p][k];
                        let aqk = a.a[q][k];
                        a.a[p][k] = c * apk - s * aqk;
                        a.a[q][k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v.a[k][p];
                        let vkq = v.a[k][q];
                        v.a[k][p] = c * vkp - s * vkq;
                        v.a[k][q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a.a[j][j].total_cmp(&a.a[i][i]));
        let mut values = [0.0; 3];
        let mut vectors = Self::zeros(n);
        for (dst, &src) in order.iter().enumerate() {
            values[dst] = a.a[src][src];
            for k in 0..n {
                vectors.a[k][dst] = v.a[k][src];
            }
        }
        SymEigen { n, values, vectors }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let e = self.sym_eigen();
        e.values[e.n - 1]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.sym_eigen().values[0]
    }

    /// Eigenvalues of `B⁻¹A` (A symmetric, B SPD), descending, via Cholesky whitening of B.
    pub fn generalized_eigenvalues(a: &Self, b: &Self) -> Option<Vec<f64>> {
        let linv = b.cholesky()?.lower_inverse();
        let w = linv.mul(a).mul(&linv.transpose());
        let w = w.symmetrized();
        let e = w.sym_eigen();
        Some(e.values[..e.n].to_vec())
    }

    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.n, |i, j| 0.5 * (self.a[i][j] + self.a[j][i]))
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self.a[i][j] * v[i] * v[j];
            }
        }
        s
    }
}

/// Eigenvalues sorted descending with matching column eigenvectors.
#[derive(Debug, Clone, Copy)]
pub struct SymEigen {
    pub n: usize,
    pub values: [f64; 3],
    pub vectors: Mat,
}

fn frobenius(m: &Mat) -> f64 {
    let mut s = 0.0;
    for i in 0..m.n {
        for j in 0..m.n {
            s += m.a[i][j] * m.a[i][j];
        }
    }
    s.sqrt()
}

fn off_diagonal(m: &Mat) -> f64 {
    let mut s = 0.0;
    for i in 0..m.n {
        for j in 0..m.n {
            if i != j {
                s += m.a[i][j] * m.a[i][j];
            }
        }
    }
    s.sqrt()
}
