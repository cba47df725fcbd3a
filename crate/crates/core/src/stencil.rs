//! Second-order central differences on periodic grids, and reductions whose
//! result does not depend on the thread count.

use rayon::prelude::*;

use crate::grid::{GridSpec, ScalarField, SymTensorField, VectorField};

/// Leaves below this size are summed sequentially.
const PAIRWISE_LEAF: usize = 256;

/// `(f[+1] − f[−1]) / 2h` along `axis`.
pub fn d1(grid: &GridSpec, f: &[f64], axis: usize) -> Vec<f64> {
    debug_assert_eq!(f.len(), grid.len());
    let inv = 1.0 / (2.0 * grid.spacing());
    (0..grid.len())
        .into_par_iter()
        .map(|i| (f[grid.shift(i, axis, 1)] - f[grid.shift(i, axis, -1)]) * inv)
        .collect()
}

/// Second derivative `D_a D_b`: the compact three-point stencil when `a == b`,
/// the four-point cross stencil otherwise. Symmetric in `(a, b)` by construction.
pub fn d2(grid: &GridSpec, f: &[f64], a: usize, b: usize) -> Vec<f64> {
    debug_assert_eq!(f.len(), grid.len());
    let h = grid.spacing();
    if a == b {
        let inv = 1.0 / (h * h);
        (0..grid.len())
            .into_par_iter()
            .map(|i| (f[grid.shift(i, a, 1)] - 2.0 * f[i] + f[grid.shift(i, a, -1)]) * inv)
            .collect()
    } else {
        let (a, b) = (a.min(b), a.max(b));
        let inv = 1.0 / (4.0 * h * h);
        (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let ip = grid.shift(i, a, 1);
                let im = grid.shift(i, a, -1);
                let pp = f[grid.shift(ip, b, 1)];
                let pm = f[grid.shift(ip, b, -1)];
                let mp = f[grid.shift(im, b, 1)];
                let mm = f[grid.shift(im, b, -1)];
                ((pp - pm) - (mp - mm)) * inv
            })
            .collect()
    }
}

/// Third derivative for the multi-index `{i, j, k}`, evaluated on its sorted
/// form so the result is symmetric under every permutation. A repeated index
/// is differentiated with the compact stencil, the remaining one with `d1`.
pub fn d3(grid: &GridSpec, f: &[f64], i: usize, j: usize, k: usize) -> Vec<f64> {
    let mut s = [i, j, k];
    s.sort_unstable();
    let [a, b, c] = s;
    if a == b {
        d1(grid, &d2(grid, f, a, a), c)
    } else if b == c {
        d1(grid, &d2(grid, f, b, b), a)
    } else {
        d1(grid, &d2(grid, f, b, c), a)
    }
}

/// Fourth derivative for the multi-index `{i, j, k, l}` as two composed
/// second-difference passes `D_{ab} D_{cd}` on the sorted index tuple.
pub fn d4(grid: &GridSpec, f: &[f64], i: usize, j: usize, k: usize, l: usize) -> Vec<f64> {
    let mut s = [i, j, k, l];
    s.sort_unstable();
    let [a, b, c, d] = s;
    d2(grid, &d2(grid, f, c, d), a, b)
}

pub fn gradient(f: &ScalarField) -> VectorField {
    let grid = *f.grid();
    let n = grid.dim();
    let parts: Vec<Vec<f64>> = (0..n).map(|a| d1(&grid, f.values(), a)).collect();
    let mut values = vec![0.0; grid.len() * n];
    for (a, p) in parts.iter().enumerate() {
        for (idx, v) in p.iter().enumerate() {
            values[idx * n + a] = *v;
        }
    }
    VectorField::from_values(grid, values).expect("gradient layout")
}

/// `∇dφ` of a scalar in affine coordinates, i.e. the matrix of `D_a D_b φ`.
pub fn hessian(f: &ScalarField) -> SymTensorField {
    let grid = *f.grid();
    SymTensorField::from_components(grid, |a, b| d2(&grid, f.values(), a, b))
}

/// Largest absolute value; zero for an empty slice. NaN propagates.
pub fn max_abs(v: &[f64]) -> f64 {
    v.par_iter().map(|x| x.abs()).reduce(|| 0.0, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
}

pub fn min_value(v: &[f64]) -> f64 {
    v.par_iter().copied().reduce(|| f64::INFINITY, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.min(b) })
}

pub fn max_value(v: &[f64]) -> f64 {
    v.par_iter().copied().reduce(|| f64::NEG_INFINITY, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
}

/// Sum over a fixed binary tree of the canonical ordering: split points depend
/// only on the length, so the rounding is identical for any thread count.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= PAIRWISE_LEAF {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    let (l, r) = rayon::join(|| pairwise_sum(&v[..mid]), || pairwise_sum(&v[mid..]));
    l + r
}

/// Root-mean-square via [`pairwise_sum`].
pub fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let sq: Vec<f64> = v.par_iter().map(|x| x * x).collect();
    (pairwise_sum(&sq) / v.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sample(grid: &GridSpec, f: impl Fn([f64; 3]) -> f64 + Sync) -> Vec<f64> {
        ScalarField::from_fn(*grid, f).into_values()
    }

    #[test]
    fn d2_of_quadratic_mode_is_exact_up_to_symbol() {
        // D2 cos(2πx) = −(4/h²) sin²(πh) cos(2πx) exactly.
        let g = GridSpec::unit(1, 32).unwrap();
        let f = sample(&g, |x| (2.0 * PI * x[0]).cos());
        let h = g.spacing();
        let sym = -4.0 / (h * h) * (PI * h).sin().powi(2);
        let d = d2(&g, &f, 0, 0);
        for (i, v) in d.iter().enumerate() {
            assert!((v - sym * f[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn mixed_stencil_is_symmetric_and_second_order() {
        let mut errs = vec![];
        for &n in &[16usize, 32, 64] {
            let g = GridSpec::unit(2, n).unwrap();
            let f = sample(&g, |x| (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos());
            let a = d2(&g, &f, 0, 1);
            let b = d2(&g, &f, 1, 0);
            assert_eq!(a, b);
            let exact = sample(&g, |x| -(2.0 * PI).powi(2) * (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin());
            errs.push(a.iter().zip(&exact).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
        }
        let order = (errs[1] / errs[2]).log2();
        assert!((order - 2.0).abs() < 0.05, "order {order}");
    }

    #[test]
    fn third_and_fourth_are_permutation_symmetric() {
        let g = GridSpec::unit(2, 16).unwrap();
        let f = sample(&g, |x| (2.0 * PI * (x[0] + 2.0 * x[1])).sin() + (2.0 * PI * x[0]).cos());
        assert_eq!(d3(&g, &f, 0, 0, 1), d3(&g, &f, 1, 0, 0));
        assert_eq!(d3(&g, &f, 0, 1, 0), d3(&g, &f, 0, 0, 1));
        assert_eq!(d4(&g, &f, 0, 1, 0, 1), d4(&g, &f, 1, 1, 0, 0));
    }

    #[test]
    fn pairwise_sum_is_thread_count_independent() {
        let v: Vec<f64> = (0..10_000).map(|i| ((i as f64) * 0.37).sin() * 1e3).collect();
        let a = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| pairwise_sum(&v));
        let b = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| pairwise_sum(&v));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn shifts_wrap() {
        let g = GridSpec::unit(2, 16).unwrap();
        let idx = g.index_of(&[0, 15]);
        assert_eq!(g.multi_index(g.shift(idx, 1, 1)), vec![0, 0]);
        assert_eq!(g.multi_index(g.shift(idx, 0, -1)), vec![15, 15]);
    }
}
