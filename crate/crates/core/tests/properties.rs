use std::f64::consts::PI;

use proptest::prelude::*;

use hkflow_core::geometry::{self, HessianStructure, MetricField};
use hkflow_core::io::FieldData;
use hkflow_core::{gate, lift, Error, GridSpec, Mat, ScalarField, SymTensorField, Tensor4Field};

const TAU: f64 = 2.0 * PI;

#[derive(Debug, Clone)]
struct Mode {
    k: [i32; 2],
    amp: f64,
    phase: f64,
}

fn modes(dim: usize, max_amp: f64) -> impl Strategy<Value = Vec<Mode>> {
    let k = if dim == 1 {
        (1i32..=2).prop_map(|a| [a, 0]).boxed()
    } else {
        ((-2i32..=2), (-2i32..=2)).prop_filter("nonzero", |(a, b)| *a != 0 || *b != 0).prop_map(|(a, b)| [a, b]).boxed()
    };
    prop::collection::vec((k, -max_amp..max_amp, 0.0..TAU).prop_map(|(k, amp, phase)| Mode { k, amp, phase }), 1..4)
}

/// `Σ a cos(2π k·x + p) / (2π|k|)²`, whose Hessian is bounded by `Σ|a|`.
fn potential(grid: GridSpec, modes: &[Mode]) -> ScalarField {
    let dim = grid.dim();
    ScalarField::from_fn(grid, |x| {
        modes
            .iter()
            .map(|m| {
                let dot: f64 = (0..dim).map(|a| m.k[a] as f64 * x[a]).sum();
                let k2: f64 = (0..dim).map(|a| (m.k[a] * m.k[a]) as f64).sum();
                m.amp * (TAU * dot + m.phase).cos() / (TAU * TAU * k2)
            })
            .sum()
    })
}

fn structure(dim: usize, modes: &[Mode], g0: f64) -> HessianStructure {
    let grid = GridSpec::unit(dim, 16).unwrap();
    HessianStructure::new(Mat::identity(dim).scale(g0), potential(grid, modes)).unwrap()
}

/// Hessian structures that stay uniformly convex: amplitudes sum below 0.9·G0.
fn convex(dim: usize) -> impl Strategy<Value = HessianStructure> {
    (modes(dim, 0.3), 1.0..3.0f64).prop_map(move |(m, g0)| structure(dim, &m, g0))
}

fn any_convex() -> impl Strategy<Value = HessianStructure> {
    prop_oneof![convex(1), convex(2)]
}

fn spd(n: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| {
        let a = Mat::from_fn(n, |i, j| v[i * n + j]);
        Mat::from_fn(n, |i, j| (0..n).map(|k| a.a[i][k] * a.a[j][k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn beta_is_minus_twice_kappa(hs in any_convex()) {
        let g = geometry::metric_from_potential(&hs).unwrap();
        let beta = geometry::beta_tensor(&g).unwrap();
        let (_, kappa) = geometry::koszul_forms(&g).unwrap();
        prop_assert!(beta.max_abs_diff(&kappa.scaled(-2.0)) <= 1e-12 * beta.max_abs().max(1e-300));
    }

    #[test]
    fn lowered_gamma_is_totally_symmetric(hs in any_convex()) {
        let g = geometry::metric_from_potential(&hs).unwrap();
        let low = geometry::lower_first_index(&geometry::christoffel_gamma(&hs).unwrap(), g.tensor()).unwrap();
        let n = g.grid().dim();
        let scale = low.max_abs().max(1e-300);
        for idx in 0..g.grid().len() {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let v = low.at(idx, i, j, k);
                        for (a, b, c) in [(i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                            prop_assert!((v - low.at(idx, a, b, c)).abs() <= 1e-12 * scale);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn riemann_is_antisymmetric_in_first_pair(values in prop::collection::vec(-50.0..50.0f64, 256 * 16)) {
        let grid = GridSpec::unit(2, 16).unwrap();
        let q = Tensor4Field::from_values(grid, values).unwrap();
        let r = geometry::riemann_from_q(&q);
        for idx in 0..grid.len() {
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        for l in 0..2 {
                            prop_assert_eq!(r.at(idx, i, j, k, l), -r.at(idx, j, i, k, l));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn one_dimensional_riemann_vanishes(hs in convex(1)) {
        let q = geometry::hessian_curvature(&hs).unwrap();
        prop_assert_eq!(geometry::riemann_from_q(&q).max_abs(), 0.0);
    }

    #[test]
    fn kahler_ricci_is_a_quarter_beta(hs in any_convex()) {
        let g = geometry::metric_from_potential(&hs).unwrap();
        let ricci = lift::kahler_ricci(&lift::lift_metric(g.tensor()).unwrap()).unwrap();
        let quarter = geometry::beta_tensor(&g).unwrap().scaled(0.25);
        prop_assert!(ricci.max_abs_diff(&quarter) <= 1e-12 * quarter.max_abs().max(1e-300));
    }

    #[test]
    fn t_tensor_is_antisymmetric(hs in convex(2)) {
        let g = geometry::metric_from_potential(&hs).unwrap();
        let t = geometry::t_tensor(g.tensor());
        for idx in 0..g.grid().len() {
            for k in 0..2 {
                for j in 0..2 {
                    for l in 0..2 {
                        prop_assert_eq!(t.at(idx, k, j, l), -t.at(idx, k, l, j));
                    }
                }
            }
        }
    }

    #[test]
    fn metric_from_potential_keeps_positivity_floor(m in modes(2, 8.0), g0 in 0.5..2.0f64) {
        let grid = GridSpec::unit(2, 16).unwrap();
        match HessianStructure::new(Mat::identity(2).scale(g0), potential(grid, &m)) {
            Ok(hs) => {
                let g = geometry::metric_from_potential(&hs).unwrap();
                for idx in 0..grid.len() {
                    prop_assert!(g.at(idx).min_eigenvalue() > 1e-10);
                }
            }
            Err(e) => {
                let rejected = matches!(e, Error::NotPositiveDefinite { .. });
                prop_assert!(rejected);
            }
        }
    }

    #[test]
    fn beta_eigenvalues_are_real_and_signed(hs in any_convex(), c in spd(2)) {
        let g = geometry::metric_from_potential(&hs).unwrap();
        let grid = *g.grid();
        for probe in [0, grid.len() / 3] {
            let l = hkflow_core::diagnostics::beta_eigenvalues(&g, probe).unwrap();
            prop_assert!(l.iter().all(|v| v.is_finite()));
            prop_assert!(l.windows(2).all(|w| w[0] >= w[1]));
        }
        // β ≥ 0 pointwise (a constant metric here) forces nonnegative eigenvalues.
        let flat = MetricField::new(SymTensorField::constant(GridSpec::unit(2, 16).unwrap(), &c)).unwrap();
        let zero = SymTensorField::zeros(*flat.grid());
        prop_assert!(geometry::min_eigen_gap(&geometry::beta_tensor(&flat).unwrap(), &zero).unwrap() >= 0.0);
        let l = hkflow_core::diagnostics::beta_eigenvalues(&flat, 7).unwrap();
        prop_assert!(l.iter().all(|v| *v >= -1e-8));
    }

    #[test]
    fn scan_of_vanishing_curvature_is_zero(c in spd(2), seed in any::<u64>()) {
        let grid = GridSpec::unit(2, 16).unwrap();
        let q = Tensor4Field::zeros(grid);
        let g = SymTensorField::constant(grid, &c);
        let s = lift::bisectional_sign_scan(&q, &g, Some(&[0, 17, 100]), 16, seed).unwrap();
        prop_assert!(s.min.abs() <= 1e-10);
    }

    #[test]
    fn smaller_theta_never_lowers_the_threshold(hs in convex(1), a in 0.01..0.98f64, b in 0.01..0.98f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let g = geometry::metric_from_potential(&hs).unwrap();
        let u = ScalarField::zeros(*g.grid());
        let s_lo = gate::sb_estimate(&g, &u, lo).unwrap().s_max.unwrap_or(f64::INFINITY);
        let s_hi = gate::sb_estimate(&g, &u, hi).unwrap().s_max.unwrap_or(f64::INFINITY);
        prop_assert!(s_lo >= s_hi);
    }

    #[test]
    fn gate_result_brackets_the_threshold(hs in convex(2), theta in 0.05..0.95f64) {
        let g = geometry::metric_from_potential(&hs).unwrap();
        let r = gate::sb_estimate(&g, &ScalarField::zeros(*g.grid()), theta).unwrap();
        if let Some(s) = r.s_max {
            let beta = geometry::beta_tensor(&g).unwrap();
            let floor = g.tensor().scaled(theta);
            let gap = |s: f64| geometry::min_eigen_gap(&g.tensor().axpy(-s, &beta), &floor).unwrap();
            prop_assert!(gap(s) >= 0.0);
            prop_assert!(gap(s + 1e-4) < 0.0);
        }
    }

    #[test]
    fn cutoff_profile_invariants(kappa in 0.01..0.124f64, s in 0.0..0.9999f64) {
        let p = gate::build_cutoff(kappa).unwrap();
        let (a, b) = p.ramp();
        prop_assert!((0.0..=1.0).contains(&p.psi(s)));
        prop_assert!(p.psi_prime(s) >= 0.0 && p.psi_prime(s) <= 2.0 / (kappa * kappa) + 1e-8);
        if s <= 1.0 - kappa {
            prop_assert_eq!(p.f(s), 0.0);
        } else {
            prop_assert!(p.f_prime(s) > 0.0);
        }
        if s <= a {
            prop_assert_eq!(p.psi(s), 0.0);
            prop_assert_eq!(p.frak(s), 0.0);
        }
        if s >= b {
            prop_assert_eq!(p.psi(s), 1.0);
        }
        prop_assert!(p.frak_prime(s) >= 0.0);
        let t = s + 0.5 * (1.0 - s);
        prop_assert!(p.frak(t) >= p.frak(s));
    }

    #[test]
    fn field_files_roundtrip(values in prop::collection::vec(-1e6..1e6f64, 256 * 3)) {
        let grid = GridSpec::unit(2, 16).unwrap();
        let sym = SymTensorField::from_packed(grid, values).unwrap();
        let data = FieldData::from_sym(&sym);
        let bytes = data.to_bytes();
        let back = FieldData::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.into_sym().unwrap(), sym);
    }

    #[test]
    fn scalar_files_roundtrip(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 16)) {
        let grid = GridSpec::unit(1, 16).unwrap();
        let f = ScalarField::from_values(grid, values).unwrap();
        let back = FieldData::from_bytes(&FieldData::from_scalar(&f).to_bytes()).unwrap().into_scalar().unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn truncated_files_are_rejected(cut in 1usize..64) {
        let grid = GridSpec::unit(1, 16).unwrap();
        let bytes = FieldData::from_scalar(&ScalarField::constant(grid, 1.5)).to_bytes();
        let short = &bytes[..bytes.len() - cut];
        let rejected = matches!(FieldData::from_bytes(short), Err(Error::Format(_)));
        prop_assert!(rejected);
    }
}
