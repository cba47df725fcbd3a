//! Worked examples on the fixture library, module by module.

use std::f64::consts::PI;

use hkflow_core::diagnostics::{self, BarrierParams};
use hkflow_core::fixtures::{self, Fixture, FixtureId};
use hkflow_core::flow::{self, DtPolicy, FlowConfig, FlowRun, Scheme};
use hkflow_core::gate;
use hkflow_core::geometry::{self, jet};
use hkflow_core::harness::{self, RunConfig};
use hkflow_core::lift;
use hkflow_core::{Error, Mat, ScalarField, SymTensorField};

const TAU: f64 = 2.0 * PI;

fn fixture(id: FixtureId, n: usize) -> Fixture {
    Fixture::build(id, n).unwrap()
}

fn h2(n: usize) -> f64 {
    (1.0 / n as f64).powi(2)
}

fn fixed(dt: f64, t_end: f64, scheme: Scheme) -> FlowConfig {
    FlowConfig { scheme, dt: DtPolicy::Fixed(dt), t_end, stride: 1, ..FlowConfig::default() }
}

fn order(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}

// geometry

#[test]
fn f3_metric_and_log_det_at_origin() {
    for n in [32, 64] {
        let g = fixture(FixtureId::F3, n).metric().unwrap();
        // D2 cos(2πx) = cos(2πx)·(1 − (2π)²h²/12 + …)
        assert!((g.at(0).a[0][0] - 3.0).abs() <= 3.3 * h2(n));
        let ld = geometry::log_det_field(&g).unwrap();
        assert!((ld.at(0) - 3f64.ln()).abs() <= 1.1 * h2(n));
    }
}

#[test]
fn exponential_chart_examples() {
    let f2 = fixture(FixtureId::F2, 64);
    let pj = f2.potential_jet().unwrap().unwrap();
    let mj = pj.metric_jet();
    assert!(jet::beta_from_jet(&mj).unwrap().max_abs() < 1e-14);
    let gamma = jet::christoffel_from_jet(&pj).unwrap();
    assert!(gamma.values().iter().all(|v| (v - 0.5).abs() < 1e-14));
    assert!(jet::hessian_curvature_from_jet(&pj).unwrap().max_abs() < 1e-12);
}

#[test]
fn f3_christoffel_at_quarter() {
    let errs: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&n| {
            let f = fixture(FixtureId::F3, n);
            let gamma = geometry::christoffel_gamma(f.hessian_structure().unwrap()).unwrap();
            (gamma.at(f.grid().nearest_node(&[0.25]), 0, 0, 0) + PI / 2.0).abs()
        })
        .collect();
    assert!(errs[1] <= 20.0 * h2(64), "{errs:?}");
    let o = order(errs[1], errs[2]);
    assert!((1.9..=2.1).contains(&o), "{o}");
}

#[test]
fn f5_riemann_component_against_oracle() {
    let oracle = fixtures::oracle(FixtureId::F5).unwrap();
    assert_eq!(oracle.points[0], vec![0.0, 0.0]);
    let table = oracle.quantity("riemann").unwrap();
    // R̂₁₂₁₂ sits at ((0·2 + 1)·2 + 0)·2 + 1 in the row-major layout; every
    // mixed Q component at the origin equals (2π)²/2, so the oracle value is 0.
    let want = table[0][5];
    let mut worst = Vec::new();
    for n in [32, 64, 128] {
        let f = fixture(FixtureId::F5, n);
        let q = geometry::hessian_curvature(f.hessian_structure().unwrap()).unwrap();
        let r = geometry::riemann_from_q(&q);
        assert_eq!(r.at(0, 0, 1, 0, 1), 0.5 * (q.at(0, 0, 1, 0, 1) - q.at(0, 1, 0, 0, 1)));
        assert!((r.at(0, 0, 1, 0, 1) - want).abs() <= 100.0 * h2(n), "{}", r.at(0, 0, 1, 0, 1));
        let mut e = 0.0f64;
        for (node, w) in oracle.nodes(&f.grid()).iter().zip(table) {
            for c in 0..16 {
                e = e.max((r.values()[node * 16 + c] - w[c]).abs());
            }
        }
        worst.push(e);
    }
    let o = order(worst[1], worst[2]);
    assert!((1.9..=2.1).contains(&o), "{worst:?} {o}");
}

/// Oracle-table errors of the listed quantities at `n`.
fn table_errors(id: FixtureId, n: usize) -> Vec<(&'static str, f64)> {
    let f = fixture(id, n);
    let grid = f.grid();
    let d = grid.dim();
    let o = fixtures::oracle(id).unwrap();
    let nodes = o.nodes(&grid);
    let hs = f.hessian_structure().unwrap();
    let g = f.metric().unwrap();
    let (alpha, kappa) = geometry::koszul_forms(&g).unwrap();
    let fields: Vec<(&'static str, usize, Vec<f64>)> = vec![
        ("beta", d * d, geometry::beta_tensor(&g).unwrap().expanded()),
        ("alpha", d, alpha.values().to_vec()),
        ("kappa", d * d, kappa.expanded()),
        ("gamma", d.pow(3), geometry::christoffel_gamma(hs).unwrap().values().to_vec()),
        ("q", d.pow(4), geometry::hessian_curvature(hs).unwrap().values().to_vec()),
    ];
    fields
        .into_iter()
        .map(|(name, c, v)| {
            let want = o.quantity(name).unwrap();
            let mut worst = 0.0f64;
            for (node, w) in nodes.iter().zip(want) {
                for k in 0..c {
                    worst = worst.max((v[node * c + k] - w[k]).abs());
                }
            }
            (name, worst)
        })
        .collect()
}

/// F5's metric has eigenvalues 0.38 and 2.62 at the origin, and the fourth
/// derivatives of its log-determinant keep β and κ pre-asymptotic at N = 32:
/// their 32 → 64 order is 1.71, climbing to 1.92 and 1.98 on finer pairs.
const PRE_ASYMPTOTIC: [(FixtureId, &str); 2] = [(FixtureId::F5, "beta"), (FixtureId::F5, "kappa")];

#[test]
fn geometry_orders_on_hessian_fixtures() {
    for id in [FixtureId::F3, FixtureId::F5] {
        let levels: Vec<_> = [32, 64, 128].iter().map(|&n| table_errors(id, n)).collect();
        for q in 0..levels[0].len() {
            let name = levels[0][q].0;
            let e: Vec<f64> = levels.iter().map(|l| l[q].1).collect();
            let o: Vec<f64> = e.windows(2).map(|w| order(w[0], w[1])).collect();
            if PRE_ASYMPTOTIC.contains(&(id, name)) {
                assert!(o[0] > 1.5 && o[0] < o[1], "{id} {name} {o:?}");
                assert!((1.9..=2.1).contains(&o[1]), "{id} {name} {o:?}");
            } else {
                assert!(o.iter().all(|x| (1.9..=2.1).contains(x)), "{id} {name} {o:?}");
            }
        }
    }
}

#[test]
fn t_tensor_vanishes_at_second_order_on_hessian_fixtures() {
    assert_eq!(geometry::t_tensor(fixture(FixtureId::F3, 64).metric().unwrap().tensor()).max_abs(), 0.0);
    let t: Vec<f64> =
        [32, 64, 128].iter().map(|&n| geometry::t_tensor(fixture(FixtureId::F5, n).metric().unwrap().tensor()).max_abs()).collect();
    let o = order(t[1], t[2]);
    assert!((1.9..=2.1).contains(&o), "{t:?}");
    // The non-Hessian fixture keeps an O(1) T-tensor.
    assert!(geometry::t_tensor(fixture(FixtureId::F4, 64).metric().unwrap().tensor()).max_abs() > 0.1);
}

// flow

#[test]
fn f4_single_tensor_step() {
    let dt = 1e-4;
    let beta22 = 0.09 * PI * PI;
    for n in [32, 64] {
        let g = fixture(FixtureId::F4, n).metric().unwrap();
        let next = flow::step_tensor(&g, dt).unwrap();
        let change = next.tensor().get(0, 1, 1) - g.tensor().get(0, 1, 1);
        assert!(change < 0.0);
        let err = (change + dt * beta22).abs();
        assert!(err <= dt * (15.0 * h2(n) + 50.0 * dt), "N = {n}: {change:e} vs {:e}", -dt * beta22);
        assert_eq!(next.tensor().get(0, 0, 1), next.tensor().get(0, 1, 0));
    }
}

#[test]
fn f3_schemes_agree_and_reconstruct() {
    let g0 = fixture(FixtureId::F3, 64).metric().unwrap();
    let run = flow::run_flow(&g0, &fixed(1e-4, 0.01, Scheme::Both)).unwrap();
    assert!(run.failure().is_none());
    let dev = run.cross_deviation().unwrap().iter().map(|x| x.1).fold(0.0, f64::max);
    assert!(dev <= 1e-6, "{dev}");
    let scalar = run.scalar.as_ref().unwrap();
    let rebuilt = flow::potential_from_trajectory(run.tensor.as_ref().unwrap()).unwrap();
    let last = scalar.last().phi.as_ref().unwrap();
    let recon = last.values().iter().zip(rebuilt.last().unwrap().values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(recon <= 1e-6, "{recon}");
    assert!(flow::decomposition_defect(scalar).unwrap() <= 1e-12);
}

#[test]
fn f3_default_policy_run_to_005() {
    let g0 = fixture(FixtureId::F3, 64).metric().unwrap();
    let cfg = FlowConfig { scheme: Scheme::Both, t_end: 0.05, ..FlowConfig::default() };
    let run = flow::run_flow(&g0, &cfg).unwrap();
    assert!(run.failure().is_none());
    let devs = run.cross_deviation().unwrap();
    assert!(devs.len() > 2);
    assert!(devs.iter().all(|(_, d)| *d <= 1e-5));
    assert!((run.primary().last().t - 0.05).abs() < 1e-15);
}

#[test]
fn f1_trajectory_is_stationary() {
    let g0 = fixture(FixtureId::F1, 16).metric().unwrap();
    let cfg = FlowConfig { scheme: Scheme::Both, t_end: 1.0, stride: 50, ..FlowConfig::default() };
    let run = flow::run_flow(&g0, &cfg).unwrap();
    for traj in [run.scalar.as_ref().unwrap(), run.tensor.as_ref().unwrap()] {
        assert!(traj.snapshots.len() > 2);
        assert!(traj.snapshots.iter().all(|s| s.g == *g0.tensor()));
    }
    for phi in flow::potential_from_trajectory(run.tensor.as_ref().unwrap()).unwrap() {
        assert_eq!(phi.max_abs(), 0.0);
    }
    assert!(diagnostics::t_conservation(run.tensor.as_ref().unwrap()).iter().all(|x| x.1 <= 1e-14));
}

#[test]
fn coarse_long_run_keeps_partial_output() {
    let g0 = fixture(FixtureId::F3, 64).metric().unwrap();
    // Admissible at t = 0 only for the first few steps at most.
    let cfg = FlowConfig { scheme: Scheme::Tensor, dt: DtPolicy::Fixed(1e-3), t_end: 1e3, ..FlowConfig::default() };
    let run = flow::run_flow(&g0, &cfg).unwrap();
    let f = run.failure().unwrap();
    assert!(f.invariant == "StepTooLarge" || f.invariant == "NotPositiveDefinite", "{}", f.invariant);
    assert!(!run.primary().snapshots.is_empty());
    assert_eq!(run.primary().snapshots[0].g, *g0.tensor());
}

fn tensor_end(g0: &hkflow_core::geometry::MetricField, dt: f64, t_end: f64) -> SymTensorField {
    let run = flow::run_flow(g0, &FlowConfig { stride: 1_000_000, ..fixed(dt, t_end, Scheme::Tensor) }).unwrap();
    assert!(run.failure().is_none());
    run.primary().last().g.clone()
}

#[test]
fn time_stepping_is_fourth_order() {
    let g0 = fixture(FixtureId::F3, 16).metric().unwrap();
    let dt = 2e-3;
    let t_end = 0.256;
    let reference = tensor_end(&g0, dt / 4.0, t_end);
    let e1 = tensor_end(&g0, dt, t_end).max_abs_diff(&reference);
    let e2 = tensor_end(&g0, dt / 2.0, t_end).max_abs_diff(&reference);
    let ratio = e1 / e2;
    assert!((12.0..=20.0).contains(&ratio), "{e1:e} {e2:e} {ratio}");
}

// diagnostics

#[test]
fn beta_eigenvalue_examples() {
    let g1 = fixture(FixtureId::F1, 16).metric().unwrap();
    assert_eq!(diagnostics::beta_eigenvalues(&g1, 5).unwrap(), vec![0.0, 0.0]);
    for n in [32, 64] {
        let g3 = fixture(FixtureId::F3, n).metric().unwrap();
        let l = diagnostics::beta_eigenvalues(&g3, 0).unwrap();
        assert!((l[0] - TAU * TAU / 9.0).abs() <= 15.0 * h2(n), "{l:?}");
        let g4 = fixture(FixtureId::F4, n).metric().unwrap();
        let l = diagnostics::beta_eigenvalues(&g4, 0).unwrap();
        assert!((l[0] - 0.045 * PI * PI).abs() <= 8.0 * h2(n), "{l:?}");
        assert!(l[1].abs() < 1e-12);
    }
}

#[test]
fn f3_barrier_checks_to_005() {
    let g0 = fixture(FixtureId::F3, 64).metric().unwrap();
    let run = flow::run_flow(&g0, &fixed(1e-4, 0.05, Scheme::Scalar)).unwrap();
    let traj = run.primary();
    let k = diagnostics::measure_k(g0.tensor()).unwrap().k;
    let s_gate = gate::sb_estimate(&g0, &ScalarField::zeros(*g0.grid()), 0.5).unwrap().s_max;
    let (rows, trace) = diagnostics::barrier_checks(traj, &BarrierParams::new(1, k, 0.05, s_gate, 1e-6)).unwrap();
    assert!(trace.is_some());
    assert_eq!(rows.len(), traj.snapshots.len());
    for r in &rows {
        assert!(r.sup_psi <= 1e-6, "{r:?}");
        assert!(r.passed(), "{r:?}");
    }
    let mags = diagnostics::t_magnitude(traj);
    assert!(mags.iter().all(|m| m.1 <= 3.0 * mags[0].1));
}

fn normalized_f3() -> FlowRun {
    let g0 = fixture(FixtureId::F3, 32).metric().unwrap();
    let cfg = FlowConfig { normalized: true, stride: 1000, ..fixed(1e-4, 1.0, Scheme::Tensor) };
    flow::run_flow(&g0, &cfg).unwrap()
}

#[test]
fn f3_decay_series_regression() {
    let run = normalized_f3();
    assert!(run.failure().is_none());
    let d = diagnostics::decay_rate(run.primary(), &[1.0], 0).unwrap();
    assert_eq!(d.samples.len(), 10);
    assert!(d.samples.iter().all(|s| s.1.is_finite()));
    let limit = d.limit_estimate.unwrap();
    // Reference run: F3, N = 32, dt = 10⁻⁴ to t = 1, probe x = 0. The limit
    // estimate sits at −1 − μ with μ = 0 as the metric flattens.
    assert!((limit - F3_DECAY_LIMIT).abs() <= 1e-9 * F3_DECAY_LIMIT.abs(), "{limit:.12e}");
    assert!(matches!(diagnostics::decay_rate(run.primary(), &[0.0], 0), Err(Error::ZeroVector)));
}

const F3_DECAY_LIMIT: f64 = -1.000000000002e0;

// tangent lift

#[test]
fn lift_examples() {
    let f1 = fixture(FixtureId::F1, 16);
    let l1 = lift::lift_metric(f1.metric().unwrap().tensor()).unwrap();
    assert_eq!(lift::kahler_ricci(&l1).unwrap().max_abs(), 0.0);
    let kc = lift::kahler_curvature(&l1, f1.hessian_structure().unwrap()).unwrap();
    assert_eq!((kc.r.max_abs(), kc.defect), (0.0, 0.0));

    let f3 = fixture(FixtureId::F3, 64);
    let g3 = f3.metric().unwrap();
    let ricci = lift::kahler_ricci(&lift::lift_metric(g3.tensor()).unwrap()).unwrap();
    // ¼β₁₁(0) = (2π)²/12
    assert!((ricci.get(0, 0, 0) - TAU * TAU / 12.0).abs() <= 8.0 * h2(64), "{}", ricci.get(0, 0, 0));
}

/// Curvature-defect constant `C` in `defect ≤ C·h²`, fixed from the
/// N = 32, 64, 128 study (observed coefficient times 1.5, rounded up).
const DEFECT_C: [(FixtureId, f64); 2] = [(FixtureId::F3, 146.0), (FixtureId::F5, 299.0)];

#[test]
fn curvature_defect_study() {
    for (id, c) in DEFECT_C {
        let d: Vec<f64> = [32, 64, 128]
            .iter()
            .map(|&n| {
                let f = fixture(id, n);
                let l = lift::lift_metric(f.metric().unwrap().tensor()).unwrap();
                lift::kahler_curvature(&l, f.hessian_structure().unwrap()).unwrap().defect
            })
            .collect();
        assert!(d[1] <= c * h2(64), "{id} {d:?}");
        for w in d.windows(2) {
            assert!((1.9..=2.1).contains(&order(w[0], w[1])), "{id} {d:?}");
        }
    }
}

#[test]
fn scan_of_flat_fixtures_is_zero() {
    let f1 = fixture(FixtureId::F1, 16);
    let g1 = f1.metric().unwrap();
    let q1 = geometry::hessian_curvature(f1.hessian_structure().unwrap()).unwrap();
    assert_eq!(lift::bisectional_sign_scan(&q1, g1.tensor(), None, 8, 3).unwrap().min, 0.0);
    let f2 = fixture(FixtureId::F2, 32);
    let pj = f2.potential_jet().unwrap().unwrap();
    let q2 = jet::hessian_curvature_from_jet(&pj).unwrap();
    let s = lift::bisectional_sign_scan(&q2, &pj.hess, None, 8, 3).unwrap();
    assert!(s.min.abs() <= 1e-10, "{s:?}");
}

// gate

#[test]
fn cutoff_examples() {
    let p = gate::build_cutoff(0.1).unwrap();
    for k in 0..=91 {
        assert_eq!(p.frak(k as f64 * 0.01), 0.0);
    }
    assert!((p.f(0.95) - (4.0f64 / 3.0).ln()).abs() < 1e-15);
    assert!(matches!(gate::build_cutoff(0.2), Err(Error::BadParameter(_))));
    let r = gate::cutoff_property_check(&p, 1).unwrap();
    assert!(r.min_frak_prime >= -1e-12);
    assert!(r.max_frak_before_ramp <= 1e-12);
    // Reference run value of sup e^{−𝔉}𝔉′ for κ = 0.1.
    assert!((r.weighted_sup[0] - WEIGHTED_SUP_K1).abs() <= 1e-9 * WEIGHTED_SUP_K1, "{:.12e}", r.weighted_sup[0]);
}

const WEIGHTED_SUP_K1: f64 = 2.044578847370e1;

#[test]
fn gate_bracket_and_theta_order() {
    let g0 = fixture(FixtureId::F3, 64).metric().unwrap();
    let u = ScalarField::zeros(*g0.grid());
    let beta = geometry::beta_tensor(&g0).unwrap();
    let mut last = f64::INFINITY;
    for theta in [0.05, 0.2, 0.5, 0.8] {
        let r = gate::sb_estimate(&g0, &u, theta).unwrap();
        let s = r.s_max.unwrap();
        assert!(s <= last);
        last = s;
        let theta_g = g0.tensor().scaled(theta);
        let gap = |s: f64| geometry::min_eigen_gap(&g0.tensor().axpy(-s, &beta), &theta_g).unwrap();
        assert!(gap(s - 1e-4) >= 0.0);
        assert!(gap(s + 1e-4) < 0.0);
        assert!(r.margin.values().iter().all(|m| *m >= 0.0));
    }
}

#[test]
fn exhaust_rejects_bad_cutoff() {
    let g0 = fixture(FixtureId::F1, 16).metric().unwrap();
    let rho = ScalarField::zeros(*g0.grid());
    assert!(matches!(gate::conformal_exhaust(&g0, &rho, 1.0, 0.2), Err(Error::BadParameter(_))));
    assert!(matches!(gate::conformal_exhaust(&g0, &rho, 1.0, 0.0), Err(Error::BadParameter(_))));
}

// harness

#[test]
fn refine_study_on_f3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new("F3", 1);
    cfg.grid.nodes = Some(32);
    cfg.flow.dt = DtPolicy::Fixed(1e-4);
    cfg.flow.t_end = 0.01;
    cfg.output.dir = tmp.path().to_path_buf();
    let table = harness::refine_study(&cfg, 3).unwrap();
    assert_eq!(table.nodes, vec![32, 64, 128]);
    for q in ["beta", "kappa", "q", "curvature_defect"] {
        let row = table.row(q).unwrap();
        for o in &row.orders {
            assert!((1.9..=2.1).contains(&o.unwrap()), "{q} {row:?}");
        }
    }
    assert!(tmp.path().join("refine.csv").is_file());
}

#[test]
fn refine_study_on_flat_fixture_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new("F1", 1);
    cfg.grid.nodes = Some(16);
    cfg.flow.t_end = 0.01;
    cfg.output.dir = tmp.path().to_path_buf();
    let table = harness::refine_study(&cfg, 2).unwrap();
    assert!(table.rows.iter().all(|r| r.exact && r.verdict() == "exact"), "{table:?}");
}

fn plot_rows(dir: &std::path::Path, quantity: &str, probe: &str) -> Vec<(f64, f64)> {
    let text = std::fs::read_to_string(harness::export_plots(dir).unwrap()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,quantity,value,probe"));
    lines
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|c| c[1] == quantity && c[3] == probe)
        .map(|c| (c[0].parse().unwrap(), c[2].parse().unwrap()))
        .collect()
}

#[test]
fn exported_series() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new("F1", 2);
    cfg.flow.t_end = 0.05;
    cfg.output.dir = tmp.path().join("f1");
    harness::run(&cfg).unwrap();
    let sup_theta = plot_rows(&cfg.output.dir, "sup_theta", "");
    assert!(sup_theta.len() > 2);
    assert!(sup_theta.iter().all(|r| r.1 == sup_theta[0].1));

    let mut cfg = RunConfig::new("F3", 2);
    cfg.flow.t_end = 0.1;
    cfg.flow.stride = 20;
    cfg.output.dir = tmp.path().join("f3");
    harness::run(&cfg).unwrap();
    let l1 = plot_rows(&cfg.output.dir, "lambda1", "0");
    assert!(l1.len() > 2);
    // At the origin λ₁ = β/g first grows while g drops faster than β, then
    // decays as the metric flattens: one interior peak, monotone on each side.
    let peak = (0..l1.len()).max_by(|&a, &b| l1[a].1.total_cmp(&l1[b].1)).unwrap();
    assert!(peak > 0 && peak + 1 < l1.len(), "{l1:?}");
    assert!(l1[..=peak].windows(2).all(|w| w[1].1 > w[0].1));
    assert!(l1[peak..].windows(2).all(|w| w[1].1 < w[0].1));
    assert!((l1[0].1 - TAU * TAU / 9.0).abs() <= 15.0 * h2(64));
    assert!((l1[peak].1 - LAMBDA1_PEAK).abs() <= 1e-9 * LAMBDA1_PEAK, "{:.12e}", l1[peak].1);
    assert!((l1.last().unwrap().1 - LAMBDA1_END).abs() <= 1e-9 * LAMBDA1_END, "{:.12e}", l1.last().unwrap().1);
}

/// Reference run: F3, N = 64, default step policy, t_end = 0.1, stride 20.
const LAMBDA1_PEAK: f64 = 4.908713678629e0;
const LAMBDA1_END: f64 = 1.347681715889e0;

#[test]
fn constant_metric_matrix_helpers() {
    let grid = hkflow_core::GridSpec::unit(2, 16).unwrap();
    let g = SymTensorField::constant(grid, &Mat::identity(2).scale(2.0));
    let h = SymTensorField::constant(grid, &Mat::identity(2));
    assert_eq!(geometry::min_eigen_gap(&g, &h).unwrap(), 1.0);
}

