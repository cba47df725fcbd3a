//! Run configuration, orchestration and artifact emission.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `config.json` | the effective configuration |
//! | `fields/<scheme>/{g,log_det,phi}_NNNNN.hkf` | snapshot fields |
//! | `diagnostics.csv`, `diagnostics.json` | per-snapshot monitors, lift checks |
//! | `gate.json`, `cutoff.csv` | barrier threshold and cutoff table, when enabled |
//! | `trajectory.json` | manifest: times, failure, hashes of every other file |

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diagnostics::{self, DiagnosticsReport, DiagnosticsSettings, ResidualStream};
use crate::error::{Error, Result};
use crate::fixtures::{self, Fixture, FixtureData, FixtureId};
use crate::flow::{self, DtPolicy, FailureRecord, FlowConfig, FlowRefs, FlowRun, Scheme, Trajectory};
use crate::gate::{self, GateResult};
use crate::geometry::{self, HessianStructure, MetricField, PotentialJet};
use crate::grid::{GridSpec, ScalarField};
use crate::io::{self, FieldData};
use crate::lift;
use crate::stencil;

pub const SCHEMA_VERSION: u32 = 1;
/// Errors at or below this level at every refinement level count as exact.
pub const ROUNDING_FLOOR: f64 = 1e-11;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Nodes per axis; the fixture default when absent.
    pub nodes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub enabled: bool,
    /// Fail the run (exit 1) when a monitored inequality is violated.
    pub assert: bool,
    /// `S₁` of the barrier `Λ`; `t_end` when absent.
    pub s1: Option<f64>,
    pub tol_mp: f64,
    pub tol_cross: f64,
    pub probes: Option<Vec<usize>>,
    pub extra_probes: usize,
    pub frames: usize,
    pub tangent_lift: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            assert: true,
            s1: None,
            tol_mp: 1e-6,
            tol_cross: 1e-5,
            probes: None,
            extra_probes: 3,
            frames: lift::DEFAULT_FRAMES,
            tangent_lift: true,
        }
    }
}

/// The function `u` of the barrier condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum UDescriptor {
    Zero,
    /// `u = amplitude · cos(2πx^axis) / (2π)²`.
    Cosine { amplitude: f64, axis: usize },
    /// Rank-0 field file on the run grid.
    File { path: PathBuf },
}

impl UDescriptor {
    pub fn field(&self, grid: GridSpec) -> Result<ScalarField> {
        match self {
            Self::Zero => Ok(ScalarField::zeros(grid)),
            Self::Cosine { amplitude, axis } => {
                if *axis >= grid.dim() {
                    return Err(Error::Config(format!("u axis {axis} outside the grid dimension")));
                }
                let (a, k) = (*amplitude, *axis);
                let tau = 2.0 * PI;
                Ok(ScalarField::from_fn(grid, move |x| a * (tau * x[k]).cos() / (tau * tau)))
            }
            Self::File { path } => {
                let f = io::read_field(path).map_err(|e| Error::Config(format!("u file {}: {e}", path.display())))?;
                f.grid.same_as(&grid).map_err(|e| Error::Config(e.to_string()))?;
                f.into_scalar()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Write `gate.json` and `cutoff.csv`.
    pub enabled: bool,
    pub theta: f64,
    pub kappa_cut: f64,
    pub u: UDescriptor,
    pub cutoff_points: usize,
    pub k_max: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { enabled: false, theta: 0.5, kappa_cut: 0.1, u: UDescriptor::Zero, cutoff_points: 1000, k_max: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write binary snapshot fields.
    pub fields: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("hkflow-out"), fields: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// `F1`…`F5` or the path of a rank-2 field file holding `g₀`.
    pub fixture: String,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn new(fixture: impl Into<String>, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            fixture: fixture.into(),
            grid: GridConfig::default(),
            flow: FlowConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            gate: GateConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        self.flow.validate()?;
        let d = &self.diagnostics;
        if !(d.tol_mp > 0.0 && d.tol_cross > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if d.s1.is_some_and(|s| !(s > 0.0)) {
            return bad("s1 must be positive".into());
        }
        if d.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        let g = &self.gate;
        if !(g.theta > 0.0 && g.theta < 1.0) {
            return bad(format!("theta {} outside (0, 1)", g.theta));
        }
        if !(g.kappa_cut > 0.0 && g.kappa_cut < 0.125) {
            return bad(format!("kappa_cut {} outside (0, 1/8)", g.kappa_cut));
        }
        if !(1..=3).contains(&g.k_max) || g.cutoff_points < 2 {
            return bad("k_max must be in 1..=3 and cutoff_points at least 2".into());
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// The initial data a run starts from.
#[derive(Debug, Clone)]
pub struct Problem {
    pub label: String,
    pub id: Option<FixtureId>,
    pub metric: MetricField,
    pub hessian: Option<HessianStructure>,
    pub jet: Option<PotentialJet>,
    pub flowable: bool,
}

impl Problem {
    pub fn grid(&self) -> GridSpec {
        *self.metric.grid()
    }
}

pub fn resolve_problem(fixture: &str, nodes: Option<usize>) -> Result<Problem> {
    if let Ok(id) = fixture.parse::<FixtureId>() {
        let f = Fixture::build(id, nodes.unwrap_or(id.default_nodes())).map_err(|e| Error::Config(e.to_string()))?;
        let metric = f.metric()?;
        let jet = match &f.data {
            FixtureData::Analytic(j) => Some(j.clone()),
            _ => None,
        };
        return Ok(Problem {
            label: id.to_string(),
            id: Some(id),
            hessian: f.hessian_structure().cloned(),
            flowable: f.flowable(),
            metric,
            jet,
        });
    }
    let path = Path::new(fixture);
    if !path.is_file() {
        return Err(Error::Config(format!("unknown fixture {fixture:?} (not F1..F5 and not a field file)")));
    }
    let g = io::read_field(path)
        .and_then(FieldData::into_sym)
        .map_err(|e| Error::Config(format!("{fixture}: {e}")))?;
    if let Some(n) = nodes {
        if n != g.grid().nodes_per_axis() {
            return Err(Error::Config(format!("grid.nodes {n} does not match the file ({})", g.grid().nodes_per_axis())));
        }
    }
    Ok(Problem {
        label: fixture.to_string(),
        id: None,
        metric: MetricField::new(g)?,
        hessian: None,
        jet: None,
        flowable: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub times: Vec<f64>,
    pub failure: Option<FailureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub fixture: String,
    pub seed: u64,
    pub config_hash: String,
    pub grid: GridSpec,
    pub scheme: Scheme,
    pub normalized: bool,
    pub trajectories: BTreeMap<String, TrajectoryEntry>,
    pub cross_deviation: Option<f64>,
    pub assertions: Vec<Assertion>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftCheck {
    pub t: f64,
    /// `max |R^T_{ij̄} − ¼β| / max |¼β|` (absolute when `β ≡ 0`).
    pub ricci_path_deviation: f64,
    pub curvature_defect: f64,
    pub scan: lift::ScanResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentLiftSection {
    pub hessian: bool,
    /// `max |T(g₀)|`, the computable Kähler obstruction of the lift.
    pub max_t: f64,
    pub checks: Vec<LiftCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsDoc {
    #[serde(flatten)]
    pub report: DiagnosticsReport,
    pub cross_deviation: Option<Vec<(f64, f64)>>,
    pub decomposition_defect: Option<f64>,
    pub t_magnitude: Vec<(f64, f64)>,
    pub tangent_lift: Option<TangentLiftSection>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub flow: FlowRun,
    pub diagnostics: Option<DiagnosticsDoc>,
    pub gate: Option<GateResult>,
}

impl RunOutcome {
    /// Name of the first failed invariant: a flow failure, then assertions.
    pub fn failing_invariant(&self) -> Option<String> {
        if let Some(f) = self.flow.failure() {
            return Some(f.invariant.clone());
        }
        self.manifest.assertions.iter().find(|a| !a.passed).map(|a| a.name.clone())
    }

    pub fn exit_code(&self) -> u8 {
        if self.failing_invariant().is_some() {
            1
        } else {
            0
        }
    }
}

/// Exit status for an error escaping a subcommand: 2 for bad input, 1 otherwise.
pub fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Json(_)
        | Error::BadParameter(_)
        | Error::Format(_)
        | Error::MissingRun(_)
        | Error::Io(_)
        | Error::GridMismatch(_) => 2,
        _ => 1,
    }
}

struct Writer {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl Writer {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, bytes)?;
        self.files.push(FileEntry { path: rel.to_string(), sha256: io::sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.put(rel, s.as_bytes())
    }
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Tensor => "tensor",
        Scheme::Scalar => "scalar",
        Scheme::Both => "both",
    }
}

fn write_trajectory(w: &mut Writer, traj: &Trajectory) -> Result<()> {
    let dir = format!("fields/{}", scheme_name(traj.scheme));
    for (k, s) in traj.snapshots.iter().enumerate() {
        w.put(&format!("{dir}/g_{k:05}.hkf"), &FieldData::from_sym(&s.g).to_bytes())?;
        w.put(&format!("{dir}/log_det_{k:05}.hkf"), &FieldData::from_scalar(&s.log_det).to_bytes())?;
        if let Some(p) = &s.phi {
            w.put(&format!("{dir}/phi_{k:05}.hkf"), &FieldData::from_scalar(p).to_bytes())?;
        }
    }
    Ok(())
}

/// Flow potential of the last snapshot, from the stored field or the
/// trapezoid reconstruction.
fn final_potential(traj: &Trajectory) -> Result<ScalarField> {
    match &traj.last().phi {
        Some(p) => Ok(p.clone()),
        None => Ok(flow::potential_from_trajectory(traj)?.pop().expect("non-empty")),
    }
}

/// `g(t) = G₀ + D²(φ₀ + t·log det g₀ + φ(t))`, the Hessian structure of the
/// evolved metric on the same base form.
fn evolved_structure(hs: &HessianStructure, traj: &Trajectory) -> Result<HessianStructure> {
    let t = traj.last().t;
    let phi_t = final_potential(traj)?;
    let ld0 = traj.refs.log_det0.values();
    let v: Vec<f64> = (0..hs.grid().len())
        .map(|i| hs.potential().values()[i] + t * ld0[i] + phi_t.values()[i])
        .collect();
    HessianStructure::new(*hs.base_form(), ScalarField::from_values(*hs.grid(), v)?)
}

fn lift_check(hs: &HessianStructure, t: f64, frames: usize, seed: u64) -> Result<LiftCheck> {
    let g = geometry::metric_from_potential(hs)?;
    let l = lift::lift_metric(g.tensor())?;
    let ricci = lift::kahler_ricci(&l)?;
    let quarter = geometry::beta_tensor(&g)?.scaled(0.25);
    let scale = quarter.max_abs();
    let dev = ricci.max_abs_diff(&quarter);
    let kc = lift::kahler_curvature(&l, hs)?;
    let q = geometry::hessian_curvature(hs)?;
    let scan = lift::bisectional_sign_scan(&q, g.tensor(), None, frames, seed)?;
    Ok(LiftCheck {
        t,
        ricci_path_deviation: if scale > 0.0 { dev / scale } else { dev },
        curvature_defect: kc.defect,
        scan,
    })
}

fn tangent_lift_section(problem: &Problem, traj: &Trajectory, frames: usize, seed: u64) -> Result<TangentLiftSection> {
    let max_t = geometry::t_tensor(problem.metric.tensor()).max_abs();
    let Some(hs) = &problem.hessian else {
        return Ok(TangentLiftSection { hessian: false, max_t, checks: Vec::new() });
    };
    let mut checks = vec![lift_check(hs, 0.0, frames, seed)?];
    if !traj.normalized && traj.last().t > 0.0 {
        checks.push(lift_check(&evolved_structure(hs, traj)?, traj.last().t, frames, seed)?);
    }
    Ok(TangentLiftSection { hessian: true, max_t, checks })
}

fn gate_json(r: &GateResult, cfg: &GateConfig, cutoff: &gate::CutoffReport, breakdown: Option<f64>) -> Value {
    json!({
        "s_max": r.s_max.map_or(json!("unbounded"), |s| json!(s)),
        "s_above": r.s_above,
        "theta": r.theta,
        "u": cfg.u,
        "margin_stats": r.margin_stats,
        "bisection_tolerance": gate::BISECTION_TOL,
        "cap": gate::S_CAP,
        "trace": r.trace,
        "observed_breakdown_time": breakdown,
        "cutoff": cutoff,
    })
}

fn assertions(problem: &Problem, cfg: &RunConfig, run: &FlowRun, doc: &DiagnosticsDoc) -> Vec<Assertion> {
    let d = &cfg.diagnostics;
    let mut out = Vec::new();
    if let Some(dev) = &doc.cross_deviation {
        let v = dev.iter().map(|x| x.1).fold(0.0, f64::max);
        out.push(Assertion { name: "SchemeEquivalence".into(), passed: v <= d.tol_cross, value: v, bound: d.tol_cross });
    }
    let recs = &doc.report.records;
    if problem.hessian.is_some() && !run.primary().normalized {
        let v = recs.iter().filter_map(|r| r.sup_psi).fold(f64::NEG_INFINITY, f64::max);
        out.push(Assertion { name: "MaximumPrinciple".into(), passed: v <= d.tol_mp, value: v, bound: d.tol_mp });
        let t0 = recs.first().map_or(0.0, |r| r.max_t);
        let v = recs.iter().map(|r| r.max_t).fold(0.0, f64::max);
        // Rounding-level slack for fixtures whose initial T vanishes identically.
        let bound = 3.0 * t0 + 1e-12;
        out.push(Assertion { name: "HessianPreservation".into(), passed: v <= bound, value: v, bound });
    }
    let barrier: Vec<_> = recs.iter().filter_map(|r| r.barrier.as_ref()).collect();
    if !barrier.is_empty() {
        let worst = barrier
            .iter()
            .map(|b| b.phi_margin.min(b.trace_margin.unwrap_or(f64::INFINITY)))
            .fold(f64::INFINITY, f64::min);
        out.push(Assertion { name: "BarrierBound".into(), passed: worst >= 0.0, value: worst, bound: 0.0 });
    }
    let finite = recs.iter().all(|r| {
        [r.t, r.t_deviation, r.max_t, r.sup_upsilon, r.sup_theta, r.min_eig_g, r.min_eig_beta]
            .iter()
            .chain(r.sup_psi.iter())
            .chain(r.sup_lambda.iter())
            .all(|v| v.is_finite())
    });
    out.push(Assertion { name: "FiniteReport".into(), passed: finite, value: if finite { 0.0 } else { 1.0 }, bound: 0.0 });
    out
}

/// Execute a configured run and write its artifacts. Flow failures and
/// violated assertions are reported in the outcome; errors are reserved for
/// invalid input and I/O.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let problem = resolve_problem(&cfg.fixture, cfg.grid.nodes)?;
    if !problem.flowable {
        return Err(Error::Config(format!("{} is an analytic chart and cannot be integrated in time", problem.label)));
    }
    let grid = problem.grid();
    let u = cfg.gate.u.field(grid)?;
    let mut w = Writer::new(&cfg.output.dir)?;
    w.put_json("config.json", cfg)?;

    let run = flow::run_flow(&problem.metric, &cfg.flow)?;
    if cfg.output.fields {
        for traj in [&run.scalar, &run.tensor].into_iter().flatten() {
            write_trajectory(&mut w, traj)?;
        }
    }
    let gate_result = gate::sb_estimate(&problem.metric, &u, cfg.gate.theta)?;
    if cfg.gate.enabled {
        let profile = gate::build_cutoff(cfg.gate.kappa_cut)?;
        let report = gate::cutoff_property_check(&profile, cfg.gate.k_max)?;
        let breakdown = run.failure().map(|f| f.t);
        w.put_json("gate.json", &gate_json(&gate_result, &cfg.gate, &report, breakdown))?;
        w.put("cutoff.csv", profile.table_csv(cfg.gate.cutoff_points).as_bytes())?;
    }

    let primary = run.primary();
    let cross = run.cross_deviation();
    let mut diag_doc = None;
    let mut checks = Vec::new();
    if cfg.diagnostics.enabled {
        let d = &cfg.diagnostics;
        let settings = DiagnosticsSettings {
            s1: d.s1.unwrap_or(cfg.flow.t_end),
            tol_mp: d.tol_mp,
            probes: match &d.probes {
                Some(p) => {
                    if let Some(bad) = p.iter().find(|&&i| i >= grid.len()) {
                        return Err(Error::Config(format!("probe {bad} outside the grid")));
                    }
                    p.clone()
                }
                None => diagnostics::default_probes(&grid, cfg.seed, d.extra_probes),
            },
            k: diagnostics::measure_k(problem.metric.tensor())?,
            s_gate: gate_result.s_max,
        };
        let report = DiagnosticsReport::compute(primary, &settings)?;
        let decomposition_defect = if primary.normalized { None } else { Some(flow::decomposition_defect(primary)?) };
        let tangent_lift = if d.tangent_lift { Some(tangent_lift_section(&problem, primary, d.frames, cfg.seed)?) } else { None };
        let doc = DiagnosticsDoc {
            report,
            cross_deviation: cross.clone(),
            decomposition_defect,
            t_magnitude: diagnostics::t_magnitude(primary),
            tangent_lift,
        };
        w.put("diagnostics.csv", doc.report.to_csv().as_bytes())?;
        w.put_json("diagnostics.json", &doc)?;
        if d.assert {
            checks = assertions(&problem, cfg, &run, &doc);
        }
        diag_doc = Some(doc);
    }

    let mut trajectories = BTreeMap::new();
    for traj in [&run.scalar, &run.tensor].into_iter().flatten() {
        trajectories.insert(
            scheme_name(traj.scheme).to_string(),
            TrajectoryEntry { times: traj.times(), failure: traj.failure.clone() },
        );
    }
    let mut files = w.files.clone();
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        fixture: problem.label.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        grid,
        scheme: cfg.flow.scheme,
        normalized: cfg.flow.normalized,
        trajectories,
        cross_deviation: cross.map(|c| c.iter().map(|x| x.1).fold(0.0, f64::max)),
        assertions: checks,
        files,
    };
    let mut s = serde_json::to_string_pretty(&manifest)?;
    s.push('\n');
    fs::write(cfg.output.dir.join("trajectory.json"), s)?;
    Ok(RunOutcome {
        dir: cfg.output.dir.clone(),
        manifest,
        flow: run,
        diagnostics: diag_doc,
        gate: cfg.gate.enabled.then_some(gate_result),
    })
}

#[derive(Debug, Clone)]
pub struct GateOutcome {
    pub result: GateResult,
    pub cutoff: gate::CutoffReport,
}

/// Barrier threshold and cutoff checks alone, written as `gate.json` and
/// `cutoff.csv`.
pub fn run_gate(cfg: &RunConfig) -> Result<GateOutcome> {
    cfg.validate()?;
    let problem = resolve_problem(&cfg.fixture, cfg.grid.nodes)?;
    let u = cfg.gate.u.field(problem.grid())?;
    let result = gate::sb_estimate(&problem.metric, &u, cfg.gate.theta)?;
    let profile = gate::build_cutoff(cfg.gate.kappa_cut)?;
    let cutoff = gate::cutoff_property_check(&profile, cfg.gate.k_max)?;
    let mut w = Writer::new(&cfg.output.dir)?;
    w.put_json("gate.json", &gate_json(&result, &cfg.gate, &cutoff, None))?;
    w.put("cutoff.csv", profile.table_csv(cfg.gate.cutoff_points).as_bytes())?;
    Ok(GateOutcome { result, cutoff })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRow {
    pub quantity: String,
    pub errors: Vec<f64>,
    /// `log₂(e_k / e_{k+1})` between consecutive levels.
    pub orders: Vec<Option<f64>>,
    pub exact: bool,
}

impl RefineRow {
    fn new(quantity: &str, errors: Vec<f64>) -> Self {
        let exact = errors.iter().all(|e| *e <= ROUNDING_FLOOR);
        let orders = errors
            .windows(2)
            .map(|w| (!exact && w[0] > 0.0 && w[1] > 0.0).then(|| (w[0] / w[1]).log2()))
            .collect();
        Self { quantity: quantity.to_string(), errors, orders, exact }
    }

    /// Order between the two finest levels.
    pub fn final_order(&self) -> Option<f64> {
        self.orders.last().copied().flatten()
    }

    pub fn verdict(&self) -> String {
        if self.exact {
            "exact".into()
        } else {
            self.final_order().map_or("n/a".into(), |o| format!("{o:.3}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTable {
    pub fixture: String,
    pub nodes: Vec<usize>,
    pub dt: Vec<Option<f64>>,
    pub rows: Vec<RefineRow>,
}

impl RefineTable {
    pub fn row(&self, quantity: &str) -> Option<&RefineRow> {
        self.rows.iter().find(|r| r.quantity == quantity)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity");
        for n in &self.nodes {
            out.push_str(&format!(",err_n{n}"));
        }
        for w in self.nodes.windows(2) {
            out.push_str(&format!(",order_{}_{}", w[0], w[1]));
        }
        out.push_str(",verdict\n");
        for r in &self.rows {
            out.push_str(&r.quantity);
            for e in &r.errors {
                out.push_str(&format!(",{e}"));
            }
            for o in &r.orders {
                out.push_str(&format!(",{}", o.map_or(String::new(), |v| v.to_string())));
            }
            out.push_str(&format!(",{}\n", r.verdict()));
        }
        out
    }
}

fn max_err_at(nodes: &[usize], comps: usize, computed: &[f64], oracle: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (node, want) in nodes.iter().zip(oracle) {
        for c in 0..comps {
            worst = worst.max((computed[node * comps + c] - want[c]).abs());
        }
    }
    worst
}

/// Static geometry errors at one resolution: oracle table entries where one
/// exists, closed forms for the flat and analytic fixtures.
fn static_errors(id: FixtureId, nodes: usize) -> Result<Vec<(&'static str, f64)>> {
    let f = Fixture::build(id, nodes)?;
    let grid = f.grid();
    let n = grid.dim();
    let g = f.metric()?;
    let mut out = Vec::new();
    match &f.data {
        FixtureData::Analytic(jet) => {
            let mj = jet.metric_jet();
            let beta = geometry::jet::beta_from_jet(&mj)?;
            let (alpha, kappa) = geometry::jet::koszul_from_jet(&mj)?;
            let gamma = geometry::jet::christoffel_from_jet(jet)?;
            let q = geometry::jet::hessian_curvature_from_jet(jet)?;
            let half = |v: &[f64]| stencil::max_abs(&v.iter().map(|x| x - 0.5).collect::<Vec<_>>());
            out.push(("beta", beta.max_abs()));
            out.push(("kappa", kappa.max_abs()));
            out.push(("alpha", half(alpha.values())));
            out.push(("gamma", half(gamma.values())));
            out.push(("q", q.max_abs()));
        }
        FixtureData::Metric(_) => {
            let o = fixtures::oracle(id).ok_or_else(|| Error::Config(format!("no oracle table for {id}")))?;
            let nodes = o.nodes(&grid);
            let beta = geometry::beta_tensor(&g)?;
            out.push(("log_det", max_err_at(&nodes, 1, geometry::log_det_field(&g)?.values(), o.quantity("log_det")?)));
            out.push(("beta", max_err_at(&nodes, n * n, &beta.expanded(), o.quantity("beta")?)));
            out.push(("t", max_err_at(&nodes, n.pow(3), geometry::t_tensor(g.tensor()).values(), o.quantity("t")?)));
        }
        FixtureData::Hessian(hs) => {
            let beta = geometry::beta_tensor(&g)?;
            let (alpha, kappa) = geometry::koszul_forms(&g)?;
            let gamma = geometry::christoffel_gamma(hs)?;
            let q = geometry::hessian_curvature(hs)?;
            let riemann = geometry::riemann_from_q(&q);
            let l = lift::lift_metric(g.tensor())?;
            let ricci = lift::kahler_ricci(&l)?;
            let kc = lift::kahler_curvature(&l, hs)?;
            match fixtures::oracle(id) {
                Some(o) => {
                    let nodes = o.nodes(&grid);
                    let e = |c: usize, v: &[f64], name: &str| -> Result<f64> { Ok(max_err_at(&nodes, c, v, o.quantity(name)?)) };
                    out.push(("g", e(n * n, &g.tensor().expanded(), "g")?));
                    out.push(("log_det", e(1, geometry::log_det_field(&g)?.values(), "log_det")?));
                    out.push(("beta", e(n * n, &beta.expanded(), "beta")?));
                    out.push(("alpha", e(n, alpha.values(), "alpha")?));
                    out.push(("kappa", e(n * n, &kappa.expanded(), "kappa")?));
                    out.push(("gamma", e(n.pow(3), gamma.values(), "gamma")?));
                    out.push(("q", e(n.pow(4), q.values(), "q")?));
                    out.push(("riemann", e(n.pow(4), riemann.values(), "riemann")?));
                    out.push(("ricci_lift", e(n * n, &ricci.expanded(), "ricci_lift")?));
                    out.push(("lift_curvature", e(n.pow(4), kc.r.values(), "lift_curvature")?));
                }
                None => {
                    // Constant metric: every derived quantity vanishes.
                    out.push(("beta", beta.max_abs()));
                    out.push(("alpha", alpha.max_abs()));
                    out.push(("kappa", kappa.max_abs()));
                    out.push(("gamma", gamma.max_abs()));
                    out.push(("q", q.max_abs()));
                    out.push(("lift_curvature", kc.r.max_abs()));
                }
            }
            out.push(("curvature_defect", kc.defect));
        }
    }
    Ok(out)
}

/// Largest residuals r_psi and r_lambda of a streamed scalar-scheme run.
fn residual_errors(g0: &MetricField, cfg: &FlowConfig, s1: f64) -> Result<(f64, f64)> {
    let mut stream = ResidualStream::new(Arc::new(FlowRefs::new(g0.clone())?), s1);
    let mut worst = (0.0f64, 0.0f64);
    let (_, failure) = flow::run_streaming(g0, cfg, Scheme::Scalar, &mut |s| {
        if let Some(r) = stream.push(&s)? {
            worst = (worst.0.max(r.r_psi), worst.1.max(r.r_lambda));
        }
        Ok(())
    })?;
    if let Some(f) = failure {
        return Err(Error::Config(format!("refinement run failed at t = {}: {}", f.t, f.message)));
    }
    Ok(worst)
}

/// Static geometry and flow-identity errors at `N, 2N, …` with the time step
/// scaled by `h²` (fixed policies divide by 4 per level; CFL policies scale
/// on their own).
pub fn refine_study(cfg: &RunConfig, levels: usize) -> Result<RefineTable> {
    if levels < 2 {
        return Err(Error::Config(format!("refinement needs at least 2 levels, got {levels}")));
    }
    cfg.validate()?;
    let id: FixtureId = cfg.fixture.parse()?;
    let base = cfg.grid.nodes.unwrap_or(id.default_nodes());
    let nodes: Vec<usize> = (0..levels).map(|k| base << k).collect();
    let mut dts = Vec::new();
    let mut per_level: Vec<Vec<(&'static str, f64)>> = Vec::new();
    for (k, &nk) in nodes.iter().enumerate() {
        let mut errs = static_errors(id, nk)?;
        let f = Fixture::build(id, nk)?;
        if f.flowable() && !cfg.flow.normalized {
            let mut fc = cfg.flow.clone();
            fc.scheme = Scheme::Scalar;
            fc.stride = 1;
            if let DtPolicy::Fixed(dt) = fc.dt {
                fc.dt = DtPolicy::Fixed(dt / 4f64.powi(k as i32));
            }
            dts.push(match fc.dt {
                DtPolicy::Fixed(dt) => Some(dt),
                DtPolicy::Cfl(_) => None,
            });
            let s1 = cfg.diagnostics.s1.unwrap_or(cfg.flow.t_end);
            let (rp, rl) = residual_errors(&f.metric()?, &fc, s1)?;
            errs.push(("r_psi", rp));
            errs.push(("r_lambda", rl));
        } else {
            dts.push(None);
        }
        per_level.push(errs);
    }
    let rows = per_level[0]
        .iter()
        .enumerate()
        .map(|(i, (name, _))| RefineRow::new(name, per_level.iter().map(|l| l[i].1).collect()))
        .collect();
    let table = RefineTable { fixture: id.to_string(), nodes, dt: dts, rows };
    let mut w = Writer::new(&cfg.output.dir)?;
    w.put("refine.csv", table.to_csv().as_bytes())?;
    w.put_json("refine.json", &table)?;
    Ok(table)
}

/// Long-format series `t,quantity,value,probe` from a completed run,
/// written to `plots.csv` in the run directory.
pub fn export_plots(dir: &Path) -> Result<PathBuf> {
    let diag = dir.join("diagnostics.json");
    if !dir.join("trajectory.json").is_file() || !diag.is_file() {
        return Err(Error::MissingRun(dir.to_path_buf()));
    }
    let doc: DiagnosticsDoc = serde_json::from_str(&fs::read_to_string(&diag)?)?;
    let mut out = String::from("t,quantity,value,probe\n");
    let mut row = |t: f64, q: &str, v: f64, probe: Option<usize>| {
        out.push_str(&format!("{t},{q},{v},{}\n", probe.map_or(String::new(), |p| p.to_string())));
    };
    let probes = &doc.report.settings.probes;
    for r in &doc.report.records {
        let scalars = [
            ("sup_psi", r.sup_psi),
            ("sup_lambda", r.sup_lambda),
            ("inf_lambda", r.inf_lambda),
            ("r_psi", r.r_psi),
            ("r_lambda", r.r_lambda),
            ("t_deviation", Some(r.t_deviation)),
            ("max_t", Some(r.max_t)),
            ("sup_upsilon", Some(r.sup_upsilon)),
            ("sup_theta", Some(r.sup_theta)),
            ("min_eig_g", Some(r.min_eig_g)),
            ("min_eig_beta", Some(r.min_eig_beta)),
        ];
        for (q, v) in scalars {
            if let Some(v) = v {
                row(r.t, q, v, None);
            }
        }
        for (p, eigs) in probes.iter().zip(&r.beta_eigs) {
            for (i, v) in eigs.iter().enumerate() {
                row(r.t, &format!("lambda{}", i + 1), *v, Some(*p));
            }
        }
        for (p, d) in probes.iter().zip(&r.decay) {
            if let Some(v) = d {
                row(r.t, "decay", *v, Some(*p));
            }
        }
    }
    for (t, v) in doc.cross_deviation.iter().flatten() {
        row(*t, "cross_deviation", *v, None);
    }
    let path = dir.join("plots.csv");
    fs::write(&path, out)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(fixture: &str, dir: &Path) -> RunConfig {
        let mut c = RunConfig::new(fixture, 7);
        c.output.dir = dir.to_path_buf();
        c
    }

    #[test]
    fn config_requires_seed_and_rejects_unknown_keys() {
        assert!(RunConfig::from_json(r#"{"schema_version":1,"fixture":"F1"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schema_version":1,"seed":1,"fixture":"F1","colour":3}"#).is_err());
        let c = RunConfig::from_json(r#"{"schema_version":1,"seed":1,"fixture":"F1","flow":{"t_end":0.5}}"#).unwrap();
        assert_eq!(c.flow.t_end, 0.5);
        let mut bad = c.clone();
        bad.schema_version = 2;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fixture_is_a_config_error() {
        assert!(matches!(resolve_problem("F9", None), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run(&cfg("F2", dir.path())), Err(Error::Config(_))));
    }

    #[test]
    fn flat_run_writes_complete_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg("F1", dir.path());
        c.grid.nodes = Some(16);
        c.flow.t_end = 0.5;
        c.flow.stride = 50;
        let out = run(&c).unwrap();
        assert_eq!(out.exit_code(), 0, "{:?}", out.manifest.assertions);
        let doc = out.diagnostics.as_ref().unwrap();
        assert!(doc.report.records.iter().all(|r| r.min_eig_beta == 0.0));
        for f in &out.manifest.files {
            assert_eq!(io::sha256_file(&dir.path().join(&f.path)).unwrap(), f.sha256);
        }
        let listed: Vec<_> = out.manifest.files.iter().map(|f| f.path.as_str()).collect();
        for want in ["config.json", "diagnostics.csv", "diagnostics.json"] {
            assert!(listed.contains(&want));
        }
        let plots = export_plots(dir.path()).unwrap();
        assert!(fs::read_to_string(plots).unwrap().starts_with("t,quantity,value,probe\n"));
    }

    #[test]
    fn oversized_step_fails_with_named_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg("F3", dir.path());
        c.flow.dt = DtPolicy::Fixed(1.0);
        let out = run(&c).unwrap();
        assert_eq!(out.failing_invariant().as_deref(), Some("StepTooLarge"));
        assert_eq!(out.exit_code(), 1);
    }

    #[test]
    fn export_needs_a_run() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(export_plots(dir.path()), Err(Error::MissingRun(_))));
    }

    #[test]
    fn refine_levels() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg("F1", dir.path());
        assert!(matches!(refine_study(&c, 1), Err(Error::Config(_))));
        let mut c = c;
        c.grid.nodes = Some(16);
        c.flow.t_end = 0.001;
        let t = refine_study(&c, 2).unwrap();
        assert!(t.rows.iter().all(|r| r.exact), "{t:?}");
        assert_eq!(t.row("q").unwrap().verdict(), "exact");
    }

    #[test]
    fn u_descriptor_parses() {
        let u: UDescriptor = serde_json::from_str(r#"{"kind":"cosine","amplitude":0.5,"axis":0}"#).unwrap();
        let grid = GridSpec::unit(1, 16).unwrap();
        let f = u.field(grid).unwrap();
        assert!((f.at(0) - 0.5 / (2.0 * PI).powi(2)).abs() < 1e-15);
        assert!(UDescriptor::Cosine { amplitude: 1.0, axis: 3 }.field(grid).is_err());
    }
}
