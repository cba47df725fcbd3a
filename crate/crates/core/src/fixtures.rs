//! The five standing test structures and their symbolic oracle values.
//!
//! | id | n | kind |
//! |----|---|------|
//! | F1 | 2 | `G₀ = I`, `φ ≡ 0` |
//! | F2 | 1 | `g = eˣ` on a chart, analytic derivatives only |
//! | F3 | 1 | `G₀ = [2]`, `φ = −cos(2πx)/(2π)²`, so `g = 2 + cos 2πx` |
//! | F4 | 2 | non-Hessian `g₁₁ = 2 + 0.3 sin 2πx²`, `g₂₂ = 2` |
//! | F5 | 2 | `G₀ = 3I`, `φ = [cos 2πx¹ + cos 2π(x¹+x²)]/(2π)²` |

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, HessianStructure, MetricField, PotentialJet};
use crate::grid::{GridSpec, ScalarField, SymTensorField};
use crate::linalg::Mat;

const TAU: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FixtureId {
    F1,
    F2,
    F3,
    F4,
    F5,
}

impl FixtureId {
    pub const ALL: [FixtureId; 5] = [Self::F1, Self::F2, Self::F3, Self::F4, Self::F5];

    pub fn dim(self) -> usize {
        match self {
            Self::F2 | Self::F3 => 1,
            _ => 2,
        }
    }

    /// Grid size used when a configuration does not choose one.
    pub fn default_nodes(self) -> usize {
        if self.dim() == 1 {
            64
        } else {
            32
        }
    }

    pub fn is_hessian(self) -> bool {
        !matches!(self, Self::F4)
    }
}

impl fmt::Display for FixtureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for FixtureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F1" => Ok(Self::F1),
            "F2" => Ok(Self::F2),
            "F3" => Ok(Self::F3),
            "F4" => Ok(Self::F4),
            "F5" => Ok(Self::F5),
            _ => Err(Error::Config(format!("unknown fixture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FixtureData {
    Hessian(HessianStructure),
    Metric(MetricField),
    Analytic(PotentialJet),
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub id: FixtureId,
    pub data: FixtureData,
}

impl Fixture {
    pub fn build(id: FixtureId, nodes: usize) -> Result<Self> {
        let grid = GridSpec::unit(id.dim(), nodes)?;
        let data = match id {
            FixtureId::F1 => FixtureData::Hessian(HessianStructure::new(Mat::identity(2), ScalarField::zeros(grid))?),
            FixtureId::F2 => FixtureData::Analytic(PotentialJet::sample(
                grid,
                |x| Mat::from_fn(1, |_, _| x[0].exp()),
                |x| vec![x[0].exp()],
                |x| vec![x[0].exp()],
            )?),
            FixtureId::F3 => FixtureData::Hessian(HessianStructure::new(
                Mat::from_fn(1, |_, _| 2.0),
                ScalarField::from_fn(grid, f3_potential),
            )?),
            FixtureId::F4 => FixtureData::Metric(MetricField::new(SymTensorField::from_fn(grid, |i| {
                let x = grid.position(i);
                Mat::from_fn(2, |a, b| match (a, b) {
                    (0, 0) => 2.0 + 0.3 * (TAU * x[1]).sin(),
                    (1, 1) => 2.0,
                    _ => 0.0,
                })
            }))?),
            FixtureId::F5 => FixtureData::Hessian(HessianStructure::new(
                Mat::identity(2).scale(3.0),
                ScalarField::from_fn(grid, f5_potential),
            )?),
        };
        Ok(Self { id, data })
    }

    pub fn grid(&self) -> GridSpec {
        match &self.data {
            FixtureData::Hessian(h) => *h.grid(),
            FixtureData::Metric(m) => *m.grid(),
            FixtureData::Analytic(j) => *j.grid(),
        }
    }

    pub fn metric(&self) -> Result<MetricField> {
        match &self.data {
            FixtureData::Hessian(h) => geometry::metric_from_potential(h),
            FixtureData::Metric(m) => Ok(m.clone()),
            FixtureData::Analytic(j) => MetricField::new(j.hess.clone()),
        }
    }

    pub fn hessian_structure(&self) -> Option<&HessianStructure> {
        match &self.data {
            FixtureData::Hessian(h) => Some(h),
            _ => None,
        }
    }

    /// Derivative jet of the potential: stencils on periodic fixtures, closed
    /// forms on the analytic chart, `None` for non-Hessian metrics.
    pub fn potential_jet(&self) -> Result<Option<PotentialJet>> {
        match &self.data {
            FixtureData::Hessian(h) => h.potential_jet().map(Some),
            FixtureData::Metric(_) => Ok(None),
            FixtureData::Analytic(j) => Ok(Some(j.clone())),
        }
    }

    /// Only periodic fixtures can be integrated in time.
    pub fn flowable(&self) -> bool {
        !matches!(self.data, FixtureData::Analytic(_))
    }
}

pub fn f3_potential(x: [f64; 3]) -> f64 {
    -(TAU * x[0]).cos() / (TAU * TAU)
}

pub fn f5_potential(x: [f64; 3]) -> f64 {
    ((TAU * x[0]).cos() + (TAU * (x[0] + x[1])).cos()) / (TAU * TAU)
}

/// Symbolically evaluated values at dyadic sample points, components in
/// row-major order of the full `n^rank` array.
#[derive(Debug, Clone, Deserialize)]
pub struct OracleSet {
    pub points: Vec<Vec<f64>>,
    pub quantities: BTreeMap<String, Vec<Vec<f64>>>,
}

impl OracleSet {
    pub fn quantity(&self, name: &str) -> Result<&[Vec<f64>]> {
        self.quantities
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("no oracle values for {name}")))
    }

    /// Grid node of each sample point.
    pub fn nodes(&self, grid: &GridSpec) -> Vec<usize> {
        self.points.iter().map(|p| grid.nearest_node(p)).collect()
    }
}

#[derive(Debug, Deserialize)]
struct OracleFile {
    #[serde(rename = "F3")]
    f3: OracleSet,
    #[serde(rename = "F4")]
    f4: OracleSet,
    #[serde(rename = "F5")]
    f5: OracleSet,
}

static ORACLES: OnceLock<OracleFile> = OnceLock::new();

/// Oracle values for a fixture; F1 and F2 have closed forms (zero curvature)
/// and carry no table.
pub fn oracle(id: FixtureId) -> Option<&'static OracleSet> {
    let file = ORACLES.get_or_init(|| {
        serde_json::from_str(include_str!("../data/oracles.json")).expect("embedded oracle table parses")
    });
    match id {
        FixtureId::F3 => Some(&file.f3),
        FixtureId::F4 => Some(&file.f4),
        FixtureId::F5 => Some(&file.f5),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_fixture_builds() {
        for id in FixtureId::ALL {
            let f = Fixture::build(id, 16).unwrap();
            assert_eq!(f.grid().dim(), id.dim());
            f.metric().unwrap();
            assert_eq!(f.flowable(), id != FixtureId::F2);
        }
    }

    #[test]
    fn f5_metric_at_origin() {
        let f = Fixture::build(FixtureId::F5, 256).unwrap();
        let g = f.metric().unwrap().at(0);
        let want = Mat::from_fn(2, |i, j| [[1.0, -1.0], [-1.0, 2.0]][i][j]);
        // The cross stencil scales a unit-frequency mode by sin²(2πh)/(2πh)².
        let h = f.grid().spacing();
        assert!(g.sub(&want).max_abs() < 0.4 * (2.0 * PI * h).powi(2), "{g:?}");
    }

    #[test]
    fn oracle_points_are_nodes() {
        for id in [FixtureId::F3, FixtureId::F4, FixtureId::F5] {
            let o = oracle(id).unwrap();
            let grid = GridSpec::unit(id.dim(), 64).unwrap();
            for (p, node) in o.points.iter().zip(o.nodes(&grid)) {
                let x = grid.position(node);
                for (a, v) in p.iter().enumerate() {
                    assert_eq!(x[a], *v);
                }
            }
            let g = o.quantity("g").unwrap();
            assert_eq!(g.len(), o.points.len());
        }
        assert!(oracle(FixtureId::F1).is_none());
    }

    #[test]
    fn parse_ids() {
        assert_eq!("f3".parse::<FixtureId>().unwrap(), FixtureId::F3);
        assert!("F9".parse::<FixtureId>().is_err());
    }
}
