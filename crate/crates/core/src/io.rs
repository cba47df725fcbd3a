//! Field files and content hashes.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! b"HKF1" | n: u32 | N: u32 | L: f64 | rank: u32 | N^n · n^rank f64
//! ```
//!
//! Nodes in row-major order, each node's components row-major over the full
//! `n^rank` array (symmetric tensors are written expanded).

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField, SymTensorField, Tensor3Field, Tensor4Field, VectorField};

pub const MAGIC: &[u8; 4] = b"HKF1";
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldData {
    pub grid: GridSpec,
    pub rank: u32,
    pub values: Vec<f64>,
}

impl FieldData {
    pub fn components(&self) -> usize {
        self.grid.dim().pow(self.rank)
    }

    pub fn from_scalar(f: &ScalarField) -> Self {
        Self { grid: *f.grid(), rank: 0, values: f.values().to_vec() }
    }

    pub fn from_vector(f: &VectorField) -> Self {
        Self { grid: *f.grid(), rank: 1, values: f.values().to_vec() }
    }

    pub fn from_sym(f: &SymTensorField) -> Self {
        Self { grid: *f.grid(), rank: 2, values: f.expanded() }
    }

    pub fn from_tensor3(f: &Tensor3Field) -> Self {
        Self { grid: *f.grid(), rank: 3, values: f.values().to_vec() }
    }

    pub fn from_tensor4(f: &Tensor4Field) -> Self {
        Self { grid: *f.grid(), rank: 4, values: f.values().to_vec() }
    }

    fn expect_rank(&self, rank: u32) -> Result<()> {
        if self.rank != rank {
            return Err(Error::Format(format!("expected rank {rank}, file has rank {}", self.rank)));
        }
        Ok(())
    }

    pub fn into_scalar(self) -> Result<ScalarField> {
        self.expect_rank(0)?;
        ScalarField::from_values(self.grid, self.values)
    }

    /// Rebuild a symmetric field; asymmetric input is rejected.
    pub fn into_sym(self) -> Result<SymTensorField> {
        self.expect_rank(2)?;
        let n = self.grid.dim();
        for node in self.values.chunks(n * n) {
            for i in 0..n {
                for j in 0..i {
                    if node[i * n + j] != node[j * n + i] {
                        return Err(Error::Format("rank-2 field is not symmetric".into()));
                    }
                }
            }
        }
        let values = &self.values;
        Ok(SymTensorField::from_components(self.grid, |i, j| {
            values.chunks(n * n).map(|node| node[i * n + j]).collect()
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.grid.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid.nodes_per_axis() as u32).to_le_bytes());
        out.extend_from_slice(&self.grid.period().to_le_bytes());
        out.extend_from_slice(&self.rank.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing HKF1 header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let dim = u32_at(4) as usize;
        let nodes = u32_at(8) as usize;
        let period = f64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let rank = u32_at(20);
        if rank > 4 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let grid = GridSpec::new(dim, nodes, period).map_err(|e| Error::Format(e.to_string()))?;
        let want = grid.len() * dim.pow(rank);
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * want {
            return Err(Error::Format(format!("expected {want} values, body has {} bytes", body.len())));
        }
        let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { grid, rank, values })
    }

    /// Node index columns (`node`, `i0`, …), then components `c0`, `c1`, ….
    pub fn to_csv(&self) -> String {
        let n = self.grid.dim();
        let c = self.components();
        let mut out = String::from("node");
        for a in 0..n {
            out.push_str(&format!(",i{a}"));
        }
        for k in 0..c {
            out.push_str(&format!(",c{k}"));
        }
        out.push('\n');
        for (idx, node) in self.values.chunks(c).enumerate() {
            out.push_str(&idx.to_string());
            for m in self.grid.multi_index(idx) {
                out.push_str(&format!(",{m}"));
            }
            for v in node {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_field(path: &Path, field: &FieldData) -> Result<Vec<u8>> {
    let bytes = field.to_bytes();
    fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn read_field(path: &Path) -> Result<FieldData> {
    FieldData::from_bytes(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}
