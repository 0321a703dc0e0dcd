//! Binary field checkpoints (`*.oldn`).
//!
//! Layout, all little endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `OLDN` |
//! | 4     | version (u32, currently 1) |
//! | 12    | `nx`, `ny`, `nt` (u32) |
//! | 4     | component count (u32, 2 for velocity) |
//! | ...   | f64 values: for each of the `nt` stored time levels, all interior u-faces then all interior v-faces |
//!
//! `nt` counts the time levels actually stored: 1 for a single field,
//! `nt` for a control (one value per step), `nt + 1` for a full trajectory.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Grid, VelocityField};
use crate::solvers::SpaceTimeField;

pub const MAGIC: &[u8; 4] = b"OLDN";
pub const VERSION: u32 = 1;
const HEADER: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldCheckpoint {
    pub nx: u32,
    pub ny: u32,
    pub nt: u32,
    pub components: u32,
    pub data: Vec<f64>,
}

fn level_len(nx: usize, ny: usize) -> usize {
    (nx - 1) * ny + nx * (ny - 1)
}

impl FieldCheckpoint {
    pub fn from_levels(grid: &Grid, levels: &[VelocityField]) -> Result<Self> {
        if levels.iter().any(|l| !l.matches(grid)) {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            nx: grid.nx() as u32,
            ny: grid.ny() as u32,
            nt: levels.len() as u32,
            components: 2,
            data: levels.iter().flat_map(|l| l.data.iter().copied()).collect(),
        })
    }

    pub fn from_space_time(grid: &Grid, field: &SpaceTimeField) -> Result<Self> {
        Self::from_levels(grid, &field.slots)
    }

    /// Split back into per-level fields; the stored grid must match.
    pub fn levels(&self, grid: &Grid) -> Result<Vec<VelocityField>> {
        if self.nx as usize != grid.nx() || self.ny as usize != grid.ny() || self.components != 2 {
            return Err(Error::GridMismatch);
        }
        self.data
            .chunks(grid.n_dof())
            .map(|c| VelocityField::from_vec(grid, c.to_vec()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.nx, self.ny, self.nt, self.components] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedCheckpoint);
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER {
            return Err(Error::TruncatedCheckpoint);
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (nx, ny, nt, components) = (word(1), word(2), word(3), word(4));
        if nx < 2 || ny < 2 || components != 2 {
            return Err(Error::Invalid(format!(
                "checkpoint header nx={nx} ny={ny} components={components}"
            )));
        }
        let n = nt as usize * level_len(nx as usize, ny as usize);
        let body = &bytes[HEADER..];
        if body.len() < 8 * n {
            return Err(Error::TruncatedCheckpoint);
        }
        if body.len() > 8 * n {
            return Err(Error::Invalid(format!("{} trailing bytes after checkpoint data", body.len() - 8 * n)));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            nx,
            ny,
            nt,
            components,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
