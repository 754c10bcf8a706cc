//! Flat-file export of grid data.
//!
//! Binary layout: 8-byte magic, little-endian `u32` header length, a JSON
//! header, then the payload as little-endian `f64`. The payload is ordered
//! time-major, then component, then flat cell index (axis 0 fastest).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::DriftField;
use crate::grid::GridSpec;
use crate::solver::{GridState, KernelSlice};

pub const MAGIC: &[u8; 8] = b"DRIFTLB1";

/// Largest cell count per time sample accepted by the CSV writer.
pub const CSV_MAX_CELLS: usize = 1 << 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One scalar per cell center.
    CellCentered,
    /// `n` face-normal components; component `d` sits at `center + h/2 e_d`.
    Staggered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub grid: GridSpec,
    pub layout: Layout,
    pub times: Vec<f64>,
    pub label: String,
}

impl Header {
    pub fn components(&self) -> usize {
        match self.layout {
            Layout::CellCentered => 1,
            Layout::Staggered => self.grid.n,
        }
    }

    pub fn payload_len(&self) -> usize {
        self.times.len() * self.components() * self.grid.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub data: Vec<f64>,
}

impl Container {
    pub fn new(header: Header, data: Vec<f64>) -> Result<Self> {
        header.grid.validate()?;
        if data.len() != header.payload_len() {
            return Err(Error::Layout(format!(
                "payload has {} values, header implies {}",
                data.len(),
                header.payload_len()
            )));
        }
        Ok(Self { header, data })
    }

    pub fn from_states(grid: &GridSpec, states: &[GridState], label: &str) -> Result<Self> {
        let mut data = Vec::with_capacity(states.len() * grid.len());
        for s in states {
            if s.values.len() != grid.len() {
                return Err(Error::Layout("state length differs from grid".into()));
            }
            data.extend_from_slice(&s.values);
        }
        let header = Header {
            grid: *grid,
            layout: Layout::CellCentered,
            times: states.iter().map(|s| s.time).collect(),
            label: label.to_string(),
        };
        Self::new(header, data)
    }

    pub fn from_slices(slices: &[KernelSlice], label: &str) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(Error::EmptySamples("no kernel slices".into()));
        };
        if slices.iter().any(|s| s.grid != first.grid) {
            return Err(Error::Layout("slices live on different grids".into()));
        }
        let states: Vec<GridState> = slices.iter().map(|s| s.state.clone()).collect();
        Self::from_states(&first.grid, &states, label)
    }

    /// Staggered samples of a drift at the given times.
    pub fn from_drift(field: &DriftField, times: &[f64]) -> Result<Self> {
        let g = field.grid;
        let mut data = Vec::with_capacity(times.len() * g.n * g.len());
        for &t in times {
            let faces = field.faces_at(t);
            for comp in faces.comps.iter().take(g.n) {
                data.extend_from_slice(comp);
            }
        }
        let header = Header {
            grid: g,
            layout: Layout::Staggered,
            times: times.to_vec(),
            label: field.label.clone(),
        };
        Self::new(header, data)
    }

    /// Values of time sample `k`, component `d`.
    pub fn frame(&self, k: usize, d: usize) -> &[f64] {
        let m = self.header.grid.len();
        let off = (k * self.header.components() + d) * m;
        &self.data[off..off + m]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Io(e.to_string()))?;
        let len =
            u32::try_from(header.len()).map_err(|_| Error::Layout("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Layout("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(Error::Layout("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&r[..len]).map_err(|e| Error::Layout(e.to_string()))?;
        let body = &r[len..];
        if body.len() != 8 * header.payload_len() {
            return Err(Error::Layout(format!(
                "payload has {} bytes, header implies {}",
                body.len(),
                8 * header.payload_len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rows `t, x0[, x1[, x2]], value...` with one value column per component.
    /// Coordinates are those of the sample point (face centers when staggered,
    /// reported per component).
    pub fn to_csv(&self) -> Result<String> {
        let g = &self.header.grid;
        if g.len() > CSV_MAX_CELLS {
            return Err(Error::Argument(format!(
                "{} cells is too many for csv",
                g.len()
            )));
        }
        let axes = ["x", "y", "z"];
        let mut out = String::from("t,component");
        for a in axes.iter().take(g.n) {
            out.push(',');
            out.push_str(a);
        }
        out.push_str(",value\n");
        let h = g.h();
        for (k, t) in self.header.times.iter().enumerate() {
            for d in 0..self.header.components() {
                let frame = self.frame(k, d);
                for (c, v) in frame.iter().enumerate() {
                    let mut x = g.center(c);
                    if self.header.layout == Layout::Staggered {
                        x[d] += 0.5 * h;
                    }
                    out.push_str(&format!("{t},{d}"));
                    for xi in x.iter().take(g.n) {
                        out.push_str(&format!(",{xi}"));
                    }
                    out.push_str(&format!(",{v:e}\n"));
                }
            }
        }
        Ok(out)
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
