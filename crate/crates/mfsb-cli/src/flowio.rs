//! Flow files.
//!
//! Binary layout (little-endian): magic `MFSBFLOW`, u32 format version,
//! f64 half_width, u64 n_cells, f64 horizon, u64 n_steps, then
//! (n_steps + 1)·n_cells f64 density values row by row, then the SHA-256 of
//! everything before it.
//!
//! CSV layout: `# mfsb-flow version=1`, a `# grid` line with the metadata,
//! a column header, then one row per time node: t followed by the densities.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mfsb::grid::{Density, MarginalFlow, SpatialGrid, TimeGrid};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MFSBFLOW";
const HEADER_LEN: usize = 8 + 4 + 8 * 4;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FlowFormat {
    #[default]
    Bin,
    Csv,
}

impl FlowFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FlowFormat::Bin => "bin",
            FlowFormat::Csv => "csv",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "bin" => Some(FlowFormat::Bin),
            "csv" => Some(FlowFormat::Csv),
            _ => None,
        }
    }
}

pub fn encode_bin(flow: &MarginalFlow) -> Vec<u8> {
    let g = flow.grid();
    let tg = flow.time_grid;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * g.n_cells * tg.n_nodes() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&g.half_width.to_le_bytes());
    out.extend_from_slice(&(g.n_cells as u64).to_le_bytes());
    out.extend_from_slice(&tg.horizon.to_le_bytes());
    out.extend_from_slice(&(tg.n_steps as u64).to_le_bytes());
    for d in &flow.densities {
        for v in &d.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Densities are taken as stored, without renormalization, so a round trip
/// is bitwise.
fn assemble(grid: SpatialGrid, time_grid: TimeGrid, rows: Vec<Vec<f64>>) -> Result<MarginalFlow> {
    let mut densities = Vec::with_capacity(rows.len());
    for values in rows {
        if values.len() != grid.n_cells || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CliError::Parse("flow row has the wrong length or invalid values".into()));
        }
        densities.push(Density { grid, values });
    }
    Ok(MarginalFlow::new(time_grid, densities)?)
}

pub fn decode_bin(bytes: &[u8]) -> Result<MarginalFlow> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CliError::Parse("not an mfsb flow file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CliError::FormatVersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < HEADER_LEN + DIGEST_LEN {
        return Err(CliError::ChecksumMismatch);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CliError::ChecksumMismatch);
    }
    let half_width = f64_at(body, 12);
    let n_cells = u64_at(body, 20) as usize;
    let horizon = f64_at(body, 28);
    let n_steps = u64_at(body, 36) as usize;
    let grid = SpatialGrid::new(half_width, n_cells)?;
    let time_grid = TimeGrid::new(horizon, n_steps)?;
    let expected = n_cells.checked_mul(n_steps + 1).and_then(|n| n.checked_mul(8));
    if expected != Some(body.len() - HEADER_LEN) {
        return Err(CliError::Parse("flow body length does not match its header".into()));
    }
    let rows = body[HEADER_LEN..]
        .chunks_exact(8 * n_cells)
        .map(|row| row.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        .collect();
    assemble(grid, time_grid, rows)
}

pub fn encode_csv(flow: &MarginalFlow) -> String {
    let g = flow.grid();
    let tg = flow.time_grid;
    let mut s = format!("# mfsb-flow version={FORMAT_VERSION}\n");
    s += &format!(
        "# grid half_width={:.17e} n_cells={} horizon={:.17e} n_steps={}\n",
        g.half_width, g.n_cells, tg.horizon, tg.n_steps
    );
    s += "t";
    for i in 0..g.n_cells {
        s += &format!(",p{i}");
    }
    s.push('\n');
    for (k, d) in flow.densities.iter().enumerate() {
        s += &format!("{:.17e}", tg.t(k));
        for v in &d.values {
            s += &format!(",{v:.17e}");
        }
        s.push('\n');
    }
    s
}

fn field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Parse(format!("missing or invalid {key} in flow header")))
}

pub fn decode_csv(text: &str) -> Result<MarginalFlow> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default();
    if !first.starts_with("# mfsb-flow") {
        return Err(CliError::Parse("not an mfsb flow file".into()));
    }
    let version: u32 = field(first, "version")?;
    if version != FORMAT_VERSION {
        return Err(CliError::FormatVersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let meta = lines.next().unwrap_or_default();
    let grid = SpatialGrid::new(field(meta, "half_width")?, field(meta, "n_cells")?)?;
    let time_grid = TimeGrid::new(field(meta, "horizon")?, field(meta, "n_steps")?)?;
    let _header = lines.next();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .skip(1)
                .map(|v| v.trim().parse::<f64>().map_err(|e| CliError::Parse(format!("bad value {v:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(grid, time_grid, rows)
}

pub fn save_flow(flow: &MarginalFlow, path: &Path, format: FlowFormat) -> Result<()> {
    match format {
        FlowFormat::Bin => std::fs::write(path, encode_bin(flow))?,
        FlowFormat::Csv => std::fs::write(path, encode_csv(flow))?,
    }
    Ok(())
}

/// Format is taken from the extension (`.bin` or `.csv`).
pub fn load_flow(path: &Path) -> Result<MarginalFlow> {
    match FlowFormat::from_path(path) {
        Some(FlowFormat::Bin) => decode_bin(&std::fs::read(path)?),
        Some(FlowFormat::Csv) => decode_csv(&std::fs::read_to_string(path)?),
        None => Err(CliError::Parse(format!("{} is neither .bin nor .csv", path.display()))),
    }
}
