//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//! `FCMFRAC\0` magic, u32 format version, u64 header length, UTF-8 JSON
//! header, then the f64 arrays u, s, history and the records (4 values per
//! record: step, applied displacement, reaction force, probe ε₃).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postproc::ForceStrainRecord;
use crate::solver::{FieldState, RunState, StepPhase, StepSummary};

const MAGIC: &[u8; 8] = b"FCMFRAC\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub step: usize,
    pub applied: f64,
    pub phase: StepPhase,
    pub max_force: f64,
    /// SHA-256 of the configuration that produced the state.
    pub config_hash: String,
    pub n_u: usize,
    pub n_s: usize,
    pub n_history: usize,
    pub n_records: usize,
    pub summaries: Vec<StepSummary>,
    /// Set when the run stopped on an error.
    #[serde(default)]
    pub error: Option<String>,
}

pub fn write_checkpoint(path: &Path, state: &RunState, config_hash: &str, error: Option<String>) -> Result<()> {
    let f = &state.fields;
    let header = CheckpointHeader {
        step: f.step,
        applied: f.applied,
        phase: state.phase,
        max_force: state.max_force,
        config_hash: config_hash.to_string(),
        n_u: f.u.len(),
        n_s: f.s.len(),
        n_history: f.history.len(),
        n_records: state.records.len(),
        summaries: state.summaries.clone(),
        error,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Json { path: path.into(), source: e })?;
    let n_f64 = f.u.len() + f.s.len() + f.history.len() + 4 * state.records.len();
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * n_f64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let records = state
        .records
        .iter()
        .flat_map(|r| [r.step as f64, r.applied_displacement, r.reaction_force, r.probe_eps3]);
    for v in f.u.iter().chain(&f.s).chain(&f.history).copied().chain(records) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    // write to a sibling file first so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, RunState)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if data.len() < 20 || &data[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(data[12..20].try_into().unwrap()) as usize;
    let body = data.get(20..).ok_or_else(|| bad("truncated"))?;
    let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::Json { path: path.into(), source: e })?;
    let arrays = &body[hlen..];
    let n = header.n_u + header.n_s + header.n_history + 4 * header.n_records;
    if arrays.len() != 8 * n {
        return Err(bad(&format!("expected {} bytes of data, found {}", 8 * n, arrays.len())));
    }
    let mut vals = arrays.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |k: usize| -> Vec<f64> { vals.by_ref().take(k).collect() };
    let u = take(header.n_u);
    let s = take(header.n_s);
    let history = take(header.n_history);
    let records = take(4 * header.n_records)
        .chunks_exact(4)
        .map(|r| ForceStrainRecord {
            step: r[0] as usize,
            applied_displacement: r[1],
            reaction_force: r[2],
            probe_eps3: r[3],
        })
        .collect();
    let state = RunState {
        fields: FieldState {
            u,
            s,
            history,
            applied: header.applied,
            step: header.step,
        },
        records,
        summaries: header.summaries.clone(),
        phase: header.phase,
        max_force: header.max_force,
    };
    Ok((header, state))
}
