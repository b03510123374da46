//! On-disk trajectory dump: one binary file per run plus a JSON manifest.
//!
//! Each run file is a sequence of record blocks, all little-endian:
//! `step: u64`, `time: f64`, `train_loss: f64`, then `|W|` weights as `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrajectoryRecord};
use crate::data::{Dataset, LeaveOutPlan};
use crate::error::{Error, Result};
use crate::fsutil::{read, sha256_hex, write_atomic};
use crate::net::{MLPSpec, WeightVector};

pub const DUMP_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub schema_version: u32,
    pub spec: MLPSpec,
    pub config: TrainConfig,
    pub plan: LeaveOutPlan,
    pub dataset_sha256: String,
    pub num_params: usize,
    pub steps: Vec<usize>,
    pub full: RunFile,
    pub leave_outs: Vec<RunFile>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryDump {
    pub manifest: DumpManifest,
    pub full: TrajectoryRecord,
    pub leave_outs: Vec<TrajectoryRecord>,
}

fn encode(record: &TrajectoryRecord) -> Vec<u8> {
    let p = record.weights.first().map_or(0, WeightVector::len);
    let mut out = Vec::with_capacity(record.len() * (24 + 8 * p));
    for k in 0..record.len() {
        out.extend((record.steps[k] as u64).to_le_bytes());
        out.extend(record.times[k].to_le_bytes());
        out.extend(record.train_loss[k].to_le_bytes());
        for v in &record.weights[k].values {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

fn decode(bytes: &[u8], num_params: usize, train_indices: Vec<usize>, source: &str) -> Result<TrajectoryRecord> {
    let block = 24 + 8 * num_params;
    if bytes.len() % block != 0 {
        return Err(Error::format(
            source,
            None,
            format!("{} bytes is not a whole number of {block}-byte records", bytes.len()),
        ));
    }
    let word = |b: &[u8]| -> [u8; 8] { b.try_into().expect("eight bytes") };
    let mut record = TrajectoryRecord {
        steps: Vec::new(),
        times: Vec::new(),
        weights: Vec::new(),
        train_loss: Vec::new(),
        train_indices,
    };
    for chunk in bytes.chunks_exact(block) {
        record.steps.push(u64::from_le_bytes(word(&chunk[0..8])) as usize);
        record.times.push(f64::from_le_bytes(word(&chunk[8..16])));
        record.train_loss.push(f64::from_le_bytes(word(&chunk[16..24])));
        let values = chunk[24..].chunks_exact(8).map(|c| f64::from_le_bytes(word(c))).collect();
        record.weights.push(WeightVector::new(values));
    }
    Ok(record)
}

/// Writes the full run and its leave-out runs under `dir`.
pub fn write_dump(
    dir: &Path,
    spec: &MLPSpec,
    config: &TrainConfig,
    plan: &LeaveOutPlan,
    data: &Dataset,
    full: &TrajectoryRecord,
    leave_outs: &[TrajectoryRecord],
) -> Result<DumpManifest> {
    let write_run = |name: String, record: &TrajectoryRecord| -> Result<RunFile> {
        let bytes = encode(record);
        write_atomic(&dir.join(&name), &bytes)?;
        Ok(RunFile {
            file: name,
            sha256: sha256_hex(&bytes),
        })
    };
    let full_file = write_run("full.bin".into(), full)?;
    let leave_out_files = leave_outs
        .iter()
        .enumerate()
        .map(|(b, r)| write_run(format!("leave_out_{b:04}.bin"), r))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DumpManifest {
        schema_version: DUMP_SCHEMA_VERSION,
        spec: spec.clone(),
        config: config.clone(),
        plan: plan.clone(),
        dataset_sha256: data.digest(),
        num_params: spec.num_params(),
        steps: full.steps.clone(),
        full: full_file,
        leave_outs: leave_out_files,
    };
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a dump and checks file digests and, when given, the dataset digest.
pub fn read_dump(dir: &Path, data: Option<&Dataset>) -> Result<TrajectoryDump> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::Integrity(format!("no {MANIFEST} in {}", dir.display())));
    }
    let manifest: DumpManifest = serde_json::from_slice(&read(&manifest_path)?)?;
    if manifest.schema_version != DUMP_SCHEMA_VERSION {
        return Err(Error::Integrity(format!(
            "dump schema version {} (expected {DUMP_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.leave_outs.len() != manifest.plan.num_batches() {
        return Err(Error::Integrity("leave-out file count does not match the plan".into()));
    }
    if let Some(d) = data {
        if d.digest() != manifest.dataset_sha256 {
            return Err(Error::Integrity("dataset digest does not match the dump manifest".into()));
        }
    }
    let load = |run: &RunFile, indices: Vec<usize>| -> Result<TrajectoryRecord> {
        let path = dir.join(&run.file);
        let bytes = read(&path)?;
        if sha256_hex(&bytes) != run.sha256 {
            return Err(Error::Integrity(format!("{} digest mismatch", run.file)));
        }
        let record = decode(&bytes, manifest.num_params, indices, &run.file)?;
        if record.steps != manifest.steps {
            return Err(Error::Integrity(format!("{} record grid differs from manifest", run.file)));
        }
        Ok(record)
    };
    let n = manifest.plan.n;
    let full = load(&manifest.full, (0..n).collect())?;
    let leave_outs = manifest
        .leave_outs
        .iter()
        .zip(&manifest.plan.batches)
        .map(|(run, batch)| {
            let mut keep = vec![true; n];
            batch.iter().for_each(|&i| keep[i] = false);
            load(run, (0..n).filter(|&i| keep[i]).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDump {
        manifest,
        full,
        leave_outs,
    })
}
