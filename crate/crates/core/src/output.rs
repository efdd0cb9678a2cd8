//! Per-run output directories: losses, image, manifest, ground truth and dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{RunConfig, RunRecord, StepRecord};
use crate::error::{IsacError, Result};
use crate::tensor_io;
use crate::toybench::SceneSpec;

pub const LOSSES_FILE: &str = "losses.csv";
pub const IMAGE_FILE: &str = "image.ppm";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| IsacError::Io(e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `t,lambda_ins,lambda_cls,L_ins,L_cls,L_total,x_before,x_after`, one row per step.
pub fn losses_csv(steps: &[StepRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "lambda_ins", "lambda_cls", "L_ins", "L_cls", "L_total", "x_before", "x_after"])
        .map_err(csv_err)?;
    for s in steps {
        let r = &s.report;
        w.write_record([
            r.t.to_string(),
            r.weights.lambda_ins.to_string(),
            r.weights.lambda_cls.to_string(),
            r.l_ins.to_string(),
            r.l_cls.to_string(),
            r.l_total.to_string(),
            s.latent_before.clone(),
            s.latent_after.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| IsacError::Io(std::io::Error::other(e.to_string())))
}

pub(crate) fn csv_err(e: csv::Error) -> IsacError {
    IsacError::Io(std::io::Error::other(e.to_string()))
}

/// Evaluation labels stored with a run so it can be scored later.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLabels {
    pub config_id: String,
    pub prompt_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub backend: String,
    pub weight_hash: String,
    pub labels: RunLabels,
    pub files: Vec<FileHash>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHash {
    pub name: String,
    pub sha256: String,
}

/// Write every artifact of `record` under `dir` and return the manifest.
pub fn write_run_dir(dir: &Path, record: &RunRecord, labels: &RunLabels) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        write_atomic(&dir.join(&name), &bytes)?;
        files.push(FileHash { sha256: sha256_hex(&bytes), name });
        Ok(())
    };
    put(LOSSES_FILE.into(), losses_csv(&record.steps)?)?;
    put(IMAGE_FILE.into(), record.image.to_ppm())?;
    if let Some(gt) = &record.ground_truth {
        put(GROUND_TRUTH_FILE.into(), ground_truth_json(gt)?)?;
    }
    for d in &record.dumps {
        put(format!("sa_{}.isac", d.t), tensor_io::encode_matrix(&d.sa))?;
        put(format!("ca_{}.isac", d.t), tensor_io::encode_matrix(&d.ca))?;
        put(format!("caprop_{}.isac", d.t), tensor_io::encode_matrix(&d.caprop))?;
        put(format!("classmasks_{}.isac", d.t), tensor_io::encode_matrix(&d.class_masks))?;
        let fg: Vec<f64> = d.foreground.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        put(format!("fg_{}.isac", d.t), tensor_io::encode(&[fg.len()], fg))?;
        if let Some(m) = &d.masks {
            put(format!("masks_{}.isac", d.t), tensor_io::encode_matrix(m))?;
        }
    }
    let manifest = Manifest {
        config: record.config.clone(),
        config_hash: record.config.content_hash(),
        seed: record.seed,
        backend: record.backend.to_string(),
        weight_hash: record.weight_hash.clone(),
        labels: labels.clone(),
        files,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(json_err)?;
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

pub fn ground_truth_json(gt: &SceneSpec) -> Result<Vec<u8>> {
    let mut json = serde_json::to_vec_pretty(gt).map_err(json_err)?;
    json.push(b'\n');
    Ok(json)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    serde_json::from_slice(&bytes).map_err(|e| IsacError::Config(format!("bad manifest in {}: {e}", dir.display())))
}

pub(crate) fn json_err(e: serde_json::Error) -> IsacError {
    IsacError::Config(e.to_string())
}
