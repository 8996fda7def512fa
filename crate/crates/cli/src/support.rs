//! Config loading, scene discovery, manifests, exit codes and the job pool.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cooptraj_core::assoc::AssocError;
use cooptraj_core::config::{ConfigError, PipelineConfig};
use cooptraj_core::eval::EvalError;
use cooptraj_core::io::{load_scenario, IoError, SCHEMA_VERSION};
use cooptraj_core::model::ModelError;
use cooptraj_core::prepare::PrepareError;
use cooptraj_core::scene::Scene;
use cooptraj_core::synth::SynthError;
use cooptraj_core::train::TrainError;
use cooptraj_tensor::{checkpoint, KernelError};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const CONFIG_ERROR: u8 = 2;
pub const DATA_ERROR: u8 = 3;
pub const NUMERIC_ERROR: u8 = 4;

fn kernel_code(e: &KernelError) -> u8 {
    match e {
        KernelError::Checkpoint(_) | KernelError::UnknownParam(_) => DATA_ERROR,
        _ => NUMERIC_ERROR,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Config(_) => CONFIG_ERROR,
        ModelError::Kernel(k) => kernel_code(k),
        ModelError::NonFinite(_) => NUMERIC_ERROR,
    }
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return CONFIG_ERROR;
        }
        if let Some(AssocError::Config(_)) = cause.downcast_ref::<AssocError>() {
            return CONFIG_ERROR;
        }
        if let Some(SynthError::Config(_)) = cause.downcast_ref::<SynthError>() {
            return CONFIG_ERROR;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_code(e);
        }
        if let Some(e) = cause.downcast_ref::<KernelError>() {
            return kernel_code(e);
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Model(m) => model_code(m),
                TrainError::Assoc(AssocError::Config(_)) => CONFIG_ERROR,
                _ => DATA_ERROR,
            };
        }
        if cause.is::<IoError>()
            || cause.is::<PrepareError>()
            || cause.is::<AssocError>()
            || cause.is::<SynthError>()
            || cause.is::<EvalError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return DATA_ERROR;
        }
    }
    1
}

/// Pipeline config from a JSON file, or the defaults.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError::Invalid(vec![format!("cannot read {}: {e}", path.display())]))?;
    PipelineConfig::from_json(&text).with_context(|| format!("config {}", path.display()))
}

/// Expand directories into their `.jsonl` files, sorted by name.
pub fn expand_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn load_scenes(paths: &[PathBuf], jobs: usize) -> Result<Vec<Scene>> {
    let files = expand_paths(paths)?;
    if files.is_empty() {
        return Err(IoError::Io {
            path: paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no scenario files"),
        }
        .into());
    }
    par_map(jobs, &files, |f| load_scenario(f).map_err(anyhow::Error::from))
}

/// Map `f` over `items` on up to `jobs` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

pub fn config_hash(cfg: &PipelineConfig) -> String {
    let canonical = serde_json::to_string(cfg).expect("config serialises");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `<out>.manifest.json` for files, `<out>/manifest.json` for directories.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

/// Reproducibility record: no timestamps, so identical runs give identical
/// manifests.
pub fn write_manifest(out: &Path, command: &str, cfg: &PipelineConfig, seed: u64, extra: Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "versions": {
            "cooptraj": env!("CARGO_PKG_VERSION"),
            "scenario_schema": SCHEMA_VERSION,
            "checkpoint": checkpoint::VERSION,
        },
        "details": extra,
    });
    write_json(&manifest_path(out), &manifest)
}
