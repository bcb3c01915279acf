//! Experiment orchestration and persistence.
//!
//! A run computes into a hidden working directory next to its final
//! location, writes a manifest of SHA-256 digests, and is renamed into place
//! only when everything succeeded. Failed runs are moved under `failed/`.

mod artifacts;
mod config;
mod experiments;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use artifacts::{build_manifest, fresh_dir, sha256_file, verify, ArtifactSink, Manifest, ManifestEntry, VerifyReport, MANIFEST, TIMING};
pub use config::{ExperimentConfig, ExperimentKind, InstanceSpec, TrainingSpec};
pub use experiments::{
    activation, build_teacher, figure_defaults, median, median_time, resolve_training, GradientRow, SeedResult,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Value,
    /// Named pass/fail checks the experiment evaluates on its own output.
    pub checks: BTreeMap<String, bool>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.values().all(|&ok| ok)
    }
}

/// Directory name: kind, root seed, and a digest of the canonical config.
pub fn run_name(config: &ExperimentConfig) -> Result<String> {
    let digest = hex::encode(Sha256::digest(config.canonical_json()?.as_bytes()));
    let mut kind = config.kind.name().to_string();
    if let Some(f) = config.figure {
        kind = format!("{kind}{f}");
    }
    Ok(format!("{kind}-s{}-{}", config.root_seed, &digest[..12]))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let name = run_name(config)?;
    let work = fresh_dir(out, &format!(".partial-{name}"));
    fs::create_dir_all(&work).map_err(|e| Error::io(&work, e))?;
    let start = Instant::now();
    let mut sink = ArtifactSink::new(work.clone());
    let result = (|| -> Result<(Value, BTreeMap<String, bool>)> {
        sink.write("config.json", config.canonical_json()?.as_bytes())?;
        let (mut summary, checks) = experiments::dispatch(config, &mut sink)?;
        summary["kind"] = json!(config.kind.name());
        summary["root_seed"] = json!(config.root_seed);
        summary["checks"] = serde_json::to_value(&checks)?;
        sink.write_json("summary.json", &summary)?;
        let manifest = build_manifest(&work, sink.files(), config.root_seed)?;
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(work.join(MANIFEST), text).map_err(|e| Error::io(work.join(MANIFEST), e))?;
        Ok((summary, checks))
    })();
    match result {
        Ok((summary, checks)) => {
            let timing = json!({"wall_seconds": start.elapsed().as_secs_f64()});
            let path = work.join(TIMING);
            fs::write(&path, serde_json::to_string_pretty(&timing)? + "\n").map_err(|e| Error::io(&path, e))?;
            let dir = fresh_dir(out, &name);
            fs::rename(&work, &dir).map_err(|e| Error::io(&dir, e))?;
            Ok(RunOutcome { dir, summary, checks })
        }
        Err(err) => {
            let failed = out.join("failed");
            let _ = fs::create_dir_all(&failed);
            let dest = fresh_dir(&failed, &name);
            let _ = fs::write(work.join("error.txt"), format!("{err}\n"));
            let _ = fs::rename(&work, &dest);
            Err(err)
        }
    }
}
