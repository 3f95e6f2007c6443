use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::{DetectArgs, IdentifyArgs, PvaluesArgs, RefitArgs, SimulateArgs};

/// Everything needed to reproduce a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    /// Every parameter after defaults, with input paths made absolute.
    pub config: serde_json::Value,
    /// Input role -> content digest.
    pub inputs: BTreeMap<String, InputDigest>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// A fully resolved job, as recorded in a manifest.
#[derive(Debug, Clone)]
pub enum Job {
    Pvalues(PvaluesArgs),
    Detect(DetectArgs),
    Identify(IdentifyArgs),
    Refit(RefitArgs),
    Simulate(SimulateArgs),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Pvalues(_) => "pvalues",
            Job::Detect(_) => "detect",
            Job::Identify(_) => "identify",
            Job::Refit(_) => "refit",
            Job::Simulate(_) => "simulate",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Job::Pvalues(a) => a.seed,
            Job::Detect(a) => a.seed,
            Job::Identify(a) => a.seed,
            Job::Refit(a) => a.seed,
            Job::Simulate(a) => a.seed,
        }
    }

    fn config(&self) -> Result<serde_json::Value> {
        Ok(match self {
            Job::Pvalues(a) => serde_json::to_value(a)?,
            Job::Detect(a) => serde_json::to_value(a)?,
            Job::Identify(a) => serde_json::to_value(a)?,
            Job::Refit(a) => serde_json::to_value(a)?,
            Job::Simulate(a) => serde_json::to_value(a)?,
        })
    }

    pub fn from_manifest(m: &RunManifest) -> Result<Job> {
        let c = m.config.clone();
        Ok(match m.subcommand.as_str() {
            "pvalues" => Job::Pvalues(serde_json::from_value(c)?),
            "detect" => Job::Detect(serde_json::from_value(c)?),
            "identify" => Job::Identify(serde_json::from_value(c)?),
            "refit" => Job::Refit(serde_json::from_value(c)?),
            "simulate" => Job::Simulate(serde_json::from_value(c)?),
            other => bail!("unknown subcommand `{other}` in manifest"),
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Absolute form of an input path; fails with the path named if missing.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).with_context(|| format!("cannot read {}", path.display()))
}

impl RunManifest {
    pub fn new(job: &Job, inputs: &[(&str, &Path)]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|(role, path)| Ok((role.to_string(), InputDigest { path: path.to_path_buf(), sha256: sha256_file(path)? })))
            .collect::<Result<_>>()?;
        Ok(RunManifest {
            subcommand: job.name().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: job.config()?,
            inputs,
            seed: job.seed(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{} is not a run manifest", path.display()))
    }

    /// Fails if any recorded input changed since the manifest was written.
    pub fn verify_inputs(&self) -> Result<()> {
        for (role, input) in &self.inputs {
            let now = sha256_file(&input.path)?;
            if now != input.sha256 {
                bail!("{} input {} changed since the manifest was written (sha256 {} != {})", role, input.path.display(), now, input.sha256);
            }
        }
        Ok(())
    }
}
