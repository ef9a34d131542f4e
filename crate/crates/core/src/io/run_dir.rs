//! Attack run directories and their manifests.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json          attack configuration as run
//! capture.gvt          copy of the attacked capture
//! seed_<k>/recon.gvt   final iterate of seed k (unclamped)
//! seed_<k>/ledger.csv  per-iteration loss terms
//! consensus.gvt        pixel mean of the seed iterates
//! manifest.json        everything needed to replay the run
//! ```

use super::files::{load_capture, load_prior, load_victim, sha256_bytes, sha256_file, sidecar_path, IMAGES_ENTRY};
use crate::attack::{ledger_csv, run_attack, AttackConfig, ReconstructionResult};
use crate::error::{Error, Result};
use crate::tensor::archive::Archive;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";
pub const CAPTURE: &str = "capture.gvt";
pub const CONSENSUS: &str = "consensus.gvt";
pub const RECON: &str = "recon.gvt";
pub const LEDGER: &str = "ledger.csv";

pub fn seed_dir(seed: u64) -> String {
    format!("seed_{seed}")
}

/// Fixed modelling choices that affect results, recorded with every run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignFlags {
    pub gelu: String,
    pub fft2d: String,
    pub consensus: String,
    pub mask_semantics: String,
    pub match_norm: String,
}

impl Default for DesignFlags {
    fn default() -> Self {
        Self {
            gelu: "tanh".into(),
            fft2d: "one_minus_cosine_dft_magnitude".into(),
            consensus: "identity_flow_pixel_mean".into(),
            mask_semantics: "keep_component_excludes_embeddings_norms_head".into(),
            match_norm: format!("smoothed_l2_eps_{:e}", crate::attack::losses::MATCH_NORM_EPS),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(Self { path: path.to_path_buf(), sha256: sha256_file(path)? })
    }

    /// Fails if the file changed since it was recorded.
    pub fn verify(&self) -> Result<()> {
        let now = sha256_file(&self.path)?;
        if now != self.sha256 {
            return Err(Error::contract(format!(
                "{} changed since it was recorded (sha256 {} != {})",
                self.path.display(),
                now,
                self.sha256
            )));
        }
        Ok(())
    }
}

/// Input files of an attack. Checkpoint sidecars are hashed alongside.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInputs {
    pub capture: FileRef,
    pub victim: FileRef,
    pub victim_sidecar: FileRef,
    pub prior: Option<FileRef>,
    pub prior_sidecar: Option<FileRef>,
}

impl RunInputs {
    pub fn hash(capture: &Path, victim: &Path, prior: Option<&Path>) -> Result<Self> {
        Ok(Self {
            capture: FileRef::of(capture)?,
            victim: FileRef::of(victim)?,
            victim_sidecar: FileRef::of(sidecar_path(victim))?,
            prior: prior.map(FileRef::of).transpose()?,
            prior_sidecar: prior.map(|p| FileRef::of(sidecar_path(p))).transpose()?,
        })
    }

    pub fn verify(&self) -> Result<()> {
        self.capture.verify()?;
        self.victim.verify()?;
        self.victim_sidecar.verify()?;
        for f in self.prior.iter().chain(&self.prior_sidecar) {
            f.verify()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub config: AttackConfig,
    pub seeds: Vec<u64>,
    pub inputs: RunInputs,
    pub design: DesignFlags,
    pub labels: Vec<usize>,
    pub warnings: Vec<String>,
    /// Seeds that stopped on a non-finite value, with the reason.
    pub failures: BTreeMap<u64, String>,
    pub wall_s: f64,
    /// Run-directory-relative path to sha256.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn write_hashed(dir: &Path, rel: &str, bytes: &[u8], outputs: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, bytes)?;
    outputs.insert(rel.to_string(), sha256_bytes(bytes));
    Ok(())
}

fn images_bytes(images: &Tensor) -> Result<Vec<u8>> {
    let mut a = Archive::new();
    a.push(IMAGES_ENTRY, images.clone())?;
    a.to_bytes()
}

/// Loads the inputs, runs the attack and writes the run directory `out`.
/// Seeds that fail numerically still get their ledger written; the
/// manifest lists them under `failures`.
pub fn execute_attack(inputs: RunInputs, config: &AttackConfig, out: &Path) -> Result<(RunManifest, ReconstructionResult)> {
    let start = Instant::now();
    inputs.verify()?;
    let capture = load_capture(&inputs.capture.path)?;
    let victim = load_victim(&inputs.victim.path)?;
    let prior = inputs.prior.as_ref().map(|p| load_prior(&p.path)).transpose()?;
    let result = run_attack(&capture, &victim, prior.as_ref(), config)?;

    std::fs::create_dir_all(out)?;
    let mut outputs = BTreeMap::new();
    write_hashed(out, CONFIG, serde_json::to_string_pretty(config)?.as_bytes(), &mut outputs)?;
    write_hashed(out, CAPTURE, &std::fs::read(&inputs.capture.path)?, &mut outputs)?;
    let mut failures = BTreeMap::new();
    for s in &result.seeds {
        let dir = seed_dir(s.seed);
        write_hashed(out, &format!("{dir}/{RECON}"), &images_bytes(&s.recon)?, &mut outputs)?;
        write_hashed(out, &format!("{dir}/{LEDGER}"), ledger_csv(&s.ledger).as_bytes(), &mut outputs)?;
        if let Some(f) = &s.failure {
            failures.insert(s.seed, f.clone());
        }
    }
    write_hashed(out, CONSENSUS, &images_bytes(&result.consensus)?, &mut outputs)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        seeds: config.seeds.clone(),
        inputs,
        design: DesignFlags::default(),
        labels: result.labels.clone(),
        warnings: result.warnings.clone(),
        failures,
        wall_s: start.elapsed().as_secs_f64(),
        outputs,
    };
    std::fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok((manifest, result))
}

/// Re-runs the attack a manifest describes into `out`, after checking that
/// every input still has its recorded hash.
pub fn replay(manifest: &RunManifest, out: &Path) -> Result<(RunManifest, ReconstructionResult)> {
    if manifest.design != DesignFlags::default() {
        return Err(Error::contract("manifest was written with different design flags"));
    }
    let config = AttackConfig { seeds: manifest.seeds.clone(), ..manifest.config.clone() };
    execute_attack(manifest.inputs.clone(), &config, out)
}
