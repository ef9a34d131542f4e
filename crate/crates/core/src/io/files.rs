//! Checkpoints, dataset directories, captures and hashing.

use crate::attack::GradientCapture;
use crate::error::{Error, Result};
use crate::io::dataset::{DatasetSpec, ToyDataset};
use crate::models::{PriorCnn, PriorConfig, PriorStats, VitConfig, VitParams};
use crate::tensor::archive::Archive;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_bytes(&std::fs::read(path)?))
}

/// JSON written next to a checkpoint archive: `<stem>.json`.
pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Sidecar {
    Vit { config: VitConfig },
    Prior { config: PriorConfig },
}

pub fn save_victim(path: impl AsRef<Path>, params: &VitParams) -> Result<()> {
    let path = path.as_ref();
    let mut a = Archive::new();
    for (name, t) in params.names().into_iter().zip(&params.tensors) {
        a.push(name, (**t).clone())?;
    }
    a.write(path)?;
    let sidecar = Sidecar::Vit { config: params.config.clone() };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_victim(path: impl AsRef<Path>) -> Result<VitParams> {
    let path = path.as_ref();
    let Sidecar::Vit { config } = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)? else {
        return Err(Error::format(format!("{} is not a victim checkpoint", path.display())));
    };
    let a = Archive::read(path)?;
    let tensors = config
        .layout()
        .iter()
        .map(|slot| a.require(&slot.name).cloned())
        .collect::<Result<Vec<_>>>()?;
    VitParams::from_tensors(config, tensors)
}

pub fn save_prior(path: impl AsRef<Path>, prior: &PriorCnn) -> Result<()> {
    let path = path.as_ref();
    let mut a = Archive::new();
    for (name, t) in prior.param_names().into_iter().zip(&prior.params) {
        a.push(name, (**t).clone())?;
    }
    for l in 0..prior.stats.layers() {
        a.push(format!("prior_stats/{l}/mean"), prior.stats.mean[l].clone())?;
        a.push(format!("prior_stats/{l}/var"), prior.stats.var[l].clone())?;
    }
    a.write(path)?;
    let sidecar = Sidecar::Prior { config: prior.config.clone() };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<PriorCnn> {
    let path = path.as_ref();
    let Sidecar::Prior { config } = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)? else {
        return Err(Error::format(format!("{} is not a prior checkpoint", path.display())));
    };
    let a = Archive::read(path)?;
    let names = PriorCnn::names_for(&config);
    let params = names.iter().map(|n| a.require(n).cloned()).collect::<Result<Vec<_>>>()?;
    let layers = config.widths.len();
    let mut stats = PriorStats { mean: Vec::with_capacity(layers), var: Vec::with_capacity(layers) };
    for l in 0..layers {
        stats.mean.push(a.require(&format!("prior_stats/{l}/mean"))?.clone());
        stats.var.push(a.require(&format!("prior_stats/{l}/var"))?.clone());
    }
    PriorCnn::from_parts(config, params, stats)
}

pub fn save_capture(path: impl AsRef<Path>, capture: &GradientCapture) -> Result<()> {
    capture.to_archive()?.write(path)
}

pub fn load_capture(path: impl AsRef<Path>) -> Result<GradientCapture> {
    GradientCapture::from_archive(&Archive::read(path)?)
}

pub const IMAGES_ENTRY: &str = "images";

/// Single-entry archive holding a batch of images under [`IMAGES_ENTRY`].
pub fn save_images(path: impl AsRef<Path>, images: &Tensor) -> Result<()> {
    let mut a = Archive::new();
    a.push(IMAGES_ENTRY, images.clone())?;
    a.write(path)
}

pub fn load_images(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(Archive::read(path)?.require(IMAGES_ENTRY)?.clone())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsFile {
    spec: DatasetSpec,
    labels: Vec<usize>,
}

pub const DATASET_IMAGES: &str = "images.gvt";
pub const DATASET_LABELS: &str = "labels.json";

/// `images.gvt` plus `labels.json` (generator spec and labels).
pub fn save_dataset(dir: impl AsRef<Path>, ds: &ToyDataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    save_images(dir.join(DATASET_IMAGES), &ds.images)?;
    let labels = LabelsFile { spec: ds.spec.clone(), labels: ds.labels.clone() };
    std::fs::write(dir.join(DATASET_LABELS), serde_json::to_string_pretty(&labels)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<ToyDataset> {
    let dir = dir.as_ref();
    let images = load_images(dir.join(DATASET_IMAGES))?;
    let LabelsFile { spec, labels } = serde_json::from_slice(&std::fs::read(dir.join(DATASET_LABELS))?)?;
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::format("dataset image and label counts differ"));
    }
    Ok(ToyDataset { spec, images, labels })
}
