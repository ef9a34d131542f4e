//! Metrics and image panels for a finished run directory.

use super::files::{load_capture, load_images};
use super::ppm;
use super::run_dir::{RunManifest, CAPTURE, CONSENSUS, MANIFEST};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::models::PriorCnn;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const PANELS: &str = "panels";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: PathBuf,
    pub batch_size: usize,
    pub defense_sigma: f64,
    pub mask: String,
    pub metrics: MetricReport,
    /// Panel files, one per reconstruction: original left, reconstruction
    /// right.
    pub panels: Vec<PathBuf>,
}

pub const REPORT_CSV_HEADER: &str = "run,batch_size,defense_sigma,mask,psnr,fft2d,feature_distance,iip";

impl RunReport {
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        format!(
            "{},{},{:e},{},{:e},{:e},{},{}",
            self.run.display(),
            self.batch_size,
            self.defense_sigma,
            self.mask,
            self.metrics.psnr_mean,
            self.metrics.fft2d_distance,
            f(self.metrics.feature_distance),
            f(self.metrics.iip)
        )
    }
}

/// Index in `gallery` of an image bit-identical to each original.
pub fn locate_in_gallery(originals: &Tensor, gallery: &Tensor) -> Result<Vec<usize>> {
    let n = originals.shape().first().copied().unwrap_or(0);
    let g = gallery.shape().first().copied().unwrap_or(0);
    if originals.shape()[1..] != gallery.shape()[1..] {
        return Err(Error::contract("gallery images differ in shape from the originals"));
    }
    let per = originals.len() / n.max(1);
    (0..n)
        .map(|i| {
            let want = &originals.data()[i * per..(i + 1) * per];
            (0..g)
                .find(|&j| &gallery.data()[j * per..(j + 1) * per] == want)
                .ok_or_else(|| Error::contract(format!("original {i} is not in the gallery")))
        })
        .collect()
}

/// Scores the run's consensus against `originals`, writes `metrics.json`,
/// `metrics.csv` and one PPM/PGM panel per assigned pair. Identification
/// uses `gallery` when given, otherwise the originals themselves.
pub fn report_run(
    run: &Path,
    originals: &Tensor,
    prior: Option<&PriorCnn>,
    gallery: Option<&Tensor>,
) -> Result<RunReport> {
    let manifest = RunManifest::read(run.join(MANIFEST))?;
    let recon = load_images(run.join(CONSENSUS))?;
    let n = recon.shape()[0];
    let (gallery, index) = match gallery {
        Some(g) => (g, locate_in_gallery(originals, g)?),
        None => (originals, (0..n).collect()),
    };
    let metrics = evaluate(&recon, originals, prior, prior.map(|_| (gallery, index.as_slice())))?;
    let panel_dir = run.join(PANELS);
    std::fs::create_dir_all(&panel_dir)?;
    let mut panels = Vec::with_capacity(n);
    let ext = if recon.shape()[3] == 1 { "pgm" } else { "ppm" };
    for (i, &j) in metrics.assignment.iter().enumerate() {
        let panel = ppm::side_by_side(&[originals.index0(j)?, recon.index0(i)?.clamp(0.0, 1.0)])?;
        let path = panel_dir.join(format!("pair_{i}.{ext}"));
        ppm::write(&path, &panel)?;
        panels.push(path);
    }
    let capture = load_capture(run.join(CAPTURE))?;
    let report = RunReport {
        run: run.to_path_buf(),
        batch_size: n,
        defense_sigma: capture.defense.map_or(0.0, |d| d.sigma),
        mask: manifest.config.mask.to_string(),
        metrics,
        panels,
    };
    std::fs::write(run.join(METRICS_JSON), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(run.join(METRICS_CSV), format!("{REPORT_CSV_HEADER}\n{}\n", report.csv_row()))?;
    Ok(report)
}
