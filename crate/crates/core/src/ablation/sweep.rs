//! Paired attack sweeps. Every variant of an axis sees the same batches and
//! the same attack seeds in trial `k`, so per-trial differences come from
//! the variant alone.

use super::mask::{third, BlockPart, MaskSpec};
use crate::attack::{apply_defense, capture_gradients, run_attack, AttackConfig, DefenseTarget, LossToggles};
use crate::error::{Error, Result};
use crate::io::ToyDataset;
use crate::metrics::{evaluate, MetricReport};
use crate::models::{PriorCnn, VitParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LayerThirds,
    Components,
    LossTerms,
    BatchSize,
    DefenseSigma,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 5] =
        [SweepAxis::LayerThirds, SweepAxis::Components, SweepAxis::LossTerms, SweepAxis::BatchSize, SweepAxis::DefenseSigma];
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::LayerThirds => "layer_thirds",
            SweepAxis::Components => "components",
            SweepAxis::LossTerms => "loss_terms",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::DefenseSigma => "defense_sigma",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL.into_iter().find(|a| a.to_string() == s).ok_or_else(|| {
            Error::contract(format!(
                "unknown sweep axis `{s}` (expected layer_thirds, components, loss_terms, batch_size or defense_sigma)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Base attack; each variant overrides one aspect of it. Defaults to
    /// [`AttackConfig::desk_scale`].
    pub attack: AttackConfig,
    /// Batch size on every axis except `batch_size`.
    pub batch_size: usize,
    pub batch_sizes: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub defense_target: DefenseTarget,
    /// Trial `k` uses seed `seed + k` for its batch draw and defense noise.
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::desk_scale(),
            batch_size: 4,
            batch_sizes: vec![1, 2, 4, 8],
            sigmas: vec![0.0, 1e-4, 1e-3, 1e-2],
            defense_target: DefenseTarget::All,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        if self.batch_size == 0 || self.batch_sizes.contains(&0) {
            return Err(Error::contract("batch sizes must be at least 1"));
        }
        if self.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::contract("defense sigmas must be finite and non-negative"));
        }
        Ok(())
    }

    /// Attack seeds of trial `trial`: the base seeds shifted so trials
    /// never share a start.
    pub fn attack_seeds(&self, trial: usize) -> Vec<u64> {
        let stride = self.attack.seeds.iter().max().map_or(1, |m| m + 1);
        self.attack.seeds.iter().map(|s| s + stride * trial as u64).collect()
    }
}

/// One row of an axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub attack: AttackConfig,
    pub batch_size: usize,
    pub sigma: f64,
}

/// The fixed variant list of `axis` for a victim of the given depth.
pub fn variants(axis: SweepAxis, cfg: &SweepConfig, depth: usize) -> Result<Vec<Variant>> {
    let base = |name: String, attack: AttackConfig| Variant { name, attack, batch_size: cfg.batch_size, sigma: 0.0 };
    let with_mask = |mask: MaskSpec| AttackConfig { mask, ..cfg.attack.clone() };
    let with_losses = |losses: LossToggles| AttackConfig { losses, ..cfg.attack.clone() };
    Ok(match axis {
        SweepAxis::LayerThirds => {
            if depth < 3 {
                return Err(Error::contract(format!("layer thirds need depth >= 3, got {depth}")));
            }
            let mut out = vec![base("all".into(), with_mask(MaskSpec::All))];
            for (k, label) in ["first", "middle", "last"].into_iter().enumerate() {
                let (from, to) = third(depth, k);
                out.push(base(format!("drop_{label}_third"), with_mask(MaskSpec::DropLayers { from, to })));
            }
            out
        }
        SweepAxis::Components => vec![
            base("full".into(), with_mask(MaskSpec::KeepFull)),
            base("msa_only".into(), with_mask(MaskSpec::KeepComponent { component: BlockPart::Msa })),
            base("mlp_only".into(), with_mask(MaskSpec::KeepComponent { component: BlockPart::Mlp })),
        ],
        SweepAxis::LossTerms => {
            let mut on = LossToggles {
                grad: true,
                image_prior: false,
                patch: false,
                reg: true,
                tv_l2: true,
                scheduler: false,
            };
            let mut out = vec![base("grad_reg".into(), with_losses(on))];
            on.image_prior = true;
            out.push(base("plus_image_prior".into(), with_losses(on)));
            on.scheduler = true;
            out.push(base("plus_scheduler".into(), with_losses(on)));
            on.patch = true;
            out.push(base("plus_patch".into(), with_losses(on)));
            out
        }
        SweepAxis::BatchSize => cfg
            .batch_sizes
            .iter()
            .map(|&n| Variant { batch_size: n, ..base(format!("n={n}"), cfg.attack.clone()) })
            .collect(),
        SweepAxis::DefenseSigma => cfg
            .sigmas
            .iter()
            .map(|&s| Variant { sigma: s, ..base(format!("sigma={s:e}"), cfg.attack.clone()) })
            .collect(),
    })
}

/// `n` dataset indices with distinct labels, in the order of a seeded
/// shuffle. Smaller `n` under the same seed gives a prefix.
pub fn draw_batch(dataset: &ToyDataset, n: usize, seed: u64) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut seen = vec![false; dataset.spec.num_classes];
    let mut out = Vec::with_capacity(n);
    for i in order {
        let label = dataset.labels[i];
        if !seen[label] {
            seen[label] = true;
            out.push(i);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(Error::contract(format!("dataset has fewer than {n} distinct labels")))
}

/// Victim, prior and image pool shared by every cell.
pub struct SweepInputs<'a> {
    pub victim: &'a VitParams,
    /// Needed by image-prior variants and by the feature metrics.
    pub prior: Option<&'a PriorCnn>,
    /// Batches are drawn from it; it is also the identification gallery.
    pub dataset: &'a ToyDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub variant: String,
    pub trial: usize,
    pub seed: u64,
    pub psnr: Option<f64>,
    pub fft2d: Option<f64>,
    pub feature_distance: Option<f64>,
    pub iip: Option<f64>,
    pub wall_s: f64,
    pub error: Option<String>,
}

pub const SWEEP_HEADER: &str = "axis,variant,trial,seed,psnr,fft2d,feature_distance,iip,wall_s";

impl SweepRow {
    /// Metrics of a failed cell are left empty.
    pub fn csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.axis,
            self.variant,
            self.trial,
            self.seed,
            f(self.psnr),
            f(self.fft2d),
            f(self.feature_distance),
            f(self.iip),
            self.wall_s
        )
    }
}

/// Mean and population standard deviation over the cells that produced a
/// value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Moments {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), count: v.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub trials: usize,
    pub failures: usize,
    pub psnr: Option<Moments>,
    pub fft2d: Option<Moments>,
    pub feature_distance: Option<Moments>,
    pub iip: Option<Moments>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub trials: usize,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<VariantSummary>,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == name)
    }

    /// Mean PSNR of a variant, if any of its cells succeeded.
    pub fn mean_psnr(&self, name: &str) -> Option<f64> {
        self.variant(name)?.psnr.map(|m| m.mean)
    }
}

fn summarize(names: &[String], rows: &[SweepRow]) -> Vec<VariantSummary> {
    names
        .iter()
        .map(|name| {
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| &r.variant == name).collect();
            let pick = |f: fn(&SweepRow) -> Option<f64>| Moments::of(mine.iter().filter_map(|r| f(r)));
            VariantSummary {
                variant: name.clone(),
                trials: mine.len(),
                failures: mine.iter().filter(|r| r.error.is_some()).count(),
                psnr: pick(|r| r.psnr),
                fft2d: pick(|r| r.fft2d),
                feature_distance: pick(|r| r.feature_distance),
                iip: pick(|r| r.iip),
            }
        })
        .collect()
}

fn run_cell(inputs: &SweepInputs, cfg: &SweepConfig, variant: &Variant, trial: usize) -> Result<MetricReport> {
    let seed = cfg.seed + trial as u64;
    let indices = draw_batch(inputs.dataset, variant.batch_size, seed)?;
    let (x, labels) = inputs.dataset.batch(&indices)?;
    let mut capture = capture_gradients(inputs.victim, &x, &labels)?;
    if variant.sigma > 0.0 {
        capture = apply_defense(&capture, &inputs.victim.config, variant.sigma, cfg.defense_target, seed)?;
    }
    let attack = AttackConfig { seeds: cfg.attack_seeds(trial), ..variant.attack.clone() };
    let result = run_attack(&capture, inputs.victim, inputs.prior, &attack)?;
    if let Some(msg) = result.failure() {
        return Err(Error::numeric("attack", msg.to_string()));
    }
    let gallery = (&inputs.dataset.images, indices.as_slice());
    evaluate(&result.consensus, &x, inputs.prior, inputs.prior.map(|_| gallery))
}

/// One attack per (variant, trial). Cells run concurrently on the current
/// rayon pool; a failing cell is recorded in its row and the sweep goes on.
pub fn run_sweep(inputs: &SweepInputs, axis: SweepAxis, cfg: &SweepConfig, trials: usize) -> Result<SweepReport> {
    if trials == 0 {
        return Err(Error::contract("a sweep needs at least one trial"));
    }
    cfg.validate()?;
    let variants = variants(axis, cfg, inputs.victim.config.depth)?;
    let cells: Vec<(&Variant, usize)> =
        variants.iter().flat_map(|v| (0..trials).map(move |k| (v, k))).collect();
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(variant, trial)| {
            let start = Instant::now();
            let outcome = run_cell(inputs, cfg, variant, trial);
            let mut row = SweepRow {
                axis,
                variant: variant.name.clone(),
                trial,
                seed: cfg.seed + trial as u64,
                psnr: None,
                fft2d: None,
                feature_distance: None,
                iip: None,
                wall_s: start.elapsed().as_secs_f64(),
                error: None,
            };
            match outcome {
                Ok(m) => {
                    row.psnr = Some(m.psnr_mean);
                    row.fft2d = Some(m.fft2d_distance);
                    row.feature_distance = m.feature_distance;
                    row.iip = m.iip;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    let names: Vec<String> = variants.iter().map(|v| v.name.clone()).collect();
    Ok(SweepReport { axis, trials, summary: summarize(&names, &rows), rows })
}
