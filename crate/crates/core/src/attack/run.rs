//! The optimisation loop over one or more seeds.

use super::capture::{restore_labels, GradientCapture};
use super::config::{scheduler, AttackConfig};
use super::losses::{
    consensus, gradient_matching_loss, image_prior_loss, l2_tv_loss, patch_prior_loss, registration_loss,
};
use crate::ablation::resolve_mask;
use crate::error::{Error, Result};
use crate::models::{PriorCnn, VitParams};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

/// One ledger row. Loss terms are unweighted; `total` is the weighted
/// objective that was minimised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LedgerRow {
    pub t: usize,
    pub l_grad: f64,
    pub r_image: f64,
    pub r_patch: f64,
    pub r_reg: f64,
    pub r_tv_l2: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LEDGER_HEADER: &str = "t,L_grad,R_image,R_patch,R_reg,R_tv_l2,total,lr";

impl LedgerRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.t, self.l_grad, self.r_image, self.r_patch, self.r_reg, self.r_tv_l2, self.total, self.lr
        )
    }
}

pub fn ledger_csv(rows: &[LedgerRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(LEDGER_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    /// Final iterate, unclamped.
    pub recon: Tensor,
    pub ledger: Vec<LedgerRow>,
    /// Set when the run stopped early on a non-finite value.
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub labels: Vec<usize>,
    pub seeds: Vec<SeedResult>,
    /// Pixel-mean of the final per-seed iterates, unclamped.
    pub consensus: Tensor,
    pub wall_s: f64,
    pub warnings: Vec<String>,
}

impl ReconstructionResult {
    pub fn failure(&self) -> Option<&str> {
        self.seeds.iter().find_map(|s| s.failure.as_deref())
    }
}

/// Unweighted values of the individual terms plus the weighted objective.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub row: LedgerRow,
}

/// Everything the per-iteration objective needs besides the iterate.
pub struct AttackContext<'a> {
    pub params: &'a VitParams,
    pub capture: &'a GradientCapture,
    pub prior: Option<&'a PriorCnn>,
    pub cfg: &'a AttackConfig,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl<'a> AttackContext<'a> {
    pub fn new(
        params: &'a VitParams,
        capture: &'a GradientCapture,
        prior: Option<&'a PriorCnn>,
        cfg: &'a AttackConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        capture.check_victim(&params.config)?;
        if cfg.losses.image_prior && prior.is_none() {
            return Err(Error::contract("the image prior is enabled but no prior network was given"));
        }
        let mask = resolve_mask(&cfg.mask, &params.config)?;
        let labels = restore_labels(capture, &params.config, cfg.label_rule)?;
        Ok(Self { params, capture, prior, cfg, labels, mask })
    }

    /// `Γ(t)·L_grad + Υ(t)·R_image + α1·R_patch + α2·R_reg + α3·R_tv_l2`
    /// at iteration `t`, with disabled terms left out.
    pub fn objective<'t>(&self, x: Var<'t>, consensus: Option<&Tensor>, t: usize) -> Result<Objective<'t>> {
        let cfg = self.cfg;
        let on = cfg.losses;
        let w = scheduler(t, cfg);
        let tape = x.tape();
        let mut total = tape.constant(Tensor::scalar(0.0));
        let mut row = LedgerRow { t, lr: cosine_lr(cfg.lr, t, cfg.iterations), ..LedgerRow::default() };
        if on.grad {
            let l = gradient_matching_loss(x, &self.labels, self.params, self.capture, &self.mask)?;
            row.l_grad = l.item();
            total = total.add(l.scale(w.grad)?)?;
        }
        if on.image_prior {
            let prior = self.prior.expect("checked at construction");
            let l = image_prior_loss(x, prior)?;
            row.r_image = l.item();
            total = total.add(l.scale(w.image)?)?;
        }
        if on.patch {
            let l = patch_prior_loss(x, self.params.config.patch_size)?;
            row.r_patch = l.item();
            total = total.add(l.scale(cfg.alpha_patch)?)?;
        }
        if on.reg {
            if let Some(c) = consensus {
                let l = registration_loss(x, c)?;
                row.r_reg = l.item();
                total = total.add(l.scale(cfg.alpha_reg)?)?;
            }
        }
        if on.tv_l2 {
            let l = l2_tv_loss(x)?;
            row.r_tv_l2 = l.item();
            total = total.add(l.scale(cfg.alpha_tv_l2)?)?;
        }
        row.total = total.item();
        Ok(Objective { total, row })
    }
}

impl Default for LedgerRow {
    fn default() -> Self {
        Self { t: 0, l_grad: 0.0, r_image: 0.0, r_patch: 0.0, r_reg: 0.0, r_tv_l2: 0.0, total: 0.0, lr: 0.0 }
    }
}

/// Uniform `[0, 1)` start for `seed`.
pub fn initial_batch(shape: [usize; 4], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

struct Worker {
    seed: u64,
    x: Tensor,
    adam: Adam,
    ledger: Vec<LedgerRow>,
    failure: Option<Error>,
}

impl Worker {
    fn step(&mut self, ctx: &AttackContext, consensus: Option<&Tensor>, t: usize) -> Result<()> {
        let tape = Tape::new();
        let x = tape.leaf(self.x.clone());
        let obj = ctx.objective(x, consensus, t)?;
        if !obj.row.total.is_finite() {
            return Err(Error::numeric("objective", format!("non-finite total at t={t}")));
        }
        let grad = if obj.total.requires_grad() {
            tape.backward(obj.total)?;
            x.grad().unwrap_or_else(|| Tensor::zeros(self.x.shape().to_vec()))
        } else {
            Tensor::zeros(self.x.shape().to_vec())
        };
        if !grad.is_finite() {
            return Err(Error::numeric("objective", format!("non-finite gradient at t={t}")));
        }
        let mut next = [self.x.clone()];
        self.adam.step(&mut next, &[grad], obj.row.lr);
        let [next] = next;
        if !next.is_finite() {
            return Err(Error::numeric("adam", format!("non-finite iterate at t={t}")));
        }
        self.x = next;
        self.ledger.push(obj.row);
        Ok(())
    }
}

/// Runs the attack from every seed in `cfg.seeds`. Seeds advance
/// independently and meet every `cfg.consensus_every()` iterations to
/// refresh the shared consensus, so the result does not depend on thread
/// scheduling. A seed that hits a non-finite value stops and keeps its
/// ledger up to that point.
pub fn run_attack(
    capture: &GradientCapture,
    params: &VitParams,
    prior: Option<&PriorCnn>,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult> {
    let start = Instant::now();
    let ctx = AttackContext::new(params, capture, prior, cfg)?;
    let shape = params.config.image_shape(capture.batch_size);
    let mut warnings = Vec::new();
    if cfg.losses.image_prior && capture.batch_size < 2 {
        warnings.push("batch size 1: image-prior statistics pool over pixels of a single image".to_string());
    }
    let mut workers: Vec<Worker> = cfg
        .seeds
        .iter()
        .map(|&seed| Worker {
            seed,
            x: initial_batch(shape, seed),
            adam: Adam::with_config(cfg.adam),
            ledger: Vec::with_capacity(cfg.iterations),
            failure: None,
        })
        .collect();
    let every = cfg.consensus_every();
    let mut t = 1;
    while t <= cfg.iterations {
        let end = (t + every - 1).min(cfg.iterations);
        let shared = if workers.len() >= 2 {
            let xs: Vec<Tensor> = workers.iter().map(|w| w.x.clone()).collect();
            Some(consensus(&xs)?)
        } else {
            None
        };
        workers.par_iter_mut().for_each(|w| {
            if w.failure.is_some() {
                return;
            }
            for step in t..=end {
                if let Err(e) = w.step(&ctx, shared.as_ref(), step) {
                    w.failure = Some(e);
                    return;
                }
            }
        });
        if let Some(w) = workers.iter_mut().find(|w| w.failure.as_ref().is_some_and(|e| !e.is_numeric())) {
            return Err(w.failure.take().unwrap());
        }
        t = end + 1;
    }
    let finals: Vec<Tensor> = workers.iter().map(|w| w.x.clone()).collect();
    let consensus = consensus(&finals)?;
    let seeds = workers
        .into_iter()
        .map(|w| SeedResult { seed: w.seed, recon: w.x, ledger: w.ledger, failure: w.failure.map(|e| e.to_string()) })
        .collect();
    Ok(ReconstructionResult {
        labels: ctx.labels,
        seeds,
        consensus,
        wall_s: start.elapsed().as_secs_f64(),
        warnings,
    })
}
