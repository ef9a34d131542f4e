//! Shared gradients, the noise defense, and label restoration.

use crate::error::{Error, Result};
use crate::models::{cross_entropy, vit_forward, Component, ParamKind, VitConfig, VitParams};
use crate::tensor::archive::Archive;
use crate::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseTarget {
    All,
    MsaOnly,
    LastThird,
}

impl DefenseTarget {
    fn code(self) -> f64 {
        match self {
            DefenseTarget::All => 0.0,
            DefenseTarget::MsaOnly => 1.0,
            DefenseTarget::LastThird => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(DefenseTarget::All),
            1 => Ok(DefenseTarget::MsaOnly),
            2 => Ok(DefenseTarget::LastThird),
            _ => Err(Error::format(format!("unknown defense target code {c}"))),
        }
    }

    /// Whether the parameter described by `kind` receives noise.
    pub fn covers(self, kind: ParamKind, depth: usize) -> bool {
        match (self, kind) {
            (DefenseTarget::All, _) => true,
            (DefenseTarget::MsaOnly, ParamKind::Block { component, .. }) => component == Component::Attention,
            (DefenseTarget::LastThird, ParamKind::Block { layer, .. }) => layer >= depth - depth / 3,
            _ => false,
        }
    }
}

impl fmt::Display for DefenseTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefenseTarget::All => "all",
            DefenseTarget::MsaOnly => "msa_only",
            DefenseTarget::LastThird => "last_third",
        })
    }
}

impl FromStr for DefenseTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(DefenseTarget::All),
            "msa_only" => Ok(DefenseTarget::MsaOnly),
            "last_third" => Ok(DefenseTarget::LastThird),
            other => Err(Error::contract(format!(
                "unknown defense target `{other}` (expected all, msa_only or last_third)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Defense {
    pub sigma: f64,
    pub target: DefenseTarget,
}

/// Per-parameter gradients of the batch-mean loss, as a client would share
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCapture {
    pub names: Vec<String>,
    pub grads: Vec<Tensor>,
    /// Hash of the victim config that produced the gradients.
    pub config_hash: String,
    pub batch_size: usize,
    pub defense: Option<Defense>,
}

const META_BATCH: &str = "meta/batch_size";
const META_HASH: &str = "meta/config_hash";
const META_SIGMA: &str = "meta/defense_sigma";
const META_TARGET: &str = "meta/defense_target";

impl GradientCapture {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }

    /// Checks the capture was made on a victim with this config.
    pub fn check_victim(&self, config: &VitConfig) -> Result<()> {
        if self.config_hash != config.hash() {
            return Err(Error::contract("capture was produced by a different victim config"));
        }
        let layout = config.layout();
        if layout.len() != self.grads.len() {
            return Err(Error::contract("capture entry count differs from the victim's parameters"));
        }
        for (slot, (name, g)) in layout.iter().zip(self.names.iter().zip(&self.grads)) {
            if &slot.name != name || slot.shape != g.shape() {
                return Err(Error::contract(format!("capture entry `{name}` does not match victim parameter `{}`", slot.name)));
            }
        }
        Ok(())
    }

    /// Gradients first, in enumeration order, then `meta/*` scalars. The
    /// config hash is stored as its 32 digest bytes.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        for (n, g) in self.names.iter().zip(&self.grads) {
            a.push(n.clone(), g.clone())?;
        }
        a.push(META_BATCH, Tensor::new([1], vec![self.batch_size as f64])?)?;
        let digest = hex::decode(&self.config_hash).map_err(|e| Error::format(format!("config hash: {e}")))?;
        a.push(META_HASH, Tensor::new([digest.len()], digest.iter().map(|&b| b as f64).collect())?)?;
        if let Some(d) = self.defense {
            a.push(META_SIGMA, Tensor::new([1], vec![d.sigma])?)?;
            a.push(META_TARGET, Tensor::new([1], vec![d.target.code()])?)?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let mut names = Vec::new();
        let mut grads = Vec::new();
        for e in a.entries() {
            if !e.name.starts_with("meta/") {
                names.push(e.name.clone());
                grads.push(e.tensor.clone());
            }
        }
        let batch_size = a.require(META_BATCH)?.item() as usize;
        if batch_size == 0 {
            return Err(Error::format("capture batch size must be at least 1"));
        }
        let bytes: Vec<u8> = a.require(META_HASH)?.data().iter().map(|&b| b as u8).collect();
        let defense = match (a.get(META_SIGMA), a.get(META_TARGET)) {
            (Some(s), Some(t)) => Some(Defense { sigma: s.item(), target: DefenseTarget::from_code(t.item())? }),
            (None, None) => None,
            _ => return Err(Error::format("capture defense metadata is incomplete")),
        };
        Ok(Self { names, grads, config_hash: hex::encode(bytes), batch_size, defense })
    }
}

/// Gradients of the batch-mean cross-entropy at `(x, labels)` by ordinary
/// reverse mode through the victim's forward pass.
pub fn capture_gradients(params: &VitParams, x: &Tensor, labels: &[usize]) -> Result<GradientCapture> {
    let cfg = &params.config;
    let tape = Tape::new();
    let p = params.leaves(&tape);
    let logits = vit_forward(cfg, &p, tape.constant(x.clone()))?;
    let loss = cross_entropy(logits, labels)?;
    tape.backward(loss)?;
    let grads = p
        .iter()
        .zip(cfg.layout())
        .map(|(v, slot)| v.grad().unwrap_or_else(|| Tensor::zeros(slot.shape)))
        .collect();
    Ok(GradientCapture {
        names: params.names(),
        grads,
        config_hash: cfg.hash(),
        batch_size: labels.len(),
        defense: None,
    })
}

/// Adds i.i.d. `N(0, sigma^2)` noise to the targeted entries. The noise
/// stream is a pure function of `seed`.
pub fn apply_defense(
    capture: &GradientCapture,
    config: &VitConfig,
    sigma: f64,
    target: DefenseTarget,
    seed: u64,
) -> Result<GradientCapture> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::contract(format!("defense sigma must be finite and non-negative, got {sigma}")));
    }
    capture.check_victim(config)?;
    let mut out = capture.clone();
    out.defense = Some(Defense { sigma, target });
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::contract(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (g, slot) in out.grads.iter_mut().zip(config.layout()) {
        if target.covers(slot.kind, config.depth) {
            g.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    Ok(out)
}

/// How labels are read off the classification-head gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// The `N` most negative entries of the head-bias gradient. The bias
    /// sees a constant positive input, so its gradient is negative exactly
    /// for the classes present in the batch while their summed predicted
    /// probability stays below one.
    #[default]
    HeadBias,
    /// The `N` head-weight columns with the smallest minima. Reliable only
    /// when the head's input features share a sign or the victim is
    /// confident with `N` much smaller than `K`.
    HeadWeightMin,
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelRule::HeadBias => "head_bias",
            LabelRule::HeadWeightMin => "head_weight_min",
        })
    }
}

fn head_gradient<'c>(capture: &'c GradientCapture, name: &str, shape: &[usize]) -> Result<&'c Tensor> {
    let g = capture
        .get(name)
        .ok_or_else(|| Error::contract(format!("capture has no `{name}` gradient")))?;
    if g.shape() != shape {
        return Err(Error::contract(format!("`{name}` gradient has shape {:?}, expected {shape:?}", g.shape())));
    }
    if g.data().iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateCapture(format!("`{name}` gradient is identically zero")));
    }
    Ok(g)
}

/// `N` distinct labels ranked by `rule`, most confident first.
pub fn restore_labels(capture: &GradientCapture, config: &VitConfig, rule: LabelRule) -> Result<Vec<usize>> {
    let n = capture.batch_size;
    let k = config.num_classes;
    if n > k {
        return Err(Error::contract(format!("cannot restore {n} distinct labels from {k} classes")));
    }
    let scores = match rule {
        LabelRule::HeadBias => head_gradient(capture, "vit/head/bias", &[k])?.data().to_vec(),
        LabelRule::HeadWeightMin => head_gradient(capture, "vit/head/weight", &[config.embed_dim, k])?.column_min()?,
    };
    let order = Tensor::new([k], scores)?.argsort();
    Ok(order[..n].to_vec())
}
