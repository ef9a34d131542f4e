//! The victim vision transformer.
//!
//! Pre-norm encoder: patch embedding, class token, learned positional
//! embedding, `depth` blocks of (LN, MSA, residual, LN, MLP, residual),
//! final LN on the class token, linear head.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
/// Parameters per transformer block.
pub const PARAMS_PER_BLOCK: usize = 16;
const PARAMS_BEFORE_BLOCKS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 8,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.image_size,
            self.channels,
            self.patch_size,
            self.embed_dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.num_classes,
        ];
        if all.contains(&0) {
            return Err(Error::contract("every ViT dimension must be positive"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::contract(format!(
                "patch size {} does not divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::contract(format!(
                "{} heads do not divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn image_shape(&self, n: usize) -> [usize; 4] {
        [n, self.image_size, self.image_size, self.channels]
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn layout(&self) -> Vec<ParamSlot> {
        let (d, k) = (self.embed_dim, self.num_classes);
        let mut slots = vec![
            ParamSlot::new("vit/patch_embed/weight", vec![self.patch_dim(), d], ParamKind::PatchEmbed),
            ParamSlot::new("vit/patch_embed/bias", vec![d], ParamKind::PatchEmbed),
            ParamSlot::new("vit/cls_token", vec![1, d], ParamKind::ClassToken),
            ParamSlot::new("vit/pos_embed", vec![self.tokens(), d], ParamKind::PosEmbed),
        ];
        for l in 0..self.depth {
            let p = |s: &str| format!("vit/blocks/{l}/{s}");
            let layer = |component| ParamKind::Block { layer: l, component };
            let m = self.mlp_dim();
            for (name, shape, c) in [
                ("norm1/weight", vec![d], Component::Norm1),
                ("norm1/bias", vec![d], Component::Norm1),
                ("attn/q/weight", vec![d, d], Component::Attention),
                ("attn/q/bias", vec![d], Component::Attention),
                ("attn/k/weight", vec![d, d], Component::Attention),
                ("attn/k/bias", vec![d], Component::Attention),
                ("attn/v/weight", vec![d, d], Component::Attention),
                ("attn/v/bias", vec![d], Component::Attention),
                ("attn/out/weight", vec![d, d], Component::Attention),
                ("attn/out/bias", vec![d], Component::Attention),
                ("norm2/weight", vec![d], Component::Norm2),
                ("norm2/bias", vec![d], Component::Norm2),
                ("mlp/fc1/weight", vec![d, m], Component::Mlp),
                ("mlp/fc1/bias", vec![m], Component::Mlp),
                ("mlp/fc2/weight", vec![m, d], Component::Mlp),
                ("mlp/fc2/bias", vec![d], Component::Mlp),
            ] {
                slots.push(ParamSlot::new(&p(name), shape, layer(c)));
            }
        }
        slots.push(ParamSlot::new("vit/norm/weight", vec![d], ParamKind::FinalNorm));
        slots.push(ParamSlot::new("vit/norm/bias", vec![d], ParamKind::FinalNorm));
        slots.push(ParamSlot::new("vit/head/weight", vec![d, k], ParamKind::Head));
        slots.push(ParamSlot::new("vit/head/bias", vec![k], ParamKind::Head));
        slots
    }

    pub fn num_params(&self) -> usize {
        PARAMS_BEFORE_BLOCKS + PARAMS_PER_BLOCK * self.depth + 4
    }

    /// Index of the classification-head weight in the enumeration.
    pub fn head_weight_index(&self) -> usize {
        self.num_params() - 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Norm1,
    Attention,
    Norm2,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    PatchEmbed,
    ClassToken,
    PosEmbed,
    Block { layer: usize, component: Component },
    FinalNorm,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSlot {
    fn new(name: &str, shape: Vec<usize>, kind: ParamKind) -> Self {
        Self { name: name.to_string(), shape, kind }
    }
}

/// Victim weights in the fixed enumeration order of [`VitConfig::layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct VitParams {
    pub config: VitConfig,
    pub tensors: Vec<Arc<Tensor>>,
}

impl VitParams {
    /// Truncated-normal weights, zero biases, class token and positional
    /// embedding, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(config: &VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|slot| {
                let t = if slot.name.ends_with("norm1/weight")
                    || slot.name.ends_with("norm2/weight")
                    || slot.name == "vit/norm/weight"
                {
                    Tensor::ones(slot.shape)
                } else if slot.name.ends_with("/weight") {
                    Tensor::trunc_normal(slot.shape, INIT_STD, rng)
                } else {
                    Tensor::zeros(slot.shape)
                };
                Arc::new(t)
            })
            .collect();
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn from_tensors(config: VitConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (slot, t) in layout.iter().zip(&tensors) {
            if slot.shape != t.shape() {
                return Err(Error::contract(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    slot.name,
                    t.shape(),
                    slot.shape
                )));
            }
        }
        Ok(Self { config, tensors: tensors.into_iter().map(Arc::new).collect() })
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|s| s.name).collect()
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.constant_arc(Arc::clone(t))).collect()
    }

    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.leaf_arc(Arc::clone(t))).collect()
    }
}

/// Flat source index of every patch element, laid out as
/// `[n, patch, (py, px, c)]` with patches in row-major grid order.
pub fn patch_index(cfg: &VitConfig, n: usize) -> Arc<Vec<usize>> {
    let (h, p, c, g) = (cfg.image_size, cfg.patch_size, cfg.channels, cfg.grid());
    let mut idx = Vec::with_capacity(n * h * h * c);
    for b in 0..n {
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            idx.push(((b * h + gy * p + py) * h + gx * p + px) * c + ch);
                        }
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

pub(crate) fn check_input(cfg: &VitConfig, x: &Var<'_>) -> Result<usize> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != cfg.image_shape(1)[1..] {
        return Err(Error::contract(format!(
            "input shape {s:?} does not match [N, {}, {}, {}]",
            cfg.image_size, cfg.image_size, cfg.channels
        )));
    }
    Ok(s[0])
}

pub(crate) fn check_params(cfg: &VitConfig, params: &[Var<'_>]) -> Result<()> {
    if params.len() != cfg.num_params() {
        return Err(Error::contract(format!(
            "expected {} parameters, got {}",
            cfg.num_params(),
            params.len()
        )));
    }
    Ok(())
}

fn split_heads<'t>(t: Var<'t>, n: usize, cfg: &VitConfig) -> Result<Var<'t>> {
    t.reshape(&[n, cfg.tokens(), cfg.heads, cfg.head_dim()])?.permute(&[0, 2, 1, 3])
}

fn merge_heads<'t>(t: Var<'t>, n: usize, cfg: &VitConfig) -> Result<Var<'t>> {
    t.permute(&[0, 2, 1, 3])?.reshape(&[n, cfg.tokens(), cfg.embed_dim])
}

fn affine_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let last = x.shape().len() - 1;
    x.layer_norm(last, LAYER_NORM_EPS)?.mul(gamma)?.add(beta)
}

/// Class logits `[N, K]` for images `[N, H, W, C]`.
pub fn vit_forward<'t>(cfg: &VitConfig, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
    check_params(cfg, params)?;
    let n = check_input(cfg, &x)?;
    let (d, t0) = (cfg.embed_dim, cfg.num_patches());
    let patches = x.gather(patch_index(cfg, n), &[n, t0, cfg.patch_dim()])?;
    let tok = patches.matmul(params[0])?.add(params[1])?;
    let cls = params[2].broadcast_to(&[n, 1, d])?;
    let mut z = Var::concat(&[cls, tok], 1)?.add(params[3])?;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    for l in 0..cfg.depth {
        let p = &params[PARAMS_BEFORE_BLOCKS + l * PARAMS_PER_BLOCK..][..PARAMS_PER_BLOCK];
        let h = affine_norm(z, p[0], p[1])?;
        let q = split_heads(h.matmul(p[2])?.add(p[3])?, n, cfg)?;
        let k = split_heads(h.matmul(p[4])?.add(p[5])?, n, cfg)?;
        let v = split_heads(h.matmul(p[6])?.add(p[7])?, n, cfg)?;
        let att = q.matmul_t(k, false, true)?.scale(scale)?.softmax(3)?;
        let o = merge_heads(att.matmul(v)?, n, cfg)?;
        z = z.add(o.matmul(p[8])?.add(p[9])?)?;
        let h2 = affine_norm(z, p[10], p[11])?;
        let m = h2.matmul(p[12])?.add(p[13])?.gelu()?.matmul(p[14])?.add(p[15])?;
        z = z.add(m)?;
    }
    let tail = &params[PARAMS_BEFORE_BLOCKS + cfg.depth * PARAMS_PER_BLOCK..];
    let c = z.slice(1, 0, 1)?.reshape(&[n, d])?;
    affine_norm(c, tail[0], tail[1])?.matmul(tail[2])?.add(tail[3])
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let s = logits.shape();
    let [n, k] = s[..] else {
        return Err(Error::contract(format!("logits must be [N, K], got {s:?}")));
    };
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    logits.log_softmax(1)?.gather(Arc::new(idx), &[n])?.mean_all()?.neg()
}

/// Forward without gradient tracking.
pub fn predict(params: &VitParams, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.constants(&tape);
    let logits = vit_forward(&params.config, &p, tape.constant(x.clone()))?;
    Ok((*logits.value()).clone())
}
