//! Which parameter gradients enter the matching loss.

use crate::error::{Error, Result};
use crate::models::{Component, ParamKind, VitConfig};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockPart {
    Msa,
    Mlp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    /// Every parameter gradient.
    #[default]
    All,
    /// Every parameter except those of transformer layers `from..=to`
    /// (1-based). `from > to` is the empty range.
    DropLayers { from: usize, to: usize },
    /// Only the attention (q/k/v/out) or MLP (fc1/fc2) weights of every
    /// layer. Embeddings, norms and the head are excluded.
    KeepComponent { component: BlockPart },
    /// The unmasked reference row of a component sweep; same set as `All`.
    KeepFull,
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::All => write!(f, "all"),
            MaskSpec::DropLayers { from, to } => write!(f, "drop_layers({from}..={to})"),
            MaskSpec::KeepComponent { component: BlockPart::Msa } => write!(f, "keep_msa"),
            MaskSpec::KeepComponent { component: BlockPart::Mlp } => write!(f, "keep_mlp"),
            MaskSpec::KeepFull => write!(f, "keep_full"),
        }
    }
}

/// Boolean selection over the parameter enumeration of `config`.
pub fn resolve_mask(spec: &MaskSpec, config: &VitConfig) -> Result<Vec<bool>> {
    let layout = config.layout();
    let keep: Vec<bool> = match spec {
        MaskSpec::All | MaskSpec::KeepFull => vec![true; layout.len()],
        MaskSpec::DropLayers { from, to } => {
            let (from, to) = (*from, *to);
            if from <= to && (from == 0 || to > config.depth) {
                return Err(Error::contract(format!(
                    "layer range {from}..={to} outside 1..={}",
                    config.depth
                )));
            }
            layout
                .iter()
                .map(|s| match s.kind {
                    ParamKind::Block { layer, .. } => !(from..=to).contains(&(layer + 1)),
                    _ => true,
                })
                .collect()
        }
        MaskSpec::KeepComponent { component } => {
            let want = match component {
                BlockPart::Msa => Component::Attention,
                BlockPart::Mlp => Component::Mlp,
            };
            layout
                .iter()
                .map(|s| matches!(s.kind, ParamKind::Block { component, .. } if component == want))
                .collect()
        }
    };
    if !keep.contains(&true) {
        return Err(Error::contract(format!("mask {spec} selects no parameters")));
    }
    Ok(keep)
}

/// Names of the selected parameters, in enumeration order.
pub fn resolve_mask_names(spec: &MaskSpec, config: &VitConfig) -> Result<Vec<String>> {
    let keep = resolve_mask(spec, config)?;
    Ok(config
        .layout()
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s.name))
        .collect())
}

/// 1-based inclusive layer range of third `k` (0, 1, 2) of a depth-`depth`
/// encoder. Empty when `depth < 3` leaves that third without layers.
pub fn third(depth: usize, k: usize) -> (usize, usize) {
    (k * depth / 3 + 1, (k + 1) * depth / 3)
}
