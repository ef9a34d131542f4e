//! Terms of the attack objective. All take the candidate batch `x` as a var
//! on the caller's tape and are differentiable with respect to it.

use super::capture::GradientCapture;
use crate::error::{Error, Result};
use crate::models::{param_gradients, PriorCnn, VitParams};
use crate::tensor::{Tensor, Var};

/// Smoothing of the per-entry residual norm: `sqrt(|r|^2 + eps^2) - eps`.
/// Equals the plain norm up to `eps` and keeps the gradient finite and
/// vanishing as the residual goes to zero.
pub const MATCH_NORM_EPS: f64 = 1e-6;

fn smooth_norm<'t>(r: Var<'t>) -> Result<Var<'t>> {
    r.sum_squares()?
        .add_scalar(MATCH_NORM_EPS * MATCH_NORM_EPS)?
        .sqrt()?
        .add_scalar(-MATCH_NORM_EPS)
}

/// Sum over selected parameters of the distance between the victim's
/// gradient at `(x, labels)` and the captured gradient.
pub fn gradient_matching_loss<'t>(
    x: Var<'t>,
    labels: &[usize],
    params: &VitParams,
    capture: &GradientCapture,
    mask: &[bool],
) -> Result<Var<'t>> {
    capture.check_victim(&params.config)?;
    let tape = x.tape();
    if mask.len() != capture.grads.len() {
        return Err(Error::contract("mask length differs from parameter count"));
    }
    if !mask.contains(&true) {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let p = params.constants(tape);
    let pg = param_gradients(&params.config, &p, x, labels, mask)?;
    let mut total: Option<Var<'t>> = None;
    for ((g, target), &keep) in pg.grads.iter().zip(&capture.grads).zip(mask) {
        if !keep {
            continue;
        }
        let g = g.expect("requested gradients are present");
        let term = smooth_norm(g.sub(tape.constant(target.clone()))?)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("mask selects at least one entry"))
}

/// Distance of the prior CNN's per-layer batch statistics to its stored
/// running statistics, mean and variance terms each as an l2 norm.
pub fn image_prior_loss<'t>(x: Var<'t>, prior: &PriorCnn) -> Result<Var<'t>> {
    let tape = x.tape();
    let stats = prior.forward_stats(x)?;
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (l, s) in stats.iter().enumerate() {
        let dm = s.mean.sub(tape.constant(prior.stats.mean[l].clone()))?.l2_norm()?;
        let dv = s.var.sub(tape.constant(prior.stats.var[l].clone()))?.l2_norm()?;
        total = total.add(dm)?.add(dv)?;
    }
    Ok(total)
}

/// Seam penalty: for every internal patch boundary, the l2 norm (over the
/// whole batch slab) of the difference between the two pixel rows or
/// columns that meet there.
pub fn patch_prior_loss<'t>(x: Var<'t>, patch: usize) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!("expected [N, H, W, C], got {s:?}")));
    }
    if patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(Error::contract(format!("patch size {patch} does not tile {}x{}", s[1], s[2])));
    }
    let mut total = x.tape().constant(Tensor::scalar(0.0));
    for axis in [1, 2] {
        for k in 1..s[axis] / patch {
            let a = x.slice(axis, patch * k, 1)?;
            let b = x.slice(axis, patch * k - 1, 1)?;
            total = total.add(a.sub(b)?.l2_norm()?)?;
        }
    }
    Ok(total)
}

/// `|x|_2` plus the l2 norms of the horizontal and vertical first
/// differences.
pub fn l2_tv_loss<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!("expected [N, H, W, C], got {s:?}")));
    }
    let mut total = x.l2_norm()?;
    for axis in [1, 2] {
        if s[axis] > 1 {
            let d = x.slice(axis, 1, s[axis] - 1)?.sub(x.slice(axis, 0, s[axis] - 1)?)?;
            total = total.add(d.l2_norm()?)?;
        }
    }
    Ok(total)
}

/// Distance to the (constant) consensus batch.
pub fn registration_loss<'t>(x: Var<'t>, consensus: &Tensor) -> Result<Var<'t>> {
    x.sub(x.tape().constant(consensus.clone()))?.l2_norm()
}

/// Pixel-mean of the per-seed reconstructions. Seeds are aligned by the
/// identity map, so this is also the registered consensus.
pub fn consensus(seeds: &[Tensor]) -> Result<Tensor> {
    let first = seeds.first().ok_or_else(|| Error::contract("consensus of zero seeds"))?;
    let mut acc = Tensor::zeros(first.shape().to_vec());
    for s in seeds {
        if s.shape() != first.shape() {
            return Err(Error::contract(format!(
                "seed shapes differ: {:?} vs {:?}",
                s.shape(),
                first.shape()
            )));
        }
        acc = acc.add(s)?;
    }
    Ok(acc.scale(1.0 / seeds.len() as f64))
}
