//! Victim parameter gradients as an explicit, differentiable graph.
//!
//! The tape only does first-order reverse mode. Gradient matching needs the
//! derivative of `∇_W L(x, y)` with respect to `x`, so here the backward pass
//! of the ViT is written out with ordinary tape ops. The resulting gradient
//! vars are functions of the input and can be differentiated once more by a
//! normal [`Tape::backward`](crate::tensor::Tape::backward).
//!
//! Layer norms are expanded into primitive ops so that their backward can be
//! expressed in differentiable terms; the plain forward in
//! [`super::vit::vit_forward`] uses the fused `layer_norm` op instead, which
//! makes the two routes independent of each other.

use super::vit::{check_input, check_params, patch_index, VitConfig, LAYER_NORM_EPS, PARAMS_PER_BLOCK};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};
use std::sync::Arc;

struct Norm<'t> {
    xhat: Var<'t>,
    rstd: Var<'t>,
    gamma: Var<'t>,
}

fn norm_forward<'t>(z: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<(Var<'t>, Norm<'t>)> {
    let last = z.shape().len() - 1;
    let mu = z.mean(&[last], true)?;
    let centered = z.sub(mu)?;
    let var = centered.square()?.mean(&[last], true)?;
    let one = z.tape().constant(Tensor::scalar(1.0));
    let rstd = one.div(var.add_scalar(LAYER_NORM_EPS)?.sqrt()?)?;
    let xhat = centered.mul(rstd)?;
    let y = xhat.mul(gamma)?.add(beta)?;
    Ok((y, Norm { xhat, rstd, gamma }))
}

/// Returns (d input, d gamma, d beta).
fn norm_backward<'t>(dy: Var<'t>, n: &Norm<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let rank = dy.shape().len();
    let lead: Vec<usize> = (0..rank - 1).collect();
    let last = rank - 1;
    let dgamma = dy.mul(n.xhat)?.sum(&lead, false)?;
    let dbeta = dy.sum(&lead, false)?;
    let dxh = dy.mul(n.gamma)?;
    let m1 = dxh.mean(&[last], true)?;
    let m2 = dxh.mul(n.xhat)?.mean(&[last], true)?;
    let dz = n.rstd.mul(dxh.sub(m1)?.sub(n.xhat.mul(m2)?)?)?;
    Ok((dz, dgamma, dbeta))
}

/// `y = x W + b` with `x` of rank ≥ 2 and `W` a matrix.
fn linear_forward<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add(b)
}

/// Returns (d input, d weight, d bias). Weight and bias gradients are only
/// built when `want` is set.
fn linear_backward<'t>(
    dy: Var<'t>,
    x: Var<'t>,
    w: Var<'t>,
    want: bool,
) -> Result<(Var<'t>, Option<(Var<'t>, Var<'t>)>)> {
    let dx = dy.matmul_t(w, false, true)?;
    let params = if want {
        let xs = x.shape();
        let ys = dy.shape();
        let rows = xs[..xs.len() - 1].iter().product();
        let xf = x.reshape(&[rows, xs[xs.len() - 1]])?;
        let yf = dy.reshape(&[rows, ys[ys.len() - 1]])?;
        let dw = xf.matmul_t(yf, true, false)?;
        let db = yf.sum(&[0], false)?;
        Some((dw, db))
    } else {
        None
    };
    Ok((dx, params))
}

struct BlockTrace<'t> {
    norm1: Norm<'t>,
    h: Var<'t>,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    att: Var<'t>,
    o: Var<'t>,
    norm2: Norm<'t>,
    h2: Var<'t>,
    u: Var<'t>,
    g: Var<'t>,
}

/// Output of [`param_gradients`].
pub struct ParamGradients<'t> {
    pub loss: Var<'t>,
    pub logits: Var<'t>,
    /// One entry per parameter in enumeration order; `None` where not
    /// requested.
    pub grads: Vec<Option<Var<'t>>>,
}

/// Gradients of the batch-mean cross-entropy with respect to every
/// requested parameter, as differentiable functions of `x`.
pub fn param_gradients<'t>(
    cfg: &VitConfig,
    params: &[Var<'t>],
    x: Var<'t>,
    labels: &[usize],
    wanted: &[bool],
) -> Result<ParamGradients<'t>> {
    check_params(cfg, params)?;
    let n = check_input(cfg, &x)?;
    if wanted.len() != params.len() {
        return Err(Error::contract("gradient selection length differs from parameter count"));
    }
    if labels.len() != n || labels.iter().any(|&y| y >= cfg.num_classes) {
        return Err(Error::contract("labels do not match batch or class count"));
    }
    let tape = x.tape();
    let (d, t, t0, heads, dh) = (cfg.embed_dim, cfg.tokens(), cfg.num_patches(), cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let split = |v: Var<'t>| -> Result<Var<'t>> { v.reshape(&[n, t, heads, dh])?.permute(&[0, 2, 1, 3]) };
    let merge = |v: Var<'t>| -> Result<Var<'t>> { v.permute(&[0, 2, 1, 3])?.reshape(&[n, t, d]) };

    // forward with saved intermediates
    let patches = x.gather(patch_index(cfg, n), &[n, t0, cfg.patch_dim()])?;
    let tok = linear_forward(patches, params[0], params[1])?;
    let cls = params[2].broadcast_to(&[n, 1, d])?;
    let mut z = Var::concat(&[cls, tok], 1)?.add(params[3])?;
    let mut trace = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let p = &params[4 + l * PARAMS_PER_BLOCK..][..PARAMS_PER_BLOCK];
        let (h, norm1) = norm_forward(z, p[0], p[1])?;
        let q = split(linear_forward(h, p[2], p[3])?)?;
        let k = split(linear_forward(h, p[4], p[5])?)?;
        let v = split(linear_forward(h, p[6], p[7])?)?;
        let att = q.matmul_t(k, false, true)?.scale(scale)?.softmax(3)?;
        let o = merge(att.matmul(v)?)?;
        z = z.add(linear_forward(o, p[8], p[9])?)?;
        let (h2, norm2) = norm_forward(z, p[10], p[11])?;
        let u = linear_forward(h2, p[12], p[13])?;
        let g = u.gelu()?;
        z = z.add(linear_forward(g, p[14], p[15])?)?;
        trace.push(BlockTrace { norm1, h, q, k, v, att, o, norm2, h2, u, g });
    }
    let tail = 4 + cfg.depth * PARAMS_PER_BLOCK;
    let c = z.slice(1, 0, 1)?.reshape(&[n, d])?;
    let (f, fnorm) = norm_forward(c, params[tail], params[tail + 1])?;
    let logits = linear_forward(f, params[tail + 2], params[tail + 3])?;

    let k_cls = cfg.num_classes;
    let mut onehot = Tensor::zeros([n, k_cls]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * k_cls + y] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * k_cls + y).collect();
    let loss = logits.log_softmax(1)?.gather(Arc::new(idx), &[n])?.mean_all()?.neg()?;

    // explicit backward
    let mut grads: Vec<Option<Var<'t>>> = vec![None; params.len()];
    let mut put = |i: usize, pair: Option<(Var<'t>, Var<'t>)>| {
        if let Some((w, b)) = pair {
            grads[i] = Some(w);
            grads[i + 1] = Some(b);
        }
    };
    let dlogits = logits.softmax(1)?.sub(onehot)?.scale(1.0 / n as f64)?;
    let (df, head) = linear_backward(dlogits, f, params[tail + 2], wanted[tail + 2] || wanted[tail + 3])?;
    put(tail + 2, head);
    let (dc, dgf, dbf) = norm_backward(df, &fnorm)?;
    put(tail, Some((dgf, dbf)));
    let rest = tape.constant(Tensor::zeros([n, t - 1, d]));
    let mut dz = Var::concat(&[dc.reshape(&[n, 1, d])?, rest], 1)?;

    for l in (0..cfg.depth).rev() {
        let base = 4 + l * PARAMS_PER_BLOCK;
        let p = &params[base..][..PARAMS_PER_BLOCK];
        let w = &wanted[base..][..PARAMS_PER_BLOCK];
        let tr = &trace[l];
        // MLP branch
        let (dg, fc2) = linear_backward(dz, tr.g, p[14], w[14] || w[15])?;
        put(base + 14, fc2);
        let du = dg.mul(tr.u.gelu_grad()?)?;
        let (dh2, fc1) = linear_backward(du, tr.h2, p[12], w[12] || w[13])?;
        put(base + 12, fc1);
        let (dz_n2, dg2, db2) = norm_backward(dh2, &tr.norm2)?;
        put(base + 10, Some((dg2, db2)));
        dz = dz.add(dz_n2)?;
        // attention branch
        let (d_o, out) = linear_backward(dz, tr.o, p[8], w[8] || w[9])?;
        put(base + 8, out);
        let d_oh = split(d_o)?;
        let datt = d_oh.matmul_t(tr.v, false, true)?;
        let dv = tr.att.matmul_t(d_oh, true, false)?;
        let ds = tr.att.mul(datt.sub(datt.mul(tr.att)?.sum(&[3], true)?)?)?.scale(scale)?;
        let dq = ds.matmul(tr.k)?;
        let dk = ds.matmul_t(tr.q, true, false)?;
        let (dhq, qp) = linear_backward(merge(dq)?, tr.h, p[2], w[2] || w[3])?;
        let (dhk, kp) = linear_backward(merge(dk)?, tr.h, p[4], w[4] || w[5])?;
        let (dhv, vp) = linear_backward(merge(dv)?, tr.h, p[6], w[6] || w[7])?;
        put(base + 2, qp);
        put(base + 4, kp);
        put(base + 6, vp);
        let dh = dhq.add(dhk)?.add(dhv)?;
        let (dz_n1, dg1, db1) = norm_backward(dh, &tr.norm1)?;
        put(base, Some((dg1, db1)));
        dz = dz.add(dz_n1)?;
    }

    put(2, Some((dz.slice(1, 0, 1)?.sum(&[0], false)?, dz.sum(&[0], false)?)));
    let dtok = dz.slice(1, 1, t0)?;
    let (_, embed) = linear_backward(dtok, patches, params[0], wanted[0] || wanted[1])?;
    put(0, embed);

    for (g, &want) in grads.iter_mut().zip(wanted) {
        if !want {
            *g = None;
        }
    }
    Ok(ParamGradients { loss, logits, grads })
}
