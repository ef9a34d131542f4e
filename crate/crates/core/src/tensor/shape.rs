//! Shape arithmetic: broadcasting and reductions.

use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::contract(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Dimensions of a broadcast from `src` to `out` as `(len, kept)` runs:
/// size-one output dims are dropped and neighbours of the same kind merged.
/// `kept` runs exist in `src`, the others are repeated.
pub(crate) fn broadcast_runs(src: &[usize], out: &[usize]) -> Vec<(usize, bool)> {
    let off = out.len() - src.len();
    let mut runs: Vec<(usize, bool)> = Vec::new();
    for (i, &d) in out.iter().enumerate() {
        if d == 1 {
            continue;
        }
        let kept = i >= off && src[i - off] == d;
        match runs.last_mut() {
            Some((len, k)) if *k == kept => *len *= d,
            _ => runs.push((d, kept)),
        }
    }
    runs
}

fn reduce_runs(runs: &[(usize, bool)], g: &[f64], acc: &mut [f64]) {
    match runs {
        [] => acc[0] += g[0],
        [(_, true)] => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        [(_, false)] => acc[0] += g.iter().sum::<f64>(),
        [(len, kept), rest @ ..] => {
            let gi = g.len() / len;
            let ai = if *kept { acc.len() / len } else { acc.len() };
            for i in 0..*len {
                let a = if *kept { &mut acc[i * ai..(i + 1) * ai] } else { &mut acc[..] };
                reduce_runs(rest, &g[i * gi..(i + 1) * gi], a);
            }
        }
    }
}

fn expand_runs(runs: &[(usize, bool)], src: &[f64], out: &mut Vec<f64>) {
    match runs {
        [] => out.push(src[0]),
        [(_, true)] => out.extend_from_slice(src),
        [(len, false)] => out.extend(std::iter::repeat(src[0]).take(*len)),
        [(len, kept), rest @ ..] => {
            let si = if *kept { src.len() / len } else { src.len() };
            for i in 0..*len {
                let s = if *kept { &src[i * si..(i + 1) * si] } else { src };
                expand_runs(rest, s, out);
            }
        }
    }
}

/// Sum `grad` (shaped like the broadcast output) back down to `shape`.
pub(crate) fn reduce_to(grad: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; numel(shape)];
    reduce_runs(&broadcast_runs(shape, out_shape), grad, &mut acc);
    acc
}

/// Repeat `data` (shaped `shape`) up to the broadcast shape `out_shape`.
pub(crate) fn expand_to(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return data.to_vec();
    }
    let mut out = Vec::with_capacity(numel(out_shape));
    expand_runs(&broadcast_runs(shape, out_shape), data, &mut out);
    out
}

/// Shape with the given axes collapsed to 1.
pub(crate) fn keep_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

pub(crate) fn drop_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

/// Split a shape around `axis` into (outer, len, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn expand_matches_manual_indexing() {
        let src: Vec<f64> = (0..8).map(f64::from).collect();
        let out = expand_to(&src, &[2, 1, 4], &[2, 3, 4]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(out[a * 12 + b * 4 + c], src[a * 4 + c]);
                }
            }
        }
        assert_eq!(expand_to(&[5.0], &[], &[2, 2]), vec![5.0; 4]);
        assert_eq!(expand_to(&[1.0, 2.0], &[2, 1], &[1, 2, 3]), vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn reduce_interleaved_axes() {
        // [2,3,4] summed over axis 1 only
        let g: Vec<f64> = (0..24).map(f64::from).collect();
        let r = reduce_to(&g, &[2, 3, 4], &[2, 1, 4]);
        for a in 0..2 {
            for c in 0..4 {
                let want: f64 = (0..3).map(|b| g[a * 12 + b * 4 + c]).sum();
                assert_eq!(r[a * 4 + c], want);
            }
        }
        assert_eq!(reduce_to(&g, &[2, 3, 4], &[1, 1, 1]), vec![276.0]);
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let g = vec![1.0; 6];
        assert_eq!(reduce_to(&g, &[2, 3], &[3]), vec![2.0; 3]);
        assert_eq!(reduce_to(&g, &[2, 3], &[2, 1]), vec![3.0; 2]);
    }
}
