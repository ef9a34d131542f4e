//! Reconstruction quality. Every metric works on clamped copies of its
//! inputs and is a pure function of them.

use crate::error::{Error, Result};
use crate::models::PriorCnn;
use crate::tensor::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// PSNR reported for a zero-error pair.
pub const PSNR_CAP: f64 = 99.0;
/// Largest batch [`assign`] accepts.
pub const MAX_ASSIGN: usize = 12;
/// Batches up to this size are assigned by exhaustive search.
pub const BRUTE_FORCE_MAX: usize = 8;

fn check_batches(a: &Tensor, b: &Tensor) -> Result<usize> {
    if a.shape() != b.shape() || a.ndim() != 4 {
        return Err(Error::contract(format!(
            "batches must share an [N, H, W, C] shape, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.shape()[0])
}

/// Pixel l2 distance between every reconstruction `i` and original `j`.
pub fn pair_costs(recons: &Tensor, originals: &Tensor) -> Result<Vec<Vec<f64>>> {
    let n = check_batches(recons, originals)?;
    let (r, o) = (recons.clamp(0.0, 1.0), originals.clamp(0.0, 1.0));
    let per = r.len() / n;
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let a = &r.data()[i * per..(i + 1) * per];
                    let b = &o.data()[j * per..(j + 1) * per];
                    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                })
                .collect()
        })
        .collect())
}

/// Minimum-cost permutation by trying all of them.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    // Heap's algorithm, iterative
    let mut c = vec![0usize; n];
    let mut i = 0;
    let mut current = total(&perm);
    if current < best_cost {
        best_cost = current;
        best.clone_from(&perm);
    }
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            current = total(&perm);
            if current < best_cost {
                best_cost = current;
                best.clone_from(&perm);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Minimum-cost permutation by the Hungarian method (shortest augmenting
/// paths with row and column potentials), `O(n^3)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays; column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if !used[col] {
                    let reduced = cost[r - 1][col - 1] - u[r] - v[col];
                    if reduced < minv[col] {
                        minv[col] = reduced;
                        way[col] = col0;
                    }
                    if minv[col] < delta {
                        delta = minv[col];
                        col1 = col;
                    }
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    assignment
}

/// `assignment[i]` is the original matched to reconstruction `i`.
pub fn assign(recons: &Tensor, originals: &Tensor) -> Result<Vec<usize>> {
    let n = check_batches(recons, originals)?;
    if n > MAX_ASSIGN {
        return Err(Error::contract(format!("assignment supports at most {MAX_ASSIGN} images, got {n}")));
    }
    let cost = pair_costs(recons, originals)?;
    Ok(if n <= BRUTE_FORCE_MAX { brute_force_assignment(&cost) } else { hungarian(&cost) })
}

/// `10 log10(1 / MSE)` of the clamped images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract("psnr needs equally shaped images"));
    }
    let mse = a.clamp(0.0, 1.0).sub(&b.clamp(0.0, 1.0))?.sq_norm() / a.len() as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

/// Magnitudes of the 2-D DFT of one `h x w` plane.
pub fn dft_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf.iter().map(|c| c.norm()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean over images and channels of `1 - cos(|F a|, |F b|)` where `F` is
/// the 2-D DFT of one channel plane. Two all-zero planes count as distance
/// zero.
pub fn fft2d_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let n = check_batches(a, b)?;
    let (h, w, c) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let (a, b) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
    let plane = |t: &Tensor, i: usize, ch: usize| -> Vec<f64> {
        (0..h * w).map(|p| t.data()[(i * h * w + p) * c + ch]).collect()
    };
    let mut total = 0.0;
    for i in 0..n {
        for ch in 0..c {
            let fa = dft_magnitude(&plane(&a, i, ch), h, w);
            let fb = dft_magnitude(&plane(&b, i, ch), h, w);
            total += 1.0 - cosine(&fa, &fb);
        }
    }
    Ok((total / (n * c) as f64).clamp(0.0, 2.0))
}

fn embed(prior: &PriorCnn, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let f = prior.features(&x.clamp(0.0, 1.0))?;
    let d = f.shape()[1];
    Ok(f.data().chunks_exact(d).map(|r| r.to_vec()).collect())
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean l2 distance between prior-CNN penultimate features of image `i` of
/// `a` and image `i` of `b`.
pub fn feature_distance(a: &Tensor, b: &Tensor, prior: &PriorCnn) -> Result<f64> {
    let n = check_batches(a, b)?;
    let (fa, fb) = (embed(prior, a)?, embed(prior, b)?);
    Ok(fa.iter().zip(&fb).map(|(x, y)| l2(x, y)).sum::<f64>() / n as f64)
}

/// Fraction of reconstructions whose nearest gallery image in feature
/// space is their own original. `originals[i]` is the gallery index of the
/// original matched to reconstruction `i`.
pub fn iip(recons: &Tensor, gallery: &Tensor, originals: &[usize], prior: &PriorCnn) -> Result<f64> {
    let n = recons.shape().first().copied().unwrap_or(0);
    let g = gallery.shape().first().copied().unwrap_or(0);
    if originals.len() != n || n == 0 {
        return Err(Error::contract("one gallery index per reconstruction is required"));
    }
    if g < n {
        return Err(Error::contract(format!("gallery of {g} is smaller than the batch of {n}")));
    }
    if originals.iter().any(|&j| j >= g) {
        return Err(Error::contract("original index outside the gallery"));
    }
    let fr = embed(prior, recons)?;
    let fg = embed(prior, gallery)?;
    let hits = fr
        .iter()
        .zip(originals)
        .filter(|(f, &own)| {
            let nearest = (0..g)
                .min_by(|&p, &q| l2(f, &fg[p]).total_cmp(&l2(f, &fg[q])))
                .unwrap();
            nearest == own
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// PSNR of each reconstruction against its assigned original.
    pub psnr: Vec<f64>,
    pub psnr_mean: f64,
    pub fft2d_distance: f64,
    pub feature_distance: Option<f64>,
    /// `assignment[i]` is the original matched to reconstruction `i`.
    pub assignment: Vec<usize>,
    pub iip: Option<f64>,
}

/// Assigns reconstructions to originals, then measures every pair. IIP uses
/// `gallery` (with `gallery_index[j]` the gallery position of original `j`)
/// when given.
pub fn evaluate(
    recons: &Tensor,
    originals: &Tensor,
    prior: Option<&PriorCnn>,
    gallery: Option<(&Tensor, &[usize])>,
) -> Result<MetricReport> {
    let assignment = assign(recons, originals)?;
    let ordered: Vec<Tensor> = assignment.iter().map(|&j| originals.index0(j)).collect::<Result<_>>()?;
    let matched = Tensor::stack(&ordered)?;
    let n = assignment.len();
    let psnrs: Vec<f64> = (0..n)
        .map(|i| psnr(&recons.index0(i)?, &matched.index0(i)?))
        .collect::<Result<_>>()?;
    let fft = fft2d_distance(recons, &matched)?;
    let feature = prior.map(|p| feature_distance(recons, &matched, p)).transpose()?;
    let iip = match (prior, gallery) {
        (Some(p), Some((g, index))) => {
            if index.len() != n {
                return Err(Error::contract("one gallery index per original is required"));
            }
            let own: Vec<usize> = assignment.iter().map(|&j| index[j]).collect();
            Some(iip(recons, g, &own, p)?)
        }
        _ => None,
    };
    Ok(MetricReport {
        psnr_mean: psnrs.iter().sum::<f64>() / n as f64,
        psnr: psnrs,
        fft2d_distance: fft,
        feature_distance: feature,
        assignment,
        iip,
    })
}
