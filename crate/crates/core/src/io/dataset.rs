//! Synthetic labelled image sets. Every image is a pure function of the
//! generator, the dataset seed and its index.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Low-frequency cosine ramps; the class sets the ramp direction.
    SmoothGradients,
    /// One Gaussian blob; the class sets the blob's angle around the centre.
    GaussianBlobs,
    /// Two-tone checkerboards or stripes; the class sets period and pattern.
    CheckerTextures,
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::SmoothGradients => "smooth_gradients",
            Generator::GaussianBlobs => "gaussian_blobs",
            Generator::CheckerTextures => "checker_textures",
        })
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth_gradients" => Ok(Generator::SmoothGradients),
            "gaussian_blobs" => Ok(Generator::GaussianBlobs),
            "checker_textures" => Ok(Generator::CheckerTextures),
            other => Err(Error::contract(format!(
                "unknown generator `{other}` (expected smooth_gradients, gaussian_blobs or checker_textures)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.image_size < 2 || self.num_classes == 0 {
            return Err(Error::contract("dataset needs count >= 1, image size >= 2 and at least one class"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::contract(format!("{} channels unsupported (1 or 3)", self.channels)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub spec: DatasetSpec,
    /// `[count, H, W, C]` in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let per = spec.image_size * spec.image_size * spec.channels;
        let mut data = Vec::with_capacity(spec.count * per);
        let mut labels = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let (img, y) = sample(spec, i)?;
            data.extend(img.into_data());
            labels.push(y);
        }
        let images = Tensor::new([spec.count, spec.image_size, spec.image_size, spec.channels], data)?;
        Ok(Self { spec: spec.clone(), images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `indices`, stacked.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut imgs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            imgs.push(self.images.index0(i)?);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::stack(&imgs)?, labels))
    }

    /// First `n` indices with pairwise distinct labels, scanning from
    /// `start`. Fails if the dataset has fewer than `n` classes present.
    pub fn distinct_label_indices(&self, n: usize, start: usize) -> Result<Vec<usize>> {
        let mut seen = vec![false; self.spec.num_classes];
        let mut out = Vec::with_capacity(n);
        for k in 0..self.len() {
            let i = (start + k) % self.len();
            if !seen[self.labels[i]] {
                seen[self.labels[i]] = true;
                out.push(i);
                if out.len() == n {
                    return Ok(out);
                }
            }
        }
        Err(Error::contract(format!("dataset has fewer than {n} distinct labels")))
    }
}

/// Image `index` of the dataset and its label. The label is `index mod K`;
/// the remaining generator parameters come from a ChaCha stream keyed by
/// the dataset seed and selected by the index.
pub fn sample(spec: &DatasetSpec, index: usize) -> Result<(Tensor, usize)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let k = spec.num_classes;
    let y = index % k;
    let s = spec.image_size;
    let c = spec.channels;
    let mut data = Vec::with_capacity(s * s * c);
    // normalised pixel-centre coordinates in [-1, 1]
    let coord = |i: usize| (2.0 * i as f64 + 1.0) / s as f64 - 1.0;
    match spec.generator {
        Generator::SmoothGradients => {
            let theta = PI * y as f64 / k as f64 + rng.gen_range(-0.15..0.15) * PI / k as f64;
            let freq = rng.gen_range(0.6..1.4);
            let amp = rng.gen_range(0.3..0.45);
            let phase: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let (ct, st) = (theta.cos(), theta.sin());
            for py in 0..s {
                for px in 0..s {
                    let u = coord(px) * ct + coord(py) * st;
                    for ph in &phase {
                        data.push(0.5 + amp * (PI * freq * u + ph).cos());
                    }
                }
            }
        }
        Generator::GaussianBlobs => {
            let angle = 2.0 * PI * y as f64 / k as f64 + rng.gen_range(-0.2..0.2) * PI / k as f64;
            let radius = rng.gen_range(0.35..0.6);
            let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
            let width = rng.gen_range(0.25..0.45);
            let back: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..0.3)).collect();
            let peak: Vec<f64> = (0..c).map(|_| rng.gen_range(0.6..0.95)).collect();
            for py in 0..s {
                for px in 0..s {
                    let d2 = (coord(px) - cx).powi(2) + (coord(py) - cy).powi(2);
                    let g = (-d2 / (2.0 * width * width)).exp();
                    for ch in 0..c {
                        data.push(back[ch] + (peak[ch] - back[ch]) * g);
                    }
                }
            }
        }
        Generator::CheckerTextures => {
            let period = 2 + (y % 4) * s / 16;
            let striped = (y / 4) % 2 == 1;
            let (ox, oy) = (rng.gen_range(0..period), rng.gen_range(0..period));
            let lo: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..0.4)).collect();
            let hi: Vec<f64> = (0..c).map(|_| rng.gen_range(0.6..0.95)).collect();
            for py in 0..s {
                for px in 0..s {
                    let (a, b) = ((px + ox) / period, (py + oy) / period);
                    let on = if striped { a % 2 == 0 } else { (a + b) % 2 == 0 };
                    for ch in 0..c {
                        data.push(if on { hi[ch] } else { lo[ch] });
                    }
                }
            }
        }
    }
    Ok((Tensor::new([s, s, c], data)?, y))
}
