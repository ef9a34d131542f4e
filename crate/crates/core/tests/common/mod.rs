#![allow(dead_code)]

use gradleak::models::{VitConfig, VitParams};
use gradleak::tensor::gradcheck::{self, GradCheckReport};
use gradleak::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::Arc;

pub type ScalarFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), lo, hi, &mut rng(seed))
}

/// Contract an op output with a fixed random weight so every output element
/// carries a distinct upstream gradient.
fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = out.tape().constant(rand_t(&out.shape(), -1.0, 1.0, seed ^ 0xABCD));
    out.mul(w)?.sum_all()
}

macro_rules! case {
    ($name:expr, [$($shape:expr => ($lo:expr, $hi:expr)),*], |$t:ident, $v:ident| $body:expr) => {{
        let mut seed = 0u64;
        let inputs: Vec<Tensor> = vec![$({ seed += 1; rand_t(&$shape, $lo, $hi, seed + $name.len() as u64) }),*];
        let f: ScalarFn = Box::new(move |$t: &Tape, $v: &[Var]| {
            let _ = $t;
            let out = $body?;
            project(out, 7)
        });
        ($name, f, inputs)
    }};
}

/// One finite-difference case per registered primitive.
pub fn primitive_cases() -> Vec<(&'static str, ScalarFn, Vec<Tensor>)> {
    let patch_idx = Arc::new((0..12).rev().collect::<Vec<usize>>());
    vec![
        case!("add", [[3, 4] => (-2.0, 2.0), [4] => (-2.0, 2.0)], |t, v| v[0].add(v[1])),
        case!("sub", [[3, 1] => (-2.0, 2.0), [3, 4] => (-2.0, 2.0)], |t, v| v[0].sub(v[1])),
        case!("mul", [[2, 3, 4] => (-2.0, 2.0), [3, 1] => (-2.0, 2.0)], |t, v| v[0].mul(v[1])),
        case!("div", [[3, 4] => (-2.0, 2.0), [4] => (0.5, 2.0)], |t, v| v[0].div(v[1])),
        case!("neg_scale_add_scalar", [[5] => (-2.0, 2.0)], |t, v| v[0].neg()?.scale(1.7)?.add_scalar(0.3)),
        case!("matmul", [[3, 4] => (-2.0, 2.0), [4, 5] => (-2.0, 2.0)], |t, v| v[0].matmul(v[1])),
        case!("matmul_shared_rhs", [[2, 3, 4] => (-2.0, 2.0), [4, 2] => (-2.0, 2.0)], |t, v| v[0].matmul(v[1])),
        case!("matmul_batched", [[2, 3, 4] => (-2.0, 2.0), [2, 4, 3] => (-2.0, 2.0)], |t, v| v[0].matmul(v[1])),
        case!("matmul_nt", [[2, 3, 4] => (-2.0, 2.0), [2, 5, 4] => (-2.0, 2.0)], |t, v| v[0].matmul_t(v[1], false, true)),
        case!("matmul_tn", [[2, 4, 3] => (-2.0, 2.0), [2, 4, 5] => (-2.0, 2.0)], |t, v| v[0].matmul_t(v[1], true, false)),
        case!("matmul_tt", [[4, 3] => (-2.0, 2.0), [5, 4] => (-2.0, 2.0)], |t, v| v[0].matmul_t(v[1], true, true)),
        case!("matmul_shared_nt", [[2, 3, 4] => (-2.0, 2.0), [5, 4] => (-2.0, 2.0)], |t, v| v[0].matmul_t(v[1], false, true)),
        case!("transpose", [[2, 3, 4] => (-2.0, 2.0)], |t, v| v[0].permute(&[2, 0, 1])),
        case!("permute_keep_last", [[2, 3, 4] => (-2.0, 2.0)], |t, v| v[0].permute(&[1, 0, 2])),
        case!("sum_squares", [[3, 4] => (-2.0, 2.0)], |t, v| v[0].sum_squares()),
        case!("reshape", [[2, 6] => (-2.0, 2.0)], |t, v| v[0].reshape(&[3, 4])),
        case!("broadcast_to", [[3, 1] => (-2.0, 2.0)], |t, v| v[0].broadcast_to(&[2, 3, 4])),
        case!("slice", [[3, 5, 2] => (-2.0, 2.0)], |t, v| v[0].slice(1, 1, 3)),
        case!("concat", [[2, 3] => (-2.0, 2.0), [2, 2] => (-2.0, 2.0)], |t, v| Var::concat(&[v[0], v[1]], 1)),
        case!("gather", [[3, 4] => (-2.0, 2.0)], |t, v| v[0].gather(patch_idx.clone(), &[2, 6])),
        case!("sum", [[3, 4, 2] => (-2.0, 2.0)], |t, v| v[0].sum(&[0, 2], false)),
        case!("mean", [[3, 4] => (-2.0, 2.0)], |t, v| v[0].mean(&[1], true)),
        case!("variance", [[4, 5] => (-2.0, 2.0)], |t, v| v[0].variance(&[0], false)),
        case!("sqrt", [[6] => (0.5, 2.0)], |t, v| v[0].sqrt()),
        case!("exp", [[6] => (-2.0, 2.0)], |t, v| v[0].exp()),
        case!("log", [[6] => (0.5, 2.0)], |t, v| v[0].log()),
        case!("square", [[6] => (-2.0, 2.0)], |t, v| v[0].square()),
        case!("softmax", [[3, 5] => (-2.0, 2.0)], |t, v| v[0].softmax(1)),
        case!("softmax_axis0", [[3, 5] => (-2.0, 2.0)], |t, v| v[0].softmax(0)),
        case!("log_softmax", [[3, 5] => (-2.0, 2.0)], |t, v| v[0].log_softmax(1)),
        case!("gelu", [[8] => (-2.0, 2.0)], |t, v| v[0].gelu()),
        case!("gelu_grad", [[8] => (-2.0, 2.0)], |t, v| v[0].gelu_grad()),
        case!("relu", [[8] => (-2.0, 2.0)], |t, v| v[0].relu()),
        case!("layer_norm", [[3, 6] => (-2.0, 2.0)], |t, v| v[0].layer_norm(1, 1e-6)),
        case!("layer_norm_axis0", [[4, 3] => (-2.0, 2.0)], |t, v| v[0].layer_norm(0, 1e-6)),
        case!("conv2d", [[2, 5, 5, 2] => (-2.0, 2.0), [3, 3, 2, 3] => (-2.0, 2.0)], |t, v| v[0].conv2d(v[1], 1, 1)),
        case!("conv2d_stride2", [[1, 6, 6, 1] => (-2.0, 2.0), [3, 3, 1, 2] => (-2.0, 2.0)], |t, v| v[0].conv2d(v[1], 2, 1)),
        case!("batch_stats", [[3, 2, 2, 2] => (-2.0, 2.0)], |t, v| {
            let (m, s) = v[0].batch_stats()?;
            Var::concat(&[m, s], 0)
        }),
        case!("max", [[3, 4] => (-2.0, 2.0)], |t, v| v[0].max(1)),
        case!("l2_norm", [[3, 4] => (-2.0, 2.0)], |t, v| v[0].l2_norm()?.reshape(&[1])),
    ]
}

pub fn run_case(f: &ScalarFn, inputs: &[Tensor]) -> GradCheckReport {
    gradcheck::check(f, inputs).expect("gradcheck evaluation failed")
}

/// The desk-scale setting: 512 smooth 16x16 grayscale images in 8 classes,
/// the victim after its short training recipe, and the pretrained prior.
pub struct Desk {
    pub data: gradleak::io::ToyDataset,
    pub victim: VitParams,
    pub prior: gradleak::models::PriorCnn,
}

pub fn desk() -> &'static Desk {
    use gradleak::io::{DatasetSpec, Generator, ToyDataset};
    use gradleak::models::{pretrain_prior, train_victim, PriorConfig, TrainConfig};
    static DESK: std::sync::OnceLock<Desk> = std::sync::OnceLock::new();
    DESK.get_or_init(|| {
        let spec = DatasetSpec {
            generator: Generator::SmoothGradients,
            count: 512,
            image_size: 16,
            channels: 1,
            num_classes: 8,
            seed: 0,
        };
        let data = ToyDataset::generate(&spec).unwrap();
        let (victim, _) = train_victim(&VitConfig::default(), &data.images, &data.labels, &TrainConfig::default()).unwrap();
        let (prior, _) = pretrain_prior(&PriorConfig::default(), &data.images, &data.labels, 3, 32, 0).unwrap();
        Desk { data, victim, prior }
    })
}

/// Direct evaluation of `|sum_{y,x} p[y,x] e^{-2 pi i (uy/h + vx/w)}|`.
pub fn naive_dft_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    re += p[y * w + x] * phase.cos();
                    im += p[y * w + x] * phase.sin();
                }
            }
            out.push((re * re + im * im).sqrt());
        }
    }
    out
}

pub fn naive_fft2d_distance(a: &Tensor, b: &Tensor) -> f64 {
    let [n, h, w, c] = a.shape()[..] else { unreachable!() };
    let mut total = 0.0;
    for i in 0..n {
        for ch in 0..c {
            let plane = |t: &Tensor| -> Vec<f64> {
                (0..h * w).map(|p| t.data()[(i * h * w + p) * c + ch].clamp(0.0, 1.0)).collect()
            };
            let fa = naive_dft_magnitude(&plane(a), h, w);
            let fb = naive_dft_magnitude(&plane(b), h, w);
            let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
            let na = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
            total += 1.0 - dot / (na * nb);
        }
    }
    total / (n * c) as f64
}

/// Two layers, width 8: the finite-difference victim.
pub fn toy() -> VitConfig {
    VitConfig { image_size: 8, channels: 1, patch_size: 4, embed_dim: 8, depth: 2, heads: 2, mlp_ratio: 2, num_classes: 3 }
}

/// Random parameters at a scale where every gradient entry is well above
/// the finite-difference noise floor.
pub fn spread_params(cfg: &VitConfig, seed: u64) -> VitParams {
    let mut r = rng(seed);
    let tensors = cfg
        .layout()
        .into_iter()
        .map(|slot| {
            let t = Tensor::uniform(slot.shape, -0.6, 0.6, &mut r);
            if slot.name.ends_with("norm1/weight") || slot.name.ends_with("norm2/weight") || slot.name == "vit/norm/weight" {
                t.map(|v| 1.0 + v)
            } else {
                t
            }
        })
        .collect();
    VitParams::from_tensors(cfg.clone(), tensors).unwrap()
}
