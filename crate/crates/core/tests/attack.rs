mod common;

use common::{desk, rand_t, rng};
use gradleak::ablation::{draw_batch, MaskSpec, BlockPart};
use gradleak::attack::{
    apply_defense, capture_gradients, gradient_matching_loss, image_prior_loss, l2_tv_loss, patch_prior_loss,
    registration_loss, restore_labels, run_attack, scheduler, AttackConfig, AttackContext, DefenseTarget,
    GradientCapture, LabelRule, LossToggles, Weights,
};
use gradleak::models::{VitConfig, VitParams};
use gradleak::{Error, Tape, Tensor};

fn small() -> VitConfig {
    VitConfig { image_size: 8, channels: 1, patch_size: 4, embed_dim: 8, depth: 3, heads: 2, mlp_ratio: 2, num_classes: 4 }
}

fn small_setup(n: usize, seed: u64) -> (VitParams, Tensor, Vec<usize>, GradientCapture) {
    let cfg = small();
    let params = VitParams::init(&cfg, &mut rng(seed)).unwrap();
    let x = rand_t(&[n, 8, 8, 1], 0.0, 1.0, seed + 100);
    let y: Vec<usize> = (0..n).map(|i| (i + seed as usize) % cfg.num_classes).collect();
    let cap = capture_gradients(&params, &x, &y).unwrap();
    (params, x, y, cap)
}

fn value(f: impl for<'t> Fn(gradleak::Var<'t>) -> gradleak::Result<gradleak::Var<'t>>, x: &Tensor) -> f64 {
    let tape = Tape::new();
    f(tape.constant(x.clone())).unwrap().item()
}

#[test]
fn scheduler_switches_at_the_midpoint() {
    let cfg = AttackConfig { iterations: 100, ..Default::default() };
    assert_eq!(scheduler(1, &cfg), Weights { grad: 4e-3, image: 0.0 });
    assert_eq!(scheduler(50, &cfg), Weights { grad: 4e-3, image: 0.0 });
    assert_eq!(scheduler(51, &cfg), Weights { grad: 2e-3, image: 0.2 });
    assert_eq!(scheduler(100, &cfg), Weights { grad: 2e-3, image: 0.2 });
    let flat = AttackConfig { losses: LossToggles { scheduler: false, ..LossToggles::default() }, ..cfg };
    for t in 1..=100 {
        assert_eq!(scheduler(t, &flat), Weights { grad: 4e-3, image: 0.2 });
    }
}

#[test]
fn config_validation() {
    let ok = AttackConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        AttackConfig { iterations: 7, ..ok.clone() },
        AttackConfig { iterations: 0, ..ok.clone() },
        AttackConfig { seeds: vec![], ..ok.clone() },
        AttackConfig { alpha_patch: -1.0, ..ok.clone() },
        AttackConfig { lr: 0.0, ..ok.clone() },
        AttackConfig { consensus_interval: Some(0), ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Contract(_))));
    }
    let scaled = AttackConfig::default().with_prior_scale(0.5);
    assert_eq!(scaled.alpha_grad, 4e-3);
    assert_eq!(scaled.alpha_image, 0.1);
    let json = serde_json::to_string(&ok).unwrap();
    assert_eq!(serde_json::from_str::<AttackConfig>(&json).unwrap(), ok);
    assert!(serde_json::from_str::<AttackConfig>(r#"{"iterations": 10, "bogus": 1}"#).is_err());
}

#[test]
fn labels_from_a_hand_built_head_gradient() {
    let cfg = small();
    let (_, _, _, mut cap) = small_setup(1, 1);
    let bias = cap.names.iter().position(|n| n == "vit/head/bias").unwrap();
    cap.grads[bias] = Tensor::new([4], vec![0.1, -0.3, 0.2, -0.1]).unwrap();
    assert_eq!(restore_labels(&cap, &cfg, LabelRule::HeadBias).unwrap(), vec![1]);
    let weight = cap.names.iter().position(|n| n == "vit/head/weight").unwrap();
    let mut w = vec![0.0; 8 * 4];
    w[3 * 4 + 2] = -5.0;
    w[4 + 1] = -1.0;
    cap.grads[weight] = Tensor::new([8, 4], w).unwrap();
    assert_eq!(restore_labels(&cap, &cfg, LabelRule::HeadWeightMin).unwrap(), vec![2]);
    cap.batch_size = 2;
    assert_eq!(restore_labels(&cap, &cfg, LabelRule::HeadWeightMin).unwrap(), vec![2, 1]);
}

#[test]
fn label_restoration_rejects_impossible_requests() {
    let cfg = small();
    let (params, _, _, cap) = small_setup(1, 2);
    let mut big = cap.clone();
    big.batch_size = 5;
    assert!(matches!(restore_labels(&big, &cfg, LabelRule::HeadBias), Err(Error::Contract(_))));
    let zero = GradientCapture { grads: cap.grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect(), ..cap };
    for rule in [LabelRule::HeadBias, LabelRule::HeadWeightMin] {
        assert!(matches!(restore_labels(&zero, &cfg, rule), Err(Error::DegenerateCapture(_))));
    }
    let cfg_run = AttackConfig { iterations: 2, ..AttackConfig::default() };
    assert!(run_attack(&zero, &params, None, &AttackConfig { losses: LossToggles::grad_only(), ..cfg_run }).is_err());
}

#[test]
fn labels_are_recovered_on_the_desk_victim() {
    let d = desk();
    let cfg = &d.victim.config;
    for n in [1, 4] {
        let mut hits = 0;
        for trial in 0..10 {
            let idx = draw_batch(&d.data, n, 1000 + trial).unwrap();
            let (x, y) = d.data.batch(&idx).unwrap();
            let cap = capture_gradients(&d.victim, &x, &y).unwrap();
            let got = restore_labels(&cap, cfg, LabelRule::HeadBias).unwrap();
            hits += got.iter().filter(|l| y.contains(l)).count();
        }
        assert!(hits as f64 / (10 * n) as f64 >= 0.9, "N={n}: {hits}");
    }
}

#[test]
fn defense_noise_has_the_requested_variance_and_targets() {
    let (params, _, _, cap) = small_setup(2, 3);
    let cfg = &params.config;
    let sigma = 0.05;
    let noisy = apply_defense(&cap, cfg, sigma, DefenseTarget::All, 9).unwrap();
    let diffs: Vec<f64> = noisy
        .grads
        .iter()
        .zip(&cap.grads)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect::<Vec<_>>())
        .collect();
    let var = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.1, "variance {var}");
    assert_eq!(noisy.defense.unwrap().sigma, sigma);

    assert_eq!(apply_defense(&cap, cfg, sigma, DefenseTarget::All, 9).unwrap().grads, noisy.grads);
    assert_ne!(apply_defense(&cap, cfg, sigma, DefenseTarget::All, 10).unwrap().grads, noisy.grads);
    assert_eq!(apply_defense(&cap, cfg, 0.0, DefenseTarget::All, 9).unwrap().grads, cap.grads);
    assert!(apply_defense(&cap, cfg, -1.0, DefenseTarget::All, 9).is_err());

    for target in [DefenseTarget::MsaOnly, DefenseTarget::LastThird] {
        let out = apply_defense(&cap, cfg, sigma, target, 9).unwrap();
        for ((name, a), b) in cap.names.iter().zip(&out.grads).zip(&cap.grads) {
            let touched = a != b;
            let expect = match target {
                DefenseTarget::MsaOnly => name.contains("/attn/"),
                _ => name.starts_with("vit/blocks/2/"),
            };
            assert_eq!(touched, expect, "{target} {name}");
        }
    }
}

#[test]
fn true_batch_is_a_stationary_point_of_the_matching_loss() {
    let (params, x, y, cap) = small_setup(2, 4);
    let tape = Tape::new();
    let xv = tape.leaf(x);
    let mask = vec![true; params.config.num_params()];
    let l = gradient_matching_loss(xv, &y, &params, &cap, &mask).unwrap();
    tape.backward(l).unwrap();
    assert!(l.item() < 1e-10, "L_grad {}", l.item());
    assert!(xv.grad().unwrap().norm() < 1e-6);
}

#[test]
fn auxiliary_terms_match_hand_values() {
    let x = Tensor::new([1, 2, 2, 1], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
    let c = Tensor::new([1, 2, 2, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    // x - c = [-1, 0, 1, 3]
    assert!((value(|v| registration_loss(v, &c), &x) - 11f64.sqrt()).abs() < 1e-12);
    // |x| = sqrt(21); row differences [2, 3]; column differences [1, 2]
    let expect = 21f64.sqrt() + 13f64.sqrt() + 5f64.sqrt();
    assert!((value(l2_tv_loss, &x) - expect).abs() < 1e-12);

    let mut p = vec![0.0; 16];
    p[4 * 2] = 1.0; // row 2, column 0: just below the horizontal seam
    p[4 + 2] = 3.0; // row 1, column 2: just right of the vertical seam
    let img = Tensor::new([1, 4, 4, 1], p).unwrap();
    // seam between rows 1|2: differences [1, 0, -3, 0]; between columns 1|2: [0, 3, 0, 0]
    let expect = 10f64.sqrt() + 3.0;
    assert!((value(|v| patch_prior_loss(v, 2), &img) - expect).abs() < 1e-12);
}

#[test]
fn constant_image_with_one_seed_only_pays_the_l2_term() {
    let (params, _, _, cap) = small_setup(1, 5);
    let cfg = AttackConfig { iterations: 2, losses: LossToggles { grad: false, image_prior: false, ..LossToggles::default() }, ..AttackConfig::default() };
    let ctx = AttackContext::new(&params, &cap, None, &cfg).unwrap();
    let tape = Tape::new();
    let x = tape.constant(Tensor::full([1, 8, 8, 1], 0.5));
    let obj = ctx.objective(x, None, 1).unwrap();
    assert_eq!(obj.row.r_patch, 0.0);
    assert_eq!(obj.row.r_reg, 0.0);
    assert!((obj.row.r_tv_l2 - 4.0).abs() < 1e-12);
    assert!((obj.row.total - cfg.alpha_tv_l2 * 4.0).abs() < 1e-15);
}

#[test]
fn image_prior_ignores_batch_order() {
    let d = desk();
    let x = d.data.batch(&[3, 17, 40, 99]).unwrap().0;
    let rev = d.data.batch(&[99, 40, 17, 3]).unwrap().0;
    let a = value(|v| image_prior_loss(v, &d.prior), &x);
    let b = value(|v| image_prior_loss(v, &d.prior), &rev);
    assert!((a - b).abs() < 1e-12 * a.max(1.0));
}

#[test]
fn nothing_to_minimise_leaves_the_start_unchanged() {
    let (params, _, _, cap) = small_setup(1, 6);
    let off = LossToggles { grad: true, image_prior: false, patch: false, reg: false, tv_l2: false, scheduler: true };
    let cfg = AttackConfig { iterations: 10, alpha_grad: 0.0, losses: off, ..AttackConfig::default() };
    let r = run_attack(&cap, &params, None, &cfg).unwrap();
    assert_eq!(r.seeds[0].recon, gradleak::attack::run::initial_batch([1, 8, 8, 1], 0));
}

#[test]
fn gradient_only_trajectory_ignores_the_weight_scale() {
    let (params, _, _, cap) = small_setup(1, 7);
    // Adam divides by sqrt(v) + eps; with eps far below the gradient scale
    // the update depends on the gradient direction only.
    let adam = gradleak::optim::AdamConfig { eps: 1e-20, ..Default::default() };
    let base = AttackConfig { iterations: 30, losses: LossToggles::grad_only(), adam, ..AttackConfig::default() };
    let a = run_attack(&cap, &params, None, &base).unwrap();
    let b = run_attack(&cap, &params, None, &AttackConfig { alpha_grad: base.alpha_grad * 10.0, ..base }).unwrap();
    let gap = a.seeds[0].recon.sub(&b.seeds[0].recon).unwrap().max_abs();
    assert!(gap < 1e-6, "trajectories differ by {gap}");
}

#[test]
fn total_falls_over_a_default_desk_run() {
    let d = desk();
    let cfg = AttackConfig { iterations: 200, seeds: vec![0, 1], ..AttackConfig::desk_scale() };
    let mut lower = 0;
    let runs = 10;
    for k in 0..runs {
        let idx = draw_batch(&d.data, 2, 500 + k).unwrap();
        let (x, y) = d.data.batch(&idx).unwrap();
        let cap = capture_gradients(&d.victim, &x, &y).unwrap();
        let r = run_attack(&cap, &d.victim, Some(&d.prior), &AttackConfig { seeds: vec![k, k + 100], ..cfg.clone() }).unwrap();
        let ledger = &r.seeds[0].ledger;
        if ledger.last().unwrap().total < ledger[0].total {
            lower += 1;
        }
    }
    assert!(lower * 10 >= runs * 9, "{lower} of {runs}");
}

#[test]
fn masking_changes_only_the_matching_column() {
    let (params, _, _, cap) = small_setup(2, 8);
    let base = AttackConfig { iterations: 2, seeds: vec![3, 4], ..AttackConfig::default().with_prior_scale(1e-3) };
    let base = AttackConfig { losses: LossToggles { image_prior: false, ..base.losses }, ..base };
    let all = run_attack(&cap, &params, None, &base).unwrap();
    let msa = run_attack(&cap, &params, None, &AttackConfig { mask: MaskSpec::KeepComponent { component: BlockPart::Msa }, ..base.clone() }).unwrap();
    for (a, b) in all.seeds.iter().zip(&msa.seeds) {
        let (ra, rb) = (&a.ledger[0], &b.ledger[0]);
        assert_ne!(ra.l_grad, rb.l_grad);
        assert_eq!((ra.r_image, ra.r_patch, ra.r_reg, ra.r_tv_l2, ra.lr), (rb.r_image, rb.r_patch, rb.r_reg, rb.r_tv_l2, rb.lr));
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let (params, _, _, cap) = small_setup(2, 9);
    let cfg = AttackConfig { iterations: 20, seeds: vec![1, 2, 3], ..AttackConfig::default().with_prior_scale(1e-3) };
    let cfg = AttackConfig { losses: LossToggles { image_prior: false, ..cfg.losses }, ..cfg };
    let a = run_attack(&cap, &params, None, &cfg).unwrap();
    let b = run_attack(&cap, &params, None, &cfg).unwrap();
    assert_eq!(a.consensus, b.consensus);
    for (x, y) in a.seeds.iter().zip(&b.seeds) {
        assert_eq!(x.recon, y.recon);
        assert_eq!(x.ledger, y.ledger);
    }
    // the registration term is live once a consensus exists
    assert!(a.seeds[0].ledger.iter().any(|r| r.r_reg > 0.0));
}

#[test]
fn image_prior_needs_a_prior_and_warns_at_one_image() {
    let d = desk();
    let idx = draw_batch(&d.data, 1, 0).unwrap();
    let (x, y) = d.data.batch(&idx).unwrap();
    let cap = capture_gradients(&d.victim, &x, &y).unwrap();
    let cfg = AttackConfig { iterations: 4, ..AttackConfig::default() };
    assert!(matches!(run_attack(&cap, &d.victim, None, &cfg), Err(Error::Contract(_))));
    let r = run_attack(&cap, &d.victim, Some(&d.prior), &cfg).unwrap();
    assert_eq!(r.warnings.len(), 1);
    assert_eq!(r.labels, y);
}

#[test]
fn capture_archive_round_trip() {
    let (params, _, _, cap) = small_setup(3, 10);
    let noisy = apply_defense(&cap, &params.config, 0.1, DefenseTarget::LastThird, 1).unwrap();
    let back = GradientCapture::from_archive(&noisy.to_archive().unwrap()).unwrap();
    assert_eq!(back, noisy);
    assert!(back.check_victim(&params.config).is_ok());
    assert!(back.check_victim(&VitConfig { depth: 2, ..small() }).is_err());
}
