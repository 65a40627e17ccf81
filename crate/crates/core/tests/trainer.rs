mod common;

use bmb::data::{AugmentationConfig, Sample};
use bmb::numerics::ModelParams;
use bmb::trainer::{
    fit, step_losses, train_step, FitData, LossCoefficients, Mode, StepContext, TrainConfig,
    TrainState,
};
use common::{gradient_check, linear, random_batch, random_params, Paths};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn no_aug() -> AugmentationConfig {
    AugmentationConfig {
        weak_noise_sigma: 0.0,
        strong_noise_sigma: 0.0,
        strong_dropout_prob: 0.0,
        strong_scale_jitter: 0.0,
    }
}

fn sample(id: u64, x: &[f64], label: Option<usize>) -> Sample {
    Sample {
        id,
        features: x.to_vec(),
        label,
    }
}

fn coeffs(aux: bool) -> LossCoefficients {
    LossCoefficients {
        lambda_u: 0.7,
        lambda_m: 1.3,
        use_aux: aux,
        aux_stopgrad: false,
    }
}

#[test]
fn each_loss_path_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let cases = [
        (
            "supervised base",
            Paths {
                labeled: true,
                unlabeled: false,
                memory: false,
                aux: false,
            },
        ),
        (
            "unsupervised base",
            Paths {
                labeled: false,
                unlabeled: true,
                memory: false,
                aux: false,
            },
        ),
        (
            "supervised aux",
            Paths {
                labeled: true,
                unlabeled: false,
                memory: false,
                aux: true,
            },
        ),
        (
            "unsupervised aux",
            Paths {
                labeled: false,
                unlabeled: true,
                memory: false,
                aux: true,
            },
        ),
        (
            "memory",
            Paths {
                labeled: false,
                unlabeled: false,
                memory: true,
                aux: true,
            },
        ),
        (
            "all",
            Paths {
                labeled: true,
                unlabeled: true,
                memory: true,
                aux: true,
            },
        ),
    ];
    for (name, paths) in cases {
        for _ in 0..8 {
            let d = rng.random_range(1..=8);
            let k = rng.random_range(2..=4);
            let b = rng.random_range(1..=4);
            let hidden: Vec<usize> = (0..rng.random_range(0..=2))
                .map(|_| rng.random_range(2..=6))
                .collect();
            let params = random_params(&mut rng, d, &hidden, k);
            let batch = random_batch(&mut rng, &params, b, paths);
            let err = gradient_check(&params, &batch, &coeffs(paths.aux));
            assert!(
                err < 1e-4,
                "{name}: relative error {err} (d={d}, k={k}, b={b}, hidden={hidden:?})"
            );
        }
    }
}

#[test]
fn memory_loss_trains_only_the_aux_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = random_params(&mut rng, 5, &[4, 3], 3);
    let paths = Paths {
        labeled: false,
        unlabeled: false,
        memory: true,
        aux: true,
    };
    let batch = random_batch(&mut rng, &params, 4, paths);
    let (terms, grads) = step_losses(&params, &batch, &coeffs(true)).unwrap();
    assert!(terms.loss_mem > 0.0);
    for layer in &grads.encoder {
        assert!(layer
            .weight
            .as_slice()
            .iter()
            .chain(&layer.bias)
            .all(|&g| g == 0.0));
    }
    assert!(grads.base_head.weight.as_slice().iter().all(|&g| g == 0.0));
    assert!(grads.aux_head.weight.as_slice().iter().any(|&g| g != 0.0));

    // finite-difference spot check: moving encoder or base weights leaves L_mem unchanged
    let mut moved = params.clone();
    moved.encoder[0].weight.as_mut_slice()[0] += 1e-3;
    moved.base_head.bias[1] -= 1e-3;
    let (t2, _) = step_losses(&moved, &batch, &coeffs(true)).unwrap();
    assert_eq!(t2.loss_mem, terms.loss_mem);
}

#[test]
fn stopgrad_cuts_aux_gradient_at_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = random_params(&mut rng, 4, &[5], 3);
    let paths = Paths {
        labeled: true,
        unlabeled: true,
        memory: false,
        aux: true,
    };
    let batch = random_batch(&mut rng, &params, 4, paths);
    let joint = step_losses(&params, &batch, &coeffs(true)).unwrap().1;
    let cut = step_losses(
        &params,
        &batch,
        &LossCoefficients {
            aux_stopgrad: true,
            ..coeffs(true)
        },
    )
    .unwrap()
    .1;
    let base_only = step_losses(&params, &batch, &coeffs(false)).unwrap().1;
    assert_eq!(cut.encoder, base_only.encoder);
    assert_ne!(joint.encoder, cut.encoder);
    assert_eq!(joint.aux_head, cut.aux_head);
}

fn micro_params() -> ModelParams {
    ModelParams::new(
        vec![linear(
            &[&[1.0, 0.0, 0.5], &[0.0, 1.0, -0.5], &[0.3, -0.2, 1.0]],
            &[0.1, -0.1, 0.0],
        )],
        linear(&[&[1.0, -1.0, 0.5], &[-0.5, 1.0, 0.2]], &[0.0, 0.1]),
        linear(&[&[0.8, -0.6, 0.1], &[-0.4, 0.9, 0.3]], &[0.05, -0.05]),
    )
    .unwrap()
}

/// Straight-line forward pass of the micro network: ReLU layer, then a head.
fn logits(
    enc_w: &[[f64; 3]; 3],
    enc_b: &[f64; 3],
    head_w: &[[f64; 3]; 2],
    head_b: &[f64; 2],
    x: &[f64],
) -> [f64; 2] {
    let mut h = [0.0; 3];
    for i in 0..3 {
        let z = enc_w[i][0] * x[0] + enc_w[i][1] * x[1] + enc_w[i][2] * x[2] + enc_b[i];
        h[i] = if z > 0.0 { z } else { 0.0 };
    }
    let mut out = [0.0; 2];
    for c in 0..2 {
        out[c] = head_w[c][0] * h[0] + head_w[c][1] * h[1] + head_w[c][2] * h[2] + head_b[c];
    }
    out
}

fn probs(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

#[test]
fn micro_batch_total_matches_straight_line_oracle() {
    let enc_w = [[1.0, 0.0, 0.5], [0.0, 1.0, -0.5], [0.3, -0.2, 1.0]];
    let enc_b = [0.1, -0.1, 0.0];
    let base_w = [[1.0, -1.0, 0.5], [-0.5, 1.0, 0.2]];
    let base_b = [0.0, 0.1];
    let aux_w = [[0.8, -0.6, 0.1], [-0.4, 0.9, 0.3]];
    let aux_b = [0.05, -0.05];

    let lab_x = [
        [1.0, 0.2, 0.3],
        [0.1, 1.5, 0.0],
        [2.0, -0.5, 1.0],
        [-0.3, 0.8, 0.6],
    ];
    let lab_y = [0usize, 1, 0, 1];
    let unl_x = [
        [2.5, 0.0, 0.4],
        [0.2, 0.3, 0.1],
        [-0.5, 2.2, 0.3],
        [0.4, 0.5, -0.2],
    ];
    let labeled_counts = [6usize, 2];
    let ledger_before = [5usize, 2];
    let (tau, lambda_u) = (0.6, 0.7);

    // independent recomputation
    let ce = |p: [f64; 2], y: usize| -p[y].ln();
    let mut ls_b = 0.0;
    let mut ls_a = 0.0;
    for (x, &y) in lab_x.iter().zip(&lab_y) {
        ls_b += ce(probs(logits(&enc_w, &enc_b, &base_w, &base_b, x)), y);
        let w = 2.0 / labeled_counts[y] as f64;
        ls_a += w * ce(probs(logits(&enc_w, &enc_b, &aux_w, &aux_b, x)), y);
    }
    let (mut lu_b, mut lu_a) = (0.0, 0.0);
    let (mut n_base, mut n_aux) = (0, 0);
    for x in &unl_x {
        let pb = probs(logits(&enc_w, &enc_b, &base_w, &base_b, x));
        let qb = if pb[1] > pb[0] { 1 } else { 0 };
        if pb[qb] >= tau {
            lu_b += ce(pb, qb);
            n_base += 1;
        }
        let pa = probs(logits(&enc_w, &enc_b, &aux_w, &aux_b, x));
        let qa = if pa[1] > pa[0] { 1 } else { 0 };
        if pa[qa] >= tau {
            let w = 2.0 / ledger_before[qa] as f64;
            lu_a += w * ce(pa, qa);
            n_aux += 1;
        }
    }
    assert!(
        (1..4).contains(&n_base) && (1..4).contains(&n_aux),
        "fixture should mix confident/unconfident rows"
    );
    let (ls_b, ls_a, lu_b, lu_a) = (ls_b / 4.0, ls_a / 4.0, lu_b / 4.0, lu_a / 4.0);
    let expected = ls_b + lambda_u * lu_b + ls_a + lambda_u * lu_a;

    let cfg = TrainConfig {
        tau,
        alpha: 1.0,
        lambda_u,
        batch_size: 4,
        get_fraction: 0.0,
        warmup_epochs: 0,
        memory_capacity: 8,
        mode: Mode::Bmb,
        hidden_sizes: vec![3],
        ..Default::default()
    };
    let mut state = TrainState::with_params(&cfg, micro_params()).unwrap();
    for id in 0..7u64 {
        state.ledger.record(100 + id, usize::from(id >= 5)).unwrap();
    }
    let lab: Vec<Sample> = lab_x
        .iter()
        .zip(&lab_y)
        .enumerate()
        .map(|(i, (x, &y))| sample(i as u64, x, Some(y)))
        .collect();
    let unl: Vec<Sample> = unl_x
        .iter()
        .enumerate()
        .map(|(i, x)| sample(10 + i as u64, x, None))
        .collect();
    let aug = no_aug();
    let ctx = StepContext {
        cfg: &cfg,
        augment: &aug,
        labeled_counts: &labeled_counts,
    };
    let m = train_step(
        &mut state,
        &lab.iter().collect::<Vec<_>>(),
        &unl.iter().collect::<Vec<_>>(),
        &ctx,
    )
    .unwrap();

    let l = m.losses;
    for (got, want) in [
        (l.loss_s_b, ls_b),
        (l.loss_s_a, ls_a),
        (l.loss_u_b, lu_b),
        (l.loss_u_a, lu_a),
        (l.loss_total, expected),
    ] {
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
    assert_eq!(l.loss_mem, 0.0);
    assert_eq!(state.ledger.len(), 7 + n_aux);
    assert_eq!(state.bank.len(), n_aux);
}

#[test]
fn degenerate_weights_reduce_to_two_supervised_heads() {
    let cfg = TrainConfig {
        lambda_u: 0.0,
        lambda_m: 0.0,
        alpha: 0.0,
        tau: 0.5,
        batch_size: 4,
        warmup_epochs: 0,
        hidden_sizes: vec![3],
        ..Default::default()
    };
    let mut state = TrainState::with_params(&cfg, micro_params()).unwrap();
    let lab: Vec<Sample> = (0..4)
        .map(|i| sample(i, &[i as f64 * 0.3, 1.0, -0.2], Some((i % 2) as usize)))
        .collect();
    let unl: Vec<Sample> = (0..4)
        .map(|i| sample(10 + i, &[1.0, i as f64, 0.5], None))
        .collect();
    let aug = no_aug();
    let ctx = StepContext {
        cfg: &cfg,
        augment: &aug,
        labeled_counts: &[2, 2],
    };
    let m = train_step(
        &mut state,
        &lab.iter().collect::<Vec<_>>(),
        &unl.iter().collect::<Vec<_>>(),
        &ctx,
    )
    .unwrap();
    assert!((m.losses.loss_total - (m.losses.loss_s_b + m.losses.loss_s_a)).abs() < 1e-12);
}

fn gating_state(tau: f64) -> (TrainConfig, TrainState) {
    let cfg = TrainConfig {
        tau,
        batch_size: 4,
        warmup_epochs: 0,
        hidden_sizes: vec![],
        memory_capacity: 16,
        ..Default::default()
    };
    // no encoder layers: features are the raw inputs
    let params = ModelParams::new(
        vec![],
        linear(&[&[4.0, 0.0], &[-4.0, 0.0]], &[0.0, 0.0]),
        linear(&[&[5.0, 0.0], &[-5.0, 0.0]], &[0.0, 0.0]),
    )
    .unwrap();
    let state = TrainState::with_params(&cfg, params).unwrap();
    (cfg, state)
}

#[test]
fn below_threshold_samples_never_reach_losses_ledger_or_bank() {
    let lab: Vec<Sample> = (0..4)
        .map(|i| {
            sample(
                i,
                &[if i % 2 == 0 { 1.0 } else { -1.0 }, 0.0],
                Some((i % 2) as usize),
            )
        })
        .collect();
    let lr: Vec<&Sample> = lab.iter().collect();
    let aug = no_aug();

    // every unlabeled sample sits near the boundary
    let (cfg, mut state) = gating_state(0.9);
    let ctx = StepContext {
        cfg: &cfg,
        augment: &aug,
        labeled_counts: &[2, 2],
    };
    let unl: Vec<Sample> = (0..4)
        .map(|i| sample(20 + i, &[0.01 * i as f64, 3.0], None))
        .collect();
    let m = train_step(&mut state, &lr, &unl.iter().collect::<Vec<_>>(), &ctx).unwrap();
    assert_eq!(
        (m.losses.loss_u_b, m.losses.loss_u_a, m.losses.loss_mem),
        (0.0, 0.0, 0.0)
    );
    assert_eq!((m.mask_rate, m.aux_mask_rate), (0.0, 0.0));
    assert!(state.ledger.is_empty() && state.bank.is_empty());

    // mixed batch: only ids 30 and 32 are confident
    let (cfg, mut state) = gating_state(0.9);
    let ctx = StepContext {
        cfg: &cfg,
        augment: &aug,
        labeled_counts: &[2, 2],
    };
    let unl = [
        sample(30, &[2.0, 0.0], None),
        sample(31, &[0.02, 0.0], None),
        sample(32, &[-2.0, 0.0], None),
        sample(33, &[-0.03, 1.0], None),
    ];
    let ur: Vec<&Sample> = unl.iter().collect();
    train_step(&mut state, &lr, &ur, &ctx).unwrap();
    let ids: Vec<u64> = {
        let mut v: Vec<u64> = state.ledger.iter().map(|(id, _)| id).collect();
        v.sort_unstable();
        v
    };
    assert_eq!(ids, vec![30, 32]);
    assert_eq!(state.ledger.counts(), &[1, 1]);
    assert_eq!(state.bank.counts(), vec![1, 1]);
    assert!(state.bank.records().all(|r| r.confidence >= 0.9));

    // masked rows contribute nothing: changing them leaves the loss unchanged
    let (cfg_a, mut a) = gating_state(0.9);
    let (_, mut b) = gating_state(0.9);
    let ctx = StepContext {
        cfg: &cfg_a,
        augment: &aug,
        labeled_counts: &[2, 2],
    };
    let mut unl_b = unl.clone();
    unl_b[1].features = vec![-0.01, 7.0];
    let ma = train_step(&mut a, &lr, &ur, &ctx).unwrap();
    let mb = train_step(&mut b, &lr, &unl_b.iter().collect::<Vec<_>>(), &ctx).unwrap();
    assert_eq!(ma.losses.loss_u_b, mb.losses.loss_u_b);
    assert_eq!(ma.losses.loss_u_a, mb.losses.loss_u_a);
}

fn tiny_data() -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..60)
        .map(|i| {
            let y = (i % 3) as usize;
            let x: Vec<f64> = (0..4)
                .map(|j| if j == y { 2.0 } else { 0.0 } + rng.random_range(-1.0..1.0))
                .collect();
            sample(i, &x, Some(y))
        })
        .collect()
}

#[test]
fn fit_with_zero_epochs_returns_initial_state() {
    let data = tiny_data();
    let cfg = TrainConfig {
        epochs: 0,
        hidden_sizes: vec![4],
        ..Default::default()
    };
    let out = fit(
        FitData {
            labeled: &data,
            unlabeled: &[],
            test: &data,
            num_classes: 3,
            true_unlabeled_counts: None,
        },
        &cfg,
        &AugmentationConfig::default(),
        &[],
        &mut |_, _| Ok(()),
    )
    .unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.state.step, 0);
    assert_eq!(
        out.state.params,
        TrainState::new(&cfg, 4, 3).unwrap().params
    );
    assert!(out.final_report.is_none());
}

#[test]
fn fit_is_deterministic_and_warmup_keeps_memory_empty() {
    let data = tiny_data();
    let (lab, rest) = data.split_at(24);
    let unl: Vec<Sample> = rest
        .iter()
        .map(|s| Sample {
            label: None,
            ..s.clone()
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 4,
        iters_per_epoch: 10,
        batch_size: 8,
        warmup_epochs: 2,
        hidden_sizes: vec![6],
        tau: 0.4,
        ..Default::default()
    };
    let run = || {
        let mut sizes = Vec::new();
        let out = fit(
            FitData {
                labeled: lab,
                unlabeled: &unl,
                test: &data,
                num_classes: 3,
                true_unlabeled_counts: None,
            },
            &cfg,
            &AugmentationConfig::default(),
            &[],
            &mut |log, st| {
                sizes.push((log.epoch, st.bank.len(), st.ledger.len()));
                Ok(())
            },
        )
        .unwrap();
        (out, sizes)
    };
    let (a, sa) = run();
    let (b, _) = run();
    assert_eq!(a.log, b.log);
    assert_eq!(a.state.params, b.state.params);
    assert_eq!(a.state.step, 40);
    for &(epoch, bank, ledger) in &sa {
        if epoch < 2 {
            assert_eq!((bank, ledger), (0, 0), "epoch {epoch}");
        }
    }
    assert!(sa.last().unwrap().2 > 0, "ledger fills after warmup");
}

#[test]
fn fixmatch_and_vanilla_leave_bmb_machinery_idle() {
    let data = tiny_data();
    let (lab, rest) = data.split_at(24);
    let unl: Vec<Sample> = rest
        .iter()
        .map(|s| Sample {
            label: None,
            ..s.clone()
        })
        .collect();
    for mode in [Mode::Vanilla, Mode::Fixmatch] {
        let cfg = TrainConfig {
            epochs: 2,
            iters_per_epoch: 10,
            batch_size: 8,
            warmup_epochs: 0,
            hidden_sizes: vec![6],
            tau: 0.5,
            mode,
            ..Default::default()
        };
        let init = TrainState::new(&cfg, 4, 3).unwrap();
        let out = fit(
            FitData {
                labeled: lab,
                unlabeled: &unl,
                test: &data,
                num_classes: 3,
                true_unlabeled_counts: None,
            },
            &cfg,
            &AugmentationConfig::default(),
            &[],
            &mut |_, _| Ok(()),
        )
        .unwrap();
        assert!(out.state.bank.is_empty() && out.state.ledger.is_empty());
        assert_eq!(out.state.params.aux_head, init.params.aux_head, "{mode:?}");
        let unsup: f64 = out.log.iter().map(|l| l.losses.loss_u_b).sum();
        assert_eq!(unsup == 0.0, mode == Mode::Vanilla);
    }
}

#[test]
fn predictions_follow_mode_head() {
    let (_, mut state) = gating_state(0.9);
    state.params.base_head = linear(&[&[-4.0, 0.0], &[4.0, 0.0]], &[0.0, 0.0]);
    state.ema.shadow = state.params.clone();
    let xs = [sample(0, &[1.0, 0.0], None)];
    assert_eq!(bmb::trainer::predict(&state, &xs, true).unwrap(), vec![0]);
    state.mode = Mode::Fixmatch;
    assert_eq!(bmb::trainer::predict(&state, &xs, true).unwrap(), vec![1]);
    let bad = [sample(1, &[1.0], None)];
    assert!(bmb::trainer::predict(&state, &bad, true).is_err());
}
