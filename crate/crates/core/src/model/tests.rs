use super::*;
use crate::synth::{generate_scene, SceneConfig};
use crate::tensor::{choose_probes, probe_param_gradients, sigmoid};

fn small_config(variant: Variant) -> SpotterConfig {
    SpotterConfig {
        image_size: [64, 64],
        channels: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        mlp_ratio: 2,
        num_proposals: 6,
        num_points: 9,
        num_classes: crate::synth::ALPHABET_SIZE,
        variant,
        ..Default::default()
    }
}

fn scene(config: &SpotterConfig, seed: u64) -> (Tensor<f64>, Vec<InstanceTarget>) {
    let mut sc = SceneConfig::overfit();
    sc.width = config.image_size[0];
    sc.height = config.image_size[1];
    sc.instances = [1, 2];
    sc.glyph_height = [10.0, 14.0];
    sc.text_len = [1, 3];
    let s = generate_scene(&sc, seed, "t").unwrap();
    (
        image_tensor(&s.image),
        prepare_targets(&s.annotation, config).unwrap(),
    )
}

#[test]
fn forward_shapes_across_config_matrix() {
    for variant in [Variant::Full, Variant::FscrsOnly, Variant::Baseline] {
        for (size, k, n, depth) in [
            ([64, 64], 5, 4, 0),
            ([96, 64], 12, 7, 2),
            ([64, 32], 3, 2, 1),
        ] {
            let cfg = SpotterConfig {
                image_size: size,
                num_proposals: k,
                num_points: n,
                decoder_depth: depth,
                num_classes: 10,
                ..small_config(variant)
            };
            let model = Spotter::<f32>::new(cfg.clone(), 3).unwrap();
            let tape = Tape::new();
            let img = Tensor::full(&[size[1], size[0], 1], 0.2);
            let out = model.forward(&tape, &img).unwrap();
            let h = out.heads;
            assert_eq!(tape.shape(h.instance_logits), [k]);
            assert_eq!(tape.shape(h.char_logits), [k, n, 11]);
            assert_eq!(tape.shape(h.center_points), [k, n, 2]);
            assert_eq!(tape.shape(h.bbox), [k, 4]);
            assert_eq!(out.token_count, cfg.token_count());
            assert_eq!(out.proposals.k(), k);
            out.proposals.validate().unwrap();
            assert_eq!(out.token_scores.is_some(), variant.uses_fscrs());
            for v in [h.instance_logits, h.char_logits, h.center_points, h.bbox] {
                assert!(tape.value(v).is_finite());
            }
        }
    }
}

#[test]
fn defaults_give_97_way_character_logits() {
    let model = Spotter::<f32>::new(SpotterConfig::default(), 0).unwrap();
    let tape = Tape::inference();
    let out = model
        .forward(&tape, &Tensor::zeros(&[128, 128, 1]))
        .unwrap();
    assert_eq!(tape.shape(out.heads.char_logits), [100, 25, 97]);
    assert_eq!(out.token_count, 340);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = small_config(Variant::Full);
    for bad in [
        SpotterConfig {
            image_size: [48, 64],
            ..base.clone()
        },
        SpotterConfig {
            num_proposals: 86,
            ..base.clone()
        },
        SpotterConfig {
            num_points: 1,
            ..base.clone()
        },
        SpotterConfig {
            channels: 6,
            ..base.clone()
        },
    ] {
        assert!(Spotter::<f32>::new(bad, 0).is_err());
    }
    let model = Spotter::<f32>::new(base, 0).unwrap();
    assert!(model
        .forward(&Tape::new(), &Tensor::zeros(&[32, 64, 1]))
        .is_err());
}

#[test]
fn zero_heads_score_one_half() {
    let cfg = small_config(Variant::Full);
    let mut model = Spotter::<f64>::new(cfg.clone(), 1).unwrap();
    model
        .heads
        .visit_all_mut(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let tape = Tape::new();
    let (img, _) = scene(&cfg, 2);
    let out = model.forward(&tape, &img).unwrap();
    assert!(tape
        .value(out.heads.instance_logits)
        .data()
        .iter()
        .all(|&l| sigmoid(l) == 0.5));
    let pts = tape.value(out.heads.center_points);
    assert!(pts.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    // With zero offsets the points sit on the sampled proposal curves.
    let flat: Vec<f64> = out
        .proposals
        .sampled_points
        .iter()
        .flatten()
        .flatten()
        .copied()
        .collect();
    for (a, b) in pts.data().iter().zip(&flat) {
        assert!((a - b).abs() < 1e-9);
    }
}

impl<T: Scalar> Heads<T> {
    fn visit_all_mut(&mut self, mut f: impl FnMut(&mut Param<T>)) {
        self.instance.visit_mut(&mut f);
        self.chars.visit_mut(&mut f);
        self.points.visit_mut(&mut f);
        self.bbox.visit_mut(&mut f);
    }
}

#[test]
fn empty_truth_leaves_only_instance_classification() {
    let cfg = small_config(Variant::Baseline);
    let model = Spotter::<f64>::new(cfg.clone(), 4).unwrap();
    let tape = Tape::new();
    let (img, _) = scene(&cfg, 5);
    let out = model.forward(&tape, &img).unwrap();
    let loss = compute_loss(&tape, &out, &[], &cfg, &LossWeights::default()).unwrap();
    assert!(loss.matches.is_empty());
    let t = loss.terms;
    assert_eq!((t.character, t.points, t.bbox), (0.0, 0.0, 0.0));
    // Oracle: every query is background, focal sum with normalizer 1.
    let expected: f64 = tape
        .value(out.heads.instance_logits)
        .data()
        .iter()
        .map(|&l| {
            let p: f64 = sigmoid(l);
            (1.0 - FOCAL_TEST_ALPHA) * p * p * -(1.0 - p).ln()
        })
        .sum();
    assert!((t.instance - expected).abs() < 1e-9 * expected.max(1.0));
    assert!((t.total - 2.0 * expected).abs() < 1e-9 * expected.max(1.0));
}

const FOCAL_TEST_ALPHA: f64 = 0.25;

#[test]
fn perfect_outputs_zero_point_and_box_terms() {
    let cfg = small_config(Variant::Full);
    let model = Spotter::<f64>::new(cfg.clone(), 6).unwrap();
    let tape = Tape::new();
    let (img, _) = scene(&cfg, 7);
    let out = model.forward(&tape, &img).unwrap();
    let pts = tape.value(out.heads.center_points);
    let boxes = tape.value(out.heads.bbox);
    // Targets built from the model's own outputs for queries 1 and 3.
    let targets: Vec<InstanceTarget> = [1usize, 3]
        .iter()
        .map(|&q| InstanceTarget {
            control_points: out.proposals.control_points[q],
            points: pts.data()[q * 18..(q + 1) * 18]
                .chunks(2)
                .map(|p| [p[0], p[1]])
                .collect(),
            bbox: std::array::from_fn(|i| boxes.row(q)[i]),
            chars: vec![cfg.blank(); cfg.num_points],
        })
        .collect();
    let loss = compute_loss(&tape, &out, &targets, &cfg, &LossWeights::default()).unwrap();
    assert_eq!(loss.terms.points, 0.0);
    assert_eq!(loss.terms.bbox, 0.0);
    let mut preds: Vec<usize> = loss.matches.iter().map(|m| m.1).collect();
    preds.sort_unstable();
    assert_eq!(preds, [1, 3]);
}

#[test]
fn loss_ignores_ground_truth_order() {
    let cfg = small_config(Variant::Full);
    let model = Spotter::<f64>::new(cfg.clone(), 8).unwrap();
    let mut sc = SceneConfig::overfit();
    sc.width = 64;
    sc.height = 64;
    sc.instances = [3, 3];
    sc.glyph_height = [8.0, 10.0];
    sc.text_len = [1, 2];
    let s = generate_scene(&sc, 9, "p").unwrap();
    let targets = prepare_targets(&s.annotation, &cfg).unwrap();
    let img = image_tensor(&s.image);
    let total = |t: &[InstanceTarget]| {
        let tape = Tape::new();
        let out = model.forward(&tape, &img).unwrap();
        compute_loss(&tape, &out, t, &cfg, &LossWeights::default())
            .unwrap()
            .terms
            .total
    };
    let a = total(&targets);
    let mut rev = targets.clone();
    rev.reverse();
    let b = total(&rev);
    assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn full_model_gradient_probes() {
    for (variant, seed) in [
        (Variant::Full, 10),
        (Variant::FscrsOnly, 11),
        (Variant::Baseline, 12),
    ] {
        let cfg = small_config(variant);
        let mut model = Spotter::<f64>::new(cfg.clone(), seed).unwrap();
        let (img, targets) = scene(&cfg, seed + 100);
        let probes = choose_probes(&model, 20, &mut init_rng(seed));
        // The sampled curves are detached, so they are held at their
        // unperturbed values while differencing.
        let fixed = model.forward(&Tape::new(), &img).unwrap().proposals;
        let report = probe_param_gradients(
            &mut model,
            |m, tape| {
                let out = m.forward_with_proposals(tape, &img, &fixed)?;
                Ok(compute_loss(tape, &out, &targets, &cfg, &LossWeights::default())?.total)
            },
            &probes,
            1e-5,
            1e-2,
        )
        .unwrap();
        assert!(report.passed, "{variant:?}: {:?}", report.probes);
    }
}

fn tiny_trainer(
    lr: f64,
    batch: usize,
) -> (Trainer<f32>, Vec<Tensor<f32>>, Vec<Vec<InstanceTarget>>) {
    let cfg = SpotterConfig {
        num_proposals: 10,
        ..small_config(Variant::Full)
    };
    let mut tc = TrainConfig {
        seed: 3,
        steps: 10,
        batch_size: batch,
        ..Default::default()
    };
    tc.optimizer.lr = lr;
    tc.optimizer.warmup_steps = 0;
    let trainer = Trainer::new(cfg.clone(), tc).unwrap();
    let (mut images, mut targets) = (Vec::new(), Vec::new());
    for s in 0..4 {
        let (img, t) = scene(&cfg, 40 + s);
        images.push(img.cast());
        targets.push(t);
    }
    (trainer, images, targets)
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (mut trainer, images, targets) = tiny_trainer(0.0, 2);
    trainer.config.optimizer.weight_decay = 0.1;
    trainer.optimizer.config = trainer.config.optimizer;
    let before = crate::tensor::Checkpoint::from_params(&trainer.model);
    for _ in 0..3 {
        trainer.train_step(&images, &targets).unwrap();
    }
    assert_eq!(
        crate::tensor::Checkpoint::from_params(&trainer.model).tensors,
        before.tensors
    );
}

#[test]
fn same_seed_same_trajectory() {
    let run = || {
        let (mut trainer, images, targets) = tiny_trainer(1e-3, 2);
        (0..4)
            .map(|_| {
                trainer
                    .train_step(&images, &targets)
                    .unwrap()
                    .loss
                    .total
                    .to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_resume_replays_exactly() {
    let (mut straight, images, targets) = tiny_trainer(1e-3, 2);
    let (mut first, _, _) = tiny_trainer(1e-3, 2);
    let full: Vec<u64> = (0..6)
        .map(|_| {
            straight
                .train_step(&images, &targets)
                .unwrap()
                .loss
                .total
                .to_bits()
        })
        .collect();
    let mut resumed: Vec<u64> = (0..3)
        .map(|_| {
            first
                .train_step(&images, &targets)
                .unwrap()
                .loss
                .total
                .to_bits()
        })
        .collect();
    let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
    let ckpt = crate::tensor::Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    let mut second = Trainer::<f32>::from_checkpoint(&ckpt, None).unwrap();
    assert_eq!(second.step, 3);
    resumed.extend((0..3).map(|_| {
        second
            .train_step(&images, &targets)
            .unwrap()
            .loss
            .total
            .to_bits()
    }));
    assert_eq!(full, resumed);
}

#[test]
fn overfits_a_fixed_batch() {
    let (mut trainer, images, targets) = tiny_trainer(3e-3, 4);
    let mut losses = Vec::new();
    for _ in 0..200 {
        losses.push(trainer.train_step(&images, &targets).unwrap().loss.total);
    }
    let (at10, at200) = (losses[9], losses[199]);
    assert!(at200 <= 0.5 * at10, "step 10 {at10}, step 200 {at200}");
}
