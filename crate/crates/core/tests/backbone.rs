mod common;

use common::{rng, uniform};
use tclnet::backbone::{make_learners, stack_frames, Backbone, BackboneConfig};
use tclnet::config::digest_bytes;
use tclnet::nn::{Adam, Forward, Params};
use tclnet::pipeline::{ce_heads_loss, Model, ModelConfig};
use tclnet::tse::SeoConfig;
use tclnet::tsb::{Tsb, TsbConfig};
use tclnet::{grad_check, BnMode, Error, Tape, Tensor};

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        in_channels: 2,
        frame_height: 16,
        frame_width: 8,
        stage_channels: vec![3, 4, 5],
        stage_strides: vec![2, 1, 1],
        blocks_per_stage: 1,
        head_channels: 6,
    }
}

#[test]
fn single_frame_without_tsb_gives_sixteen_by_eight() {
    let cfg = BackboneConfig::default();
    let mut params = Params::new();
    let bb = Backbone::new(&mut params, &mut rng(0), cfg.clone()).unwrap();
    let x = uniform(&mut rng(1), &[1, 3, 64, 32], 0.0, 1.0);
    let tape = Tape::new();
    let mut f = Forward::eval(&tape, &mut params);
    let out = bb.forward(&mut f, tape.constant(&x), 1, None).unwrap();
    assert_eq!(out.maps.shape(), vec![1, 64, 16, 8]);
    assert_eq!(out.tsb_stage, None);
    assert!(out.attention.is_empty());
    assert_eq!(out.stage_maps.len(), 3);
}

#[test]
fn mismatched_frames_are_dimension_errors() {
    let a = Tensor::zeros(&[3, 64, 32]);
    let b = Tensor::zeros(&[3, 32, 64]);
    assert!(matches!(stack_frames(&[a.clone(), b]), Err(Error::Dimension { .. })));
    assert_eq!(stack_frames(&[a.clone(), a]).unwrap().shape(), &[2, 3, 64, 32]);

    let mut params = Params::new();
    let bb = Backbone::new(&mut params, &mut rng(0), BackboneConfig::default()).unwrap();
    let tape = Tape::new();
    let mut f = Forward::eval(&tape, &mut params);
    let wrong = tape.constant(&Tensor::zeros(&[2, 3, 32, 64]));
    assert!(matches!(bb.forward(&mut f, wrong, 2, None), Err(Error::Dimension { .. })));
}

fn stage_hashes(stage: Option<usize>) -> (Vec<String>, Option<usize>) {
    let cfg = small_backbone();
    let mut params = Params::new();
    let bb = Backbone::new(&mut params, &mut rng(3), cfg.clone()).unwrap();
    let tsb = stage.map(|s| {
        Tsb::new(
            &mut params,
            TsbConfig {
                stage: s,
                ..TsbConfig::default()
            },
            cfg.stage_channels[s - 1],
        )
    });
    let x = uniform(&mut rng(4), &[2 * 3, 2, 16, 8], -1.0, 1.0);
    let tape = Tape::new();
    let mut f = Forward::train(&tape, &mut params);
    let out = bb.forward(&mut f, tape.constant(&x), 3, tsb.as_ref()).unwrap();
    let hashes = out.stage_maps.iter().map(|m| digest_bytes(&m.value().to_bytes())).collect();
    (hashes, out.tsb_stage)
}

#[test]
fn tsb_stage_moves_only_the_boosting_point() {
    let (plain, none) = stage_hashes(None);
    assert_eq!(none, None);
    for s in 1..=3 {
        let (h, at) = stage_hashes(Some(s));
        assert_eq!(at, Some(s));
        // identical before the insertion point, different from it on
        assert_eq!(h[..s - 1], plain[..s - 1], "stage {s}");
        for i in s - 1..3 {
            assert_ne!(h[i], plain[i], "stage {s}, map {i}");
        }
    }
    let (two, _) = stage_hashes(Some(2));
    let (three, _) = stage_hashes(Some(3));
    assert_eq!(two[0], three[0]);
    assert_eq!(three[1], plain[1]);
    assert_ne!(two[1], three[1]);
}

#[test]
fn clip_forward_without_tsb_equals_per_frame_forward() {
    let cfg = small_backbone();
    let mut params = Params::new();
    let bb = Backbone::new(&mut params, &mut rng(5), cfg).unwrap();
    let x = uniform(&mut rng(6), &[4, 2, 16, 8], -1.0, 1.0);
    let tape = Tape::new();
    let mut f = Forward::eval(&tape, &mut params);
    let all = bb.forward(&mut f, tape.constant(&x), 4, None).unwrap().maps.value();
    let per = all.numel() / 4;
    for t in 0..4 {
        let frame = Tensor::new(&[1, 2, 16, 8], x.data()[t * 256..(t + 1) * 256].to_vec()).unwrap();
        let one = bb.forward(&mut f, tape.constant(&frame), 1, None).unwrap().maps.value();
        assert_eq!(one.data(), &all.data()[t * per..(t + 1) * per]);
    }
}

fn tiny_model(seed: u64, use_tsb: bool) -> Model {
    let cfg = ModelConfig {
        backbone: small_backbone(),
        seo: SeoConfig {
            n_learners: 2,
            block_height: 2,
            block_width: None,
            stride_h: 1,
            stride_w: 1,
            seo: true,
        },
        tsb: TsbConfig {
            stage: 2,
            ..TsbConfig::default()
        },
        use_tsb,
    };
    Model::new(cfg, 3, seed).unwrap()
}

#[test]
fn full_pipeline_gradient_matches_finite_differences() {
    // eps 1e-6 leaves round-off near 1e-4 on the smallest input gradients
    for seed in 0..3 {
        let model = tiny_model(seed, true);
        let x = uniform(&mut rng(10 + seed), &[2 * 4, 2, 16, 8], -1.0, 1.0);
        let labels = [0, 2];
        let err = grad_check(
            |tape, xv| {
                let mut p = model.params.clone();
                let mut f = Forward::with(tape, &mut p, BnMode::Train, false);
                let out = model.net.forward(&mut f, xv, 4)?;
                let ce = ce_heads_loss(&out.logits, &labels)?;
                ce.add(out.descriptor.mul(out.descriptor)?.scale(0.1).sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn learner_parameter_counts() {
    let cfg = BackboneConfig::default();
    let count = |n: usize| {
        let mut p = Params::new();
        make_learners(&mut p, &mut rng(0), &cfg, n).unwrap();
        (
            p.trainable_count(),
            p.trainable_count_with_prefix("learners.trunk"),
            p.trainable_count_with_prefix("learners.head1"),
        )
    };
    let (two, trunk, head) = count(2);
    assert_eq!(two, trunk + 2 * head);
    let (three, _, _) = count(3);
    assert_eq!(three - two, head);
    assert!(make_learners(&mut Params::new(), &mut rng(0), &cfg, 0).is_err());
}

#[test]
fn trunk_update_from_learner_one_moves_learner_two() {
    let cfg = small_backbone();
    let mut params = Params::new();
    let learners = make_learners(&mut params, &mut rng(1), &cfg, 2).unwrap();
    let x = uniform(&mut rng(2), &[3, 5, 6, 4], -1.0, 1.0);
    let out2 = |params: &mut Params| {
        let tape = Tape::new();
        let mut f = Forward::eval(&tape, params);
        learners.forward(&mut f, 1, tape.constant(&x)).unwrap().value()
    };
    let before = out2(&mut params);
    let digest_before = params.digest();
    let tape = Tape::new();
    let mut f = Forward::train(&tape, &mut params);
    let y = learners.forward(&mut f, 0, tape.constant(&x)).unwrap();
    tape.backward(y.sum()).unwrap();
    let grads = f.grads();
    assert!(grads.iter().any(|(id, _)| f.params().name(*id).starts_with("learners.trunk")));
    assert!(grads
        .iter()
        .filter(|(id, _)| f.params().name(*id).starts_with("learners.head2"))
        .all(|(_, g)| g.data().iter().all(|&v| v == 0.0)));
    drop(f);
    Adam::new(0.05).step(&mut params, &grads);
    assert_ne!(digest_before, params.digest());
    let after = out2(&mut params);
    assert!(before.data().iter().zip(after.data()).any(|(a, b)| a != b));
}

#[test]
fn heads_differ_at_initialisation() {
    let cfg = small_backbone();
    let mut params = Params::new();
    let learners = make_learners(&mut params, &mut rng(7), &cfg, 2).unwrap();
    let x = uniform(&mut rng(8), &[2, 5, 6, 4], -1.0, 1.0);
    let tape = Tape::new();
    let mut f = Forward::eval(&tape, &mut params);
    let a = learners.forward(&mut f, 0, tape.constant(&x)).unwrap().value();
    let b = learners.forward(&mut f, 1, tape.constant(&x)).unwrap().value();
    assert_eq!(a.shape(), &[2, 6]);
    assert!(a.data().iter().zip(b.data()).any(|(p, q)| (p - q).abs() > 1e-6));
}
