mod common;

use common::*;
use dipt_core::backbone::{msa_prefix, patch_embed, Backbone, Trainable};
use dipt_core::diffcore::{Tape, Tensor};
use dipt_core::prompts::{Prompt, PromptKind};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prefix_attention_matches_the_dense_oracle(
        heads in prop::sample::select(vec![1usize, 2, 4]),
        d in 1usize..5,
        n in 1usize..10,
        l in 1usize..6,
        seed in any::<u64>(),
    ) {
        let m = heads * d;
        let mut r = rng(seed);
        let block = RawBlock::random(m, &mut r);
        let h: Vec<f64> = (0..n * m).map(|_| r.random_range(-2.0..2.0)).collect();
        let pk: Vec<f64> = (0..l * m).map(|_| r.random_range(-1.0..1.0)).collect();
        let pv: Vec<f64> = (0..l * m).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let vars = block.bind(&mut tape, m);
        let hv = tape.constant(Tensor::new([n, m], h.clone()).unwrap());

        let plain = msa_prefix(&mut tape, hv, None, &vars, heads).unwrap();
        let want = dense_attention(&h, n, m, None, &block, heads);
        for (a, b) in tape.value(plain).data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-6);
        }

        let kv = tape.constant(Tensor::new([l, m], pk.clone()).unwrap());
        let vv = tape.constant(Tensor::new([l, m], pv.clone()).unwrap());
        let out = msa_prefix(&mut tape, hv, Some((kv, vv)), &vars, heads).unwrap();
        prop_assert_eq!(tape.shape(out), &[n, m]);
        let want = dense_attention(&h, n, m, Some((&pk, &pv, l)), &block, heads);
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn three_tokens_two_prefix_tokens_one_head() {
    let mut r = rng(3);
    let m = 4;
    let block = RawBlock::random(m, &mut r);
    let h: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
    let pk: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let pv: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::<f32>::new();
    let vars = {
        let to32 = |v: &[f64], shape: &[usize], tape: &mut Tape<f32>| {
            tape.constant(Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).unwrap())
        };
        let unused = to32(&[0.0], &[1], &mut tape);
        dipt_core::backbone::BlockVars {
            ln1_gamma: to32(&block.ln_g, &[m], &mut tape),
            ln1_beta: to32(&block.ln_b, &[m], &mut tape),
            qkv_weight: to32(&block.qkv_w, &[m, 3 * m], &mut tape),
            qkv_bias: to32(&block.qkv_b, &[3 * m], &mut tape),
            proj_weight: to32(&block.proj_w, &[m, m], &mut tape),
            proj_bias: to32(&block.proj_b, &[m], &mut tape),
            ln2_gamma: unused,
            ln2_beta: unused,
            fc1_weight: unused,
            fc1_bias: unused,
            fc2_weight: unused,
            fc2_bias: unused,
        }
    };
    let as32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    let hv = tape.constant(Tensor::new([3, m], as32(&h)).unwrap());
    let kv = tape.constant(Tensor::new([2, m], as32(&pk)).unwrap());
    let vv = tape.constant(Tensor::new([2, m], as32(&pv)).unwrap());
    let out = msa_prefix(&mut tape, hv, Some((kv, vv)), &vars, 1).unwrap();
    let want = dense_attention(&h, 3, m, Some((&pk, &pv, 2)), &block, 1);
    for (a, b) in tape.value(out).data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn prefix_width_mismatch_is_an_error() {
    let mut r = rng(4);
    let block = RawBlock::random(4, &mut r);
    let mut tape = Tape::<f64>::new();
    let vars = block.bind(&mut tape, 4);
    let h = tape.constant(Tensor::zeros([3, 4]));
    let k = tape.constant(Tensor::zeros([2, 5]));
    assert!(msa_prefix(&mut tape, h, Some((k, k)), &vars, 2).is_err());
}

#[test]
fn changing_one_patch_changes_only_its_token_row() {
    let cfg = tiny_config();
    let model = Backbone::new(cfg.clone(), &mut rng(5)).unwrap();
    let mut r = rng(6);
    let a = random_image(16, 16, 3, &mut r);
    let mut b = a.clone();
    // Patch (1, 0) covers rows 8..16, columns 0..8: token row 1 + 2 = 3.
    for y in 8..16 {
        for x in 0..8 {
            b.set(y, x, 1, 1.0 - a.get(y, x, 1));
        }
    }
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape, Trainable::NONE);
    let ta = patch_embed(&mut tape, &cfg, &vars, &a).unwrap();
    let tb = patch_embed(&mut tape, &cfg, &vars, &b).unwrap();
    assert_eq!(tape.shape(ta), &[cfg.num_patches() + 1, cfg.embed_dim]);
    let m = cfg.embed_dim;
    for row in 0..=cfg.num_patches() {
        let ra = &tape.value(ta).data()[row * m..(row + 1) * m];
        let rb = &tape.value(tb).data()[row * m..(row + 1) * m];
        assert_eq!(ra != rb, row == 3, "row {row}");
    }
}

#[test]
fn default_patch_embedding_shape() {
    let cfg = dipt_core::backbone::BackboneConfig::default();
    let model = Backbone::new(cfg.clone(), &mut rng(1)).unwrap();
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape, Trainable::NONE);
    let img = random_image(32, 32, 3, &mut rng(2));
    let tokens = patch_embed(&mut tape, &cfg, &vars, &img).unwrap();
    assert_eq!(tape.shape(tokens), &[65, 64]);
    let wrong = random_image(16, 16, 3, &mut rng(2));
    assert!(patch_embed(&mut tape, &cfg, &vars, &wrong).is_err());
}

#[test]
fn one_dip_token_moves_the_logits() {
    let cfg = tiny_config();
    let mut model = Backbone::new(cfg.clone(), &mut rng(8)).unwrap();
    model.params.freeze_trunk();
    let before = model.clone();
    let mut r = rng(9);
    let img = random_image(16, 16, 3, &mut r);
    let dip = Prompt::init(PromptKind::Dip, &cfg, &mut r);
    let dsp = Prompt::init(PromptKind::Dsp, &cfg, &mut r);
    let base = model.logits(&img, Some(&dip), Some(&dsp)).unwrap();
    assert_eq!(base.len(), cfg.num_classes);
    let mut moved = dip.clone();
    moved.tensors_mut().next().unwrap().data_mut()[0] += 0.5;
    let shifted = model.logits(&img, Some(&moved), Some(&dsp)).unwrap();
    let delta: f32 = base.iter().zip(&shifted).map(|(a, b)| (a - b).powi(2)).sum();
    assert!(delta > 0.0);
    assert_eq!(model, before);
    assert_eq!(model.logits(&img, None, None).unwrap(), before.logits(&img, None, None).unwrap());
}

#[test]
fn misplaced_prompt_is_rejected() {
    let cfg = tiny_config();
    let model = Backbone::new(cfg.clone(), &mut rng(8)).unwrap();
    let mut r = rng(9);
    let img = random_image(16, 16, 3, &mut r);
    let dsp = Prompt::init(PromptKind::Dsp, &cfg, &mut r);
    assert!(model.logits(&img, Some(&dsp), None).is_err());
}

#[test]
fn frozen_trunk_gets_no_gradient() {
    let cfg = tiny_config();
    let mut model = Backbone::new(cfg.clone(), &mut rng(10)).unwrap();
    model.params.freeze_trunk();
    let mut r = rng(11);
    let img = random_image(16, 16, 3, &mut r);
    for (trainable, head_grad) in [(Trainable::HEAD, true), (Trainable::NONE, false)] {
        let mut tape = Tape::<f32>::new();
        let vars = model.bind(&mut tape, trainable);
        let dip = Prompt::init(PromptKind::Dip, &cfg, &mut r);
        let dsp = Prompt::init(PromptKind::Dsp, &cfg, &mut r);
        let (dip_vars, dip_leaves) = dip.bind_with_leaves(&mut tape, true);
        let (dsp_vars, dsp_leaves) = dsp.bind_with_leaves(&mut tape, true);
        let logits = model.forward(&mut tape, &vars, &img, Some(&dip_vars), Some(&dsp_vars)).unwrap();
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        tape.backward(loss).unwrap();
        let head = model.params.head_index();
        for (i, &v) in vars.iter().enumerate() {
            let is_head = i == head || i == head + 1;
            assert_eq!(tape.grad(v).is_some(), is_head && head_grad, "parameter {i}");
        }
        for v in dip_leaves.iter().chain(&dsp_leaves) {
            assert!(tape.grad(*v).unwrap().data().iter().any(|&g| g != 0.0));
        }
    }
}
