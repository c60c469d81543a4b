mod common;

use common::*;
use dipt_core::backbone::Backbone;
use dipt_core::diffcore::{Tape, Tensor};
use dipt_core::gat::{coefficients, normalize, refine, refine_on_tape, train_gat, GatParams, GatTrainOptions, PromptGraph};
use dipt_core::prompts::PromptKind;
use dipt_core::raster::Dataset;
use proptest::prelude::*;
use rand::Rng;

fn random_graph<R: Rng>(l: usize, t: usize, rng: &mut R) -> PromptGraph {
    PromptGraph {
        dip_node: (0..l).map(|_| rng.random_range(-1.0..1.0)).collect(),
        dsp_nodes: (0..t).map(|_| (0..l).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
    }
}

fn random_params<R: Rng>(l: usize, scale: f32, rng: &mut R) -> GatParams {
    GatParams {
        w: Tensor::from_fn([l, l], |_| rng.random_range(-scale..scale)),
        a: Tensor::from_fn([2 * l], |_| rng.random_range(-scale..scale)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn alpha_is_a_distribution(l in 1usize..17, t in 1usize..6, scale in 0.01f32..3.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let params = random_params(l, scale, &mut r);
        let graph = random_graph(l, t, &mut r);
        let (e_self, e_nb) = coefficients(&params, &graph).unwrap();
        prop_assert_eq!(e_nb.len(), t);
        let (a_self, a_nb) = normalize(e_self, &e_nb).unwrap();
        let all: Vec<f32> = std::iter::once(a_self).chain(a_nb).collect();
        prop_assert!(all.iter().all(|&a| a > 0.0));
        prop_assert!((all.iter().map(|&a| a as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn refine_matches_the_scalar_oracle(l in 1usize..17, t in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let params = random_params(l, 1.0 / (l as f32).sqrt(), &mut r);
        let graph = random_graph(l, t, &mut r);
        let got = refine(&params, &graph).unwrap();
        let want = scalar_refine(params.w.data(), params.a.data(), &graph.dip_node, &graph.dsp_nodes);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((*g as f64 - w).abs() < 1e-5);
        }
    }

    #[test]
    fn identity_transform_stays_in_the_convex_hull(l in 1usize..17, t in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut params = GatParams::identity(l);
        params.a = Tensor::from_fn([2 * l], |_| r.random_range(-3.0..3.0));
        let graph = random_graph(l, t, &mut r);
        let out = refine(&params, &graph).unwrap();
        for (i, &v) in out.iter().enumerate() {
            let column = std::iter::once(graph.dip_node[i]).chain(graph.dsp_nodes.iter().map(|n| n[i]));
            let (lo, hi) = column.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
    }

    #[test]
    fn tape_refine_agrees_with_the_pure_path(l in 1usize..9, t in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let params = random_params(l, 1.0, &mut r);
        let graph = random_graph(l, t, &mut r);
        let mut tape = Tape::<f32>::new();
        let w = tape.constant(params.w.clone());
        let a = tape.constant(params.a.clone());
        let n = tape.constant(graph.node_matrix());
        let out = refine_on_tape(&mut tape, w, a, n).unwrap();
        let pure = refine(&params, &graph).unwrap();
        for (x, y) in tape.value(out).data().iter().zip(&pure) {
            prop_assert!((x - y).abs() < 1e-4 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn uniform_weights_average_the_nodes() {
    let graph = PromptGraph {
        dip_node: vec![1.0, -2.0, 0.5],
        dsp_nodes: vec![vec![3.0, 0.0, 0.5]],
    };
    assert_eq!(refine(&GatParams::identity(3), &graph).unwrap(), vec![2.0, -1.0, 0.5]);
}

#[test]
fn random_coefficients_match_direct_softmax() {
    let mut r = rng(41);
    for _ in 0..100 {
        let e: Vec<f32> = (0..6).map(|_| r.random_range(-5.0..5.0)).collect();
        let (a_self, a_nb) = normalize(e[0], &e[1..]).unwrap();
        let z: f64 = e.iter().map(|&v| (v as f64).exp()).sum();
        assert!((a_self as f64 - (e[0] as f64).exp() / z).abs() < 1e-7);
        for (a, &v) in a_nb.iter().zip(&e[1..]) {
            assert!((*a as f64 - (v as f64).exp() / z).abs() < 1e-7);
        }
    }
}

#[test]
fn gradient_check_on_a_small_graph() {
    // L = 8, t = 2, loss = squared norm of the refined vector.
    let mut r = rng(42);
    let graph = random_graph(8, 2, &mut r);
    let nodes = graph.node_matrix().cast::<f64>();
    let params = random_params(8, 0.5, &mut r);
    let mut point: Vec<f64> = params.w.data().iter().map(|&v| v as f64).collect();
    point.extend(params.a.data().iter().map(|&v| v as f64));
    let point = Tensor::new([80], point).unwrap();
    let err = dipt_core::diffcore::grad_check(
        |tape, x| {
            let w = tape.slice(x, 0, 0, 64)?;
            let w = tape.reshape(w, &[8, 8])?;
            let a = tape.slice(x, 0, 64, 16)?;
            let n = tape.constant(nodes.clone());
            let out = refine_on_tape(tape, w, a, n).map_err(|e| dipt_core::diffcore::TensorError::InvalidArgument(e.to_string()))?;
            let sq = tape.mul(out, out)?;
            tape.sum(sq)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn zero_epochs_returns_the_initial_refinement_and_frozen_inputs() {
    let world = tiny_world(43);
    let l = PromptKind::Dip.flat_len(&world.model.config);
    let params = GatParams::init(l, &mut rng(44));
    let data = Dataset::new(world.images.clone(), world.labels.clone());
    let bank_before = world.bank.clone();
    let model_before: Backbone = world.model.clone();
    let opts = GatTrainOptions {
        epochs: 0,
        lr: 1e-3,
        batch_size: 2,
    };
    let (out, dip, _) = train_gat(params.clone(), &world.bank, &world.dip, &world.model, &data, opts, &mut rng(45)).unwrap();
    assert_eq!(out, params);
    let graph = PromptGraph::new(&world.dip, &world.bank).unwrap();
    assert_eq!(dip.flatten(), refine(&params, &graph).unwrap());

    let opts = GatTrainOptions { epochs: 2, ..opts };
    let (trained, _, report) = train_gat(params.clone(), &world.bank, &world.dip, &world.model, &data, opts, &mut rng(45)).unwrap();
    assert_ne!(trained, params);
    assert_eq!(report.epoch_losses.len(), 2);
    assert_eq!(world.bank, bank_before);
    assert_eq!(world.model, model_before);
}

#[test]
fn gat_needs_two_entries() {
    let world = tiny_world(46);
    let mut single = dipt_core::prompts::PromptBank::new();
    let e = &world.bank.entries()[0];
    single.append_entry(&world.model.config, e.key.clone(), e.dsp.clone()).unwrap();
    let l = PromptKind::Dip.flat_len(&world.model.config);
    let data = Dataset::new(world.images.clone(), world.labels.clone());
    let opts = GatTrainOptions {
        epochs: 1,
        lr: 1e-3,
        batch_size: 2,
    };
    assert!(train_gat(GatParams::init(l, &mut rng(1)), &single, &world.dip, &world.model, &data, opts, &mut rng(2)).is_err());
}
