//! Finite-difference oracles for every differentiable primitive and for
//! the full probe-augmented model. The numeric side only ever re-evaluates
//! forward passes, so it is independent of the tape's backward code.

use proptest::prelude::*;

use viscop_core::connector::{Connector, ConnectorConfig};
use viscop_core::data::{QASample, QuestionFamily, Split};
use viscop_core::decoder::DecoderConfig;
use viscop_core::encoder::{EncoderConfig, Video};
use viscop_core::model::{ModelConfig, VlmModel};
use viscop_core::numerics::gradcheck::{compare_grads, rel_err};
use viscop_core::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use viscop_core::probes::ProbeConfig;
use viscop_core::strategy::{prepare_architecture, StrategyPreset};
use viscop_core::data;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Scalar loss `sum(w ⊙ x)` with a fixed random `w`, so every output
/// component receives a distinct upstream gradient. Built from existing
/// primitives: the diagonal of `w^T x` holds the per-column contractions.
fn weighted_loss(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let cols = *shape.last().unwrap();
    let mut rng = Rng::seed_from(seed);
    let w = Tensor::randn(shape, 1.0, &mut rng);
    let wv = tape.constant(&w);
    let wt = tape.transpose(wv);
    let prod = tape.matmul(wt, x).unwrap(); // [c x c]; diag k = sum_i w_ik x_ik
    let mut diag_parts = Vec::with_capacity(cols);
    for k in 0..cols {
        let row = tape.slice_rows(prod, k, 1).unwrap();
        let cell = tape.slice_cols(row, k, 1).unwrap();
        diag_parts.push(cell);
    }
    let diag = tape.concat_rows(&diag_parts).unwrap();
    tape.sum_all(diag)
}

fn check<F>(store: &mut ParamStore, ids: &[ParamId], f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    store.zero_grads();
    tape.backward_into(loss, store).unwrap();
    let mut loss_fn = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = f(&mut t, s);
        t.scalar_value(l)
    };
    compare_grads(store, ids, H, &mut loss_fn).max_rel_err
}

fn store_with(shapes: &[(&str, Vec<usize>)], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(name, shape)| {
            store
                .add(name, Tensor::randn(shape.clone(), 1.0, &mut rng).with_grad())
                .unwrap()
        })
        .collect();
    (store, ids)
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    // sum(A @ B) w.r.t. both factors for a random 3x3 pair
    let (mut store, ids) = store_with(&[("a", vec![3, 3]), ("b", vec![3, 3])], 1);
    let err = check(&mut store, &ids, |tape, s| {
        let a = tape.param(s, s.id_of("a").unwrap());
        let b = tape.param(s, s.id_of("b").unwrap());
        let c = tape.matmul(a, b).unwrap();
        tape.sum_all(c)
    });
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let (mut store, ids) = store_with(
        &[("x", vec![3, 5]), ("gain", vec![5]), ("bias", vec![5])],
        2,
    );
    let err = check(&mut store, &ids, |tape, s| {
        let x = tape.param(s, s.id_of("x").unwrap());
        let g = tape.param(s, s.id_of("gain").unwrap());
        let b = tape.param(s, s.id_of("bias").unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        weighted_loss(tape, y, 77)
    });
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn connector_gradient_matches_finite_differences() {
    let cfg = ConnectorConfig {
        vision_dim: 4,
        lm_dim: 3,
        downsample: 1,
        hidden: 5,
    };
    let mut rng = Rng::seed_from(3);
    let mut store = ParamStore::new();
    let conn = Connector::init(&cfg, &mut store, "connector", &mut rng).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in &ids {
        store.get_mut(*id).set_requires_grad(true);
    }
    let input = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let err = check(&mut store, &ids, |tape, s| {
        let x = tape.constant(&input);
        let y = conn.project(tape, s, x).unwrap();
        weighted_loss(tape, y, 78)
    });
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn cross_entropy_matches_independent_log_sum_exp() {
    // random 5x7 logits vs an independently coded evaluation, within 1e-10
    let mut rng = Rng::seed_from(4);
    let logits = Tensor::randn(vec![5, 7], 2.0, &mut rng);
    let targets = [3usize, 0, 6, 2, 5];
    let mask = [true, true, false, true, true];

    let mut tape = Tape::new();
    let lv = tape.constant(&logits);
    let loss = tape.cross_entropy(lv, &targets, &mask).unwrap();

    let mut manual = 0.0;
    let mut count = 0;
    for i in 0..5 {
        if !mask[i] {
            continue;
        }
        let row = &logits.data()[i * 7..(i + 1) * 7];
        let mut sum_exp = 0.0f64;
        for v in row {
            sum_exp += v.exp();
        }
        manual += sum_exp.ln() - row[targets[i]];
        count += 1;
    }
    manual /= count as f64;
    assert!((tape.scalar_value(loss) - manual).abs() < 1e-10);
}

#[test]
fn backward_is_deterministic_bit_for_bit() {
    let run = || -> Vec<f64> {
        let (mut store, _) = store_with(&[("a", vec![4, 4]), ("b", vec![4, 4])], 9);
        let mut tape = Tape::new();
        let a = tape.param(&store, store.id_of("a").unwrap());
        let b = tape.param(&store, store.id_of("b").unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax_rows(c).unwrap();
        let g = tape.gelu(s);
        let loss = tape.sum_all(g);
        tape.backward_into(loss, &mut store).unwrap();
        store
            .get(store.id_of("a").unwrap())
            .grad()
            .unwrap()
            .to_vec()
    };
    let x = run();
    let y = run();
    assert_eq!(x, y);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_matmul_fd(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let (mut store, ids) = store_with(&[("a", vec![m, k]), ("b", vec![k, n])], seed);
        let err = check(&mut store, &ids, |tape, s| {
            let a = tape.param(s, s.id_of("a").unwrap());
            let b = tape.param(s, s.id_of("b").unwrap());
            let c = tape.matmul(a, b).unwrap();
            weighted_loss(tape, c, seed ^ 1)
        });
        prop_assert!(err < TOL, "err {}", err);
    }

    #[test]
    fn prop_softmax_fd(m in 1usize..4, n in 2usize..5, seed in 0u64..1000) {
        let (mut store, ids) = store_with(&[("x", vec![m, n])], seed);
        let err = check(&mut store, &ids, |tape, s| {
            let x = tape.param(s, s.id_of("x").unwrap());
            let y = tape.softmax_rows(x).unwrap();
            weighted_loss(tape, y, seed ^ 2)
        });
        prop_assert!(err < TOL, "err {}", err);
    }

    #[test]
    fn prop_softmax_rows_sum_to_one(m in 1usize..5, n in 1usize..6, seed in 0u64..1000) {
        let mut rng = Rng::seed_from(seed);
        let x = Tensor::randn(vec![m, n], 3.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let y = tape.softmax_rows(xv).unwrap();
        for i in 0..m {
            let s: f64 = tape.data(y)[i * n..(i + 1) * n].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn prop_gelu_fd(m in 1usize..4, n in 1usize..5, seed in 0u64..1000) {
        let (mut store, ids) = store_with(&[("x", vec![m, n])], seed);
        let err = check(&mut store, &ids, |tape, s| {
            let x = tape.param(s, s.id_of("x").unwrap());
            let y = tape.gelu(x);
            weighted_loss(tape, y, seed ^ 3)
        });
        prop_assert!(err < TOL, "err {}", err);
    }

    #[test]
    fn prop_bias_broadcast_fd(m in 1usize..4, n in 1usize..5, seed in 0u64..1000) {
        let (mut store, ids) = store_with(&[("x", vec![m, n]), ("b", vec![n])], seed);
        let err = check(&mut store, &ids, |tape, s| {
            let x = tape.param(s, s.id_of("x").unwrap());
            let b = tape.param(s, s.id_of("b").unwrap());
            let y = tape.add_row_broadcast(x, b).unwrap();
            weighted_loss(tape, y, seed ^ 4)
        });
        prop_assert!(err < TOL, "err {}", err);
    }

    #[test]
    fn prop_cross_entropy_fd(l in 1usize..4, v in 2usize..6, seed in 0u64..1000) {
        let (mut store, ids) = store_with(&[("logits", vec![l, v])], seed);
        let mut rng = Rng::seed_from(seed ^ 5);
        let targets: Vec<usize> = (0..l).map(|_| rng.below(v)).collect();
        let mut mask: Vec<bool> = (0..l).map(|_| rng.uniform() < 0.7).collect();
        mask[0] = true;
        let err = check(&mut store, &ids, |tape, s| {
            let x = tape.param(s, s.id_of("logits").unwrap());
            tape.cross_entropy(x, &targets, &mask).unwrap()
        });
        prop_assert!(err < TOL, "err {}", err);
    }

    #[test]
    fn prop_transpose_slice_concat_fd(m in 2usize..5, n in 2usize..5, seed in 0u64..1000) {
        let (mut store, ids) = store_with(&[("x", vec![m, n])], seed);
        let err = check(&mut store, &ids, |tape, s| {
            let x = tape.param(s, s.id_of("x").unwrap());
            let t = tape.transpose(x);
            let top = tape.slice_rows(t, 0, 1).unwrap();
            let rest = tape.slice_rows(t, 1, n - 1).unwrap();
            let joined = tape.concat_rows(&[rest, top]).unwrap();
            let left = tape.slice_cols(joined, 0, 1).unwrap();
            let right = tape.slice_cols(joined, 1, m - 1).unwrap();
            let back = tape.concat_cols(&[right, left]).unwrap();
            weighted_loss(tape, back, seed ^ 6)
        });
        prop_assert!(err < TOL, "err {}", err);
    }

    #[test]
    fn prop_embed_fd(v in 2usize..6, d in 1usize..4, n in 1usize..5, seed in 0u64..1000) {
        let (mut store, ids) = store_with(&[("table", vec![v, d])], seed);
        let mut rng = Rng::seed_from(seed ^ 7);
        let lookups: Vec<usize> = (0..n).map(|_| rng.below(v)).collect();
        let err = check(&mut store, &ids, |tape, s| {
            let t = tape.param(s, s.id_of("table").unwrap());
            let rows = tape.embed_rows(t, &lookups).unwrap();
            weighted_loss(tape, rows, seed ^ 8)
        });
        prop_assert!(err < TOL, "err {}", err);
    }
}

/// Toy sample compatible with an 8x8, 3-channel, 2-frame toy model.
fn toy_sample() -> QASample {
    let mut rng = Rng::seed_from(21);
    let mut video = Video::zeros(2, 3, 8);
    for p in video.pixels.iter_mut() {
        *p = rng.uniform();
    }
    QASample {
        video,
        question: vec![1, 9, 14],
        answer: vec![4],
        domain: "toy".into(),
        family: QuestionFamily::ActorColor,
        pair_id: 0,
        split: Split::Train,
    }
}

fn toy_model() -> VlmModel {
    let cfg = ModelConfig::base(
        EncoderConfig {
            image_side: 8,
            patch_side: 4,
            channels: 3,
            vision_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 1.0,
        },
        ConnectorConfig {
            vision_dim: 8,
            lm_dim: 16,
            downsample: 2,
            hidden: 8,
        },
        DecoderConfig {
            vocab_size: 0,
            lm_dim: 16,
            layers: 2,
            heads: 2,
            context: 32,
            max_frames: 4,
            mlp_ratio: 1.0,
            lora_rank: 2,
            lora_alpha: 4.0,
            probes_first: false,
        },
    );
    VlmModel::init_base(&cfg, data::build_vocab(4), 31).unwrap()
}

fn loss_of(model: &VlmModel, sample: &QASample) -> f64 {
    let mut tape = Tape::new();
    let loss = model.sample_loss(&mut tape, sample).unwrap();
    tape.scalar_value(loss)
}

/// Every parameter's finite-difference gradient on the model, checked
/// against the analytic gradients already in the store.
fn model_fd_worst(model: &mut VlmModel, sample: &QASample, ids: &[ParamId]) -> (f64, String) {
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for &id in ids {
        let analytic = model
            .store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; model.store.get(id).numel()]);
        let name = model.store.name(id).to_string();
        for i in 0..analytic.len() {
            let orig = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = orig + H;
            let up = loss_of(model, sample);
            model.store.get_mut(id).data_mut()[i] = orig - H;
            let down = loss_of(model, sample);
            model.store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let e = rel_err(analytic[i], numeric);
            if e > worst {
                worst = e;
                worst_at = format!("{name}[{i}]");
            }
        }
    }
    (worst, worst_at)
}

/// Full probe-augmented forward pass on a 2-layer toy model: every
/// parameter's gradient matches central finite differences.
#[test]
fn full_model_gradients_match_finite_differences() {
    let mut model = toy_model();
    let mut rng = Rng::seed_from(32);
    let mut strategy = StrategyPreset::Viscop.strategy();
    strategy.probe_count = 2;
    prepare_architecture(&mut model, &strategy, &mut rng).unwrap();
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).set_requires_grad(true);
    }
    let sample = toy_sample();

    model.store.zero_grads();
    let mut tape = Tape::new();
    let loss = model.sample_loss(&mut tape, &sample).unwrap();
    tape.backward_into(loss, &mut model.store).unwrap();

    let ids: Vec<ParamId> = model.store.ids().collect();
    let (worst, at) = model_fd_worst(&mut model, &sample, &ids);
    assert!(worst < TOL, "worst rel err {worst} at {at}");
}

/// requires_grad=false means no gradient buffer anywhere, under full
/// composition.
#[test]
fn frozen_params_never_allocate_grads_in_full_model() {
    let mut model = toy_model();
    let mut rng = Rng::seed_from(33);
    let mut strategy = StrategyPreset::Viscop.strategy();
    strategy.probe_count = 2;
    prepare_architecture(&mut model, &strategy, &mut rng).unwrap();
    viscop_core::strategy::apply_strategy(&mut model, &strategy);
    let sample = toy_sample();
    let mut tape = Tape::new();
    let loss = model.sample_loss(&mut tape, &sample).unwrap();
    tape.backward_into(loss, &mut model.store).unwrap();
    for (name, t) in model.store.iter() {
        if t.requires_grad() {
            assert!(t.grad().is_some(), "{name} should have a gradient");
        } else {
            assert!(t.grad().is_none(), "{name} is frozen but has a gradient");
        }
    }
}

/// The spatial-only probe scope has its own per-frame averaging; check the
/// probe path end to end against finite differences.
#[test]
fn per_frame_probe_scope_gradients_match_fd() {
    let mut model = toy_model();
    let mut rng = Rng::seed_from(34);
    let pc = ProbeConfig {
        probe_count: 2,
        placement: vec![1, 2],
        scope: viscop_core::probes::AttentionScope::SpatialOnly,
        residual: true,
        per_head_scale: true,
    };
    model.extend_with_probes(&pc, &mut rng).unwrap();
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).set_requires_grad(true);
    }
    let sample = toy_sample();
    model.store.zero_grads();
    let mut tape = Tape::new();
    let loss = model.sample_loss(&mut tape, &sample).unwrap();
    tape.backward_into(loss, &mut model.store).unwrap();

    let ids = vec![
        model.store.id_of("probes.p0").unwrap(),
        model.store.id_of("interaction.layer1.wq").unwrap(),
    ];
    let (worst, at) = model_fd_worst(&mut model, &sample, &ids);
    assert!(worst < TOL, "worst rel err {worst} at {at}");
}
