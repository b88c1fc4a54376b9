//! Adam training loop with per-group learning rates and hard gradient
//! gating, plus greedy-decoding accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{Benchmark, QASample};
use crate::model::VlmModel;
use crate::numerics::{Rng, Tape};
use crate::strategy::AdaptationStrategy;
use crate::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },
    #[error("benchmark `{0}` has no evaluation samples")]
    EmptyBenchmark(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Encoder parameters train at `base_lr * ve_lr_scale` (paper-ratio
    /// default 0.2).
    pub ve_lr_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            ve_lr_scale: 0.2,
            epochs: 3,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per optimization step.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(param_count: usize) -> Adam {
        Adam {
            m: vec![Vec::new(); param_count],
            v: vec![Vec::new(); param_count],
            t: 0,
        }
    }

    /// One decoupled step over every trainable parameter with a gradient.
    fn step(&mut self, model: &mut VlmModel, cfg: &TrainConfig, batch: usize) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let scale = 1.0 / batch as f64;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name_mult =
                AdaptationStrategy::lr_multiplier(model.store.name(id), cfg.ve_lr_scale);
            let tensor = model.store.get_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let slot = id.index();
            if self.m[slot].is_empty() {
                self.m[slot] = vec![0.0; grad.len()];
                self.v[slot] = vec![0.0; grad.len()];
            }
            let lr = cfg.base_lr * name_mult;
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] * scale;
                let m = &mut self.m[slot][i];
                let v = &mut self.v[slot][i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Train in place over the sample pool. The loss curve holds one entry per
/// optimization step; a non-finite loss aborts with its step index.
pub fn train(
    model: &mut VlmModel,
    pool: &[&QASample],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    assert!(cfg.batch_size >= 1);
    let mut adam = Adam::new(model.store.len());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = Rng::seed_from(cfg.seed ^ 0xADA0_17E5);
    let mut curve = Vec::new();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            model.store.zero_grads();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let mut tape = Tape::new();
                let loss = model.sample_loss(&mut tape, pool[i])?;
                batch_loss += tape.scalar_value(loss);
                tape.backward_into(loss, &mut model.store)
                    .map_err(ModelError::from)?;
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::NanLoss { step });
            }
            adam.step(model, cfg, chunk.len());
            curve.push(batch_loss);
            step += 1;
        }
    }
    model.store.zero_grads();
    Ok(TrainReport {
        steps: curve.len(),
        loss_curve: curve,
    })
}

/// Longest answer in the vocabulary-closed benchmarks plus slack for EOS.
pub const MAX_ANSWER_TOKENS: usize = 4;

/// Greedy decoding, exact token-sequence match against the gold answer.
pub fn evaluate_accuracy(model: &VlmModel, benchmark: &Benchmark) -> Result<f64, TrainError> {
    let eval: Vec<&QASample> = benchmark.eval().collect();
    if eval.is_empty() {
        return Err(TrainError::EmptyBenchmark(benchmark.name.clone()));
    }
    let mut correct = 0usize;
    for sample in &eval {
        let out = model.predict(sample, MAX_ANSWER_TOKENS)?;
        if out == sample.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// Accuracy per benchmark, in benchmark order.
pub fn evaluate_benchmarks(
    model: &VlmModel,
    benchmarks: &[Benchmark],
) -> Result<Vec<(String, f64)>, TrainError> {
    benchmarks
        .iter()
        .map(|b| evaluate_accuracy(model, b).map(|acc| (b.name.clone(), acc)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connector::ConnectorConfig;
    use crate::data::{self, DataConfig, DomainTransform, QuestionFamily};
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::strategy::{apply_strategy, prepare_architecture, StrategyPreset};

    fn tiny_model(seed: u64) -> VlmModel {
        let cfg = ModelConfig::base(
            EncoderConfig {
                image_side: 16,
                patch_side: 4,
                channels: 3,
                vision_dim: 16,
                layers: 2,
                heads: 2,
                mlp_ratio: 1.0,
            },
            ConnectorConfig {
                vision_dim: 16,
                lm_dim: 32,
                downsample: 2,
                hidden: 16,
            },
            DecoderConfig {
                vocab_size: 0,
                lm_dim: 32,
                layers: 2,
                heads: 2,
                context: 64,
                max_frames: 4,
                mlp_ratio: 1.0,
                lora_rank: 2,
                lora_alpha: 4.0,
                probes_first: false,
            },
        );
        let vocab = data::build_vocab(4);
        VlmModel::init_base(&cfg, vocab, seed).unwrap()
    }

    fn samples(n: usize) -> Vec<QASample> {
        let cfg = DataConfig::default();
        let vocab = data::build_vocab(cfg.grid);
        let b = data::make_benchmark(
            n.max(20),
            DomainTransform::Identity,
            QuestionFamily::ActorColor,
            &cfg,
            &vocab,
            "source",
        )
        .unwrap();
        b.samples.into_iter().take(n).collect()
    }

    #[test]
    fn zero_epochs_leave_params_bit_identical() {
        let mut model = tiny_model(1);
        let before = model.store.bytes_by_prefix("");
        let pool: Vec<QASample> = samples(4);
        let refs: Vec<&QASample> = pool.iter().collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &refs, &cfg).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(model.store.bytes_by_prefix(""), before);
    }

    #[test]
    fn same_seed_same_loss_curve() {
        let pool: Vec<QASample> = samples(8);
        let refs: Vec<&QASample> = pool.iter().collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut a = tiny_model(5);
        let ra = train(&mut a, &refs, &cfg).unwrap();
        let mut b = tiny_model(5);
        let rb = train(&mut b, &refs, &cfg).unwrap();
        assert_eq!(ra.loss_curve, rb.loss_curve);
        assert_eq!(a.store.bytes_by_prefix(""), b.store.bytes_by_prefix(""));
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut model = tiny_model(2);
        let id = model.decoder.head_w;
        model.store.get_mut(id).data_mut()[0] = f64::INFINITY;
        let pool: Vec<QASample> = samples(2);
        let refs: Vec<&QASample> = pool.iter().collect();
        let err = train(&mut model, &refs, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NanLoss { step: 0 }));
    }

    #[test]
    fn frozen_groups_stay_bit_identical_under_viscop() {
        let mut model = tiny_model(3);
        let strategy = StrategyPreset::Viscop.strategy();
        let mut rng = Rng::seed_from(0);
        prepare_architecture(&mut model, &strategy, &mut rng).unwrap();
        let audit = apply_strategy(&mut model, &strategy);
        let encoder_before = model.store.bytes_by_prefix("encoder.");
        let decoder_before = model.store.bytes_by_prefix("decoder.");

        let pool: Vec<QASample> = samples(8);
        let refs: Vec<&QASample> = pool.iter().collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        train(&mut model, &refs, &cfg).unwrap();
        assert_eq!(model.store.bytes_by_prefix("encoder."), encoder_before);
        assert_eq!(model.store.bytes_by_prefix("decoder."), decoder_before);
        assert!(audit.violations(&model).is_empty());
        // but the probe pathway actually moved
        assert!(model.store.param_count_by_prefix("probes.") > 0);
    }

    #[test]
    fn frozen_encoder_output_bit_identical_after_training() {
        let mut model = tiny_model(4);
        let strategy = StrategyPreset::VlcLlmLora.strategy();
        let mut rng = Rng::seed_from(0);
        prepare_architecture(&mut model, &strategy, &mut rng).unwrap();
        apply_strategy(&mut model, &strategy);

        let probe_video = samples(1)[0].video.clone();
        let encode_bits = |model: &VlmModel| -> Vec<u8> {
            let mut tape = Tape::new();
            let acts = model.encoder.encode(&mut tape, &model.store, &probe_video).unwrap();
            acts.tokens
                .iter()
                .flat_map(|&v| tape.data(v).iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
                .collect()
        };
        let before = encode_bits(&model);
        let pool: Vec<QASample> = samples(8);
        let refs: Vec<&QASample> = pool.iter().collect();
        let cfg = TrainConfig {
            epochs: 13, // ~ 100+ steps at batch 1
            batch_size: 1,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &refs, &cfg).unwrap();
        assert!(report.steps >= 100);
        assert_eq!(encode_bits(&model), before);
    }

    #[test]
    fn perfect_predictor_scores_one_and_empty_benchmark_errors() {
        let model = tiny_model(6);
        let cfg = DataConfig::default();
        let vocab = data::build_vocab(cfg.grid);
        let mut b = data::make_benchmark(
            20,
            DomainTransform::Identity,
            QuestionFamily::ActorColor,
            &cfg,
            &vocab,
            "source",
        )
        .unwrap();
        // force every eval answer to whatever the model already predicts
        let predictions: Vec<Vec<usize>> = b
            .samples
            .iter()
            .map(|s| model.predict(s, MAX_ANSWER_TOKENS).unwrap())
            .collect();
        for (s, p) in b.samples.iter_mut().zip(predictions) {
            s.answer = p;
        }
        assert_eq!(evaluate_accuracy(&model, &b).unwrap(), 1.0);

        b.samples.retain(|s| s.split == data::Split::Train);
        assert!(matches!(
            evaluate_accuracy(&model, &b),
            Err(TrainError::EmptyBenchmark(_))
        ));
    }
}
