//! The composite vision-language model: frozen-able encoder, connectors,
//! optional probe stack, and decoder, all over one parameter store.

use serde::{Deserialize, Serialize};

use crate::connector::{spatial_downsample, Connector, ConnectorConfig};
use crate::data::QASample;
use crate::decoder::{Decoder, DecoderConfig, PromptLayout};
use crate::encoder::{Encoder, EncoderConfig, Video};
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};
use crate::probes::{ProbeConfig, ProbeStack};
use crate::vocab::Vocab;
use crate::ModelError;

/// Everything needed to rebuild the module graph around a parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub connector: ConnectorConfig,
    pub decoder: DecoderConfig,
    /// Probe architecture; `None` on the base model.
    pub probes: Option<ProbeConfig>,
    pub decoder_lora_attached: bool,
    pub encoder_lora_attached: bool,
    pub encoder_lora_rank: usize,
    pub encoder_lora_alpha: f64,
}

impl ModelConfig {
    pub fn base(encoder: EncoderConfig, connector: ConnectorConfig, decoder: DecoderConfig) -> Self {
        ModelConfig {
            encoder,
            connector,
            decoder,
            probes: None,
            decoder_lora_attached: false,
            encoder_lora_attached: false,
            encoder_lora_rank: 4,
            encoder_lora_alpha: 8.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.connector.vision_dim != self.encoder.vision_dim {
            return Err(ModelError::Config(format!(
                "connector vision_dim {} != encoder vision_dim {}",
                self.connector.vision_dim, self.encoder.vision_dim
            )));
        }
        if self.connector.lm_dim != self.decoder.lm_dim {
            return Err(ModelError::Config(format!(
                "connector lm_dim {} != decoder lm_dim {}",
                self.connector.lm_dim, self.decoder.lm_dim
            )));
        }
        self.connector.pooled_per_frame(self.encoder.patches_per_frame())?;
        if let Some(p) = &self.probes {
            p.validate(self.encoder.layers)?;
        }
        Ok(())
    }
}

pub struct VlmModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub connector: Connector,
    pub probes: Option<ProbeStack>,
    pub probe_connector: Option<Connector>,
    pub decoder: Decoder,
    pub vocab: Vocab,
}

/// Per-sample analysis trace: encoder attention, probe attention and the
/// pooled embeddings used by the representation metrics.
pub struct ForwardTrace {
    /// `[layer][frame]` head-averaged self-attention, each `N x N`.
    pub encoder_attn: Vec<Vec<Tensor>>,
    /// Per interaction layer: (layer, mean attention map over `T*N` tokens).
    pub probe_maps: Vec<(usize, Tensor)>,
    /// Final-layer visual tokens `[(T*N) x d_v]`.
    pub visual_tokens: Tensor,
    /// Final probe tokens `[M x d_v]` when probes are attached.
    pub final_probes: Option<Tensor>,
}

impl VlmModel {
    /// Fresh base model: encoder + connector + decoder, no probes, no
    /// adapters. This is the architecture pretrained on the source domain.
    pub fn init_base(cfg: &ModelConfig, vocab: Vocab, seed: u64) -> Result<VlmModel, ModelError> {
        let mut cfg = cfg.clone();
        cfg.decoder.vocab_size = vocab.len();
        cfg.probes = None;
        cfg.decoder_lora_attached = false;
        cfg.encoder_lora_attached = false;
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from(seed);
        let encoder = Encoder::init(&cfg.encoder, &mut store, &mut rng)?;
        let connector = Connector::init(&cfg.connector, &mut store, "connector", &mut rng)?;
        let decoder = Decoder::init(&cfg.decoder, &mut store, &mut rng)?;
        Ok(VlmModel {
            cfg,
            store,
            encoder,
            connector,
            probes: None,
            probe_connector: None,
            decoder,
            vocab,
        })
    }

    /// Rebuild the module graph around an existing store (checkpoint load).
    pub fn bind(cfg: &ModelConfig, store: ParamStore, vocab: Vocab) -> Result<VlmModel, ModelError> {
        cfg.validate()?;
        let mut encoder = Encoder::bind(&cfg.encoder, &store)?;
        if cfg.encoder_lora_attached {
            encoder.bind_lora(&store, cfg.encoder_lora_alpha)?;
        }
        let connector = Connector::bind(&cfg.connector, &store, "connector")?;
        let (probes, probe_connector) = match &cfg.probes {
            Some(pc) => (
                Some(ProbeStack::bind(pc, &encoder, &store)?),
                Some(Connector::bind(&cfg.connector, &store, "probe_connector")?),
            ),
            None => (None, None),
        };
        let mut decoder = Decoder::bind(&cfg.decoder, &store)?;
        if cfg.decoder_lora_attached {
            decoder.bind_lora(&store)?;
        }
        Ok(VlmModel {
            cfg: cfg.clone(),
            store,
            encoder,
            connector,
            probes,
            probe_connector,
            decoder,
            vocab,
        })
    }

    /// Extend a base model in place with a probe bank, its interaction
    /// modules (initialized from the encoder's self-attention weights) and
    /// a dedicated probe connector.
    pub fn extend_with_probes(
        &mut self,
        probe_cfg: &ProbeConfig,
        rng: &mut Rng,
    ) -> Result<(), ModelError> {
        if self.probes.is_some() {
            return Err(ModelError::Config("probes already attached".into()));
        }
        let stack = ProbeStack::init(probe_cfg, &self.encoder, &mut self.store, rng)?;
        let probe_connector =
            Connector::init(&self.cfg.connector, &mut self.store, "probe_connector", rng)?;
        self.probes = Some(stack);
        self.probe_connector = Some(probe_connector);
        self.cfg.probes = Some(probe_cfg.clone());
        Ok(())
    }

    pub fn attach_decoder_lora(&mut self, rng: &mut Rng) -> Result<(), ModelError> {
        if self.cfg.decoder_lora_attached {
            return Err(ModelError::Config("decoder LoRA already attached".into()));
        }
        self.decoder.add_lora(&mut self.store, rng)?;
        self.cfg.decoder_lora_attached = true;
        Ok(())
    }

    pub fn attach_encoder_lora(&mut self, rng: &mut Rng) -> Result<(), ModelError> {
        if self.cfg.encoder_lora_attached {
            return Err(ModelError::Config("encoder LoRA already attached".into()));
        }
        self.encoder.add_lora(
            &mut self.store,
            self.cfg.encoder_lora_rank,
            self.cfg.encoder_lora_alpha,
            rng,
        )?;
        self.cfg.encoder_lora_attached = true;
        Ok(())
    }

    /// Build the prompt (E, optional Z, question) for a sample on a tape.
    fn build_prompt(
        &self,
        tape: &mut Tape,
        video: &Video,
        question: &[usize],
    ) -> Result<PromptLayout, ModelError> {
        let acts = self.encoder.encode(tape, &self.store, video)?;
        let pooled = spatial_downsample(
            tape,
            acts.last(),
            video.frames,
            self.cfg.connector.downsample,
        )?;
        let visual = self.connector.project(tape, &self.store, pooled)?;
        let probe = match (&self.probes, &self.probe_connector) {
            (Some(stack), Some(conn)) => {
                let run = stack.run_probes(tape, &self.store, &acts)?;
                Some(conn.project(tape, &self.store, run.final_probes)?)
            }
            _ => None,
        };
        Ok(PromptLayout {
            visual,
            probe,
            question: question.to_vec(),
            answer: Vec::new(),
            frames: video.frames,
        })
    }

    /// Teacher-forced loss of one sample (answer + EOS).
    pub fn sample_loss(&self, tape: &mut Tape, sample: &QASample) -> Result<Var, ModelError> {
        let mut layout = self.build_prompt(tape, &sample.video, &sample.question)?;
        let mut answer = sample.answer.clone();
        answer.push(self.vocab.eos());
        layout.answer = answer;
        self.decoder.sequence_loss(tape, &self.store, &layout)
    }

    /// Greedy answer tokens for a sample (no EOS in the result).
    pub fn predict(&self, sample: &QASample, max_len: usize) -> Result<Vec<usize>, ModelError> {
        let build = |tape: &mut Tape| self.build_prompt(tape, &sample.video, &sample.question);
        self.decoder
            .generate_greedy(&self.store, &build, self.vocab.eos(), max_len)
    }

    /// Forward pass with analysis traces, no loss.
    pub fn forward_trace(&self, video: &Video) -> Result<ForwardTrace, ModelError> {
        let mut tape = Tape::new();
        let acts = self.encoder.encode(&mut tape, &self.store, video)?;
        let visual_tokens = tape.tensor(acts.last());
        let (probe_maps, final_probes) = match &self.probes {
            Some(stack) => {
                let run = stack.run_probes(&mut tape, &self.store, &acts)?;
                let fp = tape.tensor(run.final_probes);
                (run.attn_maps, Some(fp))
            }
            None => (Vec::new(), None),
        };
        Ok(ForwardTrace {
            encoder_attn: acts.attn,
            probe_maps,
            visual_tokens,
            final_probes,
        })
    }

    /// Mean-pooled representation of a video for embedding analysis:
    /// pooled probe tokens when probes are attached, else pooled
    /// final-layer visual tokens. Dimension `d_v` either way.
    pub fn pooled_embedding(&self, video: &Video) -> Result<Vec<f64>, ModelError> {
        let trace = self.forward_trace(video)?;
        let t = match &trace.final_probes {
            Some(p) => p,
            None => &trace.visual_tokens,
        };
        let rows = t.shape()[0];
        let cols = t.shape()[1];
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += t.data()[r * cols + c];
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        Ok(mean)
    }

    /// Trainable parameter count under the current gating.
    pub fn trainable_params(&self) -> usize {
        self.store.trainable_param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, DataConfig, DomainTransform, QuestionFamily};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig::base(
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
        )
    }

    fn sample() -> QASample {
        let cfg = DataConfig::default();
        let vocab = data::build_vocab(cfg.grid);
        let b = data::make_benchmark(
            20,
            DomainTransform::Identity,
            QuestionFamily::ActorColor,
            &cfg,
            &vocab,
            "source",
        )
        .unwrap();
        b.samples[0].clone()
    }

    #[test]
    fn base_model_runs_loss_and_predict() {
        let vocab = data::build_vocab(4);
        let model = VlmModel::init_base(&tiny_config(), vocab, 7).unwrap();
        let s = sample();
        let mut tape = Tape::new();
        let loss = model.sample_loss(&mut tape, &s).unwrap();
        assert!(tape.scalar_value(loss).is_finite());
        let out = model.predict(&s, 4).unwrap();
        assert!(out.len() <= 4);
    }

    #[test]
    fn probe_extension_adds_z_tokens_and_traces() {
        let vocab = data::build_vocab(4);
        let mut model = VlmModel::init_base(&tiny_config(), vocab, 8).unwrap();
        let mut rng = Rng::seed_from(9);
        let pc = ProbeConfig::every_layer(4, 2);
        model.extend_with_probes(&pc, &mut rng).unwrap();
        let s = sample();
        let mut tape = Tape::new();
        let loss = model.sample_loss(&mut tape, &s).unwrap();
        assert!(tape.scalar_value(loss).is_finite());
        let trace = model.forward_trace(&s.video).unwrap();
        assert_eq!(trace.probe_maps.len(), 2);
        assert!(trace.final_probes.is_some());
        // pooled embedding switches to probes
        let e = model.pooled_embedding(&s.video).unwrap();
        assert_eq!(e.len(), 16);
    }

    #[test]
    fn double_probe_extension_rejected() {
        let vocab = data::build_vocab(4);
        let mut model = VlmModel::init_base(&tiny_config(), vocab, 8).unwrap();
        let mut rng = Rng::seed_from(9);
        let pc = ProbeConfig::every_layer(4, 2);
        model.extend_with_probes(&pc, &mut rng).unwrap();
        assert!(model.extend_with_probes(&pc, &mut rng).is_err());
    }
}
