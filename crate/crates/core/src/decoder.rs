//! Tiny autoregressive transformer decoder. Consumes a prompt of visual
//! embeddings, optional probe embeddings, question tokens and answer
//! tokens under a causal mask, with optional LoRA adapters on the
//! attention query/value projections.

use serde::{Deserialize, Serialize};

use crate::nn::{self, AttnProj, AttnScale, LoraPair};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, TensorError, Var};
use crate::ModelError;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub lm_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum total sequence length (visual + probe + text tokens).
    pub context: usize,
    /// Temporal embedding table size for visual rows.
    pub max_frames: usize,
    pub mlp_ratio: f64,
    /// Rank 0 means no adapters are ever attached.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Place probe embeddings before visual embeddings in the prompt.
    pub probes_first: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            vocab_size: 0, // filled from the dataset vocabulary
            lm_dim: 64,
            layers: 4,
            heads: 4,
            context: 64,
            max_frames: 8,
            mlp_ratio: 2.0,
            lora_rank: 4,
            lora_alpha: 8.0,
            probes_first: false,
        }
    }
}

impl DecoderConfig {
    pub fn mlp_hidden(&self) -> usize {
        (self.lm_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0 {
            return Err(ModelError::Config("decoder vocab_size is zero".into()));
        }
        if self.lm_dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "lm_dim {} not divisible by heads {}",
                self.lm_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

/// LoRA adapters of one decoder layer (attention wq and wv).
#[derive(Debug, Clone)]
pub struct DecoderLoraLayer {
    pub wq: LoraPair,
    pub wv: LoraPair,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub token_embed: ParamId,
    pub text_pos: ParamId,
    pub frame_embed: ParamId,
    pub layer_ids: Vec<DecoderLayerIds>,
    pub final_ln_gain: ParamId,
    pub final_ln_bias: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub lora: Option<Vec<DecoderLoraLayer>>,
}

/// Ordered prompt segments. The loss is computed over answer positions
/// only (teacher forcing).
pub struct PromptLayout {
    /// Projected visual tokens `[T*pooled x d_lm]` (E).
    pub visual: Var,
    /// Projected probe tokens `[M x d_lm]` (Z), absent on probe-free models.
    pub probe: Option<Var>,
    /// Question ids, including the leading BOS.
    pub question: Vec<usize>,
    /// Answer ids, including the trailing EOS. May be empty during decoding.
    pub answer: Vec<usize>,
    pub frames: usize,
}

impl Decoder {
    pub fn init(
        cfg: &DecoderConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Decoder, ModelError> {
        cfg.validate()?;
        let d = cfg.lm_dim;
        let h = cfg.mlp_hidden();
        let token_embed = store.add(
            "decoder.token_embed",
            nn::init_weight(cfg.vocab_size, d, rng).with_grad(),
        )?;
        let text_pos = store.add(
            "decoder.text_pos",
            nn::init_weight(cfg.context, d, rng).with_grad(),
        )?;
        let frame_embed = store.add(
            "decoder.frame_embed",
            nn::init_weight(cfg.max_frames, d, rng).with_grad(),
        )?;
        let mut layer_ids = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let p = format!("decoder.layer{l}");
            layer_ids.push(DecoderLayerIds {
                ln1_gain: store.add(&format!("{p}.ln1.gain"), nn::init_gain(d).with_grad())?,
                ln1_bias: store.add(&format!("{p}.ln1.bias"), nn::init_zeros(d).with_grad())?,
                wq: store.add(&format!("{p}.attn.wq"), nn::init_weight(d, d, rng).with_grad())?,
                wk: store.add(&format!("{p}.attn.wk"), nn::init_weight(d, d, rng).with_grad())?,
                wv: store.add(&format!("{p}.attn.wv"), nn::init_weight(d, d, rng).with_grad())?,
                wo: store.add(&format!("{p}.attn.wo"), nn::init_weight(d, d, rng).with_grad())?,
                ln2_gain: store.add(&format!("{p}.ln2.gain"), nn::init_gain(d).with_grad())?,
                ln2_bias: store.add(&format!("{p}.ln2.bias"), nn::init_zeros(d).with_grad())?,
                mlp_w1: store.add(&format!("{p}.mlp.w1"), nn::init_weight(d, h, rng).with_grad())?,
                mlp_b1: store.add(&format!("{p}.mlp.b1"), nn::init_zeros(h).with_grad())?,
                mlp_w2: store.add(&format!("{p}.mlp.w2"), nn::init_weight(h, d, rng).with_grad())?,
                mlp_b2: store.add(&format!("{p}.mlp.b2"), nn::init_zeros(d).with_grad())?,
            });
        }
        Ok(Decoder {
            cfg: cfg.clone(),
            token_embed,
            text_pos,
            frame_embed,
            layer_ids,
            final_ln_gain: store.add("decoder.final_ln.gain", nn::init_gain(d).with_grad())?,
            final_ln_bias: store.add("decoder.final_ln.bias", nn::init_zeros(d).with_grad())?,
            head_w: store.add("decoder.head.w", nn::init_weight(d, cfg.vocab_size, rng).with_grad())?,
            head_b: store.add("decoder.head.b", nn::init_zeros(cfg.vocab_size).with_grad())?,
            lora: None,
        })
    }

    pub fn bind(cfg: &DecoderConfig, store: &ParamStore) -> Result<Decoder, ModelError> {
        cfg.validate()?;
        let mut layer_ids = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let p = format!("decoder.layer{l}");
            layer_ids.push(DecoderLayerIds {
                ln1_gain: store.id_of(&format!("{p}.ln1.gain"))?,
                ln1_bias: store.id_of(&format!("{p}.ln1.bias"))?,
                wq: store.id_of(&format!("{p}.attn.wq"))?,
                wk: store.id_of(&format!("{p}.attn.wk"))?,
                wv: store.id_of(&format!("{p}.attn.wv"))?,
                wo: store.id_of(&format!("{p}.attn.wo"))?,
                ln2_gain: store.id_of(&format!("{p}.ln2.gain"))?,
                ln2_bias: store.id_of(&format!("{p}.ln2.bias"))?,
                mlp_w1: store.id_of(&format!("{p}.mlp.w1"))?,
                mlp_b1: store.id_of(&format!("{p}.mlp.b1"))?,
                mlp_w2: store.id_of(&format!("{p}.mlp.w2"))?,
                mlp_b2: store.id_of(&format!("{p}.mlp.b2"))?,
            });
        }
        Ok(Decoder {
            cfg: cfg.clone(),
            token_embed: store.id_of("decoder.token_embed")?,
            text_pos: store.id_of("decoder.text_pos")?,
            frame_embed: store.id_of("decoder.frame_embed")?,
            layer_ids,
            final_ln_gain: store.id_of("decoder.final_ln.gain")?,
            final_ln_bias: store.id_of("decoder.final_ln.bias")?,
            head_w: store.id_of("decoder.head.w")?,
            head_b: store.id_of("decoder.head.b")?,
            lora: None,
        })
    }

    /// Attach fresh LoRA adapters (down random, up zero) to wq/wv of every
    /// layer. With `up == 0` the adapted decoder is bit-equal to the base.
    pub fn add_lora(&mut self, store: &mut ParamStore, rng: &mut Rng) -> Result<(), ModelError> {
        let rank = self.cfg.lora_rank;
        if rank == 0 {
            return Err(ModelError::Config("lora_rank is 0; nothing to attach".into()));
        }
        let d = self.cfg.lm_dim;
        let alpha = self.cfg.lora_alpha;
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 1..=self.cfg.layers {
            let p = format!("decoder_lora.layer{l}");
            let make = |target: &str, store: &mut ParamStore, rng: &mut Rng| -> Result<LoraPair, ModelError> {
                Ok(LoraPair {
                    down: store.add(
                        &format!("{p}.{target}.down"),
                        nn::init_weight(d, rank, rng).with_grad(),
                    )?,
                    up: store.add(
                        &format!("{p}.{target}.up"),
                        crate::Tensor::zeros(vec![rank, d]).with_grad(),
                    )?,
                    scaling: alpha / rank as f64,
                })
            };
            layers.push(DecoderLoraLayer {
                wq: make("wq", store, rng)?,
                wv: make("wv", store, rng)?,
            });
        }
        self.lora = Some(layers);
        Ok(())
    }

    pub fn bind_lora(&mut self, store: &ParamStore) -> Result<(), ModelError> {
        let rank = self.cfg.lora_rank;
        let alpha = self.cfg.lora_alpha;
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 1..=self.cfg.layers {
            let p = format!("decoder_lora.layer{l}");
            let pair = |t: &str| -> Result<LoraPair, ModelError> {
                Ok(LoraPair {
                    down: store.id_of(&format!("{p}.{t}.down"))?,
                    up: store.id_of(&format!("{p}.{t}.up"))?,
                    scaling: alpha / rank as f64,
                })
            };
            layers.push(DecoderLoraLayer {
                wq: pair("wq")?,
                wv: pair("wv")?,
            });
        }
        self.lora = Some(layers);
        Ok(())
    }

    fn sequence_len(&self, layout: &PromptLayout, tape: &Tape) -> usize {
        let visual_rows = tape.shape(layout.visual)[0];
        let probe_rows = layout.probe.map(|p| tape.shape(p)[0]).unwrap_or(0);
        visual_rows + probe_rows + layout.question.len() + layout.answer.len()
    }

    /// Causal forward over the concatenated prompt: logits per position.
    pub fn decode_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layout: &PromptLayout,
    ) -> Result<Var, ModelError> {
        let total = self.sequence_len(layout, tape);
        if total > self.cfg.context {
            return Err(ModelError::Config(format!(
                "sequence of {total} tokens exceeds context {}",
                self.cfg.context
            )));
        }
        if layout.frames > self.cfg.max_frames {
            return Err(ModelError::Config(format!(
                "{} frames exceed the temporal table of {}",
                layout.frames, self.cfg.max_frames
            )));
        }

        // visual rows get a learned temporal embedding per frame block
        let visual_rows = tape.shape(layout.visual)[0];
        let per_frame = visual_rows / layout.frames;
        let frame_ids: Vec<usize> = (0..layout.frames)
            .flat_map(|t| std::iter::repeat(t).take(per_frame))
            .collect();
        let ftab = tape.param(store, self.frame_embed);
        let frow = tape.embed_rows(ftab, &frame_ids)?;
        let visual = tape.add(layout.visual, frow)?;

        // text rows: token embedding + positional embedding within the text
        let text_ids: Vec<usize> = layout
            .question
            .iter()
            .chain(layout.answer.iter())
            .copied()
            .collect();
        let ttab = tape.param(store, self.token_embed);
        let temb = tape.embed_rows(ttab, &text_ids)?;
        let ptab = tape.param(store, self.text_pos);
        let pemb = tape.slice_rows(ptab, 0, text_ids.len())?;
        let text = tape.add(temb, pemb)?;

        let mut segments: Vec<Var> = Vec::with_capacity(3);
        match (layout.probe, self.cfg.probes_first) {
            (Some(z), true) => {
                segments.push(z);
                segments.push(visual);
            }
            (Some(z), false) => {
                segments.push(visual);
                segments.push(z);
            }
            (None, _) => segments.push(visual),
        }
        segments.push(text);
        let mut x = tape.concat_rows(&segments)?;

        let mask = nn::causal_mask(total);
        for (idx, ids) in self.layer_ids.iter().enumerate() {
            let lora = self.lora.as_ref().map(|ls| &ls[idx]);
            let proj = AttnProj {
                wq: nn::adapted_weight(tape, store, ids.wq, lora.map(|l| &l.wq))?,
                wk: tape.param(store, ids.wk),
                wv: nn::adapted_weight(tape, store, ids.wv, lora.map(|l| &l.wv))?,
                wo: tape.param(store, ids.wo),
            };
            let g1 = tape.param(store, ids.ln1_gain);
            let b1 = tape.param(store, ids.ln1_bias);
            let normed = tape.layer_norm(x, g1, b1, LN_EPS)?;
            let attn = nn::multi_head_attention(
                tape,
                normed,
                normed,
                &proj,
                self.cfg.heads,
                AttnScale::PerHead,
                Some(&mask),
            )?;
            x = tape.add(x, attn.out)?;

            let g2 = tape.param(store, ids.ln2_gain);
            let b2 = tape.param(store, ids.ln2_bias);
            let normed2 = tape.layer_norm(x, g2, b2, LN_EPS)?;
            let w1 = tape.param(store, ids.mlp_w1);
            let bb1 = tape.param(store, ids.mlp_b1);
            let w2 = tape.param(store, ids.mlp_w2);
            let bb2 = tape.param(store, ids.mlp_b2);
            let mlp_out = nn::mlp2(tape, normed2, w1, bb1, w2, bb2)?;
            x = tape.add(x, mlp_out)?;
        }

        let g = tape.param(store, self.final_ln_gain);
        let b = tape.param(store, self.final_ln_bias);
        let x = tape.layer_norm(x, g, b, LN_EPS)?;
        let hw = tape.param(store, self.head_w);
        let hb = tape.param(store, self.head_b);
        Ok(nn::linear(tape, x, hw, hb)?)
    }

    /// Teacher-forced cross-entropy over answer positions only.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layout: &PromptLayout,
    ) -> Result<Var, ModelError> {
        if layout.answer.is_empty() {
            return Err(ModelError::Tensor(TensorError::DegenerateBatch));
        }
        let logits = self.decode_forward(tape, store, layout)?;
        let total = tape.shape(logits)[0];
        let ans_len = layout.answer.len();
        // position i predicts token i+1; answer tokens sit at the tail
        let first_answer = total - ans_len;
        let mut targets = vec![0usize; total];
        let mut mask = vec![false; total];
        for (k, &tok) in layout.answer.iter().enumerate() {
            let pos = first_answer + k - 1;
            targets[pos] = tok;
            mask[pos] = true;
        }
        Ok(tape.cross_entropy(logits, &targets, &mask)?)
    }

    /// Greedy decoding: argmax per step, stop at EOS or `max_len` tokens.
    pub fn generate_greedy(
        &self,
        store: &ParamStore,
        build_prompt: &dyn Fn(&mut Tape) -> Result<PromptLayout, ModelError>,
        eos: usize,
        max_len: usize,
    ) -> Result<Vec<usize>, ModelError> {
        assert!(max_len >= 1);
        let mut answer: Vec<usize> = Vec::new();
        loop {
            let mut tape = Tape::new();
            let mut layout = build_prompt(&mut tape)?;
            layout.answer = answer.clone();
            let logits = self.decode_forward(&mut tape, store, &layout)?;
            let total = tape.shape(logits)[0];
            let vocab = tape.shape(logits)[1];
            let row = &tape.data(logits)[(total - 1) * vocab..total * vocab];
            let next = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if next == eos {
                break;
            }
            answer.push(next);
            if answer.len() >= max_len {
                break;
            }
        }
        Ok(answer)
    }
}
