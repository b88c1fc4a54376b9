//! Learnable visual probes. A compact bank of probe tokens is updated
//! layer-wise by cross-attention interaction modules against the frozen
//! encoder's intermediate activations, giving adaptation a pathway that
//! never touches encoder weights.

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, LayerActivations};
use crate::nn::{self, AttnProj, AttnScale};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::ModelError;

/// Which tokens the probes may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionScope {
    /// Keys/values span all frames at once.
    SpatioTemporal,
    /// Keys/values restricted per frame; outputs averaged over frames.
    SpatialOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Number of probe tokens (M).
    pub probe_count: usize,
    /// 1-based encoder layers carrying an interaction module, ascending.
    /// Empty means probes pass through untouched (the probes-only design).
    pub placement: Vec<usize>,
    pub scope: AttentionScope,
    /// Residual probe update `P + attn` (default) vs the literal overwrite.
    pub residual: bool,
    /// Per-head `1/sqrt(d_head)` scaling (default) vs literal `1/sqrt(d_v)`.
    pub per_head_scale: bool,
}

impl ProbeConfig {
    pub fn every_layer(probe_count: usize, layers: usize) -> Self {
        ProbeConfig {
            probe_count,
            placement: (1..=layers).collect(),
            scope: AttentionScope::SpatioTemporal,
            residual: true,
            per_head_scale: true,
        }
    }

    /// Interaction module only at the final encoder layer.
    pub fn last_layer_only(probe_count: usize, layers: usize) -> Self {
        ProbeConfig {
            placement: vec![layers],
            ..Self::every_layer(probe_count, layers)
        }
    }

    /// Probes and probe connector with no interaction modules.
    pub fn probes_only(probe_count: usize) -> Self {
        ProbeConfig {
            placement: Vec::new(),
            ..Self::every_layer(probe_count, 1)
        }
    }

    pub fn validate(&self, encoder_layers: usize) -> Result<(), ModelError> {
        if self.probe_count == 0 {
            return Err(ModelError::Config("probe_count must be >= 1".into()));
        }
        for &l in &self.placement {
            if l == 0 || l > encoder_layers {
                return Err(ModelError::Config(format!(
                    "interaction placement {l} outside encoder layers 1..={encoder_layers}"
                )));
            }
        }
        if self.placement.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::Config(
                "interaction placement must be strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

/// Per-layer cross-attention between probes (queries) and encoder tokens
/// (keys/values). Each module owns its projections.
#[derive(Debug, Clone)]
pub struct InteractionModule {
    pub layer: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

/// The probe matrix P (M x d_v), trainable.
#[derive(Debug, Clone)]
pub struct ProbeBank {
    pub probes: ParamId,
    pub probe_count: usize,
}

/// Probe bank plus its interaction modules, ordered by ascending layer.
#[derive(Debug, Clone)]
pub struct ProbeStack {
    pub cfg: ProbeConfig,
    pub bank: ProbeBank,
    pub modules: Vec<InteractionModule>,
}

/// Probe outputs plus the per-layer attention trace.
pub struct ProbeRun {
    /// Final probe tokens `[M x d_v]`.
    pub final_probes: Var,
    /// For each interaction layer: mean over probes and heads of the
    /// attention rows, a length `T*N` vector summing to 1.
    pub attn_maps: Vec<(usize, Tensor)>,
}

/// Copy the encoder's layer-`layer` self-attention weights into a fresh,
/// trainable interaction module (deep copy, no aliasing).
pub fn init_interaction(
    store: &mut ParamStore,
    encoder: &Encoder,
    layer: usize,
) -> Result<InteractionModule, ModelError> {
    if layer == 0 || layer > encoder.cfg.layers {
        return Err(ModelError::Config(format!(
            "encoder has no layer {layer} (1..={})",
            encoder.cfg.layers
        )));
    }
    let src = &encoder.layer_ids[layer - 1];
    let copy = |store: &mut ParamStore, from: ParamId, name: String| -> Result<ParamId, ModelError> {
        let tensor = store.get(from).clone().with_grad();
        Ok(store.add(&name, tensor)?)
    };
    let p = format!("interaction.layer{layer}");
    Ok(InteractionModule {
        layer,
        wq: copy(store, src.wq, format!("{p}.wq"))?,
        wk: copy(store, src.wk, format!("{p}.wk"))?,
        wv: copy(store, src.wv, format!("{p}.wv"))?,
        wo: copy(store, src.wo, format!("{p}.wo"))?,
        heads: encoder.cfg.heads,
    })
}

impl ProbeStack {
    /// Fresh probe bank (i.i.d. normal, std 0.02) plus interaction modules
    /// initialized from the encoder's self-attention weights at each
    /// placement layer.
    pub fn init(
        cfg: &ProbeConfig,
        encoder: &Encoder,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<ProbeStack, ModelError> {
        cfg.validate(encoder.cfg.layers)?;
        let probes = store.add(
            "probes.p0",
            Tensor::randn(vec![cfg.probe_count, encoder.cfg.vision_dim], 0.02, rng).with_grad(),
        )?;
        let mut modules = Vec::with_capacity(cfg.placement.len());
        for &layer in &cfg.placement {
            modules.push(init_interaction(store, encoder, layer)?);
        }
        Ok(ProbeStack {
            cfg: cfg.clone(),
            bank: ProbeBank {
                probes,
                probe_count: cfg.probe_count,
            },
            modules,
        })
    }

    /// Re-attach to parameters already present in the store.
    pub fn bind(
        cfg: &ProbeConfig,
        encoder: &Encoder,
        store: &ParamStore,
    ) -> Result<ProbeStack, ModelError> {
        cfg.validate(encoder.cfg.layers)?;
        let mut modules = Vec::with_capacity(cfg.placement.len());
        for &layer in &cfg.placement {
            let p = format!("interaction.layer{layer}");
            modules.push(InteractionModule {
                layer,
                wq: store.id_of(&format!("{p}.wq"))?,
                wk: store.id_of(&format!("{p}.wk"))?,
                wv: store.id_of(&format!("{p}.wv"))?,
                wo: store.id_of(&format!("{p}.wo"))?,
                heads: encoder.cfg.heads,
            });
        }
        Ok(ProbeStack {
            cfg: cfg.clone(),
            bank: ProbeBank {
                probes: store.id_of("probes.p0")?,
                probe_count: cfg.probe_count,
            },
            modules,
        })
    }

    /// One probe update against the tokens of one encoder layer. Returns
    /// the updated probes and the averaged attention map.
    pub fn interaction_step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        module: &InteractionModule,
        probes: Var,
        tokens: Var,
        frames: usize,
    ) -> Result<(Var, Tensor), ModelError> {
        let proj = AttnProj {
            wq: tape.param(store, module.wq),
            wk: tape.param(store, module.wk),
            wv: tape.param(store, module.wv),
            wo: tape.param(store, module.wo),
        };
        let scale = if self.cfg.per_head_scale {
            AttnScale::PerHead
        } else {
            AttnScale::FullDim
        };
        let total = tape.shape(tokens)[0];
        let per_frame = total / frames;
        let (attn_out, map) = match self.cfg.scope {
            AttentionScope::SpatioTemporal => {
                let attn = nn::multi_head_attention(
                    tape,
                    probes,
                    tokens,
                    &proj,
                    module.heads,
                    scale,
                    None,
                )?;
                let map = mean_probe_map(&attn.probs, 1.0);
                (attn.out, map)
            }
            AttentionScope::SpatialOnly => {
                let mut frame_outs = Vec::with_capacity(frames);
                let mut map = vec![0.0; total];
                for t in 0..frames {
                    let xt = tape.slice_rows(tokens, t * per_frame, per_frame)?;
                    let attn = nn::multi_head_attention(
                        tape,
                        probes,
                        xt,
                        &proj,
                        module.heads,
                        scale,
                        None,
                    )?;
                    let sub = mean_probe_map(&attn.probs, 1.0 / frames as f64);
                    map[t * per_frame..(t + 1) * per_frame].copy_from_slice(sub.data());
                    frame_outs.push(attn.out);
                }
                let mut sum = frame_outs[0];
                for &o in &frame_outs[1..] {
                    sum = tape.add(sum, o)?;
                }
                let avg = tape.scale(sum, 1.0 / frames as f64);
                (avg, Tensor::from_vec(vec![total], map).unwrap())
            }
        };
        let updated = if self.cfg.residual {
            tape.add(probes, attn_out)?
        } else {
            attn_out
        };
        Ok((updated, map))
    }

    /// Flow the probe bank through the interaction modules in ascending
    /// layer order; layers without a module leave the probes unchanged.
    pub fn run_probes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        acts: &LayerActivations,
    ) -> Result<ProbeRun, ModelError> {
        let mut probes = tape.param(store, self.bank.probes);
        let mut attn_maps = Vec::with_capacity(self.modules.len());
        for module in &self.modules {
            let tokens = acts.tokens[module.layer - 1];
            let (updated, map) =
                self.interaction_step(tape, store, module, probes, tokens, acts.frames)?;
            attn_maps.push((module.layer, map));
            probes = updated;
        }
        Ok(ProbeRun {
            final_probes: probes,
            attn_maps,
        })
    }

    /// Trainable parameters held by the interaction modules alone.
    pub fn interaction_param_count(&self, store: &ParamStore) -> usize {
        store.param_count_by_prefix("interaction.")
    }
}

/// Mean over heads and probe rows of row-stochastic matrices, scaled by
/// `weight`; a `[cols]` vector.
fn mean_probe_map(head_probs: &[Tensor], weight: f64) -> Tensor {
    let rows = head_probs[0].shape()[0];
    let cols = head_probs[0].shape()[1];
    let mut acc = vec![0.0; cols];
    for p in head_probs {
        for r in 0..rows {
            for c in 0..cols {
                acc[c] += p.data()[r * cols + c];
            }
        }
    }
    let norm = weight / (head_probs.len() * rows) as f64;
    for a in &mut acc {
        *a *= norm;
    }
    Tensor::from_vec(vec![cols], acc).unwrap()
}
