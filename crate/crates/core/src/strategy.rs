//! Adaptation strategies: which parameter groups train, at which relative
//! learning rate, and which architectural additions (probes, adapters) a
//! strategy requires. Gating is a hard gate on `requires_grad`, not a zero
//! learning rate.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::VlmModel;
use crate::probes::ProbeConfig;
use crate::numerics::Rng;
use crate::ModelError;

/// Trainable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Vision-language connector (always trainable in the presets).
    Connector,
    /// Full vision encoder.
    EncoderFull,
    /// LoRA adapters on encoder attention.
    EncoderLora,
    /// Last four encoder layers.
    EncoderLast4,
    /// Probes + interaction modules + probe connector.
    Viscop,
    /// Full decoder.
    DecoderFull,
    /// LoRA adapters on decoder attention.
    DecoderLora,
}

impl Group {
    pub fn parse(name: &str) -> Option<Group> {
        Some(match name {
            "vl-c" => Group::Connector,
            "ve-full" => Group::EncoderFull,
            "ve-lora" => Group::EncoderLora,
            "ve-last-4" => Group::EncoderLast4,
            "viscop" => Group::Viscop,
            "llm-full" => Group::DecoderFull,
            "llm-lora" => Group::DecoderLora,
            _ => return None,
        })
    }
}

/// Probe architecture a strategy requires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbePlacementKind {
    /// No probe stack at all.
    None,
    /// Interaction module at every encoder layer.
    EveryLayer,
    /// Interaction module at layers L, L-k, L-2k, ...
    EveryK(usize),
    /// Single interaction module at the last layer (compression baseline).
    LastOnly,
    /// Probes and probe connector without any interaction modules.
    NoModules,
}

pub const DEFAULT_PROBE_COUNT: usize = 16;

/// Declarative adaptation strategy: trainable groups plus the probe
/// architecture. Groups absent from the set receive zero gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationStrategy {
    pub name: String,
    pub groups: BTreeSet<Group>,
    pub placement: ProbePlacementKind,
    pub probe_count: usize,
    pub scope: crate::probes::AttentionScope,
    pub residual: bool,
    pub per_head_scale: bool,
}

/// The ten named presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyPreset {
    VlcOnly,
    VlcVe,
    VlcVeLlm,
    VlcLlmLora,
    Viscop,
    ViscopLlmFull,
    VpOnly,
    VlcVeLoraLlmLora,
    VlcLast4LlmLora,
    QformerStyle,
}

impl StrategyPreset {
    pub fn all() -> [StrategyPreset; 10] {
        [
            StrategyPreset::VlcOnly,
            StrategyPreset::VlcVe,
            StrategyPreset::VlcVeLlm,
            StrategyPreset::VlcLlmLora,
            StrategyPreset::Viscop,
            StrategyPreset::ViscopLlmFull,
            StrategyPreset::VpOnly,
            StrategyPreset::VlcVeLoraLlmLora,
            StrategyPreset::VlcLast4LlmLora,
            StrategyPreset::QformerStyle,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyPreset::VlcOnly => "vlc-only",
            StrategyPreset::VlcVe => "vlc-ve",
            StrategyPreset::VlcVeLlm => "vlc-ve-llm",
            StrategyPreset::VlcLlmLora => "vlc-llm-lora",
            StrategyPreset::Viscop => "viscop",
            StrategyPreset::ViscopLlmFull => "viscop-llm-full",
            StrategyPreset::VpOnly => "vp-only",
            StrategyPreset::VlcVeLoraLlmLora => "vlc-ve-lora-llm-lora",
            StrategyPreset::VlcLast4LlmLora => "vlc-last4-llm-lora",
            StrategyPreset::QformerStyle => "qformer-style",
        }
    }

    pub fn parse(name: &str) -> Option<StrategyPreset> {
        StrategyPreset::all().into_iter().find(|p| p.name() == name)
    }

    pub fn strategy(self) -> AdaptationStrategy {
        use Group::*;
        let (groups, placement): (Vec<Group>, ProbePlacementKind) = match self {
            StrategyPreset::VlcOnly => (vec![Connector], ProbePlacementKind::None),
            StrategyPreset::VlcVe => (vec![Connector, EncoderFull], ProbePlacementKind::None),
            StrategyPreset::VlcVeLlm => (
                vec![Connector, EncoderFull, DecoderFull],
                ProbePlacementKind::None,
            ),
            StrategyPreset::VlcLlmLora => {
                (vec![Connector, DecoderLora], ProbePlacementKind::None)
            }
            StrategyPreset::Viscop => (
                vec![Connector, Viscop, DecoderLora],
                ProbePlacementKind::EveryLayer,
            ),
            StrategyPreset::ViscopLlmFull => (
                vec![Connector, Viscop, DecoderFull],
                ProbePlacementKind::EveryLayer,
            ),
            StrategyPreset::VpOnly => (
                vec![Connector, Viscop, DecoderLora],
                ProbePlacementKind::NoModules,
            ),
            StrategyPreset::VlcVeLoraLlmLora => (
                vec![Connector, EncoderLora, DecoderLora],
                ProbePlacementKind::None,
            ),
            StrategyPreset::VlcLast4LlmLora => (
                vec![Connector, EncoderLast4, DecoderLora],
                ProbePlacementKind::None,
            ),
            StrategyPreset::QformerStyle => (
                vec![Connector, Viscop, DecoderLora],
                ProbePlacementKind::LastOnly,
            ),
        };
        AdaptationStrategy {
            name: self.name().to_string(),
            groups: groups.into_iter().collect(),
            placement,
            probe_count: DEFAULT_PROBE_COUNT,
            scope: crate::probes::AttentionScope::SpatioTemporal,
            residual: true,
            per_head_scale: true,
        }
    }
}

impl AdaptationStrategy {
    pub fn uses_probes(&self) -> bool {
        self.placement != ProbePlacementKind::None
    }

    pub fn probe_config(&self, encoder_layers: usize) -> Option<ProbeConfig> {
        let placement: Vec<usize> = match self.placement {
            ProbePlacementKind::None => return None,
            ProbePlacementKind::EveryLayer => (1..=encoder_layers).collect(),
            ProbePlacementKind::EveryK(k) => {
                // layers L, L-k, ..., kept ascending
                let mut v: Vec<usize> = (1..=encoder_layers)
                    .rev()
                    .step_by(k.max(1))
                    .collect();
                v.reverse();
                v
            }
            ProbePlacementKind::LastOnly => vec![encoder_layers],
            ProbePlacementKind::NoModules => Vec::new(),
        };
        Some(ProbeConfig {
            probe_count: self.probe_count,
            placement,
            scope: self.scope,
            residual: self.residual,
            per_head_scale: self.per_head_scale,
        })
    }

    /// Store-name prefixes of one group, given the encoder depth.
    fn group_prefixes(group: Group, encoder_layers: usize) -> Vec<String> {
        match group {
            Group::Connector => vec!["connector.".into()],
            Group::EncoderFull => vec!["encoder.".into()],
            Group::EncoderLora => vec!["encoder_lora.".into()],
            Group::EncoderLast4 => {
                let first = encoder_layers.saturating_sub(4) + 1;
                (first..=encoder_layers)
                    .map(|l| format!("encoder.layer{l}."))
                    .collect()
            }
            Group::Viscop => vec![
                "probes.".into(),
                "interaction.".into(),
                "probe_connector.".into(),
            ],
            Group::DecoderFull => vec!["decoder.".into()],
            Group::DecoderLora => vec!["decoder_lora.".into()],
        }
    }

    /// Relative learning rate of a parameter under this strategy; encoder
    /// weights train slower by `ve_scale` (default 0.2).
    pub fn lr_multiplier(param_name: &str, ve_scale: f64) -> f64 {
        if param_name.starts_with("encoder.") || param_name.starts_with("encoder_lora.") {
            ve_scale
        } else {
            1.0
        }
    }
}

/// Byte snapshot of every frozen parameter, for post-hoc identity audits.
#[derive(Debug, Clone)]
pub struct FrozenAudit {
    entries: Vec<(String, Vec<u8>)>,
}

impl FrozenAudit {
    /// Names of frozen parameters that changed since the snapshot.
    pub fn violations(&self, model: &VlmModel) -> Vec<String> {
        let mut out = Vec::new();
        for (name, bytes) in &self.entries {
            let id = model.store.id_of(name).expect("audited param still exists");
            let now: Vec<u8> = model
                .store
                .get(id)
                .data()
                .iter()
                .flat_map(|x| x.to_le_bytes())
                .collect();
            if &now != bytes {
                out.push(name.clone());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Make sure the model carries the architecture the strategy needs:
/// probes with the right placement, decoder/encoder adapters.
pub fn prepare_architecture(
    model: &mut VlmModel,
    strategy: &AdaptationStrategy,
    rng: &mut Rng,
) -> Result<(), ModelError> {
    if let Some(pc) = strategy.probe_config(model.cfg.encoder.layers) {
        if model.probes.is_none() {
            model.extend_with_probes(&pc, rng)?;
        }
    }
    if strategy.groups.contains(&Group::DecoderLora) && !model.cfg.decoder_lora_attached {
        model.attach_decoder_lora(rng)?;
    }
    if strategy.groups.contains(&Group::EncoderLora) && !model.cfg.encoder_lora_attached {
        model.attach_encoder_lora(rng)?;
    }
    Ok(())
}

/// Set `requires_grad` exactly per the strategy's groups and snapshot the
/// frozen parameters for a later identity audit.
pub fn apply_strategy(model: &mut VlmModel, strategy: &AdaptationStrategy) -> FrozenAudit {
    model.store.freeze_all();
    let layers = model.cfg.encoder.layers;
    for &group in &strategy.groups {
        for prefix in AdaptationStrategy::group_prefixes(group, layers) {
            model.store.set_trainable_by_prefix(&prefix, true);
        }
    }
    let mut entries = Vec::new();
    for (name, tensor) in model.store.iter() {
        if !tensor.requires_grad() {
            let bytes = tensor.data().iter().flat_map(|x| x.to_le_bytes()).collect();
            entries.push((name.to_string(), bytes));
        }
    }
    FrozenAudit { entries }
}
