//! Architecture descriptors and the integer compute/memory quantities
//! derived from them.
//!
//! Everything here is exact `u64` arithmetic. FLOPs count 2 per
//! multiply-accumulate; only the QKᵀ and AV products are charged for
//! attention. Embedding and unembedding parameters are excluded from every
//! count.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Which past positions a query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttentionPolicy {
    Dense,
    /// Sliding window of the most recent `window` positions (the query
    /// included) plus the first `sink` positions of the sequence.
    Streaming { window: u64, sink: u64 },
}

impl AttentionPolicy {
    pub fn streaming(window: u64, sink: u64) -> Self {
        AttentionPolicy::Streaming { window, sink }
    }

    /// Number of positions a query at context length `context` attends to.
    pub fn attended_length(&self, context: u64) -> u64 {
        match *self {
            AttentionPolicy::Dense => context,
            AttentionPolicy::Streaming { window, sink } => context.min(window + sink),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let AttentionPolicy::Streaming { window, .. } = *self {
            if window == 0 {
                return Err(invalid("streaming window must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, AttentionPolicy::Dense)
    }
}

/// How rotary positions are assigned to cached keys.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScheme {
    /// Positions in the original text.
    #[default]
    TextAbsolute,
    /// Slot index inside the (sink + window) cache.
    CacheRelative,
}

/// Decoder-only transformer descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub n_layer: u64,
    pub d_model: u64,
    pub n_heads: u64,
    pub n_kv_heads: u64,
    pub d_head: u64,
    pub d_ff: u64,
    pub vocab: u64,
    pub bytes_per_param: u64,
    pub attention: AttentionPolicy,
    #[serde(default)]
    pub positions: PositionScheme,
}

impl TransformerSpec {
    /// 8 layers, width 768, MHA with 12 heads, 4x MLP, GPT-2 vocabulary,
    /// 16-bit weights.
    pub fn default_target() -> Self {
        TransformerSpec {
            n_layer: 8,
            d_model: 768,
            n_heads: 12,
            n_kv_heads: 12,
            d_head: 64,
            d_ff: 3072,
            vocab: 50257,
            bytes_per_param: 2,
            attention: AttentionPolicy::Dense,
            positions: PositionScheme::TextAbsolute,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layer", self.n_layer),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("bytes_per_param", self.bytes_per_param),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(invalid(format!(
                "n_heads * d_head = {} does not equal d_model = {}",
                self.n_heads * self.d_head,
                self.d_model
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(invalid(format!(
                "n_kv_heads = {} does not divide n_heads = {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        self.attention.validate()
    }

    /// Width of the key (or value) projection output.
    pub fn kv_dim(&self) -> u64 {
        self.n_kv_heads * self.d_head
    }

    pub fn attended_length(&self, context: u64) -> u64 {
        self.attention.attended_length(context)
    }

    pub fn with_attention(mut self, attention: AttentionPolicy) -> Self {
        self.attention = attention;
        self
    }

    pub fn with_positions(mut self, positions: PositionScheme) -> Self {
        self.positions = positions;
        self
    }
}

/// Parameters in the transformer blocks. Q/O are `d_model × d_model`, K/V
/// are `d_model × kv_dim`, the MLP is two `d_model × d_ff` matrices.
pub fn body_params(spec: &TransformerSpec) -> u64 {
    let d = spec.d_model;
    spec.n_layer * (2 * d * (d + spec.kv_dim()) + 2 * d * spec.d_ff)
}

/// FLOPs of one decode step for one sequence at context length `context`.
pub fn decode_flops_per_token(spec: &TransformerSpec, context: u64) -> u64 {
    2 * body_params(spec) + 4 * spec.n_layer * spec.d_model * spec.attended_length(context)
}

pub fn weight_bytes(spec: &TransformerSpec) -> u64 {
    body_params(spec) * spec.bytes_per_param
}

/// KV-cache bytes read by one forward pass over a batch of `batch`
/// sequences at context length `context`.
pub fn kv_bytes(spec: &TransformerSpec, context: u64, batch: u64) -> u64 {
    batch
        * 2
        * spec.n_layer
        * spec.kv_dim()
        * spec.attended_length(context)
        * spec.bytes_per_param
}

/// Keeps the top `layers_kept` blocks of `target`; widths are unchanged.
pub fn prune_spec(target: &TransformerSpec, layers_kept: u64) -> Result<TransformerSpec> {
    if layers_kept == 0 || layers_kept > target.n_layer {
        return Err(invalid(format!(
            "layers_kept = {layers_kept} outside 1..={}",
            target.n_layer
        )));
    }
    Ok(TransformerSpec {
        n_layer: layers_kept,
        ..*target
    })
}

/// The draft-model families compared throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftFamily {
    /// Small independently trained draft.
    VanillaSmall,
    /// Self-speculation: the target itself behind a streaming mask.
    #[serde(rename = "magicdec")]
    MagicDec,
    /// Pruned feedback-memory draft with a streaming mask.
    Spire,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DraftKind {
    pub family: DraftFamily,
    pub spec: TransformerSpec,
}

impl DraftKind {
    /// One-layer slice of the target (1/8 of an 8-layer target).
    pub fn vanilla(target: &TransformerSpec) -> Result<Self> {
        Ok(DraftKind {
            family: DraftFamily::VanillaSmall,
            spec: prune_spec(target, 1)?.with_attention(AttentionPolicy::Dense),
        })
    }

    pub fn magicdec(target: &TransformerSpec, window: u64, sink: u64) -> Self {
        DraftKind {
            family: DraftFamily::MagicDec,
            spec: target
                .with_attention(AttentionPolicy::streaming(window, sink))
                .with_positions(PositionScheme::CacheRelative),
        }
    }

    pub fn spire(target: &TransformerSpec, layers_kept: u64, window: u64, sink: u64) -> Result<Self> {
        Ok(DraftKind {
            family: DraftFamily::Spire,
            spec: prune_spec(target, layers_kept)?
                .with_attention(AttentionPolicy::streaming(window, sink))
                .with_positions(PositionScheme::TextAbsolute),
        })
    }

    /// Checks the family-specific relationship to `target`.
    pub fn validate_against(&self, target: &TransformerSpec) -> Result<()> {
        self.spec.validate()?;
        match self.family {
            DraftFamily::MagicDec => {
                let same = TransformerSpec {
                    attention: target.attention,
                    positions: target.positions,
                    ..self.spec
                };
                if same != *target || self.spec.attention.is_dense() {
                    return Err(invalid(
                        "self-speculation draft must equal the target apart from a streaming mask",
                    ));
                }
            }
            DraftFamily::Spire => {
                if self.spec.d_model != target.d_model {
                    return Err(invalid("feedback draft must match the target's d_model"));
                }
            }
            DraftFamily::VanillaSmall => {}
        }
        Ok(())
    }
}
