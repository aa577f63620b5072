//! Transformer shape, operator list and breakpoints.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown builtin model `{0}` (known: llama2-7b, opt-13b)")]
    UnknownModel(String),
    #[error("hidden_dim {hidden} != num_heads {heads} x head_dim {head_dim}")]
    HeadShape {
        hidden: u64,
        heads: u64,
        head_dim: u64,
    },
    #[error("num_heads ({heads}) must be a positive multiple of num_kv_heads ({kv_heads})")]
    KvHeads { heads: u64, kv_heads: u64 },
    #[error("field `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("breakpoint after operator {index} but the model has {len} operators")]
    BreakpointOutOfRange { index: usize, len: usize },
    #[error("operator list is empty")]
    NoOperators,
}

/// One coarse operator of a decoder iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorKind {
    QkvProj,
    AttnScore,
    AttnOutProj,
    MlpUp,
    MlpDown,
    LmHead,
    /// Linear-in-tokens operator described by explicit coefficients.
    Custom {
        name: String,
        flops_per_token: u64,
        weight_bytes: u64,
        act_bytes_per_token: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    /// Cost is multiplied by `num_layers` when set.
    pub per_layer: bool,
}

impl OperatorSpec {
    pub fn layer(kind: OperatorKind) -> Self {
        Self {
            kind,
            per_layer: true,
        }
    }

    pub fn once(kind: OperatorKind) -> Self {
        Self {
            kind,
            per_layer: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BreakpointPosition {
    AfterOperator(usize),
    EndOfIteration,
}

impl Serialize for BreakpointPosition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            BreakpointPosition::AfterOperator(i) => s.serialize_u64(*i as u64),
            BreakpointPosition::EndOfIteration => s.serialize_str("end_of_iteration"),
        }
    }
}

impl<'de> Deserialize<'de> for BreakpointPosition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(BreakpointPosition::AfterOperator(i as usize)),
            Raw::Name(s) if s == "end_of_iteration" => Ok(BreakpointPosition::EndOfIteration),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "breakpoint position must be an operator index or \"end_of_iteration\", got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Breakpoint {
    pub position: BreakpointPosition,
    pub hook: String,
}

pub const DEFAULT_HOOK: &str = "local_schedule";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub ffn_dim: u64,
    pub vocab_size: u64,
    pub dtype_bytes: u64,
    /// Gated MLP (SwiGLU-style): three ffn matrices instead of two.
    pub gated_mlp: bool,
    /// Input embedding and LM head share one matrix.
    pub tied_embeddings: bool,
    pub operators: Vec<OperatorSpec>,
    /// User breakpoints. The default end-of-iteration hook is implicit.
    #[serde(default)]
    pub breakpoints: Vec<Breakpoint>,
}

/// The standard decoder operator list: five per-layer matmul families plus
/// the LM head.
pub fn standard_operators() -> Vec<OperatorSpec> {
    vec![
        OperatorSpec::layer(OperatorKind::QkvProj),
        OperatorSpec::layer(OperatorKind::AttnScore),
        OperatorSpec::layer(OperatorKind::AttnOutProj),
        OperatorSpec::layer(OperatorKind::MlpUp),
        OperatorSpec::layer(OperatorKind::MlpDown),
        OperatorSpec::once(OperatorKind::LmHead),
    ]
}

impl ModelSpec {
    /// Published architecture constants.
    pub fn builtin(name: &str) -> Result<Self, ModelError> {
        match name {
            // Llama 2 7B model card / config.json (meta-llama/Llama-2-7b-hf):
            // 32 layers, hidden 4096, 32 heads, intermediate 11008, vocab 32000,
            // SwiGLU MLP, untied lm_head.
            "llama2-7b" => Ok(Self {
                name: name.into(),
                num_layers: 32,
                hidden_dim: 4096,
                num_heads: 32,
                num_kv_heads: 32,
                head_dim: 128,
                ffn_dim: 11008,
                vocab_size: 32000,
                dtype_bytes: 2,
                gated_mlp: true,
                tied_embeddings: false,
                operators: standard_operators(),
                breakpoints: Vec::new(),
            }),
            // OPT-13B config.json (facebook/opt-13b): 40 layers, hidden 5120,
            // 40 heads, ffn 20480, vocab 50272, ReLU MLP, tied embeddings.
            "opt-13b" => Ok(Self {
                name: name.into(),
                num_layers: 40,
                hidden_dim: 5120,
                num_heads: 40,
                num_kv_heads: 40,
                head_dim: 128,
                ffn_dim: 20480,
                vocab_size: 50272,
                dtype_bytes: 2,
                gated_mlp: false,
                tied_embeddings: true,
                operators: standard_operators(),
                breakpoints: Vec::new(),
            }),
            other => Err(ModelError::UnknownModel(other.into())),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("dtype_bytes", self.dtype_bytes),
        ] {
            if v == 0 {
                return Err(ModelError::NonPositive(name));
            }
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(ModelError::HeadShape {
                hidden: self.hidden_dim,
                heads: self.num_heads,
                head_dim: self.head_dim,
            });
        }
        if self.num_kv_heads > self.num_heads || !self.num_heads.is_multiple_of(self.num_kv_heads) {
            return Err(ModelError::KvHeads {
                heads: self.num_heads,
                kv_heads: self.num_kv_heads,
            });
        }
        if self.operators.is_empty() {
            return Err(ModelError::NoOperators);
        }
        for bp in &self.breakpoints {
            if let BreakpointPosition::AfterOperator(index) = bp.position {
                if index >= self.operators.len() {
                    return Err(ModelError::BreakpointOutOfRange {
                        index,
                        len: self.operators.len(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> u64 {
        self.num_kv_heads * self.head_dim
    }

    /// Bytes of K and V cached per token across all layers.
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.num_layers * self.num_kv_heads * self.head_dim * self.dtype_bytes
    }

    pub fn attention_params_per_layer(&self) -> u64 {
        let h = self.hidden_dim;
        // Q and output projections are h x h; K and V are h x kv_dim.
        2 * h * h + 2 * h * self.kv_dim()
    }

    pub fn mlp_params_per_layer(&self) -> u64 {
        let mats = if self.gated_mlp { 3 } else { 2 };
        mats * self.hidden_dim * self.ffn_dim
    }

    pub fn embedding_params(&self) -> u64 {
        let tables = if self.tied_embeddings { 1 } else { 2 };
        tables * self.vocab_size * self.hidden_dim
    }

    pub fn param_count(&self) -> u64 {
        self.num_layers * (self.attention_params_per_layer() + self.mlp_params_per_layer())
            + self.embedding_params()
    }

    pub fn weight_bytes(&self) -> u64 {
        self.param_count() * self.dtype_bytes
    }

    /// User breakpoints plus the default end-of-iteration hook, ordered by
    /// position (operator breakpoints first, end-of-iteration last).
    pub fn effective_breakpoints(&self) -> Vec<Breakpoint> {
        let mut all = vec![Breakpoint {
            position: BreakpointPosition::EndOfIteration,
            hook: DEFAULT_HOOK.into(),
        }];
        all.extend(self.breakpoints.iter().cloned());
        // Stable sort keeps the default first among end-of-iteration hooks.
        all.sort_by_key(|b| b.position);
        all
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_model() -> ModelSpec {
        ModelSpec {
            name: "unit".into(),
            num_layers: 1,
            hidden_dim: 1,
            num_heads: 1,
            num_kv_heads: 1,
            head_dim: 1,
            ffn_dim: 1,
            vocab_size: 0,
            dtype_bytes: 2,
            gated_mlp: false,
            tied_embeddings: true,
            operators: standard_operators(),
            breakpoints: vec![],
        }
    }

    #[test]
    fn kv_bytes_llama() {
        let m = ModelSpec::builtin("llama2-7b").unwrap();
        assert_eq!(m.kv_bytes_per_token(), 524_288);
    }

    #[test]
    fn kv_bytes_unit_and_linearity() {
        let mut m = unit_model();
        assert_eq!(m.kv_bytes_per_token(), 4);
        let before = ModelSpec::builtin("opt-13b").unwrap();
        let mut after = before.clone();
        after.dtype_bytes *= 2;
        assert_eq!(after.kv_bytes_per_token(), 2 * before.kv_bytes_per_token());
        m.dtype_bytes = 4;
        assert_eq!(m.kv_bytes_per_token(), 8);
    }

    #[test]
    fn llama_weights_near_published() {
        let m = ModelSpec::builtin("llama2-7b").unwrap();
        let published = 6.74e9 * 2.0;
        let rel = (m.weight_bytes() as f64 - published).abs() / published;
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn opt_weights_near_published() {
        let m = ModelSpec::builtin("opt-13b").unwrap();
        let rel = (m.param_count() as f64 - 12.85e9).abs() / 12.85e9;
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn layer_term_scales_with_layers() {
        let m = ModelSpec::builtin("llama2-7b").unwrap();
        let mut d = m.clone();
        d.num_layers *= 2;
        let layer = |x: &ModelSpec| x.param_count() - x.embedding_params();
        assert_eq!(layer(&d), 2 * layer(&m));
    }

    #[test]
    fn zero_vocab_has_no_embeddings() {
        let m = unit_model();
        assert_eq!(m.embedding_params(), 0);
    }

    #[test]
    fn builtin_shapes() {
        let l = ModelSpec::builtin("llama2-7b").unwrap();
        assert_eq!((l.num_layers, l.hidden_dim), (32, 4096));
        let o = ModelSpec::builtin("opt-13b").unwrap();
        assert_eq!((o.num_layers, o.hidden_dim), (40, 5120));
        assert_eq!(
            ModelSpec::builtin("gpt-99"),
            Err(ModelError::UnknownModel("gpt-99".into()))
        );
        l.validate().unwrap();
        o.validate().unwrap();
    }

    #[test]
    fn breakpoints_validated_and_defaulted() {
        let mut m = unit_model();
        let eff = m.effective_breakpoints();
        assert_eq!(eff.len(), 1);
        assert_eq!(eff[0].position, BreakpointPosition::EndOfIteration);

        m.breakpoints.push(Breakpoint {
            position: BreakpointPosition::AfterOperator(6),
            hook: "x".into(),
        });
        assert_eq!(
            m.validate(),
            Err(ModelError::BreakpointOutOfRange { index: 6, len: 6 })
        );
        m.breakpoints[0].position = BreakpointPosition::AfterOperator(1);
        m.validate().unwrap();
        let eff = m.effective_breakpoints();
        assert_eq!(eff[0].position, BreakpointPosition::AfterOperator(1));
        assert_eq!(eff[1].hook, DEFAULT_HOOK);

        m.breakpoints.clear();
        assert_eq!(m.effective_breakpoints().len(), 1);
    }

    #[test]
    fn shape_validation() {
        let mut m = unit_model();
        m.hidden_dim = 2;
        assert!(matches!(m.validate(), Err(ModelError::HeadShape { .. })));
        let mut g = ModelSpec::builtin("llama2-7b").unwrap();
        g.num_kv_heads = 8;
        g.validate().unwrap();
        assert_eq!(g.kv_bytes_per_token(), 524_288 / 4);
        g.num_kv_heads = 5;
        assert!(g.validate().is_err());
    }
}
