use std::fmt;

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};
use crate::text::EmbeddingTable;

/// Default half-width of the uniform weight initialization.
pub const INIT_SCALE: f64 = 0.08;

/// `group.field` name of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamName {
    pub group: &'static str,
    pub field: &'static str,
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.group, self.field)
    }
}

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $($(#[$fmeta])* pub $field: T,)+
        }

        impl<T> $name<T> {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),+];

            fn try_map<'s, U, E>(&'s self, group: &'static str, f: &mut impl FnMut(ParamName, &'s T) -> Result<U, E>) -> Result<$name<U>, E> {
                Ok($name {
                    $($field: f(ParamName { group, field: stringify!($field) }, &self.$field)?,)+
                })
            }

            fn push_refs<'s>(&'s self, group: &'static str, out: &mut Vec<(ParamName, &'s T)>) {
                $(out.push((ParamName { group, field: stringify!($field) }, &self.$field));)+
            }

            fn push_muts<'s>(&'s mut self, group: &'static str, out: &mut Vec<(ParamName, &'s mut T)>) {
                $(out.push((ParamName { group, field: stringify!($field) }, &mut self.$field));)+
            }
        }
    };
}

param_group! {
    /// Standard GRU cell: update gate `z`, reset gate `r`, candidate `h`.
    GruParams { w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h }
}

param_group! {
    /// Answer-guided attention over one kind of regional feature.
    GuideAttentionParams {
        /// Scoring vector, `[N]`.
        score,
        /// `[N × feature_dim]`.
        feature_proj,
        feature_bias,
        /// `[N × H]`.
        answer_proj,
        answer_bias,
    }
}

param_group! {
    /// Factorized bilinear fusion of region features with the answer.
    MfbParams { feature_proj, feature_bias, answer_proj, answer_bias }
}

param_group! {
    /// Word embedding table `[N_w × d_e]` (row per token) plus bias.
    EmbeddingParams { table, bias }
}

param_group! {
    /// Per-step attention driven by fused features and the encoder state.
    DynamicAttentionParams { score, fused_proj, fused_bias, state_proj }
}

param_group! {
    OutputParams { proj, bias }
}

/// Every trainable tensor of the network, generic over the slot type so the
/// same layout holds tensors, tape handles, gradients, or shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub answer_gru: GruParams<T>,
    /// Absent in the ablated configuration.
    pub visual_attention: Option<GuideAttentionParams<T>>,
    /// Absent in the ablated configuration.
    pub semantic_attention: Option<GuideAttentionParams<T>>,
    pub mfb: MfbParams<T>,
    pub embedding: EmbeddingParams<T>,
    pub encoder_gru: GruParams<T>,
    pub decoder_gru: GruParams<T>,
    pub dynamic_attention: DynamicAttentionParams<T>,
    pub output: OutputParams<T>,
}

pub const GROUPS: [&str; 9] = [
    "answer_gru",
    "visual_attention",
    "semantic_attention",
    "mfb",
    "word_embedding",
    "encoder_gru",
    "decoder_gru",
    "dynamic_attention",
    "output",
];

impl<T> ModelParams<T> {
    pub fn try_map<'s, U, E>(&'s self, mut f: impl FnMut(ParamName, &'s T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        Ok(ModelParams {
            answer_gru: self.answer_gru.try_map("answer_gru", &mut f)?,
            visual_attention: match &self.visual_attention {
                Some(g) => Some(g.try_map("visual_attention", &mut f)?),
                None => None,
            },
            semantic_attention: match &self.semantic_attention {
                Some(g) => Some(g.try_map("semantic_attention", &mut f)?),
                None => None,
            },
            mfb: self.mfb.try_map("mfb", &mut f)?,
            embedding: self.embedding.try_map("word_embedding", &mut f)?,
            encoder_gru: self.encoder_gru.try_map("encoder_gru", &mut f)?,
            decoder_gru: self.decoder_gru.try_map("decoder_gru", &mut f)?,
            dynamic_attention: self.dynamic_attention.try_map("dynamic_attention", &mut f)?,
            output: self.output.try_map("output", &mut f)?,
        })
    }

    pub fn map<'s, U>(&'s self, mut f: impl FnMut(ParamName, &'s T) -> U) -> ModelParams<U> {
        self.try_map(|n, t| Ok::<_, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    /// All entries in canonical order.
    pub fn entries(&self) -> Vec<(ParamName, &T)> {
        let mut out = Vec::new();
        self.answer_gru.push_refs("answer_gru", &mut out);
        if let Some(g) = &self.visual_attention {
            g.push_refs("visual_attention", &mut out);
        }
        if let Some(g) = &self.semantic_attention {
            g.push_refs("semantic_attention", &mut out);
        }
        self.mfb.push_refs("mfb", &mut out);
        self.embedding.push_refs("word_embedding", &mut out);
        self.encoder_gru.push_refs("encoder_gru", &mut out);
        self.decoder_gru.push_refs("decoder_gru", &mut out);
        self.dynamic_attention.push_refs("dynamic_attention", &mut out);
        self.output.push_refs("output", &mut out);
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(ParamName, &mut T)> {
        let mut out = Vec::new();
        self.answer_gru.push_muts("answer_gru", &mut out);
        if let Some(g) = &mut self.visual_attention {
            g.push_muts("visual_attention", &mut out);
        }
        if let Some(g) = &mut self.semantic_attention {
            g.push_muts("semantic_attention", &mut out);
        }
        self.mfb.push_muts("mfb", &mut out);
        self.embedding.push_muts("word_embedding", &mut out);
        self.encoder_gru.push_muts("encoder_gru", &mut out);
        self.decoder_gru.push_muts("decoder_gru", &mut out);
        self.dynamic_attention.push_muts("dynamic_attention", &mut out);
        self.output.push_muts("output", &mut out);
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.entries().into_iter().map(|(n, _)| n.to_string()).collect()
    }
}

fn gru_shapes(input: usize, hidden: usize) -> GruParams<Vec<usize>> {
    let w = vec![hidden, input];
    let u = vec![hidden, hidden];
    let b = vec![hidden];
    GruParams {
        w_z: w.clone(),
        u_z: u.clone(),
        b_z: b.clone(),
        w_r: w.clone(),
        u_r: u.clone(),
        b_r: b.clone(),
        w_h: w,
        u_h: u,
        b_h: b,
    }
}

fn guide_shapes(att: usize, feature: usize, hidden: usize) -> GuideAttentionParams<Vec<usize>> {
    GuideAttentionParams {
        score: vec![att],
        feature_proj: vec![att, feature],
        feature_bias: vec![att],
        answer_proj: vec![att, hidden],
        answer_bias: vec![att],
    }
}

impl ModelParams<Vec<usize>> {
    /// Expected shape of every tensor under `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let (h, n) = (cfg.hidden, cfg.att_hidden);
        let guided = !cfg.ablate_semantic;
        ModelParams {
            answer_gru: gru_shapes(cfg.d_e, h),
            visual_attention: guided.then(|| guide_shapes(n, cfg.d_v, h)),
            semantic_attention: guided.then(|| guide_shapes(n, cfg.semantic_dim(), h)),
            mfb: MfbParams {
                feature_proj: vec![cfg.fused_expansion, cfg.enhanced_dim()],
                feature_bias: vec![cfg.fused_expansion],
                answer_proj: vec![cfg.fused_expansion, h],
                answer_bias: vec![cfg.fused_expansion],
            },
            embedding: EmbeddingParams {
                table: vec![cfg.vocab_size, cfg.d_e],
                bias: vec![cfg.d_e],
            },
            encoder_gru: gru_shapes(cfg.encoder_input_dim(), h),
            decoder_gru: gru_shapes(cfg.decoder_input_dim(), cfg.decoder_hidden),
            dynamic_attention: DynamicAttentionParams {
                score: vec![n],
                fused_proj: vec![n, cfg.fused_dim()],
                fused_bias: vec![n],
                state_proj: vec![n, h],
            },
            output: OutputParams {
                proj: vec![cfg.vocab_size, cfg.decoder_hidden],
                bias: vec![cfg.vocab_size],
            },
        }
    }
}

fn is_bias(name: ParamName) -> bool {
    matches!(name.field, "b_z" | "b_r" | "b_h" | "bias") || name.field.ends_with("_bias")
}

impl<F: Real> ModelParams<Tensor<F>> {
    /// Uniform(-scale, scale) weights, zero biases, and the embedding table
    /// copied from `table` when given.
    pub fn init(cfg: &ModelConfig, seed: u64, table: Option<&EmbeddingTable>, scale: f64) -> Result<Self> {
        cfg.validate()?;
        if let Some(t) = table {
            if t.vocab().len() != cfg.vocab_size || t.dim() != cfg.d_e {
                return Err(Error::Dimension(format!(
                    "embedding table is {}×{}, config wants {}×{}",
                    t.vocab().len(),
                    t.dim(),
                    cfg.vocab_size,
                    cfg.d_e
                )));
            }
        }
        let mut rng = rng::stream(seed, rng::STREAM_PARAMS);
        ModelParams::shapes(cfg).try_map(|name, shape| {
            let len: usize = shape.iter().product();
            let values: Vec<F> = if is_bias(name) {
                vec![F::zero(); len]
            } else if let (Some(t), "word_embedding", "table") = (table, name.group, name.field) {
                (0..cfg.vocab_size)
                    .flat_map(|id| t.row(id).iter().map(|&x| F::lit(x)))
                    .collect()
            } else {
                (0..len).map(|_| F::lit(rng.gen_range(-scale..scale))).collect()
            };
            Ok(Tensor::new(shape.clone(), values)?.trainable())
        })
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries_mut() {
            t.zero_grad();
        }
    }

    pub fn count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }
}
