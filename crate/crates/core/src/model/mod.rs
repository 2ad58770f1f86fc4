//! The question generator: answer encoder, answer-guided attention over
//! visual and semantic region features, bilinear fusion, and a two-layer
//! recurrent decoder with per-step attention.

mod config;
pub mod layers;
mod params;

pub use config::ModelConfig;
pub use layers::{Attended, GuidedContext};
pub use params::{
    DynamicAttentionParams, EmbeddingParams, GruParams, GuideAttentionParams, MfbParams, ModelParams, OutputParams, ParamName,
    GROUPS, INIT_SCALE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ImageInputs;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::text::{EmbeddingTable, START};

/// Per-instance values computed once before decoding.
#[derive(Debug, Clone, Copy)]
pub struct InstanceContext {
    pub answer: Var,
    pub guide: Option<GuidedContext>,
    /// `[k × N_z]` normalized fused features.
    pub fused: Var,
    fused_proj: Var,
    visual_t: Var,
}

/// Encoder and decoder hidden states.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub h1: Var,
    pub h2: Var,
    pub t: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub state: DecoderState,
    /// Next-word distribution over the vocabulary.
    pub probs: Var,
    /// Region weights of the dynamic attention at this step.
    pub weights: Var,
}

/// One row of an attention trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStep {
    pub token: usize,
    pub weights: Vec<f64>,
}

impl AttentionStep {
    /// Indices of the largest and second-largest weight (ties to the lower
    /// index). With one region both are 0.
    pub fn top2(&self) -> (usize, usize) {
        let mut order: Vec<usize> = (0..self.weights.len()).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        (order[0], *order.get(1).unwrap_or(&order[0]))
    }
}

/// Concrete values of a teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<F> {
    pub distributions: Vec<Vec<F>>,
    pub trace: Vec<AttentionStep>,
    pub visual_weights: Option<Vec<F>>,
    pub semantic_weights: Option<Vec<F>>,
    pub fused: Tensor<F>,
}

/// Tape handles of a teacher-forced pass.
#[derive(Debug, Clone)]
pub struct TeacherForced {
    pub params: ModelParams<Var>,
    pub context: InstanceContext,
    pub steps: Vec<StepOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<F>>,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, params: ModelParams<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let want = ModelParams::shapes(&config);
        let want_entries = want.entries();
        let got = params.entries();
        if want_entries.len() != got.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                want_entries.len(),
                got.len()
            )));
        }
        for ((name, shape), (gname, t)) in want_entries.into_iter().zip(got) {
            if name != gname || t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "{gname} has shape {:?}, expected {name} {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64, table: Option<&EmbeddingTable>, scale: f64) -> Result<Self> {
        let params = ModelParams::init(&config, seed, table, scale)?;
        Ok(Self { config, params })
    }

    /// Converts all parameters to another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.map(|_, t| t.cast()),
        }
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, F>) -> ModelParams<Var> {
        self.params.map(|_, t| tape.leaf(t))
    }

    fn check_token(&self, id: usize) -> Result<()> {
        if id >= self.config.vocab_size {
            return Err(Error::InvalidToken {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn check_inputs(&self, inputs: &ImageInputs<F>) -> Result<()> {
        let c = &self.config;
        if inputs.regions() != c.k || inputs.visual_dim() != c.d_v || inputs.semantic_dim() != c.semantic_dim() {
            return Err(Error::Dimension(format!(
                "features have k={}, d_v={}, semantic={} but the model expects k={}, d_v={}, semantic={}",
                inputs.regions(),
                inputs.visual_dim(),
                inputs.semantic_dim(),
                c.k,
                c.d_v,
                c.semantic_dim()
            )));
        }
        Ok(())
    }

    /// Answer encoding, guiding context, and fused features for one instance.
    pub fn prepare<'a>(
        &self,
        tape: &mut Tape<'a, F>,
        pv: &ModelParams<Var>,
        inputs: &'a ImageInputs<F>,
        answer_ids: &[usize],
    ) -> Result<InstanceContext> {
        self.check_inputs(inputs)?;
        for &id in answer_ids {
            self.check_token(id)?;
        }
        let c = &self.config;
        let answer = layers::encode_answer(tape, &pv.answer_gru, &pv.embedding, answer_ids, c.hidden)?;
        let visual = tape.leaf(&inputs.visual);
        let guide = match (&pv.visual_attention, &pv.semantic_attention) {
            (Some(vp), Some(sp)) if !c.ablate_semantic => {
                let semantic = tape.leaf(&inputs.semantic);
                Some(layers::guiding_context(tape, vp, sp, visual, semantic, answer)?)
            }
            _ => None,
        };
        let enhanced = if c.ablate_semantic {
            visual
        } else {
            tape.leaf(&inputs.enhanced)
        };
        let fused = layers::mfb_fuse(tape, &pv.mfb, enhanced, answer, c.pool_window)?;
        let fused_proj = layers::project_fused(tape, &pv.dynamic_attention, fused)?;
        let visual_t = tape.transpose(visual)?;
        Ok(InstanceContext {
            answer,
            guide,
            fused,
            fused_proj,
            visual_t,
        })
    }

    /// Both hidden states start at zero.
    pub fn initial_state(&self, tape: &mut Tape<'_, F>) -> DecoderState {
        DecoderState {
            h1: tape.zeros(self.config.hidden),
            h2: tape.zeros(self.config.decoder_hidden),
            t: 0,
        }
    }

    /// Consumes the previous word and produces the next-word distribution.
    pub fn step(
        &self,
        tape: &mut Tape<'_, F>,
        pv: &ModelParams<Var>,
        ctx: &InstanceContext,
        state: &DecoderState,
        prev_token: usize,
    ) -> Result<StepOutput> {
        self.check_token(prev_token)?;
        let word = layers::embed_word(tape, &pv.embedding, prev_token)?;
        let att0 = ctx.guide.map(|g| g.att0);
        let h1 = layers::encoder_step(tape, &pv.encoder_gru, word, state.h2, att0, state.h1, ctx.answer)?;
        let dynamic = layers::dynamic_attention_projected(tape, &pv.dynamic_attention, ctx.fused_proj, ctx.visual_t, h1)?;
        let h2 = layers::decoder_step(tape, &pv.decoder_gru, dynamic.context, h1, state.h2)?;
        let probs = layers::output_distribution(tape, &pv.output, h2)?;
        Ok(StepOutput {
            state: DecoderState { h1, h2, t: state.t + 1 },
            probs,
            weights: dynamic.weights,
        })
    }

    /// Feeds `<start>` followed by the gold prefix and records one
    /// distribution per gold token.
    pub fn teacher_forced<'a>(
        &'a self,
        tape: &mut Tape<'a, F>,
        inputs: &'a ImageInputs<F>,
        answer_ids: &[usize],
        gold: &[usize],
    ) -> Result<TeacherForced> {
        for &id in gold {
            self.check_token(id)?;
        }
        let pv = self.bind(tape);
        let context = self.prepare(tape, &pv, inputs, answer_ids)?;
        let mut state = self.initial_state(tape);
        let mut steps = Vec::with_capacity(gold.len());
        let mut prev = START;
        for &tok in gold {
            let out = self.step(tape, &pv, &context, &state, prev)?;
            state = out.state;
            steps.push(out);
            prev = tok;
        }
        Ok(TeacherForced {
            params: pv,
            context,
            steps,
        })
    }

    /// Teacher-forced pass returning plain values.
    pub fn forward_teacher_forced(
        &self,
        inputs: &ImageInputs<F>,
        answer_ids: &[usize],
        gold: &[usize],
    ) -> Result<ForwardOutput<F>> {
        let mut tape = Tape::new();
        let tf = self.teacher_forced(&mut tape, inputs, answer_ids, gold)?;
        let values = |v: Var| tape.value(v).to_vec();
        Ok(ForwardOutput {
            distributions: tf.steps.iter().map(|s| values(s.probs)).collect(),
            trace: tf
                .steps
                .iter()
                .zip(gold)
                .map(|(s, &token)| AttentionStep {
                    token,
                    weights: tape.value(s.weights).iter().map(|w| w.as_f64()).collect(),
                })
                .collect(),
            visual_weights: tf.context.guide.map(|g| values(g.visual.weights)),
            semantic_weights: tf.context.guide.map(|g| values(g.semantic.weights)),
            fused: tape.to_tensor(tf.context.fused),
        })
    }
}


#[cfg(test)]
mod tests {
    use super::tests_support::random_inputs;
    use super::*;

    #[test]
    fn single_token_question_emits_one_distribution() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f64>::init(cfg.clone(), 1, None, 0.3).unwrap();
        let inputs = random_inputs(&cfg, 2);
        let out = model.forward_teacher_forced(&inputs, &[5, 6, 0], &[7]).unwrap();
        assert_eq!(out.distributions.len(), 1);
        assert_eq!(out.trace.len(), 1);
        assert!((out.trace[0].weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(out.fused.shape(), &[cfg.k, cfg.fused_dim()]);
    }

    #[test]
    fn invalid_tokens_and_dims_are_errors() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f64>::init(cfg.clone(), 1, None, 0.3).unwrap();
        let inputs = random_inputs(&cfg, 2);
        assert!(matches!(
            model.forward_teacher_forced(&inputs, &[5, 0, 0], &[99]),
            Err(Error::InvalidToken { id: 99, .. })
        ));
        let other = random_inputs(&ModelConfig { k: 4, ..cfg }, 3);
        assert!(matches!(
            model.forward_teacher_forced(&other, &[5], &[7]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn all_pad_answer_encodes_to_zero() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f64>::init(cfg.clone(), 1, None, 0.3).unwrap();
        let mut tape = Tape::new();
        let pv = model.bind(&mut tape);
        let a = layers::encode_answer(&mut tape, &pv.answer_gru, &pv.embedding, &[0, 0, 0], cfg.hidden).unwrap();
        assert!(tape.value(a).iter().all(|&x| x == 0.0));
        assert_eq!(tape.value(a).len(), cfg.hidden);
    }

    #[test]
    fn new_rejects_wrong_shapes() {
        let cfg = ModelConfig::tiny();
        let model = Model::<f64>::init(cfg.clone(), 1, None, 0.3).unwrap();
        let wider = ModelConfig { vocab_size: 21, ..cfg };
        assert!(Model::new(wider, model.params.clone()).is_err());
    }

    #[test]
    fn top2_orders_weights() {
        let s = AttentionStep {
            token: 3,
            weights: vec![0.2, 0.5, 0.1, 0.2],
        };
        assert_eq!(s.top2(), (1, 0));
    }
}
