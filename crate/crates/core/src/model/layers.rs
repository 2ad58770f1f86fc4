//! The network's building blocks, each recorded on a tape.

use super::params::{DynamicAttentionParams, EmbeddingParams, GruParams, GuideAttentionParams, MfbParams, OutputParams};
use crate::tensor::{Real, Tape, TensorError, Var};

type OpResult = Result<Var, TensorError>;

/// Attention weights over regions and the weighted sum they produce.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub weights: Var,
    pub context: Var,
}

/// Answer-guided attention outputs and their concatenation `att_0`.
#[derive(Debug, Clone, Copy)]
pub struct GuidedContext {
    pub visual: Attended,
    pub semantic: Attended,
    pub att0: Var,
}

fn affine<F: Real>(t: &mut Tape<'_, F>, w: Var, x: Var, u: Var, h: Var, b: Var) -> OpResult {
    let wx = t.matvec(w, x)?;
    let uh = t.matvec(u, h)?;
    let s = t.add(wx, uh)?;
    t.add(s, b)
}

/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell<F: Real>(t: &mut Tape<'_, F>, p: &GruParams<Var>, x: Var, h: Var) -> OpResult {
    let z = affine(t, p.w_z, x, p.u_z, h, p.b_z)?;
    let z = t.sigmoid(z)?;
    let r = affine(t, p.w_r, x, p.u_r, h, p.b_r)?;
    let r = t.sigmoid(r)?;
    let rh = t.mul(r, h)?;
    let cand = affine(t, p.w_h, x, p.u_h, rh, p.b_h)?;
    let cand = t.tanh(cand)?;
    let delta = t.sub(cand, h)?;
    let step = t.mul(z, delta)?;
    t.add(h, step)
}

/// Runs the answer GRU from a zero state over the non-pad prefix of
/// `answer_ids`. An all-pad answer encodes to zero.
pub fn encode_answer<F: Real>(
    t: &mut Tape<'_, F>,
    gru: &GruParams<Var>,
    embedding: &EmbeddingParams<Var>,
    answer_ids: &[usize],
    hidden: usize,
) -> OpResult {
    let mut h = t.zeros(hidden);
    for &id in answer_ids.iter().take_while(|&&id| id != crate::text::PAD) {
        let x = t.select_row(embedding.table, id)?;
        h = gru_cell(t, gru, x, h)?;
    }
    Ok(h)
}

/// `α_i = wᵀ(tanh(U_f f_i + b_f) ⊙ tanh(U_a a + b_a))`, `β = softmax(α)`,
/// `ĉ = Σ β_i f_i`. `features` is `[k×d]` and `features_t` its transpose.
pub fn guide_attention<F: Real>(
    t: &mut Tape<'_, F>,
    p: &GuideAttentionParams<Var>,
    features: Var,
    features_t: Var,
    answer: Var,
) -> Result<Attended, TensorError> {
    let proj_t = t.transpose(p.feature_proj)?;
    let regions = t.matmul(features, proj_t)?;
    let regions = t.add_row(regions, p.feature_bias)?;
    let regions = t.tanh(regions)?;
    let cue = t.matvec(p.answer_proj, answer)?;
    let cue = t.add(cue, p.answer_bias)?;
    let cue = t.tanh(cue)?;
    let joint = t.mul_row(regions, cue)?;
    let logits = t.matvec(joint, p.score)?;
    let weights = t.softmax(logits)?;
    let context = t.matvec(features_t, weights)?;
    Ok(Attended { weights, context })
}

/// Answer-guided attention over the raw visual vectors.
pub fn visual_attention<F: Real>(
    t: &mut Tape<'_, F>,
    p: &GuideAttentionParams<Var>,
    visual: Var,
    answer: Var,
) -> Result<Attended, TensorError> {
    let vt = t.transpose(visual)?;
    guide_attention(t, p, visual, vt, answer)
}

/// Answer-guided attention over the label-embedding vectors.
pub fn semantic_attention<F: Real>(
    t: &mut Tape<'_, F>,
    p: &GuideAttentionParams<Var>,
    semantic: Var,
    answer: Var,
) -> Result<Attended, TensorError> {
    let st = t.transpose(semantic)?;
    guide_attention(t, p, semantic, st, answer)
}

pub fn guiding_context<F: Real>(
    t: &mut Tape<'_, F>,
    visual_p: &GuideAttentionParams<Var>,
    semantic_p: &GuideAttentionParams<Var>,
    visual: Var,
    semantic: Var,
    answer: Var,
) -> Result<GuidedContext, TensorError> {
    let v = visual_attention(t, visual_p, visual, answer)?;
    let s = semantic_attention(t, semantic_p, semantic, answer)?;
    let att0 = t.concat(&[v.context, s.context])?;
    Ok(GuidedContext {
        visual: v,
        semantic: s,
        att0,
    })
}

/// Per region: `(U_1 e_i + b_1) ⊙ (U_2 a + b_2)`, sum-pooled with `window`,
/// then signed square root and L2 normalization. Returns `[k × N_f/window]`.
pub fn mfb_fuse<F: Real>(t: &mut Tape<'_, F>, p: &MfbParams<Var>, enhanced: Var, answer: Var, window: usize) -> OpResult {
    let proj_t = t.transpose(p.feature_proj)?;
    let expanded = t.matmul(enhanced, proj_t)?;
    let expanded = t.add_row(expanded, p.feature_bias)?;
    let cue = t.matvec(p.answer_proj, answer)?;
    let cue = t.add(cue, p.answer_bias)?;
    let joint = t.mul_row(expanded, cue)?;
    let pooled = t.sum_pool(joint, window)?;
    let rooted = t.signed_sqrt(pooled)?;
    t.l2_normalize(rooted)
}

/// Table row of `token` plus the embedding bias.
pub fn embed_word<F: Real>(t: &mut Tape<'_, F>, p: &EmbeddingParams<Var>, token: usize) -> OpResult {
    let row = t.select_row(p.table, token)?;
    t.add(row, p.bias)
}

/// `h¹_t = GRU₁([M_t; h²_{t-1}; att_0], h¹_{t-1} + a)`. The guiding context
/// is omitted in the ablated configuration.
pub fn encoder_step<F: Real>(
    t: &mut Tape<'_, F>,
    p: &GruParams<Var>,
    word: Var,
    h2_prev: Var,
    att0: Option<Var>,
    h1_prev: Var,
    answer: Var,
) -> OpResult {
    let input = match att0 {
        Some(att0) => t.concat(&[word, h2_prev, att0])?,
        None => t.concat(&[word, h2_prev])?,
    };
    let prev = t.add(h1_prev, answer)?;
    gru_cell(t, p, input, prev)
}

/// Projects the fused features once per instance: `[k × N]` rows `W_z z_i`.
pub fn project_fused<F: Real>(t: &mut Tape<'_, F>, p: &DynamicAttentionParams<Var>, fused: Var) -> OpResult {
    let proj_t = t.transpose(p.fused_proj)?;
    t.matmul(fused, proj_t)
}

/// Dynamic attention given pre-projected fused features and the transposed
/// visual matrix: `α_i = wᵀ tanh(W_z z_i + b_z + W_h h¹_t)`, `ĉ_t = Σ β_i v_i`.
pub fn dynamic_attention_projected<F: Real>(
    t: &mut Tape<'_, F>,
    p: &DynamicAttentionParams<Var>,
    fused_proj: Var,
    visual_t: Var,
    h1: Var,
) -> Result<Attended, TensorError> {
    let state = t.matvec(p.state_proj, h1)?;
    let shift = t.add(state, p.fused_bias)?;
    let hidden = t.add_row(fused_proj, shift)?;
    let hidden = t.tanh(hidden)?;
    let logits = t.matvec(hidden, p.score)?;
    let weights = t.softmax(logits)?;
    let context = t.matvec(visual_t, weights)?;
    Ok(Attended { weights, context })
}

/// Dynamic attention from the fused `[k×N_z]` and visual `[k×d_v]` matrices.
pub fn dynamic_attention<F: Real>(
    t: &mut Tape<'_, F>,
    p: &DynamicAttentionParams<Var>,
    fused: Var,
    visual: Var,
    h1: Var,
) -> Result<Attended, TensorError> {
    let fp = project_fused(t, p, fused)?;
    let vt = t.transpose(visual)?;
    dynamic_attention_projected(t, p, fp, vt, h1)
}

/// `h²_t = GRU₂([ĉ_t; h¹_t], h²_{t-1})`.
pub fn decoder_step<F: Real>(t: &mut Tape<'_, F>, p: &GruParams<Var>, context: Var, h1: Var, h2_prev: Var) -> OpResult {
    let input = t.concat(&[context, h1])?;
    gru_cell(t, p, input, h2_prev)
}

/// `softmax(W_dec h² + b_dec)`.
pub fn output_distribution<F: Real>(t: &mut Tape<'_, F>, p: &OutputParams<Var>, h2: Var) -> OpResult {
    let logits = t.matvec(p.proj, h2)?;
    let logits = t.add(logits, p.bias)?;
    t.softmax(logits)
}
