//! Greedy and beam-search question generation.
//!
//! Scores are unnormalized sums of `ln max(p, 1e-12)` under the model's own
//! distribution. Masked tokens are only excluded from selection; they keep
//! their probability mass, so a generated sequence scores exactly what
//! [`score_sequence`] reports for it.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ImageInputs;
use crate::model::{AttentionStep, DecoderState, InstanceContext, Model, ModelParams};
use crate::tensor::{Real, Tape, Var};
use crate::text::{Vocabulary, PAD, START, UNK};
use crate::training::PROB_FLOOR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_len: usize,
    /// Generation ends after emitting this token.
    pub stop_token: Option<usize>,
    /// Also exclude `<unk>` from selection (`<pad>` and `<start>` always are).
    pub mask_unk: bool,
}

impl DecodeOptions {
    /// Stops at the vocabulary's `?`, masks `<unk>`.
    pub fn for_vocab(vocab: &Vocabulary, max_len: usize) -> Self {
        Self {
            max_len,
            stop_token: vocab.question_mark(),
            mask_unk: true,
        }
    }

    pub fn selectable(&self, id: usize) -> bool {
        id != PAD && id != START && !(self.mask_unk && id == UNK)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub trace: Vec<AttentionStep>,
}

fn log_prob(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// One instance's prepared context on a tape, stepped on demand.
struct Session<'a, F: Real> {
    model: &'a Model<F>,
    tape: Tape<'a, F>,
    params: ModelParams<Var>,
    ctx: InstanceContext,
}

impl<'a, F: Real> Session<'a, F> {
    fn new(model: &'a Model<F>, inputs: &'a ImageInputs<F>, answer_ids: &[usize]) -> Result<Self> {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let ctx = model.prepare(&mut tape, &params, inputs, answer_ids)?;
        Ok(Self {
            model,
            tape,
            params,
            ctx,
        })
    }

    fn initial(&mut self) -> DecoderState {
        self.model.initial_state(&mut self.tape)
    }

    /// Next state, next-word probabilities, and attention weights.
    fn step(&mut self, state: &DecoderState, prev: usize) -> Result<(DecoderState, &[F], Vec<f64>)> {
        let out = self.model.step(&mut self.tape, &self.params, &self.ctx, state, prev)?;
        let weights = self.tape.value(out.weights).iter().map(|w| w.as_f64()).collect();
        Ok((out.state, self.tape.value(out.probs), weights))
    }
}

fn check_options<F: Real>(model: &Model<F>, opts: &DecodeOptions) -> Result<()> {
    if opts.max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let vocab = model.config.vocab_size;
    if let Some(stop) = opts.stop_token.filter(|&s| s >= vocab) {
        return Err(Error::InvalidToken { id: stop, size: vocab });
    }
    if !(0..vocab).any(|id| opts.selectable(id)) {
        return Err(Error::Config("every token is masked".into()));
    }
    Ok(())
}

/// Picks the most probable selectable token at every step, lowest id on
/// ties, until the stop token or `max_len`.
pub fn greedy_decode<F: Real>(
    model: &Model<F>,
    inputs: &ImageInputs<F>,
    answer_ids: &[usize],
    opts: &DecodeOptions,
) -> Result<GenerationResult> {
    check_options(model, opts)?;
    let mut session = Session::new(model, inputs, answer_ids)?;
    let mut state = session.initial();
    let mut result = GenerationResult {
        tokens: Vec::new(),
        logprob: 0.0,
        trace: Vec::new(),
    };
    let mut prev = START;
    while result.tokens.len() < opts.max_len {
        let (next, probs, weights) = session.step(&state, prev)?;
        let mut best: Option<(usize, F)> = None;
        for (id, &p) in probs.iter().enumerate() {
            if opts.selectable(id) && best.is_none_or(|(_, bp)| p > bp) {
                best = Some((id, p));
            }
        }
        let (token, p) = best.expect("checked that a token is selectable");
        result.logprob += log_prob(p.as_f64());
        result.tokens.push(token);
        result.trace.push(AttentionStep { token, weights });
        state = next;
        prev = token;
        if Some(token) == opts.stop_token {
            break;
        }
    }
    Ok(result)
}

struct Hypothesis {
    result: GenerationResult,
    state: DecoderState,
    finished: bool,
}

/// A ranked extension: `token` is `None` for a finished hypothesis carried
/// over unchanged.
struct Candidate {
    score: f64,
    parent: usize,
    token: Option<usize>,
    p: f64,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.parent.cmp(&b.parent))
        .then(a.token.cmp(&b.token))
}

/// Beam search of width `beam`, returning up to `top_n` hypotheses by
/// descending log-probability. Finished hypotheses stay in the beam and
/// compete with live extensions. Ties break on parent position, then token id.
pub fn beam_decode<F: Real>(
    model: &Model<F>,
    inputs: &ImageInputs<F>,
    answer_ids: &[usize],
    opts: &DecodeOptions,
    beam: usize,
    top_n: usize,
) -> Result<Vec<GenerationResult>> {
    check_options(model, opts)?;
    if beam == 0 {
        return Err(Error::Config("beam size must be positive".into()));
    }
    let mut session = Session::new(model, inputs, answer_ids)?;
    let mut hyps = vec![Hypothesis {
        result: GenerationResult {
            tokens: Vec::new(),
            logprob: 0.0,
            trace: Vec::new(),
        },
        state: session.initial(),
        finished: false,
    }];
    while hyps.iter().any(|h| !h.finished) {
        let mut candidates = Vec::new();
        let mut stepped = Vec::with_capacity(hyps.len());
        for (i, h) in hyps.iter().enumerate() {
            if h.finished {
                candidates.push(Candidate {
                    score: h.result.logprob,
                    parent: i,
                    token: None,
                    p: 1.0,
                });
                stepped.push(None);
                continue;
            }
            let prev = h.result.tokens.last().copied().unwrap_or(START);
            let (next, probs, weights) = session.step(&h.state, prev)?;
            for (id, &p) in probs.iter().enumerate() {
                if opts.selectable(id) {
                    let p = p.as_f64();
                    candidates.push(Candidate {
                        score: h.result.logprob + log_prob(p),
                        parent: i,
                        token: Some(id),
                        p,
                    });
                }
            }
            stepped.push(Some((next, weights)));
        }
        candidates.sort_by(rank);
        candidates.truncate(beam);
        hyps = candidates
            .into_iter()
            .map(|c| {
                let parent = &hyps[c.parent];
                let Some(token) = c.token else {
                    return Hypothesis {
                        result: parent.result.clone(),
                        state: parent.state,
                        finished: true,
                    };
                };
                let (state, weights) = stepped[c.parent].clone().expect("live parent was stepped");
                let mut result = parent.result.clone();
                result.logprob += log_prob(c.p);
                result.tokens.push(token);
                result.trace.push(AttentionStep { token, weights });
                let finished = Some(token) == opts.stop_token || result.tokens.len() >= opts.max_len;
                Hypothesis { result, state, finished }
            })
            .collect();
    }
    // The beam is already ordered by score; re-sort for the carried-over
    // entries, whose positions reflect an earlier round.
    let mut out: Vec<GenerationResult> = hyps.into_iter().map(|h| h.result).collect();
    out.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    out.truncate(top_n);
    Ok(out)
}

/// `Σ_t ln max(p_t[q_t], 1e-12)` under teacher forcing. An empty sequence
/// scores 0.
pub fn score_sequence<F: Real>(model: &Model<F>, inputs: &ImageInputs<F>, answer_ids: &[usize], tokens: &[usize]) -> Result<f64> {
    if tokens.len() > model.config.max_question_len {
        return Err(Error::Dimension(format!(
            "{} tokens exceed max_question_len {}",
            tokens.len(),
            model.config.max_question_len
        )));
    }
    if tokens.is_empty() {
        model.check_inputs(inputs)?;
        return Ok(0.0);
    }
    let out = model.forward_teacher_forced(inputs, answer_ids, tokens)?;
    Ok(out
        .distributions
        .iter()
        .zip(tokens)
        .map(|(p, &t)| log_prob(p[t].as_f64()))
        .sum())
}

/// One line of a generation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub image_id: String,
    pub answer: String,
    pub question: String,
    pub logprob: f64,
}

/// One line of an attention-trace file. `t` counts generated words from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image_id: String,
    pub t: usize,
    pub token: String,
    pub beta: Vec<f64>,
    pub top1: usize,
    pub top2: usize,
}

impl TraceRecord {
    pub fn from_trace(image_id: &str, trace: &[AttentionStep], vocab: &Vocabulary) -> Vec<Self> {
        trace
            .iter()
            .enumerate()
            .map(|(i, step)| {
                let (top1, top2) = step.top2();
                TraceRecord {
                    image_id: image_id.to_string(),
                    t: i + 1,
                    token: vocab.decode(&[step.token]).join(" "),
                    beta: step.weights.clone(),
                    top1,
                    top2,
                }
            })
            .collect()
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
