//! Inference: joint CTC/attention beam search for ASR, autoregressive mel
//! generation for TTS and VC, and speaker similarity.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::math;
use crate::model::{EncoderOutput, Model, Source, TaskId};
use crate::tensor::Tensor;
use crate::textproc::{BLANK_ID, BOS_ID, EOS_ID, N_SPECIALS};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// CTC prefix probabilities of one hypothesis: for every frame `t`, the log
/// probability that frames `0..=t` collapse to the prefix and end in a
/// non-blank (`nonblank`) or blank (`blank`) symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefix {
    nonblank: Vec<f64>,
    blank: Vec<f64>,
    last: Option<usize>,
    /// Log probability of all alignments whose collapse starts with the prefix.
    pub score: f64,
}

impl CtcPrefix {
    pub fn empty(log_probs: &Tensor) -> Self {
        let mut blank = Vec::with_capacity(log_probs.rows());
        let mut acc = 0.0;
        for t in 0..log_probs.rows() {
            acc += log_probs.get(t, BLANK_ID);
            blank.push(acc);
        }
        Self { nonblank: vec![NEG_INF; log_probs.rows()], blank, last: None, score: 0.0 }
    }

    /// Log probability that the whole input collapses to exactly the prefix.
    pub fn end_score(&self) -> f64 {
        match (self.nonblank.last(), self.blank.last()) {
            (Some(&n), Some(&b)) => math::log_add(n, b),
            _ if self.last.is_none() => 0.0,
            _ => NEG_INF,
        }
    }

    pub fn extend(&self, log_probs: &Tensor, c: usize) -> Self {
        let t_len = log_probs.rows();
        let mut nonblank = vec![NEG_INF; t_len];
        let mut blank = vec![NEG_INF; t_len];
        if t_len == 0 {
            return Self { nonblank, blank, last: Some(c), score: NEG_INF };
        }
        if self.last.is_none() {
            nonblank[0] = log_probs.get(0, c);
        }
        let mut score = nonblank[0];
        for t in 1..t_len {
            let prev = if self.last == Some(c) { self.blank[t - 1] } else { math::log_add(self.blank[t - 1], self.nonblank[t - 1]) };
            let emit = log_probs.get(t, c);
            nonblank[t] = math::log_add(nonblank[t - 1], prev) + emit;
            blank[t] = math::log_add(blank[t - 1], nonblank[t - 1]) + log_probs.get(t, BLANK_ID);
            score = math::log_add(score, prev + emit);
        }
        Self { nonblank, blank, last: Some(c), score }
    }
}

/// Log probability of every alignment whose collapse begins with `prefix`.
pub fn ctc_prefix_score(log_probs: &Tensor, prefix: &[usize]) -> f64 {
    let mut state = CtcPrefix::empty(log_probs);
    for &c in prefix {
        state = state.extend(log_probs, c);
    }
    state.score
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Weight λ of the CTC prefix score.
    pub ctc_weight: f64,
    pub max_len: usize,
    /// Rank finished hypotheses by `combined / tokens` instead of `combined`.
    pub length_norm: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { beam: 10, ctc_weight: 0.5, max_len: 200, length_norm: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Output characters; `eos` not included.
    pub tokens: Vec<usize>,
    pub att_logprob: f64,
    pub ctc_logprob: f64,
    /// `(1 − λ)·att_logprob + λ·ctc_logprob`
    pub combined: f64,
    /// Ranking key: `combined`, divided by the token count (with `eos`)
    /// under length normalization.
    pub score: f64,
}

struct Live {
    tokens: Vec<usize>,
    att: f64,
    prefix: Option<CtcPrefix>,
}

/// Attention-decoder log-probabilities of the next token for each prefix.
fn next_token_logprobs(model: &Model, states: &Tensor, ctc_in: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.params);
    let enc = model.memory(&mut g, states, ctc_in);
    let mut ids = vec![BOS_ID];
    ids.extend_from_slice(prefix);
    let logits = model.text_logits(&mut g, &enc, &ids, TaskId::Asr)?;
    let last = g.value(logits).row(ids.len() - 1).to_vec();
    let lse = math::log_sum_exp(&last);
    Ok(last.iter().map(|v| v - lse).collect())
}

/// Encodes `wave` for ASR and returns the fused states, CTC-head input and
/// CTC log-probabilities.
pub fn encode_for_asr(model: &Model, wave: &[f64]) -> Result<(Tensor, Tensor, Tensor)> {
    let mut g = Graph::new(&model.params);
    let enc: EncoderOutput = model.encode(&mut g, Source::Wave(wave), TaskId::Asr)?;
    let lp = model.ctc_log_probs(&mut g, &enc)?;
    Ok((g.value(enc.states).clone(), g.value(enc.ctc_input).clone(), g.value(lp).clone()))
}

/// One-pass beam search with CTC prefix scores fused into the attention
/// scores. Returns the best token sequence and all finished hypotheses,
/// best first.
pub fn asr_decode(model: &Model, wave: &[f64], opts: &DecodeOptions) -> Result<(Vec<usize>, Vec<BeamHypothesis>)> {
    if wave.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let (states, ctc_in, ctc_lp) = encode_for_asr(model, wave)?;
    beam_search(model, &states, &ctc_in, &ctc_lp, opts)
}

/// Beam search over precomputed encoder outputs.
pub fn beam_search(model: &Model, states: &Tensor, ctc_in: &Tensor, ctc_lp: &Tensor, opts: &DecodeOptions) -> Result<(Vec<usize>, Vec<BeamHypothesis>)> {
    let lambda = opts.ctc_weight;
    if !(0.0..=1.0).contains(&lambda) || opts.beam == 0 {
        return Err(crate::error::Error::Config("beam must be positive and ctc_weight in [0, 1]".into()));
    }
    let vocab = model.config().vocab_size;
    let use_ctc = lambda > 0.0;
    let mut live = vec![Live { tokens: Vec::new(), att: 0.0, prefix: use_ctc.then(|| CtcPrefix::empty(ctc_lp)) }];
    let mut done: Vec<BeamHypothesis> = Vec::new();
    let combine = |att: f64, ctc: f64| if use_ctc { (1.0 - lambda) * att + lambda * ctc } else { att };

    for step in 0..=opts.max_len {
        struct Cand {
            parent: usize,
            token: usize,
            att: f64,
            ctc: f64,
            prefix: Option<CtcPrefix>,
            combined: f64,
        }
        let mut cands: Vec<Cand> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let att_lp = next_token_logprobs(model, states, ctc_in, &hyp.tokens)?;
            let tokens: Vec<usize> = if step == opts.max_len { vec![EOS_ID] } else { core::iter::once(EOS_ID).chain(N_SPECIALS..vocab).collect() };
            for c in tokens {
                let att = hyp.att + att_lp[c];
                let (ctc, prefix) = match &hyp.prefix {
                    Some(p) if c == EOS_ID => (p.end_score(), None),
                    Some(p) => {
                        let next = p.extend(ctc_lp, c);
                        (next.score, Some(next))
                    }
                    None => (0.0, None),
                };
                let combined = combine(att, ctc);
                if combined > NEG_INF {
                    cands.push(Cand { parent: h, token: c, att, ctc, prefix, combined });
                }
            }
        }
        cands.sort_by(|a, b| b.combined.total_cmp(&a.combined).then(a.parent.cmp(&b.parent)).then(a.token.cmp(&b.token)));
        cands.truncate(opts.beam);
        let mut next = Vec::new();
        for c in cands {
            let mut tokens = live[c.parent].tokens.clone();
            if c.token == EOS_ID {
                let n = tokens.len() + 1;
                let score = if opts.length_norm { c.combined / n as f64 } else { c.combined };
                done.push(BeamHypothesis { tokens, att_logprob: c.att, ctc_logprob: if use_ctc { c.ctc } else { 0.0 }, combined: c.combined, score });
            } else {
                tokens.push(c.token);
                next.push(Live { tokens, att: c.att, prefix: c.prefix });
            }
        }
        live = next;
        if live.is_empty() || done.len() >= opts.beam {
            break;
        }
    }
    done.sort_by(|a, b| b.score.total_cmp(&a.score));
    let best = done.first().map(|h| h.tokens.clone()).unwrap_or_default();
    Ok((best, done))
}

/// Greedy attention decoding: the arg-max token at every step.
pub fn greedy_decode(model: &Model, wave: &[f64], max_len: usize) -> Result<Vec<usize>> {
    let (states, ctc_in, _) = encode_for_asr(model, wave)?;
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let lp = next_token_logprobs(model, &states, &ctc_in, &tokens)?;
        let best = (0..lp.len()).filter(|&c| c == EOS_ID || c >= N_SPECIALS).max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a))).unwrap_or(EOS_ID);
        if best == EOS_ID {
            break;
        }
        tokens.push(best);
    }
    Ok(tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisOptions {
    pub stop_threshold: f64,
    /// Decoder steps before giving up; derived from the input when absent.
    pub max_steps: Option<usize>,
    /// Sample pre-net dropout masks during generation.
    pub prenet_dropout: bool,
    pub seed: u64,
    pub keep_attention: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self { stop_threshold: 0.5, max_steps: None, prenet_dropout: false, seed: 0, keep_attention: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisResult {
    /// `[steps_used·r, n_mels]` log-mel frames.
    pub mel: Tensor,
    pub stop_probs: Vec<f64>,
    pub steps_used: usize,
    pub max_steps_exceeded: bool,
    pub task: TaskId,
    /// Cross-attention maps of the final step, per layer then head.
    pub attention: Option<Vec<Vec<Tensor>>>,
}

fn generate(model: &Model, task: TaskId, src: Source, spk: &[f64], max_steps: usize, opts: &SynthesisOptions) -> Result<SynthesisResult> {
    let cfg = model.config();
    let (r, n) = (cfg.reduction_factor, cfg.n_mels);
    let (states, ctc_in) = {
        let mut g = Graph::new(&model.params);
        let enc = model.encode(&mut g, src, task)?;
        (g.value(enc.states).clone(), g.value(enc.ctc_input).clone())
    };
    let mut inputs = Tensor::zeros(1, n);
    let mut stop_probs = Vec::new();
    let mut mel = Tensor::zeros(0, n);
    let mut attention = None;
    let mut stopped = false;
    let mut steps = 0;
    while steps < max_steps {
        let mut g = if opts.prenet_dropout {
            Graph::sampling(&model.params, crate::train::mix_seed(&[opts.seed, steps as u64]))
        } else {
            Graph::new(&model.params)
        };
        let enc = model.memory(&mut g, &states, &ctc_in);
        let out = model.speech_decode(&mut g, &enc, &inputs, spk, task, opts.keep_attention)?;
        steps += 1;
        let after = g.value(out.after);
        let stop = g.value(out.stop_logits);
        let rows = steps * r;
        if !after.is_finite() {
            return Err(Error::NonFinite("generated mel"));
        }
        stop_probs.extend((rows - r..rows).map(|i| math::sigmoid(stop.get(i, 0))));
        mel = after.clone();
        if opts.keep_attention {
            attention = Some(out.attention.iter().map(|layer| layer.iter().map(|&a| g.value(a).clone()).collect()).collect());
        }
        if stop_probs[rows - r..].iter().any(|&p| p > opts.stop_threshold) {
            stopped = true;
            break;
        }
        let next = Tensor::from_vec(1, n, after.row(rows - 1).to_vec())?;
        inputs = Tensor::concat_rows(&[&inputs, &next]);
    }
    Ok(SynthesisResult { mel, stop_probs, steps_used: steps, max_steps_exceeded: !stopped, task, attention })
}

/// Default step budget: `max(20·len/r, 10)`.
pub fn default_max_steps(len: usize, r: usize) -> usize {
    (20 * len / r.max(1)).max(10)
}

/// Autoregressive mel generation from character ids (no specials).
pub fn tts_generate(model: &Model, text: &[usize], spk: &[f64], opts: &SynthesisOptions) -> Result<SynthesisResult> {
    let mut ids = text.to_vec();
    ids.push(EOS_ID);
    let max_steps = opts.max_steps.unwrap_or_else(|| default_max_steps(text.len(), model.config().reduction_factor));
    generate(model, TaskId::Tts, Source::Text(&ids), spk, max_steps, opts)
}

/// Converts `wave` to the voice described by `spk`.
pub fn vc_generate(model: &Model, wave: &[f64], spk: &[f64], opts: &SynthesisOptions) -> Result<SynthesisResult> {
    model.config().task_index(TaskId::Vc)?;
    let frames = model.config().speech_frames(wave.len()).unwrap_or(0);
    let r = model.config().reduction_factor.max(1);
    let max_steps = opts.max_steps.unwrap_or_else(|| (2 * frames / r).max(10));
    generate(model, TaskId::Vc, Source::Wave(wave), spk, max_steps, opts)
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`.
pub fn speaker_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { context: "speaker embeddings", expected: (1, a.len()), found: (1, b.len()) });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = math::sqrt(a.iter().map(|x| x * x).sum());
    let nb = math::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::NonFinite("speaker similarity of a zero vector"));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
