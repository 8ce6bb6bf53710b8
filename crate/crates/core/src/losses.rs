//! Training objectives. Each loss is a pure function returning its value and
//! gradient; the `*_node` variants record it on a [`Graph`] as a fused node.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::model::TaskId;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub pos_weight: f64,
    /// Width `g` of the guided-attention diagonal band.
    pub guided_sigma: f64,
    pub guided_attention: bool,
    pub ce_weight: f64,
    pub ctc_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { label_smoothing: 0.1, pos_weight: 5.0, guided_sigma: 0.2, guided_attention: true, ce_weight: 1.0, ctc_weight: 1.0 }
    }
}

fn shape_check(context: &'static str, t: &Tensor, expected: (usize, usize)) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::ShapeMismatch { context, expected, found: t.shape() });
    }
    Ok(())
}

/// Softmax cross-entropy averaged over non-pad targets, with targets
/// smoothed towards uniform by `smoothing`. Returns `(loss, d loss / d logits)`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], pad_id: usize, smoothing: f64) -> Result<(f64, Tensor)> {
    let (l, v) = logits.shape();
    if targets.len() != l {
        return Err(Error::ShapeMismatch { context: "cross entropy targets", expected: (l, 1), found: (targets.len(), 1) });
    }
    if let Some(&id) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::InvalidId { id, size: v });
    }
    let n = targets.iter().filter(|&&t| t != pad_id).count();
    let mut grad = Tensor::zeros(l, v);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (i, &tgt) in targets.iter().enumerate() {
        if tgt == pad_id {
            continue;
        }
        let row = logits.row(i);
        let lse = math::log_sum_exp(row);
        let g = grad.row_mut(i);
        for (k, (&x, gk)) in row.iter().zip(g.iter_mut()).enumerate() {
            let q = smoothing / v as f64 + if k == tgt { 1.0 - smoothing } else { 0.0 };
            total -= q * (x - lse);
            *gk = (math::exp(x - lse) - q) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Result of the CTC forward-backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Ctc {
    /// `-ln p(target | input)`; `+inf` when no alignment exists.
    pub nll: f64,
    /// `d nll / d log_probs`; zero when infeasible.
    pub grad: Tensor,
    pub feasible: bool,
}

/// Minimum number of frames an alignment of `target` needs.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `target` under per-frame `log_probs`
/// `[T, V]`, by the forward-backward recursions in log space.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<Ctc> {
    let (t_len, v) = log_probs.shape();
    if let Some(&id) = target.iter().chain(core::iter::once(&blank)).find(|&&id| id >= v) {
        return Err(Error::InvalidId { id, size: v });
    }
    let mut grad = Tensor::zeros(t_len, v);
    if t_len < ctc_min_frames(target) || t_len == 0 {
        return Ok(Ctc { nll: f64::INFINITY, grad, feasible: false });
    }
    // Extended label sequence: blank, y1, blank, y2, ..., blank.
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    let skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let lp = |t: usize, s: usize| log_probs.get(t, label(s));
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = math::log_add(a, prev[s - 1]);
            }
            if skip(s) {
                a = math::log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp(t, s);
        }
    }
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = math::log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = math::log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = b + lp(t, s);
        }
    }
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = math::log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Ok(Ctc { nll: f64::INFINITY, grad, feasible: false });
    }
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > ninf {
                let k = label(s);
                let cur = grad.get(t, k);
                grad.set(t, k, cur - math::exp(ab - lp(t, s) - log_p));
            }
        }
    }
    Ok(Ctc { nll: -log_p, grad, feasible: true })
}

/// Mean absolute error of both postnet outputs over valid frames. Returns
/// `(loss, d/d before, d/d after)`.
pub fn l1_mel(before: &Tensor, after: &Tensor, target: &Tensor, valid: &[bool]) -> Result<(f64, Tensor, Tensor)> {
    let shape = target.shape();
    shape_check("l1 before", before, shape)?;
    shape_check("l1 after", after, shape)?;
    if valid.len() != shape.0 {
        return Err(Error::ShapeMismatch { context: "l1 mask", expected: (shape.0, 1), found: (valid.len(), 1) });
    }
    let n = valid.iter().filter(|&&v| v).count() * shape.1;
    let mut gb = Tensor::zeros(shape.0, shape.1);
    let mut ga = Tensor::zeros(shape.0, shape.1);
    if n == 0 {
        return Ok((0.0, gb, ga));
    }
    let mut total = 0.0;
    for (r, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        for (pred, grad) in [(before, &mut gb), (after, &mut ga)] {
            for ((&p, &y), g) in pred.row(r).iter().zip(target.row(r)).zip(grad.row_mut(r)) {
                let d = p - y;
                total += d.abs();
                *g = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                } / n as f64;
            }
        }
    }
    Ok((total / n as f64, gb, ga))
}

/// Binary cross-entropy with logits, positives weighted by `pos_weight`,
/// averaged over valid frames. Returns `(loss, d loss / d logits)`.
pub fn stop_bce(logits: &[f64], targets: &[f64], pos_weight: f64, valid: &[bool]) -> Result<(f64, Vec<f64>)> {
    if targets.len() != logits.len() || valid.len() != logits.len() {
        return Err(Error::ShapeMismatch { context: "stop targets", expected: (logits.len(), 1), found: (targets.len().min(valid.len()), 1) });
    }
    let n = valid.iter().filter(|&&v| v).count();
    let mut grad = vec![0.0; logits.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for i in (0..logits.len()).filter(|&i| valid[i]) {
        let (x, y) = (logits[i], targets[i]);
        total += pos_weight * y * math::softplus(-x) + (1.0 - y) * math::softplus(x);
        let s = math::sigmoid(x);
        grad[i] = (-pos_weight * y * (1.0 - s) + (1.0 - y) * s) / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Diagonal-prior weight `1 - exp(-(n/N - t/T)² / (2g²))`.
pub fn guided_weight(n: usize, t: usize, rows: usize, cols: usize, g: f64) -> f64 {
    let d = n as f64 / rows as f64 - t as f64 / cols as f64;
    1.0 - math::exp(-d * d / (2.0 * g * g))
}

/// Guided-attention penalty `Σ A·W / N` for one `[N, T]` map, averaged over
/// all given maps. Returns the value and one gradient per map.
pub fn guided_attention(maps: &[&Tensor], g: f64) -> Result<(f64, Vec<Tensor>)> {
    if maps.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    if g <= 0.0 {
        return Err(Error::Config("guided attention width must be positive".into()));
    }
    let (rows, cols) = maps[0].shape();
    let mut weight = Tensor::zeros(rows, cols);
    for n in 0..rows {
        for t in 0..cols {
            weight.set(n, t, guided_weight(n, t, rows, cols, g));
        }
    }
    let scale = 1.0 / (rows as f64 * maps.len() as f64);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(maps.len());
    for m in maps {
        shape_check("guided attention map", m, (rows, cols))?;
        total += m.data().iter().zip(weight.data()).map(|(a, w)| a * w).sum::<f64>();
        let mut gr = weight.clone();
        gr.scale_in_place(scale);
        grads.push(gr);
    }
    Ok((total * scale, grads))
}

/// Graph form of [`cross_entropy`]; also returns the unsmoothed value.
pub fn cross_entropy_node(g: &mut Graph, logits: Var, targets: &[usize], pad_id: usize, smoothing: f64) -> Result<(Var, f64)> {
    let (value, grad) = cross_entropy(g.value(logits), targets, pad_id, smoothing)?;
    let plain = if smoothing == 0.0 { value } else { cross_entropy(g.value(logits), targets, pad_id, 0.0)?.0 };
    Ok((g.fused(logits, value, grad), plain))
}

/// Graph form of [`ctc_loss`]: `None` when the target is infeasible.
pub fn ctc_node(g: &mut Graph, log_probs: Var, target: &[usize], blank: usize, scale: f64) -> Result<Option<Var>> {
    let mut ctc = ctc_loss(g.value(log_probs), target, blank)?;
    if !ctc.feasible {
        return Ok(None);
    }
    ctc.grad.scale_in_place(scale);
    Ok(Some(g.fused(log_probs, ctc.nll * scale, ctc.grad)))
}

pub fn l1_node(g: &mut Graph, before: Var, after: Var, target: &Tensor, valid: &[bool]) -> Result<Var> {
    let (value, gb, ga) = l1_mel(g.value(before), g.value(after), target, valid)?;
    let both = g.concat_rows(&[before, after]);
    Ok(g.fused(both, value, Tensor::concat_rows(&[&gb, &ga])))
}

pub fn bce_node(g: &mut Graph, logits: Var, targets: &[f64], pos_weight: f64, valid: &[bool]) -> Result<Var> {
    let (value, grad) = stop_bce(g.value(logits).data(), targets, pos_weight, valid)?;
    let (rows, cols) = g.shape(logits);
    Ok(g.fused(logits, value, Tensor::from_vec(rows, cols, grad)?))
}

pub fn guided_attention_node(g: &mut Graph, maps: &[Var], sigma: f64) -> Result<Option<Var>> {
    if maps.is_empty() {
        return Ok(None);
    }
    let tensors: Vec<Tensor> = maps.iter().map(|&m| g.value(m).clone()).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let (_, grads) = guided_attention(&refs, sigma)?;
    let mut total = None;
    for ((&m, t), gr) in maps.iter().zip(&tensors).zip(grads) {
        let v = t.data().iter().zip(gr.data()).map(|(a, w)| a * w).sum();
        let node = g.fused(m, v, gr);
        total = Some(match total {
            Some(acc) => g.add(acc, node),
            None => node,
        });
    }
    Ok(total)
}

/// Loss components of one utterance. Components that do not apply to the
/// task are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLoss {
    pub task: Option<TaskId>,
    pub ce: Option<f64>,
    pub ctc: Option<f64>,
    pub l1: Option<f64>,
    pub bce: Option<f64>,
    pub attn: Option<f64>,
}

impl SampleLoss {
    pub fn is_speech_output(&self) -> bool {
        self.task.is_some_and(TaskId::speech_output)
    }

    /// Weighted sum of the present components.
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        cfg.ce_weight * self.ce.unwrap_or(0.0)
            + cfg.ctc_weight * self.ctc.unwrap_or(0.0)
            + self.l1.unwrap_or(0.0)
            + self.bce.unwrap_or(0.0)
            + self.attn.unwrap_or(0.0)
    }
}

/// Per-step summary: component means, task totals and the joint objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: Option<f64>,
    pub ctc: Option<f64>,
    pub l1: Option<f64>,
    pub bce: Option<f64>,
    pub attn: Option<f64>,
    pub asr_total: f64,
    pub tts_total: f64,
    pub joint: f64,
    pub n_asr: usize,
    pub n_tts: usize,
}

fn mean_of(samples: &[&SampleLoss], f: impl Fn(&SampleLoss) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = samples.iter().filter_map(|s| f(s)).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Averages every task's losses over that task's own sample count and adds
/// the text-output and speech-output totals.
pub fn joint_loss(samples: &[SampleLoss], cfg: &LossConfig) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(Error::EmptyStep);
    }
    let asr: Vec<&SampleLoss> = samples.iter().filter(|s| !s.is_speech_output()).collect();
    let tts: Vec<&SampleLoss> = samples.iter().filter(|s| s.is_speech_output()).collect();
    let ce = mean_of(&asr, |s| s.ce);
    let ctc = mean_of(&asr, |s| s.ctc);
    let l1 = mean_of(&tts, |s| s.l1);
    let bce = mean_of(&tts, |s| s.bce);
    let attn = mean_of(&tts, |s| s.attn);
    let asr_total = cfg.ce_weight * ce.unwrap_or(0.0) + cfg.ctc_weight * ctc.unwrap_or(0.0);
    let tts_total = l1.unwrap_or(0.0) + bce.unwrap_or(0.0) + attn.unwrap_or(0.0);
    let report = LossReport { ce, ctc, l1, bce, attn, asr_total, tts_total, joint: asr_total + tts_total, n_asr: asr.len(), n_tts: tts.len() };
    if !report.joint.is_finite() {
        return Err(Error::NonFinite("joint loss"));
    }
    Ok(report)
}

impl LossReport {
    /// Checks the composition identities within `tol`.
    pub fn is_consistent(&self, cfg: &LossConfig, tol: f64) -> bool {
        let asr = cfg.ce_weight * self.ce.unwrap_or(0.0) + cfg.ctc_weight * self.ctc.unwrap_or(0.0);
        let tts = self.l1.unwrap_or(0.0) + self.bce.unwrap_or(0.0) + self.attn.unwrap_or(0.0);
        (asr - self.asr_total).abs() <= tol
            && (tts - self.tts_total).abs() <= tol
            && (self.asr_total + self.tts_total - self.joint).abs() <= tol
    }
}
