//! Multi-task training: per-utterance losses, staged schedules, task-mixed
//! sampling, gradient accumulation with per-task normalization, and
//! optimizer updates.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossConfig, LossReport, SampleLoss};
use crate::lr::TriStage;
use crate::model::{Model, ModelConfig, Source, TaskId};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::{Grads, ParamGroup};
use crate::tensor::Tensor;
use crate::textproc::{BLANK_ID, BOS_ID, EOS_ID, PAD_ID};

/// One utterance ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Source waveform for speech-input tasks.
    pub wave: Option<Vec<f64>>,
    /// Character ids without specials: ASR target or TTS input.
    pub text: Option<Vec<usize>>,
    /// Target log-mel frames for speech-output tasks.
    pub mel: Option<Tensor>,
    /// Target speaker embedding for speech-output tasks.
    pub spk: Option<Vec<f64>>,
}

/// Task-homogeneous micro-batch.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub task: TaskId,
    pub examples: Vec<&'a Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Ce,
    Ctc,
    L1,
    Bce,
    Attn,
}

impl LossTerm {
    pub fn applies_to(self, task: TaskId) -> bool {
        match self {
            LossTerm::Ce | LossTerm::Ctc => !task.speech_output(),
            _ => task.speech_output(),
        }
    }
}

fn missing(what: &str, task: TaskId) -> Error {
    Error::Config(format!("{} example without {what}", task.name()))
}

/// Builds the loss of one utterance on `g`. Returns the differentiable
/// objective (weighted, label-smoothed) and the reported components.
pub fn sample_loss(g: &mut Graph, model: &Model, task: TaskId, ex: &Example, cfg: &LossConfig, terms: &[LossTerm]) -> Result<(Option<Var>, SampleLoss)> {
    let on = |t: LossTerm| terms.is_empty() || terms.contains(&t);
    let mut report = SampleLoss { task: Some(task), ..SampleLoss::default() };
    let mut parts: Vec<Var> = Vec::new();
    if !task.speech_output() {
        let wave = ex.wave.as_deref().ok_or_else(|| missing("audio", task))?;
        let text = ex.text.as_deref().ok_or_else(|| missing("transcript", task))?;
        let enc = model.encode(g, Source::Wave(wave), task)?;
        if on(LossTerm::Ce) {
            let mut prefix = vec![BOS_ID];
            prefix.extend_from_slice(text);
            let mut targets = text.to_vec();
            targets.push(EOS_ID);
            let logits = model.text_logits(g, &enc, &prefix, task)?;
            let (ce, plain) = losses::cross_entropy_node(g, logits, &targets, PAD_ID, cfg.label_smoothing)?;
            parts.push(g.scale(ce, cfg.ce_weight));
            report.ce = Some(plain);
        }
        if on(LossTerm::Ctc) {
            let lp = model.ctc_log_probs(g, &enc)?;
            let norm = 1.0 / text.len().max(1) as f64;
            let ctc = losses::ctc_node(g, lp, text, BLANK_ID, norm)?;
            // Infeasible alignments contribute zero.
            report.ctc = Some(ctc.map_or(0.0, |v| g.scalar(v)));
            if let Some(v) = ctc {
                parts.push(g.scale(v, cfg.ctc_weight));
            }
        }
    } else {
        let mel = ex.mel.as_ref().ok_or_else(|| missing("target mel", task))?;
        let spk = ex.spk.as_deref().ok_or_else(|| missing("speaker embedding", task))?;
        let enc = match task {
            TaskId::Vc => model.encode(g, Source::Wave(ex.wave.as_deref().ok_or_else(|| missing("source audio", task))?), task)?,
            _ => {
                let mut ids = ex.text.clone().ok_or_else(|| missing("text", task))?;
                ids.push(EOS_ID);
                model.encode(g, Source::Text(&ids), task)?
            }
        };
        let inputs = model.teacher_inputs(mel);
        let want_attn = cfg.guided_attention && on(LossTerm::Attn);
        let out = model.speech_decode(g, &enc, &inputs, spk, task, want_attn)?;
        let rows = g.shape(out.before).0;
        let t = mel.rows();
        let mut target = Tensor::zeros(rows, mel.cols());
        target.data_mut()[..mel.len()].copy_from_slice(mel.data());
        let valid: Vec<bool> = (0..rows).map(|r| r < t).collect();
        if on(LossTerm::L1) {
            let l1 = losses::l1_node(g, out.before, out.after, &target, &valid)?;
            report.l1 = Some(g.scalar(l1));
            parts.push(l1);
        }
        if on(LossTerm::Bce) {
            let stop: Vec<f64> = (0..rows).map(|r| if r + 1 == t { 1.0 } else { 0.0 }).collect();
            let bce = losses::bce_node(g, out.stop_logits, &stop, cfg.pos_weight, &valid)?;
            report.bce = Some(g.scalar(bce));
            parts.push(bce);
        }
        if want_attn {
            let maps: Vec<Var> = out.attention.iter().flatten().copied().collect();
            if let Some(ga) = losses::guided_attention_node(g, &maps, cfg.guided_sigma)? {
                report.attn = Some(g.scalar(ga));
                parts.push(ga);
            }
        }
    }
    let mut root = None;
    for p in parts {
        root = Some(match root {
            Some(acc) => g.add(acc, p),
            None => p,
        });
    }
    Ok((root, report))
}

/// One contiguous span of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    /// Updates `[start, end)`.
    pub step_range: [u64; 2],
    pub task_mix: BTreeMap<TaskId, f64>,
    /// Dataset name per task, resolved by the caller.
    #[serde(default)]
    pub datasets: BTreeMap<TaskId, String>,
    /// Group names or the aliases `backbone` / `auxiliary`.
    #[serde(default)]
    pub frozen_groups: Vec<String>,
    /// Loss components per task; all applicable ones when absent.
    #[serde(default)]
    pub loss_set: BTreeMap<TaskId, Vec<LossTerm>>,
    /// Per-task cap on the number of distinct utterances drawn.
    #[serde(default)]
    pub caps: BTreeMap<TaskId, usize>,
}

impl Stage {
    pub fn tasks(&self) -> Vec<TaskId> {
        self.task_mix.iter().filter(|(_, &w)| w > 0.0).map(|(&t, _)| t).collect()
    }

    pub fn frozen(&self) -> Result<Vec<ParamGroup>> {
        let mut out = Vec::new();
        for name in &self.frozen_groups {
            for g in ParamGroup::select(name)? {
                if !out.contains(&g) {
                    out.push(g);
                }
            }
        }
        Ok(out)
    }

    pub fn terms(&self, task: TaskId) -> &[LossTerm] {
        self.loss_set.get(&task).map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub stages: Vec<Stage>,
    pub total_updates: u64,
    /// Accumulation steps per optimizer update (k).
    pub update_frequency: u32,
    /// Utterance slots per accumulation step, split across tasks by mix.
    pub batch_size: usize,
    #[serde(default)]
    pub lr: TriStage,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

impl TrainSchedule {
    /// Single-stage schedule over `tasks` with equal weights.
    pub fn single(tasks: &[TaskId], total_updates: u64, batch_size: usize) -> Self {
        Self {
            stages: vec![Stage {
                step_range: [0, total_updates],
                task_mix: tasks.iter().map(|&t| (t, 1.0)).collect(),
                datasets: BTreeMap::new(),
                frozen_groups: Vec::new(),
                loss_set: BTreeMap::new(),
                caps: BTreeMap::new(),
            }],
            total_updates,
            update_frequency: 1,
            batch_size,
            lr: TriStage::default(),
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.update_frequency == 0 {
            return fail("update_frequency must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        self.lr.validate()?;
        let mut next = 0;
        for (i, s) in self.stages.iter().enumerate() {
            let [a, b] = s.step_range;
            if a != next || b < a {
                return fail(format!("stage {i} range {a}..{b} is not contiguous with {next}"));
            }
            next = b;
            if s.tasks().is_empty() || s.task_mix.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return fail(format!("stage {i} needs a non-negative task mix with at least one task"));
            }
            for t in s.task_mix.keys().chain(s.loss_set.keys()) {
                if !model.has_task(*t) {
                    return Err(Error::UnknownTask(*t));
                }
            }
            for (t, terms) in &s.loss_set {
                if let Some(bad) = terms.iter().find(|term| !term.applies_to(*t)) {
                    return fail(format!("stage {i}: loss {bad:?} does not apply to {}", t.name()));
                }
            }
            s.frozen()?;
        }
        if next != self.total_updates {
            return fail(format!("stages cover {next} updates, expected {}", self.total_updates));
        }
        Ok(())
    }

    pub fn stage_at(&self, update: u64) -> Option<&Stage> {
        self.stages.iter().find(|s| (s.step_range[0]..s.step_range[1]).contains(&update))
    }
}

/// Progress counters; everything needed to continue a run deterministically
/// from an update boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub global_update: u64,
    pub micro_step: u32,
    pub rng_seed: u64,
    /// Utterances drawn so far per task.
    pub draws: BTreeMap<TaskId, u64>,
    /// Samples accumulated since the last update: text-output, speech-output.
    pub accumulated: [usize; 2],
    pub skipped_steps: u64,
}

impl StepState {
    pub fn new(seed: u64) -> Self {
        Self { global_update: 0, micro_step: 0, rng_seed: seed, draws: BTreeMap::new(), accumulated: [0, 0], skipped_steps: 0 }
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn task_code(t: TaskId) -> u64 {
    t as u64 + 1
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Item drawn on the `draw`-th request from a dataset of `n` items, capped
/// to a seeded subset of `cap` items. Every epoch is a fresh permutation.
pub fn item_for_draw(task: TaskId, n: usize, cap: Option<usize>, draw: u64, seed: u64) -> usize {
    let pool = cap.map_or(n, |c| c.min(n)).max(1);
    let subset = permutation(n, mix_seed(&[seed, task_code(task), u64::MAX]));
    let epoch = draw / pool as u64;
    let perm = permutation(pool, mix_seed(&[seed, task_code(task), epoch]));
    subset[perm[(draw % pool as u64) as usize]]
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: Option<LossReport>,
    pub updated: bool,
    pub skipped: bool,
    pub lr: f64,
    pub grad_norm: Option<f64>,
}

/// Owns optimizer state and gradient accumulators for a run.
pub struct Trainer {
    pub schedule: TrainSchedule,
    pub opt: AdamState,
    pub state: StepState,
    /// Gradient applied by the most recent update, after normalization and
    /// clipping.
    pub last_gradient: Option<Grads>,
    acc: [Grads; 2],
}

impl Trainer {
    pub fn new(schedule: TrainSchedule, model: &Model, seed: u64) -> Result<Self> {
        schedule.validate(model.config())?;
        let n = model.params.len();
        Ok(Self { schedule, opt: AdamState::new(n), state: StepState::new(seed), last_gradient: None, acc: [Grads::new(n), Grads::new(n)] })
    }

    /// Continues from saved optimizer and progress state.
    pub fn resume(schedule: TrainSchedule, model: &Model, opt: AdamState, state: StepState) -> Result<Self> {
        let mut t = Self::new(schedule, model, state.rng_seed)?;
        if opt.steps.len() != model.params.len() {
            return Err(Error::ShapeMismatch { context: "optimizer state", expected: (model.params.len(), 1), found: (opt.steps.len(), 1) });
        }
        t.opt = opt;
        t.state = state;
        t.state.micro_step = 0;
        t.state.accumulated = [0, 0];
        Ok(t)
    }

    pub fn finished(&self) -> bool {
        self.state.global_update >= self.schedule.total_updates
    }

    pub fn current_stage(&self) -> Option<&Stage> {
        self.schedule.stage_at(self.state.global_update)
    }

    /// Chooses the utterances of the next accumulation step: every slot
    /// draws its task from the stage's mix, then the next item of that
    /// task's stream. Returns dataset indices grouped by task.
    pub fn plan(&mut self, sizes: &BTreeMap<TaskId, usize>) -> Result<Vec<(TaskId, Vec<usize>)>> {
        let stage = self.current_stage().ok_or(Error::EmptyStep)?.clone();
        let tasks = stage.tasks();
        let weights: Vec<f64> = tasks.iter().map(|t| stage.task_mix[t]).collect();
        let total: f64 = weights.iter().sum();
        let s = &mut self.state;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[s.rng_seed, 1, s.global_update, s.micro_step as u64]));
        let mut groups: Vec<(TaskId, Vec<usize>)> = Vec::new();
        for _ in 0..self.schedule.batch_size {
            let mut u = rng.random::<f64>() * total;
            let mut pick = tasks.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            let task = tasks[pick];
            let n = *sizes.get(&task).filter(|&&n| n > 0).ok_or_else(|| Error::Config(format!("no data for {}", task.name())))?;
            let draw = s.draws.entry(task).or_insert(0);
            let item = item_for_draw(task, n, stage.caps.get(&task).copied(), *draw, s.rng_seed);
            *draw += 1;
            match groups.iter_mut().find(|(t, _)| *t == task) {
                Some((_, items)) => items.push(item),
                None => groups.push((task, vec![item])),
            }
        }
        groups.sort_by_key(|(t, _)| *t);
        Ok(groups)
    }

    /// Accumulates the gradients of `batches` and, on every k-th call,
    /// applies one optimizer update with per-task normalized gradients.
    pub fn train_step(&mut self, model: &mut Model, batches: &[Batch]) -> Result<StepOutcome> {
        let stage = self.current_stage().ok_or(Error::EmptyStep)?.clone();
        let cfg = self.schedule.loss.clone();
        let lr = self.schedule.lr.lr(self.state.global_update, self.schedule.total_updates);
        let mut reports = Vec::new();
        let mut finite = true;
        for (b, batch) in batches.iter().enumerate() {
            model.config().task_index(batch.task)?;
            if !stage.task_mix.contains_key(&batch.task) {
                return Err(Error::Config(format!("{} is not active in this stage", batch.task.name())));
            }
            let side = usize::from(batch.task.speech_output());
            for (e, ex) in batch.examples.iter().enumerate() {
                let seed = mix_seed(&[self.state.rng_seed, 2, self.state.global_update, self.state.micro_step as u64, b as u64, e as u64]);
                let mut g = Graph::training(&model.params, seed);
                let (root, report) = sample_loss(&mut g, model, batch.task, ex, &cfg, stage.terms(batch.task))?;
                if let Some(root) = root {
                    if !g.scalar(root).is_finite() {
                        finite = false;
                        break;
                    }
                    let grads = g.backward(root);
                    self.acc[side].add_scaled(&grads.params, 1.0);
                }
                self.state.accumulated[side] += 1;
                reports.push(report);
            }
        }
        let report = if reports.is_empty() { None } else { losses::joint_loss(&reports, &cfg).ok() };
        if !finite || report.is_none() && !reports.is_empty() || !self.acc.iter().all(Grads::is_finite) {
            self.reset_accumulators();
            self.state.skipped_steps += 1;
            return Ok(StepOutcome { report: None, updated: false, skipped: true, lr, grad_norm: None });
        }
        self.state.micro_step += 1;
        if self.state.micro_step < self.schedule.update_frequency {
            return Ok(StepOutcome { report, updated: false, skipped: false, lr, grad_norm: None });
        }
        let mut total = Grads::new(model.params.len());
        for (side, acc) in self.acc.iter().enumerate() {
            let n = self.state.accumulated[side];
            if n > 0 {
                total.add_scaled(acc, 1.0 / n as f64);
            }
        }
        let frozen_groups = stage.frozen()?;
        let frozen: Vec<bool> = model.params.iter().map(|(_, p)| frozen_groups.contains(&p.group)).collect();
        let norm = adam_step(&mut model.params, &mut self.opt, &mut total, lr, &self.schedule.optimizer, &frozen);
        self.last_gradient = Some(total);
        self.reset_accumulators();
        self.state.global_update += 1;
        Ok(StepOutcome { report, updated: true, skipped: false, lr, grad_norm: Some(norm) })
    }

    fn reset_accumulators(&mut self) {
        let n = self.acc[0].len();
        self.acc = [Grads::new(n), Grads::new(n)];
        self.state.accumulated = [0, 0];
        self.state.micro_step = 0;
    }
}

#[cfg(test)]
mod tests;
