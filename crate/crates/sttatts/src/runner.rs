//! Executes a run configuration: data loading, staged training, metrics
//! logging, periodic checkpoints and exact resumption.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sttatts_core::graph::Graph;
use sttatts_core::losses::{joint_loss, LossReport};
use sttatts_core::textproc::Vocab;
use sttatts_core::train::{sample_loss, Batch, Example, Trainer};
use sttatts_core::{Model, TaskId};

use crate::audio::LoadOptions;
use crate::checkpoint::{self, Checkpoint, TrainingState};
use crate::config::RunConfig;
use crate::data::{self, Manifest, Utterance};
use crate::error::{Error, Result};

/// Consecutive non-finite steps tolerated before a run is abandoned.
const MAX_CONSECUTIVE_SKIPS: u32 = 100;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many updates are done.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageSwitch {
    pub update: u64,
    pub stage: usize,
    pub tasks: Vec<TaskId>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub updates: u64,
    pub param_hash: String,
    pub stage_log: Vec<StageSwitch>,
    pub metrics_path: PathBuf,
    pub skipped_steps: u64,
}

pub fn load_vocab(path: Option<&Path>) -> Result<Vocab> {
    match path {
        None => Ok(Vocab::english()),
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingFile(p.to_path_buf()));
            }
            Ok(Vocab::from_file_string(&fs::read_to_string(p).map_err(Error::io(p))?)?)
        }
    }
}

pub fn checkpoint_path(out_dir: &Path, update: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{update}.stt"))
}

struct Data {
    utterances: BTreeMap<String, Vec<Utterance>>,
    examples: BTreeMap<(String, TaskId), Vec<Example>>,
}

impl Data {
    fn load(cfg: &RunConfig, vocab: &Vocab) -> Result<Self> {
        let mut utterances = BTreeMap::new();
        let mut examples = BTreeMap::new();
        for (i, stage) in cfg.schedule.stages.iter().enumerate() {
            for task in stage.tasks() {
                let name = cfg.dataset_for(i, task).to_string();
                if !utterances.contains_key(&name) {
                    let manifest = Manifest::load(&cfg.data[&name])?;
                    utterances.insert(name.clone(), data::load_utterances(&manifest, vocab, &cfg.mel, LoadOptions::default())?);
                }
                if !examples.contains_key(&(name.clone(), task)) {
                    let ex = data::examples_for(task, &utterances[&name])?;
                    if ex.is_empty() {
                        return Err(Error::Config(format!("dataset {name:?} yields no {} examples", task.name())));
                    }
                    examples.insert((name, task), ex);
                }
            }
        }
        Ok(Self { utterances, examples })
    }

    fn speech_targets(&self) -> impl Iterator<Item = &sttatts_core::Tensor> {
        self.examples.iter().filter(|((_, t), _)| t.speech_output()).flat_map(|(_, ex)| ex.iter().filter_map(|e| e.mel.as_ref()))
    }
}

fn initial_model(cfg: &RunConfig, data: &Data) -> Result<Model> {
    if let Some(path) = &cfg.init_from {
        let ckpt = checkpoint::load(path)?;
        let mut base = ckpt.model.config().clone();
        base.tasks.clone_from(&cfg.model.tasks);
        if base != cfg.model {
            return Err(Error::Config(format!("{} was trained with a different architecture", path.display())));
        }
        return Ok(ckpt.model.with_tasks(&cfg.model.tasks, cfg.seed)?);
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    if data.speech_targets().next().is_some() {
        let (mean, std) = data::mel_stats(data.speech_targets(), cfg.model.n_mels)?;
        model.set_mel_stats(mean, std)?;
    }
    Ok(model)
}

/// Teacher-forced losses on up to eight examples per active task.
fn validation(model: &Model, trainer: &Trainer, cfg: &RunConfig, data: &Data, stage: usize) -> Result<Option<LossReport>> {
    let Some(s) = trainer.current_stage() else { return Ok(None) };
    let mut reports = Vec::new();
    for task in s.tasks() {
        for ex in data.examples[&(cfg.dataset_for(stage, task).to_string(), task)].iter().take(8) {
            let mut g = Graph::new(&model.params);
            reports.push(sample_loss(&mut g, model, task, ex, &cfg.schedule.loss, s.terms(task))?.1);
        }
    }
    Ok(joint_loss(&reports, &cfg.schedule.loss).ok())
}

fn save(cfg: &RunConfig, model: &Model, vocab: &Vocab, trainer: &Trainer) -> Result<PathBuf> {
    let path = checkpoint_path(&cfg.out_dir, trainer.state.global_update);
    let ckpt = Checkpoint {
        model: model.clone(),
        vocab: vocab.clone(),
        mel: cfg.mel.clone(),
        precision: cfg.precision,
        training: Some(TrainingState { schedule: cfg.schedule.clone(), optimizer: trainer.opt.clone(), step: trainer.state.clone() }),
    };
    checkpoint::save(&path, &ckpt)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn emit(metrics: &mut File, path: &Path, value: serde_json::Value) -> Result<()> {
    writeln!(metrics, "{value}").map_err(Error::io(path))
}

pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let vocab = load_vocab(cfg.vocab.as_deref())?;
    if vocab.size() != cfg.model.vocab_size {
        return Err(Error::Config(format!("vocabulary has {} symbols, model expects {}", vocab.size(), cfg.model.vocab_size)));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(Error::io(&cfg.out_dir))?;
    let data = Data::load(cfg, &vocab)?;
    log::info!("loaded {} datasets", data.utterances.len());

    let (mut model, mut trainer) = match &opts.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let Some(tr) = ckpt.training else {
                return Err(Error::Config(format!("{} holds no training state", path.display())));
            };
            if ckpt.model.config() != &cfg.model || tr.schedule != cfg.schedule {
                return Err(Error::Config(format!("{} belongs to a different model or schedule", path.display())));
            }
            let trainer = Trainer::resume(cfg.schedule.clone(), &ckpt.model, tr.optimizer, tr.step)?;
            log::info!("resuming at update {}", trainer.state.global_update);
            (ckpt.model, trainer)
        }
        None => {
            let model = initial_model(cfg, &data)?;
            let trainer = Trainer::new(cfg.schedule.clone(), &model, cfg.seed)?;
            (model, trainer)
        }
    };

    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut metrics = OpenOptions::new().create(true).append(true).open(&metrics_path).map_err(Error::io(&metrics_path))?;
    let mut final_checkpoint = if opts.resume.is_none() { save(cfg, &model, &vocab, &trainer)? } else { opts.resume.clone().unwrap_or_default() };
    let mut stage_log: Vec<StageSwitch> = Vec::new();
    let mut last_stage = None;
    let mut consecutive_skips = 0;

    while !trainer.finished() && opts.stop_after.is_none_or(|n| trainer.state.global_update < n) {
        let update = trainer.state.global_update;
        let stage = cfg.schedule.stages.iter().position(|s| (s.step_range[0]..s.step_range[1]).contains(&update)).ok_or(sttatts_core::Error::EmptyStep)?;
        if last_stage != Some(stage) {
            let tasks = cfg.schedule.stages[stage].tasks();
            log::info!("stage {stage} starts at update {update} with tasks {tasks:?}");
            emit(&mut metrics, &metrics_path, json!({ "event": "stage", "update": update, "stage": stage, "tasks": tasks }))?;
            stage_log.push(StageSwitch { update, stage, tasks });
            last_stage = Some(stage);
        }
        let sizes: BTreeMap<TaskId, usize> = cfg.schedule.stages[stage].tasks().into_iter().map(|t| (t, data.examples[&(cfg.dataset_for(stage, t).to_string(), t)].len())).collect();
        let plan = trainer.plan(&sizes)?;
        let batches: Vec<Batch> = plan
            .iter()
            .map(|(t, idx)| {
                let pool = &data.examples[&(cfg.dataset_for(stage, *t).to_string(), *t)];
                Batch { task: *t, examples: idx.iter().map(|&i| &pool[i]).collect() }
            })
            .collect();
        let out = trainer.train_step(&mut model, &batches)?;
        if out.skipped {
            consecutive_skips += 1;
            log::warn!("non-finite loss at update {update}; step skipped ({} so far)", trainer.state.skipped_steps);
            if consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(sttatts_core::Error::NonFinite("training loss").into());
            }
            continue;
        }
        consecutive_skips = 0;
        if !out.updated {
            continue;
        }
        let done = trainer.state.global_update;
        emit(&mut metrics, &metrics_path, json!({ "update": done, "stage": stage, "lr": out.lr, "grad_norm": out.grad_norm, "loss": out.report, "skipped_steps": trainer.state.skipped_steps }))?;
        if done % cfg.validate_every == 0 {
            let val = validation(&model, &trainer, cfg, &data, stage)?;
            emit(&mut metrics, &metrics_path, json!({ "update": done, "val": val }))?;
        }
        let stopping = trainer.finished() || opts.stop_after == Some(done);
        if done % cfg.checkpoint_every == 0 || stopping {
            final_checkpoint = save(cfg, &model, &vocab, &trainer)?;
        }
    }
    Ok(RunSummary {
        final_checkpoint,
        updates: trainer.state.global_update,
        param_hash: checkpoint::param_hash(&model),
        stage_log,
        metrics_path,
        skipped_steps: trainer.state.skipped_steps,
    })
}
