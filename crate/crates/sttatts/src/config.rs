//! Run configuration: JSON with `${VAR}` environment interpolation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sttatts_core::infer::{DecodeOptions, SynthesisOptions};
use sttatts_core::train::TrainSchedule;
use sttatts_core::{ModelConfig, TaskId};

use crate::audio::MelConfig;
use crate::checkpoint::Precision;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub ctc_weight: f64,
    pub max_len: usize,
    pub length_norm: bool,
    pub stop_threshold: f64,
    pub griffin_lim_iters: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        let d = DecodeOptions::default();
        Self { beam: d.beam, ctc_weight: d.ctc_weight, max_len: d.max_len, length_norm: d.length_norm, stop_threshold: 0.5, griffin_lim_iters: 60 }
    }
}

impl DecodeConfig {
    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions { beam: self.beam, ctc_weight: self.ctc_weight, max_len: self.max_len, length_norm: self.length_norm }
    }

    pub fn synthesis_options(&self) -> SynthesisOptions {
        SynthesisOptions { stop_threshold: self.stop_threshold, ..SynthesisOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    /// Manifest path per dataset name. Stages name their datasets per task;
    /// tasks without an entry use the dataset called `train`.
    pub data: BTreeMap<String, PathBuf>,
    /// Vocabulary file; the English character set when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub mel: MelConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_every")]
    pub validate_every: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Initial weights; tasks missing from the checkpoint get fresh
    /// task-embedding rows and nothing else.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
}

fn default_every() -> u64 {
    500
}

/// Replaces every `${NAME}` with the value of the environment variable.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| Error::Config("unterminated ${ in configuration".into()))?;
        let name = &after[..end];
        let value = lookup(name).ok_or_else(|| Error::Config(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let text = interpolate(text, |k| std::env::var(k).ok())?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("run configuration: {e}")))
    }

    /// Reads a configuration file; relative paths inside it are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.values_mut().for_each(fix);
        cfg.vocab.iter_mut().for_each(fix);
        cfg.init_from.iter_mut().for_each(fix);
        fix(&mut cfg.out_dir);
        Ok(cfg)
    }

    /// Dataset name used for `task` by stage `stage`.
    pub fn dataset_for(&self, stage: usize, task: TaskId) -> &str {
        self.schedule.stages.get(stage).and_then(|s| s.datasets.get(&task)).map_or("train", String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate(&self.model)?;
        self.mel.validate()?;
        if self.mel.n_mels != self.model.n_mels {
            return Err(Error::Config(format!("mel.n_mels {} differs from model.n_mels {}", self.mel.n_mels, self.model.n_mels)));
        }
        for (i, stage) in self.schedule.stages.iter().enumerate() {
            for t in stage.tasks() {
                let name = self.dataset_for(i, t);
                if !self.data.contains_key(name) {
                    return Err(Error::Config(format!("stage {i} uses dataset {name:?} for {}, which is not listed under data", t.name())));
                }
            }
        }
        if self.checkpoint_every == 0 || self.validate_every == 0 {
            return Err(Error::Config("checkpoint_every and validate_every must be positive".into()));
        }
        Ok(())
    }
}
