//! Command-line interface. Every subcommand is a plain function so tests
//! can call it directly; [`main_from`] maps errors to exit codes (0 success,
//! 1 run-time failure, 2 usage or configuration error).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sttatts_core::infer::{self, DecodeOptions, SynthesisOptions, SynthesisResult};
use sttatts_core::model::count_params;
use sttatts_core::textproc::{error_rate, ErrorUnit, NormalizeOpts, MAX_TEXT_TOKENS};
use sttatts_core::{ModelConfig, TaskId};

use crate::audio::{self, LoadOptions, Waveform};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{DecodeConfig, RunConfig};
use crate::data::{self, Manifest, SpeakerProbe, SyntheticSpec};
use crate::error::{Error, Result};
use crate::runner::{self, RunOptions, RunSummary};

#[derive(Debug, Parser)]
#[command(name = "sttatts", version, about = "Unified speech recognition and synthesis")]
pub struct Cli {
    /// Seed for every stochastic step (overrides configuration files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Base,
    YDecoder,
    Toy,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Base => ModelConfig::base(),
            Preset::YDecoder => ModelConfig::base_y_decoder(),
            Preset::Toy => ModelConfig::toy(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic tone corpus.
    GenData {
        /// Corpus specification (JSON); the 8-utterance toy corpus when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train according to `--config`.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many updates, writing a checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Transcribe a WAV file or every row of a manifest.
    Asr {
        #[arg(long)]
        ckpt: PathBuf,
        input: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        ctc_weight: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        resample: bool,
    },
    /// Synthesize a mel spectrogram (and optionally audio) from text.
    Tts {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        spk: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        truncate: bool,
    },
    /// Convert a recording to the voice of `--spk`.
    Vc {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        spk: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Score a checkpoint on a manifest for every task it supports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print parameter counts per component.
    CountParams {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
}

pub fn cmd_gen_data(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    data::gen_synthetic(spec, out_dir)?;
    Ok(out_dir.join("manifest.tsv"))
}

pub fn cmd_train(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    runner::run(cfg, opts)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    checkpoint::load(path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsrOutput {
    pub utt_ids: Vec<String>,
    pub hypotheses: Vec<String>,
    /// Word and character error rates when references are available.
    pub wer: Option<f64>,
    pub cer: Option<f64>,
}

fn is_manifest(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "tsv")
}

pub fn cmd_asr(ckpt: &Path, input: &Path, opts: &DecodeOptions, load: LoadOptions) -> Result<AsrOutput> {
    let ck = load_checkpoint(ckpt)?;
    let (ids, waves, refs): (Vec<String>, Vec<PathBuf>, Vec<String>) = if is_manifest(input) {
        let m = Manifest::load(input)?;
        let rows = m.rows.iter();
        (rows.clone().map(|r| r.utt_id.clone()).collect(), rows.clone().map(|r| m.resolve(&r.audio_path)).collect(), rows.map(|r| r.transcript.clone()).collect())
    } else {
        let id = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        (vec![id], vec![input.to_path_buf()], Vec::new())
    };
    let mut hypotheses = Vec::new();
    for (id, path) in ids.iter().zip(&waves) {
        let wave = audio::load_wav(path, load)?;
        let (best, _) = infer::asr_decode(&ck.model, &wave.samples, opts)?;
        let text = ck.vocab.detokenize(&best)?;
        log::debug!("{id}: {text}");
        hypotheses.push(text);
    }
    let (wer, cer) = if refs.iter().any(|r| !r.is_empty()) {
        let r: Vec<&str> = refs.iter().map(String::as_str).collect();
        let h: Vec<&str> = hypotheses.iter().map(String::as_str).collect();
        (Some(error_rate(&r, &h, ErrorUnit::Word, NormalizeOpts::ALL)?), Some(error_rate(&r, &h, ErrorUnit::Char, NormalizeOpts::ALL)?))
    } else {
        (None, None)
    };
    Ok(AsrOutput { utt_ids: ids, hypotheses, wer, cer })
}

fn write_outputs(ck: &Checkpoint, result: &SynthesisResult, out: &Path, wav: Option<&Path>, gl_iters: usize, seed: u64) -> Result<()> {
    audio::write_mel(out, &result.mel)?;
    if let Some(w) = wav {
        let samples = audio::griffin_lim(&result.mel, &ck.mel, gl_iters, seed)?;
        audio::save_wav(w, &Waveform::new(samples))?;
    }
    if result.max_steps_exceeded {
        log::warn!("generation stopped at the step limit ({} steps)", result.steps_used);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_tts(ckpt: &Path, text: &str, spk: &Path, out: &Path, wav: Option<&Path>, opts: &SynthesisOptions, gl_iters: usize, truncate: bool) -> Result<SynthesisResult> {
    let ck = load_checkpoint(ckpt)?;
    let ids = ck.vocab.tokenize_bounded(text, MAX_TEXT_TOKENS, truncate)?.ids;
    let spk = data::read_emb(spk)?;
    let result = infer::tts_generate(&ck.model, &ids, &spk, opts)?;
    write_outputs(&ck, &result, out, wav, gl_iters, opts.seed)?;
    Ok(result)
}

pub fn cmd_vc(ckpt: &Path, src: &Path, spk: &Path, out: &Path, wav: Option<&Path>, opts: &SynthesisOptions, gl_iters: usize) -> Result<SynthesisResult> {
    let ck = load_checkpoint(ckpt)?;
    ck.model.config().task_index(TaskId::Vc)?;
    let source = audio::load_wav(src, LoadOptions::default())?;
    let spk = data::read_emb(spk)?;
    let result = infer::vc_generate(&ck.model, &source.samples, &spk, opts)?;
    log::info!("routed through task {}", result.task.name());
    write_outputs(&ck, &result, out, wav, gl_iters, opts.seed)?;
    Ok(result)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub wer: Option<f64>,
    pub cer: Option<f64>,
    /// Mean masked L1 of generated against reference mels.
    pub tts_l1: Option<f64>,
    pub vc_l1: Option<f64>,
    /// Mean cosine between probed and requested speaker embeddings.
    pub vc_speaker_similarity: Option<f64>,
}

pub fn cmd_eval(ckpt: &Path, manifest: &Path, decode: &DecodeConfig) -> Result<EvalReport> {
    let ck = load_checkpoint(ckpt)?;
    let m = Manifest::load(manifest)?;
    let utts = data::load_utterances(&m, &ck.vocab, &ck.mel, LoadOptions::default())?;
    let model = &ck.model;
    let mut report = EvalReport::default();
    let synth = decode.synthesis_options();
    if model.config().has_task(TaskId::Asr) {
        let asr = cmd_asr(ckpt, manifest, &decode.decode_options(), LoadOptions::default())?;
        report.wer = asr.wer;
        report.cer = asr.cer;
    }
    let with_spk: Vec<_> = utts.iter().filter(|u| u.spk.is_some()).collect();
    if model.config().has_task(TaskId::Tts) && !with_spk.is_empty() {
        let mut total = 0.0;
        for u in &with_spk {
            let r = infer::tts_generate(model, &u.ids, u.spk.as_ref().unwrap(), &synth)?;
            total += data::masked_l1(&r.mel, &u.mel);
        }
        report.tts_l1 = Some(total / with_spk.len() as f64);
    }
    let pairs = data::vc_pairs(&utts);
    if model.config().has_task(TaskId::Vc) && !pairs.is_empty() {
        let probe = SpeakerProbe::fit(&utts, &ck.mel)?;
        let (mut l1, mut cos) = (0.0, 0.0);
        for &(s, t) in &pairs {
            let spk = utts[t].spk.as_ref().unwrap();
            let r = infer::vc_generate(model, &utts[s].wave, spk, &synth)?;
            l1 += data::masked_l1(&r.mel, &utts[t].mel);
            cos += probe.embed(&r.mel).map_or(Ok(0.0), |e| infer::speaker_similarity(&e, spk))?;
        }
        report.vc_l1 = Some(l1 / pairs.len() as f64);
        report.vc_speaker_similarity = Some(cos / pairs.len() as f64);
    }
    Ok(report)
}

/// Per-group table with the total and the backbone share.
pub fn cmd_count_params(cfg: &ModelConfig) -> Result<String> {
    cfg.validate()?;
    let counts = count_params(cfg);
    let mut out = String::new();
    for (group, n) in &counts.by_group {
        let _ = writeln!(out, "{:<20} {:>12}", group.name(), n);
    }
    let _ = writeln!(out, "{:<20} {:>12}", "backbone", counts.backbone());
    let _ = writeln!(out, "{:<20} {:>12}", "total", counts.total());
    let _ = writeln!(out, "{:<20} {:>12.1}M", "total (millions)", counts.total() as f64 / 1e6);
    Ok(out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let text = crate::config::interpolate(&text, |k| std::env::var(k).ok())?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), detail: e.to_string() })
}

fn decode_config(cli: &Cli) -> Result<DecodeConfig> {
    Ok(match &cli.config {
        Some(p) => RunConfig::load(p)?.decode,
        None => DecodeConfig::default(),
    })
}

fn print_mel_summary(out: &mut dyn Write, path: &Path, r: &SynthesisResult) -> Result<()> {
    writeln!(out, "{}\t{} frames\t{} steps{}", path.display(), r.mel.rows(), r.steps_used, if r.max_steps_exceeded { "\tmax_steps_exceeded" } else { "" }).map_err(Error::io(path))
}

/// Runs a parsed command, writing results to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let stdout_err = |e: std::io::Error| Error::Io { path: "<stdout>".into(), source: e };
    match &cli.command {
        Command::GenData { spec, out: dir } => {
            let mut s: SyntheticSpec = match spec {
                Some(p) => read_json(p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let manifest = cmd_gen_data(&s, dir)?;
            writeln!(out, "{}", manifest.display()).map_err(stdout_err)?;
        }
        Command::Train { resume, stop_after } => {
            let path = cli.config.as_ref().ok_or_else(|| Error::Config("train needs --config".into()))?;
            let mut cfg = RunConfig::load(path)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let summary = cmd_train(&cfg, &RunOptions { resume: resume.clone(), stop_after: *stop_after })?;
            writeln!(out, "{}\t{} updates\t{}", summary.final_checkpoint.display(), summary.updates, summary.param_hash).map_err(stdout_err)?;
        }
        Command::Asr { ckpt, input, beam, ctc_weight, max_len, resample } => {
            let mut opts = decode_config(cli)?.decode_options();
            opts.beam = beam.unwrap_or(opts.beam);
            opts.ctc_weight = ctc_weight.unwrap_or(opts.ctc_weight);
            opts.max_len = max_len.unwrap_or(opts.max_len);
            let res = cmd_asr(ckpt, input, &opts, LoadOptions { resample: *resample, downmix: false })?;
            for (id, h) in res.utt_ids.iter().zip(&res.hypotheses) {
                writeln!(out, "{id}\t{h}").map_err(stdout_err)?;
            }
            if let (Some(w), Some(c)) = (res.wer, res.cer) {
                writeln!(out, "WER {w:.4}\tCER {c:.4}").map_err(stdout_err)?;
            }
        }
        Command::Tts { ckpt, text, spk, out: mel, wav, max_steps, truncate } => {
            let dc = decode_config(cli)?;
            let opts = SynthesisOptions { max_steps: *max_steps, seed: cli.seed.unwrap_or(0), ..dc.synthesis_options() };
            let r = cmd_tts(ckpt, text, spk, mel, wav.as_deref(), &opts, dc.griffin_lim_iters, *truncate)?;
            print_mel_summary(out, mel, &r)?;
        }
        Command::Vc { ckpt, src, spk, out: mel, wav, max_steps } => {
            let dc = decode_config(cli)?;
            let opts = SynthesisOptions { max_steps: *max_steps, seed: cli.seed.unwrap_or(0), ..dc.synthesis_options() };
            let r = cmd_vc(ckpt, src, spk, mel, wav.as_deref(), &opts, dc.griffin_lim_iters)?;
            print_mel_summary(out, mel, &r)?;
        }
        Command::Eval { ckpt, manifest } => {
            let report = cmd_eval(ckpt, manifest, &decode_config(cli)?)?;
            writeln!(out, "{}", serde_json::to_string(&report).expect("report serializes")).map_err(stdout_err)?;
        }
        Command::CountParams { preset } => {
            let cfg = match (preset, &cli.config) {
                (Some(p), _) => p.config(),
                (None, Some(path)) => RunConfig::load(path)?.model,
                (None, None) => ModelConfig::base(),
            };
            write!(out, "{}", cmd_count_params(&cfg)?).map_err(stdout_err)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_from<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).target(env_logger::Target::Stderr).try_init();
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
