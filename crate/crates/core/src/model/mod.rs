//! Learnable components and their forward passes.
//!
//! Every forward function appends to a caller-owned [`Graph`], processes a
//! single utterance, and returns graph variables. Speech outputs are in
//! log-mel units; internally the decoder works on mels standardized by the
//! model's per-bin statistics.

pub mod config;
mod count;
mod layers;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use config::{DecoderTopology, FusionPosition, ModelConfig, TaskId};
pub use count::{count_params, ParamCounts};
pub use layers::{causal_mask, key_mask, sinusoidal_positions};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use layers::{Conv1d, ConvSpec, DecoderStack, EncoderStack, Init, LayerNorm, Linear};

/// Encoder input for one utterance.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    Wave(&'a [f64]),
    Text(&'a [usize]),
}

/// Encoder states after task fusion, plus the states fed to the CTC head.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub states: Var,
    pub ctc_input: Var,
}

#[derive(Clone, Debug)]
pub struct SpeechOutput {
    /// `[L·r, n_mels]`
    pub before: Var,
    pub after: Var,
    /// `[L·r, 1]`
    pub stop_logits: Var,
    /// Cross-attention maps per decoder layer, per head, each `[L, T']`.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
struct SpeechPrenet {
    convs: Vec<Conv1d>,
    ln: LayerNorm,
    proj: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Fusion {
    table: ParamId,
    proj: Linear,
}

#[derive(Clone, Copy, Debug)]
struct SpeechDecoderPrenet {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    spk: Linear,
}

#[derive(Clone, Debug)]
struct SpeechPostnet {
    mel: Linear,
    stop: Linear,
    convs: Vec<Conv1d>,
}

#[derive(Clone, Debug)]
struct Parts {
    speech_prenet: Option<SpeechPrenet>,
    embedding: Option<ParamId>,
    text_bias: Option<ParamId>,
    encoder: EncoderStack,
    fusion: Option<Fusion>,
    decoder: Option<DecoderStack>,
    text_decoder: Option<DecoderStack>,
    speech_decoder: Option<DecoderStack>,
    dec_prenet: Option<SpeechDecoderPrenet>,
    postnet: Option<SpeechPostnet>,
    ctc: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    mel_mean: Vec<f64>,
    mel_std: Vec<f64>,
    parts: Parts,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let parts = build(&config, &mut params, seed);
        let n = config.n_mels;
        Ok(Self { config, params, mel_mean: vec![0.0; n], mel_std: vec![1.0; n], parts })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mel_stats(&self) -> (&[f64], &[f64]) {
        (&self.mel_mean, &self.mel_std)
    }

    pub fn set_mel_stats(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        let n = self.config.n_mels;
        if mean.len() != n || std.len() != n {
            return Err(Error::ShapeMismatch { context: "mel stats", expected: (1, n), found: (1, mean.len().min(std.len())) });
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mel stats"));
        }
        self.mel_mean = mean;
        self.mel_std = std;
        Ok(())
    }

    /// Same weights under an enlarged task set. Every existing tensor is
    /// copied; only the new task-embedding rows are freshly drawn.
    pub fn with_tasks(&self, tasks: &[TaskId], seed: u64) -> Result<Self> {
        let mut grown = Model::new(self.config.clone().with_tasks(tasks), seed)?;
        grown.mel_mean.clone_from(&self.mel_mean);
        grown.mel_std.clone_from(&self.mel_std);
        for (_, p) in self.params.iter() {
            let Some(id) = grown.params.find(&p.name) else {
                return Err(Error::Config(format!("parameter {} has no counterpart", p.name)));
            };
            let dst = grown.params.get_mut(id);
            if dst.shape() == p.value.shape() {
                *dst = p.value.clone();
            } else if Some(id) == grown.parts.fusion.map(|f| f.table) {
                for (old_row, task) in self.config.tasks.iter().enumerate() {
                    let new_row = grown.config.task_index(*task)?;
                    dst.row_mut(new_row).copy_from_slice(p.value.row(old_row));
                }
            } else {
                return Err(Error::ShapeMismatch { context: "task extension", expected: dst.shape(), found: p.value.shape() });
            }
        }
        Ok(grown)
    }

    /// Parameter ids belonging to any of `groups`.
    pub fn params_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.params.iter().filter(|(_, p)| groups.contains(&p.group)).map(|(id, _)| id).collect()
    }

    /// Shared text embedding table `[vocab, d_model]`.
    pub fn embedding_id(&self) -> Option<ParamId> {
        self.parts.embedding
    }

    pub fn task_table_id(&self) -> Option<ParamId> {
        self.parts.fusion.map(|f| f.table)
    }

    fn check_task(&self, task: TaskId) -> Result<usize> {
        self.config.task_index(task)
    }

    /// Modality pre-net plus sinusoidal positions: `[T', d_model]`.
    pub fn encoder_prenet(&self, g: &mut Graph, src: Source) -> Result<Var> {
        let x = match src {
            Source::Wave(wave) => self.speech_encoder_prenet(g, wave)?,
            Source::Text(ids) => self.text_encoder_prenet(g, ids)?,
        };
        Ok(self.add_positions(g, x))
    }

    fn add_positions(&self, g: &mut Graph, x: Var) -> Var {
        let (rows, cols) = g.shape(x);
        let pos = g.constant(sinusoidal_positions(rows, cols));
        g.add(x, pos)
    }

    /// Waveform convolution stack, GELU after every layer, then layer norm
    /// and projection to `d_model`. No positional encoding.
    pub fn speech_encoder_prenet(&self, g: &mut Graph, wave: &[f64]) -> Result<Var> {
        let net = self.parts.speech_prenet.as_ref().ok_or(Error::Config("model has no speech input".into()))?;
        if wave.is_empty() {
            return Err(Error::EmptyAudio);
        }
        let needed = self.config.receptive_field();
        if wave.len() < needed {
            return Err(Error::TooShort { len: wave.len(), needed });
        }
        let mut x = g.constant(Tensor::from_vec(wave.len(), 1, wave.to_vec())?);
        for conv in &net.convs {
            x = conv.forward(g, x);
            x = g.gelu(x);
        }
        let x = net.ln.forward(g, x);
        Ok(net.proj.forward(g, x))
    }

    /// Scaled rows of the shared embedding table. No positional encoding.
    pub fn text_encoder_prenet(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = self.parts.embedding.ok_or(Error::Config("model has no text embedding".into()))?;
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(Error::TooShort { len: 0, needed: 1 });
        }
        let t = g.param(table);
        let x = g.gather(t, ids);
        Ok(g.scale(x, math::sqrt(self.config.d_model as f64)))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let size = self.config.vocab_size;
        match ids.iter().find(|&&id| id >= size) {
            Some(&id) => Err(Error::InvalidId { id, size }),
            None => Ok(()),
        }
    }

    /// Appends the task vector to every row and projects back to `d_model`.
    /// Identity when the model has no fusion module.
    pub fn task_fuse(&self, g: &mut Graph, x: Var, task: TaskId) -> Result<Var> {
        let idx = self.check_task(task)?;
        let Some(fusion) = self.parts.fusion else { return Ok(x) };
        let rows = g.shape(x).0;
        let table = g.param(fusion.table);
        let e = g.gather(table, &vec![idx; rows]);
        let cat = g.concat_cols(&[x, e]);
        Ok(fusion.proj.forward(g, cat))
    }

    /// Transformer encoder over pre-net output, with task fusion placed per
    /// the configuration. `valid` marks real (non-padding) frames.
    pub fn encode_latents(&self, g: &mut Graph, x: Var, valid: Option<&[bool]>, task: TaskId) -> Result<EncoderOutput> {
        self.check_task(task)?;
        let rows = g.shape(x).0;
        if let Some(v) = valid {
            if v.len() != rows {
                return Err(Error::ShapeMismatch { context: "encoder mask", expected: (rows, 1), found: (v.len(), 1) });
            }
        }
        let mask = valid.map(|v| key_mask(rows, v));
        let pre = self.config.fusion_position == FusionPosition::PreEncoder;
        let x = if pre { self.task_fuse(g, x, task)? } else { x };
        let raw = self.parts.encoder.forward(g, x, mask.as_deref(), self.config.dropout);
        let states = if pre { raw } else { self.task_fuse(g, raw, task)? };
        let ctc_input = if self.config.ctc_on_fused { states } else { raw };
        Ok(EncoderOutput { states, ctc_input })
    }

    pub fn encode(&self, g: &mut Graph, src: Source, task: TaskId) -> Result<EncoderOutput> {
        self.check_task(task)?;
        let speech = matches!(src, Source::Wave(_));
        if speech != task.speech_input() {
            return Err(Error::Config(format!("{} expects {} input", task.name(), if task.speech_input() { "speech" } else { "text" })));
        }
        let x = self.encoder_prenet(g, src)?;
        self.encode_latents(g, x, None, task)
    }

    /// Wraps precomputed encoder tensors for incremental decoding.
    pub fn memory(&self, g: &mut Graph, states: &Tensor, ctc_input: &Tensor) -> EncoderOutput {
        EncoderOutput { states: g.constant(states.clone()), ctc_input: g.constant(ctc_input.clone()) }
    }

    /// `[T', vocab]` log-probabilities.
    pub fn ctc_log_probs(&self, g: &mut Graph, enc: &EncoderOutput) -> Result<Var> {
        let head = self.parts.ctc.ok_or(Error::UnknownTask(TaskId::Asr))?;
        let logits = head.forward(g, enc.ctc_input);
        Ok(g.log_softmax(logits))
    }

    fn decoder_for(&self, task: TaskId) -> Result<&DecoderStack> {
        self.check_task(task)?;
        let stack = match self.config.decoder_topology {
            DecoderTopology::Shared => self.parts.decoder.as_ref(),
            DecoderTopology::YDecoder if task.speech_output() => self.parts.speech_decoder.as_ref(),
            DecoderTopology::YDecoder => self.parts.text_decoder.as_ref(),
        };
        stack.ok_or(Error::UnknownTask(task))
    }

    /// Number of decoder stacks instantiated.
    pub fn decoder_stacks(&self) -> usize {
        [&self.parts.decoder, &self.parts.text_decoder, &self.parts.speech_decoder].iter().filter(|d| d.is_some()).count()
    }

    /// Next-token logits `[L, vocab]` for the decoder input `prefix`
    /// (conventionally `bos` followed by the target).
    pub fn text_logits(&self, g: &mut Graph, enc: &EncoderOutput, prefix: &[usize], task: TaskId) -> Result<Var> {
        if task.speech_output() {
            return Err(Error::Config(format!("{} has no text output", task.name())));
        }
        let stack = self.decoder_for(task)?;
        let x = self.text_encoder_prenet(g, prefix)?;
        let x = self.add_positions(g, x);
        let l = prefix.len();
        let h = stack.forward(g, x, enc.states, &causal_mask(l), None, self.config.dropout, None);
        Ok(self.text_postnet(g, h))
    }

    /// Projection through the transposed embedding table plus a bias.
    pub fn text_postnet(&self, g: &mut Graph, states: Var) -> Var {
        let table = g.param(self.parts.embedding.expect("text output requires an embedding"));
        let logits = g.matmul_bt(states, table);
        let bias = g.param(self.parts.text_bias.expect("text output requires a bias"));
        g.add_row(logits, bias)
    }

    /// Decoder inputs for teacher forcing: the zero go frame followed by the
    /// last target frame of every previous group of `r`.
    pub fn teacher_inputs(&self, target: &Tensor) -> Tensor {
        let r = self.config.reduction_factor;
        let l = target.rows().div_ceil(r);
        let mut out = Tensor::zeros(l, target.cols());
        for i in 1..l {
            out.row_mut(i).copy_from_slice(target.row(i * r - 1));
        }
        out
    }

    fn normalize_frames(&self, frames: &Tensor) -> Tensor {
        let mut out = frames.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mel_mean).zip(&self.mel_std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    fn denormalize(&self, g: &mut Graph, x: Var) -> Var {
        let rows = g.shape(x).0;
        let tile = |v: &[f64]| Tensor::from_rows(&vec![v.to_vec(); rows]);
        let std = g.constant(tile(&self.mel_std));
        let mean = g.constant(tile(&self.mel_mean));
        let y = g.mul(x, std);
        g.add(y, mean)
    }

    /// Speech decoder pre-net: `[L, n_mels]` log-mel inputs → `[L, d_model]`.
    pub fn speech_decoder_prenet(&self, g: &mut Graph, frames: &Tensor, spk: &[f64]) -> Result<Var> {
        let net = self.parts.dec_prenet.ok_or(Error::Config("model has no speech output".into()))?;
        let n = self.config.n_mels;
        if frames.cols() != n || frames.rows() == 0 {
            return Err(Error::ShapeMismatch { context: "decoder frames", expected: (frames.rows().max(1), n), found: frames.shape() });
        }
        if spk.len() != self.config.d_spk {
            return Err(Error::ShapeMismatch { context: "speaker embedding", expected: (1, self.config.d_spk), found: (1, spk.len()) });
        }
        let p = self.config.prenet_dropout;
        let x = g.constant(self.normalize_frames(frames));
        let h = net.fc1.forward(g, x);
        let h = g.relu(h);
        let h = g.prenet_dropout(h, p);
        let h = net.fc2.forward(g, h);
        let h = g.relu(h);
        let h = g.prenet_dropout(h, p);
        let h = net.fc3.forward(g, h);
        let s = g.constant(Tensor::from_rows(&vec![spk.to_vec(); frames.rows()]));
        let cat = g.concat_cols(&[h, s]);
        let h = net.spk.forward(g, cat);
        Ok(g.relu(h))
    }

    /// Full speech decoder pass over `frames` (see [`Model::teacher_inputs`]).
    pub fn speech_decode(
        &self,
        g: &mut Graph,
        enc: &EncoderOutput,
        frames: &Tensor,
        spk: &[f64],
        task: TaskId,
        keep_attention: bool,
    ) -> Result<SpeechOutput> {
        if !task.speech_output() {
            return Err(Error::Config(format!("{} has no speech output", task.name())));
        }
        let stack = self.decoder_for(task)?;
        let x = self.speech_decoder_prenet(g, frames, spk)?;
        let x = self.add_positions(g, x);
        let l = frames.rows();
        let mut maps = Vec::new();
        let keep = keep_attention.then_some(&mut maps);
        let h = stack.forward(g, x, enc.states, &causal_mask(l), None, self.config.dropout, keep);
        let (before, after, stop_logits) = self.speech_postnet(g, h);
        Ok(SpeechOutput { before, after, stop_logits, attention: maps })
    }

    /// `(mel_before, mel_after, stop_logits)` in log-mel units.
    pub fn speech_postnet(&self, g: &mut Graph, states: Var) -> (Var, Var, Var) {
        let net = self.parts.postnet.as_ref().expect("speech output requires a postnet");
        let r = self.config.reduction_factor;
        let n = self.config.n_mels;
        let l = g.shape(states).0;
        let before = net.mel.forward(g, states);
        let before = g.reshape(before, l * r, n);
        let mut res = before;
        for (i, conv) in net.convs.iter().enumerate() {
            res = conv.forward(g, res);
            if i + 1 < net.convs.len() {
                res = g.tanh(res);
            }
        }
        let after = g.add(before, res);
        let stop = net.stop.forward(g, states);
        let stop = g.reshape(stop, l * r, 1);
        (self.denormalize(g, before), self.denormalize(g, after), stop)
    }

    /// Parameter ids the forward pass of `task` reads.
    pub fn params_used_by(&self, task: TaskId) -> Result<Vec<ParamId>> {
        self.check_task(task)?;
        let mut groups = vec![ParamGroup::Encoder, ParamGroup::TaskFusion];
        match (task.speech_input(), task.speech_output()) {
            (true, false) => groups.extend([ParamGroup::SpeechEncoderPrenet, ParamGroup::TextEmbedding, ParamGroup::TextDecoderPostnet, ParamGroup::CtcHead]),
            (false, true) => groups.extend([ParamGroup::TextEmbedding, ParamGroup::SpeechDecoderPrenet, ParamGroup::SpeechDecoderPostnet]),
            _ => groups.extend([ParamGroup::SpeechEncoderPrenet, ParamGroup::SpeechDecoderPrenet, ParamGroup::SpeechDecoderPostnet]),
        }
        groups.push(match self.config.decoder_topology {
            DecoderTopology::Shared => ParamGroup::Decoder,
            DecoderTopology::YDecoder if task.speech_output() => ParamGroup::SpeechDecoder,
            DecoderTopology::YDecoder => ParamGroup::TextDecoder,
        });
        Ok(self.params_in(&groups))
    }
}

fn build(c: &ModelConfig, store: &mut ParamStore, seed: u64) -> Parts {
    let mut init = Init::new(store, seed);
    let d = c.d_model;

    let speech_prenet = c.needs_speech_input().then(|| {
        let g = ParamGroup::SpeechEncoderPrenet;
        let mut c_in = 1;
        let convs = c
            .conv_kernels
            .iter()
            .zip(&c.conv_strides)
            .enumerate()
            .map(|(i, (&kernel, &stride))| {
                let spec = ConvSpec { c_in, c_out: c.conv_channels, kernel, stride, pad: 0 };
                c_in = c.conv_channels;
                init.conv(&format!("speech_prenet.conv.{i}"), g, spec, false)
            })
            .collect();
        SpeechPrenet {
            convs,
            ln: init.layer_norm("speech_prenet.ln", g, c.conv_channels),
            proj: init.linear("speech_prenet.proj", g, c.conv_channels, d, true),
        }
    });

    let embedding = (c.needs_text_input() || c.needs_text_output()).then(|| {
        let t = init.normal(c.vocab_size, d, 1.0 / math::sqrt(d as f64));
        init.add("text_embedding.table", ParamGroup::TextEmbedding, t)
    });
    let text_bias = c
        .needs_text_output()
        .then(|| init.add("text_postnet.bias", ParamGroup::TextDecoderPostnet, Tensor::zeros(1, c.vocab_size)));

    let encoder = init.encoder_stack("encoder", ParamGroup::Encoder, c.enc_layers, d, c.d_ffn, c.heads);

    let fusion = c.has_fusion().then(|| {
        let g = ParamGroup::TaskFusion;
        let t = init.normal(c.tasks.len(), c.d_task, 1.0);
        Fusion {
            table: init.add("task_fusion.table", g, t),
            proj: init.linear("task_fusion.proj", g, d + c.d_task, d, true),
        }
    });

    let dec = |init: &mut Init, name: &str, g| init.decoder_stack(name, g, c.dec_layers, d, c.d_ffn, c.heads);
    let (decoder, text_decoder, speech_decoder) = match c.decoder_topology {
        DecoderTopology::Shared => (Some(dec(&mut init, "decoder", ParamGroup::Decoder)), None, None),
        DecoderTopology::YDecoder => (
            None,
            c.needs_text_output().then(|| dec(&mut init, "text_decoder", ParamGroup::TextDecoder)),
            c.needs_speech_output().then(|| dec(&mut init, "speech_decoder", ParamGroup::SpeechDecoder)),
        ),
    };

    let (dec_prenet, postnet) = if c.needs_speech_output() {
        let g = ParamGroup::SpeechDecoderPrenet;
        let u = c.dec_prenet_units;
        let prenet = SpeechDecoderPrenet {
            fc1: init.linear("speech_dec_prenet.fc1", g, c.n_mels, u, true),
            fc2: init.linear("speech_dec_prenet.fc2", g, u, u, true),
            fc3: init.linear("speech_dec_prenet.fc3", g, u, d, true),
            spk: init.linear("speech_dec_prenet.spk", g, d + c.d_spk, d, true),
        };
        let g = ParamGroup::SpeechDecoderPostnet;
        let r = c.reduction_factor;
        let (k, ch, n) = (c.postnet_kernel, c.postnet_channels, c.n_mels);
        let convs = (0..c.postnet_layers)
            .map(|i| {
                let c_in = if i == 0 { n } else { ch };
                let c_out = if i + 1 == c.postnet_layers { n } else { ch };
                let spec = ConvSpec { c_in, c_out, kernel: k, stride: 1, pad: k / 2 };
                init.conv(&format!("speech_postnet.conv.{i}"), g, spec, true)
            })
            .collect();
        let postnet = SpeechPostnet {
            mel: init.linear("speech_postnet.mel", g, d, n * r, true),
            stop: init.linear("speech_postnet.stop", g, d, r, true),
            convs,
        };
        (Some(prenet), Some(postnet))
    } else {
        (None, None)
    };

    let ctc = c.has_task(TaskId::Asr).then(|| init.linear("ctc_head.proj", ParamGroup::CtcHead, d, c.vocab_size, true));

    Parts { speech_prenet, embedding, text_bias, encoder, fusion, decoder, text_decoder, speech_decoder, dec_prenet, postnet, ctc }
}

#[cfg(test)]
mod tests;
