use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The tasks a model can be conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "ASR")]
    Asr,
    #[serde(rename = "TTS")]
    Tts,
    #[serde(rename = "VC")]
    Vc,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Asr, TaskId::Tts, TaskId::Vc];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Asr => "ASR",
            TaskId::Tts => "TTS",
            TaskId::Vc => "VC",
        }
    }

    pub fn speech_input(self) -> bool {
        matches!(self, TaskId::Asr | TaskId::Vc)
    }

    pub fn speech_output(self) -> bool {
        matches!(self, TaskId::Tts | TaskId::Vc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPosition {
    /// Task vector joins the encoder output (default).
    PostEncoder,
    /// Task vector joins the pre-net output, before the encoder.
    PreEncoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderTopology {
    /// One decoder for every task, conditioned through task fusion.
    Shared,
    /// Separate text and speech decoders over a shared encoder; no fusion.
    YDecoder,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub n_mels: usize,
    pub d_task: usize,
    pub d_spk: usize,
    pub tasks: Vec<TaskId>,
    pub fusion_position: FusionPosition,
    pub decoder_topology: DecoderTopology,
    pub reduction_factor: usize,
    pub dropout: f64,
    /// Dropout inside the speech decoder pre-net, active whenever training.
    pub prenet_dropout: f64,
    /// Channels of the waveform convolution stack.
    pub conv_channels: usize,
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    /// Hidden width of the speech decoder pre-net.
    pub dec_prenet_units: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub postnet_layers: usize,
    /// Feed the CTC head with the task-fused encoder output (else raw).
    pub ctc_on_fused: bool,
}

impl ModelConfig {
    /// Base-size configuration: 12 encoder and 6 decoder blocks of width 768.
    pub fn base() -> Self {
        Self {
            d_model: 768,
            d_ffn: 3072,
            enc_layers: 12,
            dec_layers: 6,
            heads: 12,
            vocab_size: 84,
            n_mels: 80,
            d_task: 128,
            d_spk: 512,
            tasks: vec![TaskId::Asr, TaskId::Tts],
            fusion_position: FusionPosition::PostEncoder,
            decoder_topology: DecoderTopology::Shared,
            reduction_factor: 1,
            dropout: 0.1,
            prenet_dropout: 0.5,
            conv_channels: 512,
            conv_kernels: vec![10, 3, 3, 3, 3, 2],
            conv_strides: vec![5, 2, 2, 2, 2, 2],
            dec_prenet_units: 256,
            postnet_channels: 256,
            postnet_kernel: 5,
            postnet_layers: 5,
            ctc_on_fused: true,
        }
    }

    pub fn base_y_decoder() -> Self {
        Self { decoder_topology: DecoderTopology::YDecoder, ..Self::base() }
    }

    /// Desk-scale configuration used by the tests.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            d_ffn: 256,
            enc_layers: 3,
            dec_layers: 2,
            heads: 4,
            vocab_size: 16,
            d_task: 16,
            d_spk: 32,
            dropout: 0.0,
            prenet_dropout: 0.5,
            conv_channels: 32,
            dec_prenet_units: 64,
            postnet_channels: 64,
            ..Self::base()
        }
    }

    pub fn with_tasks(mut self, tasks: &[TaskId]) -> Self {
        self.tasks = tasks.to_vec();
        self
    }

    pub fn has_task(&self, task: TaskId) -> bool {
        self.tasks.contains(&task)
    }

    /// Index of `task` in the task-embedding table.
    pub fn task_index(&self, task: TaskId) -> Result<usize> {
        self.tasks.iter().position(|&t| t == task).ok_or(Error::UnknownTask(task))
    }

    pub fn needs_speech_input(&self) -> bool {
        self.tasks.iter().any(|t| t.speech_input())
    }

    pub fn needs_speech_output(&self) -> bool {
        self.tasks.iter().any(|t| t.speech_output())
    }

    pub fn needs_text_input(&self) -> bool {
        self.has_task(TaskId::Tts)
    }

    pub fn needs_text_output(&self) -> bool {
        self.has_task(TaskId::Asr)
    }

    /// Task fusion exists only when one decoder serves several tasks.
    pub fn has_fusion(&self) -> bool {
        self.decoder_topology == DecoderTopology::Shared && self.tasks.len() > 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Smallest waveform length the convolution stack accepts.
    pub fn receptive_field(&self) -> usize {
        self.conv_kernels.iter().zip(&self.conv_strides).rev().fold(1, |r, (&k, &s)| (r - 1) * s + k)
    }

    /// Number of encoder frames produced from `samples` waveform samples.
    pub fn speech_frames(&self, samples: usize) -> Option<usize> {
        let mut len = samples;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides) {
            if len < k {
                return None;
            }
            len = (len - k) / s + 1;
        }
        Some(len)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail("d_model must be divisible by heads");
        }
        if self.d_task == 0 {
            return fail("d_task must be positive");
        }
        if self.tasks.is_empty() {
            return fail("task set must not be empty");
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(Error::Config(format!("task {} listed twice", t.name())));
            }
        }
        if self.reduction_factor == 0 {
            return fail("reduction_factor must be at least 1");
        }
        if self.conv_kernels.len() != self.conv_strides.len() || self.conv_kernels.is_empty() {
            return fail("conv_kernels and conv_strides must be non-empty and equally long");
        }
        if self.conv_kernels.iter().chain(&self.conv_strides).any(|&v| v == 0) {
            return fail("convolution kernels and strides must be positive");
        }
        if self.postnet_layers == 0 || self.postnet_kernel % 2 == 0 {
            return fail("postnet needs at least one layer and an odd kernel");
        }
        if self.vocab_size <= crate::textproc::N_SPECIALS {
            return fail("vocab_size must exceed the four special symbols");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.prenet_dropout) {
            return fail("dropout rates must lie in [0, 1)");
        }
        Ok(())
    }
}
