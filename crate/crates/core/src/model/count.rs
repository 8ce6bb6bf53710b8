use alloc::collections::BTreeMap;

use super::config::{DecoderTopology, ModelConfig, TaskId};
use crate::params::ParamGroup;

/// Closed-form parameter counts per group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub by_group: BTreeMap<ParamGroup, usize>,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.by_group.values().sum()
    }

    pub fn get(&self, group: ParamGroup) -> usize {
        self.by_group.get(&group).copied().unwrap_or(0)
    }

    /// Encoder and decoder stacks only.
    pub fn backbone(&self) -> usize {
        self.by_group.iter().filter(|(g, _)| g.is_backbone()).map(|(_, n)| n).sum()
    }
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn layer_norm(d: usize) -> usize {
    2 * d
}

fn attention(d: usize) -> usize {
    4 * linear(d, d)
}

fn ffn(d: usize, f: usize) -> usize {
    linear(d, f) + linear(f, d)
}

fn encoder_stack(c: &ModelConfig) -> usize {
    let (d, f) = (c.d_model, c.d_ffn);
    c.enc_layers * (2 * layer_norm(d) + attention(d) + ffn(d, f)) + layer_norm(d)
}

fn decoder_stack(c: &ModelConfig) -> usize {
    let (d, f) = (c.d_model, c.d_ffn);
    c.dec_layers * (3 * layer_norm(d) + 2 * attention(d) + ffn(d, f)) + layer_norm(d)
}

/// Parameter count of the model `c` describes, without building it.
pub fn count_params(c: &ModelConfig) -> ParamCounts {
    let mut by_group = BTreeMap::new();
    let d = c.d_model;
    let mut put = |g, n| {
        if n > 0 {
            *by_group.entry(g).or_insert(0) += n;
        }
    };

    if c.needs_speech_input() {
        let ch = c.conv_channels;
        let convs: usize = c.conv_kernels.iter().enumerate().map(|(i, &k)| k * if i == 0 { 1 } else { ch } * ch).sum();
        put(ParamGroup::SpeechEncoderPrenet, convs + layer_norm(ch) + linear(ch, d));
    }
    if c.needs_text_input() || c.needs_text_output() {
        put(ParamGroup::TextEmbedding, c.vocab_size * d);
    }
    if c.needs_text_output() {
        put(ParamGroup::TextDecoderPostnet, c.vocab_size);
    }
    put(ParamGroup::Encoder, encoder_stack(c));
    if c.has_fusion() {
        put(ParamGroup::TaskFusion, linear(d + c.d_task, d) + c.tasks.len() * c.d_task);
    }
    match c.decoder_topology {
        DecoderTopology::Shared => put(ParamGroup::Decoder, decoder_stack(c)),
        DecoderTopology::YDecoder => {
            if c.needs_text_output() {
                put(ParamGroup::TextDecoder, decoder_stack(c));
            }
            if c.needs_speech_output() {
                put(ParamGroup::SpeechDecoder, decoder_stack(c));
            }
        }
    }
    if c.needs_speech_output() {
        let u = c.dec_prenet_units;
        put(ParamGroup::SpeechDecoderPrenet, linear(c.n_mels, u) + linear(u, u) + linear(u, d) + linear(d + c.d_spk, d));
        let (k, ch, n, r) = (c.postnet_kernel, c.postnet_channels, c.n_mels, c.reduction_factor);
        let convs: usize = (0..c.postnet_layers)
            .map(|i| {
                let c_in = if i == 0 { n } else { ch };
                let c_out = if i + 1 == c.postnet_layers { n } else { ch };
                linear(k * c_in, c_out)
            })
            .sum();
        put(ParamGroup::SpeechDecoderPostnet, linear(d, n * r) + linear(d, r) + convs);
    }
    if c.has_task(TaskId::Asr) {
        put(ParamGroup::CtcHead, linear(d, c.vocab_size));
    }
    ParamCounts { by_group }
}
