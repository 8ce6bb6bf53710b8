//! Named parameter registry and gradient buffers.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse parameter groups. Freezing and per-component counting work at this
/// granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    SpeechEncoderPrenet,
    TextEmbedding,
    Encoder,
    TaskFusion,
    /// The single decoder stack of the shared topology.
    Decoder,
    /// Text-output decoder stack of the Y-decoder topology.
    TextDecoder,
    /// Speech-output decoder stack of the Y-decoder topology.
    SpeechDecoder,
    SpeechDecoderPrenet,
    SpeechDecoderPostnet,
    TextDecoderPostnet,
    CtcHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 11] = [
        ParamGroup::SpeechEncoderPrenet,
        ParamGroup::TextEmbedding,
        ParamGroup::Encoder,
        ParamGroup::TaskFusion,
        ParamGroup::Decoder,
        ParamGroup::TextDecoder,
        ParamGroup::SpeechDecoder,
        ParamGroup::SpeechDecoderPrenet,
        ParamGroup::SpeechDecoderPostnet,
        ParamGroup::TextDecoderPostnet,
        ParamGroup::CtcHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::SpeechEncoderPrenet => "speech_encoder_prenet",
            ParamGroup::TextEmbedding => "text_embedding",
            ParamGroup::Encoder => "encoder",
            ParamGroup::TaskFusion => "task_fusion",
            ParamGroup::Decoder => "decoder",
            ParamGroup::TextDecoder => "text_decoder",
            ParamGroup::SpeechDecoder => "speech_decoder",
            ParamGroup::SpeechDecoderPrenet => "speech_decoder_prenet",
            ParamGroup::SpeechDecoderPostnet => "speech_decoder_postnet",
            ParamGroup::TextDecoderPostnet => "text_decoder_postnet",
            ParamGroup::CtcHead => "ctc_head",
        }
    }

    /// Encoder and decoder stacks.
    pub fn is_backbone(self) -> bool {
        matches!(
            self,
            ParamGroup::Encoder
                | ParamGroup::Decoder
                | ParamGroup::TextDecoder
                | ParamGroup::SpeechDecoder
        )
    }

    /// Resolves a group name or one of the aliases `backbone`, `auxiliary`.
    pub fn select(name: &str) -> Result<Vec<ParamGroup>> {
        match name {
            "backbone" => Ok(Self::ALL.iter().copied().filter(|g| g.is_backbone()).collect()),
            "auxiliary" => Ok(Self::ALL.iter().copied().filter(|g| !g.is_backbone()).collect()),
            _ => Self::ALL
                .iter()
                .copied()
                .find(|g| g.name() == name)
                .map(|g| alloc::vec![g])
                .ok_or_else(|| Error::Config(alloc::format!("unknown parameter group {name:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name: name.to_string(), group, value });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn numel_by_group(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.group).or_insert(0) += p.value.len();
        }
        out
    }
}

/// Gradient slots indexed by [`ParamId`]; `None` means "no contribution".
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(n_params: usize) -> Self {
        Self { slots: (0..n_params).map(|_| None).collect() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor, alpha: f64) {
        match &mut self.slots[id.0] {
            Some(t) => t.add_scaled(g, alpha),
            slot @ None => {
                let mut t = g.clone();
                if alpha != 1.0 {
                    t.scale_in_place(alpha);
                }
                *slot = Some(t);
            }
        }
    }

    pub(crate) fn put(&mut self, id: ParamId, g: Tensor) {
        match &mut self.slots[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, other: &Grads, alpha: f64) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g, alpha);
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.slots.iter_mut().flatten() {
            t.scale_in_place(alpha);
        }
    }

    pub fn clear(&mut self, id: ParamId) {
        self.slots[id.0] = None;
    }

    pub fn sum_sq(&self) -> f64 {
        self.slots.iter().flatten().map(Tensor::sum_sq).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
