use std::collections::BTreeMap;

use crate::corpus::{Example, FrameFeatures, MAX_TEXT_TOKENS};
use crate::tokenizer::Vocabulary;

/// A tokenized segment. `asr` and `caption` are already truncated to what
/// the model can read.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSegment {
    pub video: String,
    pub index: usize,
    pub asr: Vec<u32>,
    pub frames: Option<FrameFeatures>,
    pub caption: Option<Vec<u32>>,
}

impl TrainSegment {
    pub fn has_frames(&self) -> bool {
        self.frames.as_ref().is_some_and(|f| !f.is_empty())
    }
}

/// Everything the samplers draw from: segments (ASR, optional frames and
/// captions) and unpaired caption-style text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingData {
    pub segments: Vec<TrainSegment>,
    pub cap_texts: Vec<Vec<u32>>,
}

/// Caption tokens leave room for BOS or EOS.
pub fn truncate_caption(mut ids: Vec<u32>) -> Vec<u32> {
    ids.truncate(MAX_TEXT_TOKENS - 1);
    ids
}

pub fn truncate_text(mut ids: Vec<u32>) -> Vec<u32> {
    ids.truncate(MAX_TEXT_TOKENS);
    ids
}

impl TrainingData {
    pub fn push_example(&mut self, example: Example, vocab: &Vocabulary) {
        match example {
            Example::Text(t) => self.cap_texts.push(truncate_text(vocab.encode(&t))),
            Example::Segment(s) => self.segments.push(TrainSegment {
                asr: truncate_text(vocab.encode(&s.segment.text())),
                caption: s.caption.as_deref().map(|c| truncate_caption(vocab.encode(c))),
                frames: s.frames,
                video: s.segment.video_id,
                index: s.segment.index,
            }),
        }
    }

    /// Segment indices grouped per video and ordered by segment index.
    pub fn videos(&self) -> Vec<Vec<usize>> {
        let mut by_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.segments.iter().enumerate() {
            by_video.entry(&s.video).or_default().push(i);
        }
        by_video
            .into_values()
            .map(|mut v| {
                v.sort_by_key(|&i| self.segments[i].index);
                v
            })
            .collect()
    }
}
