use rand::seq::SliceRandom;
use rand::Rng;

use super::frames::{FrameFeatures, MAX_FRAMES};
use crate::tokenizer::{Style, CLS, PAD};

pub const MAX_TEXT_TOKENS: usize = 240;
pub const BATCH_SIZE: usize = 32;

/// One tokenized encoder input. `tokens` excludes CLS.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub tokens: Vec<u32>,
    pub style: Style,
    pub frames: Option<FrameFeatures>,
}

impl EncoderInput {
    pub fn text(tokens: Vec<u32>, style: Style) -> Self {
        Self {
            tokens,
            style,
            frames: None,
        }
    }
}

/// Right-padded encoder batch. Text rows start with CLS; masks are true on
/// real positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub text_len: usize,
    pub text_ids: Vec<u32>,
    pub text_mask: Vec<bool>,
    pub styles: Vec<Style>,
    pub video_len: usize,
    pub video_dim: usize,
    pub frames: Vec<f32>,
    pub video_mask: Vec<bool>,
}

impl Batch {
    pub fn text_row(&self, b: usize) -> &[u32] {
        &self.text_ids[b * self.text_len..(b + 1) * self.text_len]
    }

    pub fn text_lengths(&self) -> Vec<usize> {
        self.text_mask.chunks(self.text_len.max(1)).map(|r| r.iter().filter(|&&m| m).count()).collect()
    }

    pub fn video_lengths(&self) -> Vec<usize> {
        if self.video_len == 0 {
            return vec![0; self.size];
        }
        self.video_mask.chunks(self.video_len).map(|r| r.iter().filter(|&&m| m).count()).collect()
    }

    /// Per example: does it carry any frames.
    pub fn has_video(&self) -> Vec<bool> {
        self.video_lengths().into_iter().map(|n| n > 0).collect()
    }
}

/// Pads a list of inputs into one batch, truncating text to the first
/// [`MAX_TEXT_TOKENS`] subwords and video to the first [`MAX_FRAMES`] frames.
/// `video_dim` fixes the frame width when no example has frames.
pub fn make_batch(examples: &[EncoderInput], video_dim: usize) -> Batch {
    let size = examples.len();
    let text_len = examples.iter().map(|e| e.tokens.len().min(MAX_TEXT_TOKENS)).max().unwrap_or(0) + 1;
    let frame_count = |e: &EncoderInput| e.frames.as_ref().map_or(0, |f| f.len().min(MAX_FRAMES));
    let video_len = examples.iter().map(frame_count).max().unwrap_or(0);
    let video_dim = examples
        .iter()
        .filter_map(|e| e.frames.as_ref())
        .find(|f| !f.is_empty())
        .map_or(video_dim, FrameFeatures::dim);

    let mut text_ids = vec![PAD; size * text_len];
    let mut text_mask = vec![false; size * text_len];
    let mut frames = vec![0.0f32; size * video_len * video_dim];
    let mut video_mask = vec![false; size * video_len];
    for (b, e) in examples.iter().enumerate() {
        let row = b * text_len;
        text_ids[row] = CLS;
        text_mask[row] = true;
        for (i, &t) in e.tokens.iter().take(MAX_TEXT_TOKENS).enumerate() {
            text_ids[row + 1 + i] = t;
            text_mask[row + 1 + i] = true;
        }
        if let Some(f) = &e.frames {
            assert_eq!(f.dim(), video_dim, "frame width differs within a batch");
            let n = frame_count(e);
            let base = b * video_len;
            frames[base * video_dim..(base + n) * video_dim].copy_from_slice(&f.data()[..n * video_dim]);
            video_mask[base..base + n].iter_mut().for_each(|m| *m = true);
        }
    }
    Batch {
        size,
        text_len,
        text_ids,
        text_mask,
        styles: examples.iter().map(|e| e.style).collect(),
        video_len,
        video_dim,
        frames,
        video_mask,
    }
}

/// Endless shuffled pass over a corpus: each full pass uses a fresh
/// permutation drawn from the caller's RNG.
#[derive(Debug, Clone)]
pub struct Cycler {
    len: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn reset(&mut self) {
        self.order.clear();
        self.cursor = 0;
    }

    /// Next `n` corpus indices. Panics on an empty corpus.
    pub fn take<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Vec<usize> {
        assert!(self.len > 0, "cannot cycle an empty corpus");
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const T: bool = true;
    const F: bool = false;

    fn text(len: usize) -> EncoderInput {
        EncoderInput::text((10..10 + len as u32).collect(), Style::Asr)
    }

    #[test]
    fn pads_to_longest_with_cls() {
        let b = make_batch(&[text(3), text(5)], 4);
        assert_eq!(b.text_len, 6);
        assert_eq!(&b.text_mask[..6], &[T, T, T, T, F, F]);
        assert_eq!(&b.text_mask[6..], &[T; 6]);
        assert_eq!(b.text_row(0), &[CLS, 10, 11, 12, PAD, PAD]);
    }

    #[test]
    fn single_example_has_no_padding() {
        let b = make_batch(&[text(4)], 4);
        assert!(b.text_mask.iter().all(|&m| m));
    }

    #[test]
    fn all_empty_video_batch_has_false_mask() {
        let mut a = text(2);
        a.frames = Some(FrameFeatures::empty(3));
        let b = make_batch(&[a, text(1)], 3);
        assert!(b.video_mask.iter().all(|&m| !m));
        assert_eq!(b.has_video(), vec![false, false]);
    }

    #[test]
    fn truncates_text_and_frames_from_the_front() {
        let mut e = text(300);
        e.frames = Some(FrameFeatures::new(2, (0..120).map(|i| i as f32).collect()).unwrap());
        let b = make_batch(&[e], 2);
        assert_eq!(b.text_len, MAX_TEXT_TOKENS + 1);
        assert_eq!(b.text_ids[1], 10);
        assert_eq!(b.video_len, MAX_FRAMES);
        assert_eq!(b.frames[0], 0.0);
        assert_eq!(b.frames[79], 79.0);
    }

    #[test]
    fn cycler_covers_each_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Cycler::new(5);
        let mut first = c.take(5, &mut rng);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.take(12, &mut rng).len(), 12);
    }

    proptest! {
        #[test]
        fn masks_cover_exactly_real_positions(
            lens in prop::collection::vec(0usize..20, 1..6),
            frames in prop::collection::vec(0usize..8, 1..6),
        ) {
            let examples: Vec<EncoderInput> = lens.iter().zip(frames.iter().cycle()).map(|(&l, &f)| {
                let mut e = text(l);
                e.frames = Some(FrameFeatures::new(2, vec![1.0; 2 * f]).unwrap());
                e
            }).collect();
            let b = make_batch(&examples, 2);
            let real_text: usize = lens.iter().map(|l| l + 1).sum();
            prop_assert_eq!(b.text_mask.iter().filter(|&&m| m).count(), real_text);
            for (id, m) in b.text_ids.iter().zip(&b.text_mask) {
                prop_assert_eq!(*m, *id != PAD);
            }
            let real_frames: usize = lens.iter().zip(frames.iter().cycle()).map(|(_, &f)| f).sum();
            prop_assert_eq!(b.video_mask.iter().filter(|&&m| m).count(), real_frames);
        }
    }
}
