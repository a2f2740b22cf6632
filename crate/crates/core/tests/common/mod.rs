#![allow(dead_code)]

use mmcap_core::corpus::{make_batch, Batch, EncoderInput, FrameFeatures};
use mmcap_core::objectives::{TrainSegment, TrainingData};
use mmcap_core::model::{init_params, DecoderInput, ModelConfig, ModelSize};
use mmcap_core::tokenizer::{Style, BOS, EOS};
use mmcap_tensor::{ParamStore, Scalar, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 16;
pub const VIDEO_DIM: usize = 5;

pub fn tiny_config(size: ModelSize) -> ModelConfig {
    let mut c = ModelConfig::preset(size, VOCAB).with_width(8, 2);
    c.max_text_positions = 16;
    c.max_video_positions = 8;
    c.video_dim = VIDEO_DIM;
    c.dropout = 0.0;
    c
}

/// Parameters with every tensor (gains and biases included) randomized so
/// no path is trivially zero.
pub fn random_params<T: Scalar>(config: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: ParamStore<T> = init_params(config, &mut rng).unwrap();
    for (_, t) in p.iter_mut() {
        for x in t.data_mut() {
            *x = T::from_f64(rng.gen_range(-0.5..0.5));
        }
    }
    p
}

pub fn frames(n: usize, seed: u64) -> FrameFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FrameFeatures::new(VIDEO_DIM, (0..n * VIDEO_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn input(tokens: &[u32], n_frames: usize, seed: u64) -> EncoderInput {
    EncoderInput {
        tokens: tokens.to_vec(),
        style: Style::Asr,
        frames: (n_frames > 0).then(|| frames(n_frames, seed)),
    }
}

/// Two examples of different lengths; the second has no video.
pub fn mixed_batch() -> Batch {
    make_batch(&[input(&[6, 7, 8, 9], 3, 1), input(&[10, 11], 0, 2)], VIDEO_DIM)
}

pub fn caption_rows(captions: &[&[u32]]) -> (DecoderInput, Vec<usize>, Vec<bool>) {
    let inputs: Vec<Vec<u32>> = captions.iter().map(|c| std::iter::once(BOS).chain(c.iter().copied()).collect()).collect();
    let dec = DecoderInput::from_rows(&inputs, Style::Cap);
    let mut targets = vec![0usize; dec.batch * dec.len];
    for (b, c) in captions.iter().enumerate() {
        for (i, &t) in c.iter().chain(std::iter::once(&EOS)).enumerate() {
            targets[b * dec.len + i] = t as usize;
        }
    }
    let mask = dec.mask.clone();
    (dec, targets, mask)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn rows<T: Copy>(data: &[T], width: usize, keep: impl Fn(usize) -> bool) -> Vec<T> {
    data.chunks(width).enumerate().filter(|(r, _)| keep(*r)).flat_map(|(_, c)| c.to_vec()).collect()
}

pub fn tape<T: Scalar>() -> Tape<T> {
    Tape::new()
}

/// `videos` videos of `segments` framed, captioned segments over token ids
/// 6..VOCAB, plus as many unpaired caption texts.
pub fn toy_data(videos: usize, segments: usize, seed: u64) -> TrainingData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = |lo: usize, hi: usize, rng: &mut ChaCha8Rng| -> Vec<u32> {
        let n = rng.gen_range(lo..=hi);
        (0..n).map(|_| rng.gen_range(6..VOCAB as u32)).collect()
    };
    let mut data = TrainingData::default();
    for v in 0..videos {
        for k in 0..segments {
            let n_frames = rng.gen_range(1..=4);
            data.segments.push(TrainSegment {
                video: format!("v{v}"),
                index: k,
                asr: text(2, 7, &mut rng),
                frames: Some(frames(n_frames, rng.gen())),
                caption: Some(text(1, 4, &mut rng)),
            });
            data.cap_texts.push(text(2, 5, &mut rng));
        }
    }
    data
}

pub mod oracle;
