//! Small generated corpora with known structure, used by the training
//! property checks and the bundled fixtures.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::FrameFeatures;
use crate::error::Result;
use crate::objectives::{truncate_caption, TrainSegment, TrainingData};
use crate::tokenizer::Vocabulary;

pub const VERBS: [&str; 24] = [
    "chop", "slice", "stir", "boil", "fry", "bake", "peel", "mix", "pour", "grate", "whisk", "roast", "rinse",
    "season", "drain", "knead", "mash", "steam", "toast", "blend", "dice", "melt", "grill", "fold",
];

pub const NOUNS: [&str; 40] = [
    "onion", "garlic", "carrot", "potato", "tomato", "pepper", "dough", "batter", "sauce", "butter", "cheese",
    "pasta", "rice", "chicken", "salmon", "lettuce", "cabbage", "ginger", "lemon", "mushroom", "noodle",
    "spinach", "broth", "bacon", "apple", "beans", "celery", "cream", "egg", "flour", "herbs", "lime", "mango",
    "nuts", "olive", "pumpkin", "shrimp", "sugar", "tofu", "zucchini",
];

/// The caption-only word attached to each noun of [`NOUNS`].
pub const QUALIFIERS: [&str; 40] = [
    "diced", "minced", "grated", "mashed", "ripe", "roasted", "risen", "smooth", "thick", "soft", "aged", "fresh",
    "fluffy", "tender", "pink", "crisp", "shredded", "spicy", "zested", "sliced", "boiled", "wilted", "clear",
    "crispy", "peeled", "soaked", "chopped", "whipped", "beaten", "sifted", "dried", "juiced", "cubed", "toasted",
    "green", "pureed", "cleaned", "brown", "firm", "trimmed",
];

pub const FILLERS: [&str; 24] = [
    "so", "um", "okay", "now", "just", "then", "you", "want", "and", "really", "nice", "here", "get", "that",
    "right", "alright", "go", "gonna", "see", "like", "this", "well", "little", "bit",
];

pub const ORDINALS: [&str; 6] = ["first", "second", "third", "fourth", "fifth", "sixth"];

pub const TOPICS: [&str; 8] = ["pancake", "salad", "curry", "soup", "pizza", "sushi", "taco", "omelet"];

fn pick<'a, R: Rng>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

fn fillers<R: Rng>(rng: &mut R, lo: usize, hi: usize) -> Vec<&'static str> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| pick(rng, &FILLERS)).collect()
}

/// A vocabulary large enough that every generated word becomes one token.
fn word_vocabulary<'a>(texts: impl IntoIterator<Item = &'a String> + Clone) -> Result<Vocabulary> {
    Vocabulary::train(texts, 4000)
}

fn random_frames<R: Rng>(rng: &mut R, count: usize, dim: usize) -> FrameFeatures {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    FrameFeatures::new(dim, (0..count * dim).map(|_| normal.sample(rng) as f32).collect()).expect("whole frames")
}

#[derive(Debug, Clone)]
pub struct Memorization {
    pub vocab: Vocabulary,
    pub segments: Vec<TrainSegment>,
    pub captions: Vec<String>,
}

/// `n` unrelated (ASR, frames, caption) triples over a small word list.
pub fn memorization(n: usize, video_dim: usize, seed: u64) -> Result<Memorization> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<&str> = NOUNS.iter().chain(&VERBS).copied().collect();
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        let asr_len = rng.gen_range(6..=10);
        let asr: Vec<&str> = (0..asr_len).map(|_| pick(&mut rng, &words)).collect();
        let cap_len = rng.gen_range(2..=4);
        let cap: Vec<&str> = (0..cap_len).map(|_| pick(&mut rng, &words)).collect();
        let count = rng.gen_range(3..=6);
        let frames = random_frames(&mut rng, count, video_dim);
        raw.push((asr.join(" "), cap.join(" "), frames));
    }
    let texts: Vec<String> = raw.iter().flat_map(|(a, c, _)| [a.clone(), c.clone()]).collect();
    let vocab = word_vocabulary(&texts)?;
    let segments = raw
        .iter()
        .enumerate()
        .map(|(i, (asr, cap, frames))| TrainSegment {
            video: format!("mem{i:03}"),
            index: 0,
            asr: vocab.encode(asr),
            frames: Some(frames.clone()),
            caption: Some(truncate_caption(vocab.encode(cap))),
        })
        .collect();
    Ok(Memorization {
        vocab,
        segments,
        captions: raw.into_iter().map(|(_, c, _)| c).collect(),
    })
}

fn keyword_caption(verb: usize, noun: usize) -> String {
    format!("{} {} {}", VERBS[verb], NOUNS[noun], QUALIFIERS[noun])
}

/// ASR mentioning one action twice among filler words, and its caption
/// `verb noun qualifier`.
pub fn keyword_segment<R: Rng>(rng: &mut R) -> (String, String) {
    let verb = rng.gen_range(0..VERBS.len());
    let noun = rng.gen_range(0..NOUNS.len());
    let mut words = fillers(rng, 0, 2);
    words.extend(["we", VERBS[verb], "the", NOUNS[noun]]);
    words.extend(fillers(rng, 1, 2));
    words.extend([VERBS[verb], "the", NOUNS[noun]]);
    words.extend(fillers(rng, 0, 2));
    (words.join(" "), keyword_caption(verb, noun))
}

#[derive(Debug, Clone)]
pub struct KeywordTransfer {
    pub vocab: Vocabulary,
    /// Unpaired ASR segments and unpaired caption-style text.
    pub pretrain: TrainingData,
    /// Labeled (ASR, caption) pairs.
    pub finetune: TrainingData,
    pub eval: Vec<TrainSegment>,
    pub eval_refs: Vec<String>,
}

/// Captions are a deterministic function of the action repeated in the ASR.
/// The qualifier never occurs in ASR; only caption-style text shows it.
pub fn keyword_transfer(seed: u64, unpaired: usize, labeled: usize, eval: usize) -> Result<KeywordTransfer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let asr_only: Vec<String> = (0..unpaired).map(|_| keyword_segment(&mut rng).0).collect();
    let caps_only: Vec<String> =
        (0..unpaired).map(|_| keyword_caption(rng.gen_range(0..VERBS.len()), rng.gen_range(0..NOUNS.len()))).collect();
    let labeled_pairs: Vec<(String, String)> = (0..labeled).map(|_| keyword_segment(&mut rng)).collect();
    let eval_pairs: Vec<(String, String)> = (0..eval).map(|_| keyword_segment(&mut rng)).collect();

    let mut vocab_texts: Vec<String> = asr_only.iter().chain(&caps_only).cloned().collect();
    vocab_texts.extend(VERBS.iter().chain(&NOUNS).chain(&QUALIFIERS).chain(&FILLERS).map(|w| format!("{w} {w}")));
    let vocab = word_vocabulary(&vocab_texts)?;

    let segment = |video: String, asr: &str, cap: Option<&str>| TrainSegment {
        video,
        index: 0,
        asr: vocab.encode(asr),
        frames: None,
        caption: cap.map(|c| truncate_caption(vocab.encode(c))),
    };
    let pretrain = TrainingData {
        segments: asr_only.iter().enumerate().map(|(i, a)| segment(format!("pre{i:05}"), a, None)).collect(),
        cap_texts: caps_only.iter().map(|c| vocab.encode(c)).collect(),
    };
    let finetune = TrainingData {
        segments: labeled_pairs
            .iter()
            .enumerate()
            .map(|(i, (a, c))| segment(format!("ft{i:04}"), a, Some(c)))
            .collect(),
        cap_texts: Vec::new(),
    };
    let eval_segments = eval_pairs
        .iter()
        .enumerate()
        .map(|(i, (a, c))| segment(format!("ev{i:04}"), a, Some(c)))
        .collect();
    Ok(KeywordTransfer {
        vocab,
        pretrain,
        finetune,
        eval: eval_segments,
        eval_refs: eval_pairs.into_iter().map(|(_, c)| c).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct OrdinalVideos {
    pub vocab: Vocabulary,
    pub train: TrainingData,
    pub val: TrainingData,
}

/// Videos of `segments` steps. Step `k` says its ordinal and the dish in the
/// ASR; its frames carry a one-hot of `k` and of the dish plus Gaussian noise.
pub fn ordinal_videos(seed: u64, train_videos: usize, val_videos: usize, segments: usize, video_dim: usize) -> Result<OrdinalVideos> {
    assert!(segments <= ORDINALS.len() && video_dim >= ORDINALS.len() + TOPICS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    let make_video = |rng: &mut ChaCha8Rng, id: String| -> Vec<(String, TrainSegment, String)> {
        let topic = rng.gen_range(0..TOPICS.len());
        (0..segments)
            .map(|k| {
                let mut words = fillers(rng, 1, 3);
                words.extend(["the", ORDINALS[k], "step", "for", "the", TOPICS[topic]]);
                words.extend(fillers(rng, 0, 2));
                let n_frames = rng.gen_range(3..=5);
                let mut data = Vec::with_capacity(n_frames * video_dim);
                for _ in 0..n_frames {
                    for c in 0..video_dim {
                        let signal = if c == k || c == ORDINALS.len() + topic { 1.0 } else { 0.0 };
                        data.push((signal + noise.sample(rng)) as f32);
                    }
                }
                let seg = TrainSegment {
                    video: id.clone(),
                    index: k,
                    asr: Vec::new(),
                    frames: Some(FrameFeatures::new(video_dim, data).expect("whole frames")),
                    caption: None,
                };
                (words.join(" "), seg, format!("{} {}", ORDINALS[k], TOPICS[topic]))
            })
            .collect()
    };
    let train_raw: Vec<_> = (0..train_videos).flat_map(|v| make_video(&mut rng, format!("tr{v:04}"))).collect();
    let val_raw: Vec<_> = (0..val_videos).flat_map(|v| make_video(&mut rng, format!("va{v:04}"))).collect();
    let mut texts: Vec<String> = train_raw.iter().chain(&val_raw).flat_map(|(a, _, c)| [a.clone(), c.clone()]).collect();
    texts.extend(FILLERS.iter().map(|w| format!("{w} {w}")));
    let vocab = word_vocabulary(&texts)?;
    let finish = |raw: Vec<(String, TrainSegment, String)>| TrainingData {
        cap_texts: raw.iter().map(|(_, _, c)| vocab.encode(c)).collect(),
        segments: raw
            .into_iter()
            .map(|(asr, mut seg, _)| {
                seg.asr = vocab.encode(&asr);
                seg
            })
            .collect(),
    };
    Ok(OrdinalVideos {
        train: finish(train_raw),
        val: finish(val_raw),
        vocab,
    })
}
