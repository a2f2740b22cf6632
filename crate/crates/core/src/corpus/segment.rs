use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GAP_THRESHOLD_SECS: f64 = 2.0;
pub const MAX_SEGMENT_WORDS: usize = 320;

/// One recognized word with its start time in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedToken {
    #[serde(rename = "w")]
    pub word: String,
    #[serde(rename = "t")]
    pub start: f64,
}

impl TimedToken {
    pub fn new(word: impl Into<String>, start: f64) -> Self {
        Self {
            word: word.into(),
            start,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrSegment {
    pub video_id: String,
    pub index: usize,
    pub tokens: Vec<TimedToken>,
}

impl AsrSegment {
    pub fn start(&self) -> f64 {
        self.tokens.first().map_or(0.0, |t| t.start)
    }

    /// Start time of the last word.
    pub fn end(&self) -> f64 {
        self.tokens.last().map_or(0.0, |t| t.start)
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.word.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Splits a time-sorted token stream wherever consecutive words are more
/// than `gap` seconds apart, or the running segment reaches `max_len` words.
pub fn segment_asr(video_id: &str, tokens: &[TimedToken], gap: f64, max_len: usize) -> Result<Vec<AsrSegment>> {
    if max_len == 0 {
        return Err(Error::Config("segment length cap must be positive".into()));
    }
    for (i, pair) in tokens.windows(2).enumerate() {
        if pair[1].start < pair[0].start {
            return Err(Error::Data(format!(
                "token {} ({:?}) at {}s precedes token {} at {}s",
                i + 1,
                pair[1].word,
                pair[1].start,
                i,
                pair[0].start
            )));
        }
    }
    if let Some(t) = tokens.iter().find(|t| !(t.start >= 0.0) || !t.start.is_finite()) {
        return Err(Error::Data(format!("invalid timestamp {} for {:?}", t.start, t.word)));
    }
    let mut segments = Vec::new();
    let mut current: Vec<TimedToken> = Vec::new();
    for tok in tokens {
        let split = match current.last() {
            Some(prev) => tok.start - prev.start > gap || current.len() >= max_len,
            None => false,
        };
        if split {
            segments.push(AsrSegment {
                video_id: video_id.to_string(),
                index: segments.len(),
                tokens: std::mem::take(&mut current),
            });
        }
        current.push(tok.clone());
    }
    if !current.is_empty() {
        segments.push(AsrSegment {
            video_id: video_id.to_string(),
            index: segments.len(),
            tokens: current,
        });
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(times: &[f64]) -> Vec<TimedToken> {
        times.iter().enumerate().map(|(i, &t)| TimedToken::new(format!("w{i}"), t)).collect()
    }

    #[test]
    fn splits_on_long_gap() {
        let segs = segment_asr("v", &toks(&[0.0, 0.5, 1.2, 3.5, 4.0]), 2.0, 320).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].tokens.len(), 3);
        assert_eq!(segs[1].tokens.len(), 2);
        assert_eq!(segs[1].index, 1);
    }

    #[test]
    fn length_cap_forces_split() {
        let times: Vec<f64> = (0..321).map(|i| i as f64 * 0.1).collect();
        let segs = segment_asr("v", &toks(&times), 2.0, 320).unwrap();
        assert_eq!(segs.iter().map(|s| s.tokens.len()).collect::<Vec<_>>(), vec![320, 1]);
    }

    #[test]
    fn gap_of_exactly_two_seconds_does_not_split() {
        let segs = segment_asr("v", &toks(&[0.0, 2.0, 4.0]), 2.0, 320).unwrap();
        assert_eq!(segs.len(), 1);
    }

    #[test]
    fn unsorted_input_is_a_data_error() {
        assert!(matches!(segment_asr("v", &toks(&[1.0, 0.5]), 2.0, 320), Err(Error::Data(_))));
    }

    #[test]
    fn empty_input_gives_no_segments() {
        assert!(segment_asr("v", &[], 2.0, 320).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn concatenation_is_identity(gaps in prop::collection::vec(0.0f64..5.0, 0..400), cap in 1usize..50) {
            let mut t = 0.0;
            let times: Vec<f64> = gaps.iter().map(|g| { t += g; t }).collect();
            let input = toks(&times);
            let segs = segment_asr("v", &input, 2.0, cap).unwrap();
            let joined: Vec<TimedToken> = segs.iter().flat_map(|s| s.tokens.clone()).collect();
            prop_assert_eq!(&joined, &input);
            for (k, s) in segs.iter().enumerate() {
                prop_assert!(s.tokens.len() <= cap && !s.tokens.is_empty());
                prop_assert_eq!(s.index, k);
                for w in s.tokens.windows(2) {
                    prop_assert!(w[1].start - w[0].start <= 2.0);
                }
            }
            for pair in segs.windows(2) {
                let gap = pair[1].start() - pair[0].end();
                prop_assert!(gap > 2.0 || pair[0].tokens.len() == cap);
            }
        }
    }
}
