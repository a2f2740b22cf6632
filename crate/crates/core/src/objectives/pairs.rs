//! Segment-pair sampling for the alignment and ordering heads. Pairs index
//! segments of one video; negatives are at least two segments apart.

use rand::Rng;

pub const MIN_GAP: usize = 2;

/// `(asr segment i, frames of segment j, label)`.
pub type Pair = (usize, usize, f32);

fn distant_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Option<(usize, usize)> {
    if n < MIN_GAP + 1 {
        return None;
    }
    // Pairs with j >= i + MIN_GAP, counted per i: n - MIN_GAP - i.
    let total = (n - MIN_GAP) * (n - MIN_GAP + 1) / 2;
    let mut k = rng.gen_range(0..total);
    for i in 0..n - MIN_GAP {
        let row = n - MIN_GAP - i;
        if k < row {
            return Some((i, i + MIN_GAP + k));
        }
        k -= row;
    }
    unreachable!("k < total")
}

/// Positive: the same segment, label 1. Negative: a uniformly drawn
/// unordered pair at least [`MIN_GAP`] apart in random orientation, label 0.
pub fn sample_alignment_pair<R: Rng + ?Sized>(segments: usize, rng: &mut R, positive: bool) -> Option<Pair> {
    if positive {
        if segments == 0 {
            return None;
        }
        let i = rng.gen_range(0..segments);
        return Some((i, i, 1.0));
    }
    let (i, j) = distant_pair(segments, rng)?;
    Some(if rng.gen_bool(0.5) { (i, j, 0.0) } else { (j, i, 0.0) })
}

/// A distant pair oriented so the label equals `before` (the ASR segment
/// precedes the clip).
pub fn sample_ordering_pair<R: Rng + ?Sized>(segments: usize, rng: &mut R, before: bool) -> Option<Pair> {
    let (i, j) = distant_pair(segments, rng)?;
    Some(if before { (i, j, 1.0) } else { (j, i, 0.0) })
}

/// 1 when the ASR segment comes first.
pub fn ordering_label(asr: usize, clip: usize) -> f32 {
    if asr < clip {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn negatives_keep_their_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            let (i, j, l) = sample_alignment_pair(6, &mut rng, false).unwrap();
            assert_eq!(l, 0.0);
            assert!(i.abs_diff(j) >= 2);
            if i == 2 {
                seen.insert(j);
            }
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 4, 5]);
    }

    #[test]
    fn positives_and_too_few_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (i, j, l) = sample_alignment_pair(4, &mut rng, true).unwrap();
        assert_eq!((i == j, l), (true, 1.0));
        assert_eq!(sample_alignment_pair(2, &mut rng, false), None);
        assert_eq!(sample_ordering_pair(2, &mut rng, true), None);
    }

    #[test]
    fn ordering_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (i, j, l) = sample_ordering_pair(5, &mut rng, true).unwrap();
            assert!(i + 2 <= j && l == 1.0 && ordering_label(i, j) == 1.0);
            let (i, j, l) = sample_ordering_pair(5, &mut rng, false).unwrap();
            assert!(j + 2 <= i && l == 0.0 && ordering_label(i, j) == 0.0);
        }
        assert_eq!(ordering_label(1, 4), 1.0);
        assert_eq!(ordering_label(4, 1), 0.0);
    }
}
