use rand::Rng;

use crate::tokenizer::{BOS, MASK};

pub const MASK_RATIO: f64 = 0.5;

/// `(start, len)` of a contiguous span covering `round(ratio * len)` tokens
/// (at least one), or `None` for sequences shorter than two tokens.
pub fn sample_mass_span<R: Rng + ?Sized>(len: usize, ratio: f64, rng: &mut R) -> Option<(usize, usize)> {
    if len < 2 {
        return None;
    }
    let span = ((ratio * len as f64).round() as usize).clamp(1, len);
    let start = rng.gen_range(0..=len - span);
    Some((start, span))
}

/// Encoder sees the sequence with the span masked; the decoder reads the
/// span shifted right behind BOS and predicts the span itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MassExample {
    pub encoder: Vec<u32>,
    pub decoder_input: Vec<u32>,
    pub targets: Vec<u32>,
    /// Offset of the span in the original sequence.
    pub start: usize,
}

pub fn build_mass_example(ids: &[u32], (start, len): (usize, usize)) -> MassExample {
    assert!(start + len <= ids.len() && len > 0, "span {start}+{len} outside {} tokens", ids.len());
    let mut encoder = ids.to_vec();
    encoder[start..start + len].fill(MASK);
    let targets = ids[start..start + len].to_vec();
    let decoder_input = std::iter::once(BOS).chain(targets[..len - 1].iter().copied()).collect();
    MassExample {
        encoder,
        decoder_input,
        targets,
        start,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn span_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (s, l) = sample_mass_span(10, 0.5, &mut rng).unwrap();
            assert_eq!(l, 5);
            assert!(s <= 5);
        }
        assert_eq!(sample_mass_span(2, 0.5, &mut rng).unwrap().1, 1);
        assert_eq!(sample_mass_span(1, 0.5, &mut rng), None);
        let a = sample_mass_span(50, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_mass_span(50, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn example_layout() {
        let (a, b, c, d) = (10, 11, 12, 13);
        let ex = build_mass_example(&[a, b, c, d], (1, 2));
        assert_eq!(ex.encoder, vec![a, MASK, MASK, d]);
        assert_eq!(ex.targets, vec![b, c]);
        assert_eq!(ex.decoder_input, vec![BOS, b]);
        let all = build_mass_example(&[a, b, c, d], (0, 4));
        assert_eq!(all.encoder, vec![MASK; 4]);
        assert_eq!(all.decoder_input, vec![BOS, a, b, c]);
    }
}
