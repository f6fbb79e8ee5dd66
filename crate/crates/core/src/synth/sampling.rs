use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceSample {
    pub index: usize,
    /// Set when the video has a single frame and the key is its own reference.
    pub degenerate: bool,
}

/// Uniform over the offsets `[-window, window] \ {0}` that stay inside the
/// video.
pub fn sample_reference_frame<R: Rng + ?Sized>(len: usize, key: usize, window: usize, rng: &mut R) -> ReferenceSample {
    let lo = key.saturating_sub(window);
    let hi = (key + window).min(len.saturating_sub(1));
    let candidates: Vec<usize> = (lo..=hi).filter(|&i| i != key).collect();
    if candidates.is_empty() {
        return ReferenceSample {
            index: key,
            degenerate: true,
        };
    }
    ReferenceSample {
        index: candidates[rng.random_range(0..candidates.len())],
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn offsets_are_clipped_and_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let r = sample_reference_frame(10, 0, 2, &mut rng);
            assert!(r.index == 1 || r.index == 2);
            let r = sample_reference_frame(10, 5, 2, &mut rng);
            assert!((3..=7).contains(&r.index) && r.index != 5);
        }
        let r = sample_reference_frame(1, 0, 2, &mut rng);
        assert_eq!(
            r,
            ReferenceSample {
                index: 0,
                degenerate: true
            }
        );
    }

    #[test]
    fn seeded_runs_repeat() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|k| sample_reference_frame(20, k, 2, &mut rng).index)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
    }
}
