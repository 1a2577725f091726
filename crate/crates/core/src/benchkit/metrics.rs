use ndarray::ArrayView2;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};

/// Mean squared error per entry. With `align`, frames are first paired
/// along the dynamic-time-warping path (squared Euclidean frame cost) and
/// the mean is taken over all path entries.
pub fn mel_mse(a: &MelSpectrogram, b: &MelSpectrogram, align: bool) -> Result<f64> {
    frames_mse(a.frames().view(), b.frames().view(), align)
}

pub fn frames_mse(a: ArrayView2<f32>, b: ArrayView2<f32>, align: bool) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::invalid(format!("channel counts differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let cost = |i: usize, j: usize| -> f64 {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum()
    };
    if !align {
        if a.dim() != b.dim() {
            return Err(Error::invalid(format!(
                "shapes differ: {:?} vs {:?} (alignment not requested)",
                a.dim(),
                b.dim()
            )));
        }
        let total: f64 = (0..a.nrows()).map(|i| cost(i, i)).sum();
        return Ok(total / a.len() as f64);
    }
    let path = dtw_path(a, b)?;
    let total: f64 = path.iter().map(|&(i, j)| cost(i, j)).sum();
    Ok(total / (path.len() * a.ncols()) as f64)
}

/// Minimum-cost monotone alignment between the frames of `a` and `b`.
/// Ties prefer the diagonal step, then advancing `a`.
pub fn dtw_path(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<Vec<(usize, usize)>> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 || a.ncols() != b.ncols() {
        return Err(Error::invalid("dynamic time warping needs non-empty inputs of equal width"));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let c: f64 = a
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                .sum();
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i * m + j] = c + prev;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[(i - 1) * m + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { acc[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { acc[i * m + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(path)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between symbol sequences over the reference length.
pub fn pseudo_wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("reference sequence is empty"));
    }
    Ok(levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mel(rows: usize, seed: u64) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelSpectrogram::new(Array2::from_shape_fn((rows, 80), |_| rng.random_range(-8.0..2.0))).unwrap()
    }

    #[test]
    fn mse_basics() {
        let a = mel(7, 0);
        assert_eq!(mel_mse(&a, &a, false).unwrap(), 0.0);
        assert_eq!(mel_mse(&a, &a, true).unwrap(), 0.0);
        let b = MelSpectrogram::new(a.frames() + 1.0).unwrap();
        assert!((mel_mse(&a, &b, false).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(mel_mse(&a, &mel(8, 0), false), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn mse_matches_naive_loop() {
        for seed in 0..5 {
            let (a, b) = (mel(11, seed), mel(11, seed + 100));
            let mut naive = 0.0f64;
            for i in 0..11 {
                for j in 0..80 {
                    let d = a.frames()[[i, j]] as f64 - b.frames()[[i, j]] as f64;
                    naive += d * d;
                }
            }
            naive /= 880.0;
            assert!((mel_mse(&a, &b, false).unwrap() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn dtw_undoes_frame_repetition() {
        let a = mel(10, 3);
        let idx = [0, 0, 1, 2, 2, 2, 3, 4, 5, 6, 7, 7, 8, 9];
        let rep = Array2::from_shape_fn((idx.len(), 80), |(i, j)| a.frames()[[idx[i], j]]);
        let b = MelSpectrogram::new(rep).unwrap();
        assert_eq!(mel_mse(&a, &b, true).unwrap(), 0.0);
        let path = dtw_path(a.frames().view(), b.frames().view()).unwrap();
        assert_eq!(path.first(), Some(&(0, 0)));
        assert_eq!(path.last(), Some(&(9, 13)));
    }

    #[test]
    fn wer_examples() {
        assert_eq!(pseudo_wer(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 0.0);
        assert_eq!(pseudo_wer(&[1, 9, 3, 4], &[1, 2, 3, 4]).unwrap(), 0.25);
        assert_eq!(pseudo_wer::<u8>(&[], &[1, 2, 3]).unwrap(), 1.0);
        assert!(pseudo_wer::<u8>(&[1], &[]).is_err());
    }

    /// Exhaustive edit-distance oracle by recursion.
    fn edit_oracle(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = edit_oracle(ra, rb) + usize::from(x != y);
                sub.min(edit_oracle(ra, b) + 1).min(edit_oracle(a, rb) + 1)
            }
        }
    }

    proptest! {
        #[test]
        fn levenshtein_matches_recursion(
            a in proptest::collection::vec(0u8..3, 0..7),
            b in proptest::collection::vec(0u8..3, 0..7),
        ) {
            prop_assert_eq!(levenshtein(&a, &b), edit_oracle(&a, &b));
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        }
    }
}
