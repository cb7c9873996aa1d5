//! Synchronization measures: DTW frame disturbance and a sliding-offset
//! audio-visual sync score.

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::Serialize;

use crate::data::{LipSequence, MelSpectrogram, FRAME_RATIO};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_OFFSET: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult {
    pub path: Vec<(usize, usize)>,
    pub total_cost: f64,
}

fn euclidean(a: ArrayView2<f64>, i: usize, b: ArrayView2<f64>, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Minimal-cost monotone alignment under Euclidean frame distance. Ties
/// prefer the diagonal step, then the step along `a`.
pub fn dtw_path(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<DtwResult> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Validation("dtw needs at least one frame on each side".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Validation(format!(
            "dtw feature dimensions differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let (n, m) = (a.nrows(), b.nrows());
    let mut acc = Array2::from_elem((n, m), f64::INFINITY);
    for i in 0..n {
        for j in 0..m {
            let c = euclidean(a, i, b, j);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[[i - 1, j - 1]]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
                let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[[i, j]] = c + best;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 {
            acc[[i - 1, j - 1]]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
        let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
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
    Ok(DtwResult {
        path,
        total_cost: acc[[n - 1, m - 1]],
    })
}

/// Root-mean-square distance of the DTW path from the diagonal, in frames.
pub fn frame_disturbance(synth: &MelSpectrogram, reference: &MelSpectrogram) -> Result<f64> {
    let r = dtw_path(synth.frames().view(), reference.frames().view())?;
    let sq: f64 = r
        .path
        .iter()
        .map(|&(i, j)| {
            let d = i as f64 - j as f64;
            d * d
        })
        .sum();
    Ok((sq / r.path.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyncScore {
    pub distance_like: f64,
    pub confidence_like: f64,
    pub best_offset_frames: i64,
}

/// Mean mel value over each block of `FRAME_RATIO` mel frames.
pub fn audio_energy_feature(mel: &MelSpectrogram, num_video_frames: usize) -> Array1<f64> {
    let f = mel.frames();
    Array1::from_shape_fn(num_video_frames, |t| {
        let start = (t * FRAME_RATIO).min(f.nrows());
        let end = ((t + 1) * FRAME_RATIO).min(f.nrows());
        if start == end {
            0.0
        } else {
            f.slice(s![start..end, ..]).mean().unwrap_or(0.0)
        }
    })
}

/// Mean absolute vertical intensity gradient in the central column band of
/// each frame; grows with mouth opening.
pub fn lip_aperture_feature(lips: &LipSequence) -> Array1<f64> {
    let frames = lips.frames();
    let (t_v, h, w) = frames.dim();
    let band = (w / 2 - w / 11)..(w / 2 + w / 11);
    Array1::from_shape_fn(t_v, |t| {
        let img = frames.index_axis(ndarray::Axis(0), t);
        let mut total = 0.0;
        for y in 0..h - 1 {
            for x in band.clone() {
                total += f64::from((img[[y + 1, x]] - img[[y, x]]).abs());
            }
        }
        total / ((h - 1) * band.len()) as f64
    })
}

fn z_normalize(x: &Array1<f64>, what: &str) -> Result<Array1<f64>> {
    let mean = x.mean().unwrap_or(0.0);
    let std = x.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0).sqrt();
    if !(std > 1e-12) {
        return Err(Error::Validation(format!("{what} stream has zero variance")));
    }
    Ok(x.mapv(|v| (v - mean) / std))
}

/// Largest offset range usable on `t_v` frames, capped at `requested`.
pub fn usable_max_offset(t_v: usize, requested: usize) -> usize {
    requested.min(t_v.saturating_sub(1) / 2)
}

/// Slides audio against video over `[-max_offset, max_offset]` video
/// frames. A positive best offset means the audio lags the video.
pub fn sync_proxy_score(mel: &MelSpectrogram, lips: &LipSequence, max_offset: usize) -> Result<SyncScore> {
    let t_v = lips.num_frames();
    let needed = 2 * max_offset + 1;
    if t_v < needed {
        return Err(Error::InsufficientLength {
            have: t_v,
            need: needed,
        });
    }
    let a = z_normalize(&audio_energy_feature(mel, t_v), "audio")?;
    let v = z_normalize(&lip_aperture_feature(lips), "visual")?;
    let k = max_offset as i64;
    let distances: Vec<(i64, f64)> = (-k..=k)
        .map(|o| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for t in 0..t_v as i64 {
                let ta = t + o;
                if ta >= 0 && ta < t_v as i64 {
                    sum += (a[ta as usize] - v[t as usize]).abs();
                    n += 1;
                }
            }
            (o, sum / n as f64)
        })
        .collect();
    let &(best_offset, best) = distances
        .iter()
        .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.abs().cmp(&y.0.abs())))
        .expect("at least one offset");
    let mut sorted: Vec<f64> = distances.iter().map(|d| d.1).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    Ok(SyncScore {
        distance_like: best,
        confidence_like: (median - best).max(0.0),
        best_offset_frames: best_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;
    use ndarray::{concatenate, Axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Cheapest monotone path by exhaustive enumeration.
    fn brute_force(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        fn walk(a: &Array2<f64>, b: &Array2<f64>, i: usize, j: usize) -> f64 {
            let c = euclidean(a.view(), i, b.view(), j);
            if i + 1 == a.nrows() && j + 1 == b.nrows() {
                return c;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.nrows() {
                best = best.min(walk(a, b, i + 1, j));
            }
            if j + 1 < b.nrows() {
                best = best.min(walk(a, b, i, j + 1));
            }
            if i + 1 < a.nrows() && j + 1 < b.nrows() {
                best = best.min(walk(a, b, i + 1, j + 1));
            }
            c + best
        }
        walk(a, b, 0, 0)
    }

    fn mel(m: Array2<f64>) -> MelSpectrogram {
        MelSpectrogram::new(m).unwrap()
    }

    fn roll_rows(m: &Array2<f64>, k: usize) -> Array2<f64> {
        let n = m.nrows();
        concatenate(Axis(0), &[m.slice(s![n - k.., ..]), m.slice(s![..n - k, ..])]).unwrap()
    }

    #[test]
    fn identical_sequences_follow_the_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(6, 3, &mut rng);
        let r = dtw_path(a.view(), a.view()).unwrap();
        assert_eq!(r.total_cost, 0.0);
        assert_eq!(r.path, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn one_against_two_frames() {
        let a = Array2::zeros((1, 1));
        let b = Array2::zeros((2, 1));
        let r = dtw_path(a.view(), b.view()).unwrap();
        assert_eq!(r.path, vec![(0, 0), (0, 1)]);
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((2, 4));
        assert!(matches!(dtw_path(a.view(), b.view()), Err(Error::Validation(_))));
        assert!(dtw_path(Array2::zeros((0, 4)).view(), b.view()).is_err());
    }

    #[test]
    fn five_by_seven_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let a = random(5, 2, &mut rng);
        let b = random(7, 2, &mut rng);
        let r = dtw_path(a.view(), b.view()).unwrap();
        assert!((r.total_cost - brute_force(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn fd_of_prepended_frames_is_about_three() {
        let utt = &toy::generate(3, 1, 1).unwrap()[0];
        let reference = utt.mel.frames().clone();
        let lead = Array2::from_shape_fn((3, 80), |(i, k)| 3.0 + i as f64 + 0.01 * k as f64);
        let delayed = concatenate(Axis(0), &[lead.view(), reference.view()]).unwrap();
        let fd = frame_disturbance(&mel(delayed), &mel(reference)).unwrap();
        assert!((2.5..=3.5).contains(&fd), "fd {fd}");
    }

    #[test]
    fn sync_offset_of_ground_truth_and_rolled_mels() {
        for utt in toy::generate(40, 6, 2).unwrap() {
            let t_v = utt.lips.num_frames();
            let k = usable_max_offset(t_v, DEFAULT_MAX_OFFSET);
            let score = sync_proxy_score(&utt.mel, &utt.lips, k).unwrap();
            assert_eq!(score.best_offset_frames, 0);
            assert!(score.confidence_like > 0.0);
            let rolled = mel(roll_rows(utt.mel.frames(), 8));
            let score = sync_proxy_score(&rolled, &utt.lips, k).unwrap();
            assert_eq!(score.best_offset_frames, 2);
        }
    }

    #[test]
    fn constant_streams_are_degenerate() {
        let lips = LipSequence::new(ndarray::Array3::from_elem((5, 88, 88), 0.5)).unwrap();
        let m = mel(Array2::from_elem((20, 80), 0.3));
        assert!(matches!(sync_proxy_score(&m, &lips, 2), Err(Error::Validation(_))));
    }

    #[test]
    fn short_inputs_are_rejected() {
        let utt = &toy::generate(1, 1, 1).unwrap()[0];
        let t_v = utt.lips.num_frames();
        let err = sync_proxy_score(&utt.mel, &utt.lips, t_v).unwrap_err();
        assert!(matches!(err, Error::InsufficientLength { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dtw_equals_enumeration(ta in 1usize..=7, tb in 1usize..=7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(ta, 2, &mut rng);
            let b = random(tb, 2, &mut rng);
            let r = dtw_path(a.view(), b.view()).unwrap();
            prop_assert!((r.total_cost - brute_force(&a, &b)).abs() < 1e-9);
            prop_assert_eq!(r.path[0], (0, 0));
            prop_assert_eq!(*r.path.last().unwrap(), (ta - 1, tb - 1));
            for w in r.path.windows(2) {
                let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)));
            }
        }

        #[test]
        fn fd_is_symmetric_and_zero_on_self(ta in 1usize..12, tb in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = mel(random(ta, 80, &mut rng).mapv(f64::abs));
            let b = mel(random(tb, 80, &mut rng).mapv(f64::abs));
            prop_assert_eq!(frame_disturbance(&a, &a).unwrap(), 0.0);
            let ab = frame_disturbance(&a, &b).unwrap();
            let ba = frame_disturbance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn confidence_is_non_negative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t_v = rng.random_range(5usize..30);
            let lips = LipSequence::new(ndarray::Array3::from_shape_fn((t_v, 88, 88), |_| rng.random::<f32>())).unwrap();
            let m = mel(random(4 * t_v, 80, &mut rng).mapv(f64::abs));
            let s = sync_proxy_score(&m, &lips, usable_max_offset(t_v, 15)).unwrap();
            prop_assert!(s.confidence_like >= 0.0);
            prop_assert!(s.distance_like >= 0.0);
        }
    }
}
