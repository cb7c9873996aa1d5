//! Deterministic synthetic audio-visual corpus.
//!
//! Every utterance is a string over a 12-symbol alphabet. Each symbol holds
//! the mouth at a fixed aperture for a fixed number of video frames and emits
//! a fixed spectral template for four mel frames per video frame, so the lip
//! stream and the mel stream share their timing exactly. Only the symbol
//! strings, speaker assignment, pixel jitter and mel noise depend on the seed.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{write_manifest, LipSequence, MelSpectrogram, UtteranceRecord, FRAME_RATIO, LIP_SIZE, NUM_MELS};
use crate::error::{Error, Result};

pub const ALPHABET: [char; 12] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l'];
const DURATIONS: [usize; 12] = [4, 6, 5, 7, 8, 4, 6, 5, 7, 8, 4, 6];
/// Full vertical mouth opening in pixels.
const APERTURES: [usize; 12] = [30, 14, 46, 6, 38, 22, 50, 10, 34, 18, 42, 26];
const MOUTH_HALF_WIDTH: f64 = 24.0;
const BACKGROUND: f32 = 0.1;
const MAX_JITTER: i64 = 2;
const NOISE_STD: f64 = 0.01;
const SPEAKER_BIAS_AMPLITUDE: f64 = 0.05;

pub const MIN_SYMBOLS: usize = 3;
pub const MAX_SYMBOLS: usize = 8;

pub fn symbol_index(c: char) -> Option<usize> {
    ALPHABET.iter().position(|&a| a == c.to_ascii_lowercase())
}

/// Video frames held by one symbol.
pub fn symbol_duration(symbol: usize) -> usize {
    DURATIONS[symbol]
}

pub fn symbol_aperture(symbol: usize) -> usize {
    APERTURES[symbol]
}

/// Fixed 80-bin spectral template. Its mean rises linearly with the aperture.
pub fn spectral_template(symbol: usize) -> Array1<f64> {
    let level = 0.15 + 0.7 * (APERTURES[symbol] as f64 - 6.0) / 44.0;
    let c1 = 4.0 + 6.0 * symbol as f64;
    let c2 = (c1 + 23.0) % NUM_MELS as f64;
    let shape = Array1::from_shape_fn(NUM_MELS, |k| {
        let k = k as f64;
        0.3 + (-(k - c1).powi(2) / 18.0).exp() + 0.6 * (-(k - c2).powi(2) / 32.0).exp()
    });
    let mean = shape.mean().unwrap();
    shape.mapv(|v| level * v / mean)
}

/// Constant per-speaker offset added to every mel frame of that speaker.
pub fn speaker_bias(speaker_id: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + speaker_id as u64);
    let freq: f64 = rng.random_range(0.5..3.0);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    Array1::from_shape_fn(NUM_MELS, |k| {
        SPEAKER_BIAS_AMPLITUDE * (2.0 * PI * freq * k as f64 / NUM_MELS as f64 + phase).sin()
    })
}

/// Parses a toy symbol string such as `"aba"`.
pub fn parse_symbols(text: &str) -> Result<Vec<usize>> {
    let symbols: Vec<usize> = text
        .chars()
        .map(|c| symbol_index(c).ok_or_else(|| Error::Validation(format!("{c:?} is not a toy symbol"))))
        .collect::<Result<_>>()?;
    if symbols.is_empty() {
        return Err(Error::EmptyInput("empty toy symbol string".into()));
    }
    Ok(symbols)
}

pub fn symbols_to_text(symbols: &[usize]) -> String {
    symbols.iter().map(|&s| ALPHABET[s]).collect()
}

/// Video frames of a symbol string: the sum of per-symbol durations.
pub fn num_video_frames(symbols: &[usize]) -> usize {
    symbols.iter().map(|&s| DURATIONS[s]).sum()
}

/// Per-video-frame symbol index.
pub fn frame_symbols(symbols: &[usize]) -> Vec<usize> {
    symbols
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, DURATIONS[s]))
        .collect()
}

fn render_mouth(aperture: usize, jitter_x: i64, jitter_y: i64) -> Array2<f32> {
    let cx = (LIP_SIZE / 2) as f64 + jitter_x as f64;
    let cy = (LIP_SIZE / 2) as f64 + jitter_y as f64;
    let half_height = aperture as f64 / 2.0;
    Array2::from_shape_fn((LIP_SIZE, LIP_SIZE), |(y, x)| {
        let dx = (x as f64 - cx) / MOUTH_HALF_WIDTH;
        let dy = (y as f64 - cy) / half_height;
        if dx * dx + dy * dy <= 1.0 {
            // Horizontal striations inside the opening.
            (0.55 + 0.35 * (2.0 * PI * (y as f64 - cy) / 4.0).cos()) as f32
        } else {
            BACKGROUND
        }
    })
}

#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub symbols: Vec<usize>,
    pub speaker_id: usize,
    pub lips: LipSequence,
    pub mel: MelSpectrogram,
}

impl ToyUtterance {
    pub fn text(&self) -> String {
        symbols_to_text(&self.symbols)
    }
}

/// Renders one utterance for a given symbol string, drawing jitter and noise from `rng`.
pub fn render_utterance(symbols: &[usize], speaker_id: usize, rng: &mut impl Rng) -> ToyUtterance {
    let per_frame = frame_symbols(symbols);
    let t_v = per_frame.len();
    let mut lips = Array3::<f32>::zeros((t_v, LIP_SIZE, LIP_SIZE));
    for (t, &s) in per_frame.iter().enumerate() {
        let jx = rng.random_range(-MAX_JITTER..=MAX_JITTER);
        let jy = rng.random_range(-MAX_JITTER..=MAX_JITTER);
        lips.index_axis_mut(ndarray::Axis(0), t)
            .assign(&render_mouth(APERTURES[s], jx, jy));
    }

    let bias = speaker_bias(speaker_id);
    let templates: Vec<Array1<f64>> = (0..ALPHABET.len()).map(spectral_template).collect();
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let t_m = FRAME_RATIO * t_v;
    let mut mel = Array2::<f64>::zeros((t_m, NUM_MELS));
    for (m, mut row) in mel.outer_iter_mut().enumerate() {
        let s = per_frame[m / FRAME_RATIO];
        for k in 0..NUM_MELS {
            let v = templates[s][k] + bias[k] + noise.sample(rng);
            // Round to the on-disk precision so in-memory and loaded data agree.
            row[k] = v as f32 as f64;
        }
    }

    ToyUtterance {
        symbols: symbols.to_vec(),
        speaker_id,
        lips: LipSequence::new(lips).expect("rendered frames are valid"),
        mel: MelSpectrogram::new(mel).expect("rendered mel is valid"),
    }
}

/// Draws `n_utts` utterances in memory. A pure function of its arguments.
pub fn generate(seed: u64, n_utts: usize, n_speakers: usize) -> Result<Vec<ToyUtterance>> {
    if n_utts == 0 || n_speakers == 0 {
        return Err(Error::Validation(
            "toy corpus needs at least one utterance and one speaker".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_utts)
        .map(|_| {
            let n = rng.random_range(MIN_SYMBOLS..=MAX_SYMBOLS);
            let symbols: Vec<usize> = (0..n).map(|_| rng.random_range(0..ALPHABET.len())).collect();
            let speaker = rng.random_range(0..n_speakers);
            render_utterance(&symbols, speaker, &mut rng)
        })
        .collect())
}

/// Writes a toy corpus under `out_dir` and returns the manifest path.
pub fn make_toy_dataset(seed: u64, n_utts: usize, n_speakers: usize, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let utts = generate(seed, n_utts, n_speakers)?;
    for sub in ["lips", "mels"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(utts.len());
    for (i, u) in utts.iter().enumerate() {
        let utt_id = format!("toy{seed}_{i:05}");
        let lip_rel = PathBuf::from("lips").join(format!("{utt_id}.vtts"));
        let mel_rel = PathBuf::from("mels").join(format!("{utt_id}.vtts"));
        u.lips.save(out_dir.join(&lip_rel))?;
        u.mel.save(out_dir.join(&mel_rel))?;
        records.push(UtteranceRecord {
            utt_id,
            speaker_id: u.speaker_id,
            text: u.text(),
            lip_path: lip_rel,
            mel_path: Some(mel_rel),
            num_video_frames: u.lips.num_frames(),
        });
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&records, &manifest)?;
    Ok(manifest)
}
