//! Mel inversion and Griffin-Lim phase reconstruction.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::data::{MelSpectrogram, HOP_SAMPLES, NUM_MELS, SAMPLE_RATE, WIN_SAMPLES};
use crate::error::{Error, Result};

pub const FFT_BINS: usize = WIN_SAMPLES / 2 + 1;
pub const DEFAULT_ITERATIONS: usize = 60;
const PEAK: f64 = 0.95;

/// Mono audio at the data sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Validation("waveform has non-finite samples".into()));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    /// Writes 16-bit PCM mono RIFF/WAVE; samples are clipped to [-1, 1].
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let wav_err = |e: hound::Error| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => Error::Format {
                field: "wav",
                detail: other.to_string(),
            },
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * f64::from(i16::MAX)).round() as i16;
            writer.write_sample(v).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * f_sp
    }
}

/// Area-normalized triangular mel filters on the Slaney scale, with their
/// pseudo-inverse.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    pinv: Array2<f64>,
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new(NUM_MELS, WIN_SAMPLES, f64::from(SAMPLE_RATE))
    }
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64) -> Self {
        let bins = n_fft / 2 + 1;
        let fmax = sample_rate / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = Array2::zeros((n_mels, bins));
        for m in 0..n_mels {
            let (l, c, u) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (u - l);
            for k in 0..bins {
                let f = k as f64 * sample_rate / n_fft as f64;
                let w = ((f - l) / (c - l)).min((u - f) / (u - c)).max(0.0);
                weights[[m, k]] = w * norm;
            }
        }
        let dm = DMatrix::from_fn(n_mels, bins, |r, c| weights[[r, c]]);
        let p = dm.pseudo_inverse(1e-12).expect("filterbank SVD");
        let pinv = Array2::from_shape_fn((bins, n_mels), |(r, c)| p[(r, c)]);
        Self { weights, pinv }
    }

    pub fn num_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.weights.ncols()
    }

    /// `[n_mels x bins]`.
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Mel frames of linear magnitude frames `[T x bins]`.
    pub fn apply(&self, linear: &Array2<f64>) -> Array2<f64> {
        linear.dot(&self.weights.t())
    }
}

/// Least-squares inversion of the filterbank, clipped at zero.
pub fn mel_to_linear(mel: &MelSpectrogram, filterbank: &MelFilterbank) -> Result<Array2<f64>> {
    if mel.frames().ncols() != filterbank.num_mels() {
        return Err(Error::Validation(format!(
            "mel has {} bands, filterbank has {}",
            mel.frames().ncols(),
            filterbank.num_mels()
        )));
    }
    Ok(mel.frames().dot(&filterbank.pinv.t()).mapv(|v| v.max(0.0)))
}

/// Short-time transforms with a periodic Hann window of `WIN_SAMPLES`.
pub struct Stft {
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let n = WIN_SAMPLES;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let mut planner = FftPlanner::new();
        Self {
            window,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    pub fn num_frames(samples: usize) -> usize {
        if samples < WIN_SAMPLES {
            0
        } else {
            (samples - WIN_SAMPLES) / HOP_SAMPLES + 1
        }
    }

    /// Complex spectra `[frames][FFT_BINS]` of full windows only.
    pub fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let mut buf = vec![Complex::new(0.0, 0.0); WIN_SAMPLES];
        (0..Self::num_frames(x.len()))
            .map(|t| {
                let start = t * HOP_SAMPLES;
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = Complex::new(x[start + i] * self.window[i], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..FFT_BINS].to_vec()
            })
            .collect()
    }

    pub fn magnitude(&self, x: &[f64]) -> Array2<f64> {
        let spectra = self.analyze(x);
        let mut out = Array2::zeros((spectra.len(), FFT_BINS));
        for (t, s) in spectra.iter().enumerate() {
            for (k, c) in s.iter().enumerate() {
                out[[t, k]] = c.norm();
            }
        }
        out
    }

    /// Least-squares overlap-add inverse of one-sided spectra.
    pub fn synthesize(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let n = WIN_SAMPLES;
        if spectra.is_empty() {
            return Vec::new();
        }
        let len = (spectra.len() - 1) * HOP_SAMPLES + n;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (t, s) in spectra.iter().enumerate() {
            buf[..FFT_BINS].copy_from_slice(s);
            for k in FFT_BINS..n {
                buf[k] = s[n - k].conj();
            }
            // Bins 0 and n/2 must be real for a real signal.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            self.inverse.process(&mut buf);
            let start = t * HOP_SAMPLES;
            for i in 0..n {
                let w = self.window[i];
                out[start + i] += w * buf[i].re / n as f64;
                norm[start + i] += w * w;
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            if *w > 1e-10 {
                *o /= w;
            }
        }
        out
    }
}

/// Relative Frobenius distance between a target magnitude and the
/// magnitude of `x`.
pub fn spectral_convergence(stft: &Stft, target: &Array2<f64>, x: &[f64]) -> f64 {
    let m = stft.magnitude(x);
    let denom = target.mapv(|v| v * v).sum().sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (&m - target).mapv(|v| v * v).sum().sqrt() / denom
}

fn check_magnitude(linear: &Array2<f64>, n_iters: usize) -> Result<()> {
    if n_iters < 1 {
        return Err(Error::Validation("griffin-lim needs at least one iteration".into()));
    }
    if linear.ncols() != FFT_BINS {
        return Err(Error::Validation(format!(
            "magnitude has {} bins, expected {FFT_BINS}",
            linear.ncols()
        )));
    }
    if linear.nrows() == 0 {
        return Err(Error::EmptyInput("magnitude has no frames".into()));
    }
    if linear.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation("magnitudes must be finite and non-negative".into()));
    }
    Ok(())
}

/// Griffin-Lim reconstruction from zero phase. Returns the peak-normalized
/// waveform and the spectral convergence after each iteration.
pub fn griffin_lim_with_history(linear: &Array2<f64>, n_iters: usize) -> Result<(Waveform, Vec<f64>)> {
    check_magnitude(linear, n_iters)?;
    let stft = Stft::new();
    let to_spectra = |phases: Option<&Vec<Vec<Complex<f64>>>>| -> Vec<Vec<Complex<f64>>> {
        linear
            .rows()
            .into_iter()
            .enumerate()
            .map(|(t, mag)| {
                mag.iter()
                    .enumerate()
                    .map(|(k, &a)| match phases {
                        Some(p) => {
                            let c = p[t][k];
                            let n = c.norm();
                            if n > 1e-300 {
                                c * (a / n)
                            } else {
                                Complex::new(a, 0.0)
                            }
                        }
                        None => Complex::new(a, 0.0),
                    })
                    .collect()
            })
            .collect()
    };
    let mut x = stft.synthesize(&to_spectra(None));
    let mut history = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let current = stft.analyze(&x);
        x = stft.synthesize(&to_spectra(Some(&current)));
        history.push(spectral_convergence(&stft, linear, &x));
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let k = PEAK / peak;
        x.iter_mut().for_each(|v| *v *= k);
    }
    Ok((Waveform::new(x)?, history))
}

pub fn griffin_lim(linear: &Array2<f64>, n_iters: usize) -> Result<Waveform> {
    griffin_lim_with_history(linear, n_iters).map(|(w, _)| w)
}

/// Mel analysis of a waveform with the shared STFT settings.
pub fn mel_spectrogram(samples: &[f64], filterbank: &MelFilterbank) -> Result<MelSpectrogram> {
    let mag = Stft::new().magnitude(samples);
    if mag.nrows() == 0 {
        return Err(Error::EmptyInput(format!(
            "{} samples is shorter than one {WIN_SAMPLES}-sample window",
            samples.len()
        )));
    }
    MelSpectrogram::new(filterbank.apply(&mag))
}

/// Mel spectrogram to waveform.
pub fn vocode(mel: &MelSpectrogram, filterbank: &MelFilterbank, n_iters: usize) -> Result<Waveform> {
    griffin_lim(&mel_to_linear(mel, filterbank)?, n_iters)
}

/// Per-frame energy of a magnitude spectrogram.
pub fn frame_energy(magnitude: &Array2<f64>) -> Array1<f64> {
    magnitude.map_axis(ndarray::Axis(1), |r| r.mapv(|v| v * v).sum())
}
