//! Domain types for the audio and visual streams, and the utterance manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_file::{read_tensor, write_tensor};

pub const SAMPLE_RATE: u32 = 24_000;
pub const HOP_SAMPLES: usize = 240;
pub const WIN_SAMPLES: usize = 960;
pub const NUM_MELS: usize = 80;
pub const VIDEO_FPS: u32 = 25;
/// Mel frames per video frame: 100 mel frames/s against 25 video frames/s.
pub const FRAME_RATIO: usize = 4;
/// Side length of the square grayscale lip crop.
pub const LIP_SIZE: usize = 88;

/// Grayscale lip crops, one 88x88 image per video frame at 25 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct LipSequence {
    frames: Array3<f32>,
}

impl LipSequence {
    pub fn new(frames: Array3<f32>) -> Result<Self> {
        let (t, h, w) = frames.dim();
        if t == 0 {
            return Err(Error::EmptyInput("lip sequence has no frames".into()));
        }
        if h != LIP_SIZE || w != LIP_SIZE {
            return Err(Error::Shape(format!(
                "lip frames are {h}x{w}, expected {LIP_SIZE}x{LIP_SIZE}"
            )));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!(
                "lip pixel {v} outside the finite range [0, 1]"
            )));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Array3<f32> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t = read_tensor(path)?.into_f32();
        let t = t
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::Shape(format!("lip tensor must be rank 3: {e}")))?;
        Self::new(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(&self.frames, path)
    }
}

/// An 80-band mel spectrogram at 100 frames/s, stored as linear mel magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Array2<f64>,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        let (t, bins) = frames.dim();
        if t == 0 {
            return Err(Error::EmptyInput("mel spectrogram has no frames".into()));
        }
        if bins != NUM_MELS {
            return Err(Error::Shape(format!(
                "mel spectrogram has {bins} bins, expected {NUM_MELS}"
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("mel spectrogram has non-finite values".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t = read_tensor(path)?.into_f64();
        let t = t
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Shape(format!("mel tensor must be rank 2: {e}")))?;
        Self::new(t)
    }

    /// Writes as f32, the on-disk precision for data artifacts.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(&self.frames.mapv(|v| v as f32), path)
    }
}

/// Checks the 4:1 mel/video frame lock for a paired utterance.
pub fn check_frame_ratio(utt_id: &str, mel_frames: usize, video_frames: usize) -> Result<()> {
    if mel_frames != FRAME_RATIO * video_frames {
        return Err(Error::Data {
            utt_id: utt_id.to_string(),
            detail: format!(
                "{mel_frames} mel frames for {video_frames} video frames, expected {}",
                FRAME_RATIO * video_frames
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: usize,
    pub text: String,
    pub lip_path: PathBuf,
    pub mel_path: Option<PathBuf>,
    pub num_video_frames: usize,
}

impl UtteranceRecord {
    /// Paths in a manifest are relative to the manifest's directory.
    pub fn resolve(&self, base: &Path) -> UtteranceRecord {
        let join = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        UtteranceRecord {
            lip_path: join(&self.lip_path),
            mel_path: self.mel_path.as_deref().map(join),
            ..self.clone()
        }
    }
}

pub fn write_manifest(records: &[UtteranceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and resolves its relative paths.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?;
        records.push(rec.resolve(base));
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(format!("manifest {} has no records", path.display())));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lip_sequence_rejects_bad_shapes_and_values() {
        assert!(matches!(
            LipSequence::new(Array3::zeros((2, 64, 64))),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            LipSequence::new(Array3::zeros((0, 88, 88))),
            Err(Error::EmptyInput(_))
        ));
        let mut f = Array3::zeros((1, 88, 88));
        f[[0, 3, 3]] = 1.5;
        assert!(matches!(LipSequence::new(f), Err(Error::Validation(_))));
    }

    #[test]
    fn mel_requires_80_bins() {
        assert!(MelSpectrogram::new(Array2::zeros((4, 80))).is_ok());
        assert!(matches!(
            MelSpectrogram::new(Array2::zeros((4, 81))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ratio_check_names_utterance() {
        assert!(check_frame_ratio("u1", 56, 14).is_ok());
        let err = check_frame_ratio("u2", 55, 14).unwrap_err();
        assert!(err.to_string().contains("u2"));
    }

    #[test]
    fn manifest_lines_have_exact_fields() {
        let dir = tempfile::tempdir().unwrap();
        let rec = UtteranceRecord {
            utt_id: "s0_u0".into(),
            speaker_id: 3,
            text: "bin blue".into(),
            lip_path: "lips/s0_u0.vtts".into(),
            mel_path: Some("mels/s0_u0.vtts".into()),
            num_video_frames: 14,
        };
        let path = dir.path().join("manifest.jsonl");
        write_manifest(std::slice::from_ref(&rec), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.trim(),
            r#"{"utt_id":"s0_u0","speaker_id":3,"text":"bin blue","lip_path":"lips/s0_u0.vtts","mel_path":"mels/s0_u0.vtts","num_video_frames":14}"#
        );
        let back = read_manifest(&path).unwrap();
        assert_eq!(back[0].lip_path, dir.path().join("lips/s0_u0.vtts"));
        assert_eq!(back[0].speaker_id, 3);
    }

    #[test]
    fn manifest_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            r#"{"utt_id":"a","speaker_id":0,"text":"x","lip_path":"l","mel_path":null,"num_video_frames":1,"extra":1}"#,
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Parse { .. })));
    }
}
