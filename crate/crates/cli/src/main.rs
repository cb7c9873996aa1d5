use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use visualtts::data::{read_manifest, LipSequence, MelSpectrogram, UtteranceRecord};
use visualtts::metrics::{frame_disturbance, sync_proxy_score, usable_max_offset, DEFAULT_MAX_OFFSET};
use visualtts::tensor_file::write_tensor;
use visualtts::training::{grad_check, train, GradComponent, LoadedModel, TrainConfig};
use visualtts::vocoder::{vocode, MelFilterbank, DEFAULT_ITERATIONS};
use visualtts::{toy, Error};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const GRAD_TOLERANCE: f64 = 1e-3;

/// Lip-synchronized speech synthesis.
#[derive(Debug, Parser)]
#[command(name = "visualtts", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic paired lip/mel corpus and its manifest.
    MakeToyData {
        /// Random seed.
        #[arg(long)]
        seed: u64,
        /// Number of utterances.
        #[arg(long)]
        n_utts: usize,
        /// Number of speakers.
        #[arg(long)]
        n_speakers: usize,
        /// Output directory; the manifest is written as manifest.jsonl inside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints plus loss.log.
    Train {
        /// TOML training config.
        #[arg(long)]
        config: PathBuf,
        /// Training manifest (JSON lines).
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize mels, alignments and waveforms for every manifest record.
    Synth {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of utterances to synthesize.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Griffin-Lim iterations per waveform.
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        griffin_lim_iters: usize,
    },
    /// Score synthesized mels against references and lip videos.
    Eval {
        /// Manifest with reference mels.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory written by `synth`.
        #[arg(long)]
        synth_dir: PathBuf,
        /// JSON report path.
        #[arg(long)]
        report: PathBuf,
        /// Largest audio-visual offset searched, in video frames.
        #[arg(long, default_value_t = DEFAULT_MAX_OFFSET)]
        max_offset: usize,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        /// tva, fusion, decoder_step, end_to_end_tiny or all.
        #[arg(long)]
        component: String,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
}

/// Failure carrying the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_validation() {
            EXIT_VALIDATION
        } else {
            EXIT_RUNTIME
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_VALIDATION),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn echo(value: &impl Serialize) {
    eprintln!("{}", serde_json::to_string(value).expect("config serializes"));
}

fn run(command: Command) -> Result<(), Failure> {
    echo(&command);
    match command {
        Command::MakeToyData {
            seed,
            n_utts,
            n_speakers,
            out,
        } => {
            let manifest = toy::make_toy_dataset(seed, n_utts, n_speakers, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train { config, manifest, out } => {
            let config = TrainConfig::load(&config)?;
            eprint!("{}", config.to_toml());
            let final_dir = train(&config, &manifest, &out)?;
            println!("{}", final_dir.display());
            Ok(())
        }
        Command::Synth {
            checkpoint,
            manifest,
            out,
            griffin_lim_iters,
        } => synth(&checkpoint, &manifest, &out, griffin_lim_iters),
        Command::Eval {
            manifest,
            synth_dir,
            report,
            max_offset,
        } => eval(&manifest, &synth_dir, &report, max_offset),
        Command::GradCheck { component, eps } => run_grad_check(&component, eps),
    }
}

fn synth(checkpoint: &Path, manifest: &Path, out: &Path, iters: usize) -> Result<(), Failure> {
    let model = LoadedModel::load(checkpoint)?;
    let records = read_manifest(manifest)?;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let filterbank = MelFilterbank::default();
    for record in &records {
        let (synthesis, _) = model.synthesize(record)?;
        let id = &record.utt_id;
        write_tensor(synthesis.mel.frames(), out.join(format!("{id}.mel.vtts")))?;
        write_tensor(
            &synthesis.decoder_alignment,
            out.join(format!("{id}.decoder_alignment.vtts")),
        )?;
        if let Some(w) = &synthesis.tva_weights {
            write_tensor(w, out.join(format!("{id}.tva_alignment.vtts")))?;
        }
        vocode(&synthesis.mel, &filterbank, iters)?.write_wav(out.join(format!("{id}.wav")))?;
        println!("{id}\t{} mel frames", synthesis.mel.num_frames());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct UtteranceScore {
    utt_id: String,
    fd: Option<f64>,
    distance_like: Option<f64>,
    confidence_like: Option<f64>,
    best_offset_frames: Option<i64>,
    error: Option<String>,
}

fn score(record: &UtteranceRecord, synth_dir: &Path, max_offset: usize) -> Result<UtteranceScore, Error> {
    let synth = MelSpectrogram::load(synth_dir.join(format!("{}.mel.vtts", record.utt_id)))?;
    let reference_path = record.mel_path.as_ref().ok_or_else(|| Error::Data {
        utt_id: record.utt_id.clone(),
        detail: "manifest record has no reference mel".into(),
    })?;
    let reference = MelSpectrogram::load(reference_path)?;
    let lips = LipSequence::load(&record.lip_path)?;
    let fd = frame_disturbance(&synth, &reference)?;
    let sync = sync_proxy_score(&synth, &lips, usable_max_offset(lips.num_frames(), max_offset))?;
    Ok(UtteranceScore {
        utt_id: record.utt_id.clone(),
        fd: Some(fd),
        distance_like: Some(sync.distance_like),
        confidence_like: Some(sync.confidence_like),
        best_offset_frames: Some(sync.best_offset_frames),
        error: None,
    })
}

fn mean_of(scores: &[UtteranceScore], f: impl Fn(&UtteranceScore) -> Option<f64>) -> Option<f64> {
    let values: Vec<f64> = scores.iter().filter_map(f).collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn eval(manifest: &Path, synth_dir: &Path, report: &Path, max_offset: usize) -> Result<(), Failure> {
    let records = read_manifest(manifest)?;
    let mut worst: Option<Failure> = None;
    let mut scores = Vec::with_capacity(records.len());
    for record in &records {
        match score(record, synth_dir, max_offset) {
            Ok(s) => scores.push(s),
            Err(e) => {
                let f = Failure::from(e);
                eprintln!("{}: {}", record.utt_id, f.message);
                scores.push(UtteranceScore {
                    utt_id: record.utt_id.clone(),
                    fd: None,
                    distance_like: None,
                    confidence_like: None,
                    best_offset_frames: None,
                    error: Some(f.message.clone()),
                });
                if worst.as_ref().is_none_or(|w| f.code > w.code) {
                    worst = Some(f);
                }
            }
        }
    }
    let failed = scores.iter().filter(|s| s.error.is_some()).count();
    let doc = json!({
        "utterances": scores,
        "summary": {
            "count": scores.len(),
            "failed": failed,
            "mean_fd": mean_of(&scores, |s| s.fd),
            "mean_distance_like": mean_of(&scores, |s| s.distance_like),
            "mean_confidence_like": mean_of(&scores, |s| s.confidence_like),
        },
    });
    let text = serde_json::to_string_pretty(&doc).expect("report serializes");
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    fs::write(report, text + "\n").map_err(|e| io_failure(report, e))?;
    println!(
        "{}",
        serde_json::to_string(&doc["summary"]).expect("summary serializes")
    );
    match worst {
        None => Ok(()),
        Some(f) => Err(Failure {
            code: f.code,
            message: format!("{failed} of {} utterances failed; worst: {}", scores.len(), f.message),
        }),
    }
}

fn run_grad_check(component: &str, eps: f64) -> Result<(), Failure> {
    let components = if component == "all" {
        GradComponent::ALL.to_vec()
    } else {
        vec![component.parse::<GradComponent>()?]
    };
    let mut failed = Vec::new();
    for c in components {
        let err = grad_check(c, eps)?;
        let pass = err < GRAD_TOLERANCE;
        println!(
            "{}",
            json!({"component": c.as_str(), "max_relative_error": err, "pass": pass})
        );
        if !pass {
            failed.push(c.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_RUNTIME,
            message: format!("gradient mismatch above {GRAD_TOLERANCE} in {}", failed.join(", ")),
        })
    }
}
