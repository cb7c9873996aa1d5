//! Teacher-forced training, checkpoints and gradient verification.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_frame_ratio, read_manifest, LipSequence, MelSpectrogram, UtteranceRecord};
use crate::decoder::{synthesize, teacher_forced_forward, AttendMemory, DecoderCell, Fusion, Synthesis, TrainExample};
use crate::encoders::{speaker_lookup, text_encode, LipEncoder, VisualEmbedding};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelDims, Network, Variant};
use crate::nn::{Adam, Graph, Init, Mat, ParamStore, Var};
use crate::tensor_file::{read_tensor, write_tensor};
use crate::text::char_tokenize;
use crate::tva::Tva;

pub const LOSS_LOG: &str = "loss.log";
pub const INDEX_FILE: &str = "index.txt";
pub const MODEL_CONFIG_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model_variant: Variant,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Shrinks every layer width eightfold.
    pub toy_scale: bool,
    pub grad_clip: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Must stay set: the visual encoder is never trained.
    pub frozen_visual: bool,
    /// Checkpoint directory holding `visual.*` tensors; random init otherwise.
    pub visual_checkpoint: Option<PathBuf>,
    /// `[num_speakers x speaker_dim]` TensorFile of external speaker vectors.
    pub speaker_vectors: Option<PathBuf>,
    /// Defaults to one more than the largest speaker id in the manifest.
    pub num_speakers: Option<usize>,
    pub max_decoder_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_variant: Variant::Visualtts,
            learning_rate: 1e-3,
            batch_size: 16,
            max_steps: 2000,
            seed: 0,
            toy_scale: false,
            grad_clip: 1.0,
            checkpoint_every: 0,
            frozen_visual: true,
            visual_checkpoint: None,
            speaker_vectors: None,
            num_speakers: None,
            max_decoder_steps: 250,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dims(&self) -> ModelDims {
        if self.toy_scale {
            ModelDims::tiny()
        } else {
            ModelDims::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !self.frozen_visual {
            return Err(Error::Config(
                "training the visual encoder is not supported; set frozen_visual = true".into(),
            ));
        }
        if self.model_variant == Variant::Tacotron && self.visual_checkpoint.is_some() {
            return Err(Error::Config(
                "variant tacotron takes no visual input; drop visual_checkpoint".into(),
            ));
        }
        if self.max_decoder_steps == 0 {
            return Err(Error::Config("max_decoder_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loads the frozen lip encoder from a checkpoint directory, or draws it
/// from `seed`.
pub fn load_visual_encoder(checkpoint: Option<&Path>, seed: u64, out_dim: usize) -> Result<LipEncoder> {
    let mut enc = LipEncoder::random(seed, out_dim);
    if let Some(dir) = checkpoint {
        let tensors: BTreeMap<String, ArrayD<f32>> = read_index(dir)?
            .into_iter()
            .filter(|(name, _)| name.starts_with("visual."))
            .map(|(name, path)| Ok((name, read_tensor(&path)?.into_f32())))
            .collect::<Result<_>>()?;
        enc.load_tensors(&tensors)?;
    }
    Ok(enc)
}

/// Loads and checks every manifest record, caching visual embeddings when
/// the variant uses video.
pub fn load_examples(
    records: &[UtteranceRecord],
    encoder: Option<&LipEncoder>,
    num_speakers: usize,
) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| {
            let data_err = |detail: String| Error::Data {
                utt_id: r.utt_id.clone(),
                detail,
            };
            let mel_path = r
                .mel_path
                .as_ref()
                .ok_or_else(|| data_err("training needs a reference mel".into()))?;
            let mel = MelSpectrogram::load(mel_path)?;
            let lips = LipSequence::load(&r.lip_path)?;
            if lips.num_frames() != r.num_video_frames {
                return Err(data_err(format!(
                    "manifest says {} video frames, lip file has {}",
                    r.num_video_frames,
                    lips.num_frames()
                )));
            }
            check_frame_ratio(&r.utt_id, mel.num_frames(), lips.num_frames())?;
            if r.speaker_id >= num_speakers {
                return Err(data_err(format!("speaker {} outside 0..{num_speakers}", r.speaker_id)));
            }
            let alpha = encoder
                .map(|e| e.encode(&lips).map(|a| a.values().clone()))
                .transpose()?;
            Ok(TrainExample {
                utt_id: r.utt_id.clone(),
                tokens: char_tokenize(&r.text).map_err(|e| data_err(e.to_string()))?,
                speaker_id: r.speaker_id,
                num_video_frames: lips.num_frames(),
                alpha,
                mel: mel.into_frames(),
            })
        })
        .collect()
}

pub struct Trainer {
    pub config: TrainConfig,
    pub net: Network,
    pub params: ParamStore,
    pub visual: LipEncoder,
    pub examples: Vec<TrainExample>,
    adam: Adam,
    order: Vec<usize>,
    cursor: usize,
    shuffle_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, records: &[UtteranceRecord]) -> Result<Self> {
        config.validate()?;
        if records.is_empty() {
            return Err(Error::EmptyInput("no training records".into()));
        }
        let num_speakers = config
            .num_speakers
            .unwrap_or_else(|| records.iter().map(|r| r.speaker_id).max().unwrap_or(0) + 1);
        let dims = config.dims();
        let visual = load_visual_encoder(config.visual_checkpoint.as_deref(), config.seed, dims.visual_dim)?;
        let encoder = config.model_variant.uses_video().then_some(&visual);
        let examples = load_examples(records, encoder, num_speakers)?;
        Self::with_examples(config, visual, examples, num_speakers)
    }

    pub fn with_examples(
        config: TrainConfig,
        visual: LipEncoder,
        examples: Vec<TrainExample>,
        num_speakers: usize,
    ) -> Result<Self> {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::EmptyInput("no training examples".into()));
        }
        let mut model_config = ModelConfig::new(config.model_variant, config.dims(), num_speakers);
        model_config.max_decoder_steps = config.max_decoder_steps;
        let (net, mut params) = Network::new(model_config, config.seed)?;
        if let Some(path) = &config.speaker_vectors {
            let table: Array2<f64> = read_tensor(path)?
                .into_f64()
                .into_dimensionality()
                .map_err(|_| Error::Shape("speaker vectors must be a matrix".into()))?;
            net.speaker.import_all(&mut params, &table)?;
        }
        let adam = Adam::new(config.learning_rate, Some(config.grad_clip));
        let shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e_ed0f_ba7c);
        let order = (0..examples.len()).collect();
        let mut trainer = Self {
            config,
            net,
            params,
            visual,
            examples,
            adam,
            order,
            cursor: 0,
            shuffle_rng,
            step: 0,
        };
        trainer.reshuffle();
        Ok(trainer)
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.shuffle_rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.config.batch_size.min(self.examples.len());
        let mut batch = Vec::with_capacity(n);
        while batch.len() < n {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimizer update; returns the loss measured before it.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.step + 1;
        let idx = self.next_batch();
        let batch: Vec<&TrainExample> = idx.iter().map(|&i| &self.examples[i]).collect();
        let graph_seed = self.config.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (loss, grads) = {
            let mut g = Graph::train(&self.params, graph_seed);
            let tf = teacher_forced_forward(&mut g, &batch, &self.net)?;
            let loss = g.scalar(tf.loss);
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    step,
                    detail: format!("training loss is {loss}"),
                });
            }
            (loss, g.backward(tf.loss).into_params())
        };
        self.adam.step(&mut self.params, &grads);
        self.step = step;
        Ok(loss)
    }

    /// Evaluation-mode teacher-forced L1 over `examples`, averaged per value.
    pub fn teacher_forced_l1(&self, examples: &[TrainExample]) -> Result<f64> {
        teacher_forced_l1(&self.net, &self.params, examples, self.config.batch_size)
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        save_checkpoint(dir.as_ref(), &self.net, &self.params, &self.visual)
    }
}

pub fn teacher_forced_l1(
    net: &Network,
    params: &ParamStore,
    examples: &[TrainExample],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch: Vec<&TrainExample> = chunk.iter().collect();
        let mut g = Graph::eval(params);
        let tf = teacher_forced_forward(&mut g, &batch, net)?;
        let n = tf.targets.len() as f64;
        total += g.scalar(tf.l1) * n;
        count += n;
    }
    Ok(total / count)
}

/// Trains on `manifest`, appending `step<TAB>loss` lines to `loss.log` in
/// `out_dir`. Returns the final checkpoint directory.
pub fn train(config: &TrainConfig, manifest: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let records = read_manifest(manifest)?;
    let mut trainer = Trainer::new(config.clone(), &records)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    for _ in 0..config.max_steps {
        let loss = trainer.step()?;
        let step = trainer.steps_done();
        writeln!(log, "{step}\t{loss}").map_err(|e| Error::io(&log_path, e))?;
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < config.max_steps {
            trainer.save_checkpoint(out_dir.join(format!("step-{step:06}")))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.save_checkpoint(out_dir.join("final"))
}

fn tensor_file_name(name: &str) -> String {
    format!("tensors/{name}.vtts")
}

/// Writes one TensorFile per parameter plus an index and the model config.
pub fn save_checkpoint(dir: &Path, net: &Network, params: &ParamStore, visual: &LipEncoder) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for id in params.ids() {
        let name = params.name(id);
        let file = tensor_file_name(name);
        write_tensor(params.get(id), dir.join(&file))?;
        index.push_str(&format!("{name}\t{file}\n"));
    }
    for (name, t) in visual.named_tensors() {
        let file = tensor_file_name(&name);
        write_tensor(&t, dir.join(&file))?;
        index.push_str(&format!("{name}\t{file}\n"));
    }
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    let cfg_path = dir.join(MODEL_CONFIG_FILE);
    let cfg = serde_json::to_string_pretty(&net.config).expect("config serializes");
    fs::write(&cfg_path, cfg).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(dir.to_path_buf())
}

/// `(name, resolved path)` pairs of a checkpoint index.
pub fn read_index(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let (name, file) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.clone(),
                detail: format!("line {}: expected name<TAB>path", n + 1),
            })?;
            Ok((name.to_string(), dir.join(file)))
        })
        .collect()
}

/// A trained model ready for inference.
pub struct LoadedModel {
    pub net: Network,
    pub params: ParamStore,
    pub visual: LipEncoder,
}

impl LoadedModel {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg_path = dir.join(MODEL_CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: cfg_path.clone(),
            detail: e.to_string(),
        })?;
        let visual_dim = config.dims.visual_dim;
        let (net, mut params) = Network::new(config, 0)?;
        let index: BTreeMap<String, PathBuf> = read_index(dir)?.into_iter().collect();
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            let path = index
                .get(&name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {name}")))?;
            let value: Mat = read_tensor(path)?
                .into_f64()
                .into_dimensionality()
                .map_err(|_| Error::Shape(format!("{name} is not a matrix")))?;
            if value.dim() != params.get(id).dim() {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {:?}",
                    value.dim(),
                    params.get(id).dim()
                )));
            }
            *params.get_mut(id) = value;
        }
        let visual = load_visual_encoder(Some(dir), 0, visual_dim)?;
        Ok(Self { net, params, visual })
    }

    pub fn synthesize(&self, record: &UtteranceRecord) -> Result<(Synthesis, LipSequence)> {
        let lips = LipSequence::load(&record.lip_path)?;
        if lips.num_frames() != record.num_video_frames {
            return Err(Error::Data {
                utt_id: record.utt_id.clone(),
                detail: format!(
                    "manifest says {} video frames, lip file has {}",
                    record.num_video_frames,
                    lips.num_frames()
                ),
            });
        }
        let tokens = char_tokenize(&record.text)?;
        let alpha = if self.net.variant().uses_video() {
            self.visual.encode(&lips)?
        } else {
            // Only the frame count matters when no video is used.
            VisualEmbedding::new(Array2::zeros((lips.num_frames(), 1)))?
        };
        let beta = text_encode(&tokens, &self.net.text, &self.params)?;
        let gamma = speaker_lookup(record.speaker_id, &self.net.speaker, &self.params)?;
        Ok((synthesize(&alpha, &beta, &gamma, &self.net, &self.params)?, lips))
    }
}

/// Components whose gradients [`grad_check`] verifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradComponent {
    Tva,
    Fusion,
    DecoderStep,
    EndToEndTiny,
}

impl GradComponent {
    pub const ALL: [GradComponent; 4] = [
        GradComponent::Tva,
        GradComponent::Fusion,
        GradComponent::DecoderStep,
        GradComponent::EndToEndTiny,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GradComponent::Tva => "tva",
            GradComponent::Fusion => "fusion",
            GradComponent::DecoderStep => "decoder_step",
            GradComponent::EndToEndTiny => "end_to_end_tiny",
        }
    }
}

impl std::str::FromStr for GradComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradComponent::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown grad-check component '{s}'")))
    }
}

/// Denominator guard for relative errors of near-zero gradients.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;
/// Coordinates sampled per tensor for the larger checks.
const SAMPLES_PER_TENSOR: usize = 24;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Compares backward-pass gradients of every parameter in `store` against
/// central differences. `sample` limits the coordinates checked per tensor.
fn compare_gradients(
    store: &mut ParamStore,
    eps: f64,
    sample: Option<usize>,
    train_seed: Option<u64>,
    loss: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<f64> {
    let evaluate = |store: &ParamStore| -> Result<f64> {
        let mut g = match train_seed {
            Some(s) => Graph::train(store, s),
            None => Graph::eval(store),
        };
        let l = loss(&mut g)?;
        Ok(g.scalar(l))
    };
    let analytic = {
        let mut g = match train_seed {
            Some(s) => Graph::train(store, s),
            None => Graph::eval(store),
        };
        let l = loss(&mut g)?;
        g.backward(l).into_params()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (rows, cols) = store.get(id).dim();
        let mut coords: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        if let Some(k) = sample {
            coords.shuffle(&mut rng);
            coords.truncate(k);
        }
        for (r, c) in coords {
            let orig = store.get(id)[[r, c]];
            store.get_mut(id)[[r, c]] = orig + eps;
            let plus = evaluate(store)?;
            store.get_mut(id)[[r, c]] = orig - eps;
            let minus = evaluate(store)?;
            store.get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&id).map_or(0.0, |g| g[[r, c]]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Maximum relative error between analytic and central-difference gradients
/// on a fixed-seed tiny instance of `component`.
pub fn grad_check(component: GradComponent, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Validation("epsilon must be positive".into()));
    }
    let dims = ModelDims::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut store = ParamStore::new();
    match component {
        GradComponent::Tva => {
            let (tva, beta, alpha, weights) = {
                let mut init = Init::new(&mut store, 1);
                let tva = Tva::new(
                    &mut init,
                    dims.tva_heads,
                    dims.tva_head_dim,
                    dims.text_dim(),
                    dims.visual_dim,
                    dims.tva_out,
                );
                let beta = init.store().add("input.beta", random_mat(3, dims.text_dim(), &mut rng));
                let alpha = init
                    .store()
                    .add("input.alpha", random_mat(5, dims.visual_dim, &mut rng));
                (tva, beta, alpha, random_mat(3, dims.tva_out, &mut rng))
            };
            compare_gradients(&mut store, eps, None, None, |g| {
                let (b, a) = (g.param(beta), g.param(alpha));
                let (ctx, _) = tva.forward(g, b, a);
                let w = g.constant(weights.clone());
                let p = g.mul(ctx, w);
                Ok(g.sum_all(p))
            })
        }
        GradComponent::Fusion => {
            let (fusion, prev, alpha, spk, weights) = {
                let mut init = Init::new(&mut store, 2);
                let fusion = Fusion::new(&mut init, &dims, true);
                let prev = init
                    .store()
                    .add("input.prev_mel", random_mat(2, dims.mel_bins, &mut rng).mapv(f64::abs));
                let alpha = init
                    .store()
                    .add("input.alpha", random_mat(2, dims.visual_dim, &mut rng));
                let spk = init
                    .store()
                    .add("input.speaker", random_mat(2, dims.speaker_proj, &mut rng));
                (fusion, prev, alpha, spk, random_mat(2, dims.fusion_dim, &mut rng))
            };
            compare_gradients(&mut store, eps, None, None, |g| {
                let (m, a, s) = (g.param(prev), g.param(alpha), g.param(spk));
                let out = fusion.forward(g, m, Some(a), s);
                let w = g.constant(weights.clone());
                let p = g.mul(out, w);
                Ok(g.sum_all(p))
            })
        }
        GradComponent::DecoderStep => {
            // Two utterances with 3 and 2 memory rows exercise the segment ops.
            let counts = vec![3, 2];
            let mem_dim = dims.memory_dim();
            let (cell, fused, memory, state, w_frames, w_ctx) = {
                let mut init = Init::new(&mut store, 3);
                let cell = DecoderCell::new(&mut init, &dims, true);
                let s = init.store();
                let fused = s.add("input.fused", random_mat(2, dims.fusion_dim, &mut rng));
                let memory = s.add("input.memory", random_mat(5, mem_dim, &mut rng));
                let state: Vec<_> = [
                    ("attn_h", dims.attn_rnn),
                    ("attn_c", dims.attn_rnn),
                    ("h0", dims.dec_lstm),
                    ("h1", dims.dec_lstm),
                    ("c0", dims.dec_lstm),
                    ("c1", dims.dec_lstm),
                    ("context", mem_dim),
                ]
                .into_iter()
                .map(|(n, w)| s.add(format!("input.{n}"), random_mat(2, w, &mut rng) * 0.5))
                .collect();
                (
                    cell,
                    fused,
                    memory,
                    state,
                    random_mat(2, dims.step_width(), &mut rng),
                    random_mat(2, mem_dim, &mut rng),
                )
            };
            compare_gradients(&mut store, eps, Some(SAMPLES_PER_TENSOR), None, |g| {
                let v: Vec<Var> = state.iter().map(|&id| g.param(id)).collect();
                let st = crate::decoder::CellVars {
                    attn_h: v[0],
                    attn_c: v[1],
                    h: [v[2], v[3]],
                    c: [v[4], v[5]],
                    context: v[6],
                };
                let values = g.param(memory);
                let keys = cell.memory_keys(g, values);
                let mem = AttendMemory {
                    keys,
                    values,
                    counts: counts.clone(),
                };
                let f = g.param(fused);
                let fg = cell.fused_gates(g, f);
                let out = cell.step(g, fg, st, &mem);
                let wf = g.constant(w_frames.clone());
                let wc = g.constant(w_ctx.clone());
                let a = g.mul(out.frames, wf);
                let b = g.mul(out.state.context, wc);
                let a = g.sum_all(a);
                let b = g.sum_all(b);
                let gate = out.gate.expect("gated cell");
                let gate = g.sum_all(gate);
                let total = g.add(a, b);
                Ok(g.add(total, gate))
            })
        }
        GradComponent::EndToEndTiny => {
            let config = ModelConfig::new(Variant::Visualtts, dims.clone(), 2);
            let (net, mut params) = Network::new(config, 4)?;
            // Zero biases put the prenet ReLUs on their kink for the all-zero go frame.
            let ids: Vec<_> = params.ids().collect();
            for id in ids {
                if params.get(id).iter().all(|&v| v == 0.0) {
                    let (r, c) = params.get(id).dim();
                    *params.get_mut(id) = random_mat(r, c, &mut rng) * 0.1;
                }
            }
            let example = TrainExample {
                utt_id: "grad".into(),
                tokens: char_tokenize("ab")?,
                speaker_id: 1,
                num_video_frames: 2,
                alpha: Some(random_mat(2, dims.visual_dim, &mut rng)),
                mel: random_mat(8, dims.mel_bins, &mut rng).mapv(f64::abs),
            };
            compare_gradients(&mut params, eps, Some(SAMPLES_PER_TENSOR), Some(9), |g| {
                let tf = teacher_forced_forward(g, &[&example], &net)?;
                Ok(tf.loss)
            })
        }
    }
}

/// Deterministic snapshot of the frozen encoder's parameters.
pub fn visual_snapshot(encoder: &LipEncoder) -> Vec<(String, Vec<u32>)> {
    encoder
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Mean of `values`; zero for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        Array1::from(values.to_vec()).mean().unwrap_or(0.0)
    }
}
