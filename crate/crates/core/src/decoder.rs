//! Autoregressive mel decoder: prenet and visual fusion, an attention RNN
//! over the text memory, two zoneout LSTMs and a linear frame head.
//!
//! Training runs a whole batch through one graph. Utterances are sorted by
//! length so the utterances still decoding at step `s` always form a prefix
//! of the batch; rows of every per-step tensor are laid out step-major.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, Array3, Axis};

use crate::data::{check_frame_ratio, MelSpectrogram, FRAME_RATIO};
use crate::encoders::{SpeakerEmbedding, TextualEmbedding, VisualEmbedding};
use crate::error::{Error, Result};
use crate::model::{ModelDims, Network};
use crate::nn::{dropout, zoneout, Graph, Init, Linear, Lstm, Mat, ParamStore, Var};
use crate::text::CharacterSequence;

/// Video frame conditioning mel frame `mel_frame`.
pub fn video_index(mel_frame: i64, t_v: usize) -> Result<usize> {
    if mel_frame < 0 {
        return Err(Error::Validation(format!("negative mel frame index {mel_frame}")));
    }
    if t_v == 0 {
        return Err(Error::Validation("video has no frames".into()));
    }
    Ok((mel_frame as usize / FRAME_RATIO).min(t_v - 1))
}

/// Number of decoder steps that produce exactly `FRAME_RATIO * t_v` frames.
pub fn locked_steps(t_v: usize, frames_per_step: usize) -> usize {
    FRAME_RATIO * t_v / frames_per_step
}

#[derive(Debug, Clone)]
pub struct Fusion {
    prenet: [Linear; 2],
    project: Linear,
    speaker_map: Linear,
    dropout: f64,
    visual: bool,
    mel_bins: usize,
    visual_dim: usize,
    speaker_proj: usize,
    out_dim: usize,
}

impl Fusion {
    /// With `visual` unset the visual frame is not part of the input.
    pub fn new(init: &mut Init, dims: &ModelDims, visual: bool) -> Self {
        let [p0, p1] = dims.dec_prenet;
        let project_in = if visual { p1 + dims.visual_dim } else { p1 };
        Self {
            prenet: [
                Linear::new(init, "decoder.prenet.0", dims.mel_bins, p0),
                Linear::new(init, "decoder.prenet.1", p0, p1),
            ],
            project: Linear::new(init, "decoder.fusion", project_in, dims.fusion_dim),
            speaker_map: Linear::new(init, "decoder.speaker_map", dims.speaker_proj, dims.fusion_dim),
            dropout: dims.prenet_dropout,
            visual,
            mel_bins: dims.mel_bins,
            visual_dim: dims.visual_dim,
            speaker_proj: dims.speaker_proj,
            out_dim: dims.fusion_dim,
        }
    }

    pub fn uses_visual(&self) -> bool {
        self.visual
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Row-wise fusion of previous mel frames, their visual frames and the
    /// projected speaker vectors. `alpha` is ignored without visual fusion.
    pub fn forward(&self, g: &mut Graph, prev_mel: Var, alpha: Option<Var>, speaker: Var) -> Var {
        let mut x = prev_mel;
        for layer in &self.prenet {
            x = layer.forward(g, x);
            x = g.relu(x);
            x = dropout(g, x, self.dropout);
        }
        if self.visual {
            let a = alpha.expect("visual fusion needs visual frames");
            x = g.concat_cols(&[x, a]);
        }
        let fused = self.project.forward(g, x);
        let spk = self.speaker_map.forward(g, speaker);
        g.add(fused, spk)
    }

    pub fn speaker_map(&self) -> &Linear {
        &self.speaker_map
    }

    pub fn prenet(&self) -> &[Linear; 2] {
        &self.prenet
    }

    pub fn projection(&self) -> &Linear {
        &self.project
    }
}

/// Evaluation-mode fusion of a single frame.
pub fn fuse(
    prev_mel: &Array1<f64>,
    alpha_frame: Option<&Array1<f64>>,
    gamma: &SpeakerEmbedding,
    fusion: &Fusion,
    params: &ParamStore,
) -> Result<Array1<f64>> {
    if prev_mel.len() != fusion.mel_bins {
        return Err(Error::Shape(format!(
            "previous mel frame has {} bins, expected {}",
            prev_mel.len(),
            fusion.mel_bins
        )));
    }
    if gamma.projected.len() != fusion.speaker_proj {
        return Err(Error::Shape(format!(
            "projected speaker vector has {} values, expected {}",
            gamma.projected.len(),
            fusion.speaker_proj
        )));
    }
    let alpha = match (fusion.visual, alpha_frame) {
        (true, Some(a)) if a.len() == fusion.visual_dim => Some(a),
        (true, Some(a)) => {
            return Err(Error::Shape(format!(
                "visual frame has {} values, expected {}",
                a.len(),
                fusion.visual_dim
            )))
        }
        (true, None) => return Err(Error::Validation("visual fusion needs a visual frame".into())),
        (false, _) => None,
    };
    let all = prev_mel
        .iter()
        .chain(gamma.projected.iter())
        .chain(alpha.into_iter().flatten());
    if all.clone().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite fusion input".into()));
    }
    let mut g = Graph::eval(params);
    let m = g.constant(row(prev_mel));
    let a = alpha.map(|a| g.constant(row(a)));
    let spk = g.constant(row(&gamma.projected));
    let out = fusion.forward(&mut g, m, a, spk);
    Ok(g.value(out).row(0).to_owned())
}

fn row(v: &Array1<f64>) -> Mat {
    v.clone().insert_axis(Axis(0))
}

/// Recurrent state of a batch of `n` utterances inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub attn_h: Var,
    pub attn_c: Var,
    pub h: [Var; 2],
    pub c: [Var; 2],
    pub context: Var,
}

impl CellVars {
    fn map(self, mut f: impl FnMut(Var) -> Var) -> Self {
        Self {
            attn_h: f(self.attn_h),
            attn_c: f(self.attn_c),
            h: [f(self.h[0]), f(self.h[1])],
            c: [f(self.c[0]), f(self.c[1])],
            context: f(self.context),
        }
    }

    /// Keeps the first `n` rows.
    pub fn truncate(self, g: &mut Graph, n: usize) -> Self {
        if g.shape(self.attn_h).0 == n {
            return self;
        }
        self.map(|v| g.slice_rows(v, 0, n))
    }
}

/// Attention memory of the active utterances: `counts[i]` consecutive rows
/// of `keys` and `values` belong to utterance `i`.
#[derive(Debug, Clone)]
pub struct AttendMemory {
    pub keys: Var,
    pub values: Var,
    pub counts: Vec<usize>,
}

pub struct CellOutput {
    pub state: CellVars,
    /// `[n x frames_per_step * mel_bins]`.
    pub frames: Var,
    /// `[n x 1]` stop logits for gated variants.
    pub gate: Option<Var>,
    /// `[sum(counts) x 1]` attention weights.
    pub weights: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderCell {
    fused_in: Linear,
    attn_rnn: Lstm,
    query: Linear,
    memory_key: Linear,
    energy: Linear,
    lstm: [Lstm; 2],
    out: Linear,
    gate: Option<Linear>,
    zoneout: f64,
    dims: ModelDims,
}

impl DecoderCell {
    pub fn new(init: &mut Init, dims: &ModelDims, gated: bool) -> Self {
        let mem = dims.memory_dim();
        let head_in = dims.dec_lstm + mem;
        Self {
            fused_in: Linear::no_bias(init, "decoder.attn_rnn.w_fused", dims.fusion_dim, 4 * dims.attn_rnn),
            attn_rnn: Lstm::new(init, "decoder.attn_rnn", mem, dims.attn_rnn),
            query: Linear::no_bias(init, "decoder.attention.query", dims.attn_rnn, dims.attn_dim),
            memory_key: Linear::no_bias(init, "decoder.attention.memory", mem, dims.attn_dim),
            energy: Linear::no_bias(init, "decoder.attention.energy", dims.attn_dim, 1),
            lstm: [
                Lstm::new(init, "decoder.lstm.0", dims.attn_rnn + mem, dims.dec_lstm),
                Lstm::new(init, "decoder.lstm.1", dims.dec_lstm, dims.dec_lstm),
            ],
            out: Linear::new(init, "decoder.output", head_in, dims.step_width()),
            gate: gated.then(|| Linear::new(init, "decoder.gate", head_in, 1)),
            zoneout: dims.zoneout,
            dims: dims.clone(),
        }
    }

    pub fn is_gated(&self) -> bool {
        self.gate.is_some()
    }

    pub fn output_head(&self) -> &Linear {
        &self.out
    }

    pub fn zero_state(&self, g: &mut Graph, n: usize) -> CellVars {
        let d = &self.dims;
        let mut z = |w: usize| g.constant(Mat::zeros((n, w)));
        CellVars {
            attn_h: z(d.attn_rnn),
            attn_c: z(d.attn_rnn),
            h: [z(d.dec_lstm), z(d.dec_lstm)],
            c: [z(d.dec_lstm), z(d.dec_lstm)],
            context: z(d.memory_dim()),
        }
    }

    /// Attention keys for memory rows; computed once per sequence.
    pub fn memory_keys(&self, g: &mut Graph, memory: Var) -> Var {
        self.memory_key.forward(g, memory)
    }

    /// The fused-input part of the attention-RNN gates; batchable over steps.
    pub fn fused_gates(&self, g: &mut Graph, fused: Var) -> Var {
        self.fused_in.forward(g, fused)
    }

    pub fn step(&self, g: &mut Graph, fused_gates: Var, st: CellVars, mem: &AttendMemory) -> CellOutput {
        let ctx_gates = self.attn_rnn.project_input(g, st.context);
        let gates = g.add(fused_gates, ctx_gates);
        let (attn_h, attn_c) = self.attn_rnn.step(g, gates, st.attn_h, st.attn_c);

        let q = self.query.forward(g, attn_h);
        let q = g.expand_rows(q, &mem.counts);
        let e = g.add(q, mem.keys);
        let e = g.tanh(e);
        let energies = self.energy.forward(g, e);
        let weights = g.segment_softmax(energies, &mem.counts);
        let context = g.segment_weighted_sum(weights, mem.values, &mem.counts);

        let x = g.concat_cols(&[attn_h, context]);
        let mut h = st.h;
        let mut c = st.c;
        let mut input = x;
        for (l, lstm) in self.lstm.iter().enumerate() {
            let gi = lstm.project_input(g, input);
            let (hn, cn) = lstm.step(g, gi, st.h[l], st.c[l]);
            h[l] = zoneout(g, st.h[l], hn, self.zoneout);
            c[l] = zoneout(g, st.c[l], cn, self.zoneout);
            input = h[l];
        }

        let y = g.concat_cols(&[h[1], context]);
        let frames = self.out.forward(g, y);
        let gate = self.gate.as_ref().map(|l| l.forward(g, y));
        CellOutput {
            state: CellVars {
                attn_h,
                attn_c,
                h,
                c,
                context,
            },
            frames,
            gate,
            weights,
        }
    }
}

/// Text-side memory rows `[T_t x memory_dim]` of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMemory {
    rows: Array2<f64>,
}

impl DecoderMemory {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::EmptyInput("decoder memory has no rows".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("decoder memory has non-finite values".into()));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub attention_rnn_hidden: Array1<f64>,
    pub attention_rnn_cell: Array1<f64>,
    pub lstm_hiddens: [Array1<f64>; 2],
    pub lstm_cells: [Array1<f64>; 2],
    pub attention_context: Array1<f64>,
    pub step_index: usize,
    /// Steps allowed before the stop contract is violated.
    pub step_limit: usize,
}

impl DecoderState {
    pub fn initial(dims: &ModelDims, step_limit: usize) -> Self {
        let z = |n: usize| Array1::zeros(n);
        Self {
            attention_rnn_hidden: z(dims.attn_rnn),
            attention_rnn_cell: z(dims.attn_rnn),
            lstm_hiddens: [z(dims.dec_lstm), z(dims.dec_lstm)],
            lstm_cells: [z(dims.dec_lstm), z(dims.dec_lstm)],
            attention_context: z(dims.memory_dim()),
            step_index: 0,
            step_limit,
        }
    }

    fn is_finite(&self) -> bool {
        [
            &self.attention_rnn_hidden,
            &self.attention_rnn_cell,
            &self.lstm_hiddens[0],
            &self.lstm_hiddens[1],
            &self.lstm_cells[0],
            &self.lstm_cells[1],
            &self.attention_context,
        ]
        .iter()
        .all(|a| a.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `[frames_per_step x mel_bins]`.
    pub mel_pair: Array2<f64>,
    pub state: DecoderState,
    pub alignment: Array1<f64>,
    pub stop_logit: Option<f64>,
}

pub fn decode_step(
    state: &DecoderState,
    fused: &Array1<f64>,
    memory: &DecoderMemory,
    cell: &DecoderCell,
    params: &ParamStore,
) -> Result<StepOutput> {
    if state.step_index >= state.step_limit {
        return Err(Error::StopContract {
            step: state.step_index,
            limit: state.step_limit,
        });
    }
    let d = &cell.dims;
    if fused.len() != d.fusion_dim {
        return Err(Error::Shape(format!(
            "fused input has {} values, expected {}",
            fused.len(),
            d.fusion_dim
        )));
    }
    if memory.rows.ncols() != d.memory_dim() {
        return Err(Error::Shape(format!(
            "memory rows have {} values, expected {}",
            memory.rows.ncols(),
            d.memory_dim()
        )));
    }
    let mut g = Graph::eval(params);
    let st = CellVars {
        attn_h: g.constant(row(&state.attention_rnn_hidden)),
        attn_c: g.constant(row(&state.attention_rnn_cell)),
        h: [
            g.constant(row(&state.lstm_hiddens[0])),
            g.constant(row(&state.lstm_hiddens[1])),
        ],
        c: [
            g.constant(row(&state.lstm_cells[0])),
            g.constant(row(&state.lstm_cells[1])),
        ],
        context: g.constant(row(&state.attention_context)),
    };
    let values = g.constant(memory.rows.clone());
    let keys = cell.memory_keys(&mut g, values);
    let mem = AttendMemory {
        keys,
        values,
        counts: vec![memory.rows.nrows()],
    };
    let fused = g.constant(row(fused));
    let fused_gates = cell.fused_gates(&mut g, fused);
    let out = cell.step(&mut g, fused_gates, st, &mem);

    let first = |v: Var| g.value(v).row(0).to_owned();
    let new_state = DecoderState {
        attention_rnn_hidden: first(out.state.attn_h),
        attention_rnn_cell: first(out.state.attn_c),
        lstm_hiddens: [first(out.state.h[0]), first(out.state.h[1])],
        lstm_cells: [first(out.state.c[0]), first(out.state.c[1])],
        attention_context: first(out.state.context),
        step_index: state.step_index + 1,
        step_limit: state.step_limit,
    };
    let mel_pair = g
        .value(out.frames)
        .clone()
        .into_shape_with_order((d.frames_per_step, d.mel_bins))
        .expect("frame head width");
    let alignment = g.value(out.weights).column(0).to_owned();
    let stop_logit = out.gate.map(|v| g.scalar(v));
    let finite =
        new_state.is_finite() && mel_pair.iter().all(|v| v.is_finite()) && stop_logit.is_none_or(f64::is_finite);
    if !finite {
        return Err(Error::Numeric {
            step: state.step_index,
            detail: "decoder produced non-finite values".into(),
        });
    }
    Ok(StepOutput {
        mel_pair,
        state: new_state,
        alignment,
        stop_logit,
    })
}

/// Output of free-running decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    /// `[steps x T_t]` decoder attention.
    pub decoder_alignment: Array2<f64>,
    /// `[heads x T_t x T_v]` textual-visual attention, when used.
    pub tva_weights: Option<Array3<f64>>,
    /// Visual frame used to condition each decoder step.
    pub visual_indices: Vec<usize>,
}

impl Synthesis {
    pub fn steps(&self) -> usize {
        self.decoder_alignment.nrows()
    }
}

/// Free-running evaluation-mode decoding. The video-locked variant runs
/// exactly `FRAME_RATIO * T_v / frames_per_step` steps; gated variants stop
/// at the first positive stop logit or at the configured step cap.
pub fn synthesize(
    alpha: &VisualEmbedding,
    beta: &TextualEmbedding,
    gamma: &SpeakerEmbedding,
    net: &Network,
    params: &ParamStore,
) -> Result<Synthesis> {
    let d = net.dims();
    let t_v = alpha.num_frames();
    if t_v == 0 {
        return Err(Error::EmptyInput("no video frames".into()));
    }
    if beta.values().ncols() != d.text_dim() {
        return Err(Error::Shape(format!(
            "text embedding has width {}, expected {}",
            beta.values().ncols(),
            d.text_dim()
        )));
    }
    if net.variant().uses_video() && alpha.dim() != d.visual_dim {
        return Err(Error::Shape(format!(
            "visual embedding has width {}, expected {}",
            alpha.dim(),
            d.visual_dim
        )));
    }
    if gamma.projected.len() != d.speaker_proj {
        return Err(Error::Shape("projected speaker vector width mismatch".into()));
    }

    let (memory, tva_weights) = {
        let mut g = Graph::eval(params);
        let b = g.constant(beta.values().clone());
        let a = net.variant().uses_tva().then(|| g.constant(alpha.values().clone()));
        let spk = g.constant(row(&gamma.projected));
        let (mem, weights) = net.memory_from_text(&mut g, b, a, spk, 0)?;
        let tva = (!weights.is_empty()).then(|| {
            let mut w = Array3::zeros((weights.len(), beta.num_tokens(), t_v));
            for (h, &wv) in weights.iter().enumerate() {
                w.index_axis_mut(Axis(0), h).assign(g.value(wv));
            }
            w
        });
        (DecoderMemory::new(g.value(mem).clone())?, tva)
    };

    let locked = net.variant().length_locked();
    let limit = if locked {
        locked_steps(t_v, d.frames_per_step)
    } else {
        net.config.max_decoder_steps
    };
    let mut state = DecoderState::initial(d, limit);
    let mut prev = Array1::zeros(d.mel_bins);
    let mut frames: Vec<Array1<f64>> = Vec::with_capacity(limit * d.frames_per_step);
    let mut alignment = Vec::with_capacity(limit);
    let mut visual_indices = Vec::with_capacity(limit);
    for step in 0..limit {
        let vi = video_index((step * d.frames_per_step) as i64, t_v)?;
        let a_row = alpha.values().row(vi).to_owned();
        let fused = fuse(&prev, Some(&a_row), gamma, &net.fusion, params).map_err(|e| match e {
            Error::Validation(detail) => Error::Numeric { step, detail },
            other => other,
        })?;
        let out = decode_step(&state, &fused, &memory, &net.cell, params)?;
        for f in out.mel_pair.rows() {
            frames.push(f.to_owned());
        }
        prev = out.mel_pair.row(d.frames_per_step - 1).to_owned();
        alignment.push(out.alignment);
        visual_indices.push(vi);
        state = out.state;
        if !locked && out.stop_logit.is_some_and(|z| z > 0.0) {
            break;
        }
    }

    let views: Vec<_> = frames.iter().map(|f| f.view().insert_axis(Axis(0))).collect();
    let mel = ndarray::concatenate(Axis(0), &views).expect("equal frame widths");
    let views: Vec<_> = alignment.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    let decoder_alignment = ndarray::concatenate(Axis(0), &views).expect("equal text lengths");
    Ok(Synthesis {
        mel: MelSpectrogram::new(mel)?,
        decoder_alignment,
        tva_weights,
        visual_indices,
    })
}

/// One training utterance with cached visual embeddings.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub utt_id: String,
    pub tokens: CharacterSequence,
    pub speaker_id: usize,
    pub num_video_frames: usize,
    /// `[T_v x visual_dim]`; required by the variants that use video.
    pub alpha: Option<Array2<f64>>,
    /// `[T_m x mel_bins]` ground truth.
    pub mel: Array2<f64>,
}

/// Recorded teacher-forced pass over a batch.
pub struct TeacherForced {
    /// L1 plus, for gated variants, the stop-gate cross-entropy.
    pub loss: Var,
    pub l1: Var,
    pub stop_loss: Option<Var>,
    /// `[rows x frames_per_step * mel_bins]` step-major predictions.
    pub prediction: Var,
    pub targets: Mat,
    /// `(batch index, step)` of every prediction row.
    layout: Vec<(usize, usize)>,
    frames: Vec<usize>,
    mel_bins: usize,
}

impl TeacherForced {
    fn unpack(&self, m: &Mat) -> Vec<Array2<f64>> {
        let fps = m.ncols() / self.mel_bins;
        let mut out: Vec<Array2<f64>> = self.frames.iter().map(|&n| Array2::zeros((n, self.mel_bins))).collect();
        for (r, &(b, s)) in self.layout.iter().enumerate() {
            for k in 0..fps {
                out[b]
                    .row_mut(s * fps + k)
                    .assign(&m.slice(s![r, k * self.mel_bins..(k + 1) * self.mel_bins]));
            }
        }
        out
    }

    /// Predictions per utterance, in batch order.
    pub fn predicted_mels(&self, g: &Graph) -> Vec<Array2<f64>> {
        self.unpack(g.value(self.prediction))
    }

    pub fn target_mels(&self) -> Vec<Array2<f64>> {
        self.unpack(&self.targets)
    }
}

/// Teacher-forced decoding of a batch. Step `s` is fed ground-truth frame
/// `s * frames_per_step - 1` (zeros at `s = 0`) and visual frame
/// `video_index(s * frames_per_step)`.
pub fn teacher_forced_forward(g: &mut Graph, batch: &[&TrainExample], net: &Network) -> Result<TeacherForced> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty training batch".into()));
    }
    let d = net.dims();
    let fps = d.frames_per_step;
    let variant = net.variant();
    for ex in batch {
        check_frame_ratio(&ex.utt_id, ex.mel.nrows(), ex.num_video_frames)?;
        if ex.mel.ncols() != d.mel_bins {
            return Err(Error::Data {
                utt_id: ex.utt_id.clone(),
                detail: format!("mel has {} bins, expected {}", ex.mel.ncols(), d.mel_bins),
            });
        }
        if variant.uses_video() {
            match &ex.alpha {
                Some(a) if a.nrows() == ex.num_video_frames && a.ncols() == d.visual_dim => {}
                Some(a) => {
                    return Err(Error::Data {
                        utt_id: ex.utt_id.clone(),
                        detail: format!("visual embedding has shape {:?}", a.dim()),
                    })
                }
                None => {
                    return Err(Error::Config(format!(
                        "variant {variant} needs visual embeddings for {}",
                        ex.utt_id
                    )))
                }
            }
        }
    }

    // Longest first, so the active utterances at every step are a prefix.
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(batch[i].num_video_frames));
    let sorted: Vec<&TrainExample> = order.iter().map(|&i| batch[i]).collect();
    let steps: Vec<usize> = sorted.iter().map(|ex| locked_steps(ex.num_video_frames, fps)).collect();
    let max_steps = steps[0];
    let active: Vec<usize> = (0..max_steps)
        .map(|s| steps.iter().take_while(|&&n| n > s).count())
        .collect();

    let speaker_ids: Vec<usize> = sorted.iter().map(|ex| ex.speaker_id).collect();
    let (_, speaker_projected) = net.speaker.forward(g, &speaker_ids)?;

    let mut memories = Vec::with_capacity(sorted.len());
    for (b, ex) in sorted.iter().enumerate() {
        let alpha = match (&ex.alpha, variant.uses_tva()) {
            (Some(a), true) => Some(g.constant(a.clone())),
            _ => None,
        };
        let (mem, _) = net.memory(g, &ex.tokens, alpha, speaker_projected, b)?;
        memories.push(mem);
    }
    let text_lengths: Vec<usize> = sorted.iter().map(|ex| ex.tokens.len()).collect();
    let values_all = g.concat_rows(&memories);
    let keys_all = net.cell.memory_keys(g, values_all);

    // Step-major rows: step 0 for every utterance, then step 1, ...
    let total_rows: usize = active.iter().sum();
    let mut layout = Vec::with_capacity(total_rows);
    for (s, &n) in active.iter().enumerate() {
        layout.extend((0..n).map(|b| (b, s)));
    }
    let mut prev = Mat::zeros((total_rows, d.mel_bins));
    let mut targets = Mat::zeros((total_rows, d.step_width()));
    let mut alpha_rows = variant
        .uses_visual_fusion()
        .then(|| Mat::zeros((total_rows, d.visual_dim)));
    for (r, &(b, s)) in layout.iter().enumerate() {
        let ex = sorted[b];
        if s > 0 {
            prev.row_mut(r).assign(&ex.mel.row(s * fps - 1));
        }
        for k in 0..fps {
            targets
                .slice_mut(s![r, k * d.mel_bins..(k + 1) * d.mel_bins])
                .assign(&ex.mel.row(s * fps + k));
        }
        if let (Some(rows), Some(a)) = (alpha_rows.as_mut(), ex.alpha.as_ref()) {
            let vi = video_index((s * fps) as i64, ex.num_video_frames)?;
            rows.row_mut(r).assign(&a.row(vi));
        }
    }
    let row_speakers: Vec<usize> = layout.iter().map(|&(b, _)| b).collect();
    let prev = g.constant(prev);
    let alpha_rows = alpha_rows.map(|m| g.constant(m));
    let spk_rows = g.gather_rows(speaker_projected, &row_speakers);
    let fused = net.fusion.forward(g, prev, alpha_rows, spk_rows);
    let fused_gates = net.cell.fused_gates(g, fused);

    let mut cache: HashMap<usize, AttendMemory> = HashMap::new();
    let mut state = net.cell.zero_state(g, active[0]);
    let mut outputs = Vec::with_capacity(max_steps);
    let mut gates = Vec::with_capacity(max_steps);
    let mut offset = 0;
    for &n in &active {
        if !cache.contains_key(&n) {
            let mem = if n == sorted.len() {
                AttendMemory {
                    keys: keys_all,
                    values: values_all,
                    counts: text_lengths.clone(),
                }
            } else {
                let rows: usize = text_lengths[..n].iter().sum();
                AttendMemory {
                    keys: g.slice_rows(keys_all, 0, rows),
                    values: g.slice_rows(values_all, 0, rows),
                    counts: text_lengths[..n].to_vec(),
                }
            };
            cache.insert(n, mem);
        }
        state = state.truncate(g, n);
        let fg = g.slice_rows(fused_gates, offset, offset + n);
        let out = net.cell.step(g, fg, state, &cache[&n]);
        state = out.state;
        outputs.push(out.frames);
        if let Some(gv) = out.gate {
            gates.push(gv);
        }
        offset += n;
    }

    let prediction = g.concat_rows(&outputs);
    let target_var = g.constant(targets.clone());
    let diff = g.sub(prediction, target_var);
    let abs = g.abs(diff);
    let l1 = g.mean_all(abs);
    let (loss, stop_loss) = if gates.is_empty() {
        (l1, None)
    } else {
        let logits = g.concat_rows(&gates);
        let stop_targets = Mat::from_shape_fn((total_rows, 1), |(r, _)| {
            let (b, s) = layout[r];
            f64::from(s + 1 == steps[b])
        });
        let bce = g.bce_with_logits(logits, stop_targets);
        (g.add(l1, bce), Some(bce))
    };

    // Report rows against the caller's batch order.
    let mut inverse = vec![0; order.len()];
    for (sorted_pos, &orig) in order.iter().enumerate() {
        inverse[sorted_pos] = orig;
    }
    let layout = layout.into_iter().map(|(b, s)| (inverse[b], s)).collect();
    let frames = batch.iter().map(|ex| ex.mel.nrows()).collect();
    Ok(TeacherForced {
        loss,
        l1,
        stop_loss,
        prediction,
        targets,
        layout,
        frames,
        mel_bins: d.mel_bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{speaker_lookup, text_encode};
    use crate::model::{ModelConfig, Variant};
    use crate::text::char_tokenize;
    use crate::toy;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_net(variant: Variant) -> (Network, ParamStore) {
        Network::new(ModelConfig::new(variant, ModelDims::tiny(), 3), 11).unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn toy_examples(n: usize, seed: u64, visual_dim: usize) -> Vec<TrainExample> {
        toy::generate(seed, n, 3)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, u)| TrainExample {
                utt_id: format!("utt{i}"),
                tokens: char_tokenize(&u.text()).unwrap(),
                speaker_id: u.speaker_id,
                num_video_frames: u.lips.num_frames(),
                alpha: Some(random(u.lips.num_frames(), visual_dim, seed + i as u64)),
                mel: u.mel.frames().clone(),
            })
            .collect()
    }

    fn embeddings(
        net: &Network,
        params: &ParamStore,
        text: &str,
        t_v: usize,
        seed: u64,
    ) -> (VisualEmbedding, TextualEmbedding, SpeakerEmbedding) {
        let alpha = VisualEmbedding::new(random(t_v, net.dims().visual_dim, seed)).unwrap();
        let beta = text_encode(&char_tokenize(text).unwrap(), &net.text, params).unwrap();
        let gamma = speaker_lookup(1, &net.speaker, params).unwrap();
        (alpha, beta, gamma)
    }

    #[test]
    fn video_index_examples() {
        assert_eq!(video_index(0, 5).unwrap(), 0);
        assert_eq!(video_index(7, 5).unwrap(), 1);
        assert_eq!(video_index(4 * 5 - 1, 5).unwrap(), 4);
        assert_eq!(video_index(4 * 5, 5).unwrap(), 4);
        assert!(matches!(video_index(-1, 5), Err(Error::Validation(_))));
    }

    #[test]
    fn fusion_of_zeros_is_zero() {
        let (net, params) = tiny_net(Variant::Visualtts);
        let d = net.dims();
        let gamma = SpeakerEmbedding {
            vector: Array1::zeros(d.speaker_dim),
            projected: Array1::zeros(d.speaker_proj),
        };
        let out = fuse(
            &Array1::zeros(d.mel_bins),
            Some(&Array1::zeros(d.visual_dim)),
            &gamma,
            &net.fusion,
            &params,
        )
        .unwrap();
        assert_eq!(out.len(), d.fusion_dim);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_is_deterministic_and_speaker_additive() {
        let (net, params) = tiny_net(Variant::Visualtts);
        let d = net.dims();
        let prev = random(1, d.mel_bins, 1).row(0).to_owned();
        let alpha = random(1, d.visual_dim, 2).row(0).to_owned();
        let g1 = speaker_lookup(0, &net.speaker, &params).unwrap();
        let g2 = speaker_lookup(2, &net.speaker, &params).unwrap();
        let a = fuse(&prev, Some(&alpha), &g1, &net.fusion, &params).unwrap();
        let again = fuse(&prev, Some(&alpha), &g1, &net.fusion, &params).unwrap();
        assert_eq!(a, again);
        let b = fuse(&prev, Some(&alpha), &g2, &net.fusion, &params).unwrap();
        let w = params.get(net.fusion.speaker_map().weight);
        let expected = (&g1.projected - &g2.projected).dot(w);
        let diff = &a - &b;
        assert!(diff.iter().zip(&expected).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn fusion_rejects_wrong_shapes() {
        let (net, params) = tiny_net(Variant::Visualtts);
        let d = net.dims();
        let gamma = speaker_lookup(0, &net.speaker, &params).unwrap();
        let alpha = Array1::zeros(d.visual_dim);
        assert!(fuse(&Array1::zeros(3), Some(&alpha), &gamma, &net.fusion, &params).is_err());
        let short = Array1::zeros(2);
        let prev = Array1::zeros(d.mel_bins);
        assert!(fuse(&prev, Some(&short), &gamma, &net.fusion, &params).is_err());
        assert!(fuse(&prev, None, &gamma, &net.fusion, &params).is_err());
    }

    #[test]
    fn zoneout_eval_matches_hand_computed_cell() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut Init::new(&mut store, 0), "cell", 1, 2);
        *store.get_mut(lstm.w_input) = array![[0.5, -0.3, 0.8, 0.1, 0.2, 0.4, -0.6, 0.7]];
        *store.get_mut(lstm.w_hidden) = array![
            [0.1, 0.2, -0.1, 0.3, 0.05, -0.2, 0.4, 0.1],
            [-0.3, 0.1, 0.2, 0.0, 0.3, 0.1, -0.1, 0.2]
        ];
        *store.get_mut(lstm.bias) = array![[0.0, 0.1, 1.0, 1.0, -0.2, 0.0, 0.3, -0.1]];
        let (x, h0, c0) = (0.9, [0.2, -0.4], [0.5, -0.1]);

        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let wi = store.get(lstm.w_input).clone();
        let wh = store.get(lstm.w_hidden).clone();
        let b = store.get(lstm.bias).clone();
        let pre = |k: usize| x * wi[[0, k]] + h0[0] * wh[[0, k]] + h0[1] * wh[[1, k]] + b[[0, k]];
        let mut expect_h = [0.0; 2];
        let mut expect_c = [0.0; 2];
        for j in 0..2 {
            let (i, f, g, o) = (sig(pre(j)), sig(pre(2 + j)), pre(4 + j).tanh(), sig(pre(6 + j)));
            let c_new = f * c0[j] + i * g;
            let h_new = o * c_new.tanh();
            expect_h[j] = 0.9 * h_new + 0.1 * h0[j];
            expect_c[j] = 0.9 * c_new + 0.1 * c0[j];
        }

        let mut g = Graph::eval(&store);
        let xv = g.constant(array![[x]]);
        let hv = g.constant(array![[h0[0], h0[1]]]);
        let cv = g.constant(array![[c0[0], c0[1]]]);
        let gates = lstm.project_input(&mut g, xv);
        let (hn, cn) = lstm.step(&mut g, gates, hv, cv);
        let h = zoneout(&mut g, hv, hn, 0.1);
        let c = zoneout(&mut g, cv, cn, 0.1);
        for j in 0..2 {
            assert!((g.value(h)[[0, j]] - expect_h[j]).abs() < 1e-14);
            assert!((g.value(c)[[0, j]] - expect_c[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn decode_step_alignment_is_stochastic() {
        let (net, params) = tiny_net(Variant::Visualtts);
        let d = net.dims();
        for seed in 0..10 {
            let t_t = 1 + seed as usize % 6;
            let memory = DecoderMemory::new(random(t_t, d.memory_dim(), seed) * 3.0).unwrap();
            let fused = random(1, d.fusion_dim, seed + 100).row(0).to_owned();
            let mut state = DecoderState::initial(d, 4);
            for _ in 0..4 {
                let out = decode_step(&state, &fused, &memory, &net.cell, &params).unwrap();
                assert_eq!(out.alignment.len(), t_t);
                assert!(out.alignment.iter().all(|&w| w >= 0.0));
                assert!((out.alignment.sum() - 1.0).abs() < 1e-5);
                if t_t == 1 {
                    assert_eq!(out.alignment[0], 1.0);
                }
                assert_eq!(out.mel_pair.dim(), (2, d.mel_bins));
                state = out.state;
            }
            assert_eq!(state.step_index, 4);
            let over = decode_step(&state, &fused, &memory, &net.cell, &params);
            assert!(matches!(over, Err(Error::StopContract { step: 4, limit: 4 })));
        }
    }

    #[test]
    fn synthesize_locks_length_to_video() {
        let (net, params) = tiny_net(Variant::Visualtts);
        let (alpha, beta, gamma) = embeddings(&net, &params, "bin blue", 14, 3);
        let out = synthesize(&alpha, &beta, &gamma, &net, &params).unwrap();
        assert_eq!(out.mel.frames().dim(), (56, 80));
        assert_eq!(out.steps(), 28);
        assert_eq!(out.decoder_alignment.ncols(), beta.num_tokens());
        assert_eq!(out.tva_weights.as_ref().unwrap().dim(), (2, 9, 14));
        for t_v in [1, 2, 3, 7, 22, 50] {
            let (alpha, beta, gamma) = embeddings(&net, &params, "abc", t_v, t_v as u64);
            let out = synthesize(&alpha, &beta, &gamma, &net, &params).unwrap();
            assert_eq!(out.mel.num_frames(), 4 * t_v);
        }
    }

    #[test]
    fn visual_conditioning_follows_frame_ratio() {
        let (net, params) = tiny_net(Variant::Visualtts);
        let t_v = 9;
        let (alpha, beta, gamma) = embeddings(&net, &params, "lay", t_v, 5);
        let out = synthesize(&alpha, &beta, &gamma, &net, &params).unwrap();
        for (step, &vi) in out.visual_indices.iter().enumerate() {
            for t in [2 * step, 2 * step + 1] {
                assert_eq!(vi, (t / 4).min(t_v - 1));
            }
        }
    }

    #[test]
    fn synthesize_is_bit_identical_in_eval_mode() {
        let (net, params) = tiny_net(Variant::Visualtts);
        let (alpha, beta, gamma) = embeddings(&net, &params, "set", 6, 9);
        let a = synthesize(&alpha, &beta, &gamma, &net, &params).unwrap();
        let b = synthesize(&alpha, &beta, &gamma, &net, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gated_baseline_stops_on_gate() {
        let (net, mut params) = tiny_net(Variant::Tacotron);
        let gate = params.id("decoder.gate.bias").unwrap();
        params.get_mut(gate).fill(50.0);
        let (alpha, beta, gamma) = embeddings(&net, &params, "abc", 10, 1);
        let out = synthesize(&alpha, &beta, &gamma, &net, &params).unwrap();
        assert_eq!(out.mel.num_frames(), 2);
        assert!(out.tva_weights.is_none());
        params.get_mut(gate).fill(-50.0);
        let out = synthesize(&alpha, &beta, &gamma, &net, &params).unwrap();
        assert_eq!(out.steps(), net.config.max_decoder_steps);
    }

    #[test]
    fn teacher_forcing_shapes_and_ratio_check() {
        let (net, params) = tiny_net(Variant::Visualtts);
        let mut exs = toy_examples(2, 4, net.dims().visual_dim);
        let mut g = Graph::eval(&params);
        let tf = teacher_forced_forward(&mut g, &[&exs[0]], &net).unwrap();
        let pred = tf.predicted_mels(&g);
        assert_eq!(pred[0].dim(), exs[0].mel.dim());
        assert_eq!(tf.target_mels()[0], exs[0].mel);

        exs[1].mel = exs[1].mel.slice(s![..exs[1].mel.nrows() - 1, ..]).to_owned();
        let mut g = Graph::eval(&params);
        match teacher_forced_forward(&mut g, &[&exs[0], &exs[1]], &net) {
            Err(Error::Data { utt_id, .. }) => assert_eq!(utt_id, "utt1"),
            other => panic!("expected a data error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn zero_head_on_zero_targets_gives_zero_loss() {
        let (net, mut params) = tiny_net(Variant::Visualtts);
        let head = net.cell.output_head().clone();
        params.get_mut(head.weight).fill(0.0);
        params.get_mut(head.bias.unwrap()).fill(0.0);
        let mut ex = toy_examples(1, 2, net.dims().visual_dim).remove(0);
        ex.mel.fill(0.0);
        let mut g = Graph::train(&params, 3);
        let tf = teacher_forced_forward(&mut g, &[&ex], &net).unwrap();
        assert_eq!(g.scalar(tf.l1), 0.0);
    }

    #[test]
    fn batching_matches_single_utterances() {
        for variant in [Variant::Visualtts, Variant::Tacotron] {
            let (net, params) = tiny_net(variant);
            let exs = toy_examples(4, 8, net.dims().visual_dim);
            let batch: Vec<&TrainExample> = exs.iter().collect();
            let mut g = Graph::eval(&params);
            let tf = teacher_forced_forward(&mut g, &batch, &net).unwrap();
            let batched = tf.predicted_mels(&g);
            let mut weighted = 0.0;
            let mut total = 0.0;
            for (ex, pred) in exs.iter().zip(&batched) {
                let mut g1 = Graph::eval(&params);
                let single = teacher_forced_forward(&mut g1, &[ex], &net).unwrap();
                let p = &single.predicted_mels(&g1)[0];
                assert!((p - pred).mapv(f64::abs).iter().all(|&e| e < 1e-10));
                weighted += g1.scalar(single.l1) * p.len() as f64;
                total += p.len() as f64;
            }
            assert!((g.scalar(tf.l1) - weighted / total).abs() < 1e-10);
        }
    }

    #[test]
    fn stepwise_decoding_reproduces_teacher_forcing() {
        let (net, params) = tiny_net(Variant::Visualtts);
        let ex = toy_examples(1, 6, net.dims().visual_dim).remove(0);
        let mut g = Graph::eval(&params);
        let tf = teacher_forced_forward(&mut g, &[&ex], &net).unwrap();
        let expected = tf.predicted_mels(&g).remove(0);

        let d = net.dims();
        let alpha = VisualEmbedding::new(ex.alpha.clone().unwrap()).unwrap();
        let beta = text_encode(&ex.tokens, &net.text, &params).unwrap();
        let gamma = speaker_lookup(ex.speaker_id, &net.speaker, &params).unwrap();
        let memory = {
            let mut g = Graph::eval(&params);
            let b = g.constant(beta.values().clone());
            let a = g.constant(alpha.values().clone());
            let spk = g.constant(row(&gamma.projected));
            let (m, _) = net.memory_from_text(&mut g, b, Some(a), spk, 0).unwrap();
            DecoderMemory::new(g.value(m).clone()).unwrap()
        };
        let steps = locked_steps(ex.num_video_frames, d.frames_per_step);
        let mut state = DecoderState::initial(d, steps);
        for s in 0..steps {
            let prev = if s == 0 {
                Array1::zeros(d.mel_bins)
            } else {
                ex.mel.row(2 * s - 1).to_owned()
            };
            let vi = video_index(2 * s as i64, ex.num_video_frames).unwrap();
            let a = alpha.values().row(vi).to_owned();
            let fused = fuse(&prev, Some(&a), &gamma, &net.fusion, &params).unwrap();
            let out = decode_step(&state, &fused, &memory, &net.cell, &params).unwrap();
            let want = expected.slice(s![2 * s..2 * s + 2, ..]);
            assert!((&out.mel_pair - &want).mapv(f64::abs).iter().all(|&e| e < 1e-10));
            state = out.state;
        }
    }

    #[test]
    fn overfitting_one_record_reduces_loss() {
        let (net, mut params) = tiny_net(Variant::Visualtts);
        let ex = toy_examples(1, 12, net.dims().visual_dim).remove(0);
        let mut adam = crate::nn::Adam::new(1e-3, Some(1.0));
        let mut losses = Vec::new();
        for step in 0..=200 {
            let (loss, grads) = {
                let mut g = Graph::train(&params, step);
                let tf = teacher_forced_forward(&mut g, &[&ex], &net).unwrap();
                (g.scalar(tf.loss), g.backward(tf.loss).into_params())
            };
            losses.push(loss);
            if step < 200 {
                adam.step(&mut params, &grads);
            }
        }
        assert!(losses[200] < losses[0], "{} -> {}", losses[0], losses[200]);
    }
}
