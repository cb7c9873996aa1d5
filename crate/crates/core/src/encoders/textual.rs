//! Character encoder: embedding, prenet, and a CBHG block whose recurrent
//! stage is a bidirectional LSTM.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::nn::{dropout, Conv1d, Graph, Init, Linear, Lstm, ParamId, ParamStore, TimeNorm, Var};
use crate::text::{CharacterSequence, VOCAB_SIZE};

const PRENET_DROPOUT: f64 = 0.5;

/// Per-character text features `[T_t x D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextualEmbedding {
    values: Array2<f64>,
}

impl TextualEmbedding {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::EmptyInput("textual embedding has no rows".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("textual embedding has non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn num_tokens(&self) -> usize {
        self.values.nrows()
    }
}

#[derive(Debug, Clone)]
struct Highway {
    transform: Linear,
    gate: Linear,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: ParamId,
    prenet: [Linear; 2],
    bank: Vec<(Conv1d, TimeNorm)>,
    projections: [(Conv1d, TimeNorm); 2],
    highways: Vec<Highway>,
    forward_lstm: Lstm,
    backward_lstm: Lstm,
}

impl TextEncoder {
    pub fn new(init: &mut Init, dims: &ModelDims) -> Self {
        let embedding = init.normal("text.embedding", VOCAB_SIZE, dims.char_embed, 0.3);
        let prenet = [
            Linear::new(init, "text.prenet.0", dims.char_embed, dims.enc_prenet[0]),
            Linear::new(init, "text.prenet.1", dims.enc_prenet[0], dims.enc_prenet[1]),
        ];
        let width = dims.enc_prenet[1];
        let bank = (1..=dims.bank_kernels)
            .map(|k| {
                (
                    Conv1d::new(init, &format!("text.bank.{k}"), width, dims.bank_channels, k),
                    TimeNorm::new(init, &format!("text.bank.{k}.norm"), dims.bank_channels),
                )
            })
            .collect();
        let bank_out = dims.bank_kernels * dims.bank_channels;
        let projections = [
            (
                Conv1d::new(init, "text.proj.0", bank_out, dims.enc_projection, 3),
                TimeNorm::new(init, "text.proj.0.norm", dims.enc_projection),
            ),
            (
                Conv1d::new(init, "text.proj.1", dims.enc_projection, width, 3),
                TimeNorm::new(init, "text.proj.1.norm", width),
            ),
        ];
        let highways = (0..dims.highway_layers)
            .map(|i| {
                let transform = Linear::new(init, &format!("text.highway.{i}.h"), width, width);
                let gate = Linear::new(init, &format!("text.highway.{i}.t"), width, width);
                init.store().get_mut(gate.bias.unwrap()).fill(-1.0);
                Highway { transform, gate }
            })
            .collect();
        Self {
            embedding,
            prenet,
            bank,
            projections,
            highways,
            forward_lstm: Lstm::new(init, "text.lstm.fwd", width, dims.enc_lstm),
            backward_lstm: Lstm::new(init, "text.lstm.bwd", width, dims.enc_lstm),
        }
    }

    pub fn forward(&self, g: &mut Graph, tokens: &CharacterSequence) -> Var {
        let table = g.param(self.embedding);
        let mut x = g.gather_rows(table, tokens.ids());
        for layer in &self.prenet {
            x = layer.forward(g, x);
            x = g.relu(x);
            x = dropout(g, x, PRENET_DROPOUT);
        }
        let residual = x;

        let banks: Vec<Var> = self
            .bank
            .iter()
            .map(|(conv, norm)| {
                let y = conv.forward(g, x);
                let y = norm.forward(g, y);
                g.relu(y)
            })
            .collect();
        let y = g.concat_cols(&banks);
        let y = g.max_pool_pair(y);
        let (c0, n0) = &self.projections[0];
        let y = c0.forward(g, y);
        let y = n0.forward(g, y);
        let y = g.relu(y);
        let (c1, n1) = &self.projections[1];
        let y = c1.forward(g, y);
        let y = n1.forward(g, y);
        let mut y = g.add(y, residual);

        for hw in &self.highways {
            let h = hw.transform.forward(g, y);
            let h = g.relu(h);
            let t = hw.gate.forward(g, y);
            let t = g.sigmoid(t);
            // y + t * (h - y)
            let diff = g.sub(h, y);
            let moved = g.mul(t, diff);
            y = g.add(y, moved);
        }

        let fwd = run_lstm(g, &self.forward_lstm, y, false);
        let bwd = run_lstm(g, &self.backward_lstm, y, true);
        g.concat_cols(&[fwd, bwd])
    }
}

fn run_lstm(g: &mut Graph, lstm: &Lstm, x: Var, reverse: bool) -> Var {
    let t_len = g.shape(x).0;
    let gates = lstm.project_input(g, x);
    let mut h = g.constant(Array2::zeros((1, lstm.hidden)));
    let mut c = g.constant(Array2::zeros((1, lstm.hidden)));
    let mut outs = vec![h; t_len];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for t in order {
        let gt = g.slice_rows(gates, t, t + 1);
        (h, c) = lstm.step(g, gt, h, c);
        outs[t] = h;
    }
    g.concat_rows(&outs)
}

/// Encodes `tokens` in evaluation mode.
pub fn text_encode(tokens: &CharacterSequence, encoder: &TextEncoder, params: &ParamStore) -> Result<TextualEmbedding> {
    if let Some(&bad) = tokens.ids().iter().find(|&&id| id >= VOCAB_SIZE) {
        return Err(Error::Validation(format!("token id {bad} outside vocabulary")));
    }
    let mut g = Graph::eval(params);
    let out = encoder.forward(&mut g, tokens);
    TextualEmbedding::new(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::char_tokenize;

    fn tiny() -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut Init::new(&mut store, 9), &ModelDims::tiny());
        (store, enc)
    }

    #[test]
    fn full_size_output_shape() {
        let mut store = ParamStore::new();
        let dims = ModelDims::default();
        let enc = TextEncoder::new(&mut Init::new(&mut store, 1), &dims);
        let tokens = char_tokenize("bin blue").unwrap();
        let out = text_encode(&tokens, &enc, &store).unwrap();
        assert_eq!(out.values().dim(), (9, 512));
        assert!(out.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, enc) = tiny();
        let tokens = char_tokenize("place red").unwrap();
        let a = text_encode(&tokens, &enc, &store).unwrap();
        let b = text_encode(&tokens, &enc, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_prefix_property() {
        let (store, enc) = tiny();
        let ab = text_encode(&char_tokenize("ab").unwrap(), &enc, &store).unwrap();
        let abc = text_encode(&char_tokenize("abc").unwrap(), &enc, &store).unwrap();
        let prefix = abc.values().slice(ndarray::s![..2, ..]);
        let diff = (&ab.values().slice(ndarray::s![..2, ..]) - &prefix)
            .mapv(f64::abs)
            .sum();
        assert!(diff > 1e-6, "encodings of the shared prefix should differ");
    }

    #[test]
    fn single_token_is_finite() {
        let (store, enc) = tiny();
        let tokens = CharacterSequence::from_ids(vec![crate::text::EOS_ID]).unwrap();
        let out = text_encode(&tokens, &enc, &store).unwrap();
        assert_eq!(out.num_tokens(), 1);
        assert!(out.values().iter().all(|v| v.is_finite()));
    }
}
