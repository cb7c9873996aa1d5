//! Textual-visual attention: text queries attend over visual keys and values.

use ndarray::{Array2, Array3};

use crate::encoders::{TextualEmbedding, VisualEmbedding};
use crate::error::{Error, Result};
use crate::nn::{Graph, Init, Linear, ParamId, ParamStore, Var};

#[derive(Debug, Clone)]
struct Head {
    query: Linear,
    key: Linear,
    value: Linear,
}

#[derive(Debug, Clone)]
pub struct Tva {
    heads: Vec<Head>,
    output: Linear,
    head_dim: usize,
    text_dim: usize,
    visual_dim: usize,
}

/// Context `[T_t x out]` and per-head weights `[heads x T_t x T_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TvaContext {
    pub context: Array2<f64>,
    pub attention_weights: Array3<f64>,
}

impl Tva {
    pub fn new(
        init: &mut Init,
        heads: usize,
        head_dim: usize,
        text_dim: usize,
        visual_dim: usize,
        out_dim: usize,
    ) -> Self {
        let heads = (0..heads)
            .map(|h| Head {
                query: Linear::no_bias(init, &format!("tva.head{h}.query"), text_dim, head_dim),
                key: Linear::no_bias(init, &format!("tva.head{h}.key"), visual_dim, head_dim),
                value: Linear::no_bias(init, &format!("tva.head{h}.value"), visual_dim, head_dim),
            })
            .collect::<Vec<_>>();
        let output = Linear::new(init, "tva.output", heads.len() * head_dim, out_dim);
        Self {
            heads,
            output,
            head_dim,
            text_dim,
            visual_dim,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Returns the context and one `[T_t x T_v]` weight matrix per head.
    pub fn forward(&self, g: &mut Graph, beta: Var, alpha: Var) -> (Var, Vec<Var>) {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.query.forward(g, beta);
            let k = head.key.forward(g, alpha);
            let v = head.value.forward(g, alpha);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores);
            outputs.push(g.matmul(w, v));
            weights.push(w);
        }
        let joined = g.concat_cols(&outputs);
        (self.output.forward(g, joined), weights)
    }

    /// Projection weights `(query, key, value)` of head `h`.
    pub fn head_params(&self, h: usize) -> (ParamId, ParamId, ParamId) {
        let head = &self.heads[h];
        (head.query.weight, head.key.weight, head.value.weight)
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }
}

pub fn tva_attend(
    beta: &TextualEmbedding,
    alpha: &VisualEmbedding,
    tva: &Tva,
    params: &ParamStore,
) -> Result<TvaContext> {
    let (b, a) = (beta.values(), alpha.values());
    if b.nrows() == 0 || a.nrows() == 0 {
        return Err(Error::EmptyInput(
            "attention needs at least one text and one video frame".into(),
        ));
    }
    if b.iter().chain(a.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite attention input".into()));
    }
    if b.ncols() != tva.text_dim || a.ncols() != tva.visual_dim {
        return Err(Error::Shape(format!(
            "attention expects {}/{} input dims, got {}/{}",
            tva.text_dim,
            tva.visual_dim,
            b.ncols(),
            a.ncols()
        )));
    }
    let mut g = Graph::eval(params);
    let bv = g.constant(b.clone());
    let av = g.constant(a.clone());
    let (ctx, weights) = tva.forward(&mut g, bv, av);
    let (t_t, t_v) = (b.nrows(), a.nrows());
    let mut w = Array3::zeros((weights.len(), t_t, t_v));
    for (h, &wv) in weights.iter().enumerate() {
        w.index_axis_mut(ndarray::Axis(0), h).assign(g.value(wv));
    }
    Ok(TvaContext {
        context: g.value(ctx).clone(),
        attention_weights: w,
    })
}
