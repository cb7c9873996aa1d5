//! Parameterized building blocks recorded onto a [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Mat, ParamId, ParamStore, Var};

/// Registers freshly initialized parameters in a store.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform Glorot initialization.
    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let m = Mat::from_shape_fn((rows, cols), |_| self.rng.random_range(-limit..limit));
        self.store.add(name, m)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng));
        self.store.add(name, m)
    }

    pub fn fill(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name, Mat::from_elem((rows, cols), value))
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.fill(name, rows, cols, 0.0)
    }

    pub fn store(&mut self) -> &mut ParamStore {
        self.store
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: init.glorot(&format!("{name}.weight"), input, output),
            bias: Some(init.zeros(&format!("{name}.bias"), 1, output)),
        }
    }

    pub fn no_bias(init: &mut Init, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: init.glorot(&format!("{name}.weight"), input, output),
            bias: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// LSTM cell with gate order input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(init: &mut Init, name: &str, input: usize, hidden: usize) -> Self {
        let w_input = init.glorot(&format!("{name}.w_input"), input, 4 * hidden);
        let w_hidden = init.glorot(&format!("{name}.w_hidden"), hidden, 4 * hidden);
        let mut b = Mat::zeros((1, 4 * hidden));
        b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        let bias = init.store().add(format!("{name}.bias"), b);
        Self {
            w_input,
            w_hidden,
            bias,
            hidden,
        }
    }

    /// Input contribution to the gates, `x W + b`; batchable over time.
    pub fn project_input(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w_input);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// One recurrence from precomputed input gates. Returns `(h, c)`.
    pub fn step(&self, g: &mut Graph, input_gates: Var, h: Var, c: Var) -> (Var, Var) {
        let wh = g.param(self.w_hidden);
        let rec = g.matmul(h, wh);
        let gates = g.add(input_gates, rec);
        let n = self.hidden;
        let i = g.slice_cols(gates, 0, n);
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, n, 2 * n);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * n, 3 * n);
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * n, 4 * n);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_new = g.add(keep, write);
        let squashed = g.tanh(c_new);
        let h_new = g.mul(o, squashed);
        (h_new, c_new)
    }
}

/// 1-D convolution over time with "same" padding (extra pad on the right for even kernels).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(init: &mut Init, name: &str, input: usize, output: usize, kernel: usize) -> Self {
        Self {
            weight: init.glorot(&format!("{name}.weight"), kernel * input, output),
            bias: init.zeros(&format!("{name}.bias"), 1, output),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = g.unfold(x, self.kernel, (self.kernel - 1) / 2);
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(cols, w);
        g.add_row(y, b)
    }
}

/// Per-channel normalization over time followed by a learned affine map.
#[derive(Debug, Clone)]
pub struct TimeNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl TimeNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        Self {
            gamma: init.fill(&format!("{name}.gamma"), 1, channels, 1.0),
            beta: init.zeros(&format!("{name}.beta"), 1, channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.norm_time(x);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Inverted dropout; identity outside training.
pub fn dropout(g: &mut Graph, x: Var, rate: f64) -> Var {
    if !g.is_training() || rate == 0.0 {
        return x;
    }
    let dim = g.shape(x);
    let keep = 1.0 - rate;
    let mask = {
        let rng = g.rng();
        Mat::from_shape_fn(dim, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
    };
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Zoneout: in training each unit keeps its old value with probability
/// `rate`; in evaluation the update is the expectation
/// `rate * old + (1 - rate) * new`.
pub fn zoneout(g: &mut Graph, old: Var, new: Var, rate: f64) -> Var {
    if rate == 0.0 {
        return new;
    }
    if g.is_training() {
        let dim = g.shape(new);
        let (keep, take) = {
            let rng = g.rng();
            let keep = Mat::from_shape_fn(dim, |_| f64::from(rng.random::<f64>() < rate));
            let take = keep.mapv(|k| 1.0 - k);
            (keep, take)
        };
        let keep = g.constant(keep);
        let take = g.constant(take);
        let a = g.mul(old, keep);
        let b = g.mul(new, take);
        g.add(a, b)
    } else {
        let a = g.scale(old, rate);
        let b = g.scale(new, 1.0 - rate);
        g.add(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn lstm_forget_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        let lstm = Lstm::new(&mut init, "l", 3, 2);
        let b = store.get(lstm.bias);
        assert_eq!(b.row(0).to_vec(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_keeps_length_for_even_and_odd_kernels() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        let convs: Vec<Conv1d> = (1..=4)
            .map(|k| Conv1d::new(&mut init, &format!("c{k}"), 3, 5, k))
            .collect();
        let mut g = Graph::eval(&store);
        let x = g.constant(Mat::ones((6, 3)));
        for c in &convs {
            let y = c.forward(&mut g, x);
            assert_eq!(g.shape(y), (6, 5));
        }
    }

    #[test]
    fn zoneout_eval_is_expectation() {
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let old = g.constant(array![[1.0, -2.0]]);
        let new = g.constant(array![[3.0, 4.0]]);
        let z = zoneout(&mut g, old, new, 0.1);
        let v = g.value(z);
        assert!((v[[0, 0]] - (0.9 * 3.0 + 0.1 * 1.0)).abs() < 1e-15);
        assert!((v[[0, 1]] - (0.9 * 4.0 - 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zoneout_train_picks_old_or_new() {
        let store = ParamStore::new();
        let mut g = Graph::train(&store, 5);
        let old = g.constant(Mat::zeros((1, 400)));
        let new = g.constant(Mat::ones((1, 400)));
        let z = zoneout(&mut g, old, new, 0.1);
        let v = g.value(z);
        assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));
        let kept = v.iter().filter(|&&x| x == 0.0).count();
        assert!((10..=80).contains(&kept), "kept {kept}");
    }

    #[test]
    fn dropout_only_in_training() {
        let store = ParamStore::new();
        let mut g = Graph::eval(&store);
        let x = g.constant(Mat::ones((2, 4)));
        assert_eq!(dropout(&mut g, x, 0.5), x);
        let mut g = Graph::train(&store, 1);
        let x = g.constant(Mat::ones((2, 50)));
        let y = dropout(&mut g, x, 0.5);
        assert!(g.value(y).iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
