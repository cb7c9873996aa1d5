//! Lip-motion encoder: a Conv3D stem followed by a per-frame ResNet-18 trunk.
//!
//! The encoder is frozen during training, so it runs forward-only in f32.
//! Feature maps are kept channel-last (`[H, W, C]`) and every convolution is
//! lowered to a single matrix product over unfolded patches.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{LipSequence, LIP_SIZE};
use crate::error::{Error, Result};

pub const STEM_KERNEL: [usize; 3] = [5, 7, 7];
pub const STEM_STRIDE: [usize; 3] = [1, 2, 2];
pub const STEM_PAD: [usize; 3] = [2, 3, 3];
pub const STEM_CHANNELS: usize = 64;
const TRUNK_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Per-frame visual features `[T_v x D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding {
    values: Array2<f64>,
}

impl VisualEmbedding {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::EmptyInput("visual embedding has no frames".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("visual embedding has non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Convolution with a frozen batch-norm folded into a per-channel affine map.
#[derive(Debug, Clone)]
struct ConvBn {
    /// `[k * k * c_in, c_out]`, patch-major then channel.
    weight: Array2<f32>,
    kernel: usize,
    stride: usize,
    pad: usize,
    scale: Array1<f32>,
    shift: Array1<f32>,
}

impl ConvBn {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (kernel * kernel * c_in) as f32;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        Self {
            weight: Array2::from_shape_fn((kernel * kernel * c_in, c_out), |_| dist.sample(rng)),
            kernel,
            stride,
            pad: kernel / 2,
            scale: Array1::ones(c_out),
            shift: Array1::zeros(c_out),
        }
    }

    fn c_in(&self) -> usize {
        self.weight.nrows() / (self.kernel * self.kernel)
    }

    fn forward(&self, x: &Array3<f32>, relu: bool) -> Array3<f32> {
        let (h, w, c) = x.dim();
        debug_assert_eq!(c, self.c_in());
        let (k, st, p) = (self.kernel, self.stride, self.pad);
        let ho = (h + 2 * p - k) / st + 1;
        let wo = (w + 2 * p - k) / st + 1;
        let mut cols = Array2::<f32>::zeros((ho * wo, k * k * c));
        let src = x.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        {
            let dst = cols.as_slice_mut().expect("fresh array");
            let row_len = k * k * c;
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = &mut dst[(oy * wo + ox) * row_len..][..row_len];
                    for ky in 0..k {
                        let iy = (oy * st + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * st + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let from = (iy as usize * w + ix as usize) * c;
                            let to = (ky * k + kx) * c;
                            row[to..to + c].copy_from_slice(&src[from..from + c]);
                        }
                    }
                }
            }
        }
        let mut out = cols.dot(&self.weight);
        out *= &self.scale;
        out += &self.shift;
        if relu {
            out.mapv_inplace(|v| v.max(0.0));
        }
        out.into_shape_with_order((ho, wo, self.weight.ncols()))
            .expect("conv output shape")
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let y = self.conv1.forward(x, true);
        let mut y = self.conv2.forward(&y, false);
        match &self.downsample {
            Some(d) => y += &d.forward(x, false),
            None => y += x,
        }
        y.mapv_inplace(|v| v.max(0.0));
        y
    }
}

/// The frozen lip encoder. Parameters come from a checkpoint or a seeded
/// random initialization.
#[derive(Debug, Clone)]
pub struct LipEncoder {
    /// `[kt * kh * kw, 64]`.
    stem_weight: Array2<f32>,
    stem_scale: Array1<f32>,
    stem_shift: Array1<f32>,
    blocks: Vec<BasicBlock>,
    proj_weight: Array2<f32>,
    proj_bias: Array1<f32>,
    frozen: bool,
}

impl LipEncoder {
    pub fn random(seed: u64, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_fan_in = STEM_KERNEL.iter().product::<usize>();
        let dist = Normal::new(0.0f32, (2.0 / stem_fan_in as f32).sqrt()).unwrap();
        let stem_weight = Array2::from_shape_fn((stem_fan_in, STEM_CHANNELS), |_| dist.sample(&mut rng));
        let mut blocks = Vec::new();
        let mut c_in = STEM_CHANNELS;
        for (stage, &width) in TRUNK_WIDTHS.iter().enumerate() {
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let conv1 = ConvBn::new(&mut rng, c_in, width, 3, stride);
                let mut conv2 = ConvBn::new(&mut rng, width, width, 3, 1);
                // Keeps activations bounded through the residual sums.
                conv2.scale.fill(std::f32::consts::FRAC_1_SQRT_2);
                let downsample = (stride != 1 || c_in != width).then(|| ConvBn::new(&mut rng, c_in, width, 1, stride));
                blocks.push(BasicBlock {
                    conv1,
                    conv2,
                    downsample,
                });
                c_in = width;
            }
        }
        let limit = (6.0 / (c_in + out_dim) as f32).sqrt();
        let uni = rand_distr::Uniform::new(-limit, limit).unwrap();
        Self {
            stem_weight,
            stem_scale: Array1::ones(STEM_CHANNELS),
            stem_shift: Array1::zeros(STEM_CHANNELS),
            blocks,
            proj_weight: Array2::from_shape_fn((c_in, out_dim), |_| uni.sample(&mut rng)),
            proj_bias: Array1::zeros(out_dim),
            frozen: true,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.proj_weight.ncols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Zeroes the final linear map, which makes every embedding zero.
    pub fn zero_final_layer(&mut self) {
        self.proj_weight.fill(0.0);
        self.proj_bias.fill(0.0);
    }

    /// Conv3D + norm + rectifier + spatial max-pool: `[T, 22, 22, 64]`.
    pub fn stem(&self, lips: &LipSequence) -> Array4<f32> {
        let frames = lips.frames();
        let t_v = frames.dim().0;
        let [kt, kh, kw] = STEM_KERNEL;
        let [pt, ph, pw] = STEM_PAD;
        let st = STEM_STRIDE[1];
        let side = (LIP_SIZE + 2 * ph - kh) / st + 1;
        let row_len = kt * kh * kw;
        let src = frames.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let plane = LIP_SIZE * LIP_SIZE;

        let mut out = Array4::<f32>::zeros((t_v, side / 2, side / 2, STEM_CHANNELS));
        let mut cols = Array2::<f32>::zeros((side * side, row_len));
        for t in 0..t_v {
            cols.fill(0.0);
            let dst = cols.as_slice_mut().unwrap();
            for dt in 0..kt {
                let it = (t + dt) as isize - pt as isize;
                if it < 0 || it >= t_v as isize {
                    continue;
                }
                let frame = &src[it as usize * plane..][..plane];
                for oy in 0..side {
                    for ky in 0..kh {
                        let iy = (oy * st + ky) as isize - ph as isize;
                        if iy < 0 || iy >= LIP_SIZE as isize {
                            continue;
                        }
                        let line = &frame[iy as usize * LIP_SIZE..][..LIP_SIZE];
                        for ox in 0..side {
                            let row = &mut dst[(oy * side + ox) * row_len..][..row_len];
                            let base = (dt * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * st + kx) as isize - pw as isize;
                                if ix >= 0 && ix < LIP_SIZE as isize {
                                    row[base + kx] = line[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
            let mut act = cols.dot(&self.stem_weight);
            act *= &self.stem_scale;
            act += &self.stem_shift;
            act.mapv_inplace(|v| v.max(0.0));
            let act = act.into_shape_with_order((side, side, STEM_CHANNELS)).unwrap();
            out.index_axis_mut(Axis(0), t).assign(&max_pool_3x3_s2(&act));
        }
        out
    }

    fn trunk(&self, stem_frame: &Array3<f32>) -> Array1<f32> {
        let mut x = stem_frame.clone();
        for b in &self.blocks {
            x = b.forward(&x);
        }
        let (h, w, c) = x.dim();
        let pooled = x.into_shape_with_order((h * w, c)).unwrap().mean_axis(Axis(0)).unwrap();
        pooled.dot(&self.proj_weight) + &self.proj_bias
    }

    /// Encodes a lip sequence into one embedding row per video frame.
    pub fn encode(&self, lips: &LipSequence) -> Result<VisualEmbedding> {
        let stem = self.stem(lips);
        let mut out = Array2::<f64>::zeros((lips.num_frames(), self.out_dim()));
        for (t, frame) in stem.outer_iter().enumerate() {
            let emb = self.trunk(&frame.to_owned());
            out.row_mut(t).assign(&emb.mapv(f64::from));
        }
        VisualEmbedding::new(out)
    }

    /// Named parameter tensors, in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, ArrayD<f32>)> {
        let mut v = Vec::new();
        let [kt, kh, kw] = STEM_KERNEL;
        v.push((
            "visual.stem.weight".to_string(),
            self.stem_weight
                .clone()
                .into_shape_with_order((kt, kh, kw, STEM_CHANNELS))
                .unwrap()
                .into_dyn(),
        ));
        v.push(("visual.stem.scale".into(), self.stem_scale.clone().into_dyn()));
        v.push(("visual.stem.shift".into(), self.stem_shift.clone().into_dyn()));
        for (i, b) in self.blocks.iter().enumerate() {
            let mut convs = vec![("conv1", &b.conv1), ("conv2", &b.conv2)];
            if let Some(d) = &b.downsample {
                convs.push(("downsample", d));
            }
            for (name, c) in convs {
                let p = format!("visual.block{i}.{name}");
                let (k, ci, co) = (c.kernel, c.c_in(), c.weight.ncols());
                v.push((
                    format!("{p}.weight"),
                    c.weight
                        .clone()
                        .into_shape_with_order((k, k, ci, co))
                        .unwrap()
                        .into_dyn(),
                ));
                v.push((format!("{p}.scale"), c.scale.clone().into_dyn()));
                v.push((format!("{p}.shift"), c.shift.clone().into_dyn()));
            }
        }
        v.push(("visual.proj.weight".into(), self.proj_weight.clone().into_dyn()));
        v.push(("visual.proj.bias".into(), self.proj_bias.clone().into_dyn()));
        v
    }

    /// Replaces every parameter from `tensors`, which must hold each name
    /// reported by [`named_tensors`](Self::named_tensors) with a matching shape.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, ArrayD<f32>>) -> Result<()> {
        let take = |name: &str, shape: &[usize]| -> Result<ArrayD<f32>> {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let as2 = |t: ArrayD<f32>, r: usize, c: usize| -> Array2<f32> {
            t.into_shape_with_order((r, c))
                .unwrap()
                .into_dimensionality::<Ix2>()
                .unwrap()
        };
        let as1 = |t: ArrayD<f32>| -> Array1<f32> { t.into_dimensionality::<Ix1>().unwrap() };

        let [kt, kh, kw] = STEM_KERNEL;
        let w = take("visual.stem.weight", &[kt, kh, kw, STEM_CHANNELS])?;
        self.stem_weight = as2(w, kt * kh * kw, STEM_CHANNELS);
        self.stem_scale = as1(take("visual.stem.scale", &[STEM_CHANNELS])?);
        self.stem_shift = as1(take("visual.stem.shift", &[STEM_CHANNELS])?);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let mut convs: Vec<(&str, &mut ConvBn)> = vec![("conv1", &mut b.conv1), ("conv2", &mut b.conv2)];
            if let Some(d) = b.downsample.as_mut() {
                convs.push(("downsample", d));
            }
            for (name, c) in convs {
                let p = format!("visual.block{i}.{name}");
                let (k, ci, co) = (c.kernel, c.c_in(), c.weight.ncols());
                let w = take(&format!("{p}.weight"), &[k, k, ci, co])?;
                let w = w.into_dimensionality::<Ix4>().unwrap();
                c.weight = as2(w.into_dyn(), k * k * ci, co);
                c.scale = as1(take(&format!("{p}.scale"), &[co])?);
                c.shift = as1(take(&format!("{p}.shift"), &[co])?);
            }
        }
        let (r, c) = self.proj_weight.dim();
        self.proj_weight = as2(take("visual.proj.weight", &[r, c])?, r, c);
        self.proj_bias = as1(take("visual.proj.bias", &[c])?);
        Ok(())
    }
}

fn max_pool_3x3_s2(x: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = x.dim();
    let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut out = Array3::<f32>::from_elem((ho, wo, c), f32::NEG_INFINITY);
    for oy in 0..ho {
        for ox in 0..wo {
            let mut cell = out.slice_mut(s![oy, ox, ..]);
            for ky in 0..3 {
                let iy = (oy * 2 + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * 2 + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    cell.zip_mut_with(&x.slice(s![iy as usize, ix as usize, ..]), |o, &v| *o = o.max(v));
                }
            }
        }
    }
    out
}

/// Encodes `lips` with `encoder`. The `frozen` flag records whether the
/// encoder's parameters may be updated by training; inference ignores it.
pub fn lip_encode(lips: &LipSequence, encoder: &LipEncoder) -> Result<VisualEmbedding> {
    encoder.encode(lips)
}
