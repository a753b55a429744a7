use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::im2col::{col2im_add, im2col_into, ConvGeometry};
use crate::{NnError, Result};

/// Serializable layer description. Together with the weights this fully
/// determines a [`Layer`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        out_channels: usize,
        geometry: ConvGeometry,
    },
    /// Transposed convolution. `geometry` describes the *output* image as seen
    /// by the adjoint convolution, so `geometry.out_*` is the input size.
    ConvTranspose2d {
        in_channels: usize,
        geometry: ConvGeometry,
    },
    MaxPool2d {
        channels: usize,
        height: usize,
        width: usize,
    },
    Relu,
    LeakyRelu {
        slope: f32,
    },
    Sigmoid,
    Tanh,
}

impl LayerSpec {
    pub fn conv(in_c: usize, out_c: usize, hw: (usize, usize), kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels: out_c,
            geometry: ConvGeometry { channels: in_c, height: hw.0, width: hw.1, kernel, stride, padding },
        }
    }

    /// Transposed conv mapping `in_c x in_hw` to `out_c x out_hw`.
    pub fn conv_transpose(
        in_c: usize,
        out_c: usize,
        out_hw: (usize, usize),
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec::ConvTranspose2d {
            in_channels: in_c,
            geometry: ConvGeometry { channels: out_c, height: out_hw.0, width: out_hw.1, kernel, stride, padding },
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            LayerSpec::Linear { inputs, .. } => Some(*inputs),
            LayerSpec::Conv2d { geometry, .. } => Some(geometry.image_len()),
            LayerSpec::ConvTranspose2d { in_channels, geometry } => Some(in_channels * geometry.out_positions()),
            LayerSpec::MaxPool2d { channels, height, width } => Some(channels * height * width),
            _ => None,
        }
    }

    pub fn output_dim(&self, input: usize) -> usize {
        match self {
            LayerSpec::Linear { outputs, .. } => *outputs,
            LayerSpec::Conv2d { out_channels, geometry } => out_channels * geometry.out_positions(),
            LayerSpec::ConvTranspose2d { geometry, .. } => geometry.image_len(),
            LayerSpec::MaxPool2d { channels, height, width } => channels * (height / 2) * (width / 2),
            _ => input,
        }
    }

    /// `(weight_len, bias_len)`.
    pub fn param_shape(&self) -> (usize, usize) {
        match self {
            LayerSpec::Linear { inputs, outputs } => (inputs * outputs, *outputs),
            LayerSpec::Conv2d { out_channels, geometry } => (out_channels * geometry.patch_len(), *out_channels),
            LayerSpec::ConvTranspose2d { in_channels, geometry } => {
                (in_channels * geometry.patch_len(), geometry.channels)
            }
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Linear { inputs, .. } => *inputs,
            LayerSpec::Conv2d { geometry, .. } => geometry.patch_len(),
            LayerSpec::ConvTranspose2d { in_channels, geometry } => {
                (in_channels * geometry.kernel * geometry.kernel / (geometry.stride * geometry.stride)).max(1)
            }
            _ => 0,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d { geometry, .. } | LayerSpec::ConvTranspose2d { geometry, .. }
                if !geometry.is_valid() =>
            {
                Err(NnError::Spec(format!("invalid convolution geometry {geometry:?}")))
            }
            LayerSpec::MaxPool2d { height, width, .. } if height % 2 != 0 || width % 2 != 0 => {
                Err(NnError::Spec(format!("2x2 pooling needs even sides, got {height}x{width}")))
            }
            _ => Ok(()),
        }
    }
}

/// A layer with its parameters. Activation layers carry empty parameter
/// vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Per-layer state saved by a training forward pass.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Input(Array2<f32>),
    Output(Array2<f32>),
    /// Per-image unfolded patches, one row per image.
    Cols(Array2<f32>),
    ArgMax(Vec<u32>),
    None,
}

impl Layer {
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (wn, bn) = spec.param_shape();
        let weight = if wn > 0 {
            let bound = (6.0 / spec.fan_in() as f32).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..wn).map(|_| dist.sample(rng)).collect()
        } else {
            Vec::new()
        };
        Ok(Layer { spec, weight, bias: vec![0.0; bn] })
    }

    pub fn has_params(&self) -> bool {
        !self.weight.is_empty()
    }

    fn weight_view(&self) -> ArrayView2<'_, f32> {
        let shape = match &self.spec {
            LayerSpec::Linear { inputs, outputs } => (*outputs, *inputs),
            LayerSpec::Conv2d { out_channels, geometry } => (*out_channels, geometry.patch_len()),
            LayerSpec::ConvTranspose2d { in_channels, geometry } => (*in_channels, geometry.patch_len()),
            _ => unreachable!("activation layers have no weight matrix"),
        };
        ArrayView2::from_shape(shape, &self.weight).expect("weight length matches spec")
    }

    pub(crate) fn forward(&self, mut x: Array2<f32>, keep: bool) -> (Array2<f32>, Cache) {
        let batch = x.nrows();
        if !x.is_standard_layout() {
            x = x.as_standard_layout().into_owned();
        }
        match &self.spec {
            LayerSpec::Linear { .. } => {
                let mut y = x.dot(&self.weight_view().t());
                y += &ArrayView2::from_shape((1, self.bias.len()), &self.bias).unwrap();
                (y, if keep { Cache::Input(x) } else { Cache::None })
            }
            LayerSpec::Conv2d { out_channels, geometry: g } => {
                let (p, kk) = (g.out_positions(), g.patch_len());
                let w = self.weight_view();
                let mut y = Array2::<f32>::zeros((batch, out_channels * p));
                let mut kept = if keep { Array2::<f32>::zeros((batch, kk * p)) } else { Array2::zeros((0, 0)) };
                let mut block = vec![0.0f32; if keep { 0 } else { kk * p }];
                for n in 0..batch {
                    let cols: &mut [f32] = if keep {
                        kept.row_mut(n).into_slice().unwrap()
                    } else {
                        block.iter_mut().for_each(|v| *v = 0.0);
                        &mut block
                    };
                    im2col_into(x.row(n).to_slice().unwrap(), g, cols);
                    let cols = ArrayView2::from_shape((kk, p), &*cols).unwrap();
                    let mut out =
                        ArrayViewMut2::from_shape((*out_channels, p), y.row_mut(n).into_slice().unwrap()).unwrap();
                    for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(&self.bias) {
                        row.fill(b);
                    }
                    general_mat_mul(1.0, &w, &cols, 1.0, &mut out);
                }
                (y, if keep { Cache::Cols(kept) } else { Cache::None })
            }
            LayerSpec::ConvTranspose2d { in_channels, geometry: g } => {
                let (ip, kk, hw) = (g.out_positions(), g.patch_len(), g.height * g.width);
                let wt = self.weight_view();
                let wt = wt.t();
                let mut y = Array2::<f32>::zeros((batch, g.image_len()));
                let mut block = Array2::<f32>::zeros((kk, ip));
                for n in 0..batch {
                    let xn = ArrayView2::from_shape((*in_channels, ip), x.row(n).to_slice().unwrap()).unwrap();
                    general_mat_mul(1.0, &wt, &xn, 0.0, &mut block);
                    let yn = y.row_mut(n).into_slice().unwrap();
                    for (c, &b) in self.bias.iter().enumerate() {
                        yn[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = b);
                    }
                    col2im_add(block.as_slice().unwrap(), g, yn);
                }
                (y, if keep { Cache::Input(x) } else { Cache::None })
            }
            LayerSpec::MaxPool2d { channels, height, width } => {
                let (oh, ow) = (height / 2, width / 2);
                let src = x.as_slice().unwrap();
                let mut y = Array2::<f32>::zeros((batch, channels * oh * ow));
                let mut arg = if keep { vec![0u32; batch * channels * oh * ow] } else { Vec::new() };
                let dst = y.as_slice_mut().unwrap();
                let in_len = channels * height * width;
                for n in 0..batch {
                    for c in 0..*channels {
                        let base = n * in_len + c * height * width;
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut best = base + 2 * i * width + 2 * j;
                                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = base + (2 * i + di) * width + 2 * j + dj;
                                    if src[idx] > src[best] {
                                        best = idx;
                                    }
                                }
                                let o = ((n * channels + c) * oh + i) * ow + j;
                                dst[o] = src[best];
                                if keep {
                                    arg[o] = (best - n * in_len) as u32;
                                }
                            }
                        }
                    }
                }
                (y, if keep { Cache::ArgMax(arg) } else { Cache::None })
            }
            LayerSpec::Relu => pointwise(x, keep, |v| v.max(0.0)),
            LayerSpec::LeakyRelu { slope } => {
                let s = *slope;
                pointwise(x, keep, move |v| if v > 0.0 { v } else { s * v })
            }
            LayerSpec::Sigmoid => pointwise(x, keep, sigmoid),
            LayerSpec::Tanh => pointwise(x, keep, f32::tanh),
        }
    }

    /// Propagate `gy` to the layer input, accumulating parameter gradients
    /// into `grad` when given. Returns `None` when `need_input` is false.
    pub(crate) fn backward(
        &self,
        cache: &Cache,
        gy: &Array2<f32>,
        grad: Option<(&mut [f32], &mut [f32])>,
        need_input: bool,
    ) -> Option<Array2<f32>> {
        let batch = gy.nrows();
        let gy = gy.as_standard_layout();
        match (&self.spec, cache) {
            (LayerSpec::Linear { inputs, outputs }, Cache::Input(x)) => {
                if let Some((gw, gb)) = grad {
                    let mut gw = ArrayViewMut2::from_shape((*outputs, *inputs), gw).unwrap();
                    general_mat_mul(1.0, &gy.t(), x, 1.0, &mut gw);
                    for (b, s) in gb.iter_mut().zip(gy.sum_axis(Axis(0)).iter()) {
                        *b += s;
                    }
                }
                need_input.then(|| gy.dot(&self.weight_view()))
            }
            (LayerSpec::Conv2d { out_channels, geometry: g }, Cache::Cols(cols)) => {
                let (p, kk) = (g.out_positions(), g.patch_len());
                let w = self.weight_view();
                let mut grad = grad.map(|(gw, gb)| (ArrayViewMut2::from_shape((*out_channels, kk), gw).unwrap(), gb));
                let mut gx = need_input.then(|| Array2::<f32>::zeros((batch, g.image_len())));
                let mut block = Array2::<f32>::zeros((kk, p));
                for n in 0..batch {
                    let gyn = ArrayView2::from_shape((*out_channels, p), gy.row(n).to_slice().unwrap()).unwrap();
                    if let Some((gw, gb)) = grad.as_mut() {
                        let cn = ArrayView2::from_shape((kk, p), cols.row(n).to_slice().unwrap()).unwrap();
                        general_mat_mul(1.0, &gyn, &cn.t(), 1.0, gw);
                        for (b, row) in gb.iter_mut().zip(gyn.axis_iter(Axis(0))) {
                            *b += row.sum();
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        general_mat_mul(1.0, &w.t(), &gyn, 0.0, &mut block);
                        col2im_add(block.as_slice().unwrap(), g, gx.row_mut(n).into_slice().unwrap());
                    }
                }
                gx
            }
            (LayerSpec::ConvTranspose2d { in_channels, geometry: g }, Cache::Input(x)) => {
                let (ip, kk, hw) = (g.out_positions(), g.patch_len(), g.height * g.width);
                let w = self.weight_view();
                let mut grad = grad.map(|(gw, gb)| (ArrayViewMut2::from_shape((*in_channels, kk), gw).unwrap(), gb));
                let mut gx = need_input.then(|| Array2::<f32>::zeros((batch, in_channels * ip)));
                let mut block = vec![0.0f32; kk * ip];
                for n in 0..batch {
                    let gyn = gy.row(n);
                    let gyn = gyn.to_slice().unwrap();
                    block.iter_mut().for_each(|v| *v = 0.0);
                    im2col_into(gyn, g, &mut block);
                    let gcols = ArrayView2::from_shape((kk, ip), &block[..]).unwrap();
                    if let Some((gw, gb)) = grad.as_mut() {
                        let xn = ArrayView2::from_shape((*in_channels, ip), x.row(n).to_slice().unwrap()).unwrap();
                        general_mat_mul(1.0, &xn, &gcols.t(), 1.0, gw);
                        for (c, b) in gb.iter_mut().enumerate() {
                            *b += gyn[c * hw..(c + 1) * hw].iter().sum::<f32>();
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut out =
                            ArrayViewMut2::from_shape((*in_channels, ip), gx.row_mut(n).into_slice().unwrap()).unwrap();
                        general_mat_mul(1.0, &w, &gcols, 0.0, &mut out);
                    }
                }
                gx
            }
            (LayerSpec::MaxPool2d { channels, height, width }, Cache::ArgMax(arg)) => need_input.then(|| {
                let in_len = channels * height * width;
                let mut gx = Array2::<f32>::zeros((batch, in_len));
                let src = gy.as_slice().unwrap();
                let dst = gx.as_slice_mut().unwrap();
                let out_len = src.len() / batch.max(1);
                for (o, (&g, &a)) in src.iter().zip(arg.iter()).enumerate() {
                    dst[(o / out_len) * in_len + a as usize] += g;
                }
                gx
            }),
            // Output-cached pointwise layers: the derivative is a function of
            // the output (ReLU and leaky ReLU preserve the sign).
            (LayerSpec::Relu, Cache::Output(y)) => {
                need_input.then(|| ndarray::Zip::from(&gy).and(y).map_collect(|&g, &v| if v > 0.0 { g } else { 0.0 }))
            }
            (LayerSpec::LeakyRelu { slope }, Cache::Output(y)) => need_input
                .then(|| ndarray::Zip::from(&gy).and(y).map_collect(|&g, &v| if v > 0.0 { g } else { slope * g })),
            (LayerSpec::Sigmoid, Cache::Output(y)) => {
                need_input.then(|| ndarray::Zip::from(&gy).and(y).map_collect(|&g, &s| g * s * (1.0 - s)))
            }
            (LayerSpec::Tanh, Cache::Output(y)) => {
                need_input.then(|| ndarray::Zip::from(&gy).and(y).map_collect(|&g, &t| g * (1.0 - t * t)))
            }
            (spec, _) => panic!("backward called without a training cache for {spec:?}"),
        }
    }
}

fn pointwise(mut x: Array2<f32>, keep: bool, f: impl Fn(f32) -> f32) -> (Array2<f32>, Cache) {
    x.mapv_inplace(f);
    let cache = if keep { Cache::Output(x.clone()) } else { Cache::None };
    (x, cache)
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
