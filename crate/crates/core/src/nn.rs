//! Small dense tensor layers used by the encoders, predictors and heads.

use ndarray::{concatenate, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// 2-D convolution over `C x H x W` maps, zero padded.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out x in x k x k`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: Array4::zeros((out_ch, in_ch, kernel, kernel)),
            bias: Array1::zeros(out_ch),
            stride,
            padding: kernel / 2,
        }
    }

    /// He-normal weights, zero bias.
    pub fn seeded<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let mut conv = Self::zeros(in_ch, out_ch, kernel, stride);
        conv.weight.mapv_inplace(|_| normal.sample(rng));
        conv
    }

    /// 1x1 convolution from a `out x in` matrix.
    pub fn pointwise(matrix: &Array2<f64>, bias: Array1<f64>) -> Self {
        let (o, i) = matrix.dim();
        let weight = matrix.clone().into_shape_with_order((o, i, 1, 1)).expect("shape");
        Self {
            weight,
            bias,
            stride: 1,
            padding: 0,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let oh = (h + 2 * self.padding - k) / self.stride + 1;
        let ow = (w + 2 * self.padding - k) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, input: &ArrayView3<f64>) -> Result<Array3<f64>> {
        let (cin, h, w) = input.dim();
        if cin != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {cin}",
                self.in_channels()
            )));
        }
        let k = self.kernel();
        let (oh, ow) = self.output_size(h, w);
        let cout = self.out_channels();
        let mut out = Array3::zeros((cout, oh, ow));
        for o in 0..cout {
            out.index_axis_mut(Axis(0), o).fill(self.bias[o]);
        }
        let pad = self.padding as isize;
        let stride = self.stride as isize;
        let input_slice = input.as_standard_layout();
        let out_slice = out.as_slice_mut().expect("standard layout");
        let inp = input_slice.as_slice().expect("standard layout");
        for o in 0..cout {
            for i in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight[[o, i, ky, kx]];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * stride + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = (i * h + iy as usize) * w;
                            let out_row = (o * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix = ox as isize * stride + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out_slice[out_row + ox] += wv * inp[in_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Parametric ReLU with one negative slope per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PRelu {
    pub slope: Array1<f64>,
}

impl PRelu {
    pub fn new(channels: usize, slope: f64) -> Self {
        Self {
            slope: Array1::from_elem(channels, slope),
        }
    }

    pub fn apply(&self, x: &mut Array3<f64>) {
        for (c, mut plane) in x.axis_iter_mut(Axis(0)).enumerate() {
            let a = self.slope[c];
            plane.mapv_inplace(|v| if v >= 0.0 { v } else { a * v });
        }
    }
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2(x: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, r, q)| x[[k, r / 2, q / 2]])
}

pub fn concat_channels(parts: &[ArrayView3<f64>]) -> Result<Array3<f64>> {
    concatenate(Axis(0), parts).map_err(|e| Error::Shape(format!("channel concat: {e}")))
}

/// Dense matrix draw with `N(0, std^2)` entries.
pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}
