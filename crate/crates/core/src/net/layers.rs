//! Differentiable building blocks: 3D convolution, transposed convolution,
//! pointwise nonlinearities, global average pooling, and an affine map.
//!
//! Everything computes in f64 with fixed sequential loop order, so outputs
//! and gradients are bit-deterministic. Layers are stateless shape
//! descriptors; parameters live in flat arrays owned by the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Dims3;

/// A multi-channel 3D tensor, channel-major: `idx = ((c*D + d)*H + h)*W + w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub channels: usize,
    pub dims: Dims3,
    pub data: Vec<f64>,
}

impl Feature {
    pub fn zeros(channels: usize, dims: Dims3) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims.voxels()],
        }
    }

    pub fn from_data(channels: usize, dims: Dims3, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * dims.voxels() {
            return Err(Error::Shape(format!(
                "feature data length {} != {channels} x {dims}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    #[inline]
    pub fn row_start(&self, c: usize, d: usize, h: usize) -> usize {
        ((c * self.dims.d + d) * self.dims.h + h) * self.dims.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.dims.voxels();
        &self.data[c * n..(c + 1) * n]
    }
}

/// `ceil(a / s)` for positive `s` and any `a`.
#[inline]
fn ceil_div(a: i64, s: i64) -> i64 {
    (a + s - 1).div_euclid(s)
}

/// Half-open range of positions `o` with `0 <= o*stride + kofs - pad < extent`,
/// clamped to `[0, limit)`.
#[inline]
fn valid_range(kofs: i64, pad: i64, stride: i64, extent: i64, limit: i64) -> (usize, usize) {
    let lo = ceil_div(pad - kofs, stride).max(0);
    let hi = ((extent - 1 + pad - kofs).div_euclid(stride) + 1).min(limit);
    (lo.max(0) as usize, hi.max(lo) as usize)
}

// ---------------------------------------------------------------------------
// Conv3d
// ---------------------------------------------------------------------------

/// 3D convolution: cubic kernel, isotropic stride and zero padding.
/// Weight layout `[out_ch][in_ch][kd][kh][kw]`, optional bias `[out_ch]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv3d {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.k * self.k * self.k
    }

    pub fn out_dims(&self, input: Dims3) -> Result<Dims3> {
        let f = |n: usize| -> Result<usize> {
            let num = (n + 2 * self.pad).checked_sub(self.k).ok_or_else(|| {
                Error::Shape(format!("input dim {n} smaller than kernel {}", self.k))
            })?;
            Ok(num / self.stride + 1)
        };
        Ok(Dims3::new(f(input.d)?, f(input.h)?, f(input.w)?))
    }

    pub fn forward(&self, x: &Feature, w: &[f64], b: Option<&[f64]>) -> Result<Feature> {
        debug_assert_eq!(x.channels, self.in_ch);
        debug_assert_eq!(w.len(), self.weight_len());
        let od = self.out_dims(x.dims)?;
        let mut y = Feature::zeros(self.out_ch, od);
        if let Some(b) = b {
            let n = od.voxels();
            for oc in 0..self.out_ch {
                y.data[oc * n..(oc + 1) * n].fill(b[oc]);
            }
        }
        let (k, s, p) = (self.k as i64, self.stride as i64, self.pad as i64);
        let idims = x.dims;
        for oc in 0..self.out_ch {
            for ic in 0..self.in_ch {
                let wbase = (oc * self.in_ch + ic) * (self.k * self.k * self.k);
                for kd in 0..k {
                    let (d0, d1) = valid_range(kd, p, s, idims.d as i64, od.d as i64);
                    for kh in 0..k {
                        let (h0, h1) = valid_range(kh, p, s, idims.h as i64, od.h as i64);
                        for kw in 0..k {
                            let wv =
                                w[wbase + ((kd * k + kh) * k + kw) as usize];
                            let (w0, w1) = valid_range(kw, p, s, idims.w as i64, od.w as i64);
                            for o_d in d0..d1 {
                                let i_d = (o_d as i64 * s + kd - p) as usize;
                                for o_h in h0..h1 {
                                    let i_h = (o_h as i64 * s + kh - p) as usize;
                                    let xrow = x.row_start(ic, i_d, i_h);
                                    let yrow = y.row_start(oc, o_d, o_h);
                                    let off = (kw - p) as isize;
                                    for o_w in w0..w1 {
                                        let i_w =
                                            (o_w as isize * s as isize + off) as usize;
                                        y.data[yrow + o_w] += wv * x.data[xrow + i_w];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulate parameter gradients into `dw`/`db` and optionally return
    /// the input gradient.
    pub fn backward(
        &self,
        x: &Feature,
        dy: &Feature,
        w: &[f64],
        dw: &mut [f64],
        mut db: Option<&mut [f64]>,
        want_dx: bool,
    ) -> Result<Option<Feature>> {
        let od = dy.dims;
        let idims = x.dims;
        let (k, s, p) = (self.k as i64, self.stride as i64, self.pad as i64);
        if let Some(db) = db.as_deref_mut() {
            let n = od.voxels();
            for oc in 0..self.out_ch {
                db[oc] += dy.data[oc * n..(oc + 1) * n].iter().sum::<f64>();
            }
        }
        let mut dx = want_dx.then(|| Feature::zeros(self.in_ch, idims));
        for oc in 0..self.out_ch {
            for ic in 0..self.in_ch {
                let wbase = (oc * self.in_ch + ic) * (self.k * self.k * self.k);
                for kd in 0..k {
                    let (d0, d1) = valid_range(kd, p, s, idims.d as i64, od.d as i64);
                    for kh in 0..k {
                        let (h0, h1) = valid_range(kh, p, s, idims.h as i64, od.h as i64);
                        for kw in 0..k {
                            let widx = wbase + ((kd * k + kh) * k + kw) as usize;
                            let wv = w[widx];
                            let (w0, w1) = valid_range(kw, p, s, idims.w as i64, od.w as i64);
                            let off = (kw - p) as isize;
                            let mut acc = 0.0;
                            for o_d in d0..d1 {
                                let i_d = (o_d as i64 * s + kd - p) as usize;
                                for o_h in h0..h1 {
                                    let i_h = (o_h as i64 * s + kh - p) as usize;
                                    let xrow = x.row_start(ic, i_d, i_h);
                                    let yrow = dy.row_start(oc, o_d, o_h);
                                    if let Some(dx) = dx.as_mut() {
                                        let dxrow = dx.row_start(ic, i_d, i_h);
                                        for o_w in w0..w1 {
                                            let i_w = (o_w as isize * s as isize + off)
                                                as usize;
                                            let g = dy.data[yrow + o_w];
                                            acc += g * x.data[xrow + i_w];
                                            dx.data[dxrow + i_w] += wv * g;
                                        }
                                    } else {
                                        for o_w in w0..w1 {
                                            let i_w = (o_w as isize * s as isize + off)
                                                as usize;
                                            acc += dy.data[yrow + o_w] * x.data[xrow + i_w];
                                        }
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose3d
// ---------------------------------------------------------------------------

/// 3D transposed convolution (learnable upsampling).
/// Weight layout `[in_ch][out_ch][kd][kh][kw]`, optional bias `[out_ch]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose3d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub bias: bool,
}

impl ConvTranspose3d {
    pub fn weight_len(&self) -> usize {
        self.in_ch * self.out_ch * self.k * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.k * self.k * self.k
    }

    pub fn out_dims(&self, input: Dims3) -> Result<Dims3> {
        if self.out_pad >= self.stride {
            return Err(Error::Param(format!(
                "output padding {} must be < stride {}",
                self.out_pad, self.stride
            )));
        }
        let f = |n: usize| -> Result<usize> {
            ((n - 1) * self.stride + self.k + self.out_pad)
                .checked_sub(2 * self.pad)
                .ok_or_else(|| Error::Shape(format!("transposed conv output underflow at {n}")))
        };
        Ok(Dims3::new(f(input.d)?, f(input.h)?, f(input.w)?))
    }

    pub fn forward(&self, x: &Feature, w: &[f64], b: Option<&[f64]>) -> Result<Feature> {
        debug_assert_eq!(x.channels, self.in_ch);
        let od = self.out_dims(x.dims)?;
        let mut y = Feature::zeros(self.out_ch, od);
        if let Some(b) = b {
            let n = od.voxels();
            for oc in 0..self.out_ch {
                y.data[oc * n..(oc + 1) * n].fill(b[oc]);
            }
        }
        let (k, s, p) = (self.k as i64, self.stride as i64, self.pad as i64);
        let idims = x.dims;
        for ic in 0..self.in_ch {
            for oc in 0..self.out_ch {
                let wbase = (ic * self.out_ch + oc) * (self.k * self.k * self.k);
                for kd in 0..k {
                    // iterate input positions whose scatter target is in range
                    let (d0, d1) = valid_range(kd, p, s, od.d as i64, idims.d as i64);
                    for kh in 0..k {
                        let (h0, h1) = valid_range(kh, p, s, od.h as i64, idims.h as i64);
                        for kw in 0..k {
                            let wv = w[wbase + ((kd * k + kh) * k + kw) as usize];
                            let (w0, w1) = valid_range(kw, p, s, od.w as i64, idims.w as i64);
                            let off = (kw - p) as isize;
                            for i_d in d0..d1 {
                                let o_d = (i_d as i64 * s + kd - p) as usize;
                                for i_h in h0..h1 {
                                    let o_h = (i_h as i64 * s + kh - p) as usize;
                                    let xrow = x.row_start(ic, i_d, i_h);
                                    let yrow = y.row_start(oc, o_d, o_h);
                                    for i_w in w0..w1 {
                                        let o_w =
                                            (i_w as isize * s as isize + off) as usize;
                                        y.data[yrow + o_w] += wv * x.data[xrow + i_w];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        x: &Feature,
        dy: &Feature,
        w: &[f64],
        dw: &mut [f64],
        mut db: Option<&mut [f64]>,
        want_dx: bool,
    ) -> Result<Option<Feature>> {
        let od = dy.dims;
        let idims = x.dims;
        let (k, s, p) = (self.k as i64, self.stride as i64, self.pad as i64);
        if let Some(db) = db.as_deref_mut() {
            let n = od.voxels();
            for oc in 0..self.out_ch {
                db[oc] += dy.data[oc * n..(oc + 1) * n].iter().sum::<f64>();
            }
        }
        let mut dx = want_dx.then(|| Feature::zeros(self.in_ch, idims));
        for ic in 0..self.in_ch {
            for oc in 0..self.out_ch {
                let wbase = (ic * self.out_ch + oc) * (self.k * self.k * self.k);
                for kd in 0..k {
                    let (d0, d1) = valid_range(kd, p, s, od.d as i64, idims.d as i64);
                    for kh in 0..k {
                        let (h0, h1) = valid_range(kh, p, s, od.h as i64, idims.h as i64);
                        for kw in 0..k {
                            let widx = wbase + ((kd * k + kh) * k + kw) as usize;
                            let wv = w[widx];
                            let (w0, w1) = valid_range(kw, p, s, od.w as i64, idims.w as i64);
                            let off = (kw - p) as isize;
                            let mut acc = 0.0;
                            for i_d in d0..d1 {
                                let o_d = (i_d as i64 * s + kd - p) as usize;
                                for i_h in h0..h1 {
                                    let o_h = (i_h as i64 * s + kh - p) as usize;
                                    let xrow = x.row_start(ic, i_d, i_h);
                                    let yrow = dy.row_start(oc, o_d, o_h);
                                    if let Some(dx) = dx.as_mut() {
                                        let dxrow = dx.row_start(ic, i_d, i_h);
                                        for i_w in w0..w1 {
                                            let o_w = (i_w as isize * s as isize + off)
                                                as usize;
                                            let g = dy.data[yrow + o_w];
                                            acc += g * x.data[xrow + i_w];
                                            dx.data[dxrow + i_w] += wv * g;
                                        }
                                    } else {
                                        for i_w in w0..w1 {
                                            let o_w = (i_w as isize * s as isize + off)
                                                as usize;
                                            acc += dy.data[yrow + o_w] * x.data[xrow + i_w];
                                        }
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Smooth: `x * sigmoid(x)`. Default; plays well with finite differences.
    Silu,
    /// Rectified: `max(0, x)`.
    Relu,
}

impl Activation {
    pub fn apply(&self, x: &Feature) -> Feature {
        let data = match self {
            Activation::Silu => x.data.iter().map(|&v| v * sigmoid(v)).collect(),
            Activation::Relu => x.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        Feature {
            channels: x.channels,
            dims: x.dims,
            data,
        }
    }

    /// Upstream gradient times the derivative at the pre-activation input.
    pub fn backward(&self, pre: &Feature, dy: &Feature) -> Feature {
        let data = match self {
            Activation::Silu => pre
                .data
                .iter()
                .zip(&dy.data)
                .map(|(&v, &g)| {
                    let s = sigmoid(v);
                    g * (s + v * s * (1.0 - s))
                })
                .collect(),
            Activation::Relu => pre
                .data
                .iter()
                .zip(&dy.data)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
        };
        Feature {
            channels: pre.channels,
            dims: pre.dims,
            data,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Global average pooling and affine projection
// ---------------------------------------------------------------------------

pub fn global_avg_pool(x: &Feature) -> Vec<f64> {
    let n = x.dims.voxels() as f64;
    (0..x.channels)
        .map(|c| x.channel(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_avg_pool_backward(x_dims: Dims3, channels: usize, d_pooled: &[f64]) -> Feature {
    let mut out = Feature::zeros(channels, x_dims);
    let n = x_dims.voxels();
    for c in 0..channels {
        let g = d_pooled[c] / n as f64;
        out.data[c * n..(c + 1) * n].fill(g);
    }
    out
}

/// Affine map `y = W x + b`; weight layout `[out][in]` row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn weight_len(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                b[o] + row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        w: &[f64],
        dw: &mut [f64],
        db: &mut [f64],
    ) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let g = dy[o];
            db[o] += g;
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let drow = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                drow[i] += g * x[i];
                dx[i] += row[i] * g;
            }
        }
        dx
    }
}
