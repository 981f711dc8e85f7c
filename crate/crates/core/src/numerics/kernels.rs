//! Forward and backward kernels for the differentiable operators.
//!
//! All spatial operators work internally on three spatial axes
//! (depth, height, width); 2-D operators run with depth 1. Reductions add
//! terms in a fixed sequential order so results are reproducible bit for bit.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

/// Stride and padding of a 2-D or 3-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    dims: usize,
    stride: [usize; 3],
    padding: [usize; 3],
}

impl ConvGeometry {
    /// `stride` and `padding` list one entry per spatial axis (`dims` of them).
    pub fn new(dims: usize, stride: &[usize], padding: &[usize]) -> Result<Self> {
        if dims != 2 && dims != 3 {
            return Err(Error::InvalidArgument(format!(
                "convolution dims must be 2 or 3, got {dims}"
            )));
        }
        if stride.len() != dims || padding.len() != dims {
            return Err(Error::InvalidArgument(format!(
                "expected {dims} stride and padding entries, got {} and {}",
                stride.len(),
                padding.len()
            )));
        }
        if stride.contains(&0) {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let mut s = [1; 3];
        let mut p = [0; 3];
        s[3 - dims..].copy_from_slice(stride);
        p[3 - dims..].copy_from_slice(padding);
        Ok(ConvGeometry {
            dims,
            stride: s,
            padding: p,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn stride(&self) -> &[usize] {
        &self.stride[3 - self.dims..]
    }

    pub fn padding(&self) -> &[usize] {
        &self.padding[3 - self.dims..]
    }
}

const AXIS_NAMES: [&str; 3] = ["depth", "height", "width"];

/// Output extent of one spatial axis: floor((n + 2p - k) / s) + 1.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Resolved extents of a convolution, all lifted to three spatial axes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
}

pub(crate) fn conv_dims<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<ConvDims> {
    let dims = geom.dims;
    if input.rank() != dims + 1 {
        return Err(Error::shape(
            "input rank",
            format!(
                "{dims}-D convolution expects rank {} input, got shape {:?}",
                dims + 1,
                input.shape()
            ),
        ));
    }
    if kernel.rank() != dims + 2 {
        return Err(Error::shape(
            "kernel rank",
            format!(
                "{dims}-D convolution expects rank {} kernel, got shape {:?}",
                dims + 2,
                kernel.shape()
            ),
        ));
    }
    let in_ch = input.shape()[0];
    let out_ch = kernel.shape()[0];
    if kernel.shape()[1] != in_ch {
        return Err(Error::shape(
            "in_channels",
            format!(
                "kernel expects {} input channels, input has {in_ch}",
                kernel.shape()[1]
            ),
        ));
    }
    if bias.shape() != [out_ch] {
        return Err(Error::shape(
            "bias",
            format!("expected shape [{out_ch}], got {:?}", bias.shape()),
        ));
    }
    let mut inp = [1; 3];
    let mut ker = [1; 3];
    let mut out = [1; 3];
    inp[3 - dims..].copy_from_slice(&input.shape()[1..]);
    ker[3 - dims..].copy_from_slice(&kernel.shape()[2..]);
    for a in 0..3 {
        out[a] = conv_out_len(inp[a], ker[a], geom.stride[a], geom.padding[a]).ok_or_else(|| {
            Error::shape(
                AXIS_NAMES[a],
                format!(
                    "padded extent {} is smaller than kernel extent {}",
                    inp[a] + 2 * geom.padding[a],
                    ker[a]
                ),
            )
        })?;
    }
    Ok(ConvDims {
        in_ch,
        out_ch,
        input: inp,
        kernel: ker,
        output: out,
    })
}

/// Range of output positions `o` for which `o * s + k - p` lands inside `[0, n)`.
#[inline]
fn valid_range(out_len: usize, n: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    // need o*s + k >= p  and  o*s + k - p < n
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if n + p <= k {
        0
    } else {
        ((n + p - k - 1) / s + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Cross-correlation plus per-output-channel bias.
pub fn conv_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let cd = conv_dims(input, kernel, bias, geom)?;
    let [id, ih, iw] = cd.input;
    let [kd, kh, kw] = cd.kernel;
    let [od, oh, ow] = cd.output;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let x = input.data();
    let w = kernel.data();
    let out_plane = od * oh * ow;
    let mut out = vec![T::zero(); cd.out_ch * out_plane];

    for oc in 0..cd.out_ch {
        let ob = &mut out[oc * out_plane..(oc + 1) * out_plane];
        ob.fill(bias.data()[oc]);
        for ic in 0..cd.in_ch {
            let xb = &x[ic * id * ih * iw..(ic + 1) * id * ih * iw];
            for a in 0..kd {
                let (d_lo, d_hi) = valid_range(od, id, a, sd, pd);
                for b in 0..kh {
                    let (h_lo, h_hi) = valid_range(oh, ih, b, sh, ph);
                    for c in 0..kw {
                        let (w_lo, w_hi) = valid_range(ow, iw, c, sw, pw);
                        let wv = w[(((oc * cd.in_ch + ic) * kd + a) * kh + b) * kw + c];
                        for o_d in d_lo..d_hi {
                            let i_d = o_d * sd + a - pd;
                            for o_h in h_lo..h_hi {
                                let i_h = o_h * sh + b - ph;
                                let orow = &mut ob[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                                let xrow = &xb[(i_d * ih + i_h) * iw..(i_d * ih + i_h + 1) * iw];
                                for o_w in w_lo..w_hi {
                                    orow[o_w] += wv * xrow[o_w * sw + c - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut shape = vec![cd.out_ch];
    shape.extend_from_slice(&cd.output[3 - geom.dims..]);
    Tensor::new(shape, out)
}

/// Gradients of a convolution w.r.t. (input, kernel, bias) given the output gradient.
pub fn conv_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
    grad_out: &Tensor<T>,
    want_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let cd = conv_dims(input, kernel, bias, geom)?;
    let [id, ih, iw] = cd.input;
    let [kd, kh, kw] = cd.kernel;
    let [od, oh, ow] = cd.output;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let x = input.data();
    let w = kernel.data();
    let g = grad_out.data();
    let out_plane = od * oh * ow;
    let in_plane = id * ih * iw;
    let mut gx = vec![T::zero(); if want_input_grad { x.len() } else { 0 }];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); cd.out_ch];

    for oc in 0..cd.out_ch {
        let gob = &g[oc * out_plane..(oc + 1) * out_plane];
        let mut acc = T::zero();
        for &v in gob {
            acc += v;
        }
        gb[oc] = acc;
        for ic in 0..cd.in_ch {
            let xb = &x[ic * in_plane..(ic + 1) * in_plane];
            let gxb: &mut [T] = if want_input_grad {
                &mut gx[ic * in_plane..(ic + 1) * in_plane]
            } else {
                &mut []
            };
            for a in 0..kd {
                let (d_lo, d_hi) = valid_range(od, id, a, sd, pd);
                for b in 0..kh {
                    let (h_lo, h_hi) = valid_range(oh, ih, b, sh, ph);
                    for c in 0..kw {
                        let (w_lo, w_hi) = valid_range(ow, iw, c, sw, pw);
                        let widx = (((oc * cd.in_ch + ic) * kd + a) * kh + b) * kw + c;
                        let wv = w[widx];
                        let mut wacc = T::zero();
                        for o_d in d_lo..d_hi {
                            let i_d = o_d * sd + a - pd;
                            for o_h in h_lo..h_hi {
                                let i_h = o_h * sh + b - ph;
                                let grow = &gob[(o_d * oh + o_h) * ow..(o_d * oh + o_h + 1) * ow];
                                let xoff = (i_d * ih + i_h) * iw;
                                if want_input_grad {
                                    for o_w in w_lo..w_hi {
                                        let xi = xoff + o_w * sw + c - pw;
                                        let gv = grow[o_w];
                                        wacc += gv * xb[xi];
                                        gxb[xi] += gv * wv;
                                    }
                                } else {
                                    for o_w in w_lo..w_hi {
                                        wacc += grow[o_w] * xb[xoff + o_w * sw + c - pw];
                                    }
                                }
                            }
                        }
                        gw[widx] = wacc;
                    }
                }
            }
        }
    }
    let gx = if want_input_grad {
        Some(Tensor::new(input.shape().to_vec(), gx)?)
    } else {
        None
    };
    Ok((
        gx,
        Tensor::new(kernel.shape().to_vec(), gw)?,
        Tensor::new(bias.shape().to_vec(), gb)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Mean,
}

/// Pooling window and stride over the spatial axes of a `(C, [D,] H, W)` tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kind: PoolKind,
    pub window: Vec<usize>,
    pub stride: Vec<usize>,
}

pub(crate) struct PoolDims {
    pub ch: usize,
    pub input: [usize; 3],
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
    pub spatial: usize,
}

pub(crate) fn pool_dims<T: Real>(input: &Tensor<T>, geom: &PoolGeometry) -> Result<PoolDims> {
    let spatial = input.rank().saturating_sub(1);
    if !(1..=3).contains(&spatial) {
        return Err(Error::shape(
            "input rank",
            format!("pooling expects (C, [D,] [H,] W), got {:?}", input.shape()),
        ));
    }
    if geom.window.len() != spatial || geom.stride.len() != spatial {
        return Err(Error::InvalidArgument(format!(
            "pool window/stride need {spatial} entries"
        )));
    }
    let mut inp = [1; 3];
    let mut win = [1; 3];
    let mut st = [1; 3];
    inp[3 - spatial..].copy_from_slice(&input.shape()[1..]);
    win[3 - spatial..].copy_from_slice(&geom.window);
    st[3 - spatial..].copy_from_slice(&geom.stride);
    let mut out = [1; 3];
    for a in 0..3 {
        if win[a] == 0 || st[a] == 0 {
            return Err(Error::InvalidArgument("pool window and stride must be positive".into()));
        }
        if win[a] > inp[a] {
            return Err(Error::shape(
                AXIS_NAMES[a],
                format!("pool window {} exceeds extent {}", win[a], inp[a]),
            ));
        }
        out[a] = (inp[a] - win[a]) / st[a] + 1;
    }
    Ok(PoolDims {
        ch: input.shape()[0],
        input: inp,
        window: win,
        stride: st,
        output: out,
        spatial,
    })
}

/// Pools without padding. For max pooling the flat input index of each
/// selected element (first maximum in scan order) is returned as well.
pub fn pool_forward<T: Real>(
    input: &Tensor<T>,
    geom: &PoolGeometry,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let pd = pool_dims(input, geom)?;
    let [id, ih, iw] = pd.input;
    let [wd, wh, ww] = pd.window;
    let [sd, sh, sw] = pd.stride;
    let [od, oh, ow] = pd.output;
    let x = input.data();
    let count = T::from_usize(wd * wh * ww).unwrap();
    let mut out = Vec::with_capacity(pd.ch * od * oh * ow);
    let mut argmax = Vec::new();
    for c in 0..pd.ch {
        for o_d in 0..od {
            for o_h in 0..oh {
                for o_w in 0..ow {
                    let mut acc = T::zero();
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for a in 0..wd {
                        for b in 0..wh {
                            for e in 0..ww {
                                let idx = ((c * id + o_d * sd + a) * ih + o_h * sh + b) * iw
                                    + o_w * sw
                                    + e;
                                let v = x[idx];
                                match geom.kind {
                                    PoolKind::Mean => acc += v,
                                    PoolKind::Max => {
                                        if v > best {
                                            best = v;
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    match geom.kind {
                        PoolKind::Mean => out.push(acc / count),
                        PoolKind::Max => {
                            out.push(best);
                            argmax.push(best_idx);
                        }
                    }
                }
            }
        }
    }
    let mut shape = vec![pd.ch];
    shape.extend_from_slice(&pd.output[3 - pd.spatial..]);
    Ok((Tensor::new(shape, out)?, argmax))
}

pub fn pool_backward<T: Real>(
    input: &Tensor<T>,
    geom: &PoolGeometry,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let pd = pool_dims(input, geom)?;
    let mut gx = vec![T::zero(); input.numel()];
    let g = grad_out.data();
    match geom.kind {
        PoolKind::Max => {
            for (&idx, &gv) in argmax.iter().zip(g) {
                gx[idx] += gv;
            }
        }
        PoolKind::Mean => {
            let [id, ih, iw] = pd.input;
            let [wd, wh, ww] = pd.window;
            let [sd, sh, sw] = pd.stride;
            let [od, oh, ow] = pd.output;
            let count = T::from_usize(wd * wh * ww).unwrap();
            let mut o = 0;
            for c in 0..pd.ch {
                for o_d in 0..od {
                    for o_h in 0..oh {
                        for o_w in 0..ow {
                            let share = g[o] / count;
                            o += 1;
                            for a in 0..wd {
                                for b in 0..wh {
                                    for e in 0..ww {
                                        let idx = ((c * id + o_d * sd + a) * ih + o_h * sh + b)
                                            * iw
                                            + o_w * sw
                                            + e;
                                        gx[idx] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), gx)
}

/// Mean over every spatial cell of a `(C, ...)` tensor, giving a length-C vector.
pub fn global_mean_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() < 2 {
        return Err(Error::shape(
            "input rank",
            format!("global pooling expects (C, ...), got {:?}", input.shape()),
        ));
    }
    let ch = input.shape()[0];
    let cells = input.numel() / ch;
    let denom = T::from_usize(cells).unwrap();
    let out = input
        .data()
        .chunks(cells)
        .map(|plane| {
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            acc / denom
        })
        .collect();
    Tensor::new(vec![ch], out)
}

/// `weight · input + bias` for a `(out, in)` weight.
pub fn affine<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if weight.rank() != 2 {
        return Err(Error::shape(
            "weight",
            format!("expected (out, in), got {:?}", weight.shape()),
        ));
    }
    let (n_out, n_in) = (weight.shape()[0], weight.shape()[1]);
    if input.shape() != [n_in] {
        return Err(Error::shape(
            "input",
            format!("expected length {n_in} vector, got {:?}", input.shape()),
        ));
    }
    if bias.shape() != [n_out] {
        return Err(Error::shape(
            "bias",
            format!("expected length {n_out}, got {:?}", bias.shape()),
        ));
    }
    let x = input.data();
    let out = weight
        .data()
        .chunks(n_in)
        .zip(bias.data())
        .map(|(row, &b)| {
            let mut acc = T::zero();
            for (&w, &v) in row.iter().zip(x) {
                acc += w * v;
            }
            acc + b
        })
        .collect();
    Tensor::new(vec![n_out], out)
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Numerically stabilized softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let mut total = T::zero();
    for &e in &exps {
        total += e;
    }
    exps.into_iter().map(|e| e / total).collect()
}

/// Returns `(-ln p[label], p)`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 1 {
        return Err(Error::shape(
            "logits",
            format!("expected a vector, got {:?}", logits.shape()),
        ));
    }
    if label >= logits.numel() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.numel()
        )));
    }
    let l = logits.data();
    let max = l.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for &v in l {
        total += (v - max).exp();
    }
    let log_z = max + total.ln();
    let loss = log_z - l[label];
    let probs = l.iter().map(|&v| (v - log_z).exp()).collect();
    Ok((loss, Tensor::from_vec(probs)))
}

/// Cosine of every aligned spatial cell of two `(C, H, W)` grids.
///
/// Returns the `H*W` cosines in row-major cell order and the number of cells
/// where either vector had zero norm (those cells are assigned cosine 0).
pub fn cell_cosines<T: Real>(h: &Tensor<T>, z: &Tensor<T>) -> Result<(Vec<T>, usize)> {
    if h.rank() != 3 || h.shape() != z.shape() {
        return Err(Error::shape(
            "grid",
            format!(
                "score needs two equal (C, H, W) grids, got {:?} and {:?}",
                h.shape(),
                z.shape()
            ),
        ));
    }
    let c = h.shape()[0];
    let cells = h.shape()[1] * h.shape()[2];
    let (hd, zd) = (h.data(), z.data());
    let mut cos = Vec::with_capacity(cells);
    let mut zero_cells = 0;
    for cell in 0..cells {
        let mut dot = T::zero();
        let mut hh = T::zero();
        let mut zz = T::zero();
        for ch in 0..c {
            let a = hd[ch * cells + cell];
            let b = zd[ch * cells + cell];
            dot += a * b;
            hh += a * a;
            zz += b * b;
        }
        if hh > T::zero() && zz > T::zero() {
            // rounding can push |cos| a hair past 1
            let v = dot / (hh.sqrt() * zz.sqrt());
            cos.push(v.max(-T::one()).min(T::one()));
        } else {
            zero_cells += 1;
            cos.push(T::zero());
        }
    }
    Ok((cos, zero_cells))
}

/// Sequential mean; the shared reduction used by the score and heatmaps.
pub fn mean_of<T: Real>(values: &[T]) -> T {
    let mut acc = T::zero();
    for &v in values {
        acc += v;
    }
    acc / T::from_usize(values.len()).unwrap()
}
