//! Context encoder `g`, target encoder `f`, and the two linear heads.
//!
//! `g` is a stack of 3-D conv + relu blocks whose temporal strides collapse
//! the `K` context frames to a single step; `f` is a stack of 2-D conv + relu
//! blocks over one frame. Both end on the same `(C_out, H_out, W_out)` grid,
//! which is what the cell-cosine score compares. The heads mean-pool a grid
//! and apply one affine layer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::conv_out_len;
use crate::numerics::{ConvGeometry, Real, Tape, Tensor, Var};
use crate::rng;

pub const ROTATION_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub spatial_stride: usize,
    /// Ignored by the target encoder.
    #[serde(default = "one")]
    pub temporal_stride: usize,
}

fn one() -> usize {
    1
}

impl ConvBlock {
    pub const fn new(out_channels: usize, spatial_stride: usize, temporal_stride: usize) -> Self {
        ConvBlock {
            out_channels,
            spatial_stride,
            temporal_stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// `(height, width)` of encoder inputs, i.e. the crop size.
    pub frame_size: (usize, usize),
    pub context_len: usize,
    /// Odd, cubic for `g` and square for `f`; padding is `kernel / 2`.
    pub kernel: usize,
    pub context_blocks: Vec<ConvBlock>,
    pub target_blocks: Vec<ConvBlock>,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            frame_size: (32, 32),
            context_len: 16,
            kernel: 3,
            context_blocks: vec![
                ConvBlock::new(8, 2, 2),
                ConvBlock::new(16, 2, 2),
                ConvBlock::new(32, 2, 2),
                ConvBlock::new(32, 1, 2),
            ],
            target_blocks: vec![
                ConvBlock::new(8, 2, 1),
                ConvBlock::new(16, 2, 1),
                ConvBlock::new(32, 2, 1),
                ConvBlock::new(32, 1, 1),
            ],
            num_classes: 16,
        }
    }
}

impl EncoderConfig {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Output `(depth, H, W)` of the context stack.
    fn context_extent(&self) -> Result<[usize; 3]> {
        let (k, p) = (self.kernel, self.pad());
        let mut e = [self.context_len, self.frame_size.0, self.frame_size.1];
        for (i, b) in self.context_blocks.iter().enumerate() {
            let strides = [b.temporal_stride, b.spatial_stride, b.spatial_stride];
            for a in 0..3 {
                e[a] = conv_out_len(e[a], k, strides[a], p).ok_or_else(|| {
                    Error::Config(format!("context block {i} shrinks an axis below the kernel"))
                })?;
            }
        }
        Ok(e)
    }

    fn target_extent(&self) -> Result<[usize; 2]> {
        let (k, p) = (self.kernel, self.pad());
        let mut e = [self.frame_size.0, self.frame_size.1];
        for (i, b) in self.target_blocks.iter().enumerate() {
            for x in &mut e {
                *x = conv_out_len(*x, k, b.spatial_stride, p).ok_or_else(|| {
                    Error::Config(format!("target block {i} shrinks an axis below the kernel"))
                })?;
            }
        }
        Ok(e)
    }

    /// `(C_out, H_out, W_out)` shared by both encoders.
    pub fn output_grid(&self) -> Result<[usize; 3]> {
        self.validate()?;
        let e = self.target_extent()?;
        Ok([self.target_blocks.last().unwrap().out_channels, e[0], e[1]])
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.context_blocks.is_empty() || self.target_blocks.is_empty() {
            return Err(Error::Config("both encoders need at least one block".into()));
        }
        let all = self.context_blocks.iter().chain(&self.target_blocks);
        if all.clone().any(|b| b.out_channels == 0 || b.spatial_stride == 0 || b.temporal_stride == 0) {
            return Err(Error::Config("block channels and strides must be positive".into()));
        }
        let ctx = self.context_extent()?;
        if ctx[0] != 1 {
            return Err(Error::Config(format!(
                "context temporal strides reduce K = {} to {} steps, expected 1",
                self.context_len, ctx[0]
            )));
        }
        let tgt = self.target_extent()?;
        let cg = self.context_blocks.last().unwrap().out_channels;
        let tg = self.target_blocks.last().unwrap().out_channels;
        if [cg, ctx[1], ctx[2]] != [tg, tgt[0], tgt[1]] {
            return Err(Error::Config(format!(
                "encoder grids differ: context {:?}, target {:?}",
                [cg, ctx[1], ctx[2]],
                [tg, tgt[0], tgt[1]]
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Stable identifier of the architecture, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (i, b) in self.context_blocks.iter().enumerate() {
            out.push((format!("g.conv{i}.weight"), vec![b.out_channels, c_in, k, k, k]));
            out.push((format!("g.conv{i}.bias"), vec![b.out_channels]));
            c_in = b.out_channels;
        }
        let mut c_in = self.in_channels;
        for (i, b) in self.target_blocks.iter().enumerate() {
            out.push((format!("f.conv{i}.weight"), vec![b.out_channels, c_in, k, k]));
            out.push((format!("f.conv{i}.bias"), vec![b.out_channels]));
            c_in = b.out_channels;
        }
        let c_out = self.target_blocks.last().map(|b| b.out_channels).unwrap_or(0);
        out.push(("rot.weight".into(), vec![ROTATION_CLASSES, c_out]));
        out.push(("rot.bias".into(), vec![ROTATION_CLASSES]));
        out.push(("cls.weight".into(), vec![self.num_classes, c_out]));
        out.push(("cls.bias".into(), vec![self.num_classes]));
        out
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Context,
    Target,
    RotationHead,
    ClassifierHead,
}

pub fn group_of(name: &str) -> ParamGroup {
    match name.split('.').next() {
        Some("g") => ParamGroup::Context,
        Some("f") => ParamGroup::Target,
        Some("rot") => ParamGroup::RotationHead,
        _ => ParamGroup::ClassifierHead,
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> EncoderParams<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn indices_in(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.names.len())
            .filter(|&i| group_of(&self.names[i]) == group)
            .collect()
    }

    /// Checks names and shapes against a configuration.
    pub fn check_against(&self, config: &EncoderConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.names.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.names.len()
            )));
        }
        for ((name, shape), (n, t)) in expected.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {n} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Uniform(-a, a) with `a = sqrt(1 / fan_in)` for every tensor of a layer.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<f32>> {
    config.validate()?;
    let mut rng = rng::stream(seed, "init", 0);
    let shapes = config.param_shapes();
    let mut names = Vec::with_capacity(shapes.len());
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut fan_in = 1;
    for (name, shape) in shapes {
        if name.ends_with("weight") {
            fan_in = shape[1..].iter().product();
        }
        let a = (1.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.gen_range(-a..a) as f32)
            .collect();
        tensors.push(Tensor::new(shape, data)?);
        names.push(name);
    }
    Ok(EncoderParams { names, tensors })
}

/// Parameter tensors placed on a tape, addressable by role.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    context: Vec<(Var, Var)>,
    target: Vec<(Var, Var)>,
    rot: (Var, Var),
    cls: (Var, Var),
}

/// The pair of encoders plus heads for one configuration.
#[derive(Clone, Debug)]
pub struct SkipClipNet {
    pub config: EncoderConfig,
    context_geoms: Vec<ConvGeometry>,
    target_geoms: Vec<ConvGeometry>,
}

impl SkipClipNet {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let p = config.pad();
        let context_geoms = config
            .context_blocks
            .iter()
            .map(|b| {
                ConvGeometry::new(
                    3,
                    &[b.temporal_stride, b.spatial_stride, b.spatial_stride],
                    &[p, p, p],
                )
            })
            .collect::<Result<_>>()?;
        let target_geoms = config
            .target_blocks
            .iter()
            .map(|b| ConvGeometry::new(2, &[b.spatial_stride, b.spatial_stride], &[p, p]))
            .collect::<Result<_>>()?;
        Ok(SkipClipNet {
            config,
            context_geoms,
            target_geoms,
        })
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, params: &EncoderParams<T>) -> Result<BoundParams> {
        let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let nc = self.config.context_blocks.len();
        let nt = self.config.target_blocks.len();
        if vars.len() != 2 * (nc + nt) + 4 {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, architecture needs {}",
                vars.len(),
                2 * (nc + nt) + 4
            )));
        }
        let pairs = |from: usize, count: usize| (0..count).map(|i| (vars[from + 2 * i], vars[from + 2 * i + 1])).collect();
        let context = pairs(0, nc);
        let target = pairs(2 * nc, nt);
        let base = 2 * (nc + nt);
        Ok(BoundParams {
            context,
            target,
            rot: (vars[base], vars[base + 1]),
            cls: (vars[base + 2], vars[base + 3]),
            vars,
        })
    }

    /// `h = g(c)` for a `(K, C, h, w)` context, returned as a `(C_out, H_out, W_out)` node.
    pub fn encode_context<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, context: &Tensor<T>) -> Result<Var> {
        let (fh, fw) = self.config.frame_size;
        let expected = [self.config.context_len, self.config.in_channels, fh, fw];
        if context.shape() != expected {
            return Err(Error::shape(
                "context",
                format!("expected {expected:?}, got {:?}", context.shape()),
            ));
        }
        // (K, C, h, w) -> (C, K, h, w)
        let mut x = tape.constant(context.swap_leading_axes());
        for (&(w, b), &geom) in p.context.iter().zip(&self.context_geoms) {
            let y = tape.conv(x, w, b, geom)?;
            x = tape.relu(y);
        }
        let s = tape.value(x).shape().to_vec();
        tape.reshape(x, &[s[0], s[2], s[3]])
    }

    /// `z = f(x)` for a single `(C, h, w)` frame, or a `(1, C, h, w)` clip.
    pub fn encode_target<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, frame: &Tensor<T>) -> Result<Var> {
        let frame = match frame.rank() {
            4 if frame.shape()[0] == 1 => frame.index_outer(0),
            4 => return Err(Error::MultiFrameTarget(frame.shape()[0])),
            _ => frame.clone(),
        };
        let (fh, fw) = self.config.frame_size;
        let expected = [self.config.in_channels, fh, fw];
        if frame.shape() != expected {
            return Err(Error::shape(
                "target frame",
                format!("expected {expected:?}, got {:?}", frame.shape()),
            ));
        }
        let mut x = tape.constant(frame);
        for (&(w, b), &geom) in p.target.iter().zip(&self.target_geoms) {
            let y = tape.conv(x, w, b, geom)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// Four rotation logits from a target grid: global mean pool, then affine.
    pub fn predict_rotation<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, z: Var) -> Result<Var> {
        let pooled = tape.global_mean_pool(z)?;
        tape.affine(pooled, p.rot.0, p.rot.1)
    }

    /// Class logits from a context grid: global mean pool, then affine.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, h: Var) -> Result<Var> {
        let pooled = tape.global_mean_pool(h)?;
        tape.affine(pooled, p.cls.0, p.cls.1)
    }

    /// Inference-only context encoding.
    pub fn context_grid(&self, params: &EncoderParams<f32>, context: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, params)?;
        let h = self.encode_context(&mut tape, &p, context)?;
        Ok(tape.value(h).clone())
    }

    /// Inference-only target encoding.
    pub fn target_grid(&self, params: &EncoderParams<f32>, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, params)?;
        let z = self.encode_target(&mut tape, &p, frame)?;
        Ok(tape.value(z).clone())
    }
}
