//! Context, target and negative sampling, plus the augmentations applied to
//! each pretext example.
//!
//! A context is `K` contiguous frames `[t, t + K)`. Target `j` (1-based)
//! starts `j * r` frames after the last context frame and spans `d` frames,
//! so targets are spaced exactly `r` apart and the first one sits `r` frames
//! after the context. Negatives are single frames from other videos.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::videoio::Video;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSpec {
    /// `K`: context length in frames.
    pub context_len: usize,
    /// `M`: number of target clips.
    pub num_targets: usize,
    /// `r`: target sampling rate in frames.
    pub rate: usize,
    /// `d`: target clip length in frames.
    pub target_len: usize,
    pub num_negatives: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            context_len: 16,
            num_targets: 8,
            rate: 4,
            target_len: 1,
            num_negatives: 8,
        }
    }
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.context_len < 1 || self.rate < 1 || self.target_len < 1 {
            return Err(Error::Config("context_len, rate and target_len must be >= 1".into()));
        }
        if self.num_targets < 2 {
            return Err(Error::Config(format!(
                "ranking needs at least 2 targets, got {}",
                self.num_targets
            )));
        }
        if self.num_negatives < 1 {
            return Err(Error::Config("num_negatives must be >= 1".into()));
        }
        Ok(())
    }

    /// Frames spanned by a context plus all targets: `K + M*r + d - 1`.
    pub fn window(&self) -> usize {
        self.context_len + self.num_targets * self.rate + self.target_len - 1
    }

    /// Shortest video with at least one valid seek.
    pub fn min_frames(&self) -> usize {
        self.window() + 1
    }

    /// Start frame of target `j` (1-based) for seek `t`.
    pub fn target_start(&self, t: usize, j: usize) -> usize {
        t + self.context_len - 1 + j * self.rate
    }
}

/// Frames cut from one video at seek `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `(K, C, H, W)`.
    pub context: Tensor<f32>,
    /// `M` clips of shape `(d, C, H, W)`, nearest future first.
    pub targets: Vec<Tensor<f32>>,
    pub target_indices: Vec<usize>,
    pub t: usize,
}

/// Cuts context and targets at a fixed seek `t`.
pub fn sample_at(video: &Video, spec: &SampleSpec, t: usize) -> Result<Window> {
    let n = video.num_frames();
    if t + spec.window() > n {
        return Err(Error::InvalidArgument(format!(
            "seek {t} + window {} exceeds {n} frames",
            spec.window()
        )));
    }
    let context = video.clip(t, spec.context_len);
    let target_indices: Vec<usize> = (1..=spec.num_targets).map(|j| spec.target_start(t, j)).collect();
    let targets = target_indices
        .iter()
        .map(|&s| video.clip(s, spec.target_len))
        .collect();
    Ok(Window {
        context,
        targets,
        target_indices,
        t,
    })
}

/// Draws `t` uniformly from `{0, …, N - window - 1}` and cuts the window there.
pub fn seek_and_sample(video: &Video, spec: &SampleSpec, rng: &mut Rng) -> Result<Window> {
    let n = video.num_frames();
    if n < spec.min_frames() {
        return Err(Error::VideoTooShort {
            n,
            required: spec.min_frames(),
        });
    }
    let t = rng.gen_range(0..n - spec.window());
    sample_at(video, spec, t)
}

/// Negative frames with the index of the video each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Negatives {
    /// `(C, H, W)` frames.
    pub frames: Vec<Tensor<f32>>,
    pub source_videos: Vec<usize>,
    pub source_frames: Vec<usize>,
}

/// Draws `num_negatives` frames, each from a uniformly chosen video whose id
/// differs from `exclude_id`, at a uniformly chosen frame index.
pub fn sample_negatives(
    videos: &[Video],
    exclude_id: &str,
    spec: &SampleSpec,
    rng: &mut Rng,
) -> Result<Negatives> {
    let eligible: Vec<usize> = (0..videos.len())
        .filter(|&i| videos[i].id != exclude_id)
        .collect();
    if videos.len() < 2 || eligible.is_empty() {
        return Err(Error::NoNegativeSource);
    }
    let mut out = Negatives {
        frames: Vec::with_capacity(spec.num_negatives),
        source_videos: Vec::with_capacity(spec.num_negatives),
        source_frames: Vec::with_capacity(spec.num_negatives),
    };
    for _ in 0..spec.num_negatives {
        let v = eligible[rng.gen_range(0..eligible.len())];
        let f = rng.gen_range(0..videos[v].num_frames());
        out.frames.push(videos[v].frame(f));
        out.source_videos.push(v);
        out.source_frames.push(f);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub reverse_prob: f64,
    pub hflip_prob: f64,
    /// `(height, width)` of the crop.
    pub crop: (usize, usize),
    pub rotation_enabled: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            reverse_prob: 0.5,
            hflip_prob: 0.5,
            crop: (32, 32),
            rotation_enabled: true,
        }
    }
}

impl AugmentationSpec {
    /// No reversal, no flip; crops are centered.
    pub fn evaluation(&self) -> Self {
        AugmentationSpec {
            reverse_prob: 0.0,
            hflip_prob: 0.0,
            ..self.clone()
        }
    }
}

/// Augmentation decisions shared by every frame of one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub flip: bool,
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop_h: usize,
    pub crop_w: usize,
}

impl AugmentRecord {
    /// Draws one flip decision and one crop window for frames of size `h x w`.
    pub fn draw(frame_hw: (usize, usize), spec: &AugmentationSpec, rng: &mut Rng) -> Result<Self> {
        let (h, w) = frame_hw;
        let (ch, cw) = spec.crop;
        if ch > h || cw > w || ch == 0 || cw == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {ch}x{cw} does not fit frames of {h}x{w}"
            )));
        }
        let flip = rng.gen::<f64>() < spec.hflip_prob;
        Ok(AugmentRecord {
            flip,
            crop_y: rng.gen_range(0..=h - ch),
            crop_x: rng.gen_range(0..=w - cw),
            crop_h: ch,
            crop_w: cw,
        })
    }

    pub fn center(frame_hw: (usize, usize), crop: (usize, usize)) -> Result<Self> {
        let (h, w) = frame_hw;
        let (ch, cw) = crop;
        if ch > h || cw > w {
            return Err(Error::InvalidArgument(format!(
                "crop {ch}x{cw} does not fit frames of {h}x{w}"
            )));
        }
        Ok(AugmentRecord {
            flip: false,
            crop_y: (h - ch) / 2,
            crop_x: (w - cw) / 2,
            crop_h: ch,
            crop_w: cw,
        })
    }

    /// Applies crop then flip to a stack of frames `(..., C, H, W)`.
    pub fn apply(&self, frames: &Tensor<f32>) -> Tensor<f32> {
        let s = frames.shape();
        let r = s.len();
        let (h, w) = (s[r - 2], s[r - 1]);
        let planes = frames.numel() / (h * w);
        let mut data = Vec::with_capacity(planes * self.crop_h * self.crop_w);
        for p in 0..planes {
            let plane = &frames.data()[p * h * w..(p + 1) * h * w];
            for y in 0..self.crop_h {
                let row = &plane[(self.crop_y + y) * w + self.crop_x..][..self.crop_w];
                if self.flip {
                    data.extend(row.iter().rev());
                } else {
                    data.extend_from_slice(row);
                }
            }
        }
        let mut shape = s.to_vec();
        shape[r - 2] = self.crop_h;
        shape[r - 1] = self.crop_w;
        Tensor::new(shape, data).expect("crop shape")
    }
}

/// Horizontal mirror of a stack of frames `(..., H, W)`.
pub fn hflip(frames: &Tensor<f32>) -> Tensor<f32> {
    let s = frames.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    AugmentRecord {
        flip: true,
        crop_y: 0,
        crop_x: 0,
        crop_h: h,
        crop_w: w,
    }
    .apply(frames)
}

/// Applies one drawn flip + crop identically to the context and every target.
/// Reversal is not applied here: callers reverse the whole video before seeking.
pub fn augment(
    context: &Tensor<f32>,
    targets: &[Tensor<f32>],
    spec: &AugmentationSpec,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Vec<Tensor<f32>>, AugmentRecord)> {
    let s = context.shape();
    let record = AugmentRecord::draw((s[s.len() - 2], s[s.len() - 1]), spec, rng)?;
    let ctx = record.apply(context);
    let tg = targets.iter().map(|t| record.apply(t)).collect();
    Ok((ctx, tg, record))
}

/// Rotates a `(C, h, w)` frame counter-clockwise by `k * 90°`; each quarter
/// turn sends pixel `(row, col)` to `(w - 1 - col, row)`.
pub fn rotate_frame(frame: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    if frame.rank() != 3 {
        return Err(Error::shape("frame", format!("expected (C, H, W), got {:?}", frame.shape())));
    }
    let k = k % 4;
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    if k % 2 == 1 && h != w {
        return Err(Error::InvalidArgument(format!(
            "odd quarter turns need a square frame, got {h}x{w}"
        )));
    }
    let mut cur = frame.clone();
    for _ in 0..k {
        let (ch, cw) = (cur.shape()[1], cur.shape()[2]);
        let mut out = vec![0f32; c * ch * cw];
        for p in 0..c {
            for row in 0..ch {
                for col in 0..cw {
                    // output is (cw, ch)
                    out[p * ch * cw + (cw - 1 - col) * ch + row] = cur.data()[p * ch * cw + row * cw + col];
                }
            }
        }
        cur = Tensor::new(vec![c, cw, ch], out)?;
    }
    Ok(cur)
}

/// One pretext sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    /// `(K, C, h, w)`.
    pub context: Tensor<f32>,
    /// `M` tensors `(d, C, h, w)` in temporal order.
    pub targets: Vec<Tensor<f32>>,
    /// `(d, C, h, w)` each.
    pub negatives: Vec<Tensor<f32>>,
    /// Rotated single-frame copies `(C, h, w)` of each target; empty when rotation is off.
    pub rotation_inputs: Vec<Tensor<f32>>,
    pub rotation_labels: Vec<usize>,
    pub seek_index: usize,
    /// Frame indices of target starts in the (possibly reversed) source video.
    pub target_indices: Vec<usize>,
    pub video_index: usize,
    pub video_id: String,
    pub reversed: bool,
    pub negative_videos: Vec<usize>,
    pub negative_ids: Vec<String>,
    pub augment: AugmentRecord,
}

/// Builds complete training examples from a set of videos.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub sample: SampleSpec,
    pub augment: AugmentationSpec,
    /// Use a centered crop and never reverse or flip.
    pub deterministic_view: bool,
}

impl Sampler {
    pub fn new(sample: SampleSpec, augment: AugmentationSpec) -> Self {
        Sampler {
            sample,
            augment,
            deterministic_view: false,
        }
    }

    pub fn for_evaluation(sample: SampleSpec, augment: &AugmentationSpec) -> Self {
        Sampler {
            sample,
            augment: augment.evaluation(),
            deterministic_view: true,
        }
    }

    /// Reverse (maybe) → seek → flip/crop → negatives → rotations.
    pub fn example(&self, videos: &[Video], video_index: usize, rng: &mut Rng) -> Result<TrainingExample> {
        let source = &videos[video_index];
        let reversed = !self.deterministic_view && rng.gen::<f64>() < self.augment.reverse_prob;
        let reversed_video;
        let video = if reversed {
            reversed_video = source.reversed();
            &reversed_video
        } else {
            source
        };
        let win = seek_and_sample(video, &self.sample, rng)?;
        let [_, h, w] = video.frame_shape();
        let record = if self.deterministic_view {
            AugmentRecord::center((h, w), self.augment.crop)?
        } else {
            AugmentRecord::draw((h, w), &self.augment, rng)?
        };
        let context = record.apply(&win.context);
        let targets: Vec<Tensor<f32>> = win.targets.iter().map(|t| record.apply(t)).collect();

        let neg = sample_negatives(videos, &source.id, &self.sample, rng)?;
        let negatives = neg
            .frames
            .iter()
            .map(|f| {
                let s = f.shape();
                let clip = f.clone().reshape(&[1, s[0], s[1], s[2]]).expect("frame");
                record.apply(&clip)
            })
            .collect();

        let mut rotation_inputs = Vec::new();
        let mut rotation_labels = Vec::new();
        if self.augment.rotation_enabled {
            for t in &targets {
                let k = rng.gen_range(0..4);
                rotation_inputs.push(rotate_frame(&t.index_outer(0), k)?);
                rotation_labels.push(k);
            }
        }
        Ok(TrainingExample {
            context,
            targets,
            negatives,
            rotation_inputs,
            rotation_labels,
            seek_index: win.t,
            target_indices: win.target_indices,
            video_index,
            video_id: source.id.clone(),
            reversed,
            negative_ids: neg.source_videos.iter().map(|&v| videos[v].id.clone()).collect(),
            negative_videos: neg.source_videos,
            augment: record,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn counting_video(n: usize, id: &str) -> Video {
        // frame i holds the constant i / n
        let data = (0..n).flat_map(|i| std::iter::repeat_n(i as f32 / n as f32, 4)).collect();
        Video::new(Tensor::new(vec![n, 1, 2, 2], data).unwrap(), id, None).unwrap()
    }

    fn frame_index(clip: &Tensor<f32>, n: usize) -> usize {
        (clip.data()[0] * n as f32).round() as usize
    }

    #[test]
    fn reference_index_arithmetic() {
        let v = counting_video(100, "a");
        let win = sample_at(&v, &SampleSpec::default(), 0).unwrap();
        assert_eq!(win.target_indices, vec![19, 23, 27, 31, 35, 39, 43, 47]);
        assert_eq!(win.context.shape()[0], 16);
        assert_eq!(frame_index(&win.context.index_outer(15), 100), 15);
        for (clip, &idx) in win.targets.iter().zip(&win.target_indices) {
            assert_eq!(frame_index(clip, 100), idx);
        }
    }

    #[test]
    fn minimal_spec() {
        let spec = SampleSpec {
            context_len: 1,
            num_targets: 2,
            rate: 1,
            target_len: 1,
            num_negatives: 1,
        };
        let win = sample_at(&counting_video(10, "a"), &spec, 0).unwrap();
        assert_eq!(win.target_indices, vec![1, 2]);
        assert_eq!(win.context.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn minimum_length_forces_zero_seek() {
        let spec = SampleSpec::default();
        let v = counting_video(spec.min_frames(), "a");
        let mut r = rng::stream(1, "t", 0);
        for _ in 0..200 {
            assert_eq!(seek_and_sample(&v, &spec, &mut r).unwrap().t, 0);
        }
        let short = counting_video(spec.min_frames() - 1, "a");
        match seek_and_sample(&short, &spec, &mut r) {
            Err(Error::VideoTooShort { required, .. }) => assert_eq!(required, 49),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negatives_forced_and_vacuous_exclusion() {
        let videos = vec![counting_video(10, "A"), counting_video(10, "B")];
        let spec = SampleSpec::default();
        let mut r = rng::stream(2, "t", 0);
        let neg = sample_negatives(&videos, "A", &spec, &mut r).unwrap();
        assert!(neg.source_videos.iter().all(|&v| v == 1));
        assert_eq!(neg.frames.len(), 8);

        let neg = sample_negatives(&videos, "Z", &spec, &mut r).unwrap();
        assert_eq!(neg.frames.len(), 8);

        let one = vec![counting_video(10, "A")];
        assert!(matches!(
            sample_negatives(&one, "A", &spec, &mut r),
            Err(Error::NoNegativeSource)
        ));
    }

    #[test]
    fn rotation_examples() {
        let f = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rotate_frame(&f, 0).unwrap(), f);
        assert_eq!(rotate_frame(&f, 1).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        let mut cur = f.clone();
        for _ in 0..4 {
            cur = rotate_frame(&cur, 1).unwrap();
        }
        assert_eq!(cur, f);
        let rect = Tensor::<f32>::zeros(&[1, 2, 3]);
        assert!(rotate_frame(&rect, 1).is_err());
        assert_eq!(rotate_frame(&rect, 2).unwrap().shape(), &[1, 2, 3]);
    }

    #[test]
    fn identity_augmentation_and_flip_involution() {
        let ctx = Tensor::new(vec![2, 1, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let spec = AugmentationSpec {
            hflip_prob: 0.0,
            crop: (2, 3),
            ..Default::default()
        };
        let mut r = rng::stream(3, "t", 0);
        let (c, t, rec) = augment(&ctx, std::slice::from_ref(&ctx), &spec, &mut r).unwrap();
        assert!(!rec.flip);
        assert_eq!(c, ctx);
        assert_eq!(t[0], ctx);
        assert_eq!(hflip(&hflip(&ctx)), ctx);
        assert_ne!(hflip(&ctx), ctx);

        let too_big = AugmentationSpec {
            crop: (3, 3),
            ..Default::default()
        };
        assert!(augment(&ctx, &[], &too_big, &mut r).is_err());
    }
}
