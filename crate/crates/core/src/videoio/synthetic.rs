//! Deterministic moving-sprite corpus.
//!
//! Each video shows one bright square sprite gliding in a straight line over
//! a dark, vertically shaded texture. The motion class encodes
//! (direction, speed): `class = speed_bucket * 8 + direction`, with direction
//! `d` pointing at angle `d * 45°` (counter-clockwise from +x, image y down).
//! Sprites are rendered with exact area coverage, so the intensity-weighted
//! centroid moves by the class velocity each frame.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use crate::videoio::manifest::{write_manifest, DatasetManifest, ManifestEntry, Split};
use crate::videoio::{save_video, Video};

pub const NUM_DIRECTIONS: usize = 8;

const TEXTURE_CELL: usize = 4;
const SPRITE_VALUE: f32 = 1.0;

/// Background pixels never exceed 0.28; anything brighter than this is sprite.
pub const SPRITE_FLOOR: f32 = 0.45;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub num_test_videos: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_motion_classes: usize,
    pub sprite_size: usize,
    /// Slowest and fastest speed bucket, in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_videos: 160,
            num_test_videos: 64,
            frames_per_video: 56,
            height: 36,
            width: 36,
            channels: 1,
            num_motion_classes: 16,
            sprite_size: 5,
            speed_min: 0.25,
            speed_max: 0.5,
            seed: 0,
        }
    }
}

/// Per-frame displacement of one motion class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub direction: usize,
    pub speed: f64,
    /// Column displacement per frame.
    pub dx: f64,
    /// Row displacement per frame.
    pub dy: f64,
}

pub fn motion_of_class(spec: &SyntheticSpec, class: usize) -> Motion {
    let buckets = spec.num_motion_classes / NUM_DIRECTIONS;
    let direction = class % NUM_DIRECTIONS;
    let bucket = class / NUM_DIRECTIONS;
    let speed = if buckets <= 1 {
        spec.speed_min
    } else {
        spec.speed_min + (spec.speed_max - spec.speed_min) * bucket as f64 / (buckets - 1) as f64
    };
    let angle = direction as f64 * std::f64::consts::FRAC_PI_4;
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    Motion {
        direction,
        speed,
        dx: snap(speed * angle.cos()),
        dy: snap(-speed * angle.sin()),
    }
}

impl SyntheticSpec {
    /// `min_frames` is the shortest video the configured sampler accepts.
    pub fn validate(&self, min_frames: usize) -> Result<()> {
        if self.frames_per_video < min_frames {
            return Err(Error::Config(format!(
                "frames_per_video = {} is too short for the sampler; minimum N is {min_frames}",
                self.frames_per_video
            )));
        }
        if self.num_videos == 0 || self.channels == 0 || self.sprite_size == 0 {
            return Err(Error::Config(
                "num_videos, channels and sprite_size must be positive".into(),
            ));
        }
        if self.num_motion_classes == 0 || self.num_motion_classes % NUM_DIRECTIONS != 0 {
            return Err(Error::Config(format!(
                "num_motion_classes must be a positive multiple of {NUM_DIRECTIONS}, got {}",
                self.num_motion_classes
            )));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return Err(Error::Config("need 0 < speed_min <= speed_max".into()));
        }
        let travel = self.speed_max * (self.frames_per_video - 1) as f64;
        let needed = (travel + self.sprite_size as f64).ceil() as usize;
        if self.height < needed || self.width < needed {
            return Err(Error::Config(format!(
                "frames of {}x{} cannot hold a bounce-free trajectory; need at least {needed}x{needed}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn coverage(cell: usize, start: f64, len: f64) -> f64 {
    let lo = (cell as f64).max(start);
    let hi = ((cell + 1) as f64).min(start + len);
    (hi - lo).max(0.0)
}

/// Renders video `index` of a split. Pure in `(spec, split, index)`.
pub fn render_video(spec: &SyntheticSpec, split: Split, index: usize) -> Result<Video> {
    let class = index % spec.num_motion_classes;
    let motion = motion_of_class(spec, class);
    let label = match split {
        Split::Train => "video-train",
        Split::Test => "video-test",
    };
    let mut rng = rng::stream(spec.seed, label, index as u64);
    let (n, c, h, w) = (
        spec.frames_per_video,
        spec.channels,
        spec.height,
        spec.width,
    );
    let s = spec.sprite_size as f64;
    let span = (n - 1) as f64;

    // Start positions whose whole trajectory stays inside the frame.
    let axis_start = |rng: &mut rng::Rng, extent: usize, step: f64| {
        let lo = (-step * span).max(0.0);
        let hi = extent as f64 - s - (step * span).max(0.0);
        lo + (hi - lo) * rng.gen::<f64>()
    };
    let x0 = axis_start(&mut rng, w, motion.dx);
    let y0 = axis_start(&mut rng, h, motion.dy);

    let cells_y = h.div_ceil(TEXTURE_CELL);
    let cells_x = w.div_ceil(TEXTURE_CELL);
    let coarse: Vec<f64> = (0..cells_y * cells_x).map(|_| rng.gen()).collect();
    let mut background = vec![0f64; h * w];
    for r in 0..h {
        for col in 0..w {
            let shade = 0.05 + 0.12 * r as f64 / (h.max(2) - 1) as f64;
            let tex = 0.08 * coarse[(r / TEXTURE_CELL) * cells_x + col / TEXTURE_CELL];
            let fine = 0.03 * rng.gen::<f64>();
            background[r * w + col] = shade + tex + fine;
        }
    }

    let mut data = Vec::with_capacity(n * c * h * w);
    for t in 0..n {
        let x = x0 + motion.dx * t as f64;
        let y = y0 + motion.dy * t as f64;
        let cov_x: Vec<f64> = (0..w).map(|col| coverage(col, x, s)).collect();
        let cov_y: Vec<f64> = (0..h).map(|r| coverage(r, y, s)).collect();
        for ch in 0..c {
            let tint = 1.0 - 0.2 * ch as f64 / c as f64;
            for r in 0..h {
                for col in 0..w {
                    let cov = cov_x[col] * cov_y[r];
                    let bg = background[r * w + col] * tint;
                    let v = bg * (1.0 - cov) + SPRITE_VALUE as f64 * cov;
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    let frames = Tensor::new(vec![n, c, h, w], data)?;
    Video::new(frames, format!("{}_{index:04}", split.as_str()), Some(class))
}

/// Intensity-weighted centroid `(row, col)` of the bright sprite in channel 0
/// of a `(C, H, W)` frame. Pixels at or below `floor` are ignored.
pub fn centroid(frame: &Tensor<f32>, floor: f32) -> Option<(f64, f64)> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut total = 0.0;
    let mut sr = 0.0;
    let mut sc = 0.0;
    for r in 0..h {
        for col in 0..w {
            let v = (frame.data()[r * w + col] - floor).max(0.0) as f64;
            total += v;
            sr += v * (r as f64 + 0.5);
            sc += v * (col as f64 + 0.5);
        }
    }
    (total > 0.0).then(|| (sr / total, sc / total))
}

/// Train and test manifests of a generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

/// Writes `train/`, `test/`, `train.json` and `test.json` under `out_dir`.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    min_frames: usize,
    out_dir: &Path,
) -> Result<GeneratedCorpus> {
    spec.validate(min_frames)?;
    let mut manifests = Vec::new();
    for (split, count) in [(Split::Train, spec.num_videos), (Split::Test, spec.num_test_videos)] {
        let dir = out_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let video = render_video(spec, split, i)?;
            let rel = format!("{}/{}.skt", split.as_str(), video.id);
            save_video(&video, &out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                n: spec.frames_per_video,
                c: spec.channels,
                h: spec.height,
                w: spec.width,
                motion_class: video.motion_class,
            });
        }
        let manifest = DatasetManifest {
            split,
            seed: spec.seed,
            entries,
        };
        write_manifest(&manifest, &out_dir.join(format!("{}.json", split.as_str())))?;
        manifests.push(manifest);
    }
    let test = manifests.pop().unwrap();
    let train = manifests.pop().unwrap();
    Ok(GeneratedCorpus { train, test })
}
