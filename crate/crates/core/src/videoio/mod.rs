//! Videos, their on-disk form, and the synthetic corpus.

mod manifest;
mod synthetic;

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::skt;
use crate::numerics::Tensor;

pub use manifest::{read_manifest, write_manifest, DatasetManifest, ManifestEntry, Split};
pub use synthetic::{
    centroid, generate_synthetic_dataset, motion_of_class, render_video, GeneratedCorpus, Motion,
    SyntheticSpec, NUM_DIRECTIONS, SPRITE_FLOOR,
};

/// A clip of `N` frames stored as an `(N, C, H, W)` tensor with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Tensor<f32>,
    pub id: String,
    pub motion_class: Option<usize>,
}

impl Video {
    pub fn new(frames: Tensor<f32>, id: impl Into<String>, motion_class: Option<usize>) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::shape(
                "video rank",
                format!("expected (N, C, H, W), got {:?}", frames.shape()),
            ));
        }
        if let Some(v) = frames.data().iter().find(|v| !(-1e-6..=1.0 + 1e-6).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "frame value {v} outside [0, 1]"
            )));
        }
        Ok(Video {
            frames,
            id: id.into(),
            motion_class,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// `(C, H, W)` of every frame.
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }

    pub fn frame(&self, i: usize) -> Tensor<f32> {
        self.frames.index_outer(i)
    }

    /// Frames `[start, start + len)` as an `(len, C, H, W)` tensor.
    pub fn clip(&self, start: usize, len: usize) -> Tensor<f32> {
        let [c, h, w] = self.frame_shape();
        let per = c * h * w;
        let data = self.frames.data()[start * per..(start + len) * per].to_vec();
        Tensor::new(vec![len, c, h, w], data).expect("clip within bounds")
    }

    /// The same video played backwards.
    pub fn reversed(&self) -> Video {
        let n = self.num_frames();
        let frames: Vec<Tensor<f32>> = (0..n).rev().map(|i| self.frame(i)).collect();
        Video {
            frames: Tensor::stack(&frames).expect("uniform frames"),
            id: self.id.clone(),
            motion_class: self.motion_class,
        }
    }
}

pub fn save_video(video: &Video, path: &Path) -> Result<()> {
    skt::write_tensor(&video.frames, path)
}

/// Loads an SKT1 file holding an `(N, C, H, W)` tensor. The id is the file stem.
pub fn load_video(path: &Path) -> Result<Video> {
    let frames = skt::read_tensor(path)?;
    if frames.rank() != 4 {
        return Err(Error::Rank {
            path: path.to_path_buf(),
            expected: 4,
            found: frames.rank(),
        });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Video {
        frames,
        id,
        motion_class: None,
    })
}

/// Videos of one split, loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub videos: Vec<Video>,
}

impl Dataset {
    /// Loads and validates every entry of the manifest at `path`.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = read_manifest(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        manifest.validate(base)?;
        let videos = manifest
            .entries
            .iter()
            .map(|e| {
                let mut v = load_video(&base.join(&e.path))?;
                v.motion_class = e.motion_class;
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            split: manifest.split,
            videos,
        })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn labels_complete(&self) -> bool {
        self.videos.iter().all(|v| v.motion_class.is_some())
    }
}
