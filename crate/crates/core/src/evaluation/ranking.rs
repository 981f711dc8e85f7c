use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{kendall_tau, pairwise_ranking_accuracy};
use crate::encoders::{EncoderParams, SkipClipNet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::objectives::score;
use crate::rng;
use crate::sampling::{seek_and_sample, AugmentRecord, SampleSpec};
use crate::videoio::{centroid, Video, SPRITE_FLOOR};

/// Anything that maps a context clip and a target frame to aligned grids.
pub trait RankingEncoder: Sync {
    /// Spatial size the encoder expects; frames are center-cropped to it.
    fn frame_size(&self) -> (usize, usize);
    /// `(K, C, h, w)` → `(C', H, W)`.
    fn context_grid(&self, context: &Tensor<f32>) -> Result<Tensor<f32>>;
    /// `(C, h, w)` → `(C', H, W)`.
    fn target_grid(&self, frame: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub net: SkipClipNet,
    pub params: EncoderParams<f32>,
}

impl TrainedModel {
    pub fn new(net: SkipClipNet, params: EncoderParams<f32>) -> Result<Self> {
        params.check_against(&net.config)?;
        Ok(TrainedModel { net, params })
    }
}

impl RankingEncoder for TrainedModel {
    fn frame_size(&self) -> (usize, usize) {
        self.net.config.frame_size
    }

    fn context_grid(&self, context: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net.context_grid(&self.params, context)
    }

    fn target_grid(&self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net.target_grid(&self.params, frame)
    }
}

/// A hand-built encoder that reads the sprite position directly.
///
/// Both encoders emit a `(4, 1, 1)` grid
/// `(cos ax, sin ax, cos ay, sin ay)` of the sprite centroid; the context
/// uses its last frame. The score is then `(cos aΔx + cos aΔy) / 2`, which
/// falls as the target moves further from the end of the context as long
/// as `a·|Δ| < π`.
#[derive(Clone, Debug)]
pub struct CentroidOracle {
    pub frame_size: (usize, usize),
    /// Pixels at or below this value are treated as background.
    pub floor: f32,
}

impl CentroidOracle {
    pub fn new(frame_size: (usize, usize)) -> Self {
        CentroidOracle {
            frame_size,
            floor: SPRITE_FLOOR,
        }
    }

    fn features(&self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        let a = std::f64::consts::PI / (2 * self.frame_size.0.max(self.frame_size.1)) as f64;
        let (y, x) = centroid(frame, self.floor)
            .ok_or_else(|| Error::InvalidArgument("no sprite visible in frame".into()))?;
        let v = [(a * x).cos(), (a * x).sin(), (a * y).cos(), (a * y).sin()];
        Tensor::new(vec![4, 1, 1], v.iter().map(|&f| f as f32).collect())
    }
}

impl RankingEncoder for CentroidOracle {
    fn frame_size(&self) -> (usize, usize) {
        self.frame_size
    }

    fn context_grid(&self, context: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.features(&context.index_outer(context.shape()[0] - 1))
    }

    fn target_grid(&self, frame: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.features(frame)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedExample {
    pub index: usize,
    pub video_id: String,
    pub seek_index: usize,
    /// Target scores, nearest future first.
    pub scores: Vec<f64>,
    pub pairwise_accuracy: f64,
    pub kendall_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub pairwise_accuracy: f64,
    pub kendall_tau: f64,
    pub num_examples: usize,
    pub seed: u64,
    pub examples: Vec<RankedExample>,
}

/// Scores `n_examples` held-out windows with a center crop and no other
/// augmentation. Example `i` picks its video and seek from its own stream,
/// so the report does not depend on the thread count.
pub fn evaluate_ranking(
    encoder: &dyn RankingEncoder,
    videos: &[Video],
    spec: &SampleSpec,
    n_examples: usize,
    seed: u64,
) -> Result<RankingReport> {
    spec.validate()?;
    if videos.is_empty() {
        return Err(Error::InvalidArgument("held-out split is empty".into()));
    }
    if n_examples == 0 {
        return Err(Error::InvalidArgument("n_examples must be positive".into()));
    }
    let examples: Vec<RankedExample> = (0..n_examples)
        .into_par_iter()
        .map(|i| rank_one(encoder, videos, spec, seed, i))
        .collect::<Result<_>>()?;
    let n = examples.len() as f64;
    let pairwise_accuracy = examples.iter().map(|e| e.pairwise_accuracy).sum::<f64>() / n;
    let kendall_tau = examples.iter().map(|e| e.kendall_tau).sum::<f64>() / n;
    Ok(RankingReport {
        pairwise_accuracy,
        kendall_tau,
        num_examples: examples.len(),
        seed,
        examples,
    })
}

fn rank_one(
    encoder: &dyn RankingEncoder,
    videos: &[Video],
    spec: &SampleSpec,
    seed: u64,
    index: usize,
) -> Result<RankedExample> {
    let mut r = rng::stream(seed, "eval-rank", index as u64);
    let video = &videos[r.gen_range(0..videos.len())];
    let win = seek_and_sample(video, spec, &mut r)?;
    let [_, h, w] = video.frame_shape();
    let record = AugmentRecord::center((h, w), encoder.frame_size())?;
    let hgrid = encoder.context_grid(&record.apply(&win.context))?;
    let scores = win
        .targets
        .iter()
        .map(|t| {
            let z = encoder.target_grid(&record.apply(t).index_outer(0))?;
            Ok(score(&hgrid, &z)?.0 as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(RankedExample {
        index,
        video_id: video.id.clone(),
        seek_index: win.t,
        pairwise_accuracy: pairwise_ranking_accuracy(&scores)?,
        kendall_tau: kendall_tau(&scores)?,
        scores,
    })
}
