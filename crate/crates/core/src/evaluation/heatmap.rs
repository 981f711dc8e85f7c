//! Per-cell similarity maps between a context grid and a target grid.

use std::fs;
use std::path::{Path, PathBuf};

use super::ranking::RankingEncoder;
use crate::error::{Error, Result};
use crate::numerics::kernels::cell_cosines;
use crate::numerics::{skt, Real, Tensor};
use crate::sampling::{AugmentRecord, SampleSpec};
use crate::videoio::Video;

/// `grid[m][n] = cos(h[:, m, n], z[:, m, n])` as an `(H, W)` tensor. The
/// sequential mean of its entries is the score of `(h, z)` bit for bit.
pub fn heatmap_grid<T: Real>(h: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let (cos, _) = cell_cosines(h, z)?;
    Tensor::new(vec![h.shape()[1], h.shape()[2]], cos)
}

/// Row-major index of the largest cell; the first one wins ties.
pub fn argmax_cell<T: Real>(grid: &Tensor<T>) -> (usize, usize) {
    let w = grid.shape()[1];
    let d = grid.data();
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

/// Grid cell containing a pixel-space point `(row, col)` of a frame.
pub fn cell_of(point: (f64, f64), frame_hw: (usize, usize), grid_hw: (usize, usize)) -> (usize, usize) {
    let r = (point.0 / frame_hw.0 as f64 * grid_hw.0 as f64).floor() as usize;
    let c = (point.1 / frame_hw.1 as f64 * grid_hw.1 as f64).floor() as usize;
    (r.min(grid_hw.0 - 1), c.min(grid_hw.1 - 1))
}

/// Heatmap of target frame `frame` against the context that precedes it at
/// the sampling skip: the context covers `[frame - (K-1) - r, frame - r]`,
/// so `frame` is the first target of that window.
#[derive(Clone, Debug)]
pub struct FrameHeatmap {
    pub grid: Tensor<f32>,
    pub context_start: usize,
    pub frame: usize,
    /// Cropped target frame `(C, h, w)`.
    pub target: Tensor<f32>,
}

pub fn frame_heatmap(
    encoder: &dyn RankingEncoder,
    video: &Video,
    spec: &SampleSpec,
    frame: usize,
) -> Result<FrameHeatmap> {
    let lead = spec.context_len - 1 + spec.rate;
    if frame < lead || frame >= video.num_frames() {
        return Err(Error::InvalidArgument(format!(
            "frame {frame} needs {lead} preceding frames and must lie inside {} frames",
            video.num_frames()
        )));
    }
    let context_start = frame - lead;
    let [_, h, w] = video.frame_shape();
    let record = AugmentRecord::center((h, w), encoder.frame_size())?;
    let context = record.apply(&video.clip(context_start, spec.context_len));
    let target = record.apply(&video.frame(frame));
    let hg = encoder.context_grid(&context)?;
    let zg = encoder.target_grid(&target)?;
    Ok(FrameHeatmap {
        grid: heatmap_grid(&hg, &zg)?,
        context_start,
        frame,
        target,
    })
}

/// Grayscale P5 image of a grid upsampled by nearest neighbor to `out_hw`;
/// cosine −1 maps to 0 and +1 to 255.
pub fn heatmap_pgm(grid: &Tensor<f32>, out_hw: (usize, usize)) -> Result<Vec<u8>> {
    if grid.rank() != 2 {
        return Err(Error::shape("heatmap", format!("expected (H, W), got {:?}", grid.shape())));
    }
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    let (oh, ow) = out_hw;
    let mut out = format!("P5\n{ow} {oh}\n255\n").into_bytes();
    for r in 0..oh {
        for c in 0..ow {
            let v = grid.data()[(r * gh / oh) * gw + c * gw / ow];
            out.push((((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8);
        }
    }
    Ok(out)
}

/// Writes `<stem>.pgm` and the raw grid as `<stem>.skt` into `dir`.
pub fn export_heatmap(grid: &Tensor<f32>, out_hw: (usize, usize), dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, heatmap_pgm(grid, out_hw)?).map_err(|e| Error::io(&pgm, e))?;
    let raw = dir.join(format!("{stem}.skt"));
    skt::write_tensor(grid, &raw)?;
    Ok((pgm, raw))
}
