//! Optimization: step schedules, Adam, checkpoints, and the pre-training loop.

mod adam;
mod checkpoint;
mod schedule;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::{init_params, EncoderParams, SkipClipNet};
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_check, FdOptions, FdReport, Probe, Real, Tape, Tensor};
use crate::objectives::{total_loss_on, LossBreakdown, LossConfig};
use crate::rng;
use crate::sampling::{Sampler, TrainingExample};
use crate::videoio::{render_video, Split, Video};

pub use adam::{adam_step, AdamState, WeightDecayMode, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use schedule::{lr_at_epoch, Schedule};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_total: f64,
    pub loss_rank: f64,
    pub loss_contrastive: f64,
    pub loss_rotation: f64,
    pub mean_target_score: f64,
    pub mean_negative_score: f64,
}

/// Loss breakdown, per-parameter gradients (`None` where the parameter did
/// not take part), and the branch signature of one example's objective.
pub struct ExampleGradients<T> {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Option<Tensor<T>>>,
    pub signature: u64,
}

/// Forward and backward pass of the full objective on one example.
pub fn example_gradients<T: Real>(
    net: &SkipClipNet,
    params: &EncoderParams<T>,
    example: &TrainingExample,
    loss: &LossConfig,
    want_grads: bool,
) -> Result<ExampleGradients<T>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, params)?;
    let (root, breakdown) = total_loss_on(&mut tape, net, &bound, example, loss)?;
    let signature = tape.branch_signature();
    let grads = if want_grads {
        let mut g = tape.backward(root)?;
        bound.vars.iter().map(|&v| g.take(v)).collect()
    } else {
        Vec::new()
    };
    Ok(ExampleGradients {
        breakdown,
        grads,
        signature,
    })
}

/// Receives progress from [`pretrain`].
pub trait PretrainObserver {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }
    /// Called after every `checkpoint_every` epochs and after the last epoch.
    fn on_checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl PretrainObserver for () {}

/// Collects metrics in memory.
#[derive(Default)]
pub struct MetricsRecorder {
    pub steps: Vec<StepMetrics>,
}

impl PretrainObserver for MetricsRecorder {
    fn on_step(&mut self, metrics: &StepMetrics) -> Result<()> {
        self.steps.push(metrics.clone());
        Ok(())
    }
}

pub fn thread_pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    let threads = if cfg.run.deterministic { 1 } else { cfg.run.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// A fresh checkpoint at epoch 0 with parameters drawn from the run seed.
pub fn initial_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let params = init_params(&cfg.encoder, cfg.run.seed)?;
    Ok(Checkpoint {
        adam: AdamState::new(&params.tensors),
        params,
        epoch: 0,
        rng: RngState {
            seed: cfg.run.seed,
            step: 0,
        },
        fingerprint: cfg.encoder.fingerprint(),
    })
}

/// Runs pre-training from `start` (or a fresh initialization) until
/// `until_epoch` epochs are complete.
///
/// Each epoch visits the training videos in a seeded permutation. Example
/// `i` of epoch `e` draws from its own stream keyed by `e * num_videos + i`,
/// and per-example gradients are reduced in batch order, so results do not
/// depend on the thread count.
pub fn pretrain(
    cfg: &RunConfig,
    videos: &[Video],
    start: Option<Checkpoint>,
    until_epoch: usize,
    observer: &mut dyn PretrainObserver,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if videos.len() < 2 {
        return Err(Error::NoNegativeSource);
    }
    let net = SkipClipNet::new(cfg.encoder.clone())?;
    let fingerprint = cfg.encoder.fingerprint();
    let mut ckpt = match start {
        Some(c) => {
            if c.fingerprint != fingerprint {
                return Err(Error::Fingerprint {
                    expected: fingerprint,
                    found: c.fingerprint,
                });
            }
            if c.rng.seed != cfg.run.seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, configuration has {}",
                    c.rng.seed, cfg.run.seed
                )));
            }
            c
        }
        None => initial_checkpoint(cfg)?,
    };
    ckpt.params.check_against(&cfg.encoder)?;
    let pool = thread_pool(cfg)?;
    let sampler = Sampler::new(cfg.sample.clone(), cfg.augment.clone());
    let seed = cfg.run.seed;
    let batch = cfg.optim.batch_size;

    for epoch in ckpt.epoch..until_epoch {
        let lr = lr_at_epoch(&cfg.optim.pretrain, epoch);
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut rng::stream(seed, "epoch", epoch as u64));
        let base = (epoch * videos.len()) as u64;

        for (b, chunk) in order.chunks(batch).enumerate() {
            let params = &ckpt.params;
            let results: Vec<Result<(TrainingExample, ExampleGradients<f32>)>> = pool.install(|| {
                use rayon::prelude::*;
                chunk
                    .par_iter()
                    .enumerate()
                    .map(|(i, &vid)| {
                        let idx = base + (b * batch + i) as u64;
                        let mut r = rng::stream(seed, "sampler", idx);
                        let ex = sampler.example(videos, vid, &mut r)?;
                        let g = example_gradients(&net, params, &ex, &cfg.loss, true)?;
                        Ok((ex, g))
                    })
                    .collect()
            });
            let n = chunk.len() as f32;
            let mut acc: Vec<Option<Tensor<f32>>> = vec![None; ckpt.params.len()];
            let mut sums = [0f64; 6];
            for r in results {
                let (ex, g) = r?;
                let bd = &g.breakdown;
                if !bd.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss on video {} (seek {}, reversed {})",
                        ex.video_id, ex.seek_index, ex.reversed
                    )));
                }
                for (k, v) in [
                    bd.total,
                    bd.rank,
                    bd.contrastive,
                    bd.rotation,
                    bd.mean_target_score,
                    bd.mean_negative_score,
                ]
                .into_iter()
                .enumerate()
                {
                    sums[k] += v;
                }
                for (slot, gi) in acc.iter_mut().zip(g.grads) {
                    match (slot.as_mut(), gi) {
                        (Some(a), Some(gi)) => a.add_assign(&gi),
                        (None, Some(gi)) => *slot = Some(gi),
                        _ => {}
                    }
                }
            }
            for g in acc.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v /= n;
                }
            }
            adam_step(
                &ckpt.params.names,
                &mut ckpt.params.tensors,
                &acc,
                &mut ckpt.adam,
                lr,
                cfg.optim.pretrain.weight_decay,
                cfg.optim.weight_decay_mode,
            )?;
            ckpt.rng.step += 1;
            let nb = chunk.len() as f64;
            observer.on_step(&StepMetrics {
                step: ckpt.rng.step,
                loss_total: sums[0] / nb,
                loss_rank: sums[1] / nb,
                loss_contrastive: sums[2] / nb,
                loss_rotation: sums[3] / nb,
                mean_target_score: sums[4] / nb,
                mean_negative_score: sums[5] / nb,
            })?;
        }
        ckpt.epoch = epoch + 1;
        let every = cfg.optim.checkpoint_every.max(1);
        if ckpt.epoch % every == 0 || ckpt.epoch == until_epoch {
            observer.on_checkpoint(&ckpt)?;
        }
    }
    Ok(ckpt)
}

/// Finite-difference check of the full objective in 64-bit precision on one
/// random instance: parameters, videos, and example all derive from
/// `(cfg.run.seed, instance)`.
pub fn gradcheck_objective(cfg: &RunConfig, instance: u64, opts: &FdOptions) -> Result<FdReport> {
    cfg.validate()?;
    let seed = rng::derive_seed(cfg.run.seed, "gradcheck", instance);
    let mut data = cfg.data.clone();
    data.seed = seed;
    let videos = (0..data.num_videos)
        .map(|i| render_video(&data, Split::Train, i))
        .collect::<Result<Vec<_>>>()?;
    let sampler = Sampler::new(cfg.sample.clone(), cfg.augment.clone());
    let mut r = rng::stream(seed, "example", 0);
    let video_index = rand::Rng::gen_range(&mut r, 0..videos.len());
    let example = sampler.example(&videos, video_index, &mut r)?;
    let net = SkipClipNet::new(cfg.encoder.clone())?;
    let params: EncoderParams<f64> = init_params(&cfg.encoder, seed)?.cast();
    let names = params.names.clone();
    let loss_fn = |tensors: &[Tensor<f64>], want: bool| -> Result<Probe> {
        let p = EncoderParams {
            names: names.clone(),
            tensors: tensors.to_vec(),
        };
        let g = example_gradients(&net, &p, &example, &cfg.loss, want)?;
        let grads = if want {
            g.grads
                .into_iter()
                .zip(tensors)
                .map(|(g, t)| g.unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Probe {
            loss: g.breakdown.total,
            grads,
            signature: g.signature,
        })
    };
    finite_diff_check(loss_fn, &names, &params.tensors, opts)
}
