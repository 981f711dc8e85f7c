//! Supervised transfer: a linear softmax head on the globally pooled
//! context grid, trained either alone (probe) or together with the context
//! encoder (full), and tested by sliding-window inference.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ranking::TrainedModel;
use crate::config::RunConfig;
use crate::encoders::{group_of, EncoderParams, ParamGroup, SkipClipNet};
use crate::error::{Error, Result};
use crate::numerics::kernels::{global_mean_pool, softmax};
use crate::numerics::{Tape, Tensor};
use crate::rng;
use crate::sampling::{AugmentRecord, AugmentationSpec};
use crate::training::{adam_step, lr_at_epoch, AdamState, Schedule, WeightDecayMode};
use crate::videoio::Video;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Frozen encoder, head only.
    Probe,
    /// Context encoder and head.
    Full,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" => Ok(FinetuneMode::Probe),
            "full" => Ok(FinetuneMode::Full),
            other => Err(Error::InvalidArgument(format!(
                "mode must be `probe` or `full`, got `{other}`"
            ))),
        }
    }
}

/// Class probabilities for one window of frames.
pub trait WindowClassifier: Sync {
    fn frame_size(&self) -> (usize, usize);
    /// `(window, C, h, w)` already cropped → probabilities over classes.
    fn window_probs(&self, clip: &Tensor<f32>) -> Result<Vec<f64>>;
}

impl WindowClassifier for TrainedModel {
    fn frame_size(&self) -> (usize, usize) {
        self.net.config.frame_size
    }

    fn window_probs(&self, clip: &Tensor<f32>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.net.bind(&mut tape, &self.params)?;
        let h = self.net.encode_context(&mut tape, &p, clip)?;
        let logits = self.net.classify(&mut tape, &p, h)?;
        let l: Vec<f64> = tape.value(logits).data().iter().map(|&v| v as f64).collect();
        Ok(softmax(&l))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
    pub windows: usize,
}

/// Mean of per-window probability vectors and its argmax (lowest index on ties).
pub fn average_probabilities(per_window: &[Vec<f64>]) -> Result<Prediction> {
    let first = per_window
        .first()
        .ok_or_else(|| Error::InvalidArgument("no windows to average".into()))?;
    let k = first.len();
    let mut avg = vec![0.0; k];
    for p in per_window {
        if p.len() != k {
            return Err(Error::shape("classes", "windows disagree on class count"));
        }
        for (a, &v) in avg.iter_mut().zip(p) {
            *a += v;
        }
    }
    let n = per_window.len() as f64;
    for a in &mut avg {
        *a /= n;
    }
    let mut class = 0;
    for (i, &v) in avg.iter().enumerate() {
        if v > avg[class] {
            class = i;
        }
    }
    Ok(Prediction {
        class,
        probabilities: avg,
        windows: per_window.len(),
    })
}

/// Averages the softmax over the `floor(N / window)` non-overlapping,
/// center-cropped windows of a video; trailing frames are ignored.
pub fn sliding_window_predict(
    model: &dyn WindowClassifier,
    video: &Video,
    window: usize,
) -> Result<Prediction> {
    let n = video.num_frames();
    if window == 0 || n < window {
        return Err(Error::VideoTooShort { n, required: window.max(1) });
    }
    let [_, h, w] = video.frame_shape();
    let record = AugmentRecord::center((h, w), model.frame_size())?;
    let probs = (0..n / window)
        .map(|k| model.window_probs(&record.apply(&video.clip(k * window, window))))
        .collect::<Result<Vec<_>>>()?;
    average_probabilities(&probs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: FinetuneMode,
    /// `checkpoint` or `random`.
    pub initialization: String,
    pub seed: u64,
    pub epochs: usize,
    pub top1_accuracy: f64,
    /// Classes present in the test split, ascending.
    pub per_class: Vec<ClassAccuracy>,
    pub num_test_videos: usize,
    /// Mean training cross-entropy over the last epoch.
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOptions {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub window: usize,
    pub schedule: Schedule,
    pub weight_decay_mode: WeightDecayMode,
    pub seed: u64,
    pub initialization: String,
}

impl FinetuneOptions {
    pub fn from_config(cfg: &RunConfig, mode: FinetuneMode, initialization: &str) -> Self {
        FinetuneOptions {
            mode,
            epochs: cfg.optim.finetune_epochs,
            batch_size: cfg.optim.finetune_batch_size,
            window: cfg.run.clip_window,
            schedule: cfg.optim.finetune.clone(),
            weight_decay_mode: cfg.optim.weight_decay_mode,
            seed: cfg.run.seed,
            initialization: initialization.into(),
        }
    }
}

fn labels_of(videos: &[Video], split: &str) -> Result<Vec<usize>> {
    videos
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.motion_class.ok_or_else(|| Error::Schema {
                field: format!("{split}.entries[{i}].motion_class"),
                detail: "labeled split required".into(),
            })
        })
        .collect()
}

/// Fresh classifier head drawn from the fine-tuning seed, so runs that start
/// from different encoders share the same head initialization.
fn reset_head(params: &mut EncoderParams<f32>, seed: u64) {
    let mut r = rng::stream(seed, "finetune-head", 0);
    let w = params.names.iter().position(|n| n == "cls.weight").expect("cls.weight");
    let a = (1.0 / params.tensors[w].shape()[1] as f64).sqrt();
    for name in ["cls.weight", "cls.bias"] {
        let i = params.names.iter().position(|n| n == name).expect("cls param");
        for v in params.tensors[i].data_mut() {
            *v = r.gen_range(-a..a) as f32;
        }
    }
}

struct StepResult {
    loss: f64,
    grads: Vec<Option<Tensor<f32>>>,
}

/// Per-feature mean and standard deviation of the pooled context grid.
///
/// A frozen encoder's pooled features can be tiny (order 1e-2), far below
/// what the head can compensate for within a fine-tuning schedule, so the
/// probe trains on standardized features and folds the scaling back into the
/// head afterwards.
struct FeatureScale {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl FeatureScale {
    fn fit(net: &SkipClipNet, params: &EncoderParams<f32>, videos: &[Video], window: usize) -> Result<Self> {
        let feats: Vec<Vec<f32>> = videos
            .par_iter()
            .map(|v| {
                let n = v.num_frames();
                if n < window {
                    return Err(Error::VideoTooShort { n, required: window });
                }
                let [_, h, w] = v.frame_shape();
                let record = AugmentRecord::center((h, w), net.config.frame_size)?;
                (0..n / window)
                    .map(|k| pooled(net, params, &record.apply(&v.clip(k * window, window))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .map(|t| t.into_data())
            .collect();
        let dim = feats[0].len();
        let count = feats.len() as f64;
        let mut mean = vec![0f64; dim];
        for f in &feats {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0f64; dim];
        for f in &feats {
            for ((s, &v), &m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        // dead features (zero variance) pass through unscaled
        let inv_std = var
            .iter()
            .map(|&s| {
                let sd = (s / count).sqrt();
                if sd > 1e-8 {
                    (1.0 / sd) as f32
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureScale {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            inv_std,
        })
    }

    fn apply(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let data = x
            .data()
            .iter()
            .zip(self.mean.iter().zip(&self.inv_std))
            .map(|(&v, (&m, &s))| (v - m) * s)
            .collect();
        Tensor::from_vec(data)
    }

    /// Rewrites a head trained on standardized inputs to act on raw features:
    /// `W' = W·diag(s)`, `b' = b − W'·μ`.
    fn fold_into(&self, params: &mut EncoderParams<f32>, head: (usize, usize)) {
        let dim = self.mean.len();
        let classes = params.tensors[head.1].numel();
        let mut shift = vec![0f32; classes];
        {
            let w = params.tensors[head.0].data_mut();
            for k in 0..classes {
                for j in 0..dim {
                    w[k * dim + j] *= self.inv_std[j];
                    shift[k] += w[k * dim + j] * self.mean[j];
                }
            }
        }
        let b = params.tensors[head.1].data_mut();
        for k in 0..classes {
            b[k] -= shift[k];
        }
    }
}

fn pooled(net: &SkipClipNet, params: &EncoderParams<f32>, clip: &Tensor<f32>) -> Result<Tensor<f32>> {
    global_mean_pool(&net.context_grid(params, clip)?)
}

fn probe_step(
    net: &SkipClipNet,
    params: &EncoderParams<f32>,
    scale: &FeatureScale,
    clip: &Tensor<f32>,
    label: usize,
    head: (usize, usize),
) -> Result<StepResult> {
    let feat = scale.apply(&pooled(net, params, clip)?);
    let mut tape = Tape::new();
    let x = tape.constant(feat);
    let w = tape.leaf(params.tensors[head.0].clone());
    let b = tape.leaf(params.tensors[head.1].clone());
    let logits = tape.affine(x, w, b)?;
    let loss = tape.softmax_cross_entropy(logits, label)?;
    let mut g = tape.backward(loss)?;
    let mut grads = vec![None; params.len()];
    grads[head.0] = g.take(w);
    grads[head.1] = g.take(b);
    Ok(StepResult {
        loss: tape.value(loss).item() as f64,
        grads,
    })
}

fn full_step(net: &SkipClipNet, params: &EncoderParams<f32>, clip: &Tensor<f32>, label: usize) -> Result<StepResult> {
    let mut tape = Tape::new();
    let p = net.bind(&mut tape, params)?;
    let h = net.encode_context(&mut tape, &p, clip)?;
    let logits = net.classify(&mut tape, &p, h)?;
    let loss = tape.softmax_cross_entropy(logits, label)?;
    let mut g = tape.backward(loss)?;
    let grads = p
        .vars
        .iter()
        .zip(&params.names)
        .map(|(&v, n)| match group_of(n) {
            ParamGroup::Context | ParamGroup::ClassifierHead => g.take(v),
            _ => None,
        })
        .collect();
    Ok(StepResult {
        loss: tape.value(loss).item() as f64,
        grads,
    })
}

/// Trains the head (and in full mode the context encoder) on `train`, then
/// reports sliding-window accuracy on `test`. Each training example is a
/// random `window`-frame clip with a random crop and no flip, since a mirror
/// would change the motion class.
pub fn finetune(
    net: &SkipClipNet,
    init: &EncoderParams<f32>,
    train: &[Video],
    test: &[Video],
    opts: &FinetuneOptions,
) -> Result<(ProbeReport, EncoderParams<f32>)> {
    init.check_against(&net.config)?;
    opts.schedule.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::Config("finetune batch size must be positive".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs non-empty train and test splits".into()));
    }
    let train_labels = labels_of(train, "train")?;
    let test_labels = labels_of(test, "test")?;
    let classes = net.config.num_classes;
    if let Some(&bad) = train_labels.iter().chain(&test_labels).find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!(
            "motion class {bad} out of range for {classes} classes"
        )));
    }

    let mut params = init.clone();
    reset_head(&mut params, opts.seed);
    let mut adam = AdamState::new(&params.tensors);
    let head = (
        params.names.iter().position(|n| n == "cls.weight").expect("cls.weight"),
        params.names.iter().position(|n| n == "cls.bias").expect("cls.bias"),
    );
    let crop_spec = AugmentationSpec {
        reverse_prob: 0.0,
        hflip_prob: 0.0,
        crop: net.config.frame_size,
        rotation_enabled: false,
    };
    let scale = match opts.mode {
        FinetuneMode::Probe => Some(FeatureScale::fit(net, &params, train, opts.window)?),
        FinetuneMode::Full => None,
    };
    let mut final_loss = 0.0;

    for epoch in 0..opts.epochs {
        let lr = lr_at_epoch(&opts.schedule, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(opts.seed, "finetune-epoch", epoch as u64));
        let base = (epoch * train.len()) as u64;
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let results: Vec<Result<StepResult>> = chunk
                .par_iter()
                .enumerate()
                .map(|(i, &vid)| {
                    let video = &train[vid];
                    let mut r = rng::stream(opts.seed, "finetune", base + (b * opts.batch_size + i) as u64);
                    let n = video.num_frames();
                    if n < opts.window {
                        return Err(Error::VideoTooShort { n, required: opts.window });
                    }
                    let start = r.gen_range(0..=n - opts.window);
                    let [_, h, w] = video.frame_shape();
                    let record = AugmentRecord::draw((h, w), &crop_spec, &mut r)?;
                    let clip = record.apply(&video.clip(start, opts.window));
                    match &scale {
                        Some(sc) => probe_step(net, &params, sc, &clip, train_labels[vid], head),
                        None => full_step(net, &params, &clip, train_labels[vid]),
                    }
                })
                .collect();
            let mut acc: Vec<Option<Tensor<f32>>> = vec![None; params.len()];
            for r in results {
                let s = r?;
                if !s.loss.is_finite() {
                    return Err(Error::NonFinite(format!("fine-tuning loss at epoch {epoch}")));
                }
                epoch_loss += s.loss;
                for (slot, g) in acc.iter_mut().zip(s.grads) {
                    match (slot.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
            }
            let n = chunk.len() as f32;
            for g in acc.iter_mut().flatten() {
                for v in g.data_mut() {
                    *v /= n;
                }
            }
            adam_step(
                &params.names,
                &mut params.tensors,
                &acc,
                &mut adam,
                lr,
                opts.schedule.weight_decay,
                opts.weight_decay_mode,
            )?;
        }
        final_loss = epoch_loss / train.len() as f64;
    }

    if let Some(sc) = &scale {
        sc.fold_into(&mut params, head);
    }
    let model = TrainedModel::new(net.clone(), params)?;
    let predictions: Vec<usize> = test
        .par_iter()
        .map(|v| sliding_window_predict(&model, v, opts.window).map(|p| p.class))
        .collect::<Result<_>>()?;
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(&test_labels) {
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let per_class = (0..classes)
        .filter(|&c| total[c] > 0)
        .map(|c| ClassAccuracy {
            class: c,
            correct: correct[c],
            total: total[c],
            accuracy: correct[c] as f64 / total[c] as f64,
        })
        .collect();
    let report = ProbeReport {
        mode: opts.mode,
        initialization: opts.initialization.clone(),
        seed: opts.seed,
        epochs: opts.epochs,
        top1_accuracy: correct.iter().sum::<usize>() as f64 / test.len() as f64,
        per_class,
        num_test_videos: test.len(),
        final_train_loss: final_loss,
    };
    Ok((report, model.params))
}
