//! The cell-cosine score and the three loss terms.
//!
//! Each loss exists twice: a plain function over scores (used for reporting
//! and as the reference in tests) and a tape builder that records the same
//! arithmetic, in the same order, for differentiation.

use serde::{Deserialize, Serialize};

use crate::encoders::{BoundParams, SkipClipNet};
use crate::error::{Error, Result};
use crate::numerics::kernels::{cell_cosines, mean_of, softmax_cross_entropy};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::sampling::TrainingExample;

/// Mean cosine over aligned cells of two `(C, H, W)` grids, plus the number
/// of zero-norm cells (scored as 0).
pub fn score<T: Real>(h: &Tensor<T>, z: &Tensor<T>) -> Result<(T, usize)> {
    let (cos, zero) = cell_cosines(h, z)?;
    Ok((mean_of(&cos), zero))
}

fn hinge<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Sum over pairs `i < j` of `max(0, s_j - s_i + margin)`; `scores` are in
/// temporal order, nearest future first.
pub fn rank_loss<T: Real>(scores: &[T], margin: T) -> Result<T> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "rank loss needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    let mut total = T::zero();
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            total += hinge(-scores[i] + scores[j] + margin);
        }
    }
    Ok(total)
}

/// Sum over targets of `max(0, mean(negatives) - s_i + margin)`.
pub fn contrastive_loss<T: Real>(target_scores: &[T], negative_scores: &[T], margin: T) -> Result<T> {
    if negative_scores.is_empty() {
        return Err(Error::InvalidArgument("contrastive loss needs at least one negative".into()));
    }
    let mean_neg = mean_of(negative_scores);
    let mut total = T::zero();
    for &s in target_scores {
        total += hinge(-s + mean_neg + margin);
    }
    Ok(total)
}

/// Mean softmax cross-entropy of per-target rotation logits.
pub fn rotation_loss<T: Real>(logits: &[Tensor<T>], labels: &[usize]) -> Result<T> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = T::zero();
    for (l, &y) in logits.iter().zip(labels) {
        if y >= 4 {
            return Err(Error::InvalidArgument(format!("rotation label {y} not in 0..4")));
        }
        total += softmax_cross_entropy(l, y)?.0;
    }
    Ok(total / T::from_usize(labels.len()).unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub delta_rank: f64,
    pub delta_neg: f64,
    pub enable_rank: bool,
    pub enable_contrastive: bool,
    pub enable_rotation: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            delta_rank: 0.1,
            delta_neg: 0.1,
            enable_rank: true,
            enable_contrastive: true,
            enable_rotation: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.enable_rank || self.enable_contrastive || self.enable_rotation) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if !(self.delta_rank >= 0.0 && self.delta_neg >= 0.0) {
            return Err(Error::Config("margins must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scores of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet<T = f64> {
    pub target_scores: Vec<T>,
    pub negative_scores: Vec<T>,
}

/// Per-term values of one example's objective. Disabled terms read 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rank: f64,
    pub contrastive: f64,
    pub rotation: f64,
    pub mean_target_score: f64,
    pub mean_negative_score: f64,
    pub zero_norm_cells: usize,
}

pub fn rank_loss_on<T: Real>(tape: &mut Tape<T>, scores: &[Var], margin: T) -> Result<Var> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument("rank loss needs at least 2 scores".into()));
    }
    let mut terms = Vec::with_capacity(scores.len() * (scores.len() - 1) / 2);
    for i in 0..scores.len() {
        for j in i + 1..scores.len() {
            let d = tape.sub(scores[j], scores[i])?;
            let m = tape.add_const(d, margin);
            terms.push(tape.relu(m));
        }
    }
    tape.sum_many(&terms)
}

pub fn contrastive_loss_on<T: Real>(
    tape: &mut Tape<T>,
    target_scores: &[Var],
    negative_scores: &[Var],
    margin: T,
) -> Result<Var> {
    if negative_scores.is_empty() {
        return Err(Error::InvalidArgument("contrastive loss needs at least one negative".into()));
    }
    let neg_sum = tape.sum_many(negative_scores)?;
    let mean_neg = tape.div_const(neg_sum, T::from_usize(negative_scores.len()).unwrap());
    let mut terms = Vec::with_capacity(target_scores.len());
    for &s in target_scores {
        let d = tape.sub(mean_neg, s)?;
        let m = tape.add_const(d, margin);
        terms.push(tape.relu(m));
    }
    tape.sum_many(&terms)
}

pub fn rotation_loss_on<T: Real>(tape: &mut Tape<T>, logits: &[Var], labels: &[usize]) -> Result<Var> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::InvalidArgument("rotation logits and labels disagree".into()));
    }
    let mut terms = Vec::with_capacity(labels.len());
    for (&l, &y) in logits.iter().zip(labels) {
        if y >= 4 {
            return Err(Error::InvalidArgument(format!("rotation label {y} not in 0..4")));
        }
        terms.push(tape.softmax_cross_entropy(l, y)?);
    }
    let sum = tape.sum_many(&terms)?;
    Ok(tape.div_const(sum, T::from_usize(labels.len()).unwrap()))
}

/// Records the full objective of one example: encodings, scores, and the
/// unweighted sum of the enabled terms. Returns the scalar loss node.
pub fn total_loss_on<T: Real>(
    tape: &mut Tape<T>,
    net: &SkipClipNet,
    params: &BoundParams,
    example: &TrainingExample,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let zero_before = tape.zero_norm_cells();
    let h = net.encode_context(tape, params, &example.context.cast())?;

    let mut target_scores = Vec::with_capacity(example.targets.len());
    if cfg.enable_rank || cfg.enable_contrastive {
        for t in &example.targets {
            let z = net.encode_target(tape, params, &t.cast())?;
            target_scores.push(tape.score(h, z)?);
        }
    }
    let mut negative_scores = Vec::with_capacity(example.negatives.len());
    if cfg.enable_contrastive {
        for n in &example.negatives {
            let z = net.encode_target(tape, params, &n.cast())?;
            negative_scores.push(tape.score(h, z)?);
        }
    }

    let mut terms = Vec::new();
    let mut out = LossBreakdown::default();
    if cfg.enable_rank {
        let v = rank_loss_on(tape, &target_scores, T::lit(cfg.delta_rank))?;
        out.rank = tape.value(v).item().to_f64().unwrap();
        terms.push(v);
    }
    if cfg.enable_contrastive {
        let v = contrastive_loss_on(tape, &target_scores, &negative_scores, T::lit(cfg.delta_neg))?;
        out.contrastive = tape.value(v).item().to_f64().unwrap();
        terms.push(v);
    }
    if cfg.enable_rotation {
        if example.rotation_inputs.is_empty() {
            return Err(Error::Config(
                "rotation loss enabled but the sampler produced no rotated targets".into(),
            ));
        }
        let mut logits = Vec::with_capacity(example.rotation_inputs.len());
        for r in &example.rotation_inputs {
            let z = net.encode_target(tape, params, &r.cast())?;
            logits.push(net.predict_rotation(tape, params, z)?);
        }
        let v = rotation_loss_on(tape, &logits, &example.rotation_labels)?;
        out.rotation = tape.value(v).item().to_f64().unwrap();
        terms.push(v);
    }
    let total = if terms.len() == 1 {
        terms[0]
    } else {
        tape.sum_many(&terms)?
    };
    out.total = tape.value(total).item().to_f64().unwrap();
    let mean = |vs: &[Var], tape: &Tape<T>| {
        if vs.is_empty() {
            0.0
        } else {
            vs.iter().map(|&v| tape.value(v).item().to_f64().unwrap()).sum::<f64>() / vs.len() as f64
        }
    };
    out.mean_target_score = mean(&target_scores, tape);
    out.mean_negative_score = mean(&negative_scores, tape);
    out.zero_norm_cells = tape.zero_norm_cells() - zero_before;
    Ok((total, out))
}

/// Scores of every target and negative of an example under fixed parameters.
pub fn score_example(
    net: &SkipClipNet,
    params: &crate::encoders::EncoderParams<f32>,
    example: &TrainingExample,
) -> Result<ScoreSet<f64>> {
    let h = net.context_grid(params, &example.context)?;
    let mut set = ScoreSet {
        target_scores: Vec::new(),
        negative_scores: Vec::new(),
    };
    for t in &example.targets {
        set.target_scores.push(score(&h, &net.target_grid(params, t)?)?.0 as f64);
    }
    for n in &example.negatives {
        set.negative_scores.push(score(&h, &net.target_grid(params, n)?)?.0 as f64);
    }
    Ok(set)
}
