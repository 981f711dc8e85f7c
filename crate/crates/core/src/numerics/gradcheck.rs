//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::Result;
use crate::numerics::tensor::Tensor;

/// One evaluation of the function under test.
#[derive(Debug, Clone)]
pub struct Probe {
    pub loss: f64,
    /// Analytic gradients, one per parameter; empty when not requested.
    pub grads: Vec<Tensor<f64>>,
    /// Fingerprint of every piecewise branch taken (relu signs, pool winners).
    /// Perturbations that change it crossed a kink and are skipped.
    pub signature: u64,
}

/// Central-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`, error `O(h²)`.
    ThreePoint,
    /// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`, error `O(h⁴)`.
    FivePoint,
}

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub step: f64,
    pub tol: f64,
    pub stencil: Stencil,
    /// Check at most this many coordinates per tensor (evenly strided); `None` checks all.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-4,
            tol: 1e-4,
            stencil: Stencil::FivePoint,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub params: Vec<ParamReport>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| !p.flagged)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.flagged)
            .map(|p| p.name.as_str())
            .collect()
    }
}

/// Magnitudes below this are compared absolutely: a central difference in
/// 64-bit arithmetic carries round-off near `1e-12` even when the true
/// gradient is exactly zero.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients against central differences coordinate by
/// coordinate.
///
/// `loss_fn(params, want_grads)` must be deterministic.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    names: &[String],
    params: &[Tensor<f64>],
    opts: &FdOptions,
) -> Result<FdReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<Probe>,
{
    let base = loss_fn(params, true)?;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());

    for (pi, name) in names.iter().enumerate() {
        let n = params[pi].numel();
        let stride = match opts.max_coords_per_tensor {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        let mut skipped = 0;
        for i in (0..n).step_by(stride) {
            let orig = work[pi].data()[i];
            let offsets: &[(f64, f64)] = match opts.stencil {
                Stencil::ThreePoint => &[(1.0, 0.5), (-1.0, -0.5)],
                Stencil::FivePoint => &[(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)],
            };
            let mut numeric = 0.0;
            let mut crossed = false;
            for &(k, c) in offsets {
                work[pi].data_mut()[i] = orig + k * opts.step;
                let probe = loss_fn(&work, false)?;
                crossed |= probe.signature != base.signature;
                numeric += c * probe.loss;
            }
            work[pi].data_mut()[i] = orig;
            if crossed {
                skipped += 1;
                continue;
            }
            let numeric = numeric / opts.step;
            let analytic = base.grads[pi].data()[i];
            max_rel = max_rel.max(relative_error(analytic, numeric));
            checked += 1;
        }
        reports.push(ParamReport {
            name: name.clone(),
            max_rel_error: max_rel,
            checked,
            skipped_kinks: skipped,
            flagged: max_rel > opts.tol,
        });
    }
    Ok(FdReport {
        max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        checked: reports.iter().map(|r| r.checked).sum(),
        skipped_kinks: reports.iter().map(|r| r.skipped_kinks).sum(),
        params: reports,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_agrees_to_round_off() {
        let x = [0.3, -1.2, 2.5, 0.7];
        let w = Tensor::from_vec(vec![0.5, 0.1, -0.4, 2.0]);
        let report = finite_diff_check(
            |p, _| {
                let loss = p[0].data().iter().zip(&x).map(|(a, b)| a * b).sum();
                Ok(Probe {
                    loss,
                    grads: vec![Tensor::from_vec(x.to_vec())],
                    signature: 0,
                })
            },
            &["w".to_string()],
            &[w],
            &FdOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{}", report.max_rel_error);
        assert!(report.passed());
    }

    #[test]
    fn flags_wrong_gradient() {
        let report = finite_diff_check(
            |p, _| {
                let v = p[0].data()[0];
                Ok(Probe {
                    loss: v * v,
                    grads: vec![Tensor::from_vec(vec![v])],
                    signature: 0,
                })
            },
            &["x".to_string()],
            &[Tensor::from_vec(vec![1.5])],
            &FdOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.flagged(), vec!["x"]);
    }
}
