//! Ranking metrics over target scores given in temporal order. The expected
//! order is descending: the nearest future target should score highest.

use crate::error::{Error, Result};

fn check_len(scores: &[f64]) -> Result<()> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ranking metrics need at least 2 scores, got {}",
            scores.len()
        )));
    }
    Ok(())
}

/// Fraction of pairs `i < j` with `s_i > s_j`; ties count one half.
pub fn pairwise_ranking_accuracy(scores: &[f64]) -> Result<f64> {
    check_len(scores)?;
    let m = scores.len();
    let mut good = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            if scores[i] > scores[j] {
                good += 1.0;
            } else if scores[i] == scores[j] {
                good += 0.5;
            }
        }
    }
    Ok(good / (m * (m - 1) / 2) as f64)
}

/// Kendall's τ-b between the scores and the temporal order. The temporal
/// order has no ties, so only score ties enter the correction. All-tied
/// scores give 0.
pub fn kendall_tau(scores: &[f64]) -> Result<f64> {
    check_len(scores)?;
    let m = scores.len();
    let (mut concordant, mut discordant, mut tied) = (0i64, 0i64, 0i64);
    for i in 0..m {
        for j in i + 1..m {
            if scores[i] > scores[j] {
                concordant += 1;
            } else if scores[i] < scores[j] {
                discordant += 1;
            } else {
                tied += 1;
            }
        }
    }
    let n0 = (m * (m - 1) / 2) as f64;
    let denom = (n0 * (n0 - tied as f64)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((concordant - discordant) as f64 / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(pairwise_ranking_accuracy(&[3.0, 2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(pairwise_ranking_accuracy(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((pairwise_ranking_accuracy(&[3.0, 1.0, 2.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(kendall_tau(&[3.0, 2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0]).unwrap(), -1.0);
        assert_eq!(kendall_tau(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(pairwise_ranking_accuracy(&[1.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn too_short() {
        assert!(kendall_tau(&[1.0]).is_err());
        assert!(pairwise_ranking_accuracy(&[]).is_err());
    }
}
