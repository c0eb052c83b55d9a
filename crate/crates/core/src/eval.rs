//! Scoring metrics: quadratic weighted kappa, correct/close counts, and the
//! paired two-tailed t-test used to compare configurations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dataset::PromptSpecs;
use crate::error::{Error, Result};
use crate::special::student_t_two_sided_p;

/// Quadratic weighted kappa between integer ratings on the closed range
/// [min, max]. The range comes from the prompt definition, never from the
/// observed ratings, so a system that only ever predicts one value is still
/// scored against the full rating scale. When the expected disagreement is
/// zero the statistic is defined as 1.0.
pub fn qwk(gold: &[i32], pred: &[i32], min: i32, max: i32) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "qwk over {} gold but {} predicted ratings",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Contract("qwk over zero ratings".into()));
    }
    if min >= max {
        return Err(Error::Parameter(format!(
            "rating range [{min}, {max}] must contain at least two values"
        )));
    }
    let c = (max - min + 1) as usize;
    let to_idx = |r: i32, side: &str| -> Result<usize> {
        if r < min || r > max {
            return Err(Error::Validation(format!(
                "{side} rating {r} outside [{min}, {max}]"
            )));
        }
        Ok((r - min) as usize)
    };

    let n = gold.len() as f64;
    let mut observed = vec![0.0f64; c * c];
    let mut gold_marginal = vec![0.0f64; c];
    let mut pred_marginal = vec![0.0f64; c];
    for (&g, &p) in gold.iter().zip(pred) {
        let gi = to_idx(g, "gold")?;
        let pi = to_idx(p, "predicted")?;
        observed[gi * c + pi] += 1.0;
        gold_marginal[gi] += 1.0;
        pred_marginal[pi] += 1.0;
    }

    let denom = ((c - 1) * (c - 1)) as f64;
    let weight = |i: usize, j: usize| {
        let d = i as f64 - j as f64;
        d * d / denom
    };

    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..c {
        for j in 0..c {
            let w = weight(i, j);
            num += w * observed[i * c + j];
            den += w * gold_marginal[i] * pred_marginal[j] / n;
        }
    }
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}

/// Counts of exactly-correct predictions and of predictions within one
/// point of gold. Close includes correct.
pub fn correct_close(gold: &[i32], pred: &[i32]) -> Result<(usize, usize)> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "correct_close over {} gold but {} predicted ratings",
            gold.len(),
            pred.len()
        )));
    }
    let mut correct = 0;
    let mut close = 0;
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            correct += 1;
        }
        if (g - p).abs() <= 1 {
            close += 1;
        }
    }
    Ok((correct, close))
}

/// Paired two-tailed Student t-test. Returns (t, p). The sample standard
/// deviation uses the n-1 divisor. An all-zero difference vector yields
/// (0, 1); identical nonzero differences have no variance to test against
/// and are reported as an error rather than a fake certainty.
pub fn paired_ttest_2tailed(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "paired t-test over {} and {} samples",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Contract(
            "paired t-test needs at least two pairs".into(),
        ));
    }
    for (&a, &b) in x.iter().zip(y) {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("paired t-test input".into()));
        }
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = libm::sqrt(var);
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok((0.0, 1.0));
        }
        return Err(Error::DegenerateVariance);
    }
    let t = mean / (sd / libm::sqrt(n as f64));
    let p = student_t_two_sided_p(t, (n - 1) as f64)?;
    Ok((t, p))
}

/// Unweighted mean of per-prompt kappas for a mixed-prompt rating set.
/// Items are (prompt_id, gold, predicted); each prompt is scored on its own
/// range and the prompt kappas are averaged with equal weight.
pub fn per_prompt_mean_qwk(items: &[(u8, i32, i32)], specs: &PromptSpecs) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Contract("mean qwk over zero ratings".into()));
    }
    let mut by_prompt: BTreeMap<u8, (Vec<i32>, Vec<i32>)> = BTreeMap::new();
    for &(prompt, g, p) in items {
        let slot = by_prompt.entry(prompt).or_default();
        slot.0.push(g);
        slot.1.push(p);
    }
    let mut sum = 0.0;
    for (prompt, (gold, pred)) in &by_prompt {
        let spec = specs.get(*prompt).ok_or_else(|| {
            Error::Config(format!("no rating range defined for prompt {prompt}"))
        })?;
        sum += qwk(gold, pred, spec.min_score, spec.max_score)?;
    }
    Ok(sum / by_prompt.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qwk_perfect_agreement_is_one() {
        assert_eq!(qwk(&[0, 1, 2, 3], &[0, 1, 2, 3], 0, 3).unwrap(), 1.0);
    }

    #[test]
    fn qwk_total_disagreement_on_binary_scale() {
        assert_eq!(qwk(&[0, 1], &[1, 0], 0, 1).unwrap(), -1.0);
    }

    #[test]
    fn qwk_zero_expected_disagreement_is_one() {
        // both raters constant: marginals concentrate on one cell
        assert_eq!(qwk(&[2, 2, 2], &[2, 2, 2], 0, 3).unwrap(), 1.0);
    }

    #[test]
    fn qwk_uses_declared_range_not_observed() {
        // identical ratings but on ranges of different width disagree once
        // a single off-by-one appears: wider range -> smaller penalty
        let narrow = qwk(&[0, 1, 2], &[0, 1, 1], 0, 2).unwrap();
        let wide = qwk(&[0, 1, 2], &[0, 1, 1], 0, 10).unwrap();
        assert!(wide > narrow);
    }

    #[test]
    fn qwk_rejects_out_of_range_ratings() {
        assert!(matches!(
            qwk(&[0, 5], &[0, 1], 0, 3),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            qwk(&[0, 1], &[0, 4], 0, 3),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn qwk_rejects_length_mismatch_and_empty() {
        assert!(matches!(qwk(&[0], &[0, 1], 0, 3), Err(Error::Contract(_))));
        assert!(matches!(qwk(&[], &[], 0, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn correct_close_counts() {
        // from a published annotator row: 29 correct, 45 close of 48
        let (correct, close) = correct_close(&[3, 3, 2, 0], &[3, 2, 0, 0]).unwrap();
        assert_eq!(correct, 2);
        assert_eq!(close, 3);
    }

    #[test]
    fn ttest_frozen_example() {
        // x - y = [1, 2, 3]: t = 2*sqrt(3), p from the df=2 closed form
        let (t, p) = paired_ttest_2tailed(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((t - 3.464_101_615_137_754_4).abs() < 1e-12);
        assert!((p - 0.074_179_900_227_448_58).abs() < 1e-12);
    }

    #[test]
    fn ttest_all_zero_differences() {
        let (t, p) = paired_ttest_2tailed(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!((t, p), (0.0, 1.0));
    }

    #[test]
    fn ttest_degenerate_variance() {
        assert!(matches!(
            paired_ttest_2tailed(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]),
            Err(Error::DegenerateVariance)
        ));
    }

    #[test]
    fn ttest_antisymmetric_in_t_same_p() {
        let x = [0.61, 0.55, 0.70, 0.52, 0.66];
        let y = [0.58, 0.51, 0.72, 0.45, 0.60];
        let (t1, p1) = paired_ttest_2tailed(&x, &y).unwrap();
        let (t2, p2) = paired_ttest_2tailed(&y, &x).unwrap();
        assert!((t1 + t2).abs() < 1e-12);
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn ttest_needs_two_pairs() {
        assert!(matches!(
            paired_ttest_2tailed(&[1.0], &[2.0]),
            Err(Error::Contract(_))
        ));
    }
}
