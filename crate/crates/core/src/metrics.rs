//! Ranking metrics for binary labels.

use crate::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("ROC-AUC needs both classes".into()));
    }
    // sweep from the top: each positive beats all negatives below its group
    let mut wins = 0.0;
    let mut neg_above = 0usize;
    for g in tie_groups(scores) {
        let pos = g.iter().filter(|&&i| labels[i]).count();
        let neg = g.len() - pos;
        wins += pos as f64 * ((n_neg - neg_above - neg) as f64 + 0.5 * neg as f64);
        neg_above += neg;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Average precision: mean over positives of the precision at that
/// positive's score threshold. Tied scores form one threshold.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::InvalidArgument("PR-AUC needs at least one positive".into()));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for g in tie_groups(scores) {
        let pos = g.iter().filter(|&&i| labels[i]).count();
        tp += pos;
        seen += g.len();
        ap += pos as f64 * tp as f64 / seen as f64;
    }
    Ok(ap / n_pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    /// False-positive rate (ROC) or recall (PR).
    pub x: f64,
    /// True-positive rate (ROC) or precision (PR).
    pub y: f64,
}

/// ROC points at each distinct threshold, starting from (0, 0).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<CurvePoint>> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count().max(1) as f64;
    let n_neg = (labels.len() - labels.iter().filter(|&&y| y).count()).max(1) as f64;
    let mut pts = vec![CurvePoint { threshold: f64::INFINITY, x: 0.0, y: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| labels[i]).count();
        fp += g.iter().filter(|&&i| !labels[i]).count();
        pts.push(CurvePoint { threshold: scores[g[0]], x: fp as f64 / n_neg, y: tp as f64 / n_pos });
    }
    Ok(pts)
}

/// Precision-recall points at each distinct threshold.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<CurvePoint>> {
    check(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count().max(1) as f64;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut pts = Vec::new();
    for g in tie_groups(scores) {
        tp += g.iter().filter(|&&i| labels[i]).count();
        seen += g.len();
        pts.push(CurvePoint { threshold: scores[g[0]], x: tp as f64 / n_pos, y: tp as f64 / seen as f64 });
    }
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn roc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &b(&[0, 0, 1, 1])).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &b(&[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &b(&[0, 1, 0, 1, 1])).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &b(&[1, 1])).is_err());
    }

    #[test]
    fn pr_examples() {
        assert_eq!(pr_auc(&[0.9, 0.1], &b(&[1, 0])).unwrap(), 1.0);
        assert_eq!(pr_auc(&[0.1, 0.9], &b(&[1, 0])).unwrap(), 0.5);
        assert_eq!(pr_auc(&[0.2, 0.5, 0.1], &b(&[1, 1, 1])).unwrap(), 1.0);
        assert!(pr_auc(&[0.2, 0.5], &b(&[0, 0])).is_err());
    }

    #[test]
    fn curves_end_at_full_recall() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = b(&[0, 0, 1, 1]);
        let roc = roc_curve(&s, &y).unwrap();
        assert_eq!((roc.last().unwrap().x, roc.last().unwrap().y), (1.0, 1.0));
        let pr = pr_curve(&s, &y).unwrap();
        assert_eq!(pr.last().unwrap().x, 1.0);
        assert_eq!(pr.last().unwrap().y, 0.5);
    }

    proptest! {
        #[test]
        fn roc_invariant_under_monotone_transform(
            data in proptest::collection::vec((-3.0f64..3.0, any::<bool>()), 2..60),
        ) {
            let (s, y): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
            prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
            let t: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() + 1.0).collect();
            prop_assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&t, &y).unwrap());
        }
    }
}
