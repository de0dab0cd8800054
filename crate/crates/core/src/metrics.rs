//! ACC, AUC and Macro-F1 over scored link predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub probability: f64,
    pub label: bool,
    pub task: usize,
    pub event: usize,
}

fn check(preds: &[ScoredPrediction]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty("metrics input"));
    }
    if preds.iter().any(|p| !p.probability.is_finite()) {
        return Err(Error::NonFinite("prediction score"));
    }
    Ok(())
}

/// Fraction of predictions with `(p ≥ threshold) == label`.
pub fn accuracy(preds: &[ScoredPrediction], threshold: f64) -> Result<f64> {
    check(preds)?;
    let hits = preds.iter().filter(|p| (p.probability >= threshold) == p.label).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mann–Whitney estimate of `P(s_pos > s_neg) + ½ P(s_pos = s_neg)`.
pub fn auc(preds: &[ScoredPrediction]) -> Result<f64> {
    check(preds)?;
    let n_pos = preds.iter().filter(|p| p.label).count();
    let n_neg = preds.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Empty("auc needs both classes"));
    }
    let mut sorted: Vec<&ScoredPrediction> = preds.iter().collect();
    sorted.sort_by(|a, b| a.probability.total_cmp(&b.probability));
    // twice the win count, so ties add 1 instead of 0.5
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].probability == sorted[i].probability {
            j += 1;
        }
        let pos = sorted[i..j].iter().filter(|p| p.label).count() as u128;
        let neg = (j - i) as u128 - pos;
        doubled += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Per-class F1 from confusion counts; 0 when the class is absent from both
/// predictions and labels.
fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Unweighted mean of the positive-class and negative-class F1.
pub fn macro_f1(preds: &[ScoredPrediction], threshold: f64) -> Result<f64> {
    check(preds)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for p in preds {
        match (p.probability >= threshold, p.label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok((f1(tp, fp, fn_) + f1(tn, fn_, fp)) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// One metric over all tasks' predictions.
    #[default]
    Pooled,
    /// Unweighted mean of per-task metrics; single-class tasks are left out
    /// of the AUC mean.
    PerTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub auc: f64,
    pub macro_f1: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_tasks: usize,
}

pub fn group_by_task(preds: &[ScoredPrediction]) -> BTreeMap<usize, Vec<ScoredPrediction>> {
    let mut groups: BTreeMap<usize, Vec<ScoredPrediction>> = BTreeMap::new();
    for p in preds {
        groups.entry(p.task).or_default().push(*p);
    }
    groups
}

pub fn evaluate(preds: &[ScoredPrediction], pooling: Pooling) -> Result<MetricsReport> {
    check(preds)?;
    let n_pos = preds.iter().filter(|p| p.label).count();
    let groups = group_by_task(preds);
    let (acc, auc_value, f1_value) = match pooling {
        Pooling::Pooled => (accuracy(preds, THRESHOLD)?, auc(preds)?, macro_f1(preds, THRESHOLD)?),
        Pooling::PerTask => {
            let n = groups.len() as f64;
            let mut acc = 0.0;
            let mut f1s = 0.0;
            let mut aucs = Vec::new();
            for g in groups.values() {
                acc += accuracy(g, THRESHOLD)?;
                f1s += macro_f1(g, THRESHOLD)?;
                if let Ok(a) = auc(g) {
                    aucs.push(a);
                }
            }
            if aucs.is_empty() {
                return Err(Error::Empty("no task has both classes"));
            }
            (acc / n, aucs.iter().sum::<f64>() / aucs.len() as f64, f1s / n)
        }
    };
    Ok(MetricsReport {
        acc,
        auc: auc_value,
        macro_f1: f1_value,
        n_pos,
        n_neg: preds.len() - n_pos,
        n_tasks: groups.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn preds(scores: &[f64], labels: &[bool]) -> Vec<ScoredPrediction> {
        scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&probability, &label))| ScoredPrediction {
                probability,
                label,
                task: i % 3,
                event: i,
            })
            .collect()
    }

    fn random(seed: u64, n: usize, levels: u32) -> Vec<ScoredPrediction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        preds(&scores, &labels)
    }

    fn pairwise_auc(p: &[ScoredPrediction]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for a in p.iter().filter(|x| x.label) {
            for b in p.iter().filter(|x| !x.label) {
                pairs += 1.0;
                if a.probability > b.probability {
                    wins += 1.0;
                } else if a.probability == b.probability {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&preds(&[0.9, 0.1], &[true, false]), THRESHOLD).unwrap(), 1.0);
        assert_eq!(accuracy(&preds(&[0.6, 0.6], &[true, false]), THRESHOLD).unwrap(), 0.5);
        assert!(accuracy(&[], THRESHOLD).is_err());
        let p = random(3, 200, 1000);
        let count = p
            .iter()
            .filter(|x| (x.label && x.probability >= 0.5) || (!x.label && x.probability < 0.5))
            .count();
        assert_eq!(accuracy(&p, THRESHOLD).unwrap(), count as f64 / 200.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&preds(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false])).unwrap(), 1.0);
        assert_eq!(auc(&preds(&[0.4; 6], &[true, false, true, false, true, false])).unwrap(), 0.5);
        assert!(auc(&preds(&[0.1, 0.2], &[true, true])).is_err());
        for seed in 0..5 {
            let p = random(seed, 100, 20);
            assert!((auc(&p).unwrap() - pairwise_auc(&p)).abs() <= 1e-12);
        }
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&preds(&[0.9, 0.2], &[true, false]), THRESHOLD).unwrap(), 1.0);
        let all_pos = macro_f1(&preds(&[0.9, 0.9, 0.9, 0.9], &[true, true, false, false]), THRESHOLD).unwrap();
        assert!((all_pos - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_matches_confusion_matrix() {
        let p = random(8, 100, 100);
        let mut m = [[0usize; 2]; 2];
        for x in &p {
            m[x.label as usize][(x.probability >= 0.5) as usize] += 1;
        }
        let precision_pos = m[1][1] as f64 / (m[1][1] + m[0][1]) as f64;
        let recall_pos = m[1][1] as f64 / (m[1][1] + m[1][0]) as f64;
        let precision_neg = m[0][0] as f64 / (m[0][0] + m[1][0]) as f64;
        let recall_neg = m[0][0] as f64 / (m[0][0] + m[0][1]) as f64;
        let f_pos = 2.0 * precision_pos * recall_pos / (precision_pos + recall_pos);
        let f_neg = 2.0 * precision_neg * recall_neg / (precision_neg + recall_neg);
        let expected = (f_pos + f_neg) / 2.0;
        assert!((macro_f1(&p, THRESHOLD).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn report_pooling_modes() {
        let p = random(4, 60, 50);
        let pooled = evaluate(&p, Pooling::Pooled).unwrap();
        assert_eq!(pooled.n_pos + pooled.n_neg, 60);
        assert_eq!(pooled.n_tasks, 3);
        assert_eq!(pooled.auc, auc(&p).unwrap());
        let per = evaluate(&p, Pooling::PerTask).unwrap();
        let groups = group_by_task(&p);
        let mean_acc: f64 = groups.values().map(|g| accuracy(g, THRESHOLD).unwrap()).sum::<f64>() / 3.0;
        assert!((per.acc - mean_acc).abs() < 1e-15);
        let json = serde_json::to_value(&pooled).unwrap();
        for key in ["acc", "auc", "macro_f1", "n_pos", "n_neg", "n_tasks"] {
            assert!(json.get(key).is_some());
        }
    }

    proptest! {
        #[test]
        fn auc_invariants(seed in 0u64..10_000, n in 2usize..80, levels in 1u32..40) {
            let p = random(seed, n, levels);
            let a = auc(&p).unwrap();
            prop_assert!((a - pairwise_auc(&p)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));

            let transformed: Vec<ScoredPrediction> = p.iter().map(|x| ScoredPrediction { probability: (3.0 * x.probability).exp() - 7.0, ..*x }).collect();
            prop_assert!((auc(&transformed).unwrap() - a).abs() <= 1e-12);

            let flipped: Vec<ScoredPrediction> = p.iter().map(|x| ScoredPrediction { label: !x.label, ..*x }).collect();
            prop_assert!((auc(&flipped).unwrap() - (1.0 - a)).abs() <= 1e-12);

            let acc = accuracy(&p, THRESHOLD).unwrap();
            let f1 = macro_f1(&p, THRESHOLD).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&f1));
        }
    }
}
