use serde::{Deserialize, Serialize};

/// Per-task mean and standard deviation, fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on rows of targets, ignoring `NaN`. A constant task gets std 1.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Normalizer {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count: Vec<usize> = Vec::new();
        for row in rows {
            if sum.is_empty() {
                sum = vec![0.0; row.len()];
                sq = vec![0.0; row.len()];
                count = vec![0; row.len()];
            }
            for (t, &v) in row.iter().enumerate() {
                if !v.is_nan() {
                    sum[t] += v;
                    sq[t] += v * v;
                    count[t] += 1;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        let std = sq
            .iter()
            .zip(&count)
            .zip(&mean)
            .map(|((q, &c), m)| {
                let var = if c > 0 { (q / c as f64 - m * m).max(0.0) } else { 0.0 };
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn identity(tasks: usize) -> Normalizer {
        Normalizer { mean: vec![0.0; tasks], std: vec![1.0; tasks] }
    }

    pub fn forward(&self, y: &[f64]) -> Vec<f64> {
        y.iter().enumerate().map(|(t, v)| (v - self.mean[t]) / self.std[t]).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(t, v)| v * self.std[t] + self.mean[t]).collect()
    }
}

fn mean_of_present(per: &[f64]) -> f64 {
    let present: Vec<f64> = per.iter().copied().filter(|v| !v.is_nan()).collect();
    present.iter().sum::<f64>() / present.len() as f64
}

fn per_task_abs(pred: &[Vec<f64>], target: &[Vec<f64>], scale: Option<&Normalizer>) -> Vec<f64> {
    let tasks = target.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; tasks];
    let mut count = vec![0usize; tasks];
    for (p, y) in pred.iter().zip(target) {
        for t in 0..tasks {
            if y[t].is_nan() {
                continue;
            }
            let d = (p[t] - y[t]).abs();
            sum[t] += scale.map_or(d, |s| d / s.std[t]);
            count[t] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect()
}

/// Mean absolute error over all non-missing entries.
pub fn mae(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    let (mut s, mut c) = (0.0, 0usize);
    for (p, y) in pred.iter().zip(target) {
        for (a, b) in p.iter().zip(y) {
            if !b.is_nan() {
                s += (a - b).abs();
                c += 1;
            }
        }
    }
    s / c as f64
}

pub fn rmse(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    let (mut s, mut c) = (0.0, 0usize);
    for (p, y) in pred.iter().zip(target) {
        for (a, b) in p.iter().zip(y) {
            if !b.is_nan() {
                s += (a - b) * (a - b);
                c += 1;
            }
        }
    }
    (s / c as f64).sqrt()
}

/// Mean over tasks of the MAE measured in training-split standard deviations.
pub fn multi_mae(pred: &[Vec<f64>], target: &[Vec<f64>], norm: &Normalizer) -> f64 {
    mean_of_present(&per_task_abs(pred, target, Some(norm)))
}

/// Mean over tasks of the raw per-task MAE.
pub fn avg_mae(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    mean_of_present(&per_task_abs(pred, target, None))
}

/// Area under the ROC curve via the rank-sum statistic, with ties given
/// half credit. `None` when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub multi_mae: f64,
    pub avg_mae: f64,
    pub roc_auc: Option<f64>,
    pub count: usize,
}

impl Metrics {
    /// All metrics for predictions and targets in original units.
    pub fn compute(pred: &[Vec<f64>], target: &[Vec<f64>], norm: &Normalizer) -> Metrics {
        let binary = target.iter().all(|y| y.len() == 1 && (y[0] == 0.0 || y[0] == 1.0));
        let roc_auc = if binary {
            let scores: Vec<f64> = pred.iter().map(|p| p[0]).collect();
            let labels: Vec<bool> = target.iter().map(|y| y[0] == 1.0).collect();
            roc_auc(&scores, &labels)
        } else {
            None
        };
        Metrics {
            mae: mae(pred, target),
            rmse: rmse(pred, target),
            multi_mae: multi_mae(pred, target, norm),
            avg_mae: avg_mae(pred, target),
            roc_auc,
            count: pred.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = vec![vec![1.0], vec![-2.0], vec![3.5]];
        assert_eq!(mae(&y, &y), 0.0);
        assert_eq!(rmse(&y, &y), 0.0);
    }

    #[test]
    fn auc() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, false]), Some(0.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(roc_auc(&[0.5], &[true]), None);
        // 0.8 > 0.3 and 0.8 > 0.6 for the positive at 0.8; the positive at 0.4 beats 0.3 only
        assert_eq!(roc_auc(&[0.8, 0.4, 0.3, 0.6], &[true, true, false, false]), Some(0.75));
    }

    #[test]
    fn normalizer_round_trip() {
        let rows = [vec![1.0, 10.0], vec![3.0, f64::NAN], vec![5.0, 30.0]];
        let n = Normalizer::fit(rows.iter().map(Vec::as_slice));
        assert_eq!(n.mean, [3.0, 20.0]);
        let z = n.forward(&[5.0, 30.0]);
        assert!((z[0] - 1.224744871391589).abs() < 1e-12 && (z[1] - 1.0).abs() < 1e-12);
        let back = n.inverse(&z);
        assert!((back[0] - 5.0).abs() < 1e-12 && (back[1] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn missing_entries_are_ignored() {
        let p = vec![vec![1.0, 100.0]];
        let y = vec![vec![2.0, f64::NAN]];
        assert_eq!(mae(&p, &y), 1.0);
        assert_eq!(avg_mae(&p, &y), 1.0);
    }
}
