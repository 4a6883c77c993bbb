//! Stratified fold plans, ROC/AUC, threshold metrics and the repeated
//! train-on-one-fold cross-validation protocol.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::sigmoid;
use crate::cohort::LabeledDataset;
use crate::error::{Error, Result};
use crate::seed;

/// How folds become training sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    /// Train on one fold, test on the remaining folds (1:9 for ten folds).
    #[default]
    TrainOneFold,
    /// Conventional k-fold: train on all folds but one. Sanity comparison only.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    /// Fold index per patient.
    pub folds: Vec<usize>,
    pub n_folds: usize,
    pub mode: CvMode,
}

impl SplitPlan {
    pub fn repetitions(&self) -> usize {
        self.n_folds
    }

    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&r| self.folds[r] == fold).collect()
    }

    /// Training rows of repetition `rep` (fold `rep` is the single training
    /// fold, or the single held-out fold in standard mode).
    pub fn train_rows(&self, rep: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&r| (self.folds[r] == rep) == (self.mode == CvMode::TrainOneFold))
            .collect()
    }

    pub fn test_rows(&self, rep: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&r| (self.folds[r] == rep) != (self.mode == CvMode::TrainOneFold))
            .collect()
    }
}

/// Stratified shuffle, then round-robin fold assignment within each class.
pub fn make_splits(labels: &[bool], n_folds: usize, seed: u64, mode: CvMode) -> Result<SplitPlan> {
    if n_folds < 2 {
        return Err(Error::Evaluation("need at least 2 folds".into()));
    }
    let mut cases: Vec<usize> = (0..labels.len()).filter(|&r| labels[r]).collect();
    let mut controls: Vec<usize> = (0..labels.len()).filter(|&r| !labels[r]).collect();
    if cases.len() < n_folds || controls.len() < n_folds {
        return Err(Error::Evaluation(format!(
            "{} cases and {} controls cannot fill {n_folds} stratified folds",
            cases.len(),
            controls.len()
        )));
    }
    let mut rng = seed::rng(seed);
    cases.shuffle(&mut rng);
    controls.shuffle(&mut rng);
    let mut folds = vec![0; labels.len()];
    // Controls continue the rotation where cases stopped so fold totals stay even.
    for (i, &r) in cases.iter().chain(&controls).enumerate() {
        folds[r] = i % n_folds;
    }
    Ok(SplitPlan { folds, n_folds, mode })
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation("both labels must be present".into()));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC: probability that a random case outscores a random
/// control, ties counting one half. Mid-ranks over a single sort.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        let cases_in_tie = order[i..=j].iter().filter(|&&r| labels[r]).count();
        rank_sum += mid * cases_in_tie as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC points from the highest threshold down, one per distinct score,
/// starting at (0, 0) and ending at (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &r) in order.iter().enumerate() {
        if labels[r] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&next| scores[next] != scores[r]);
        if last_of_tie {
            points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        }
    }
    Ok(points)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// False when nothing was predicted positive (precision reported as 0).
    pub precision_defined: bool,
}

/// Precision, recall and F-measure with `score >= threshold` predicted positive.
pub fn threshold_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> ThresholdMetrics {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision_defined = tp + fp > 0;
    let precision = if precision_defined {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f_measure = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ThresholdMetrics {
        precision,
        recall,
        f_measure,
        precision_defined,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricBundle {
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub roc_points: Vec<(f64, f64)>,
    /// Number of evaluations whose precision was undefined.
    pub undefined_precision: usize,
}

impl MetricBundle {
    /// Evaluate log-odds `margins`; the probability threshold applies to
    /// `sigmoid(margin)`.
    pub fn from_margins(margins: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        let probabilities: Vec<f64> = margins.iter().map(|&z| sigmoid(z)).collect();
        let t = threshold_metrics(&probabilities, labels, threshold);
        Ok(MetricBundle {
            auc: auc(margins, labels)?,
            precision: t.precision,
            recall: t.recall,
            f_measure: t.f_measure,
            roc_points: roc_curve(margins, labels)?,
            undefined_precision: usize::from(!t.precision_defined),
        })
    }

    /// Unweighted mean of every scalar; ROC curves are vertically averaged on
    /// a fixed false-positive-rate grid.
    pub fn average(bundles: &[MetricBundle]) -> MetricBundle {
        assert!(!bundles.is_empty(), "nothing to average");
        let n = bundles.len() as f64;
        let mean = |f: fn(&MetricBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
        let mut roc_points = vec![(0.0, 0.0)];
        for step in 0..=ROC_GRID {
            let x = step as f64 / ROC_GRID as f64;
            let y = bundles.iter().map(|b| tpr_at(&b.roc_points, x)).sum::<f64>() / n;
            roc_points.push((x, y));
        }
        MetricBundle {
            auc: mean(|b| b.auc),
            precision: mean(|b| b.precision),
            recall: mean(|b| b.recall),
            f_measure: mean(|b| b.f_measure),
            roc_points,
            undefined_precision: bundles.iter().map(|b| b.undefined_precision).sum(),
        }
    }
}

const ROC_GRID: usize = 100;

/// Highest TPR reached at false-positive rate `x`, interpolating linearly
/// between ROC vertices.
fn tpr_at(points: &[(f64, f64)], x: f64) -> f64 {
    let mut best: f64 = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 <= x && x <= x1 {
            let y = if x1 == x0 {
                y1.max(y0)
            } else {
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            };
            best = best.max(y);
        }
    }
    best
}

/// A scoring + training pipeline: fit on `train`, return log-odds for `test`.
pub trait Attacker: Sync {
    fn fit_score(&self, d: &LabeledDataset, train: &[usize], test: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub mean: MetricBundle,
    pub per_repetition: Vec<MetricBundle>,
}

/// Fit on each repetition's training rows, evaluate on its test rows and
/// average. Repetitions run in parallel; the result does not depend on
/// scheduling.
pub fn cross_validate(
    d: &LabeledDataset,
    plan: &SplitPlan,
    attacker: &dyn Attacker,
    threshold: f64,
) -> Result<CvResult> {
    if plan.folds.len() != d.n_patients() {
        return Err(Error::Evaluation(format!(
            "split plan covers {} patients, dataset has {}",
            plan.folds.len(),
            d.n_patients()
        )));
    }
    let per_repetition = (0..plan.repetitions())
        .into_par_iter()
        .map(|rep| {
            let train = plan.train_rows(rep);
            let test = plan.test_rows(rep);
            let margins = attacker.fit_score(d, &train, &test)?;
            let labels: Vec<bool> = test.iter().map(|&r| d.labels[r]).collect();
            MetricBundle::from_margins(&margins, &labels, threshold)
        })
        .collect::<Vec<Result<MetricBundle>>>()
        .into_iter()
        .enumerate()
        .map(|(repetition, r)| {
            r.map_err(|e| Error::Repetition {
                repetition,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvResult {
        mean: MetricBundle::average(&per_repetition),
        per_repetition,
    })
}
