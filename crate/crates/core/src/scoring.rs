//! Univariate feature scores (Pearson chi-square and one-way ANOVA F) and the
//! ranking that drives ablation order.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cohort::LabeledDataset;
use crate::error::{Error, Result};
use crate::event_model::FeatureId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    #[default]
    Chi2,
    AnovaF,
}

/// Which rows feed the ranking inside a cross-validation repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScope {
    /// Training fold only.
    #[default]
    Train,
    /// Every row of the dataset.
    All,
}

/// Class x feature-value counts. `counts[c][f]`, c = 1 for cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContingencyTable2x2 {
    counts: [[u64; 2]; 2],
}

impl ContingencyTable2x2 {
    pub fn new(counts: [[u64; 2]; 2]) -> Result<Self> {
        if counts.iter().flatten().sum::<u64>() == 0 {
            return Err(Error::Scoring("contingency table is empty".into()));
        }
        Ok(ContingencyTable2x2 { counts })
    }

    /// From group sizes and the number of 1s in each group.
    pub fn from_groups(n_case: u64, ones_case: u64, n_ctrl: u64, ones_ctrl: u64) -> Result<Self> {
        if ones_case > n_case || ones_ctrl > n_ctrl {
            return Err(Error::Scoring("more ones than patients in a group".into()));
        }
        Self::new([[n_ctrl - ones_ctrl, ones_ctrl], [n_case - ones_case, ones_case]])
    }

    pub fn count(&self, class: usize, value: usize) -> u64 {
        self.counts[class][value]
    }

    pub fn class_total(&self, class: usize) -> u64 {
        self.counts[class][0] + self.counts[class][1]
    }

    pub fn value_total(&self, value: usize) -> u64 {
        self.counts[0][value] + self.counts[1][value]
    }

    pub fn total(&self) -> u64 {
        self.class_total(0) + self.class_total(1)
    }
}

/// Pearson chi-square on raw counts, no continuity correction. Cells with
/// zero expected count contribute nothing.
pub fn chi2_score(t: &ContingencyTable2x2) -> f64 {
    let n = t.total() as f64;
    let mut chi2 = 0.0;
    for c in 0..2 {
        for f in 0..2 {
            let expected = t.class_total(c) as f64 * t.value_total(f) as f64 / n;
            if expected > 0.0 {
                let d = t.count(c, f) as f64 - expected;
                chi2 += d * d / expected;
            }
        }
    }
    chi2
}

/// One-way ANOVA F for a binary feature split into cases and controls.
///
/// Returns `f64::INFINITY` for a perfectly separating feature (no within-group
/// variance but different means) and 0 when both variances vanish.
pub fn anova_f_score(case_values: &[bool], control_values: &[bool]) -> Result<f64> {
    let ones = |v: &[bool]| v.iter().filter(|&&x| x).count() as u64;
    anova_f_from_counts(
        case_values.len() as u64,
        ones(case_values),
        control_values.len() as u64,
        ones(control_values),
    )
}

pub fn anova_f_from_counts(n_case: u64, ones_case: u64, n_ctrl: u64, ones_ctrl: u64) -> Result<f64> {
    if n_case == 0 || n_ctrl == 0 {
        return Err(Error::Scoring("ANOVA F needs both groups non-empty".into()));
    }
    let n = n_case + n_ctrl;
    if n < 3 {
        return Err(Error::Scoring("ANOVA F needs at least 3 observations".into()));
    }
    let mean_case = ones_case as f64 / n_case as f64;
    let mean_ctrl = ones_ctrl as f64 / n_ctrl as f64;
    let mean = (ones_case + ones_ctrl) as f64 / n as f64;
    let between = n_case as f64 * (mean_case - mean).powi(2) + n_ctrl as f64 * (mean_ctrl - mean).powi(2);
    // For 0/1 data the within-group sum of squares of a group is ones * (1 - mean).
    let within = ones_case as f64 * (1.0 - mean_case) + ones_ctrl as f64 * (1.0 - mean_ctrl);
    if within == 0.0 {
        return Ok(if ones_case * n_ctrl == ones_ctrl * n_case {
            0.0
        } else {
            f64::INFINITY
        });
    }
    Ok(between / (within / (n - 2) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScore {
    pub feature: FeatureId,
    /// Column in the scored dataset.
    pub column: usize,
    pub chi2: f64,
    pub f_stat: f64,
    pub rank_chi2: usize,
    pub rank_f: usize,
}

impl FeatureScore {
    pub fn score(&self, metric: ScoreMetric) -> f64 {
        match metric {
            ScoreMetric::Chi2 => self.chi2,
            ScoreMetric::AnovaF => self.f_stat,
        }
    }

    pub fn rank(&self, metric: ScoreMetric) -> usize {
        match metric {
            ScoreMetric::Chi2 => self.rank_chi2,
            ScoreMetric::AnovaF => self.rank_f,
        }
    }
}

/// Score every column over `rows` only. The result is ordered by rank under
/// `metric` (1 = most predictive); ties go to the smaller feature id.
pub fn score_all(d: &LabeledDataset, rows: &[usize], metric: ScoreMetric) -> Result<Vec<FeatureScore>> {
    let n_case = rows.iter().filter(|&&r| d.labels[r]).count() as u64;
    let n_ctrl = rows.len() as u64 - n_case;
    if n_case == 0 || n_ctrl == 0 {
        return Err(Error::Scoring("row subset must contain both cases and controls".into()));
    }
    let m = &d.matrix;
    let case_ones = m.column_counts(rows.iter().copied().filter(|&r| d.labels[r]));
    let ctrl_ones = m.column_counts(rows.iter().copied().filter(|&r| !d.labels[r]));
    let mut scores = Vec::with_capacity(m.n_features());
    for (column, feature) in m.features().iter().enumerate() {
        let (a, b) = (case_ones[column] as u64, ctrl_ones[column] as u64);
        let table = ContingencyTable2x2::from_groups(n_case, a, n_ctrl, b)?;
        scores.push(FeatureScore {
            feature: feature.clone(),
            column,
            chi2: chi2_score(&table),
            f_stat: anova_f_from_counts(n_case, a, n_ctrl, b)?,
            rank_chi2: 0,
            rank_f: 0,
        });
    }
    for (pos, i) in rank_order(&scores, ScoreMetric::AnovaF).into_iter().enumerate() {
        scores[i].rank_f = pos + 1;
    }
    let order = rank_order(&scores, ScoreMetric::Chi2);
    for (pos, &i) in order.iter().enumerate() {
        scores[i].rank_chi2 = pos + 1;
    }
    scores.sort_by_key(|s| s.rank(metric));
    Ok(scores)
}

fn rank_order(scores: &[FeatureScore], metric: ScoreMetric) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| by_score_desc(&scores[a], &scores[b], metric));
    order
}

fn by_score_desc(a: &FeatureScore, b: &FeatureScore, metric: ScoreMetric) -> Ordering {
    b.score(metric)
        .total_cmp(&a.score(metric))
        .then_with(|| a.feature.cmp(&b.feature))
}

/// Spearman rank correlation of two rankings of the same items (1-based,
/// no ties).
pub fn spearman(ranks_a: &[usize], ranks_b: &[usize]) -> f64 {
    assert_eq!(ranks_a.len(), ranks_b.len(), "rank vectors differ in length");
    let n = ranks_a.len() as f64;
    if n < 2.0 {
        return 1.0;
    }
    let d2: f64 = ranks_a
        .iter()
        .zip(ranks_b)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::FeatureSetMode;
    use crate::event_model::{FeatureCategory, FeatureMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Observed vs expected double loop over the four cells of a 0/1 column.
    fn chi2_oracle(cases: &[bool], controls: &[bool]) -> f64 {
        let n = (cases.len() + controls.len()) as f64;
        let groups = [controls, cases];
        let mut chi2 = 0.0;
        for (c, group) in groups.iter().enumerate() {
            for f in [false, true] {
                let observed = group.iter().filter(|&&x| x == f).count() as f64;
                let class_total = groups[c].len() as f64;
                let value_total = groups.iter().flat_map(|g| g.iter()).filter(|&&x| x == f).count() as f64;
                let expected = class_total * value_total / n;
                if expected > 0.0 {
                    chi2 += (observed - expected).powi(2) / expected;
                }
            }
        }
        chi2
    }

    fn table(case_ones: u64, n_case: u64, ctrl_ones: u64, n_ctrl: u64) -> ContingencyTable2x2 {
        ContingencyTable2x2::from_groups(n_case, case_ones, n_ctrl, ctrl_ones).unwrap()
    }

    #[test]
    fn chi2_independent_feature_is_zero() {
        assert_eq!(chi2_score(&table(5, 10, 5, 10)), 0.0);
    }

    #[test]
    fn chi2_hand_computed() {
        // Expected cells 5, 15, 5, 15.
        assert!((chi2_score(&table(10, 20, 0, 20)) - 40.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn chi2_degenerate_tables() {
        assert_eq!(chi2_score(&table(0, 10, 0, 10)), 0.0);
        assert_eq!(chi2_score(&table(3, 10, 0, 0)), 0.0);
        assert!(ContingencyTable2x2::new([[0, 0], [0, 0]]).is_err());
    }

    #[test]
    fn chi2_symmetries() {
        let t = table(7, 19, 2, 31);
        let swapped_class = table(2, 31, 7, 19);
        let flipped_value = table(12, 19, 29, 31);
        assert!((chi2_score(&t) - chi2_score(&swapped_class)).abs() < 1e-9);
        assert!((chi2_score(&t) - chi2_score(&flipped_value)).abs() < 1e-9);
    }

    #[test]
    fn chi2_monotone_in_prevalence_gap() {
        let (n_case, n_ctrl) = (20u64, 30u64);
        for ctrl_ones in 0..=n_ctrl {
            let p_ctrl = ctrl_ones as f64 / n_ctrl as f64;
            // Fixed control prevalence, gap growing on either side.
            let scored: Vec<(f64, f64)> = (0..=n_case)
                .map(|a| {
                    let gap = a as f64 / n_case as f64 - p_ctrl;
                    (gap, chi2_score(&table(a, n_case, ctrl_ones, n_ctrl)))
                })
                .collect();
            for w in scored.windows(2) {
                if w[0].0 >= 0.0 {
                    assert!(w[1].1 >= w[0].1 - 1e-9, "gap {} -> {} chi2 decreased", w[0].0, w[1].0);
                }
                if w[1].0 <= 0.0 {
                    assert!(w[0].1 >= w[1].1 - 1e-9, "gap {} -> {} chi2 decreased", w[1].0, w[0].0);
                }
            }
        }
    }

    #[test]
    fn chi2_matches_oracle_on_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<bool> = (0..50).map(|i| i < 20).collect();
        for _ in 0..8 {
            let col: Vec<bool> = (0..50).map(|_| rng.gen_bool(0.4)).collect();
            let (cases, controls) = col.split_at(20);
            let ones = |v: &[bool]| v.iter().filter(|&&x| x).count() as u64;
            let t = table(ones(cases), 20, ones(controls), 30);
            assert!((chi2_score(&t) - chi2_oracle(cases, controls)).abs() < 1e-9);
            assert_eq!(labels.len(), col.len());
        }
    }

    #[test]
    fn anova_examples() {
        let f = anova_f_score(&[true, true, false, false], &[false; 4]).unwrap();
        assert!((f - 3.0).abs() < 1e-9, "{f}");
        assert_eq!(anova_f_score(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(anova_f_score(&[true; 3], &[false; 3]).unwrap(), f64::INFINITY);
        assert_eq!(anova_f_score(&[true; 3], &[true; 3]).unwrap(), 0.0);
        assert!(anova_f_score(&[], &[true]).is_err());
        assert!(anova_f_score(&[true], &[false]).is_err());
    }

    fn dataset(cols: &[Vec<bool>], labels: Vec<bool>) -> LabeledDataset {
        let n = labels.len();
        let ids = (0..n).map(|i| format!("p{i:03}")).collect();
        let features = (0..cols.len())
            .map(|j| FeatureId::new(FeatureCategory::Procedure, format!("f{j:02}")))
            .collect();
        let cells = cols
            .iter()
            .enumerate()
            .flat_map(|(j, col)| col.iter().enumerate().filter(|(_, &v)| v).map(move |(r, _)| (r, j)));
        let m = FeatureMatrix::from_cells(ids, features, cells).unwrap();
        LabeledDataset::new(m, labels, FeatureSetMode::Union).unwrap()
    }

    #[test]
    fn score_all_ranks_planted_feature_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200;
        let labels: Vec<bool> = (0..n).map(|i| i < 100).collect();
        let mut cols: Vec<Vec<bool>> = (0..10).map(|_| (0..n).map(|_| rng.gen_bool(0.5)).collect()).collect();
        cols[6] = labels
            .iter()
            .map(|&l| rng.gen_bool(if l { 0.9 } else { 0.05 }))
            .collect();
        let d = dataset(&cols, labels.clone());
        let rows: Vec<usize> = (0..n).collect();
        let scores = score_all(&d, &rows, ScoreMetric::Chi2).unwrap();
        assert_eq!(scores[0].feature.code, "f06");
        // Oracle agreement for every column.
        for s in &scores {
            let col = &cols[s.column];
            let cases: Vec<bool> = (0..n).filter(|&r| labels[r]).map(|r| col[r]).collect();
            let controls: Vec<bool> = (0..n).filter(|&r| !labels[r]).map(|r| col[r]).collect();
            assert!((s.chi2 - chi2_oracle(&cases, &controls)).abs() < 1e-9);
        }
        let again = score_all(&d, &rows, ScoreMetric::Chi2).unwrap();
        assert_eq!(scores, again);
    }

    #[test]
    fn ranks_are_permutations_and_ties_break_by_id() {
        let labels: Vec<bool> = (0..6).map(|i| i < 3).collect();
        let same = vec![true, false, false, true, false, false];
        let d = dataset(&[same.clone(), same.clone(), same], labels);
        let rows: Vec<usize> = (0..6).collect();
        let scores = score_all(&d, &rows, ScoreMetric::AnovaF).unwrap();
        let codes: Vec<&str> = scores.iter().map(|s| s.feature.code.as_str()).collect();
        assert_eq!(codes, ["f00", "f01", "f02"]);
        let mut r: Vec<usize> = scores.iter().map(|s| s.rank_chi2).collect();
        r.sort();
        assert_eq!(r, [1, 2, 3]);
    }

    #[test]
    fn score_all_reads_only_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let cols: Vec<Vec<bool>> = (0..5).map(|_| (0..n).map(|_| rng.gen_bool(0.5)).collect()).collect();
        let mut poisoned = cols.clone();
        for col in poisoned.iter_mut() {
            for v in col.iter_mut().skip(40) {
                *v = true;
            }
        }
        let subset: Vec<usize> = (0..40).collect();
        let a = score_all(&dataset(&cols, labels.clone()), &subset, ScoreMetric::Chi2).unwrap();
        let b = score_all(&dataset(&poisoned, labels), &subset, ScoreMetric::Chi2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_all_single_label_subset_is_fatal() {
        let labels = vec![true, true, false, false];
        let d = dataset(&[vec![true, false, true, false]], labels);
        assert!(score_all(&d, &[0, 1], ScoreMetric::Chi2).is_err());
    }

    #[test]
    fn spearman_extremes() {
        assert_eq!(spearman(&[1, 2, 3, 4], &[1, 2, 3, 4]), 1.0);
        assert_eq!(spearman(&[1, 2, 3, 4], &[4, 3, 2, 1]), -1.0);
    }
}
