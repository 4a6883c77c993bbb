//! Feature ablation sweep: rank features on each training fold, delete the
//! cumulative top-k, retrain, and record how identifiability declines.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, BinaryRows, TrainConfig};
use crate::cohort::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::{Attacker, MetricBundle, SplitPlan};
use crate::event_model::{FeatureGroup, FeatureId};
use crate::scoring::{score_all, FeatureScore, ScoreMetric, ScoreScope};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AblationSchedule(pub Vec<usize>);

impl Default for AblationSchedule {
    fn default() -> Self {
        AblationSchedule(vec![
            0, 10, 20, 30, 40, 50, 100, 200, 300, 400, 500, 600, 700, 800, 900, 1000,
        ])
    }
}

impl AblationSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.0.first() != Some(&0) {
            return Err(Error::Ablation("schedule must start with k = 0".into()));
        }
        if self.0.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Ablation("schedule must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Drop entries that would delete every feature.
    pub fn truncated(&self, n_features: usize) -> AblationSchedule {
        let kept: Vec<usize> = self.0.iter().copied().filter(|&k| k < n_features).collect();
        if kept.len() < self.0.len() {
            log::warn!(
                "ablation schedule truncated to k < {n_features}: dropped {:?}",
                &self.0[kept.len()..]
            );
        }
        AblationSchedule(kept)
    }

    /// Column header: `All` for k = 0, then each k.
    pub fn labels(&self) -> Vec<String> {
        self.0
            .iter()
            .map(|&k| if k == 0 { "All".to_string() } else { k.to_string() })
            .collect()
    }
}

/// The standard attacker: optionally drop the training fold's top-k features,
/// then fit L2 logistic regression on what remains.
#[derive(Debug, Clone)]
pub struct LogisticAttacker {
    pub train: TrainConfig,
    pub metric: ScoreMetric,
    pub scope: ScoreScope,
    pub remove_top_k: usize,
}

impl LogisticAttacker {
    pub fn new(train: TrainConfig) -> Self {
        LogisticAttacker {
            train,
            metric: ScoreMetric::Chi2,
            scope: ScoreScope::Train,
            remove_top_k: 0,
        }
    }
}

impl Attacker for LogisticAttacker {
    fn fit_score(&self, d: &LabeledDataset, train: &[usize], test: &[usize]) -> Result<Vec<f64>> {
        let removed: Vec<usize> = if self.remove_top_k == 0 {
            Vec::new()
        } else {
            let ranking = rank_columns(d, train, self.metric, self.scope)?;
            ranking[..self.remove_top_k.min(ranking.len())]
                .iter()
                .map(|s| s.column)
                .collect()
        };
        fit_and_score(
            d,
            train,
            test,
            &kept_columns(d.matrix.n_features(), &removed),
            &self.train,
        )
    }
}

fn rank_columns(
    d: &LabeledDataset,
    train: &[usize],
    metric: ScoreMetric,
    scope: ScoreScope,
) -> Result<Vec<FeatureScore>> {
    match scope {
        ScoreScope::Train => score_all(d, train, metric),
        ScoreScope::All => {
            let all: Vec<usize> = (0..d.n_patients()).collect();
            score_all(d, &all, metric)
        }
    }
}

fn kept_columns(n_features: usize, removed: &[usize]) -> Vec<usize> {
    let mut drop = vec![false; n_features];
    for &c in removed {
        drop[c] = true;
    }
    (0..n_features).filter(|&c| !drop[c]).collect()
}

/// Train on `train` restricted to `columns` and return test-row log-odds.
pub fn fit_and_score(
    d: &LabeledDataset,
    train: &[usize],
    test: &[usize],
    columns: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let train_rows = BinaryRows::from_matrix(&d.matrix, train, columns);
    let labels: Vec<bool> = train.iter().map(|&r| d.labels[r]).collect();
    let model = classifier::train(&train_rows, &labels, cfg)?;
    model.decision_function(&BinaryRows::from_matrix(&d.matrix, test, columns))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeclineCategory {
    Fast,
    Progressive,
    Slow,
    Unclassified,
}

impl DeclineCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            DeclineCategory::Fast => "fast",
            DeclineCategory::Progressive => "progressive",
            DeclineCategory::Slow => "slow",
            DeclineCategory::Unclassified => "unclassified",
        }
    }
}

/// Rules, checked in order: fast if AUC < `fast_auc` at some k <=
/// `fast_max_k`; progressive if AUC < `progressive_auc` at some k <=
/// `progressive_max_k`; slow if AUC >= `progressive_auc` at `slow_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeclineThresholds {
    pub fast_auc: f64,
    pub fast_max_k: usize,
    pub progressive_auc: f64,
    pub progressive_max_k: usize,
    pub slow_k: usize,
}

impl Default for DeclineThresholds {
    fn default() -> Self {
        DeclineThresholds {
            fast_auc: 0.6,
            fast_max_k: 400,
            progressive_auc: 0.7,
            progressive_max_k: 1000,
            slow_k: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeclinePreset {
    /// Progressive decline anywhere up to k = 1000.
    #[default]
    Wide,
    /// Progressive decline by k = 700.
    Narrow,
}

impl DeclinePreset {
    pub fn thresholds(self) -> DeclineThresholds {
        match self {
            DeclinePreset::Wide => DeclineThresholds::default(),
            DeclinePreset::Narrow => DeclineThresholds {
                progressive_max_k: 700,
                ..DeclineThresholds::default()
            },
        }
    }
}

/// Classify an AUC-vs-k curve. The curve must contain every k of `required`
/// (normally the default schedule) or the result is `Unclassified`.
pub fn classify_decline(curve: &[(usize, f64)], required: &AblationSchedule, t: &DeclineThresholds) -> DeclineCategory {
    let by_k: BTreeMap<usize, f64> = curve.iter().copied().collect();
    if required.0.iter().any(|k| !by_k.contains_key(k)) || !by_k.contains_key(&t.slow_k) {
        return DeclineCategory::Unclassified;
    }
    let falls_below = |auc: f64, max_k: usize| by_k.range(..=max_k).any(|(_, &a)| a < auc);
    if falls_below(t.fast_auc, t.fast_max_k) {
        DeclineCategory::Fast
    } else if falls_below(t.progressive_auc, t.progressive_max_k) {
        DeclineCategory::Progressive
    } else if by_k[&t.slow_k] >= t.progressive_auc {
        DeclineCategory::Slow
    } else {
        DeclineCategory::Unclassified
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composition {
    /// Percentages indexed by `FeatureGroup::index()`.
    pub percent: [f64; 4],
    /// True when k = 0 (nothing to describe).
    pub empty: bool,
}

impl Composition {
    pub fn get(&self, group: FeatureGroup) -> f64 {
        self.percent[group.index()]
    }
}

/// Category shares among the first `k` ranked features.
pub fn category_composition(ranked: &[FeatureId], k: usize) -> Result<Composition> {
    if k > ranked.len() {
        return Err(Error::Ablation(format!(
            "k = {k} exceeds {} ranked features",
            ranked.len()
        )));
    }
    if k == 0 {
        return Ok(Composition {
            percent: [0.0; 4],
            empty: true,
        });
    }
    let mut counts = [0usize; 4];
    for f in &ranked[..k] {
        counts[f.category.group().index()] += 1;
    }
    Ok(Composition {
        percent: counts.map(|c| 100.0 * c as f64 / k as f64),
        empty: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopFeature {
    pub rank: usize,
    pub name: String,
    pub score: f64,
}

/// First `n` ranked features with display-prefixed names.
pub fn top_features(ranked: &[(FeatureId, f64)], n: usize) -> Vec<TopFeature> {
    ranked
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, (f, score))| TopFeature {
            rank: i + 1,
            name: f.prefixed_name(),
            score: *score,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub metric: ScoreMetric,
    pub scope: ScoreScope,
    pub threshold: f64,
    pub decline: DeclineThresholds,
    pub top_n: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            train: TrainConfig::default(),
            metric: ScoreMetric::Chi2,
            scope: ScoreScope::Train,
            threshold: 0.5,
            decline: DeclineThresholds::default(),
            top_n: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationStep {
    pub k: usize,
    pub mean: MetricBundle,
    pub per_repetition: Vec<MetricBundle>,
    pub composition: Composition,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub schedule: AblationSchedule,
    pub steps: Vec<AblationStep>,
    pub decline: DeclineCategory,
    pub top_features: Vec<TopFeature>,
    /// Scores over every row, in rank order under the configured metric.
    pub scores: Vec<FeatureScore>,
    /// Columns ordered by mean rank across repetitions.
    pub consensus: Vec<FeatureId>,
    /// Per-repetition rankings (columns, best first).
    pub rankings: Vec<Vec<usize>>,
}

impl AblationReport {
    pub fn auc_curve(&self) -> Vec<(usize, f64)> {
        self.steps.iter().map(|s| (s.k, s.mean.auc)).collect()
    }
}

/// Run the sweep. Each (repetition, k) cell trains an independent model;
/// cells run in parallel and are merged by key.
pub fn run_ablation(
    d: &LabeledDataset,
    schedule: &AblationSchedule,
    plan: &SplitPlan,
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    schedule.validate()?;
    if plan.folds.len() != d.n_patients() {
        return Err(Error::Ablation("split plan does not match dataset".into()));
    }
    let n_features = d.matrix.n_features();
    let schedule = schedule.truncated(n_features);
    if schedule.0.is_empty() {
        return Err(Error::Ablation("dataset has no features".into()));
    }
    let reps = plan.repetitions();
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..reps).map(|r| (plan.train_rows(r), plan.test_rows(r))).collect();

    let rankings: Vec<Vec<usize>> = splits
        .par_iter()
        .map(|(train, _)| -> Result<Vec<usize>> {
            Ok(rank_columns(d, train, cfg.metric, cfg.scope)?
                .into_iter()
                .map(|s| s.column)
                .collect())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(repetition, r)| {
            r.map_err(|e| Error::Repetition {
                repetition,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = (0..reps)
        .flat_map(|r| (0..schedule.0.len()).map(move |i| (r, i)))
        .collect();
    let results: Vec<Result<MetricBundle>> = cells
        .par_iter()
        .map(|&(rep, i)| {
            let k = schedule.0[i];
            let (train, test) = &splits[rep];
            let columns = kept_columns(n_features, &rankings[rep][..k]);
            let margins = fit_and_score(d, train, test, &columns, &cfg.train)?;
            let labels: Vec<bool> = test.iter().map(|&r| d.labels[r]).collect();
            MetricBundle::from_margins(&margins, &labels, cfg.threshold)
        })
        .collect();
    let mut grid: Vec<Vec<Option<MetricBundle>>> = vec![vec![None; reps]; schedule.0.len()];
    for (&(rep, i), result) in cells.iter().zip(results) {
        let bundle = result.map_err(|e| Error::Repetition {
            repetition: rep,
            source: Box::new(e),
        })?;
        grid[i][rep] = Some(bundle);
    }

    let consensus = consensus_ranking(d, &rankings);
    let mut steps = Vec::with_capacity(schedule.0.len());
    for (i, row) in grid.into_iter().enumerate() {
        let per_repetition: Vec<MetricBundle> = row.into_iter().map(|b| b.expect("every cell filled")).collect();
        steps.push(AblationStep {
            k: schedule.0[i],
            mean: MetricBundle::average(&per_repetition),
            composition: category_composition(&consensus, schedule.0[i])?,
            per_repetition,
        });
    }
    let curve: Vec<(usize, f64)> = steps.iter().map(|s| (s.k, s.mean.auc)).collect();
    let all_rows: Vec<usize> = (0..d.n_patients()).collect();
    let scores = score_all(d, &all_rows, cfg.metric)?;
    let listing: Vec<(FeatureId, f64)> = scores
        .iter()
        .map(|s| (s.feature.clone(), s.score(cfg.metric)))
        .collect();
    Ok(AblationReport {
        decline: classify_decline(&curve, &AblationSchedule::default(), &cfg.decline),
        top_features: top_features(&listing, cfg.top_n.min(listing.len())),
        scores,
        consensus,
        rankings,
        steps,
        schedule,
    })
}

/// Order columns by mean rank across repetitions, ties by feature id.
fn consensus_ranking(d: &LabeledDataset, rankings: &[Vec<usize>]) -> Vec<FeatureId> {
    let n = d.matrix.n_features();
    let mut rank_sum = vec![0usize; n];
    for ranking in rankings {
        for (pos, &c) in ranking.iter().enumerate() {
            rank_sum[c] += pos;
        }
    }
    let features = d.matrix.features();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        rank_sum[a]
            .cmp(&rank_sum[b])
            .then_with(|| features[a].cmp(&features[b]))
    });
    order.into_iter().map(|c| features[c].clone()).collect()
}
