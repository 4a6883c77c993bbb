//! Case/control dataset assembly and diagnosis-count-matched control sampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::{is_sensitive, EventCategory, EventRecord, FeatureMatrix};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSetMode {
    /// Columns occurring in either cohort.
    #[default]
    Union,
    /// Columns occurring in at least one control.
    ControlOnly,
    /// Columns occurring in at least one case and one control.
    Intersect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    #[default]
    DiagCountMatched,
    AtLeastOneDiag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub sensitive_code: String,
    pub case_cap: usize,
    pub control_pool_size: usize,
    pub matching_mode: MatchingMode,
    pub seed: u64,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.case_cap == 0 || self.control_pool_size == 0 {
            return Err(Error::Cohort("case_cap and control_pool_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A feature matrix with case (true) / control (false) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub matrix: FeatureMatrix,
    pub labels: Vec<bool>,
    pub feature_set_mode: FeatureSetMode,
}

impl LabeledDataset {
    /// Wrap a matrix, keeping only the columns admitted by `mode`.
    pub fn new(matrix: FeatureMatrix, labels: Vec<bool>, mode: FeatureSetMode) -> Result<Self> {
        if labels.len() != matrix.n_patients() {
            return Err(Error::Cohort(format!(
                "{} labels for {} patients",
                labels.len(),
                matrix.n_patients()
            )));
        }
        if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
            return Err(Error::Cohort("dataset needs at least one case and one control".into()));
        }
        let rows: Vec<usize> = (0..matrix.n_patients()).collect();
        let in_case = matrix.column_counts(rows.iter().copied().filter(|&r| labels[r]));
        let in_ctrl = matrix.column_counts(rows.iter().copied().filter(|&r| !labels[r]));
        let keep: Vec<usize> = (0..matrix.n_features())
            .filter(|&c| match mode {
                FeatureSetMode::Union => in_case[c] + in_ctrl[c] > 0,
                FeatureSetMode::ControlOnly => in_ctrl[c] > 0,
                FeatureSetMode::Intersect => in_case[c] > 0 && in_ctrl[c] > 0,
            })
            .collect();
        let matrix = if keep.len() == matrix.n_features() {
            matrix
        } else {
            matrix.select(&rows, &keep)?
        };
        Ok(LabeledDataset {
            matrix,
            labels,
            feature_set_mode: mode,
        })
    }

    pub fn n_patients(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cases(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_controls(&self) -> usize {
        self.n_patients() - self.n_cases()
    }
}

#[derive(Debug, Clone)]
pub struct CaseControl {
    pub dataset: LabeledDataset,
    pub case_ids: Vec<String>,
    pub control_ids: Vec<String>,
    /// Case candidates before the cap was applied.
    pub case_candidates: usize,
}

/// Cases are the target cohort (capped by seeded uniform sampling); controls
/// are every other sensitive cohort plus the non-sensitive cohort. Row groups
/// index into `source`.
pub fn build_case_control(
    source: &FeatureMatrix,
    cases: &[usize],
    other_sensitive: &[usize],
    non_sensitive: &[usize],
    spec: &CohortSpec,
    mode: FeatureSetMode,
) -> Result<CaseControl> {
    spec.validate()?;
    if cases.is_empty() {
        return Err(Error::Cohort(format!("no case patients for {}", spec.sensitive_code)));
    }
    let mut seen = HashSet::new();
    for &r in cases.iter().chain(other_sensitive).chain(non_sensitive) {
        if r >= source.n_patients() {
            return Err(Error::Cohort(format!("row {r} outside source matrix")));
        }
        if !seen.insert(source.patient_ids()[r].as_str()) {
            return Err(Error::Cohort(format!(
                "patient {} appears in more than one group",
                source.patient_ids()[r]
            )));
        }
    }
    let chosen_cases = sample_without_replacement(cases, spec.case_cap, spec.seed);
    let mut rows: Vec<(usize, bool)> = chosen_cases
        .iter()
        .map(|&r| (r, true))
        .chain(other_sensitive.iter().chain(non_sensitive).map(|&r| (r, false)))
        .collect();
    rows.sort_unstable();
    let order: Vec<usize> = rows.iter().map(|&(r, _)| r).collect();
    let labels: Vec<bool> = rows.iter().map(|&(_, l)| l).collect();
    let all_columns: Vec<usize> = (0..source.n_features()).collect();
    let matrix = source.select(&order, &all_columns)?;
    let dataset = LabeledDataset::new(matrix, labels, mode)?;
    let ids = |label: bool| -> Vec<String> {
        rows.iter()
            .filter(|&&(_, l)| l == label)
            .map(|&(r, _)| source.patient_ids()[r].clone())
            .collect()
    };
    Ok(CaseControl {
        case_ids: ids(true),
        control_ids: ids(false),
        case_candidates: cases.len(),
        dataset,
    })
}

/// Up to `cap` items drawn uniformly without replacement, returned in their
/// original relative order.
pub fn sample_without_replacement<T: Copy>(items: &[T], cap: usize, seed: u64) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    let mut picked: Vec<usize> = sample(&mut seed::rng(seed), items.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i]).collect()
}

/// Diagnosis-count strata given by ascending lower bounds; the last stratum
/// is open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Strata(pub Vec<u32>);

impl Default for Strata {
    fn default() -> Self {
        Strata(vec![1, 2, 3, 6, 11, 21, 51])
    }
}

impl Strata {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() || self.0[0] < 1 || self.0.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Cohort(
                "strata bounds must be strictly increasing and start at >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `None` for counts below the first bound.
    pub fn stratum_of(&self, count: u32) -> Option<usize> {
        self.0.iter().rposition(|&lo| count >= lo)
    }

    pub fn label(&self, stratum: usize) -> String {
        let lo = self.0[stratum];
        match self.0.get(stratum + 1) {
            Some(&next) if next == lo + 1 => lo.to_string(),
            Some(&next) => format!("{lo}-{}", next - 1),
            None => format!("{lo}+"),
        }
    }

    pub fn proportions(&self, counts: &[u32]) -> Vec<f64> {
        let mut hist = vec![0usize; self.len()];
        let mut total = 0usize;
        for s in counts.iter().filter_map(|&c| self.stratum_of(c)) {
            hist[s] += 1;
            total += 1;
        }
        hist.into_iter()
            .map(|h| if total == 0 { 0.0 } else { h as f64 / total as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the pool, ascending.
    pub selected: Vec<usize>,
    pub target_proportions: Vec<f64>,
    pub selected_proportions: Vec<f64>,
    /// (stratum, patients missing from its quota)
    pub shortfall: Vec<(usize, usize)>,
    pub tv_distance: f64,
}

/// Stratified sampling of `n_select` controls from a pool so that their
/// diagnosis-count stratum proportions follow the target cohort's.
///
/// Quotas are allocated by largest remainder. An undersupplied stratum is
/// taken whole and its shortfall recorded.
pub fn match_diag_counts(
    pool_counts: &[u32],
    target_counts: &[u32],
    n_select: usize,
    strata: &Strata,
    seed: u64,
) -> Result<MatchResult> {
    strata.validate()?;
    if pool_counts.is_empty() {
        return Err(Error::Cohort("empty control pool".into()));
    }
    if let Some(i) = pool_counts.iter().position(|&c| c == 0) {
        return Err(Error::Cohort(format!("pool patient {i} has no diagnosis")));
    }
    let target = strata.proportions(target_counts);
    if target.iter().all(|&p| p == 0.0) {
        return Err(Error::Cohort("target cohort has no diagnosis counts".into()));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); strata.len()];
    for (i, &c) in pool_counts.iter().enumerate() {
        if let Some(s) = strata.stratum_of(c) {
            members[s].push(i);
        }
    }
    let quotas = largest_remainder(&target, n_select.min(pool_counts.len()));
    let mut selected = Vec::with_capacity(n_select);
    let mut shortfall = Vec::new();
    for (s, (&quota, pool)) in quotas.iter().zip(&members).enumerate() {
        if quota > pool.len() {
            shortfall.push((s, quota - pool.len()));
        }
        selected.extend(sample_without_replacement(
            pool,
            quota,
            seed::derive_indexed(seed, "match_diag_counts", s as u64),
        ));
    }
    selected.sort_unstable();
    let chosen: Vec<u32> = selected.iter().map(|&i| pool_counts[i]).collect();
    let selected_proportions = strata.proportions(&chosen);
    Ok(MatchResult {
        tv_distance: tv_distance(&target, &selected_proportions),
        selected,
        target_proportions: target,
        selected_proportions,
        shortfall,
    })
}

fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &s in order.iter().take(total.saturating_sub(assigned)) {
        quotas[s] += 1;
    }
    quotas
}

/// Half the L1 distance between two probability vectors.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Exact histogram of per-patient diagnosis counts.
pub fn diag_count_histogram(counts: &[u32]) -> BTreeMap<u32, usize> {
    let mut hist = BTreeMap::new();
    for &c in counts {
        *hist.entry(c).or_insert(0) += 1;
    }
    hist
}

/// Number of distinct diagnosis codes per patient (every patient in the log
/// appears, possibly with 0).
pub fn diagnosis_counts(records: &[EventRecord]) -> BTreeMap<String, u32> {
    let mut codes: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        let entry = codes.entry(r.patient_id.as_str()).or_default();
        if r.category == EventCategory::Diagnosis {
            entry.insert(r.code.as_str());
        }
    }
    codes
        .into_iter()
        .map(|(p, set)| (p.to_string(), set.len() as u32))
        .collect()
}

/// Patients split by their diagnoses relative to a sensitive-code list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosisGroups {
    /// Patients with the target code.
    pub target: BTreeSet<String>,
    /// Patients with another sensitive code (and not the target), keyed by
    /// the first matching code in list order.
    pub other: BTreeMap<String, BTreeSet<String>>,
    /// Patients with no sensitive diagnosis.
    pub non_sensitive: BTreeSet<String>,
}

pub fn group_by_diagnosis(records: &[EventRecord], target: &str, sensitive: &[String]) -> DiagnosisGroups {
    let mut flagged: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        let entry = flagged.entry(r.patient_id.as_str()).or_default();
        if r.category != EventCategory::Diagnosis {
            continue;
        }
        if r.code.starts_with(target) {
            entry.insert(target);
        } else if let Some(s) = sensitive
            .iter()
            .find(|s| is_sensitive(&r.code, std::slice::from_ref(*s)))
        {
            entry.insert(s.as_str());
        }
    }
    let mut groups = DiagnosisGroups::default();
    for (patient, codes) in flagged {
        if codes.contains(target) {
            groups.target.insert(patient.to_string());
        } else if let Some(first) = sensitive.iter().find(|s| codes.contains(s.as_str())) {
            groups
                .other
                .entry(first.clone())
                .or_default()
                .insert(patient.to_string());
        } else {
            groups.non_sensitive.insert(patient.to_string());
        }
    }
    groups
}
