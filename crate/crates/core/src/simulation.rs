//! Random binomial cohorts.
//!
//! `shared_p` gives cases and controls the same per-feature probability,
//! `independent_p` draws them separately, and `planted` adds designed signal
//! (case-only features and prevalence-shifted features) on a `shared_p`
//! background. Each column draws from its own RNG stream derived from the
//! master seed, so generation order does not matter.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{FeatureSetMode, LabeledDataset};
use crate::error::{Error, Result};
use crate::event_model::{FeatureCategory, FeatureGroup, FeatureId, FeatureMatrix};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    SharedP,
    IndependentP,
    Planted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub n_unique_case_features: usize,
    pub n_shifted_features: usize,
    /// Additive case-over-control prevalence shift of shifted features.
    pub shift: f64,
    /// Case prevalence range of case-only features.
    pub unique_p_low: f64,
    pub unique_p_high: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_unique_case_features: 5,
            n_shifted_features: 0,
            shift: 0.2,
            unique_p_low: 0.3,
            unique_p_high: 0.9,
        }
    }
}

/// Relative weights of feature categories; labs split evenly into low/high.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CategoryMix {
    pub lab: f64,
    pub medication: f64,
    pub procedure: f64,
    pub comorbidity: f64,
}

impl Default for CategoryMix {
    fn default() -> Self {
        CategoryMix {
            lab: 0.25,
            medication: 0.3,
            procedure: 0.3,
            comorbidity: 0.15,
        }
    }
}

impl CategoryMix {
    fn weights(&self) -> [f64; 4] {
        let mut w = [0.0; 4];
        w[FeatureGroup::Lab.index()] = self.lab;
        w[FeatureGroup::Medication.index()] = self.medication;
        w[FeatureGroup::Procedure.index()] = self.procedure;
        w[FeatureGroup::Comorbidity.index()] = self.comorbidity;
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSpec {
    pub n_case: usize,
    pub n_ctrl: usize,
    pub n_features: usize,
    pub mode: SimMode,
    pub planted: PlantedConfig,
    pub mix: CategoryMix,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            n_case: 500,
            n_ctrl: 500,
            n_features: 1000,
            mode: SimMode::SharedP,
            planted: PlantedConfig::default(),
            mix: CategoryMix::default(),
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Simulation(m));
        if self.n_case == 0 || self.n_ctrl == 0 || self.n_features == 0 {
            return bad("n_case, n_ctrl and n_features must be positive".into());
        }
        let w = self.mix.weights();
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return bad("category mix weights must be non-negative with a positive sum".into());
        }
        if self.mode == SimMode::Planted {
            let p = &self.planted;
            if p.n_unique_case_features + p.n_shifted_features > self.n_features {
                return bad(format!(
                    "{} planted features exceed n_features = {}",
                    p.n_unique_case_features + p.n_shifted_features,
                    self.n_features
                ));
            }
            if !(0.0..=1.0).contains(&p.shift) {
                return bad(format!("shift {} outside [0, 1]", p.shift));
            }
            if !(0.0 <= p.unique_p_low && p.unique_p_low <= p.unique_p_high && p.unique_p_high <= 1.0) {
                return bad("unique feature prevalence range must lie in [0, 1]".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    Background,
    UniqueCase,
    Shifted,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: LabeledDataset,
    /// Per retained column: (case probability, control probability).
    pub probabilities: Vec<(f64, f64)>,
    pub roles: Vec<FeatureRole>,
}

fn code_prefix(category: FeatureCategory) -> &'static str {
    match category {
        FeatureCategory::LabLow | FeatureCategory::LabHigh => "LAB",
        FeatureCategory::Medication => "MED",
        FeatureCategory::Procedure => "PRC",
        FeatureCategory::Comorbidity => "DX",
    }
}

fn synthetic_code(category: FeatureCategory, index: usize) -> String {
    format!("{}{index:05}", code_prefix(category))
}

/// Category per planned column: quotas by largest remainder, then shuffled.
fn layout_categories(spec: &SimSpec) -> Vec<FeatureGroup> {
    let w = spec.mix.weights();
    let total: f64 = w.iter().sum();
    let exact: Vec<f64> = w.iter().map(|x| x / total * spec.n_features as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let missing = spec.n_features - quotas.iter().sum::<usize>();
    for &g in order.iter().take(missing) {
        quotas[g] += 1;
    }
    let mut groups: Vec<FeatureGroup> = FeatureGroup::ALL
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g, quotas[g.index()]))
        .collect();
    groups.shuffle(&mut seed::rng(seed::derive_seed(spec.seed, "simulate/layout")));
    groups
}

pub fn simulate(spec: &SimSpec) -> Result<Simulation> {
    spec.validate()?;
    let groups = layout_categories(spec);
    let mut counters = [0usize; 4];
    let features: Vec<FeatureId> = groups
        .iter()
        .map(|&g| {
            let i = counters[g.index()];
            counters[g.index()] += 1;
            let category = match g {
                FeatureGroup::Lab if i % 2 == 0 => FeatureCategory::LabLow,
                FeatureGroup::Lab => FeatureCategory::LabHigh,
                FeatureGroup::Medication => FeatureCategory::Medication,
                FeatureGroup::Procedure => FeatureCategory::Procedure,
                FeatureGroup::Comorbidity => FeatureCategory::Comorbidity,
            };
            let index = if g == FeatureGroup::Lab { i / 2 } else { i };
            FeatureId::new(category, synthetic_code(category, index))
        })
        .collect();

    let mut roles = vec![FeatureRole::Background; spec.n_features];
    if spec.mode == SimMode::Planted {
        let mut slots: Vec<usize> = (0..spec.n_features).collect();
        slots.shuffle(&mut seed::rng(seed::derive_seed(spec.seed, "simulate/roles")));
        let p = &spec.planted;
        for &j in &slots[..p.n_unique_case_features] {
            roles[j] = FeatureRole::UniqueCase;
        }
        for &j in &slots[p.n_unique_case_features..p.n_unique_case_features + p.n_shifted_features] {
            roles[j] = FeatureRole::Shifted;
        }
    }

    let n = spec.n_case + spec.n_ctrl;
    let columns: Vec<((f64, f64), Vec<usize>)> = (0..spec.n_features)
        .into_par_iter()
        .map(|j| {
            let mut rng = seed::rng(seed::derive_indexed(spec.seed, "simulate/column", j as u64));
            let probs = column_probabilities(spec, roles[j], &mut rng);
            let ones: Vec<usize> = (0..n)
                .filter(|&r| rng.gen_bool(if r < spec.n_case { probs.0 } else { probs.1 }))
                .collect();
            (probs, ones)
        })
        .collect();

    // Canonical column order, matching what the encoder produces.
    let mut order: Vec<usize> = (0..spec.n_features).collect();
    order.sort_by(|&a, &b| features[a].cmp(&features[b]));
    let retained: Vec<usize> = order.into_iter().filter(|&j| !columns[j].1.is_empty()).collect();

    let patient_ids: Vec<String> = (0..spec.n_case)
        .map(|i| format!("case{i:06}"))
        .chain((0..spec.n_ctrl).map(|i| format!("ctrl{i:06}")))
        .collect();
    let cells = retained
        .iter()
        .enumerate()
        .flat_map(|(new, &j)| columns[j].1.iter().map(move |&r| (r, new)));
    let matrix = FeatureMatrix::from_cells(
        patient_ids,
        retained.iter().map(|&j| features[j].clone()).collect(),
        cells,
    )?;
    let labels: Vec<bool> = (0..n).map(|r| r < spec.n_case).collect();
    Ok(Simulation {
        dataset: LabeledDataset::new(matrix, labels, FeatureSetMode::Union)?,
        probabilities: retained.iter().map(|&j| columns[j].0).collect(),
        roles: retained.iter().map(|&j| roles[j]).collect(),
    })
}

fn column_probabilities(spec: &SimSpec, role: FeatureRole, rng: &mut impl Rng) -> (f64, f64) {
    match (spec.mode, role) {
        (SimMode::IndependentP, _) => (rng.gen::<f64>(), rng.gen::<f64>()),
        (_, FeatureRole::UniqueCase) => (
            rng.gen_range(spec.planted.unique_p_low..=spec.planted.unique_p_high),
            0.0,
        ),
        (_, FeatureRole::Shifted) => {
            let delta = spec.planted.shift;
            let ctrl = rng.gen::<f64>() * (1.0 - delta);
            ((ctrl + delta).min(1.0), ctrl)
        }
        (_, FeatureRole::Background) => {
            let p = rng.gen::<f64>();
            (p, p)
        }
    }
}

/// Per-feature |P(f=1 | case) - P(f=1 | control)|, ascending.
pub fn prevalence_gap_curve(d: &LabeledDataset) -> Result<Vec<f64>> {
    let (n_case, n_ctrl) = (d.n_cases(), d.n_controls());
    if n_case == 0 || n_ctrl == 0 {
        return Err(Error::Simulation("both labels must be present".into()));
    }
    let rows = 0..d.n_patients();
    let case = d.matrix.column_counts(rows.clone().filter(|&r| d.labels[r]));
    let ctrl = d.matrix.column_counts(rows.filter(|&r| !d.labels[r]));
    let mut gaps: Vec<f64> = case
        .iter()
        .zip(&ctrl)
        .map(|(&a, &b)| (a as f64 / n_case as f64 - b as f64 / n_ctrl as f64).abs())
        .collect();
    gaps.sort_by(f64::total_cmp);
    Ok(gaps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabTemplate {
    pub code: String,
    pub ref_low: f64,
    pub ref_high: f64,
}

/// Code pools used to materialize a dataset as an event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTemplates {
    pub medications: Vec<String>,
    pub procedures: Vec<String>,
    pub labs: Vec<LabTemplate>,
    pub comorbidities: Vec<String>,
    /// Diagnosis recorded for every case (scrubbed again on encoding).
    pub case_diagnosis: String,
    /// In-range lab every patient receives so that all-zero rows survive.
    pub anchor_lab: LabTemplate,
}

impl EventTemplates {
    /// Pools of `size` codes per category, named as `simulate` names them.
    pub fn synthetic(size: usize) -> Self {
        let codes = |c: FeatureCategory| (0..size).map(|i| synthetic_code(c, i)).collect();
        EventTemplates {
            medications: codes(FeatureCategory::Medication),
            procedures: codes(FeatureCategory::Procedure),
            labs: (0..size)
                .map(|i| LabTemplate {
                    code: synthetic_code(FeatureCategory::LabLow, i),
                    ref_low: 10.0,
                    ref_high: 20.0,
                })
                .collect(),
            comorbidities: codes(FeatureCategory::Comorbidity),
            case_diagnosis: "300".into(),
            anchor_lab: LabTemplate {
                code: "ANCHOR".into(),
                ref_low: 0.0,
                ref_high: 1.0,
            },
        }
    }
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

/// Write `d` as an event log in the default ingest format. Encoding the log
/// with `templates.case_diagnosis` as the sensitive code reproduces `d.matrix`.
pub fn generate_event_log(d: &LabeledDataset, templates: &EventTemplates, path: &Path, preamble: &str) -> Result<()> {
    let m = &d.matrix;
    let mut needed = [0usize; 4];
    let mut lab_codes = std::collections::BTreeSet::new();
    for f in m.features() {
        if f.category.group() == FeatureGroup::Lab {
            lab_codes.insert(f.code.as_str());
        } else {
            needed[f.category.group().index()] += 1;
        }
    }
    needed[FeatureGroup::Lab.index()] = lab_codes.len();
    let pools = [
        (FeatureGroup::Lab, templates.labs.len()),
        (FeatureGroup::Medication, templates.medications.len()),
        (FeatureGroup::Procedure, templates.procedures.len()),
        (FeatureGroup::Comorbidity, templates.comorbidities.len()),
    ];
    for (g, size) in pools {
        if needed[g.index()] > size {
            return Err(Error::Simulation(format!(
                "template pool for {} has {size} codes, dataset needs {}",
                g.as_str(),
                needed[g.index()]
            )));
        }
    }
    let lab_range = |code: &str| templates.labs.iter().find(|l| l.code == code);
    for f in m.features() {
        let known = match f.category {
            FeatureCategory::LabLow | FeatureCategory::LabHigh => lab_range(&f.code).is_some(),
            FeatureCategory::Medication => templates.medications.contains(&f.code),
            FeatureCategory::Procedure => templates.procedures.contains(&f.code),
            FeatureCategory::Comorbidity => templates.comorbidities.contains(&f.code),
        };
        if !known {
            return Err(Error::Simulation(format!("feature {f} is not in the template pools")));
        }
    }

    let mut out = String::new();
    if !preamble.is_empty() {
        let _ = writeln!(out, "# {preamble}");
    }
    out.push_str("patient_id,category,code,value,ref_low,ref_high\n");
    let anchor = &templates.anchor_lab;
    let anchor_value = (anchor.ref_low + anchor.ref_high) / 2.0;
    for (r, id) in m.patient_ids().iter().enumerate() {
        let _ = writeln!(
            out,
            "{id},lab,{},{},{},{}",
            anchor.code,
            fmt_num(anchor_value),
            fmt_num(anchor.ref_low),
            fmt_num(anchor.ref_high)
        );
        if d.labels[r] {
            let _ = writeln!(out, "{id},diagnosis,{},,,", templates.case_diagnosis);
        }
        for &c in m.row(r) {
            let f = &m.features()[c as usize];
            match f.category {
                FeatureCategory::LabLow | FeatureCategory::LabHigh => {
                    let t = lab_range(&f.code).expect("checked above");
                    let span = (t.ref_high - t.ref_low).abs().max(1.0);
                    let value = if f.category == FeatureCategory::LabLow {
                        t.ref_low - 0.5 * span
                    } else {
                        t.ref_high + 0.5 * span
                    };
                    let _ = writeln!(
                        out,
                        "{id},lab,{},{},{},{}",
                        f.code,
                        fmt_num(value),
                        fmt_num(t.ref_low),
                        fmt_num(t.ref_high)
                    );
                }
                FeatureCategory::Medication => {
                    let _ = writeln!(out, "{id},medication,{},,,", f.code);
                }
                FeatureCategory::Procedure => {
                    let _ = writeln!(out, "{id},procedure,{},,,", f.code);
                }
                FeatureCategory::Comorbidity => {
                    let _ = writeln!(out, "{id},diagnosis,{},,,", f.code);
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_model::{encode, ingest_events, EventFormat};

    fn spec(mode: SimMode, seed: u64) -> SimSpec {
        SimSpec {
            n_case: 60,
            n_ctrl: 80,
            n_features: 50,
            mode,
            seed,
            ..SimSpec::default()
        }
    }

    #[test]
    fn seed_determinism_and_group_sizes() {
        let a = simulate(&spec(SimMode::SharedP, 3)).unwrap();
        let b = simulate(&spec(SimMode::SharedP, 3)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.dataset.n_cases(), 60);
        assert_eq!(a.dataset.n_controls(), 80);
        let c = simulate(&spec(SimMode::SharedP, 4)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn planted_unique_features_absent_from_controls() {
        let mut s = spec(SimMode::Planted, 5);
        s.planted.n_unique_case_features = 6;
        s.planted.n_shifted_features = 10;
        let sim = simulate(&s).unwrap();
        let d = &sim.dataset;
        let ctrl = d.matrix.column_counts((0..d.n_patients()).filter(|&r| !d.labels[r]));
        let unique: Vec<usize> = (0..d.matrix.n_features())
            .filter(|&c| sim.roles[c] == FeatureRole::UniqueCase)
            .collect();
        assert_eq!(unique.len(), 6);
        assert!(unique.iter().all(|&c| ctrl[c] == 0));
        for (c, role) in sim.roles.iter().enumerate() {
            if *role == FeatureRole::Shifted {
                let (pc, pk) = sim.probabilities[c];
                assert!((pc - pk - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec(SimMode::Planted, 0);
        s.planted.n_unique_case_features = 40;
        s.planted.n_shifted_features = 20;
        assert!(simulate(&s).is_err());
        let mut s = spec(SimMode::Planted, 0);
        s.planted.shift = 1.5;
        assert!(simulate(&s).is_err());
        let mut s = spec(SimMode::SharedP, 0);
        s.n_case = 0;
        assert!(simulate(&s).is_err());
    }

    #[test]
    fn identical_columns_have_zero_gap() {
        let s = spec(SimMode::SharedP, 1);
        let d = simulate(&s).unwrap().dataset;
        // Duplicate patients as both case and control.
        let rows: Vec<usize> = (0..d.n_patients()).chain(0..d.n_patients()).collect();
        let cols: Vec<usize> = (0..d.matrix.n_features()).collect();
        let mut ids_matrix = d.matrix.select(&rows, &cols).unwrap();
        // Patient ids must be unique only for encoding, not for this check.
        let labels: Vec<bool> = (0..rows.len()).map(|i| i < d.n_patients()).collect();
        ids_matrix = ids_matrix.clone();
        let twin = LabeledDataset::new(ids_matrix, labels, FeatureSetMode::Union).unwrap();
        assert!(prevalence_gap_curve(&twin).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn event_log_round_trip() {
        let mut s = spec(SimMode::Planted, 9);
        s.planted.n_shifted_features = 5;
        let d = simulate(&s).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let templates = EventTemplates::synthetic(s.n_features);
        generate_event_log(&d, &templates, &path, "test").unwrap();
        let ingested = ingest_events(&path, &EventFormat::default()).unwrap();
        assert_eq!(ingested.skipped, 0);
        let ids: std::collections::BTreeSet<&str> = ingested.records.iter().map(|r| r.patient_id.as_str()).collect();
        assert_eq!(ids.len(), s.n_case + s.n_ctrl);
        let m = encode(&ingested.records, std::slice::from_ref(&templates.case_diagnosis)).unwrap();
        assert_eq!(m, d.matrix);
    }

    #[test]
    fn lab_low_is_strictly_below_range() {
        let d = simulate(&spec(SimMode::SharedP, 2)).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let templates = EventTemplates::synthetic(50);
        generate_event_log(&d, &templates, &path, "").unwrap();
        let records = ingest_events(&path, &EventFormat::default()).unwrap().records;
        let low_codes: Vec<&str> = d
            .matrix
            .features()
            .iter()
            .filter(|f| f.category == FeatureCategory::LabLow)
            .map(|f| f.code.as_str())
            .collect();
        assert!(!low_codes.is_empty());
        for r in records.iter().filter(|r| low_codes.contains(&r.code.as_str())) {
            if r.value < r.ref_low {
                continue;
            }
            // The same code may also carry its lab_high event.
            assert!(r.value > r.ref_high);
        }
    }

    #[test]
    fn small_template_pool_is_fatal() {
        let d = simulate(&spec(SimMode::SharedP, 2)).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let err = generate_event_log(&d, &EventTemplates::synthetic(2), &dir.path().join("e.csv"), "").unwrap_err();
        assert!(matches!(err, Error::Simulation(_)));
    }
}
