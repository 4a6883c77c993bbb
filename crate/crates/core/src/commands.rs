//! Subcommand implementations. Each takes a resolved config and an output
//! directory and returns the directory written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ablation::{run_ablation, AblationReport, LogisticAttacker};
use crate::cohort::{
    build_case_control, diag_count_histogram, diagnosis_counts, match_diag_counts, sample_without_replacement,
    LabeledDataset, MatchResult, MatchingMode,
};
use crate::config::{AuditSource, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{cross_validate, make_splits};
use crate::event_model::{
    encode, feature_census, ingest_events, is_sensitive, read_matrix, write_matrix, EventCategory, EventRecord,
    FeatureMatrix, MatrixFiles,
};
use crate::report::{self, OutputDir};
use crate::simulation::{generate_event_log, prevalence_gap_curve, simulate, EventTemplates, SimMode};

pub const COHORTS_FILE: &str = "cohorts.csv";

/// Per-patient cohort membership, the part of a raw log the matrix loses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientCohort {
    pub patient_id: String,
    pub diagnosis_count: u32,
    /// Sensitive prefixes matched by any diagnosis, in configured order.
    pub sensitive: Vec<String>,
}

pub fn patient_cohorts(records: &[EventRecord], sensitive: &[String]) -> Vec<PatientCohort> {
    let mut hits: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for r in records {
        let entry = hits
            .entry(r.patient_id.as_str())
            .or_insert_with(|| vec![false; sensitive.len()]);
        if r.category == EventCategory::Diagnosis {
            for (i, s) in sensitive.iter().enumerate() {
                entry[i] |= is_sensitive(&r.code, std::slice::from_ref(s));
            }
        }
    }
    let counts = diagnosis_counts(records);
    hits.into_iter()
        .map(|(p, flags)| PatientCohort {
            patient_id: p.to_string(),
            diagnosis_count: counts[p],
            sensitive: sensitive
                .iter()
                .zip(flags)
                .filter(|(_, f)| *f)
                .map(|(s, _)| s.clone())
                .collect(),
        })
        .collect()
}

fn cohorts_table(cohorts: &[PatientCohort]) -> String {
    let mut out = String::from("patient_id,diagnosis_count,sensitive\n");
    for c in cohorts {
        let _ = writeln!(out, "{},{},{}", c.patient_id, c.diagnosis_count, c.sensitive.join(";"));
    }
    out
}

pub fn read_cohorts(path: &Path) -> Result<Vec<PatientCohort>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    if lines.next() != Some("patient_id,diagnosis_count,sensitive") {
        return Err(schema("expected header patient_id,diagnosis_count,sensitive".into()));
    }
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(schema(format!("malformed row {line:?}")));
            }
            Ok(PatientCohort {
                patient_id: fields[0].to_string(),
                diagnosis_count: fields[1]
                    .parse()
                    .map_err(|_| schema(format!("bad diagnosis count {:?}", fields[1])))?,
                sensitive: fields[2]
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect(),
            })
        })
        .collect()
}

fn load_log(cfg: &RunConfig) -> Result<(FeatureMatrix, Vec<PatientCohort>)> {
    let path = cfg
        .event_model
        .log
        .as_ref()
        .ok_or_else(|| Error::Report("event_model.log is required".into()))?;
    let ingested = ingest_events(path, &cfg.event_model.format)?;
    if ingested.skipped > 0 {
        log::warn!("{}: skipped {} malformed rows", path.display(), ingested.skipped);
    }
    let sensitive = cfg.sensitive_codes();
    let matrix = encode(&ingested.records, &sensitive)?;
    Ok((matrix, patient_cohorts(&ingested.records, &sensitive)))
}

/// Encode a raw log into matrix files, a census and the cohort table.
pub fn cmd_encode(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<PathBuf> {
    let (matrix, cohorts) = load_log(cfg)?;
    let mut out = OutputDir::create(out_dir, cfg, force)?;
    let files = MatrixFiles::in_dir(out_dir);
    write_matrix(&matrix, &files, out.header())?;
    for name in ["features.csv", "cells.csv", "patients.txt"] {
        out.register(name);
    }
    let census = feature_census(&matrix);
    out.write(
        "census.csv",
        &report::census_table(&census, &[("patients", matrix.n_patients()), ("nnz", matrix.nnz())]),
    )?;
    out.write(COHORTS_FILE, &cohorts_table(&cohorts))?;
    out.finish()
}

struct CohortOutputs {
    dataset: LabeledDataset,
    files: Vec<(String, String)>,
}

fn stratum_table(cfg: &RunConfig, m: &MatchResult) -> String {
    let strata = &cfg.cohort_builder.strata;
    let mut out = String::from("stratum,target,selected,shortfall\n");
    for s in 0..strata.len() {
        let short = m.shortfall.iter().find(|(i, _)| *i == s).map_or(0, |(_, n)| *n);
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{short}",
            strata.label(s),
            m.target_proportions[s],
            m.selected_proportions[s]
        );
    }
    let _ = writeln!(out, "tv_distance,{:.6},,", m.tv_distance);
    out
}

fn histogram_rows(out: &mut String, group: &str, counts: &[u32]) {
    for (count, patients) in diag_count_histogram(counts) {
        let _ = writeln!(out, "{group},{count},{patients}");
    }
}

/// Cases, matched controls and the case/control dataset from an encoded log.
fn assemble_cohort(cfg: &RunConfig, matrix: &FeatureMatrix, cohorts: &[PatientCohort]) -> Result<CohortOutputs> {
    let ids: Vec<&str> = cohorts.iter().map(|c| c.patient_id.as_str()).collect();
    if ids.len() != matrix.n_patients() || ids.iter().zip(matrix.patient_ids()).any(|(a, b)| *a != b) {
        return Err(Error::Cohort(
            "cohort table does not list the matrix patients in order".into(),
        ));
    }
    let target = &cfg.cohort_builder.sensitive_code;
    let mut cases = Vec::new();
    let mut other = Vec::new();
    let mut pool = Vec::new();
    for (r, c) in cohorts.iter().enumerate() {
        if c.sensitive.iter().any(|s| s == target) {
            cases.push(r);
        } else if !c.sensitive.is_empty() {
            other.push(r);
        } else if c.diagnosis_count >= 1 {
            pool.push(r);
        }
    }
    let count_of = |rows: &[usize]| -> Vec<u32> { rows.iter().map(|&r| cohorts[r].diagnosis_count).collect() };
    let pool_counts = count_of(&pool);
    let sensitive_rows: Vec<usize> = cases.iter().chain(&other).copied().collect();
    let sensitive_counts = count_of(&sensitive_rows);
    let control_seed = cfg.stage_seed("cohort_builder/controls");
    let mut files = Vec::new();

    let selected: Vec<usize> = if pool.is_empty() {
        log::warn!("no non-sensitive patients with a diagnosis; controls come from other sensitive cohorts only");
        Vec::new()
    } else {
        match cfg.cohort_builder.matching_mode {
            MatchingMode::DiagCountMatched => {
                let n = cfg.cohort_builder.control_pool_size.min(pool.len());
                let m = match_diag_counts(
                    &pool_counts,
                    &sensitive_counts,
                    n,
                    &cfg.cohort_builder.strata,
                    control_seed,
                )?;
                files.push(("matching.csv".to_string(), stratum_table(cfg, &m)));
                m.selected.iter().map(|&i| pool[i]).collect()
            }
            MatchingMode::AtLeastOneDiag => {
                sample_without_replacement(&pool, cfg.cohort_builder.control_pool_size, control_seed)
            }
        }
    };

    let spec = cfg.cohort_spec(cfg.stage_seed("cohort_builder/cases"));
    let cc = build_case_control(
        matrix,
        &cases,
        &other,
        &selected,
        &spec,
        cfg.cohort_builder.feature_set_mode,
    )?;

    let mut hist = String::from("group,diagnosis_count,patients\n");
    let case_rows: Vec<usize> = cc
        .case_ids
        .iter()
        .map(|id| ids.binary_search(&id.as_str()).expect("case id from matrix"))
        .collect();
    histogram_rows(&mut hist, "cases", &count_of(&case_rows));
    histogram_rows(&mut hist, "sensitive_union", &sensitive_counts);
    histogram_rows(&mut hist, "control_pool", &pool_counts);
    histogram_rows(&mut hist, "selected_controls", &count_of(&selected));
    files.push(("diagnosis_counts.csv".to_string(), hist));
    files.push(("cases.txt".to_string(), cc.case_ids.join("\n") + "\n"));
    files.push(("controls.txt".to_string(), cc.control_ids.join("\n") + "\n"));
    let mut summary = String::from("item,count\n");
    for (k, v) in [
        ("case_candidates", cc.case_candidates),
        ("cases", cc.case_ids.len()),
        ("other_sensitive_controls", other.len()),
        ("control_pool", pool.len()),
        ("matched_controls", selected.len()),
    ] {
        let _ = writeln!(summary, "{k},{v}");
    }
    files.push(("cohort.csv".to_string(), summary));
    Ok(CohortOutputs {
        dataset: cc.dataset,
        files,
    })
}

fn audit_dataset(cfg: &RunConfig) -> Result<CohortOutputs> {
    match cfg.cli_reporting.audit_source {
        AuditSource::Log => {
            let (matrix, cohorts) = load_log(cfg)?;
            assemble_cohort(cfg, &matrix, &cohorts)
        }
        AuditSource::Matrix => {
            let dir = cfg
                .event_model
                .matrix_dir
                .as_ref()
                .ok_or_else(|| Error::Report("event_model.matrix_dir is required".into()))?;
            let matrix = read_matrix(&MatrixFiles::in_dir(dir))?;
            let cohorts = read_cohorts(&dir.join(COHORTS_FILE))?;
            assemble_cohort(cfg, &matrix, &cohorts)
        }
        AuditSource::Simulation => {
            let sim = &cfg.simulation;
            let spec = sim.spec(sim.mode, cfg.stage_seed("simulation"));
            Ok(CohortOutputs {
                dataset: simulate(&spec)?.dataset,
                files: Vec::new(),
            })
        }
    }
}

/// Extra cohort files (name, body) emitted next to the report.
pub type Audit = (LabeledDataset, AblationReport, Vec<(String, String)>);

/// Run the ablation sweep for one sensitive code.
pub fn audit(cfg: &RunConfig) -> Result<Audit> {
    let CohortOutputs { dataset, files } = audit_dataset(cfg)?;
    let plan = make_splits(
        &dataset.labels,
        cfg.evaluation.n_folds,
        cfg.stage_seed("evaluation/splits"),
        cfg.evaluation.cv_mode,
    )?;
    let report = run_ablation(&dataset, &cfg.ablation_engine.schedule, &plan, &cfg.ablation_config())?;
    Ok((dataset, report, files))
}

pub fn cmd_audit(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<PathBuf> {
    let (dataset, report, cohort_files) = audit(cfg)?;
    let label = cfg.label();
    let thresholds = cfg.ablation_engine.thresholds();
    let mut out = OutputDir::create(out_dir, cfg, force)?;
    out.write(
        "grid.csv",
        &report::grid_table(
            &label,
            &report,
            cfg.cli_reporting.grid_precision,
            thresholds.progressive_auc,
        ),
    )?;
    out.write("metrics_long.csv", &report::long_metrics_table(&label, &report))?;
    out.write("top_features.csv", &report::top_features_table(&report))?;
    out.write("composition.csv", &report::composition_table(&report))?;
    out.write("roc.csv", &report::roc_table(&label, &report))?;
    out.write("scores.csv", &report::scores_table(&report, cfg.feature_scoring.metric))?;
    let census = feature_census(&dataset.matrix);
    out.write(
        "census.csv",
        &report::census_table(
            &census,
            &[
                ("patients", dataset.n_patients()),
                ("cases", dataset.n_cases()),
                ("controls", dataset.n_controls()),
            ],
        ),
    )?;
    for (name, body) in &cohort_files {
        out.write(name, body)?;
    }
    let verdict = format!(
        "disease={label}\ndecline={}\nauc_all={:.6}\nschedule={}\n",
        report.decline.as_str(),
        report.steps[0].mean.auc,
        report.schedule.labels().join(",")
    );
    out.write("verdict.txt", &verdict)?;
    log::info!("{label}: decline {}", report.decline.as_str());
    out.finish()
}

/// Evaluate shared_p and independent_p (and optionally planted) cohorts with
/// the full attacker and write their ROC and prevalence-gap curves.
pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<PathBuf> {
    let mut modes = vec![SimMode::SharedP, SimMode::IndependentP];
    if cfg.simulation.include_planted {
        modes.push(SimMode::Planted);
    }
    let mut out = OutputDir::create(out_dir, cfg, force)?;
    let attacker = LogisticAttacker::new(cfg.train_config(cfg.stage_seed("classifier")));
    let mut summary = String::from("mode,auc,precision,recall,f_measure\n");
    let mut roc = String::from(report::ROC_HEADER);
    for mode in modes {
        let name = mode_name(mode);
        let spec = cfg.simulation.spec(mode, cfg.stage_seed(&format!("simulation/{name}")));
        let d = simulate(&spec)?.dataset;
        let plan = make_splits(
            &d.labels,
            cfg.evaluation.n_folds,
            cfg.stage_seed("evaluation/splits"),
            cfg.evaluation.cv_mode,
        )?;
        let cv = cross_validate(&d, &plan, &attacker, cfg.evaluation.threshold)?;
        let m = &cv.mean;
        let _ = writeln!(
            summary,
            "{name},{:.6},{:.6},{:.6},{:.6}",
            m.auc, m.precision, m.recall, m.f_measure
        );
        report::roc_rows(&mut roc, name, 0, "mean", &m.roc_points);
        let mut gaps = String::from("rank,gap\n");
        for (i, g) in prevalence_gap_curve(&d)?.iter().enumerate() {
            let _ = writeln!(gaps, "{},{g:.6}", i + 1);
        }
        out.write(&format!("gap_{name}.csv"), &gaps)?;
        if cfg.simulation.write_event_logs {
            let file = format!("events_{name}.csv");
            let templates = EventTemplates::synthetic(cfg.simulation.n_features);
            generate_event_log(&d, &templates, &out.path(&file), out.header())?;
            out.register(&file);
        }
    }
    out.write("roc.csv", &roc)?;
    out.write("summary.csv", &summary)?;
    out.finish()
}

fn mode_name(mode: SimMode) -> &'static str {
    match mode {
        SimMode::SharedP => "shared_p",
        SimMode::IndependentP => "independent_p",
        SimMode::Planted => "planted",
    }
}

/// Concatenate per-disease grid files into one table.
pub fn cmd_report_merge(cfg: &RunConfig, inputs: &[PathBuf], out_dir: &Path, force: bool) -> Result<PathBuf> {
    let mut texts = Vec::new();
    for input in inputs {
        let path = if input.is_dir() {
            input.join("grid.csv")
        } else {
            input.clone()
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        texts.push((path, text));
    }
    let merged = report::merge_grids(&texts)?;
    let mut out = OutputDir::create(out_dir, cfg, force)?;
    out.write("grid.csv", &merged)?;
    out.finish()
}
