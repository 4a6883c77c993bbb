//! Output directories, headers, the file manifest and the table writers
//! shared by the subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::ablation::AblationReport;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::event_model::{Census, FeatureGroup};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "manifest.csv";
pub const CONFIG_ECHO: &str = "config.toml";

/// First line of every emitted file, without the leading `# `.
pub fn header(cfg: &RunConfig) -> String {
    format!("eventpriv v{VERSION} seed={} config={}", cfg.master_seed(), cfg.hash())
}

/// An output directory that refuses to clobber earlier results unless forced
/// and records every file it writes.
pub struct OutputDir {
    root: PathBuf,
    header: String,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path, cfg: &RunConfig, force: bool) -> Result<Self> {
        if root.exists() {
            let occupied = std::fs::read_dir(root)
                .map_err(|e| Error::io(root, e))?
                .next()
                .is_some();
            if occupied && !force {
                return Err(Error::Report(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    root.display()
                )));
            }
            if occupied {
                std::fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
            }
        }
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut out = OutputDir {
            root: root.to_path_buf(),
            header: header(cfg),
            files: Vec::new(),
        };
        out.write(CONFIG_ECHO, &cfg.to_toml())?;
        Ok(out)
    }

    pub fn header(&self) -> &str {
        &self.header
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Write `body` under the header line.
    pub fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = format!("# {}\n{body}", self.header);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.register(name);
        Ok(())
    }

    /// Record a file written by someone else.
    pub fn register(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    /// Write the manifest: every file with its size and sha256.
    pub fn finish(self) -> Result<PathBuf> {
        let mut files = self.files;
        files.sort();
        files.dedup();
        let mut body = format!("# {}\nfile,bytes,sha256\n", self.header);
        for name in &files {
            let path = self.root.join(name);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            let _ = writeln!(body, "{name},{},{digest}", bytes.len());
        }
        let path = self.root.join(MANIFEST);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(self.root)
    }
}

pub fn census_table(census: &Census, extra: &[(&str, usize)]) -> String {
    let mut out = String::from("item,count\n");
    for (name, n) in [
        ("medication", census.medication),
        ("procedure", census.procedure),
        ("lab", census.lab),
        ("comorbidity", census.comorbidity),
        ("columns", census.columns),
    ]
    .into_iter()
    .chain(extra.iter().copied())
    {
        let _ = writeln!(out, "{name},{n}");
    }
    out
}

fn grid_columns(report: &AblationReport) -> String {
    report.schedule.labels().join(",")
}

/// AUC grid: one `auc` row and one `flag` row per disease; `L`
/// marks AUC below the progressive threshold.
pub fn grid_table(label: &str, report: &AblationReport, precision: usize, low_auc: f64) -> String {
    let mut out = format!("disease,row,{},decline\n", grid_columns(report));
    let aucs: Vec<String> = report
        .steps
        .iter()
        .map(|s| format!("{:.precision$}", s.mean.auc))
        .collect();
    let flags: Vec<&str> = report
        .steps
        .iter()
        .map(|s| if s.mean.auc < low_auc { "L" } else { "-" })
        .collect();
    let decline = report.decline.as_str();
    let _ = writeln!(out, "{label},auc,{},{decline}", aucs.join(","));
    let _ = writeln!(out, "{label},flag,{},{decline}", flags.join(","));
    out
}

pub fn long_metrics_table(label: &str, report: &AblationReport) -> String {
    let mut out = String::from("disease,k,metric,value\n");
    for s in &report.steps {
        let m = &s.mean;
        for (name, v) in [
            ("auc", m.auc),
            ("precision", m.precision),
            ("recall", m.recall),
            ("f_measure", m.f_measure),
            ("undefined_precision", m.undefined_precision as f64),
        ] {
            let _ = writeln!(out, "{label},{},{name},{v:.6}", s.k);
        }
    }
    out
}

pub fn top_features_table(report: &AblationReport) -> String {
    let mut out = String::from("rank,prefixed_name,score\n");
    for t in &report.top_features {
        let _ = writeln!(out, "{},{},{:.6}", t.rank, t.name, t.score);
    }
    out
}

pub fn composition_table(report: &AblationReport) -> String {
    let mut out = String::from("k,lab,medication,procedure,comorbidity,empty\n");
    for s in &report.steps {
        let c = &s.composition;
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2},{}",
            s.k,
            c.get(FeatureGroup::Lab),
            c.get(FeatureGroup::Medication),
            c.get(FeatureGroup::Procedure),
            c.get(FeatureGroup::Comorbidity),
            c.empty
        );
    }
    out
}

pub fn roc_rows(out: &mut String, label: &str, k: usize, repetition: &str, points: &[(f64, f64)]) {
    for (fpr, tpr) in points {
        let _ = writeln!(out, "{label},{k},{repetition},{fpr:.6},{tpr:.6}");
    }
}

pub const ROC_HEADER: &str = "disease,k,repetition,fpr,tpr\n";

pub fn roc_table(label: &str, report: &AblationReport) -> String {
    let mut out = String::from(ROC_HEADER);
    for s in &report.steps {
        roc_rows(&mut out, label, s.k, "mean", &s.mean.roc_points);
        for (r, b) in s.per_repetition.iter().enumerate() {
            roc_rows(&mut out, label, s.k, &r.to_string(), &b.roc_points);
        }
    }
    out
}

pub fn scores_table(report: &AblationReport, metric: crate::scoring::ScoreMetric) -> String {
    let mut out = String::from("rank,category,code,chi2,f_stat\n");
    for s in &report.scores {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            s.rank(metric),
            s.feature.category.as_str(),
            s.feature.code,
            s.chi2,
            s.f_stat
        );
    }
    out
}

/// Merge grid files into one table. Every input must share the same column
/// header; comment lines are dropped.
pub fn merge_grids(texts: &[(PathBuf, String)]) -> Result<String> {
    let mut columns: Option<&str> = None;
    let mut out = String::new();
    for (path, text) in texts {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or_else(|| Error::Report(format!("{}: empty grid file", path.display())))?;
        match columns {
            None => {
                columns = Some(head);
                out.push_str(head);
                out.push('\n');
            }
            Some(c) if c != head => {
                return Err(Error::Report(format!(
                    "{}: grid columns differ from the first grid",
                    path.display()
                )))
            }
            Some(_) => {}
        }
        for line in lines {
            out.push_str(line);
            out.push('\n');
        }
    }
    if columns.is_none() {
        return Err(Error::Report("no grid files to merge".into()));
    }
    Ok(out)
}
