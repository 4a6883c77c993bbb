//! L2-regularized logistic regression attacker.
//!
//! Objective: sum of per-row negative log-likelihoods plus `lambda * ||w||^2`.
//! The intercept is fitted but not penalized. Minimized with L-BFGS and an
//! Armijo backtracking line search, so the objective never increases between
//! accepted steps.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::event_model::{FeatureId, FeatureMatrix};
use crate::seed;

/// Hash of a feature dictionary; models only apply to rows built from the
/// same dictionary.
pub fn feature_signature<'a>(features: impl IntoIterator<Item = &'a FeatureId>) -> String {
    let mut hasher = Sha256::new();
    for f in features {
        hasher.update(f.category.as_str().as_bytes());
        hasher.update([0]);
        hasher.update(f.code.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    digest[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Row-compressed 0/1 design matrix handed to the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryRows {
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    signature: String,
}

impl BinaryRows {
    /// `rows` x `columns` of `m`, columns renumbered 0.. in the given order.
    pub fn from_matrix(m: &FeatureMatrix, rows: &[usize], columns: &[usize]) -> Self {
        let mut remap = vec![u32::MAX; m.n_features()];
        for (new, &old) in columns.iter().enumerate() {
            remap[old] = new as u32;
        }
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for &r in rows {
            let start = cols.len();
            cols.extend(m.row(r).iter().map(|&c| remap[c as usize]).filter(|&c| c != u32::MAX));
            cols[start..].sort_unstable();
            row_ptr.push(cols.len());
        }
        BinaryRows {
            n_cols: columns.len(),
            row_ptr,
            cols,
            signature: feature_signature(columns.iter().map(|&c| &m.features()[c])),
        }
    }

    pub fn all(m: &FeatureMatrix) -> Self {
        let rows: Vec<usize> = (0..m.n_patients()).collect();
        let cols: Vec<usize> = (0..m.n_features()).collect();
        Self::from_matrix(m, &rows, &cols)
    }

    /// Dense 0/1 rows with an explicit signature; used for small fixtures.
    pub fn from_dense(rows: &[Vec<bool>], n_cols: usize, signature: impl Into<String>) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        for row in rows {
            assert_eq!(row.len(), n_cols, "ragged dense rows");
            cols.extend(row.iter().enumerate().filter(|(_, &v)| v).map(|(j, _)| j as u32));
            row_ptr.push(cols.len());
        }
        BinaryRows {
            n_cols,
            row_ptr,
            cols,
            signature: signature.into(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn signature(&self) -> &str {
        &self.signature
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub seed: u64,
    /// Half-width of the uniform random initial weights; 0 starts at w = 0.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            seed: 0,
            init_scale: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Classifier(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.gradient_tolerance.is_nan() || self.gradient_tolerance <= 0.0 {
            return Err(Error::Classifier("gradient_tolerance must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Classifier("max_iterations must be >= 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Classifier("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    pub converged: bool,
    pub iterations: usize,
    /// Objective after the initial point and after every accepted step.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_signature: String,
    pub fit: FitReport,
}

impl LogisticModel {
    pub fn zero(n_features: usize, lambda: f64, feature_signature: impl Into<String>) -> Self {
        LogisticModel {
            weights: vec![0.0; n_features],
            intercept: 0.0,
            lambda,
            feature_signature: feature_signature.into(),
            fit: FitReport::default(),
        }
    }

    fn check(&self, rows: &BinaryRows) -> Result<()> {
        if self.feature_signature != rows.signature || self.weights.len() != rows.n_cols {
            return Err(Error::Misaligned {
                model: self.feature_signature.clone(),
                rows: rows.signature.clone(),
            });
        }
        Ok(())
    }

    /// Log-odds `w . x + b` per row.
    pub fn decision_function(&self, rows: &BinaryRows) -> Result<Vec<f64>> {
        self.check(rows)?;
        Ok((0..rows.n_rows())
            .map(|r| margin(&self.weights, self.intercept, rows.row(r)))
            .collect())
    }
}

fn margin(weights: &[f64], intercept: f64, row: &[u32]) -> f64 {
    intercept + row.iter().map(|&c| weights[c as usize]).sum::<f64>()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Objective and gradient at `params` = (weights..., intercept).
fn objective_and_gradient(params: &[f64], rows: &BinaryRows, labels: &[bool], lambda: f64) -> (f64, Vec<f64>) {
    let (weights, intercept) = params.split_at(params.len() - 1);
    let mut grad = vec![0.0; params.len()];
    let mut nll = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = rows.row(r);
        let z = margin(weights, intercept[0], row);
        nll += if y { softplus(-z) } else { softplus(z) };
        let residual = sigmoid(z) - if y { 1.0 } else { 0.0 };
        for &c in row {
            grad[c as usize] += residual;
        }
        grad[weights.len()] += residual;
    }
    let mut penalty = 0.0;
    for (g, &w) in grad.iter_mut().zip(weights) {
        penalty += w * w;
        *g += 2.0 * lambda * w;
    }
    (nll + lambda * penalty, grad)
}

fn check_labels(rows: &BinaryRows, labels: &[bool]) -> Result<()> {
    if labels.len() != rows.n_rows() {
        return Err(Error::Classifier(format!(
            "{} labels for {} rows",
            labels.len(),
            rows.n_rows()
        )));
    }
    Ok(())
}

fn params_of(model: &LogisticModel) -> Vec<f64> {
    let mut p = model.weights.clone();
    p.push(model.intercept);
    p
}

/// Penalized negative log-likelihood of `model` on `rows`.
pub fn objective(model: &LogisticModel, rows: &BinaryRows, labels: &[bool]) -> Result<f64> {
    model.check(rows)?;
    check_labels(rows, labels)?;
    Ok(objective_and_gradient(&params_of(model), rows, labels, model.lambda).0)
}

/// Objective and its gradient; the last gradient entry is the intercept's.
pub fn objective_gradient(model: &LogisticModel, rows: &BinaryRows, labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    model.check(rows)?;
    check_labels(rows, labels)?;
    Ok(objective_and_gradient(&params_of(model), rows, labels, model.lambda))
}

pub fn predict_proba(model: &LogisticModel, rows: &BinaryRows) -> Result<Vec<f64>> {
    Ok(model.decision_function(rows)?.into_iter().map(sigmoid).collect())
}

const HISTORY: usize = 10;
const ARMIJO: f64 = 1e-4;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// L-BFGS two-loop recursion: returns -H g.
fn descent_direction(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|x| *x *= gamma);
    }
    for ((s, y, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha - beta) * si;
        }
    }
    q.iter_mut().for_each(|x| *x = -*x);
    q
}

/// Fit a model. Single-label input is an error; running out of iterations is
/// not (the returned model has `fit.converged == false`).
pub fn train(rows: &BinaryRows, labels: &[bool], cfg: &TrainConfig) -> Result<LogisticModel> {
    cfg.validate()?;
    check_labels(rows, labels)?;
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::Classifier("training rows need both labels".into()));
    }
    let n = rows.n_cols() + 1;
    let mut x = vec![0.0; n];
    if cfg.init_scale > 0.0 {
        let mut rng = seed::rng(seed::derive_seed(cfg.seed, "classifier/init"));
        for w in x.iter_mut().take(n - 1) {
            *w = rng.gen_range(-cfg.init_scale..=cfg.init_scale);
        }
    }
    let eval = |p: &[f64]| objective_and_gradient(p, rows, labels, cfg.lambda);
    let (mut fx, mut grad) = eval(&x);
    let mut report = FitReport {
        objective_trace: vec![fx],
        ..FitReport::default()
    };
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(HISTORY);

    while max_abs(&grad) > cfg.gradient_tolerance {
        if report.iterations == cfg.max_iterations {
            break;
        }
        report.iterations += 1;
        let mut direction = descent_direction(&grad, &history);
        let mut slope = dot(&grad, &direction);
        if slope.is_nan() || slope >= 0.0 {
            history.clear();
            direction = grad.iter().map(|g| -g).collect();
            slope = dot(&grad, &direction);
        }
        let mut step = if history.is_empty() {
            (1.0 / max_abs(&grad)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        while step > 1e-20 {
            let trial: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + step * di).collect();
            let (f_trial, g_trial) = eval(&trial);
            let sufficient = f_trial <= fx + ARMIJO * step * slope;
            // Near the optimum the Armijo decrease drops below rounding; accept a
            // step that does not increase f but still shrinks the gradient.
            let flat = f_trial <= fx && max_abs(&g_trial) < max_abs(&grad);
            if sufficient || flat {
                accepted = Some((trial, f_trial, g_trial));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if history.len() == HISTORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        grad = g_new;
        report.objective_trace.push(fx);
    }
    report.converged = max_abs(&grad) <= cfg.gradient_tolerance;
    if !report.converged {
        log::debug!(
            "logistic regression stopped after {} iterations, |grad|_inf = {:e}",
            report.iterations,
            max_abs(&grad)
        );
    }
    let intercept = x.pop().expect("intercept slot");
    if x.iter().any(|w| !w.is_finite()) || !intercept.is_finite() {
        return Err(Error::Classifier("optimizer produced non-finite weights".into()));
    }
    Ok(LogisticModel {
        weights: x,
        intercept,
        lambda: cfg.lambda,
        feature_signature: rows.signature.clone(),
        fit: report,
    })
}

/// Text form: three `key,value` header rows then `feature_index,weight` rows.
pub fn write_model(model: &LogisticModel, path: &Path, preamble: &str) -> Result<()> {
    let mut out = String::new();
    if !preamble.is_empty() {
        let _ = writeln!(out, "# {preamble}");
    }
    let _ = writeln!(out, "lambda,{}", model.lambda);
    let _ = writeln!(out, "intercept,{}", model.intercept);
    let _ = writeln!(out, "signature,{}", model.feature_signature);
    let _ = writeln!(out, "feature_index,weight");
    for (i, w) in model.weights.iter().enumerate() {
        let _ = writeln!(out, "{i},{w}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<LogisticModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Schema {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let mut header = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad("truncated model header"))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(','))
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("expected {key}")))
    };
    let lambda = header("lambda")?.parse().map_err(|_| bad("bad lambda"))?;
    let intercept = header("intercept")?.parse().map_err(|_| bad("bad intercept"))?;
    let signature = header("signature")?;
    if lines.next() != Some("feature_index,weight") {
        return Err(bad("expected feature_index,weight"));
    }
    let mut weights = Vec::new();
    for line in lines {
        let (i, w) = line.split_once(',').ok_or_else(|| bad("bad weight row"))?;
        if i.parse::<usize>().ok() != Some(weights.len()) {
            return Err(bad("weight rows out of order"));
        }
        weights.push(w.parse().map_err(|_| bad("bad weight"))?);
    }
    Ok(LogisticModel {
        weights,
        intercept,
        lambda,
        feature_signature: signature,
        fit: FitReport::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line evaluation of the penalized negative log-likelihood.
    fn objective_oracle(w: &[f64], b: f64, lambda: f64, x: &[Vec<bool>], y: &[bool]) -> f64 {
        let mut total = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let z: f64 = b + row.iter().zip(w).filter(|(v, _)| **v).map(|(_, wi)| wi).sum::<f64>();
            let p1 = 1.0 / (1.0 + (-z).exp());
            total -= if label { p1.ln() } else { (1.0 - p1).ln() };
        }
        total + lambda * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn random_problem(seed: u64, n: usize, d: usize) -> (Vec<Vec<bool>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<bool>> = (0..n).map(|_| (0..d).map(|_| rng.gen_bool(0.4)).collect()).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        y[0] = true;
        y[1] = false;
        (x, y)
    }

    #[test]
    fn zero_model_objective_is_n_log2() {
        let (x, y) = random_problem(1, 12, 4);
        let rows = BinaryRows::from_dense(&x, 4, "sig");
        let m = LogisticModel::zero(4, 1.0, "sig");
        let got = objective(&m, &rows, &y).unwrap();
        assert!((got - 12.0 * 2f64.ln()).abs() < 1e-12);
        assert!(predict_proba(&m, &rows).unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn perfect_fit_limit() {
        let rows = BinaryRows::from_dense(&[vec![true]], 1, "s");
        let mut m = LogisticModel::zero(1, 0.0, "s");
        m.weights[0] = 50.0;
        assert!(objective(&m, &rows, &[true]).unwrap() < 1e-20);
    }

    #[test]
    fn objective_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let (x, y) = random_problem(seed, 15, 6);
            let rows = BinaryRows::from_dense(&x, 6, "s");
            let mut m = LogisticModel::zero(6, 0.7, "s");
            m.weights.iter_mut().for_each(|w| *w = rng.gen_range(-2.0..2.0));
            m.intercept = rng.gen_range(-1.0..1.0);
            let expect = objective_oracle(&m.weights, m.intercept, 0.7, &x, &y);
            assert!((objective(&m, &rows, &y).unwrap() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn proba_consistent_with_objective() {
        let (x, y) = random_problem(4, 20, 5);
        let rows = BinaryRows::from_dense(&x, 5, "s");
        let m = train(&rows, &y, &TrainConfig::default()).unwrap();
        let p = predict_proba(&m, &rows).unwrap();
        let nll: f64 = p
            .iter()
            .zip(&y)
            .map(|(&p, &l)| -if l { p.ln() } else { (1.0 - p).ln() })
            .sum();
        let penalty = m.lambda * m.weights.iter().map(|w| w * w).sum::<f64>();
        assert!((objective(&m, &rows, &y).unwrap() - penalty - nll).abs() < 1e-9);
    }

    #[test]
    fn misaligned_rows_rejected() {
        let rows = BinaryRows::from_dense(&[vec![true, false]], 2, "a");
        let m = LogisticModel::zero(2, 1.0, "b");
        assert!(matches!(predict_proba(&m, &rows), Err(Error::Misaligned { .. })));
        assert!(objective(&m, &rows, &[true]).is_err());
    }

    #[test]
    fn separable_data_stays_finite() {
        let x = vec![
            vec![true, false],
            vec![true, false],
            vec![false, true],
            vec![false, true],
        ];
        let y = vec![true, true, false, false];
        let rows = BinaryRows::from_dense(&x, 2, "s");
        let m = train(&rows, &y, &TrainConfig::default()).unwrap();
        assert!(m.fit.converged);
        assert!(m.weights.iter().all(|w| w.is_finite()));
        assert!(m.weights[0] > 0.0 && m.weights[1] < 0.0);
    }

    #[test]
    fn training_is_deterministic_and_monotone() {
        let (x, y) = random_problem(8, 40, 10);
        let rows = BinaryRows::from_dense(&x, 10, "s");
        let a = train(&rows, &y, &TrainConfig::default()).unwrap();
        let b = train(&rows, &y, &TrainConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn different_starts_reach_same_optimum() {
        let (x, y) = random_problem(9, 60, 12);
        let rows = BinaryRows::from_dense(&x, 12, "s");
        let cfg = |seed| TrainConfig {
            seed,
            init_scale: 1.0,
            ..TrainConfig::default()
        };
        let a = train(&rows, &y, &cfg(1)).unwrap();
        let b = train(&rows, &y, &cfg(2)).unwrap();
        assert!(a.fit.converged && b.fit.converged);
        let diff = a
            .weights
            .iter()
            .zip(&b.weights)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-4, "{diff}");
    }

    #[test]
    fn inert_column_does_not_change_predictions() {
        let (x, y) = random_problem(10, 30, 6);
        let padded: Vec<Vec<bool>> = x
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.insert(3, false);
                r
            })
            .collect();
        let a = train(&BinaryRows::from_dense(&x, 6, "a"), &y, &TrainConfig::default()).unwrap();
        let b = train(&BinaryRows::from_dense(&padded, 7, "b"), &y, &TrainConfig::default()).unwrap();
        let pa = predict_proba(&a, &BinaryRows::from_dense(&x, 6, "a")).unwrap();
        let pb = predict_proba(&b, &BinaryRows::from_dense(&padded, 7, "b")).unwrap();
        for (p, q) in pa.iter().zip(&pb) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn single_label_training_fails() {
        let rows = BinaryRows::from_dense(&[vec![true], vec![false]], 1, "s");
        assert!(train(&rows, &[true, true], &TrainConfig::default()).is_err());
    }

    #[test]
    fn iteration_budget_reported() {
        let (x, y) = random_problem(11, 40, 10);
        let rows = BinaryRows::from_dense(&x, 10, "s");
        let cfg = TrainConfig {
            max_iterations: 1,
            gradient_tolerance: 1e-12,
            ..TrainConfig::default()
        };
        let m = train(&rows, &y, &cfg).unwrap();
        assert!(!m.fit.converged);
        assert_eq!(m.fit.iterations, 1);
    }

    #[test]
    fn model_file_round_trip() {
        let (x, y) = random_problem(12, 20, 4);
        let rows = BinaryRows::from_dense(&x, 4, "abc");
        let m = train(&rows, &y, &TrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.csv");
        write_model(&m, &path, "test").unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.intercept, m.intercept);
        assert_eq!(back.feature_signature, "abc");
    }
}
