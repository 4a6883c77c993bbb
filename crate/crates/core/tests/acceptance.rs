//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eventpriv::ablation::{
    classify_decline, run_ablation, AblationConfig, AblationSchedule, DeclineCategory, DeclineThresholds,
    LogisticAttacker,
};
use eventpriv::classifier::{objective, objective_gradient, BinaryRows, LogisticModel, TrainConfig};
use eventpriv::cohort::{match_diag_counts, Strata};
use eventpriv::commands::cmd_audit;
use eventpriv::config::RunConfig;
use eventpriv::evaluation::{auc, cross_validate, make_splits, CvMode};
use eventpriv::event_model::{encode, ingest_events, EventFormat};
use eventpriv::scoring::{anova_f_score, chi2_score, score_all, spearman, ContingencyTable2x2, ScoreMetric};
use eventpriv::simulation::{generate_event_log, simulate, EventTemplates, PlantedConfig, SimMode, SimSpec};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type Design = (&'static str, DeclineCategory, fn(u64) -> SimSpec);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sim_spec(mode: SimMode, n: usize, n_features: usize, seed: u64) -> SimSpec {
    SimSpec {
        n_case: n,
        n_ctrl: n,
        n_features,
        mode,
        seed,
        ..SimSpec::default()
    }
}

fn cv_auc(spec: &SimSpec) -> Result<f64, String> {
    let d = simulate(spec).map_err(|e| e.to_string())?.dataset;
    let plan = make_splits(&d.labels, 10, spec.seed ^ 0x5eed, CvMode::TrainOneFold).map_err(|e| e.to_string())?;
    let attacker = LogisticAttacker::new(TrainConfig::default());
    let cv = cross_validate(&d, &plan, &attacker, 0.5).map_err(|e| e.to_string())?;
    Ok(cv.mean.auc)
}

fn criterion_1() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 1..=3 {
        let start = Instant::now();
        let shared = cv_auc(&sim_spec(SimMode::SharedP, 500, 1000, seed))?;
        let t_shared = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let independent = cv_auc(&sim_spec(SimMode::IndependentP, 500, 1000, seed))?;
        let t_independent = start.elapsed().as_secs_f64();
        ok &= (0.45..=0.55).contains(&shared) && independent >= 0.99 && t_shared <= 60.0 && t_independent <= 60.0;
        lines.push(format!(
            "seed {seed}: shared_p {shared:.4} ({t_shared:.2}s), independent_p {independent:.4} ({t_independent:.2}s)"
        ));
    }
    check(ok, lines.join("; "))
}

fn audit_simulation(spec: &SimSpec) -> Result<(DeclineCategory, Vec<f64>), String> {
    let d = simulate(spec).map_err(|e| e.to_string())?.dataset;
    let plan = make_splits(&d.labels, 10, spec.seed ^ 0xab1a, CvMode::TrainOneFold).map_err(|e| e.to_string())?;
    let report =
        run_ablation(&d, &AblationSchedule::default(), &plan, &AblationConfig::default()).map_err(|e| e.to_string())?;
    Ok((report.decline, report.steps.iter().map(|s| s.mean.auc).collect()))
}

fn planted(n_features: usize, unique: usize, shifted: usize, shift: f64, seed: u64) -> SimSpec {
    SimSpec {
        mode: SimMode::Planted,
        planted: PlantedConfig {
            n_unique_case_features: unique,
            n_shifted_features: shifted,
            shift,
            ..PlantedConfig::default()
        },
        ..sim_spec(SimMode::Planted, 1000, n_features, seed)
    }
}

fn criterion_2() -> Outcome {
    let designs: [Design; 3] = [
        ("few strong unique", DeclineCategory::Fast, |s| {
            planted(1300, 5, 0, 0.0, s)
        }),
        ("many moderate shifted", DeclineCategory::Progressive, |s| {
            planted(1300, 0, 1030, 0.06, s)
        }),
        ("broad strong shifted", DeclineCategory::Slow, |s| {
            planted(2500, 0, 2400, 0.12, s)
        }),
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for (name, expected, build) in designs {
        let mut got = Vec::new();
        for seed in 100..105 {
            let (category, curve) = audit_simulation(&build(seed))?;
            ok &= category == expected;
            got.push(format!(
                "{}(All {:.3}, k=400 {:.3}, k=1000 {:.3})",
                category.as_str(),
                curve[0],
                curve[9],
                curve[15]
            ));
        }
        lines.push(format!("{name} -> {}", got.join(" ")));
    }
    check(ok, lines.join("; "))
}

const TABLE_3: [(&str, [f64; 16]); 3] = [
    (
        "300",
        [
            0.676, 0.606, 0.591, 0.585, 0.582, 0.576, 0.565, 0.553, 0.542, 0.536, 0.530, 0.523, 0.518, 0.515, 0.512,
            0.507,
        ],
    ),
    (
        "626",
        [
            0.826, 0.809, 0.796, 0.788, 0.783, 0.780, 0.758, 0.730, 0.694, 0.672, 0.658, 0.648, 0.634, 0.618, 0.609,
            0.599,
        ],
    ),
    (
        "770",
        [
            0.993, 0.992, 0.991, 0.991, 0.991, 0.991, 0.990, 0.986, 0.980, 0.973, 0.966, 0.957, 0.952, 0.939, 0.928,
            0.917,
        ],
    ),
];

fn criterion_3() -> Outcome {
    let schedule = AblationSchedule::default();
    let expected = [
        DeclineCategory::Fast,
        DeclineCategory::Progressive,
        DeclineCategory::Slow,
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for ((code, row), want) in TABLE_3.iter().zip(expected) {
        let curve: Vec<(usize, f64)> = schedule.0.iter().copied().zip(row.iter().copied()).collect();
        let got = classify_decline(&curve, &schedule, &DeclineThresholds::default());
        ok &= got == want;
        lines.push(format!("{code} -> {}", got.as_str()));
    }
    check(ok, lines.join(", "))
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// N (ad - bc)^2 / (row and column marginal product); 0 when a marginal is 0.
fn chi2_closed_form(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let n = (a + b + c + d) as f64;
    let denom = ((a + b) * (c + d) * (a + c) * (b + d)) as f64;
    if denom == 0.0 {
        return 0.0;
    }
    let diff = a as f64 * d as f64 - b as f64 * c as f64;
    n * diff * diff / denom
}

/// Textbook one-way ANOVA over explicit 0/1 observations.
fn anova_brute(groups: [&[bool]; 2]) -> f64 {
    let values: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| g.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect())
        .collect();
    let n: usize = values.iter().map(Vec::len).sum();
    let grand = values.iter().flatten().sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in &values {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (mean - grand) * (mean - grand);
        ssw += g.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    }
    if ssw == 0.0 {
        return if ssb == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (ssb / 1.0) / (ssw / (n - 2) as f64)
}

fn auc_all_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_chi2, mut worst_f) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n_case = rng.gen_range(1..40usize);
        let n_ctrl = rng.gen_range(1..40usize);
        if n_case + n_ctrl < 3 {
            continue;
        }
        let p = rng.gen::<f64>();
        let cases: Vec<bool> = (0..n_case).map(|_| rng.gen_bool(p)).collect();
        let q = rng.gen::<f64>();
        let controls: Vec<bool> = (0..n_ctrl).map(|_| rng.gen_bool(q)).collect();
        let a = cases.iter().filter(|&&x| x).count() as u64;
        let c = controls.iter().filter(|&&x| x).count() as u64;
        let table = ContingencyTable2x2::from_groups(n_case as u64, a, n_ctrl as u64, c).map_err(|e| e.to_string())?;
        let oracle = chi2_closed_form(a, n_case as u64 - a, c, n_ctrl as u64 - c);
        worst_chi2 = worst_chi2.max(rel_err(chi2_score(&table), oracle));
        let f = anova_f_score(&cases, &controls).map_err(|e| e.to_string())?;
        let f_oracle = anova_brute([&cases, &controls]);
        worst_f = worst_f.max(if f.is_infinite() || f_oracle.is_infinite() {
            if f == f_oracle {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            rel_err(f, f_oracle)
        });
    }
    let mut worst_auc = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(2..=50usize);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse values so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8u8)) / 4.0).collect();
        let fast = auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((fast - auc_all_pairs(&scores, &labels)).abs());
    }
    check(
        worst_chi2 <= 1e-9 && worst_f <= 1e-9 && worst_auc <= 1e-12,
        format!("max rel err chi2 {worst_chi2:.2e}, anova F {worst_f:.2e}; max abs AUC diff {worst_auc:.2e}"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let n_rows = rng.gen_range(10..60);
        let n_cols = rng.gen_range(2..15);
        let dense: Vec<Vec<bool>> = (0..n_rows)
            .map(|_| (0..n_cols).map(|_| rng.gen_bool(0.3)).collect())
            .collect();
        let mut labels: Vec<bool> = (0..n_rows).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let rows = BinaryRows::from_dense(&dense, n_cols, "grad");
        let lambda = rng.gen_range(0.01..3.0);
        for _ in 0..20 {
            let mut model = LogisticModel::zero(n_cols, lambda, "grad");
            model.weights = (0..n_cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
            model.intercept = rng.gen_range(-1.0..1.0);
            let (_, grad) = objective_gradient(&model, &rows, &labels).map_err(|e| e.to_string())?;
            let h = 1e-5;
            for (j, &analytic) in grad.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    if j == n_cols {
                        m.intercept += delta;
                    } else {
                        m.weights[j] += delta;
                    }
                    objective(&m, &rows, &labels).unwrap()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
    }
    check(worst <= 1e-4, format!("max relative error {worst:.2e} over 100 points"))
}

fn criterion_6() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 1..=5 {
        let spec = SimSpec {
            mode: SimMode::Planted,
            // Strong planted features; the background carries no signal.
            planted: PlantedConfig {
                n_unique_case_features: 5,
                unique_p_low: 0.5,
                unique_p_high: 0.9,
                ..PlantedConfig::default()
            },
            ..sim_spec(SimMode::Planted, 500, 100, seed)
        };
        let (_, curve) = audit_simulation(&spec)?;
        let monotone = curve.windows(2).all(|w| w[1] <= w[0] + 0.02);
        ok &= curve[0] >= 0.95 && curve[1] <= 0.55 && monotone;
        lines.push(format!(
            "seed {seed}: k=0 {:.3}, k=10 {:.3}, monotone {monotone}",
            curve[0], curve[1]
        ));
    }
    check(ok, lines.join("; "))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let log_uniform = |rng: &mut ChaCha8Rng, hi: f64| (rng.gen_range(0.0..hi.ln())).exp().floor().max(1.0) as u32;
    let pool: Vec<u32> = (0..30_000).map(|_| log_uniform(&mut rng, 300.0)).collect();
    let target: Vec<u32> = (0..5_000)
        .map(|_| log_uniform(&mut rng, 120.0) + rng.gen_range(0..5))
        .collect();
    let m = match_diag_counts(&pool, &target, 5_000, &Strata::default(), 7).map_err(|e| e.to_string())?;
    check(
        m.tv_distance <= 0.02 && m.shortfall.is_empty(),
        format!(
            "tv distance {:.5}, {} selected, shortfall {:?}",
            m.tv_distance,
            m.selected.len(),
            m.shortfall
        ),
    )
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log = dir.path().join("events.csv");
    common::write_synthetic_log(&log, 8);
    let mut cfg = RunConfig::default();
    cfg.event_model.log = Some(log);
    cfg.cohort_builder.control_pool_size = 200;
    cfg.cli_reporting.seed = 2024;
    let run = |threads: usize, name: &str| -> Result<Vec<(std::path::PathBuf, Vec<u8>)>, String> {
        let out = dir.path().join(name);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        pool.install(|| cmd_audit(&cfg, &out, false))
            .map_err(|e| e.to_string())?;
        Ok(common::read_tree(&out))
    };
    let a = run(1, "t1")?;
    let b = run(4, "t4")?;
    let c = run(4, "t4_again")?;
    check(
        a == b && b == c && a.len() > 5,
        format!(
            "{} files; 1 vs 4 threads identical {}, rerun identical {}",
            a.len(),
            a == b,
            b == c
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 1..=3 {
        let d = simulate(&sim_spec(SimMode::IndependentP, 500, 1000, seed))
            .map_err(|e| e.to_string())?
            .dataset;
        let rows: Vec<usize> = (0..d.n_patients()).collect();
        let scores = score_all(&d, &rows, ScoreMetric::Chi2).map_err(|e| e.to_string())?;
        let mut chi2_ranks = vec![0; scores.len()];
        let mut f_ranks = vec![0; scores.len()];
        for s in &scores {
            chi2_ranks[s.column] = s.rank(ScoreMetric::Chi2);
            f_ranks[s.column] = s.rank(ScoreMetric::AnovaF);
        }
        let rho = spearman(&chi2_ranks, &f_ranks);
        ok &= rho >= 0.9;
        lines.push(format!("seed {seed}: rho {rho:.5}"));
    }
    check(ok, lines.join("; "))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut matched = 0;
    for i in 0..10 {
        let n_features = rng.gen_range(1..120);
        let mode = [SimMode::SharedP, SimMode::IndependentP, SimMode::Planted][i % 3];
        let unique = rng.gen_range(0..=n_features.min(5));
        let spec = SimSpec {
            n_case: rng.gen_range(10..80),
            n_ctrl: rng.gen_range(10..80),
            n_features,
            mode,
            planted: PlantedConfig {
                n_unique_case_features: unique,
                n_shifted_features: rng.gen_range(0..=(n_features - unique)),
                shift: rng.gen_range(0.0..1.0),
                ..PlantedConfig::default()
            },
            seed: rng.gen(),
            ..SimSpec::default()
        };
        let d = simulate(&spec).map_err(|e| e.to_string())?.dataset;
        let templates = EventTemplates::synthetic(n_features);
        let path = dir.path().join(format!("log{i}.csv"));
        generate_event_log(&d, &templates, &path, "round trip").map_err(|e| e.to_string())?;
        let ingested = ingest_events(&path, &EventFormat::default()).map_err(|e| e.to_string())?;
        let m =
            encode(&ingested.records, std::slice::from_ref(&templates.case_diagnosis)).map_err(|e| e.to_string())?;
        if m == d.matrix && ingested.skipped == 0 {
            matched += 1;
        }
    }
    check(matched == 10, format!("{matched}/10 specs reproduced exactly"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("simulation endpoints", criterion_1),
        ("planted decline categories", criterion_2),
        ("decline classification on reference rows", criterion_3),
        ("oracle equivalence", criterion_4),
        ("gradient check", criterion_5),
        ("ablation soundness", criterion_6),
        ("matching fidelity", criterion_7),
        ("determinism", criterion_8),
        ("score-metric agreement", criterion_9),
        ("event log round trip", criterion_10),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion_{}", i + 1);
        if filter
            .as_ref()
            .is_some_and(|f| !id.contains(f.as_str()) && !name.contains(f.as_str()))
        {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
