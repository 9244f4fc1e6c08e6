//! Acceptance gate. Each test prints one `PASS`/`FAIL criterion N` line with
//! the measured values, then asserts.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, ChiSquared, Distribution};
use rayon::prelude::*;

use panova::average::{stacking_objective, stacking_weights};
use panova::decompose::{box_gh, quadratic_forms};
use panova::experiments::{run_study, ScenarioSpec, StudyKind};
use panova::vartest::{asl_test, read_z_samples};
use panova::{two_term_decompose, ComponentPredictive, FactorTree, PredictiveMixture, TreeNode};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn stored_tree(name: &str) -> FactorTree {
    serde_json::from_reader(BufReader::new(File::open(fixture(name)).unwrap())).unwrap()
}

fn report(n: u32, ok: bool, detail: String) {
    // Written to the raw handle so the line shows even when output is captured.
    let _ = writeln!(
        std::io::stderr().lock(),
        "{} criterion {n}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n}: {detail}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn simplex(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|r| r / s).collect()
}

fn random_node(rng: &mut ChaCha8Rng, shape: &[usize]) -> TreeNode {
    match shape.split_first() {
        None => TreeNode::Leaf(
            ComponentPredictive::gaussian(
                rng.random_range(-100.0..100.0),
                rng.random_range(0.0..50.0),
            )
            .unwrap(),
        ),
        Some((&m, rest)) => {
            let w = simplex(rng, m);
            TreeNode::Branch(w.into_iter().map(|w| (w, random_node(rng, rest))).collect())
        }
    }
}

#[test]
fn criterion_1_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cases = 1200;
    let mut worst_mix = 0.0f64;
    for _ in 0..cases {
        let q = rng.random_range(1..=12);
        let w = simplex(&mut rng, q);
        let comps = (0..q)
            .map(|_| {
                ComponentPredictive::gaussian(
                    rng.random_range(-1e3..1e3),
                    rng.random_range(0.0..1e2),
                )
                .unwrap()
            })
            .collect();
        let m = PredictiveMixture::new(w, comps).unwrap();
        let (within, between) = two_term_decompose(&m);
        worst_mix = worst_mix.max(rel_err(within + between, m.variance()));
    }
    let (mut worst_tower, mut worst_clause, mut worst_forms) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..cases {
        let k = 1 + i % 4;
        let shape: Vec<usize> = (0..k).map(|_| rng.random_range(1..=4)).collect();
        let tree = FactorTree::from_root_unnamed(random_node(&mut rng, &shape)).unwrap();
        let r = tree.decompose();
        let flat = tree.flatten();
        worst_tower = worst_tower.max(rel_err(r.values().iter().sum(), flat.variance()));
        let (_, between) = two_term_decompose(&flat);
        worst_clause = worst_clause.max(rel_err(r.between_total(), between));
        for (a, b) in quadratic_forms(&tree).term_values().iter().zip(r.values()) {
            worst_forms = worst_forms.max(rel_err(*a, b));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst_mix <= 1e-9
        && worst_tower <= 1e-9
        && worst_clause <= 1e-9
        && worst_forms <= 1e-9
        && secs < 60.0;
    report(
        1,
        ok,
        format!(
            "{cases} mixtures + {cases} trees (K 1-4): max rel err total-variance {worst_mix:.1e}, tower {worst_tower:.1e}, between {worst_clause:.1e}, quadratic forms {worst_forms:.1e}; {secs:.1}s"
        ),
    );
}

/// Rounds to the number of decimals shown in `printed` and compares the text.
fn matches_printed(value: f64, printed: &str) -> bool {
    let decimals = printed.split('.').nth(1).map_or(0, str::len);
    format!("{value:.decimals$}") == printed
}

#[test]
fn criterion_2_arithmetic_regressions() {
    let mut failures = Vec::new();
    let mut check = |label: &str, value: f64, printed: &str| {
        if !matches_printed(value, printed) {
            failures.push(format!("{label}: got {value}, printed {printed}"));
        }
    };

    let r = stored_tree("shrinkage_stack_tree.json").decompose();
    let v = r.values();
    check("(a) between", v[0], "0.58");
    check("(a) within", v[1], "2.39");
    check("(a) total", r.total, "2.97");
    check("(a) ratio", v[0] / r.total, "0.195");

    let r = stored_tree("challenger_tree.json").decompose();
    let (v, p) = (r.values(), r.proportions());
    check("(b) links", v[0], "0.0017");
    check("(b) models", v[1], "0.0996");
    check("(b) predictions", v[2], "0.01469");
    check("(b) total", r.total, "0.11599");
    check("(b) predictions share", p[2], "0.127");
    check("(b) models share", p[1], "0.86");
    check("(b) links share", p[0], "0.0147");

    let r = stored_tree("draper_oil_tree.json").decompose();
    let (v, p) = (r.values(), r.proportions());
    check("(c) scenarios", v[0], "354");
    check("(c) models", v[1], "363");
    check("(c) predictions", v[2], "178");
    check("(c) total", r.total, "895");
    check("(c) scenarios share", p[0], "0.396");

    let r = stored_tree("superconductivity_full_tree.json").decompose();
    check("(d) full within", r.values()[1], "135.85");
    check("(d) full between", r.values()[0], "262.23");
    check("(d) full total", r.total, "398.08");
    check("(d) full share", r.proportions()[0], "0.66");
    let r = stored_tree("superconductivity_small_tree.json").decompose();
    check("(d) small within", r.values()[1], "166.57");
    check("(d) small between", r.values()[0], "7.16");
    check("(d) small total", r.total, "173.73");
    check("(d) small share", r.proportions()[0], "0.041");

    for (file, printed) in [
        ("z_shrinkage.txt", "0.195"),
        ("z_superconductivity.txt", "0.66"),
        ("z_links.txt", "0.041"),
    ] {
        let z = read_z_samples(BufReader::new(File::open(fixture(file)).unwrap())).unwrap();
        check(file, asl_test(&z, 0.05, 1000, 1).unwrap().z_bar, printed);
    }
    report(
        2,
        failures.is_empty(),
        if failures.is_empty() {
            "(a)-(d) and stored z-file means reproduce the printed values".into()
        } else {
            failures.join("; ")
        },
    );
}

#[test]
fn criterion_3_box_approximation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let draws = 1_000_000usize;
    let chi1 = ChiSquared::new(1.0).unwrap();
    let mut worst_identity = 0.0f64;
    let mut worst_z = 0.0f64;
    for set in 0..5 {
        let m = rng.random_range(2..=8);
        let l: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
        let b = box_gh(&l).unwrap();
        let s1: f64 = l.iter().sum();
        let s2: f64 = l.iter().map(|x| x * x).sum();
        worst_identity = worst_identity
            .max(rel_err(b.g * b.h, s1))
            .max(rel_err(2.0 * b.g * b.g * b.h, 2.0 * s2));

        let mut mc = ChaCha8Rng::seed_from_u64(9000 + set);
        let x: Vec<f64> = (0..draws)
            .map(|_| l.iter().map(|li| li * chi1.sample(&mut mc)).sum())
            .collect();
        let n = draws as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let se_mean = (var / n).sqrt();
        let se_var = ((m4 - var * var) / n).sqrt();
        worst_z = worst_z
            .max((b.mean() - mean).abs() / se_mean)
            .max((b.variance() - var).abs() / se_var);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        worst_identity < 1e-12 && worst_z < 3.0 && secs < 120.0,
        format!(
            "5 eigenvalue sets: identity rel err {worst_identity:.1e}; worst Monte Carlo gap {worst_z:.2} SE (10^6 draws each); {secs:.1}s"
        ),
    );
}

#[test]
fn criterion_4_test_calibration() {
    let start = Instant::now();
    let (trials, b, j) = (500usize, 200usize, 10_000usize);
    let tau = 0.2;
    // Beta(4, 16) has mean exactly 0.2.
    let beta = Beta::new(4.0, 16.0).unwrap();
    let rejected = (0..trials)
        .into_par_iter()
        .filter(|&t| {
            let mut rng = ChaCha8Rng::seed_from_u64(40_000 + t as u64);
            let z: Vec<f64> = (0..b).map(|_| beta.sample(&mut rng)).collect();
            asl_test(&z, tau, j, 70_000 + t as u64).unwrap().asl < 0.05
        })
        .count();
    let rate = rejected as f64 / trials as f64;

    let taus: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let mut monotone = true;
    for file in ["z_shrinkage.txt", "z_superconductivity.txt", "z_links.txt"] {
        let z = read_z_samples(BufReader::new(File::open(fixture(file)).unwrap())).unwrap();
        let asl: Vec<f64> = taus
            .iter()
            .map(|&t| asl_test(&z, t, j, 5).unwrap().asl)
            .collect();
        monotone &= asl.windows(2).all(|w| w[1] <= w[0]);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        (0.03..=0.08).contains(&rate) && monotone && secs < 600.0,
        format!(
            "rejection rate {rate:.3} over {trials} trials at tau = {tau} (B = {b}, J = {j}); ASL monotone on stored z-files: {monotone}; {secs:.1}s"
        ),
    );
}

#[test]
fn criterion_5_shrinkage_bands() {
    let start = Instant::now();
    let mut spec = ScenarioSpec::new(StudyKind::Shrinkage, 2024);
    spec.replicates = 100;
    spec.pipeline.test = false;
    spec.pipeline.eval_draws = 10_000;
    let out = run_study(&spec).unwrap();
    let s = &out.summary;
    let share = s["lasso_enet_share_at_least_0.9"].as_f64().unwrap();
    let coverage = s["median_stack_coverage"].as_f64().unwrap();
    let proportion = s["median_between_proportion"].as_f64().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let bands = [
        share >= 0.8,
        coverage >= 0.9,
        (0.05..=0.45).contains(&proportion),
    ];
    report(
        5,
        bands.iter().all(|b| *b) && secs < 1800.0,
        format!(
            "100 replicates: LASSO+EN weight >= 0.9 in {:.0}% (need >= 80%) [{}]; median stack coverage {coverage:.3} (need >= 0.9) [{}]; median between proportion {proportion:.3} (need 0.05-0.45) [{}]; {secs:.0}s",
            share * 100.0,
            if bands[0] { "ok" } else { "miss" },
            if bands[1] { "ok" } else { "miss" },
            if bands[2] { "ok" } else { "miss" },
        ),
    );
}

#[test]
fn criterion_6_sample_size_sweep() {
    let start = Instant::now();
    let mut spec = ScenarioSpec::new(StudyKind::NSweep, 7);
    spec.replicates = 50;
    spec.pipeline.test = false;
    spec.generator.n_list = Some(vec![20, 50, 100]);
    let out = run_study(&spec).unwrap();
    let median = out.summary["median"].as_array().unwrap();
    let field = |row: &serde_json::Value, key: &str, i: usize| row[key][i].as_f64().unwrap();
    let models: Vec<f64> = median.iter().map(|r| field(r, "proportions", 1)).collect();
    let predictions: Vec<f64> = median.iter().map(|r| field(r, "proportions", 2)).collect();
    let totals: Vec<f64> = median
        .iter()
        .map(|r| r["total"].as_f64().unwrap())
        .collect();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let secs = start.elapsed().as_secs_f64();
    let ok = decreasing(&models)
        && predictions.iter().all(|p| (0.4..=0.9).contains(p))
        && decreasing(&totals)
        && secs < 1800.0;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(" / ")
    };
    report(
        6,
        ok,
        format!(
            "n = 20/50/100, 50 replicates: models share {}; predictions share {}; total {}; {secs:.1}s",
            fmt(&models),
            fmt(&predictions),
            fmt(&totals)
        ),
    );
}

/// Minimizes the stacking objective over `w₁ ∈ [0, 1]` by a grid followed by
/// golden-section refinement inside the best cell.
fn grid_oracle(p: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let f = |a: f64| stacking_objective(p, y, &[a, 1.0 - a]);
    let cells = 2000;
    let best = (0..=cells)
        .map(|i| i as f64 / cells as f64)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap();
    let (mut lo, mut hi) = (
        (best - 1.0 / cells as f64).max(0.0),
        (best + 1.0 / cells as f64).min(1.0),
    );
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let (c, d) = (hi - r * (hi - lo), lo + r * (hi - lo));
        if f(c) < f(d) {
            hi = d;
        } else {
            lo = c;
        }
    }
    f(best).min(f((lo + hi) / 2.0))
}

#[test]
fn criterion_7_stacking_qp() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst_gap = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(10..60);
        let y = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let s = [rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)];
        let bias = rng.random_range(-1.0..1.0);
        let p = DMatrix::from_fn(n, 2, |i, j| {
            y[i] + bias * j as f64 + s[j] * rng.random_range(-1.0..1.0)
        });
        let w = stacking_weights(&p, &y).unwrap().weights;
        let gap = stacking_objective(&p, &y, &w) - grid_oracle(&p, &y);
        worst_gap = worst_gap.max(gap);
    }
    let mut worse_than_vertex = 0;
    for _ in 0..200 {
        let (n, q) = (rng.random_range(15..80), rng.random_range(1..=10));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let p = DMatrix::from_fn(n, q, |i, _| {
            y[i] * rng.random_range(0.0..1.5) + rng.random_range(-2.0..2.0)
        });
        let w = stacking_weights(&p, &y).unwrap().weights;
        let obj = stacking_objective(&p, &y, &w);
        let best_vertex = (0..q)
            .map(|j| {
                let mut e = vec![0.0; q];
                e[j] = 1.0;
                stacking_objective(&p, &y, &e)
            })
            .fold(f64::INFINITY, f64::min);
        if obj > best_vertex * (1.0 + 1e-12) {
            worse_than_vertex += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        7,
        worst_gap <= 1e-8 && worse_than_vertex == 0 && secs < 60.0,
        format!(
            "200 two-model instances: worst excess over grid oracle {worst_gap:.1e}; 200 instances with q <= 10: {worse_than_vertex} worse than the best single model; {secs:.1}s"
        ),
    );
}

fn csv_files(out: &panova::experiments::StudyOutput) -> Vec<(String, String)> {
    out.files
        .iter()
        .filter(|(n, _)| n.ends_with(".csv"))
        .cloned()
        .collect()
}

#[test]
fn criterion_8_determinism() {
    let start = Instant::now();
    let external = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/external");

    // Small variable counts keep the 2^p subset grids cheap; every code path
    // including the bootstrap tests still runs.
    let beta = vec![0.75, 0.25, -0.3, 0.5];
    let mut grid = ScenarioSpec::new(StudyKind::BinomialGrid, 31);
    grid.generator.n = Some(40);
    grid.generator.beta = Some(beta.clone());
    let mut sweep = ScenarioSpec::new(StudyKind::NSweep, 43);
    sweep.replicates = 5;
    sweep.generator.n_list = Some(vec![20, 50]);
    sweep.generator.beta = Some(beta);
    let mut shrink = ScenarioSpec::new(StudyKind::Shrinkage, 2024);
    shrink.pipeline.b = 50;
    shrink.pipeline.eval_draws = 10_000;
    let mut ext = ScenarioSpec::new(StudyKind::ExternalStacking, 5);
    ext.inputs.data = Some(external.join("data.csv"));
    ext.inputs.response = Some("y".into());
    ext.inputs.oof_predictions = Some(external.join("oof.csv"));
    ext.inputs.heldout = Some(external.join("heldout.csv"));
    ext.inputs.test_predictions = Some(external.join("test.csv"));

    let pool = |t: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .unwrap()
    };
    let mut differing = Vec::new();
    let mut compared = 0;
    for spec in [&grid, &sweep, &shrink, &ext] {
        let a = pool(1).install(|| run_study(spec)).unwrap();
        let b = pool(3).install(|| run_study(spec)).unwrap();
        let (fa, fb) = (csv_files(&a), csv_files(&b));
        compared += fa.len();
        if fa.is_empty() || fa != fb {
            differing.push(format!("{:?}", spec.kind().unwrap()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        8,
        differing.is_empty(),
        format!(
            "4 studies run twice (1 and 3 worker threads): {compared} CSV files compared, differing studies: {:?}; {secs:.1}s",
            differing
        ),
    );
}
