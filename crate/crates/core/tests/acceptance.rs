//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use trustkit_core::conformal::{calibrate, ConformalCalibrator, PredictionSet};
use trustkit_core::data::{gen_ind_scenario, ScenarioConfig, SplitRatios};
use trustkit_core::numerics::{apply_spectral_normalization, dot, spearman, Rng};
use trustkit_core::pipeline::{
    run_coverage_experiment, run_eat_experiment, simulate_ood, train_head, CoverageExperiment, CoverageResult,
    EatExperiment, ModelConfig, OodExperiment,
};
use trustkit_core::sngp::{decode_checkpoint, encode_checkpoint, load_checkpoint, RffProjection};
use trustkit_core::trust::{
    breakdown, fairness_gap, ood_score_probability, ood_score_uncertainty, FairnessMetric, GroupField, OodScoreKind,
    PatientRecord, ThresholdPolicy, DEFAULT_DELTA, DEFAULT_MIN_GROUP,
};

const ALPHAS: [f64; 3] = [0.1, 0.05, 0.01];
const N_SEEDS: usize = 20;
const N_RESPLITS: usize = 100;
const CAL_SIZE: usize = 100;
const COVERAGE_SLACK: f64 = 0.01;

const SN_LAYERS: usize = 50;
const SN_TOL: f64 = 1e-3;
const SN_POWER_ITERS: usize = 100;

const RFF_PAIRS: usize = 50;
const RFF_MAE_MAX: f64 = 0.05;

const PROBE_POINTS: usize = 20;
const PROBE_STEP: f64 = 0.25;
const PROBE_SPEARMAN_MIN: f64 = 0.9;

const EAT_FOUND_MIN: usize = 19;

const OOD_ALPHA: f64 = 0.05;
const OOD_RATIOS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
const OOD_SEEDS: usize = 10;
const UNGATED_MAX: f64 = 0.60;
const GATED_MIN: f64 = 0.93;
const CRC_BAND: f64 = 0.02;

/// Desk-scale head used by the training-based criteria.
fn model() -> ModelConfig {
    let mut m = ModelConfig {
        power_iters: 30,
        rff_dim: 512,
        ..ModelConfig::default()
    };
    m.train.epochs = 10;
    m
}

fn scenario(n_patients: usize, tiles_per_slide: usize) -> ScenarioConfig {
    ScenarioConfig {
        n_patients,
        tiles_per_slide,
        ..ScenarioConfig::default()
    }
}

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn coverage_run() -> CoverageResult {
    let exp = CoverageExperiment {
        scenario: scenario(600, 4),
        model: model(),
        ratios: SplitRatios {
            train: 2.0 / 3.0,
            val: 0.0,
            caltest: 1.0 / 3.0,
        },
        n_seeds: N_SEEDS,
        n_resplits: N_RESPLITS,
        cal_size: CAL_SIZE,
        alphas: ALPHAS.to_vec(),
    };
    run_coverage_experiment(&exp).expect("coverage experiment")
}

fn coverage_guarantee(result: &CoverageResult) -> Check {
    let upper = 1.0 / (CAL_SIZE as f64 + 1.0);
    let mut pass = true;
    let mut parts = Vec::new();
    for s in &result.summaries {
        let lo = 1.0 - s.alpha - COVERAGE_SLACK;
        let hi = 1.0 - s.alpha + upper + COVERAGE_SLACK;
        pass &= (lo..=hi).contains(&s.mean_coverage) && s.n_runs == N_SEEDS * N_RESPLITS;
        parts.push(format!("a={} cov={:.4} in [{lo:.4},{hi:.4}]", s.alpha, s.mean_coverage));
    }
    check(pass, parts.join("; "))
}

fn spectral_normalization() -> Check {
    let mut rng = Rng::new(2);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..SN_LAYERS {
        let rows = 2 + rng.below(63);
        let cols = 2 + rng.below(63);
        let scale = rng.uniform_range(0.05, 3.0);
        let cap = rng.uniform_range(0.5, 2.0);
        let w = common::random_matrix(rows, cols, scale, &mut rng);
        let mut sn_rng = Rng::with_stream(i as u64, 3);
        let normalized = apply_spectral_normalization(&w, cap, SN_POWER_ITERS, &mut sn_rng).expect("normalize");
        let sigma = common::singular_values(&normalized)[0];
        worst = worst.max(sigma - cap);
    }
    check(
        worst <= SN_TOL,
        format!("max(sigma - c) = {worst:.3e} over {SN_LAYERS} layers"),
    )
}

fn rff_mae(dim: usize, seed: u64) -> f64 {
    let input = 8;
    let mut rng = Rng::new(seed);
    let rff = RffProjection::new(input, dim, &mut Rng::with_stream(seed, 5)).expect("rff");
    let mut total = 0.0;
    for _ in 0..RFF_PAIRS {
        let x: Vec<f64> = (0..input).map(|_| 0.4 * rng.normal()).collect();
        let y: Vec<f64> = (0..input).map(|_| 0.4 * rng.normal()).collect();
        let approx = dot(&rff.transform(&x).unwrap(), &rff.transform(&y).unwrap());
        total += (approx - common::rbf_kernel(&x, &y)).abs();
    }
    total / RFF_PAIRS as f64
}

fn rff_fidelity() -> Check {
    let at_2048 = rff_mae(2048, 3);
    let at_256 = rff_mae(256, 3);
    let at_4096 = rff_mae(4096, 3);
    check(
        at_2048 < RFF_MAE_MAX && at_4096 < at_256,
        format!("MAE(2048)={at_2048:.4} MAE(256)={at_256:.4} MAE(4096)={at_4096:.4}"),
    )
}

fn distance_awareness() -> Check {
    let data = gen_ind_scenario(&scenario(200, 4)).expect("scenario");
    let (head, _) = train_head(&data, &model(), 4).expect("train");
    let centroid = data.embeddings.column_means();
    let direction = Rng::new(4).unit_vector(centroid.len());
    let mut distance = Vec::new();
    let mut uncertainty = Vec::new();
    for k in 0..PROBE_POINTS {
        let t = PROBE_STEP * k as f64;
        let x: Vec<f64> = centroid.iter().zip(&direction).map(|(c, d)| c + t * d).collect();
        distance.push(t);
        uncertainty.push(head.predict(&x).expect("predict").uncertainty);
    }
    let rho = spearman(&distance, &uncertainty);
    check(rho > PROBE_SPEARMAN_MIN, format!("spearman = {rho:.4}"))
}

fn eat_direction() -> Check {
    let exp = EatExperiment::new(scenario(120, 8), model(), N_SEEDS);
    let r = run_eat_experiment(&exp).expect("eat experiment");
    check(
        r.mean_accuracy_with >= r.mean_accuracy_without && r.n_found >= EAT_FOUND_MIN,
        format!(
            "accuracy {:.4} with vs {:.4} without; mixed blob found in {}/{}",
            r.mean_accuracy_with, r.mean_accuracy_without, r.n_found, N_SEEDS
        ),
    )
}

fn ood_gating() -> Check {
    let exp = OodExperiment {
        scenario: scenario(700, 4),
        model: model(),
        ratios: SplitRatios {
            train: 4.0 / 7.0,
            val: 1.0 / 7.0,
            caltest: 2.0 / 7.0,
        },
        ood_ratios: OOD_RATIOS.to_vec(),
        alpha: OOD_ALPHA,
        n_seeds: OOD_SEEDS,
        n_resplits: N_RESPLITS,
        cal_size: CAL_SIZE,
        score_kind: OodScoreKind::Uncertainty,
        delta: DEFAULT_DELTA,
        gate_policy: ThresholdPolicy::TargetTpr(1.0),
        n_tune_ood: 100,
    };
    let r = simulate_ood(&exp).expect("ood simulation");
    let one_to_one = r.summaries.iter().find(|s| s.ratio == 1.0).expect("1:1 ratio");
    let crc_ok = r
        .summaries
        .iter()
        .all(|s| (s.gated_crc_coverage - (1.0 - OOD_ALPHA)).abs() <= CRC_BAND);
    let monotone = r.summaries.windows(2).all(|w| w[1].rho_hat >= w[0].rho_hat);
    let crc: Vec<String> = r
        .summaries
        .iter()
        .map(|s| format!("{}:{:.4}/{:.4}", s.ratio, s.gated_crc_coverage, s.rho_hat))
        .collect();
    check(
        one_to_one.ungated_coverage < UNGATED_MAX && one_to_one.gated_coverage >= GATED_MIN && crc_ok && monotone,
        format!(
            "1:1 ungated={:.4} gated={:.4}; crc coverage/rho by ratio {}",
            one_to_one.ungated_coverage,
            one_to_one.gated_coverage,
            crc.join(" ")
        ),
    )
}

fn da_monotone(result: &CoverageResult) -> Check {
    let rates: Vec<Option<f64>> = result.summaries.iter().map(|s| s.mean_da_error_rate).collect();
    let pass = rates.iter().all(Option::is_some) && rates.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = result
        .summaries
        .iter()
        .map(|s| {
            format!(
                "a={} da={:?}",
                s.alpha,
                s.mean_da_error_rate.map(|v| (v * 1e4).round() / 1e4)
            )
        })
        .collect();
    check(pass, shown.join("; "))
}

fn calibrator_with(q_hat: f64) -> ConformalCalibrator {
    let c = ConformalCalibrator::from_scores(vec![q_hat; 9], 0.5).unwrap();
    assert_eq!(c.q_hat(), q_hat);
    c
}

fn record(id: &str, label: Option<usize>, set: &[usize], sex: &str) -> PatientRecord {
    PatientRecord {
        patient_id: id.into(),
        label,
        sex: sex.into(),
        race_group: "A".into(),
        slide_probs: BTreeMap::new(),
        probs: vec![0.5, 0.5],
        score_probability: 0.0,
        score_uncertainty: 0.0,
        set: Some(PredictionSet::new(set.to_vec())),
    }
}

fn exact_oracles() -> Check {
    let mut failures: Vec<String> = Vec::new();
    let mut expect = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    let nine: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let labels = vec![0usize; 9];
    let probs: Vec<[f64; 2]> = nine.iter().map(|s| [1.0 - s, *s]).collect();
    for (alpha, milli) in [(0.1, 100), (0.05, 50), (0.5, 500), (0.3, 300)] {
        let q = calibrate(&probs, &labels, alpha).unwrap().q_hat();
        expect(q == common::quantile_oracle(&nine, milli), "quantile on nine scores");
    }
    expect(
        calibrate(&probs, &labels, 0.1).unwrap().q_hat() == 0.9,
        "nine scores at 0.1",
    );
    expect(
        calibrate(&probs, &labels, 0.05).unwrap().q_hat() == 1.0,
        "nine scores at 0.05",
    );
    let zeros = vec![0.0; 7];
    for (alpha, milli) in [(0.13, 130), (0.3, 300), (0.9, 900)] {
        let q = ConformalCalibrator::from_scores(zeros.clone(), alpha).unwrap().q_hat();
        expect(
            q == 0.0 && q == common::quantile_oracle(&zeros, milli),
            "all-zero scores",
        );
    }
    let mut rng = Rng::new(8);
    for _ in 0..200 {
        let n = 1 + rng.below(40);
        let scores: Vec<f64> = (0..n).map(|_| (rng.below(20) as f64) / 20.0).collect();
        let milli = 1 + rng.below(998) as u64;
        let q = ConformalCalibrator::from_scores(scores.clone(), milli as f64 / 1000.0)
            .unwrap()
            .q_hat();
        expect(q == common::quantile_oracle(&scores, milli), "random quantile");
    }

    for (p, q, want) in [
        ([0.8, 0.2], 0.5, vec![0]),
        ([0.8, 0.2], 1.0, vec![0, 1]),
        ([0.6, 0.4], 0.7, vec![0, 1]),
    ] {
        let got = calibrator_with(q).predict_set(&p);
        expect(
            got.labels() == want && got.labels() == common::set_oracle(&p, q),
            "prediction set",
        );
    }
    for _ in 0..200 {
        let k = 2 + rng.below(4);
        let raw: Vec<f64> = (0..k).map(|_| (1 + rng.below(10)) as f64).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let q = (rng.below(11) as f64) / 10.0;
        let got = calibrator_with(q).predict_set(&p);
        expect(got.labels() == common::set_oracle(&p, q), "random prediction set");
    }

    let cohort = [
        (vec![0], Some(0)),
        (vec![0], Some(1)),
        (vec![0, 1], Some(1)),
        (vec![], Some(0)),
        (vec![1], None),
    ];
    let recs: Vec<PatientRecord> = cohort
        .iter()
        .enumerate()
        .map(|(i, (s, y))| record(&i.to_string(), *y, s, "F"))
        .collect();
    let c = breakdown(&recs).unwrap();
    let o = common::breakdown_oracle(&cohort);
    expect(
        (c.single_correct, c.single_incorrect, c.abstention, c.empty) == o && o == (1, 2, 1, 1),
        "breakdown of five",
    );
    let full: Vec<PatientRecord> = (0..4)
        .map(|i| record(&i.to_string(), Some(i % 2), &[0, 1], "F"))
        .collect();
    expect(breakdown(&full).unwrap().abstention == 4, "all full sets");

    for accs in [vec![18, 18], vec![18, 16], vec![18, 17, 14]] {
        let mut recs = Vec::new();
        let mut values = Vec::new();
        for (g, &hits) in accs.iter().enumerate() {
            let group = format!("G{g}");
            for i in 0..20 {
                let correct = i < hits;
                let mut r = record(&format!("{group}-{i}"), Some(0), &[0], &group);
                r.probs = if correct { vec![0.9, 0.1] } else { vec![0.1, 0.9] };
                recs.push(r);
                values.push((group.clone(), if correct { 1.0 } else { 0.0 }));
            }
        }
        let gap = fairness_gap(&recs, FairnessMetric::Accuracy, GroupField::Sex, DEFAULT_MIN_GROUP)
            .unwrap()
            .gap;
        expect(gap == common::gap_oracle(&values, DEFAULT_MIN_GROUP), "accuracy gap");
    }

    let two = vec![vec![0.9, 0.1], vec![0.3, 0.7]];
    expect(
        ood_score_probability(&two).unwrap() == common::probability_score_oracle(&two),
        "probability score of two tiles",
    );
    let ones = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    expect(ood_score_probability(&ones).unwrap() == 0.0, "certain tiles");
    let uniform = vec![vec![0.5, 0.5]; 3];
    expect(ood_score_probability(&uniform).unwrap() == 0.5, "uniform tiles");
    expect(
        ood_score_uncertainty(&[0.1, 0.2, 0.9], 2).unwrap() == common::uncertainty_score_oracle(&[0.1, 0.2, 0.9], 2),
        "uncertainty score with delta 2",
    );
    for _ in 0..200 {
        let n = 1 + rng.below(30);
        let k = 2 + rng.below(3);
        let tiles: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
                let t: f64 = raw.iter().sum();
                raw.iter().map(|v| v / t).collect()
            })
            .collect();
        expect(
            ood_score_probability(&tiles).unwrap() == common::probability_score_oracle(&tiles),
            "random probability score",
        );
        let u: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let delta = 1 + rng.below(40);
        expect(
            ood_score_uncertainty(&u, delta).unwrap() == common::uncertainty_score_oracle(&u, delta),
            "random uncertainty score",
        );
    }

    failures.dedup();
    let n = failures.len();
    check(
        n == 0,
        if n == 0 {
            "all fixtures match".to_string()
        } else {
            failures.join(", ")
        },
    )
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

const CLI_CONFIG: &str = "\
[scenario]
n_patients = 150
tiles_per_slide = 4

[model]
rff_dim = 256
power_iters = 20

[model.train]
epochs = 3

[split]
n_resplits = 5
cal_size = 20

[ood]
n_seeds = 2
n_resplits = 10
cal_size = 20
n_tune_ood = 20
";

fn run_all_commands(root: &Path) -> anyhow::Result<()> {
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, CLI_CONFIG)?;
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let c = cfg.to_string_lossy().into_owned();
    let runs: Vec<Vec<String>> = vec![
        vec!["gen".into(), "ind".into(), "--out".into(), p("ind")],
        vec!["gen".into(), "eat".into(), "--out".into(), p("eat")],
        vec![
            "gen".into(),
            "ood".into(),
            "--ood-ratio".into(),
            "0.5".into(),
            "--out".into(),
            p("ood"),
        ],
        vec!["gen".into(), "external".into(), "--out".into(), p("ext")],
        vec!["train".into(), p("ind"), "--out".into(), p("model/head.sngp")],
        vec![
            "eat".into(),
            p("ind"),
            "--checkpoint".into(),
            p("model/head.sngp"),
            "--out".into(),
            p("eat-filter"),
        ],
        vec![
            "calibrate".into(),
            p("ind"),
            "--checkpoint".into(),
            p("model/head.sngp"),
            "--filter".into(),
            p("eat-filter/filter.json"),
            "--out".into(),
            p("cal.json"),
        ],
        vec![
            "evaluate".into(),
            p("ood"),
            "--checkpoint".into(),
            p("model/head.sngp"),
            "--calibrator".into(),
            p("cal.json"),
            "--out".into(),
            p("eval"),
        ],
        vec![
            "simulate-ood".into(),
            "--ratios".into(),
            "0,0.5".into(),
            "--out".into(),
            p("sim"),
        ],
    ];
    for mut args in runs {
        args.extend(["--config".into(), c.clone(), "--seed".into(), "11".into()]);
        args.insert(0, "trustkit".into());
        trustkit_cli::run(&args)?;
    }
    Ok(())
}

fn determinism() -> Check {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = run_all_commands(a.path()).and_then(|_| run_all_commands(b.path())) {
        return check(false, format!("command failed: {e:#}"));
    }
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    let differing: Vec<&String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();

    let ckpt = a.path().join("model/head.sngp");
    let bytes = std::fs::read(&ckpt).unwrap();
    let head = load_checkpoint(&ckpt).unwrap();
    let reencoded = encode_checkpoint(&head).unwrap();
    let again = encode_checkpoint(&decode_checkpoint(&reencoded).unwrap()).unwrap();
    let roundtrip = reencoded == bytes && again == bytes;

    check(
        fa.len() == fb.len() && differing.is_empty() && roundtrip && fa.len() >= 20,
        format!(
            "{} files compared, {} differ; checkpoint round trip {}",
            fa.len(),
            differing.len(),
            if roundtrip { "bit-exact" } else { "differs" }
        ),
    )
}

struct Outcome {
    id: usize,
    name: &'static str,
    check: Check,
    elapsed: Duration,
    budget: Option<Duration>,
}

fn timed(id: usize, name: &'static str, budget: Option<u64>, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let check = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        check(false, format!("panicked: {msg}"))
    });
    Outcome {
        id,
        name,
        check,
        elapsed: start.elapsed(),
        budget: budget.map(Duration::from_secs),
    }
}

fn main() {
    let mut coverage = None;
    let results = [
        timed(1, "coverage guarantee", Some(300), || {
            let r = coverage_run();
            let c = coverage_guarantee(&r);
            coverage = Some(r);
            c
        }),
        timed(2, "spectral normalization", Some(10), spectral_normalization),
        timed(3, "rff kernel fidelity", Some(30), rff_fidelity),
        timed(4, "distance-aware uncertainty", Some(60), distance_awareness),
        timed(5, "tile elimination direction", Some(300), eat_direction),
        timed(6, "ood gating restores coverage", Some(600), ood_gating),
        timed(7, "da error rate monotone", None, || {
            da_monotone(coverage.as_ref().expect("coverage run"))
        }),
        timed(8, "exact-formula oracles", None, exact_oracles),
        timed(9, "determinism", None, determinism),
    ];

    let mut failed = 0;
    for o in &results {
        let in_time = o.budget.map_or(true, |b| o.elapsed <= b);
        let pass = o.check.pass && in_time;
        failed += usize::from(!pass);
        let budget = o.budget.map_or(String::new(), |b| format!(" / {}s", b.as_secs()));
        println!(
            "{} [{}] {}: {} ({:.1}s{budget})",
            if pass { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.check.detail,
            o.elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
