use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use trustkit_core::conformal::{calibrate, read_calibration_records, ConformalCalibrator, DEFAULT_ALPHAS};
use trustkit_core::data::{
    gen_eat_scenario, gen_external_cohort, gen_ind_scenario, gen_ood_scenario, make_split_plan, read_embeddings,
    read_manifest, write_embeddings, write_manifest, Scenario, SplitPlan,
};
use trustkit_core::numerics::Rng;
use trustkit_core::pipeline::{eat_keep_mask, score_patients, simulate_ood, train_head, OodExperiment};
use trustkit_core::sngp::{load_checkpoint, save_checkpoint, SngpHead};
use trustkit_core::trust::{
    ambiguity_score, fit_eat_cluster, fit_eat_threshold, write_patient_csv, AlphaReport, EatFilter, PatientRecord,
    TrustReport, REPORT_SCHEMA,
};

use crate::config::{EatMode, RunConfig};
use crate::{Cohort, Command, Common, ScenarioKind, SCHEMA};

const EMBEDDINGS_FILE: &str = "embeddings.emb";
const MANIFEST_FILE: &str = "manifest.csv";
const SPLIT_FILE: &str = "split.json";

pub(crate) fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            kind,
            common,
            ood_ratio,
            shifted_fraction,
            out,
        } => gen(kind, &common, ood_ratio, shifted_fraction, &out),
        Command::Train { data, common, out } => train(&data, &common, &out),
        Command::Eat {
            data,
            checkpoint,
            common,
            mode,
            rate,
            out,
        } => eat(&data, &checkpoint, &common, mode, rate, &out),
        Command::Calibrate {
            data,
            records,
            checkpoint,
            filter,
            resplit,
            alpha,
            common,
            out,
        } => {
            let alphas = if alpha.is_empty() {
                DEFAULT_ALPHAS.to_vec()
            } else {
                alpha
            };
            match (records, data, checkpoint) {
                (Some(r), None, None) => calibrate_records(&r, &alphas, &out),
                (None, Some(d), Some(c)) => calibrate_data(&d, &c, filter.as_deref(), resplit, &alphas, &common, &out),
                _ => bail!("calibrate: give either --records or a data directory with --checkpoint"),
            }
        }
        Command::Evaluate {
            data,
            checkpoint,
            calibrator,
            filter,
            resplit,
            cohort,
            common,
            out,
        } => evaluate(
            &data,
            &checkpoint,
            &calibrator,
            filter.as_deref(),
            resplit,
            cohort,
            &common,
            &out,
        ),
        Command::SimulateOod {
            common,
            alpha,
            ratios,
            out,
        } => simulate(&common, alpha, ratios, &out),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_data(dir: &Path) -> Result<Scenario> {
    let embeddings = read_embeddings(dir.join(EMBEDDINGS_FILE)).context("data: reading embeddings")?;
    let manifest = read_manifest(dir.join(MANIFEST_FILE)).context("data: reading manifest")?;
    ensure!(
        embeddings.rows() == manifest.len(),
        "data: {} embedding rows but {} manifest rows",
        embeddings.rows(),
        manifest.len()
    );
    Ok(Scenario { embeddings, manifest })
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    schema: u32,
    plan: SplitPlan,
}

fn load_split(dir: &Path) -> Result<SplitPlan> {
    Ok(read_json::<SplitFile>(&dir.join(SPLIT_FILE))?.plan)
}

#[derive(Serialize, Deserialize)]
struct FilterFile {
    schema: u32,
    filter: EatFilter,
}

fn load_head(path: &Path) -> Result<SngpHead> {
    load_checkpoint(path).with_context(|| format!("sngp: loading checkpoint {}", path.display()))
}

fn gen(kind: ScenarioKind, common: &Common, ood_ratio: f64, shifted_fraction: f64, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.scenario.seed = common.seed;
    create_dir(out)?;
    let data = match kind {
        ScenarioKind::Ind => gen_ind_scenario(&cfg.scenario)?,
        ScenarioKind::Ood => gen_ood_scenario(&cfg.scenario, ood_ratio)?,
        ScenarioKind::Eat => {
            let eat = gen_eat_scenario(&cfg.scenario)?;
            let mut w = csv::Writer::from_path(out.join("blobs.csv"))?;
            w.write_record(["tile_id", "blob"])?;
            for (t, b) in eat.scenario.manifest.tiles().iter().zip(&eat.blobs) {
                w.write_record([t.tile_id.as_str(), &format!("{b:?}").to_lowercase()])?;
            }
            w.flush()?;
            eat.scenario
        }
        ScenarioKind::External => {
            let ext = gen_external_cohort(&cfg.scenario, shifted_fraction)?;
            let mut w = csv::Writer::from_path(out.join("shifted.csv"))?;
            w.write_record(["patient_id"])?;
            for p in &ext.shifted {
                w.write_record([p])?;
            }
            w.flush()?;
            ext.scenario
        }
    };
    let labelled: Vec<String> = data
        .manifest
        .patients()
        .into_iter()
        .filter(|(_, p)| p.label.is_some())
        .map(|(id, _)| id)
        .collect();
    let plan = make_split_plan(
        &labelled,
        cfg.split.ratios,
        cfg.split.n_models,
        cfg.split.n_resplits,
        cfg.split.cal_size,
        &mut Rng::with_stream(common.seed, 30),
    )
    .context("data: split plan")?;
    write_embeddings(out.join(EMBEDDINGS_FILE), &data.embeddings)?;
    write_manifest(out.join(MANIFEST_FILE), &data.manifest)?;
    write_json(&out.join(SPLIT_FILE), &SplitFile { schema: SCHEMA, plan })?;
    write_json(
        &out.join("config.json"),
        &json!({
            "schema": SCHEMA,
            "kind": format!("{kind:?}").to_lowercase(),
            "ood_ratio": ood_ratio,
            "shifted_fraction": shifted_fraction,
            "config": cfg,
        }),
    )
}

fn train(data_dir: &Path, common: &Common, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let data = load_data(data_dir)?;
    let plan = load_split(data_dir)?;
    let (head, report) =
        train_head(&data.select_patients(&plan.train), &cfg.model, common.seed).context("sngp: training")?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_checkpoint(&head, out).context("sngp: saving checkpoint")?;
    write_json(
        &report_path(out),
        &json!({
            "schema": SCHEMA,
            "seed": common.seed,
            "n_train_patients": plan.train.len(),
            "steps": report.steps,
            "train_accuracy": report.train_accuracy,
            "loss_history": report.loss_history,
        }),
    )
}

fn report_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".report.json");
    checkpoint.with_file_name(name)
}

fn tile_ambiguity(head: &SngpHead, data: &Scenario) -> Result<Vec<f64>> {
    let probs = head.predict_batch(&data.embeddings)?.probs;
    probs
        .iter()
        .map(|p| ambiguity_score(p).context("trust: ambiguity score"))
        .collect()
}

fn eat(
    data_dir: &Path,
    checkpoint: &Path,
    common: &Common,
    mode: Option<EatMode>,
    rate: Option<f64>,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let data = load_data(data_dir)?;
    let plan = load_split(data_dir)?;
    let head = load_head(checkpoint)?;
    let train = data.select_patients(&plan.train);
    let train_amb = tile_ambiguity(&head, &train)?;
    let filter = match mode.unwrap_or(cfg.eat.mode) {
        EatMode::Cluster => {
            let labels: Vec<usize> = train.manifest.tiles().iter().filter_map(|t| t.label).collect();
            ensure!(
                labels.len() == train.manifest.len(),
                "trust: training tiles must be labelled"
            );
            fit_eat_cluster(
                &train.embeddings,
                &train_amb,
                &labels,
                cfg.eat.k,
                cfg.eat.dominance_cutoff,
                &mut Rng::with_stream(common.seed, 31),
            )
        }
        EatMode::Threshold => fit_eat_threshold(&train_amb, rate.unwrap_or(cfg.eat.rate)),
    }
    .context("trust: fitting tile elimination")?;

    let keep = eat_keep_mask(&data, &tile_ambiguity(&head, &data)?, &filter)?;
    create_dir(out)?;
    let mut w = csv::Writer::from_path(out.join("retention.csv"))?;
    w.write_record(["slide_id", "patient_id", "n_tiles", "n_retained"])?;
    for (patient, info) in data.manifest.patients() {
        let mut slides: std::collections::BTreeMap<&str, (usize, usize)> = Default::default();
        for i in info.tiles {
            let e = slides.entry(&data.manifest.tiles()[i].slide_id).or_default();
            e.0 += 1;
            e.1 += usize::from(keep[i]);
        }
        for (slide, (n, kept)) in slides {
            w.write_record([slide, &patient, &n.to_string(), &kept.to_string()])?;
        }
    }
    w.flush()?;
    write_json(&out.join("filter.json"), &FilterFile { schema: SCHEMA, filter })
}

#[derive(Serialize, Deserialize)]
struct CalibratorFile {
    schema: u32,
    n_calibration: usize,
    calibrators: Vec<ConformalCalibrator>,
}

fn write_calibrators<P: AsRef<[f64]>>(probs: &[P], labels: &[usize], alphas: &[f64], out: &Path) -> Result<()> {
    let calibrators = alphas
        .iter()
        .map(|&a| calibrate(probs, labels, a).context("conformal: calibration"))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(
        out,
        &CalibratorFile {
            schema: SCHEMA,
            n_calibration: labels.len(),
            calibrators,
        },
    )
}

fn calibrate_records(path: &Path, alphas: &[f64], out: &Path) -> Result<()> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let records = read_calibration_records(file).context("conformal: reading calibration records")?;
    let labels = records
        .iter()
        .map(|r| {
            r.label
                .with_context(|| format!("conformal: calibration record {} is out-of-domain", r.item_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<&[f64]> = records.iter().map(|r| r.probs.as_slice()).collect();
    write_calibrators(&probs, &labels, alphas, out)
}

fn keep_mask(head: &SngpHead, data: &Scenario, filter: Option<&Path>) -> Result<Option<Vec<bool>>> {
    let Some(path) = filter else { return Ok(None) };
    let filter = read_json::<FilterFile>(path)?.filter;
    Ok(Some(eat_keep_mask(data, &tile_ambiguity(head, data)?, &filter)?))
}

fn resplit_of(plan: &SplitPlan, i: usize) -> Result<&trustkit_core::data::Resplit> {
    plan.resplits
        .get(i)
        .with_context(|| format!("data: resplit {i} out of range ({} available)", plan.resplits.len()))
}

fn calibrate_data(
    data_dir: &Path,
    checkpoint: &Path,
    filter: Option<&Path>,
    resplit: usize,
    alphas: &[f64],
    common: &Common,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let data = load_data(data_dir)?;
    let plan = load_split(data_dir)?;
    let head = load_head(checkpoint)?;
    let cal = data.select_patients(&resplit_of(&plan, resplit)?.calibration);
    let keep = keep_mask(&head, &cal, filter)?;
    let records = score_patients(&head, &cal, keep.as_deref(), cfg.ood.delta).context("trust: scoring patients")?;
    let labels = records
        .iter()
        .map(|r| {
            r.label
                .with_context(|| format!("conformal: calibration patient {} is out-of-domain", r.patient_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<&[f64]> = records.iter().map(|r| r.probs.as_slice()).collect();
    write_calibrators(&probs, &labels, alphas, out)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    data_dir: &Path,
    checkpoint: &Path,
    calibrator: &Path,
    filter: Option<&Path>,
    resplit: usize,
    cohort: Cohort,
    common: &Common,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let data = load_data(data_dir)?;
    let head = load_head(checkpoint)?;
    let file: CalibratorFile = read_json(calibrator)?;
    ensure!(
        file.schema == SCHEMA,
        "conformal: unsupported calibrator schema {}",
        file.schema
    );
    let subset = match cohort {
        Cohort::All => data,
        Cohort::Test => {
            let plan = load_split(data_dir)?;
            let mut ids = resplit_of(&plan, resplit)?.test.clone();
            ids.extend(
                data.manifest
                    .patients()
                    .into_iter()
                    .filter(|(_, p)| p.label.is_none())
                    .map(|(id, _)| id),
            );
            data.select_patients(&ids)
        }
    };
    ensure!(!subset.manifest.is_empty(), "data: no patients to evaluate");
    let keep = keep_mask(&head, &subset, filter)?;
    let records = score_patients(&head, &subset, keep.as_deref(), cfg.ood.delta).context("trust: scoring patients")?;

    create_dir(out)?;
    let mut alphas = Vec::new();
    for stored in &file.calibrators {
        let c = ConformalCalibrator::from_scores(stored.scores().to_vec(), stored.alpha())
            .context("conformal: rebuilding calibrator")?;
        ensure!(
            c.q_hat() == stored.q_hat(),
            "conformal: calibrator file is inconsistent"
        );
        let with_sets: Vec<PatientRecord> = records
            .iter()
            .map(|r| PatientRecord {
                set: Some(c.predict_set(&r.probs)),
                ..r.clone()
            })
            .collect();
        let csv_path = out.join(format!("patients-alpha-{}.csv", c.alpha()));
        let w = BufWriter::new(File::create(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?);
        write_patient_csv(w, &with_sets, cfg.ood.score_kind)?;
        alphas.push(AlphaReport::compute(c.alpha(), c.q_hat(), &with_sets).context("trust: report")?);
    }
    let report = TrustReport {
        schema: REPORT_SCHEMA,
        ood_score_kind: cfg.ood.score_kind,
        alphas,
    };
    write_json(&out.join("report.json"), &report)
}

fn simulate(common: &Common, alpha: f64, ratios: Vec<f64>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let exp = OodExperiment {
        scenario: trustkit_core::data::ScenarioConfig {
            seed: common.seed,
            ..cfg.scenario.clone()
        },
        model: cfg.model.clone(),
        ratios: cfg.ood.split,
        ood_ratios: if ratios.is_empty() {
            cfg.ood.ratios.clone()
        } else {
            ratios
        },
        alpha,
        n_seeds: cfg.ood.n_seeds,
        n_resplits: cfg.ood.n_resplits,
        cal_size: cfg.ood.cal_size,
        score_kind: cfg.ood.score_kind,
        delta: cfg.ood.delta,
        gate_policy: cfg.ood.gate_policy,
        n_tune_ood: cfg.ood.n_tune_ood,
    };
    let result = simulate_ood(&exp).context("pipeline: OOD simulation")?;
    create_dir(out)?;
    let mut w = csv::Writer::from_path(out.join("coverage.csv"))?;
    w.write_record([
        "ratio",
        "ungated_coverage",
        "gated_coverage",
        "gated_crc_coverage",
        "rho_hat",
        "ungated_set_size",
        "gated_crc_set_size",
        "gate_tpr",
        "gate_fpr",
    ])?;
    for s in &result.summaries {
        let row = [
            s.ratio,
            s.ungated_coverage,
            s.gated_coverage,
            s.gated_crc_coverage,
            s.rho_hat,
            s.ungated_set_size,
            s.gated_crc_set_size,
            s.gate_tpr,
            s.gate_fpr,
        ];
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush()?;
    write_json(
        &out.join("summary.json"),
        &json!({ "schema": SCHEMA, "alpha": alpha, "experiment": exp, "result": result }),
    )
}
