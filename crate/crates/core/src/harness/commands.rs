use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{scatter_svg, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mask_metrics, patch_mask_to_pixels, wise_curve, EvalReport};
use crate::model::{load_checkpoint, pretrain_teacher, save_checkpoint, ModelParams};
use crate::relevance::{relevance_maps, threshold_partition};
use crate::scm::{io, Dataset, Split};
use crate::train::{fine_tune, Counterfactual, TrainData};

pub const TEACHER_FILE: &str = "teacher.ck";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const MASK_TABLE_FILE: &str = "mask_table.csv";
pub const WISE_FILE: &str = "wise.csv";
pub const WISE_SVG_FILE: &str = "wise.svg";
pub const REPORT_FILE: &str = "report.md";

pub fn dataset_path(root: &Path, split: Split) -> PathBuf {
    root.join("data").join(format!("{split}.cfds"))
}

/// Directory of one fine-tuning run.
pub fn run_dir(root: &Path, strategy: &Counterfactual, seed: u64) -> PathBuf {
    root.join("runs")
        .join(strategy.label().replace('/', "_"))
        .join(format!("seed-{seed}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(crate::train::csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format {
            path: path.into(),
            detail: e.to_string(),
        })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        detail: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRow {
    pub split: Split,
    pub n: usize,
    pub path: String,
    pub checksum: String,
    pub seed: u64,
    pub config_hash: String,
}

fn file_checksum(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Generates every split under `root/data`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<DataRow>> {
    cfg.validate()?;
    create_dir(&root.join("data"))?;
    let hash = cfg.hash();
    Split::ALL
        .into_iter()
        .map(|split| {
            let ds = Dataset::generate(
                &cfg.split_spec(split),
                split,
                cfg.sizes.get(split),
                cfg.data_seed,
            )?;
            let path = dataset_path(root, split);
            io::save(&ds, &path)?;
            Ok(DataRow {
                split,
                n: ds.len(),
                path: format!("data/{split}.cfds"),
                checksum: file_checksum(&path)?,
                seed: cfg.data_seed,
                config_hash: hash.clone(),
            })
        })
        .collect()
}

/// Loads a split and checks it was generated by this config.
pub fn load_split(cfg: &ExperimentConfig, root: &Path, split: Split) -> Result<Dataset> {
    let path = dataset_path(root, split);
    let ds = io::load(&path)?;
    let expected = cfg.split_spec(split);
    if ds.spec != expected || ds.seed != cfg.data_seed || ds.len() != cfg.sizes.get(split) {
        return Err(Error::Incompatible(format!(
            "{} was generated with different settings; rerun gen-data",
            path.display()
        )));
    }
    Ok(ds)
}

pub fn load_teacher(cfg: &ExperimentConfig, root: &Path) -> Result<ModelParams> {
    load_model(cfg, &root.join(TEACHER_FILE))
}

pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if params.config != cfg.model_config() {
        return Err(Error::Incompatible(format!(
            "{} does not match the configured model",
            path.display()
        )));
    }
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRow {
    pub held_out_accuracy: f64,
    pub id_test: f64,
    pub ood_test: f64,
    pub selected_epoch: Option<usize>,
    pub checksum: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Trains the teacher on the diverse corpus and evaluates it on the test splits.
pub fn cmd_pretrain(cfg: &ExperimentConfig, root: &Path) -> Result<TeacherRow> {
    cfg.validate()?;
    let corpus = load_split(cfg, root, Split::Diverse)?;
    let held_out = load_split(cfg, root, Split::DiverseVal)?;
    let tests = load_tests(cfg, root)?;
    let report = pretrain_teacher(&cfg.model_config(), &corpus, &held_out, &cfg.teacher)?;
    save_checkpoint(&report.params, &root.join(TEACHER_FILE))?;
    report.log.write(root, "teacher_train")?;
    let eval = evaluate(&report.params, "teacher", &[&tests[0], &tests[1]])?;
    let row = TeacherRow {
        held_out_accuracy: report.held_out_accuracy,
        id_test: eval.id_accuracy(),
        ood_test: eval.ood_avg,
        selected_epoch: report.log.selected_epoch,
        checksum: report.params.checksum(),
        seed: cfg.teacher.seed,
        config_hash: cfg.hash(),
    };
    write_json(&root.join("teacher.json"), &row)?;
    Ok(row)
}

fn load_tests(cfg: &ExperimentConfig, root: &Path) -> Result<[Dataset; 2]> {
    Ok([
        load_split(cfg, root, Split::IdTest)?,
        load_split(cfg, root, Split::OodTest)?,
    ])
}

/// Artifacts shared by every fine-tuning cell.
pub struct FineTuneInputs {
    pub train: Dataset,
    pub val: Dataset,
    pub tests: [Dataset; 2],
    pub teacher: ModelParams,
}

impl FineTuneInputs {
    pub fn load(cfg: &ExperimentConfig, root: &Path) -> Result<Self> {
        Ok(Self {
            train: load_split(cfg, root, Split::IdTrain)?,
            val: load_split(cfg, root, Split::IdVal)?,
            tests: load_tests(cfg, root)?,
            teacher: load_teacher(cfg, root)?,
        })
    }
}

/// One sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub strategy: String,
    pub beta: f64,
    pub id_test: f64,
    pub ood_test: f64,
    pub ood_avg: f64,
    pub selected_epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
    pub checksum: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Fine-tunes from the teacher with one strategy and seed, writing the
/// checkpoint, training log and evaluation under [`run_dir`].
pub fn run_cell(
    cfg: &ExperimentConfig,
    root: &Path,
    inputs: &FineTuneInputs,
    strategy: Counterfactual,
    seed: u64,
) -> Result<RunRow> {
    let train_cfg = cfg.run_config(strategy, seed);
    let (params, log) = fine_tune(
        &train_cfg,
        &TrainData {
            train: &inputs.train,
            val: &inputs.val,
        },
        Some(&inputs.teacher),
        &inputs.teacher,
        None,
    )?;
    let dir = run_dir(root, &strategy, seed);
    create_dir(&dir)?;
    save_checkpoint(&params, &dir.join("model.ck"))?;
    log.write(&dir, "train")?;
    let eval = evaluate(
        &params,
        &strategy.label(),
        &[&inputs.tests[0], &inputs.tests[1]],
    )?;
    write_json(&dir.join("eval.json"), &eval)?;
    let summary = log.summary();
    Ok(RunRow {
        strategy: strategy.label(),
        beta: train_cfg.beta,
        id_test: eval.id_accuracy(),
        ood_test: eval.accuracy(Split::OodTest).unwrap_or(f64::NAN),
        ood_avg: eval.ood_avg,
        selected_epoch: summary.selected_epoch,
        val_accuracy: summary.val_accuracy,
        checksum: params.checksum(),
        seed,
        config_hash: cfg.hash(),
    })
}

pub fn cmd_finetune(
    cfg: &ExperimentConfig,
    root: &Path,
    strategy: Counterfactual,
    seed: u64,
) -> Result<RunRow> {
    cfg.validate()?;
    let inputs = FineTuneInputs::load(cfg, root)?;
    run_cell(cfg, root, &inputs, strategy, seed)
}

/// Seed-averaged row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub runs: usize,
    pub id_test: f64,
    pub ood_test: f64,
    pub ood_avg: f64,
    /// Seeds joined with `;`.
    pub seeds: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<RunRow>,
    pub summary: Vec<SummaryRow>,
}

/// Mean per strategy, in first-appearance order.
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.strategy.as_str()) {
            order.push(&r.strategy);
        }
        groups.entry(&r.strategy).or_default().push(r);
    }
    order
        .into_iter()
        .map(|name| {
            let g = &groups[name];
            let n = g.len() as f64;
            let mean = |f: fn(&RunRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            SummaryRow {
                strategy: name.to_string(),
                runs: g.len(),
                id_test: mean(|r| r.id_test),
                ood_test: mean(|r| r.ood_test),
                ood_avg: mean(|r| r.ood_avg),
                seeds: g
                    .iter()
                    .map(|r| r.seed.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                config_hash: g[0].config_hash.clone(),
            }
        })
        .collect()
}

/// Runs every strategy × seed cell on a pool of `jobs` threads and writes
/// the per-run and summary CSVs.
pub fn cmd_sweep(cfg: &ExperimentConfig, root: &Path, jobs: usize) -> Result<SweepResult> {
    cfg.validate()?;
    if cfg.strategies.is_empty() {
        return Err(Error::Config("the sweep has no strategies".into()));
    }
    let inputs = FineTuneInputs::load(cfg, root)?;
    let cells: Vec<(Counterfactual, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|&(s, seed)| run_cell(cfg, root, &inputs, s, seed))
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = summarize(&rows);
    write_file(&root.join(SWEEP_FILE), to_csv(&rows)?)?;
    write_file(&root.join(SWEEP_SUMMARY_FILE), to_csv(&summary)?)?;
    Ok(SweepResult { rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub threshold: f64,
    pub n: usize,
    pub image_mr: f64,
    pub object_mr: f64,
    pub iou: f64,
    /// Mean of the per-sample `object_mr - image_mr`.
    pub gap: f64,
    /// Standard error of `gap`.
    pub gap_se: f64,
    pub model_checksum: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Masking rates of object masks from `model` (the teacher when `None`) on
/// the first `mask_samples` ID-test samples, per threshold.
pub fn cmd_mask_table(
    cfg: &ExperimentConfig,
    root: &Path,
    model: Option<&Path>,
) -> Result<Vec<MaskRow>> {
    cfg.validate()?;
    if cfg.mask_thresholds.is_empty() {
        return Err(Error::Config("no mask thresholds configured".into()));
    }
    let params = match model {
        Some(p) => load_model(cfg, p)?,
        None => load_teacher(cfg, root)?,
    };
    let ds = load_split(cfg, root, Split::IdTest)?;
    let samples = &ds.samples[..cfg.mask_samples.min(ds.len())];
    if samples.is_empty() {
        return Err(Error::Config("mask_samples must be positive".into()));
    }
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<_> = samples.iter().map(|s| s.semantics).collect();
    let maps = relevance_maps(&params, &images, &labels)?;
    let (side, patch) = (cfg.scm.image_side, cfg.scm.patch_side);
    let hash = cfg.hash();
    let rows = cfg
        .mask_thresholds
        .iter()
        .map(|&t| {
            let per: Vec<_> = maps
                .iter()
                .zip(samples)
                .map(|(m, s)| {
                    let part = threshold_partition(m, t);
                    let idx: Vec<usize> = part.object.into_iter().collect();
                    mask_metrics(&patch_mask_to_pixels(&idx, side, patch)?, &s.object_mask)
                })
                .collect::<Result<_>>()?;
            let n = per.len() as f64;
            let mean =
                |f: &dyn Fn(&crate::eval::MaskMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
            let gap = mean(&|m| m.object_mr - m.image_mr);
            let var = per
                .iter()
                .map(|m| (m.object_mr - m.image_mr - gap).powi(2))
                .sum::<f64>()
                / (n - 1.0).max(1.0);
            Ok(MaskRow {
                threshold: t,
                n: per.len(),
                image_mr: mean(&|m| m.image_mr),
                object_mr: mean(&|m| m.object_mr),
                iou: mean(&|m| m.iou),
                gap,
                gap_se: (var / n).sqrt(),
                model_checksum: params.checksum(),
                seed: cfg.data_seed,
                config_hash: hash.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_file(&root.join(MASK_TABLE_FILE), to_csv(&rows)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WiseRow {
    pub alpha: f64,
    pub id_acc: f64,
    pub ood_avg: f64,
    pub id_test: f64,
    pub ood_test: f64,
    pub checksum: String,
    pub seed: u64,
    pub config_hash: String,
}

impl WiseRow {
    fn new(alpha: f64, r: &EvalReport, cfg: &ExperimentConfig) -> Self {
        Self {
            alpha,
            id_acc: r.id_accuracy(),
            ood_avg: r.ood_avg,
            id_test: r.accuracy(Split::IdTest).unwrap_or(f64::NAN),
            ood_test: r.accuracy(Split::OodTest).unwrap_or(f64::NAN),
            checksum: r.checksum.clone(),
            seed: cfg.data_seed,
            config_hash: cfg.hash(),
        }
    }
}

/// Evaluates `(1 - alpha) * theta0 + alpha * theta1` over the configured
/// grid and writes the curve CSV and an ID-vs-OOD scatter.
pub fn cmd_wise(
    cfg: &ExperimentConfig,
    root: &Path,
    theta0: &Path,
    theta1: &Path,
) -> Result<Vec<WiseRow>> {
    cfg.validate()?;
    if cfg.alphas.is_empty() {
        return Err(Error::Config("the alpha grid is empty".into()));
    }
    let a = load_model(cfg, theta0)?;
    let b = load_model(cfg, theta1)?;
    let tests = load_tests(cfg, root)?;
    let curve = wise_curve(&a, &b, &cfg.alphas, &[&tests[0], &tests[1]])?;
    let rows: Vec<WiseRow> = curve
        .iter()
        .map(|p| WiseRow::new(p.alpha, &p.report, cfg))
        .collect();
    write_file(&root.join(WISE_FILE), to_csv(&rows)?)?;
    let points: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|r| (r.alpha, r.id_acc, r.ood_avg))
        .collect();
    write_file(&root.join(WISE_SVG_FILE), scatter_svg(&points))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub runs: usize,
    pub id_test: f64,
    pub ood_test: f64,
    pub ood_avg: f64,
    pub seeds: String,
    pub config_hash: String,
}

/// Combines the teacher evaluation and the sweep summary into one table and
/// writes it as markdown.
pub fn cmd_report(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<ReportRow>> {
    let teacher: TeacherRow = read_json(&root.join("teacher.json"))?;
    let summary: Vec<SummaryRow> = read_csv(&root.join(SWEEP_SUMMARY_FILE))?;
    let hash = cfg.hash();
    if teacher.config_hash != hash || summary.iter().any(|s| s.config_hash != hash) {
        return Err(Error::Incompatible(
            "artifacts were produced by a different config".into(),
        ));
    }
    let mut rows = vec![ReportRow {
        method: "teacher".into(),
        runs: 1,
        id_test: teacher.id_test,
        ood_test: teacher.ood_test,
        ood_avg: teacher.ood_test,
        seeds: teacher.seed.to_string(),
        config_hash: teacher.config_hash,
    }];
    rows.extend(summary.into_iter().map(|s| ReportRow {
        method: s.strategy,
        runs: s.runs,
        id_test: s.id_test,
        ood_test: s.ood_test,
        ood_avg: s.ood_avg,
        seeds: s.seeds,
        config_hash: s.config_hash,
    }));
    let mut md =
        format!("# Results ({hash})\n\n| method | runs | ID | OOD avg |\n|---|---:|---:|---:|\n");
    for r in &rows {
        md += &format!(
            "| {} | {} | {:.2} | {:.2} |\n",
            r.method,
            r.runs,
            100.0 * r.id_test,
            100.0 * r.ood_avg
        );
    }
    write_file(&root.join(REPORT_FILE), md)?;
    Ok(rows)
}
