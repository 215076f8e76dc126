//! End-to-end acceptance run on the compact benchmark. Prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.
//!
//! Artifacts are kept under `$CARGO_TARGET_TMPDIR/acceptance` for inspection.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use cfft_core::counterfactual::{Masking, Refill, StrategyConfig};
use cfft_core::eval::{argmax, wise_ensemble};
use cfft_core::harness::{self, ExperimentConfig, FineTuneInputs, Preset, RunRow};
use cfft_core::model::predict_logits;
use cfft_core::relevance::{normalize, threshold_partition, RelevanceMap};
use cfft_core::rng;
use cfft_core::train::{
    cross_entropy_only, fine_tune, objective, objective_wise_kd, Counterfactual, TrainConfig,
    TrainData,
};
use cfft_core::{ModelParams, Split};

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const PARTITION_MAPS: usize = 1000;
const THRESHOLDS: [f64; 6] = [0.7, 0.6, 0.5, 0.4, 0.3, 0.2];
const MASK_THRESHOLD: f64 = 0.5;
const MIN_MASK_SAMPLES: usize = 500;
/// One-sided 99% normal quantile.
const Z99: f64 = 2.326;
const MIN_OOD_GAIN: f64 = 0.05;
const MAX_ID_GAP: f64 = 0.02;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: usize, name: &str, o: &Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("{verdict} {id} {name}: {}", o.detail);
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let err = common::objective_gradient_error(false);
    let took = start.elapsed();
    outcome(
        err < GRAD_TOLERANCE && took < GRAD_BUDGET,
        format!("max relative error {err:.2e} (limit {GRAD_TOLERANCE:e}) in {took:.1?}"),
    )
}

fn criterion_partitions() -> Outcome {
    let patches = 64;
    let mut r = rng::stream(2024, &[]);
    let mut failures = 0;
    for i in 0..PARTITION_MAPS {
        // every fourth map is quantised so thresholds hit ties exactly
        let raw: Vec<f64> = (0..patches)
            .map(|_| {
                let v: f64 = r.gen();
                if i % 4 == 0 {
                    (v * 10.0).round() / 10.0
                } else {
                    v
                }
            })
            .collect();
        let map = RelevanceMap {
            scores: normalize(&raw),
            target_class: 0,
            model_checksum: String::new(),
        };
        let mut previous: Option<Vec<usize>> = None;
        for t in THRESHOLDS {
            let part = threshold_partition(&map, t);
            let exact = part.object.is_disjoint(&part.context)
                && part.object.len() + part.context.len() == patches
                && part
                    .object
                    .iter()
                    .chain(&part.context)
                    .all(|&p| p < patches);
            let object: Vec<usize> = part.object.into_iter().collect();
            let nested = previous
                .as_ref()
                .is_none_or(|prev| prev.iter().all(|p| object.contains(p)));
            if !exact || !nested {
                failures += 1;
            }
            previous = Some(object);
        }
    }
    outcome(
        failures == 0,
        format!(
            "{failures} violations over {PARTITION_MAPS} maps x {} thresholds",
            THRESHOLDS.len()
        ),
    )
}

fn criterion_mask_quality(cfg: &ExperimentConfig, root: &Path) -> Outcome {
    let cfg = ExperimentConfig {
        mask_thresholds: THRESHOLDS.to_vec(),
        mask_samples: MIN_MASK_SAMPLES,
        ..cfg.clone()
    };
    let rows = match harness::cmd_mask_table(&cfg, root, None) {
        Ok(rows) => rows,
        Err(e) => return outcome(false, format!("mask table failed: {e}")),
    };
    for r in &rows {
        println!(
            "  mask t={:.1}: image MR {:.3}, object MR {:.3}, IoU {:.3}",
            r.threshold, r.image_mr, r.object_mr, r.iou
        );
    }
    let row = rows
        .iter()
        .find(|r| r.threshold == MASK_THRESHOLD)
        .expect("threshold present");
    let lower = row.gap - Z99 * row.gap_se;
    outcome(
        row.n >= MIN_MASK_SAMPLES && lower > 0.0,
        format!(
            "t={MASK_THRESHOLD}, n={}: object MR {:.3} vs image MR {:.3}, 99% lower bound of gap {lower:.3}",
            row.n, row.object_mr, row.image_mr
        ),
    )
}

fn criterion_endpoints(
    cfg: &ExperimentConfig,
    teacher: &ModelParams,
    tuned: &ModelParams,
    root: &Path,
) -> Outcome {
    let mut mismatches = 0;
    let mut compared = 0;
    for split in [Split::IdTest, Split::OodTest] {
        let ds = harness::load_split(cfg, root, split).expect("split exists");
        let images: Vec<_> = ds.samples.iter().map(|s| &s.image).collect();
        for (alpha, endpoint) in [(0.0, teacher), (1.0, tuned)] {
            let mixed = wise_ensemble(teacher, tuned, alpha).expect("compatible");
            let a = predict_logits(&mixed, &images).expect("eval");
            let b = predict_logits(endpoint, &images).expect("eval");
            for (x, y) in a.iter().zip(&b) {
                compared += 1;
                if argmax(x) != argmax(y) {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} differing predictions out of {compared}"),
    )
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_degradation(teacher: &harness::TeacherRow, vanilla: &[&RunRow]) -> Outcome {
    let agree = vanilla
        .iter()
        .all(|r| r.id_test > teacher.id_test && r.ood_test < teacher.ood_test);
    let per_seed: Vec<String> = vanilla
        .iter()
        .map(|r| format!("seed {}: {:.3}/{:.3}", r.seed, r.id_test, r.ood_test))
        .collect();
    outcome(
        agree && vanilla.len() == 3,
        format!(
            "teacher ID/OOD {:.3}/{:.3}; vanilla {}",
            teacher.id_test,
            teacher.ood_test,
            per_seed.join(", ")
        ),
    )
}

fn criterion_method(vanilla: &[&RunRow], method: &[&RunRow], pipeline: Duration) -> Outcome {
    let ood_gain =
        mean(method.iter().map(|r| r.ood_test)) - mean(vanilla.iter().map(|r| r.ood_test));
    let id_gap = mean(method.iter().map(|r| r.id_test)) - mean(vanilla.iter().map(|r| r.id_test));
    outcome(
        ood_gain >= MIN_OOD_GAIN && id_gap.abs() <= MAX_ID_GAP && pipeline < PIPELINE_BUDGET,
        format!(
            "OOD gain {:+.1} points (need >= {:.0}), ID difference {:+.1} points (need within {:.0}), pipeline {:.0?}",
            100.0 * ood_gain,
            100.0 * MIN_OOD_GAIN,
            100.0 * id_gap,
            100.0 * MAX_ID_GAP,
            pipeline
        ),
    )
}

fn criterion_ordering(
    by_strategy: &BTreeMap<String, Vec<&RunRow>>,
    threshold: f64,
    rate: f64,
) -> Outcome {
    let ood = |m: Masking, r: Refill| {
        let label = StrategyConfig::new(m, r).label();
        mean(by_strategy[&label].iter().map(|row| row.ood_test))
    };
    let mut wins = 0;
    let mut parts = Vec::new();
    for (name, m) in [
        ("random", Masking::Random { rate }),
        ("context", Masking::Context { threshold }),
        ("object", Masking::Object { threshold }),
    ] {
        let (none, single, multi) = (
            ood(m, Refill::None),
            ood(m, Refill::Single),
            ood(m, Refill::Multi),
        );
        let ok = single >= none && multi >= none;
        wins += ok as usize;
        parts.push(format!(
            "{name} none {none:.3} single {single:.3} multi {multi:.3}"
        ));
    }
    outcome(
        wins >= 2,
        format!("{wins}/3 maskings; {}", parts.join("; ")),
    )
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::Compact);
    cfg.sizes = harness::DataSizes {
        id_train: 128,
        id_val: 64,
        id_test: 96,
        ood_test: 96,
        diverse: 128,
        diverse_val: 64,
    };
    cfg.model.embed_dim = 16;
    cfg.model.mlp_dim = 32;
    cfg.teacher.epochs = 2;
    cfg.teacher.warmup_steps = 2;
    cfg.teacher.floor = 0.0;
    cfg.train.epochs = 2;
    cfg.train.warmup_steps = 2;
    cfg.train.batch_size = 32;
    cfg.seeds = vec![0, 1];
    cfg.strategies = vec![
        Counterfactual::Off,
        Counterfactual::Masked(StrategyConfig::new(
            Masking::Object { threshold: 0.5 },
            Refill::Single,
        )),
        Counterfactual::Masked(StrategyConfig::new(
            Masking::Random { rate: 0.5 },
            Refill::Multi,
        )),
    ];
    cfg.alphas = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    cfg.mask_samples = 50;
    cfg
}

fn criterion_loss_identities() -> Outcome {
    let cfg = tiny_config();
    let data = |split| {
        cfft_core::Dataset::generate(&cfg.split_spec(split), split, cfg.sizes.get(split), 3)
            .unwrap()
    };
    let (train, val) = (data(Split::IdTrain), data(Split::IdVal));
    let init = ModelParams::init(&cfg.model_config(), 4).unwrap();
    let run = |strategy, beta| {
        let tc = TrainConfig {
            beta,
            ..cfg.run_config(strategy, 7)
        };
        fine_tune(
            &tc,
            &TrainData {
                train: &train,
                val: &val,
            },
            Some(&init),
            &init,
            None,
        )
        .unwrap()
    };
    let masked = Counterfactual::Masked(StrategyConfig::new(
        Masking::Object { threshold: 0.5 },
        Refill::Single,
    ));
    let (p0, log0) = run(masked, 0.0);
    let (p1, log1) = run(Counterfactual::Off, 30.0);
    let totals_equal = log0.steps.len() == log1.steps.len()
        && log0
            .steps
            .iter()
            .zip(&log1.steps)
            .all(|(a, b)| a.total.to_bits() == b.total.to_bits());
    let same_params = p0.checksum() == p1.checksum();

    let images: Vec<_> = train.samples[..16].iter().map(|s| &s.image).collect();
    let labels: Vec<_> = train.samples[..16].iter().map(|s| s.semantics).collect();
    let student = common::jittered(&cfg.model_config(), 5, 0.1);
    let (terms, _) = objective(&student, &student, &images, &labels, &images[..], 30.0).unwrap();
    let (ce, _) = cross_entropy_only(&student, &images, &labels).unwrap();
    let (kd_terms, _) = objective_wise_kd(
        &student,
        &student,
        &student,
        &images,
        &labels,
        &images[..],
        30.0,
        1.0,
        10.0,
    )
    .unwrap();
    let pass =
        totals_equal && same_params && terms.mse == 0.0 && terms.total == ce && kd_terms.kd == 0.0;
    outcome(
        pass,
        format!(
            "beta=0 vs CE-only totals bitwise equal: {totals_equal} ({} steps), checkpoints equal: {same_params}; MSE(student, student) = {:e}; KD(student, student) = {:e}",
            log0.steps.len(),
            terms.mse,
            kd_terms.kd
        ),
    )
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Runs every command twice in fresh directories on a tiny config and
/// compares outputs byte for byte.
fn criterion_determinism(
    full_cfg: &ExperimentConfig,
    inputs: &FineTuneInputs,
    root: &Path,
    reference: &RunRow,
) -> Outcome {
    let cfg = tiny_config();
    let run_all = |dir: &Path| -> cfft_core::Result<()> {
        harness::cmd_gen_data(&cfg, dir)?;
        harness::cmd_pretrain(&cfg, dir)?;
        harness::cmd_finetune(&cfg, dir, Counterfactual::Identity, 3)?;
        harness::cmd_sweep(&cfg, dir, 2)?;
        harness::cmd_mask_table(&cfg, dir, None)?;
        let theta1 = harness::run_dir(dir, &cfg.strategies[1], 0).join("model.ck");
        harness::cmd_wise(&cfg, dir, &dir.join(harness::TEACHER_FILE), &theta1)?;
        harness::cmd_report(&cfg, dir)?;
        Ok(())
    };
    let base = root.join("determinism");
    let (a, b) = (base.join("a"), base.join("b"));
    let _ = std::fs::remove_dir_all(&base);
    for dir in [&a, &b] {
        if let Err(e) = run_all(dir) {
            return outcome(false, format!("command failed: {e}"));
        }
    }
    let mut files = Vec::new();
    collect_files(&a, &a, &mut files);
    let differing: Vec<String> = files
        .iter()
        .filter(|rel| read(&a.join(rel)) != read(&b.join(rel)))
        .map(|rel| rel.display().to_string())
        .collect();

    // one full-size cell rerun against the sweep's checksum
    let rerun = harness::run_cell(
        full_cfg,
        &root.join("rerun"),
        inputs,
        parse(&reference.strategy),
        reference.seed,
    );
    let full_ok = matches!(&rerun, Ok(r) if r == reference);
    outcome(
        differing.is_empty() && files.len() > 20 && full_ok,
        format!(
            "{} files compared, differing: {:?}; full-size {} seed {} rerun identical: {full_ok}",
            files.len(),
            differing,
            reference.strategy,
            reference.seed
        ),
    )
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

fn parse(label: &str) -> Counterfactual {
    harness::parse_strategy(label).expect("labels round-trip")
}

fn main() -> ExitCode {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let cfg = ExperimentConfig::preset(Preset::Compact);
    println!(
        "acceptance run, compact preset, config {}, artifacts in {}",
        cfg.hash(),
        root.display()
    );

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        report(id, name, &o);
        results.push((id, name, o));
    };

    record(1, "gradient correctness", criterion_gradients());
    record(2, "partition and monotonicity", criterion_partitions());

    let start = Instant::now();
    harness::cmd_gen_data(&cfg, &root).expect("gen-data");
    let teacher_row = harness::cmd_pretrain(&cfg, &root).expect("pretrain");
    let setup = start.elapsed();
    println!(
        "  teacher: held-out {:.3}, ID {:.3}, OOD {:.3} ({setup:.0?} including data)",
        teacher_row.held_out_accuracy, teacher_row.id_test, teacher_row.ood_test
    );
    let inputs = FineTuneInputs::load(&cfg, &root).expect("inputs");

    let mut rows: Vec<RunRow> = Vec::new();
    let mut cell_time: BTreeMap<String, Duration> = BTreeMap::new();
    for &strategy in &cfg.strategies {
        for &seed in &cfg.seeds {
            let t = Instant::now();
            let row = harness::run_cell(&cfg, &root, &inputs, strategy, seed).expect("fine-tune");
            *cell_time.entry(row.strategy.clone()).or_default() += t.elapsed();
            println!(
                "  {:<20} seed {seed}: ID {:.3} OOD {:.3} ({:.0?})",
                row.strategy,
                row.id_test,
                row.ood_test,
                t.elapsed()
            );
            rows.push(row);
        }
    }
    let summary = harness::summarize(&rows);
    std::fs::write(
        root.join(harness::SWEEP_FILE),
        harness::to_csv(&rows).unwrap(),
    )
    .unwrap();
    std::fs::write(
        root.join(harness::SWEEP_SUMMARY_FILE),
        harness::to_csv(&summary).unwrap(),
    )
    .unwrap();
    let mut by_strategy: BTreeMap<String, Vec<&RunRow>> = BTreeMap::new();
    for r in &rows {
        by_strategy.entry(r.strategy.clone()).or_default().push(r);
    }
    let method_label =
        StrategyConfig::new(Masking::Object { threshold: 0.5 }, Refill::Single).label();
    let vanilla = &by_strategy["vanilla"];
    let method = &by_strategy[&method_label];

    record(3, "mask quality", criterion_mask_quality(&cfg, &root));
    let tuned = cfft_core::model::load_checkpoint(
        &harness::run_dir(&root, &Counterfactual::Off, 0).join("model.ck"),
    )
    .expect("vanilla checkpoint");
    record(
        4,
        "ensemble endpoints",
        criterion_endpoints(&cfg, &inputs.teacher, &tuned, &root),
    );
    record(
        5,
        "degradation under vanilla fine-tuning",
        criterion_degradation(&teacher_row, vanilla),
    );
    let pipeline = setup + cell_time["vanilla"] + cell_time[&method_label];
    record(
        6,
        "method effect",
        criterion_method(vanilla, method, pipeline),
    );
    record(
        7,
        "refill ordering",
        criterion_ordering(&by_strategy, 0.5, 0.5),
    );
    record(8, "loss identities", criterion_loss_identities());
    record(
        9,
        "determinism",
        criterion_determinism(&cfg, &inputs, &root, method[0]),
    );

    let mut ranked: Vec<_> = summary.iter().collect();
    ranked.sort_by(|a, b| b.ood_avg.total_cmp(&a.ood_avg));
    println!("  summary by OOD (mean over seeds {:?}):", cfg.seeds);
    for (i, s) in ranked.iter().enumerate() {
        println!(
            "  {:>2}. {:<20} ID {:.3} OOD {:.3}",
            i + 1,
            s.strategy,
            s.id_test,
            s.ood_avg
        );
    }
    let theta1 = harness::run_dir(&root, &Counterfactual::Off, 0).join("model.ck");
    if let Ok(curve) = harness::cmd_wise(&cfg, &root, &root.join(harness::TEACHER_FILE), &theta1) {
        let interior = curve[1..curve.len() - 1]
            .iter()
            .map(|r| r.ood_avg)
            .fold(f64::MIN, f64::max);
        println!(
            "  wise (teacher to vanilla seed 0): best interior OOD {:.3}, vanilla endpoint {:.3}",
            interior,
            curve.last().unwrap().ood_avg
        );
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
