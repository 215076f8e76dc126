use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "preset": "compact",
  "sizes": {"id_train": 64, "id_val": 32, "id_test": 48, "ood_test": 48, "diverse": 64, "diverse_val": 32},
  "model": {"embed_dim": 8, "num_layers": 1, "num_heads": 2, "mlp_dim": 16},
  "teacher": {"epochs": 1, "batch_size": 16, "warmup_steps": 1, "floor": 0.0},
  "train": {"epochs": 1, "batch_size": 16, "warmup_steps": 1},
  "strategies": [
    "identity",
    {"masked": {"masking": {"kind": "object", "threshold": 0.5}, "refill": "single"}}
  ],
  "alphas": [0.0, 0.5, 1.0],
  "mask_thresholds": [0.7, 0.5, 0.3],
  "mask_samples": 40,
  "seeds": [0]
}"#;

fn cfft(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfft"))
        .args(["--config", root.join("cfg.json").to_str().unwrap()])
        .args(args)
        .env("CFFT_DATA_DIR", root.join("out"))
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = cfft(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), config).unwrap();
    dir
}

fn read(root: &Path, name: &str) -> Vec<u8> {
    std::fs::read(root.join("out").join(name)).unwrap()
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = setup(TINY);
    let root = dir.path();
    let data = ok(root, &["gen-data"]);
    assert_eq!(data.lines().count(), 7);
    assert!(data.contains("id-train,64,"));
    let before = read(root, "data/id-train.cfds");
    ok(root, &["gen-data"]);
    assert_eq!(before, read(root, "data/id-train.cfds"));

    ok(root, &["pretrain"]);
    let teacher = read(root, "teacher.ck");
    ok(root, &["pretrain"]);
    assert_eq!(teacher, read(root, "teacher.ck"));

    ok(root, &["sweep", "--jobs", "2"]);
    let sweep = read(root, "sweep.csv");
    let text = String::from_utf8(sweep.clone()).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("\nno-masking,"));
    ok(root, &["sweep", "--jobs", "1"]);
    assert_eq!(sweep, read(root, "sweep.csv"));

    let masks = ok(root, &["mask-table"]);
    assert_eq!(masks.lines().count(), 4);
    let table = read(root, "mask_table.csv");
    ok(root, &["mask-table"]);
    assert_eq!(table, read(root, "mask_table.csv"));

    let theta1 = root.join("out/runs/object-0.5_single/seed-0/model.ck");
    let curve = ok(
        root,
        &[
            "wise",
            "--theta1",
            theta1.to_str().unwrap(),
            "--format",
            "json",
        ],
    );
    let rows: serde_json::Value = serde_json::from_str(&curve).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
    let wise = read(root, "wise.csv");
    ok(root, &["wise", "--theta1", theta1.to_str().unwrap()]);
    assert_eq!(wise, read(root, "wise.csv"));
    let svg = String::from_utf8(read(root, "wise.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 3);

    let report = ok(root, &["report"]);
    assert_eq!(report.lines().count(), 4);
    assert!(read(root, "report.md").starts_with(b"# Results"));
}

#[test]
fn single_finetune_records_seed() {
    let dir = setup(TINY);
    let root = dir.path();
    ok(root, &["gen-data"]);
    ok(root, &["pretrain"]);
    let out = ok(
        root,
        &["finetune", "--strategy", "random-0.5/multi", "--seed", "5"],
    );
    let mut lines = out.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let seed = header.iter().position(|h| *h == "seed").unwrap();
    assert_eq!(row[seed], "5");
    assert_eq!(row[0], "random-0.5/multi");
    assert!(root
        .join("out/runs/random-0.5_multi/seed-5/train.csv")
        .exists());
}

#[test]
fn exit_codes() {
    let dir = setup(TINY);
    let root = dir.path();
    assert_eq!(cfft(root, &["pretrain"]).status.code(), Some(3));

    let bad = setup(r#"{"preset": "compact", "seeds": []}"#);
    assert_eq!(cfft(bad.path(), &["gen-data"]).status.code(), Some(2));
    assert_eq!(
        cfft(root, &["finetune", "--strategy", "blur"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(cfft(root, &["no-such-command"]).status.code(), Some(2));

    let strict = setup(&TINY.replace(r#""floor": 0.0"#, r#""floor": 1.01"#));
    ok(strict.path(), &["gen-data"]);
    let out = cfft(strict.path(), &["pretrain"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("below the floor"));
}

#[test]
fn stale_data_is_rejected() {
    let dir = setup(TINY);
    let root = dir.path();
    ok(root, &["gen-data"]);
    std::fs::write(
        root.join("cfg.json"),
        TINY.replace("\"seeds\": [0]", "\"seeds\": [0], \"data_seed\": 9"),
    )
    .unwrap();
    assert_eq!(cfft(root, &["pretrain"]).status.code(), Some(3));
}
