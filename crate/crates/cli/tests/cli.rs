use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use complab::data::{read_features_path, read_labels_path, write_features_path, write_labels_path};
use complab::eval::group_pair_quality;
use complab::{generate, GroupPartition, SampleLabel, SynthConfig};
use tempfile::TempDir;

fn complab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_complab"))
        .args(args)
        .env("COMPLAB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = [
    "--set",
    "ids_source=10",
    "--set",
    "ids_target=10",
    "--set",
    "per_id=8",
];

fn small_synth(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    let seed = seed.to_string();
    let mut args = vec!["synth", "--out", s(&out), "--seed", &seed];
    args.extend(SMALL);
    ok(complab(&args));
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let file = |name: &str| data.join(name).to_str().unwrap().to_owned();
    let paths = [
        ("--source", file("source.txt")),
        ("--source-labels", file("source_labels.csv")),
        ("--target", file("target.txt")),
        ("--target-truth", file("target_truth.csv")),
        ("--out", s(out).to_owned()),
    ];
    let mut args = vec!["train", "--set", "k=20"];
    for (flag, path) in &paths {
        args.push(flag);
        args.push(path);
    }
    args.extend(extra);
    complab(&args)
}

#[test]
fn synth_default_files_parse_back_losslessly() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    ok(complab(&["synth", "--out", s(&out)]));
    let want = generate(&SynthConfig::default()).unwrap();
    assert_eq!(
        read_features_path(&out.join("source.txt")).unwrap(),
        want.source.features
    );
    assert_eq!(
        read_features_path(&out.join("target.txt")).unwrap(),
        want.target.features
    );
    assert_eq!(
        read_labels_path(&out.join("target_truth.csv")).unwrap(),
        want.target.labels.unwrap()
    );
    let bin = tmp.path().join("b");
    ok(complab(&["synth", "--out", s(&bin), "--binary"]));
    assert_eq!(
        read_features_path(&bin.join("target.bin")).unwrap(),
        want.target.features
    );
}

#[test]
fn synth_same_seed_same_files() {
    let tmp = TempDir::new().unwrap();
    let a = small_synth(tmp.path(), 4);
    let b = tmp.path().join("again");
    let mut args = vec!["synth", "--out", s(&b), "--seed", "4"];
    args.extend(SMALL);
    ok(complab(&args));
    for f in [
        "source.txt",
        "source_labels.csv",
        "target.txt",
        "target_truth.csv",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn synth_rejects_bad_occlusion_fraction() {
    let tmp = TempDir::new().unwrap();
    let out = complab(&[
        "synth",
        "--out",
        s(&tmp.path().join("d")),
        "--occl-frac",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("occl_frac"));
}

#[test]
fn help_lists_every_config_key() {
    let help = ok(complab(&["train", "--help"]));
    for (key, _) in complab::config::CONFIG_KEYS {
        assert!(help.contains(key), "missing {key}");
    }
    let help = ok(complab(&["synth", "--help"]));
    for (key, _) in complab::synth::SYNTH_KEYS {
        assert!(help.contains(key), "missing {key}");
    }
}

#[test]
fn train_writes_run_and_manifest_reproduces_it() {
    let tmp = TempDir::new().unwrap();
    let data = small_synth(tmp.path(), 1);
    let run = tmp.path().join("run");
    let summary = ok(train(&data, &run, &["--epochs", "12"]));
    assert!(summary.contains("\"best_map\""));
    for f in [
        "manifest.json",
        "config.toml",
        "history.jsonl",
        "checkpoint.cmpt",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 12);
    assert!(!tmp.path().read_dir().unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with(".complab-stage")));

    let again = tmp.path().join("again");
    ok(complab(&[
        "train",
        "--manifest",
        s(&run.join("manifest.json")),
        "--out",
        s(&again),
    ]));
    assert_eq!(
        history,
        fs::read_to_string(again.join("history.jsonl")).unwrap()
    );
    let id = |p: &Path| {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(p.join("manifest.json")).unwrap()).unwrap();
        m["run_id"].clone()
    };
    assert_eq!(id(&run), id(&again));
}

#[test]
fn train_refuses_non_empty_output() {
    let tmp = TempDir::new().unwrap();
    let data = small_synth(tmp.path(), 2);
    let run = tmp.path().join("run");
    fs::create_dir(&run).unwrap();
    fs::write(run.join("keep"), "x").unwrap();
    let out = train(&data, &run, &["--epochs", "12"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read_to_string(run.join("keep")).unwrap(), "x");
}

#[test]
fn ablation_and_fraction_flags_reach_the_run() {
    let tmp = TempDir::new().unwrap();
    let data = small_synth(tmp.path(), 3);
    let run = tmp.path().join("n");
    ok(train(
        &data,
        &run,
        &[
            "--epochs",
            "12",
            "--ablation",
            "n",
            "--target-fraction",
            "0.25",
        ],
    ));
    let config = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("ablation = \"n\""));
    assert!(config.contains("target_fraction = 0.25"));
    let last: serde_json::Value = serde_json::from_str(
        fs::read_to_string(run.join("history.jsonl"))
            .unwrap()
            .lines()
            .last()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(last["active"]["neighbor"], true);
    assert_eq!(last["active"]["aggre"], false);
    assert_eq!(last["active"]["triplet_tgt"], false);
}

#[test]
fn divergence_exits_with_four() {
    let tmp = TempDir::new().unwrap();
    let data = small_synth(tmp.path(), 5);
    let run = tmp.path().join("run");
    let out = train(&data, &run, &["--epochs", "12", "--set", "lr=1e300"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(run.join("manifest.json").exists());
}

#[test]
fn missing_inputs_exit_with_three() {
    let tmp = TempDir::new().unwrap();
    let nope = tmp.path().join("nope");
    let out = complab(&[
        "eval",
        "--checkpoint",
        s(&nope),
        "--features",
        s(&nope),
        "--labels",
        s(&nope),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn eval_of_perfect_data_is_one() {
    let tmp = TempDir::new().unwrap();
    let data = small_synth(tmp.path(), 6);
    let run = tmp.path().join("run");
    ok(train(&data, &run, &["--epochs", "12"]));

    let rows: Vec<Vec<f64>> = (0..24)
        .map(|i| {
            let mut v = vec![0.0; 64];
            v[i / 4] = 1.0;
            v
        })
        .collect();
    let labels: Vec<SampleLabel> = (0..24)
        .map(|i| SampleLabel {
            identity: i / 4,
            camera: i % 4,
        })
        .collect();
    let f = tmp.path().join("perfect.txt");
    let l = tmp.path().join("perfect.csv");
    write_features_path(&f, &rows, false).unwrap();
    write_labels_path(&l, &labels).unwrap();
    let report: serde_json::Value = serde_json::from_str(&ok(complab(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint.cmpt")),
        "--features",
        s(&f),
        "--labels",
        s(&l),
    ])))
    .unwrap();
    assert_eq!(report["map"], 1.0);
    assert_eq!(report["cmc"][0], 1.0);
}

fn read_partition(path: &Path) -> Vec<usize> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn labels_before_the_neighbor_stage_are_singletons() {
    let tmp = TempDir::new().unwrap();
    let data = small_synth(tmp.path(), 7);
    let run = tmp.path().join("run");
    ok(train(
        &data,
        &run,
        &["--epochs", "4", "--set", "e1=4", "--set", "e2=4"],
    ));
    let out = tmp.path().join("p.csv");
    let report: serde_json::Value = serde_json::from_str(&ok(complab(&[
        "labels",
        "--checkpoint",
        s(&run.join("checkpoint.cmpt")),
        "--features",
        s(&data.join("target.txt")),
        "--out",
        s(&out),
    ])))
    .unwrap();
    let n = read_features_path(&data.join("target.txt")).unwrap().len();
    assert_eq!(report["groups"], n);
    assert!(report.get("group").is_none() && report.get("neighbor").is_none());
    let p = read_partition(&out);
    assert_eq!(p, (0..n).collect::<Vec<_>>());
}

#[test]
fn labels_quality_matches_pair_oracle() {
    let tmp = TempDir::new().unwrap();
    let data = small_synth(tmp.path(), 8);
    let run = tmp.path().join("run");
    ok(train(
        &data,
        &run,
        &[
            "--epochs",
            "12",
            "--set",
            "predictor=\"threshold\"",
            "--set",
            "mu=0.8",
        ],
    ));
    let out = tmp.path().join("p.csv");
    let report: serde_json::Value = serde_json::from_str(&ok(complab(&[
        "labels",
        "--checkpoint",
        s(&run.join("checkpoint.cmpt")),
        "--features",
        s(&data.join("target.txt")),
        "--truth",
        s(&data.join("target_truth.csv")),
        "--out",
        s(&out),
    ])))
    .unwrap();
    let truth: Vec<usize> = read_labels_path(&data.join("target_truth.csv"))
        .unwrap()
        .iter()
        .map(|l| l.identity)
        .collect();
    let labels = read_partition(&out);

    let (mut implied, mut correct) = (0usize, 0usize);
    for a in 0..labels.len() {
        for b in a + 1..labels.len() {
            if labels[a] == labels[b] {
                implied += 1;
                correct += usize::from(truth[a] == truth[b]);
            }
        }
    }
    let q =
        group_pair_quality(&GroupPartition::from_labels(&labels, labels.len()), &truth).unwrap();
    assert_eq!(report["group"]["implied_pairs"], implied);
    assert_eq!(report["group"]["correct_pairs"], correct);
    let close = |v: &serde_json::Value, want: f64| (v.as_f64().unwrap() - want).abs() < 1e-12;
    assert!(close(&report["group"]["precision"], q.precision));
    assert!(close(&report["group"]["recall"], q.recall));
    assert!(close(
        &report["group"]["precision"],
        correct as f64 / implied as f64
    ));
    assert!(implied > 0);
}
