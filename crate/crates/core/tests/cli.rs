//! End-to-end runs of the `unicornn` binary.
//!
//! Help texts are compared against files in `tests/golden/`. Set
//! `UNICORNN_BLESS=1` to rewrite them after an intentional change.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unicornn::tasks::{load_checkpoint, load_csv_sequences, read_metrics, CsvSchema, Split};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unicornn"));
    c.env_remove("UNICORNN_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A few short Lorenz sequences so that training finishes in well under a
/// second.
const TINY_LORENZ: &[&str] = &[
    "--preset",
    "lorenz-f09",
    "--set",
    "task.n_train=6",
    "--set",
    "task.n_valid=3",
    "--set",
    "task.n_test=3",
    "--set",
    "task.seq_len=40",
    "--epochs",
    "2",
];

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(TINY_LORENZ);
    args.extend_from_slice(&["--out", dir.to_str().unwrap()]);
    args.extend_from_slice(extra);
    run(&args)
}

fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.txt"))
}

fn check_golden(name: &str, args: &[&str]) {
    let out = run(args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let got = stdout(&out);
    let path = golden_path(name);
    if std::env::var_os("UNICORNN_BLESS").is_some() {
        std::fs::write(&path, &got).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(
        got,
        want,
        "help text of `{}` changed; rerun with UNICORNN_BLESS=1 if intended",
        args.join(" ")
    );
}

#[test]
fn help_texts_match_golden_files() {
    check_golden("help", &["--help"]);
    for sub in ["train", "eval", "verify", "bench", "gen-data"] {
        check_golden(&format!("help-{sub}"), &[sub, "--help"]);
    }
}

#[test]
fn help_lists_every_flag() {
    let flags = [
        (
            "train",
            &[
                "--config",
                "--preset",
                "--task",
                "--data",
                "--set",
                "--seed",
                "--epochs",
                "--lr",
                "--out",
                "--dry-run",
                "--verbose",
                "--threads",
            ][..],
        ),
        (
            "eval",
            &[
                "--checkpoint",
                "--split",
                "--max-nrmse",
                "--min-accuracy",
                "--config",
                "--preset",
                "--set",
            ][..],
        ),
        ("verify", &["--suite", "--seed", "--inject-fault", "--json"][..]),
        (
            "bench",
            &[
                "--steps",
                "--hidden",
                "--layers",
                "--batch",
                "--input-dim",
                "--repeats",
                "--warmup",
                "--impl",
                "--seed",
                "--out",
            ][..],
        ),
        ("gen-data", &["--F", "--seed", "--set", "--out"][..]),
    ];
    for (sub, names) in flags {
        let text = stdout(&run(&[sub, "--help"]));
        for flag in names {
            assert!(text.contains(flag), "{sub} --help lacks {flag}");
        }
    }
}

#[test]
fn verify_volume_runs_only_volume_checks() {
    let out = run(&["verify", "--suite", "volume"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| l.ends_with("pass") || l.ends_with("FAIL"))
        .collect();
    assert_eq!(rows.len(), 2, "{text}");
    assert!(rows.iter().all(|r| r.starts_with("volume/")), "{text}");
}

#[test]
fn corrupted_backward_fails_fd_match() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("records.json");
    let out = run(&[
        "verify",
        "--suite",
        "fd-match",
        "--inject-fault",
        "corrupt-backward",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "{}", stdout(&out));
    assert!(stdout(&out).contains("FAIL"));
    let records: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(records[0]["name"], "fd-match");
    assert_eq!(records[0]["passed"], false);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&run(&["verify", "--suite", "everything"])), 2);
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["train", "--preset", "unknown"])), 2);
    assert_eq!(code(&run(&["train", "--set", "model.depth=3", "--dry-run"])), 2);
    assert_eq!(code(&run(&["bench", "--impl", "turbo"])), 2);
    assert_eq!(code(&run(&["--threads", "0", "verify", "--suite", "volume"])), 2);
    let out = bin()
        .env("UNICORNN_THREADS", "0")
        .args(["verify", "--suite", "volume"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--threads"));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let out = bin()
        .env("UNICORNN_THREADS", "1")
        .args(["verify", "--suite", "volume"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn missing_dataset_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-data.csv");
    let out = run(&[
        "train",
        "--task",
        "csv",
        "--data",
        missing.to_str().unwrap(),
        "--set",
        "task.input_dim=2",
        "--set",
        "task.target=label",
        "--set",
        "task.n_classes=2",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no-such-data.csv"), "{}", stderr(&out));
}

#[test]
fn train_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = train_tiny(&run_dir, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("best epoch"));

    let echoed = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    let cfg = unicornn::config::RunConfig::from_toml(&echoed).unwrap();
    assert_eq!(cfg.train.epochs, 2);
    assert_eq!(cfg.output.dir, run_dir);

    let rows = read_metrics(&run_dir.join("metrics.csv")).unwrap();
    for epoch in 1..=2 {
        for (split, metric) in [
            (Split::Train, "loss"),
            (Split::Train, "lr"),
            (Split::Valid, "loss"),
            (Split::Valid, "nrmse"),
        ] {
            assert!(rows
                .iter()
                .any(|r| r.epoch == epoch && r.split == split && r.metric == metric));
        }
    }
    assert!(rows.iter().any(|r| r.split == Split::Test && r.metric == "nrmse"));

    let best = load_checkpoint(&run_dir.join("best.ckpt.json")).unwrap();
    assert_eq!(best.model.config, cfg.model_config().unwrap());
    assert_eq!(best.meta.task, "lorenz96");
    assert!(best.meta.metrics.contains_key("test_nrmse"));
    let last = load_checkpoint(&run_dir.join("last.ckpt.json")).unwrap();
    assert_eq!(last.meta.epoch, 2);
    assert!(last.optimizer.is_some());
}

#[test]
fn same_seed_gives_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        assert_eq!(code(&train_tiny(d, &["--seed", "7"])), 0);
    }
    assert_eq!(code(&train_tiny(&c, &["--seed", "8"])), 0);
    // Wall-clock times differ from run to run; every other column must not.
    let strip = |d: &Path| -> Vec<(usize, Split, String, u64)> {
        read_metrics(&d.join("metrics.csv"))
            .unwrap()
            .into_iter()
            .map(|r| (r.epoch, r.split, r.metric, r.value.to_bits()))
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_ne!(strip(&a), strip(&c));
    for f in ["best.ckpt.json", "last.ckpt.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(&dir.path().join("run"), &["--lr", "1e300"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn eval_scores_checkpoints_and_enforces_targets() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    assert_eq!(code(&train_tiny(&run_dir, &[])), 0);
    let ckpt = run_dir.join("best.ckpt.json");
    let ckpt = ckpt.to_str().unwrap();

    let out = run(&["eval", "--checkpoint", ckpt]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("test split (3 sequences)"), "{}", stdout(&out));
    assert_eq!(code(&run(&["eval", "--checkpoint", ckpt, "--max-nrmse", "1e-9"])), 1);
    assert_eq!(
        code(&run(&[
            "eval",
            "--checkpoint",
            ckpt,
            "--max-nrmse",
            "1e9",
            "--split",
            "valid"
        ])),
        0
    );
    assert_eq!(code(&run(&["eval", "--checkpoint", ckpt, "--min-accuracy", "0.5"])), 2);

    let out = run(&["eval", "--checkpoint", ckpt, "--set", "model.layers=3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("layer 3"), "{}", stderr(&out));
}

#[test]
fn gen_data_writes_the_default_lorenz_splits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l96.csv");
    let out = run(&["gen-data", "lorenz96", "--F", "0.9", "--out", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("384 sequences (128 train, 128 valid, 128 test)"));
    let ds = load_csv_sequences(&path, &CsvSchema::sequence(5, 5)).unwrap();
    assert_eq!(ds.split_counts(), [128, 128, 128]);
    assert!(ds.inputs.iter().all(|x| x.shape() == (2000, 5)));
}

#[test]
fn gen_data_chaotic_variant_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f8.csv");
    let out = run(&[
        "gen-data",
        "lorenz96",
        "--F",
        "8",
        "--seed",
        "3",
        "--set",
        "n_train=2",
        "--set",
        "n_valid=1",
        "--set",
        "n_test=1",
        "--set",
        "seq_len=30",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ds = load_csv_sequences(&path, &CsvSchema::sequence(5, 5)).unwrap();
    assert_eq!(ds.split_counts(), [2, 1, 1]);
    // Around the F = 8 equilibrium after burn-in the components spread far
    // beyond the initial ±0.5 perturbation.
    let spread = ds.inputs[0].max_abs();
    assert!(spread > 9.0, "{spread}");

    assert_eq!(
        code(&run(&[
            "gen-data",
            "noise-padded",
            "--F",
            "1",
            "--out",
            path.to_str().unwrap()
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "gen-data",
            "lorenz96",
            "--set",
            "colour=3",
            "--out",
            path.to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn gen_data_to_an_unwritable_path_fails() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("missing-dir").join("out.csv");
    let out = run(&[
        "gen-data",
        "lorenz96",
        "--set",
        "n_train=1",
        "--set",
        "n_valid=1",
        "--set",
        "n_test=1",
        "--set",
        "seq_len=5",
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("out.csv"));
}

#[test]
fn csv_round_trip_through_train() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("np.csv");
    let out = run(&[
        "gen-data",
        "noise-padded",
        "--set",
        "n_samples=24",
        "--set",
        "content_len=4",
        "--set",
        "pad_len=6",
        "--set",
        "input_dim=3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--task",
        "csv",
        "--data",
        data.to_str().unwrap(),
        "--set",
        "task.input_dim=3",
        "--set",
        "task.target=label",
        "--set",
        "task.n_classes=4",
        "--set",
        "model.layers=1",
        "--set",
        "model.hidden=8",
        "--epochs",
        "2",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("accuracy"));
    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("best.ckpt.json").to_str().unwrap(),
        "--min-accuracy",
        "0",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn dry_run_echoes_the_merged_configuration() {
    let out = run(&[
        "train",
        "--preset",
        "psmnist-128",
        "--set",
        "model.layers=3",
        "--lr",
        "0.5",
        "--dry-run",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = unicornn::config::RunConfig::from_toml(&stdout(&out)).unwrap();
    assert_eq!(cfg.model.hidden, 128);
    assert_eq!(cfg.model.layers, 3);
    assert_eq!(cfg.model.alpha, 12.53);
    assert_eq!(cfg.train.lr, 0.5);
    assert_eq!(cfg.train.batch_size, 64);
}

#[test]
fn bench_with_degenerate_sizes_reports_nonzero_times() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = run(&[
        "bench",
        "--steps",
        "1",
        "--batch",
        "1",
        "--hidden",
        "2",
        "--layers",
        "1",
        "--repeats",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text, stdout(&out));
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let mean: f64 = r.split(',').nth(6).unwrap().parse().unwrap();
        assert!(mean > 0.0);
    }
}
