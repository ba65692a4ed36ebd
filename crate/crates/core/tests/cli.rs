use std::path::Path;
use std::process::{Command, Output};

use adaact_kit::cli::{parse_config_in, run_train};
use adaact_kit::data::encode_idx_labels;
use adaact_kit::diagnostics::{read_metrics_csv, MetricsRecord};

const BLOBS: &str = r#"
[dataset]
kind = "blobs"
classes = 3
per_class = 40
dims = 6

[model]
input = [6]
layers = ["dense:12", "relu", "dense:3"]

[optim]
kind = "adaact"

[run]
seed = 3
epochs = 3
batch_size = 16
"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaact-kit")).current_dir(dir).args(args).output().unwrap()
}

fn read_metrics_csv_path(path: &Path) -> Vec<MetricsRecord> {
    read_metrics_csv(std::fs::File::open(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn train_writes_csv_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.toml", BLOBS);
    let out = bin(dir.path(), &["train", "-c", "cfg.toml", "--out", "m.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let records = read_metrics_csv_path(&dir.path().join("m.csv"));
    // 96 training rows in batches of 16, three epochs.
    assert_eq!(records.len(), 18);
    assert!(records.windows(2).all(|w| w[0].step < w[1].step));
    assert_eq!(records.iter().filter(|r| r.acc.is_some()).count(), 3);
    let ckpt = std::fs::read(dir.path().join("m.ckpt")).unwrap();
    assert_eq!(&ckpt[..5], b"AAKT1");

    let report = bin(dir.path(), &["report", "--in", "m.csv"]);
    assert_eq!(report.status.code(), Some(0));
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.starts_with("steps: 18\n") && text.contains("actvar_L1:"), "{text}");
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.toml", BLOBS);
    bin(dir.path(), &["train", "-c", "cfg.toml", "--out", "a.csv"]);
    bin(dir.path(), &["train", "-c", "cfg.toml", "--out", "b.csv", "--seed", "3"]);
    bin(dir.path(), &["train", "-c", "cfg.toml", "--out", "c.csv", "--seed", "4"]);
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
}

#[test]
fn stability_subcommand_logs_pair_columns() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.toml", BLOBS);
    let out = bin(dir.path(), &["stability", "-c", "cfg.toml", "--replace-index", "5", "--out", "s.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let records = read_metrics_csv_path(&dir.path().join("s.csv"));
    assert!(records
        .iter()
        .all(|r| r.delta_t.is_some_and(f64::is_finite) && r.term_a.is_some_and(f64::is_finite)));
    assert!(records.last().unwrap().delta_t.unwrap() > 0.0);

    let same = bin(dir.path(), &["stability", "-c", "cfg.toml", "--out", "z.csv"]);
    assert_eq!(same.status.code(), Some(0));
    let records = read_metrics_csv_path(&dir.path().join("z.csv"));
    assert!(records.iter().all(|r| r.delta_t == Some(0.0) && r.term_a == Some(0.0)));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (
            BLOBS.replace("kind = \"blobs\"", "kind = \"idx\"\nimages = \"nope.idx\"\nlabels = \"nope.idx\""),
            "dataset.images",
        ),
        (BLOBS.replace("[optim]\n", "[optim]\nlr_warmup = 5\n"), "optim.lr_warmup"),
        (BLOBS.replace("[optim]\n", "[optim]\nbeta2 = 1.5\n"), "optim.beta2"),
        (BLOBS.replace("seed = 3\n", ""), "run.seed"),
        (BLOBS.replace("epochs = 3", "epochs = = 3"), "line 17"),
    ];
    for (text, needle) in cases {
        write(dir.path(), "bad.toml", &text);
        let out = bin(dir.path(), &["train", "-c", "bad.toml"]);
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(2), "{needle}: {err}");
        assert!(err.contains(needle), "{needle} not in {err}");
    }
    assert_eq!(bin(dir.path(), &["train"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("img.idx"), b"\x00\x00\x08\x03garbage").unwrap();
    std::fs::write(dir.path().join("lbl.idx"), encode_idx_labels(&[0, 1])).unwrap();
    let text = r#"
[dataset]
kind = "idx"
images = "img.idx"
labels = "lbl.idx"

[model]
input = [784]
layers = ["dense:2"]

[optim]
kind = "sgd"

[run]
seed = 1
"#;
    write(dir.path(), "cfg.toml", text);
    let out = bin(dir.path(), &["train", "-c", "cfg.toml"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let missing = bin(dir.path(), &["report", "--in", "absent.csv"]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn divergence_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.toml", &BLOBS.replace("kind = \"adaact\"", "kind = \"sgd\"\nlr = 1e200"));
    let out = bin(dir.path(), &["train", "-c", "cfg.toml"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(4), "{err}");
    assert!(err.contains("step"), "{err}");
}

#[test]
fn plain_sgd_separates_two_blobs() {
    let text = r#"
[dataset]
kind = "blobs"
classes = 2
per_class = 100
dims = 2

[model]
input = [2]
layers = ["dense:8", "relu", "dense:2"]

[optim]
kind = "sgd"
beta1 = 0.0

[run]
seed = 9
epochs = 20
batch_size = 16
"#;
    let cfg = parse_config_in(text, Path::new(".")).unwrap();
    let outcome = run_train(&cfg).unwrap();
    assert!(outcome.final_train_acc > 0.99, "{}", outcome.final_train_acc);
}
