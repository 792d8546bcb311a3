use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn comve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comve"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, head: &str, extra: &str, train: &str) -> String {
    let path = dir.join(format!("{head}.toml"));
    fs::write(
        &path,
        format!(
            r#"
task = "A"
head = "{head}"
{extra}
output_dir = "run-{head}"

[encoder]
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
max_sequence_length = 24
pooling = "mean"

[train]
batch_size = 16
epochs = 3
seed = 5
{train}

[data]
synthetic = {{ seed = 3, train = 96, dev = 40 }}
"#
        ),
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .parse()
        .unwrap()
}

#[test]
fn train_then_eval_is_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "siamese", "", "");
    let out = comve(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let run = tmp.path().join("run-siamese");
    for f in ["best.ckpt", "final.ckpt", "vocab.txt", "train.log", "data/dev_data.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let last_dev: f64 = log.lines().last().unwrap().split('\t').nth(3).unwrap().parse().unwrap();

    let preds = tmp.path().join("preds.csv");
    let ev = comve(&[
        "eval",
        "--checkpoint",
        run.join("final.ckpt").to_str().unwrap(),
        "--data",
        run.join("data/dev_data.csv").to_str().unwrap(),
        "--answers",
        run.join("data/dev_answers.csv").to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(ev.status.code(), Some(0), "{}", stderr(&ev));
    let text = stdout(&ev);
    assert_eq!(field(&text, "accuracy"), last_dev);
    assert_eq!(field(&text, "fallacy_rate"), 0.0);
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 41);
}

#[test]
fn binary_phrase_run_reports_fallacy_rate_and_predicts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "binary", "template = \"more_sense\"", "");
    assert_eq!(comve(&["train", "--config", &cfg]).status.code(), Some(0));
    let run = tmp.path().join("run-binary");
    let ckpt = run.join("best.ckpt");
    let data = run.join("data/dev_data.csv");

    let ev = comve(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--answers",
        run.join("data/dev_answers.csv").to_str().unwrap(),
    ]);
    assert_eq!(ev.status.code(), Some(0));
    let rate = field(&stdout(&ev), "fallacy_rate");
    assert!((0.0..=1.0).contains(&rate));
    assert!(run.join("predictions.csv").exists());

    let out = tmp.path().join("p.csv");
    let pr = comve(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert_eq!(pr.status.code(), Some(0), "{}", stderr(&pr));
    let text = fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().next(), Some("id,predicted_label"));
    assert_eq!(text.lines().count(), 41);

    let rep = comve(&[
        "report",
        "--reference",
        "--data",
        data.to_str().unwrap(),
        "--answers",
        run.join("data/dev_answers.csv").to_str().unwrap(),
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(rep.status.code(), Some(0), "{}", stderr(&rep));
    assert!(stdout(&rep).contains("binary+phrase"));
    assert!(stdout(&rep).contains("84.3% (BERT Classifier + phrase concat.)"));
}

#[test]
fn missing_data_file_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(
        &cfg,
        "task = \"A\"\nhead = \"siamese\"\noutput_dir = \"o\"\n[data]\ntrain_data = \"nowhere/train.csv\"\ntrain_answers = \"a.csv\"\ndev_data = \"d.csv\"\ndev_answers = \"e.csv\"\n",
    )
    .unwrap();
    let out = comve(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere/train.csv"), "{}", stderr(&out));
}

#[test]
fn bad_config_and_usage_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "siamese", "template = \"more_sense\"", "");
    let out = comve(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("binary head only"), "{}", stderr(&out));
    assert_eq!(comve(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(comve(&["eval"]).status.code(), Some(2));
}

#[test]
fn diverging_training_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "siamese", "", "lr = 1e300\ngrad_clip_norm = 0.0\nweight_decay = 0.0");
    let out = comve(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("step"), "{}", stderr(&out));
}

#[test]
fn checkpoint_mismatches_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "siamese", "", "");
    assert_eq!(comve(&["train", "--config", &cfg]).status.code(), Some(0));
    let run = tmp.path().join("run-siamese");

    let gen = tmp.path().join("gen");
    assert_eq!(comve(&["gen-synthetic", "--count", "12", "--out-dir", gen.to_str().unwrap()]).status.code(), Some(0));
    // Explanation data against a validation checkpoint.
    let out = comve(&[
        "eval",
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
        "--data",
        gen.join("subtaskB_data.csv").to_str().unwrap(),
        "--answers",
        gen.join("subtaskB_answers.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let broken = tmp.path().join("broken.ckpt");
    let bytes = fs::read(run.join("best.ckpt")).unwrap();
    fs::write(&broken, &bytes[..bytes.len() / 2]).unwrap();
    let out = comve(&[
        "eval",
        "--checkpoint",
        broken.to_str().unwrap(),
        "--data",
        gen.join("subtaskA_data.csv").to_str().unwrap(),
        "--answers",
        gen.join("subtaskA_answers.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("broken.ckpt"));
}

#[test]
fn gen_synthetic_writes_both_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = comve(&["gen-synthetic", "--seed", "4", "--count", "9", "--out-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["subtaskA_data.csv", "subtaskA_answers.csv", "subtaskB_data.csv", "subtaskB_answers.csv"] {
        assert_eq!(fs::read_to_string(tmp.path().join(f)).unwrap().lines().count(), 10, "{f}");
    }
}

#[test]
fn selfcheck_passes_quickly_and_lists_softmax_check() {
    let start = std::time::Instant::now();
    let out = comve(&["selfcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS softmax normalization"));
    assert!(!text.contains("FAIL"));
    assert!(start.elapsed().as_secs() < 60);
}
