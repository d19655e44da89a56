use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SCHEMA: &str = "\
g1:gaussian
g2:gaussian
b:bernoulli
c:categorical:3
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        ws.write("schema.txt", SCHEMA);
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write(&self, rel: &str, text: &str) {
        std::fs::write(self.path(rel), text).unwrap();
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mlgplvm"));
        cmd.args(args)
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .env_remove("MLGPLVM_OUTPUT_DIR");
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().expect("spawn mlgplvm")
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "mlgplvm {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn synth(&self, out: &str, points: &str) {
        self.ok(&[
            "synth",
            "--schema",
            "schema.txt",
            "-n",
            points,
            "-q",
            "2",
            "-s",
            "7",
            "-o",
            out,
        ]);
    }

    fn train(&self, data: &str, out: &str, extra: &[&str]) {
        self.train_steps(data, out, "40", extra);
    }

    fn train_steps(&self, data: &str, out: &str, steps: &str, extra: &[&str]) {
        let mut args = vec![
            "train",
            "--schema",
            "schema.txt",
            "--data",
            data,
            "-q",
            "2",
            "-m",
            "6",
            "-t",
            "2",
            "--max-steps",
            steps,
            "--learning-rate",
            "0.01",
            "-o",
            out,
        ];
        args.extend_from_slice(extra);
        self.ok(&args);
    }
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = match std::fs::read_dir(dir) {
        Ok(rd) => rd
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect(),
        Err(_) => Vec::new(),
    };
    names.sort();
    names
}

/// JSON body of a checkpoint, without its header comment.
fn body(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn synth_is_deterministic() {
    let ws = Workspace::new();
    ws.synth("a", "25");
    ws.synth("b", "25");
    for f in ["synthetic.csv", "latents_true.csv"] {
        assert_eq!(ws.read(&format!("a/{f}")), ws.read(&format!("b/{f}")));
    }
    let data = ws.read("a/synthetic.csv");
    assert!(data.starts_with("# mlgplvm "));
    assert_eq!(data.lines().filter(|l| !l.starts_with('#')).count(), 26);
}

#[test]
fn zero_points_rejected_without_outputs() {
    let ws = Workspace::new();
    let out = ws.run(&["synth", "--schema", "schema.txt", "-n", "0", "-o", "out"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    assert!(!ws.path("out").exists());
}

#[test]
fn invalid_schema_path_leaves_no_outputs() {
    let ws = Workspace::new();
    ws.synth("syn", "20");
    let out = ws.run(&[
        "train",
        "--schema",
        "missing.txt",
        "--data",
        "syn/synthetic.csv",
        "-o",
        "out",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing.txt"), "{err}");
    assert!(files(&ws.path("out")).is_empty());
}

#[test]
fn full_workflow_writes_headed_artifacts() {
    let ws = Workspace::new();
    ws.synth("syn", "30");
    let before = ws.read("syn/synthetic.csv");
    ws.train(
        "syn/synthetic.csv",
        "run",
        &["--holdout", "points=0.3,attrs=1"],
    );
    assert_eq!(
        files(&ws.path("run")),
        [
            "ard.csv",
            "checkpoint.json",
            "holdout.csv",
            "latents.csv",
            "plot.csv",
            "schema.txt",
            "trace.csv"
        ]
    );
    ws.ok(&["eval", "--checkpoint", "run/checkpoint.json", "-o", "run"]);
    ws.ok(&[
        "impute",
        "--checkpoint",
        "run/checkpoint.json",
        "--holdout-file",
        "run/holdout.csv",
        "-o",
        "run",
    ]);
    ws.ok(&[
        "export-latents",
        "--checkpoint",
        "run/checkpoint.json",
        "-o",
        "exp",
    ]);
    assert_eq!(
        ws.read("syn/synthetic.csv"),
        before,
        "inputs must not change"
    );

    for f in files(&ws.path("run"))
        .into_iter()
        .chain(["../exp/latents.csv".into()])
    {
        let text = ws.read(&format!("run/{f}"));
        let head: Vec<&str> = text.lines().take(4).collect();
        assert!(head[0].starts_with("# mlgplvm "), "{f}");
        assert!(head[2].starts_with("# seed "), "{f}");
        assert!(head[3].starts_with("# config "), "{f}");
    }
    let trace = ws.read("run/trace.csv");
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 41);
    let holdout_rows = ws
        .read("run/holdout.csv")
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count()
        - 1;
    assert_eq!(holdout_rows, 9);
    let predictions = ws.read("run/predictions.csv");
    assert_eq!(
        predictions.lines().filter(|l| !l.starts_with('#')).count(),
        holdout_rows + 1
    );
    let summary = ws.read("run/impute_summary.txt");
    assert!(summary.contains("test_log_likelihood"));
    assert!(summary.contains("log_perplexity_bits"));
    let metrics = ws.read("run/metrics.csv");
    assert!(metrics.contains("active_dims"));
    let plot = ws.read("run/plot.csv");
    let first = plot
        .lines()
        .find(|l| !l.starts_with('#') && !l.starts_with("point"))
        .unwrap();
    assert!(
        first.ends_with(','),
        "label column is empty without labels: {first}"
    );
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ws = Workspace::new();
    ws.synth("syn", "20");
    ws.train("syn/synthetic.csv", "whole", &[]);
    ws.train_steps("syn/synthetic.csv", "part", "15", &[]);
    ws.ok(&[
        "train",
        "--checkpoint",
        "part/checkpoint.json",
        "-t",
        "2",
        "--max-steps",
        "40",
        "--learning-rate",
        "0.01",
        "-o",
        "resumed",
    ]);
    assert_eq!(
        body(&ws.read("resumed/checkpoint.json")),
        body(&ws.read("whole/checkpoint.json"))
    );
    assert_eq!(
        ws.read("resumed/latents.csv")
            .lines()
            .skip(4)
            .collect::<Vec<_>>(),
        ws.read("whole/latents.csv")
            .lines()
            .skip(4)
            .collect::<Vec<_>>()
    );

    ws.ok(&[
        "train",
        "--checkpoint",
        "whole/checkpoint.json",
        "-t",
        "2",
        "--max-steps",
        "40",
        "--learning-rate",
        "0.01",
        "-o",
        "again",
    ]);
    assert_eq!(
        body(&ws.read("again/checkpoint.json")),
        body(&ws.read("whole/checkpoint.json"))
    );
    assert_eq!(
        ws.read("again/trace.csv")
            .lines()
            .filter(|l| !l.starts_with('#'))
            .count(),
        1
    );
}

#[test]
fn config_file_with_flag_override_and_env_output_dir() {
    let ws = Workspace::new();
    ws.write(
        "run.toml",
        "schema = \"schema.txt\"\npoints = 12\nlatent_dim = 2\nseed = 7\n",
    );
    let out = ws.run_env(
        &["synth", "-c", "run.toml"],
        &[("MLGPLVM_OUTPUT_DIR", "from-env")],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    ws.synth("flags", "12");
    assert_eq!(
        ws.read("from-env/synthetic.csv")
            .lines()
            .skip(4)
            .collect::<Vec<_>>(),
        ws.read("flags/synthetic.csv")
            .lines()
            .skip(4)
            .collect::<Vec<_>>()
    );
    ws.ok(&["synth", "-c", "run.toml", "-n", "5", "-o", "override"]);
    assert_eq!(
        ws.read("override/synthetic.csv")
            .lines()
            .filter(|l| !l.starts_with('#'))
            .count(),
        6
    );

    ws.write("bad.toml", "latnt_dim = 2\n");
    let out = ws.run(&["synth", "-c", "bad.toml", "-o", "bad"]);
    assert!(!out.status.success());
    assert!(!ws.path("bad").exists());
}

#[test]
fn label_metrics_need_labels() {
    let ws = Workspace::new();
    ws.synth("syn", "20");
    ws.train("syn/synthetic.csv", "run", &[]);
    let out = ws.run(&[
        "eval",
        "--checkpoint",
        "run/checkpoint.json",
        "--metrics",
        "1nn-error",
        "-o",
        "ev",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("label column"));
    assert!(files(&ws.path("ev")).is_empty());
}

#[test]
fn labelled_eval_reports_one_nn_errors() {
    let ws = Workspace::new();
    let mut csv = String::from("x,y,kind\n");
    for i in 0..24 {
        let (cx, label) = if i % 2 == 0 {
            (-3.0, "left")
        } else {
            (3.0, "right")
        };
        csv.push_str(&format!(
            "{},{},{label}\n",
            cx + 0.1 * (i as f64).sin(),
            0.2 * (i as f64).cos()
        ));
    }
    ws.write("labelled.csv", &csv);
    ws.write("labelled.txt", "x:gaussian\ny:gaussian\nkind:label\n");
    ws.ok(&[
        "train",
        "--schema",
        "labelled.txt",
        "--data",
        "labelled.csv",
        "-q",
        "2",
        "-m",
        "5",
        "--max-steps",
        "30",
        "--init",
        "pca",
        "-o",
        "run",
    ]);
    ws.ok(&["eval", "--checkpoint", "run/checkpoint.json", "-o", "run"]);
    let metrics = ws.read("run/metrics.txt");
    assert!(metrics.contains("1nn_error"), "{metrics}");
    assert!(metrics.contains("pca_1nn_error"), "{metrics}");
    let plot = ws.read("run/plot.csv");
    assert!(plot.lines().any(|l| l.ends_with(",left")));
}

#[test]
fn empty_holdout_gives_zero_entries() {
    let ws = Workspace::new();
    ws.synth("syn", "15");
    ws.train("syn/synthetic.csv", "run", &[]);
    ws.ok(&[
        "impute",
        "--checkpoint",
        "run/checkpoint.json",
        "--holdout-file",
        "run/holdout.csv",
        "-o",
        "imp",
    ]);
    let summary = ws.read("imp/impute_summary.csv");
    let entries = summary.lines().find(|l| l.starts_with("entries,")).unwrap();
    assert!(entries.starts_with("entries,0,"), "{entries}");
}

#[test]
fn all_gaussian_run_reuses_holdout() {
    let ws = Workspace::new();
    ws.synth("syn", "30");
    ws.train(
        "syn/synthetic.csv",
        "mixed",
        &["--holdout", "points=0.3,attrs=2"],
    );
    ws.train(
        "syn/synthetic.csv",
        "gauss",
        &[
            "--holdout-file",
            "mixed/holdout.csv",
            "--all-gaussian",
            "true",
        ],
    );
    assert!(ws.read("gauss/schema.txt").contains("c=2:gaussian"));
    let source: Vec<String> = ws
        .read("gauss/holdout_source.csv")
        .lines()
        .skip(4)
        .map(String::from)
        .collect();
    let original: Vec<String> = ws
        .read("mixed/holdout.csv")
        .lines()
        .skip(4)
        .map(String::from)
        .collect();
    assert_eq!(source, original);
    ws.ok(&[
        "impute",
        "--checkpoint",
        "gauss/checkpoint.json",
        "--holdout-file",
        "gauss/holdout.csv",
        "-o",
        "gi",
    ]);
    ws.ok(&[
        "impute",
        "--checkpoint",
        "mixed/checkpoint.json",
        "--holdout-file",
        "mixed/holdout.csv",
        "-o",
        "mi",
    ]);

    let out = ws.run(&[
        "impute",
        "--checkpoint",
        "mixed/checkpoint.json",
        "--holdout-file",
        "gauss/holdout.csv",
        "-o",
        "x",
    ]);
    assert!(
        !out.status.success(),
        "widened holdout does not fit the mixed model"
    );
}

#[test]
fn sequential_and_parallel_outputs_match() {
    let ws = Workspace::new();
    ws.synth("syn", "20");
    ws.train("syn/synthetic.csv", "par", &["--exec", "parallel"]);
    ws.train("syn/synthetic.csv", "seq", &["--exec", "sequential"]);
    for f in files(&ws.path("par")) {
        assert_eq!(
            ws.read(&format!("par/{f}")),
            ws.read(&format!("seq/{f}")),
            "{f}"
        );
    }
}

#[test]
fn unknown_metric_is_an_error() {
    let ws = Workspace::new();
    ws.synth("syn", "12");
    ws.train("syn/synthetic.csv", "run", &[]);
    let out = ws.run(&[
        "eval",
        "--checkpoint",
        "run/checkpoint.json",
        "--metrics",
        "accuracy",
        "-o",
        "ev",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown metric"));
}
