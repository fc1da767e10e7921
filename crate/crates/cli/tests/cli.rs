use std::path::Path;
use std::process::{Command, Output};

use speechnet::features::audio::load_wav;

const TINY: &str = r#"
name = "tiny"
seed = 4
max_steps = 3
eval_every = 3

[model]
d_model = 16
d_ff = 32
heads = 2
unit_heads = 2
layers = 1

[optim]
batch_size = 2

[tasks]
active = ["asr", "se", "sc", "tts", "vc"]

[data]
kind = "toy"
speakers = 2
train = 4
valid = 2
test = 2
"#;

fn speechnet(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speechnet"))
        .args(args)
        .env("SPEECHNET_RUN_ROOT", root.join("runs"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_and_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();

    let o = speechnet(root, &["train", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("trained to step 3"));
    let run = root.join("runs/tiny");
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().next().unwrap().contains("\"step\":1"));
    let eval_rows = std::fs::read_to_string(run.join("eval.tsv")).unwrap();
    assert!(eval_rows.contains("SISDR") && eval_rows.contains("valid"));
    let ckpt = run.join("checkpoints/last.ckpt");
    assert!(ckpt.exists());

    let o = speechnet(root, &["eval", "--config", s(&cfg), "--ckpt", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("task\tmetric\tvalue\tsplit\tcheckpoint"));
    for m in ["WER", "SISDR", "STOI", "ACC", "MSE"] {
        assert!(text.contains(m), "{m} missing from {text}");
    }

    let data = root.join("data");
    speechnet::features::toy::make_toy_split(9, 2, 2, speechnet::features::Split::Test)
        .unwrap()
        .write(&data)
        .unwrap();
    let wav = walk(&data)
        .into_iter()
        .find(|p| p.extension().is_some_and(|e| e == "wav") && !s(p).contains("noisy"))
        .expect("toy wav");
    let out = root.join("out");
    for task in ["asr", "sc"] {
        let o = speechnet(root, &["infer", "--task", task, "--ckpt", s(&ckpt), "--in", s(&wav), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).trim_end().ends_with(".txt"));
    }
    let o = speechnet(root, &["infer", "--task", "se", "--ckpt", s(&ckpt), "--in", s(&wav), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let text = root.join("hello.txt");
    std::fs::write(&text, "sun moon\n").unwrap();
    let tts_out = root.join("tts");
    let o = speechnet(
        root,
        &["infer", "--task", "tts", "--ckpt", s(&ckpt), "--in", s(&text), "--out", s(&tts_out), "--speaker", "1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = std::fs::read_to_string(tts_out.join("hello.tsv")).unwrap().lines().count();
    assert_eq!(rows % 4, 0);
    let audio = load_wav(tts_out.join("hello.wav")).unwrap();
    assert_eq!(audio.len(), (rows - 1) * 160 + 400);

    let o = speechnet(root, &["infer", "--task", "vc", "--ckpt", s(&ckpt), "--in", s(&wav), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[E_MISSING]"));
    let o = speechnet(
        root,
        &["infer", "--task", "vc", "--ckpt", s(&ckpt), "--in", s(&wav), "--out", s(&out), "--reference", s(&wav)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn errors_are_single_coded_lines() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("bad.toml");
    std::fs::write(&cfg, "max_steps = 0\n[tasks]\nasr.alpha = 3.0\n").unwrap();
    let o = speechnet(root, &["train", "--config", s(&cfg)]);
    assert!(!o.status.success());
    let err = stderr(&o);
    let line = err.lines().find(|l| l.starts_with("error[")).unwrap();
    assert!(line.starts_with("error[E_CONFIG]"), "{line}");
    assert!(line.contains("tasks.active") && line.contains("alpha") && line.contains("max_steps"));

    let o = speechnet(root, &["eval", "--config", s(&cfg), "--ckpt", "/nonexistent.ckpt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[E_"));
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = root.join("runs/tiny");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("run.lock"), "1\n").unwrap();
    let o = speechnet(root, &["train", "--config", s(&cfg)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[E_LOCKED]"));
}

#[test]
fn restricted_matrix_writes_tables_with_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let grid = root.join("grid.toml");
    let base = TINY
        .replace("name = \"tiny\"\n", "")
        .replace("eval_every = 3", "eval_every = 0")
        .replace("max_steps = 3", "max_steps = 2")
        .replace("[tasks]\nactive = [\"asr\", \"se\", \"sc\", \"tts\", \"vc\"]\n", "")
        .replace("[model]", "[base.model]")
        .replace("[optim]", "[base.optim]")
        .replace("[data]", "[base.data]");
    std::fs::write(&grid, format!("tasks = [\"asr\", \"sc\"]\n[base]\n{base}")).unwrap();
    let out = root.join("matrix");
    let o = speechnet(root, &["matrix", "--grid", s(&grid), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["results.tsv", "two_task_table.tsv", "five_task_table.tsv", "improvement_graph.txt", "matrix.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let results = std::fs::read_to_string(out.join("results.tsv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 4);
    let table = std::fs::read_to_string(out.join("two_task_table.tsv")).unwrap();
    assert!(table.contains("n/a"));
    assert!(std::fs::read_dir(out.join("runs")).unwrap().count() == 4);
}
