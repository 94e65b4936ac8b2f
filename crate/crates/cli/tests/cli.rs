//! End-to-end checks of the `wd` binary: exit codes, artifact layout,
//! determinism, and the table contracts of ablate/sweep/bench. Configs here
//! are deliberately tiny (or zero-epoch) so every invocation stays fast.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Mutex, MutexGuard};

use tempfile::TempDir;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn wd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wd"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    wd().args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_status(out: &Output, expect: i32) {
    let got = out.status.code().unwrap_or(-1);
    assert_eq!(
        got,
        expect,
        "exit code {got}, expected {expect}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_CONFIG: &str = r#"
[task]
kind = "reverse"
vocab = 10
max_len = 10
train_size = 60
valid_size = 20
len_min = 2
len_max = 4
data_seed = 7

[teacher]
enc_depth = 2
dec_depth = 2
width = 8
heads = 2

[student]
enc_depth = 1
dec_depth = 1
width = 4
heads = 2

[train]
base_lr = 2e-3
warmup_steps = 20
max_epochs = 1
batch_size = 16

[phase1]
max_epochs = 1

[experiment]
out_dir = "run"
seeds = [1, 2]

[bench]
repeats = 3
sample_size = 10
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let _guard = serial();
    let tmp = TempDir::new().unwrap();
    assert_status(&run(&["--help"], tmp.path()), 0);
    assert_status(&run(&["definitely-not-a-command"], tmp.path()), 1);
    assert_status(&run(&["train-teacher"], tmp.path()), 1); // missing --config
    // Unparseable config is a usage error too.
    fs::write(tmp.path().join("bad.toml"), "this is not toml [").unwrap();
    assert_status(
        &run(&["train-teacher", "--config", "bad.toml"], tmp.path()),
        1,
    );
    // Structurally valid TOML but an invalid experiment.
    fs::write(
        tmp.path().join("invalid.toml"),
        TINY_CONFIG.replace("seeds = [1, 2]", "seeds = []"),
    )
    .unwrap();
    assert_status(
        &run(&["train-teacher", "--config", "invalid.toml"], tmp.path()),
        1,
    );
}

#[test]
fn missing_teacher_is_a_runtime_error() {
    let _guard = serial();
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), TINY_CONFIG);
    let out = run(
        &["distill", "--config", "exp.toml", "--method", "wd"],
        tmp.path(),
    );
    assert_status(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("teacher checkpoint"), "{stderr}");
}

#[test]
fn train_teacher_creates_artifacts_and_is_seed_deterministic() {
    let _guard = serial();
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), TINY_CONFIG);
    // Output directory does not exist yet; the command creates it.
    let out = run(
        &["train-teacher", "--config", "exp.toml", "--out", "fresh/nested/dir"],
        tmp.path(),
    );
    assert_status(&out, 0);
    for sub in [
        "fresh/nested/dir/checkpoints/teacher.ckpt",
        "fresh/nested/dir/curves/teacher.csv",
        "fresh/nested/dir/reports/teacher.json",
    ] {
        assert!(tmp.path().join(sub).exists(), "{sub} missing");
    }

    // Same seed, fresh directory: bit-identical checkpoint.
    let out = run(
        &["train-teacher", "--config", "exp.toml", "--out", "again"],
        tmp.path(),
    );
    assert_status(&out, 0);
    let a = fs::read(tmp.path().join("fresh/nested/dir/checkpoints/teacher.ckpt")).unwrap();
    let b = fs::read(tmp.path().join("again/checkpoints/teacher.ckpt")).unwrap();
    assert_eq!(a, b, "teacher checkpoints differ across identical runs");

    // Report embeds the resolved config and the checkpoint digest.
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("again/reports/teacher.json")).unwrap(),
    )
    .unwrap();
    assert!(report["config"]["experiment"]["task"]["vocab"].as_u64() == Some(10));
    assert!(report["checkpoint_digest"].as_str().unwrap().len() == 64);
}

#[test]
fn distill_emits_per_method_artifacts() {
    let _guard = serial();
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), TINY_CONFIG);
    assert_status(&run(&["train-teacher", "--config", "exp.toml"], tmp.path()), 0);

    // Plain student baseline.
    assert_status(
        &run(
            &["distill", "--config", "exp.toml", "--method", "none"],
            tmp.path(),
        ),
        0,
    );
    assert!(tmp.path().join("run/checkpoints/student_none_s1.ckpt").exists());
    assert!(tmp.path().join("run/reports/none_summary.json").exists());

    // Weight distillation: one generator checkpoint and two loss curves per
    // seed.
    assert_status(
        &run(
            &["distill", "--config", "exp.toml", "--method", "wd"],
            tmp.path(),
        ),
        0,
    );
    for sub in [
        "run/checkpoints/student_wd_s1.ckpt",
        "run/checkpoints/generator_s1.ckpt",
        "run/curves/wd_s1_phase1.csv",
        "run/curves/wd_s1_phase2.csv",
        "run/curves/wd_s2_phase1.csv",
        "run/curves/wd_s2_phase2.csv",
    ] {
        assert!(tmp.path().join(sub).exists(), "{sub} missing");
    }
    // Curves carry the resolved-config echo and the CSV header.
    let curve = fs::read_to_string(tmp.path().join("run/curves/wd_s1_phase1.csv")).unwrap();
    assert!(curve.starts_with("# config: "));
    assert!(curve.contains("phase,epoch,step,kd_term,gt_term,total,valid_loss"));

    // Remaining methods run end to end.
    for method in ["kd", "init", "init+kd"] {
        assert_status(
            &run(
                &["distill", "--config", "exp.toml", "--method", method, "--seed", "1"],
                tmp.path(),
            ),
            0,
        );
    }
    assert!(tmp.path().join("run/checkpoints/student_init_kd_s1.ckpt").exists());

    let out = run(
        &["distill", "--config", "exp.toml", "--method", "bogus"],
        tmp.path(),
    );
    assert_status(&out, 1);
}

#[test]
fn ablate_emits_one_row_per_class_set_with_alpha_one() {
    let _guard = serial();
    let tmp = TempDir::new().unwrap();
    let config = TINY_CONFIG.replace("seeds = [1, 2]", "seeds = [1]");
    write_config(tmp.path(), &config);
    assert_status(&run(&["train-teacher", "--config", "exp.toml"], tmp.path()), 0);
    assert_status(&run(&["ablate", "--config", "exp.toml"], tmp.path()), 0);

    let csv = fs::read_to_string(tmp.path().join("run/reports/ablation.csv")).unwrap();
    let mut lines = csv.lines();
    let echo = lines.next().unwrap();
    assert!(echo.starts_with("# config: "));
    assert!(echo.contains("\"alpha\":1.0"), "alpha not forced in echo");
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "selected,alpha,n_seeds,median_token_accuracy,median_valid_loss"
    );
    let rows: Vec<&str> = lines.collect();
    let expected = ["none", "encoder", "decoder", "embed_enc", "embed_dec", "output", "all"];
    assert_eq!(rows.len(), expected.len(), "{csv}");
    for (row, name) in rows.iter().zip(expected) {
        assert!(row.starts_with(&format!("{name},1,")), "row {row}");
    }
}

#[test]
fn sweep_row_counts_match_the_grid() {
    let _guard = serial();
    let tmp = TempDir::new().unwrap();
    // lr x warmup: 5 x 5 grid, one seed, zero-epoch cells.
    let config = format!(
        "{}\n[sweep]\nkind = \"lr_warmup\"\nlrs = [1e-4, 3e-4, 5e-4, 7e-4, 9e-4]\nwarmups = [10, 20, 30, 40, 50]\nmethod = \"none\"\n",
        TINY_CONFIG
            .replace("max_epochs = 1", "max_epochs = 0")
            .replace("seeds = [1, 2]", "seeds = [1]")
    );
    write_config(tmp.path(), &config);
    assert_status(&run(&["train-teacher", "--config", "exp.toml"], tmp.path()), 0);
    assert_status(&run(&["sweep", "--config", "exp.toml"], tmp.path()), 0);
    let csv = fs::read_to_string(tmp.path().join("run/reports/sweep.csv")).unwrap();
    let cells = csv.lines().filter(|l| l.starts_with("cell,")).count();
    assert_eq!(cells, 25, "{csv}");
    // Teacher reference row is normalized to exactly 1.00x.
    let teacher_row = csv
        .lines()
        .find(|l| l.starts_with("teacher,"))
        .expect("teacher row present");
    assert!(teacher_row.ends_with(",1.00"), "{teacher_row}");

    // depth x width over a deep teacher: {1,2,3} x {8, 16} -> 6 rows.
    let tmp2 = TempDir::new().unwrap();
    let config = r#"
[task]
kind = "reverse"
vocab = 10
max_len = 10
train_size = 40
valid_size = 16
len_min = 2
len_max = 4
data_seed = 7

[teacher]
enc_depth = 6
dec_depth = 6
width = 8
heads = 2

[student]
enc_depth = 1
dec_depth = 1
width = 8
heads = 2

[train]
max_epochs = 0
batch_size = 16

[phase1]
max_epochs = 0

[teacher_train]
max_epochs = 0

[experiment]
out_dir = "run"
seeds = [1]

[bench]
repeats = 2
sample_size = 8

[sweep]
kind = "depth_width"
depths = [1, 2, 3]
widths = [8, 16]
method = "wd"
"#;
    write_config(tmp2.path(), config);
    assert_status(&run(&["train-teacher", "--config", "exp.toml"], tmp2.path()), 0);
    assert_status(&run(&["sweep", "--config", "exp.toml"], tmp2.path()), 0);
    let csv = fs::read_to_string(tmp2.path().join("run/reports/sweep.csv")).unwrap();
    let cells = csv.lines().filter(|l| l.starts_with("cell,")).count();
    assert_eq!(cells, 6, "{csv}");
}

#[test]
fn bench_reports_runs_and_tiny_student_speedup() {
    let _guard = serial();
    let tmp = TempDir::new().unwrap();
    // Wide contrast between teacher and student so the throughput ordering
    // is unambiguous even on a noisy machine.
    let config = r#"
[task]
kind = "reverse"
vocab = 10
max_len = 12
train_size = 40
valid_size = 40
len_min = 4
len_max = 8
data_seed = 7

[teacher]
enc_depth = 2
dec_depth = 2
width = 32
heads = 2

[student]
enc_depth = 1
dec_depth = 1
width = 8
heads = 2

[train]
max_epochs = 0
batch_size = 16

[phase1]
max_epochs = 0

[teacher_train]
max_epochs = 0

[experiment]
out_dir = "run"
seeds = [1]

[bench]
repeats = 5
sample_size = 30
"#;
    write_config(tmp.path(), config);
    assert_status(&run(&["train-teacher", "--config", "exp.toml"], tmp.path()), 0);
    assert_status(
        &run(
            &["distill", "--config", "exp.toml", "--method", "none"],
            tmp.path(),
        ),
        0,
    );
    assert_status(&run(&["bench", "--config", "exp.toml"], tmp.path()), 0);
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("run/reports/bench.json")).unwrap(),
    )
    .unwrap();
    // Default repeats: exactly five per-run values.
    assert_eq!(report["teacher"]["per_run"].as_array().unwrap().len(), 5);
    let students = report["students"].as_array().unwrap();
    assert_eq!(students.len(), 1);
    assert_eq!(students[0]["per_run"].as_array().unwrap().len(), 5);
    let speedup = students[0]["speedup"].as_f64().unwrap();
    assert!(speedup > 1.0, "tiny student speedup {speedup} <= 1.0");

    // Missing checkpoint path is a runtime error.
    let out = run(
        &["bench", "--config", "exp.toml", "--checkpoint", "nope.ckpt"],
        tmp.path(),
    );
    assert_status(&out, 2);
}

#[test]
fn eval_is_deterministic_across_invocations() {
    let _guard = serial();
    let tmp = TempDir::new().unwrap();
    write_config(tmp.path(), TINY_CONFIG);
    assert_status(&run(&["train-teacher", "--config", "exp.toml"], tmp.path()), 0);
    let eval = |_: usize| -> serde_json::Value {
        let out = run(
            &[
                "eval",
                "--config",
                "exp.toml",
                "--checkpoint",
                "run/checkpoints/teacher.ckpt",
            ],
            tmp.path(),
        );
        assert_status(&out, 0);
        serde_json::from_str(
            &fs::read_to_string(tmp.path().join("run/reports/eval_teacher.json")).unwrap(),
        )
        .unwrap()
    };
    let a = eval(0);
    let b = eval(1);
    // Decode output (hence accuracy and BLEU) is identical; timing varies.
    assert_eq!(a["token_accuracy"], b["token_accuracy"]);
    assert_eq!(a["bleu"], b["bleu"]);

    let out = run(
        &["eval", "--config", "exp.toml", "--checkpoint", "missing.ckpt"],
        tmp.path(),
    );
    assert_status(&out, 2);
}

#[test]
fn file_task_loads_tsv_corpora() {
    let _guard = serial();
    let tmp = TempDir::new().unwrap();
    // 3 4 5 -> reversed; one over-length pair to exercise the drop warning.
    let mut lines = String::new();
    for i in 0..20 {
        let a = 3 + (i % 5);
        lines.push_str(&format!("{a} 4 5\t5 4 {a} 0\n"));
    }
    lines.push_str("3 3 3 3 3 3 3 3 3 3 3 3\t3 0\n");
    fs::write(tmp.path().join("train.tsv"), &lines).unwrap();
    fs::write(tmp.path().join("valid.tsv"), "3 4\t4 3 0\n5 6\t6 5 0\n").unwrap();

    let config = r#"
[task]
kind = "file"
vocab = 10
max_len = 8
path = "train.tsv"
valid_path = "valid.tsv"

[teacher]
enc_depth = 1
dec_depth = 1
width = 4
heads = 1

[student]
enc_depth = 1
dec_depth = 1
width = 4
heads = 1

[train]
max_epochs = 1
batch_size = 8
warmup_steps = 5

[experiment]
out_dir = "run"
seeds = [1]

[bench]
repeats = 1
sample_size = 4
"#;
    write_config(tmp.path(), config);
    let out = run(&["train-teacher", "--config", "exp.toml"], tmp.path());
    assert_status(&out, 0);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("dropped 1 over-length pair"),
        "missing drop warning: {stderr}"
    );
    assert!(tmp.path().join("run/checkpoints/teacher.ckpt").exists());

    // kind = "file" without a path is a config (usage) error.
    let broken = config.replace("path = \"train.tsv\"\n", "");
    fs::write(tmp.path().join("broken.toml"), broken).unwrap();
    assert_status(
        &run(&["train-teacher", "--config", "broken.toml"], tmp.path()),
        1,
    );
}
