//! End-to-end runs of the `aeg` binary: every subcommand, exercised
//! through real files in a temp directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn aeg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aeg"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawning aeg");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn run_err(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning aeg");
    assert!(
        !out.status.success(),
        "command unexpectedly succeeded: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

/// Small settings so five folds train in seconds.
const QUICK_HYPER: &str = "\
batch_size = 16
epochs = 2
embed_dim = 8
cnn_kernel = 3
cnn_filters = 6
lstm_hidden = 6
word_attn_dim = 6
sent_attn_dim = 6
dropout_rate = 0.2
max_sentences = 8
max_tokens = 12
min_count = 1
";

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
    gaze: PathBuf,
    hyper: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let corpus = root.join("corpus.json");
    let gaze = root.join("gaze.tsv");
    let hyper = root.join("quick.cfg");
    run_ok(
        aeg()
            .args(["synth-corpus", "--prompts", "3,4,5", "--per-prompt", "15", "--seed", "9"])
            .arg("--out")
            .arg(&corpus),
    );
    run_ok(
        aeg()
            .args(["synth-gaze", "--seed", "5", "--essays", "8"])
            .arg("--corpus")
            .arg(&corpus)
            .arg("--out")
            .arg(&gaze),
    );
    fs::write(&hyper, QUICK_HYPER).unwrap();
    Workspace {
        _dir: dir,
        root,
        corpus,
        gaze,
        hyper,
    }
}

fn train(ws: &Workspace, mode: &str, seed: &str, out: &Path) -> String {
    let mut cmd = aeg();
    cmd.args(["train", "--target-prompt", "4", "--config", mode, "--seed", seed])
        .arg("--corpus")
        .arg(&ws.corpus)
        .arg("--hyper")
        .arg(&ws.hyper)
        .arg("--out")
        .arg(out);
    if mode == "gaze" {
        cmd.arg("--gaze").arg(&ws.gaze);
    }
    run_ok(&mut cmd)
}

#[test]
fn full_workflow_from_corpus_to_comparison_table() {
    let ws = workspace();
    assert!(ws.corpus.exists() && ws.gaze.exists());

    let ng_run = ws.root.join("run_ng");
    let gz_run = ws.root.join("run_gz");
    let stdout = train(&ws, "nogaze", "42", &ng_run);
    assert!(stdout.contains("mean test QWK"), "{stdout}");
    train(&ws, "gaze", "42", &gz_run);

    // the run directory holds every documented artifact
    for run in [&ng_run, &gz_run] {
        assert!(run.join("config.txt").exists());
        assert!(run.join("run.json").exists());
        assert!(run.join("split.json").exists());
        for fold in 0..5 {
            let fold_dir = run.join(format!("fold{fold}"));
            assert!(fold_dir.join("train_log.jsonl").exists());
            assert!(fold_dir.join("checkpoint.json").exists());
            assert!(fold_dir.join("fold.json").exists());
        }
    }
    // epoch logs carry wall_time on top of the training record
    let log = fs::read_to_string(ng_run.join("fold0/train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["epoch"], 1);
    assert!(first["wall_time"].as_f64().unwrap() >= 0.0);
    assert!(first["train_loss"].as_f64().unwrap().is_finite());

    // evaluate both runs
    let ng_report_path = ws.root.join("ng_report.json");
    let gz_report_path = ws.root.join("gz_report.json");
    let stdout = run_ok(
        aeg()
            .arg("evaluate")
            .arg("--run")
            .arg(&ng_run)
            .arg("--out")
            .arg(&ng_report_path),
    );
    assert!(stdout.contains("re-verified"), "{stdout}");
    assert!(stdout.contains("checkpoints load cleanly"), "{stdout}");
    run_ok(
        aeg()
            .arg("evaluate")
            .arg("--run")
            .arg(&gz_run)
            .arg("--out")
            .arg(&gz_report_path),
    );

    let ng_report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&ng_report_path).unwrap()).unwrap();
    assert_eq!(ng_report["target_prompt"], 4);
    assert_eq!(ng_report["mode"], "nogaze");
    assert_eq!(ng_report["folds"].as_array().unwrap().len(), 5);

    // compare renders the table and drops machine-readable numbers next to it
    let table_path = ws.root.join("table.txt");
    let stdout = run_ok(
        aeg()
            .arg("compare")
            .arg("--gaze-run")
            .arg(&gz_run)
            .arg("--nogaze-run")
            .arg(&ng_run)
            .arg("--out")
            .arg(&table_path),
    );
    assert!(stdout.contains("Prompt 4 | "), "{stdout}");
    let table = fs::read_to_string(&table_path).unwrap();
    assert!(table.starts_with("QWK by target prompt"));
    assert!(table.contains("Prompt 4 | "));
    let cmp: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.root.join("comparison.json")).unwrap())
            .unwrap();
    assert_eq!(cmp["fold_pairs"].as_array().unwrap().len(), 5);
    assert!(cmp["significance"]["p"].as_f64().unwrap() > 0.0);
}

#[test]
fn same_seed_runs_write_identical_reports() {
    let ws = workspace();
    let mut reports = Vec::new();
    for tag in ["a", "b"] {
        let run = ws.root.join(format!("run_{tag}"));
        train(&ws, "nogaze", "7", &run);
        let report = ws.root.join(format!("report_{tag}.json"));
        run_ok(
            aeg()
                .arg("evaluate")
                .arg("--run")
                .arg(&run)
                .arg("--out")
                .arg(&report),
        );
        reports.push(fs::read(&report).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn prepare_reads_tab_separated_essays() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("essays.tsv");
    let out = dir.path().join("corpus.json");
    fs::write(
        &tsv,
        "essay_id\tessay_set\tessay\trater1_domain1\trater2_domain1\tdomain1_score\n\
         1\t3\tDogs bark. Cats nap.\t1\t2\t2\n\
         2\t3\tRain falls on the roof.\t0\t1\t1\n\
         3\t5\tThe tide turns at dusk.\t2\t2\t3\n",
    )
    .unwrap();
    let stdout = run_ok(
        aeg()
            .arg("prepare")
            .arg("--essays")
            .arg(&tsv)
            .arg("--out")
            .arg(&out),
    );
    assert!(stdout.contains("prompt 3: 2 essays"), "{stdout}");
    assert!(stdout.contains("total: 3 essays"), "{stdout}");
    let corpus: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(corpus.as_array().unwrap().len(), 3);
    assert_eq!(corpus[0]["score"], 2);

    // a score outside its prompt's range is refused with the line number
    fs::write(
        &tsv,
        "essay_id\tessay_set\tessay\tdomain1_score\n1\t3\tWords here.\t9\n",
    )
    .unwrap();
    let out_err = run_err(
        aeg()
            .arg("prepare")
            .arg("--essays")
            .arg(&tsv)
            .arg("--out")
            .arg(&out),
    );
    let stderr = String::from_utf8_lossy(&out_err.stderr).to_string();
    assert!(stderr.contains('9'), "{stderr}");
}

#[test]
fn misuse_is_refused_with_clear_messages() {
    let ws = workspace();

    // gaze mode without gaze data
    let run = ws.root.join("run_misuse");
    let out = run_err(
        aeg()
            .args(["train", "--target-prompt", "4", "--config", "gaze", "--seed", "1"])
            .arg("--corpus")
            .arg(&ws.corpus)
            .arg("--hyper")
            .arg(&ws.hyper)
            .arg("--out")
            .arg(&run),
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("--gaze"));

    // unknown mode string
    let out = run_err(
        aeg()
            .args(["train", "--target-prompt", "4", "--config", "both", "--seed", "1"])
            .arg("--corpus")
            .arg(&ws.corpus)
            .arg("--out")
            .arg(&ws.root.join("run_misuse2")),
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("mode"));

    // a used run directory is never overwritten
    let busy = ws.root.join("busy");
    fs::create_dir_all(&busy).unwrap();
    fs::write(busy.join("keep"), "data").unwrap();
    let out = run_err(
        aeg()
            .args(["train", "--target-prompt", "4", "--config", "nogaze", "--seed", "1"])
            .arg("--corpus")
            .arg(&ws.corpus)
            .arg("--hyper")
            .arg(&ws.hyper)
            .arg("--out")
            .arg(&busy),
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("contents"));
    assert_eq!(fs::read_to_string(busy.join("keep")).unwrap(), "data");

    // comparing a run against itself (two nogaze reports) is caught
    let solo = ws.root.join("run_solo");
    train(&ws, "nogaze", "3", &solo);
    let out = run_err(
        aeg()
            .arg("compare")
            .arg("--gaze-run")
            .arg(&solo)
            .arg("--nogaze-run")
            .arg(&solo)
            .arg("--out")
            .arg(&ws.root.join("t.txt")),
    );
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn selftest_subcommand_reports_all_checks_green() {
    let stdout = run_ok(&mut aeg().arg("selftest"));
    assert!(stdout.contains("PASS grad-full-network"), "{stdout}");
    assert!(stdout.contains("PASS qwk-known-values"), "{stdout}");
    assert!(stdout.contains(" 0 failed"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn settings_file_round_trips_through_the_run_directory() {
    let ws = workspace();
    let run = ws.root.join("run_cfg");
    train(&ws, "nogaze", "11", &run);
    let stored = fs::read_to_string(run.join("config.txt")).unwrap();
    // the resolved config carries the overridden seed and the file's values
    assert!(stored.contains("seed = 11"));
    assert!(stored.contains("epochs = 2"));
    assert!(stored.contains("embed_dim = 8"));
    assert!(stored.contains("clip_norm = none"));
}
