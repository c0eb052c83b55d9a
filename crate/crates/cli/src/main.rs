//! `aeg`: zero-shot essay grading experiments from the command line.
//!
//! The workflow is: `prepare` (or `synth-corpus`) builds a corpus JSON,
//! `synth-gaze` adds per-token reading measurements, `train` runs a
//! leave-one-prompt-out experiment into a run directory, `evaluate` turns
//! a run directory into a report, and `compare` renders the score table
//! for a gaze/no-gaze pair. `selftest` exercises the numeric kernels.

mod checkpoint;
mod config;
mod formats;
mod rundir;

use aeg_core::dataset::{asap_prompt_specs, parse_asap_tsv, Essay};
use aeg_core::experiment::{
    compare_runs, make_prompt_dev_splits, make_zero_shot_splits, render_comparison_table,
    run_experiment, verify_plan, ExperimentConfig, FoldReport, RunHooks, RunMode, SplitMode,
};
use aeg_core::model::ModelParams;
use aeg_core::selftest::run_selftest;
use aeg_core::synth::{pick_gaze_essays, synth_corpus, SynthCorpusConfig};
use aeg_core::train::EpochRecord;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rundir::RunMeta;
use serde_json::json;
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "aeg",
    version,
    about = "Zero-shot automated essay grading with gaze-informed multi-task training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a tab-separated essay dump into corpus JSON.
    Prepare {
        /// Input TSV with essay_id, essay_set, essay, and domain1_score columns.
        #[arg(long)]
        essays: PathBuf,
        /// Output corpus JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scored corpus for desk-scale experiments.
    SynthCorpus {
        /// Output corpus JSON path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Comma-separated prompt ids to generate essays for.
        #[arg(long, default_value = "3,4,5,6")]
        prompts: String,
        /// Essays per prompt.
        #[arg(long = "per-prompt", default_value_t = 200)]
        per_prompt: usize,
        /// Gaussian jitter applied to essay quality before scoring.
        #[arg(long, default_value_t = 0.08)]
        noise: f64,
    },
    /// Generate synthetic per-token reading measurements for a sample of essays.
    SynthGaze {
        /// Corpus JSON to draw essays from.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// How many essays receive gaze records.
        #[arg(long)]
        essays: usize,
        /// Output TSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one target prompt zero-shot into a fresh run directory.
    Train {
        /// Corpus JSON (from prepare or synth-corpus).
        #[arg(long)]
        corpus: PathBuf,
        /// Gaze TSV; required when --config gaze.
        #[arg(long)]
        gaze: Option<PathBuf>,
        /// The held-out prompt whose essays are never trained on.
        #[arg(long = "target-prompt")]
        target_prompt: u8,
        /// Run mode: "gaze" trains the reading-behaviour heads into the
        /// loss, "nogaze" trains on scores alone.
        #[arg(long = "config")]
        mode: String,
        /// Overrides the seed from the settings file.
        #[arg(long)]
        seed: Option<u64>,
        /// Optional key = value settings file; defaults apply otherwise.
        #[arg(long)]
        hyper: Option<PathBuf>,
        /// Optional pretrained word vectors (token then values, one word
        /// per line); absent, embeddings start from seeded random values.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble a run directory into a report, re-verifying the split.
    Evaluate {
        /// Run directory produced by train.
        #[arg(long)]
        run: PathBuf,
        /// Output report JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the score comparison table for a paired gaze/no-gaze run.
    Compare {
        /// Run directory (or its report) trained with --config gaze.
        #[arg(long = "gaze-run")]
        gaze_run: PathBuf,
        /// Run directory trained with --config nogaze, same seed.
        #[arg(long = "nogaze-run")]
        nogaze_run: PathBuf,
        /// Output path for the plain-text table; a comparison.json with
        /// the full numbers lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gradient checks and metric oracles; nonzero exit on failure.
    Selftest,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Prepare { essays, out } => cmd_prepare(&essays, &out),
        Command::SynthCorpus {
            out,
            seed,
            prompts,
            per_prompt,
            noise,
        } => cmd_synth_corpus(&out, seed, &prompts, per_prompt, noise),
        Command::SynthGaze {
            corpus,
            seed,
            essays,
            out,
        } => cmd_synth_gaze(&corpus, seed, essays, &out),
        Command::Train {
            corpus,
            gaze,
            target_prompt,
            mode,
            seed,
            hyper,
            embeddings,
            out,
        } => cmd_train(TrainArgs {
            corpus,
            gaze,
            target_prompt,
            mode,
            seed,
            hyper,
            embeddings,
            out,
        }),
        Command::Evaluate { run, out } => cmd_evaluate(&run, &out),
        Command::Compare {
            gaze_run,
            nogaze_run,
            out,
        } => cmd_compare(&gaze_run, &nogaze_run, &out),
        Command::Selftest => cmd_selftest(),
    }
}

fn print_prompt_counts(corpus: &[Essay]) {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for essay in corpus {
        *counts.entry(essay.prompt_id).or_default() += 1;
    }
    for (prompt, n) in counts {
        println!("prompt {prompt}: {n} essays");
    }
}

fn cmd_prepare(essays: &Path, out: &Path) -> Result<()> {
    let bytes =
        fs::read(essays).with_context(|| format!("reading essay TSV {}", essays.display()))?;
    let specs = asap_prompt_specs();
    let corpus = parse_asap_tsv(&bytes, &specs)?;
    formats::write_corpus(out, &corpus)?;
    print_prompt_counts(&corpus);
    println!("total: {} essays -> {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_synth_corpus(out: &Path, seed: u64, prompts: &str, per_prompt: usize, noise: f64) -> Result<()> {
    let prompts: Vec<u8> = prompts
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| anyhow!("bad prompt id {s:?}: {e}"))
        })
        .collect::<Result<_>>()?;
    let cfg = SynthCorpusConfig {
        prompts,
        essays_per_prompt: per_prompt,
        seed,
        noise,
    };
    let corpus = synth_corpus(&cfg, &asap_prompt_specs())?;
    formats::write_corpus(out, &corpus)?;
    print_prompt_counts(&corpus);
    println!("total: {} essays -> {}", corpus.len(), out.display());
    Ok(())
}

fn cmd_synth_gaze(corpus_path: &Path, seed: u64, essays: usize, out: &Path) -> Result<()> {
    let specs = asap_prompt_specs();
    let corpus = formats::read_corpus(corpus_path, &specs)?;
    let ids = pick_gaze_essays(&corpus, essays, seed)?;
    let by_id: BTreeMap<u32, &Essay> = corpus.iter().map(|e| (e.essay_id, e)).collect();
    let mut records = Vec::new();
    for id in &ids {
        records.extend(aeg_core::gaze::synth_gaze(by_id[id], seed));
    }
    formats::write_gaze_tsv(out, &records)?;
    println!(
        "{} gaze records over {} essays -> {}",
        records.len(),
        ids.len(),
        out.display()
    );
    Ok(())
}

struct TrainArgs {
    corpus: PathBuf,
    gaze: Option<PathBuf>,
    target_prompt: u8,
    mode: String,
    seed: Option<u64>,
    hyper: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    out: PathBuf,
}

/// Per-fold epoch logging shared between the two run hooks. The writer
/// targets the fold currently training; hook errors are stashed and
/// re-raised after the run, since the hooks themselves cannot fail.
struct LogState {
    run: PathBuf,
    fold: usize,
    writer: Option<BufWriter<File>>,
    started: Instant,
    error: Option<anyhow::Error>,
}

fn log_epoch(state: &RefCell<LogState>, fold: usize, rec: &EpochRecord) {
    let mut st = state.borrow_mut();
    if st.error.is_some() {
        return;
    }
    if st.fold != fold {
        st.writer = None;
        let dir = rundir::fold_dir(&st.run, fold);
        let opened = fs::create_dir_all(&dir)
            .map_err(anyhow::Error::from)
            .and_then(|_| File::create(dir.join("train_log.jsonl")).map_err(Into::into));
        match opened {
            Ok(f) => {
                st.writer = Some(BufWriter::new(f));
                st.fold = fold;
                st.started = Instant::now();
            }
            Err(e) => {
                st.error = Some(e);
                return;
            }
        }
    }
    let wall = st.started.elapsed().as_secs_f64();
    let mut line = match serde_json::to_value(rec) {
        Ok(v) => v,
        Err(e) => {
            st.error = Some(e.into());
            return;
        }
    };
    line["wall_time"] = json!(wall);
    let writer = st.writer.as_mut().expect("writer opened above");
    if let Err(e) = writeln!(writer, "{line}") {
        st.error = Some(e.into());
    }
}

fn finish_fold(state: &RefCell<LogState>, fold: usize, params: &ModelParams, rep: &FoldReport) {
    let mut st = state.borrow_mut();
    if st.error.is_some() {
        return;
    }
    if let Some(mut w) = st.writer.take() {
        if let Err(e) = w.flush() {
            st.error = Some(e.into());
            return;
        }
    }
    st.fold = usize::MAX;
    let dir = rundir::fold_dir(&st.run, fold);
    let write = fs::create_dir_all(&dir)
        .map_err(anyhow::Error::from)
        .and_then(|_| checkpoint::save(&dir.join("checkpoint.json"), params))
        .and_then(|_| rundir::write_fold_report(&st.run, fold, rep));
    if let Err(e) = write {
        st.error = Some(e);
        return;
    }
    println!(
        "fold {}: best epoch {}, dev QWK {:.3}, test QWK {:.3}",
        fold, rep.best_epoch, rep.dev_qwk, rep.test_qwk
    );
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let specs = asap_prompt_specs();
    let corpus = formats::read_corpus(&args.corpus, &specs)?;
    let mode = RunMode::parse(&args.mode)?;
    let gaze_records = match &args.gaze {
        Some(p) => Some(formats::read_gaze_tsv(p)?),
        None => None,
    };
    if mode == RunMode::Gaze && gaze_records.is_none() {
        bail!("--config gaze needs a --gaze <tsv> file");
    }
    if mode == RunMode::NoGaze && gaze_records.is_some() {
        println!("note: --gaze is ignored in a nogaze run");
    }

    let mut cfg = match &args.hyper {
        Some(p) => config::parse_config(
            &fs::read_to_string(p).with_context(|| format!("reading settings {}", p.display()))?,
        )?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let pretrained = match &args.embeddings {
        Some(p) => Some(
            fs::read_to_string(p)
                .with_context(|| format!("reading embeddings {}", p.display()))?,
        ),
        None => None,
    };

    rundir::init_run_dir(&args.out)?;
    fs::write(args.out.join("config.txt"), config::render_config(&cfg))
        .with_context(|| format!("writing {}", args.out.join("config.txt").display()))?;
    rundir::write_meta(
        &args.out,
        &RunMeta {
            mode,
            target_prompt: args.target_prompt,
            seed: cfg.train.seed,
            corpus: args.corpus.display().to_string(),
            gaze: args.gaze.as_ref().map(|p| p.display().to_string()),
            embeddings: args.embeddings.as_ref().map(|p| p.display().to_string()),
        },
    )?;
    let plan = match cfg.split_mode {
        SplitMode::Pooled => make_zero_shot_splits(&corpus, args.target_prompt, cfg.train.seed)?,
        SplitMode::PromptDev => {
            make_prompt_dev_splits(&corpus, args.target_prompt, cfg.train.seed)?
        }
    };
    verify_plan(&plan, &corpus)?;
    rundir::write_split(&args.out, &plan)?;
    println!(
        "target prompt {}: {} folds, {} test essays, mode {}",
        args.target_prompt,
        plan.folds.len(),
        plan.test.len(),
        mode.as_str()
    );

    let state = RefCell::new(LogState {
        run: args.out.clone(),
        fold: usize::MAX,
        writer: None,
        started: Instant::now(),
        error: None,
    });
    let mut on_epoch = |fold: usize, rec: &EpochRecord| log_epoch(&state, fold, rec);
    let mut on_fold =
        |fold: usize, params: &ModelParams, rep: &FoldReport| finish_fold(&state, fold, params, rep);
    let report = run_experiment(
        &corpus,
        gaze_records.as_deref(),
        pretrained.as_deref(),
        &specs,
        args.target_prompt,
        mode,
        &cfg,
        RunHooks {
            on_epoch: Some(&mut on_epoch),
            on_fold: Some(&mut on_fold),
        },
    )?;
    if let Some(e) = state.into_inner().error {
        return Err(e.context("writing run artifacts"));
    }
    println!(
        "mean test QWK {:.3} over {} folds -> {}",
        report.mean_test_qwk,
        report.folds.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(run: &Path, out: &Path) -> Result<()> {
    let report = rundir::assemble_report(run)?;
    let meta = rundir::read_meta(run)?;
    let corpus_path = PathBuf::from(&meta.corpus);
    if corpus_path.exists() {
        let specs = asap_prompt_specs();
        let corpus = formats::read_corpus(&corpus_path, &specs)?;
        let plan = rundir::read_split(run)?;
        verify_plan(&plan, &corpus)?;
        println!("split re-verified against {}", meta.corpus);
    } else {
        println!(
            "corpus {} is gone; skipping split re-verification",
            meta.corpus
        );
    }
    let cfg = config::parse_config(
        &fs::read_to_string(run.join("config.txt"))
            .with_context(|| format!("reading {}", run.join("config.txt").display()))?,
    )?;
    for fold in &report.folds {
        let path = rundir::fold_dir(run, fold.fold).join("checkpoint.json");
        let params = checkpoint::load(&path)?;
        params
            .validate_shapes(&cfg.train.model)
            .with_context(|| format!("checkpoint {}", path.display()))?;
    }
    println!("{} fold checkpoints load cleanly", report.folds.len());
    rundir::write_report(out, &report)?;
    for fold in &report.folds {
        println!(
            "fold {}: dev QWK {:.3}, test QWK {:.3}",
            fold.fold, fold.dev_qwk, fold.test_qwk
        );
    }
    println!(
        "mean test QWK {:.3} ({} mode, target prompt {}) -> {}",
        report.mean_test_qwk,
        report.mode.as_str(),
        report.target_prompt,
        out.display()
    );
    Ok(())
}

fn cmd_compare(gaze_run: &Path, nogaze_run: &Path, out: &Path) -> Result<()> {
    let gaze_report = rundir::load_or_assemble_report(gaze_run)
        .with_context(|| format!("loading gaze run {}", gaze_run.display()))?;
    let nogaze_report = rundir::load_or_assemble_report(nogaze_run)
        .with_context(|| format!("loading no-gaze run {}", nogaze_run.display()))?;
    let comparison = compare_runs(&gaze_report, &nogaze_report)?;
    let table = render_comparison_table(std::slice::from_ref(&comparison))?;
    fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;

    let json_path = out
        .parent()
        .map(|p| p.join("comparison.json"))
        .unwrap_or_else(|| PathBuf::from("comparison.json"));
    let mut json = serde_json::to_string_pretty(&comparison)?;
    json.push('\n');
    fs::write(&json_path, json).with_context(|| format!("writing {}", json_path.display()))?;

    print!("{table}");
    println!(
        "t = {:.4}, p = {:.4} -> {} and {}",
        comparison.significance.t,
        comparison.significance.p,
        out.display(),
        json_path.display()
    );
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    let results = run_selftest();
    let mut failed = 0usize;
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        if r.detail.is_empty() {
            println!("{verdict} {}", r.name);
        } else {
            println!("{verdict} {}: {}", r.name, r.detail);
        }
        if !r.passed {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", results.len(), failed);
    if failed > 0 {
        bail!("self test failed");
    }
    Ok(())
}
