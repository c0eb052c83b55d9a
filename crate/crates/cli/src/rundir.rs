//! Run directory layout.
//!
//! ```text
//! rundir/
//!   config.txt        resolved key = value settings
//!   run.json          mode, target prompt, seed, input paths
//!   split.json        the verified fold plan
//!   fold0/
//!     train_log.jsonl one line per epoch, wall_time added
//!     checkpoint.json best-epoch parameters
//!     fold.json       per-fold report (history, test predictions)
//!   ...
//! ```
//!
//! `report.json` is assembled from the fold reports on demand and holds no
//! timing, so identical seeds give byte-identical reports.

use aeg_core::experiment::{ExperimentReport, FoldReport, RunMode, SplitPlan};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// What a run was: enough to re-derive its splits and find its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: RunMode,
    pub target_prompt: u8,
    pub seed: u64,
    pub corpus: String,
    pub gaze: Option<String>,
    pub embeddings: Option<String>,
}

pub fn fold_dir(run: &Path, fold: usize) -> PathBuf {
    run.join(format!("fold{fold}"))
}

/// Creates the run directory, refusing to reuse one that has contents.
pub fn init_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir)
            .with_context(|| format!("inspecting run directory {}", dir.display()))?;
        if entries.next().is_some() {
            bail!(
                "run directory {} already has contents; pick a fresh path",
                dir.display()
            );
        }
        return Ok(());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating run directory {}", dir.display()))
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_meta(run: &Path, meta: &RunMeta) -> Result<()> {
    write_pretty(&run.join("run.json"), meta)
}

pub fn read_meta(run: &Path) -> Result<RunMeta> {
    read_json(&run.join("run.json"))
}

pub fn write_split(run: &Path, plan: &SplitPlan) -> Result<()> {
    write_pretty(&run.join("split.json"), plan)
}

pub fn read_split(run: &Path) -> Result<SplitPlan> {
    read_json(&run.join("split.json"))
}

pub fn write_fold_report(run: &Path, fold: usize, report: &FoldReport) -> Result<()> {
    write_pretty(&fold_dir(run, fold).join("fold.json"), report)
}

pub fn write_report(path: &Path, report: &ExperimentReport) -> Result<()> {
    write_pretty(path, report)
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    read_json(path)
}

/// Rebuilds the run's report from its fold artifacts. The mean is
/// recomputed from the per-fold QWKs, so a tampered fold file shows up as
/// a changed report rather than a stale aggregate.
pub fn assemble_report(run: &Path) -> Result<ExperimentReport> {
    let meta = read_meta(run)?;
    let plan = read_split(run)?;
    if plan.target_prompt != meta.target_prompt || plan.seed != meta.seed {
        bail!(
            "run {}: split.json (prompt {}, seed {}) disagrees with run.json (prompt {}, seed {})",
            run.display(),
            plan.target_prompt,
            plan.seed,
            meta.target_prompt,
            meta.seed
        );
    }

    let mut folds: Vec<FoldReport> = Vec::with_capacity(plan.folds.len());
    for i in 0..plan.folds.len() {
        let path = fold_dir(run, i).join("fold.json");
        let fold: FoldReport = read_json(&path)?;
        if fold.fold != i {
            bail!("{}: holds fold {} instead", path.display(), fold.fold);
        }
        folds.push(fold);
    }
    if folds.is_empty() {
        bail!("run {} has no fold reports", run.display());
    }

    let mean_test_qwk = folds.iter().map(|f| f.test_qwk).sum::<f64>() / folds.len() as f64;
    Ok(ExperimentReport {
        target_prompt: meta.target_prompt,
        mode: meta.mode,
        seed: meta.seed,
        mean_test_qwk,
        folds,
        significance: None,
    })
}

/// Prefers a stored `report.json`; otherwise assembles from fold files.
pub fn load_or_assemble_report(run: &Path) -> Result<ExperimentReport> {
    let stored = run.join("report.json");
    if stored.exists() {
        return read_report(&stored);
    }
    assemble_report(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use aeg_core::experiment::{EssayResult, FoldSplit, SplitMode};

    fn tiny_fold(i: usize) -> FoldReport {
        FoldReport {
            fold: i,
            seed: 100 + i as u64,
            best_epoch: 1,
            dev_qwk: 0.5,
            test_qwk: 0.25 * (i as f64 + 1.0),
            history: Vec::new(),
            predictions: vec![EssayResult {
                essay_id: 9,
                gold: 2,
                predicted: 3,
                score_unit: 0.7,
            }],
        }
    }

    fn tiny_plan() -> SplitPlan {
        SplitPlan {
            target_prompt: 4,
            seed: 11,
            mode: SplitMode::Pooled,
            folds: vec![
                FoldSplit {
                    train: vec![1, 2],
                    dev: vec![3],
                },
                FoldSplit {
                    train: vec![3, 1],
                    dev: vec![2],
                },
            ],
            test: vec![9],
        }
    }

    fn tiny_meta() -> RunMeta {
        RunMeta {
            mode: RunMode::NoGaze,
            target_prompt: 4,
            seed: 11,
            corpus: "corpus.json".into(),
            gaze: None,
            embeddings: None,
        }
    }

    #[test]
    fn assembles_reports_from_fold_files() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        init_run_dir(&run).unwrap();
        write_meta(&run, &tiny_meta()).unwrap();
        write_split(&run, &tiny_plan()).unwrap();
        for i in 0..2 {
            fs::create_dir_all(fold_dir(&run, i)).unwrap();
            write_fold_report(&run, i, &tiny_fold(i)).unwrap();
        }
        let report = assemble_report(&run).unwrap();
        assert_eq!(report.target_prompt, 4);
        assert_eq!(report.folds.len(), 2);
        assert!((report.mean_test_qwk - 0.375).abs() < 1e-15);

        // stored report wins over reassembly once written
        let stored = run.join("report.json");
        let mut doctored = report.clone();
        doctored.seed = 999;
        write_report(&stored, &doctored).unwrap();
        assert_eq!(load_or_assemble_report(&run).unwrap().seed, 999);
    }

    #[test]
    fn refuses_nonempty_directories_and_mismatched_folds() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        init_run_dir(&run).unwrap();
        fs::write(run.join("stray"), "x").unwrap();
        assert!(init_run_dir(&run).unwrap_err().to_string().contains("contents"));

        fs::remove_file(run.join("stray")).unwrap();
        write_meta(&run, &tiny_meta()).unwrap();
        write_split(&run, &tiny_plan()).unwrap();
        fs::create_dir_all(fold_dir(&run, 0)).unwrap();
        fs::create_dir_all(fold_dir(&run, 1)).unwrap();
        write_fold_report(&run, 0, &tiny_fold(0)).unwrap();
        // fold1 holds a report claiming to be fold 0
        write_fold_report(&run, 1, &tiny_fold(0)).unwrap();
        let err = assemble_report(&run).unwrap_err();
        assert!(err.to_string().contains("fold"), "{err}");
    }

    #[test]
    fn meta_and_split_disagreement_is_caught() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        init_run_dir(&run).unwrap();
        let mut meta = tiny_meta();
        meta.seed = 12;
        write_meta(&run, &meta).unwrap();
        write_split(&run, &tiny_plan()).unwrap();
        let err = assemble_report(&run).unwrap_err();
        assert!(err.to_string().contains("disagrees"));
    }
}
