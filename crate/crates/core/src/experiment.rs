//! Zero-shot leave-one-prompt-out harness. The target prompt's essays are
//! the test set and never touch training or development; the remaining
//! pool is split five ways, trained per fold, and aggregated into a
//! report. Paired runs with and without gaze supervision share every seed
//! so their folds line up exactly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{denormalize_score, Essay, PromptSpecs};
use crate::error::{Error, Result};
use crate::eval::{paired_ttest_2tailed, qwk};
use crate::gaze::{align_gaze, bin_and_scale, RawGazeRecord};
use crate::model::{predict, ModelParams};
use crate::rng;
use crate::text::{build_vocab, encode_essay, parse_embeddings, EmbeddingMatrix, EncodeLimits};
use crate::train::{train_fold, EpochRecord, TrainConfig};

/// Callbacks a run invokes as it progresses: `on_epoch` after every
/// training epoch of every fold, `on_fold` once per finished fold with
/// the fold's best parameters (for checkpointing).
#[derive(Default)]
pub struct RunHooks<'a> {
    pub on_epoch: Option<&'a mut dyn FnMut(usize, &EpochRecord)>,
    pub on_fold: Option<&'a mut dyn FnMut(usize, &ModelParams, &FoldReport)>,
}

impl RunHooks<'_> {
    pub fn none() -> Self {
        RunHooks::default()
    }
}

pub const NUM_FOLDS: usize = 5;

/// Whether gaze losses join the objective for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[serde(rename = "nogaze")]
    NoGaze,
    Gaze,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::NoGaze => "nogaze",
            RunMode::Gaze => "gaze",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nogaze" | "no-gaze" => Ok(RunMode::NoGaze),
            "gaze" => Ok(RunMode::Gaze),
            other => Err(Error::Config(format!(
                "unknown run mode {other:?}, expected gaze or nogaze"
            ))),
        }
    }
}

/// How the non-target pool becomes train/dev folds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Shuffle the pooled essays and cut five near-equal dev parts.
    #[default]
    Pooled,
    /// Hold out one whole non-target prompt as dev per fold.
    PromptDev,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<u32>,
    pub dev: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_prompt: u8,
    pub seed: u64,
    pub mode: SplitMode,
    pub folds: Vec<FoldSplit>,
    pub test: Vec<u32>,
}

fn prompt_index(corpus: &[Essay]) -> BTreeMap<u32, u8> {
    corpus.iter().map(|e| (e.essay_id, e.prompt_id)).collect()
}

/// Builds the zero-shot split: test = every target-prompt essay; the rest
/// are shuffled by seed and partitioned into five near-equal dev parts,
/// each fold training on the other four.
pub fn make_zero_shot_splits(corpus: &[Essay], target_prompt: u8, seed: u64) -> Result<SplitPlan> {
    let test: Vec<u32> = corpus
        .iter()
        .filter(|e| e.prompt_id == target_prompt)
        .map(|e| e.essay_id)
        .collect();
    if test.is_empty() {
        return Err(Error::Config(format!(
            "target prompt {target_prompt} has no essays in the corpus"
        )));
    }
    let mut pool: Vec<u32> = corpus
        .iter()
        .filter(|e| e.prompt_id != target_prompt)
        .map(|e| e.essay_id)
        .collect();
    if pool.len() < NUM_FOLDS {
        return Err(Error::Config(format!(
            "only {} non-target essays, cannot form {NUM_FOLDS} folds",
            pool.len()
        )));
    }
    let mut r = rng::stream(seed, &[rng::domain::SPLIT, u64::from(target_prompt)]);
    pool.shuffle(&mut r);

    let n = pool.len();
    let base = n / NUM_FOLDS;
    let extra = n % NUM_FOLDS;
    let mut parts: Vec<Vec<u32>> = Vec::with_capacity(NUM_FOLDS);
    let mut at = 0usize;
    for i in 0..NUM_FOLDS {
        let size = base + usize::from(i < extra);
        parts.push(pool[at..at + size].to_vec());
        at += size;
    }
    let folds = (0..NUM_FOLDS)
        .map(|i| FoldSplit {
            train: parts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, p)| p.iter().copied())
                .collect(),
            dev: parts[i].clone(),
        })
        .collect();
    Ok(SplitPlan {
        target_prompt,
        seed,
        mode: SplitMode::Pooled,
        folds,
        test,
    })
}

/// Alternative split: each fold's dev set is one whole non-target prompt,
/// chosen in seed-shuffled prompt order (up to five folds).
pub fn make_prompt_dev_splits(corpus: &[Essay], target_prompt: u8, seed: u64) -> Result<SplitPlan> {
    let test: Vec<u32> = corpus
        .iter()
        .filter(|e| e.prompt_id == target_prompt)
        .map(|e| e.essay_id)
        .collect();
    if test.is_empty() {
        return Err(Error::Config(format!(
            "target prompt {target_prompt} has no essays in the corpus"
        )));
    }
    let mut others: Vec<u8> = corpus
        .iter()
        .filter(|e| e.prompt_id != target_prompt)
        .map(|e| e.prompt_id)
        .collect();
    others.sort_unstable();
    others.dedup();
    if others.len() < 2 {
        return Err(Error::Config(
            "prompt-held-out folds need at least two non-target prompts".into(),
        ));
    }
    let mut r = rng::stream(seed, &[rng::domain::SPLIT, u64::from(target_prompt)]);
    others.shuffle(&mut r);
    let folds = others
        .iter()
        .take(NUM_FOLDS)
        .map(|&dev_prompt| FoldSplit {
            train: corpus
                .iter()
                .filter(|e| e.prompt_id != target_prompt && e.prompt_id != dev_prompt)
                .map(|e| e.essay_id)
                .collect(),
            dev: corpus
                .iter()
                .filter(|e| e.prompt_id == dev_prompt)
                .map(|e| e.essay_id)
                .collect(),
        })
        .collect();
    Ok(SplitPlan {
        target_prompt,
        seed,
        mode: SplitMode::PromptDev,
        folds,
        test,
    })
}

/// Checks the zero-shot guarantees: the test set is exactly the target
/// prompt, no target essay reaches any train or dev set, train and dev
/// are disjoint within each fold, and (pooled mode) the dev parts
/// partition the pool. Runs before any training.
pub fn verify_plan(plan: &SplitPlan, corpus: &[Essay]) -> Result<()> {
    let prompts = prompt_index(corpus);
    let lookup = |id: u32| -> Result<u8> {
        prompts
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("split names unknown essay {id}")))
    };
    let mut expected_test: Vec<u32> = prompts
        .iter()
        .filter(|(_, &p)| p == plan.target_prompt)
        .map(|(&id, _)| id)
        .collect();
    expected_test.sort_unstable();
    let mut got_test = plan.test.clone();
    got_test.sort_unstable();
    if got_test != expected_test {
        return Err(Error::Validation(
            "test set is not exactly the target prompt's essays".into(),
        ));
    }
    let mut all_dev: Vec<u32> = Vec::new();
    for (i, fold) in plan.folds.iter().enumerate() {
        for &id in fold.train.iter().chain(&fold.dev) {
            if lookup(id)? == plan.target_prompt {
                return Err(Error::Validation(format!(
                    "fold {i} leaks target-prompt essay {id}"
                )));
            }
        }
        let dev: alloc::collections::BTreeSet<u32> = fold.dev.iter().copied().collect();
        if let Some(&id) = fold.train.iter().find(|id| dev.contains(id)) {
            return Err(Error::Validation(format!(
                "fold {i} places essay {id} in both train and dev"
            )));
        }
        all_dev.extend(&fold.dev);
    }
    if plan.mode == SplitMode::Pooled {
        let mut pool: Vec<u32> = prompts
            .iter()
            .filter(|(_, &p)| p != plan.target_prompt)
            .map(|(&id, _)| id)
            .collect();
        pool.sort_unstable();
        all_dev.sort_unstable();
        if all_dev != pool {
            return Err(Error::Validation(
                "dev parts do not partition the non-target pool".into(),
            ));
        }
    }
    Ok(())
}

/// Everything beyond TrainConfig that a full run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Vocabulary frequency threshold, per fold.
    pub min_count: usize,
    pub limits: EncodeLimits,
    pub gaze_bin_count: usize,
    pub split_mode: SplitMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            min_count: 2,
            limits: EncodeLimits::default(),
            gaze_bin_count: 5,
            split_mode: SplitMode::Pooled,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if self.gaze_bin_count < 2 {
            return Err(Error::Config("gaze_bin_count must be at least 2".into()));
        }
        self.limits.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssayResult {
    pub essay_id: u32,
    pub gold: i32,
    pub predicted: i32,
    pub score_unit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub dev_qwk: f64,
    pub test_qwk: f64,
    pub history: Vec<EpochRecord>,
    pub predictions: Vec<EssayResult>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub t: f64,
    pub p: f64,
    pub starred: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub target_prompt: u8,
    pub mode: RunMode,
    pub seed: u64,
    pub mean_test_qwk: f64,
    pub folds: Vec<FoldReport>,
    pub significance: Option<Significance>,
}

impl ExperimentReport {
    pub fn fold_qwks(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.test_qwk).collect()
    }
}

fn fold_seed(base: u64, fold: usize) -> u64 {
    rng::combine_seed(rng::combine_seed(base, rng::domain::FOLD), fold as u64)
}

/// Runs one full zero-shot experiment: split, then per fold build the
/// train-only vocabulary, encode, optionally attach gaze targets, train,
/// and score the held-out prompt. `pretrained` is embedding text in
/// whitespace-separated token/value rows; absent, embeddings start from
/// the seeded random table.
pub fn run_experiment(
    corpus: &[Essay],
    gaze_records: Option<&[RawGazeRecord]>,
    pretrained: Option<&str>,
    specs: &PromptSpecs,
    target_prompt: u8,
    mode: RunMode,
    cfg: &ExperimentConfig,
    mut hooks: RunHooks<'_>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let labels = match (mode, gaze_records) {
        (RunMode::Gaze, Some(records)) if !records.is_empty() => {
            Some(bin_and_scale(records, cfg.gaze_bin_count)?)
        }
        (RunMode::Gaze, _) => {
            return Err(Error::Config(
                "gaze run requested but no gaze records were supplied".into(),
            ))
        }
        (RunMode::NoGaze, _) => None,
    };

    let plan = match cfg.split_mode {
        SplitMode::Pooled => make_zero_shot_splits(corpus, target_prompt, cfg.train.seed)?,
        SplitMode::PromptDev => make_prompt_dev_splits(corpus, target_prompt, cfg.train.seed)?,
    };
    verify_plan(&plan, corpus)?;

    let by_id: BTreeMap<u32, &Essay> = corpus.iter().map(|e| (e.essay_id, e)).collect();
    let fetch = |id: u32| -> Result<&Essay> {
        by_id
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("split names unknown essay {id}")))
    };
    let target_spec = specs.require(target_prompt)?;

    let mut folds = Vec::with_capacity(plan.folds.len());
    for (i, split) in plan.folds.iter().enumerate() {
        let seed = fold_seed(cfg.train.seed, i);
        let train_essays: Vec<&Essay> = split.train.iter().map(|&id| fetch(id)).collect::<Result<_>>()?;
        let owned: Vec<Essay> = train_essays.iter().map(|e| (*e).clone()).collect();
        let vocab = build_vocab(&owned, cfg.min_count)?;
        let embeddings = match pretrained {
            Some(text) => parse_embeddings(text, &vocab, cfg.train.model.embed_dim, seed)?,
            None => EmbeddingMatrix::random(vocab.len(), cfg.train.model.embed_dim, seed)?,
        };

        let mut fold_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        fold_cfg.model.gaze_enabled = mode == RunMode::Gaze;

        let mut train_encs = Vec::with_capacity(split.train.len());
        for essay in &train_essays {
            let mut enc = encode_essay(essay, &vocab, specs, cfg.limits)?;
            if let Some(labels) = &labels {
                let targets = align_gaze(labels, &enc)?;
                if targets.labeled_count() > 0 {
                    enc.gaze = Some(targets);
                }
            }
            train_encs.push(enc);
        }
        let dev_encs = split
            .dev
            .iter()
            .map(|&id| encode_essay(fetch(id)?, &vocab, specs, cfg.limits))
            .collect::<Result<Vec<_>>>()?;

        let mut fold_obs = |rec: &EpochRecord| {
            if let Some(obs) = hooks.on_epoch.as_deref_mut() {
                obs(i, rec);
            }
        };
        let outcome = train_fold(
            &train_encs,
            &dev_encs,
            &embeddings,
            specs,
            &fold_cfg,
            Some(&mut fold_obs),
        )?;

        let mut predictions = Vec::with_capacity(plan.test.len());
        for &id in &plan.test {
            let essay = fetch(id)?;
            let enc = encode_essay(essay, &vocab, specs, cfg.limits)?;
            let p = predict(&outcome.params, &fold_cfg.model, &enc)?;
            predictions.push(EssayResult {
                essay_id: id,
                gold: essay.gold_score,
                predicted: denormalize_score(p.score_unit, target_spec)?,
                score_unit: p.score_unit,
            });
        }
        let gold: Vec<i32> = predictions.iter().map(|p| p.gold).collect();
        let pred: Vec<i32> = predictions.iter().map(|p| p.predicted).collect();
        let test_qwk = qwk(&gold, &pred, target_spec.min_score, target_spec.max_score)?;

        let report = FoldReport {
            fold: i,
            seed,
            best_epoch: outcome.best_epoch,
            dev_qwk: outcome.best_dev_qwk.unwrap_or(f64::NAN),
            test_qwk,
            history: outcome.history,
            predictions,
        };
        if let Some(sink) = hooks.on_fold.as_deref_mut() {
            sink(i, &outcome.params, &report);
        }
        folds.push(report);
    }

    let mean_test_qwk = folds.iter().map(|f| f.test_qwk).sum::<f64>() / folds.len() as f64;
    Ok(ExperimentReport {
        target_prompt,
        mode,
        seed: cfg.train.seed,
        mean_test_qwk,
        folds,
        significance: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPair {
    pub fold: usize,
    pub nogaze_qwk: f64,
    pub gaze_qwk: f64,
}

/// One target prompt's gaze-vs-no-gaze comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub target_prompt: u8,
    pub seed: u64,
    pub nogaze_mean: f64,
    pub gaze_mean: f64,
    pub fold_pairs: Vec<FoldPair>,
    pub significance: Significance,
}

/// Pairs two reports fold by fold and tests the per-fold QWK differences.
/// A star marks p < 0.05 (two-tailed, paired).
pub fn compare_runs(gaze: &ExperimentReport, nogaze: &ExperimentReport) -> Result<Comparison> {
    if gaze.mode != RunMode::Gaze || nogaze.mode != RunMode::NoGaze {
        return Err(Error::Comparison(format!(
            "expected a gaze and a nogaze report, got {} and {}",
            gaze.mode.as_str(),
            nogaze.mode.as_str()
        )));
    }
    if gaze.target_prompt != nogaze.target_prompt {
        return Err(Error::Comparison(format!(
            "target prompts differ: {} vs {}",
            gaze.target_prompt, nogaze.target_prompt
        )));
    }
    if gaze.seed != nogaze.seed {
        return Err(Error::Comparison(format!(
            "seeds differ: {} vs {}, folds are not paired",
            gaze.seed, nogaze.seed
        )));
    }
    if gaze.folds.len() != nogaze.folds.len() {
        return Err(Error::Comparison(format!(
            "fold counts differ: {} vs {}",
            gaze.folds.len(),
            nogaze.folds.len()
        )));
    }
    let g = gaze.fold_qwks();
    let n = nogaze.fold_qwks();
    let (t, p) = paired_ttest_2tailed(&g, &n)?;
    let fold_pairs = g
        .iter()
        .zip(&n)
        .enumerate()
        .map(|(i, (&gq, &nq))| FoldPair {
            fold: i,
            nogaze_qwk: nq,
            gaze_qwk: gq,
        })
        .collect();
    Ok(Comparison {
        target_prompt: gaze.target_prompt,
        seed: gaze.seed,
        nogaze_mean: nogaze.mean_test_qwk,
        gaze_mean: gaze.mean_test_qwk,
        fold_pairs,
        significance: Significance {
            t,
            p,
            starred: p < 0.05,
        },
    })
}

fn render_row(label: &str, nogaze: f64, gaze: f64, starred: bool) -> String {
    let star = if starred { "*" } else { "" };
    format!("{label} | {nogaze:.3} | {gaze:.3}{star}")
}

/// Renders the per-prompt comparison rows plus, when more than one prompt
/// is present, a pooled "Mean QWK" row whose star comes from a paired
/// test over every fold pair of every prompt.
pub fn render_comparison_table(rows: &[Comparison]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Comparison("no comparison rows to render".into()));
    }
    let mut out = String::from("QWK by target prompt: no-gaze | gaze (* = paired t-test p < 0.05)\n");
    for row in rows {
        out.push_str(&render_row(
            &format!("Prompt {}", row.target_prompt),
            row.nogaze_mean,
            row.gaze_mean,
            row.significance.starred,
        ));
        out.push('\n');
    }
    if rows.len() > 1 {
        let nogaze_mean =
            rows.iter().map(|r| r.nogaze_mean).sum::<f64>() / rows.len() as f64;
        let gaze_mean = rows.iter().map(|r| r.gaze_mean).sum::<f64>() / rows.len() as f64;
        let g: Vec<f64> = rows
            .iter()
            .flat_map(|r| r.fold_pairs.iter().map(|p| p.gaze_qwk))
            .collect();
        let n: Vec<f64> = rows
            .iter()
            .flat_map(|r| r.fold_pairs.iter().map(|p| p.nogaze_qwk))
            .collect();
        let (_, p) = paired_ttest_2tailed(&g, &n)?;
        out.push_str(&render_row("Mean QWK", nogaze_mean, gaze_mean, p < 0.05));
        out.push('\n');
    }
    Ok(out)
}
