//! Flat `key = value` run configuration files.
//!
//! One key per line; `#` starts a comment; blank lines are ignored. Every
//! key maps onto one field of the experiment configuration, so a file
//! written by [`render_config`] parses back to an equal value. Keys may
//! appear at most once; unknown keys are rejected so typos fail loudly
//! instead of silently training with a default.

use aeg_core::experiment::{ExperimentConfig, SplitMode};
use aeg_core::model::WordPooling;
use anyhow::{anyhow, bail, Context, Result};
use std::collections::BTreeSet;

fn parse_bounded<T: std::str::FromStr>(value: &str, key: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| anyhow!("line {line}: bad {key} value {value:?}: {e}"))
}

/// Parses a config file over the defaults. The result is validated.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {line_no}: expected `key = value`, got {raw:?}"))?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            bail!("line {line_no}: key {key:?} has no value");
        }
        if !seen.insert(key.to_string()) {
            bail!("line {line_no}: duplicate key {key:?}");
        }

        match key {
            "batch_size" => cfg.train.batch_size = parse_bounded(value, key, line_no)?,
            "epochs" => cfg.train.epochs = parse_bounded(value, key, line_no)?,
            "seed" => cfg.train.seed = parse_bounded(value, key, line_no)?,
            "clip_norm" => {
                cfg.train.clip_norm = if value == "none" {
                    None
                } else {
                    Some(parse_bounded(value, key, line_no)?)
                }
            }
            "lr_decay" => cfg.train.lr_decay = parse_bounded(value, key, line_no)?,
            "lr" => cfg.train.optimizer.lr = parse_bounded(value, key, line_no)?,
            "rho" => cfg.train.optimizer.rho = parse_bounded(value, key, line_no)?,
            "momentum" => cfg.train.optimizer.momentum = parse_bounded(value, key, line_no)?,
            "epsilon" => cfg.train.optimizer.epsilon = parse_bounded(value, key, line_no)?,
            "embed_dim" => cfg.train.model.embed_dim = parse_bounded(value, key, line_no)?,
            "cnn_kernel" => cfg.train.model.cnn_kernel = parse_bounded(value, key, line_no)?,
            "cnn_filters" => cfg.train.model.cnn_filters = parse_bounded(value, key, line_no)?,
            "lstm_hidden" => cfg.train.model.lstm_hidden = parse_bounded(value, key, line_no)?,
            "dropout_rate" => cfg.train.model.dropout_rate = parse_bounded(value, key, line_no)?,
            "word_pooling" => {
                cfg.train.model.word_pooling = match value {
                    "attention" => WordPooling::Attention,
                    "mean" => WordPooling::Mean,
                    other => bail!(
                        "line {line_no}: word_pooling must be attention or mean, got {other:?}"
                    ),
                }
            }
            "word_attn_dim" => cfg.train.model.word_attn_dim = parse_bounded(value, key, line_no)?,
            "sent_attn_dim" => cfg.train.model.sent_attn_dim = parse_bounded(value, key, line_no)?,
            "gaze_weight_dt" => {
                cfg.train.model.gaze_loss_weights[0] = parse_bounded(value, key, line_no)?
            }
            "gaze_weight_ffd" => {
                cfg.train.model.gaze_loss_weights[1] = parse_bounded(value, key, line_no)?
            }
            "gaze_weight_ir" => {
                cfg.train.model.gaze_loss_weights[2] = parse_bounded(value, key, line_no)?
            }
            "gaze_weight_rc" => {
                cfg.train.model.gaze_loss_weights[3] = parse_bounded(value, key, line_no)?
            }
            "gaze_weight_skip" => {
                cfg.train.model.gaze_loss_weights[4] = parse_bounded(value, key, line_no)?
            }
            "min_count" => cfg.min_count = parse_bounded(value, key, line_no)?,
            "max_sentences" => cfg.limits.max_sentences = parse_bounded(value, key, line_no)?,
            "max_tokens" => cfg.limits.max_tokens = parse_bounded(value, key, line_no)?,
            "gaze_bin_count" => cfg.gaze_bin_count = parse_bounded(value, key, line_no)?,
            "split_mode" => {
                cfg.split_mode = match value {
                    "pooled" => SplitMode::Pooled,
                    "prompt_dev" => SplitMode::PromptDev,
                    other => bail!(
                        "line {line_no}: split_mode must be pooled or prompt_dev, got {other:?}"
                    ),
                }
            }
            other => bail!("line {line_no}: unknown key {other:?}"),
        }
    }

    cfg.validate().context("config failed validation")?;
    Ok(cfg)
}

/// Renders every setting in a fixed order. Identical configurations render
/// to identical bytes, so run directories can be diffed.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let clip = match cfg.train.clip_norm {
        Some(v) => v.to_string(),
        None => "none".into(),
    };
    let pooling = match cfg.train.model.word_pooling {
        WordPooling::Attention => "attention",
        WordPooling::Mean => "mean",
    };
    let split = match cfg.split_mode {
        SplitMode::Pooled => "pooled",
        SplitMode::PromptDev => "prompt_dev",
    };
    let w = &cfg.train.model.gaze_loss_weights;
    format!(
        "# training\n\
         batch_size = {}\n\
         epochs = {}\n\
         seed = {}\n\
         clip_norm = {}\n\
         lr_decay = {}\n\
         \n\
         # optimizer\n\
         lr = {}\n\
         rho = {}\n\
         momentum = {}\n\
         epsilon = {}\n\
         \n\
         # model\n\
         embed_dim = {}\n\
         cnn_kernel = {}\n\
         cnn_filters = {}\n\
         lstm_hidden = {}\n\
         dropout_rate = {}\n\
         word_pooling = {}\n\
         word_attn_dim = {}\n\
         sent_attn_dim = {}\n\
         gaze_weight_dt = {}\n\
         gaze_weight_ffd = {}\n\
         gaze_weight_ir = {}\n\
         gaze_weight_rc = {}\n\
         gaze_weight_skip = {}\n\
         \n\
         # corpus encoding and splitting\n\
         min_count = {}\n\
         max_sentences = {}\n\
         max_tokens = {}\n\
         gaze_bin_count = {}\n\
         split_mode = {}\n",
        cfg.train.batch_size,
        cfg.train.epochs,
        cfg.train.seed,
        clip,
        cfg.train.lr_decay,
        cfg.train.optimizer.lr,
        cfg.train.optimizer.rho,
        cfg.train.optimizer.momentum,
        cfg.train.optimizer.epsilon,
        cfg.train.model.embed_dim,
        cfg.train.model.cnn_kernel,
        cfg.train.model.cnn_filters,
        cfg.train.model.lstm_hidden,
        cfg.train.model.dropout_rate,
        pooling,
        cfg.train.model.word_attn_dim,
        cfg.train.model.sent_attn_dim,
        w[0],
        w[1],
        w[2],
        w[3],
        w[4],
        cfg.min_count,
        cfg.limits.max_sentences,
        cfg.limits.max_tokens,
        cfg.gaze_bin_count,
        split,
    )
}
