//! Gaze-behaviour labels: the five per-token reading attributes, per-reader
//! quantile binning with [0,1] scaling, alignment of flat token labels onto
//! the padded essay grid, and a synthetic generator standing in for a
//! private eye-tracking corpus.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Essay;
use crate::error::{Error, Result};
use crate::rng;
use crate::text::{split_sentences, tokenize, EncodedEssay};

/// The five reading-behaviour attributes recorded per token.
///
/// Dwell time and first-fixation duration are millisecond durations,
/// is-regression and skip are binary events, run count is a non-negative
/// integer number of gaze visits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GazeAttribute {
    DwellTime,
    FirstFixation,
    IsRegression,
    RunCount,
    Skip,
}

impl GazeAttribute {
    pub const ALL: [GazeAttribute; 5] = [
        GazeAttribute::DwellTime,
        GazeAttribute::FirstFixation,
        GazeAttribute::IsRegression,
        GazeAttribute::RunCount,
        GazeAttribute::Skip,
    ];

    pub const fn index(self) -> usize {
        match self {
            GazeAttribute::DwellTime => 0,
            GazeAttribute::FirstFixation => 1,
            GazeAttribute::IsRegression => 2,
            GazeAttribute::RunCount => 3,
            GazeAttribute::Skip => 4,
        }
    }

    pub const fn short_name(self) -> &'static str {
        match self {
            GazeAttribute::DwellTime => "DT",
            GazeAttribute::FirstFixation => "FFD",
            GazeAttribute::IsRegression => "IR",
            GazeAttribute::RunCount => "RC",
            GazeAttribute::Skip => "Skip",
        }
    }

    /// Binary attributes pass through binning untouched.
    pub const fn is_binary(self) -> bool {
        matches!(self, GazeAttribute::IsRegression | GazeAttribute::Skip)
    }

    /// Weight of this attribute's loss term in the multi-task objective.
    pub const fn default_loss_weight(self) -> f64 {
        match self {
            GazeAttribute::DwellTime => 0.05,
            GazeAttribute::FirstFixation => 0.05,
            GazeAttribute::IsRegression => 0.01,
            GazeAttribute::RunCount => 0.01,
            GazeAttribute::Skip => 0.1,
        }
    }
}

pub fn default_gaze_loss_weights() -> [f64; 5] {
    let mut w = [0.0; 5];
    for a in GazeAttribute::ALL {
        w[a.index()] = a.default_loss_weight();
    }
    w
}

/// One reader's measurements for one token of one essay. `token_index`
/// counts through the flat tokenizer output of the essay, before any
/// sentence padding or truncation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawGazeRecord {
    pub essay_id: u32,
    pub reader_id: u32,
    pub token_index: usize,
    /// Indexed by `GazeAttribute::index()`.
    pub values: [f64; 5],
}

impl RawGazeRecord {
    pub fn get(&self, attr: GazeAttribute) -> f64 {
        self.values[attr.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |attr: GazeAttribute| {
            format!(
                "essay {} reader {} token {}: {}",
                self.essay_id,
                self.reader_id,
                self.token_index,
                attr.short_name()
            )
        };
        for attr in GazeAttribute::ALL {
            let v = self.get(attr);
            if !v.is_finite() {
                return Err(Error::NonFinite(ctx(attr)));
            }
            if v < 0.0 {
                return Err(Error::Validation(format!("{} is negative", ctx(attr))));
            }
            if attr.is_binary() && v != 0.0 && v != 1.0 {
                return Err(Error::Validation(format!("{} must be 0 or 1", ctx(attr))));
            }
        }
        let rc = self.get(GazeAttribute::RunCount);
        if rc.fract() != 0.0 {
            return Err(Error::Validation(format!(
                "{} must be integer-valued",
                ctx(GazeAttribute::RunCount)
            )));
        }
        if self.get(GazeAttribute::Skip) == 1.0 {
            for attr in [
                GazeAttribute::DwellTime,
                GazeAttribute::FirstFixation,
                GazeAttribute::RunCount,
            ] {
                if self.get(attr) != 0.0 {
                    return Err(Error::Validation(format!(
                        "{} nonzero on a skipped token",
                        ctx(attr)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Scaled per-token label: one value in [0,1] per attribute, averaged over
/// the readers that covered the token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenGaze {
    pub values: [f64; 5],
}

/// Gaze targets aligned onto an essay's S x T grid. `values` is attribute-
/// major (attribute, sentence, token); `mask` is S x T, true where a label
/// exists. Unmasked cells are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeTargets {
    pub max_sentences: usize,
    pub max_tokens: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GazeTargets {
    pub fn labeled_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn value_at(&self, attr: GazeAttribute, s: usize, t: usize) -> f64 {
        let (sm, tm) = (self.max_sentences, self.max_tokens);
        self.values[attr.index() * sm * tm + s * tm + t]
    }
}

/// Equal-frequency binning: element i gets floor(rank_i * bins / n) where
/// rank_i is the number of elements strictly smaller than element i. Tied
/// values share the rank of their first occurrence, so they always land in
/// the same (lowest admissible) bin, and the mapping is monotone in value.
pub fn quantile_bin(values: &[f64], bin_count: usize) -> Result<Vec<usize>> {
    if bin_count < 2 {
        return Err(Error::Parameter(format!(
            "bin count {bin_count} must be at least 2"
        )));
    }
    if values.is_empty() {
        return Err(Error::Domain("quantile binning of no values".into()));
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("bin input [{i}] = {v}")));
        }
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());

    let mut bins = vec![0usize; n];
    let mut i = 0;
    while i < n {
        // run of tied values starting at sorted position i
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let bin = i * bin_count / n;
        for &orig in &order[i..j] {
            bins[orig] = bin;
        }
        i = j;
    }
    Ok(bins)
}

/// Bins each reader's duration-valued attributes on that reader's own
/// value distribution, scales bins to [0,1] by bin/(bins-1), passes the
/// binary attributes through, and averages across readers per token.
pub fn bin_and_scale(
    records: &[RawGazeRecord],
    bin_count: usize,
) -> Result<BTreeMap<(u32, usize), TokenGaze>> {
    if bin_count < 2 {
        return Err(Error::Parameter(format!(
            "bin count {bin_count} must be at least 2"
        )));
    }
    for r in records {
        r.validate()?;
    }

    let mut by_reader: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_reader.entry(r.reader_id).or_default().push(i);
    }

    // scaled[i] = per-record scaled values
    let mut scaled: Vec<[f64; 5]> = vec![[0.0; 5]; records.len()];
    let denom = (bin_count - 1) as f64;
    for indices in by_reader.values() {
        for attr in GazeAttribute::ALL {
            if attr.is_binary() {
                for &i in indices {
                    scaled[i][attr.index()] = records[i].get(attr);
                }
            } else {
                let vals: Vec<f64> = indices.iter().map(|&i| records[i].get(attr)).collect();
                let bins = quantile_bin(&vals, bin_count)?;
                for (&i, &b) in indices.iter().zip(&bins) {
                    scaled[i][attr.index()] = b as f64 / denom;
                }
            }
        }
    }

    let mut acc: BTreeMap<(u32, usize), ([f64; 5], usize)> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let slot = acc.entry((r.essay_id, r.token_index)).or_insert(([0.0; 5], 0));
        for k in 0..5 {
            slot.0[k] += scaled[i][k];
        }
        slot.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(key, (sums, count))| {
            let mut values = sums;
            for v in &mut values {
                *v /= count as f64;
            }
            (key, TokenGaze { values })
        })
        .collect())
}

/// Places an essay's scaled labels onto its grid. Labels for truncated
/// positions are silently dropped (their grid cell no longer exists);
/// labels beyond the essay's token stream are an alignment error. An essay
/// with no labels at all comes back fully masked out.
pub fn align_gaze(
    labels: &BTreeMap<(u32, usize), TokenGaze>,
    essay: &EncodedEssay,
) -> Result<GazeTargets> {
    let (sm, tm) = (essay.max_sentences, essay.max_tokens);
    let mut targets = GazeTargets {
        max_sentences: sm,
        max_tokens: tm,
        values: vec![0.0; 5 * sm * tm],
        mask: vec![false; sm * tm],
    };
    let id = essay.essay_id;
    for ((_, token_index), label) in labels.range((id, 0)..=(id, usize::MAX)) {
        let ti = *token_index;
        if ti >= essay.token_count() {
            return Err(Error::Alignment {
                essay_id: id,
                token_index: ti,
                token_count: essay.token_count(),
            });
        }
        if let Some((s, t)) = essay.flat_map[ti] {
            for attr in GazeAttribute::ALL {
                targets.values[attr.index() * sm * tm + s * tm + t] = label.values[attr.index()];
            }
            targets.mask[s * tm + t] = true;
        }
    }
    Ok(targets)
}

/// Simulated readers per essay in the synthetic generator.
pub const SYNTH_READERS: u32 = 3;

/// Generates plausible reading behaviour for every token of an essay, for
/// `SYNTH_READERS` simulated readers. Longer tokens attract longer
/// fixations, more revisits, and fewer skips; each reader has their own
/// speed. Output is deterministic in (essay, seed) and satisfies every
/// record invariant.
pub fn synth_gaze(essay: &Essay, seed: u64) -> Vec<RawGazeRecord> {
    let tokens: Vec<String> = split_sentences(&essay.text)
        .iter()
        .flat_map(|s| tokenize(s))
        .collect();
    let mut out = Vec::with_capacity(tokens.len() * SYNTH_READERS as usize);
    for reader in 0..SYNTH_READERS {
        let mut r = rng::stream(
            seed,
            &[rng::domain::SYNTH_GAZE, essay.essay_id as u64, reader as u64],
        );
        // per-reader speed: scales all durations, exercising the
        // rank-based idiosyncrasy correction downstream
        let speed = 0.6 + r.gen_range(0.0..0.9);
        for (token_index, tok) in tokens.iter().enumerate() {
            let len = tok.chars().count() as f64;
            let p_skip = (0.66 - 0.11 * len).clamp(0.04, 0.66);
            let mut values = [0.0; 5];
            if r.gen_range(0.0..1.0) < p_skip {
                values[GazeAttribute::Skip.index()] = 1.0;
                // a skipped word can still trigger a later regression
                values[GazeAttribute::IsRegression.index()] =
                    f64::from(r.gen_range(0.0..1.0) < 0.03);
            } else {
                let dt = speed * (55.0 + 32.0 * len + r.gen_range(0.0..70.0));
                let ffd = (dt * r.gen_range(0.35..0.75)).min(dt);
                let mut rc = 1.0;
                if r.gen_range(0.0..1.0) < (0.10 + 0.035 * len).min(0.6) {
                    rc += 1.0;
                }
                if r.gen_range(0.0..1.0) < (0.03 + 0.015 * len).min(0.3) {
                    rc += 1.0;
                }
                values[GazeAttribute::DwellTime.index()] = dt;
                values[GazeAttribute::FirstFixation.index()] = ffd;
                values[GazeAttribute::RunCount.index()] = rc;
                values[GazeAttribute::IsRegression.index()] =
                    f64::from(r.gen_range(0.0..1.0) < (0.08 + 0.02 * len).min(0.45));
            }
            out.push(RawGazeRecord {
                essay_id: essay.essay_id,
                reader_id: reader,
                token_index,
                values,
            });
        }
    }
    out
}
