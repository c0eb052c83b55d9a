//! Essay corpus: prompt definitions, the tab-separated source format, and
//! score normalization.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EssayType {
    Persuasive,
    SourceDependent,
    Narrative,
}

/// One prompt's scoring rules: the closed integer range a human rater may
/// assign and the genre of the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt_id: u8,
    pub min_score: i32,
    pub max_score: i32,
    pub essay_type: EssayType,
}

impl PromptSpec {
    pub fn new(prompt_id: u8, min_score: i32, max_score: i32, essay_type: EssayType) -> Result<Self> {
        if min_score >= max_score {
            return Err(Error::Parameter(format!(
                "prompt {prompt_id}: score range [{min_score}, {max_score}] is empty"
            )));
        }
        Ok(PromptSpec {
            prompt_id,
            min_score,
            max_score,
            essay_type,
        })
    }

    pub fn contains(&self, score: i32) -> bool {
        (self.min_score..=self.max_score).contains(&score)
    }
}

/// The set of prompts a corpus may reference, keyed by prompt id.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PromptSpecs {
    by_id: BTreeMap<u8, PromptSpec>,
}

impl PromptSpecs {
    pub fn new() -> Self {
        PromptSpecs::default()
    }

    pub fn insert(&mut self, spec: PromptSpec) {
        self.by_id.insert(spec.prompt_id, spec);
    }

    pub fn get(&self, prompt_id: u8) -> Option<&PromptSpec> {
        self.by_id.get(&prompt_id)
    }

    pub fn require(&self, prompt_id: u8) -> Result<&PromptSpec> {
        self.get(prompt_id)
            .ok_or_else(|| Error::Validation(format!("unknown prompt id {prompt_id}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.by_id.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptSpec> {
        self.by_id.values()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// The eight prompts of the standard scoring corpus, with their published
/// score ranges and genres.
pub fn asap_prompt_specs() -> PromptSpecs {
    use EssayType::*;
    let mut specs = PromptSpecs::new();
    for (id, lo, hi, ty) in [
        (1, 2, 12, Persuasive),
        (2, 1, 6, Persuasive),
        (3, 0, 3, SourceDependent),
        (4, 0, 3, SourceDependent),
        (5, 0, 4, SourceDependent),
        (6, 0, 4, SourceDependent),
        (7, 0, 30, Narrative),
        (8, 0, 60, Narrative),
    ] {
        specs.insert(PromptSpec::new(id, lo, hi, ty).unwrap());
    }
    specs
}

/// Published per-prompt essay counts for the standard corpus, indexed by
/// prompt id. Used to sanity-check a freshly parsed copy of the data.
pub fn asap_published_counts() -> BTreeMap<u8, usize> {
    [
        (1, 1783),
        (2, 1800),
        (3, 1726),
        (4, 1770),
        (5, 1805),
        (6, 1800),
        (7, 1569),
        (8, 723),
    ]
    .into_iter()
    .collect()
}

/// A scored essay. `gold_score` is the resolved human rating
/// (the first-domain score of the source data) and always lies inside its
/// prompt's range.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Essay {
    pub essay_id: u32,
    pub prompt_id: u8,
    #[serde(rename = "score")]
    pub gold_score: i32,
    pub text: String,
}

/// Maps a raw integer score to [0, 1] with min -> 0 and max -> 1.
pub fn normalize_score(raw: i32, spec: &PromptSpec) -> Result<f64> {
    if !spec.contains(raw) {
        return Err(Error::Domain(format!(
            "score {raw} outside [{}, {}] of prompt {}",
            spec.min_score, spec.max_score, spec.prompt_id
        )));
    }
    Ok((raw - spec.min_score) as f64 / (spec.max_score - spec.min_score) as f64)
}

/// Maps a unit-interval model output back to an integer rating: clamp to
/// [0, 1], scale to the prompt range, round half away from zero, clamp to
/// the range. Total over all finite inputs.
pub fn denormalize_score(unit: f64, spec: &PromptSpec) -> Result<i32> {
    if !unit.is_finite() {
        return Err(Error::NonFinite(format!(
            "score for prompt {} is {unit}",
            spec.prompt_id
        )));
    }
    let u = unit.clamp(0.0, 1.0);
    let raw = spec.min_score as f64 + u * (spec.max_score - spec.min_score) as f64;
    let rounded = libm::round(raw) as i32;
    Ok(rounded.clamp(spec.min_score, spec.max_score))
}

/// Parses the tab-separated corpus export. The header row names the
/// columns; only `essay_id`, `essay_set`, `essay`, and `domain1_score` are
/// read, by name, so column order and extra columns are irrelevant. The
/// first-domain human score is the gold rating. Fails on the first
/// malformed row, naming the 1-based line.
pub fn parse_asap_tsv(bytes: &[u8], specs: &PromptSpecs) -> Result<Vec<Essay>> {
    let text: Cow<'_, str> = String::from_utf8_lossy(bytes);
    let mut lines = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .enumerate();

    let (_, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::Format("empty input: no header row".into()))?;
    let columns: Vec<&str> = header.split('\t').collect();
    let col = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| Error::Format(format!("missing column {name}")))
    };
    let id_col = col("essay_id")?;
    let set_col = col("essay_set")?;
    let text_col = col("essay")?;
    let score_col = col("domain1_score")?;
    let need = id_col.max(set_col).max(text_col).max(score_col);

    let mut essays = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() <= need {
            return Err(Error::Format(format!(
                "line {lineno}: {} fields, need at least {}",
                fields.len(),
                need + 1
            )));
        }
        let essay_id: u32 = fields[id_col].trim().parse().map_err(|_| {
            Error::Parse(format!("line {lineno}: essay_id {:?}", fields[id_col]))
        })?;
        let prompt_id: u8 = fields[set_col].trim().parse().map_err(|_| {
            Error::Parse(format!("line {lineno}: essay_set {:?}", fields[set_col]))
        })?;
        let spec = specs.get(prompt_id).ok_or_else(|| {
            Error::Validation(format!(
                "line {lineno}: essay {essay_id} references unknown prompt {prompt_id}"
            ))
        })?;
        let gold_score: i32 = fields[score_col].trim().parse().map_err(|_| {
            Error::Parse(format!(
                "line {lineno}: domain1_score {:?} of essay {essay_id}",
                fields[score_col]
            ))
        })?;
        if !spec.contains(gold_score) {
            return Err(Error::ScoreOutOfRange {
                essay_id,
                prompt_id,
                score: gold_score,
            });
        }
        let body = fields[text_col].trim();
        if body.is_empty() {
            return Err(Error::Validation(format!(
                "line {lineno}: essay {essay_id} has no text"
            )));
        }
        essays.push(Essay {
            essay_id,
            prompt_id,
            gold_score,
            text: body.to_string(),
        });
    }
    Ok(essays)
}

/// Essays per prompt, keyed by prompt id.
pub fn count_by_prompt(essays: &[Essay]) -> BTreeMap<u8, usize> {
    let mut counts = BTreeMap::new();
    for e in essays {
        *counts.entry(e.prompt_id).or_insert(0) += 1;
    }
    counts
}
