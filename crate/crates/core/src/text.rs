//! Sentence splitting, tokenization, vocabulary construction, word
//! embeddings, and the padded sentence/token encoding the network consumes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_score, Essay, PromptSpecs};
use crate::error::{Error, Result};
use crate::gaze::GazeTargets;
use crate::rng;
use crate::tensor::Tensor;

pub const PAD_INDEX: u32 = 0;
pub const UNK_INDEX: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Splits text into sentences on . ! ? followed by whitespace or end of
/// input. The terminator stays with its sentence. Text without any
/// terminator comes back as a single sentence; empty input yields nothing.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            let boundary = match chars.peek() {
                None => true,
                Some(n) => n.is_whitespace(),
            };
            if boundary {
                let s = current.trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                current.clear();
            }
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

/// True for anonymization placeholders of the scoring corpus: '@' followed
/// by letters and an optional trailing number ("@CAPS1", "@CITY"). These
/// pass through the tokenizer verbatim, case intact.
fn is_anonymization_token(tok: &str) -> bool {
    let rest = match tok.strip_prefix('@') {
        Some(r) => r,
        None => return false,
    };
    let letters = rest.trim_end_matches(|c: char| c.is_ascii_digit());
    !letters.is_empty() && letters.chars().all(|c| c.is_ascii_alphabetic())
}

fn explode_token(raw: &str, out: &mut Vec<String>) {
    if raw.is_empty() {
        return;
    }
    if is_anonymization_token(raw) {
        out.push(raw.to_string());
        return;
    }
    let mut it = raw.chars();
    let first = it.next().unwrap();
    let last = raw.chars().next_back().unwrap();
    if raw.chars().count() > 1 && !last.is_alphanumeric() {
        explode_token(&raw[..raw.len() - last.len_utf8()], out);
        out.push(last.to_string());
        return;
    }
    if !first.is_alphanumeric() {
        out.push(first.to_string());
        explode_token(it.as_str(), out);
        return;
    }
    out.push(raw.to_lowercase());
}

/// Lowercases and splits a sentence into tokens. Whitespace separates;
/// leading and trailing punctuation become their own single-character
/// tokens; interior punctuation (apostrophes, hyphens) stays inside the
/// word. Idempotent on its own space-joined output.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in sentence.split_whitespace() {
        explode_token(raw, &mut out);
    }
    out
}

/// Token-to-index map with reserved padding (0) and unknown (1) entries.
/// Lookup is total: anything unseen maps to the unknown index.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    index: BTreeMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn index_of(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|s| s.as_str())
    }
}

/// Builds the vocabulary of all tokens occurring at least `min_count`
/// times in the corpus. Indices are assigned by descending frequency with
/// lexicographic tie-break, after the two reserved entries, so identical
/// corpora always produce identical mappings.
///
/// The corpus must be training-fold essays only; feeding held-out prompts
/// here would leak them into the model.
pub fn build_vocab(corpus: &[Essay], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Domain("vocabulary over an empty corpus".into()));
    }
    if min_count == 0 {
        return Err(Error::Parameter("min_count must be at least 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for essay in corpus {
        for sentence in split_sentences(&essay.text) {
            for tok in tokenize(&sentence) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));

    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    let index = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Ok(Vocabulary { index, tokens })
}

/// Word vectors, one row per vocabulary index. Row 0 (padding) is always
/// zero; rows for words that no pretrained file covered are uniform random
/// in [-0.05, 0.05].
#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub table: Tensor,
}

impl EmbeddingMatrix {
    /// Fully random table: reproducible from the seed, padding row zero.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 || dim == 0 {
            return Err(Error::Parameter(format!(
                "embedding table {vocab_size} x {dim} is degenerate"
            )));
        }
        let mut r = rng::stream(seed, &[rng::domain::EMBED_INIT]);
        let mut table = Tensor::uniform(&[vocab_size, dim], -0.05, 0.05, &mut r);
        table.row_mut(0).fill(0.0);
        Ok(EmbeddingMatrix { dim, table })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.dim(0)
    }
}

/// Overlays pretrained vectors onto a random table. The text is the usual
/// word-vector format: one token per line followed by `dim` reals. Rows
/// for tokens absent from the text (including the unknown token) keep
/// their seeded random initialization; the padding row stays zero. The
/// result does not depend on the file's line order for distinct tokens.
pub fn parse_embeddings(
    text: &str,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    let mut emb = EmbeddingMatrix::random(vocab.len(), dim, seed)?;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap();
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::Format(format!(
                "line {lineno}: {} values for {token:?}, expected {dim}",
                values.len()
            )));
        }
        if !vocab.contains(token) {
            continue;
        }
        let idx = vocab.index_of(token);
        if idx == PAD_INDEX {
            continue;
        }
        let row = emb.table.row_mut(idx as usize);
        for (slot, v) in row.iter_mut().zip(&values) {
            let parsed: f64 = v.parse().map_err(|_| {
                Error::Parse(format!("line {lineno}: value {v:?} for {token:?}"))
            })?;
            if !parsed.is_finite() {
                return Err(Error::NonFinite(format!("line {lineno}: {token:?}")));
            }
            *slot = parsed;
        }
    }
    Ok(emb)
}

/// Truncation limits for the sentence/token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeLimits {
    pub max_sentences: usize,
    pub max_tokens: usize,
}

impl Default for EncodeLimits {
    fn default() -> Self {
        // covers the longest prompt's mean length with truncation only in
        // the extreme tail
        EncodeLimits {
            max_sentences: 40,
            max_tokens: 50,
        }
    }
}

impl EncodeLimits {
    pub fn validate(&self) -> Result<()> {
        if self.max_sentences == 0 || self.max_tokens == 0 {
            return Err(Error::Parameter("encode limits must be positive".into()));
        }
        Ok(())
    }
}

/// An essay rendered as a padded S x T grid of vocabulary indices, ready
/// for the network. `flat_map` records where each token of the original
/// flat token stream landed in the grid (None once truncated), which is
/// how external per-token labels find their grid cell.
#[derive(Clone, Debug)]
pub struct EncodedEssay {
    pub essay_id: u32,
    pub prompt_id: u8,
    pub gold: i32,
    /// Normalized score in [0, 1].
    pub target: f64,
    pub max_sentences: usize,
    pub max_tokens: usize,
    /// S x T vocabulary indices, row-major; padding cells hold index 0.
    pub grid: Vec<u32>,
    pub sentence_mask: Vec<bool>,
    /// S x T, true where a real token sits.
    pub token_mask: Vec<bool>,
    /// Flat pre-truncation token stream -> grid position.
    pub flat_map: Vec<Option<(usize, usize)>>,
    pub gaze: Option<GazeTargets>,
}

impl EncodedEssay {
    pub fn n_sentences(&self) -> usize {
        self.sentence_mask.iter().filter(|&&b| b).count()
    }

    /// Real tokens in grid row `s`.
    pub fn sentence_len(&self, s: usize) -> usize {
        let t = self.max_tokens;
        self.token_mask[s * t..(s + 1) * t]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn grid_row(&self, s: usize) -> &[u32] {
        &self.grid[s * self.max_tokens..(s + 1) * self.max_tokens]
    }

    pub fn mask_row(&self, s: usize) -> &[bool] {
        &self.token_mask[s * self.max_tokens..(s + 1) * self.max_tokens]
    }

    /// Length of the flat token stream before truncation.
    pub fn token_count(&self) -> usize {
        self.flat_map.len()
    }
}

/// Splits, tokenizes, indexes, truncates, and pads one essay, and
/// normalizes its gold score into the unit interval.
pub fn encode_essay(
    essay: &Essay,
    vocab: &Vocabulary,
    specs: &PromptSpecs,
    limits: EncodeLimits,
) -> Result<EncodedEssay> {
    limits.validate()?;
    let spec = specs.require(essay.prompt_id)?;
    let target = normalize_score(essay.gold_score, spec)?;

    let sentences: Vec<Vec<String>> = split_sentences(&essay.text)
        .iter()
        .map(|s| tokenize(s))
        .filter(|toks| !toks.is_empty())
        .collect();
    let total: usize = sentences.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(Error::EmptyEssay {
            essay_id: essay.essay_id,
        });
    }

    let (s_max, t_max) = (limits.max_sentences, limits.max_tokens);
    let mut grid = vec![PAD_INDEX; s_max * t_max];
    let mut token_mask = vec![false; s_max * t_max];
    let mut sentence_mask = vec![false; s_max];
    let mut flat_map = Vec::with_capacity(total);

    for (si, sent) in sentences.iter().enumerate() {
        for (ti, tok) in sent.iter().enumerate() {
            if si < s_max && ti < t_max {
                flat_map.push(Some((si, ti)));
                grid[si * t_max + ti] = vocab.index_of(tok);
                token_mask[si * t_max + ti] = true;
                sentence_mask[si] = true;
            } else {
                flat_map.push(None);
            }
        }
    }

    Ok(EncodedEssay {
        essay_id: essay.essay_id,
        prompt_id: essay.prompt_id,
        gold: essay.gold_score,
        target,
        max_sentences: s_max,
        max_tokens: t_max,
        grid,
        sentence_mask,
        token_mask,
        flat_map,
        gaze: None,
    })
}
