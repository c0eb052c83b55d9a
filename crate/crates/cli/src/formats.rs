//! On-disk formats: the corpus JSON dump and the gaze TSV.

use aeg_core::dataset::{Essay, PromptSpecs};
use aeg_core::gaze::RawGazeRecord;
use anyhow::{anyhow, bail, Context, Result};
use std::fs;
use std::path::Path;

pub const GAZE_HEADER: &str = "essay_id\treader_id\ttoken_index\tDT\tFFD\tIR\tRC\tSkip";

/// Loads a corpus dump and verifies every essay against the prompt table
/// before anything downstream trusts it.
pub fn read_corpus(path: &Path, specs: &PromptSpecs) -> Result<Vec<Essay>> {
    let bytes = fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let corpus: Vec<Essay> = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing corpus {}", path.display()))?;
    if corpus.is_empty() {
        bail!("corpus {} holds no essays", path.display());
    }
    for essay in &corpus {
        let spec = specs
            .require(essay.prompt_id)
            .with_context(|| format!("essay {}", essay.essay_id))?;
        if !spec.contains(essay.gold_score) {
            bail!(
                "essay {}: score {} outside [{}, {}] of prompt {}",
                essay.essay_id,
                essay.gold_score,
                spec.min_score,
                spec.max_score,
                essay.prompt_id
            );
        }
    }
    Ok(corpus)
}

pub fn write_corpus(path: &Path, corpus: &[Essay]) -> Result<()> {
    let mut json = serde_json::to_string_pretty(corpus)?;
    json.push('\n');
    fs::write(path, json).with_context(|| format!("writing corpus {}", path.display()))
}

/// Reads gaze records from TSV. The header row is required and fixes the
/// column order; every row is validated (finite values, binary flags).
pub fn read_gaze_tsv(path: &Path) -> Result<Vec<RawGazeRecord>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading gaze file {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| anyhow!("gaze file {} is empty", path.display()))?;
    if header.trim_end() != GAZE_HEADER {
        bail!(
            "gaze file {}: bad header {header:?}, expected {GAZE_HEADER:?}",
            path.display()
        );
    }

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            bail!("gaze line {line_no}: expected 8 tab-separated fields, got {}", fields.len());
        }
        let field = |i: usize, name: &str| -> Result<f64> {
            fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("gaze line {line_no}: bad {name} {:?}: {e}", fields[i]))
        };
        let record = RawGazeRecord {
            essay_id: fields[0]
                .trim()
                .parse()
                .map_err(|e| anyhow!("gaze line {line_no}: bad essay_id: {e}"))?,
            reader_id: fields[1]
                .trim()
                .parse()
                .map_err(|e| anyhow!("gaze line {line_no}: bad reader_id: {e}"))?,
            token_index: fields[2]
                .trim()
                .parse()
                .map_err(|e| anyhow!("gaze line {line_no}: bad token_index: {e}"))?,
            values: [
                field(3, "DT")?,
                field(4, "FFD")?,
                field(5, "IR")?,
                field(6, "RC")?,
                field(7, "Skip")?,
            ],
        };
        record
            .validate()
            .map_err(|e| anyhow!("gaze line {line_no}: {e}"))?;
        records.push(record);
    }
    if records.is_empty() {
        bail!("gaze file {} holds no records", path.display());
    }
    Ok(records)
}

pub fn write_gaze_tsv(path: &Path, records: &[RawGazeRecord]) -> Result<()> {
    let mut out = String::with_capacity(records.len() * 48 + GAZE_HEADER.len() + 1);
    out.push_str(GAZE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.essay_id,
            r.reader_id,
            r.token_index,
            r.values[0],
            r.values[1],
            r.values[2],
            r.values[3],
            r.values[4],
        ));
    }
    fs::write(path, out).with_context(|| format!("writing gaze file {}", path.display()))
}
