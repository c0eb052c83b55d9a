//! Synthetic essay corpus generator. Scores are a noisy function of one
//! content statistic (the fraction of words drawn from a quality lexicon),
//! so a grader that reads the words has real signal to find, while each
//! pseudo-prompt mixes in its own topic vocabulary that a zero-shot model
//! must learn to ignore.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::{cos, log, round, sqrt};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Essay, PromptSpecs};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const QUALITY: [&str; 24] = [
    "cogent",
    "precise",
    "vivid",
    "nuanced",
    "compelling",
    "lucid",
    "rigorous",
    "insightful",
    "coherent",
    "eloquent",
    "persuasive",
    "thorough",
    "astute",
    "polished",
    "deft",
    "incisive",
    "measured",
    "resonant",
    "crisp",
    "assured",
    "fluent",
    "exact",
    "supple",
    "keen",
];

const FILLER: [&str; 40] = [
    "the", "a", "an", "this", "that", "these", "those", "some", "many", "few", "and", "but", "or",
    "so", "then", "also", "very", "quite", "rather", "just", "thing", "stuff", "part", "way",
    "time", "day", "idea", "point", "case", "fact", "side", "note", "page", "line", "word", "bit",
    "lot", "kind", "sort", "turn",
];

fn topic_words(prompt: u8) -> &'static [&'static str] {
    match prompt {
        1 => &[
            "letters", "computers", "screens", "typing", "mail", "offices", "keyboards",
            "printers", "desks", "messages", "files", "machines",
        ],
        2 => &[
            "libraries", "books", "shelves", "censors", "readers", "novels", "borrowing",
            "catalogs", "librarians", "pages", "covers", "stories",
        ],
        3 => &[
            "cyclists", "roads", "deserts", "heat", "water", "maps", "trails", "valleys", "towns",
            "miles", "rides", "pedals",
        ],
        4 => &[
            "winter", "hibiscus", "gardens", "frost", "blooms", "seasons", "cold", "plants",
            "petals", "roots", "soil", "spring",
        ],
        5 => &[
            "memoirs", "childhood", "homes", "families", "moves", "memories", "rooms",
            "photographs", "kitchens", "voices", "echoes", "walls",
        ],
        6 => &[
            "dirigibles", "towers", "mooring", "winds", "airships", "masts", "skies", "heights",
            "cables", "storms", "landings", "drafts",
        ],
        7 => &[
            "patience", "waiting", "lessons", "practice", "habits", "calm", "focus", "goals",
            "steps", "trials", "efforts", "progress",
        ],
        _ => &[
            "laughter", "jokes", "friends", "anecdotes", "evenings", "smiles", "humor", "moments",
            "gatherings", "tables", "games", "songs",
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusConfig {
    pub prompts: Vec<u8>,
    pub essays_per_prompt: usize,
    pub seed: u64,
    /// Standard deviation of the gaussian jitter applied to the unit
    /// quality before it is rounded onto the prompt's rating band.
    pub noise: f64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        SynthCorpusConfig {
            prompts: vec![3, 4, 5, 6],
            essays_per_prompt: 200,
            seed: 1,
            noise: 0.08,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::Config("synthetic corpus needs at least one prompt".into()));
        }
        let mut seen = self.prompts.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.prompts.len() {
            return Err(Error::Config("duplicate prompt in synthetic corpus config".into()));
        }
        if self.essays_per_prompt == 0 {
            return Err(Error::Config("essays_per_prompt must be at least 1".into()));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config(format!(
                "noise {} must be a finite non-negative real",
                self.noise
            )));
        }
        Ok(())
    }
}

fn gauss(r: &mut Rng) -> f64 {
    let u1: f64 = r.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = r.gen_range(0.0..1.0);
    sqrt(-2.0 * log(u1)) * cos(2.0 * core::f64::consts::PI * u2)
}

fn pick<'a>(words: &'a [&'a str], r: &mut Rng) -> &'a str {
    words[r.gen_range(0..words.len())]
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Generates the corpus. Every essay's rating comes from its own quality
/// level q in [0, 1]: words are quality-lexicon draws with probability
/// 0.06 + 0.50 q, topic draws with probability 0.18, filler otherwise,
/// and the rating is q plus gaussian noise rounded onto the prompt's
/// band. Deterministic per (seed, prompt, index).
pub fn synth_corpus(cfg: &SynthCorpusConfig, specs: &PromptSpecs) -> Result<Vec<Essay>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.prompts.len() * cfg.essays_per_prompt);
    let mut next_id = 1u32;
    for &prompt in &cfg.prompts {
        let spec = specs.require(prompt)?;
        let topics = topic_words(prompt);
        let span = f64::from(spec.max_score - spec.min_score);
        for k in 0..cfg.essays_per_prompt {
            let mut r = rng::stream(
                cfg.seed,
                &[rng::domain::SYNTH_CORPUS, u64::from(prompt), k as u64],
            );
            let q: f64 = r.gen_range(0.0..1.0);
            let noisy = (q + cfg.noise * gauss(&mut r)).clamp(0.0, 1.0);
            let gold = spec.min_score + round(noisy * span) as i32;

            let n_sentences = 4 + (r.gen_range(0..4u32) as usize);
            let mut text = String::new();
            for s in 0..n_sentences {
                if s > 0 {
                    text.push(' ');
                }
                let len = 7 + (r.gen_range(0..5u32) as usize);
                for w in 0..len {
                    if w > 0 {
                        text.push(' ');
                    }
                    let u: f64 = r.gen_range(0.0..1.0);
                    let word = if u < 0.06 + 0.50 * q {
                        pick(&QUALITY, &mut r)
                    } else if u < 0.06 + 0.50 * q + 0.18 {
                        pick(topics, &mut r)
                    } else {
                        pick(&FILLER, &mut r)
                    };
                    if w == 0 {
                        text.push_str(&capitalize(word));
                    } else {
                        text.push_str(word);
                    }
                }
                text.push('.');
            }
            out.push(Essay {
                essay_id: next_id,
                prompt_id: prompt,
                gold_score: gold,
                text,
            });
            next_id += 1;
        }
    }
    Ok(out)
}

/// Seed-determined choice of `k` essays to receive gaze recordings,
/// mirroring a small recorded subset. Returns sorted essay ids.
pub fn pick_gaze_essays(corpus: &[Essay], k: usize, seed: u64) -> Result<Vec<u32>> {
    if k == 0 || k > corpus.len() {
        return Err(Error::Parameter(format!(
            "cannot pick {k} essays from a corpus of {}",
            corpus.len()
        )));
    }
    let mut ids: Vec<u32> = corpus.iter().map(|e| e.essay_id).collect();
    let mut r = rng::stream(seed, &[rng::domain::SYNTH_GAZE]);
    ids.shuffle(&mut r);
    ids.truncate(k);
    ids.sort_unstable();
    Ok(ids)
}
