//! Text perturbation for the robustness sweeps: whole-word synonym
//! substitution from a shipped table, single-character typos, and an
//! identity control.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMode {
    Identity,
    Synonym,
    Typo,
}

/// Whole-word substitutions, e.g. `elbow => middle of the arm`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynonymTable {
    entries: BTreeMap<String, String>,
}

impl SynonymTable {
    /// Parses `word => replacement phrase` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<SynonymTable> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once("=>") else {
                return Err(Error::data(format!(
                    "synonym table line {}: expected `word => phrase`, got `{line}`",
                    i + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(Error::data(format!(
                    "synonym table line {}: empty word or phrase",
                    i + 1
                )));
            }
            if key.split_whitespace().count() != 1 {
                return Err(Error::data(format!(
                    "synonym table line {}: key `{key}` must be a single word",
                    i + 1
                )));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::data(format!(
                    "synonym table line {}: duplicate entry for `{key}`",
                    i + 1
                )));
            }
        }
        Ok(SynonymTable { entries })
    }

    pub fn load(path: &Path) -> Result<SynonymTable> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        SynonymTable::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn apply(&self, description: &str) -> String {
        description
            .split_whitespace()
            .map(|w| self.entries.get(w).map(String::as_str).unwrap_or(w))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One character-level edit (swap, drop, or duplicate) on one random word.
fn typo_word(word: &str, rng: &mut rand_chacha::ChaCha8Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    for _ in 0..16 {
        let mut edited = chars.clone();
        match rng.gen_range(0..3u8) {
            // Swap two adjacent characters.
            0 if edited.len() >= 2 => {
                let i = rng.gen_range(0..edited.len() - 1);
                edited.swap(i, i + 1);
            }
            // Drop one character.
            1 if edited.len() >= 2 => {
                let i = rng.gen_range(0..edited.len());
                edited.remove(i);
            }
            // Duplicate one character.
            _ => {
                let i = rng.gen_range(0..edited.len());
                let c = edited[i];
                edited.insert(i, c);
            }
        }
        if edited != chars {
            return edited.into_iter().collect();
        }
    }
    // A word like "aa" can defeat swaps; duplication always changes length.
    let mut edited = chars.clone();
    edited.push(chars[chars.len() - 1]);
    edited.into_iter().collect()
}

/// Perturbs keypoint descriptions. Synonym mode needs `table`; identity
/// mode returns the input. Deterministic for a given seed.
pub fn text_perturb(
    descriptions: &[String],
    mode: PerturbMode,
    seed: u64,
    table: Option<&SynonymTable>,
) -> Result<Vec<String>> {
    match mode {
        PerturbMode::Identity => Ok(descriptions.to_vec()),
        PerturbMode::Synonym => {
            let table = table.ok_or_else(|| {
                Error::data("synonym mode requires a synonym table")
            })?;
            Ok(descriptions.iter().map(|d| table.apply(d)).collect())
        }
        PerturbMode::Typo => {
            let mut rng = seeded_rng(seed);
            Ok(descriptions
                .iter()
                .map(|d| {
                    let words: Vec<&str> = d.split_whitespace().collect();
                    if words.is_empty() {
                        return d.clone();
                    }
                    let target = rng.gen_range(0..words.len());
                    words
                        .iter()
                        .enumerate()
                        .map(|(i, w)| {
                            if i == target {
                                typo_word(w, &mut rng)
                            } else {
                                (*w).to_string()
                            }
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect())
        }
    }
}
