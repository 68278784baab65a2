//! Prompt corpora: UTF-8 files with one prompt per line, and a seeded
//! synthetic generator standing in for natural text.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::seeded;
use crate::tokens::Prompt;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    prompts: Vec<Prompt>,
    pub source: String,
}

impl Corpus {
    pub fn new(prompts: Vec<Prompt>, source: impl Into<String>) -> Result<Self> {
        if prompts.is_empty() {
            return Err(LabError::EmptyCorpus);
        }
        Ok(Self { prompts, source: source.into() })
    }

    /// One prompt per non-empty line; a trailing `\r` is dropped.
    pub fn parse(text: &str, source: impl Into<String>) -> Result<Self> {
        let prompts = text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .filter(|l| !l.is_empty())
            .map(Prompt::from_text)
            .collect::<Result<Vec<_>>>()?;
        Self::new(prompts, source)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.prompts {
            let bytes = p.bytes();
            let line = String::from_utf8(bytes)
                .map_err(|_| LabError::Format("prompt is not valid UTF-8".into()))?;
            if line.contains('\n') {
                return Err(LabError::Format("prompt contains a newline".into()));
            }
            out.push_str(&line);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn get(&self, i: usize) -> &Prompt {
        &self.prompts[i]
    }

    /// Prompts `[range]` as a new corpus.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.len() {
            return Err(LabError::InvalidArgument(format!("slice {range:?} beyond {} prompts", self.len())));
        }
        Self::new(self.prompts[range].to_vec(), self.source.clone())
    }

    /// Keeps prompts whose length lies in `min..=max`.
    pub fn filter_len(&self, min: usize, max: usize) -> Result<Self> {
        Self::new(self.prompts.iter().filter(|p| (min..=max).contains(&p.len())).cloned().collect(), self.source.clone())
    }

    /// First sentence of each prompt (through the first '.'), when its length lies in `min..=max`.
    pub fn first_sentences(&self, min: usize, max: usize) -> Result<Self> {
        let sentences = self
            .prompts
            .iter()
            .filter_map(|p| {
                let bytes = p.bytes();
                let end = bytes.iter().position(|b| *b == b'.').map_or(bytes.len(), |i| i + 1);
                (min..=max).contains(&end).then(|| Prompt::from_bytes(&bytes[..end]).expect("non-empty"))
            })
            .collect();
        Self::new(sentences, format!("{} (first sentences)", self.source))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub n_prompts: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Size of the word list; smaller lists repeat words more often.
    pub vocab_words: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self { n_prompts: 2000, min_len: 24, max_len: 100, vocab_words: 400, seed: 0 }
    }
}

/// Seeded pseudo-sentences of lowercase words drawn from a fixed word list.
pub fn synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    if cfg.n_prompts == 0 || cfg.vocab_words == 0 {
        return Err(LabError::InvalidArgument("synthetic corpus needs prompts and words".into()));
    }
    if cfg.min_len < 2 || cfg.min_len > cfg.max_len {
        return Err(LabError::InvalidArgument(format!("bad length range {}..={}", cfg.min_len, cfg.max_len)));
    }
    let mut rng = seeded(cfg.seed);
    let letters = b"etaoinshrdlucmfwypvbgkjqxz";
    let words: Vec<Vec<u8>> = (0..cfg.vocab_words)
        .map(|_| {
            let len = rng.random_range(2..=8);
            // Skewed letter choice gives text-like frequencies.
            (0..len).map(|_| letters[(rng.random::<f64>().powi(2) * letters.len() as f64) as usize]).collect()
        })
        .collect();
    let mut prompts = Vec::with_capacity(cfg.n_prompts);
    for _ in 0..cfg.n_prompts {
        let target = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut s: Vec<u8> = Vec::with_capacity(target + 8);
        while s.len() < target {
            if !s.is_empty() {
                s.push(if rng.random::<f64>() < 0.08 { b',' } else { b' ' });
                if s.last() == Some(&b',') {
                    s.push(b' ');
                }
            }
            s.extend_from_slice(words.choose(&mut rng).expect("non-empty"));
            if rng.random::<f64>() < 0.1 && s.len() + 2 < target {
                s.push(b'.');
            }
        }
        s.truncate(target.max(cfg.min_len));
        if s.last() == Some(&b' ') {
            s.pop();
        }
        if let Some(c) = s.first_mut() {
            *c = c.to_ascii_uppercase();
        }
        if s.len() < cfg.min_len {
            s.resize(cfg.min_len, b'e');
        }
        prompts.push(Prompt::from_bytes(&s)?);
    }
    Corpus::new(prompts, format!("synthetic(seed={})", cfg.seed))
}
