//! Dataset ingestion, vocabulary, tokenization and a seeded synthetic task.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub label: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDataset {
    pub records: Vec<RawRecord>,
    pub num_classes: usize,
}

impl RawDataset {
    pub fn new(records: Vec<RawRecord>, num_classes: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(r) = records.iter().find(|r| r.label >= num_classes) {
            return Err(Error::Invalid(format!(
                "label {} outside [0, {num_classes})",
                r.label
            )));
        }
        Ok(RawDataset {
            records,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Splits off the records from `at` onward.
    pub fn split_at(&self, at: usize) -> Result<(RawDataset, RawDataset)> {
        let (a, b) = self.records.split_at(at.min(self.records.len()));
        Ok((
            RawDataset::new(a.to_vec(), self.num_classes)?,
            RawDataset::new(b.to_vec(), self.num_classes)?,
        ))
    }

    /// `label<TAB>text` lines, the same format `load_tsv` reads.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}", r.label, r.text);
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads `label<TAB>text` lines (no header). `num_classes` is one past the
/// largest label seen.
pub fn load_tsv(path: impl AsRef<Path>) -> Result<RawDataset> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&content, path)
}

pub fn parse_tsv(content: &str, path: &Path) -> Result<RawDataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (i, line) in content.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let (label, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(i + 1, "expected `label<TAB>text`".into()))?;
        let label = label
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(i + 1, format!("bad label {label:?}: {e}")))?;
        records.push(RawRecord {
            label,
            text: text.to_string(),
        });
    }
    if records.is_empty() {
        return Err(parse_err(0, "file contains no records".into()));
    }
    let num_classes = records.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    RawDataset::new(records, num_classes)
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(extra: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(extra);
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line, reserved entries included.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = content.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Invalid(format!(
                "{}: vocabulary must start with the reserved tokens",
                path.display()
            )));
        }
        Vocabulary::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()))
    }
}

/// Lowercased whitespace tokens with frequency `>= min_freq`, most frequent
/// first, ties lexicographic, at most `max_size` of them after the reserved ids.
pub fn build_vocab(raw: &RawDataset, min_freq: usize, max_size: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in &raw.records {
        for w in words(&r.text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_freq && !RESERVED.contains(&w.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept.truncate(max_size);
    Vocabulary::from_tokens(kept.into_iter().map(|(w, _)| w))
}

/// `[CLS]` followed by up to `max_len - 1` word ids, padded to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> (Vec<usize>, Vec<bool>) {
    assert!(
        max_len >= 2,
        "max_len must leave room for [CLS] and one token"
    );
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(
        words(text)
            .take(max_len - 1)
            .map(|w| vocab.id(&w).unwrap_or(UNK_ID)),
    );
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let mask = (0..max_len).map(|i| i < real).collect();
    (ids, mask)
}

/// Space-joined tokens at masked-in positions after `[CLS]`.
pub fn detokenize(ids: &[usize], mask: &[bool], vocab: &Vocabulary) -> String {
    ids.iter()
        .zip(mask)
        .skip(1)
        .filter(|(_, &m)| m)
        .map(|(&id, _)| vocab.token(id).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    /// Row of this example in the memory banks.
    pub index: usize,
    pub token_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub label: usize,
}

impl TokenizedExample {
    /// Positions that carry a real token, excluding `[CLS]`.
    pub fn content_mask(&self) -> Vec<bool> {
        self.mask
            .iter()
            .enumerate()
            .map(|(i, &m)| m && i != 0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<TokenizedExample>,
    pub num_classes: usize,
}

impl Dataset {
    /// Tokenizes every record; example `i` gets bank index `i`.
    pub fn from_raw(raw: &RawDataset, vocab: &Vocabulary, max_len: usize) -> Self {
        let examples = raw
            .records
            .iter()
            .enumerate()
            .map(|(index, r)| {
                let (token_ids, mask) = tokenize(&r.text, vocab, max_len);
                TokenizedExample {
                    index,
                    token_ids,
                    mask,
                    label: r.label,
                }
            })
            .collect();
        Dataset {
            examples,
            num_classes: raw.num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_examples: usize,
    /// Distinct words in the generated corpus (indicators plus filler).
    pub vocab_size: usize,
    /// Inclusive range of word counts per example.
    pub len_range: (usize, usize),
    pub keyword_count_per_class: usize,
    pub seed: u64,
}

pub fn indicator_word(class: usize, k: usize) -> String {
    format!("kw{class}x{k}")
}

fn filler_word(k: usize) -> String {
    format!("w{k}")
}

/// Class of an indicator word produced by [`synth_generate`], if it is one.
pub fn indicator_class(word: &str) -> Option<usize> {
    let rest = word.strip_prefix("kw")?;
    let (class, k) = rest.split_once('x')?;
    k.parse::<usize>().ok()?;
    class.parse().ok()
}

/// Keyword-detection task: each example holds one to three indicator words
/// of its own class among shared filler words. Labels cycle through the
/// classes, so counts differ by at most one.
pub fn synth_generate(spec: &SynthSpec) -> Result<RawDataset> {
    let SynthSpec {
        num_classes,
        num_examples,
        vocab_size,
        len_range: (lo, hi),
        keyword_count_per_class,
        seed,
    } = *spec;
    let indicators = num_classes * keyword_count_per_class;
    if num_classes < 2
        || keyword_count_per_class == 0
        || vocab_size <= indicators
        || num_examples == 0
        || lo == 0
        || lo > hi
    {
        return Err(Error::Invalid(format!(
            "infeasible synthetic task: {num_classes} classes x {keyword_count_per_class} keywords, \
             {vocab_size} words, lengths {lo}..={hi}, {num_examples} examples"
        )));
    }
    let filler_count = vocab_size - indicators;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(num_examples);
    for i in 0..num_examples {
        let label = i % num_classes;
        let len = rng.gen_range(lo..=hi);
        let n_kw = rng.gen_range(1..=3usize).min(len);
        let mut words: Vec<String> = (0..len)
            .map(|_| filler_word(rng.gen_range(0..filler_count)))
            .collect();
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(&mut rng);
        for &p in &positions[..n_kw] {
            words[p] = indicator_word(label, rng.gen_range(0..keyword_count_per_class));
        }
        records.push(RawRecord {
            label,
            text: words.join(" "),
        });
    }
    RawDataset::new(records, num_classes)
}

/// Number of distinct indicator words of `class` present in `text`.
pub fn indicator_hits(text: &str, class: usize) -> usize {
    words(text)
        .filter(|w| indicator_class(w) == Some(class))
        .collect::<HashSet<_>>()
        .len()
}
