//! Word vocabulary, tokenization and teacher-forcing sequence helpers.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("sequence of length {0} is too short for teacher forcing (need at least 2)")]
    TooShort(usize),
    #[error("max_len must be at least 3, got {0}")]
    MaxLenTooSmall(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase words; every punctuation character becomes its own token.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in sentence.chars() {
        if ch.is_whitespace() {
            flush(&mut word, &mut out);
        } else if ch.is_ascii_punctuation() {
            flush(&mut word, &mut out);
            out.push(ch.to_string());
        } else {
            word.extend(ch.to_lowercase());
        }
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

/// Tokens re-joined with single spaces.
pub fn normalize(sentence: &str) -> String {
    tokenize(sentence).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_word: Vec<String>,
    word_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Words ordered by count (descending) then lexicographically; words seen
    /// fewer than `min_count` times are left out and encode as `[UNK]`.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for sentence in corpus {
            for tok in tokenize(sentence.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(words.into_iter().map(|(w, _)| w))
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let id_to_word: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self {
            id_to_word,
            word_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.word_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.id_to_word
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(SPECIAL_TOKENS[UNK as usize])
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_to_id.contains_key(word)
    }

    /// `[CLS] words.. [SEP]`, truncated to `max_len` while keeping the final `[SEP]`.
    pub fn encode(&self, sentence: &str, max_len: usize) -> Result<TokenSeq, TextError> {
        if max_len < 3 {
            return Err(TextError::MaxLenTooSmall(max_len));
        }
        let mut ids = vec![CLS];
        ids.extend(tokenize(sentence).iter().take(max_len - 2).map(|w| self.id(w)));
        ids.push(SEP);
        Ok(TokenSeq { ids })
    }

    /// Words between the brackets, joined by spaces; specials are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | CLS | SEP))
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Plain-text form: a header line naming the special ids, then one word per line in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::from("#specials");
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            let _ = write!(out, " {s}={i}");
        }
        out.push('\n');
        for w in &self.id_to_word[SPECIAL_TOKENS.len()..] {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TextError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| TextError::Format("missing header".into()))?;
        let expected = Self::from_words(std::iter::empty()).to_text();
        if header != expected.trim_end() {
            return Err(TextError::Format(format!("unexpected header `{header}`")));
        }
        let words: Vec<String> = lines.map(str::to_string).collect();
        let vocab = Self::from_words(words);
        if vocab.word_to_id.len() != vocab.id_to_word.len() {
            return Err(TextError::Format("duplicate word".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TextError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TextError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Word ids bracketed by `[CLS]` ... `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the bracketing invariants against `max_len`.
    pub fn is_valid(&self, max_len: usize) -> bool {
        let real: Vec<u32> = self.ids.iter().copied().take_while(|&id| id != PAD).collect();
        let sep_count = real.iter().filter(|&&id| id == SEP).count();
        real.first() == Some(&CLS)
            && self.ids[real.len()..].iter().all(|&id| id == PAD)
            && sep_count <= 1
            && (sep_count == 0 || real.last() == Some(&SEP))
            && self.ids.len() <= max_len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherForcingPair {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

pub fn teacher_forcing_pair(seq: &TokenSeq) -> Result<TeacherForcingPair, TextError> {
    let l = seq.ids.len();
    if l < 2 {
        return Err(TextError::TooShort(l));
    }
    Ok(TeacherForcingPair {
        input_ids: seq.ids[..l - 1].to_vec(),
        target_ids: seq.ids[1..].to_vec(),
    })
}

/// Right-padded id rows with a mask marking real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<Vec<u32>>,
    pub real: Vec<Vec<bool>>,
}

impl PaddedBatch {
    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

pub fn pad_batch(seqs: &[TokenSeq]) -> Result<PaddedBatch, TextError> {
    let width = seqs.iter().map(TokenSeq::len).max().ok_or(TextError::EmptyBatch)?;
    let mut ids = Vec::with_capacity(seqs.len());
    let mut real = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut row = s.ids.clone();
        row.resize(width, PAD);
        let mut mask = vec![true; s.len()];
        mask.resize(width, false);
        ids.push(row);
        real.push(mask);
    }
    Ok(PaddedBatch { ids, real })
}

/// Removes standalone one-word sentences that exactly name one of `class_names`
/// (e.g. the injected `table.` in `... object. table. it is ...`).
pub fn strip_gt_labels(sentence: &str, class_names: &[&str]) -> String {
    let mut kept: Vec<&str> = Vec::new();
    let mut start = 0;
    for (i, ch) in sentence.char_indices() {
        if matches!(ch, '.' | '!' | '?') {
            kept.push(&sentence[start..=i]);
            start = i + ch.len_utf8();
        }
    }
    kept.push(&sentence[start..]);
    let is_label = |piece: &str| {
        let body = piece.trim().trim_end_matches(['.', '!', '?']).trim();
        !body.is_empty()
            && !body.contains(char::is_whitespace)
            && class_names.iter().any(|c| c.eq_ignore_ascii_case(body))
    };
    if !kept.iter().any(|p| is_label(p)) {
        return sentence.to_string();
    }
    let mut out = String::with_capacity(sentence.len());
    for piece in kept.into_iter().filter(|p| !is_label(p)) {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(piece);
    }
    out
}
