//! Vocabulary construction and token-stream encoding for word- and character-level modeling.
//!
//! Word mode splits on whitespace runs. Character mode emits one token per Unicode scalar with
//! every whitespace character folded to a single space token, and flags the first character
//! of each whitespace-delimited word (the positions the skip connections link).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Unknown-token symbol in word mode.
pub const UNK_WORD: &str = "<unk>";
/// Unknown-character symbol in character mode (U+FFFD REPLACEMENT CHARACTER).
pub const UNK_CHAR: &str = "\u{FFFD}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenMode {
    Word,
    Character,
}

impl TokenMode {
    pub fn unk_symbol(self) -> &'static str {
        match self {
            TokenMode::Word => UNK_WORD,
            TokenMode::Character => UNK_CHAR,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TokenMode::Word => "word",
            TokenMode::Character => "char",
        }
    }
}

impl std::str::FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenMode::Word),
            "char" | "character" => Ok(TokenMode::Character),
            other => Err(Error::usage(format!("unknown token mode '{other}' (expected word|char)"))),
        }
    }
}

/// Token ↔ id bijection. Id 0 is always the unknown token with stored count 0; the remaining
/// entries are sorted by descending count, ties broken by byte-wise token order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    entries: Vec<(String, u64)>,
    index: HashMap<String, usize>,
    mode: TokenMode,
}

pub const UNK_ID: usize = 0;

impl Vocabulary {
    fn from_entries(entries: Vec<(String, u64)>, mode: TokenMode) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (id, (tok, _)) in entries.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            entries,
            index,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn unk_id(&self) -> usize {
        UNK_ID
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|(t, _)| t.as_str())
    }

    pub fn count(&self, id: usize) -> Option<u64> {
        self.entries.get(id).map(|&(_, c)| c)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id for `token`, falling back to the unknown id.
    pub fn lookup(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    /// Maps ids back to token strings; out-of-range ids render as the unknown symbol.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(self.mode.unk_symbol()))
            .collect()
    }

    /// Serializes as `token<TAB>count` lines, line index = id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (tok, count) in &self.entries {
            let _ = writeln!(out, "{tok}\t{count}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (tok, count) = line.rsplit_once('\t').ok_or_else(|| {
                Error::data(format!("vocabulary line {} has no TAB separator", lineno + 1))
            })?;
            let count: u64 = count.parse().map_err(|_| {
                Error::data(format!("vocabulary line {}: bad count {count:?}", lineno + 1))
            })?;
            entries.push((tok.to_string(), count));
        }
        let mode = match entries.first() {
            Some((t, _)) if t == UNK_WORD => TokenMode::Word,
            Some((t, _)) if t == UNK_CHAR => TokenMode::Character,
            Some((t, _)) => {
                return Err(Error::data(format!(
                    "first vocabulary entry must be the unknown token, found {t:?}"
                )))
            }
            None => return Err(Error::data("empty vocabulary file")),
        };
        Self::from_entries(entries, mode)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::data(format!("{}: invalid UTF-8 ({e})", path.display())))?;
        Self::from_tsv(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the TSV serialization; checkpoints record it to pin their vocabulary.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

fn decode_utf8(text: &[u8]) -> Result<&str> {
    std::str::from_utf8(text).map_err(|e| Error::data(format!("input is not valid UTF-8: {e}")))
}

/// Calls `f(token, is_word_start)` for every token of `text` in stream order.
fn for_each_token(text: &str, mode: TokenMode, mut f: impl FnMut(&str, bool)) {
    match mode {
        TokenMode::Word => text.split_whitespace().for_each(|tok| f(tok, true)),
        TokenMode::Character => {
            let mut prev_space = true;
            let mut buf = [0u8; 4];
            for ch in text.chars() {
                let ch = if ch.is_whitespace() { ' ' } else { ch };
                let is_space = ch == ' ';
                f(ch.encode_utf8(&mut buf), !is_space && prev_space);
                prev_space = is_space;
            }
        }
    }
}

/// Builds a vocabulary keeping tokens seen at least `min_count` times. Recorded counts are the
/// raw occurrence counts; literal occurrences of the unknown symbol are never given their own
/// entry.
pub fn build_vocab<T: AsRef<[u8]> + ?Sized>(
    text: &T,
    mode: TokenMode,
    min_count: u64,
) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::usage("min_count must be at least 1"));
    }
    let text = decode_utf8(text.as_ref())?;
    let unk = mode.unk_symbol();
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut total = 0u64;
    for_each_token(text, mode, |tok, _| {
        total += 1;
        if tok == unk {
            return;
        }
        match counts.get_mut(tok) {
            Some(c) => *c += 1,
            None => {
                counts.insert(tok.to_string(), 1);
            }
        }
    });
    if total == 0 {
        return Err(Error::data("text contains no tokens"));
    }
    let mut kept: Vec<(String, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut entries = Vec::with_capacity(kept.len() + 1);
    entries.push((unk.to_string(), 0));
    entries.extend(kept);
    Vocabulary::from_entries(entries, mode)
}

/// A token-id stream with per-position word-start flags.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCorpus {
    pub ids: Vec<usize>,
    pub word_start: Vec<bool>,
    pub vocab_size: usize,
}

impl EncodedCorpus {
    /// Word-mode style corpus: every position is a word start.
    pub fn from_ids(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        let word_start = vec![true; ids.len()];
        Self::new(ids, word_start, vocab_size)
    }

    pub fn new(ids: Vec<usize>, word_start: Vec<bool>, vocab_size: usize) -> Result<Self> {
        if ids.len() != word_start.len() {
            return Err(Error::data("ids and word_start lengths differ"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::data(format!("token id {bad} out of range for vocabulary of {vocab_size}")));
        }
        Ok(EncodedCorpus {
            ids,
            word_start,
            vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> EncodedCorpus {
        EncodedCorpus {
            ids: self.ids[range.clone()].to_vec(),
            word_start: self.word_start[range].to_vec(),
            vocab_size: self.vocab_size,
        }
    }

    /// Occurrence count per id.
    pub fn unigram_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.vocab_size];
        for &id in &self.ids {
            counts[id] += 1;
        }
        counts
    }
}

pub fn encode<T: AsRef<[u8]> + ?Sized>(text: &T, vocab: &Vocabulary) -> Result<EncodedCorpus> {
    let text = decode_utf8(text.as_ref())?;
    let mut ids = Vec::new();
    let mut word_start = Vec::new();
    for_each_token(text, vocab.mode(), |tok, ws| {
        ids.push(vocab.lookup(tok));
        word_start.push(ws);
    });
    Ok(EncodedCorpus {
        ids,
        word_start,
        vocab_size: vocab.len(),
    })
}

/// Splits a stream into contiguous train/valid/test parts. Train and valid lengths are
/// `floor(n · fraction)`; test receives the remainder.
pub fn split_corpus(
    corpus: &EncodedCorpus,
    fractions: (f64, f64, f64),
) -> Result<(EncodedCorpus, EncodedCorpus, EncodedCorpus)> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) {
        return Err(Error::usage("split fractions must be positive"));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::usage("split fractions must sum to 1"));
    }
    let n = corpus.len();
    // Guard against products such as 100 * 0.29 landing just under an integer.
    let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let n_train = floor(ft).min(n);
    let n_valid = floor(fv).min(n - n_train);
    let n_test = n - n_train - n_valid;
    for (name, len) in [("train", n_train), ("valid", n_valid), ("test", n_test)] {
        if len == 0 {
            return Err(Error::data(format!("{name} split of a {n}-token corpus is empty")));
        }
    }
    Ok((
        corpus.slice(0..n_train),
        corpus.slice(n_train..n_train + n_valid),
        corpus.slice(n_train + n_valid..n),
    ))
}

pub fn read_text(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(v: &Vocabulary) -> Vec<(&str, u64)> {
        v.entries().iter().map(|(t, c)| (t.as_str(), *c)).collect()
    }

    #[test]
    fn word_vocab_keeps_everything_at_min_count_one() {
        let v = build_vocab("a b a c", TokenMode::Word, 1).unwrap();
        assert_eq!(entries(&v), vec![("<unk>", 0), ("a", 2), ("b", 1), ("c", 1)]);
    }

    #[test]
    fn word_vocab_threshold_drops_rare_tokens() {
        let v = build_vocab("a b a c", TokenMode::Word, 2).unwrap();
        assert_eq!(entries(&v), vec![("<unk>", 0), ("a", 2)]);
        let enc = encode("a b a c", &v).unwrap();
        assert_eq!(enc.ids, vec![1, 0, 1, 0]);
    }

    #[test]
    fn ties_are_sorted_lexicographically() {
        let v = build_vocab("z y x y z x w", TokenMode::Word, 1).unwrap();
        assert_eq!(
            entries(&v),
            vec![("<unk>", 0), ("x", 2), ("y", 2), ("z", 2), ("w", 1)]
        );
    }

    #[test]
    fn empty_text_and_bad_utf8_are_data_errors() {
        assert!(matches!(build_vocab("  \n\t ", TokenMode::Word, 1), Err(Error::Data(_))));
        assert!(matches!(build_vocab(&[0xffu8, 0xfe][..], TokenMode::Word, 1), Err(Error::Data(_))));
        let v = build_vocab("a", TokenMode::Word, 1).unwrap();
        assert!(matches!(encode(&[b'a', 0xc0][..], &v), Err(Error::Data(_))));
        assert!(matches!(build_vocab("a", TokenMode::Word, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn encode_maps_known_and_unknown_words() {
        let v = build_vocab("a b", TokenMode::Word, 1).unwrap();
        let enc = encode("a b", &v).unwrap();
        assert_eq!(enc.ids, vec![1, 2]);
        assert_eq!(enc.word_start, vec![true, true]);
        assert_eq!(encode("a z", &v).unwrap().ids, vec![1, 0]);
    }

    #[test]
    fn literal_unk_tokens_map_to_reserved_id() {
        let v = build_vocab("a <unk> a", TokenMode::Word, 1).unwrap();
        assert_eq!(entries(&v), vec![("<unk>", 0), ("a", 2)]);
        assert_eq!(encode("<unk> a", &v).unwrap().ids, vec![0, 1]);
    }

    #[test]
    fn character_mode_flags_word_starts_and_folds_newlines() {
        let v = build_vocab("ab cd", TokenMode::Character, 1).unwrap();
        let enc = encode("ab cd", &v).unwrap();
        assert_eq!(enc.word_start, vec![true, false, false, true, false]);
        let enc = encode("ab\ncd", &v).unwrap();
        assert_eq!(enc.ids[2], v.id(" ").unwrap());
        assert_eq!(v.token(0), Some(UNK_CHAR));
    }

    #[test]
    fn split_follows_floor_rule() {
        let c = EncodedCorpus::from_ids(vec![0; 100], 1).unwrap();
        let (a, b, t) = split_corpus(&c, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!((a.len(), b.len(), t.len()), (80, 10, 10));
        let c = EncodedCorpus::from_ids((0..10).map(|i| i % 3).collect(), 3).unwrap();
        let (a, b, t) = split_corpus(&c, (0.5, 0.25, 0.25)).unwrap();
        assert_eq!((a.len(), b.len(), t.len()), (5, 2, 3));
        assert_eq!(a.ids, c.ids[..5]);
        assert_eq!(t.ids, c.ids[7..]);
    }

    #[test]
    fn split_rejects_empty_parts_and_bad_fractions() {
        let c = EncodedCorpus::from_ids(vec![0; 3], 1).unwrap();
        assert!(matches!(split_corpus(&c, (0.98, 0.01, 0.01)), Err(Error::Data(_))));
        assert!(matches!(split_corpus(&c, (0.5, 0.5, 0.5)), Err(Error::Usage(_))));
        assert!(matches!(split_corpus(&c, (1.0, 0.0, 0.0)), Err(Error::Usage(_))));
    }

    #[test]
    fn tsv_round_trip_preserves_mode_and_ids() {
        for mode in [TokenMode::Word, TokenMode::Character] {
            let v = build_vocab("the cat saw the dog\nthe end", mode, 1).unwrap();
            let back = Vocabulary::from_tsv(&v.to_tsv()).unwrap();
            assert_eq!(back, v);
            assert_eq!(back.content_hash(), v.content_hash());
        }
        assert!(matches!(Vocabulary::from_tsv("a\t3\n"), Err(Error::Data(_))));
        assert!(matches!(Vocabulary::from_tsv("<unk>\t0\na 3\n"), Err(Error::Data(_))));
    }
}
