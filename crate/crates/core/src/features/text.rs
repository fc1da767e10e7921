//! Text units: byte-pair-encoded subwords for recognition targets and
//! lexicon-driven phonemes for synthesis inputs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Phoneme,
    Bpe,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub vocab_kind: VocabKind,
    pub vocab_size: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.ids.iter().all(|&i| i < self.vocab_size)
    }
}

/// Frames per token; every entry is at least one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationSequence {
    pub lengths: Vec<usize>,
}

impl DurationSequence {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if let Some(i) = lengths.iter().position(|&d| d == 0) {
            return Err(Error::InvalidDuration(format!("token {i} has zero frames")));
        }
        Ok(Self { lengths })
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

/// Lowercase and collapse runs of whitespace to single spaces.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Byte-pair encoder with rank-ordered merges.
///
/// Ids `0` and `1` are reserved for end-of-sequence and unknown; the space
/// character and the base alphabet follow, then one id per merge result.
#[derive(Debug, Clone, PartialEq)]
pub struct Bpe {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

pub const EOS_ID: usize = 0;
pub const UNK_ID: usize = 1;
const EOS: &str = "<eos>";
const UNK: &str = "<unk>";

impl Bpe {
    pub fn new(alphabet: &[char], merges: Vec<(String, String)>) -> Self {
        let mut vocab = vec![EOS.to_string(), UNK.to_string(), " ".to_string()];
        let mut chars: Vec<char> = alphabet.iter().copied().filter(|c| *c != ' ').collect();
        chars.sort_unstable();
        chars.dedup();
        vocab.extend(chars.iter().map(|c| c.to_string()));
        let mut index: HashMap<String, usize> =
            vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let mut ranks = HashMap::new();
        for (rank, (a, b)) in merges.iter().enumerate() {
            ranks.entry((a.clone(), b.clone())).or_insert(rank);
            let joined = format!("{a}{b}");
            if !index.contains_key(&joined) {
                index.insert(joined.clone(), vocab.len());
                vocab.push(joined);
            }
        }
        Self {
            merges,
            ranks,
            vocab,
            index,
        }
    }

    /// Learns up to `n_merges` merges from word frequencies, never across spaces.
    pub fn learn<'a>(texts: impl IntoIterator<Item = &'a str>, n_merges: usize) -> Self {
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut alphabet = Vec::new();
        for text in texts {
            for word in normalize_text(text).split(' ').filter(|w| !w.is_empty()) {
                *word_counts.entry(word.to_string()).or_default() += 1;
                alphabet.extend(word.chars());
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.chars().map(|ch| ch.to_string()).collect(), c))
            .collect();
        let mut merges = Vec::new();
        while merges.len() < n_merges {
            let mut pair_counts: BTreeMap<(String, String), usize> = BTreeMap::new();
            for (symbols, count) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_default() += count;
                }
            }
            // most frequent, ties broken by the lexicographically smallest pair
            let Some(best) = pair_counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(p, _)| p.clone())
            else {
                break;
            };
            for (symbols, _) in &mut words {
                *symbols = merge_pair(symbols, &best);
            }
            merges.push(best);
        }
        Self::new(&alphabet, merges)
    }

    pub fn from_merges_file(path: impl AsRef<Path>, alphabet: &[char]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut merges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => merges.push((a.to_string(), b.to_string())),
                _ => {
                    return Err(Error::Config(format!(
                        "{}:{}: expected one merge pair",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        Ok(Self::new(alphabet, merges))
    }

    pub fn merges_file_contents(&self) -> String {
        self.merges
            .iter()
            .map(|(a, b)| format!("{a} {b}\n"))
            .collect()
    }

    pub fn alphabet(&self) -> Vec<char> {
        self.vocab[3..]
            .iter()
            .filter(|s| s.chars().count() == 1)
            .filter_map(|s| s.chars().next())
            .collect()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    /// Greedy rank-ordered merge application; returns the token strings.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut symbols: Vec<String> = text.chars().map(|c| c.to_string()).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            symbols = merge_pair(&symbols, &self.merges[rank]);
        }
        symbols
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let ids = self
            .tokenize(text)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK_ID))
            .collect();
        TokenSequence {
            ids,
            vocab_kind: VocabKind::Bpe,
            vocab_size: self.vocab_size(),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != EOS_ID)
            .map(|&i| match i {
                UNK_ID => "?",
                _ => self.vocab.get(i).map(String::as_str).unwrap_or("?"),
            })
            .collect()
    }
}

fn merge_pair(symbols: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// `apply_bpe`: tokenize with a rank-ordered merge list.
pub fn apply_bpe(text: &str, bpe: &Bpe) -> TokenSequence {
    bpe.encode(text)
}

pub const WORD_BOUNDARY: &str = "|";

/// Phoneme symbol table; id 0 is the word boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    pub symbols: Vec<String>,
}

impl PhonemeInventory {
    pub fn new(phonemes: &[&str]) -> Self {
        let mut symbols = vec![WORD_BOUNDARY.to_string()];
        symbols.extend(phonemes.iter().map(|p| p.to_string()));
        Self { symbols }
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub entries: BTreeMap<String, Vec<String>>,
    /// Letter-to-phone table for words missing from `entries`.
    pub letter_fallback: Option<BTreeMap<char, String>>,
    pub inventory: PhonemeInventory,
}

impl Lexicon {
    pub fn pronounce(&self, word: &str) -> Result<Vec<String>> {
        if let Some(p) = self.entries.get(word) {
            return Ok(p.clone());
        }
        let table = self
            .letter_fallback
            .as_ref()
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))?;
        word.chars()
            .map(|c| {
                table
                    .get(&c)
                    .cloned()
                    .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
            })
            .collect()
    }
}

/// Concatenated phoneme ids with a boundary token between words.
pub fn encode_phonemes(text: &str, lexicon: &Lexicon) -> Result<TokenSequence> {
    let mut ids = Vec::new();
    for (i, word) in normalize_text(text).split(' ').filter(|w| !w.is_empty()).enumerate() {
        if i > 0 {
            ids.push(0);
        }
        for p in lexicon.pronounce(word)? {
            let id = lexicon
                .inventory
                .id(&p)
                .ok_or_else(|| Error::OutOfVocabulary(format!("phoneme {p} in `{word}`")))?;
            ids.push(id);
        }
    }
    Ok(TokenSequence {
        ids,
        vocab_kind: VocabKind::Phoneme,
        vocab_size: lexicon.inventory.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    #[test]
    fn no_merges_gives_characters() {
        let bpe = Bpe::new(&['a', 'b', 'c'], vec![]);
        assert_eq!(bpe.tokenize("ab c"), vec!["a", "b", " ", "c"]);
    }

    #[test]
    fn merges_apply_in_rank_order() {
        let bpe = Bpe::new(&['a', 'b'], vec![pair("a", "a"), pair("aa", "a")]);
        assert_eq!(bpe.tokenize("aaab"), vec!["aaa", "b"]);
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let bpe = Bpe::new(&['a'], vec![]);
        assert_eq!(bpe.encode("az").ids, vec![3, UNK_ID]);
    }

    #[test]
    fn learned_bpe_round_trips() {
        let corpus = ["red cat", "blue dog", "red dog sun", "cat sun moon"];
        let bpe = Bpe::learn(corpus, 50);
        for s in corpus {
            let seq = bpe.encode(s);
            assert!(seq.is_valid());
            assert_eq!(bpe.decode(&seq.ids), s);
        }
        // every word became one token
        assert_eq!(bpe.tokenize("red dog sun").len(), 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merges.txt");
        std::fs::write(&path, bpe.merges_file_contents()).unwrap();
        let reloaded = Bpe::from_merges_file(&path, &bpe.alphabet()).unwrap();
        assert_eq!(reloaded, bpe);
    }

    fn lexicon() -> Lexicon {
        let inventory = PhonemeInventory::new(&["k", "ae", "t", "d", "ao", "g"]);
        let mut entries = BTreeMap::new();
        entries.insert("cat".into(), vec!["k".into(), "ae".into(), "t".into()]);
        entries.insert("dog".into(), vec!["d".into(), "ao".into(), "g".into()]);
        Lexicon {
            entries,
            letter_fallback: None,
            inventory,
        }
    }

    #[test]
    fn phoneme_encoding() {
        let lex = lexicon();
        assert!(encode_phonemes("", &lex).unwrap().is_empty());
        assert_eq!(encode_phonemes("cat", &lex).unwrap().ids, vec![1, 2, 3]);
        assert_eq!(
            encode_phonemes("cat dog", &lex).unwrap().ids,
            vec![1, 2, 3, 0, 4, 5, 6]
        );
        assert!(matches!(
            encode_phonemes("cow", &lex),
            Err(Error::OutOfVocabulary(_))
        ));
        let mut with_fallback = lex.clone();
        with_fallback.letter_fallback = Some(
            [('t', "t".to_string()), ('a', "ae".to_string())]
                .into_iter()
                .collect(),
        );
        assert_eq!(encode_phonemes("tat", &with_fallback).unwrap().ids, vec![3, 2, 3]);
    }

    #[test]
    fn durations_reject_zero() {
        assert!(DurationSequence::new(vec![1, 0]).is_err());
        assert_eq!(DurationSequence::new(vec![1, 2, 1]).unwrap().total(), 4);
    }
}
