//! Byte-pair-encoding subword vocabulary shared by ASR and caption text.
//!
//! Words are split on whitespace after lowercasing. The first symbol of every
//! word carries a `▁` prefix so word boundaries survive a decode. Base symbols
//! are `c` and `▁c` for every character seen in training; merges are learned
//! greedily by pair frequency with a lexicographic tie-break.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const CLS: u32 = 4;
pub const UNK: u32 = 5;

const SPECIALS: [&str; 6] = ["<pad>", "<s>", "</s>", "<mask>", "<cls>", "<unk>"];
const WORD_START: char = '\u{2581}';
const HEADER: &str = "mmcap-bpe v1";

/// Which kind of text a sequence is; selects the style embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Style {
    Asr = 0,
    Cap = 1,
}

impl Style {
    pub fn id(self) -> usize {
        self as usize
    }
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < SPECIALS.len()
}

/// Lowercases and collapses whitespace to single spaces.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase().replace(WORD_START, ""))
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { format!("{WORD_START}{c}") } else { c.to_string() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate subword {t:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("reserved id {i} must be {s}")));
            }
        }
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Ok(Self {
            tokens,
            index,
            merges,
            ranks,
        })
    }

    /// Learns merges until `target_size` subwords exist or no pair occurs twice.
    pub fn train<I, S>(corpus: I, target_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            for word in normalize_text(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
                *counts.entry(word.to_string()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot train a vocabulary on an empty corpus".into()));
        }
        let chars: BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut base: Vec<String> = chars.iter().flat_map(|&c| [c.to_string(), format!("{WORD_START}{c}")]).collect();
        base.sort();
        tokens.extend(base);
        if target_size < tokens.len() {
            return Err(Error::Config(format!(
                "vocabulary size {target_size} is below the {} reserved and base symbols",
                tokens.len()
            )));
        }

        let mut words: Vec<(Vec<String>, u64)> = {
            let mut sorted: Vec<_> = counts.into_iter().collect();
            sorted.sort();
            sorted.into_iter().map(|(w, c)| (word_symbols(&w), c)).collect()
        };
        let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
        let mut merges = Vec::new();
        while tokens.len() < target_size {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .filter(|&(_, c)| c >= 2)
                .map(|((a, b), _)| (a.to_string(), b.to_string()));
            let Some((a, b)) = best else { break };
            let merged = format!("{a}{b}");
            for (syms, _) in &mut words {
                apply_merge(syms, &a, &b, &merged);
            }
            if known.insert(merged.clone()) {
                tokens.push(merged);
            }
            merges.push((a, b));
        }
        Self::from_parts(tokens, merges)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w[0].clone(), w[1].clone())))
                .min();
            let Some((_, a, b)) = best else { break };
            let merged = format!("{a}{b}");
            apply_merge(&mut syms, &a, &b, &merged);
        }
        out.extend(syms.iter().map(|s| self.id(s).unwrap_or(UNK)));
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in normalize_text(text).split(' ').filter(|w| !w.is_empty()) {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Concatenates subwords, dropping reserved tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Data(format!("token id {id} outside vocabulary of {}", self.len())))?;
            if !is_special(id) {
                text.push_str(tok);
            }
        }
        Ok(text.replace(WORD_START, " ").trim().to_string())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER} merges={} tokens={}", self.merges.len(), self.tokens.len());
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{t}");
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty vocabulary file".into()))?;
        let bad = |msg: String| Error::Data(format!("vocabulary file: {msg}"));
        let rest = header
            .strip_prefix(HEADER)
            .ok_or_else(|| bad(format!("unexpected header {header:?}")))?;
        let field = |key: &str| -> Result<usize> {
            rest.split_whitespace()
                .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| bad(format!("header lacks {key}")))?
                .parse()
                .map_err(|e| bad(format!("{key}: {e}")))
        };
        let (n_merges, n_tokens) = (field("merges")?, field("tokens")?);
        let mut merges = Vec::with_capacity(n_merges);
        for i in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad(format!("missing merge {i}")))?;
            let (a, b) = line.split_once(' ').ok_or_else(|| bad(format!("merge line {line:?}")))?;
            merges.push((a.to_string(), b.to_string()));
        }
        let mut tokens = Vec::with_capacity(n_tokens);
        for i in 0..n_tokens {
            let line = lines.next().ok_or_else(|| bad(format!("missing token {i}")))?;
            let (id, tok) = line.split_once('\t').ok_or_else(|| bad(format!("token line {line:?}")))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(bad(format!("ids must be dense and ordered, found {id} at {i}")));
            }
            tokens.push(tok.to_string());
        }
        if lines.next().is_some() {
            return Err(bad("trailing lines".into()));
        }
        Self::from_parts(tokens, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_file_string(&text)
    }
}

fn apply_merge(syms: &mut Vec<String>, a: &str, b: &str, merged: &str) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(std::mem::take(&mut syms[i]));
            i += 1;
        }
    }
    *syms = out;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_size(corpus: &[&str]) -> usize {
        let chars: BTreeSet<char> = corpus.iter().flat_map(|l| l.chars()).filter(|c| !c.is_whitespace()).collect();
        SPECIALS.len() + 2 * chars.len()
    }

    #[test]
    fn first_merge_is_the_most_frequent_pair() {
        let corpus = ["aa aa ab"];
        let v = Vocabulary::train(corpus, base_size(&corpus) + 1).unwrap();
        assert_eq!(v.merges(), &[("\u{2581}a".to_string(), "a".to_string())]);
        assert_eq!(v.encode("aa"), vec![v.id("\u{2581}aa").unwrap()]);
    }

    #[test]
    fn base_budget_gives_character_vocabulary() {
        let corpus = ["aa aa ab"];
        let v = Vocabulary::train(corpus, base_size(&corpus)).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), base_size(&corpus));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the cat sat on the mat", "the bat ate the hat", "cats and bats"];
        assert_eq!(Vocabulary::train(corpus, 60).unwrap(), Vocabulary::train(corpus, 60).unwrap());
    }

    #[test]
    fn budget_below_base_is_rejected() {
        assert!(matches!(Vocabulary::train(["abc"], 3), Err(Error::Config(_))));
        assert!(matches!(Vocabulary::train(Vec::<String>::new(), 100), Err(Error::Data(_))));
    }

    #[test]
    fn encode_decode_edges() {
        let v = Vocabulary::train(["add the eggs", "mix the batter"], 40).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
        let ids = v.encode("add eggs");
        let mut wrapped = vec![BOS];
        wrapped.extend(&ids);
        wrapped.push(EOS);
        assert_eq!(v.decode(&wrapped).unwrap(), v.decode(&ids).unwrap());
        assert!(v.encode("add zebra").contains(&UNK));
        assert!(matches!(v.decode(&[9999]), Err(Error::Data(_))));
    }

    #[test]
    fn file_round_trip_is_exact() {
        let v = Vocabulary::train(["so now we chop the onion", "chop onion", "slice the bread"], 50).unwrap();
        let text = v.to_file_string();
        let back = Vocabulary::from_file_string(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_file_string(), text);
    }

    #[test]
    fn style_ids() {
        assert_eq!(Style::Asr.id(), 0);
        assert_eq!(Style::Cap.id(), 1);
    }
}
