//! Character vocabulary and the per-instance source layout.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<unk>", "<bos>", "<eos>"];

/// Character-level vocabulary. Ids 0..3 are `<unk>`, `<bos>`, `<eos>`; the
/// remaining ids are characters in code-point order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    chars: String,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        let chars: Vec<char> = r.chars.chars().collect();
        let v = Self::from_chars(chars.iter().copied());
        if v.chars != chars {
            return Err(Error::Checkpoint("vocabulary characters are not sorted and unique".into()));
        }
        Ok(v)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        Self {
            chars: v.chars.into_iter().collect(),
        }
    }
}

impl Vocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + SPECIALS.len()))
            .collect();
        Self { chars, index }
    }

    /// Every character of `texts`, plus the separator.
    pub fn build<S: AsRef<str>>(texts: impl IntoIterator<Item = S>, separator: char) -> Self {
        let mut set = BTreeSet::from([separator]);
        for t in texts {
            set.extend(t.as_ref().chars());
        }
        Self::from_chars(set)
    }

    pub fn len(&self) -> usize {
        self.chars.len() + SPECIALS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn id_or_unk(&self, c: char) -> usize {
        self.id(c).unwrap_or(UNK)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(SPECIALS.len()).and_then(|i| self.chars.get(i).copied())
    }

    pub fn token(&self, id: usize) -> String {
        match SPECIALS.get(id) {
            Some(s) => s.to_string(),
            None => self.char_of(id).map(String::from).unwrap_or_else(|| SPECIALS[UNK].into()),
        }
    }
}

/// Token ids and sentence structure of one model input.
///
/// Each sentence is followed by the separator token. Characters missing from
/// the vocabulary embed as `<unk>` but keep distinct extended ids
/// (`vocab.len() + k`) so they can still be copied.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceLayout {
    pub token_ids: Vec<usize>,
    pub ext_ids: Vec<usize>,
    pub oov: Vec<char>,
    pub period_indices: Vec<usize>,
    pub sentence_map: Vec<usize>,
    vocab_len: usize,
}

impl SourceLayout {
    pub fn new<S: AsRef<str>>(vocab: &Vocab, sentences: &[S], separator: char) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::InvalidArgument("input has no sentences".into()));
        }
        let sep = vocab
            .id(separator)
            .ok_or_else(|| Error::InvalidArgument(format!("separator {separator:?} not in vocabulary")))?;
        let mut layout = Self {
            token_ids: Vec::new(),
            ext_ids: Vec::new(),
            oov: Vec::new(),
            period_indices: Vec::new(),
            sentence_map: Vec::new(),
            vocab_len: vocab.len(),
        };
        for (i, s) in sentences.iter().enumerate() {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::InvalidArgument(format!("sentence {i} is empty")));
            }
            for c in s.chars() {
                if c == separator {
                    return Err(Error::InvalidArgument(format!(
                        "sentence {i} contains the separator {separator:?}"
                    )));
                }
                let (tok, ext) = match vocab.id(c) {
                    Some(id) => (id, id),
                    None => (UNK, layout.oov_id(c)),
                };
                layout.token_ids.push(tok);
                layout.ext_ids.push(ext);
                layout.sentence_map.push(i);
            }
            layout.period_indices.push(layout.token_ids.len());
            layout.token_ids.push(sep);
            layout.ext_ids.push(sep);
            layout.sentence_map.push(i);
        }
        Ok(layout)
    }

    fn oov_id(&mut self, c: char) -> usize {
        let k = match self.oov.iter().position(|&o| o == c) {
            Some(k) => k,
            None => {
                self.oov.push(c);
                self.oov.len() - 1
            }
        };
        self.vocab_len + k
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_sentences(&self) -> usize {
        self.period_indices.len()
    }

    /// Vocabulary size plus this input's copyable out-of-vocabulary chars.
    pub fn extended_size(&self) -> usize {
        self.vocab_len + self.oov.len()
    }

    /// Extended ids of a target string, terminated by `<eos>`.
    pub fn target_ids(&self, vocab: &Vocab, target: &str) -> Vec<usize> {
        target
            .chars()
            .map(|c| match vocab.id(c) {
                Some(id) => id,
                None => self
                    .oov
                    .iter()
                    .position(|&o| o == c)
                    .map_or(UNK, |k| self.vocab_len + k),
            })
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Id to feed back into the decoder for a (possibly extended) token.
    pub fn input_id(&self, ext_id: usize) -> usize {
        if ext_id >= self.vocab_len {
            UNK
        } else {
            ext_id
        }
    }

    /// Text of a decoded id sequence; `<eos>` and `<bos>` are dropped.
    pub fn decode(&self, vocab: &Vocab, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                BOS | EOS => {}
                id if id >= self.vocab_len => {
                    if let Some(&c) = self.oov.get(id - self.vocab_len) {
                        out.push(c);
                    }
                }
                id => out.push_str(&vocab.token(id)),
            }
        }
        out
    }
}
