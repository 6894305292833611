//! Shared vocabulary over all three corpus sides.
//!
//! Tokenization is whitespace-level: the corpus already stores token lists.
//! An optional greedy pair-merge subword stage (off by default) can split
//! words into merged character units; at desk scale the plain word
//! vocabulary is what the pipeline uses.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::corpus::TriCorpus;
use crate::{Error, Result, TokenId};

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

/// Number of reserved special ids; real tokens start at this id.
pub const SPECIALS: usize = 4;

const SPECIAL_STRINGS: [&str; SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token/id bijection shared by all six directional models.
///
/// Non-special tokens get ids `SPECIALS..` ordered by (frequency desc,
/// token asc), which makes construction deterministic for a fixed corpus.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: BTreeMap<String, TokenId>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
}

impl Vocab {
    /// Builds a vocabulary from the training split of `corpus`, keeping
    /// tokens that occur at least `min_freq` times.
    pub fn build(corpus: &TriCorpus, min_freq: usize) -> Result<Vocab> {
        Vocab::build_with_merges(corpus, min_freq, 0)
    }

    /// Like [`Vocab::build`] but first learns `n_merges` greedy character
    /// pair merges and tokenizes words into the merged subword units.
    pub fn build_with_merges(corpus: &TriCorpus, min_freq: usize, n_merges: usize) -> Result<Vocab> {
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        for tokens in corpus.train_token_streams() {
            for tok in tokens {
                *word_freq.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let merges = if n_merges > 0 {
            learn_merges(&word_freq, n_merges)
        } else {
            Vec::new()
        };

        let mut unit_freq: BTreeMap<String, usize> = BTreeMap::new();
        for (word, freq) in &word_freq {
            for unit in split_units(word, &merges) {
                *unit_freq.entry(unit).or_insert(0) += freq;
            }
        }

        let mut entries: Vec<(String, usize)> = unit_freq
            .into_iter()
            .filter(|(_, f)| *f >= min_freq)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> =
            SPECIAL_STRINGS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = BTreeMap::new();
        for (tok, _) in entries {
            token_to_id.insert(tok.clone(), id_to_token.len());
            id_to_token.push(tok);
        }
        Ok(Vocab {
            token_to_id,
            id_to_token,
            merges,
        })
    }

    /// Reconstructs a vocabulary from its persisted token list (ids assigned
    /// in order starting at [`SPECIALS`]).
    pub fn from_tokens(tokens: Vec<String>, merges: Vec<(String, String)>) -> Vocab {
        let mut id_to_token: Vec<String> =
            SPECIAL_STRINGS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = BTreeMap::new();
        for tok in tokens {
            token_to_id.insert(tok.clone(), id_to_token.len());
            id_to_token.push(tok);
        }
        Vocab {
            token_to_id,
            id_to_token,
            merges,
        }
    }

    /// Total size including the four specials.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Non-special tokens in id order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.id_to_token[SPECIALS..].iter().map(|s| s.as_str())
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: TokenId) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::TokenIdOutOfRange {
                id,
                vocab_size: self.size(),
            })
    }

    /// Maps tokens to ids; out-of-vocabulary tokens become [`UNK`]. With
    /// subword merges enabled a word may expand to several ids.
    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(tokens.len());
        for tok in tokens {
            if self.merges.is_empty() {
                ids.push(self.token_to_id.get(tok).copied().unwrap_or(UNK));
            } else {
                for unit in split_units(tok, &self.merges) {
                    ids.push(self.token_to_id.get(&unit).copied().unwrap_or(UNK));
                }
            }
        }
        ids
    }

    /// Maps ids back to tokens, dropping PAD/BOS/EOS. Unknown ids are an
    /// error; the UNK id decodes to its literal placeholder.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.size() {
                return Err(Error::TokenIdOutOfRange {
                    id,
                    vocab_size: self.size(),
                });
            }
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            out.push(self.id_to_token[id].clone());
        }
        Ok(out)
    }
}

/// Greedy merge learning: repeatedly fuse the most frequent adjacent unit
/// pair (ties broken lexicographically) across the word-frequency table.
fn learn_merges(word_freq: &BTreeMap<String, usize>, n_merges: usize) -> Vec<(String, String)> {
    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .iter()
        .map(|(w, &f)| (w.chars().map(|c| c.to_string()).collect(), f))
        .collect();
    let mut merges = Vec::new();
    for _ in 0..n_merges {
        let mut pair_freq: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (units, f) in &words {
            for pair in units.windows(2) {
                *pair_freq
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += f;
            }
        }
        let Some(best) = pair_freq
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(pair, _)| pair)
        else {
            break;
        };
        for (units, _) in words.iter_mut() {
            apply_merge(units, &best);
        }
        merges.push(best);
    }
    merges
}

fn apply_merge(units: &mut Vec<String>, merge: &(String, String)) {
    let mut i = 0;
    while i + 1 < units.len() {
        if units[i] == merge.0 && units[i + 1] == merge.1 {
            let fused = units[i].clone() + &units[i + 1];
            units[i] = fused;
            units.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

fn split_units(word: &str, merges: &[(String, String)]) -> Vec<String> {
    if merges.is_empty() {
        return alloc::vec![word.to_string()];
    }
    let mut units: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    for merge in merges {
        apply_merge(&mut units, merge);
    }
    units
}

/// Tokens in the corpus that never made it into the vocabulary.
pub fn oov_tokens<'a>(vocab: &Vocab, tokens: &'a [String]) -> BTreeSet<&'a str> {
    tokens
        .iter()
        .filter(|t| vocab.id_of(t).is_none())
        .map(|t| t.as_str())
        .collect()
}
