use std::collections::HashMap;

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const RESERVED: [&str; 3] = ["<s>", "</s>", "<unk>"];

/// Token/id bijection. Ids 0..3 are BOS, EOS and UNK; the remaining tokens are
/// stored in lexicographic order, so comparing ids compares tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn build<I, T>(tokens: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut words: Vec<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_owned())
            .filter(|t| !RESERVED.contains(&t.as_str()))
            .collect();
        words.sort();
        words.dedup();
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        Self::from_tokens(all).expect("constructed vocabulary is valid")
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::MalformedCheckpoint("vocabulary must start with <s> </s> <unk>".into()));
        }
        if tokens[RESERVED.len()..].windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::MalformedCheckpoint("vocabulary tokens must be sorted and unique".into()));
        }
        if tokens[RESERVED.len()..].iter().any(|t| RESERVED.contains(&t.as_str())) {
            return Err(Error::MalformedCheckpoint("reserved token repeated".into()));
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> TokenSeq {
        TokenSeq::from_normalized(ids.iter().map(|&i| self.tokens[i as usize].clone()).collect())
    }
}
