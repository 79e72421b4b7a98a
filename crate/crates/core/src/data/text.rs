use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PAD_ID, UNK_ID};

/// Replacement for any token that contains a digit.
pub const NUMBER_TOKEN: &str = "qqq";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases, splits on whitespace, splits leading and trailing
/// punctuation off into one token per character, and maps tokens with a
/// digit to [`NUMBER_TOKEN`].
pub fn tokenize_and_preprocess(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let start = chars.iter().position(|c| c.is_alphanumeric()).unwrap_or(chars.len());
        let end = chars.iter().rposition(|c| c.is_alphanumeric()).map_or(start, |p| p + 1);
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            out.push(normalize(chars[start..end].iter().collect()));
        }
        out.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    out
}

fn normalize(token: String) -> String {
    if token.chars().any(|c| c.is_ascii_digit()) {
        NUMBER_TOKEN.to_string()
    } else {
        token
    }
}

/// Token ↔ id mapping. Id 0 is padding and id 1 the unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    min_count: usize,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let index = r.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens: r.tokens,
            index,
            min_count: r.min_count,
        }
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            min_count: v.min_count,
        }
    }
}

impl Vocabulary {
    /// Tokens seen at least `min_count` times get ids in order of first
    /// appearance, after the two reserved ids.
    pub fn build<'a, I, S>(sequences: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut order: Vec<&str> = Vec::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in sequences {
            for tok in seq {
                let tok = tok.as_ref();
                let c = counts.entry(tok).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        if order.is_empty() {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(
            order
                .into_iter()
                .filter(|t| counts[t] >= min_count && *t != PAD_TOKEN && *t != UNK_TOKEN)
                .map(str::to_string),
        );
        Ok(VocabRepr { tokens, min_count }.into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Id of `token`; unknown tokens (and a literal padding token) map to
    /// the unknown id.
    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&PAD_ID) | None => UNK_ID,
            Some(&id) => id,
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}
