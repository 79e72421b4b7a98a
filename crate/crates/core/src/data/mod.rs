//! Dataset handling: tokenization, vocabularies, JSON-lines splits,
//! pretrained embedding files and a synthetic bAbI-style task generator.

mod babi;
mod embeddings;
mod text;

pub use babi::{generate_babi_like, SplitSizes, Splits, ACTORS, OBJECTS, PLACES};
pub use embeddings::{load_embeddings, EmbeddingTable};
pub use text::{tokenize_and_preprocess, Vocabulary, NUMBER_TOKEN, PAD_TOKEN, UNK_TOKEN};

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::EncodedInstance;

/// Longest sequence kept; longer ones lose their tail.
pub const MAX_SEQ_LEN: usize = 512;

/// Whether instances carry one sequence or a passage/query pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Single,
    Pair,
}

impl std::str::FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "pair" => Ok(Self::Pair),
            _ => Err(Error::Config(format!("unknown dataset mode '{s}' (expected single or pair)"))),
        }
    }
}

/// One labelled example in token form. `query` is present in pair mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub query: Option<Vec<String>>,
    pub label: usize,
}

impl Instance {
    pub fn mode(&self) -> DatasetMode {
        if self.query.is_some() {
            DatasetMode::Pair
        } else {
            DatasetMode::Single
        }
    }

    /// The instance as one JSON object in the dataset line format.
    pub fn to_json(&self) -> Value {
        match &self.query {
            None => json!({ "tokens": self.tokens, "label": self.label }),
            Some(q) => json!({ "p_tokens": self.tokens, "q_tokens": q, "label": self.label }),
        }
    }

    pub fn encode(&self, vocab: &Vocabulary) -> EncodedInstance {
        EncodedInstance {
            tokens: vocab.encode(&self.tokens),
            query: self.query.as_ref().map(|q| vocab.encode(q)),
            label: self.label,
        }
    }
}

/// Vocabulary over passages and queries of `train`.
pub fn build_vocab(train: &[Instance], min_count: usize) -> Result<Vocabulary> {
    let seqs = train
        .iter()
        .flat_map(|i| std::iter::once(i.tokens.as_slice()).chain(i.query.as_deref()));
    Vocabulary::build(seqs, min_count)
}

pub fn encode_split(split: &[Instance], vocab: &Vocabulary) -> Vec<EncodedInstance> {
    split.iter().map(|i| i.encode(vocab)).collect()
}

/// Reads a JSON-lines split. Blank lines are skipped; sequences longer than
/// [`MAX_SEQ_LEN`] are truncated with a warning.
pub fn load_dataset(path: impl AsRef<Path>, mode: DatasetMode, label_count: usize) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse {
            path: shown.clone(),
            line: n + 1,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| fail(format!("invalid JSON: {e}")))?;
        let field = |name: &str| -> Result<Vec<String>> {
            let arr = value
                .get(name)
                .ok_or_else(|| fail(format!("missing field '{name}'")))?
                .as_array()
                .ok_or_else(|| fail(format!("field '{name}' must be an array of strings")))?;
            let mut toks = arr
                .iter()
                .map(|t| t.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| fail(format!("field '{name}' must be an array of strings")))?;
            if toks.is_empty() {
                return Err(fail(format!("field '{name}' is empty")));
            }
            if toks.len() > MAX_SEQ_LEN {
                log::warn!("{shown}:{}: '{name}' has {} tokens, truncated to {MAX_SEQ_LEN}", n + 1, toks.len());
                toks.truncate(MAX_SEQ_LEN);
            }
            Ok(toks)
        };
        let (tokens, query) = match mode {
            DatasetMode::Single => (field("tokens")?, None),
            DatasetMode::Pair => (field("p_tokens")?, Some(field("q_tokens")?)),
        };
        let label = value
            .get("label")
            .ok_or_else(|| fail("missing field 'label'".into()))?
            .as_u64()
            .ok_or_else(|| fail("field 'label' must be a nonnegative integer".into()))? as usize;
        if label >= label_count {
            return Err(fail(format!("label {label} out of range for {label_count} classes")));
        }
        out.push(Instance { tokens, query, label });
    }
    Ok(out)
}

/// Writes a split in the JSON-lines format read by [`load_dataset`].
pub fn write_dataset(path: impl AsRef<Path>, split: &[Instance]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for inst in split {
        serde_json::to_writer(&mut w, &inst.to_json())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
