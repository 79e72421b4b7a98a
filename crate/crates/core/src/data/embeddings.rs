use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::Vocabulary;
use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::model::PAD_ID;

/// Pretrained vectors for the tokens of one vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Overwrites the rows of `embedding` whose token has a vector; other
    /// rows keep their values. Returns how many rows were replaced.
    pub fn apply(&self, vocab: &Vocabulary, embedding: &mut Tensor) -> Result<usize> {
        if embedding.shape() != [vocab.len(), self.dim] {
            return Err(shape_err(
                "pretrained embeddings",
                format!("table {:?} for {} tokens of width {}", embedding.shape(), vocab.len(), self.dim),
            ));
        }
        let mut found = 0;
        for (id, tok) in vocab.tokens().iter().enumerate() {
            if id == PAD_ID {
                continue;
            }
            if let Some(v) = self.vectors.get(tok) {
                embedding.row_slice_mut(id).copy_from_slice(v);
                found += 1;
            }
        }
        Ok(found)
    }
}

/// Reads a text embedding file (`token v1 … vd` per line), keeping the
/// vectors of tokens in `vocab`. The width is fixed by the first line.
pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut dim = None;
    let mut vectors = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let fail = |message: String| Error::Parse {
            path: shown.clone(),
            line: n + 1,
            message,
        };
        let values = parts
            .map(|p| p.parse::<f64>().map_err(|_| fail(format!("'{p}' is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite value".into()));
        }
        let d = *dim.get_or_insert(values.len());
        if d == 0 {
            return Err(fail("no vector values".into()));
        }
        if values.len() != d {
            return Err(fail(format!("expected {d} values, found {}", values.len())));
        }
        if vocab.contains(token) {
            vectors.insert(token.to_string(), values);
        }
    }
    let dim = dim.ok_or(Error::Empty("embedding file"))?;
    Ok(EmbeddingTable { dim, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        let toks: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        Vocabulary::build([toks.as_slice()], 1).unwrap()
    }

    fn file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_vectors_and_keeps_fallback_rows() {
        let v = vocab(&["hello", "world"]);
        let f = file("hello 0.1 0.2\nother 1 2\n");
        let t = load_embeddings(f.path(), &v).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.get("hello"), Some(&[0.1, 0.2][..]));
        assert_eq!(t.len(), 1);

        let mut table = Tensor::filled(4, 2, 0.5);
        table.row_slice_mut(PAD_ID).fill(0.0);
        assert_eq!(t.apply(&v, &mut table).unwrap(), 1);
        assert_eq!(table.row_slice(2), &[0.1, 0.2]);
        assert_eq!(table.row_slice(3), &[0.5, 0.5]);
        assert!(t.apply(&v, &mut Tensor::zeros(4, 3)).is_err());
    }

    #[test]
    fn inconsistent_width_is_reported_with_line() {
        let v = vocab(&["a"]);
        let f = file("a 0.1 0.2\nb 1 2 3\n");
        assert!(matches!(load_embeddings(f.path(), &v), Err(Error::Parse { line: 2, .. })));
        let f = file("a 0.1 x\n");
        assert!(matches!(load_embeddings(f.path(), &v), Err(Error::Parse { line: 1, .. })));
        let f = file("");
        assert!(load_embeddings(f.path(), &v).is_err());
    }
}
