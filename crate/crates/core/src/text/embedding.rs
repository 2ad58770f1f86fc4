use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;

use super::{tokenize, Vocabulary, PAD, UNK};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_EMBED_DIM: usize = 300;
const OOV_RANGE: f64 = 0.1;

/// Word vectors aligned with a vocabulary's ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: Vocabulary,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    /// Every token gets a uniform(-0.1, 0.1) vector from the seeded
    /// embedding stream, except `<pad>` which is zero.
    pub fn random(vocab: &Vocabulary, dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::STREAM_EMBEDDINGS);
        let rows = (0..vocab.len())
            .map(|id| {
                let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-OOV_RANGE..OOV_RANGE)).collect();
                if id == PAD {
                    vec![0.0; dim]
                } else {
                    row
                }
            })
            .collect();
        Self {
            dim,
            vocab: vocab.clone(),
            rows,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.rows[id]
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vocab.get(token).map(|id| self.row(id))
    }

    /// Vector of a possibly multi-word label: mean of word vectors, with
    /// unknown words (and empty labels) mapped to the `<unk>` vector.
    pub fn phrase(&self, label: &str) -> Vec<f64> {
        let words = tokenize(label);
        if words.is_empty() {
            return self.rows[UNK].clone();
        }
        let mut out = vec![0.0; self.dim];
        for w in &words {
            let v = self.get(w).unwrap_or(&self.rows[UNK]);
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        let n = words.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Reads a whitespace text embedding file (`token f1 ... f_d` per line).
/// Vocabulary tokens found in the file take its vectors; all others keep the
/// seeded random init, and `<pad>` stays zero.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::random(vocab, dim, seed);
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != dim + 1 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected token and {dim} values, found {} fields", fields.len()),
            ));
        }
        let Some(id) = vocab.get(fields[0]) else { continue };
        if id == PAD {
            continue;
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        table.rows[id] = values;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        let mut tokens = vec!["<pad>".to_string(), "<start>".into(), "<unk>".into()];
        tokens.extend(words.iter().map(|w| w.to_string()));
        Vocabulary::from_tokens(tokens).unwrap()
    }

    #[test]
    fn file_vectors_and_fallbacks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        fs::write(&path, "cat 1.0 2.0\nzebra 3 4\n").unwrap();
        let v = vocab(&["cat", "dog"]);
        let t = load_embeddings(&path, &v, 2, 5).unwrap();
        assert_eq!(t.get("cat").unwrap(), &[1.0, 2.0]);
        assert_eq!(t.get("<pad>").unwrap(), &[0.0, 0.0]);
        let dog = t.get("dog").unwrap();
        assert!(dog.iter().all(|x| x.abs() < 0.1));
        let again = load_embeddings(&path, &v, 2, 5).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        fs::write(&path, "cat 1.0 2.0\ndog 1.0\n").unwrap();
        match load_embeddings(&path, &vocab(&["cat"]), 2, 0) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn phrase_is_mean_of_words() {
        let t = EmbeddingTable::random(&vocab(&["fire", "hydrant"]), 4, 1);
        let p = t.phrase("fire hydrant");
        let (a, b) = (t.get("fire").unwrap(), t.get("hydrant").unwrap());
        for ((x, y), got) in a.iter().zip(b).zip(&p) {
            assert!((got - (x + y) / 2.0).abs() < 1e-15);
        }
        assert_eq!(t.phrase(""), t.row(UNK));
        assert_eq!(t.phrase("martian"), t.row(UNK));
    }
}
