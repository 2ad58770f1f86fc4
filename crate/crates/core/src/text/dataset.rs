use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, Vocabulary, PAD, UNK};
use crate::error::{Error, Result};

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInstance {
    pub image_id: String,
    pub answer: String,
    pub question: String,
}

/// Answer and question encoded to fixed lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetInstance {
    pub image_id: String,
    pub answer_ids: Vec<usize>,
    pub question_ids: Vec<usize>,
    /// Real (non-pad) question tokens, `1..=question_ids.len()`.
    pub question_len: usize,
}

impl DatasetInstance {
    pub fn encode(raw: &RawInstance, vocab: &Vocabulary, question_len: usize, answer_len: usize) -> Result<Self> {
        let (question_ids, real) = encode_sequence(&tokenize(&raw.question), question_len, vocab);
        if real == 0 {
            return Err(Error::Config(format!(
                "instance for image {:?} has an empty question",
                raw.image_id
            )));
        }
        let (answer_ids, _) = encode_sequence(&tokenize(&raw.answer), answer_len, vocab);
        Ok(Self {
            image_id: raw.image_id.clone(),
            answer_ids,
            question_ids,
            question_len: real,
        })
    }

    /// The real question tokens.
    pub fn gold(&self) -> &[usize] {
        &self.question_ids[..self.question_len]
    }
}

/// Maps tokens to ids, trims to `target_len`, pads with `<pad>`. Returns the
/// ids and the number of real tokens.
pub fn encode_sequence(tokens: &[String], target_len: usize, vocab: &Vocabulary) -> (Vec<usize>, usize) {
    let mut ids: Vec<usize> = tokens.iter().take(target_len).map(|t| vocab.get(t).unwrap_or(UNK)).collect();
    let real = ids.len();
    ids.resize(target_len, PAD);
    (ids, real)
}

pub fn load_dataset(path: &Path) -> Result<Vec<RawInstance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: RawInstance = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, instances: &[RawInstance]) -> Result<()> {
    let mut buf = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut buf, inst).expect("serialize dataset line");
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}
