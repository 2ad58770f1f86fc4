use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::{tokenize, RawInstance};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const UNK: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";
pub const UNK_TOKEN: &str = "<unk>";
pub const QUESTION_MARK: &str = "?";

const RESERVED: [&str; 3] = [PAD_TOKEN, START_TOKEN, UNK_TOKEN];

/// Bidirectional token/id table. Ids 0..3 are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from an id-ordered token list whose first three entries are the
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Config(format!("vocabulary must start with {RESERVED:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn question_mark(&self) -> Option<usize> {
        self.get(QUESTION_MARK)
    }

    /// Non-pad ids back to tokens.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if let Some(line) = tokens.iter().position(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(Error::parse(
                path,
                line + 1,
                "vocabulary tokens must be non-empty and contain no whitespace",
            ));
        }
        Self::from_tokens(tokens).map_err(|e| Error::parse(path, 1, e.to_string()))
    }
}

/// Normalized answer string used for frequency counting.
fn answer_key(answer: &str) -> String {
    tokenize(answer).join(" ")
}

/// Keeps the instances whose whole answer is among the `answer_top` most
/// frequent answers, then builds the vocabulary over their questions and
/// answers ordered by descending frequency, ties lexicographic.
pub fn build_vocabulary(dataset: &[RawInstance], answer_top: usize) -> Result<(Vocabulary, Vec<RawInstance>)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if answer_top == 0 {
        return Err(Error::Config("answer_top must be at least 1".into()));
    }

    let mut answer_counts: BTreeMap<String, usize> = BTreeMap::new();
    for inst in dataset {
        *answer_counts.entry(answer_key(&inst.answer)).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = answer_counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(answer_top);
    let kept_answers: HashMap<String, ()> = ranked.into_iter().map(|(a, _)| (a, ())).collect();

    let kept: Vec<RawInstance> = dataset
        .iter()
        .filter(|inst| kept_answers.contains_key(&answer_key(&inst.answer)))
        .cloned()
        .collect();

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for inst in &kept {
        for tok in tokenize(&inst.question).into_iter().chain(tokenize(&inst.answer)) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    counts.entry(QUESTION_MARK.to_string()).or_default();
    for r in RESERVED {
        counts.remove(r);
    }
    let mut ordered: Vec<(String, usize)> = counts.into_iter().collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ordered.into_iter().map(|(t, _)| t))
        .collect();
    Ok((Vocabulary::from_tokens(tokens)?, kept))
}
