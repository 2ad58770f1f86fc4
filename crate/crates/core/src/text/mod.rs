//! Tokenization, vocabularies, fixed-length sequence encoding, embedding
//! tables, and the synthetic desk-scale dataset generator.

mod dataset;
mod embedding;
pub mod synth;
mod vocab;

pub use dataset::{encode_sequence, load_dataset, write_dataset, DatasetInstance, RawInstance};
pub use embedding::{load_embeddings, EmbeddingTable, DEFAULT_EMBED_DIM};
pub use vocab::{build_vocabulary, Vocabulary, PAD, PAD_TOKEN, QUESTION_MARK, START, START_TOKEN, UNK, UNK_TOKEN};

/// Content-token length of encoded questions.
pub const QUESTION_LEN: usize = 19;
/// Content-token length of encoded answers.
pub const ANSWER_LEN: usize = 3;

const SPLIT_PUNCT: [char; 5] = ['?', ',', '.', '!', '\''];

/// Lowercases, splits on whitespace, and splits `? , . ! '` into their own
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars().flat_map(char::to_lowercase) {
            if SPLIT_PUNCT.contains(&ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}
