//! Tokenization, vocabularies, SQuAD ingestion and batching.

pub mod batch;
pub mod document;
pub mod squad;
pub mod tokenize;
pub mod vocab;

pub use batch::{batch_iterate, pad_sequences, PaddedBatch};
pub use document::{AnswerSpan, Document};
pub use squad::{load_squad, AlignmentRecord, AlignmentReport, AlignmentStatus, QaPair, SquadExample, SquadFile};
pub use tokenize::{tokenize, Token};
pub use vocab::{CharVocabulary, Vocabulary, EOS, PAD, SOS, UNK};
