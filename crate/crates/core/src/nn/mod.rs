//! Layers shared by the extractors and the question generator.

pub mod answer;
pub mod embed;
pub mod linear;
pub mod lstm;

pub use answer::answer_condition_encode;
pub use embed::{embedding_table, read_embedding_file, CharEncoder, TokenIds, WordRep};
pub use linear::{Linear, Mlp};
pub use lstm::{BiLstm, Encoded, LstmCell, RecurrentDropout};
