//! Corpora, vocabularies, padded batches and synthetic Markov corpora.

mod batch;
mod corpus;
mod markov;
mod vocab;

pub use batch::{epoch_batches, OrderPolicy, SequenceBatch};
pub use corpus::{load_corpus, parse_corpus, write_corpus, Sentence};
pub use markov::{gen_markov_corpus, MarkovSpec};
pub use vocab::{Vocab, EOS, MSK, PAD, RESERVED, SOS, UNK};
