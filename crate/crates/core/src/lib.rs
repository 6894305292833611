//! Triangular bidword generation: a desk-scale text-generation stack for
//! sponsored-search keyword suggestion.
//!
//! The crate provides six directional transformer generators among
//! ads, queries, and bidwords, a two-phase trainer that lets the clean
//! ad/query direction indirectly supervise the noisy bidword directions
//! through a bridge marginal, constrained beam search, matching baselines,
//! and the usual generation-quality metrics. Everything is pure,
//! single-threaded, and deterministic for a fixed seed; file formats and
//! the pipeline driver live in the companion `trident` crate.
//!
//! The crate is `no_std` (with `alloc`) so the algorithmic core stays free
//! of platform dependencies.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod baselines;
pub mod corpus;
pub mod decoding;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tape;
pub mod training;
pub mod vocab;

pub(crate) mod num;

use core::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Corpus generation needs at least two topics for the relevance metric
    /// to be meaningful.
    TooFewTopics { n_topics: usize },
    /// A configuration field failed validation.
    InvalidConfig(&'static str),
    /// Requested validation/test sizes do not leave any training data.
    SplitTooLarge {
        dataset: &'static str,
        requested: usize,
        available: usize,
    },
    /// Vocabulary construction over an empty corpus.
    EmptyCorpus,
    /// Decoding an id that is not in the vocabulary.
    TokenIdOutOfRange { id: usize, vocab_size: usize },
    /// Matrix dimensions incompatible with the requested operation.
    ShapeMismatch(&'static str),
    /// An operation that requires a non-empty sequence got an empty one.
    EmptySequence(&'static str),
    /// Sequence does not fit in the model's positional table.
    SequenceTooLong { len: usize, max_len: usize },
    /// A loss over an empty batch is undefined.
    EmptyBatch(&'static str),
    /// Non-finite value where a finite one is required.
    NonFinite(&'static str),
    /// A metric that needs at least `needed` candidates got fewer.
    TooFewCandidates { needed: usize, got: usize },
    /// Not enough pooled tokens to form a single n-gram.
    NgramTooShort { n: usize, pooled_tokens: usize },
    /// Empty input where content is required (e.g. BLEU hypothesis).
    EmptyInput(&'static str),
    /// A match index cannot be built from zero entries.
    EmptyIndex,
    /// Pooling vectorizer modes need an embedding table.
    MissingEmbeddings,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::TooFewTopics { n_topics } => {
                write!(f, "need at least 2 topics, got {n_topics}")
            }
            Error::InvalidConfig(what) => write!(f, "invalid configuration: {what}"),
            Error::SplitTooLarge {
                dataset,
                requested,
                available,
            } => write!(
                f,
                "split sizes for {dataset} request {requested} pairs but only {available} exist"
            ),
            Error::EmptyCorpus => write!(f, "cannot build a vocabulary from an empty corpus"),
            Error::TokenIdOutOfRange { id, vocab_size } => {
                write!(f, "token id {id} out of range for vocabulary of size {vocab_size}")
            }
            Error::ShapeMismatch(ctx) => write!(f, "shape mismatch: {ctx}"),
            Error::EmptySequence(ctx) => write!(f, "empty sequence: {ctx}"),
            Error::SequenceTooLong { len, max_len } => {
                write!(f, "sequence of length {len} exceeds max_len {max_len}")
            }
            Error::EmptyBatch(ctx) => write!(f, "empty batch: {ctx}"),
            Error::NonFinite(ctx) => write!(f, "non-finite value: {ctx}"),
            Error::TooFewCandidates { needed, got } => {
                write!(f, "need at least {needed} candidates, got {got}")
            }
            Error::NgramTooShort { n, pooled_tokens } => {
                write!(f, "cannot form {n}-grams from {pooled_tokens} pooled tokens")
            }
            Error::EmptyInput(ctx) => write!(f, "empty input: {ctx}"),
            Error::EmptyIndex => write!(f, "match index needs at least one entry"),
            Error::MissingEmbeddings => {
                write!(f, "pooling vectorizer modes require an embedding table")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

/// Token ids index into a [`vocab::Vocab`].
pub type TokenId = usize;

/// Topic ids index into the synthetic corpus topic grammars.
pub type TopicId = usize;
