//! Building blocks for a small bidirectional chest-film / report model:
//! a reverse-mode tensor engine, a procedural pseudo-radiograph corpus, a
//! vector-quantised image tokenizer with an edge- and feature-aware
//! reconstruction loss, a unified-vocabulary autoregressive transformer,
//! and the text, image and classification metrics used to score it.

pub mod corpus;
pub mod eval;
pub mod lm;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod tokenizer;
