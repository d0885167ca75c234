//! On-disk data: photo-feature files, vocabulary files, story corpora, and
//! the synthetic benchmark generator.

pub mod corpus;
pub mod features;
pub mod synth;
pub mod vocab;
