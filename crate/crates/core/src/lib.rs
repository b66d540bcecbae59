//! Knowledge-graph enriched visual storytelling in three stages: distill a
//! term set per image, bridge adjacent images with knowledge-graph relations
//! chosen by language-model perplexity, and generate a story from the term
//! path.

pub mod beam;
pub mod config;
pub mod corpus;
pub mod distiller;
pub mod enrich;
pub mod features;
pub mod fixtures;
pub mod generator;
pub mod kg;
pub mod lm;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod vocab;
