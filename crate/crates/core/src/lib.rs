//! Classification of mechanical assembly parts into the eight top-tier
//! functional-basis classes.
//!
//! The pipeline reads function-labeled design records, builds prompt/label
//! training data, trains a classifier (a native softmax model or a hosted
//! fine-tuning service), searches hyperparameters, evaluates, and annotates
//! unlabeled CAD part names.

pub mod annotate;
pub mod backend;
pub mod corpus;
pub mod eval;
pub mod ingest;
pub mod search;
pub mod taxonomy;
