pub mod al;
pub mod annotator;
pub mod classifier;
pub mod corpus;
pub mod ledger;
pub mod query;
pub mod router;
pub mod seed;
pub mod synth;
