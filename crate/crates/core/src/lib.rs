pub mod corpus;
pub mod graph;
pub mod louvain;
pub mod textsim;
pub mod detectors;
pub mod synth;
pub mod eval;
