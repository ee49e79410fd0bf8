//! Streaming multi-signal analysis: spectral cosine similarity gates which
//! pairs receive smoothed wavelet coherence, organised as a two-layer graph.
pub mod coherence;
pub mod graph;
pub mod ingest;
pub mod par;
pub mod spectral;
pub mod wavelet;
pub mod engine;
