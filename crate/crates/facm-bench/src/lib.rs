//! Shared fixtures for the microbenchmarks: a small trained-shape network,
//! a training batch, and the loss specification, built deterministically.

use facm_core::config::{Paradigm, TrainConfig};
use facm_core::network::Network;
use facm_core::objectives::FacmSpec;
use facm_core::trainer::validation_batch;
use facm_core::flow::FlowSample;

/// A desk-size configuration kept small enough that one benchmark
/// iteration stays in the microsecond-to-millisecond range.
pub fn bench_config() -> TrainConfig {
    let mut cfg = TrainConfig::default_for(Paradigm::Scratch);
    cfg.hidden_width = 64;
    cfg.depth = 3;
    cfg.time_embed_dim = 32;
    cfg.batch_size = 64;
    cfg
}

pub fn bench_network(cfg: &TrainConfig) -> Network {
    Network::init(cfg.network_config())
}

pub fn bench_batch(cfg: &TrainConfig, n: usize) -> Vec<FlowSample> {
    validation_batch(cfg, n, 17)
}

pub fn bench_spec(cfg: &TrainConfig) -> FacmSpec {
    cfg.facm_spec()
}
