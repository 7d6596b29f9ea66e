//! Fixtures shared by the criterion benches.

use ovxd_core::toybench::gen_benchmark;
use ovxd_core::{init_gaussian, Rng, RunConfig, Tensor, ToyBenchmark};

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    init_gaussian(shape, 1.0, &mut Rng::new(seed)).expect("valid shape")
}

/// Default configuration and its benchmark.
pub fn default_setup() -> (RunConfig, ToyBenchmark) {
    let cfg = RunConfig::default();
    let bench = gen_benchmark(&cfg.bench, cfg.seed).expect("default benchmark generates");
    (cfg, bench)
}
