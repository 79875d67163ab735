//! Shared fixtures for the benchmarks.

use attd_core::evalviz::fit_to_dataset;
use attd_core::{Dataset, GenConfig, ModelConfig, ModelParams};

/// A default-sized model and a small dataset on the default 8×8 grid.
pub fn default_fixture(n_train: usize) -> (Dataset, ModelParams) {
    let data = Dataset::generate(n_train, 8, &GenConfig::default(), 1).expect("dataset");
    let cfg = fit_to_dataset(&ModelConfig::default(), &data);
    let params = ModelParams::init(&cfg, 1).expect("params");
    (data, params)
}
