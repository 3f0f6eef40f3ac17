//! Fixtures shared by the benchmarks.

use mta_lab::config::RunConfig;
use mta_lab::data::Example;
use mta_lab::transformer::Model;

/// Default-sized model (promoted to stage 2) and a slice of its training data.
pub fn fixture(n_per_task: usize) -> (Model, Vec<Example>) {
    let mut cfg = RunConfig::default();
    cfg.data.n_train_per_task = n_per_task;
    cfg.data.n_test_per_task = 1;
    let data = cfg.datasets().expect("generated data");
    let mut model = Model::build(cfg.model.clone(), cfg.init_seed()).expect("model");
    model.promote_to_stage2(7).expect("promotion");
    (model, data.train)
}
