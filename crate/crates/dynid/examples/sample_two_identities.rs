//! Two-identity layout-controlled generation: anchor a small model, then
//! sample with face boxes and compare the gated run against the ungated
//! baseline with the analytic identity probe.
//!
//! ```text
//! cargo run --example sample_two_identities
//! ```

use dynid::eval::two_id_benchmark;
use dynid::model::Model;
use dynid::train::{train_anchor, OptState};
use dynid::world::{make_dataset, FrozenWorldMaps};
use dynid::RunConfig;

fn demo_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 31;
    cfg.workers = 2;
    cfg.world.grid_h = 8;
    cfg.world.grid_w = 8;
    cfg.dataset.n_ids = 32;
    cfg.dataset.n_motions = 6;
    cfg.anchor.steps = 400;
    cfg.anchor.batch = 8;
    cfg.anchor.lr = 2e-4;
    cfg.eval.seeds = 24;
    cfg
}

fn main() {
    let cfg = demo_config();
    let model = Model::from_config(&cfg).expect("config is valid");
    let maps = FrozenWorldMaps::new(&cfg.world).expect("world maps");
    let dataset = make_dataset(
        cfg.dataset.n_ids,
        cfg.dataset.n_motions,
        cfg.dataset.train_fraction,
        cfg.seed,
        &maps,
    )
    .expect("dataset");

    let mut params = model.init_params::<f32>(cfg.seed);
    let mut opt = OptState::new();
    println!("anchoring ({} steps)...", cfg.anchor.steps);
    train_anchor(&model, &mut params, &mut opt, &dataset, &cfg, 0).expect("anchor");

    // Side-by-side face boxes with a gutter.
    let boxes = dynid::eval::default_two_boxes(&cfg.world);
    println!(
        "benchmarking {} seeds with boxes {:?} (alpha {}, beta {})",
        cfg.eval.seeds, boxes, cfg.sampling.alpha, cfg.sampling.beta
    );
    let gated = two_id_benchmark(
        &model,
        &params,
        &dataset,
        &maps,
        &cfg,
        &boxes,
        cfg.eval.seeds,
        true,
    )
    .expect("gated benchmark");
    let ungated = two_id_benchmark(
        &model,
        &params,
        &dataset,
        &maps,
        &cfg,
        &boxes,
        cfg.eval.seeds,
        false,
    )
    .expect("ungated benchmark");
    println!(
        "gated:   region success {:.3}, blending rate {:.3}",
        gated.region_success_rate, gated.blending_rate
    );
    println!(
        "ungated: region success {:.3}, blending rate {:.3}",
        ungated.region_success_rate, ungated.blending_rate
    );
}
