//! Small grid sweep over the layout-control hyperparameters: for each
//! (alpha, beta) cell, sample two-identity scenes and count the seeds where
//! every target region probes as a valid face.
//!
//! ```text
//! cargo run --example layout_sweep
//! ```

use dynid::eval::{sweep_alpha_beta, sweep_csv};
use dynid::model::Model;
use dynid::train::{train_anchor, OptState};
use dynid::world::{make_dataset, FrozenWorldMaps};
use dynid::RunConfig;

fn demo_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 47;
    cfg.workers = 2;
    cfg.world.grid_h = 8;
    cfg.world.grid_w = 8;
    cfg.dataset.n_ids = 32;
    cfg.dataset.n_motions = 6;
    cfg.anchor.steps = 400;
    cfg.anchor.batch = 8;
    cfg.anchor.lr = 2e-4;
    cfg.eval.seeds = 10;
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

    let alphas = [0.0, 0.24, 0.48];
    let betas = [0.0, 1.0, 2.0, 4.0];
    println!(
        "sweeping {}x{} cells, {} seeds each...",
        alphas.len(),
        betas.len(),
        cfg.eval.seeds
    );
    let cells = sweep_alpha_beta(
        &model,
        &params,
        &dataset,
        &maps,
        &cfg,
        &alphas,
        &betas,
        cfg.eval.seeds,
    )
    .expect("sweep");
    print!("{}", sweep_csv(&cells));
}
