//! Reconfiguration stage on a small world: starting from an anchored model,
//! train the identity-motion reconfigurator and the motion encoder with the
//! dual edit loss, then measure motion transfer on held-out identities.
//!
//! ```text
//! cargo run --example train_reconfigurator
//! ```

use dynid::eval::{motion_transfer_eval, FeatureProbe};
use dynid::model::Model;
use dynid::train::{train_anchor, train_reconfigure, OptState};
use dynid::world::{make_dataset, make_expression_aux, FrozenWorldMaps};
use dynid::RunConfig;

fn demo_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 23;
    cfg.workers = 2;
    cfg.world.grid_h = 8;
    cfg.world.grid_w = 8;
    cfg.dataset.n_ids = 40;
    cfg.dataset.n_motions = 8;
    cfg.dataset.aux_ids = 4;
    cfg.anchor.steps = 150;
    cfg.anchor.batch = 8;
    cfg.anchor.lr = 2e-4;
    cfg.reconfigure.steps = 800;
    cfg.reconfigure.lr = 1e-3;
    cfg.eval.triples = 150;
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
    let aux = make_expression_aux(cfg.dataset.aux_ids, cfg.seed, &maps).expect("aux dataset");

    let mut params = model.init_params::<f32>(cfg.seed);
    let mut opt = OptState::new();
    println!("anchoring briefly ({} steps)...", cfg.anchor.steps);
    train_anchor(&model, &mut params, &mut opt, &dataset, &cfg, 0).expect("anchor");

    println!("reconfiguration ({} steps)...", cfg.reconfigure.steps);
    let mut opt2 = OptState::new();
    let rows = train_reconfigure(&model, &mut params, &mut opt2, &dataset, Some(&aux), &cfg, 0)
        .expect("reconfigure");
    let first = &rows[0];
    let last = &rows[rows.len() - 1];
    println!(
        "edit loss {:.4} (dfm {:.4} / ldc {:.4}) -> {:.4} (dfm {:.4} / ldc {:.4})",
        first.loss,
        first.dfm.unwrap(),
        first.ldc.unwrap(),
        last.loss,
        last.dfm.unwrap(),
        last.ldc.unwrap(),
    );

    let calib: Vec<_> = dataset
        .train_ids
        .iter()
        .take(24)
        .map(|&id| dataset.catalog[id].clone())
        .collect();
    let probe =
        FeatureProbe::calibrate(&model, &params, &maps, &calib, 10, cfg.seed).expect("calibrate");
    let report = motion_transfer_eval(&model, &params, &dataset, &probe, &cfg, cfg.eval.triples)
        .expect("eval");
    println!(
        "held-out motion transfer: expression accuracy {:.3}, orientation accuracy {:.3}, identity retention {:.3}",
        report.expression_accuracy.unwrap(),
        report.orientation_accuracy.unwrap(),
        report.identity_retention.unwrap(),
    );
}
