//! Feature-space face editing: push one reference face through the trained
//! reconfigurator toward every expression class and decode what came out.
//!
//! ```text
//! cargo run --example motion_editing
//! ```

use dynid::eval::FeatureProbe;
use dynid::model::Model;
use dynid::train::{train_anchor, train_reconfigure, OptState};
use dynid::world::{make_dataset, FrozenWorldMaps};
use dynid::RunConfig;

fn demo_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 37;
    cfg.workers = 2;
    cfg.world.grid_h = 8;
    cfg.world.grid_w = 8;
    cfg.dataset.n_ids = 40;
    cfg.dataset.n_motions = 8;
    cfg.anchor.steps = 150;
    cfg.anchor.batch = 8;
    cfg.anchor.lr = 2e-4;
    cfg.reconfigure.steps = 800;
    cfg.reconfigure.lr = 1e-3;
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
    println!("anchoring + reconfiguration...");
    train_anchor(&model, &mut params, &mut opt, &dataset, &cfg, 0).expect("anchor");
    let mut opt2 = OptState::new();
    train_reconfigure(&model, &mut params, &mut opt2, &dataset, None, &cfg, 0)
        .expect("reconfigure");

    let calib: Vec<_> = dataset
        .train_ids
        .iter()
        .take(24)
        .map(|&id| dataset.catalog[id].clone())
        .collect();
    let probe =
        FeatureProbe::calibrate(&model, &params, &maps, &calib, 10, cfg.seed).expect("calibrate");

    // Take a held-out face and edit its expression while holding identity.
    let id = dataset.holdout_ids[0];
    let source = &dataset.samples[dataset.by_identity[&id][0]];
    let xi_src = model.encode_reference(&params, source).expect("encode");
    let psi_src = model
        .encode_motion(
            &params,
            &source.landmarks,
            source.prompt.expression,
            source.prompt.orientation,
        )
        .expect("motion");
    println!(
        "source: identity {}, expression {}, orientation {}",
        id, source.prompt.expression, source.prompt.orientation
    );
    println!("target_expr decoded_expr decoded_orient identity_cosine");
    for target_expr in 0..cfg.world.expressions {
        let psi_tgt = model
            .encode_motion(
                &params,
                &source.landmarks,
                target_expr,
                source.prompt.orientation,
            )
            .expect("motion");
        let edited = model
            .reconfigure_values(&params, &xi_src, &psi_src, &psi_tgt)
            .expect("reconfigure");
        let decoded = probe.decode(&edited);
        let cos = {
            let u = &source.identity.u;
            let d = &decoded.identity;
            let dot: f64 = u.iter().zip(d).map(|(a, b)| a * b).sum();
            let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nd: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (nu * nd)
        };
        println!(
            "{target_expr:>11} {:>12} {:>14} {:>15.3}",
            decoded.expression, decoded.orientation, cos
        );
    }
}
