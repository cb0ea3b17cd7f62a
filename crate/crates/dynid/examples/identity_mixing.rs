//! Identity mixing: interpolate the motion-stripped identity latents of two
//! people, re-entangle a shared motion, and track which catalog identities
//! the probe sees along the interpolation path.
//!
//! ```text
//! cargo run --example identity_mixing
//! ```

use dynid::eval::FeatureProbe;
use dynid::imr::id_mix;
use dynid::model::Model;
use dynid::train::{train_anchor, train_reconfigure, OptState};
use dynid::world::{make_dataset, FrozenWorldMaps};
use dynid::RunConfig;

fn demo_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 41;
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

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
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

    let id_a = dataset.train_ids[0];
    let id_b = dataset.train_ids[1];
    let sample_a = &dataset.samples[dataset.by_identity[&id_a][0]];
    let sample_b = &dataset.samples[dataset.by_identity[&id_b][0]];
    let encode = |s: &dynid::world::WorldSample| {
        let xi = model.encode_reference(&params, s).expect("encode");
        let psi = model
            .encode_motion(&params, &s.landmarks, s.prompt.expression, s.prompt.orientation)
            .expect("motion");
        model.disentangle_values(&params, &xi, &psi).expect("strip")
    };
    let zeta_a = encode(sample_a);
    let zeta_b = encode(sample_b);
    // Shared target motion for the whole path.
    let psi_shared = model
        .encode_motion(&params, &sample_a.landmarks, 1, 0)
        .expect("motion");

    println!("mixing identities {id_a} and {id_b}");
    println!("gamma cos_to_a cos_to_b");
    for step in 0..=4 {
        let gamma = step as f64 / 4.0;
        let mixed = id_mix(&zeta_a, &zeta_b, gamma).expect("mix");
        let tokens = model
            .entangle_values(&params, &mixed, &psi_shared)
            .expect("entangle");
        let decoded = probe.decode(&tokens);
        println!(
            "{gamma:<5} {:>8.3} {:>8.3}",
            cosine(&decoded.identity, &dataset.catalog[id_a].u),
            cosine(&decoded.identity, &dataset.catalog[id_b].u),
        );
    }
}
