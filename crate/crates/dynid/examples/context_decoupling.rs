//! Context decoupling: sample the same scene twice with different reference
//! identities (face regions reserved by layout masks) and measure how much
//! of the background actually moved.
//!
//! ```text
//! cargo run --example context_decoupling
//! ```

use dynid::model::{GateMode, GuidedPredictor, Model};
use dynid::pipeline::ddim_sample;
use dynid::saa::LayoutPolicy;
use dynid::train::{train_anchor, OptState};
use dynid::world::{make_dataset, FrozenWorldMaps};
use dynid::RunConfig;

fn demo_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 43;
    cfg.workers = 2;
    cfg.world.grid_h = 8;
    cfg.world.grid_w = 8;
    cfg.dataset.n_ids = 32;
    cfg.dataset.n_motions = 6;
    cfg.anchor.steps = 400;
    cfg.anchor.batch = 8;
    cfg.anchor.lr = 2e-4;
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

    // One face box; the injected identity differs between the two runs.
    let boxes = dynid::eval::default_two_boxes(&cfg.world);
    let masks = vec![
        dynid::saa::RegionMask::from_box(
            boxes[0].0, boxes[0].1, boxes[0].2, boxes[0].3, cfg.world.grid_w, cfg.world.grid_h, 0,
        )
        .expect("mask"),
        dynid::saa::RegionMask::from_box(
            boxes[1].0, boxes[1].1, boxes[1].2, boxes[1].3, cfg.world.grid_w, cfg.world.grid_h, 1,
        )
        .expect("mask"),
    ];
    let policy = LayoutPolicy::new(cfg.sampling.alpha, cfg.sampling.beta, masks.clone())
        .expect("policy")
        .with_gate_floor(cfg.sampling.gate_floor);

    let prompt = dynid::world::PromptAttrs {
        expression: 1,
        orientation: 0,
        scene: 2,
    };
    let tau = dynid::model::prompt_tokens(&model, &params, &prompt).expect("prompt");
    let sample_with = |ids: [usize; 2]| {
        let faces: Vec<_> = ids
            .iter()
            .map(|&i| {
                let idx = dataset.by_identity[&dataset.train_ids[i]][0];
                model
                    .encode_reference(&params, &dataset.samples[idx])
                    .expect("encode")
            })
            .collect();
        let mut pred = GuidedPredictor {
            model: &model,
            params: &params,
            faces,
            tau: tau.clone(),
            mode: GateMode::Policy(policy.clone()),
            cfg_scale: cfg.sampling.cfg_scale,
        };
        ddim_sample(
            &mut pred,
            &model.schedule,
            model.latent_shape(),
            cfg.sampling.steps,
            cfg.seed,
            7,
            false,
        )
        .expect("sample")
        .latent
    };

    let run_a = sample_with([0, 1]);
    let run_b = sample_with([2, 3]);

    let d_z = cfg.world.d_z;
    let in_any_mask =
        |cell: usize| masks.iter().any(|m| m.covers(cell));
    let (mut bg_max, mut face_max) = (0.0f64, 0.0f64);
    for cell in 0..cfg.world.cells() {
        for ch in 0..d_z {
            let idx = cell * d_z + ch;
            let delta = (run_a.data()[idx] - run_b.data()[idx]).abs() as f64;
            if in_any_mask(cell) {
                face_max = face_max.max(delta);
            } else {
                bg_max = bg_max.max(delta);
            }
        }
    }
    println!("max |delta| inside face boxes:  {face_max:.5}");
    println!("max |delta| in the background:  {bg_max:.5}");
    println!("ratio background / face: {:.4}", bg_max / face_max.max(1e-12));
}
