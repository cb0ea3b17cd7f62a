//! Anchoring stage on a small world: train the denoiser, its gated identity
//! branches and the face projection under the noise-prediction objective,
//! then show that the loss falls and the gates localize on face regions.
//!
//! ```text
//! cargo run --example train_anchoring
//! ```

use dynid::model::Model;
use dynid::pipeline::{anchoring_loss, Conditioning, FaceGating};
use dynid::rng::{Purpose, Stream};
use dynid::tensor::{NameTable, Tape};
use dynid::train::{train_anchor, OptState};
use dynid::world::{make_dataset, FrozenWorldMaps};
use dynid::RunConfig;

fn demo_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 17;
    cfg.workers = 2;
    cfg.world.grid_h = 8;
    cfg.world.grid_w = 8;
    cfg.dataset.n_ids = 24;
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
    println!(
        "anchoring on {} samples, {} steps, batch {}",
        dataset.samples.len(),
        cfg.anchor.steps,
        cfg.anchor.batch
    );
    let rows = train_anchor(&model, &mut params, &mut opt, &dataset, &cfg, 0).expect("training");
    let smooth = |range: std::ops::Range<usize>| {
        let slice = &rows[range];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
    };
    println!("mean loss, first 20 steps: {:.4}", smooth(0..20));
    println!(
        "mean loss, last 20 steps:  {:.4}",
        smooth(rows.len() - 20..rows.len())
    );

    // Gate localization: compare mean adaptive gate inside vs outside the
    // face region on a training sample.
    let sample = &dataset.samples[dataset.train_samples()[0]];
    let mut tape = Tape::new();
    let (names, _) = NameTable::bind_model(&mut tape, &params, |_| false);
    let mut noise = Stream::new(cfg.seed, Purpose::Noise, 999_999);
    let _ = anchoring_loss(
        &mut tape,
        &names,
        &model.denoiser,
        &model.face,
        &model.text,
        &model.schedule,
        &[sample],
        &cfg.world,
        &mut noise,
    )
    .expect("loss");
    // Rebuild a forward at moderate noise to read the gates.
    let mut tape = Tape::new();
    let (names, _) = NameTable::bind_model(&mut tape, &params, |_| false);
    let t = model.schedule.t_train() / 2;
    let z0 = sample.latent::<f32>(&cfg.world);
    let mut s = Stream::new(cfg.seed, Purpose::Noise, 1_000_000);
    let eps = dynid::tensor::Tensor::new(
        z0.shape().to_vec(),
        (0..z0.numel()).map(|_| s.normal() as f32).collect(),
    )
    .unwrap();
    let z_t = model.schedule.add_noise(&z0, t, &eps).unwrap();
    let z_id = tape.leaf(z_t);
    let xi = model.face.encode(&mut tape, &names, sample).unwrap();
    let tau = model.text.tokens(&mut tape, &sample.prompt).unwrap();
    let cond = Conditioning {
        text: tau,
        faces: vec![xi],
        gating: FaceGating::Adaptive,
    };
    let (_, gates) = model
        .denoiser
        .forward(&mut tape, &names, z_id, t, model.schedule.t_train(), &cond)
        .unwrap();
    for block in &gates {
        let g = &block.gates[0];
        let (mut inside, mut outside) = (0.0f64, 0.0f64);
        let (mut n_in, mut n_out) = (0, 0);
        for (cell, &v) in g.iter().enumerate() {
            if sample.mask.covers(cell) {
                inside += v as f64;
                n_in += 1;
            } else {
                outside += v as f64;
                n_out += 1;
            }
        }
        println!(
            "block {}: mean gate inside face {:.3}, outside {:.3}",
            block.block,
            inside / n_in as f64,
            outside / n_out as f64
        );
    }
}
