//! The `dynid` command line: dataset generation, both training stages,
//! guided sampling with layout control, evaluation, parameter sweeps and the
//! gradient-check suite.
//!
//! Every run echoes its effective config to `effective-config.json` in the
//! output directory; a run is reproducible from that file and nothing else.
//! Errors come back as a single machine-parsable stderr line
//! `error: <kind>: <detail>` with a nonzero exit status.

use crate::config::{ConfigError, RunConfig};
use crate::eval::{
    motion_transfer_eval, sweep_alpha_beta, sweep_csv, two_id_benchmark, EvalError, FeatureProbe,
    IdentityProbe, MetricReport,
};
use crate::model::{GateMode, GuidedPredictor, Model};
use crate::pipeline::{ddim_sample, PipelineError, SampleRun};
use crate::rng::{Purpose, Stream};
use crate::saa::{LayoutPolicy, RegionMask, SaaError};
use crate::tensor::{Precision, Scalar};
use crate::train::{
    load_checkpoint, loss_csv, params_digest, save_checkpoint, train_anchor, train_reconfigure,
    OptState, RngState, Stage, TrainError,
};
use crate::world::{
    load_dataset, make_dataset, make_expression_aux, render, save_dataset, Dataset,
    FrozenWorldMaps, MotionState, WorldError,
};
use clap::{Args, Parser, Subcommand};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    World(#[from] WorldError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("sample: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("mask: {0}")]
    Saa(#[from] SaaError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("usage: {0}")]
    Usage(String),
}

#[derive(Parser)]
#[command(
    name = "dynid",
    about = "Toy latent-diffusion stack with gated identity injection and identity/motion editing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. `--set anchor.lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shortcut for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shortcut for `--set workers=N`.
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(workers) = self.workers {
            overrides.push(format!("workers={workers}"));
        }
        Ok(base.with_overrides(&overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Shortcut for `--set dataset.n_ids=N`.
        #[arg(long)]
        ids: Option<usize>,
        /// Shortcut for `--set dataset.n_motions=N`.
        #[arg(long)]
        motions: Option<usize>,
    },
    /// Anchoring stage: train the denoiser, injection branches and face
    /// projection under the noise objective.
    TrainAnchor {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a previous anchoring checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconfiguration stage: freeze the anchored model and train the
    /// identity-motion reconfigurator plus the motion encoder.
    TrainImr {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Anchoring-stage checkpoint to start from.
        #[arg(long)]
        anchor: PathBuf,
        /// Disable the direct-feature-matching term.
        #[arg(long)]
        no_dfm: bool,
        /// Disable the latent-diffusion-consistency term.
        #[arg(long)]
        no_ldc: bool,
    },
    /// Sample with guided diffusion, optionally multi-identity with layout
    /// boxes and optional motion editing through the reconfigurator.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Trained checkpoint (either stage).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of reference identities (taken from the train split).
        #[arg(long, default_value_t = 1)]
        ids: usize,
        /// Face boxes `x0,y0,x1,y1;...` in grid cells, one per identity.
        #[arg(long)]
        boxes: Option<String>,
        /// Shortcut for `--set sampling.alpha=A`.
        #[arg(long)]
        alpha: Option<f64>,
        /// Shortcut for `--set sampling.beta=B`.
        #[arg(long)]
        beta: Option<f64>,
        /// Shortcut for `--set sampling.steps=S`.
        #[arg(long)]
        steps: Option<usize>,
        /// Shortcut for `--set sampling.cfg_scale=C`.
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Prompt expression class.
        #[arg(long, default_value_t = 0)]
        expr: usize,
        /// Prompt orientation class.
        #[arg(long, default_value_t = 0)]
        orient: usize,
        /// Prompt scene class.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Edit faces toward this expression with the reconfigurator.
        #[arg(long)]
        target_expr: Option<usize>,
        /// Edit faces toward this orientation with the reconfigurator.
        #[arg(long)]
        target_orient: Option<usize>,
        /// Disable layout shaping and suppression (adaptive gates only).
        #[arg(long)]
        ungated: bool,
        /// Trajectories to sample.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Dump per-step gate vectors (CSV) and latents (flat binary).
        #[arg(long)]
        dump_trace: bool,
    },
    /// Probe-based metrics for a trained checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out triples for motion-transfer metrics.
        #[arg(long)]
        triples: Option<usize>,
        /// Seeds for the two-identity benchmark.
        #[arg(long)]
        bench_seeds: Option<usize>,
    },
    /// Success-rate grid over the layout-control hyperparameters.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Alphas as `start:stop:step` or a comma list.
        #[arg(long, default_value = "0:0.48:0.08")]
        alphas: String,
        /// Betas as `start:stop:step` or a comma list.
        #[arg(long, default_value = "0,0.5,1,2,4")]
        betas: String,
        /// Seeds per grid cell.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Run the registered finite-difference composites; exit 0 only if all
    /// pass below tolerance.
    Gradcheck {
        /// Optional directory for a `gradcheck.csv` report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point used by `main`; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Clap prints its own help/usage text.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData {
            cfg,
            out,
            ids,
            motions,
        } => {
            let mut overrides = Vec::new();
            if let Some(n) = ids {
                overrides.push(format!("dataset.n_ids={n}"));
            }
            if let Some(n) = motions {
                overrides.push(format!("dataset.n_motions={n}"));
            }
            let config = cfg.resolve()?.with_overrides(&overrides)?;
            cmd_gen_data(&config, &out)
        }
        Command::TrainAnchor { cfg, out, resume } => {
            let config = cfg.resolve()?;
            match config.precision {
                Precision::F32 => cmd_train_anchor::<f32>(&config, &out, resume.as_deref()),
                Precision::F64 => cmd_train_anchor::<f64>(&config, &out, resume.as_deref()),
            }
        }
        Command::TrainImr {
            cfg,
            out,
            anchor,
            no_dfm,
            no_ldc,
        } => {
            let mut overrides = Vec::new();
            if no_dfm {
                overrides.push("reconfigure.dfm=false".to_string());
            }
            if no_ldc {
                overrides.push("reconfigure.ldc=false".to_string());
            }
            let config = cfg.resolve()?.with_overrides(&overrides)?;
            match config.precision {
                Precision::F32 => cmd_train_imr::<f32>(&config, &out, &anchor),
                Precision::F64 => cmd_train_imr::<f64>(&config, &out, &anchor),
            }
        }
        Command::Sample {
            cfg,
            out,
            checkpoint,
            ids,
            boxes,
            alpha,
            beta,
            steps,
            cfg_scale,
            expr,
            orient,
            scene,
            target_expr,
            target_orient,
            ungated,
            count,
            dump_trace,
        } => {
            let mut overrides = Vec::new();
            if let Some(a) = alpha {
                overrides.push(format!("sampling.alpha={a}"));
            }
            if let Some(b) = beta {
                overrides.push(format!("sampling.beta={b}"));
            }
            if let Some(s) = steps {
                overrides.push(format!("sampling.steps={s}"));
            }
            if let Some(c) = cfg_scale {
                overrides.push(format!("sampling.cfg_scale={c}"));
            }
            let req = SampleRequest {
                ids,
                boxes,
                prompt: (expr, orient, scene),
                target: (target_expr, target_orient),
                ungated,
                count,
                dump_trace,
            };
            with_checkpoint_config(&cfg, &overrides, &checkpoint, |config, precision| match precision {
                Precision::F32 => cmd_sample::<f32>(&config, &out, &checkpoint, &req),
                Precision::F64 => cmd_sample::<f64>(&config, &out, &checkpoint, &req),
            })
        }
        Command::Eval {
            cfg,
            out,
            checkpoint,
            triples,
            bench_seeds,
        } => {
            let mut overrides = Vec::new();
            if let Some(t) = triples {
                overrides.push(format!("eval.triples={t}"));
            }
            if let Some(s) = bench_seeds {
                overrides.push(format!("eval.seeds={s}"));
            }
            with_checkpoint_config(&cfg, &overrides, &checkpoint, |config, precision| {
                match precision {
                    Precision::F32 => cmd_eval::<f32>(&config, &out, &checkpoint),
                    Precision::F64 => cmd_eval::<f64>(&config, &out, &checkpoint),
                }
            })
        }
        Command::Sweep {
            cfg,
            out,
            checkpoint,
            alphas,
            betas,
            seeds,
        } => {
            let mut overrides = Vec::new();
            if let Some(s) = seeds {
                overrides.push(format!("eval.seeds={s}"));
            }
            let alphas = parse_grid(&alphas)?;
            let betas = parse_grid(&betas)?;
            with_checkpoint_config(&cfg, &overrides, &checkpoint, |config, precision| {
                match precision {
                    Precision::F32 => cmd_sweep::<f32>(&config, &out, &checkpoint, &alphas, &betas),
                    Precision::F64 => cmd_sweep::<f64>(&config, &out, &checkpoint, &alphas, &betas),
                }
            })
        }
        Command::Gradcheck { out } => cmd_gradcheck(out.as_deref()),
    }
}

/// Checkpointed commands take their base config from the checkpoint echo
/// (so model geometry always matches the weights), then apply CLI overrides.
fn with_checkpoint_config(
    args: &ConfigArgs,
    extra: &[String],
    checkpoint: &Path,
    f: impl FnOnce(RunConfig, Precision) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let raw = load_checkpoint(checkpoint)?;
    let stored: RunConfig = serde_json::from_str(&raw.config_json()?)
        .map_err(ConfigError::Parse)?;
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(workers) = args.workers {
        overrides.push(format!("workers={workers}"));
    }
    overrides.extend_from_slice(extra);
    let config = stored.with_overrides(&overrides)?;
    let precision = raw.precision()?;
    f(config, precision)
}

fn write_out(dir: &Path, name: &str, contents: &[u8]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_out(dir, "effective-config.json", cfg.to_json_pretty().as_bytes())
}

fn load_or_make_dataset(cfg: &RunConfig, maps: &FrozenWorldMaps) -> Result<Dataset, CliError> {
    match &cfg.dataset.path {
        Some(path) => Ok(load_dataset(Path::new(path))?),
        None => Ok(make_dataset(
            cfg.dataset.n_ids,
            cfg.dataset.n_motions,
            cfg.dataset.train_fraction,
            cfg.seed,
            maps,
        )?),
    }
}

// ── Subcommand bodies ───────────────────────────────────────────────────

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let maps = FrozenWorldMaps::new(&cfg.world)?;
    let dataset = make_dataset(
        cfg.dataset.n_ids,
        cfg.dataset.n_motions,
        cfg.dataset.train_fraction,
        cfg.seed,
        &maps,
    )?;
    std::fs::create_dir_all(out)?;
    save_dataset(&dataset, out)?;
    echo_config(out, cfg)?;
    println!(
        "wrote {} samples ({} train / {} held-out identities) to {}",
        dataset.samples.len(),
        dataset.train_ids.len(),
        dataset.holdout_ids.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_anchor<T: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let model = Model::from_config(cfg)?;
    let maps = FrozenWorldMaps::new(&cfg.world)?;
    let dataset = load_or_make_dataset(cfg, &maps)?;
    let (mut params, mut opt, start_step) = match resume {
        Some(path) => {
            let raw = load_checkpoint(path)?;
            raw.expect_stage(Stage::Anchor)?;
            let (params, opt) = raw.unpack::<T>()?;
            let rng = raw.rng_state()?;
            (params, opt, rng.next_step as usize)
        }
        None => (model.init_params::<T>(cfg.seed), OptState::new(), 0),
    };
    let rows = train_anchor(&model, &mut params, &mut opt, &dataset, cfg, start_step)?;
    std::fs::create_dir_all(out)?;
    echo_config(out, cfg)?;
    write_out(out, "anchor_loss.csv", loss_csv(&rows).as_bytes())?;
    save_checkpoint(
        &out.join("anchor.ckpt"),
        Stage::Anchor,
        &params,
        &opt,
        &cfg.to_json_pretty(),
        RngState {
            seed: cfg.seed,
            next_step: cfg.anchor.steps as u64,
        },
    )?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!(
            "anchoring: {} steps, loss {} -> {}",
            rows.len(),
            first.loss,
            last.loss
        );
    }
    println!("checkpoint: {}", out.join("anchor.ckpt").display());
    Ok(())
}

fn cmd_train_imr<T: Scalar>(cfg: &RunConfig, out: &Path, anchor: &Path) -> Result<(), CliError> {
    let model = Model::from_config(cfg)?;
    let maps = FrozenWorldMaps::new(&cfg.world)?;
    let dataset = load_or_make_dataset(cfg, &maps)?;
    let aux = make_expression_aux(cfg.dataset.aux_ids, cfg.seed, &maps)?;
    let raw = load_checkpoint(anchor)?;
    raw.expect_stage(Stage::Anchor)?;
    let (mut params, _anchor_opt) = raw.unpack::<T>()?;
    let anchored_digest = params_digest(&params, crate::model::is_anchor_param);
    let mut opt = OptState::new();
    let rows = train_reconfigure(&model, &mut params, &mut opt, &dataset, Some(&aux), cfg, 0)?;
    debug_assert_eq!(
        params_digest(&params, crate::model::is_anchor_param),
        anchored_digest,
        "anchored weights moved during reconfiguration"
    );
    std::fs::create_dir_all(out)?;
    echo_config(out, cfg)?;
    write_out(out, "imr_loss.csv", loss_csv(&rows).as_bytes())?;
    save_checkpoint(
        &out.join("imr.ckpt"),
        Stage::Reconfigure,
        &params,
        &opt,
        &cfg.to_json_pretty(),
        RngState {
            seed: cfg.seed,
            next_step: cfg.reconfigure.steps as u64,
        },
    )?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!(
            "reconfiguration: {} steps, loss {} -> {}",
            rows.len(),
            first.loss,
            last.loss
        );
    }
    println!("checkpoint: {}", out.join("imr.ckpt").display());
    Ok(())
}

struct SampleRequest {
    ids: usize,
    boxes: Option<String>,
    prompt: (usize, usize, usize),
    target: (Option<usize>, Option<usize>),
    ungated: bool,
    count: usize,
    dump_trace: bool,
}

fn parse_boxes(spec: &str) -> Result<Vec<(usize, usize, usize, usize)>, CliError> {
    spec.split(';')
        .map(|part| {
            let coords: Vec<usize> = part
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Usage(format!("bad box {part:?}, want x0,y0,x1,y1")))?;
            if coords.len() != 4 {
                return Err(CliError::Usage(format!(
                    "bad box {part:?}, want x0,y0,x1,y1"
                )));
            }
            Ok((coords[0], coords[1], coords[2], coords[3]))
        })
        .collect()
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = |s: &str| CliError::Usage(format!("bad grid value {s:?}"));
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(CliError::Usage(format!(
                "bad grid {spec:?}, want start:stop:step"
            )));
        }
        let start: f64 = parts[0].parse().map_err(|_| bad(parts[0]))?;
        let stop: f64 = parts[1].parse().map_err(|_| bad(parts[1]))?;
        let step: f64 = parts[2].parse().map_err(|_| bad(parts[2]))?;
        if step <= 0.0 {
            return Err(CliError::Usage("grid step must be positive".into()));
        }
        let mut values = Vec::new();
        let mut v = start;
        while v <= stop + 1e-12 {
            values.push((v * 1e9).round() / 1e9);
            v += step;
        }
        Ok(values)
    } else {
        spec.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad(v)))
            .collect()
    }
}

fn cmd_sample<T: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    req: &SampleRequest,
) -> Result<(), CliError> {
    if req.ids == 0 {
        return Err(CliError::Usage("--ids must be at least 1".into()));
    }
    let model = Model::from_config(cfg)?;
    let maps = FrozenWorldMaps::new(&cfg.world)?;
    let dataset = load_or_make_dataset(cfg, &maps)?;
    let raw = load_checkpoint(checkpoint)?;
    let (params, _) = raw.unpack::<T>()?;
    let editing = req.target.0.is_some() || req.target.1.is_some();
    if editing {
        raw.expect_stage(Stage::Reconfigure)?;
    }

    // References: the first `ids` train identities, rendered frontal-neutral.
    let mut faces = Vec::new();
    let mut intended = Vec::new();
    for i in 0..req.ids {
        if i >= dataset.train_ids.len() {
            return Err(CliError::Usage(format!(
                "requested {} identities, dataset has {}",
                req.ids,
                dataset.train_ids.len()
            )));
        }
        let id = dataset.train_ids[i];
        let profile = dataset.catalog[id].clone();
        let mut ms = Stream::new(cfg.seed, Purpose::Eval, 0x90_0000_0000 + i as u64);
        let motion = MotionState::draw(0, 0, &mut ms);
        let reference = render(&profile, motion, 0, &maps, cfg.seed, 0x91_0000_0000 + i as u64)?;
        let mut xi = model.encode_reference(&params, &reference)?;
        if editing {
            let src_psi = model.encode_motion(
                &params,
                &reference.landmarks,
                reference.prompt.expression,
                reference.prompt.orientation,
            )?;
            let tgt_expr = req.target.0.unwrap_or(reference.prompt.expression);
            let tgt_orient = req.target.1.unwrap_or(reference.prompt.orientation);
            let tgt_psi =
                model.encode_motion(&params, &reference.landmarks, tgt_expr, tgt_orient)?;
            xi = model.reconfigure_values(&params, &xi, &src_psi, &tgt_psi)?;
        }
        faces.push(xi);
        intended.push(id);
    }

    let masks: Option<Vec<RegionMask>> = match &req.boxes {
        Some(spec) => {
            let boxes = parse_boxes(spec)?;
            if boxes.len() != req.ids {
                return Err(CliError::Usage(format!(
                    "{} boxes for {} identities",
                    boxes.len(),
                    req.ids
                )));
            }
            Some(
                boxes
                    .iter()
                    .enumerate()
                    .map(|(label, &(x0, y0, x1, y1))| {
                        RegionMask::from_box(x0, y0, x1, y1, cfg.world.grid_w, cfg.world.grid_h, label)
                    })
                    .collect::<Result<_, _>>()?,
            )
        }
        None => None,
    };

    let mode = match (&masks, req.ungated) {
        (Some(masks), false) => GateMode::Policy(
            LayoutPolicy::new(cfg.sampling.alpha, cfg.sampling.beta, masks.clone())?
                .with_gate_floor(cfg.sampling.gate_floor),
        ),
        _ => GateMode::Adaptive,
    };

    let prompt = crate::world::PromptAttrs {
        expression: req.prompt.0,
        orientation: req.prompt.1,
        scene: req.prompt.2,
    };
    let tau = crate::model::prompt_tokens(&model, &params, &prompt)?;

    std::fs::create_dir_all(out)?;
    echo_config(out, cfg)?;
    let probe = IdentityProbe::new(&maps, &dataset.catalog);
    let mut probe_csv = String::from("trajectory,region,intended_id,best_id,margin,cosine,in_span,expression,orientation\n");
    for traj in 0..req.count {
        let mut pred = GuidedPredictor {
            model: &model,
            params: &params,
            faces: faces.clone(),
            tau: tau.clone(),
            mode: mode.clone(),
            cfg_scale: cfg.sampling.cfg_scale,
        };
        let run: SampleRun<T> = ddim_sample(
            &mut pred,
            &model.schedule,
            model.latent_shape(),
            cfg.sampling.steps,
            cfg.seed,
            traj as u64,
            req.dump_trace,
        )?;
        let latent_f64: Vec<f64> = run.latent.data().iter().map(|v| v.as_f64()).collect();
        let mut bin = Vec::with_capacity(latent_f64.len() * 8);
        for v in &latent_f64 {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        write_out(out, &format!("latent_{traj:03}.bin"), &bin)?;

        if let Some(masks) = &masks {
            for (mask, &want) in masks.iter().zip(&intended) {
                let r = probe.probe_region(&latent_f64, mask, cfg.world.d_z)?;
                writeln!(
                    probe_csv,
                    "{traj},{},{want},{},{},{},{},{},{}",
                    mask.label(),
                    r.best_id,
                    r.margin,
                    r.cosine,
                    r.in_span,
                    r.expression,
                    r.orientation
                )
                .expect("string write");
            }
        }

        if let Some(trace) = run.trace {
            let mut gate_csv = String::from("step,t,block,identity,cell,gate\n");
            let mut latent_bin = Vec::new();
            for step in &trace {
                for block in &step.gates {
                    for (identity, gates) in block.gates.iter().enumerate() {
                        for (cell, g) in gates.iter().enumerate() {
                            writeln!(
                                gate_csv,
                                "{},{},{},{identity},{cell},{}",
                                step.step,
                                step.t,
                                block.block,
                                g.as_f64()
                            )
                            .expect("string write");
                        }
                    }
                }
                for v in &step.latent {
                    latent_bin.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
            write_out(out, &format!("trace_gates_{traj:03}.csv"), gate_csv.as_bytes())?;
            write_out(out, &format!("trace_latents_{traj:03}.bin"), &latent_bin)?;
        }
    }
    if masks.is_some() {
        write_out(out, "probe_report.csv", probe_csv.as_bytes())?;
    }
    println!(
        "sampled {} trajectories into {}",
        req.count,
        out.display()
    );
    Ok(())
}

fn cmd_eval<T: Scalar>(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<(), CliError> {
    let model = Model::from_config(cfg)?;
    let maps = FrozenWorldMaps::new(&cfg.world)?;
    let dataset = load_or_make_dataset(cfg, &maps)?;
    let raw = load_checkpoint(checkpoint)?;
    let (params, _) = raw.unpack::<T>()?;

    let boxes = crate::eval::default_two_boxes(&cfg.world);
    let gated = two_id_benchmark(
        &model, &params, &dataset, &maps, cfg, &boxes, cfg.eval.seeds, true,
    )?;
    let ungated = two_id_benchmark(
        &model, &params, &dataset, &maps, cfg, &boxes, cfg.eval.seeds, false,
    )?;

    let mut report = MetricReport {
        identity_retention: None,
        expression_accuracy: None,
        orientation_accuracy: None,
        blending_rate: Some(gated.blending_rate),
        region_success_rate: Some(gated.region_success_rate),
        probe_margin_threshold: cfg.eval.probe_margin,
        config: serde_json::to_value(cfg).expect("config serializes"),
    };
    if raw.stage == Stage::Reconfigure {
        let calib_ids: Vec<_> = dataset
            .train_ids
            .iter()
            .take(40)
            .map(|&id| dataset.catalog[id].clone())
            .collect();
        let probe = FeatureProbe::calibrate(&model, &params, &maps, &calib_ids, 10, cfg.seed)?;
        let motion = motion_transfer_eval(&model, &params, &dataset, &probe, cfg, cfg.eval.triples)?;
        report.identity_retention = motion.identity_retention;
        report.expression_accuracy = motion.expression_accuracy;
        report.orientation_accuracy = motion.orientation_accuracy;
    }
    report.validate()?;

    std::fs::create_dir_all(out)?;
    echo_config(out, cfg)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_out(out, "metrics.json", json.as_bytes())?;
    let mut csv = String::from(
        "identity_retention,expression_accuracy,orientation_accuracy,blending_rate,blending_rate_ungated,region_success_rate,region_success_rate_ungated\n",
    );
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(
        csv,
        "{},{},{},{},{},{},{}",
        fmt(report.identity_retention),
        fmt(report.expression_accuracy),
        fmt(report.orientation_accuracy),
        fmt(report.blending_rate),
        ungated.blending_rate,
        fmt(report.region_success_rate),
        ungated.region_success_rate,
    )
    .expect("string write");
    write_out(out, "metrics.csv", csv.as_bytes())?;
    println!("{json}");
    Ok(())
}

fn cmd_sweep<T: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    alphas: &[f64],
    betas: &[f64],
) -> Result<(), CliError> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(CliError::Usage("sweep grids must be non-empty".into()));
    }
    let model = Model::from_config(cfg)?;
    let maps = FrozenWorldMaps::new(&cfg.world)?;
    let dataset = load_or_make_dataset(cfg, &maps)?;
    let raw = load_checkpoint(checkpoint)?;
    let (params, _) = raw.unpack::<T>()?;
    let cells = sweep_alpha_beta(
        &model,
        &params,
        &dataset,
        &maps,
        cfg,
        alphas,
        betas,
        cfg.eval.seeds,
    )?;
    std::fs::create_dir_all(out)?;
    echo_config(out, cfg)?;
    write_out(out, "sweep.csv", sweep_csv(&cells).as_bytes())?;
    // Gnuplot-style x y z triples for the success surface.
    let mut dat = String::new();
    for cell in &cells {
        writeln!(dat, "{} {} {}", cell.alpha, cell.beta, cell.success_rate).expect("string write");
    }
    write_out(out, "sweep.dat", dat.as_bytes())?;
    println!("swept {} cells into {}", cells.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(out: Option<&Path>) -> Result<(), CliError> {
    let checks = crate::gradsuite::run_registered();
    let mut csv = String::from("composite,max_rel_error,pass\n");
    let mut all_pass = true;
    for check in &checks {
        println!(
            "{}: max relative error {:.3e} [{}]",
            check.name,
            check.error,
            if check.pass { "pass" } else { "FAIL" }
        );
        writeln!(csv, "{},{},{}", check.name, check.error, check.pass).expect("string write");
        all_pass &= check.pass;
    }
    if let Some(dir) = out {
        write_out(dir, "gradcheck.csv", csv.as_bytes())?;
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Usage(
            "gradient checks failed; see report above".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_parsing() {
        assert_eq!(
            parse_boxes("0,3,5,9;7,3,12,9").unwrap(),
            vec![(0, 3, 5, 9), (7, 3, 12, 9)]
        );
        assert!(parse_boxes("1,2,3").is_err());
        assert!(parse_boxes("a,b,c,d").is_err());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0,0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        let ramp = parse_grid("0:0.48:0.08").unwrap();
        assert_eq!(ramp.len(), 7);
        assert!((ramp[6] - 0.48).abs() < 1e-9);
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("x").is_err());
    }
}
