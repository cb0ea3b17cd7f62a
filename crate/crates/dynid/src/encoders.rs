//! Face and motion encoders.
//!
//! The face encoder mirrors the frozen-extractor-plus-trainable-projection
//! arrangement: a frozen global map reads the face region's mean content, a
//! frozen local map reads 2x2 quadrant means, and a trainable two-layer MLP
//! projects the concatenation into `k` feature tokens. Only the projection
//! ever receives gradients.
//!
//! The motion encoder turns prompt attributes (expression and orientation
//! looked up in the frozen text tables) plus landmark coordinates (through a
//! small trainable keypoint MLP) into `c` motion tokens.

use crate::rng::{Purpose, Stream};
use crate::tensor::{NameTable, ParamSet, Scalar, Tape, Tensor, TensorError, TensorId};
use crate::world::{PromptAttrs, WorldConfig, WorldError, WorldSample};
use serde::{Deserialize, Serialize};

/// Seed of all frozen encoder tables and extractor maps.
pub const ENCODER_FROZEN_SEED: u64 = 0xF07E_0001;

/// Token geometry of the conditioning pathway.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Face feature tokens.
    pub k: usize,
    /// Motion descriptor tokens.
    pub c: usize,
    /// Token width shared by face, text and motion tokens.
    pub d_f: usize,
    /// Hidden width of the face projection MLP.
    pub proj_hidden: usize,
    /// Output width of the keypoint encoder.
    pub landmark_dim: usize,
    /// Hidden width of the keypoint encoder.
    pub landmark_hidden: usize,
    /// Hidden width of the motion MLP.
    pub motion_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            k: 8,
            c: 4,
            d_f: 32,
            proj_hidden: 64,
            landmark_dim: 16,
            landmark_hidden: 32,
            motion_hidden: 64,
        }
    }
}

fn frozen_matrix(stream_index: u64, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    let mut s = Stream::new(ENCODER_FROZEN_SEED, Purpose::Data, stream_index);
    (0..rows * cols).map(|_| s.normal() * scale).collect()
}

/// Frozen embedding tables for the discrete prompt attributes.
pub struct TextEncoder {
    d_f: usize,
    expressions: usize,
    orientations: usize,
    scenes: usize,
    expr_table: Vec<f64>,
    orient_table: Vec<f64>,
    scene_table: Vec<f64>,
}

impl TextEncoder {
    pub fn new(enc: &EncoderConfig, world: &WorldConfig) -> Self {
        // Token scale 2.5 widens the reach of the value projections reading
        // these embeddings, which matters at the small training step sizes
        // this stack runs at.
        TextEncoder {
            d_f: enc.d_f,
            expressions: world.expressions,
            orientations: world.orientations,
            scenes: world.scenes,
            expr_table: frozen_matrix(3, world.expressions, enc.d_f, 2.5),
            orient_table: frozen_matrix(4, world.orientations, enc.d_f, 2.5),
            scene_table: frozen_matrix(5, world.scenes, enc.d_f, 2.5),
        }
    }

    pub fn token_count(&self) -> usize {
        3
    }

    fn check(&self, prompt: &PromptAttrs) -> Result<(), WorldError> {
        let checks = [
            ("expression", prompt.expression, self.expressions),
            ("orientation", prompt.orientation, self.orientations),
            ("scene", prompt.scene, self.scenes),
        ];
        for (kind, value, max) in checks {
            if value >= max {
                return Err(WorldError::BadClass {
                    kind,
                    value,
                    max: max - 1,
                });
            }
        }
        Ok(())
    }

    /// Text feature tokens `[3, d_f]`: expression, orientation, scene rows.
    pub fn tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        prompt: &PromptAttrs,
    ) -> Result<TensorId, WorldError> {
        self.check(prompt)?;
        let table = |tape: &mut Tape<T>, data: &[f64], rows: usize| {
            tape.leaf(Tensor::new(
                vec![rows, self.d_f],
                data.iter().map(|&v| T::from_f64(v)).collect(),
            )
            .expect("frozen tables are finite"))
        };
        let expr = table(tape, &self.expr_table, self.expressions);
        let orient = table(tape, &self.orient_table, self.orientations);
        let scene = table(tape, &self.scene_table, self.scenes);
        let e = tape.embed_row(expr, prompt.expression).map_err(wrap)?;
        let o = tape.embed_row(orient, prompt.orientation).map_err(wrap)?;
        let s = tape.embed_row(scene, prompt.scene).map_err(wrap)?;
        let rows = tape.transpose(e).map_err(wrap)?;
        let rows_o = tape.transpose(o).map_err(wrap)?;
        let rows_s = tape.transpose(s).map_err(wrap)?;
        let cat = tape.concat_cols(rows, rows_o).map_err(wrap)?;
        let cat = tape.concat_cols(cat, rows_s).map_err(wrap)?;
        tape.transpose(cat).map_err(wrap)
    }

    /// The unconditional branch: all-zero text tokens, which null out the
    /// text cross-attention read (bias-free value projections of zeros).
    pub fn null_tokens<T: Scalar>(&self, tape: &mut Tape<T>) -> TensorId {
        tape.leaf(Tensor::zeros(vec![3, self.d_f]))
    }

    /// Raw expression/orientation embeddings for the motion encoder.
    fn prompt_pair(&self, expression: usize, orientation: usize) -> Result<Vec<f64>, WorldError> {
        self.check(&PromptAttrs {
            expression,
            orientation,
            scene: 0,
        })?;
        let mut out = Vec::with_capacity(2 * self.d_f);
        out.extend_from_slice(&self.expr_table[expression * self.d_f..(expression + 1) * self.d_f]);
        out.extend_from_slice(
            &self.orient_table[orientation * self.d_f..(orientation + 1) * self.d_f],
        );
        Ok(out)
    }

    pub fn digest(&self) -> u32 {
        digest_f64(&[&self.expr_table, &self.orient_table, &self.scene_table])
    }
}

fn wrap(e: TensorError) -> WorldError {
    WorldError::Corrupt {
        path: String::new(),
        detail: e.to_string(),
    }
}

/// Frozen extractors plus the geometry needed to read a face region.
pub struct FaceEncoder {
    enc: EncoderConfig,
    world: WorldConfig,
    /// `[d_z, d_z]` global extractor.
    global_map: Vec<f64>,
    /// `[d_z, d_z]` local extractor shared by the four quadrants.
    local_map: Vec<f64>,
}

pub const FACE_PARAMS: [&str; 4] = ["face.proj.w1", "face.proj.b1", "face.proj.w2", "face.proj.b2"];

pub const MOTION_PARAMS: [&str; 8] = [
    "motion.lm.w1",
    "motion.lm.b1",
    "motion.lm.w2",
    "motion.lm.b2",
    "motion.mlp.w1",
    "motion.mlp.b1",
    "motion.mlp.w2",
    "motion.mlp.b2",
];

impl FaceEncoder {
    pub fn new(enc: EncoderConfig, world: WorldConfig) -> Self {
        let d_z = world.d_z;
        let scale = 1.0 / (d_z as f64).sqrt();
        FaceEncoder {
            enc,
            world,
            global_map: frozen_matrix(1, d_z, d_z, scale),
            local_map: frozen_matrix(2, d_z, d_z, scale),
        }
    }

    pub fn feature_width(&self) -> usize {
        5 * self.world.d_z
    }

    /// Checksum of the frozen extractor tables; training must never move it.
    pub fn digest(&self) -> u32 {
        digest_f64(&[&self.global_map, &self.local_map])
    }

    /// Insert the trainable projection parameters. The output layer carries
    /// extra gain so the face tokens start with enough energy for the
    /// injection branch to read.
    pub fn init_params<T: Scalar>(
        &self,
        params: &mut ParamSet<T>,
        init: &mut Stream,
    ) -> Result<(), TensorError> {
        let d_in = self.feature_width();
        let h = self.enc.proj_hidden;
        let d_out = self.enc.k * self.enc.d_f;
        insert_linear(params, "face.proj.w1", "face.proj.b1", d_in, h, init)?;
        insert_linear_scaled(params, "face.proj.w2", "face.proj.b2", h, d_out, 5.0, init)?;
        Ok(())
    }

    /// Frozen feature vector `[1, 5 d_z]` for a face region: global read of
    /// the region mean plus local reads of the 2x2 quadrant means.
    pub fn frozen_features(&self, sample: &WorldSample) -> Vec<f64> {
        let d_z = self.world.d_z;
        let (x0, y0, x1, y1) = sample.face_box;
        let mean_of = |cells: &[usize]| -> Vec<f64> {
            let mut m = vec![0.0; d_z];
            for &cell in cells {
                for (acc, &v) in m.iter_mut().zip(&sample.z0[cell * d_z..(cell + 1) * d_z]) {
                    *acc += v;
                }
            }
            if !cells.is_empty() {
                m.iter_mut().for_each(|v| *v /= cells.len() as f64);
            }
            m
        };
        let apply = |map: &[f64], x: &[f64]| -> Vec<f64> {
            (0..d_z)
                .map(|r| {
                    map[r * d_z..(r + 1) * d_z]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect()
        };
        let all_cells: Vec<usize> = (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| y * self.world.grid_w + x))
            .collect();
        let mut features = apply(&self.global_map, &mean_of(&all_cells));
        let (mx, my) = ((x0 + x1) / 2, (y0 + y1) / 2);
        let quads = [
            (x0, y0, mx, my),
            (mx, y0, x1, my),
            (x0, my, mx, y1),
            (mx, my, x1, y1),
        ];
        for (qx0, qy0, qx1, qy1) in quads {
            let cells: Vec<usize> = (qy0..qy1)
                .flat_map(|y| (qx0..qx1).map(move |x| y * self.world.grid_w + x))
                .collect();
            features.extend(apply(&self.local_map, &mean_of(&cells)));
        }
        features
    }

    /// Face feature tokens `xi [k, d_f]`. The frozen features enter the tape
    /// as a constant; only the projection parameters carry gradient.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        names: &NameTable,
        sample: &WorldSample,
    ) -> Result<TensorId, TensorError> {
        let feats = self.frozen_features(sample);
        let input = tape.leaf(
            Tensor::new(
                vec![1, feats.len()],
                feats.iter().map(|&v| T::from_f64(v)).collect(),
            )
            .expect("frozen features finite"),
        );
        let h = tape.mlp2(
            input,
            names.id("face.proj.w1")?,
            names.id("face.proj.b1")?,
            names.id("face.proj.w2")?,
            names.id("face.proj.b2")?,
        )?;
        tape.reshape(h, vec![self.enc.k, self.enc.d_f])
    }
}

/// Trainable keypoint encoder + motion MLP over frozen prompt embeddings.
pub struct MotionEncoder {
    enc: EncoderConfig,
    world: WorldConfig,
}

impl MotionEncoder {
    pub fn new(enc: EncoderConfig, world: WorldConfig) -> Self {
        MotionEncoder { enc, world }
    }

    fn lm_input_width(&self) -> usize {
        2 * self.world.landmarks
    }

    pub fn init_params<T: Scalar>(
        &self,
        params: &mut ParamSet<T>,
        init: &mut Stream,
    ) -> Result<(), TensorError> {
        let e = &self.enc;
        insert_linear(
            params,
            "motion.lm.w1",
            "motion.lm.b1",
            self.lm_input_width(),
            e.landmark_hidden,
            init,
        )?;
        insert_linear(
            params,
            "motion.lm.w2",
            "motion.lm.b2",
            e.landmark_hidden,
            e.landmark_dim,
            init,
        )?;
        let concat_width = e.landmark_dim + 2 * e.d_f;
        insert_linear(
            params,
            "motion.mlp.w1",
            "motion.mlp.b1",
            concat_width,
            e.motion_hidden,
            init,
        )?;
        insert_linear(
            params,
            "motion.mlp.w2",
            "motion.mlp.b2",
            e.motion_hidden,
            e.c * e.d_f,
            init,
        )?;
        Ok(())
    }

    /// Motion descriptor `psi [c, d_f]` from landmarks and prompt classes:
    /// `MLP(concat(f_l, f_p))` reshaped into tokens.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        names: &NameTable,
        text: &TextEncoder,
        landmarks: &[(f64, f64)],
        expression: usize,
        orientation: usize,
    ) -> Result<TensorId, WorldError> {
        let extent = self.world.extent();
        let mut coords = Vec::with_capacity(self.lm_input_width());
        for &(x, y) in landmarks.iter().take(self.world.landmarks) {
            coords.push(T::from_f64(x / extent));
            coords.push(T::from_f64(y / extent));
        }
        let lm_in = tape
            .input(vec![1, self.lm_input_width()], coords)
            .map_err(wrap)?;
        let f_l = tape
            .mlp2(
                lm_in,
                names.id("motion.lm.w1").map_err(wrap)?,
                names.id("motion.lm.b1").map_err(wrap)?,
                names.id("motion.lm.w2").map_err(wrap)?,
                names.id("motion.lm.b2").map_err(wrap)?,
            )
            .map_err(wrap)?;
        let pair = text.prompt_pair(expression, orientation)?;
        let f_p = tape
            .input(
                vec![1, pair.len()],
                pair.iter().map(|&v| T::from_f64(v)).collect(),
            )
            .map_err(wrap)?;
        let cat = tape.concat_cols(f_l, f_p).map_err(wrap)?;
        let h = tape
            .mlp2(
                cat,
                names.id("motion.mlp.w1").map_err(wrap)?,
                names.id("motion.mlp.b1").map_err(wrap)?,
                names.id("motion.mlp.w2").map_err(wrap)?,
                names.id("motion.mlp.b2").map_err(wrap)?,
            )
            .map_err(wrap)?;
        tape.reshape(h, vec![self.enc.c, self.enc.d_f]).map_err(wrap)
    }
}

/// Insert a linear layer's weight and bias with 1/sqrt(fan_in) init.
pub fn insert_linear<T: Scalar>(
    params: &mut ParamSet<T>,
    w_name: &str,
    b_name: &str,
    d_in: usize,
    d_out: usize,
    init: &mut Stream,
) -> Result<(), TensorError> {
    insert_linear_scaled(params, w_name, b_name, d_in, d_out, 1.0, init)
}

/// `insert_linear` with an extra gain on the weight scale.
pub fn insert_linear_scaled<T: Scalar>(
    params: &mut ParamSet<T>,
    w_name: &str,
    b_name: &str,
    d_in: usize,
    d_out: usize,
    gain: f64,
    init: &mut Stream,
) -> Result<(), TensorError> {
    let scale = gain / (d_in as f64).sqrt();
    let w: Vec<T> = (0..d_in * d_out)
        .map(|_| T::from_f64(init.normal() * scale))
        .collect();
    params.insert(w_name, Tensor::new(vec![d_in, d_out], w)?)?;
    params.insert(b_name, Tensor::zeros(vec![d_out]))?;
    Ok(())
}

fn digest_f64(parts: &[&[f64]]) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    for part in parts {
        for v in *part {
            hasher.update(&v.to_le_bytes());
        }
    }
    hasher.finalize()
}
