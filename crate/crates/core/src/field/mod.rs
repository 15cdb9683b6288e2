//! The conditioned decoder and the forward maps that lift it into the
//! supervision domain: direct image sampling, SDF sampling and volume
//! rendering.

mod render;

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use render::{ray_samples, Ray, RaySample};

use crate::diffcore::{Matrix, NodeId, Tape};
use crate::grid::{FeatureGridPyramid, GridError, LevelData};
use crate::vq::{argmax, bake, lookup_rows, Codebook, VqError};

/// Width of the view-direction embedding.
pub const VIEW_EMBEDDING_DIM: usize = 27;
pub const DEFAULT_HIDDEN: usize = 128;
const PE_FREQUENCIES: usize = 4;
/// Points decoded per tape when evaluating large batches.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error("the radiance head needs a view direction")]
    MissingViewDirection,
    #[error("view directions are only accepted by the radiance head")]
    UnexpectedViewDirection,
    #[error("ray direction is zero or not finite")]
    DegenerateRay,
    #[error("{0}")]
    Mismatch(String),
}

/// Forward map, fixed per model. Also selects the decoder head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// 2D coordinates to RGB.
    Image,
    /// 3D coordinates to signed distance.
    Sdf,
    /// 3D coordinates and view direction to density and RGB, rendered
    /// along rays.
    Radiance,
}

impl TaskKind {
    pub fn code(self) -> u8 {
        match self {
            TaskKind::Image => 0,
            TaskKind::Sdf => 1,
            TaskKind::Radiance => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TaskKind::Image),
            1 => Some(TaskKind::Sdf),
            2 => Some(TaskKind::Radiance),
            _ => None,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Image => 3,
            TaskKind::Sdf => 1,
            TaskKind::Radiance => 4,
        }
    }

    pub fn uses_view_direction(self) -> bool {
        self == TaskKind::Radiance
    }

    pub fn spatial_dim(self) -> usize {
        match self {
            TaskKind::Image => 2,
            _ => 3,
        }
    }

    pub fn mlp_input_dim(self, feature_dim: usize) -> usize {
        feature_dim
            + if self.uses_view_direction() {
                VIEW_EMBEDDING_DIM
            } else {
                0
            }
    }
}

/// `[d, sin(2^j π d_c), cos(2^j π d_c)]` for each component `c`, then each
/// frequency `j = 0..4`.
pub fn positional_encode(dir: [f64; 3]) -> [f64; VIEW_EMBEDDING_DIM] {
    let mut out = [0.0; VIEW_EMBEDDING_DIM];
    out[..3].copy_from_slice(&dir);
    let mut i = 3;
    for &d in &dir {
        for j in 0..PE_FREQUENCIES {
            let arg = (1u32 << j) as f64 * PI * d;
            out[i] = arg.sin();
            out[i + 1] = arg.cos();
            i += 2;
        }
    }
    out
}

/// Tape handles for the decoder weights.
#[derive(Debug, Clone, Copy)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Single-hidden-layer ReLU network shared across every LOD.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMlp {
    task: TaskKind,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl DecoderMlp {
    pub fn zeros(task: TaskKind, feature_dim: usize, hidden: usize) -> Self {
        let input = task.mlp_input_dim(feature_dim);
        let out = task.output_dim();
        Self {
            task,
            w1: Matrix::zeros(input, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, out),
            b2: Matrix::zeros(1, out),
        }
    }

    /// Weights and biases from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn random<R: Rng + ?Sized>(
        task: TaskKind,
        feature_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut mlp = Self::zeros(task, feature_dim, hidden);
        let s1 = 1.0 / (mlp.w1.rows() as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        for (m, s) in [
            (&mut mlp.w1, s1),
            (&mut mlp.b1, s1),
            (&mut mlp.w2, s2),
            (&mut mlp.b2, s2),
        ] {
            for v in m.data_mut() {
                *v = rng.random_range(-s..s);
            }
        }
        mlp
    }

    /// Builds from explicit matrices, checking shapes against `task`.
    pub fn from_parts(
        task: TaskKind,
        w1: Matrix,
        b1: Matrix,
        w2: Matrix,
        b2: Matrix,
    ) -> Result<Self, FieldError> {
        let hidden = w1.cols();
        let ok = b1.shape() == (1, hidden)
            && w2.shape() == (hidden, task.output_dim())
            && b2.shape() == (1, task.output_dim())
            && w1.rows() > task.mlp_input_dim(0);
        if !ok {
            return Err(FieldError::Mismatch(format!(
                "decoder weights do not fit a {task:?} head"
            )));
        }
        Ok(Self {
            task,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    /// Layer widths `[input, hidden, output]`.
    pub fn widths(&self) -> [usize; 3] {
        [self.input_dim(), self.hidden_dim(), self.output_dim()]
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn parameters(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn parameters_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn push(&self, tape: &mut Tape, trainable: bool) -> MlpNodes {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        MlpNodes {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    /// Network plus head activation on `input` (`n × input_dim`).
    pub fn forward(task: TaskKind, tape: &mut Tape, nodes: MlpNodes, input: NodeId) -> NodeId {
        let h = tape.affine(input, nodes.w1, Some(nodes.b1));
        let h = tape.relu(h);
        let raw = tape.affine(h, nodes.w2, Some(nodes.b2));
        match task {
            TaskKind::Image => tape.sigmoid(raw),
            TaskKind::Sdf => raw,
            TaskKind::Radiance => {
                let density = tape.columns(raw, 0, 1);
                let density = tape.relu(density);
                let rgb = tape.columns(raw, 1, 3);
                let rgb = tape.sigmoid(rgb);
                tape.concat_cols(density, rgb)
            }
        }
    }
}

/// Rendering parameters for the volume forward map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub samples_per_cell: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            samples_per_cell: 16,
        }
    }
}

/// Per-level feature nodes plus decoder nodes: everything a prediction
/// graph reads.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub levels: Vec<NodeId>,
    pub mlp: MlpNodes,
}

/// Color and opacity of one rendered ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayColor {
    pub rgb: [f64; 3],
    pub opacity: f64,
}

/// A complete model: grid pyramid, per-level codebooks (empty when the
/// grid stores raw features) and the shared decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralField {
    pub task: TaskKind,
    pub pyramid: FeatureGridPyramid,
    pub codebooks: Vec<Codebook>,
    pub decoder: DecoderMlp,
    pub render: RenderSettings,
}

impl NeuralField {
    pub fn new(
        task: TaskKind,
        pyramid: FeatureGridPyramid,
        codebooks: Vec<Codebook>,
        decoder: DecoderMlp,
        render: RenderSettings,
    ) -> Result<Self, FieldError> {
        let field = Self {
            task,
            pyramid,
            codebooks,
            decoder,
            render,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let cfg = self.pyramid.config();
        if cfg.dim != self.task.spatial_dim() {
            return Err(FieldError::Mismatch(format!(
                "{:?} needs a {}D grid, got {}D",
                self.task,
                self.task.spatial_dim(),
                cfg.dim
            )));
        }
        if self.decoder.task() != self.task
            || self.decoder.input_dim() != self.task.mlp_input_dim(cfg.feature_dim)
        {
            return Err(FieldError::Mismatch(
                "decoder does not match task and feature width".into(),
            ));
        }
        let needs_codebooks = !matches!(self.pyramid.level_data()[0], LevelData::Features(_));
        if needs_codebooks {
            if self.codebooks.len() != cfg.levels {
                return Err(FieldError::Mismatch(format!(
                    "{} codebooks for {} levels",
                    self.codebooks.len(),
                    cfg.levels
                )));
            }
            for (l, (cb, data)) in self
                .codebooks
                .iter()
                .zip(self.pyramid.level_data())
                .enumerate()
            {
                let width_ok = match data {
                    LevelData::SoftIndices(c) => c.cols() == cb.len(),
                    LevelData::Indices(v) => v.bitwidth() == cb.bitwidth(),
                    LevelData::Features(_) => false,
                };
                if cb.feature_dim() != cfg.feature_dim || !width_ok {
                    return Err(FieldError::Mismatch(format!(
                        "codebook {l} does not fit its level"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.pyramid.config().levels
    }

    /// True when levels hold indices (soft or baked) into codebooks.
    pub fn is_quantized(&self) -> bool {
        !self.codebooks.is_empty()
    }

    /// Feature rows for one level; quantized levels resolve through the
    /// hard lookup.
    pub fn level_features(&self, level: usize) -> Matrix {
        match &self.pyramid.level_data()[level] {
            LevelData::Features(z) => z.clone(),
            LevelData::Indices(v) => lookup_rows(v, &self.codebooks[level]),
            LevelData::SoftIndices(c) => {
                let cb = &self.codebooks[level];
                let mut out = Matrix::zeros(c.rows(), cb.feature_dim());
                for r in 0..c.rows() {
                    out.row_mut(r).copy_from_slice(cb.row(argmax(c.row(r))));
                }
                out
            }
        }
    }

    /// Records resolved features for levels `0..=lod` and the decoder as
    /// constants.
    pub fn constant_inputs(&self, tape: &mut Tape, lod: usize) -> GraphInputs {
        let levels = (0..=lod.min(self.levels() - 1))
            .map(|l| tape.constant(self.level_features(l)))
            .collect();
        GraphInputs {
            levels,
            mlp: self.decoder.push(tape, false),
        }
    }

    /// Summed interpolated features at `x` over levels `0..=lod`.
    pub fn interpolate(&self, x: &[f64], lod: usize) -> Result<Vec<f64>, FieldError> {
        let features: Vec<Matrix> = (0..=lod.min(self.levels() - 1))
            .map(|l| self.level_features(l))
            .collect();
        Ok(self.pyramid.interpolate_with(&features, x, lod)?)
    }

    /// Decoder outputs for `n` points (`coords` is `n × dim`, `dirs` is
    /// `n × 3` for the radiance head) on an existing tape.
    pub fn predict_points(
        &self,
        tape: &mut Tape,
        inputs: &GraphInputs,
        coords: &[f64],
        dirs: Option<&[f64]>,
        lod: usize,
    ) -> Result<NodeId, FieldError> {
        match (self.task.uses_view_direction(), dirs.is_some()) {
            (true, false) => return Err(FieldError::MissingViewDirection),
            (false, true) => return Err(FieldError::UnexpectedViewDirection),
            _ => {}
        }
        let dim = self.pyramid.config().dim;
        let n = coords.len() / dim;
        let fan = self.pyramid.config().corners();
        let mut rows: Vec<Vec<u32>> = vec![Vec::with_capacity(n * fan); lod + 1];
        let mut weights: Vec<Vec<f64>> = vec![Vec::with_capacity(n * fan); lod + 1];
        for x in coords.chunks_exact(dim) {
            for (l, st) in self.pyramid.stencils(x, lod)?.into_iter().enumerate() {
                match st {
                    Some(st) => {
                        rows[l].extend_from_slice(&st.rows[..fan]);
                        weights[l].extend_from_slice(&st.weights[..fan]);
                    }
                    None => {
                        rows[l].extend(std::iter::repeat_n(crate::diffcore::SKIP_ROW, fan));
                        weights[l].extend(std::iter::repeat_n(0.0, fan));
                    }
                }
            }
        }
        let mut features: Option<NodeId> = None;
        for (l, (r, w)) in rows.into_iter().zip(weights).enumerate() {
            let level = tape.blend(inputs.levels[l], fan, r, w);
            features = Some(match features {
                None => level,
                Some(acc) => tape.add(acc, level),
            });
        }
        let mut input = features.expect("at least one level");
        if let Some(dirs) = dirs {
            let mut emb = Matrix::zeros(n, VIEW_EMBEDDING_DIM);
            for (i, d) in dirs.chunks_exact(3).enumerate() {
                emb.row_mut(i)
                    .copy_from_slice(&positional_encode([d[0], d[1], d[2]]));
            }
            let emb = tape.constant(emb);
            input = tape.concat_cols(input, emb);
        }
        Ok(DecoderMlp::forward(self.task, tape, inputs.mlp, input))
    }

    /// Rendered `[R, G, B, opacity]` rows for `rays` on an existing tape.
    pub fn predict_rays(
        &self,
        tape: &mut Tape,
        inputs: &GraphInputs,
        rays: &[Ray],
        lod: usize,
        mut jitter: Option<&mut dyn RngCore>,
    ) -> Result<NodeId, FieldError> {
        if self.task != TaskKind::Radiance {
            return Err(FieldError::Mismatch(
                "volume rendering needs the radiance head".into(),
            ));
        }
        let level0 = self.pyramid.level(0);
        let mut offsets = vec![0];
        let mut coords = Vec::new();
        let mut dirs = Vec::new();
        let mut deltas = Vec::new();
        for ray in rays {
            for s in ray_samples(
                level0,
                ray,
                self.render.samples_per_cell,
                jitter.as_deref_mut(),
            ) {
                coords.extend(ray.at(s.t).map(|v| v.clamp(-1.0, 1.0)));
                dirs.extend(ray.direction());
                deltas.push(s.delta);
            }
            offsets.push(deltas.len());
        }
        let out = self.predict_points(tape, inputs, &coords, Some(&dirs), lod)?;
        let density = tape.columns(out, 0, 1);
        let rgb = tape.columns(out, 1, 3);
        Ok(tape.composite(density, rgb, offsets, deltas, self.render.background))
    }

    /// Decoder output at a single point.
    pub fn decode_point(
        &self,
        x: &[f64],
        dir: Option<[f64; 3]>,
        lod: usize,
    ) -> Result<Vec<f64>, FieldError> {
        let dirs = dir.map(|d| d.to_vec());
        Ok(self.decode_points(x, dirs.as_deref(), lod)?.into_vec())
    }

    /// Decoder outputs for many points, evaluated in independent chunks.
    pub fn decode_points(
        &self,
        coords: &[f64],
        dirs: Option<&[f64]>,
        lod: usize,
    ) -> Result<Matrix, FieldError> {
        let dim = self.pyramid.config().dim;
        let n = coords.len() / dim;
        let out_dim = self.task.output_dim();
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(EVAL_CHUNK)
            .map(|s| (s, (s + EVAL_CHUNK).min(n)))
            .collect();
        let parts = chunks
            .par_iter()
            .map(|&(s, e)| {
                let mut tape = Tape::new();
                let inputs = self.constant_inputs(&mut tape, lod);
                let d = dirs.map(|d| &d[s * 3..e * 3]);
                let node =
                    self.predict_points(&mut tape, &inputs, &coords[s * dim..e * dim], d, lod)?;
                Ok(tape.value(node).clone())
            })
            .collect::<Result<Vec<Matrix>, FieldError>>()?;
        let mut data = Vec::with_capacity(n * out_dim);
        for p in parts {
            data.extend(p.into_vec());
        }
        Ok(Matrix::from_vec(n, out_dim, data))
    }

    /// Renders rays with midpoint samples; rows are `[R, G, B, opacity]`.
    pub fn render_rays(&self, rays: &[Ray], lod: usize) -> Result<Matrix, FieldError> {
        let chunk = 256;
        let parts = rays
            .par_chunks(chunk)
            .map(|batch| {
                let mut tape = Tape::new();
                let inputs = self.constant_inputs(&mut tape, lod);
                let node = self.predict_rays(&mut tape, &inputs, batch, lod, None)?;
                Ok(tape.value(node).clone())
            })
            .collect::<Result<Vec<Matrix>, FieldError>>()?;
        let mut data = Vec::with_capacity(rays.len() * 4);
        for p in parts {
            data.extend(p.into_vec());
        }
        Ok(Matrix::from_vec(rays.len(), 4, data))
    }

    pub fn render_ray(&self, ray: &Ray, lod: usize) -> Result<RayColor, FieldError> {
        let m = self.render_rays(std::slice::from_ref(ray), lod)?;
        let row = m.row(0);
        Ok(RayColor {
            rgb: [row[0], row[1], row[2]],
            opacity: row[3],
        })
    }

    /// Copy restricted to the first `levels` levels.
    pub fn truncated(&self, levels: usize) -> Self {
        let pyramid = self.pyramid.truncated(levels);
        let keep = pyramid.config().levels;
        Self {
            task: self.task,
            codebooks: self.codebooks.iter().take(keep).cloned().collect(),
            pyramid,
            decoder: self.decoder.clone(),
            render: self.render,
        }
    }

    /// Copy with every soft-index row replaced by its argmax. Other storage
    /// kinds are returned unchanged.
    pub fn baked(&self) -> Result<Self, FieldError> {
        let mut out = self.clone();
        let data = self
            .pyramid
            .level_data()
            .iter()
            .zip(&self.codebooks)
            .map(|(d, cb)| match d {
                LevelData::SoftIndices(c) => Ok(LevelData::Indices(bake(c, cb.bitwidth())?)),
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>, VqError>>()?;
        if self.is_quantized() {
            out.pyramid.replace_data(data)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{composite_samples, grad_check};
    use crate::grid::{build_pyramid, FeatureInit, GridConfig, Occupancy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(task: TaskKind, k: usize, init: FeatureInit, zero_mlp: bool) -> NeuralField {
        let cfg = GridConfig {
            levels: 2,
            base_resolution: 2,
            feature_dim: k,
            dim: task.spatial_dim(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pyramid = build_pyramid(cfg, &Occupancy::Dense, init, &mut rng).unwrap();
        let decoder = if zero_mlp {
            DecoderMlp::zeros(task, k, 16)
        } else {
            DecoderMlp::random(task, k, 16, &mut rng)
        };
        NeuralField::new(task, pyramid, vec![], decoder, RenderSettings::default()).unwrap()
    }

    #[test]
    fn encoding_width_and_values() {
        let z = positional_encode([0.0; 3]);
        assert_eq!(z.len(), 27);
        for c in 0..3 {
            for j in 0..4 {
                assert_eq!(z[3 + c * 8 + j * 2], 0.0);
                assert_eq!(z[3 + c * 8 + j * 2 + 1], 1.0);
            }
        }
        let x = positional_encode([1.0, 0.0, 0.0]);
        assert!(x[3].abs() < 1e-6);
    }

    #[test]
    fn radiance_input_width_at_k16() {
        assert_eq!(TaskKind::Radiance.mlp_input_dim(16), 43);
        let mlp = DecoderMlp::zeros(TaskKind::Radiance, 16, 128);
        assert_eq!(mlp.widths(), [43, 128, 4]);
    }

    #[test]
    fn zero_model_radiance_output() {
        let f = field(TaskKind::Radiance, 4, FeatureInit::Zeros, true);
        let out = f
            .decode_point(&[0.1, 0.2, -0.3], Some([0.0, 0.0, 1.0]), 1)
            .unwrap();
        assert_eq!(out, vec![0.0, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn radiance_head_ranges() {
        let f = field(
            TaskKind::Radiance,
            4,
            FeatureInit::Normal { std: 1.0 },
            false,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = f.decode_point(&x, Some([0.0, 1.0, 0.0]), 1).unwrap();
            assert_eq!(out.len(), 4);
            assert!(out[0] >= 0.0);
            assert!(out[1..].iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn view_direction_rules() {
        let rad = field(TaskKind::Radiance, 2, FeatureInit::Zeros, true);
        assert!(matches!(
            rad.decode_point(&[0.0; 3], None, 0),
            Err(FieldError::MissingViewDirection)
        ));
        let img = field(TaskKind::Image, 2, FeatureInit::Zeros, true);
        assert!(matches!(
            img.decode_point(&[0.0; 2], Some([1.0, 0.0, 0.0]), 0),
            Err(FieldError::UnexpectedViewDirection)
        ));
        assert!(matches!(
            img.decode_point(&[3.0, 0.0], None, 0),
            Err(FieldError::Grid(GridError::OutsideDomain { .. }))
        ));
    }

    #[test]
    fn zero_density_renders_background() {
        let mut f = field(TaskKind::Radiance, 2, FeatureInit::Zeros, true);
        f.render.background = [0.2, 0.3, 0.4];
        f.render.samples_per_cell = 4;
        let ray = Ray::new([0.0, 0.0, -3.0], [0.0, 0.1, 1.0], 0.0, 10.0).unwrap();
        let c = f.render_ray(&ray, 1).unwrap();
        assert_eq!(c.opacity, 0.0);
        assert_eq!(c.rgb, [0.2, 0.3, 0.4]);
    }

    #[test]
    fn saturated_sample_shows_its_color() {
        let r = composite_samples(&[50.0], &[0.1, 0.7, 0.3], &[1.0], [1.0, 1.0, 1.0]);
        for (a, b) in r.rgb.iter().zip([0.1, 0.7, 0.3]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((r.opacity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn coarse_lod_equals_zeroed_finer_levels() {
        let mut f = field(TaskKind::Image, 3, FeatureInit::Normal { std: 0.5 }, false);
        let x = [0.31, -0.62];
        let coarse = f.decode_point(&x, None, 0).unwrap();
        if let LevelData::Features(m) = &mut f.pyramid.level_data_mut()[1] {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        assert_eq!(coarse, f.decode_point(&x, None, 1).unwrap());
    }

    #[test]
    fn render_gradient_wrt_features_matches_fd() {
        let f = field(
            TaskKind::Radiance,
            2,
            FeatureInit::Normal { std: 0.5 },
            false,
        );
        let mut f = f;
        f.render.samples_per_cell = 2;
        let rays = vec![
            Ray::new([-2.0, 0.3, 0.2], [1.0, -0.1, 0.05], 0.0, 5.0).unwrap(),
            Ray::new([0.1, -2.0, -0.4], [0.05, 1.0, 0.2], 0.0, 5.0).unwrap(),
        ];
        let z0 = f.level_features(0);
        let z1 = f.level_features(1);
        let target = Matrix::filled(2, 4, 0.3);
        let report = grad_check(
            |t, p| {
                let inputs = GraphInputs {
                    levels: vec![p[0], p[1]],
                    mlp: f.decoder.push(t, false),
                };
                let out = f.predict_rays(t, &inputs, &rays, 1, None).unwrap();
                t.mse(out, target.clone())
            },
            &[z0, z1],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
