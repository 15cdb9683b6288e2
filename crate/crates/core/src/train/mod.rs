//! Auto-decoder optimization: the decoder weights and the grid storage
//! (raw features, or soft indices plus codebooks) are fit jointly by Adam
//! against a task loss at a randomly drawn level of detail.

mod adam;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use adam::{Moments, BETA1, BETA2, EPSILON};

use crate::baselines::{random_index_grid, BaselineError};
use crate::data::{TrainingInputs, TrainingSet};
use crate::diffcore::{DiffError, Matrix, NodeId, Tape};
use crate::field::{DecoderMlp, FieldError, GraphInputs, NeuralField, RenderSettings, TaskKind};
use crate::grid::{build_pyramid, FeatureInit, GridConfig, GridError, LevelData, Occupancy};
use crate::vq::{ste_lookup, Codebook, VqConfig, VqError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became {loss} at step {step}")]
    Diverged { step: u64, loss: f64 },
    #[error("parameter {name} has non-finite values after step {step}")]
    NonFiniteParameter { step: u64, name: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// What the grid stores and which parts are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Raw feature rows.
    Uncompressed,
    /// Soft-index logits and codebooks through the straight-through lookup.
    Vqad,
    /// Frozen random indices; only the codebooks are learned.
    RandomIndex,
}

/// How the level of detail is drawn for each batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LodSampling {
    /// Level `ℓ` with probability `2^ℓ / (2^L − 1)`.
    Weighted,
    FinestOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Applied to grid features, logits and codebooks.
    pub grid_lr_multiplier: f64,
    pub seed: u64,
    pub lod_sampling: LodSampling,
    pub hidden: usize,
    /// Standard deviation of the initial grid values and codebooks.
    pub init_std: f64,
    /// Standard deviation of the initial soft-index logits.
    pub logit_init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Vqad,
            epochs: 500,
            batch_size: 4096,
            learning_rate: 1e-3,
            grid_lr_multiplier: 100.0,
            seed: 0,
            lod_sampling: LodSampling::Weighted,
            hidden: crate::field::DEFAULT_HIDDEN,
            init_std: 0.01,
            logit_init_std: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return bad("epochs, batch_size and hidden must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.grid_lr_multiplier.is_finite() && self.grid_lr_multiplier >= 1.0) {
            return bad("grid_lr_multiplier must be at least 1");
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0)
            || !(self.logit_init_std.is_finite() && self.logit_init_std >= 0.0)
        {
            return bad("initial standard deviations must be finite and non-negative");
        }
        Ok(())
    }
}

/// Draws a level in `0..levels`, level `ℓ` with weight `2^ℓ`.
pub fn sample_lod<R: Rng + ?Sized>(levels: usize, rng: &mut R) -> usize {
    assert!((1..=32).contains(&levels));
    let total = (1u64 << levels) - 1;
    let u = rng.random_range(0..total);
    (63 - (u + 1).leading_zeros()) as usize
}

/// A trainable tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    /// Decoder tensor `w1, b1, w2, b2` by position.
    Mlp(usize),
    Features(usize),
    Logits(usize),
    Codebook(usize),
}

impl Param {
    pub fn name(self) -> String {
        match self {
            Param::Mlp(i) => ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"][i].to_owned(),
            Param::Features(l) => format!("level{l}.features"),
            Param::Logits(l) => format!("level{l}.logits"),
            Param::Codebook(l) => format!("level{l}.codebook"),
        }
    }

    fn level(self) -> Option<usize> {
        match self {
            Param::Mlp(_) => None,
            Param::Features(l) | Param::Logits(l) | Param::Codebook(l) => Some(l),
        }
    }

    pub fn get(self, field: &NeuralField) -> &Matrix {
        match self {
            Param::Mlp(i) => field.decoder.parameters()[i],
            Param::Codebook(l) => field.codebooks[l].matrix(),
            Param::Features(l) | Param::Logits(l) => match &field.pyramid.level_data()[l] {
                LevelData::Features(m) | LevelData::SoftIndices(m) => m,
                LevelData::Indices(_) => unreachable!("baked indices are not parameters"),
            },
        }
    }

    pub fn get_mut(self, field: &mut NeuralField) -> &mut Matrix {
        match self {
            Param::Mlp(i) => field
                .decoder
                .parameters_mut()
                .into_iter()
                .nth(i)
                .expect("four tensors"),
            Param::Codebook(l) => field.codebooks[l].matrix_mut(),
            Param::Features(l) | Param::Logits(l) => match &mut field.pyramid.level_data_mut()[l] {
                LevelData::Features(m) | LevelData::SoftIndices(m) => m,
                LevelData::Indices(_) => unreachable!("baked indices are not parameters"),
            },
        }
    }
}

/// Storage kind of a model's grid, as a training mode.
pub fn mode_of(field: &NeuralField) -> TrainMode {
    match field.pyramid.level_data()[0] {
        LevelData::Features(_) => TrainMode::Uncompressed,
        LevelData::SoftIndices(_) => TrainMode::Vqad,
        LevelData::Indices(_) => TrainMode::RandomIndex,
    }
}

/// Trainable tensors of `field`, decoder first, then levels coarse to fine.
pub fn parameters(field: &NeuralField) -> Vec<Param> {
    let mut out: Vec<Param> = (0..4).map(Param::Mlp).collect();
    for l in 0..field.levels() {
        match mode_of(field) {
            TrainMode::Uncompressed => out.push(Param::Features(l)),
            TrainMode::Vqad => out.extend([Param::Logits(l), Param::Codebook(l)]),
            TrainMode::RandomIndex => out.push(Param::Codebook(l)),
        }
    }
    out
}

/// Fresh model for `mode`: grid values and codebooks from `N(0, init_std²)`,
/// random indices from `seed`.
pub fn init_field(
    config: &TrainConfig,
    task: TaskKind,
    grid: GridConfig,
    vq: VqConfig,
    occupancy: &Occupancy,
    render: RenderSettings,
) -> Result<NeuralField, TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = match config.mode {
        TrainMode::Uncompressed => FeatureInit::Normal {
            std: config.init_std,
        },
        _ => FeatureInit::Zeros,
    };
    let mut pyramid = build_pyramid(grid, occupancy, init, &mut rng)?;
    let k = grid.feature_dim;
    let mut codebooks = Vec::new();
    if config.mode != TrainMode::Uncompressed {
        vq.validate()?;
        let b = vq.bitwidth;
        let normal = Normal::new(0.0, config.logit_init_std)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let mut data = Vec::with_capacity(grid.levels);
        for l in 0..grid.levels {
            let m = pyramid.vertex_count(l);
            codebooks.push(Codebook::random(b, k, config.init_std, &mut rng)?);
            data.push(match config.mode {
                TrainMode::Vqad => {
                    let logits = (0..m * vq.codebook_rows())
                        .map(|_| normal.sample(&mut rng))
                        .collect();
                    LevelData::SoftIndices(Matrix::from_vec(m, vq.codebook_rows(), logits))
                }
                _ => {
                    LevelData::Indices(random_index_grid(m, b, config.seed.wrapping_add(l as u64))?)
                }
            });
        }
        pyramid.replace_data(data)?;
    }
    let decoder = DecoderMlp::random(task, k, config.hidden, &mut rng);
    Ok(NeuralField::new(task, pyramid, codebooks, decoder, render)?)
}

/// Per-level feature nodes on `tape`; trainable leaves are recorded in
/// `leaves`.
fn grid_nodes(
    field: &NeuralField,
    tape: &mut Tape,
    lod: usize,
    leaves: &mut Vec<(Param, NodeId)>,
) -> Vec<NodeId> {
    (0..=lod)
        .map(|l| match &field.pyramid.level_data()[l] {
            LevelData::Features(z) => {
                let id = tape.param(z.clone());
                leaves.push((Param::Features(l), id));
                id
            }
            LevelData::SoftIndices(c) => {
                let c = tape.param(c.clone());
                let d = tape.param(field.codebooks[l].matrix().clone());
                leaves.extend([(Param::Logits(l), c), (Param::Codebook(l), d)]);
                ste_lookup(tape, c, d)
            }
            LevelData::Indices(v) => {
                let d = tape.param(field.codebooks[l].matrix().clone());
                leaves.push((Param::Codebook(l), d));
                tape.gather(d, v.as_slice().to_vec())
            }
        })
        .collect()
}

/// Prediction node for a batch: decoder outputs for points, composited RGB
/// for rays.
fn prediction(
    field: &NeuralField,
    tape: &mut Tape,
    inputs: &GraphInputs,
    batch: &TrainingInputs,
    lod: usize,
    jitter: Option<&mut dyn RngCore>,
) -> Result<NodeId, FieldError> {
    match batch {
        TrainingInputs::Points { coords, .. } => {
            field.predict_points(tape, inputs, coords, None, lod)
        }
        TrainingInputs::Rays(rays) => {
            let out = field.predict_rays(tape, inputs, rays, lod, jitter)?;
            Ok(tape.columns(out, 0, 3))
        }
    }
}

/// Mean squared error of the hard-path model output against `targets` at
/// `lod`. Rays use midpoint samples.
pub fn batch_loss(
    field: &NeuralField,
    batch: &TrainingInputs,
    targets: &Matrix,
    lod: usize,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let inputs = field.constant_inputs(&mut tape, lod);
    let pred = prediction(field, &mut tape, &inputs, batch, lod, None)?;
    let loss = tape.mse(pred, targets.clone());
    Ok(tape.value(loss).as_scalar().expect("scalar loss"))
}

/// Optimizer state that outlives a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub steps: u64,
    pub moments: Vec<(String, Moments)>,
}

/// A finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub field: NeuralField,
    pub config: TrainConfig,
    /// Loss of every step.
    pub history: Vec<f64>,
    pub optimizer: OptimizerState,
}

impl TrainedModel {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().copied()
    }
}

/// Owns a model and its optimizer state during training.
pub struct Trainer {
    field: NeuralField,
    config: TrainConfig,
    params: Vec<Param>,
    moments: Vec<Moments>,
    rng: ChaCha8Rng,
    steps: u64,
    history: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, field: NeuralField) -> Result<Self, TrainError> {
        Self::resume(config, field, None)
    }

    /// Continues from saved moments; missing entries start fresh.
    pub fn resume(
        config: TrainConfig,
        field: NeuralField,
        state: Option<OptimizerState>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if mode_of(&field) != config.mode {
            return Err(TrainError::Config(format!(
                "model storage is {:?} but config asks for {:?}",
                mode_of(&field),
                config.mode
            )));
        }
        let params = parameters(&field);
        let steps = state.as_ref().map_or(0, |s| s.steps);
        let moments = params
            .iter()
            .map(|p| {
                let (r, c) = p.get(&field).shape();
                let saved = state
                    .as_ref()
                    .and_then(|s| s.moments.iter().find(|(n, _)| *n == p.name()))
                    .filter(|(_, m)| m.m.shape() == (r, c));
                saved.map_or_else(|| Moments::new(r, c), |(_, m)| m.clone())
            })
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a1e ^ steps);
        Ok(Self {
            field,
            config,
            params,
            moments,
            rng,
            steps,
            history: Vec::new(),
        })
    }

    pub fn field(&self) -> &NeuralField {
        &self.field
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Draws a level of detail per the configured policy.
    pub fn next_lod(&mut self) -> usize {
        match self.config.lod_sampling {
            LodSampling::Weighted => sample_lod(self.field.levels(), &mut self.rng),
            LodSampling::FinestOnly => self.field.levels() - 1,
        }
    }

    /// One Adam step on a batch at `lod`; returns the batch loss before the
    /// update.
    pub fn step(
        &mut self,
        batch: &TrainingInputs,
        targets: &Matrix,
        lod: usize,
    ) -> Result<f64, TrainError> {
        let lod = lod.min(self.field.levels() - 1);
        let mut tape = Tape::new();
        let mlp = self.field.decoder.push(&mut tape, true);
        let mut leaves = vec![
            (Param::Mlp(0), mlp.w1),
            (Param::Mlp(1), mlp.b1),
            (Param::Mlp(2), mlp.w2),
            (Param::Mlp(3), mlp.b2),
        ];
        let levels = grid_nodes(&self.field, &mut tape, lod, &mut leaves);
        let inputs = GraphInputs { levels, mlp };
        let pred = prediction(
            &self.field,
            &mut tape,
            &inputs,
            batch,
            lod,
            Some(&mut self.rng),
        )?;
        let loss_node = tape.mse(pred, targets.clone());
        let loss = tape.value(loss_node).as_scalar().expect("scalar loss");
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                step: self.steps,
                loss,
            });
        }
        let mut grads = tape.backward(loss_node)?;
        let base = self.config.learning_rate;
        let grid = base * self.config.grid_lr_multiplier;
        for (param, id) in leaves {
            let Some(g) = grads.take(id) else { continue };
            let slot = self
                .params
                .iter()
                .position(|p| *p == param)
                .expect("known parameter");
            let lr = if param.level().is_some() { grid } else { base };
            self.moments[slot].update(param.get_mut(&mut self.field), &g, lr);
        }
        self.steps += 1;
        self.history.push(loss);
        Ok(loss)
    }

    /// One shuffled pass over `set`; returns the mean batch loss.
    pub fn run_epoch(&mut self, set: &TrainingSet) -> Result<f64, TrainError> {
        if set.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(self.config.batch_size) {
            let (inputs, targets) = set.select(idx);
            let lod = self.next_lod();
            total += self.step(&inputs, &targets, lod)?;
            batches += 1;
        }
        for p in &self.params {
            if !p.get(&self.field).is_finite() {
                return Err(TrainError::NonFiniteParameter {
                    step: self.steps,
                    name: p.name(),
                });
            }
        }
        Ok(total / batches as f64)
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        OptimizerState {
            steps: self.steps,
            moments: self
                .params
                .iter()
                .map(|p| p.name())
                .zip(self.moments.iter().cloned())
                .collect(),
        }
    }

    pub fn finish(self) -> TrainedModel {
        let optimizer = self.optimizer_state();
        TrainedModel {
            field: self.field,
            config: self.config,
            history: self.history,
            optimizer,
        }
    }
}

/// Initializes a model and trains it for `config.epochs` passes over `set`.
pub fn train(
    config: &TrainConfig,
    set: &TrainingSet,
    grid: GridConfig,
    vq: VqConfig,
    occupancy: &Occupancy,
    render: RenderSettings,
) -> Result<TrainedModel, TrainError> {
    let field = init_field(config, set.task, grid, vq, occupancy, render)?;
    if set.targets.cols() != set.task.output_dim().min(3) {
        return Err(TrainError::Config("targets do not match the task".into()));
    }
    let mut trainer = Trainer::new(config.clone(), field)?;
    for epoch in 0..config.epochs {
        let loss = trainer.run_epoch(set)?;
        log::debug!("epoch {epoch}: loss {loss:.6}");
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{bundled_image, Dataset};
    use crate::diffcore::{grad_check, ForwardMode};
    use crate::eval::psnr;

    fn tiny_grid() -> GridConfig {
        GridConfig {
            levels: 2,
            base_resolution: 4,
            feature_dim: 4,
            dim: 2,
        }
    }

    #[test]
    fn lod_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_lod(4, &mut rng)] += 1;
        }
        for (l, c) in counts.iter().enumerate() {
            let want = (1 << l) as f64 / 15.0;
            assert!((*c as f64 / n as f64 - want).abs() < 0.01, "{counts:?}");
        }
        let mut two = [0usize; 2];
        for _ in 0..30_000 {
            two[sample_lod(2, &mut rng)] += 1;
        }
        assert!((two[0] as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.01);
        assert_eq!(sample_lod(1, &mut rng), 0);
    }

    #[test]
    fn loss_arithmetic() {
        let cfg = TrainConfig {
            mode: TrainMode::Uncompressed,
            hidden: 4,
            ..TrainConfig::default()
        };
        let grid = GridConfig {
            levels: 1,
            base_resolution: 2,
            feature_dim: 1,
            dim: 3,
        };
        let mut field = init_field(
            &cfg,
            TaskKind::Sdf,
            grid,
            VqConfig::default(),
            &Occupancy::Dense,
            RenderSettings::default(),
        )
        .unwrap();
        for m in field.decoder.parameters_mut() {
            m.data_mut().fill(0.0);
        }
        field.decoder.b2.set(0, 0, 0.3);
        let batch = TrainingInputs::Points {
            coords: vec![0.1, 0.2, 0.3],
            dim: 3,
        };
        let loss = batch_loss(&field, &batch, &Matrix::scalar(0.5), 0).unwrap();
        assert!((loss - 0.04).abs() < 1e-15);
        assert_eq!(
            batch_loss(&field, &batch, &Matrix::scalar(0.3), 0).unwrap(),
            0.0
        );
    }

    fn image_set(size: usize) -> TrainingSet {
        let full = bundled_image();
        let small = crate::raster::Image::from_fn(size, size, |x, y| {
            full.get(x * 128 / size, y * 128 / size)
        });
        Dataset::Image(small).training_set()
    }

    #[test]
    fn zero_rate_step_changes_nothing() {
        for mode in [
            TrainMode::Uncompressed,
            TrainMode::Vqad,
            TrainMode::RandomIndex,
        ] {
            let cfg = TrainConfig {
                mode,
                learning_rate: 0.0,
                hidden: 8,
                ..TrainConfig::default()
            };
            let set = image_set(16);
            let field = init_field(
                &cfg,
                TaskKind::Image,
                tiny_grid(),
                VqConfig { bitwidth: 3 },
                &Occupancy::Dense,
                Default::default(),
            )
            .unwrap();
            let mut t = Trainer::new(cfg, field.clone()).unwrap();
            t.step(&set.inputs, &set.targets, 1).unwrap();
            assert_eq!(t.field(), &field);
        }
    }

    #[test]
    fn training_beats_initialization_and_is_deterministic() {
        let set = image_set(32);
        let cfg = TrainConfig {
            mode: TrainMode::Uncompressed,
            epochs: 60,
            batch_size: 256,
            hidden: 32,
            ..TrainConfig::default()
        };
        let grid = GridConfig {
            levels: 3,
            base_resolution: 4,
            feature_dim: 4,
            dim: 2,
        };
        let run = || {
            train(
                &cfg,
                &set,
                grid,
                VqConfig::default(),
                &Occupancy::Dense,
                Default::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let init = init_field(
            &cfg,
            TaskKind::Image,
            grid,
            VqConfig::default(),
            &Occupancy::Dense,
            Default::default(),
        )
        .unwrap();
        let target = crate::raster::Image::from_matrix(32, 32, &set.targets).unwrap();
        let render = |f: &NeuralField| {
            let TrainingInputs::Points { coords, .. } = &set.inputs else {
                unreachable!()
            };
            crate::raster::Image::from_matrix(32, 32, &f.decode_points(coords, None, 2).unwrap())
                .unwrap()
        };
        let before = psnr(&render(&init), &target).unwrap();
        let after = psnr(&render(&a.field), &target).unwrap();
        assert!(after > before + 3.0, "{before} -> {after}");
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let set = image_set(8);
        let cfg = TrainConfig {
            mode: TrainMode::Vqad,
            hidden: 8,
            ..TrainConfig::default()
        };
        let field = init_field(
            &cfg,
            TaskKind::Image,
            tiny_grid(),
            VqConfig { bitwidth: 2 },
            &Occupancy::Dense,
            Default::default(),
        )
        .unwrap();
        let idx: Vec<usize> = (0..set.len()).collect();
        let rev: Vec<usize> = idx.iter().rev().copied().collect();
        let (a, ta) = set.select(&idx);
        let (b, tb) = set.select(&rev);
        let la = batch_loss(&field, &a, &ta, 1).unwrap();
        let lb = batch_loss(&field, &b, &tb, 1).unwrap();
        assert!((la - lb).abs() < 1e-14);
    }

    #[test]
    fn codebook_gradient_matches_soft_path() {
        // Saturated logits make the soft and hard paths coincide, so the
        // straight-through gradient must equal the finite difference of the
        // soft-path loss.
        let cfg = TrainConfig {
            mode: TrainMode::Vqad,
            hidden: 6,
            ..TrainConfig::default()
        };
        let mut field = init_field(
            &cfg,
            TaskKind::Image,
            tiny_grid(),
            VqConfig { bitwidth: 2 },
            &Occupancy::Dense,
            Default::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for l in 0..2 {
            let c = Param::Logits(l).get_mut(&mut field);
            for r in 0..c.rows() {
                let hot = rng.random_range(0..c.cols());
                for j in 0..c.cols() {
                    c.set(r, j, if j == hot { 40.0 } else { 0.0 });
                }
            }
            let d = Param::Codebook(l).get_mut(&mut field);
            for v in d.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let coords: Vec<f64> = (0..10)
            .flat_map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let targets = Matrix::from_vec(10, 3, (0..30).map(|_| rng.random::<f64>()).collect());
        let point = vec![
            field.codebooks[0].matrix().clone(),
            field.codebooks[1].matrix().clone(),
        ];
        let report = grad_check(
            |tape, leaves| {
                assert!(matches!(tape.mode(), ForwardMode::Hard | ForwardMode::Soft));
                let mlp = field.decoder.push(tape, false);
                let levels = (0..2)
                    .map(|l| {
                        let LevelData::SoftIndices(c) = &field.pyramid.level_data()[l] else {
                            unreachable!()
                        };
                        let c = tape.constant(c.clone());
                        ste_lookup(tape, c, leaves[l])
                    })
                    .collect();
                let inputs = GraphInputs { levels, mlp };
                let batch = TrainingInputs::Points {
                    coords: coords.clone(),
                    dim: 2,
                };
                let pred = prediction(&field, tape, &inputs, &batch, 1, None).unwrap();
                tape.mse(pred, targets.clone())
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
