//! Multiresolution occupancy-masked vertex grids.
//!
//! Level `ℓ` has `R_ℓ = R_0·2^ℓ` cells per axis over the cube `[−1,1]^d`.
//! Only corners of occupied cells carry a row of storage; rows are ordered
//! by lattice index (x fastest), so the occupancy bitmap alone determines
//! the row layout. Lookups sum the d-linear interpolation of every level up
//! to the requested LOD; a level whose containing cell is unoccupied
//! contributes nothing, which makes missing finer levels a no-op.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{blend_row, Matrix, SKIP_ROW};
use crate::vq::IndexGrid;

const NO_ROW: u32 = u32::MAX;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(String),
    #[error("resolution {resolution} in {dim}D overflows the supported grid size")]
    ResolutionOverflow { resolution: u64, dim: usize },
    #[error("occupancy selects no cells")]
    EmptyOccupancy,
    #[error("point {point:?} is outside the level-0 occupied domain")]
    OutsideDomain { point: Vec<f64> },
    #[error("lod {lod} out of range for a {levels}-level pyramid")]
    LodOutOfRange { lod: usize, levels: usize },
    #[error("expected a {expected}-dimensional point, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("level storage mismatch: {0}")]
    StorageMismatch(String),
}

/// Shape of a feature-grid pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub levels: usize,
    /// Cells per axis at the coarsest level.
    pub base_resolution: u32,
    pub feature_dim: usize,
    pub dim: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_resolution: 8,
            feature_dim: 8,
            dim: 2,
        }
    }
}

impl GridConfig {
    pub fn resolution(&self, level: usize) -> u32 {
        self.base_resolution << level
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.levels == 0 || self.levels > 16 {
            return Err(GridError::InvalidConfig(format!(
                "levels must be in 1..=16, got {}",
                self.levels
            )));
        }
        if self.feature_dim == 0 || self.feature_dim > 255 {
            return Err(GridError::InvalidConfig(format!(
                "feature_dim must be in 1..=255, got {}",
                self.feature_dim
            )));
        }
        if self.dim != 2 && self.dim != 3 {
            return Err(GridError::InvalidConfig(format!(
                "dim must be 2 or 3, got {}",
                self.dim
            )));
        }
        if self.base_resolution == 0 {
            return Err(GridError::InvalidConfig(
                "base_resolution must be positive".into(),
            ));
        }
        let finest = u64::from(self.base_resolution) << (self.levels - 1);
        // Resolutions are stored as u16 and vertex rows as u32.
        let vertices = (finest + 1).checked_pow(self.dim as u32);
        if finest > u64::from(u16::MAX) || vertices.is_none_or(|v| v >= u64::from(NO_ROW)) {
            return Err(GridError::ResolutionOverflow {
                resolution: finest,
                dim: self.dim,
            });
        }
        Ok(())
    }

    pub fn corners(&self) -> usize {
        1 << self.dim
    }
}

/// Region that decides which finest-level cells are occupied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Occupancy {
    Dense,
    /// Cells overlapping an axis-aligned box.
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
    /// Cells overlapping the interior of a sphere.
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Cells containing at least one point.
    Points {
        points: Vec<[f64; 3]>,
    },
}

impl Occupancy {
    fn cell_occupied(&self, lo: &[f64; 3], hi: &[f64; 3], dim: usize) -> bool {
        match self {
            Occupancy::Dense => true,
            Occupancy::Box { min, max } => (0..dim).all(|a| lo[a] <= max[a] && hi[a] >= min[a]),
            Occupancy::Sphere { center, radius } => {
                let d2: f64 = (0..dim)
                    .map(|a| {
                        let nearest = center[a].clamp(lo[a], hi[a]);
                        (nearest - center[a]).powi(2)
                    })
                    .sum();
                d2 < radius * radius
            }
            Occupancy::Points { .. } => unreachable!("point occupancy is rasterized directly"),
        }
    }
}

/// How fresh feature rows are initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureInit {
    Zeros,
    Normal { std: f64 },
}

/// Interpolation footprint of one point in one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub rows: [u32; 8],
    pub weights: [f64; 8],
}

/// One resolution level: occupancy bitmap and vertex row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLevel {
    resolution: u32,
    dim: usize,
    occupancy: Vec<u8>,
    occupied_cells: usize,
    vertices: Vec<u32>,
    vertex_rows: Vec<u32>,
}

impl GridLevel {
    /// Builds the row layout from a packed occupancy bitmap (cells row-major,
    /// x fastest, LSB-first within each byte).
    pub fn from_occupancy(
        resolution: u32,
        dim: usize,
        occupancy: Vec<u8>,
    ) -> Result<Self, GridError> {
        let r = resolution as usize;
        let cells = r.pow(dim as u32);
        if occupancy.len() != cells.div_ceil(8) {
            return Err(GridError::StorageMismatch(format!(
                "occupancy bitmap has {} bytes, expected {}",
                occupancy.len(),
                cells.div_ceil(8)
            )));
        }
        let side = r + 1;
        let mut marked = vec![false; side.pow(dim as u32)];
        let mut occupied_cells = 0;
        for cell in 0..cells {
            if occupancy[cell / 8] >> (cell % 8) & 1 == 0 {
                continue;
            }
            occupied_cells += 1;
            let base = cell_coords(cell, r, dim);
            for corner in 0..1usize << dim {
                let mut lin = 0;
                for a in (0..dim).rev() {
                    lin = lin * side + base[a] + (corner >> a & 1);
                }
                marked[lin] = true;
            }
        }
        let mut vertex_rows = vec![NO_ROW; marked.len()];
        let mut vertices = Vec::new();
        for (lin, &m) in marked.iter().enumerate() {
            if m {
                vertex_rows[lin] = vertices.len() as u32;
                vertices.push(lin as u32);
            }
        }
        Ok(Self {
            resolution,
            dim,
            occupancy,
            occupied_cells,
            vertices,
            vertex_rows,
        })
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn occupied_cells(&self) -> usize {
        self.occupied_cells
    }

    pub fn cell_count(&self) -> usize {
        (self.resolution as usize).pow(self.dim as u32)
    }

    /// Packed occupancy bitmap.
    pub fn occupancy_bits(&self) -> &[u8] {
        &self.occupancy
    }

    pub fn is_cell_occupied(&self, cell: usize) -> bool {
        self.occupancy[cell / 8] >> (cell % 8) & 1 == 1
    }

    /// Lattice coordinates of the vertex stored at `row`.
    pub fn vertex_coords(&self, row: usize) -> [usize; 3] {
        cell_coords(
            self.vertices[row] as usize,
            self.resolution as usize + 1,
            self.dim,
        )
    }

    /// Row stored for lattice coordinates, if any.
    pub fn row_of(&self, coords: &[usize]) -> Option<usize> {
        let side = self.resolution as usize + 1;
        let mut lin = 0;
        for a in (0..self.dim).rev() {
            if coords[a] >= side {
                return None;
            }
            lin = lin * side + coords[a];
        }
        match self.vertex_rows[lin] {
            NO_ROW => None,
            r => Some(r as usize),
        }
    }

    /// Interpolation stencil for a point already known to be in `[−1,1]^d`,
    /// or `None` if its cell is unoccupied.
    pub fn stencil(&self, x: &[f64]) -> Option<Stencil> {
        let r = self.resolution as usize;
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..self.dim {
            let u = (x[a] + 1.0) * 0.5 * r as f64;
            let c = (u.floor().max(0.0) as usize).min(r - 1);
            cell[a] = c;
            frac[a] = u - c as f64;
        }
        let mut lin_cell = 0;
        for a in (0..self.dim).rev() {
            lin_cell = lin_cell * r + cell[a];
        }
        if !self.is_cell_occupied(lin_cell) {
            return None;
        }
        let side = r + 1;
        let mut st = Stencil {
            rows: [SKIP_ROW; 8],
            weights: [0.0; 8],
        };
        for corner in 0..1usize << self.dim {
            let mut lin = 0;
            let mut w = 1.0;
            for a in (0..self.dim).rev() {
                lin = lin * side + cell[a] + (corner >> a & 1);
            }
            for (a, f) in frac.iter().enumerate().take(self.dim) {
                w *= if corner >> a & 1 == 1 { *f } else { 1.0 - f };
            }
            st.rows[corner] = self.vertex_rows[lin];
            st.weights[corner] = w;
        }
        Some(st)
    }
}

fn cell_coords(mut lin: usize, side: usize, dim: usize) -> [usize; 3] {
    let mut out = [0; 3];
    for c in out.iter_mut().take(dim) {
        *c = lin % side;
        lin /= side;
    }
    out
}

/// Per-level storage. All levels of a pyramid hold the same kind.
#[derive(Debug, Clone, PartialEq)]
pub enum LevelData {
    /// Raw feature rows `Z_ℓ` (`m_ℓ × k`).
    Features(Matrix),
    /// Training-time soft index logits `C_ℓ` (`m_ℓ × 2^b`).
    SoftIndices(Matrix),
    /// Baked integer indices `V_ℓ`.
    Indices(IndexGrid),
}

impl LevelData {
    fn kind(&self) -> &'static str {
        match self {
            LevelData::Features(_) => "features",
            LevelData::SoftIndices(_) => "soft indices",
            LevelData::Indices(_) => "indices",
        }
    }

    fn rows(&self) -> usize {
        match self {
            LevelData::Features(m) | LevelData::SoftIndices(m) => m.rows(),
            LevelData::Indices(v) => v.len(),
        }
    }
}

/// Occupancy-masked multiresolution grid and its per-level storage.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGridPyramid {
    config: GridConfig,
    levels: Vec<GridLevel>,
    data: Vec<LevelData>,
}

/// Builds a pyramid whose finest occupancy comes from `occupancy`, coarser
/// levels by parent closure, and a fully occupied level 0.
pub fn build_pyramid<R: Rng + ?Sized>(
    config: GridConfig,
    occupancy: &Occupancy,
    init: FeatureInit,
    rng: &mut R,
) -> Result<FeatureGridPyramid, GridError> {
    config.validate()?;
    let dim = config.dim;
    let finest = config.levels - 1;
    let rf = config.resolution(finest) as usize;
    let cells = rf.pow(dim as u32);
    let mut bits = vec![0u8; cells.div_ceil(8)];
    match occupancy {
        Occupancy::Points { points } => {
            for p in points {
                if (0..dim).any(|a| !(p[a] >= -1.0 && p[a] <= 1.0)) {
                    continue;
                }
                let mut lin = 0;
                for a in (0..dim).rev() {
                    let c = (((p[a] + 1.0) * 0.5 * rf as f64).floor() as usize).min(rf - 1);
                    lin = lin * rf + c;
                }
                bits[lin / 8] |= 1 << (lin % 8);
            }
        }
        region => {
            let h = 2.0 / rf as f64;
            for cell in 0..cells {
                let c = cell_coords(cell, rf, dim);
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                for a in 0..dim {
                    lo[a] = -1.0 + c[a] as f64 * h;
                    hi[a] = lo[a] + h;
                }
                if region.cell_occupied(&lo, &hi, dim) {
                    bits[cell / 8] |= 1 << (cell % 8);
                }
            }
        }
    }
    if bits.iter().all(|&b| b == 0) {
        return Err(GridError::EmptyOccupancy);
    }

    let mut masks = vec![bits];
    for level in (0..finest).rev() {
        let r = config.resolution(level) as usize;
        let child_r = r * 2;
        let child = masks.last().unwrap();
        let mut parent = vec![0u8; r.pow(dim as u32).div_ceil(8)];
        for cell in 0..child_r.pow(dim as u32) {
            if child[cell / 8] >> (cell % 8) & 1 == 0 {
                continue;
            }
            let c = cell_coords(cell, child_r, dim);
            let mut lin = 0;
            for a in (0..dim).rev() {
                lin = lin * r + c[a] / 2;
            }
            parent[lin / 8] |= 1 << (lin % 8);
        }
        masks.push(parent);
    }
    masks.reverse();
    // Level 0 is always fully occupied.
    let r0 = config.resolution(0) as usize;
    let c0 = r0.pow(dim as u32);
    for cell in 0..c0 {
        masks[0][cell / 8] |= 1 << (cell % 8);
    }

    let levels = masks
        .into_iter()
        .enumerate()
        .map(|(l, bits)| GridLevel::from_occupancy(config.resolution(l), dim, bits))
        .collect::<Result<Vec<_>, _>>()?;

    let normal = match init {
        FeatureInit::Normal { std } => {
            Some(Normal::new(0.0, std).map_err(|e| GridError::InvalidConfig(e.to_string()))?)
        }
        FeatureInit::Zeros => None,
    };
    let data = levels
        .iter()
        .map(|lvl| {
            let n = lvl.vertex_count() * config.feature_dim;
            let values = match &normal {
                Some(dist) => (0..n).map(|_| dist.sample(rng)).collect(),
                None => vec![0.0; n],
            };
            LevelData::Features(Matrix::from_vec(
                lvl.vertex_count(),
                config.feature_dim,
                values,
            ))
        })
        .collect();
    Ok(FeatureGridPyramid {
        config,
        levels,
        data,
    })
}

impl FeatureGridPyramid {
    /// Assembles a pyramid from decoded parts, checking consistency.
    pub fn from_parts(
        config: GridConfig,
        levels: Vec<GridLevel>,
        data: Vec<LevelData>,
    ) -> Result<Self, GridError> {
        config.validate()?;
        if levels.len() != config.levels || data.len() != config.levels {
            return Err(GridError::StorageMismatch(format!(
                "{} levels configured, {} grids and {} storages given",
                config.levels,
                levels.len(),
                data.len()
            )));
        }
        let pyramid = Self {
            config,
            levels,
            data,
        };
        for (l, (lvl, d)) in pyramid.levels.iter().zip(&pyramid.data).enumerate() {
            if lvl.resolution != config.resolution(l) || lvl.dim != config.dim {
                return Err(GridError::StorageMismatch(format!(
                    "level {l} has the wrong shape"
                )));
            }
            if d.rows() != lvl.vertex_count() {
                return Err(GridError::StorageMismatch(format!(
                    "level {l} stores {} rows for {} vertices",
                    d.rows(),
                    lvl.vertex_count()
                )));
            }
        }
        pyramid.check_uniform_storage()?;
        Ok(pyramid)
    }

    fn check_uniform_storage(&self) -> Result<(), GridError> {
        let first = self.data[0].kind();
        if let Some(other) = self.data.iter().find(|d| d.kind() != first) {
            return Err(GridError::StorageMismatch(format!(
                "levels mix {first} and {}",
                other.kind()
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn level(&self, level: usize) -> &GridLevel {
        &self.levels[level]
    }

    pub fn level_data(&self) -> &[LevelData] {
        &self.data
    }

    pub fn level_data_mut(&mut self) -> &mut [LevelData] {
        &mut self.data
    }

    /// Replaces every level's storage at once.
    pub fn replace_data(&mut self, data: Vec<LevelData>) -> Result<(), GridError> {
        let old = std::mem::replace(&mut self.data, data);
        let ok = self.data.len() == self.levels.len()
            && self
                .data
                .iter()
                .zip(&self.levels)
                .all(|(d, l)| d.rows() == l.vertex_count());
        if !ok {
            self.data = old;
            return Err(GridError::StorageMismatch(
                "replacement storage has the wrong shape".into(),
            ));
        }
        if let Err(e) = self.check_uniform_storage() {
            self.data = old;
            return Err(e);
        }
        Ok(())
    }

    /// Number of stored rows at `level`.
    pub fn vertex_count(&self, level: usize) -> usize {
        self.levels[level].vertex_count()
    }

    pub fn total_vertices(&self) -> usize {
        self.levels.iter().map(GridLevel::vertex_count).sum()
    }

    /// Copy holding only the first `levels` levels.
    pub fn truncated(&self, levels: usize) -> Self {
        let levels = levels.clamp(1, self.config.levels);
        let mut config = self.config;
        config.levels = levels;
        Self {
            config,
            levels: self.levels[..levels].to_vec(),
            data: self.data[..levels].to_vec(),
        }
    }

    fn check_lod(&self, lod: usize) -> Result<(), GridError> {
        if lod >= self.config.levels {
            return Err(GridError::LodOutOfRange {
                lod,
                levels: self.config.levels,
            });
        }
        Ok(())
    }

    /// Per-level stencils for `x` at levels `0..=lod`; `None` marks a level
    /// whose containing cell is unoccupied.
    pub fn stencils(&self, x: &[f64], lod: usize) -> Result<Vec<Option<Stencil>>, GridError> {
        self.check_lod(lod)?;
        let dim = self.config.dim;
        if x.len() != dim {
            return Err(GridError::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(GridError::OutsideDomain { point: x.to_vec() });
        }
        let out: Vec<Option<Stencil>> = self.levels[..=lod].iter().map(|l| l.stencil(x)).collect();
        if out[0].is_none() {
            return Err(GridError::OutsideDomain { point: x.to_vec() });
        }
        Ok(out)
    }

    /// Summed interpolation at `x` over levels `0..=lod` using explicit
    /// per-level feature matrices.
    pub fn interpolate_with(
        &self,
        features: &[Matrix],
        x: &[f64],
        lod: usize,
    ) -> Result<Vec<f64>, GridError> {
        let stencils = self.stencils(x, lod)?;
        let k = self.config.feature_dim;
        let corners = self.config.corners();
        let mut total: Option<Vec<f64>> = None;
        for (l, st) in stencils.iter().enumerate() {
            let mut level = vec![0.0; k];
            if let Some(st) = st {
                blend_row(
                    &mut level,
                    &features[l],
                    &st.rows[..corners],
                    &st.weights[..corners],
                );
            }
            match &mut total {
                None => total = Some(level),
                Some(t) => t.iter_mut().zip(&level).for_each(|(a, b)| *a += b),
            }
        }
        Ok(total.unwrap_or_else(|| vec![0.0; k]))
    }

    /// Summed interpolation at `x` over levels `0..=lod`. Requires raw
    /// feature storage.
    pub fn interpolate(&self, x: &[f64], lod: usize) -> Result<Vec<f64>, GridError> {
        let features = self
            .data
            .iter()
            .map(|d| match d {
                LevelData::Features(m) => Ok(m.clone()),
                other => Err(GridError::StorageMismatch(format!(
                    "interpolate needs raw features, level holds {}",
                    other.kind()
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.interpolate_with(&features, x, lod)
    }
}
