use rand::{Rng, RngCore};

use super::FieldError;
use crate::grid::GridLevel;

/// A ray with unit direction, restricted to `[near, far]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    origin: [f64; 3],
    direction: [f64; 3],
    near: f64,
    far: f64,
}

impl Ray {
    /// Normalizes `direction`; zero or non-finite directions are rejected.
    pub fn new(
        origin: [f64; 3],
        direction: [f64; 3],
        near: f64,
        far: f64,
    ) -> Result<Self, FieldError> {
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) || origin.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::DegenerateRay);
        }
        Ok(Self {
            origin,
            direction: direction.map(|v| v / norm),
            near,
            far,
        })
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn direction(&self) -> [f64; 3] {
        self.direction
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + t * self.direction[a])
    }

    /// Parametric interval inside `[−1,1]³` and `[near, far]`.
    pub fn clip_to_cube(&self) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (self.near, self.far);
        for a in 0..3 {
            let (o, d) = (self.origin[a], self.direction[a]);
            if d == 0.0 {
                if !(-1.0..=1.0).contains(&o) {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((-1.0 - o) / d, (1.0 - o) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// A sample along a ray: position parameter and step length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample {
    pub t: f64,
    pub delta: f64,
}

/// Stratified samples, `per_cell` in every occupied cell of `level` that the
/// ray crosses. Without `jitter` each sample sits at its stratum midpoint.
pub fn ray_samples(
    level: &GridLevel,
    ray: &Ray,
    per_cell: usize,
    mut jitter: Option<&mut (dyn RngCore + '_)>,
) -> Vec<RaySample> {
    let Some((t_in, t_out)) = ray.clip_to_cube() else {
        return Vec::new();
    };
    let r = level.resolution() as usize;
    let mut cuts = vec![t_in, t_out];
    for a in 0..3 {
        let d = ray.direction[a];
        if d == 0.0 {
            continue;
        }
        for i in 0..=r {
            let plane = -1.0 + 2.0 * i as f64 / r as f64;
            let t = (plane - ray.origin[a]) / d;
            if t > t_in && t < t_out {
                cuts.push(t);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);

    let mut out = Vec::new();
    for pair in cuts.windows(2) {
        let (ta, tb) = (pair[0], pair[1]);
        let len = tb - ta;
        if len <= 1e-12 {
            continue;
        }
        let mid = ray.at(0.5 * (ta + tb));
        let mut cell = 0;
        for a in (0..3).rev() {
            let c = (((mid[a] + 1.0) * 0.5 * r as f64).floor().max(0.0) as usize).min(r - 1);
            cell = cell * r + c;
        }
        if !level.is_cell_occupied(cell) {
            continue;
        }
        let delta = len / per_cell as f64;
        for j in 0..per_cell {
            let u = match jitter.as_deref_mut() {
                Some(rng) => rng.random::<f64>(),
                None => 0.5,
            };
            out.push(RaySample {
                t: ta + (j as f64 + u) * delta,
                delta,
            });
        }
    }
    out
}
