//! Training data for the three tasks: images, analytic signed distance
//! shapes, and posed views of a volume.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::field::{Ray, TaskKind};
use crate::grid::Occupancy;
use crate::raster::{Image, RasterError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("camera file: {0}")]
    Cameras(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Side length of the bundled image.
pub const BUNDLED_IMAGE_SIZE: usize = 128;

/// Dataset description as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Deterministic synthetic 128×128 picture.
    BundledImage,
    Image {
        path: PathBuf,
    },
    Sdf {
        shape: SdfShape,
        #[serde(default = "default_sdf_samples")]
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Closed-form sphere and box volume seen from a ring of cameras.
    BundledScene {
        #[serde(default = "default_scene_views")]
        views: usize,
        #[serde(default = "default_scene_resolution")]
        resolution: usize,
    },
    /// Directory with PNG views and a `cameras.json` file.
    Views {
        dir: PathBuf,
    },
}

fn default_sdf_samples() -> usize {
    1 << 16
}

fn default_scene_views() -> usize {
    16
}

fn default_scene_resolution() -> usize {
    32
}

impl DatasetSpec {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Image => DatasetSpec::BundledImage,
            TaskKind::Sdf => DatasetSpec::Sdf {
                shape: SdfShape::Torus {
                    major: 0.5,
                    minor: 0.2,
                },
                samples: default_sdf_samples(),
                seed: 0,
            },
            TaskKind::Radiance => DatasetSpec::BundledScene {
                views: default_scene_views(),
                resolution: default_scene_resolution(),
            },
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            DatasetSpec::BundledImage | DatasetSpec::Image { .. } => TaskKind::Image,
            DatasetSpec::Sdf { .. } => TaskKind::Sdf,
            DatasetSpec::BundledScene { .. } | DatasetSpec::Views { .. } => TaskKind::Radiance,
        }
    }

    /// Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset, DataError> {
        Ok(match self {
            DatasetSpec::BundledImage => Dataset::Image(bundled_image()),
            DatasetSpec::Image { path } => Dataset::Image(Image::load_png(&base.join(path))?),
            DatasetSpec::Sdf {
                shape,
                samples,
                seed,
            } => Dataset::Sdf {
                shape: *shape,
                samples: *samples,
                seed: *seed,
            },
            DatasetSpec::BundledScene { views, resolution } => bundled_scene(*views, *resolution),
            DatasetSpec::Views { dir } => load_views(&base.join(dir))?,
        })
    }
}

/// Origin-centered analytic shapes with exact distance functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SdfShape {
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: [f64; 3],
    },
    /// Ring in the `xy` plane.
    Torus {
        major: f64,
        minor: f64,
    },
}

impl SdfShape {
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            SdfShape::Sphere { radius } => norm(p) - radius,
            SdfShape::Box { half_extents } => {
                let q = [0, 1, 2].map(|a| p[a].abs() - half_extents[a]);
                let outside = norm(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            SdfShape::Torus { major, minor } => {
                let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - major;
                (ring * ring + p[2] * p[2]).sqrt() - minor
            }
        }
    }

    /// Central-difference normal.
    pub fn gradient(&self, p: [f64; 3]) -> [f64; 3] {
        let h = 1e-5;
        [0, 1, 2].map(|a| {
            let (mut lo, mut hi) = (p, p);
            lo[a] -= h;
            hi[a] += h;
            (self.distance(hi) - self.distance(lo)) / (2.0 * h)
        })
    }

    /// Random points on the surface, by projecting uniform points.
    pub fn surface_points(&self, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut p = [0; 3].map(|_| rng.random_range(-1.0..1.0));
            for _ in 0..8 {
                let d = self.distance(p);
                let g = self.gradient(p);
                let gn = norm(g);
                if gn < 1e-9 {
                    break;
                }
                p = [0, 1, 2].map(|a| p[a] - d * g[a] / gn);
            }
            if self.distance(p).abs() < 1e-6 && p.iter().all(|v| v.abs() <= 1.0) {
                out.push(p);
            }
        }
        out
    }
}

fn norm(p: [f64; 3]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Pinhole camera looking down its local −z axis with +y up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Row-major camera-to-world transform.
    pub transform: [[f64; 4]; 4],
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let back = normalize([0, 1, 2].map(|a| eye[a] - target[a]));
        let up_hint = if back[1].abs() > 0.99 {
            [0.0, 0.0, 1.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let right = normalize(cross(up_hint, back));
        let up = cross(back, right);
        let mut transform = [[0.0; 4]; 4];
        for a in 0..3 {
            transform[a] = [right[a], up[a], back[a], eye[a]];
        }
        transform[3][3] = 1.0;
        Self {
            transform,
            focal,
            width,
            height,
        }
    }

    pub fn origin(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.transform[a][3])
    }

    /// Ray through the center of pixel `(x, y)`, `y` counted downwards.
    pub fn ray(&self, x: usize, y: usize) -> Ray {
        let local = [
            (x as f64 + 0.5 - self.width as f64 / 2.0) / self.focal,
            -(y as f64 + 0.5 - self.height as f64 / 2.0) / self.focal,
            -1.0,
        ];
        let dir = [0, 1, 2].map(|a| (0..3).map(|c| self.transform[a][c] * local[c]).sum::<f64>());
        Ray::new(self.origin(), dir, 0.0, f64::INFINITY).expect("camera rays are finite")
    }

    /// All pixel rays in row-major order.
    pub fn rays(&self) -> Vec<Ray> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| self.ray(x, y))
            .collect()
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    v.map(|x| x / n)
}

/// Something a model can be rendered to for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum View {
    /// Image task: one sample per pixel center of a `width × height` raster
    /// spanning `[−1, 1]²`.
    Pixels {
        width: usize,
        height: usize,
    },
    /// Sdf task: gray-coded distance on the `z` plane.
    Slice {
        width: usize,
        height: usize,
        z: f64,
    },
    Camera(Camera),
}

impl View {
    pub fn size(&self) -> (usize, usize) {
        match self {
            View::Pixels { width, height } | View::Slice { width, height, .. } => (*width, *height),
            View::Camera(c) => (c.width, c.height),
        }
    }

    /// Pixel-center coordinates in `[−1, 1]^d`, row-major.
    pub fn coords(&self) -> Vec<f64> {
        let (w, h) = self.size();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let u = -1.0 + (2 * x + 1) as f64 / w as f64;
                let v = -1.0 + (2 * y + 1) as f64 / h as f64;
                match self {
                    View::Slice { z, .. } => out.extend([u, v, *z]),
                    _ => out.extend([u, v]),
                }
            }
        }
        out
    }
}

/// Maps a signed distance to a gray level for slice images.
pub fn slice_shade(distance: f64) -> f64 {
    0.5 + 0.5 * distance.clamp(-1.0, 1.0)
}

/// Model inputs for a set of training samples.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainingInputs {
    /// `n × d` coordinates.
    Points {
        coords: Vec<f64>,
        dim: usize,
    },
    Rays(Vec<Ray>),
}

/// Inputs paired with target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub task: TaskKind,
    pub inputs: TrainingInputs,
    pub targets: Matrix,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-batch of the given sample indices.
    pub fn select(&self, idx: &[usize]) -> (TrainingInputs, Matrix) {
        let cols = self.targets.cols();
        let mut t = Matrix::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            t.row_mut(r).copy_from_slice(self.targets.row(i));
        }
        let inputs = match &self.inputs {
            TrainingInputs::Points { coords, dim } => TrainingInputs::Points {
                coords: idx
                    .iter()
                    .flat_map(|&i| coords[i * dim..(i + 1) * dim].to_vec())
                    .collect(),
                dim: *dim,
            },
            TrainingInputs::Rays(rays) => {
                TrainingInputs::Rays(idx.iter().map(|&i| rays[i]).collect())
            }
        };
        (inputs, t)
    }
}

/// A loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Image(Image),
    Sdf {
        shape: SdfShape,
        samples: usize,
        seed: u64,
    },
    Views {
        views: Vec<(Camera, Image)>,
        /// Surface points from depth maps, if any were given.
        surface: Option<Vec<[f64; 3]>>,
    },
}

impl Dataset {
    pub fn task(&self) -> TaskKind {
        match self {
            Dataset::Image(_) => TaskKind::Image,
            Dataset::Sdf { .. } => TaskKind::Sdf,
            Dataset::Views { .. } => TaskKind::Radiance,
        }
    }

    pub fn training_set(&self) -> TrainingSet {
        match self {
            Dataset::Image(img) => {
                let view = View::Pixels {
                    width: img.width(),
                    height: img.height(),
                };
                TrainingSet {
                    task: TaskKind::Image,
                    inputs: TrainingInputs::Points {
                        coords: view.coords(),
                        dim: 2,
                    },
                    targets: img.to_matrix(),
                }
            }
            Dataset::Sdf {
                shape,
                samples,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let near = samples / 2;
                let jitter = Normal::new(0.0, 0.02).expect("valid std");
                let mut coords = Vec::with_capacity(samples * 3);
                for p in shape.surface_points(near, &mut rng) {
                    coords.extend(p.map(|v| (v + jitter.sample(&mut rng)).clamp(-1.0, 1.0)));
                }
                for _ in near..*samples {
                    coords.extend([0; 3].map(|_| rng.random_range(-1.0..1.0)));
                }
                let values = coords
                    .chunks_exact(3)
                    .map(|p| shape.distance([p[0], p[1], p[2]]))
                    .collect();
                TrainingSet {
                    task: TaskKind::Sdf,
                    inputs: TrainingInputs::Points { coords, dim: 3 },
                    targets: Matrix::from_vec(*samples, 1, values),
                }
            }
            Dataset::Views { views, .. } => {
                let mut rays = Vec::new();
                let mut targets = Vec::new();
                for (cam, img) in views {
                    rays.extend(cam.rays());
                    targets.extend_from_slice(img.data());
                }
                TrainingSet {
                    task: TaskKind::Radiance,
                    targets: Matrix::from_vec(rays.len(), 3, targets),
                    inputs: TrainingInputs::Rays(rays),
                }
            }
        }
    }

    /// Region the finest grid level should cover.
    pub fn occupancy(&self) -> Occupancy {
        match self {
            Dataset::Image(_) => Occupancy::Dense,
            Dataset::Sdf { shape, seed, .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
                Occupancy::Points {
                    points: shape.surface_points(20_000, &mut rng),
                }
            }
            Dataset::Views { surface, .. } => match surface {
                Some(points) if !points.is_empty() => Occupancy::Points {
                    points: points.clone(),
                },
                _ => Occupancy::Dense,
            },
        }
    }

    /// Held-out views with reference images.
    pub fn eval_set(&self) -> Vec<(View, Image)> {
        match self {
            Dataset::Image(img) => vec![(
                View::Pixels {
                    width: img.width(),
                    height: img.height(),
                },
                img.clone(),
            )],
            Dataset::Sdf { shape, .. } => {
                let view = View::Slice {
                    width: 128,
                    height: 128,
                    z: 0.0,
                };
                let c = view.coords();
                let shades = c.chunks_exact(3).flat_map(|p| {
                    let s = slice_shade(shape.distance([p[0], p[1], p[2]]));
                    [s, s, s]
                });
                let img = Image::from_vec(128, 128, shades.collect()).expect("sized");
                vec![(view, img)]
            }
            Dataset::Views { views, .. } => views
                .iter()
                .step_by(4.max(views.len() / 4))
                .map(|(c, img)| (View::Camera(*c), img.clone()))
                .collect(),
        }
    }
}

/// Smooth gradients, disks, stripes and a checkerboard, supersampled 4×4.
pub fn bundled_image() -> Image {
    let n = BUNDLED_IMAGE_SIZE;
    Image::from_fn(n, n, |x, y| {
        let mut acc = [0.0; 3];
        for sy in 0..4 {
            for sx in 0..4 {
                let u = (x as f64 + (sx as f64 + 0.5) / 4.0) / n as f64;
                let v = (y as f64 + (sy as f64 + 0.5) / 4.0) / n as f64;
                let c = scene_color(u, v);
                for a in 0..3 {
                    acc[a] += c[a] / 16.0;
                }
            }
        }
        acc
    })
}

fn scene_color(u: f64, v: f64) -> [f64; 3] {
    use std::f64::consts::PI;
    let horizon = 0.62 + 0.05 * (2.0 * PI * 1.5 * u).sin();
    if v > horizon {
        let stripe = 0.5 + 0.5 * (2.0 * PI * (9.0 * u + 3.0 * v)).sin();
        return [
            0.15 + 0.15 * stripe,
            0.45 + 0.2 * stripe - 0.2 * (v - horizon),
            0.12,
        ];
    }
    let sun = ((u - 0.74).powi(2) + (v - 0.22).powi(2)).sqrt();
    if sun < 0.11 {
        return [1.0, 0.85 - sun, 0.3];
    }
    if (0.12..0.4).contains(&u) && (0.28..0.56).contains(&v) {
        let checker = ((u * 20.0).floor() as i64 + (v * 20.0).floor() as i64) % 2 == 0;
        return if checker {
            [0.85, 0.2, 0.25]
        } else {
            [0.95, 0.9, 0.85]
        };
    }
    let ring = ((u - 0.5).powi(2) + (v - 0.4).powi(2)).sqrt();
    if (0.06..0.09).contains(&ring) {
        return [0.3, 0.1, 0.5];
    }
    let t = v / horizon;
    [0.35 + 0.35 * t, 0.55 + 0.25 * t, 0.9 - 0.25 * t]
}

/// Homogeneous-density primitive for the bundled volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Blob {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Blob {
    /// Parametric interval where the ray is inside the primitive.
    fn interval(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (o, d) = (ray.origin(), ray.direction());
        match *self {
            Blob::Sphere { center, radius } => {
                let oc = [0, 1, 2].map(|a| o[a] - center[a]);
                let b: f64 = (0..3).map(|a| oc[a] * d[a]).sum();
                let c = norm(oc).powi(2) - radius * radius;
                let disc = b * b - c;
                (disc > 0.0).then(|| (-b - disc.sqrt(), -b + disc.sqrt()))
            }
            Blob::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut lo, mut hi) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    t0 = t0.max(lo);
                    t1 = t1.min(hi);
                }
                (t1 > t0).then_some((t0, t1))
            }
        }
        .map(|(a, b)| (a.max(ray.near()), b.min(ray.far())))
        .filter(|(a, b)| b > a)
    }
}

/// Disjoint homogeneous blobs over a background, rendered exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub blobs: Vec<(Blob, f64, [f64; 3])>,
    pub background: [f64; 3],
}

impl Default for SyntheticScene {
    fn default() -> Self {
        Self {
            blobs: vec![
                (
                    Blob::Sphere {
                        center: [-0.35, 0.0, 0.05],
                        radius: 0.4,
                    },
                    20.0,
                    [0.9, 0.35, 0.2],
                ),
                (
                    Blob::Box {
                        min: [0.15, -0.35, -0.3],
                        max: [0.7, 0.3, 0.25],
                    },
                    12.0,
                    [0.2, 0.5, 0.9],
                ),
            ],
            background: [0.0; 3],
        }
    }
}

impl SyntheticScene {
    /// Emission-absorption integral along `ray`, in closed form.
    pub fn render(&self, ray: &Ray) -> [f64; 3] {
        let mut hits: Vec<(f64, f64, f64, [f64; 3])> = self
            .blobs
            .iter()
            .filter_map(|(b, sigma, c)| b.interval(ray).map(|(t0, t1)| (t0, t1, *sigma, *c)))
            .collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut trans = 1.0;
        let mut out = [0.0; 3];
        for (t0, t1, sigma, c) in hits {
            let alpha = 1.0 - (-sigma * (t1 - t0)).exp();
            for a in 0..3 {
                out[a] += trans * alpha * c[a];
            }
            trans *= 1.0 - alpha;
        }
        [0, 1, 2].map(|a| out[a] + trans * self.background[a])
    }

    pub fn render_view(&self, cam: &Camera) -> Image {
        Image::from_fn(cam.width, cam.height, |x, y| self.render(&cam.ray(x, y)))
    }
}

/// Cameras on a ring of radius 3 slightly above the equator.
pub fn ring_cameras(n: usize, resolution: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let eye = [
                3.0 * phi.cos() * 0.92,
                1.2 * (1.0 + 0.3 * (3.0 * phi).sin()),
                3.0 * phi.sin() * 0.92,
            ];
            Camera::look_at(
                eye,
                [0.0; 3],
                1.6 * resolution as f64,
                resolution,
                resolution,
            )
        })
        .collect()
}

pub fn bundled_scene(views: usize, resolution: usize) -> Dataset {
    let scene = SyntheticScene::default();
    Dataset::Views {
        views: ring_cameras(views, resolution)
            .into_iter()
            .map(|c| (c, scene.render_view(&c)))
            .collect(),
        surface: None,
    }
}

/// `cameras.json` layout for a directory of views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub focal: f64,
    /// Depth stored as `value / 65535 · depth_max` along the unit ray; 0
    /// marks a miss.
    #[serde(default)]
    pub depth_max: Option<f64>,
    /// Composited under semi-transparent pixels.
    #[serde(default)]
    pub background: [f64; 3],
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub file: PathBuf,
    pub transform: [[f64; 4]; 4],
    #[serde(default)]
    pub depth: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Loads views; RGBA pixels are composited over the background.
pub fn load_views(dir: &Path) -> Result<Dataset, DataError> {
    let file: CameraFile = serde_json::from_slice(&read(&dir.join("cameras.json"))?)?;
    if file.frames.is_empty() || file.focal.is_nan() || file.focal <= 0.0 {
        return Err(DataError::Invalid(
            "camera file needs frames and a positive focal".into(),
        ));
    }
    let mut views = Vec::new();
    let mut surface: Option<Vec<[f64; 3]>> = None;
    for frame in &file.frames {
        let path = dir.join(&frame.file);
        let rgba = image::open(&path)
            .map_err(RasterError::from)?
            .into_rgba32f();
        let (w, h) = rgba.dimensions();
        let mut img = Image::new(w as usize, h as usize);
        for (x, y, p) in rgba.enumerate_pixels() {
            let a = f64::from(p[3]);
            img.set(
                x as usize,
                y as usize,
                [0, 1, 2].map(|c| f64::from(p[c]) * a + file.background[c] * (1.0 - a)),
            );
        }
        let cam = Camera {
            transform: frame.transform,
            focal: file.focal,
            width: w as usize,
            height: h as usize,
        };
        if let Some(depth) = &frame.depth {
            let scale = file
                .depth_max
                .ok_or_else(|| DataError::Invalid("depth maps need depth_max".into()))?;
            let d = image::open(dir.join(depth))
                .map_err(RasterError::from)?
                .into_luma16();
            if d.dimensions() != (w, h) {
                return Err(DataError::Invalid(format!(
                    "{}: depth size differs from view",
                    depth.display()
                )));
            }
            let pts = surface.get_or_insert_with(Vec::new);
            for (x, y, v) in d.enumerate_pixels() {
                if v[0] == 0 {
                    continue;
                }
                let t = f64::from(v[0]) / 65535.0 * scale;
                let p = cam.ray(x as usize, y as usize).at(t);
                if p.iter().all(|c| c.abs() <= 1.0) {
                    pts.push(p);
                }
            }
        }
        views.push((cam, img));
    }
    Ok(Dataset::Views { views, surface })
}
