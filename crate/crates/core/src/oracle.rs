//! Finite-difference oracle suite over every differentiable piece of the
//! model: tape primitives, the straight-through lookup, grid interpolation,
//! the decoder and the volume renderer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{grad_check, DiffError, Matrix, NodeId, Tape, SKIP_ROW};
use crate::field::{DecoderMlp, GraphInputs, MlpNodes, NeuralField, Ray, RenderSettings, TaskKind};
use crate::grid::{build_pyramid, FeatureInit, GridConfig, Occupancy};
use crate::vq::ste_lookup;

/// Central-difference step used by the suite.
pub const ORACLE_EPS: f64 = 1e-5;

/// Worst relative error of one case over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
}

type Build = Box<dyn Fn(&mut Tape, &[NodeId]) -> NodeId>;

/// One randomized instance: a loss builder and the point to check it at.
struct Case {
    build: Build,
    point: Vec<Matrix>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
    )
}

/// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
fn off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = uniform(rng, rows, cols, 0.05, 1.0);
    for v in m.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    m
}

/// Reads a node out through a random linear functional.
fn readout(t: &mut Tape, x: NodeId, w: &Matrix) -> NodeId {
    t.weighted_sum(x, w.clone())
}

fn elementwise(rng: &mut ChaCha8Rng, op: fn(&mut Tape, NodeId) -> NodeId) -> Case {
    let (n, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let w = uniform(rng, n, c, -1.0, 1.0);
    Case {
        point: vec![off_zero(rng, n, c)],
        build: Box::new(move |t, p| {
            let y = op(t, p[0]);
            readout(t, y, &w)
        }),
    }
}

fn primitive(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let (n, p, q) = (
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(1..5),
    );
    match name {
        "affine" => {
            let w = uniform(rng, n, q, -1.0, 1.0);
            Case {
                point: vec![
                    uniform(rng, n, p, -1.0, 1.0),
                    uniform(rng, p, q, -1.0, 1.0),
                    uniform(rng, 1, q, -1.0, 1.0),
                ],
                build: Box::new(move |t, x| {
                    let y = t.affine(x[0], x[1], Some(x[2]));
                    readout(t, y, &w)
                }),
            }
        }
        "matmul" => {
            let w = uniform(rng, n, q, -1.0, 1.0);
            Case {
                point: vec![uniform(rng, n, p, -1.0, 1.0), uniform(rng, p, q, -1.0, 1.0)],
                build: Box::new(move |t, x| {
                    let y = t.matmul(x[0], x[1]);
                    readout(t, y, &w)
                }),
            }
        }
        "relu" => elementwise(rng, Tape::relu),
        "sigmoid" => elementwise(rng, Tape::sigmoid),
        "exp" => elementwise(rng, Tape::exp),
        "add" | "mul" => {
            let w = uniform(rng, n, p, -1.0, 1.0);
            let mul = name == "mul";
            Case {
                point: vec![uniform(rng, n, p, -1.0, 1.0), uniform(rng, n, p, -1.0, 1.0)],
                build: Box::new(move |t, x| {
                    let y = if mul {
                        t.mul(x[0], x[1])
                    } else {
                        t.add(x[0], x[1])
                    };
                    readout(t, y, &w)
                }),
            }
        }
        "softmax_rows" => {
            let w = uniform(rng, n, p + 1, -1.0, 1.0);
            Case {
                point: vec![uniform(rng, n, p + 1, -2.0, 2.0)],
                build: Box::new(move |t, x| {
                    let y = t.softmax_rows(x[0]);
                    readout(t, y, &w)
                }),
            }
        }
        "gather" => {
            let rows: Vec<u32> = (0..q + 2).map(|_| rng.random_range(0..n as u32)).collect();
            let w = uniform(rng, rows.len(), p, -1.0, 1.0);
            Case {
                point: vec![uniform(rng, n, p, -1.0, 1.0)],
                build: Box::new(move |t, x| {
                    let y = t.gather(x[0], rows.clone());
                    readout(t, y, &w)
                }),
            }
        }
        "blend" => {
            let fan = rng.random_range(1..5);
            let rows: Vec<u32> = (0..q * fan)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        SKIP_ROW
                    } else {
                        rng.random_range(0..n as u32)
                    }
                })
                .collect();
            let weights: Vec<f64> = (0..q * fan).map(|_| rng.random_range(0.0..1.0)).collect();
            let w = uniform(rng, q, p, -1.0, 1.0);
            Case {
                point: vec![uniform(rng, n, p, -1.0, 1.0)],
                build: Box::new(move |t, x| {
                    let y = t.blend(x[0], fan, rows.clone(), weights.clone());
                    readout(t, y, &w)
                }),
            }
        }
        "concat_cols" => {
            let w = uniform(rng, n, p + q, -1.0, 1.0);
            Case {
                point: vec![uniform(rng, n, p, -1.0, 1.0), uniform(rng, n, q, -1.0, 1.0)],
                build: Box::new(move |t, x| {
                    let y = t.concat_cols(x[0], x[1]);
                    readout(t, y, &w)
                }),
            }
        }
        "columns" => {
            let start = rng.random_range(0..p);
            let len = rng.random_range(1..=p - start);
            let w = uniform(rng, n, len, -1.0, 1.0);
            Case {
                point: vec![uniform(rng, n, p, -1.0, 1.0)],
                build: Box::new(move |t, x| {
                    let y = t.columns(x[0], start, len);
                    readout(t, y, &w)
                }),
            }
        }
        "straight_through" => {
            let w = uniform(rng, n, p, -1.0, 1.0);
            Case {
                point: vec![uniform(rng, n, p, -1.0, 1.0), uniform(rng, n, p, -1.0, 1.0)],
                build: Box::new(move |t, x| {
                    let y = t.straight_through(x[0], x[1]);
                    readout(t, y, &w)
                }),
            }
        }
        "composite" => {
            let rays = rng.random_range(1..4);
            let mut offsets = vec![0];
            for _ in 0..rays {
                offsets.push(offsets.last().unwrap() + rng.random_range(1..6));
            }
            let s = *offsets.last().unwrap();
            let deltas: Vec<f64> = (0..s).map(|_| rng.random_range(0.05..0.5)).collect();
            let bg = [rng.random(), rng.random(), rng.random()];
            let w = uniform(rng, rays, 4, -1.0, 1.0);
            Case {
                point: vec![uniform(rng, s, 1, 0.0, 3.0), uniform(rng, s, 3, 0.0, 1.0)],
                build: Box::new(move |t, x| {
                    let y = t.composite(x[0], x[1], offsets.clone(), deltas.clone(), bg);
                    readout(t, y, &w)
                }),
            }
        }
        "sum" => Case {
            point: vec![uniform(rng, n, p, -1.0, 1.0)],
            build: Box::new(|t, x| t.sum(x[0])),
        },
        "weighted_sum" => {
            let w = uniform(rng, n, p, -1.0, 1.0);
            Case {
                point: vec![uniform(rng, n, p, -1.0, 1.0)],
                build: Box::new(move |t, x| readout(t, x[0], &w)),
            }
        }
        "mse" => {
            let target = uniform(rng, n, p, -1.0, 1.0);
            Case {
                point: vec![uniform(rng, n, p, -1.0, 1.0)],
                build: Box::new(move |t, x| t.mse(x[0], target.clone())),
            }
        }
        other => unreachable!("unknown primitive {other}"),
    }
}

const PRIMITIVES: [&str; 17] = [
    "affine",
    "matmul",
    "relu",
    "sigmoid",
    "exp",
    "add",
    "mul",
    "softmax_rows",
    "gather",
    "blend",
    "concat_cols",
    "columns",
    "straight_through",
    "composite",
    "sum",
    "weighted_sum",
    "mse",
];

fn ste_case(rng: &mut ChaCha8Rng) -> Case {
    let b = rng.random_range(1..4u32);
    let (m, k) = (rng.random_range(1..6), rng.random_range(1..4));
    let w = uniform(rng, m, k, -1.0, 1.0);
    Case {
        point: vec![
            uniform(rng, m, 1 << b, -2.0, 2.0),
            uniform(rng, 1 << b, k, -1.0, 1.0),
        ],
        build: Box::new(move |t, x| {
            let y = ste_lookup(t, x[0], x[1]);
            readout(t, y, &w)
        }),
    }
}

/// Small random field; level feature matrices and MLP weights become the
/// checked parameters.
fn small_field(rng: &mut ChaCha8Rng, task: TaskKind) -> NeuralField {
    let k = rng.random_range(1..4);
    let cfg = GridConfig {
        levels: 2,
        base_resolution: 2,
        feature_dim: k,
        dim: task.spatial_dim(),
    };
    let pyramid = build_pyramid(
        cfg,
        &Occupancy::Dense,
        FeatureInit::Normal { std: 0.5 },
        rng,
    )
    .expect("valid grid");
    let decoder = DecoderMlp::random(task, k, 6, rng);
    let render = RenderSettings {
        background: [rng.random(), rng.random(), rng.random()],
        samples_per_cell: 2,
    };
    NeuralField::new(task, pyramid, vec![], decoder, render).expect("valid field")
}

fn field_point(f: &NeuralField) -> Vec<Matrix> {
    let mut point: Vec<Matrix> = (0..f.levels()).map(|l| f.level_features(l)).collect();
    point.extend(f.decoder.parameters().into_iter().cloned());
    point
}

fn inputs(levels: usize, p: &[NodeId]) -> GraphInputs {
    GraphInputs {
        levels: p[..levels].to_vec(),
        mlp: MlpNodes {
            w1: p[levels],
            b1: p[levels + 1],
            w2: p[levels + 2],
            b2: p[levels + 3],
        },
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f64> {
    (0..n * dim)
        .map(|_| rng.random_range(-0.95..0.95))
        .collect()
}

fn interpolate_case(rng: &mut ChaCha8Rng) -> Case {
    let f = small_field(rng, TaskKind::Sdf);
    let coords = random_points(rng, 4, 3);
    let k = f.pyramid.config().feature_dim;
    let w = uniform(rng, 4, k, -1.0, 1.0);
    let point = (0..f.levels()).map(|l| f.level_features(l)).collect();
    Case {
        point,
        build: Box::new(move |t, p| {
            let fan = f.pyramid.config().corners();
            let mut acc: Option<NodeId> = None;
            for (l, &src) in p.iter().enumerate() {
                let mut rows = Vec::new();
                let mut weights = Vec::new();
                for x in coords.chunks_exact(3) {
                    let st = f.pyramid.level(l).stencil(x).expect("occupied");
                    rows.extend_from_slice(&st.rows[..fan]);
                    weights.extend_from_slice(&st.weights[..fan]);
                }
                let y = t.blend(src, fan, rows, weights);
                acc = Some(match acc {
                    None => y,
                    Some(a) => t.add(a, y),
                });
            }
            readout(t, acc.expect("two levels"), &w)
        }),
    }
}

fn decode_case(rng: &mut ChaCha8Rng, task: TaskKind) -> Case {
    let f = small_field(rng, task);
    let n = 3;
    let coords = random_points(rng, n, task.spatial_dim());
    let dirs: Option<Vec<f64>> = task.uses_view_direction().then(|| random_points(rng, n, 3));
    let w = uniform(rng, n, task.output_dim(), -1.0, 1.0);
    Case {
        point: field_point(&f),
        build: Box::new(move |t, p| {
            let inp = inputs(f.levels(), p);
            let y = f
                .predict_points(t, &inp, &coords, dirs.as_deref(), f.levels() - 1)
                .expect("in domain");
            readout(t, y, &w)
        }),
    }
}

fn render_case(rng: &mut ChaCha8Rng) -> Case {
    let f = small_field(rng, TaskKind::Radiance);
    let rays: Vec<Ray> = (0..2)
        .map(|_| {
            let target = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            let origin = [
                rng.random_range(-2.5..-1.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            let dir = [
                target[0] - origin[0],
                target[1] - origin[1],
                target[2] - origin[2],
            ];
            Ray::new(origin, dir, 0.0, 6.0).expect("valid ray")
        })
        .collect();
    let w = uniform(rng, rays.len(), 4, -1.0, 1.0);
    Case {
        point: field_point(&f),
        build: Box::new(move |t, p| {
            let inp = inputs(f.levels(), p);
            let y = f
                .predict_rays(t, &inp, &rays, f.levels() - 1, None)
                .expect("radiance field");
            readout(t, y, &w)
        }),
    }
}

/// Names of every case, in report order.
pub fn oracle_names() -> Vec<&'static str> {
    let mut names = PRIMITIVES.to_vec();
    names.extend([
        "ste_lookup",
        "interpolate",
        "decode_point.image",
        "decode_point.sdf",
        "decode_point.radiance",
        "render_ray",
    ]);
    names
}

fn make_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    match name {
        "ste_lookup" => ste_case(rng),
        "interpolate" => interpolate_case(rng),
        "decode_point.image" => decode_case(rng, TaskKind::Image),
        "decode_point.sdf" => decode_case(rng, TaskKind::Sdf),
        "decode_point.radiance" => decode_case(rng, TaskKind::Radiance),
        "render_ray" => render_case(rng),
        p => primitive(p, rng),
    }
}

/// Runs every case on `seeds` random instances each.
pub fn run_oracles(seeds: u64) -> Result<Vec<OracleResult>, DiffError> {
    oracle_names()
        .into_iter()
        .map(|name| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let salt = name
                    .bytes()
                    .fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt << 16);
                let case = make_case(name, &mut rng);
                worst = worst.max(grad_check(&case.build, &case.point, ORACLE_EPS)?.worst());
            }
            Ok(OracleResult {
                name,
                seeds,
                max_rel_err: worst,
            })
        })
        .collect()
}
