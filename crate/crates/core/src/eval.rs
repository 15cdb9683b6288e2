//! Image metrics and rate-distortion curves over streamed level prefixes.

use std::io::Write;

use crate::codec::{self, CodecError};
use crate::data::{slice_shade, View};
use crate::field::{FieldError, NeuralField, TaskKind};
use crate::raster::Image;

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("image sizes differ: {a:?} vs {b:?}")]
    Dimensions {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("image {0:?} is smaller than the 11x11 window")]
    TooSmall((usize, usize)),
    #[error("no evaluation views")]
    NoViews,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn same_size(a: &Image, b: &Image) -> Result<(), EvalError> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(EvalError::Dimensions {
            a: (a.width(), a.height()),
            b: (b.width(), b.height()),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio for peak 1.0, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, EvalError> {
    same_size(a, b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, EvalError> {
    same_size(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall((w, h)));
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..3 {
        let pa = a.channel(c);
        let pb = b.channel(c);
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let aa = filter_valid(&prod(&pa, &pa), w, h, &k);
        let bb = filter_valid(&prod(&pb, &pb), w, h, &k);
        let ab = filter_valid(&prod(&pa, &pb), w, h, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Renders `view` with levels `0..=lod`.
pub fn render_view(field: &NeuralField, view: &View, lod: usize) -> Result<Image, EvalError> {
    let (w, h) = view.size();
    let img = match (view, field.task) {
        (View::Pixels { .. }, TaskKind::Image) => {
            Image::from_matrix(w, h, &field.decode_points(&view.coords(), None, lod)?)
        }
        (View::Slice { .. }, TaskKind::Sdf) => {
            let d = field.decode_points(&view.coords(), None, lod)?;
            let shades = d.data().iter().flat_map(|&v| [slice_shade(v); 3]).collect();
            Image::from_vec(w, h, shades)
        }
        (View::Camera(cam), TaskKind::Radiance) => {
            Image::from_matrix(w, h, &field.render_rays(&cam.rays(), lod)?)
        }
        _ => {
            return Err(FieldError::Mismatch(format!(
                "{:?} models cannot render this view",
                field.task
            ))
            .into())
        }
    };
    Ok(img.expect("renders match the view size"))
}

/// Mean PSNR and SSIM of `field` at `lod` over reference views. SSIM is
/// skipped (reported as NaN) for views smaller than the window.
pub fn evaluate(
    field: &NeuralField,
    views: &[(View, Image)],
    lod: usize,
) -> Result<(f64, f64), EvalError> {
    if views.is_empty() {
        return Err(EvalError::NoViews);
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for (view, reference) in views {
        let img = render_view(field, view, lod)?;
        p += psnr(&img, reference)?;
        s += match ssim(&img, reference) {
            Ok(v) => v,
            Err(EvalError::TooSmall(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
    }
    let n = views.len() as f64;
    Ok((p / n, s / n))
}

/// Quality after receiving levels `0..=lod`, and the bytes that took.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub lod: usize,
    pub bytes: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// One point per level, decoding each prefix of `stream` on its own.
pub fn rate_distortion(stream: &[u8], views: &[(View, Image)]) -> Result<Vec<RdPoint>, EvalError> {
    let ends = codec::level_ends(stream)?;
    let mut out = Vec::with_capacity(ends.len());
    for (lod, &bytes) in ends.iter().enumerate() {
        let model = codec::decode_prefix(&stream[..bytes], lod + 1)?;
        let (psnr_db, ssim) = evaluate(&model, views, lod)?;
        out.push(RdPoint {
            lod,
            bytes,
            psnr_db,
            ssim,
        });
    }
    Ok(out)
}

/// CSV with header `lod,bytes,psnr_db,ssim`.
pub fn write_rd_csv<W: Write>(points: &[RdPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "lod,bytes,psnr_db,ssim")?;
    for p in points {
        writeln!(out, "{},{},{:.4},{:.6}", p.lod, p.bytes, p.psnr_db, p.ssim)?;
    }
    Ok(())
}
