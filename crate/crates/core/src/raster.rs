//! Linear-RGB float images and PNG I/O.

use std::path::Path;

use crate::diffcore::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("{width}x{height} image needs {expected} values, got {got}")]
    Size {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
}

/// Row-major RGB image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if data.len() != width * height * 3 {
            return Err(RasterError::Size {
                width,
                height,
                expected: width * height * 3,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Takes the first three columns of an `(width·height) × c` matrix.
    pub fn from_matrix(width: usize, height: usize, m: &Matrix) -> Result<Self, RasterError> {
        if m.rows() != width * height || m.cols() < 3 {
            return Err(RasterError::Size {
                width,
                height,
                expected: width * height * 3,
                got: m.rows() * m.cols().min(3),
            });
        }
        let data = (0..m.rows()).flat_map(|r| m.row(r)[..3].to_vec()).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.width * self.height, 3, self.data.clone())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Loads 8- or 16-bit PNG as RGB, dropping alpha.
    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path)?.into_rgb32f();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(f64::from).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
