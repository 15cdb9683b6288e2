use crate::diffcore::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Moments {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        }
    }

    /// One bias-corrected Adam step on `param`.
    pub fn update(&mut self, param: &mut Matrix, grad: &Matrix, lr: f64) {
        debug_assert_eq!(param.shape(), grad.shape());
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let p = param.data_mut().iter_mut();
        let m = self.m.data_mut().iter_mut();
        let v = self.v.data_mut().iter_mut();
        for (((p, m), v), g) in p.zip(m).zip(v).zip(grad.data()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
    }
}
