use super::{DiffError, ForwardMode, Matrix, NodeId, Tape};

/// Comparison of reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest relative error per parameter, in the order supplied.
    pub max_rel_err: Vec<f64>,
    pub eps: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

/// `|a − b| / max(|a|, |b|, 1e−6)`. Below the floor, central differences in
/// `f64` carry more roundoff than signal, so the error is effectively absolute.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks `build` at `point` against `(f(p+eps) − f(p−eps)) / 2eps` for every
/// coordinate of every parameter.
///
/// `build` receives a tape and one trainable node per entry of `point` and
/// returns the scalar loss node. The analytic gradient comes from a
/// [`ForwardMode::Hard`] tape; finite differences are taken on a
/// [`ForwardMode::Soft`] tape, so straight-through nodes are checked against
/// their surrogate path.
pub fn grad_check<F>(build: F, point: &[Matrix], eps: f64) -> Result<GradReport, DiffError>
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::with_mode(ForwardMode::Hard);
    let ids: Vec<NodeId> = point.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids);
    check_finite(tape.value(loss))?;
    let grads = tape.backward(loss)?;

    let eval = |params: &[Matrix]| -> Result<f64, DiffError> {
        let mut tape = Tape::with_mode(ForwardMode::Soft);
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids);
        check_finite(tape.value(loss))
    };

    let mut work: Vec<Matrix> = point.to_vec();
    let mut max_rel_err = Vec::with_capacity(point.len());
    for (pi, id) in ids.iter().enumerate() {
        let zeros = Matrix::zeros(point[pi].rows(), point[pi].cols());
        let analytic = grads.get(*id).unwrap_or(&zeros).clone();
        let mut worst: f64 = 0.0;
        for j in 0..point[pi].len() {
            let orig = point[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
        max_rel_err.push(worst);
    }
    Ok(GradReport { max_rel_err, eps })
}

fn check_finite(value: &Matrix) -> Result<f64, DiffError> {
    let v = value.as_scalar().ok_or(DiffError::NonScalarLoss {
        rows: value.rows(),
        cols: value.cols(),
    })?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DiffError::NonFinite { value: v })
    }
}
