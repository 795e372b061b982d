//! Right singular vectors via nalgebra, with a fixed order and sign.

use nalgebra::DMatrix;

use crate::diffcore::DenseMatrix;
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 10_000;

/// Singular values in descending order (ties keep nalgebra's order) and the
/// matching right singular vectors as the columns of `vectors` (`d x r`).
/// Each vector's first component above 1e-12 in magnitude is positive.
#[derive(Debug, Clone)]
pub struct RightSingular {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

pub fn right_singular_vectors(matrix: &DenseMatrix) -> Result<RightSingular> {
    let (rows, cols) = matrix.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Validation("SVD of an empty matrix".into()));
    }
    if !matrix.is_finite() {
        return Err(Error::NonFinite("SVD input".into()));
    }
    let m = DMatrix::from_row_slice(rows, cols, matrix.values());
    let svd = m
        .try_svd(false, true, f64::EPSILON, MAX_ITERATIONS)
        .ok_or_else(|| Error::NoConvergence(format!("SVD after {MAX_ITERATIONS} iterations")))?;
    let v_t = svd.v_t.expect("right vectors requested");
    let r = svd.singular_values.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
    let mut vectors = DenseMatrix::zeros(cols, r);
    for (dst, &src) in order.iter().enumerate() {
        let row = v_t.row(src);
        let flip = row.iter().find(|x| x.abs() > 1e-12).is_some_and(|&x| x < 0.0);
        for k in 0..cols {
            vectors.set(k, dst, if flip { -row[k] } else { row[k] });
        }
    }
    Ok(RightSingular {
        values: order.iter().map(|&i| svd.singular_values[i]).collect(),
        vectors,
    })
}
