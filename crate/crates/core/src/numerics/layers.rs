//! Eager forms of the basic layers. The differentiable versions live on
//! [`Graph`](super::Graph) and share the same kernels.

use super::kernels::{matmul_acc, softmax_in_place};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// `x·W + b` for `x` n×Din, `W` Din×Dout, `b` of length Dout.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din) = (x.rows(), x.cols());
    if w.shape().len() != 2 || w.shape()[0] != din {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let dout = w.shape()[1];
    if b.len() != dout {
        return Err(Error::shape("linear bias", w.shape(), b.shape()));
    }
    let mut out = vec![0.0; n * dout];
    matmul_acc(x.values(), w.values(), &mut out, n, din, dout);
    for row in out.chunks_mut(dout.max(1)) {
        row.iter_mut().zip(b.values()).for_each(|(o, bb)| *o += bb);
    }
    Tensor::new(vec![n, dout], out)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::InvalidArgument(format!("leaky slope {slope} outside (0,1)")));
    }
    let v = x
        .values()
        .iter()
        .map(|&a| if a > 0.0 { a } else { slope * a })
        .collect();
    Tensor::new(x.shape().to_vec(), v)
}

/// Row-wise softmax of a row-major score matrix with `cols` columns.
/// Entries may be `-inf` (masked); a row with no finite entry is an error.
pub fn softmax_rows(scores: &[f64], cols: usize) -> Result<Vec<f64>> {
    if cols == 0 || !scores.len().is_multiple_of(cols) {
        return Err(Error::shape("softmax_rows", &[scores.len()], &[cols]));
    }
    if let Some(index) = scores.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite {
            context: "softmax_rows",
            index,
        });
    }
    let mut out = scores.to_vec();
    for (row, chunk) in out.chunks_mut(cols).enumerate() {
        if !softmax_in_place(chunk) {
            return Err(Error::DegenerateRow { row });
        }
    }
    Ok(out)
}
