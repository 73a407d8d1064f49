//! Few-shot subsampling and span masking of patch grids.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Float, Tensor};

/// `ceil(fraction · n)` items drawn without replacement, in draw order.
pub fn subsample_fraction<E: Clone>(items: &[E], fraction: f64, seed: u64) -> Result<Vec<E>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    if items.is_empty() {
        return Err(Error::Empty("items to subsample"));
    }
    // Guard against 0.1·1000 = 100.00000000000001 style round-up.
    let m = ((fraction * items.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    RngState::new(seed).shuffle(&mut idx);
    Ok(idx[..m.min(items.len())].iter().map(|&i| items[i].clone()).collect())
}

/// Zeroes `span_a` consecutive grid rows and `span_b` consecutive grid columns,
/// at random offsets. The patch tensor is `[rows·cols, f]`, row-major.
pub fn mask_spans<T: Float>(
    perception: &Tensor<T>,
    rows: usize,
    cols: usize,
    span_a: usize,
    span_b: usize,
    rng: &mut RngState,
) -> Result<Tensor<T>> {
    let (n, f) = perception.as_matrix_dims();
    if n != rows * cols {
        return Err(Error::shape("mask_spans", &[n, f], &[rows * cols, f]));
    }
    if span_a > rows || span_b > cols {
        return Err(Error::Config(format!(
            "mask spans ({span_a}, {span_b}) exceed grid ({rows}, {cols})"
        )));
    }
    let r0 = rng.below(rows - span_a + 1);
    let c0 = rng.below(cols - span_b + 1);
    let mut data = perception.data().to_vec();
    for cell in 0..n {
        let (r, c) = (cell / cols, cell % cols);
        if (r0..r0 + span_a).contains(&r) || (c0..c0 + span_b).contains(&c) {
            data[cell * f..(cell + 1) * f].fill(T::zero());
        }
    }
    Tensor::new(vec![n, f], data)
}
