use crate::autodiff::Array;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn centered(x: &Array, name: &str) -> Result<DMatrix<f64>> {
    let (n, p) = match x.shape() {
        &[n, p] => (n, p),
        s => return Err(Error::InvalidInput(format!("{name} must be [samples, features], got {s:?}"))),
    };
    if n < 2 {
        return Err(Error::InvalidInput(format!("CKA needs at least 2 samples, {name} has {n}")));
    }
    let mut m = DMatrix::from_row_slice(n, p, x.data());
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    if m.norm() == 0.0 {
        return Err(Error::InvalidInput(format!("{name} has zero variance; CKA is undefined")));
    }
    Ok(m)
}

/// Linear CKA `‖YᵀX‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F)` of column-centered
/// `x: [n, p]` and `y: [n, q]`.
pub fn linear_cka(x: &Array, y: &Array) -> Result<f64> {
    if x.shape().first() != y.shape().first() {
        return Err(Error::InvalidInput(format!(
            "CKA inputs differ in sample count: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let x = centered(x, "X")?;
    let y = centered(y, "Y")?;
    let cross = (y.transpose() * &x).norm_squared();
    let sx = (x.transpose() * &x).norm();
    let sy = (y.transpose() * &y).norm();
    Ok((cross / (sx * sy)).clamp(0.0, 1.0))
}
