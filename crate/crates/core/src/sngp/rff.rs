use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::numerics::{Matrix, Rng};

/// Frozen random Fourier feature map approximating the unit-lengthscale
/// RBF kernel: `phi(h) = sqrt(2 / D) * cos(-W h + b)` with `W ~ N(0, 1)`
/// and `b ~ U[0, 2 pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffProjection {
    weight: Matrix,
    bias: Vec<f64>,
}

impl RffProjection {
    pub fn new(input_dim: usize, rff_dim: usize, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || rff_dim == 0 {
            return Err(invalid("random feature dimensions must be positive"));
        }
        let weight = Matrix::from_fn(rff_dim, input_dim, |_, _| rng.normal());
        let bias = (0..rff_dim).map(|_| rng.uniform_range(0.0, 2.0 * PI)).collect();
        Ok(Self { weight, bias })
    }

    /// `weight` is `rff_dim x input_dim`.
    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        check_dim(weight.rows(), bias.len())?;
        if weight.rows() == 0 || weight.cols() == 0 {
            return Err(invalid("random feature dimensions must be positive"));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(invalid("non-finite random feature bias"));
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn rff_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn amplitude(&self) -> f64 {
        (2.0 / self.rff_dim() as f64).sqrt()
    }

    pub fn transform(&self, h: &[f64]) -> Result<Vec<f64>> {
        let s = self.amplitude();
        let wh = self.weight.matvec(h)?;
        Ok(wh.iter().zip(&self.bias).map(|(u, b)| s * (b - u).cos()).collect())
    }

    pub fn transform_batch(&self, h: &Matrix) -> Result<Matrix> {
        check_dim(self.input_dim(), h.cols())?;
        let mut phi = h.gemm(false, &self.weight, true)?;
        let s = self.amplitude();
        for r in 0..phi.rows() {
            for (v, b) in phi.row_mut(r).iter_mut().zip(&self.bias) {
                *v = s * (b - *v).cos();
            }
        }
        Ok(phi)
    }

    /// Returns `(phi, sin_arg)` where `sin_arg = sin(-W h + b)`, kept for
    /// backpropagation.
    pub(crate) fn transform_batch_with_sin(&self, h: &Matrix) -> Result<(Matrix, Matrix)> {
        check_dim(self.input_dim(), h.cols())?;
        let mut phi = h.gemm(false, &self.weight, true)?;
        let mut sin = Matrix::zeros(phi.rows(), phi.cols());
        let s = self.amplitude();
        for r in 0..phi.rows() {
            for (c, b) in self.bias.iter().enumerate() {
                let arg = b - phi[(r, c)];
                phi[(r, c)] = s * arg.cos();
                sin[(r, c)] = arg.sin();
            }
        }
        Ok((phi, sin))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_zero_bias() {
        let mut rng = Rng::new(0);
        let proj = RffProjection::new(3, 16, &mut rng).unwrap();
        let flat = RffProjection::from_parts(proj.weight().clone(), vec![0.0; 16]).unwrap();
        let phi = flat.transform(&[0.0, 0.0, 0.0]).unwrap();
        let s = (2.0_f64 / 16.0).sqrt();
        assert!(phi.iter().all(|&v| v == s));
    }

    #[test]
    fn entries_bounded() {
        let mut rng = Rng::new(1);
        let proj = RffProjection::new(4, 64, &mut rng).unwrap();
        let s = proj.amplitude();
        let h: Vec<f64> = (0..4).map(|_| 3.0 * rng.normal()).collect();
        assert!(proj.transform(&h).unwrap().iter().all(|v| v.abs() <= s));
    }

    #[test]
    fn batch_matches_single() {
        let mut rng = Rng::new(2);
        let proj = RffProjection::new(3, 32, &mut rng).unwrap();
        let h = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let batch = proj.transform_batch(&h).unwrap();
        let (with_sin, _) = proj.transform_batch_with_sin(&h).unwrap();
        for r in 0..5 {
            let single = proj.transform(h.row(r)).unwrap();
            for ((a, b), c) in single.iter().zip(batch.row(r)).zip(with_sin.row(r)) {
                assert!((a - b).abs() < 1e-12);
                assert_eq!(b, c);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let proj = RffProjection::new(3, 8, &mut Rng::new(0)).unwrap();
        assert!(proj.transform(&[1.0]).is_err());
        assert!(RffProjection::from_parts(Matrix::zeros(2, 2), vec![0.0]).is_err());
    }
}
