use super::{norm, Matrix, Rng};
use crate::error::{invalid, Result};

/// Estimates the largest singular value of `w` by power iteration.
///
/// Starts from a seeded random unit vector and runs exactly `iterations`
/// steps of `v <- W^T W v / |W^T W v|`; there is no early exit, so the cost
/// and the result are fixed by the inputs and the generator state.
pub fn spectral_norm(w: &Matrix, iterations: usize, rng: &mut Rng) -> Result<f64> {
    if w.rows() == 0 || w.cols() == 0 {
        return Err(invalid("spectral_norm of an empty matrix"));
    }
    if iterations == 0 {
        return Err(invalid("power iteration needs at least one step"));
    }
    let mut v = rng.unit_vector(w.cols());
    for _ in 0..iterations {
        let u = w.matvec(&v)?;
        let next = w.t_matvec(&u)?;
        let n = norm(&next);
        if n == 0.0 {
            return Ok(0.0);
        }
        v = next.into_iter().map(|x| x / n).collect();
    }
    Ok(norm(&w.matvec(&v)?))
}

/// Rescales `w` to spectral norm `cap` when the estimate exceeds it.
///
/// Returns `cap * W / lambda` if `lambda > cap`, otherwise `W` unchanged.
pub fn apply_spectral_normalization(w: &Matrix, cap: f64, power_iters: usize, rng: &mut Rng) -> Result<Matrix> {
    if !(cap > 0.0) || !cap.is_finite() {
        return Err(invalid(format!("spectral cap must be positive, got {cap}")));
    }
    let lambda = spectral_norm(w, power_iters, rng)?;
    if lambda > cap {
        Ok(w.scaled(cap / lambda))
    } else {
        Ok(w.clone())
    }
}
