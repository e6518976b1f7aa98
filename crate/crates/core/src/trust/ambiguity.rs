use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::numerics::{dot, Matrix};
use crate::sngp::SngpHead;

/// `1 - |p0 - p1|` for a two-class probability pair.
pub fn ambiguity_score(probs: &[f64]) -> Result<f64> {
    match probs {
        [p0, p1] => {
            if !(0.0..=1.0).contains(p0) || !(0.0..=1.0).contains(p1) {
                return Err(invalid("probabilities must lie in [0, 1]"));
            }
            Ok((1.0 - (p0 - p1).abs()).clamp(0.0, 1.0))
        }
        _ => Err(invalid(format!(
            "ambiguity needs exactly two classes, got {}",
            probs.len()
        ))),
    }
}

/// L2-regularized logistic regression fitted by Newton's method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProxy {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticProxy {
    /// Minimizes the mean log loss plus `l2 / 2 * |w|^2` (the bias is not
    /// penalized). Labels are 0 or 1.
    pub fn fit(x: &Matrix, labels: &[usize], l2: f64, max_iters: usize) -> Result<Self> {
        check_dim(x.rows(), labels.len())?;
        if x.rows() == 0 {
            return Err(invalid("no training tiles"));
        }
        if !(l2 > 0.0) {
            return Err(invalid("l2 penalty must be positive"));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(invalid("logistic proxy is binary"));
        }
        let d = x.cols();
        let n = x.rows() as f64;
        let mut theta = vec![0.0; d + 1];
        for _ in 0..max_iters.max(1) {
            let mut grad = vec![0.0; d + 1];
            let mut hess = Matrix::zeros(d + 1, d + 1);
            for (row, &y) in x.row_iter().zip(labels) {
                let p = sigmoid(dot(&theta[..d], row) + theta[d]);
                let r = (p - y as f64) / n;
                let w = p * (1.0 - p) / n;
                for i in 0..=d {
                    let xi = if i < d { row[i] } else { 1.0 };
                    grad[i] += r * xi;
                    for j in 0..=i {
                        let xj = if j < d { row[j] } else { 1.0 };
                        hess[(i, j)] += w * xi * xj;
                    }
                }
            }
            for i in 0..d {
                grad[i] += l2 * theta[i];
                hess[(i, i)] += l2;
            }
            hess[(d, d)] += 1e-12;
            for i in 0..=d {
                for j in 0..i {
                    let v = hess[(i, j)];
                    hess[(j, i)] = v;
                }
            }
            let step = hess.cholesky()?.solve(&grad)?;
            for (t, s) in theta.iter_mut().zip(&step) {
                *t -= s;
            }
            if step.iter().map(|s| s * s).sum::<f64>().sqrt() < 1e-10 {
                break;
            }
        }
        let bias = theta.pop().unwrap();
        Ok(Self {
            weights: theta,
            bias,
            l2,
        })
    }

    /// `(p(y=0), p(y=1))` for one tile.
    pub fn predict(&self, x: &[f64]) -> Result<[f64; 2]> {
        check_dim(self.weights.len(), x.len())?;
        let p1 = sigmoid(dot(&self.weights, x) + self.bias);
        Ok([1.0 - p1, p1])
    }
}

/// Source of the tile probabilities behind the ambiguity score.
#[derive(Debug, Clone)]
pub enum AmbiguityModel {
    SngpHead(Box<SngpHead>),
    LogisticProxy(LogisticProxy),
}

impl AmbiguityModel {
    pub fn tile_probs(&self, tiles: &Matrix) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::SngpHead(head) => Ok(head.predict_batch(tiles)?.probs),
            Self::LogisticProxy(m) => tiles.row_iter().map(|r| Ok(m.predict(r)?.to_vec())).collect(),
        }
    }

    pub fn scores(&self, tiles: &Matrix) -> Result<Vec<f64>> {
        self.tile_probs(tiles)?.iter().map(|p| ambiguity_score(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn score_examples() {
        assert_eq!(ambiguity_score(&[0.5, 0.5]).unwrap(), 1.0);
        assert_eq!(ambiguity_score(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((ambiguity_score(&[0.8, 0.2]).unwrap() - 0.4).abs() < 1e-15);
        assert!(ambiguity_score(&[0.2, 0.3, 0.5]).is_err());
    }

    #[test]
    fn logistic_separates_and_matches_stationarity() {
        let mut rng = Rng::new(5);
        let x = Matrix::from_fn(200, 2, |r, c| if c == 0 { if r % 2 == 0 { -1.0 } else { 1.0 } } else { 0.0 } + 0.5 * rng.normal());
        let y: Vec<usize> = (0..200).map(|r| r % 2).collect();
        let m = LogisticProxy::fit(&x, &y, 1e-2, 50).unwrap();
        let correct = x
            .row_iter()
            .zip(&y)
            .filter(|(r, &t)| (m.predict(r).unwrap()[1] > 0.5) == (t == 1))
            .count();
        assert!(correct >= 180);
        // gradient of the objective vanishes at the fit
        let mut g = [0.0; 3];
        for (r, &t) in x.row_iter().zip(&y) {
            let resid = m.predict(r).unwrap()[1] - t as f64;
            g[0] += resid * r[0] / 200.0;
            g[1] += resid * r[1] / 200.0;
            g[2] += resid / 200.0;
        }
        g[0] += 1e-2 * m.weights[0];
        g[1] += 1e-2 * m.weights[1];
        assert!(g.iter().all(|v| v.abs() < 1e-9), "{g:?}");
    }
}
