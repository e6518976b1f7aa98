use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{RffProjection, SnMlp};
use crate::error::{check_dim, invalid, Result};
use crate::numerics::{dot, softmax, Matrix, Rng};

/// Ridge posterior over the output weights.
///
/// The precision is `Phi^T Phi + tau I` over the training features and the
/// covariance `Sigma = tau * precision^{-1}` is shared by every class.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    beta: Matrix,
    precision: Matrix,
    tau: f64,
    /// `L^{-1}` for `precision = L L^T`.
    inv_factor: Matrix,
}

impl PartialEq for GpPosterior {
    fn eq(&self, other: &Self) -> bool {
        self.beta == other.beta && self.precision == other.precision && self.tau == other.tau
    }
}

impl GpPosterior {
    /// Builds the posterior from learned `beta` (`D_L x K`) and the
    /// training feature matrix (`N x D_L`).
    pub fn assemble(beta: Matrix, train_features: &Matrix, tau: f64) -> Result<Self> {
        check_dim(beta.rows(), train_features.cols())?;
        let mut precision = train_features.gemm(true, train_features, false)?;
        symmetrize(&mut precision);
        precision.add_diagonal(tau)?;
        Self::from_parts(beta, precision, tau)
    }

    pub fn from_parts(beta: Matrix, precision: Matrix, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(invalid(format!("ridge factor must be positive, got {tau}")));
        }
        check_dim(beta.rows(), precision.rows())?;
        if beta.cols() == 0 {
            return Err(invalid("posterior needs at least one class"));
        }
        if !beta.all_finite() {
            return Err(invalid("non-finite output weights"));
        }
        let scale = precision.as_slice().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if !precision.is_symmetric(1e-12 * scale) {
            return Err(invalid("precision matrix is not symmetric"));
        }
        let inv_factor = precision.cholesky()?.inverse_lower();
        Ok(Self {
            beta,
            precision,
            tau,
            inv_factor,
        })
    }

    pub fn beta(&self) -> &Matrix {
        &self.beta
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn n_classes(&self) -> usize {
        self.beta.cols()
    }

    pub fn rff_dim(&self) -> usize {
        self.beta.rows()
    }

    /// `sqrt(tau * phi^T (Phi^T Phi + tau I)^{-1} phi)`.
    pub fn uncertainty(&self, phi: &[f64]) -> Result<f64> {
        let z = self.inv_factor.matvec(phi)?;
        Ok((self.tau * dot(&z, &z)).sqrt())
    }

    pub fn uncertainty_batch(&self, phi: &Matrix) -> Result<Vec<f64>> {
        let z = phi.gemm(false, &self.inv_factor, true)?;
        Ok(z.row_iter().map(|r| (self.tau * dot(r, r)).sqrt()).collect())
    }

    pub fn logit_means(&self, phi: &[f64]) -> Result<Vec<f64>> {
        self.beta.t_matvec(phi)
    }
}

/// Averages mirrored entries so blocked products come out exactly symmetric.
fn symmetrize(m: &mut Matrix) {
    for i in 0..m.rows() {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// How `p(y | x) = E_{s ~ N(mu, sigma^2)} softmax(s)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PredictiveIntegral {
    /// `softmax(mu_k / sqrt(1 + pi/8 sigma_k^2))`.
    #[default]
    MeanField,
    /// Average of `softmax(mu + sigma z)` over seeded standard normal draws.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Per-input prediction: logit moments, class probabilities and the scalar
/// uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveOutput {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub probs: Vec<f64>,
    pub uncertainty: f64,
}

/// Class probabilities from per-class logit means and standard deviations.
pub fn probs_from_moments(mu: &[f64], sigma: &[f64], integral: PredictiveIntegral) -> Result<Vec<f64>> {
    check_dim(mu.len(), sigma.len())?;
    if sigma.iter().any(|s| *s < 0.0 || !s.is_finite()) {
        return Err(invalid("logit standard deviations must be finite and non-negative"));
    }
    match integral {
        PredictiveIntegral::MeanField => {
            let scaled: Vec<f64> = mu
                .iter()
                .zip(sigma)
                .map(|(m, s)| m / (1.0 + PI / 8.0 * s * s).sqrt())
                .collect();
            Ok(softmax(&scaled))
        }
        PredictiveIntegral::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(invalid("Monte Carlo integral needs at least one sample"));
            }
            let mut rng = Rng::new(seed);
            let mut acc = vec![0.0; mu.len()];
            let mut logits = vec![0.0; mu.len()];
            for _ in 0..samples {
                for ((l, m), s) in logits.iter_mut().zip(mu).zip(sigma) {
                    *l = m + s * rng.normal();
                }
                for (a, p) in acc.iter_mut().zip(softmax(&logits)) {
                    *a += p;
                }
            }
            let n = samples as f64;
            Ok(acc.into_iter().map(|a| a / n).collect())
        }
    }
}

/// Trained feature extractor, random feature map and GP output layer.
///
/// A head only exists once trained (or loaded from a checkpoint), so there
/// is no untrained state to guard against at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct SngpHead {
    mlp: SnMlp,
    rff: RffProjection,
    posterior: GpPosterior,
    integral: PredictiveIntegral,
}

/// Row-wise predictions for a batch of inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchPrediction {
    pub probs: Vec<Vec<f64>>,
    pub uncertainty: Vec<f64>,
}

const PREDICT_CHUNK: usize = 1024;

impl SngpHead {
    pub fn new(mlp: SnMlp, rff: RffProjection, posterior: GpPosterior) -> Result<Self> {
        check_dim(mlp.output_dim(), rff.input_dim())?;
        check_dim(rff.rff_dim(), posterior.rff_dim())?;
        Ok(Self {
            mlp,
            rff,
            posterior,
            integral: PredictiveIntegral::MeanField,
        })
    }

    pub fn with_integral(mut self, integral: PredictiveIntegral) -> Self {
        self.integral = integral;
        self
    }

    pub fn mlp(&self) -> &SnMlp {
        &self.mlp
    }

    pub fn rff(&self) -> &RffProjection {
        &self.rff
    }

    pub fn posterior(&self) -> &GpPosterior {
        &self.posterior
    }

    pub fn integral(&self) -> PredictiveIntegral {
        self.integral
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.posterior.n_classes()
    }

    /// Random features of one input.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.rff.transform(&self.mlp.forward_features(x)?)
    }

    pub fn predict(&self, x: &[f64]) -> Result<PredictiveOutput> {
        let phi = self.features(x)?;
        self.predict_from_features(&phi)
    }

    pub fn predict_from_features(&self, phi: &[f64]) -> Result<PredictiveOutput> {
        check_dim(self.posterior.rff_dim(), phi.len())?;
        let mu = self.posterior.logit_means(phi)?;
        let uncertainty = self.posterior.uncertainty(phi)?;
        // Sigma is shared, so every logit has the same variance.
        let sigma = vec![uncertainty; mu.len()];
        let probs = probs_from_moments(&mu, &sigma, self.integral)?;
        Ok(PredictiveOutput {
            mu,
            sigma,
            probs,
            uncertainty,
        })
    }

    /// Penultimate representations `h(x)` of every row.
    pub fn representations(&self, x: &Matrix) -> Result<Matrix> {
        self.mlp.forward_batch(x)
    }

    /// Probabilities and uncertainties for every row of `x`, evaluated in
    /// parallel chunks; the output order matches the input.
    pub fn predict_batch(&self, x: &Matrix) -> Result<BatchPrediction> {
        check_dim(self.input_dim(), x.cols())?;
        let starts: Vec<usize> = (0..x.rows()).step_by(PREDICT_CHUNK).collect();
        let parts = starts
            .par_iter()
            .map(|&start| {
                let end = (start + PREDICT_CHUNK).min(x.rows());
                let idx: Vec<usize> = (start..end).collect();
                self.predict_chunk(&x.select_rows(&idx))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = BatchPrediction::default();
        for part in parts {
            out.probs.extend(part.probs);
            out.uncertainty.extend(part.uncertainty);
        }
        Ok(out)
    }

    fn predict_chunk(&self, x: &Matrix) -> Result<BatchPrediction> {
        let phi = self.rff.transform_batch(&self.mlp.forward_batch(x)?)?;
        let mu = phi.matmul(self.posterior.beta())?;
        let uncertainty = self.posterior.uncertainty_batch(&phi)?;
        let probs = mu
            .row_iter()
            .zip(&uncertainty)
            .map(|(m, &u)| probs_from_moments(m, &vec![u; m.len()], self.integral))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchPrediction { probs, uncertainty })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_plain_softmax() {
        let mu = [1.0, -0.5, 2.0];
        let p = probs_from_moments(&mu, &[0.0; 3], PredictiveIntegral::MeanField).unwrap();
        assert_eq!(p, softmax(&mu));
        let mc = probs_from_moments(&mu, &[0.0; 3], PredictiveIntegral::MonteCarlo { samples: 10, seed: 1 }).unwrap();
        for (a, b) in mc.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_field_tracks_monte_carlo() {
        let mu = [1.2, -0.3];
        let sigma = [0.8, 0.8];
        let mf = probs_from_moments(&mu, &sigma, PredictiveIntegral::MeanField).unwrap();
        let mc = probs_from_moments(
            &mu,
            &sigma,
            PredictiveIntegral::MonteCarlo {
                samples: 20_000,
                seed: 3,
            },
        )
        .unwrap();
        for (a, b) in mf.iter().zip(&mc) {
            assert!((a - b).abs() < 0.03, "{mf:?} vs {mc:?}");
        }
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(probs_from_moments(&[0.0, 0.0], &[-1.0, 0.0], PredictiveIntegral::MeanField).is_err());
    }

    #[test]
    fn orthogonal_probe_has_full_prior_uncertainty() {
        // Training features live in the first two coordinates only.
        let train = Matrix::new(3, 4, vec![1., 0., 0., 0., 0., 1., 0., 0., 1., 1., 0., 0.]).unwrap();
        let post = GpPosterior::assemble(Matrix::zeros(4, 2), &train, 1.0).unwrap();
        let probe = [0.0, 0.0, 0.6, 0.8];
        assert!((post.uncertainty(&probe).unwrap() - 1.0).abs() < 1e-12);
        let near = [0.6, 0.8, 0.0, 0.0];
        assert!(post.uncertainty(&near).unwrap() < 1.0);
    }

    #[test]
    fn rejects_bad_tau() {
        assert!(GpPosterior::assemble(Matrix::zeros(2, 2), &Matrix::zeros(1, 2), 0.0).is_err());
    }
}
