//! MC-dropout baseline: an MLP classifier with dropout after every hidden
//! layer, kept active at inference and averaged over several passes.

use serde::{Deserialize, Serialize};

use super::mlp::{relu_backward, relu_in_place, DenseLayer};
use super::train::Adam;
use super::TrainConfig;
use crate::error::{check_dim, invalid, Error, Result};
use crate::numerics::{softmax, Matrix, Rng};

/// Number of stochastic passes used by the reference baseline.
pub const DEFAULT_PASSES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutHead {
    hidden: Vec<DenseLayer>,
    output: DenseLayer,
    rate: f64,
}

/// Mean class probabilities over stochastic passes and their per-class
/// (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McDropoutOutput {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl McDropoutOutput {
    /// Scalar tile uncertainty: the standard deviation of the predicted class.
    pub fn uncertainty(&self) -> f64 {
        self.std[crate::numerics::argmax(&self.mean)]
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(invalid(format!("dropout rate must lie in [0, 1), got {rate}")))
    }
}

impl DropoutHead {
    /// `dims` lists the input width and each hidden width.
    pub fn new(dims: &[usize], n_classes: usize, rate: f64, rng: &mut Rng) -> Result<Self> {
        check_rate(rate)?;
        if dims.len() < 2 || dims.contains(&0) || n_classes == 0 {
            return Err(invalid(
                "dropout head needs an input, at least one hidden layer and a class",
            ));
        }
        let hidden = dims.windows(2).map(|w| DenseLayer::random(w[0], w[1], rng)).collect();
        let output = DenseLayer::random(*dims.last().unwrap(), n_classes, rng);
        Ok(Self { hidden, output, rate })
    }

    pub fn from_layers(hidden: Vec<DenseLayer>, output: DenseLayer, rate: f64) -> Result<Self> {
        check_rate(rate)?;
        if hidden.is_empty() {
            return Err(invalid("at least one hidden layer is required"));
        }
        for pair in hidden.windows(2) {
            check_dim(pair[0].output_dim(), pair[1].input_dim())?;
        }
        check_dim(hidden.last().unwrap().output_dim(), output.input_dim())?;
        Ok(Self { hidden, output, rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn hidden(&self) -> &[DenseLayer] {
        &self.hidden
    }

    pub fn output(&self) -> &DenseLayer {
        &self.output
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.output.output_dim()
    }

    /// One forward pass. With `rng`, each hidden unit is dropped when its
    /// uniform draw falls below the rate and survivors are scaled by
    /// `1 / (1 - rate)`; draws are consumed layer by layer, unit by unit.
    pub fn forward(&self, x: &[f64], mut rng: Option<&mut Rng>) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let keep_scale = 1.0 / (1.0 - self.rate);
        let mut a = x.to_vec();
        for layer in &self.hidden {
            a = layer.forward(&a)?;
            for v in a.iter_mut() {
                *v = v.max(0.0);
                if let Some(r) = rng.as_deref_mut() {
                    if r.uniform() < self.rate {
                        *v = 0.0;
                    } else {
                        *v *= keep_scale;
                    }
                }
            }
        }
        Ok(softmax(&self.output.forward(&a)?))
    }

    /// Class probabilities with dropout disabled.
    pub fn predict_deterministic(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, None)
    }

    /// Trains with dropout active, cross-entropy loss and the Adam schedule
    /// of `cfg`.
    pub fn fit(
        x: &Matrix,
        labels: &[usize],
        n_classes: usize,
        dims: &[usize],
        rate: f64,
        cfg: &TrainConfig,
    ) -> Result<(Self, Vec<f64>)> {
        cfg.validate()?;
        check_dim(x.rows(), labels.len())?;
        if dims.first() != Some(&x.cols()) {
            return Err(invalid("first hidden dimension list entry must equal the input width"));
        }
        if labels.iter().any(|&y| y >= n_classes) {
            return Err(invalid("label outside class range"));
        }
        let mut init_rng = Rng::with_stream(cfg.seed, 1);
        let mut order_rng = Rng::with_stream(cfg.seed, 2);
        let mut mask_rng = Rng::with_stream(cfg.seed, 4);
        let mut head = Self::new(dims, n_classes, rate, &mut init_rng)?;

        let mut sizes: Vec<usize> = Vec::new();
        for l in head.hidden.iter().chain(std::iter::once(&head.output)) {
            sizes.push(l.weight.as_slice().len());
            sizes.push(l.bias.len());
        }
        let mut adam = Adam::new(cfg, &sizes);
        let keep_scale = 1.0 / (1.0 - rate);
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut step = 0usize;

        for epoch in 1..=cfg.epochs {
            let mut epoch_loss = 0.0;
            for batch in order_rng.permutation(x.rows()).chunks(cfg.batch_size) {
                let xb = x.select_rows(batch);
                let b = batch.len() as f64;
                let mut inputs = Vec::new();
                let mut pre = Vec::new();
                let mut masks = Vec::new();
                let mut a = xb;
                for layer in &head.hidden {
                    let z = layer.forward_batch(&a)?;
                    inputs.push(a);
                    let mut act = z.clone();
                    relu_in_place(&mut act);
                    let mask: Vec<f64> = (0..act.as_slice().len())
                        .map(|_| if mask_rng.uniform() < rate { 0.0 } else { keep_scale })
                        .collect();
                    for (v, m) in act.as_mut_slice().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    pre.push(z);
                    masks.push(mask);
                    a = act;
                }
                let logits = head.output.forward_batch(&a)?;
                let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
                let mut loss = 0.0;
                for (r, &i) in batch.iter().enumerate() {
                    let p = softmax(logits.row(r));
                    loss -= p[labels[i]].max(f64::MIN_POSITIVE).ln();
                    for (c, pc) in p.iter().enumerate() {
                        d_logits[(r, c)] = (pc - f64::from(u8::from(c == labels[i]))) / b;
                    }
                }
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                epoch_loss += loss;

                let (dw, db, mut da) = head.output.backward(&a, &d_logits)?;
                let mut hidden_grads = Vec::new();
                for l in (0..head.hidden.len()).rev() {
                    for (g, m) in da.as_mut_slice().iter_mut().zip(&masks[l]) {
                        *g *= m;
                    }
                    relu_backward(&mut da, &pre[l]);
                    let (w, bb, dx) = head.hidden[l].backward(&inputs[l], &da)?;
                    hidden_grads.push((w, bb));
                    da = dx;
                }
                hidden_grads.reverse();
                hidden_grads.push((dw, db));
                let mut grads: Vec<&[f64]> = Vec::with_capacity(sizes.len());
                for (w, bb) in &hidden_grads {
                    grads.push(w.as_slice());
                    grads.push(bb.as_slice());
                }
                let mut params: Vec<&mut [f64]> = Vec::with_capacity(sizes.len());
                for l in head.hidden.iter_mut().chain(std::iter::once(&mut head.output)) {
                    params.push(l.weight.as_mut_slice());
                    params.push(l.bias.as_mut_slice());
                }
                adam.step(params, grads, cfg.learning_rate_at(step));
                step += 1;
            }
            history.push(epoch_loss / x.rows() as f64);
        }
        Ok((head, history))
    }
}

/// Runs `passes` stochastic forward passes and summarizes them.
pub fn mc_dropout_predict(x: &[f64], head: &DropoutHead, passes: usize, rng: &mut Rng) -> Result<McDropoutOutput> {
    if passes < 2 {
        return Err(invalid("MC dropout needs at least two passes"));
    }
    let runs = (0..passes)
        .map(|_| head.forward(x, Some(rng)))
        .collect::<Result<Vec<_>>>()?;
    let k = head.n_classes();
    let n = passes as f64;
    let mean: Vec<f64> = (0..k).map(|c| runs.iter().map(|p| p[c]).sum::<f64>() / n).collect();
    let std = (0..k)
        .map(|c| (runs.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Ok(McDropoutOutput { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_head(rate: f64) -> DropoutHead {
        DropoutHead::new(&[4, 8, 6], 2, rate, &mut Rng::new(21)).unwrap()
    }

    #[test]
    fn zero_rate_has_zero_spread() {
        let head = small_head(0.0);
        let out = mc_dropout_predict(&[0.1, -0.4, 1.0, 0.3], &head, 5, &mut Rng::new(1)).unwrap();
        assert!(out.std.iter().all(|&s| s == 0.0));
        assert!((out.mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_output() {
        let head = small_head(0.1);
        let x = [0.5, 0.2, -0.7, 1.1];
        let a = mc_dropout_predict(&x, &head, 5, &mut Rng::new(8)).unwrap();
        let b = mc_dropout_predict(&x, &head, 5, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn needs_two_passes() {
        let head = small_head(0.1);
        assert!(mc_dropout_predict(&[0.0; 4], &head, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn rate_must_be_below_one() {
        assert!(DropoutHead::new(&[2, 3], 2, 1.0, &mut Rng::new(0)).is_err());
        assert!(DropoutHead::new(&[2, 3], 2, -0.1, &mut Rng::new(0)).is_err());
    }
}
