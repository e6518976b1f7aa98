use serde::{Deserialize, Serialize};

use super::{GpPosterior, RffProjection, SnMlp, SnMlpConfig, SngpHead};
use crate::error::{check_dim, invalid, Error, Result};
use crate::numerics::{argmax, softmax, Matrix, Rng};

/// Optimizer schedule. Defaults are the reference training recipe: Adam
/// with moment decays (0.9, 0.999), learning rate 3e-4 decayed by 0.98
/// every 512 steps, batch size 64, four epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Ridge factor `tau` of the output-layer posterior.
    pub ridge_tau: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 64,
            learning_rate: 3e-4,
            lr_decay_factor: 0.98,
            lr_decay_steps: 512,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            ridge_tau: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for the small synthetic scenarios: more passes at a larger
    /// step size, since a few thousand tiles give only a handful of steps
    /// per epoch.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            learning_rate: 3e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning rate must be positive"));
        }
        if !(self.lr_decay_factor > 0.0) || self.lr_decay_steps == 0 {
            return Err(invalid("learning rate decay must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam moment decays must lie in [0, 1)"));
        }
        if !(self.ridge_tau > 0.0) {
            return Err(invalid("ridge factor must be positive"));
        }
        Ok(())
    }

    /// Exponentially decayed step size at optimizer step `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powf(step as f64 / self.lr_decay_steps as f64)
    }
}

/// Adam with one moment buffer per parameter tensor.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Loss curve and final fit statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Mean training cross-entropy before training (index 0) and after
    /// each epoch.
    pub loss_history: Vec<f64>,
    pub train_accuracy: f64,
    pub steps: usize,
}

pub(crate) struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub beta: Matrix,
}

/// Mean cross-entropy of a batch plus the Gaussian prior on `beta`,
/// `|beta|^2 / (2 n_total)`, and its gradients.
pub(crate) fn batch_loss_and_grad(
    mlp: &SnMlp,
    rff: &RffProjection,
    beta: &Matrix,
    x: &Matrix,
    labels: &[usize],
    n_total: usize,
) -> Result<(f64, Gradients)> {
    let b = x.rows();
    let trace = mlp.forward_trace(x)?;
    let (phi, sin) = rff.transform_batch_with_sin(&trace.output)?;
    let logits = phi.matmul(beta)?;
    let k = beta.cols();

    let mut loss = 0.0;
    let mut d_logits = Matrix::zeros(b, k);
    for (r, &y) in labels.iter().enumerate() {
        let p = softmax(logits.row(r));
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for (c, pc) in p.iter().enumerate() {
            d_logits[(r, c)] = (pc - if c == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    loss /= b as f64;
    let prior = 0.5 * beta.as_slice().iter().map(|v| v * v).sum::<f64>() / n_total as f64;
    loss += prior;

    let mut d_beta = phi.gemm(true, &d_logits, false)?;
    for (g, w) in d_beta.as_mut_slice().iter_mut().zip(beta.as_slice()) {
        *g += w / n_total as f64;
    }
    // phi = s cos(a), a = b - W h  =>  dL/dh = s * (sin(a) . dL/dphi) W.
    let mut d_phi = d_logits.gemm(false, beta, true)?;
    let s = rff.amplitude();
    for (g, sv) in d_phi.as_mut_slice().iter_mut().zip(sin.as_slice()) {
        *g *= s * sv;
    }
    let d_h = d_phi.matmul(rff.weight())?;
    let layers = mlp.backward(&trace, d_h)?;
    Ok((loss, Gradients { layers, beta: d_beta }))
}

fn mean_cross_entropy(
    mlp: &SnMlp,
    rff: &RffProjection,
    beta: &Matrix,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let logits = rff.transform_batch(&mlp.forward_batch(x)?)?.matmul(beta)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let p = softmax(logits.row(r));
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        correct += usize::from(argmax(logits.row(r)) == y);
    }
    let n = labels.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains the feature extractor and output weights end to end, then
/// assembles the ridge posterior from the final training features.
///
/// Spectral normalization is re-applied to every hidden layer after each
/// optimizer step. The random feature map stays frozen.
pub fn fit_head(
    x: &Matrix,
    labels: &[usize],
    n_classes: usize,
    mlp_config: &SnMlpConfig,
    rff: RffProjection,
    cfg: &TrainConfig,
) -> Result<(SngpHead, FitReport)> {
    cfg.validate()?;
    mlp_config.validate()?;
    check_dim(x.rows(), labels.len())?;
    check_dim(mlp_config.input_dim(), x.cols())?;
    check_dim(mlp_config.output_dim(), rff.input_dim())?;
    if n_classes == 0 {
        return Err(invalid("need at least one class"));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(invalid(format!("label {bad} outside 0..{n_classes}")));
    }
    if x.rows() < n_classes {
        return Err(invalid("fewer training rows than classes"));
    }

    let mut init_rng = Rng::with_stream(cfg.seed, 1);
    let mut order_rng = Rng::with_stream(cfg.seed, 2);
    let mut sn_rng = Rng::with_stream(cfg.seed, 3);

    let mut mlp = SnMlp::new(mlp_config.clone(), &mut init_rng)?;
    let mut beta = Matrix::zeros(rff.rff_dim(), n_classes);
    let n = x.rows();

    let mut sizes: Vec<usize> = mlp
        .layers()
        .iter()
        .flat_map(|l| [l.weight.as_slice().len(), l.bias.len()])
        .collect();
    sizes.push(beta.as_slice().len());
    let mut adam = Adam::new(cfg, &sizes);

    let (initial, _) = mean_cross_entropy(&mlp, &rff, &beta, x, labels)?;
    let mut history = vec![initial];
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let order = order_rng.permutation(n);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&mlp, &rff, &beta, &xb, &yb, n)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let lr = cfg.learning_rate_at(step);
            let mut params: Vec<&mut [f64]> = Vec::with_capacity(sizes.len());
            for layer in mlp.layers_mut() {
                params.push(layer.weight.as_mut_slice());
                params.push(layer.bias.as_mut_slice());
            }
            params.push(beta.as_mut_slice());
            let mut gs: Vec<&[f64]> = Vec::with_capacity(sizes.len());
            for (dw, db) in &grads.layers {
                gs.push(dw.as_slice());
                gs.push(db.as_slice());
            }
            gs.push(grads.beta.as_slice());
            adam.step(params, gs, lr);
            mlp.normalize(&mut sn_rng)?;
            step += 1;
        }
        let (epoch_loss, _) = mean_cross_entropy(&mlp, &rff, &beta, x, labels)?;
        if !epoch_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(epoch_loss);
    }

    let (_, train_accuracy) = mean_cross_entropy(&mlp, &rff, &beta, x, labels)?;
    let features = rff.transform_batch(&mlp.forward_batch(x)?)?;
    let posterior = GpPosterior::assemble(beta, &features, cfg.ridge_tau)?;
    let head = SngpHead::new(mlp, rff, posterior)?;
    Ok((
        head,
        FitReport {
            loss_history: history,
            train_accuracy,
            steps: step,
        },
    ))
}
