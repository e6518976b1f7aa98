use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::numerics::{apply_spectral_normalization, Matrix, Rng};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Shape and spectral cap of the feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnMlpConfig {
    /// Input dimension followed by each hidden width; the last entry is the
    /// penultimate representation fed to the random features.
    pub layer_dims: Vec<usize>,
    /// Upper bound `c` on each layer's spectral norm.
    pub spectral_cap: f64,
    pub power_iters: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl SnMlpConfig {
    /// Desk-scale default: two hidden layers of width 64.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            layer_dims: vec![input_dim, 64, 64],
            spectral_cap: 1.0,
            power_iters: 100,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(invalid("at least one hidden layer is required"));
        }
        if self.layer_dims.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if !(self.spectral_cap > 0.0) || !self.spectral_cap.is_finite() {
            return Err(invalid("spectral cap must be positive"));
        }
        if self.power_iters == 0 {
            return Err(invalid("power_iters must be at least 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }
}

/// Fully connected layer, `z = W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        check_dim(weight.rows(), bias.len())?;
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(invalid("non-finite bias"));
        }
        Ok(Self { weight, bias })
    }

    /// He-style Gaussian weights, zero bias.
    pub fn random(input: usize, output: usize, rng: &mut Rng) -> Self {
        let scale = (2.0 / input as f64).sqrt();
        Self {
            weight: Matrix::from_fn(output, input, |_, _| scale * rng.normal()),
            bias: vec![0.0; output],
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weight.matvec(x)?;
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        Ok(z)
    }

    /// Row-wise forward: `X W^T + b`.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.gemm(false, &self.weight, true)?;
        for r in 0..z.rows() {
            for (zi, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *zi += b;
            }
        }
        Ok(z)
    }

    /// Given the upstream gradient `dz` and layer input `x`, returns
    /// `(dW, db, dx)`.
    pub(crate) fn backward(&self, x: &Matrix, dz: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
        let dw = dz.gemm(true, x, false)?;
        let mut db = vec![0.0; self.output_dim()];
        for row in dz.row_iter() {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let dx = dz.matmul(&self.weight)?;
        Ok((dw, db, dx))
    }
}

pub(crate) fn relu_in_place(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the pre-activation was not positive.
pub(crate) fn relu_backward(grad: &mut Matrix, pre: &Matrix) {
    for (g, z) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Spectral-normalized ReLU network producing the penultimate
/// representation `h(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnMlp {
    config: SnMlpConfig,
    layers: Vec<DenseLayer>,
}

/// Pre- and post-activation values of every layer for one batch.
pub(crate) struct MlpTrace {
    pub inputs: Vec<Matrix>,
    pub pre: Vec<Matrix>,
    pub output: Matrix,
}

impl SnMlp {
    /// Random initialization followed by one spectral normalization pass.
    pub fn new(config: SnMlpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims
            .windows(2)
            .map(|w| DenseLayer::random(w[0], w[1], rng))
            .collect();
        let mut mlp = Self { config, layers };
        mlp.normalize(rng)?;
        Ok(mlp)
    }

    /// Wraps explicit layers. Their shapes must chain and match `config`.
    pub fn from_layers(config: SnMlpConfig, layers: Vec<DenseLayer>) -> Result<Self> {
        config.validate()?;
        check_dim(config.layer_dims.len() - 1, layers.len())?;
        for (layer, w) in layers.iter().zip(config.layer_dims.windows(2)) {
            check_dim(w[0], layer.input_dim())?;
            check_dim(w[1], layer.output_dim())?;
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &SnMlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Caps every layer's spectral norm at the configured `c`.
    pub fn normalize(&mut self, rng: &mut Rng) -> Result<()> {
        let (cap, iters) = (self.config.spectral_cap, self.config.power_iters);
        for layer in &mut self.layers {
            layer.weight = apply_spectral_normalization(&layer.weight, cap, iters, rng)?;
        }
        Ok(())
    }

    pub fn forward_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut a = x.to_vec();
        for layer in &self.layers {
            a = layer.forward(&a)?;
            a.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(a)
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        check_dim(self.input_dim(), x.cols())?;
        let mut a = x.clone();
        for layer in &self.layers {
            a = layer.forward_batch(&a)?;
            relu_in_place(&mut a);
        }
        Ok(a)
    }

    pub(crate) fn forward_trace(&self, x: &Matrix) -> Result<MlpTrace> {
        check_dim(self.input_dim(), x.cols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for layer in &self.layers {
            let z = layer.forward_batch(&a)?;
            inputs.push(a);
            a = z.clone();
            relu_in_place(&mut a);
            pre.push(z);
        }
        Ok(MlpTrace { inputs, pre, output: a })
    }

    /// Backpropagates `d_out` (gradient w.r.t. the final activations) and
    /// returns per-layer `(dW, db)`.
    pub(crate) fn backward(&self, trace: &MlpTrace, d_out: Matrix) -> Result<Vec<(Matrix, Vec<f64>)>> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut da = d_out;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            relu_backward(&mut da, &trace.pre[l]);
            let (dw, db, dx) = layer.backward(&trace.inputs[l], &da)?;
            grads.push((dw, db));
            da = dx;
        }
        grads.reverse();
        Ok(grads)
    }
}
