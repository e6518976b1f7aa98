//! Attention-based multiple-instance pooling of tile embeddings into a
//! slide representation.
//!
//! Tiles pass through a ReLU projection to `embed_dim`, a `tanh` attention
//! layer of width `attn_dim` scores each tile, and the softmax of those
//! scores weights the projected tiles into one slide vector. A final linear
//! layer maps the slide vector to class logits.

use serde::{Deserialize, Serialize};

use super::mlp::{relu_backward, relu_in_place, DenseLayer};
use super::train::Adam;
use super::TrainConfig;
use crate::error::{check_dim, invalid, Error, Result};
use crate::numerics::{dot, softmax, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbmilConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    pub n_classes: usize,
}

impl AbmilConfig {
    /// Reference widths: 512-wide tile embedding, 384-wide attention layer,
    /// dropout 0.1 on inputs and 0.25 after each intermediate layer.
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            embed_dim: 512,
            attn_dim: 384,
            input_dropout: 0.1,
            hidden_dropout: 0.25,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.attn_dim == 0 || self.n_classes == 0 {
            return Err(invalid("ABMIL dimensions must be positive"));
        }
        for rate in [self.input_dropout, self.hidden_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbmilNet {
    config: AbmilConfig,
    embed: DenseLayer,
    attn_hidden: DenseLayer,
    attn_score: Vec<f64>,
    attn_bias: f64,
    classifier: DenseLayer,
}

/// Slide vector and per-tile attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AbmilPooled {
    pub representation: Vec<f64>,
    pub attention: Vec<f64>,
}

struct BagTrace {
    input: Matrix,
    embed_pre: Matrix,
    embed_mask: Vec<f64>,
    embedded: Matrix,
    attn_tanh: Matrix,
    attn_mask: Vec<f64>,
    attn_act: Matrix,
    weights: Vec<f64>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

fn dropout_mask(len: usize, rate: f64, rng: Option<&mut Rng>) -> Vec<f64> {
    match rng {
        Some(r) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            (0..len).map(|_| if r.uniform() < rate { 0.0 } else { keep }).collect()
        }
        _ => vec![1.0; len],
    }
}

fn apply_mask(m: &mut Matrix, mask: &[f64]) {
    for (v, k) in m.as_mut_slice().iter_mut().zip(mask) {
        *v *= k;
    }
}

impl AbmilNet {
    pub fn new(config: AbmilConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embed = DenseLayer::random(config.input_dim, config.embed_dim, rng);
        let attn_hidden = DenseLayer::random(config.embed_dim, config.attn_dim, rng);
        let scale = (1.0 / config.attn_dim as f64).sqrt();
        let attn_score = (0..config.attn_dim).map(|_| scale * rng.normal()).collect();
        let classifier = DenseLayer::random(config.embed_dim, config.n_classes, rng);
        Ok(Self {
            config,
            embed,
            attn_hidden,
            attn_score,
            attn_bias: 0.0,
            classifier,
        })
    }

    pub fn config(&self) -> &AbmilConfig {
        &self.config
    }

    /// Zeroes the attention scoring vector so every tile gets the same
    /// attention logit.
    pub fn with_uniform_attention(mut self) -> Self {
        self.attn_score.iter_mut().for_each(|w| *w = 0.0);
        self.attn_bias = 0.0;
        self
    }

    /// Projected tile embeddings, one row per tile.
    pub fn embed_tiles(&self, tiles: &Matrix) -> Result<Matrix> {
        check_dim(self.config.input_dim, tiles.cols())?;
        let mut h = self.embed.forward_batch(tiles)?;
        relu_in_place(&mut h);
        Ok(h)
    }

    pub fn pool(&self, tiles: &Matrix) -> Result<AbmilPooled> {
        let trace = self.forward(tiles, None)?;
        Ok(AbmilPooled {
            representation: trace.pooled,
            attention: trace.weights,
        })
    }

    pub fn predict(&self, tiles: &Matrix) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(tiles, None)?.logits))
    }

    fn forward(&self, tiles: &Matrix, mut rng: Option<&mut Rng>) -> Result<BagTrace> {
        if tiles.rows() == 0 {
            return Err(invalid("attention pooling needs at least one tile"));
        }
        check_dim(self.config.input_dim, tiles.cols())?;
        let mut input = tiles.clone();
        let in_mask = dropout_mask(input.as_slice().len(), self.config.input_dropout, rng.as_deref_mut());
        apply_mask(&mut input, &in_mask);

        let embed_pre = self.embed.forward_batch(&input)?;
        let mut embedded = embed_pre.clone();
        relu_in_place(&mut embedded);
        let embed_mask = dropout_mask(
            embedded.as_slice().len(),
            self.config.hidden_dropout,
            rng.as_deref_mut(),
        );
        apply_mask(&mut embedded, &embed_mask);

        let mut attn_tanh = self.attn_hidden.forward_batch(&embedded)?;
        attn_tanh.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        let attn_mask = dropout_mask(attn_tanh.as_slice().len(), self.config.hidden_dropout, rng);
        let mut attn_act = attn_tanh.clone();
        apply_mask(&mut attn_act, &attn_mask);

        let scores: Vec<f64> = attn_act
            .row_iter()
            .map(|g| dot(g, &self.attn_score) + self.attn_bias)
            .collect();
        let weights = softmax(&scores);
        let pooled = embedded.t_matvec(&weights)?;
        let logits = self.classifier.forward(&pooled)?;
        Ok(BagTrace {
            input,
            embed_pre,
            embed_mask,
            embedded,
            attn_tanh,
            attn_mask,
            attn_act,
            weights,
            pooled,
            logits,
        })
    }

    /// Slide-level training with cross-entropy, dropout active, Adam.
    /// Returns the mean training loss per epoch.
    pub fn fit(bags: &[Matrix], labels: &[usize], config: AbmilConfig, cfg: &TrainConfig) -> Result<(Self, Vec<f64>)> {
        cfg.validate()?;
        check_dim(bags.len(), labels.len())?;
        if bags.is_empty() {
            return Err(invalid("no training bags"));
        }
        if labels.iter().any(|&y| y >= config.n_classes) {
            return Err(invalid("label outside class range"));
        }
        let mut init_rng = Rng::with_stream(cfg.seed, 1);
        let mut order_rng = Rng::with_stream(cfg.seed, 2);
        let mut mask_rng = Rng::with_stream(cfg.seed, 4);
        let mut net = Self::new(config, &mut init_rng)?;
        let sizes = net.param_sizes();
        let mut adam = Adam::new(cfg, &sizes);
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut step = 0usize;

        for epoch in 1..=cfg.epochs {
            let mut epoch_loss = 0.0;
            for batch in order_rng.permutation(bags.len()).chunks(cfg.batch_size) {
                let mut acc: Option<Vec<Vec<f64>>> = None;
                for &i in batch {
                    let trace = net.forward(&bags[i], Some(&mut mask_rng))?;
                    let p = softmax(&trace.logits);
                    let loss = -p[labels[i]].max(f64::MIN_POSITIVE).ln();
                    if !loss.is_finite() {
                        return Err(Error::TrainingDiverged { epoch });
                    }
                    epoch_loss += loss;
                    let mut d_logits = p;
                    d_logits[labels[i]] -= 1.0;
                    d_logits.iter_mut().for_each(|g| *g /= batch.len() as f64);
                    let grads = net.backward(&trace, &d_logits)?;
                    match acc.as_mut() {
                        None => acc = Some(grads),
                        Some(a) => {
                            for (dst, src) in a.iter_mut().zip(&grads) {
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
                let grads = acc.expect("nonempty batch");
                let lr = cfg.learning_rate_at(step);
                adam.step(net.params_mut(), grads.iter().map(Vec::as_slice).collect(), lr);
                step += 1;
            }
            history.push(epoch_loss / bags.len() as f64);
        }
        Ok((net, history))
    }

    fn param_sizes(&self) -> Vec<usize> {
        vec![
            self.embed.weight.as_slice().len(),
            self.embed.bias.len(),
            self.attn_hidden.weight.as_slice().len(),
            self.attn_hidden.bias.len(),
            self.attn_score.len(),
            1,
            self.classifier.weight.as_slice().len(),
            self.classifier.bias.len(),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.embed.weight.as_mut_slice(),
            self.embed.bias.as_mut_slice(),
            self.attn_hidden.weight.as_mut_slice(),
            self.attn_hidden.bias.as_mut_slice(),
            self.attn_score.as_mut_slice(),
            std::slice::from_mut(&mut self.attn_bias),
            self.classifier.weight.as_mut_slice(),
            self.classifier.bias.as_mut_slice(),
        ]
    }

    /// Gradients in the order of `param_sizes`.
    fn backward(&self, t: &BagTrace, d_logits: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = t.weights.len();
        let k = d_logits.len();
        let dl = Matrix::new(1, k, d_logits.to_vec())?;
        let pooled = Matrix::new(1, t.pooled.len(), t.pooled.clone())?;
        let (d_cls_w, d_cls_b, d_pooled) = self.classifier.backward(&pooled, &dl)?;
        let d_pooled = d_pooled.into_vec();

        // pooled = sum_i a_i h_i
        let d_weight: Vec<f64> = t.embedded.row_iter().map(|h| dot(h, &d_pooled)).collect();
        let avg = dot(&t.weights, &d_weight);
        let d_score: Vec<f64> = t.weights.iter().zip(&d_weight).map(|(a, g)| a * (g - avg)).collect();

        let d_attn_bias: f64 = d_score.iter().sum();
        let d_attn_score = t.attn_act.t_matvec(&d_score)?;
        let mut d_attn = Matrix::from_fn(n, self.config.attn_dim, |i, j| d_score[i] * self.attn_score[j]);
        apply_mask(&mut d_attn, &t.attn_mask);
        for (g, th) in d_attn.as_mut_slice().iter_mut().zip(t.attn_tanh.as_slice()) {
            *g *= 1.0 - th * th;
        }
        let (d_ah_w, d_ah_b, mut d_embedded) = self.attn_hidden.backward(&t.embedded, &d_attn)?;
        for i in 0..n {
            for (g, p) in d_embedded.row_mut(i).iter_mut().zip(&d_pooled) {
                *g += t.weights[i] * p;
            }
        }
        apply_mask(&mut d_embedded, &t.embed_mask);
        relu_backward(&mut d_embedded, &t.embed_pre);
        let (d_emb_w, d_emb_b, _) = self.embed.backward(&t.input, &d_embedded)?;
        Ok(vec![
            d_emb_w.into_vec(),
            d_emb_b,
            d_ah_w.into_vec(),
            d_ah_b,
            d_attn_score,
            vec![d_attn_bias],
            d_cls_w.into_vec(),
            d_cls_b,
        ])
    }
}
