//! ELBO, backpropagation through every layer kind, and Adam.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dense, Layer, VaeModel, LOGVAR_CLAMP};
use crate::error::{Error, Result};
use crate::ops;

/// Losses above this abort training.
const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Domain("learning rate must be >= 0 and epsilon > 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Domain(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Gradient tensors in the order of [`VaeModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct ElboTerms {
    /// `reconstruction + kl`, averaged over the batch.
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub gradients: Gradients,
}

struct Tape {
    inputs: Vec<Array2<f64>>,
    argmax: Vec<Option<Vec<Vec<usize>>>>,
}

fn forward_tape(layers: &[Layer], x: Array2<f64>) -> (Array2<f64>, Tape) {
    let mut tape = Tape {
        inputs: Vec::with_capacity(layers.len()),
        argmax: Vec::with_capacity(layers.len()),
    };
    let mut h = x;
    for l in layers {
        let (out, argmax) = l.forward_batch(&h);
        tape.inputs.push(h);
        tape.argmax.push(argmax);
        h = out;
    }
    (h, tape)
}

fn dense_backward(d: &Dense, input: &Array2<f64>, grad: &Array2<f64>) -> (Array2<f64>, [Array1<f64>; 2]) {
    let dw = grad.t().dot(input);
    let db = grad.sum_axis(Axis(0));
    let dx = grad.dot(&d.weight);
    (dx, [Array1::from(dw.into_raw_vec_and_offset().0), db])
}

/// Returns the input gradient and the parameter gradients of `layers`, in
/// forward order.
fn backward_layers(layers: &[Layer], tape: &Tape, grad_out: Array2<f64>) -> (Array2<f64>, Vec<Array1<f64>>) {
    let mut grad = grad_out;
    let mut params_rev: Vec<[Array1<f64>; 2]> = Vec::new();
    for (idx, l) in layers.iter().enumerate().rev() {
        let input = &tape.inputs[idx];
        grad = match l {
            Layer::Dense(d) => {
                let (dx, p) = dense_backward(d, input, &grad);
                params_rev.push(p);
                dx
            }
            Layer::Relu => {
                let mut dx = grad;
                Zip::from(&mut dx).and(input).for_each(|g, &x| {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                });
                dx
            }
            Layer::Conv2d(c) => {
                let mut dx = Array2::zeros(input.raw_dim());
                let mut dw = vec![0.0; c.weight.len()];
                let mut db = vec![0.0; c.bias.len()];
                let w = c.weight.as_slice().unwrap();
                for r in 0..input.nrows() {
                    let xin = input.row(r).to_vec();
                    let gout = grad.row(r).to_vec();
                    let mut gin = vec![0.0; xin.len()];
                    c.geometry.backward(w, &xin, &gout, &mut gin, &mut dw, &mut db);
                    dx.row_mut(r).assign(&Array1::from(gin));
                }
                params_rev.push([Array1::from(dw), Array1::from(db)]);
                dx
            }
            Layer::MaxPool { .. } => {
                let argmax = tape.argmax[idx].as_ref().expect("maxpool tape");
                let mut dx = Array2::zeros(input.raw_dim());
                for (r, sel) in argmax.iter().enumerate() {
                    for (j, &i) in sel.iter().enumerate() {
                        dx[[r, i]] += grad[[r, j]];
                    }
                }
                dx
            }
            Layer::Upsample { shape, factor } => {
                let mut dx = Array2::zeros(input.raw_dim());
                for r in 0..input.nrows() {
                    let gout = grad.row(r).to_vec();
                    let mut gin = vec![0.0; shape.len()];
                    ops::upsample_backward(*shape, *factor, &gout, &mut gin);
                    dx.row_mut(r).assign(&Array1::from(gin));
                }
                dx
            }
        };
    }
    let params = params_rev.into_iter().rev().flatten().collect();
    (grad, params)
}

/// Negative ELBO (up to constants) averaged over the batch, with
/// reparameterized latent `z = μ + σ ⊙ noise`, and its gradient.
pub fn elbo_terms(model: &VaeModel, batch: &Array2<f64>, noise: &Array2<f64>) -> Result<ElboTerms> {
    let b = batch.nrows();
    if b == 0 {
        return Err(Error::Domain("batch must be non-empty".into()));
    }
    if batch.ncols() != model.n() {
        return Err(Error::shape(model.n(), batch.ncols()));
    }
    if noise.dim() != (b, model.latent_dim()) {
        return Err(Error::shape(b * model.latent_dim(), noise.len()));
    }
    let scale = 1.0 / b as f64;
    let (lo, hi) = LOGVAR_CLAMP;

    let (h, enc_tape) = forward_tape(model.encoder(), batch.clone());
    let mu = model.mu_head().forward(&h);
    let lv_raw = model.logvar_head().forward(&h);
    let lv = lv_raw.mapv(|v| v.clamp(lo, hi));
    let std = lv.mapv(|v| (0.5 * v).exp());
    let z = &mu + &(&std * noise);
    let (xhat, dec_tape) = forward_tape(model.decoder(), z);

    let resid = &xhat - batch;
    let reconstruction = 0.5 * resid.iter().map(|r| r * r).sum::<f64>() * scale;
    let kl = 0.5
        * Zip::from(&mu)
            .and(&lv)
            .fold(0.0, |acc, &m, &l| acc + m * m + l.exp() - 1.0 - l)
        * scale;
    let loss = reconstruction + kl;

    let (g_z, dec_grads) = backward_layers(model.decoder(), &dec_tape, resid * scale);
    let g_mu = &g_z + &(&mu * scale);
    let mut g_lv = Array2::zeros(lv.raw_dim());
    Zip::from(&mut g_lv)
        .and(&g_z)
        .and(noise)
        .and(&std)
        .and(&lv_raw)
        .for_each(|g, &gz, &eps, &s, &raw| {
            *g = if raw > lo && raw < hi {
                0.5 * gz * eps * s + 0.5 * (raw.exp() - 1.0) * scale
            } else {
                0.0
            };
        });
    let (g_h_mu, mu_grads) = dense_backward(model.mu_head(), &h, &g_mu);
    let (g_h_lv, lv_grads) = dense_backward(model.logvar_head(), &h, &g_lv);
    let (_, enc_grads) = backward_layers(model.encoder(), &enc_tape, g_h_mu + g_h_lv);

    let mut tensors = enc_grads;
    tensors.extend(mu_grads);
    tensors.extend(lv_grads);
    tensors.extend(dec_grads);
    Ok(ElboTerms {
        loss,
        reconstruction,
        kl,
        gradients: Gradients { tensors },
    })
}

pub fn elbo_loss(model: &VaeModel, batch: &Array2<f64>, noise: &Array2<f64>) -> Result<(f64, Gradients)> {
    let t = elbo_terms(model, batch, noise)?;
    Ok((t.loss, t.gradients))
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: TrainConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(model: &VaeModel, cfg: TrainConfig) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        Self {
            cfg,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&mut self, model: &mut VaeModel, grads: &Gradients) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = c.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.epsilon);
                p[i] -= update;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: VaeModel,
    /// Mean loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch Adam on the negative ELBO. Deterministic for a fixed seed.
pub fn train(mut model: VaeModel, data: &Array2<f64>, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if data.ncols() != model.n() {
        return Err(Error::shape(model.n(), data.ncols()));
    }
    if data.nrows() == 0 {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model, *cfg);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.select(Axis(0), chunk);
            let noise = Array2::from_shape_fn((chunk.len(), model.latent_dim()), |_| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let (loss, grads) = elbo_loss(&model, &batch, &noise)?;
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(Error::Training {
                    epoch,
                    batch: bi,
                    reason: format!("loss {loss} is non-finite or diverged"),
                    loss_trace,
                });
            }
            total += loss * chunk.len() as f64;
            adam.step(&mut model, &grads);
        }
        loss_trace.push(total / data.nrows() as f64);
    }
    Ok(Trained { model, loss_trace })
}

/// `count` images drawn i.i.d. from `N(0, I_n)`, one per row.
pub fn normal_training_set(n: usize, count: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((count, n), |_| rng.sample::<f64, _>(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_difference(model: &VaeModel, batch: &Array2<f64>, noise: &Array2<f64>, step: f64) -> Vec<Vec<f64>> {
        let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        let mut out = Vec::new();
        for (t, &len) in shapes.iter().enumerate() {
            let mut fd = vec![0.0; len];
            for i in 0..len {
                let mut plus = model.clone();
                plus.params_mut()[t][i] += step;
                let mut minus = model.clone();
                minus.params_mut()[t][i] -= step;
                let lp = elbo_terms(&plus, batch, noise).unwrap().loss;
                let lm = elbo_terms(&minus, batch, noise).unwrap().loss;
                fd[i] = (lp - lm) / (2.0 * step);
            }
            out.push(fd);
        }
        out
    }

    fn assert_gradients_match(model: &VaeModel, seed: u64) {
        let batch = normal_training_set(model.n(), 3, seed);
        let noise = normal_training_set(model.latent_dim(), 3, seed + 1);
        let analytic = elbo_terms(model, &batch, &noise).unwrap().gradients;
        let numeric = central_difference(model, &batch, &noise, 1e-5);
        assert_eq!(analytic.tensors.len(), numeric.len());
        for (t, (a, f)) in analytic.tensors.iter().zip(&numeric).enumerate() {
            for (i, (&g, &d)) in a.iter().zip(f).enumerate() {
                let denom = g.abs().max(d.abs()).max(1e-3);
                assert!(
                    (g - d).abs() / denom <= 1e-4,
                    "tensor {t} entry {i}: analytic {g} vs finite difference {d}"
                );
            }
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        assert_gradients_match(&VaeModel::mlp(16, &[8, 6], 3, 21).unwrap(), 5);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        assert_gradients_match(&VaeModel::conv(4, 2, 5, 3, 8).unwrap(), 6);
    }

    #[test]
    fn kl_vanishes_at_prior() {
        let mut model = VaeModel::mlp(4, &[3], 2, 0).unwrap();
        model.mu_head = Dense::zeros(3, 2);
        model.logvar_head = Dense::zeros(3, 2);
        let batch = normal_training_set(4, 5, 1);
        let noise = normal_training_set(2, 5, 2);
        assert_eq!(elbo_terms(&model, &batch, &noise).unwrap().kl, 0.0);
    }

    #[test]
    fn reconstruction_term_vanishes_on_perfect_fit() {
        let mut model = VaeModel::mlp(4, &[3], 2, 0).unwrap();
        for p in model.params_mut() {
            p.fill(0.0);
        }
        if let Some(Layer::Dense(last)) = model.decoder.last_mut() {
            last.bias.fill(1.5);
        }
        let batch = Array2::from_elem((2, 4), 1.5);
        let noise = normal_training_set(2, 2, 3);
        assert_eq!(elbo_terms(&model, &batch, &noise).unwrap().reconstruction, 0.0);
    }

    #[test]
    fn kl_is_non_negative() {
        let model = VaeModel::mlp(9, &[5], 3, 4).unwrap();
        for seed in 0..20 {
            let batch = normal_training_set(9, 4, seed) * 3.0;
            let noise = normal_training_set(3, 4, seed + 100);
            assert!(elbo_terms(&model, &batch, &noise).unwrap().kl >= 0.0);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_model_untouched() {
        let model = VaeModel::mlp(16, &[8], 3, 2).unwrap();
        let data = normal_training_set(16, 40, 0);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let trained = train(model.clone(), &data, &cfg).unwrap();
        assert_eq!(trained.model, model);
        assert_eq!(trained.loss_trace.len(), 2);
    }

    #[test]
    fn training_reduces_loss() {
        let model = VaeModel::mlp(16, &[16, 8], 3, 2).unwrap();
        let data = normal_training_set(16, 256, 0);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let trained = train(model, &data, &cfg).unwrap();
        assert!(trained.loss_trace.last().unwrap() < &trained.loss_trace[0]);
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let model = VaeModel::mlp(4, &[3], 2, 2).unwrap();
        let data = normal_training_set(4, 8, 0) * 1e5;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(train(model, &data, &cfg), Err(Error::Training { batch: 0, .. })));
    }

    #[test]
    fn rejects_bad_noise_shape() {
        let model = VaeModel::mlp(4, &[3], 2, 2).unwrap();
        let batch = normal_training_set(4, 2, 0);
        assert!(elbo_terms(&model, &batch, &Array2::zeros((2, 3))).is_err());
        assert!(elbo_terms(&model, &Array2::zeros((0, 4)), &Array2::zeros((0, 2))).is_err());
    }
}
