//! β-VAE mapping single events `(tau, k)` to `d`-dimensional latents and back.
//!
//! Encoder: `[tau, onehot(k)] → tanh(H) → tanh(H) → [mu | logvar]`.
//! Decoder: `x → tanh(H) → tanh(H) → [tau_hat | logits]`.
//! Both output layers start at zero.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{pad_and_mask, Dataset, Event};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, OptimState};
use crate::params::{normal, normal_tensor, xavier, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub num_types: usize,
    pub d_latent: usize,
    pub hidden: usize,
}

impl VaeConfig {
    pub fn new(num_types: usize, d_latent: usize) -> Self {
        Self { num_types, d_latent, hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae<T> {
    pub config: VaeConfig,
    pub params: ParamSet<T>,
}

/// Padded latent matrix for one sequence; masked rows are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T> {
    pub latents: Tensor<T>,
    pub mask: Vec<bool>,
}

// parameter slots, in push order
const E_W1: usize = 0;
const D_W1: usize = 6;

impl<T: Scalar> Vae<T> {
    /// Parameter names and shapes, in slot order.
    pub fn layout(config: &VaeConfig) -> Vec<(String, Vec<usize>)> {
        let VaeConfig { num_types: k, d_latent: d, hidden: h } = *config;
        let mut out = Vec::new();
        for (part, inp, outp) in [("enc", 1 + k, 2 * d), ("dec", d, 1 + k)] {
            out.push((format!("vae.{part}.w1"), vec![inp, h]));
            out.push((format!("vae.{part}.b1"), vec![h]));
            out.push((format!("vae.{part}.w2"), vec![h, h]));
            out.push((format!("vae.{part}.b2"), vec![h]));
            out.push((format!("vae.{part}.w3"), vec![h, outp]));
            out.push((format!("vae.{part}.b3"), vec![outp]));
        }
        out
    }

    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Self {
        let mut p = ParamSet::new();
        for (name, shape) in Self::layout(&config) {
            let t = if name.ends_with("w1") || name.ends_with("w2") {
                xavier(shape[0], shape[1], rng)
            } else {
                Tensor::zeros(&shape)
            };
            p.push(&name, t);
        }
        Self { config, params: p }
    }

    /// Rebuilds from stored parameters, checking the layout.
    pub fn from_params(config: VaeConfig, params: ParamSet<T>) -> Result<Self> {
        let layout = Self::layout(&config);
        let ok = layout.len() == params.len()
            && layout
                .iter()
                .enumerate()
                .all(|(i, (n, s))| params.name(i) == n && params.tensor(i).shape() == s.as_slice());
        if !ok {
            return Err(Error::Validation("VAE parameters do not match the configured architecture".into()));
        }
        Ok(Self { config, params })
    }

    fn input_tensor(&self, events: &[Event]) -> Result<Tensor<T>> {
        let k = self.config.num_types;
        let mut data = Vec::with_capacity(events.len() * (1 + k));
        for e in events {
            if e.k >= k {
                return Err(Error::Validation(format!("event type {} >= {k}", e.k)));
            }
            data.push(T::of(e.tau));
            data.extend((0..k).map(|j| if j == e.k { T::one() } else { T::zero() }));
        }
        Tensor::new(vec![events.len(), 1 + k], data)
    }

    fn mlp3(g: &mut Graph<T>, p: &[Var], first: usize, x: Var) -> Result<Var> {
        let h = g.linear(x, p[first], Some(p[first + 1]))?;
        let h = g.tanh(h);
        let h = g.linear(h, p[first + 2], Some(p[first + 3]))?;
        let h = g.tanh(h);
        g.linear(h, p[first + 4], Some(p[first + 5]))
    }

    /// Records the encoder; returns `(mu, clamped logvar)`, each `B×d`.
    pub fn encoder_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let d = self.config.d_latent;
        let out = Self::mlp3(g, p, E_W1, x)?;
        let mu = g.slice(out, 1, 0, d)?;
        let lv = g.slice(out, 1, d, 2 * d)?;
        let lv = g.clamp(lv, T::of(LOGVAR_MIN), T::of(LOGVAR_MAX));
        Ok((mu, lv))
    }

    /// Records the decoder; returns `(tau_hat B×1, logits B×K)`.
    pub fn decoder_graph(&self, g: &mut Graph<T>, p: &[Var], z: Var) -> Result<(Var, Var)> {
        let out = Self::mlp3(g, p, D_W1, z)?;
        let tau = g.slice(out, 1, 0, 1)?;
        let logits = g.slice(out, 1, 1, 1 + self.config.num_types)?;
        Ok((tau, logits))
    }

    /// Posterior mean and log-variance for a batch of events (standardized taus).
    pub fn encode_batch(&self, events: &[Event]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.register(&mut g);
        let x = g.constant(self.input_tensor(events)?);
        let (mu, lv) = self.encoder_graph(&mut g, &p, x)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    pub fn encode(&self, event: &Event) -> Result<(Vec<T>, Vec<T>)> {
        let (mu, lv) = self.encode_batch(std::slice::from_ref(event))?;
        Ok((mu.into_data(), lv.into_data()))
    }

    /// Decodes `B×d` latents to standardized durations and type logits.
    pub fn decode_batch(&self, latents: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        if latents.rank() != 2 || latents.shape()[1] != self.config.d_latent {
            return Err(Error::Shape(format!(
                "latents {:?} for d_latent {}",
                latents.shape(),
                self.config.d_latent
            )));
        }
        let mut g = Graph::new();
        let p = self.params.register(&mut g);
        let z = g.constant(latents.clone());
        let (tau, logits) = self.decoder_graph(&mut g, &p, z)?;
        Ok((g.value(tau).data().to_vec(), g.value(logits).clone()))
    }

    pub fn decode(&self, latent: &[T]) -> Result<(T, Vec<T>)> {
        let t = Tensor::new(vec![1, latent.len()], latent.to_vec())?;
        let (tau, logits) = self.decode_batch(&t)?;
        Ok((tau[0], logits.into_data()))
    }

    /// Predicted event (standardized tau, argmax type) for each latent row.
    pub fn decode_events(&self, latents: &Tensor<T>) -> Result<Vec<(f64, usize)>> {
        let (tau, logits) = self.decode_batch(latents)?;
        Ok(tau.iter().zip(logits.argmax_last()).map(|(t, k)| (t.f64(), k)).collect())
    }

    /// Posterior means of a sequence, zero-padded to `n` rows.
    pub fn encode_sequence(&self, events: &[Event], n: usize) -> Result<LatentSequence<T>> {
        let (_, mask) = pad_and_mask(events, n)?;
        let d = self.config.d_latent;
        let (mu, _) = self.encode_batch(events)?;
        let mut data = mu.into_data();
        data.resize(n * d, T::zero());
        Ok(LatentSequence { latents: Tensor::new(vec![n, d], data)?, mask })
    }

    pub fn encode_dataset(&self, dataset: &Dataset) -> Result<Vec<LatentSequence<T>>> {
        dataset.sequences.iter().map(|s| self.encode_sequence(s.events(), dataset.max_len)).collect()
    }
}

/// `mu + exp(logvar/2)·z` with `logvar` clamped to `[−10, 10]`.
pub fn reparameterize_with<T: Scalar>(mu: &[T], logvar: &[T], noise: &[T]) -> Result<Vec<T>> {
    if mu.len() != logvar.len() || mu.len() != noise.len() {
        return Err(Error::Shape("mu, logvar and noise lengths differ".into()));
    }
    let (lo, hi) = (T::of(LOGVAR_MIN), T::of(LOGVAR_MAX));
    let half = T::of(0.5);
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(noise)
        .map(|((&m, &lv), &z)| {
            let lv = if lv.is_nan() { lo } else { lv.max(lo).min(hi) };
            m + (half * lv).exp() * z
        })
        .collect())
}

pub fn reparameterize<T: Scalar, R: Rng + ?Sized>(mu: &[T], logvar: &[T], rng: &mut R) -> Result<Vec<T>> {
    let noise: Vec<T> = (0..mu.len()).map(|_| T::of(normal(rng))).collect();
    reparameterize_with(mu, logvar, &noise)
}

/// `KL(N(mu, diag exp(logvar)) ‖ N(0, I))`.
pub fn kl_divergence<T: Scalar>(mu: &[T], logvar: &[T]) -> T {
    let half = T::of(0.5);
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
        .sum()
}

/// Squared duration error + cross-entropy + β·KL for one event.
pub fn vae_loss<T: Scalar>(event: &Event, tau_hat: T, logits: &[T], mu: &[T], logvar: &[T], beta: T) -> T {
    let dt = T::of(event.tau) - tau_hat;
    let mx = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let lse = mx + logits.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
    let ce = lse - logits[event.k];
    dt * dt + ce + beta * kl_divergence(mu, logvar)
}

/// Linear ramp from `beta_min` to `beta_max` over the first half of training.
pub fn beta_schedule(step: usize, total_steps: usize, beta_min: f64, beta_max: f64) -> f64 {
    let half = total_steps as f64 / 2.0;
    if half <= 0.0 || step as f64 >= half {
        return beta_max;
    }
    beta_min + (beta_max - beta_min) * (step as f64 / half)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 512, lr: 2e-3, beta_min: 1e-5, beta_max: 1e-2 }
    }
}

/// Records the mean `L_AE` over `events` on `g`, with reparameterization noise.
pub fn vae_batch_loss<T: Scalar>(
    vae: &Vae<T>,
    g: &mut Graph<T>,
    p: &[Var],
    events: &[Event],
    noise: Tensor<T>,
    beta: T,
) -> Result<Var> {
    let k = vae.config.num_types;
    let b = events.len();
    let x = g.constant(vae.input_tensor(events)?);
    let (mu, lv) = vae.encoder_graph(g, p, x)?;
    let half_lv = g.scale(lv, T::of(0.5));
    let std = g.exp(half_lv);
    let eps = g.constant(noise);
    let spread = g.mul(std, eps)?;
    let z = g.add(mu, spread)?;
    let (tau_hat, logits) = vae.decoder_graph(g, p, z)?;

    let tau_true = g.constant(Tensor::new(vec![b, 1], events.iter().map(|e| T::of(e.tau)).collect())?);
    let dt = g.sub(tau_hat, tau_true)?;
    let mse = g.square(dt)?;
    let mse = g.sum(mse);

    let onehot = Tensor::new(
        vec![b, k],
        events
            .iter()
            .flat_map(|e| (0..k).map(move |j| if j == e.k { T::one() } else { T::zero() }))
            .collect(),
    )?;
    let onehot = g.constant(onehot);
    let logp = g.log_softmax(logits);
    let picked = g.mul(logp, onehot)?;
    let ce = g.sum(picked);

    let mu2 = g.square(mu)?;
    let elv = g.exp(lv);
    let a = g.add(mu2, elv)?;
    let a = g.sub(a, lv)?;
    let a = g.add_scalar(a, -T::one());
    let kl = g.sum(a);
    let kl = g.scale(kl, T::of(0.5) * beta);

    let rec = g.sub(mse, ce)?;
    let total = g.add(rec, kl)?;
    Ok(g.scale(total, T::one() / T::of_usize(b)))
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Adam on the mean `L_AE` over minibatches drawn uniformly from every event.
pub fn train_vae<T: Scalar, R: Rng + ?Sized>(
    dataset: &Dataset,
    config: VaeConfig,
    train: &VaeTrainConfig,
    rng: &mut R,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Vae<T>, TrainLog)> {
    let events: Vec<Event> = dataset.all_events().copied().collect();
    if events.is_empty() {
        return Err(Error::Validation("no events to train on".into()));
    }
    let mut vae = Vae::<T>::new(config, rng);
    let mut state = OptimState::new(&vae.params);
    let adam = AdamConfig::with_lr(train.lr);
    let mut log = TrainLog::default();
    for step in 0..train.steps {
        let batch: Vec<Event> = (0..train.batch).map(|_| *events.choose(rng).unwrap()).collect();
        let beta = beta_schedule(step, train.steps, train.beta_min, train.beta_max);
        let noise = normal_tensor(&[batch.len(), config.d_latent], rng);
        let mut g = Graph::new();
        let p = vae.params.register(&mut g);
        let loss = vae_batch_loss(&vae, &mut g, &p, &batch, noise, T::of(beta))?;
        let lv = g.value(loss).item().f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("VAE loss diverged at step {step} (beta {beta})")));
        }
        let grads = g.backward(loss)?.params(vae.params.len());
        adam_step(&mut vae.params, &grads, &mut state, &adam)?;
        log.losses.push(lv);
        on_step(step, lv);
    }
    Ok((vae, log))
}

/// Type accuracy and standardized-tau MSE of `decode(encode_mean(e))`.
pub fn reconstruction_metrics<T: Scalar>(vae: &Vae<T>, events: &[Event]) -> Result<(f64, f64)> {
    if events.is_empty() {
        return Err(Error::Validation("no events to evaluate".into()));
    }
    let mut hits = 0usize;
    let mut se = 0.0;
    for chunk in events.chunks(512) {
        let (mu, _) = vae.encode_batch(chunk)?;
        let (tau, logits) = vae.decode_batch(&mu)?;
        for (r, e) in chunk.iter().enumerate() {
            if argmax(logits.row(r)) == e.k {
                hits += 1;
            }
            se += (tau[r].f64() - e.tau).powi(2);
        }
    }
    Ok((hits as f64 / events.len() as f64, se / events.len() as f64))
}
