//! Conditional flow-matching objective and the denoiser training loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::dit::{Dit, DitConfig, VelocityModel};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, OptimState};
use crate::params::normal;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::Tensor;
use crate::vae::{LatentSequence, Vae};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub schedule: ScheduleKind,
    /// Exclude padded rows from the loss average.
    pub mask_padding: bool,
    /// Steps between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 20_000,
            adam: AdamConfig::default(),
            seed: 0,
            schedule: ScheduleKind::Async,
            mask_padding: true,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if self.total_steps == 0 {
            errs.push("total_steps must be at least 1".to_string());
        }
        if !(self.adam.lr > 0.0) {
            errs.push(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// The random part of one loss evaluation: a flow time per sequence and the
/// noise tensor `[B, N, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CfmDraw<T> {
    pub s: Vec<f64>,
    pub eps: Tensor<T>,
}

/// `s ~ Uniform(0, 1]` per sequence, `ε ~ N(0, I)`.
pub fn draw_cfm<T: Scalar, R: Rng + ?Sized>(b: usize, n: usize, d: usize, rng: &mut R) -> CfmDraw<T> {
    let s = (0..b).map(|_| 1.0 - rng.random::<f64>()).collect();
    let eps = (0..b * n * d).map(|_| T::of(normal(rng))).collect();
    CfmDraw { s, eps: Tensor::from_parts(vec![b, n, d], eps) }
}

/// Everything about a batch that does not depend on the model: `x_s`, the
/// schedule diagonals, the regression target `x0 − ε` and row weights.
struct Prepared<T> {
    x_s: Tensor<T>,
    a: Tensor<T>,
    target: Tensor<T>,
    weights: Vec<T>,
}

fn prepare<T: Scalar>(
    x0: &Tensor<T>,
    masks: &[bool],
    schedule: &NoiseSchedule,
    draw: &CfmDraw<T>,
    mask_padding: bool,
) -> Result<Prepared<T>> {
    let sh = x0.shape();
    if sh.len() != 3 || sh[1] != schedule.len() {
        return Err(Error::Shape(format!("x0 {sh:?} for a length-{} schedule", schedule.len())));
    }
    let (b, n, d) = (sh[0], sh[1], sh[2]);
    if masks.len() != b * n || draw.s.len() != b || draw.eps.shape() != sh {
        return Err(Error::Shape("masks, flow times or noise do not match x0".into()));
    }
    let mut x_s = Vec::with_capacity(b * n * d);
    let mut target = Vec::with_capacity(b * n * d);
    let mut a_all = Vec::with_capacity(b * n);
    let mut raw_w = Vec::with_capacity(b * n);
    for (bi, &s) in draw.s.iter().enumerate() {
        let a = schedule.a_diag(&s)?;
        let ap = schedule.a_prime_diag(&s)?;
        for i in 0..n {
            let ai = T::of(a[i]);
            let row = (bi * n + i) * d;
            for c in 0..d {
                let x = x0.data()[row + c];
                let e = draw.eps.data()[row + c];
                x_s.push(ai * x + (T::one() - ai) * e);
                target.push(x - e);
            }
            a_all.push(ai);
            let active = masks[bi * n + i] || !mask_padding;
            raw_w.push(if active { T::of(ap[i] * ap[i]) } else { T::zero() });
        }
    }
    let rows = if mask_padding { masks.iter().filter(|&&m| m).count() } else { b * n };
    if rows == 0 {
        return Err(Error::Validation("batch has no valid rows".into()));
    }
    let inv = T::one() / T::of_usize(rows);
    Ok(Prepared {
        x_s: Tensor::from_parts(sh.to_vec(), x_s),
        a: Tensor::from_parts(vec![b, n], a_all),
        target: Tensor::from_parts(sh.to_vec(), target),
        weights: raw_w.into_iter().map(|w| w * inv).collect(),
    })
}

fn nan_error<T: Scalar>(sq: &Tensor<T>, weights: &[T], draw: &CfmDraw<T>) -> Error {
    let sh = sq.shape();
    let (n, d) = (sh[1], sh[2]);
    for bi in 0..sh[0] {
        let bad = (0..n).any(|i| {
            let w = weights[bi * n + i];
            w != T::zero() && sq.data()[(bi * n + i) * d..(bi * n + i + 1) * d].iter().any(|v| !v.is_finite())
        });
        if bad {
            return Error::NonFinite(format!("flow-matching loss is NaN at batch index {bi} (s = {})", draw.s[bi]));
        }
    }
    Error::NonFinite("flow-matching loss is not finite".into())
}

/// Records the flow-matching loss of `dit` for a fixed draw:
/// `Σ_b Σ_i w_bi ‖(x0 − ε)_bi − v_bi‖²` with `w_bi = a′_i(s_b)²` on active
/// rows divided by the number of active rows.
pub fn cfm_loss_graph<T: Scalar>(
    dit: &Dit<T>,
    g: &mut Graph<T>,
    p: &[Var],
    x0: &Tensor<T>,
    masks: &[bool],
    schedule: &NoiseSchedule,
    draw: &CfmDraw<T>,
    mask_padding: bool,
) -> Result<Var> {
    let prep = prepare(x0, masks, schedule, draw, mask_padding)?;
    let sh = x0.shape().to_vec();
    let x = g.constant(prep.x_s);
    let v = dit.forward_graph(g, p, x, &prep.a, masks)?;
    let target = g.constant(prep.target);
    let diff = g.sub(v, target)?;
    let sq = g.square(diff)?;
    let w = g.constant(Tensor::from_parts(vec![sh[0], sh[1], 1], prep.weights.clone()));
    let weighted = g.mul(sq, w)?;
    let loss = g.sum(weighted);
    if !g.value(loss).item().is_finite() {
        return Err(nan_error(g.value(sq), &prep.weights, draw));
    }
    Ok(loss)
}

/// The same loss for any velocity model, evaluated sequence by sequence
/// without recording a graph.
pub fn cfm_loss_with<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x0: &Tensor<T>,
    masks: &[bool],
    schedule: &NoiseSchedule,
    draw: &CfmDraw<T>,
    mask_padding: bool,
) -> Result<T> {
    let prep = prepare(x0, masks, schedule, draw, mask_padding)?;
    let sh = x0.shape();
    let (b, n, d) = (sh[0], sh[1], sh[2]);
    let mut sq = Vec::with_capacity(b * n * d);
    for bi in 0..b {
        let rows = bi * n * d..(bi + 1) * n * d;
        let xs = Tensor::new(vec![n, d], prep.x_s.data()[rows.clone()].to_vec())?;
        let v = model.velocity(&xs, &prep.a.data()[bi * n..(bi + 1) * n], &masks[bi * n..(bi + 1) * n])?;
        for (vv, tt) in v.data().iter().zip(&prep.target.data()[rows]) {
            sq.push((*vv - *tt) * (*vv - *tt));
        }
    }
    let mut loss = T::zero();
    for (r, w) in prep.weights.iter().enumerate() {
        let row: T = sq[r * d..(r + 1) * d].iter().copied().sum();
        loss = loss + *w * row;
    }
    if !loss.is_finite() {
        return Err(nan_error(&Tensor::from_parts(sh.to_vec(), sq), &prep.weights, draw));
    }
    Ok(loss)
}

/// Samples a draw and evaluates the loss of `dit` on it.
pub fn cfm_loss<T: Scalar, R: Rng + ?Sized>(
    dit: &Dit<T>,
    x0: &Tensor<T>,
    masks: &[bool],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<T> {
    let sh = x0.shape();
    if sh.len() != 3 {
        return Err(Error::Shape(format!("x0 must be [B, N, d], got {sh:?}")));
    }
    let draw = draw_cfm(sh[0], sh[1], sh[2], rng);
    let mut g = Graph::new();
    let p = dit.params.register(&mut g);
    let loss = cfm_loss_graph(dit, &mut g, &p, x0, masks, schedule, &draw, true)?;
    Ok(g.value(loss).item())
}

/// Stacks sequences `idx` of `latents` into `[B, N, d]` plus flattened masks.
pub fn stack_batch<T: Scalar>(latents: &[LatentSequence<T>], idx: &[usize]) -> Result<(Tensor<T>, Vec<bool>)> {
    let first = latents.get(*idx.first().ok_or_else(|| Error::Validation("empty batch".into()))?);
    let sh = first.ok_or_else(|| Error::Validation("batch index out of range".into()))?.latents.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * sh[0] * sh[1]);
    let mut masks = Vec::with_capacity(idx.len() * sh[0]);
    for &i in idx {
        let l = latents.get(i).ok_or_else(|| Error::Validation("batch index out of range".into()))?;
        if l.latents.shape() != sh.as_slice() {
            return Err(Error::Shape("latent sequences have different shapes".into()));
        }
        data.extend_from_slice(l.latents.data());
        masks.extend_from_slice(&l.mask);
    }
    Ok((Tensor::new(vec![idx.len(), sh[0], sh[1]], data)?, masks))
}

/// Mean of each consecutive `window`-step block, one value per step once the
/// window is full.
pub fn moving_average(losses: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || losses.len() < window {
        return Vec::new();
    }
    losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[derive(Clone, Debug, Default)]
pub struct DmTrainLog {
    pub losses: Vec<f64>,
}

impl DmTrainLog {
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        moving_average(&self.losses, window)
    }
}

/// Adam on the flow-matching loss over pre-encoded latent sequences.
///
/// `on_checkpoint` runs every `checkpoint_every` steps and after the last
/// step; on divergence training stops with an error and the most recent
/// checkpoint is whatever the callback last persisted.
pub fn train_dm_latents<T: Scalar, R: Rng + ?Sized>(
    latents: &[LatentSequence<T>],
    dit_config: DitConfig,
    config: &TrainConfig,
    rng: &mut R,
    mut on_step: impl FnMut(usize, f64),
    mut on_checkpoint: impl FnMut(usize, &Dit<T>) -> Result<()>,
) -> Result<(Dit<T>, DmTrainLog)> {
    config.validate()?;
    if latents.is_empty() {
        return Err(Error::Validation("no sequences to train on".into()));
    }
    let schedule = NoiseSchedule::new(config.schedule, dit_config.max_len)?;
    let mut dit = Dit::<T>::new(dit_config, rng)?;
    let mut state = OptimState::new(&dit.params);
    let mut log = DmTrainLog::default();
    for step in 0..config.total_steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..latents.len())).collect();
        let (x0, masks) = stack_batch(latents, &idx)?;
        let sh = x0.shape().to_vec();
        let draw = draw_cfm(sh[0], sh[1], sh[2], rng);
        let mut g = Graph::new();
        let p = dit.params.register(&mut g);
        let loss = cfm_loss_graph(&dit, &mut g, &p, &x0, &masks, &schedule, &draw, config.mask_padding)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                other => other,
            })?;
        let lv = g.value(loss).item().f64();
        let grads = g.backward(loss)?.params(dit.params.len());
        adam_step(&mut dit.params, &grads, &mut state, &config.adam)?;
        if !dit.params.tensors().iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite(format!("parameters diverged at step {step}")));
        }
        log.losses.push(lv);
        on_step(step, lv);
        let last = step + 1 == config.total_steps;
        if last || (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
            on_checkpoint(step + 1, &dit)?;
        }
    }
    Ok((dit, log))
}

/// Encodes `dataset` with the frozen `vae` (posterior means) and trains the
/// denoiser on the result.
pub fn train_dm<T: Scalar, R: Rng + ?Sized>(
    dataset: &Dataset,
    vae: &Vae<T>,
    dit_config: DitConfig,
    config: &TrainConfig,
    rng: &mut R,
    on_step: impl FnMut(usize, f64),
    on_checkpoint: impl FnMut(usize, &Dit<T>) -> Result<()>,
) -> Result<(Dit<T>, DmTrainLog)> {
    if dit_config.d_latent != vae.config.d_latent || dit_config.max_len != dataset.max_len {
        return Err(Error::Validation(format!(
            "denoiser expects N={} d={}, data/VAE provide N={} d={}",
            dit_config.max_len, dit_config.d_latent, dataset.max_len, vae.config.d_latent
        )));
    }
    let latents = vae.encode_dataset(dataset)?;
    train_dm_latents(&latents, dit_config, config, rng, on_step, on_checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Zero;
    impl VelocityModel<f64> for Zero {
        fn velocity(&self, x: &Tensor<f64>, _: &[f64], _: &[bool]) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    /// Returns `x0 − ε` for a known pair by inverting nothing: it is handed
    /// the answer directly.
    struct Exact(Tensor<f64>);
    impl VelocityModel<f64> for Exact {
        fn velocity(&self, _: &Tensor<f64>, _: &[f64], _: &[bool]) -> Result<Tensor<f64>> {
            Ok(self.0.clone())
        }
    }

    fn small_dit() -> DitConfig {
        DitConfig { max_len: 4, d_latent: 2, d_model: 8, num_layers: 1, num_heads: 2, mlp_ratio: 2, t_max: 1e4, h_emb: 4 }
    }

    #[test]
    fn zero_field_under_sync_is_mean_sq_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0: Tensor<f64> = normal_tensor(&[2, 4, 2], &mut rng);
        let draw = draw_cfm::<f64, _>(2, 4, 2, &mut rng);
        let sched = NoiseSchedule::new(ScheduleKind::Sync, 4).unwrap();
        let masks = vec![true; 8];
        let l = cfm_loss_with(&Zero, &x0, &masks, &sched, &draw, true).unwrap();
        let d = x0.sub(&draw.eps).unwrap();
        let expect = d.data().iter().map(|v| v * v).sum::<f64>() / 8.0;
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn exact_field_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0: Tensor<f64> = normal_tensor(&[1, 4, 2], &mut rng);
        let draw = draw_cfm::<f64, _>(1, 4, 2, &mut rng);
        let target = x0.sub(&draw.eps).unwrap().reshape(&[4, 2]).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::Async, 4).unwrap();
        let l = cfm_loss_with(&Exact(target), &x0, &[true; 4], &sched, &draw, true).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn rows_outside_their_window_contribute_nothing() {
        // async N=4: row 4 window is (0, 4/7); at s = 0.9 only rows 1..2 move
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0: Tensor<f64> = normal_tensor(&[1, 4, 2], &mut rng);
        let mut draw = draw_cfm::<f64, _>(1, 4, 2, &mut rng);
        draw.s = vec![0.9];
        let sched = NoiseSchedule::new(ScheduleKind::Async, 4).unwrap();
        let base = cfm_loss_with(&Zero, &x0, &[true; 4], &sched, &draw, true).unwrap();
        let mut junk = Tensor::zeros(&[4, 2]);
        junk.row_mut(3).copy_from_slice(&[1e3, -1e3]);
        let l = cfm_loss_with(&Exact(junk), &x0, &[true; 4], &sched, &draw, true).unwrap();
        assert_eq!(l, base);
    }

    #[test]
    fn graph_and_sequential_losses_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dit = Dit::<f64>::new(small_dit(), &mut rng).unwrap();
        dit.params.randomize(0.3, &mut rng);
        let x0: Tensor<f64> = normal_tensor(&[3, 4, 2], &mut rng);
        let masks = vec![true, true, false, false, true, true, true, true, true, false, false, false];
        let draw = draw_cfm::<f64, _>(3, 4, 2, &mut rng);
        let sched = NoiseSchedule::new(ScheduleKind::Async, 4).unwrap();
        let mut g = Graph::new();
        let p = dit.params.register(&mut g);
        let a = cfm_loss_graph(&dit, &mut g, &p, &x0, &masks, &sched, &draw, true).unwrap();
        let b = cfm_loss_with(&dit, &x0, &masks, &sched, &draw, true).unwrap();
        assert!((g.value(a).item() - b).abs() < 1e-10);
    }

    #[test]
    fn nan_reports_batch_and_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x0: Tensor<f64> = normal_tensor(&[2, 4, 2], &mut rng);
        x0.data_mut()[9] = f64::NAN;
        let mut draw = draw_cfm::<f64, _>(2, 4, 2, &mut rng);
        draw.s = vec![0.25, 0.5];
        let sched = NoiseSchedule::new(ScheduleKind::Sync, 4).unwrap();
        let err = cfm_loss_with(&Zero, &x0, &[true; 8], &sched, &draw, true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch index 1") && msg.contains("0.5"), "{msg}");
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let latents: Vec<LatentSequence<f32>> = (0..6)
            .map(|_| LatentSequence { latents: normal_tensor(&[4, 2], &mut rng), mask: vec![true; 4] })
            .collect();
        let cfg = TrainConfig { batch_size: 3, total_steps: 5, checkpoint_every: 2, ..Default::default() };
        let run = || {
            let mut saves = Vec::new();
            let (d, _) = train_dm_latents(
                &latents,
                small_dit(),
                &cfg,
                &mut ChaCha8Rng::seed_from_u64(9),
                |_, _| {},
                |step, _| {
                    saves.push(step);
                    Ok(())
                },
            )
            .unwrap();
            (d.params.checksum(), saves)
        };
        let (a, saves) = run();
        assert_eq!(saves, vec![2, 4, 5]);
        assert_eq!(a, run().0);
    }
}
