//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use asyncflow::autodiff::Graph;
use asyncflow::dit::{Dit, DitConfig, VelocityModel};
use asyncflow::numgrad::rel_err;
use asyncflow::params::normal_tensor;
use asyncflow::schedule::{NoiseSchedule, ScheduleKind};
use asyncflow::training::{cfm_loss_graph, CfmDraw};
use asyncflow::{Result, Scalar, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small denoiser with every parameter drawn from N(0, std²), so that no
/// zero-initialized layer hides gradient or attention paths.
pub fn random_dit<T: Scalar>(n: usize, d: usize, std: f64, seed: u64) -> Dit<T> {
    let cfg = DitConfig { d_model: 16, num_layers: 2, num_heads: 2, mlp_ratio: 2, h_emb: 16, ..DitConfig::new(n, d) };
    let mut r = rng(seed);
    let mut dit = Dit::<T>::new(cfg, &mut r).unwrap();
    dit.params.randomize(std, &mut r);
    dit
}

pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
}

/// Compares reverse-mode gradients of `loss` (in `T`) against five-point
/// central differences of the same loss evaluated in `f64` on `count`
/// random parameter coordinates.
pub fn grad_check<T: Scalar>(
    dit: &Dit<T>,
    count: usize,
    fd_step: f64,
    floor: f64,
    seed: u64,
    loss: impl Fn(&Dit<f64>) -> Result<f64>,
    loss_t: impl Fn(&Dit<T>, &mut Graph<T>, &[asyncflow::autodiff::Var]) -> Result<asyncflow::autodiff::Var>,
) -> GradReport {
    let mut g = Graph::new();
    let p = dit.params.register(&mut g);
    let l = loss_t(dit, &mut g, &p).unwrap();
    let grads = g.backward(l).unwrap().params(dit.params.len());
    let auto = dit.params.flatten_grads(&grads);

    let mut probe = Dit::<f64>::from_params(dit.config, dit.params.cast()).unwrap();
    let base = probe.params.flatten();
    let mut r = rng(seed);
    let idx = sample(&mut r, base.len(), count.min(base.len()));
    let mut max_rel = 0.0f64;
    for i in idx.iter() {
        let mut at = |delta: f64| {
            let mut x = base.clone();
            x[i] = base[i] + delta;
            probe.params.load_flat(&x).unwrap();
            loss(&probe).unwrap()
        };
        let h = fd_step;
        let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        let e = rel_err(auto[i].f64(), fd, floor);
        max_rel = max_rel.max(e);
    }
    GradReport { checked: idx.len(), max_rel }
}

/// Fixed inputs for a flow-matching loss: `[B, N, d]` data, masks with some
/// padding, and one draw.
pub struct CfmCase<T> {
    pub x0: Tensor<T>,
    pub masks: Vec<bool>,
    pub draw: CfmDraw<T>,
    pub schedule: NoiseSchedule,
}

impl<T: Scalar> CfmCase<T> {
    pub fn new(b: usize, n: usize, d: usize, kind: ScheduleKind, seed: u64) -> Self {
        let mut r = rng(seed);
        let x0 = normal_tensor(&[b, n, d], &mut r);
        let masks = (0..b).flat_map(|bi| (0..n).map(move |i| i < n - bi % n)).collect();
        let s = (0..b).map(|_| 1.0 - r.random::<f64>()).collect();
        let eps = normal_tensor(&[b, n, d], &mut r);
        Self { x0, masks, draw: CfmDraw { s, eps }, schedule: NoiseSchedule::new(kind, n).unwrap() }
    }

    pub fn cast<U: Scalar>(&self) -> CfmCase<U> {
        CfmCase {
            x0: self.x0.cast(),
            masks: self.masks.clone(),
            draw: CfmDraw { s: self.draw.s.clone(), eps: self.draw.eps.cast() },
            schedule: self.schedule,
        }
    }

    pub fn loss_value(&self, dit: &Dit<T>) -> Result<T> {
        let mut g = Graph::new();
        let p = dit.params.register(&mut g);
        let l = cfm_loss_graph(dit, &mut g, &p, &self.x0, &self.masks, &self.schedule, &self.draw, true)?;
        Ok(g.value(l).item())
    }
}

/// ‖dit(x, a, mask)‖² recorded on `g`.
pub fn forward_sq_norm<T: Scalar>(
    dit: &Dit<T>,
    g: &mut Graph<T>,
    p: &[asyncflow::autodiff::Var],
    x: &Tensor<T>,
    a: &Tensor<T>,
    mask: &[bool],
) -> Result<asyncflow::autodiff::Var> {
    let xv = g.constant(x.clone());
    let out = dit.forward_graph(g, p, xv, a, mask)?;
    let sq = g.square(out)?;
    Ok(g.sum(sq))
}

/// Straight-line flow-matching loss written out directly: interpolate
/// `(1−s)·x0 + s·ε` on every row, regress onto `x0 − ε`, average over all
/// valid rows of the batch.
pub fn rectified_flow_loss<M: VelocityModel<f64>>(model: &M, x0: &Tensor<f64>, masks: &[bool], s: &[f64], eps: &Tensor<f64>) -> f64 {
    let sh = x0.shape();
    let (b, n, d) = (sh[0], sh[1], sh[2]);
    let mut total = 0.0;
    let mut rows = 0usize;
    for bi in 0..b {
        let off = bi * n * d;
        let xs: Vec<f64> = (0..n * d).map(|j| (1.0 - s[bi]) * x0.data()[off + j] + s[bi] * eps.data()[off + j]).collect();
        let mask = &masks[bi * n..(bi + 1) * n];
        let v = model.velocity(&Tensor::new(vec![n, d], xs).unwrap(), &vec![1.0 - s[bi]; n], mask).unwrap();
        for i in (0..n).filter(|&i| mask[i]) {
            rows += 1;
            for j in 0..d {
                let target = x0.data()[off + i * d + j] - eps.data()[off + i * d + j];
                total += (target - v.data()[i * d + j]).powi(2);
            }
        }
    }
    total / rows as f64
}

/// Gradient check of the flow-matching loss on a small random model.
pub fn cfm_report<T: Scalar>(floor: f64) -> GradReport {
    let dit = random_dit::<T>(6, 4, 0.2, 21);
    let case = CfmCase::<T>::new(3, 6, 4, ScheduleKind::Async, 22);
    let case64 = case.cast::<f64>();
    grad_check(
        &dit,
        120,
        1e-3,
        floor,
        23,
        |d| case64.loss_value(d).map(|v| v.f64()),
        |d, g, p| cfm_loss_graph(d, g, p, &case.x0, &case.masks, &case.schedule, &case.draw, true),
    )
}

/// Gradient check of ‖dit(x, a, mask)‖² on a small random model.
pub fn forward_report<T: Scalar>(floor: f64) -> GradReport {
    let dit = random_dit::<T>(6, 4, 0.2, 31);
    let mut r = rng(32);
    let x: Tensor<T> = normal_tensor(&[2, 6, 4], &mut r);
    let a = Tensor::new(vec![2, 6], (0..12).map(|i| T::of(i as f64 / 11.0)).collect()).unwrap();
    let mask: Vec<bool> = (0..12).map(|i| i != 5).collect();
    let (x64, a64) = (x.cast::<f64>(), a.cast::<f64>());
    grad_check(
        &dit,
        120,
        1e-3,
        floor,
        33,
        |d| {
            let mut g = Graph::new();
            let p = d.params.register(&mut g);
            let l = forward_sq_norm(d, &mut g, &p, &x64, &a64, &mask)?;
            Ok(g.value(l).item())
        },
        |d, g, p| forward_sq_norm(d, g, p, &x, &a, &mask),
    )
}
