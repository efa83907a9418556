mod common;

use std::sync::OnceLock;

use asyncflow::data::{Dataset, Event, EventSequence, TauScaler};
use asyncflow::dit::{Dit, DitConfig, VelocityModel};
use asyncflow::forecast::{solve, solver_grid, ForecastTask, Forecaster, SolverKind, Span};
use asyncflow::optim::AdamConfig;
use asyncflow::params::normal_tensor;
use asyncflow::schedule::{NoiseSchedule, ScheduleKind};
use asyncflow::training::{train_dm, TrainConfig};
use asyncflow::vae::{train_vae, Vae, VaeConfig, VaeTrainConfig};
use asyncflow::{Result, Scalar, Tensor, Tensor32, Tensor64};
use common::{random_dit, rng};

const TOY_N: usize = 8;
const TOY_D: usize = 4;

/// Alternating types with a constant gap; half the sequences start with
/// type 1 so the next type depends on the history.
fn alternating(count: usize) -> Dataset {
    let seqs = (0..count)
        .map(|j| EventSequence::new((0..TOY_N).map(|i| Event::new(1.0, (i + j) % 2)).collect()).unwrap())
        .collect();
    Dataset::new(seqs, 2, TOY_N).unwrap()
}

struct Toy {
    vae: Vae<f32>,
    dit: Dit<f32>,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let data = alternating(32);
        let mut r = rng(11);
        let vcfg = VaeTrainConfig { steps: 400, batch: 64, lr: 3e-3, ..Default::default() };
        let (vae, _) = train_vae::<f32, _>(&data, VaeConfig::new(2, TOY_D), &vcfg, &mut r, |_, _| {}).unwrap();
        let dc = DitConfig { d_model: 32, num_layers: 2, num_heads: 2, mlp_ratio: 2, h_emb: 16, ..DitConfig::new(TOY_N, TOY_D) };
        let cfg = TrainConfig { batch_size: 16, total_steps: 400, adam: AdamConfig::with_lr(2e-3), ..Default::default() };
        let (dit, _) = train_dm(&data, &vae, dc, &cfg, &mut r, |_, _| {}, |_, _| Ok(())).unwrap();
        Toy { vae, dit }
    })
}

fn random_task<T: Scalar>(n: usize, d: usize, n_obs: usize, h: usize, seed: u64) -> ForecastTask<T> {
    let mut r = rng(seed);
    let y = normal_tensor(&[n, d], &mut r);
    let eps = normal_tensor(&[n, d], &mut r);
    ForecastTask::new(y, eps, n_obs, n_obs + 1, n_obs + h).unwrap()
}

#[test]
fn observed_rows_are_reproduced() {
    let dit = random_dit::<f32>(10, 3, 0.3, 3);
    for kind in ScheduleKind::ALL {
        let schedule = NoiseSchedule::new(kind, 10).unwrap();
        for (n_obs, h) in [(3, 2), (7, 3), (9, 1)] {
            let task = random_task::<f32>(10, 3, n_obs, h, n_obs as u64);
            for solver in [SolverKind::Euler, SolverKind::Rk4] {
                let x = solve(&task, &dit, &schedule, solver, 3, Span::Restricted).unwrap();
                for r in 0..n_obs {
                    for c in 0..3 {
                        let gap = (x.at2(r, c) - task.y.at2(r, c)).abs();
                        assert!(gap < 1e-5, "{kind} {solver} row {r}: {gap:e}");
                    }
                }
            }
        }
    }
}

/// Returns `x0 − ε` for a fixed pair, whatever the state.
struct Oracle {
    target: Tensor64,
}

impl VelocityModel<f64> for Oracle {
    fn velocity(&self, _x: &Tensor64, _a: &[f64], _mask: &[bool]) -> Result<Tensor64> {
        Ok(self.target.clone())
    }
}

#[test]
fn oracle_field_recovers_the_encoded_events() {
    let mut r = rng(12);
    let vae = Vae::<f64>::from_params(VaeConfig::new(3, 4), toy_like_vae(&mut r)).unwrap();
    let events: Vec<Event> = (0..8).map(|i| Event::new(0.2 + 0.3 * i as f64, i % 3)).collect();
    let x0 = vae.encode_sequence(&events, 8).unwrap().latents;
    let eps: Tensor64 = normal_tensor(&[8, 4], &mut r);
    let oracle = Oracle { target: x0.sub(&eps).unwrap() };
    let expected = vae.decode_events(&x0).unwrap();
    for kind in ScheduleKind::ALL {
        let mut f = Forecaster::new(&oracle, &vae, NoiseSchedule::new(kind, 8).unwrap(), TauScaler::Identity);
        for solver in [SolverKind::Euler, SolverKind::Rk4] {
            f.solver = solver;
            for n_obs in [1, 4, 7] {
                let h = 8 - n_obs;
                let got = f.predict_with_noise(&events[..n_obs], h, vec![eps.clone()]).unwrap();
                for (j, e) in got.iter().enumerate() {
                    let (tau, k) = expected[n_obs + j];
                    assert_eq!(e.k, k, "{kind} {solver} n_obs {n_obs} row {j}");
                    assert!((e.tau - tau.max(0.0)).abs() < 1e-9, "{kind} {solver} n_obs {n_obs} row {j}");
                }
            }
        }
    }
}

/// A VAE with every weight drawn at random so encode/decode are nontrivial.
fn toy_like_vae(r: &mut rand_chacha::ChaCha8Rng) -> asyncflow::params::ParamSet<f64> {
    let mut v = Vae::<f64>::new(VaeConfig::new(3, 4), r);
    v.params.randomize(0.5, r);
    v.params
}

#[test]
fn horizon_one_matches_next_event() {
    let t = toy();
    let f = Forecaster::new(&t.dit, &t.vae, NoiseSchedule::new(ScheduleKind::Async, TOY_N).unwrap(), TauScaler::Identity);
    let seq = alternating(2).sequences[1].events().to_vec();
    for n in 2..=TOY_N {
        let a = f.predict_next(&seq[..n - 1], &mut rng(n as u64)).unwrap();
        let b = f.predict_horizon(&seq[..n - 1], 1, &mut rng(n as u64)).unwrap();
        assert_eq!(vec![a], b);
    }
}

#[test]
fn fresh_noise_changes_predictions() {
    let t = toy();
    let f = Forecaster::new(&t.dit, &t.vae, NoiseSchedule::new(ScheduleKind::Async, TOY_N).unwrap(), TauScaler::Identity);
    let seq = alternating(1).sequences[0].events().to_vec();
    let a = f.predict_horizon(&seq[..3], 5, &mut rng(1)).unwrap();
    let b = f.predict_horizon(&seq[..3], 5, &mut rng(2)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn alternating_pattern_is_learned() {
    let t = toy();
    let f = Forecaster::new(&t.dit, &t.vae, NoiseSchedule::new(ScheduleKind::Async, TOY_N).unwrap(), TauScaler::Identity);
    let test = alternating(6);
    let mut r = rng(13);
    let (mut hits, mut se, mut count) = (0usize, 0.0, 0usize);
    for seq in &test.sequences {
        let pred = f.next_event_sweep(seq.events(), &mut r).unwrap();
        for (p, truth) in pred.iter().zip(&seq.events()[1..]) {
            hits += usize::from(p.k == truth.k);
            se += (p.tau - truth.tau).powi(2);
            count += 1;
        }
    }
    let accuracy = hits as f64 / count as f64;
    let rmse = (se / count as f64).sqrt();
    assert!(accuracy >= 0.9, "type accuracy {accuracy}");
    assert!(rmse <= 0.2, "tau rmse {rmse} (mean tau 1)");
}

/// Max Euler/RK4 gap at `substeps`, and the RK4 change from `substeps` to
/// `4·substeps`, over a few tasks on the trained toy model.
fn solver_gaps(substeps: usize) -> (f32, f32) {
    let t = toy();
    let schedule = NoiseSchedule::new(ScheduleKind::Async, TOY_N).unwrap();
    let events = alternating(1).sequences[0].events().to_vec();
    let y = t.vae.encode_sequence(&events, TOY_N).unwrap().latents;
    let (mut euler_gap, mut rk4_gap) = (0.0f32, 0.0f32);
    for (n_obs, seed) in [(1, 1), (3, 2), (5, 3), (7, 4)] {
        let eps: Tensor32 = normal_tensor(&[TOY_N, TOY_D], &mut rng(seed));
        let task = ForecastTask::new(y.clone(), eps, n_obs, n_obs + 1, TOY_N).unwrap();
        let run = |solver, r| solve(&task, &t.dit, &schedule, solver, r, Span::Restricted).unwrap();
        let rk4 = run(SolverKind::Rk4, substeps);
        euler_gap = euler_gap.max(run(SolverKind::Euler, substeps).max_abs_diff(&rk4));
        rk4_gap = rk4_gap.max(run(SolverKind::Rk4, 4 * substeps).max_abs_diff(&rk4));
    }
    (euler_gap, rk4_gap)
}

#[test]
fn euler_converges_to_rk4_on_a_trained_model() {
    let (g8, rk4_8) = solver_gaps(8);
    let (g32, _) = solver_gaps(32);
    let (g128, _) = solver_gaps(128);
    eprintln!("euler vs rk4: r=8 {g8:e}, r=32 {g32:e}, r=128 {g128:e}; rk4 r=8 vs r=32 {rk4_8:e}");
    assert!(rk4_8 < 1e-4, "rk4 not converged at r=8: {rk4_8:e}");
    // first order: each 4x refinement cuts the gap by about 4
    assert!(g32 < g8 / 2.5 && g128 < g32 / 2.5, "{g8:e} {g32:e} {g128:e}");
    assert!(g8 < 0.05, "{g8:e}");
}

/// Straight-line sampler written out directly: start at noise, step
/// `x ← x + Δ·v(x, 1 − t)` from t = 1 to 0 on the given times.
fn reference_sampler<M: VelocityModel<f32>>(model: &M, eps: &Tensor32, times: &[f64]) -> Tensor32 {
    let n = eps.shape()[0];
    let mut x = eps.clone();
    for w in times.windows(2) {
        let a = vec![(1.0 - w[0]) as f32; n];
        let v = model.velocity(&x, &a, &vec![true; n]).unwrap();
        let dt = (w[0] - w[1]) as f32;
        x = Tensor::new(x.shape().to_vec(), x.data().iter().zip(v.data()).map(|(p, q)| p + dt * q).collect()).unwrap();
    }
    x
}

#[test]
fn sync_unconditional_solve_matches_reference_sampler() {
    let data = alternating(16);
    let mut r = rng(14);
    let vcfg = VaeTrainConfig { steps: 100, batch: 32, lr: 3e-3, ..Default::default() };
    let (vae, _) = train_vae::<f32, _>(&data, VaeConfig::new(2, TOY_D), &vcfg, &mut r, |_, _| {}).unwrap();
    let dc = DitConfig { d_model: 16, num_layers: 1, num_heads: 2, mlp_ratio: 2, h_emb: 8, ..DitConfig::new(TOY_N, TOY_D) };
    let cfg = TrainConfig { batch_size: 8, total_steps: 60, schedule: ScheduleKind::Sync, ..Default::default() };
    let (dit, _) = train_dm(&data, &vae, dc, &cfg, &mut r, |_, _| {}, |_, _| Ok(())).unwrap();

    let schedule = NoiseSchedule::new(ScheduleKind::Sync, TOY_N).unwrap();
    for substeps in [1, 4, 16] {
        let eps: Tensor32 = normal_tensor(&[TOY_N, TOY_D], &mut r);
        let task = ForecastTask::new(Tensor::zeros(&[TOY_N, TOY_D]), eps.clone(), 0, 1, TOY_N).unwrap();
        let ours = solve(&task, &dit, &schedule, SolverKind::Euler, substeps, Span::Full).unwrap();
        let times: Vec<f64> = (0..=substeps).map(|j| 1.0 - j as f64 / substeps as f64).collect();
        assert_eq!(solver_grid(&schedule, 0.0, 1.0, substeps).unwrap().len(), times.len());
        let reference = reference_sampler(&dit, &eps, &times);
        let gap = ours.max_abs_diff(&reference);
        assert!(gap < 1e-4, "substeps {substeps}: gap {gap:e}");
    }
}

#[test]
fn restricted_and_full_spans_agree() {
    for (n, h, seed) in [(8, 1, 1), (8, 3, 2), (12, 6, 3)] {
        let dit = random_dit::<f64>(n, 3, 0.3, seed);
        let schedule = NoiseSchedule::new(ScheduleKind::Async, n).unwrap();
        let task = random_task::<f64>(n, 3, n - h, h, seed + 10);
        for solver in [SolverKind::Euler, SolverKind::Rk4] {
            let a = solve(&task, &dit, &schedule, solver, 4, Span::Restricted).unwrap();
            let b = solve(&task, &dit, &schedule, solver, 4, Span::Full).unwrap();
            for r in n - h..n {
                for c in 0..3 {
                    assert!((a.at2(r, c) - b.at2(r, c)).abs() < 1e-5, "N {n} h {h} {solver} row {r}");
                }
            }
        }
    }
}
