//! Conditional generation by solving the generative ODE backwards in flow
//! time, on grids aligned with the schedule's breakpoints.
//!
//! Observed rows follow the known field `a′_i(s)·(y_i − ε_i)`, which is
//! constant between breakpoints, so Euler and RK4 reproduce them exactly.
//! Prediction rows follow `a′_i(s)·v_θ(x_s, A(s))_i`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pad_and_mask, Event, TauScaler};
use crate::dit::VelocityModel;
use crate::error::{Error, Result};
use crate::params::normal_tensor;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, Side};
use crate::tensor::Tensor;
use crate::vae::Vae;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Euler,
    Rk4,
}

impl SolverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Rk4 => "rk4",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverKind::Euler),
            "rk4" => Ok(SolverKind::Rk4),
            other => Err(Error::Validation(format!("unknown solver '{other}' (expected euler or rk4)"))),
        }
    }
}

/// One conditional generation problem over a length-`N` latent matrix.
///
/// Positions are 1-based: `O = {1..n_obs}`, `P = {pred_start..=pred_end}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastTask<T> {
    /// `N×d`; only rows in `O` are read.
    pub y: Tensor<T>,
    /// `N×d` noise, fixed for the whole solve.
    pub eps: Tensor<T>,
    pub n_obs: usize,
    pub pred_start: usize,
    pub pred_end: usize,
}

impl<T: Scalar> ForecastTask<T> {
    pub fn new(y: Tensor<T>, eps: Tensor<T>, n_obs: usize, pred_start: usize, pred_end: usize) -> Result<Self> {
        if y.rank() != 2 || y.shape() != eps.shape() {
            return Err(Error::Shape(format!("y {:?} and eps {:?} must be equal N×d", y.shape(), eps.shape())));
        }
        let n = y.shape()[0];
        if pred_start <= n_obs || pred_start < 1 || pred_end < pred_start || pred_end > n {
            return Err(Error::Validation(format!(
                "prediction window {pred_start}..={pred_end} must be nonempty, follow O = 1..={n_obs} and end by {n}"
            )));
        }
        Ok(Self { y, eps, n_obs, pred_start, pred_end })
    }

    pub fn len(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.y.shape()[1]
    }

    /// 0-based row index helpers.
    pub fn is_observed(&self, row: usize) -> bool {
        row < self.n_obs
    }

    pub fn is_predicted(&self, row: usize) -> bool {
        row + 1 >= self.pred_start && row < self.pred_end
    }

    /// Attendable positions: `O ∪ P`.
    pub fn key_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|r| self.is_observed(r) || self.is_predicted(r)).collect()
    }

    /// `[min s_start, max s_end]` over the windows of `P`.
    pub fn span(&self, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
        check_len(schedule, self.len())?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in self.pred_start..=self.pred_end {
            let w = schedule.window::<f64>(i)?;
            lo = lo.min(w.s_start);
            hi = hi.max(w.s_end);
        }
        Ok((lo, hi))
    }

    /// `x* = [y_O, ε_rest]`.
    pub fn x_star(&self) -> Tensor<T> {
        let mut x = self.eps.clone();
        for r in 0..self.n_obs {
            x.row_mut(r).copy_from_slice(self.y.row(r));
        }
        x
    }
}

fn check_len(schedule: &NoiseSchedule, n: usize) -> Result<()> {
    if schedule.len() != n {
        return Err(Error::Shape(format!("schedule of length {} for {n} rows", schedule.len())));
    }
    Ok(())
}

/// Flow times from `hi` down to `lo`: every breakpoint strictly inside the
/// span plus both ends, each cell split into `substeps` equal steps.
pub fn solver_grid(schedule: &NoiseSchedule, lo: f64, hi: f64, substeps: usize) -> Result<Vec<f64>> {
    if substeps == 0 {
        return Err(Error::Validation("substeps must be at least 1".into()));
    }
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Validation(format!("invalid span [{lo}, {hi}]")));
    }
    let mut knots = vec![hi];
    let mut inner: Vec<f64> = schedule.breakpoints::<f64>().into_iter().filter(|&b| lo < b && b < hi).collect();
    inner.sort_by(|a, b| b.partial_cmp(a).unwrap());
    knots.extend(inner);
    knots.push(lo);
    let mut grid = vec![hi];
    for w in knots.windows(2) {
        let (top, bottom) = (w[0], w[1]);
        for j in 1..substeps {
            grid.push(top - (top - bottom) * (j as f64 / substeps as f64));
        }
        grid.push(bottom);
    }
    Ok(grid)
}

/// A time-dependent vector field over `N×d` states. `side` selects the
/// one-sided derivative of `A` at kinks: `Left` for the interval below `s`,
/// `Right` for the interval above.
pub trait Field<T> {
    fn eval(&self, x: &Tensor<T>, s: f64, side: Side) -> Result<Tensor<T>>;
}

/// The known conditional field `a′_i(s)·(y_i − ε_i)` on every row.
pub struct ObservedField<'a, T> {
    pub y: &'a Tensor<T>,
    pub eps: &'a Tensor<T>,
    pub schedule: &'a NoiseSchedule,
}

impl<T: Scalar> Field<T> for ObservedField<'_, T> {
    fn eval(&self, _x: &Tensor<T>, s: f64, side: Side) -> Result<Tensor<T>> {
        let ap = self.schedule.a_prime_diag_side(&s, side)?;
        let mut out = self.y.sub(self.eps)?;
        for (r, &a) in ap.iter().enumerate() {
            let a = T::of(a);
            out.row_mut(r).iter_mut().for_each(|v| *v = *v * a);
        }
        Ok(out)
    }
}

/// Observed rows follow their known field, prediction rows the model,
/// everything else is frozen. Evaluates a batch of tasks that share their
/// windows and differ only in data or noise; states are `[K, N, d]`.
pub struct ConditionalField<'a, T, M: ?Sized> {
    pub tasks: &'a [ForecastTask<T>],
    pub schedule: &'a NoiseSchedule,
    pub model: &'a M,
}

fn check_batch<T: Scalar>(tasks: &[ForecastTask<T>], schedule: &NoiseSchedule) -> Result<()> {
    let first = tasks.first().ok_or_else(|| Error::Validation("no forecast tasks".into()))?;
    check_len(schedule, first.len())?;
    let same = tasks.iter().all(|t| {
        t.y.shape() == first.y.shape()
            && (t.n_obs, t.pred_start, t.pred_end) == (first.n_obs, first.pred_start, first.pred_end)
    });
    if !same {
        return Err(Error::Validation("batched forecast tasks must share shape and windows".into()));
    }
    Ok(())
}

impl<T: Scalar, M: VelocityModel<T> + ?Sized> Field<T> for ConditionalField<'_, T, M> {
    fn eval(&self, x: &Tensor<T>, s: f64, side: Side) -> Result<Tensor<T>> {
        let task = &self.tasks[0];
        let (k, n, d) = (self.tasks.len(), task.len(), task.dim());
        if x.shape() != [k, n, d] {
            return Err(Error::Shape(format!("state {:?}, expected [{k}, {n}, {d}]", x.shape())));
        }
        let ap = self.schedule.a_prime_diag_side(&s, side)?;
        let needs_model = (task.pred_start - 1..task.pred_end).any(|r| ap[r] != 0.0);
        let v = if needs_model {
            let a: Vec<T> = self.schedule.a_diag(&s)?.into_iter().map(T::of).collect();
            let a = Tensor::new(vec![k, n], a.repeat(k))?;
            Some(self.model.velocity_batch(x, &a, &task.key_mask().repeat(k))?)
        } else {
            None
        };
        let mut out = vec![T::zero(); k * n * d];
        for (b, t) in self.tasks.iter().enumerate() {
            for (r, &apr) in ap.iter().enumerate() {
                if apr == 0.0 {
                    continue;
                }
                let c = T::of(apr);
                let dst = &mut out[(b * n + r) * d..(b * n + r + 1) * d];
                if t.is_observed(r) {
                    for ((o, y), e) in dst.iter_mut().zip(t.y.row(r)).zip(t.eps.row(r)) {
                        *o = c * (*y - *e);
                    }
                } else if t.is_predicted(r) {
                    let v = v.as_ref().expect("model evaluated for active prediction rows");
                    for (o, vv) in dst.iter_mut().zip(&v.data()[(b * n + r) * d..(b * n + r + 1) * d]) {
                        *o = c * *vv;
                    }
                }
            }
        }
        Tensor::new(vec![k, n, d], out)
    }
}

/// Field of a single task at `s` with the default derivative convention.
pub fn conditional_field<T: Scalar, M: VelocityModel<T> + ?Sized>(
    task: &ForecastTask<T>,
    x_s: &Tensor<T>,
    s: f64,
    model: &M,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let side = if s == 0.0 { Side::Right } else { Side::Left };
    let tasks = std::slice::from_ref(task);
    check_batch(tasks, schedule)?;
    let x = x_s.reshape(&[1, task.len(), task.dim()])?;
    ConditionalField { tasks, schedule, model }.eval(&x, s, side)?.reshape(&[task.len(), task.dim()])
}

/// `A(s)·x* + (I − A(s))·ε` at flow time `s`; prediction rows must be pure
/// noise there.
pub fn initial_state_at<T: Scalar>(task: &ForecastTask<T>, schedule: &NoiseSchedule, s: f64) -> Result<Tensor<T>> {
    check_len(schedule, task.len())?;
    let a = schedule.a_diag(&s)?;
    for r in task.pred_start - 1..task.pred_end {
        if a[r] != 0.0 {
            return Err(Error::Contract(format!(
                "prediction row {} is not pure noise at s = {s} (a = {})",
                r + 1,
                a[r]
            )));
        }
    }
    let xs = task.x_star();
    let mut out = task.eps.clone();
    for (r, &ar) in a.iter().enumerate() {
        let ar = T::of(ar);
        for ((o, x), e) in out.row_mut(r).iter_mut().zip(xs.row(r)).zip(task.eps.row(r)) {
            *o = ar * *x + (T::one() - ar) * *e;
        }
    }
    Ok(out)
}

/// Initial state at the upper end of the task span.
pub fn initial_state<T: Scalar>(task: &ForecastTask<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    let (_, hi) = task.span(schedule)?;
    initial_state_at(task, schedule, hi)
}

fn axpy<T: Scalar>(x: &Tensor<T>, h: T, k: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().zip(k.data()).map(|(&a, &b)| a + h * b).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Integrates `field` along the decreasing `grid`, starting from `x` at
/// `grid[0]`.
pub fn integrate<T: Scalar, F: Field<T> + ?Sized>(
    field: &F,
    x: Tensor<T>,
    grid: &[f64],
    solver: SolverKind,
) -> Result<Tensor<T>> {
    let mut x = x;
    for w in grid.windows(2) {
        let (s, s_next) = (w[0], w[1]);
        if !(s_next < s) {
            return Err(Error::Contract(format!("grid must be strictly decreasing ({s} then {s_next})")));
        }
        let hf = s_next - s;
        let h = T::of(hf);
        x = match solver {
            SolverKind::Euler => axpy(&x, h, &field.eval(&x, s, Side::Left)?),
            SolverKind::Rk4 => {
                let half = T::of(hf / 2.0);
                let mid = s + hf / 2.0;
                let k1 = field.eval(&x, s, Side::Left)?;
                let k2 = field.eval(&axpy(&x, half, &k1), mid, Side::Left)?;
                let k3 = field.eval(&axpy(&x, half, &k2), mid, Side::Left)?;
                let k4 = field.eval(&axpy(&x, h, &k3), s_next, Side::Right)?;
                let sixth = T::of(hf / 6.0);
                let two = T::of(2.0);
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        v + sixth * (k1.data()[j] + two * k2.data()[j] + two * k3.data()[j] + k4.data()[j])
                    })
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
        };
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("solver state became non-finite at s = {s_next}")));
        }
    }
    Ok(x)
}

/// Which flow-time interval to integrate over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Span {
    /// Only the windows of the prediction rows.
    Restricted,
    /// The whole of `[0, 1]`.
    Full,
}

/// Integrates the conditional field of a batch of tasks sharing windows;
/// returns the `[K, N, d]` state at the lower end of the span.
pub fn solve_batch<T: Scalar, M: VelocityModel<T> + ?Sized>(
    tasks: &[ForecastTask<T>],
    model: &M,
    schedule: &NoiseSchedule,
    solver: SolverKind,
    substeps: usize,
    span: Span,
) -> Result<Tensor<T>> {
    check_batch(tasks, schedule)?;
    let (lo, hi) = match span {
        Span::Restricted => tasks[0].span(schedule)?,
        Span::Full => (0.0, 1.0),
    };
    let grid = solver_grid(schedule, lo, hi, substeps)?;
    let (n, d) = (tasks[0].len(), tasks[0].dim());
    let mut x0 = Vec::with_capacity(tasks.len() * n * d);
    for t in tasks {
        x0.extend_from_slice(initial_state_at(t, schedule, hi)?.data());
    }
    let x = Tensor::new(vec![tasks.len(), n, d], x0)?;
    integrate(&ConditionalField { tasks, schedule, model }, x, &grid, solver)
}

/// Single-task form of [`solve_batch`]; returns `N×d`.
pub fn solve<T: Scalar, M: VelocityModel<T> + ?Sized>(
    task: &ForecastTask<T>,
    model: &M,
    schedule: &NoiseSchedule,
    solver: SolverKind,
    substeps: usize,
    span: Span,
) -> Result<Tensor<T>> {
    solve_batch(std::slice::from_ref(task), model, schedule, solver, substeps, span)?
        .reshape(&[task.len(), task.dim()])
}

/// Everything needed to turn observed events into predicted ones.
pub struct Forecaster<'a, T, M: ?Sized> {
    pub model: &'a M,
    pub vae: &'a Vae<T>,
    pub schedule: NoiseSchedule,
    pub tau_scaler: TauScaler,
    pub solver: SolverKind,
    pub substeps: usize,
    pub span: Span,
    /// Noise draws per prediction, solved together as one batch.
    pub samples: usize,
}

impl<'a, T: Scalar, M: VelocityModel<T> + ?Sized> Forecaster<'a, T, M> {
    pub fn new(model: &'a M, vae: &'a Vae<T>, schedule: NoiseSchedule, tau_scaler: TauScaler) -> Self {
        Self { model, vae, schedule, tau_scaler, solver: SolverKind::Euler, substeps: 8, span: Span::Restricted, samples: 1 }
    }

    pub fn max_len(&self) -> usize {
        self.schedule.len()
    }

    fn encode_observed(&self, observed: &[Event]) -> Result<Tensor<T>> {
        let n = self.max_len();
        let scaled: Vec<Event> = observed.iter().map(|e| Event::new(self.tau_scaler.apply(e.tau), e.k)).collect();
        pad_and_mask(&scaled, n)?;
        if scaled.is_empty() {
            return Ok(Tensor::zeros(&[n, self.vae.config.d_latent]));
        }
        Ok(self.vae.encode_sequence(&scaled, n)?.latents)
    }

    /// Solves one task per noise draw (all in one batch) and decodes rows
    /// `n_obs+1..=n_obs+h` of each into events in dataset units.
    pub fn sample_with_noise(&self, observed: &[Event], h: usize, noise: Vec<Tensor<T>>) -> Result<Vec<Vec<Event>>> {
        let n_obs = observed.len();
        let y = self.encode_observed(observed)?;
        let tasks = noise
            .into_iter()
            .map(|eps| ForecastTask::new(y.clone(), eps, n_obs, n_obs + 1, n_obs + h))
            .collect::<Result<Vec<_>>>()?;
        let x = solve_batch(&tasks, self.model, &self.schedule, self.solver, self.substeps, self.span)?;
        let (k, n, d) = (tasks.len(), self.max_len(), self.vae.config.d_latent);
        let mut rows = Vec::with_capacity(k * h * d);
        for b in 0..k {
            rows.extend_from_slice(&x.data()[(b * n + n_obs) * d..(b * n + n_obs + h) * d]);
        }
        let decoded = self.vae.decode_events(&Tensor::new(vec![k * h, d], rows)?)?;
        Ok(decoded
            .chunks(h)
            .map(|c| c.iter().map(|&(tau, k)| Event::new(self.tau_scaler.invert(tau), k)).collect())
            .collect())
    }

    /// Point forecast from `samples` draws: the mean decoded tau and the most
    /// frequent decoded type (ties to the lowest index) at each position.
    pub fn predict_with_noise(&self, observed: &[Event], h: usize, noise: Vec<Tensor<T>>) -> Result<Vec<Event>> {
        let draws = self.sample_with_noise(observed, h, noise)?;
        let k = self.vae.config.num_types;
        Ok((0..h)
            .map(|j| {
                let mut votes = vec![0usize; k];
                let mut tau = 0.0;
                for d in &draws {
                    tau += d[j].tau;
                    votes[d[j].k] += 1;
                }
                let best = (0..k).fold(0, |b, c| if votes[c] > votes[b] { c } else { b });
                Event::new(tau / draws.len() as f64, best)
            })
            .collect())
    }

    fn predict(&self, observed: &[Event], h: usize, rng: &mut (impl Rng + ?Sized)) -> Result<Vec<Event>> {
        let shape = [self.max_len(), self.vae.config.d_latent];
        let noise = (0..self.samples.max(1)).map(|_| normal_tensor(&shape, rng)).collect();
        self.predict_with_noise(observed, h, noise)
    }

    /// Event `n = observed.len() + 1` given events `1..n−1`.
    pub fn predict_next<R: Rng + ?Sized>(&self, observed: &[Event], rng: &mut R) -> Result<Event> {
        let n = observed.len() + 1;
        if n < 2 || n > self.max_len() {
            return Err(Error::Validation(format!("next-event position {n} outside 2..={}", self.max_len())));
        }
        Ok(self.predict(observed, 1, rng)?[0])
    }

    /// The `h` events following `observed`.
    pub fn predict_horizon<R: Rng + ?Sized>(&self, observed: &[Event], h: usize, rng: &mut R) -> Result<Vec<Event>> {
        if h == 0 || observed.is_empty() || observed.len() + h > self.max_len() {
            return Err(Error::Validation(format!(
                "horizon {h} after {} observed events exceeds length {} (need 1 <= h, at least one observation)",
                observed.len(),
                self.max_len()
            )));
        }
        self.predict(observed, h, rng)
    }

    /// Next-event loop over one sequence: predicts each event `n = 2..=L`
    /// from its true history, drawing fresh noise every time.
    pub fn next_event_sweep<R: Rng + ?Sized>(&self, events: &[Event], rng: &mut R) -> Result<Vec<Event>> {
        (1..events.len()).map(|n| self.predict_next(&events[..n], rng)).collect()
    }
}
