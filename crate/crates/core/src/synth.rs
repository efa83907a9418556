//! Synthetic point-process generators.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::data::{Dataset, Event, EventSequence};
use crate::error::{Error, Result};

/// Multivariate Hawkes process with exponential kernels:
/// `λ_k(t) = μ_k + Σ_{t_j < t} α[k][k_j]·exp(−β[k][k_j]·(t − t_j))`.
#[derive(Clone, Debug, PartialEq)]
pub struct HawkesParams {
    pub base_rates: Vec<f64>,
    pub excitation: Vec<Vec<f64>>,
    pub decay: Vec<Vec<f64>>,
}

impl HawkesParams {
    pub fn num_types(&self) -> usize {
        self.base_rates.len()
    }

    /// Two types, each strongly self-exciting, weakly cross-exciting.
    pub fn two_type_bursty() -> Self {
        Self {
            base_rates: vec![0.2, 0.2],
            excitation: vec![vec![1.6, 0.1], vec![0.1, 1.6]],
            decay: vec![vec![2.0, 2.0], vec![2.0, 2.0]],
        }
    }

    /// Spectral radius of the branching matrix `α ⊘ β`.
    pub fn branching_radius(&self) -> f64 {
        let k = self.num_types();
        let m = DMatrix::from_fn(k, k, |i, j| self.excitation[i][j] / self.decay[i][j]);
        m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_types();
        if k == 0 {
            return Err(Error::Validation("Hawkes process needs at least one type".into()));
        }
        let square = |m: &Vec<Vec<f64>>| m.len() == k && m.iter().all(|r| r.len() == k);
        if !square(&self.excitation) || !square(&self.decay) {
            return Err(Error::Validation(format!("excitation and decay must be {k}×{k}")));
        }
        if self.base_rates.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Validation("base rates must be positive".into()));
        }
        if self.excitation.iter().flatten().any(|&a| !(a >= 0.0)) {
            return Err(Error::Validation("excitation must be non-negative".into()));
        }
        if self.decay.iter().flatten().any(|&b| !(b > 0.0)) {
            return Err(Error::Validation("decay must be positive".into()));
        }
        let rho = self.branching_radius();
        if !(rho < 1.0) {
            return Err(Error::Validation(format!(
                "non-stationary Hawkes parameters: spectral radius of excitation/decay is {rho:.4} >= 1"
            )));
        }
        Ok(())
    }
}

/// Ogata thinning on `[0, horizon]`. Returns events as (tau, type); empty if
/// nothing fired.
pub fn simulate_hawkes<R: Rng + ?Sized>(params: &HawkesParams, horizon: f64, rng: &mut R) -> Result<Vec<Event>> {
    params.validate()?;
    if !(horizon > 0.0) {
        return Err(Error::Validation(format!("horizon must be positive, got {horizon}")));
    }
    let k = params.num_types();
    // excite[i][j]: current contribution of past type-j events to λ_i
    let mut excite = vec![vec![0.0f64; k]; k];
    let mut t = 0.0f64;
    let mut last = 0.0f64;
    let mut events = Vec::new();
    let intensities = |ex: &Vec<Vec<f64>>| -> Vec<f64> {
        (0..k).map(|i| params.base_rates[i] + ex[i].iter().sum::<f64>()).collect()
    };
    loop {
        // exponential kernels only decay between events, so λ(t+) bounds λ on (t, next]
        let bound: f64 = intensities(&excite).iter().sum();
        let w = Exp::new(bound).map_err(|e| Error::Validation(e.to_string()))?.sample(rng);
        t += w;
        if t > horizon {
            break;
        }
        for i in 0..k {
            for j in 0..k {
                excite[i][j] *= (-params.decay[i][j] * w).exp();
            }
        }
        let lam = intensities(&excite);
        let total: f64 = lam.iter().sum();
        let u = rng.random::<f64>() * bound;
        if u > total {
            continue;
        }
        let mut pick = 0;
        let mut acc = lam[0];
        while pick + 1 < k && u > acc {
            pick += 1;
            acc += lam[pick];
        }
        for i in 0..k {
            excite[i][pick] += params.excitation[i][pick];
        }
        events.push(Event::new(t - last, pick));
        last = t;
    }
    Ok(events)
}

/// Homogeneous single-type Poisson process on `[0, horizon]`.
pub fn simulate_poisson<R: Rng + ?Sized>(rate: f64, horizon: f64, rng: &mut R) -> Result<Vec<Event>> {
    if !(rate > 0.0) || !(horizon > 0.0) {
        return Err(Error::Validation(format!("rate ({rate}) and horizon ({horizon}) must be positive")));
    }
    let exp = Exp::new(rate).map_err(|e| Error::Validation(e.to_string()))?;
    let mut t = 0.0;
    let mut events = Vec::new();
    loop {
        let w = exp.sample(rng);
        t += w;
        if t > horizon {
            break;
        }
        events.push(Event::new(w, 0));
    }
    Ok(events)
}

/// `n_seqs` independent non-empty Hawkes paths; empty draws are redrawn.
pub fn hawkes_paths<R: Rng + ?Sized>(
    params: &HawkesParams,
    horizon: f64,
    n_seqs: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Event>>> {
    params.validate()?;
    (0..n_seqs).map(|_| draw_nonempty(|r| simulate_hawkes(params, horizon, r), rng)).collect()
}

pub fn poisson_paths<R: Rng + ?Sized>(rate: f64, horizon: f64, n_seqs: usize, rng: &mut R) -> Result<Vec<Vec<Event>>> {
    (0..n_seqs).map(|_| draw_nonempty(|r| simulate_poisson(rate, horizon, r), rng)).collect()
}

fn chunked(paths: Vec<Vec<Event>>, num_types: usize, max_len: usize) -> Result<Dataset> {
    if max_len == 0 {
        return Err(Error::Validation("max_len must be positive".into()));
    }
    let mut sequences = Vec::new();
    for events in paths {
        for chunk in events.chunks(max_len) {
            sequences.push(EventSequence::new(chunk.to_vec())?);
        }
    }
    Dataset::new(sequences, num_types, max_len)
}

/// [`hawkes_paths`] chunked into sequences of at most `max_len` events.
pub fn hawkes_dataset<R: Rng + ?Sized>(
    params: &HawkesParams,
    horizon: f64,
    n_seqs: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Dataset> {
    chunked(hawkes_paths(params, horizon, n_seqs, rng)?, params.num_types(), max_len)
}

pub fn poisson_dataset<R: Rng + ?Sized>(
    rate: f64,
    horizon: f64,
    n_seqs: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Dataset> {
    chunked(poisson_paths(rate, horizon, n_seqs, rng)?, 1, max_len)
}

fn draw_nonempty<R: Rng + ?Sized>(
    mut f: impl FnMut(&mut R) -> Result<Vec<Event>>,
    rng: &mut R,
) -> Result<Vec<Event>> {
    for _ in 0..1000 {
        let ev = f(rng)?;
        if !ev.is_empty() {
            return Ok(ev);
        }
    }
    Err(Error::Validation("generator produced no events in 1000 attempts; increase the horizon".into()))
}
