//! Forecast scores: duration RMSE, type error rate, and the per-type
//! optimal-transport distance between event sequences.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::cumulative;
use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Validation(format!("length mismatch: {a} predictions, {b} targets")));
    }
    if a == 0 {
        return Err(Error::Validation("cannot score empty inputs".into()));
    }
    Ok(())
}

/// `sqrt(mean((pred − true)²))`.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let se: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// Fraction of positions where the types differ.
pub fn error_rate(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let wrong = pred.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtdConfig {
    pub del_cost: f64,
    pub trans_cost: f64,
}

impl Default for OtdConfig {
    fn default() -> Self {
        Self { del_cost: 1.0, trans_cost: 1.0 }
    }
}

impl OtdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.del_cost > 0.0) || !(self.trans_cost > 0.0) {
            return Err(Error::Validation(format!(
                "del_cost ({}) and trans_cost ({}) must be positive",
                self.del_cost, self.trans_cost
            )));
        }
        Ok(())
    }
}

/// An event at absolute time `t` (relative to the window start).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub t: f64,
    pub k: usize,
}

/// Absolute times measured from the start of the window.
pub fn window_events(taus: &[f64], types: &[usize]) -> Result<Vec<TimedEvent>> {
    if taus.len() != types.len() {
        return Err(Error::Validation(format!("{} taus but {} types", taus.len(), types.len())));
    }
    Ok(cumulative(taus).into_iter().zip(types).map(|(t, &k)| TimedEvent { t, k }).collect())
}

/// Times of each type, ascending type order; errors if any type's times
/// decrease.
fn per_type(seq: &[TimedEvent], k: usize) -> Result<Vec<f64>> {
    let times: Vec<f64> = seq.iter().filter(|e| e.k == k).map(|e| e.t).collect();
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Validation("event times must be finite".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Validation(format!("event times of type {k} are not sorted")));
    }
    Ok(times)
}

fn types_of(a: &[TimedEvent], b: &[TimedEvent]) -> BTreeSet<usize> {
    a.iter().chain(b).map(|e| e.k).collect()
}

fn otd_single(a: &[f64], b: &[f64], c: &OtdConfig) -> f64 {
    let (m, n) = (a.len(), b.len());
    let mut prev = vec![0.0f64; n + 1];
    for j in 1..=n {
        prev[j] = prev[j - 1] + c.del_cost;
    }
    let mut cur = vec![0.0f64; n + 1];
    for i in 1..=m {
        cur[0] = prev[0] + c.del_cost;
        for j in 1..=n {
            let del_a = prev[j] + c.del_cost;
            let del_b = cur[j - 1] + c.del_cost;
            let matched = prev[j - 1] + c.trans_cost * (a[i - 1] - b[j - 1]).abs();
            cur[j] = del_a.min(del_b).min(matched);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Sum over types of the alignment cost: each unmatched event costs
/// `del_cost`, each matched pair `trans_cost·|t − t′|`, matchings monotone.
pub fn otd(pred: &[TimedEvent], truth: &[TimedEvent], config: &OtdConfig) -> Result<f64> {
    config.validate()?;
    let mut total = 0.0;
    for k in types_of(pred, truth) {
        total += otd_single(&per_type(pred, k)?, &per_type(truth, k)?, config);
    }
    Ok(total)
}

/// Largest per-type subsequence the exhaustive oracle accepts.
pub const BRUTEFORCE_MAX: usize = 6;

fn enumerate(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64, c: &OtdConfig, best: &mut f64) {
    if i == a.len() && j == b.len() {
        *best = best.min(acc);
        return;
    }
    if i < a.len() {
        enumerate(a, b, i + 1, j, acc + c.del_cost, c, best);
    }
    if j < b.len() {
        enumerate(a, b, i, j + 1, acc + c.del_cost, c, best);
    }
    if i < a.len() && j < b.len() {
        enumerate(a, b, i + 1, j + 1, acc + c.trans_cost * (a[i] - b[j]).abs(), c, best);
    }
}

/// Exhaustive minimum over all monotone partial matchings, per type.
pub fn otd_bruteforce(pred: &[TimedEvent], truth: &[TimedEvent], config: &OtdConfig) -> Result<f64> {
    config.validate()?;
    let mut total = 0.0;
    for k in types_of(pred, truth) {
        let (a, b) = (per_type(pred, k)?, per_type(truth, k)?);
        if a.len() > BRUTEFORCE_MAX || b.len() > BRUTEFORCE_MAX {
            return Err(Error::Validation(format!(
                "type {k} has {} and {} events; brute force is limited to {BRUTEFORCE_MAX}",
                a.len(),
                b.len()
            )));
        }
        let mut best = f64::INFINITY;
        enumerate(&a, &b, 0, 0, 0.0, config, &mut best);
        total += best;
    }
    Ok(total)
}

/// One line of the evaluation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub task: String,
    pub horizon: usize,
    pub seed: u64,
    pub rmse: f64,
    pub error_rate: f64,
    pub otd: f64,
}

impl EvalRow {
    pub const HEADER: &'static str = "dataset,task,horizon,seed,rmse,error_rate,otd";

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            csv_field(&self.dataset),
            csv_field(&self.task),
            self.horizon,
            self.seed,
            self.rmse,
            self.error_rate,
            self.otd
        );
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, k: usize) -> TimedEvent {
        TimedEvent { t, k }
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[1.0, 1.0], &[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[3.0], &[0.0]).unwrap(), 3.0);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn error_rate_cases() {
        assert_eq!(error_rate(&[0, 1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(error_rate(&[0, 1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(error_rate(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.25);
        assert!(error_rate(&[0], &[]).is_err());
    }

    #[test]
    fn otd_trivial_cases() {
        let c = OtdConfig::default();
        let a = vec![ev(0.5, 0), ev(1.0, 1), ev(2.5, 0)];
        assert_eq!(otd(&a, &a, &c).unwrap(), 0.0);
        assert_eq!(otd(&[], &a, &c).unwrap(), 3.0);
        assert_eq!(otd_bruteforce(&[], &a, &c).unwrap(), 3.0);
        assert_eq!(otd_bruteforce(&a, &a, &c).unwrap(), 0.0);
    }

    #[test]
    fn two_branch_hand_cases() {
        let (p, t) = ([ev(1.0, 0)], [ev(3.0, 0)]);
        let c = OtdConfig::default();
        assert_eq!(otd_bruteforce(&p, &t, &c).unwrap(), 2.0);
        let half = OtdConfig { del_cost: 0.5, trans_cost: 1.0 };
        assert_eq!(otd_bruteforce(&p, &t, &half).unwrap(), 1.0);
        assert_eq!(otd(&p, &t, &half).unwrap(), 1.0);
        assert_eq!(otd(&[ev(1.0, 0)], &[ev(1.0, 1)], &c).unwrap(), 2.0);
    }

    #[test]
    fn unsorted_and_guard() {
        let c = OtdConfig::default();
        assert!(otd(&[ev(2.0, 0), ev(1.0, 0)], &[], &c).is_err());
        let many: Vec<_> = (0..7).map(|i| ev(i as f64, 0)).collect();
        assert!(otd_bruteforce(&many, &[], &c).is_err());
        assert!(otd(&many, &[], &c).is_ok());
        assert!(otd(&[], &[], &OtdConfig { del_cost: 0.0, trans_cost: 1.0 }).is_err());
    }

    #[test]
    fn window_times_accumulate() {
        let e = window_events(&[0.5, 1.0, 0.25], &[1, 0, 1]).unwrap();
        assert_eq!(e.iter().map(|x| x.t).collect::<Vec<_>>(), vec![0.5, 1.5, 1.75]);
    }

    #[test]
    fn csv_row() {
        let r = EvalRow { dataset: "a,b".into(), task: "next".into(), horizon: 1, seed: 3, rmse: 0.5, error_rate: 0.0, otd: 2.0 };
        assert_eq!(r.to_csv(), "\"a,b\",next,1,3,0.5,0,2");
    }
}
