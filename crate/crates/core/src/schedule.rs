//! Matrix-valued noise schedules `A(s)`, stored as their diagonal.
//!
//! Position `i` (1-based) carries data at flow time `s = 0` and pure noise at
//! `s = 1`. Between the two it moves linearly inside its own window
//! `[s_start(i), s_end(i)]`:
//!
//! ```text
//! a_i(s) = clip((s_end(i) − s) / (s_end(i) − s_start(i)), 0, 1)
//! ```
//!
//! * `Async`:    windows `((N−i)/(2N−1), (2N−i)/(2N−1))`, overlapping, later
//!   positions diffuse first.
//! * `Disjoint`: windows `((N−i)/N, (N−i+1)/N)`, one position at a time.
//! * `Sync`:     every window is `(0, 1)`, i.e. `A(s) = (1−s)I`.
//!
//! The arithmetic is generic over [`ScheduleValue`] so the same code runs in
//! `f32`, `f64` and exact rationals.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{Num, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Field-like number type the schedule formulas can be evaluated in.
pub trait ScheduleValue: Num + Clone + PartialOrd + fmt::Debug {
    fn ratio(num: i64, den: i64) -> Self;
    /// Exact conversion where the type allows it (rationals), rounding otherwise.
    fn from_f64_value(x: f64) -> Self;
    fn to_f64_value(&self) -> f64;

    fn abs_value(&self) -> Self {
        if *self < Self::zero() {
            Self::zero() - self.clone()
        } else {
            self.clone()
        }
    }
}

impl ScheduleValue for f32 {
    fn ratio(num: i64, den: i64) -> Self {
        num as f32 / den as f32
    }
    fn from_f64_value(x: f64) -> Self {
        x as f32
    }
    fn to_f64_value(&self) -> f64 {
        *self as f64
    }
}

impl ScheduleValue for f64 {
    fn ratio(num: i64, den: i64) -> Self {
        num as f64 / den as f64
    }
    fn from_f64_value(x: f64) -> Self {
        x
    }
    fn to_f64_value(&self) -> f64 {
        *self
    }
}

impl ScheduleValue for Ratio<i64> {
    fn ratio(num: i64, den: i64) -> Self {
        Ratio::new(num, den)
    }
    /// Panics if `x` is not representable with an `i64` numerator/denominator.
    fn from_f64_value(x: f64) -> Self {
        Ratio::approximate_float(x).expect("f64 representable as Ratio<i64>")
    }
    fn to_f64_value(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl ScheduleValue for BigRational {
    fn ratio(num: i64, den: i64) -> Self {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
    fn from_f64_value(x: f64) -> Self {
        BigRational::from_float(x).expect("finite f64")
    }
    fn to_f64_value(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Async,
    Disjoint,
    Sync,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Async, ScheduleKind::Disjoint, ScheduleKind::Sync];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Async => "async",
            ScheduleKind::Disjoint => "disjoint",
            ScheduleKind::Sync => "sync",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "async" => Ok(ScheduleKind::Async),
            "disjoint" => Ok(ScheduleKind::Disjoint),
            "sync" => Ok(ScheduleKind::Sync),
            other => Err(Error::Validation(format!(
                "unknown schedule kind '{other}' (expected async, disjoint or sync)"
            ))),
        }
    }
}

/// Flow-time interval in which one position moves from data to noise.
#[derive(Clone, Debug, PartialEq)]
pub struct EventWindow<V> {
    pub s_start: V,
    pub s_end: V,
}

/// Which one-sided derivative to take at a kink.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Slope of the piece just below `s`.
    Left,
    /// Slope of the piece just above `s`.
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    n: usize,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation("schedule length N must be positive".into()));
        }
        Ok(Self { kind, n })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn window_ints(&self, i: usize) -> (i64, i64, i64) {
        let n = self.n as i64;
        let i = i as i64;
        match self.kind {
            ScheduleKind::Async => (n - i, 2 * n - i, 2 * n - 1),
            ScheduleKind::Disjoint => (n - i, n - i + 1, n),
            ScheduleKind::Sync => (0, 1, 1),
        }
    }

    /// Window of position `i`, 1-based.
    pub fn window<V: ScheduleValue>(&self, i: usize) -> Result<EventWindow<V>> {
        if i == 0 || i > self.n {
            return Err(Error::Validation(format!("position {i} outside 1..={}", self.n)));
        }
        Ok(self.window_unchecked(i))
    }

    fn window_unchecked<V: ScheduleValue>(&self, i: usize) -> EventWindow<V> {
        let (a, b, den) = self.window_ints(i);
        EventWindow { s_start: V::ratio(a, den), s_end: V::ratio(b, den) }
    }

    fn check_s<V: ScheduleValue>(s: &V) -> Result<()> {
        if *s < V::zero() || *s > V::one() {
            return Err(Error::Contract(format!("flow time {s:?} outside [0, 1]")));
        }
        Ok(())
    }

    /// Diagonal of `A(s)`.
    pub fn a_diag<V: ScheduleValue>(&self, s: &V) -> Result<Vec<V>> {
        Self::check_s(s)?;
        Ok((1..=self.n).map(|i| self.a_entry(i, s)).collect())
    }

    /// Entry `i` (1-based) of the diagonal; `s` is assumed in range.
    pub fn a_entry<V: ScheduleValue>(&self, i: usize, s: &V) -> V {
        let w: EventWindow<V> = self.window_unchecked(i);
        if *s <= w.s_start {
            return V::one();
        }
        if *s >= w.s_end {
            return V::zero();
        }
        (w.s_end.clone() - s.clone()) / (w.s_end - w.s_start)
    }

    /// Weak derivative of the diagonal, left-hand at kinks (right-hand at `s = 0`).
    pub fn a_prime_diag<V: ScheduleValue>(&self, s: &V) -> Result<Vec<V>> {
        let side = if s.is_zero() { Side::Right } else { Side::Left };
        self.a_prime_diag_side(s, side)
    }

    pub fn a_prime_diag_side<V: ScheduleValue>(&self, s: &V, side: Side) -> Result<Vec<V>> {
        Self::check_s(s)?;
        Ok((1..=self.n).map(|i| self.a_prime_entry(i, s, side)).collect())
    }

    pub fn a_prime_entry<V: ScheduleValue>(&self, i: usize, s: &V, side: Side) -> V {
        let w: EventWindow<V> = self.window_unchecked(i);
        let inside = match side {
            Side::Left => *s > w.s_start && *s <= w.s_end,
            Side::Right => *s >= w.s_start && *s < w.s_end,
        };
        if inside {
            V::zero() - V::one() / (w.s_end - w.s_start)
        } else {
            V::zero()
        }
    }

    /// Sorted, de-duplicated flow times where some entry has a kink, plus 0 and 1.
    pub fn breakpoints<V: ScheduleValue>(&self) -> Vec<V> {
        let den = self.window_ints(1).2;
        // every window endpoint is a multiple of 1/den
        let mut hit = vec![false; den as usize + 1];
        hit[0] = true;
        hit[den as usize] = true;
        for i in 1..=self.n {
            let (a, b, _) = self.window_ints(i);
            hit[a as usize] = true;
            hit[b as usize] = true;
        }
        hit.iter()
            .enumerate()
            .filter(|(_, &h)| h)
            .map(|(m, _)| V::ratio(m as i64, den))
            .collect()
    }

    /// Largest slope magnitude of any entry.
    pub fn lipschitz(&self) -> f64 {
        match self.kind {
            ScheduleKind::Async => (2 * self.n - 1) as f64 / self.n as f64,
            ScheduleKind::Disjoint => self.n as f64,
            ScheduleKind::Sync => 1.0,
        }
    }
}

/// Anything that exposes a diagonal schedule for validation.
pub trait DiagonalSchedule {
    fn len(&self) -> usize;
    fn diag(&self, s: f64) -> Vec<f64>;
    fn lipschitz(&self) -> f64;
}

impl DiagonalSchedule for NoiseSchedule {
    fn len(&self) -> usize {
        self.n
    }

    fn diag(&self, s: f64) -> Vec<f64> {
        (1..=self.n).map(|i| self.a_entry(i, &s)).collect()
    }

    fn lipschitz(&self) -> f64 {
        NoiseSchedule::lipschitz(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Boundary,
    Range,
    Monotonicity,
    Continuity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// 1-based position.
    pub i: usize,
    pub s: f64,
    pub value: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} violation at i={} s={} (value {})", self.kind, self.i, self.s, self.value)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScheduleReport {
    pub violations: Vec<Violation>,
}

impl ScheduleReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks boundary values, range, monotone non-increase and continuity on a
/// uniform grid of `grid_size` points.
pub fn validate_schedule<S: DiagonalSchedule + ?Sized>(schedule: &S, grid_size: usize) -> Result<ScheduleReport> {
    if grid_size < 2 {
        return Err(Error::Contract("validation grid needs at least 2 points".into()));
    }
    let n = schedule.len();
    let mut report = ScheduleReport::default();
    let mut push = |kind, i, s, value| report.violations.push(Violation { kind, i, s, value });
    let start = schedule.diag(0.0);
    let end = schedule.diag(1.0);
    for i in 0..n {
        if start[i] != 1.0 {
            push(ViolationKind::Boundary, i + 1, 0.0, start[i]);
        }
        if end[i] != 0.0 {
            push(ViolationKind::Boundary, i + 1, 1.0, end[i]);
        }
    }
    let h = 1.0 / (grid_size - 1) as f64;
    let bound = schedule.lipschitz() * h + 1e-9;
    let mut prev = start;
    for k in 0..grid_size {
        let s = if k == grid_size - 1 { 1.0 } else { k as f64 * h };
        let cur = schedule.diag(s);
        for i in 0..n {
            if !(0.0..=1.0).contains(&cur[i]) {
                push(ViolationKind::Range, i + 1, s, cur[i]);
            }
            if k > 0 {
                if cur[i] > prev[i] + 1e-12 {
                    push(ViolationKind::Monotonicity, i + 1, s, cur[i] - prev[i]);
                }
                if (cur[i] - prev[i]).abs() > bound {
                    push(ViolationKind::Continuity, i + 1, s, (cur[i] - prev[i]).abs());
                }
            }
        }
        prev = cur;
    }
    Ok(report)
}

/// Row-wise `a_i·x0_i + (1−a_i)·ε_i` over `N×d` row-major slices.
pub fn interpolate_rows<V: ScheduleValue>(x0: &[V], eps: &[V], a: &[V]) -> Result<Vec<V>> {
    let d = row_width(x0.len(), eps.len(), a.len())?;
    let mut out = Vec::with_capacity(x0.len());
    for (i, ai) in a.iter().enumerate() {
        for j in i * d..(i + 1) * d {
            out.push(ai.clone() * x0[j].clone() + (V::one() - ai.clone()) * eps[j].clone());
        }
    }
    Ok(out)
}

/// Pseudo-inverse flow, row-wise: `(x_s − (1−a)ε)/a` where `a > 0`, `ε` where `a = 0`.
pub fn inverse_flow_rows<V: ScheduleValue>(xs: &[V], eps: &[V], a: &[V]) -> Result<Vec<V>> {
    let d = row_width(xs.len(), eps.len(), a.len())?;
    let mut out = Vec::with_capacity(xs.len());
    for (i, ai) in a.iter().enumerate() {
        for j in i * d..(i + 1) * d {
            if ai.is_zero() {
                out.push(eps[j].clone());
            } else {
                out.push((xs[j].clone() - (V::one() - ai.clone()) * eps[j].clone()) / ai.clone());
            }
        }
    }
    Ok(out)
}

fn row_width(x: usize, e: usize, n: usize) -> Result<usize> {
    if n == 0 || x != e || x % n != 0 || x == 0 {
        return Err(Error::Shape(format!("{x} and {e} elements for {n} schedule rows")));
    }
    Ok(x / n)
}

fn check_rows<T: Scalar>(schedule: &NoiseSchedule, ts: &[&Tensor<T>]) -> Result<()> {
    for t in ts {
        if t.rank() != 2 || t.shape()[0] != schedule.len() {
            return Err(Error::Shape(format!(
                "expected N×d with N={}, got {:?}",
                schedule.len(),
                t.shape()
            )));
        }
    }
    if ts.windows(2).any(|w| w[0].shape() != w[1].shape()) {
        return Err(Error::Shape("operand shapes differ".into()));
    }
    Ok(())
}

/// `x_s = A(s)·x0 + (I − A(s))·ε` for `N×d` tensors.
pub fn interpolate<T: Scalar + ScheduleValue>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    s: T,
) -> Result<Tensor<T>> {
    check_rows(schedule, &[x0, eps])?;
    let a = schedule.a_diag(&s)?;
    Tensor::new(x0.shape().to_vec(), interpolate_rows(x0.data(), eps.data(), &a)?)
}

/// `A(s)†(x_s − ε) + ε`, the pseudo-inverse of [`interpolate`].
pub fn inverse_flow<T: Scalar + ScheduleValue>(
    xs: &Tensor<T>,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    s: T,
) -> Result<Tensor<T>> {
    check_rows(schedule, &[xs, eps])?;
    let a = schedule.a_diag(&s)?;
    Tensor::new(xs.shape().to_vec(), inverse_flow_rows(xs.data(), eps.data(), &a)?)
}

/// Moves `s` at least `gap` away from every breakpoint (staying inside (0,1)).
pub fn nudge_off_breakpoints(schedule: &NoiseSchedule, s: f64, gap: f64) -> f64 {
    let mut s = s.clamp(gap, 1.0 - gap);
    for b in schedule.breakpoints::<f64>() {
        if (s - b).abs() < gap {
            s = if b + gap < 1.0 { b + gap } else { b - gap };
        }
    }
    s
}

/// Max componentwise gap between `A′(s)A(s)†[x_s − ε]` and `A′(s)[x0 − ε]`
/// over `sample_count` off-breakpoint flow times, on rows where `a_i > 0`
/// or `a′_i = 0`.
pub fn field_equivalence_check<V: ScheduleValue, R: Rng + ?Sized>(
    x0: &[V],
    eps: &[V],
    schedule: &NoiseSchedule,
    sample_count: usize,
    rng: &mut R,
) -> Result<V> {
    let n = schedule.len();
    let d = row_width(x0.len(), eps.len(), n)?;
    let mut worst = V::zero();
    for _ in 0..sample_count {
        let s = nudge_off_breakpoints(schedule, rng.random::<f64>(), 1e-6);
        let s = V::from_f64_value(s);
        let a = schedule.a_diag(&s)?;
        let ap = schedule.a_prime_diag(&s)?;
        let xs = interpolate_rows(x0, eps, &a)?;
        for i in 0..n {
            let a_pos = a[i] > V::zero();
            if !(a_pos || ap[i].is_zero()) {
                continue;
            }
            for j in i * d..(i + 1) * d {
                let pinv = if a_pos {
                    (xs[j].clone() - eps[j].clone()) / a[i].clone()
                } else {
                    V::zero()
                };
                let lhs = ap[i].clone() * pinv;
                let rhs = ap[i].clone() * (x0[j].clone() - eps[j].clone());
                let dev = (lhs - rhs).abs_value();
                if dev > worst {
                    worst = dev;
                }
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimitRow {
    pub sigma: f64,
    /// Max |field_σ − field_0| over the probe grid.
    pub deviation: f64,
    /// Max |field_0| over the probe grid.
    pub reference: f64,
}

/// Invertible schedule family `A_σ(s) = (1−σ)A(s) + σI`.
#[derive(Clone, Copy, Debug)]
pub struct InvertibleFamily {
    pub base: NoiseSchedule,
    pub sigma: f64,
}

impl InvertibleFamily {
    pub fn a_diag(&self, s: f64) -> Result<Vec<f64>> {
        Ok(self.base.a_diag(&s)?.into_iter().map(|a| (1.0 - self.sigma) * a + self.sigma).collect())
    }

    pub fn a_prime_diag(&self, s: f64) -> Result<Vec<f64>> {
        Ok(self.base.a_prime_diag(&s)?.into_iter().map(|a| (1.0 - self.sigma) * a).collect())
    }
}

/// Deviation of the σ-family conditional field `A′_σ(s)(x0 − ε)` from the
/// σ = 0 field, probed on 101 interior flow times.
pub fn invertible_limit_check(
    x0: &[f64],
    eps: &[f64],
    base: &NoiseSchedule,
    sigmas: &[f64],
) -> Result<Vec<LimitRow>> {
    let n = base.len();
    let d = row_width(x0.len(), eps.len(), n)?;
    let probes: Vec<f64> =
        (1..=101).map(|k| nudge_off_breakpoints(base, k as f64 / 102.0, 1e-6)).collect();
    sigmas
        .iter()
        .map(|&sigma| {
            if !(sigma > 0.0 && sigma < 1.0) {
                return Err(Error::Contract(format!("sigma {sigma} outside (0, 1)")));
            }
            let fam = InvertibleFamily { base: *base, sigma };
            let mut deviation = 0.0f64;
            let mut reference = 0.0f64;
            for &s in &probes {
                let ap0 = base.a_prime_diag(&s)?;
                let aps = fam.a_prime_diag(s)?;
                for i in 0..n {
                    for j in i * d..(i + 1) * d {
                        let diff = x0[j] - eps[j];
                        let f0 = ap0[i] * diff;
                        let fs = aps[i] * diff;
                        deviation = deviation.max((fs - f0).abs());
                        reference = reference.max(f0.abs());
                    }
                }
            }
            Ok(LimitRow { sigma, deviation, reference })
        })
        .collect()
}
