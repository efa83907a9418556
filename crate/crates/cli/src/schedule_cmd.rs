use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use asyncflow::params::normal_tensor;
use asyncflow::schedule::{
    field_equivalence_check, interpolate_rows, inverse_flow_rows, validate_schedule, DiagonalSchedule,
    NoiseSchedule, ScheduleKind, ScheduleValue,
};
use asyncflow::{Error, Rational, Result, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CHECK_TOL: f64 = 1e-9;
const CHECK_DIM: usize = 4;

pub fn dump(kind: ScheduleKind, n: usize, grid: usize, out: Option<&Path>) -> Result<()> {
    if grid < 2 {
        return Err(Error::Validation("--grid needs at least 2 points".into()));
    }
    let schedule = NoiseSchedule::new(kind, n)?;
    let mut points: BTreeSet<Rational> = (0..grid).map(|j| Rational::new(j as i64, grid as i64 - 1)).collect();
    points.extend(schedule.breakpoints::<Rational>());

    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let header: Vec<String> = (1..=n).map(|i| format!("a_{i}")).collect();
    writeln!(w, "s,{}", header.join(","))?;
    for s in &points {
        let row: Vec<String> = (1..=n).map(|i| schedule.a_entry(i, s).to_f64_value().to_string()).collect();
        writeln!(w, "{},{}", s.to_f64_value(), row.join(","))?;
    }
    w.flush()?;
    if out.is_some() {
        println!("cmd=schedule-dump kind={kind} n={n} rows={}", points.len());
    }
    Ok(())
}

/// A valid schedule with a bump on the first entry, used to prove that
/// `check` notices broken schedules.
struct Faulty(NoiseSchedule);

impl DiagonalSchedule for Faulty {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn diag(&self, s: f64) -> Vec<f64> {
        let mut a = DiagonalSchedule::diag(&self.0, s);
        if (0.4..0.5).contains(&s) {
            a[0] = (a[0] + 0.25).min(1.0);
        }
        a
    }

    fn lipschitz(&self) -> f64 {
        self.0.lipschitz()
    }
}

pub fn check(kind: ScheduleKind, n: usize, grid: usize, samples: usize, seed: u64, inject_fault: bool) -> Result<()> {
    let schedule = NoiseSchedule::new(kind, n)?;
    let report = if inject_fault {
        validate_schedule(&Faulty(schedule), grid)?
    } else {
        validate_schedule(&schedule, grid)?
    };
    for v in &report.violations {
        println!("violation kind={:?} i={} s={} value={}", v.kind, v.i, v.s, v.value);
    }
    println!("check=validate kind={kind} n={n} grid={grid} violations={}", report.violations.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0: Tensor64 = normal_tensor(&[n, CHECK_DIM], &mut rng);
    let eps: Tensor64 = normal_tensor(&[n, CHECK_DIM], &mut rng);
    let field_dev = field_equivalence_check(x0.data(), eps.data(), &schedule, samples, &mut rng)?;
    println!("check=field_equivalence samples={samples} max_dev={field_dev:e}");

    let mut flow_dev = 0.0f64;
    for _ in 0..samples {
        let s: f64 = rng.random();
        let a = schedule.a_diag(&s)?;
        let xs = interpolate_rows(x0.data(), eps.data(), &a)?;
        let back = interpolate_rows(&inverse_flow_rows(&xs, eps.data(), &a)?, eps.data(), &a)?;
        flow_dev = xs.iter().zip(&back).map(|(p, q)| (p - q).abs()).fold(flow_dev, f64::max);
    }
    println!("check=inverse_flow samples={samples} max_dev={flow_dev:e}");

    let mut failures = Vec::new();
    if !report.is_ok() {
        let first = &report.violations[0];
        failures.push(format!(
            "{} schedule violations, first at i={} s={}",
            report.violations.len(),
            first.i,
            first.s
        ));
    }
    if !(field_dev <= CHECK_TOL) {
        failures.push(format!("field equivalence deviation {field_dev:e} exceeds {CHECK_TOL:e}"));
    }
    if !(flow_dev <= CHECK_TOL) {
        failures.push(format!("inverse flow deviation {flow_dev:e} exceeds {CHECK_TOL:e}"));
    }
    if failures.is_empty() {
        println!("check=ok kind={kind} n={n}");
        Ok(())
    } else {
        Err(Error::Validation(failures.join("; ")))
    }
}
