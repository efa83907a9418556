use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use asyncflow::checkpoint::{load_checkpoint, Checkpoint};
use asyncflow::data::{load_jsonl, write_meta, Dataset, Event};
use asyncflow::forecast::{Forecaster, SolverKind};
use asyncflow::metrics::{error_rate, otd, rmse, window_events, EvalRow, OtdConfig};
use asyncflow::schedule::NoiseSchedule;
use asyncflow::{Error, Result, Scalar};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::Task;

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long, value_enum)]
    task: Task,
    /// Events to forecast per sequence (horizon task only).
    #[arg(long, default_value_t = 1)]
    h: usize,
    /// Denoiser checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = crate::parse_solver, default_value = "euler")]
    solver: SolverKind,
    #[arg(long, default_value_t = 8)]
    substeps: usize,
    /// Noise draws averaged into each point forecast.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// One predicted/true event pair.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Pair {
    pub pred_tau: f64,
    pub pred_type: usize,
    pub true_tau: f64,
    pub true_type: usize,
}

/// One line of a prediction file. `taus`/`types` hold the sequence with
/// events from `start` on replaced by predictions, so the file also loads
/// as a dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredLine {
    pub seq: usize,
    pub task: String,
    pub h: usize,
    pub start: usize,
    pub seed: u64,
    pub taus: Vec<f64>,
    pub types: Vec<usize>,
    pub pairs: Vec<Pair>,
}

fn check_consistent(dit: &Checkpoint, vae: &Checkpoint, data: &Dataset) -> Result<()> {
    let (Some(dc), Some(vc)) = (dit.config.dit, vae.config.vae) else {
        return Err(Error::Validation("--ckpt must hold a denoiser and --vae an autoencoder".into()));
    };
    let mut errs = Vec::new();
    if dit.config.dtype != vae.config.dtype {
        errs.push(format!("dtype: denoiser {} vs autoencoder {}", dit.config.dtype, vae.config.dtype));
    }
    if dc.d_latent != vc.d_latent {
        errs.push(format!("d_latent: denoiser {} vs autoencoder {}", dc.d_latent, vc.d_latent));
    }
    if vc.num_types != data.num_types {
        errs.push(format!("num_types: autoencoder {} vs data {}", vc.num_types, data.num_types));
    }
    if dc.max_len != data.max_len {
        errs.push(format!("max_len: denoiser {} vs data {}", dc.max_len, data.max_len));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("dimension mismatch: {}", errs.join("; "))))
    }
}

pub fn run(args: &PredictArgs, threads: usize) -> Result<()> {
    if args.task == Task::Horizon && args.h == 0 {
        return Err(Error::Validation("--h must be at least 1".into()));
    }
    let dit = load_checkpoint(&args.ckpt)?;
    let vae = load_checkpoint(&args.vae)?;
    let data = load_jsonl(&args.data)?;
    check_consistent(&dit, &vae, &data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let lines = pool.install(|| match dit.config.dtype.as_str() {
        "f64" => predict_as::<f64>(args, &dit, &vae, &data),
        _ => predict_as::<f32>(args, &dit, &vae, &data),
    })?;

    let mut w = BufWriter::new(File::create(&args.out)?);
    write_meta(&mut w, data.num_types, data.max_len)?;
    for line in &lines {
        serde_json::to_writer(&mut w, line)?;
        writeln!(w)?;
    }
    w.flush()?;
    let predicted: usize = lines.iter().map(|l| l.pairs.len()).sum();
    println!(
        "cmd=predict task={} h={} sequences={} predicted_events={predicted} out={}",
        args.task.as_str(),
        args.h,
        lines.len(),
        args.out.display()
    );
    Ok(())
}

fn predict_as<T: Scalar>(args: &PredictArgs, dit: &Checkpoint, vae: &Checkpoint, data: &Dataset) -> Result<Vec<PredLine>> {
    let model = dit.to_dit::<T>()?;
    let vae_model = vae.to_vae::<T>()?;
    let schedule = dit
        .config
        .schedule
        .ok_or_else(|| Error::Validation("denoiser checkpoint does not record its schedule".into()))?;
    let mut f = Forecaster::new(&model, &vae_model, NoiseSchedule::new(schedule, data.max_len)?, vae.config.tau_scaler);
    f.solver = args.solver;
    f.substeps = args.substeps;
    f.samples = args.samples;
    let h = if args.task == Task::Next { 1 } else { args.h };

    data.sequences
        .par_iter()
        .enumerate()
        .map(|(idx, seq)| {
            // one stream per sequence keeps results independent of scheduling
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            rng.set_stream(idx as u64);
            let events = seq.events();
            let (start, preds) = match args.task {
                Task::Next => (1.min(events.len()), f.next_event_sweep(events, &mut rng)?),
                Task::Horizon if events.len() > h => {
                    let start = events.len() - h;
                    (start, f.predict_horizon(&events[..start], h, &mut rng)?)
                }
                Task::Horizon => (events.len(), Vec::new()),
            };
            Ok(pred_line(idx, args, h, start, events, &preds))
        })
        .collect()
}

fn pred_line(seq: usize, args: &PredictArgs, h: usize, start: usize, events: &[Event], preds: &[Event]) -> PredLine {
    let mut taus: Vec<f64> = events[..start].iter().map(|e| e.tau).collect();
    let mut types: Vec<usize> = events[..start].iter().map(|e| e.k).collect();
    taus.extend(preds.iter().map(|e| e.tau));
    types.extend(preds.iter().map(|e| e.k));
    let pairs = preds
        .iter()
        .zip(&events[start..])
        .map(|(p, t)| Pair { pred_tau: p.tau, pred_type: p.k, true_tau: t.tau, true_type: t.k })
        .collect();
    PredLine { seq, task: args.task.as_str().into(), h, start, seed: args.seed, taus, types, pairs }
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredLine>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        // the first line is the dataset meta header
        if text.is_empty() || idx == 0 {
            continue;
        }
        out.push(
            serde_json::from_str(text)
                .map_err(|e| Error::Parse { line: idx + 1, msg: format!("prediction record: {e}") })?,
        );
    }
    Ok(out)
}

/// Scores predictions against the events at the same positions of `data`.
pub fn eval(pred: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let preds = read_predictions(pred)?;
    let data = load_jsonl(data_path)?;
    let first = preds.first().ok_or_else(|| Error::Validation("prediction file has no records".into()))?;
    let (task, h, seed) = (first.task.clone(), first.h, first.seed);
    let (mut pt, mut tt, mut pk, mut tk) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut otd_sum = 0.0;
    let mut otd_count = 0usize;
    let cfg = OtdConfig::default();
    for line in &preds {
        if line.task != task || line.h != h {
            return Err(Error::Validation(format!("sequence {}: mixed tasks in one prediction file", line.seq)));
        }
        let seq = data.sequences.get(line.seq).ok_or_else(|| {
            Error::Validation(format!("sequence {} not in data ({} sequences)", line.seq, data.sequences.len()))
        })?;
        let n_pred = line.taus.len().saturating_sub(line.start);
        if line.types.len() != line.taus.len() || line.start + n_pred > seq.len() {
            return Err(Error::Validation(format!(
                "sequence {}: {} predictions from position {} do not fit {} true events",
                line.seq,
                n_pred,
                line.start,
                seq.len()
            )));
        }
        if n_pred == 0 {
            continue;
        }
        let truth = &seq.events()[line.start..line.start + n_pred];
        let (p_tau, p_k) = (&line.taus[line.start..], &line.types[line.start..]);
        let t_tau: Vec<f64> = truth.iter().map(|e| e.tau).collect();
        let t_k: Vec<usize> = truth.iter().map(|e| e.k).collect();
        otd_sum += otd(&window_events(p_tau, p_k)?, &window_events(&t_tau, &t_k)?, &cfg)?;
        otd_count += 1;
        pt.extend_from_slice(p_tau);
        pk.extend_from_slice(p_k);
        tt.extend(t_tau);
        tk.extend(t_k);
    }
    if otd_count == 0 {
        return Err(Error::Validation("no predicted events to score".into()));
    }
    let row = EvalRow {
        dataset: data_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        task,
        horizon: h,
        seed,
        rmse: rmse(&pt, &tt)?,
        error_rate: error_rate(&pk, &tk)?,
        otd: otd_sum / otd_count as f64,
    };
    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "{}", EvalRow::HEADER)?;
    writeln!(w, "{}", row.to_csv())?;
    w.flush()?;
    println!(
        "cmd=eval task={} horizon={} events={} rmse={} error_rate={} otd={}",
        row.task,
        row.horizon,
        pt.len(),
        row.rmse,
        row.error_rate,
        row.otd
    );
    Ok(())
}
