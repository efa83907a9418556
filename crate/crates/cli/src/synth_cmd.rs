use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use asyncflow::data::{write_meta, write_sequence};
use asyncflow::synth::{hawkes_paths, poisson_paths, HawkesParams};
use asyncflow::{Error, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::SynthKind;

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    out: PathBuf,
    /// Poisson rate.
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Observation horizon of every path.
    #[arg(long = "T", default_value_t = 100.0)]
    horizon: f64,
    #[arg(long, default_value_t = 50)]
    n_seqs: usize,
    /// Recorded in the meta header; loaders split longer paths.
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hawkes base rates, e.g. `0.2,0.2`.
    #[arg(long)]
    mu: Option<String>,
    /// Hawkes excitation matrix, rows separated by `;`.
    #[arg(long)]
    alpha: Option<String>,
    /// Hawkes decay matrix, rows separated by `;`.
    #[arg(long)]
    beta: Option<String>,
}

fn parse_row(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Validation(format!("cannot parse '{v}': {e}"))))
        .collect()
}

fn parse_matrix(s: &str) -> Result<Vec<Vec<f64>>> {
    s.split(';').map(parse_row).collect()
}

fn hawkes_params(args: &SynthArgs) -> Result<HawkesParams> {
    let mut p = HawkesParams::two_type_bursty();
    if let Some(mu) = &args.mu {
        p.base_rates = parse_row(mu)?;
    }
    if let Some(a) = &args.alpha {
        p.excitation = parse_matrix(a)?;
    }
    if let Some(b) = &args.beta {
        p.decay = parse_matrix(b)?;
    }
    p.validate()?;
    Ok(p)
}

pub fn run(args: &SynthArgs) -> Result<()> {
    if args.max_len == 0 || args.n_seqs == 0 {
        return Err(Error::Validation("--max-len and --n-seqs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (paths, num_types) = match args.kind {
        SynthKind::Hawkes => {
            let p = hawkes_params(args)?;
            (hawkes_paths(&p, args.horizon, args.n_seqs, &mut rng)?, p.num_types())
        }
        SynthKind::Poisson => (poisson_paths(args.rate, args.horizon, args.n_seqs, &mut rng)?, 1),
    };
    let mut w = BufWriter::new(File::create(&args.out)?);
    write_meta(&mut w, num_types, args.max_len)?;
    for path in &paths {
        write_sequence(&mut w, path)?;
    }
    w.flush()?;
    let events: usize = paths.iter().map(Vec::len).sum();
    println!("cmd=synth out={} sequences={} events={events} num_types={num_types}", args.out.display(), paths.len());
    Ok(())
}
