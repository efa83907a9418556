use std::path::Path;

use asyncflow::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use asyncflow::config::{Dtype, RunConfig};
use asyncflow::data::{load_jsonl, standardize_tau, Dataset};
use asyncflow::dit::DitConfig;
use asyncflow::optim::AdamConfig;
use asyncflow::training::{train_dm, TrainConfig};
use asyncflow::vae::{reconstruction_metrics, train_vae, VaeConfig, VaeTrainConfig};
use asyncflow::{Error, Result, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Loads the dataset named by the config and checks the optional
/// `data.num_types` / `data.max_len` overrides against its header.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_jsonl(&cfg.data_path)?;
    let mut errs = Vec::new();
    if let Some(k) = cfg.num_types {
        if k != ds.num_types {
            errs.push(format!("data.num_types: config says {k}, dataset declares {}", ds.num_types));
        }
    }
    if let Some(n) = cfg.max_len {
        if n != ds.max_len {
            errs.push(format!("data.max_len: config says {n}, dataset declares {}", ds.max_len));
        }
    }
    if errs.is_empty() {
        Ok(ds)
    } else {
        Err(Error::Config(errs))
    }
}

fn should_log(step: usize, total: usize, every: usize) -> bool {
    step == 0 || step + 1 == total || (every > 0 && (step + 1) % every == 0)
}

pub fn train_vae_cmd(config: &Path, out: &Path, log_every: usize) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let raw = load_data(&cfg)?;
    let (ds, scaler) = standardize_tau(&raw)?;
    match cfg.dtype {
        Dtype::F32 => train_vae_as::<f32>(&cfg, &ds, out, log_every),
        Dtype::F64 => train_vae_as::<f64>(&cfg, &ds, out, log_every),
    }?;
    println!("cmd=train-vae out={} tau_scaler={}", out.display(), serde_json::to_string(&scaler)?);
    Ok(())
}

fn train_vae_as<T: Scalar>(cfg: &RunConfig, ds: &Dataset, out: &Path, log_every: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vcfg = VaeConfig { hidden: cfg.vae_hidden, ..VaeConfig::new(ds.num_types, cfg.vae_d_latent) };
    let tcfg = VaeTrainConfig {
        steps: cfg.vae_steps,
        batch: cfg.vae_batch,
        lr: cfg.vae_lr,
        beta_min: cfg.vae_beta_min,
        beta_max: cfg.vae_beta_max,
    };
    let total = tcfg.steps;
    let (vae, _) = train_vae::<T, _>(ds, vcfg, &tcfg, &mut rng, |step, loss| {
        if should_log(step, total, log_every) {
            println!("cmd=train-vae step={} loss={loss:.6}", step + 1);
        }
    })?;
    let events: Vec<_> = ds.all_events().copied().collect();
    let (acc, mse) = reconstruction_metrics(&vae, &events)?;
    println!("cmd=train-vae type_accuracy={acc:.6} tau_mse={mse:.6}");
    save_checkpoint(out, &Checkpoint::from_vae(&vae, ds.tau_scaler, cfg.seed))
}

pub fn train_dm_cmd(config: &Path, vae_path: &Path, out: &Path, log_every: usize) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let vckpt = load_checkpoint(vae_path)?;
    if vckpt.config.dtype != cfg.dtype.to_string() {
        return Err(Error::Validation(format!(
            "VAE checkpoint is {}, config asks for dtype {}",
            vckpt.config.dtype, cfg.dtype
        )));
    }
    let ds = load_data(&cfg)?.with_scaler(vckpt.config.tau_scaler);
    match cfg.dtype {
        Dtype::F32 => train_dm_as::<f32>(&cfg, &vckpt, &ds, out, log_every),
        Dtype::F64 => train_dm_as::<f64>(&cfg, &vckpt, &ds, out, log_every),
    }
}

fn train_dm_as<T: Scalar>(cfg: &RunConfig, vckpt: &Checkpoint, ds: &Dataset, out: &Path, log_every: usize) -> Result<()> {
    let vae = vckpt.to_vae::<T>()?;
    if vae.config.num_types != ds.num_types {
        return Err(Error::Validation(format!(
            "VAE was trained on {} types, dataset has {}",
            vae.config.num_types, ds.num_types
        )));
    }
    let dit_config = DitConfig {
        d_model: cfg.dm_d_model,
        num_layers: cfg.dm_layers,
        num_heads: cfg.dm_heads,
        mlp_ratio: cfg.dm_mlp_ratio,
        ..DitConfig::new(ds.max_len, vae.config.d_latent)
    };
    let tcfg = TrainConfig {
        batch_size: cfg.dm_batch,
        total_steps: cfg.dm_steps,
        adam: AdamConfig::with_lr(cfg.dm_lr),
        seed: cfg.seed,
        schedule: cfg.dm_schedule,
        mask_padding: true,
        checkpoint_every: cfg.dm_checkpoint_every,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = tcfg.total_steps;
    train_dm(
        ds,
        &vae,
        dit_config,
        &tcfg,
        &mut rng,
        |step, loss| {
            if should_log(step, total, log_every) {
                println!("cmd=train-dm step={} loss={loss:.6}", step + 1);
            }
        },
        |step, dit| {
            save_checkpoint(out, &Checkpoint::from_dit(dit, cfg.dm_schedule, ds.tau_scaler, cfg.seed))?;
            println!("cmd=train-dm checkpoint={} step={step}", out.display());
            Ok(())
        },
    )?;
    Ok(())
}
