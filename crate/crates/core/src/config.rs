//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Unknown keys, duplicates and
//! malformed values are all reported together.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::SolverKind;
use crate::schedule::ScheduleKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Validation(format!("unknown dtype '{other}' (expected f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub num_types: Option<usize>,
    pub max_len: Option<usize>,
    pub vae_d_latent: usize,
    pub vae_hidden: usize,
    pub vae_beta_min: f64,
    pub vae_beta_max: f64,
    pub vae_steps: usize,
    pub vae_batch: usize,
    pub vae_lr: f64,
    pub dm_schedule: ScheduleKind,
    pub dm_layers: usize,
    pub dm_heads: usize,
    pub dm_d_model: usize,
    pub dm_mlp_ratio: usize,
    pub dm_steps: usize,
    pub dm_batch: usize,
    pub dm_lr: f64,
    pub dm_checkpoint_every: usize,
    pub solver_kind: SolverKind,
    pub solver_substeps: usize,
    pub seed: u64,
    pub dtype: Dtype,
}

/// Every recognised key.
pub const KEYS: &[&str] = &[
    "data.path",
    "data.num_types",
    "data.max_len",
    "vae.d_latent",
    "vae.hidden",
    "vae.beta_min",
    "vae.beta_max",
    "vae.steps",
    "vae.batch",
    "vae.lr",
    "dm.schedule",
    "dm.layers",
    "dm.heads",
    "dm.d_model",
    "dm.mlp_ratio",
    "dm.steps",
    "dm.batch",
    "dm.lr",
    "dm.checkpoint_every",
    "solver.kind",
    "solver.substeps",
    "seed",
    "dtype",
];

impl RunConfig {
    /// Defaults for everything except the data path.
    pub fn with_data_path(path: impl Into<PathBuf>) -> Self {
        Self {
            data_path: path.into(),
            num_types: None,
            max_len: None,
            vae_d_latent: 8,
            vae_hidden: 64,
            vae_beta_min: 1e-5,
            vae_beta_max: 1e-2,
            vae_steps: 2000,
            vae_batch: 512,
            vae_lr: 2e-3,
            dm_schedule: ScheduleKind::Async,
            dm_layers: 4,
            dm_heads: 4,
            dm_d_model: 128,
            dm_mlp_ratio: 4,
            dm_steps: 20_000,
            dm_batch: 64,
            dm_lr: 1e-3,
            dm_checkpoint_every: 1000,
            solver_kind: SolverKind::Euler,
            solver_substeps: 8,
            seed: 0,
            dtype: Dtype::F32,
        }
    }

    /// Parses the text form. Relative `data.path` values are kept as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut errs = Vec::new();
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line_no = no + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {line_no}: expected key = value, got '{line}'"));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                errs.push(format!("{k}: unknown key (line {line_no})"));
                continue;
            }
            if let Some((first, _)) = map.insert(k.to_string(), (line_no, v.to_string())) {
                errs.push(format!("{k}: set twice (lines {first} and {line_no})"));
            }
        }

        let mut cfg = Self::with_data_path("");
        match map.get("data.path") {
            Some((_, v)) if !v.is_empty() => cfg.data_path = PathBuf::from(v),
            Some(_) => errs.push("data.path: empty value".into()),
            None => errs.push("data.path: missing (required)".into()),
        }

        fn set<V: FromStr>(map: &BTreeMap<String, (usize, String)>, key: &str, slot: &mut V, errs: &mut Vec<String>)
        where
            V::Err: fmt::Display,
        {
            if let Some((_, v)) = map.get(key) {
                match v.parse::<V>() {
                    Ok(x) => *slot = x,
                    Err(e) => errs.push(format!("{key}: cannot parse '{v}': {e}")),
                }
            }
        }
        let mut num_types = 0usize;
        if map.contains_key("data.num_types") {
            set(&map, "data.num_types", &mut num_types, &mut errs);
            cfg.num_types = Some(num_types);
        }
        let mut max_len = 0usize;
        if map.contains_key("data.max_len") {
            set(&map, "data.max_len", &mut max_len, &mut errs);
            cfg.max_len = Some(max_len);
        }
        set(&map, "vae.d_latent", &mut cfg.vae_d_latent, &mut errs);
        set(&map, "vae.hidden", &mut cfg.vae_hidden, &mut errs);
        set(&map, "vae.beta_min", &mut cfg.vae_beta_min, &mut errs);
        set(&map, "vae.beta_max", &mut cfg.vae_beta_max, &mut errs);
        set(&map, "vae.steps", &mut cfg.vae_steps, &mut errs);
        set(&map, "vae.batch", &mut cfg.vae_batch, &mut errs);
        set(&map, "vae.lr", &mut cfg.vae_lr, &mut errs);
        set(&map, "dm.schedule", &mut cfg.dm_schedule, &mut errs);
        set(&map, "dm.layers", &mut cfg.dm_layers, &mut errs);
        set(&map, "dm.heads", &mut cfg.dm_heads, &mut errs);
        set(&map, "dm.d_model", &mut cfg.dm_d_model, &mut errs);
        set(&map, "dm.mlp_ratio", &mut cfg.dm_mlp_ratio, &mut errs);
        set(&map, "dm.steps", &mut cfg.dm_steps, &mut errs);
        set(&map, "dm.batch", &mut cfg.dm_batch, &mut errs);
        set(&map, "dm.lr", &mut cfg.dm_lr, &mut errs);
        set(&map, "dm.checkpoint_every", &mut cfg.dm_checkpoint_every, &mut errs);
        set(&map, "solver.kind", &mut cfg.solver_kind, &mut errs);
        set(&map, "solver.substeps", &mut cfg.solver_substeps, &mut errs);
        set(&map, "seed", &mut cfg.seed, &mut errs);
        set(&map, "dtype", &mut cfg.dtype, &mut errs);

        errs.extend(cfg.range_errors());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    fn range_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut positive = |key: &str, v: usize| {
            if v == 0 {
                errs.push(format!("{key}: must be at least 1"));
            }
        };
        positive("vae.d_latent", self.vae_d_latent);
        positive("vae.hidden", self.vae_hidden);
        positive("vae.batch", self.vae_batch);
        positive("dm.heads", self.dm_heads);
        positive("dm.d_model", self.dm_d_model);
        positive("dm.mlp_ratio", self.dm_mlp_ratio);
        positive("dm.steps", self.dm_steps);
        positive("dm.batch", self.dm_batch);
        positive("solver.substeps", self.solver_substeps);
        if let Some(k) = self.num_types {
            positive("data.num_types", k);
        }
        if let Some(n) = self.max_len {
            positive("data.max_len", n);
        }
        if self.dm_heads > 0 && self.dm_d_model % self.dm_heads != 0 {
            errs.push(format!("dm.d_model: {} is not divisible by dm.heads = {}", self.dm_d_model, self.dm_heads));
        }
        if !(self.vae_beta_min >= 0.0) || !(self.vae_beta_max >= self.vae_beta_min) {
            errs.push(format!(
                "vae.beta_max: need 0 <= vae.beta_min ({}) <= vae.beta_max ({})",
                self.vae_beta_min, self.vae_beta_max
            ));
        }
        for (key, lr) in [("vae.lr", self.vae_lr), ("dm.lr", self.dm_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                errs.push(format!("{key}: must be positive, got {lr}"));
            }
        }
        errs
    }

    /// Resolves `data.path` against `base` and checks that it exists.
    pub fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        if self.data_path.is_relative() {
            self.data_path = base.join(&self.data_path);
        }
        if !self.data_path.exists() {
            return Err(Error::Config(vec![format!("data.path: {} does not exist", self.data_path.display())]));
        }
        Ok(())
    }

    /// Reads, parses and validates a config file; relative data paths are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")))?;
        Ok(cfg)
    }
}
