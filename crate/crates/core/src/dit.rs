//! Denoiser `v_θ(x_s, A(s))`: a small diffusion transformer over per-event
//! latents.
//!
//! Conditioning is per position. Each diagonal entry `a_i` of `A(s)` is
//! expanded into a sinusoidal embedding, passed through a two-layer MLP, and
//! drives shift/scale/gate modulation of every block at row `i` (adaLN-Zero,
//! applied row-wise). A learned absolute position embedding is added to the
//! input projection. Attention masks invalid key positions.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, xavier, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub max_len: usize,
    pub d_latent: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub t_max: f64,
    pub h_emb: usize,
}

impl DitConfig {
    /// Desk-scale defaults: 4 layers, 4 heads, width 128, MLP ratio 4.
    pub fn new(max_len: usize, d_latent: usize) -> Self {
        Self {
            max_len,
            d_latent,
            d_model: 128,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            t_max: 10_000.0,
            h_emb: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.max_len == 0 || self.d_latent == 0 || self.d_model == 0 || self.num_heads == 0 {
            errs.push("max_len, d_latent, d_model and num_heads must be positive".to_string());
        }
        if self.num_heads > 0 && self.d_model % self.num_heads != 0 {
            errs.push(format!("d_model {} not divisible by num_heads {}", self.d_model, self.num_heads));
        }
        if !(self.t_max > 1.0) {
            errs.push(format!("t_max must exceed 1, got {}", self.t_max));
        }
        if self.h_emb == 0 || self.mlp_ratio == 0 {
            errs.push("h_emb and mlp_ratio must be at least 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Row `i` = `[cos(a_i·T^{−j/h}), sin(a_i·T^{−j/h})]` for `j = 0..h`.
pub fn schedule_embedding<T: Scalar>(a: &[T], t_max: f64, h_emb: usize) -> Tensor<T> {
    let freqs: Vec<f64> = (0..h_emb).map(|j| t_max.powf(-(j as f64) / h_emb as f64)).collect();
    let mut data = Vec::with_capacity(a.len() * 2 * h_emb);
    for &ai in a {
        let ai = ai.f64();
        data.extend(freqs.iter().map(|&f| T::of((ai * f).cos())));
        data.extend(freqs.iter().map(|&f| T::of((ai * f).sin())));
    }
    Tensor::from_parts(vec![a.len(), 2 * h_emb], data)
}

/// Records scaled dot-product attention over `[G, N, dh]` tensors. `masked`
/// has `G·N·N` entries, true where the key is excluded.
pub fn attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    masked: Rc<Vec<bool>>,
) -> Result<Var> {
    let dh = *g.shape(q).last().unwrap();
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::one() / T::of_usize(dh).sqrt());
    let scores = g.masked_fill(scores, masked, T::neg_infinity())?;
    let p = g.softmax(scores);
    g.matmul(p, v)
}

fn key_fill_mask(key_mask: &[bool], groups_per_seq: usize, n: usize) -> Result<Rc<Vec<bool>>> {
    let b = key_mask.len() / n;
    let mut out = Vec::with_capacity(b * groups_per_seq * n * n);
    for seq in 0..b {
        let keys = &key_mask[seq * n..(seq + 1) * n];
        if !keys.iter().any(|&m| m) {
            return Err(Error::Validation(format!("key mask of sequence {seq} has no valid position")));
        }
        for _ in 0..groups_per_seq * n {
            out.extend(keys.iter().map(|&m| !m));
        }
    }
    Ok(Rc::new(out))
}

/// Single-head masked attention on `N×d_head` matrices.
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    key_mask: &[bool],
) -> Result<Tensor<T>> {
    let n = k.shape()[0];
    if key_mask.len() != n {
        return Err(Error::Shape(format!("key mask of length {} for {n} keys", key_mask.len())));
    }
    let mut g = Graph::new();
    let add_batch = |t: &Tensor<T>| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.reshape(&s)
    };
    let qv = g.constant(add_batch(q)?);
    let kv = g.constant(add_batch(k)?);
    let vv = g.constant(add_batch(v)?);
    let fill = key_fill_mask(key_mask, 1, n)?;
    let out = attention_graph(&mut g, qv, kv, vv, fill)?;
    g.value(out).reshape(&[q.shape()[0], v.shape()[1]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dit<T> {
    pub config: DitConfig,
    pub params: ParamSet<T>,
}

struct Slots {
    in_w: usize,
    pos: usize,
    cond_w1: usize,
    blocks: Vec<usize>,
    final_ada: usize,
}

const BLOCK_PARAMS: usize = 10;

impl<T: Scalar> Dit<T> {
    /// Parameter names and shapes in slot order.
    pub fn layout(c: &DitConfig) -> Vec<(String, Vec<usize>)> {
        let d = c.d_model;
        let mut out = vec![
            ("dit.in.w".to_string(), vec![c.d_latent, d]),
            ("dit.in.b".to_string(), vec![d]),
            ("dit.pos".to_string(), vec![c.max_len, d]),
            ("dit.cond.w1".to_string(), vec![2 * c.h_emb, d]),
            ("dit.cond.b1".to_string(), vec![d]),
            ("dit.cond.w2".to_string(), vec![d, d]),
            ("dit.cond.b2".to_string(), vec![d]),
        ];
        for l in 0..c.num_layers {
            let p = format!("dit.block{l}");
            out.push((format!("{p}.ada.w"), vec![d, 6 * d]));
            out.push((format!("{p}.ada.b"), vec![6 * d]));
            out.push((format!("{p}.qkv.w"), vec![d, 3 * d]));
            out.push((format!("{p}.qkv.b"), vec![3 * d]));
            out.push((format!("{p}.proj.w"), vec![d, d]));
            out.push((format!("{p}.proj.b"), vec![d]));
            out.push((format!("{p}.mlp.w1"), vec![d, c.mlp_ratio * d]));
            out.push((format!("{p}.mlp.b1"), vec![c.mlp_ratio * d]));
            out.push((format!("{p}.mlp.w2"), vec![c.mlp_ratio * d, d]));
            out.push((format!("{p}.mlp.b2"), vec![d]));
        }
        out.push(("dit.final.ada.w".to_string(), vec![d, 2 * d]));
        out.push(("dit.final.ada.b".to_string(), vec![2 * d]));
        out.push(("dit.out.w".to_string(), vec![d, c.d_latent]));
        out.push(("dit.out.b".to_string(), vec![c.d_latent]));
        out
    }

    fn slots(c: &DitConfig) -> Slots {
        let first_block = 7;
        Slots {
            in_w: 0,
            pos: 2,
            cond_w1: 3,
            blocks: (0..c.num_layers).map(|l| first_block + l * BLOCK_PARAMS).collect(),
            final_ada: first_block + c.num_layers * BLOCK_PARAMS,
        }
    }

    /// Fresh parameters: Xavier weights, zero biases, zero modulation and
    /// zero output projection, so the initial field is identically zero.
    pub fn new<R: Rng + ?Sized>(config: DitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        for (name, shape) in Self::layout(&config) {
            let zero = name.contains(".ada.") || name.starts_with("dit.out") || shape.len() == 1;
            let t = if name == "dit.pos" {
                let data = (0..shape[0] * shape[1]).map(|_| T::of(0.02 * normal(rng))).collect();
                Tensor::new(shape, data)?
            } else if zero {
                Tensor::zeros(&shape)
            } else {
                xavier(shape[0], shape[1], rng)
            };
            p.push(&name, t);
        }
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: DitConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        let ok = layout.len() == params.len()
            && layout
                .iter()
                .enumerate()
                .all(|(i, (n, s))| params.name(i) == n && params.tensor(i).shape() == s.as_slice());
        if !ok {
            return Err(Error::Validation("DiT parameters do not match the configured architecture".into()));
        }
        Ok(Self { config, params })
    }

    fn modulate(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let xn = g.layer_norm(x, T::of(LN_EPS));
        let s1 = g.add_scalar(scale, T::one());
        let y = g.mul(xn, s1)?;
        g.add(y, shift)
    }

    /// Records the batched forward pass.
    ///
    /// `x`: `[B, N, d_latent]`; `a`: `[B, N]` schedule diagonals;
    /// `key_mask`: `B·N` flags, true for attendable positions.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        a: &Tensor<T>,
        key_mask: &[bool],
    ) -> Result<Var> {
        let c = &self.config;
        let xs = g.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != c.max_len || xs[2] != c.d_latent {
            return Err(Error::Shape(format!(
                "input {xs:?}, expected [B, {}, {}]",
                c.max_len, c.d_latent
            )));
        }
        let (b, n, d) = (xs[0], c.max_len, c.d_model);
        if a.shape() != [b, n] || key_mask.len() != b * n {
            return Err(Error::Shape(format!(
                "schedule {:?} / mask {} for batch {b} of length {n}",
                a.shape(),
                key_mask.len()
            )));
        }
        let sl = Self::slots(c);
        let heads = c.num_heads;
        let dh = d / heads;
        let fill = key_fill_mask(key_mask, heads, n)?;

        let emb = schedule_embedding(a.data(), c.t_max, c.h_emb).reshape(&[b, n, 2 * c.h_emb])?;
        let emb = g.constant(emb);
        let cond = g.linear(emb, p[sl.cond_w1], Some(p[sl.cond_w1 + 1]))?;
        let cond = g.silu(cond)?;
        let cond = g.linear(cond, p[sl.cond_w1 + 2], Some(p[sl.cond_w1 + 3]))?;
        let cond = g.silu(cond)?;

        let mut h = g.linear(x, p[sl.in_w], Some(p[sl.in_w + 1]))?;
        h = g.add(h, p[sl.pos])?;

        for &s0 in &sl.blocks {
            let m = g.linear(cond, p[s0], Some(p[s0 + 1]))?;
            let part = |g: &mut Graph<T>, j: usize| g.slice(m, 2, j * d, (j + 1) * d);
            let (sh1, sc1, gt1) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
            let (sh2, sc2, gt2) = (part(g, 3)?, part(g, 4)?, part(g, 5)?);

            let hn = Self::modulate(g, h, sh1, sc1)?;
            let qkv = g.linear(hn, p[s0 + 2], Some(p[s0 + 3]))?;
            let qkv = g.reshape(qkv, &[b, n, 3, heads, dh])?;
            let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
            let pick = |g: &mut Graph<T>, j: usize| -> Result<Var> {
                let t = g.slice(qkv, 0, j, j + 1)?;
                g.reshape(t, &[b * heads, n, dh])
            };
            let (q, k, v) = (pick(g, 0)?, pick(g, 1)?, pick(g, 2)?);
            let att = attention_graph(g, q, k, v, fill.clone())?;
            let att = g.reshape(att, &[b, heads, n, dh])?;
            let att = g.permute(att, &[0, 2, 1, 3])?;
            let att = g.reshape(att, &[b, n, d])?;
            let att = g.linear(att, p[s0 + 4], Some(p[s0 + 5]))?;
            let att = g.mul(att, gt1)?;
            h = g.add(h, att)?;

            let hn = Self::modulate(g, h, sh2, sc2)?;
            let f = g.linear(hn, p[s0 + 6], Some(p[s0 + 7]))?;
            let f = g.silu(f)?;
            let f = g.linear(f, p[s0 + 8], Some(p[s0 + 9]))?;
            let f = g.mul(f, gt2)?;
            h = g.add(h, f)?;
        }

        let m = g.linear(cond, p[sl.final_ada], Some(p[sl.final_ada + 1]))?;
        let shift = g.slice(m, 2, 0, d)?;
        let scale = g.slice(m, 2, d, 2 * d)?;
        let hn = Self::modulate(g, h, shift, scale)?;
        g.linear(hn, p[sl.final_ada + 2], Some(p[sl.final_ada + 3]))
    }

    /// Forward pass for one sequence: `x_s` is `N×d_latent`, `a` the schedule
    /// diagonal at the current flow time.
    pub fn forward(&self, x_s: &Tensor<T>, a: &[T], key_mask: &[bool]) -> Result<Tensor<T>> {
        let n = self.config.max_len;
        let mut g = Graph::new();
        let p = self.params.register(&mut g);
        let x = g.constant(x_s.reshape(&[1, n, self.config.d_latent])?);
        let at = Tensor::new(vec![1, n], a.to_vec())?;
        let out = self.forward_graph(&mut g, &p, x, &at, key_mask)?;
        g.value(out).reshape(&[n, self.config.d_latent])
    }
}

/// Anything that can serve as the learned field in sampling.
pub trait VelocityModel<T: Scalar> {
    /// `N×d` velocity for state `x_s` with schedule diagonal `a`.
    fn velocity(&self, x_s: &Tensor<T>, a: &[T], key_mask: &[bool]) -> Result<Tensor<T>>;

    /// Batched form: `x_s` is `[B, N, d]`, `a` is `[B, N]`, `key_mask` has
    /// `B·N` entries. The default evaluates sequences one at a time.
    fn velocity_batch(&self, x_s: &Tensor<T>, a: &Tensor<T>, key_mask: &[bool]) -> Result<Tensor<T>> {
        let sh = x_s.shape();
        if sh.len() != 3 || a.shape() != &sh[..2] || key_mask.len() != sh[0] * sh[1] {
            return Err(Error::Shape(format!("batched velocity inputs {:?} / {:?}", sh, a.shape())));
        }
        let (b, n, d) = (sh[0], sh[1], sh[2]);
        let mut out = Vec::with_capacity(b * n * d);
        for i in 0..b {
            let x = Tensor::new(vec![n, d], x_s.data()[i * n * d..(i + 1) * n * d].to_vec())?;
            let v = self.velocity(&x, &a.data()[i * n..(i + 1) * n], &key_mask[i * n..(i + 1) * n])?;
            out.extend_from_slice(v.data());
        }
        Tensor::new(sh.to_vec(), out)
    }
}

impl<T: Scalar> VelocityModel<T> for Dit<T> {
    fn velocity(&self, x_s: &Tensor<T>, a: &[T], key_mask: &[bool]) -> Result<Tensor<T>> {
        self.forward(x_s, a, key_mask)
    }

    fn velocity_batch(&self, x_s: &Tensor<T>, a: &Tensor<T>, key_mask: &[bool]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.register(&mut g);
        let x = g.constant(x_s.clone());
        let out = self.forward_graph(&mut g, &p, x, a, key_mask)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DitConfig {
        DitConfig {
            max_len: 5,
            d_latent: 3,
            d_model: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            t_max: 10_000.0,
            h_emb: 4,
        }
    }

    #[test]
    fn embedding_values() {
        let e = schedule_embedding(&[0.0f64, 1.0, 1.0], 10_000.0, 4);
        assert_eq!(e.row(0), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((e.at2(1, 0) - 0.5403023058681398).abs() < 1e-12);
        assert_eq!(e.row(1), e.row(2));
        // second frequency: 10000^(-1/4) = 0.1
        assert!((e.at2(1, 1) - 0.1f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn single_key_returns_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q: Tensor<f64> = normal_tensor(&[4, 3], &mut rng);
        let k: Tensor<f64> = normal_tensor(&[4, 3], &mut rng);
        let v: Tensor<f64> = normal_tensor(&[4, 3], &mut rng);
        let out = masked_attention(&q, &k, &v, &[true, false, false, false]).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                assert!((out.at2(r, c) - v.at2(0, c)).abs() < 1e-12);
            }
        }
        assert!(masked_attention(&q, &k, &v, &[false; 4]).is_err());
    }

    #[test]
    fn all_ones_mask_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Tensor<f64> = normal_tensor(&[3, 2], &mut rng);
        let k: Tensor<f64> = normal_tensor(&[3, 2], &mut rng);
        let v: Tensor<f64> = normal_tensor(&[3, 2], &mut rng);
        let out = masked_attention(&q, &k, &v, &[true; 3]).unwrap();
        let s = q.matmul(&k.transpose().unwrap()).unwrap().scale(1.0 / 2f64.sqrt()).softmax_last();
        let expect = s.matmul(&v).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn masked_values_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q: Tensor<f64> = normal_tensor(&[4, 3], &mut rng);
        let k: Tensor<f64> = normal_tensor(&[4, 3], &mut rng);
        let mut v: Tensor<f64> = normal_tensor(&[4, 3], &mut rng);
        let mask = [true, false, true, false];
        let base = masked_attention(&q, &k, &v, &mask).unwrap();
        for _ in 0..20 {
            for r in [1, 3] {
                for x in v.row_mut(r) {
                    *x = 100.0 * normal(&mut rng);
                }
            }
            assert!(masked_attention(&q, &k, &v, &mask).unwrap().max_abs_diff(&base) < 1e-12);
        }
    }

    #[test]
    fn fresh_model_outputs_zero() {
        let dit = Dit::<f32>::new(small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x: Tensor<f32> = normal_tensor(&[5, 3], &mut ChaCha8Rng::seed_from_u64(4));
        let out = dit.forward(&x, &[1.0, 0.5, 0.2, 0.0, 0.0], &[true, true, true, false, false]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = small();
        c.t_max = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn layout_matches_slots() {
        let c = small();
        let layout = Dit::<f32>::layout(&c);
        let sl = Dit::<f32>::slots(&c);
        assert_eq!(layout[sl.pos].0, "dit.pos");
        assert_eq!(layout[sl.blocks[1]].0, "dit.block1.ada.w");
        assert_eq!(layout[sl.final_ada].0, "dit.final.ada.w");
        assert_eq!(layout.len(), sl.final_ada + 4);
    }
}
