//! Autoregressive decoder over doubled configurations.
//!
//! Sequence row `i` of a configuration reads the start token (for `i = 0`)
//! or token `sigma_{i-1}`, plus a learned positional vector, and after the
//! decoder stack predicts the conditional of `sigma_i`. Each block is
//! post-norm: `LN(x + SA(x))`, `LN(x + CA(x, M))`, `LN(x + FFN(x))`.
//!
//! Every operation is row-local (or local to one configuration), so a
//! configuration's outputs do not depend on which other configurations share
//! the batch, and the sampler's log-probabilities agree bit-for-bit with
//! [`evaluate_amplitudes`].
//!
//! The forward pass optionally carries a tangent seeded by `Mdot`: the
//! directional derivative of every node along the context velocity. It is
//! built from ordinary tape operations, so gradients of the time derivative
//! come out of the same backward sweep.

use std::collections::HashMap;

use num_complex::Complex64;
use rand::Rng;

use crate::lattice::{encode_doubled, DoubledConfig, Lattice, SpinConfig};
use crate::model::{bind, BlockIdx, Layout, START_TOKEN};
use crate::oracle::StateVector;
use crate::tensor::{Graph, Tensor, UnaryOp, Var};
use crate::{Result, UnpError};

/// Floor applied to each conditional log-probability before summation.
pub const LOGP_FLOOR: f64 = -60.0;
pub const LN_EPS: f64 = 1e-5;
/// Columns with a smaller norm cannot be normalized.
pub const MIN_COLUMN_NORM: f64 = 1e-12;

/// A node and, optionally, its tangent along `Mdot`. `None` is an
/// identically zero tangent.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub p: Var,
    pub t: Option<Var>,
}

impl Dual {
    pub fn primal(p: Var) -> Self {
        Dual { p, t: None }
    }
}

fn map_t(g: &mut Graph, t: Option<Var>, f: impl FnOnce(&mut Graph, Var) -> Var) -> Option<Var> {
    t.map(|t| f(g, t))
}

fn add_t(g: &mut Graph, a: Option<Var>, b: Option<Var>) -> Option<Var> {
    match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)),
        (a, None) => a,
        (None, b) => b,
    }
}

fn add(g: &mut Graph, a: Dual, b: Dual) -> Dual {
    Dual { p: g.add(a.p, b.p), t: add_t(g, a.t, b.t) }
}

fn linear(g: &mut Graph, x: Dual, w: Var, b: Option<Var>) -> Dual {
    let xw = g.matmul(x.p, w);
    let p = match b {
        Some(b) => g.add_tiled(xw, b),
        None => xw,
    };
    Dual { p, t: map_t(g, x.t, |g, t| g.matmul(t, w)) }
}

fn layer_norm(g: &mut Graph, x: Dual, gamma: Var, beta: Var) -> Dual {
    let mean = g.row_mean(x.p);
    let xc = g.sub_col(x.p, mean);
    let sq = g.unary(xc, UnaryOp::Square);
    let var = g.row_mean(sq);
    let var = g.add_scalar(var, LN_EPS);
    let inv = g.unary(var, UnaryOp::Rsqrt);
    let xhat = g.mul_col(xc, inv);
    let scaled = g.mul_tiled(xhat, gamma);
    let p = g.add_tiled(scaled, beta);
    let t = map_t(g, x.t, |g, t| {
        let tm = g.row_mean(t);
        let tc = g.sub_col(t, tm);
        let prod = g.mul(xhat, tc);
        let proj = g.row_mean(prod);
        let along = g.mul_col(xhat, proj);
        let perp = g.sub(tc, along);
        let dxhat = g.mul_col(perp, inv);
        g.mul_tiled(dxhat, gamma)
    });
    Dual { p, t }
}

fn gelu(g: &mut Graph, x: Dual) -> Dual {
    let p = g.gelu(x.p);
    let t = map_t(g, x.t, |g, t| {
        let d = g.unary(x.p, UnaryOp::GeluPrime);
        g.mul(d, t)
    });
    Dual { p, t }
}

fn softmax(g: &mut Graph, a: Dual, causal: Option<usize>) -> Dual {
    let s = g.softmax(a.p, causal);
    let t = map_t(g, a.t, |g, t| {
        let st = g.mul(s, t);
        let r = g.row_sum(st);
        let c = g.sub_col(t, r);
        g.mul(s, c)
    });
    Dual { p: s, t }
}

fn log_softmax(g: &mut Graph, a: Dual) -> Dual {
    let lp = g.log_softmax(a.p);
    let t = map_t(g, a.t, |g, t| {
        let s = g.exp(lp);
        let st = g.mul(s, t);
        let r = g.row_sum(st);
        g.sub_col(t, r)
    });
    Dual { p: lp, t }
}

fn bmm(g: &mut Graph, a: Dual, b: Dual, batch: usize, ta: bool, tb: bool) -> Dual {
    let p = g.batch_matmul(a.p, b.p, batch, ta, tb);
    let t1 = map_t(g, a.t, |g, t| g.batch_matmul(t, b.p, batch, ta, tb));
    let t2 = map_t(g, b.t, |g, t| g.batch_matmul(a.p, t, batch, ta, tb));
    Dual { p, t: add_t(g, t1, t2) }
}

fn mm(g: &mut Graph, a: Dual, b: Dual, ta: bool, tb: bool) -> Dual {
    let p = g.matmul_t(a.p, b.p, ta, tb);
    let t1 = map_t(g, a.t, |g, t| g.matmul_t(t, b.p, ta, tb));
    let t2 = map_t(g, b.t, |g, t| g.matmul_t(a.p, t, ta, tb));
    Dual { p, t: add_t(g, t1, t2) }
}

fn scale(g: &mut Graph, a: Dual, s: f64) -> Dual {
    Dual { p: g.scale(a.p, s), t: map_t(g, a.t, |g, t| g.scale(t, s)) }
}

fn slice_cols(g: &mut Graph, a: Dual, start: usize, len: usize) -> Dual {
    Dual { p: g.slice_cols(a.p, start, len), t: map_t(g, a.t, |g, t| g.slice_cols(t, start, len)) }
}

fn select_cols(g: &mut Graph, a: Dual, idx: &[usize]) -> Dual {
    Dual { p: g.select_cols(a.p, idx.to_vec()), t: map_t(g, a.t, |g, t| g.select_cols(t, idx.to_vec())) }
}

fn reshape(g: &mut Graph, a: Dual, shape: &[usize]) -> Dual {
    Dual { p: g.reshape(a.p, shape), t: map_t(g, a.t, |g, t| g.reshape(t, shape)) }
}

fn row_sum(g: &mut Graph, a: Dual) -> Dual {
    Dual { p: g.row_sum(a.p), t: map_t(g, a.t, |g, t| g.row_sum(t)) }
}

/// `max(a, LOGP_FLOOR)`; the tangent vanishes where the floor is active.
fn clamp_floor(g: &mut Graph, a: Dual) -> Dual {
    let p = g.clamp_min(a.p, LOGP_FLOOR);
    let t = map_t(g, a.t, |g, t| {
        let v = g.value(a.p);
        let mask = Tensor::new(v.shape(), v.data().iter().map(|&x| if x > LOGP_FLOOR { 1.0 } else { 0.0 }).collect());
        let mask = g.constant(mask);
        g.mul(t, mask)
    });
    Dual { p, t }
}

/// Per-head output rows of an attention output map, gathered once.
fn head_rows(g: &mut Graph, w: Var, n_heads: usize, d_h: usize) -> Vec<Var> {
    (0..n_heads).map(|h| g.gather_rows(w, (h * d_h..(h + 1) * d_h).collect())).collect()
}

fn combine_heads(g: &mut Graph, heads: &[Dual], rows: &[Var], bias: Var) -> Dual {
    let mut acc: Option<Dual> = None;
    for (o, &w) in heads.iter().zip(rows) {
        let part = linear(g, *o, w, None);
        acc = Some(match acc {
            Some(a) => add(g, a, part),
            None => part,
        });
    }
    let acc = acc.expect("at least one head");
    Dual { p: g.add_tiled(acc.p, bias), t: acc.t }
}

fn self_attention(g: &mut Graph, layout: &Layout, p: &[Var], blk: &BlockIdx, x: Dual, n_seq: usize, len: usize) -> Dual {
    let d = &layout.dims;
    let (d_e, d_h) = (d.d_e, d.d_head());
    let qkv = linear(g, x, p[blk.sa_qkv], None);
    let rows = head_rows(g, p[blk.sa_out_w], d.n_heads, d_h);
    let inv_sqrt = 1.0 / (d_h as f64).sqrt();
    let heads: Vec<Dual> = (0..d.n_heads)
        .map(|h| {
            let q = slice_cols(g, qkv, h * d_h, d_h);
            let k = slice_cols(g, qkv, d_e + h * d_h, d_h);
            let v = slice_cols(g, qkv, 2 * d_e + h * d_h, d_h);
            let scores = bmm(g, q, k, n_seq, false, true);
            let scores = scale(g, scores, inv_sqrt);
            let attn = softmax(g, scores, Some(len));
            bmm(g, attn, v, n_seq, false, false)
        })
        .collect();
    combine_heads(g, &heads, &rows, p[blk.sa_out_b])
}

fn cross_attention(g: &mut Graph, layout: &Layout, p: &[Var], blk: &BlockIdx, x: Dual, ctx: Dual) -> Dual {
    let d = &layout.dims;
    let (d_e, d_h) = (d.d_e, d.d_head());
    let q = linear(g, x, p[blk.ca_q], None);
    let kv = linear(g, ctx, p[blk.ca_kv], None);
    let rows = head_rows(g, p[blk.ca_out_w], d.n_heads, d_h);
    let inv_sqrt = 1.0 / (d_h as f64).sqrt();
    let heads: Vec<Dual> = (0..d.n_heads)
        .map(|h| {
            let qh = slice_cols(g, q, h * d_h, d_h);
            let kh = slice_cols(g, kv, h * d_h, d_h);
            let vh = slice_cols(g, kv, d_e + h * d_h, d_h);
            let scores = mm(g, qh, kh, false, true);
            let scores = scale(g, scores, inv_sqrt);
            let attn = softmax(g, scores, None);
            mm(g, attn, vh, false, false)
        })
        .collect();
    combine_heads(g, &heads, &rows, p[blk.ca_out_b])
}

/// Hidden states `(n_seq * len, d_e)` for shifted input rows.
///
/// `inputs[s * len + i]` is the embedding row read at position `i` of
/// sequence `s`; `ctx` is `(n_c, d_e)`.
fn trunk(g: &mut Graph, layout: &Layout, p: &[Var], inputs: Vec<usize>, len: usize, ctx: Dual) -> Dual {
    let d = &layout.dims;
    assert!(len >= 1 && len <= d.n_sites(), "sequence length {len} outside 1..={}", d.n_sites());
    assert_eq!(inputs.len() % len, 0, "inputs must hold whole sequences");
    assert_eq!(g.shape(ctx.p), &[d.n_c, d.d_e], "context must be (n_c, d_e)");
    let n_seq = inputs.len() / len;
    let tf = &layout.tf;
    let emb = g.gather_rows(p[tf.embed], inputs);
    let pos = if len == d.n_sites() { p[tf.pos] } else { g.gather_rows(p[tf.pos], (0..len).collect()) };
    let mut x = Dual::primal(g.add_tiled(emb, pos));
    for blk in &tf.blocks {
        let sa = self_attention(g, layout, p, blk, x, n_seq, len);
        let r = add(g, x, sa);
        x = layer_norm(g, r, p[blk.ln1_g], p[blk.ln1_b]);
        let ca = cross_attention(g, layout, p, blk, x, ctx);
        let r = add(g, x, ca);
        x = layer_norm(g, r, p[blk.ln2_g], p[blk.ln2_b]);
        let h = linear(g, x, p[blk.ff1_w], Some(p[blk.ff1_b]));
        let h = gelu(g, h);
        let ff = linear(g, h, p[blk.ff2_w], Some(p[blk.ff2_b]));
        let r = add(g, x, ff);
        x = layer_norm(g, r, p[blk.ln3_g], p[blk.ln3_b]);
    }
    x
}

fn shifted_inputs(configs: &[&[u8]], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(configs.len() * n);
    for c in configs {
        assert_eq!(c.len(), n, "configuration length {} != {n} sites", c.len());
        out.push(START_TOKEN);
        for &tok in &c[..n - 1] {
            assert!(tok < 4, "token {tok} outside 0..4");
            out.push(tok as usize);
        }
        assert!(c[n - 1] < 4, "token {} outside 0..4", c[n - 1]);
    }
    out
}

/// Per-configuration outputs on a graph; `dlogp`/`dphase` are the tangents
/// along `Mdot` when one was supplied.
#[derive(Clone, Copy, Debug)]
pub struct AmplitudeNodes {
    pub logp: Var,
    pub phase: Var,
    pub dlogp: Option<Var>,
    pub dphase: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Constant added to every conditional phase.
    pub phase_bias: f64,
}

/// Log-probabilities and phases of `configs` under context `m` (`(n_c,
/// d_e)`), with tangents along `mdot` when given.
pub fn forward(
    g: &mut Graph,
    layout: &Layout,
    p: &[Var],
    configs: &[&[u8]],
    m: Var,
    mdot: Option<Var>,
    opts: ForwardOptions,
) -> AmplitudeNodes {
    let n = layout.dims.n_sites();
    let s = configs.len();
    assert!(s > 0, "forward on no configurations");
    let inputs = shifted_inputs(configs, n);
    let x = trunk(g, layout, p, inputs, n, Dual { p: m, t: mdot });
    let tf = &layout.tf;
    let tokens: Vec<usize> = configs.iter().flat_map(|c| c.iter().map(|&t| t as usize)).collect();

    let logits = linear(g, x, p[tf.logit_w], Some(p[tf.logit_b]));
    let lsm = log_softmax(g, logits);
    let site_lp = select_cols(g, lsm, &tokens);
    let site_lp = clamp_floor(g, site_lp);
    let site_lp = reshape(g, site_lp, &[s, n]);
    let logp = row_sum(g, site_lp);

    let phases = linear(g, x, p[tf.phase_w], Some(p[tf.phase_b]));
    let site_ph = select_cols(g, phases, &tokens);
    let site_ph = if opts.phase_bias != 0.0 {
        Dual { p: g.add_scalar(site_ph.p, opts.phase_bias), t: site_ph.t }
    } else {
        site_ph
    };
    let site_ph = reshape(g, site_ph, &[s, n]);
    let phase = row_sum(g, site_ph);

    AmplitudeNodes { logp: logp.p, phase: phase.p, dlogp: logp.t, dphase: phase.t }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmplitudeResult {
    pub log_p: f64,
    pub phase: f64,
}

impl AmplitudeResult {
    pub fn amplitude(&self) -> Complex64 {
        Complex64::from_polar((0.5 * self.log_p).exp(), self.phase)
    }
}

/// Batched amplitude evaluation outside any training graph.
pub fn evaluate_amplitudes(
    layout: &Layout,
    params: &[Tensor],
    configs: &[DoubledConfig],
    m: &Tensor,
) -> Result<Vec<AmplitudeResult>> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let mv = g.constant(m.clone());
    let refs: Vec<&[u8]> = configs.iter().map(|c| &c.0[..]).collect();
    let out = forward(&mut g, layout, &p, &refs, mv, None, ForwardOptions::default());
    g.check()?;
    let (lp, ph) = (g.value(out.logp).data(), g.value(out.phase).data());
    Ok(lp.iter().zip(ph).map(|(&log_p, &phase)| AmplitudeResult { log_p, phase }).collect())
}

pub fn evaluate_amplitude(layout: &Layout, params: &[Tensor], sigma: &DoubledConfig, m: &Tensor) -> Result<AmplitudeResult> {
    Ok(evaluate_amplitudes(layout, params, std::slice::from_ref(sigma), m)?[0])
}

/// `d/dt log U(sigma; t) = (1/2) d log p + i d phase` along `mdot`.
pub fn time_derivative_log_amplitude(
    layout: &Layout,
    params: &[Tensor],
    configs: &[DoubledConfig],
    m: &Tensor,
    mdot: &Tensor,
) -> Result<Vec<Complex64>> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let mv = g.constant(m.clone());
    let md = g.constant(mdot.clone());
    let refs: Vec<&[u8]> = configs.iter().map(|c| &c.0[..]).collect();
    let out = forward(&mut g, layout, &p, &refs, mv, Some(md), ForwardOptions::default());
    g.check()?;
    let dlp = g.value(out.dlogp.expect("tangent requested")).data().to_vec();
    let dph = g.value(out.dphase.expect("tangent requested")).data().to_vec();
    Ok(dlp.iter().zip(&dph).map(|(&a, &b)| Complex64::new(0.5 * a, b)).collect())
}

/// A sampled configuration and its (clamped) log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub config: DoubledConfig,
    pub log_p: f64,
}

/// Conditional log-probabilities `(n_prefixes, 4)` of the next token after
/// each prefix (all of length `len - 1`).
fn next_token_log_probs(g: &mut Graph, layout: &Layout, p: &[Var], prefixes: &[Vec<u8>], len: usize, ctx: Var) -> Vec<[f64; 4]> {
    let mut inputs = Vec::with_capacity(prefixes.len() * len);
    for pre in prefixes {
        inputs.push(START_TOKEN);
        inputs.extend(pre.iter().map(|&t| t as usize));
    }
    let x = trunk(g, layout, p, inputs, len, Dual::primal(ctx));
    let tf = &layout.tf;
    let logits = linear(g, x, p[tf.logit_w], Some(p[tf.logit_b]));
    let lsm = g.log_softmax(logits.p);
    let v = g.value(lsm).data();
    (0..prefixes.len())
        .map(|s| {
            let r = (s * len + len - 1) * 4;
            [v[r], v[r + 1], v[r + 2], v[r + 3]]
        })
        .collect()
}

/// Log-probabilities of the four tokens at every site, reading the whole
/// of `config` as input. Row `i` may depend only on `config[..i]`.
pub fn site_conditionals(layout: &Layout, params: &[Tensor], m: &Tensor, config: &[u8]) -> Result<Vec<[f64; 4]>> {
    let n = layout.dims.n_sites();
    assert_eq!(config.len(), n, "configuration length");
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let ctx = g.constant(m.clone());
    let x = trunk(&mut g, layout, &p, shifted_inputs(&[config], n), n, Dual::primal(ctx));
    let logits = linear(&mut g, x, p[layout.tf.logit_w], Some(p[layout.tf.logit_b]));
    let lsm = g.log_softmax(logits.p);
    g.check()?;
    let v = g.value(lsm).data();
    Ok((0..n).map(|i| [v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]]).collect())
}

/// `count` i.i.d. configurations drawn site by site from the exact
/// conditionals. Shared prefixes are evaluated once.
pub fn sample_configs<R: Rng + ?Sized>(
    layout: &Layout,
    params: &[Tensor],
    m: &Tensor,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    assert!(count >= 1, "sample_configs needs count >= 1");
    let n = layout.dims.n_sites();
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let ctx = g.constant(m.clone());
    let mut tokens: Vec<Vec<u8>> = vec![Vec::with_capacity(n); count];
    let mut site_lps: Vec<Vec<f64>> = vec![Vec::with_capacity(n); count];
    for i in 0..n {
        let mut uniq: Vec<Vec<u8>> = Vec::new();
        let mut which: HashMap<Vec<u8>, usize> = HashMap::new();
        let slot: Vec<usize> = tokens
            .iter()
            .map(|t| {
                *which.entry(t.clone()).or_insert_with(|| {
                    uniq.push(t.clone());
                    uniq.len() - 1
                })
            })
            .collect();
        let cond = next_token_log_probs(&mut g, layout, &p, &uniq, i + 1, ctx);
        g.check()?;
        for (k, t) in tokens.iter_mut().enumerate() {
            let lp = &cond[slot[k]];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = 3u8;
            for (j, &l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    tok = j as u8;
                    break;
                }
            }
            // Never pick a token whose probability underflowed to zero.
            while lp[tok as usize].exp() == 0.0 && tok > 0 {
                tok -= 1;
            }
            t.push(tok);
            site_lps[k].push(lp[tok as usize].max(LOGP_FLOOR));
        }
    }
    Ok(tokens
        .into_iter()
        .zip(site_lps)
        .map(|(t, lps)| Sample { config: DoubledConfig(t), log_p: lps.iter().sum() })
        .collect())
}

/// Column `beta` of the normalized propagator under context `m`:
/// `psi_alpha = U(encode(alpha, beta))`, rescaled to unit norm.
pub fn propagator_column(layout: &Layout, params: &[Tensor], m: &Tensor, beta: &SpinConfig) -> Result<StateVector> {
    let n = layout.dims.n_sites();
    assert_eq!(beta.len(), n, "input configuration length");
    let lattice = Lattice::new(layout.dims.lx, layout.dims.ly);
    let configs: Vec<DoubledConfig> =
        (0..lattice.dim()).map(|a| encode_doubled(&SpinConfig::from_index(a, n), beta)).collect();
    let amps = evaluate_amplitudes(layout, params, &configs, m)?;
    normalize_column(amps.iter().map(|a| a.amplitude()).collect())
}

pub fn normalize_column(amps: Vec<Complex64>) -> Result<StateVector> {
    let v = StateVector::from_vec(amps);
    let norm = v.norm();
    if !(norm >= MIN_COLUMN_NORM) {
        return Err(UnpError::DegenerateColumn(norm));
    }
    Ok(v / Complex64::new(norm, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::gradcheck::{check_direction, check_entries, rel_err, FD_REL_TOL};
    use crate::lattice::DoubledConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(lx: usize, ly: usize, seed: u64) -> (Layout, Vec<Tensor>, Tensor) {
        let mut cfg = RunConfig::from_preset("1x2-tiny").unwrap();
        cfg.dims.lx = lx;
        cfg.dims.ly = ly;
        cfg.dims.n_trans = 2;
        let layout = Layout::new(&cfg.dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout.init(&mut rng, 1.0);
        let m = Tensor::from_fn(&[cfg.dims.n_c, cfg.dims.d_e], |i| ((i as f64) * 0.77).sin());
        (layout, params, m)
    }

    fn all_configs(n: usize) -> Vec<DoubledConfig> {
        (0..4usize.pow(n as u32)).map(|i| DoubledConfig::from_index(i, n)).collect()
    }

    #[test]
    fn normalized_over_doubled_space() {
        let (layout, params, m) = setup(1, 3, 1);
        let amps = evaluate_amplitudes(&layout, &params, &all_configs(3), &m).unwrap();
        let total: f64 = amps.iter().map(|a| a.log_p.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
        assert!(amps.iter().all(|a| a.log_p <= 0.0));
    }

    #[test]
    fn causal_mask_is_exact() {
        let (layout, params, m) = setup(2, 2, 2);
        let n = 4;
        let mut g = Graph::new();
        let p = bind(&mut g, &params, false);
        let ctx = g.constant(m.clone());
        let base: Vec<u8> = vec![1, 3, 0, 2];
        for i in 0..n {
            for j in i + 1..n {
                let mut other = base.clone();
                other[j] = (other[j] + 1) % 4;
                let a = next_token_log_probs(&mut g, &layout, &p, &[base[..i].to_vec()], i + 1, ctx);
                let full = |cfg: &[u8]| {
                    let mut g2 = Graph::new();
                    let p2 = bind(&mut g2, &params, false);
                    let c2 = g2.constant(m.clone());
                    let x = trunk(&mut g2, &layout, &p2, shifted_inputs(&[cfg], n), n, Dual::primal(c2));
                    let l = linear(&mut g2, x, p2[layout.tf.logit_w], Some(p2[layout.tf.logit_b]));
                    let ls = g2.log_softmax(l.p);
                    g2.value(ls).data()[i * 4..i * 4 + 4].to_vec()
                };
                assert_eq!(full(&base), full(&other), "site {i} saw token {j}");
                assert_eq!(&a[0][..], &full(&base)[..], "prefix evaluation differs at site {i}");
            }
        }
    }

    #[test]
    fn batch_composition_is_irrelevant() {
        let (layout, params, m) = setup(1, 3, 3);
        let configs = all_configs(3);
        let all = evaluate_amplitudes(&layout, &params, &configs, &m).unwrap();
        for (c, a) in configs.iter().zip(&all).step_by(7) {
            assert_eq!(evaluate_amplitude(&layout, &params, c, &m).unwrap(), *a);
        }
    }

    #[test]
    fn context_is_live_and_permutation_invariant() {
        let (layout, params, m) = setup(1, 2, 4);
        let configs = all_configs(2);
        let base = evaluate_amplitudes(&layout, &params, &configs, &m).unwrap();
        let mut bumped = m.clone();
        bumped.data_mut()[3] += 1e-3;
        let moved = evaluate_amplitudes(&layout, &params, &configs, &bumped).unwrap();
        assert!(base.iter().zip(&moved).any(|(a, b)| (a.log_p - b.log_p).abs() > 1e-9));
        let (n_c, d_e) = (m.shape()[0], m.shape()[1]);
        let perm = Tensor::from_fn(&[n_c, d_e], |i| m.data()[((i / d_e + 1) % n_c) * d_e + i % d_e]);
        let permuted = evaluate_amplitudes(&layout, &params, &configs, &perm).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a.log_p - b.log_p).abs() < 1e-12 && (a.phase - b.phase).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_matches_evaluation_bitwise() {
        let (layout, params, m) = setup(2, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples = sample_configs(&layout, &params, &m, 200, &mut rng).unwrap();
        let configs: Vec<DoubledConfig> = samples.iter().map(|s| s.config.clone()).collect();
        let eval = evaluate_amplitudes(&layout, &params, &configs, &m).unwrap();
        for (s, e) in samples.iter().zip(&eval) {
            assert_eq!(s.log_p.to_bits(), e.log_p.to_bits());
        }
    }

    #[test]
    fn deterministic_conditionals_give_identical_samples() {
        let (layout, mut params, m) = setup(1, 2, 6);
        let tf = &layout.tf;
        params[tf.logit_w].data_mut().iter_mut().for_each(|x| *x = 0.0);
        params[tf.logit_b] = Tensor::new(&[4], vec![0.0, 0.0, 1e3, 0.0]);
        let samples = sample_configs(&layout, &params, &m, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(samples.iter().all(|s| s.config.0 == vec![2, 2]));
    }

    #[test]
    fn sampler_frequencies() {
        let (layout, params, m) = setup(1, 2, 7);
        let configs = all_configs(2);
        let probs: Vec<f64> =
            evaluate_amplitudes(&layout, &params, &configs, &m).unwrap().iter().map(|a| a.log_p.exp()).collect();
        let n = 20_000;
        let samples = sample_configs(&layout, &params, &m, n, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut counts = vec![0usize; 16];
        for s in &samples {
            counts[s.config.index()] += 1;
        }
        for (c, &p) in counts.iter().zip(&probs) {
            let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
            assert!(((*c as f64 / n as f64) - p).abs() <= 4.0 * se + 1e-12, "count {c} p {p}");
        }
    }

    #[test]
    fn column_is_normalized() {
        let (layout, params, m) = setup(1, 2, 8);
        let col = propagator_column(&layout, &params, &m, &SpinConfig(vec![0, 1])).unwrap();
        assert!((col.norm() - 1.0).abs() < 1e-12);
        assert!(matches!(normalize_column(vec![Complex64::new(0.0, 0.0); 4]), Err(UnpError::DegenerateColumn(_))));
    }

    #[test]
    fn tangent_matches_finite_difference() {
        let (layout, params, m) = setup(2, 2, 10);
        let mdot = Tensor::from_fn(m.shape(), |i| ((i * 13 % 7) as f64 - 3.0) * 0.2);
        let configs: Vec<DoubledConfig> = all_configs(4).into_iter().step_by(37).collect();
        let jvp = time_derivative_log_amplitude(&layout, &params, &configs, &m, &mdot).unwrap();
        let h = 1e-5;
        let shift = |s: f64| Tensor::from_fn(m.shape(), |i| m.data()[i] + s * mdot.data()[i]);
        let plus = evaluate_amplitudes(&layout, &params, &configs, &shift(h)).unwrap();
        let minus = evaluate_amplitudes(&layout, &params, &configs, &shift(-h)).unwrap();
        for k in 0..configs.len() {
            let fd_lp = (plus[k].log_p - minus[k].log_p) / (2.0 * h);
            let fd_ph = (plus[k].phase - minus[k].phase) / (2.0 * h);
            assert!(rel_err(2.0 * jvp[k].re, fd_lp) < 1e-6, "{} vs {fd_lp}", 2.0 * jvp[k].re);
            assert!(rel_err(jvp[k].im, fd_ph) < 1e-6, "{} vs {fd_ph}", jvp[k].im);
        }
        let zero = time_derivative_log_amplitude(&layout, &params, &configs, &m, &Tensor::zeros(m.shape())).unwrap();
        assert!(zero.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn gradients_of_values_and_tangents() {
        let (layout, params, m) = setup(1, 2, 11);
        let mdot = Tensor::from_fn(m.shape(), |i| ((i * 5 % 3) as f64 - 1.0) * 0.3);
        let configs: Vec<Vec<u8>> = vec![vec![0, 3], vec![2, 1], vec![1, 1]];
        let weights = [0.7, -1.3, 0.4, 0.9];
        let mut inputs = params.clone();
        inputs.push(m.clone());
        inputs.push(mdot.clone());
        let np = params.len();
        let f = |g: &mut Graph, v: &[Var]| {
            let refs: Vec<&[u8]> = configs.iter().map(|c| &c[..]).collect();
            let out = forward(g, &layout, &v[..np], &refs, v[np], Some(v[np + 1]), ForwardOptions::default());
            let parts = [out.logp, out.phase, out.dlogp.unwrap(), out.dphase.unwrap()];
            let mut total: Option<Var> = None;
            for (x, w) in parts.iter().zip(weights) {
                let s = g.unary(*x, UnaryOp::Sin);
                let s = g.sum_all(s);
                let s = g.scale(s, w);
                total = Some(match total {
                    Some(t) => g.add(t, s),
                    None => s,
                });
            }
            total.unwrap()
        };
        let report = check_entries(&f, &inputs, Some(6));
        assert!(report.passes(FD_REL_TOL), "{report:?}");
        let dir: Vec<Tensor> =
            inputs.iter().enumerate().map(|(k, t)| Tensor::from_fn(t.shape(), |i| (((i + k) * 31 % 17) as f64 - 8.0) / 8.0)).collect();
        let (a, n) = check_direction(&f, &inputs, &dir);
        assert!(rel_err(a, n) < FD_REL_TOL, "{a} vs {n}");
    }
}
