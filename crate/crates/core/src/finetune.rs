//! Protocol-specific fine-tuning of the context trajectory.
//!
//! All network weights are frozen; the context tokens `M(t_j)` at every
//! grid time become free parameters, initialized from the pretrained FNO.
//! The loss compares `<X>` and `<ZZ>` of model columns with targets at the
//! dataset times. Columns are enumerated, so gradients are deterministic.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;

use crate::evolve::{exact_states, model_state, InitialState};
use crate::fno::context_trajectory;
use crate::lattice::{bond_zz, encode_doubled, Lattice, SpinConfig};
use crate::model::{bind, Layout};
use crate::optim::Adam;
use crate::oracle::{observables, Observables};
use crate::protocol::{evaluate, ProtocolGrid, ProtocolSpec};
use crate::tensor::{Graph, Tensor, UnaryOp, Var};
use crate::transformer::{forward, ForwardOptions};
use crate::{Result, UnpError};

/// Context tokens at every grid time, `(n_t, n_c * d_e)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TunableContext {
    pub n_c: usize,
    pub d_e: usize,
    pub m: Tensor,
}

impl TunableContext {
    /// The pretrained model's context trajectory for `grid`.
    pub fn from_model(layout: &Layout, params: &[Tensor], grid: &ProtocolGrid) -> Result<Self> {
        let traj = context_trajectory(layout, params, grid)?;
        Ok(Self { n_c: traj.n_c, d_e: traj.d_e, m: traj.m })
    }

    pub fn n_t(&self) -> usize {
        self.m.rows()
    }

    /// `(n_c, d_e)` tokens at grid time `j`.
    pub fn m_at(&self, j: usize) -> Tensor {
        let c = self.n_c * self.d_e;
        Tensor::new(&[self.n_c, self.d_e], self.m.data()[j * c..(j + 1) * c].to_vec())
    }

    /// Rows `t,m0,m1,...`.
    pub fn to_csv(&self, times: &[f64]) -> String {
        let c = self.n_c * self.d_e;
        let mut s = String::from("t");
        for i in 0..c {
            let _ = write!(s, ",m{i}");
        }
        s.push('\n');
        for (j, t) in times.iter().enumerate() {
            let _ = write!(s, "{t}");
            for x in &self.m.data()[j * c..(j + 1) * c] {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
        s
    }
}

/// Basis states and their target `<X>`, `<ZZ>` at selected grid times.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneDataset {
    pub states: Vec<SpinConfig>,
    /// Grid indices of the target times.
    pub t_indices: Vec<usize>,
    pub times: Vec<f64>,
    /// `[state][k]`.
    pub x_target: Vec<Vec<f64>>,
    pub zz_target: Vec<Vec<f64>>,
}

pub const DATASET_HEADER: &str = "state_bits,t,X_target,ZZ_target";

/// `count` distinct uniformly random basis states, excluding `exclude`.
///
/// Panics if fewer than `count` states remain.
pub fn random_basis_states<R: Rng + ?Sized>(n_sites: usize, count: usize, exclude: &[SpinConfig], rng: &mut R) -> Vec<SpinConfig> {
    let dim = 1usize << n_sites;
    let taken: HashSet<usize> = exclude.iter().map(SpinConfig::index).collect();
    assert!(count + taken.len() <= dim, "asked for {count} distinct states out of {} available", dim - taken.len());
    let mut seen = taken;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.random_range(0..dim);
        if seen.insert(i) {
            out.push(SpinConfig::from_index(i, n_sites));
        }
    }
    out
}

/// Targets from exact evolution of `states` under `spec`, at every
/// `stride`-th grid time.
pub fn dataset_for_states(lattice: &Lattice, spec: &ProtocolSpec, grid: &ProtocolGrid, states: Vec<SpinConfig>, stride: usize) -> Result<FinetuneDataset> {
    assert!(stride >= 1, "stride must be positive");
    let t_indices: Vec<usize> = (0..grid.n_t()).step_by(stride).collect();
    let times: Vec<f64> = t_indices.iter().map(|&j| grid.times[j]).collect();
    let (mut x_target, mut zz_target) = (Vec::new(), Vec::new());
    for s in &states {
        let psi = exact_states(lattice, spec, &times, &InitialState::Basis(s.clone()))?;
        let obs: Vec<Observables> = psi.iter().zip(&t_indices).map(|(p, &j)| observables(p, lattice, grid.fields(j))).collect();
        x_target.push(obs.iter().map(|o| o.x).collect());
        zz_target.push(obs.iter().map(|o| o.zz).collect());
    }
    Ok(FinetuneDataset { states, t_indices, times, x_target, zz_target })
}

/// `m_states` distinct random basis states with exact targets.
pub fn make_dataset<R: Rng + ?Sized>(
    lattice: &Lattice,
    spec: &ProtocolSpec,
    grid: &ProtocolGrid,
    m_states: usize,
    stride: usize,
    rng: &mut R,
) -> Result<FinetuneDataset> {
    let states = random_basis_states(lattice.n_sites(), m_states, &[], rng);
    dataset_for_states(lattice, spec, grid, states, stride)
}

impl FinetuneDataset {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{DATASET_HEADER}\n");
        for (i, st) in self.states.iter().enumerate() {
            for (k, t) in self.times.iter().enumerate() {
                let _ = writeln!(s, "{},{t},{},{}", st.to_bit_string(), self.x_target[i][k], self.zz_target[i][k]);
            }
        }
        s
    }

    /// Parse a dataset CSV; every time must sit on `grid` and every state
    /// must list the same times. Lines starting with `#` are skipped.
    pub fn from_csv(text: &str, grid: &ProtocolGrid, n_sites: usize) -> Result<Self> {
        let mut rows: Vec<(String, f64, f64, f64)> = Vec::new();
        let mut header_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line.replace(' ', "") != DATASET_HEADER {
                    return Err(UnpError::Parse { line: i + 1, msg: format!("expected header `{DATASET_HEADER}`") });
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| UnpError::Parse { line: i + 1, msg: format!("bad number `{s}`") });
            if f.len() != 4 {
                return Err(UnpError::Parse { line: i + 1, msg: "expected 4 fields".into() });
            }
            rows.push((f[0].to_string(), num(f[1])?, num(f[2])?, num(f[3])?));
        }
        let mut states: Vec<SpinConfig> = Vec::new();
        let mut per_state: Vec<Vec<(usize, f64, f64)>> = Vec::new();
        for (bits, t, x, zz) in rows {
            let s = match InitialState::parse(&bits, n_sites)? {
                InitialState::Basis(s) => s,
                InitialState::Ghz => return Err(UnpError::StateSpec("dataset states must be basis states".into())),
            };
            let j = grid
                .times
                .iter()
                .position(|g| (g - t).abs() <= 1e-9 * grid.t_total.max(1.0))
                .ok_or_else(|| UnpError::Config(format!("dataset time {t} is not on the protocol grid")))?;
            let k = match states.iter().position(|x| *x == s) {
                Some(k) => k,
                None => {
                    states.push(s);
                    per_state.push(Vec::new());
                    states.len() - 1
                }
            };
            per_state[k].push((j, x, zz));
        }
        if states.is_empty() {
            return Err(UnpError::Config("dataset is empty".into()));
        }
        let t_indices: Vec<usize> = per_state[0].iter().map(|r| r.0).collect();
        if per_state.iter().any(|rows| rows.iter().map(|r| r.0).collect::<Vec<_>>() != t_indices) {
            return Err(UnpError::Config("every dataset state must list the same times".into()));
        }
        Ok(Self {
            times: t_indices.iter().map(|&j| grid.times[j]).collect(),
            t_indices,
            x_target: per_state.iter().map(|r| r.iter().map(|x| x.1).collect()).collect(),
            zz_target: per_state.iter().map(|r| r.iter().map(|x| x.2).collect()).collect(),
            states,
        })
    }
}

/// Enumerated `<X>` and `<ZZ>` of the normalized model columns for
/// `states` at context `m` (`(n_c, d_e)` node). Returns two `(S)` nodes.
pub fn column_observables(g: &mut Graph, layout: &Layout, p: &[Var], m: Var, states: &[SpinConfig]) -> (Var, Var) {
    let n = layout.dims.n_sites();
    let lattice = Lattice::new(layout.dims.lx, layout.dims.ly);
    let dim = lattice.dim();
    let s = states.len();
    let configs: Vec<Vec<u8>> = states
        .iter()
        .flat_map(|beta| (0..dim).map(move |a| encode_doubled(&SpinConfig::from_index(a, n), beta).0))
        .collect();
    let refs: Vec<&[u8]> = configs.iter().map(|c| &c[..]).collect();
    let nodes = forward(g, layout, p, &refs, m, None, ForwardOptions::default());
    let prob = g.exp(nodes.logp);
    let half = g.scale(nodes.logp, 0.5);
    let mag = g.exp(half);
    let c = g.unary(nodes.phase, UnaryOp::Cos);
    let sn = g.unary(nodes.phase, UnaryOp::Sin);
    let re = g.mul(mag, c);
    let im = g.mul(mag, sn);

    let prob = g.reshape(prob, &[s, dim]);
    let norm2 = g.row_sum(prob);
    let r = g.unary(norm2, UnaryOp::Rsqrt);
    let inv_norm2 = g.unary(r, UnaryOp::Square);

    let zz_of: Vec<f64> = (0..dim)
        .map(|a| if lattice.n_bonds() > 0 { bond_zz(&lattice, &SpinConfig::from_index(a, n)) / lattice.n_bonds() as f64 } else { 0.0 })
        .collect();
    let zz_vec = g.constant(Tensor::new(&[dim], zz_of));
    let weighted = g.mul_tiled(prob, zz_vec);
    let zz_sum = g.row_sum(weighted);
    let zz = g.mul(zz_sum, inv_norm2);

    // X = (1/N) sum_{alpha, site} Re(psi_alpha^* psi_{alpha ^ site}).
    let mut own = Vec::with_capacity(s * dim * n);
    let mut flipped = Vec::with_capacity(s * dim * n);
    for k in 0..s {
        for a in 0..dim {
            for site in 0..n {
                own.push(k * dim + a);
                flipped.push(k * dim + (a ^ (1 << (n - 1 - site))));
            }
        }
    }
    let re_o = g.gather_rows(re, own.clone());
    let im_o = g.gather_rows(im, own);
    let re_f = g.gather_rows(re, flipped.clone());
    let im_f = g.gather_rows(im, flipped);
    let rr = g.mul(re_o, re_f);
    let ii = g.mul(im_o, im_f);
    let cross = g.add(rr, ii);
    let cross = g.reshape(cross, &[s, dim * n]);
    let x_sum = g.row_sum(cross);
    let x_sum = g.scale(x_sum, 1.0 / n as f64);
    let x = g.mul(x_sum, inv_norm2);
    (x, zz)
}

/// Squared error at dataset time `k`, summed over states, divided by the
/// number of states, built on a graph with `m` as the context row.
fn loss_at_time(g: &mut Graph, layout: &Layout, p: &[Var], m: Var, data: &FinetuneDataset, k: usize) -> Var {
    let (x, zz) = column_observables(g, layout, p, m, &data.states);
    let s = data.states.len();
    let xt = g.constant(Tensor::new(&[s], data.x_target.iter().map(|r| r[k]).collect()));
    let zt = g.constant(Tensor::new(&[s], data.zz_target.iter().map(|r| r[k]).collect()));
    let dx = g.sub(x, xt);
    let dz = g.sub(zz, zt);
    let sx = g.unary(dx, UnaryOp::Square);
    let sz = g.unary(dz, UnaryOp::Square);
    let sum = g.add(sx, sz);
    g.mean_all(sum)
}

/// Loss: mean over states of the sum over dataset times of both squared
/// errors. With `want_grad`, also the gradient w.r.t. the context.
pub fn finetune_loss(layout: &Layout, params: &[Tensor], ctx: &TunableContext, data: &FinetuneDataset, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let cols = ctx.n_c * ctx.d_e;
    let per_time: Vec<Result<(f64, Option<Vec<f64>>)>> = par_indices(data.t_indices.len(), |k| {
        let j = data.t_indices[k];
        let mut g = Graph::new();
        let p = bind(&mut g, params, false);
        let m = if want_grad { g.param(ctx.m_at(j)) } else { g.constant(ctx.m_at(j)) };
        let loss = loss_at_time(&mut g, layout, &p, m, data, k);
        g.check()?;
        let v = g.value(loss).item();
        let grad = want_grad.then(|| g.backward(loss).get(m).into_data());
        Ok((v, grad))
    });
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::zeros(ctx.m.shape()));
    for (k, r) in per_time.into_iter().enumerate() {
        let (v, gk) = r?;
        total += v;
        if let (Some(acc), Some(gk)) = (grad.as_mut(), gk) {
            let j = data.t_indices[k];
            acc.data_mut()[j * cols..(j + 1) * cols].iter_mut().zip(gk).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total, grad))
}

#[cfg(feature = "parallel")]
fn par_indices<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_indices<U>(n: usize, f: impl Fn(usize) -> U) -> Vec<U> {
    (0..n).map(f).collect()
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub context: TunableContext,
    /// Loss before each update, then the loss of the returned context.
    pub history: Vec<f64>,
    /// Set when a non-finite loss stopped the run; `context` is then the
    /// last finite one.
    pub fault: Option<String>,
}

/// Adam on the context only.
pub fn finetune_run(layout: &Layout, params: &[Tensor], init: TunableContext, data: &FinetuneDataset, steps: usize, lr: f64) -> Result<FinetuneOutcome> {
    let mut ctx = init;
    let mut adam = Adam::new(&[ctx.m.shape().to_vec()]);
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grad) = match finetune_loss(layout, params, &ctx, data, true) {
            Ok(r) => r,
            Err(UnpError::Numeric(msg)) => return Ok(FinetuneOutcome { context: ctx, history, fault: Some(msg) }),
            Err(e) => return Err(e),
        };
        let grad = grad.expect("gradient requested");
        if !loss.is_finite() || !grad.is_finite() {
            return Ok(FinetuneOutcome { context: ctx, history, fault: Some(format!("non-finite loss {loss}")) });
        }
        history.push(loss);
        let mut next = vec![ctx.m.clone()];
        adam.step(&mut next, &[grad], lr);
        ctx.m = next.pop().expect("one tensor");
    }
    match finetune_loss(layout, params, &ctx, data, false) {
        Ok((loss, _)) if loss.is_finite() => history.push(loss),
        Ok((loss, _)) => return Ok(FinetuneOutcome { context: ctx, history, fault: Some(format!("non-finite loss {loss}")) }),
        Err(UnpError::Numeric(msg)) => return Ok(FinetuneOutcome { context: ctx, history, fault: Some(msg) }),
        Err(e) => return Err(e),
    }
    Ok(FinetuneOutcome { context: ctx, history, fault: None })
}

/// Per-time mean absolute error over test states.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeReport {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub e: Vec<f64>,
    pub z: Vec<f64>,
    pub zz: Vec<f64>,
}

pub const MAE_HEADER: &str = "t,mae_X,mae_E,mae_Z,mae_ZZ";

impl MaeReport {
    /// Time average of the curve for `X`, `E`, `Z` or `ZZ`.
    pub fn mean(&self, observable: &str) -> f64 {
        let c = self.curve(observable);
        c.iter().sum::<f64>() / c.len() as f64
    }

    pub fn curve(&self, observable: &str) -> &[f64] {
        match observable {
            "X" => &self.x,
            "E" => &self.e,
            "Z" => &self.z,
            "ZZ" => &self.zz,
            other => panic!("unknown observable {other}"),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{MAE_HEADER}\n");
        for j in 0..self.times.len() {
            let _ = writeln!(s, "{},{},{},{},{}", self.times[j], self.x[j], self.e[j], self.z[j], self.zz[j]);
        }
        s
    }
}

/// Rows `t, <before columns>, <after columns>`.
pub fn before_after_csv(before: &MaeReport, after: &MaeReport) -> String {
    let mut s = String::from("t,mae_X_before,mae_E_before,mae_Z_before,mae_ZZ_before,mae_X_after,mae_E_after,mae_Z_after,mae_ZZ_after\n");
    for j in 0..before.times.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            before.times[j], before.x[j], before.e[j], before.z[j], before.zz[j], after.x[j], after.e[j], after.z[j], after.zz[j]
        );
    }
    s
}

/// MAE of the model driven by `ctx` against exact evolution under `spec`,
/// at every grid time.
pub fn mae_report(layout: &Layout, params: &[Tensor], ctx: &TunableContext, spec: &ProtocolSpec, test_states: &[SpinConfig]) -> Result<MaeReport> {
    let d = &layout.dims;
    let lattice = Lattice::new(d.lx, d.ly);
    let grid = evaluate(spec, d.t_total, d.n_t)?;
    let n_t = grid.n_t();
    let mut report = MaeReport { times: grid.times.clone(), x: vec![0.0; n_t], e: vec![0.0; n_t], z: vec![0.0; n_t], zz: vec![0.0; n_t] };
    let per_state = test_states.len() as f64;
    for s in test_states {
        let init = InitialState::Basis(s.clone());
        let exact = exact_states(&lattice, spec, &grid.times, &init)?;
        for j in 0..n_t {
            let f = grid.fields(j);
            let m = observables(&model_state(layout, params, &ctx.m_at(j), &init)?, &lattice, f);
            let e = observables(&exact[j], &lattice, f);
            report.x[j] += (m.x - e.x).abs() / per_state;
            report.e[j] += (m.energy - e.energy).abs() / per_state;
            report.z[j] += (m.z - e.z).abs() / per_state;
            report.zz[j] += (m.zz - e.zz).abs() / per_state;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::gradcheck::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Layout, Vec<Tensor>, ProtocolSpec, ProtocolGrid) {
        let cfg = RunConfig::from_preset("1x2-tiny").unwrap();
        let layout = Layout::new(&cfg.dims);
        let params = layout.init(&mut ChaCha8Rng::seed_from_u64(5), 1.0);
        let spec = ProtocolSpec::gaussian_pulse(0.5, 0.8, 0.5, 0.15);
        let grid = evaluate(&spec, cfg.dims.t_total, cfg.dims.n_t).unwrap();
        (layout, params, spec, grid)
    }

    #[test]
    fn enumerated_observables_match_dense() {
        let (layout, params, _, grid) = setup();
        let ctx = TunableContext::from_model(&layout, &params, &grid).unwrap();
        let lattice = Lattice::new(1, 2);
        let states = vec![SpinConfig::from_index(1, 2), SpinConfig::from_index(2, 2)];
        let mut g = Graph::new();
        let p = bind(&mut g, &params, false);
        let m = g.constant(ctx.m_at(4));
        let (x, zz) = column_observables(&mut g, &layout, &p, m, &states);
        for (i, s) in states.iter().enumerate() {
            let psi = model_state(&layout, &params, &ctx.m_at(4), &InitialState::Basis(s.clone())).unwrap();
            let o = observables(&psi, &lattice, grid.fields(4));
            assert!((g.value(x).data()[i] - o.x).abs() < 1e-12);
            assert!((g.value(zz).data()[i] - o.zz).abs() < 1e-12);
        }
    }

    #[test]
    fn all_up_targets_at_time_zero() {
        let (_, _, spec, grid) = setup();
        let lattice = Lattice::new(1, 2);
        let d = dataset_for_states(&lattice, &spec, &grid, vec![SpinConfig::all_up(2)], 1).unwrap();
        assert_eq!(d.x_target[0][0], 0.0);
        assert_eq!(d.zz_target[0][0], 1.0);
    }

    #[test]
    fn dataset_deterministic_and_csv_roundtrip() {
        let (_, _, spec, grid) = setup();
        let lattice = Lattice::new(1, 2);
        let a = make_dataset(&lattice, &spec, &grid, 3, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_dataset(&lattice, &spec, &grid, 3, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<_> = a.states.iter().collect();
        assert_eq!(distinct.len(), 3);
        assert_eq!(a.t_indices, vec![0, 2, 4, 6, 8, 10]);
        let back = FinetuneDataset::from_csv(&a.to_csv(), &grid, 2).unwrap();
        assert_eq!(back.states, a.states);
        assert_eq!(back.t_indices, a.t_indices);
        for (x, y) in back.x_target.iter().flatten().zip(a.x_target.iter().flatten()) {
            assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
        }
    }

    #[test]
    #[should_panic(expected = "distinct states")]
    fn too_many_states_is_a_contract_violation() {
        random_basis_states(2, 5, &[], &mut ChaCha8Rng::seed_from_u64(0));
    }

    #[test]
    fn loss_closed_forms() {
        let (layout, params, _, grid) = setup();
        let ctx = TunableContext::from_model(&layout, &params, &grid).unwrap();
        let states = vec![SpinConfig::from_index(0, 2), SpinConfig::from_index(3, 2)];
        let lattice = Lattice::new(1, 2);
        let t_indices = vec![0, 3, 7];
        let mut exact = FinetuneDataset { states: states.clone(), t_indices: t_indices.clone(), times: vec![0.0; 3], x_target: vec![], zz_target: vec![] };
        for s in &states {
            let (mut xs, mut zs) = (vec![], vec![]);
            for &j in &t_indices {
                let psi = model_state(&layout, &params, &ctx.m_at(j), &InitialState::Basis(s.clone())).unwrap();
                let o = observables(&psi, &lattice, grid.fields(j));
                xs.push(o.x);
                zs.push(o.zz);
            }
            exact.x_target.push(xs);
            exact.zz_target.push(zs);
        }
        let (l0, _) = finetune_loss(&layout, &params, &ctx, &exact, false).unwrap();
        assert!(l0 < 1e-24, "{l0}");
        let eps = 0.03;
        let mut shifted = exact.clone();
        shifted.x_target.iter_mut().flatten().for_each(|x| *x -= eps);
        let (l1, _) = finetune_loss(&layout, &params, &ctx, &shifted, false).unwrap();
        assert!((l1 - 3.0 * eps * eps).abs() < 1e-12, "{l1}");
    }

    #[test]
    fn context_gradient_matches_finite_differences() {
        let (layout, params, spec, grid) = setup();
        let lattice = Lattice::new(1, 2);
        let ctx = TunableContext::from_model(&layout, &params, &grid).unwrap();
        let data = make_dataset(&lattice, &spec, &grid, 2, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (_, grad) = finetune_loss(&layout, &params, &ctx, &data, true).unwrap();
        let grad = grad.unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..ctx.m.numel() {
            let mut a = ctx.clone();
            a.m.data_mut()[i] += h;
            let mut b = ctx.clone();
            b.m.data_mut()[i] -= h;
            let fd = (finetune_loss(&layout, &params, &a, &data, false).unwrap().0 - finetune_loss(&layout, &params, &b, &data, false).unwrap().0) / (2.0 * h);
            worst = worst.max(rel_err(grad.data()[i], fd));
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn zero_steps_leave_context_and_short_run_descends() {
        let (layout, params, spec, grid) = setup();
        let lattice = Lattice::new(1, 2);
        let ctx = TunableContext::from_model(&layout, &params, &grid).unwrap();
        let data = make_dataset(&lattice, &spec, &grid, 2, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let out = finetune_run(&layout, &params, ctx.clone(), &data, 0, 1e-3).unwrap();
        assert_eq!(out.context, ctx);
        assert_eq!(out.history.len(), 1);
        let out = finetune_run(&layout, &params, ctx, &data, 30, 1e-2).unwrap();
        assert!(out.fault.is_none());
        assert!(out.history.last().unwrap() < &out.history[0]);
    }

    #[test]
    fn mae_bounds() {
        let (layout, params, spec, grid) = setup();
        let ctx = TunableContext::from_model(&layout, &params, &grid).unwrap();
        let r = mae_report(&layout, &params, &ctx, &spec, &[SpinConfig::from_index(2, 2)]).unwrap();
        assert_eq!(r.times.len(), 11);
        assert!(r.x.iter().chain(&r.z).chain(&r.zz).all(|&v| (0.0..=2.0).contains(&v)));
    }
}
