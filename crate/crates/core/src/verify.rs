//! Property suite behind `unp-sim verify`.
//!
//! Every check builds its own small model unless a trained parameter set is
//! supplied, in which case the structural checks also run on it.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::fno::{context_trajectory, cumulative_simpson};
use crate::lattice::{DoubledConfig, FieldsAtTime, Lattice};
use crate::model::{bind, Layout};
use crate::oracle::{basis_state, evolve_state, observables, propagate, CMatrix};
use crate::protocol::{evaluate, grid_times, sample_training_protocol};
use crate::tensor::{fft, ifft, Graph, Tensor};
use crate::training::{evaluate_batch, physical_loss_group, anchor_loss_group, sample_batch, ExactSource, ModelSource, PhysOptions};
use crate::transformer::{evaluate_amplitudes, sample_configs, site_conditionals, ForwardOptions};
use crate::Result;

/// Outcome of one property.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((ok, d)) => Self::new(name, ok, d),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn all_configs(n: usize) -> Vec<DoubledConfig> {
    (0..4usize.pow(n as u32)).map(|i| DoubledConfig::from_index(i, n)).collect()
}

fn tiny_config(lx: usize, ly: usize) -> RunConfig {
    let mut cfg = RunConfig::from_preset("1x2-tiny").expect("built-in preset");
    cfg.dims.lx = lx;
    cfg.dims.ly = ly;
    cfg
}

fn random_model(lx: usize, ly: usize, seed: u64) -> (Layout, Vec<Tensor>) {
    let layout = Layout::new(&tiny_config(lx, ly).dims);
    let params = layout.init(&mut ChaCha8Rng::seed_from_u64(seed), 1.0);
    (layout, params)
}

/// Context rows at three random grid times of a random protocol.
fn random_contexts(layout: &Layout, params: &[Tensor], seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = evaluate(&sample_training_protocol(&mut rng), layout.dims.t_total, layout.dims.n_t)?;
    let traj = context_trajectory(layout, params, &grid)?;
    Ok((0..3).map(|_| traj.m_at(rng.random_range(0..layout.dims.n_t))).collect())
}

/// Largest `|sum_sigma |U(sigma)|^2 - 1|` over three random times.
pub fn normalization_error(layout: &Layout, params: &[Tensor], seed: u64) -> Result<f64> {
    let configs = all_configs(layout.dims.n_sites());
    let mut worst: f64 = 0.0;
    for m in random_contexts(layout, params, seed)? {
        let total: f64 = evaluate_amplitudes(layout, params, &configs, &m)?.iter().map(|a| a.log_p.exp()).sum();
        worst = worst.max((total - 1.0).abs());
    }
    Ok(worst)
}

/// Whether any site's conditional changes when a later token changes.
pub fn causality_violations(layout: &Layout, params: &[Tensor], seed: u64) -> Result<usize> {
    let n = layout.dims.n_sites();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = random_contexts(layout, params, seed)?.remove(0);
    let mut bad = 0;
    for _ in 0..4 {
        let base: Vec<u8> = (0..n).map(|_| rng.random_range(0..4u8)).collect();
        let ref_rows = site_conditionals(layout, params, &m, &base)?;
        for j in 0..n {
            let mut other = base.clone();
            other[j] = (other[j] + 1 + rng.random_range(0..3u8)) % 4;
            let rows = site_conditionals(layout, params, &m, &other)?;
            bad += (0..=j).filter(|&i| rows[i] != ref_rows[i]).count();
        }
    }
    Ok(bad)
}

/// Change of the residual loss when every conditional phase is shifted by
/// the same constant.
pub fn gauge_shift_change(layout: &Layout, params: &[Tensor], shift: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = evaluate(&sample_training_protocol(&mut rng), layout.dims.t_total, layout.dims.n_t)?;
    let traj = context_trajectory(layout, params, &grid)?;
    let j = rng.random_range(0..grid.n_t());
    let samples: Vec<DoubledConfig> = sample_configs(layout, params, &traj.m_at(j), 32, &mut rng)?.into_iter().map(|s| s.config).collect();
    let lattice = Lattice::new(layout.dims.lx, layout.dims.ly);
    let loss = |bias: f64| -> Result<f64> {
        let mut g = Graph::new();
        let p = bind(&mut g, params, false);
        let m = g.constant(traj.m_at(j));
        let mdot = g.constant(traj.mdot_at(j));
        let src = ModelSource { layout, params: &p, m, mdot: Some(mdot), opts: ForwardOptions { phase_bias: bias } };
        let l = physical_loss_group(&mut g, &src, &lattice, grid.fields(j), &samples, PhysOptions::default())?;
        Ok(l.map_or(0.0, |v| g.value(v).item()))
    };
    Ok((loss(shift)? - loss(0.0)?).abs())
}

/// Residual and anchor losses of exact oracle amplitudes on a two-site
/// lattice under constant fields: `(max L_phys, L_id)`.
pub fn exact_injection_losses() -> Result<(f64, f64)> {
    let lattice = Lattice::new(1, 2);
    let f = FieldsAtTime { hx: 0.8, hz: 0.15 };
    let times = grid_times(1.0, 6);
    let us: Vec<CMatrix> = propagate(&lattice, &f, &times, 8)?;
    let configs = all_configs(2);
    let mut worst: f64 = 0.0;
    for u in us.iter().skip(1) {
        let src = ExactSource::new(&lattice, u.clone(), f)?;
        let live: Vec<DoubledConfig> = configs.iter().filter(|c| src.amplitude(c).norm() > 1e-6).cloned().collect();
        let mut g = Graph::new();
        if let Some(l) = physical_loss_group(&mut g, &src, &lattice, f, &live, PhysOptions::default())? {
            worst = worst.max(g.value(l).item());
        }
    }
    let src = ExactSource::new(&lattice, us[0].clone(), f)?;
    let mut g = Graph::new();
    let l = anchor_loss_group(&mut g, &src, 2, &configs)?;
    Ok((worst, g.value(l).item()))
}

/// `(max |<Z>(t) - cos 2t|, max |U^dag U - 1|)` for one spin under `h_x = 1`.
pub fn oracle_errors() -> Result<(f64, f64)> {
    let l = Lattice::new(1, 1);
    let f = FieldsAtTime { hx: 1.0, hz: 0.0 };
    let times = grid_times(1.0, 201);
    let states = evolve_state(&l, &f, &times, &basis_state(2, 0), 1)?;
    let z = times.iter().zip(&states).map(|(t, psi)| (observables(psi, &l, f).z - (2.0 * t).cos()).abs()).fold(0.0, f64::max);
    let l4 = Lattice::new(2, 2);
    let spec = sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(11));
    let us = propagate(&l4, &spec, &times, 4)?;
    let id = CMatrix::identity(16, 16);
    let unitary = us.iter().map(|u| (u.adjoint() * u - &id).camax()).fold(0.0, f64::max);
    Ok((z, unitary))
}

/// Largest deviation of sampled frequencies from enumerated
/// probabilities, in standard errors.
pub fn sampler_z_score(layout: &Layout, params: &[Tensor], n_samples: usize, seed: u64) -> Result<f64> {
    let m = random_contexts(layout, params, seed)?.remove(0);
    let configs = all_configs(layout.dims.n_sites());
    let probs: Vec<f64> = evaluate_amplitudes(layout, params, &configs, &m)?.iter().map(|a| a.log_p.exp()).collect();
    let mut counts = vec![0usize; configs.len()];
    for s in sample_configs(layout, params, &m, n_samples, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed))? {
        counts[s.config.index()] += 1;
    }
    let n = n_samples as f64;
    Ok(probs
        .iter()
        .zip(&counts)
        .map(|(&p, &c)| {
            let se = (p * (1.0 - p) / n).sqrt().max(1.0 / n);
            (c as f64 / n - p).abs() / se
        })
        .fold(0.0, f64::max))
}

/// `(Simpson endpoint error for cos on 201 points, FFT roundtrip error)`.
pub fn numerics_errors() -> Result<(f64, f64)> {
    let n = 201;
    let t = std::f64::consts::FRAC_PI_2;
    let times = grid_times(t, n);
    let f: Vec<f64> = times.iter().map(|x| x.cos()).collect();
    let simpson = (cumulative_simpson(&f, t / (n - 1) as f64)?[n - 1] - 1.0).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fft_err: f64 = 0.0;
    for len in [7usize, 64, 201] {
        let x: Vec<Complex64> = (0..len).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let back = ifft(&fft(&x));
        fft_err = fft_err.max(x.iter().zip(&back).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max));
    }
    Ok((simpson, fft_err))
}

/// Largest per-group relative error between the full-loss gradient and
/// central differences on a frozen batch; `(group name, error)` pairs.
pub fn full_loss_gradient_errors(cfg: &RunConfig, seed: u64) -> Result<Vec<(String, f64)>> {
    let layout = Layout::new(&cfg.dims);
    let params = layout.init(&mut ChaCha8Rng::seed_from_u64(seed), cfg.init_gain);
    let batch = sample_batch(&layout, &params, cfg, false, &[seed, 0, 0])?;
    let grads = evaluate_batch(&layout, &params, cfg, &batch, true)?.grads.expect("gradients requested");
    let h = crate::gradcheck::FD_STEP;
    let mut out = Vec::with_capacity(layout.len());
    for (i, name) in layout.names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..params[i].numel() {
            let mut p = params.clone();
            p[i].data_mut()[j] += h;
            let up = evaluate_batch(&layout, &p, cfg, &batch, false)?.loss;
            p[i].data_mut()[j] -= 2.0 * h;
            let down = evaluate_batch(&layout, &p, cfg, &batch, false)?.loss;
            worst = worst.max(crate::gradcheck::rel_err(grads[i].data()[j], (up - down) / (2.0 * h)));
        }
        out.push((name.clone(), worst));
    }
    Ok(out)
}

/// Run the suite. With `trained`, normalization, causality, and gauge
/// checks also run on those parameters.
pub fn run_suite(trained: Option<(&Layout, &[Tensor])>) -> Vec<Check> {
    let mut checks = Vec::new();
    checks.push(Check::from_result(
        "full-loss gradient (1x2)",
        full_loss_gradient_errors(&tiny_config(1, 2), 17).map(|errs| {
            let (name, worst) = errs.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
            (worst < crate::gradcheck::FD_REL_TOL, format!("worst relative error {worst:.2e} in {name}"))
        }),
    ));
    let mut models: Vec<(String, Layout, Vec<Tensor>)> =
        [(1, 2), (1, 3)].iter().map(|&(lx, ly)| { let (l, p) = random_model(lx, ly, 3); (format!("random {lx}x{ly}"), l, p) }).collect();
    if let Some((l, p)) = trained {
        if l.dims.n_sites() <= 6 {
            models.push(("trained".into(), l.clone(), p.to_vec()));
        }
    }
    for (label, layout, params) in &models {
        checks.push(Check::from_result(
            &format!("normalization ({label})"),
            normalization_error(layout, params, 5).map(|e| (e < 1e-10, format!("max |norm - 1| = {e:.2e}"))),
        ));
        checks.push(Check::from_result(
            &format!("causal mask ({label})"),
            causality_violations(layout, params, 6).map(|v| (v == 0, format!("{v} conditionals saw a later token"))),
        ));
        checks.push(Check::from_result(
            &format!("gauge invariance ({label})"),
            gauge_shift_change(layout, params, 0.73, 7).map(|d| (d < 1e-10, format!("loss change {d:.2e}"))),
        ));
    }
    checks.push(Check::from_result(
        "exact-amplitude injection",
        exact_injection_losses().map(|(p, a)| (p < 1e-8 && a < 1e-12, format!("L_phys {p:.2e}, L_id {a:.2e}"))),
    ));
    checks.push(Check::from_result(
        "oracle",
        oracle_errors().map(|(z, u)| (z < 1e-8 && u < 1e-10, format!("|<Z> - cos 2t| {z:.2e}, unitarity {u:.2e}"))),
    ));
    let (layout, params) = random_model(1, 2, 8);
    checks.push(Check::from_result(
        "sampler frequencies",
        sampler_z_score(&layout, &params, 20_000, 9).map(|z| (z < 4.0, format!("max deviation {z:.2} standard errors"))),
    ));
    checks.push(Check::from_result(
        "Simpson and FFT",
        numerics_errors().map(|(s, f)| (s < 1e-8 && f < 1e-12, format!("Simpson {s:.2e}, FFT roundtrip {f:.2e}"))),
    ));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_checks_pass() {
        let (p, a) = exact_injection_losses().unwrap();
        assert!(p < 1e-8 && a < 1e-12, "{p} {a}");
        let (z, u) = oracle_errors().unwrap();
        assert!(z < 1e-8 && u < 1e-10);
        let (layout, params) = random_model(1, 2, 1);
        assert!(normalization_error(&layout, &params, 2).unwrap() < 1e-10);
        assert_eq!(causality_violations(&layout, &params, 3).unwrap(), 0);
        assert!(gauge_shift_change(&layout, &params, 1.3, 4).unwrap() < 1e-10);
    }
}
