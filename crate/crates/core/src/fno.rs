//! Fourier neural operator from a protocol grid to the context velocity
//! field `Mdot(t)`, and cumulative Simpson integration to `M(t)`.
//!
//! On the tape a context trajectory is an `(n_t, n_c * d_e)` matrix: row `j`
//! holds the `n_c` tokens at `t_j`, token-major.

use crate::model::Layout;
use crate::protocol::ProtocolGrid;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Result, UnpError};

/// Input channels `(h_x, h_z, t / T)`, one row per grid time.
pub fn fno_input(grid: &ProtocolGrid) -> Tensor {
    let n = grid.n_t();
    let mut data = Vec::with_capacity(3 * n);
    for j in 0..n {
        data.extend_from_slice(&[grid.hx[j], grid.hz[j], grid.times[j] / grid.t_total]);
    }
    Tensor::new(&[n, 3], data)
}

/// `Mdot` as an `(n_t, n_c * d_e)` node.
///
/// lift, then per layer `u <- gelu(K u + W u + b)` with `K` the truncated
/// spectral convolution, then a pointwise projection. GeLU follows every
/// layer, the last included.
pub fn fno_forward(g: &mut Graph, layout: &Layout, p: &[Var], input: Var) -> Var {
    let idx = &layout.fno;
    assert_eq!(g.shape(input).to_vec(), vec![g.shape(input)[0], 3], "FNO input must have 3 channels");
    assert!(
        layout.dims.k_max <= g.shape(input)[0] / 2 + 1,
        "k_max {} exceeds available modes for {} grid points",
        layout.dims.k_max,
        g.shape(input)[0]
    );
    let lifted = g.matmul(input, p[idx.lift_w]);
    let mut u = g.add_tiled(lifted, p[idx.lift_b]);
    for layer in &idx.layers {
        let spectral = g.spectral_conv(u, p[layer.r_re], p[layer.r_im], layout.dims.k_max);
        let local = g.matmul(u, p[layer.w]);
        let local = g.add_tiled(local, p[layer.b]);
        let pre = g.add(spectral, local);
        u = g.gelu(pre);
    }
    let out = g.matmul(u, p[idx.proj_w]);
    g.add_tiled(out, p[idx.proj_b])
}

/// Weights `S` with `(S f)_j` the cumulative integral of samples `f` from
/// `t_0` to `t_j`: composite Simpson on even prefixes, Simpson on the first
/// `j - 1` intervals plus a trapezoid on the last for odd prefixes.
pub fn cumulative_simpson_weights(n_t: usize, dt: f64) -> Result<Tensor> {
    if n_t < 3 || n_t % 2 == 0 {
        return Err(UnpError::Config(format!("cumulative Simpson needs an odd point count >= 3, got {n_t}")));
    }
    let mut w = vec![0.0; n_t * n_t];
    for j in 1..n_t {
        let row = &mut w[j * n_t..(j + 1) * n_t];
        let simpson_end = if j % 2 == 0 { j } else { j - 1 };
        for i in (0..simpson_end).step_by(2) {
            row[i] += dt / 3.0;
            row[i + 1] += 4.0 * dt / 3.0;
            row[i + 2] += dt / 3.0;
        }
        if j % 2 == 1 {
            row[j - 1] += dt / 2.0;
            row[j] += dt / 2.0;
        }
    }
    Ok(Tensor::new(&[n_t, n_t], w))
}

/// Scalar cumulative integral with the same rule as
/// [`cumulative_simpson_weights`].
pub fn cumulative_simpson(f: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = f.len();
    let w = cumulative_simpson_weights(n, dt)?;
    Ok((0..n).map(|j| w.data()[j * n..(j + 1) * n].iter().zip(f).map(|(a, b)| a * b).sum()).collect())
}

/// `M = M_0 + S Mdot`, with `m0` of shape `(n_c, d_e)`.
pub fn integrate_context(g: &mut Graph, mdot: Var, m0: Var, weights: Var) -> Var {
    let cols = g.shape(mdot)[1];
    let integral = g.matmul(weights, mdot);
    let m0_row = g.reshape(m0, &[1, cols]);
    g.add_tiled(integral, m0_row)
}

/// Evaluated context trajectory for one protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTrajectory {
    pub n_c: usize,
    pub d_e: usize,
    /// `(n_t, n_c * d_e)`.
    pub m: Tensor,
    /// `(n_t, n_c * d_e)`.
    pub mdot: Tensor,
}

impl ContextTrajectory {
    pub fn n_t(&self) -> usize {
        self.m.rows()
    }

    fn row(t: &Tensor, j: usize, n_c: usize, d_e: usize) -> Tensor {
        let c = n_c * d_e;
        Tensor::new(&[n_c, d_e], t.data()[j * c..(j + 1) * c].to_vec())
    }

    /// Context tokens `M(t_j)` as `(n_c, d_e)`.
    pub fn m_at(&self, j: usize) -> Tensor {
        Self::row(&self.m, j, self.n_c, self.d_e)
    }

    pub fn mdot_at(&self, j: usize) -> Tensor {
        Self::row(&self.mdot, j, self.n_c, self.d_e)
    }
}

pub fn context_trajectory(layout: &Layout, params: &[Tensor], grid: &ProtocolGrid) -> Result<ContextTrajectory> {
    let dims = &layout.dims;
    if grid.n_t() != dims.n_t {
        return Err(UnpError::Config(format!("protocol grid has {} points, model expects {}", grid.n_t(), dims.n_t)));
    }
    let mut g = Graph::new();
    let p = crate::model::bind(&mut g, params, false);
    let input = g.constant(fno_input(grid));
    let mdot = fno_forward(&mut g, layout, &p, input);
    let w = g.constant(cumulative_simpson_weights(grid.n_t(), grid.dt())?);
    let m = integrate_context(&mut g, mdot, p[layout.m0], w);
    g.check()?;
    Ok(ContextTrajectory { n_c: dims.n_c, d_e: dims.d_e, m: g.value(m).clone(), mdot: g.value(mdot).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::gradcheck::{check_entries, FD_REL_TOL};
    use crate::model::Layout;
    use crate::protocol::{evaluate, grid_times, sample_training_protocol, ProtocolSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simpson_of_cosine() {
        let n = 201;
        let t = std::f64::consts::FRAC_PI_2;
        let times = grid_times(t, n);
        let f: Vec<f64> = times.iter().map(|x| x.cos()).collect();
        let m = cumulative_simpson(&f, t / (n - 1) as f64).unwrap();
        assert!((m[n - 1] - 1.0).abs() < 1e-8);
        for (j, x) in times.iter().enumerate() {
            assert!((m[j] - x.sin()).abs() < 1e-6, "j={j}");
        }
    }

    #[test]
    fn simpson_exactness() {
        let n = 21;
        let dt = 0.05;
        let times = grid_times(1.0, n);
        assert!(cumulative_simpson(&[0.0; 21], dt).unwrap().iter().all(|&x| x == 0.0));
        let ones = cumulative_simpson(&[1.0; 21], dt).unwrap();
        for (j, t) in times.iter().enumerate() {
            assert!((ones[j] - t).abs() < 1e-15);
        }
        let quad: Vec<f64> = times.iter().map(|t| 3.0 * t * t - t + 0.5).collect();
        let m = cumulative_simpson(&quad, dt).unwrap();
        for j in (0..n).step_by(2) {
            let t = times[j];
            assert!((m[j] - (t * t * t - 0.5 * t * t + 0.5 * t)).abs() < 1e-14);
        }
        assert!(cumulative_simpson(&[1.0; 20], dt).is_err());
    }

    fn tiny() -> (Layout, Vec<Tensor>) {
        let mut cfg = RunConfig::from_preset("1x2-tiny").unwrap();
        cfg.dims.d_e = 4;
        cfg.dims.n_heads = 2;
        cfg.dims.d_f = 8;
        let layout = Layout::new(&cfg.dims);
        let params = layout.init(&mut ChaCha8Rng::seed_from_u64(3), 1.0);
        (layout, params)
    }

    #[test]
    fn zero_weights_give_projection_bias() {
        let (layout, mut params) = tiny();
        for (i, t) in params.iter_mut().enumerate() {
            if i != layout.fno.proj_b && i != layout.m0 {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        params[layout.fno.proj_b] = Tensor::new(&[8], bias.clone());
        let zero = ProtocolSpec::tanh_ramp(0.0, 0.0, 0.5, 0.1);
        let grid = evaluate(&zero, 1.0, 11).unwrap();
        let traj = context_trajectory(&layout, &params, &grid).unwrap();
        assert_eq!(traj.mdot.shape(), &[11, 8]);
        for j in 0..11 {
            assert_eq!(traj.mdot_at(j).data(), &bias[..]);
        }
        assert_eq!(traj.m_at(0), params[layout.m0]);
    }

    #[test]
    fn single_mode_kernel_is_a_low_pass_filter() {
        let n = 32;
        let signal: Vec<f64> = (0..n)
            .map(|t| {
                let x = 2.0 * std::f64::consts::PI * t as f64 / n as f64;
                0.7 + (2.0 * x).cos() + 0.5 * (9.0 * x).sin()
            })
            .collect();
        let mut g = Graph::new();
        let u = g.constant(Tensor::new(&[n, 1], signal));
        let k_max = 4;
        let r_re = g.constant(Tensor::new(&[k_max, 1], vec![1.0; k_max]));
        let r_im = g.constant(Tensor::zeros(&[k_max, 1]));
        let out = g.spectral_conv(u, r_re, r_im, k_max);
        for t in 0..n {
            let x = 2.0 * std::f64::consts::PI * t as f64 / n as f64;
            assert!((g.value(out).data()[t] - (0.7 + (2.0 * x).cos())).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_spreads_over_all_times() {
        let (layout, params) = tiny();
        let spec = sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(1));
        let grid = evaluate(&spec, 1.0, 11).unwrap();
        let base = context_trajectory(&layout, &params, &grid).unwrap();
        let mut bumped = grid.clone();
        bumped.hx[5] += 1e-3;
        let other = context_trajectory(&layout, &params, &bumped).unwrap();
        for j in 0..11 {
            let diff = base.mdot_at(j).max_abs_diff(&other.mdot_at(j));
            assert!(diff > 0.0, "time {j} unaffected");
        }
    }

    #[test]
    fn gradients_through_fno_and_integration() {
        let (layout, params) = tiny();
        let spec = sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(2));
        let grid = evaluate(&spec, 1.0, 11).unwrap();
        let input = fno_input(&grid);
        let weights = cumulative_simpson_weights(11, grid.dt()).unwrap();
        let probe = Tensor::from_fn(&[11, 8], |i| ((i * 7) % 5) as f64 - 2.0);
        let f = |g: &mut Graph, v: &[Var]| {
            let x = g.constant(input.clone());
            let w = g.constant(weights.clone());
            let mdot = fno_forward(g, &layout, v, x);
            let m = integrate_context(g, mdot, v[layout.m0], w);
            let pr = g.constant(probe.clone());
            let s = g.unary(m, crate::tensor::UnaryOp::Sin);
            let prod = g.mul(s, pr);
            g.sum_all(prod)
        };
        let report = check_entries(&f, &params, Some(12));
        assert!(report.passes(FD_REL_TOL), "{report:?}");
    }
}
