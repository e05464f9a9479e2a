//! Discrete Fourier transforms along one axis.
//!
//! Convention: `fft` is unnormalized, `X_k = sum_t x_t exp(-2 pi i k t / n)`,
//! and `ifft` carries the full `1/n` factor so `ifft(fft(x)) == x`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

pub(crate) fn fft_in_place(buf: &mut [Complex64]) {
    assert!(!buf.is_empty(), "fft of an empty sequence");
    plan(buf.len(), false).process(buf);
}

/// Unnormalized inverse transform (no 1/n factor).
pub(crate) fn ifft_unnormalized_in_place(buf: &mut [Complex64]) {
    assert!(!buf.is_empty(), "ifft of an empty sequence");
    plan(buf.len(), true).process(buf);
}

pub fn fft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    fft_in_place(&mut buf);
    buf
}

pub fn ifft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    ifft_unnormalized_in_place(&mut buf);
    let scale = 1.0 / x.len() as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

/// First `k_max` modes of the forward transform of a real signal.
pub fn rfft_truncated(x: &[f64], k_max: usize) -> Vec<Complex64> {
    assert!(k_max <= x.len() / 2 + 1, "k_max {} exceeds the {} available modes", k_max, x.len() / 2 + 1);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf);
    buf.truncate(k_max);
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn zeros_map_to_zeros() {
        let x = vec![Complex64::new(0.0, 0.0); 17];
        assert!(fft(&x).iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn pure_tone_concentrates_on_its_mode() {
        let n = 201;
        let k = 7;
        let x: Vec<Complex64> = (0..n)
            .map(|t| Complex64::from_polar(1.0, 2.0 * PI * (k * t) as f64 / n as f64))
            .collect();
        let spec = fft(&x);
        for (j, v) in spec.iter().enumerate() {
            let want = if j == k { n as f64 } else { 0.0 };
            assert!((v.re - want).abs() < 1e-9 && v.im.abs() < 1e-9, "mode {j}: {v}");
        }
    }

    #[test]
    #[should_panic]
    fn empty_is_rejected() {
        fft(&[]);
    }
}
