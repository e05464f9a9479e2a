//! Dense exact evolution: the ground truth every model result is checked
//! against.
//!
//! Basis index `a` is the snake-ordered bit string of [`SpinConfig::index`]
//! (site 0 is the most significant bit). Time stepping is the exponential
//! midpoint rule `U(t + d) = exp(-i H(t + d/2) d) U(t)`, with each
//! exponential built from a real symmetric eigendecomposition, so every step
//! is unitary to rounding.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::lattice::{diagonal_energy, FieldsAtTime, Lattice, SpinConfig, COUPLING_J};
use crate::protocol::Drive;
use crate::{Result, UnpError};

pub type CMatrix = DMatrix<Complex64>;
pub type StateVector = DVector<Complex64>;

pub const MAX_DENSE_SITES: usize = 14;
pub const DEFAULT_SUBSTEPS: usize = 10;
pub const CONVERGENCE_TOL: f64 = 1e-8;
const MAX_SUBSTEPS: usize = 10 * 1024;

fn check_size(lattice: &Lattice) -> Result<()> {
    if lattice.n_sites() > MAX_DENSE_SITES {
        return Err(UnpError::TooLarge(lattice.n_sites()));
    }
    Ok(())
}

/// Bit mask of site `p` inside a basis index.
pub fn site_mask(n_sites: usize, p: usize) -> usize {
    1 << (n_sites - 1 - p)
}

/// Real symmetric `H(t)` in the computational basis.
pub fn build_hamiltonian(lattice: &Lattice, f: FieldsAtTime) -> Result<DMatrix<f64>> {
    check_size(lattice)?;
    let n = lattice.n_sites();
    let d = lattice.dim();
    let mut h = DMatrix::zeros(d, d);
    for a in 0..d {
        h[(a, a)] = diagonal_energy(lattice, &SpinConfig::from_index(a, n), f);
        for p in 0..n {
            h[(a ^ site_mask(n, p), a)] = -f.hx;
        }
    }
    Ok(h)
}

/// Eigendecomposition of `H`, reused for `exp(-i H dt)`.
pub struct Spectrum {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl Spectrum {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        let eig = SymmetricEigen::try_new(h, f64::EPSILON, 10_000)
            .ok_or_else(|| UnpError::Numeric("symmetric eigendecomposition did not converge".into()))?;
        Ok(Self { values: eig.eigenvalues, vectors: eig.eigenvectors })
    }

    /// `exp(-i H dt) psi` without forming the exponential.
    pub fn apply_exp(&self, dt: f64, psi: &StateVector) -> StateVector {
        let v = &self.vectors;
        let d = v.nrows();
        let mut coeff = vec![Complex64::new(0.0, 0.0); d];
        for (k, c) in coeff.iter_mut().enumerate() {
            let mut s = Complex64::new(0.0, 0.0);
            for a in 0..d {
                s += psi[a] * v[(a, k)];
            }
            *c = s * Complex64::from_polar(1.0, -self.values[k] * dt);
        }
        StateVector::from_fn(d, |a, _| (0..d).map(|k| coeff[k] * v[(a, k)]).sum())
    }

    pub fn exp(&self, dt: f64) -> CMatrix {
        let v = &self.vectors;
        let d = v.nrows();
        let phases: Vec<Complex64> = self.values.iter().map(|&l| Complex64::from_polar(1.0, -l * dt)).collect();
        CMatrix::from_fn(d, d, |a, b| (0..d).map(|k| phases[k] * (v[(a, k)] * v[(b, k)])).sum())
    }
}

fn substep_fields(drive: &dyn Drive, t0: f64, dt: f64, j: usize) -> FieldsAtTime {
    drive.fields_at(t0 + (j as f64 + 0.5) * dt)
}

/// Full propagator at every time in `times`; `U(times[0]) = I`.
pub fn propagate(lattice: &Lattice, drive: &dyn Drive, times: &[f64], substeps: usize) -> Result<Vec<CMatrix>> {
    assert!(substeps >= 1, "propagate needs at least one substep");
    check_size(lattice)?;
    let d = lattice.dim();
    let mut u = CMatrix::identity(d, d);
    let mut out = Vec::with_capacity(times.len());
    out.push(u.clone());
    for w in times.windows(2) {
        let dt = (w[1] - w[0]) / substeps as f64;
        for j in 0..substeps {
            let spec = Spectrum::new(build_hamiltonian(lattice, substep_fields(drive, w[0], dt, j))?)?;
            u = spec.exp(dt) * u;
        }
        out.push(u.clone());
    }
    Ok(out)
}

/// `psi(t)` at every time in `times`, starting from `psi0` at `times[0]`.
pub fn evolve_state(
    lattice: &Lattice,
    drive: &dyn Drive,
    times: &[f64],
    psi0: &StateVector,
    substeps: usize,
) -> Result<Vec<StateVector>> {
    assert!(substeps >= 1, "evolve_state needs at least one substep");
    check_size(lattice)?;
    assert_eq!(psi0.len(), lattice.dim(), "initial state dimension");
    let mut psi = psi0.clone();
    let mut out = Vec::with_capacity(times.len());
    out.push(psi.clone());
    for w in times.windows(2) {
        let dt = (w[1] - w[0]) / substeps as f64;
        for j in 0..substeps {
            let spec = Spectrum::new(build_hamiltonian(lattice, substep_fields(drive, w[0], dt, j))?)?;
            psi = spec.apply_exp(dt, &psi);
        }
        out.push(psi.clone());
    }
    Ok(out)
}

fn max_state_diff(a: &[StateVector], b: &[StateVector]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).norm())).fold(0.0, f64::max)
}

/// [`evolve_state`] with the substep count doubled (from
/// [`DEFAULT_SUBSTEPS`]) until successive results agree within `tol`.
/// Returns the refined trajectory and the substep count used.
pub fn evolve_state_converged(
    lattice: &Lattice,
    drive: &dyn Drive,
    times: &[f64],
    psi0: &StateVector,
    tol: f64,
) -> Result<(Vec<StateVector>, usize)> {
    let mut substeps = DEFAULT_SUBSTEPS;
    let mut prev = evolve_state(lattice, drive, times, psi0, substeps)?;
    while substeps < MAX_SUBSTEPS {
        substeps *= 2;
        let next = evolve_state(lattice, drive, times, psi0, substeps)?;
        if max_state_diff(&prev, &next) < tol {
            return Ok((next, substeps));
        }
        prev = next;
    }
    Err(UnpError::Numeric(format!("exact evolution not converged to {tol:e} with {MAX_SUBSTEPS} substeps")))
}

pub fn basis_state(dim: usize, index: usize) -> StateVector {
    let mut v = StateVector::zeros(dim);
    v[index] = Complex64::new(1.0, 0.0);
    v
}

/// `(|0...0> + |1...1>) / sqrt(2)`.
pub fn ghz_state(lattice: &Lattice) -> StateVector {
    let d = lattice.dim();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut v = StateVector::zeros(d);
    v[0] = Complex64::new(s, 0.0);
    v[d - 1] += Complex64::new(s, 0.0);
    v
}

pub fn fidelity(a: &StateVector, b: &StateVector) -> f64 {
    a.dotc(b).norm_sqr()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observables {
    /// Site-averaged magnetization.
    pub z: f64,
    pub x: f64,
    /// Bond-averaged correlator.
    pub zz: f64,
    pub energy: f64,
}

impl Observables {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "Z" => Some(self.z),
            "X" => Some(self.x),
            "ZZ" => Some(self.zz),
            "E" => Some(self.energy),
            _ => None,
        }
    }
}

pub fn energy_from(lattice: &Lattice, f: FieldsAtTime, z: f64, x: f64, zz: f64) -> f64 {
    let (n, nb) = (lattice.n_sites() as f64, lattice.n_bonds() as f64);
    -COUPLING_J * nb * zz - f.hz * n * z - f.hx * n * x
}

/// Expectation values in a normalized state. A lattice without bonds
/// reports `zz = 0`.
pub fn observables(psi: &StateVector, lattice: &Lattice, f: FieldsAtTime) -> Observables {
    let n = lattice.n_sites();
    assert_eq!(psi.len(), lattice.dim(), "state dimension");
    let (mut z, mut zz, mut x) = (0.0, 0.0, 0.0);
    for a in 0..psi.len() {
        let p = psi[a].norm_sqr();
        let sz = |site: usize| if a & site_mask(n, site) == 0 { 1.0 } else { -1.0 };
        z += p * (0..n).map(sz).sum::<f64>();
        zz += p * lattice.bonds().iter().map(|&(i, j)| sz(i) * sz(j)).sum::<f64>();
        for site in 0..n {
            x += (psi[a].conj() * psi[a ^ site_mask(n, site)]).re;
        }
    }
    let z = z / n as f64;
    let x = x / n as f64;
    let zz = if lattice.n_bonds() > 0 { zz / lattice.n_bonds() as f64 } else { 0.0 };
    Observables { z, x, zz, energy: energy_from(lattice, f, z, x, zz) }
}

/// Normalized linear combination of columns.
pub fn evolve_superposition(columns: &[(Complex64, StateVector)]) -> Result<StateVector> {
    assert!(!columns.is_empty(), "superposition of nothing");
    let mut v = StateVector::zeros(columns[0].1.len());
    for (c, col) in columns {
        v += col * *c;
    }
    let norm = v.norm();
    if norm < 1e-12 {
        return Err(UnpError::DegenerateSuperposition(norm));
    }
    Ok(v / Complex64::new(norm, 0.0))
}

pub const OBSERVABLE_COLUMNS: &str = "t,Z,X,ZZ,E";

/// Rows `t,Z,X,ZZ,E`.
pub fn observables_csv(times: &[f64], obs: &[Observables]) -> String {
    let mut s = format!("{OBSERVABLE_COLUMNS}\n");
    for (t, o) in times.iter().zip(obs) {
        let _ = writeln!(s, "{t},{},{},{},{}", o.z, o.x, o.zz, o.energy);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::offdiagonal_connections;
    use crate::protocol::{grid_times, sample_training_protocol};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn fields(hx: f64, hz: f64) -> FieldsAtTime {
        FieldsAtTime { hx, hz }
    }

    #[test]
    fn single_spin_hamiltonians() {
        let l = Lattice::new(1, 1);
        let h = build_hamiltonian(&l, fields(1.0, 0.0)).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]));
        let h = build_hamiltonian(&l, fields(0.0, 1.0)).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]));
    }

    /// Kronecker-product construction, independent of the bit tricks.
    fn dense_by_kron(l: &Lattice, f: FieldsAtTime) -> DMatrix<f64> {
        let n = l.n_sites();
        let id = DMatrix::<f64>::identity(2, 2);
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let op_at = |ops: &[(usize, &DMatrix<f64>)]| {
            let mut m = DMatrix::<f64>::identity(1, 1);
            for site in 0..n {
                let factor = ops.iter().find(|(s, _)| *s == site).map_or(&id, |(_, o)| *o);
                m = m.kronecker(factor);
            }
            m
        };
        let d = l.dim();
        let mut h = DMatrix::zeros(d, d);
        for &(i, j) in l.bonds() {
            h -= op_at(&[(i, &z), (j, &z)]) * COUPLING_J;
        }
        for i in 0..n {
            h -= op_at(&[(i, &z)]) * f.hz;
            h -= op_at(&[(i, &x)]) * f.hx;
        }
        h
    }

    #[test]
    fn matches_kronecker_and_connections() {
        let f = fields(0.7, -0.3);
        for (lx, ly) in [(1, 2), (2, 2), (1, 4), (1, 3)] {
            let l = Lattice::new(lx, ly);
            let h = build_hamiltonian(&l, f).unwrap();
            assert!((&h - dense_by_kron(&l, f)).amax() < 1e-12);
            assert!((&h - h.transpose()).amax() < 1e-12);
            let n = l.n_sites();
            let mut from_conn = DMatrix::zeros(l.dim(), l.dim());
            for a in 0..l.dim() {
                let alpha = SpinConfig::from_index(a, n);
                from_conn[(a, a)] = diagonal_energy(&l, &alpha, f);
                for (ap, coef) in offdiagonal_connections(&alpha, f) {
                    from_conn[(ap.index(), a)] += coef;
                }
            }
            assert!((&h - from_conn).amax() < 1e-12);
        }
    }

    #[test]
    fn too_large_is_rejected() {
        let l = Lattice::new(3, 5);
        assert!(matches!(build_hamiltonian(&l, fields(1.0, 0.0)), Err(UnpError::TooLarge(15))));
    }

    #[test]
    fn rabi_oscillation() {
        let l = Lattice::new(1, 1);
        let times = grid_times(1.0, 101);
        let f = fields(1.0, 0.0);
        let states = evolve_state(&l, &f, &times, &basis_state(2, 0), 1).unwrap();
        for (t, psi) in times.iter().zip(&states) {
            assert!((observables(psi, &l, f).z - (2.0 * t).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_hamiltonian_only_adds_phases() {
        let l = Lattice::new(2, 2);
        let times = grid_times(1.0, 11);
        let us = propagate(&l, &fields(0.0, 0.0), &times, 2).unwrap();
        for (t, u) in times.iter().zip(&us) {
            for a in 0..16 {
                for b in 0..16 {
                    if a != b {
                        assert!(u[(a, b)].norm() < 1e-14);
                    }
                }
                let bond_sum = crate::lattice::bond_zz(&l, &SpinConfig::from_index(a, 4));
                let want = Complex64::from_polar(1.0, COUPLING_J * bond_sum * t);
                assert!((u[(a, a)] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn propagator_is_unitary_and_consistent_with_states() {
        let l = Lattice::new(1, 3);
        let spec = sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(5));
        let times = grid_times(1.0, 21);
        let us = propagate(&l, &spec, &times, 5).unwrap();
        let psi0 = basis_state(8, 3);
        let states = evolve_state(&l, &spec, &times, &psi0, 5).unwrap();
        for (u, psi) in us.iter().zip(&states) {
            let eye = u.adjoint() * u;
            assert!((eye - CMatrix::identity(8, 8)).camax() < 1e-12);
            assert!((u * &psi0 - psi).camax() < 1e-12);
        }
    }

    #[test]
    fn midpoint_rule_is_second_order() {
        let l = Lattice::new(1, 2);
        let spec = sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(8));
        let times = vec![0.0, 1.0];
        let psi0 = basis_state(4, 0);
        let reference = evolve_state(&l, &spec, &times, &psi0, 4096).unwrap();
        let err = |s| (evolve_state(&l, &spec, &times, &psi0, s).unwrap()[1].clone() - &reference[1]).camax();
        let ratio = err(64) / err(128);
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn convergence_loop_refines() {
        let l = Lattice::new(1, 2);
        let spec = sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(2));
        let times = grid_times(1.0, 11);
        let (states, substeps) = evolve_state_converged(&l, &spec, &times, &basis_state(4, 1), 1e-8).unwrap();
        assert!(substeps > DEFAULT_SUBSTEPS);
        let fine = evolve_state(&l, &spec, &times, &basis_state(4, 1), substeps * 4).unwrap();
        assert!(max_state_diff(&states, &fine) < 1e-8);
    }

    #[test]
    fn fidelity_examples() {
        let up = basis_state(2, 0);
        let down = basis_state(2, 1);
        let plus = StateVector::from_vec(vec![c(0.5f64.sqrt()), c(0.5f64.sqrt())]);
        assert!((fidelity(&up, &up) - 1.0).abs() < 1e-15);
        assert_eq!(fidelity(&up, &down), 0.0);
        assert!((fidelity(&plus, &up) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn observable_examples() {
        let l = Lattice::new(2, 2);
        let f = fields(0.5, 0.2);
        let o = observables(&basis_state(16, 0), &l, f);
        assert_eq!((o.z, o.zz, o.x), (1.0, 1.0, 0.0));
        assert!((o.energy - (-4.0 - 0.2 * 4.0)).abs() < 1e-14);
        let uniform = StateVector::from_element(16, c(0.25));
        let o = observables(&uniform, &l, f);
        assert!((o.x - 1.0).abs() < 1e-14 && o.z.abs() < 1e-14);
        let o = observables(&ghz_state(&l), &l, f);
        assert!(o.z.abs() < 1e-15 && (o.zz - 1.0).abs() < 1e-15 && o.x.abs() < 1e-15);
    }

    #[test]
    fn energy_matches_hamiltonian_expectation() {
        let l = Lattice::new(1, 3);
        let f = fields(0.9, 0.04);
        let spec = sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(1));
        let psi = evolve_state(&l, &spec, &[0.0, 0.4], &basis_state(8, 5), 20).unwrap()[1].clone();
        let h = build_hamiltonian(&l, f).unwrap().map(c);
        let e = psi.dotc(&(h * &psi)).re;
        assert!((observables(&psi, &l, f).energy - e).abs() < 1e-12);
    }

    #[test]
    fn superposition_cases() {
        let l = Lattice::new(2, 2);
        let spec = sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(4));
        let times = grid_times(1.0, 11);
        let us = propagate(&l, &spec, &times, 10).unwrap();
        let direct = evolve_state(&l, &spec, &times, &ghz_state(&l), 10).unwrap();
        let s = c(std::f64::consts::FRAC_1_SQRT_2);
        for (u, want) in us.iter().zip(&direct) {
            let up = u.column(0).into_owned();
            let down = u.column(15).into_owned();
            let got = evolve_superposition(&[(s, up.clone()), (s, down)]).unwrap();
            assert!((got - want).camax() < 1e-10);
            assert_eq!(evolve_superposition(&[(c(1.0), up.clone())]).unwrap(), up.clone() / c(up.norm()));
            assert!(matches!(
                evolve_superposition(&[(c(1.0), up.clone()), (c(-1.0), up)]),
                Err(UnpError::DegenerateSuperposition(_))
            ));
        }
    }

    #[test]
    fn csv_layout() {
        let o = Observables { z: 1.0, x: 0.0, zz: 1.0, energy: -1.0 };
        let s = observables_csv(&[0.0, 0.5], &[o, o]);
        assert_eq!(s.lines().next(), Some("t,Z,X,ZZ,E"));
        assert_eq!(s.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn norm_is_conserved(seed in any::<u64>()) {
            let l = Lattice::new(2, 2);
            let spec = sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(seed));
            let times = grid_times(1.0, 6);
            for psi in evolve_state(&l, &spec, &times, &ghz_state(&l), 3).unwrap() {
                prop_assert!((psi.norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}
