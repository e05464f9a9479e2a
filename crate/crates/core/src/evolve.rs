//! Reading evolved states off the model and comparing them with exact
//! evolution.

use num_complex::Complex64;

use crate::fno::context_trajectory;
use crate::lattice::{Lattice, SpinConfig};
use crate::model::Layout;
use crate::oracle::{basis_state, evolve_state_converged, evolve_superposition, fidelity, ghz_state, observables, Observables, StateVector, CONVERGENCE_TOL};
use crate::protocol::{evaluate, ProtocolGrid, ProtocolSpec};
use crate::tensor::Tensor;
use crate::transformer::propagator_column;
use crate::{Result, UnpError};

/// A basis product state or the GHZ state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitialState {
    Basis(SpinConfig),
    Ghz,
}

impl InitialState {
    /// `ghz` or a bit string with one character per site.
    pub fn parse(token: &str, n_sites: usize) -> Result<Self> {
        let t = token.trim();
        if t.eq_ignore_ascii_case("ghz") {
            return Ok(Self::Ghz);
        }
        let bits = SpinConfig::parse(t).ok_or_else(|| UnpError::StateSpec(format!("'{t}' is neither 'ghz' nor a bit string")))?;
        if bits.len() != n_sites {
            return Err(UnpError::StateSpec(format!("'{t}' has {} bits, lattice has {n_sites} sites", bits.len())));
        }
        Ok(Self::Basis(bits))
    }

    pub fn label(&self) -> String {
        match self {
            Self::Basis(s) => s.to_bit_string(),
            Self::Ghz => "ghz".into(),
        }
    }

    /// Columns and coefficients whose superposition is this state.
    pub fn columns(&self, n_sites: usize) -> Vec<(Complex64, SpinConfig)> {
        match self {
            Self::Basis(s) => vec![(Complex64::new(1.0, 0.0), s.clone())],
            Self::Ghz => {
                let c = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
                vec![(c, SpinConfig::all_up(n_sites)), (c, SpinConfig::all_down(n_sites))]
            }
        }
    }

    pub fn vector(&self, lattice: &Lattice) -> StateVector {
        match self {
            Self::Basis(s) => basis_state(lattice.dim(), s.index()),
            Self::Ghz => ghz_state(lattice),
        }
    }
}

/// Model state at context `m`: normalized columns, superposed and
/// renormalized.
pub fn model_state(layout: &Layout, params: &[Tensor], m: &Tensor, init: &InitialState) -> Result<StateVector> {
    let cols = init
        .columns(layout.dims.n_sites())
        .into_iter()
        .map(|(c, beta)| Ok((c, propagator_column(layout, params, m, &beta)?)))
        .collect::<Result<Vec<_>>>()?;
    evolve_superposition(&cols)
}

/// Model states at every grid time.
pub fn model_states(layout: &Layout, params: &[Tensor], grid: &ProtocolGrid, init: &InitialState) -> Result<Vec<StateVector>> {
    let traj = context_trajectory(layout, params, grid)?;
    (0..grid.n_t()).map(|j| model_state(layout, params, &traj.m_at(j), init)).collect()
}

/// Model against exact evolution on one protocol.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub times: Vec<f64>,
    pub model: Vec<Observables>,
    pub exact: Vec<Observables>,
    pub fidelity: Vec<f64>,
}

impl Comparison {
    /// Mean over grid times of `|model - exact|` for `Z`, `X`, `ZZ` or `E`.
    pub fn mae(&self, name: &str) -> f64 {
        let n = self.times.len() as f64;
        self.model.iter().zip(&self.exact).map(|(a, b)| (a.get(name).expect("observable") - b.get(name).expect("observable")).abs()).sum::<f64>() / n
    }

    pub fn min_fidelity(&self) -> f64 {
        self.fidelity.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Rows `t,fidelity,Z,X,ZZ,E,Z_exact,X_exact,ZZ_exact,E_exact`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,fidelity,Z,X,ZZ,E,Z_exact,X_exact,ZZ_exact,E_exact\n");
        for j in 0..self.times.len() {
            let (m, e) = (&self.model[j], &self.exact[j]);
            s += &format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                self.times[j], self.fidelity[j], m.z, m.x, m.zz, m.energy, e.z, e.x, e.zz, e.energy
            );
        }
        s
    }
}

/// Exact states at the grid times, integrating the continuous drive.
pub fn exact_states(lattice: &Lattice, spec: &ProtocolSpec, times: &[f64], init: &InitialState) -> Result<Vec<StateVector>> {
    Ok(evolve_state_converged(lattice, spec, times, &init.vector(lattice), CONVERGENCE_TOL)?.0)
}

pub fn compare(layout: &Layout, params: &[Tensor], spec: &ProtocolSpec, init: &InitialState) -> Result<Comparison> {
    let d = &layout.dims;
    let lattice = Lattice::new(d.lx, d.ly);
    let grid = evaluate(spec, d.t_total, d.n_t)?;
    let model = model_states(layout, params, &grid, init)?;
    let exact = exact_states(&lattice, spec, &grid.times, init)?;
    let obs = |psi: &StateVector, j: usize| observables(psi, &lattice, grid.fields(j));
    Ok(Comparison {
        model: model.iter().enumerate().map(|(j, p)| obs(p, j)).collect(),
        exact: exact.iter().enumerate().map(|(j, p)| obs(p, j)).collect(),
        fidelity: model.iter().zip(&exact).map(|(a, b)| fidelity(a, b)).collect(),
        times: grid.times,
    })
}
