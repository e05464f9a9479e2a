//! Browser bindings: protocol curves, exact evolution of small lattices, and
//! evolution with a trained checkpoint loaded from bytes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use unp::checkpoint::from_bytes;
use unp::evolve::{compare, exact_states, InitialState};
use unp::lattice::Lattice;
use unp::oracle::{observables, Observables};
use unp::protocol::{evaluate, sample_training_protocol, ProtocolSpec};
use unp::training::TrainState;

/// Exact evolution is dense in `2^N`; keep the page responsive.
const MAX_WEB_SITES: usize = 9;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Protocol text for one of the three families. `seed` only affects
/// `fourier`; the pulse shapes use the built-in out-of-distribution shapes.
#[wasm_bindgen]
pub fn protocol_text(kind: &str, seed: u64, t_total: f64) -> Result<String, JsError> {
    let spec = match kind {
        "fourier" => sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(seed)),
        "tanh_ramp" => ProtocolSpec::tanh_ramp(0.7, 0.6, 0.5 * t_total, 0.1 * t_total),
        "gaussian_pulse" => ProtocolSpec::gaussian_pulse(0.8, 0.5, 0.5 * t_total, 0.1 * t_total),
        other => return Err(js_err(format!("unknown protocol kind `{other}`"))),
    };
    Ok(spec.serialize())
}

/// Time series returned to the page. Model columns are empty when only the
/// exact evolution was run.
#[wasm_bindgen]
pub struct Series {
    times: Vec<f64>,
    hx: Vec<f64>,
    hz: Vec<f64>,
    exact: Vec<Observables>,
    model: Vec<Observables>,
    fidelity: Vec<f64>,
}

fn column(obs: &[Observables], name: &str) -> Vec<f64> {
    obs.iter().map(|o| o.get(name).unwrap_or(f64::NAN)).collect()
}

#[wasm_bindgen]
impl Series {
    pub fn times(&self) -> Vec<f64> {
        self.times.clone()
    }

    pub fn hx(&self) -> Vec<f64> {
        self.hx.clone()
    }

    pub fn hz(&self) -> Vec<f64> {
        self.hz.clone()
    }

    /// `Z`, `X`, `ZZ` or `E` from exact evolution.
    pub fn exact(&self, name: &str) -> Vec<f64> {
        column(&self.exact, name)
    }

    /// Same observables from the model; empty without a checkpoint.
    pub fn model(&self, name: &str) -> Vec<f64> {
        column(&self.model, name)
    }

    pub fn fidelity(&self) -> Vec<f64> {
        self.fidelity.clone()
    }
}

/// Drive and exact observables on an `lx` by `ly` lattice.
#[wasm_bindgen]
pub fn exact_evolution(lx: usize, ly: usize, protocol: &str, state: &str, t_total: f64, n_t: usize) -> Result<Series, JsError> {
    if lx == 0 || ly == 0 || lx * ly > MAX_WEB_SITES {
        return Err(js_err(format!("lattice must have 1 to {MAX_WEB_SITES} sites")));
    }
    let lattice = Lattice::new(lx, ly);
    let spec = ProtocolSpec::parse(protocol).map_err(js_err)?;
    let init = InitialState::parse(state, lattice.n_sites()).map_err(js_err)?;
    let grid = evaluate(&spec, t_total, n_t).map_err(js_err)?;
    let psi = exact_states(&lattice, &spec, &grid.times, &init).map_err(js_err)?;
    let exact = psi.iter().enumerate().map(|(j, p)| observables(p, &lattice, grid.fields(j))).collect();
    Ok(Series { hx: grid.hx.clone(), hz: grid.hz.clone(), times: grid.times, exact, model: Vec::new(), fidelity: Vec::new() })
}

/// A checkpoint held by the page between calls.
#[wasm_bindgen]
pub struct Model {
    state: TrainState,
}

#[wasm_bindgen]
impl Model {
    #[wasm_bindgen(constructor)]
    pub fn new(bytes: &[u8]) -> Result<Model, JsError> {
        let state = from_bytes(bytes).map_err(js_err)?;
        if state.config.dims.n_sites() > MAX_WEB_SITES {
            return Err(js_err(format!("checkpoint lattice has more than {MAX_WEB_SITES} sites")));
        }
        Ok(Model { state })
    }

    pub fn summary(&self) -> String {
        let d = &self.state.config.dims;
        format!("{}x{} lattice, d_e = {}, {} grid times over T = {}, trained {} steps", d.lx, d.ly, d.d_e, d.n_t, d.t_total, self.state.step)
    }

    /// Model and exact observables plus fidelity for a bit string or `ghz`.
    pub fn evolve(&self, protocol: &str, state: &str) -> Result<Series, JsError> {
        let d = &self.state.config.dims;
        let spec = ProtocolSpec::parse(protocol).map_err(js_err)?;
        let init = InitialState::parse(state, d.n_sites()).map_err(js_err)?;
        let grid = evaluate(&spec, d.t_total, d.n_t).map_err(js_err)?;
        let c = compare(&self.state.layout, &self.state.params, &spec, &init).map_err(js_err)?;
        Ok(Series { times: c.times, hx: grid.hx.clone(), hz: grid.hz.clone(), exact: c.exact, model: c.model, fidelity: c.fidelity })
    }
}
