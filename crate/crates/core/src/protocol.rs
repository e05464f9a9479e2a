//! Driving protocols `h_x(t)`, `h_z(t)`.
//!
//! Training protocols are random damped Fourier series; the tanh ramp and
//! Gaussian pulse families are held out for out-of-distribution tests.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;

use crate::config::parse_kv;
use crate::lattice::FieldsAtTime;
use crate::{Result, UnpError};

pub const N_HARMONICS: usize = 10;
pub const OMEGA0: f64 = 10.0;
pub const HX0_RANGE: (f64, f64) = (0.95, 1.05);
pub const AX_RANGE: (f64, f64) = (-0.50, 0.50);
pub const HZ0_RANGE: (f64, f64) = (-0.05, 0.05);
pub const AZ_RANGE: (f64, f64) = (-0.05, 0.05);

#[derive(Clone, Debug, PartialEq)]
pub struct FourierProtocol {
    pub hx0: f64,
    pub hz0: f64,
    pub ax: Vec<f64>,
    pub phix: Vec<f64>,
    pub az: Vec<f64>,
    pub phiz: Vec<f64>,
    pub omega0: f64,
}

impl FourierProtocol {
    /// Harmonic `m` (1-based) is damped by `m^(-3/2)`.
    fn series(offset: f64, amps: &[f64], phases: &[f64], omega0: f64, t: f64) -> f64 {
        offset
            + amps
                .iter()
                .zip(phases)
                .enumerate()
                .map(|(i, (a, ph))| {
                    let m = (i + 1) as f64;
                    a * m.powf(-1.5) * (m * omega0 * t + ph).sin()
                })
                .sum::<f64>()
    }
}

/// Shape of the held-out protocols; the profile drives `h_x` while `h_z`
/// stays at the constant `hz`.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseShape {
    pub baseline: f64,
    pub height: f64,
    pub center: f64,
    pub width: f64,
    pub hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolSpec {
    Fourier(FourierProtocol),
    /// `baseline + height * (1 + tanh((t - center) / width)) / 2`
    TanhRamp(PulseShape),
    /// `baseline + height * exp(-(t - center)^2 / (2 width^2))`
    GaussianPulse(PulseShape),
}

impl ProtocolSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolSpec::Fourier(_) => "fourier",
            ProtocolSpec::TanhRamp(_) => "tanh_ramp",
            ProtocolSpec::GaussianPulse(_) => "gaussian_pulse",
        }
    }

    pub fn fields(&self, t: f64) -> FieldsAtTime {
        match self {
            ProtocolSpec::Fourier(p) => FieldsAtTime {
                hx: FourierProtocol::series(p.hx0, &p.ax, &p.phix, p.omega0, t),
                hz: FourierProtocol::series(p.hz0, &p.az, &p.phiz, p.omega0, t),
            },
            ProtocolSpec::TanhRamp(s) => FieldsAtTime {
                hx: s.baseline + s.height * 0.5 * (1.0 + ((t - s.center) / s.width).tanh()),
                hz: s.hz,
            },
            ProtocolSpec::GaussianPulse(s) => FieldsAtTime {
                hx: s.baseline + s.height * (-(t - s.center).powi(2) / (2.0 * s.width * s.width)).exp(),
                hz: s.hz,
            },
        }
    }

    pub fn tanh_ramp(baseline: f64, height: f64, center: f64, width: f64) -> Self {
        ProtocolSpec::TanhRamp(PulseShape { baseline, height, center, width, hz: 0.0 })
    }

    pub fn gaussian_pulse(baseline: f64, height: f64, center: f64, width: f64) -> Self {
        ProtocolSpec::GaussianPulse(PulseShape { baseline, height, center, width, hz: 0.0 })
    }

    /// Key-value text; `parse(serialize(s)) == s` exactly.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "kind = {}", self.kind());
        match self {
            ProtocolSpec::Fourier(p) => {
                let _ = writeln!(out, "omega0 = {}", p.omega0);
                let _ = writeln!(out, "hx0 = {}", p.hx0);
                let _ = writeln!(out, "hz0 = {}", p.hz0);
                let _ = writeln!(out, "ax = {}", join(&p.ax));
                let _ = writeln!(out, "phix = {}", join(&p.phix));
                let _ = writeln!(out, "az = {}", join(&p.az));
                let _ = writeln!(out, "phiz = {}", join(&p.phiz));
            }
            ProtocolSpec::TanhRamp(s) | ProtocolSpec::GaussianPulse(s) => {
                let _ = writeln!(out, "baseline = {}", s.baseline);
                let _ = writeln!(out, "height = {}", s.height);
                let _ = writeln!(out, "center = {}", s.center);
                let _ = writeln!(out, "width = {}", s.width);
                let _ = writeln!(out, "hz = {}", s.hz);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines = parse_kv(text)?;
        let kind_line = lines.iter().find(|l| l.key == "kind").ok_or(UnpError::Parse {
            line: lines.last().map_or(1, |l| l.line),
            msg: "missing `kind`".into(),
        })?;
        let allowed: &[&str] = match kind_line.value.as_str() {
            "fourier" => &["kind", "omega0", "hx0", "hz0", "ax", "phix", "az", "phiz"],
            "tanh_ramp" | "gaussian_pulse" => &["kind", "baseline", "height", "center", "width", "hz"],
            other => {
                return Err(UnpError::Parse {
                    line: kind_line.line,
                    msg: format!("unknown protocol kind `{other}`"),
                })
            }
        };
        let mut seen = std::collections::HashSet::new();
        for l in &lines {
            if !allowed.contains(&l.key.as_str()) {
                return Err(UnpError::Parse { line: l.line, msg: format!("unknown key `{}`", l.key) });
            }
            if !seen.insert(l.key.as_str()) {
                return Err(UnpError::Parse { line: l.line, msg: format!("duplicate key `{}`", l.key) });
            }
        }
        let get = |key: &str| lines.iter().find(|l| l.key == key);
        let last_line = lines.last().map_or(1, |l| l.line);
        let scalar = |key: &str, default: Option<f64>| -> Result<f64> {
            match get(key) {
                Some(l) => l.as_f64(),
                None => default.ok_or(UnpError::Parse { line: last_line, msg: format!("missing `{key}`") }),
            }
        };
        let list = |key: &str| -> Result<Vec<f64>> {
            match get(key) {
                Some(l) => l.as_f64_list(),
                None => Err(UnpError::Parse { line: last_line, msg: format!("missing `{key}`") }),
            }
        };
        let spec = match kind_line.value.as_str() {
            "fourier" => {
                let p = FourierProtocol {
                    hx0: scalar("hx0", None)?,
                    hz0: scalar("hz0", None)?,
                    ax: list("ax")?,
                    phix: list("phix")?,
                    az: list("az")?,
                    phiz: list("phiz")?,
                    omega0: scalar("omega0", Some(OMEGA0))?,
                };
                if p.ax.len() != p.phix.len() || p.az.len() != p.phiz.len() {
                    return Err(UnpError::Parse {
                        line: last_line,
                        msg: "amplitude and phase lists differ in length".into(),
                    });
                }
                ProtocolSpec::Fourier(p)
            }
            kind => {
                let s = PulseShape {
                    baseline: scalar("baseline", None)?,
                    height: scalar("height", None)?,
                    center: scalar("center", None)?,
                    width: scalar("width", None)?,
                    hz: scalar("hz", Some(0.0))?,
                };
                if kind == "tanh_ramp" {
                    ProtocolSpec::TanhRamp(s)
                } else {
                    ProtocolSpec::GaussianPulse(s)
                }
            }
        };
        Ok(spec)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Draw one protocol from the training ensemble.
pub fn sample_training_protocol<R: Rng + ?Sized>(rng: &mut R) -> ProtocolSpec {
    let mut draw = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
    let hx0 = draw(HX0_RANGE);
    let ax: Vec<f64> = (0..N_HARMONICS).map(|_| draw(AX_RANGE)).collect();
    let phix: Vec<f64> = (0..N_HARMONICS).map(|_| draw((0.0, 2.0 * PI))).map(|p| p % (2.0 * PI)).collect();
    let hz0 = draw(HZ0_RANGE);
    let az: Vec<f64> = (0..N_HARMONICS).map(|_| draw(AZ_RANGE)).collect();
    let phiz: Vec<f64> = (0..N_HARMONICS).map(|_| draw((0.0, 2.0 * PI))).map(|p| p % (2.0 * PI)).collect();
    ProtocolSpec::Fourier(FourierProtocol { hx0, hz0, ax, phix, az, phiz, omega0: OMEGA0 })
}

/// Anything that yields the fields at an arbitrary time.
pub trait Drive {
    fn fields_at(&self, t: f64) -> FieldsAtTime;
}

impl Drive for ProtocolSpec {
    fn fields_at(&self, t: f64) -> FieldsAtTime {
        self.fields(t)
    }
}

/// Time-independent fields.
impl Drive for FieldsAtTime {
    fn fields_at(&self, _t: f64) -> FieldsAtTime {
        *self
    }
}

/// Fields sampled on `t_j = j T / (N_T - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolGrid {
    pub t_total: f64,
    pub times: Vec<f64>,
    pub hx: Vec<f64>,
    pub hz: Vec<f64>,
}

impl ProtocolGrid {
    pub fn n_t(&self) -> usize {
        self.times.len()
    }

    pub fn dt(&self) -> f64 {
        self.t_total / (self.n_t() - 1) as f64
    }

    pub fn fields(&self, j: usize) -> FieldsAtTime {
        FieldsAtTime { hx: self.hx[j], hz: self.hz[j] }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,h_x,h_z\n");
        for j in 0..self.n_t() {
            let _ = writeln!(out, "{},{},{}", self.times[j], self.hx[j], self.hz[j]);
        }
        out
    }
}

pub fn grid_times(t_total: f64, n_t: usize) -> Vec<f64> {
    (0..n_t).map(|j| j as f64 * t_total / (n_t - 1) as f64).collect()
}

pub fn evaluate(spec: &ProtocolSpec, t_total: f64, n_t: usize) -> Result<ProtocolGrid> {
    if n_t < 3 || n_t % 2 == 0 {
        return Err(UnpError::Config(format!("time grid needs an odd point count >= 3, got {n_t}")));
    }
    if !(t_total > 0.0) {
        return Err(UnpError::Config(format!("evolution window must be positive, got {t_total}")));
    }
    let times = grid_times(t_total, n_t);
    let (hx, hz) = times.iter().map(|&t| spec.fields(t)).map(|f| (f.hx, f.hz)).unzip();
    Ok(ProtocolGrid { t_total, times, hx, hz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fourier(p: &ProtocolSpec) -> &FourierProtocol {
        match p {
            ProtocolSpec::Fourier(f) => f,
            _ => unreachable!(),
        }
    }

    #[test]
    fn training_ensemble_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..n {
            let s = sample_training_protocol(&mut rng);
            let f = fourier(&s);
            sum += f.hx0;
            lo = lo.min(f.hx0);
            hi = hi.max(f.hx0);
            assert!(f.az.iter().all(|a| a.abs() <= 0.05));
            assert!(f.hz0.abs() <= 0.05);
            assert!(f.ax.iter().all(|a| a.abs() <= 0.5));
            assert!(f.phix.iter().chain(&f.phiz).all(|p| (0.0..2.0 * PI).contains(p)));
            assert_eq!(f.ax.len(), N_HARMONICS);
            assert_eq!(f.omega0, 10.0);
        }
        assert!(lo >= 0.95 && hi <= 1.05);
        assert!((sum / n as f64 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_amplitudes_give_constant_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = sample_training_protocol(&mut rng);
        if let ProtocolSpec::Fourier(f) = &mut s {
            f.ax.iter_mut().for_each(|a| *a = 0.0);
        }
        let g = evaluate(&s, 1.0, 21).unwrap();
        let hx0 = fourier(&s).hx0;
        assert!(g.hx.iter().all(|&h| h == hx0));
    }

    #[test]
    fn single_mode_closed_form() {
        let s = ProtocolSpec::Fourier(FourierProtocol {
            hx0: 0.0,
            hz0: 0.0,
            ax: vec![1.0],
            phix: vec![0.0],
            az: vec![],
            phiz: vec![],
            omega0: 10.0,
        });
        let g = evaluate(&s, 1.0, 201).unwrap();
        for j in 0..201 {
            assert!((g.hx[j] - (10.0 * g.times[j]).sin()).abs() < 1e-15);
            assert_eq!(g.hz[j], 0.0);
        }
    }

    #[test]
    fn pulse_and_ramp_closed_forms() {
        let t = 1.0;
        let g = evaluate(&ProtocolSpec::gaussian_pulse(1.0, 0.5, t / 2.0, t / 10.0), t, 201).unwrap();
        assert!((g.hx[100] - 1.5).abs() < 1e-15);
        assert!(g.hx.iter().all(|&h| h <= 1.5));
        let s = ProtocolSpec::tanh_ramp(0.8, 0.4, 0.3, 0.1);
        assert!((s.fields(0.3).hx - 1.0).abs() < 1e-15);
    }

    #[test]
    fn even_grid_is_rejected() {
        let s = ProtocolSpec::tanh_ramp(0.8, 0.4, 0.3, 0.1);
        assert!(evaluate(&s, 1.0, 200).is_err());
        assert!(evaluate(&s, 1.0, 1).is_err());
    }

    #[test]
    fn parse_errors() {
        let e = ProtocolSpec::parse("baseline = 1\nheight = 2\n").unwrap_err();
        assert!(matches!(e, UnpError::Parse { .. }), "{e}");
        assert!(e.to_string().contains("kind"));
        let e = ProtocolSpec::parse("kind = tanh_ramp\nbaseline = 1\nheight = 2\ncenter = 0.5\nwidth = 0.1\nbogus = 3\n")
            .unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        assert!(e.to_string().contains("line 6"), "{e}");
        let e = ProtocolSpec::parse("kind = sawtooth\n").unwrap_err();
        assert!(e.to_string().contains("sawtooth"));
    }

    #[test]
    fn csv_has_one_row_per_grid_point() {
        let g = evaluate(&ProtocolSpec::tanh_ramp(0.8, 0.4, 0.3, 0.1), 1.0, 11).unwrap();
        assert_eq!(g.to_csv().lines().count(), 12);
    }

    proptest! {
        #[test]
        fn serialize_roundtrip(seed in any::<u64>(), which in 0u8..3, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = match which {
                0 => sample_training_protocol(&mut rng),
                1 => ProtocolSpec::TanhRamp(PulseShape { baseline: a, height: b, center: a * b, width: 0.1 + b.abs(), hz: a / 7.0 }),
                _ => ProtocolSpec::gaussian_pulse(a, b, 0.5, 0.2),
            };
            prop_assert_eq!(ProtocolSpec::parse(&spec.serialize()).unwrap(), spec);
        }

        #[test]
        fn evaluate_is_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = sample_training_protocol(&mut rng);
            prop_assert_eq!(evaluate(&spec, 1.0, 51).unwrap(), evaluate(&spec, 1.0, 51).unwrap());
        }
    }
}
