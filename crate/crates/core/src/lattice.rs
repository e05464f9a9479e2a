//! Square lattice geometry, the driven Ising Hamiltonian, and the doubled
//! token codec.
//!
//! Sites are addressed by their position in the snake (zigzag) ordering used
//! for the transformer sequence: row-major, with every odd row reversed.
//! Bit convention: bit 0 is `Z = +1` (spin up), bit 1 is `Z = -1`.

use num_complex::Complex64;

use crate::{Result, UnpError};

/// Nearest-neighbour Ising coupling; all fields are in units of `J`.
pub const COUPLING_J: f64 = 1.0;

/// Amplitudes smaller than this mark a dead configuration.
pub const DEAD_AMPLITUDE: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lattice {
    lx: usize,
    ly: usize,
    /// `snake[p] = (x, y)` for sequence position `p`.
    snake: Vec<(usize, usize)>,
    /// Nearest-neighbour pairs, as sequence positions, open boundaries.
    bonds: Vec<(usize, usize)>,
}

impl Lattice {
    pub fn new(lx: usize, ly: usize) -> Self {
        assert!(lx >= 1 && ly >= 1, "lattice needs at least one site per axis");
        let snake: Vec<(usize, usize)> = (0..lx * ly)
            .map(|p| {
                let y = p / lx;
                let q = p % lx;
                let x = if y % 2 == 0 { q } else { lx - 1 - q };
                (x, y)
            })
            .collect();
        let mut position = vec![0usize; lx * ly];
        for (p, &(x, y)) in snake.iter().enumerate() {
            position[y * lx + x] = p;
        }
        let mut bonds = Vec::new();
        for y in 0..ly {
            for x in 0..lx {
                if x + 1 < lx {
                    bonds.push((position[y * lx + x], position[y * lx + x + 1]));
                }
                if y + 1 < ly {
                    bonds.push((position[y * lx + x], position[(y + 1) * lx + x]));
                }
            }
        }
        Self { lx, ly, snake, bonds }
    }

    pub fn lx(&self) -> usize {
        self.lx
    }

    pub fn ly(&self) -> usize {
        self.ly
    }

    pub fn n_sites(&self) -> usize {
        self.lx * self.ly
    }

    pub fn n_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn bonds(&self) -> &[(usize, usize)] {
        &self.bonds
    }

    /// Lattice coordinates of sequence position `p`.
    pub fn coords(&self, p: usize) -> (usize, usize) {
        self.snake[p]
    }

    /// Hilbert-space dimension `2^N`.
    pub fn dim(&self) -> usize {
        1usize << self.n_sites()
    }
}

/// Basis string over snake-ordered sites.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinConfig(pub Vec<u8>);

impl SpinConfig {
    pub fn all_up(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn all_down(n: usize) -> Self {
        Self(vec![1; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Dense-basis index; sequence position 0 is the most significant bit.
    pub fn index(&self) -> usize {
        self.0.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
    }

    pub fn from_index(index: usize, n: usize) -> Self {
        Self((0..n).map(|p| ((index >> (n - 1 - p)) & 1) as u8).collect())
    }

    /// Parse a string of `0`/`1` characters.
    pub fn parse(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Some(0),
                '1' => Some(1),
                _ => None,
            })
            .collect::<Option<Vec<u8>>>()
            .map(Self)
    }

    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect()
    }

    pub fn z(&self, p: usize) -> f64 {
        if self.0[p] == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn flipped(&self, p: usize) -> Self {
        let mut c = self.clone();
        c.0[p] ^= 1;
        c
    }
}

/// Doubled-space configuration: token `2 * alpha_i + beta_i` per site.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DoubledConfig(pub Vec<u8>);

impl DoubledConfig {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Flip the output bit at `p`, keeping the input bit.
    pub fn flip_output(&self, p: usize) -> Self {
        let mut c = self.clone();
        c.0[p] ^= 2;
        c
    }

    /// Index in `0..4^N`, first site most significant.
    pub fn index(&self) -> usize {
        self.0.iter().fold(0, |acc, &t| (acc << 2) | t as usize)
    }

    pub fn from_index(index: usize, n: usize) -> Self {
        Self((0..n).map(|p| ((index >> (2 * (n - 1 - p))) & 3) as u8).collect())
    }
}

pub fn encode_doubled(alpha: &SpinConfig, beta: &SpinConfig) -> DoubledConfig {
    assert_eq!(alpha.len(), beta.len(), "output and input strings differ in length");
    DoubledConfig(alpha.0.iter().zip(&beta.0).map(|(&a, &b)| 2 * a + b).collect())
}

pub fn decode_doubled(sigma: &DoubledConfig) -> (SpinConfig, SpinConfig) {
    assert!(sigma.0.iter().all(|&t| t < 4), "doubled token out of range");
    (
        SpinConfig(sigma.0.iter().map(|&t| t >> 1).collect()),
        SpinConfig(sigma.0.iter().map(|&t| t & 1).collect()),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldsAtTime {
    pub hx: f64,
    pub hz: f64,
}

/// `-J sum_<ij> z_i z_j - h_z sum_i z_i`.
pub fn diagonal_energy(lattice: &Lattice, alpha: &SpinConfig, f: FieldsAtTime) -> f64 {
    assert_eq!(alpha.len(), lattice.n_sites(), "configuration length does not match lattice");
    let zz: f64 = lattice.bonds().iter().map(|&(i, j)| alpha.z(i) * alpha.z(j)).sum();
    let z: f64 = (0..alpha.len()).map(|p| alpha.z(p)).sum();
    -COUPLING_J * zz - f.hz * z
}

/// Single spin flips produced by `-h_x sum_i X_i`, one per site.
pub fn offdiagonal_connections(alpha: &SpinConfig, f: FieldsAtTime) -> Vec<(SpinConfig, f64)> {
    (0..alpha.len()).map(|p| (alpha.flipped(p), -f.hx)).collect()
}

/// Local energy of `H` acting on the output index of a propagator entry:
/// `E_loc(sigma) = sum_alpha' H_{alpha alpha'} U(alpha', beta) / U(alpha, beta)`.
pub fn doubled_local_energy(
    lattice: &Lattice,
    sigma: &DoubledConfig,
    f: FieldsAtTime,
    amp: impl Fn(&DoubledConfig) -> Complex64,
) -> Result<Complex64> {
    let (alpha, _) = decode_doubled(sigma);
    let here = amp(sigma);
    if here.norm() < DEAD_AMPLITUDE {
        return Err(UnpError::DegenerateAmplitude(sigma.0.clone()));
    }
    let mut e = Complex64::new(diagonal_energy(lattice, &alpha, f), 0.0);
    for p in 0..sigma.len() {
        e += -f.hx * amp(&sigma.flip_output(p)) / here;
    }
    Ok(e)
}

/// Bond-summed `z_i z_j` for a basis string.
pub fn bond_zz(lattice: &Lattice, alpha: &SpinConfig) -> f64 {
    lattice.bonds().iter().map(|&(i, j)| alpha.z(i) * alpha.z(j)).sum()
}

pub fn total_z(alpha: &SpinConfig) -> f64 {
    (0..alpha.len()).map(|p| alpha.z(p)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_table() {
        let t = encode_doubled(&SpinConfig(vec![0, 0, 1, 1]), &SpinConfig(vec![0, 1, 0, 1]));
        assert_eq!(t.0, vec![0, 1, 2, 3]);
    }

    #[test]
    fn codec_roundtrip_all_pairs_n3() {
        for a in 0..8 {
            for b in 0..8 {
                let alpha = SpinConfig::from_index(a, 3);
                let beta = SpinConfig::from_index(b, 3);
                let (x, y) = decode_doubled(&encode_doubled(&alpha, &beta));
                assert_eq!((x, y), (alpha, beta));
            }
        }
    }

    #[test]
    fn xor_two_flips_output_bit_only() {
        for t in 0u8..4 {
            let s = DoubledConfig(vec![t]);
            let (a, b) = decode_doubled(&s);
            let (a2, b2) = decode_doubled(&s.flip_output(0));
            assert_eq!(b, b2);
            assert_eq!(a2.0[0], a.0[0] ^ 1);
        }
    }

    #[test]
    #[should_panic]
    fn codec_rejects_length_mismatch() {
        encode_doubled(&SpinConfig(vec![0, 1]), &SpinConfig(vec![0]));
    }

    #[test]
    fn bond_counts() {
        for (lx, ly) in [(1, 1), (1, 2), (2, 2), (3, 2), (4, 4), (6, 6)] {
            let l = Lattice::new(lx, ly);
            assert_eq!(l.n_bonds(), lx * (ly - 1) + ly * (lx - 1));
        }
    }

    #[test]
    fn snake_is_bijective_and_adjacent() {
        for (lx, ly) in [(2, 2), (3, 4), (4, 4), (5, 3)] {
            let l = Lattice::new(lx, ly);
            let mut seen = std::collections::HashSet::new();
            for p in 0..l.n_sites() {
                assert!(seen.insert(l.coords(p)));
            }
            for p in 1..l.n_sites() {
                let (x0, y0) = l.coords(p - 1);
                let (x1, y1) = l.coords(p);
                assert_eq!(x0.abs_diff(x1) + y0.abs_diff(y1), 1);
            }
        }
    }

    #[test]
    fn diagonal_energy_examples() {
        let f0 = FieldsAtTime { hx: 0.0, hz: 0.0 };
        assert_eq!(diagonal_energy(&Lattice::new(2, 2), &SpinConfig::all_up(4), f0), -4.0);
        let f1 = FieldsAtTime { hx: 0.0, hz: 1.0 };
        assert_eq!(diagonal_energy(&Lattice::new(1, 2), &SpinConfig::all_up(2), f1), -3.0);
    }

    #[test]
    fn connections() {
        let c = offdiagonal_connections(&SpinConfig(vec![0]), FieldsAtTime { hx: 1.0, hz: 0.0 });
        assert_eq!(c, vec![(SpinConfig(vec![1]), -1.0)]);
        let c = offdiagonal_connections(&SpinConfig(vec![0, 1, 0, 0]), FieldsAtTime { hx: 0.0, hz: 0.3 });
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|(_, w)| *w == 0.0));
    }

    #[test]
    fn single_spin_local_energy() {
        let l = Lattice::new(1, 1);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let ident = move |sig: &DoubledConfig| {
            let (a, b) = decode_doubled(sig);
            Complex64::new(if a == b { s } else { 0.0 }, 0.0)
        };
        let e = doubled_local_energy(&l, &DoubledConfig(vec![0]), FieldsAtTime { hx: 1.0, hz: 0.0 }, ident).unwrap();
        assert!(e.norm() < 1e-15);
        let e = doubled_local_energy(&l, &DoubledConfig(vec![0]), FieldsAtTime { hx: 0.0, hz: 1.0 }, ident).unwrap();
        assert!((e - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn dead_configuration_is_an_error() {
        let l = Lattice::new(1, 1);
        let r = doubled_local_energy(&l, &DoubledConfig(vec![2]), FieldsAtTime { hx: 1.0, hz: 0.0 }, |_| Complex64::new(0.0, 0.0));
        assert!(matches!(r, Err(UnpError::DegenerateAmplitude(_))));
    }

    #[test]
    fn bit_strings() {
        let c = SpinConfig::parse("0110").unwrap();
        assert_eq!(c.index(), 6);
        assert_eq!(SpinConfig::from_index(6, 4), c);
        assert_eq!(c.to_bit_string(), "0110");
        assert!(SpinConfig::parse("01x").is_none());
    }
}
