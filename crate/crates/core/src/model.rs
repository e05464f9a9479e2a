//! Parameter layout shared by the FNO, the transformer, and the initial
//! context tokens.
//!
//! Parameters live in one flat list, in the fixed order given by
//! [`Layout`]; the index structs name the slots each forward pass reads.
//! Names are dotted paths (`fno.layer0.r_re`, `tf.block1.ff1_w`, `m0`) and
//! are what checkpoints store.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::config::{hex, ModelDims};
use crate::tensor::{Graph, Tensor, Var};

/// Embedding rows: the four doubled tokens plus the start token.
pub const N_EMBED_ROWS: usize = 5;
pub const START_TOKEN: usize = 4;

#[derive(Clone, Debug)]
pub struct FnoLayerIdx {
    pub r_re: usize,
    pub r_im: usize,
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub struct FnoIdx {
    pub lift_w: usize,
    pub lift_b: usize,
    pub layers: Vec<FnoLayerIdx>,
    pub proj_w: usize,
    pub proj_b: usize,
}

#[derive(Clone, Debug)]
pub struct BlockIdx {
    /// Fused `[W_Q | W_K | W_V]`, `(d_e, 3 d_e)`; head `h` owns columns
    /// `h d_h .. (h + 1) d_h` of each third.
    pub sa_qkv: usize,
    pub sa_out_w: usize,
    pub sa_out_b: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ca_q: usize,
    /// Fused `[W_K | W_V]` applied to the context tokens.
    pub ca_kv: usize,
    pub ca_out_w: usize,
    pub ca_out_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
    pub ln3_g: usize,
    pub ln3_b: usize,
}

#[derive(Clone, Debug)]
pub struct TransformerIdx {
    pub embed: usize,
    pub pos: usize,
    pub blocks: Vec<BlockIdx>,
    pub logit_w: usize,
    pub logit_b: usize,
    pub phase_w: usize,
    pub phase_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// `N(0, scale^2 / fan_in)`.
    Linear { fan_in: usize, scale: f64 },
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub dims: ModelDims,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    pub fno: FnoIdx,
    pub tf: TransformerIdx,
    pub m0: usize,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, name: &str, fan_in: usize, fan_out: usize) -> usize {
        self.add(format!("{prefix}.{name}"), &[fan_in, fan_out], Init::Linear { fan_in, scale: 1.0 })
    }

    fn bias(&mut self, prefix: &str, name: &str, n: usize) -> usize {
        self.add(format!("{prefix}.{name}"), &[n], Init::Zeros)
    }
}

impl Layout {
    pub fn new(dims: &ModelDims) -> Self {
        let mut b = Builder { names: Vec::new(), shapes: Vec::new(), inits: Vec::new() };
        let (d_e, w) = (dims.d_e, dims.d_fno);

        let fno = {
            let p = "fno";
            let lift_w = b.linear(p, "lift_w", 3, w);
            let lift_b = b.bias(p, "lift_b", w);
            let layers = (0..dims.n_fno)
                .map(|i| {
                    let p = format!("fno.layer{i}");
                    // Spectral kernel sized like a linear map per mode, split
                    // evenly between real and imaginary parts.
                    let spec = Init::Linear { fan_in: 2 * w, scale: 1.0 };
                    FnoLayerIdx {
                        r_re: b.add(format!("{p}.r_re"), &[dims.k_max * w, w], spec),
                        r_im: b.add(format!("{p}.r_im"), &[dims.k_max * w, w], spec),
                        w: b.linear(&p, "w", w, w),
                        b: b.bias(&p, "b", w),
                    }
                })
                .collect();
            let proj_w = b.linear(p, "proj_w", w, dims.n_c * d_e);
            let proj_b = b.bias(p, "proj_b", dims.n_c * d_e);
            FnoIdx { lift_w, lift_b, layers, proj_w, proj_b }
        };

        let tf = {
            let p = "tf";
            let embed = b.add("tf.embed".into(), &[N_EMBED_ROWS, d_e], Init::Normal(1.0));
            let pos = b.add("tf.pos".into(), &[dims.n_sites(), d_e], Init::Normal(0.5));
            let blocks = (0..dims.n_trans)
                .map(|i| {
                    let p = format!("tf.block{i}");
                    let ln = |b: &mut Builder, name: &str| {
                        (
                            b.add(format!("{p}.{name}_g"), &[d_e], Init::Ones),
                            b.add(format!("{p}.{name}_b"), &[d_e], Init::Zeros),
                        )
                    };
                    let sa_qkv = b.linear(&p, "sa_qkv", d_e, 3 * d_e);
                    let sa_out_w = b.linear(&p, "sa_out_w", d_e, d_e);
                    let sa_out_b = b.bias(&p, "sa_out_b", d_e);
                    let (ln1_g, ln1_b) = ln(&mut b, "ln1");
                    let ca_q = b.linear(&p, "ca_q", d_e, d_e);
                    let ca_kv = b.linear(&p, "ca_kv", d_e, 2 * d_e);
                    let ca_out_w = b.linear(&p, "ca_out_w", d_e, d_e);
                    let ca_out_b = b.bias(&p, "ca_out_b", d_e);
                    let (ln2_g, ln2_b) = ln(&mut b, "ln2");
                    let ff1_w = b.linear(&p, "ff1_w", d_e, dims.d_f);
                    let ff1_b = b.bias(&p, "ff1_b", dims.d_f);
                    let ff2_w = b.linear(&p, "ff2_w", dims.d_f, d_e);
                    let ff2_b = b.bias(&p, "ff2_b", d_e);
                    let (ln3_g, ln3_b) = ln(&mut b, "ln3");
                    BlockIdx {
                        sa_qkv,
                        sa_out_w,
                        sa_out_b,
                        ln1_g,
                        ln1_b,
                        ca_q,
                        ca_kv,
                        ca_out_w,
                        ca_out_b,
                        ln2_g,
                        ln2_b,
                        ff1_w,
                        ff1_b,
                        ff2_w,
                        ff2_b,
                        ln3_g,
                        ln3_b,
                    }
                })
                .collect();
            let logit_w = b.linear(p, "logit_w", d_e, 4);
            let logit_b = b.bias(p, "logit_b", 4);
            let phase_w = b.linear(p, "phase_w", d_e, 4);
            let phase_b = b.bias(p, "phase_b", 4);
            TransformerIdx { embed, pos, blocks, logit_w, logit_b, phase_w, phase_b }
        };

        let m0 = b.add("m0".into(), &[dims.n_c, d_e], Init::Normal(1.0));
        Layout { dims: dims.clone(), names: b.names, shapes: b.shapes, inits: b.inits, fno, tf, m0 }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Fresh random parameters; linear maps scaled by `gain / sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, gain: f64) -> Vec<Tensor> {
        self.shapes
            .iter()
            .zip(&self.inits)
            .map(|(shape, init)| {
                let mut normal = |std: f64| Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    std * z
                });
                match *init {
                    Init::Linear { fan_in, scale } => normal(gain * scale / (fan_in as f64).sqrt()),
                    Init::Normal(std) => normal(std),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::from_fn(shape, |_| 1.0),
                }
            })
            .collect()
    }

    pub fn zeros(&self) -> Vec<Tensor> {
        self.shapes.iter().map(|s| Tensor::zeros(s)).collect()
    }

    /// Whether slot `i` belongs to the network weights (everything except
    /// the initial context tokens).
    pub fn is_network_weight(&self, i: usize) -> bool {
        i != self.m0
    }
}

/// Parameters bound to a graph. With `trainable = false` they enter as
/// constants and receive no gradient.
pub fn bind(g: &mut Graph, params: &[Tensor], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect()
}

/// SHA-256 over the FNO and transformer weights (names, shapes, bytes).
pub fn weights_hash(layout: &Layout, params: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for (i, t) in params.iter().enumerate() {
        if !layout.is_network_weight(i) {
            continue;
        }
        h.update(layout.names[i].as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex(&h.finalize())
}
