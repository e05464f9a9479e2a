//! Flat `key = value` configuration with `include` support.
//!
//! `include = <name>` pulls in a built-in preset (or a file path relative to
//! the including file); later keys override earlier ones. Unknown keys are
//! rejected before any compute starts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::{Result, UnpError};

#[derive(Clone, Debug, PartialEq)]
pub struct KvLine {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl KvLine {
    fn err(&self, msg: impl Into<String>) -> UnpError {
        UnpError::Parse { line: self.line, msg: msg.into() }
    }

    pub fn as_f64(&self) -> Result<f64> {
        let v: f64 = self.value.parse().map_err(|_| self.err(format!("`{}` is not a number: `{}`", self.key, self.value)))?;
        if !v.is_finite() {
            return Err(self.err(format!("`{}` must be finite", self.key)));
        }
        Ok(v)
    }

    pub fn as_usize(&self) -> Result<usize> {
        self.value
            .replace('_', "")
            .parse()
            .map_err(|_| self.err(format!("`{}` is not a nonnegative integer: `{}`", self.key, self.value)))
    }

    pub fn as_u64(&self) -> Result<u64> {
        self.value.parse().map_err(|_| self.err(format!("`{}` is not an integer: `{}`", self.key, self.value)))
    }

    pub fn as_bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(self.err(format!("`{}` is not a boolean: `{}`", self.key, self.value))),
        }
    }

    /// Comma-separated floats; an empty value is an empty list.
    pub fn as_f64_list(&self) -> Result<Vec<f64>> {
        if self.value.trim().is_empty() {
            return Ok(Vec::new());
        }
        self.value
            .split(',')
            .map(|s| {
                let s = s.trim();
                let v: f64 = s.parse().map_err(|_| self.err(format!("`{}`: bad number `{s}`", self.key)))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(self.err(format!("`{}` must be finite", self.key)))
                }
            })
            .collect()
    }
}

/// Split text into `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<KvLine>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(UnpError::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(UnpError::Parse { line: i + 1, msg: "empty key".into() });
        }
        out.push(KvLine { line: i + 1, key: key.to_string(), value: v.trim().to_string() });
    }
    Ok(out)
}

/// Architecture and grid: everything a checkpoint must agree on.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub lx: usize,
    pub ly: usize,
    pub d_e: usize,
    pub n_heads: usize,
    pub n_trans: usize,
    pub d_f: usize,
    pub d_fno: usize,
    pub n_fno: usize,
    pub k_max: usize,
    pub n_c: usize,
    pub n_t: usize,
    pub t_total: f64,
}

impl ModelDims {
    pub fn n_sites(&self) -> usize {
        self.lx * self.ly
    }

    pub fn d_head(&self) -> usize {
        self.d_e / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UnpError::Config(m));
        let positive = [
            ("lattice", self.lx.min(self.ly)),
            ("d_e", self.d_e),
            ("n_heads", self.n_heads),
            ("n_trans", self.n_trans),
            ("d_f", self.d_f),
            ("d_fno", self.d_fno),
            ("n_fno", self.n_fno),
            ("k_max", self.k_max),
            ("n_c", self.n_c),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("`{name}` must be positive"));
            }
        }
        if self.d_e % self.n_heads != 0 {
            return bad(format!("d_e = {} is not divisible by n_heads = {}", self.d_e, self.n_heads));
        }
        if self.n_t < 3 || self.n_t % 2 == 0 {
            return bad(format!("n_t must be odd and >= 3 for Simpson integration, got {}", self.n_t));
        }
        if self.k_max > self.n_t / 2 + 1 {
            return bad(format!("k_max = {} exceeds the {} available modes for n_t = {}", self.k_max, self.n_t / 2 + 1, self.n_t));
        }
        if !(self.t_total > 0.0) {
            return bad(format!("t_total must be positive, got {}", self.t_total));
        }
        Ok(())
    }
}

/// Full run configuration: model, optimizer, sampling, and paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dims: ModelDims,
    pub batch: usize,
    pub k_times: usize,
    pub m_samples: usize,
    pub lambda_anchor: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_interval: usize,
    pub lr_min: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub detach_eloc: bool,
    /// Standard deviation of the initial weights, scaled by `1/sqrt(fan_in)`.
    pub init_gain: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Record wall-clock time in metrics; off for bit-reproducible CSVs.
    pub wall_time: bool,
}

pub const PRESETS: &[(&str, &str)] = &[
    (
        "1x2-tiny",
        "lattice = 1x2\nd_e = 8\nn_heads = 2\nn_trans = 1\nd_fno = 4\nn_fno = 1\nk_max = 6\nn_c = 2\nn_t = 11\n\
         batch = 2\nk_times = 2\nm_samples = 16\ntotal_steps = 500\nwarmup_steps = 500\nlr0 = 1e-2\n",
    ),
    (
        "2x2-small",
        "lattice = 2x2\nt_total = 1.0\nn_t = 201\nd_e = 32\nn_heads = 4\nn_trans = 2\nn_fno = 2\nd_fno = 32\n\
         k_max = 24\nn_c = 4\nbatch = 4\nk_times = 4\nm_samples = 64\ntotal_steps = 20000\nwarmup_steps = 500\n\
         lambda_anchor = 100\n",
    ),
    (
        "4x4-paper",
        "lattice = 4x4\nn_trans = 3\nd_e = 96\nn_heads = 8\nd_f = 384\nn_fno = 3\nd_fno = 128\nk_max = 48\nn_c = 4\n\
         n_t = 201\nlr0 = 5e-4\nlr_decay = 0.95\nlr_interval = 2000\nlr_min = 5e-6\nbatch = 6\nk_times = 4\n\
         m_samples = 128\ntotal_steps = 120000\nlambda_anchor = 1.0\nclip_norm = 0.1\nfinetune_steps = 500\n\
         finetune_lr = 1e-3\n",
    ),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims {
                lx: 2,
                ly: 2,
                d_e: 32,
                n_heads: 4,
                n_trans: 2,
                d_f: 128,
                d_fno: 32,
                n_fno: 2,
                k_max: 24,
                n_c: 4,
                n_t: 201,
                t_total: 1.0,
            },
            batch: 4,
            k_times: 4,
            m_samples: 64,
            lambda_anchor: 1.0,
            total_steps: 20000,
            warmup_steps: 500,
            lr0: 5e-4,
            lr_decay: 0.95,
            lr_interval: 2000,
            lr_min: 5e-6,
            clip_norm: 0.1,
            seed: 0,
            detach_eloc: false,
            init_gain: 1.0,
            finetune_steps: 500,
            finetune_lr: 1e-3,
            checkpoint: PathBuf::from("unp.ckpt"),
            out_dir: PathBuf::from("."),
            checkpoint_every: 1000,
            log_every: 100,
            wall_time: true,
        }
    }
}

fn parse_lattice(l: &KvLine) -> Result<(usize, usize)> {
    let (a, b) = l
        .value
        .split_once(['x', 'X'])
        .ok_or_else(|| l.err(format!("lattice must look like `2x2`, got `{}`", l.value)))?;
    let p = |s: &str| s.trim().parse::<usize>().map_err(|_| l.err(format!("bad lattice `{}`", l.value)));
    Ok((p(a)?, p(b)?))
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        let text = preset(name).ok_or_else(|| UnpError::Config(format!("unknown preset `{name}`")))?;
        Self::from_text(text, None)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, path.parent())
    }

    /// Parse config text on top of the defaults; `base` resolves relative
    /// include paths.
    pub fn from_text(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut d_f_set = false;
        cfg.apply_text(text, base, 0, &mut d_f_set)?;
        if !d_f_set {
            cfg.dims.d_f = 4 * cfg.dims.d_e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str, base: Option<&Path>, depth: usize, d_f_set: &mut bool) -> Result<()> {
        if depth > 8 {
            return Err(UnpError::Config("include nesting deeper than 8".into()));
        }
        for l in parse_kv(text)? {
            if l.key == "include" {
                if let Some(p) = preset(&l.value) {
                    self.apply_text(p, None, depth + 1, d_f_set)?;
                } else {
                    let path = base.map_or_else(|| PathBuf::from(&l.value), |b| b.join(&l.value));
                    let inner = std::fs::read_to_string(&path)
                        .map_err(|e| l.err(format!("cannot include `{}`: {e}", l.value)))?;
                    self.apply_text(&inner, path.parent(), depth + 1, d_f_set)?;
                }
            } else {
                *d_f_set |= l.key == "d_f";
                self.set(&l)?;
            }
        }
        Ok(())
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, l: &KvLine) -> Result<()> {
        let d = &mut self.dims;
        match l.key.as_str() {
            "lattice" => (d.lx, d.ly) = parse_lattice(l)?,
            "d_e" => d.d_e = l.as_usize()?,
            "n_heads" => d.n_heads = l.as_usize()?,
            "n_trans" => d.n_trans = l.as_usize()?,
            "d_f" => d.d_f = l.as_usize()?,
            "d_fno" => d.d_fno = l.as_usize()?,
            "n_fno" => d.n_fno = l.as_usize()?,
            "k_max" => d.k_max = l.as_usize()?,
            "n_c" => d.n_c = l.as_usize()?,
            "n_t" => d.n_t = l.as_usize()?,
            "t_total" => d.t_total = l.as_f64()?,
            "batch" => self.batch = l.as_usize()?,
            "k_times" => self.k_times = l.as_usize()?,
            "m_samples" => self.m_samples = l.as_usize()?,
            "lambda_anchor" => self.lambda_anchor = l.as_f64()?,
            "total_steps" => self.total_steps = l.as_usize()?,
            "warmup_steps" => self.warmup_steps = l.as_usize()?,
            "lr0" => self.lr0 = l.as_f64()?,
            "lr_decay" => self.lr_decay = l.as_f64()?,
            "lr_interval" => self.lr_interval = l.as_usize()?,
            "lr_min" => self.lr_min = l.as_f64()?,
            "clip_norm" => self.clip_norm = l.as_f64()?,
            "seed" => self.seed = l.as_u64()?,
            "detach_eloc" => self.detach_eloc = l.as_bool()?,
            "init_gain" => self.init_gain = l.as_f64()?,
            "finetune_steps" => self.finetune_steps = l.as_usize()?,
            "finetune_lr" => self.finetune_lr = l.as_f64()?,
            "checkpoint" => self.checkpoint = PathBuf::from(&l.value),
            "out_dir" => self.out_dir = PathBuf::from(&l.value),
            "checkpoint_every" => self.checkpoint_every = l.as_usize()?,
            "log_every" => self.log_every = l.as_usize()?,
            "wall_time" => self.wall_time = l.as_bool()?,
            other => return Err(l.err(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let bad = |m: String| Err(UnpError::Config(m));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.k_times == 0 || self.k_times > self.dims.n_t {
            return bad(format!("k_times must lie in 1..={}, got {}", self.dims.n_t, self.k_times));
        }
        if self.m_samples < 2 {
            return bad(format!("m_samples must be >= 2 for residual centering, got {}", self.m_samples));
        }
        for (name, v) in [
            ("lambda_anchor", self.lambda_anchor),
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("lr_min", self.lr_min),
            ("clip_norm", self.clip_norm),
            ("init_gain", self.init_gain),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(v > 0.0) {
                return bad(format!("`{name}` must be positive, got {v}"));
            }
        }
        if self.lr_interval == 0 || self.log_every == 0 {
            return bad("lr_interval and log_every must be positive".into());
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order. Parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("lattice", format!("{}x{}", d.lx, d.ly));
        kv("d_e", d.d_e.to_string());
        kv("n_heads", d.n_heads.to_string());
        kv("n_trans", d.n_trans.to_string());
        kv("d_f", d.d_f.to_string());
        kv("d_fno", d.d_fno.to_string());
        kv("n_fno", d.n_fno.to_string());
        kv("k_max", d.k_max.to_string());
        kv("n_c", d.n_c.to_string());
        kv("n_t", d.n_t.to_string());
        kv("t_total", d.t_total.to_string());
        kv("batch", self.batch.to_string());
        kv("k_times", self.k_times.to_string());
        kv("m_samples", self.m_samples.to_string());
        kv("lambda_anchor", self.lambda_anchor.to_string());
        kv("total_steps", self.total_steps.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("lr0", self.lr0.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("lr_interval", self.lr_interval.to_string());
        kv("lr_min", self.lr_min.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("seed", self.seed.to_string());
        kv("detach_eloc", self.detach_eloc.to_string());
        kv("init_gain", self.init_gain.to_string());
        kv("finetune_steps", self.finetune_steps.to_string());
        kv("finetune_lr", self.finetune_lr.to_string());
        kv("checkpoint", self.checkpoint.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("log_every", self.log_every.to_string());
        kv("wall_time", self.wall_time.to_string());
        s
    }

    /// SHA-256 of the training-relevant keys (paths excluded), hex.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.checkpoint = PathBuf::new();
        c.out_dir = PathBuf::new();
        hex(&Sha256::digest(c.to_text().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for (name, _) in PRESETS {
            RunConfig::from_preset(name).unwrap();
        }
    }

    #[test]
    fn paper_preset_values() {
        let c = RunConfig::from_preset("4x4-paper").unwrap();
        assert_eq!((c.dims.lx, c.dims.ly), (4, 4));
        assert_eq!(c.dims.n_trans, 3);
        assert_eq!(c.dims.d_e, 96);
        assert_eq!(c.dims.n_heads, 8);
        assert_eq!(c.dims.d_f, 384);
        assert_eq!(c.dims.n_fno, 3);
        assert_eq!(c.dims.d_fno, 128);
        assert_eq!(c.dims.k_max, 48);
        assert_eq!(c.dims.n_c, 4);
        assert_eq!(c.lr0, 5e-4);
        assert_eq!(c.lr_decay, 0.95);
        assert_eq!(c.lr_interval, 2000);
        assert_eq!(c.lr_min, 5e-6);
        assert_eq!((c.batch, c.k_times, c.m_samples), (6, 4, 128));
        assert_eq!(c.total_steps, 120_000);
        assert_eq!(c.lambda_anchor, 1.0);
        assert_eq!(c.clip_norm, 0.1);
        assert_eq!((c.finetune_steps, c.finetune_lr), (500, 1e-3));
    }

    #[test]
    fn include_then_override() {
        let c = RunConfig::from_text("include = 2x2-small\nd_e = 16\nseed = 9\n", None).unwrap();
        assert_eq!(c.dims.d_e, 16);
        assert_eq!(c.dims.d_f, 64);
        assert_eq!(c.seed, 9);
        assert_eq!(c.dims.k_max, 24);
    }

    #[test]
    fn include_file_relative() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "include = 1x2-tiny\nseed = 4\n").unwrap();
        std::fs::write(dir.path().join("run.cfg"), "include = base.cfg\nbatch = 3\n").unwrap();
        let c = RunConfig::from_file(&dir.path().join("run.cfg")).unwrap();
        assert_eq!((c.seed, c.batch, c.dims.lx, c.dims.ly), (4, 3, 1, 2));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let e = RunConfig::from_text("d_e = 8\nwidth = 3\n", None).unwrap_err();
        assert!(e.to_string().contains("width") && e.to_string().contains("line 2"), "{e}");
        assert!(RunConfig::from_text("n_t = 200\n", None).is_err());
        assert!(RunConfig::from_text("m_samples = 1\n", None).is_err());
        assert!(RunConfig::from_text("d_e = 10\nn_heads = 4\n", None).is_err());
        assert!(RunConfig::from_text("n_t = 11\nk_max = 7\n", None).is_err());
        assert!(RunConfig::from_text("lattice = 2by2\n", None).is_err());
    }

    #[test]
    fn canonical_text_roundtrips() {
        let mut c = RunConfig::from_preset("1x2-tiny").unwrap();
        c.lr0 = 1.0 / 3.0;
        c.detach_eloc = true;
        assert_eq!(RunConfig::from_text(&c.to_text(), None).unwrap(), c);
    }

    #[test]
    fn hash_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.checkpoint = PathBuf::from("/elsewhere.ckpt");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
