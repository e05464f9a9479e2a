//! `unp-sim` command line.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numeric fault,
//! 3 property failure.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::evolve::{compare, model_states, InitialState};
use crate::finetune::{before_after_csv, finetune_run, mae_report, random_basis_states, dataset_for_states, FinetuneDataset, TunableContext};
use crate::lattice::Lattice;
use crate::oracle::{observables, observables_csv, MAX_DENSE_SITES};
use crate::protocol::{evaluate, sample_training_protocol, ProtocolSpec};
use crate::training::{run_training, RunSinks, StepMetrics, TrainState, METRICS_HEADER};
use crate::verify::run_suite;
use crate::{Result, UnpError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_PROPERTY: i32 = 3;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "UNP_THREADS";

#[derive(Parser, Debug)]
#[command(name = "unp-sim", version, about = "Train and evaluate neural propagators for driven Ising lattices")]
pub struct Cli {
    /// Worker threads (1 forces a fully serial run).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Warm-up then self-supervised training; writes a checkpoint and metrics.csv.
    Train(TrainArgs),
    /// Evolve an initial state with a trained model (and exactly, when feasible).
    Evolve(EvolveArgs),
    /// Fine-tune the context trajectory for one protocol against observable data.
    Finetune(FinetuneArgs),
    /// Generate a protocol file and its grid CSV.
    Protocol(ProtocolArgs),
    /// Run the property suite; exits 3 if any property fails.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct EvolveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Protocol file (key = value lines).
    #[arg(long)]
    pub protocol: PathBuf,
    /// Bit string (one character per site, `0` is spin up) or `ghz`.
    #[arg(long)]
    pub state: String,
    /// Output CSV; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip the exact comparison even when the lattice is small enough.
    #[arg(long)]
    pub no_exact: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub protocol: PathBuf,
    /// Dataset CSV with columns state_bits,t,X_target,ZZ_target.
    #[arg(long, conflicts_with = "generate", required_unless_present = "generate")]
    pub dataset: Option<PathBuf>,
    /// Build a dataset of this many random basis states from exact evolution.
    #[arg(long)]
    pub generate: Option<usize>,
    /// Keep every n-th grid time when generating.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Held-out basis states for the MAE report.
    #[arg(long, default_value_t = 8)]
    pub test: usize,
    /// Defaults to the checkpoint's `finetune_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Defaults to the checkpoint's `finetune_lr`.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProtocolArgs {
    /// fourier, tanh_ramp, or gaussian_pulse.
    #[arg(long)]
    pub kind: String,
    /// Seed for `fourier`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub baseline: Option<f64>,
    #[arg(long)]
    pub height: Option<f64>,
    /// Defaults to half the window.
    #[arg(long)]
    pub center: Option<f64>,
    /// Defaults to a tenth of the window.
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub hz: f64,
    #[arg(long, default_value_t = 1.0)]
    pub t_total: f64,
    #[arg(long, default_value_t = 201)]
    pub n_t: usize,
    /// Directory for protocol.txt and grid.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Also check this checkpoint (load integrity and structural properties).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Config file (key = value lines, `include` allowed).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in preset: 1x2-tiny, 2x2-small, 4x4-paper.
    #[arg(long)]
    pub preset: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut text = match (&self.config, &self.preset) {
            (Some(p), _) => {
                let base = p.parent().map(Path::to_path_buf);
                let body = fs::read_to_string(p)?;
                return self.with_overrides(RunConfig::from_text(&body, base.as_deref())?);
            }
            (None, Some(name)) => format!("include = {name}\n"),
            (None, None) => String::new(),
        };
        for o in &self.overrides {
            text.push_str(o);
            text.push('\n');
        }
        RunConfig::from_text(&text, None)
    }

    fn with_overrides(&self, cfg: RunConfig) -> Result<RunConfig> {
        if self.overrides.is_empty() {
            return Ok(cfg);
        }
        let mut text = cfg.to_text();
        for o in &self.overrides {
            text.push_str(o);
            text.push('\n');
        }
        RunConfig::from_text(&text, None)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Override `total_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory (checkpoint and metrics); overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory if present.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Comment line carried by every emitted CSV.
pub fn provenance(checkpoint: &str, seed: u64, config_hash: &str) -> String {
    format!("# checkpoint_sha256={checkpoint} seed={seed} config_sha256={config_hash}")
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| UnpError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(UnpError::Config("thread count must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| UnpError::Config(e.to_string()))?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let ckpt = cfg.out_dir.join(cfg.checkpoint.file_name().unwrap_or("unp.ckpt".as_ref()));
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let resuming = a.resume && ckpt.exists();
    let mut state = if resuming {
        let mut s = load_checkpoint(&ckpt)?;
        s.config.total_steps = cfg.total_steps;
        eprintln!("resuming from step {}", s.step);
        s
    } else {
        TrainState::new(cfg)?
    };
    let mut metrics = if resuming && metrics_path.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?)
    } else {
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        writeln!(w, "{}", provenance(&checkpoint_hash(&state), state.config.seed, &state.config.hash()))?;
        writeln!(w, "{METRICS_HEADER}")?;
        w
    };
    // The initial model is saved before any step, so `--steps 0` still
    // yields a checkpoint and a failure always leaves one behind.
    if !resuming {
        save_checkpoint(&state, &ckpt)?;
    }
    let log_every = state.config.log_every;
    let mut progress = |m: &StepMetrics| {
        if (m.step + 1) % log_every == 0 {
            eprintln!(
                "step {:>6}  loss {:.4e}  phys {:.4e}  anchor {:.4e}  lr {:.2e}  |g| {:.3e}",
                m.step + 1,
                m.loss_total,
                m.loss_phys,
                m.loss_anchor,
                m.lr,
                m.grad_norm
            );
        }
    };
    let result = run_training(
        &mut state,
        RunSinks { checkpoint: Some(&ckpt), metrics: Some(&mut metrics), progress: Some(&mut progress) },
    );
    metrics.flush()?;
    result?;
    println!("{}", ckpt.display());
    Ok(())
}

fn read_protocol(path: &Path) -> Result<ProtocolSpec> {
    ProtocolSpec::parse(&fs::read_to_string(path)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_evolve(a: &EvolveArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let d = &state.config.dims;
    let spec = read_protocol(&a.protocol)?;
    let init = InitialState::parse(&a.state, d.n_sites())?;
    let head = provenance(&checkpoint_hash(&state), state.config.seed, &state.config.hash());
    let body = if !a.no_exact && d.n_sites() <= MAX_DENSE_SITES {
        compare(&state.layout, &state.params, &spec, &init)?.to_csv()
    } else {
        let lattice = Lattice::new(d.lx, d.ly);
        let grid = evaluate(&spec, d.t_total, d.n_t)?;
        let psi = model_states(&state.layout, &state.params, &grid, &init)?;
        let obs: Vec<_> = psi.iter().enumerate().map(|(j, p)| observables(p, &lattice, grid.fields(j))).collect();
        observables_csv(&grid.times, &obs)
    };
    emit(a.out.as_deref(), &format!("{head}\n{body}"))
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let cfg = &state.config;
    let d = &cfg.dims;
    let lattice = Lattice::new(d.lx, d.ly);
    let spec = read_protocol(&a.protocol)?;
    let grid = evaluate(&spec, d.t_total, d.n_t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let data = match (&a.dataset, a.generate) {
        (Some(p), _) => FinetuneDataset::from_csv(&fs::read_to_string(p)?, &grid, d.n_sites())?,
        (None, Some(n)) => {
            if n == 0 || n > lattice.dim() {
                return Err(UnpError::Config(format!("--generate needs 1..={} states", lattice.dim())));
            }
            let states = random_basis_states(d.n_sites(), n, &[], &mut rng);
            dataset_for_states(&lattice, &spec, &grid, states, a.stride.max(1))?
        }
        (None, None) => return Err(UnpError::Config("need --dataset or --generate".into())),
    };
    let free = lattice.dim() - data.states.len();
    if a.test == 0 || a.test > free {
        return Err(UnpError::Config(format!("--test needs 1..={free} held-out states")));
    }
    let test = random_basis_states(d.n_sites(), a.test, &data.states, &mut rng);
    let steps = a.steps.unwrap_or(cfg.finetune_steps);
    let lr = a.lr.unwrap_or(cfg.finetune_lr);

    let ctx = TunableContext::from_model(&state.layout, &state.params, &grid)?;
    let before = mae_report(&state.layout, &state.params, &ctx, &spec, &test)?;
    let outcome = finetune_run(&state.layout, &state.params, ctx, &data, steps, lr)?;
    let after = mae_report(&state.layout, &state.params, &outcome.context, &spec, &test)?;

    let head = provenance(&checkpoint_hash(&state), a.seed, &cfg.hash());
    fs::create_dir_all(&a.out)?;
    if a.generate.is_some() {
        fs::write(a.out.join("dataset.csv"), format!("{head}\n{}", data.to_csv()))?;
    }
    fs::write(a.out.join("context.csv"), format!("{head}\n{}", outcome.context.to_csv(&grid.times)))?;
    fs::write(a.out.join("mae.csv"), format!("{head}\n{}", before_after_csv(&before, &after)))?;
    let mut loss = format!("{head}\nstep,loss\n");
    for (i, l) in outcome.history.iter().enumerate() {
        loss += &format!("{i},{l}\n");
    }
    fs::write(a.out.join("loss.csv"), loss)?;
    for o in ["X", "E", "Z", "ZZ"] {
        println!("mean MAE {o:>2}: before {:.4e}  after {:.4e}", before.mean(o), after.mean(o));
    }
    if let Some(f) = outcome.fault {
        return Err(UnpError::Numeric(format!("fine-tuning stopped early: {f}")));
    }
    Ok(())
}

fn cmd_protocol(a: &ProtocolArgs) -> Result<()> {
    let t = a.t_total;
    let shape = |baseline: f64, height: f64| crate::protocol::PulseShape {
        baseline: a.baseline.unwrap_or(baseline),
        height: a.height.unwrap_or(height),
        center: a.center.unwrap_or(0.5 * t),
        width: a.width.unwrap_or(0.1 * t),
        hz: a.hz,
    };
    let spec = match a.kind.as_str() {
        "fourier" => sample_training_protocol(&mut ChaCha8Rng::seed_from_u64(a.seed)),
        "tanh_ramp" => ProtocolSpec::TanhRamp(shape(0.7, 0.6)),
        "gaussian_pulse" => ProtocolSpec::GaussianPulse(shape(0.8, 0.5)),
        other => return Err(UnpError::Config(format!("unknown protocol kind `{other}` (fourier, tanh_ramp, gaussian_pulse)"))),
    };
    let grid = evaluate(&spec, t, a.n_t)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("protocol.txt"), spec.serialize())?;
    fs::write(a.out.join("grid.csv"), format!("{}\n{}", provenance("none", a.seed, "none"), grid.to_csv()))?;
    println!("{}", a.out.join("protocol.txt").display());
    Ok(())
}

/// Prints one line per property; returns whether all passed.
fn cmd_verify(a: &VerifyArgs) -> bool {
    let mut checks = Vec::new();
    let trained = match &a.checkpoint {
        Some(p) => match load_checkpoint(p) {
            Ok(s) => {
                let finite = s.params.iter().all(|t| t.is_finite());
                checks.push(crate::verify::Check { name: "checkpoint load".into(), passed: finite, detail: format!("step {}, finite parameters: {finite}", s.step) });
                Some(s)
            }
            Err(e) => {
                checks.push(crate::verify::Check { name: "checkpoint load".into(), passed: false, detail: e.to_string() });
                None
            }
        },
        None => None,
    };
    checks.extend(run_suite(trained.as_ref().map(|s| (&s.layout, &s.params[..]))));
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} properties passed", checks.len() - failed, checks.len());
    failed == 0
}

/// Run the parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evolve(a) => cmd_evolve(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Protocol(a) => cmd_protocol(a),
        Command::Verify(a) => return if cmd_verify(a) { EXIT_OK } else { EXIT_PROPERTY },
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &UnpError) -> i32 {
    match e {
        UnpError::Numeric(_) | UnpError::DegenerateColumn(_) | UnpError::DegenerateSuperposition(_) | UnpError::DegenerateAmplitude(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parse `args` (program name first) and run. Usage errors exit with 1;
/// `--help` and `--version` with 0.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
    }
}
