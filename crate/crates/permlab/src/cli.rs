//! Argument parsing and the subcommands.
//!
//! Every option can be given as `--key value`, `--key=value` or a bare
//! `key=value` word (so `construct thm2_cmf d=10 beta=50` works), or in a
//! `--config` file using the same keys. Command-line values win.

use std::ffi::OsString;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use permlab_core::constructions::{build, verify_on, ConstructionBundle, ConstructionName, VerificationReport};
use permlab_core::model::{forward, predict};
use permlab_core::probe::{
    best_single_block_fit, block_summary, dominant_block, lemma1_check, scan_blocks, theorem1_witness, BlockNorm,
    Lemma1Verdict,
};
use permlab_core::task::{sample_permutation, sample_target, sample_uniform_target, Permutation};
use permlab_core::training::{
    finite_diff_grad, grad, init_weights, max_relative_error, train, OptimizerConfig, TrainConfig,
};
use permlab_core::{MaskMode, Matrix, ModelWeights, Padding, TaskInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{pick, pick_seed, ConfigFile};
use crate::error::{CliError, CliResult};
use crate::heatmap;
use crate::metrics::MetricsWriter;
use crate::report::Record;

#[derive(Debug, Parser)]
#[command(name = "permlab", version, about = "Disentangled attention-only transformers on the inverse-permutation task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write hand-built weights as a checkpoint plus a `.meta` sidecar.
    Construct(ConstructArgs),
    /// Train from a random initialisation.
    Train(TrainArgs),
    /// Mean loss of a checkpoint on fresh instances.
    Eval(EvalArgs),
    /// Check that a checkpoint recovers `Y` within a tolerance.
    Verify(VerifyArgs),
    /// Inspect a checkpoint's residual stream.
    Probe(ProbeArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Dump one weight matrix as a PGM image and CSV.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct ConstructArgs {
    pub name: ConstructionName,
    #[arg(long)]
    pub d: Option<usize>,
    /// Gain of both layers unless `beta2` is given.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, false)
    }
}

/// `lo:hi` row range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rows(pub Range<usize>);

impl std::str::FromStr for Rows {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
        let lo = lo.parse().map_err(|_| format!("bad row `{lo}`"))?;
        let hi = hi.parse().map_err(|_| format!("bad row `{hi}`"))?;
        Ok(Rows(lo..hi))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub mask: Option<MaskMode>,
    #[arg(long)]
    pub padding: Option<Padding>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "init_scale")]
    pub init_scale: Option<f64>,
    /// Rows compared against `Y`, as `lo:hi`; defaults to the `P` rows.
    #[arg(long)]
    pub readout: Option<Rows>,
    #[arg(long = "eval_every")]
    pub eval_every: Option<u64>,
    #[arg(long = "eval_size")]
    pub eval_size: Option<usize>,
    /// Checkpoint path, rewritten after every evaluation.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// One trial per permutation of `0..d` (d ≤ 8) instead of random ones.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub exhaustive: Option<bool>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeMode {
    Scan,
    Lemma1,
    Witness,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    pub mode: ProbeMode,
    pub checkpoint: PathBuf,
    /// Seed for the probed instances.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scan tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Perturbed row for `lemma1`; random in `1..T` when absent.
    #[arg(long)]
    pub row: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub mask: Option<MaskMode>,
    #[arg(long)]
    pub padding: Option<Padding>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "init_scale")]
    pub init_scale: Option<f64>,
    /// Denominator floor of the relative error.
    #[arg(long)]
    pub floor: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// `1..=depth` for `A^(layer)`, or `w` for the readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSel {
    Attn(usize),
    Readout,
}

impl std::str::FromStr for LayerSel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "w" | "W" => Ok(LayerSel::Readout),
            _ => match s.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(LayerSel::Attn(k)),
                _ => Err(format!("expected a layer number from 1 or `w`, found `{s}`")),
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub layer: Option<LayerSel>,
    /// Output prefix; `.pgm` and `.csv` are appended.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

const CONSTRUCT_KEYS: &[&str] = &["d", "beta", "beta2", "out"];
const TRAIN_KEYS: &[&str] = &[
    "d", "depth", "mask", "padding", "steps", "batch", "seed", "optimizer", "lr", "init_scale", "readout",
    "eval_every", "eval_size", "out", "metrics",
];
const EVAL_KEYS: &[&str] = &["n", "seed"];
const VERIFY_KEYS: &[&str] = &["trials", "tol", "seed", "exhaustive"];
const PROBE_KEYS: &[&str] = &["seed", "tol", "row", "trials"];
const GRADCHECK_KEYS: &[&str] = &[
    "d", "depth", "mask", "padding", "eps", "trials", "batch", "seed", "init_scale", "floor", "tol",
];
const HEATMAP_KEYS: &[&str] = &["layer", "out"];

fn known_key(k: &str) -> bool {
    [CONSTRUCT_KEYS, TRAIN_KEYS, EVAL_KEYS, VERIFY_KEYS, PROBE_KEYS, GRADCHECK_KEYS, HEATMAP_KEYS]
        .iter()
        .any(|keys| keys.contains(&k))
        || k == "config"
}

/// Turns bare `key=value` words for known keys into `--key=value`.
pub fn normalize_args<I, T>(args: I) -> Vec<OsString>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    args.into_iter()
        .map(Into::into)
        .enumerate()
        .map(|(i, a)| {
            let Some(s) = a.to_str().filter(|_| i > 0) else {
                return a;
            };
            match s.split_once('=') {
                Some((k, _)) if !s.starts_with('-') && known_key(k) => OsString::from(format!("--{s}")),
                _ => a,
            }
        })
        .collect()
}

/// Parses `args` (including the program name) and runs the command,
/// writing reports to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    use clap::error::ErrorKind;
    let cli = match Cli::try_parse_from(normalize_args(args)) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            write!(out, "{e}").map_err(stdout_err)?;
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    match cli.command {
        Command::Construct(a) => cmd_construct(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Verify(a) => cmd_verify(a, out),
        Command::Probe(a) => cmd_probe(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Heatmap(a) => cmd_heatmap(a, out),
    }
}

fn stdout_err(e: std::io::Error) -> CliError {
    CliError::io("<stdout>", e)
}

fn emit(out: &mut dyn Write, rec: Record) -> CliResult<()> {
    writeln!(out, "{rec}").map_err(stdout_err)
}

fn load_config(path: &Option<PathBuf>, keys: &[&str]) -> CliResult<Option<ConfigFile>> {
    path.as_deref().map(|p| ConfigFile::load(p, keys)).transpose()
}

/// Where a construction is expected to write `Y`; stored next to the
/// checkpoint as `<checkpoint>.meta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub name: ConstructionName,
    pub beta1: f64,
    pub beta2: f64,
    pub level: usize,
    pub rows: Range<usize>,
    pub col_block: usize,
}

impl Sidecar {
    pub fn of(bundle: &ConstructionBundle) -> Self {
        Sidecar {
            name: bundle.name,
            beta1: bundle.beta1,
            beta2: bundle.beta2,
            level: bundle.expected_level,
            rows: bundle.expected_rows.clone(),
            col_block: bundle.expected_col_block,
        }
    }

    pub fn path_for(checkpoint: &Path) -> PathBuf {
        let mut p = checkpoint.as_os_str().to_owned();
        p.push(".meta");
        PathBuf::from(p)
    }

    pub fn to_text(&self) -> String {
        format!(
            "name={}\nbeta1={:.16e}\nbeta2={:.16e}\nlevel={}\nrows={}:{}\ncol_block={}\n",
            self.name.as_str(),
            self.beta1,
            self.beta2,
            self.level,
            self.rows.start,
            self.rows.end,
            self.col_block
        )
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        const KEYS: &[&str] = &["name", "beta1", "beta2", "level", "rows", "col_block"];
        let file = ConfigFile::load(path, KEYS).map_err(|e| match e {
            CliError::Usage(msg) => CliError::Format {
                path: path.display().to_string(),
                msg,
            },
            other => other,
        })?;
        let need = |k: &str| CliError::Format {
            path: path.display().to_string(),
            msg: format!("missing or bad `{k}`"),
        };
        let get = |k: &str| -> CliResult<String> { file.get::<String>(k).ok().flatten().ok_or_else(|| need(k)) };
        Ok(Sidecar {
            name: get("name")?.parse().map_err(|_| need("name"))?,
            beta1: get("beta1")?.parse().map_err(|_| need("beta1"))?,
            beta2: get("beta2")?.parse().map_err(|_| need("beta2"))?,
            level: get("level")?.parse().map_err(|_| need("level"))?,
            rows: get("rows")?.parse::<Rows>().map_err(|_| need("rows"))?.0,
            col_block: get("col_block")?.parse().map_err(|_| need("col_block"))?,
        })
    }

    pub fn bundle(&self, wts: ModelWeights) -> ConstructionBundle {
        ConstructionBundle {
            name: self.name,
            wts,
            expected_level: self.level,
            expected_rows: self.rows.clone(),
            expected_col_block: self.col_block,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn cmd_construct(a: ConstructArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = load_config(&a.config, CONSTRUCT_KEYS)?;
    let f = file.as_ref();
    let d = pick(a.d, f, "d", 10)?;
    let beta = pick(a.beta, f, "beta", 50.0)?;
    let beta2 = pick(a.beta2, f, "beta2", beta)?;
    let path = pick(a.out, f, "out", PathBuf::from(format!("{}.ckpt", a.name.as_str())))?;
    let bundle = build(a.name, d, beta, beta2)?;
    let ckpt = Checkpoint {
        weights: bundle.wts.clone(),
        seed: 0,
        step: 0,
    };
    checkpoint::save(&path, &ckpt)?;
    let side = Sidecar::of(&bundle);
    let meta = Sidecar::path_for(&path);
    write_file(&meta, &side.to_text())?;
    emit(
        out,
        Record::new("construct")
            .field("name", a.name.as_str())
            .field("d", d)
            .real("beta1", beta)
            .real("beta2", beta2)
            .field("level", side.level)
            .field("rows", format_args!("{}:{}", side.rows.start, side.rows.end))
            .field("col_block", side.col_block)
            .field("checkpoint", path.display())
            .field("meta", meta.display()),
    )
}

/// Resolves a training configuration from flags and an optional file.
pub fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let file = load_config(&a.config, TRAIN_KEYS)?;
    let f = file.as_ref();
    let dflt = TrainConfig::default();
    let lr = pick(a.lr, f, "lr", dflt.optimizer.lr())?;
    let optimizer = match pick(a.optimizer, f, "optimizer", OptimizerKind::Adam)? {
        OptimizerKind::Adam => OptimizerConfig::adam(lr),
        OptimizerKind::Sgd => OptimizerConfig::Sgd { lr },
    };
    let readout = match a.readout.clone() {
        Some(r) => Some(r),
        None => f.map(|f| f.get::<Rows>("readout")).transpose()?.flatten(),
    };
    let steps = pick(a.steps, f, "steps", dflt.steps)?;
    let cfg = TrainConfig {
        d: pick(a.d, f, "d", dflt.d)?,
        depth: pick(a.depth, f, "depth", dflt.depth)?,
        mask: pick(a.mask, f, "mask", dflt.mask)?,
        padding: pick(a.padding, f, "padding", dflt.padding)?,
        steps,
        batch: pick(a.batch, f, "batch", dflt.batch)?,
        seed: pick_seed(a.seed, f)?,
        optimizer,
        init_scale: pick(a.init_scale, f, "init_scale", dflt.init_scale)?,
        readout_rows: readout.map(|r| r.0),
        eval_every: pick(a.eval_every, f, "eval_every", dflt.eval_every.min(steps))?,
        eval_size: pick(a.eval_size, f, "eval_size", dflt.eval_size)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = train_config(&a)?;
    let file = load_config(&a.config, TRAIN_KEYS)?;
    let f = file.as_ref();
    let ckpt_path = pick(a.out.clone(), f, "out", PathBuf::from("model.ckpt"))?;
    let metrics_path = pick(a.metrics.clone(), f, "metrics", PathBuf::from("metrics.csv"))?;
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut sink_err: Option<CliError> = None;
    let report = train(&cfg, |step, mse, wts| {
        if sink_err.is_some() {
            return;
        }
        let ckpt = Checkpoint {
            weights: wts.clone(),
            seed: cfg.seed,
            step,
        };
        let res = metrics
            .append(step, mse)
            .and_then(|_| checkpoint::save(&ckpt_path, &ckpt))
            .and_then(|_| emit(out, Record::new("eval").field("step", step).real("mse", mse)));
        if let Err(e) = res {
            sink_err = Some(e);
        }
    })?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    emit(
        out,
        Record::new("train")
            .field("d", cfg.d)
            .field("depth", cfg.depth)
            .field("mask", cfg.mask.as_str())
            .field("steps", cfg.steps)
            .field("seed", cfg.seed)
            .real("final_mse", report.final_mse)
            .field("wallclock_s", format_args!("{:.1}", report.wallclock))
            .field("checkpoint", ckpt_path.display())
            .field("metrics", metrics_path.display()),
    )
}

pub fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = load_config(&a.config, EVAL_KEYS)?;
    let f = file.as_ref();
    let n = pick(a.n, f, "n", 1000)?;
    let seed = pick_seed(a.seed, f)?;
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mse = permlab_core::training::evaluate(&ckpt.weights, n, &mut rng)?;
    emit(out, Record::new("eval").field("n", n).field("seed", seed).real("mse", mse))
}

fn instances(d: usize, padding: Padding, trials: usize, exhaustive: bool, rng: &mut ChaCha8Rng) -> CliResult<Vec<TaskInstance>> {
    if exhaustive {
        if d > 8 {
            return Err(CliError::Usage(format!("exhaustive verification needs d <= 8, got {d}")));
        }
        Permutation::all(d)
            .into_iter()
            .map(|p| Ok(TaskInstance::new(p.to_matrix(), sample_target(d, rng)?, padding)?))
            .collect()
    } else {
        (0..trials)
            .map(|_| Ok(TaskInstance::sample(d, padding, rng)?))
            .collect()
    }
}

/// Checks the bundled output location when a sidecar exists, and the
/// model's own readout otherwise.
pub fn verify_checkpoint(
    path: &Path,
    trials: usize,
    tol: f64,
    seed: u64,
    exhaustive: bool,
) -> CliResult<(String, VerificationReport)> {
    let ckpt = checkpoint::load(path)?;
    let wts = ckpt.weights;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let insts = instances(wts.d, wts.padding, trials, exhaustive, &mut rng)?;
    let meta = Sidecar::path_for(path);
    if meta.exists() {
        let side = Sidecar::load(&meta)?;
        let report = verify_on(&side.bundle(wts), insts, tol)?;
        return Ok((side.name.as_str().to_string(), report));
    }
    let errors = insts
        .iter()
        .map(|inst| {
            let got = predict(&wts, &inst.assemble().h0)?;
            Ok(got.max_abs_diff(&inst.y).unwrap_or(f64::INFINITY))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    let max_error = errors.iter().fold(0.0f64, |m, &e| if e.is_nan() { f64::NAN } else { m.max(e) });
    Ok((
        "readout".to_string(),
        VerificationReport {
            name: ConstructionName::Thm2Cmf,
            pass: max_error < tol,
            errors,
            max_error,
            tol,
        },
    ))
}

pub fn cmd_verify(a: VerifyArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = load_config(&a.config, VERIFY_KEYS)?;
    let f = file.as_ref();
    let trials = pick(a.trials, f, "trials", 100)?;
    let tol = pick(a.tol, f, "tol", 1e-6)?;
    let seed = pick_seed(a.seed, f)?;
    let exhaustive = pick(a.exhaustive, f, "exhaustive", false)?;
    let (name, report) = verify_checkpoint(&a.checkpoint, trials, tol, seed, exhaustive)?;
    emit(
        out,
        Record::new("verify")
            .field("name", &name)
            .field("trials", report.errors.len())
            .real("max_error", report.max_error)
            .real("tol", tol)
            .verdict(report.pass),
    )?;
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "verification of {name} failed: max error {:.3e} >= tol {tol:.3e}",
            report.max_error
        )))
    }
}

fn non_identity_permutation(d: usize, rng: &mut ChaCha8Rng) -> CliResult<Permutation> {
    if d < 2 {
        return Err(CliError::Usage("the witness needs d >= 2".into()));
    }
    loop {
        let p = sample_permutation(d, rng)?;
        if !p.is_identity() {
            return Ok(p);
        }
    }
}

pub fn cmd_probe(a: ProbeArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = load_config(&a.config, PROBE_KEYS)?;
    let f = file.as_ref();
    let seed = pick_seed(a.seed, f)?;
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let wts = ckpt.weights;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match a.mode {
        ProbeMode::Scan => {
            let tol = pick(a.tol, f, "tol", 1e-3)?;
            let inst = TaskInstance::sample(wts.d, wts.padding, &mut rng)?;
            let stream = forward(&wts, &inst.assemble().h0)?;
            let hits = scan_blocks(&stream, &inst.y, tol)?;
            for m in &hits {
                emit(
                    out,
                    Record::new("match")
                        .field("level", m.level)
                        .field("row_offset", m.row_offset)
                        .field("col_block", m.col_block)
                        .real("max_abs_err", m.max_abs_err),
                )?;
            }
            emit(out, Record::new("scan").field("seed", seed).real("tol", tol).field("matches", hits.len()))
        }
        ProbeMode::Lemma1 => {
            let trials = pick(a.trials, f, "trials", 100)?;
            let fixed_row = match a.row {
                Some(r) => Some(r),
                None => f.map(|f| f.get::<usize>("row")).transpose()?.flatten(),
            };
            let t = wts.seq_len();
            let mut passed = 0;
            for trial in 0..trials {
                let inst = TaskInstance::sample(wts.d, wts.padding, &mut rng)?;
                let r = fixed_row.unwrap_or_else(|| rng.random_range(1..t.max(2)).min(t - 1));
                let perturb: Vec<f64> = (0..wts.width(0)).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let verdict = lemma1_check(&wts, &inst.assemble().h0, r, &perturb)?;
                match verdict {
                    Lemma1Verdict::Pass => passed += 1,
                    Lemma1Verdict::Fail { level, row, col } => emit(
                        out,
                        Record::new("lemma1_fail")
                            .field("trial", trial)
                            .field("perturbed_row", r)
                            .field("level", level)
                            .field("row", row)
                            .field("col", col),
                    )?,
                }
            }
            let pass = passed == trials;
            emit(out, Record::new("lemma1").field("trials", trials).field("passed", passed).verdict(pass))?;
            if pass {
                Ok(())
            } else {
                Err(CliError::Failed(format!("prefix invariance failed in {} of {trials} trials", trials - passed)))
            }
        }
        ProbeMode::Witness => {
            let trials = pick(a.trials, f, "trials", 1)?;
            let mut failures = 0;
            for trial in 0..trials {
                let p = non_identity_permutation(wts.d, &mut rng)?;
                let rep = theorem1_witness(&wts, &p.to_matrix(), &mut rng)?;
                if !rep.pass {
                    failures += 1;
                }
                emit(
                    out,
                    Record::new("witness")
                        .field("trial", trial)
                        .field("i", rep.i)
                        .field("j", rep.j)
                        .field("first_diff_row", rep.first_diff_row)
                        .field("prefix_identical", rep.prefix_identical)
                        .field("common", rep.common.len())
                        .verdict(rep.pass),
                )?;
            }
            if failures == 0 {
                Ok(())
            } else {
                Err(CliError::Failed(format!("witness failed in {failures} of {trials} trials")))
            }
        }
    }
}

/// Denominator floor of the gradient-check relative error. Central
/// differences at `eps = 1e-5` carry round-off of a few `1e-11` on an O(1)
/// loss, so entries smaller than this are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

/// One gradient-check setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckSpec {
    pub d: usize,
    pub depth: usize,
    pub mask: MaskMode,
    pub padding: Padding,
    pub eps: f64,
    pub trials: usize,
    pub batch: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub floor: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            d: 3,
            depth: 2,
            mask: MaskMode::Cmf,
            padding: Padding::None,
            eps: 1e-5,
            trials: 1,
            batch: 2,
            seed: 0,
            init_scale: 0.3,
            floor: GRADCHECK_FLOOR,
        }
    }
}

/// Worst relative gradient error over `spec.trials` random models, each on
/// its own batch with uniform targets.
pub fn gradcheck(spec: &GradcheckSpec) -> CliResult<f64> {
    let mut worst = 0.0f64;
    for t in 0..spec.trials as u64 {
        let cfg = TrainConfig {
            d: spec.d,
            depth: spec.depth,
            mask: spec.mask,
            padding: spec.padding,
            init_scale: spec.init_scale,
            seed: spec.seed.wrapping_add(t),
            steps: 1,
            eval_every: 1,
            ..TrainConfig::default()
        };
        let wts = init_weights(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(7);
        let insts = (0..spec.batch)
            .map(|_| {
                let p = sample_permutation(spec.d, &mut rng)?.to_matrix();
                let y = sample_uniform_target(spec.d, &mut rng)?;
                TaskInstance::new(p, y, spec.padding)
            })
            .collect::<permlab_core::Result<Vec<_>>>()?;
        let exact = grad(&wts, &insts)?;
        let numeric = finite_diff_grad(&wts, &insts, spec.eps)?;
        let err = max_relative_error(&exact, &numeric, spec.floor);
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
    }
    Ok(worst)
}

pub fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = load_config(&a.config, GRADCHECK_KEYS)?;
    let f = file.as_ref();
    let dflt = GradcheckSpec::default();
    let spec = GradcheckSpec {
        d: pick(a.d, f, "d", dflt.d)?,
        depth: pick(a.depth, f, "depth", dflt.depth)?,
        mask: pick(a.mask, f, "mask", dflt.mask)?,
        padding: pick(a.padding, f, "padding", dflt.padding)?,
        eps: pick(a.eps, f, "eps", dflt.eps)?,
        trials: pick(a.trials, f, "trials", dflt.trials)?,
        batch: pick(a.batch, f, "batch", dflt.batch)?,
        seed: pick_seed(a.seed, f)?,
        init_scale: pick(a.init_scale, f, "init_scale", dflt.init_scale)?,
        floor: pick(a.floor, f, "floor", dflt.floor)?,
    };
    let tol = pick(a.tol, f, "tol", 1e-5)?;
    if spec.trials == 0 || spec.batch == 0 {
        return Err(CliError::Usage("trials and batch must be at least 1".into()));
    }
    let worst = gradcheck(&spec)?;
    let pass = worst < tol;
    emit(
        out,
        Record::new("gradcheck")
            .field("d", spec.d)
            .field("depth", spec.depth)
            .field("mask", spec.mask.as_str())
            .field("trials", spec.trials)
            .real("max_rel_err", worst)
            .real("tol", tol)
            .verdict(pass),
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed: {worst:.3e} >= {tol:.3e}")))
    }
}

fn selected_matrix(wts: &ModelWeights, layer: LayerSel) -> CliResult<(&Matrix, String)> {
    match layer {
        LayerSel::Readout => Ok((&wts.w, "W".into())),
        LayerSel::Attn(k) if k <= wts.depth() => Ok((&wts.attn[k - 1], format!("A{k}"))),
        LayerSel::Attn(k) => Err(CliError::Usage(format!("layer {k} out of range 1..={}", wts.depth()))),
    }
}

pub fn cmd_heatmap(a: HeatmapArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = load_config(&a.config, HEATMAP_KEYS)?;
    let f = file.as_ref();
    let layer = pick(a.layer, f, "layer", LayerSel::Attn(1))?;
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let wts = &ckpt.weights;
    let (m, name) = selected_matrix(wts, layer)?;
    let prefix = pick(a.out, f, "out", PathBuf::from(format!("heatmap_{name}")))?;
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    let (pgm, csv) = (with_ext(".pgm"), with_ext(".csv"));
    write_file(&pgm, &heatmap::to_pgm(m))?;
    write_file(&csv, &heatmap::to_csv(m))?;
    emit(
        out,
        Record::new("heatmap")
            .field("matrix", &name)
            .field("rows", m.rows())
            .field("cols", m.cols())
            .field("pgm", pgm.display())
            .field("csv", csv.display()),
    )?;
    let summary = block_summary(m, wts.d, BlockNorm::MaxAbs)?;
    if let Some(b) = dominant_block(&summary) {
        emit(
            out,
            Record::new("dominant")
                .field("block_row", b.row)
                .field("block_col", b.col)
                .real("value", b.value)
                .real("ratio", b.ratio()),
        )?;
    }
    let fit = best_single_block_fit(m, wts.d)?;
    emit(
        out,
        Record::new("fit")
            .field("pattern", &fit.pattern)
            .real("beta_hat", fit.beta_hat)
            .real("residual", fit.residual),
    )
}
