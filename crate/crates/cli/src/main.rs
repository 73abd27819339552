mod commands;
mod config;
mod data;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands::{defaults, execute, non_finite, read_json, render_table, CommandKind};
use crate::config::*;
use crate::output::{default_run_dir, describe_outputs, RunDir, RunManifest, MANIFEST, SCHEMA_VERSION};

/// σ-PCA and friends: linear and nonlinear PCA, ICA and filter learning.
#[derive(Parser)]
#[command(name = "sigma-pca", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// SVD or a gradient-trained linear PCA rule.
    Pca(PcaArgs),
    /// σ-PCA with every model option exposed.
    Nlpca(NlpcaArgs),
    /// Linear ICA: FastICA, two-stage, two-layer σ-PCA or EASI.
    Ica(IcaArgs),
    /// Blind separation of mixed sine, square and sawtooth sources.
    Signals(SignalsArgs),
    /// Unrotating a 2-D point cloud.
    #[command(name = "points2d")]
    Points2d(PointsArgs),
    /// Filters learnt from image patches, written as a PNG grid.
    Patches(PatchesArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Prints a metrics JSON file or a run directory as a table.
    Report {
        path: PathBuf,
    },
    /// Re-runs a recorded run and compares every output hash.
    Replay {
        /// Run directory or manifest file.
        path: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to $SIGMA_PCA_RUNS (or ./runs)/<timestamp>-<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    checkpoint: Option<Checkpoint>,
    #[arg(long)]
    unit_norm: Option<UnitNormKind>,
    #[arg(long)]
    orthogonality: Option<OrthKind>,
    /// Independent seeds run in parallel, each in its own shard.
    #[arg(long)]
    runs: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, c: &mut Config) {
        c.optimizer.kind = self.optimizer;
        c.optimizer.lr = self.lr;
        c.optimizer.momentum = self.momentum;
        c.train.batch_size = self.batch_size;
        c.train.epochs = self.epochs;
        c.train.checkpoint = self.checkpoint;
        c.constraints.unit_norm = self.unit_norm;
        c.constraints.orthogonality = self.orthogonality;
        c.runs = self.runs;
    }
}

#[derive(Args)]
struct SignalData {
    #[arg(long)]
    mixing: Option<Mixing>,
    #[arg(long)]
    n: Option<usize>,
    /// Noise std relative to each source's std.
    #[arg(long)]
    noise: Option<f64>,
    /// Numeric CSV to use instead of generated signals.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl SignalData {
    fn apply(&self, c: &mut Config) {
        c.data.mixing = self.mixing;
        c.data.n = self.n;
        c.data.noise = self.noise;
        c.data.path = self.data.clone();
    }
}

#[derive(Args)]
struct PcaArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    variant: Option<PcaVariant>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    refine_epochs: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct NlpcaArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    data: SignalData,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    decoder: Option<Decoder>,
    #[arg(long)]
    ordering: Option<OrderingKind>,
    #[arg(long)]
    triangular_variant: Option<u8>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    sigma_mode: Option<SigmaModeKind>,
    #[arg(long)]
    mu_mode: Option<MuModeKind>,
    #[arg(long)]
    l2: Option<f64>,
}

#[derive(Args)]
struct IcaArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    data: SignalData,
    #[arg(long)]
    method: Option<IcaMethod>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    v_a: Option<f64>,
    #[arg(long)]
    contrast: Option<ContrastKind>,
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct SignalsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    mixing: Option<Mixing>,
    #[arg(long)]
    method: Option<SignalMethodKind>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    v_a: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct PointsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    dist: Option<Dist>,
    /// Rotation angle in radians.
    #[arg(long, allow_negative_numbers = true)]
    theta: Option<f64>,
    #[arg(long)]
    method: Option<PointsMethod>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    equal_var: Option<bool>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct PatchesArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    method: Option<PatchMethodKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    decoder: Option<Decoder>,
    #[arg(long)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    refine_epochs: Option<usize>,
    /// Folder of images; procedural bars when absent.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Number of procedural images.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    zero_pad: Option<bool>,
    /// Pixels between grid tiles.
    #[arg(long)]
    gap: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
}

/// Command kind, common options and the flag layer.
fn flag_layer(cmd: &Cmd) -> (CommandKind, &Common, Config) {
    let mut c = Config::default();
    let (kind, common) = match cmd {
        Cmd::Pca(a) => {
            a.train.apply(&mut c);
            c.method.variant = a.variant;
            c.method.k = a.k;
            c.train.refine_epochs = a.refine_epochs;
            c.data.n = a.n;
            c.data.path = a.data.clone();
            (CommandKind::Pca, &a.common)
        }
        Cmd::Nlpca(a) => {
            a.train.apply(&mut c);
            a.data.apply(&mut c);
            let m = &mut c.method;
            m.k = a.k;
            m.a = a.a;
            m.decoder = a.decoder;
            m.ordering = a.ordering;
            m.triangular_variant = a.triangular_variant;
            m.objective = a.objective;
            m.sigma_mode = a.sigma_mode;
            m.mu_mode = a.mu_mode;
            m.l2 = a.l2;
            (CommandKind::Nlpca, &a.common)
        }
        Cmd::Ica(a) => {
            a.train.apply(&mut c);
            a.data.apply(&mut c);
            let m = &mut c.method;
            m.ica = a.method;
            m.k = a.k;
            m.a = a.a;
            m.v_a = a.v_a;
            m.contrast = a.contrast;
            m.eta = a.eta;
            (CommandKind::Ica, &a.common)
        }
        Cmd::Signals(a) => {
            a.train.apply(&mut c);
            c.method.signals = a.method;
            c.method.a = a.a;
            c.method.v_a = a.v_a;
            c.data.mixing = a.mixing;
            c.data.n = a.n;
            c.data.noise = a.noise;
            (CommandKind::Signals, &a.common)
        }
        Cmd::Points2d(a) => {
            a.train.apply(&mut c);
            c.method.points = a.method;
            c.method.a = a.a;
            c.data.dist = a.dist;
            c.data.theta = a.theta;
            c.data.n = a.n;
            c.data.equal_var = a.equal_var;
            c.data.path = a.data.clone();
            (CommandKind::Points2d, &a.common)
        }
        Cmd::Patches(a) => {
            a.train.apply(&mut c);
            c.method.patches = a.method;
            c.method.k = a.k;
            c.method.a = a.a;
            c.method.decoder = a.decoder;
            c.method.objective = a.objective;
            c.train.refine_epochs = a.refine_epochs;
            c.data.images = a.images.clone();
            c.data.count = a.count;
            c.data.size = a.size;
            c.data.stride = a.stride;
            c.data.zero_pad = a.zero_pad;
            c.data.gap = a.gap;
            (CommandKind::Patches, &a.common)
        }
        Cmd::Gradcheck(a) => {
            c.method.instances = a.instances;
            c.method.h = a.h;
            c.method.tol = a.tol;
            (CommandKind::Gradcheck, &a.common)
        }
        Cmd::Report { .. } | Cmd::Replay { .. } => unreachable!("not a run command"),
    };
    c.seed = common.seed;
    (kind, common, c)
}

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;

/// Error that maps to a specific exit code.
struct Exit(u8, anyhow::Error);

impl From<anyhow::Error> for Exit {
    fn from(e: anyhow::Error) -> Self {
        Exit(EXIT_FAIL, e)
    }
}

fn usage(e: anyhow::Error) -> Exit {
    Exit(EXIT_USAGE, e)
}

fn check(kind: CommandKind, cfg: &Config) -> Result<()> {
    cfg.validate()?;
    if kind.trains() {
        cfg.train_config()?;
    }
    Ok(())
}

/// Runs `kind` under a complete configuration and records the manifest.
fn run(kind: CommandKind, cfg: &Config, out: Option<PathBuf>) -> Result<(RunDir, RunManifest), Exit> {
    let root = out.unwrap_or_else(|| default_run_dir(cfg.seed()));
    let mut dir = RunDir::create(&root)?;
    dir.write_bytes("config.toml", cfg.to_toml().as_bytes())?;
    let result = execute(kind, cfg, &mut dir);
    let (status, metrics) = match &result {
        Ok(o) => (if o.passed { "ok" } else { "failed" }, o.metrics.clone()),
        Err(e) if non_finite(e).is_some() => ("non_finite", serde_json::Value::Null),
        Err(_) => ("error", serde_json::Value::Null),
    };
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: kind.name().to_string(),
        argv: std::env::args().collect(),
        seed: cfg.seed(),
        config: cfg.clone(),
        status: status.to_string(),
        created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        metrics,
        outputs: describe_outputs(&dir)?,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?;
    text.push('\n');
    std::fs::write(root.join(MANIFEST), text).map_err(anyhow::Error::from)?;
    match result {
        Ok(_) => Ok((dir, manifest)),
        Err(e) if non_finite(&e).is_some() => {
            let e = e.context(format!("diagnostic written to {}", root.join("nan_diagnostic.json").display()));
            Err(Exit(EXIT_NON_FINITE, e))
        }
        Err(e) => Err(e.into()),
    }
}

fn report_run(dir: &RunDir, manifest: &RunManifest) {
    println!("run directory: {}", dir.root.display());
    println!("status: {}", manifest.status);
    print!("{}", render_table(&manifest.metrics));
}

fn replay(path: PathBuf, out: Option<PathBuf>) -> Result<u8, Exit> {
    let recorded: RunManifest = serde_json::from_value(read_json(&path).map_err(usage)?)
        .map_err(|e| usage(anyhow::Error::from(e).context("not a run manifest")))?;
    let kind = CommandKind::parse(&recorded.command).map_err(usage)?;
    check(kind, &recorded.config).map_err(usage)?;
    let (dir, fresh) = run(kind, &recorded.config, out)?;
    println!("replayed into {}", dir.root.display());
    let mut mismatches = 0;
    for want in &recorded.outputs {
        match fresh.outputs.iter().find(|o| o.path == want.path) {
            Some(got) if got.sha256 == want.sha256 => {}
            Some(_) => {
                mismatches += 1;
                println!("differs: {}", want.path);
            }
            None => {
                mismatches += 1;
                println!("missing: {}", want.path);
            }
        }
    }
    if mismatches == 0 {
        println!("all {} outputs identical", recorded.outputs.len());
        Ok(0)
    } else {
        Ok(EXIT_FAIL)
    }
}

fn main_inner(cli: Cli) -> Result<u8, Exit> {
    match cli.command {
        Cmd::Report { path } => {
            let v = read_json(&path).map_err(usage)?;
            let shown = match (v.get("command"), v.get("metrics")) {
                (Some(cmd), Some(m)) => {
                    println!("command: {}", cmd.as_str().unwrap_or("?"));
                    if let Some(s) = v.get("status").and_then(|s| s.as_str()) {
                        println!("status: {s}");
                    }
                    m.clone()
                }
                _ => v,
            };
            print!("{}", render_table(&shown));
            Ok(0)
        }
        Cmd::Replay { path, out } => replay(path, out),
        cmd => {
            let (kind, common, flags) = flag_layer(&cmd);
            let file = match &common.config {
                Some(p) => Config::load(p).map_err(usage)?,
                None => Config::default(),
            };
            let cfg = defaults(kind).layered(&file).layered(&flags);
            check(kind, &cfg).map_err(usage)?;
            let (dir, manifest) = run(kind, &cfg, common.out.clone())?;
            report_run(&dir, &manifest);
            Ok(if manifest.status == "ok" { 0 } else { EXIT_FAIL })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
