//! The `cpa` command line: degradation synthesis, enhancement, training,
//! gradient checking and discriminability reports.
//!
//! Exit codes: 0 success, 1 verification failure, 2 input or configuration
//! error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{build_manifest, probe_set, sample_spec, scene, synthetic_pairs, Manifest};
use crate::degrade::{derive_seed, Degradation, DegradationKind, DegradationSpec, RainBlend, RainParams, SnowDensity};
use crate::enhancer::Enhancer;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckOptions;
use crate::image::Image;
use crate::params::ParamStore;
use crate::suite;
use crate::tensor::Tensor;
use crate::train::{measure_discriminability, train, DiscriminabilityReport};

#[derive(Debug, Parser)]
#[command(name = "cpa", version, about = "Prompt-conditioned image enhancer toolkit")]
pub struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file with `[enhancer]` and `[train]` tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print progress details to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes synthetic clean scenes as PNG files.
    Scenes(ScenesArgs),
    /// Degrades one image, or every image of a directory with a manifest.
    Degrade(DegradeArgs),
    /// Writes a freshly initialized checkpoint.
    Init(InitArgs),
    /// Enhances one image with a checkpoint.
    Enhance(EnhanceArgs),
    /// Runs the gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// Trains on synthetic pairs or a manifest with L1 restoration loss.
    Train(TrainArgs),
    /// Compares degradation discriminability of a checkpoint against its untrained baseline.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ScenesArgs {
    /// Output directory.
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Fog,
    Dark,
    Snow,
    Rain,
    Noise,
}

impl From<KindArg> for DegradationKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Fog => DegradationKind::Fog,
            KindArg::Dark => DegradationKind::Dark,
            KindArg::Snow => DegradationKind::Snow,
            KindArg::Rain => DegradationKind::Rain,
            KindArg::Noise => DegradationKind::Noise,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DensityArg {
    Light,
    Medium,
    Heavy,
}

impl From<DensityArg> for SnowDensity {
    fn from(d: DensityArg) -> Self {
        match d {
            DensityArg::Light => SnowDensity::Light,
            DensityArg::Medium => SnowDensity::Medium,
            DensityArg::Heavy => SnowDensity::Heavy,
        }
    }
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    /// Source image, or a directory of PNG/PPM images.
    pub input: PathBuf,
    /// Output image, or the output directory in directory mode.
    pub output: PathBuf,
    /// Degradation for a single image.
    #[arg(long)]
    pub kind: Option<KindArg>,
    /// Fog atmospheric light.
    #[arg(long = "A")]
    pub airlight: Option<f64>,
    /// Fog level 0..=9.
    #[arg(long = "i")]
    pub level: Option<u32>,
    /// Low-light gamma.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Snow density.
    #[arg(long)]
    pub density: Option<DensityArg>,
    /// Rain intensity.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Gaussian noise level on the 0..255 scale.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Composite rain as bright streaks instead of the default blend.
    #[arg(long)]
    pub rain_overlay: bool,
    /// Directory mode: kinds to cycle through.
    #[arg(long, value_delimiter = ',', default_values = ["fog", "dark", "snow", "rain", "noise"])]
    pub kinds: Vec<KindArg>,
    /// Directory mode: fraction of images that are degraded.
    #[arg(long, default_value_t = 1.0)]
    pub mix: f64,
    /// Directory mode: manifest path (default `OUTPUT/manifest.jsonl`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Checkpoint to write.
    pub out: PathBuf,
    /// Zero the output projection so the network is the identity.
    #[arg(long)]
    pub zero_output: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Writes decoder-level features as `level{1,2,3}.bin` (f64 little-endian) with JSON sidecars.
    #[arg(long)]
    pub dump_features: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Test hook: negate the backward rule of this op.
    #[arg(long)]
    pub inject_fault: Option<String>,
    /// Only run cases whose name contains this text.
    #[arg(long)]
    pub only: Option<String>,
    /// Skip the full-network case.
    #[arg(long)]
    pub no_enhancer: bool,
    /// Also write the reports as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV (`iter,loss`).
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Training pairs from a manifest instead of synthetic scenes.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Overrides `train.iters`.
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON report path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Probe kinds (default: the training kinds).
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<KindArg>,
    /// Clean scenes per kind.
    #[arg(long, default_value_t = 8)]
    pub probes: usize,
    /// Probe side length (default: the training size).
    #[arg(long)]
    pub size: Option<usize>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command; `Ok` carries 0 or the verification-failure code.
pub fn execute(cli: &Cli) -> Result<i32> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let seed = cfg.train.seed;
    match &cli.command {
        Command::Scenes(a) => scenes(a, seed),
        Command::Degrade(a) => degrade(a, seed),
        Command::Init(a) => init(a, &cfg, seed),
        Command::Enhance(a) => enhance(a, &cfg),
        Command::Gradcheck(a) => gradcheck(a, seed),
        Command::Train(a) => train_cmd(a, &cfg, cli.verbose > 0),
        Command::Report(a) => report(a, &cfg, seed),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} `{}` not found", path.display())))
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

fn scenes(a: &ScenesArgs, seed: u64) -> Result<i32> {
    if a.size == 0 {
        return Err(Error::Parameter("scene size must be positive".into()));
    }
    fs::create_dir_all(&a.out)?;
    for i in 0..a.count {
        let path = a.out.join(format!("scene_{i:03}.png"));
        scene(a.size, a.size, derive_seed(seed, i as u64)).save(&path)?;
        println!("{}", path.display());
    }
    Ok(0)
}

/// The degradation for one image: sampled from the seed, with explicit flags taking precedence.
fn single_spec(a: &DegradeArgs, kind: DegradationKind, seed: u64) -> Result<DegradationSpec> {
    let mut spec = sample_spec(kind, seed);
    let d = &mut spec.degradation;
    let unused = |flag: &str| Error::Usage(format!("--{flag} does not apply to --kind {kind}"));
    match d {
        Degradation::Fog { airlight, level } => {
            *airlight = a.airlight.unwrap_or(*airlight);
            *level = a.level.unwrap_or(*level);
        }
        Degradation::Dark { gamma } => *gamma = a.gamma.unwrap_or(*gamma),
        Degradation::Snow { density } => *density = a.density.map_or(*density, Into::into),
        Degradation::Rain { beta, blend } => {
            *beta = a.beta.unwrap_or(*beta);
            if a.rain_overlay {
                *blend = RainBlend::Overlay;
            }
        }
        Degradation::Noise { sigma } => *sigma = a.sigma.unwrap_or(*sigma),
        Degradation::None => {}
    }
    let flags = [
        ("A", a.airlight.is_some(), DegradationKind::Fog),
        ("i", a.level.is_some(), DegradationKind::Fog),
        ("gamma", a.gamma.is_some(), DegradationKind::Dark),
        ("density", a.density.is_some(), DegradationKind::Snow),
        ("beta", a.beta.is_some(), DegradationKind::Rain),
        ("rain-overlay", a.rain_overlay, DegradationKind::Rain),
        ("sigma", a.sigma.is_some(), DegradationKind::Noise),
    ];
    if let Some((flag, ..)) = flags.iter().find(|(_, set, k)| *set && *k != kind) {
        return Err(unused(flag));
    }
    Ok(spec)
}

fn degrade(a: &DegradeArgs, seed: u64) -> Result<i32> {
    if a.input.is_dir() {
        if a.kind.is_some() {
            return Err(Error::Usage("--kind applies to single images; use --kinds with a directory".into()));
        }
        let kinds: Vec<DegradationKind> = a.kinds.iter().map(|&k| k.into()).collect();
        fs::create_dir_all(&a.output)?;
        let mut manifest = build_manifest(&a.input, &a.output, &kinds, a.mix, seed)?;
        if a.rain_overlay {
            for e in &mut manifest.entries {
                if let Degradation::Rain { blend, .. } = &mut e.spec.degradation {
                    *blend = RainBlend::Overlay;
                }
            }
        }
        manifest.materialize(&RainParams::default())?;
        let path = a.manifest.clone().unwrap_or_else(|| a.output.join("manifest.jsonl"));
        create_parent(&path)?;
        manifest.save(&path)?;
        print!("{}", manifest.to_jsonl()?);
        return Ok(0);
    }
    require_file(&a.input, "input image")?;
    let kind = a
        .kind
        .ok_or_else(|| Error::Usage("--kind is required for a single image".into()))?
        .into();
    let spec = single_spec(a, kind, seed)?;
    let img = Image::load(&a.input)?;
    let out = spec.apply(&img)?;
    create_parent(&a.output)?;
    out.save(&a.output)?;
    let entry = crate::dataset::ManifestEntry {
        src: a.input.clone(),
        dst: a.output.clone(),
        spec,
        annotation: None,
    };
    println!("{}", serde_json::to_string(&entry)?);
    Ok(0)
}

fn init(a: &InitArgs, cfg: &RunConfig, seed: u64) -> Result<i32> {
    let net = Enhancer::new(cfg.enhancer.clone())?;
    let mut params = net.init_params(seed)?;
    if a.zero_output {
        net.zero_output(&mut params);
    }
    create_parent(&a.out)?;
    checkpoint::save(&params, cfg.enhancer.elem_type, &a.out)?;
    println!("{} parameters -> {}", params.numel(), a.out.display());
    Ok(0)
}

fn load_checkpoint(net: &Enhancer, path: &Path) -> Result<ParamStore> {
    require_file(path, "checkpoint")?;
    let params = checkpoint::load(path)?;
    net.check_params(&params)?;
    Ok(params)
}

#[derive(Serialize)]
struct FeatureSidecar {
    level: usize,
    shape: [usize; 4],
    dtype: &'static str,
}

/// Writes `t` as raw little-endian f64 values plus a JSON shape sidecar.
pub fn dump_tensor(dir: &Path, level: usize, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(format!("level{level}.bin")), bytes)?;
    let sidecar = FeatureSidecar {
        level,
        shape: t.shape().dims(),
        dtype: "f64le",
    };
    fs::write(dir.join(format!("level{level}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn enhance(a: &EnhanceArgs, cfg: &RunConfig) -> Result<i32> {
    require_file(&a.input, "input image")?;
    let net = Enhancer::new(cfg.enhancer.clone())?;
    let params = load_checkpoint(&net, &a.checkpoint)?;
    let img = Image::load(&a.input)?;
    let out = net.enhance(&params, &img.to_tensor())?;
    create_parent(&a.output)?;
    Image::from_tensor(&out.image, 0)?.save(&a.output)?;
    if let Some(dir) = &a.dump_features {
        fs::create_dir_all(dir)?;
        for (i, t) in out.features.levels.iter().enumerate() {
            dump_tensor(dir, i + 1, t)?;
        }
    }
    println!("{}", a.output.display());
    Ok(0)
}

fn gradcheck(a: &GradcheckArgs, seed: u64) -> Result<i32> {
    if !(a.tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance {} must be positive", a.tol)));
    }
    let mut cases = suite::standard_suite(seed, !a.no_enhancer)?;
    if let Some(only) = &a.only {
        cases.retain(|c| c.name.contains(only.as_str()));
        if cases.is_empty() {
            return Err(Error::Input(format!("no gradient-check case matches `{only}`")));
        }
    }
    let opts = GradCheckOptions {
        tol: a.tol,
        seed,
        flip_sign_of: a.inject_fault.clone(),
        ..GradCheckOptions::default()
    };
    if let Some(op) = &a.inject_fault {
        println!("injected sign flip into op `{op}`");
    }
    let report = suite::run(&cases, &opts)?;
    for r in &report.reports {
        println!(
            "{:<28} {:.3e}  {}",
            r.op,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = &a.json {
        create_parent(path)?;
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    if report.passed {
        println!("all {} cases pass at tol {:e} (worst {:.3e})", report.reports.len(), a.tol, report.max_rel_error);
        Ok(0)
    } else {
        let failed: Vec<&str> = report.failures().map(|r| r.op.as_str()).collect();
        println!("FAILED at tol {:e}: {}", a.tol, failed.join(", "));
        Ok(1)
    }
}

fn train_cmd(a: &TrainArgs, cfg: &RunConfig, verbose: bool) -> Result<i32> {
    if let Some(m) = &a.manifest {
        require_file(m, "manifest")?;
    }
    if let Some(p) = &a.init {
        require_file(p, "initial checkpoint")?;
    }
    let mut tcfg = cfg.train.clone();
    if let Some(iters) = a.iters {
        tcfg.iters = iters;
    }
    tcfg.validate()?;
    let net = Enhancer::new(cfg.enhancer.clone())?;
    let params = match &a.init {
        Some(p) => load_checkpoint(&net, p)?,
        None => net.init_params(tcfg.seed)?,
    };
    let pairs = match &a.manifest {
        Some(m) => Manifest::load(m)?.load_pairs()?,
        None => synthetic_pairs(tcfg.images, tcfg.size, &tcfg.kinds, tcfg.seed)?,
    };
    let mut csv = String::from("iter,loss\n");
    let outcome = train(&net, params, &pairs, &tcfg, |i, loss| {
        csv.push_str(&format!("{i},{loss:e}\n"));
        if verbose {
            eprintln!("iter {i} loss {loss:.6}");
        }
    })?;
    create_parent(&a.out)?;
    checkpoint::save(&outcome.params, cfg.enhancer.elem_type, &a.out)?;
    if let Some(path) = &a.curve {
        create_parent(path)?;
        fs::File::create(path)?.write_all(csv.as_bytes())?;
    }
    println!(
        "dataset loss {:.6} -> {:.6} (ratio {:.4}) after {} iterations",
        outcome.initial_loss,
        outcome.final_loss,
        outcome.final_loss / outcome.initial_loss,
        tcfg.iters
    );
    Ok(0)
}

#[derive(Serialize)]
struct LevelComparison {
    level: usize,
    trained: DiscriminabilityReport,
    baseline: DiscriminabilityReport,
    improved: bool,
}

#[derive(Serialize)]
struct DiscriminabilitySummary {
    seed: u64,
    kinds: Vec<DegradationKind>,
    probes_per_kind: usize,
    levels: Vec<LevelComparison>,
}

fn report(a: &ReportArgs, cfg: &RunConfig, seed: u64) -> Result<i32> {
    let kinds: Vec<DegradationKind> = if a.kinds.is_empty() {
        cfg.train.kinds.clone()
    } else {
        a.kinds.iter().map(|&k| k.into()).collect()
    };
    let mut distinct = kinds.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Input(format!("discriminability needs at least 2 kinds, got {}", distinct.len())));
    }
    let net = Enhancer::new(cfg.enhancer.clone())?;
    let trained = load_checkpoint(&net, &a.checkpoint)?;
    let baseline = net.init_params(seed)?;
    let size = a.size.unwrap_or(cfg.train.size);
    let probes = probe_set(a.probes, size, &distinct, derive_seed(seed, u64::from(u32::MAX)))?;
    let levels = (1..=3)
        .map(|level| {
            let t = measure_discriminability(&net, &trained, &probes, level)?;
            let b = measure_discriminability(&net, &baseline, &probes, level)?;
            Ok(LevelComparison {
                level,
                improved: t.silhouette > b.silhouette,
                trained: t,
                baseline: b,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = DiscriminabilitySummary {
        seed,
        kinds: distinct,
        probes_per_kind: a.probes,
        levels,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    match &a.out {
        Some(path) => {
            create_parent(path)?;
            fs::write(path, json)?;
            for l in &summary.levels {
                println!(
                    "level {}: trained {:.4} vs baseline {:.4}",
                    l.level, l.trained.silhouette, l.baseline.silhouette
                );
            }
        }
        None => println!("{json}"),
    }
    Ok(0)
}
