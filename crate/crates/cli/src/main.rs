//! Command-line front end: synthesize scenes, train, evaluate, render maps,
//! run the channel-variance diagnostic, export features and sweep the monitor.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hsi_uda::checkpoint::{load_checkpoint, save_checkpoint};
use hsi_uda::eval::{
    channel_variance_report, classification_map, count_parameters, evaluate, export_features, MaskMode,
};
use hsi_uda::experiment::{prepare_pair, sweep, SynthSpec};
use hsi_uda::hsidata::{extract_patches, load_scene, save_scene, synth_domain_pair, zscore_normalize, Domain, HsiCube};
use hsi_uda::trainer::{train, TrainConfig, TrainedModel};

#[derive(Parser)]
#[command(name = "hsi-uda", version, about = "Domain-adaptive hyperspectral patch classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Recompute,
    Frozen,
}

impl From<ModeArg> for MaskMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Recompute => MaskMode::Recompute,
            ModeArg::Frozen => MaskMode::Frozen,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target scene pair.
    Synth {
        /// JSON scene description; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and telemetry.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a metrics report (JSON) for the labeled pixels of a scene.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value = "recompute")]
        mask_mode: ModeArg,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a classification map of every pixel as a binary PPM.
    Map {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value = "recompute")]
        mask_mode: ModeArg,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-channel inter-domain standard deviation of pooled features (CSV).
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_enum, default_value = "recompute")]
        mask_mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export pooled invariant features of a scene's labeled pixels (CSV).
    Export {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter count per group (JSON).
    Params {
        #[arg(long)]
        run: PathBuf,
    },
    /// Target OA over a grid of sigmoid slopes and offsets (CSV).
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Comma-separated slopes.
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,1.5,2,2.5")]
        k: Vec<f64>,
        /// Comma-separated offsets.
        #[arg(long, value_delimiter = ',', default_value = "0,1.25,2.5,3.75,5")]
        s: Vec<f64>,
        #[arg(long, value_enum, default_value = "recompute")]
        mask_mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A training config file: the trainer keys plus optional `source` / `target`
/// scene paths, resolved against the file's directory.
struct RunConfig {
    train: TrainConfig,
    source: Option<PathBuf>,
    target: Option<PathBuf>,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig {
            train: TrainConfig::default(),
            source: None,
            target: None,
        });
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut take = |key: &str| -> Result<Option<PathBuf>> {
        match value.as_object_mut().and_then(|o| o.remove(key)) {
            None => Ok(None),
            Some(serde_json::Value::String(s)) => Ok(Some(base.join(s))),
            Some(_) => bail!("{}: `{key}` must be a path string", path.display()),
        }
    };
    let source = take("source")?;
    let target = take("target")?;
    let train = serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))?;
    Ok(RunConfig { train, source, target })
}

fn scene_paths(cfg: &RunConfig, source: Option<PathBuf>, target: Option<PathBuf>) -> Result<(PathBuf, PathBuf)> {
    let source = source.or_else(|| cfg.source.clone()).context("no source scene (use --source or `source` in the config)")?;
    let target = target.or_else(|| cfg.target.clone()).context("no target scene (use --target or `target` in the config)")?;
    Ok((source, target))
}

fn load(path: &Path) -> Result<HsiCube> {
    load_scene(path).with_context(|| format!("loading scene {}", path.display()))
}

fn load_run(path: &Path) -> Result<TrainedModel> {
    load_checkpoint(path).with_context(|| format!("loading run {}", path.display()))
}

fn labeled_patches(model: &TrainedModel, scene: &Path, domain: Domain) -> Result<hsi_uda::hsidata::PatchSet> {
    let cube = zscore_normalize(&load(scene)?);
    Ok(extract_patches(&cube, model.config.patch_size, domain)?)
}

fn write_json<T: serde::Serialize>(value: &T, out: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(out, text + "\n").with_context(|| format!("writing {}", out.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, seed, out } => {
            let synth: SynthSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("invalid scene spec {}", p.display()))?
                }
                None => SynthSpec::default(),
            };
            let scene_spec = synth.scene_spec()?;
            let (src, tgt) = synth_domain_pair(&scene_spec, seed)?;
            save_scene(&src, out.join("source"), "scene")?;
            save_scene(&tgt, out.join("target"), "scene")?;
            write_json(&scene_spec, &out.join("scene_spec.json"))?;
            println!(
                "wrote {} ({} labeled source pixels, {} labeled target pixels)",
                out.display(),
                src.labeled_count(),
                tgt.labeled_count()
            );
        }
        Command::Train { config, source, target, out } => {
            let cfg = read_config(config.as_deref())?;
            let (sp, tp) = scene_paths(&cfg, source, target)?;
            let (src, tgt) = prepare_pair(&load(&sp)?, &load(&tp)?, cfg.train.patch_size)?;
            let model = train(&cfg.train, &src, &tgt)?;
            save_checkpoint(&model, &out)?;
            match model.history.last() {
                Some(last) => println!(
                    "trained {} epochs; final loss {:.4}, K {}; run saved to {}",
                    last.epoch,
                    last.losses.total,
                    model.final_k(),
                    out.display()
                ),
                None => println!("no epochs requested; initial model saved to {}", out.display()),
            }
        }
        Command::Eval { run, scene, mask_mode, domain, out } => {
            let model = load_run(&run)?;
            let set = labeled_patches(&model, &scene, domain.into())?;
            let report = evaluate(&model, &set, mask_mode.into())?;
            write_json(&report, &out)?;
            println!("OA {:.4}, kappa {:.4} on {} pixels", report.overall_accuracy, report.kappa, set.len());
        }
        Command::Map { run, scene, mask_mode, domain, out } => {
            let model = load_run(&run)?;
            let cube = zscore_normalize(&load(&scene)?);
            let map = classification_map(&model, &cube, &out, domain.into(), mask_mode.into())?;
            println!("wrote {}x{} map to {}", map.width, map.height, out.display());
        }
        Command::Report { run, source, target, mask_mode, out } => {
            let model = load_run(&run)?;
            let src = labeled_patches(&model, &source, Domain::Source)?;
            let tgt = labeled_patches(&model, &target, Domain::Target)?;
            let report = channel_variance_report(&model, &src, &tgt, mask_mode.into())?;
            report.write_csv(&out)?;
            println!(
                "mean std: invariant {:.4}, masked {:.4}, backbone {:.4}",
                report.mean_invariant(),
                report.mean_masked(),
                report.mean_backbone()
            );
        }
        Command::Export { run, scene, domain, out } => {
            let model = load_run(&run)?;
            let set = labeled_patches(&model, &scene, domain.into())?;
            export_features(&model, &set, &out)?;
            println!("wrote {} rows to {}", set.len(), out.display());
        }
        Command::Params { run } => {
            let model = load_run(&run)?;
            println!("{}", serde_json::to_string_pretty(&count_parameters(&model.network))?);
        }
        Command::Sweep { config, source, target, k, s, mask_mode, out } => {
            let cfg = read_config(config.as_deref())?;
            let (sp, tp) = scene_paths(&cfg, source, target)?;
            let (src, tgt) = prepare_pair(&load(&sp)?, &load(&tp)?, cfg.train.patch_size)?;
            let rows = sweep(&cfg.train, &k, &s, &src, &tgt, mask_mode.into())?;
            let mut w = csv::Writer::from_path(&out).with_context(|| format!("writing {}", out.display()))?;
            w.write_record(["k", "s", "mean_oa", "std_oa", "runs"])?;
            for r in &rows {
                w.write_record([
                    r.slope.to_string(),
                    r.offset.to_string(),
                    r.mean_oa.to_string(),
                    r.std_oa.to_string(),
                    r.runs.to_string(),
                ])?;
            }
            w.flush()?;
            println!("wrote {} grid points to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
