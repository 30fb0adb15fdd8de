use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tsccn_core::engine::{self, TrainConfig};
use tsccn_core::maskrepair::{self, RepairParams};
use tsccn_core::{imaging, load_manifest, Ablation, DatasetManifest, Error, SynthConfig};

const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Parser, Debug)]
#[command(name = "tsccn", version, about = "Vertebra classification with neighbor comparison")]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset: images, manifests and masks.
    Generate(GenerateArgs),
    /// Train one model and write checkpoints, metrics and loss curves.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train all six configurations and print a comparison table.
    Ablate(AblateArgs),
    /// Remove small components and fill gaps in vertebra masks.
    RepairMasks(RepairArgs),
    /// Write activation maps and a feature scatter for a checkpoint.
    Visualize(EvalArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct TrainOptions {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest used for model selection.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Fracture samples are pulled toward û instead of 1/û.
    #[arg(long)]
    paper_literal_weight_loss: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOptions,
    #[arg(long)]
    ablation: Option<Ablation>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    opts: TrainOptions,
    /// Manifest for the reported metrics; the validation manifest when absent.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    /// Runs per configuration with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RepairArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// A `*_mask.png` file or a directory of them.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RepairConfig {
    repair: RepairParams,
    /// Side of the cropped patches written when a matching `*_image.png` exists.
    patch_size: usize,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            repair: RepairParams::default(),
            patch_size: 224,
        }
    }
}

#[derive(Serialize)]
struct ResolvedInputs<'a> {
    command: &'a str,
    checkpoint: Option<&'a Path>,
    manifest: Option<&'a Path>,
    val_manifest: Option<&'a Path>,
    test_manifest: Option<&'a Path>,
    masks: Option<&'a Path>,
}

type CliResult<T> = std::result::Result<T, Error>;

fn load_toml<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.into(), source: e })?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

/// Writes the effective configuration, preceded by the inputs as comments,
/// so the run can be repeated with `--config`.
fn write_resolved<T: Serialize>(out: &Path, inputs: &ResolvedInputs, config: &T) -> CliResult<()> {
    let header = toml::to_string(inputs).map_err(|e| Error::Config(e.to_string()))?;
    let body = toml::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut text = String::new();
    for line in header.lines() {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(&body);
    write_file(&out.join(RESOLVED_CONFIG), &text)
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::InvalidInput(e.to_string()))
}

fn generate(args: &GenerateArgs) -> CliResult<()> {
    let mut cfg: SynthConfig = load_toml(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    create_dir(&args.out)?;
    let written = tsccn_core::synth::write_dataset(&cfg, &args.out)?;
    write_resolved(
        &args.out,
        &ResolvedInputs {
            command: "generate",
            checkpoint: None,
            manifest: None,
            val_manifest: None,
            test_manifest: None,
            masks: None,
        },
        &cfg,
    )?;
    println!("{}", written.manifest.display());
    Ok(())
}

fn train_config(opts: &TrainOptions, ablation: Option<Ablation>) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = load_toml(opts.config.as_deref())?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(a) = ablation {
        cfg.ablation = a;
    }
    if opts.paper_literal_weight_loss {
        cfg.loss_weights.paper_literal_weight_loss = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifests(opts: &TrainOptions) -> CliResult<(DatasetManifest, Option<DatasetManifest>)> {
    let train = load_manifest(&opts.manifest)?;
    let val = opts.val_manifest.as_deref().map(load_manifest).transpose()?;
    Ok((train, val))
}

fn train(args: &TrainArgs) -> CliResult<()> {
    let cfg = train_config(&args.opts, args.ablation)?;
    let (train_m, val_m) = manifests(&args.opts)?;
    create_dir(&args.opts.out)?;
    write_resolved(
        &args.opts.out,
        &ResolvedInputs {
            command: "train",
            checkpoint: None,
            manifest: Some(&args.opts.manifest),
            val_manifest: args.opts.val_manifest.as_deref(),
            test_manifest: None,
            masks: None,
        },
        &cfg,
    )?;
    let record = engine::train_run(&cfg, &train_m, val_m.as_ref(), &args.opts.out)?;
    let best = record.best();
    println!(
        "{}",
        serde_json::json!({
            "best_epoch": record.best_epoch,
            "best_val_ase": record.best_val_ase,
            "train_total": best.train_total,
            "checkpoint": record.checkpoints.first(),
        })
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let manifest = load_manifest(&args.manifest)?;
    create_dir(&args.out)?;
    let (_, cfg) = engine::load_checkpoint(&args.checkpoint)?;
    write_resolved(
        &args.out,
        &ResolvedInputs {
            command: "eval",
            checkpoint: Some(&args.checkpoint),
            manifest: Some(&args.manifest),
            val_manifest: None,
            test_manifest: None,
            masks: None,
        },
        &cfg,
    )?;
    let report = engine::evaluate(&args.checkpoint, &manifest)?;
    let json = report.to_json();
    write_file(&args.out.join(engine::METRICS_JSON), &json)?;
    println!("{json}");
    Ok(())
}

fn visualize(args: &EvalArgs) -> CliResult<()> {
    let manifest = load_manifest(&args.manifest)?;
    create_dir(&args.out)?;
    let (_, cfg) = engine::load_checkpoint(&args.checkpoint)?;
    write_resolved(
        &args.out,
        &ResolvedInputs {
            command: "visualize",
            checkpoint: Some(&args.checkpoint),
            manifest: Some(&args.manifest),
            val_manifest: None,
            test_manifest: None,
            masks: None,
        },
        &cfg,
    )?;
    let files = engine::emit_visualizations(&args.checkpoint, &manifest, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "cams": files.cams.len(),
            "scatter_png": files.scatter_png,
            "scatter_csv": files.scatter_csv,
        })
    );
    Ok(())
}

fn ablate(args: &AblateArgs) -> CliResult<()> {
    if args.repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let base = train_config(&args.opts, None)?;
    let (train_m, val_m) = manifests(&args.opts)?;
    let test_m = args.test_manifest.as_deref().map(load_manifest).transpose()?;
    let report_on = test_m
        .as_ref()
        .or(val_m.as_ref())
        .ok_or_else(|| Error::Config("ablate needs --val-manifest or --test-manifest".into()))?;
    create_dir(&args.opts.out)?;
    write_resolved(
        &args.opts.out,
        &ResolvedInputs {
            command: "ablate",
            checkpoint: None,
            manifest: Some(&args.opts.manifest),
            val_manifest: args.opts.val_manifest.as_deref(),
            test_manifest: args.test_manifest.as_deref(),
            masks: None,
        },
        &base,
    )?;
    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        let mut reports = Vec::new();
        for r in 0..args.repeats {
            let cfg = TrainConfig {
                ablation,
                seed: base.seed + r as u64,
                ..base.clone()
            };
            let dir = args.opts.out.join(ablation.name()).join(format!("run{r}"));
            let record = engine::train_run(&cfg, &train_m, val_m.as_ref(), &dir)?;
            reports.push(engine::evaluate(&record.checkpoints[0], report_on)?);
        }
        rows.push(engine::summarize(ablation, &reports));
    }
    let table = engine::comparison_table(&rows);
    write_file(&args.opts.out.join("ablation.txt"), &table)?;
    write_file(&args.opts.out.join("ablation.json"), &to_json(&rows)?)?;
    print!("{table}");
    Ok(())
}

fn mask_files(input: &Path) -> CliResult<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| Error::Io {
        path: input.into(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_mask.png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no *_mask.png files in {}", input.display())));
    }
    Ok(files)
}

#[derive(Serialize)]
struct RepairEntry {
    mask: PathBuf,
    repaired: PathBuf,
    components: usize,
    removed: usize,
    synthesized: usize,
    crops: usize,
    warnings: Vec<String>,
}

fn repair_masks(args: &RepairArgs) -> CliResult<()> {
    let cfg: RepairConfig = load_toml(args.config.as_deref())?;
    if cfg.patch_size == 0 {
        return Err(Error::Config("patch_size must be positive".into()));
    }
    let files = mask_files(&args.masks)?;
    create_dir(&args.out)?;
    write_resolved(
        &args.out,
        &ResolvedInputs {
            command: "repair-masks",
            checkpoint: None,
            manifest: None,
            val_manifest: None,
            test_manifest: None,
            masks: Some(&args.masks),
        },
        &cfg,
    )?;
    let mut log = Vec::new();
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("mask.png").to_string();
        let stem = name.strip_suffix("_mask.png").or(name.strip_suffix(".png")).unwrap_or(&name).to_string();
        let outcome = maskrepair::repair(&imaging::load_mask(&path)?, &cfg.repair)?;
        let repaired = args.out.join(format!("{stem}_repaired.png"));
        imaging::save_mask(&repaired, &outcome.mask.mask())?;
        let image_path = path.with_file_name(format!("{stem}_image.png"));
        let mut crops = 0;
        if image_path.is_file() {
            let image = imaging::load_gray(&image_path)?;
            let dir = args.out.join("crops");
            create_dir(&dir)?;
            for (k, patch) in maskrepair::crop_patches(&image, &outcome.mask, cfg.repair.crop_margin, cfg.patch_size)?
                .iter()
                .enumerate()
            {
                imaging::save_gray16(&dir.join(format!("{stem}_{k:02}.png")), patch)?;
                crops += 1;
            }
        }
        log.push(RepairEntry {
            mask: path,
            repaired,
            components: outcome.mask.components.len(),
            removed: outcome.log.removed.len(),
            synthesized: outcome.log.synthesized.len(),
            crops,
            warnings: outcome.log.warnings,
        });
    }
    write_file(&args.out.join("repair_log.json"), &to_json(&log)?)?;
    println!("{}", serde_json::json!({ "masks": log.len() }));
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::RepairMasks(a) => repair_masks(a),
        Command::Visualize(a) => visualize(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
