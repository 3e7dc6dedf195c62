//! `jdd` — command-line surface for the joint demosaicking/denoising
//! toolkit: dataset preparation, CFA simulation, training, evaluation,
//! inference, ablation studies, and report rendering.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, malformed or
//! missing inputs), 2 runtime failure (I/O mid-run, divergence).

mod chart;
mod font;
mod lines;
mod table;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use jdd_core::cfa::{degrade, CfaPattern, MosaicImage, NoiseSpec};
use jdd_core::data::{prepare, split, DatasetManifest, PrepareConfig, EVAL_SIGMAS};
use jdd_core::metrics::evaluate_dataset;
use jdd_core::raster::RgbImage;
use jdd_core::train::{
    ablation_matrix, evaluate_at_sigmas, load_checkpoint, reconstruct_mosaic, train, AblationCell,
    RunConfig,
};
use jdd_core::{Error, Result};

use crate::lines::{
    emit_charts, format_psnr, lines_from_report, read_jsonl, render_group_table, summarize,
    write_jsonl, ReportLine,
};

#[derive(Parser)]
#[command(
    name = "jdd",
    version,
    about = "Joint demosaicking and denoising toolkit for pixel-bin image sensors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile source images into aligned patches, degrade them, write a manifest
    Prepare(PrepareArgs),
    /// Sample one RGB image through a CFA, optionally adding sensor noise
    Mosaic(MosaicArgs),
    /// Train a reconstruction network from a JSON run configuration
    Train(TrainArgs),
    /// Score reconstructions against references and write a metrics report
    Eval(EvalArgs),
    /// Reconstruct RGB images from mosaic captures using a checkpoint
    Infer(InferArgs),
    /// Train and score the objective/architecture ablation matrix
    Ablate(AblateArgs),
    /// Render tables and bar charts from a metrics JSONL file
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PatternArg {
    /// Classic RGGB pattern (2x2 tile)
    Bayer,
    /// Pixel-bin pattern: each RGGB site duplicated into a 2x2 block
    Quad,
}

impl From<PatternArg> for CfaPattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::Bayer => CfaPattern::Bayer,
            PatternArg::Quad => CfaPattern::Quad,
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory of source images (PNG/JPEG)
    #[arg(long)]
    src: PathBuf,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// CFA pattern to simulate
    #[arg(long, value_enum, default_value_t = PatternArg::Quad)]
    pattern: PatternArg,
    /// Square patch size in pixels (multiple of the CFA tile)
    #[arg(long, default_value_t = 128)]
    patch: usize,
    /// Seed controlling per-patch degradation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also emit horizontally mirrored variants of every patch
    #[arg(long)]
    flip: bool,
    /// Additionally split by source into train/val manifests (train fraction)
    #[arg(long)]
    split: Option<f64>,
}

#[derive(Args)]
struct MosaicArgs {
    /// CFA pattern to sample through
    #[arg(long, value_enum)]
    pattern: PatternArg,
    /// Gaussian noise level on the 8-bit scale (0 = clean)
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    /// Noise seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input RGB PNG
    input: PathBuf,
    /// Output mosaic PNG (pattern sidecar written alongside)
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Resume from a checkpoint (defaults to <out>/checkpoints/latest.ckpt)
    #[arg(long, num_args = 0..=1)]
    resume: Option<Option<PathBuf>>,
}

#[derive(Args)]
struct EvalArgs {
    /// Score a trained checkpoint over a manifest at fixed noise levels
    #[arg(long, requires = "manifest", conflicts_with_all = ["outputs", "references"])]
    checkpoint: Option<PathBuf>,
    /// Manifest of clean patches to degrade and reconstruct
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory of reconstructed images (pairs with --references)
    #[arg(long, requires = "references", conflicts_with = "manifest")]
    outputs: Option<PathBuf>,
    /// Directory of reference images, matched to --outputs by filename
    #[arg(long)]
    references: Option<PathBuf>,
    /// Noise levels for checkpoint evaluation
    #[arg(long, value_delimiter = ',')]
    sigmas: Vec<f64>,
    /// Seed for evaluation-time degradation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Quantize images to 8 bits before scoring (parity with prior art)
    #[arg(long)]
    quantize_8bit: bool,
    /// Dataset label in the report (defaults to the input's name)
    #[arg(long)]
    dataset: Option<String>,
    /// Write the metrics report (JSON lines) to this path
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory to write per-metric bar charts into
    #[arg(long)]
    charts: Option<PathBuf>,
    /// Chart dimensions as WIDTHxHEIGHT
    #[arg(long, default_value = "640x400")]
    chart_size: String,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for reconstructed PNGs
    #[arg(long)]
    out: PathBuf,
    /// Mosaic PNGs (each with its pattern sidecar)
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Base JSON run configuration; each cell derives from it
    #[arg(long)]
    config: PathBuf,
    /// Residual-group densities to sweep
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
    densities: Vec<usize>,
    /// Noise level for scoring each cell
    #[arg(long, default_value_t = 15.0)]
    sigma: f64,
    /// Directory to write per-metric bar charts into
    #[arg(long)]
    charts: Option<PathBuf>,
    /// Chart dimensions as WIDTHxHEIGHT
    #[arg(long, default_value = "640x400")]
    chart_size: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics JSONL file written by eval
    #[arg(long)]
    input: PathBuf,
    /// Directory to write per-metric bar charts into
    #[arg(long)]
    charts: Option<PathBuf>,
    /// Chart dimensions as WIDTHxHEIGHT
    #[arg(long, default_value = "640x400")]
    chart_size: String,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let ok = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if ok { 0 } else { 1 };
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Mosaic(a) => cmd_mosaic(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

/// Validation problems (bad inputs/flags/configs) exit 1; failures of work
/// that was validly started exit 2.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::ShapeMismatch(_)
        | Error::Misaligned { .. }
        | Error::BadFile { .. } => 1,
        Error::Io { .. } | Error::Checkpoint(_) | Error::Diverged { .. } => 2,
    }
}

/// Missing user-supplied paths are validation errors, not runtime I/O.
fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    require_exists(&args.src, "source directory")?;
    let cfg = PrepareConfig {
        pattern: args.pattern.into(),
        patch_size: args.patch,
        seed: args.seed,
        augment_flip: args.flip,
    };
    let manifest = prepare(&args.src, &args.out, &cfg)?;
    println!(
        "prepared {} patches ({} sources skipped) -> {}",
        manifest.records.len(),
        manifest.header.skipped,
        args.out.join("manifest.jsonl").display()
    );
    if let Some(fraction) = args.split {
        let (train_half, val_half) = split(&manifest, fraction, args.seed)?;
        let train_path = args.out.join("manifest_train.jsonl");
        let val_path = args.out.join("manifest_val.jsonl");
        train_half.save(&train_path)?;
        val_half.save(&val_path)?;
        println!(
            "split {} train / {} val patches -> {}, {}",
            train_half.records.len(),
            val_half.records.len(),
            train_path.display(),
            val_path.display()
        );
    }
    Ok(())
}

fn cmd_mosaic(args: MosaicArgs) -> Result<()> {
    require_exists(&args.input, "input image")?;
    let image = RgbImage::load_png(&args.input)?;
    let mosaic = degrade(
        &image,
        args.pattern.into(),
        &NoiseSpec {
            sigma: args.sigma,
            seed: args.seed,
        },
    )?;
    mosaic.save(&args.output)?;
    println!(
        "wrote {} ({} pattern, sigma {})",
        args.output.display(),
        mosaic.pattern.name(),
        args.sigma
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    require_exists(&args.config, "run configuration")?;
    let run = RunConfig::load(&args.config)?;
    let resume_path = match &args.resume {
        None => None,
        Some(None) => Some(run.out.join("checkpoints/latest.ckpt")),
        Some(Some(p)) => Some(p.clone()),
    };
    if let Some(p) = &resume_path {
        require_exists(p, "resume checkpoint")?;
    }
    let outcome = train(&run, resume_path.as_deref())?;
    if let Some(report) = &outcome.final_report {
        println!(
            "trained {} steps: l_t {:.6} (l_r {:.6}) -> {}",
            outcome.steps_run,
            report.l_t,
            report.l_r,
            outcome.checkpoint.display()
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let lines = match (&args.checkpoint, &args.outputs) {
        (Some(ckpt), None) => eval_checkpoint(&args, ckpt)?,
        (None, Some(outputs)) => eval_directories(&args, outputs)?,
        _ => {
            return Err(Error::InvalidArgument(
                "pass either --checkpoint with --manifest, or --outputs with --references".into(),
            ))
        }
    };

    let groups = summarize(&lines);
    print!("{}", render_group_table(&groups));
    for g in &groups {
        for w in &g.warnings {
            eprintln!("warning: {w}");
        }
    }
    if let Some(path) = &args.report {
        write_jsonl(path, &lines)?;
        println!("report -> {}", path.display());
    }
    if let Some(dir) = &args.charts {
        let size = chart::parse_size(&args.chart_size)?;
        for path in emit_charts(dir, size, &groups)? {
            println!("chart -> {}", path.display());
        }
    }
    Ok(())
}

fn eval_checkpoint(args: &EvalArgs, ckpt: &Path) -> Result<Vec<ReportLine>> {
    require_exists(ckpt, "checkpoint")?;
    let manifest_path = args.manifest.as_ref().expect("clap enforces --manifest");
    require_exists(manifest_path, "manifest")?;
    let loaded = load_checkpoint(ckpt)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.header.pattern != loaded.pattern {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was trained on {} data, manifest holds {}",
            loaded.pattern.name(),
            manifest.header.pattern.name()
        )));
    }
    let sigmas: Vec<f64> = if args.sigmas.is_empty() {
        EVAL_SIGMAS.to_vec()
    } else {
        args.sigmas.clone()
    };
    let manifest_dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let dataset = args
        .dataset
        .clone()
        .unwrap_or_else(|| name_of(manifest_dir));
    let scored = evaluate_at_sigmas(
        &loaded.generator,
        &loaded.gen_params,
        manifest_dir,
        &manifest,
        &sigmas,
        args.seed,
        args.quantize_8bit,
    )?;
    let mut out = Vec::new();
    for (sigma, report) in &scored {
        out.extend(lines_from_report(&dataset, Some(*sigma), report));
    }
    Ok(out)
}

fn eval_directories(args: &EvalArgs, outputs_dir: &Path) -> Result<Vec<ReportLine>> {
    require_exists(outputs_dir, "outputs directory")?;
    let references_dir = args
        .references
        .as_ref()
        .expect("clap enforces --references");
    require_exists(references_dir, "references directory")?;
    let outputs = load_dir(outputs_dir)?;
    let references = load_dir(references_dir)?;
    let report = evaluate_dataset(&outputs, &references, args.quantize_8bit)?;
    let dataset = args.dataset.clone().unwrap_or_else(|| name_of(outputs_dir));
    Ok(lines_from_report(&dataset, None, &report))
}

fn name_of(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "dataset".to_string())
}

fn load_dir(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no PNG files in {}",
            dir.display()
        )));
    }
    names
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, RgbImage::load_png(&p)?))
        })
        .collect()
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    require_exists(&args.checkpoint, "checkpoint")?;
    for input in &args.inputs {
        require_exists(input, "input mosaic")?;
    }
    let loaded = load_checkpoint(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for input in &args.inputs {
        let mosaic = MosaicImage::load(input)?;
        if mosaic.pattern != loaded.pattern {
            return Err(Error::InvalidArgument(format!(
                "{}: {} mosaic, but the checkpoint was trained on {} data",
                input.display(),
                mosaic.pattern.name(),
                loaded.pattern.name()
            )));
        }
        let restored = reconstruct_mosaic(
            &loaded.generator,
            &loaded.gen_params,
            &mosaic,
            loaded.patch_size,
        )?;
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "output".to_string());
        let out_path = args.out.join(format!("{stem}.png"));
        restored.save_png16(&out_path)?;
        println!("{} -> {}", input.display(), out_path.display());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    require_exists(&args.config, "run configuration")?;
    let run = RunConfig::load(&args.config)?;
    if args.densities.is_empty() || args.densities.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(
            "densities must be positive integers".into(),
        ));
    }
    let cells = ablation_matrix(&run, &args.densities, args.sigma)?;

    let dir = run.out.join("ablation");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let json_path = dir.join("cells.json");
    let text = serde_json::to_string_pretty(&cells)
        .map_err(|e| Error::InvalidArgument(format!("unserializable cells: {e}")))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.label.clone(),
                c.group_density.to_string(),
                c.parameter_count.to_string(),
                format!("{:.6}", c.final_loss.l_t),
                format_psnr(c.metrics.mean_psnr),
                format!("{:.4}", c.metrics.mean_ssim),
                format!("{:.4}", c.metrics.mean_delta_e),
            ]
        })
        .collect();
    print!(
        "{}",
        table::render(
            &["variant", "density", "params", "l_t", "psnr", "ssim", "delta_e"],
            &rows
        )
    );
    println!("cells -> {}", json_path.display());

    if let Some(chart_dir) = &args.charts {
        let size = chart::parse_size(&args.chart_size)?;
        std::fs::create_dir_all(chart_dir).map_err(|e| Error::io(chart_dir, e))?;
        let series: [(&str, fn(&AblationCell) -> f64); 3] = [
            ("psnr", |c| c.metrics.mean_psnr),
            ("ssim", |c| c.metrics.mean_ssim),
            ("delta_e", |c| c.metrics.mean_delta_e),
        ];
        for (name, value_of) in &series {
            let bars: Vec<(String, f64)> = cells
                .iter()
                .map(|c| (format!("{} m{}", c.label, c.group_density), value_of(c)))
                .collect();
            let path = chart_dir.join(format!("ablation_{name}.png"));
            let title = format!("{} BY VARIANT", name.to_uppercase());
            chart::bar_chart(&path, &title, &bars, size.0, size.1)?;
            println!("chart -> {}", path.display());
        }
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    require_exists(&args.input, "metrics file")?;
    let (lines, malformed) = read_jsonl(&args.input)?;
    if lines.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no parseable records ({malformed} malformed line(s))",
            args.input.display()
        )));
    }
    let groups = summarize(&lines);
    print!("{}", render_group_table(&groups));
    if malformed > 0 {
        println!("skipped {malformed} malformed line(s)");
    }
    if let Some(dir) = &args.charts {
        let size = chart::parse_size(&args.chart_size)?;
        for path in emit_charts(dir, size, &groups)? {
            println!("chart -> {}", path.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[test]
    fn resume_flag_parses_bare_and_with_path() {
        let parse = |argv: &[&str]| Cli::try_parse_from(argv).map(|cli| match cli.command {
            Command::Train(t) => t.resume,
            _ => panic!("expected train"),
        });

        assert_eq!(parse(&["jdd", "train", "--config", "r.json"]).unwrap(), None);
        assert_eq!(
            parse(&["jdd", "train", "--config", "r.json", "--resume"]).unwrap(),
            Some(None)
        );
        assert_eq!(
            parse(&["jdd", "train", "--resume", "--config", "r.json"]).unwrap(),
            Some(None)
        );
        assert_eq!(
            parse(&["jdd", "train", "--config", "r.json", "--resume", "a.ckpt"]).unwrap(),
            Some(Some(PathBuf::from("a.ckpt")))
        );
    }
}
