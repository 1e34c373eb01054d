//! Command line surface: phantom synthesis, model training, ensembled
//! prediction, metric evaluation, and uncertainty reporting.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gtvseg_core::config::RunConfig;
use gtvseg_core::ensemble::{
    binarize, ensemble_average, error_rate_by_level, largest_connected_component,
    pixelwise_entropy, sliding_window_predict, split_entropy, vvc,
};
use gtvseg_core::io::{
    load_checkpoint, read_mask, read_volume, save_checkpoint, write_mask, write_volume,
};
use gtvseg_core::metrics::{dice_score, evaluate_case};
use gtvseg_core::phantom::{generate_phantom, PhantomSpec, SEPARABLE_DELTA_HU};
use gtvseg_core::preprocess::{resample_mask, RegionBox, Scale};
use gtvseg_core::train::{
    loss_log_lines, prepare_case, preprocess_volume, train, TARGET_SPACING,
};
use gtvseg_core::{LabelMask, NetworkConfig, NetworkParams, Volume};

#[derive(Parser)]
#[command(
    name = "gtvseg",
    version,
    about = "Tumor volume segmentation on anisotropic CT with an ensembled 2.5D attention U-Net"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic CT phantoms with ground-truth tumor masks
    Synth(SynthArgs),
    /// Train one model and write a checkpoint plus a loss log
    Train(TrainArgs),
    /// Segment a volume with one or more checkpoints
    Predict(PredictArgs),
    /// Compare a predicted mask against ground truth
    Evaluate(EvaluateArgs),
    /// Voxel-level uncertainty versus error tables for a six-model ensemble
    #[command(name = "uncertainty-report")]
    UncertaintyReport(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving case_<i>_img.gtvvol / case_<i>_msk.gtvvol pairs
    #[arg(long)]
    out: PathBuf,
    /// Number of cases to generate
    #[arg(long)]
    count: usize,
    /// Base seed; each case derives its own seed from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// High-contrast tumors (+200 HU instead of +25 HU over soft tissue)
    #[arg(long)]
    separable: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Configuration file; every setting has a default when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Patch sampling scale, overriding the config
    #[arg(long, value_parser = parse_scale)]
    scale: Option<Scale>,
    /// Training seed, overriding the config
    #[arg(long)]
    seed: Option<u64>,
    /// Training data directory, overriding the config
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Loss log path [default: <out>.loss.tsv]
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Comma-separated checkpoint paths; all must share one architecture
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    models: Vec<PathBuf>,
    /// Input volume in HU; preprocessing is applied internally
    #[arg(long)]
    input: PathBuf,
    /// Fused binary mask output (largest component only)
    #[arg(long)]
    out_mask: PathBuf,
    /// Fused foreground probability output
    #[arg(long)]
    out_prob: Option<PathBuf>,
    /// Voxelwise vote entropy output; requires at least two models
    #[arg(long)]
    out_uncertainty: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted mask
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth mask
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Exactly six comma-separated checkpoint paths
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    models: Vec<PathBuf>,
    /// Directory of case_<i>_img.gtvvol / case_<i>_msk.gtvvol pairs
    #[arg(long)]
    cases: PathBuf,
    /// Report output path
    #[arg(long)]
    out: PathBuf,
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    Scale::parse(s).map_err(|e| e.to_string())
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::UncertaintyReport(a) => cmd_uncertainty_report(a),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            std::process::ExitCode::FAILURE
        }
    }
}

fn case_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("case_{}_img.gtvvol", index)),
        dir.join(format!("case_{}_msk.gtvvol", index)),
    )
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for i in 0..args.count {
        let spec = PhantomSpec {
            seed: rng.random(),
            gtv_delta_hu: if args.separable { SEPARABLE_DELTA_HU } else { 25.0 },
            ..Default::default()
        };
        let (volume, mask) = generate_phantom(&spec)?;
        let (img, msk) = case_paths(&args.out, i);
        write_volume(&img, &volume)?;
        write_mask(&msk, &mask)?;
    }
    println!("wrote {} cases to {}", args.count, args.out.display());
    Ok(())
}

/// Case files found in a directory, ordered by index. The mask path is not
/// checked for existence here; commands decide whether it is mandatory.
fn scan_cases(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_prefix("case_").and_then(|s| s.strip_suffix("_img.gtvvol"))
        {
            if let Ok(i) = stem.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    Ok(indices
        .into_iter()
        .map(|i| {
            let (img, msk) = case_paths(dir, i);
            (format!("case_{}", i), img, msk)
        })
        .collect())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(scale) = args.scale {
        cfg.train.scale = scale;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(data) = &args.data {
        cfg.data.dir = Some(data.display().to_string());
    }
    let dir = match &cfg.data.dir {
        Some(d) => PathBuf::from(d),
        None => bail!("no training data: set data.dir in the config or pass --data"),
    };

    let cases = scan_cases(&dir)?;
    if cases.is_empty() {
        bail!("no case_<i>_img.gtvvol files in {}", dir.display());
    }
    let mut prepared = Vec::with_capacity(cases.len());
    for (id, img, msk) in &cases {
        let volume = read_volume(img)?;
        let mask = read_mask(msk).with_context(|| format!("{} has no ground truth", id))?;
        prepared.push(prepare_case(&volume, &mask, cfg.train.scale)?);
    }

    let outcome = train(&prepared, &cfg.network, &cfg.train)?;
    save_checkpoint(&args.out, &outcome.params, &cfg.network)?;
    let log_path = args
        .loss_log
        .unwrap_or_else(|| PathBuf::from(format!("{}.loss.tsv", args.out.display())));
    fs::write(&log_path, loss_log_lines(&outcome.loss_log))
        .with_context(|| format!("writing {}", log_path.display()))?;

    let last = outcome.loss_log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} iterations on {} cases at scale {}; final loss {:.4}",
        cfg.train.total_iterations,
        prepared.len(),
        cfg.train.scale.as_str(),
        last
    );
    println!("checkpoint {}", args.out.display());
    println!("loss log {}", log_path.display());
    Ok(())
}

/// Loads checkpoints and insists they share one architecture, since windows
/// and probability grids must agree across the ensemble.
fn load_models(paths: &[PathBuf]) -> anyhow::Result<(Vec<NetworkParams>, NetworkConfig)> {
    let mut models = Vec::with_capacity(paths.len());
    let mut config: Option<NetworkConfig> = None;
    for path in paths {
        let (params, c) = load_checkpoint(path)?;
        match &config {
            None => config = Some(c),
            Some(first) if *first != c => {
                bail!(
                    "checkpoint {} was built for a different architecture than {}",
                    path.display(),
                    paths[0].display()
                );
            }
            Some(_) => {}
        }
        models.push(params);
    }
    match config {
        Some(c) => Ok((models, c)),
        None => bail!("no checkpoints given"),
    }
}

/// Per-model segmentation of a preprocessed volume: sliding-window
/// probabilities, then threshold and largest-component cleanup per model.
fn per_model_masks(
    models: &[NetworkParams],
    config: &NetworkConfig,
    volume: &Volume,
) -> anyhow::Result<(Vec<gtvseg_core::ProbabilityMap>, Vec<LabelMask>)> {
    let mut maps = Vec::with_capacity(models.len());
    let mut masks = Vec::with_capacity(models.len());
    for params in models {
        let map = sliding_window_predict(params, config, volume)?;
        masks.push(largest_connected_component(&binarize(&map)));
        maps.push(map);
    }
    Ok((maps, masks))
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    if args.out_uncertainty.is_some() && args.models.len() < 2 {
        bail!(
            "uncertainty needs at least two models, got {}",
            args.models.len()
        );
    }
    let (models, config) = load_models(&args.models)?;
    let raw = read_volume(&args.input)?;
    let volume = preprocess_volume(&raw)?;

    let (maps, masks) = per_model_masks(&models, &config, &volume)?;
    let fused = ensemble_average(&maps)?;
    let mask = largest_connected_component(&binarize(&fused));
    write_mask(&args.out_mask, &mask)?;
    println!(
        "mask {} ({} foreground voxels)",
        args.out_mask.display(),
        mask.foreground_count()
    );

    if let Some(path) = &args.out_prob {
        write_volume(&path, &Volume::new(fused.dims, fused.spacing, fused.fg.clone())?)?;
        println!("probabilities {}", path.display());
    }
    if let Some(path) = &args.out_uncertainty {
        let entropy = pixelwise_entropy(&masks)?;
        write_volume(&path, &Volume::new(entropy.dims, entropy.spacing, entropy.data)?)?;
        println!("uncertainty {}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let pred = read_mask(&args.pred)?;
    let gt = read_mask(&args.gt)?;
    let report = evaluate_case(&pred, &gt)?;
    let assd = match report.assd_mm {
        Some(v) => v.to_string(),
        None => "-".to_string(),
    };
    println!("dice\tassd_mm\trve_percent");
    println!("{}\t{}\t{}", report.dice, assd, report.rve_percent);
    Ok(())
}

fn rate_cell(cell: &Option<(usize, usize)>) -> String {
    match cell {
        Some((voxels, errors)) => (*errors as f64 / *voxels as f64).to_string(),
        None => "-".to_string(),
    }
}

fn cmd_uncertainty_report(args: ReportArgs) -> anyhow::Result<()> {
    if args.models.len() != 6 {
        bail!("need exactly six checkpoints, got {}", args.models.len());
    }
    let (models, config) = load_models(&args.models)?;
    let cases = scan_cases(&args.cases)?;

    // Per case: (id, per-level voxel/error counts, vvc, 1 - dice).
    let mut rows: Vec<(String, [Option<(usize, usize)>; 4], Option<f64>, f64)> = Vec::new();
    let mut skipped = 0usize;
    for (id, img, msk) in &cases {
        if !msk.exists() {
            eprintln!("warning: {} has no ground truth, skipped", id);
            skipped += 1;
            continue;
        }
        let volume = preprocess_volume(&read_volume(img)?)?;
        let gt = resample_mask(&read_mask(msk)?, TARGET_SPACING)?;

        let (maps, masks) = per_model_masks(&models, &config, &volume)?;
        let fused = largest_connected_component(&binarize(&ensemble_average(&maps)?));
        let roi = RegionBox {
            z0: 0,
            z1: volume.dims[0] - 1,
            y0: 0,
            y1: volume.dims[1] - 1,
            x0: 0,
            x1: volume.dims[2] - 1,
            scale: Scale::Global,
        };
        let levels = error_rate_by_level(&masks, &fused, &gt, &roi)?;
        let mut cells: [Option<(usize, usize)>; 4] = [None; 4];
        for l in levels {
            cells[l.level - 1] = Some((l.voxels, l.errors));
        }
        let vvc_value = vvc(&masks).ok();
        let dice = dice_score(&fused, &gt)?;
        rows.push((id.clone(), cells, vvc_value, 1.0 - dice));
    }
    if rows.is_empty() {
        bail!(
            "no cases with ground truth in {} ({} skipped)",
            args.cases.display(),
            skipped
        );
    }

    let mut report = String::from("case\tlevel_1\tlevel_2\tlevel_3\tlevel_4\n");
    let mut pooled: [Option<(usize, usize)>; 4] = [None; 4];
    for (id, cells, _, _) in &rows {
        report.push_str(id);
        for (i, cell) in cells.iter().enumerate() {
            report.push('\t');
            report.push_str(&rate_cell(cell));
            if let Some((v, e)) = cell {
                let (pv, pe) = pooled[i].unwrap_or((0, 0));
                pooled[i] = Some((pv + v, pe + e));
            }
        }
        report.push('\n');
    }
    report.push_str("average");
    for cell in &pooled {
        report.push('\t');
        report.push_str(&rate_cell(cell));
    }
    report.push('\n');

    report.push_str("\nlevel\tentropy\n");
    for level in 1..=4usize {
        report.push_str(&format!("{}\t{}\n", level, split_entropy(level - 1, 6)));
    }

    report.push_str("\ncase\tvvc\tone_minus_dice\n");
    for (id, _, vvc_value, one_minus_dice) in &rows {
        let vvc_str = match vvc_value {
            Some(v) => v.to_string(),
            None => "-".to_string(),
        };
        report.push_str(&format!("{}\t{}\t{}\n", id, vvc_str, one_minus_dice));
    }

    fs::write(&args.out, report).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "evaluated {} cases ({} skipped without ground truth): {}",
        rows.len(),
        skipped,
        args.out.display()
    );
    Ok(())
}
