use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use visolo_core::data::results::{read_results, write_results};
use visolo_core::data::ytvis::{load_ytvis, write_ytvis};
use visolo_core::eval::{default_iou_thresholds, identity_consistency};
use visolo_core::inference::VideoFrames;
use visolo_core::visualize::{render_video, write_weight_heatmaps};
use visolo_core::{
    evaluate, read_checkpoint, run_inference, run_video, save_checkpoint, train, Config, EvalReport, VideoDataset, VisoloModel,
};

#[derive(Parser)]
#[command(name = "visolo", version, about = "Online video instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    All,
    /// Videos before the `data.holdout` tail.
    Train,
    /// The last `data.holdout` videos.
    Holdout,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, a loss log and held-out metrics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the online model over a dataset and write one result file per video.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory holding `annotations.json`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
    },
    /// Score result files against ground truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render identity overlays, and weight heatmaps when a checkpoint is given.
    Visualize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Re-run this checkpoint to dump reweighting and aggregation heatmaps.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Query grid (row-major index) for aggregation heatmaps.
        #[arg(long, default_value_t = 0)]
        query: usize,
        /// Pixels per grid cell in heatmaps.
        #[arg(long, default_value_t = 16)]
        cell: usize,
    },
    /// Generate a moving-shapes dataset in the annotation file format.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides `data.synthetic.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// File, then `--set`, then the seed environment variable.
fn resolve_config(args: &ConfigArgs, pre: &[String]) -> Result<Config> {
    let base = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let sets: Vec<&str> = pre.iter().map(String::as_str).chain(args.set.iter().map(String::as_str)).collect();
    Ok(base.with_overrides(&sets)?.with_env_seed()?)
}

fn select(ds: VideoDataset, split: Split, holdout: usize) -> VideoDataset {
    match split {
        Split::All => ds,
        Split::Train => ds.split_tail(holdout).0,
        Split::Holdout => ds.split_tail(holdout).1,
    }
}

fn print_report(r: &EvalReport, idc: f64) {
    println!("videos        {}", r.num_videos);
    for (name, v) in [
        ("AP", r.ap),
        ("AP50", r.ap50),
        ("AP75", r.ap75),
        ("AR1", r.ar1),
        ("AR10", r.ar10),
        ("AR1 clipped", r.ar1_clipped),
        ("AR10 clipped", r.ar10_clipped),
        ("identity", idc),
    ] {
        println!("{name:<13} {:6.2}", v * 100.0);
    }
    for c in &r.per_class {
        match c.ap {
            Some(ap) => println!("  {:<11} AP {:6.2}  ({} tracks)", c.name, ap * 100.0, c.num_gt),
            None => println!("  {:<11} AP    n/a  (no tracks)", c.name),
        }
    }
}

fn cmd_train(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = resolve_config(args, &[])?;
    if let Some(out) = out {
        cfg.output.dir = out;
    }
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    if cfg.train.dump_dir.is_none() {
        cfg.train.dump_dir = Some(dir.clone());
    }
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let (train_set, held_out) = cfg.data.load_split()?;
    info!("training on {} videos, {} held out", train_set.videos.len(), held_out.videos.len());
    let (model, mut store) = VisoloModel::init(&cfg.model, cfg.seed)?;
    let mut log = fs::File::create(dir.join("loss.csv"))?;
    writeln!(log, "step,lr,total,class,mask,grid")?;
    let every = cfg.output.checkpoint_every;
    train(&model, &mut store, &train_set, &cfg.train, &cfg.norm, cfg.seed, |step, loss, store| {
        writeln!(
            log,
            "{step},{},{},{},{},{}",
            cfg.train.lr_at(step - 1),
            loss.total,
            loss.class,
            loss.mask,
            loss.grid
        )?;
        if every > 0 && step % every == 0 && step < cfg.train.steps {
            save_checkpoint(&dir.join(format!("step_{step:06}.ckpt")), &cfg.model, &cfg.norm, step, store)?;
        }
        Ok(())
    })?;
    let final_path = dir.join("final.ckpt");
    save_checkpoint(&final_path, &cfg.model, &cfg.norm, cfg.train.steps, &store)?;
    println!("wrote {}", final_path.display());

    if !held_out.videos.is_empty() {
        let report = run_inference(&model, &store, &held_out, &cfg.norm, &cfg.inference())?;
        let eval = evaluate(&report.results, &held_out, &default_iou_thresholds())?;
        let idc = identity_consistency(&report.results, &held_out, 0.5)?;
        println!("held-out evaluation ({:.1} fps)", report.fps());
        print_report(&eval, idc);
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&eval)?)?;
    }
    Ok(())
}

/// Model and weights for a checkpoint. Without an explicit model section
/// (file or `model.`/`norm.` overrides) the checkpoint's own is adopted;
/// otherwise both must agree.
fn load_model(args: &ConfigArgs, checkpoint: &Path) -> Result<(Config, VisoloModel, visolo_core::ParamStore)> {
    let mut cfg = resolve_config(args, &[])?;
    let ck = read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let explicit = args.config.is_some() || args.set.iter().any(|s| s.starts_with("model.") || s.starts_with("norm."));
    if explicit {
        ck.check_compatible(&cfg.model, &cfg.norm)?;
    } else {
        cfg.model = ck.header.model.clone();
        cfg.norm = ck.header.norm.clone();
    }
    let (model, store) = ck.instantiate()?;
    Ok((cfg, model, store))
}

fn cmd_infer(args: &ConfigArgs, checkpoint: &Path, data: &Path, out: &Path, split: Split) -> Result<()> {
    let (cfg, model, store) = load_model(args, checkpoint)?;
    let ds = select(load_ytvis(data)?, split, cfg.data.holdout);
    if ds.num_classes() != cfg.model.network.num_classes {
        bail!(
            "dataset has {} categories but the model predicts {}",
            ds.num_classes(),
            cfg.model.network.num_classes
        );
    }
    let report = run_inference(&model, &store, &ds, &cfg.norm, &cfg.inference())?;
    write_results(out, &report.results, &ds.categories)?;
    let timing = serde_json::json!({"frames": report.frames, "seconds": report.seconds, "fps": report.fps()});
    fs::write(out.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
    println!(
        "{} videos, {} frames, {:.1} fps; results in {}",
        report.results.len(),
        report.frames,
        report.fps(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: &ConfigArgs, pred: &Path, gt: &Path, split: Split, json: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(args, &[])?;
    let gt = select(load_ytvis(gt)?, split, cfg.data.holdout);
    let results = read_results(pred, &gt.categories)?;
    let report = evaluate(&results, &gt, &default_iou_thresholds())?;
    let idc = identity_consistency(&results, &gt, 0.5)?;
    print_report(&report, idc);
    if let Some(p) = json {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_visualize(args: &ConfigArgs, pred: &Path, data: &Path, out: &Path, checkpoint: Option<&Path>, query: usize, cell: usize) -> Result<()> {
    let ds = load_ytvis(data)?;
    let results = read_results(pred, &ds.categories)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = 0;
    for r in &results {
        let Some(v) = ds.videos.iter().find(|v| v.id == r.video_id) else {
            bail!("result for video {} has no matching video in {}", r.video_id, data.display());
        };
        written += render_video(v, r, out)?.len();
    }
    if let Some(ck) = checkpoint {
        let (cfg, model, store) = load_model(args, ck)?;
        let mut icfg = cfg.inference();
        icfg.record_weights = true;
        let grid = cfg.model.network.grid_shape;
        for r in &results {
            let v = ds.videos.iter().find(|v| v.id == r.video_id).expect("checked above");
            let run = run_video(&model, &store, &mut VideoFrames(v), &cfg.norm, &icfg)?;
            written += write_weight_heatmaps(&run.weights, grid, query, cell, &out.join(v.id.to_string()).join("weights"))?.len();
        }
    }
    println!("wrote {written} images to {}", out.display());
    Ok(())
}

fn cmd_gen_data(args: &ConfigArgs, seed: Option<u64>, out: &Path) -> Result<()> {
    let pre: Vec<String> = seed.map(|s| format!("data.synthetic.seed={s}")).into_iter().collect();
    let cfg = resolve_config(args, &pre)?;
    let ds = visolo_core::generate_moving_shapes(&cfg.data.synthetic)?;
    write_ytvis(&ds, out)?;
    println!("wrote {} videos to {}", ds.videos.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { cfg, out } => cmd_train(&cfg, out),
        Command::Infer {
            cfg,
            checkpoint,
            data,
            out,
            split,
        } => cmd_infer(&cfg, &checkpoint, &data, &out, split),
        Command::Eval { cfg, pred, gt, split, json } => cmd_eval(&cfg, &pred, &gt, split, json.as_deref()),
        Command::Visualize {
            cfg,
            pred,
            data,
            out,
            checkpoint,
            query,
            cell,
        } => cmd_visualize(&cfg, &pred, &data, &out, checkpoint.as_deref(), query, cell),
        Command::GenData { cfg, seed, out } => cmd_gen_data(&cfg, seed, &out),
    }
}
