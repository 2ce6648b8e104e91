//! `vvdet` — generate synthetic scenes, train the virtual-voxel detector,
//! and poke at its grouping behaviour from the command line.

use std::error::Error;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use vvdet_core::autodiff::{Graph, Mode};
use vvdet_core::config::{Config, StrategyKind};
use vvdet_core::dataset;
use vvdet_core::eval::EvalResult;
use vvdet_core::fsd1::{ccl_cluster, observe_scene, GroupStats, ObjectGroups};
use vvdet_core::geom::{point_in_box, Box3D, PointCloud};
use vvdet_core::model::{
    build_corpus, train, Detector, Fsd1Model, Fsdv2Model, ModelConfig, Scene, TrainOpts,
};
use vvdet_core::segvote::VoteOutput;
use vvdet_core::sparse::VoxelGridSpec;
use vvdet_core::vvoxel::virtual_voxelize;

#[derive(Parser)]
#[command(
    name = "vvdet",
    version,
    about = "fully sparse 3D detection on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config file plus inline overrides, shared by every subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file applied before any --set override.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Inline `key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, Box<dyn Error>> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_file(path)?,
            None => Config::default(),
        };
        cfg.apply_sets(&self.set)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train and val splits of a synthetic dataset.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; splits land in OUT/train and OUT/val.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the virtual-voxel detector and save a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the `epoch,loss_cls,loss_reg,loss_vote,mAP` lines here.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the val split of a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Per-object grouping report: clusters vs virtual voxels vs real voxels.
    Stats {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Take votes from this checkpoint; without it every labelled point
        /// votes its own box center (oracle votes).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Which split of the dataset to measure.
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Train once per assignment strategy and tabulate validation AP.
    AblateAssign {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train across voxel sizes and tabulate validation AP.
    SweepVoxelSize {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated voxel edge lengths in meters.
        #[arg(long, default_value = "0.2,0.4,0.8")]
        sizes: String,
    },
    /// Train the clustering-based tail and the virtual-voxel pipeline on the
    /// same corpus and compare, including the crowded-scene breakdown.
    CompareV1 {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn Error>> {
    match cli.cmd {
        Cmd::Gen { cfg, out } => cmd_gen(&cfg.load()?, &out),
        Cmd::Train {
            cfg,
            data,
            out,
            metrics,
        } => cmd_train(&cfg.load()?, &data, &out, metrics.as_deref()),
        Cmd::Eval { cfg, data, ckpt } => cmd_eval(&cfg.load()?, &data, &ckpt),
        Cmd::Stats {
            cfg,
            data,
            ckpt,
            split,
        } => cmd_stats(&cfg.load()?, &data, ckpt.as_deref(), &split),
        Cmd::AblateAssign { cfg } => cmd_ablate_assign(&cfg.load()?),
        Cmd::SweepVoxelSize { cfg, sizes } => cmd_sweep_voxel(&cfg.load()?, &sizes),
        Cmd::CompareV1 { cfg } => cmd_compare_v1(&cfg.load()?),
    }
}

fn class_names(cfg: &Config) -> Vec<String> {
    cfg.scene_spec(0)
        .templates
        .iter()
        .map(|t| t.name.clone())
        .collect()
}

/// Loads a split and checks its labels against the configured class count.
fn load_split(cfg: &Config, dir: &Path) -> Result<Vec<Scene>, Box<dyn Error>> {
    let scenes = dataset::read_split(dir)?;
    let n_classes = class_names(cfg).len();
    for (i, (_, boxes)) in scenes.iter().enumerate() {
        if let Some(b) = boxes.iter().find(|b| b.class_id >= n_classes) {
            return Err(format!(
                "scene {} in {} has class {} but the config defines {} classes",
                i,
                dir.display(),
                b.class_id,
                n_classes
            )
            .into());
        }
    }
    Ok(scenes)
}

fn new_v2(cfg: &Config) -> Result<Detector, Box<dyn Error>> {
    let mcfg = ModelConfig::from_config(cfg, class_names(cfg).len())?;
    Ok(Detector::V2(Fsdv2Model::new(mcfg)?))
}

fn new_v1(cfg: &Config) -> Result<Detector, Box<dyn Error>> {
    let mcfg = ModelConfig::from_config(cfg, class_names(cfg).len())?;
    Ok(Detector::V1(Fsd1Model::new(mcfg)?))
}

fn print_eval(res: &EvalResult, names: &[String], iou: f64) {
    println!("class                 AP@{iou:.2}  recall    n_gt");
    for (i, c) in res.per_class.iter().enumerate() {
        let name = names.get(i).map(String::as_str).unwrap_or("?");
        println!(
            "{name:<20} {ap:8.4} {recall:7.4} {n:7}",
            ap = c.ap,
            recall = c.recall,
            n = c.n_gt
        );
    }
    println!("mAP {:.4}", res.map);
    println!(
        "crowded mAP {:.4} recall {:.4} | normal mAP {:.4} recall {:.4}",
        res.crowded.map, res.crowded.recall, res.normal.map, res.normal.recall
    );
}

fn cmd_gen(cfg: &Config, out: &Path) -> Result<(), Box<dyn Error>> {
    let (train_scenes, val_scenes) = build_corpus(cfg, None);
    dataset::write_split(&out.join("train"), &train_scenes)?;
    dataset::write_split(&out.join("val"), &val_scenes)?;
    let points: usize = train_scenes
        .iter()
        .chain(val_scenes.iter())
        .map(|s| s.0.len())
        .sum();
    println!(
        "wrote {} train + {} val scenes ({} points) to {}",
        train_scenes.len(),
        val_scenes.len(),
        points,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &Config,
    data: &Path,
    out: &Path,
    metrics_path: Option<&Path>,
) -> Result<(), Box<dyn Error>> {
    let train_scenes = load_split(cfg, &data.join("train"))?;
    let val_scenes = load_split(cfg, &data.join("val"))?;
    let mut model = new_v2(cfg)?;
    let opts = TrainOpts::from_config(cfg);
    let mut metrics_file = match metrics_path {
        Some(p) => Some(File::create(p)?),
        None => None,
    };
    let header = "epoch,loss_cls,loss_reg,loss_vote,mAP";
    println!("{header}");
    if let Some(f) = metrics_file.as_mut() {
        writeln!(f, "{header}")?;
    }
    let mut log_err = None;
    train(&mut model, &train_scenes, &val_scenes, &opts, |m| {
        println!("{}", m.line());
        if let Some(f) = metrics_file.as_mut() {
            if let Err(e) = writeln!(f, "{}", m.line()) {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    dataset::save_checkpoint(out, model.store())?;
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

fn cmd_eval(cfg: &Config, data: &Path, ckpt: &Path) -> Result<(), Box<dyn Error>> {
    let val_scenes = load_split(cfg, &data.join("val"))?;
    let mut model = new_v2(cfg)?;
    dataset::load_checkpoint(ckpt, model.store_mut())?;
    let opts = TrainOpts::from_config(cfg);
    let res = model.evaluate(&val_scenes, &opts)?;
    print_eval(&res, &class_names(cfg), opts.eval_iou);
    Ok(())
}

/// Votes for `stats` without a checkpoint: every point inside a box votes
/// the center of its nearest containing box, background points stay silent.
fn oracle_votes(
    g: &mut Graph<f64>,
    cloud: &PointCloud<f64>,
    boxes: &[Box3D<f64>],
    n_classes: usize,
) -> VoteOutput {
    let n = cloud.len();
    let mut source = Vec::new();
    let mut centers = Vec::new();
    for (i, p) in cloud.xyz.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (bi, b) in boxes.iter().enumerate() {
            if point_in_box(*p, b) {
                let d2 = (0..3)
                    .map(|a| (p[a] - b.center[a]) * (p[a] - b.center[a]))
                    .sum::<f64>();
                if best.map_or(true, |(bd, _)| d2 < bd) {
                    best = Some((d2, bi));
                }
            }
        }
        if let Some((_, bi)) = best {
            source.push(i);
            centers.push(boxes[bi].center);
        }
    }
    let m = centers.len();
    let centers = Array2::from_shape_fn((m, 3), |(r, c)| centers[r][c]);
    let coords = Array2::from_shape_fn((n, 3), |(r, c)| cloud.xyz[r][c]);
    VoteOutput {
        fg_logits: g.constant2(Array2::zeros((n, n_classes + 1))),
        offsets: g.constant2(Array2::zeros((n, 3))),
        source,
        centers: g.constant2(centers),
        scale: 1.0,
        coords: g.constant2(coords),
    }
}

fn cmd_stats(
    cfg: &Config,
    data: &Path,
    ckpt: Option<&Path>,
    split: &str,
) -> Result<(), Box<dyn Error>> {
    let scenes = load_split(cfg, &data.join(split))?;
    let names = class_names(cfg);
    let mut model = match ckpt {
        Some(p) => {
            let mut m = new_v2(cfg)?;
            dataset::load_checkpoint(p, m.store_mut())?;
            Some(m)
        }
        None => None,
    };
    let grid = VoxelGridSpec::new([cfg.voxel_size; 3], [0.0; 3], 1)?;
    let mut observations: Vec<ObjectGroups> = Vec::new();
    for (cloud, boxes) in &scenes {
        let mut g = Graph::new();
        let (votes, set) = match model.as_mut() {
            Some(Detector::V2(m)) => {
                let fwd = m.forward(&mut g, cloud, Mode::Eval)?;
                (fwd.votes, fwd.set)
            }
            Some(Detector::V1(_)) => unreachable!("stats always builds the v2 model"),
            None => {
                let votes = oracle_votes(&mut g, cloud, boxes, names.len());
                let set = virtual_voxelize(&mut g, cloud, &votes, &grid)?;
                (votes, set)
            }
        };
        let centers = g.value2(votes.centers);
        let rows: Vec<[f64; 3]> = centers
            .outer_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect();
        let clusters = ccl_cluster(&rows, cfg.fsd1_radius);
        observations.extend(observe_scene(&g, cloud, boxes, &votes, &set, &clusters));
    }
    let stats = GroupStats::from_observations(observations.iter(), names.len());
    let names_ref: Vec<&str> = names.iter().map(String::as_str).collect();
    print!("{}", stats.to_delimited(&names_ref));
    Ok(())
}

fn cmd_ablate_assign(cfg: &Config) -> Result<(), Box<dyn Error>> {
    let strategies = [
        StrategyKind::GeometricCenter,
        StrategyKind::PlainCentroid,
        StrategyKind::WeightedCentroid,
        StrategyKind::EnlargeGt,
        StrategyKind::NearestTopK,
    ];
    let names = class_names(cfg);
    println!(
        "{:<20} {:>8} {}",
        "assignment",
        "mAP",
        names
            .iter()
            .map(|n| format!("{n:>12}"))
            .collect::<String>()
    );
    for strategy in strategies {
        let mut c = cfg.clone();
        c.assign_strategy = strategy;
        let (_, res, _) = vvdet_core::model::train_eval_once(&c, None)?;
        let per_class: String = res
            .per_class
            .iter()
            .map(|c| format!("{:>12.4}", c.ap))
            .collect();
        println!("{:<20} {:>8.4} {per_class}", strategy.to_string(), res.map);
    }
    Ok(())
}

fn cmd_sweep_voxel(cfg: &Config, sizes: &str) -> Result<(), Box<dyn Error>> {
    let sizes: Vec<f64> = sizes
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad voxel size {s:?}: {e}"))
        })
        .collect::<Result<_, _>>()?;
    println!("{:<12} {:>8} {:>8}", "voxel_size", "mAP", "recall");
    for size in sizes {
        let mut c = cfg.clone();
        c.voxel_size = size;
        let (_, res, _) = vvdet_core::model::train_eval_once(&c, None)?;
        let mean_recall = res
            .per_class
            .iter()
            .map(|c| c.recall)
            .sum::<f64>()
            / res.per_class.len().max(1) as f64;
        println!("{:<12} {:>8.4} {:>8.4}", format!("{size}"), res.map, mean_recall);
    }
    Ok(())
}

fn cmd_compare_v1(cfg: &Config) -> Result<(), Box<dyn Error>> {
    let (train_scenes, val_scenes) = build_corpus(cfg, None);
    let opts = TrainOpts::from_config(cfg);
    let names = class_names(cfg);
    for (label, mut model) in [("fsdv2", new_v2(cfg)?), ("fsd1", new_v1(cfg)?)] {
        train(&mut model, &train_scenes, &val_scenes, &opts, |m| {
            println!("{label} {}", m.line());
        })?;
        let res = model.evaluate(&val_scenes, &opts)?;
        println!("== {label} ==");
        print_eval(&res, &names, opts.eval_iou);
    }
    Ok(())
}
