//! `splatavatar` command line: generate, train, render, evaluate, bench, serve.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splatavatar::bench;
use splatavatar::checkpoint::Checkpoint;
use splatavatar::config::RunConfig;
use splatavatar::image_io::{write_atomic, write_ppm, Encoding};
use splatavatar::raster::Camera;
use splatavatar::synth::{self, read_poses, CameraSet, Dataset, Split};
use splatavatar::workflow;
use splatavatar::{Error, Result};

#[derive(Parser)]
#[command(name = "splatavatar", version, about = "Animatable Gaussian avatars on a synthetic rig")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every stochastic step.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut run = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            run.set_seed(s);
        }
        Ok(run)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Ppm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    /// Training poses seen from the training views.
    Train,
    /// Training poses seen from the held-out views.
    Holdout,
    /// Novel poses from every view.
    Novel,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-view dataset.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (defaults to `dataset` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an avatar.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (defaults to `dataset` from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (defaults to `output` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render one image per (pose, view).
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pose CSV (`frame,p0..`); defaults to a single zero pose.
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Camera JSON (`{"train": [..], "holdout": [..]}` or a list).
        #[arg(long, conflicts_with = "dataset")]
        cameras: Option<PathBuf>,
        /// Take cameras from this dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated view indices (default: all).
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        /// Project poses onto the first K pose components (`full` for all).
        #[arg(long, value_name = "K")]
        pca: Option<String>,
        #[arg(long, value_enum, default_value = "png")]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score renders against a dataset split (PSNR, SSIM, L1).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "holdout")]
        split: SplitArg,
        /// Use every N-th frame.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, value_name = "K")]
        pca: Option<String>,
        /// CSV output (per-frame rows and a mean row).
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the three pipeline stages.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset for poses and camera.
        #[arg(long)]
        dataset: PathBuf,
        /// Pose CSV (defaults to the dataset's training poses).
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long, default_value_t = bench::MIN_FRAMES)]
        frames: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Serve the avatar over HTTP and WebSocket.
    Serve {
        #[arg(long, env = "SPLATAVATAR_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "SPLATAVATAR_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Dataset whose cameras and pose sequences are offered to clients.
        #[arg(long, env = "SPLATAVATAR_DATASET")]
        dataset: Option<PathBuf>,
    },
}

fn parse_pca(arg: &Option<String>) -> Result<Option<usize>> {
    match arg.as_deref() {
        None => Ok(None),
        Some("full") => Ok(Some(usize::MAX)),
        Some(k) => k
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::Config(format!("--pca expects a component count or `full`, got `{k}`"))),
    }
}

fn load_cameras(cameras: &Option<PathBuf>, dataset: &Option<PathBuf>) -> Result<Vec<Camera>> {
    if let Some(d) = dataset {
        let text = std::fs::read_to_string(d.join("cameras.json")).map_err(|e| Error::Data(format!("{}: {e}", d.display())))?;
        let set: CameraSet = serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
        return Ok(set.all().cloned().collect());
    }
    let path = cameras
        .as_ref()
        .ok_or_else(|| Error::Config("render needs --cameras or --dataset".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if let Ok(set) = serde_json::from_str::<CameraSet>(&text) {
        return Ok(set.all().cloned().collect());
    }
    serde_json::from_str::<Vec<Camera>>(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn cmd_render(
    checkpoint: &Path,
    poses: &Option<PathBuf>,
    cameras: Vec<Camera>,
    views: &[usize],
    pca: Option<usize>,
    format: Format,
    out: &Path,
) -> Result<usize> {
    let model = Checkpoint::load(checkpoint)?.model;
    let poses = match poses {
        Some(p) => read_poses(p)?,
        None => vec![vec![0.0; model.pose_len()]],
    };
    let views: Vec<usize> = if views.is_empty() { (0..cameras.len()).collect() } else { views.to_vec() };
    let mut written = 0;
    for (f, pose) in poses.iter().enumerate() {
        for &v in &views {
            let cam = cameras
                .get(v)
                .ok_or_else(|| Error::Config(format!("view {v} does not exist ({} cameras)", cameras.len())))?;
            let state = workflow::render_pose(&model, pose, cam, pca)?;
            let dir = out.join(format!("{v:02}"));
            match format {
                Format::Png => write_atomic(&dir.join(format!("{f:04}.png")), &workflow::encode_png(&state)?)?,
                Format::Ppm => write_ppm(&dir.join(format!("{f:04}.ppm")), cam.width, cam.height, &state.frame.color, Encoding::Srgb)?,
            }
            written += 1;
        }
    }
    Ok(written)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let run = config.load()?;
            let dir = out.unwrap_or(run.dataset.clone());
            let s = synth::generate(&run.synth, &dir)?;
            println!(
                "wrote {} images ({} frames, {} novel, {}+{} views) to {}",
                s.images_written,
                s.frames,
                s.novel_frames,
                s.views,
                s.holdout_views,
                dir.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let mut run = config.load()?;
            if let Some(d) = data {
                run.dataset = d;
            }
            if let Some(o) = out {
                run.output = o;
            }
            let dataset = Dataset::load(&run.dataset)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let total = run.train.iterations;
            let report = (total / 20).max(1);
            let outcome = workflow::train(&run, &dataset, &run.output, resume, |m| {
                if (m.iteration + 1) % report == 0 {
                    println!(
                        "iter {:>7}/{} loss {:.5} l1 {:.5} psnr {:.2}",
                        m.iteration + 1,
                        total,
                        m.loss.total,
                        m.loss.l1,
                        m.psnr
                    );
                }
            })?;
            println!("checkpoint {} after {} iterations", outcome.checkpoint.display(), outcome.iterations);
        }
        Command::Render {
            checkpoint,
            poses,
            cameras,
            dataset,
            views,
            pca,
            format,
            out,
        } => {
            let cams = load_cameras(&cameras, &dataset)?;
            let n = cmd_render(&checkpoint, &poses, cams, &views, parse_pca(&pca)?, format, &out)?;
            println!("rendered {n} images to {}", out.display());
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            split,
            stride,
            pca,
            out,
        } => {
            let model = Checkpoint::load(&checkpoint)?.model;
            let ds = Dataset::load(&dataset)?;
            let (split, views, count): (Split, Vec<usize>, usize) = match split {
                SplitArg::Train => (Split::Train, (0..ds.train_views()).collect(), ds.poses.len()),
                SplitArg::Holdout => (Split::Train, ds.holdout_view_ids().collect(), ds.poses.len()),
                SplitArg::Novel => (Split::Novel, (0..ds.cameras.len()).collect(), ds.novel_poses.len()),
            };
            let frames: Vec<usize> = (0..count).step_by(stride.max(1)).collect();
            let scores = workflow::evaluate(&model, &ds, split, &views, &frames, parse_pca(&pca)?)?;
            workflow::write_scores(&out, &scores)?;
            println!("mean PSNR {:.3} dB over {} renders", workflow::mean_psnr(&scores), scores.len());
        }
        Command::Bench {
            checkpoint,
            dataset,
            poses,
            view,
            frames,
            json,
        } => {
            let model = Checkpoint::load(&checkpoint)?.model;
            let ds = Dataset::load(&dataset)?;
            let poses = match poses {
                Some(p) => read_poses(&p)?,
                None => ds.poses.clone(),
            };
            let cam = ds
                .cameras
                .get(view)
                .ok_or_else(|| Error::Config(format!("view {view} does not exist")))?;
            let report = bench::run(&model, &poses, cam, frames)?;
            print!("{}", report.to_table());
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
                write_atomic(&path, text.as_bytes())?;
            }
        }
        Command::Serve {
            checkpoint,
            addr,
            dataset,
        } => {
            splatavatar_service::run_blocking(splatavatar_service::ServeOptions {
                checkpoint,
                addr,
                dataset,
            })
            .map_err(|e| match e {
                splatavatar_service::ServiceError::Core(e) => e,
                other => Error::Data(other.to_string()),
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
