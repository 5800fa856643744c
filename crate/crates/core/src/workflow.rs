//! Drivers shared by the command line, the render service and the acceptance
//! suite: training runs, evaluation and the single render-and-encode path.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, TrainingState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image_io::{encode_png_rgb8, to_rgb8, Encoding};
use crate::metrics::{psnr, ssim};
use crate::model::{AvatarModel, ForwardState};
use crate::pca::PoseBasis;
use crate::raster::Camera;
use crate::synth::{Dataset, Split};
use crate::train::{loss_l1, MetricsLog, SampleSource, StepMetrics, Trainer};

/// File names inside a training output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.splf";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Renders always composite over black, the training background.
pub const RENDER_BACKGROUND: [f64; 3] = [0.0; 3];

/// Optionally projects `pose` onto the stored pose basis (`Some(k)`), then
/// renders it.
pub fn render_pose(model: &AvatarModel, pose: &[f64], camera: &Camera, pca: Option<usize>) -> Result<ForwardState> {
    let pose = match pca {
        None => pose.to_vec(),
        Some(k) => {
            if model.pose_basis.is_none() {
                return Err(Error::Input("checkpoint has no pose basis; render without PCA".into()));
            }
            model.project_pose(pose, Some(k))?
        }
    };
    if pose.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("pose contains non-finite values".into()));
    }
    model.forward(&pose, camera, RENDER_BACKGROUND)
}

/// sRGB PNG of a rendered frame. The CLI and the service both encode here.
pub fn encode_png(state: &ForwardState) -> Result<Vec<u8>> {
    let f = &state.frame;
    encode_png_rgb8(f.width, f.height, &to_rgb8(&f.color, Encoding::Srgb))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameScore {
    pub frame: usize,
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

/// Scores renders of `frames × views` of `split` against the stored images.
pub fn evaluate(
    model: &AvatarModel,
    dataset: &Dataset,
    split: Split,
    views: &[usize],
    frames: &[usize],
    pca: Option<usize>,
) -> Result<Vec<FrameScore>> {
    if views.is_empty() || frames.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut out = Vec::with_capacity(views.len() * frames.len());
    for &frame in frames {
        for &view in views {
            let sample = dataset.sample_for(split, view, frame, RENDER_BACKGROUND)?;
            let state = render_pose(model, &sample.pose, &sample.camera, pca)?;
            let img = &state.frame.color;
            out.push(FrameScore {
                frame,
                view,
                psnr: psnr(img, &sample.image)?,
                ssim: ssim(img, &sample.image, sample.camera.width, sample.camera.height)?,
                l1: loss_l1(img, &sample.image)?.0,
            });
        }
    }
    Ok(out)
}

pub fn mean_psnr(scores: &[FrameScore]) -> f64 {
    scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len().max(1) as f64
}

pub fn write_scores(path: &Path, scores: &[FrameScore]) -> Result<()> {
    let mut text = String::from("frame,view,psnr,ssim,l1\n");
    for s in scores {
        text.push_str(&format!("{},{},{:.6},{:.6},{:.9e}\n", s.frame, s.view, s.psnr, s.ssim, s.l1));
    }
    let n = scores.len().max(1) as f64;
    text.push_str(&format!(
        "mean,,{:.6},{:.6},{:.9e}\n",
        mean_psnr(scores),
        scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        scores.iter().map(|s| s.l1).sum::<f64>() / n
    ));
    crate::image_io::write_atomic(path, text.as_bytes())
}

/// Mean L1 of the model over fixed training samples (every `stride`-th).
pub fn training_l1<S: SampleSource + ?Sized>(model: &AvatarModel, source: &S, stride: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for idx in (0..source.sample_count()).step_by(stride.max(1)) {
        let s = source.sample(idx, RENDER_BACKGROUND)?;
        let state = model.forward(&s.pose, &s.camera, RENDER_BACKGROUND)?;
        sum += loss_l1(&state.frame.color, &s.image)?.0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub iterations: u64,
    pub model: AvatarModel,
}

fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    Checkpoint {
        model: trainer.model.clone(),
        training: Some(TrainingState {
            optimizer: trainer.optimizer.clone(),
            iteration: trainer.iteration,
            config: trainer.config.clone(),
        }),
    }
    .save(path)
}

/// Trains on `dataset` into `out_dir`, optionally continuing `resume`.
/// Writes `metrics.csv` (appended on resume), the resolved `config.toml`,
/// periodic checkpoints and a final checkpoint with a fitted pose basis.
pub fn train(
    run: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<Checkpoint>,
    mut progress: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    run.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    crate::image_io::write_atomic(&out_dir.join(CONFIG_FILE), run.to_toml().as_bytes())?;
    let resuming = resume.is_some();
    let mut trainer = match resume {
        Some(ck) => {
            let t = ck
                .training
                .ok_or_else(|| Error::Data("checkpoint has no optimizer state to resume from".into()))?;
            Trainer::resume(ck.model, t.optimizer, t.iteration, run.train.clone())?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed);
            let model = AvatarModel::initialize(dataset.rig.clone(), &run.model, &mut rng)?;
            Trainer::new(model, run.train.clone())?
        }
    };
    if trainer.model.rig != dataset.rig {
        return Err(Error::Data("checkpoint rig differs from the dataset rig".into()));
    }
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = MetricsLog::new(file, !resuming)?;
    let split = dataset.training_split(run.train_frames);
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let every = run.checkpoint_every;
    let until = run.train.iterations;
    trainer.run(&split, until, |t, m| {
        log.write(m)?;
        progress(m);
        if every > 0 && t.iteration % every == 0 && t.iteration < until {
            save(t, &ck_path)?;
        }
        Ok(())
    })?;
    let frames = run.train_frames.unwrap_or(dataset.poses.len()).min(dataset.poses.len());
    trainer.model.pose_basis = Some(PoseBasis::fit(&dataset.poses[..frames], run.pca_components)?);
    save(&trainer, &ck_path)?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        metrics: metrics_path,
        iterations: trainer.iteration,
        model: trainer.model,
    })
}
