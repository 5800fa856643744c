//! Per-stage timing and FLOP accounting of the animation pipeline.
//!
//! Stages: *coefficients* (anchor MLPs, control lattice, joint transforms;
//! independent of the Gaussian count), *blend + LBS* (per-Gaussian
//! interpolation, basis combination, activation and skinning; linear in the
//! Gaussian count) and *rasterize*.

use std::time::Instant;

use serde::Serialize;

use crate::avatar::RAW_WIDTH;
use crate::error::{Error, Result};
use crate::interp::NEIGHBORS;
use crate::model::{AvatarModel, Variant};
use crate::raster::Camera;
use crate::skinning::MAX_INFLUENCES;

pub const WARMUP_FRAMES: usize = 10;
pub const MIN_FRAMES: usize = 100;

/// Rotation, scale and opacity activation per Gaussian.
const ACTIVATE_FLOPS: u64 = 40;
/// Nearest-rotation extraction of one blended 3×3 matrix (3×3 SVD estimate).
const POLAR_FLOPS: u64 = 400;
/// Forward kinematics per joint: a 4×4 affine product plus an axis-angle conversion.
const JOINT_FLOPS: u64 = 160;
/// Projection of one Gaussian (transform, covariance, Jacobian, SH color).
const PROJECT_FLOPS: u64 = 250;
/// One splat evaluated at one pixel (Mahalanobis term, exp, blend).
const PIXEL_FLOPS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageFlops {
    pub coefficients: u64,
    pub blend_lbs: u64,
}

/// Analytic FLOP count of the two pose-dependent stages.
pub fn stage_flops(model: &AvatarModel) -> StageFlops {
    let b = model.basis_count() as u64;
    let c = model.control_count() as u64;
    let j = model.rig.joint_count() as u64;
    let k = NEIGHBORS as u64;
    let coefficients = model.field.forward_flops() + c * (2 * k * b) + c * (2 * 3 * b) + j * JOINT_FLOPS;

    let w = RAW_WIDTH as u64;
    let pw = model.field.property_width() as u64;
    let blend = match model.variant {
        Variant::Basis => 2 * b * w,
        Variant::DirectOffsets => w,
    };
    let per_gaussian = 2 * k * pw
        + blend
        + 2 * k * 3
        + 3
        + ACTIVATE_FLOPS
        + MAX_INFLUENCES as u64 * 2 * 12
        + POLAR_FLOPS
        + 18
        + 28;
    StageFlops {
        coefficients,
        blend_lbs: model.gaussian_count() as u64 * per_gaussian,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRow {
    pub label: String,
    pub coefficients_ms: f64,
    pub blend_lbs_ms: f64,
    pub rasterize_ms: f64,
    pub total_ms: f64,
    pub fps: f64,
}

/// Reference row from the published GPU implementation. It is reported for
/// orientation only; this CPU build does not target it.
pub fn published_reference() -> StageRow {
    StageRow {
        label: "paper, GPU, not a target".into(),
        coefficients_ms: 1.5,
        blend_lbs_ms: 3.3,
        rasterize_ms: 1.1,
        total_ms: 1000.0 / 166.0,
        fps: 166.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub gaussians: usize,
    pub anchors: usize,
    pub width: usize,
    pub height: usize,
    pub warmup_frames: usize,
    pub frames: usize,
    pub measured: StageRow,
    pub reference: StageRow,
    pub flops: StageFlops,
    /// Mean rasterization FLOPs per frame (projection plus per-pixel splat evaluations).
    pub rasterize_flops: f64,
}

/// Times `frames` renders (after `WARMUP_FRAMES` untimed ones), cycling
/// through `poses`.
pub fn run(model: &AvatarModel, poses: &[Vec<f64>], camera: &Camera, frames: usize) -> Result<BenchReport> {
    if poses.is_empty() {
        return Err(Error::Input("benchmark needs at least one pose".into()));
    }
    if frames < MIN_FRAMES {
        return Err(Error::Config(format!("benchmark needs at least {MIN_FRAMES} timed frames")));
    }
    let bg = [0.0; 3];
    for i in 0..WARMUP_FRAMES {
        model.forward(&poses[i % poses.len()], camera, bg)?;
    }
    let (mut coeff, mut blend, mut raster) = (0.0, 0.0, 0.0);
    let mut raster_flops = 0.0;
    let start = Instant::now();
    for i in 0..frames {
        let state = model.forward(&poses[i % poses.len()], camera, bg)?;
        coeff += state.times.coefficients_ms;
        blend += state.times.blend_lbs_ms;
        raster += state.times.rasterize_ms;
        let evaluations: u64 = state.frame.contributors.iter().map(|&c| c as u64).sum();
        raster_flops += (model.gaussian_count() as u64 * PROJECT_FLOPS + evaluations * PIXEL_FLOPS) as f64;
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let n = frames as f64;
    let total = wall_ms / n;
    Ok(BenchReport {
        gaussians: model.gaussian_count(),
        anchors: model.anchor_count(),
        width: camera.width,
        height: camera.height,
        warmup_frames: WARMUP_FRAMES,
        frames,
        measured: StageRow {
            label: "this build, CPU".into(),
            coefficients_ms: coeff / n,
            blend_lbs_ms: blend / n,
            rasterize_ms: raster / n,
            total_ms: total,
            fps: 1000.0 / total,
        },
        reference: published_reference(),
        flops: stage_flops(model),
        rasterize_flops: raster_flops / n,
    })
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "N={} F={} {}x{} frames={} (warm-up {})\n",
            self.gaussians, self.anchors, self.width, self.height, self.frames, self.warmup_frames
        );
        out.push_str(&format!(
            "{:<28} {:>12} {:>12} {:>12} {:>10} {:>8}\n",
            "", "coeff ms", "blend+lbs ms", "raster ms", "total ms", "fps"
        ));
        for r in [&self.measured, &self.reference] {
            out.push_str(&format!(
                "{:<28} {:>12.3} {:>12.3} {:>12.3} {:>10.3} {:>8.1}\n",
                r.label, r.coefficients_ms, r.blend_lbs_ms, r.rasterize_ms, r.total_ms, r.fps
            ));
        }
        out.push_str(&format!(
            "FLOPs per frame: coefficients {} | blend+lbs {} | rasterize {:.0}\n",
            self.flops.coefficients, self.flops.blend_lbs, self.rasterize_flops
        ));
        out
    }
}
