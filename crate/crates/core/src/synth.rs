//! Synthetic multi-view dataset: a capsule-body rig with procedural,
//! pose-dependent appearance, rendered by an independent point splatter.
//!
//! Directory layout:
//!
//! ```text
//! synth.json                     generation parameters
//! rig.json                       skeleton and capsule body
//! cameras.json                   {"train": [...], "holdout": [...]}
//! poses.csv                      frame,p0..p{P-1}   (training poses)
//! novel_poses.csv                same columns        (novel poses)
//! frames/<view>/<frame>.png      linear 8-bit RGB over black
//! frames/<view>/<frame>_mask.png 8-bit, 255 = foreground
//! novel_frames/<view>/<frame>.png, _mask.png
//! ```
//!
//! Views are numbered training views first, then held-out views. CSV values
//! are written in shortest round-trip form, so poses reload bit-exactly.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::image_io::{dequantize, read_mask, read_rgb8, to_rgb8, write_atomic, write_mask_png, write_png, Encoding};
use crate::raster::Camera;
use crate::skinning::{blend_frames, lbs_points, Rig, SkinWeights, SurfacePoint};
use crate::train::{FrameSample, SampleSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub rig: Rig,
    pub surface_points: usize,
    pub frames: usize,
    pub novel_frames: usize,
    pub views: usize,
    pub holdout_views: usize,
    pub width: usize,
    pub height: usize,
    pub ring_radius: f64,
    pub camera_height: f64,
    pub look_at_height: f64,
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    /// Number of latent motion primitives; training poses span this many dimensions.
    pub motion_primitives: usize,
    /// Scale of each primitive relative to the joint limit.
    pub pose_amplitude: f64,
    /// Checker cell size of the static texture (scene units).
    pub texture_cell: f64,
    /// Strength of pose-dependent appearance (wrinkle stripes and posed-normal
    /// shading); 0 gives a pose-independent texture.
    pub deformation_amplitude: f64,
    /// Spatial frequency of the wrinkle stripes (cycles per scene unit).
    pub wrinkle_frequency: f64,
    pub supersample: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            rig: Rig::synthetic_default(),
            surface_points: 60_000,
            frames: 200,
            novel_frames: 20,
            views: 6,
            holdout_views: 1,
            width: 64,
            height: 64,
            ring_radius: 3.0,
            camera_height: 1.1,
            look_at_height: 0.95,
            focal_scale: 1.4,
            motion_primitives: 10,
            pose_amplitude: 0.25,
            texture_cell: 0.08,
            deformation_amplitude: 0.5,
            // About 5 px per stripe at the default camera: resolvable at
            // 64×64 and finer than the anchor spacing.
            wrinkle_frequency: 4.5,
            supersample: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        if self.views == 0 || self.frames < 2 || self.width == 0 || self.height == 0 || self.supersample == 0 {
            return Err(Error::Config("synthetic spec needs views, at least two frames and a non-empty image".into()));
        }
        if self.surface_points == 0 || self.motion_primitives == 0 {
            return Err(Error::Config("synthetic spec needs surface points and motion primitives".into()));
        }
        if !(self.ring_radius > 0.0 && self.focal_scale > 0.0 && self.texture_cell > 0.0) {
            return Err(Error::Config("ring radius, focal scale and texture cell must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.deformation_amplitude) {
            return Err(Error::Config("deformation amplitude must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Azimuth (radians) of view `v`: training views evenly spaced, held-out
    /// views offset by half a step.
    pub fn azimuth(&self, v: usize) -> f64 {
        let step = std::f64::consts::TAU / self.views as f64;
        if v < self.views {
            step * v as f64
        } else {
            step * ((v - self.views) as f64 + 0.5)
        }
    }

    pub fn camera(&self, v: usize) -> Camera {
        let az = self.azimuth(v);
        let eye = [self.ring_radius * az.sin(), self.camera_height, self.ring_radius * az.cos()];
        Camera::look_at(
            eye,
            [0.0, self.look_at_height, 0.0],
            [0.0, 1.0, 0.0],
            self.focal_scale * self.width as f64,
            self.width,
            self.height,
        )
    }
}

/// Latent motion model: poses are linear combinations of fixed primitives.
#[derive(Debug, Clone)]
pub struct MotionModel {
    pub primitives: Vec<Vec<f64>>,
    frequencies: Vec<f64>,
    phases: Vec<f64>,
}

impl MotionModel {
    pub fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let p = spec.rig.pose_len();
        let primitives = (0..spec.motion_primitives)
            .map(|_| {
                (0..p)
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * spec.pose_amplitude * spec.rig.joints[i / 3].limit
                    })
                    .collect()
            })
            .collect();
        let frequencies = (0..spec.motion_primitives).map(|_| rng.gen_range(0.02..0.15)).collect();
        let phases = (0..spec.motion_primitives).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        Self {
            primitives,
            frequencies,
            phases,
        }
    }

    pub fn combine(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.primitives[0].len()];
        for (c, prim) in coeffs.iter().zip(&self.primitives) {
            for (o, v) in out.iter_mut().zip(prim) {
                *o += c * v;
            }
        }
        out
    }

    /// Smooth training trajectory.
    pub fn trajectory(&self, frame: usize) -> Vec<f64> {
        let c: Vec<f64> = self
            .frequencies
            .iter()
            .zip(&self.phases)
            .map(|(w, p)| (w * frame as f64 * std::f64::consts::TAU + p).sin())
            .collect();
        self.combine(&c)
    }

    /// New combination inside the span of the primitives.
    pub fn novel(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let c: Vec<f64> = (0..self.primitives.len()).map(|_| rng.gen_range(-0.8..0.8)).collect();
        self.combine(&c)
    }
}

/// Dense body samples with skinning weights.
pub struct Body {
    pub points: Vec<SurfacePoint>,
    pub skin: SkinWeights,
    pub spacing: f64,
}

impl Body {
    pub fn sample(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let points = spec.rig.sample_surface(spec.surface_points, rng);
        let pos: Vec<[f64; 3]> = points.iter().map(|p| p.position).collect();
        let skin = spec.rig.skin_weights(&pos);
        let spacing = (spec.rig.surface_area_estimate() / spec.surface_points as f64).sqrt();
        Self { points, skin, spacing }
    }
}

const LIGHT: [f64; 3] = [0.3, 0.8, 0.52];

fn palette(joint: usize) -> ([f64; 3], [f64; 3]) {
    const A: [[f64; 3]; 8] = [
        [0.75, 0.3, 0.2],
        [0.2, 0.55, 0.75],
        [0.85, 0.75, 0.3],
        [0.9, 0.7, 0.55],
        [0.3, 0.7, 0.35],
        [0.6, 0.35, 0.75],
        [0.3, 0.7, 0.35],
        [0.6, 0.35, 0.75],
    ];
    let a = A[joint % A.len()];
    (a, [a[0] * 0.35, a[1] * 0.35, a[2] * 0.35])
}

/// Static albedo: a 3D checker whose two colors depend on the body part.
pub fn albedo(spec: &SynthSpec, p: &[f64; 3], capsule: usize) -> [f64; 3] {
    let cell = spec.texture_cell;
    let parity = (p[0] / cell).floor() as i64 + (p[1] / cell).floor() as i64 + (p[2] / cell).floor() as i64;
    let (a, b) = palette(spec.rig.capsules[capsule].joint);
    if parity.rem_euclid(2) == 0 {
        a
    } else {
        b
    }
}

/// Per-point linear colors for one pose.
///
/// `color = albedo · (1 − a · (½ wrinkle + ½ (1 − lambert)))`, where the
/// wrinkle term is a fine stripe pattern gated by the bend of the point's
/// joints and `lambert` uses the posed normal.
pub fn point_colors(spec: &SynthSpec, body: &Body, pose: &[f64]) -> Result<Vec<[f64; 3]>> {
    check_len("pose vector", spec.rig.pose_len(), pose.len())?;
    let transforms = spec.rig.skinning_transforms(pose, [0.0; 3])?;
    let frames = blend_frames(&body.skin, &transforms)?;
    let a = spec.deformation_amplitude;
    let light = Vector3::from(LIGHT).normalize();
    Ok(body
        .points
        .iter()
        .zip(&frames.frames)
        .zip(body.skin.joints.iter().zip(&body.skin.weights))
        .map(|((pt, fr), (joints, weights))| {
            let base = albedo(spec, &pt.position, pt.capsule);
            if a == 0.0 {
                return base;
            }
            let mut bend = 0.0;
            for s in 0..4 {
                let j = joints[s] as usize;
                let th = &pose[3 * j..3 * j + 3];
                bend += weights[s] * (th[0] * th[0] + th[1] * th[1] + th[2] * th[2]).sqrt();
            }
            let bend = (bend / 0.6).min(1.0);
            let phase = spec.wrinkle_frequency * std::f64::consts::TAU * (pt.position[0] + 0.7 * pt.position[1] + 0.4 * pt.position[2]);
            let wrinkle = bend * 0.5 * (1.0 + phase.sin());
            let n = (fr.rotation * Vector3::from(pt.normal)).normalize();
            let lambert = n.dot(&light).max(0.0);
            let k = 1.0 - a * (0.5 * wrinkle + 0.5 * (1.0 - lambert));
            [base[0] * k, base[1] * k, base[2] * k]
        })
        .collect())
}

/// Z-buffered disc splatting of posed points, supersampled and box-filtered.
/// Returns linear RGB over black and the coverage fraction per pixel.
pub fn reference_render(
    spec: &SynthSpec,
    body: &Body,
    posed: &[[f64; 3]],
    colors: &[[f64; 3]],
    camera: &Camera,
) -> (Vec<f64>, Vec<f64>) {
    let ss = spec.supersample;
    let (w, h) = (camera.width * ss, camera.height * ss);
    let f = ss as f64;
    let mut depth = vec![f64::INFINITY; w * h];
    let mut color = vec![[0.0; 3]; w * h];
    for (p, c) in posed.iter().zip(colors) {
        let t = camera.to_camera(p);
        if t[2] <= camera.near {
            continue;
        }
        let u = f * (camera.fx * t[0] / t[2] + camera.cx);
        let v = f * (camera.fy * t[1] / t[2] + camera.cy);
        let r = (1.1 * body.spacing * f * camera.fx / t[2]).max(0.75);
        let x0 = (u - r).floor().max(0.0) as usize;
        let y0 = (v - r).floor().max(0.0) as usize;
        let x1 = ((u + r).ceil() as isize).min(w as isize - 1);
        let y1 = ((v + r).ceil() as isize).min(h as isize - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let dx = x as f64 + 0.5 - u;
                let dy = y as f64 + 0.5 - v;
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let i = y * w + x;
                if t[2] < depth[i] {
                    depth[i] = t[2];
                    color[i] = *c;
                }
            }
        }
    }
    let (ow, oh) = (camera.width, camera.height);
    let mut rgb = vec![0.0; ow * oh * 3];
    let mut alpha = vec![0.0; ow * oh];
    let inv = 1.0 / (ss * ss) as f64;
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = [0.0; 3];
            let mut cov = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let i = (y * ss + sy) * w + x * ss + sx;
                    if depth[i].is_finite() {
                        cov += 1.0;
                        for ch in 0..3 {
                            acc[ch] += color[i][ch];
                        }
                    }
                }
            }
            let p = y * ow + x;
            for ch in 0..3 {
                rgb[3 * p + ch] = acc[ch] * inv;
            }
            alpha[p] = cov * inv;
        }
    }
    (rgb, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSet {
    pub train: Vec<Camera>,
    pub holdout: Vec<Camera>,
}

impl CameraSet {
    pub fn all(&self) -> impl Iterator<Item = &Camera> {
        self.train.iter().chain(self.holdout.iter())
    }

    pub fn get(&self, view: usize) -> Option<&Camera> {
        self.all().nth(view)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.holdout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Novel,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "frames",
            Split::Novel => "novel_frames",
        }
    }
}

pub fn frame_path(root: &Path, split: Split, view: usize, frame: usize) -> PathBuf {
    root.join(split.dir()).join(format!("{view:02}")).join(format!("{frame:04}.png"))
}

pub fn mask_path(root: &Path, split: Split, view: usize, frame: usize) -> PathBuf {
    root.join(split.dir()).join(format!("{view:02}")).join(format!("{frame:04}_mask.png"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_poses(path: &Path, poses: &[Vec<f64>]) -> Result<()> {
    let p = poses.first().map(|v| v.len()).unwrap_or(0);
    let mut text = String::from("frame");
    for i in 0..p {
        text.push_str(&format!(",p{i}"));
    }
    text.push('\n');
    for (f, pose) in poses.iter().enumerate() {
        text.push_str(&f.to_string());
        for v in pose {
            text.push(',');
            text.push_str(&format!("{v:?}"));
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_poses(path: &Path) -> Result<Vec<Vec<f64>>> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{}: row {} has non-finite values", path.display(), i + 1)));
        }
        out.push(vals);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub frames: usize,
    pub novel_frames: usize,
    pub views: usize,
    pub holdout_views: usize,
    pub images_written: usize,
}

/// Generates the dataset into `dir`. Never touches the splatting renderer.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<DatasetSummary> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let motion = MotionModel::new(spec, &mut rng);
    let body = Body::sample(spec, &mut rng);
    let poses: Vec<Vec<f64>> = (0..spec.frames).map(|f| motion.trajectory(f)).collect();
    let novel: Vec<Vec<f64>> = (0..spec.novel_frames).map(|_| motion.novel(&mut rng)).collect();
    let cameras = CameraSet {
        train: (0..spec.views).map(|v| spec.camera(v)).collect(),
        holdout: (spec.views..spec.views + spec.holdout_views).map(|v| spec.camera(v)).collect(),
    };

    write_json(&dir.join("synth.json"), spec)?;
    write_json(&dir.join("rig.json"), &spec.rig)?;
    write_json(&dir.join("cameras.json"), &cameras)?;
    write_poses(&dir.join("poses.csv"), &poses)?;
    write_poses(&dir.join("novel_poses.csv"), &novel)?;

    let jobs: Vec<(Split, usize, &Vec<f64>)> = poses
        .iter()
        .enumerate()
        .map(|(f, p)| (Split::Train, f, p))
        .chain(novel.iter().enumerate().map(|(f, p)| (Split::Novel, f, p)))
        .collect();
    let canonical: Vec<[f64; 3]> = body.points.iter().map(|p| p.position).collect();
    let written: Result<Vec<usize>> = jobs
        .par_iter()
        .map(|&(split, f, pose)| {
            let transforms = spec.rig.skinning_transforms(pose, [0.0; 3])?;
            let frames = blend_frames(&body.skin, &transforms)?;
            let posed = lbs_points(&frames, &canonical)?;
            let colors = point_colors(spec, &body, pose)?;
            for (v, cam) in cameras.all().enumerate() {
                let (rgb, alpha) = reference_render(spec, &body, &posed, &colors, cam);
                let mask: Vec<bool> = alpha.iter().map(|&a| a > 0.5).collect();
                write_png(&frame_path(dir, split, v, f), cam.width, cam.height, &rgb, Encoding::Linear)?;
                write_mask_png(&mask_path(dir, split, v, f), cam.width, cam.height, &mask)?;
            }
            Ok(cameras.len())
        })
        .collect();
    Ok(DatasetSummary {
        frames: spec.frames,
        novel_frames: spec.novel_frames,
        views: spec.views,
        holdout_views: spec.holdout_views,
        images_written: written?.iter().sum(),
    })
}

/// 8-bit frame and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredFrame {
    pub rgb: Vec<u8>,
    pub mask: Vec<bool>,
}

impl StoredFrame {
    /// Linear image, composited over `background` outside the mask.
    pub fn composited(&self, background: [f64; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rgb.len());
        for (p, &m) in self.mask.iter().enumerate() {
            for ch in 0..3 {
                out.push(if m { dequantize(self.rgb[3 * p + ch]) } else { background[ch] });
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub spec: SynthSpec,
    pub rig: Rig,
    pub cameras: CameraSet,
    pub poses: Vec<Vec<f64>>,
    pub novel_poses: Vec<Vec<f64>>,
    /// `frames[view][frame]`, all views.
    pub frames: Vec<Vec<StoredFrame>>,
    pub novel: Vec<Vec<StoredFrame>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
        }
        let spec: SynthSpec = read_json(&dir.join("synth.json"))?;
        let rig: Rig = read_json(&dir.join("rig.json"))?;
        rig.validate()?;
        let cameras: CameraSet = read_json(&dir.join("cameras.json"))?;
        for c in cameras.all() {
            c.validate()?;
        }
        let poses = read_poses(&dir.join("poses.csv"))?;
        let novel_poses = read_poses(&dir.join("novel_poses.csv"))?;
        for p in poses.iter().chain(&novel_poses) {
            check_len("pose columns", rig.pose_len(), p.len())?;
        }
        let load = |split: Split, count: usize| -> Result<Vec<Vec<StoredFrame>>> {
            cameras
                .all()
                .enumerate()
                .map(|(v, cam)| {
                    (0..count)
                        .map(|f| {
                            let (w, h, rgb) = read_rgb8(&frame_path(dir, split, v, f))?;
                            let (mw, mh, mask) = read_mask(&mask_path(dir, split, v, f))?;
                            if (w, h) != (cam.width, cam.height) || (mw, mh) != (w, h) {
                                return Err(Error::Data(format!("frame {f} of view {v} has the wrong size")));
                            }
                            Ok(StoredFrame { rgb, mask })
                        })
                        .collect()
                })
                .collect()
        };
        let frames = load(Split::Train, poses.len())?;
        let novel = load(Split::Novel, novel_poses.len())?;
        Ok(Self {
            root: dir.to_path_buf(),
            spec,
            rig,
            cameras,
            poses,
            novel_poses,
            frames,
            novel,
        })
    }

    pub fn train_views(&self) -> usize {
        self.cameras.train.len()
    }

    pub fn holdout_view_ids(&self) -> std::ops::Range<usize> {
        self.train_views()..self.cameras.len()
    }

    pub fn frame(&self, split: Split, view: usize, frame: usize) -> Result<&StoredFrame> {
        let set = match split {
            Split::Train => &self.frames,
            Split::Novel => &self.novel,
        };
        set.get(view)
            .and_then(|v| v.get(frame))
            .ok_or_else(|| Error::Data(format!("no frame {frame} for view {view}")))
    }

    pub fn pose(&self, split: Split, frame: usize) -> Result<&[f64]> {
        let set = match split {
            Split::Train => &self.poses,
            Split::Novel => &self.novel_poses,
        };
        set.get(frame)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("no pose for frame {frame}")))
    }

    pub fn sample_for(&self, split: Split, view: usize, frame: usize, background: [f64; 3]) -> Result<FrameSample> {
        let stored = self.frame(split, view, frame)?;
        let camera = self
            .cameras
            .get(view)
            .ok_or_else(|| Error::Data(format!("no camera {view}")))?
            .clone();
        Ok(FrameSample {
            frame,
            view,
            pose: self.pose(split, frame)?.to_vec(),
            camera,
            image: stored.composited(background),
            mask: stored.mask.clone(),
        })
    }

    /// Sample source over `(frame, training view)` pairs, optionally
    /// restricted to the first `frames` frames.
    pub fn training_split(&self, frames: Option<usize>) -> TrainingSplit<'_> {
        TrainingSplit {
            dataset: self,
            frames: frames.unwrap_or(self.poses.len()).min(self.poses.len()),
        }
    }
}

pub struct TrainingSplit<'a> {
    dataset: &'a Dataset,
    frames: usize,
}

impl SampleSource for TrainingSplit<'_> {
    fn sample_count(&self) -> usize {
        self.frames * self.dataset.train_views()
    }

    fn sample(&self, index: usize, background: [f64; 3]) -> Result<FrameSample> {
        let v = self.dataset.train_views();
        self.dataset.sample_for(Split::Train, index % v, index / v, background)
    }
}

/// Re-encodes a stored frame exactly as it is on disk, for round-trip checks.
pub fn stored_bytes(rgb: &[f64]) -> Vec<u8> {
    to_rgb8(rgb, Encoding::Linear)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthSpec {
        SynthSpec {
            surface_points: 4000,
            frames: 3,
            novel_frames: 2,
            views: 3,
            holdout_views: 1,
            width: 24,
            height: 24,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn ring_cameras_are_evenly_spaced() {
        let spec = tiny();
        let az: Vec<f64> = (0..3).map(|v| spec.azimuth(v).to_degrees()).collect();
        assert!((az[1] - az[0] - 120.0).abs() < 1e-9 && (az[2] - az[1] - 120.0).abs() < 1e-9);
        for v in 0..4 {
            let c = spec.camera(v);
            let e = c.center();
            assert!(((e[0] * e[0] + e[2] * e[2]).sqrt() - 3.0).abs() < 1e-9);
            // The look-at target projects to the principal point.
            let t = c.to_camera(&[0.0, spec.look_at_height, 0.0]);
            assert!(t[0].abs() < 1e-9 && t[1].abs() < 1e-9 && t[2] > 0.0);
        }
    }

    #[test]
    fn zero_amplitude_colors_are_pose_independent() {
        let spec = SynthSpec {
            deformation_amplitude: 0.0,
            ..tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let motion = MotionModel::new(&spec, &mut rng);
        let body = Body::sample(&spec, &mut rng);
        let a = point_colors(&spec, &body, &motion.trajectory(0)).unwrap();
        let b = point_colors(&spec, &body, &motion.trajectory(17)).unwrap();
        assert_eq!(a, b);
        let spec = tiny();
        let a = point_colors(&spec, &body, &motion.trajectory(0)).unwrap();
        let b = point_colors(&spec, &body, &motion.trajectory(17)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn novel_poses_lie_in_the_primitive_span() {
        let spec = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let motion = MotionModel::new(&spec, &mut rng);
        let train: Vec<Vec<f64>> = (0..100).map(|f| motion.trajectory(f)).collect();
        let basis = crate::pca::PoseBasis::fit(&train, 24).unwrap();
        assert!(basis.rank() <= spec.motion_primitives + 1);
        let n = motion.novel(&mut rng);
        // Centered span of the trajectory plus the mean covers the primitive span.
        let r = basis.project(&n).unwrap();
        let res: f64 = n.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let len: f64 = n.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(res < 1e-3 * len.max(1.0), "residual {res}");
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let spec = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let s = generate(&spec, a.path()).unwrap();
        assert_eq!(s.images_written, 5 * 4);
        generate(&spec, b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
        let ds = Dataset::load(a.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let motion = MotionModel::new(&spec, &mut rng);
        for (f, p) in ds.poses.iter().enumerate() {
            assert_eq!(p, &motion.trajectory(f));
        }
        assert_eq!(ds.cameras.train.len(), 3);
        assert_eq!(ds.cameras.holdout.len(), 1);
        assert_eq!(ds.cameras.train[1], spec.camera(1));
        assert_eq!(ds.spec, spec);
        // Something is in frame.
        let fg = ds.frames[0][0].mask.iter().filter(|m| **m).count();
        assert!(fg > 20, "foreground pixels {fg}");
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        assert!(matches!(Dataset::load(Path::new("/nonexistent/synth")), Err(Error::Data(_))));
    }
}
