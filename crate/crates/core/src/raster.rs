//! Tile-based Gaussian splatting with exact reverse-mode gradients.
//!
//! Cameras follow the OpenCV convention (x right, y down, z forward) and
//! pixel `(i, j)` is sampled at its centre `(i + 0.5, j + 0.5)`. A splat
//! touches a pixel only when the pixel lies inside its 3σ ellipse
//! (Mahalanobis² ≤ 9). Because that test is per pixel, tile binning is a pure
//! acceleration and the tiled output is identical to an all-pairs scan.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avatar::PosedGaussians;
use crate::error::{check_len, Error, Result};

pub const TILE: usize = 16;
pub const COV_FLOOR: f64 = 0.3;
pub const SIGMA_EXTENT: f64 = 3.0;
pub const MAHALANOBIS_CUTOFF: f64 = SIGMA_EXTENT * SIGMA_EXTENT;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const MIN_COV_DET: f64 = 1e-12;
pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation.
    pub translation: [f64; 3],
    pub near: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` fixes the roll (image y points away from it).
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> Self {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let rotation = [x, y, z];
        let translation = [-dot(x, eye), -dot(y, eye), -dot(z, eye)];
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
            near: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near]
            .iter()
            .chain(self.rotation.iter().flatten())
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !finite || !(self.fx > 0.0) || !(self.fy > 0.0) || !(self.near > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Input("camera needs positive focal lengths, near plane and image size".into()));
        }
        Ok(())
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    pub fn to_camera(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            dot(r[0], *p) + self.translation[0],
            dot(r[1], *p) + self.translation[1],
            dot(r[2], *p) + self.translation[2],
        ]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// A Gaussian projected to screen space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub gaussian: usize,
    pub mean: [f64; 2],
    /// 2D covariance `(a, b, c)` for `[[a, b], [b, c]]`, floor included.
    pub cov: [f64; 3],
    /// Inverse covariance in the same packing.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Binning radius in pixels, `ceil(3 √λmax)`.
    pub radius: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    cam: [f64; 3],
    view_dir: [f64; 3],
    view_dist: f64,
    color_active: [bool; 3],
}

#[derive(Debug, Clone)]
pub struct ProjectedScene {
    /// Visible splats sorted by `(depth, gaussian index)`.
    pub splats: Vec<Splat>,
    pub gaussian_count: usize,
    /// Behind the near plane.
    pub culled: usize,
    /// 2D covariance with `det ≤ 1e-12`.
    pub degenerate: usize,
}

/// Degree-1 SH color toward `dir` (unit vector from camera to Gaussian),
/// offset by 0.5 and clamped to `[0, 1]`.
pub fn sh_color(sh: &[f64; 12], dir: &[f64; 3]) -> ([f64; 3], [bool; 3]) {
    let mut out = [0.0; 3];
    let mut active = [true; 3];
    for ch in 0..3 {
        let v = 0.5 + SH_C0 * sh[ch] - SH_C1 * dir[1] * sh[3 + ch] + SH_C1 * dir[2] * sh[6 + ch]
            - SH_C1 * dir[0] * sh[9 + ch];
        active[ch] = (0.0..=1.0).contains(&v);
        out[ch] = v.clamp(0.0, 1.0);
    }
    (out, active)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = *q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `∂R/∂(w, x, y, z)` for `quat_to_matrix`.
fn quat_matrix_partials(q: &[f64; 4]) -> [[[f64; 3]; 3]; 4] {
    let [w, x, y, z] = *q;
    let t = 2.0;
    [
        [[0.0, -t * z, t * y], [t * z, 0.0, -t * x], [-t * y, t * x, 0.0]],
        [[0.0, t * y, t * z], [t * y, -2.0 * t * x, -t * w], [t * z, t * w, -2.0 * t * x]],
        [[-2.0 * t * y, t * x, t * w], [t * x, 0.0, t * z], [-t * w, t * z, -2.0 * t * y]],
        [[-2.0 * t * z, -t * w, t * x], [t * w, -2.0 * t * z, t * y], [t * x, t * y, 0.0]],
    ]
}

type M3 = [[f64; 3]; 3];

fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(a: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// `Σ = R S² Rᵀ` together with `M = R S`.
fn covariance_3d(rotation: &[f64; 4], scale: &[f64; 3]) -> (M3, M3) {
    let r = quat_to_matrix(rotation);
    let mut m = r;
    for row in m.iter_mut() {
        for k in 0..3 {
            row[k] *= scale[k];
        }
    }
    (m, mat_mul(&m, &transpose(&m)))
}

/// `T = J W`, the 2×3 map from world-space offsets to pixel offsets.
fn screen_jacobian(cam: &Camera, t: &[f64; 3]) -> [[f64; 3]; 2] {
    let (tx, ty, tz) = (t[0], t[1], t[2]);
    let j = [[cam.fx / tz, 0.0, -cam.fx * tx / (tz * tz)], [0.0, cam.fy / tz, -cam.fy * ty / (tz * tz)]];
    let w = &cam.rotation;
    let mut out = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            out[r][c] = (0..3).map(|k| j[r][k] * w[k][c]).sum();
        }
    }
    out
}

fn project_cov(tm: &[[f64; 3]; 2], sigma: &M3) -> [f64; 3] {
    let mut ts = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            ts[r][c] = (0..3).map(|k| tm[r][k] * sigma[k][c]).sum();
        }
    }
    let e = |r: usize, c: usize| -> f64 { (0..3).map(|k| ts[r][k] * tm[c][k]).sum() };
    [e(0, 0) + COV_FLOOR, e(0, 1), e(1, 1) + COV_FLOOR]
}

/// Projects posed Gaussians into `camera`, dropping culled and degenerate ones.
pub fn project(gaussians: &PosedGaussians, camera: &Camera) -> Result<ProjectedScene> {
    camera.validate()?;
    let center = camera.center();
    let results: Vec<Result<Option<std::result::Result<Splat, ()>>>> = (0..gaussians.len())
        .into_par_iter()
        .map(|g| {
            let p = gaussians.position[g];
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("gaussian {g} has a non-finite position")));
            }
            let t = camera.to_camera(&p);
            if t[2] <= camera.near {
                return Ok(None);
            }
            let (_, sigma) = covariance_3d(&gaussians.rotation[g], &gaussians.scale[g]);
            let tm = screen_jacobian(camera, &t);
            let cov = project_cov(&tm, &sigma);
            let det = cov[0] * cov[2] - cov[1] * cov[1];
            if !(det > MIN_COV_DET) {
                return Ok(Some(Err(())));
            }
            let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
            let mid = 0.5 * (cov[0] + cov[2]);
            let lambda_max = mid + (0.25 * (cov[0] - cov[2]).powi(2) + cov[1] * cov[1]).sqrt();
            let v = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            let view_dist = dot(v, v).sqrt();
            let view_dir = [v[0] / view_dist, v[1] / view_dist, v[2] / view_dist];
            let (color, color_active) = sh_color(&gaussians.sh[g], &view_dir);
            Ok(Some(Ok(Splat {
                gaussian: g,
                mean: [camera.fx * t[0] / t[2] + camera.cx, camera.fy * t[1] / t[2] + camera.cy],
                cov,
                conic,
                depth: t[2],
                radius: (SIGMA_EXTENT * lambda_max.sqrt()).ceil(),
                color,
                opacity: gaussians.opacity[g],
                cam: t,
                view_dir,
                view_dist,
                color_active,
            })))
        })
        .collect();
    let mut splats = Vec::with_capacity(gaussians.len());
    let (mut culled, mut degenerate) = (0, 0);
    for r in results {
        match r? {
            None => culled += 1,
            Some(Err(())) => degenerate += 1,
            Some(Ok(s)) => splats.push(s),
        }
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.gaussian.cmp(&b.gaussian)));
    Ok(ProjectedScene {
        splats,
        gaussian_count: gaussians.len(),
        culled,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    /// `H × W × 3`, row-major, linear RGB.
    pub color: Vec<f64>,
    /// `H × W` accumulated opacity, `1 − T`.
    pub alpha: Vec<f64>,
    /// Splats composited per pixel.
    pub contributors: Vec<u32>,
    pub background: [f64; 3],
    splat_count: usize,
}

impl RenderedFrame {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }
}

/// Splat indices per 16×16 tile, in global depth order.
fn bin_tiles(scene: &ProjectedScene, camera: &Camera) -> (usize, Vec<Vec<u32>>) {
    let tiles_x = camera.width.div_ceil(TILE);
    let tiles_y = camera.height.div_ceil(TILE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    let (w, h) = (camera.width as f64, camera.height as f64);
    for (i, s) in scene.splats.iter().enumerate() {
        let x0 = (s.mean[0] - s.radius).floor().max(0.0);
        let x1 = (s.mean[0] + s.radius).ceil().min(w - 1.0);
        let y0 = (s.mean[1] - s.radius).floor().max(0.0);
        let y1 = (s.mean[1] + s.radius).ceil().min(h - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE, x1 as usize / TILE);
        let (ty0, ty1) = (y0 as usize / TILE, y1 as usize / TILE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    (tiles_x, bins)
}

/// Per-pixel weight of a splat, or `None` outside the 3σ ellipse.
#[inline]
fn splat_weight(s: &Splat, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let m = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    if !(m <= MAHALANOBIS_CUTOFF) {
        return None;
    }
    let g = (-0.5 * m).exp();
    Some((s.opacity * g, g, dx, dy))
}

struct TilePixels {
    color: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    count: Vec<u32>,
}

/// Front-to-back compositing of all splats over `background`.
pub fn rasterize(scene: &ProjectedScene, camera: &Camera, background: [f64; 3]) -> Result<RenderedFrame> {
    camera.validate()?;
    let (tiles_x, bins) = bin_tiles(scene, camera);
    let tiles: Vec<TilePixels> = bins
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (ox, oy) = ((t % tiles_x) * TILE, (t / tiles_x) * TILE);
            let tw = TILE.min(camera.width - ox);
            let th = TILE.min(camera.height - oy);
            let mut out = TilePixels {
                color: Vec::with_capacity(tw * th),
                alpha: Vec::with_capacity(tw * th),
                count: Vec::with_capacity(tw * th),
            };
            for y in oy..oy + th {
                for x in ox..ox + tw {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut c = [0.0; 3];
                    let mut trans = 1.0;
                    let mut n = 0;
                    for &i in list {
                        let s = &scene.splats[i as usize];
                        let Some((a, ..)) = splat_weight(s, px, py) else { continue };
                        for ch in 0..3 {
                            c[ch] += trans * a * s.color[ch];
                        }
                        trans *= 1.0 - a;
                        n += 1;
                        if trans < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    for ch in 0..3 {
                        c[ch] += trans * background[ch];
                    }
                    out.color.push(c);
                    out.alpha.push(1.0 - trans);
                    out.count.push(n);
                }
            }
            out
        })
        .collect();
    let (w, h) = (camera.width, camera.height);
    let mut frame = RenderedFrame {
        width: w,
        height: h,
        color: vec![0.0; w * h * 3],
        alpha: vec![0.0; w * h],
        contributors: vec![0; w * h],
        background,
        splat_count: scene.splats.len(),
    };
    for (t, tile) in tiles.into_iter().enumerate() {
        let (ox, oy) = ((t % tiles_x) * TILE, (t / tiles_x) * TILE);
        let tw = TILE.min(w - ox);
        for (k, c) in tile.color.iter().enumerate() {
            let (x, y) = (ox + k % tw, oy + k / tw);
            let p = y * w + x;
            frame.color[3 * p..3 * p + 3].copy_from_slice(c);
            frame.alpha[p] = tile.alpha[k];
            frame.contributors[p] = tile.count[k];
        }
    }
    Ok(frame)
}

/// Projects and rasterizes in one call.
pub fn render(gaussians: &PosedGaussians, camera: &Camera, background: [f64; 3]) -> Result<(ProjectedScene, RenderedFrame)> {
    let scene = project(gaussians, camera)?;
    let frame = rasterize(&scene, camera, background)?;
    Ok((scene, frame))
}

/// Loss gradients with respect to one screen-space splat.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatGradient {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
}

impl SplatGradient {
    fn add(&mut self, o: &SplatGradient) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Reverse pass of `rasterize` for `grad_color` (`H × W × 3`).
///
/// Each pixel's contributor list is recomputed front to back, then walked
/// back to front with the color accumulated behind each splat, so no
/// division by `1 − α` is needed.
pub fn rasterize_backward(
    scene: &ProjectedScene,
    camera: &Camera,
    frame: &RenderedFrame,
    grad_color: &[f64],
) -> Result<Vec<SplatGradient>> {
    if frame.width != camera.width || frame.height != camera.height || frame.splat_count != scene.splats.len() {
        return Err(Error::Input("rendered frame does not belong to this scene and camera".into()));
    }
    check_len("color gradient", camera.pixel_count() * 3, grad_color.len())?;
    let bg = frame.background;
    let (tiles_x, bins) = bin_tiles(scene, camera);
    let partial: Vec<Vec<SplatGradient>> = bins
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut local = vec![SplatGradient::default(); list.len()];
            let (ox, oy) = ((t % tiles_x) * TILE, (t / tiles_x) * TILE);
            let tw = TILE.min(camera.width - ox);
            let th = TILE.min(camera.height - oy);
            let mut stack: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
            for y in oy..oy + th {
                for x in ox..ox + tw {
                    let p = y * camera.width + x;
                    let g = [grad_color[3 * p], grad_color[3 * p + 1], grad_color[3 * p + 2]];
                    if g == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    stack.clear();
                    let mut trans = 1.0;
                    for (k, &i) in list.iter().enumerate() {
                        let s = &scene.splats[i as usize];
                        let Some((a, gauss, dx, dy)) = splat_weight(s, px, py) else { continue };
                        stack.push((k, a, gauss, dx, dy, trans));
                        trans *= 1.0 - a;
                        if trans < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    let mut behind = bg;
                    for &(k, a, gauss, dx, dy, t_i) in stack.iter().rev() {
                        let s = &scene.splats[list[k] as usize];
                        let out = &mut local[k];
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            out.color[ch] += g[ch] * t_i * a;
                            d_alpha += g[ch] * t_i * (s.color[ch] - behind[ch]);
                            behind[ch] = a * s.color[ch] + (1.0 - a) * behind[ch];
                        }
                        out.opacity += d_alpha * gauss;
                        let d_m = -0.5 * a * d_alpha;
                        out.conic[0] += d_m * dx * dx;
                        out.conic[1] += d_m * 2.0 * dx * dy;
                        out.conic[2] += d_m * dy * dy;
                        out.mean[0] += d_m * -2.0 * (s.conic[0] * dx + s.conic[1] * dy);
                        out.mean[1] += d_m * -2.0 * (s.conic[1] * dx + s.conic[2] * dy);
                    }
                }
            }
            local
        })
        .collect();
    let mut grads = vec![SplatGradient::default(); scene.splats.len()];
    for (list, local) in bins.iter().zip(&partial) {
        for (&i, g) in list.iter().zip(local) {
            grads[i as usize].add(g);
        }
    }
    Ok(grads)
}

/// Chains splat gradients to activated Gaussian attributes.
pub fn project_backward(
    gaussians: &PosedGaussians,
    camera: &Camera,
    scene: &ProjectedScene,
    splat_grads: &[SplatGradient],
) -> Result<PosedGaussians> {
    check_len("splat gradients", scene.splats.len(), splat_grads.len())?;
    check_len("projected gaussians", scene.gaussian_count, gaussians.len())?;
    let mut out = PosedGaussians::zeros(gaussians.len());
    let w = &camera.rotation;
    for (s, sg) in scene.splats.iter().zip(splat_grads) {
        let g = s.gaussian;
        let q = gaussians.rotation[g];
        let scale = gaussians.scale[g];
        let sh = &gaussians.sh[g];

        out.opacity[g] += sg.opacity;

        // Color -> SH coefficients and view direction.
        let d = s.view_dir;
        let basis = [SH_C0, -SH_C1 * d[1], SH_C1 * d[2], -SH_C1 * d[0]];
        let mut g_dir = [0.0; 3];
        for ch in 0..3 {
            if !s.color_active[ch] {
                continue;
            }
            let gc = sg.color[ch];
            for band in 0..4 {
                out.sh[g][band * 3 + ch] += gc * basis[band];
            }
            g_dir[1] -= gc * SH_C1 * sh[3 + ch];
            g_dir[2] += gc * SH_C1 * sh[6 + ch];
            g_dir[0] -= gc * SH_C1 * sh[9 + ch];
        }
        let along = dot(g_dir, d);
        for k in 0..3 {
            out.position[g][k] += (g_dir[k] - along * d[k]) / s.view_dist;
        }

        // Conic -> covariance: dL/dΣ' = -Q G Q with the symmetric G.
        let qm = [[s.conic[0], s.conic[1]], [s.conic[1], s.conic[2]]];
        let gm = [[sg.conic[0], 0.5 * sg.conic[1]], [0.5 * sg.conic[1], sg.conic[2]]];
        let mut qg = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                qg[i][j] = qm[i][0] * gm[0][j] + qm[i][1] * gm[1][j];
            }
        }
        let mut g_cov = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                g_cov[i][j] = -(qg[i][0] * qm[0][j] + qg[i][1] * qm[1][j]);
            }
        }

        // Σ' = T Σ Tᵀ + floor.
        let t = s.cam;
        let tm = screen_jacobian(camera, &t);
        let (mm, sigma) = covariance_3d(&q, &scale);
        let mut g_sigma = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        acc += tm[a][i] * g_cov[a][b] * tm[b][j];
                    }
                }
                g_sigma[i][j] = acc;
            }
        }
        // dL/dT = 2 G' T Σ for symmetric G' and Σ.
        let mut g_t = [[0.0; 3]; 2];
        for a in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for b in 0..2 {
                    for k in 0..3 {
                        acc += g_cov[a][b] * tm[b][k] * sigma[k][c];
                    }
                }
                g_t[a][c] = 2.0 * acc;
            }
        }
        // T = J W.
        let mut g_j = [[0.0; 3]; 2];
        for a in 0..2 {
            for k in 0..3 {
                g_j[a][k] = (0..3).map(|c| g_t[a][c] * w[k][c]).sum();
            }
        }
        let (tx, ty, tz) = (t[0], t[1], t[2]);
        let (fx, fy) = (camera.fx, camera.fy);
        let iz2 = 1.0 / (tz * tz);
        let iz3 = iz2 / tz;
        let mut g_cam = [0.0; 3];
        g_cam[0] += g_j[0][2] * (-fx * iz2);
        g_cam[1] += g_j[1][2] * (-fy * iz2);
        g_cam[2] += g_j[0][0] * (-fx * iz2)
            + g_j[0][2] * (2.0 * fx * tx * iz3)
            + g_j[1][1] * (-fy * iz2)
            + g_j[1][2] * (2.0 * fy * ty * iz3);
        // Mean.
        g_cam[0] += sg.mean[0] * fx / tz;
        g_cam[1] += sg.mean[1] * fy / tz;
        g_cam[2] += -sg.mean[0] * fx * tx * iz2 - sg.mean[1] * fy * ty * iz2;
        for k in 0..3 {
            out.position[g][k] += (0..3).map(|r| w[r][k] * g_cam[r]).sum::<f64>();
        }

        // Σ = M Mᵀ, M = R S.
        let mut g_m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g_m[i][j] = 2.0 * (0..3).map(|k| g_sigma[i][k] * mm[k][j]).sum::<f64>();
            }
        }
        let r = quat_to_matrix(&q);
        for k in 0..3 {
            out.scale[g][k] += (0..3).map(|i| g_m[i][k] * r[i][k]).sum::<f64>();
        }
        let partials = quat_matrix_partials(&q);
        for (c, dr) in partials.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += g_m[i][j] * scale[j] * dr[i][j];
                }
            }
            out.rotation[g][c] += acc;
        }
    }
    Ok(out)
}

/// Full reverse pass from image gradients to activated Gaussian attributes.
pub fn render_backward(
    gaussians: &PosedGaussians,
    camera: &Camera,
    scene: &ProjectedScene,
    frame: &RenderedFrame,
    grad_color: &[f64],
) -> Result<PosedGaussians> {
    let sg = rasterize_backward(scene, camera, frame, grad_color)?;
    project_backward(gaussians, camera, scene, &sg)
}
