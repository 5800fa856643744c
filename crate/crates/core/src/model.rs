//! The full avatar: pose → anchor coefficients → blended properties and
//! control offsets → skinning → splatting, with its reverse pass.

use std::time::Instant;

use nalgebra::Isometry3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::avatar::{activate, activate_backward, compose_position, GaussianSet, PosedGaussians, RawParams, RAW_WIDTH};
use crate::error::{check_len, Error, Result};
use crate::field::{AnchorField, FieldForward, StackedLayer, DEFAULT_HIDDEN};
use crate::interp::{ControlLattice, ControlState, InterpTable, GRAPH_NEIGHBORS};
use crate::pca::PoseBasis;
use crate::raster::{render, render_backward, Camera, ProjectedScene, RenderedFrame};
use crate::skinning::{
    blend_frames, lbs_points, lbs_points_backward, lbs_rotations, lbs_rotations_backward, BlendedFrames, Rig,
    SkinWeights,
};

/// How anchor outputs reach the Gaussian properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Anchors emit `B` property coefficients over the learned offset basis.
    Basis,
    /// Anchors emit the 20 raw property offsets themselves (no basis).
    DirectOffsets,
}

impl Variant {
    pub fn tag(self) -> u32 {
        match self {
            Variant::Basis => 0,
            Variant::DirectOffsets => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Variant::Basis),
            1 => Ok(Variant::DirectOffsets),
            t => Err(Error::Data(format!("unknown model variant tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub gaussians: usize,
    pub anchors: usize,
    pub controls: usize,
    pub basis: usize,
    pub hidden: Vec<usize>,
    pub variant: Variant,
    /// Standard deviation of the random initial offset bases. A zero basis
    /// together with a zero output layer would be a stationary point.
    pub basis_init_std: f64,
    pub control_basis_init_std: f64,
    pub initial_opacity: f64,
    /// Initial scale as a fraction of the mean Gaussian spacing.
    pub initial_scale_factor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gaussians: 5000,
            anchors: 50,
            controls: 1000,
            basis: 15,
            hidden: DEFAULT_HIDDEN.to_vec(),
            variant: Variant::Basis,
            basis_init_std: 1e-2,
            control_basis_init_std: 1e-3,
            initial_opacity: 0.8,
            initial_scale_factor: 0.6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gaussians == 0 || self.basis == 0 {
            return Err(Error::Config("gaussian and basis counts must be positive".into()));
        }
        if self.anchors < 3 || self.controls < 3 {
            return Err(Error::Config("anchor and control counts must be at least 3".into()));
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return Err(Error::Config("initial opacity must lie in (0, 1)".into()));
        }
        if !(self.basis_init_std >= 0.0) || !(self.control_basis_init_std >= 0.0) || !(self.initial_scale_factor > 0.0) {
            return Err(Error::Config("initialization scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// Wall time of the three pipeline stages, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimes {
    pub coefficients_ms: f64,
    pub blend_lbs_ms: f64,
    pub rasterize_ms: f64,
}

impl StageTimes {
    pub fn total_ms(&self) -> f64 {
        self.coefficients_ms + self.blend_lbs_ms + self.rasterize_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvatarModel {
    pub variant: Variant,
    pub rig: Rig,
    pub gaussians: GaussianSet,
    pub skin: SkinWeights,
    pub field: AnchorField,
    pub lattice: ControlLattice,
    /// Anchors → Gaussians.
    pub gaussian_anchor_table: InterpTable,
    /// Anchors → control points.
    pub control_anchor_table: InterpTable,
    /// Control points → Gaussians.
    pub gaussian_control_table: InterpTable,
    pub pose_basis: Option<PoseBasis>,
}

/// Everything the reverse pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct PoseState {
    pub field: FieldForward,
    /// `N × property_width`, interpolated from the anchors.
    pub gaussian_coeffs: Vec<f64>,
    pub raw: Vec<RawParams>,
    pub control: ControlState,
    pub canonical_position: Vec<[f64; 3]>,
    pub frames: BlendedFrames,
    pub posed: PosedGaussians,
    pub coefficients_ms: f64,
    pub blend_lbs_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardState {
    pub pose: PoseState,
    pub camera: Camera,
    pub scene: ProjectedScene,
    pub frame: RenderedFrame,
    pub times: StageTimes,
}

/// Loss gradients with respect to the model's learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub neutral: Vec<RawParams>,
    pub basis: Vec<RawParams>,
    pub field: Vec<StackedLayer>,
    pub control_neutral: Vec<[f64; 3]>,
    pub control_basis: Vec<[f64; 3]>,
}

/// Upstream gradients for one evaluation.
pub struct OutputGradients<'a> {
    /// `H × W × 3` image gradient.
    pub color: &'a [f64],
    /// Gradient w.r.t. activated scales (`N × 3`), if any.
    pub scale: Option<&'a [[f64; 3]]>,
    /// Gradient w.r.t. control offsets `δx_c` (`C × 3`), if any.
    pub control_offsets: Option<&'a [[f64; 3]]>,
}

fn mean_spacing(area: f64, count: usize) -> f64 {
    (area / count.max(1) as f64).sqrt()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl AvatarModel {
    /// Samples Gaussians, anchors and control points on the rig surface and
    /// builds all interpolation tables. Colors start at mid grey.
    pub fn initialize<R: Rng>(rig: Rig, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        rig.validate()?;
        let n = config.gaussians;
        let b = config.basis;
        let surface = rig.sample_surface(n, rng);
        let positions: Vec<[f64; 3]> = surface.iter().map(|s| s.position).collect();
        let anchors: Vec<[f64; 3]> = rig.sample_surface(config.anchors, rng).iter().map(|s| s.position).collect();
        let controls: Vec<[f64; 3]> = rig.sample_surface(config.controls, rng).iter().map(|s| s.position).collect();

        let spacing = mean_spacing(rig.surface_area_estimate(), n);
        let log_scale = (config.initial_scale_factor * spacing).ln();
        let neutral: Vec<RawParams> = positions
            .iter()
            .map(|_| {
                let mut row = [0.0; RAW_WIDTH];
                row[0] = 1.0;
                row[4..7].fill(log_scale);
                row[7] = logit(config.initial_opacity);
                row
            })
            .collect();

        let (basis_count, property_width) = match config.variant {
            Variant::Basis => (b, b),
            Variant::DirectOffsets => (0, RAW_WIDTH),
        };
        let noise = |std: f64, rng: &mut R| -> f64 {
            if std > 0.0 {
                Normal::new(0.0, std).map(|d| d.sample(rng)).unwrap_or(0.0)
            } else {
                0.0
            }
        };
        let offset_basis: Vec<RawParams> = (0..basis_count * n)
            .map(|_| {
                let mut row = [0.0; RAW_WIDTH];
                for v in row.iter_mut() {
                    *v = noise(config.basis_init_std, rng);
                }
                row
            })
            .collect();
        let skin = rig.skin_weights(&positions);
        let gaussians = GaussianSet::new(positions.clone(), neutral, basis_count, offset_basis)?;
        let field = AnchorField::new(anchors.clone(), rig.pose_len(), &config.hidden, property_width, b, rng);
        let mut lattice = ControlLattice::new(controls.clone(), b, GRAPH_NEIGHBORS)?;
        for d in lattice.offset_basis.iter_mut() {
            for v in d.iter_mut() {
                *v = noise(config.control_basis_init_std, rng);
            }
        }
        let gaussian_anchor_table = InterpTable::build(&anchors, &positions)?;
        let control_anchor_table = InterpTable::build(&anchors, &controls)?;
        let gaussian_control_table = InterpTable::build(&controls, &positions)?;
        Ok(Self {
            variant: config.variant,
            rig,
            gaussians,
            skin,
            field,
            lattice,
            gaussian_anchor_table,
            control_anchor_table,
            gaussian_control_table,
            pose_basis: None,
        })
    }

    pub fn gaussian_count(&self) -> usize {
        self.gaussians.count()
    }

    pub fn anchor_count(&self) -> usize {
        self.field.anchor_count()
    }

    pub fn control_count(&self) -> usize {
        self.lattice.control_count()
    }

    /// `B`, the number of control-offset basis vectors (equal to the
    /// property basis size for the basis variant).
    pub fn basis_count(&self) -> usize {
        self.lattice.basis_count()
    }

    pub fn pose_len(&self) -> usize {
        self.rig.pose_len()
    }

    /// Structural consistency of all parts; used after loading.
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        let n = self.gaussian_count();
        let f = self.anchor_count();
        let c = self.control_count();
        let b = self.basis_count();
        check_len("pose input width", self.pose_len(), self.field.pose_len())?;
        check_len("skin weight rows", n, self.skin.len())?;
        self.skin.validate(self.rig.joint_count())?;
        let pw = match self.variant {
            Variant::Basis => {
                check_len("gaussian basis size", b, self.gaussians.basis_count())?;
                b
            }
            Variant::DirectOffsets => RAW_WIDTH,
        };
        check_len("anchor property width", pw, self.field.property_width())?;
        check_len("anchor control width", b, self.field.control_width())?;
        for (name, t, src, q) in [
            ("gaussian-anchor table", &self.gaussian_anchor_table, f, n),
            ("control-anchor table", &self.control_anchor_table, f, c),
            ("gaussian-control table", &self.gaussian_control_table, c, n),
        ] {
            if t.source_count() != src || t.query_count() != q {
                return Err(Error::Data(format!("{name} does not match the model sizes")));
            }
        }
        if let Some(pca) = &self.pose_basis {
            check_len("pose basis width", self.pose_len(), pca.pose_len())?;
        }
        Ok(())
    }

    /// Posed Gaussians for `pose` (no rendering).
    pub fn pose_gaussians(&self, pose: &[f64]) -> Result<PoseState> {
        check_len("pose vector", self.pose_len(), pose.len())?;
        let t0 = Instant::now();
        // Pose-level work: anchor MLPs, control lattice and joint transforms.
        let field = self.field.forward(pose)?;
        let outputs = self.field.split_outputs(field.activations.last().map(|v| v.as_slice()).unwrap_or(&[]));
        let control = self.lattice.control_offsets(&self.control_anchor_table, &outputs.control_coeffs)?;
        let transforms = self.rig.skinning_transforms(pose, [0.0; 3])?;
        let t1 = Instant::now();

        // Per-Gaussian work.
        let pw = self.field.property_width();
        let gaussian_coeffs = self.gaussian_anchor_table.interpolate(&outputs.gaussian_coeffs, pw)?;
        let raw = match self.variant {
            Variant::Basis => self.gaussians.blend_offsets(&gaussian_coeffs)?,
            Variant::DirectOffsets => self
                .gaussians
                .neutral
                .iter()
                .zip(gaussian_coeffs.chunks_exact(RAW_WIDTH))
                .map(|(n, d)| {
                    let mut r = *n;
                    for (a, b) in r.iter_mut().zip(d) {
                        *a += b;
                    }
                    r
                })
                .collect(),
        };
        let delta = self.lattice.gaussian_position_offsets(&self.gaussian_control_table, &control.offsets)?;
        let canonical_position = compose_position(self.gaussians.neutral_position(), &delta)?;
        let (frames, posed) = self.skin_gaussians(&transforms, &raw, &canonical_position)?;
        let t2 = Instant::now();
        Ok(PoseState {
            field,
            gaussian_coeffs,
            raw,
            control,
            canonical_position,
            frames,
            posed,
            coefficients_ms: (t1 - t0).as_secs_f64() * 1e3,
            blend_lbs_ms: (t2 - t1).as_secs_f64() * 1e3,
        })
    }

    fn skin_gaussians(
        &self,
        transforms: &[Isometry3<f64>],
        raw: &[RawParams],
        canonical: &[[f64; 3]],
    ) -> Result<(BlendedFrames, PosedGaussians)> {
        let mut posed = activate(raw)?;
        let frames = blend_frames(&self.skin, transforms)?;
        posed.position = lbs_points(&frames, canonical)?;
        posed.rotation = lbs_rotations(&frames, &posed.rotation)?;
        Ok((frames, posed))
    }

    /// Gaussians built from the neutral properties and positions alone.
    pub fn neutral_gaussians(&self, pose: &[f64]) -> Result<PosedGaussians> {
        check_len("pose vector", self.pose_len(), pose.len())?;
        let transforms = self.rig.skinning_transforms(pose, [0.0; 3])?;
        Ok(self.skin_gaussians(&transforms, &self.gaussians.neutral, self.gaussians.neutral_position())?.1)
    }

    pub fn forward(&self, pose: &[f64], camera: &Camera, background: [f64; 3]) -> Result<ForwardState> {
        let pose_state = self.pose_gaussians(pose)?;
        let t0 = Instant::now();
        let (scene, frame) = render(&pose_state.posed, camera, background)?;
        let times = StageTimes {
            coefficients_ms: pose_state.coefficients_ms,
            blend_lbs_ms: pose_state.blend_lbs_ms,
            rasterize_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        Ok(ForwardState {
            pose: pose_state,
            camera: camera.clone(),
            scene,
            frame,
            times,
        })
    }

    /// Projects `pose` onto the stored pose subspace, truncated to `k`
    /// components. Without a stored basis the pose is returned unchanged.
    pub fn project_pose(&self, pose: &[f64], k: Option<usize>) -> Result<Vec<f64>> {
        match (&self.pose_basis, k) {
            (Some(b), Some(k)) => b.truncated(k).project(pose),
            (Some(b), None) => b.project(pose),
            (None, _) => {
                check_len("pose vector", self.pose_len(), pose.len())?;
                Ok(pose.to_vec())
            }
        }
    }

    pub fn backward(&self, state: &ForwardState, grads: &OutputGradients) -> Result<ModelGradients> {
        let ps = &state.pose;
        let n = self.gaussian_count();
        let c = self.control_count();
        let mut g_posed = render_backward(&ps.posed, &state.camera, &state.scene, &state.frame, grads.color)?;
        if let Some(gs) = grads.scale {
            check_len("scale gradient rows", n, gs.len())?;
            for (a, b) in g_posed.scale.iter_mut().zip(gs) {
                for k in 0..3 {
                    a[k] += b[k];
                }
            }
        }
        let g_canonical = lbs_points_backward(&ps.frames, &g_posed.position);
        g_posed.rotation = lbs_rotations_backward(&ps.frames, &g_posed.rotation);
        let g_raw = activate_backward(&ps.raw, &g_posed)?;

        let pw = self.field.property_width();
        let (basis, g_coeffs) = match self.variant {
            Variant::Basis => {
                let bg = self.gaussians.blend_backward(&ps.gaussian_coeffs, &g_raw)?;
                (bg.basis, bg.coeffs)
            }
            Variant::DirectOffsets => (Vec::new(), g_raw.iter().flat_map(|r| r.iter().copied()).collect()),
        };
        let g_anchor_prop = self.gaussian_anchor_table.interpolate_backward(&g_coeffs, pw)?;

        // δx = interp(δx_c) and x = x0 + δx, so ∂L/∂δx = ∂L/∂x.
        let flat: Vec<f64> = g_canonical.iter().flat_map(|g| g.iter().copied()).collect();
        let g_dxc_flat = self.gaussian_control_table.interpolate_backward(&flat, 3)?;
        let mut g_dxc: Vec<[f64; 3]> = g_dxc_flat.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect();
        if let Some(gc) = grads.control_offsets {
            check_len("control offset gradient rows", c, gc.len())?;
            for (a, b) in g_dxc.iter_mut().zip(gc) {
                for k in 0..3 {
                    a[k] += b[k];
                }
            }
        }
        let cg = self.lattice.control_offsets_backward(&self.control_anchor_table, &ps.control, &g_dxc)?;

        let f = self.anchor_count();
        let cw = self.field.control_width();
        let mut g_out = vec![0.0; f * (pw + cw)];
        for a in 0..f {
            let row = &mut g_out[a * (pw + cw)..(a + 1) * (pw + cw)];
            row[..pw].copy_from_slice(&g_anchor_prop[a * pw..(a + 1) * pw]);
            row[pw..].copy_from_slice(&cg.anchor_coeffs[a * cw..(a + 1) * cw]);
        }
        let fg = self.field.backward(&ps.field, &g_out)?;
        Ok(ModelGradients {
            neutral: g_raw,
            basis,
            field: fg.layers,
            control_neutral: cg.neutral,
            control_basis: cg.basis,
        })
    }
}
