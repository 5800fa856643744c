//! Losses, Adam with per-group staging, and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avatar::{RawParams, SH_REST};
use crate::error::{check_len, Error, Result};
use crate::metrics::psnr;
use crate::model::{AvatarModel, ModelGradients, OutputGradients};
use crate::raster::Camera;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr_neutral: f64,
    pub lr_control_neutral: f64,
    pub lr_mlp: f64,
    /// Basis learning rates are the matching neutral rate divided by this.
    pub basis_lr_divisor: f64,
    pub stage_basis_start: u64,
    pub stage_sh1_start: u64,
    pub lambda_ctrl: f64,
    pub lambda_scale: f64,
    pub lambda_perceptual: f64,
    pub scale_floor: f64,
    /// Learning rates decay exponentially to this fraction at the last iteration.
    pub final_lr_fraction: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr_neutral: 5e-4,
            lr_control_neutral: 1.6e-4,
            lr_mlp: 5e-4,
            basis_lr_divisor: 5.0,
            stage_basis_start: 2_000,
            // 250K of 800K at full scale, scaled to the desk run length.
            stage_sh1_start: 3_125,
            lambda_ctrl: 0.1,
            lambda_scale: 1.0,
            lambda_perceptual: 0.0,
            scale_floor: 0.01,
            final_lr_fraction: 0.1,
            background: [0.0; 3],
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 800K iterations, degree-1 SH from 250K.
    pub fn full_scale() -> Self {
        Self {
            iterations: 800_000,
            stage_sh1_start: 250_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_basis_start > self.iterations || self.stage_sh1_start > self.iterations {
            return Err(Error::Config("stage boundaries must lie within [0, iterations]".into()));
        }
        let rates = [self.lr_neutral, self.lr_control_neutral, self.lr_mlp];
        if rates.iter().any(|r| !(*r >= 0.0)) || !(self.basis_lr_divisor > 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        let weights = [self.lambda_ctrl, self.lambda_scale, self.lambda_perceptual, self.scale_floor];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final learning-rate fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Multiplier applied to every learning rate at `iteration`.
    pub fn decay(&self, iteration: u64) -> f64 {
        if self.iterations == 0 {
            return 1.0;
        }
        let t = (iteration as f64 / self.iterations as f64).min(1.0);
        self.final_lr_fraction.powf(t)
    }
}

/// Mean absolute difference over all `H × W × 3` values, with its gradient.
pub fn loss_l1(render: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("target image values", render.len(), target.len())?;
    if render.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / render.len() as f64;
    let mut sum = 0.0;
    let grad = render
        .iter()
        .zip(target)
        .map(|(r, t)| {
            let d = r - t;
            sum += d.abs();
            if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum * inv, grad))
}

/// `Σ_(i,j) ‖δx_c^i − δx_c^j‖` over undirected edges, with its gradient.
pub fn loss_ctrl(offsets: &[[f64; 3]], edges: &[(usize, usize)]) -> (f64, Vec<[f64; 3]>) {
    let mut grad = vec![[0.0; 3]; offsets.len()];
    let mut sum = 0.0;
    for &(i, j) in edges {
        let d = [offsets[i][0] - offsets[j][0], offsets[i][1] - offsets[j][1], offsets[i][2] - offsets[j][2]];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        sum += n;
        if n > 0.0 {
            for k in 0..3 {
                grad[i][k] += d[k] / n;
                grad[j][k] -= d[k] / n;
            }
        }
    }
    (sum, grad)
}

/// `Σ max(floor, s)` over every scale axis, with its gradient.
pub fn loss_scale(scales: &[[f64; 3]], floor: f64) -> (f64, Vec<[f64; 3]>) {
    let mut sum = 0.0;
    let grad = scales
        .iter()
        .map(|s| {
            let mut g = [0.0; 3];
            for k in 0..3 {
                if s[k] > floor {
                    sum += s[k];
                    g[k] = 1.0;
                } else {
                    sum += floor;
                }
            }
            g
        })
        .collect();
    (sum, grad)
}

/// Optional image-space perceptual term. The default contributes nothing.
pub trait PerceptualLoss: Send + Sync {
    /// Value and gradient w.r.t. the rendered image, or `None` when inactive.
    fn evaluate(&self, render: &[f64], target: &[f64], width: usize, height: usize) -> Option<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoPerceptual;

impl PerceptualLoss for NoPerceptual {
    fn evaluate(&self, _: &[f64], _: &[f64], _: usize, _: usize) -> Option<(f64, Vec<f64>)> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ctrl: f64,
    pub scale: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// `L1 + λ_ctrl · L_ctrl + λ_scale · L_scale (+ λ_p · L_p)`.
pub fn total_loss(l1: f64, ctrl: f64, scale: f64, perceptual: f64, config: &TrainConfig) -> LossBreakdown {
    LossBreakdown {
        l1,
        ctrl,
        scale,
        perceptual,
        total: l1 + config.lambda_ctrl * ctrl + config.lambda_scale * scale + config.lambda_perceptual * perceptual,
    }
}

/// One training observation. `image` is already composited over the
/// training background outside the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub frame: usize,
    pub view: usize,
    pub pose: Vec<f64>,
    pub camera: Camera,
    pub image: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Something that hands out training samples by index.
pub trait SampleSource {
    fn sample_count(&self) -> usize;
    fn sample(&self, index: usize, background: [f64; 3]) -> Result<FrameSample>;
}

/// Evaluates the full loss and its gradient w.r.t. every parameter group.
pub fn loss_and_gradients(
    model: &AvatarModel,
    config: &TrainConfig,
    perceptual: &dyn PerceptualLoss,
    pose: &[f64],
    camera: &Camera,
    target: &[f64],
) -> Result<(LossBreakdown, ModelGradients, Vec<f64>)> {
    let state = model.forward(pose, camera, config.background)?;
    let (l1, mut g_color) = loss_l1(&state.frame.color, target)?;
    let (ctrl, mut g_ctrl) = loss_ctrl(&state.pose.control.offsets, &model.lattice.edges());
    let (scale, mut g_scale) = loss_scale(&state.pose.posed.scale, config.scale_floor);
    let mut p_val = 0.0;
    if config.lambda_perceptual > 0.0 {
        if let Some((v, g)) = perceptual.evaluate(&state.frame.color, target, camera.width, camera.height) {
            check_len("perceptual gradient", g_color.len(), g.len())?;
            p_val = v;
            for (a, b) in g_color.iter_mut().zip(g) {
                *a += config.lambda_perceptual * b;
            }
        }
    }
    for g in g_ctrl.iter_mut() {
        for v in g.iter_mut() {
            *v *= config.lambda_ctrl;
        }
    }
    for g in g_scale.iter_mut() {
        for v in g.iter_mut() {
            *v *= config.lambda_scale;
        }
    }
    let losses = total_loss(l1, ctrl, scale, p_val, config);
    let grads = model.backward(
        &state,
        &OutputGradients {
            color: &g_color,
            scale: Some(&g_scale),
            control_offsets: Some(&g_ctrl),
        },
    )?;
    Ok((losses, grads, state.frame.color))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// An Adam parameter group: one step counter shared by its tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamGroup {
    pub step: u64,
    pub tensors: Vec<Moments>,
}

impl AdamGroup {
    pub fn new(lens: &[usize]) -> Self {
        Self {
            step: 0,
            tensors: lens.iter().map(|&l| Moments::zeros(l)).collect(),
        }
    }

    fn begin_step(&mut self) -> (f64, f64) {
        self.step += 1;
        let t = self.step as i32;
        (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t))
    }
}

/// Adam update of `params` restricted to indices where `mask(i)` holds.
fn adam_update(
    moments: &mut Moments,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    corrections: (f64, f64),
    mask: impl Fn(usize) -> bool,
) {
    let (c1, c2) = corrections;
    for i in 0..params.len() {
        if !mask(i) {
            continue;
        }
        let g = grads[i];
        let m = ADAM_BETA1 * moments.m[i] + (1.0 - ADAM_BETA1) * g;
        let v = ADAM_BETA2 * moments.v[i] + (1.0 - ADAM_BETA2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
    }
}

/// Names of the optimizer groups, in storage order.
pub const GROUPS: [&str; 7] = [
    "neutral",
    "neutral_sh1",
    "basis",
    "basis_sh1",
    "control_neutral",
    "control_basis",
    "mlp",
];

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub groups: Vec<AdamGroup>,
}

impl OptimizerState {
    pub fn new(model: &AvatarModel) -> Self {
        let n20 = model.gaussians.neutral.len() * 20;
        let b20 = model.gaussians.offset_basis.len() * 20;
        let c3 = model.lattice.neutral_offset.len() * 3;
        let cb3 = model.lattice.offset_basis.len() * 3;
        let mlp: Vec<usize> = model
            .field
            .layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect();
        Self {
            groups: vec![
                AdamGroup::new(&[n20]),
                AdamGroup::new(&[n20]),
                AdamGroup::new(&[b20]),
                AdamGroup::new(&[b20]),
                AdamGroup::new(&[c3]),
                AdamGroup::new(&[cb3]),
                AdamGroup::new(&mlp),
            ],
        }
    }
}

/// Which parameter groups update at an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveGroups {
    pub neutral: bool,
    pub neutral_sh1: bool,
    pub basis: bool,
    pub basis_sh1: bool,
    pub control_neutral: bool,
    pub control_basis: bool,
    pub mlp: bool,
}

impl ActiveGroups {
    pub fn at(config: &TrainConfig, iteration: u64) -> Self {
        let basis = iteration >= config.stage_basis_start;
        let sh1 = iteration >= config.stage_sh1_start;
        Self {
            neutral: true,
            neutral_sh1: sh1,
            basis,
            basis_sh1: basis && sh1,
            control_neutral: true,
            control_basis: basis,
            mlp: basis,
        }
    }
}

fn is_sh1_column(i: usize) -> bool {
    SH_REST.contains(&(i % 20))
}

fn flat_raw(rows: &[RawParams]) -> &[f64] {
    rows.as_flattened()
}

fn flat_raw_mut(rows: &mut [RawParams]) -> &mut [f64] {
    rows.as_flattened_mut()
}

/// Applies one Adam step to the groups active at `iteration`.
pub fn apply_gradients(
    model: &mut AvatarModel,
    opt: &mut OptimizerState,
    grads: &ModelGradients,
    config: &TrainConfig,
    iteration: u64,
) {
    let active = ActiveGroups::at(config, iteration);
    let decay = config.decay(iteration);
    let lr_n = config.lr_neutral * decay;
    let lr_b = lr_n / config.basis_lr_divisor;
    let lr_c = config.lr_control_neutral * decay;
    let lr_cb = lr_c / config.basis_lr_divisor;
    let lr_m = config.lr_mlp * decay;
    let g = &mut opt.groups;

    if active.neutral {
        let c = g[0].begin_step();
        adam_update(&mut g[0].tensors[0], flat_raw_mut(&mut model.gaussians.neutral), flat_raw(&grads.neutral), lr_n, c, |i| {
            !is_sh1_column(i)
        });
    }
    if active.neutral_sh1 {
        let c = g[1].begin_step();
        adam_update(&mut g[1].tensors[0], flat_raw_mut(&mut model.gaussians.neutral), flat_raw(&grads.neutral), lr_n, c, is_sh1_column);
    }
    if !grads.basis.is_empty() {
        if active.basis {
            let c = g[2].begin_step();
            adam_update(&mut g[2].tensors[0], flat_raw_mut(&mut model.gaussians.offset_basis), flat_raw(&grads.basis), lr_b, c, |i| {
                !is_sh1_column(i)
            });
        }
        if active.basis_sh1 {
            let c = g[3].begin_step();
            adam_update(&mut g[3].tensors[0], flat_raw_mut(&mut model.gaussians.offset_basis), flat_raw(&grads.basis), lr_b, c, is_sh1_column);
        }
    }
    if active.control_neutral {
        let c = g[4].begin_step();
        adam_update(
            &mut g[4].tensors[0],
            model.lattice.neutral_offset.as_flattened_mut(),
            grads.control_neutral.as_flattened(),
            lr_c,
            c,
            |_| true,
        );
    }
    if active.control_basis {
        let c = g[5].begin_step();
        adam_update(
            &mut g[5].tensors[0],
            model.lattice.offset_basis.as_flattened_mut(),
            grads.control_basis.as_flattened(),
            lr_cb,
            c,
            |_| true,
        );
    }
    if active.mlp {
        let c = g[6].begin_step();
        for (l, (layer, lg)) in model.field.layers.iter_mut().zip(&grads.field).enumerate() {
            let (mw, rest) = g[6].tensors[2 * l..].split_at_mut(1);
            adam_update(&mut mw[0], &mut layer.weight, &lg.weight, lr_m, c, |_| true);
            adam_update(&mut rest[0], &mut layer.bias, &lg.bias, lr_m, c, |_| true);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub frame: usize,
    pub view: usize,
    pub loss: LossBreakdown,
    pub psnr: f64,
    pub lr_scale: f64,
}

/// Model, optimizer and iteration counter.
pub struct Trainer {
    pub model: AvatarModel,
    pub optimizer: OptimizerState,
    pub iteration: u64,
    pub config: TrainConfig,
    pub perceptual: Box<dyn PerceptualLoss>,
}

impl Trainer {
    pub fn new(model: AvatarModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(&model);
        Ok(Self {
            model,
            optimizer,
            iteration: 0,
            config,
            perceptual: Box::new(NoPerceptual),
        })
    }

    pub fn resume(model: AvatarModel, optimizer: OptimizerState, iteration: u64, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let fresh = OptimizerState::new(&model);
        let shape = |o: &OptimizerState| -> Vec<Vec<usize>> {
            o.groups.iter().map(|g| g.tensors.iter().map(|t| t.m.len()).collect()).collect()
        };
        if shape(&optimizer) != shape(&fresh) {
            return Err(Error::Data("optimizer state does not match the model".into()));
        }
        Ok(Self {
            model,
            optimizer,
            iteration,
            config,
            perceptual: Box::new(NoPerceptual),
        })
    }

    /// Sample index used at `iteration`: a fresh shuffle per epoch, derived
    /// from the seed and epoch so resumed runs see the same sequence.
    pub fn sample_index(&self, iteration: u64, count: usize) -> usize {
        let epoch = iteration / count as u64;
        let pos = (iteration % count as u64) as usize;
        let mut order: Vec<usize> = (0..count).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order[pos]
    }

    pub fn step(&mut self, sample: &FrameSample) -> Result<StepMetrics> {
        let (loss, grads, render) = loss_and_gradients(
            &self.model,
            &self.config,
            self.perceptual.as_ref(),
            &sample.pose,
            &sample.camera,
            &sample.image,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {} (frame {}, view {}): l1 {}, ctrl {}, scale {}",
                self.iteration, sample.frame, sample.view, loss.l1, loss.ctrl, loss.scale
            )));
        }
        apply_gradients(&mut self.model, &mut self.optimizer, &grads, &self.config, self.iteration);
        let metrics = StepMetrics {
            iteration: self.iteration,
            frame: sample.frame,
            view: sample.view,
            loss,
            psnr: psnr(&render, &sample.image)?,
            lr_scale: self.config.decay(self.iteration),
        };
        self.iteration += 1;
        Ok(metrics)
    }

    /// Runs until `until` (exclusive), calling `on_step` after every step.
    pub fn run<S: SampleSource + ?Sized>(
        &mut self,
        source: &S,
        until: u64,
        mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        let count = source.sample_count();
        if count == 0 {
            return Err(Error::Data("training split is empty".into()));
        }
        while self.iteration < until {
            let idx = self.sample_index(self.iteration, count);
            let sample = source.sample(idx, self.config.background)?;
            let m = self.step(&sample)?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}

/// CSV metrics log: one row per iteration.
pub struct MetricsLog<W: std::io::Write> {
    writer: csv::Writer<W>,
}

pub const METRICS_HEADER: [&str; 10] = [
    "iteration", "frame", "view", "loss", "l1", "ctrl", "scale", "perceptual", "psnr", "lr_scale",
];

impl<W: std::io::Write> MetricsLog<W> {
    pub fn new(inner: W, write_header: bool) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(inner);
        if write_header {
            writer.write_record(METRICS_HEADER).map_err(|e| Error::Data(e.to_string()))?;
        }
        Ok(Self { writer })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        let l = &m.loss;
        self.writer
            .write_record([
                m.iteration.to_string(),
                m.frame.to_string(),
                m.view.to_string(),
                format!("{:.9e}", l.total),
                format!("{:.9e}", l.l1),
                format!("{:.9e}", l.ctrl),
                format!("{:.9e}", l.scale),
                format!("{:.9e}", l.perceptual),
                format!("{:.6}", m.psnr),
                format!("{:.6}", m.lr_scale),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        self.writer.flush().map_err(|e| Error::Data(e.to_string()))
    }
}
