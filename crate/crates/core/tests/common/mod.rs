//! Fixtures shared by the integration tests and the acceptance suite: a
//! two-joint rig, a tiny model, finite-difference gradient checks and the
//! per-step parameter audit of the stage schedule.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatavatar::model::{AvatarModel, ModelConfig, ModelGradients, Variant};
use splatavatar::raster::Camera;
use splatavatar::skinning::{Capsule, Joint, Rig};
use splatavatar::train::{loss_and_gradients, FrameSample, NoPerceptual, SampleSource, TrainConfig, Trainer};
use splatavatar::Result;

pub fn two_joint_rig() -> Rig {
    Rig {
        joints: vec![
            Joint {
                name: "base".into(),
                parent: None,
                offset: [0.0, 0.9, 0.0],
                limit: 0.8,
            },
            Joint {
                name: "tip".into(),
                parent: Some(0),
                offset: [0.0, 0.3, 0.0],
                limit: 0.8,
            },
        ],
        capsules: vec![
            Capsule {
                joint: 0,
                start: [0.0, 0.65, 0.0],
                end: [0.0, 1.15, 0.0],
                radius: 0.12,
            },
            Capsule {
                joint: 1,
                start: [0.0, 1.2, 0.0],
                end: [0.0, 1.45, 0.0],
                radius: 0.1,
            },
        ],
        skin_falloff: 0.05,
    }
}

pub fn camera(size: usize) -> Camera {
    Camera::look_at([0.3, 1.05, 2.2], [0.0, 1.05, 0.0], [0.0, 1.0, 0.0], 1.3 * size as f64, size, size)
}

pub fn tiny_model(variant: Variant, seed: u64) -> AvatarModel {
    let config = ModelConfig {
        gaussians: 10,
        anchors: 3,
        controls: 4,
        basis: 2,
        hidden: vec![4],
        variant,
        ..ModelConfig::default()
    };
    AvatarModel::initialize(two_joint_rig(), &config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Moves every parameter off its initial value so no gradient path is
/// trivially zero.
pub fn randomize(model: &mut AvatarModel, rng: &mut ChaCha8Rng) {
    for row in model.gaussians.neutral.iter_mut() {
        for v in row[0..4].iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        for v in row[4..7].iter_mut() {
            *v = (0.12f64).ln() + rng.gen_range(-0.3..0.3);
        }
        row[7] = rng.gen_range(-1.0..1.5);
        for v in row[8..20].iter_mut() {
            *v = rng.gen_range(-0.4..0.4);
        }
    }
    for row in model.gaussians.offset_basis.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    for layer in model.field.layers.iter_mut() {
        for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    for v in model
        .lattice
        .neutral_offset
        .as_flattened_mut()
        .iter_mut()
        .chain(model.lattice.offset_basis.as_flattened_mut())
    {
        *v = rng.gen_range(-0.02..0.02);
    }
}

pub fn tensor_count(model: &AvatarModel) -> usize {
    4 + 2 * model.field.layers.len()
}

pub fn tensor_mut(model: &mut AvatarModel, id: usize) -> (&'static str, &mut [f64]) {
    match id {
        0 => ("neutral", model.gaussians.neutral.as_flattened_mut()),
        1 => ("basis", model.gaussians.offset_basis.as_flattened_mut()),
        2 => ("control_neutral", model.lattice.neutral_offset.as_flattened_mut()),
        3 => ("control_basis", model.lattice.offset_basis.as_flattened_mut()),
        _ => {
            let l = (id - 4) / 2;
            if id.is_multiple_of(2) {
                ("mlp_weight", &mut model.field.layers[l].weight)
            } else {
                ("mlp_bias", &mut model.field.layers[l].bias)
            }
        }
    }
}

pub fn tensor_grad(g: &ModelGradients, id: usize) -> &[f64] {
    match id {
        0 => g.neutral.as_flattened(),
        1 => g.basis.as_flattened(),
        2 => g.control_neutral.as_flattened(),
        3 => g.control_basis.as_flattened(),
        _ => {
            let l = (id - 4) / 2;
            if id.is_multiple_of(2) {
                &g.field[l].weight
            } else {
                &g.field[l].bias
            }
        }
    }
}

pub fn snapshot(model: &mut AvatarModel) -> Vec<Vec<f64>> {
    (0..tensor_count(model)).map(|id| tensor_mut(model, id).1.to_vec()).collect()
}

pub struct Fixed(pub Vec<FrameSample>);

impl SampleSource for Fixed {
    fn sample_count(&self) -> usize {
        self.0.len()
    }
    fn sample(&self, index: usize, _background: [f64; 3]) -> Result<FrameSample> {
        Ok(self.0[index].clone())
    }
}

pub fn teacher_sample(size: usize, pose: Vec<f64>) -> FrameSample {
    let mut teacher = tiny_model(Variant::Basis, 21);
    randomize(&mut teacher, &mut ChaCha8Rng::seed_from_u64(22));
    let cam = camera(size);
    let image = teacher.forward(&pose, &cam, [0.0; 3]).unwrap().frame.color;
    FrameSample {
        frame: 0,
        view: 0,
        mask: image.chunks(3).map(|p| p.iter().any(|v| *v > 0.0)).collect(),
        pose,
        camera: cam,
        image,
    }
}

pub fn sh1_columns(rows: &[f64]) -> Vec<f64> {
    rows.chunks(20).flat_map(|r| r[11..20].to_vec()).collect()
}

pub fn non_sh1_columns(rows: &[f64]) -> Vec<f64> {
    rows.chunks(20).flat_map(|r| r[0..11].to_vec()).collect()
}


/// Outcome of comparing analytic and central-difference gradients.
pub struct GradientReport {
    pub checked: usize,
    pub nonzero: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

pub const GRADIENT_STEP: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error, so near-zero pairs compare absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-3;

/// Checks d(total loss)/d(parameter) for every entry of every learnable
/// tensor, or for `sample` random entries per tensor when given.
pub fn gradient_check(variant: Variant, sample: Option<usize>) -> GradientReport {
    let mut model = tiny_model(variant, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    randomize(&mut model, &mut rng);
    let cam = camera(16);
    let pose = vec![0.3, -0.2, 0.15, -0.35, 0.25, 0.1];
    let target: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let config = TrainConfig {
        background: [0.1, 0.2, 0.3],
        ..TrainConfig::default()
    };
    let loss = |m: &AvatarModel| loss_and_gradients(m, &config, &NoPerceptual, &pose, &cam, &target).unwrap().0.total;
    let (_, grads, _) = loss_and_gradients(&model, &config, &NoPerceptual, &pose, &cam, &target).unwrap();
    let h = GRADIENT_STEP;
    let mut report = GradientReport {
        checked: 0,
        nonzero: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    for id in 0..tensor_count(&model) {
        let analytic = tensor_grad(&grads, id).to_vec();
        let len = tensor_mut(&mut model, id).1.len();
        let picks: Vec<usize> = match sample {
            Some(n) if len > n => (0..n).map(|_| rng.gen_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for i in picks {
            let (name, t) = tensor_mut(&mut model, id);
            let orig = t[i];
            t[i] = orig + h;
            let up = loss(&model);
            tensor_mut(&mut model, id).1[i] = orig - h;
            let down = loss(&model);
            tensor_mut(&mut model, id).1[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
            report.checked += 1;
            report.worst = report.worst.max(rel);
            if a.abs() > 1e-6 {
                report.nonzero += 1;
            }
            if rel > GRADIENT_TOLERANCE {
                report.failures.push(format!("{variant:?} {name}[{i}]: analytic {a:.6e} numeric {numeric:.6e}"));
            }
        }
    }
    report
}

/// Runs `steps` optimizer steps and compares every parameter tensor before
/// and after each step with the schedule. Returns the mismatches.
pub fn staging_audit(stage_basis_start: u64, stage_sh1_start: u64, steps: u64) -> Vec<String> {
    let mut model = tiny_model(Variant::Basis, 31);
    randomize(&mut model, &mut ChaCha8Rng::seed_from_u64(32));
    let config = TrainConfig {
        iterations: steps,
        stage_basis_start,
        stage_sh1_start,
        ..TrainConfig::default()
    };
    let sample = teacher_sample(16, vec![0.2, 0.1, -0.1, 0.3, -0.2, 0.1]);
    let mut trainer = Trainer::new(model, config).unwrap();
    let mut failures = Vec::new();
    for it in 0..steps {
        let before = snapshot(&mut trainer.model);
        trainer.step(&sample).unwrap();
        let after = snapshot(&mut trainer.model);
        let basis_on = it >= stage_basis_start;
        let sh1_on = it >= stage_sh1_start;
        let mut expect = |what: &str, changed: bool, want: bool| {
            if changed != want {
                failures.push(format!("step {it}: {what} changed = {changed}, expected {want}"));
            }
        };
        expect("neutral", non_sh1_columns(&before[0]) != non_sh1_columns(&after[0]), true);
        expect("neutral SH1", sh1_columns(&before[0]) != sh1_columns(&after[0]), sh1_on);
        expect("control neutral", before[2] != after[2], true);
        expect("basis", non_sh1_columns(&before[1]) != non_sh1_columns(&after[1]), basis_on);
        expect("basis SH1", sh1_columns(&before[1]) != sh1_columns(&after[1]), basis_on && sh1_on);
        expect("control basis", before[3] != after[3], basis_on);
        for id in 4..before.len() {
            expect(&format!("mlp tensor {id}"), before[id] != after[id], basis_on);
        }
    }
    failures
}
