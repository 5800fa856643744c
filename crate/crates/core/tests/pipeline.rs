//! End-to-end checks of the model: neutral start, full-pipeline gradients,
//! parameter staging and short optimization runs.

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatavatar::model::{AvatarModel, ModelConfig, Variant};
use splatavatar::raster::{render, Camera};
use splatavatar::skinning::Rig;
use splatavatar::train::{FrameSample, TrainConfig, Trainer};

#[test]
fn untrained_model_renders_its_neutral_gaussians_bitwise() {
    let config = ModelConfig {
        gaussians: 400,
        anchors: 6,
        controls: 30,
        basis: 4,
        hidden: vec![8, 8],
        ..ModelConfig::default()
    };
    let model = AvatarModel::initialize(Rig::synthetic_default(), &config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let cam = Camera::look_at([0.0, 1.1, 3.0], [0.0, 0.95, 0.0], [0.0, 1.0, 0.0], 45.0, 32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..3 {
        let pose: Vec<f64> = (0..model.pose_len()).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let full = model.forward(&pose, &cam, [0.0; 3]).unwrap().frame;
        let (_, neutral) = render(&model.neutral_gaussians(&pose).unwrap(), &cam, [0.0; 3]).unwrap();
        assert!(full.color.iter().zip(&neutral.color).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    for variant in [Variant::Basis, Variant::DirectOffsets] {
        let r = gradient_check(variant, Some(24));
        assert!(r.failures.is_empty(), "{} of {} mismatches:\n{}", r.failures.len(), r.checked, r.failures.join("\n"));
        assert!(r.nonzero > r.checked / 3, "only {} of {} gradients are non-zero", r.nonzero, r.checked);
    }
}

#[test]
fn parameter_groups_follow_the_stage_schedule() {
    let failures = staging_audit(4, 8, 12);
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn zero_gradient_step_leaves_parameters_unchanged() {
    // A target equal to the current render, with regularizers disabled and
    // the control offsets all equal, gives an exactly zero gradient.
    let model = tiny_model(Variant::Basis, 41);
    let cam = camera(16);
    let pose = vec![0.1; 6];
    let image = model.forward(&pose, &cam, [0.0; 3]).unwrap().frame.color;
    let config = TrainConfig {
        iterations: 10,
        stage_basis_start: 0,
        stage_sh1_start: 0,
        lambda_ctrl: 0.0,
        lambda_scale: 0.0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config).unwrap();
    let before = snapshot(&mut trainer.model);
    trainer
        .step(&FrameSample {
            frame: 0,
            view: 0,
            pose,
            camera: cam,
            mask: vec![true; 256],
            image,
        })
        .unwrap();
    assert_eq!(before, snapshot(&mut trainer.model));
}

#[test]
fn hundred_steps_on_one_frame_halve_the_loss() {
    let model = tiny_model(Variant::Basis, 51);
    let sample = teacher_sample(24, vec![0.25, -0.1, 0.05, 0.3, 0.2, -0.15]);
    // Elevated rates: the check is that the full pipeline descends, not a
    // schedule study.
    let config = TrainConfig {
        iterations: 100,
        lr_neutral: 2e-2,
        lr_control_neutral: 2e-3,
        lr_mlp: 5e-3,
        stage_basis_start: 20,
        stage_sh1_start: 50,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config).unwrap();
    let source = Fixed(vec![sample]);
    let mut losses = Vec::new();
    trainer
        .run(&source, 100, |_, m| {
            losses.push(m.loss);
            Ok(())
        })
        .unwrap();
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last.total <= 0.5 * first.total, "loss {} -> {}", first.total, last.total);
    // The photometric term improves too, not only the regularizers.
    assert!(last.l1 < 0.8 * first.l1, "l1 {} -> {}", first.l1, last.l1);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let config = TrainConfig {
        iterations: 16,
        stage_basis_start: 4,
        stage_sh1_start: 10,
        ..TrainConfig::default()
    };
    let samples = Fixed(vec![
        teacher_sample(16, vec![0.2, 0.0, 0.1, 0.0, 0.3, 0.0]),
        teacher_sample(16, vec![-0.2, 0.1, 0.0, 0.2, 0.0, -0.1]),
        teacher_sample(16, vec![0.0, 0.3, -0.2, 0.1, 0.1, 0.1]),
    ]);
    let mut straight = Trainer::new(tiny_model(Variant::Basis, 61), config.clone()).unwrap();
    straight.run(&samples, 16, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(tiny_model(Variant::Basis, 61), config.clone()).unwrap();
    first.run(&samples, 7, |_, _| Ok(())).unwrap();
    let ck = splatavatar::checkpoint::Checkpoint {
        model: first.model.clone(),
        training: Some(splatavatar::checkpoint::TrainingState {
            optimizer: first.optimizer.clone(),
            iteration: first.iteration,
            config: first.config.clone(),
        }),
    };
    let back = splatavatar::checkpoint::Checkpoint::from_bytes(&ck.to_bytes(), std::path::Path::new("mem")).unwrap();
    let t = back.training.unwrap();
    let mut resumed = Trainer::resume(back.model, t.optimizer, t.iteration, t.config).unwrap();
    resumed.run(&samples, 16, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.iteration, 16);
    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.optimizer, straight.optimizer);
}
