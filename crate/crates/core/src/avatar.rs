//! Per-Gaussian state: neutral properties, the learned offset basis and the
//! activations that turn raw parameters into renderable attributes.
//!
//! Every Gaussian carries a 20-wide raw parameter row with the fixed layout
//! `[rotation 0..4 | log-scale 4..7 | opacity logit 7 | sh 8..20]`. The same
//! layout is used for the neutral row and for each of the `B` offset rows,
//! and it is the on-disk layout of the checkpoint.

use std::ops::Range;

use crate::error::{check_len, Error, Result};

pub const RAW_WIDTH: usize = 20;
pub const ROTATION: Range<usize> = 0..4;
pub const LOG_SCALE: Range<usize> = 4..7;
pub const OPACITY: usize = 7;
pub const SH: Range<usize> = 8..20;
/// Degree-0 SH coefficients (one per color channel).
pub const SH_DC: Range<usize> = 8..11;
/// Degree-1 SH coefficients (three bands per color channel).
pub const SH_REST: Range<usize> = 11..20;
pub const SH_COEFFS: usize = 12;

/// Raw log-scales are clamped to this range before `exp`, which keeps
/// activated scales finite and strictly positive for any finite input.
pub const LOG_SCALE_LIMIT: f64 = 40.0;
/// Opacity is kept inside `[eps, 1 - eps]`.
pub const OPACITY_EPS: f64 = 1e-12;
const MIN_QUAT_NORM: f64 = 1e-12;

pub type RawParams = [f64; RAW_WIDTH];

/// Canonical-space Gaussians with their neutral properties and offset basis.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    neutral_position: Vec<[f64; 3]>,
    pub neutral: Vec<RawParams>,
    basis_count: usize,
    /// `B × N` rows, basis-major (`offset_basis[k * N + g]`).
    pub offset_basis: Vec<RawParams>,
}

impl GaussianSet {
    pub fn new(
        neutral_position: Vec<[f64; 3]>,
        neutral: Vec<RawParams>,
        basis_count: usize,
        offset_basis: Vec<RawParams>,
    ) -> Result<Self> {
        let n = neutral_position.len();
        check_len("gaussian neutral rows", n, neutral.len())?;
        check_len("offset basis rows", basis_count * n, offset_basis.len())?;
        Ok(Self {
            neutral_position,
            neutral,
            basis_count,
            offset_basis,
        })
    }

    pub fn count(&self) -> usize {
        self.neutral_position.len()
    }

    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    /// Neutral positions are fixed once sampled; there is no mutable accessor.
    pub fn neutral_position(&self) -> &[[f64; 3]] {
        &self.neutral_position
    }

    pub fn basis_row(&self, k: usize, g: usize) -> &RawParams {
        &self.offset_basis[k * self.count() + g]
    }

    /// `Λ0 + Σ_k w[g][k] · δΛ^k` per Gaussian, in raw parameter space.
    ///
    /// `coefficients` is `N × B`, row-major.
    pub fn blend_offsets(&self, coefficients: &[f64]) -> Result<Vec<RawParams>> {
        let n = self.count();
        let b = self.basis_count;
        check_len("blend coefficients (N x B)", n * b, coefficients.len())?;
        let mut out = self.neutral.clone();
        for (g, row) in out.iter_mut().enumerate() {
            let w = &coefficients[g * b..(g + 1) * b];
            for (k, &wk) in w.iter().enumerate() {
                let basis = &self.offset_basis[k * n + g];
                for (o, d) in row.iter_mut().zip(basis) {
                    *o += wk * d;
                }
            }
        }
        Ok(out)
    }

    /// Reverse of [`blend_offsets`](Self::blend_offsets).
    ///
    /// The neutral gradient equals `grad_raw` itself and is not repeated here.
    pub fn blend_backward(&self, coefficients: &[f64], grad_raw: &[RawParams]) -> Result<BlendGradients> {
        let n = self.count();
        let b = self.basis_count;
        check_len("blend coefficients (N x B)", n * b, coefficients.len())?;
        check_len("blend gradient rows", n, grad_raw.len())?;
        let mut basis = vec![[0.0; RAW_WIDTH]; b * n];
        let mut coeffs = vec![0.0; n * b];
        for g in 0..n {
            let gr = &grad_raw[g];
            for k in 0..b {
                let wk = coefficients[g * b + k];
                let row = &self.offset_basis[k * n + g];
                let dst = &mut basis[k * n + g];
                let mut dot = 0.0;
                for i in 0..RAW_WIDTH {
                    dst[i] = wk * gr[i];
                    dot += row[i] * gr[i];
                }
                coeffs[g * b + k] = dot;
            }
        }
        Ok(BlendGradients { basis, coeffs })
    }
}

#[derive(Debug, Clone)]
pub struct BlendGradients {
    /// `B × N`, same layout as [`GaussianSet::offset_basis`].
    pub basis: Vec<RawParams>,
    /// `N × B`.
    pub coeffs: Vec<f64>,
}

/// Activated Gaussian attributes. Also used as the gradient carrier for the
/// same quantities during backpropagation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosedGaussians {
    pub position: Vec<[f64; 3]>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotation: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub sh: Vec<[f64; SH_COEFFS]>,
}

impl PosedGaussians {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![[0.0; 3]; n],
            rotation: vec![[0.0; 4]; n],
            scale: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            sh: vec![[0.0; SH_COEFFS]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps raw rows to activated attributes. Positions are left zeroed; they
/// come from [`compose_position`] and skinning.
pub fn activate(raw: &[RawParams]) -> Result<PosedGaussians> {
    let n = raw.len();
    let mut out = PosedGaussians::zeros(n);
    for (g, row) in raw.iter().enumerate() {
        let q = &row[ROTATION];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_QUAT_NORM) {
            return Err(Error::Numerical(format!(
                "degenerate rotation quaternion for gaussian {g} (norm {norm:e})"
            )));
        }
        for i in 0..4 {
            out.rotation[g][i] = q[i] / norm;
        }
        for i in 0..3 {
            let s = row[LOG_SCALE.start + i].clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT);
            out.scale[g][i] = s.exp();
        }
        out.opacity[g] = sigmoid(row[OPACITY]).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        out.sh[g].copy_from_slice(&row[SH]);
    }
    Ok(out)
}

/// Chains gradients w.r.t. activated attributes back to raw rows.
/// `grad.position` is ignored.
pub fn activate_backward(raw: &[RawParams], grad: &PosedGaussians) -> Result<Vec<RawParams>> {
    let n = raw.len();
    check_len("activation gradient rows", n, grad.len())?;
    let mut out = vec![[0.0; RAW_WIDTH]; n];
    for (g, row) in raw.iter().enumerate() {
        let dst = &mut out[g];
        let q = &row[ROTATION];
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_QUAT_NORM) {
            return Err(Error::Numerical(format!(
                "degenerate rotation quaternion for gaussian {g} (norm {norm:e})"
            )));
        }
        // d(q/|q|)/dq = (I - q̂ q̂ᵀ) / |q|
        let gq = &grad.rotation[g];
        let qhat = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
        let proj: f64 = (0..4).map(|i| qhat[i] * gq[i]).sum();
        for i in 0..4 {
            dst[ROTATION.start + i] = (gq[i] - qhat[i] * proj) / norm;
        }
        for i in 0..3 {
            let r = row[LOG_SCALE.start + i];
            dst[LOG_SCALE.start + i] = if r.abs() < LOG_SCALE_LIMIT {
                grad.scale[g][i] * r.exp()
            } else {
                0.0
            };
        }
        let s = sigmoid(row[OPACITY]);
        dst[OPACITY] = grad.opacity[g] * s * (1.0 - s);
        dst[SH].copy_from_slice(&grad.sh[g]);
    }
    Ok(out)
}

/// `x = x0 + δx`.
pub fn compose_position(neutral: &[[f64; 3]], delta: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    check_len("position offsets", neutral.len(), delta.len())?;
    Ok(neutral
        .iter()
        .zip(delta)
        .map(|(x, d)| [x[0] + d[0], x[1] + d[1], x[2] + d[2]])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, b: usize, seed: u64) -> GaussianSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = || {
            let mut r = [0.0; RAW_WIDTH];
            for v in r.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            r
        };
        let neutral: Vec<_> = (0..n).map(|_| row()).collect();
        let basis: Vec<_> = (0..n * b).map(|_| row()).collect();
        let pos = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
        GaussianSet::new(pos, neutral, b, basis).unwrap()
    }

    #[test]
    fn zero_coefficients_give_neutral() {
        let set = random_set(7, 4, 1);
        let out = set.blend_offsets(&vec![0.0; 28]).unwrap();
        assert_eq!(out, set.neutral);
    }

    #[test]
    fn one_hot_coefficients_give_single_basis() {
        let set = random_set(5, 3, 2);
        let mut w = vec![0.0; 15];
        for g in 0..5 {
            w[g * 3 + 1] = 1.0;
        }
        let out = set.blend_offsets(&w).unwrap();
        for g in 0..5 {
            for i in 0..RAW_WIDTH {
                assert_eq!(out[g][i], set.neutral[g][i] + set.basis_row(1, g)[i]);
            }
        }
    }

    #[test]
    fn opposite_bases_cancel() {
        let mut set = random_set(3, 2, 3);
        for g in 0..3 {
            let u = *set.basis_row(0, g);
            set.offset_basis[3 + g] = u.map(|v| -v);
        }
        let out = set.blend_offsets(&[0.5; 6]).unwrap();
        for g in 0..3 {
            for i in 0..RAW_WIDTH {
                assert!((out[g][i] - set.neutral[g][i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blend_rejects_wrong_coefficient_count() {
        let set = random_set(3, 2, 4);
        let err = set.blend_offsets(&[0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("N x B"), "{err}");
    }

    #[test]
    fn activation_examples() {
        let mut row = [0.0; RAW_WIDTH];
        row[0] = 1.0;
        let p = activate(&[row]).unwrap();
        assert_eq!(p.rotation[0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.scale[0], [1.0; 3]);
        assert_eq!(p.opacity[0], 0.5);
    }

    #[test]
    fn degenerate_quaternion_is_an_error() {
        let row = [0.0; RAW_WIDTH];
        assert!(matches!(activate(&[row]), Err(Error::Numerical(_))));
    }

    #[test]
    fn compose_position_adds_offsets() {
        let x0 = vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let out = compose_position(&x0, &[[0.01, 0.0, 0.0]; 2]).unwrap();
        assert_eq!(out, vec![[1.01, 2.0, 3.0], [0.01, 0.0, 0.0]]);
        assert_eq!(compose_position(&x0, &[[0.0; 3]; 2]).unwrap(), x0);
        assert!(compose_position(&x0, &[[0.0; 3]; 3]).is_err());
    }

    #[test]
    fn compose_position_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0: Vec<[f64; 3]> = (0..50).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let d: Vec<[f64; 3]> = (0..50).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let out = compose_position(&x0, &d).unwrap();
        for i in 0..50 {
            for a in 0..3 {
                assert_eq!(out[i][a], x0[i][a] + d[i][a]);
            }
        }
    }

    fn loss_of(raw: &[RawParams], weights: &PosedGaussians) -> f64 {
        let p = activate(raw).unwrap();
        let mut l = 0.0;
        for g in 0..raw.len() {
            for i in 0..4 {
                l += weights.rotation[g][i] * p.rotation[g][i];
            }
            for i in 0..3 {
                l += weights.scale[g][i] * p.scale[g][i];
            }
            l += weights.opacity[g] * p.opacity[g];
            for i in 0..SH_COEFFS {
                l += weights.sh[g][i] * p.sh[g][i];
            }
        }
        l
    }

    #[test]
    fn blend_and_activate_gradients_match_finite_differences() {
        let set = random_set(4, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let coeffs: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut upstream = PosedGaussians::zeros(4);
        for g in 0..4 {
            for v in upstream.rotation[g].iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            for v in upstream.scale[g].iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            upstream.opacity[g] = rng.gen_range(-1.0..1.0);
            for v in upstream.sh[g].iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let eval = |set: &GaussianSet, coeffs: &[f64]| loss_of(&set.blend_offsets(coeffs).unwrap(), &upstream);
        let raw = set.blend_offsets(&coeffs).unwrap();
        let graw = activate_backward(&raw, &upstream).unwrap();
        let bg = set.blend_backward(&coeffs, &graw).unwrap();
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for g in 0..4 {
            for i in 0..RAW_WIDTH {
                let mut p = set.clone();
                p.neutral[g][i] += h;
                let mut m = set.clone();
                m.neutral[g][i] -= h;
                let num = (eval(&p, &coeffs) - eval(&m, &coeffs)) / (2.0 * h);
                assert!(rel(graw[g][i], num) < 1e-4, "neutral {g},{i}: {} vs {num}", graw[g][i]);
            }
        }
        for r in 0..12 {
            for i in 0..RAW_WIDTH {
                let mut p = set.clone();
                p.offset_basis[r][i] += h;
                let mut m = set.clone();
                m.offset_basis[r][i] -= h;
                let num = (eval(&p, &coeffs) - eval(&m, &coeffs)) / (2.0 * h);
                assert!(rel(bg.basis[r][i], num) < 1e-4);
            }
        }
        for c in 0..12 {
            let mut p = coeffs.clone();
            p[c] += h;
            let mut m = coeffs.clone();
            m[c] -= h;
            let num = (eval(&set, &p) - eval(&set, &m)) / (2.0 * h);
            assert!(rel(bg.coeffs[c], num) < 1e-4);
        }
    }

    proptest::proptest! {
        #[test]
        fn blend_is_linear_in_coefficients(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            let set = random_set(3, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let w1: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w2: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
            let o1 = set.blend_offsets(&w1).unwrap();
            let o2 = set.blend_offsets(&w2).unwrap();
            let om = set.blend_offsets(&mix).unwrap();
            for g in 0..3 {
                for i in 0..RAW_WIDTH {
                    let n0 = set.neutral[g][i];
                    let lhs = om[g][i] - n0;
                    let rhs = a * (o1[g][i] - n0) + b * (o2[g][i] - n0);
                    let scale = lhs.abs().max(rhs.abs()).max(1.0);
                    proptest::prop_assert!((lhs - rhs).abs() <= 1e-6 * scale);
                }
            }
        }

        #[test]
        fn activation_respects_invariants(vals in proptest::collection::vec(-1e3f64..1e3, RAW_WIDTH)) {
            let mut row = [0.0; RAW_WIDTH];
            row.copy_from_slice(&vals);
            if row[ROTATION].iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6 {
                row[0] = 1.0;
            }
            let p = activate(&[row]).unwrap();
            let n: f64 = p.rotation[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            proptest::prop_assert!((n - 1.0).abs() < 1e-6);
            proptest::prop_assert!(p.scale[0].iter().all(|s| *s > 0.0 && s.is_finite()));
            proptest::prop_assert!(p.opacity[0] > 0.0 && p.opacity[0] < 1.0);
        }
    }
}
