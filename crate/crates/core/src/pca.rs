//! Principal subspace of the training poses, used to project novel poses
//! before inference.

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};

pub const DEFAULT_COMPONENTS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseBasis {
    pub mean: Vec<f64>,
    /// `K × P`, orthonormal rows, strongest first.
    pub components: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
}

impl PoseBasis {
    /// Mean-centered SVD of the `T × P` pose matrix, keeping the top `k`
    /// right singular vectors. `k` is clamped to the numerical rank.
    pub fn fit(poses: &[Vec<f64>], k: usize) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::Input(format!("pose PCA needs at least 2 poses, got {}", poses.len())));
        }
        let p = poses[0].len();
        for pose in poses {
            check_len("training pose", p, pose.len())?;
            if pose.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input("training poses must be finite".into()));
            }
        }
        let t = poses.len();
        let mut mean = vec![0.0; p];
        for pose in poses {
            for (m, v) in mean.iter_mut().zip(pose) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= t as f64;
        }
        let x = DMatrix::from_fn(t, p, |r, c| poses[r][c] - mean[c]);
        let svd = x.svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| Error::Numerical("pose SVD did not converge".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let top = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
        // Relative to the data magnitude as well, so rounding left over from
        // centering identical poses does not count as a direction.
        let magnitude = poses.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())) * ((t * p) as f64).sqrt();
        let tol = top.max(magnitude) * (t.max(p) as f64) * f64::EPSILON * 16.0;
        let rank = order.iter().filter(|&&i| svd.singular_values[i] > tol).count();
        if k > rank {
            log::warn!("requested {k} pose components but the training poses have rank {rank}; using {rank}");
        }
        let keep = k.min(rank);
        let components = order[..keep]
            .iter()
            .map(|&i| v_t.row(i).iter().copied().collect())
            .collect();
        let singular_values = order[..keep].iter().map(|&i| svd.singular_values[i]).collect();
        Ok(Self {
            mean,
            components,
            singular_values,
        })
    }

    pub fn pose_len(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.components.len()
    }

    /// The leading `k` components (clamped to the stored rank).
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.rank());
        Self {
            mean: self.mean.clone(),
            components: self.components[..k].to_vec(),
            singular_values: self.singular_values[..k].to_vec(),
        }
    }

    /// `mean + Cᵀ C (pose − mean)`.
    pub fn project(&self, pose: &[f64]) -> Result<Vec<f64>> {
        check_len("pose vector", self.pose_len(), pose.len())?;
        let centered: Vec<f64> = pose.iter().zip(&self.mean).map(|(p, m)| p - m).collect();
        let mut out = self.mean.clone();
        for c in &self.components {
            let coef: f64 = c.iter().zip(&centered).map(|(a, b)| a * b).sum();
            for (o, v) in out.iter_mut().zip(c) {
                *o += coef * v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn random_poses(t: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn identical_poses_have_rank_zero() {
        let pose = vec![0.1, -0.2, 0.3];
        let b = PoseBasis::fit(&[pose.clone(), pose.clone(), pose.clone()], 2).unwrap();
        assert_eq!(b.rank(), 0);
        let close = |v: &[f64]| v.iter().zip(&pose).all(|(a, b)| (a - b).abs() < 1e-15);
        assert!(close(&b.mean));
        assert!(close(&b.project(&[5.0, 5.0, 5.0]).unwrap()));
    }

    #[test]
    fn plane_poses_reconstruct_exactly() {
        let u = [1.0, 2.0, 0.0, -1.0];
        let v = [0.0, 1.0, 1.0, 1.0];
        let o = [0.5, 0.5, -0.5, 0.0];
        let poses: Vec<Vec<f64>> = [(1.0, 0.0), (0.0, 1.0), (-1.0, -2.0)]
            .iter()
            .map(|&(a, b)| (0..4).map(|i| o[i] + a * u[i] + b * v[i]).collect())
            .collect();
        let basis = PoseBasis::fit(&poses, 2).unwrap();
        assert_eq!(basis.rank(), 2);
        for p in &poses {
            let r = basis.project(p).unwrap();
            assert!(p.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn full_rank_is_identity_on_training_poses() {
        let poses = random_poses(40, 6, 1);
        let basis = PoseBasis::fit(&poses, 6).unwrap();
        for p in &poses {
            let r = basis.project(p).unwrap();
            assert!(p.iter().zip(&r).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }

    #[test]
    fn k_is_clamped_to_rank() {
        let poses = random_poses(3, 10, 2);
        assert_eq!(PoseBasis::fit(&poses, 20).unwrap().rank(), 2);
        assert!(PoseBasis::fit(&poses[..1], 2).is_err());
    }

    #[test]
    fn components_are_orthonormal() {
        let basis = PoseBasis::fit(&random_poses(50, 8, 3), 8).unwrap();
        for (i, a) in basis.components.iter().enumerate() {
            for (j, b) in basis.components.iter().enumerate() {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
        assert!(basis.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn residual_shrinks_as_k_grows() {
        let poses = random_poses(30, 12, 4);
        let held = random_poses(1, 12, 5).remove(0);
        let full = PoseBasis::fit(&poses, 12).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..=12 {
            let r = full.truncated(k).project(&held).unwrap();
            let res = norm(&held.iter().zip(&r).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(res <= last + 1e-12);
            last = res;
        }
    }

    #[test]
    fn mean_projects_to_itself() {
        let basis = PoseBasis::fit(&random_poses(10, 5, 6), 3).unwrap();
        let r = basis.project(&basis.mean).unwrap();
        assert_eq!(r, basis.mean);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_with_orthogonal_residual(seed in 0u64..1000, k in 0usize..8, t in 2usize..30) {
            let poses = random_poses(t, 8, seed);
            let basis = PoseBasis::fit(&poses, k).unwrap();
            let q = random_poses(1, 8, seed + 7).remove(0);
            let p1 = basis.project(&q).unwrap();
            let p2 = basis.project(&p1).unwrap();
            for (a, b) in p1.iter().zip(&p2) {
                prop_assert!((a - b).abs() <= 1e-8);
            }
            let res: Vec<f64> = q.iter().zip(&p1).map(|(a, b)| a - b).collect();
            for c in &basis.components {
                let d: f64 = c.iter().zip(&res).map(|(x, y)| x * y).sum();
                prop_assert!(d.abs() <= 1e-8);
            }
        }
    }
}
