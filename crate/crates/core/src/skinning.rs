//! Skeleton, forward kinematics and linear blend skinning.
//!
//! The rig doubles as the template body: every joint owns one or more
//! capsules, and surface samples on the union of capsules stand in for the
//! template mesh. Skinning weights come from a capsule-distance falloff.

use nalgebra::{Isometry3, Matrix3, Quaternion, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Axis-angle magnitudes below this use the first-order rotation.
pub const SMALL_ANGLE: f64 = 1e-8;
pub const MAX_INFLUENCES: usize = 4;
/// Blended linear parts with determinant at or below this count as degenerate.
pub const DEGENERATE_DET: f64 = 1e-12;
const WEIGHT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// `None` marks the root.
    pub parent: Option<usize>,
    /// Rest-pose translation relative to the parent joint (world frame for the root).
    pub offset: [f64; 3],
    /// Symmetric axis-angle limit (radians) advertised to interactive clients.
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub joint: usize,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub joints: Vec<Joint>,
    pub capsules: Vec<Capsule>,
    /// Falloff length (scene units) of the capsule-distance skinning weights.
    pub skin_falloff: f64,
}

/// Axis-angle pose vector, three values per joint in joint order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose(pub Vec<f64>);

impl Pose {
    pub fn zeros(len: usize) -> Self {
        Pose(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub position: [f64; 3],
    pub normal: [f64; 3],
    pub capsule: usize,
}

impl Rig {
    /// Pelvis-rooted 8-joint upper body with rigid legs, arms spread in a T-pose.
    pub fn synthetic_default() -> Self {
        let j = |name: &str, parent: Option<usize>, offset: [f64; 3], limit: f64| Joint {
            name: name.to_string(),
            parent,
            offset,
            limit,
        };
        let joints = vec![
            j("pelvis", None, [0.0, 1.0, 0.0], 0.4),
            j("spine", Some(0), [0.0, 0.12, 0.0], 0.5),
            j("chest", Some(1), [0.0, 0.22, 0.0], 0.4),
            j("head", Some(2), [0.0, 0.22, 0.0], 0.7),
            j("left_upper_arm", Some(2), [0.2, 0.12, 0.0], 1.2),
            j("left_forearm", Some(4), [0.28, 0.0, 0.0], 1.4),
            j("right_upper_arm", Some(2), [-0.2, 0.12, 0.0], 1.2),
            j("right_forearm", Some(6), [-0.28, 0.0, 0.0], 1.4),
        ];
        let c = |joint: usize, start: [f64; 3], end: [f64; 3], radius: f64| Capsule {
            joint,
            start,
            end,
            radius,
        };
        let capsules = vec![
            c(0, [-0.08, 1.0, 0.0], [0.08, 1.0, 0.0], 0.13),
            c(0, [0.09, 0.92, 0.0], [0.09, 0.12, 0.0], 0.07),
            c(0, [-0.09, 0.92, 0.0], [-0.09, 0.12, 0.0], 0.07),
            c(1, [0.0, 1.1, 0.0], [0.0, 1.3, 0.0], 0.13),
            c(2, [-0.12, 1.42, 0.0], [0.12, 1.42, 0.0], 0.12),
            c(3, [0.0, 1.6, 0.0], [0.0, 1.7, 0.0], 0.1),
            c(4, [0.2, 1.46, 0.0], [0.48, 1.46, 0.0], 0.05),
            c(5, [0.48, 1.46, 0.0], [0.74, 1.46, 0.0], 0.042),
            c(6, [-0.2, 1.46, 0.0], [-0.48, 1.46, 0.0], 0.05),
            c(7, [-0.48, 1.46, 0.0], [-0.74, 1.46, 0.0], 0.042),
        ];
        Rig {
            joints,
            capsules,
            skin_falloff: 0.04,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// `P = 3 · J`; the synthetic rig has no finger joints to exclude.
    pub fn pose_len(&self) -> usize {
        3 * self.joints.len()
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.clone()).collect()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::Data("rig has no joints".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            match j.parent {
                None if i != 0 => return Err(Error::Data(format!("joint {i} ({}) is a second root", j.name))),
                Some(_) if i == 0 => return Err(Error::Data("joint 0 must be the root".into())),
                // Parents precede children, which rules out cycles.
                Some(p) if p >= i => {
                    return Err(Error::Data(format!("joint {i} ({}) has parent {p} that does not precede it", j.name)))
                }
                _ => {}
            }
        }
        for (i, c) in self.capsules.iter().enumerate() {
            if c.joint >= self.joints.len() || !(c.radius > 0.0) {
                return Err(Error::Data(format!("capsule {i} is invalid")));
            }
        }
        if !(self.skin_falloff > 0.0) {
            return Err(Error::Data("skin falloff must be positive".into()));
        }
        Ok(())
    }

    /// World rest transforms (translations only for this rig family).
    pub fn rest_transforms(&self) -> Vec<Isometry3<f64>> {
        let mut out: Vec<Isometry3<f64>> = Vec::with_capacity(self.joints.len());
        for j in &self.joints {
            let local = Isometry3::from_parts(Translation3::from(Vector3::from(j.offset)), UnitQuaternion::identity());
            let g = match j.parent {
                Some(p) => out[p] * local,
                None => local,
            };
            out.push(g);
        }
        out
    }

    /// Forward kinematics: `G_j = G_parent · rest_j · R(θ_j)`, with an extra
    /// world translation applied at the root.
    pub fn joint_transforms(&self, pose: &[f64], root_translation: [f64; 3]) -> Result<Vec<Isometry3<f64>>> {
        check_len("pose vector", self.pose_len(), pose.len())?;
        let mut out: Vec<Isometry3<f64>> = Vec::with_capacity(self.joints.len());
        for (i, j) in self.joints.iter().enumerate() {
            let rot = axis_angle(&pose[3 * i..3 * i + 3]);
            let local = Isometry3::from_parts(Translation3::from(Vector3::from(j.offset)), rot);
            let g = match j.parent {
                Some(p) => out[p] * local,
                None => Isometry3::from_parts(Translation3::from(Vector3::from(root_translation)), UnitQuaternion::identity()) * local,
            };
            out.push(g);
        }
        Ok(out)
    }

    /// `A_j = G_j · G_rest_j⁻¹` for every joint.
    pub fn skinning_transforms(&self, pose: &[f64], root_translation: [f64; 3]) -> Result<Vec<Isometry3<f64>>> {
        let rest = self.rest_transforms();
        Ok(self
            .joint_transforms(pose, root_translation)?
            .into_iter()
            .zip(rest)
            .map(|(g, r)| g * r.inverse())
            .collect())
    }

    /// Capsule-distance falloff weights, top four joints renormalized.
    pub fn skin_weights_at(&self, p: &[f64; 3]) -> ([u16; MAX_INFLUENCES], [f64; MAX_INFLUENCES]) {
        let mut per_joint = vec![0.0f64; self.joints.len()];
        for c in &self.capsules {
            let d = (segment_distance(p, &c.start, &c.end) - c.radius).max(0.0) / self.skin_falloff;
            let w = (-d * d).exp();
            per_joint[c.joint] = per_joint[c.joint].max(w);
        }
        let mut order: Vec<usize> = (0..per_joint.len()).collect();
        order.sort_by(|&a, &b| per_joint[b].total_cmp(&per_joint[a]).then(a.cmp(&b)));
        let mut joints = [0u16; MAX_INFLUENCES];
        let mut weights = [0.0; MAX_INFLUENCES];
        for (slot, &j) in order.iter().take(MAX_INFLUENCES).enumerate() {
            joints[slot] = j as u16;
            weights[slot] = if per_joint[j] > 1e-4 { per_joint[j] } else { 0.0 };
        }
        let sum: f64 = weights.iter().sum();
        if sum > 0.0 {
            for w in weights.iter_mut() {
                *w /= sum;
            }
        } else {
            weights[0] = 1.0;
        }
        (joints, weights)
    }

    pub fn skin_weights(&self, points: &[[f64; 3]]) -> SkinWeights {
        let (joints, weights) = points.iter().map(|p| self.skin_weights_at(p)).unzip();
        SkinWeights { joints, weights }
    }

    /// Area-uniform samples on the union of capsule surfaces.
    pub fn sample_surface<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<SurfacePoint> {
        let areas: Vec<f64> = self
            .capsules
            .iter()
            .map(|c| {
                let len = segment_length(&c.start, &c.end);
                2.0 * std::f64::consts::PI * c.radius * len + 4.0 * std::f64::consts::PI * c.radius * c.radius
            })
            .collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut pick = rng.gen::<f64>() * total;
            let mut ci = 0;
            while ci + 1 < areas.len() && pick >= areas[ci] {
                pick -= areas[ci];
                ci += 1;
            }
            let (position, normal) = sample_capsule(&self.capsules[ci], rng);
            let buried = self.capsules.iter().enumerate().any(|(k, o)| {
                k != ci && segment_distance(&position, &o.start, &o.end) < o.radius - 1e-6
            });
            if !buried {
                out.push(SurfacePoint {
                    position,
                    normal,
                    capsule: ci,
                });
            }
        }
        out
    }

    pub fn surface_area_estimate(&self) -> f64 {
        self.capsules
            .iter()
            .map(|c| {
                let len = segment_length(&c.start, &c.end);
                2.0 * std::f64::consts::PI * c.radius * len + 4.0 * std::f64::consts::PI * c.radius * c.radius
            })
            .sum::<f64>()
            * 0.8
    }
}

fn segment_length(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (Vector3::from(*b) - Vector3::from(*a)).norm()
}

pub(crate) fn segment_distance(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let p = Vector3::from(*p);
    let a = Vector3::from(*a);
    let ab = Vector3::from(*b) - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm()
}

fn sample_capsule<R: Rng>(c: &Capsule, rng: &mut R) -> ([f64; 3], [f64; 3]) {
    let a = Vector3::from(c.start);
    let b = Vector3::from(c.end);
    let axis = b - a;
    let len = axis.norm();
    let dir = if len > 0.0 { axis / len } else { Vector3::y() };
    let helper = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = dir.cross(&helper).normalize();
    let v = dir.cross(&u);
    let side = 2.0 * std::f64::consts::PI * c.radius * len;
    let caps = 4.0 * std::f64::consts::PI * c.radius * c.radius;
    if rng.gen::<f64>() * (side + caps) < side {
        let phi = rng.gen::<f64>() * std::f64::consts::TAU;
        let t = rng.gen::<f64>();
        let n = u * phi.cos() + v * phi.sin();
        let p = a + axis * t + n * c.radius;
        (p.into(), n.into())
    } else {
        // Uniform direction; hemisphere chooses the end cap.
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi = rng.gen::<f64>() * std::f64::consts::TAU;
        let r = (1.0 - z * z).sqrt();
        let n = u * (r * phi.cos()) + v * (r * phi.sin()) + dir * z;
        let center = if z >= 0.0 { b } else { a };
        let p = center + n * c.radius;
        (p.into(), n.into())
    }
}

/// Rotation for an axis-angle vector; exact zero is the identity.
pub fn axis_angle(v: &[f64]) -> UnitQuaternion<f64> {
    let w = Vector3::new(v[0], v[1], v[2]);
    let angle = w.norm();
    if angle < SMALL_ANGLE {
        UnitQuaternion::from_quaternion(Quaternion::new(1.0, 0.5 * w.x, 0.5 * w.y, 0.5 * w.z))
    } else {
        let half = 0.5 * angle;
        let s = half.sin() / angle;
        UnitQuaternion::new_unchecked(Quaternion::new(half.cos(), s * w.x, s * w.y, s * w.z))
    }
}

/// Up to four joint influences per point, rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinWeights {
    pub joints: Vec<[u16; MAX_INFLUENCES]>,
    pub weights: Vec<[f64; MAX_INFLUENCES]>,
}

impl SkinWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self, joint_count: usize) -> Result<()> {
        check_len("skin weight joint rows", self.weights.len(), self.joints.len())?;
        for (i, (w, j)) in self.weights.iter().zip(&self.joints).enumerate() {
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_TOLERANCE || w.iter().any(|v| *v < 0.0) {
                return Err(Error::Data(format!("skin weights of point {i} sum to {sum}")));
            }
            if j.iter().any(|&j| j as usize >= joint_count) {
                return Err(Error::Data(format!("skin weights of point {i} reference a missing joint")));
            }
        }
        Ok(())
    }
}

/// The blended affine map of one point for one pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendedFrame {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Nearest rotation to `linear`, used to carry Gaussian orientation.
    pub rotation: UnitQuaternion<f64>,
}

#[derive(Debug, Clone)]
pub struct BlendedFrames {
    pub frames: Vec<BlendedFrame>,
    /// Points whose blended linear part had `det ≤ 0` and fell back to the
    /// dominant joint's rotation.
    pub rotation_fallbacks: usize,
}

/// Blends per-joint transforms with the skin weights of each point.
pub fn blend_frames(weights: &SkinWeights, transforms: &[Isometry3<f64>]) -> Result<BlendedFrames> {
    weights.validate(transforms.len())?;
    let mats: Vec<(Matrix3<f64>, Vector3<f64>)> = transforms
        .iter()
        .map(|t| (t.rotation.to_rotation_matrix().into_inner(), t.translation.vector))
        .collect();
    let mut fallbacks = 0;
    let frames = weights
        .weights
        .iter()
        .zip(&weights.joints)
        .map(|(w, j)| {
            let mut linear = Matrix3::zeros();
            let mut translation = Vector3::zeros();
            let mut dominant = 0;
            for s in 0..MAX_INFLUENCES {
                if w[s] == 0.0 {
                    continue;
                }
                let (r, t) = &mats[j[s] as usize];
                linear += r * w[s];
                translation += t * w[s];
                if w[s] > w[dominant] {
                    dominant = s;
                }
            }
            let single = w.iter().filter(|v| **v != 0.0).count() == 1;
            let rotation = if single {
                transforms[j[dominant] as usize].rotation
            } else {
                match nearest_rotation(&linear) {
                    Some(r) => r,
                    None => {
                        fallbacks += 1;
                        transforms[j[dominant] as usize].rotation
                    }
                }
            };
            BlendedFrame {
                linear,
                translation,
                rotation,
            }
        })
        .collect();
    Ok(BlendedFrames {
        frames,
        rotation_fallbacks: fallbacks,
    })
}

/// Orthogonal polar factor of `m`, or `None` when `m` is singular or
/// orientation-reversing.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Option<UnitQuaternion<f64>> {
    if !(m.determinant() > DEGENERATE_DET) {
        return None;
    }
    let svd = m.svd(true, true);
    let r = svd.u? * svd.v_t?;
    Some(UnitQuaternion::from_matrix(&r))
}

/// `x_world = Σ_j w_j · A_j · x`.
pub fn lbs_points(frames: &BlendedFrames, points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    check_len("skinned points", frames.frames.len(), points.len())?;
    Ok(frames
        .frames
        .iter()
        .zip(points)
        .map(|(f, p)| (f.linear * Vector3::from(*p) + f.translation).into())
        .collect())
}

/// Gradient w.r.t. canonical points: the blended linear part, transposed.
pub fn lbs_points_backward(frames: &BlendedFrames, grad: &[[f64; 3]]) -> Vec<[f64; 3]> {
    frames
        .frames
        .iter()
        .zip(grad)
        .map(|(f, g)| (f.linear.transpose() * Vector3::from(*g)).into())
        .collect()
}

/// Composes each canonical quaternion `(w, x, y, z)` with its blended rotation.
pub fn lbs_rotations(frames: &BlendedFrames, rotations: &[[f64; 4]]) -> Result<Vec<[f64; 4]>> {
    check_len("skinned rotations", frames.frames.len(), rotations.len())?;
    Ok(frames
        .frames
        .iter()
        .zip(rotations)
        .map(|(f, q)| quat_mul(&quat_array(&f.rotation), q))
        .collect())
}

pub fn lbs_rotations_backward(frames: &BlendedFrames, grad: &[[f64; 4]]) -> Vec<[f64; 4]> {
    frames
        .frames
        .iter()
        .zip(grad)
        .map(|(f, g)| {
            let p = quat_array(&f.rotation);
            let m = left_mul_matrix(&p);
            let mut out = [0.0; 4];
            for i in 0..4 {
                for r in 0..4 {
                    out[i] += m[r][i] * g[r];
                }
            }
            out
        })
        .collect()
}

pub fn quat_array(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Hamilton product of `(w, x, y, z)` quaternions.
pub fn quat_mul(p: &[f64; 4], q: &[f64; 4]) -> [f64; 4] {
    let m = left_mul_matrix(p);
    let mut out = [0.0; 4];
    for r in 0..4 {
        out[r] = (0..4).map(|c| m[r][c] * q[c]).sum();
    }
    out
}

fn left_mul_matrix(p: &[f64; 4]) -> [[f64; 4]; 4] {
    let [w, x, y, z] = *p;
    [[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]]
}
