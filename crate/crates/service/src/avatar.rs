//! The loaded avatar and the request types shared by HTTP and the stream.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use splatavatar::checkpoint::Checkpoint;
use splatavatar::model::{AvatarModel, StageTimes};
use splatavatar::raster::Camera;
use splatavatar::synth::{Dataset, SynthSpec};
use splatavatar::workflow;

/// Upper bound on requested image sizes.
pub const MAX_IMAGE_SIDE: usize = 1024;

/// Immutable state shared by every session.
pub struct Avatar {
    pub model: AvatarModel,
    pub name: String,
    pub cameras: Vec<Camera>,
    pub orbit: Orbit,
    pub sequences: Vec<Sequence>,
}

pub struct Sequence {
    pub name: String,
    pub poses: Vec<Vec<f64>>,
}

/// Orbit camera around the avatar, parameterized like the dataset ring.
#[derive(Debug, Clone)]
pub struct Orbit {
    pub target: [f64; 3],
    pub distance: f64,
    pub elevation_deg: f64,
    pub focal_scale: f64,
    pub width: usize,
    pub height: usize,
}

impl Orbit {
    fn from_spec(spec: &SynthSpec) -> Self {
        Self {
            target: [0.0, spec.look_at_height, 0.0],
            distance: spec.ring_radius.hypot(spec.camera_height - spec.look_at_height),
            elevation_deg: (spec.camera_height - spec.look_at_height).atan2(spec.ring_radius).to_degrees(),
            focal_scale: spec.focal_scale,
            width: spec.width,
            height: spec.height,
        }
    }

    pub fn camera(&self, azimuth_deg: f64, elevation_deg: f64, distance: f64, width: usize, height: usize) -> Camera {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let t = self.target;
        let eye = [
            t[0] + distance * el.cos() * az.sin(),
            t[1] + distance * el.sin(),
            t[2] + distance * el.cos() * az.cos(),
        ];
        Camera::look_at(eye, t, [0.0, 1.0, 0.0], self.focal_scale * width as f64, width, height)
    }
}

impl Avatar {
    pub fn load(checkpoint: &Path, dataset: Option<&Path>) -> splatavatar::Result<Self> {
        let model = Checkpoint::load(checkpoint)?.model;
        let name = checkpoint
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        let (cameras, orbit, sequences) = match dataset {
            Some(d) => {
                let ds = Dataset::load(d)?;
                let cameras = ds.cameras.all().cloned().collect();
                let orbit = Orbit::from_spec(&ds.spec);
                let sequences = vec![
                    Sequence {
                        name: "train".into(),
                        poses: ds.poses.clone(),
                    },
                    Sequence {
                        name: "novel".into(),
                        poses: ds.novel_poses.clone(),
                    },
                ];
                (cameras, orbit, sequences)
            }
            None => {
                let spec = SynthSpec::default();
                (vec![spec.camera(0)], Orbit::from_spec(&spec), Vec::new())
            }
        };
        Ok(Self::new(model, name, cameras, orbit, sequences))
    }

    pub fn new(model: AvatarModel, name: String, cameras: Vec<Camera>, orbit: Orbit, sequences: Vec<Sequence>) -> Self {
        Self {
            model,
            name,
            cameras,
            orbit,
            sequences,
        }
    }

    /// Default view when a request names no camera.
    pub fn default_camera(&self) -> Camera {
        self.cameras.first().cloned().unwrap_or_else(|| self.orbit.camera(0.0, self.orbit.elevation_deg, self.orbit.distance, self.orbit.width, self.orbit.height))
    }

    pub fn pca_rank(&self) -> Option<usize> {
        self.model.pose_basis.as_ref().map(|b| b.rank())
    }

    pub fn info(&self) -> Info {
        let m = &self.model;
        Info {
            checkpoint: self.name.clone(),
            variant: m.variant,
            gaussians: m.gaussian_count(),
            anchors: m.anchor_count(),
            controls: m.control_count(),
            basis: m.basis_count(),
            pose_len: m.pose_len(),
            joints: m
                .rig
                .joints
                .iter()
                .enumerate()
                .map(|(index, j)| JointInfo {
                    name: j.name.clone(),
                    index,
                    limit: j.limit,
                })
                .collect(),
            pca_rank: self.pca_rank(),
            views: self
                .cameras
                .iter()
                .enumerate()
                .map(|(index, c)| ViewInfo {
                    index,
                    width: c.width,
                    height: c.height,
                })
                .collect(),
            sequences: self
                .sequences
                .iter()
                .map(|s| SequenceInfo {
                    name: s.name.clone(),
                    frames: s.poses.len(),
                })
                .collect(),
            stream: StreamInfo {
                encoding: "jpeg",
                quality: crate::stream::JPEG_QUALITY,
                header_bytes: crate::stream::HEADER_BYTES,
            },
        }
    }

    /// One render through the same path as the command line: stage times
    /// and the PNG bytes.
    pub fn render(&self, r: &Resolved) -> splatavatar::Result<(StageTimes, Vec<u8>)> {
        let state = workflow::render_pose(&self.model, &r.pose, &r.camera, r.pca)?;
        let png = workflow::encode_png(&state)?;
        Ok((state.times, png))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Info {
    pub checkpoint: String,
    pub variant: splatavatar::model::Variant,
    pub gaussians: usize,
    pub anchors: usize,
    pub controls: usize,
    pub basis: usize,
    pub pose_len: usize,
    pub joints: Vec<JointInfo>,
    pub pca_rank: Option<usize>,
    pub views: Vec<ViewInfo>,
    pub sequences: Vec<SequenceInfo>,
    pub stream: StreamInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointInfo {
    pub name: String,
    pub index: usize,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewInfo {
    pub index: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceInfo {
    pub name: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamInfo {
    pub encoding: &'static str,
    pub quality: u8,
    pub header_bytes: usize,
}

/// A pose value: a JSON number, or one of the strings `"NaN"`,
/// `"Infinity"`, `"-Infinity"` (which are rejected as non-finite).
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Number {
    Value(f64),
    Text(String),
}

impl Number {
    fn value(&self) -> Result<f64, RequestError> {
        match self {
            Number::Value(v) => Ok(*v),
            Number::Text(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "Infinity" => Ok(f64::INFINITY),
                "-Infinity" => Ok(f64::NEG_INFINITY),
                other => Err(RequestError::Malformed(format!("`{other}` is not a number"))),
            },
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRequest {
    pub view: Option<usize>,
    pub azimuth_deg: Option<f64>,
    pub elevation_deg: Option<f64>,
    pub distance: Option<f64>,
    pub width: Option<usize>,
    pub height: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaRequest {
    pub enabled: bool,
    /// Components to keep; all when omitted.
    pub k: Option<usize>,
}

/// Body of `POST /api/render`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    #[serde(default)]
    pub pose: BTreeMap<String, [Number; 3]>,
    pub camera: Option<CameraRequest>,
    pub pca: Option<PcaRequest>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RequestError {
    /// Syntactically or structurally invalid (HTTP 400).
    Malformed(String),
    /// Well-formed but contains NaN or infinity (HTTP 422).
    NonFinite(String),
}

impl std::fmt::Display for RequestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RequestError::Malformed(m) | RequestError::NonFinite(m) => f.write_str(m),
        }
    }
}

/// Fully resolved render input.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub pose: Vec<f64>,
    pub camera: Camera,
    pub pca: Option<usize>,
}

impl Avatar {
    /// Applies joint overrides on top of `pose`.
    pub fn apply_pose(&self, pose: &mut [f64], overrides: &BTreeMap<String, [Number; 3]>) -> Result<(), RequestError> {
        for (name, v) in overrides {
            let j = self
                .model
                .rig
                .joint_index(name)
                .ok_or_else(|| RequestError::Malformed(format!("unknown joint `{name}`")))?;
            for (a, n) in v.iter().enumerate() {
                let x = n.value()?;
                if !x.is_finite() {
                    return Err(RequestError::NonFinite(format!("joint `{name}` has a non-finite value")));
                }
                pose[3 * j + a] = x;
            }
        }
        Ok(())
    }

    pub fn resolve_camera(&self, req: &CameraRequest) -> Result<Camera, RequestError> {
        let orbit = [req.azimuth_deg, req.elevation_deg, req.distance];
        if let Some(v) = req.view {
            if orbit.iter().any(|o| o.is_some()) || req.width.is_some() || req.height.is_some() {
                return Err(RequestError::Malformed("camera takes either `view` or orbit parameters".into()));
            }
            return self
                .cameras
                .get(v)
                .cloned()
                .ok_or_else(|| RequestError::Malformed(format!("view {v} does not exist")));
        }
        let o = &self.orbit;
        let az = req.azimuth_deg.unwrap_or(0.0);
        let el = req.elevation_deg.unwrap_or(o.elevation_deg);
        let dist = req.distance.unwrap_or(o.distance);
        let (w, h) = (req.width.unwrap_or(o.width), req.height.unwrap_or(o.height));
        if !(el.abs() < 89.0) || !(dist > 0.05) || !az.is_finite() {
            return Err(RequestError::Malformed("orbit camera needs |elevation| < 89° and distance > 0.05".into()));
        }
        if w == 0 || h == 0 || w > MAX_IMAGE_SIDE || h > MAX_IMAGE_SIDE {
            return Err(RequestError::Malformed(format!("image size must lie in 1..={MAX_IMAGE_SIDE}")));
        }
        Ok(o.camera(az, el, dist, w, h))
    }

    pub fn resolve_pca(&self, req: &PcaRequest) -> Result<Option<usize>, RequestError> {
        if !req.enabled {
            return Ok(None);
        }
        let rank = self
            .pca_rank()
            .ok_or_else(|| RequestError::Malformed("checkpoint has no pose basis".into()))?;
        match req.k {
            None => Ok(Some(rank)),
            Some(k) if k <= rank => Ok(Some(k)),
            Some(k) => Err(RequestError::Malformed(format!("k = {k} exceeds the pose basis rank {rank}"))),
        }
    }

    /// Resolves a render request against the neutral pose and default camera.
    pub fn resolve(&self, req: &RenderRequest) -> Result<Resolved, RequestError> {
        let mut pose = vec![0.0; self.model.pose_len()];
        self.apply_pose(&mut pose, &req.pose)?;
        let camera = match &req.camera {
            Some(c) => self.resolve_camera(c)?,
            None => self.default_camera(),
        };
        let pca = match &req.pca {
            Some(p) => self.resolve_pca(p)?,
            None => None,
        };
        Ok(Resolved { pose, camera, pca })
    }
}

/// Parses a JSON body into `T`, mapping failures to [`RequestError::Malformed`].
pub fn parse_json<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, RequestError> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return serde_json::from_str("{}").map_err(|e| RequestError::Malformed(e.to_string()));
    }
    serde_json::from_slice(bytes).map_err(|e| RequestError::Malformed(e.to_string()))
}
