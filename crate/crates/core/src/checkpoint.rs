//! Little-endian binary checkpoints. Every `f64` is stored bit-exactly, so a
//! save/load round trip reproduces renders exactly.
//!
//! Layout: `"SPLF"`, version, variant tag, the model dimensions
//! `N B F C P J`, the MLP layer widths, then the model arrays, the
//! interpolation tables, the optional pose basis and the optional optimizer
//! state. The rig and training configuration are embedded as JSON.

use std::path::Path;

use crate::avatar::{GaussianSet, RawParams, RAW_WIDTH};
use crate::error::{Error, Result};
use crate::field::{AnchorField, StackedLayer};
use crate::image_io::write_atomic;
use crate::interp::{ControlLattice, InterpTable, NEIGHBORS};
use crate::model::{AvatarModel, Variant};
use crate::pca::PoseBasis;
use crate::skinning::{Rig, SkinWeights, MAX_INFLUENCES};
use crate::train::{AdamGroup, Moments, OptimizerState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"SPLF";
pub const VERSION: u32 = 1;

/// Optimizer state saved alongside the model so training can resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub optimizer: OptimizerState,
    pub iteration: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AvatarModel,
    pub training: Option<TrainingState>,
}

/// Fixed-size header, readable without parsing the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub variant: Variant,
    pub gaussians: usize,
    pub basis: usize,
    pub anchors: usize,
    pub controls: usize,
    pub pose_len: usize,
    pub joints: usize,
    pub layer_widths: Vec<usize>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.len(v.len());
        self.0.extend_from_slice(v);
    }
    fn vec3s(&mut self, v: &[[f64; 3]]) {
        self.f64s(&v.iter().flatten().copied().collect::<Vec<_>>());
    }
    fn raws(&mut self, v: &[RawParams]) {
        self.f64s(&v.iter().flatten().copied().collect::<Vec<_>>());
    }
    fn table(&mut self, t: &InterpTable) {
        self.len(t.source_count());
        self.len(t.query_count());
        for row in &t.indices {
            for &i in row {
                self.u32(i);
            }
        }
        self.f64s(&t.weights.iter().flatten().copied().collect::<Vec<_>>());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Data("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        // Anything larger cannot fit in the remaining bytes anyway.
        if v > self.buf.len() as u64 {
            return Err(Error::Data(format!("checkpoint length field {v} is implausible")));
        }
        Ok(v as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("checkpoint length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
    fn f64s_exact(&mut self, what: &str, expected: usize) -> Result<Vec<f64>> {
        let v = self.f64s()?;
        if v.len() != expected {
            return Err(Error::Data(format!("checkpoint {what}: expected {expected} values, found {}", v.len())));
        }
        Ok(v)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn vec3s(&mut self, what: &str, count: usize) -> Result<Vec<[f64; 3]>> {
        let v = self.f64s_exact(what, count * 3)?;
        Ok(v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
    fn raws(&mut self, what: &str, count: usize) -> Result<Vec<RawParams>> {
        let v = self.f64s_exact(what, count * RAW_WIDTH)?;
        Ok(v.chunks_exact(RAW_WIDTH).map(|c| c.try_into().unwrap()).collect())
    }
    fn table(&mut self, what: &str, sources: usize, queries: usize) -> Result<InterpTable> {
        let s = self.len()?;
        let q = self.len()?;
        if (s, q) != (sources, queries) {
            return Err(Error::Data(format!("checkpoint {what} has shape {s}x{q}, expected {sources}x{queries}")));
        }
        let mut indices = Vec::with_capacity(q);
        for _ in 0..q {
            let mut row = [0u32; NEIGHBORS];
            for i in row.iter_mut() {
                *i = self.u32()?;
            }
            indices.push(row);
        }
        let w = self.f64s_exact(what, q * NEIGHBORS)?;
        let weights = w.chunks_exact(NEIGHBORS).map(|c| c.try_into().unwrap()).collect();
        InterpTable::from_parts(s, indices, weights)
    }
}

fn json_blob<T: serde::Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("serializing plain data to JSON cannot fail")
}

fn parse_json<T: for<'de> serde::Deserialize<'de>>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

impl Checkpoint {
    pub fn header(&self) -> Header {
        let m = &self.model;
        Header {
            version: VERSION,
            variant: m.variant,
            gaussians: m.gaussian_count(),
            basis: m.basis_count(),
            anchors: m.anchor_count(),
            controls: m.control_count(),
            pose_len: m.pose_len(),
            joints: m.rig.joint_count(),
            layer_widths: m.field.layer_widths(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let h = self.header();
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(h.version);
        w.u32(h.variant.tag());
        for v in [h.gaussians, h.basis, h.anchors, h.controls, h.pose_len, h.joints] {
            w.len(v);
        }
        w.len(h.layer_widths.len());
        for &v in &h.layer_widths {
            w.len(v);
        }

        w.bytes(&json_blob(&m.rig));
        let g = &m.gaussians;
        w.len(g.basis_count());
        w.vec3s(g.neutral_position());
        w.raws(&g.neutral);
        w.raws(&g.offset_basis);
        for row in &m.skin.joints {
            for &j in row {
                w.u32(j as u32);
            }
        }
        w.f64s(&m.skin.weights.iter().flatten().copied().collect::<Vec<_>>());

        w.vec3s(m.field.anchor_position());
        w.len(m.field.property_width());
        w.len(m.field.control_width());
        for layer in &m.field.layers {
            w.f64s(&layer.weight);
            w.f64s(&layer.bias);
        }

        let l = &m.lattice;
        w.vec3s(l.control_position());
        w.vec3s(&l.neutral_offset);
        w.vec3s(&l.offset_basis);
        for list in l.neighbors() {
            w.len(list.len());
            for &j in list {
                w.len(j);
            }
        }

        w.table(&m.gaussian_anchor_table);
        w.table(&m.control_anchor_table);
        w.table(&m.gaussian_control_table);

        match &m.pose_basis {
            None => w.u8(0),
            Some(pca) => {
                w.u8(1);
                w.len(pca.components.len());
                w.f64s(&pca.mean);
                for c in &pca.components {
                    w.f64s(c);
                }
                w.f64s(&pca.singular_values);
            }
        }

        match &self.training {
            None => w.u8(0),
            Some(t) => {
                w.u8(1);
                w.u64(t.iteration);
                w.bytes(&json_blob(&t.config));
                w.len(t.optimizer.groups.len());
                for group in &t.optimizer.groups {
                    w.u64(group.step);
                    w.len(group.tensors.len());
                    for mo in &group.tensors {
                        w.f64s(&mo.m);
                        w.f64s(&mo.v);
                    }
                }
            }
        }
        w.0
    }

    /// Parses a checkpoint. `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let h = read_header(&mut r)?;
        let (n, b, f, c, p) = (h.gaussians, h.basis, h.anchors, h.controls, h.pose_len);

        let rig: Rig = parse_json(path, r.bytes()?)?;
        rig.validate()?;
        if rig.joint_count() != h.joints || rig.pose_len() != p {
            return Err(Error::Data("checkpoint rig does not match the header".into()));
        }
        let gb = r.len()?;
        let neutral_position = r.vec3s("gaussian positions", n)?;
        let neutral = r.raws("gaussian neutral properties", n)?;
        let offset_basis = r.raws("gaussian offset basis", gb * n)?;
        let gaussians = GaussianSet::new(neutral_position, neutral, gb, offset_basis)?;
        let mut joints = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = [0u16; MAX_INFLUENCES];
            for j in row.iter_mut() {
                *j = u16::try_from(r.u32()?).map_err(|_| Error::Data("skin joint index out of range".into()))?;
            }
            joints.push(row);
        }
        let sw = r.f64s_exact("skin weights", n * MAX_INFLUENCES)?;
        let skin = SkinWeights {
            joints,
            weights: sw.chunks_exact(MAX_INFLUENCES).map(|c| c.try_into().unwrap()).collect(),
        };

        let anchor_position = r.vec3s("anchor positions", f)?;
        let property_width = r.len()?;
        let control_width = r.len()?;
        let widths = &h.layer_widths;
        if widths.len() < 2 || widths[0] != p {
            return Err(Error::Data("checkpoint layer widths are inconsistent".into()));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for win in widths.windows(2) {
            let (i, o) = (win[0], win[1]);
            let weight = r.f64s_exact("mlp weights", f * i * o)?;
            let bias = r.f64s_exact("mlp biases", f * o)?;
            layers.push(StackedLayer {
                inputs: i,
                outputs: o,
                weight,
                bias,
            });
        }
        let field = AnchorField::from_layers(anchor_position, layers, property_width, control_width)?;

        let control_position = r.vec3s("control positions", c)?;
        let neutral_offset = r.vec3s("control neutral offsets", c)?;
        let control_basis = r.vec3s("control offset basis", b * c)?;
        let mut neighbors = Vec::with_capacity(c);
        for _ in 0..c {
            let k = r.len()?;
            let list: Result<Vec<usize>> = (0..k).map(|_| r.len()).collect();
            neighbors.push(list?);
        }
        let lattice = ControlLattice::from_parts(control_position, neutral_offset, b, control_basis, neighbors)?;

        let gaussian_anchor_table = r.table("gaussian-anchor table", f, n)?;
        let control_anchor_table = r.table("control-anchor table", f, c)?;
        let gaussian_control_table = r.table("gaussian-control table", c, n)?;

        let pose_basis = match r.u8()? {
            0 => None,
            1 => {
                let k = r.len()?;
                let mean = r.f64s_exact("pose mean", p)?;
                let components: Result<Vec<Vec<f64>>> = (0..k).map(|_| r.f64s_exact("pose component", p)).collect();
                let singular_values = r.f64s_exact("pose singular values", k)?;
                Some(PoseBasis {
                    mean,
                    components: components?,
                    singular_values,
                })
            }
            t => return Err(Error::Data(format!("bad pose basis flag {t}"))),
        };

        let model = AvatarModel {
            variant: h.variant,
            rig,
            gaussians,
            skin,
            field,
            lattice,
            gaussian_anchor_table,
            control_anchor_table,
            gaussian_control_table,
            pose_basis,
        };
        model.validate()?;

        let training = match r.u8()? {
            0 => None,
            1 => {
                let iteration = r.u64()?;
                let config: TrainConfig = parse_json(path, r.bytes()?)?;
                let count = r.len()?;
                let mut groups = Vec::with_capacity(count);
                for _ in 0..count {
                    let step = r.u64()?;
                    let tensors = r.len()?;
                    let mut ts = Vec::with_capacity(tensors);
                    for _ in 0..tensors {
                        let m = r.f64s()?;
                        let v = r.f64s()?;
                        if m.len() != v.len() {
                            return Err(Error::Data("optimizer moments differ in length".into()));
                        }
                        ts.push(Moments { m, v });
                    }
                    groups.push(AdamGroup { step, tensors: ts });
                }
                Some(TrainingState {
                    optimizer: OptimizerState { groups },
                    iteration,
                    config,
                })
            }
            t => return Err(Error::Data(format!("bad optimizer flag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { model, training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn read_header(r: &mut Reader) -> Result<Header> {
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let variant = Variant::from_tag(r.u32()?)?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.len()?;
    }
    let count = r.len()?;
    let layer_widths: Result<Vec<usize>> = (0..count).map(|_| r.len()).collect();
    Ok(Header {
        version,
        variant,
        gaussians: dims[0],
        basis: dims[1],
        anchors: dims[2],
        controls: dims[3],
        pose_len: dims[4],
        joints: dims[5],
        layer_widths: layer_widths?,
    })
}

/// Reads only the header of a checkpoint file.
pub fn read_header_bytes(bytes: &[u8]) -> Result<Header> {
    read_header(&mut Reader { buf: bytes, pos: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::raster::Camera;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant) -> AvatarModel {
        let config = ModelConfig {
            gaussians: 300,
            anchors: 6,
            controls: 40,
            basis: 4,
            hidden: vec![8, 8],
            variant,
            ..ModelConfig::default()
        };
        AvatarModel::initialize(Rig::synthetic_default(), &config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in [Variant::Basis, Variant::DirectOffsets] {
            let mut model = small(variant);
            let poses: Vec<Vec<f64>> = (0..5).map(|i| vec![0.01 * i as f64; model.pose_len()]).collect();
            model.pose_basis = Some(PoseBasis::fit(&poses, 3).unwrap());
            let mut optimizer = OptimizerState::new(&model);
            optimizer.groups[6].step = 9;
            optimizer.groups[6].tensors[0].m[0] = 0.125;
            let ck = Checkpoint {
                model,
                training: Some(TrainingState {
                    optimizer,
                    iteration: 42,
                    config: TrainConfig::default(),
                }),
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(read_header_bytes(&bytes).unwrap(), ck.header());
        }
    }

    #[test]
    fn reloaded_model_renders_identically() {
        let model = small(Variant::Basis);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.splf");
        Checkpoint {
            model: model.clone(),
            training: None,
        }
        .save(&path)
        .unwrap();
        let back = Checkpoint::load(&path).unwrap().model;
        let cam = Camera::look_at([0.0, 1.0, 3.0], [0.0, 0.9, 0.0], [0.0, 1.0, 0.0], 40.0, 32, 32);
        let pose = vec![0.1; model.pose_len()];
        let a = model.forward(&pose, &cam, [0.0; 3]).unwrap().frame.color;
        let b = back.forward(&pose, &cam, [0.0; 3]).unwrap().frame.color;
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint {
            model: small(Variant::Basis),
            training: None,
        }
        .to_bytes();
        assert!(Checkpoint::from_bytes(b"NOPE", Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9], Path::new("x")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("x")).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bad_version, Path::new("x")), Err(Error::Data(_))));
    }
}
