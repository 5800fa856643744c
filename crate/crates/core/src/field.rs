//! Spatially distributed pose MLPs.
//!
//! Each of the `F` anchors owns one small MLP with identical architecture.
//! Weights are stored stacked per layer with shape `(F, in, out)`, and
//! evaluation runs one layer at a time across all anchors, so a frame costs a
//! fixed number of contractions regardless of how many Gaussians read the
//! outputs.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};

/// Hidden widths of the reference architecture.
pub const DEFAULT_HIDDEN: [usize; 4] = [512, 256, 256, 256];

/// One layer of all anchor MLPs.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `F × inputs × outputs`, row-major.
    pub weight: Vec<f64>,
    /// `F × outputs`.
    pub bias: Vec<f64>,
}

impl StackedLayer {
    pub fn zeros(anchors: usize, inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; anchors * inputs * outputs],
            bias: vec![0.0; anchors * outputs],
        }
    }

    /// `(F, in, out)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.bias.len() / self.outputs.max(1), self.inputs, self.outputs)
    }

    fn anchor_weight(&self, f: usize) -> &[f64] {
        let s = self.inputs * self.outputs;
        &self.weight[f * s..(f + 1) * s]
    }

    fn anchor_bias(&self, f: usize) -> &[f64] {
        &self.bias[f * self.outputs..(f + 1) * self.outputs]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorField {
    anchor_position: Vec<[f64; 3]>,
    pub layers: Vec<StackedLayer>,
    property_width: usize,
    control_width: usize,
}

/// Outputs of all anchors for one pose, split into the part interpolated to
/// Gaussians and the part interpolated to control points.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorOutputs {
    /// `F × property_width`.
    pub gaussian_coeffs: Vec<f64>,
    /// `F × control_width`.
    pub control_coeffs: Vec<f64>,
}

/// Per-layer activations kept for the backward pass. `activations[0]` is the
/// pose broadcast to every anchor; the last entry is the raw output.
#[derive(Debug, Clone)]
pub struct FieldForward {
    pub activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradients {
    pub layers: Vec<StackedLayer>,
    pub pose: Vec<f64>,
}

impl AnchorField {
    /// Builds a field with fan-in scaled uniform hidden layers and a
    /// zero-initialized output layer.
    pub fn new<R: Rng>(
        anchor_position: Vec<[f64; 3]>,
        pose_len: usize,
        hidden: &[usize],
        property_width: usize,
        control_width: usize,
        rng: &mut R,
    ) -> Self {
        let f = anchor_position.len();
        let mut widths = vec![pose_len];
        widths.extend_from_slice(hidden);
        widths.push(property_width + control_width);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let mut layer = StackedLayer::zeros(f, w[0], w[1]);
                if l < last {
                    let bound = 1.0 / (w[0] as f64).sqrt();
                    for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                layer
            })
            .collect();
        Self {
            anchor_position,
            layers,
            property_width,
            control_width,
        }
    }

    pub fn from_layers(
        anchor_position: Vec<[f64; 3]>,
        layers: Vec<StackedLayer>,
        property_width: usize,
        control_width: usize,
    ) -> Result<Self> {
        let f = anchor_position.len();
        if layers.is_empty() {
            return Err(Error::Config("anchor field needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            check_len("stacked weight", f * layer.inputs * layer.outputs, layer.weight.len())?;
            check_len("stacked bias", f * layer.outputs, layer.bias.len())?;
            if l > 0 {
                check_len("layer input width", layers[l - 1].outputs, layer.inputs)?;
            }
        }
        check_len(
            "anchor output width",
            property_width + control_width,
            layers.last().map(|l| l.outputs).unwrap_or(0),
        )?;
        Ok(Self {
            anchor_position,
            layers,
            property_width,
            control_width,
        })
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_position.len()
    }

    pub fn anchor_position(&self) -> &[[f64; 3]] {
        &self.anchor_position
    }

    pub fn pose_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.property_width + self.control_width
    }

    pub fn property_width(&self) -> usize {
        self.property_width
    }

    pub fn control_width(&self) -> usize {
        self.control_width
    }

    /// `[P, hidden.., out]`.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.pose_len()];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Floating-point operations of one [`evaluate_all`](Self::evaluate_all):
    /// a multiply-add per weight and one add per bias, for every anchor.
    pub fn forward_flops(&self) -> u64 {
        forward_flops(self.anchor_count(), &self.layer_widths())
    }

    pub fn forward(&self, pose: &[f64]) -> Result<FieldForward> {
        check_len("pose vector", self.pose_len(), pose.len())?;
        if let Some(i) = pose.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("pose entry {i} is not finite")));
        }
        let f = self.anchor_count();
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(pose.repeat(f));
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = activations.last().expect("input activations");
            let mut out = vec![0.0; f * layer.outputs];
            let relu = l < last;
            out.par_chunks_mut(layer.outputs)
                .enumerate()
                .for_each(|(a, dst)| {
                    let x = &input[a * layer.inputs..(a + 1) * layer.inputs];
                    dense_forward(layer.anchor_weight(a), layer.anchor_bias(a), x, dst);
                    if relu {
                        for v in dst.iter_mut() {
                            *v = v.max(0.0);
                        }
                    }
                });
            activations.push(out);
        }
        Ok(FieldForward { activations })
    }

    pub fn split_outputs(&self, raw: &[f64]) -> AnchorOutputs {
        let w = self.output_width();
        let mut gaussian_coeffs = Vec::with_capacity(self.anchor_count() * self.property_width);
        let mut control_coeffs = Vec::with_capacity(self.anchor_count() * self.control_width);
        for row in raw.chunks(w) {
            gaussian_coeffs.extend_from_slice(&row[..self.property_width]);
            control_coeffs.extend_from_slice(&row[self.property_width..]);
        }
        AnchorOutputs {
            gaussian_coeffs,
            control_coeffs,
        }
    }

    pub fn evaluate_all(&self, pose: &[f64]) -> Result<AnchorOutputs> {
        let fwd = self.forward(pose)?;
        Ok(self.split_outputs(fwd.activations.last().expect("output layer")))
    }

    /// Recomputes the forward pass and backpropagates `output_gradients`
    /// (`F × out`).
    pub fn backward_all(&self, pose: &[f64], output_gradients: &[f64]) -> Result<FieldGradients> {
        let fwd = self.forward(pose)?;
        self.backward(&fwd, output_gradients)
    }

    pub fn backward(&self, fwd: &FieldForward, output_gradients: &[f64]) -> Result<FieldGradients> {
        let f = self.anchor_count();
        check_len("anchor output gradients (F x out)", f * self.output_width(), output_gradients.len())?;
        let mut grads: Vec<StackedLayer> = self
            .layers
            .iter()
            .map(|l| StackedLayer::zeros(f, l.inputs, l.outputs))
            .collect();
        let mut upstream = output_gradients.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &fwd.activations[l];
            let g = &mut grads[l];
            let mut downstream = vec![0.0; f * layer.inputs];
            let inputs = layer.inputs;
            let outputs = layer.outputs;
            let wsize = inputs * outputs;
            g.weight
                .par_chunks_mut(wsize)
                .zip(g.bias.par_chunks_mut(outputs))
                .zip(downstream.par_chunks_mut(inputs))
                .enumerate()
                .for_each(|(a, ((gw, gb), dx))| {
                    let go = &upstream[a * outputs..(a + 1) * outputs];
                    let x = &input[a * inputs..(a + 1) * inputs];
                    let w = layer.anchor_weight(a);
                    gb.copy_from_slice(go);
                    for i in 0..inputs {
                        let xi = x[i];
                        let wrow = &w[i * outputs..(i + 1) * outputs];
                        let grow = &mut gw[i * outputs..(i + 1) * outputs];
                        let mut acc = 0.0;
                        for o in 0..outputs {
                            grow[o] = xi * go[o];
                            acc += wrow[o] * go[o];
                        }
                        dx[i] = acc;
                    }
                });
            if l > 0 {
                // ReLU mask from the post-activation values feeding this layer.
                for (d, &x) in downstream.iter_mut().zip(input.iter()) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            upstream = downstream;
        }
        let p = self.pose_len();
        let mut pose = vec![0.0; p];
        for a in 0..f {
            for i in 0..p {
                pose[i] += upstream[a * p + i];
            }
        }
        Ok(FieldGradients {
            layers: grads,
            pose,
        })
    }
}

/// FLOPs of one batched evaluation for `anchors` MLPs with the given widths.
pub fn forward_flops(anchors: usize, widths: &[usize]) -> u64 {
    widths
        .windows(2)
        .map(|w| (anchors * (2 * w[0] * w[1] + w[1])) as u64)
        .sum()
}

fn dense_forward(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let n_out = out.len();
    out.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &weight[i * n_out..(i + 1) * n_out];
        for (o, w) in out.iter_mut().zip(row) {
            *o += xi * w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(field: &mut AnchorField, rng: &mut ChaCha8Rng) {
        for layer in field.layers.iter_mut() {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }

    /// Plain single-MLP evaluation for one anchor, one layer after another.
    fn sequential_oracle(field: &AnchorField, anchor: usize, pose: &[f64]) -> Vec<f64> {
        let mut x = pose.to_vec();
        let n = field.layers.len();
        for (l, layer) in field.layers.iter().enumerate() {
            let (inp, out) = (layer.inputs, layer.outputs);
            let mut y = vec![0.0; out];
            for o in 0..out {
                let mut acc = layer.bias[anchor * out + o];
                for i in 0..inp {
                    acc += x[i] * layer.weight[anchor * inp * out + i * out + o];
                }
                y[o] = if l + 1 < n { acc.max(0.0) } else { acc };
            }
            x = y;
        }
        x
    }

    fn field(anchors: usize, pose_len: usize, hidden: &[usize], half: usize, seed: u64) -> AnchorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..anchors).map(|i| [i as f64, 0.0, 0.0]).collect();
        AnchorField::new(pos, pose_len, hidden, half, half, &mut rng)
    }

    #[test]
    fn zero_final_layer_gives_zero_outputs() {
        let f = field(3, 6, &[8, 8], 2, 1);
        let out = f.evaluate_all(&[0.3, -0.2, 1.0, 0.0, 0.5, 0.1]).unwrap();
        assert!(out.gaussian_coeffs.iter().chain(&out.control_coeffs).all(|v| *v == 0.0));
        assert_eq!(out.gaussian_coeffs.len(), 6);
    }

    #[test]
    fn all_zero_weights_give_zero_outputs() {
        let mut f = field(2, 4, &[5], 1, 2);
        for l in f.layers.iter_mut() {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let out = f.evaluate_all(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(out.gaussian_coeffs.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batched_matches_sequential_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f = field(2, 6, &[16, 12, 12, 12], 3, 3);
        randomize(&mut f, &mut rng);
        let pose: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fwd = f.forward(&pose).unwrap();
        let out = fwd.activations.last().unwrap();
        for a in 0..2 {
            let oracle = sequential_oracle(&f, a, &pose);
            for (o, e) in out[a * 6..(a + 1) * 6].iter().zip(&oracle) {
                assert!((o - e).abs() <= 1e-6 * e.abs().max(1.0), "{o} vs {e}");
            }
        }
    }

    #[test]
    fn output_split_is_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = field(2, 3, &[4], 2, 4);
        randomize(&mut f, &mut rng);
        let pose = [0.1, 0.2, 0.3];
        let raw = f.forward(&pose).unwrap().activations.pop().unwrap();
        let out = f.split_outputs(&raw);
        assert_eq!(&out.gaussian_coeffs[0..2], &raw[0..2]);
        assert_eq!(&out.control_coeffs[0..2], &raw[2..4]);
        assert_eq!(&out.gaussian_coeffs[2..4], &raw[4..6]);
    }

    #[test]
    fn non_finite_pose_is_rejected() {
        let f = field(2, 3, &[4], 1, 1);
        assert!(matches!(f.evaluate_all(&[0.0, f64::NAN, 0.0]), Err(Error::Input(_))));
        assert!(matches!(f.evaluate_all(&[0.0, 0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn reference_layer_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos = vec![[0.0; 3]; 300];
        let f = AnchorField::new(pos, 63, &DEFAULT_HIDDEN, 15, 15, &mut rng);
        let shapes: Vec<_> = f.layers.iter().map(|l| l.shape()).collect();
        assert_eq!(
            shapes,
            vec![(300, 63, 512), (300, 512, 256), (300, 256, 256), (300, 256, 256), (300, 256, 30)]
        );
    }

    #[test]
    fn flops_depend_only_on_field_dimensions() {
        assert_eq!(forward_flops(2, &[3, 4, 2]), 2 * (2 * 12 + 4) + 2 * (2 * 8 + 2));
    }

    #[test]
    fn zero_output_gradient_gives_zero_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut f = field(2, 3, &[4, 4], 1, 4);
        randomize(&mut f, &mut rng);
        let g = f.backward_all(&[0.1, 0.2, 0.3], &[0.0; 4]).unwrap();
        assert!(g.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| *v == 0.0)));
        assert!(g.pose.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_linear_layer_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut f = field(1, 3, &[], 1, 9);
        randomize(&mut f, &mut rng);
        let pose = [0.5, -1.0, 2.0];
        let go = [0.25, -0.75];
        let g = f.backward_all(&pose, &go).unwrap();
        for i in 0..3 {
            for o in 0..2 {
                assert_eq!(g.layers[0].weight[i * 2 + o], pose[i] * go[o]);
            }
        }
        assert_eq!(g.layers[0].bias, go.to_vec());
    }

    #[test]
    fn four_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut f = field(2, 5, &[7, 6, 6, 5], 2, 11);
        randomize(&mut f, &mut rng);
        let pose: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |f: &AnchorField, pose: &[f64]| -> f64 {
            let out = f.forward(pose).unwrap().activations.pop().unwrap();
            out.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let g = f.backward_all(&pose, &upstream).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for l in 0..f.layers.len() {
            for idx in 0..f.layers[l].weight.len() + f.layers[l].bias.len() {
                let nw = f.layers[l].weight.len();
                let bump = |f: &mut AnchorField, d: f64| {
                    if idx < nw {
                        f.layers[l].weight[idx] += d
                    } else {
                        f.layers[l].bias[idx - nw] += d
                    }
                };
                let mut p = f.clone();
                bump(&mut p, h);
                let mut m = f.clone();
                bump(&mut m, -h);
                let num = (loss(&p, &pose) - loss(&m, &pose)) / (2.0 * h);
                let ana = if idx < nw { g.layers[l].weight[idx] } else { g.layers[l].bias[idx - nw] };
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
        for i in 0..5 {
            let mut p = pose.clone();
            p[i] += h;
            let mut m = pose.clone();
            m[i] -= h;
            let num = (loss(&f, &p) - loss(&f, &m)) / (2.0 * h);
            assert!((g.pose[i] - num).abs() / num.abs().max(1e-7) <= 1e-4);
        }
    }
}
