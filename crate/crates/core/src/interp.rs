//! Inverse-distance interpolation over the three nearest sources.
//!
//! One table kernel serves every interpolation in the avatar: anchor
//! coefficients to Gaussians, anchor coefficients to control points, and
//! control-point position offsets to Gaussians. Tables are built once from
//! fixed canonical positions.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{check_len, Error, Result};
use crate::kdtree::KdTree;

/// Distances below this collapse to a delta weight on the coincident source.
pub const COINCIDENT_DISTANCE: f64 = 1e-8;
pub const NEIGHBORS: usize = 3;
/// Default neighbour count of the control-point smoothness graph.
pub const GRAPH_NEIGHBORS: usize = 6;

static TABLE_BUILDS: AtomicUsize = AtomicUsize::new(0);

/// Number of tables built by this process. Animation must not increase it.
pub fn table_builds() -> usize {
    TABLE_BUILDS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpTable {
    source_count: usize,
    pub indices: Vec<[u32; NEIGHBORS]>,
    pub weights: Vec<[f64; NEIGHBORS]>,
}

impl InterpTable {
    pub fn build(sources: &[[f64; 3]], queries: &[[f64; 3]]) -> Result<Self> {
        if sources.len() < NEIGHBORS {
            return Err(Error::Config(format!(
                "interpolation needs at least {NEIGHBORS} sources, got {}",
                sources.len()
            )));
        }
        if sources.iter().chain(queries).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("interpolation coordinates must be finite".into()));
        }
        TABLE_BUILDS.fetch_add(1, Ordering::Relaxed);
        let tree = KdTree::new(sources);
        let mut indices = Vec::with_capacity(queries.len());
        let mut weights = Vec::with_capacity(queries.len());
        for q in queries {
            let nn = tree.knn(q, NEIGHBORS);
            let mut idx = [0u32; NEIGHBORS];
            let mut dist = [0.0; NEIGHBORS];
            for (j, (i, d2)) in nn.into_iter().enumerate() {
                idx[j] = i as u32;
                dist[j] = d2.sqrt();
            }
            indices.push(idx);
            weights.push(inverse_distance_weights(&dist));
        }
        Ok(Self {
            source_count: sources.len(),
            indices,
            weights,
        })
    }

    /// Validates a table read from disk.
    pub fn from_parts(source_count: usize, indices: Vec<[u32; NEIGHBORS]>, weights: Vec<[f64; NEIGHBORS]>) -> Result<Self> {
        check_len("interpolation weight rows", indices.len(), weights.len())?;
        if let Some(bad) = indices.iter().flatten().find(|&&i| i as usize >= source_count) {
            return Err(Error::Data(format!(
                "interpolation index {bad} out of range for {source_count} sources"
            )));
        }
        Ok(Self {
            source_count,
            indices,
            weights,
        })
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn query_count(&self) -> usize {
        self.indices.len()
    }

    /// Weighted sum of the three indexed source rows per query.
    /// `values` is `M × width`, row-major.
    pub fn interpolate(&self, values: &[f64], width: usize) -> Result<Vec<f64>> {
        check_len("interpolation source values", self.source_count * width, values.len())?;
        let mut out = vec![0.0; self.query_count() * width];
        if width == 0 {
            return Ok(out);
        }
        for (q, dst) in out.chunks_mut(width).enumerate() {
            for j in 0..NEIGHBORS {
                let w = self.weights[q][j];
                if w == 0.0 {
                    continue;
                }
                let s = self.indices[q][j] as usize;
                let src = values.get(s * width..(s + 1) * width).ok_or_else(|| {
                    Error::Data(format!("interpolation index {s} out of range"))
                })?;
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += w * v;
                }
            }
        }
        Ok(out)
    }

    pub fn interpolate_rows(&self, values: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        let flat = self.interpolate(values.as_flattened(), 3)?;
        Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Transpose of [`interpolate`](Self::interpolate): scatters output
    /// gradients back onto the source rows.
    pub fn interpolate_backward(&self, grad_out: &[f64], width: usize) -> Result<Vec<f64>> {
        check_len("interpolation output gradient", self.query_count() * width, grad_out.len())?;
        let mut grad = vec![0.0; self.source_count * width];
        if width == 0 {
            return Ok(grad);
        }
        for (q, g) in grad_out.chunks(width).enumerate() {
            for j in 0..NEIGHBORS {
                let w = self.weights[q][j];
                if w == 0.0 {
                    continue;
                }
                let s = self.indices[q][j] as usize;
                for (d, v) in grad[s * width..(s + 1) * width].iter_mut().zip(g) {
                    *d += w * v;
                }
            }
        }
        Ok(grad)
    }
}

/// Normalized `1/d` weights for distances sorted ascending.
pub fn inverse_distance_weights(dist: &[f64; NEIGHBORS]) -> [f64; NEIGHBORS] {
    if dist[0] < COINCIDENT_DISTANCE {
        let mut w = [0.0; NEIGHBORS];
        w[0] = 1.0;
        return w;
    }
    let inv = dist.map(|d| 1.0 / d);
    let sum: f64 = inv.iter().sum();
    inv.map(|v| v / sum)
}

/// Control points with their neutral offsets, offset basis and smoothness graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLattice {
    control_position: Vec<[f64; 3]>,
    pub neutral_offset: Vec<[f64; 3]>,
    basis_count: usize,
    /// `B × C`, basis-major.
    pub offset_basis: Vec<[f64; 3]>,
    neighbors: Vec<Vec<usize>>,
}

/// Per-control coefficients and resulting offsets for one pose.
#[derive(Debug, Clone)]
pub struct ControlState {
    /// `C × B`.
    pub coeffs: Vec<f64>,
    pub offsets: Vec<[f64; 3]>,
}

impl ControlLattice {
    /// Zero neutral offsets and basis, with a symmetrized `k`-NN graph.
    pub fn new(control_position: Vec<[f64; 3]>, basis_count: usize, graph_k: usize) -> Result<Self> {
        let c = control_position.len();
        let neighbors = neighbor_graph(&control_position, graph_k);
        Ok(Self {
            neutral_offset: vec![[0.0; 3]; c],
            offset_basis: vec![[0.0; 3]; basis_count * c],
            control_position,
            basis_count,
            neighbors,
        })
    }

    pub fn from_parts(
        control_position: Vec<[f64; 3]>,
        neutral_offset: Vec<[f64; 3]>,
        basis_count: usize,
        offset_basis: Vec<[f64; 3]>,
        neighbors: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let c = control_position.len();
        check_len("control neutral offsets", c, neutral_offset.len())?;
        check_len("control offset basis", basis_count * c, offset_basis.len())?;
        check_len("control neighbour lists", c, neighbors.len())?;
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                if j >= c || !neighbors[j].contains(&i) {
                    return Err(Error::Data(format!("control graph edge {i}-{j} is not symmetric")));
                }
            }
        }
        Ok(Self {
            control_position,
            neutral_offset,
            basis_count,
            offset_basis,
            neighbors,
        })
    }

    pub fn control_count(&self) -> usize {
        self.control_position.len()
    }

    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    pub fn control_position(&self) -> &[[f64; 3]] {
        &self.control_position
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// Undirected edges `(i, j)` with `i < j`, each listed once.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// `δx_c = δx_c0 + Σ_k w_c[k] · δx_cb^k`, with `w_c` interpolated from
    /// the anchors' control coefficients (`F × B`).
    pub fn control_offsets(&self, table: &InterpTable, anchor_control_coeffs: &[f64]) -> Result<ControlState> {
        let b = self.basis_count;
        let c = self.control_count();
        check_len("control table queries", c, table.query_count())?;
        check_len(
            "anchor control coefficients (F x B)",
            table.source_count() * b,
            anchor_control_coeffs.len(),
        )?;
        let coeffs = table.interpolate(anchor_control_coeffs, b)?;
        let mut offsets = self.neutral_offset.clone();
        for (i, o) in offsets.iter_mut().enumerate() {
            for k in 0..b {
                let w = coeffs[i * b + k];
                let d = &self.offset_basis[k * c + i];
                o[0] += w * d[0];
                o[1] += w * d[1];
                o[2] += w * d[2];
            }
        }
        Ok(ControlState { coeffs, offsets })
    }

    /// Reverse of [`control_offsets`](Self::control_offsets).
    pub fn control_offsets_backward(
        &self,
        table: &InterpTable,
        state: &ControlState,
        grad_offsets: &[[f64; 3]],
    ) -> Result<ControlGradients> {
        let b = self.basis_count;
        let c = self.control_count();
        check_len("control offset gradients", c, grad_offsets.len())?;
        let mut basis = vec![[0.0; 3]; b * c];
        let mut coeffs = vec![0.0; c * b];
        for i in 0..c {
            let g = grad_offsets[i];
            for k in 0..b {
                let w = state.coeffs[i * b + k];
                basis[k * c + i] = [w * g[0], w * g[1], w * g[2]];
                let d = &self.offset_basis[k * c + i];
                coeffs[i * b + k] = d[0] * g[0] + d[1] * g[1] + d[2] * g[2];
            }
        }
        let anchor = table.interpolate_backward(&coeffs, b)?;
        Ok(ControlGradients {
            neutral: grad_offsets.to_vec(),
            basis,
            anchor_coeffs: anchor,
        })
    }

    /// Per-Gaussian `δx` from the three nearest control offsets.
    pub fn gaussian_position_offsets(&self, table: &InterpTable, delta_xc: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        check_len("control offsets", self.control_count(), delta_xc.len())?;
        check_len("gaussian-control table sources", self.control_count(), table.source_count())?;
        table.interpolate_rows(delta_xc)
    }
}

#[derive(Debug, Clone)]
pub struct ControlGradients {
    pub neutral: Vec<[f64; 3]>,
    pub basis: Vec<[f64; 3]>,
    /// `F × B`.
    pub anchor_coeffs: Vec<f64>,
}

/// Symmetrized `k`-nearest-neighbour adjacency (self excluded), sorted lists.
pub fn neighbor_graph(points: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let tree = KdTree::new(points);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); points.len()];
    for (i, p) in points.iter().enumerate() {
        for (j, _) in tree.knn(p, k + 1) {
            if j != i {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn coincident_query_gets_delta_weight() {
        let src = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let t = InterpTable::build(&src, &[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(t.indices[0][0], 1);
        assert_eq!(t.weights[0], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn equidistant_sources_share_weight() {
        let src = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [5.0, 5.0, 5.0]];
        let t = InterpTable::build(&src, &[[0.0; 3]]).unwrap();
        for w in t.weights[0] {
            assert!(close(w, 1.0 / 3.0, 1e-15));
        }
        assert_eq!(t.indices[0], [0, 1, 2]);
    }

    #[test]
    fn distances_one_two_two() {
        let src = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let t = InterpTable::build(&src, &[[0.0; 3]]).unwrap();
        let w = t.weights[0];
        assert!(close(w[0], 0.5, 1e-15) && close(w[1], 0.25, 1e-15) && close(w[2], 0.25, 1e-15));
        let onehot = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let out = t.interpolate(&onehot, 3).unwrap();
        assert!(close(out[0], 0.5, 1e-15) && close(out[1], 0.25, 1e-15) && close(out[2], 0.25, 1e-15));
    }

    #[test]
    fn too_few_sources_is_a_config_error() {
        let err = InterpTable::build(&[[0.0; 3], [1.0; 3]], &[[0.0; 3]]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn constant_sources_and_zero_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src: Vec<[f64; 3]> = (0..20).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let q: Vec<[f64; 3]> = (0..30).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let t = InterpTable::build(&src, &q).unwrap();
        let vals: Vec<f64> = (0..20).flat_map(|_| [0.3, -2.0]).collect();
        let out = t.interpolate(&vals, 2).unwrap();
        for row in out.chunks(2) {
            assert!(close(row[0], 0.3, 1e-12) && close(row[1], -2.0, 1e-12));
        }
        assert!(t.interpolate(&[], 0).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_indices_are_structural_errors() {
        let err = InterpTable::from_parts(2, vec![[0, 1, 2]], vec![[1.0, 0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn interpolation_backward_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src: Vec<[f64; 3]> = (0..10).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let q: Vec<[f64; 3]> = (0..7).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let t = InterpTable::build(&src, &q).unwrap();
        let vals: Vec<f64> = (0..20).map(|_| rng.gen()).collect();
        let g: Vec<f64> = (0..14).map(|_| rng.gen()).collect();
        let back = t.interpolate_backward(&g, 2).unwrap();
        let h = 1e-6;
        for s in 0..20 {
            let mut p = vals.clone();
            p[s] += h;
            let mut m = vals.clone();
            m[s] -= h;
            let f = |v: &[f64]| -> f64 { t.interpolate(v, 2).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum() };
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!(close(back[s], num, 1e-6));
        }
    }

    #[test]
    fn control_offsets_examples() {
        let anchors = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let controls = vec![[0.2, 0.2, 0.0], [0.5, 0.1, 0.0], [0.1, 0.6, 0.0], [0.9, 0.9, 0.0]];
        let table = InterpTable::build(&anchors, &controls).unwrap();
        let mut lat = ControlLattice::new(controls.clone(), 1, 2).unwrap();
        lat.neutral_offset = vec![[0.1, -0.2, 0.3]; 4];
        let s = lat.control_offsets(&table, &[0.0; 3]).unwrap();
        assert_eq!(s.offsets, lat.neutral_offset);
        lat.offset_basis = vec![[0.0, 0.0, 2.0]; 4];
        let s = lat.control_offsets(&table, &[0.5; 3]).unwrap();
        for o in s.offsets {
            assert!(close(o[0], 0.1, 1e-15) && close(o[1], -0.2, 1e-15) && close(o[2], 1.3, 1e-12));
        }
        assert!(lat.control_offsets(&table, &[0.5; 4]).is_err());
    }

    #[test]
    fn gaussian_offsets_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let controls: Vec<[f64; 3]> = (0..4).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let offsets: Vec<[f64; 3]> = (0..4).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let g = [rng.gen(), rng.gen(), rng.gen()];
        let lat = ControlLattice::new(controls.clone(), 0, 2).unwrap();
        let table = InterpTable::build(&controls, &[g]).unwrap();
        let out = lat.gaussian_position_offsets(&table, &offsets).unwrap();
        // Exhaustive oracle.
        let mut d: Vec<(f64, usize)> = controls
            .iter()
            .enumerate()
            .map(|(i, c)| (((c[0] - g[0]).powi(2) + (c[1] - g[1]).powi(2) + (c[2] - g[2]).powi(2)).sqrt(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for &(dist, i) in &d[..3] {
            for a in 0..3 {
                num[a] += offsets[i][a] / dist;
            }
            den += 1.0 / dist;
        }
        for a in 0..3 {
            assert!(close(out[0][a], num[a] / den, 1e-12));
        }
        assert_eq!(lat.gaussian_position_offsets(&table, &[[0.0; 3]; 4]).unwrap(), vec![[0.0; 3]]);
        let t = [0.01, 0.02, -0.03];
        for a in 0..3 {
            assert!(close(lat.gaussian_position_offsets(&table, &[t; 4]).unwrap()[0][a], t[a], 1e-15));
        }
    }

    #[test]
    fn neighbor_graph_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..200).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let g = neighbor_graph(&pts, 6);
        for (i, l) in g.iter().enumerate() {
            assert!(l.len() >= 6);
            assert!(!l.contains(&i));
            for &j in l {
                assert!(g[j].contains(&i));
            }
        }
        let lat = ControlLattice::new(pts, 1, 6).unwrap();
        let edges = lat.edges();
        let total: usize = lat.neighbors().iter().map(|l| l.len()).sum();
        assert_eq!(edges.len() * 2, total);
    }
}
