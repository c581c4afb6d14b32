//! The three network architectures of the learning stack.
//!
//! Two edge-update graph networks and a dense ablation:
//!
//! - [`TiedGnn`] — two edge types (one per-user "signal" edge on the
//!   diagonal, "interference" edges elsewhere), nine weight matrices per
//!   layer. Its input-output map is equivariant to *tied* permutations:
//!   permuting users and streams by the same matrix permutes the output
//!   rows and columns identically.
//! - [`FreeGnn`] — a single edge type on the bipartite stream/user graph,
//!   three weight matrices per layer. Its map is equivariant to
//!   *independent* row and column permutations.
//! - [`Fnn`] — plain dense stacks with the graph structure flattened away;
//!   no equivariance, and parameter counts that grow with the user count.
//!
//! Role wrappers place features and read out actions:
//!
//! - `PolicyNet`: positions -> coefficient matrix (tied graph, tanh output).
//! - `ProjNet`: (positions, coefficients) -> per-user powers (free graph,
//!   relu output, mean readout over each user's incident edges).
//! - `ValueNet`: (positions, projected coefficients) -> gain matrix (free
//!   graph, linear output).
//!
//! Inputs are standardized with fixed, config-derived scales so that
//! positions, coefficients, powers, and gains all enter and leave the
//! networks at order one; the scales travel with the checkpoints.

use std::rc::Rc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DenseParams, NodeId, PoolGroups, Tape, Tensor};
use crate::beamfield::CoeffMatrix;
use crate::error::{CapaError, Result};
use crate::linalg::CMat;
use crate::physics::Vec3;

/// Output-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

/// Which mapping a network realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetRole {
    Policy,
    Proj,
    Value,
}

/// Hyper-parameters of one network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetSpec {
    pub role: NetRole,
    pub hidden: Vec<usize>,
    pub output_activation: Activation,
    pub learning_rate: f64,
}

impl NetSpec {
    /// Tuned graph-network hyper-parameters per role.
    pub fn gnn_default(role: NetRole) -> Self {
        match role {
            NetRole::Policy => NetSpec {
                role,
                hidden: vec![16, 32, 64, 32, 16],
                output_activation: Activation::Tanh,
                learning_rate: 0.001,
            },
            NetRole::Proj => NetSpec {
                role,
                hidden: vec![4, 8, 8, 4],
                output_activation: Activation::Relu,
                learning_rate: 0.0001,
            },
            NetRole::Value => NetSpec {
                role,
                hidden: vec![16, 32, 64, 64, 32, 16],
                output_activation: Activation::Linear,
                learning_rate: 0.001,
            },
        }
    }

    /// Dense-ablation hyper-parameters per role.
    pub fn fnn_default(role: NetRole) -> Self {
        match role {
            NetRole::Policy => NetSpec {
                role,
                hidden: vec![256, 512, 1024, 512, 256],
                output_activation: Activation::Tanh,
                learning_rate: 0.001,
            },
            NetRole::Proj => NetSpec {
                role,
                hidden: vec![64, 128, 128, 64],
                output_activation: Activation::Relu,
                learning_rate: 0.0001,
            },
            NetRole::Value => NetSpec {
                role,
                hidden: vec![256, 512, 1024, 1024, 512, 256],
                output_activation: Activation::Linear,
                learning_rate: 0.001,
            },
        }
    }
}

/// Fixed standardization constants derived from the scene configuration.
/// `coeff_scale` normalizes boundary-projected coefficients, `power_scale`
/// raw-coefficient powers, and `gain_scale` cross gains, all to order one.
///
/// Position features carry five channels: the three standardized
/// coordinates plus the cosine and sine of the carrier phase
/// `k0 (|s| - z0)` at the reference distance. The phase pair is a function
/// of the user position alone, so every permutation property is untouched;
/// it exposes the one oscillatory degree of freedom of the channel inner
/// products (their phase is governed by path-length differences) that
/// plain coordinates would force the networks to resolve from thousands of
/// aliased samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub pos_center: [f64; 3],
    pub pos_half_range: [f64; 3],
    pub wavenumber: f64,
    pub ref_distance: f64,
    pub coeff_scale: f64,
    pub power_scale: f64,
    pub gain_scale: f64,
}

/// Position feature channels produced by [`FeatureScaling::standardize_pos`].
pub const POS_CHANNELS: usize = 5;

impl FeatureScaling {
    /// Derive scales from the user-region bounds, aperture area, wavelength,
    /// user count, and power budget. The reference self-coupling
    /// `q0 = |A| / (4 pi z0^2)` is the broadside Gram diagonal of the
    /// normalized channel.
    pub fn from_region_wavelength(
        lo: [f64; 3],
        hi: [f64; 3],
        aperture_area: f64,
        wavelength: f64,
        k_users: usize,
        p_max: f64,
    ) -> Self {
        let z0 = 0.5 * (lo[2] + hi[2]);
        let q0 = aperture_area / (4.0 * std::f64::consts::PI * z0 * z0);
        let k = k_users as f64;
        FeatureScaling {
            pos_center: [
                0.5 * (lo[0] + hi[0]),
                0.5 * (lo[1] + hi[1]),
                0.5 * (lo[2] + hi[2]),
            ],
            pos_half_range: [
                (0.5 * (hi[0] - lo[0])).max(1e-9),
                (0.5 * (hi[1] - lo[1])).max(1e-9),
                (0.5 * (hi[2] - lo[2])).max(1.0),
            ],
            wavenumber: 2.0 * std::f64::consts::PI / wavelength,
            ref_distance: z0,
            coeff_scale: (p_max / (k * k * q0)).sqrt(),
            power_scale: k * q0,
            gain_scale: (q0 * p_max).sqrt(),
        }
    }

    /// Back-compatible constructor at the default wavelength.
    pub fn from_region(
        lo: [f64; 3],
        hi: [f64; 3],
        aperture_area: f64,
        k_users: usize,
        p_max: f64,
    ) -> Self {
        Self::from_region_wavelength(
            lo,
            hi,
            aperture_area,
            crate::physics::DEFAULT_WAVELENGTH,
            k_users,
            p_max,
        )
    }

    pub fn standardize_pos(&self, s: Vec3) -> [f64; POS_CHANNELS] {
        let d = s.norm();
        let phase = self.wavenumber * (d - self.ref_distance);
        [
            (s.x - self.pos_center[0]) / self.pos_half_range[0],
            (s.y - self.pos_center[1]) / self.pos_half_range[1],
            (s.z - self.pos_center[2]) / self.pos_half_range[2],
            phase.cos(),
            phase.sin(),
        ]
    }
}

/// One layer of the tied-permutation graph network: nine dense maps.
/// `w[0]` combines the signal edge itself (carries the bias of the signal
/// rule), `w[1]`/`w[2]` aggregate interference edges into it; `w[3]`
/// combines an interference edge (carries that rule's bias), `w[4]..w[6]`
/// aggregate its interference neighbors, and `w[7]`/`w[8]` inject the two
/// endpoint signal edges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TiedGnnLayer {
    pub w: Vec<DenseParams>,
}

impl TiedGnnLayer {
    pub fn init(out: usize, inn: usize, rng: &mut ChaCha8Rng) -> Self {
        // Variance budget at the design user count (K = 4): the signal rule
        // sums 3 groups (self + two aggregations over K-1 edges), the
        // interference rule 6 (self + three aggregations over K-2 edges +
        // two endpoint injections).
        let fan_div = |i: usize| -> f64 {
            match i {
                0 => 3.0,          // signal combiner
                1 | 2 => 9.0,      // signal aggregators: 3 groups x (K-1)
                3 => 6.0,          // interference combiner
                4 | 5 | 6 => 12.0, // interference aggregators: 6 groups x (K-2)
                _ => 6.0,          // endpoint injections
            }
        };
        let w = (0..9)
            .map(|i| DenseParams::init_scaled(out, inn, i == 0 || i == 3, rng, fan_div(i)))
            .collect();
        TiedGnnLayer { w }
    }

    pub fn trainable_matrix_count(&self) -> usize {
        self.w.len()
    }
}

/// One layer of the independent-permutation graph network: three dense
/// maps (self combiner with bias, same-row aggregator, same-column
/// aggregator).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreeGnnLayer {
    pub w: Vec<DenseParams>,
}

impl FreeGnnLayer {
    pub fn init(out: usize, inn: usize, rng: &mut ChaCha8Rng) -> Self {
        // 3 variance groups at the design user count: self + two
        // aggregations over K-1 = 3 edges each.
        let w = (0..3)
            .map(|i| {
                let fan_div = if i == 0 { 3.0 } else { 9.0 };
                DenseParams::init_scaled(out, inn, i == 0, rng, fan_div)
            })
            .collect();
        FreeGnnLayer { w }
    }

    pub fn trainable_matrix_count(&self) -> usize {
        self.w.len()
    }
}

/// Network body: the architecture variants share parameter plumbing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Arch {
    Tied(Vec<TiedGnnLayer>),
    Free(Vec<FreeGnnLayer>),
    /// Dense stack over flattened features; `k_users` is baked in.
    Fnn { layers: Vec<DenseParams>, k_users: usize },
}

/// A complete edge network: architecture, activations, and layer widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeNet {
    pub spec: NetSpec,
    pub arch: Arch,
    /// Layer widths including input and output channel counts.
    pub dims: Vec<usize>,
}

impl EdgeNet {
    /// Graph network over the tied-permutation graph.
    pub fn tied(spec: NetSpec, in_ch: usize, out_ch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![in_ch];
        dims.extend_from_slice(&spec.hidden);
        dims.push(out_ch);
        let layers = dims
            .windows(2)
            .map(|w| TiedGnnLayer::init(w[1], w[0], &mut rng))
            .collect();
        EdgeNet { spec, arch: Arch::Tied(layers), dims }
    }

    /// Graph network over the independently-permutable bipartite graph.
    pub fn free(spec: NetSpec, in_ch: usize, out_ch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![in_ch];
        dims.extend_from_slice(&spec.hidden);
        dims.push(out_ch);
        let layers = dims
            .windows(2)
            .map(|w| FreeGnnLayer::init(w[1], w[0], &mut rng))
            .collect();
        EdgeNet { spec, arch: Arch::Free(layers), dims }
    }

    /// Dense stack with the user count baked into the layer sizes.
    pub fn fnn(spec: NetSpec, in_features: usize, out_features: usize, k_users: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![in_features];
        dims.extend_from_slice(&spec.hidden);
        dims.push(out_features);
        let layers = dims
            .windows(2)
            .map(|w| DenseParams::init(w[1], w[0], true, &mut rng))
            .collect();
        EdgeNet { spec, arch: Arch::Fnn { layers, k_users }, dims }
    }

    /// Flat view of all parameter tensors, in a stable order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        match &self.arch {
            Arch::Tied(layers) => {
                for l in layers {
                    for d in &l.w {
                        out.push(&d.weight);
                        if d.has_bias() {
                            out.push(&d.bias);
                        }
                    }
                }
            }
            Arch::Free(layers) => {
                for l in layers {
                    for d in &l.w {
                        out.push(&d.weight);
                        if d.has_bias() {
                            out.push(&d.bias);
                        }
                    }
                }
            }
            Arch::Fnn { layers, .. } => {
                for d in layers {
                    out.push(&d.weight);
                    if d.has_bias() {
                        out.push(&d.bias);
                    }
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        match &mut self.arch {
            Arch::Tied(layers) => {
                for l in layers {
                    for d in &mut l.w {
                        let has_bias = !d.bias.is_empty();
                        out.push(&mut d.weight);
                        if has_bias {
                            out.push(&mut d.bias);
                        }
                    }
                }
            }
            Arch::Free(layers) => {
                for l in layers {
                    for d in &mut l.w {
                        let has_bias = !d.bias.is_empty();
                        out.push(&mut d.weight);
                        if has_bias {
                            out.push(&mut d.bias);
                        }
                    }
                }
            }
            Arch::Fnn { layers, .. } => {
                for d in layers {
                    let has_bias = !d.bias.is_empty();
                    out.push(&mut d.weight);
                    if has_bias {
                        out.push(&mut d.bias);
                    }
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|t| t.shape()).collect()
    }

    /// Trainable weight matrices per hidden layer (9 tied, 3 free, 1 dense).
    pub fn matrices_per_layer(&self) -> usize {
        match &self.arch {
            Arch::Tied(_) => 9,
            Arch::Free(_) => 3,
            Arch::Fnn { .. } => 1,
        }
    }

    fn apply_activation(tape: &mut Tape, x: NodeId, act: Activation) -> NodeId {
        match act {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Linear => x,
        }
    }

    /// Record the forward pass on `tape`. `input` is `[batch*k^2, in_ch]`
    /// for graph architectures and `[batch, in_features]` for the dense
    /// stack. Returns the output node and the parameter leaf ids aligned
    /// with [`EdgeNet::params`].
    pub fn forward(&self, tape: &mut Tape, input: NodeId, k: usize) -> (NodeId, Vec<NodeId>) {
        let mut param_ids = Vec::new();
        let n_layers = self.dims.len() - 1;
        let mut h = input;
        match &self.arch {
            Arch::Tied(layers) => {
                let rows = tape.value(input).rows;
                let mask = tape.leaf(diag_mask(rows / (k * k), k));
                for (li, layer) in layers.iter().enumerate() {
                    let act = if li + 1 == n_layers {
                        self.spec.output_activation
                    } else {
                        Activation::Relu
                    };
                    let mut w_ids = Vec::with_capacity(12);
                    for d in &layer.w {
                        w_ids.push(tape.leaf(d.weight.clone()));
                        param_ids.push(*w_ids.last().unwrap());
                        if d.has_bias() {
                            let b = tape.leaf(d.bias.clone());
                            w_ids.push(b);
                            param_ids.push(b);
                        }
                    }
                    // parameter leaf order: w1, b1, w2, w3, w4, b4, w5..w9
                    let (w1, b1, w2, w3) = (w_ids[0], w_ids[1], w_ids[2], w_ids[3]);
                    let (w4, b4) = (w_ids[4], w_ids[5]);
                    let (w5, w6, w7, w8, w9) =
                        (w_ids[6], w_ids[7], w_ids[8], w_ids[9], w_ids[10]);

                    let rs = tape.edge_row_sum(h, k);
                    let cs = tape.edge_col_sum(h, k);
                    let tr = tape.edge_transpose(h, k);
                    let dr = tape.edge_diag_broadcast_row(h, k);
                    let dc = tape.edge_diag_broadcast_col(h, k);
                    let trs = tape.edge_transpose(rs, k);

                    // signal rule (valid on diagonal edges):
                    // W1 e_kk + b + W2 (colsum_k - e_kk) + W3 (rowsum_k - e_kk)
                    let sig = {
                        let self_term = tape.linear(h, w1);
                        let self_term = tape.add_row_broadcast(self_term, b1);
                        let a1 = tape.sub(cs, h);
                        let a1 = tape.linear(a1, w2);
                        let a2 = tape.sub(rs, h);
                        let a2 = tape.linear(a2, w3);
                        let s = tape.add(self_term, a1);
                        tape.add(s, a2)
                    };
                    // interference rule (valid off the diagonal):
                    // W4 e_kj + b + W5 sum_{i!=j,k} e_ji + W6 sum_{i!=j,k} e_ki
                    // + W7 sum_{i!=j,k} e_ij + W8 e_kk + W9 e_jj
                    let intf = {
                        let self_term = tape.linear(h, w4);
                        let self_term = tape.add_row_broadcast(self_term, b4);
                        let a5 = {
                            let s = tape.sub(trs, dc);
                            let s = tape.sub(s, tr);
                            tape.linear(s, w5)
                        };
                        let a6 = {
                            let s = tape.sub(rs, dr);
                            let s = tape.sub(s, h);
                            tape.linear(s, w6)
                        };
                        let a7 = {
                            let s = tape.sub(cs, dc);
                            let s = tape.sub(s, h);
                            tape.linear(s, w7)
                        };
                        let a8 = tape.linear(dr, w8);
                        let a9 = tape.linear(dc, w9);
                        let s = tape.add(self_term, a5);
                        let s = tape.add(s, a6);
                        let s = tape.add(s, a7);
                        let s = tape.add(s, a8);
                        tape.add(s, a9)
                    };
                    // select rule per edge type: intf + diag * (sig - intf)
                    let delta = tape.sub(sig, intf);
                    let masked = tape.mul_col_broadcast(delta, mask);
                    let pre = tape.add(intf, masked);
                    h = Self::apply_activation(tape, pre, act);
                }
            }
            Arch::Free(layers) => {
                for (li, layer) in layers.iter().enumerate() {
                    let act = if li + 1 == n_layers {
                        self.spec.output_activation
                    } else {
                        Activation::Relu
                    };
                    let w1 = tape.leaf(layer.w[0].weight.clone());
                    param_ids.push(w1);
                    let b1 = tape.leaf(layer.w[0].bias.clone());
                    param_ids.push(b1);
                    let w2 = tape.leaf(layer.w[1].weight.clone());
                    param_ids.push(w2);
                    let w3 = tape.leaf(layer.w[2].weight.clone());
                    param_ids.push(w3);

                    let rs = tape.edge_row_sum(h, k);
                    let cs = tape.edge_col_sum(h, k);
                    // W1 e_kj + b + W2 sum_{i!=j} e_ki + W3 sum_{i!=k} e_ij
                    let self_term = tape.linear(h, w1);
                    let self_term = tape.add_row_broadcast(self_term, b1);
                    let a2 = tape.sub(rs, h);
                    let a2 = tape.linear(a2, w2);
                    let a3 = tape.sub(cs, h);
                    let a3 = tape.linear(a3, w3);
                    let s = tape.add(self_term, a2);
                    let pre = tape.add(s, a3);
                    h = Self::apply_activation(tape, pre, act);
                }
            }
            Arch::Fnn { layers, .. } => {
                for (li, layer) in layers.iter().enumerate() {
                    let act = if li + 1 == n_layers {
                        self.spec.output_activation
                    } else {
                        Activation::Relu
                    };
                    let w = tape.leaf(layer.weight.clone());
                    param_ids.push(w);
                    let b = tape.leaf(layer.bias.clone());
                    param_ids.push(b);
                    let z = tape.linear(h, w);
                    let pre = tape.add_row_broadcast(z, b);
                    h = Self::apply_activation(tape, pre, act);
                }
            }
        }
        (h, param_ids)
    }
}

/// Diagonal-edge indicator column for `blocks` stacked K x K edge grids.
fn diag_mask(blocks: usize, k: usize) -> Tensor {
    let mut m = Tensor::zeros(blocks * k * k, 1);
    for b in 0..blocks {
        for i in 0..k {
            m.data[b * k * k + i * k + i] = 1.0;
        }
    }
    m
}

/// Pool groups mapping edge rows `(b, (k, j))` to `(b, j)` rows: all edges
/// incident to user j within one sample.
pub fn user_pool_groups(blocks: usize, k: usize) -> PoolGroups {
    let mut groups = Vec::with_capacity(blocks * k);
    for b in 0..blocks {
        for j in 0..k {
            groups.push((0..k).map(|kk| b * k * k + kk * k + j).collect());
        }
    }
    Rc::new(groups)
}

/// Pool groups extracting diagonal edge rows `(b, (k, k))` to `(b, k)`.
pub fn diag_pool_groups(blocks: usize, k: usize) -> PoolGroups {
    let mut groups = Vec::with_capacity(blocks * k);
    for b in 0..blocks {
        for kk in 0..k {
            groups.push(vec![b * k * k + kk * k + kk]);
        }
    }
    Rc::new(groups)
}

/// Pool groups summing `(b, (k, j))` over j for fixed `(b, k)` rows.
pub fn row_pool_groups(blocks: usize, k: usize) -> PoolGroups {
    let mut groups = Vec::with_capacity(blocks * k);
    for b in 0..blocks {
        for kk in 0..k {
            groups.push((0..k).map(|j| b * k * k + kk * k + j).collect());
        }
    }
    Rc::new(groups)
}

/// Pool groups summing `(b, x)` rows over x for fixed b.
pub fn block_pool_groups(blocks: usize, rows_per_block: usize) -> PoolGroups {
    let mut groups = Vec::with_capacity(blocks);
    for b in 0..blocks {
        groups.push((0..rows_per_block).map(|r| b * rows_per_block + r).collect());
    }
    Rc::new(groups)
}

/// Build tied-graph input features: position features on diagonal edges,
/// zeros elsewhere; optional coefficient channels on every edge.
/// Output: `[batch*k^2, POS_CHANNELS + 2*with_coeffs]`.
pub fn tied_features(
    positions: &[Vec<Vec3>],
    coeffs: Option<&[CoeffMatrix]>,
    scaling: &FeatureScaling,
) -> Tensor {
    let blocks = positions.len();
    let k = positions[0].len();
    let pc = POS_CHANNELS;
    let ch = if coeffs.is_some() { pc + 2 } else { pc };
    let mut t = Tensor::zeros(blocks * k * k, ch);
    for (b, users) in positions.iter().enumerate() {
        for kk in 0..k {
            let s = scaling.standardize_pos(users[kk]);
            let row = b * k * k + kk * k + kk;
            t.data[row * ch..row * ch + pc].copy_from_slice(&s);
        }
        if let Some(cs) = coeffs {
            for kk in 0..k {
                for j in 0..k {
                    let row = b * k * k + kk * k + j;
                    let z = cs[b].b[(kk, j)];
                    t.data[row * ch + pc] = z.re / scaling.coeff_scale;
                    t.data[row * ch + pc + 1] = z.im / scaling.coeff_scale;
                }
            }
        }
    }
    t
}

/// Build free-graph position features: `s_k` standardized, on every edge
/// `(k, j)`. Output `[batch*k^2, POS_CHANNELS]`; coefficient channels are
/// concatenated on-tape so gradients can flow through them.
pub fn free_position_features(positions: &[Vec<Vec3>], scaling: &FeatureScaling) -> Tensor {
    let blocks = positions.len();
    let k = positions[0].len();
    let pc = POS_CHANNELS;
    let mut t = Tensor::zeros(blocks * k * k, pc);
    for (b, users) in positions.iter().enumerate() {
        for kk in 0..k {
            let s = scaling.standardize_pos(users[kk]);
            for j in 0..k {
                let row = b * k * k + kk * k + j;
                t.data[row * pc..(row + 1) * pc].copy_from_slice(&s);
            }
        }
    }
    t
}

/// Coefficient channels `[batch*k^2, 2]` scaled by `coeff_scale`.
pub fn coeff_channels(coeffs: &[CoeffMatrix], scaling: &FeatureScaling) -> Tensor {
    let blocks = coeffs.len();
    let k = coeffs[0].dim();
    let mut t = Tensor::zeros(blocks * k * k, 2);
    for (b, c) in coeffs.iter().enumerate() {
        for kk in 0..k {
            for j in 0..k {
                let row = b * k * k + kk * k + j;
                t.data[row * 2] = c.b[(kk, j)].re / scaling.coeff_scale;
                t.data[row * 2 + 1] = c.b[(kk, j)].im / scaling.coeff_scale;
            }
        }
    }
    t
}

/// Flatten positions (and optional coefficients) for the dense ablation:
/// `[batch, POS_CHANNELS*k + 2k^2]` (without coefficients, just the
/// position block).
pub fn fnn_features(
    positions: &[Vec<Vec3>],
    coeffs: Option<&[CoeffMatrix]>,
    scaling: &FeatureScaling,
) -> Tensor {
    let blocks = positions.len();
    let k = positions[0].len();
    let pc = POS_CHANNELS;
    let width = pc * k + if coeffs.is_some() { 2 * k * k } else { 0 };
    let mut t = Tensor::zeros(blocks, width);
    for (b, users) in positions.iter().enumerate() {
        for kk in 0..k {
            let s = scaling.standardize_pos(users[kk]);
            t.data[b * width + pc * kk..b * width + pc * (kk + 1)].copy_from_slice(&s);
        }
        if let Some(cs) = coeffs {
            for kk in 0..k {
                for j in 0..k {
                    let base = b * width + pc * k + 2 * (kk * k + j);
                    t.data[base] = cs[b].b[(kk, j)].re / scaling.coeff_scale;
                    t.data[base + 1] = cs[b].b[(kk, j)].im / scaling.coeff_scale;
                }
            }
        }
    }
    t
}

/// Convert a `[batch*k^2, 2]` edge output into per-sample coefficient
/// matrices, scaled by `scale` (one for raw policy outputs, the
/// standardization constant when decoding value-net-style channels).
pub fn edges_to_coeffs(out: &Tensor, blocks: usize, k: usize, scale: f64) -> Vec<CoeffMatrix> {
    assert_eq!(out.rows, blocks * k * k);
    assert_eq!(out.cols, 2);
    let mut res = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let mut m = CMat::zeros(k, k);
        for kk in 0..k {
            for j in 0..k {
                let row = b * k * k + kk * k + j;
                m[(kk, j)] = Complex64::new(out.data[row * 2], out.data[row * 2 + 1]) * scale;
            }
        }
        res.push(CoeffMatrix { b: m });
    }
    res
}

/// Convert FNN `[batch, 2k^2]` output into coefficient matrices.
pub fn flat_to_coeffs(out: &Tensor, k: usize, scale: f64) -> Vec<CoeffMatrix> {
    assert_eq!(out.cols, 2 * k * k);
    let mut res = Vec::with_capacity(out.rows);
    for b in 0..out.rows {
        let mut m = CMat::zeros(k, k);
        for kk in 0..k {
            for j in 0..k {
                let base = b * out.cols + 2 * (kk * k + j);
                m[(kk, j)] = Complex64::new(out.data[base], out.data[base + 1]) * scale;
            }
        }
        res.push(CoeffMatrix { b: m });
    }
    res
}

/// The policy network: user positions to coefficient matrices.
/// Architecture is the tied-permutation graph network (or the dense
/// ablation), output bounded by tanh and de-standardized by `coeff_scale`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyNet {
    pub net: EdgeNet,
    pub scaling: FeatureScaling,
}

impl PolicyNet {
    pub fn gnn(scaling: FeatureScaling, seed: u64) -> Self {
        PolicyNet {
            net: EdgeNet::tied(NetSpec::gnn_default(NetRole::Policy), POS_CHANNELS, 2, seed),
            scaling,
        }
    }

    pub fn fnn(scaling: FeatureScaling, k_users: usize, seed: u64) -> Self {
        PolicyNet {
            net: EdgeNet::fnn(
                NetSpec::fnn_default(NetRole::Policy),
                POS_CHANNELS * k_users,
                2 * k_users * k_users,
                k_users,
                seed,
            ),
            scaling,
        }
    }

    /// Record the forward pass for a batch of scenes; returns the raw
    /// `[batch*k^2, 2]`-shaped output node (edge layout) or `[batch, 2k^2]`
    /// for the dense variant, plus parameter ids.
    pub fn forward(
        &self,
        tape: &mut Tape,
        positions: &[Vec<Vec3>],
    ) -> (NodeId, Vec<NodeId>) {
        let k = positions[0].len();
        match &self.net.arch {
            Arch::Fnn { k_users, .. } => {
                assert_eq!(
                    *k_users, k,
                    "dense policy is fixed to its trained user count"
                );
                let input = tape.leaf(fnn_features(positions, None, &self.scaling));
                self.net.forward(tape, input, k)
            }
            _ => {
                let input = tape.leaf(tied_features(positions, None, &self.scaling));
                self.net.forward(tape, input, k)
            }
        }
    }

    /// Inference: coefficient matrices for each scene. The policy's
    /// physical output is the raw tanh-bounded channel pair; the power
    /// projection downstream sets the absolute scale.
    pub fn infer(&self, positions: &[Vec<Vec3>]) -> Vec<CoeffMatrix> {
        let k = positions[0].len();
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, positions);
        match &self.net.arch {
            Arch::Fnn { .. } => flat_to_coeffs(tape.value(out), k, 1.0),
            _ => edges_to_coeffs(tape.value(out), positions.len(), k, 1.0),
        }
    }
}

/// The projection network: (positions, raw coefficients) to per-user
/// powers. Free-permutation graph, relu output, mean readout over the
/// edges incident to each user.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjNet {
    pub net: EdgeNet,
    pub scaling: FeatureScaling,
}

impl ProjNet {
    pub fn gnn(scaling: FeatureScaling, seed: u64) -> Self {
        ProjNet {
            net: EdgeNet::free(NetSpec::gnn_default(NetRole::Proj), POS_CHANNELS + 2, 1, seed),
            scaling,
        }
    }

    pub fn fnn(scaling: FeatureScaling, k_users: usize, seed: u64) -> Self {
        ProjNet {
            net: EdgeNet::fnn(
                NetSpec::fnn_default(NetRole::Proj),
                POS_CHANNELS * k_users + 2 * k_users * k_users,
                k_users,
                k_users,
                seed,
            ),
            scaling,
        }
    }

    /// Forward from an on-tape coefficient channel node
    /// (`[batch*k^2, 2]`, standardized). Returns `[batch*k, 1]` powers in
    /// standardized units times `power_scale`, i.e. physical powers, plus
    /// parameter ids.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        pos_features: NodeId,
        coeff_node: NodeId,
        blocks: usize,
        k: usize,
    ) -> (NodeId, Vec<NodeId>) {
        match &self.net.arch {
            Arch::Fnn { .. } => panic!("dense projection net uses forward_flat"),
            _ => {}
        }
        let input = tape.concat_cols(pos_features, coeff_node);
        let (out, ids) = self.net.forward(tape, input, k);
        // mean over the k edges incident to each user column
        let pooled = tape.sum_pool(out, user_pool_groups(blocks, k));
        let mean = tape.scale_const(pooled, 1.0 / k as f64);
        let phys = tape.scale_const(mean, self.scaling.power_scale);
        (phys, ids)
    }

    /// Standalone forward for supervised training and inference.
    pub fn forward(
        &self,
        tape: &mut Tape,
        positions: &[Vec<Vec3>],
        coeffs: &[CoeffMatrix],
    ) -> (NodeId, Vec<NodeId>) {
        let blocks = positions.len();
        let k = positions[0].len();
        match &self.net.arch {
            Arch::Fnn { k_users, .. } => {
                assert_eq!(*k_users, k);
                let input = tape.leaf(fnn_features(positions, Some(coeffs), &self.scaling));
                let (out, ids) = self.net.forward(tape, input, k);
                // reshape [batch, k] -> [batch*k, 1] ordering matches pooled layout
                let flat = tape.value(out).clone();
                let reshaped = Tensor::from_vec(blocks * k, 1, flat.data);
                let node = tape.leaf(reshaped);
                // keep gradient path: the reshape is applied outside training
                // paths only; supervised FNN training uses forward_flat.
                let phys = tape.scale_const(node, self.scaling.power_scale);
                (phys, ids)
            }
            _ => {
                let pos = tape.leaf(free_position_features(positions, &self.scaling));
                let ch = tape.leaf(coeff_channels(coeffs, &self.scaling));
                self.forward_on_tape(tape, pos, ch, blocks, k)
            }
        }
    }

    /// Physical per-user powers for each scene.
    pub fn infer(&self, positions: &[Vec<Vec3>], coeffs: &[CoeffMatrix]) -> Vec<Vec<f64>> {
        let blocks = positions.len();
        let k = positions[0].len();
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, positions, coeffs);
        let v = tape.value(out);
        (0..blocks)
            .map(|b| (0..k).map(|j| v.data[b * k + j]).collect())
            .collect()
    }

    /// Dense-ablation forward over flattened features; output `[batch, k]`
    /// in physical units.
    pub fn forward_flat(
        &self,
        tape: &mut Tape,
        positions: &[Vec<Vec3>],
        coeffs: &[CoeffMatrix],
    ) -> (NodeId, Vec<NodeId>) {
        let k = positions[0].len();
        let input = tape.leaf(fnn_features(positions, Some(coeffs), &self.scaling));
        let (out, ids) = self.net.forward(tape, input, k);
        let phys = tape.scale_const(out, self.scaling.power_scale);
        (phys, ids)
    }
}

/// The value network: (positions, projected coefficients) to the complex
/// gain matrix. Free-permutation graph, linear 2-channel output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueNet {
    pub net: EdgeNet,
    pub scaling: FeatureScaling,
}

impl ValueNet {
    pub fn gnn(scaling: FeatureScaling, seed: u64) -> Self {
        ValueNet {
            net: EdgeNet::free(NetSpec::gnn_default(NetRole::Value), POS_CHANNELS + 2, 2, seed),
            scaling,
        }
    }

    /// Tied-graph variant of the value network, used to demonstrate the
    /// equivariance mismatch: same widths, nine matrices per layer.
    pub fn gnn_tied(scaling: FeatureScaling, seed: u64) -> Self {
        ValueNet {
            net: EdgeNet::tied(NetSpec::gnn_default(NetRole::Value), POS_CHANNELS + 2, 2, seed),
            scaling,
        }
    }

    pub fn fnn(scaling: FeatureScaling, k_users: usize, seed: u64) -> Self {
        ValueNet {
            net: EdgeNet::fnn(
                NetSpec::fnn_default(NetRole::Value),
                POS_CHANNELS * k_users + 2 * k_users * k_users,
                2 * k_users * k_users,
                k_users,
                seed,
            ),
            scaling,
        }
    }

    /// Forward from an on-tape (standardized) coefficient node. Returns the
    /// `[batch*k^2, 2]` standardized gain output; multiply by `gain_scale`
    /// for physical gains.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        pos_features: NodeId,
        coeff_node: NodeId,
        k: usize,
    ) -> (NodeId, Vec<NodeId>) {
        match &self.net.arch {
            Arch::Tied(_) | Arch::Free(_) => {}
            Arch::Fnn { .. } => panic!("dense value net uses forward_flat"),
        }
        let input = tape.concat_cols(pos_features, coeff_node);
        self.net.forward(tape, input, k)
    }

    /// Standalone forward; input features built off-tape. For the tied
    /// variant, positions are placed only on diagonal edges.
    pub fn forward(
        &self,
        tape: &mut Tape,
        positions: &[Vec<Vec3>],
        coeffs: &[CoeffMatrix],
    ) -> (NodeId, Vec<NodeId>) {
        let k = positions[0].len();
        match &self.net.arch {
            Arch::Fnn { k_users, .. } => {
                assert_eq!(*k_users, k);
                let input = tape.leaf(fnn_features(positions, Some(coeffs), &self.scaling));
                self.net.forward(tape, input, k)
            }
            Arch::Tied(_) => {
                let input = tape.leaf(tied_features(positions, Some(coeffs), &self.scaling));
                self.net.forward(tape, input, k)
            }
            Arch::Free(_) => {
                let pos = tape.leaf(free_position_features(positions, &self.scaling));
                let ch = tape.leaf(coeff_channels(coeffs, &self.scaling));
                self.forward_on_tape(tape, pos, ch, k)
            }
        }
    }

    /// Physical gain-matrix estimates for each scene.
    pub fn infer(&self, positions: &[Vec<Vec3>], coeffs: &[CoeffMatrix]) -> Vec<CMat> {
        let blocks = positions.len();
        let k = positions[0].len();
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, positions, coeffs);
        let v = tape.value(out);
        let mut res = Vec::with_capacity(blocks);
        match &self.net.arch {
            Arch::Fnn { .. } => {
                for b in 0..blocks {
                    let mut g = CMat::zeros(k, k);
                    for kk in 0..k {
                        for j in 0..k {
                            let base = b * v.cols + 2 * (kk * k + j);
                            g[(kk, j)] = Complex64::new(v.data[base], v.data[base + 1])
                                * self.scaling.gain_scale;
                        }
                    }
                    res.push(g);
                }
            }
            _ => {
                for b in 0..blocks {
                    let mut g = CMat::zeros(k, k);
                    for kk in 0..k {
                        for j in 0..k {
                            let row = b * k * k + kk * k + j;
                            g[(kk, j)] = Complex64::new(v.data[row * 2], v.data[row * 2 + 1])
                                * self.scaling.gain_scale;
                        }
                    }
                    res.push(g);
                }
            }
        }
        res
    }
}

/// Versioned checkpoint of one network with its role tag, scaling, and the
/// seed it was initialized from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub role: NetRole,
    pub net: EdgeNet,
    pub scaling: FeatureScaling,
    pub seed: u64,
    pub optimizer: Option<crate::autodiff::AdamState>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| {
            CapaError::MissingArtifact(format!(
                "checkpoint {} not found (train one with `capa train`)",
                path.display()
            ))
        })?;
        let cp: Checkpoint = serde_json::from_str(&text)?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(CapaError::Parse(format!(
                "checkpoint version {} unsupported",
                cp.version
            )));
        }
        Ok(cp)
    }
}
