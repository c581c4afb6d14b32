//! The three-network learning stack: dataset generation, supervised label
//! generation through the Gram route, the differentiable end-to-end
//! composition (policy -> projection -> value -> rate objective), and the
//! three training schedules (phased, alternative, phased + alternative).
//!
//! Labels are exact to grid accuracy: each scene's channel Gram matrix is
//! assembled once on the label grid, after which every power and gain label
//! is closed-form algebra. The value/projection networks exist to make the
//! same quantities differentiable inside the policy's compute graph; an
//! oracle mode can swap them for exact differentiable Gram algebra as a
//! ceiling baseline and debugging tool.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, NodeId, Tape, Tensor, UpdateRule};
use crate::beamfield::{gain_matrix, power_vector, project_power, spectral_efficiency, CoeffMatrix};
use crate::error::{CapaError, Result};
use crate::gnn::{
    block_pool_groups, diag_pool_groups, fnn_features, free_position_features, row_pool_groups,
    tied_features, Arch, FeatureScaling, PolicyNet, ProjNet, ValueNet,
};
use crate::linalg::CMat;
use crate::physics::{Scenario, Vec3};
use crate::quadrature::{channel_gram, gauss_legendre_grid, GramMatrix, QuadratureGrid};

/// Axis-aligned user deployment region.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegionBounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl RegionBounds {
    /// The default square region at 30 m boresight distance.
    pub fn default_region() -> Self {
        RegionBounds { lo: [-1.0, -1.0, 30.0], hi: [1.0, 1.0, 30.0] }
    }
}

/// Which split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// A set of scenes sharing one geometry: per-sample user positions plus the
/// scene template they instantiate.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub base: Scenario,
    pub positions: Vec<Vec<Vec3>>,
    pub split: SplitTag,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn scene(&self, i: usize) -> Scenario {
        let mut s = self.base.clone();
        s.users = self.positions[i].clone();
        s
    }
}

/// Draw `count` scenes of `k` users i.i.d. uniform in `region`,
/// deterministically from `seed`. Split tags only label the dataset;
/// disjointness across splits comes from using distinct seeds
/// (see [`split_seeds`]).
pub fn generate_scenarios(
    count: usize,
    region: RegionBounds,
    k: usize,
    base: &Scenario,
    split: SplitTag,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(CapaError::Argument("scenario count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(count);
    for _ in 0..count {
        let users: Vec<Vec3> = (0..k)
            .map(|_| {
                Vec3::new(
                    sample_coord(&mut rng, region.lo[0], region.hi[0]),
                    sample_coord(&mut rng, region.lo[1], region.hi[1]),
                    sample_coord(&mut rng, region.lo[2], region.hi[2]),
                )
            })
            .collect();
        positions.push(users);
    }
    Ok(Dataset { base: base.clone(), positions, split, seed })
}

fn sample_coord(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Deterministic sub-seeds for the train/val/test splits of a run seed.
pub fn split_seeds(seed: u64) -> (u64, u64, u64) {
    (
        seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1),
        seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(2),
        seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(3),
    )
}

/// A dataset with its per-scene Gram matrices precomputed on the label grid.
pub struct PreparedSet {
    pub data: Dataset,
    pub grams: Vec<GramMatrix>,
}

impl PreparedSet {
    pub fn prepare(data: Dataset, grid: &QuadratureGrid) -> Result<Self> {
        let mut grams = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            grams.push(channel_gram(&data.scene(i), grid)?);
        }
        Ok(PreparedSet { data, grams })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Exact (to grid accuracy) per-user power labels via the Gram route.
pub fn proj_labels(gram: &GramMatrix, b: &CoeffMatrix) -> Result<Vec<f64>> {
    power_vector(gram, b)
}

/// Exact (to grid accuracy) gain-matrix labels via the Gram route.
pub fn value_labels(gram: &GramMatrix, b_bar: &CoeffMatrix) -> Result<CMat> {
    Ok(gain_matrix(gram, b_bar)?.g)
}

/// Training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Phased,
    Alternative,
    PhasedPlusAlternative,
}

/// How the best checkpoint is selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointRule {
    /// Keep the parameters with the lowest epoch training loss (the
    /// literal procedure of the alternative-training algorithm).
    TrainLoss,
    /// Keep the parameters with the best exact-quadrature validation SE,
    /// evaluated every `val_every` epochs.
    ValidationSe,
}

/// Complete training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_epochs: usize,
    /// Pretraining epochs for the value network.
    pub pretrain_epochs: usize,
    /// Pretraining epochs for the projection network (cheap per epoch and
    /// trained at a 10x smaller rate, so it gets more of them).
    pub pretrain_epochs_proj: usize,
    pub pretrain_samples: usize,
    pub batch_size: usize,
    pub label_grid: (usize, usize),
    pub schedule: Schedule,
    pub seed: u64,
    pub update_rule: UpdateRule,
    pub val_every: usize,
    pub checkpoint_rule: CheckpointRule,
    /// Dense-ablation variant of all three networks.
    pub use_fnn: bool,
    /// Replace projection/value networks with exact differentiable Gram
    /// algebra inside the policy's graph (ceiling baseline).
    pub oracle_mode: bool,
    /// Learning-rate overrides; `None` uses each network's spec value.
    pub lr_policy: Option<f64>,
    pub lr_proj: Option<f64>,
    pub lr_value: Option<f64>,
}

impl TrainConfig {
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            n_epochs: 60,
            pretrain_epochs: 40,
            pretrain_epochs_proj: 240,
            pretrain_samples: 4000,
            batch_size: 128,
            label_grid: (32, 32),
            schedule: Schedule::PhasedPlusAlternative,
            seed,
            update_rule: UpdateRule::Adam,
            val_every: 10,
            checkpoint_rule: CheckpointRule::ValidationSe,
            use_fnn: false,
            oracle_mode: false,
            lr_policy: None,
            lr_proj: None,
            lr_value: None,
        }
    }
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub policy_loss: f64,
    pub proj_mse: f64,
    pub value_mse: f64,
    /// Exact validation SE when evaluated this epoch.
    pub val_se: Option<f64>,
    pub wall_time_s: f64,
}

/// A trained triple with its training history.
pub struct TrainedTriple {
    pub policy: PolicyNet,
    pub proj: ProjNet,
    pub value: ValueNet,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub config: TrainConfig,
}

/// Mutable training state bundling the nets and their optimizers.
#[derive(Clone)]
pub struct Trainer {
    pub policy: PolicyNet,
    pub proj: ProjNet,
    pub value: ValueNet,
    opt_policy: AdamState,
    opt_proj: AdamState,
    opt_value: AdamState,
    pub k_users: usize,
    pub zeta: f64,
    pub p_max: f64,
}

/// Numerical floor for the summed power estimate inside the projection,
/// as a fraction of the nominal raw-output total power `K^2 q0`. It bounds
/// the projection blow-up when the power estimate collapses while biasing
/// healthy estimates by less than 1e-4 relative.
const PROJECTION_EPS_REL: f64 = 1e-4;

/// Cap on the projection scale, expressed through the smallest credible
/// total power as a fraction of the nominal raw-output power `K^2 q0`.
/// Raw outputs with mean channel amplitude down to ~6% of the tanh range
/// stay uncapped; anything smaller is a degenerate estimate. The cap
/// closes an exploit of the learned composition: with an underestimating
/// power net, inflating the projection scale pushes the predicted SINRs
/// toward their interference-limited ceiling, so the policy would be
/// rewarded for steering into the power net's blind spots near B = 0.
const PROJECTION_MIN_POWER_REL: f64 = 4e-3;

/// Global-norm clip for policy gradients.
const POLICY_GRAD_CLIP: f64 = 5.0;

impl Trainer {
    pub fn new(
        scaling: FeatureScaling,
        k_users: usize,
        zeta: f64,
        p_max: f64,
        cfg: &TrainConfig,
    ) -> Self {
        let seed = cfg.seed;
        let (policy, proj, value) = if cfg.use_fnn {
            (
                PolicyNet::fnn(scaling.clone(), k_users, seed.wrapping_add(11)),
                ProjNet::fnn(proj_scaling(&scaling), k_users, seed.wrapping_add(12)),
                ValueNet::fnn(scaling.clone(), k_users, seed.wrapping_add(13)),
            )
        } else {
            (
                PolicyNet::gnn(scaling.clone(), seed.wrapping_add(11)),
                ProjNet::gnn(proj_scaling(&scaling), seed.wrapping_add(12)),
                ValueNet::gnn(scaling.clone(), seed.wrapping_add(13)),
            )
        };
        let opt_policy = AdamState::new(
            cfg.update_rule,
            cfg.lr_policy.unwrap_or(policy.net.spec.learning_rate),
            &policy.net.param_shapes(),
        );
        let opt_proj = AdamState::new(
            cfg.update_rule,
            cfg.lr_proj.unwrap_or(proj.net.spec.learning_rate),
            &proj.net.param_shapes(),
        );
        let opt_value = AdamState::new(
            cfg.update_rule,
            cfg.lr_value.unwrap_or(value.net.spec.learning_rate),
            &value.net.param_shapes(),
        );
        Trainer {
            policy,
            proj,
            value,
            opt_policy,
            opt_proj,
            opt_value,
            k_users,
            zeta,
            p_max,
        }
    }

    /// One supervised step of the projection network on a batch; returns
    /// the standardized MSE loss.
    pub fn proj_supervised_step(
        &mut self,
        positions: &[Vec<Vec3>],
        coeffs: &[CoeffMatrix],
        labels: &[Vec<f64>],
    ) -> f64 {
        let blocks = positions.len();
        let k = self.k_users;
        let s_p = self.proj.scaling.power_scale;
        let mut tape = Tape::new();
        let (p_hat, ids) = match &self.proj.net.arch {
            Arch::Fnn { .. } => {
                let (out, ids) = self.proj.forward_flat(&mut tape, positions, coeffs);
                (tape.reshape(out, blocks * k, 1), ids)
            }
            _ => self.proj.forward(&mut tape, positions, coeffs),
        };
        // standardized residual: (p_hat - p) / s_p
        let mut label_t = Tensor::zeros(blocks * k, 1);
        for (b, lab) in labels.iter().enumerate() {
            for j in 0..k {
                label_t.data[b * k + j] = lab[j];
            }
        }
        let lab = tape.leaf(label_t);
        let diff = tape.sub(p_hat, lab);
        let diff = tape.scale_const(diff, 1.0 / s_p);
        let sq = tape.square(diff);
        let total = tape.sum_all(sq);
        let loss = tape.scale_const(total, 1.0 / blocks as f64);
        let loss_val = tape.value(loss).data[0];
        let grads = tape.backward(loss);
        let shapes = self.proj.net.param_shapes();
        let g: Vec<Tensor> = ids
            .iter()
            .zip(shapes.iter())
            .map(|(&id, &shape)| grads.get_or_zeros(id, shape))
            .collect();
        self.opt_proj.step(&mut self.proj.net.params_mut(), &g);
        loss_val
    }

    /// One supervised step of the value network on a batch; returns the
    /// standardized MSE loss (both complex channels).
    pub fn value_supervised_step(
        &mut self,
        positions: &[Vec<Vec3>],
        coeffs: &[CoeffMatrix],
        labels: &[CMat],
    ) -> f64 {
        let blocks = positions.len();
        let k = self.k_users;
        let s_g = self.value.scaling.gain_scale;
        let mut tape = Tape::new();
        let (g_std, ids) = match &self.value.net.arch {
            Arch::Fnn { .. } => {
                let (out, ids) = self.value.forward(&mut tape, positions, coeffs);
                (tape.reshape(out, blocks * k * k, 2), ids)
            }
            _ => self.value.forward(&mut tape, positions, coeffs),
        };
        let mut label_t = Tensor::zeros(blocks * k * k, 2);
        for (b, lab) in labels.iter().enumerate() {
            for kk in 0..k {
                for j in 0..k {
                    let row = b * k * k + kk * k + j;
                    label_t.data[row * 2] = lab[(kk, j)].re / s_g;
                    label_t.data[row * 2 + 1] = lab[(kk, j)].im / s_g;
                }
            }
        }
        let lab = tape.leaf(label_t);
        let diff = tape.sub(g_std, lab);
        let sq = tape.square(diff);
        let total = tape.sum_all(sq);
        let loss = tape.scale_const(total, 1.0 / blocks as f64);
        let loss_val = tape.value(loss).data[0];
        let grads = tape.backward(loss);
        let shapes = self.value.net.param_shapes();
        let g: Vec<Tensor> = ids
            .iter()
            .zip(shapes.iter())
            .map(|(&id, &shape)| grads.get_or_zeros(id, shape))
            .collect();
        self.opt_value.step(&mut self.value.net.params_mut(), &g);
        loss_val
    }

    /// Record the full differentiable composition for a batch and return
    /// the policy-loss node plus the policy parameter ids.
    /// `grams` enables oracle mode (exact Gram algebra instead of the
    /// projection/value networks); pass `None` to use the trained networks.
    pub fn policy_loss_tape(
        &self,
        tape: &mut Tape,
        positions: &[Vec<Vec3>],
        grams: Option<&[&GramMatrix]>,
    ) -> (NodeId, Vec<NodeId>) {
        let blocks = positions.len();
        let k = self.k_users;

        // PolicyNet forward: edge coefficient channels in the tanh range
        let (b_chan, policy_ids) = match &self.policy.net.arch {
            Arch::Fnn { .. } => {
                let input = tape.leaf(fnn_features(positions, None, &self.policy.scaling));
                let (out, ids) = self.policy.net.forward(tape, input, k);
                (tape.reshape(out, blocks * k * k, 2), ids)
            }
            _ => {
                let input = tape.leaf(tied_features(positions, None, &self.policy.scaling));
                self.policy.net.forward(tape, input, k)
            }
        };

        let (scale_node, g_mag, zeta_eff) = match grams {
            Some(grams) => {
                // Oracle mode: exact powers and gains through constant Gram
                // matrices, one complex matmul per sample.
                let mut p_cols = Vec::with_capacity(blocks);
                let mut mag_rows = Vec::with_capacity(blocks);
                let mut bbar_parts: Option<NodeId> = None;
                // first the exact raw powers to form the projection scale
                for (b, gram) in grams.iter().enumerate() {
                    let rows = b * k * k;
                    let sample = tape.slice_rows_helper(b_chan, rows, rows + k * k);
                    let br = tape.slice_cols(sample, 0, 1);
                    let bi = tape.slice_cols(sample, 1, 2);
                    let br = tape.reshape(br, k, k);
                    let bi = tape.reshape(bi, k, k);
                    let (qr, qi) = gram_leaves(tape, gram);
                    let (gr, gi) = tape.complex_matmul((qr, qi), (br, bi));
                    // p_j = sum_k [br o gr + bi o gi]_(k,j)
                    let prr = tape.mul(br, gr);
                    let pii = tape.mul(bi, gi);
                    let psum = tape.add(prr, pii);
                    let flat = tape.reshape(psum, k * k, 1);
                    let pooled = tape.sum_pool(flat, crate::gnn::user_pool_groups(1, k));
                    p_cols.push(pooled);
                    let _ = &mut bbar_parts;
                    mag_rows.push((br, bi, qr, qi));
                }
                // stack powers: [blocks*k, 1]
                let p_all = stack_rows(tape, &p_cols);
                let p_sum = tape.sum_pool(p_all, block_pool_groups(blocks, k));
                let scale = self.projection_scale(tape, p_sum, k); // [blocks,1]

                // now exact gains of the projected coefficients, per sample
                let mut mags = Vec::with_capacity(blocks);
                for (b, (br, bi, qr, qi)) in mag_rows.into_iter().enumerate() {
                    let s_b = tape.slice_rows_helper(scale, b, b + 1); // [1,1]
                    let br_s = tape.mul_block_scalar(br, s_b, k);
                    let bi_s = tape.mul_block_scalar(bi, s_b, k);
                    let (gr, gi) = tape.complex_matmul((qr, qi), (br_s, bi_s));
                    let gr2 = tape.square(gr);
                    let gi2 = tape.square(gi);
                    let mag = tape.add(gr2, gi2); // [k,k] |g|^2
                    mags.push(tape.reshape(mag, k * k, 1));
                }
                let g_mag = stack_rows(tape, &mags); // [blocks*k^2, 1]
                (scale, g_mag, self.zeta)
            }
            None => {
                // ProjNet estimate of the raw powers
                let pos_free = tape.leaf(free_position_features(positions, &self.proj.scaling));
                let (p_hat, _) = match &self.proj.net.arch {
                    Arch::Fnn { .. } => {
                        // dense path: flatten position + coefficient features
                        let pos_flat =
                            tape.leaf(fnn_features(positions, None, &self.proj.scaling));
                        let b_flat = tape.reshape(b_chan, blocks, 2 * k * k);
                        let input = tape.concat_cols(pos_flat, b_flat);
                        let (out, ids) = self.proj.net.forward(tape, input, k);
                        let phys = tape.scale_const(out, self.proj.scaling.power_scale);
                        (tape.reshape(phys, blocks * k, 1), ids)
                    }
                    _ => {
                        // coefficient channels enter in raw units
                        // (the projection net's coeff_scale is one)
                        self.proj
                            .forward_on_tape(tape, pos_free, b_chan, blocks, k)
                    }
                };
                // projection scale per sample
                let p_sum = tape.sum_pool(p_hat, block_pool_groups(blocks, k));
                let scale = self.projection_scale(tape, p_sum, k); // [blocks, 1]

                // projected coefficients, standardized for the value net
                let bbar = tape.mul_block_scalar(b_chan, scale, k * k);
                let bbar_std =
                    tape.scale_const(bbar, 1.0 / self.value.scaling.coeff_scale);

                let (g_std, _) = match &self.value.net.arch {
                    Arch::Fnn { .. } => {
                        let pos_flat =
                            tape.leaf(fnn_features(positions, None, &self.value.scaling));
                        let b_flat = tape.reshape(bbar_std, blocks, 2 * k * k);
                        let input = tape.concat_cols(pos_flat, b_flat);
                        let (out, ids) = self.value.net.forward(tape, input, k);
                        (tape.reshape(out, blocks * k * k, 2), ids)
                    }
                    _ => {
                        let pos_val =
                            tape.leaf(free_position_features(positions, &self.value.scaling));
                        self.value.forward_on_tape(tape, pos_val, bbar_std, k)
                    }
                };
                // |g|^2 per edge, in standardized units
                let gr = tape.slice_cols(g_std, 0, 1);
                let gi = tape.slice_cols(g_std, 1, 2);
                let gr2 = tape.square(gr);
                let gi2 = tape.square(gi);
                let g_mag = tape.add(gr2, gi2);
                let s_g = self.value.scaling.gain_scale;
                (scale, g_mag, self.zeta * s_g * s_g)
            }
        };
        let _ = scale_node;

        // SINR and negative mean rate
        let sig = tape.sum_pool(g_mag, diag_pool_groups(blocks, k));
        let rowsum = tape.sum_pool(g_mag, row_pool_groups(blocks, k));
        let intf = tape.sub(rowsum, sig);
        let sig_s = tape.scale_const(sig, zeta_eff);
        let intf_s = tape.scale_const(intf, zeta_eff);
        let den = tape.add_const(intf_s, 1.0);
        let gamma = tape.div(sig_s, den);
        let rate = tape.log2_one_plus(gamma);
        let total = tape.sum_all(rate);
        let loss = tape.scale_const(total, -1.0 / blocks as f64);
        (loss, policy_ids)
    }

    /// Largest projection scale the composition will emit; the same bound
    /// guards the deployed projection.
    pub fn scale_cap(&self) -> f64 {
        let q0 = self.proj.scaling.power_scale / self.k_users as f64;
        let floor = PROJECTION_MIN_POWER_REL * (self.k_users * self.k_users) as f64 * q0;
        (self.p_max / floor).sqrt()
    }

    /// On-tape guarded projection scale: `min(sqrt(p_max / (sum + eps)),
    /// cap)`, with the min realized as `cap - relu(cap - x)` so gradients
    /// vanish on the capped branch.
    fn projection_scale(&self, tape: &mut Tape, p_sum: NodeId, k: usize) -> NodeId {
        let eps = PROJECTION_EPS_REL * k as f64 * self.proj.scaling.power_scale;
        let p_eps = tape.add_const(p_sum, eps);
        let inv = tape.recip(p_eps);
        let ratio = tape.scale_const(inv, self.p_max);
        let raw = tape.sqrt(ratio);
        let cap = self.scale_cap();
        let neg = tape.scale_const(raw, -1.0);
        let gap = tape.add_const(neg, cap); // cap - x
        let gap = tape.relu(gap);
        let neg_gap = tape.scale_const(gap, -1.0);
        tape.add_const(neg_gap, cap) // cap - relu(cap - x) = min(x, cap)
    }

    /// One policy update on a batch; returns the policy loss.
    pub fn policy_step(&mut self, positions: &[Vec<Vec3>], grams: Option<&[&GramMatrix]>) -> f64 {
        let mut tape = Tape::new();
        let (loss, policy_ids) = self.policy_loss_tape(&mut tape, positions, grams);
        let loss_val = tape.value(loss).data[0];
        let grads = tape.backward(loss);
        let shapes = self.policy.net.param_shapes();
        let mut g: Vec<Tensor> = policy_ids
            .iter()
            .zip(shapes.iter())
            .map(|(&id, &shape)| grads.get_or_zeros(id, shape))
            .collect();
        // global-norm clip
        let total: f64 = g.iter().map(|t| t.data.iter().map(|v| v * v).sum::<f64>()).sum();
        let norm = total.sqrt();
        if norm > POLICY_GRAD_CLIP {
            let factor = POLICY_GRAD_CLIP / norm;
            for t in g.iter_mut() {
                for v in t.data.iter_mut() {
                    *v *= factor;
                }
            }
        }
        self.opt_policy.step(&mut self.policy.net.params_mut(), &g);
        loss_val
    }

    /// Policy loss of a batch without updating (used for checkpoint
    /// bookkeeping).
    pub fn policy_loss_eval(&self, positions: &[Vec<Vec3>], grams: Option<&[&GramMatrix]>) -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = self.policy_loss_tape(&mut tape, positions, grams);
        tape.value(loss).data[0]
    }
}

/// The projection net standardizes coefficients with unit scale: it is
/// always queried at raw tanh-range outputs.
fn proj_scaling(s: &FeatureScaling) -> FeatureScaling {
    let mut out = s.clone();
    out.coeff_scale = 1.0;
    out
}

fn gram_leaves(tape: &mut Tape, gram: &GramMatrix) -> (NodeId, NodeId) {
    let k = gram.dim();
    let mut qr = Tensor::zeros(k, k);
    let mut qi = Tensor::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            qr.data[i * k + j] = gram.q[(i, j)].re;
            qi.data[i * k + j] = gram.q[(i, j)].im;
        }
    }
    (tape.leaf(qr), tape.leaf(qi))
}

/// Stack a list of equal-width row blocks into one tensor.
fn stack_rows(tape: &mut Tape, parts: &[NodeId]) -> NodeId {
    assert!(!parts.is_empty());
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.concat_rows_helper(acc, p);
    }
    acc
}

impl Tape {
    /// Rows `[start, end)` of x as a new node (thin wrapper over SumPool
    /// with singleton groups, which keeps the backward pass trivial).
    pub fn slice_rows_helper(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let groups: crate::autodiff::PoolGroups =
            std::rc::Rc::new((start..end).map(|r| vec![r]).collect());
        self.sum_pool(x, groups)
    }

    /// Vertical concatenation via transpose-free copy: implemented as
    /// sum-pool of a zero-padded union is wasteful, so this uses the
    /// dedicated concat-columns op on reshaped views.
    pub fn concat_rows_helper(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        assert_eq!(ac, bc, "row concat width mismatch");
        let a_flat = self.reshape(a, 1, ar * ac);
        let b_flat = self.reshape(b, 1, br * bc);
        let joined = self.concat_cols(a_flat, b_flat);
        self.reshape(joined, ar + br, ac)
    }
}

/// Random coefficient matrices with entries uniform in the tanh range.
pub fn random_coeff(k: usize, rng: &mut ChaCha8Rng) -> CoeffMatrix {
    let mut m = CMat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            m[(i, j)] = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
    }
    CoeffMatrix { b: m }
}

/// Pretraining sample: a scene index, a raw coefficient draw, and its exact
/// boundary projection.
pub struct PretrainSample {
    pub scene_idx: usize,
    pub raw: CoeffMatrix,
    pub projected: CoeffMatrix,
}

/// Generate the random-coefficient pretraining set over a prepared scene
/// set: raw draws are uniform per channel; each is paired with its exact
/// projection onto the power boundary.
pub fn pretrain_samples(
    set: &PreparedSet,
    count: usize,
    seed: u64,
) -> Result<Vec<PretrainSample>> {
    let k = set.data.base.users.len().max(
        set.data
            .positions
            .first()
            .map(|p| p.len())
            .unwrap_or(0),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let scene_idx = i % set.len();
        let raw = random_coeff(k, &mut rng);
        let p = power_vector(&set.grams[scene_idx], &raw)?;
        let projected = project_power(&raw, &p, set.data.base.p_max)?;
        out.push(PretrainSample { scene_idx, raw, projected });
    }
    Ok(out)
}

/// Exact-quadrature evaluation of a trained policy on a scene set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_idx: usize,
    /// SE with the exact-Gram projection (reporting truth).
    pub se_exact: f64,
    /// SE with the deployment projection (powers from the projection net).
    pub se_deployed: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_se_exact: f64,
    pub std_se_exact: f64,
    pub mean_se_deployed: f64,
    pub records: Vec<EvalRecord>,
}

/// Evaluate a policy on every scene of a prepared set: coefficients from
/// the policy, powers from the exact Gram (and, separately, from the
/// projection net for the deployment variant), SE by exact Gram algebra.
/// The value network is never invoked.
pub fn evaluate_policy(
    policy: &PolicyNet,
    proj: &ProjNet,
    set: &PreparedSet,
) -> Result<EvalSummary> {
    let mut records = Vec::with_capacity(set.len());
    let zeta = set.data.base.zeta;
    let p_max = set.data.base.p_max;
    for i in 0..set.len() {
        let positions = vec![set.data.positions[i].clone()];
        let b = policy.infer(&positions).remove(0);
        let gram = &set.grams[i];

        let p_exact = power_vector(gram, &b)?;
        let total: f64 = p_exact.iter().sum();
        if !(total > 0.0) {
            records.push(EvalRecord { scene_idx: i, se_exact: 0.0, se_deployed: 0.0, degenerate: true });
            continue;
        }
        let b_bar = project_power(&b, &p_exact, p_max)?;
        let se_exact = spectral_efficiency(&gain_matrix(gram, &b_bar)?, zeta);

        let p_hat = proj.infer(&positions, &[b.clone()]).remove(0);
        let hat_total: f64 = p_hat.iter().sum();
        let se_deployed = if hat_total > 0.0 {
            let b_dep = project_power(&b, &p_hat, p_max)?;
            spectral_efficiency(&gain_matrix(gram, &b_dep)?, zeta)
        } else {
            0.0
        };
        records.push(EvalRecord { scene_idx: i, se_exact, se_deployed, degenerate: false });
    }
    let n = records.len().max(1) as f64;
    let mean = records.iter().map(|r| r.se_exact).sum::<f64>() / n;
    let var = records.iter().map(|r| (r.se_exact - mean).powi(2)).sum::<f64>() / n;
    let mean_dep = records.iter().map(|r| r.se_deployed).sum::<f64>() / n;
    Ok(EvalSummary {
        mean_se_exact: mean,
        std_se_exact: var.sqrt(),
        mean_se_deployed: mean_dep,
        records,
    })
}

/// Shuffled batch index ranges for one epoch, deterministic in the seed.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Snapshot of the three networks for checkpoint bookkeeping.
struct TripleSnapshot {
    policy: PolicyNet,
    proj: ProjNet,
    value: ValueNet,
    epoch: usize,
}

/// Shared state for the schedule drivers.
pub struct TrainDriver<'a> {
    pub cfg: TrainConfig,
    pub train: &'a PreparedSet,
    pub val: &'a PreparedSet,
    pub trainer: Trainer,
    metrics: Vec<EpochMetrics>,
    best: Option<(f64, TripleSnapshot)>,
}

impl<'a> TrainDriver<'a> {
    /// Continue from an existing trainer state (e.g. shared pretraining).
    pub fn from_trainer(
        cfg: TrainConfig,
        train: &'a PreparedSet,
        val: &'a PreparedSet,
        trainer: Trainer,
    ) -> Self {
        TrainDriver { cfg, train, val, trainer, metrics: Vec::new(), best: None }
    }

    pub fn new(cfg: TrainConfig, train: &'a PreparedSet, val: &'a PreparedSet) -> Self {
        let k = train.data.positions[0].len();
        let base = &train.data.base;
        let region = RegionBounds::default_region();
        let scaling = FeatureScaling::from_region(
            region.lo,
            region.hi,
            base.aperture.area(),
            k,
            base.p_max,
        );
        let trainer = Trainer::new(scaling, k, base.zeta, base.p_max, &cfg);
        TrainDriver { cfg, train, val, trainer, metrics: Vec::new(), best: None }
    }

    /// Supervised pretraining of the projection and value networks on
    /// random-coefficient samples.
    pub fn pretrain(&mut self) -> Result<()> {
        let samples = pretrain_samples(
            self.train,
            self.cfg.pretrain_samples,
            self.cfg.seed.wrapping_add(1000),
        )?;
        // labels are reused every epoch; compute them once
        let p_labels: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| proj_labels(&self.train.grams[s.scene_idx], &s.raw))
            .collect::<Result<_>>()?;
        let g_labels: Vec<CMat> = samples
            .iter()
            .map(|s| value_labels(&self.train.grams[s.scene_idx], &s.projected))
            .collect::<Result<_>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(2000));
        for _epoch in 0..self.cfg.pretrain_epochs_proj {
            let batches = epoch_batches(samples.len(), self.cfg.batch_size, &mut rng);
            for batch in &batches {
                let positions: Vec<Vec<Vec3>> = batch
                    .iter()
                    .map(|&i| self.train.data.positions[samples[i].scene_idx].clone())
                    .collect();
                let raw: Vec<CoeffMatrix> =
                    batch.iter().map(|&i| samples[i].raw.clone()).collect();
                let labels: Vec<Vec<f64>> =
                    batch.iter().map(|&i| p_labels[i].clone()).collect();
                self.trainer.proj_supervised_step(&positions, &raw, &labels);
            }
        }
        for _epoch in 0..self.cfg.pretrain_epochs {
            let batches = epoch_batches(samples.len(), self.cfg.batch_size, &mut rng);
            for batch in &batches {
                let positions: Vec<Vec<Vec3>> = batch
                    .iter()
                    .map(|&i| self.train.data.positions[samples[i].scene_idx].clone())
                    .collect();
                let projected: Vec<CoeffMatrix> =
                    batch.iter().map(|&i| samples[i].projected.clone()).collect();
                let labels: Vec<CMat> = batch.iter().map(|&i| g_labels[i].clone()).collect();
                self.trainer.value_supervised_step(&positions, &projected, &labels);
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<f64> {
        Ok(evaluate_policy(&self.trainer.policy, &self.trainer.proj, self.val)?.mean_se_exact)
    }

    fn consider_checkpoint(&mut self, epoch: usize, score: f64, higher_is_better: bool) {
        let better = match &self.best {
            None => true,
            Some((best, _)) => {
                if higher_is_better {
                    score > *best
                } else {
                    score < *best
                }
            }
        };
        if better {
            self.best = Some((
                score,
                TripleSnapshot {
                    policy: self.trainer.policy.clone(),
                    proj: self.trainer.proj.clone(),
                    value: self.trainer.value.clone(),
                    epoch,
                },
            ));
        }
    }

    /// Policy-only training epochs with frozen projection/value networks.
    pub fn run_policy_only(&mut self, epochs: usize) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(3000));
        let n = self.train.len();
        for e in 0..epochs {
            let t0 = std::time::Instant::now();
            let batches = epoch_batches(n, self.cfg.batch_size, &mut rng);
            let mut loss_acc = 0.0;
            for batch in &batches {
                let positions: Vec<Vec<Vec3>> = batch
                    .iter()
                    .map(|&i| self.train.data.positions[i].clone())
                    .collect();
                let grams: Option<Vec<&GramMatrix>> = if self.cfg.oracle_mode {
                    Some(batch.iter().map(|&i| &self.train.grams[i]).collect())
                } else {
                    None
                };
                loss_acc += self.trainer.policy_step(&positions, grams.as_deref());
            }
            let policy_loss = loss_acc / batches.len() as f64;
            self.finish_epoch(e, policy_loss, f64::NAN, f64::NAN, t0)?;
        }
        Ok(())
    }

    /// Alternative epochs. Within each epoch the three updates run in
    /// algorithm order on every batch: a policy step, then a projection-net
    /// supervised step on that batch's fresh policy outputs, then a
    /// value-net step on their deployed projections. Interleaving at batch
    /// granularity keeps the approximators at most one update stale, which
    /// is what lets the policy's loss surface stay trustworthy while it
    /// moves.
    pub fn run_alternative(&mut self, epochs: usize, epoch_offset: usize) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(4000));
        let n = self.train.len();
        for e in 0..epochs {
            let t0 = std::time::Instant::now();
            let batches = epoch_batches(n, self.cfg.batch_size, &mut rng);
            let mut loss_acc = 0.0;
            let mut proj_acc = 0.0;
            let mut value_acc = 0.0;
            for batch in &batches {
                let positions: Vec<Vec<Vec3>> = batch
                    .iter()
                    .map(|&i| self.train.data.positions[i].clone())
                    .collect();
                // (i) policy update through the current approximators
                let grams: Option<Vec<&GramMatrix>> = if self.cfg.oracle_mode {
                    Some(batch.iter().map(|&i| &self.train.grams[i]).collect())
                } else {
                    None
                };
                loss_acc += self.trainer.policy_step(&positions, grams.as_deref());

                // (ii) projection net on this batch's fresh policy outputs
                let coeffs = self.trainer.policy.infer(&positions);
                let labels: Vec<Vec<f64>> = batch
                    .iter()
                    .zip(coeffs.iter())
                    .map(|(&i, b)| proj_labels(&self.train.grams[i], b))
                    .collect::<Result<_>>()?;
                proj_acc += self.trainer.proj_supervised_step(&positions, &coeffs, &labels);

                // (iii) value net on the deployed projections (same scale
                // guard as the differentiable path)
                let p_hats = self.trainer.proj.infer(&positions, &coeffs);
                let cap = self.trainer.scale_cap();
                let mut projected = Vec::with_capacity(coeffs.len());
                for (b, p_hat) in coeffs.iter().zip(p_hats.iter()) {
                    let total: f64 = p_hat.iter().sum::<f64>().max(0.0);
                    let scale = (self.trainer.p_max
                        / (total
                            + PROJECTION_EPS_REL
                                * self.trainer.k_users as f64
                                * self.trainer.proj.scaling.power_scale))
                        .sqrt()
                        .min(cap);
                    projected.push(CoeffMatrix {
                        b: b.b.scale(Complex64::new(scale, 0.0)),
                    });
                }
                let g_labels: Vec<CMat> = batch
                    .iter()
                    .zip(projected.iter())
                    .map(|(&i, bb)| value_labels(&self.train.grams[i], bb))
                    .collect::<Result<_>>()?;
                value_acc += self
                    .trainer
                    .value_supervised_step(&positions, &projected, &g_labels);
            }
            let nb = batches.len() as f64;
            self.finish_epoch(epoch_offset + e, loss_acc / nb, proj_acc / nb, value_acc / nb, t0)?;
        }
        Ok(())
    }

    fn finish_epoch(
        &mut self,
        epoch: usize,
        policy_loss: f64,
        proj_mse: f64,
        value_mse: f64,
        t0: std::time::Instant,
    ) -> Result<()> {
        if !policy_loss.is_finite() {
            return Err(CapaError::Numeric(format!(
                "policy loss diverged at epoch {epoch}: {policy_loss}"
            )));
        }
        let val_se = if self.cfg.val_every > 0
            && (epoch % self.cfg.val_every == 0 || epoch + 1 == self.cfg.n_epochs)
        {
            Some(self.validate()?)
        } else {
            None
        };
        match self.cfg.checkpoint_rule {
            CheckpointRule::TrainLoss => self.consider_checkpoint(epoch, policy_loss, false),
            CheckpointRule::ValidationSe => {
                if let Some(se) = val_se {
                    self.consider_checkpoint(epoch, se, true);
                }
            }
        }
        self.metrics.push(EpochMetrics {
            epoch,
            policy_loss,
            proj_mse,
            value_mse,
            val_se,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    pub fn into_trained(mut self) -> TrainedTriple {
        let (best_epoch, policy, proj, value) = match self.best.take() {
            Some((_, snap)) => (snap.epoch, snap.policy, snap.proj, snap.value),
            None => (
                self.metrics.len().saturating_sub(1),
                self.trainer.policy.clone(),
                self.trainer.proj.clone(),
                self.trainer.value.clone(),
            ),
        };
        TrainedTriple {
            policy,
            proj,
            value,
            metrics: self.metrics,
            best_epoch,
            config: self.cfg,
        }
    }
}

/// Train a value network (free or tied graph) supervised on random
/// projected coefficients; returns (elapsed seconds, held-out relative MSE)
/// per epoch. Shared by the experiment family and the acceptance suite.
pub fn supervised_value_training(
    train_set: &PreparedSet,
    holdout: &PreparedSet,
    tied: bool,
    epochs: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    use crate::autodiff::AdamState;

    let k = train_set.data.positions[0].len();
    let base = &train_set.data.base;
    let scaling = FeatureScaling::from_region_wavelength(
        RegionBounds::default_region().lo,
        RegionBounds::default_region().hi,
        base.aperture.area(),
        base.constants.wavelength,
        k,
        base.p_max,
    );
    let mut value = if tied {
        ValueNet::gnn_tied(scaling.clone(), seed.wrapping_add(21))
    } else {
        ValueNet::gnn(scaling.clone(), seed.wrapping_add(21))
    };
    let mut opt = AdamState::new(
        UpdateRule::Adam,
        value.net.spec.learning_rate,
        &value.net.param_shapes(),
    );

    let samples = pretrain_samples(train_set, train_set.len(), seed.wrapping_add(500))?;
    let holdout_samples = pretrain_samples(holdout, holdout.len(), seed.wrapping_add(600))?;
    let s_g = scaling.gain_scale;

    // precompute holdout labels and the mean squared gain for the
    // relative-MSE normalization
    let mut holdout_labels = Vec::new();
    let mut mean_sq_gain = 0.0;
    let mut n_entries = 0usize;
    for s in &holdout_samples {
        let g = value_labels(&holdout.grams[s.scene_idx], &s.projected)?;
        for z in &g.data {
            mean_sq_gain += z.norm_sqr();
            n_entries += 1;
        }
        holdout_labels.push(g);
    }
    mean_sq_gain /= n_entries as f64;

    let eval_holdout = |value: &ValueNet| -> f64 {
        let mut err = 0.0;
        let mut n = 0usize;
        for (s, label) in holdout_samples.iter().zip(holdout_labels.iter()) {
            let positions = vec![holdout.data.positions[s.scene_idx].clone()];
            let pred = value.infer(&positions, &[s.projected.clone()]).remove(0);
            for (p, l) in pred.data.iter().zip(label.data.iter()) {
                err += (p - l).norm_sqr();
                n += 1;
            }
        }
        (err / n as f64) / mean_sq_gain
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(700));
    let t0 = std::time::Instant::now();
    let mut trace = Vec::new();
    for _epoch in 0..epochs {
        let n = samples.len();
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        for chunk in idx.chunks(batch) {
            let positions: Vec<Vec<Vec3>> = chunk
                .iter()
                .map(|&i| train_set.data.positions[samples[i].scene_idx].clone())
                .collect();
            let coeffs: Vec<CoeffMatrix> =
                chunk.iter().map(|&i| samples[i].projected.clone()).collect();
            let labels: Vec<CMat> = chunk
                .iter()
                .map(|&i| value_labels(&train_set.grams[samples[i].scene_idx], &samples[i].projected))
                .collect::<Result<_>>()?;

            let mut tape = Tape::new();
            let (g_std, ids) = value.forward(&mut tape, &positions, &coeffs);
            let mut label_t = Tensor::zeros(positions.len() * k * k, 2);
            for (b, lab) in labels.iter().enumerate() {
                for kk in 0..k {
                    for j in 0..k {
                        let row = b * k * k + kk * k + j;
                        label_t.data[row * 2] = lab[(kk, j)].re / s_g;
                        label_t.data[row * 2 + 1] = lab[(kk, j)].im / s_g;
                    }
                }
            }
            let lab = tape.leaf(label_t);
            let diff = tape.sub(g_std, lab);
            let sq = tape.square(diff);
            let total = tape.sum_all(sq);
            let loss = tape.scale_const(total, 1.0 / positions.len() as f64);
            let grads = tape.backward(loss);
            let shapes = value.net.param_shapes();
            let g: Vec<Tensor> = ids
                .iter()
                .zip(shapes.iter())
                .map(|(&id, &shape)| grads.get_or_zeros(id, shape))
                .collect();
            opt.step(&mut value.net.params_mut(), &g);
        }
        trace.push((t0.elapsed().as_secs_f64(), eval_holdout(&value)));
    }
    Ok(trace)
}

/// Phased schedule: pretrain the approximators on random coefficients,
/// freeze them, then train the policy alone.
pub fn train_phased(cfg: TrainConfig, train: &PreparedSet, val: &PreparedSet) -> Result<TrainedTriple> {
    let mut driver = TrainDriver::new(cfg, train, val);
    driver.pretrain()?;
    let epochs = driver.cfg.n_epochs;
    driver.run_policy_only(epochs)?;
    Ok(driver.into_trained())
}

/// Alternative schedule: cold start; each epoch updates the policy, then
/// the projection net on the policy's outputs, then the value net on their
/// projections.
pub fn train_alternative(cfg: TrainConfig, train: &PreparedSet, val: &PreparedSet) -> Result<TrainedTriple> {
    let mut driver = TrainDriver::new(cfg, train, val);
    let epochs = driver.cfg.n_epochs;
    driver.run_alternative(epochs, 0)?;
    Ok(driver.into_trained())
}

/// Combined schedule: pretrain the approximators, then run the alternative
/// loop fine-tuning all three networks.
pub fn train_phased_plus_alternative(
    cfg: TrainConfig,
    train: &PreparedSet,
    val: &PreparedSet,
) -> Result<TrainedTriple> {
    let mut driver = TrainDriver::new(cfg, train, val);
    driver.pretrain()?;
    let epochs = driver.cfg.n_epochs;
    driver.run_alternative(epochs, 0)?;
    Ok(driver.into_trained())
}

/// Dispatch on the configured schedule.
pub fn train(cfg: TrainConfig, train_set: &PreparedSet, val: &PreparedSet) -> Result<TrainedTriple> {
    match cfg.schedule {
        Schedule::Phased => train_phased(cfg, train_set, val),
        Schedule::Alternative => train_alternative(cfg, train_set, val),
        Schedule::PhasedPlusAlternative => train_phased_plus_alternative(cfg, train_set, val),
    }
}

/// Default label/evaluation grid: spectrally accurate for the default
/// aperture and user region.
pub fn default_label_grid(scene: &Scenario) -> Result<QuadratureGrid> {
    gauss_legendre_grid(&scene.aperture, 32, 32)
}
