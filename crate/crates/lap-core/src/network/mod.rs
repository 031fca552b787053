//! The three-stage model: encoder, residual transport blocks, classifier.
//!
//! The residual stage applies `x_{k+1} = x_k + v_k(x_k)` and records the
//! full trajectory of states and displacements, so the kinetic transport
//! cost `mean_b Σ_k ‖v_k(x_k)‖²` is differentiable through every block.
//!
//! Two architectures are built in:
//! - `circles2d`: identity encoder on R², blocks of FC→(BN)→ReLU→FC, and a
//!   fixed linear classifier `x ↦ (x·u, −x·u)` with `u = (1,0)`.
//! - `mnist`: a frozen two-conv encoder (1×28×28 → 32×14×14), blocks of
//!   (BN→ReLU→conv) twice, and a trainable FC→BN→ReLU→FC classifier.

pub mod checkpoint;
pub mod init;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::batchnorm::{BatchNormState, Mode};
use crate::tensor::kernels;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};
use init::InitScheme;

pub const MNIST_ENCODER_MID: usize = 16;
pub const MNIST_CHANNELS: usize = 32;
pub const MNIST_FEATURE_SIDE: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Circles2d,
    Mnist,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    /// Number of residual blocks K.
    pub blocks: usize,
    /// Whether residual blocks carry batch normalization (the mnist
    /// classifier keeps its own BN regardless).
    pub batch_norm: bool,
    /// Block hidden width (circles2d) or classifier hidden width (mnist).
    pub hidden: usize,
    pub classifier_trainable: bool,
}

impl Architecture {
    pub fn circles2d(blocks: usize, batch_norm: bool) -> Self {
        Architecture {
            kind: ArchKind::Circles2d,
            blocks,
            batch_norm,
            hidden: 16,
            classifier_trainable: false,
        }
    }

    pub fn mnist() -> Self {
        Architecture {
            kind: ArchKind::Mnist,
            blocks: 9,
            batch_norm: true,
            hidden: 128,
            classifier_trainable: true,
        }
    }

    /// Dimensionality of the flattened transport space.
    pub fn transport_dim(&self) -> usize {
        match self.kind {
            ArchKind::Circles2d => 2,
            ArchKind::Mnist => MNIST_CHANNELS * MNIST_FEATURE_SIDE * MNIST_FEATURE_SIDE,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            ArchKind::Circles2d => 2,
            ArchKind::Mnist => 10,
        }
    }

    /// Expected input shape with a free batch axis.
    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        match self.kind {
            ArchKind::Circles2d => vec![batch, 2],
            ArchKind::Mnist => vec![batch, 1, 28, 28],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSlot {
    Plain,
    BnGamma,
    BnShift,
}

/// Addressing and update metadata for one named parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub trainable: bool,
    /// Weight decay applies (false for biases and batch-norm scale/shift).
    pub decay: bool,
    pub slot: ParamSlot,
    /// Index into the plain tensor store or the BN state list.
    pub index: usize,
}

#[derive(Debug, Clone)]
struct CirclesBlock {
    fc1_w: usize,
    fc1_b: usize,
    bn: Option<(usize, usize, usize)>, // (gamma meta, shift meta, bn index)
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone)]
struct MnistBlock {
    bn1: (usize, usize, usize),
    conv1: usize,
    bn2: (usize, usize, usize),
    conv2: usize,
}

#[derive(Debug, Clone)]
enum Layout {
    Circles {
        blocks: Vec<CirclesBlock>,
        cls_w: usize,
        cls_b: usize,
    },
    Mnist {
        enc1: usize,
        enc2: usize,
        blocks: Vec<MnistBlock>,
        fc1_w: usize,
        fc1_b: usize,
        cls_bn: (usize, usize, usize),
        fc2_w: usize,
        fc2_b: usize,
    },
}

/// Encoder, residual blocks, classifier and their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub seed: u64,
    metas: Vec<ParamMeta>,
    plain: Vec<Tensor>,
    bn: Vec<BatchNormState>,
    layout: Layout,
}

/// Per-block tape nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// K+1 state nodes; `states[0]` is the encoder output.
    pub states: Vec<NodeId>,
    /// K displacement nodes with `states[k+1] = states[k] + displacements[k]`.
    pub displacements: Vec<NodeId>,
}

/// Result of a recorded forward pass.
pub struct ForwardRecord {
    pub logits: NodeId,
    pub trajectory: Trajectory,
    /// One leaf per parameter, aligned with the model's enumeration order.
    pub leaves: Vec<NodeId>,
}

/// Tape-free eval-mode forward: logits plus trajectory summaries.
#[derive(Debug, Clone)]
pub struct InferOut {
    pub logits: Tensor,
    /// Σ_k ‖v_k‖² per sample.
    pub per_sample_cost: Vec<f64>,
    /// Flattened encoder output [B, d].
    pub first_state: Tensor,
    /// Flattened final transport state [B, d].
    pub last_state: Tensor,
}

/// Builds a model with all weight matrices drawn from `init` (biases zero,
/// BN at γ=1/β=0) using a ChaCha stream seeded by `rng_seed`.
pub fn build_model(arch: Architecture, init: InitScheme, rng_seed: u64) -> Model {
    Model::construct(arch, Some(init), rng_seed)
}

impl Model {
    fn construct(arch: Architecture, init: Option<InitScheme>, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plain: Vec<Tensor> = Vec::new();
        let mut bn: Vec<BatchNormState> = Vec::new();
        let mut metas: Vec<ParamMeta> = Vec::new();

        let push_plain = |metas: &mut Vec<ParamMeta>,
                              plain: &mut Vec<Tensor>,
                              name: String,
                              value: Tensor,
                              trainable: bool,
                              decay: bool| {
            plain.push(value);
            metas.push(ParamMeta {
                name,
                trainable,
                decay,
                slot: ParamSlot::Plain,
                index: plain.len() - 1,
            });
            // Layout entries address parameters by enumeration index.
            metas.len() - 1
        };
        let push_bn = |metas: &mut Vec<ParamMeta>,
                           bn: &mut Vec<BatchNormState>,
                           name: &str,
                           channels: usize,
                           trainable: bool| {
            bn.push(BatchNormState::new(channels));
            let b = bn.len() - 1;
            metas.push(ParamMeta {
                name: format!("{name}.gamma"),
                trainable,
                decay: false,
                slot: ParamSlot::BnGamma,
                index: b,
            });
            let g = metas.len() - 1;
            metas.push(ParamMeta {
                name: format!("{name}.shift"),
                trainable,
                decay: false,
                slot: ParamSlot::BnShift,
                index: b,
            });
            (g, metas.len() - 1, b)
        };
        let weight = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| match init {
            Some(scheme) => init::init_matrix(rows, cols, scheme, rng),
            None => Tensor::zeros(vec![rows, cols]),
        };
        let kernel = |f: usize, c: usize, rng: &mut ChaCha8Rng| match init {
            Some(scheme) => init::init_conv_kernel(f, c, 3, 3, scheme, rng),
            None => Tensor::zeros(vec![f, c, 3, 3]),
        };

        let layout = match arch.kind {
            ArchKind::Circles2d => {
                let h = arch.hidden;
                let mut blocks = Vec::with_capacity(arch.blocks);
                for k in 0..arch.blocks {
                    let fc1_w = push_plain(
                        &mut metas,
                        &mut plain,
                        format!("block{k}.fc1.weight"),
                        weight(2, h, &mut rng),
                        true,
                        true,
                    );
                    let fc1_b = push_plain(
                        &mut metas,
                        &mut plain,
                        format!("block{k}.fc1.bias"),
                        Tensor::zeros(vec![h]),
                        true,
                        false,
                    );
                    let bn_ids = if arch.batch_norm {
                        Some(push_bn(&mut metas, &mut bn, &format!("block{k}.bn"), h, true))
                    } else {
                        None
                    };
                    let fc2_w = push_plain(
                        &mut metas,
                        &mut plain,
                        format!("block{k}.fc2.weight"),
                        weight(h, 2, &mut rng),
                        true,
                        true,
                    );
                    let fc2_b = push_plain(
                        &mut metas,
                        &mut plain,
                        format!("block{k}.fc2.bias"),
                        Tensor::zeros(vec![2]),
                        true,
                        false,
                    );
                    blocks.push(CirclesBlock {
                        fc1_w,
                        fc1_b,
                        bn: bn_ids,
                        fc2_w,
                        fc2_b,
                    });
                }
                // Fixed full-rank classifier (x·u, -x·u) with u = (1,0).
                let cls_w = push_plain(
                    &mut metas,
                    &mut plain,
                    "classifier.weight".to_string(),
                    Tensor::from_vec(vec![2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap(),
                    arch.classifier_trainable,
                    arch.classifier_trainable,
                );
                let cls_b = push_plain(
                    &mut metas,
                    &mut plain,
                    "classifier.bias".to_string(),
                    Tensor::zeros(vec![2]),
                    arch.classifier_trainable,
                    false,
                );
                Layout::Circles {
                    blocks,
                    cls_w,
                    cls_b,
                }
            }
            ArchKind::Mnist => {
                let c = MNIST_CHANNELS;
                // Frozen encoder: 1x28x28 -> 16x14x14 -> 32x14x14.
                let enc1 = push_plain(
                    &mut metas,
                    &mut plain,
                    "encoder.conv1.weight".to_string(),
                    kernel(MNIST_ENCODER_MID, 1, &mut rng),
                    false,
                    false,
                );
                let enc2 = push_plain(
                    &mut metas,
                    &mut plain,
                    "encoder.conv2.weight".to_string(),
                    kernel(c, MNIST_ENCODER_MID, &mut rng),
                    false,
                    false,
                );
                let mut blocks = Vec::with_capacity(arch.blocks);
                for k in 0..arch.blocks {
                    let bn1 = push_bn(&mut metas, &mut bn, &format!("block{k}.bn1"), c, true);
                    let conv1 = push_plain(
                        &mut metas,
                        &mut plain,
                        format!("block{k}.conv1.weight"),
                        kernel(c, c, &mut rng),
                        true,
                        true,
                    );
                    let bn2 = push_bn(&mut metas, &mut bn, &format!("block{k}.bn2"), c, true);
                    let conv2 = push_plain(
                        &mut metas,
                        &mut plain,
                        format!("block{k}.conv2.weight"),
                        kernel(c, c, &mut rng),
                        true,
                        true,
                    );
                    blocks.push(MnistBlock {
                        bn1,
                        conv1,
                        bn2,
                        conv2,
                    });
                }
                let d = arch.transport_dim();
                let h = arch.hidden;
                let tr = arch.classifier_trainable;
                let fc1_w = push_plain(
                    &mut metas,
                    &mut plain,
                    "classifier.fc1.weight".to_string(),
                    weight(d, h, &mut rng),
                    tr,
                    tr,
                );
                let fc1_b = push_plain(
                    &mut metas,
                    &mut plain,
                    "classifier.fc1.bias".to_string(),
                    Tensor::zeros(vec![h]),
                    tr,
                    false,
                );
                let cls_bn = push_bn(&mut metas, &mut bn, "classifier.bn", h, tr);
                let fc2_w = push_plain(
                    &mut metas,
                    &mut plain,
                    "classifier.fc2.weight".to_string(),
                    weight(h, 10, &mut rng),
                    tr,
                    tr,
                );
                let fc2_b = push_plain(
                    &mut metas,
                    &mut plain,
                    "classifier.fc2.bias".to_string(),
                    Tensor::zeros(vec![10]),
                    tr,
                    false,
                );
                Layout::Mnist {
                    enc1,
                    enc2,
                    blocks,
                    fc1_w,
                    fc1_b,
                    cls_bn,
                    fc2_w,
                    fc2_b,
                }
            }
        };

        Model {
            arch,
            seed,
            metas,
            plain,
            bn,
            layout,
        }
    }

    pub fn param_count(&self) -> usize {
        self.metas.len()
    }

    pub fn meta(&self, i: usize) -> &ParamMeta {
        &self.metas[i]
    }

    pub fn metas(&self) -> &[ParamMeta] {
        &self.metas
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    /// Current values of parameter `i` as a flat slice.
    pub fn param_values(&self, i: usize) -> &[f64] {
        let meta = &self.metas[i];
        match meta.slot {
            ParamSlot::Plain => self.plain[meta.index].data(),
            ParamSlot::BnGamma => &self.bn[meta.index].gamma,
            ParamSlot::BnShift => &self.bn[meta.index].shift,
        }
    }

    pub fn param_values_mut(&mut self, i: usize) -> &mut [f64] {
        let meta = &self.metas[i];
        match meta.slot {
            ParamSlot::Plain => self.plain[meta.index].data_mut(),
            ParamSlot::BnGamma => &mut self.bn[meta.index].gamma,
            ParamSlot::BnShift => &mut self.bn[meta.index].shift,
        }
    }

    pub fn param_shape(&self, i: usize) -> Vec<usize> {
        let meta = &self.metas[i];
        match meta.slot {
            ParamSlot::Plain => self.plain[meta.index].shape().to_vec(),
            ParamSlot::BnGamma | ParamSlot::BnShift => vec![self.bn[meta.index].channels()],
        }
    }

    /// Parameter `i` as a tensor (BN vectors get shape [C]).
    pub fn param_tensor(&self, i: usize) -> Tensor {
        Tensor::from_vec(self.param_shape(i), self.param_values(i).to_vec())
            .expect("parameter tensor")
    }

    /// Indices of trainable parameters, in enumeration order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.metas.len())
            .filter(|&i| self.metas[i].trainable)
            .collect()
    }

    /// Registers one leaf per parameter. Trainable parameters become
    /// gradient-carrying leaves (or are taken from `overrides`, one per
    /// trainable parameter in order); frozen ones enter as constants.
    fn bind_leaves(&self, tape: &mut Tape, overrides: Option<&[NodeId]>) -> Vec<NodeId> {
        let mut leaves = Vec::with_capacity(self.metas.len());
        let mut next_override = 0;
        for i in 0..self.metas.len() {
            if self.metas[i].trainable {
                match overrides {
                    Some(ids) => {
                        leaves.push(ids[next_override]);
                        next_override += 1;
                    }
                    None => leaves.push(tape.param(self.param_tensor(i))),
                }
            } else {
                leaves.push(tape.leaf(self.param_tensor(i)));
            }
        }
        leaves
    }

    /// Records the full forward pass on `tape`.
    ///
    /// `commit_bn` controls whether train-mode batch statistics update the
    /// running averages. `overrides` substitutes externally created leaves
    /// for the trainable parameters (used by gradient checking).
    pub fn record_forward(
        &mut self,
        tape: &mut Tape,
        batch: &Tensor,
        mode: Mode,
        commit_bn: bool,
        overrides: Option<&[NodeId]>,
    ) -> Result<ForwardRecord, TensorError> {
        let expected = self.arch.input_shape(batch.shape().first().copied().unwrap_or(0));
        if batch.shape() != expected.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                lhs: batch.shape().to_vec(),
                rhs: expected,
            });
        }
        batch.check_finite("forward")?;
        let leaves = self.bind_leaves(tape, overrides);
        let layout = self.layout.clone();
        let commit = commit_bn && mode == Mode::Train;
        match layout {
            Layout::Circles {
                blocks,
                cls_w,
                cls_b,
            } => {
                let x = tape.leaf(batch.clone());
                let mut states = vec![x];
                let mut displacements = Vec::with_capacity(blocks.len());
                for blk in &blocks {
                    let cur = *states.last().unwrap();
                    let mut h = tape.affine(cur, leaves[blk.fc1_w], leaves[blk.fc1_b])?;
                    if let Some((g, s, b)) = blk.bn {
                        h = tape.batchnorm(h, leaves[g], leaves[s], &mut self.bn[b], mode, commit)?;
                    }
                    h = tape.relu(h);
                    let v = tape.affine(h, leaves[blk.fc2_w], leaves[blk.fc2_b])?;
                    let next = tape.add(cur, v)?;
                    displacements.push(v);
                    states.push(next);
                }
                let logits = tape.affine(*states.last().unwrap(), leaves[cls_w], leaves[cls_b])?;
                Ok(ForwardRecord {
                    logits,
                    trajectory: Trajectory {
                        states,
                        displacements,
                    },
                    leaves,
                })
            }
            Layout::Mnist {
                enc1,
                enc2,
                blocks,
                fc1_w,
                fc1_b,
                cls_bn,
                fc2_w,
                fc2_b,
            } => {
                let x = tape.leaf(batch.clone());
                let e = tape.conv2d(x, leaves[enc1], 2, 1)?;
                let e = tape.relu(e);
                let e = tape.conv2d(e, leaves[enc2], 1, 1)?;
                let mut states = vec![e];
                let mut displacements = Vec::with_capacity(blocks.len());
                for blk in &blocks {
                    let cur = *states.last().unwrap();
                    let (g1, s1, b1) = blk.bn1;
                    let mut t =
                        tape.batchnorm(cur, leaves[g1], leaves[s1], &mut self.bn[b1], mode, commit)?;
                    t = tape.relu(t);
                    t = tape.conv2d(t, leaves[blk.conv1], 1, 1)?;
                    let (g2, s2, b2) = blk.bn2;
                    t = tape.batchnorm(t, leaves[g2], leaves[s2], &mut self.bn[b2], mode, commit)?;
                    t = tape.relu(t);
                    let v = tape.conv2d(t, leaves[blk.conv2], 1, 1)?;
                    let next = tape.add(cur, v)?;
                    displacements.push(v);
                    states.push(next);
                }
                let b = batch.shape()[0];
                let d = self.arch.transport_dim();
                let flat = tape.reshape(*states.last().unwrap(), vec![b, d])?;
                let mut c = tape.affine(flat, leaves[fc1_w], leaves[fc1_b])?;
                let (gc, sc, bc) = cls_bn;
                c = tape.batchnorm(c, leaves[gc], leaves[sc], &mut self.bn[bc], mode, commit)?;
                c = tape.relu(c);
                let logits = tape.affine(c, leaves[fc2_w], leaves[fc2_b])?;
                Ok(ForwardRecord {
                    logits,
                    trajectory: Trajectory {
                        states,
                        displacements,
                    },
                    leaves,
                })
            }
        }
    }

    /// Eval-mode forward without a tape: cheaper and side-effect free.
    pub fn infer(&self, batch: &Tensor) -> Result<InferOut, TensorError> {
        let expected = self.arch.input_shape(batch.shape().first().copied().unwrap_or(0));
        if batch.shape() != expected.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "infer",
                lhs: batch.shape().to_vec(),
                rhs: expected,
            });
        }
        batch.check_finite("infer")?;
        let b = batch.shape()[0];
        let d = self.arch.transport_dim();
        match &self.layout {
            Layout::Circles {
                blocks,
                cls_w,
                cls_b,
            } => {
                let mut state = batch.data().to_vec();
                let first = state.clone();
                let mut cost = vec![0.0; b];
                for blk in blocks {
                    let fc1w = &self.plain[self.metas[blk.fc1_w].index];
                    let fc1b = &self.plain[self.metas[blk.fc1_b].index];
                    let h0 = self.arch.hidden;
                    let mut h = kernels::matmul(&state, fc1w.data(), b, 2, h0);
                    add_bias(&mut h, fc1b.data());
                    if let Some((_, _, bi)) = blk.bn {
                        bn_eval_inplace(&mut h, b, h0, 1, &self.bn[bi]);
                    }
                    relu_inplace(&mut h);
                    let fc2w = &self.plain[self.metas[blk.fc2_w].index];
                    let fc2b = &self.plain[self.metas[blk.fc2_b].index];
                    let mut v = kernels::matmul(&h, fc2w.data(), b, h0, 2);
                    add_bias(&mut v, fc2b.data());
                    for (i, (s, dv)) in state.iter_mut().zip(&v).enumerate() {
                        cost[i / 2] += dv * dv;
                        *s += dv;
                    }
                }
                let wt = &self.plain[self.metas[*cls_w].index];
                let bt = &self.plain[self.metas[*cls_b].index];
                let mut logits = kernels::matmul(&state, wt.data(), b, 2, 2);
                add_bias(&mut logits, bt.data());
                Ok(InferOut {
                    logits: Tensor::from_vec(vec![b, 2], logits)?,
                    per_sample_cost: cost,
                    first_state: Tensor::from_vec(vec![b, d], first)?,
                    last_state: Tensor::from_vec(vec![b, d], state)?,
                })
            }
            Layout::Mnist {
                enc1,
                enc2,
                blocks,
                fc1_w,
                fc1_b,
                cls_bn,
                fc2_w,
                fc2_b,
            } => {
                let c = MNIST_CHANNELS;
                let side = MNIST_FEATURE_SIDE;
                let im = side * side;
                let e1 = &self.plain[self.metas[*enc1].index];
                let mut t = kernels::conv2d_fast(
                    batch.data(),
                    e1.data(),
                    b,
                    1,
                    28,
                    28,
                    MNIST_ENCODER_MID,
                    3,
                    3,
                    2,
                    1,
                    side,
                    side,
                );
                relu_inplace(&mut t);
                let e2 = &self.plain[self.metas[*enc2].index];
                let mut state = kernels::conv2d_fast(
                    &t,
                    e2.data(),
                    b,
                    MNIST_ENCODER_MID,
                    side,
                    side,
                    c,
                    3,
                    3,
                    1,
                    1,
                    side,
                    side,
                );
                let first = state.clone();
                let mut cost = vec![0.0; b];
                for blk in blocks {
                    let mut t = state.clone();
                    bn_eval_inplace(&mut t, b, c, im, &self.bn[blk.bn1.2]);
                    relu_inplace(&mut t);
                    let w1 = &self.plain[self.metas[blk.conv1].index];
                    let mut t =
                        kernels::conv2d_fast(&t, w1.data(), b, c, side, side, c, 3, 3, 1, 1, side, side);
                    bn_eval_inplace(&mut t, b, c, im, &self.bn[blk.bn2.2]);
                    relu_inplace(&mut t);
                    let w2 = &self.plain[self.metas[blk.conv2].index];
                    let v =
                        kernels::conv2d_fast(&t, w2.data(), b, c, side, side, c, 3, 3, 1, 1, side, side);
                    let per = c * im;
                    for (i, (s, dv)) in state.iter_mut().zip(&v).enumerate() {
                        cost[i / per] += dv * dv;
                        *s += dv;
                    }
                }
                let h = self.arch.hidden;
                let fc1w = &self.plain[self.metas[*fc1_w].index];
                let fc1b = &self.plain[self.metas[*fc1_b].index];
                let mut z = kernels::matmul(&state, fc1w.data(), b, d, h);
                add_bias(&mut z, fc1b.data());
                bn_eval_inplace(&mut z, b, h, 1, &self.bn[cls_bn.2]);
                relu_inplace(&mut z);
                let fc2w = &self.plain[self.metas[*fc2_w].index];
                let fc2b = &self.plain[self.metas[*fc2_b].index];
                let mut logits = kernels::matmul(&z, fc2w.data(), b, h, 10);
                add_bias(&mut logits, fc2b.data());
                Ok(InferOut {
                    logits: Tensor::from_vec(vec![b, 10], logits)?,
                    per_sample_cost: cost,
                    first_state: Tensor::from_vec(vec![b, d], first)?,
                    last_state: Tensor::from_vec(vec![b, d], state)?,
                })
            }
        }
    }
}

fn add_bias(rows: &mut [f64], bias: &[f64]) {
    for row in rows.chunks_exact_mut(bias.len()) {
        for (v, &bv) in row.iter_mut().zip(bias) {
            *v += bv;
        }
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn bn_eval_inplace(x: &mut [f64], b: usize, c: usize, spatial: usize, state: &BatchNormState) {
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * spatial;
            let inv = 1.0 / (state.running_var[ci] + state.epsilon).sqrt();
            let (g, mu, be) = (state.gamma[ci], state.running_mean[ci], state.shift[ci]);
            for s in 0..spatial {
                x[base + s] = g * ((x[base + s] - mu) * inv) + be;
            }
        }
    }
}

impl Trajectory {
    pub fn k(&self) -> usize {
        self.displacements.len()
    }

    /// State k flattened to [B, d].
    pub fn state_flat(&self, tape: &Tape, k: usize) -> Tensor {
        flatten_rows(tape.value(self.states[k]))
    }

    pub fn displacement_flat(&self, tape: &Tape, k: usize) -> Tensor {
        flatten_rows(tape.value(self.displacements[k]))
    }

    /// Σ_k ‖v_k‖² for each sample.
    pub fn per_sample_cost(&self, tape: &Tape) -> Vec<f64> {
        let b = tape.value(self.states[0]).shape()[0];
        let mut cost = vec![0.0; b];
        for &d in &self.displacements {
            for (c, n) in cost.iter_mut().zip(tape.value(d).row_sq_norms()) {
                *c += n;
            }
        }
        cost
    }
}

fn flatten_rows(t: &Tensor) -> Tensor {
    let b = t.shape()[0];
    let d = t.row_len();
    t.reshaped(vec![b, d]).expect("flatten")
}

/// Batch-mean transport cost `(1/B) Σ_b Σ_k ‖v_k(x_k^b)‖²` as a tape node,
/// differentiable through every block.
pub fn transport_cost(tape: &mut Tape, traj: &Trajectory) -> Result<NodeId, TensorError> {
    let mut acc: Option<NodeId> = None;
    for &d in &traj.displacements {
        let c = tape.mean_sq_norm(d)?;
        acc = Some(match acc {
            Some(prev) => tape.add_scalars(prev, c)?,
            None => c,
        });
    }
    Ok(match acc {
        Some(id) => id,
        None => tape.leaf(Tensor::scalar(0.0)),
    })
}

/// Per-sample Cauchy–Schwarz pair: (K·Σ_k ‖v_k‖², ‖φ_K − φ_0‖²).
/// The first component always dominates the second.
pub fn displacement_endpoint_bound(tape: &Tape, traj: &Trajectory) -> Vec<(f64, f64)> {
    let k = traj.k() as f64;
    let first = tape.value(traj.states[0]);
    let last = tape.value(*traj.states.last().unwrap());
    let b = first.shape()[0];
    let d = first.row_len();
    let mut cost = traj.per_sample_cost(tape);
    for c in cost.iter_mut() {
        *c *= k;
    }
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut disp = 0.0;
        for j in 0..d {
            let delta = last.data()[bi * d + j] - first.data()[bi * d + j];
            disp += delta * delta;
        }
        out.push((cost[bi], disp));
    }
    out
}
