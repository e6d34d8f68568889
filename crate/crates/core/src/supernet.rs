//! Cell-based over-parameterized network with softmax-mixed edges and an
//! auxiliary skip branch on every edge.
//!
//! Each edge `(i, j)` of a cell computes
//!
//! ```text
//! out = beta * aux(x_i) + sum_o softmax(alpha_edge)_o * o(x_i)
//! ```
//!
//! With `aux` the identity this is `(beta + w_skip) * x_i + sum_{o != skip}
//! w_o * o(x_i)`: the skip function is provided unconditionally while the
//! softmax weights only express relative preference among candidates. At
//! `beta = 0` the edge is exactly the plain softmax-mixed form.
//!
//! Convolutions follow the relu-conv ordering without normalization layers;
//! `none` is the zero tensor; pooling uses in-bounds divisors. In reduction
//! cells every edge leaving an input node has stride 2: candidate ops take
//! the stride directly, while `skip` and the auxiliary branch downsample with
//! a 2x2 average pool (identity channel map). Spatial dims must be even when
//! a reduction cell is used.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Candidate operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    None,
    Skip,
    Conv1x1,
    Conv3x3,
    AvgPool3x3,
    /// Two stacked relu-conv3x3 blocks.
    SepConv3x3,
}

pub const ALL_OP_KINDS: [OpKind; 6] = [
    OpKind::None,
    OpKind::Skip,
    OpKind::Conv1x1,
    OpKind::Conv3x3,
    OpKind::AvgPool3x3,
    OpKind::SepConv3x3,
];

impl OpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::Skip => "skip",
            OpKind::Conv1x1 => "conv1x1",
            OpKind::Conv3x3 => "conv3x3",
            OpKind::AvgPool3x3 => "avgpool3x3",
            OpKind::SepConv3x3 => "sepconv3x3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_OP_KINDS
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown op kind `{s}`")))
    }

    /// Ops with trainable weights (the convolutions).
    pub fn is_parametric(&self) -> bool {
        matches!(self, OpKind::Conv1x1 | OpKind::Conv3x3 | OpKind::SepConv3x3)
    }
}

/// How a cell combines its intermediate nodes into the cell output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellAggregation {
    /// Plain sum of intermediate node outputs (smallest spaces).
    Sum,
    /// Channel concatenation followed by a 1x1 projection back to `channels`.
    ConcatProj,
}

impl CellAggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellAggregation::Sum => "sum",
            CellAggregation::ConcatProj => "concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CellAggregation::Sum),
            "concat" => Ok(CellAggregation::ConcatProj),
            other => Err(Error::InvalidConfig(format!(
                "unknown aggregation `{other}` (expected sum|concat)"
            ))),
        }
    }
}

/// A cell edge from node `from` into intermediate node `to`.
///
/// Nodes `0..num_inputs` are the cell inputs; intermediate nodes follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

/// Architectural description of the search space.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpaceSpec {
    /// Intermediate nodes per cell.
    pub num_nodes: usize,
    /// Input nodes per cell (1 or 2).
    pub num_inputs: usize,
    pub candidate_ops: Vec<OpKind>,
    pub num_cells: usize,
    pub channels: usize,
    pub has_reduction: bool,
    pub aggregation: CellAggregation,
    /// Whether the auxiliary branch also applies to edges leaving input
    /// nodes (default) or only to edges between intermediate nodes.
    pub aux_on_input_edges: bool,
}

impl SearchSpaceSpec {
    /// The enumerable three-op space the mini-benchmark is built on:
    /// one cell, one input node, two intermediate nodes, three edges.
    pub fn minibench_default() -> Self {
        SearchSpaceSpec {
            num_nodes: 2,
            num_inputs: 1,
            candidate_ops: vec![OpKind::None, OpKind::Skip, OpKind::Conv3x3],
            num_cells: 1,
            channels: 8,
            has_reduction: false,
            aggregation: CellAggregation::Sum,
            aux_on_input_edges: true,
        }
    }

    /// A slightly richer desk-scale space in the classic two-input style.
    pub fn desk_default() -> Self {
        SearchSpaceSpec {
            num_nodes: 2,
            num_inputs: 2,
            candidate_ops: vec![
                OpKind::None,
                OpKind::Skip,
                OpKind::Conv3x3,
                OpKind::AvgPool3x3,
            ],
            num_cells: 2,
            channels: 8,
            has_reduction: false,
            aggregation: CellAggregation::ConcatProj,
            aux_on_input_edges: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes < 1 {
            return Err(Error::InvalidConfig("num_nodes must be >= 1".into()));
        }
        if !(1..=2).contains(&self.num_inputs) {
            return Err(Error::InvalidConfig("num_inputs must be 1 or 2".into()));
        }
        if self.candidate_ops.is_empty() {
            return Err(Error::InvalidConfig("candidate_ops must be nonempty".into()));
        }
        if !self.candidate_ops.contains(&OpKind::Skip) {
            return Err(Error::InvalidConfig(
                "candidate_ops must contain `skip`".into(),
            ));
        }
        let mut seen = self.candidate_ops.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.candidate_ops.len() {
            return Err(Error::InvalidConfig("duplicate candidate op".into()));
        }
        if self.num_cells < 1 || self.channels < 1 {
            return Err(Error::InvalidConfig(
                "num_cells and channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Fully-connected DAG edges `(i, j)`, `i < j`, in canonical order.
    pub fn edges(&self) -> Vec<Edge> {
        let mut edges = Vec::new();
        for j in self.num_inputs..self.num_inputs + self.num_nodes {
            for i in 0..j {
                edges.push(Edge { from: i, to: j });
            }
        }
        edges
    }

    pub fn num_edges(&self) -> usize {
        (0..self.num_nodes).map(|n| self.num_inputs + n).sum()
    }

    pub fn num_ops(&self) -> usize {
        self.candidate_ops.len()
    }

    pub fn op_index(&self, kind: OpKind) -> Option<usize> {
        self.candidate_ops.iter().position(|&k| k == kind)
    }

    /// Index of the reduction cell, when the space has one.
    pub fn reduction_index(&self) -> Option<usize> {
        self.has_reduction.then_some(self.num_cells / 2)
    }
}

/// Per-edge, per-candidate-op logits; the upper-level search variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    /// `[num_edges, num_ops]`
    pub normal: Tensor,
    /// Present iff the space has a reduction cell.
    pub reduce: Option<Tensor>,
}

impl ArchParams {
    /// Small-noise initialization, matching common practice.
    pub fn init(space: &SearchSpaceSpec, rng: &mut impl Rng) -> Self {
        let shape = [space.num_edges(), space.num_ops()];
        ArchParams {
            normal: Tensor::randn(&shape, 1e-3, rng),
            reduce: space
                .has_reduction
                .then(|| Tensor::randn(&shape, 1e-3, rng)),
        }
    }

    pub fn zeros(space: &SearchSpaceSpec) -> Self {
        let shape = [space.num_edges(), space.num_ops()];
        ArchParams {
            normal: Tensor::zeros(&shape),
            reduce: space.has_reduction.then(|| Tensor::zeros(&shape)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.normal.is_finite()
            && self.reduce.as_ref().map_or(true, Tensor::is_finite);
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite("architecture parameters".into()))
        }
    }

    /// Per-edge softmax weights of the normal-cell logits.
    pub fn normal_weights(&self) -> Vec<Vec<f64>> {
        let [rows, cols] = [self.normal.shape()[0], self.normal.shape()[1]];
        (0..rows)
            .map(|r| row_softmax(&self.normal.data()[r * cols..(r + 1) * cols]))
            .collect()
    }

    /// Per-edge softmax weights of the given cell type.
    pub fn weights_of(&self, reduction: bool) -> Vec<Vec<f64>> {
        let t = if reduction {
            self.reduce.as_ref().expect("no reduction params")
        } else {
            &self.normal
        };
        let [rows, cols] = [t.shape()[0], t.shape()[1]];
        (0..rows)
            .map(|r| row_softmax(&t.data()[r * cols..(r + 1) * cols]))
            .collect()
    }

    /// Flatten normal (and reduce) logits into one vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.normal.data().to_vec();
        if let Some(r) = &self.reduce {
            v.extend_from_slice(r.data());
        }
        v
    }

    /// Rebuild from a flat vector with this parameter set's shapes.
    pub fn unflatten_like(&self, flat: &[f64]) -> ArchParams {
        let n = self.normal.numel();
        let normal = Tensor::from_vec(self.normal.shape().to_vec(), flat[..n].to_vec())
            .expect("unflatten normal");
        let reduce = self.reduce.as_ref().map(|r| {
            Tensor::from_vec(r.shape().to_vec(), flat[n..n + r.numel()].to_vec())
                .expect("unflatten reduce")
        });
        ArchParams { normal, reduce }
    }
}

/// Numerically stable softmax of one logit row.
pub fn row_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// The auxiliary branch: a fixed identity skip, or a learnable 1x1 channel
/// projection initialized to the exact identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxBranchKind {
    IdentitySkip,
    LearnableProjection,
}

impl AuxBranchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AuxBranchKind::IdentitySkip => "identity-skip",
            AuxBranchKind::LearnableProjection => "learnable-projection",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity-skip" => Ok(AuxBranchKind::IdentitySkip),
            "learnable-projection" => Ok(AuxBranchKind::LearnableProjection),
            other => Err(Error::InvalidConfig(format!(
                "unknown aux branch `{other}` (expected identity-skip|learnable-projection)"
            ))),
        }
    }
}

/// Weights of one candidate op instance on one edge.
#[derive(Debug, Clone)]
pub struct OpWeights {
    pub kind: OpKind,
    /// Conv kernels in application order; empty for non-parametric ops.
    pub kernels: Vec<Tensor>,
    /// Per-channel biases, one per kernel.
    pub biases: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct EdgeWeights {
    pub ops: Vec<OpWeights>,
    /// Learnable 1x1 auxiliary projection kernel, identity-initialized.
    pub aux_proj: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct CellWeights {
    pub edges: Vec<EdgeWeights>,
    /// 1x1 output projection for concat aggregation.
    pub proj: Option<Tensor>,
    pub reduction: bool,
}

/// The full over-parameterized network: stem, stacked cells, classifier.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub space: SearchSpaceSpec,
    pub aux_kind: AuxBranchKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem: Tensor,
    /// Channel bias after the stem; it diversifies the relu thresholds the
    /// candidate convs see, without making the skip path nonlinear.
    pub stem_bias: Tensor,
    pub cells: Vec<CellWeights>,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

fn conv_kernel(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    Tensor::randn(&[c_out, c_in, k, k], std, rng)
}

fn identity_1x1(channels: usize) -> Tensor {
    let mut t = Tensor::zeros(&[channels, channels, 1, 1]);
    for c in 0..channels {
        t.data_mut()[c * channels + c] = 1.0;
    }
    t
}

fn op_weights(kind: OpKind, channels: usize, rng: &mut impl Rng) -> OpWeights {
    // Candidate convs start at half the usual scale: early in the search
    // they contribute little, which is exactly the regime where the skip
    // op's head start matters.
    let half = |mut t: Tensor| {
        for v in t.data_mut() {
            *v *= 0.5;
        }
        t
    };
    let kernels = match kind {
        OpKind::Conv1x1 => vec![half(conv_kernel(channels, channels, 1, rng))],
        OpKind::Conv3x3 => vec![half(conv_kernel(channels, channels, 3, rng))],
        OpKind::SepConv3x3 => vec![
            half(conv_kernel(channels, channels, 3, rng)),
            half(conv_kernel(channels, channels, 3, rng)),
        ],
        _ => Vec::new(),
    };
    let biases = kernels
        .iter()
        .map(|_| Tensor::randn(&[channels], 0.1, rng))
        .collect();
    OpWeights {
        kind,
        kernels,
        biases,
    }
}

impl Supernet {
    /// Freshly initialized supernet for a search space.
    pub fn init(
        space: &SearchSpaceSpec,
        in_channels: usize,
        num_classes: usize,
        aux_kind: AuxBranchKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        space.validate()?;
        let c = space.channels;
        let stem = conv_kernel(c, in_channels, 1, rng);
        let stem_bias = Tensor::randn(&[c], 0.4, rng);
        let reduction_index = space.reduction_index();
        let mut cells = Vec::with_capacity(space.num_cells);
        for ci in 0..space.num_cells {
            let edges = space
                .edges()
                .iter()
                .map(|_| EdgeWeights {
                    ops: space
                        .candidate_ops
                        .iter()
                        .map(|&k| op_weights(k, c, rng))
                        .collect(),
                    aux_proj: (aux_kind == AuxBranchKind::LearnableProjection)
                        .then(|| identity_1x1(c)),
                })
                .collect();
            let proj = (space.aggregation == CellAggregation::ConcatProj)
                .then(|| conv_kernel(c, space.num_nodes * c, 1, rng));
            cells.push(CellWeights {
                edges,
                proj,
                reduction: Some(ci) == reduction_index,
            });
        }
        let fc_w = Tensor::randn(&[c, num_classes], 0.01, rng);
        let fc_b = Tensor::zeros(&[num_classes]);
        Ok(Supernet {
            space: space.clone(),
            aux_kind,
            in_channels,
            num_classes,
            stem,
            stem_bias,
            cells,
            fc_w,
            fc_b,
        })
    }

    /// All weight tensors in a fixed traversal order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.stem, &self.stem_bias];
        for cell in &self.cells {
            for edge in &cell.edges {
                for op in &edge.ops {
                    for (k, b) in op.kernels.iter().zip(&op.biases) {
                        out.push(k);
                        out.push(b);
                    }
                }
                if let Some(p) = &edge.aux_proj {
                    out.push(p);
                }
            }
            if let Some(p) = &cell.proj {
                out.push(p);
            }
        }
        out.push(&self.fc_w);
        out.push(&self.fc_b);
        out
    }

    /// Mutable view in the same order as [`Supernet::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.stem, &mut self.stem_bias];
        for cell in &mut self.cells {
            for edge in &mut cell.edges {
                for op in &mut edge.ops {
                    for (k, b) in op.kernels.iter_mut().zip(op.biases.iter_mut()) {
                        out.push(k);
                        out.push(b);
                    }
                }
                if let Some(p) = &mut edge.aux_proj {
                    out.push(p);
                }
            }
            if let Some(p) = &mut cell.proj {
                out.push(p);
            }
        }
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    /// Lift all weights onto a tape, as leaves (`trainable`) or constants.
    pub fn lift(&self, tape: &Tape, trainable: bool) -> LiftedSupernet {
        let mut lift = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let stem = lift(&self.stem);
        let stem_bias = lift(&self.stem_bias);
        let cells = self
            .cells
            .iter()
            .map(|cell| LiftedCell {
                edges: cell
                    .edges
                    .iter()
                    .map(|e| LiftedEdge {
                        ops: e
                            .ops
                            .iter()
                            .map(|o| LiftedOp {
                                kind: o.kind,
                                kernels: o.kernels.iter().map(&mut lift).collect(),
                                biases: o.biases.iter().map(&mut lift).collect(),
                            })
                            .collect(),
                        aux_proj: e.aux_proj.as_ref().map(&mut lift),
                    })
                    .collect(),
                proj: cell.proj.as_ref().map(&mut lift),
                reduction: cell.reduction,
            })
            .collect();
        let fc_w = lift(&self.fc_w);
        let fc_b = lift(&self.fc_b);
        LiftedSupernet {
            stem,
            stem_bias,
            cells,
            fc_w,
            fc_b,
        }
    }

    /// Lift architecture parameters onto a tape.
    pub fn lift_arch(&self, tape: &Tape, arch: &ArchParams, trainable: bool) -> ArchVars {
        let lift = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ArchVars {
            normal: lift(&arch.normal),
            reduce: arch.reduce.as_ref().map(lift),
        }
    }

    /// Forward pass to logits `[n, num_classes]`.
    pub fn forward(
        &self,
        tape: &Tape,
        lifted: &LiftedSupernet,
        arch: &ArchVars,
        images: Var,
        beta: f64,
    ) -> Result<Var> {
        let conv = tape.conv2d(images, lifted.stem, 1, 0)?;
        let stem_out = tape.add_chan_bias(conv, lifted.stem_bias)?;
        let mut prev_prev = stem_out;
        let mut prev = stem_out;
        for cell in &lifted.cells {
            // A reduction halves spatial dims; the skip-level input must be
            // pooled to match before it feeds the next cell.
            if tape.shape(prev_prev)[2] != tape.shape(prev)[2] {
                prev_prev = tape.avg_pool(prev_prev, 2, 2, 0)?;
            }
            let alpha = if cell.reduction {
                arch.reduce.ok_or_else(|| {
                    Error::InvalidConfig("reduction cell without reduction params".into())
                })?
            } else {
                arch.normal
            };
            let out = self.cell_forward(tape, cell, prev_prev, prev, alpha, beta)?;
            prev_prev = prev;
            prev = out;
        }
        let feats = tape.global_avg_pool(prev)?;
        let logits = tape.matmul(feats, lifted.fc_w)?;
        tape.add_bias(logits, lifted.fc_b)
    }

    fn cell_forward(
        &self,
        tape: &Tape,
        cell: &LiftedCell,
        s0: Var,
        s1: Var,
        alpha: Var,
        beta: f64,
    ) -> Result<Var> {
        let space = &self.space;
        let mut states: Vec<Var> = if space.num_inputs == 1 {
            vec![s1]
        } else {
            vec![s0, s1]
        };
        let edges = space.edges();
        let mut edge_idx = 0;
        for j in space.num_inputs..space.num_inputs + space.num_nodes {
            let mut node_acc: Option<Var> = None;
            for i in 0..j {
                debug_assert_eq!(edges[edge_idx], Edge { from: i, to: j });
                let stride = if cell.reduction && i < space.num_inputs {
                    2
                } else {
                    1
                };
                let beta_edge = if i < space.num_inputs && !space.aux_on_input_edges {
                    0.0
                } else {
                    beta
                };
                let alpha_row = tape.row(alpha, edge_idx)?;
                let out = mixed_edge_forward(
                    tape,
                    states[i],
                    alpha_row,
                    beta_edge,
                    &cell.edges[edge_idx].ops,
                    cell.edges[edge_idx].aux_proj,
                    stride,
                )?;
                node_acc = Some(match node_acc {
                    Some(acc) => tape.add(acc, out)?,
                    None => out,
                });
                edge_idx += 1;
            }
            states.push(node_acc.expect("node with no incoming edges"));
        }
        let intermediates = &states[space.num_inputs..];
        match space.aggregation {
            CellAggregation::Sum => {
                let mut acc = intermediates[0];
                for &s in &intermediates[1..] {
                    acc = tape.add(acc, s)?;
                }
                Ok(acc)
            }
            CellAggregation::ConcatProj => {
                let cat = tape.concat(intermediates, 1)?;
                let proj = cell.proj.expect("concat aggregation without projection");
                tape.conv2d(cat, proj, 1, 0)
            }
        }
    }

    /// Cross-entropy loss and batch accuracy.
    ///
    /// Accuracy is argmax agreement (first maximal logit wins ties). A
    /// non-finite loss is reported as an error.
    pub fn loss_and_accuracy(
        &self,
        tape: &Tape,
        lifted: &LiftedSupernet,
        arch: &ArchVars,
        batch: &crate::data::Batch,
        beta: f64,
    ) -> Result<(Var, f64)> {
        let images = tape.constant(batch.images.clone());
        let logits = self.forward(tape, lifted, arch, images, beta)?;
        let acc = tape.with_value(logits, |l| accuracy(l, &batch.labels));
        let onehot = tape.constant(batch.onehot());
        let loss = tape.cross_entropy_logits(logits, onehot)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok((loss, acc))
    }
}

/// Fraction of rows whose argmax logit matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = 0;
        for c in 1..k {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

/// Weight handles mirroring the supernet structure on one tape.
pub struct LiftedSupernet {
    pub stem: Var,
    pub stem_bias: Var,
    pub cells: Vec<LiftedCell>,
    pub fc_w: Var,
    pub fc_b: Var,
}

impl LiftedSupernet {
    /// Handles in the same order as [`Supernet::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = vec![self.stem, self.stem_bias];
        for cell in &self.cells {
            for edge in &cell.edges {
                for op in &edge.ops {
                    for (k, b) in op.kernels.iter().zip(&op.biases) {
                        out.push(*k);
                        out.push(*b);
                    }
                }
                if let Some(p) = edge.aux_proj {
                    out.push(p);
                }
            }
            if let Some(p) = cell.proj {
                out.push(p);
            }
        }
        out.push(self.fc_w);
        out.push(self.fc_b);
        out
    }
}

pub struct LiftedCell {
    pub edges: Vec<LiftedEdge>,
    pub proj: Option<Var>,
    pub reduction: bool,
}

/// One candidate op's handles on a tape.
pub struct LiftedOp {
    pub kind: OpKind,
    pub kernels: Vec<Var>,
    pub biases: Vec<Var>,
}

pub struct LiftedEdge {
    pub ops: Vec<LiftedOp>,
    pub aux_proj: Option<Var>,
}

/// Architecture-parameter handles on one tape.
#[derive(Clone, Copy)]
pub struct ArchVars {
    pub normal: Var,
    pub reduce: Option<Var>,
}

/// Apply one candidate op to `x`. Convs are relu-conv-bias.
pub fn apply_op(
    tape: &Tape,
    kind: OpKind,
    kernels: &[Var],
    biases: &[Var],
    x: Var,
    stride: usize,
) -> Result<Var> {
    match kind {
        OpKind::None => {
            let shape = tape.shape(x);
            let (h, w) = (shape[2], shape[3]);
            let zero = Tensor::zeros(&[
                shape[0],
                shape[1],
                (h - 1) / stride + 1,
                (w - 1) / stride + 1,
            ]);
            Ok(tape.constant(zero))
        }
        OpKind::Skip => {
            if stride == 1 {
                Ok(x)
            } else {
                tape.avg_pool(x, 2, stride, 0)
            }
        }
        OpKind::Conv1x1 => {
            let h = tape.relu(x)?;
            let h = tape.conv2d(h, kernels[0], stride, 0)?;
            tape.add_chan_bias(h, biases[0])
        }
        OpKind::Conv3x3 => {
            let h = tape.relu(x)?;
            let h = tape.conv2d(h, kernels[0], stride, 1)?;
            tape.add_chan_bias(h, biases[0])
        }
        OpKind::SepConv3x3 => {
            let h = tape.relu(x)?;
            let h = tape.conv2d(h, kernels[0], stride, 1)?;
            let h = tape.add_chan_bias(h, biases[0])?;
            let h = tape.relu(h)?;
            let h = tape.conv2d(h, kernels[1], 1, 1)?;
            tape.add_chan_bias(h, biases[1])
        }
        OpKind::AvgPool3x3 => tape.avg_pool(x, 3, stride, 1),
    }
}

/// Mixed edge: `beta * aux(x) + sum_o softmax(alpha_row)_o * o(x)`.
///
/// The auxiliary branch is skipped entirely at `beta == 0`, which keeps the
/// summation order (and hence the bits) identical to the plain softmax-mixed
/// edge. `aux_proj` carries the learnable 1x1 projection when the supernet
/// was built with that branch kind; on stride-2 edges the branch pools first.
pub fn mixed_edge_forward(
    tape: &Tape,
    x: Var,
    alpha_row: Var,
    beta: f64,
    ops: &[LiftedOp],
    aux_proj: Option<Var>,
    stride: usize,
) -> Result<Var> {
    let weights = tape.softmax(alpha_row)?;
    let mut acc: Option<Var> = None;
    if beta != 0.0 {
        let down = if stride == 1 {
            x
        } else {
            tape.avg_pool(x, 2, stride, 0)?
        };
        let aux_out = match aux_proj {
            Some(proj) => tape.conv2d(down, proj, 1, 0)?,
            None => down,
        };
        acc = Some(tape.scale(aux_out, beta)?);
    }
    for (i, op) in ops.iter().enumerate() {
        let w_i = tape.select(weights, i)?;
        let out = apply_op(tape, op.kind, &op.kernels, &op.biases, x, stride)?;
        let term = tape.scale_by(out, w_i)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("mixed edge with no candidate ops"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, SplitTag};
    use crate::rng;
    use crate::tensor::max_rel_diff;
    use rand::Rng;

    fn lifted_op(tape: &Tape, kind: OpKind, channels: usize, rng: &mut impl Rng) -> LiftedOp {
        let w = op_weights(kind, channels, rng);
        LiftedOp {
            kind,
            kernels: w.kernels.iter().map(|k| tape.constant(k.clone())).collect(),
            biases: w.biases.iter().map(|b| tape.constant(b.clone())).collect(),
        }
    }

    #[test]
    fn skip_only_edge_with_unit_beta_doubles_input() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 2, 3, 3], 1.5));
        let alpha = tape.constant(Tensor::from_vec(vec![1], vec![0.77]).unwrap());
        let skip = LiftedOp {
            kind: OpKind::Skip,
            kernels: vec![],
            biases: vec![],
        };
        let out = mixed_edge_forward(&tape, x, alpha, 1.0, &[skip], None, 1).unwrap();
        assert_eq!(tape.value(out), Tensor::filled(&[1, 2, 3, 3], 3.0));
    }

    #[test]
    fn uniform_alpha_seven_ops_coefficients() {
        // Six zero ops plus skip, all logits equal, beta = 1: the skip path
        // carries 1 + 1/7 and each candidate 1/7.
        let tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 1, 2, 2], 1.0));
        let alpha = tape.constant(Tensor::filled(&[7], 0.3));
        let mut ops = vec![LiftedOp {
            kind: OpKind::Skip,
            kernels: vec![],
            biases: vec![],
        }];
        for _ in 0..6 {
            ops.push(LiftedOp {
                kind: OpKind::None,
                kernels: vec![],
                biases: vec![],
            });
        }
        let out = mixed_edge_forward(&tape, x, alpha, 1.0, &ops, None, 1).unwrap();
        let expected = 1.0 + 1.0 / 7.0;
        for v in tape.value(out).data() {
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
        let w = row_softmax(&[0.3; 7]);
        for wi in w {
            assert!((wi - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn beta_zero_matches_plain_mixture_bitwise() {
        let mut r = rng::stream(5, "test");
        let tape = Tape::new();
        let x0 = Tensor::randn(&[2, 4, 6, 6], 1.0, &mut r);
        let x = tape.constant(x0.clone());
        let alpha0 = Tensor::randn(&[3], 1.0, &mut r);
        let alpha = tape.constant(alpha0.clone());
        let ops = vec![
            lifted_op(&tape, OpKind::None, 4, &mut r),
            lifted_op(&tape, OpKind::Skip, 4, &mut r),
            lifted_op(&tape, OpKind::Conv3x3, 4, &mut r),
        ];
        let mixed = mixed_edge_forward(&tape, x, alpha, 0.0, &ops, None, 1).unwrap();

        // Straight-line weighted sum with the same kernels.
        let w = row_softmax(alpha0.data());
        let mut expect: Option<Var> = None;
        for (i, op) in ops.iter().enumerate() {
            let o = apply_op(&tape, op.kind, &op.kernels, &op.biases, x, 1).unwrap();
            let term = tape.scale(o, w[i]).unwrap();
            expect = Some(match expect {
                Some(a) => tape.add(a, term).unwrap(),
                None => term,
            });
        }
        let diff = max_rel_diff(&tape.value(mixed), &tape.value(expect.unwrap()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn single_node_skip_cell_sums_inputs() {
        let mut space = SearchSpaceSpec::desk_default();
        space.num_nodes = 1;
        space.num_cells = 1;
        space.candidate_ops = vec![OpKind::Skip];
        space.aggregation = CellAggregation::Sum;
        space.channels = 3;
        let mut r = rng::stream(1, "init");
        let net = Supernet::init(&space, 3, 2, AuxBranchKind::IdentitySkip, &mut r).unwrap();

        let tape = Tape::new();
        let lifted = net.lift(&tape, false);
        let arch = ArchParams::init(&space, &mut r);
        let arch_vars = net.lift_arch(&tape, &arch, false);
        // Bypass the stem: evaluate the cell directly on two random inputs.
        let a = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut r);
        let b = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut r);
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let out = net
            .cell_forward(&tape, &lifted.cells[0], va, vb, arch_vars.normal, 0.0)
            .unwrap();
        let mut expected = Tensor::zeros(&[1, 3, 4, 4]);
        for i in 0..expected.numel() {
            expected.data_mut()[i] = a.data()[i] + b.data()[i];
        }
        assert!(max_rel_diff(&tape.value(out), &expected) < 1e-12);
    }

    #[test]
    fn learnable_projection_matches_identity_skip_at_init() {
        for aggregation in [CellAggregation::Sum, CellAggregation::ConcatProj] {
            let mut space = SearchSpaceSpec::minibench_default();
            space.aggregation = aggregation;
            let mut r1 = rng::stream(9, "init");
            let id_net = Supernet::init(&space, 1, 4, AuxBranchKind::IdentitySkip, &mut r1).unwrap();
            let mut proj_net = id_net.clone();
            proj_net.aux_kind = AuxBranchKind::LearnableProjection;
            for cell in &mut proj_net.cells {
                for edge in &mut cell.edges {
                    edge.aux_proj = Some(identity_1x1(space.channels));
                }
            }
            let mut r2 = rng::stream(10, "data");
            let arch = ArchParams::init(&space, &mut r2);
            let images = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut r2);

            let run = |net: &Supernet| {
                let tape = Tape::new();
                let lifted = net.lift(&tape, false);
                let arch_vars = net.lift_arch(&tape, &arch, false);
                let iv = tape.constant(images.clone());
                let out = net.forward(&tape, &lifted, &arch_vars, iv, 0.7).unwrap();
                tape.value(out)
            };
            assert_eq!(run(&id_net), run(&proj_net));
        }
    }

    #[test]
    fn chance_accuracy_for_untrained_supernet() {
        let space = SearchSpaceSpec::minibench_default();
        let mut accs = Vec::new();
        for seed in 0..20 {
            let mut r = rng::stream(seed, "init");
            let net = Supernet::init(&space, 1, 4, AuxBranchKind::IdentitySkip, &mut r).unwrap();
            let arch = ArchParams::init(&space, &mut r);
            let mut rd = rng::stream(seed, "data");
            let images = Tensor::randn(&[64, 1, 8, 8], 1.0, &mut rd);
            let labels: Vec<usize> = (0..64).map(|i| i % 4).collect();
            let batch = Batch {
                images,
                labels,
                num_classes: 4,
                tag: SplitTag::Whole,
            };
            let tape = Tape::new();
            let lifted = net.lift(&tape, false);
            let arch_vars = net.lift_arch(&tape, &arch, false);
            let (_, acc) = net
                .loss_and_accuracy(&tape, &lifted, &arch_vars, &batch, 1.0)
                .unwrap();
            accs.push(acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.25).abs() < 0.1, "mean accuracy {mean}");
    }

    #[test]
    fn skip_dominant_alpha_makes_features_linear() {
        let space = SearchSpaceSpec::minibench_default();
        let mut r = rng::stream(3, "init");
        let net = Supernet::init(&space, 1, 4, AuxBranchKind::IdentitySkip, &mut r).unwrap();
        let mut arch = ArchParams::zeros(&space);
        let skip = space.op_index(OpKind::Skip).unwrap();
        let cols = space.num_ops();
        for e in 0..space.num_edges() {
            arch.normal.data_mut()[e * cols + skip] = 10.0;
        }
        let feats = |images: &Tensor| {
            let tape = Tape::new();
            let lifted = net.lift(&tape, false);
            let arch_vars = net.lift_arch(&tape, &arch, false);
            let iv = tape.constant(images.clone());
            let logits = net.forward(&tape, &lifted, &arch_vars, iv, 0.0).unwrap();
            tape.value(logits)
        };
        let a = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut r);
        let b = Tensor::randn(&[1, 1, 8, 8], 1.0, &mut r);
        let mut sum = Tensor::zeros(&[1, 1, 8, 8]);
        for i in 0..64 {
            sum.data_mut()[i] = a.data()[i] + b.data()[i];
        }
        // Affine in the input: f(a+b) - f(0) ~ (f(a) - f(0)) + (f(b) - f(0)).
        let f0 = feats(&Tensor::zeros(&[1, 1, 8, 8]));
        let fa = feats(&a);
        let fb = feats(&b);
        let fsum = feats(&sum);
        for i in 0..fa.numel() {
            let lin = fa.data()[i] + fb.data()[i] - f0.data()[i];
            assert!(
                (fsum.data()[i] - lin).abs() < 1e-3,
                "nonlinear residue at {i}: {} vs {lin}",
                fsum.data()[i]
            );
        }
    }

    #[test]
    fn alpha_translation_leaves_forward_unchanged() {
        let space = SearchSpaceSpec::minibench_default();
        let mut r = rng::stream(12, "init");
        let net = Supernet::init(&space, 1, 4, AuxBranchKind::IdentitySkip, &mut r).unwrap();
        let arch = ArchParams::init(&space, &mut r);
        let mut shifted = arch.clone();
        let cols = space.num_ops();
        for c in 0..cols {
            shifted.normal.data_mut()[cols + c] += 3.7; // shift every logit of edge 1
        }
        let images = Tensor::randn(&[2, 1, 8, 8], 1.0, &mut r);
        let run = |a: &ArchParams| {
            let tape = Tape::new();
            let lifted = net.lift(&tape, false);
            let arch_vars = net.lift_arch(&tape, a, false);
            let iv = tape.constant(images.clone());
            tape.value(net.forward(&tape, &lifted, &arch_vars, iv, 0.5).unwrap())
        };
        assert!(max_rel_diff(&run(&arch), &run(&shifted)) < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let space = SearchSpaceSpec::minibench_default();
        let mut r = rng::stream(2, "init");
        let net = Supernet::init(&space, 1, 4, AuxBranchKind::IdentitySkip, &mut r).unwrap();
        let arch = ArchParams::init(&space, &mut r);
        let tape = Tape::new();
        let lifted = net.lift(&tape, false);
        let arch_vars = net.lift_arch(&tape, &arch, false);
        let bad = tape.constant(Tensor::zeros(&[1, 3, 8, 8])); // 3 channels, stem expects 1
        let err = net.forward(&tape, &lifted, &arch_vars, bad, 0.0).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn nan_loss_is_reported() {
        let space = SearchSpaceSpec::minibench_default();
        let mut r = rng::stream(2, "init");
        let net = Supernet::init(&space, 1, 4, AuxBranchKind::IdentitySkip, &mut r).unwrap();
        let arch = ArchParams::init(&space, &mut r);
        let batch = Batch {
            images: Tensor::filled(&[1, 1, 8, 8], f64::NAN),
            labels: vec![0],
            num_classes: 4,
            tag: SplitTag::Whole,
        };
        let tape = Tape::new();
        let lifted = net.lift(&tape, false);
        let arch_vars = net.lift_arch(&tape, &arch, false);
        let err = net
            .loss_and_accuracy(&tape, &lifted, &arch_vars, &batch, 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn mixed_cell_alpha_gradcheck() {
        let space = SearchSpaceSpec::minibench_default();
        let mut r = rng::stream(7, "init");
        let net = Supernet::init(&space, 1, 4, AuxBranchKind::IdentitySkip, &mut r).unwrap();
        let arch = ArchParams::init(&space, &mut r);
        let images = Tensor::randn(&[4, 1, 8, 8], 1.0, &mut r);
        let labels: Vec<usize> = vec![0, 1, 2, 3];
        let batch = Batch {
            images,
            labels,
            num_classes: 4,
            tag: SplitTag::Whole,
        };
        let err = crate::tape::grad_check(
            |tape, alpha| {
                let lifted = net.lift(tape, false);
                let arch_vars = ArchVars {
                    normal: alpha,
                    reduce: None,
                };
                let images = tape.constant(batch.images.clone());
                let logits = net.forward(tape, &lifted, &arch_vars, images, 0.6)?;
                let onehot = tape.constant(batch.onehot());
                tape.cross_entropy_logits(logits, onehot)
            },
            &arch.normal,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "alpha gradcheck err {err}");
    }
}
