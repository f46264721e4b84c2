//! Define-by-run reverse-mode autodiff over `ndarray` dynamic tensors.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! execute eagerly (so shapes and values are immediately inspectable) while
//! recording an [`Op`] per node; [`Tape::backward`] walks the nodes in
//! reverse creation order — which is already a topological order — and
//! accumulates gradients into the leaves.
//!
//! Design points that the rest of the crate relies on:
//!
//! - **Determinism.** All reductions run in a fixed loop order and nothing
//!   is threaded, so two identical forward/backward passes are bitwise
//!   identical.
//! - **Named parameters.** [`Tape::param`] registers a leaf under a
//!   hierarchical name (`"rfem1.fusion.conv.weight"`); the trainer reads
//!   gradients back by name, which keeps the optimizer decoupled from the
//!   module tree.
//! - **Memory.** Gradients of interior nodes are dropped as soon as they
//!   have been propagated; only leaf gradients survive the backward pass.
//! - **Batch norm bookkeeping.** Forward passes in training mode push the
//!   new running statistics into the tape ([`Tape::take_stat_updates`])
//!   instead of mutating the layers, so modules stay `&self` during the
//!   forward pass.
//!
//! Shape violations inside the graph are bugs, not user input, and panic
//! with context; user-facing validation lives in the network modules.

mod batchnorm;
mod conv;
pub mod check;
mod resize;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::scalar::Scalar;

pub use batchnorm::BnMode;
pub use resize::{resize_bilinear_2d, AxisTable};

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// New running statistics produced by a batch-norm node in training mode.
/// The trainer applies these to the owning layer after the step.
#[derive(Debug, Clone)]
pub struct StatUpdate<T: Scalar> {
    /// Buffer name prefix, e.g. `"backbone.stem0.bn"`; the layer owns
    /// `<name>.running_mean` and `<name>.running_var`.
    pub name: String,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
}

/// One recorded operation; parents are earlier nodes on the same tape.
enum Op<T: Scalar> {
    /// Constant, input, or parameter: nothing to propagate.
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Per-channel mean used at forward time (batch or running).
        mean: ArrayD<T>,
        /// Per-channel `1/sqrt(var + eps)` used at forward time.
        invstd: ArrayD<T>,
        /// Training mode differentiates through the batch statistics;
        /// eval mode treats them as constants.
        train: bool,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    /// `mul * x + add`, elementwise with scalar coefficients; only the
    /// slope survives into the backward pass.
    ScalarAffine {
        input: NodeId,
        mul: T,
    },
    /// Elementwise product with a constant tensor.
    MulConst {
        input: NodeId,
        coeff: Arc<ArrayD<T>>,
    },
    /// `[N,C,H,W] ∘ [N,1,H,W]`, the gate broadcast across channels.
    MulChannelGate {
        wide: NodeId,
        gate: NodeId,
    },
    /// Tensor scaled by a 0-dim node (a learnable scalar).
    ScaleByScalar {
        tensor: NodeId,
        scalar: NodeId,
    },
    ConcatChannels {
        inputs: Vec<NodeId>,
    },
    BilinearResize {
        input: NodeId,
        rows: AxisTable<T>,
        cols: AxisTable<T>,
    },
    /// Max over the channel axis, `[N,C,H,W] → [N,1,H,W]`; ties take the
    /// first (lowest-index) channel.
    ChannelMax {
        input: NodeId,
        argmax: Vec<u32>,
    },
    /// Sum of all elements, producing a 0-dim node.
    SumAll {
        input: NodeId,
    },
    /// Sum per leading-axis slice, `[N, ...] → [N]`.
    SumPerSample {
        input: NodeId,
    },
    /// `Σ coeff ∘ x`, producing a 0-dim node.
    DotConst {
        input: NodeId,
        coeff: Arc<ArrayD<T>>,
    },
    /// Elementwise binary cross-entropy on logits against a constant
    /// target, in the overflow-safe form `max(x,0) − x·t + ln(1+e^(−|x|))`.
    BceWithLogits {
        logits: NodeId,
        target: Arc<ArrayD<T>>,
    },
    /// Sum of 0-dim nodes, producing a 0-dim node.
    ScalarSum {
        inputs: Vec<NodeId>,
    },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// The recording. One tape corresponds to one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant leaf: gradients never flow into it.
    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// An input leaf; pass `needs_grad = true` to collect `d(root)/d(input)`
    /// (used by the finite-difference harnesses).
    pub fn input(&mut self, value: ArrayD<T>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// A parameter leaf registered under `name`. Names must be unique per
    /// tape; a collision means two modules were bound under the same scope.
    pub fn param(&mut self, name: &str, value: ArrayD<T>) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        let previous = self.params.insert(name.to_string(), id);
        assert!(previous.is_none(), "duplicate parameter name: {name}");
        id
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    /// Value of a 0-dim node.
    pub fn scalar_value(&self, id: NodeId) -> T {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.ndim(), 0, "scalar_value on a {}-dim node", v.ndim());
        v[IxDyn(&[])]
    }

    /// Gradient accumulated into a leaf by the last [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_grad(&self, name: &str) -> Option<&ArrayD<T>> {
        self.params.get(name).and_then(|id| self.nodes[id.0].grad.as_ref())
    }

    /// Drain the batch-norm running-stat updates recorded by this pass.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    // ----- elementwise and scalar ops -------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "add: operand shapes differ"
        );
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "mul: operand shapes differ"
        );
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul { a, b }, needs)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "div: operand shapes differ"
        );
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Div { a, b }, needs)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let zero = T::zero();
        let value = self.nodes[input.0].value.mapv(|v| if v > zero { v } else { zero });
        let needs = self.needs(input);
        self.push(value, Op::Relu { input }, needs)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input.0].value.mapv(sigmoid_stable);
        let needs = self.needs(input);
        self.push(value, Op::Sigmoid { input }, needs)
    }

    /// `mul * x + add`, elementwise.
    pub fn scalar_affine(&mut self, input: NodeId, mul: T, add: T) -> NodeId {
        let value = self.nodes[input.0].value.mapv(|v| mul * v + add);
        let needs = self.needs(input);
        self.push(value, Op::ScalarAffine { input, mul }, needs)
    }

    pub fn mul_const(&mut self, input: NodeId, coeff: Arc<ArrayD<T>>) -> NodeId {
        assert_eq!(
            self.value(input).shape(),
            coeff.shape(),
            "mul_const: coefficient shape differs"
        );
        let value = &self.nodes[input.0].value * &*coeff;
        let needs = self.needs(input);
        self.push(value, Op::MulConst { input, coeff }, needs)
    }

    /// `[N,C,H,W] ∘ [N,1,H,W]` with the gate broadcast across channels.
    pub fn mul_channel_gate(&mut self, wide: NodeId, gate: NodeId) -> NodeId {
        let ws = self.value(wide).shape().to_vec();
        let gs = self.value(gate).shape();
        assert_eq!(ws.len(), 4, "mul_channel_gate: wide operand must be 4-d");
        assert!(
            gs == [ws[0], 1, ws[2], ws[3]],
            "mul_channel_gate: gate shape {gs:?} does not match wide {ws:?}"
        );
        let mut value = self.nodes[wide.0].value.clone();
        let gate_v = &self.nodes[gate.0].value;
        for c in 0..ws[1] {
            let mut ch = value.slice_axis_mut(Axis(1), ndarray::Slice::from(c..c + 1));
            ch *= gate_v;
        }
        let needs = self.needs(wide) || self.needs(gate);
        self.push(value, Op::MulChannelGate { wide, gate }, needs)
    }

    /// Tensor times a learnable 0-dim scalar node.
    pub fn scale_by(&mut self, tensor: NodeId, scalar: NodeId) -> NodeId {
        assert_eq!(
            self.value(scalar).ndim(),
            0,
            "scale_by: scale operand must be 0-dim"
        );
        let s = self.scalar_value(scalar);
        let value = self.nodes[tensor.0].value.mapv(|v| v * s);
        let needs = self.needs(tensor) || self.needs(scalar);
        self.push(value, Op::ScaleByScalar { tensor, scalar }, needs)
    }

    pub fn concat_channels(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "concat_channels: no inputs");
        let views: Vec<_> = ids.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views)
            .expect("concat_channels: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        let needs = ids.iter().any(|id| self.needs(*id));
        self.push(value, Op::ConcatChannels { inputs: ids.to_vec() }, needs)
    }

    /// Bilinear resize (half-pixel centers, edges clamped) of a 4-d tensor
    /// to `out_hw`. Resizing to the input size is the identity and records
    /// no node.
    pub fn resize_bilinear(&mut self, input: NodeId, out_hw: (usize, usize)) -> NodeId {
        let shape = self.value(input).shape();
        assert_eq!(shape.len(), 4, "resize_bilinear: input must be 4-d");
        let (in_h, in_w) = (shape[2], shape[3]);
        if (in_h, in_w) == out_hw {
            return input;
        }
        let rows = AxisTable::new(in_h, out_hw.0);
        let cols = AxisTable::new(in_w, out_hw.1);
        let value = resize::resize_forward(&self.nodes[input.0].value, &rows, &cols);
        let needs = self.needs(input);
        self.push(value, Op::BilinearResize { input, rows, cols }, needs)
    }

    /// Maximum over channels, `[N,C,H,W] → [N,1,H,W]`.
    pub fn channel_max(&mut self, input: NodeId) -> NodeId {
        let shape = self.value(input).shape();
        assert_eq!(shape.len(), 4, "channel_max: input must be 4-d");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let x = &self.nodes[input.0].value;
        let mut value = ArrayD::zeros(IxDyn(&[n, 1, h, w]));
        let mut argmax = vec![0u32; n * h * w];
        for in_ in 0..n {
            for iy in 0..h {
                for ix in 0..w {
                    let mut best = x[[in_, 0, iy, ix]];
                    let mut best_c = 0u32;
                    for ic in 1..c {
                        let v = x[[in_, ic, iy, ix]];
                        if v > best {
                            best = v;
                            best_c = ic as u32;
                        }
                    }
                    value[[in_, 0, iy, ix]] = best;
                    argmax[(in_ * h + iy) * w + ix] = best_c;
                }
            }
        }
        let needs = self.needs(input);
        self.push(value, Op::ChannelMax { input, argmax }, needs)
    }

    // ----- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let value = ndarray::arr0(self.nodes[input.0].value.sum()).into_dyn();
        let needs = self.needs(input);
        self.push(value, Op::SumAll { input }, needs)
    }

    /// `[N, ...] → [N]`, summing everything but the leading axis.
    pub fn sum_per_sample(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input.0].value;
        assert!(x.ndim() >= 1, "sum_per_sample: input must have a leading axis");
        let n = x.shape()[0];
        let mut value = ArrayD::zeros(IxDyn(&[n]));
        for i in 0..n {
            value[[i]] = x.index_axis(Axis(0), i).sum();
        }
        let needs = self.needs(input);
        self.push(value, Op::SumPerSample { input }, needs)
    }

    /// `Σ coeff ∘ x` as a 0-dim node.
    pub fn dot_const(&mut self, input: NodeId, coeff: Arc<ArrayD<T>>) -> NodeId {
        assert_eq!(
            self.value(input).shape(),
            coeff.shape(),
            "dot_const: coefficient shape differs"
        );
        let mut acc = T::zero();
        ndarray::Zip::from(&self.nodes[input.0].value)
            .and(&*coeff)
            .for_each(|&v, &c| acc += v * c);
        let value = ndarray::arr0(acc).into_dyn();
        let needs = self.needs(input);
        self.push(value, Op::DotConst { input, coeff }, needs)
    }

    /// Elementwise binary cross-entropy between logits and a constant
    /// target in `[0,1]`, without reduction.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: Arc<ArrayD<T>>) -> NodeId {
        assert_eq!(
            self.value(logits).shape(),
            target.shape(),
            "bce_with_logits: target shape differs"
        );
        let mut value = self.nodes[logits.0].value.clone();
        ndarray::Zip::from(&mut value).and(&*target).for_each(|x, &t| {
            let v = *x;
            *x = v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p();
        });
        let needs = self.needs(logits);
        self.push(value, Op::BceWithLogits { logits, target }, needs)
    }

    /// Sum of 0-dim nodes.
    pub fn scalar_sum(&mut self, inputs: &[NodeId]) -> NodeId {
        assert!(!inputs.is_empty(), "scalar_sum: no inputs");
        let mut acc = T::zero();
        for id in inputs {
            acc += self.scalar_value(*id);
        }
        let needs = inputs.iter().any(|id| self.needs(*id));
        self.push(
            ndarray::arr0(acc).into_dyn(),
            Op::ScalarSum { inputs: inputs.to_vec() },
            needs,
        )
    }

    // ----- structured ops ---------------------------------------------------

    /// 2-d convolution, NCHW input, `[Cout, Cin, kh, kw]` weight.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> NodeId {
        let value = conv::conv2d_forward(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            stride,
            pad,
        );
        let needs = self.needs(input)
            || self.needs(weight)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            needs,
        )
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// In [`BnMode::Train`] the batch statistics normalize the input, the
    /// backward pass differentiates through them, and the refreshed running
    /// statistics are queued on the tape (see [`Tape::take_stat_updates`]).
    /// In [`BnMode::Eval`] the layer's running statistics are used and
    /// treated as constants.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        mode: BnMode<'_, T>,
    ) -> NodeId {
        let (value, mean, invstd, train, update) = batchnorm::forward(
            &self.nodes[input.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
            mode,
        );
        if let Some(u) = update {
            self.stat_updates.push(u);
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                invstd,
                train,
            },
            needs,
        )
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse pass from `root` (any shape; the seed gradient is all ones,
    /// so a 0-dim `root` gives plain `d root / d leaf`). Leaf gradients
    /// accumulate across calls until the tape is dropped.
    pub fn backward(&mut self, root: NodeId) {
        {
            let node = &mut self.nodes[root.0];
            let seed = ArrayD::from_elem(node.value.raw_dim(), T::one());
            accumulate(&mut node.grad, seed);
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep the gradient for the caller
            }
            let grad = self.nodes[i].grad.take().expect("checked above");
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            backprop(head, node, grad);
        }
    }
}

/// Add `contrib` into an optional gradient slot.
fn accumulate<T: Scalar>(slot: &mut Option<ArrayD<T>>, contrib: ArrayD<T>) {
    match slot {
        Some(g) => *g += &contrib,
        None => *slot = Some(contrib),
    }
}

/// Accumulate into a parent if it participates in the backward pass.
fn acc_into<T: Scalar>(head: &mut [Node<T>], parent: NodeId, contrib: ArrayD<T>) {
    let node = &mut head[parent.0];
    if node.needs_grad {
        accumulate(&mut node.grad, contrib);
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Propagate `grad` at `node` into its parents (all strictly earlier on the
/// tape, hence inside `head`). Takes the gradient by value: arms that can
/// reuse its buffer for their own contribution do, which matters because
/// these are the biggest tensors the backward pass touches.
fn backprop<T: Scalar>(head: &mut [Node<T>], node: &Node<T>, grad: ArrayD<T>) {
    match &node.op {
        Op::Leaf => unreachable!("leaves are skipped by the backward driver"),

        Op::Add { a, b } => {
            if head[a.0].needs_grad && head[b.0].needs_grad {
                acc_into(head, *a, grad.clone());
                acc_into(head, *b, grad);
            } else if head[a.0].needs_grad {
                acc_into(head, *a, grad);
            } else {
                acc_into(head, *b, grad);
            }
        }

        Op::Mul { a, b } => {
            if head[a.0].needs_grad {
                let da = &grad * &head[b.0].value;
                acc_into(head, *a, da);
            }
            if head[b.0].needs_grad {
                let mut db = grad;
                db *= &head[a.0].value;
                acc_into(head, *b, db);
            }
        }

        Op::Div { a, b } => {
            if head[a.0].needs_grad {
                let da = &grad / &head[b.0].value;
                acc_into(head, *a, da);
            }
            if head[b.0].needs_grad {
                // d(a/b)/db = −a / b²
                let mut db = grad;
                db *= &head[a.0].value;
                let bv = &head[b.0].value;
                ndarray::Zip::from(&mut db).and(bv).for_each(|g, &b| *g = -*g / (b * b));
                acc_into(head, *b, db);
            }
        }

        Op::Relu { input } => {
            let zero = T::zero();
            let mut dx = grad;
            ndarray::Zip::from(&mut dx)
                .and(&node.value)
                .for_each(|g, &y| {
                    if y <= zero {
                        *g = zero;
                    }
                });
            acc_into(head, *input, dx);
        }

        Op::Sigmoid { input } => {
            let mut dx = grad;
            ndarray::Zip::from(&mut dx)
                .and(&node.value)
                .for_each(|g, &y| *g = *g * y * (T::one() - y));
            acc_into(head, *input, dx);
        }

        Op::ScalarAffine { input, mul } => {
            let m = *mul;
            let mut dx = grad;
            dx.mapv_inplace(|g| g * m);
            acc_into(head, *input, dx);
        }

        Op::MulConst { input, coeff } => {
            acc_into(head, *input, grad * &**coeff);
        }

        Op::MulChannelGate { wide, gate } => {
            let channels = node.value.shape()[1];
            if head[gate.0].needs_grad {
                let prod = &grad * &head[wide.0].value;
                let mut dg = prod
                    .slice_axis(Axis(1), ndarray::Slice::from(0..1))
                    .to_owned();
                for c in 1..channels {
                    dg += &prod.slice_axis(Axis(1), ndarray::Slice::from(c..c + 1));
                }
                acc_into(head, *gate, dg);
            }
            if head[wide.0].needs_grad {
                let mut dw = grad;
                let gate_v = &head[gate.0].value;
                for c in 0..channels {
                    let mut ch = dw.slice_axis_mut(Axis(1), ndarray::Slice::from(c..c + 1));
                    ch *= gate_v;
                }
                acc_into(head, *wide, dw);
            }
        }

        Op::ScaleByScalar { tensor, scalar } => {
            let s = head[scalar.0].value[IxDyn(&[])];
            if head[scalar.0].needs_grad {
                let mut acc = T::zero();
                ndarray::Zip::from(&grad)
                    .and(&head[tensor.0].value)
                    .for_each(|&g, &t| acc += g * t);
                acc_into(head, *scalar, ndarray::arr0(acc).into_dyn());
            }
            if head[tensor.0].needs_grad {
                let mut dx = grad;
                dx.mapv_inplace(|g| g * s);
                acc_into(head, *tensor, dx);
            }
        }

        Op::ConcatChannels { inputs } => {
            let mut offset = 0;
            for id in inputs {
                let c = head[id.0].value.shape()[1];
                let piece = grad
                    .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + c))
                    .to_owned();
                acc_into(head, *id, piece);
                offset += c;
            }
        }

        Op::BilinearResize { input, rows, cols } => {
            let dx = resize::resize_backward(&grad, head[input.0].value.shape(), rows, cols);
            acc_into(head, *input, dx);
        }

        Op::ChannelMax { input, argmax } => {
            let shape = head[input.0].value.shape().to_vec();
            let (n, h, w) = (shape[0], shape[2], shape[3]);
            let mut dx = ArrayD::zeros(IxDyn(&shape));
            for in_ in 0..n {
                for iy in 0..h {
                    for ix in 0..w {
                        let c = argmax[(in_ * h + iy) * w + ix] as usize;
                        dx[[in_, c, iy, ix]] = grad[[in_, 0, iy, ix]];
                    }
                }
            }
            acc_into(head, *input, dx);
        }

        Op::SumAll { input } => {
            let g = grad[IxDyn(&[])];
            let shape = head[input.0].value.raw_dim();
            acc_into(head, *input, ArrayD::from_elem(shape, g));
        }

        Op::SumPerSample { input } => {
            let shape = head[input.0].value.raw_dim();
            let mut dx = ArrayD::zeros(shape);
            let n = dx.shape()[0];
            for i in 0..n {
                let g = grad[[i]];
                dx.index_axis_mut(Axis(0), i).fill(g);
            }
            acc_into(head, *input, dx);
        }

        Op::DotConst { input, coeff } => {
            let g = grad[IxDyn(&[])];
            acc_into(head, *input, coeff.mapv(|c| c * g));
        }

        Op::BceWithLogits { logits, target } => {
            // d/dx [max(x,0) − x·t + ln(1+e^(−|x|))] = σ(x) − t
            let mut dx = grad.clone();
            ndarray::Zip::from(&mut dx)
                .and(&head[logits.0].value)
                .and(&**target)
                .for_each(|g, &x, &t| *g = *g * (sigmoid_stable(x) - t));
            acc_into(head, *logits, dx);
        }

        Op::ScalarSum { inputs } => {
            for id in inputs {
                acc_into(head, *id, grad.clone());
            }
        }

        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            let (dx, dw, db) = conv::conv2d_backward(
                &head[input.0].value,
                &head[weight.0].value,
                grad,
                *stride,
                *pad,
                head[input.0].needs_grad,
                head[weight.0].needs_grad,
                bias.map(|b| head[b.0].needs_grad).unwrap_or(false),
            );
            if let Some(dx) = dx {
                acc_into(head, *input, dx);
            }
            if let Some(dw) = dw {
                acc_into(head, *weight, dw);
            }
            if let (Some(db), Some(b)) = (db, bias) {
                acc_into(head, *b, db);
            }
        }

        Op::BatchNorm {
            input,
            gamma,
            beta,
            mean,
            invstd,
            train,
        } => {
            let (dx, dgamma, dbeta) = batchnorm::backward(
                &head[input.0].value,
                &head[gamma.0].value,
                mean,
                invstd,
                grad,
                *train,
                head[input.0].needs_grad,
            );
            if let Some(dx) = dx {
                acc_into(head, *input, dx);
            }
            acc_into(head, *gamma, dgamma);
            acc_into(head, *beta, dbeta);
        }
    }
}
