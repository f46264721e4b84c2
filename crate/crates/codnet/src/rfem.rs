//! Residual multi-branch feature enhancement.
//!
//! Each pyramid level is first reduced to the decoder width, then passed
//! through four branches that accumulate residually: branch `k` transforms
//! the reduced feature plus the previous branch's output, so deeper
//! branches see progressively re-enhanced signal. Branch transforms are
//! factorized (1×1, then 1×3, then 3×1) to stay cheap. The concatenated
//! branch outputs are fused and added to a 1×1 shortcut of the raw input,
//! with the ReLU after the sum.
//!
//! For tests, [`BranchMode::Identity`] replaces both the reduction and the
//! branch transforms with the identity, which makes the recursion exactly
//! computable: branch `k` must output `k` times the input feature.

use ndarray::ArrayD;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{join, ConvBn, ConvBnRelu, Mode, ParamVisit};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Channel width of every enhanced feature and decoder tensor.
pub const FEATURE_WIDTH: usize = 64;

/// Number of residual branches.
pub const BRANCHES: usize = 4;

/// Whether branch transforms run their convolutions or pass through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Learned,
    /// Test hook: reduction and branch transforms become the identity,
    /// exposing the bare residual recursion. Requires a 64-channel input.
    Identity,
}

/// Factorized branch transform: 1×1 → 1×3 → 3×1, each conv+BN+ReLU.
struct BranchConv<T: Scalar> {
    point: ConvBnRelu<T>,
    row: ConvBnRelu<T>,
    col: ConvBnRelu<T>,
}

impl<T: Scalar> BranchConv<T> {
    fn new(rng: &mut ChaCha20Rng) -> Self {
        let w = FEATURE_WIDTH;
        BranchConv {
            point: ConvBnRelu::new(w, w, (1, 1), (1, 1), (0, 0), rng),
            row: ConvBnRelu::new(w, w, (1, 3), (1, 1), (0, 1), rng),
            col: ConvBnRelu::new(w, w, (3, 1), (1, 1), (1, 0), rng),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: NodeId, mode: Mode) -> NodeId {
        let x = self.point.forward(tape, &join(prefix, "point"), x, mode);
        let x = self.row.forward(tape, &join(prefix, "row"), x, mode);
        self.col.forward(tape, &join(prefix, "col"), x, mode)
    }
}

impl<T: Scalar> ParamVisit<T> for BranchConv<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.point.visit_params(&join(prefix, "point"), f);
        self.row.visit_params(&join(prefix, "row"), f);
        self.col.visit_params(&join(prefix, "col"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.point.visit_params_mut(&join(&prefix, "point"), f);
        self.row.visit_params_mut(&join(&prefix, "row"), f);
        self.col.visit_params_mut(&join(&prefix, "col"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.point.visit_buffers(&join(prefix, "point"), f);
        self.row.visit_buffers(&join(prefix, "row"), f);
        self.col.visit_buffers(&join(prefix, "col"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.point.visit_buffers_mut(&join(&prefix, "point"), f);
        self.row.visit_buffers_mut(&join(&prefix, "row"), f);
        self.col.visit_buffers_mut(&join(&prefix, "col"), f);
    }
}

/// Intermediate node ids of one enhancement pass, for tests.
pub struct RfemTrace {
    /// The reduced feature the branches consume.
    pub reduced: NodeId,
    /// Output of each residual branch.
    pub branch_outputs: [NodeId; BRANCHES],
    /// The enhanced 64-channel feature.
    pub output: NodeId,
}

/// One level's enhancement module.
pub struct Rfem<T: Scalar> {
    in_channels: usize,
    reduce: ConvBnRelu<T>,
    branches: [BranchConv<T>; BRANCHES],
    fusion: ConvBn<T>,
    shortcut: ConvBn<T>,
}

impl<T: Scalar> Rfem<T> {
    pub fn new(in_channels: usize, rng: &mut ChaCha20Rng) -> Self {
        let w = FEATURE_WIDTH;
        Rfem {
            in_channels,
            reduce: ConvBnRelu::new(in_channels, w, (1, 1), (1, 1), (0, 0), rng),
            branches: [
                BranchConv::new(rng),
                BranchConv::new(rng),
                BranchConv::new(rng),
                BranchConv::new(rng),
            ],
            fusion: ConvBn::same(BRANCHES * w, w, 3, rng),
            shortcut: ConvBn::new(in_channels, w, (1, 1), (1, 1), (0, 0), rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: NodeId, mode: Mode) -> Result<NodeId> {
        Ok(self.forward_traced(tape, prefix, x, mode, BranchMode::Learned)?.output)
    }

    /// Forward pass that exposes the branch recursion.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        x: NodeId,
        mode: Mode,
        branch_mode: BranchMode,
    ) -> Result<RfemTrace> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape(
                "feature enhancement input",
                format!("[N,{},H,W]", self.in_channels),
                format!("{shape:?}"),
            ));
        }
        if branch_mode == BranchMode::Identity && self.in_channels != FEATURE_WIDTH {
            return Err(Error::InvalidInput(format!(
                "identity branch mode needs a {FEATURE_WIDTH}-channel input, got {}",
                self.in_channels
            )));
        }

        let reduced = match branch_mode {
            BranchMode::Learned => self.reduce.forward(tape, &join(prefix, "reduce"), x, mode),
            BranchMode::Identity => x,
        };

        // Branch k consumes (reduced + previous output); the first sees
        // the reduced feature alone.
        let mut branch_outputs = [reduced; BRANCHES];
        let mut prev: Option<NodeId> = None;
        for (k, branch) in self.branches.iter().enumerate() {
            let input = match prev {
                None => reduced,
                Some(p) => tape.add(reduced, p),
            };
            let out = match branch_mode {
                BranchMode::Learned => {
                    branch.forward(tape, &format!("{}{}", join(prefix, "branch"), k + 1), input, mode)
                }
                BranchMode::Identity => input,
            };
            branch_outputs[k] = out;
            prev = Some(out);
        }

        let stacked = tape.concat_channels(&branch_outputs);
        let fused = self.fusion.forward(tape, &join(prefix, "fusion"), stacked, mode);
        let short = self.shortcut.forward(tape, &join(prefix, "shortcut"), x, mode);
        let summed = tape.add(fused, short);
        let output = tape.relu(summed);
        Ok(RfemTrace {
            reduced,
            branch_outputs,
            output,
        })
    }
}

impl<T: Scalar> ParamVisit<T> for Rfem<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.reduce.visit_params(&join(prefix, "reduce"), f);
        for (k, b) in self.branches.iter().enumerate() {
            b.visit_params(&format!("{}{}", join(prefix, "branch"), k + 1), f);
        }
        self.fusion.visit_params(&join(prefix, "fusion"), f);
        self.shortcut.visit_params(&join(prefix, "shortcut"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.reduce.visit_params_mut(&join(&prefix, "reduce"), f);
        for (k, b) in self.branches.iter_mut().enumerate() {
            b.visit_params_mut(&format!("{}{}", join(&prefix, "branch"), k + 1), f);
        }
        self.fusion.visit_params_mut(&join(&prefix, "fusion"), f);
        self.shortcut.visit_params_mut(&join(&prefix, "shortcut"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.reduce.visit_buffers(&join(prefix, "reduce"), f);
        for (k, b) in self.branches.iter().enumerate() {
            b.visit_buffers(&format!("{}{}", join(prefix, "branch"), k + 1), f);
        }
        self.fusion.visit_buffers(&join(prefix, "fusion"), f);
        self.shortcut.visit_buffers(&join(prefix, "shortcut"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.reduce.visit_buffers_mut(&join(&prefix, "reduce"), f);
        for (k, b) in self.branches.iter_mut().enumerate() {
            b.visit_buffers_mut(&format!("{}{}", join(&prefix, "branch"), k + 1), f);
        }
        self.fusion.visit_buffers_mut(&join(&prefix, "fusion"), f);
        self.shortcut.visit_buffers_mut(&join(&prefix, "shortcut"), f);
    }
}
