//! Layers: thin structs that own parameter arrays and bind them onto a
//! [`Tape`] by hierarchical name at forward time.
//!
//! A layer is plain data between steps; `forward` clones its parameters
//! onto the tape under `"<prefix>.<field>"` names and records the op. The
//! [`ParamVisit`] trait walks the same names over the structs themselves,
//! which is what the optimizer, the checkpoint writer and the
//! consistency tests use — if a parameter is visited but never bound (or
//! vice versa) the name-set comparison test in `network` fails.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::scalar::Scalar;
use crate::tape::{BnMode, NodeId, StatUpdate, Tape};

/// Forward-pass mode: training differentiates through batch statistics and
/// queues running-stat updates; eval applies stored statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `prefix.name`, or just `name` at the root.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform walk over named parameters and (non-learnable) buffers.
pub trait ParamVisit<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>));
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &ArrayD<T>)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {}
}

/// One standard-normal draw (Box–Muller on two uniform draws, so the
/// stream advances deterministically regardless of caller).
pub fn normal_draw(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// 2-d convolution layer, weight `[Cout, Cin, kh, kw]`.
pub struct Conv2d<T: Scalar> {
    pub weight: ArrayD<T>,
    pub bias: Option<ArrayD<T>>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weight init (`std = sqrt(2 / fan_in)`), zero bias.
    /// Immediately-normalized layers should pass `bias = false`: a bias
    /// followed by batch norm is cancelled by the mean subtraction and its
    /// gradient is structurally zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = (cin * kernel.0 * kernel.1) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin, kernel.0, kernel.1]), || {
            T::c(std * normal_draw(rng))
        });
        let bias = bias.then(|| ArrayD::zeros(IxDyn(&[cout])));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: NodeId) -> NodeId {
        let w = tape.param(&join(prefix, "weight"), self.weight.clone());
        let b = self
            .bias
            .as_ref()
            .map(|b| tape.param(&join(prefix, "bias"), b.clone()));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl<T: Scalar> ParamVisit<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Per-channel batch normalization with running statistics.
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: ArrayD<T>,
    pub beta: ArrayD<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            beta: ArrayD::zeros(IxDyn(&[channels])),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: NodeId, mode: Mode) -> NodeId {
        let g = tape.param(&join(prefix, "gamma"), self.gamma.clone());
        let b = tape.param(&join(prefix, "beta"), self.beta.clone());
        let bn_mode = match mode {
            Mode::Train => BnMode::Train {
                momentum: self.momentum,
                running_mean: &self.running_mean,
                running_var: &self.running_var,
                update_name: prefix,
            },
            Mode::Eval => BnMode::Eval {
                running_mean: &self.running_mean,
                running_var: &self.running_var,
            },
        };
        tape.batch_norm(x, g, b, self.eps, bn_mode)
    }
}

impl<T: Scalar> ParamVisit<T> for BatchNorm2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Convolution + batch norm, no activation — for paths whose ReLU comes
/// after a residual-style addition.
pub struct ConvBn<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut ChaCha20Rng,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(cin, cout, kernel, stride, pad, false, rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    /// Square-kernel block with "same" padding at stride 1.
    pub fn same(cin: usize, cout: usize, k: usize, rng: &mut ChaCha20Rng) -> Self {
        Self::new(cin, cout, (k, k), (1, 1), (k / 2, k / 2), rng)
    }

    pub fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: NodeId, mode: Mode) -> NodeId {
        let c = self.conv.forward(tape, &join(prefix, "conv"), x);
        self.bn.forward(tape, &join(prefix, "bn"), c, mode)
    }
}

impl<T: Scalar> ParamVisit<T> for ConvBn<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.bn.visit_buffers_mut(&join(prefix, "bn"), f);
    }
}

/// Convolution + batch norm + ReLU, the workhorse block of every module.
pub struct ConvBnRelu<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut ChaCha20Rng,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(cin, cout, kernel, stride, pad, false, rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    /// Square-kernel block with "same" padding at stride 1.
    pub fn same(cin: usize, cout: usize, k: usize, rng: &mut ChaCha20Rng) -> Self {
        Self::new(cin, cout, (k, k), (1, 1), (k / 2, k / 2), rng)
    }

    pub fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: NodeId, mode: Mode) -> NodeId {
        let c = self.conv.forward(tape, &join(prefix, "conv"), x);
        let n = self.bn.forward(tape, &join(prefix, "bn"), c, mode);
        tape.relu(n)
    }
}

impl<T: Scalar> ParamVisit<T> for ConvBnRelu<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.bn.visit_buffers_mut(&join(prefix, "bn"), f);
    }
}

/// Apply queued batch-norm running-stat updates to a module tree by name.
/// `prefix` must be the scope the tree was bound under at forward time.
pub fn apply_stat_updates<T: Scalar>(
    module: &mut dyn ParamVisit<T>,
    prefix: &str,
    updates: Vec<StatUpdate<T>>,
) {
    if updates.is_empty() {
        return;
    }
    let by_name: std::collections::BTreeMap<String, StatUpdate<T>> = updates
        .into_iter()
        .map(|u| (u.name.clone(), u))
        .collect();
    let mut applied = std::collections::BTreeSet::new();
    module.visit_buffers_mut(prefix, &mut |name, buf| {
        if let Some(stripped) = name.strip_suffix(".running_mean") {
            if let Some(u) = by_name.get(stripped) {
                buf.assign(&u.running_mean);
                applied.insert(stripped.to_string());
            }
        } else if let Some(stripped) = name.strip_suffix(".running_var") {
            if let Some(u) = by_name.get(stripped) {
                buf.assign(&u.running_var);
            }
        }
    });
    assert_eq!(
        applied.len(),
        by_name.len(),
        "stat updates without matching buffers: {:?}",
        by_name.keys().filter(|k| !applied.contains(*k)).collect::<Vec<_>>()
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_per_seed() {
        let mk = |seed| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            Conv2d::<f64>::new(3, 8, (3, 3), (1, 1), (1, 1), true, &mut rng).weight
        };
        assert_eq!(mk(7), mk(7));
        assert_ne!(mk(7), mk(8));
    }

    #[test]
    fn he_init_scale_is_plausible() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let conv = Conv2d::<f64>::new(64, 64, (3, 3), (1, 1), (1, 1), false, &mut rng);
        let n = conv.weight.len() as f64;
        let mean = conv.weight.sum() / n;
        let var = conv.weight.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        let expect = 2.0 / (64.0 * 9.0);
        assert!(mean.abs() < 0.01);
        assert!((var / expect - 1.0).abs() < 0.1, "var {var} vs expected {expect}");
    }

    #[test]
    fn forward_binds_names_that_match_the_visitor() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let block = ConvBnRelu::<f64>::same(3, 4, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 6, 6])));
        block.forward(&mut tape, "stem", x, Mode::Eval);
        let bound: Vec<String> = tape.param_names().map(String::from).collect();
        let mut visited = Vec::new();
        block.visit_params("stem", &mut |n, _| visited.push(n.to_string()));
        visited.sort();
        assert_eq!(bound, visited);
        assert_eq!(
            bound,
            ["stem.bn.beta", "stem.bn.gamma", "stem.conv.weight"]
        );
    }

    #[test]
    fn conv_bn_relu_output_is_nonnegative_with_expected_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let block = ConvBnRelu::<f64>::new(3, 5, (3, 3), (2, 2), (1, 1), &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || {
            normal_draw(&mut rng)
        }));
        let y = block.forward(&mut tape, "b", x, Mode::Train);
        assert_eq!(tape.value(y).shape(), [2, 5, 4, 4]);
        assert!(tape.value(y).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stat_updates_land_in_the_right_buffers() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut block = ConvBnRelu::<f64>::same(2, 3, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::from_shape_simple_fn(IxDyn(&[2, 2, 4, 4]), || {
            1.0 + normal_draw(&mut rng)
        }));
        block.forward(&mut tape, "blk", x, Mode::Train);
        let updates = tape.take_stat_updates();
        assert_eq!(updates.len(), 1);
        let expect_mean = updates[0].running_mean.clone();
        apply_stat_updates(&mut block, "blk", updates);
        assert_eq!(block.bn.running_mean, expect_mean);
        assert_ne!(block.bn.running_var, ArrayD::from_elem(IxDyn(&[3]), 1.0));
    }

    #[test]
    fn conv_bias_only_where_requested() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let with = Conv2d::<f64>::new(2, 2, (1, 1), (1, 1), (0, 0), true, &mut rng);
        let without = Conv2d::<f64>::new(2, 2, (1, 1), (1, 1), (0, 0), false, &mut rng);
        assert!(with.bias.is_some());
        assert!(without.bias.is_none());
    }
}
