//! Boundary attention: distill an edge-aware feature and an explicit edge
//! map from two shallow features and one deep feature.
//!
//! The deep feature (resized to the finest input grid) multiplicatively
//! gates the sum of the two shallow features — deep semantics select which
//! shallow detail matters. The product is refined by a residual pair of
//! 3×3 blocks, then re-weighted by a spatial attention map computed from
//! the channel-wise maximum (one 3×3 conv + sigmoid), with a skip
//! connection around the gating. A 1×1 head projects the result to
//! single-channel edge logits.

use ndarray::ArrayD;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvBnRelu, Mode, ParamVisit};
use crate::rfem::FEATURE_WIDTH;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Intermediate node ids of one attention pass, for tests.
pub struct BamTrace {
    /// `high ⊗ (low_a ⊕ low_b)` after resizing everything to `low_a`'s grid.
    pub located: NodeId,
    /// After the residual 3×3 refinement pair.
    pub refined: NodeId,
    /// The `[N,1,H,W]` spatial attention map (post-sigmoid).
    pub gate: NodeId,
    /// The edge-aware 64-channel output feature.
    pub feature: NodeId,
    /// Single-channel edge logits at `low_a`'s grid.
    pub edge_logits: NodeId,
}

/// The attention module; all inputs and the output feature are 64-channel.
pub struct Bam<T: Scalar> {
    refine_a: ConvBnRelu<T>,
    refine_b: ConvBnRelu<T>,
    attention: Conv2d<T>,
    edge_head: Conv2d<T>,
}

impl<T: Scalar> Bam<T> {
    pub fn new(rng: &mut ChaCha20Rng) -> Self {
        let w = FEATURE_WIDTH;
        Bam {
            refine_a: ConvBnRelu::same(w, w, 3, rng),
            refine_b: ConvBnRelu::same(w, w, 3, rng),
            attention: Conv2d::new(1, 1, (3, 3), (1, 1), (1, 1), true, rng),
            edge_head: Conv2d::new(w, 1, (1, 1), (1, 1), (0, 0), true, rng),
        }
    }

    /// Returns `(feature, edge_logits)`, both at `low_a`'s grid.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        low_a: NodeId,
        low_b: NodeId,
        high: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, NodeId)> {
        let t = self.forward_traced(tape, prefix, low_a, low_b, high, mode)?;
        Ok((t.feature, t.edge_logits))
    }

    /// Forward pass that exposes the gating stages.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        low_a: NodeId,
        low_b: NodeId,
        high: NodeId,
        mode: Mode,
    ) -> Result<BamTrace> {
        let target = {
            let s = tape.value(low_a).shape();
            if s.len() != 4 {
                return Err(Error::shape("attention input", "4-d NCHW", format!("{s:?}")));
            }
            (s[0], s[2], s[3])
        };
        for (name, id) in [("low_a", low_a), ("low_b", low_b), ("high", high)] {
            let s = tape.value(id).shape();
            if s.len() != 4 || s[1] != FEATURE_WIDTH {
                return Err(Error::shape(
                    "attention input",
                    format!("[N,{FEATURE_WIDTH},H,W] for {name}"),
                    format!("{s:?}"),
                ));
            }
            if s[0] != target.0 {
                return Err(Error::shape(
                    "attention input",
                    format!("batch {} for {name}", target.0),
                    format!("batch {}", s[0]),
                ));
            }
        }

        let hw = (target.1, target.2);
        let low_b = tape.resize_bilinear(low_b, hw);
        let high = tape.resize_bilinear(high, hw);

        let low_sum = tape.add(low_a, low_b);
        let located = tape.mul(high, low_sum);

        let refined_inner = self
            .refine_a
            .forward(tape, &join(prefix, "refine_a"), located, mode);
        let residual = tape.add(refined_inner, located);
        let refined = self
            .refine_b
            .forward(tape, &join(prefix, "refine_b"), residual, mode);

        let peak = tape.channel_max(refined);
        let att = self
            .attention
            .forward(tape, &join(prefix, "attention"), peak);
        let gate = tape.sigmoid(att);
        let gated = tape.mul_channel_gate(refined, gate);
        let feature = tape.add(gated, refined);

        let edge_logits = self
            .edge_head
            .forward(tape, &join(prefix, "edge_head"), feature);

        Ok(BamTrace {
            located,
            refined,
            gate,
            feature,
            edge_logits,
        })
    }
}

impl<T: Scalar> ParamVisit<T> for Bam<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.refine_a.visit_params(&join(prefix, "refine_a"), f);
        self.refine_b.visit_params(&join(prefix, "refine_b"), f);
        self.attention.visit_params(&join(prefix, "attention"), f);
        self.edge_head.visit_params(&join(prefix, "edge_head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.refine_a.visit_params_mut(&join(&prefix, "refine_a"), f);
        self.refine_b.visit_params_mut(&join(&prefix, "refine_b"), f);
        self.attention.visit_params_mut(&join(&prefix, "attention"), f);
        self.edge_head.visit_params_mut(&join(&prefix, "edge_head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.refine_a.visit_buffers(&join(prefix, "refine_a"), f);
        self.refine_b.visit_buffers(&join(prefix, "refine_b"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.refine_a.visit_buffers_mut(&join(&prefix, "refine_a"), f);
        self.refine_b.visit_buffers_mut(&join(&prefix, "refine_b"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    fn rand_feature(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_shapes_follow_the_finest_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let bam = Bam::<f64>::new(&mut rng);
        let mut tape = Tape::new();
        let low_a = tape.constant(rand_feature(&[2, 64, 16, 16], 1));
        let low_b = tape.constant(rand_feature(&[2, 64, 8, 8], 2));
        let high = tape.constant(rand_feature(&[2, 64, 2, 2], 3));
        let (feature, edge) = bam
            .forward(&mut tape, "bam", low_a, low_b, high, Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(feature).shape(), [2, 64, 16, 16]);
        assert_eq!(tape.value(edge).shape(), [2, 1, 16, 16]);
    }

    #[test]
    fn all_ones_deep_feature_gates_nothing() {
        // With `high ≡ 1` the located stage must equal `low_a ⊕ low_b`
        // exactly (dyadic resize weights keep constants exact).
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let bam = Bam::<f64>::new(&mut rng);
        let mut tape = Tape::new();
        let a0 = rand_feature(&[1, 64, 8, 8], 4);
        let b0 = rand_feature(&[1, 64, 4, 4], 5);
        let low_a = tape.constant(a0.clone());
        let low_b = tape.constant(b0.clone());
        let high = tape.constant(ArrayD::from_elem(IxDyn(&[1, 64, 1, 1]), 1.0));
        let trace = bam
            .forward_traced(&mut tape, "bam", low_a, low_b, high, Mode::Eval)
            .unwrap();

        let mut expect_tape = Tape::<f64>::new();
        let a = expect_tape.constant(a0);
        let b = expect_tape.constant(b0);
        let b_up = expect_tape.resize_bilinear(b, (8, 8));
        let expect = expect_tape.add(a, b_up);
        assert_eq!(tape.value(trace.located), expect_tape.value(expect));
    }

    #[test]
    fn attention_gate_is_a_probability_map_and_feature_keeps_the_skip() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let bam = Bam::<f64>::new(&mut rng);
        let mut tape = Tape::new();
        let low_a = tape.constant(rand_feature(&[1, 64, 8, 8], 6));
        let low_b = tape.constant(rand_feature(&[1, 64, 8, 8], 7));
        let high = tape.constant(rand_feature(&[1, 64, 8, 8], 8));
        let trace = bam
            .forward_traced(&mut tape, "bam", low_a, low_b, high, Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(trace.gate).shape(), [1, 1, 8, 8]);
        assert!(tape.value(trace.gate).iter().all(|&g| (0.0..=1.0).contains(&g)));
        // feature = refined·(1 + gate): same sign as refined, scaled up.
        let refined = tape.value(trace.refined).clone();
        let gate = tape.value(trace.gate).clone();
        let feature = tape.value(trace.feature);
        for c in [0usize, 13, 63] {
            for y in 0..8 {
                for x in 0..8 {
                    let expect = refined[[0, c, y, x]] * (1.0 + gate[[0, 0, y, x]]);
                    assert!((feature[[0, c, y, x]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_width_inputs_are_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let bam = Bam::<f64>::new(&mut rng);
        let mut tape = Tape::new();
        let good = tape.constant(rand_feature(&[1, 64, 4, 4], 9));
        let narrow = tape.constant(rand_feature(&[1, 32, 4, 4], 10));
        assert!(bam.forward(&mut tape, "bam", narrow, good, good, Mode::Eval).is_err());
        assert!(bam.forward(&mut tape, "bam", good, narrow, good, Mode::Eval).is_err());
        assert!(bam.forward(&mut tape, "bam", good, good, narrow, Mode::Eval).is_err());
    }

    #[test]
    fn bound_names_match_visitor() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let bam = Bam::<f64>::new(&mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(rand_feature(&[1, 64, 4, 4], 11));
        bam.forward(&mut tape, "bam1", x, x, x, Mode::Eval).unwrap();
        let bound: std::collections::BTreeSet<String> =
            tape.param_names().map(String::from).collect();
        let mut visited = std::collections::BTreeSet::new();
        bam.visit_params("bam1", &mut |n, _| {
            visited.insert(n.to_string());
        });
        assert_eq!(bound, visited);
        assert!(bound.contains("bam1.attention.bias"));
        assert!(bound.contains("bam1.edge_head.weight"));
    }
}
