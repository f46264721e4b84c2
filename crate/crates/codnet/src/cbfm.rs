//! Cross-level boundary fusion: one step of the top-down decoder cascade.
//!
//! Each step receives its level's enhanced feature, optionally the shared
//! edge-aware feature (resized to the level's grid), and the coarser
//! cascade output from the level below. The edge branch is modulated by a
//! learnable scalar `α` (initialized to 1): the enhanced feature is gated
//! by the edge feature, refined, and scaled by `α`, so `α = 0` switches
//! the edge injection off bitwise. The coarser output is refined,
//! upsampled 2×, concatenated with the edge-injected feature and merged
//! back to width 64.
//!
//! Built without an edge input (`with_edge = false`), the step refines the
//! level feature alone and owns no `α`.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{join, ConvBnRelu, Mode, ParamVisit};
use crate::rfem::FEATURE_WIDTH;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// One cascade step.
pub struct Cbfm<T: Scalar> {
    fuse: ConvBnRelu<T>,
    /// Edge-injection strength; present only when built with an edge input.
    alpha: Option<ArrayD<T>>,
    pre_up: ConvBnRelu<T>,
    merge: ConvBnRelu<T>,
}

impl<T: Scalar> Cbfm<T> {
    pub fn new(with_edge: bool, rng: &mut ChaCha20Rng) -> Self {
        let w = FEATURE_WIDTH;
        Cbfm {
            fuse: ConvBnRelu::same(w, w, 3, rng),
            alpha: with_edge.then(|| ArrayD::from_elem(IxDyn(&[]), T::one())),
            pre_up: ConvBnRelu::same(w, w, 3, rng),
            merge: ConvBnRelu::same(2 * w, w, 3, rng),
        }
    }

    pub fn has_edge_input(&self) -> bool {
        self.alpha.is_some()
    }

    /// Fuse `feature` (this level), `edge` (shared edge-aware feature, any
    /// grid) and `coarser` (cascade output at exactly half this grid) into
    /// this level's cascade output.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        feature: NodeId,
        edge: Option<NodeId>,
        coarser: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        let (n, h, w) = {
            let s = tape.value(feature).shape();
            if s.len() != 4 || s[1] != FEATURE_WIDTH {
                return Err(Error::shape(
                    "cascade feature",
                    format!("[N,{FEATURE_WIDTH},H,W]"),
                    format!("{s:?}"),
                ));
            }
            (s[0], s[2], s[3])
        };
        {
            let s = tape.value(coarser).shape();
            if s != [n, FEATURE_WIDTH, h / 2, w / 2] {
                return Err(Error::shape(
                    "cascade coarser input",
                    format!("[{n},{FEATURE_WIDTH},{},{}]", h / 2, w / 2),
                    format!("{s:?}"),
                ));
            }
        }
        if edge.is_some() != self.alpha.is_some() {
            return Err(Error::InvalidInput(format!(
                "cascade step built {} an edge input but called {} one",
                if self.alpha.is_some() { "with" } else { "without" },
                if edge.is_some() { "with" } else { "without" },
            )));
        }

        let injected = match (edge, &self.alpha) {
            (Some(edge), Some(alpha)) => {
                {
                    let s = tape.value(edge).shape();
                    if s.len() != 4 || s[1] != FEATURE_WIDTH || s[0] != n {
                        return Err(Error::shape(
                            "cascade edge feature",
                            format!("[{n},{FEATURE_WIDTH},h,w]"),
                            format!("{s:?}"),
                        ));
                    }
                }
                let edge = tape.resize_bilinear(edge, (h, w));
                let gated = tape.mul(feature, edge);
                let fused = self.fuse.forward(tape, &join(prefix, "fuse"), gated, mode);
                let alpha_node = tape.param(&join(prefix, "alpha"), alpha.clone());
                tape.scale_by(fused, alpha_node)
            }
            (None, None) => self.fuse.forward(tape, &join(prefix, "fuse"), feature, mode),
            _ => unreachable!("checked above"),
        };

        let refined = self
            .pre_up
            .forward(tape, &join(prefix, "pre_up"), coarser, mode);
        let upsampled = tape.resize_bilinear(refined, (h, w));
        let stacked = tape.concat_channels(&[upsampled, injected]);
        Ok(self.merge.forward(tape, &join(prefix, "merge"), stacked, mode))
    }
}

impl<T: Scalar> ParamVisit<T> for Cbfm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.fuse.visit_params(&join(prefix, "fuse"), f);
        if let Some(a) = &self.alpha {
            f(&join(prefix, "alpha"), a);
        }
        self.pre_up.visit_params(&join(prefix, "pre_up"), f);
        self.merge.visit_params(&join(prefix, "merge"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.fuse.visit_params_mut(&join(&prefix, "fuse"), f);
        if let Some(a) = &mut self.alpha {
            f(&join(&prefix, "alpha"), a);
        }
        self.pre_up.visit_params_mut(&join(&prefix, "pre_up"), f);
        self.merge.visit_params_mut(&join(&prefix, "merge"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.fuse.visit_buffers(&join(prefix, "fuse"), f);
        self.pre_up.visit_buffers(&join(prefix, "pre_up"), f);
        self.merge.visit_buffers(&join(prefix, "merge"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.fuse.visit_buffers_mut(&join(&prefix, "fuse"), f);
        self.pre_up.visit_buffers_mut(&join(&prefix, "pre_up"), f);
        self.merge.visit_buffers_mut(&join(&prefix, "merge"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_feature(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_is_width_64_at_the_level_grid() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let step = Cbfm::<f64>::new(true, &mut rng);
        let mut tape = Tape::new();
        let feature = tape.constant(rand_feature(&[2, 64, 8, 8], 1));
        let edge = tape.constant(rand_feature(&[2, 64, 16, 16], 2));
        let coarser = tape.constant(rand_feature(&[2, 64, 4, 4], 3));
        let out = step
            .forward(&mut tape, "cbfm", feature, Some(edge), coarser, Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(out).shape(), [2, 64, 8, 8]);
    }

    #[test]
    fn zero_alpha_makes_the_output_independent_of_the_edge_feature() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut step = Cbfm::<f64>::new(true, &mut rng);
        *step.alpha.as_mut().unwrap() = ArrayD::zeros(IxDyn(&[]));
        let feature0 = rand_feature(&[1, 64, 8, 8], 4);
        let coarser0 = rand_feature(&[1, 64, 4, 4], 5);
        let run = |edge_seed: u64| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let feature = tape.constant(feature0.clone());
            let edge = tape.constant(rand_feature(&[1, 64, 16, 16], edge_seed));
            let coarser = tape.constant(coarser0.clone());
            let out = step
                .forward(&mut tape, "cbfm", feature, Some(edge), coarser, Mode::Train)
                .unwrap();
            tape.value(out).iter().copied().collect()
        };
        // Bitwise identical outputs under wildly different edge features.
        assert_eq!(run(100), run(200));
    }

    #[test]
    fn edgeless_step_owns_no_alpha_and_rejects_edge_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let step = Cbfm::<f64>::new(false, &mut rng);
        let mut names = Vec::new();
        step.visit_params("cbfm", &mut |n, _| names.push(n.to_string()));
        assert!(!names.iter().any(|n| n.contains("alpha")));

        let mut tape = Tape::new();
        let feature = tape.constant(rand_feature(&[1, 64, 8, 8], 6));
        let edge = tape.constant(rand_feature(&[1, 64, 8, 8], 7));
        let coarser = tape.constant(rand_feature(&[1, 64, 4, 4], 8));
        assert!(step
            .forward(&mut tape, "cbfm", feature, Some(edge), coarser, Mode::Eval)
            .is_err());
        assert!(step
            .forward(&mut tape, "cbfm", feature, None, coarser, Mode::Eval)
            .is_ok());
    }

    #[test]
    fn wrong_coarser_grid_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let step = Cbfm::<f64>::new(true, &mut rng);
        let mut tape = Tape::new();
        let feature = tape.constant(rand_feature(&[1, 64, 8, 8], 9));
        let edge = tape.constant(rand_feature(&[1, 64, 8, 8], 10));
        let same_grid = tape.constant(rand_feature(&[1, 64, 8, 8], 11));
        assert!(matches!(
            step.forward(&mut tape, "cbfm", feature, Some(edge), same_grid, Mode::Eval),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bound_names_match_visitor_including_alpha() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let step = Cbfm::<f64>::new(true, &mut rng);
        let mut tape = Tape::new();
        let feature = tape.constant(rand_feature(&[1, 64, 8, 8], 12));
        let edge = tape.constant(rand_feature(&[1, 64, 4, 4], 13));
        let coarser = tape.constant(rand_feature(&[1, 64, 4, 4], 14));
        step.forward(&mut tape, "cbfm1", feature, Some(edge), coarser, Mode::Eval)
            .unwrap();
        let bound: std::collections::BTreeSet<String> =
            tape.param_names().map(String::from).collect();
        let mut visited = std::collections::BTreeSet::new();
        step.visit_params("cbfm1", &mut |n, _| {
            visited.insert(n.to_string());
        });
        assert_eq!(bound, visited);
        assert!(bound.contains("cbfm1.alpha"));
    }
}
