//! Four-level pyramid encoders.
//!
//! Every encoder produces features at strides 4, 8, 16 and 32 relative to
//! the input — the contract the decoder modules are built against. The
//! built-in [`ToyEncoder`] is deliberately small (a strided stem plus four
//! two-block stages) so the full pipeline trains in minutes on a CPU;
//! [`PyramidEncoder`] is the slot for dropping in an externally provided
//! full-scale encoder with the same stride layout.

use ndarray::ArrayD;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, ConvBnRelu, Mode, ParamVisit};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Downsampling factor of each pyramid level relative to the input.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Smallest legal input side: one pixel at the deepest level.
pub const MIN_INPUT_SIDE: usize = 32;

/// Which encoder implementation a config selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// The built-in small encoder.
    #[default]
    Toy,
    /// An externally provided encoder, injected through
    /// [`crate::network::Network::with_encoder`]; configs selecting this
    /// kind cannot be instantiated without one.
    External,
}

/// Encoder selection plus its per-level channel widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Channels of levels 1–4. The widths of a full-scale encoder would be
    /// `[64, 128, 320, 512]`; the default keeps the toy encoder light.
    pub channels: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Toy,
            channels: [16, 32, 64, 96],
        }
    }
}

/// A four-level feature extractor with the stride-4/8/16/32 layout.
pub trait PyramidEncoder<T: Scalar>: ParamVisit<T> {
    /// Channel counts of the four levels, shallow to deep.
    fn channels(&self) -> [usize; 4];

    /// Run the encoder; returns the four level features, shallow to deep.
    /// `image` must be `[N, 3, H, W]` with `H`, `W` positive multiples
    /// of 32.
    fn encode(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        image: NodeId,
        mode: Mode,
    ) -> Result<[NodeId; 4]>;
}

/// Validate the `[N,3,H,W]`, divisible-by-32 input contract.
pub fn validate_image_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape(
            "encoder input",
            "[N,3,H,W]",
            format!("{shape:?}"),
        ));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    if n == 0 {
        return Err(Error::InvalidInput("encoder input: empty batch".into()));
    }
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::InvalidInput(format!(
            "encoder input: H and W must be multiples of 32 (≥ {MIN_INPUT_SIDE}), got {h}×{w}"
        )));
    }
    Ok(())
}

/// The built-in encoder: a two-conv stride-4 stem, then four stages of two
/// 3×3 blocks each. Stage 1 keeps the stem's stride-4 resolution; stages
/// 2–4 halve it, landing exactly on the 4/8/16/32 contract.
pub struct ToyEncoder<T: Scalar> {
    channels: [usize; 4],
    stem: [ConvBnRelu<T>; 2],
    stages: [[ConvBnRelu<T>; 2]; 4],
}

impl<T: Scalar> ToyEncoder<T> {
    pub fn new(channels: [usize; 4], rng: &mut ChaCha20Rng) -> Self {
        assert!(
            channels.iter().all(|&c| c > 0),
            "toy encoder: channel widths must be positive"
        );
        let c = channels;
        let stem = [
            ConvBnRelu::new(3, c[0], (3, 3), (2, 2), (1, 1), rng),
            ConvBnRelu::new(c[0], c[0], (3, 3), (2, 2), (1, 1), rng),
        ];
        let stage = |cin, cout, stride, rng: &mut ChaCha20Rng| {
            [
                ConvBnRelu::new(cin, cout, (3, 3), (stride, stride), (1, 1), rng),
                ConvBnRelu::same(cout, cout, 3, rng),
            ]
        };
        let stages = [
            stage(c[0], c[0], 1, rng),
            stage(c[0], c[1], 2, rng),
            stage(c[1], c[2], 2, rng),
            stage(c[2], c[3], 2, rng),
        ];
        ToyEncoder {
            channels,
            stem,
            stages,
        }
    }
}

impl<T: Scalar> PyramidEncoder<T> for ToyEncoder<T> {
    fn channels(&self) -> [usize; 4] {
        self.channels
    }

    fn encode(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        image: NodeId,
        mode: Mode,
    ) -> Result<[NodeId; 4]> {
        validate_image_shape(tape.value(image).shape())?;
        let mut x = self.stem[0].forward(tape, &join(prefix, "stem0"), image, mode);
        x = self.stem[1].forward(tape, &join(prefix, "stem1"), x, mode);
        let mut levels = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            let scope = format!("{}{}", join(prefix, "stage"), i + 1);
            x = stage[0].forward(tape, &join(&scope, "block0"), x, mode);
            x = stage[1].forward(tape, &join(&scope, "block1"), x, mode);
            levels[i] = x;
        }
        Ok(levels)
    }
}

impl<T: Scalar> ParamVisit<T> for ToyEncoder<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.stem[0].visit_params(&join(prefix, "stem0"), f);
        self.stem[1].visit_params(&join(prefix, "stem1"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            let scope = format!("{}{}", join(prefix, "stage"), i + 1);
            stage[0].visit_params(&join(&scope, "block0"), f);
            stage[1].visit_params(&join(&scope, "block1"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.stem[0].visit_params_mut(&join(&prefix, "stem0"), f);
        self.stem[1].visit_params_mut(&join(&prefix, "stem1"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let scope = format!("{}{}", join(&prefix, "stage"), i + 1);
            stage[0].visit_params_mut(&join(&scope, "block0"), f);
            stage[1].visit_params_mut(&join(&scope, "block1"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.stem[0].visit_buffers(&join(prefix, "stem0"), f);
        self.stem[1].visit_buffers(&join(prefix, "stem1"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            let scope = format!("{}{}", join(prefix, "stage"), i + 1);
            stage[0].visit_buffers(&join(&scope, "block0"), f);
            stage[1].visit_buffers(&join(&scope, "block1"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.stem[0].visit_buffers_mut(&join(&prefix, "stem0"), f);
        self.stem[1].visit_buffers_mut(&join(&prefix, "stem1"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let scope = format!("{}{}", join(&prefix, "stage"), i + 1);
            stage[0].visit_buffers_mut(&join(&scope, "block0"), f);
            stage[1].visit_buffers_mut(&join(&scope, "block1"), f);
        }
    }
}
