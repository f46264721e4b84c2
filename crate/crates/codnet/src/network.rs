//! The assembled detector and its ablation variants.
//!
//! All variants share the encoder + per-level enhancement front end and
//! three mask heads (levels 1–3, grids /4, /8, /16); they differ in what
//! sits between:
//!
//! | variant | edge attention | cascade | second attention | head input |
//! |---------|----------------|---------|------------------|------------|
//! | `M1`    | –              | –       | –                | `f'ᵢ`      |
//! | `M2`    | yes            | –       | –                | `f'ᵢ ⧺ e`  |
//! | `M3`    | –              | yes     | –                | `pᵢ`       |
//! | `M4`    | yes            | edge-injected | –          | `pᵢ`       |
//! | `M5`    | yes            | edge-injected | yes        | `pᵢ ⧺ e₂`  |
//!
//! Mask and edge logits are bilinearly upsampled to the input resolution
//! before they are returned, so losses and metrics always work at full
//! size. Module initialization draws from per-module RNG streams of one
//! seed, so modules shared between variants start from identical weights.

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{validate_image_shape, BackboneConfig, BackboneKind, PyramidEncoder, ToyEncoder, LEVEL_STRIDES};
use crate::bam::Bam;
use crate::cbfm::Cbfm;
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvBnRelu, Mode, ParamVisit};
use crate::rfem::{Rfem, FEATURE_WIDTH};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Ablation variants, minimal to full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::M1, Variant::M2, Variant::M3, Variant::M4, Variant::M5];

    /// First edge-attention module present (produces `e₁`).
    pub fn has_edge_attention(self) -> bool {
        matches!(self, Variant::M2 | Variant::M4 | Variant::M5)
    }

    /// Top-down cascade present.
    pub fn has_cascade(self) -> bool {
        matches!(self, Variant::M3 | Variant::M4 | Variant::M5)
    }

    /// Cascade steps receive the edge feature.
    pub fn cascade_uses_edge(self) -> bool {
        matches!(self, Variant::M4 | Variant::M5)
    }

    /// Second edge-attention module present (produces `e₂`).
    pub fn has_second_attention(self) -> bool {
        matches!(self, Variant::M5)
    }

    /// Heads concatenate an edge feature onto their input.
    pub fn heads_concat_edge(self) -> bool {
        matches!(self, Variant::M2 | Variant::M5)
    }

    /// Number of edge-logit outputs.
    pub fn edge_outputs(self) -> usize {
        match self {
            Variant::M1 | Variant::M3 => 0,
            Variant::M2 | Variant::M4 => 1,
            Variant::M5 => 2,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(Variant::M1),
            "M2" => Ok(Variant::M2),
            "M3" => Ok(Variant::M3),
            "M4" => Ok(Variant::M4),
            "M5" => Ok(Variant::M5),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected M1–M5)"
            ))),
        }
    }
}

/// What the second attention module consumes as its deep input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SecondAttentionInputs {
    /// `(p₁, p₂, p₃)` — all three cascade outputs.
    #[default]
    CascadePyramid,
    /// `(p₁, p₂, f'₄)` — cascade shallows with the deepest enhanced feature.
    CascadeWithDeepFeature,
}

/// Everything needed to rebuild a network (checkpoints embed this).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub second_attention_inputs: SecondAttentionInputs,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            variant: Variant::M5,
            backbone: BackboneConfig::default(),
            second_attention_inputs: SecondAttentionInputs::default(),
        }
    }
}

/// Mask head: a 3×3 refinement block and a 1×1 projection to logits.
struct MaskHead<T: Scalar> {
    refine: ConvBnRelu<T>,
    project: Conv2d<T>,
}

impl<T: Scalar> MaskHead<T> {
    fn new(in_channels: usize, rng: &mut ChaCha20Rng) -> Self {
        MaskHead {
            refine: ConvBnRelu::same(in_channels, FEATURE_WIDTH, 3, rng),
            project: Conv2d::new(FEATURE_WIDTH, 1, (1, 1), (1, 1), (0, 0), true, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, prefix: &str, x: NodeId, mode: Mode) -> NodeId {
        let r = self.refine.forward(tape, &join(prefix, "refine"), x, mode);
        self.project.forward(tape, &join(prefix, "project"), r)
    }
}

impl<T: Scalar> ParamVisit<T> for MaskHead<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.refine.visit_params(&join(prefix, "refine"), f);
        self.project.visit_params(&join(prefix, "project"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.refine.visit_params_mut(&join(&prefix, "refine"), f);
        self.project.visit_params_mut(&join(&prefix, "project"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.refine.visit_buffers(&join(prefix, "refine"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.refine.visit_buffers_mut(&join(&prefix, "refine"), f);
    }
}

enum EncoderSlot<T: Scalar> {
    Toy(ToyEncoder<T>),
    External(Box<dyn PyramidEncoder<T>>),
}

impl<T: Scalar> EncoderSlot<T> {
    fn as_encoder(&self) -> &dyn PyramidEncoder<T> {
        match self {
            EncoderSlot::Toy(e) => e,
            EncoderSlot::External(e) => e.as_ref(),
        }
    }

    fn as_visit_mut(&mut self) -> &mut dyn ParamVisit<T> {
        match self {
            EncoderSlot::Toy(e) => e,
            EncoderSlot::External(e) => {
                let e: &mut dyn PyramidEncoder<T> = e.as_mut();
                e as &mut dyn ParamVisit<T>
            }
        }
    }
}

/// Full-resolution logits of one forward pass.
#[derive(Debug)]
pub struct ForwardNodes {
    /// Mask logits from levels 1–3, each `[N,1,H,W]`; index 0 is the
    /// primary prediction.
    pub masks: [NodeId; 3],
    /// Edge logits, `[N,1,H,W]` each; empty, `[e₁]` or `[e₁, e₂]`.
    pub edges: Vec<NodeId>,
}

/// Interior node ids exposed for tests.
pub struct NetworkTrace {
    pub levels: [NodeId; 4],
    pub enhanced: [NodeId; 4],
    pub edge_feature: Option<NodeId>,
    pub cascade: Option<[NodeId; 3]>,
    pub second_edge_feature: Option<NodeId>,
    pub outputs: ForwardNodes,
}

/// The assembled detector.
pub struct Network<T: Scalar> {
    config: NetworkConfig,
    encoder: EncoderSlot<T>,
    enhancers: [Rfem<T>; 4],
    edge_attention: Option<Bam<T>>,
    cascade: Option<[Cbfm<T>; 3]>,
    second_attention: Option<Bam<T>>,
    heads: [MaskHead<T>; 3],
}

/// Per-module RNG stream ids (one seed, independent streams, so modules
/// shared between variants initialize identically).
mod stream {
    pub const ENCODER: u64 = 0;
    pub const ENHANCER: u64 = 1; // .. 4
    pub const EDGE_ATTENTION: u64 = 5;
    pub const CASCADE: u64 = 6; // .. 8
    pub const SECOND_ATTENTION: u64 = 9;
    pub const HEAD: u64 = 10; // .. 12
}

fn module_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar> Network<T> {
    /// Build a network with the built-in encoder.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        match config.backbone.kind {
            BackboneKind::Toy => {
                let encoder = ToyEncoder::new(
                    config.backbone.channels,
                    &mut module_rng(seed, stream::ENCODER),
                );
                Self::assemble(config.clone(), EncoderSlot::Toy(encoder), seed)
            }
            BackboneKind::External => Err(Error::Config(
                "backbone kind 'external' needs an injected encoder; construct with Network::with_encoder"
                    .into(),
            )),
        }
    }

    /// Build a network around an externally provided encoder. The encoder
    /// must honor the stride-4/8/16/32 contract; violations are rejected
    /// at forward time.
    pub fn with_encoder(
        config: &NetworkConfig,
        seed: u64,
        encoder: Box<dyn PyramidEncoder<T>>,
    ) -> Result<Self> {
        let mut config = config.clone();
        config.backbone.kind = BackboneKind::External;
        config.backbone.channels = encoder.channels();
        Self::assemble(config, EncoderSlot::External(encoder), seed)
    }

    fn assemble(config: NetworkConfig, encoder: EncoderSlot<T>, seed: u64) -> Result<Self> {
        let variant = config.variant;
        let channels = encoder.as_encoder().channels();
        let enhancers = [
            Rfem::new(channels[0], &mut module_rng(seed, stream::ENHANCER)),
            Rfem::new(channels[1], &mut module_rng(seed, stream::ENHANCER + 1)),
            Rfem::new(channels[2], &mut module_rng(seed, stream::ENHANCER + 2)),
            Rfem::new(channels[3], &mut module_rng(seed, stream::ENHANCER + 3)),
        ];
        let edge_attention = variant
            .has_edge_attention()
            .then(|| Bam::new(&mut module_rng(seed, stream::EDGE_ATTENTION)));
        let cascade = variant.has_cascade().then(|| {
            let with_edge = variant.cascade_uses_edge();
            [
                Cbfm::new(with_edge, &mut module_rng(seed, stream::CASCADE)),
                Cbfm::new(with_edge, &mut module_rng(seed, stream::CASCADE + 1)),
                Cbfm::new(with_edge, &mut module_rng(seed, stream::CASCADE + 2)),
            ]
        });
        let second_attention = variant
            .has_second_attention()
            .then(|| Bam::new(&mut module_rng(seed, stream::SECOND_ATTENTION)));
        let head_in = if variant.heads_concat_edge() {
            2 * FEATURE_WIDTH
        } else {
            FEATURE_WIDTH
        };
        let heads = [
            MaskHead::new(head_in, &mut module_rng(seed, stream::HEAD)),
            MaskHead::new(head_in, &mut module_rng(seed, stream::HEAD + 1)),
            MaskHead::new(head_in, &mut module_rng(seed, stream::HEAD + 2)),
        ];
        Ok(Network {
            config,
            encoder,
            enhancers,
            edge_attention,
            cascade,
            second_attention,
            heads,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Total number of learnable scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, a| n += a.len());
        n
    }

    /// Forward pass; logits are upsampled to the input resolution.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        image: NodeId,
        mode: Mode,
    ) -> Result<ForwardNodes> {
        Ok(self.forward_traced(tape, image, mode)?.outputs)
    }

    /// Forward pass exposing interior features.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        image: NodeId,
        mode: Mode,
    ) -> Result<NetworkTrace> {
        let (n, h, w) = {
            let s = tape.value(image).shape();
            validate_image_shape(s)?;
            (s[0], s[2], s[3])
        };

        let levels = self
            .encoder
            .as_encoder()
            .encode(tape, "backbone", image, mode)?;
        let channels = self.encoder.as_encoder().channels();
        for (i, (&lvl, stride)) in levels.iter().zip(LEVEL_STRIDES).enumerate() {
            let got = tape.value(lvl).shape();
            let want = [n, channels[i], h / stride, w / stride];
            if got != want {
                return Err(Error::shape(
                    format!("encoder level {} (stride {stride})", i + 1),
                    format!("{want:?}"),
                    format!("{got:?}"),
                ));
            }
        }

        let mut enhanced = levels;
        for (i, enh) in self.enhancers.iter().enumerate() {
            enhanced[i] = enh.forward(
                tape,
                &format!("rfem{}", i + 1),
                levels[i],
                mode,
            )?;
        }

        let mut edge_logits = Vec::new();
        let edge_feature = match &self.edge_attention {
            Some(bam) => {
                let (feature, e1) = bam.forward(
                    tape,
                    "bam1",
                    enhanced[0],
                    enhanced[1],
                    enhanced[3],
                    mode,
                )?;
                edge_logits.push(e1);
                Some(feature)
            }
            None => None,
        };

        let cascade_out = match &self.cascade {
            Some(steps) => {
                let edge_in = self
                    .config
                    .variant
                    .cascade_uses_edge()
                    .then(|| edge_feature.expect("edge attention exists when cascade uses it"));
                let p4 = enhanced[3];
                let p3 = steps[2].forward(tape, "cbfm3", enhanced[2], edge_in, p4, mode)?;
                let p2 = steps[1].forward(tape, "cbfm2", enhanced[1], edge_in, p3, mode)?;
                let p1 = steps[0].forward(tape, "cbfm1", enhanced[0], edge_in, p2, mode)?;
                Some([p1, p2, p3])
            }
            None => None,
        };

        let second_edge_feature = match &self.second_attention {
            Some(bam) => {
                let [p1, p2, p3] = cascade_out.expect("second attention requires the cascade");
                let deep = match self.config.second_attention_inputs {
                    SecondAttentionInputs::CascadePyramid => p3,
                    SecondAttentionInputs::CascadeWithDeepFeature => enhanced[3],
                };
                let (feature, e2) = bam.forward(tape, "bam2", p1, p2, deep, mode)?;
                edge_logits.push(e2);
                Some(feature)
            }
            None => None,
        };

        // Head inputs per level.
        let base: [NodeId; 3] = match cascade_out {
            Some(p) => p,
            None => [enhanced[0], enhanced[1], enhanced[2]],
        };
        let concat_feature = match self.config.variant {
            Variant::M2 => edge_feature,
            Variant::M5 => second_edge_feature,
            _ => None,
        };

        let mut masks = [base[0]; 3];
        for i in 0..3 {
            let input = match concat_feature {
                Some(fe) => {
                    let s = tape.value(base[i]).shape();
                    let grid = (s[2], s[3]);
                    let fe_resized = tape.resize_bilinear(fe, grid);
                    tape.concat_channels(&[base[i], fe_resized])
                }
                None => base[i],
            };
            let logits = self
                .heads[i]
                .forward(tape, &format!("head{}", i + 1), input, mode);
            masks[i] = tape.resize_bilinear(logits, (h, w));
        }
        let edges = edge_logits
            .into_iter()
            .map(|e| tape.resize_bilinear(e, (h, w)))
            .collect();

        Ok(NetworkTrace {
            levels,
            enhanced,
            edge_feature,
            cascade: cascade_out,
            second_edge_feature,
            outputs: ForwardNodes { masks, edges },
        })
    }

    /// Eval-mode probability map of the primary output, as `f64`.
    pub fn predict_primary(&self, images: &ArrayD<T>) -> Result<ArrayD<f64>> {
        let mut tape = Tape::new();
        let image = tape.constant(images.clone());
        let out = self.forward(&mut tape, image, Mode::Eval)?;
        let prob = tape.sigmoid(out.masks[0]);
        Ok(tape.value(prob).mapv(Scalar::to_f64))
    }

    /// Apply queued batch-norm statistics back onto the layers.
    pub fn apply_stat_updates(&mut self, updates: Vec<crate::tape::StatUpdate<T>>) {
        crate::nn::apply_stat_updates(self, "", updates);
    }
}

impl<T: Scalar> ParamVisit<T> for Network<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.encoder.as_encoder().visit_params(&join(prefix, "backbone"), f);
        for (i, e) in self.enhancers.iter().enumerate() {
            e.visit_params(&format!("{}{}", join(prefix, "rfem"), i + 1), f);
        }
        if let Some(bam) = &self.edge_attention {
            bam.visit_params(&join(prefix, "bam1"), f);
        }
        if let Some(steps) = &self.cascade {
            for (i, s) in steps.iter().enumerate() {
                s.visit_params(&format!("{}{}", join(prefix, "cbfm"), i + 1), f);
            }
        }
        if let Some(bam) = &self.second_attention {
            bam.visit_params(&join(prefix, "bam2"), f);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.visit_params(&format!("{}{}", join(prefix, "head"), i + 1), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.encoder
            .as_visit_mut()
            .visit_params_mut(&join(&prefix, "backbone"), f);
        for (i, e) in self.enhancers.iter_mut().enumerate() {
            e.visit_params_mut(&format!("{}{}", join(&prefix, "rfem"), i + 1), f);
        }
        if let Some(bam) = &mut self.edge_attention {
            bam.visit_params_mut(&join(&prefix, "bam1"), f);
        }
        if let Some(steps) = &mut self.cascade {
            for (i, s) in steps.iter_mut().enumerate() {
                s.visit_params_mut(&format!("{}{}", join(&prefix, "cbfm"), i + 1), f);
            }
        }
        if let Some(bam) = &mut self.second_attention {
            bam.visit_params_mut(&join(&prefix, "bam2"), f);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_params_mut(&format!("{}{}", join(&prefix, "head"), i + 1), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.encoder.as_encoder().visit_buffers(&join(prefix, "backbone"), f);
        for (i, e) in self.enhancers.iter().enumerate() {
            e.visit_buffers(&format!("{}{}", join(prefix, "rfem"), i + 1), f);
        }
        if let Some(bam) = &self.edge_attention {
            bam.visit_buffers(&join(prefix, "bam1"), f);
        }
        if let Some(steps) = &self.cascade {
            for (i, s) in steps.iter().enumerate() {
                s.visit_buffers(&format!("{}{}", join(prefix, "cbfm"), i + 1), f);
            }
        }
        if let Some(bam) = &self.second_attention {
            bam.visit_buffers(&join(prefix, "bam2"), f);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.visit_buffers(&format!("{}{}", join(prefix, "head"), i + 1), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let prefix = prefix.to_string();
        self.encoder
            .as_visit_mut()
            .visit_buffers_mut(&join(&prefix, "backbone"), f);
        for (i, e) in self.enhancers.iter_mut().enumerate() {
            e.visit_buffers_mut(&format!("{}{}", join(&prefix, "rfem"), i + 1), f);
        }
        if let Some(bam) = &mut self.edge_attention {
            bam.visit_buffers_mut(&join(&prefix, "bam1"), f);
        }
        if let Some(steps) = &mut self.cascade {
            for (i, s) in steps.iter_mut().enumerate() {
                s.visit_buffers_mut(&format!("{}{}", join(&prefix, "cbfm"), i + 1), f);
            }
        }
        if let Some(bam) = &mut self.second_attention {
            bam.visit_buffers_mut(&join(&prefix, "bam2"), f);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_buffers_mut(&format!("{}{}", join(&prefix, "head"), i + 1), f);
        }
    }
}
