//! The complete scorer and its weights.
//!
//! Scoring an image–description pair splits into three stages so that work
//! shared across pairs can be reused:
//!
//! 1. [`VitrParams::encode_image`] projects and reasons over the regions once
//!    per image.
//! 2. [`VitrParams::encode_description`] projects the words once per
//!    description.
//! 3. [`VitrParams::pair_score`] attends, joins, fuses and scores.
//!
//! The same stages exist on a caller-provided [`Graph`] (`*_on` methods) for
//! training, where gradients are needed.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{project_regions, project_words, CorpusDims, DescriptionFeatures, ImageFeatures};
use crate::fusion::{self, FuseVariant, FusionParams, SummaryState};
use crate::reasoning::{self, AttentionTrace, ReasoningParams};
use crate::tensor::{Graph, GruLayer, LinearLayer, ParamStore, Tensor, Var};

/// Which parts of the network contribute to the score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    /// Global vectors are ignored.
    NoVit,
    /// Reasoning and attention are replaced by one GRU pooling the words and
    /// one pooling the regions.
    NoRel,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoVit, Mode::NoRel];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoVit => "no_vit",
            Mode::NoRel => "no_rel",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "no_vit" => Ok(Mode::NoVit),
            "no_rel" => Ok(Mode::NoRel),
            other => Err(Error::Param(format!("unknown mode `{other}` (full, no_vit, no_rel)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
    pub d3: usize,
    pub d4: usize,
    pub gamma: f64,
    pub g1: usize,
    pub g2: usize,
    /// Reuse one set of weights across the `g1` reasoning and `g2` fusion passes.
    pub shared_weights: bool,
    pub fuse_variant: FuseVariant,
    pub summary: SummaryState,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d1: 512,
            d2: 2048,
            k: 49,
            d3: 256,
            d4: 128,
            gamma: 12.0,
            g1: 4,
            g2: 2,
            shared_weights: true,
            fuse_variant: FuseVariant::Literal,
            summary: SummaryState::First,
            mode: Mode::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Default hyper-parameters sized for `dims`.
    pub fn for_corpus(dims: CorpusDims) -> Self {
        ModelConfig {
            d1: dims.d1,
            d2: dims.d2,
            k: dims.k,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d1", self.d1),
            ("d2", self.d2),
            ("k", self.k),
            ("d3", self.d3),
            ("d4", self.d4),
            ("g1", self.g1),
            ("g2", self.g2),
        ] {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be ≥ 1")));
            }
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 || !self.gamma.is_finite() {
            return Err(Error::Param(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Pooling recurrences standing in for reasoning in [`Mode::NoRel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolingParams {
    pub words: GruLayer,
    pub regions: GruLayer,
}

/// Every trainable weight, addressable by name.
#[derive(Clone, Debug, PartialEq)]
pub struct VitrParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub project_regions: LinearLayer,
    pub project_words: LinearLayer,
    pub reasoning: ReasoningParams,
    pub fusion: FusionParams,
    pub pooling: PoolingParams,
}

/// Image-side stage output, reusable across descriptions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoding {
    pub global: Tensor,
    /// Gated regions `[k × d3]`, or the pooled region state `[1 × d3]` in
    /// [`Mode::NoRel`].
    pub local: Tensor,
}

/// Description-side stage output, reusable across images.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionEncoding {
    pub global: Tensor,
    /// Projected words `[n × d3]`, or the pooled word state in [`Mode::NoRel`].
    pub local: Tensor,
}

/// Stage outputs living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct EncodedNodes {
    pub global: Var,
    pub local: Var,
}

impl VitrParams {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let c = &config;
        let project_regions = LinearLayer::new(&mut store, "project_regions", c.d2, c.d3, &mut rng)?;
        let project_words = LinearLayer::new(&mut store, "project_words", c.d1, c.d3, &mut rng)?;
        let reasoning =
            ReasoningParams::new(&mut store, c.k, c.d3, c.gamma, c.g1, c.shared_weights, &mut rng)?;
        let fusion = FusionParams::new(
            &mut store,
            c.d1,
            c.d3,
            c.d4,
            c.g2,
            c.shared_weights,
            c.fuse_variant,
            c.summary,
            &mut rng,
        )?;
        let pooling = PoolingParams {
            words: GruLayer::new(&mut store, "pooling.words", c.d3, c.d3, &mut rng)?,
            regions: GruLayer::new(&mut store, "pooling.regions", c.d3, c.d3, &mut rng)?,
        };
        Ok(VitrParams {
            config,
            store,
            project_regions,
            project_words,
            reasoning,
            fusion,
            pooling,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn check_dims(&self, dims: CorpusDims) -> Result<()> {
        let c = &self.config;
        if (c.d1, c.d2, c.k) != (dims.d1, dims.d2, dims.k) {
            return Err(Error::shape("model vs corpus", &[c.d1, c.d2, c.k], &[dims.d1, dims.d2, dims.k]));
        }
        Ok(())
    }

    fn check_image(&self, image: &ImageFeatures) -> Result<()> {
        let c = &self.config;
        if image.global.len() != c.d1 || image.regions.shape() != [c.k, c.d2] {
            return Err(Error::shape("image features", &[c.d1, c.k, c.d2], image.regions.shape()));
        }
        Ok(())
    }

    fn check_description(&self, desc: &DescriptionFeatures) -> Result<()> {
        if desc.global.len() != self.config.d1 || desc.words.cols() != self.config.d1 {
            return Err(Error::shape("description features", &[self.config.d1], desc.words.shape()));
        }
        Ok(())
    }

    pub fn encode_image_on(&self, g: &mut Graph<'_>, image: &ImageFeatures) -> Result<EncodedNodes> {
        self.check_image(image)?;
        let global = g.constant_from(1, image.global.len(), image.global.clone())?;
        let regions = g.constant(&image.regions);
        let projected = project_regions(g, regions, &self.project_regions)?;
        let local = match self.mode() {
            Mode::Full | Mode::NoVit => reasoning::reason(g, projected, &self.reasoning)?,
            Mode::NoRel => *self.pooling.regions.forward(g, projected)?.last().expect("k ≥ 1"),
        };
        Ok(EncodedNodes { global, local })
    }

    pub fn encode_description_on(&self, g: &mut Graph<'_>, desc: &DescriptionFeatures) -> Result<EncodedNodes> {
        self.check_description(desc)?;
        let global = g.constant_from(1, desc.global.len(), desc.global.clone())?;
        let words = g.constant(&desc.words);
        let projected = project_words(g, words, &self.project_words)?;
        let local = match self.mode() {
            Mode::Full | Mode::NoVit => projected,
            Mode::NoRel => *self.pooling.words.forward(g, projected)?.last().expect("n ≥ 1"),
        };
        Ok(EncodedNodes { global, local })
    }

    /// The joined sequence for an encoded pair; also returns the attention
    /// weights when the mode uses attention.
    pub fn join_on(
        &self,
        g: &mut Graph<'_>,
        image: &EncodedNodes,
        desc: &EncodedNodes,
    ) -> Result<(Var, Option<Var>)> {
        let globals = match self.mode() {
            Mode::NoVit => None,
            Mode::Full | Mode::NoRel => Some((desc.global, image.global)),
        };
        match self.mode() {
            Mode::Full | Mode::NoVit => {
                let (aligned, weights) = reasoning::attend(g, image.local, desc.local, self.reasoning.gamma)?;
                let z = fusion::join(g, globals, desc.local, aligned, &self.fusion)?;
                Ok((z, Some(weights)))
            }
            Mode::NoRel => Ok((fusion::join(g, globals, desc.local, image.local, &self.fusion)?, None)),
        }
    }

    pub fn pair_score_on(&self, g: &mut Graph<'_>, image: &EncodedNodes, desc: &EncodedNodes) -> Result<Var> {
        let (joined, _) = self.join_on(g, image, desc)?;
        let fused = fusion::graph_fuse(g, joined, &self.fusion)?;
        fusion::score(g, fused, &self.fusion)
    }

    pub fn encode_image(&self, image: &ImageFeatures) -> Result<ImageEncoding> {
        let mut g = Graph::inference(&self.store);
        let nodes = self.encode_image_on(&mut g, image)?;
        Ok(ImageEncoding {
            global: g.to_tensor(nodes.global),
            local: g.to_tensor(nodes.local),
        })
    }

    pub fn encode_description(&self, desc: &DescriptionFeatures) -> Result<DescriptionEncoding> {
        let mut g = Graph::inference(&self.store);
        let nodes = self.encode_description_on(&mut g, desc)?;
        Ok(DescriptionEncoding {
            global: g.to_tensor(nodes.global),
            local: g.to_tensor(nodes.local),
        })
    }

    fn load_pair<'g>(
        g: &mut Graph<'g>,
        image: &ImageEncoding,
        desc: &DescriptionEncoding,
    ) -> (EncodedNodes, EncodedNodes) {
        let img = EncodedNodes {
            global: g.constant(&image.global),
            local: g.constant(&image.local),
        };
        let d = EncodedNodes {
            global: g.constant(&desc.global),
            local: g.constant(&desc.local),
        };
        (img, d)
    }

    /// Similarity in `(0, 1)` for pre-encoded inputs.
    pub fn pair_score(&self, image: &ImageEncoding, desc: &DescriptionEncoding) -> Result<f64> {
        let mut g = Graph::inference(&self.store);
        let (img, d) = Self::load_pair(&mut g, image, desc);
        let s = self.pair_score_on(&mut g, &img, &d)?;
        Ok(g.scalar(s))
    }

    /// Attention weights between the image's regions and the description's words.
    pub fn attention_trace(&self, image: &ImageFeatures, desc: &DescriptionFeatures) -> Result<AttentionTrace> {
        if self.mode() == Mode::NoRel {
            return Err(Error::Param("no_rel mode has no region-word attention".into()));
        }
        let mut g = Graph::inference(&self.store);
        let img = self.encode_image_on(&mut g, image)?;
        let d = self.encode_description_on(&mut g, desc)?;
        let (_, weights) = self.join_on(&mut g, &img, &d)?;
        let weights = weights.expect("attention modes return weights");
        Ok(AttentionTrace::from_weights(g.to_tensor(weights)))
    }

    /// Copy of these weights that scores in `mode`.
    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut p = self.clone();
        p.config.mode = mode;
        p
    }
}

/// Similarity of one image–description pair under `mode`.
pub fn vitr_score(image: &ImageFeatures, desc: &DescriptionFeatures, model: &VitrParams, mode: Mode) -> Result<f64> {
    let model = if mode == model.mode() {
        std::borrow::Cow::Borrowed(model)
    } else {
        std::borrow::Cow::Owned(model.with_mode(mode))
    };
    let img = model.encode_image(image)?;
    let d = model.encode_description(desc)?;
    model.pair_score(&img, &d)
}
