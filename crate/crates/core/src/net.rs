//! The two-stage removal network. Stage one encodes the shadow image into a
//! feature pyramid, transfers matched non-shadow context into shadow regions
//! at the configured scales, and decodes lightness and color through parallel
//! branches. Stage two refines the recombined result with a dense-block
//! U-shaped network over a 6-channel input (recovered L, recovered A/B,
//! shadow RGB). One composite loss covers both stages.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cft::{cft_node, plan_cft, CftConfig, CftPlan, FeaturePyramid, PyramidLevel};
use crate::checkpoint;
use crate::cpm::{build_unaware_image, grid_patches, match_image, CpmNet, MatchEntry, MatchParams, MatchQuery, MatchSet, PatchClassing};
use crate::dataset::PATCH_SIZE;
use crate::imaging::{normalize_lab, rgb_to_lab, ColorSpace, ImagePlane};
use crate::nn::{Arr, Conv2dLayer, CustomOp, DenseBlock, NodeId, ResBlock, Tape, TapeVars, VarStore};
use crate::{Error, Result};

/// Seed for the frozen random-weight perceptual extractor. Independent of the
/// model seed so loss values are comparable across differently seeded runs.
const PERCEPTUAL_SEED: u64 = 314_159;

/// Pipeline ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Learned patch matching + feature transfer + both stages.
    Full,
    /// Classical normalized-cross-correlation matching on shadow-unaware
    /// lightness, feeding the same transfer mechanism.
    TmMatch,
    /// Pluggable external matcher interface with a null stub.
    MnetMatchStub,
    /// Feature transfer disabled entirely.
    NoCft,
    /// Transfer degraded to a direct copy: single source, no Gaussian spread.
    DirectReplaceCft,
    /// Stage two alone, fed the shadow image's own channels.
    DenseUnetOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Full,
        AblationVariant::TmMatch,
        AblationVariant::MnetMatchStub,
        AblationVariant::NoCft,
        AblationVariant::DirectReplaceCft,
        AblationVariant::DenseUnetOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::TmMatch => "tm_match",
            AblationVariant::MnetMatchStub => "mnet_match_stub",
            AblationVariant::NoCft => "no_cft",
            AblationVariant::DirectReplaceCft => "direct_replace_cft",
            AblationVariant::DenseUnetOnly => "dense_unet_only",
        }
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant {s:?}; expected one of full, tm_match, mnet_match_stub, \
                     no_cft, direct_replace_cft, dense_unet_only"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Dense-block encoder trained from scratch.
    ToyDense,
    /// Same topology with weights loaded from a checkpoint file and frozen.
    PretrainedDense,
}

/// Stage-one encoder layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Weights for `pretrained_dense`, a checkpoint holding the `s1.enc*`
    /// tensors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: BackboneVariant::ToyDense,
            widths: vec![16, 24, 32],
            strides: vec![2, 4, 8],
            weights_file: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("backbone needs at least 2 levels"));
        }
        if self.widths.len() != self.strides.len() {
            return Err(Error::config(format!(
                "{} widths vs {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        let mut expected = 2;
        for (i, &s) in self.strides.iter().enumerate() {
            if s != expected {
                return Err(Error::config(format!(
                    "level {i} stride must be {expected} (each level halves), got {s}"
                )));
            }
            expected *= 2;
        }
        if self.widths.iter().any(|w| *w == 0) {
            return Err(Error::config("zero-width backbone level"));
        }
        Ok(())
    }
}

/// Composite loss weights; total = rem*lambda_rem + per*lambda_per +
/// grad*lambda_grad.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_rem: f64,
    pub lambda_per: f64,
    pub lambda_grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rem: 1.0,
            lambda_per: 25.0,
            lambda_grad: 5.0,
        }
    }
}

/// How the removal residual is reduced to a scalar. Both give the plain
/// Euclidean norm on a single pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemNorm {
    /// Root of the mean over pixels of the channel-summed squared residual
    /// (image-size independent).
    #[default]
    RootMeanPixel,
    /// Root of the total squared residual.
    RootSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    pub rem_norm: RemNorm,
    /// Include the stage-one LAB residual in the removal term (on top of the
    /// stage-two RGB residual).
    pub stage1_in_rem: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            rem_norm: RemNorm::RootMeanPixel,
            stage1_in_rem: true,
        }
    }
}

/// Where the frozen perceptual extractor's weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualSource {
    /// Four convolution layers with fixed-seed random weights.
    RandomConv,
    /// Same topology, weights loaded from a checkpoint's `perceptual.*`
    /// tensors.
    File { path: PathBuf },
}

impl Default for PerceptualSource {
    fn default() -> Self {
        PerceptualSource::RandomConv
    }
}

/// Everything that shapes the pipeline. Serializable so checkpoints can be
/// hash-guarded against config drift.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    pub cft: CftConfig,
    /// Pyramid levels that receive feature transfer (default: two coarsest).
    pub cft_levels: Vec<usize>,
    /// Apply the transfer separately per decoder branch instead of sharing
    /// one transferred pyramid. Identical outputs with a shared config.
    pub per_branch_cft: bool,
    pub stage2_widths: Vec<usize>,
    pub variant: AblationVariant,
    pub loss: LossOptions,
    pub loss_weights: LossWeights,
    pub match_params: MatchParams,
    pub perceptual: PerceptualSource,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backbone: BackboneConfig::default(),
            cft: CftConfig::default(),
            cft_levels: vec![1, 2],
            per_branch_cft: false,
            stage2_widths: vec![16, 24, 32],
            variant: AblationVariant::Full,
            loss: LossOptions::default(),
            loss_weights: LossWeights::default(),
            match_params: MatchParams::default(),
            perceptual: PerceptualSource::RandomConv,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.cft.validate()?;
        if let Some(&bad) = self.cft_levels.iter().find(|l| **l >= self.backbone.widths.len()) {
            return Err(Error::config(format!(
                "cft level {bad} out of range for a {}-level backbone",
                self.backbone.widths.len()
            )));
        }
        if self.stage2_widths.len() < 2 || self.stage2_widths.iter().any(|w| *w == 0) {
            return Err(Error::config("stage-two needs at least 2 nonzero widths"));
        }
        let w = &self.loss_weights;
        for (name, v) in [("lambda_rem", w.lambda_rem), ("lambda_per", w.lambda_per), ("lambda_grad", w.lambda_grad)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Image sizes are padded up to a multiple of this before the forward
    /// pass and cropped back after.
    pub fn pad_multiple(&self) -> usize {
        let s1 = self.backbone.strides.last().copied().unwrap_or(1);
        let s2 = 1usize << (self.stage2_widths.len() - 1);
        s1.max(s2)
    }

    /// The transfer config this variant actually runs with; `None` disables
    /// transfer entirely.
    pub fn effective_cft(&self) -> Option<CftConfig> {
        match self.variant {
            AblationVariant::NoCft | AblationVariant::DenseUnetOnly => None,
            AblationVariant::DirectReplaceCft => Some(CftConfig {
                k: 1,
                n: 1,
                sigma: self.cft.sigma,
                anchored: false,
            }),
            _ => Some(self.cft),
        }
    }
}

/// Stage-one result in LAB units.
#[derive(Clone, Debug)]
pub struct StageOneOutput {
    pub l_hat: Array3<f64>,
    pub ab_hat: Array3<f64>,
    pub lab_recombined: Array3<f64>,
}

impl StageOneOutput {
    pub fn new(l_hat: Array3<f64>, ab_hat: Array3<f64>) -> Result<Self> {
        let (h, w, cl) = l_hat.dim();
        let (h2, w2, cab) = ab_hat.dim();
        if (h, w) != (h2, w2) || cl != 1 || cab != 2 {
            return Err(Error::Shape(format!(
                "stage-one heads disagree: L {:?}, AB {:?}",
                l_hat.dim(),
                ab_hat.dim()
            )));
        }
        let mut lab = Array3::zeros((h, w, 3));
        lab.slice_mut(s![.., .., 0..1]).assign(&l_hat);
        lab.slice_mut(s![.., .., 1..3]).assign(&ab_hat);
        Ok(StageOneOutput {
            l_hat,
            ab_hat,
            lab_recombined: lab,
        })
    }

    /// Rebuild from a combined LAB raster.
    pub fn from_lab(lab: Array3<f64>) -> Result<Self> {
        if lab.dim().2 != 3 {
            return Err(Error::Shape(format!("expected 3 LAB channels, got {}", lab.dim().2)));
        }
        let l = lab.slice(s![.., .., 0..1]).to_owned();
        let ab = lab.slice(s![.., .., 1..3]).to_owned();
        StageOneOutput::new(l, ab)
    }
}

/// Scalar loss values; `total` is the weighted sum of the components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub rem: f64,
    pub per: f64,
    pub grad: f64,
}

/// Tape nodes for the composite loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub rem: NodeId,
    pub per: NodeId,
    pub grad: NodeId,
}

impl LossNodes {
    pub fn components(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            total: tape.scalar(self.total),
            rem: tape.scalar(self.rem),
            per: tape.scalar(self.per),
            grad: tape.scalar(self.grad),
        }
    }
}

/// Hook for plugging in an out-of-tree patch matcher.
pub trait ExternalMatcher: Send {
    fn match_image(
        &self,
        shadow_rgb: &ImagePlane,
        unaware_lab: &ImagePlane,
        params: &MatchParams,
    ) -> Result<MatchSet>;
}

/// Stub external matcher: finds nothing.
pub struct NullMatcher;

impl ExternalMatcher for NullMatcher {
    fn match_image(
        &self,
        _shadow_rgb: &ImagePlane,
        _unaware_lab: &ImagePlane,
        params: &MatchParams,
    ) -> Result<MatchSet> {
        Ok(MatchSet::empty(params.grid_stride))
    }
}

/// How the pipeline discovers patch correspondences.
pub enum Matcher {
    Cpm(CpmNet),
    Tm,
    External(Box<dyn ExternalMatcher>),
    None,
}

impl Matcher {
    fn kind(&self) -> &'static str {
        match self {
            Matcher::Cpm(_) => "cpm",
            Matcher::Tm => "tm",
            Matcher::External(_) => "external",
            Matcher::None => "none",
        }
    }
}

struct BranchDecoder {
    fuse: Vec<Conv2dLayer>,
    res: Vec<ResBlock>,
    final_conv: Conv2dLayer,
    head: Conv2dLayer,
}

impl BranchDecoder {
    fn init(
        store: &mut VarStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        widths: &[usize],
        out_ch: usize,
    ) -> Self {
        let levels = widths.len();
        let mut fuse = Vec::new();
        let mut res = Vec::new();
        for l in (0..levels - 1).rev() {
            fuse.push(Conv2dLayer::init(
                store,
                rng,
                &format!("{prefix}.fuse{l}"),
                widths[l + 1] + widths[l],
                widths[l],
                1,
                1,
                0,
            ));
            res.push(ResBlock::init(store, rng, &format!("{prefix}.res{l}"), widths[l]));
        }
        let final_conv = Conv2dLayer::init(store, rng, &format!("{prefix}.final"), widths[0], widths[0], 3, 1, 1);
        let head = Conv2dLayer::init(store, rng, &format!("{prefix}.head"), widths[0], out_ch, 3, 1, 1);
        BranchDecoder {
            fuse,
            res,
            final_conv,
            head,
        }
    }

    /// Deepest-to-shallowest decode over the (transferred) pyramid; returns a
    /// linear `(1, out_ch, H, W)` node at input resolution.
    fn forward(&self, tape: &mut Tape, vars: &TapeVars, pyramid: &[NodeId]) -> NodeId {
        let levels = pyramid.len();
        let mut x = pyramid[levels - 1];
        for (i, l) in (0..levels - 1).rev().enumerate() {
            x = tape.upsample2x(x);
            x = tape.concat(1, &[x, pyramid[l]]);
            x = self.fuse[i].forward(tape, vars, x);
            x = tape.relu(x);
            x = self.res[i].forward(tape, vars, x);
        }
        x = tape.upsample2x(x);
        x = self.final_conv.forward(tape, vars, x);
        x = tape.relu(x);
        self.head.forward(tape, vars, x)
    }
}

struct StageTwo {
    enc_convs: Vec<Conv2dLayer>,
    enc_dense: Vec<DenseBlock>,
    dec_fuse: Vec<Conv2dLayer>,
    dec_dense: Vec<DenseBlock>,
    head: Conv2dLayer,
}

impl StageTwo {
    fn init(store: &mut VarStore, rng: &mut ChaCha8Rng, widths: &[usize]) -> Self {
        let levels = widths.len();
        let mut enc_convs = Vec::new();
        let mut enc_dense = Vec::new();
        for l in 0..levels {
            let (in_ch, stride) = if l == 0 { (6, 1) } else { (widths[l - 1], 2) };
            enc_convs.push(Conv2dLayer::init(
                store,
                rng,
                &format!("s2.enc{l}.conv"),
                in_ch,
                widths[l],
                3,
                stride,
                1,
            ));
            enc_dense.push(DenseBlock::init(
                store,
                rng,
                &format!("s2.enc{l}.dense"),
                widths[l],
                (widths[l] / 2).max(4),
                2,
                widths[l],
            ));
        }
        let mut dec_fuse = Vec::new();
        let mut dec_dense = Vec::new();
        for l in (0..levels - 1).rev() {
            dec_fuse.push(Conv2dLayer::init(
                store,
                rng,
                &format!("s2.dec{l}.fuse"),
                widths[l + 1] + widths[l],
                widths[l],
                1,
                1,
                0,
            ));
            dec_dense.push(DenseBlock::init(
                store,
                rng,
                &format!("s2.dec{l}.dense"),
                widths[l],
                (widths[l] / 2).max(4),
                2,
                widths[l],
            ));
        }
        let head = Conv2dLayer::init(store, rng, "s2.head", widths[0], 3, 3, 1, 1);
        StageTwo {
            enc_convs,
            enc_dense,
            dec_fuse,
            dec_dense,
            head,
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &TapeVars, x6: NodeId) -> NodeId {
        assert_eq!(tape.value(x6).shape()[1], 6, "stage-two input must have 6 channels");
        let levels = self.enc_convs.len();
        let mut skips = Vec::with_capacity(levels);
        let mut x = x6;
        for l in 0..levels {
            x = self.enc_convs[l].forward(tape, vars, x);
            x = tape.relu(x);
            x = self.enc_dense[l].forward(tape, vars, x);
            skips.push(x);
        }
        for (i, l) in (0..levels - 1).rev().enumerate() {
            x = tape.upsample2x(x);
            x = tape.concat(1, &[x, skips[l]]);
            x = self.dec_fuse[i].forward(tape, vars, x);
            x = tape.relu(x);
            x = self.dec_dense[i].forward(tape, vars, x);
        }
        let y = self.head.forward(tape, vars, x);
        tape.sigmoid(y)
    }
}

/// The assembled pipeline: weights, architecture handles and the matcher.
pub struct CanetPipeline {
    pub config: PipelineConfig,
    pub store: VarStore,
    pub matcher: Matcher,
    s1_convs: Vec<Conv2dLayer>,
    s1_dense: Vec<DenseBlock>,
    dec_l: BranchDecoder,
    dec_ab: BranchDecoder,
    s2: StageTwo,
    perceptual: Vec<Conv2dLayer>,
}

impl std::fmt::Debug for CanetPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CanetPipeline")
            .field("variant", &self.config.variant)
            .field("matcher", &self.matcher.kind())
            .field("params", &self.store.param_count())
            .finish()
    }
}

/// Build a pipeline configured for one ablation at desk-scale defaults.
pub fn make_variant(variant: AblationVariant, seed: u64) -> Result<CanetPipeline> {
    let config = PipelineConfig {
        variant,
        ..PipelineConfig::default()
    };
    CanetPipeline::init(config, seed)
}

impl CanetPipeline {
    /// Seeded initialization. All variants initialize the complete weight set
    /// in the same order, so a seed determines identical tensors regardless
    /// of variant; variants differ only in routing.
    pub fn init(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = VarStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = &config.backbone.widths;

        let mut s1_convs = Vec::new();
        let mut s1_dense = Vec::new();
        for l in 0..widths.len() {
            let in_ch = if l == 0 { 3 } else { widths[l - 1] };
            s1_convs.push(Conv2dLayer::init(
                &mut store,
                &mut rng,
                &format!("s1.enc{l}.conv"),
                in_ch,
                widths[l],
                3,
                2,
                1,
            ));
            s1_dense.push(DenseBlock::init(
                &mut store,
                &mut rng,
                &format!("s1.enc{l}.dense"),
                widths[l],
                (widths[l] / 2).max(4),
                2,
                widths[l],
            ));
        }
        let dec_l = BranchDecoder::init(&mut store, &mut rng, "s1.dec_l", widths, 1);
        let dec_ab = BranchDecoder::init(&mut store, &mut rng, "s1.dec_ab", widths, 2);
        let s2 = StageTwo::init(&mut store, &mut rng, &config.stage2_widths);

        // Frozen perceptual extractor with its own fixed seed.
        let mut prng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let perceptual = vec![
            Conv2dLayer::init(&mut store, &mut prng, "perceptual.conv1", 3, 8, 3, 1, 1),
            Conv2dLayer::init(&mut store, &mut prng, "perceptual.conv2", 8, 8, 3, 2, 1),
            Conv2dLayer::init(&mut store, &mut prng, "perceptual.conv3", 8, 16, 3, 1, 1),
            Conv2dLayer::init(&mut store, &mut prng, "perceptual.conv4", 16, 16, 3, 2, 1),
        ];
        for name in store
            .names()
            .filter(|n| n.starts_with("perceptual."))
            .map(str::to_string)
            .collect::<Vec<_>>()
        {
            store.set_trainable(&name, false);
        }
        if let PerceptualSource::File { path } = &config.perceptual {
            checkpoint::load_weights_into(&mut store, path, "perceptual.")?;
        }

        if config.backbone.variant == BackboneVariant::PretrainedDense {
            let Some(file) = &config.backbone.weights_file else {
                return Err(Error::config(
                    "pretrained_dense backbone requires backbone.weights_file",
                ));
            };
            checkpoint::load_weights_into(&mut store, file, "s1.enc")?;
            for name in store
                .names()
                .filter(|n| n.starts_with("s1.enc"))
                .map(str::to_string)
                .collect::<Vec<_>>()
            {
                store.set_trainable(&name, false);
            }
        }

        let matcher = match config.variant {
            AblationVariant::Full | AblationVariant::DirectReplaceCft => Matcher::Cpm(CpmNet::init(seed)),
            AblationVariant::TmMatch => Matcher::Tm,
            AblationVariant::MnetMatchStub => Matcher::External(Box::new(NullMatcher)),
            AblationVariant::NoCft | AblationVariant::DenseUnetOnly => Matcher::None,
        };

        Ok(CanetPipeline {
            config,
            store,
            matcher,
            s1_convs,
            s1_dense,
            dec_l,
            dec_ab,
            s2,
            perceptual,
        })
    }

    pub fn cpm(&self) -> Option<&CpmNet> {
        match &self.matcher {
            Matcher::Cpm(net) => Some(net),
            _ => None,
        }
    }

    pub fn cpm_mut(&mut self) -> Option<&mut CpmNet> {
        match &mut self.matcher {
            Matcher::Cpm(net) => Some(net),
            _ => None,
        }
    }

    /// Run the variant's matcher. Images too small for a single grid patch
    /// yield an empty set.
    pub fn compute_matchset(&self, shadow: &ImagePlane) -> Result<MatchSet> {
        let stride = self.config.match_params.grid_stride;
        if shadow.height() < PATCH_SIZE || shadow.width() < PATCH_SIZE {
            return Ok(MatchSet::empty(stride));
        }
        match &self.matcher {
            Matcher::None => Ok(MatchSet::empty(stride)),
            Matcher::Cpm(net) => {
                let unaware = build_unaware_image(shadow)?;
                match_image(net, shadow, &unaware, &self.config.match_params)
            }
            Matcher::Tm => {
                let unaware = build_unaware_image(shadow)?;
                tm_match_image(shadow, &unaware, &self.config.match_params)
            }
            Matcher::External(m) => {
                let unaware = build_unaware_image(shadow)?;
                m.match_image(shadow, &unaware, &self.config.match_params)
            }
        }
    }

    /// Compile CFT plans for every pyramid level at the padded size; `None`
    /// entries are identity (level not selected, transfer disabled, or plan
    /// empty).
    pub fn build_plans(
        &self,
        h_pad: usize,
        w_pad: usize,
        set: &MatchSet,
    ) -> Result<Vec<Option<Arc<CftPlan>>>> {
        let levels = self.config.backbone.widths.len();
        let Some(cft_cfg) = self.config.effective_cft() else {
            return Ok(vec![None; levels]);
        };
        let mut plans = Vec::with_capacity(levels);
        for l in 0..levels {
            if self.config.cft_levels.contains(&l) {
                let stride = self.config.backbone.strides[l];
                let plan = plan_cft(h_pad / stride, w_pad / stride, stride, set, &cft_cfg)?;
                plans.push(if plan.is_identity() { None } else { Some(Arc::new(plan)) });
            } else {
                plans.push(None);
            }
        }
        Ok(plans)
    }

    fn encode_pyramid(&self, tape: &mut Tape, vars: &TapeVars, rgb: NodeId) -> Vec<NodeId> {
        let mut feats = Vec::with_capacity(self.s1_convs.len());
        let mut x = rgb;
        for l in 0..self.s1_convs.len() {
            x = self.s1_convs[l].forward(tape, vars, x);
            x = tape.relu(x);
            x = self.s1_dense[l].forward(tape, vars, x);
            feats.push(x);
        }
        feats
    }

    fn transfer_pyramid(
        &self,
        tape: &mut Tape,
        feats: &[NodeId],
        plans: &[Option<Arc<CftPlan>>],
    ) -> Vec<NodeId> {
        feats
            .iter()
            .zip(plans)
            .map(|(&f, plan)| match plan {
                Some(p) => cft_node(tape, f, p.clone()),
                None => f,
            })
            .collect()
    }

    /// Stage-one graph: `(1, 3, H, W)` shadow RGB to `(1, 3, H, W)`
    /// normalized-LAB reconstruction (linear heads).
    pub fn stage_one_graph(
        &self,
        tape: &mut Tape,
        vars: &TapeVars,
        rgb: NodeId,
        plans: &[Option<Arc<CftPlan>>],
    ) -> NodeId {
        let feats = self.encode_pyramid(tape, vars, rgb);
        let pyr_l = self.transfer_pyramid(tape, &feats, plans);
        let pyr_ab = if self.config.per_branch_cft {
            self.transfer_pyramid(tape, &feats, plans)
        } else {
            pyr_l.clone()
        };
        let l = self.dec_l.forward(tape, vars, &pyr_l);
        let ab = self.dec_ab.forward(tape, vars, &pyr_ab);
        tape.concat(1, &[l, ab])
    }

    /// Stage-two graph: recovered channels + shadow RGB to `(1, 3, H, W)`
    /// RGB in (0, 1).
    pub fn stage_two_graph(
        &self,
        tape: &mut Tape,
        vars: &TapeVars,
        lab_norm: NodeId,
        rgb: NodeId,
    ) -> NodeId {
        let x6 = tape.concat(1, &[lab_norm, rgb]);
        self.s2.forward(tape, vars, x6)
    }

    /// Full forward. For `dense_unet_only` the stage-one output is the shadow
    /// image's own normalized LAB.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        vars: &TapeVars,
        rgb: NodeId,
        lab_norm: NodeId,
        plans: &[Option<Arc<CftPlan>>],
    ) -> ForwardNodes {
        let stage1_lab = if self.config.variant == AblationVariant::DenseUnetOnly {
            lab_norm
        } else {
            self.stage_one_graph(tape, vars, rgb, plans)
        };
        let stage2_rgb = self.stage_two_graph(tape, vars, stage1_lab, rgb);
        ForwardNodes {
            stage1_lab,
            stage2_rgb,
        }
    }

    fn perceptual_graph(&self, tape: &mut Tape, vars: &TapeVars, rgb: NodeId) -> NodeId {
        let mut x = rgb;
        for conv in &self.perceptual {
            x = conv.forward(tape, vars, x);
            x = tape.relu(x);
        }
        x
    }

    fn rem_term(&self, tape: &mut Tape, out: NodeId, target: NodeId) -> NodeId {
        let d = tape.sub(out, target);
        let d2 = tape.mul(d, d);
        let mean = tape.mean_all(d2);
        let scale = match self.config.loss.rem_norm {
            RemNorm::RootMeanPixel => tape.value(out).shape()[1] as f64,
            RemNorm::RootSum => tape.value(out).len() as f64,
        };
        let total = tape.scale(mean, scale);
        tape.sqrt(total)
    }

    /// Composite loss over both stages' outputs against ground truth.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        vars: &TapeVars,
        fw: &ForwardNodes,
        gt_rgb: NodeId,
        gt_lab_norm: NodeId,
    ) -> LossNodes {
        let mut rem = self.rem_term(tape, fw.stage2_rgb, gt_rgb);
        if self.config.loss.stage1_in_rem {
            let s1 = self.rem_term(tape, fw.stage1_lab, gt_lab_norm);
            rem = tape.add(rem, s1);
        }

        let f_out = self.perceptual_graph(tape, vars, fw.stage2_rgb);
        let f_gt = self.perceptual_graph(tape, vars, gt_rgb);
        let fd = tape.sub(f_out, f_gt);
        let fd = tape.abs(fd);
        let per = tape.mean_all(fd);

        let dxo = spatial_diff(tape, fw.stage2_rgb, 3);
        let dyo = spatial_diff(tape, fw.stage2_rgb, 2);
        let dxg = spatial_diff(tape, gt_rgb, 3);
        let dyg = spatial_diff(tape, gt_rgb, 2);
        let ddx = tape.sub(dxo, dxg);
        let ddy = tape.sub(dyo, dyg);
        let dcat = tape.concat(1, &[ddx, ddy]);
        let dabs = tape.abs(dcat);
        let grad = tape.mean_all(dabs);

        let w = self.config.loss_weights;
        let t1 = tape.scale(rem, w.lambda_rem);
        let t2 = tape.scale(per, w.lambda_per);
        let t3 = tape.scale(grad, w.lambda_grad);
        let t12 = tape.add(t1, t2);
        let total = tape.add(t12, t3);
        LossNodes {
            total,
            rem,
            per,
            grad,
        }
    }

    /// Forward + loss for one prepared sample; the unit of a training step.
    pub fn sample_loss_graph(&self, tape: &mut Tape, vars: &TapeVars, sample: &TrainSample) -> LossNodes {
        let rgb = tape.constant(sample.shadow_rgb.clone());
        let lab = tape.constant(sample.shadow_lab_norm.clone());
        let gt_rgb = tape.constant(sample.gt_rgb.clone());
        let gt_lab = tape.constant(sample.gt_lab_norm.clone());
        let fw = self.forward_graph(tape, vars, rgb, lab, &sample.plans);
        self.loss_graph(tape, vars, &fw, gt_rgb, gt_lab)
    }

    /// Pad, convert and compile plans for one (shadow, ground-truth) pair.
    pub fn prepare_sample(
        &self,
        shadow: &ImagePlane,
        gt: &ImagePlane,
        set: &MatchSet,
    ) -> Result<TrainSample> {
        if shadow.height() != gt.height() || shadow.width() != gt.width() {
            return Err(Error::Shape(format!(
                "shadow {}x{} vs ground truth {}x{}",
                shadow.height(),
                shadow.width(),
                gt.height(),
                gt.width()
            )));
        }
        let sp = self.prep_image(shadow)?;
        let gp = self.prep_image(gt)?;
        let plans = self.build_plans(sp.h_pad, sp.w_pad, set)?;
        Ok(TrainSample {
            shadow_rgb: sp.rgb_nchw,
            shadow_lab_norm: sp.lab_norm_nchw,
            gt_rgb: gp.rgb_nchw,
            gt_lab_norm: gp.lab_norm_nchw,
            plans,
        })
    }

    fn prep_image(&self, img: &ImagePlane) -> Result<PreppedImage> {
        if img.colorspace() != ColorSpace::Rgb {
            return Err(Error::validation("pipeline inputs must be RGB"));
        }
        let lab = rgb_to_lab(img)?;
        let lab_norm = normalize_lab(lab.data());
        let m = self.config.pad_multiple();
        let rgb_pad = pad_hwc_edge(img.data(), m);
        let lab_pad = pad_hwc_edge(&lab_norm, m);
        let (h_pad, w_pad, _) = rgb_pad.dim();
        Ok(PreppedImage {
            h: img.height(),
            w: img.width(),
            h_pad,
            w_pad,
            rgb_nchw: hwc_to_nchw(&rgb_pad),
            lab_norm_nchw: hwc_to_nchw(&lab_pad),
        })
    }

    /// Encoder features for one image, without transfer.
    pub fn backbone_features(&self, shadow: &ImagePlane) -> Result<FeaturePyramid> {
        let p = self.prep_image(shadow)?;
        let mut tape = Tape::new();
        let vars = TapeVars::bind(&mut tape, &self.store);
        let rgb = tape.constant(p.rgb_nchw.clone());
        let feats = self.encode_pyramid(&mut tape, &vars, rgb);
        let levels = feats
            .iter()
            .zip(&self.config.backbone.strides)
            .map(|(&f, &stride)| PyramidLevel {
                features: nchw_to_hwc(tape.value(f)),
                stride,
            })
            .collect();
        FeaturePyramid::new(levels, p.h_pad, p.w_pad)
    }

    /// Materialized stage one: LAB-convention output at input size.
    pub fn stage_one(&self, shadow: &ImagePlane, set: &MatchSet) -> Result<StageOneOutput> {
        let p = self.prep_image(shadow)?;
        let plans = self.build_plans(p.h_pad, p.w_pad, set)?;
        let mut tape = Tape::new();
        let vars = TapeVars::bind(&mut tape, &self.store);
        let rgb = tape.constant(p.rgb_nchw.clone());
        let node = self.stage_one_graph(&mut tape, &vars, rgb, &plans);
        let lab = materialize_lab(tape.value(node), p.h, p.w);
        StageOneOutput::from_lab(lab)
    }

    /// Materialized stage two from explicit stage-one output.
    pub fn stage_two(&self, out1: &StageOneOutput, shadow: &ImagePlane) -> Result<ImagePlane> {
        let p = self.prep_image(shadow)?;
        let (h1, w1, _) = out1.lab_recombined.dim();
        if (h1, w1) != (p.h, p.w) {
            return Err(Error::Shape(format!(
                "stage-one output {h1}x{w1} vs shadow image {}x{}",
                p.h, p.w
            )));
        }
        let lab_norm = normalize_lab(&out1.lab_recombined);
        let lab_pad = pad_hwc_edge(&lab_norm, self.config.pad_multiple());
        let mut tape = Tape::new();
        let vars = TapeVars::bind(&mut tape, &self.store);
        let rgb = tape.constant(p.rgb_nchw.clone());
        let lab = tape.constant(hwc_to_nchw(&lab_pad));
        let node = self.stage_two_graph(&mut tape, &vars, lab, rgb);
        materialize_rgb(tape.value(node), p.h, p.w)
    }

    /// Match, transfer, reconstruct: the complete removal path, one graph.
    pub fn remove_shadow(&self, shadow: &ImagePlane) -> Result<RemovalOutput> {
        let set = self.compute_matchset(shadow)?;
        let p = self.prep_image(shadow)?;
        let plans = self.build_plans(p.h_pad, p.w_pad, &set)?;
        let mut tape = Tape::new();
        let vars = TapeVars::bind(&mut tape, &self.store);
        let rgb = tape.constant(p.rgb_nchw.clone());
        let lab = tape.constant(p.lab_norm_nchw.clone());
        let fw = self.forward_graph(&mut tape, &vars, rgb, lab, &plans);
        let stage_one = StageOneOutput::from_lab(materialize_lab(tape.value(fw.stage1_lab), p.h, p.w))?;
        let final_rgb = materialize_rgb(tape.value(fw.stage2_rgb), p.h, p.w)?;
        Ok(RemovalOutput {
            stage_one,
            final_rgb,
            matchset: set,
        })
    }

    /// All weights as one store: the pipeline's own tensors plus the learned
    /// matcher's (if any) under the `cpm.` namespace, so a checkpoint is
    /// self-contained.
    pub fn export_store(&self) -> VarStore {
        let mut out = self.store.clone();
        if let Matcher::Cpm(net) = &self.matcher {
            for (name, value) in net.store().iter() {
                out.insert(&format!("cpm.{name}"), value.clone(), false);
            }
        }
        out
    }

    /// Inverse of [`Self::export_store`]: split the `cpm.` namespace back
    /// into the matcher and load the rest into the pipeline. The name sets
    /// must match the architecture exactly.
    pub fn import_store(&mut self, src: &VarStore) -> Result<()> {
        let mut own = VarStore::new();
        let mut cpm = VarStore::new();
        for (name, value) in src.iter() {
            if let Some(rest) = name.strip_prefix("cpm.") {
                cpm.insert(rest, value.clone(), true);
            } else {
                own.insert(name, value.clone(), true);
            }
        }
        match (&mut self.matcher, cpm.is_empty()) {
            (Matcher::Cpm(net), false) => net.store_mut().load_from(&cpm)?,
            (Matcher::Cpm(_), true) => {
                return Err(Error::Checkpoint(
                    "checkpoint carries no matcher weights but this variant has a learned matcher"
                        .into(),
                ))
            }
            (_, false) => {
                return Err(Error::Checkpoint(
                    "checkpoint carries matcher weights but this variant has no learned matcher"
                        .into(),
                ))
            }
            (_, true) => {}
        }
        self.store.load_from(&own)
    }

    /// Scalar composite loss for already-materialized outputs.
    pub fn canet_loss(
        &self,
        out1: &StageOneOutput,
        out2: &ImagePlane,
        gt: &ImagePlane,
    ) -> Result<LossComponents> {
        if out2.colorspace() != ColorSpace::Rgb || gt.colorspace() != ColorSpace::Rgb {
            return Err(Error::validation("loss expects RGB outputs and ground truth"));
        }
        let (h, w) = (gt.height(), gt.width());
        let (h1, w1, _) = out1.lab_recombined.dim();
        if (out2.height(), out2.width()) != (h, w) || (h1, w1) != (h, w) {
            return Err(Error::Shape(format!(
                "loss inputs disagree: stage one {h1}x{w1}, stage two {}x{}, ground truth {h}x{w}",
                out2.height(),
                out2.width()
            )));
        }
        let gt_lab = rgb_to_lab(gt)?;
        let mut tape = Tape::new();
        let vars = TapeVars::bind(&mut tape, &self.store);
        let s1 = tape.constant(hwc_to_nchw(&normalize_lab(&out1.lab_recombined)));
        let s2 = tape.constant(hwc_to_nchw(out2.data()));
        let gt_rgb = tape.constant(hwc_to_nchw(gt.data()));
        let gt_lab = tape.constant(hwc_to_nchw(&normalize_lab(gt_lab.data())));
        let fw = ForwardNodes {
            stage1_lab: s1,
            stage2_rgb: s2,
        };
        let nodes = self.loss_graph(&mut tape, &vars, &fw, gt_rgb, gt_lab);
        Ok(nodes.components(&tape))
    }
}

/// Forward-pass output nodes.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// `(1, 3, H, W)` normalized LAB from stage one.
    pub stage1_lab: NodeId,
    /// `(1, 3, H, W)` RGB in (0, 1) from stage two.
    pub stage2_rgb: NodeId,
}

/// One training example, padded and converted, with compiled transfer plans.
pub struct TrainSample {
    pub shadow_rgb: Arr,
    pub shadow_lab_norm: Arr,
    pub gt_rgb: Arr,
    pub gt_lab_norm: Arr,
    pub plans: Vec<Option<Arc<CftPlan>>>,
}

/// Complete removal result.
pub struct RemovalOutput {
    pub stage_one: StageOneOutput,
    pub final_rgb: ImagePlane,
    pub matchset: MatchSet,
}

struct PreppedImage {
    h: usize,
    w: usize,
    h_pad: usize,
    w_pad: usize,
    rgb_nchw: Arr,
    lab_norm_nchw: Arr,
}

/// Edge-replicate pad to the next multiple of `m` on both spatial axes.
fn pad_hwc_edge(a: &Array3<f64>, m: usize) -> Array3<f64> {
    let (h, w, c) = a.dim();
    let h2 = h.div_ceil(m) * m;
    let w2 = w.div_ceil(m) * m;
    if (h2, w2) == (h, w) {
        return a.clone();
    }
    let mut out = Array3::zeros((h2, w2, c));
    for r in 0..h2 {
        for col in 0..w2 {
            for k in 0..c {
                out[[r, col, k]] = a[[r.min(h - 1), col.min(w - 1), k]];
            }
        }
    }
    out
}

fn hwc_to_nchw(a: &Array3<f64>) -> Arr {
    let (h, w, c) = a.dim();
    let mut out = Arr::zeros(IxDyn(&[1, c, h, w]));
    for r in 0..h {
        for col in 0..w {
            for k in 0..c {
                out[[0, k, r, col]] = a[[r, col, k]];
            }
        }
    }
    out
}

fn nchw_to_hwc(v: &Arr) -> Array3<f64> {
    let shape = v.shape();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut out = Array3::zeros((h, w, c));
    for r in 0..h {
        for col in 0..w {
            for k in 0..c {
                out[[r, col, k]] = v[[0, k, r, col]];
            }
        }
    }
    out
}

/// Crop a padded `(1, 3, H, W)` normalized-LAB value to size, denormalize and
/// clamp to LAB convention.
fn materialize_lab(v: &Arr, h: usize, w: usize) -> Array3<f64> {
    let full = nchw_to_hwc(v);
    let cropped = full.slice(s![..h, ..w, ..]).to_owned();
    let mut lab = crate::imaging::denormalize_lab(&cropped);
    for (idx, val) in lab.indexed_iter_mut() {
        *val = if idx.2 == 0 {
            val.clamp(0.0, 100.0)
        } else {
            val.clamp(-128.0, 127.0)
        };
    }
    lab
}

fn materialize_rgb(v: &Arr, h: usize, w: usize) -> Result<ImagePlane> {
    let full = nchw_to_hwc(v);
    let cropped = full.slice(s![..h, ..w, ..]).mapv(|x| x.clamp(0.0, 1.0));
    ImagePlane::from_array(cropped, ColorSpace::Rgb)
}

/// Forward spatial difference along `axis` (2 = rows, 3 = columns) with a
/// zero trailing slice; mirrors the imaging gradient convention.
pub fn spatial_diff(tape: &mut Tape, x: NodeId, axis: usize) -> NodeId {
    assert!(axis == 2 || axis == 3, "spatial axes only");
    let value = diff_value(tape.value(x), axis);
    tape.custom(vec![x], value, Box::new(SpatialDiffOp { axis }))
}

fn diff_value(v: &Arr, axis: usize) -> Arr {
    let x = v.view().into_dimensionality::<ndarray::Ix4>().expect("4-d input");
    let (b, c, h, w) = x.dim();
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let (r2, c2) = if axis == 2 { (r + 1, col) } else { (r, col + 1) };
                    if r2 < h && c2 < w {
                        out[[bi, ci, r, col]] = x[[bi, ci, r2, c2]] - x[[bi, ci, r, col]];
                    }
                }
            }
        }
    }
    out.into_dyn()
}

struct SpatialDiffOp {
    axis: usize,
}

impl CustomOp for SpatialDiffOp {
    fn backward(&self, inputs: &[&Arr], _out_value: &Arr, out_grad: &Arr) -> Vec<Arr> {
        let g = out_grad
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("4-d gradient");
        let (b, c, h, w) = g.dim();
        let n = if self.axis == 2 { h } else { w };
        let mut dx = ndarray::Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        let j = if self.axis == 2 { r } else { col };
                        let mut v = 0.0;
                        if j >= 1 {
                            let (pr, pc) = if self.axis == 2 { (r - 1, col) } else { (r, col - 1) };
                            v += g[[bi, ci, pr, pc]];
                        }
                        if j + 2 <= n {
                            v -= g[[bi, ci, r, col]];
                        }
                        dx[[bi, ci, r, col]] = v;
                    }
                }
            }
        }
        debug_assert_eq!(inputs.len(), 1);
        vec![dx.into_dyn()]
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Classical matcher: patches are classed by the lightness margins, then
/// query/source candidates are scored with normalized cross-correlation on
/// the shadow-unaware lightness channel, mapped from [-1, 1] to [0, 1].
pub fn tm_match_image(
    shadow_rgb: &ImagePlane,
    unaware_lab: &ImagePlane,
    params: &MatchParams,
) -> Result<MatchSet> {
    let PatchClassing::LightnessMargin { shadow, source } = params.classing else {
        return Err(Error::config(
            "descriptor matching supports lightness_margin classing only",
        ));
    };
    if unaware_lab.colorspace() != ColorSpace::Lab {
        return Err(Error::validation("unaware image must be LAB"));
    }
    if (unaware_lab.height(), unaware_lab.width()) != (shadow_rgb.height(), shadow_rgb.width()) {
        return Err(Error::Shape("shadow and unaware image sizes differ".into()));
    }
    let (h, w) = (shadow_rgb.height(), shadow_rgb.width());
    let grid = grid_patches(h, w, params.grid_stride)?;

    let lab = rgb_to_lab(shadow_rgb)?;
    let ldata = lab.data();
    let mean_l: Vec<f64> = grid
        .iter()
        .map(|p| {
            ldata
                .slice(s![p.row..p.row + PATCH_SIZE, p.col..p.col + PATCH_SIZE, 0])
                .mean()
                .unwrap()
        })
        .collect();
    let med = median(ldata.slice(s![.., .., 0]).iter().copied().collect());

    let mut queries = Vec::new();
    let mut sources = Vec::new();
    for (i, &ml) in mean_l.iter().enumerate() {
        if ml < shadow * med {
            queries.push(i);
        } else if ml > source * med {
            sources.push(i);
        }
    }
    if queries.is_empty() || sources.is_empty() {
        return Ok(MatchSet::empty(params.grid_stride));
    }

    // Zero-mean unaware-lightness descriptors with their norms.
    let udata = unaware_lab.data();
    let descriptor = |p: &crate::dataset::PatchRef| -> (Array2<f64>, f64) {
        let patch = udata
            .slice(s![p.row..p.row + PATCH_SIZE, p.col..p.col + PATCH_SIZE, 0])
            .to_owned();
        let mean = patch.mean().unwrap();
        let centered = patch.mapv(|v| v - mean);
        let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
        (centered, norm)
    };
    let descs: Vec<(Array2<f64>, f64)> = grid.iter().map(descriptor).collect();

    let mut out_queries = Vec::with_capacity(queries.len());
    for &q in &queries {
        let (qd, qn) = &descs[q];
        let mut entries: Vec<MatchEntry> = Vec::new();
        for &si in &sources {
            let (sd, sn) = &descs[si];
            if *qn < 1e-12 || *sn < 1e-12 {
                continue;
            }
            let ncc = (qd * sd).sum() / (qn * sn);
            let score = (ncc + 1.0) / 2.0;
            if score >= params.score_floor {
                entries.push(MatchEntry {
                    source: grid[si],
                    score,
                });
            }
        }
        entries.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| (a.source.row, a.source.col).cmp(&(b.source.row, b.source.col)))
        });
        entries.truncate(params.k_candidates);
        out_queries.push(MatchQuery {
            query: grid[q],
            matches: entries,
        });
    }
    Ok(MatchSet {
        patch_size: PATCH_SIZE,
        grid_stride: params.grid_stride,
        queries: out_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{lab_pixel_to_rgb, lab_to_rgb};
    use rand::Rng;

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            backbone: BackboneConfig {
                widths: vec![4, 6, 8],
                ..BackboneConfig::default()
            },
            stage2_widths: vec![4, 6],
            ..PipelineConfig::default()
        }
    }

    fn random_rgb(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImagePlane {
        let mut a = Array3::zeros((h, w, 3));
        a.mapv_inplace(|_| rng.gen_range(0.0..1.0));
        ImagePlane::from_array(a, ColorSpace::Rgb).unwrap()
    }

    /// 64x64 scene with a dark bottom-right quadrant on a bright field,
    /// built in LAB so the lightness margins class patches predictably:
    /// the quadrant fills grid patch (32, 32) exactly, and the patches along
    /// the top row and left column never touch it.
    fn shadow_scene() -> ImagePlane {
        let mut lab = Array3::zeros((64, 64, 3));
        for r in 0..64 {
            for c in 0..64 {
                let inside = r >= 32 && c >= 32;
                let l = if inside { 30.0 } else { 70.0 };
                // mild chroma texture so descriptors are not degenerate
                let a = if (r / 8 + c / 8) % 2 == 0 { 12.0 } else { -8.0 };
                lab[[r, c, 0]] = l + ((r * 31 + c * 17) % 7) as f64;
                lab[[r, c, 1]] = a;
                lab[[r, c, 2]] = -a / 2.0;
            }
        }
        let lab = ImagePlane::from_array(lab, ColorSpace::Lab).unwrap();
        lab_to_rgb(&lab).unwrap()
    }

    fn synth_matchset() -> MatchSet {
        MatchSet {
            patch_size: PATCH_SIZE,
            grid_stride: 16,
            queries: vec![MatchQuery {
                query: crate::dataset::PatchRef {
                    image_id: 0,
                    row: 16,
                    col: 16,
                },
                matches: vec![
                    MatchEntry {
                        source: crate::dataset::PatchRef {
                            image_id: 0,
                            row: 0,
                            col: 32,
                        },
                        score: 0.9,
                    },
                    MatchEntry {
                        source: crate::dataset::PatchRef {
                            image_id: 0,
                            row: 32,
                            col: 0,
                        },
                        score: 0.7,
                    },
                ],
            }],
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("fancy".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn pyramid_and_output_shapes() {
        let p = CanetPipeline::init(small_config(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_rgb(&mut rng, 64, 64);
        let pyr = p.backbone_features(&img).unwrap();
        let dims: Vec<(usize, usize, usize)> = pyr.levels().iter().map(|l| l.features.dim()).collect();
        assert_eq!(dims, vec![(32, 32, 4), (16, 16, 6), (8, 8, 8)]);

        let out1 = p.stage_one(&img, &MatchSet::empty(16)).unwrap();
        assert_eq!(out1.l_hat.dim(), (64, 64, 1));
        assert_eq!(out1.ab_hat.dim(), (64, 64, 2));
        assert_eq!(out1.lab_recombined.dim(), (64, 64, 3));
        assert_eq!(
            out1.lab_recombined.slice(s![.., .., 0..1]),
            out1.l_hat.slice(s![.., .., ..])
        );

        let out2 = p.stage_two(&out1, &img).unwrap();
        assert_eq!((out2.height(), out2.width()), (64, 64));
        assert!(out2.data().iter().all(|v| (0.0..=1.0).contains(v) && v.is_finite()));
    }

    #[test]
    fn odd_sizes_pad_and_crop_back() {
        let p = CanetPipeline::init(small_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_rgb(&mut rng, 50, 37);
        let out = p.remove_shadow(&img).unwrap();
        assert_eq!((out.final_rgb.height(), out.final_rgb.width()), (50, 37));
        assert_eq!(out.stage_one.lab_recombined.dim(), (50, 37, 3));
    }

    #[test]
    fn four_hundred_pixel_inputs_follow_stride_arithmetic() {
        let mut cfg = small_config();
        cfg.backbone.widths = vec![2, 2, 2];
        let p = CanetPipeline::init(cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_rgb(&mut rng, 400, 400);
        let pyr = p.backbone_features(&img).unwrap();
        let dims: Vec<(usize, usize)> = pyr
            .levels()
            .iter()
            .map(|l| (l.features.dim().0, l.features.dim().1))
            .collect();
        assert_eq!(dims, vec![(200, 200), (100, 100), (50, 50)]);
    }

    #[test]
    fn zero_weights_give_constant_feature_maps() {
        let mut p = CanetPipeline::init(small_config(), 5).unwrap();
        let names: Vec<String> = p
            .store
            .names()
            .filter(|n| n.starts_with("s1.enc"))
            .map(str::to_string)
            .collect();
        for name in names {
            let t = p.store.get_mut(&name).unwrap();
            if name.ends_with(".weight") {
                t.fill(0.0);
            } else {
                t.fill(0.25);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_rgb(&mut rng, 64, 64);
        let pyr = p.backbone_features(&img).unwrap();
        for level in pyr.levels() {
            let (h, w, c) = level.features.dim();
            for k in 0..c {
                let ch = level.features.slice(s![.., .., k]);
                let first = ch[[0, 0]];
                assert!(
                    ch.iter().all(|v| (*v - first).abs() < 1e-12),
                    "channel {k} of a {h}x{w} level is not constant"
                );
            }
        }
    }

    #[test]
    fn no_cft_matches_full_with_empty_matchset_exactly() {
        let full = make_variant(AblationVariant::Full, 11).unwrap();
        let no_cft = make_variant(AblationVariant::NoCft, 11).unwrap();
        assert_eq!(full.store.content_hash(), no_cft.store.content_hash());
        let img = shadow_scene();
        let empty = MatchSet::empty(16);
        let a = full.stage_one(&img, &empty).unwrap();
        let b = no_cft.stage_one(&img, &synth_matchset()).unwrap();
        assert_eq!(a.lab_recombined, b.lab_recombined);

        // and no_cft ignores whatever matchset it is given
        let c = no_cft.stage_one(&img, &empty).unwrap();
        assert_eq!(b.lab_recombined, c.lab_recombined);
    }

    #[test]
    fn direct_replace_equals_full_with_unit_window() {
        let mut cfg_full = PipelineConfig::default();
        cfg_full.cft = CftConfig {
            k: 1,
            n: 1,
            sigma: cfg_full.cft.sigma,
            anchored: false,
        };
        let full = CanetPipeline::init(cfg_full, 13).unwrap();
        let direct = make_variant(AblationVariant::DirectReplaceCft, 13).unwrap();
        let img = shadow_scene();
        let set = synth_matchset();
        let a = full.stage_one(&img, &set).unwrap();
        let b = direct.stage_one(&img, &set).unwrap();
        assert_eq!(a.lab_recombined, b.lab_recombined);

        // sanity: the transfer does change the output vs. the empty set
        let c = direct.stage_one(&img, &MatchSet::empty(16)).unwrap();
        assert_ne!(b.lab_recombined, c.lab_recombined);
    }

    #[test]
    fn all_variants_produce_valid_rgb() {
        let img = shadow_scene();
        for v in AblationVariant::ALL {
            let p = make_variant(v, 17).unwrap();
            let out = p.remove_shadow(&img).unwrap();
            assert_eq!((out.final_rgb.height(), out.final_rgb.width()), (64, 64), "{v}");
            assert!(
                out.final_rgb
                    .data()
                    .iter()
                    .all(|x| x.is_finite() && (0.0..=1.0).contains(x)),
                "{v} emitted out-of-range values"
            );
        }
    }

    #[test]
    fn removal_is_deterministic() {
        let img = shadow_scene();
        let p1 = make_variant(AblationVariant::Full, 23).unwrap();
        let p2 = make_variant(AblationVariant::Full, 23).unwrap();
        assert_eq!(p1.store.content_hash(), p2.store.content_hash());
        let a = p1.remove_shadow(&img).unwrap();
        let b = p2.remove_shadow(&img).unwrap();
        assert_eq!(a.final_rgb.data(), b.final_rgb.data());
        assert_eq!(a.matchset, b.matchset);
    }

    #[test]
    fn perfect_outputs_zero_every_component() {
        let p = CanetPipeline::init(small_config(), 29).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_rgb(&mut rng, 16, 16);
        let gt_lab = rgb_to_lab(&gt).unwrap();
        let out1 = StageOneOutput::from_lab(gt_lab.data().clone()).unwrap();
        let loss = p.canet_loss(&out1, &gt, &gt).unwrap();
        assert_eq!(loss.per, 0.0);
        assert_eq!(loss.grad, 0.0);
        assert!(loss.rem.abs() < 1e-9, "rem = {}", loss.rem);
        assert!(loss.total.abs() < 1e-9);
    }

    #[test]
    fn single_pixel_residual_worked_example() {
        // 1x1 image, one channel off by 0.5, stage one perfect, weights (1,0,0)
        for rem_norm in [RemNorm::RootMeanPixel, RemNorm::RootSum] {
            let mut cfg = small_config();
            cfg.loss_weights = LossWeights {
                lambda_rem: 1.0,
                lambda_per: 0.0,
                lambda_grad: 0.0,
            };
            cfg.loss.rem_norm = rem_norm;
            let p = CanetPipeline::init(cfg, 31).unwrap();
            let gt = ImagePlane::filled_rgb(1, 1, [0.2, 0.4, 0.6]).unwrap();
            let out2 = ImagePlane::filled_rgb(1, 1, [0.7, 0.4, 0.6]).unwrap();
            let gt_lab = rgb_to_lab(&gt).unwrap();
            let out1 = StageOneOutput::from_lab(gt_lab.data().clone()).unwrap();
            let loss = p.canet_loss(&out1, &out2, &gt).unwrap();
            assert!(
                (loss.rem - 0.5).abs() < 1e-9,
                "{rem_norm:?}: rem = {}",
                loss.rem
            );
            assert!((loss.total - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn total_is_the_exact_weighted_component_sum() {
        let p = CanetPipeline::init(small_config(), 37).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_rgb(&mut rng, 12, 12);
        let out2 = random_rgb(&mut rng, 12, 12);
        let mut lab = rgb_to_lab(&gt).unwrap().data().clone();
        lab.mapv_inplace(|v| v * 0.9);
        let out1 = StageOneOutput::from_lab(lab).unwrap();
        let loss = p.canet_loss(&out1, &out2, &gt).unwrap();
        assert!(loss.rem >= 0.0 && loss.per >= 0.0 && loss.grad >= 0.0);
        let w = p.config.loss_weights;
        let expect = (loss.rem * w.lambda_rem + loss.per * w.lambda_per) + loss.grad * w.lambda_grad;
        assert_eq!(loss.total, expect);
        assert!(loss.total > 0.0);
    }

    #[test]
    fn spatial_diff_matches_the_imaging_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_rgb(&mut rng, 7, 9);
        let reference = crate::imaging::image_gradient(&img);
        let mut tape = Tape::new();
        let x = tape.constant(hwc_to_nchw(img.data()));
        let dx = spatial_diff(&mut tape, x, 3);
        let dy = spatial_diff(&mut tape, x, 2);
        let dxv = nchw_to_hwc(tape.value(dx));
        let dyv = nchw_to_hwc(tape.value(dy));
        for r in 0..7 {
            for c in 0..9 {
                for k in 0..3 {
                    assert!((dxv[[r, c, k]] - reference[[r, c, k, 0]]).abs() < 1e-12);
                    assert!((dyv[[r, c, k]] - reference[[r, c, k, 1]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn composite_loss_gradients_match_finite_differences() {
        let mut cfg = small_config();
        cfg.cft_levels = vec![1, 2];
        let p = CanetPipeline::init(cfg, 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shadow = random_rgb(&mut rng, 8, 8);
        let gt = random_rgb(&mut rng, 8, 8);
        let sample = p.prepare_sample(&shadow, &gt, &MatchSet::empty(16)).unwrap();

        let eval = |store: &VarStore| -> f64 {
            let mut tape = Tape::new();
            let vars = TapeVars::bind(&mut tape, store);
            let nodes = p.sample_loss_graph(&mut tape, &vars, &sample);
            tape.scalar(nodes.total)
        };
        let grads = {
            let mut tape = Tape::new();
            let vars = TapeVars::bind(&mut tape, &p.store);
            let nodes = p.sample_loss_graph(&mut tape, &vars, &sample);
            tape.backward(nodes.total);
            vars.grads(&tape, &p.store)
        };

        // probe ten tensors spread across both stages
        let probe: Vec<String> = p
            .store
            .names()
            .filter(|n| p.store.is_trainable(n))
            .enumerate()
            .filter(|(i, _)| i % 7 == 0)
            .map(|(_, n)| n.to_string())
            .take(10)
            .collect();
        assert_eq!(probe.len(), 10);
        let eps = 1e-5;
        for name in probe {
            let flat_idx = 0;
            let mut store = p.store.clone();
            let orig = store.get(&name).unwrap().as_slice().unwrap()[flat_idx];
            store.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat_idx] = orig + eps;
            let fp = eval(&store);
            store.get_mut(&name).unwrap().as_slice_mut().unwrap()[flat_idx] = orig - eps;
            let fm = eval(&store);
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads
                .get(&name)
                .map(|g| g.as_slice().unwrap()[flat_idx])
                .unwrap_or(0.0);
            let scale = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / scale < 1e-4,
                "{name}: numeric {numeric} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn tm_matching_finds_bright_sources_for_dark_queries() {
        let img = shadow_scene();
        let unaware = build_unaware_image(&img).unwrap();
        let params = MatchParams {
            score_floor: 0.0,
            ..MatchParams::default()
        };
        let set = tm_match_image(&img, &unaware, &params).unwrap();
        assert!(!set.queries.is_empty());
        let lab = rgb_to_lab(&img).unwrap();
        for q in &set.queries {
            // every query patch overlaps the dark quadrant
            assert!(q.query.row + PATCH_SIZE > 32 && q.query.col + PATCH_SIZE > 32);
            assert!(!q.matches.is_empty());
            assert!(q.matches.len() <= params.k_candidates);
            let mut prev = f64::INFINITY;
            for m in &q.matches {
                assert!((0.0..=1.0).contains(&m.score));
                assert!(m.score <= prev);
                prev = m.score;
                // sources come from the bright region
                let ml = lab
                    .data()
                    .slice(s![
                        m.source.row..m.source.row + PATCH_SIZE,
                        m.source.col..m.source.col + PATCH_SIZE,
                        0
                    ])
                    .mean()
                    .unwrap();
                assert!(ml > 45.0, "source at {:?} has mean L {ml}", m.source);
            }
        }
        let _ = lab_pixel_to_rgb([50.0, 0.0, 0.0]); // keep the import exercised
    }

    #[test]
    fn config_validation_rejects_bad_layouts() {
        let mut cfg = PipelineConfig::default();
        cfg.backbone.strides = vec![2, 4, 6];
        assert!(CanetPipeline::init(cfg, 0).is_err());

        let mut cfg = PipelineConfig::default();
        cfg.cft_levels = vec![5];
        assert!(CanetPipeline::init(cfg, 0).is_err());

        let mut cfg = PipelineConfig::default();
        cfg.backbone.variant = BackboneVariant::PretrainedDense;
        assert!(matches!(CanetPipeline::init(cfg, 0), Err(Error::Config(_))));

        let mut cfg = PipelineConfig::default();
        cfg.loss_weights.lambda_per = -1.0;
        assert!(CanetPipeline::init(cfg, 0).is_err());
    }

    #[test]
    fn pretrained_backbone_loads_and_freezes() {
        let dir = tempfile::tempdir().unwrap();
        let donor = CanetPipeline::init(small_config(), 51).unwrap();
        let path = dir.path().join("backbone.ckpt");
        checkpoint::save_checkpoint(
            &checkpoint::Checkpoint {
                step: 0,
                epoch: 0,
                config_hash: String::new(),
                weights: donor.store.clone(),
                optimizer: None,
            },
            &path,
        )
        .unwrap();

        let mut cfg = small_config();
        cfg.backbone.variant = BackboneVariant::PretrainedDense;
        cfg.backbone.weights_file = Some(path);
        let p = CanetPipeline::init(cfg, 99).unwrap();
        for name in p.store.names() {
            if name.starts_with("s1.enc") {
                assert!(!p.store.is_trainable(name), "{name} should be frozen");
                assert_eq!(p.store.get(name), donor.store.get(name), "{name} not loaded");
            }
        }
    }
}
