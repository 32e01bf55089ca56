//! Contextual patch matching: a shared patch feature extractor with a 3-way
//! pair-type classifier and a correlation regressor, plus two-phase
//! whole-image match inference.

use ndarray::{s, Array2, Array3, ArrayView1, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PairLabel, PatchRef, PATCH_SIZE};
use crate::imaging::{normalize_lab, rgb_to_lab, shadow_unaware, ColorSpace, ImagePlane};
use crate::nn::{softmax_rows, Arr, Conv2dLayer, LinearLayer, NodeId, ResBlock, Tape, TapeVars, VarStore};
use crate::{Error, Result};

/// Patch descriptor dimensionality produced by the extractor bottleneck.
pub const FEATURE_DIM: usize = 256;
/// Input channels per patch: shadow RGB plus the lightness-normalized triple.
pub const INPUT_CHANNELS: usize = 6;
/// Local-mean kernel used when building the shadow-unaware lightness.
pub const UNAWARE_KERNEL: usize = 3;

/// One matcher input: a 32x32x6 tensor — 3 channels from the shadow image
/// and 3 channels of normalized LAB whose L is the shadow-unaware lightness.
#[derive(Clone, Debug)]
pub struct CpmInput {
    data: Array3<f64>,
}

impl CpmInput {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let dim = data.dim();
        if dim != (PATCH_SIZE, PATCH_SIZE, INPUT_CHANNELS) {
            return Err(Error::Shape(format!(
                "matcher input must be {PATCH_SIZE}x{PATCH_SIZE}x{INPUT_CHANNELS}, got {dim:?}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("matcher input contains non-finite values"));
        }
        Ok(CpmInput { data })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

/// Head outputs for one pair.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CpmPrediction {
    /// Classes mapped -1 -> index 0, 0 -> 1, +1 -> 2.
    pub type_probs: [f64; 3],
    /// Correlation degree in [0, 1].
    pub score: f64,
}

impl CpmPrediction {
    pub fn new(type_probs: [f64; 3], score: f64) -> Result<Self> {
        let sum: f64 = type_probs.iter().sum();
        if type_probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "type probabilities must be non-negative and sum to 1, got {type_probs:?}"
            )));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::validation(format!("score {score} outside [0, 1]")));
        }
        Ok(CpmPrediction { type_probs, score })
    }
}

/// One ranked source candidate for a query patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub source: PatchRef,
    pub score: f64,
}

/// A query (shadow) patch with its ranked non-shadow sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchQuery {
    pub query: PatchRef,
    pub matches: Vec<MatchEntry>,
}

/// Per-image matching result; serializable to JSON for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub patch_size: usize,
    pub grid_stride: usize,
    pub queries: Vec<MatchQuery>,
}

impl MatchSet {
    pub fn empty(grid_stride: usize) -> Self {
        MatchSet {
            patch_size: PATCH_SIZE,
            grid_stride,
            queries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: MatchSet = serde_json::from_str(text)?;
        for q in &set.queries {
            let mut prev = f64::INFINITY;
            for m in &q.matches {
                if m.score > prev {
                    return Err(Error::validation("match scores must be descending"));
                }
                prev = m.score;
            }
        }
        Ok(set)
    }
}

/// How grid patches are classed shadow/non-shadow at inference, where no
/// mask exists.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchClassing {
    /// Threshold each patch's mean lightness against the image median:
    /// below `shadow` x median -> query; above `source` x median -> source;
    /// between -> ambiguous (excluded from both roles).
    LightnessMargin { shadow: f64, source: f64 },
    /// Classify each patch against the brightest and darkest grid patches and
    /// use the pair-type head's verdicts.
    AnchorVote,
}

impl Default for PatchClassing {
    fn default() -> Self {
        PatchClassing::LightnessMargin {
            shadow: 0.75,
            source: 0.95,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    pub grid_stride: usize,
    pub k_candidates: usize,
    pub score_floor: f64,
    pub classing: PatchClassing,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            grid_stride: 16,
            k_candidates: 3,
            score_floor: 0.5,
            classing: PatchClassing::default(),
        }
    }
}

/// Phase counters for the two-phase inference contract.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchStats {
    pub grid_patches: usize,
    pub feature_extractions: usize,
    pub pairs_scored: usize,
}

/// Grid patch classes by index into the grid list.
#[derive(Clone, Debug, Default)]
pub struct PatchClasses {
    pub queries: Vec<usize>,
    pub sources: Vec<usize>,
    pub ambiguous: Vec<usize>,
}

/// The dual-head matcher network.
pub struct CpmNet {
    store: VarStore,
    conv1: Conv2dLayer,
    res1: ResBlock,
    conv2: Conv2dLayer,
    res2: ResBlock,
    conv3: Conv2dLayer,
    res3: ResBlock,
    conv4: Conv2dLayer,
    bottleneck: LinearLayer,
    cls: [LinearLayer; 3],
    reg: [LinearLayer; 3],
}

impl CpmNet {
    /// Fresh network with seeded He-normal weights. Extractor schedule:
    /// s2 conv to 64, res 64, s2 conv to 96, res 96, s2 conv to 96, res 96,
    /// s1 conv to 64, then a 1024 -> 256 bottleneck. Both heads take the two
    /// concatenated descriptors (512) through 256 and 128 to their output.
    pub fn init(seed: u64) -> Self {
        let mut store = VarStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = Conv2dLayer::init(&mut store, &mut rng, "extractor.conv1", INPUT_CHANNELS, 64, 3, 2, 1);
        let res1 = ResBlock::init(&mut store, &mut rng, "extractor.res1", 64);
        let conv2 = Conv2dLayer::init(&mut store, &mut rng, "extractor.conv2", 64, 96, 3, 2, 1);
        let res2 = ResBlock::init(&mut store, &mut rng, "extractor.res2", 96);
        let conv3 = Conv2dLayer::init(&mut store, &mut rng, "extractor.conv3", 96, 96, 3, 2, 1);
        let res3 = ResBlock::init(&mut store, &mut rng, "extractor.res3", 96);
        let conv4 = Conv2dLayer::init(&mut store, &mut rng, "extractor.conv4", 96, 64, 3, 1, 1);
        let flat = 64 * 4 * 4;
        let bottleneck = LinearLayer::init(&mut store, &mut rng, "extractor.bottleneck", flat, FEATURE_DIM);
        let cls = [
            LinearLayer::init(&mut store, &mut rng, "classifier.fc1", 2 * FEATURE_DIM, 256),
            LinearLayer::init(&mut store, &mut rng, "classifier.fc2", 256, 128),
            LinearLayer::init(&mut store, &mut rng, "classifier.fc3", 128, 3),
        ];
        let reg = [
            LinearLayer::init(&mut store, &mut rng, "regressor.fc1", 2 * FEATURE_DIM, 256),
            LinearLayer::init(&mut store, &mut rng, "regressor.fc2", 256, 128),
            LinearLayer::init(&mut store, &mut rng, "regressor.fc3", 128, 1),
        ];
        CpmNet {
            store,
            conv1,
            res1,
            conv2,
            res2,
            conv3,
            res3,
            conv4,
            bottleneck,
            cls,
            reg,
        }
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut VarStore {
        &mut self.store
    }

    /// Extractor forward on a `(B, 6, 32, 32)` node; returns the `(B, 256)`
    /// descriptor node and the intermediate spatial shapes as (H, W, C).
    pub fn forward_features_traced(
        &self,
        tape: &mut Tape,
        vars: &TapeVars,
        x: NodeId,
    ) -> (NodeId, Vec<[usize; 3]>) {
        let mut shapes = Vec::with_capacity(4);
        let record = |tape: &Tape, id: NodeId| {
            let d = tape.value(id).shape().to_vec();
            [d[2], d[3], d[1]]
        };
        let y = self.conv1.forward(tape, vars, x);
        let y = tape.relu(y);
        let y = self.res1.forward(tape, vars, y);
        shapes.push(record(tape, y));
        let y = self.conv2.forward(tape, vars, y);
        let y = tape.relu(y);
        let y = self.res2.forward(tape, vars, y);
        shapes.push(record(tape, y));
        let y = self.conv3.forward(tape, vars, y);
        let y = tape.relu(y);
        let y = self.res3.forward(tape, vars, y);
        shapes.push(record(tape, y));
        let y = self.conv4.forward(tape, vars, y);
        let y = tape.relu(y);
        shapes.push(record(tape, y));
        let b = tape.value(y).shape()[0];
        let flat = tape.value(y).len() / b;
        let y = tape.reshape(y, &[b, flat]);
        let feats = self.bottleneck.forward(tape, vars, y);
        (feats, shapes)
    }

    pub fn forward_features(&self, tape: &mut Tape, vars: &TapeVars, x: NodeId) -> NodeId {
        self.forward_features_traced(tape, vars, x).0
    }

    /// Classifier head on a `(B, 512)` concatenated pair node -> `(B, 3)` logits.
    pub fn forward_classifier(&self, tape: &mut Tape, vars: &TapeVars, pair: NodeId) -> NodeId {
        let y = self.cls[0].forward(tape, vars, pair);
        let y = tape.relu(y);
        let y = self.cls[1].forward(tape, vars, y);
        let y = tape.relu(y);
        self.cls[2].forward(tape, vars, y)
    }

    /// Regressor head on a `(B, 512)` pair node -> `(B, 1)` pre-sigmoid logits.
    pub fn forward_regressor(&self, tape: &mut Tape, vars: &TapeVars, pair: NodeId) -> NodeId {
        let y = self.reg[0].forward(tape, vars, pair);
        let y = tape.relu(y);
        let y = self.reg[1].forward(tape, vars, y);
        let y = tape.relu(y);
        self.reg[2].forward(tape, vars, y)
    }

    /// Inference: descriptors for a batch of patches, `(B, 256)`.
    pub fn extract_patch_features(&self, inputs: &[CpmInput]) -> Result<Array2<f64>> {
        Ok(self.extract_features_traced(inputs)?.0)
    }

    /// Same as [`Self::extract_patch_features`] but also reports the
    /// intermediate shapes for contract tests.
    pub fn extract_features_traced(
        &self,
        inputs: &[CpmInput],
    ) -> Result<(Array2<f64>, Vec<[usize; 3]>)> {
        if inputs.is_empty() {
            return Ok((Array2::zeros((0, FEATURE_DIM)), Vec::new()));
        }
        let x = batch_to_nchw(inputs);
        let mut tape = Tape::new();
        let vars = TapeVars::bind(&mut tape, &self.store);
        let x = tape.leaf(x, false);
        let (feats, shapes) = self.forward_features_traced(&mut tape, &vars, x);
        let out = tape
            .value(feats)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d features")
            .to_owned();
        Ok((out, shapes))
    }

    /// Inference: 3-way type probabilities for one descriptor pair.
    pub fn classify_pair(&self, f1: ArrayView1<'_, f64>, f2: ArrayView1<'_, f64>) -> [f64; 3] {
        let out = self.score_pairs_flat(&pair_rows(&[(f1, f2)]));
        out.0[0]
    }

    /// Inference: correlation degree in [0, 1] for one descriptor pair.
    pub fn regress_correlation(&self, f1: ArrayView1<'_, f64>, f2: ArrayView1<'_, f64>) -> f64 {
        let out = self.score_pairs_flat(&pair_rows(&[(f1, f2)]));
        out.1[0]
    }

    /// Batched head evaluation over pre-concatenated `(P, 512)` rows.
    fn score_pairs_flat(&self, pairs: &Array2<f64>) -> (Vec<[f64; 3]>, Vec<f64>) {
        let mut tape = Tape::new();
        let vars = TapeVars::bind(&mut tape, &self.store);
        let x = tape.leaf(pairs.clone().into_dyn(), false);
        let logits = self.forward_classifier(&mut tape, &vars, x);
        let reg = self.forward_regressor(&mut tape, &vars, x);
        let reg = tape.sigmoid(reg);
        let logits2 = tape
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let probs = softmax_rows(&logits2);
        let type_probs = probs
            .outer_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect();
        let scores = tape.value(reg).iter().copied().collect();
        (type_probs, scores)
    }
}

fn pair_rows(pairs: &[(ArrayView1<'_, f64>, ArrayView1<'_, f64>)]) -> Array2<f64> {
    let mut out = Array2::zeros((pairs.len(), 2 * FEATURE_DIM));
    for (i, (a, b)) in pairs.iter().enumerate() {
        out.slice_mut(s![i, ..FEATURE_DIM]).assign(a);
        out.slice_mut(s![i, FEATURE_DIM..]).assign(b);
    }
    out
}

/// Stack HWC patch tensors into the NCHW batch the tape convolutions expect.
pub fn batch_to_nchw(inputs: &[CpmInput]) -> Arr {
    let b = inputs.len();
    let mut out = Arr::zeros(IxDyn(&[b, INPUT_CHANNELS, PATCH_SIZE, PATCH_SIZE]));
    for (i, input) in inputs.iter().enumerate() {
        for ((r, c, ch), v) in input.data.indexed_iter() {
            out[[i, ch, r, c]] = *v;
        }
    }
    out
}

/// Loss terms for one pair prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CpmLoss {
    pub cls: f64,
    pub reg: f64,
}

impl CpmLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }
}

/// Pairwise loss: cross-entropy on the true type plus the regression
/// residual — absolute by default (the L2 norm of a scalar), squared behind
/// the flag.
pub fn cpm_loss(pred: &CpmPrediction, label: &PairLabel, squared_reg: bool) -> CpmLoss {
    let p_true = pred.type_probs[label.pair_type.class_index()];
    let cls = -p_true.ln();
    let resid = (pred.score - label.correlation).abs();
    let reg = if squared_reg { resid * resid } else { resid };
    CpmLoss { cls, reg }
}

/// Tape-level batch loss from raw head outputs: mean cross-entropy over
/// `(B, 3)` class logits plus the mean regression residual on sigmoid of the
/// `(B, 1)` logits. Used by training and by the finite-difference check.
pub fn cpm_training_loss(
    tape: &mut Tape,
    cls_logits: NodeId,
    reg_logits: NodeId,
    class_indices: Vec<usize>,
    correlations: &[f64],
    squared_reg: bool,
) -> NodeId {
    let b = correlations.len();
    let cls = tape.softmax_cross_entropy(cls_logits, class_indices);
    let scores = tape.sigmoid(reg_logits);
    let targets = tape.constant(
        Arr::from_shape_vec(IxDyn(&[b, 1]), correlations.to_vec()).expect("target shape"),
    );
    let resid = tape.sub(scores, targets);
    let resid = if squared_reg {
        tape.mul(resid, resid)
    } else {
        tape.abs(resid)
    };
    let reg = tape.mean_all(resid);
    tape.add(cls, reg)
}

/// Build the full-resolution 6-channel matcher raster for an RGB shadow
/// image: channels 0-2 the RGB values, channels 3-5 the normalized LAB
/// triple with L replaced by the shadow-unaware lightness.
pub fn build_match_raster(shadow_rgb: &ImagePlane) -> Result<Array3<f64>> {
    let unaware = build_unaware_image(shadow_rgb)?;
    match_raster_from(shadow_rgb, &unaware)
}

/// The shadow-unaware companion image: LAB with L passed through the
/// local-mean normalization.
pub fn build_unaware_image(shadow_rgb: &ImagePlane) -> Result<ImagePlane> {
    if shadow_rgb.colorspace() != ColorSpace::Rgb {
        return Err(Error::validation("expected an RGB shadow image"));
    }
    let lab = rgb_to_lab(shadow_rgb)?;
    let light = lab.lightness()?;
    let flat = shadow_unaware(&light, UNAWARE_KERNEL)?;
    let mut data = lab.into_array();
    // Shadow-unaware L may leave [0, 100] slightly; clamp to stay a valid
    // LAB raster.
    for ((r, c), v) in flat.data().indexed_iter() {
        data[[r, c, 0]] = v.clamp(0.0, 100.0);
    }
    ImagePlane::from_array(data, ColorSpace::Lab)
}

/// Assemble the 6-channel raster from an RGB image and its unaware LAB twin.
pub fn match_raster_from(shadow_rgb: &ImagePlane, unaware_lab: &ImagePlane) -> Result<Array3<f64>> {
    if shadow_rgb.colorspace() != ColorSpace::Rgb || unaware_lab.colorspace() != ColorSpace::Lab {
        return Err(Error::validation(
            "match raster needs an RGB image and a LAB unaware image",
        ));
    }
    let (h, w, _) = shadow_rgb.data().dim();
    if unaware_lab.data().dim() != (h, w, 3) {
        return Err(Error::Shape(format!(
            "unaware image {:?} does not match shadow image {}x{}",
            unaware_lab.data().dim(),
            h,
            w
        )));
    }
    let norm = normalize_lab(unaware_lab.data());
    let mut out = Array3::zeros((h, w, INPUT_CHANNELS));
    out.slice_mut(s![.., .., 0..3]).assign(shadow_rgb.data());
    out.slice_mut(s![.., .., 3..6]).assign(&norm);
    Ok(out)
}

/// Slice one matcher input out of the 6-channel raster.
pub fn cpm_input_at(raster: &Array3<f64>, patch: &PatchRef) -> Result<CpmInput> {
    let (h, w, _) = raster.dim();
    if !patch.fits(h, w) {
        return Err(Error::Shape(format!(
            "patch at ({}, {}) exceeds raster {}x{}",
            patch.row, patch.col, h, w
        )));
    }
    CpmInput::new(
        raster
            .slice(s![
                patch.row..patch.row + PATCH_SIZE,
                patch.col..patch.col + PATCH_SIZE,
                ..
            ])
            .to_owned(),
    )
}

/// Overlapping grid of patch anchors covering the image, stride apart, with
/// the trailing anchor clamped so the last row/column of pixels is covered.
pub fn grid_patches(height: usize, width: usize, stride: usize) -> Result<Vec<PatchRef>> {
    if height < PATCH_SIZE || width < PATCH_SIZE {
        return Err(Error::Shape(format!(
            "image {height}x{width} smaller than a {PATCH_SIZE}-pixel patch"
        )));
    }
    if stride == 0 {
        return Err(Error::config("grid stride must be positive"));
    }
    let axis = |extent: usize| {
        let mut anchors: Vec<usize> = (0..=extent - PATCH_SIZE).step_by(stride).collect();
        if *anchors.last().unwrap() != extent - PATCH_SIZE {
            anchors.push(extent - PATCH_SIZE);
        }
        anchors
    };
    let rows = axis(height);
    let cols = axis(width);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &row in &rows {
        for &col in &cols {
            out.push(PatchRef {
                image_id: 0,
                row,
                col,
            });
        }
    }
    Ok(out)
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

/// Class grid patches into query (shadow) / source (non-shadow) / ambiguous.
/// `mean_lightness` is per-patch mean L of the shadow image; `median_lightness`
/// the image-wide median L.
pub fn class_patches(
    net: &CpmNet,
    features: &Array2<f64>,
    mean_lightness: &[f64],
    median_lightness: f64,
    classing: &PatchClassing,
) -> PatchClasses {
    let mut classes = PatchClasses::default();
    match *classing {
        PatchClassing::LightnessMargin { shadow, source } => {
            for (i, &ml) in mean_lightness.iter().enumerate() {
                if ml < shadow * median_lightness {
                    classes.queries.push(i);
                } else if ml > source * median_lightness {
                    classes.sources.push(i);
                } else {
                    classes.ambiguous.push(i);
                }
            }
        }
        PatchClassing::AnchorVote => {
            let bright = argmax(mean_lightness);
            let dark = argmin(mean_lightness);
            let n = mean_lightness.len();
            let mut rows = Array2::zeros((2 * n, 2 * FEATURE_DIM));
            for i in 0..n {
                rows.slice_mut(s![i, ..FEATURE_DIM]).assign(&features.row(i));
                rows.slice_mut(s![i, FEATURE_DIM..]).assign(&features.row(bright));
                rows.slice_mut(s![n + i, ..FEATURE_DIM]).assign(&features.row(i));
                rows.slice_mut(s![n + i, FEATURE_DIM..]).assign(&features.row(dark));
            }
            let (probs, _) = net.score_pairs_flat(&rows);
            for i in 0..n {
                // (i, brightest) classed +1 means i is the shadow side;
                // (i, darkest) classed -1 means i is the non-shadow side.
                let shadow_vote = probs[i][2] > 0.5;
                let source_vote = probs[n + i][0] > 0.5;
                match (shadow_vote, source_vote) {
                    (true, false) => classes.queries.push(i),
                    (false, true) => classes.sources.push(i),
                    _ => classes.ambiguous.push(i),
                }
            }
        }
    }
    classes
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Two-phase match inference. Phase 1 extracts descriptors for every grid
/// patch exactly once; phase 2 scores (query, source) candidates, keeping
/// pairs the classifier marks shadow->non-shadow with probability > 0.5 and
/// score >= the floor, ranked per query by descending score (ties broken by
/// source (row, col) ascending) and truncated to `k_candidates`.
pub fn match_image(
    net: &CpmNet,
    shadow_rgb: &ImagePlane,
    unaware_lab: &ImagePlane,
    params: &MatchParams,
) -> Result<MatchSet> {
    Ok(match_image_instrumented(net, shadow_rgb, unaware_lab, params)?.0)
}

/// [`match_image`] with phase counters exposed.
pub fn match_image_instrumented(
    net: &CpmNet,
    shadow_rgb: &ImagePlane,
    unaware_lab: &ImagePlane,
    params: &MatchParams,
) -> Result<(MatchSet, MatchStats)> {
    let raster = match_raster_from(shadow_rgb, unaware_lab)?;
    let (h, w, _) = raster.dim();
    let grid = grid_patches(h, w, params.grid_stride)?;
    let mut stats = MatchStats {
        grid_patches: grid.len(),
        ..MatchStats::default()
    };

    // Phase 1: one descriptor per grid patch.
    let inputs: Vec<CpmInput> = grid
        .iter()
        .map(|p| cpm_input_at(&raster, p))
        .collect::<Result<_>>()?;
    let features = net.extract_patch_features(&inputs)?;
    stats.feature_extractions = inputs.len();

    // Patch classing on the shadow image's own lightness.
    let lab = rgb_to_lab(shadow_rgb)?;
    let lplane = lab.lightness()?;
    let ldata = lplane.data();
    let mean_l: Vec<f64> = grid
        .iter()
        .map(|p| {
            ldata
                .slice(s![p.row..p.row + PATCH_SIZE, p.col..p.col + PATCH_SIZE])
                .mean()
                .unwrap()
        })
        .collect();
    let med = median(ldata.iter().copied().collect());
    let classes = class_patches(net, &features, &mean_l, med, &params.classing);

    if classes.queries.is_empty() || classes.sources.is_empty() {
        return Ok((MatchSet::empty(params.grid_stride), stats));
    }

    // Phase 2: score all (query, source) candidates in one batch.
    let pair_index: Vec<(usize, usize)> = classes
        .queries
        .iter()
        .flat_map(|&q| classes.sources.iter().map(move |&s| (q, s)))
        .collect();
    let mut rows = Array2::zeros((pair_index.len(), 2 * FEATURE_DIM));
    for (r, &(q, s)) in pair_index.iter().enumerate() {
        rows.slice_mut(s![r, ..FEATURE_DIM]).assign(&features.row(q));
        rows.slice_mut(s![r, FEATURE_DIM..]).assign(&features.row(s));
    }
    let (probs, scores) = net.score_pairs_flat(&rows);
    stats.pairs_scored = pair_index.len();

    let mut queries = Vec::new();
    for &q in &classes.queries {
        let mut entries: Vec<MatchEntry> = pair_index
            .iter()
            .enumerate()
            .filter(|(r, (qi, _))| {
                *qi == q && probs[*r][2] > 0.5 && scores[*r] >= params.score_floor
            })
            .map(|(r, &(_, si))| MatchEntry {
                source: grid[si],
                score: scores[r],
            })
            .collect();
        entries.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| (a.source.row, a.source.col).cmp(&(b.source.row, b.source.col)))
        });
        entries.truncate(params.k_candidates);
        queries.push(MatchQuery {
            query: grid[q],
            matches: entries,
        });
    }
    Ok((
        MatchSet {
            patch_size: PATCH_SIZE,
            grid_stride: params.grid_stride,
            queries,
        },
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PairType;
    use crate::imaging::lab_pixel_to_rgb;
    use ndarray::IxDyn;

    fn tiny_input(fill: f64) -> CpmInput {
        CpmInput::new(Array3::from_elem((PATCH_SIZE, PATCH_SIZE, INPUT_CHANNELS), fill)).unwrap()
    }

    #[test]
    fn extractor_shapes_follow_the_schedule() {
        let net = CpmNet::init(0);
        let (feats, shapes) = net
            .extract_features_traced(&[tiny_input(0.1), tiny_input(0.4)])
            .unwrap();
        assert_eq!(feats.dim(), (2, FEATURE_DIM));
        assert_eq!(
            shapes,
            vec![[16, 16, 64], [8, 8, 96], [4, 4, 96], [4, 4, 64]]
        );
    }

    #[test]
    fn wrong_patch_shape_is_rejected() {
        let bad = Array3::zeros((PATCH_SIZE, PATCH_SIZE, 3));
        assert!(matches!(CpmInput::new(bad), Err(Error::Shape(_))));
        let bad = Array3::zeros((16, 16, INPUT_CHANNELS));
        assert!(matches!(CpmInput::new(bad), Err(Error::Shape(_))));
    }

    #[test]
    fn classifier_probs_normalize_and_regressor_stays_bounded() {
        let net = CpmNet::init(3);
        let feats = net
            .extract_patch_features(&[tiny_input(0.9), tiny_input(-0.2)])
            .unwrap();
        for _ in 0..25 {
            let probs = net.classify_pair(feats.row(0), feats.row(1));
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(probs.iter().all(|p| *p >= 0.0));
            let score = net.regress_correlation(feats.row(0), feats.row(1));
            assert!((0.0..=1.0).contains(&score));
        }
    }

    #[test]
    fn loss_examples_evaluate_exactly() {
        let perfect = CpmPrediction::new([0.0, 0.0, 1.0], 1.0).unwrap();
        let label = PairLabel {
            pair_type: PairType::ShadowNonShadow,
            correlation: 1.0,
        };
        let l = cpm_loss(&perfect, &label, false);
        assert_eq!(l.total(), 0.0);

        let uniform = CpmPrediction::new([1.0 / 3.0; 3], 1.0).unwrap();
        let l = cpm_loss(&uniform, &label, false);
        assert!((l.cls - 3.0_f64.ln()).abs() < 1e-12);
        assert_eq!(l.reg, 0.0);

        let off = CpmPrediction::new([0.0, 0.0, 1.0], 0.3).unwrap();
        let l = cpm_loss(&off, &label, false);
        assert!((l.total() - 0.7).abs() < 1e-12);
        let l2 = cpm_loss(&off, &label, true);
        assert!((l2.reg - 0.49).abs() < 1e-12);
    }

    #[test]
    fn training_loss_gradient_matches_finite_differences() {
        let class_indices = vec![2usize, 0, 1];
        let corrs = [1.0, 0.0, 1.0];
        let mut x0: Vec<f64> = vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.4, -0.6, 0.2, 0.05];
        let mut z0: Vec<f64> = vec![0.4, -1.2, 2.0];
        let eval = |xs: &[f64], zs: &[f64]| {
            let mut tape = Tape::new();
            let logits = tape.leaf(Arr::from_shape_vec(IxDyn(&[3, 3]), xs.to_vec()).unwrap(), true);
            let regl = tape.leaf(Arr::from_shape_vec(IxDyn(&[3, 1]), zs.to_vec()).unwrap(), true);
            let loss =
                cpm_training_loss(&mut tape, logits, regl, class_indices.clone(), &corrs, false);
            tape.backward(loss);
            (
                tape.scalar(loss),
                tape.grad(logits).into_raw_vec_and_offset().0,
                tape.grad(regl).into_raw_vec_and_offset().0,
            )
        };
        let (_, gx, gz) = eval(&x0, &z0);
        let eps = 1e-6;
        for i in 0..x0.len() {
            let orig = x0[i];
            x0[i] = orig + eps;
            let (fp, _, _) = eval(&x0, &z0);
            x0[i] = orig - eps;
            let (fm, _, _) = eval(&x0, &z0);
            x0[i] = orig;
            let num = (fp - fm) / (2.0 * eps);
            assert!(
                (num - gx[i]).abs() < 1e-7 + 1e-4 * num.abs().max(gx[i].abs()),
                "cls logit {i}: {num} vs {}",
                gx[i]
            );
        }
        for i in 0..z0.len() {
            let orig = z0[i];
            z0[i] = orig + eps;
            let (fp, _, _) = eval(&x0, &z0);
            z0[i] = orig - eps;
            let (fm, _, _) = eval(&x0, &z0);
            z0[i] = orig;
            let num = (fp - fm) / (2.0 * eps);
            assert!(
                (num - gz[i]).abs() < 1e-7 + 1e-4 * num.abs().max(gz[i].abs()),
                "reg logit {i}: {num} vs {}",
                gz[i]
            );
        }
    }

    /// Chroma checkerboard at constant lightness with one grid-aligned
    /// darkened square (L 60 outside, 36 inside, built in LAB so the drop is
    /// exact): margin classing must split the grid purely by shadow overlap.
    /// Overlap fractions on the stride-16 grid are {0, 0.25, 0.5, 1}; mean-L
    /// ratios land at {1.0, 0.9, 0.8, 0.6} against the 0.75/0.95 margins.
    fn checker_scene() -> (ImagePlane, (usize, usize, usize, usize)) {
        let (h, w) = (96, 96);
        let rect = (32usize, 32usize, 64usize, 64usize);
        let mut rgb = Array3::zeros((h, w, 3));
        for r in 0..h {
            for c in 0..w {
                let tile = ((r / 8) + (c / 8)) % 2;
                let (a, b) = if tile == 0 { (28.0, -18.0) } else { (-24.0, 22.0) };
                let inside = r >= rect.0 && r < rect.2 && c >= rect.1 && c < rect.3;
                let l = if inside { 36.0 } else { 60.0 };
                let px = lab_pixel_to_rgb([l, a, b]);
                for ch in 0..3 {
                    rgb[[r, c, ch]] = px[ch];
                }
            }
        }
        let img = ImagePlane::from_array(rgb, ColorSpace::Rgb).unwrap();
        (img, rect)
    }

    #[test]
    fn lightness_margins_class_checkerboard_grid() {
        let (img, rect) = checker_scene();
        let raster = build_match_raster(&img).unwrap();
        let grid = grid_patches(96, 96, 16).unwrap();
        let net = CpmNet::init(1);
        let inputs: Vec<CpmInput> = grid
            .iter()
            .map(|p| cpm_input_at(&raster, p))
            .collect::<Result<Vec<_>>>()
            .unwrap();
        let feats = net.extract_patch_features(&inputs).unwrap();
        let lab = rgb_to_lab(&img).unwrap();
        let lplane = lab.lightness().unwrap();
        let mean_l: Vec<f64> = grid
            .iter()
            .map(|p| {
                lplane
                    .data()
                    .slice(s![p.row..p.row + PATCH_SIZE, p.col..p.col + PATCH_SIZE])
                    .mean()
                    .unwrap()
            })
            .collect();
        let med = median(lplane.data().iter().copied().collect());
        let classes = class_patches(&net, &feats, &mean_l, med, &PatchClassing::default());

        let query_coords: Vec<(usize, usize)> = classes
            .queries
            .iter()
            .map(|&i| (grid[i].row, grid[i].col))
            .collect();
        assert_eq!(
            query_coords,
            vec![(rect.0, rect.1)],
            "queries must be exactly the fully darkened patches"
        );
        // sources must not overlap the darkened rect at all
        let overlaps = |p: &PatchRef| {
            p.row < rect.2 && p.row + PATCH_SIZE > rect.0 && p.col < rect.3 && p.col + PATCH_SIZE > rect.1
        };
        for &i in &classes.sources {
            let p = &grid[i];
            assert!(!overlaps(p), "source at ({}, {}) overlaps the shadow", p.row, p.col);
        }
        // and every zero-overlap patch must be classed a source
        assert_eq!(
            classes.sources.len(),
            grid.iter().filter(|p| !overlaps(p)).count()
        );
        assert!(!classes.sources.is_empty());
    }

    #[test]
    fn match_inference_is_deterministic_and_counts_phase_one() {
        let (img, _) = checker_scene();
        let unaware = build_unaware_image(&img).unwrap();
        let net = CpmNet::init(5);
        let params = MatchParams::default();
        let (set1, stats) = match_image_instrumented(&net, &img, &unaware, &params).unwrap();
        let (set2, _) = match_image_instrumented(&net, &img, &unaware, &params).unwrap();
        assert_eq!(set1, set2);
        assert_eq!(stats.grid_patches, 25);
        assert_eq!(stats.feature_extractions, 25);
        // JSON round trip
        let json = set1.to_json().unwrap();
        let back = MatchSet::from_json(&json).unwrap();
        assert_eq!(back, set1);
    }

    #[test]
    fn shadow_free_image_yields_empty_matchset() {
        let img = ImagePlane::filled_rgb(64, 64, [0.6, 0.55, 0.5]).unwrap();
        let unaware = build_unaware_image(&img).unwrap();
        let net = CpmNet::init(2);
        let set = match_image(&net, &img, &unaware, &MatchParams::default()).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn grid_covers_trailing_edge() {
        let grid = grid_patches(70, 40, 16).unwrap();
        let max_row = grid.iter().map(|p| p.row).max().unwrap();
        let max_col = grid.iter().map(|p| p.col).max().unwrap();
        assert_eq!(max_row + PATCH_SIZE, 70);
        assert_eq!(max_col + PATCH_SIZE, 40);
        assert!(grid_patches(16, 64, 16).is_err());
    }

    #[test]
    fn prediction_invariants_are_enforced() {
        assert!(CpmPrediction::new([0.5, 0.4, 0.2], 0.5).is_err());
        assert!(CpmPrediction::new([0.5, 0.3, 0.2], 1.5).is_err());
        assert!(CpmPrediction::new([0.5, 0.3, 0.2], 0.5).is_ok());
    }
}
