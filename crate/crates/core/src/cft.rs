//! Contextual feature transfer: Gaussian-weighted sampling of matched
//! non-shadow feature patches, blended top-k by correlation score and written
//! into shadow patch locations of a feature map — at any pyramid scale.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView2};

use crate::cpm::MatchSet;
use crate::nn::{Arr, CustomOp, NodeId, Tape};
use crate::{Error, Result};

/// Transfer configuration. `anchored` switches the Gaussian window from the
/// centered odd-sized kernel to the literal corner-anchored (n+1)x(n+1)
/// variant kept for fidelity experiments.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CftConfig {
    pub k: usize,
    pub n: usize,
    pub sigma: f64,
    pub anchored: bool,
}

impl Default for CftConfig {
    fn default() -> Self {
        CftConfig {
            k: 3,
            n: 5,
            sigma: 1.0,
            anchored: false,
        }
    }
}

impl CftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("transfer count k must be at least 1"));
        }
        if self.n < 1 || self.n % 2 == 0 {
            return Err(Error::config(format!(
                "Gaussian window size must be odd and positive, got {}",
                self.n
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// One feature map with its stride in input pixels per cell.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub features: Array3<f64>,
    pub stride: usize,
}

/// Multi-scale feature stack with strictly increasing strides, each level
/// covering the input extent to within one stride.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<PyramidLevel>, input_height: usize, input_width: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::validation("pyramid needs at least one level"));
        }
        let mut prev_stride = 0;
        for (i, level) in levels.iter().enumerate() {
            if level.stride <= prev_stride {
                return Err(Error::validation(format!(
                    "level {i} stride {} does not increase over {prev_stride}",
                    level.stride
                )));
            }
            prev_stride = level.stride;
            let (h, w, _) = level.features.dim();
            for (cells, extent, name) in [(h, input_height, "height"), (w, input_width, "width")] {
                let covered = cells * level.stride;
                if covered < extent || covered >= extent + level.stride {
                    return Err(Error::validation(format!(
                        "level {i} {name}: {cells} cells at stride {} cover {covered}, \
                         want within one stride of {extent}",
                        level.stride
                    )));
                }
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<PyramidLevel> {
        self.levels
    }
}

/// Unnormalized Gaussian taps as (dy, dx, phi) offsets for one window.
fn window_taps(n: usize, sigma: f64, anchored: bool) -> Vec<(isize, isize, f64)> {
    let mut taps = Vec::new();
    let phi = |dy: f64, dx: f64| (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
    if anchored {
        for dy in 0..=n as isize {
            for dx in 0..=n as isize {
                taps.push((dy, dx, phi(dy as f64, dx as f64)));
            }
        }
    } else {
        let h = (n / 2) as isize;
        for dy in -h..=h {
            for dx in -h..=h {
                taps.push((dy, dx, phi(dy as f64, dx as f64)));
            }
        }
    }
    taps
}

/// Normalized centered Gaussian table, n x n. Weights are positive, sum to 1,
/// and are radially symmetric.
pub fn gaussian_weights(n: usize, sigma: f64) -> Result<Array2<f64>> {
    if n < 1 || n % 2 == 0 {
        return Err(Error::config(format!(
            "Gaussian window size must be odd and positive, got {n}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    let h = (n / 2) as isize;
    let mut out = Array2::zeros((n, n));
    let mut total = 0.0;
    for (dy, dx, phi) in window_taps(n, sigma, false) {
        out[[(dy + h) as usize, (dx + h) as usize]] = phi;
        total += phi;
    }
    out.mapv_inplace(|v| v / total);
    Ok(out)
}

/// In-bounds taps at a center with border clipping and weight renormalization.
fn clipped_taps(
    center: (usize, usize),
    h: usize,
    w: usize,
    cfg: &CftConfig,
) -> Vec<(usize, usize, f64)> {
    let mut kept = Vec::new();
    let mut total = 0.0;
    for (dy, dx, phi) in window_taps(cfg.n, cfg.sigma, cfg.anchored) {
        let r = center.0 as isize + dy;
        let c = center.1 as isize + dx;
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            continue;
        }
        kept.push((r as usize, c as usize, phi));
        total += phi;
    }
    for tap in &mut kept {
        tap.2 /= total;
    }
    kept
}

/// Gaussian-weighted sample of the n x n neighborhood around `center`
/// (row, col); windows clipped at borders are renormalized. Returns the
/// per-channel weighted sum.
pub fn gaussian_sample(
    feat: &Array3<f64>,
    center: (usize, usize),
    n: usize,
    sigma: f64,
) -> Result<Array1<f64>> {
    let cfg = CftConfig {
        k: 1,
        n,
        sigma,
        anchored: false,
    };
    cfg.validate()?;
    sample_cell(&feat.view(), center, &cfg)
}

fn sample_cell(
    feat: &ndarray::ArrayView3<'_, f64>,
    center: (usize, usize),
    cfg: &CftConfig,
) -> Result<Array1<f64>> {
    let (h, w, ch) = feat.dim();
    if center.0 >= h || center.1 >= w {
        return Err(Error::validation(format!(
            "sample center {:?} outside {h}x{w} map",
            center
        )));
    }
    let mut out = Array1::zeros(ch);
    for (r, c, weight) in clipped_taps(center, h, w, cfg) {
        for k in 0..ch {
            out[k] += weight * feat[[r, c, k]];
        }
    }
    Ok(out)
}

/// Convex blend of equally shaped feature patches by non-negative scores.
/// `Ok(None)` signals "no confident match": all scores zero, transfer should
/// be skipped for this patch.
pub fn blend_topk(samples: &[Array3<f64>], scores: &[f64]) -> Result<Option<Array3<f64>>> {
    if samples.is_empty() {
        return Err(Error::validation("blend needs at least one sample"));
    }
    if samples.len() != scores.len() {
        return Err(Error::validation(format!(
            "{} samples but {} scores",
            samples.len(),
            scores.len()
        )));
    }
    let shape = samples[0].dim();
    if samples.iter().any(|s| s.dim() != shape) {
        return Err(Error::Shape("blend samples disagree in shape".into()));
    }
    if scores.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::validation("blend scores must be finite and non-negative"));
    }
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        return Ok(None);
    }
    let mut out = Array3::zeros(shape);
    for (sample, &w) in samples.iter().zip(scores) {
        out.scaled_add(w / total, sample);
    }
    Ok(Some(out))
}

/// Pixel rect -> feature cells: floor for the anchor, ceil for the extent,
/// clamped to the map.
fn rect_cells(
    row: usize,
    col: usize,
    stride: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> (usize, usize, usize, usize) {
    let r0 = (row / stride).min(h - 1);
    let c0 = (col / stride).min(w - 1);
    let extent = patch.div_ceil(stride);
    let rows = extent.min(h - r0);
    let cols = extent.min(w - c0);
    (r0, c0, rows, cols)
}

/// A CFT application compiled to a sparse spatial linear map. Cells not
/// written by any query keep an implicit identity row; written cells are the
/// overlap-count average of their per-query blended Gaussian samples. The
/// same plan drives inference and, through its exact transpose, training.
#[derive(Clone, Debug)]
pub struct CftPlan {
    h: usize,
    w: usize,
    touched: Vec<bool>,
    /// (output cell, input cell, coefficient), flat row-major spatial indices.
    triples: Vec<(u32, u32, f64)>,
}

/// Compile the transfer for one pyramid level geometry.
pub fn plan_cft(
    h: usize,
    w: usize,
    stride: usize,
    set: &MatchSet,
    cfg: &CftConfig,
) -> Result<CftPlan> {
    cfg.validate()?;
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let flat = |r: usize, c: usize| (r * w + c) as u32;
    let mut raw: Vec<(u32, u32, f64)> = Vec::new();
    let mut counts = vec![0u32; h * w];
    for q in &set.queries {
        let take = q.matches.len().min(cfg.k);
        let matches = &q.matches[..take];
        if matches.is_empty() {
            continue;
        }
        let total: f64 = matches.iter().map(|m| m.score).sum();
        if total <= 0.0 {
            // no confident match: transfer skipped for this patch
            continue;
        }
        let (qr0, qc0, qrows, qcols) = rect_cells(q.query.row, q.query.col, stride, h, w, set.patch_size);
        for dr in 0..qrows {
            for dc in 0..qcols {
                let out = flat(qr0 + dr, qc0 + dc);
                counts[out as usize] += 1;
                for m in matches {
                    let (sr0, sc0, _, _) =
                        rect_cells(m.source.row, m.source.col, stride, h, w, set.patch_size);
                    let center = ((sr0 + dr).min(h - 1), (sc0 + dc).min(w - 1));
                    let blend_w = m.score / total;
                    for (r, c, tap_w) in clipped_taps(center, h, w, cfg) {
                        raw.push((out, flat(r, c), blend_w * tap_w));
                    }
                }
            }
        }
    }
    let mut touched = vec![false; h * w];
    let mut triples = Vec::with_capacity(raw.len());
    for (out, inp, coeff) in raw {
        touched[out as usize] = true;
        triples.push((out, inp, coeff / counts[out as usize] as f64));
    }
    Ok(CftPlan {
        h,
        w,
        touched,
        triples,
    })
}

impl CftPlan {
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn is_identity(&self) -> bool {
        self.triples.is_empty()
    }

    /// Forward on one spatial slice.
    pub fn apply_spatial(&self, input: &ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(input.dim(), (self.h, self.w), "plan/feature size mismatch");
        let mut out = input.to_owned();
        for (idx, t) in self.touched.iter().enumerate() {
            if *t {
                out[[idx / self.w, idx % self.w]] = 0.0;
            }
        }
        for &(o, i, coeff) in &self.triples {
            let (or, oc) = ((o as usize) / self.w, (o as usize) % self.w);
            let (ir, ic) = ((i as usize) / self.w, (i as usize) % self.w);
            out[[or, oc]] += coeff * input[[ir, ic]];
        }
        out
    }

    /// Exact adjoint of [`Self::apply_spatial`].
    pub fn transpose_spatial(&self, out_grad: &ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(out_grad.dim(), (self.h, self.w), "plan/gradient size mismatch");
        let mut g = out_grad.to_owned();
        for (idx, t) in self.touched.iter().enumerate() {
            if *t {
                g[[idx / self.w, idx % self.w]] = 0.0;
            }
        }
        for &(o, i, coeff) in &self.triples {
            let (or, oc) = ((o as usize) / self.w, (o as usize) % self.w);
            let (ir, ic) = ((i as usize) / self.w, (i as usize) % self.w);
            g[[ir, ic]] += coeff * out_grad[[or, oc]];
        }
        g
    }

    /// Forward over an `(H, W, C)` feature map, channelwise.
    pub fn apply_hwc(&self, feat: &Array3<f64>) -> Array3<f64> {
        let (h, w, ch) = feat.dim();
        assert_eq!((h, w), (self.h, self.w));
        let mut out = Array3::zeros((h, w, ch));
        for k in 0..ch {
            let slice = feat.slice(ndarray::s![.., .., k]);
            out.slice_mut(ndarray::s![.., .., k])
                .assign(&self.apply_spatial(&slice));
        }
        out
    }

    /// Forward over an `(B, C, H, W)` activation, per batch and channel.
    pub fn apply_nchw(&self, x: &Arr) -> Arr {
        let v = x
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("4-d activation");
        let (b, c, h, w) = v.dim();
        assert_eq!((h, w), (self.h, self.w));
        let mut out = ndarray::Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let slice = v.slice(ndarray::s![bi, ci, .., ..]);
                out.slice_mut(ndarray::s![bi, ci, .., ..])
                    .assign(&self.apply_spatial(&slice));
            }
        }
        out.into_dyn()
    }

    /// Adjoint over an `(B, C, H, W)` gradient.
    pub fn transpose_nchw(&self, g: &Arr) -> Arr {
        let v = g
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("4-d gradient");
        let (b, c, h, w) = v.dim();
        assert_eq!((h, w), (self.h, self.w));
        let mut out = ndarray::Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let slice = v.slice(ndarray::s![bi, ci, .., ..]);
                out.slice_mut(ndarray::s![bi, ci, .., ..])
                    .assign(&self.transpose_spatial(&slice));
            }
        }
        out.into_dyn()
    }
}

/// Transfer features into shadow patch locations of one pyramid level.
/// Out-of-place; the input level is never mutated, so matched sources are
/// always read from pre-transfer features. An empty MatchSet returns the
/// level unchanged.
pub fn apply_cft(level: &PyramidLevel, set: &MatchSet, cfg: &CftConfig) -> Result<Array3<f64>> {
    let (h, w, _) = level.features.dim();
    let plan = plan_cft(h, w, level.stride, set, cfg)?;
    Ok(plan.apply_hwc(&level.features))
}

/// Naive triple-loop oracle for [`apply_cft`], deliberately sharing no
/// bookkeeping with the plan compiler. Kept public so integration suites can
/// cross-check the production path.
pub fn apply_cft_reference(
    level: &PyramidLevel,
    set: &MatchSet,
    cfg: &CftConfig,
) -> Result<Array3<f64>> {
    cfg.validate()?;
    let (h, w, ch) = level.features.dim();
    let stride = level.stride;
    let mut sums = Array3::<f64>::zeros((h, w, ch));
    let mut counts = Array2::<f64>::zeros((h, w));
    for q in &set.queries {
        let take = q.matches.len().min(cfg.k);
        let matches = &q.matches[..take];
        if matches.is_empty() {
            continue;
        }
        let scores: Vec<f64> = matches.iter().map(|m| m.score).collect();
        if scores.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let (qr0, qc0, qrows, qcols) = rect_cells(q.query.row, q.query.col, stride, h, w, set.patch_size);
        // sample each source rect cellwise, then blend whole patches
        let mut patches: Vec<Array3<f64>> = Vec::with_capacity(matches.len());
        for m in matches {
            let (sr0, sc0, _, _) = rect_cells(m.source.row, m.source.col, stride, h, w, set.patch_size);
            let mut patch = Array3::zeros((qrows, qcols, ch));
            for dr in 0..qrows {
                for dc in 0..qcols {
                    let center = ((sr0 + dr).min(h - 1), (sc0 + dc).min(w - 1));
                    let v = sample_cell(&level.features.view(), center, cfg)?;
                    for k in 0..ch {
                        patch[[dr, dc, k]] = v[k];
                    }
                }
            }
            patches.push(patch);
        }
        let Some(blended) = blend_topk(&patches, &scores)? else {
            continue;
        };
        for dr in 0..qrows {
            for dc in 0..qcols {
                for k in 0..ch {
                    sums[[qr0 + dr, qc0 + dc, k]] += blended[[dr, dc, k]];
                }
                counts[[qr0 + dr, qc0 + dc]] += 1.0;
            }
        }
    }
    let mut out = level.features.clone();
    for r in 0..h {
        for c in 0..w {
            if counts[[r, c]] > 0.0 {
                for k in 0..ch {
                    out[[r, c, k]] = sums[[r, c, k]] / counts[[r, c]];
                }
            }
        }
    }
    Ok(out)
}

/// Record a CFT application on the tape; gradients flow through the plan's
/// exact transpose.
pub fn cft_node(tape: &mut Tape, x: NodeId, plan: Arc<CftPlan>) -> NodeId {
    let value = plan.apply_nchw(tape.value(x));
    tape.custom(vec![x], value, Box::new(CftTapeOp { plan }))
}

struct CftTapeOp {
    plan: Arc<CftPlan>,
}

impl CustomOp for CftTapeOp {
    fn backward(&self, _inputs: &[&Arr], _out_value: &Arr, out_grad: &Arr) -> Vec<Arr> {
        vec![self.plan.transpose_nchw(out_grad)]
    }
}
