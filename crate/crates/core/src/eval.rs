//! Region-aware error metrics in LAB space, evaluation over image sets, and
//! the machine-readable report those runs emit.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::dataset::{load_mask, SampleRecord};
use crate::imaging::{load_image, rgb_to_lab, ColorSpace, ImagePlane};
use crate::net::CanetPipeline;
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Pixel-difference statistic, always computed on LAB values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmse,
    Mae,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Rmse => "rmse",
            Metric::Mae => "mae",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmse" => Ok(Metric::Rmse),
            "mae" => Ok(Metric::Mae),
            other => Err(Error::Eval(format!(
                "unknown metric {other:?} (expected rmse or mae)"
            ))),
        }
    }
}

/// Error split by mask region. A region with no pixels is reported as
/// absent, not as zero.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RegionRmse {
    pub shadow: Option<f64>,
    pub non_shadow: Option<f64>,
    pub all: f64,
    pub n_shadow: usize,
    pub n_non_shadow: usize,
    pub n_all: usize,
}

fn to_lab(img: &ImagePlane) -> Result<ImagePlane> {
    match img.colorspace() {
        ColorSpace::Lab => Ok(img.clone()),
        ColorSpace::Rgb => rgb_to_lab(img),
    }
}

/// Per-region error between two images, in LAB, over a shadow mask. Each
/// region's value averages over pixels-times-channels, so a region of n
/// pixels divides by 3n.
pub fn region_error_lab(
    pred: &ImagePlane,
    gt: &ImagePlane,
    mask: &Array2<bool>,
    metric: Metric,
) -> Result<RegionRmse> {
    let (h, w) = (gt.height(), gt.width());
    if (pred.height(), pred.width()) != (h, w) {
        return Err(Error::shape(format!(
            "prediction is {}x{} but ground truth is {h}x{w}",
            pred.height(),
            pred.width()
        )));
    }
    if mask.dim() != (h, w) {
        return Err(Error::shape(format!(
            "mask is {}x{} but images are {h}x{w}",
            mask.dim().0,
            mask.dim().1
        )));
    }
    let p = to_lab(pred)?;
    let g = to_lab(gt)?;
    let pd = p.data();
    let gd = g.data();
    let mut acc = [0.0f64; 2]; // shadow, non-shadow
    let mut count = [0usize; 2];
    for r in 0..h {
        for c in 0..w {
            let region = usize::from(!mask[[r, c]]);
            count[region] += 1;
            for ch in 0..3 {
                let d = pd[[r, c, ch]] - gd[[r, c, ch]];
                acc[region] += match metric {
                    Metric::Rmse => d * d,
                    Metric::Mae => d.abs(),
                };
            }
        }
    }
    let finish = |sum: f64, n: usize| {
        if n == 0 {
            return None;
        }
        let mean = sum / (3 * n) as f64;
        Some(match metric {
            Metric::Rmse => mean.sqrt(),
            Metric::Mae => mean,
        })
    };
    let n_all = count[0] + count[1];
    let all = finish(acc[0] + acc[1], n_all)
        .ok_or_else(|| Error::Eval("cannot evaluate an empty image".into()))?;
    Ok(RegionRmse {
        shadow: finish(acc[0], count[0]),
        non_shadow: finish(acc[1], count[1]),
        all,
        n_shadow: count[0],
        n_non_shadow: count[1],
        n_all,
    })
}

/// Region RMSE in LAB (the headline removal metric).
pub fn rmse_lab(pred: &ImagePlane, gt: &ImagePlane, mask: &Array2<bool>) -> Result<RegionRmse> {
    region_error_lab(pred, gt, mask, Metric::Rmse)
}

/// Mean |shadow − shadow-free| per LAB channel over the masked region, or
/// `None` when the mask selects nothing.
pub fn channel_gaps_for(
    shadow: &ImagePlane,
    gt: &ImagePlane,
    mask: &Array2<bool>,
) -> Result<Option<[f64; 3]>> {
    let (h, w) = (gt.height(), gt.width());
    if (shadow.height(), shadow.width()) != (h, w) || mask.dim() != (h, w) {
        return Err(Error::shape("channel gap inputs disagree on size"));
    }
    let s = to_lab(shadow)?;
    let g = to_lab(gt)?;
    let sd = s.data();
    let gd = g.data();
    let mut sums = [0.0f64; 3];
    let mut n = 0usize;
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] {
                n += 1;
                for ch in 0..3 {
                    sums[ch] += (sd[[r, c, ch]] - gd[[r, c, ch]]).abs();
                }
            }
        }
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(sums.map(|x| x / n as f64)))
}

/// Aggregated per-channel shadow/shadow-free gaps over a record set.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ChannelGapStats {
    pub l: f64,
    pub a: f64,
    pub b: f64,
    pub images_used: usize,
    pub images_skipped: usize,
}

pub fn channel_gap_stats(records: &[SampleRecord]) -> Result<ChannelGapStats> {
    let mut sums = [0.0f64; 3];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for rec in records {
        let shadow = load_image(&rec.shadow_img_path)?;
        let gt = load_image(&rec.shadowfree_img_path)?;
        let mask = load_mask(&rec.mask_path)?;
        match channel_gaps_for(&shadow, &gt, &mask)? {
            Some(g) => {
                for ch in 0..3 {
                    sums[ch] += g[ch];
                }
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::Eval(
            "no image in the set has any shadow pixels".into(),
        ));
    }
    let n = used as f64;
    Ok(ChannelGapStats {
        l: sums[0] / n,
        a: sums[1] / n,
        b: sums[2] / n,
        images_used: used,
        images_skipped: skipped,
    })
}

/// One evaluation input, fully loaded.
pub struct EvalItem {
    pub name: String,
    pub shadow: ImagePlane,
    pub gt: ImagePlane,
    pub mask: Array2<bool>,
}

pub fn load_eval_items(records: &[SampleRecord]) -> Result<Vec<EvalItem>> {
    records
        .iter()
        .map(|rec| {
            let name = rec
                .shadow_img_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| rec.shadow_img_path.display().to_string());
            Ok(EvalItem {
                name,
                shadow: load_image(&rec.shadow_img_path)?,
                gt: load_image(&rec.shadowfree_img_path)?,
                mask: load_mask(&rec.mask_path)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageEval {
    pub name: String,
    pub regions: RegionRmse,
}

/// Mean of each region over the images where that region exists.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RegionSummary {
    pub shadow: Option<f64>,
    pub non_shadow: Option<f64>,
    pub all: f64,
}

/// The machine-readable result of one evaluation run; serializes to the
/// JSON shape described by [`REPORT_SCHEMA`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub variant: String,
    pub metric: Metric,
    pub n_images: usize,
    pub images: Vec<ImageEval>,
    pub aggregate: RegionSummary,
}

fn aggregate(images: &[ImageEval]) -> RegionSummary {
    let mean_of = |f: &dyn Fn(&RegionRmse) -> Option<f64>| {
        let vals: Vec<f64> = images.iter().filter_map(|i| f(&i.regions)).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    RegionSummary {
        shadow: mean_of(&|r| r.shadow),
        non_shadow: mean_of(&|r| r.non_shadow),
        all: mean_of(&|r| Some(r.all)).unwrap_or(f64::NAN),
    }
}

/// Score any removal function over a set of items.
pub fn evaluate_with(
    mut remove: impl FnMut(&ImagePlane) -> Result<ImagePlane>,
    items: &[EvalItem],
    metric: Metric,
    variant_name: &str,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Eval("nothing to evaluate".into()));
    }
    let mut images = Vec::with_capacity(items.len());
    for item in items {
        let pred = remove(&item.shadow)?;
        let regions = region_error_lab(&pred, &item.gt, &item.mask, metric)?;
        images.push(ImageEval {
            name: item.name.clone(),
            regions,
        });
    }
    let aggregate = aggregate(&images);
    Ok(EvalReport {
        schema_version: 1,
        variant: variant_name.to_string(),
        metric,
        n_images: images.len(),
        images,
        aggregate,
    })
}

/// Score a trained checkpoint. The checkpoint's config hash must match
/// `config`, which pins the variant and architecture to the training run.
pub fn evaluate(
    ckpt: &Checkpoint,
    config: &TrainConfig,
    items: &[EvalItem],
    metric: Metric,
) -> Result<EvalReport> {
    checkpoint::verify_config_hash(ckpt, config)?;
    let mut pipeline = CanetPipeline::init(config.to_pipeline_config(), config.seed)?;
    pipeline.import_store(&ckpt.weights)?;
    evaluate_with(
        |shadow| Ok(pipeline.remove_shadow(shadow)?.final_rgb),
        items,
        metric,
        config.variant.name(),
    )
}

/// Fixed-width text table over a report: one row per image, columns for the
/// shadow / non-shadow / whole-image regions, then the aggregate row.
pub fn render_table(report: &EvalReport) -> String {
    let name_w = report
        .images
        .iter()
        .map(|i| i.name.len())
        .chain(["image".len(), "mean".len()])
        .max()
        .unwrap_or(5);
    let cell = |v: Option<f64>| match v {
        Some(x) => format!("{x:>10.4}"),
        None => format!("{:>10}", "-"),
    };
    let mut out = String::new();
    let metric = report.metric.to_string().to_uppercase();
    out.push_str(&format!(
        "{:<name_w$}  {:>10} {:>10} {:>10}   ({metric}, variant {})\n",
        "image", "shadow", "nonshadow", "all", report.variant
    ));
    for img in &report.images {
        out.push_str(&format!(
            "{:<name_w$}  {} {} {}\n",
            img.name,
            cell(img.regions.shadow),
            cell(img.regions.non_shadow),
            cell(Some(img.regions.all)),
        ));
    }
    out.push_str(&format!(
        "{:<name_w$}  {} {} {}\n",
        "mean",
        cell(report.aggregate.shadow),
        cell(report.aggregate.non_shadow),
        cell(Some(report.aggregate.all)),
    ));
    out
}

/// JSON Schema (draft-07 subset) for the serialized [`EvalReport`].
pub const REPORT_SCHEMA: &str = r##"{
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "shadow removal evaluation report",
  "type": "object",
  "required": ["schema_version", "variant", "metric", "n_images", "images", "aggregate"],
  "properties": {
    "schema_version": {"type": "integer", "enum": [1]},
    "variant": {"type": "string"},
    "metric": {"type": "string", "enum": ["rmse", "mae"]},
    "n_images": {"type": "integer"},
    "images": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["name", "regions"],
        "properties": {
          "name": {"type": "string"},
          "regions": {
            "type": "object",
            "required": ["shadow", "non_shadow", "all", "n_shadow", "n_non_shadow", "n_all"],
            "properties": {
              "shadow": {"type": ["number", "null"]},
              "non_shadow": {"type": ["number", "null"]},
              "all": {"type": "number"},
              "n_shadow": {"type": "integer"},
              "n_non_shadow": {"type": "integer"},
              "n_all": {"type": "integer"}
            }
          }
        }
      }
    },
    "aggregate": {
      "type": "object",
      "required": ["shadow", "non_shadow", "all"],
      "properties": {
        "shadow": {"type": ["number", "null"]},
        "non_shadow": {"type": ["number", "null"]},
        "all": {"type": "number"}
      }
    }
  }
}"##;

fn type_matches(value: &serde_json::Value, ty: &str) -> bool {
    use serde_json::Value;
    match ty {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "number" => value.is_number(),
        "integer" => matches!(value, Value::Number(n) if n.is_i64() || n.is_u64()),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        _ => false,
    }
}

fn check_schema(value: &serde_json::Value, schema: &serde_json::Value, at: &str) -> Result<()> {
    let fail = |msg: String| Err(Error::Eval(format!("report schema violation at {at}: {msg}")));
    if let Some(ty) = schema.get("type") {
        let allowed: Vec<String> = match ty {
            serde_json::Value::String(s) => vec![s.clone()],
            serde_json::Value::Array(items) => items
                .iter()
                .filter_map(|v| v.as_str().map(String::from))
                .collect(),
            _ => vec![],
        };
        if !allowed.iter().any(|t| type_matches(value, t)) {
            return fail(format!("expected type {allowed:?}"));
        }
    }
    if let Some(options) = schema.get("enum").and_then(|e| e.as_array()) {
        if !options.contains(value) {
            return fail(format!("value {value} not in {options:?}"));
        }
    }
    if let Some(required) = schema.get("required").and_then(|r| r.as_array()) {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Eval(format!("report schema violation at {at}: not an object")))?;
        for key in required.iter().filter_map(|k| k.as_str()) {
            if !obj.contains_key(key) {
                return fail(format!("missing required key {key:?}"));
            }
        }
    }
    if let Some(props) = schema.get("properties").and_then(|p| p.as_object()) {
        if let Some(obj) = value.as_object() {
            for (key, sub) in props {
                if let Some(v) = obj.get(key) {
                    check_schema(v, sub, &format!("{at}.{key}"))?;
                }
            }
        }
    }
    if let Some(items) = schema.get("items") {
        if let Some(arr) = value.as_array() {
            for (i, v) in arr.iter().enumerate() {
                check_schema(v, items, &format!("{at}[{i}]"))?;
            }
        }
    }
    Ok(())
}

/// Validate a serialized report against [`REPORT_SCHEMA`].
pub fn validate_report(report: &serde_json::Value) -> Result<()> {
    let schema: serde_json::Value =
        serde_json::from_str(REPORT_SCHEMA).expect("bundled schema parses");
    check_schema(report, &schema, "$")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::lab_pixel_to_rgb;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_rgb(h: usize, w: usize, px: [f64; 3]) -> ImagePlane {
        ImagePlane::filled_rgb(h, w, px).unwrap()
    }

    fn random_rgb(h: usize, w: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0));
        ImagePlane::from_array(data, ColorSpace::Rgb).unwrap()
    }

    #[test]
    fn identical_images_score_zero_for_both_metrics() {
        let img = random_rgb(8, 8, 1);
        let mask = Array2::from_shape_fn((8, 8), |(r, _)| r < 4);
        for metric in [Metric::Rmse, Metric::Mae] {
            let e = region_error_lab(&img, &img, &mask, metric).unwrap();
            assert_eq!(e.all, 0.0);
            assert_eq!(e.shadow, Some(0.0));
            assert_eq!(e.non_shadow, Some(0.0));
        }
        // symmetric in its arguments
        let other = random_rgb(8, 8, 2);
        let ab = rmse_lab(&img, &other, &mask).unwrap();
        let ba = rmse_lab(&other, &img, &mask).unwrap();
        assert!((ab.all - ba.all).abs() < 1e-12);
    }

    #[test]
    fn known_lab_offset_gives_exact_rmse() {
        // one pixel, LAB difference (3, 4, 0): rmse = sqrt(25/3)
        let gt_lab = [55.0, 10.0, -5.0];
        let pred_lab = [58.0, 14.0, -5.0];
        let lab_plane = |px: [f64; 3]| {
            let mut data = Array3::zeros((1, 1, 3));
            for ch in 0..3 {
                data[[0, 0, ch]] = px[ch];
            }
            ImagePlane::from_array(data, ColorSpace::Lab).unwrap()
        };
        let mask = Array2::from_elem((1, 1), true);
        let expected = (25.0f64 / 3.0).sqrt();

        // native LAB inputs: exact to machine precision
        let e = rmse_lab(&lab_plane(pred_lab), &lab_plane(gt_lab), &mask).unwrap();
        assert!((e.all - expected).abs() < 1e-12, "{} vs {expected}", e.all);
        assert_eq!(e.shadow, Some(e.all));
        assert_eq!(e.non_shadow, None);
        assert_eq!(e.n_non_shadow, 0);
        let m = region_error_lab(&lab_plane(pred_lab), &lab_plane(gt_lab), &mask, Metric::Mae)
            .unwrap();
        assert!((m.all - 7.0 / 3.0).abs() < 1e-12, "{}", m.all);

        // through the sRGB roundtrip the colorspace constants cost ~1e-6
        let gt = uniform_rgb(1, 1, lab_pixel_to_rgb(gt_lab));
        let pred = uniform_rgb(1, 1, lab_pixel_to_rgb(pred_lab));
        let e = rmse_lab(&pred, &gt, &mask).unwrap();
        assert!((e.all - expected).abs() < 1e-6, "{} vs {expected}", e.all);
    }

    #[test]
    fn regions_decompose_the_whole_image_error() {
        let pred = random_rgb(16, 12, 3);
        let gt = random_rgb(16, 12, 4);
        let mask = Array2::from_shape_fn((16, 12), |(r, c)| (r + c) % 3 == 0);
        let e = rmse_lab(&pred, &gt, &mask).unwrap();
        let (s, n) = (e.shadow.unwrap(), e.non_shadow.unwrap());
        let lhs = e.n_all as f64 * e.all * e.all;
        let rhs = e.n_shadow as f64 * s * s + e.n_non_shadow as f64 * n * n;
        assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
        assert_eq!(e.n_all, e.n_shadow + e.n_non_shadow);
    }

    #[test]
    fn size_and_mask_mismatches_are_rejected() {
        let a = random_rgb(8, 8, 5);
        let b = random_rgb(8, 9, 6);
        let mask = Array2::from_elem((8, 8), true);
        assert!(rmse_lab(&a, &b, &mask).is_err());
        let small = Array2::from_elem((4, 8), true);
        assert!(rmse_lab(&a, &a, &small).is_err());
    }

    #[test]
    fn channel_gaps_isolate_the_lightness_channel() {
        let img = random_rgb(8, 8, 7);
        let mask = Array2::from_elem((8, 8), true);
        let zero = channel_gaps_for(&img, &img, &mask).unwrap().unwrap();
        assert_eq!(zero, [0.0, 0.0, 0.0]);

        // shadow = gt with L halved, built directly in LAB so the gap is exact
        let mut gt_lab = Array3::zeros((8, 8, 3));
        for r in 0..8 {
            for c in 0..8 {
                gt_lab[[r, c, 0]] = 60.0 + (r as f64);
                gt_lab[[r, c, 1]] = 5.0;
                gt_lab[[r, c, 2]] = -3.0;
            }
        }
        let mut sh_lab = gt_lab.clone();
        sh_lab.slice_mut(ndarray::s![.., .., 0]).mapv_inplace(|l| l * 0.5);
        let gt = ImagePlane::from_array(gt_lab, ColorSpace::Lab).unwrap();
        let sh = ImagePlane::from_array(sh_lab, ColorSpace::Lab).unwrap();
        let g = channel_gaps_for(&sh, &gt, &mask).unwrap().unwrap();
        assert!(g[0] > 25.0, "L gap {}", g[0]);
        assert!(g[1].abs() < 1e-9 && g[2].abs() < 1e-9);

        // empty mask -> absent, not zero
        let none = channel_gaps_for(&sh, &gt, &Array2::from_elem((8, 8), false)).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn evaluate_with_matches_hand_computation() {
        let shadow = random_rgb(8, 8, 8);
        let gt = random_rgb(8, 8, 9);
        let mask = Array2::from_shape_fn((8, 8), |(r, _)| r % 2 == 0);
        let items = vec![
            EvalItem {
                name: "a".into(),
                shadow: shadow.clone(),
                gt: gt.clone(),
                mask: mask.clone(),
            },
            EvalItem {
                name: "b".into(),
                shadow: gt.clone(),
                gt: gt.clone(),
                mask: mask.clone(),
            },
        ];
        // identity "model": prediction = input
        let report = evaluate_with(|s| Ok(s.clone()), &items, Metric::Rmse, "full").unwrap();
        assert_eq!(report.n_images, 2);
        let direct = rmse_lab(&shadow, &gt, &mask).unwrap();
        assert!((report.images[0].regions.all - direct.all).abs() < 1e-12);
        assert_eq!(report.images[1].regions.all, 0.0);
        let expect_mean = (direct.all + 0.0) / 2.0;
        assert!((report.aggregate.all - expect_mean).abs() < 1e-12);
    }

    #[test]
    fn reports_serialize_to_the_bundled_schema() {
        let gt = random_rgb(6, 6, 10);
        let items = vec![EvalItem {
            name: "x".into(),
            shadow: random_rgb(6, 6, 11),
            gt,
            mask: Array2::from_elem((6, 6), true),
        }];
        let report = evaluate_with(|s| Ok(s.clone()), &items, Metric::Mae, "no_cft").unwrap();
        let json = serde_json::to_value(&report).unwrap();
        validate_report(&json).unwrap();

        // non-shadow region absent on an all-shadow mask -> null survives
        assert!(json["images"][0]["regions"]["non_shadow"].is_null());

        // corrupting the metric or dropping a required key must fail
        let mut bad = json.clone();
        bad["metric"] = serde_json::json!("psnr");
        assert!(validate_report(&bad).is_err());
        let mut bad = json.clone();
        bad.as_object_mut().unwrap().remove("aggregate");
        assert!(validate_report(&bad).is_err());
        let mut bad = json;
        bad["images"][0]["regions"]["all"] = serde_json::json!("high");
        assert!(validate_report(&bad).is_err());
    }

    #[test]
    fn table_renders_absent_regions_as_dashes() {
        let gt = random_rgb(4, 4, 12);
        let items = vec![EvalItem {
            name: "img001".into(),
            shadow: random_rgb(4, 4, 13),
            gt,
            mask: Array2::from_elem((4, 4), true),
        }];
        let report = evaluate_with(|s| Ok(s.clone()), &items, Metric::Rmse, "full").unwrap();
        let table = render_table(&report);
        assert!(table.contains("img001"));
        assert!(table.contains("mean"));
        assert!(table.contains('-'), "absent non-shadow column should be a dash:\n{table}");
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn evaluate_refuses_a_checkpoint_from_another_config() {
        use crate::training::CanetTrainer;
        let mut cfg = TrainConfig::desk_profile();
        cfg.variant = crate::net::AblationVariant::DenseUnetOnly;
        cfg.epochs_canet = 1;
        let sh = random_rgb(64, 64, 14);
        let gt = random_rgb(64, 64, 15);
        let trainer = CanetTrainer::new(&cfg, vec![(sh.clone(), gt.clone())], None).unwrap();
        let ckpt = trainer.checkpoint().unwrap();

        let items = vec![EvalItem {
            name: "p".into(),
            shadow: sh,
            gt,
            mask: Array2::from_elem((64, 64), true),
        }];
        // matching config works
        let report = evaluate(&ckpt, &cfg, &items, Metric::Rmse).unwrap();
        assert!(report.aggregate.all.is_finite());
        assert_eq!(report.variant, "dense_unet_only");
        // any config drift is refused
        let mut other = cfg.clone();
        other.lr *= 2.0;
        assert!(matches!(
            evaluate(&ckpt, &other, &items, Metric::Rmse),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn metric_names_round_trip() {
        assert_eq!(Metric::from_str("rmse").unwrap(), Metric::Rmse);
        assert_eq!(Metric::from_str("mae").unwrap(), Metric::Mae);
        assert!(Metric::from_str("psnr").is_err());
        assert_eq!(Metric::Rmse.to_string(), "rmse");
        let j = serde_json::to_string(&Metric::Mae).unwrap();
        assert_eq!(j, "\"mae\"");
    }
}
