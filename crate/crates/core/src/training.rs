//! Optimization loops for the matcher and the removal pipeline, plus the
//! configuration, logging, and reproducibility plumbing they share. Every
//! stochastic draw flows from one seed through named sub-streams, so a run
//! is a pure function of (config, data).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cft::CftConfig;
use crate::checkpoint::{self, AdamSnapshot, Checkpoint};
use crate::cpm::{
    batch_to_nchw, build_match_raster, cpm_input_at, cpm_training_loss, CpmInput, CpmNet,
    MatchParams, MatchSet,
};
use crate::dataset::{Corpus, PairLabel};
use crate::eval;
use crate::imaging::{load_image, ColorSpace, ImagePlane};
use crate::net::{
    AblationVariant, BackboneConfig, CanetPipeline, LossOptions, LossWeights, Matcher,
    PerceptualSource, PipelineConfig, TrainSample,
};
use crate::nn::{softmax_rows, Adam, Arr, Tape, TapeVars, VarStore};
use crate::{Error, Result};

/// A step whose |loss| crosses this is treated as divergence, not progress.
const DIVERGENCE_LIMIT: f64 = 1e15;

/// Everything a training run needs, loadable from TOML or JSON and
/// overridable from the command line by dotted keys.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Mini-batch of image pairs per removal-network step.
    pub batch_size: usize,
    /// Mini-batch of patch pairs per matcher step.
    pub cpm_batch_size: usize,
    pub epochs_cpm: usize,
    pub epochs_canet: usize,
    pub input_size: (usize, usize),
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub loss: LossOptions,
    pub cft: CftConfig,
    pub variant: AblationVariant,
    pub backbone: BackboneConfig,
    pub stage2_widths: Vec<usize>,
    pub cft_levels: Vec<usize>,
    pub match_params: MatchParams,
    pub perceptual: PerceptualSource,
    pub checkpoint_dir: PathBuf,
    pub dataset_root: PathBuf,
    /// Every k-th corpus example is held out of matcher training.
    pub held_out_every: usize,
    /// Log validation RMSE every this many epochs (0 = final only).
    pub validate_every_epochs: usize,
    /// Square the matcher's regression residual instead of taking |.|.
    pub squared_reg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            betas: (0.9, 0.999),
            weight_decay: 5e-4,
            batch_size: 2,
            cpm_batch_size: 16,
            epochs_cpm: 30,
            epochs_canet: 50,
            input_size: (400, 400),
            seed: 0,
            loss_weights: LossWeights::default(),
            loss: LossOptions::default(),
            cft: CftConfig::default(),
            variant: AblationVariant::Full,
            backbone: BackboneConfig::default(),
            stage2_widths: vec![16, 24, 32],
            cft_levels: vec![1, 2],
            match_params: MatchParams::default(),
            perceptual: PerceptualSource::RandomConv,
            checkpoint_dir: PathBuf::from("checkpoints"),
            dataset_root: PathBuf::from("data"),
            held_out_every: 8,
            validate_every_epochs: 1,
            squared_reg: false,
        }
    }
}

impl TrainConfig {
    /// Small-everything profile sized so train_cpm + train_canet complete in
    /// minutes on one CPU core.
    pub fn desk_profile() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            cpm_batch_size: 8,
            epochs_cpm: 12,
            epochs_canet: 25,
            input_size: (64, 64),
            backbone: BackboneConfig {
                widths: vec![8, 12, 16],
                ..BackboneConfig::default()
            },
            stage2_widths: vec![8, 12],
            validate_every_epochs: 0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("betas.0", self.betas.0),
            ("betas.1", self.betas.1),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.lr == 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if self.betas.0 >= 1.0 || self.betas.1 >= 1.0 {
            return Err(Error::config("betas must be < 1"));
        }
        if self.batch_size == 0 || self.cpm_batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.held_out_every < 2 {
            return Err(Error::config("held_out_every must be at least 2"));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::config("input_size must be positive"));
        }
        self.to_pipeline_config().validate()
    }

    /// The architecture/routing slice of this config.
    pub fn to_pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            backbone: self.backbone.clone(),
            cft: self.cft,
            cft_levels: self.cft_levels.clone(),
            per_branch_cft: false,
            stage2_widths: self.stage2_widths.clone(),
            variant: self.variant,
            loss: self.loss,
            loss_weights: self.loss_weights,
            match_params: self.match_params,
            perceptual: self.perceptual.clone(),
        }
    }
}

/// Load a config from a `.toml` or `.json` file, picked by extension.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
        Some("json") => serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
        other => {
            return Err(Error::config(format!(
                "config {} must end in .toml or .json (got {:?})",
                path.display(),
                other
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Apply `key.path=value` overrides. Paths are dotted field names (numeric
/// segments index into tuples/arrays); values parse as JSON, falling back to
/// a bare string.
pub fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> Result<()> {
    if overrides.is_empty() {
        return Ok(());
    }
    let mut root = serde_json::to_value(&*cfg)?;
    for entry in overrides {
        let Some((path, raw)) = entry.split_once('=') else {
            return Err(Error::config(format!(
                "override {entry:?} must look like key.path=value"
            )));
        };
        let value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut slot = &mut root;
        for seg in path.split('.') {
            slot = match slot {
                serde_json::Value::Object(map) => map
                    .get_mut(seg)
                    .ok_or_else(|| Error::config(format!("unknown config key {path:?} (at {seg:?})")))?,
                serde_json::Value::Array(items) => {
                    let idx: usize = seg.parse().map_err(|_| {
                        Error::config(format!("{seg:?} in {path:?} is not an array index"))
                    })?;
                    items.get_mut(idx).ok_or_else(|| {
                        Error::config(format!("index {idx} out of range in {path:?}"))
                    })?
                }
                _ => {
                    return Err(Error::config(format!(
                        "{path:?} descends into a scalar at {seg:?}"
                    )))
                }
            };
        }
        *slot = value;
    }
    *cfg = serde_json::from_value(root)
        .map_err(|e| Error::config(format!("override produced an invalid config: {e}")))?;
    cfg.validate()
}

/// One seed, many independent named randomness streams.
#[derive(Clone, Copy, Debug)]
pub struct DeterminismContext {
    seed: u64,
}

/// Install the run seed. Every stochastic draw (init, shuffling, sampling)
/// must come from `rng(component)` of the returned context; nothing in the
/// crate touches ambient randomness.
pub fn set_global_determinism(seed: u64) -> DeterminismContext {
    DeterminismContext { seed }
}

impl DeterminismContext {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A generator unique to (seed, component), stable across runs.
    pub fn rng(&self, component: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(component.as_bytes());
        let digest = h.finalize();
        let mut first = [0u8; 8];
        first.copy_from_slice(&digest[..8]);
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(first))
    }
}

/// Append-only JSON-lines sink; a disabled logger swallows records.
pub struct TrainLogger {
    out: Option<std::io::BufWriter<std::fs::File>>,
}

impl TrainLogger {
    pub fn disabled() -> Self {
        TrainLogger { out: None }
    }

    pub fn append(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(TrainLogger {
            out: Some(std::io::BufWriter::new(file)),
        })
    }

    pub fn log<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(w) = &mut self.out {
            let line = serde_json::to_string(record)?;
            writeln!(w, "{line}").map_err(|e| Error::Training(format!("log write failed: {e}")))?;
            w.flush().map_err(|e| Error::Training(format!("log flush failed: {e}")))?;
        }
        Ok(())
    }
}

/// One materialized matcher example: both patch tensors plus the label.
#[derive(Clone)]
pub struct CpmExample {
    pub first: CpmInput,
    pub second: CpmInput,
    pub label: PairLabel,
}

/// Load every image a corpus references and slice its pairs into tensors.
/// Same-coordinate pairs read (shadow, shadow-free); all others read both
/// patches from the shadow image. Relative paths resolve against `base`.
pub fn materialize_corpus(corpus: &Corpus, base: &Path) -> Result<Vec<CpmExample>> {
    let resolve = |p: &str| {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let mut rasters: BTreeMap<u32, (ndarray::Array3<f64>, ndarray::Array3<f64>)> = BTreeMap::new();
    let mut out = Vec::with_capacity(corpus.pairs.len());
    for stored in &corpus.pairs {
        let id = stored.image_id;
        if !rasters.contains_key(&id) {
            let img = corpus.header.images.get(id as usize).ok_or_else(|| {
                Error::Corpus(format!("pair references image {id} beyond the header list"))
            })?;
            let shadow = load_image(&resolve(&img.shadow))?;
            let shadowfree = load_image(&resolve(&img.shadowfree))?;
            rasters.insert(id, (build_match_raster(&shadow)?, build_match_raster(&shadowfree)?));
        }
        let (shadow_raster, free_raster) = &rasters[&id];
        let pair = stored.to_pair()?;
        let first = cpm_input_at(shadow_raster, &pair.first)?;
        let second = if stored.is_cross_image() {
            cpm_input_at(free_raster, &pair.second)?
        } else {
            cpm_input_at(shadow_raster, &pair.second)?
        };
        out.push(CpmExample {
            first,
            second,
            label: pair.label,
        });
    }
    Ok(out)
}

/// Forward-only metrics over a set of examples.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct CpmMetrics {
    pub cls: f64,
    pub reg: f64,
    pub accuracy: f64,
}

pub fn evaluate_cpm(net: &CpmNet, examples: &[CpmExample], idx: &[usize]) -> Result<CpmMetrics> {
    if idx.is_empty() {
        return Ok(CpmMetrics::default());
    }
    let firsts: Vec<CpmInput> = idx.iter().map(|&i| examples[i].first.clone()).collect();
    let seconds: Vec<CpmInput> = idx.iter().map(|&i| examples[i].second.clone()).collect();
    let f1 = net.extract_patch_features(&firsts)?;
    let f2 = net.extract_patch_features(&seconds)?;
    let mut m = CpmMetrics::default();
    for (row, &i) in idx.iter().enumerate() {
        let label = &examples[i].label;
        let probs = net.classify_pair(f1.row(row), f2.row(row));
        let score = net.regress_correlation(f1.row(row), f2.row(row));
        let truth = label.pair_type.class_index();
        m.cls += -probs[truth].max(1e-300).ln();
        m.reg += (score - label.correlation).abs();
        let argmax = (0..3).max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap()).unwrap();
        m.accuracy += if argmax == truth { 1.0 } else { 0.0 };
    }
    let n = idx.len() as f64;
    m.cls /= n;
    m.reg /= n;
    m.accuracy /= n;
    Ok(m)
}

/// Per-epoch matcher training record (one JSON line each).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CpmEpochLog {
    pub epoch: usize,
    pub cls: f64,
    pub reg: f64,
    pub accuracy: f64,
    pub held_cls: f64,
    pub held_reg: f64,
    pub held_accuracy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub struct CpmTrainOutcome {
    pub net: CpmNet,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub epochs: Vec<CpmEpochLog>,
    /// `Some(reason)` when the run stopped on divergence; the checkpoint then
    /// holds the last state observed with a finite loss.
    pub aborted: Option<String>,
}

/// Split example indices into train and held-out slices: every k-th example
/// is held out; tiny sets hold out the final example.
fn split_held_out(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    let held: Vec<usize> = if n >= every {
        (0..n).filter(|i| i % every == every - 1).collect()
    } else {
        vec![n - 1]
    };
    let train: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
    if train.is_empty() {
        (held.clone(), held)
    } else {
        (train, held)
    }
}

/// Train the matcher on materialized pairs. Stops early when `stop` returns
/// true for an epoch log. On a non-finite or diverged batch loss the run
/// aborts, rolling back to the last weights seen with a finite loss.
pub fn train_cpm(
    config: &TrainConfig,
    examples: &[CpmExample],
    logger: &mut TrainLogger,
    stop: Option<&dyn Fn(&CpmEpochLog) -> bool>,
) -> Result<CpmTrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Training("matcher corpus is empty".into()));
    }
    let ctx = set_global_determinism(config.seed);
    let mut net = CpmNet::init(config.seed);
    let mut opt = Adam::new(config.lr, config.betas.0, config.betas.1, config.weight_decay);
    let (train_idx, held_idx) = split_held_out(examples.len(), config.held_out_every);

    let mut last_good: (VarStore, AdamSnapshot, usize) =
        (net.store().clone(), AdamSnapshot::capture(&opt), 0);
    let mut epochs = Vec::new();
    let mut aborted = None;

    'outer: for epoch in 0..config.epochs_cpm {
        let t0 = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut ctx.rng(&format!("cpm.order.{epoch}")));
        let mut sums = CpmMetrics::default();
        let mut seen = 0usize;
        for chunk in order.chunks(config.cpm_batch_size) {
            let entry = (net.store().clone(), AdamSnapshot::capture(&opt), epoch);
            let firsts: Vec<CpmInput> = chunk.iter().map(|&i| examples[i].first.clone()).collect();
            let seconds: Vec<CpmInput> =
                chunk.iter().map(|&i| examples[i].second.clone()).collect();
            let classes: Vec<usize> = chunk
                .iter()
                .map(|&i| examples[i].label.pair_type.class_index())
                .collect();
            let corrs: Vec<f64> = chunk.iter().map(|&i| examples[i].label.correlation).collect();

            let mut tape = Tape::new();
            let vars = TapeVars::bind(&mut tape, net.store());
            let x1 = tape.constant(batch_to_nchw(&firsts));
            let x2 = tape.constant(batch_to_nchw(&seconds));
            let feat1 = net.forward_features(&mut tape, &vars, x1);
            let feat2 = net.forward_features(&mut tape, &vars, x2);
            let pair = tape.concat(1, &[feat1, feat2]);
            let cls_logits = net.forward_classifier(&mut tape, &vars, pair);
            let reg_logits = net.forward_regressor(&mut tape, &vars, pair);
            let loss = cpm_training_loss(
                &mut tape,
                cls_logits,
                reg_logits,
                classes.clone(),
                &corrs,
                config.squared_reg,
            );
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() || loss_value.abs() > DIVERGENCE_LIMIT {
                net.store_mut().load_from(&last_good.0)?;
                opt = last_good.1.clone().into_adam();
                aborted = Some(format!(
                    "matcher loss diverged at epoch {epoch} ({loss_value}); \
                     rolled back to the last finite state"
                ));
                break 'outer;
            }

            // This batch's pre-update metrics, from values already on the tape.
            let logits_2d = tape
                .value(cls_logits)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-d logits")
                .to_owned();
            let probs = softmax_rows(&logits_2d);
            let regv = tape.value(reg_logits);
            for (row, &i) in chunk.iter().enumerate() {
                let truth = classes[row];
                sums.cls += -probs[[row, truth]].max(1e-300).ln();
                let score = 1.0 / (1.0 + (-regv[[row, 0]]).exp());
                sums.reg += (score - examples[i].label.correlation).abs();
                let argmax = (0..3)
                    .max_by(|&a, &b| probs[[row, a]].partial_cmp(&probs[[row, b]]).unwrap())
                    .unwrap();
                sums.accuracy += if argmax == truth { 1.0 } else { 0.0 };
            }
            seen += chunk.len();

            last_good = entry;
            tape.backward(loss);
            let grads = vars.grads(&tape, net.store());
            opt.step(net.store_mut(), &grads);
        }

        let n = seen.max(1) as f64;
        let held = evaluate_cpm(&net, examples, &held_idx)?;
        let log = CpmEpochLog {
            epoch,
            cls: sums.cls / n,
            reg: sums.reg / n,
            accuracy: sums.accuracy / n,
            held_cls: held.cls,
            held_reg: held.reg,
            held_accuracy: held.accuracy,
            lr: config.lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        logger.log(&log)?;
        epochs.push(log);
        if stop.map(|f| f(&log)).unwrap_or(false) {
            break;
        }
    }

    let checkpoint = Checkpoint {
        step: opt.step_count(),
        epoch: epochs.len() as u64,
        config_hash: checkpoint::hash_config(config)?,
        weights: net.store().clone(),
        optimizer: Some(AdamSnapshot::capture(&opt)),
    };
    std::fs::create_dir_all(&config.checkpoint_dir)
        .map_err(|e| Error::io(&config.checkpoint_dir, e))?;
    let checkpoint_path = config.checkpoint_dir.join("cpm.ckpt");
    checkpoint::save_checkpoint(&checkpoint, &checkpoint_path)?;
    Ok(CpmTrainOutcome {
        net,
        checkpoint,
        checkpoint_path,
        epochs,
        aborted,
    })
}

/// Load a matcher from a checkpoint produced by [`train_cpm`].
pub fn cpm_from_checkpoint(ckpt: &Checkpoint, seed: u64) -> Result<CpmNet> {
    let mut net = CpmNet::init(seed);
    net.store_mut().load_from(&ckpt.weights)?;
    Ok(net)
}

/// SHA-256 of an image's dimensions, colorspace and raw f64 raster.
pub fn image_content_hash(img: &ImagePlane) -> String {
    let mut h = Sha256::new();
    let (rows, cols, ch) = img.data().dim();
    for d in [rows, cols, ch] {
        h.update((d as u64).to_le_bytes());
    }
    h.update(match img.colorspace() {
        ColorSpace::Rgb => b"rgb",
        ColorSpace::Lab => b"lab",
    });
    for v in img.data().iter() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Matching is the expensive O(patches) part of preprocessing and its result
/// is frozen during removal training, so results are memoized by
/// (image content, matcher weights, grid parameters).
#[derive(Default)]
pub struct MatchCache {
    entries: BTreeMap<String, MatchSet>,
    hits: u64,
    misses: u64,
}

impl MatchCache {
    pub fn new() -> Self {
        MatchCache::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    fn key(pipeline: &CanetPipeline, shadow: &ImagePlane) -> String {
        let matcher = match &pipeline.matcher {
            Matcher::Cpm(net) => format!("cpm:{}", net.store().content_hash()),
            Matcher::Tm => "tm".to_string(),
            Matcher::External(_) => "external".to_string(),
            Matcher::None => "none".to_string(),
        };
        format!(
            "{}|{}|{:?}",
            image_content_hash(shadow),
            matcher,
            pipeline.config.match_params
        )
    }

    pub fn get_or_compute(
        &mut self,
        pipeline: &CanetPipeline,
        shadow: &ImagePlane,
    ) -> Result<MatchSet> {
        let key = Self::key(pipeline, shadow);
        if let Some(hit) = self.entries.get(&key) {
            self.hits += 1;
            return Ok(hit.clone());
        }
        self.misses += 1;
        let set = pipeline.compute_matchset(shadow)?;
        self.entries.insert(key, set.clone());
        Ok(set)
    }
}

/// Per-step removal training record (one JSON line each).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CanetStepLog {
    pub step: u64,
    pub total: f64,
    pub rem: f64,
    pub per: f64,
    pub grad: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Periodic whole-image validation record.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ValidationLog {
    pub step: u64,
    pub rmse: f64,
}

pub enum StepResult {
    Stepped(CanetStepLog),
    /// Loss left the finite range; weights were rolled back.
    Diverged { step: u64, observed: f64 },
}

/// Incremental trainer for the removal pipeline: owns the weights, the
/// optimizer, the prepared samples, and the rollback state. The matcher is
/// run once per image up front and stays frozen.
pub struct CanetTrainer {
    config: TrainConfig,
    pipeline: CanetPipeline,
    opt: Adam,
    pairs: Vec<(ImagePlane, ImagePlane)>,
    samples: Vec<TrainSample>,
    step: u64,
    ctx: DeterminismContext,
    last_good: Option<(VarStore, AdamSnapshot)>,
    pub match_cache: MatchCache,
    cpm_hash_at_start: Option<String>,
}

impl CanetTrainer {
    /// Fresh run. `cpm` installs trained matcher weights for variants with a
    /// learned matcher; `None` keeps the seed-initialized matcher (logged,
    /// since an untrained matcher finds few confident pairs).
    pub fn new(
        config: &TrainConfig,
        pairs: Vec<(ImagePlane, ImagePlane)>,
        cpm: Option<CpmNet>,
    ) -> Result<Self> {
        let mut pipeline = CanetPipeline::init(config.to_pipeline_config(), config.seed)?;
        match (cpm, &mut pipeline.matcher) {
            (Some(net), Matcher::Cpm(slot)) => *slot = net,
            (Some(_), _) => {
                return Err(Error::Training(format!(
                    "variant {} has no learned matcher to install a checkpoint into",
                    config.variant
                )))
            }
            (None, Matcher::Cpm(_)) => {
                log::warn!("training {} with an untrained matcher", config.variant);
            }
            (None, _) => {}
        }
        let opt = Adam::new(config.lr, config.betas.0, config.betas.1, config.weight_decay);
        Self::assemble(config.clone(), pairs, pipeline, opt, 0)
    }

    /// Resume from a checkpoint written by [`CanetTrainer::checkpoint`]. The
    /// checkpoint refuses configs other than the one that produced it and
    /// carries the matcher weights itself.
    pub fn resume(
        config: &TrainConfig,
        pairs: Vec<(ImagePlane, ImagePlane)>,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        checkpoint::verify_config_hash(&ckpt, config)?;
        let mut pipeline = CanetPipeline::init(config.to_pipeline_config(), config.seed)?;
        pipeline.import_store(&ckpt.weights)?;
        let opt = match ckpt.optimizer {
            Some(snap) => snap.into_adam(),
            None => Adam::new(config.lr, config.betas.0, config.betas.1, config.weight_decay),
        };
        Self::assemble(config.clone(), pairs, pipeline, opt, ckpt.step)
    }

    fn assemble(
        config: TrainConfig,
        pairs: Vec<(ImagePlane, ImagePlane)>,
        pipeline: CanetPipeline,
        opt: Adam,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(Error::Training("no training pairs".into()));
        }
        let (ih, iw) = config.input_size;
        for (i, (shadow, gt)) in pairs.iter().enumerate() {
            if (shadow.height(), shadow.width()) != (ih, iw) {
                return Err(Error::Training(format!(
                    "pair {i}: image is {}x{} but input_size is {ih}x{iw}",
                    shadow.height(),
                    shadow.width()
                )));
            }
            if (gt.height(), gt.width()) != (ih, iw) {
                return Err(Error::Training(format!("pair {i}: ground truth size differs")));
            }
        }
        let mut match_cache = MatchCache::new();
        let samples: Vec<TrainSample> = pairs
            .iter()
            .map(|(shadow, gt)| {
                let set = match_cache.get_or_compute(&pipeline, shadow)?;
                pipeline.prepare_sample(shadow, gt, &set)
            })
            .collect::<Result<_>>()?;
        let ctx = set_global_determinism(config.seed);
        let cpm_hash_at_start = pipeline.cpm().map(|n| n.store().content_hash());
        Ok(CanetTrainer {
            config,
            pipeline,
            opt,
            pairs,
            samples,
            step,
            ctx,
            last_good: None,
            match_cache,
            cpm_hash_at_start,
        })
    }

    pub fn pipeline(&self) -> &CanetPipeline {
        &self.pipeline
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        let bs = self.config.batch_size.min(self.samples.len());
        self.samples.len().div_ceil(bs)
    }

    /// The sample indices step `t` consumes: a stateless function of the
    /// step counter, so a resumed run sees the identical schedule.
    fn batch_indices(&self, t: u64) -> Vec<usize> {
        let n = self.samples.len();
        let bs = self.config.batch_size.min(n);
        (0..bs)
            .map(|j| {
                let g = t as usize * bs + j;
                let pass = g / n;
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut self.ctx.rng(&format!("canet.order.{pass}")));
                perm[g % n]
            })
            .collect()
    }

    /// One optimizer update over one mini-batch; gradients are averaged
    /// across the batch samples.
    pub fn step_once(&mut self) -> Result<StepResult> {
        let t0 = Instant::now();
        let entry = (self.pipeline.store.clone(), AdamSnapshot::capture(&self.opt));
        let idxs = self.batch_indices(self.step);
        let bs = idxs.len() as f64;
        let mut grad_sum: BTreeMap<String, Arr> = BTreeMap::new();
        let mut totals = [0.0f64; 4];
        for &i in &idxs {
            let mut tape = Tape::new();
            let vars = TapeVars::bind(&mut tape, &self.pipeline.store);
            let nodes = self.pipeline.sample_loss_graph(&mut tape, &vars, &self.samples[i]);
            let c = nodes.components(&tape);
            if !c.total.is_finite() || c.total.abs() > DIVERGENCE_LIMIT {
                let (store, snap) = match self.last_good.take() {
                    Some(good) => good,
                    None => entry,
                };
                self.pipeline.store.load_from(&store)?;
                self.opt = snap.into_adam();
                return Ok(StepResult::Diverged {
                    step: self.step,
                    observed: c.total,
                });
            }
            totals[0] += c.total;
            totals[1] += c.rem;
            totals[2] += c.per;
            totals[3] += c.grad;
            tape.backward(nodes.total);
            for (name, g) in vars.grads(&tape, &self.pipeline.store) {
                grad_sum
                    .entry(name)
                    .and_modify(|acc| *acc += &g)
                    .or_insert(g);
            }
        }
        for g in grad_sum.values_mut() {
            g.mapv_inplace(|v| v / bs);
        }
        self.last_good = Some(entry);
        self.opt.step(&mut self.pipeline.store, &grad_sum);
        self.step += 1;
        Ok(StepResult::Stepped(CanetStepLog {
            step: self.step,
            total: totals[0] / bs,
            rem: totals[1] / bs,
            per: totals[2] / bs,
            grad: totals[3] / bs,
            lr: self.config.lr,
            wall_ms: t0.elapsed().as_millis() as u64,
        }))
    }

    /// Mean whole-image LAB RMSE over the training pairs, through the full
    /// removal path.
    pub fn validation_rmse(&self) -> Result<f64> {
        let mut sum = 0.0;
        for (shadow, gt) in &self.pairs {
            let out = self.pipeline.remove_shadow(shadow)?;
            let mask = Array2::from_elem((shadow.height(), shadow.width()), true);
            sum += eval::rmse_lab(&out.final_rgb, gt, &mask)?.all;
        }
        Ok(sum / self.pairs.len() as f64)
    }

    /// Self-contained checkpoint: pipeline + matcher weights, optimizer
    /// state, and the config hash that gates resumption.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let bs = self.config.batch_size.min(self.samples.len());
        Ok(Checkpoint {
            step: self.step,
            epoch: self.step * bs as u64 / self.samples.len() as u64,
            config_hash: checkpoint::hash_config(&self.config)?,
            weights: self.pipeline.export_store(),
            optimizer: Some(AdamSnapshot::capture(&self.opt)),
        })
    }

    /// The matcher must not drift while the removal network trains.
    pub fn assert_matcher_frozen(&self) -> Result<()> {
        let now = self.pipeline.cpm().map(|n| n.store().content_hash());
        if now != self.cpm_hash_at_start {
            return Err(Error::Training(
                "matcher weights changed during removal training".into(),
            ));
        }
        Ok(())
    }
}

pub struct CanetTrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub steps: Vec<CanetStepLog>,
    pub aborted: Option<String>,
    /// Mean whole-image LAB RMSE on the training pairs after the final step,
    /// absent when the run aborted.
    pub validation_rmse: Option<f64>,
}

/// Epoch-driven wrapper over [`CanetTrainer`]: runs `epochs_canet` passes,
/// logs every step and periodic validation, saves the final checkpoint under
/// the config's checkpoint directory.
pub fn train_canet(
    config: &TrainConfig,
    pairs: Vec<(ImagePlane, ImagePlane)>,
    cpm: Option<CpmNet>,
    logger: &mut TrainLogger,
) -> Result<CanetTrainOutcome> {
    let mut trainer = CanetTrainer::new(config, pairs, cpm)?;
    let steps_per_epoch = trainer.steps_per_epoch();
    let total_steps = config.epochs_canet * steps_per_epoch;
    let mut steps = Vec::with_capacity(total_steps);
    let mut aborted = None;
    for i in 0..total_steps {
        match trainer.step_once()? {
            StepResult::Stepped(log) => {
                logger.log(&log)?;
                steps.push(log);
            }
            StepResult::Diverged { step, observed } => {
                aborted = Some(format!(
                    "loss diverged at step {step} ({observed}); rolled back to the last finite state"
                ));
                break;
            }
        }
        let at_epoch_end = (i + 1) % steps_per_epoch == 0;
        let epoch_no = (i + 1) / steps_per_epoch;
        if at_epoch_end
            && config.validate_every_epochs > 0
            && epoch_no % config.validate_every_epochs == 0
        {
            let rmse = trainer.validation_rmse()?;
            logger.log(&ValidationLog {
                step: trainer.current_step(),
                rmse,
            })?;
        }
    }
    trainer.assert_matcher_frozen()?;
    let validation_rmse = if aborted.is_none() {
        Some(trainer.validation_rmse()?)
    } else {
        None
    };
    let checkpoint = trainer.checkpoint()?;
    std::fs::create_dir_all(&config.checkpoint_dir)
        .map_err(|e| Error::io(&config.checkpoint_dir, e))?;
    let checkpoint_path = config
        .checkpoint_dir
        .join(format!("canet_{}.ckpt", config.variant));
    checkpoint::save_checkpoint(&checkpoint, &checkpoint_path)?;
    Ok(CanetTrainOutcome {
        checkpoint,
        checkpoint_path,
        steps,
        aborted,
        validation_rmse,
    })
}
