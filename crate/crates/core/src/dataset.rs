//! Dataset ingestion and patch-pair corpus construction.
//!
//! Two directory conventions are supported: triplet datasets that ship
//! shadow/mask/shadow-free rasters per scene, and pair datasets whose masks
//! live in a sibling directory and may be missing per-file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::{load_image, ImagePlane};
use crate::{Error, Result};

/// Fixed square patch side, in pixels.
pub const PATCH_SIZE: usize = 32;
/// A patch is classed "shadow" when at least this fraction of its pixels is
/// mask-positive.
pub const TAU_SHADOW: f64 = 0.5;
/// Cosine similarity above which a patch pair is labeled a match.
pub const COSINE_MATCH: f64 = 0.95;
/// Cosine similarity below which a patch pair is labeled a non-match.
/// Similarities in [COSINE_NONMATCH, COSINE_MATCH] are discarded.
pub const COSINE_NONMATCH: f64 = 0.6;

const CORPUS_FORMAT_VERSION: u32 = 1;
const RECORD_BYTES: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetLayout {
    /// `root/{train,test}/{split}_A` shadow, `{split}_B` mask, `{split}_C`
    /// shadow-free; files matched by stem.
    Istd,
    /// `root/{train,test}/{shadow,mask,shadow_free}`; the mask directory is
    /// external curation and may lack entries.
    Srd,
}

/// One scene: shadow image, shadow-free image, binary mask.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub shadow_img_path: PathBuf,
    pub shadowfree_img_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

/// Ingestion result: accepted records plus counters for everything dropped.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub records: Vec<SampleRecord>,
    pub skipped_missing_mask: usize,
    pub rejected_size_mismatch: usize,
    pub skipped_incomplete: usize,
}

/// A 32x32 patch anchored at (row, col) of image `image_id`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    pub image_id: u32,
    pub row: usize,
    pub col: usize,
}

impl PatchRef {
    pub fn size(&self) -> usize {
        PATCH_SIZE
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row + PATCH_SIZE <= height && self.col + PATCH_SIZE <= width
    }
}

/// Ordered pair classes: the sign says which side is the shadow patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairType {
    /// (non-shadow, shadow)
    NonShadowShadow,
    /// both patches from the same class
    Same,
    /// (shadow, non-shadow)
    ShadowNonShadow,
}

impl PairType {
    pub fn as_i8(self) -> i8 {
        match self {
            PairType::NonShadowShadow => -1,
            PairType::Same => 0,
            PairType::ShadowNonShadow => 1,
        }
    }

    pub fn from_i8(v: i8) -> Result<Self> {
        match v {
            -1 => Ok(PairType::NonShadowShadow),
            0 => Ok(PairType::Same),
            1 => Ok(PairType::ShadowNonShadow),
            other => Err(Error::validation(format!("invalid pair type {other}"))),
        }
    }

    /// Dense class index for the 3-way classifier head: -1 -> 0, 0 -> 1, +1 -> 2.
    pub fn class_index(self) -> usize {
        (self.as_i8() + 1) as usize
    }

    pub fn from_class_index(idx: usize) -> Result<Self> {
        match idx {
            0 => Ok(PairType::NonShadowShadow),
            1 => Ok(PairType::Same),
            2 => Ok(PairType::ShadowNonShadow),
            other => Err(Error::validation(format!("invalid class index {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairLabel {
    pub pair_type: PairType,
    /// 0 or 1 for ground truth; continuous in [0,1] at inference.
    pub correlation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPair {
    pub first: PatchRef,
    pub second: PatchRef,
    pub label: PairLabel,
}

/// On-disk pair record. Way-1 pairs (shadow image vs. shadow-free image at
/// the same location) are encoded by identical coordinates; way-2 sampling
/// never emits identical coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoredPair {
    pub image_id: u32,
    pub r1: u16,
    pub c1: u16,
    pub r2: u16,
    pub c2: u16,
    pub pair_type: i8,
    pub corr: u8,
}

impl StoredPair {
    pub fn is_cross_image(&self) -> bool {
        self.r1 == self.r2 && self.c1 == self.c2
    }

    pub fn to_pair(&self) -> Result<PatchPair> {
        Ok(PatchPair {
            first: PatchRef {
                image_id: self.image_id,
                row: self.r1 as usize,
                col: self.c1 as usize,
            },
            second: PatchRef {
                image_id: self.image_id,
                row: self.r2 as usize,
                col: self.c2 as usize,
            },
            label: PairLabel {
                pair_type: PairType::from_i8(self.pair_type)?,
                correlation: self.corr as f64,
            },
        })
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.image_id.to_le_bytes());
        out.extend_from_slice(&self.r1.to_le_bytes());
        out.extend_from_slice(&self.c1.to_le_bytes());
        out.extend_from_slice(&self.r2.to_le_bytes());
        out.extend_from_slice(&self.c2.to_le_bytes());
        out.push(self.pair_type as u8);
        out.push(self.corr);
    }

    fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() != RECORD_BYTES {
            return Err(Error::Corpus(format!(
                "record length {} != {RECORD_BYTES}",
                buf.len()
            )));
        }
        let u16le = |i: usize| u16::from_le_bytes([buf[i], buf[i + 1]]);
        Ok(StoredPair {
            image_id: u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]),
            r1: u16le(4),
            c1: u16le(6),
            r2: u16le(8),
            c2: u16le(10),
            pair_type: buf[12] as i8,
            corr: buf[13],
        })
    }
}

/// Human-readable corpus header, serialized as one JSON line ahead of the
/// binary records.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format_version: u32,
    pub seed: u64,
    pub n_pairs: usize,
    pub n_match: usize,
    pub n_nonmatch: usize,
    pub patch_size: usize,
    pub tau_shadow: f64,
    pub cosine_match: f64,
    pub cosine_nonmatch: f64,
    pub images: Vec<CorpusImage>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusImage {
    pub shadow: String,
    pub shadowfree: String,
    pub mask: String,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub pairs: Vec<StoredPair>,
}

/// Walk a dataset root and enumerate usable records in deterministic order
/// (train split first, lexicographic by filename within a split).
pub fn ingest_dataset(root: &Path, layout: DatasetLayout) -> Result<IngestReport> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut report = IngestReport::default();
    let mut any_split = false;
    for (split, split_name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let split_dir = root.join(split_name);
        if !split_dir.is_dir() {
            continue;
        }
        any_split = true;
        let (shadow_dir, mask_dir, free_dir) = match layout {
            DatasetLayout::Istd => (
                split_dir.join(format!("{split_name}_A")),
                split_dir.join(format!("{split_name}_B")),
                split_dir.join(format!("{split_name}_C")),
            ),
            DatasetLayout::Srd => (
                split_dir.join("shadow"),
                split_dir.join("mask"),
                split_dir.join("shadow_free"),
            ),
        };
        if !shadow_dir.is_dir() || !free_dir.is_dir() {
            return Err(Error::Dataset(format!(
                "split {} does not follow the {:?} layout",
                split_dir.display(),
                layout
            )));
        }
        let shadows = list_images(&shadow_dir)?;
        let masks = stem_map(&mask_dir)?;
        let frees = stem_map(&free_dir)?;
        for shadow_path in shadows {
            let stem = file_stem(&shadow_path);
            let Some(free_path) = frees.get(&stem) else {
                report.skipped_incomplete += 1;
                continue;
            };
            let Some(mask_path) = masks.get(&stem) else {
                match layout {
                    DatasetLayout::Srd => report.skipped_missing_mask += 1,
                    DatasetLayout::Istd => report.skipped_incomplete += 1,
                }
                continue;
            };
            let dims = [
                image::image_dimensions(&shadow_path),
                image::image_dimensions(free_path),
                image::image_dimensions(mask_path),
            ];
            let mut sizes = Vec::with_capacity(3);
            let mut decode_failed = false;
            for d in dims {
                match d {
                    Ok(sz) => sizes.push(sz),
                    Err(_) => {
                        decode_failed = true;
                        break;
                    }
                }
            }
            if decode_failed || sizes.windows(2).any(|w| w[0] != w[1]) {
                report.rejected_size_mismatch += 1;
                continue;
            }
            report.records.push(SampleRecord {
                shadow_img_path: shadow_path,
                shadowfree_img_path: free_path.clone(),
                mask_path: mask_path.clone(),
                split,
            });
        }
    }
    if !any_split {
        return Err(Error::Dataset(format!(
            "{} has neither train/ nor test/ subdirectory",
            root.display()
        )));
    }
    Ok(report)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

fn stem_map(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(map);
    }
    for path in list_images(dir)? {
        map.insert(file_stem(&path), path);
    }
    Ok(map)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Load a mask raster and binarize at 0.5 of full scale.
pub fn load_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::from_elem((h as usize, w as usize), false);
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] >= 128;
    }
    Ok(out)
}

/// Fraction of mask-positive pixels inside the patch.
pub fn patch_shadow_fraction(patch: &PatchRef, mask: &Array2<bool>) -> f64 {
    let region = mask.slice(s![
        patch.row..patch.row + PATCH_SIZE,
        patch.col..patch.col + PATCH_SIZE
    ]);
    let positive = region.iter().filter(|v| **v).count();
    positive as f64 / (PATCH_SIZE * PATCH_SIZE) as f64
}

/// Ordered pair type from mask fractions; a patch is shadow iff its fraction
/// is >= `tau` (ties class as shadow).
pub fn ground_truth_type(
    first: &PatchRef,
    second: &PatchRef,
    mask: &Array2<bool>,
    tau: f64,
) -> PairType {
    let s1 = patch_shadow_fraction(first, mask) >= tau;
    let s2 = patch_shadow_fraction(second, mask) >= tau;
    match (s1, s2) {
        (true, false) => PairType::ShadowNonShadow,
        (false, true) => PairType::NonShadowShadow,
        _ => PairType::Same,
    }
}

/// Binary correlation label from cosine similarity of the flattened RGB patch
/// vectors on the shadow-free image. `None` means the pair is discarded:
/// similarity inside [COSINE_NONMATCH, COSINE_MATCH], or a zero-vector patch.
pub fn ground_truth_correlation(
    first: &PatchRef,
    second: &PatchRef,
    shadowfree: &ImagePlane,
) -> Option<u8> {
    let a = extract_patch(shadowfree, first);
    let b = extract_patch(shadowfree, second);
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let cos = dot / (na * nb);
    if cos > COSINE_MATCH {
        Some(1)
    } else if cos < COSINE_NONMATCH {
        Some(0)
    } else {
        None
    }
}

/// Copy the patch region out of an image, (32, 32, 3).
pub fn extract_patch(img: &ImagePlane, patch: &PatchRef) -> Array3<f64> {
    img.data()
        .slice(s![
            patch.row..patch.row + PATCH_SIZE,
            patch.col..patch.col + PATCH_SIZE,
            ..
        ])
        .to_owned()
}

/// Write a patch back at its anchor, inverse of `extract_patch`.
pub fn paste_patch(img: &mut Array3<f64>, patch: &PatchRef, data: &Array3<f64>) {
    img.slice_mut(s![
        patch.row..patch.row + PATCH_SIZE,
        patch.col..patch.col + PATCH_SIZE,
        ..
    ])
    .assign(data);
}

struct CacheEntry {
    shadowfree: ImagePlane,
    mask: Array2<bool>,
}

/// Lazily loads shadow-free images and masks for corpus building, capped so a
/// large dataset never holds every raster in memory at once.
struct ImageCache<'a> {
    records: &'a [SampleRecord],
    entries: BTreeMap<usize, CacheEntry>,
    cap: usize,
}

impl<'a> ImageCache<'a> {
    fn new(records: &'a [SampleRecord]) -> Self {
        ImageCache {
            records,
            entries: BTreeMap::new(),
            cap: 16,
        }
    }

    fn get(&mut self, idx: usize) -> Result<&CacheEntry> {
        if !self.entries.contains_key(&idx) {
            if self.entries.len() >= self.cap {
                self.entries.clear();
            }
            let rec = &self.records[idx];
            let shadowfree = load_image(&rec.shadowfree_img_path)?;
            let mask = load_mask(&rec.mask_path)?;
            let (h, w) = (shadowfree.data().dim().0, shadowfree.data().dim().1);
            if mask.dim() != (h, w) {
                return Err(Error::Dataset(format!(
                    "mask size {:?} does not match image {}x{}",
                    mask.dim(),
                    h,
                    w
                )));
            }
            self.entries.insert(idx, CacheEntry { shadowfree, mask });
        }
        Ok(self.entries.get(&idx).unwrap())
    }
}

/// Build a balanced patch-pair corpus: exactly half correlation-1 (match)
/// pairs and half correlation-0 (non-match) pairs.
///
/// Match pairs mix way-1 (same coordinates on the shadow/shadow-free image
/// pair) and way-2 (two positions inside one image whose shadow-free cosine
/// clears COSINE_MATCH); non-match pairs come from way-2 only. The sampler is
/// a pure function of (records, n_pairs, seed).
pub fn build_pair_corpus(records: &[SampleRecord], n_pairs: usize, seed: u64) -> Result<Corpus> {
    if records.is_empty() {
        return Err(Error::Corpus("no records to sample from".into()));
    }
    if n_pairs == 0 || n_pairs % 2 != 0 {
        return Err(Error::Corpus(format!(
            "n_pairs must be even and positive, got {n_pairs}"
        )));
    }
    let half = n_pairs / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = ImageCache::new(records);
    let mut matches: Vec<StoredPair> = Vec::with_capacity(half);
    let mut nonmatches: Vec<StoredPair> = Vec::with_capacity(half);
    let max_attempts = 500 * n_pairs + 10_000;
    let mut attempts = 0;
    while (matches.len() < half || nonmatches.len() < half) && attempts < max_attempts {
        attempts += 1;
        let idx = rng.gen_range(0..records.len());
        let entry = cache.get(idx)?;
        let (h, w, _) = entry.shadowfree.data().dim();
        if h < PATCH_SIZE || w < PATCH_SIZE || h > u16::MAX as usize || w > u16::MAX as usize {
            continue;
        }
        let image_id = idx as u32;
        let way1 = matches.len() < half && rng.gen_bool(0.5);
        if way1 {
            let r = rng.gen_range(0..=h - PATCH_SIZE) as u16;
            let c = rng.gen_range(0..=w - PATCH_SIZE) as u16;
            let pr = PatchRef {
                image_id,
                row: r as usize,
                col: c as usize,
            };
            let shadow = patch_shadow_fraction(&pr, &entry.mask) >= TAU_SHADOW;
            let pair_type = if shadow {
                PairType::ShadowNonShadow
            } else {
                PairType::Same
            };
            matches.push(StoredPair {
                image_id,
                r1: r,
                c1: c,
                r2: r,
                c2: c,
                pair_type: pair_type.as_i8(),
                corr: 1,
            });
        } else {
            let r1 = rng.gen_range(0..=h - PATCH_SIZE) as u16;
            let c1 = rng.gen_range(0..=w - PATCH_SIZE) as u16;
            let r2 = rng.gen_range(0..=h - PATCH_SIZE) as u16;
            let c2 = rng.gen_range(0..=w - PATCH_SIZE) as u16;
            if r1 == r2 && c1 == c2 {
                continue;
            }
            let first = PatchRef {
                image_id,
                row: r1 as usize,
                col: c1 as usize,
            };
            let second = PatchRef {
                image_id,
                row: r2 as usize,
                col: c2 as usize,
            };
            let Some(corr) = ground_truth_correlation(&first, &second, &entry.shadowfree) else {
                continue;
            };
            let bucket = if corr == 1 { &mut matches } else { &mut nonmatches };
            if bucket.len() >= half {
                continue;
            }
            let pair_type = ground_truth_type(&first, &second, &entry.mask, TAU_SHADOW);
            bucket.push(StoredPair {
                image_id,
                r1,
                c1,
                r2,
                c2,
                pair_type: pair_type.as_i8(),
                corr,
            });
        }
    }
    if matches.len() < half || nonmatches.len() < half {
        return Err(Error::Corpus(format!(
            "insufficient valid pairs after {attempts} attempts: \
             found {}/{half} match and {}/{half} non-match",
            matches.len(),
            nonmatches.len()
        )));
    }
    let mut pairs = matches;
    pairs.append(&mut nonmatches);
    let header = CorpusHeader {
        format_version: CORPUS_FORMAT_VERSION,
        seed,
        n_pairs,
        n_match: half,
        n_nonmatch: half,
        patch_size: PATCH_SIZE,
        tau_shadow: TAU_SHADOW,
        cosine_match: COSINE_MATCH,
        cosine_nonmatch: COSINE_NONMATCH,
        images: records
            .iter()
            .map(|r| CorpusImage {
                shadow: r.shadow_img_path.to_string_lossy().into_owned(),
                shadowfree: r.shadowfree_img_path.to_string_lossy().into_owned(),
                mask: r.mask_path.to_string_lossy().into_owned(),
            })
            .collect(),
    };
    Ok(Corpus { header, pairs })
}

/// Serialize: one JSON header line, then fixed-width little-endian records.
pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut bytes = serde_json::to_vec(&corpus.header)?;
    bytes.push(b'\n');
    for pair in &corpus.pairs {
        pair.encode(&mut bytes);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Corpus("missing header terminator".into()))?;
    let header: CorpusHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Corpus(format!(
            "unsupported corpus format version {}",
            header.format_version
        )));
    }
    let body = &bytes[nl + 1..];
    if body.len() % RECORD_BYTES != 0 {
        return Err(Error::Corpus(format!(
            "record section length {} is not a multiple of {RECORD_BYTES}",
            body.len()
        )));
    }
    let mut pairs = Vec::with_capacity(body.len() / RECORD_BYTES);
    for chunk in body.chunks(RECORD_BYTES) {
        pairs.push(StoredPair::decode(chunk)?);
    }
    if pairs.len() != header.n_pairs {
        return Err(Error::Corpus(format!(
            "header promises {} pairs, file holds {}",
            header.n_pairs,
            pairs.len()
        )));
    }
    Ok(Corpus { header, pairs })
}

/// Recompute every stored label from the source rasters and compare. Any
/// divergence fails with the offending pair index.
pub fn revalidate_corpus(corpus: &Corpus) -> Result<()> {
    let mut cache: BTreeMap<u32, (ImagePlane, Array2<bool>)> = BTreeMap::new();
    for (i, pair) in corpus.pairs.iter().enumerate() {
        let img = &corpus.header.images[pair.image_id as usize];
        if !cache.contains_key(&pair.image_id) {
            if cache.len() >= 16 {
                cache.clear();
            }
            let shadowfree = load_image(Path::new(&img.shadowfree))?;
            let mask = load_mask(Path::new(&img.mask))?;
            cache.insert(pair.image_id, (shadowfree, mask));
        }
        let (shadowfree, mask) = cache.get(&pair.image_id).unwrap();
        let first = PatchRef {
            image_id: pair.image_id,
            row: pair.r1 as usize,
            col: pair.c1 as usize,
        };
        let second = PatchRef {
            image_id: pair.image_id,
            row: pair.r2 as usize,
            col: pair.c2 as usize,
        };
        let (want_type, want_corr) = if pair.is_cross_image() {
            let shadow = patch_shadow_fraction(&first, mask) >= corpus.header.tau_shadow;
            let t = if shadow {
                PairType::ShadowNonShadow
            } else {
                PairType::Same
            };
            (t.as_i8(), 1u8)
        } else {
            let corr = ground_truth_correlation(&first, &second, shadowfree).ok_or_else(|| {
                Error::Corpus(format!("pair {i} re-labels into the discard band"))
            })?;
            let t = ground_truth_type(&first, &second, mask, corpus.header.tau_shadow);
            (t.as_i8(), corr)
        };
        if want_type != pair.pair_type || want_corr != pair.corr {
            return Err(Error::Corpus(format!(
                "pair {i} label mismatch: stored (type {}, corr {}), recomputed (type {}, corr {})",
                pair.pair_type, pair.corr, want_type, want_corr
            )));
        }
    }
    Ok(())
}
