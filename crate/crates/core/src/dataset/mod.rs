//! Labeled single/double-compressed patches, Q-matrix pools and manifests.

mod corpus;
mod store;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use corpus::{synth_corpus, synth_image, CorpusConfig};
pub use store::{read_packed, write_packed, StorageFormat};

use crate::error::{Error, Result};
use crate::jpeg::{forward_block, inverse_block, standard_qmatrix, CoeffPlane, QuantMatrix};
use crate::raster::{read_raster, GrayImage};

/// Quantize every 8×8 block of a luma patch with `q1`.
pub fn single_compress(pixels: &GrayImage, q1: &QuantMatrix) -> Result<CoeffPlane> {
    if !pixels.width.is_multiple_of(8) || !pixels.height.is_multiple_of(8) || pixels.width == 0 || pixels.height == 0 {
        return Err(Error::Dimension(format!(
            "patch {}x{} is not a positive multiple of 8",
            pixels.width, pixels.height
        )));
    }
    let (wb, hb) = (pixels.width / 8, pixels.height / 8);
    let blocks = (0..hb)
        .flat_map(|by| (0..wb).map(move |bx| (bx, by)))
        .map(|(bx, by)| forward_block(&pixels.block(bx, by), q1))
        .collect();
    CoeffPlane::new(1, wb, hb, blocks)
}

/// Reconstruct pixels from a coefficient plane (dequantize, IDCT, round, clamp).
pub fn decompress(plane: &CoeffPlane, q: &QuantMatrix) -> GrayImage {
    let (w, h) = (plane.width_blocks * 8, plane.height_blocks * 8);
    let mut pixels = vec![0u8; w * h];
    for by in 0..plane.height_blocks {
        for bx in 0..plane.width_blocks {
            let b = inverse_block(plane.block(bx, by), q);
            for i in 0..64 {
                pixels[(by * 8 + i / 8) * w + bx * 8 + i % 8] = b[i];
            }
        }
    }
    GrayImage {
        width: w,
        height: h,
        pixels,
    }
}

/// Compress with `q1`, decompress to 8-bit pixels, compress again with `q2`.
pub fn double_compress(pixels: &GrayImage, q1: &QuantMatrix, q2: &QuantMatrix) -> Result<CoeffPlane> {
    if q1 == q2 {
        return Err(Error::SameMatrix);
    }
    let first = single_compress(pixels, q1)?;
    single_compress(&decompress(&first, q1), q2)
}

/// Drop repeated matrices, keeping first occurrences.
pub fn dedup_pool(pool: &[QuantMatrix]) -> Vec<QuantMatrix> {
    let mut seen = HashSet::new();
    pool.iter().filter(|q| seen.insert(**q)).copied().collect()
}

/// Random disjoint partition of a pool into seen and unseen matrices.
/// The seen part holds `round(fraction · n)` of the `n` distinct matrices,
/// at least one on each side.
pub fn split_q_pool(pool: &[QuantMatrix], seen_fraction: f64, seed: u64) -> Result<(Vec<QuantMatrix>, Vec<QuantMatrix>)> {
    if !(seen_fraction > 0.0 && seen_fraction < 1.0) {
        return Err(Error::domain(format!("seen fraction {seen_fraction} outside (0, 1)")));
    }
    let mut distinct = dedup_pool(pool);
    if distinct.len() < 2 {
        return Err(Error::domain("pool needs at least two distinct matrices"));
    }
    let n = distinct.len();
    let n_seen = ((seen_fraction * n as f64).round() as usize).clamp(1, n - 1);
    distinct.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let unseen = distinct.split_off(n_seen);
    Ok((distinct, unseen))
}

/// The default pool: standard luminance tables at qualities 60, 62, ..., 98.
pub fn default_q_pool() -> Vec<QuantMatrix> {
    (60..=98)
        .step_by(2)
        .map(|q| standard_qmatrix(q).expect("quality in range"))
        .collect()
}

/// Parse a pool file: each matrix is 8 lines of 8 integers in raster
/// order, matrices separated by blank lines. `#` starts a comment.
pub fn parse_q_pool(text: &str) -> Result<Vec<QuantMatrix>> {
    let mut pool = Vec::new();
    let mut current: Vec<u16> = Vec::new();
    let flush = |current: &mut Vec<u16>, pool: &mut Vec<QuantMatrix>| -> Result<()> {
        if current.is_empty() {
            return Ok(());
        }
        let steps: [u16; 64] = current
            .as_slice()
            .try_into()
            .map_err(|_| Error::Format(format!("matrix {} has {} entries, expected 64", pool.len() + 1, current.len())))?;
        pool.push(QuantMatrix::new(steps)?);
        current.clear();
        Ok(())
    };
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            flush(&mut current, &mut pool)?;
            continue;
        }
        for tok in line.split_whitespace() {
            let v = tok
                .parse::<u16>()
                .map_err(|_| Error::Format(format!("line {}: bad q-factor {tok:?}", ln + 1)))?;
            current.push(v);
        }
    }
    flush(&mut current, &mut pool)?;
    Ok(pool)
}

pub fn format_q_pool(pool: &[QuantMatrix]) -> String {
    pool.iter().map(|q| format!("{q}")).collect::<Vec<_>>().join("\n")
}

pub fn load_q_pool(path: &Path) -> Result<Vec<QuantMatrix>> {
    parse_q_pool(&std::fs::read_to_string(path).map_err(Error::at_path(path))?)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Single,
    Double,
}

impl Label {
    pub fn as_target(self) -> f64 {
        match self {
            Label::Single => 0.0,
            Label::Double => 1.0,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Test patches compressed only with matrices outside the training pool.
    TestUnseen,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "test_unseen" => Ok(Split::TestUnseen),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// How patches smaller than 256 are formed.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    /// Compress a 256×256 patch and keep the top-left sub-grid of blocks.
    #[default]
    Subgrid,
    /// Compress patches of the requested size directly.
    Native,
}

impl std::str::FromStr for PatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subgrid" => Ok(PatchMode::Subgrid),
            "native" => Ok(PatchMode::Native),
            _ => Err(Error::Config(format!("patch mode must be subgrid or native, got {s:?}"))),
        }
    }
}

pub const SUBGRID_SOURCE: usize = 256;

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub patch_size: usize,
    pub mode: PatchMode,
    pub seed: u64,
    /// Fractions of source patches for train, val and test.
    pub splits: [f64; 3],
    /// Reserve part of the pool and add a `test_unseen` split compressed
    /// only with the reserved matrices.
    pub unseen_eval: bool,
    pub seen_fraction: f64,
    /// Cap on source patches taken from each image, in raster order.
    pub max_patches_per_image: Option<usize>,
    pub storage: StorageFormat,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            patch_size: 256,
            mode: PatchMode::Subgrid,
            seed: 0,
            splits: [0.8, 0.1, 0.1],
            unseen_eval: false,
            seen_fraction: 0.7,
            max_patches_per_image: None,
            storage: StorageFormat::Packed,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(8) {
            return Err(Error::Config(format!("patch size {} is not a positive multiple of 8", self.patch_size)));
        }
        if self.mode == PatchMode::Subgrid && self.patch_size > SUBGRID_SOURCE {
            return Err(Error::Config(format!("sub-grid patches cannot exceed {SUBGRID_SOURCE}")));
        }
        if self.splits.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be in [0, 1] and sum to 1", self.splits)));
        }
        if self.unseen_eval && !(self.seen_fraction > 0.0 && self.seen_fraction < 1.0) {
            return Err(Error::Config(format!("seen fraction {}", self.seen_fraction)));
        }
        Ok(())
    }

    /// Side of the square region cut from the raw image per source patch.
    fn source_size(&self) -> usize {
        match self.mode {
            PatchMode::Subgrid => SUBGRID_SOURCE,
            PatchMode::Native => self.patch_size,
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: u64,
    pub label: Label,
    pub split: Split,
    /// File name of the raw image.
    pub source: String,
    /// Pixel offset (x, y) of the source region.
    pub offset: (usize, usize),
    pub q1: QuantMatrix,
    pub q2: Option<QuantMatrix>,
    /// Stored patch, relative to the dataset directory.
    pub path: String,
}

impl PatchRecord {
    /// The matrix of the last compression.
    pub fn final_q(&self) -> &QuantMatrix {
        self.q2.as_ref().unwrap_or(&self.q1)
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub config: DatasetConfig,
    pub images: usize,
    /// Matrices available to train/val/test patches.
    pub seen_pool: Vec<QuantMatrix>,
    /// Matrices reserved for `test_unseen`; empty without unseen evaluation.
    pub unseen_pool: Vec<QuantMatrix>,
}

#[derive(Clone, PartialEq, Debug)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<PatchRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ManifestLine {
    Header(ManifestHeader),
    Patch(PatchRecord),
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&ManifestLine::Header(self.header.clone()))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&ManifestLine::Patch(r.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = match lines.next().map(serde_json::from_str::<ManifestLine>).transpose()? {
            Some(ManifestLine::Header(h)) => h,
            _ => return Err(Error::Format("manifest must start with a header line".into())),
        };
        let records = lines
            .map(|l| match serde_json::from_str::<ManifestLine>(l)? {
                ManifestLine::Patch(p) => Ok(p),
                ManifestLine::Header(_) => Err(Error::Format("second header in manifest".into())),
            })
            .collect::<Result<_>>()?;
        Ok(Self { header, records })
    }

    /// SHA-256 of the JSONL serialization, hex encoded.
    pub fn digest(&self) -> Result<String> {
        let hash = Sha256::digest(self.to_jsonl()?.as_bytes());
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        Self::from_jsonl(&std::fs::read_to_string(&path).map_err(Error::at_path(&path))?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_jsonl()?).map_err(Error::at_path(&path))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Check the structural invariants: distinct matrices for double
    /// records, class balance per split, and that no `test_unseen` final
    /// matrix belongs to the seen pool.
    pub fn verify(&self) -> Result<()> {
        for r in &self.records {
            match (r.label, &r.q2) {
                (Label::Double, Some(q2)) if *q2 != r.q1 => {}
                (Label::Double, _) => return Err(Error::Format(format!("double record {} without a distinct Q2", r.id))),
                (Label::Single, Some(_)) => return Err(Error::Format(format!("single record {} carries Q2", r.id))),
                (Label::Single, None) => {}
            }
        }
        for split in [Split::Train, Split::Val, Split::Test, Split::TestUnseen] {
            let singles = self.split(split).filter(|r| r.label == Label::Single).count();
            let doubles = self.split(split).filter(|r| r.label == Label::Double).count();
            if singles != doubles {
                return Err(Error::Format(format!("{split:?}: {singles} single vs {doubles} double")));
            }
        }
        let seen: HashSet<_> = self.header.seen_pool.iter().collect();
        if let Some(r) = self.split(Split::TestUnseen).find(|r| seen.contains(r.final_q())) {
            return Err(Error::Format(format!("unseen-Q record {} uses a seen matrix", r.id)));
        }
        Ok(())
    }

    /// Load the stored coefficient plane of a record.
    pub fn load_plane(&self, dir: &Path, record: &PatchRecord) -> Result<CoeffPlane> {
        store::load_patch(&dir.join(&record.path), self.header.config.storage).map(|(plane, _)| plane)
    }
}

/// Raw images under `dir` (PGM/PPM/PNM), sorted by file name.
pub fn list_raw_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::at_path(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

struct SourcePatch {
    image: usize,
    offset: (usize, usize),
}

/// Non-overlapping top-left-anchored regions of side `size`, raster order.
fn patch_offsets(width: usize, height: usize, size: usize) -> Vec<(usize, usize)> {
    (0..height / size)
        .flat_map(|py| (0..width / size).map(move |px| (px * size, py * size)))
        .collect()
}

fn pick_pair(pool: &[QuantMatrix], rng: &mut ChaCha8Rng) -> (QuantMatrix, QuantMatrix) {
    let i = rng.random_range(0..pool.len());
    let mut j = rng.random_range(0..pool.len() - 1);
    if j >= i {
        j += 1;
    }
    (pool[i], pool[j])
}

fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let val = (fractions[1] * n as f64).round() as usize;
    let test = ((fractions[2] * n as f64).round() as usize).min(n - val.min(n));
    [n - val.min(n) - test, val.min(n), test]
}

/// Cut source patches from every raw image, compress each once with a
/// random pool matrix and once more with a different one, store the
/// coefficient planes under `out_dir` and write the manifest.
pub fn build_dataset(raw_dir: &Path, out_dir: &Path, q_pool: &[QuantMatrix], config: &DatasetConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let pool = dedup_pool(q_pool);
    let (seen_pool, unseen_pool) = if config.unseen_eval {
        let (s, u) = split_q_pool(&pool, config.seen_fraction, config.seed)
            .map_err(|e| Error::InsufficientQPool(e.to_string()))?;
        if s.len() < 2 || u.len() < 2 {
            return Err(Error::InsufficientQPool(format!(
                "seen/unseen pools of {} and {} matrices; need two each",
                s.len(),
                u.len()
            )));
        }
        (s, u)
    } else {
        if pool.len() < 2 {
            return Err(Error::InsufficientQPool(format!("{} distinct matrices; need two", pool.len())));
        }
        (pool, Vec::new())
    };

    let files = list_raw_images(raw_dir)?;
    let size = config.source_size();
    let mut images = Vec::new();
    let mut names = Vec::new();
    let mut sources = Vec::new();
    for path in &files {
        let img = match read_raster(path) {
            Ok(r) => r.to_luma().crop_to_blocks(),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let mut offsets = patch_offsets(img.width, img.height, size);
        if let Some(cap) = config.max_patches_per_image {
            offsets.truncate(cap);
        }
        if offsets.is_empty() {
            log::warn!("skipping {}: smaller than one {size}x{size} patch", path.display());
            continue;
        }
        let index = images.len();
        sources.extend(offsets.into_iter().map(|offset| SourcePatch { image: index, offset }));
        names.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
        images.push(img);
    }
    if sources.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} yields no {size}x{size} patch", raw_dir.display())));
    }

    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let counts = split_counts(sources.len(), config.splits);
    let mut split_of = vec![Split::Train; sources.len()];
    for (rank, &src) in order.iter().enumerate() {
        split_of[src] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }

    // one job per (source patch, pool variant); unseen variants reuse test sources
    let mut jobs: Vec<(usize, Split)> = (0..sources.len()).map(|i| (i, split_of[i])).collect();
    if config.unseen_eval {
        jobs.extend((0..sources.len()).filter(|&i| split_of[i] == Split::Test).map(|i| (i, Split::TestUnseen)));
    }

    let patch_dir = out_dir.join("patches");
    std::fs::create_dir_all(&patch_dir).map_err(Error::at_path(&patch_dir))?;
    let blocks = config.patch_size / 8;
    let records: Vec<Vec<PatchRecord>> = jobs
        .par_iter()
        .enumerate()
        .map(|(job, &(src, split))| -> Result<Vec<PatchRecord>> {
            let sp = &sources[src];
            let pool = if split == Split::TestUnseen { &unseen_pool } else { &seen_pool };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(job as u64 + 1);
            let (q1, q2) = pick_pair(pool, &mut rng);
            let region = images[sp.image].crop(sp.offset.0, sp.offset.1, size, size)?;
            let single = single_compress(&region, &q1)?;
            let double = single_compress(&decompress(&single, &q1), &q2)?;
            let mut out = Vec::with_capacity(2);
            for (label, plane, q) in [(Label::Single, single, q1), (Label::Double, double, q2)] {
                let plane = plane.sub_grid(blocks, blocks)?;
                let id = 2 * job as u64 + u64::from(label == Label::Double);
                let name = format!("patches/{id:07}.{}", config.storage.extension());
                store::save_patch(&out_dir.join(&name), &plane, &q, config.storage)?;
                out.push(PatchRecord {
                    id,
                    label,
                    split,
                    source: names[sp.image].clone(),
                    offset: sp.offset,
                    q1,
                    q2: (label == Label::Double).then_some(q2),
                    path: name,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let manifest = DatasetManifest {
        header: ManifestHeader {
            version: 1,
            config: config.clone(),
            images: images.len(),
            seen_pool,
            unseen_pool,
        },
        records: records.into_iter().flatten().collect(),
    };
    manifest.verify()?;
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_cover_everything() {
        assert_eq!(split_counts(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(split_counts(3, [0.0, 0.5, 0.5]), [0, 2, 1]);
        for n in 0..50 {
            assert_eq!(split_counts(n, [0.7, 0.2, 0.1]).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn pair_is_distinct() {
        let pool = default_q_pool();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (a, b) = pick_pair(&pool, &mut rng);
            assert_ne!(a, b);
        }
    }

    #[test]
    fn offsets_are_raster_order() {
        assert_eq!(patch_offsets(130, 70, 64), vec![(0, 0), (64, 0)]);
        assert!(patch_offsets(63, 500, 64).is_empty());
    }
}
