//! MNIST-family corpora: IDX ingestion, normalization to `[0, 1]` and seeded
//! TRAIN/CLE/VAL splits.
//!
//! A [`Corpus`] keeps the standard train partition first and the test
//! partition after it, so a source index is a stable position in
//! `0..corpus.len()`.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FmError, Result};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const NUM_CLASSES: usize = 10;

const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Fmnist,
}

impl DatasetId {
    /// Default width of the class-shared latent code.
    pub fn default_latent_dim(self) -> usize {
        match self {
            DatasetId::Mnist => 20,
            DatasetId::Fmnist => 10,
        }
    }

    fn default_mirror(self) -> &'static str {
        match self {
            DatasetId::Mnist => "https://ossci-datasets.s3.amazonaws.com/mnist/",
            DatasetId::Fmnist => "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Fmnist => "fmnist",
        })
    }
}

impl FromStr for DatasetId {
    type Err = FmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "fmnist" | "fashion-mnist" => Ok(DatasetId::Fmnist),
            other => Err(FmError::Contract(format!("unknown dataset {other:?} (expected mnist or fmnist)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Role {
    Train,
    Cle,
    Adv,
    Val,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "TRAIN",
            Role::Cle => "CLE",
            Role::Adv => "ADV",
            Role::Val => "VAL",
        })
    }
}

/// Images as rows of 784 values in `[0, 1]`, with labels and the corpus
/// index each row came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Array2<f32>,
    pub labels: Vec<usize>,
    pub source: Vec<usize>,
    pub role: Option<Role>,
}

impl ImageSet {
    pub fn new(images: Array2<f32>, labels: Vec<usize>, source: Vec<usize>, role: Option<Role>) -> Result<Self> {
        if images.ncols() != PIXELS {
            return Err(FmError::Contract(format!("images must have {PIXELS} columns, got {}", images.ncols())));
        }
        if images.nrows() != labels.len() || labels.len() != source.len() {
            return Err(FmError::Contract("images, labels and source indices differ in length".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(FmError::Contract(format!("label {bad} out of range")));
        }
        let set = ImageSet { images, labels, source, role };
        set.check_pixels()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> ArrayView1<'_, f32> {
        self.images.row(i)
    }

    /// Rows at the given positions (not source indices), in that order.
    pub fn subset(&self, rows: &[usize]) -> ImageSet {
        ImageSet {
            images: self.images.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            source: rows.iter().map(|&r| self.source[r]).collect(),
            role: self.role,
        }
    }

    pub fn check_pixels(&self) -> Result<()> {
        check_pixels(&self.images)
    }
}

/// Every value in `[0, 1]`; rows are flattened images.
pub fn check_pixels(images: &Array2<f32>) -> Result<()> {
    match images.iter().position(|v| !(0.0..=1.0).contains(v)) {
        None => Ok(()),
        Some(p) => Err(FmError::Contract(format!(
            "pixel {} of row {} is {} (outside [0,1])",
            p % images.ncols(),
            p / images.ncols(),
            images.iter().nth(p).copied().unwrap_or(f32::NAN)
        ))),
    }
}

/// A full corpus: the standard train partition followed by the test
/// partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dataset: DatasetId,
    pub set: ImageSet,
    pub train_len: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn test_len(&self) -> usize {
        self.len() - self.train_len
    }

    /// Gather corpus rows by source index.
    pub fn select(&self, indices: &[usize], role: Role) -> ImageSet {
        let mut s = self.set.subset(indices);
        s.role = Some(role);
        s
    }

    /// The train partition minus the given indices (used to fit the target
    /// classifier without touching VAL).
    pub fn train_partition_excluding(&self, exclude: &[usize]) -> ImageSet {
        let mut keep = vec![true; self.train_len];
        for &i in exclude {
            if i < self.train_len {
                keep[i] = false;
            }
        }
        let rows: Vec<usize> = (0..self.train_len).filter(|&i| keep[i]).collect();
        self.select(&rows, Role::Train)
    }

    pub fn test_partition(&self) -> ImageSet {
        let rows: Vec<usize> = (self.train_len..self.len()).collect();
        self.select(&rows, Role::Cle)
    }
}

pub fn dataset_dir(root: &Path, name: DatasetId) -> PathBuf {
    root.join(name.to_string())
}

/// Load the 70k-image corpus from IDX files under `root/<name>/` (plain or
/// `.gz`).
pub fn load_dataset(name: DatasetId, root: &Path) -> Result<Corpus> {
    let dir = dataset_dir(root, name);
    let (train_x, train_y) = load_pair(&dir, TRAIN_IMAGES, TRAIN_LABELS)?;
    let (test_x, test_y) = load_pair(&dir, TEST_IMAGES, TEST_LABELS)?;
    let train_len = train_y.len();
    let n = train_len + test_y.len();
    let mut images = Array2::<f32>::zeros((n, PIXELS));
    for (dst, &v) in images.iter_mut().zip(train_x.iter().chain(test_x.iter())) {
        *dst = v as f32 / 255.0;
    }
    let labels: Vec<usize> = train_y.iter().chain(test_y.iter()).map(|&l| l as usize).collect();
    let set = ImageSet::new(images, labels, (0..n).collect(), None)?;
    Ok(Corpus { dataset: name, set, train_len })
}

fn load_pair(dir: &Path, images: &str, labels: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let (ipath, idims, ibytes) = read_idx(dir, images)?;
    let (lpath, ldims, lbytes) = read_idx(dir, labels)?;
    if idims.len() != 3 || idims[1] != SIDE || idims[2] != SIDE {
        return Err(FmError::Ingest {
            file: ipath,
            reason: format!("expected n x 28 x 28 images, found dims {idims:?}"),
        });
    }
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(FmError::Ingest { file: lpath, reason: format!("{} labels for {} images", ldims[0], idims[0]) });
    }
    if let Some(bad) = lbytes.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(FmError::Ingest { file: lpath, reason: format!("label {bad} out of range") });
    }
    Ok((ibytes, lbytes))
}

fn resolve(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(FmError::Ingest { file: plain, reason: "file not found (also tried .gz)".into() })
}

/// Parse an IDX file of unsigned bytes, returning its path, dims and payload.
fn read_idx(dir: &Path, stem: &str) -> Result<(PathBuf, Vec<usize>, Vec<u8>)> {
    let path = resolve(dir, stem)?;
    let raw = fs::read(&path).map_err(|e| FmError::io(&path, e))?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| FmError::Ingest { file: path.clone(), reason: format!("gzip: {e}") })?;
        out
    } else {
        raw
    };
    let bad = |reason: String| FmError::Ingest { file: path.clone(), reason };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing IDX magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(bad(format!("element type {:#x} is not unsigned byte", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let dims: Vec<usize> =
        (0..ndim).map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize).collect();
    let expected: usize = dims.iter().product();
    if bytes.len() - header != expected {
        return Err(bad(format!("payload has {} bytes, dims {dims:?} need {expected}", bytes.len() - header)));
    }
    Ok((path, dims, bytes[header..].to_vec()))
}

fn write_idx(path: &Path, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&[0, 0, 0x08, dims.len() as u8]);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    let mut f = fs::File::create(path).map_err(|e| FmError::io(path, e))?;
    f.write_all(&out).map_err(|e| FmError::io(path, e))
}

/// Write a corpus as IDX files under `root/<name>/`, quantizing pixels to
/// bytes. [`load_dataset`] reads it back.
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    let dir = dataset_dir(root, corpus.dataset);
    fs::create_dir_all(&dir).map_err(|e| FmError::io(&dir, e))?;
    let parts =
        [(0..corpus.train_len, TRAIN_IMAGES, TRAIN_LABELS), (corpus.train_len..corpus.len(), TEST_IMAGES, TEST_LABELS)];
    for (rows, images, labels) in parts {
        let n = rows.len();
        let mut pix = Vec::with_capacity(n * PIXELS);
        let mut lab = Vec::with_capacity(n);
        for i in rows {
            pix.extend(corpus.set.image(i).iter().map(|&v| (v * 255.0).round() as u8));
            lab.push(corpus.set.labels[i] as u8);
        }
        write_idx(&dir.join(images), &[n, SIDE, SIDE], &pix)?;
        write_idx(&dir.join(labels), &[n], &lab)?;
    }
    Ok(())
}

/// Download the four gzipped IDX files into `root/<name>/`. Existing files
/// are kept.
pub fn fetch_dataset(name: DatasetId, root: &Path, mirror: Option<&str>) -> Result<()> {
    let dir = dataset_dir(root, name);
    fs::create_dir_all(&dir).map_err(|e| FmError::io(&dir, e))?;
    let base = mirror.unwrap_or(name.default_mirror());
    for stem in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
        if resolve(&dir, stem).is_ok() {
            continue;
        }
        let url = format!("{}/{stem}.gz", base.trim_end_matches('/'));
        let target = dir.join(format!("{stem}.gz"));
        log::info!("fetching {url}");
        let resp = ureq::get(&url)
            .call()
            .map_err(|e| FmError::Ingest { file: target.clone(), reason: format!("{url}: {e}") })?;
        let mut body = Vec::new();
        resp.into_body().into_reader().read_to_end(&mut body).map_err(|e| FmError::io(&target, e))?;
        fs::write(&target, body).map_err(|e| FmError::io(&target, e))?;
    }
    load_dataset(name, root).map(|_| ())
}

/// Install a corpus from a local directory into `root/<name>/`.
///
/// `src` may hold the four IDX files (plain or gzipped), or per-class JSON
/// files `0.json` .. `9.json` of the form `{"data": [[784 bytes], ...]}`.
/// For the JSON layout the last 1000 images of every class form the test
/// partition and classes are interleaved round-robin.
pub fn import_dataset(name: DatasetId, src: &Path, root: &Path) -> Result<()> {
    let dir = dataset_dir(root, name);
    fs::create_dir_all(&dir).map_err(|e| FmError::io(&dir, e))?;
    if src.join("0.json").is_file() {
        return import_class_json(src, &dir);
    }
    for stem in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
        let from = resolve(src, stem)?;
        let to = dir.join(from.file_name().unwrap());
        fs::copy(&from, &to).map_err(|e| FmError::io(&to, e))?;
    }
    Ok(())
}

fn import_class_json(src: &Path, dir: &Path) -> Result<()> {
    #[derive(Deserialize)]
    struct ClassFile {
        data: Vec<Vec<u8>>,
    }
    const TEST_PER_CLASS: usize = 1000;
    let mut train: Vec<Vec<Vec<u8>>> = Vec::new();
    let mut test: Vec<Vec<Vec<u8>>> = Vec::new();
    for c in 0..NUM_CLASSES {
        let path = src.join(format!("{c}.json"));
        let text = fs::read_to_string(&path).map_err(|e| FmError::io(&path, e))?;
        let parsed: ClassFile =
            serde_json::from_str(&text).map_err(|e| FmError::Ingest { file: path.clone(), reason: e.to_string() })?;
        let mut rows: Vec<Vec<u8>> = parsed.data.into_iter().filter(|r| !r.is_empty()).collect();
        if let Some(r) = rows.iter().find(|r| r.len() != PIXELS) {
            return Err(FmError::Ingest { file: path, reason: format!("image with {} pixels", r.len()) });
        }
        if rows.len() <= TEST_PER_CLASS {
            return Err(FmError::Ingest { file: path, reason: format!("only {} images", rows.len()) });
        }
        test.push(rows.split_off(rows.len() - TEST_PER_CLASS));
        train.push(rows);
    }
    for (per_class, images, labels) in [(&train, TRAIN_IMAGES, TRAIN_LABELS), (&test, TEST_IMAGES, TEST_LABELS)] {
        let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
        let mut pix = Vec::new();
        let mut lab = Vec::new();
        for i in 0..longest {
            for (c, rows) in per_class.iter().enumerate() {
                if let Some(r) = rows.get(i) {
                    pix.extend_from_slice(r);
                    lab.push(c as u8);
                }
            }
        }
        write_idx(&dir.join(images), &[lab.len(), SIDE, SIDE], &pix)?;
        write_idx(&dir.join(labels), &[lab.len()], &lab)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub cle: usize,
    pub val: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { train: 20000, cle: 5000, val: 2000 }
    }
}

impl SplitSizes {
    pub fn desk() -> Self {
        SplitSizes { train: 10000, cle: 1000, val: 1000 }
    }
}

impl FromStr for SplitSizes {
    type Err = FmError;

    /// `train,cle,val`, e.g. `20000,5000,2000`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FmError::Contract(format!("split sizes {s:?}: {e}")))?;
        match parts[..] {
            [train, cle, val] => Ok(SplitSizes { train, cle, val }),
            _ => Err(FmError::Contract(format!("split sizes {s:?}: expected train,cle,val"))),
        }
    }
}

/// Source indices of each role. TRAIN and VAL come from the train
/// partition, CLE from the test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub seed: u64,
    pub train: Vec<usize>,
    pub cle: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn make_splits(corpus: &Corpus, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    if sizes.train + sizes.val > corpus.train_len {
        return Err(FmError::Contract(format!(
            "TRAIN {} + VAL {} exceed the {}-image train partition",
            sizes.train, sizes.val, corpus.train_len
        )));
    }
    if sizes.cle > corpus.test_len() {
        return Err(FmError::Contract(format!(
            "CLE {} exceeds the {}-image test partition",
            sizes.cle,
            corpus.test_len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_part: Vec<usize> = (0..corpus.train_len).collect();
    train_part.shuffle(&mut rng);
    rng.set_stream(1);
    let mut test_part: Vec<usize> = (corpus.train_len..corpus.len()).collect();
    test_part.shuffle(&mut rng);
    Ok(Splits {
        seed,
        train: train_part[..sizes.train].to_vec(),
        val: train_part[sizes.train..sizes.train + sizes.val].to_vec(),
        cle: test_part[..sizes.cle].to_vec(),
    })
}

impl Splits {
    pub fn indices(&self, role: Role) -> &[usize] {
        match role {
            Role::Train => &self.train,
            Role::Cle => &self.cle,
            Role::Val => &self.val,
            Role::Adv => &[],
        }
    }

    pub fn to_manifest(&self) -> String {
        let mut s = format!("# split manifest v1\nseed {}\n", self.seed);
        for role in [Role::Train, Role::Cle, Role::Val] {
            s.push_str(&format!("[{role}]\n"));
            for i in self.indices(role) {
                s.push_str(&format!("{i}\n"));
            }
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |m: String| FmError::Contract(format!("split manifest: {m}"));
        let mut seed = None;
        let mut current: Option<Role> = None;
        let (mut train, mut cle, mut val) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(v) = line.strip_prefix("seed ") {
                seed = Some(v.parse().map_err(|_| bad(format!("line {}: bad seed", n + 1)))?);
            } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(match name {
                    "TRAIN" => Role::Train,
                    "CLE" => Role::Cle,
                    "VAL" => Role::Val,
                    other => return Err(bad(format!("unknown role {other}"))),
                });
            } else {
                let i: usize = line.parse().map_err(|_| bad(format!("line {}: {line:?}", n + 1)))?;
                match current {
                    Some(Role::Train) => train.push(i),
                    Some(Role::Cle) => cle.push(i),
                    Some(Role::Val) => val.push(i),
                    _ => return Err(bad(format!("line {}: index before any role header", n + 1))),
                }
            }
        }
        Ok(Splits { seed: seed.ok_or_else(|| bad("missing seed".into()))?, train, cle, val })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest()).map_err(|e| FmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FmError::io(path, e))?;
        Self::from_manifest(&text)
    }
}

/// A small synthetic corpus (`per_class` blobs per class in each partition)
/// for tests and examples that must not depend on downloaded data.
pub fn synthetic_corpus(per_class_train: usize, per_class_test: usize, seed: u64) -> Corpus {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = NUM_CLASSES * (per_class_train + per_class_test);
    let mut images = Array2::<f32>::zeros((total, PIXELS));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for per_class in [per_class_train, per_class_test] {
        for i in 0..per_class * NUM_CLASSES {
            let c = i % NUM_CLASSES;
            // A bright 6x6 square whose position encodes the class, with jitter.
            let (by, bx) = (4 + (c / 5) * 12, 2 + (c % 5) * 5);
            let (dy, dx) = (rng.random_range(0..3), rng.random_range(0..2));
            let mut img = images.row_mut(row);
            for y in 0..6 {
                for x in 0..6 {
                    img[(by + dy + y) * SIDE + bx + dx + x] = rng.random_range(0.7..1.0);
                }
            }
            for v in img.iter_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(0.0..0.05);
                }
            }
            labels.push(c);
            row += 1;
        }
    }
    let set = ImageSet::new(images, labels, (0..total).collect(), None).expect("synthetic corpus is valid");
    Corpus { dataset: DatasetId::Mnist, set, train_len: NUM_CLASSES * per_class_train }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..2 * PIXELS).map(|i| (i % 256) as u8).collect();
        write_idx(&dir.path().join(TRAIN_IMAGES), &[2, SIDE, SIDE], &payload).unwrap();
        let (_, dims, bytes) = read_idx(dir.path(), TRAIN_IMAGES).unwrap();
        assert_eq!(dims, vec![2, SIDE, SIDE]);
        assert_eq!(bytes, payload);
    }

    #[test]
    fn truncated_idx_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(TRAIN_LABELS), [0u8, 0, 8, 1, 0, 0, 0, 9, 1, 2]).unwrap();
        let err = read_idx(dir.path(), TRAIN_LABELS).unwrap_err();
        assert!(err.to_string().contains(TRAIN_LABELS), "{err}");
    }

    #[test]
    fn split_sizes_parse() {
        assert_eq!("20000,5000,2000".parse::<SplitSizes>().unwrap(), SplitSizes::default());
        assert!("1,2".parse::<SplitSizes>().is_err());
    }
}
