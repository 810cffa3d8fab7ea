//! Dataset loading and splitting.
//!
//! MNIST and Fashion-MNIST come as IDX files (big-endian, optionally gzipped).
//! small-NORB comes as little-endian binary matrices; its 96×96 stereo pairs
//! are average-pooled 3×3 down to 2×32×32. Pixels are scaled by 1/255.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{avg_pool, ImageBatch};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const NORB_BYTE_MAGIC: u32 = 0x1E3D_4C55;
pub const NORB_INT_MAGIC: u32 = 0x1E3D_4C54;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: ImageBatch, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.n() != labels.len() {
            return Err(Error::input(format!("{} images but {} labels", images.n(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            name: self.name.clone(),
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// The first `limit` samples (all when `limit` is 0 or too large).
    pub fn truncate(self, limit: usize) -> Result<Dataset> {
        if limit == 0 || limit >= self.len() {
            return Ok(self);
        }
        let idx: Vec<usize> = (0..limit).collect();
        self.select(&idx)
    }

    /// Samples per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Reads a whole file, inflating it if it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, 0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, offset as u64, "truncated header"))
}

fn le_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, offset as u64, "truncated header"))
}

fn check_payload(bytes: &[u8], header: usize, expected: usize, path: &Path) -> Result<()> {
    let have = bytes.len() - header;
    if have < expected {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("payload truncated: {have} of {expected} bytes"),
        ));
    }
    if have > expected {
        return Err(Error::format(
            path,
            (header + expected) as u64,
            format!("{} trailing bytes", have - expected),
        ));
    }
    Ok(())
}

/// Parses an IDX image file into `n × 1 × rows × cols`, scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<ImageBatch> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(path, 4, "zero dimension in header"));
    }
    check_payload(bytes, 16, n * rows * cols, path)?;
    let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    ImageBatch::new([n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    check_payload(bytes, 8, n, path)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair (10 classes).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    if images.n() != labels.len() {
        return Err(Error::format(
            labels_path,
            4,
            format!("{} labels for {} images", labels.len(), images.n()),
        ));
    }
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, images, labels, 10)
}

/// Header of a small-NORB matrix file: magic and dimensions (at least three
/// dimension slots are always stored).
fn norb_header(bytes: &[u8], path: &Path, magic: u32) -> Result<(Vec<usize>, usize)> {
    let found = le_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::format(path, 0, format!("bad NORB magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndim = le_u32(bytes, 4, path)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::format(path, 4, format!("implausible dimension count {ndim}")));
    }
    let slots = ndim.max(3);
    let dims = (0..slots)
        .map(|i| le_u32(bytes, 8 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok((dims[..ndim].to_vec(), 8 + 4 * slots))
}

/// Parses small-NORB image bytes (`n × 2 × 96 × 96`) and pools them to 32×32.
pub fn parse_norb_images(bytes: &[u8], path: &Path) -> Result<ImageBatch> {
    let (dims, header) = norb_header(bytes, path, NORB_BYTE_MAGIC)?;
    if dims.len() != 4 || dims[1] != 2 || dims[2] != dims[3] || dims[2] % 3 != 0 {
        return Err(Error::format(path, 8, format!("unexpected image dims {dims:?}")));
    }
    let (n, side) = (dims[0], dims[2]);
    check_payload(bytes, header, n * 2 * side * side, path)?;
    let data = bytes[header..].iter().map(|&b| b as f64 / 255.0).collect();
    avg_pool(&ImageBatch::new([n, 2, side, side], data)?, 3, 3)
}

pub fn parse_norb_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let (dims, header) = norb_header(bytes, path, NORB_INT_MAGIC)?;
    if dims.len() != 1 {
        return Err(Error::format(path, 4, format!("unexpected label dims {dims:?}")));
    }
    let n = dims[0];
    check_payload(bytes, header, 4 * n, path)?;
    (0..n)
        .map(|i| {
            let off = header + 4 * i;
            let v = le_u32(bytes, off, path)? as usize;
            if v >= 5 {
                Err(Error::format(path, off as u64, format!("category {v} out of range")))
            } else {
                Ok(v)
            }
        })
        .collect()
}

/// Loads a small-NORB `-dat.mat` / `-cat.mat` pair (5 classes, 2×32×32).
pub fn load_norb(dat_path: &Path, cat_path: &Path) -> Result<Dataset> {
    let images = parse_norb_images(&read_maybe_gz(dat_path)?, dat_path)?;
    let labels = parse_norb_labels(&read_maybe_gz(cat_path)?, cat_path)?;
    if images.n() != labels.len() {
        return Err(Error::format(cat_path, 8, format!("{} labels for {} images", labels.len(), images.n())));
    }
    Dataset::new("norb", images, labels, 5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn first_existing(candidates: &[PathBuf]) -> PathBuf {
    candidates
        .iter()
        .find(|p| p.exists())
        .cloned()
        .unwrap_or_else(|| candidates[0].clone())
}

/// Loads `name` (`mnist`, `fashion` or `norb`) from the standard layout under `dir`:
/// `dir/<name>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` and
/// `dir/norb/smallnorb-5x46789x9x18x6x2x96x96-{training,testing}-{dat,cat}.mat[.gz]`.
pub fn load_named(dir: &Path, name: &str, split: Split) -> Result<Dataset> {
    let with_gz = |p: PathBuf| {
        let mut gz = p.clone().into_os_string();
        gz.push(".gz");
        first_existing(&[p, PathBuf::from(gz)])
    };
    let mut ds = match name {
        "mnist" | "fashion" => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let base = dir.join(name);
            load_idx(
                &with_gz(base.join(format!("{prefix}-images-idx3-ubyte"))),
                &with_gz(base.join(format!("{prefix}-labels-idx1-ubyte"))),
            )?
        }
        "norb" => {
            let part = match split {
                Split::Train => "training",
                Split::Test => "testing",
            };
            let base = dir.join("norb");
            let stem = format!("smallnorb-5x46789x9x18x6x2x96x96-{part}");
            load_norb(
                &with_gz(base.join(format!("{stem}-dat.mat"))),
                &with_gz(base.join(format!("{stem}-cat.mat"))),
            )?
        }
        other => return Err(Error::config(format!("unknown dataset `{other}`"))),
    };
    ds.name = name.to_string();
    Ok(ds)
}

/// Labeled, unlabeled and remaining sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemiSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub remainder: Vec<usize>,
}

/// Class-stratified labeled draw, then an unlabeled draw from the rest.
///
/// Each class contributes `n_labeled / classes` samples and the first
/// `n_labeled % classes` classes one more. Within a class, indices are
/// shuffled with `rng` (class order ascending); the unlabeled set is the head
/// of a shuffle of everything not labeled.
pub fn split_semi<R: Rng + ?Sized>(ds: &Dataset, n_labeled: usize, n_unlabeled: usize, rng: &mut R) -> Result<SemiSplit> {
    let n = ds.len();
    if n_labeled + n_unlabeled > n {
        return Err(Error::input(format!(
            "{n_labeled} labeled + {n_unlabeled} unlabeled exceeds {n} samples"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut taken = vec![false; n];
    let mut labeled = Vec::with_capacity(n_labeled);
    for (c, members) in by_class.iter_mut().enumerate() {
        let quota = n_labeled / ds.classes + usize::from(c < n_labeled % ds.classes);
        if quota > members.len() {
            return Err(Error::input(format!(
                "class {c} has {} samples, {quota} labeled requested",
                members.len()
            )));
        }
        members.shuffle(rng);
        for &i in &members[..quota] {
            taken[i] = true;
            labeled.push(i);
        }
    }
    labeled.sort_unstable();
    let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    rest.shuffle(rng);
    let mut unlabeled = rest[..n_unlabeled].to_vec();
    let mut remainder = rest[n_unlabeled..].to_vec();
    unlabeled.sort_unstable();
    remainder.sort_unstable();
    Ok(SemiSplit {
        labeled,
        unlabeled,
        remainder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn idx_images(n: u32, side: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, side, side] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..(n * side * side) as usize).map(fill));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab.gz");
        std::fs::write(&ip, idx_images(3, 4, |i| (i % 256) as u8)).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&idx_labels(&[1, 9, 0])).unwrap();
        std::fs::write(&lp, gz.finish().unwrap()).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), [3, 1, 4, 4]);
        assert_eq!(ds.labels, vec![1, 9, 0]);
        assert_eq!(ds.images.data()[5], 5.0 / 255.0);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let p = Path::new("labels");
        let mut short = idx_labels(&[1, 2, 3]);
        short.pop();
        match parse_idx_labels(&short, p) {
            Err(Error::Format { offset, path, .. }) => {
                assert_eq!(offset, 10);
                assert_eq!(path, p);
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad = idx_images(1, 2, |_| 0);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad, p), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_images(&bad[..6], p), Err(Error::Format { .. })));
    }

    fn norb_bytes(n: usize, fill: u8) -> (Vec<u8>, Vec<u8>) {
        let mut dat = Vec::new();
        for v in [NORB_BYTE_MAGIC, 4, n as u32, 2, 96, 96] {
            dat.extend_from_slice(&v.to_le_bytes());
        }
        dat.extend(std::iter::repeat(fill).take(n * 2 * 96 * 96));
        let mut cat = Vec::new();
        for v in [NORB_INT_MAGIC, 1, n as u32, 1, 1] {
            cat.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..n {
            cat.extend_from_slice(&((i % 5) as u32).to_le_bytes());
        }
        (dat, cat)
    }

    #[test]
    fn norb_constant_image_downsamples_to_constant() {
        let (dat, cat) = norb_bytes(10, 51);
        let p = Path::new("norb");
        let images = parse_norb_images(&dat, p).unwrap();
        assert_eq!(images.shape(), [10, 2, 32, 32]);
        assert!(images.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let labels = parse_norb_labels(&cat, p).unwrap();
        let ds = Dataset::new("norb", images, labels, 5).unwrap();
        assert_eq!(ds.histogram(), vec![2; 5]);
        let mut bad = dat.clone();
        bad[0] ^= 1;
        assert!(matches!(parse_norb_images(&bad, p), Err(Error::Format { offset: 0, .. })));
    }

    fn toy(n: usize, classes: usize) -> Dataset {
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % classes).collect();
        Dataset::new("toy", ImageBatch::zeros([n, 1, 2, 2]), labels, classes).unwrap()
    }

    #[test]
    fn semi_split_is_stratified_and_deterministic() {
        let ds = toy(1000, 10);
        let a = split_semi(&ds, 100, 500, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = split_semi(&ds, 100, 500, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let counts = ds.select(&a.labeled).unwrap().histogram();
        assert_eq!(counts, vec![10; 10]);
        assert_eq!(a.unlabeled.len(), 500);
        assert_eq!(a.remainder.len(), 400);
        let mut all: Vec<usize> = a.labeled.iter().chain(&a.unlabeled).chain(&a.remainder).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        let odd = split_semi(&ds, 13, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let h = ds.select(&odd.labeled).unwrap().histogram();
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
        let full = split_semi(&ds, 1000, 0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(full.labeled, (0..1000).collect::<Vec<_>>());
        assert!(split_semi(&ds, 900, 200, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }
}
