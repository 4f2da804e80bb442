//! IDX ingestion, digit-pair tasks, and client partitioning.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_PARTITION};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Images scaled to `[0, 1]` with their digit labels.
#[derive(Clone, Debug)]
pub struct RawDataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: RawDataset,
    pub test: RawDataset,
}

impl Mnist {
    /// Loads the four canonical uncompressed IDX files from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Mnist> {
        let dir = dir.as_ref();
        Ok(Mnist {
            train: load_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?,
            test: load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?,
        })
    }

    pub fn files_in(dir: impl AsRef<Path>) -> [PathBuf; 4] {
        let d = dir.as_ref();
        [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS].map(|f| d.join(f))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn check_header(bytes: &[u8], path: &Path, magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            detail: "missing header".into(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: format!("{magic:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            detail: format!("header needs {header_len} bytes, file has {}", bytes.len()),
        });
    }
    Ok(())
}

/// Parses big-endian IDX image and label files; pixels are scaled by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(ip)?;
    let lab = read_file(lp)?;
    parse_idx(&img, ip, &lab, lp)
}

pub fn parse_idx(img: &[u8], ip: &Path, lab: &[u8], lp: &Path) -> Result<RawDataset> {
    check_header(img, ip, IMAGE_MAGIC, 16)?;
    check_header(lab, lp, LABEL_MAGIC, 8)?;
    let n_img = be_u32(img, 4) as usize;
    let (rows, cols) = (be_u32(img, 8) as usize, be_u32(img, 12) as usize);
    let n_lab = be_u32(lab, 4) as usize;
    let want = 16 + n_img * rows * cols;
    if img.len() < want {
        return Err(Error::Truncated {
            path: ip.display().to_string(),
            detail: format!("expected {want} bytes, found {}", img.len()),
        });
    }
    if lab.len() < 8 + n_lab {
        return Err(Error::Truncated {
            path: lp.display().to_string(),
            detail: format!("expected {} bytes, found {}", 8 + n_lab, lab.len()),
        });
    }
    if n_img != n_lab {
        return Err(Error::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let labels = lab[8..8 + n_lab].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("{}: label {bad} outside 0..=9", lp.display())));
    }
    let pixels = img[16..want].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(RawDataset {
        images: Tensor::new(&[n_img, 1, rows, cols], pixels)?,
        labels,
    })
}

/// One split of a digit-pair task; labels are 0 for the first digit and 1 for the second.
#[derive(Clone, Debug)]
pub struct TaskSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl TaskSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TaskDataset {
    /// The task distinguishes `first_digit` from `first_digit + 1`.
    pub first_digit: u8,
    pub train: TaskSplit,
    pub test: TaskSplit,
}

/// Maps a 1-based task index (1..=5) to its first digit: 1 → 0, 2 → 2, ..., 5 → 8.
pub fn task_first_digit(task: usize) -> Result<u8> {
    if !(1..=5).contains(&task) {
        return Err(Error::invalid(format!("task must be in 1..=5, got {task}")));
    }
    Ok(2 * (task as u8 - 1))
}

fn filter_pair(raw: &RawDataset, d: u8) -> Result<TaskSplit> {
    let keep: Vec<usize> = (0..raw.len())
        .filter(|&i| raw.labels[i] == d || raw.labels[i] == d + 1)
        .collect();
    Ok(TaskSplit {
        images: raw.images.gather_rows(&keep)?,
        labels: keep.iter().map(|&i| (raw.labels[i] - d) as usize).collect(),
    })
}

/// Filters digits `{d, d+1}` from both splits; `d` must be even and at most 8.
pub fn make_pair_task(raw: &Mnist, d: u8) -> Result<TaskDataset> {
    if !d.is_multiple_of(2) || d > 8 {
        return Err(Error::invalid(format!(
            "pair task first digit must be one of 0, 2, 4, 6, 8; got {d}"
        )));
    }
    Ok(TaskDataset {
        first_digit: d,
        train: filter_pair(&raw.train, d)?,
        test: filter_pair(&raw.test, d)?,
    })
}

/// Client id → sample indices (ascending).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }
}

/// Largest allowed gap between a shard's class share and the global share.
pub const IID_LABEL_TOLERANCE: f64 = 0.05;
pub const IID_MAX_ATTEMPTS: usize = 10;

fn class_shares(labels: &[usize], idx: impl Iterator<Item = usize>, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut n = 0usize;
    for i in idx {
        counts[labels[i]] += 1;
        n += 1;
    }
    counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect()
}

fn check_partition_args(samples: usize, n_clients: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(Error::invalid("at least one client is required"));
    }
    if n_clients > samples {
        return Err(Error::invalid(format!(
            "{n_clients} clients but only {samples} samples"
        )));
    }
    Ok(())
}

fn split_contiguous(order: &[usize], n_clients: usize) -> Vec<Vec<usize>> {
    let (base, extra) = (order.len() / n_clients, order.len() % n_clients);
    let mut shards = Vec::with_capacity(n_clients);
    let mut at = 0;
    for c in 0..n_clients {
        let size = base + usize::from(c < extra);
        shards.push(order[at..at + size].to_vec());
        at += size;
    }
    shards
}

/// Seeded IID split into near-equal shards whose class shares stay within
/// [`IID_LABEL_TOLERANCE`] of the global shares, reshuffling up to
/// [`IID_MAX_ATTEMPTS`] times.
pub fn partition_iid(labels: &[usize], n_clients: usize, seed: u64) -> Result<Partition> {
    check_partition_args(labels.len(), n_clients)?;
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let global = class_shares(labels, 0..labels.len(), classes);
    let mut rng = stream_rng(seed, STREAM_PARTITION);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..IID_MAX_ATTEMPTS {
        order.shuffle(&mut rng);
        let mut shards = split_contiguous(&order, n_clients);
        let balanced = shards.iter().all(|s| {
            class_shares(labels, s.iter().copied(), classes)
                .iter()
                .zip(&global)
                .all(|(a, b)| (a - b).abs() <= IID_LABEL_TOLERANCE)
        });
        if balanced {
            shards.iter_mut().for_each(|s| s.sort_unstable());
            return Ok(Partition { shards });
        }
    }
    Err(Error::invalid(format!(
        "no label-balanced split into {n_clients} shards after {IID_MAX_ATTEMPTS} attempts"
    )))
}

/// Label-sorted split: each client sees a contiguous run of the label order.
pub fn partition_by_label(labels: &[usize], n_clients: usize) -> Result<Partition> {
    check_partition_args(labels.len(), n_clients)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let mut shards = split_contiguous(&order, n_clients);
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(Partition { shards })
}
