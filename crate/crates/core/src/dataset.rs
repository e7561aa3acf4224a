//! Image classification datasets: IDX and amat loaders, a synthetic
//! rectangles generator, seeded splits and mini-batching.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, expected {expected} bytes of payload, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Images `N x H x W x C` in `[0, 1]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DatasetError> {
        if images.shape().len() != 4 {
            return Err(DatasetError::Invalid(format!(
                "images must be N x H x W x C, got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(DatasetError::CountMismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DatasetError::Invalid(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `H x W x C`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples after a seeded shuffle.
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        self.subset(&idx)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut raw = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut raw)).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(path: &Path, bytes: &[u8], at: usize) -> Result<u32, DatasetError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DatasetError::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX image file (`u8`, rank 3) into `N x H x W x 1` values scaled by 1/255.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>, DatasetError> {
    let magic = be_u32(path, bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DatasetError::BadMagic {
            path: path.to_path_buf(),
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(path, bytes, 4)? as usize;
    let h = be_u32(path, bytes, 8)? as usize;
    let w = be_u32(path, bytes, 12)? as usize;
    let payload = &bytes[16..];
    let expected = n * h * w;
    if payload.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected].iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![n, h, w, 1], data).expect("length checked"))
}

/// Parses an IDX label file (`u8`, rank 1).
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>, DatasetError> {
    let magic = be_u32(path, bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DatasetError::BadMagic {
            path: path.to_path_buf(),
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(path, bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected: n,
            found: payload.len(),
        });
    }
    Ok(payload[..n].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label pair; gzip-compressed files are detected by their header.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DatasetError> {
    let images = parse_idx_images(images_path, &read_all(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read_all(labels_path)?)?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(images, labels, num_classes)
}

/// Loads an amat text file: per line, 784 pixel values then the label.
pub fn load_amat(path: &Path) -> Result<Dataset, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let parse_err = |reason: String| DatasetError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != PIXELS + 1 {
            return Err(parse_err(format!(
                "expected {} columns, found {}",
                PIXELS + 1,
                values.len()
            )));
        }
        for v in &values[..PIXELS] {
            let x: f32 = v.parse().map_err(|_| parse_err(format!("bad pixel value {v:?}")))?;
            if !(0.0..=1.0).contains(&x) {
                return Err(parse_err(format!("pixel value {x} outside [0, 1]")));
            }
            pixels.push(x);
        }
        let label: f64 = values[PIXELS]
            .parse()
            .map_err(|_| parse_err(format!("bad label {:?}", values[PIXELS])))?;
        if label < 0.0 || label.fract() != 0.0 {
            return Err(parse_err(format!("label {label} is not a class index")));
        }
        labels.push(label as usize);
    }
    let n = labels.len();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let images = Tensor::new(vec![n, SIDE, SIDE, 1], pixels).expect("length checked per line");
    Dataset::new(images, labels, num_classes)
}

/// One drawn rectangle: top-left corner and size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rectangle {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rectangle {
    pub fn label(&self) -> usize {
        usize::from(self.width > self.height)
    }

    fn draw(&self, image: &mut [f32]) {
        for dx in 0..self.width {
            image[self.y * SIDE + self.x + dx] = 1.0;
            image[(self.y + self.height - 1) * SIDE + self.x + dx] = 1.0;
        }
        for dy in 0..self.height {
            image[(self.y + dy) * SIDE + self.x] = 1.0;
            image[(self.y + dy) * SIDE + self.x + self.width - 1] = 1.0;
        }
    }
}

pub const RECT_MIN: usize = 3;
pub const RECT_MAX: usize = 25;

/// Draws a rectangle with `width != height`, both in `[3, 25]`, placed uniformly.
pub fn sample_rectangle<R: Rng + ?Sized>(rng: &mut R) -> Rectangle {
    let (width, height) = loop {
        let w = rng.gen_range(RECT_MIN..=RECT_MAX);
        let h = rng.gen_range(RECT_MIN..=RECT_MAX);
        if w != h {
            break (w, h);
        }
    };
    Rectangle {
        x: rng.gen_range(0..=SIDE - width),
        y: rng.gen_range(0..=SIDE - height),
        width,
        height,
    }
}

/// Synthetic rectangles: white outline on black, label 1 when wider than tall.
pub fn gen_rectangles_with_shapes<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Dataset, Vec<Rectangle>) {
    let mut pixels = vec![0.0f32; n * PIXELS];
    let mut rects = Vec::with_capacity(n);
    for image in pixels.chunks_mut(PIXELS) {
        let r = sample_rectangle(rng);
        r.draw(image);
        rects.push(r);
    }
    let labels = rects.iter().map(Rectangle::label).collect();
    let images = Tensor::new(vec![n, SIDE, SIDE, 1], pixels).expect("sized above");
    (Dataset::new(images, labels, 2).expect("labels are 0 or 1"), rects)
}

pub fn gen_rectangles<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Dataset {
    gen_rectangles_with_shapes(n, rng).0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub seed: u64,
}

/// Seeded shuffle split; the validation part holds `round(fraction * N)` samples.
pub fn split_train_val(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset), DatasetError> {
    let (train, val) = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

pub fn split_indices(n: usize, spec: SplitSpec) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    if !(spec.validation_fraction > 0.0 && spec.validation_fraction < 1.0) {
        return Err(DatasetError::Invalid(format!(
            "validation fraction {} outside (0, 1)",
            spec.validation_fraction
        )));
    }
    if n < 5 {
        return Err(DatasetError::Invalid(format!("cannot split {n} samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_val = (spec.validation_fraction * n as f64).round() as usize;
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Index batches covering every sample exactly once; the last may be short.
pub fn batch_indices<R: Rng + ?Sized>(n: usize, batch_size: usize, shuffle: bool, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(rng);
    }
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Materialised `(images, labels)` batches.
pub fn batches<R: Rng + ?Sized>(
    ds: &Dataset,
    batch_size: usize,
    shuffle: bool,
    rng: &mut R,
) -> Vec<(Tensor<f32>, Vec<usize>)> {
    batch_indices(ds.len(), batch_size, shuffle, rng)
        .into_iter()
        .map(|b| (ds.images.select_rows(&b), b.iter().map(|&i| ds.labels[i]).collect()))
        .collect()
}
