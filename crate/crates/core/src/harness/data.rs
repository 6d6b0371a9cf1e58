//! Datasets and user geometry.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fl_core::Dataset;

/// Environment variable naming the directory that holds the IDX digit files.
pub const DATA_DIR_ENV: &str = "FLWIRE_DATA_DIR";
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const NUM_CLASSES: usize = 10;

/// Distances of `num_users` points placed uniformly in a disk, clamped to
/// at least `min_distance`.
pub fn disk_distances<R: Rng + ?Sized>(num_users: usize, radius: f64, min_distance: f64, rng: &mut R) -> Vec<f64> {
    (0..num_users)
        .map(|_| (radius * rng.random::<f64>().sqrt()).max(min_distance))
        .collect()
}

/// `per_user` samples for each of `users` users with `x ~ U[0, 1]` and
/// `y = sin(2πx)`.
pub fn generate_sin_dataset<R: Rng + ?Sized>(users: usize, per_user: usize, rng: &mut R) -> Result<Vec<Dataset>> {
    if per_user == 0 {
        return Err(Error::Config("samples per user must be at least 1".into()));
    }
    (0..users)
        .map(|_| {
            let xs: Vec<Vec<f64>> = (0..per_user).map(|_| vec![rng.random::<f64>()]).collect();
            let ys = xs.iter().map(|x| vec![sin_target(x[0])]).collect();
            Dataset::new(xs, ys)
        })
        .collect()
}

pub fn sin_target(x: f64) -> f64 {
    (2.0 * std::f64::consts::PI * x).sin()
}

/// `n` evenly spaced points of `sin(2πx)` on `[0, 1]`.
pub fn sin_test_grid(n: usize) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config("test grid needs at least 2 points".into()));
    }
    let xs: Vec<Vec<f64>> = (0..n).map(|k| vec![k as f64 / (n - 1) as f64]).collect();
    let ys = xs.iter().map(|x| vec![sin_target(x[0])]).collect();
    Dataset::new(xs, ys)
}

/// Decoded IDX image file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// Pixel values scaled to `[0, 1]`, one row-major vector per image.
    pub pixels: Vec<Vec<f64>>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        if end > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!("file ends inside the {what} field"),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..end].try_into().expect("4 bytes"));
        self.pos = end;
        Ok(v)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!("file ends inside the {what} ({n} bytes expected from offset {})", self.pos),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let m = self.u32("magic number")?;
        if m != expected {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad magic number 0x{m:08x}, expected 0x{expected:08x}"),
            });
        }
        Ok(())
    }
}

/// Parses an IDX3 unsigned-byte image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut c = Cursor { bytes, pos: 0 };
    c.magic(IMAGES_MAGIC)?;
    let count = c.u32("image count")? as usize;
    let rows = c.u32("row count")? as usize;
    let cols = c.u32("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            offset: 8,
            message: format!("degenerate image size {rows}×{cols}"),
        });
    }
    let body = c.take(count * rows * cols, "pixel data")?;
    let pixels = body
        .chunks_exact(rows * cols)
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    Ok(IdxImages { rows, cols, pixels })
}

/// Parses an IDX1 unsigned-byte label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { bytes, pos: 0 };
    c.magic(LABELS_MAGIC)?;
    let count = c.u32("label count")? as usize;
    let labels = c.take(count, "label data")?.to_vec();
    if let Some(k) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Parse {
            offset: (8 + k) as u64,
            message: format!("label {} out of range", labels[k]),
        });
    }
    Ok(labels)
}

fn one_hot(label: usize) -> Vec<f64> {
    let mut y = vec![0.0; NUM_CLASSES];
    y[label] = 1.0;
    y
}

/// Digit data split across users plus a held-out test set.
#[derive(Debug, Clone)]
pub struct DigitData {
    pub users: Vec<Dataset>,
    pub test: Dataset,
    /// True when generated rather than read from IDX files.
    pub synthetic: bool,
    /// Pixels per image.
    pub input_len: usize,
}

/// Reads the IDX training files and deals `sizes[i]` samples to user `i`
/// after a seeded shuffle; the next `test_count` shuffled samples form the
/// test set (empty when `test_count` is 0).
pub fn load_idx_digits<R: Rng + ?Sized>(
    images: &Path,
    labels: &Path,
    sizes: &[usize],
    test_count: usize,
    rng: &mut R,
) -> Result<DigitData> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let imgs = parse_idx_images(&read(images)?)?;
    let labs = parse_idx_labels(&read(labels)?)?;
    if imgs.pixels.len() != labs.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            imgs.pixels.len(),
            labs.len()
        )));
    }
    let needed: usize = sizes.iter().sum::<usize>() + test_count;
    if needed > labs.len() {
        return Err(Error::Data(format!("{needed} samples requested, file holds {}", labs.len())));
    }
    let mut order: Vec<usize> = (0..labs.len()).collect();
    order.shuffle(rng);
    let take = |idx: &[usize]| {
        Dataset::new(
            idx.iter().map(|&k| imgs.pixels[k].clone()).collect(),
            idx.iter().map(|&k| one_hot(labs[k] as usize)).collect(),
        )
    };
    let mut start = 0;
    let mut users = Vec::with_capacity(sizes.len());
    for &k in sizes {
        users.push(take(&order[start..start + k])?);
        start += k;
    }
    let test = if test_count == 0 {
        Dataset::default()
    } else {
        take(&order[start..start + test_count])?
    };
    Ok(DigitData {
        users,
        test,
        synthetic: false,
        input_len: imgs.rows * imgs.cols,
    })
}

/// Synthetic stand-in for handwritten digits: every class has a random
/// binary template smoothed by a 3×3 box blur; a sample is its class
/// template shifted by up to one pixel with uniform pixel noise of
/// amplitude `noise`, clipped to `[0, 1]`. Labels are uniform.
pub fn synthetic_digits<R: Rng + ?Sized>(
    side: usize,
    noise: f64,
    sizes: &[usize],
    test_count: usize,
    template_rng: &mut R,
    sample_rng: &mut R,
) -> Result<DigitData> {
    if side < 3 {
        return Err(Error::Config(format!("synthetic image side must be at least 3, got {side}")));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::Config(format!("synthetic noise must be non-negative, got {noise}")));
    }
    let templates: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| {
            let raw: Vec<f64> = (0..side * side).map(|_| f64::from(u8::from(template_rng.random_bool(0.4)))).collect();
            box_blur(&raw, side)
        })
        .collect();
    let mut draw = |n: usize| -> Result<Dataset> {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let label = sample_rng.random_range(0..NUM_CLASSES);
            let dr = sample_rng.random_range(-1i64..=1);
            let dc = sample_rng.random_range(-1i64..=1);
            let t = &templates[label];
            let mut x = vec![0.0; side * side];
            for r in 0..side {
                for c in 0..side {
                    let (sr, sc) = (r as i64 - dr, c as i64 - dc);
                    let base = if (0..side as i64).contains(&sr) && (0..side as i64).contains(&sc) {
                        t[sr as usize * side + sc as usize]
                    } else {
                        0.0
                    };
                    x[r * side + c] = (base + noise * sample_rng.random_range(-1.0..1.0)).clamp(0.0, 1.0);
                }
            }
            xs.push(x);
            ys.push(one_hot(label));
        }
        Dataset::new(xs, ys)
    };
    let users = sizes.iter().map(|&k| draw(k)).collect::<Result<Vec<_>>>()?;
    let test = if test_count == 0 { Dataset::default() } else { draw(test_count)? };
    Ok(DigitData {
        users,
        test,
        synthetic: true,
        input_len: side * side,
    })
}

fn box_blur(img: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for r in 0..side {
        for c in 0..side {
            let (mut sum, mut n) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..(r + 2).min(side) {
                for cc in c.saturating_sub(1)..(c + 2).min(side) {
                    sum += img[rr * side + cc];
                    n += 1.0;
                }
            }
            out[r * side + c] = sum / n;
        }
    }
    out
}

/// IDX file pair under `dir`, if both files exist.
pub fn idx_files(dir: &Path) -> Option<(PathBuf, PathBuf)> {
    let images = dir.join(TRAIN_IMAGES);
    let labels = dir.join(TRAIN_LABELS);
    (images.is_file() && labels.is_file()).then_some((images, labels))
}
