//! Datasets: synthetic Gaussian clusters, synthetic two-tile images, and
//! MNIST in IDX format, each partitioned column-wise across parties.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::diffcore::{Rng, Tensor};
use crate::error::{Error, Result};

/// Vertically partitioned train/test data.
///
/// `train[k]` / `test[k]` hold party `k+1`'s columns; the last party is the
/// active one. Labels are only ever handed to the active party.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
    pub train_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
    pub classes: usize,
    /// Original feature indices owned by each party.
    pub party_features: Vec<Vec<usize>>,
}

impl SplitDataset {
    pub fn parties(&self) -> usize {
        self.train.len()
    }

    pub fn n_train(&self) -> usize {
        self.train_labels.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_labels.len()
    }

    pub fn feature_widths(&self) -> Vec<usize> {
        self.party_features.iter().map(Vec::len).collect()
    }

    /// Partitions full feature matrices with `party_features`.
    pub fn from_full(
        train_x: &Tensor,
        train_labels: Vec<usize>,
        test_x: &Tensor,
        test_labels: Vec<usize>,
        classes: usize,
        party_features: Vec<Vec<usize>>,
    ) -> Result<Self> {
        check_partition(&party_features, train_x.cols())?;
        if train_x.rows() != train_labels.len() || test_x.rows() != test_labels.len() {
            return Err(Error::Consistency("feature rows and label counts differ".into()));
        }
        if let Some(&bad) = train_labels.iter().chain(&test_labels).find(|&&y| y >= classes) {
            return Err(Error::Consistency(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            train: party_features.iter().map(|f| train_x.select_cols(f)).collect(),
            test: party_features.iter().map(|f| test_x.select_cols(f)).collect(),
            train_labels,
            test_labels,
            classes,
            party_features,
        })
    }
}

fn check_partition(parts: &[Vec<usize>], dim: usize) -> Result<()> {
    let mut seen = vec![false; dim];
    for p in parts {
        if p.is_empty() {
            return Err(Error::config("every party needs at least one feature"));
        }
        for &j in p {
            if j >= dim || seen[j] {
                return Err(Error::config(format!("feature {j} is out of range or assigned twice")));
            }
            seen[j] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::config("feature partition does not cover every column"));
    }
    Ok(())
}

/// Contiguous, as-even-as-possible column ranges; earlier parties take the
/// remainder.
pub fn even_split(dim: usize, parties: usize) -> Result<Vec<Vec<usize>>> {
    if parties == 0 || dim < parties {
        return Err(Error::config(format!("cannot split {dim} features among {parties} parties")));
    }
    let base = dim / parties;
    let extra = dim % parties;
    let mut out = Vec::with_capacity(parties);
    let mut start = 0;
    for k in 0..parties {
        let w = base + usize::from(k < extra);
        out.push((start..start + w).collect());
        start += w;
    }
    Ok(out)
}

/// Splits each image row's columns evenly (left strip to party 1, …).
pub fn image_column_split(height: usize, width: usize, parties: usize) -> Result<Vec<Vec<usize>>> {
    let cols = even_split(width, parties)?;
    Ok(cols
        .into_iter()
        .map(|cs| {
            (0..height)
                .flat_map(|r| cs.iter().map(move |&c| r * width + c))
                .collect()
        })
        .collect())
}

/// Stratified 80/20 split of per-class index lists.
fn stratified(labels: &[usize], classes: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let n_test = idx.len() / 5;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);
    (train, test)
}

fn min_max_normalize(x: &mut Tensor) {
    let (rows, cols) = (x.rows(), x.cols());
    for j in 0..cols {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..rows {
            let v = x.get(i, j);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        for i in 0..rows {
            let v = if span > 0.0 { (x.get(i, j) - lo) / span } else { 0.0 };
            x.set(i, j, v);
        }
    }
}

/// `C` Gaussian clusters in `dim` dimensions.
///
/// Class `c` has mean `scale` on every feature `j` with `j mod C == c` and
/// zero elsewhere, so every contiguous party slice sees evidence for every
/// class. Covariance is `spread²·I`; features are min-max normalized to
/// `[0,1]`, then split 80/20 per class.
pub fn gen_synthetic(
    n: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    parties: usize,
    rng: &mut Rng,
) -> Result<SplitDataset> {
    if classes < 2 {
        return Err(Error::config("need at least two classes"));
    }
    if n < 10 * classes {
        return Err(Error::config(format!(
            "{n} samples is too few for {classes} classes (need at least {})",
            10 * classes
        )));
    }
    if dim < parties || dim < classes {
        return Err(Error::config(format!(
            "dimension {dim} cannot be split among {parties} parties / {classes} classes"
        )));
    }
    if !(spread >= 0.0) {
        return Err(Error::config("cluster spread must be nonnegative"));
    }
    let scale = 1.0;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * dim);
    for &y in &labels {
        for j in 0..dim {
            let mean = if j % classes == y { scale } else { 0.0 };
            data.push(mean + spread * rng.normal());
        }
    }
    let mut x = Tensor::matrix(n, dim, data)?;
    min_max_normalize(&mut x);
    let (tr, te) = stratified(&labels, classes, rng);
    let train_labels = tr.iter().map(|&i| labels[i]).collect();
    let test_labels = te.iter().map(|&i| labels[i]).collect();
    SplitDataset::from_full(
        &x.select_rows(&tr),
        train_labels,
        &x.select_rows(&te),
        test_labels,
        classes,
        even_split(dim, parties)?,
    )
}

/// Synthetic grayscale images of `height × width` pixels in `[0,1]`.
///
/// Each class has a smooth random prototype; samples add pixel noise with
/// standard deviation `noise`. Columns are split evenly across parties.
pub fn gen_images(
    n: usize,
    classes: usize,
    height: usize,
    width: usize,
    noise: f64,
    parties: usize,
    rng: &mut Rng,
) -> Result<SplitDataset> {
    if n < 10 * classes {
        return Err(Error::config(format!("{n} samples is too few for {classes} classes")));
    }
    let px = height * width;
    // prototypes: sums of a few Gaussian bumps
    let mut protos = Vec::with_capacity(classes);
    for _ in 0..classes {
        let bumps: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.uniform_range(0.0, height as f64),
                    rng.uniform_range(0.0, width as f64),
                    rng.uniform_range(1.0, 2.5),
                    rng.uniform_range(0.5, 1.0),
                )
            })
            .collect();
        let mut img = vec![0.0; px];
        for r in 0..height {
            for c in 0..width {
                let v: f64 = bumps
                    .iter()
                    .map(|&(br, bc, s, a)| {
                        let d2 = (r as f64 - br).powi(2) + (c as f64 - bc).powi(2);
                        a * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                img[r * width + c] = v.min(1.0);
            }
        }
        protos.push(img);
    }
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * px);
    for &y in &labels {
        data.extend(protos[y].iter().map(|&p| (p + noise * rng.normal()).clamp(0.0, 1.0)));
    }
    let x = Tensor::matrix(n, px, data)?;
    let (tr, te) = stratified(&labels, classes, rng);
    let train_labels = tr.iter().map(|&i| labels[i]).collect();
    let test_labels = te.iter().map(|&i| labels[i]).collect();
    SplitDataset::from_full(
        &x.select_rows(&tr),
        train_labels,
        &x.select_rows(&te),
        test_labels,
        classes,
        image_column_split(height, width, parties)?,
    )
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

/// Parses an IDX3 image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(mut r: impl Read) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if u32::from_be_bytes(magic) != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:02x?}, expected 00 00 08 03"
        )));
    }
    let count = read_u32_be(&mut r)? as usize;
    let rows = read_u32_be(&mut r)? as usize;
    let cols = read_u32_be(&mut r)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    r.read_exact(&mut pixels)?;
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(mut r: impl Read) -> Result<Vec<u8>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if u32::from_be_bytes(magic) != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:02x?}, expected 00 00 08 01"
        )));
    }
    let count = read_u32_be(&mut r)? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels)?;
    Ok(labels)
}

/// Loads MNIST-style IDX files, keeps `classes` (relabelled `0..len` in the
/// given order; all ten digits when empty), scales pixels to `[0,1]`, and
/// splits image columns evenly across `parties`.
pub fn load_mnist_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    classes: &[u8],
    parties: usize,
    rng: &mut Rng,
) -> Result<SplitDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(BufReader::new(File::open(images)?))?;
    let raw_labels = parse_idx_labels(BufReader::new(File::open(labels)?))?;
    mnist_from_parts(count, rows, cols, &pixels, &raw_labels, classes, parties, rng)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn mnist_from_parts(
    count: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    raw_labels: &[u8],
    classes: &[u8],
    parties: usize,
    rng: &mut Rng,
) -> Result<SplitDataset> {
    if raw_labels.len() != count {
        return Err(Error::Consistency(format!(
            "{count} images but {} labels",
            raw_labels.len()
        )));
    }
    let keep: Vec<u8> = if classes.is_empty() {
        (0..10).collect()
    } else {
        classes.to_vec()
    };
    let px = rows * cols;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..count {
        if let Some(c) = keep.iter().position(|&k| k == raw_labels[i]) {
            data.extend(pixels[i * px..(i + 1) * px].iter().map(|&p| f64::from(p) / 255.0));
            labels.push(c);
        }
    }
    if labels.is_empty() {
        return Err(Error::config("no samples left after class filtering"));
    }
    let x = Tensor::matrix(labels.len(), px, data)?;
    let (tr, te) = stratified(&labels, keep.len(), rng);
    let train_labels = tr.iter().map(|&i| labels[i]).collect();
    let test_labels = te.iter().map(|&i| labels[i]).collect();
    SplitDataset::from_full(
        &x.select_rows(&tr),
        train_labels,
        &x.select_rows(&te),
        test_labels,
        keep.len(),
        image_column_split(rows, cols, parties)?,
    )
}
