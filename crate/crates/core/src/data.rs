//! Datasets: IDX and embedding-CSV loaders, synthetic Gaussian blobs,
//! train/validation splitting and feature standardization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::seed;
use crate::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Standard deviations are floored here before dividing.
pub const STD_FLOOR: f64 = 1e-8;

/// Row-major `N x d` features with labels in `[0, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub n_classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        n_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::input(format!(
                "{} feature values do not match {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::input(format!("label {y} out of range for {n_classes} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite feature value"));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            n_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// New dataset made of the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            n_classes: self.n_classes,
            provenance: self.provenance.clone(),
        }
    }

    /// First `n` rows (or all of them).
    pub fn truncated(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, format!("truncated header: missing {field}")))
}

/// Load an IDX image file (`0x00000803`, dims N x rows x cols) and its IDX
/// label file (`0x00000801`, dim N). Pixels are scaled to `[0, 1]` and each
/// image is flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;

    let magic = be_u32(&img, 0, images_path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("image magic mismatch: expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n = be_u32(&img, 4, images_path, "image count")? as usize;
    let rows = be_u32(&img, 8, images_path, "row count")? as usize;
    let cols = be_u32(&img, 12, images_path, "column count")? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(Error::format(images_path, "zero-sized images"));
    }
    let pixels = &img[16..];
    if pixels.len() != n * dim {
        return Err(Error::format(
            images_path,
            format!("pixel data: expected {} bytes, found {}", n * dim, pixels.len()),
        ));
    }

    let magic = be_u32(&lab, 0, labels_path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("label magic mismatch: expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n_labels = be_u32(&lab, 4, labels_path, "label count")? as usize;
    if n_labels != n {
        return Err(Error::format(
            labels_path,
            format!("label count {n_labels} does not match image count {n}"),
        ));
    }
    let raw_labels = &lab[8..];
    if raw_labels.len() != n {
        return Err(Error::format(
            labels_path,
            format!("label data: expected {n} bytes, found {}", raw_labels.len()),
        ));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(1, |m| m + 1);
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(features, labels, dim, n_classes, format!("idx:{}", images_path.display()))
}

/// Write an IDX image/label pair (pixels quantized from `[0, 1]` to bytes).
pub fn write_idx(ds: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    if rows * cols != ds.dim {
        return Err(Error::input("rows x cols must equal the feature dimension"));
    }
    let mut img = Vec::with_capacity(16 + ds.features.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.features.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&y| y as u8));
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Load `label,f0,...,f{d-1}` rows. With `n_classes = None` the class count
/// is inferred as `max label + 1`.
pub fn load_embedding_csv(path: &Path, n_classes: Option<usize>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file: missing header"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::format(path, "line 1: header must be `label,f0,...`"));
    }
    for (j, name) in cols[1..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(Error::format(path, format!("line 1: expected column `f{j}`, found `{name}`")));
        }
    }
    let dim = cols.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != dim + 1 {
            return Err(Error::format(
                path,
                format!("line {lineno}: expected {} fields, found {}", dim + 1, cells.len()),
            ));
        }
        let y: usize = cells[0]
            .parse()
            .map_err(|_| Error::format(path, format!("line {lineno}: label `{}` is not an integer", cells[0])))?;
        if let Some(c) = n_classes {
            if y >= c {
                return Err(Error::format(
                    path,
                    format!("line {lineno}: label {y} out of range for {c} classes"),
                ));
            }
        }
        for cell in &cells[1..] {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::format(path, format!("line {lineno}: `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::format(path, format!("line {lineno}: non-finite value")));
            }
            features.push(v);
        }
        labels.push(y);
    }
    let c = n_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(features, labels, dim, c, format!("csv:{}", path.display()))
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_embedding_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for j in 0..ds.dim {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for i in 0..ds.len() {
        let _ = write!(out, "{}", ds.labels[i]);
        for v in ds.row(i) {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Unit directions for `n_classes` class centers in `dim` dimensions.
///
/// With `C <= d` these are the centered, normalized vertices of the regular
/// simplex (all pairwise distances equal); otherwise fixed pseudo-random unit
/// vectors.
fn class_directions(n_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    if n_classes <= dim {
        let shift = 1.0 / n_classes as f64;
        (0..n_classes)
            .map(|c| {
                let mut v = vec![0.0; dim];
                for (j, x) in v.iter_mut().enumerate().take(n_classes) {
                    *x = if j == c { 1.0 - shift } else { -shift };
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect()
    } else {
        let mut rng = seed::rng(0x5eed_b10b);
        (0..n_classes)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect()
    }
}

/// Isotropic unit-variance Gaussian classes centered at `spread` times fixed
/// simplex directions; exactly `n_per_class` rows per class, classes
/// interleaved.
pub fn gen_blobs(n_classes: usize, dim: usize, n_per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_classes < 2 || dim < 2 {
        return Err(Error::input("blobs need at least 2 classes and 2 dimensions"));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::input("spread must be finite and non-negative"));
    }
    let dirs = class_directions(n_classes, dim);
    let mut rng = seed::rng(seed);
    let mut features = Vec::with_capacity(n_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    for _ in 0..n_per_class {
        for (c, dir) in dirs.iter().enumerate() {
            for d in dir {
                features.push(spread * d + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, dim, n_classes, format!("blobs(C={n_classes},d={dim},spread={spread})"))
}

/// Out-of-distribution stand-in for blob data: unlabeled isotropic Gaussian
/// points with standard deviation `scale` around the origin (label 0).
pub fn gen_ood_cloud(dim: usize, n: usize, scale: f64, n_classes: usize, seed: u64) -> Result<Dataset> {
    let mut rng = seed::rng(seed);
    let features = (0..n * dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::new(features, vec![0; n], dim, n_classes.max(1), format!("ood-cloud(scale={scale})"))
}

/// Per-feature standardization fitted on a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Result<Normalizer> {
        if ds.is_empty() {
            return Err(Error::input("cannot fit a normalizer on an empty dataset"));
        }
        let n = ds.len() as f64;
        let mut mean = vec![0.0; ds.dim];
        for i in 0..ds.len() {
            for (m, v) in mean.iter_mut().zip(ds.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; ds.dim];
        for i in 0..ds.len() {
            for ((s, v), m) in var.iter_mut().zip(ds.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim != self.mean.len() {
            return Err(Error::input(format!(
                "dataset dimension {} does not match normalizer dimension {}",
                ds.dim,
                self.mean.len()
            )));
        }
        let mut out = ds.clone();
        for row in out.features.chunks_mut(ds.dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Seeded shuffle, then the first `validation_fraction` of rows become the
/// validation set. The normalizer is fitted on the training part and applied
/// to both parts.
pub fn split_and_normalize(ds: &Dataset, validation_fraction: f64, seed: u64) -> Result<(Dataset, Dataset, Normalizer)> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::input("validation_fraction must lie in [0, 1)"));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut seed::rng(seed));
    let n_val = (validation_fraction * ds.len() as f64).round() as usize;
    let (val_idx, train_idx) = idx.split_at(n_val);
    let train = ds.subset(train_idx);
    let val = ds.subset(val_idx);
    let norm = Normalizer::fit(&train)?;
    Ok((norm.apply(&train)?, norm.apply(&val)?, norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.0], vec![1, 0], 3, 2, "t").unwrap()
    }

    #[test]
    fn idx_roundtrip_and_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let ds = Dataset::new(vec![0.0; 2 * 784], vec![3, 7], 784, 10, "z").unwrap();
        write_idx(&ds, 28, 28, &ip, &lp).unwrap();
        let bytes = fs::read(&ip).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.dim, 784);
        assert_eq!(back.labels, vec![3, 7]);
    }

    #[test]
    fn idx_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let ds = tiny();
        write_idx(&ds, 1, 3, &ip, &lp).unwrap();
        // label file carrying the image magic
        let mut lab = fs::read(&lp).unwrap();
        lab[3] = 0x03;
        fs::write(&lp, &lab).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("label magic mismatch"), "{err}");
        // count mismatch
        lab[3] = 0x01;
        lab[7] = 5;
        fs::write(&lp, &lab).unwrap();
        assert!(load_idx(&ip, &lp).unwrap_err().to_string().contains("does not match image count"));
        // truncated pixels
        write_idx(&ds, 1, 3, &ip, &lp).unwrap();
        let img = fs::read(&ip).unwrap();
        fs::write(&ip, &img[..img.len() - 1]).unwrap();
        assert!(load_idx(&ip, &lp).unwrap_err().to_string().contains("pixel data"));
        fs::write(&ip, &img[..6]).unwrap();
        assert!(load_idx(&ip, &lp).unwrap_err().to_string().contains("truncated header"));
    }

    #[test]
    fn csv_parse_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        fs::write(&p, "label,f0,f1,f2\n1,0.5,1.5,-2\n0,3,4,5\n").unwrap();
        let ds = load_embedding_csv(&p, Some(2)).unwrap();
        assert_eq!((ds.len(), ds.dim), (2, 3));
        fs::write(&p, "label,f0\n10,0.5\n").unwrap();
        let e = load_embedding_csv(&p, Some(10)).unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("out of range"), "{e}");
        fs::write(&p, "label,f0,f1\n1,0.5\n").unwrap();
        assert!(load_embedding_csv(&p, None).unwrap_err().to_string().contains("line 2"));
        fs::write(&p, "label,f0\n1,abc\n").unwrap();
        assert!(load_embedding_csv(&p, None).unwrap_err().to_string().contains("not a number"));
        fs::write(&p, "").unwrap();
        assert!(load_embedding_csv(&p, None).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let ds = gen_blobs(3, 4, 5, 2.0, 1).unwrap();
        write_embedding_csv(&ds, &p).unwrap();
        let back = load_embedding_csv(&p, Some(3)).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in ds.features.iter().zip(&back.features) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blobs_construction() {
        let ds = gen_blobs(3, 16, 100, 2.0, 5).unwrap();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.class_counts(), vec![100, 100, 100]);
        assert_eq!(ds, gen_blobs(3, 16, 100, 2.0, 5).unwrap());
        assert!(gen_blobs(1, 16, 10, 1.0, 0).is_err());
        let many = gen_blobs(5, 2, 3, 1.0, 0).unwrap();
        assert_eq!(many.len(), 15);
    }

    #[test]
    fn blob_spread_controls_separability() {
        // Nearest-center (linear) classifier.
        let nearest = |ds: &Dataset, spread: f64| {
            let dirs = class_directions(ds.n_classes, ds.dim);
            let correct = (0..ds.len())
                .filter(|&i| {
                    let best = (0..ds.n_classes)
                        .min_by(|&a, &b| {
                            let da: f64 = ds.row(i).iter().zip(&dirs[a]).map(|(x, d)| (x - spread * d).powi(2)).sum();
                            let db: f64 = ds.row(i).iter().zip(&dirs[b]).map(|(x, d)| (x - spread * d).powi(2)).sum();
                            da.total_cmp(&db)
                        })
                        .unwrap();
                    best == ds.labels[i]
                })
                .count();
            correct as f64 / ds.len() as f64
        };
        let far = gen_blobs(3, 8, 200, 10.0, 2).unwrap();
        assert!(nearest(&far, 10.0) >= 0.99);
        let none = gen_blobs(3, 8, 2000, 0.0, 2).unwrap();
        assert!((nearest(&none, 0.0) - 1.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn split_sizes_and_normalization() {
        let ds = gen_blobs(4, 6, 250, 3.0, 9).unwrap();
        let (train, val, norm) = split_and_normalize(&ds, 0.2, 1).unwrap();
        assert_eq!((train.len(), val.len()), (800, 200));
        for j in 0..train.dim {
            let col: Vec<f64> = (0..train.len()).map(|i| train.row(i)[j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-9);
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(norm.mean.len(), 6);
        let (train0, val0, _) = split_and_normalize(&ds, 0.0, 1).unwrap();
        assert_eq!((train0.len(), val0.len()), (1000, 0));
        assert!(split_and_normalize(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn constant_features_use_std_floor() {
        let ds = Dataset::new(vec![2.0, 1.0, 2.0, 3.0], vec![0, 1], 2, 2, "c").unwrap();
        let n = Normalizer::fit(&ds).unwrap();
        assert_eq!(n.std[0], STD_FLOOR);
        let out = n.apply(&ds).unwrap();
        assert_eq!(out.row(0)[0], 0.0);
    }
}
