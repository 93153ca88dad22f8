//! Datasets: a synthetic Gaussian-mixture generator, an IDX image loader and
//! stratified splitting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Shape, Tensor};
use crate::rng::{rng_for, tag};

/// Inputs with integer labels. `inputs` has a leading sample extent.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(Error::structure(format!(
                "{} inputs but {} labels",
                inputs.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::structure(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            inputs,
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

    pub fn sample_shape(&self) -> Shape {
        self.inputs.shape().sample().expect("datasets carry a sample extent")
    }

    /// Rows `indices` as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::usage("empty subset"));
        }
        Ok(Dataset {
            inputs: self.inputs.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    /// Inputs and labels of rows `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        Ok((
            self.inputs.gather_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        histogram(&self.labels, self.classes)
    }
}

pub fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &y in labels {
        h[y] += 1;
    }
    h
}

/// Isotropic Gaussian clusters, several per class.
///
/// Cluster centers are drawn from `N(0, separation² / (2·dim) · I)`, so two
/// centers lie about `separation` noise standard deviations apart on average.
/// Sample noise is unit variance. Features are standardized with statistics
/// of the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub classes: usize,
    pub dim: usize,
    pub clusters_per_class: usize,
    pub separation: f64,
}

impl GaussianMixture {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.clusters_per_class == 0 {
            return Err(Error::usage("mixture needs ≥ 2 classes, ≥ 1 dimension and ≥ 1 cluster"));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::usage("separation must be positive"));
        }
        Ok(())
    }

    fn centers(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, &[tag::DATA, 0]);
        let scale = self.separation / (2.0 * self.dim as f64).sqrt();
        (0..self.classes * self.clusters_per_class)
            .map(|_| {
                (0..self.dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    fn draw(&self, centers: &[Vec<f64>], n: usize, stream: u64, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = rng_for(seed, &[tag::DATA, stream]);
        let mut xs = Vec::with_capacity(n * self.dim);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % self.classes;
            let k = rng.random_range(0..self.clusters_per_class);
            let c = &centers[y * self.clusters_per_class + k];
            for &m in c {
                xs.push(m + rng.sample::<f64, _>(StandardNormal));
            }
            ys.push(y);
        }
        (xs, ys)
    }

    /// Training and test splits drawn around shared centers; classes are
    /// balanced (sample `i` has label `i mod classes`).
    pub fn generate<T: Scalar>(&self, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
        self.validate()?;
        if n_train == 0 || n_test == 0 {
            return Err(Error::usage("both splits need at least one sample"));
        }
        let centers = self.centers(seed);
        let (mut xtr, ytr) = self.draw(&centers, n_train, 1, seed);
        let (mut xte, yte) = self.draw(&centers, n_test, 2, seed);
        standardize(&mut xtr, &mut xte, self.dim);
        let to = |x: Vec<f64>, n: usize| Tensor::from_f64(&[n, self.dim], &x);
        Ok((
            Dataset::new(to(xtr, n_train)?, ytr, self.classes)?,
            Dataset::new(to(xte, n_test)?, yte, self.classes)?,
        ))
    }
}

/// Per-feature standardization with the first argument's statistics.
fn standardize(train: &mut [f64], other: &mut [f64], dim: usize) {
    let n = (train.len() / dim) as f64;
    for f in 0..dim {
        let mean = train.iter().skip(f).step_by(dim).sum::<f64>() / n;
        let var = train
            .iter()
            .skip(f)
            .step_by(dim)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = var.sqrt().max(1e-12);
        for v in train
            .iter_mut()
            .skip(f)
            .step_by(dim)
            .chain(other.iter_mut().skip(f).step_by(dim))
        {
            *v = (*v - mean) / sd;
        }
    }
}

/// Files expected by [`load_idx`].
pub const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn read_data_file(path: &Path) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingData {
            path: path.to_path_buf(),
            hint: format!(
                "place the uncompressed IDX files ({}) in {}, e.g. from an MNIST or Fashion-MNIST mirror, or use the synthetic dataset",
                IDX_FILES.join(", "),
                path.parent().map_or_else(|| ".".into(), |p| p.display().to_string())
            ),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn parse_idx<'a>(bytes: &'a [u8], path: &Path, rank: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let bad = |reason: &str| Error::Integrity {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(bad("not an unsigned-byte IDX file"));
    }
    if bytes[3] as usize != rank {
        return Err(bad(&format!("expected rank {rank}, found {}", bytes[3])));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let body = &bytes[header..];
    if body.len() != dims.iter().product::<usize>() {
        return Err(bad("payload size does not match header"));
    }
    Ok((dims, body))
}

fn load_idx_pair(
    dir: &Path,
    images: &str,
    labels: &str,
    limit: Option<usize>,
) -> Result<(Vec<f64>, Vec<usize>, [usize; 2])> {
    let ipath = dir.join(images);
    let lpath = dir.join(labels);
    let ibytes = read_data_file(&ipath)?;
    let lbytes = read_data_file(&lpath)?;
    let (idims, ibody) = parse_idx(&ibytes, &ipath, 3)?;
    let (ldims, lbody) = parse_idx(&lbytes, &lpath, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::Integrity {
            path: lpath,
            reason: "image and label counts differ".into(),
        });
    }
    let n = limit.map_or(idims[0], |l| l.min(idims[0]));
    let per = idims[1] * idims[2];
    let xs = ibody[..n * per].iter().map(|&b| b as f64 / 255.0).collect();
    let ys = lbody[..n].iter().map(|&b| b as usize).collect();
    Ok((xs, ys, [idims[1], idims[2]]))
}

/// Load an MNIST-format image set from `dir` as `[n, 1, h, w]` tensors,
/// standardized with training-split statistics. `limit` caps each split.
pub fn load_idx<T: Scalar>(dir: &Path, limit: Option<usize>) -> Result<(Dataset<T>, Dataset<T>)> {
    let (mut xtr, ytr, [h, w]) = load_idx_pair(dir, IDX_FILES[0], IDX_FILES[1], limit)?;
    let (mut xte, yte, _) = load_idx_pair(dir, IDX_FILES[2], IDX_FILES[3], limit)?;
    let mean = xtr.iter().sum::<f64>() / xtr.len() as f64;
    let sd = (xtr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xtr.len() as f64)
        .sqrt()
        .max(1e-12);
    for v in xtr.iter_mut().chain(xte.iter_mut()) {
        *v = (*v - mean) / sd;
    }
    let classes = ytr.iter().chain(&yte).max().map_or(1, |m| m + 1);
    let (ntr, nte) = (ytr.len(), yte.len());
    Ok((
        Dataset::new(Tensor::from_f64(&[ntr, 1, h, w], &xtr)?, ytr, classes)?,
        Dataset::new(Tensor::from_f64(&[nte, 1, h, w], &xte)?, yte, classes)?,
    ))
}

/// Split indices per class, holding out `round(fraction · n_c)` of each.
/// Returns `(kept, held_out)`, both sorted.
pub fn stratified_split(
    labels: &[usize],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::usage("hold-out fraction must lie in [0, 1)"));
    }
    let mut rng = rng_for(seed, &[tag::DATA, 3]);
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let h = (fraction * idx.len() as f64).round() as usize;
        held.extend_from_slice(&idx[..h]);
        kept.extend_from_slice(&idx[h..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    Ok((kept, held))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture(classes: usize, separation: f64) -> GaussianMixture {
        GaussianMixture {
            classes,
            dim: 8,
            clusters_per_class: 1,
            separation,
        }
    }

    #[test]
    fn generation_is_deterministic_and_labelled() {
        let g = mixture(4, 3.0);
        let (a, t) = g.generate::<f32>(100, 40, 5).unwrap();
        let (b, _) = g.generate::<f32>(100, 40, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.labels.iter().chain(&t.labels).all(|&y| y < 4));
        assert_eq!(a.label_histogram(), vec![25; 4]);
    }

    #[test]
    fn stratified_split_is_exact() {
        let labels: Vec<usize> = (0..50_000).map(|i| i % 10).collect();
        let (kept, held) = stratified_split(&labels, 10, 0.2, 1).unwrap();
        assert_eq!(kept.len(), 40_000);
        assert_eq!(held.len(), 10_000);
        assert_eq!(
            histogram(&kept.iter().map(|&i| labels[i]).collect::<Vec<_>>(), 10),
            vec![4000; 10]
        );
    }

    #[test]
    fn missing_idx_files_explain_themselves() {
        let dir = tempfile::tempdir().unwrap();
        match load_idx::<f32>(dir.path(), None) {
            Err(Error::MissingData { hint, .. }) => assert!(hint.contains("train-images-idx3-ubyte")),
            other => panic!("expected a missing-data error, got {other:?}"),
        }
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, dims: &[u32], body: &[u8]| {
            let mut b = vec![0, 0, 8, dims.len() as u8];
            for d in dims {
                b.extend_from_slice(&d.to_be_bytes());
            }
            b.extend_from_slice(body);
            std::fs::write(dir.path().join(name), b).unwrap();
        };
        write(IDX_FILES[0], &[2, 2, 2], &[0, 255, 0, 255, 255, 0, 255, 0]);
        write(IDX_FILES[1], &[2], &[1, 0]);
        write(IDX_FILES[2], &[1, 2, 2], &[0, 0, 255, 255]);
        write(IDX_FILES[3], &[1], &[1]);
        let (tr, te) = load_idx::<f64>(dir.path(), None).unwrap();
        assert_eq!(tr.inputs.dims(), &[2, 1, 2, 2]);
        assert_eq!(te.labels, vec![1]);
        assert!((tr.inputs.data()[1] - 1.0).abs() < 1e-12);
    }
}
