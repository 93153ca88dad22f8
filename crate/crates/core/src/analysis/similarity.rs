use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::engine::run_block;
use crate::nn::graph::BlockGraph;
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::weights::ModelWeights;

/// Regularization added to covariance diagonals in [`mean_cca`].
pub const CCA_EPSILON: f64 = 1e-6;

/// Probe-set size used for similarity analysis.
pub const PROBE_SIZE: usize = 512;

fn centered(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

fn check_pair(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::structure(format!(
            "representations have {} and {} rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::usage("similarity needs at least two samples"));
    }
    Ok(())
}

/// Linear centered kernel alignment,
/// `‖Yᶜᵀ Xᶜ‖²_F / (‖Xᶜᵀ Xᶜ‖_F ‖Yᶜᵀ Yᶜ‖_F)`, evaluated through the n × n
/// Gram matrices so wide representations stay cheap.
pub fn linear_cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    check_pair(x, y)?;
    let (xc, yc) = (centered(x), centered(y));
    let kx = &xc * xc.transpose();
    let ky = &yc * yc.transpose();
    let (nx, ny) = (kx.norm(), ky.norm());
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::usage("CKA is undefined for a zero-variance representation"));
    }
    Ok((kx.dot(&ky) / (nx * ny)).clamp(0.0, 1.0))
}

/// `C^{-1/2}` of a symmetric positive definite matrix.
fn inv_sqrt(c: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::usage("covariance is rank deficient beyond regularization"));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Mean canonical correlation between the column spaces of `x` and `y`,
/// with `epsilon` added to both covariance diagonals.
pub fn mean_cca(x: &DMatrix<f64>, y: &DMatrix<f64>, epsilon: f64) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.nrows();
    if n <= x.ncols().max(y.ncols()) {
        return Err(Error::usage(format!(
            "CCA needs more samples ({n}) than features ({})",
            x.ncols().max(y.ncols())
        )));
    }
    let (xc, yc) = (centered(x), centered(y));
    let scale = 1.0 / (n - 1) as f64;
    let cxx = xc.transpose() * &xc * scale;
    let cyy = yc.transpose() * &yc * scale;
    if cxx.trace() == 0.0 || cyy.trace() == 0.0 {
        return Err(Error::usage("CCA is undefined for a zero-variance representation"));
    }
    let cxy = xc.transpose() * &yc * scale;
    let wx = inv_sqrt(cxx + DMatrix::identity(x.ncols(), x.ncols()) * epsilon)?;
    let wy = inv_sqrt(cyy + DMatrix::identity(y.ncols(), y.ncols()) * epsilon)?;
    let t = wx * cxy * wy;
    let rho = t.singular_values();
    let k = x.ncols().min(y.ncols());
    Ok(rho.iter().take(k).map(|r| r.clamp(0.0, 1.0)).sum::<f64>() / k as f64)
}

/// One row per sample. With `pool`, rank-3 samples are averaged over their
/// spatial extent first, leaving one feature per channel.
pub fn to_matrix<T: Scalar>(z: &Tensor<T>, pool: bool) -> DMatrix<f64> {
    let n = z.batch();
    let dims = z.dims();
    if pool && dims.len() == 4 {
        let (c, hw) = (dims[1], dims[2] * dims[3]);
        DMatrix::from_fn(n, c, |i, k| {
            z.row(i)[k * hw..(k + 1) * hw].iter().map(|v| v.f64()).sum::<f64>() / hw as f64
        })
    } else {
        let d = z.row_len();
        DMatrix::from_fn(n, d, |i, k| z.row(i)[k].f64())
    }
}

/// Output of every body block on `probe`, as matrices.
pub fn block_representations<T: Scalar>(
    graph: &BlockGraph,
    weights: &ModelWeights<T>,
    probe: &Tensor<T>,
    pool: bool,
) -> Result<Vec<DMatrix<f64>>> {
    let mut h = probe.clone();
    let mut out = Vec::with_capacity(graph.num_blocks());
    for j in 0..graph.num_blocks() {
        h = run_block(graph, weights, j, &h)?;
        out.push(to_matrix(&h, pool));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    Cka,
    Cca,
}

/// Similarity between every block of model A (rows) and model B (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub measure: Measure,
    pub source_a: String,
    pub source_b: String,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// Entries `(i, i)`: the same block compared across the two models.
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.values.len().min(self.values.first().map_or(0, Vec::len)))
            .map(|i| self.values[i][i])
            .collect()
    }
}

/// Layer-pair similarity of two models of the same graph on a shared probe
/// set. CKA uses the flattened block outputs; CCA uses spatially pooled ones
/// so the feature count stays below the probe size.
pub fn compare_models<T: Scalar>(
    graph: &BlockGraph,
    a: (&str, &ModelWeights<T>),
    b: (&str, &ModelWeights<T>),
    probe: &Tensor<T>,
    measure: Measure,
) -> Result<SimilarityMatrix> {
    let pool = measure == Measure::Cca;
    let ra = block_representations(graph, a.1, probe, pool)?;
    let rb = block_representations(graph, b.1, probe, pool)?;
    let values = ra
        .iter()
        .map(|x| {
            rb.iter()
                .map(|y| match measure {
                    Measure::Cka => linear_cka(x, y),
                    Measure::Cca => mean_cca(x, y, CCA_EPSILON),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityMatrix {
        measure,
        source_a: a.0.to_string(),
        source_b: b.0.to_string(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_for(seed, &[]);
        DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn cka_closed_form_example() {
        // Centered X = [[.5,-.5],[-.5,.5]] and Y ∝ the same pattern in one
        // column, so the Gram matrices are proportional and CKA is 1.
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, -1.0]);
        assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        // Three samples: Kx from one-hot rows, Ky from a single centered
        // column (-1, 0, 1); Kx = I - 1/3, tr(KxKy) = 2, ‖Kx‖ = √2, ‖Ky‖ = 2.
        let x = DMatrix::<f64>::identity(3, 3);
        let y = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let expected = 2.0 / (2.0f64.sqrt() * 2.0);
        assert!((linear_cka(&x, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cka_invariances() {
        let x = gaussian(50, 6, 1);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-10);
        assert!((linear_cka(&x, &(&x * -3.5)).unwrap() - 1.0).abs() < 1e-10);
        let q = gaussian(6, 6, 2).qr().q();
        assert!((linear_cka(&x, &(&x * q)).unwrap() - 1.0).abs() < 1e-10);
        let y = gaussian(50, 4, 3);
        assert!((linear_cka(&x, &y).unwrap() - linear_cka(&y, &x).unwrap()).abs() < 1e-12);
        assert!(linear_cka(&x, &DMatrix::from_element(50, 2, 1.0)).is_err());
    }

    #[test]
    fn cca_examples() {
        let x = gaussian(200, 4, 4);
        assert!((mean_cca(&x, &x, CCA_EPSILON).unwrap() - 1.0).abs() < 1e-4);
        let a = gaussian(4, 4, 5);
        assert!((mean_cca(&x, &(&x * a), CCA_EPSILON).unwrap() - 1.0).abs() < 1e-4);
        assert!(mean_cca(&gaussian(4, 4, 6), &gaussian(4, 2, 7), CCA_EPSILON).is_err());
    }

    #[test]
    fn pooling_averages_spatial_positions() {
        let z = Tensor::<f64>::from_f64(&[1, 2, 1, 2], &[1.0, 3.0, -2.0, 0.0]).unwrap();
        assert_eq!(to_matrix(&z, true), DMatrix::from_row_slice(1, 2, &[2.0, -1.0]));
        assert_eq!(to_matrix(&z, false).ncols(), 4);
    }
}
