//! Patch harvesting and preprocessing: random patch extraction, per-patch
//! brightness/contrast normalisation and ZCA whitening.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatMut, MatRef, Par, Side};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ImageBatch, PatchMatrix};

/// Variance floor used by per-patch normalisation for inputs scaled to `[0, 1]`.
pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Default ZCA regulariser.
pub const DEFAULT_ZCA_EPS: f64 = 0.1;

/// Rows processed per block when whitening large patch sets in place.
const WHITEN_BLOCK: usize = 4096;

/// A fitted ZCA transform: `x ↦ (x − mean)·matrix`.
#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningTransform {
    dim: usize,
    mean: Vec<f64>,
    /// `dim × dim`, row-major, symmetric.
    matrix: Vec<f64>,
    epsilon: f64,
}

impl WhiteningTransform {
    pub fn from_parts(dim: usize, mean: Vec<f64>, matrix: Vec<f64>, epsilon: f64) -> Result<Self> {
        if mean.len() != dim || matrix.len() != dim * dim {
            return Err(Error::dim(format!(
                "whitening parts do not match dim {dim}: mean {}, matrix {}",
                mean.len(),
                matrix.len()
            )));
        }
        Ok(WhiteningTransform {
            dim,
            mean,
            matrix,
            epsilon,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        WhiteningTransform {
            dim,
            mean: vec![0.0; dim],
            matrix,
            epsilon: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn matrix(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.matrix, self.dim, self.dim)
    }

    pub fn matrix_data(&self) -> &[f64] {
        &self.matrix
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// Location of one patch: sample index and top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PatchLocation {
    pub sample: usize,
    pub y: usize,
    pub x: usize,
}

/// Draws `count` patch locations uniformly over (sample, y, x) with the patch
/// fully inside the unpadded volume.
///
/// Draw order per patch is `sample`, then `y`, then `x`, each from
/// `Rng::gen_range`; patches are drawn serially.
pub fn sample_patch_locations<R: Rng + ?Sized>(
    n: usize,
    height: usize,
    width: usize,
    kernel: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<PatchLocation>> {
    if n == 0 {
        return Err(Error::input("cannot extract patches from an empty batch"));
    }
    if kernel == 0 || kernel > height || kernel > width {
        return Err(Error::dim(format!(
            "patch size {kernel} does not fit in {height}×{width}"
        )));
    }
    if count == 0 {
        return Err(Error::input("patch count must be >= 1"));
    }
    Ok((0..count)
        .map(|_| {
            let sample = rng.gen_range(0..n);
            let y = rng.gen_range(0..=height - kernel);
            let x = rng.gen_range(0..=width - kernel);
            PatchLocation { sample, y, x }
        })
        .collect())
}

/// Copies the `kernel × kernel` patch of channels `[c0, c1)` at (`y`, `x`) of one
/// sample into `out`, channel-major like [`crate::tensor::im2col`].
pub(crate) fn copy_patch(
    sample: &[f64],
    chw: [usize; 3],
    c0: usize,
    c1: usize,
    y: usize,
    x: usize,
    kernel: usize,
    out: &mut [f64],
) {
    let [_, h, w] = chw;
    let mut idx = 0;
    for c in c0..c1 {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            let start = (y + ky) * w + x;
            out[idx..idx + kernel].copy_from_slice(&plane[start..start + kernel]);
            idx += kernel;
        }
    }
}

/// Extracts `count` random `kernel × kernel × channels` patches from `group`.
pub fn extract_random_patches<R: Rng + ?Sized>(
    group: &ImageBatch,
    kernel: usize,
    count: usize,
    rng: &mut R,
) -> Result<PatchMatrix> {
    let [n, c, h, w] = group.shape();
    let locations = sample_patch_locations(n, h, w, kernel, count, rng)?;
    let dim = kernel * kernel * c;
    let mut data = vec![0.0; count * dim];
    data.par_chunks_mut(dim)
        .zip(locations.par_iter())
        .for_each(|(row, loc)| {
            copy_patch(group.sample(loc.sample), [c, h, w], 0, c, loc.y, loc.x, kernel, row)
        });
    PatchMatrix::new(count, dim, data)
}

/// Normalises one patch in place: subtract its mean, divide by `sqrt(var + eps)`.
#[inline]
pub(crate) fn normalize_row(row: &mut [f64], eps: f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let mut var = 0.0;
    for v in row.iter_mut() {
        *v -= mean;
        var += *v * *v;
    }
    let scale = 1.0 / (var / d + eps).sqrt();
    for v in row.iter_mut() {
        *v *= scale;
    }
}

pub(crate) fn normalize_rows_in_place(data: &mut [f64], cols: usize, eps: f64) {
    data.par_chunks_mut(cols).for_each(|row| normalize_row(row, eps));
}

/// Per-patch brightness/contrast normalisation with population variance.
pub fn normalize_patches(p: &PatchMatrix, eps: f64) -> Result<PatchMatrix> {
    if p.cols() < 2 {
        return Err(Error::dim("patch normalisation needs at least 2 values per patch"));
    }
    let mut out = p.clone();
    normalize_rows_in_place(out.data_mut(), p.cols(), eps);
    Ok(out)
}

/// Column means and population covariance of a row-major sample matrix.
pub(crate) fn mean_and_covariance(p: &PatchMatrix) -> (Vec<f64>, Mat<f64>) {
    let (s, d) = (p.rows(), p.cols());
    let mut mean = vec![0.0; d];
    for r in 0..s {
        for (m, v) in mean.iter_mut().zip(p.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s as f64);
    let mut cov = crate::ridge::gram(p.as_mat());
    for i in 0..d {
        for j in 0..d {
            cov[(i, j)] = cov[(i, j)] / s as f64 - mean[i] * mean[j];
        }
    }
    // Exact symmetry.
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Fits the ZCA transform `V·diag((λ + ε)^{-1/2})·Vᵀ` on the column covariance of `p`.
pub fn fit_zca(p: &PatchMatrix, epsilon: f64) -> Result<WhiteningTransform> {
    if p.rows() == 0 || p.cols() == 0 {
        return Err(Error::input("cannot fit whitening on an empty patch set"));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::config(format!("ZCA epsilon must be >= 0, got {epsilon}")));
    }
    crate::ridge::sequential_linalg();
    let d = p.cols();
    let (mean, cov) = mean_and_covariance(p);
    let eig = cov
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::numeric(format!("covariance eigendecomposition failed: {e:?}")))?;
    let vals = eig.S().column_vector();
    let vecs = eig.U();
    let mut scaled = vecs.to_owned();
    for k in 0..d {
        let lambda = vals[k].max(0.0) + epsilon;
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::numeric(format!(
                "covariance eigenvalue {} with epsilon {epsilon} is not invertible",
                vals[k]
            )));
        }
        let f = lambda.powf(-0.5);
        scaled.col_mut(k).iter_mut().for_each(|v| *v *= f);
    }
    let mut m = Mat::<f64>::zeros(d, d);
    matmul(m.as_mut(), Accum::Replace, scaled.as_ref(), vecs.transpose(), 1.0, Par::Seq);
    let mut matrix = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            matrix[i * d + j] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("whitening matrix is not finite"));
    }
    WhiteningTransform::from_parts(d, mean, matrix, epsilon)
}

/// Whitens the rows of a row-major buffer in place, block by block.
pub(crate) fn whiten_rows_in_place(w: &WhiteningTransform, data: &mut [f64]) {
    let d = w.dim;
    let m = w.matrix();
    data.par_chunks_mut(WHITEN_BLOCK * d).for_each(|block| {
        let rows = block.len() / d;
        for row in block.chunks_mut(d) {
            for (v, mu) in row.iter_mut().zip(&w.mean) {
                *v -= mu;
            }
        }
        let mut out = vec![0.0; block.len()];
        {
            let src = MatRef::from_row_major_slice(block, rows, d);
            let dst = MatMut::from_row_major_slice_mut(&mut out, rows, d);
            matmul(dst, Accum::Replace, src, m, 1.0, Par::Seq);
        }
        block.copy_from_slice(&out);
    });
}

/// Maps every row to `(row − mean)·matrix`.
pub fn apply_whitening(w: &WhiteningTransform, p: &PatchMatrix) -> Result<PatchMatrix> {
    if p.cols() != w.dim {
        return Err(Error::input(format!(
            "patch dimension {} does not match whitening dimension {}",
            p.cols(),
            w.dim
        )));
    }
    let mut out = p.clone();
    whiten_rows_in_place(w, out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_patches(rows: usize, cols: usize, seed: u64) -> PatchMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Correlated columns: x = z·L with a fixed lower-triangular mixing.
        let z: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0;
                for i in 0..=j {
                    let coef = if i == j { 1.0 } else { 0.2 * ((i * 7 + j) % 3) as f64 };
                    acc += z[r * cols + i] * coef;
                }
                data[r * cols + j] = acc + j as f64 * 0.1;
            }
        }
        PatchMatrix::new(rows, cols, data).unwrap()
    }

    fn covariance(p: &PatchMatrix) -> Mat<f64> {
        // Independent two-pass oracle.
        let (s, d) = (p.rows(), p.cols());
        let mut mean = vec![0.0; d];
        for r in 0..s {
            for j in 0..d {
                mean[j] += p.row(r)[j] / s as f64;
            }
        }
        Mat::from_fn(d, d, |i, j| {
            (0..s)
                .map(|r| (p.row(r)[i] - mean[i]) * (p.row(r)[j] - mean[j]))
                .sum::<f64>()
                / s as f64
        })
    }

    #[test]
    fn forced_location_patches() {
        let b = ImageBatch::from_fn([1, 1, 3, 3], |_, _, y, x| (y * 3 + x) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = extract_random_patches(&b, 3, 5, &mut rng).unwrap();
        assert_eq!(p.rows(), 5);
        for r in 0..5 {
            assert_eq!(p.row(r), p.row(0));
        }
        assert_eq!(p.row(0)[8], 8.0);
    }

    #[test]
    fn extraction_is_deterministic_and_in_bounds() {
        let b = ImageBatch::from_fn([4, 2, 10, 9], |s, c, y, x| (s * 1000 + c * 100 + y * 10 + x) as f64);
        let p1 = extract_random_patches(&b, 4, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let p2 = extract_random_patches(&b, 4, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.cols(), 32);
        for r in 0..50 {
            let row = p1.row(r);
            // First element encodes the corner; the second channel block is offset by 100.
            let corner = row[0] as usize;
            let (y, x) = ((corner % 100) / 10, corner % 10);
            assert!(y + 4 <= 10 && x + 4 <= 9);
            assert_eq!(row[16], row[0] + 100.0);
        }
    }

    #[test]
    fn extraction_errors() {
        let b = ImageBatch::zeros([1, 1, 3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(extract_random_patches(&b, 4, 1, &mut rng).is_err());
        assert!(sample_patch_locations(0, 3, 3, 2, 1, &mut rng).is_err());
    }

    #[test]
    fn normalisation_cases() {
        let p = PatchMatrix::new(2, 4, vec![1.0, 1.0, 1.0, 1.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        let n = normalize_patches(&p, DEFAULT_NORM_EPS).unwrap();
        assert_eq!(n.row(0), &[0.0; 4]);
        let expect = 1.0 / (1.0 + DEFAULT_NORM_EPS).sqrt();
        for (v, sign) in n.row(1).iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((v - sign * expect).abs() < 1e-15);
        }
        let q = PatchMatrix::new(1, 2, vec![0.0, 2.0]).unwrap();
        let nq = normalize_patches(&q, DEFAULT_NORM_EPS).unwrap();
        assert!((nq.row(0)[0] + expect).abs() < 1e-15 && (nq.row(0)[1] - expect).abs() < 1e-15);
        let big = normalize_patches(&random_patches(200, 9, 1), DEFAULT_NORM_EPS).unwrap();
        for r in 0..200 {
            assert!(big.row(r).iter().sum::<f64>().abs() / 9.0 <= 1e-12);
        }
        assert!(normalize_patches(&PatchMatrix::new(1, 1, vec![1.0]).unwrap(), 1e-5).is_err());
    }

    #[test]
    fn zca_identity_and_diagonal_cases() {
        // Rows ±√2·e_i: zero mean, covariance exactly I.
        let r2 = 2f64.sqrt();
        let p = PatchMatrix::new(4, 2, vec![r2, 0.0, -r2, 0.0, 0.0, r2, 0.0, -r2]).unwrap();
        let w = fit_zca(&p, 0.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((w.matrix()[(i, j)] - e).abs() < 1e-12);
            }
        }
        // Covariance diag(4, 1).
        let p = PatchMatrix::new(4, 2, vec![2.0 * r2, 0.0, -2.0 * r2, 0.0, 0.0, r2, 0.0, -r2]).unwrap();
        let w = fit_zca(&p, 0.0).unwrap();
        assert!((w.matrix()[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((w.matrix()[(1, 1)] - 1.0).abs() < 1e-12);
        assert!(w.matrix()[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn zca_shrinks_spectrum_by_lambda_over_lambda_plus_eps() {
        let p = normalize_patches(&random_patches(10_000, 9, 4), DEFAULT_NORM_EPS).unwrap();
        let eps = 0.01;
        let w = fit_zca(&p, eps).unwrap();
        let white = apply_whitening(&w, &p).unwrap();
        let before = covariance(&p).self_adjoint_eigen(Side::Lower).unwrap();
        let after = covariance(&white).self_adjoint_eigen(Side::Lower).unwrap();
        let lb = before.S().column_vector();
        let la = after.S().column_vector();
        for k in 0..9 {
            let expect = lb[k].max(0.0) / (lb[k].max(0.0) + eps);
            assert!((la[k] - expect).abs() < 1e-8, "{k}: {} vs {expect}", la[k]);
        }
    }

    #[test]
    fn whitening_transform_invariants() {
        let p = random_patches(2000, 6, 8);
        let w = fit_zca(&p, 1e-8).unwrap();
        let m = w.matrix();
        for i in 0..6 {
            for j in 0..6 {
                assert!((m[(i, j)] - m[(j, i)]).abs() <= 1e-10);
            }
        }
        let white = apply_whitening(&w, &p).unwrap();
        let cov = covariance(&white);
        for i in 0..6 {
            let mean: f64 = (0..2000).map(|r| white.row(r)[i]).sum::<f64>() / 2000.0;
            assert!(mean.abs() <= 1e-10);
            for j in 0..6 {
                if i != j {
                    assert!(cov[(i, j)].abs() <= 1e-6, "cov[{i},{j}] = {}", cov[(i, j)]);
                }
            }
        }
        let id = WhiteningTransform::identity(6);
        assert_eq!(apply_whitening(&id, &p).unwrap(), p);
        assert!(apply_whitening(&id, &random_patches(3, 5, 1)).is_err());
    }
}
