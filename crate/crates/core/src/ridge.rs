//! Ridge-regression output layer.
//!
//! `W = (AᵀA + λI)⁻¹AᵀY` in the primal form, `Aᵀ(AAᵀ + λI)⁻¹Y` when A is wider
//! than tall. Large training sets never materialise A: [`GramAccumulator`]
//! streams row chunks into `AᵀA` and `AᵀY`, and [`GramPath`] evaluates a whole
//! λ grid from one eigendecomposition.

use std::sync::Once;

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, MatRef, Par, Side};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Columns per tile of the streamed Gram matrix.
const GRAM_TILE: usize = 512;

static SEQUENTIAL: Once = Once::new();

/// Dense factorizations run single-threaded so results do not depend on the
/// thread count; parallelism comes from independent tiles and samples instead.
pub fn sequential_linalg() {
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(Par::Seq));
}

/// One-hot class indicators, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    rows: usize,
    classes: usize,
    labels: Vec<usize>,
    data: Vec<f64>,
}

impl LabelMatrix {
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
        }
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            data[i * classes + l] = 1.0;
        }
        Ok(LabelMatrix {
            rows: labels.len(),
            classes,
            labels: labels.to_vec(),
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn as_mat(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.rows, self.classes)
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> LabelMatrix {
        LabelMatrix {
            rows: end - start,
            classes: self.classes,
            labels: self.labels[start..end].to_vec(),
            data: self.data[start * self.classes..end * self.classes].to_vec(),
        }
    }
}

fn check_finite(m: MatRef<'_, f64>, what: &str) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::numeric(format!("{what} contains non-finite values")));
            }
        }
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("ridge lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Solves `(M + λI)X = rhs` for symmetric positive semi-definite `M`.
///
/// Cholesky first; if that breaks down the eigendecomposition is used with
/// negative eigenvalues clamped to zero.
pub fn spd_shift_solve(m: MatRef<'_, f64>, lambda: f64, rhs: MatRef<'_, f64>) -> Result<Mat<f64>> {
    sequential_linalg();
    let n = m.nrows();
    let mut shifted = m.to_owned();
    for i in 0..n {
        shifted[(i, i)] += lambda;
    }
    if let Ok(llt) = shifted.llt(Side::Lower) {
        let x = llt.solve(rhs);
        if x.col_iter().all(|c| c.iter().all(|v| v.is_finite())) {
            return Ok(x);
        }
    }
    log::warn!("Cholesky of a {n}×{n} system failed; using the eigendecomposition");
    let eig = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::numeric(format!("eigendecomposition failed: {e:?}")))?;
    let (u, s) = (eig.U(), eig.S().column_vector());
    let mut proj = u.transpose() * rhs;
    for i in 0..n {
        let scale = 1.0 / (s[i].max(0.0) + lambda);
        for v in proj.row_mut(i).iter_mut() {
            *v *= scale;
        }
    }
    let x = u * proj;
    check_finite(x.as_ref(), "ridge solution")?;
    Ok(x)
}

/// `AᵀA` as a full matrix, computed tile by tile.
pub fn gram(a: MatRef<'_, f64>) -> Mat<f64> {
    let mut acc = GramAccumulator::new(a.ncols(), 0);
    acc.add_features(a);
    acc.gram()
}

/// `(AᵀA + λI)⁻¹AᵀY`.
pub fn solve_primal(a: MatRef<'_, f64>, y: MatRef<'_, f64>, lambda: f64) -> Result<Mat<f64>> {
    let g = gram(a);
    let aty = a.transpose() * y;
    spd_shift_solve(g.as_ref(), lambda, aty.as_ref())
}

/// `Aᵀ(AAᵀ + λI)⁻¹Y`.
pub fn solve_dual(a: MatRef<'_, f64>, y: MatRef<'_, f64>, lambda: f64) -> Result<Mat<f64>> {
    let k = a * a.transpose();
    let alpha = spd_shift_solve(k.as_ref(), lambda, y)?;
    Ok(a.transpose() * alpha)
}

/// Ridge output weights, primal when `cols <= rows`, dual otherwise.
pub fn ridge_solve(a: MatRef<'_, f64>, y: MatRef<'_, f64>, lambda: f64) -> Result<Mat<f64>> {
    check_lambda(lambda)?;
    if a.nrows() != y.nrows() {
        return Err(Error::dim(format!("A has {} rows, Y has {}", a.nrows(), y.nrows())));
    }
    check_finite(a, "feature matrix")?;
    if a.ncols() <= a.nrows() {
        solve_primal(a, y, lambda)
    } else {
        solve_dual(a, y, lambda)
    }
}

/// Ridge pseudo-inverse `(AᵀA + λI)⁻¹Aᵀ`, `cols × rows`.
pub fn ridge_pinv(a: MatRef<'_, f64>, lambda: f64) -> Result<Mat<f64>> {
    check_lambda(lambda)?;
    check_finite(a, "feature matrix")?;
    if a.ncols() <= a.nrows() {
        let g = gram(a);
        spd_shift_solve(g.as_ref(), lambda, a.transpose())
    } else {
        let k = a * a.transpose();
        let inv = spd_shift_solve(k.as_ref(), lambda, Mat::<f64>::identity(a.nrows(), a.nrows()).as_ref())?;
        Ok(a.transpose() * inv)
    }
}

/// Index of the largest entry of every row; ties go to the lowest index.
pub fn argmax_rows(scores: MatRef<'_, f64>) -> Vec<usize> {
    (0..scores.nrows())
        .map(|i| {
            let mut best = 0;
            for j in 1..scores.ncols() {
                if scores[(i, j)] > scores[(i, best)] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub scores: Mat<f64>,
}

pub fn predict(w: MatRef<'_, f64>, a: MatRef<'_, f64>) -> Result<Prediction> {
    if a.ncols() != w.nrows() {
        return Err(Error::dim(format!("features have {} columns, weights {} rows", a.ncols(), w.nrows())));
    }
    let scores = a * w;
    Ok(Prediction {
        classes: argmax_rows(scores.as_ref()),
        scores,
    })
}

/// Fraction of positions where `pred` equals `labels`.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// `‖(AᵀA + λI)W − AᵀY‖_F / ‖AᵀY‖_F`.
pub fn normal_residual(a: MatRef<'_, f64>, y: MatRef<'_, f64>, w: MatRef<'_, f64>, lambda: f64) -> f64 {
    let aty = a.transpose() * y;
    let r = a.transpose() * (a * w) + w * lambda - &aty;
    r.norm_l2() / aty.norm_l2().max(f64::MIN_POSITIVE)
}

/// Outcome of a λ grid search.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaChoice {
    pub lambda: f64,
    /// Validation accuracy for each grid entry, in grid order.
    pub accuracies: Vec<f64>,
}

/// Picks the grid value with the best accuracy; ties go to the smaller λ.
fn choose(grid: &[f64], accuracies: Vec<f64>) -> LambdaChoice {
    let mut best = 0;
    for i in 1..grid.len() {
        let (a, b) = (accuracies[i], accuracies[best]);
        if a > b || (a == b && grid[i] < grid[best]) {
            best = i;
        }
    }
    LambdaChoice {
        lambda: grid[best],
        accuracies,
    }
}

/// Validation scores along a λ path: `scores(λ) = P·diag(1/(e + λ))·R`.
struct SpectralPath {
    p: Mat<f64>,
    evals: Vec<f64>,
    r: Mat<f64>,
}

impl SpectralPath {
    fn accuracies(&self, grid: &[f64], labels: &[usize]) -> Vec<f64> {
        grid.iter()
            .map(|&lambda| {
                let mut r = self.r.clone();
                for (i, e) in self.evals.iter().enumerate() {
                    let s = 1.0 / (e.max(0.0) + lambda);
                    r.row_mut(i).iter_mut().for_each(|v| *v *= s);
                }
                let scores = &self.p * &r;
                accuracy(&argmax_rows(scores.as_ref()), labels)
            })
            .collect()
    }
}

fn eigen(m: MatRef<'_, f64>) -> Result<(Mat<f64>, Vec<f64>)> {
    sequential_linalg();
    let eig = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::numeric(format!("eigendecomposition failed: {e:?}")))?;
    let s = eig.S().column_vector();
    Ok((eig.U().to_owned(), (0..m.nrows()).map(|i| s[i]).collect()))
}

/// Grid search over λ by validation accuracy, with in-memory matrices.
pub fn lambda_search(
    a_train: MatRef<'_, f64>,
    y_train: &LabelMatrix,
    a_val: MatRef<'_, f64>,
    y_val: &LabelMatrix,
    grid: &[f64],
) -> Result<LambdaChoice> {
    if grid.is_empty() {
        return Err(Error::config("lambda grid is empty"));
    }
    for &l in grid {
        check_lambda(l)?;
    }
    if a_train.ncols() != a_val.ncols() || a_train.nrows() != y_train.rows() || a_val.nrows() != y_val.rows() {
        return Err(Error::dim("lambda search inputs disagree in shape"));
    }
    let y = y_train.as_mat();
    let path = if a_train.ncols() <= a_train.nrows() {
        let g = gram(a_train);
        let (v, evals) = eigen(g.as_ref())?;
        SpectralPath {
            p: a_val * &v,
            evals,
            r: v.transpose() * (a_train.transpose() * y),
        }
    } else {
        let k = a_train * a_train.transpose();
        let (u, evals) = eigen(k.as_ref())?;
        SpectralPath {
            p: (a_val * a_train.transpose()) * &u,
            evals,
            r: u.transpose() * y,
        }
    };
    Ok(choose(grid, path.accuracies(grid, y_val.labels())))
}

/// Leave-one-out grid search for small in-memory problems.
///
/// One eigendecomposition `AAᵀ = UΛUᵀ` gives the hat matrix for every λ; the
/// held-out score of sample i is `(f_i − h_ii·y_i) / (1 − h_ii)`.
pub fn loo_lambda_search(a: MatRef<'_, f64>, y: &LabelMatrix, grid: &[f64]) -> Result<LambdaChoice> {
    if grid.is_empty() {
        return Err(Error::config("lambda grid is empty"));
    }
    for &l in grid {
        check_lambda(l)?;
    }
    if a.nrows() != y.rows() {
        return Err(Error::dim("lambda search inputs disagree in shape"));
    }
    let n = a.nrows();
    let k = a * a.transpose();
    let (u, evals) = eigen(k.as_ref())?;
    let uty = u.transpose() * y.as_mat();
    let ym = y.as_mat();
    let accuracies = grid
        .iter()
        .map(|&lambda| {
            let mut r = uty.clone();
            for (i, e) in evals.iter().enumerate() {
                let s = e.max(0.0) / (e.max(0.0) + lambda);
                r.row_mut(i).iter_mut().for_each(|v| *v *= s);
            }
            let mut f = &u * &r;
            for i in 0..n {
                // 1 − h_ii summed directly, which stays accurate when h_ii ≈ 1.
                let rest: f64 = (0..n)
                    .map(|t| u[(i, t)] * u[(i, t)] * lambda / (evals[t].max(0.0) + lambda))
                    .sum();
                let h = 1.0 - rest;
                for c in 0..f.ncols() {
                    f[(i, c)] = (f[(i, c)] - h * ym[(i, c)]) / rest;
                }
            }
            accuracy(&argmax_rows(f.as_ref()), y.labels())
        })
        .collect();
    Ok(choose(grid, accuracies))
}

/// Streams row chunks of A (and Y) into `AᵀA` and `AᵀY`.
///
/// The Gram matrix is held as upper-triangle tiles updated in parallel; each
/// tile is accumulated in chunk order, so the result does not depend on the
/// thread count.
pub struct GramAccumulator {
    cols: usize,
    classes: usize,
    rows: usize,
    tiles: Vec<((usize, usize), Mat<f64>)>,
    aty: Mat<f64>,
}

impl GramAccumulator {
    pub fn new(cols: usize, classes: usize) -> Self {
        let nt = cols.div_ceil(GRAM_TILE);
        let span = |t: usize| (t * GRAM_TILE, ((t + 1) * GRAM_TILE).min(cols));
        let mut tiles = Vec::new();
        for i in 0..nt {
            for j in i..nt {
                let ((r0, r1), (c0, c1)) = (span(i), span(j));
                tiles.push(((i, j), Mat::zeros(r1 - r0, c1 - c0)));
            }
        }
        GramAccumulator {
            cols,
            classes,
            rows: 0,
            tiles,
            aty: Mat::zeros(cols, classes),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn add_features(&mut self, a: MatRef<'_, f64>) {
        let cols = self.cols;
        self.tiles.par_iter_mut().for_each(|((i, j), tile)| {
            let c0 = *i * GRAM_TILE;
            let d0 = *j * GRAM_TILE;
            let ai = a.subcols(c0, tile.nrows());
            let aj = a.subcols(d0, tile.ncols());
            debug_assert!(d0 + tile.ncols() <= cols);
            matmul(tile.as_mut(), Accum::Add, ai.transpose(), aj, 1.0, Par::Seq);
        });
        self.rows += a.nrows();
    }

    /// Adds the rows of `a` with their labels `y`.
    pub fn add(&mut self, a: MatRef<'_, f64>, y: MatRef<'_, f64>) -> Result<()> {
        if a.ncols() != self.cols || y.ncols() != self.classes || a.nrows() != y.nrows() {
            return Err(Error::dim(format!(
                "chunk {}×{} with labels {}×{} does not fit a {}-column accumulator",
                a.nrows(),
                a.ncols(),
                y.nrows(),
                y.ncols(),
                self.cols
            )));
        }
        self.add_features(a);
        matmul(self.aty.as_mut(), Accum::Add, a.transpose(), y, 1.0, Par::Seq);
        Ok(())
    }

    /// Full symmetric `AᵀA`.
    pub fn gram(&self) -> Mat<f64> {
        let mut g = Mat::zeros(self.cols, self.cols);
        for ((i, j), tile) in &self.tiles {
            let (r0, c0) = (i * GRAM_TILE, j * GRAM_TILE);
            for c in 0..tile.ncols() {
                for r in 0..tile.nrows() {
                    let v = tile[(r, c)];
                    g[(r0 + r, c0 + c)] = v;
                    g[(c0 + c, r0 + r)] = v;
                }
            }
        }
        g
    }

    pub fn aty(&self) -> &Mat<f64> {
        &self.aty
    }

    pub fn into_parts(self) -> (Mat<f64>, Mat<f64>) {
        let g = self.gram();
        (g, self.aty)
    }
}

/// λ path from a Gram matrix: one eigendecomposition, then every grid value
/// is scored on validation features.
pub struct GramPath {
    v: Mat<f64>,
    evals: Vec<f64>,
    r: Mat<f64>,
}

impl GramPath {
    pub fn new(g: MatRef<'_, f64>, aty: MatRef<'_, f64>) -> Result<Self> {
        let (v, evals) = eigen(g)?;
        let r = v.transpose() * aty;
        Ok(GramPath { v, evals, r })
    }

    /// Weights for one λ.
    pub fn weights(&self, lambda: f64) -> Mat<f64> {
        let mut r = self.r.clone();
        for (i, e) in self.evals.iter().enumerate() {
            let s = 1.0 / (e.max(0.0) + lambda);
            r.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        &self.v * r
    }

    pub fn search(&self, a_val: MatRef<'_, f64>, val_labels: &[usize], grid: &[f64]) -> Result<LambdaChoice> {
        if grid.is_empty() {
            return Err(Error::config("lambda grid is empty"));
        }
        let path = SpectralPath {
            p: a_val * &self.v,
            evals: self.evals.clone(),
            r: self.r.clone(),
        };
        Ok(choose(grid, path.accuracies(grid, val_labels)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn labels(rows: usize, classes: usize, seed: u64) -> LabelMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..classes)).collect();
        LabelMatrix::one_hot(&l, classes).unwrap()
    }

    fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
        (a - b).norm_max()
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let y = LabelMatrix::one_hot(&[2, 0, 1], 3).unwrap();
        for i in 0..3 {
            assert_eq!(y.as_mat().row(i).iter().sum::<f64>(), 1.0);
        }
        assert!(LabelMatrix::one_hot(&[3], 3).is_err());
    }

    #[test]
    fn identity_features() {
        let y = labels(6, 3, 1);
        let a = Mat::<f64>::identity(6, 6);
        let w = ridge_solve(a.as_ref(), y.as_mat(), 1.0).unwrap();
        assert!(max_abs_diff(w.as_ref(), (y.as_mat() * 0.5).as_ref()) < 1e-15);
        let w = ridge_solve(a.as_ref(), y.as_mat(), 1e-12).unwrap();
        assert!(max_abs_diff(w.as_ref(), y.as_mat()) < 1e-10);
        let p = predict(w.as_ref(), a.as_ref()).unwrap();
        assert_eq!(p.classes, y.labels());
    }

    #[test]
    fn zero_features_predict_class_zero() {
        let w = random_mat(4, 3, 2);
        let p = predict(w.as_ref(), Mat::<f64>::zeros(5, 4).as_ref()).unwrap();
        assert_eq!(p.classes, vec![0; 5]);
    }

    #[test]
    fn primal_and_dual_agree() {
        let a = random_mat(50, 20, 3);
        let y = labels(50, 4, 4);
        let primal = solve_primal(a.as_ref(), y.as_mat(), 0.1).unwrap();
        let dual = solve_dual(a.as_ref(), y.as_mat(), 0.1).unwrap();
        assert!(max_abs_diff(primal.as_ref(), dual.as_ref()) <= 1e-9 * primal.norm_max());
        let pinv = ridge_pinv(a.as_ref(), 0.1).unwrap();
        assert!(max_abs_diff((&pinv * y.as_mat()).as_ref(), primal.as_ref()) < 1e-10);
        let wide = random_mat(10, 30, 5);
        let yw = labels(10, 3, 6);
        let w = ridge_solve(wide.as_ref(), yw.as_mat(), 0.1).unwrap();
        assert!(normal_residual(wide.as_ref(), yw.as_mat(), w.as_ref(), 0.1) <= 1e-8);
        let wide_pinv = ridge_pinv(wide.as_ref(), 0.1).unwrap();
        assert!(max_abs_diff((&wide_pinv * yw.as_mat()).as_ref(), w.as_ref()) < 1e-10);
    }

    #[test]
    fn pinv_limits() {
        // Orthonormal square A: pinv → Aᵀ as λ → 0.
        let q = random_mat(6, 6, 7).qr().compute_Q();
        let p = ridge_pinv(q.as_ref(), 1e-12).unwrap();
        assert!(max_abs_diff(p.as_ref(), q.transpose()) < 1e-9);
        let a = random_mat(8, 5, 8);
        let big = ridge_pinv(a.as_ref(), 1e6).unwrap();
        let approx = a.transpose() * (1.0 / 1e6);
        assert!(max_abs_diff(big.as_ref(), approx.as_ref()) <= 1e-6 * approx.norm_max() * 10.0);
        let a = random_mat(30, 10, 9);
        let p = ridge_pinv(a.as_ref(), 1e-10).unwrap();
        assert!(max_abs_diff((&p * &a).as_ref(), Mat::<f64>::identity(10, 10).as_ref()) < 1e-5);
    }

    #[test]
    fn rejects_bad_lambda_and_nan() {
        let a = random_mat(5, 3, 1);
        let y = labels(5, 2, 1);
        assert!(matches!(ridge_solve(a.as_ref(), y.as_mat(), 0.0), Err(Error::Config(_))));
        let mut bad = a.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(ridge_solve(bad.as_ref(), y.as_mat(), 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn lambda_search_rules() {
        let a = random_mat(40, 6, 10);
        let y = labels(40, 3, 11);
        let single = lambda_search(a.as_ref(), &y, a.as_ref(), &y, &[0.3]).unwrap();
        assert_eq!(single.lambda, 0.3);
        // Separable: features are the one-hot labels themselves.
        let one_hot = y.as_mat().to_owned();
        let grid = [1e2, 1e-3, 1.0, 1e-1];
        let c = lambda_search(one_hot.as_ref(), &y, one_hot.as_ref(), &y, &grid).unwrap();
        assert_eq!(c.accuracies, vec![1.0; 4]);
        assert_eq!(c.lambda, 1e-3);
        assert_eq!(crate::config::DEFAULT_LAMBDA_GRID.len(), 11);
    }

    #[test]
    fn gram_path_matches_direct_solve() {
        let a = random_mat(700, 530, 12);
        let y = labels(700, 4, 13);
        let mut acc = GramAccumulator::new(530, 4);
        for (s, e) in [(0, 300), (300, 301), (301, 700)] {
            acc.add(a.subrows(s, e - s), y.as_mat().subrows(s, e - s)).unwrap();
        }
        assert_eq!(acc.rows(), 700);
        let (g, aty) = acc.into_parts();
        let direct_g = a.transpose() * &a;
        assert!(max_abs_diff(g.as_ref(), direct_g.as_ref()) < 1e-10);
        let w = ridge_solve(a.as_ref(), y.as_mat(), 0.5).unwrap();
        let via_gram = spd_shift_solve(g.as_ref(), 0.5, aty.as_ref()).unwrap();
        assert!(max_abs_diff(w.as_ref(), via_gram.as_ref()) < 1e-9);
        let path = GramPath::new(g.as_ref(), aty.as_ref()).unwrap();
        assert!(max_abs_diff(path.weights(0.5).as_ref(), w.as_ref()) < 1e-8);
        let direct = lambda_search(a.as_ref(), &y, a.subrows(0, 100), &y.slice(0, 100), &[0.01, 1.0, 100.0]).unwrap();
        let streamed = path.search(a.subrows(0, 100), &y.labels()[..100], &[0.01, 1.0, 100.0]).unwrap();
        assert_eq!(direct.lambda, streamed.lambda);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn normal_equation_residual(rows in 5usize..60, cols in 2usize..40, seed in 0u64..1000, lexp in -6i32..4) {
            let lambda = 10f64.powi(lexp);
            let a = random_mat(rows, cols, seed);
            let y = labels(rows, 3, seed + 1);
            let w = ridge_solve(a.as_ref(), y.as_mat(), lambda).unwrap();
            prop_assert!(normal_residual(a.as_ref(), y.as_mat(), w.as_ref(), lambda) <= 1e-8);
        }

        #[test]
        fn uniform_score_scaling_keeps_argmax(seed in 0u64..1000, c in 0.01f64..100.0) {
            let s = random_mat(20, 5, seed);
            prop_assert_eq!(argmax_rows(s.as_ref()), argmax_rows((&s * c).as_ref()));
        }
    }

    #[test]
    fn loo_search_matches_brute_force() {
        let a = random_mat(15, 30, 21);
        let y = labels(15, 3, 22);
        let grid = [1e-3, 1e-1, 1.0, 10.0];
        let fast = loo_lambda_search(a.as_ref(), &y, &grid).unwrap();
        for (g, &lambda) in grid.iter().enumerate() {
            let mut hits = 0;
            for i in 0..15 {
                let keep: Vec<usize> = (0..15).filter(|&r| r != i).collect();
                let sub = Mat::from_fn(14, 30, |r, c| a[(keep[r], c)]);
                let sub_labels: Vec<usize> = keep.iter().map(|&r| y.labels()[r]).collect();
                let ys = LabelMatrix::one_hot(&sub_labels, 3).unwrap();
                let w = ridge_solve(sub.as_ref(), ys.as_mat(), lambda).unwrap();
                let pred = predict(w.as_ref(), a.as_ref().subrows(i, 1)).unwrap();
                hits += usize::from(pred.classes[0] == y.labels()[i]);
            }
            assert_eq!(fast.accuracies[g], hits as f64 / 15.0, "lambda {lambda}");
        }
    }
}
