//! Block updates of the ridge pseudo-inverse when columns are appended.
//!
//! With `D = A⁺N` and `Q = N − AD`, the pseudo-inverse of `[A | N]` is
//! `[A⁺ − DBᵀ ; Bᵀ]` where `Bᵀ = Q⁺` if `Q ≠ 0`, else `(I + DᵀD)⁻¹DᵀA⁺`, and
//! the output weights become `[W − DBᵀY ; BᵀY]`.
//!
//! [`pinv_append_cols`] applies this to explicit matrices. [`SolverState`]
//! keeps `A⁺` factored through a Cholesky factor of `AᵀA + λI`, so the
//! `cols × N` pseudo-inverse of a large training set is never stored; feature
//! rows are streamed twice per update through a [`ColumnSource`].

use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Accum, Mat, MatRef, Par, Side};

use crate::error::{Error, Result};
use crate::ridge::{ridge_pinv, spd_shift_solve};

/// Relative Frobenius threshold below which Q counts as zero.
pub const Q_ZERO_TOL: f64 = 1e-10;

/// Relative size above which ‖Q‖ from the Gram identity is trusted without a
/// streaming pass (well above its rounding floor of about 1e-8).
const Q_RESOLVED_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QBranch {
    Nonzero,
    Zero,
}

impl QBranch {
    pub fn as_str(self) -> &'static str {
        match self {
            QBranch::Nonzero => "nonzero",
            QBranch::Zero => "zero",
        }
    }
}

fn q_is_zero(q_norm: f64, n_norm: f64) -> bool {
    q_norm <= Q_ZERO_TOL * n_norm.max(1.0)
}

/// Result of [`pinv_append_cols`].
#[derive(Clone, Debug)]
pub struct Appended {
    /// Pseudo-inverse of `[A | N]`.
    pub pinv: Mat<f64>,
    /// `[A | N]`.
    pub a: Mat<f64>,
    pub d: Mat<f64>,
    pub b_t: Mat<f64>,
    pub branch: QBranch,
}

/// Block update of an explicit pseudo-inverse after appending `new` to the right of `a`.
pub fn pinv_append_cols(a_pinv: MatRef<'_, f64>, a: MatRef<'_, f64>, new: MatRef<'_, f64>, lambda: f64) -> Result<Appended> {
    if a_pinv.nrows() != a.ncols() || a_pinv.ncols() != a.nrows() || new.nrows() != a.nrows() {
        return Err(Error::input(format!(
            "cannot append {}×{} to A {}×{} with pinv {}×{}",
            new.nrows(),
            new.ncols(),
            a.nrows(),
            a.ncols(),
            a_pinv.nrows(),
            a_pinv.ncols()
        )));
    }
    let (rows, cols, p) = (a.nrows(), a.ncols(), new.ncols());
    let mut joined = Mat::zeros(rows, cols + p);
    joined.as_mut().subcols_mut(0, cols).copy_from(a);
    joined.as_mut().subcols_mut(cols, p).copy_from(new);
    if p == 0 {
        return Ok(Appended {
            pinv: a_pinv.to_owned(),
            a: joined,
            d: Mat::zeros(cols, 0),
            b_t: Mat::zeros(0, rows),
            branch: QBranch::Zero,
        });
    }
    let d = a_pinv * new;
    let q = new - a * &d;
    let branch = if q_is_zero(q.norm_l2(), new.norm_l2()) {
        QBranch::Zero
    } else {
        QBranch::Nonzero
    };
    let b_t = match branch {
        QBranch::Nonzero => ridge_pinv(q.as_ref(), lambda)?,
        QBranch::Zero => {
            let dtd = d.transpose() * &d;
            let rhs = d.transpose() * a_pinv;
            spd_shift_solve(dtd.as_ref(), 1.0, rhs.as_ref())?
        }
    };
    let mut pinv = Mat::zeros(cols + p, rows);
    pinv.as_mut().subrows_mut(0, cols).copy_from(a_pinv - &d * &b_t);
    pinv.as_mut().subrows_mut(cols, p).copy_from(&b_t);
    Ok(Appended {
        pinv,
        a: joined,
        d,
        b_t,
        branch,
    })
}

/// `[W − D·BᵀY ; BᵀY]`.
pub fn append_weights(w: MatRef<'_, f64>, d: MatRef<'_, f64>, bty: MatRef<'_, f64>) -> Mat<f64> {
    let (cols, p) = (w.nrows(), bty.nrows());
    let mut out = Mat::zeros(cols + p, w.ncols());
    out.as_mut().subrows_mut(0, cols).copy_from(w - d * bty);
    out.as_mut().subrows_mut(cols, p).copy_from(bty);
    out
}

/// Row chunks of the current features `A`, the appended columns `N` and the labels `Y`.
pub trait ColumnSource {
    /// Calls `f(a, n, y)` on consecutive row chunks, always in the same order.
    fn for_each_chunk(&mut self, f: &mut dyn FnMut(MatRef<'_, f64>, MatRef<'_, f64>, MatRef<'_, f64>) -> Result<()>) -> Result<()>;
}

/// In-memory [`ColumnSource`], split into fixed-size chunks.
pub struct MatrixSource<'a> {
    pub a: MatRef<'a, f64>,
    pub n: MatRef<'a, f64>,
    pub y: MatRef<'a, f64>,
    pub chunk: usize,
}

impl ColumnSource for MatrixSource<'_> {
    fn for_each_chunk(&mut self, f: &mut dyn FnMut(MatRef<'_, f64>, MatRef<'_, f64>, MatRef<'_, f64>) -> Result<()>) -> Result<()> {
        let rows = self.a.nrows();
        let mut s = 0;
        while s < rows {
            let len = self.chunk.max(1).min(rows - s);
            f(self.a.subrows(s, len), self.n.subrows(s, len), self.y.subrows(s, len))?;
            s += len;
        }
        Ok(())
    }
}

/// Summary of one factored update.
#[derive(Clone, Debug, PartialEq)]
pub struct AppendSummary {
    pub new_cols: usize,
    pub branch: QBranch,
    pub q_norm: f64,
}

/// Lower Cholesky factor of a symmetric positive-definite matrix. If rounding
/// has made the matrix numerically indefinite, a growing diagonal jitter is
/// added until the factorisation succeeds.
fn cholesky(mut x: Mat<f64>) -> Result<Mat<f64>> {
    let n = x.nrows();
    let scale = (0..n).map(|i| x[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    for _ in 0..12 {
        if let Ok(llt) = x.llt(Side::Lower) {
            if jitter > 0.0 {
                log::warn!("Cholesky of a {n}×{n} system needed a diagonal jitter of {jitter:e}");
            }
            return Ok(llt.L().to_owned());
        }
        let step = if jitter == 0.0 { 1e-14 * scale } else { 9.0 * jitter };
        for i in 0..n {
            x[(i, i)] += step;
        }
        jitter += step;
    }
    Err(Error::numeric(format!("{n}×{n} system is not positive definite")))
}

/// Ridge solution with `A⁺ = (AᵀA + λI)⁻¹Aᵀ` kept as the Cholesky factor `L`
/// of `AᵀA + λI`.
///
/// Appending `N` borders the factor: `C = L⁻¹AᵀN`, `S = NᵀN + λI − CᵀC`,
/// `L' = [L 0 ; Cᵀ chol(S)]`. In the stacked form above this is
/// `Bᵀ = S⁻¹Qᵀ` with `S = QᵀQ + λ(I + DᵀD)`, which tends to both branches as
/// `λ → 0` and keeps the weights equal to a from-scratch ridge solve.
#[derive(Clone, Debug)]
pub struct SolverState {
    lambda: f64,
    rows: usize,
    l: Mat<f64>,
    aty: Mat<f64>,
    w: Mat<f64>,
    gram: Option<Mat<f64>>,
}

impl SolverState {
    /// Starts from `AᵀA` and `AᵀY`.
    pub fn from_gram(gram: Mat<f64>, aty: Mat<f64>, rows: usize, lambda: f64, keep_gram: bool) -> Result<Self> {
        let n = gram.nrows();
        if gram.ncols() != n || aty.nrows() != n {
            return Err(Error::dim("Gram matrix and AᵀY disagree in size"));
        }
        let mut shifted = gram.clone();
        for i in 0..n {
            shifted[(i, i)] += lambda;
        }
        let l = cholesky(shifted)?;
        let mut state = SolverState {
            lambda,
            rows,
            l,
            aty,
            w: Mat::zeros(0, 0),
            gram: keep_gram.then_some(gram),
        };
        state.w = state.solve(state.aty.as_ref());
        Ok(state)
    }

    /// Rebuilds a state from stored parts.
    pub fn from_parts(lambda: f64, rows: usize, l: Mat<f64>, aty: Mat<f64>, w: Mat<f64>, gram: Option<Mat<f64>>) -> Result<Self> {
        let n = l.nrows();
        if l.ncols() != n || aty.nrows() != n || w.nrows() != n || gram.as_ref().is_some_and(|g| g.nrows() != n) {
            return Err(Error::dim("solver state parts disagree in size"));
        }
        Ok(SolverState {
            lambda,
            rows,
            l,
            aty,
            w,
            gram,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.l.nrows()
    }

    pub fn weights(&self) -> MatRef<'_, f64> {
        self.w.as_ref()
    }

    /// Lower Cholesky factor of `AᵀA + λI`.
    pub fn factor(&self) -> MatRef<'_, f64> {
        self.l.as_ref()
    }

    pub fn aty(&self) -> MatRef<'_, f64> {
        self.aty.as_ref()
    }

    pub fn gram(&self) -> Option<MatRef<'_, f64>> {
        self.gram.as_ref().map(|g| g.as_ref())
    }

    /// `(AᵀA + λI)⁻¹·rhs`.
    fn solve(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        let mut x = rhs.to_owned();
        solve_lower_triangular_in_place(self.l.as_ref(), x.as_mut(), Par::Seq);
        solve_upper_triangular_in_place(self.l.transpose(), x.as_mut(), Par::Seq);
        x
    }

    /// Explicit `A⁺` (small problems and tests only).
    pub fn pinv(&self, a: MatRef<'_, f64>) -> Mat<f64> {
        self.solve(a.transpose())
    }

    /// From-scratch ridge weights on the current features, from the kept Gram matrix.
    pub fn retrain_weights(&self) -> Result<Mat<f64>> {
        let g = self
            .gram
            .as_ref()
            .ok_or_else(|| Error::Capability("solver state does not keep AᵀA".into()))?;
        spd_shift_solve(g.as_ref(), self.lambda, self.aty.as_ref())
    }

    /// Appends the columns delivered by `src` and updates the factor and `W`.
    pub fn append(&mut self, p: usize, src: &mut dyn ColumnSource) -> Result<AppendSummary> {
        let cols = self.cols();
        let classes = self.w.ncols();
        if p == 0 {
            return Ok(AppendSummary {
                new_cols: 0,
                branch: QBranch::Zero,
                q_norm: 0.0,
            });
        }
        let check = |a: MatRef<'_, f64>, n: MatRef<'_, f64>, y: MatRef<'_, f64>| {
            if a.ncols() != cols || n.ncols() != p || y.ncols() != classes || a.nrows() != n.nrows() || a.nrows() != y.nrows() {
                Err(Error::input(format!(
                    "chunk shapes A {}×{}, N {}×{}, Y {}×{} do not match a {cols}-column state growing by {p}",
                    a.nrows(),
                    a.ncols(),
                    n.nrows(),
                    n.ncols(),
                    y.nrows(),
                    y.ncols()
                )))
            } else {
                Ok(())
            }
        };

        let mut atn = Mat::<f64>::zeros(cols, p);
        let mut ntn = Mat::<f64>::zeros(p, p);
        let mut nty = Mat::<f64>::zeros(p, classes);
        let mut rows = 0;
        src.for_each_chunk(&mut |a, n, y| {
            check(a, n, y)?;
            matmul(atn.as_mut(), Accum::Add, a.transpose(), n, 1.0, Par::Seq);
            matmul(ntn.as_mut(), Accum::Add, n.transpose(), n, 1.0, Par::Seq);
            matmul(nty.as_mut(), Accum::Add, n.transpose(), y, 1.0, Par::Seq);
            rows += a.nrows();
            Ok(())
        })?;
        if rows != self.rows {
            return Err(Error::input(format!("column source has {rows} rows, state has {}", self.rows)));
        }

        let mut c = atn.clone();
        solve_lower_triangular_in_place(self.l.as_ref(), c.as_mut(), Par::Seq);
        let mut d = c.clone();
        solve_upper_triangular_in_place(self.l.transpose(), d.as_mut(), Par::Seq);

        // NᵀN − CᵀC = QᵀQ + λDᵀD with Q = N − AD, so ‖Q‖ comes without another pass
        // unless cancellation leaves it too close to zero to call.
        let mut schur = ntn.clone();
        matmul(schur.as_mut(), Accum::Add, c.transpose(), &c, -1.0, Par::Seq);
        let trace = |m: &Mat<f64>| (0..p).map(|i| m[(i, i)]).sum::<f64>().max(0.0);
        let n_norm = trace(&ntn).sqrt();
        let q_sq = trace(&schur) - self.lambda * d.squared_norm_l2();
        let q_norm = if q_sq > (Q_RESOLVED_TOL * n_norm.max(1.0)).powi(2) {
            q_sq.sqrt()
        } else {
            let mut qtq = Mat::<f64>::zeros(p, p);
            src.for_each_chunk(&mut |a, n, y| {
                check(a, n, y)?;
                let q = n - a * &d;
                matmul(qtq.as_mut(), Accum::Add, q.transpose(), &q, 1.0, Par::Seq);
                Ok(())
            })?;
            trace(&qtq).sqrt()
        };
        let branch = if q_is_zero(q_norm, n_norm) {
            QBranch::Zero
        } else {
            QBranch::Nonzero
        };

        for i in 0..p {
            for j in 0..i {
                let v = 0.5 * (schur[(i, j)] + schur[(j, i)]);
                schur[(i, j)] = v;
                schur[(j, i)] = v;
            }
            schur[(i, i)] += self.lambda;
        }
        let l_s = cholesky(schur)?;

        let mut l = Mat::<f64>::zeros(cols + p, cols + p);
        l.as_mut().submatrix_mut(0, 0, cols, cols).copy_from(&self.l);
        l.as_mut().submatrix_mut(cols, 0, p, cols).copy_from(c.transpose());
        l.as_mut().submatrix_mut(cols, cols, p, p).copy_from(&l_s);
        self.l = l;

        let mut aty = Mat::<f64>::zeros(cols + p, classes);
        aty.as_mut().subrows_mut(0, cols).copy_from(&self.aty);
        aty.as_mut().subrows_mut(cols, p).copy_from(&nty);
        self.aty = aty;
        self.w = self.solve(self.aty.as_ref());

        if let Some(g) = self.gram.take() {
            let mut ng = Mat::<f64>::zeros(cols + p, cols + p);
            ng.as_mut().submatrix_mut(0, 0, cols, cols).copy_from(&g);
            drop(g);
            ng.as_mut().submatrix_mut(0, cols, cols, p).copy_from(&atn);
            ng.as_mut().submatrix_mut(cols, 0, p, cols).copy_from(atn.transpose());
            ng.as_mut().submatrix_mut(cols, cols, p, p).copy_from(&ntn);
            self.gram = Some(ng);
        }
        Ok(AppendSummary {
            new_cols: p,
            branch,
            q_norm,
        })
    }
}
