//! Spherical K-means filter learning.
//!
//! Each step assigns every patch to the filter with the largest absolute
//! response, keeps the signed response as the only nonzero code entry, adds
//! the resulting `P·Uᵀ` onto the current filters (a damped update) and
//! renormalises every filter to unit length.

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::PatchMatrix;

/// Default number of SKM iterations.
pub const DEFAULT_ITERATIONS: usize = 10;

/// Pre-normalisation norm below which a filter is considered empty.
const EMPTY_NORM: f64 = 1e-12;

/// Patches per assignment block. Fixed so the reduction order never depends on
/// the thread count.
const ASSIGN_BLOCK: usize = 8192;

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    k: usize,
    dim: usize,
    /// `k × dim`, one unit-norm filter per row.
    weights: Vec<f64>,
    iterations_run: usize,
    /// Σ_s max_t (w_tᵀp_s)² measured before each step.
    objective_trace: Vec<f64>,
    /// Whether any filter was reinitialised during the corresponding step.
    reinit_flags: Vec<bool>,
}

impl FilterBank {
    /// Builds a bank from explicit weights; rows are normalised.
    pub fn from_weights(k: usize, dim: usize, mut weights: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 || weights.len() != k * dim {
            return Err(Error::dim(format!(
                "filter bank {k}×{dim} cannot hold {} weights",
                weights.len()
            )));
        }
        for row in weights.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > EMPTY_NORM) {
                return Err(Error::numeric("filter with zero norm"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(FilterBank {
            k,
            dim,
            weights,
            iterations_run: 0,
            objective_trace: Vec::new(),
            reinit_flags: Vec::new(),
        })
    }

    /// Bank from weights that are already unit rows (archive loading).
    pub(crate) fn from_unit_rows(k: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 || weights.len() != k * dim {
            return Err(Error::dim(format!(
                "filter bank {k}×{dim} cannot hold {} weights",
                weights.len()
            )));
        }
        Ok(FilterBank {
            k,
            dim,
            weights,
            iterations_run: 0,
            objective_trace: Vec::new(),
            reinit_flags: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn filter(&self, t: usize) -> &[f64] {
        &self.weights[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_mat(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.weights, self.k, self.dim)
    }

    pub fn iterations_run(&self) -> usize {
        self.iterations_run
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    pub fn reinit_flags(&self) -> &[bool] {
        &self.reinit_flags
    }

    /// Mean absolute cosine between distinct filters.
    pub fn mean_coherence(&self) -> f64 {
        if self.k < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for a in 0..self.k {
            for b in a + 1..self.k {
                let dot: f64 = self.filter(a).iter().zip(self.filter(b)).map(|(x, y)| x * y).sum();
                total += dot.abs();
            }
        }
        total / (self.k * (self.k - 1) / 2) as f64
    }
}

/// Random unit-norm filters with i.i.d. standard normal entries before normalisation.
pub fn skm_init<R: Rng + ?Sized>(dim: usize, k: usize, rng: &mut R) -> Result<FilterBank> {
    if k == 0 || dim == 0 {
        return Err(Error::input(format!("filter bank needs k >= 1 and dim >= 1, got {k}, {dim}")));
    }
    loop {
        let weights: Vec<f64> = (0..k * dim).map(|_| StandardNormal.sample(rng)).collect();
        // A zero row has probability zero; redraw the whole bank if it ever happens.
        if let Ok(bank) = FilterBank::from_weights(k, dim, weights) {
            return Ok(bank);
        }
    }
}

/// Index of the filter with the largest |response|; ties go to the lowest index.
#[inline]
fn abs_argmax(responses: &[f64]) -> usize {
    let mut best = 0;
    let mut best_abs = responses[0].abs();
    for (t, r) in responses.iter().enumerate().skip(1) {
        if r.abs() > best_abs {
            best = t;
            best_abs = r.abs();
        }
    }
    best
}

/// Assigns every patch: `(filter index, signed response)`.
pub fn assign(bank: &FilterBank, patches: &PatchMatrix) -> Result<Vec<(usize, f64)>> {
    check_dims(bank, patches)?;
    let k = bank.k;
    let mut out = Vec::with_capacity(patches.rows());
    for block in patches.data().chunks(ASSIGN_BLOCK * bank.dim) {
        let rows = block.len() / bank.dim;
        let responses = block_responses(bank, block, rows);
        out.extend(responses.chunks(k).map(|r| {
            let t = abs_argmax(r);
            (t, r[t])
        }));
    }
    Ok(out)
}

fn check_dims(bank: &FilterBank, patches: &PatchMatrix) -> Result<()> {
    if patches.cols() != bank.dim {
        return Err(Error::input(format!(
            "patch dimension {} does not match filter dimension {}",
            patches.cols(),
            bank.dim
        )));
    }
    if patches.rows() == 0 {
        return Err(Error::input("no patches"));
    }
    Ok(())
}

/// `rows × k` responses of a row-major block of patches.
fn block_responses(bank: &FilterBank, block: &[f64], rows: usize) -> Vec<f64> {
    let mut responses = vec![0.0; rows * bank.k];
    let p = MatRef::from_row_major_slice(block, rows, bank.dim);
    let out = MatMut::from_row_major_slice_mut(&mut responses, rows, bank.k);
    matmul(out, Accum::Replace, p, bank.as_mat().transpose(), 1.0, Par::Seq);
    responses
}

/// One SKM update. `rng` is consumed only when a filter has to be reinitialised.
pub fn skm_step<R: Rng + ?Sized>(bank: &FilterBank, patches: &PatchMatrix, rng: &mut R) -> Result<FilterBank> {
    check_dims(bank, patches)?;
    let (k, dim) = (bank.k, bank.dim);

    // Per-block partial sums of P·Uᵀ and the objective, reduced in block order.
    let partials: Vec<(Vec<f64>, f64)> = patches
        .data()
        .par_chunks(ASSIGN_BLOCK * dim)
        .map(|block| {
            let rows = block.len() / dim;
            let responses = block_responses(bank, block, rows);
            let mut acc = vec![0.0; k * dim];
            let mut objective = 0.0;
            for (r, p) in responses.chunks(k).zip(block.chunks(dim)) {
                let t = abs_argmax(r);
                let coef = r[t];
                objective += coef * coef;
                for (a, v) in acc[t * dim..(t + 1) * dim].iter_mut().zip(p) {
                    *a += coef * v;
                }
            }
            (acc, objective)
        })
        .collect();

    let mut weights = bank.weights.clone();
    let mut objective = 0.0;
    for (acc, obj) in &partials {
        for (w, a) in weights.iter_mut().zip(acc) {
            *w += a;
        }
        objective += obj;
    }

    let mut reinit = false;
    for t in 0..k {
        let row = &mut weights[t * dim..(t + 1) * dim];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < EMPTY_NORM || !norm.is_finite() {
            reinit = true;
            loop {
                let s = rng.gen_range(0..patches.rows());
                row.copy_from_slice(patches.row(s));
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > EMPTY_NORM {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
                // Every patch is zero: fall back to a random direction.
                if patches.data().iter().all(|&v| v == 0.0) {
                    let fresh = skm_init(dim, 1, rng)?;
                    row.copy_from_slice(fresh.filter(0));
                    break;
                }
            }
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }

    let mut objective_trace = bank.objective_trace.clone();
    objective_trace.push(objective);
    let mut reinit_flags = bank.reinit_flags.clone();
    reinit_flags.push(reinit);
    Ok(FilterBank {
        k,
        dim,
        weights,
        iterations_run: bank.iterations_run + 1,
        objective_trace,
        reinit_flags,
    })
}

/// Random initialisation followed by `iters` SKM steps.
pub fn skm_fit<R: Rng + ?Sized>(
    patches: &PatchMatrix,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<FilterBank> {
    if iters == 0 {
        return Err(Error::config("SKM needs at least one iteration"));
    }
    let mut bank = skm_init(patches.cols(), k, rng)?;
    for _ in 0..iters {
        bank = skm_step(&bank, patches, rng)?;
    }
    Ok(bank)
}
