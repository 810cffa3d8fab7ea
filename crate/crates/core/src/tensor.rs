//! Dense rank-4 feature volumes and the forward kernels built on them.
//!
//! Every volume is stored as `samples × channels × height × width` in a flat
//! row-major `Vec<f64>`. Kernels here are pure functions of their inputs and
//! parallelise over the sample axis only, so results never depend on the
//! number of worker threads.

use std::fmt;
use std::str::FromStr;

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Vec<f64>,
    shape: [usize; 4],
}

impl ImageBatch {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("all dimensions must be >= 1, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::dim(format!(
                "data length {} does not match shape {shape:?} ({len})",
                data.len()
            )));
        }
        Ok(ImageBatch { data, shape })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized shape {shape:?}");
        ImageBatch {
            data: vec![0.0; shape.iter().product()],
            shape,
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(shape);
        let [n, c, h, w] = shape;
        let mut idx = 0;
        for s in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.data[idx] = f(s, ch, y, x);
                        idx += 1;
                    }
                }
            }
        }
        out
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of values per sample (`c·h·w`).
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn get(&self, s: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((s * ch + c) * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the samples at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Result<ImageBatch> {
        if indices.is_empty() {
            return Err(Error::input("cannot select zero samples"));
        }
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.n() {
                return Err(Error::input(format!("sample index {i} out of range {}", self.n())));
            }
            data.extend_from_slice(self.sample(i));
        }
        ImageBatch::new([indices.len(), self.shape[1], self.shape[2], self.shape[3]], data)
    }

    /// Copies a contiguous range of samples.
    pub fn slice_samples(&self, start: usize, end: usize) -> Result<ImageBatch> {
        if start >= end || end > self.n() {
            return Err(Error::input(format!(
                "invalid sample range {start}..{end} for batch of {}",
                self.n()
            )));
        }
        let len = self.sample_len();
        ImageBatch::new(
            [end - start, self.shape[1], self.shape[2], self.shape[3]],
            self.data[start * len..end * len].to_vec(),
        )
    }

    /// Copies the channel range `[start, end)` of every sample.
    pub fn channel_slice(&self, start: usize, end: usize) -> Result<ImageBatch> {
        let [n, c, h, w] = self.shape;
        if start >= end || end > c {
            return Err(Error::dim(format!("invalid channel range {start}..{end} for {c} channels")));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * plane);
        for s in 0..n {
            let base = s * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        ImageBatch::new([n, end - start, h, w], data)
    }

    /// Concatenates volumes with identical sample count and spatial size along the channel axis.
    pub fn concat_channels(parts: &[&ImageBatch]) -> Result<ImageBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("nothing to concatenate"))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.n() != n || p.height() != h || p.width() != w {
                return Err(Error::dim(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
        }
        let c_total: usize = parts.iter().map(|p| p.channels()).sum();
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for s in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(s));
            }
        }
        ImageBatch::new([n, c_total, h, w], data)
    }

    /// Concatenates volumes with identical per-sample shape along the sample axis.
    pub fn concat_samples(parts: &[&ImageBatch]) -> Result<ImageBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("nothing to concatenate"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::dim(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.n();
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        ImageBatch::new([n, c, h, w], data)
    }

    /// Applies `f` to every sample in parallel, producing a new batch whose
    /// per-sample shape is `out_chw`.
    pub(crate) fn map_samples<F>(&self, out_chw: [usize; 3], f: F) -> ImageBatch
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let out_len = out_chw.iter().product::<usize>();
        let in_len = self.sample_len();
        let mut out = vec![0.0; self.n() * out_len];
        out.par_chunks_mut(out_len)
            .zip(self.data.par_chunks(in_len))
            .for_each(|(o, i)| f(i, o));
        ImageBatch {
            data: out,
            shape: [self.n(), out_chw[0], out_chw[1], out_chw[2]],
        }
    }
}

/// Convolution border handling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `kernel − 1` zeros in total per axis; when odd, the extra one goes before (top/left).
    Same,
    Valid,
}

impl Padding {
    /// Zeros inserted before and after an axis.
    pub fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let total = kernel.saturating_sub(1);
                let before = total - total / 2;
                (before, total / 2)
            }
        }
    }
}

/// Output length of a sliding window along one axis.
pub fn window_output_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim("stride must be >= 1"));
    }
    if kernel == 0 {
        return Err(Error::dim("kernel must be >= 1"));
    }
    let (b, a) = padding.amounts(kernel);
    let padded = input + b + a;
    if kernel > padded {
        return Err(Error::dim(format!(
            "kernel {kernel} larger than padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Patches stored row-major, one patch per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl PatchMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "patch data length {} != {rows}×{cols}",
                data.len()
            )));
        }
        Ok(PatchMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_mat(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.rows, self.cols)
    }
}

/// Geometry of one convolution over a single sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(chw: [usize; 3], kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        let [_, height, width] = chw;
        let out_h = window_output_len(height, kernel, stride, padding)?;
        let out_w = window_output_len(width, kernel, stride, padding)?;
        let (pad_top, _) = padding.amounts(kernel);
        Ok(ConvGeometry {
            height,
            width,
            kernel,
            stride,
            pad_top,
            pad_left: pad_top,
            out_h,
            out_w,
        })
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch_dim(&self, group_channels: usize) -> usize {
        self.kernel * self.kernel * group_channels
    }

    /// Writes the patches of channels `[c0, c1)` of one sample into `out`
    /// (`positions × patch_dim`, row-major). Element order inside a patch is
    /// channel, then kernel row, then kernel column.
    pub fn im2col_into(&self, sample: &[f64], c0: usize, c1: usize, out: &mut [f64]) {
        let k = self.kernel;
        let dim = self.patch_dim(c1 - c0);
        debug_assert_eq!(out.len(), self.positions() * dim);
        let plane = self.height * self.width;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut out[(oy * self.out_w + ox) * dim..][..dim];
                let y0 = (oy * self.stride) as isize - self.pad_top as isize;
                let x0 = (ox * self.stride) as isize - self.pad_left as isize;
                let mut idx = 0;
                for c in c0..c1 {
                    let chan = &sample[c * plane..(c + 1) * plane];
                    for ky in 0..k {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= self.height as isize {
                            row[idx..idx + k].fill(0.0);
                            idx += k;
                            continue;
                        }
                        let line = &chan[y as usize * self.width..(y as usize + 1) * self.width];
                        for kx in 0..k {
                            let x = x0 + kx as isize;
                            row[idx] = if x < 0 || x >= self.width as isize {
                                0.0
                            } else {
                                line[x as usize]
                            };
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds every sample into patch rows (sample-major, then output row, then output column).
///
/// Returns the patch matrix and the spatial output size `(out_h, out_w)`.
pub fn im2col(
    batch: &ImageBatch,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(PatchMatrix, (usize, usize))> {
    let [n, c, h, w] = batch.shape();
    let geo = ConvGeometry::new([c, h, w], kernel, stride, padding)?;
    let dim = geo.patch_dim(c);
    let per_sample = geo.positions() * dim;
    let mut data = vec![0.0; n * per_sample];
    data.par_chunks_mut(per_sample)
        .enumerate()
        .for_each(|(s, out)| geo.im2col_into(batch.sample(s), 0, c, out));
    Ok((
        PatchMatrix::new(n * geo.positions(), dim, data)?,
        (geo.out_h, geo.out_w),
    ))
}

/// Spatial pooling reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Max,
    Avg,
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Max => "max",
            PoolKind::Avg => "avg",
        })
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolKind::Max),
            "avg" => Ok(PoolKind::Avg),
            other => Err(Error::config(format!("unknown pool kind {other:?} (expected max|avg)"))),
        }
    }
}

/// Pools one `h × w` plane into `out` using a square window without padding.
pub(crate) fn pool_plane(
    plane: &[f64],
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    kind: PoolKind,
    out: &mut [f64],
) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    pool_plane_first(plane, w, window, stride, oh, ow, kind, out);
}

/// Pools only the first `oh × ow` windows of a plane of width `w`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pool_plane_first(
    plane: &[f64],
    w: usize,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    kind: PoolKind,
    out: &mut [f64],
) {
    let inv = 1.0 / (window * window) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = match kind {
                PoolKind::Max => f64::NEG_INFINITY,
                PoolKind::Avg => 0.0,
            };
            for y in oy * stride..oy * stride + window {
                let line = &plane[y * w + ox * stride..y * w + ox * stride + window];
                match kind {
                    PoolKind::Max => {
                        for &v in line {
                            acc = acc.max(v);
                        }
                    }
                    PoolKind::Avg => {
                        for &v in line {
                            acc += v;
                        }
                    }
                }
            }
            out[oy * ow + ox] = match kind {
                PoolKind::Max => acc,
                PoolKind::Avg => acc * inv,
            };
        }
    }
}

/// Square-window pooling with no padding; output size `⌊(in − window)/stride⌋ + 1`.
pub fn pool(batch: &ImageBatch, window: usize, stride: usize, kind: PoolKind) -> Result<ImageBatch> {
    let [_, c, h, w] = batch.shape();
    if window == 0 || stride == 0 {
        return Err(Error::dim("pool window and stride must be >= 1"));
    }
    if window > h || window > w {
        return Err(Error::dim(format!("pool window {window} larger than input {h}×{w}")));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    Ok(batch.map_samples([c, oh, ow], |src, dst| {
        for ch in 0..c {
            pool_plane(
                &src[ch * h * w..(ch + 1) * h * w],
                h,
                w,
                window,
                stride,
                kind,
                &mut dst[ch * oh * ow..(ch + 1) * oh * ow],
            );
        }
    }))
}

pub fn avg_pool(batch: &ImageBatch, window: usize, stride: usize) -> Result<ImageBatch> {
    pool(batch, window, stride, PoolKind::Avg)
}

/// Window and stride `(⌈v/b⌉, ⌊v/b⌋)` used to pool a side of length `v` to `b` cells.
///
/// These never give fewer than `b` windows, but can give more (v = 5, b = 3
/// gives 4); [`resize_pool`] keeps the first `b`.
pub fn pyramid_window(v: usize, b: usize) -> Result<(usize, usize)> {
    if b == 0 || b > v {
        return Err(Error::dim(format!("target size {b} must be in 1..={v}")));
    }
    Ok((v.div_ceil(b), v / b))
}

/// Average-pools a square volume down to `b × b`.
pub fn resize_pool(batch: &ImageBatch, b: usize) -> Result<ImageBatch> {
    resize_pool_with(batch, b, PoolKind::Avg)
}

pub(crate) fn resize_pool_with(batch: &ImageBatch, b: usize, kind: PoolKind) -> Result<ImageBatch> {
    let v = batch.height();
    if batch.width() != v {
        return Err(Error::dim(format!(
            "resize_pool expects square maps, got {}×{}",
            v,
            batch.width()
        )));
    }
    if b == v {
        return Ok(batch.clone());
    }
    let (win, stride) = pyramid_window(v, b)?;
    let c = batch.channels();
    Ok(batch.map_samples([c, b, b], |src, dst| {
        for ch in 0..c {
            pool_plane_first(
                &src[ch * v * v..(ch + 1) * v * v],
                v,
                win,
                stride,
                b,
                b,
                kind,
                &mut dst[ch * b * b..(ch + 1) * b * b],
            );
        }
    }))
}

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::config(format!(
                "unknown activation {other:?} (expected relu|tanh|sigmoid)"
            ))),
        }
    }
}

pub fn activate(batch: &ImageBatch, kind: Activation) -> ImageBatch {
    let mut out = batch.clone();
    out.data.par_iter_mut().for_each(|v| *v = kind.apply(*v));
    out
}

/// Dense convolution with bias followed by an activation.
///
/// `weights` is `out × (in·k·k)` row-major with the same element order as
/// [`im2col`] patches.
pub fn conv2d(
    batch: &ImageBatch,
    weights: &[f64],
    bias: &[f64],
    kernel: usize,
    stride: usize,
    padding: Padding,
    act: Activation,
) -> Result<ImageBatch> {
    let [_, c, h, w] = batch.shape();
    let out_c = bias.len();
    let geo = ConvGeometry::new([c, h, w], kernel, stride, padding)?;
    let dim = geo.patch_dim(c);
    if weights.len() != out_c * dim {
        return Err(Error::dim(format!(
            "conv weights have {} values, expected {out_c}×{dim}",
            weights.len()
        )));
    }
    let filters = MatRef::from_row_major_slice(weights, out_c, dim);
    let positions = geo.positions();
    Ok(batch.map_samples([out_c, geo.out_h, geo.out_w], |src, dst| {
        let mut cols = vec![0.0; positions * dim];
        geo.im2col_into(src, 0, c, &mut cols);
        let patches = MatRef::from_row_major_slice(&cols, positions, dim);
        // dst viewed as out_c × positions row-major.
        let mut out = MatMut::from_row_major_slice_mut(dst, out_c, positions);
        matmul(out.as_mut(), Accum::Replace, filters, patches.transpose(), 1.0, Par::Seq);
        for (o, &b) in bias.iter().enumerate() {
            for v in out.as_mut().row_mut(o).iter_mut() {
                *v = act.apply(*v + b);
            }
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(shape: [usize; 4], seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Reference sliding window: value of the padded input at an absolute position.
    fn padded_value(b: &ImageBatch, s: usize, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= b.height() as isize || x >= b.width() as isize {
            0.0
        } else {
            b.get(s, c, y as usize, x as usize)
        }
    }

    #[test]
    fn rejects_zero_dims_and_bad_length() {
        assert!(ImageBatch::new([1, 0, 2, 2], vec![]).is_err());
        assert!(ImageBatch::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn im2col_single_full_cover_patch() {
        let b = ImageBatch::from_fn([1, 1, 3, 3], |_, _, y, x| (y * 3 + x) as f64);
        let (p, dims) = im2col(&b, 3, 1, Padding::Valid).unwrap();
        assert_eq!(dims, (1, 1));
        assert_eq!(p.rows(), 1);
        assert_eq!(p.row(0), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn im2col_tiling() {
        let b = ImageBatch::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f64);
        let (p, dims) = im2col(&b, 2, 2, Padding::Valid).unwrap();
        assert_eq!(dims, (2, 2));
        assert_eq!(p.rows(), 4);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn im2col_same_padding_zero_counts() {
        let b = ImageBatch::from_fn([1, 1, 5, 5], |_, _, _, _| 1.0);
        let (p, dims) = im2col(&b, 3, 1, Padding::Same).unwrap();
        assert_eq!(dims, (5, 5));
        assert_eq!(p.rows(), 25);
        let zeros = |r: usize| p.row(r).iter().filter(|&&v| v == 0.0).count();
        // Corners see one padded row and one padded column (3 + 3 − 1 cells).
        for corner in [0, 4, 20, 24] {
            assert_eq!(zeros(corner), 5, "corner row {corner}");
        }
        for edge in [1, 2, 3, 5, 10, 15, 9, 21] {
            assert_eq!(zeros(edge), 3, "edge row {edge}");
        }
        assert_eq!(zeros(12), 0);
    }

    #[test]
    fn same_padding_is_left_biased_for_even_kernels() {
        assert_eq!(Padding::Same.amounts(6), (3, 2));
        assert_eq!(Padding::Same.amounts(3), (1, 1));
        assert_eq!(Padding::Same.amounts(1), (0, 0));
        assert_eq!(window_output_len(28, 6, 1, Padding::Same).unwrap(), 28);
        assert_eq!(window_output_len(28, 6, 2, Padding::Same).unwrap(), 14);
    }

    #[test]
    fn im2col_kernel_too_large() {
        let b = ImageBatch::zeros([1, 1, 3, 3]);
        assert!(matches!(im2col(&b, 4, 1, Padding::Valid), Err(Error::Dimension(_))));
        assert!(im2col(&b, 4, 1, Padding::Same).is_ok());
    }

    #[test]
    fn im2col_matches_nested_loop_convolution() {
        let b = random_batch([2, 3, 8, 8], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 3;
        let filters: Vec<f64> = (0..4 * 3 * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for padding in [Padding::Valid, Padding::Same] {
            let (p, (oh, ow)) = im2col(&b, k, 1, padding).unwrap();
            let (pt, pl) = (padding.amounts(k).0 as isize, padding.amounts(k).0 as isize);
            for s in 0..2 {
                for f in 0..4 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let row = p.row(s * oh * ow + oy * ow + ox);
                            let fast: f64 = row
                                .iter()
                                .zip(&filters[f * 27..(f + 1) * 27])
                                .map(|(a, b)| a * b)
                                .sum();
                            let mut slow = 0.0;
                            for c in 0..3 {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let v = padded_value(
                                            &b,
                                            s,
                                            c,
                                            oy as isize + ky as isize - pt,
                                            ox as isize + kx as isize - pl,
                                        );
                                        slow += v * filters[f * 27 + c * 9 + ky * 3 + kx];
                                    }
                                }
                            }
                            assert!((fast - slow).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_matches_patch_products() {
        let b = random_batch([3, 2, 5, 5], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights: Vec<f64> = (0..4 * 18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = vec![0.5, -0.25, 0.0, 1.0];
        let out = conv2d(&b, &weights, &bias, 3, 1, Padding::Same, Activation::Tanh).unwrap();
        assert_eq!(out.shape(), [3, 4, 5, 5]);
        let (p, _) = im2col(&b, 3, 1, Padding::Same).unwrap();
        for s in 0..3 {
            for o in 0..4 {
                for pos in 0..25 {
                    let dot: f64 = p
                        .row(s * 25 + pos)
                        .iter()
                        .zip(&weights[o * 18..(o + 1) * 18])
                        .map(|(a, b)| a * b)
                        .sum();
                    let expect = (dot + bias[o]).tanh();
                    assert!((out.get(s, o, pos / 5, pos % 5) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn avg_pool_constant_and_single_mean() {
        let b = ImageBatch::from_fn([1, 1, 4, 4], |_, _, _, _| 2.0);
        let out = avg_pool(&b, 2, 2).unwrap();
        assert_eq!(out.shape(), [1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 2.0));

        let b = ImageBatch::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool(&b, 2, 2).unwrap().data(), &[2.5]);
    }

    #[test]
    fn avg_pool_floor_semantics() {
        let b = ImageBatch::from_fn([1, 1, 7, 7], |_, _, y, x| (y * 7 + x) as f64);
        let out = avg_pool(&b, 2, 2).unwrap();
        assert_eq!(out.shape(), [1, 1, 3, 3]);
        // Bottom-right window covers rows 4..6, cols 4..6; row/col 6 dropped.
        let expect = (32.0 + 33.0 + 39.0 + 40.0) / 4.0;
        assert_eq!(out.get(0, 0, 2, 2), expect);
        assert!(avg_pool(&b, 8, 1).is_err());
    }

    #[test]
    fn avg_pool_preserves_global_mean_on_exact_tiling() {
        let b = random_batch([2, 3, 8, 8], 1);
        let out = avg_pool(&b, 4, 4).unwrap();
        let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
        assert!((mean(b.data()) - mean(out.data())).abs() < 1e-12);
    }

    #[test]
    fn resize_pool_windows() {
        assert_eq!(pyramid_window(8, 3).unwrap(), (3, 2));
        assert_eq!(pyramid_window(3, 3).unwrap(), (1, 1));
        assert_eq!(pyramid_window(14, 3).unwrap(), (5, 4));
        assert!(pyramid_window(3, 4).is_err());

        let b = random_batch([1, 2, 3, 3], 2);
        assert_eq!(resize_pool(&b, 3).unwrap(), b);
        assert_eq!(resize_pool(&random_batch([1, 1, 14, 14], 3), 3).unwrap().shape(), [1, 1, 3, 3]);
    }

    #[test]
    fn resize_pool_exact_size_sweep() {
        for v in 1..=64 {
            let b = ImageBatch::zeros([1, 1, v, v]);
            for t in 1..=v {
                let out = resize_pool(&b, t).unwrap();
                assert_eq!((out.height(), out.width()), (t, t), "v={v} b={t}");
                let (win, stride) = pyramid_window(v, t).unwrap();
                assert!((t - 1) * stride + win <= v);
            }
        }
        // Overshooting geometry keeps the leading windows.
        let b = ImageBatch::from_fn([1, 1, 5, 5], |_, _, y, x| (y * 5 + x) as f64);
        let out = resize_pool(&b, 3).unwrap();
        assert_eq!(out.get(0, 0, 0, 0), 3.0);
        assert_eq!(out.get(0, 0, 2, 2), 15.0);
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        let b = random_batch([2, 2, 3, 3], 9);
        let once = activate(&b, Activation::Relu);
        assert_eq!(activate(&once, Activation::Relu), once);
        assert_eq!(once.shape(), b.shape());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = random_batch([2, 2, 3, 3], 1);
        let b = random_batch([2, 1, 3, 3], 2);
        let cat = ImageBatch::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.channel_slice(0, 2).unwrap(), a);
        assert_eq!(cat.channel_slice(2, 3).unwrap(), b);
        let stacked = ImageBatch::concat_samples(&[&a, &a]).unwrap();
        assert_eq!(stacked.slice_samples(2, 4).unwrap(), a);
        assert_eq!(stacked.select(&[1]).unwrap(), a.select(&[1]).unwrap());
    }
}
