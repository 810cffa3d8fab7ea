//! Convolutional feature (CF) and enhancement (CE) layers.
//!
//! A CF layer splits its input channels into groups. Each group owns a filter
//! bank learned by spherical K-means and the whitening transform its patches
//! were fitted under. The forward pass normalises every patch, whitens it, takes
//! the filter responses, applies the activation and average-pools 2×2. CE layers
//! are plain same-padded convolutions with random weights.

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::config::{channel_schedule, FilterInit, ModelConfig};
use crate::error::{Error, Result};
use crate::patch::{
    copy_patch, fit_zca, normalize_row, normalize_rows_in_place, sample_patch_locations, whiten_rows_in_place,
    WhiteningTransform,
};
use crate::skm::{skm_fit, skm_init, FilterBank};
use crate::tensor::{avg_pool, conv2d, resize_pool, Activation, ConvGeometry, ImageBatch, Padding, PatchMatrix};

/// Samples pushed through the trained layers at once while gathering patches.
const GATHER_CHUNK: usize = 1024;

/// Filters of one channel group, with the whitening folded in for the forward pass.
#[derive(Clone, Debug)]
pub struct FilterGroup {
    start: usize,
    end: usize,
    bank: FilterBank,
    whitening: WhiteningTransform,
    /// `k × dim`, row-major: row t is `matrix · w_t`.
    fused: Vec<f64>,
    /// `meanᵀ · matrix · w_t` per filter.
    offset: Vec<f64>,
}

impl FilterGroup {
    pub fn new(start: usize, end: usize, bank: FilterBank, whitening: WhiteningTransform) -> Result<Self> {
        if end <= start {
            return Err(Error::input(format!("empty channel range {start}..{end}")));
        }
        if bank.dim() != whitening.dim() {
            return Err(Error::dim(format!(
                "filter dim {} differs from whitening dim {}",
                bank.dim(),
                whitening.dim()
            )));
        }
        let (k, d) = (bank.k(), bank.dim());
        let mut fused = vec![0.0; k * d];
        matmul(
            MatMut::from_row_major_slice_mut(&mut fused, k, d),
            Accum::Replace,
            bank.as_mat(),
            whitening.matrix(),
            1.0,
            Par::Seq,
        );
        let mean = whitening.mean();
        let offset = fused
            .chunks(d)
            .map(|row| row.iter().zip(mean).map(|(a, b)| a * b).sum())
            .collect();
        Ok(FilterGroup {
            start,
            end,
            bank,
            whitening,
            fused,
            offset,
        })
    }

    pub fn channels(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn whitening(&self) -> &WhiteningTransform {
        &self.whitening
    }

    /// Pixel-space filters `k × dim`: row t applied to the mean-free normalised patch.
    pub fn effective_filters(&self) -> &[f64] {
        &self.fused
    }
}

#[derive(Clone, Debug)]
pub struct CfLayer {
    pub index: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub groups: Vec<FilterGroup>,
    pub activation: Activation,
    pub norm_eps: f64,
}

impl CfLayer {
    pub fn out_channels(&self) -> usize {
        self.groups.iter().map(|g| g.bank.k()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct CeLayer {
    pub index: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out × (in·k·k)`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

/// Outputs of every layer for one batch.
#[derive(Clone, Debug)]
pub struct NodeGroups {
    pub features: Vec<ImageBatch>,
    pub enhancements: Vec<ImageBatch>,
}

/// Settings for training one chain of CF layers.
#[derive(Clone, Debug)]
pub struct CfSpec {
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub group_size: Option<usize>,
    pub patches: usize,
    pub skm_iters: usize,
    pub zca_eps: f64,
    pub norm_eps: f64,
    pub filters: FilterInit,
    pub activation: Activation,
}

impl CfSpec {
    /// CF chain whose first layer has `c1` maps and follows the config's expansion.
    pub fn from_config(cfg: &ModelConfig, c1: usize) -> Self {
        CfSpec {
            widths: channel_schedule(c1, cfg.expansion, cfg.n),
            kernel: cfg.cf_kernel,
            stride: cfg.cf_stride,
            group_size: cfg.group_size,
            patches: cfg.patches,
            skm_iters: cfg.skm_iters,
            zca_eps: cfg.zca_eps,
            norm_eps: cfg.norm_eps,
            filters: cfg.filters,
            activation: cfg.cf_activation,
        }
    }
}

/// Channel ranges of size `size` covering `0..channels`, last one possibly smaller.
pub fn partition_channels(channels: usize, size: usize) -> Vec<(usize, usize)> {
    let size = size.clamp(1, channels.max(1));
    (0..channels.div_ceil(size))
        .map(|g| (g * size, ((g + 1) * size).min(channels)))
        .collect()
}

/// Splits `total` filters over `groups`, the first `total % groups` getting one extra.
pub fn split_quota(total: usize, groups: usize) -> Vec<usize> {
    (0..groups)
        .map(|g| total / groups + usize::from(g < total % groups))
        .collect()
}

/// Group size for layer `index` (1-based) with `in_channels` inputs.
pub fn group_size_for(index: usize, in_channels: usize, configured: Option<usize>) -> usize {
    if index == 1 {
        in_channels
    } else {
        configured.unwrap_or((in_channels / 4).max(4)).min(in_channels)
    }
}

/// Runs `x` through `layers` in order.
pub fn cf_chain_forward(layers: &[CfLayer], x: &ImageBatch) -> Result<ImageBatch> {
    let mut cur = x.clone();
    for layer in layers {
        cur = cf_forward(layer, &cur)?;
    }
    Ok(cur)
}

/// Copies the patches at `locs` (channels `c0..c1` of the output of `trained`
/// applied to `x`) into a patch matrix, one row per location in order.
fn gather_patches(
    x: &ImageBatch,
    trained: &[CfLayer],
    locs: &[crate::patch::PatchLocation],
    c0: usize,
    c1: usize,
    kernel: usize,
) -> Result<PatchMatrix> {
    let dim = kernel * kernel * (c1 - c0);
    let mut data = vec![0.0; locs.len() * dim];
    let mut order: Vec<usize> = (0..locs.len()).collect();
    order.sort_by_key(|&i| locs[i].sample);
    let mut cursor = 0;
    let mut start = 0;
    while start < x.n() && cursor < order.len() {
        let end = (start + GATHER_CHUNK).min(x.n());
        let next = order[cursor..].partition_point(|&i| locs[i].sample < end) + cursor;
        if next > cursor {
            let chunk = x.slice_samples(start, end)?;
            let z = cf_chain_forward(trained, &chunk)?;
            let chw = [z.channels(), z.height(), z.width()];
            for &i in &order[cursor..next] {
                let loc = locs[i];
                copy_patch(
                    z.sample(loc.sample - start),
                    chw,
                    c0,
                    c1,
                    loc.y,
                    loc.x,
                    kernel,
                    &mut data[i * dim..(i + 1) * dim],
                );
            }
        }
        cursor = next;
        start = end;
    }
    PatchMatrix::new(locs.len(), dim, data)
}

/// Greedy layer-wise training of a CF chain on `x`.
///
/// For each layer the input channels are grouped; per group, `spec.patches`
/// random patches are drawn from the previous layer's output, normalised,
/// whitened, and clustered into that group's share of the layer width.
/// Randomness is consumed group by group: patch locations, then SKM.
pub fn train_cf_stack<R: Rng + ?Sized>(x: &ImageBatch, spec: &CfSpec, rng: &mut R) -> Result<Vec<CfLayer>> {
    train_cf_stack_timed(x, spec, rng).map(|(layers, _)| layers)
}

/// Seconds spent gathering and preprocessing patches, and clustering them.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CfTiming {
    pub patching: f64,
    pub skm: f64,
}

/// [`train_cf_stack`] with phase timings.
pub fn train_cf_stack_timed<R: Rng + ?Sized>(
    x: &ImageBatch,
    spec: &CfSpec,
    rng: &mut R,
) -> Result<(Vec<CfLayer>, CfTiming)> {
    let mut timing = CfTiming::default();
    if spec.widths.is_empty() {
        return Err(Error::config("CF chain needs at least one layer"));
    }
    let mut layers: Vec<CfLayer> = Vec::with_capacity(spec.widths.len());
    let mut shape = [x.channels(), x.height(), x.width()];
    for (li, &width) in spec.widths.iter().enumerate() {
        let index = li + 1;
        let [in_c, h, w] = shape;
        let ranges = partition_channels(in_c, group_size_for(index, in_c, spec.group_size));
        if width < ranges.len() {
            return Err(Error::config(format!(
                "CF layer {index} has {width} filters for {} groups",
                ranges.len()
            )));
        }
        let quota = split_quota(width, ranges.len());
        let mut groups = Vec::with_capacity(ranges.len());
        for (&(c0, c1), &k) in ranges.iter().zip(&quota) {
            let t0 = Instant::now();
            let locs = sample_patch_locations(x.n(), h, w, spec.kernel, spec.patches, rng)?;
            let mut patches = gather_patches(x, &layers, &locs, c0, c1, spec.kernel)?;
            drop(locs);
            let dim = patches.cols();
            normalize_rows_in_place(patches.data_mut(), dim, spec.norm_eps);
            let whitening = fit_zca(&patches, spec.zca_eps)?;
            if spec.filters == FilterInit::Skm {
                whiten_rows_in_place(&whitening, patches.data_mut());
            }
            let t1 = Instant::now();
            timing.patching += (t1 - t0).as_secs_f64();
            let bank = match spec.filters {
                FilterInit::Skm => skm_fit(&patches, k, spec.skm_iters, rng)?,
                FilterInit::Random => skm_init(dim, k, rng)?,
            };
            drop(patches);
            timing.skm += t1.elapsed().as_secs_f64();
            log::debug!("CF{index} group {c0}..{c1}: {k} filters over {dim}-d patches");
            groups.push(FilterGroup::new(c0, c1, bank, whitening)?);
        }
        let layer = CfLayer {
            index,
            kernel: spec.kernel,
            stride: spec.stride,
            in_channels: in_c,
            groups,
            activation: spec.activation,
            norm_eps: spec.norm_eps,
        };
        let geo = ConvGeometry::new(shape, spec.kernel, spec.stride, Padding::Same)?;
        if geo.out_h < 2 || geo.out_w < 2 {
            return Err(Error::dim(format!(
                "CF layer {index} output {}×{} is too small to pool",
                geo.out_h, geo.out_w
            )));
        }
        shape = [layer.out_channels(), geo.out_h / 2, geo.out_w / 2];
        layers.push(layer);
    }
    Ok((layers, timing))
}

/// Grouped convolution of normalised, whitened patches, activation, then 2×2 average pooling.
pub fn cf_forward(layer: &CfLayer, input: &ImageBatch) -> Result<ImageBatch> {
    let [_, c, h, w] = input.shape();
    if c != layer.in_channels {
        return Err(Error::input(format!(
            "CF layer {} expects {} channels, got {c}",
            layer.index, layer.in_channels
        )));
    }
    let geo = ConvGeometry::new([c, h, w], layer.kernel, layer.stride, Padding::Same)?;
    let out_c = layer.out_channels();
    let positions = geo.positions();
    let conv = input.map_samples([out_c, geo.out_h, geo.out_w], |src, dst| {
        let mut out_off = 0;
        for g in &layer.groups {
            let dim = geo.patch_dim(g.end - g.start);
            let k = g.bank.k();
            let mut cols = vec![0.0; positions * dim];
            geo.im2col_into(src, g.start, g.end, &mut cols);
            for row in cols.chunks_mut(dim) {
                normalize_row(row, layer.norm_eps);
            }
            let block = &mut dst[out_off * positions..(out_off + k) * positions];
            matmul(
                MatMut::from_row_major_slice_mut(block, k, positions),
                Accum::Replace,
                MatRef::from_row_major_slice(&g.fused, k, dim),
                MatRef::from_row_major_slice(&cols, positions, dim).transpose(),
                1.0,
                Par::Seq,
            );
            for (t, plane) in block.chunks_mut(positions).enumerate() {
                let o = g.offset[t];
                for v in plane {
                    *v = layer.activation.apply(*v - o);
                }
            }
            out_off += k;
        }
    });
    avg_pool(&conv, 2, 2)
}

/// Random CE chain: layer 1 maps `in_channels` to `widths[0]`, layer j maps
/// `widths[j-2]` to `widths[j-1]`.
///
/// Weights are drawn from N(0, 1/fan_in) (standard deviation `1/√fan_in`),
/// row-major, then biases from U(−1, 1), layer by layer.
pub fn build_ce_chain<R: Rng + ?Sized>(
    in_channels: usize,
    widths: &[usize],
    kernel: usize,
    activation: Activation,
    rng: &mut R,
) -> Result<Vec<CeLayer>> {
    if in_channels == 0 || kernel == 0 || widths.contains(&0) {
        return Err(Error::config("CE layers need positive widths and kernel"));
    }
    let mut layers = Vec::with_capacity(widths.len());
    let mut prev = in_channels;
    for (j, &out) in widths.iter().enumerate() {
        let fan_in = prev * kernel * kernel;
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt())
            .map_err(|e| Error::numeric(format!("weight distribution: {e}")))?;
        let weights = (0..out * fan_in).map(|_| normal.sample(rng)).collect();
        let uniform = Uniform::new_inclusive(-1.0, 1.0);
        let biases = (0..out).map(|_| uniform.sample(rng)).collect();
        layers.push(CeLayer {
            index: j + 1,
            kernel,
            in_channels: prev,
            out_channels: out,
            weights,
            biases,
            activation,
        });
        prev = out;
    }
    Ok(layers)
}

/// CE stack of the base model, fed by `c_f` feature maps.
pub fn build_ce_stack<R: Rng + ?Sized>(cfg: &ModelConfig, c_f: usize, rng: &mut R) -> Result<Vec<CeLayer>> {
    build_ce_chain(c_f, &cfg.ce_channels(), cfg.ce_kernel, cfg.ce_activation, rng)
}

pub fn ce_forward(layer: &CeLayer, input: &ImageBatch) -> Result<ImageBatch> {
    if input.channels() != layer.in_channels {
        return Err(Error::input(format!(
            "CE layer {} expects {} channels, got {}",
            layer.index,
            layer.in_channels,
            input.channels()
        )));
    }
    conv2d(
        input,
        &layer.weights,
        &layer.biases,
        layer.kernel,
        1,
        Padding::Same,
        layer.activation,
    )
}

/// Outputs of every layer of a CE chain started from `z`.
pub fn ce_chain_forward(layers: &[CeLayer], z: &ImageBatch) -> Result<Vec<ImageBatch>> {
    let mut outs: Vec<ImageBatch> = Vec::with_capacity(layers.len());
    for layer in layers {
        let next = ce_forward(layer, outs.last().unwrap_or(z))?;
        outs.push(next);
    }
    Ok(outs)
}

/// Resizes every map to the smallest spatial size present and concatenates channels.
pub fn concat_at_min_size(maps: &[&ImageBatch]) -> Result<ImageBatch> {
    let v = maps
        .iter()
        .map(|m| m.height())
        .min()
        .ok_or_else(|| Error::input("nothing to concatenate"))?;
    if maps.len() == 1 {
        return Ok(maps[0].clone());
    }
    let resized = maps
        .iter()
        .map(|m| resize_pool(m, v))
        .collect::<Result<Vec<_>>>()?;
    ImageBatch::concat_channels(&resized.iter().collect::<Vec<_>>())
}

/// Feature maps of a CF chain resized to the smallest one and concatenated.
pub fn fused_features(layers: &[CfLayer], x: &ImageBatch) -> Result<ImageBatch> {
    let zs = cf_all_outputs(layers, x)?;
    concat_at_min_size(&zs.iter().collect::<Vec<_>>())
}

/// Outputs Z_1…Z_n of a CF chain.
pub fn cf_all_outputs(layers: &[CfLayer], x: &ImageBatch) -> Result<Vec<ImageBatch>> {
    let mut outs: Vec<ImageBatch> = Vec::with_capacity(layers.len());
    for layer in layers {
        let next = cf_forward(layer, outs.last().unwrap_or(x))?;
        outs.push(next);
    }
    Ok(outs)
}

/// Z_1…Z_n and H_1…H_m, with the CE chain fed by the fused feature maps.
pub fn forward_all(cf: &[CfLayer], ce: &[CeLayer], x: &ImageBatch) -> Result<NodeGroups> {
    let features = cf_all_outputs(cf, x)?;
    let z = concat_at_min_size(&features.iter().collect::<Vec<_>>())?;
    let enhancements = ce_chain_forward(ce, &z)?;
    Ok(NodeGroups { features, enhancements })
}

/// Reference forward without folding: normalise, whiten, dot, activate, pool.
#[cfg(test)]
pub(crate) fn cf_forward_unfused(layer: &CfLayer, input: &ImageBatch) -> Result<ImageBatch> {
    use crate::patch::{apply_whitening, normalize_patches};
    use crate::tensor::activate;
    let [n, c, h, w] = input.shape();
    let geo = ConvGeometry::new([c, h, w], layer.kernel, layer.stride, Padding::Same)?;
    let positions = geo.positions();
    let mut out = ImageBatch::zeros([n, layer.out_channels(), geo.out_h, geo.out_w]);
    let sample_len = out.sample_len();
    for s in 0..n {
        let mut off = 0;
        for g in &layer.groups {
            let dim = geo.patch_dim(g.end - g.start);
            let mut cols = vec![0.0; positions * dim];
            geo.im2col_into(input.sample(s), g.start, g.end, &mut cols);
            let p = normalize_patches(&PatchMatrix::new(positions, dim, cols)?, layer.norm_eps)?;
            let p = apply_whitening(&g.whitening, &p)?;
            for t in 0..g.bank.k() {
                let f = g.bank.filter(t);
                for pos in 0..positions {
                    let v: f64 = p.row(pos).iter().zip(f).map(|(a, b)| a * b).sum();
                    out.data_mut()[s * sample_len + (off + t) * positions + pos] = v;
                }
            }
            off += g.bank.k();
        }
    }
    avg_pool(&activate(&out, layer.activation), 2, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_images(shape: [usize; 4], seed: u64) -> ImageBatch {
        let mut r = rng(seed);
        ImageBatch::from_fn(shape, |_, _, _, _| r.gen_range(0.0..1.0))
    }

    fn small_spec(widths: Vec<usize>) -> CfSpec {
        CfSpec {
            widths,
            kernel: 3,
            stride: 1,
            group_size: None,
            patches: 2000,
            skm_iters: 3,
            zca_eps: 0.1,
            norm_eps: 1e-5,
            filters: FilterInit::Skm,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn partitions_and_quotas() {
        assert_eq!(partition_channels(8, 3), vec![(0, 3), (3, 6), (6, 8)]);
        assert_eq!(partition_channels(4, 4), vec![(0, 4)]);
        assert_eq!(split_quota(10, 3), vec![4, 3, 3]);
        assert_eq!(group_size_for(1, 3, Some(2)), 3);
        assert_eq!(group_size_for(2, 32, None), 8);
        assert_eq!(group_size_for(2, 8, None), 4);
        assert_eq!(group_size_for(2, 2, None), 2);
    }

    #[test]
    fn cf_stack_shapes_and_determinism() {
        let x = random_images([12, 1, 16, 16], 1);
        let spec = small_spec(vec![4, 8, 16]);
        let a = train_cf_stack(&x, &spec, &mut rng(3)).unwrap();
        let b = train_cf_stack(&x, &spec, &mut rng(3)).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a.iter().map(|l| l.out_channels()).collect::<Vec<_>>(), vec![4, 8, 16]);
        assert_eq!(a[0].groups.len(), 1);
        assert_eq!(a[1].groups.len(), 1);
        assert_eq!(a[2].groups.len(), 2);
        for (la, lb) in a.iter().zip(&b) {
            for (ga, gb) in la.groups.iter().zip(&lb.groups) {
                assert_eq!(ga.bank.weights(), gb.bank.weights());
                assert_eq!(ga.whitening, gb.whitening);
            }
        }
        let zs = cf_all_outputs(&a, &x).unwrap();
        let sizes: Vec<_> = zs.iter().map(|z| (z.channels(), z.height())).collect();
        assert_eq!(sizes, vec![(4, 8), (8, 4), (16, 2)]);
        assert!(zs.iter().all(|z| z.is_finite()));
    }

    #[test]
    fn fused_forward_matches_reference() {
        let x = random_images([5, 2, 10, 10], 4);
        let mut spec = small_spec(vec![6, 9]);
        spec.group_size = Some(2);
        spec.kernel = 4;
        let layers = train_cf_stack(&x, &spec, &mut rng(5)).unwrap();
        let mut cur = x.clone();
        for layer in &layers {
            let fast = cf_forward(layer, &cur).unwrap();
            let slow = cf_forward_unfused(layer, &cur).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
            cur = fast;
        }
    }

    #[test]
    fn mnist_shaped_chain_sizes() {
        let x = random_images([3, 1, 28, 28], 2);
        let mut spec = small_spec(vec![4, 8, 16]);
        spec.kernel = 6;
        spec.patches = 500;
        let layers = train_cf_stack(&x, &spec, &mut rng(1)).unwrap();
        let zs = cf_all_outputs(&layers, &x).unwrap();
        assert_eq!(zs.iter().map(|z| z.height()).collect::<Vec<_>>(), vec![14, 7, 3]);
        let fused = fused_features(&layers, &x).unwrap();
        assert_eq!(fused.shape(), [3, 28, 3, 3]);
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let x = random_images([4, 1, 12, 12], 7);
        let layers = train_cf_stack(&x, &small_spec(vec![4]), &mut rng(2)).unwrap();
        let out = cf_forward(&layers[0], &ImageBatch::zeros([1, 1, 12, 12])).unwrap();
        assert_eq!(out.shape(), [1, 4, 6, 6]);
        assert!(out.is_finite());
    }

    #[test]
    fn one_by_one_kernel_is_pixelwise_linear() {
        // Kernel 1 on a 2-channel input: each pixel is a 2-vector patch.
        let bank = FilterBank::from_weights(2, 2, vec![1.0, 0.0, 0.6, -0.8]).unwrap();
        let white = WhiteningTransform::from_parts(2, vec![0.1, -0.2], vec![2.0, 0.5, 0.5, 1.0], 0.0).unwrap();
        let layer = CfLayer {
            index: 1,
            kernel: 1,
            stride: 1,
            in_channels: 2,
            groups: vec![FilterGroup::new(0, 2, bank, white).unwrap()],
            activation: Activation::Relu,
            norm_eps: 1e-5,
        };
        let x = ImageBatch::new([1, 2, 2, 2], vec![0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.4, 0.6]).unwrap();
        let out = cf_forward(&layer, &x).unwrap();
        let mut expect = [0.0; 2];
        for p in 0..4 {
            let (a, b) = (x.data()[p], x.data()[4 + p]);
            let mean = 0.5 * (a + b);
            let sd = (((a - mean).powi(2) + (b - mean).powi(2)) / 2.0 + 1e-5).sqrt();
            let (u, v) = ((a - mean) / sd - 0.1, (b - mean) / sd + 0.2);
            let (wu, wv) = (2.0 * u + 0.5 * v, 0.5 * u + v);
            expect[0] += wu.max(0.0) / 4.0;
            expect[1] += (0.6 * wu - 0.8 * wv).max(0.0) / 4.0;
        }
        assert!((out.data()[0] - expect[0]).abs() < 1e-12);
        assert!((out.data()[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn embedded_pattern_peaks_at_its_location() {
        // A single filter matched to one embedded patch responds most there.
        let mut r = rng(11);
        let mut x = ImageBatch::from_fn([1, 1, 12, 12], |_, _, _, _| 0.05 * r.gen_range(0.0..1.0));
        let pattern = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        for (i, v) in pattern.iter().enumerate() {
            x.data_mut()[(6 + i / 3) * 12 + 4 + i % 3] = *v;
        }
        let mut p = pattern.to_vec();
        normalize_row(&mut p, 1e-5);
        let bank = FilterBank::from_weights(1, 9, p).unwrap();
        let layer = CfLayer {
            index: 1,
            kernel: 3,
            stride: 1,
            in_channels: 1,
            groups: vec![FilterGroup::new(0, 1, bank, WhiteningTransform::identity(9)).unwrap()],
            activation: Activation::Relu,
            norm_eps: 1e-5,
        };
        let geo = ConvGeometry::new([1, 12, 12], 3, 1, Padding::Same).unwrap();
        let g = &layer.groups[0];
        let mut cols = vec![0.0; geo.positions() * 9];
        geo.im2col_into(x.sample(0), 0, 1, &mut cols);
        let resp: Vec<f64> = cols
            .chunks_mut(9)
            .map(|row| {
                normalize_row(row, 1e-5);
                row.iter().zip(&g.fused).map(|(a, b)| a * b).sum()
            })
            .collect();
        let best = (0..resp.len()).max_by(|&a, &b| resp[a].total_cmp(&resp[b])).unwrap();
        // Same padding, kernel 3: the window centred on (7, 5) covers the pattern.
        assert_eq!(best, 7 * 12 + 5);
    }

    #[test]
    fn ce_chain_schedule_and_determinism() {
        let a = build_ce_chain(7, &[100, 200], 3, Activation::Relu, &mut rng(9)).unwrap();
        let b = build_ce_chain(7, &[100, 200], 3, Activation::Relu, &mut rng(9)).unwrap();
        assert_eq!((a[0].in_channels, a[0].out_channels), (7, 100));
        assert_eq!((a[1].in_channels, a[1].out_channels), (100, 200));
        assert_eq!(a[1].weights, b[1].weights);
        assert!(a[0].biases.iter().all(|b| (-1.0..=1.0).contains(b)));
        let cfg = ModelConfig::default();
        let ce = build_ce_stack(&cfg, 224, &mut rng(1)).unwrap();
        assert_eq!((ce[0].in_channels, ce[0].out_channels, ce[0].kernel), (224, 224, 3));
    }

    #[test]
    fn batch_of_one_matches_batch_slice() {
        let x = random_images([20, 1, 14, 14], 3);
        let cf = train_cf_stack(&x, &small_spec(vec![4, 8]), &mut rng(2)).unwrap();
        let ce = build_ce_chain(12, &[6], 3, Activation::Relu, &mut rng(4)).unwrap();
        let all = forward_all(&cf, &ce, &x).unwrap();
        let one = forward_all(&cf, &ce, &x.slice_samples(13, 14).unwrap()).unwrap();
        for (a, b) in all.features.iter().chain(&all.enhancements).zip(one.features.iter().chain(&one.enhancements)) {
            for (u, v) in a.sample(13).iter().zip(b.sample(0)) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
        // Permuting the batch permutes the outputs.
        let perm: Vec<usize> = (0..20).rev().collect();
        let rev = forward_all(&cf, &ce, &x.select(&perm).unwrap()).unwrap();
        assert_eq!(rev.enhancements[0].sample(0), all.enhancements[0].sample(19));
    }
}
