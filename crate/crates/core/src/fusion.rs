//! Two-stage multi-scale fusion.
//!
//! Stage one brings every node group to the smallest spatial size and stacks
//! them on the channel axis. Stage two pools each map at every pyramid level and
//! flattens. Column layout of a feature row: maps in channel order; per map,
//! `b_tot` contiguous values ordered by pyramid level, then row-major bins.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{concat_at_min_size, NodeGroups};
use crate::tensor::{pool_plane_first, pyramid_window, ImageBatch, PatchMatrix, PoolKind};

/// Dense `rows × cols` feature matrix, one sample per row.
pub type FeatureMatrix = PatchMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionSpec {
    pub bins: Vec<usize>,
    pub pool: PoolKind,
}

impl FusionSpec {
    pub fn new(bins: Vec<usize>, pool: PoolKind) -> Result<Self> {
        if bins.is_empty() || bins.contains(&0) {
            return Err(Error::config("pyramid bins must be a non-empty list of positive sizes"));
        }
        Ok(FusionSpec { bins, pool })
    }

    pub fn b_tot(&self) -> usize {
        self.bins.iter().map(|b| b * b).sum()
    }

    /// Offset of level `l` inside a map's block of `b_tot` columns.
    pub fn level_offset(&self, level: usize) -> usize {
        self.bins[..level].iter().map(|b| b * b).sum()
    }
}

/// Stage one: all feature maps, then all enhancement maps, at the smallest size.
pub fn fuse_stage1(groups: &NodeGroups) -> Result<ImageBatch> {
    let maps: Vec<&ImageBatch> = groups.features.iter().chain(&groups.enhancements).collect();
    if maps.is_empty() {
        return Err(Error::input("no node groups to fuse"));
    }
    concat_at_min_size(&maps)
}

/// Writes the pyramid features of one `c × v × v` sample into `row`.
pub(crate) fn spp_sample(sample: &[f64], c: usize, v: usize, spec: &FusionSpec, windows: &[(usize, usize)], row: &mut [f64]) {
    let b_tot = spec.b_tot();
    for ch in 0..c {
        let plane = &sample[ch * v * v..(ch + 1) * v * v];
        let mut off = ch * b_tot;
        for (&b, &(win, stride)) in spec.bins.iter().zip(windows) {
            pool_plane_first(plane, v, win, stride, b, b, spec.pool, &mut row[off..off + b * b]);
            off += b * b;
        }
    }
}

fn check_square(a: &ImageBatch, spec: &FusionSpec) -> Result<Vec<(usize, usize)>> {
    let v = a.height();
    if a.width() != v {
        return Err(Error::dim(format!("pyramid pooling expects square maps, got {v}×{}", a.width())));
    }
    spec.bins
        .iter()
        .map(|&b| {
            if b > v {
                Err(Error::config(format!("pyramid bin {b} exceeds map size {v}")))
            } else {
                pyramid_window(v, b)
            }
        })
        .collect()
}

/// Pyramid features of `a_s1` written into `out` (`n × channels·b_tot`, row-major).
pub(crate) fn fuse_stage2_into(a_s1: &ImageBatch, spec: &FusionSpec, out: &mut [f64]) -> Result<()> {
    let windows = check_square(a_s1, spec)?;
    let [n, c, v, _] = a_s1.shape();
    let cols = c * spec.b_tot();
    if out.len() != n * cols {
        return Err(Error::dim(format!("feature buffer holds {} values, expected {}", out.len(), n * cols)));
    }
    out.par_chunks_mut(cols)
        .zip(a_s1.data().par_chunks(a_s1.sample_len()))
        .for_each(|(row, sample)| spp_sample(sample, c, v, spec, &windows, row));
    Ok(())
}

/// Stage two: pool every map at every pyramid level and flatten.
pub fn fuse_stage2(a_s1: &ImageBatch, spec: &FusionSpec) -> Result<FeatureMatrix> {
    let cols = a_s1.channels() * spec.b_tot();
    let mut data = vec![0.0; a_s1.n() * cols];
    fuse_stage2_into(a_s1, spec, &mut data)?;
    FeatureMatrix::new(a_s1.n(), cols, data)
}
