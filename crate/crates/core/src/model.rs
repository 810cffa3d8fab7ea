//! The assembled network, its streaming training and node increments.
//!
//! A model is a list of blocks whose feature columns are laid side by side.
//! Block 0 is the base network: a CF chain and a CE chain fed by its fused
//! feature maps. Feature increments append blocks of the same shape; enhancement
//! increments append CE chains fed by the fused feature maps of the blocks
//! before them. Every block's columns depend on the images only through the
//! fused feature maps (`Z`) of the feature blocks, so those are cached per
//! split and everything else is recomputed chunk by chunk.

use std::time::Instant;

use faer::Mat;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{channel_schedule, Lambda, ModelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{fuse_stage2, FeatureMatrix, FusionSpec};
use crate::incremental::{ColumnSource, QBranch, SolverState};
use crate::layers::{
    build_ce_chain, build_ce_stack, ce_chain_forward, concat_at_min_size, fused_features, train_cf_stack_timed, CeLayer,
    CfLayer, CfSpec,
};
use crate::ridge::{
    argmax_rows, accuracy, gram, loo_lambda_search, ridge_solve, sequential_linalg, spd_shift_solve, GramAccumulator,
    GramPath, LabelMatrix, LambdaChoice,
};
use crate::tensor::ImageBatch;

/// Samples per streamed chunk. Fixed so that results never depend on memory.
pub const CHUNK: usize = 1000;

/// RNG stream reserved for the validation split.
const VAL_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug)]
pub enum Block {
    /// A CF chain on the images and a CE chain on its fused maps.
    Feature { cf: Vec<CfLayer>, ce: Vec<CeLayer> },
    /// A CE chain on the fused maps of the first `sources` feature blocks.
    Enhancement { sources: usize, ce: Vec<CeLayer> },
}

impl Block {
    pub fn feature_maps(&self) -> usize {
        match self {
            Block::Feature { cf, .. } => cf.iter().map(CfLayer::out_channels).sum(),
            Block::Enhancement { .. } => 0,
        }
    }

    pub fn enhancement_maps(&self) -> usize {
        let ce = match self {
            Block::Feature { ce, .. } | Block::Enhancement { ce, .. } => ce,
        };
        ce.iter().map(|l| l.out_channels).sum()
    }

    pub fn maps(&self) -> usize {
        self.feature_maps() + self.enhancement_maps()
    }

    pub fn ce(&self) -> &[CeLayer] {
        match self {
            Block::Feature { ce, .. } | Block::Enhancement { ce, .. } => ce,
        }
    }
}

/// Stage-one input of one block, given the fused maps of the feature blocks.
/// `slot` is the block's own position among feature blocks.
fn block_a_s1(block: &Block, slot: usize, zs: &[ImageBatch]) -> Result<ImageBatch> {
    let (z, ce, include_z) = match block {
        Block::Feature { ce, .. } => {
            let z = zs
                .get(slot)
                .ok_or_else(|| Error::input(format!("no cached maps for feature block {slot}")))?;
            (std::borrow::Cow::Borrowed(z), ce, true)
        }
        Block::Enhancement { sources, ce } => {
            if *sources == 0 || *sources > zs.len() {
                return Err(Error::input(format!(
                    "enhancement block reads {sources} feature blocks, {} cached",
                    zs.len()
                )));
            }
            let z = if *sources == 1 {
                std::borrow::Cow::Borrowed(&zs[0])
            } else {
                std::borrow::Cow::Owned(ImageBatch::concat_channels(&zs[..*sources].iter().collect::<Vec<_>>())?)
            };
            (z, ce, false)
        }
    };
    let hs = ce_chain_forward(ce, &z)?;
    let mut maps: Vec<&ImageBatch> = Vec::with_capacity(hs.len() + 1);
    if include_z {
        maps.push(&z);
    }
    maps.extend(hs.iter());
    concat_at_min_size(&maps)
}

/// Columns of one block for a chunk of cached maps.
pub fn block_columns(block: &Block, slot: usize, zs: &[ImageBatch], fusion: &FusionSpec) -> Result<FeatureMatrix> {
    fuse_stage2(&block_a_s1(block, slot, zs)?, fusion)
}

/// Side-by-side concatenation of row-aligned matrices.
pub fn hstack(parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
    let rows = parts.first().map_or(0, |p| p.rows());
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(Error::dim("cannot stack matrices with different row counts"));
    }
    if parts.len() == 1 {
        return Ok(parts[0].clone());
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    FeatureMatrix::new(rows, cols, data)
}

/// Keeps the listed columns, in the given order.
pub fn select_columns(a: &FeatureMatrix, cols: &[usize]) -> Result<FeatureMatrix> {
    if let Some(&bad) = cols.iter().find(|&&c| c >= a.cols()) {
        return Err(Error::input(format!("column {bad} out of range {}", a.cols())));
    }
    let mut data = Vec::with_capacity(a.rows() * cols.len());
    for r in 0..a.rows() {
        let row = a.row(r);
        data.extend(cols.iter().map(|&c| row[c]));
    }
    FeatureMatrix::new(a.rows(), cols.len(), data)
}

/// Samples `[start, end)` of every cached map set.
pub fn chunk_of(zs: &[ImageBatch], start: usize, end: usize) -> Result<Vec<ImageBatch>> {
    zs.iter().map(|z| z.slice_samples(start, end)).collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Input `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub blocks: Vec<Block>,
    pub lambda: f64,
    /// `cols × classes` output weights.
    pub weights: Mat<f64>,
}

impl Model {
    pub fn fusion(&self) -> Result<FusionSpec> {
        FusionSpec::new(self.config.spp_bins.clone(), self.config.spp_pool)
    }

    /// C_f over all blocks.
    pub fn feature_maps(&self) -> usize {
        self.blocks.iter().map(Block::feature_maps).sum()
    }

    /// C_e over all blocks.
    pub fn enhancement_maps(&self) -> usize {
        self.blocks.iter().map(Block::enhancement_maps).sum()
    }

    pub fn cols(&self) -> usize {
        (self.feature_maps() + self.enhancement_maps()) * self.config.b_tot()
    }

    /// Total width of the first CF layer across feature blocks.
    pub fn cf1_width(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Feature { cf, .. } => cf.first().map_or(0, CfLayer::out_channels),
                Block::Enhancement { .. } => 0,
            })
            .sum()
    }

    /// Total width of the first CE layer across blocks.
    pub fn ce1_width(&self) -> usize {
        self.blocks.iter().map(|b| b.ce().first().map_or(0, |l| l.out_channels)).sum()
    }

    pub fn feature_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b, Block::Feature { .. })).count()
    }

    /// Feature-block position of every block (enhancement blocks get the count so far).
    fn slots(&self) -> Vec<usize> {
        let mut next = 0;
        self.blocks
            .iter()
            .map(|b| {
                let s = next;
                if matches!(b, Block::Feature { .. }) {
                    next += 1;
                }
                s
            })
            .collect()
    }

    /// Fused feature maps of every feature block for a batch of images.
    pub fn encode(&self, x: &ImageBatch) -> Result<Vec<ImageBatch>> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Feature { cf, .. } => Some(fused_features(cf, x)),
                Block::Enhancement { .. } => None,
            })
            .collect()
    }

    /// [`encode`](Self::encode) over a whole dataset, chunk by chunk.
    pub fn encode_all(&self, x: &ImageBatch) -> Result<Vec<ImageBatch>> {
        encode_with(x, |chunk| self.encode(chunk))
    }

    /// All columns for a chunk of cached maps.
    pub fn columns(&self, zs: &[ImageBatch]) -> Result<FeatureMatrix> {
        let fusion = self.fusion()?;
        let parts = self
            .blocks
            .iter()
            .zip(self.slots())
            .map(|(b, s)| block_columns(b, s, zs, &fusion))
            .collect::<Result<Vec<_>>>()?;
        hstack(&parts)
    }

    /// Class scores and predictions from cached maps.
    pub fn predict_cached(&self, zs: &[ImageBatch]) -> Result<(Vec<usize>, Mat<f64>)> {
        sequential_linalg();
        let n = zs.first().map_or(0, |z| z.n());
        let mut scores = Mat::<f64>::zeros(n, self.classes);
        let mut s = 0;
        while s < n {
            let e = (s + CHUNK).min(n);
            let a = self.columns(&chunk_of(zs, s, e)?)?;
            if a.cols() != self.weights.nrows() {
                return Err(Error::dim(format!(
                    "model produces {} columns, weights have {} rows",
                    a.cols(),
                    self.weights.nrows()
                )));
            }
            scores.as_mut().subrows_mut(s, e - s).copy_from(a.as_mat() * &self.weights);
            s = e;
        }
        Ok((argmax_rows(scores.as_ref()), scores))
    }

    /// Class scores and predictions for images.
    pub fn predict(&self, x: &ImageBatch) -> Result<(Vec<usize>, Mat<f64>)> {
        self.check_input(x)?;
        self.predict_cached(&self.encode_all(x)?)
    }

    pub fn check_input(&self, x: &ImageBatch) -> Result<()> {
        let shape = [x.channels(), x.height(), x.width()];
        if shape != self.input {
            return Err(Error::input(format!("model expects {:?} images, got {shape:?}", self.input)));
        }
        Ok(())
    }
}

/// Runs `f` over fixed-size chunks of `x` and concatenates each output list.
pub fn encode_with(x: &ImageBatch, mut f: impl FnMut(&ImageBatch) -> Result<Vec<ImageBatch>>) -> Result<Vec<ImageBatch>> {
    let n = x.n();
    let mut parts: Vec<Vec<ImageBatch>> = Vec::new();
    let mut s = 0;
    while s < n {
        let e = (s + CHUNK).min(n);
        let out = f(&x.slice_samples(s, e)?)?;
        if parts.is_empty() {
            parts = out.into_iter().map(|z| vec![z]).collect();
        } else {
            for (p, z) in parts.iter_mut().zip(out) {
                p.push(z);
            }
        }
        s = e;
    }
    parts
        .iter()
        .map(|p| ImageBatch::concat_samples(&p.iter().collect::<Vec<_>>()))
        .collect()
}

/// Seconds per training phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub patching: f64,
    pub skm: f64,
    pub forward: f64,
    pub solve: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.patching + self.skm + self.forward + self.solve
    }
}

/// How the output layer is fitted and what is kept afterwards.
#[derive(Clone, Debug)]
pub struct ReadoutSpec {
    pub lambda: Lambda,
    pub grid: Vec<f64>,
    pub val_fraction: f64,
    pub seed: u64,
    /// Keep the factored solver state for increments.
    pub keep_state: bool,
    /// Keep `AᵀA` inside the solver state.
    pub keep_gram: bool,
    /// Keep the fit/validation statistics for column-subset refits.
    pub keep_design: bool,
}

impl ReadoutSpec {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        ReadoutSpec {
            lambda: cfg.lambda,
            grid: cfg.lambda_grid.clone(),
            val_fraction: cfg.val_fraction,
            seed: cfg.seed,
            keep_state: false,
            keep_gram: false,
            keep_design: false,
        }
    }
}

/// Fit-part Gram statistics and the held-out validation rows.
#[derive(Clone, Debug)]
pub struct Design {
    pub g_fit: Mat<f64>,
    pub aty_fit: Mat<f64>,
    pub val_a: Mat<f64>,
    pub val_labels: Vec<usize>,
    pub classes: usize,
    pub rows: usize,
}

impl Design {
    /// The same statistics restricted to a column subset.
    pub fn select(&self, cols: &[usize]) -> Design {
        let k = cols.len();
        Design {
            g_fit: Mat::from_fn(k, k, |i, j| self.g_fit[(cols[i], cols[j])]),
            aty_fit: Mat::from_fn(k, self.classes, |i, c| self.aty_fit[(cols[i], c)]),
            val_a: Mat::from_fn(self.val_a.nrows(), k, |r, j| self.val_a[(r, cols[j])]),
            val_labels: self.val_labels.clone(),
            classes: self.classes,
            rows: self.rows,
        }
    }

    /// Gram statistics over all rows.
    pub fn full(&self) -> Result<(Mat<f64>, Mat<f64>)> {
        let y = LabelMatrix::one_hot(&self.val_labels, self.classes)?;
        let g = &self.g_fit + self.val_a.transpose() * &self.val_a;
        let aty = &self.aty_fit + self.val_a.transpose() * y.as_mat();
        Ok((g, aty))
    }

    /// λ from the grid by validation accuracy, or the fixed value.
    pub fn choose_lambda(&self, lambda: Lambda, grid: &[f64]) -> Result<(f64, Option<LambdaChoice>)> {
        match lambda {
            Lambda::Fixed(l) => Ok((l, None)),
            Lambda::Search if self.val_a.nrows() == 0 => Err(Error::config("lambda search needs validation rows")),
            Lambda::Search => {
                let choice = GramPath::new(self.g_fit.as_ref(), self.aty_fit.as_ref())?.search(
                    self.val_a.as_ref(),
                    &self.val_labels,
                    grid,
                )?;
                Ok((choice.lambda, Some(choice)))
            }
        }
    }

    /// Chooses λ, then solves on all rows.
    pub fn solve(&self, lambda: Lambda, grid: &[f64]) -> Result<(f64, Option<LambdaChoice>, Mat<f64>)> {
        let (l, choice) = self.choose_lambda(lambda, grid)?;
        let (g, aty) = self.full()?;
        Ok((l, choice, spd_shift_solve(g.as_ref(), l, aty.as_ref())?))
    }
}

/// Fitted output layer.
#[derive(Debug)]
pub struct Readout {
    pub lambda: f64,
    pub choice: Option<LambdaChoice>,
    pub weights: Mat<f64>,
    pub state: Option<SolverState>,
    pub design: Option<Design>,
}

/// Deterministic validation mask holding `round(fraction·n)` rows (at least one, at most `n − 1`).
pub fn validation_mask(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(VAL_STREAM);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let count = ((fraction * n as f64).round() as usize).clamp(1.min(n), n.saturating_sub(1));
    let mut mask = vec![false; n];
    for &i in &idx[..count] {
        mask[i] = true;
    }
    mask
}

/// Fits ridge weights on the rows produced by `columns(start, end)`.
///
/// When the design is wider than tall, A is held in memory and λ is chosen by
/// leave-one-out accuracy; otherwise A is streamed into Gram statistics and λ
/// is chosen on a held-out validation part, then refitted on all rows.
pub fn fit_readout(
    rows: usize,
    cols: usize,
    y: &LabelMatrix,
    spec: &ReadoutSpec,
    times: &mut PhaseTimes,
    columns: &mut dyn FnMut(usize, usize) -> Result<FeatureMatrix>,
) -> Result<Readout> {
    sequential_linalg();
    if rows == 0 || y.rows() != rows {
        return Err(Error::input(format!("{rows} feature rows for {} labels", y.rows())));
    }
    let classes = y.classes();
    let mut next = |s: usize, e: usize, times: &mut PhaseTimes| -> Result<FeatureMatrix> {
        let t = Instant::now();
        let a = columns(s, e)?;
        times.forward += t.elapsed().as_secs_f64();
        if a.rows() != e - s || a.cols() != cols {
            return Err(Error::dim(format!(
                "feature chunk is {}×{}, expected {}×{cols}",
                a.rows(),
                a.cols(),
                e - s
            )));
        }
        Ok(a)
    };

    if rows < cols {
        let mut data = Vec::with_capacity(rows * cols);
        let mut s = 0;
        while s < rows {
            let e = (s + CHUNK).min(rows);
            data.extend_from_slice(next(s, e, times)?.data());
            s = e;
        }
        let t = Instant::now();
        let a = FeatureMatrix::new(rows, cols, data)?;
        let (lambda, choice) = match spec.lambda {
            Lambda::Fixed(l) => (l, None),
            Lambda::Search => {
                let c = loo_lambda_search(a.as_mat(), y, &spec.grid)?;
                (c.lambda, Some(c))
            }
        };
        let (weights, state) = if spec.keep_state {
            let g = gram(a.as_mat());
            let aty = a.as_mat().transpose() * y.as_mat();
            let state = SolverState::from_gram(g, aty, rows, lambda, spec.keep_gram)?;
            (state.weights().to_owned(), Some(state))
        } else {
            (ridge_solve(a.as_mat(), y.as_mat(), lambda)?, None)
        };
        times.solve += t.elapsed().as_secs_f64();
        return Ok(Readout {
            lambda,
            choice,
            weights,
            state,
            design: None,
        });
    }

    let mask = match spec.lambda {
        Lambda::Search => validation_mask(rows, spec.val_fraction, spec.seed),
        Lambda::Fixed(_) => vec![false; rows],
    };
    let mut acc = GramAccumulator::new(cols, classes);
    let mut val_data: Vec<f64> = Vec::new();
    let mut val_labels: Vec<usize> = Vec::new();
    let mut s = 0;
    while s < rows {
        let e = (s + CHUNK).min(rows);
        let a = next(s, e, times)?;
        let t = Instant::now();
        let fit: Vec<usize> = (s..e).filter(|&i| !mask[i]).collect();
        let mut fit_data = Vec::with_capacity(fit.len() * cols);
        for i in s..e {
            if mask[i] {
                val_data.extend_from_slice(a.row(i - s));
                val_labels.push(y.labels()[i]);
            } else {
                fit_data.extend_from_slice(a.row(i - s));
            }
        }
        if !fit.is_empty() {
            let fa = FeatureMatrix::new(fit.len(), cols, fit_data)?;
            let fy = Mat::from_fn(fit.len(), classes, |r, c| y.as_mat()[(fit[r], c)]);
            acc.add(fa.as_mat(), fy.as_ref())?;
        }
        times.solve += t.elapsed().as_secs_f64();
        s = e;
    }
    let t = Instant::now();
    let (g_fit, aty_fit) = acc.into_parts();
    let val_a = FeatureMatrix::new(val_labels.len(), cols, val_data)?;
    let design = Design {
        g_fit,
        aty_fit,
        val_a: val_a.as_mat().to_owned(),
        val_labels,
        classes,
        rows,
    };
    drop(val_a);
    let (lambda, choice) = design.choose_lambda(spec.lambda, &spec.grid)?;
    let (g, aty) = design.full()?;
    let (weights, state) = if spec.keep_state {
        let state = SolverState::from_gram(g, aty, rows, lambda, spec.keep_gram)?;
        (state.weights().to_owned(), Some(state))
    } else {
        (spd_shift_solve(g.as_ref(), lambda, aty.as_ref())?, None)
    };
    times.solve += t.elapsed().as_secs_f64();
    Ok(Readout {
        lambda,
        choice,
        weights,
        state,
        design: spec.keep_design.then_some(design),
    })
}

/// A dataset with its cached fused maps.
#[derive(Clone, Debug)]
pub struct Split {
    pub data: Dataset,
    pub z: Vec<ImageBatch>,
    pub y: LabelMatrix,
}

impl Split {
    pub fn new(model: &Model, data: Dataset) -> Result<Split> {
        model.check_input(&data.images)?;
        if data.classes != model.classes {
            return Err(Error::input(format!(
                "dataset has {} classes, model {}",
                data.classes, model.classes
            )));
        }
        let z = model.encode_all(&data.images)?;
        let y = LabelMatrix::one_hot(&data.labels, data.classes)?;
        Ok(Split { data, z, y })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub lambda: f64,
    pub choice: Option<LambdaChoice>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub times: PhaseTimes,
    pub cols: usize,
}

/// A trained model with its data, caches and (optionally) solver state.
#[derive(Debug)]
pub struct Session {
    pub model: Model,
    pub state: Option<SolverState>,
    pub train: Split,
    pub test: Split,
}

#[derive(Debug)]
pub struct Trained {
    pub session: Session,
    pub report: TrainReport,
    pub design: Option<Design>,
}

/// Trains the base network and its output layer, then scores both splits.
///
/// `unsupervised` supplies the images the CF filters are learned from
/// (defaults to the training images); only `train` labels reach the solver.
pub fn train(
    cfg: &ModelConfig,
    unsupervised: Option<&ImageBatch>,
    train: Dataset,
    test: Dataset,
    readout: &ReadoutSpec,
) -> Result<Trained> {
    cfg.validate()?;
    sequential_linalg();
    if train.is_empty() || test.is_empty() {
        return Err(Error::input("training and test sets must be non-empty"));
    }
    if train.classes != test.classes {
        return Err(Error::input("training and test sets disagree on the class count"));
    }
    let input = [train.images.channels(), train.images.height(), train.images.width()];
    let mut times = PhaseTimes::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source = unsupervised.unwrap_or(&train.images);
    let (cf, cf_time) = train_cf_stack_timed(source, &CfSpec::from_config(cfg, cfg.c1), &mut rng)?;
    times.patching = cf_time.patching;
    times.skm = cf_time.skm;
    let c_f = cf.iter().map(CfLayer::out_channels).sum();
    let ce = if cfg.m == 0 {
        Vec::new()
    } else {
        build_ce_stack(cfg, c_f, &mut rng)?
    };
    let mut model = Model {
        config: cfg.clone(),
        input,
        classes: train.classes,
        blocks: vec![Block::Feature { cf, ce }],
        lambda: f64::NAN,
        weights: Mat::zeros(0, train.classes),
    };

    let t = Instant::now();
    let train = Split::new(&model, train)?;
    let test = Split::new(&model, test)?;
    times.forward += t.elapsed().as_secs_f64();

    let cols = model.cols();
    let readout = {
        let m = &model;
        let zs = &train.z;
        fit_readout(train.len(), cols, &train.y, readout, &mut times, &mut |s, e| {
            m.columns(&chunk_of(zs, s, e)?)
        })?
    };
    model.lambda = readout.lambda;
    model.weights = readout.weights;
    let session = Session {
        model,
        state: readout.state,
        train,
        test,
    };
    let (train_accuracy, test_accuracy) = session.evaluate()?;
    log::info!(
        "trained {cols} columns, lambda {}, train {train_accuracy:.4}, test {test_accuracy:.4}",
        readout.lambda
    );
    Ok(Trained {
        session,
        report: TrainReport {
            lambda: readout.lambda,
            choice: readout.choice,
            train_accuracy,
            test_accuracy,
            times,
            cols,
        },
        design: readout.design,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IncrementKind {
    Feature,
    Enhancement,
}

impl IncrementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IncrementKind::Feature => "feature",
            IncrementKind::Enhancement => "enhancement",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncrementReport {
    pub kind: IncrementKind,
    pub feature_maps_added: usize,
    pub enhancement_maps_added: usize,
    pub new_cols: usize,
    pub total_cols: usize,
    pub branch: Option<QBranch>,
    pub q_norm: f64,
    /// Wall time of the update itself (new layers, their features, the solve).
    pub seconds: f64,
    pub cf1: usize,
    pub ce1: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Chunks of the current columns (from the caches) and of a new block.
struct CacheSource<'a> {
    model: &'a Model,
    fusion: FusionSpec,
    zs: &'a [ImageBatch],
    block: &'a Block,
    slot: usize,
    y: &'a LabelMatrix,
}

impl ColumnSource for CacheSource<'_> {
    fn for_each_chunk(
        &mut self,
        f: &mut dyn FnMut(faer::MatRef<'_, f64>, faer::MatRef<'_, f64>, faer::MatRef<'_, f64>) -> Result<()>,
    ) -> Result<()> {
        let n = self.y.rows();
        let mut s = 0;
        while s < n {
            let e = (s + CHUNK).min(n);
            let zc = chunk_of(self.zs, s, e)?;
            let a = self.model.columns(&zc)?;
            let new = block_columns(self.block, self.slot, &zc, &self.fusion)?;
            f(a.as_mat(), new.as_mat(), self.y.as_mat().subrows(s, e - s))?;
            s = e;
        }
        Ok(())
    }
}

impl Session {
    /// Wraps a trained (or loaded) model; caches are computed from the images.
    pub fn new(model: Model, state: Option<SolverState>, train: Dataset, test: Dataset) -> Result<Session> {
        sequential_linalg();
        if let Some(st) = &state {
            if st.cols() != model.cols() || st.rows() != train.len() {
                return Err(Error::input(format!(
                    "solver state is {} rows × {} columns, data and model give {} × {}",
                    st.rows(),
                    st.cols(),
                    train.len(),
                    model.cols()
                )));
            }
        }
        let train = Split::new(&model, train)?;
        let test = Split::new(&model, test)?;
        Ok(Session {
            model,
            state,
            train,
            test,
        })
    }

    pub fn accuracy(&self, split: &Split) -> Result<f64> {
        let (pred, _) = self.model.predict_cached(&split.z)?;
        Ok(accuracy(&pred, &split.data.labels))
    }

    /// Train and test accuracy.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        Ok((self.accuracy(&self.train)?, self.accuracy(&self.test)?))
    }

    fn require_state(&self) -> Result<()> {
        if self.state.is_none() {
            return Err(Error::Capability(
                "model has no incremental solver state; retrain with increments enabled".into(),
            ));
        }
        Ok(())
    }

    fn noop(&self, kind: IncrementKind) -> Result<IncrementReport> {
        let (train_accuracy, test_accuracy) = self.evaluate()?;
        Ok(IncrementReport {
            kind,
            feature_maps_added: 0,
            enhancement_maps_added: 0,
            new_cols: 0,
            total_cols: self.model.cols(),
            branch: None,
            q_norm: 0.0,
            seconds: 0.0,
            cf1: self.model.cf1_width(),
            ce1: self.model.ce1_width(),
            train_accuracy,
            test_accuracy,
        })
    }

    /// Appends a block's columns to the solver and the model, then rescores.
    fn append_block(&mut self, kind: IncrementKind, block: Block, started: Instant) -> Result<IncrementReport> {
        let fusion = self.model.fusion()?;
        let slot = self.model.feature_blocks();
        let p = block.maps() * fusion.b_tot();
        let state = self.state.as_mut().ok_or_else(|| Error::Capability("no solver state".into()))?;
        let summary = state.append(
            p,
            &mut CacheSource {
                model: &self.model,
                fusion,
                zs: &self.train.z,
                block: &block,
                slot,
                y: &self.train.y,
            },
        )?;
        let (feature_maps_added, enhancement_maps_added) = (block.feature_maps(), block.enhancement_maps());
        self.model.blocks.push(block);
        self.model.weights = state.weights().to_owned();
        let seconds = started.elapsed().as_secs_f64();
        let (train_accuracy, test_accuracy) = self.evaluate()?;
        Ok(IncrementReport {
            kind,
            feature_maps_added,
            enhancement_maps_added,
            new_cols: summary.new_cols,
            total_cols: self.model.cols(),
            branch: Some(summary.branch),
            q_norm: summary.q_norm,
            seconds,
            cf1: self.model.cf1_width(),
            ce1: self.model.ce1_width(),
            train_accuracy,
            test_accuracy,
        })
    }

    /// Adds a random CE chain of first width `c_e_a` on all current fused feature maps.
    pub fn add_enhancement_nodes<R: Rng + ?Sized>(&mut self, c_e_a: usize, rng: &mut R) -> Result<IncrementReport> {
        self.require_state()?;
        if c_e_a == 0 {
            return self.noop(IncrementKind::Enhancement);
        }
        let started = Instant::now();
        let cfg = &self.model.config;
        let sources = self.model.feature_blocks();
        let widths = channel_schedule(c_e_a, cfg.expansion, cfg.m.max(1));
        let ce = build_ce_chain(self.model.feature_maps(), &widths, cfg.ce_kernel, cfg.ce_activation, rng)?;
        self.append_block(IncrementKind::Enhancement, Block::Enhancement { sources, ce }, started)
    }

    /// CE_1 growth that accompanies `c_f_a` new CF_1 maps: `round(c_f_a·C_2/C_1)`.
    pub fn paired_enhancement(&self, c_f_a: usize) -> usize {
        let cfg = &self.model.config;
        (c_f_a as f64 * cfg.c2_effective() as f64 / cfg.c1 as f64).round() as usize
    }

    /// Adds a CF chain of first width `c_f_a` learned on the training images, and
    /// a CE chain of first width `c_e` (the paired rule when `None`) on its maps.
    pub fn add_feature_nodes<R: Rng + ?Sized>(
        &mut self,
        c_f_a: usize,
        c_e: Option<usize>,
        rng: &mut R,
    ) -> Result<IncrementReport> {
        self.require_state()?;
        if c_f_a == 0 {
            return self.noop(IncrementKind::Feature);
        }
        let started = Instant::now();
        let cfg = self.model.config.clone();
        let (cf, _) = train_cf_stack_timed(&self.train.data.images, &CfSpec::from_config(&cfg, c_f_a), rng)?;
        let c_f: usize = cf.iter().map(CfLayer::out_channels).sum();
        let c_e = c_e.unwrap_or_else(|| self.paired_enhancement(c_f_a));
        let ce = if c_e == 0 || cfg.m == 0 {
            Vec::new()
        } else {
            build_ce_chain(c_f, &channel_schedule(c_e, cfg.expansion, cfg.m), cfg.ce_kernel, cfg.ce_activation, rng)?
        };
        let train_z = encode_with(&self.train.data.images, |x| Ok(vec![fused_features(&cf, x)?]))?;
        let test_z = encode_with(&self.test.data.images, |x| Ok(vec![fused_features(&cf, x)?]))?;
        let expected = self.train.z.first().map(|z| z.height());
        if expected.is_some_and(|v| v != train_z[0].height()) {
            return Err(Error::dim("new feature maps do not match the cached spatial size"));
        }
        self.train.z.extend(train_z);
        self.test.z.extend(test_z);
        let result = self.append_block(IncrementKind::Feature, Block::Feature { cf, ce }, started);
        if result.is_err() && self.model.feature_blocks() < self.train.z.len() {
            self.train.z.pop();
            self.test.z.pop();
        }
        result
    }
}

/// Per-increment RNG: the model seed on stream `step`.
pub fn increment_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::ImageBatch;

    /// Two-class toy images: a bright square in the top-left or bottom-right.
    pub(crate) fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let noise: Vec<f64> = (0..n * 144).map(|_| rng.gen_range(0.0..0.3)).collect();
        let images = ImageBatch::from_fn([n, 1, 12, 12], |s, _, y, x| {
            let on = if labels[s] == 0 { y < 6 && x < 6 } else { y >= 6 && x >= 6 };
            noise[s * 144 + y * 12 + x] + if on { 0.7 } else { 0.0 }
        });
        Dataset::new("toy", images, labels, 2).unwrap()
    }

    pub(crate) fn toy_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.n = 2;
        cfg.c1 = 4;
        cfg.cf_kernel = 3;
        cfg.patches = 2000;
        cfg.skm_iters = 3;
        cfg.spp_bins = vec![3, 1];
        cfg
    }

    #[test]
    fn toy_training_learns_and_is_deterministic() {
        let cfg = toy_config();
        let spec = ReadoutSpec::from_config(&cfg);
        let a = train(&cfg, None, toy_dataset(300, 1), toy_dataset(100, 2), &spec).unwrap();
        assert!(a.report.test_accuracy > 0.9, "{:?}", a.report);
        assert_eq!(a.report.cols, (4 + 8 + 12) * 10);
        let b = train(&cfg, None, toy_dataset(300, 1), toy_dataset(100, 2), &spec).unwrap();
        assert_eq!(a.report.lambda, b.report.lambda);
        let (pa, sa) = a.session.model.predict(&a.session.test.data.images).unwrap();
        let (pb, sb) = b.session.model.predict(&b.session.test.data.images).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(sa, sb);
    }

    #[test]
    fn wide_design_uses_leave_one_out() {
        let cfg = toy_config();
        let t = train(&cfg, None, toy_dataset(40, 3), toy_dataset(50, 4), &ReadoutSpec::from_config(&cfg)).unwrap();
        assert!(t.report.cols > 40);
        assert_eq!(t.report.choice.unwrap().accuracies.len(), cfg.lambda_grid.len());
    }

    #[test]
    fn validation_mask_size_and_determinism() {
        let m = validation_mask(1000, 0.1, 7);
        assert_eq!(m.iter().filter(|&&v| v).count(), 100);
        assert_eq!(m, validation_mask(1000, 0.1, 7));
        assert_ne!(m, validation_mask(1000, 0.1, 8));
    }

    #[test]
    fn column_subset_refit_matches_direct_fit() {
        let rows = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..rows * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = FeatureMatrix::new(rows, 6, a).unwrap();
        let labels: Vec<usize> = (0..rows).map(|i| usize::from(a.row(i)[1] > 0.0)).collect();
        let y = LabelMatrix::one_hot(&labels, 2).unwrap();
        let mut spec = ReadoutSpec::from_config(&ModelConfig::default());
        spec.keep_design = true;
        let mut times = PhaseTimes::default();
        let full = fit_readout(rows, 6, &y, &spec, &mut times, &mut |s, e| {
            FeatureMatrix::new(e - s, 6, a.data()[s * 6..e * 6].to_vec())
        })
        .unwrap();
        let sub = [1, 4];
        let (_, _, w) = full.design.unwrap().select(&sub).solve(Lambda::Fixed(0.5), &[]).unwrap();
        let a_sub = select_columns(&a, &sub).unwrap();
        let direct = ridge_solve(a_sub.as_mat(), y.as_mat(), 0.5).unwrap();
        assert!((&w - &direct).norm_max() < 1e-10);
    }

    #[test]
    fn increments_grow_columns_and_keep_train_accuracy() {
        let mut cfg = toy_config();
        cfg.lambda = Lambda::Fixed(1e-3);
        cfg.c2 = Some(6);
        let mut spec = ReadoutSpec::from_config(&cfg);
        spec.keep_state = true;
        spec.keep_gram = true;
        let t = train(&cfg, None, toy_dataset(400, 5), toy_dataset(100, 6), &spec).unwrap();
        let mut s = t.session;
        let b_tot = cfg.b_tot();
        let mut prev = t.report.train_accuracy;
        let e = s.add_enhancement_nodes(3, &mut increment_rng(cfg.seed, 1)).unwrap();
        assert_eq!(e.new_cols, 3 * b_tot);
        assert!(e.train_accuracy >= prev - 1e-6);
        prev = e.train_accuracy;
        let f = s.add_feature_nodes(2, None, &mut increment_rng(cfg.seed, 2)).unwrap();
        // 2 + 4 CF maps and a paired CE width of round(2·6/4) = 3.
        assert_eq!(f.new_cols, (2 + 4 + 3) * b_tot);
        assert_eq!(f.total_cols, s.model.cols());
        assert_eq!(s.model.cols(), (s.model.feature_maps() + s.model.enhancement_maps()) * b_tot);
        assert!(f.train_accuracy >= prev - 1e-6);
        let z = s.add_enhancement_nodes(0, &mut increment_rng(cfg.seed, 3)).unwrap();
        assert_eq!(z.new_cols, 0);
        // The grown weights equal a fresh solve on the grown design.
        let w = s.state.as_ref().unwrap().retrain_weights().unwrap();
        let diff = (&w - &s.model.weights).norm_max() / w.norm_max();
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn increments_need_state() {
        let cfg = toy_config();
        let t = train(&cfg, None, toy_dataset(200, 7), toy_dataset(50, 8), &ReadoutSpec::from_config(&cfg)).unwrap();
        let mut s = t.session;
        let err = s.add_enhancement_nodes(2, &mut increment_rng(1, 1)).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }
}
