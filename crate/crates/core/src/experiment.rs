//! Experiment drivers shared by the command line and the acceptance run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{load_named, split_semi, Dataset, Split as DataSplit};
use crate::error::{Error, Result};
use crate::fusion::{fuse_stage2, FeatureMatrix, FusionSpec};
use crate::layers::fused_features;
use crate::metrics::MetricsRecord;
use crate::model::{
    block_columns, chunk_of, fit_readout, increment_rng, select_columns, train, Block, IncrementKind, IncrementReport,
    Model, PhaseTimes, ReadoutSpec, Session, TrainReport, Trained, CHUNK,
};
use crate::ridge::{accuracy, argmax_rows, LabelMatrix};
use crate::tensor::ImageBatch;

/// Environment variable naming the dataset directory.
pub const DATA_DIR_ENV: &str = "CONVBLS_DATA_DIR";

/// The explicit directory, else the environment variable, else `./data`.
pub fn data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Train and test splits of the configured dataset, truncated to the configured limits.
pub fn load_splits(cfg: &ModelConfig, dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_named(dir, &cfg.dataset, DataSplit::Train)?.truncate(cfg.train_limit)?;
    let test = load_named(dir, &cfg.dataset, DataSplit::Test)?.truncate(cfg.test_limit)?;
    Ok((train, test))
}

/// A metrics row carrying the model's bookkeeping; accuracies and times are filled by callers.
pub fn model_record(command: &str, model: &Model, variant: &str) -> MetricsRecord {
    let cfg = &model.config;
    MetricsRecord {
        run_id: format!("{command}-{}-{}", cfg.hash(), cfg.seed),
        command: command.to_string(),
        config_hash: cfg.hash(),
        dataset: cfg.dataset.clone(),
        seed: cfg.seed,
        variant: variant.to_string(),
        cf1: model.cf1_width(),
        ce1: model.ce1_width(),
        feature_maps: model.feature_maps(),
        enhancement_maps: model.enhancement_maps(),
        columns: model.cols(),
        lambda: model.lambda,
        ..Default::default()
    }
}

pub fn train_record(command: &str, model: &Model, report: &TrainReport, variant: &str) -> MetricsRecord {
    let t = &report.times;
    MetricsRecord {
        columns: report.cols,
        lambda: report.lambda,
        train_acc: Some(report.train_accuracy),
        test_acc: report.test_accuracy,
        t_patching: t.patching,
        t_skm: t.skm,
        t_forward: t.forward,
        t_solve: t.solve,
        t_total: t.total(),
        ..model_record(command, model, variant)
    }
}

/// Row for one increment step; `t_total` is the cumulative time including initial training.
pub fn increment_record(model: &Model, rep: &IncrementReport, step: usize, cumulative: f64) -> MetricsRecord {
    MetricsRecord {
        step,
        cf1: rep.cf1,
        ce1: rep.ce1,
        columns: rep.total_cols,
        branch: rep.branch.map_or(String::new(), |b| b.as_str().to_string()),
        train_acc: Some(rep.train_accuracy),
        test_acc: rep.test_accuracy,
        t_step: rep.seconds,
        t_total: cumulative,
        ..model_record("increment", model, rep.kind.as_str())
    }
}

/// Runs `steps` increments of `amount` maps each. Step `i` draws from RNG
/// stream `blocks + 1`, so a replay from the same archive is identical.
pub fn run_increments(
    session: &mut Session,
    kind: IncrementKind,
    amount: usize,
    steps: usize,
    paired_ce: Option<usize>,
) -> Result<Vec<IncrementReport>> {
    let seed = session.model.config.seed;
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut rng = increment_rng(seed, session.model.blocks.len() as u64);
        let rep = match kind {
            IncrementKind::Enhancement => session.add_enhancement_nodes(amount, &mut rng)?,
            IncrementKind::Feature => session.add_feature_nodes(amount, paired_ce, &mut rng)?,
        };
        log::info!(
            "{} step {}: +{} columns ({} total), {:.2}s, test {:.4}",
            kind.as_str(),
            step + 1,
            rep.new_cols,
            rep.total_cols,
            rep.seconds,
            rep.test_accuracy
        );
        out.push(rep);
    }
    Ok(out)
}

/// Accuracy of `w` on columns produced chunk by chunk.
fn score(rows: usize, labels: &[usize], w: &Mat<f64>, columns: &mut dyn FnMut(usize, usize) -> Result<FeatureMatrix>) -> Result<f64> {
    let mut pred = Vec::with_capacity(rows);
    let mut s = 0;
    while s < rows {
        let e = (s + CHUNK).min(rows);
        let a = columns(s, e)?;
        pred.extend(argmax_rows((a.as_mat() * w).as_ref()));
        s = e;
    }
    Ok(accuracy(&pred, labels))
}

/// Fits a readout on one column family and scores it on the test split.
fn fit_variant(
    base: &Trained,
    variant: &str,
    cols: usize,
    train_cols: &mut dyn FnMut(usize, usize) -> Result<FeatureMatrix>,
    test_cols: &mut dyn FnMut(usize, usize) -> Result<FeatureMatrix>,
) -> Result<MetricsRecord> {
    let s = &base.session;
    let cfg = &s.model.config;
    let mut times = PhaseTimes::default();
    let r = fit_readout(s.train.len(), cols, &s.train.y, &ReadoutSpec::from_config(cfg), &mut times, train_cols)?;
    let t = Instant::now();
    let test_acc = score(s.test.len(), &s.test.data.labels, &r.weights, test_cols)?;
    times.forward += t.elapsed().as_secs_f64();
    Ok(MetricsRecord {
        columns: cols,
        lambda: r.lambda,
        test_acc,
        t_forward: times.forward,
        t_solve: times.solve,
        t_total: times.total(),
        ..model_record("ablate", &s.model, variant)
    })
}

/// SKM filters against random unit filters, everything else equal.
pub fn ablate_random_filters(base: &Trained) -> Result<Vec<MetricsRecord>> {
    let s = &base.session;
    let mut cfg = s.model.config.clone();
    let skm = MetricsRecord {
        variant: format!("filters={}", cfg.filters.as_str()),
        ..train_record("ablate", &s.model, &base.report, "")
    };
    cfg.filters = match cfg.filters {
        crate::config::FilterInit::Skm => crate::config::FilterInit::Random,
        crate::config::FilterInit::Random => crate::config::FilterInit::Skm,
    };
    let other = train(
        &cfg,
        None,
        s.train.data.clone(),
        s.test.data.clone(),
        &ReadoutSpec::from_config(&cfg),
    )?;
    let rec = MetricsRecord {
        variant: format!("filters={}", cfg.filters.as_str()),
        ..train_record("ablate", &other.session.model, &other.report, "")
    };
    Ok(vec![skm, rec])
}

/// Columns holding the given pyramid levels of every map.
pub fn level_columns(maps: usize, fusion: &FusionSpec, levels: &[usize]) -> Vec<usize> {
    let b_tot = fusion.b_tot();
    let mut cols = Vec::new();
    for m in 0..maps {
        for &l in levels {
            let off = m * b_tot + fusion.level_offset(l);
            let b = fusion.bins[l];
            cols.extend(off..off + b * b);
        }
    }
    cols
}

/// Every single pyramid level against the full pyramid, refitted on column subsets.
pub fn ablate_spp_levels(base: &Trained) -> Result<Vec<MetricsRecord>> {
    let design = base
        .design
        .as_ref()
        .ok_or_else(|| Error::Capability("base run kept no design statistics".into()))?;
    let s = &base.session;
    let model = &s.model;
    let fusion = model.fusion()?;
    let maps = model.feature_maps() + model.enhancement_maps();
    let mut out = Vec::new();
    let mut variants: Vec<Vec<usize>> = (0..fusion.bins.len()).map(|l| vec![l]).collect();
    variants.push((0..fusion.bins.len()).collect());
    for levels in variants {
        let t = Instant::now();
        let cols = level_columns(maps, &fusion, &levels);
        let sub = design.select(&cols);
        let (lambda, _, w) = sub.solve(model.config.lambda, &model.config.lambda_grid)?;
        let solve = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let test_acc = score(s.test.len(), &s.test.data.labels, &w, &mut |a, b| {
            select_columns(&model.columns(&chunk_of(&s.test.z, a, b)?)?, &cols)
        })?;
        let names: Vec<String> = levels.iter().map(|&l| fusion.bins[l].to_string()).collect();
        out.push(MetricsRecord {
            columns: cols.len(),
            lambda,
            test_acc,
            t_solve: solve,
            t_forward: t.elapsed().as_secs_f64(),
            t_total: solve + t.elapsed().as_secs_f64(),
            ..model_record("ablate", model, &format!("bins={}", names.join("+")))
        });
    }
    Ok(out)
}

/// Modules added one at a time: 1..n CF layers (flattened, no pyramid), then
/// the CE layers, then the pyramid (the base run itself).
pub fn ablate_progressive(base: &Trained) -> Result<Vec<MetricsRecord>> {
    let s = &base.session;
    let model = &s.model;
    let (cf, ce) = match &model.blocks[0] {
        Block::Feature { cf, ce } => (cf, ce),
        Block::Enhancement { .. } => return Err(Error::input("first block is not a feature block")),
    };
    let pool = model.config.spp_pool;
    let mut out = Vec::new();
    for k in 1..=cf.len() {
        let probe = fused_features(&cf[..k], &s.test.data.images.slice_samples(0, 1)?)?;
        let flat = FusionSpec::new(vec![probe.height()], pool)?;
        let cols = probe.channels() * flat.b_tot();
        let columns = |x: &ImageBatch, a: usize, b: usize| -> Result<FeatureMatrix> {
            fuse_stage2(&fused_features(&cf[..k], &x.slice_samples(a, b)?)?, &flat)
        };
        out.push(fit_variant(
            base,
            &format!("cf{k}"),
            cols,
            &mut |a, b| columns(&s.train.data.images, a, b),
            &mut |a, b| columns(&s.test.data.images, a, b),
        )?);
    }
    if !ce.is_empty() {
        let v = s.train.z[0].height();
        let flat = FusionSpec::new(vec![v], pool)?;
        let only_base = Block::Feature { cf: Vec::new(), ce: ce.clone() };
        let cols = (model.blocks[0].maps()) * flat.b_tot();
        out.push(fit_variant(
            base,
            &format!("cf{}+ce", cf.len()),
            cols,
            &mut |a, b| block_columns(&only_base, 0, &chunk_of(&s.train.z[..1], a, b)?, &flat),
            &mut |a, b| block_columns(&only_base, 0, &chunk_of(&s.test.z[..1], a, b)?, &flat),
        )?);
    }
    let name = if ce.is_empty() {
        format!("cf{}+tsms", cf.len())
    } else {
        format!("cf{}+ce+tsms", cf.len())
    };
    out.push(MetricsRecord {
        train_acc: None,
        ..train_record("ablate", model, &base.report, &name)
    });
    Ok(out)
}

/// Semi-supervised runs: filters from labeled ∪ unlabeled images, readout from
/// labeled rows only. Repeat `r` uses seed `seed + r`.
pub fn semi(
    cfg: &ModelConfig,
    train_full: &Dataset,
    test: &Dataset,
    n_labeled: usize,
    n_unlabeled: usize,
    repeats: usize,
) -> Result<Vec<MetricsRecord>> {
    if repeats == 0 {
        return Err(Error::config("repeats must be >= 1"));
    }
    let mut rows = Vec::with_capacity(repeats + 2);
    for r in 0..repeats {
        let mut c = cfg.clone();
        c.seed = cfg.seed + r as u64;
        let split = split_semi(train_full, n_labeled, n_unlabeled, &mut ChaCha8Rng::seed_from_u64(c.seed))?;
        let mut pool: Vec<usize> = split.labeled.iter().chain(&split.unlabeled).cloned().collect();
        pool.sort_unstable();
        let unsup = train_full.images.select(&pool)?;
        let labeled = train_full.select(&split.labeled)?;
        let t = train(&c, Some(&unsup), labeled, test.clone(), &ReadoutSpec::from_config(&c))?;
        log::info!("semi repeat {r}: test {:.4}", t.report.test_accuracy);
        rows.push(train_record("semi", &t.session.model, &t.report, &format!("repeat={r}")));
    }
    if repeats > 1 {
        let accs: Vec<f64> = rows.iter().map(|r| r.test_acc).collect();
        let mean = accs.iter().sum::<f64>() / repeats as f64;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
        let total: f64 = rows.iter().map(|r| r.t_total).sum();
        let template = MetricsRecord {
            seed: cfg.seed,
            run_id: format!("semi-{}-{}", cfg.hash(), cfg.seed),
            train_acc: None,
            t_patching: 0.0,
            t_skm: 0.0,
            t_forward: 0.0,
            t_solve: 0.0,
            t_total: total,
            ..rows[0].clone()
        };
        rows.push(MetricsRecord {
            variant: "mean".into(),
            test_acc: mean,
            ..template.clone()
        });
        rows.push(MetricsRecord {
            variant: "std".into(),
            test_acc: var.sqrt(),
            ..template
        });
    }
    Ok(rows)
}

/// Trains once per value of `key`.
pub fn sweep(cfg: &ModelConfig, key: &str, values: &[String], train_set: &Dataset, test: &Dataset) -> Result<Vec<MetricsRecord>> {
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        c.set(key, v)?;
        c.validate()?;
        let t = train(&c, None, train_set.clone(), test.clone(), &ReadoutSpec::from_config(&c))?;
        rows.push(train_record("sweep", &t.session.model, &t.report, &format!("{key}={v}")));
    }
    Ok(rows)
}

/// Binary PGM of the effective filters of CF layer `layer` (1-based) of the base block.
///
/// Tiles are `kernel` high and `kernel·channels` wide (channels side by side),
/// each min-max scaled to 0..255 (a constant filter becomes 128), laid out in
/// a near-square grid with 1-pixel black separators.
pub fn filters_pgm(model: &Model, layer: usize) -> Result<Vec<u8>> {
    let cf = match model.blocks.first() {
        Some(Block::Feature { cf, .. }) => cf,
        _ => return Err(Error::input("model has no feature block")),
    };
    let l = cf
        .get(layer.wrapping_sub(1))
        .ok_or_else(|| Error::input(format!("layer {layer} does not exist (model has {} CF layers)", cf.len())))?;
    let mut tiles: Vec<(usize, Vec<f64>)> = Vec::new();
    for g in &l.groups {
        let channels = g.channels().len();
        if channels > 3 {
            return Err(Error::input(format!(
                "CF layer {layer} filters span {channels} input channels; only layers with at most 3 can be drawn"
            )));
        }
        let dim = g.bank().dim();
        tiles.extend(g.effective_filters().chunks(dim).map(|f| (channels, f.to_vec())));
    }
    let k = l.kernel;
    let count = tiles.len();
    let channels = tiles.iter().map(|t| t.0).max().unwrap_or(1);
    let (tw, th) = (k * channels, k);
    let grid_cols = (count as f64).sqrt().ceil() as usize;
    let grid_rows = count.div_ceil(grid_cols);
    let width = grid_cols * tw + grid_cols - 1;
    let height = grid_rows * th + grid_rows - 1;
    let mut pixels = vec![0u8; width * height];
    for (t, (c, f)) in tiles.iter().enumerate() {
        let (gy, gx) = (t / grid_cols, t % grid_cols);
        let (lo, hi) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        for ch in 0..*c {
            for y in 0..k {
                for x in 0..k {
                    let v = f[ch * k * k + y * k + x];
                    let p = if hi - lo > 0.0 {
                        ((v - lo) / (hi - lo) * 255.0).round() as u8
                    } else {
                        128
                    };
                    let py = gy * (th + 1) + y;
                    let px = gx * (tw + 1) + ch * k + x;
                    pixels[py * width + px] = p;
                }
            }
        }
    }
    let mut out = format!("P5 {width} {height} 255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Accuracy of `model` on `data`, with the labels one-hot checked.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    LabelMatrix::one_hot(&data.labels, model.classes)?;
    let (pred, _) = model.predict(&data.images)?;
    Ok(accuracy(&pred, &data.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Lambda;
    use crate::model::tests::{toy_config, toy_dataset};

    fn base() -> Trained {
        let mut cfg = toy_config();
        cfg.c2 = Some(4);
        let mut spec = ReadoutSpec::from_config(&cfg);
        spec.keep_design = true;
        train(&cfg, None, toy_dataset(300, 1), toy_dataset(80, 2), &spec).unwrap()
    }

    #[test]
    fn level_columns_layout() {
        let f = FusionSpec::new(vec![3, 2, 1], crate::tensor::PoolKind::Max).unwrap();
        assert_eq!(level_columns(2, &f, &[2]), vec![13, 27]);
        assert_eq!(level_columns(1, &f, &[1]), (9..13).collect::<Vec<_>>());
        assert_eq!(level_columns(2, &f, &[0, 1, 2]).len(), 28);
    }

    #[test]
    fn ablations_produce_expected_rows() {
        let b = base();
        let spp = ablate_spp_levels(&b).unwrap();
        let names: Vec<&str> = spp.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["bins=3", "bins=1", "bins=3+1"]);
        assert_eq!(spp[2].test_acc, b.report.test_accuracy);
        let prog = ablate_progressive(&b).unwrap();
        let names: Vec<&str> = prog.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["cf1", "cf2", "cf2+ce", "cf2+ce+tsms"]);
        // 12×12 input: 6×6 after one layer, 3×3 after two.
        assert_eq!(prog[0].columns, 4 * 36);
        assert_eq!(prog[1].columns, 12 * 9);
        assert_eq!(prog[2].columns, 16 * 9);
        let rf = ablate_random_filters(&b).unwrap();
        assert_eq!(rf[0].variant, "filters=skm");
        assert_eq!(rf[1].variant, "filters=random");
    }

    #[test]
    fn semi_rows_and_summary() {
        let cfg = toy_config();
        let rows = semi(&cfg, &toy_dataset(200, 3), &toy_dataset(50, 4), 20, 100, 2).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["repeat=0", "repeat=1", "mean", "std"]);
        assert_eq!(rows[0].seed + 1, rows[1].seed);
        let single = semi(&cfg, &toy_dataset(200, 3), &toy_dataset(50, 4), 20, 0, 1).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn increments_replay_identically() {
        let mut cfg = toy_config();
        cfg.lambda = Lambda::Fixed(1e-2);
        let mut spec = ReadoutSpec::from_config(&cfg);
        spec.keep_state = true;
        let run = || {
            let mut s = train(&cfg, None, toy_dataset(200, 5), toy_dataset(50, 6), &spec).unwrap().session;
            run_increments(&mut s, IncrementKind::Enhancement, 2, 2, None).unwrap();
            s.model.weights
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn filter_image_geometry() {
        let mut cfg = toy_config();
        cfg.c1 = 16;
        cfg.cf_kernel = 6;
        cfg.n = 1;
        cfg.m = 0;
        cfg.spp_bins = vec![1];
        let t = train(&cfg, None, toy_dataset(200, 7), toy_dataset(20, 8), &ReadoutSpec::from_config(&cfg)).unwrap();
        let pgm = filters_pgm(&t.session.model, 1).unwrap();
        let header = b"P5 27 27 255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 27 * 27);
        assert!(filters_pgm(&t.session.model, 2).is_err());
    }
}
