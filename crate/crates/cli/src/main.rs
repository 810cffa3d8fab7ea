//! `convbls` command line: train, evaluate, grow and ablate models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use convbls::archive::{load_model, save_model};
use convbls::config::ModelConfig;
use convbls::experiment::{
    ablate_progressive, ablate_random_filters, ablate_spp_levels, data_dir, evaluate, filters_pgm, increment_record,
    load_splits, model_record, run_increments, semi, sweep, train_record,
};
use convbls::metrics::{append_records, MetricsRecord};
use convbls::model::{train, IncrementKind, ReadoutSpec, Session};

#[derive(Parser)]
#[command(name = "convbls", version, about = "Convolutional broad learning system")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides one config key (repeatable), e.g. `--set c1=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Dataset directory (falls back to $CONVBLS_DATA_DIR, then ./data).
    #[arg(long)]
    data_dir: Option<PathBuf>,

    /// CSV file the metrics rows are appended to.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Feat,
    Enh,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    RandomFilters,
    SppLevels,
    Progressive,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, evaluate it on the test split and save it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Archive path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep the solver state needed by `increment`.
        #[arg(long)]
        incremental: bool,
        /// Also keep AᵀA (for from-scratch refits after increments).
        #[arg(long)]
        keep_gram: bool,
    },
    /// Evaluate a saved model on the test split of its dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Grow a saved model by feature or enhancement nodes.
    Increment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Maps added to the first CF (feat) or CE (enh) layer per step.
        #[arg(long)]
        amount: usize,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// CE_1 maps added alongside each feature step (default: amount·C_2/C_1).
        #[arg(long)]
        paired_ce: Option<usize>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Archive for the grown model (default: overwrite --model).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Semi-supervised runs with a few labeled samples.
    Semi {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        labeled: usize,
        #[arg(long, default_value_t = 9000)]
        unlabeled: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
    /// Ablation series.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        variant: Variant,
    },
    /// Write the filters of a CF layer as a PGM tile grid.
    ExportFilters {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per value of one config key.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

fn write_metrics(path: Option<&Path>, rows: &[MetricsRecord]) -> Result<()> {
    for r in rows {
        let train = r.train_acc.map_or(String::new(), |a| format!(" train {a:.4}"));
        println!(
            "{} {} step {}: columns {} lambda {}{train} test {:.4} time {:.1}s",
            r.command, r.variant, r.step, r.columns, r.lambda, r.test_acc, r.t_total
        );
    }
    if let Some(p) = path {
        append_records(p, rows).with_context(|| format!("writing metrics to {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Train {
            cfg,
            out,
            incremental,
            keep_gram,
        } => {
            let config = cfg.load()?;
            let (train_set, test_set) = load_splits(&config, &data_dir(cfg.data_dir.as_deref())).context("loading data")?;
            let mut spec = ReadoutSpec::from_config(&config);
            spec.keep_state = incremental || keep_gram;
            spec.keep_gram = keep_gram;
            let t = train(&config, None, train_set, test_set, &spec).context("training")?;
            if let Some(p) = &out {
                save_model(p, &t.session.model, t.session.state.as_ref()).context("saving model")?;
            }
            write_metrics(cfg.metrics.as_deref(), &[train_record("train", &t.session.model, &t.report, "base")])
        }
        Command::Eval {
            model,
            data_dir: dir,
            metrics,
        } => {
            let (m, _) = load_model(&model)?;
            let (_, test_set) = load_splits(&m.config, &data_dir(dir.as_deref())).context("loading data")?;
            let start = Instant::now();
            let acc = evaluate(&m, &test_set).context("evaluating")?;
            let rec = MetricsRecord {
                test_acc: acc,
                t_forward: start.elapsed().as_secs_f64(),
                t_total: start.elapsed().as_secs_f64(),
                ..model_record("eval", &m, "base")
            };
            write_metrics(metrics.as_deref(), &[rec])
        }
        Command::Increment {
            model,
            kind,
            amount,
            steps,
            paired_ce,
            data_dir: dir,
            out,
            metrics,
        } => {
            let (m, state) = load_model(&model)?;
            if state.is_none() {
                bail!(
                    "{} has no incremental solver state; retrain with `train --incremental`",
                    model.display()
                );
            }
            let (train_set, test_set) = load_splits(&m.config, &data_dir(dir.as_deref())).context("loading data")?;
            let mut session = Session::new(m, state, train_set, test_set).context("preparing caches")?;
            let (train_acc, test_acc) = session.evaluate()?;
            let mut rows = vec![MetricsRecord {
                train_acc: Some(train_acc),
                test_acc,
                ..model_record("increment", &session.model, "initial")
            }];
            let kind = match kind {
                Kind::Feat => IncrementKind::Feature,
                Kind::Enh => IncrementKind::Enhancement,
            };
            let reports = run_increments(&mut session, kind, amount, steps, paired_ce).context("increment")?;
            let mut cumulative = 0.0;
            for (i, r) in reports.iter().enumerate() {
                cumulative += r.seconds;
                rows.push(increment_record(&session.model, r, i + 1, cumulative));
            }
            if steps > 0 {
                let target = out.as_ref().unwrap_or(&model);
                save_model(target, &session.model, session.state.as_ref()).context("saving model")?;
            }
            write_metrics(metrics.as_deref(), &rows)
        }
        Command::Semi {
            cfg,
            labeled,
            unlabeled,
            repeats,
        } => {
            let config = cfg.load()?;
            let (train_set, test_set) = load_splits(&config, &data_dir(cfg.data_dir.as_deref())).context("loading data")?;
            let rows = semi(&config, &train_set, &test_set, labeled, unlabeled, repeats).context("semi-supervised run")?;
            write_metrics(cfg.metrics.as_deref(), &rows)
        }
        Command::Ablate { cfg, variant } => {
            let config = cfg.load()?;
            let (train_set, test_set) = load_splits(&config, &data_dir(cfg.data_dir.as_deref())).context("loading data")?;
            let mut spec = ReadoutSpec::from_config(&config);
            spec.keep_design = matches!(variant, Variant::SppLevels);
            let base = train(&config, None, train_set, test_set, &spec).context("training the base model")?;
            let rows = match variant {
                Variant::RandomFilters => ablate_random_filters(&base),
                Variant::SppLevels => ablate_spp_levels(&base),
                Variant::Progressive => ablate_progressive(&base),
            }
            .context("ablation")?;
            write_metrics(cfg.metrics.as_deref(), &rows)
        }
        Command::ExportFilters { model, layer, out } => {
            let (m, _) = load_model(&model)?;
            let pgm = filters_pgm(&m, layer)?;
            std::fs::write(&out, pgm).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Sweep { cfg, key, values } => {
            if values.is_empty() {
                bail!("--values needs at least one value");
            }
            let config = cfg.load()?;
            let (train_set, test_set) = load_splits(&config, &data_dir(cfg.data_dir.as_deref())).context("loading data")?;
            let rows = sweep(&config, &key, &values, &train_set, &test_set)?;
            write_metrics(cfg.metrics.as_deref(), &rows)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
