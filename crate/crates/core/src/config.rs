//! Model and run configuration.
//!
//! The text form is a flat list of `key = value` lines. `#` starts a comment,
//! blank lines are ignored and list values are comma separated. Unknown keys
//! are rejected. [`ModelConfig::canonical`] prints every key in a fixed order,
//! so equal configurations always hash equally.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Activation, PoolKind};

/// How CF filters are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterInit {
    Skm,
    /// Unit-norm Gaussian rows, no clustering (ablation).
    Random,
}

impl FilterInit {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterInit::Skm => "skm",
            FilterInit::Random => "random",
        }
    }
}

impl FromStr for FilterInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skm" => Ok(FilterInit::Skm),
            "random" => Ok(FilterInit::Random),
            other => Err(Error::config(format!("unknown filter init `{other}`"))),
        }
    }
}

/// Ridge parameter: fixed, or picked from a grid on a held-out split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda {
    Fixed(f64),
    Search,
}

pub const DEFAULT_LAMBDA_GRID: [f64; 11] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4, 1e5];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Dataset name: `mnist`, `fashion` or `norb`.
    pub dataset: String,
    /// Use only the first `train_limit` training samples (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
    /// Number of CF layers.
    pub n: usize,
    /// Number of CE layers (0 leaves only feature nodes).
    pub m: usize,
    pub c1: usize,
    /// Width of CE_1; `None` means C_f.
    pub c2: Option<usize>,
    pub expansion: f64,
    pub cf_kernel: usize,
    pub ce_kernel: usize,
    pub cf_stride: usize,
    /// Group size for CF layers after the first; `None` means in/4 (min 4).
    pub group_size: Option<usize>,
    pub spp_bins: Vec<usize>,
    pub spp_pool: PoolKind,
    pub cf_activation: Activation,
    pub ce_activation: Activation,
    pub lambda: Lambda,
    pub lambda_grid: Vec<f64>,
    /// Fraction of training rows held out for the λ search.
    pub val_fraction: f64,
    /// Patches drawn per feature group.
    pub patches: usize,
    pub skm_iters: usize,
    pub zca_eps: f64,
    pub norm_eps: f64,
    pub filters: FilterInit,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dataset: "mnist".into(),
            train_limit: 0,
            test_limit: 0,
            n: 3,
            m: 1,
            c1: 32,
            c2: None,
            expansion: 2.0,
            cf_kernel: 6,
            ce_kernel: 3,
            cf_stride: 1,
            group_size: None,
            spp_bins: vec![3, 2, 1],
            spp_pool: PoolKind::Max,
            cf_activation: Activation::Relu,
            ce_activation: Activation::Relu,
            lambda: Lambda::Search,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            val_fraction: 0.1,
            patches: 400_000,
            skm_iters: crate::skm::DEFAULT_ITERATIONS,
            zca_eps: crate::patch::DEFAULT_ZCA_EPS,
            norm_eps: crate::patch::DEFAULT_NORM_EPS,
            filters: FilterInit::Skm,
            seed: 1,
        }
    }
}

/// `round(e^(i-1)·base)` for `i = 1..=count`.
pub fn channel_schedule(base: usize, expansion: f64, count: usize) -> Vec<usize> {
    (0..count)
        .map(|i| (expansion.powi(i as i32) * base as f64).round() as usize)
        .collect()
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_num(key, v.trim()))
        .collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// CF output widths.
    pub fn cf_channels(&self) -> Vec<usize> {
        channel_schedule(self.c1, self.expansion, self.n)
    }

    /// C_f: total feature maps.
    pub fn feature_maps(&self) -> usize {
        self.cf_channels().iter().sum()
    }

    pub fn c2_effective(&self) -> usize {
        self.c2.unwrap_or_else(|| self.feature_maps())
    }

    pub fn ce_channels(&self) -> Vec<usize> {
        channel_schedule(self.c2_effective(), self.expansion, self.m)
    }

    /// Σ b_l² over the pyramid.
    pub fn b_tot(&self) -> usize {
        self.spp_bins.iter().map(|b| b * b).sum()
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = value.to_string(),
            "train_limit" => self.train_limit = parse_num(key, value)?,
            "test_limit" => self.test_limit = parse_num(key, value)?,
            "n" => self.n = parse_num(key, value)?,
            "m" => self.m = parse_num(key, value)?,
            "c1" => self.c1 = parse_num(key, value)?,
            "c2" => {
                self.c2 = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "expansion" => self.expansion = parse_num(key, value)?,
            "cf_kernel" => self.cf_kernel = parse_num(key, value)?,
            "ce_kernel" => self.ce_kernel = parse_num(key, value)?,
            "cf_stride" => self.cf_stride = parse_num(key, value)?,
            "group_size" => {
                self.group_size = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "spp_bins" => self.spp_bins = parse_list(key, value)?,
            "spp_pool" => self.spp_pool = value.parse()?,
            "cf_activation" => self.cf_activation = value.parse()?,
            "ce_activation" => self.ce_activation = value.parse()?,
            "lambda" => {
                self.lambda = if value == "search" {
                    Lambda::Search
                } else {
                    Lambda::Fixed(parse_num(key, value)?)
                }
            }
            "lambda_grid" => self.lambda_grid = parse_list(key, value)?,
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            "patches" => self.patches = parse_num(key, value)?,
            "skm_iters" => self.skm_iters = parse_num(key, value)?,
            "zca_eps" => self.zca_eps = parse_num(key, value)?,
            "norm_eps" => self.norm_eps = parse_num(key, value)?,
            "filters" => self.filters = value.parse()?,
            "seed" => self.seed = parse_num(key, value)?,
            other => return Err(Error::config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("c1", self.c1),
            ("cf_kernel", self.cf_kernel),
            ("ce_kernel", self.ce_kernel),
            ("cf_stride", self.cf_stride),
            ("patches", self.patches),
            ("skm_iters", self.skm_iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{name}` must be >= 1")));
            }
        }
        if !matches!(self.dataset.as_str(), "mnist" | "fashion" | "norb") {
            return Err(Error::config(format!("unknown dataset `{}`", self.dataset)));
        }
        if !(self.expansion.is_finite() && self.expansion > 0.0) {
            return Err(Error::config("`expansion` must be a positive number"));
        }
        if self.c2 == Some(0) || self.group_size == Some(0) {
            return Err(Error::config("`c2` and `group_size` must be >= 1"));
        }
        if self.cf_channels().contains(&0) || self.ce_channels().contains(&0) {
            return Err(Error::config("channel schedule rounds a layer width to zero"));
        }
        if self.spp_bins.is_empty() || self.spp_bins.contains(&0) {
            return Err(Error::config("`spp_bins` must be a non-empty list of positive sizes"));
        }
        if let Lambda::Fixed(l) = self.lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::config("`lambda` must be positive"));
            }
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::config("`lambda_grid` must be a non-empty list of positive values"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("`val_fraction` must be in (0, 1)"));
        }
        if !(self.zca_eps >= 0.0 && self.zca_eps.is_finite()) || !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::config("`zca_eps` must be >= 0 and `norm_eps` > 0"));
        }
        Ok(())
    }

    /// Every key in fixed order, one `key = value` per line.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let lambda = match self.lambda {
            Lambda::Fixed(l) => l.to_string(),
            Lambda::Search => "search".to_string(),
        };
        let lines: [(&str, String); 25] = [
            ("dataset", self.dataset.clone()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("n", self.n.to_string()),
            ("m", self.m.to_string()),
            ("c1", self.c1.to_string()),
            ("c2", opt(self.c2)),
            ("expansion", self.expansion.to_string()),
            ("cf_kernel", self.cf_kernel.to_string()),
            ("ce_kernel", self.ce_kernel.to_string()),
            ("cf_stride", self.cf_stride.to_string()),
            ("group_size", opt(self.group_size)),
            ("spp_bins", join(&self.spp_bins)),
            ("spp_pool", self.spp_pool.to_string()),
            ("cf_activation", self.cf_activation.to_string()),
            ("ce_activation", self.ce_activation.to_string()),
            ("lambda", lambda),
            ("lambda_grid", join(&self.lambda_grid)),
            ("val_fraction", self.val_fraction.to_string()),
            ("patches", self.patches.to_string()),
            ("skm_iters", self.skm_iters.to_string()),
            ("zca_eps", self.zca_eps.to_string()),
            ("norm_eps", self.norm_eps.to_string()),
            ("filters", self.filters.as_str().to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
