//! CSV metrics rows.
//!
//! One fixed header; numbers use Rust's locale-free formatting. Appends
//! rewrite the file through a temporary and a rename, so a reader never sees
//! a partial row.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER: &str = "run_id,command,config_hash,dataset,seed,variant,step,cf1,ce1,feature_maps,enhancement_maps,\
columns,lambda,branch,train_acc,test_acc,t_patching,t_skm,t_forward,t_solve,t_step,t_total";

/// Index of the first timing column in [`HEADER`].
pub const FIRST_TIMING_COLUMN: usize = 16;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub dataset: String,
    pub seed: u64,
    pub variant: String,
    pub step: usize,
    pub cf1: usize,
    pub ce1: usize,
    pub feature_maps: usize,
    pub enhancement_maps: usize,
    pub columns: usize,
    pub lambda: f64,
    pub branch: String,
    pub train_acc: Option<f64>,
    pub test_acc: f64,
    pub t_patching: f64,
    pub t_skm: f64,
    pub t_forward: f64,
    pub t_solve: f64,
    /// Additional time of one increment step.
    pub t_step: f64,
    pub t_total: f64,
}

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let accs = [self.train_acc.unwrap_or(0.0), self.test_acc];
        if accs.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::input(format!("accuracy outside [0, 1] in run {}", self.run_id)));
        }
        let times = [self.t_patching, self.t_skm, self.t_forward, self.t_solve, self.t_step, self.t_total];
        if times.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::input(format!("negative or missing timing in run {}", self.run_id)));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            field(&self.run_id),
            field(&self.command),
            self.config_hash,
            field(&self.dataset),
            self.seed,
            field(&self.variant),
            self.step,
            self.cf1,
            self.ce1,
            self.feature_maps,
            self.enhancement_maps,
            self.columns,
            self.lambda,
            field(&self.branch),
            opt(self.train_acc),
            self.test_acc,
            self.t_patching,
            self.t_skm,
            self.t_forward,
            self.t_solve,
            self.t_step,
            self.t_total
        );
        s
    }
}

/// The row without its timing columns (for reproducibility checks).
pub fn strip_timings(row: &str) -> String {
    row.split(',').take(FIRST_TIMING_COLUMN).collect::<Vec<_>>().join(",")
}

/// Appends records to `path`, writing the header if the file is new.
pub fn append_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let mut text = match std::fs::read_to_string(path) {
        Ok(t) => {
            let first = t.lines().next().unwrap_or("");
            if !t.is_empty() && first != HEADER {
                return Err(Error::format(path, 0, "existing metrics file has a different header"));
            }
            t
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    if text.is_empty() {
        text.push_str(HEADER);
        text.push('\n');
    } else if !text.ends_with('\n') {
        text.push('\n');
    }
    for r in records {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
