//! Binary model archive.
//!
//! Little-endian throughout. Layout:
//!
//! ```text
//! magic "CVBLSM01" | version u32
//! config      u64 length + canonical config text (UTF-8)
//! header      u64: input channels, height, width, classes, block count; f64 lambda
//! per block   u64 kind (0 feature, 1 enhancement)
//!   feature       u64 CF layer count, then per layer:
//!                   u64 kernel, stride, in_channels, activation, group count; f64 norm_eps
//!                   per group: u64 start, end, k, dim; [filters k·dim] [mean dim] [whitening dim·dim]; f64 epsilon
//!   enhancement   u64 sources
//!   both          u64 CE layer count, then per layer:
//!                   u64 kernel, in_channels, out_channels, activation; [weights] [biases]
//! weights     u64 rows, cols; [rows·cols] row-major
//! state       u64 flag; if 1: f64 lambda; u64 rows, cols, classes; [L cols·cols] [AᵀY] [W];
//!             u64 gram flag; if 1: [AᵀA cols·cols]
//! trailer     u32 CRC32 of every preceding byte
//! ```
//!
//! `[..]` is a u64 element count followed by that many f64 values. Activation
//! codes are 0 relu, 1 tanh, 2 sigmoid. `L` is the lower Cholesky factor of
//! `AᵀA + λI`.

use std::path::Path;

use faer::Mat;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::incremental::SolverState;
use crate::layers::{CeLayer, CfLayer, FilterGroup};
use crate::model::{Block, Model};
use crate::patch::WhiteningTransform;
use crate::skm::FilterBank;
use crate::tensor::Activation;

pub const MAGIC: &[u8; 8] = b"CVBLSM01";
pub const VERSION: u32 = 1;

/// Refuses absurd element counts before allocating.
const MAX_ELEMENTS: u64 = 1 << 33;

fn activation_code(a: Activation) -> u64 {
    match a {
        Activation::Relu => 0,
        Activation::Tanh => 1,
        Activation::Sigmoid => 2,
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn array(&mut self, values: &[f64]) {
        self.u64(values.len());
        self.buf.reserve(values.len() * 8);
        for &v in values {
            self.f64(v);
        }
    }

    fn mat(&mut self, m: faer::MatRef<'_, f64>) {
        self.u64(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
}

/// Serialises a model and optional solver state.
pub fn to_bytes(model: &Model, state: Option<&SolverState>) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let text = model.config.canonical();
    w.u64(text.len());
    w.buf.extend_from_slice(text.as_bytes());
    for v in model.input {
        w.u64(v);
    }
    w.u64(model.classes);
    w.u64(model.blocks.len());
    w.f64(model.lambda);
    for block in &model.blocks {
        let ce = match block {
            Block::Feature { cf, ce } => {
                w.u64(0);
                w.u64(cf.len());
                for layer in cf {
                    w.u64(layer.kernel);
                    w.u64(layer.stride);
                    w.u64(layer.in_channels);
                    w.u64(activation_code(layer.activation) as usize);
                    w.u64(layer.groups.len());
                    w.f64(layer.norm_eps);
                    for g in &layer.groups {
                        let r = g.channels();
                        let bank = g.bank();
                        let wh = g.whitening();
                        w.u64(r.start);
                        w.u64(r.end);
                        w.u64(bank.k());
                        w.u64(bank.dim());
                        w.array(bank.weights());
                        w.array(wh.mean());
                        w.array(wh.matrix_data());
                        w.f64(wh.epsilon());
                    }
                }
                ce
            }
            Block::Enhancement { sources, ce } => {
                w.u64(1);
                w.u64(*sources);
                ce
            }
        };
        w.u64(ce.len());
        for layer in ce {
            w.u64(layer.kernel);
            w.u64(layer.in_channels);
            w.u64(layer.out_channels);
            w.u64(activation_code(layer.activation) as usize);
            w.array(&layer.weights);
            w.array(&layer.biases);
        }
    }
    w.u64(model.weights.nrows());
    w.u64(model.weights.ncols());
    w.mat(model.weights.as_ref());
    match state {
        None => w.u64(0),
        Some(st) => {
            w.u64(1);
            w.f64(st.lambda());
            w.u64(st.rows());
            w.u64(st.cols());
            w.u64(st.weights().ncols());
            w.mat(st.factor());
            w.mat(st.aty());
            w.mat(st.weights());
            match st.gram() {
                None => w.u64(0),
                Some(g) => {
                    w.u64(1);
                    w.mat(g);
                }
            }
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::format(self.path, self.pos as u64, msg))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("unexpected end of archive (needed {n} bytes)"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        if v > MAX_ELEMENTS {
            self.pos -= 8;
            return self.fail(format!("implausible value {v}"));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn array(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let n = self.u64()?;
        if n != expected {
            self.pos = at;
            return self.fail(format!("{what}: {n} values, expected {expected}"));
        }
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn mat(&mut self, rows: usize, cols: usize, what: &str) -> Result<Mat<f64>> {
        let data = self.array(rows * cols, what)?;
        Ok(Mat::from_fn(rows, cols, |i, j| data[i * cols + j]))
    }

    fn activation(&mut self) -> Result<Activation> {
        match self.u64()? {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Sigmoid),
            other => self.fail(format!("unknown activation code {other}")),
        }
    }

    fn wrap<T>(&self, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::Format { .. } => e,
            other => Error::format(self.path, self.pos as u64, other.to_string()),
        })
    }
}

/// Parses an archive; `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Model, Option<SolverState>)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, 0, "not a model archive (bad magic)"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::format(
            path,
            (bytes.len() - 4) as u64,
            format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
        ));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
        path,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            path,
            8,
            format!("archive version {version}, this build reads {VERSION}"),
        ));
    }
    let len = r.u64()?;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::format(path, 20, "config text is not UTF-8"))?
        .to_string();
    let config = r.wrap(ModelConfig::parse(&text))?;
    let input = [r.u64()?, r.u64()?, r.u64()?];
    let classes = r.u64()?;
    let nblocks = r.u64()?;
    let lambda = r.f64()?;
    let mut blocks = Vec::with_capacity(nblocks.min(1024));
    for _ in 0..nblocks {
        let kind = r.u64()?;
        let head = match kind {
            0 => {
                let ncf = r.u64()?;
                let mut cf = Vec::with_capacity(ncf.min(64));
                for li in 0..ncf {
                    let kernel = r.u64()?;
                    let stride = r.u64()?;
                    let in_channels = r.u64()?;
                    let activation = r.activation()?;
                    let ngroups = r.u64()?;
                    let norm_eps = r.f64()?;
                    let mut groups = Vec::with_capacity(ngroups.min(1024));
                    for _ in 0..ngroups {
                        let (start, end, k, dim) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
                        let weights = r.array(k * dim, "filters")?;
                        let mean = r.array(dim, "whitening mean")?;
                        let matrix = r.array(dim * dim, "whitening matrix")?;
                        let eps = r.f64()?;
                        let bank = r.wrap(FilterBank::from_unit_rows(k, dim, weights))?;
                        let wh = r.wrap(WhiteningTransform::from_parts(dim, mean, matrix, eps))?;
                        groups.push(r.wrap(FilterGroup::new(start, end, bank, wh))?);
                    }
                    cf.push(CfLayer {
                        index: li + 1,
                        kernel,
                        stride,
                        in_channels,
                        groups,
                        activation,
                        norm_eps,
                    });
                }
                Ok(cf)
            }
            1 => Err(r.u64()?),
            other => return r.fail(format!("unknown block kind {other}")),
        };
        let nce = r.u64()?;
        let mut ce = Vec::with_capacity(nce.min(64));
        for j in 0..nce {
            let kernel = r.u64()?;
            let in_channels = r.u64()?;
            let out_channels = r.u64()?;
            let activation = r.activation()?;
            let weights = r.array(out_channels * in_channels * kernel * kernel, "CE weights")?;
            let biases = r.array(out_channels, "CE biases")?;
            ce.push(CeLayer {
                index: j + 1,
                kernel,
                in_channels,
                out_channels,
                weights,
                biases,
                activation,
            });
        }
        blocks.push(match head {
            Ok(cf) => Block::Feature { cf, ce },
            Err(sources) => Block::Enhancement { sources, ce },
        });
    }
    let (wr, wc) = (r.u64()?, r.u64()?);
    let weights = r.mat(wr, wc, "output weights")?;
    let model = Model {
        config,
        input,
        classes,
        blocks,
        lambda,
        weights,
    };
    if wr != model.cols() || wc != classes {
        return r.fail(format!(
            "output weights are {wr}×{wc}, model needs {}×{classes}",
            model.cols()
        ));
    }
    let state = match r.u64()? {
        0 => None,
        1 => {
            let lambda = r.f64()?;
            let (rows, cols, k) = (r.u64()?, r.u64()?, r.u64()?);
            if cols != model.cols() || k != classes {
                return r.fail("solver state does not match the model");
            }
            let l = r.mat(cols, cols, "Cholesky factor")?;
            let aty = r.mat(cols, k, "AᵀY")?;
            let w = r.mat(cols, k, "solver weights")?;
            let gram = match r.u64()? {
                0 => None,
                1 => Some(r.mat(cols, cols, "AᵀA")?),
                other => return r.fail(format!("bad Gram flag {other}")),
            };
            Some(r.wrap(SolverState::from_parts(lambda, rows, l, aty, w, gram))?)
        }
        other => return r.fail(format!("bad state flag {other}")),
    };
    if r.pos != body.len() {
        return r.fail(format!("{} unread bytes before the trailer", body.len() - r.pos));
    }
    Ok((model, state))
}

/// Writes the archive through a temporary file and a rename.
pub fn save_model(path: &Path, model: &Model, state: Option<&SolverState>) -> Result<()> {
    let bytes = to_bytes(model, state);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(Model, Option<SolverState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Lambda;
    use crate::model::tests::{toy_config, toy_dataset};
    use crate::model::{increment_rng, train, ReadoutSpec};

    fn trained(keep_state: bool) -> crate::model::Session {
        let mut cfg = toy_config();
        cfg.lambda = Lambda::Fixed(1e-2);
        let mut spec = ReadoutSpec::from_config(&cfg);
        spec.keep_state = keep_state;
        spec.keep_gram = keep_state;
        train(&cfg, None, toy_dataset(200, 1), toy_dataset(60, 2), &spec)
            .unwrap()
            .session
    }

    #[test]
    fn round_trip_predicts_bitwise() {
        let mut s = trained(true);
        s.add_enhancement_nodes(2, &mut increment_rng(1, 1)).unwrap();
        let bytes = to_bytes(&s.model, s.state.as_ref());
        let (m, st) = from_bytes(&bytes, Path::new("mem")).unwrap();
        let x = &s.test.data.images;
        let (p0, s0) = s.model.predict(x).unwrap();
        let (p1, s1) = m.predict(x).unwrap();
        assert_eq!(p0, p1);
        assert_eq!(s0, s1);
        let st = st.unwrap();
        assert_eq!(st.factor(), s.state.as_ref().unwrap().factor());
        assert!(st.gram().is_some());
        assert_eq!(to_bytes(&m, Some(&st)), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let s = trained(false);
        let bytes = to_bytes(&s.model, None);
        let p = Path::new("model.bin");
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0xff;
        let err = from_bytes(&bad, p).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(from_bytes(&flipped, p), Err(Error::Format { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic, p), Err(Error::Format { offset: 0, .. })));
        assert!(from_bytes(&bytes[..bytes.len() / 2], p).is_err());
        let mut version = bytes[..bytes.len() - 4].to_vec();
        version[8] = 9;
        let crc = crc32fast::hash(&version);
        version.extend_from_slice(&crc.to_le_bytes());
        let err = from_bytes(&version, p).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn archive_without_state_refuses_increments() {
        let s = trained(false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&path, &s.model, None).unwrap();
        let (m, st) = load_model(&path).unwrap();
        assert!(st.is_none());
        let mut session = crate::model::Session::new(m, st, toy_dataset(200, 1), toy_dataset(60, 2)).unwrap();
        let err = session.add_feature_nodes(2, None, &mut increment_rng(1, 1)).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }
}
