//! Flat binary artifacts and CSV exports.
//!
//! Every binary file starts with a 4-byte magic, a `u32` version and the
//! 32-byte config digest of the run that wrote it, followed by
//! little-endian `u64` dimensions and row-major `f64` payloads. CSV files
//! carry the digest on a leading `# config_digest=<hex>` line.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::kernel::PathFeatureMatrix;
use crate::model::{AttentionHeads, AttentionLogitSpec, NetworkDims, NetworkWeights, TokenSequence};
use crate::paths::PathIndex;
use crate::solver::OrderParameterSet;

pub const VERSION: u32 = 1;
pub type Digest = [u8; 32];

pub const MAGIC_DATASET: &[u8; 4] = b"APKD";
pub const MAGIC_ATTENTION: &[u8; 4] = b"APKW";
pub const MAGIC_FEATURES: &[u8; 4] = b"APKF";
pub const MAGIC_KERNEL: &[u8; 4] = b"APKK";
pub const MAGIC_ORDER: &[u8; 4] = b"APKU";
pub const MAGIC_PATH_MATRIX: &[u8; 4] = b"APKM";
pub const MAGIC_SAMPLES: &[u8; 4] = b"APKS";

const ALL_MAGICS: [&[u8; 4]; 7] = [
    MAGIC_DATASET,
    MAGIC_ATTENTION,
    MAGIC_FEATURES,
    MAGIC_KERNEL,
    MAGIC_ORDER,
    MAGIC_PATH_MATRIX,
    MAGIC_SAMPLES,
];

struct Out(Vec<u8>);

impl Out {
    fn new(magic: &[u8; 4], digest: &Digest) -> Self {
        let mut b = Vec::new();
        b.extend_from_slice(magic);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(digest);
        Self(b)
    }

    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn raw_u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    /// Row-major.
    fn matrix(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }

    fn dims_matrix(&mut self, m: &DMatrix<f64>) {
        self.u64(m.nrows());
        self.u64(m.ncols());
        self.matrix(m);
    }

    fn save(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, &self.0).map_err(|e| Error::io(path, e))
    }
}

/// Cursor over a file's bytes that reports offsets in parse errors.
struct In<'a> {
    data: &'a [u8],
    pos: usize,
}

/// Refuse dimension products that cannot fit in the remaining bytes.
const MAX_ELEMENTS: usize = 1 << 34;

impl<'a> In<'a> {
    fn open(data: &'a [u8], magic: &[u8; 4]) -> Result<(Self, Digest)> {
        let mut r = Self { data, pos: 0 };
        let m = r.take(4)?;
        if m != magic {
            return Err(Error::parse(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let at = r.pos;
        let v = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if v != VERSION {
            return Err(Error::parse(at as u64, format!("unsupported version {v}")));
        }
        let digest: Digest = r.take(32)?.try_into().expect("32 bytes");
        Ok((r, digest))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.pos as u64, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err(format!(
                "unexpected end of file: need {n} bytes, {} left",
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn raw_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.raw_u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= MAX_ELEMENTS)
            .ok_or_else(|| Error::parse(at as u64, format!("dimension {v} is too large")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let count = rows
            .checked_mul(cols)
            .filter(|&c| c.saturating_mul(8) <= self.data.len() - self.pos)
            .ok_or_else(|| self.err(format!("{rows}x{cols} matrix exceeds the remaining bytes")))?;
        let bytes = self.take(count * 8)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }

    fn dims_matrix(&mut self) -> Result<DMatrix<f64>> {
        let r = self.u64()?;
        let c = self.u64()?;
        self.matrix(r, c)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn wrap<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_dataset(path: &Path, data: &SequenceDataset, digest: &Digest) -> Result<()> {
    let mut o = Out::new(MAGIC_DATASET, digest);
    o.u64(data.token_width());
    o.u64(data.token_count());
    o.u64(data.len());
    o.raw_u64(data.seed);
    for x in &data.examples {
        if x.width() != data.token_width() || x.token_count() != data.token_count() {
            return Err(Error::Shape("dataset sequences differ in shape".into()));
        }
        // Tokens row-major: one token after another.
        o.matrix(&x.values().transpose());
    }
    for &y in &data.labels {
        o.0.push(y.round() as i8 as u8);
    }
    o.save(path)
}

pub fn read_dataset(path: &Path) -> Result<(SequenceDataset, Digest)> {
    let bytes = read_file(path)?;
    wrap(path, (|| {
        let (mut r, digest) = In::open(&bytes, MAGIC_DATASET)?;
        let width = r.u64()?;
        let tokens = r.u64()?;
        let count = r.u64()?;
        let seed = r.raw_u64()?;
        let mut examples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let at = r.pos;
            let m = r.matrix(tokens, width)?;
            examples.push(
                TokenSequence::new(m.transpose())
                    .map_err(|e| Error::parse(at as u64, e.to_string()))?,
            );
        }
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let y = r.u8()? as i8;
            if y != 1 && y != -1 {
                return Err(Error::parse(at as u64, format!("label {y} is not +1 or -1")));
            }
            labels.push(y as f64);
        }
        r.finish()?;
        Ok((
            SequenceDataset {
                examples,
                labels,
                seed,
            },
            digest,
        ))
    })())
}

const FORM_DIRECT: u8 = 0;
const FORM_QUERY_KEY: u8 = 1;

pub fn write_attention_spec(path: &Path, heads: &AttentionHeads, digest: &Digest) -> Result<()> {
    let mut o = Out::new(MAGIC_ATTENTION, digest);
    o.u64(heads.head_count());
    o.u64(heads.depth());
    for spec in heads.layers().iter().flatten() {
        match spec {
            AttentionLogitSpec::Direct { w, beta } => {
                o.0.push(FORM_DIRECT);
                o.f64(*beta);
                o.dims_matrix(w);
            }
            AttentionLogitSpec::QueryKey { query, key } => {
                o.0.push(FORM_QUERY_KEY);
                o.dims_matrix(query);
                o.dims_matrix(key);
            }
        }
    }
    o.save(path)
}

pub fn read_attention_spec(path: &Path) -> Result<AttentionHeads> {
    let bytes = read_file(path)?;
    wrap(path, (|| {
        let (mut r, _) = In::open(&bytes, MAGIC_ATTENTION)?;
        let h = r.u64()?;
        let l = r.u64()?;
        if h == 0 || l == 0 {
            return Err(r.err("head count and depth must be >= 1"));
        }
        let mut layers = Vec::with_capacity(l);
        for layer in 0..l {
            let mut row = Vec::with_capacity(h);
            for head in 0..h {
                let at = r.pos;
                let tag = r.u8().map_err(|_| {
                    Error::parse(
                        at as u64,
                        format!("header declares {h}x{l} heads but block ({}, {}) is missing", layer + 1, head + 1),
                    )
                })?;
                let spec = match tag {
                    FORM_DIRECT => {
                        let beta = r.f64()?;
                        let w = r.dims_matrix()?;
                        AttentionLogitSpec::direct(w, beta)
                    }
                    FORM_QUERY_KEY => {
                        let q = r.dims_matrix()?;
                        let k = r.dims_matrix()?;
                        AttentionLogitSpec::query_key(q, k)
                    }
                    t => return Err(Error::parse(at as u64, format!("unknown form tag {t}"))),
                }
                .map_err(|e| Error::parse(at as u64, e.to_string()))?;
                row.push(spec);
            }
            layers.push(row);
        }
        r.finish()?;
        AttentionHeads::new(layers).map_err(|e| Error::parse(r.pos as u64, e.to_string()))
    })())
}

pub fn write_features(path: &Path, f: &PathFeatureMatrix, digest: &Digest) -> Result<()> {
    let mut o = Out::new(MAGIC_FEATURES, digest);
    o.u64(f.head_count());
    o.u64(f.depth());
    o.u64(f.input_width());
    o.u64(f.example_count());
    o.u64(f.paths().len());
    o.f64(f.normalization());
    for p in f.paths() {
        for &h in p.heads() {
            o.u64(h);
        }
    }
    o.matrix(f.stack());
    o.save(path)
}

pub fn read_features(path: &Path) -> Result<(PathFeatureMatrix, Digest)> {
    let bytes = read_file(path)?;
    wrap(path, (|| {
        let (mut r, digest) = In::open(&bytes, MAGIC_FEATURES)?;
        let h = r.u64()?;
        let l = r.u64()?;
        let width = r.u64()?;
        let p = r.u64()?;
        let n = r.u64()?;
        let norm = r.f64()?;
        let mut paths = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let at = r.pos;
            let heads = (0..l).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            paths.push(PathIndex::new(heads, h).map_err(|e| Error::parse(at as u64, e.to_string()))?);
        }
        let at = r.pos;
        let cols = n
            .checked_mul(width)
            .ok_or_else(|| Error::parse(at as u64, "feature width overflows"))?;
        let stack = r.matrix(p, cols)?;
        r.finish()?;
        let mut f = PathFeatureMatrix::from_stack(h, l, width, paths, stack)
            .map_err(|e| Error::parse(at as u64, e.to_string()))?;
        f.set_normalization(norm);
        Ok((f, digest))
    })())
}

/// Kernel values plus the `U^(1)` that produced them.
pub fn write_kernel(path: &Path, k: &crate::kernel::KernelMatrix, digest: &Digest) -> Result<()> {
    let mut o = Out::new(MAGIC_KERNEL, digest);
    o.dims_matrix(&k.order_parameter);
    o.dims_matrix(&k.values);
    o.save(path)
}

pub fn read_kernel(path: &Path) -> Result<(crate::kernel::KernelMatrix, Digest)> {
    let bytes = read_file(path)?;
    wrap(path, (|| {
        let (mut r, digest) = In::open(&bytes, MAGIC_KERNEL)?;
        let order_parameter = r.dims_matrix()?;
        let values = r.dims_matrix()?;
        r.finish()?;
        Ok((
            crate::kernel::KernelMatrix {
                values,
                order_parameter,
            },
            digest,
        ))
    })())
}

pub fn write_order_parameters(path: &Path, u: &OrderParameterSet, digest: &Digest) -> Result<()> {
    let mut o = Out::new(MAGIC_ORDER, digest);
    o.u64(u.head_count());
    o.u64(u.depth());
    for m in u.layers() {
        o.dims_matrix(m);
    }
    o.save(path)
}

pub fn read_order_parameters(path: &Path) -> Result<(OrderParameterSet, Digest)> {
    let bytes = read_file(path)?;
    wrap(path, (|| {
        let (mut r, digest) = In::open(&bytes, MAGIC_ORDER)?;
        let h = r.u64()?;
        let l = r.u64()?;
        let layers = (0..=l).map(|_| r.dims_matrix()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let u = OrderParameterSet::new(h, layers).map_err(|e| Error::parse(r.pos as u64, e.to_string()))?;
        Ok((u, digest))
    })())
}

/// A matrix over paths, e.g. a sampled order parameter.
pub fn write_path_matrix(
    path: &Path,
    m: &DMatrix<f64>,
    head_count: usize,
    depth: usize,
    digest: &Digest,
) -> Result<()> {
    let mut o = Out::new(MAGIC_PATH_MATRIX, digest);
    o.u64(head_count);
    o.u64(depth);
    o.dims_matrix(m);
    o.save(path)
}

pub fn read_path_matrix(path: &Path) -> Result<(DMatrix<f64>, usize, usize, Digest)> {
    let bytes = read_file(path)?;
    wrap(path, (|| {
        let (mut r, digest) = In::open(&bytes, MAGIC_PATH_MATRIX)?;
        let h = r.u64()?;
        let l = r.u64()?;
        let at = r.pos;
        let m = r.dims_matrix()?;
        let n = crate::paths::path_count(h, l).map_err(|e| Error::parse(at as u64, e.to_string()))?;
        if m.shape() != (n, n) {
            return Err(Error::parse(at as u64, format!("matrix must be {n}x{n} for H={h}, L={l}")));
        }
        r.finish()?;
        Ok((m, h, l, digest))
    })())
}

/// Weight draws with their chain index.
pub fn write_samples(
    path: &Path,
    samples: &crate::sampler::PosteriorSamples,
    digest: &Digest,
) -> Result<()> {
    let mut o = Out::new(MAGIC_SAMPLES, digest);
    let d = samples.dims;
    o.u64(d.width);
    o.u64(d.input_width);
    o.u64(d.heads);
    o.u64(d.depth);
    o.u64(samples.acceptance.len());
    for (&a, &dv) in samples.acceptance.iter().zip(&samples.divergences) {
        o.f64(a);
        o.u64(dv);
    }
    o.u64(samples.draws.len());
    for (w, &c) in samples.draws.iter().zip(&samples.chain_of) {
        o.u64(c);
        for v in w.to_flat() {
            o.f64(v);
        }
    }
    o.save(path)
}

pub fn read_samples(path: &Path) -> Result<(crate::sampler::PosteriorSamples, Digest)> {
    let bytes = read_file(path)?;
    wrap(path, (|| {
        let (mut r, digest) = In::open(&bytes, MAGIC_SAMPLES)?;
        let dims = NetworkDims {
            width: r.u64()?,
            input_width: r.u64()?,
            heads: r.u64()?,
            depth: r.u64()?,
        };
        let chains = r.u64()?;
        let mut acceptance = Vec::new();
        let mut divergences = Vec::new();
        for _ in 0..chains {
            acceptance.push(r.f64()?);
            divergences.push(r.u64()?);
        }
        let count = r.u64()?;
        let np = dims.parameter_count();
        let mut draws = Vec::new();
        let mut chain_of = Vec::new();
        for _ in 0..count {
            chain_of.push(r.u64()?);
            let flat = r.matrix(1, np)?;
            draws.push(NetworkWeights::from_flat(dims, flat.as_slice()).expect("length checked"));
        }
        r.finish()?;
        Ok((
            crate::sampler::PosteriorSamples {
                dims,
                draws,
                chain_of,
                acceptance,
                divergences,
                potential: vec![Vec::new(); chains],
            },
            digest,
        ))
    })())
}

/// Digest embedded in any artifact this crate writes.
pub fn read_digest(path: &Path) -> Result<Digest> {
    let bytes = read_file(path)?;
    if bytes.len() >= 40 && ALL_MAGICS.iter().any(|m| &bytes[..4] == *m) {
        return Ok(bytes[8..40].try_into().expect("32 bytes"));
    }
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let line = String::from_utf8_lossy(first);
    let hexed = line
        .trim()
        .strip_prefix("# config_digest=")
        .ok_or_else(|| Error::parse(0, format!("{}: no config digest", path.display())))?;
    let raw = hex::decode(hexed).map_err(|e| Error::parse(16, format!("{}: {e}", path.display())))?;
    raw.try_into()
        .map_err(|_| Error::parse(16, format!("{}: digest must be 32 bytes", path.display())))
}

/// CSV with a digest comment line followed by a header row.
pub fn write_csv<I, R>(path: &Path, digest: &Digest, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "# config_digest={}", hex::encode(digest)).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A matrix over paths as CSV with one-based path labels.
pub fn write_path_matrix_csv(
    path: &Path,
    m: &DMatrix<f64>,
    paths: &[PathIndex],
    digest: &Digest,
) -> Result<()> {
    let labels: Vec<String> = paths.iter().map(|p| p.label()).collect();
    let mut header = vec!["path".to_string()];
    header.extend(labels.iter().cloned());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..m.nrows()).map(|i| {
        let mut row = vec![labels[i].clone()];
        row.extend((0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])));
        row
    });
    write_csv(path, digest, &header_refs, rows)
}

/// Tokens of every example as long-format CSV: example, token, label, values.
pub fn write_dataset_csv(path: &Path, data: &SequenceDataset, digest: &Digest) -> Result<()> {
    let width = data.token_width();
    let mut header: Vec<String> = vec!["example".into(), "token".into(), "label".into()];
    header.extend((1..=width).map(|i| format!("x{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = data.examples.iter().zip(&data.labels).enumerate().flat_map(|(e, (x, y))| {
        (0..x.token_count()).map(move |t| {
            let mut row = vec![(e + 1).to_string(), t.to_string(), format!("{y}")];
            row.extend(x.values().column(t).iter().map(|v| format!("{v:e}")));
            row
        })
    });
    write_csv(path, digest, &header_refs, rows)
}
