//! Synthetic data, normalization, and on-disk formats.
//!
//! * FMAT1 matrix: `"FMAT1\0"`, u32 rows, u32 cols, row-major f64 values.
//! * FMPK1 checkpoint: `"FMPK1\0"`, u32 count, then per parameter a u32
//!   name length, the UTF-8 name, u32 ndim, ndim u32 dims, f64 values.
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factormer::{ModelConfig, ModelKind, ModelParams};
use crate::matrix::DenseMatrix;

pub const FMAT_MAGIC: &[u8; 6] = b"FMAT1\0";
pub const FMPK_MAGIC: &[u8; 6] = b"FMPK1\0";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const HISTOGRAM_BINS: usize = 100;

/// A group of matrices with sizes drawn uniformly from inclusive ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticBlock {
    pub count: usize,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl std::str::FromStr for SyntheticBlock {
    type Err = Error;

    /// `"count,rmin,rmax,cmin,cmax"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidConfig(format!("block {s:?}: {e}")))?;
        match parts[..] {
            [count, r0, r1, c0, c1] => Ok(Self {
                count,
                rows: (r0, r1),
                cols: (c0, c1),
            }),
            _ => Err(Error::InvalidConfig(format!(
                "block {s:?} must be count,rmin,rmax,cmin,cmax"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub blocks: Vec<SyntheticBlock>,
    pub rank: usize,
    /// Mean of the exponential factor entries; defaults to `1/√rank` so
    /// that `E[V] = rank · λ² = 1`.
    pub lambda: Option<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(blocks: Vec<SyntheticBlock>, rank: usize, seed: u64) -> Self {
        Self {
            blocks,
            rank,
            lambda: None,
            sigma: 0.01,
            seed,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(1.0 / (self.rank as f64).sqrt())
    }

    pub fn count(&self) -> usize {
        self.blocks.iter().map(|b| b.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if !(self.lambda() > 0.0) || !self.lambda().is_finite() {
            return bad(format!("lambda must be positive, got {}", self.lambda()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be nonnegative, got {}", self.sigma));
        }
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        for b in &self.blocks {
            if b.rows.0 == 0 || b.cols.0 == 0 || b.rows.0 > b.rows.1 || b.cols.0 > b.cols.1 {
                return bad(format!("invalid size ranges in block {b:?}"));
            }
        }
        Ok(())
    }

    /// The block that owns global matrix `index`.
    fn block_of(&self, index: usize) -> &SyntheticBlock {
        let mut rest = index;
        for b in &self.blocks {
            if rest < b.count {
                return b;
            }
            rest -= b.count;
        }
        panic!("matrix index {index} beyond spec count {}", self.count())
    }

    /// Matrix `index` of the dataset: `V = W Hᵀ + N` with exponential
    /// factors of mean `λ` and Gaussian noise, from seed `seed ^ index`.
    pub fn generate(&self, index: usize) -> Result<DenseMatrix> {
        self.validate()?;
        let block = self.block_of(index);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ index as u64);
        let m = rng.random_range(block.rows.0..=block.rows.1);
        let n = rng.random_range(block.cols.0..=block.cols.1);
        let exp = Exp::new(1.0 / self.lambda()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let noise = Normal::new(0.0, self.sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let r = self.rank;
        let w = DenseMatrix::from_fn(m, r, |_, _| exp.sample(&mut rng));
        let h = DenseMatrix::from_fn(n, r, |_, _| exp.sample(&mut rng));
        let clean = w.matmul(&h.transpose())?;
        if self.sigma == 0.0 {
            return Ok(clean);
        }
        let n_mat = DenseMatrix::from_fn(m, n, |_, _| noise.sample(&mut rng));
        clean.add(&n_mat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEcho {
    pub count: usize,
    pub rows: [usize; 2],
    pub cols: [usize; 2],
    pub lambda: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub rank: usize,
    pub seed: u64,
    pub blocks: Vec<BlockEcho>,
    pub files: Vec<String>,
}

pub fn matrix_file_name(index: usize) -> String {
    format!("m{index:06}.fmat")
}

/// Writes every matrix of `spec` plus `manifest.json` into `dir`.
pub fn gen_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let files: Vec<String> = (0..spec.count()).map(matrix_file_name).collect();
    files.par_iter().enumerate().try_for_each(|(k, name)| {
        let v = spec.generate(k)?;
        save_matrix(&dir.join(name), &v)
    })?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        rank: spec.rank,
        seed: spec.seed,
        blocks: spec
            .blocks
            .iter()
            .map(|b| BlockEcho {
                count: b.count,
                rows: [b.rows.0, b.rows.1],
                cols: [b.cols.0, b.cols.1],
                lambda: spec.lambda(),
                sigma: spec.sigma,
            })
            .collect(),
        files,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads `dir/manifest.json` and checks that every listed file exists.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    for f in &manifest.files {
        if !dir.join(f).is_file() {
            return Err(Error::Format(format!("manifest lists missing file {f}")));
        }
    }
    Ok(manifest)
}

/// Loads every matrix listed in the manifest, keyed by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, DenseMatrix)>> {
    let manifest = load_manifest(dir)?;
    if manifest.files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    manifest
        .files
        .par_iter()
        .map(|f| load_matrix(&dir.join(f)).map(|m| (f.clone(), m)))
        .collect()
}

pub fn normalize_mean_one(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mean = m.mean();
    if !(mean > 0.0) {
        return Err(Error::NonPositiveMean(mean));
    }
    Ok(m.map(|x| x / mean))
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

pub fn encode_matrix(m: &DenseMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(14 + 8 * m.len());
    out.extend_from_slice(FMAT_MAGIC);
    out.extend_from_slice(&u32_of(m.rows(), "rows")?.to_le_bytes());
    out.extend_from_slice(&u32_of(m.cols(), "cols")?.to_le_bytes());
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Little-endian reader over a byte slice that reports truncation.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated {} at byte {}", self.what, self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 6]) -> Result<()> {
        if self.take(6)? != magic {
            return Err(Error::Format(format!("bad magic in {}", self.what)));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{} size overflows", self.what)))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} has {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DenseMatrix> {
    let mut c = Cursor::new(bytes, "FMAT1 matrix");
    c.magic(FMAT_MAGIC)?;
    let rows = c.u32()?;
    let cols = c.u32()?;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("empty {rows}x{cols} matrix")));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("{rows}x{cols} overflows")))?;
    let data = c.f64s(n)?;
    c.finish()?;
    DenseMatrix::new(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    fs::write(path, encode_matrix(m)?)?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let bytes = fs::read(path)?;
    decode_matrix(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// One named array of a checkpoint.
pub type NamedArray = (String, Vec<usize>, Vec<f64>);

pub fn encode_checkpoint(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FMPK_MAGIC);
    out.extend_from_slice(&u32_of(arrays.len(), "parameter count")?.to_le_bytes());
    for (name, dims, data) in arrays {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: dims.clone(),
                found: vec![data.len()],
            });
        }
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(dims.len(), "ndim")?.to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for x in data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut c = Cursor::new(bytes, "FMPK1 checkpoint");
    c.magic(FMPK_MAGIC)?;
    let count = c.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?
            .to_owned();
        let ndim = c.u32()?;
        let dims = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("parameter {name} size overflows")))?;
        let data = c.f64s(n)?;
        out.push((name, dims, data));
    }
    c.finish()?;
    Ok(out)
}

pub fn params_to_arrays(params: &ModelParams) -> Vec<NamedArray> {
    params
        .iter()
        .map(|(spec, v)| (spec.name.clone(), spec.dims.clone(), v.data().to_vec()))
        .collect()
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(&params_to_arrays(params))?)?;
    Ok(())
}

/// Loads a checkpoint and validates every array against the layout of
/// `cfg` and `kind`.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig, kind: ModelKind) -> Result<ModelParams> {
    let arrays = decode_checkpoint(&fs::read(path)?)?;
    ModelParams::from_named(arrays, cfg, kind)
}

/// Configuration stored next to a checkpoint as `<checkpoint>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model: ModelConfig,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(path: &Path, params: &ModelParams, model: &ModelConfig, kind: ModelKind) -> Result<()> {
    save_checkpoint(path, params)?;
    let meta = CheckpointMeta {
        kind,
        model: model.clone(),
    };
    fs::write(meta_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let text = fs::read_to_string(meta_path(path))
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", meta_path(path).display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let params = load_checkpoint(path, &meta.model, meta.kind)?;
    Ok((params, meta))
}

/// Rectangular numeric CSV without a header.
pub fn load_csv_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|cell| {
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {}: non-numeric cell {cell:?}", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "row {} has {} cells, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Format(format!("{} holds no values", path.display())));
    }
    let (r, c) = (rows.len(), rows[0].len());
    DenseMatrix::new(r, c, rows.concat()).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub matrices: usize,
    pub entries: usize,
    pub mean: f64,
    pub variance: f64,
    pub max: f64,
    /// Counts over `HISTOGRAM_BINS` equal bins of `[0, max]`; entries below
    /// zero land in the first bin.
    pub histogram: Vec<u64>,
}

pub fn dataset_stats<'a>(matrices: impl IntoIterator<Item = &'a DenseMatrix>) -> Result<DatasetStats> {
    let matrices: Vec<&DenseMatrix> = matrices.into_iter().collect();
    if matrices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let values = || matrices.iter().flat_map(|m| m.data().iter().copied());
    let entries: usize = matrices.iter().map(|m| m.len()).sum();
    let mean = values().sum::<f64>() / entries as f64;
    let variance = values().map(|x| (x - mean) * (x - mean)).sum::<f64>() / entries as f64;
    let max = values().fold(f64::NEG_INFINITY, f64::max);
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    for x in values() {
        let bin = if max > 0.0 && x > 0.0 {
            ((x / max * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        histogram[bin] += 1;
    }
    Ok(DatasetStats {
        matrices: matrices.len(),
        entries,
        mean,
        variance,
        max,
        histogram,
    })
}

#[derive(Serialize)]
struct HistogramRow {
    bin_low: f64,
    bin_high: f64,
    count: u64,
}

/// `bin_low,bin_high,count` rows.
pub fn write_histogram_csv(path: &Path, stats: &DatasetStats) -> Result<()> {
    let width = stats.max.max(0.0) / HISTOGRAM_BINS as f64;
    let mut w = csv::Writer::from_path(path)?;
    for (k, &count) in stats.histogram.iter().enumerate() {
        w.serialize(HistogramRow {
            bin_low: k as f64 * width,
            bin_high: (k + 1) as f64 * width,
            count,
        })?;
    }
    w.flush()?;
    Ok(())
}
