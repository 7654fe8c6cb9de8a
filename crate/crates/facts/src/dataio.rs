//! On-disk formats for datasets: the FSMX dense matrix file and the
//! manifest tying a metadata CSV to its matrix blocks.
//!
//! FSMX layout (little endian): 4-byte magic `FSMX`, `u16` version, `u8`
//! dtype (1 = f32), `u8` reserved (0), `u64` rows, `u64` cols, then
//! `rows * cols` row-major f32 values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use facts_core::dataset::{Dataset, Provenance, Sample, Split};
use facts_core::linalg::Matrix;
use facts_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FSMX";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 24;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METADATA_FILE: &str = "metadata.csv";
pub const FEATURES: &str = "features";
pub const EMBEDDING: &str = "embedding";
pub const LOGITS: &str = "logits";
pub const METADATA_HEADER: [&str; 5] = ["id", "split", "label", "attribute", "bias_conflicting"];

/// A dense row-major f32 matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl MatrixFile {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "matrix data has {} values, expected {rows} x {cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally long rows; `cols` is used when there are no rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], cols: usize) -> Result<Self> {
        let cols = rows.first().map_or(cols, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.as_ref().len() != cols {
                return Err(Error::Invalid(format!("row {i} has {} values, expected {cols}", r.as_ref().len())));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    /// Narrows an f64 matrix to f32.
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(0);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses and validates an FSMX image; `path` and `block` only label
    /// errors.
    pub fn from_bytes(bytes: &[u8], path: &Path, block: &str) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedHeader {
                path: path.to_path_buf(),
                len: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        if bytes[6] != DTYPE_F32 {
            return Err(Error::DtypeMismatch {
                path: path.to_path_buf(),
                expected: DTYPE_F32,
                found: bytes[6],
            });
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        let payload = (bytes.len() - HEADER_LEN) as u64;
        let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
        if expected != Some(payload) {
            return Err(Error::PayloadSize {
                path: path.to_path_buf(),
                expected: expected.unwrap_or(u64::MAX),
                found: payload,
            });
        }
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let pos = pos as u64;
            return Err(Error::NonFinite {
                block: block.to_string(),
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self {
            rows: rows as usize,
            cols: cols as usize,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let block = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        Self::read_block(path, &block)
    }

    pub fn read_block(path: &Path, block: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path, block)
    }

    /// Reads a block and checks its shape against expectations.
    pub fn read_expect(path: &Path, block: &str, rows: usize, cols: Option<usize>) -> Result<Self> {
        let m = Self::read_block(path, block)?;
        if m.rows != rows {
            return Err(Error::RowCountMismatch {
                block: block.to_string(),
                expected: rows as u64,
                found: m.rows as u64,
            });
        }
        if let Some(c) = cols.filter(|&c| c != m.cols) {
            return Err(Error::ColumnCountMismatch {
                block: block.to_string(),
                expected: c as u64,
                found: m.cols as u64,
            });
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub path: String,
    pub rows: u64,
    pub cols: u64,
}

/// Index of a dataset directory. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub metadata_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub matrix_blocks: BTreeMap<String, BlockRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_echo: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Invalid(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn block(&self, name: &str) -> Result<&BlockRef> {
        self.matrix_blocks.get(name).ok_or_else(|| Error::MissingBlock(name.to_string()))
    }
}

/// Directory holding `path`, for resolving manifest-relative paths.
pub fn base_dir(path: &Path) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

fn block_of<'a>(samples: &'a [Sample], view: impl Fn(&'a Sample) -> &'a [f32]) -> Result<MatrixFile> {
    let rows: Vec<&[f32]> = samples.iter().map(view).collect();
    MatrixFile::from_rows(&rows, 0)
}

/// Writes `metadata.csv`, one FSMX file per nonempty block and
/// `manifest.json` into `dir`; returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    create_dir(dir)?;
    let meta_path = dir.join(METADATA_FILE);
    let file = fs::File::create(&meta_path).map_err(Error::io(&meta_path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(METADATA_HEADER).map_err(Error::csv(&meta_path))?;
    for s in &dataset.samples {
        let attribute = s.attribute.map_or_else(|| "-1".to_string(), |a| a.to_string());
        let bc = match s.bias_conflicting {
            Some(true) => "1",
            Some(false) => "0",
            None => "-1",
        };
        let label = s.label.to_string();
        w.write_record([s.id.as_str(), s.split.as_str(), &label, &attribute, bc])
            .map_err(Error::csv(&meta_path))?;
    }
    w.into_inner()
        .map_err(|e| Error::io(&meta_path)(e.into_error()))?
        .flush()
        .map_err(Error::io(&meta_path))?;

    let mut blocks = BTreeMap::new();
    let mut put = |name: &str, m: MatrixFile| -> Result<()> {
        if m.cols() == 0 {
            return Ok(());
        }
        let file = format!("{name}.fsmx");
        m.write(&dir.join(&file))?;
        blocks.insert(
            name.to_string(),
            BlockRef {
                path: file,
                rows: m.rows() as u64,
                cols: m.cols() as u64,
            },
        );
        Ok(())
    };
    put(FEATURES, block_of(&dataset.samples, |s| s.features.as_slice())?)?;
    put(EMBEDDING, block_of(&dataset.samples, |s| s.embedding.as_slice())?)?;
    if dataset.logit_dim().is_some() {
        put(LOGITS, block_of(&dataset.samples, |s| s.logits.as_deref().unwrap_or(&[]))?)?;
    }

    let (config_echo, source) = match &dataset.provenance {
        Provenance::Synthetic(cfg) => (Some(serde_json::to_value(cfg).map_err(Error::json(dir))?), None),
        Provenance::External(src) => (None, Some(src.clone())),
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        metadata_path: METADATA_FILE.to_string(),
        num_classes: Some(dataset.num_classes),
        matrix_blocks: blocks,
        mapping: dataset.mapping.clone(),
        config_echo,
        source,
    };
    let path = dir.join(MANIFEST_FILE);
    manifest.write(&path)?;
    Ok(path)
}

struct MetaRow {
    id: String,
    split: Split,
    label: usize,
    attribute: Option<usize>,
    bias_conflicting: Option<bool>,
}

fn parse_optional(field: &str, what: &str, path: &Path, row: usize) -> Result<Option<usize>> {
    let bad = || Error::BadRow {
        path: path.to_path_buf(),
        row,
        message: format!("invalid {what} {field:?}"),
    };
    match field.trim() {
        "" | "-1" => Ok(None),
        f => f.parse().map(Some).map_err(|_| bad()),
    }
}

/// Reads the metadata CSV; `row` in errors is the 1-based data row.
fn read_metadata(path: &Path) -> Result<Vec<MetaRow>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(Error::csv(path))?;
    let header = r.headers().map_err(Error::csv(path))?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::BadRow {
            path: path.to_path_buf(),
            row: 0,
            message: format!("missing column {name:?}"),
        })
    };
    let (ci, cs, cl) = (col("id")?, col("split")?, col("label")?);
    let ca = header.iter().position(|h| h == "attribute");
    let cb = header.iter().position(|h| h == "bias_conflicting");
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(Error::csv(path))?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let bad = |message: String| Error::BadRow {
            path: path.to_path_buf(),
            row,
            message,
        };
        let id = get(ci).to_string();
        if id.is_empty() {
            return Err(bad("empty id".into()));
        }
        let split_field = get(cs);
        if split_field.is_empty() {
            return Err(Error::EmptySplit {
                path: path.to_path_buf(),
                row,
            });
        }
        let split = Split::parse(split_field).ok_or_else(|| bad(format!("unknown split {split_field:?}")))?;
        let label = get(cl).parse().map_err(|_| bad(format!("invalid label {:?}", get(cl))))?;
        let attribute = match ca {
            Some(c) => parse_optional(get(c), "attribute", path, row)?,
            None => None,
        };
        let bias_conflicting = match cb.map(get) {
            None | Some("" | "-1") => None,
            Some("1" | "true") => Some(true),
            Some("0" | "false") => Some(false),
            Some(other) => return Err(bad(format!("invalid bias_conflicting {other:?}"))),
        };
        rows.push(MetaRow {
            id,
            split,
            label,
            attribute,
            bias_conflicting,
        });
    }
    Ok(rows)
}

fn load_block(manifest: &Manifest, base: &Path, name: &str, rows: usize) -> Result<Option<MatrixFile>> {
    let Some(b) = manifest.matrix_blocks.get(name) else {
        return Ok(None);
    };
    if b.rows != rows as u64 {
        return Err(Error::RowCountMismatch {
            block: format!("{name} (manifest)"),
            expected: rows as u64,
            found: b.rows,
        });
    }
    MatrixFile::read_expect(&base.join(&b.path), name, rows, Some(b.cols as usize)).map(Some)
}

/// Loads and validates the dataset described by a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let base = base_dir(manifest_path);
    let meta = read_metadata(&base.join(&manifest.metadata_path))?;
    let n = meta.len();
    let features = load_block(&manifest, &base, FEATURES, n)?;
    let embedding = load_block(&manifest, &base, EMBEDDING, n)?;
    let logits = load_block(&manifest, &base, LOGITS, n)?;
    let num_classes = match manifest.num_classes {
        Some(k) => k,
        None => meta.iter().map(|m| m.label + 1).max().unwrap_or(0),
    };
    let samples = meta
        .into_iter()
        .enumerate()
        .map(|(i, m)| Sample {
            id: m.id,
            split: m.split,
            features: features.as_ref().map_or_else(Vec::new, |f| f.row(i).to_vec()),
            embedding: embedding.as_ref().map_or_else(Vec::new, |f| f.row(i).to_vec()),
            logits: logits.as_ref().map(|f| f.row(i).to_vec()),
            label: m.label,
            attribute: m.attribute,
            bias_conflicting: m.bias_conflicting,
        })
        .collect();
    let synthetic = manifest
        .config_echo
        .as_ref()
        .and_then(|v| serde_json::from_value::<SynthConfig>(v.clone()).ok());
    let provenance = match (synthetic, &manifest.source) {
        (Some(cfg), None) => Provenance::Synthetic(cfg),
        (_, Some(src)) => Provenance::External(src.clone()),
        (None, None) => Provenance::External(manifest_path.display().to_string()),
    };
    let dataset = Dataset {
        samples,
        num_classes,
        mapping: manifest.mapping.clone(),
        provenance,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Adds (or replaces) a matrix block next to an existing manifest, e.g.
/// logits exported by an external model.
pub fn attach_block(manifest_path: &Path, name: &str, block: &MatrixFile) -> Result<()> {
    let mut manifest = Manifest::read(manifest_path)?;
    let base = base_dir(manifest_path);
    let meta_rows = read_metadata(&base.join(&manifest.metadata_path))?.len();
    if block.rows() != meta_rows {
        return Err(Error::RowCountMismatch {
            block: name.to_string(),
            expected: meta_rows as u64,
            found: block.rows() as u64,
        });
    }
    let file = format!("{name}.fsmx");
    block.write(&base.join(&file))?;
    manifest.matrix_blocks.insert(
        name.to_string(),
        BlockRef {
            path: file,
            rows: block.rows() as u64,
            cols: block.cols() as u64,
        },
    );
    manifest.write(manifest_path)
}
