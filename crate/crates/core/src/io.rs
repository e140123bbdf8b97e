//! File formats: NPY v1.0 arrays (little-endian `f32`, C order) and the JSON
//! documents for manifests, score tables, residual sidecars and configs.
//!
//! Arrays are `f32` on disk and `f64` in memory. Every loader validates the
//! type invariants of what it returns.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::afs::{AfsConfig, FeatureKey, ImageKey, ResidualFeatureSet};
use crate::cqs::{CqsConfig, ScoreTable};
use crate::error::{Error, Result};
use crate::layout::PromptManifest;
use crate::stm::ModifyParams;
use crate::tensor::EmbeddingMatrix;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const HEADER_ALIGN: usize = 64;

/// A loaded array: 2-D arrays become matrices, 1-D arrays vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    Matrix(EmbeddingMatrix),
    Vector(Vec<f64>),
}

impl ArrayData {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            ArrayData::Matrix(m) => vec![m.nrows(), m.ncols()],
            ArrayData::Vector(v) => vec![v.len()],
        }
    }

    pub fn into_matrix(self) -> Result<EmbeddingMatrix> {
        match self {
            ArrayData::Matrix(m) => Ok(m),
            ArrayData::Vector(v) => Err(Error::Shape(format!(
                "expected a 2-D array, found shape ({},)",
                v.len()
            ))),
        }
    }

    pub fn into_vector(self) -> Result<Vec<f64>> {
        match self {
            ArrayData::Vector(v) => Ok(v),
            ArrayData::Matrix(m) => Err(Error::Shape(format!(
                "expected a 1-D array, found shape ({}, {})",
                m.nrows(),
                m.ncols()
            ))),
        }
    }
}

fn header_text(shape: &[usize]) -> String {
    let dims = match shape {
        [n] => format!("({n},)"),
        _ => format!(
            "({})",
            shape.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut text = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    // magic(6) + version(2) + length(2) + text + '\n' is a multiple of 64
    let unpadded = MAGIC.len() + 4 + text.len() + 1;
    let pad = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    text.extend(std::iter::repeat_n(' ', pad));
    text.push('\n');
    text
}

/// NPY v1.0 bytes for an `f32` array of the given shape.
pub fn encode_npy(shape: &[usize], values: &[f64]) -> Result<Vec<u8>> {
    let expected: usize = shape.iter().product();
    if values.len() != expected {
        return Err(Error::Shape(format!("{} values for shape {shape:?}", values.len())));
    }
    let text = header_text(shape);
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + text.len() + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(text.len() as u16).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (i, &v) in values.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidInput(format!(
                "value {v} at flat index {i} is not representable as f32"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_matrix(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    encode_npy(&[m.nrows(), m.ncols()], &m.to_row_major())
}

pub fn encode_vector(v: &[f64]) -> Result<Vec<u8>> {
    encode_npy(&[v.len()], v)
}

#[derive(Debug, PartialEq)]
enum HeaderValue {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

/// Parser for the Python dict literal in an NPY header.
struct HeaderParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn fail(&self, what: &str) -> Error {
        Error::MalformedHeader(format!("{what} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.fail(&format!("expected '{}'", c as char)))
        }
    }

    fn string(&mut self) -> Result<String> {
        self.skip_ws();
        let quote = match self.src.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return Err(self.fail("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.src.len() {
            return Err(self.fail("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail("expected integer"))
    }

    fn value(&mut self) -> Result<HeaderValue> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        if rest.starts_with(b"True") {
            self.pos += 4;
            Ok(HeaderValue::Bool(true))
        } else if rest.starts_with(b"False") {
            self.pos += 5;
            Ok(HeaderValue::Bool(false))
        } else if self.eat(b'(') {
            let mut dims = Vec::new();
            loop {
                if self.eat(b')') {
                    break;
                }
                dims.push(self.integer()?);
                if !self.eat(b',') {
                    self.expect(b')')?;
                    break;
                }
            }
            Ok(HeaderValue::Tuple(dims))
        } else {
            self.string().map(HeaderValue::Str)
        }
    }

    fn dict(mut self) -> Result<Vec<(String, HeaderValue)>> {
        self.expect(b'{')?;
        let mut entries = Vec::new();
        loop {
            if self.eat(b'}') {
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            entries.push((key, self.value()?));
            if !self.eat(b',') {
                self.expect(b'}')?;
                break;
            }
        }
        self.skip_ws();
        if self.pos != self.src.len() {
            return Err(self.fail("trailing characters after header dict"));
        }
        Ok(entries)
    }
}

/// Parse NPY v1.0 bytes holding a 1-D or 2-D little-endian `f32` array.
pub fn decode_npy(bytes: &[u8]) -> Result<ArrayData> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::MalformedHeader("missing NPY magic".into()));
    }
    if bytes[6..8] != [1, 0] {
        return Err(Error::MalformedHeader(format!(
            "unsupported format version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(Error::MalformedHeader("header length exceeds file size".into()));
    }
    let entries = HeaderParser {
        src: &bytes[10..data_start],
        pos: 0,
    }
    .dict()?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    for (key, value) in entries {
        match (key.as_str(), value) {
            ("descr", HeaderValue::Str(s)) => descr = Some(s),
            ("fortran_order", HeaderValue::Bool(b)) => fortran = Some(b),
            ("shape", HeaderValue::Tuple(t)) => shape = Some(t),
            (k, v) => return Err(Error::MalformedHeader(format!("unexpected entry '{k}': {v:?}"))),
        }
    }
    let descr = descr.ok_or_else(|| Error::MalformedHeader("missing 'descr'".into()))?;
    let fortran = fortran.ok_or_else(|| Error::MalformedHeader("missing 'fortran_order'".into()))?;
    let shape = shape.ok_or_else(|| Error::MalformedHeader("missing 'shape'".into()))?;

    if descr != "<f4" {
        return Err(Error::UnsupportedDtype(descr));
    }
    if fortran {
        return Err(Error::UnsupportedLayout(
            "Fortran-order arrays are not supported".into(),
        ));
    }
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::UnsupportedLayout(format!(
            "{}-D arrays are not supported",
            shape.len()
        )));
    }

    let count: usize = shape.iter().product();
    let payload = &bytes[data_start..];
    let expected = count * 4;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after a payload of {expected}",
            payload.len() - expected
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();

    match shape[..] {
        [n] => {
            if let Some(i) = values.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("non-finite value at index {i} of {n}")));
            }
            Ok(ArrayData::Vector(values))
        }
        [rows, cols] => EmbeddingMatrix::from_row_major(rows, cols, &values).map(ArrayData::Matrix),
        _ => unreachable!("ndim checked above"),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_array(path: impl AsRef<Path>) -> Result<ArrayData> {
    decode_npy(&read_bytes(path.as_ref())?)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    load_array(path)?.into_matrix()
}

/// Write through a sibling temporary file and rename into place, so a
/// failed write never leaves a partial file at `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_array(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_matrix(m)?)
}

pub fn save_vector(v: &[f64], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_vector(v)?)
}

/// Types whose invariants are checked once after deserialization.
pub trait Validate {
    fn validate(&self) -> Result<()>;
}

impl Validate for PromptManifest {
    fn validate(&self) -> Result<()> {
        PromptManifest::validate(self)
    }
}

impl Validate for ScoreTable {
    fn validate(&self) -> Result<()> {
        ScoreTable::validate(self)
    }
}

impl Validate for ModifyParams {
    fn validate(&self) -> Result<()> {
        ModifyParams::validate(self)
    }
}

impl Validate for CqsConfig {
    fn validate(&self) -> Result<()> {
        CqsConfig::validate(self)
    }
}

impl Validate for AfsConfig {
    fn validate(&self) -> Result<()> {
        AfsConfig::validate(self)
    }
}

impl Validate for ResidualIndex {
    fn validate(&self) -> Result<()> {
        ResidualIndex::validate(self)
    }
}

/// Deserialize JSON, reporting the field path of the first mismatch.
pub fn parse_json<T: DeserializeOwned + Validate>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    value.validate()?;
    Ok(value)
}

pub fn parse_toml<T: DeserializeOwned + Validate>(text: &str) -> Result<T> {
    let value: T = toml::from_str(text).map_err(|e| Error::Schema {
        path: ".".into(),
        message: e.message().to_string(),
    })?;
    value.validate()?;
    Ok(value)
}

/// JSON, or TOML when the extension is `.toml`.
pub fn load_config<T: DeserializeOwned + Validate>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "toml") {
        parse_toml(&text)
    } else {
        parse_json(&text)
    }
}

/// Raw config tree (JSON, or TOML by extension) for callers that patch keys
/// before typing it with [`from_value`].
pub fn load_config_value(path: impl AsRef<Path>) -> Result<serde_json::Value> {
    let path = path.as_ref();
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "toml") {
        let value: toml::Value = toml::from_str(&text).map_err(|e| Error::Schema {
            path: ".".into(),
            message: e.message().to_string(),
        })?;
        Ok(serde_json::to_value(value).expect("toml values map to json"))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: ".".into(),
            message: e.to_string(),
        })
    }
}

pub fn from_value<T: DeserializeOwned + Validate>(value: serde_json::Value) -> Result<T> {
    let typed: T = serde_path_to_error::deserialize(value).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    typed.validate()?;
    Ok(typed)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<PromptManifest> {
    parse_json(&read_text(path.as_ref())?)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreTable> {
    parse_json(&read_text(path.as_ref())?)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModifyParams> {
    load_config(path)
}

pub const RESIDUAL_SIDECAR: &str = "residuals.json";

/// `residuals.json`: flattened length, image count and the dumped
/// `(block, step)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualIndex {
    pub dim: usize,
    pub k: usize,
    pub available: Vec<[usize; 2]>,
}

impl ResidualIndex {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invariant("dim ≥ 1", "residual dim is 0"));
        }
        if self.k == 0 {
            return Err(Error::invariant("k ≥ 1", "residual sidecar lists no images"));
        }
        Ok(())
    }
}

/// Read the sidecar and every dump it announces that exists on disk.
///
/// Absent per-image files are not an error here; queries report them.
pub fn load_residuals(dir: impl AsRef<Path>) -> Result<(ResidualIndex, ResidualFeatureSet)> {
    let dir = dir.as_ref();
    let index: ResidualIndex = parse_json(&read_text(&dir.join(RESIDUAL_SIDECAR))?)?;
    let mut set = ResidualFeatureSet::new();
    for &[block, step] in &index.available {
        let images = (0..index.k).map(ImageKey::Image).chain([ImageKey::Identity]);
        for image in images {
            let key = FeatureKey::new(block, step, image);
            let path = dir.join(key.file_name());
            if !path.exists() {
                continue;
            }
            let vector = load_array(&path)?.into_vector()?;
            if vector.len() != index.dim {
                return Err(Error::invariant(
                    "residual length equals sidecar dim",
                    format!(
                        "{} has {} values, sidecar dim is {}",
                        path.display(),
                        vector.len(),
                        index.dim
                    ),
                ));
            }
            set.insert(key, vector)?;
        }
    }
    Ok((index, set))
}

/// Write a residual dump in the directory layout `load_residuals` reads.
pub fn save_residuals(dir: impl AsRef<Path>, index: &ResidualIndex, set: &ResidualFeatureSet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for key in set.keys() {
        save_vector(set.get(key).expect("key from set"), dir.join(key.file_name()))?;
    }
    let text = serde_json::to_string_pretty(index).expect("index serializes");
    write_atomic(dir.join(RESIDUAL_SIDECAR), text.as_bytes())
}
