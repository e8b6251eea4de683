//! The `.sbcp` embedding dataset format.
//!
//! # File layout
//!
//! All integers are little-endian `u32`, all vector payloads little-endian
//! `f32`, row-major.
//!
//! ```text
//! offset  size        field
//! 0       4           magic  b"SBCP"
//! 4       4           version (= 1)
//! 8       4           D      feature dimension
//! 12      4           K      class count
//! 16      4           H_loc  local grid height
//! 20      4           W_map  local grid width
//! 24      4           N      record count
//! 28      4           flags  bit0 = locals present, bit1 = pre-normalized
//! 32      K*D*4       class table
//! ...     N records:  u32 label, D f32 global, [H_loc*W_map*D f32 locals]
//! ```
//!
//! Vectors are widened to `f64` on load and narrowed on write, so any value
//! that came from a file is written back bit-identically.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SBCP";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Header flag bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flags(pub u32);

impl Flags {
    pub const LOCALS: u32 = 1;
    pub const NORMALIZED: u32 = 1 << 1;
    const KNOWN: u32 = Self::LOCALS | Self::NORMALIZED;

    pub fn new(has_locals: bool, normalized: bool) -> Self {
        let mut bits = 0;
        if has_locals {
            bits |= Self::LOCALS;
        }
        if normalized {
            bits |= Self::NORMALIZED;
        }
        Flags(bits)
    }

    pub fn has_locals(self) -> bool {
        self.0 & Self::LOCALS != 0
    }

    pub fn normalized(self) -> bool {
        self.0 & Self::NORMALIZED != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub dim: usize,
    pub num_classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub num_records: usize,
    pub flags: Flags,
}

impl DatasetHeader {
    pub fn new(
        dim: usize,
        num_classes: usize,
        grid: Option<(usize, usize)>,
        num_records: usize,
        normalized: bool,
    ) -> Self {
        let (grid_height, grid_width) = grid.unwrap_or((0, 0));
        DatasetHeader {
            version: VERSION,
            dim,
            num_classes,
            grid_height,
            grid_width,
            num_records,
            flags: Flags::new(grid.is_some(), normalized),
        }
    }

    /// Number of local regions per record (0 when locals are absent).
    pub fn num_regions(&self) -> usize {
        if self.flags.has_locals() {
            self.grid_height * self.grid_width
        } else {
            0
        }
    }

    fn record_len(&self) -> Option<usize> {
        let floats = self.num_regions().checked_add(1)?.checked_mul(self.dim)?;
        floats.checked_mul(4)?.checked_add(4)
    }

    /// Exact file length implied by the header, or `None` on overflow.
    pub fn file_len(&self) -> Option<usize> {
        let classes = self.num_classes.checked_mul(self.dim)?.checked_mul(4)?;
        let records = self.record_len()?.checked_mul(self.num_records)?;
        HEADER_LEN.checked_add(classes)?.checked_add(records)
    }

    fn check(&self, allow_empty: bool) -> std::result::Result<(), String> {
        if self.version != VERSION {
            return Err(format!("unsupported version {}", self.version));
        }
        if self.dim == 0 {
            return Err("D must be >= 1".into());
        }
        if self.num_classes < 2 {
            return Err(format!("K must be >= 2, got {}", self.num_classes));
        }
        if self.flags.0 & !Flags::KNOWN != 0 {
            return Err(format!("unknown flag bits {:#x}", self.flags.0));
        }
        if self.flags.has_locals() && self.grid_height * self.grid_width == 0 {
            return Err("locals flagged but H_loc*W_map == 0".into());
        }
        if self.num_records == 0 && !allow_empty {
            return Err("N must be >= 1".into());
        }
        Ok(())
    }
}

/// One image's cached features. `locals` is `num_regions * dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub label: usize,
    pub global: Vec<f64>,
    pub locals: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn num_regions(&self) -> usize {
        if self.global.is_empty() {
            0
        } else {
            self.locals.len() / self.global.len()
        }
    }

    pub fn local(&self, region: usize) -> &[f64] {
        let d = self.global.len();
        &self.locals[region * d..(region + 1) * d]
    }

    pub fn locals_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.locals.chunks_exact(self.global.len().max(1))
    }
}

/// Per-class name embeddings, `K x D` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    dim: usize,
    data: Vec<f64>,
}

impl ClassTable {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Schema(format!(
                "class table length {} is not a multiple of D = {dim}",
                data.len()
            )));
        }
        Ok(ClassTable { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Schema("class rows have unequal lengths".into()));
        }
        ClassTable::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub classes: ClassTable,
    pub records: Vec<EmbeddingRecord>,
}

impl Dataset {
    /// Builds a dataset, deriving the header from the payload.
    pub fn new(
        classes: ClassTable,
        records: Vec<EmbeddingRecord>,
        grid: Option<(usize, usize)>,
        normalized: bool,
    ) -> Result<Self> {
        let header = DatasetHeader::new(classes.dim(), classes.len(), grid, records.len(), normalized);
        let ds = Dataset {
            header,
            classes,
            records,
        };
        ds.check_shapes()?;
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes
    }

    pub fn num_regions(&self) -> usize {
        self.header.num_regions()
    }

    /// Multiplies every image feature (global and local) by `alpha`. Class
    /// embeddings are encoder inputs, not features, and are left alone.
    pub fn scale_features(&mut self, alpha: f64) {
        for r in &mut self.records {
            r.global.iter_mut().chain(r.locals.iter_mut()).for_each(|x| *x *= alpha);
        }
        self.header.flags.0 &= !Flags::NORMALIZED;
    }

    fn check_shapes(&self) -> Result<()> {
        let h = &self.header;
        let schema = |msg: String| Err(Error::Schema(msg));
        if let Err(msg) = h.check(true) {
            return schema(msg);
        }
        if self.classes.dim() != h.dim || self.classes.len() != h.num_classes {
            return schema(format!(
                "class table is {}x{}, header says {}x{}",
                self.classes.len(),
                self.classes.dim(),
                h.num_classes,
                h.dim
            ));
        }
        if self.records.len() != h.num_records {
            return schema(format!("header N = {}, payload has {} records", h.num_records, self.records.len()));
        }
        let local_len = h.num_regions() * h.dim;
        for (i, r) in self.records.iter().enumerate() {
            if r.label >= h.num_classes {
                return schema(format!("record {i}: label {} out of range [0, {})", r.label, h.num_classes));
            }
            if r.global.len() != h.dim {
                return schema(format!("record {i}: global has length {}, expected {}", r.global.len(), h.dim));
            }
            if r.locals.len() != local_len {
                return schema(format!("record {i}: locals have length {}, expected {local_len}", r.locals.len()));
            }
        }
        Ok(())
    }

    /// Serializes to the exact on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_shapes()?;
        let h = &self.header;
        let len = h
            .file_len()
            .ok_or_else(|| Error::Schema("dataset too large to address".into()))?;
        let mut buf = Vec::with_capacity(len);
        buf.extend_from_slice(&MAGIC);
        for v in [h.version as usize, h.dim, h.num_classes, h.grid_height, h.grid_width, h.num_records] {
            let v = u32::try_from(v).map_err(|_| Error::Schema(format!("header field {v} exceeds u32")))?;
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&h.flags.0.to_le_bytes());
        put_f32s(&mut buf, self.classes.as_slice());
        for r in &self.records {
            buf.extend_from_slice(&(r.label as u32).to_le_bytes());
            put_f32s(&mut buf, &r.global);
            put_f32s(&mut buf, &r.locals);
        }
        debug_assert_eq!(buf.len(), len);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        parse(bytes, false)
    }
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn f32s(&mut self, n: usize) -> Vec<f64> {
        let end = self.pos + 4 * n;
        let out = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        self.pos = end;
        out
    }
}

fn parse(bytes: &[u8], allow_empty: bool) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32();
    let fields: Vec<usize> = (0..5).map(|_| cur.u32() as usize).collect();
    let header = DatasetHeader {
        version,
        dim: fields[0],
        num_classes: fields[1],
        grid_height: fields[2],
        grid_width: fields[3],
        num_records: fields[4],
        flags: Flags(cur.u32()),
    };
    header.check(allow_empty).map_err(Error::Format)?;
    let expected = header
        .file_len()
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "file is {} bytes but header implies {expected}{}",
            bytes.len(),
            if bytes.len() < expected { " (truncated)" } else { "" }
        )));
    }

    let dim = header.dim;
    let classes = ClassTable::new(dim, cur.f32s(header.num_classes * dim))?;
    let local_floats = header.num_regions() * dim;
    let records = (0..header.num_records)
        .map(|_| {
            let label = cur.u32() as usize;
            let global = cur.f32s(dim);
            let locals = cur.f32s(local_floats);
            EmbeddingRecord { label, global, locals }
        })
        .collect();
    let ds = Dataset {
        header,
        classes,
        records,
    };
    let report = validate_dataset(&ds);
    if !report.is_empty() {
        return Err(Error::Data(report.to_string()));
    }
    Ok(ds)
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = dataset.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, false)
}

/// Reads a class-feature file: `.sbcp` with `N = 0` whose class table holds
/// precomputed text features.
pub fn read_class_features(path: impl AsRef<Path>) -> Result<ClassTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&bytes, true)?.classes)
}

/// Reads any `.sbcp` file, including class-feature files with `N = 0`.
pub fn read_any_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, true)
}

pub fn write_class_features(classes: &ClassTable, path: impl AsRef<Path>) -> Result<()> {
    let ds = Dataset::new(classes.clone(), Vec::new(), None, false)?;
    write_dataset(&ds, path)
}

/// Where a single invariant violation was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Location {
    Header,
    Class(usize),
    Global { record: usize },
    Local { record: usize, region: usize },
    Label { record: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: Location,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    /// Records cited by at least one violation, ascending, deduplicated.
    pub fn records(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .violations
            .iter()
            .filter_map(|v| match v.location {
                Location::Global { record } | Location::Local { record, .. } | Location::Label { record } => {
                    Some(record)
                }
                _ => None,
            })
            .collect();
        out.dedup();
        out
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            let loc = match v.location {
                Location::Header => "header".to_string(),
                Location::Class(k) => format!("class {k}"),
                Location::Global { record } => format!("record {record} global"),
                Location::Local { record, region } => format!("record {record} region {region}"),
                Location::Label { record } => format!("record {record} label"),
            };
            write!(f, "{loc}: {}", v.message)?;
        }
        Ok(())
    }
}

fn vector_problem(v: &[f64]) -> Option<String> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Some(format!("non-finite value {} at component {i}", v[i]));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Some("zero-norm vector".into());
    }
    None
}

/// Scans every invariant and reports each violation. Never fails.
pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut out = Vec::new();
    let mut push = |location, message: String| out.push(Violation { location, message });

    if let Err(msg) = ds.header.check(true) {
        push(Location::Header, msg);
    }
    if ds.records.len() != ds.header.num_records {
        push(
            Location::Header,
            format!("header N = {} but {} records present", ds.header.num_records, ds.records.len()),
        );
    }
    for (k, row) in ds.classes.rows().enumerate() {
        if let Some(msg) = vector_problem(row) {
            push(Location::Class(k), msg);
        }
    }
    let dim = ds.header.dim;
    let regions = ds.header.num_regions();
    for (i, r) in ds.records.iter().enumerate() {
        if r.label >= ds.header.num_classes {
            push(
                Location::Label { record: i },
                format!("label {} out of range [0, {})", r.label, ds.header.num_classes),
            );
        }
        if r.global.len() != dim {
            push(Location::Global { record: i }, format!("length {} != D = {dim}", r.global.len()));
        } else if let Some(msg) = vector_problem(&r.global) {
            push(Location::Global { record: i }, msg);
        }
        if r.locals.len() != regions * dim {
            push(
                Location::Local { record: i, region: 0 },
                format!("locals length {} != {}", r.locals.len(), regions * dim),
            );
            continue;
        }
        for (j, local) in r.locals.chunks_exact(dim.max(1)).enumerate() {
            if let Some(msg) = vector_problem(local) {
                push(Location::Local { record: i, region: j }, msg);
            }
        }
    }
    ValidationReport { violations: out }
}

/// Optional human-readable class names, stored next to a dataset as
/// `<dataset path>.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassManifest {
    pub names: Vec<String>,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    sidecar_path(dataset, "json")
}

pub(crate) fn sidecar_path(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

impl ClassManifest {
    pub fn write(&self, dataset: &Path) -> Result<()> {
        let path = manifest_path(dataset);
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    /// Returns `Ok(None)` when no manifest exists.
    pub fn read(dataset: &Path) -> Result<Option<Self>> {
        let path = manifest_path(dataset);
        match fs::read_to_string(&path) {
            Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}
