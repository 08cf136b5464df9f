//! Patch embedding fields, the `.pfse` file format, and token-grid pooling.
//!
//! Layout of a `.pfse` file (all integers little-endian):
//!
//! | offset | size | content                                        |
//! |--------|------|------------------------------------------------|
//! | 0      | 4    | magic `MDMF`                                   |
//! | 4      | 4    | version (u32, = 1)                             |
//! | 8      | 4    | record count N                                 |
//! | 12     | 4    | patches per record K                           |
//! | 16     | 4    | embedding dimension D                          |
//! | 20     | 4    | flags: bit 0 labels, bit 1 source-id table     |
//! | 24     | 4NKD | f32 payload, record → patch → component        |
//!
//! followed by N label bytes (0 real, 1 generated) when bit 0 is set, and N
//! `(u16 length, UTF-8)` source ids when bit 1 is set.
//!
//! Values are held as `f64` in memory and rounded to `f32` on write.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

pub const PFSE_MAGIC: [u8; 4] = *b"MDMF";
pub const PFSE_VERSION: u32 = 1;
pub const PFSE_HEADER_LEN: usize = 24;

const FLAG_LABELS: u32 = 1;
const FLAG_IDS: u32 = 2;

/// Image label. Generated is the positive class everywhere in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Generated,
}

impl Label {
    pub fn as_byte(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Generated => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Label> {
        match b {
            0 => Some(Label::Real),
            1 => Some(Label::Generated),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Generated => "generated",
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Generated
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" | "0" => Ok(Label::Real),
            "generated" | "fake" | "1" => Ok(Label::Generated),
            other => Err(invalid(format!("unknown label {other:?}"))),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// K patch embeddings of dimension D for one image, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingField {
    patches: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PatchEmbeddingField {
    pub fn new(patches: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if patches == 0 || dim == 0 {
            return Err(invalid("patch count and dimension must be positive"));
        }
        if data.len() != patches * dim {
            return Err(shape(format!(
                "expected {patches}x{dim} = {} values, got {}",
                patches * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch embedding field"));
        }
        Ok(Self { patches, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let patches = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(shape("ragged patch rows"));
        }
        Self::new(patches, dim, rows.concat())
    }

    /// Builds a field without validation. Callers guarantee the invariants.
    pub(crate) fn from_parts_unchecked(patches: usize, dim: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), patches * dim);
        Self { patches, dim, data }
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_patches(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mean over patches, the globally pooled embedding.
    pub fn mean_patch(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for p in self.iter_patches() {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        let inv = 1.0 / self.patches as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

impl AsRef<[f64]> for PatchEmbeddingField {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

/// A labelled collection of fields sharing one `(K, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    patches: usize,
    dim: usize,
    fields: Vec<PatchEmbeddingField>,
    labels: Option<Vec<Label>>,
    source_ids: Option<Vec<String>>,
}

impl EmbeddingDataset {
    pub fn new(
        patches: usize,
        dim: usize,
        fields: Vec<PatchEmbeddingField>,
        labels: Option<Vec<Label>>,
        source_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if patches == 0 || dim == 0 {
            return Err(invalid("patch count and dimension must be positive"));
        }
        if let Some(f) = fields.iter().find(|f| f.patches() != patches || f.dim() != dim) {
            return Err(shape(format!(
                "dataset is {patches}x{dim} but a record is {}x{}",
                f.patches(),
                f.dim()
            )));
        }
        if labels.as_ref().is_some_and(|l| l.len() != fields.len()) {
            return Err(shape("label count differs from record count"));
        }
        if let Some(ids) = &source_ids {
            if ids.len() != fields.len() {
                return Err(shape("source-id count differs from record count"));
            }
            if let Some(id) = ids.iter().find(|id| id.len() > u16::MAX as usize) {
                return Err(invalid(format!(
                    "source id of {} bytes exceeds the u16 length prefix",
                    id.len()
                )));
            }
        }
        Ok(Self {
            patches,
            dim,
            fields,
            labels,
            source_ids,
        })
    }

    /// All records share `label`; ids are `prefix-000000`, `prefix-000001`, ...
    pub fn uniform(
        patches: usize,
        dim: usize,
        fields: Vec<PatchEmbeddingField>,
        label: Label,
        id_prefix: &str,
    ) -> Result<Self> {
        let n = fields.len();
        let ids = (0..n).map(|i| format!("{id_prefix}-{i:06}")).collect();
        Self::new(patches, dim, fields, Some(vec![label; n]), Some(ids))
    }

    pub fn empty(patches: usize, dim: usize) -> Result<Self> {
        Self::new(patches, dim, Vec::new(), None, None)
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[PatchEmbeddingField] {
        &self.fields
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<Label> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn source_ids(&self) -> Option<&[String]> {
        self.source_ids.as_deref()
    }

    /// Source id of record `i`, or its zero-padded index when the table is absent.
    pub fn source_id(&self, i: usize) -> String {
        match &self.source_ids {
            Some(ids) => ids[i].clone(),
            None => format!("{i:06}"),
        }
    }

    /// Records `start..start+len` as a new dataset.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(invalid(format!(
                "slice {start}..{} out of range for {} records",
                start + len,
                self.len()
            )));
        }
        let r = start..start + len;
        Self::new(
            self.patches,
            self.dim,
            self.fields[r.clone()].to_vec(),
            self.labels.as_ref().map(|l| l[r.clone()].to_vec()),
            self.source_ids.as_ref().map(|s| s[r].to_vec()),
        )
    }

    /// Concatenates two datasets. Label / id tables survive only if both have them.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.patches != other.patches || self.dim != other.dim {
            return Err(shape("datasets differ in (K, D)"));
        }
        let mut fields = self.fields.clone();
        fields.extend_from_slice(&other.fields);
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some([a.as_slice(), b.as_slice()].concat()),
            _ => None,
        };
        let ids = match (&self.source_ids, &other.source_ids) {
            (Some(a), Some(b)) => Some([a.as_slice(), b.as_slice()].concat()),
            _ => None,
        };
        Self::new(self.patches, self.dim, fields, labels, ids)
    }

    /// Pools every record, interpreted as a square token grid, down to
    /// `target_patches` patches.
    pub fn pooled(&self, target_patches: usize) -> Result<Self> {
        let side = exact_sqrt(self.patches)
            .ok_or_else(|| invalid(format!("records have {} tokens, not a square grid", self.patches)))?;
        let fields = self
            .fields
            .iter()
            .map(|f| {
                let grid = TokenGrid::new(side, self.dim, f.as_slice().to_vec())?;
                pool_token_grid(&grid, target_patches)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            target_patches,
            self.dim,
            fields,
            self.labels.clone(),
            self.source_ids.clone(),
        )
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| invalid(format!("{what} {v} does not fit in u32")))
}

/// Serializes `dataset` into `.pfse` bytes.
pub fn encode_embedding_file(dataset: &EmbeddingDataset) -> Result<Vec<u8>> {
    let n = dataset.len();
    let stride = dataset.patches * dataset.dim;
    let mut flags = 0;
    if dataset.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if dataset.source_ids.is_some() {
        flags |= FLAG_IDS;
    }
    let mut out = Vec::with_capacity(PFSE_HEADER_LEN + 4 * n * stride + n);
    out.extend_from_slice(&PFSE_MAGIC);
    put_u32(&mut out, PFSE_VERSION);
    put_u32(&mut out, to_u32(n, "record count")?);
    put_u32(&mut out, to_u32(dataset.patches, "patch count")?);
    put_u32(&mut out, to_u32(dataset.dim, "dimension")?);
    put_u32(&mut out, flags);
    for field in &dataset.fields {
        for &v in field.as_slice() {
            let single = v as f32;
            if !single.is_finite() {
                return Err(Error::NonFinite("embedding payload (f32 overflow)"));
            }
            out.extend_from_slice(&single.to_le_bytes());
        }
    }
    if let Some(labels) = &dataset.labels {
        out.extend(labels.iter().map(|l| l.as_byte()));
    }
    if let Some(ids) = &dataset.source_ids {
        for id in ids {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
    }
    Ok(out)
}

pub fn write_embedding_file<W: Write>(dataset: &EmbeddingDataset, mut sink: W) -> Result<()> {
    let bytes = encode_embedding_file(dataset)?;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {len} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

/// Parses `.pfse` bytes.
pub fn decode_embedding_file(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != PFSE_MAGIC {
        return Err(Error::BadMagic {
            expected: PFSE_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32("version")?;
    if version != PFSE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = cur.u32("record count")? as usize;
    let patches = cur.u32("patch count")? as usize;
    let dim = cur.u32("dimension")? as usize;
    let flags = cur.u32("flags")?;
    if patches == 0 || dim == 0 {
        return Err(Error::Corrupt(format!("header declares K={patches}, D={dim}")));
    }
    if flags & !(FLAG_LABELS | FLAG_IDS) != 0 {
        return Err(Error::Corrupt(format!("unknown flag bits {flags:#x}")));
    }
    let stride = patches
        .checked_mul(dim)
        .ok_or_else(|| Error::Corrupt("K*D overflows".into()))?;
    let payload_len = n
        .checked_mul(stride)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Corrupt("payload size overflows".into()))?;
    let payload = cur.take(payload_len, "payload")?;
    let mut fields = Vec::with_capacity(n);
    for rec in payload.chunks_exact(4 * stride.max(1)).take(n) {
        let data: Vec<f64> = rec
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding payload"));
        }
        fields.push(PatchEmbeddingField::from_parts_unchecked(patches, dim, data));
    }
    let labels = if flags & FLAG_LABELS != 0 {
        let raw = cur.take(n, "labels")?;
        Some(
            raw.iter()
                .map(|&b| Label::from_byte(b).ok_or_else(|| Error::Corrupt(format!("label byte {b}"))))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let source_ids = if flags & FLAG_IDS != 0 {
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let len = cur.u16("source id length")? as usize;
            let raw = cur.take(len, "source id")?;
            let id = std::str::from_utf8(raw).map_err(|e| Error::Corrupt(format!("source id is not UTF-8: {e}")))?;
            ids.push(id.to_owned());
        }
        Some(ids)
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after declared content",
            bytes.len() - cur.pos
        )));
    }
    EmbeddingDataset::new(patches, dim, fields, labels, source_ids)
}

pub fn read_embedding_file<R: Read>(mut source: R) -> Result<EmbeddingDataset> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_embedding_file(&bytes)
}

/// A G×G grid of raw backbone tokens, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    side: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenGrid {
    pub fn new(side: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || dim == 0 {
            return Err(invalid("grid side and dimension must be positive"));
        }
        if data.len() != side * side * dim {
            return Err(shape(format!(
                "{side}x{side} grid of dim {dim} needs {} values, got {}",
                side * side * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("token grid"));
        }
        Ok(Self { side, dim, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.side + col) * self.dim;
        &self.data[start..start + self.dim]
    }
}

fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Average-pools a token grid to `target_patches = k²` patches, each the mean
/// of a `(G/k)×(G/k)` block. Output patches are row-major over the k×k grid.
pub fn pool_token_grid(grid: &TokenGrid, target_patches: usize) -> Result<PatchEmbeddingField> {
    let k = exact_sqrt(target_patches)
        .filter(|&k| k > 0)
        .ok_or_else(|| invalid(format!("target patch count {target_patches} is not a perfect square")))?;
    if !grid.side.is_multiple_of(k) {
        return Err(invalid(format!(
            "pooled side {k} does not divide grid side {}",
            grid.side
        )));
    }
    let block = grid.side / k;
    let dim = grid.dim;
    let inv = 1.0 / (block * block) as f64;
    let mut out = vec![0.0; target_patches * dim];
    for pr in 0..k {
        for pc in 0..k {
            let dst = &mut out[(pr * k + pc) * dim..(pr * k + pc + 1) * dim];
            for r in pr * block..(pr + 1) * block {
                for c in pc * block..(pc + 1) * block {
                    for (d, v) in dst.iter_mut().zip(grid.token(r, c)) {
                        *d += v;
                    }
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
    }
    Ok(PatchEmbeddingField::from_parts_unchecked(target_patches, dim, out))
}
