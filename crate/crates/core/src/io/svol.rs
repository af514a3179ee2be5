//! The SVOL volume container.
//!
//! Layout: `"SVOL"`, `u32` version (1), `u64` header length, a UTF-8 JSON
//! header of exactly that many bytes, then the little-endian payload in
//! x-fastest order. Fields are stored channel-major (`[D, N_x, N_y, N_z]`);
//! in memory they are voxel-major, so conversion happens here.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_grid::{DisplacementField, Grid, LabelVolume, Volume};

pub const MAGIC: &[u8; 4] = b"SVOL";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum SvolError {
    #[error("bad magic: expected \"SVOL\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported SVOL version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated SVOL data: needed {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("malformed SVOL header: {0}")]
    MalformedHeader(String),
    #[error("SVOL payload is {actual} bytes but the header implies {expected}")]
    PayloadSize { expected: u64, actual: u64 },
    #[error("SVOL content mismatch: {0}")]
    WrongKind(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SvolError {
    /// Stable short identifier, suitable for scripts and tests.
    pub fn code(&self) -> &'static str {
        match self {
            SvolError::BadMagic(_) => "bad_magic",
            SvolError::UnsupportedVersion(_) => "unsupported_version",
            SvolError::Truncated { .. } => "truncated",
            SvolError::MalformedHeader(_) => "malformed_header",
            SvolError::PayloadSize { .. } => "payload_size",
            SvolError::WrongKind(_) => "wrong_kind",
            SvolError::Io { .. } => "io",
        }
    }
}

type SvolResult<T> = std::result::Result<T, SvolError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Intensity,
    Label,
    Field,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub spacing: [f64; 3],
    pub kind: Kind,
}

impl Header {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    fn validate(&self) -> SvolResult<()> {
        let bad = |m: String| Err(SvolError::MalformedHeader(m));
        let want_rank = if self.kind == Kind::Field { 4 } else { 3 };
        if self.shape.len() != want_rank {
            return bad(format!(
                "{:?} data needs a rank-{want_rank} shape, got {:?}",
                self.kind, self.shape
            ));
        }
        if self.shape.contains(&0) {
            return bad(format!("empty axis in shape {:?}", self.shape));
        }
        if self.kind == Kind::Field && !(1..=3).contains(&self.shape[0]) {
            return bad(format!("field with {} channels", self.shape[0]));
        }
        let want_dtype = if self.kind == Kind::Label { Dtype::U16 } else { Dtype::F32 };
        if self.dtype != want_dtype {
            return bad(format!("{:?} data must be {:?}", self.kind, want_dtype));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("invalid spacing {:?}", self.spacing));
        }
        Ok(())
    }

    fn spatial(&self) -> [usize; 3] {
        let s = &self.shape[self.shape.len() - 3..];
        [s[0], s[1], s[2]]
    }

    fn grid(&self) -> SvolResult<Grid> {
        Grid::new(self.spatial(), self.spacing).map_err(|e| SvolError::MalformedHeader(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U16(v) => v.len(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::U16(_) => Dtype::U16,
        }
    }
}

/// A decoded SVOL file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub payload: Payload,
}

impl Container {
    pub fn new(header: Header, payload: Payload) -> SvolResult<Self> {
        header.validate()?;
        if payload.dtype() != header.dtype {
            return Err(SvolError::MalformedHeader("payload dtype differs from header".into()));
        }
        if payload.len() != header.element_count() {
            return Err(SvolError::PayloadSize {
                expected: (header.element_count() * header.dtype.size()) as u64,
                actual: (payload.len() * header.dtype.size()) as u64,
            });
        }
        Ok(Self { header, payload })
    }

    pub fn from_volume(vol: &Volume) -> Self {
        let g = vol.grid();
        Self {
            header: Header {
                dtype: Dtype::F32,
                shape: g.dims().to_vec(),
                spacing: g.spacing(),
                kind: Kind::Intensity,
            },
            payload: Payload::F32(vol.values().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_labels(labels: &LabelVolume) -> Self {
        let g = labels.grid();
        Self {
            header: Header {
                dtype: Dtype::U16,
                shape: g.dims().to_vec(),
                spacing: g.spacing(),
                kind: Kind::Label,
            },
            payload: Payload::U16(labels.labels().to_vec()),
        }
    }

    pub fn from_field(field: &DisplacementField) -> Self {
        let g = field.grid();
        let ch = field.channels();
        let nv = g.num_voxels();
        let mut planar = vec![0.0f32; nv * ch];
        for v in 0..nv {
            for c in 0..ch {
                planar[c * nv + v] = field.at(v, c) as f32;
            }
        }
        let mut shape = vec![ch];
        shape.extend_from_slice(&g.dims());
        Self {
            header: Header {
                dtype: Dtype::F32,
                shape,
                spacing: g.spacing(),
                kind: Kind::Field,
            },
            payload: Payload::F32(planar),
        }
    }

    fn expect_kind(&self, kind: Kind) -> SvolResult<()> {
        if self.header.kind != kind {
            return Err(SvolError::WrongKind(format!(
                "expected {:?}, file holds {:?}",
                kind, self.header.kind
            )));
        }
        Ok(())
    }

    pub fn to_volume(&self) -> SvolResult<Volume> {
        self.expect_kind(Kind::Intensity)?;
        let Payload::F32(data) = &self.payload else {
            return Err(SvolError::WrongKind("intensity payload must be f32".into()));
        };
        Volume::new(self.header.grid()?, data.iter().map(|&v| v as f64).collect())
            .map_err(|e| SvolError::MalformedHeader(e.to_string()))
    }

    pub fn to_labels(&self) -> SvolResult<LabelVolume> {
        self.expect_kind(Kind::Label)?;
        let Payload::U16(data) = &self.payload else {
            return Err(SvolError::WrongKind("label payload must be u16".into()));
        };
        LabelVolume::new(self.header.grid()?, data.clone())
            .map_err(|e| SvolError::MalformedHeader(e.to_string()))
    }

    pub fn to_field(&self) -> SvolResult<DisplacementField> {
        self.expect_kind(Kind::Field)?;
        let Payload::F32(data) = &self.payload else {
            return Err(SvolError::WrongKind("field payload must be f32".into()));
        };
        let grid = self.header.grid()?;
        let ch = self.header.shape[0];
        let nv = grid.num_voxels();
        let mut inter = vec![0.0; nv * ch];
        for c in 0..ch {
            for v in 0..nv {
                inter[v * ch + c] = data[c * nv + v] as f64;
            }
        }
        DisplacementField::new(grid, ch, inter).map_err(|e| SvolError::MalformedHeader(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + self.payload.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> SvolResult<Self> {
        let available = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(SvolError::Truncated {
                needed: PREAMBLE as u64,
                available,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(SvolError::BadMagic(magic));
        }
        if bytes.len() < PREAMBLE {
            return Err(SvolError::Truncated {
                needed: PREAMBLE as u64,
                available,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(SvolError::UnsupportedVersion(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREAMBLE as u64).saturating_add(header_len);
        if header_end > available {
            return Err(SvolError::Truncated {
                needed: header_end,
                available,
            });
        }
        let header_end = header_end as usize;
        let text = std::str::from_utf8(&bytes[PREAMBLE..header_end])
            .map_err(|e| SvolError::MalformedHeader(e.to_string()))?;
        let header: Header =
            serde_json::from_str(text).map_err(|e| SvolError::MalformedHeader(e.to_string()))?;
        header.validate()?;

        let count = header.element_count();
        let expected = (count as u64).saturating_mul(header.dtype.size() as u64);
        let payload = &bytes[header_end..];
        let actual = payload.len() as u64;
        if actual < expected {
            return Err(SvolError::Truncated {
                needed: header_end as u64 + expected,
                available,
            });
        }
        if actual > expected {
            return Err(SvolError::PayloadSize { expected, actual });
        }
        let payload = decode(payload, header.dtype);
        Ok(Self { header, payload })
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Payload {
    match dtype {
        Dtype::F32 => Payload::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U16 => Payload::U16(
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SvolError {
    SvolError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_svol(path: impl AsRef<Path>) -> SvolResult<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Container::from_bytes(&bytes)
}

pub fn write_svol(path: impl AsRef<Path>, container: &Container) -> SvolResult<()> {
    let path = path.as_ref();
    fs::write(path, container.to_bytes()).map_err(|e| io_err(path, e))
}

/// Wrap a headerless little-endian array (x fastest; channel-major for fields).
pub fn import_raw(bytes: &[u8], header: Header) -> SvolResult<Container> {
    header.validate()?;
    let expected = (header.element_count() * header.dtype.size()) as u64;
    if bytes.len() as u64 != expected {
        return Err(SvolError::PayloadSize {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let payload = decode(bytes, header.dtype);
    Ok(Container { header, payload })
}
