//! ATNP v1 archive: the wire format between the extractor and the engine.
//!
//! ```text
//! "ATNP" | version u16 | record_count u32 | record*
//! record := name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32*ndim | payload
//! ```
//!
//! Integers and `f32` payloads are little-endian, tensors row-major. dtype 1 is
//! `f32`, dtype 2 is a UTF-8 JSON document whose single dim is its byte length.
//! The `meta` record is mandatory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::stack::{
    validate_stack, AttentionStack, AttentionTensor, CaptureMetadata, CrossAttentionTensor,
    Resolution, Violation,
};

pub const MAGIC: [u8; 4] = *b"ATNP";
pub const VERSION: u16 = 1;

pub const DTYPE_F32: u8 = 1;
pub const DTYPE_JSON: u8 = 2;

const META: &str = "meta";
const SELF_PREFIX: &str = "self/";
const CROSS_PREFIX: &str = "cross/";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"ATNP\"")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated record '{record}'")]
    Truncated { record: String },
    #[error("dimension mismatch in record '{record}': {detail}")]
    DimensionMismatch { record: String, detail: String },
    #[error("malformed record '{record}': {detail}")]
    Malformed { record: String, detail: String },
    #[error("archive has no 'meta' record")]
    MissingMeta,
    #[error("invalid metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("{} invariant violation(s), first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Invariant(Vec<Violation>),
}

impl ArchiveError {
    /// Stable class name, used by the CLI and the C ABI.
    pub fn class(&self) -> &'static str {
        match self {
            ArchiveError::Io(_) => "io",
            ArchiveError::BadMagic(_) => "bad magic",
            ArchiveError::UnsupportedVersion(_) => "unsupported version",
            ArchiveError::Truncated { .. } => "truncated record",
            ArchiveError::DimensionMismatch { .. } => "dimension mismatch",
            ArchiveError::Malformed { .. } => "malformed record",
            ArchiveError::MissingMeta => "missing meta",
            ArchiveError::Metadata(_) => "invalid metadata",
            ArchiveError::Invariant(_) => "invariant violation",
        }
    }
}

/// Payload of a raw archive record.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32 { dims: Vec<u32>, data: Vec<f32> },
    Json(Vec<u8>),
}

/// A raw record, before any tensor semantics are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

struct CountingWriter<W> {
    inner: W,
    count: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Writes raw records in the ATNP container. Returns bytes written.
pub fn write_records<W: Write>(records: &[Record], sink: W) -> Result<u64, ArchiveError> {
    let mut w = CountingWriter {
        inner: sink,
        count: 0,
    };
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(records.len()).map_err(|_| ArchiveError::Malformed {
        record: "header".into(),
        detail: "too many records".into(),
    })?;
    w.write_all(&count.to_le_bytes())?;

    for r in records {
        let name = r.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| ArchiveError::Malformed {
            record: r.name.clone(),
            detail: "name longer than 65535 bytes".into(),
        })?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        match &r.payload {
            Payload::F32 { dims, data } => {
                let expected: u64 = dims.iter().map(|&d| u64::from(d)).product();
                if expected != data.len() as u64 || dims.len() > usize::from(u8::MAX) {
                    return Err(ArchiveError::DimensionMismatch {
                        record: r.name.clone(),
                        detail: format!("dims {dims:?} do not describe {} values", data.len()),
                    });
                }
                w.write_all(&[DTYPE_F32, dims.len() as u8])?;
                for d in dims {
                    w.write_all(&d.to_le_bytes())?;
                }
                let mut buf = Vec::with_capacity(64 * 1024);
                for chunk in data.chunks(16 * 1024) {
                    buf.clear();
                    for v in chunk {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
            }
            Payload::Json(bytes) => {
                let len = u32::try_from(bytes.len()).map_err(|_| ArchiveError::Malformed {
                    record: r.name.clone(),
                    detail: "json payload exceeds u32".into(),
                })?;
                w.write_all(&[DTYPE_JSON, 1])?;
                w.write_all(&len.to_le_bytes())?;
                w.write_all(bytes)?;
            }
        }
    }
    w.flush()?;
    Ok(w.count)
}

fn eof_as_truncated(record: &str) -> impl Fn(io::Error) -> ArchiveError + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ArchiveError::Truncated {
                record: record.to_string(),
            }
        } else {
            ArchiveError::Io(e)
        }
    }
}

fn read_array<R: Read, const N: usize>(src: &mut R, record: &str) -> Result<[u8; N], ArchiveError> {
    let mut buf = [0u8; N];
    src.read_exact(&mut buf).map_err(eof_as_truncated(record))?;
    Ok(buf)
}

/// Reads every raw record from an ATNP container.
pub fn read_records<R: Read>(mut src: R) -> Result<Vec<Record>, ArchiveError> {
    let magic: [u8; 4] = read_array(&mut src, "header")?;
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(read_array(&mut src, "header")?);
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(read_array(&mut src, "header")?);

    let mut records = Vec::new();
    for index in 0..count {
        let placeholder = format!("#{index}");
        let name_len = u16::from_le_bytes(read_array(&mut src, &placeholder)?);
        let mut name = vec![0u8; usize::from(name_len)];
        src.read_exact(&mut name)
            .map_err(eof_as_truncated(&placeholder))?;
        let name = String::from_utf8(name).map_err(|_| ArchiveError::Malformed {
            record: placeholder.clone(),
            detail: "record name is not UTF-8".into(),
        })?;
        let [dtype, ndim] = read_array::<_, 2>(&mut src, &name)?;
        let mut dims = Vec::with_capacity(usize::from(ndim));
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(read_array(&mut src, &name)?));
        }
        let payload = match dtype {
            DTYPE_F32 => {
                let n: u64 = dims.iter().map(|&d| u64::from(d)).product();
                let data = read_f32_payload(&mut src, n, &name)?;
                Payload::F32 { dims, data }
            }
            DTYPE_JSON => {
                if dims.len() != 1 {
                    return Err(ArchiveError::DimensionMismatch {
                        record: name,
                        detail: format!("json payload needs exactly one dim, got {}", dims.len()),
                    });
                }
                let len = u64::from(dims[0]);
                let mut bytes = Vec::new();
                (&mut src).take(len).read_to_end(&mut bytes)?;
                if bytes.len() as u64 != len {
                    return Err(ArchiveError::Truncated { record: name });
                }
                Payload::Json(bytes)
            }
            other => {
                return Err(ArchiveError::Malformed {
                    record: name,
                    detail: format!("unknown dtype {other}"),
                })
            }
        };
        records.push(Record { name, payload });
    }

    let mut trailing = [0u8; 1];
    if src.read(&mut trailing)? != 0 {
        return Err(ArchiveError::Malformed {
            record: "trailer".into(),
            detail: "unexpected bytes after the last record".into(),
        });
    }
    Ok(records)
}

fn read_f32_payload<R: Read>(src: &mut R, n: u64, record: &str) -> Result<Vec<f32>, ArchiveError> {
    const CHUNK: usize = 64 * 1024;
    let mut data = Vec::new();
    let mut remaining = n.checked_mul(4).ok_or_else(|| ArchiveError::DimensionMismatch {
        record: record.to_string(),
        detail: "declared size overflows".into(),
    })?;
    let mut buf = vec![0u8; CHUNK];
    while remaining > 0 {
        let want = remaining.min(CHUNK as u64) as usize;
        src.read_exact(&mut buf[..want])
            .map_err(eof_as_truncated(record))?;
        data.extend(
            buf[..want]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        remaining -= want as u64;
    }
    Ok(data)
}

fn layer_suffix(name: &str, prefix: &str) -> Result<u32, ArchiveError> {
    name[prefix.len()..]
        .parse()
        .map_err(|_| ArchiveError::Malformed {
            record: name.to_string(),
            detail: "layer suffix is not an integer".into(),
        })
}

fn stack_to_records(stack: &AttentionStack) -> Result<Vec<Record>, ArchiveError> {
    let mut records = Vec::new();
    for t in &stack.self_attention {
        let d = t.dims().map(|x| x as u32);
        records.push(Record {
            name: format!("{SELF_PREFIX}{:02}", t.layer_index),
            payload: Payload::F32 {
                dims: d.to_vec(),
                data: t.data.clone(),
            },
        });
    }
    for c in stack.cross_attention.iter().flatten() {
        let d = c.dims().map(|x| x as u32);
        records.push(Record {
            name: format!("{CROSS_PREFIX}{:02}", c.layer_index),
            payload: Payload::F32 {
                dims: d.to_vec(),
                data: c.data.clone(),
            },
        });
    }
    records.push(Record {
        name: META.to_string(),
        payload: Payload::Json(serde_json::to_vec(&stack.metadata)?),
    });
    Ok(records)
}

/// Serializes a validated stack. Returns the number of bytes written.
pub fn write_archive<W: Write>(stack: &AttentionStack, sink: W) -> Result<u64, ArchiveError> {
    let violations = validate_stack(stack);
    if !violations.is_empty() {
        return Err(ArchiveError::Invariant(violations));
    }
    write_records(&stack_to_records(stack)?, sink)
}

/// Parses and validates an archive.
pub fn read_archive<R: Read>(source: R) -> Result<AttentionStack, ArchiveError> {
    let records = read_records(source)?;
    let mut self_attention = Vec::new();
    let mut cross = Vec::new();
    let mut metadata: Option<CaptureMetadata> = None;
    let mut seen = BTreeMap::new();

    for record in records {
        if seen.insert(record.name.clone(), ()).is_some() {
            return Err(ArchiveError::Malformed {
                record: record.name,
                detail: "duplicate record name".into(),
            });
        }
        let Record { name, payload } = record;
        match (name.as_str(), payload) {
            (META, Payload::Json(bytes)) => {
                metadata = Some(serde_json::from_slice(&bytes)?);
            }
            (n, Payload::F32 { dims, data }) if n.starts_with(SELF_PREFIX) => {
                let layer = layer_suffix(n, SELF_PREFIX)?;
                if dims.len() != 4 || dims.iter().any(|&d| d != dims[0]) || dims[0] == 0 {
                    return Err(ArchiveError::DimensionMismatch {
                        record: name,
                        detail: format!("self-attention dims must be (s, s, s, s), got {dims:?}"),
                    });
                }
                let res = Resolution::new(dims[0] as usize).expect("nonzero side");
                self_attention.push(AttentionTensor::new(layer, res, data));
            }
            (n, Payload::F32 { dims, data }) if n.starts_with(CROSS_PREFIX) => {
                let layer = layer_suffix(n, CROSS_PREFIX)?;
                if dims.len() != 3 || dims[0] != dims[1] || dims[0] == 0 || dims[2] == 0 {
                    return Err(ArchiveError::DimensionMismatch {
                        record: name,
                        detail: format!("cross-attention dims must be (s, s, T), got {dims:?}"),
                    });
                }
                let res = Resolution::new(dims[0] as usize).expect("nonzero side");
                cross.push(CrossAttentionTensor::new(layer, res, dims[2] as usize, data));
            }
            (_, _) => {
                return Err(ArchiveError::Malformed {
                    record: name,
                    detail: "unexpected record name or dtype".into(),
                })
            }
        }
    }

    let stack = AttentionStack {
        self_attention,
        cross_attention: (!cross.is_empty()).then_some(cross),
        metadata: metadata.ok_or(ArchiveError::MissingMeta)?,
    };
    let violations = validate_stack(&stack);
    if violations.is_empty() {
        Ok(stack)
    } else {
        Err(ArchiveError::Invariant(violations))
    }
}

pub fn read_archive_file(path: impl AsRef<Path>) -> Result<AttentionStack, ArchiveError> {
    read_archive(BufReader::new(File::open(path)?))
}

pub fn write_archive_file(stack: &AttentionStack, path: impl AsRef<Path>) -> Result<u64, ArchiveError> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_archive(stack, &mut w)?;
    w.flush()?;
    Ok(n)
}
