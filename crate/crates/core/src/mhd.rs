//! MetaImage (MHD + RAW) volume reader and writer.
//!
//! The header is plain text, one `Key = Value` per line. Keys are
//! case-sensitive; whitespace around `=` and CRLF line endings are tolerated.
//! Four element types are supported: MET_UCHAR, MET_SHORT, MET_USHORT,
//! MET_FLOAT. The writer always emits little-endian data in a sibling .raw
//! file; the reader additionally accepts big-endian payloads and data
//! appended to the header itself (`ElementDataFile = LOCAL`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::volume::Volume;

#[derive(Debug, Error)]
pub enum MhdError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing mandatory header key {key}")]
    MissingKey { key: &'static str },
    #[error("header line {line} is not a Key = Value pair")]
    Malformed { line: usize },
    #[error("bad value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("raw payload holds {got} bytes, header implies {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("slice index {index} out of range for extent {extent}")]
    SliceIndex { index: usize, extent: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MhdError + '_ {
    move |source| MhdError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Element types this artifact reads and writes.
pub trait MhdScalar: Copy + Default {
    const ELEMENT_TYPE: &'static str;
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_bytes(bytes: &[u8], msb: bool) -> Self;
}

macro_rules! impl_mhd_scalar {
    ($t:ty, $name:literal) => {
        impl MhdScalar for $t {
            const ELEMENT_TYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_bytes(bytes: &[u8], msb: bool) -> Self {
                let arr = bytes.try_into().expect("caller slices exact widths");
                if msb {
                    Self::from_be_bytes(arr)
                } else {
                    Self::from_le_bytes(arr)
                }
            }
        }
    };
}

impl_mhd_scalar!(u8, "MET_UCHAR");
impl_mhd_scalar!(i16, "MET_SHORT");
impl_mhd_scalar!(u16, "MET_USHORT");
impl_mhd_scalar!(f32, "MET_FLOAT");

/// A decoded volume of whichever element type the file declared.
#[derive(Debug, Clone)]
pub enum AnyVolume {
    U8(Volume<u8>),
    I16(Volume<i16>),
    U16(Volume<u16>),
    F32(Volume<f32>),
}

impl AnyVolume {
    pub fn element_type(&self) -> &'static str {
        match self {
            AnyVolume::U8(_) => u8::ELEMENT_TYPE,
            AnyVolume::I16(_) => i16::ELEMENT_TYPE,
            AnyVolume::U16(_) => u16::ELEMENT_TYPE,
            AnyVolume::F32(_) => f32::ELEMENT_TYPE,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            AnyVolume::U8(v) => v.dims,
            AnyVolume::I16(v) => v.dims,
            AnyVolume::U16(v) => v.dims,
            AnyVolume::F32(v) => v.dims,
        }
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        match self {
            AnyVolume::U8(v) => v.spacing,
            AnyVolume::I16(v) => v.spacing,
            AnyVolume::U16(v) => v.spacing,
            AnyVolume::F32(v) => v.spacing,
        }
    }

    /// Intensity view: any element type widens losslessly to f32 except u16
    /// and i16 values beyond 2^24, which CMR intensities do not reach.
    pub fn into_intensity(self) -> Volume<f32> {
        match self {
            AnyVolume::U8(v) => cast(v, |x| x as f32),
            AnyVolume::I16(v) => cast(v, |x| x as f32),
            AnyVolume::U16(v) => cast(v, |x| x as f32),
            AnyVolume::F32(v) => v,
        }
    }

    /// Label view: labels are stored as MET_UCHAR only.
    pub fn into_labels(self) -> Result<Volume<u8>, MhdError> {
        match self {
            AnyVolume::U8(v) => Ok(v),
            other => Err(MhdError::BadValue {
                key: "ElementType".into(),
                value: format!("{} (labels must be MET_UCHAR)", other.element_type()),
            }),
        }
    }
}

fn cast<A: Copy, B>(v: Volume<A>, f: impl Fn(A) -> B) -> Volume<B> {
    Volume {
        dims: v.dims,
        spacing: v.spacing,
        data: v.data.into_iter().map(f).collect(),
    }
}

struct Header {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    element_type: String,
    msb: bool,
    data_file: String,
    /// Offset of LOCAL payload within the header file, when data_file is LOCAL.
    local_offset: usize,
}

fn parse_usize3(key: &str, value: &str) -> Result<(usize, usize, usize), MhdError> {
    let bad = || MhdError::BadValue {
        key: key.into(),
        value: value.into(),
    };
    let parts: Vec<usize> = value
        .split_whitespace()
        .map(|p| p.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    match parts.as_slice() {
        [a, b, c] if *a > 0 && *b > 0 && *c > 0 => Ok((*a, *b, *c)),
        _ => Err(bad()),
    }
}

fn parse_f64_3(key: &str, value: &str) -> Result<(f64, f64, f64), MhdError> {
    let bad = || MhdError::BadValue {
        key: key.into(),
        value: value.into(),
    };
    let parts: Vec<f64> = value
        .split_whitespace()
        .map(|p| p.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    match parts.as_slice() {
        [a, b, c] if *a > 0.0 && *b > 0.0 && *c > 0.0 => Ok((*a, *b, *c)),
        _ => Err(bad()),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, MhdError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(MhdError::BadValue {
            key: key.into(),
            value: value.into(),
        }),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header, MhdError> {
    let mut dims = None;
    let mut spacing = None;
    let mut element_type = None;
    let mut msb = false;
    let mut data_file: Option<String> = None;
    let mut local_offset = 0usize;

    let mut line_no = 0;
    let mut pos = 0;
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .unwrap_or(bytes.len());
        let after = (end + 1).min(bytes.len());
        line_no += 1;
        let mut line = &bytes[pos..end];
        if line.last() == Some(&b'\r') {
            line = &line[..line.len() - 1];
        }
        pos = after;

        let text = std::str::from_utf8(line).map_err(|_| MhdError::Malformed { line: line_no })?;
        if text.trim().is_empty() {
            continue;
        }
        let Some((key, value)) = text.split_once('=') else {
            return Err(MhdError::Malformed { line: line_no });
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(MhdError::BadValue {
                        key: key.into(),
                        value: value.into(),
                    });
                }
            }
            "NDims" => {
                if value != "3" {
                    return Err(MhdError::BadValue {
                        key: key.into(),
                        value: value.into(),
                    });
                }
            }
            "DimSize" => dims = Some(parse_usize3(key, value)?),
            "ElementSpacing" => spacing = Some(parse_f64_3(key, value)?),
            "ElementType" => element_type = Some(value.to_string()),
            "ElementByteOrderMSB" | "BinaryDataByteOrderMSB" => {
                msb = parse_bool(key, value)?;
            }
            "ElementDataFile" => {
                data_file = Some(value.to_string());
                if value == "LOCAL" {
                    // Binary payload starts right after this line's newline.
                    local_offset = pos;
                    break;
                }
            }
            other => log::warn!("ignoring unknown header key {other:?}"),
        }
    }

    Ok(Header {
        dims: dims.ok_or(MhdError::MissingKey { key: "DimSize" })?,
        spacing: spacing.unwrap_or((1.0, 1.0, 1.0)),
        element_type: element_type.ok_or(MhdError::MissingKey { key: "ElementType" })?,
        msb,
        data_file: data_file.ok_or(MhdError::MissingKey {
            key: "ElementDataFile",
        })?,
        local_offset,
    })
}

fn decode<T: MhdScalar>(header: &Header, payload: &[u8]) -> Result<Volume<T>, MhdError> {
    let (nx, ny, nz) = header.dims;
    let expected = nx * ny * nz * T::BYTES;
    if payload.len() != expected {
        return Err(MhdError::SizeMismatch {
            expected,
            got: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(T::BYTES)
        .map(|c| T::read_bytes(c, header.msb))
        .collect();
    Ok(Volume::new(header.dims, header.spacing, data))
}

/// Read an MHD header and its raw payload.
pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume, MhdError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let header = parse_header(&bytes)?;

    let payload: Vec<u8> = if header.data_file == "LOCAL" {
        bytes[header.local_offset..].to_vec()
    } else {
        let raw_path = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&header.data_file);
        std::fs::read(&raw_path).map_err(io_err(&raw_path))?
    };

    match header.element_type.as_str() {
        "MET_UCHAR" => Ok(AnyVolume::U8(decode(&header, &payload)?)),
        "MET_SHORT" => Ok(AnyVolume::I16(decode(&header, &payload)?)),
        "MET_USHORT" => Ok(AnyVolume::U16(decode(&header, &payload)?)),
        "MET_FLOAT" => Ok(AnyVolume::F32(decode(&header, &payload)?)),
        other => Err(MhdError::BadValue {
            key: "ElementType".into(),
            value: other.into(),
        }),
    }
}

/// Write `v` as `<path>` plus a sibling raw file named after the header file
/// with the extension replaced by `.raw`. Always little-endian.
pub fn write_volume<T: MhdScalar>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<(), MhdError> {
    let path = path.as_ref();
    let raw_name = {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "volume".into());
        format!("{stem}.raw")
    };

    let mut header = String::new();
    let (nx, ny, nz) = v.dims;
    let (sx, sy, sz) = v.spacing;
    // f64 Display round-trips exactly, which covers the >= 9 significant
    // digit requirement on spacing.
    let _ = writeln!(header, "ObjectType = Image");
    let _ = writeln!(header, "NDims = 3");
    let _ = writeln!(header, "DimSize = {nx} {ny} {nz}");
    let _ = writeln!(header, "ElementSpacing = {sx} {sy} {sz}");
    let _ = writeln!(header, "ElementType = {}", T::ELEMENT_TYPE);
    let _ = writeln!(header, "ElementByteOrderMSB = False");
    let _ = writeln!(header, "ElementDataFile = {raw_name}");

    let mut raw = Vec::with_capacity(v.numel() * T::BYTES);
    for &x in &v.data {
        x.write_le(&mut raw);
    }

    std::fs::write(path, header).map_err(io_err(path))?;
    let raw_path = path.with_file_name(&raw_name);
    std::fs::write(&raw_path, raw).map_err(io_err(&raw_path))?;
    Ok(())
}
