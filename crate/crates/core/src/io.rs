//! Bit-exact on-disk formats: the SGT1 tensor container and binary PGM.
//!
//! SGT1 layout, all multi-byte integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SGT1" (0x53 0x47 0x54 0x31)
//! 4       1     version, 0x01
//! 5       1     dtype: 0x00 = u8, 0x01 = IEEE-754 binary32
//! 6       1     ndim: 2 or 3
//! 7       1     reserved, 0x00
//! 8       4*n   dims as u32: H, W [, N]
//! ...           row-major (channel-last) payload
//! ```
//!
//! Label maps are 2-D u8, probability maps and prior stacks are 3-D f32,
//! feature images are 2-D f32. The container carries only dtype, shape and
//! payload; which tensor type a file holds is decided by the caller when
//! converting the decoded [`RawTensor`], and the type invariants are
//! validated at that point.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{FeatureMap, LabelMap, PriorStack, ProbabilityMap, TensorError};

pub const MAGIC: [u8; 4] = *b"SGT1";
pub const VERSION: u8 = 0x01;
const DTYPE_U8: u8 = 0x00;
const DTYPE_F32: u8 = 0x01;
const MAX_PAYLOAD_BYTES: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:02x?}, expected \"SGT1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("unsupported dtype byte {0:#04x}")]
    BadDtype(u8),
    #[error("unsupported ndim {0}, expected 2 or 3")]
    BadNdim(u8),
    #[error("reserved header byte is {0:#04x}, expected 0x00")]
    BadReserved(u8),
    #[error("dimension {index} is zero")]
    ZeroDim { index: usize },
    #[error("payload of {0} bytes exceeds the supported maximum")]
    PayloadTooLarge(u64),
    #[error("truncated payload: expected {expected} bytes, file holds {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("file holds a {got} tensor, expected {expected}")]
    WrongKind {
        expected: &'static str,
        got: String,
    },
    #[error("tensor invariant violated: {0}")]
    Tensor(#[from] TensorError),
    #[error("pgm value {value} at index {index} exceeds max_val {max_val}")]
    PgmValueTooLarge {
        index: usize,
        value: u16,
        max_val: u16,
    },
    #[error("pgm dimensions do not match data length")]
    PgmLengthMismatch,
    #[error("pgm max_val must be >= 1")]
    PgmBadMaxVal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    U8,
    F32,
}

impl Dtype {
    fn byte(self) -> u8 {
        match self {
            Dtype::U8 => DTYPE_U8,
            Dtype::F32 => DTYPE_F32,
        }
    }

    fn from_byte(b: u8) -> Result<Self, FormatError> {
        match b {
            DTYPE_U8 => Ok(Dtype::U8),
            DTYPE_F32 => Ok(Dtype::F32),
            other => Err(FormatError::BadDtype(other)),
        }
    }

    fn size(self) -> u64 {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

/// Decoded tensor file: shape plus payload, before any type is imposed.
#[derive(Debug, Clone, PartialEq)]
pub enum RawTensor {
    U8 { dims: Vec<u32>, data: Vec<u8> },
    F32 { dims: Vec<u32>, data: Vec<f32> },
}

impl RawTensor {
    fn describe(&self) -> String {
        match self {
            RawTensor::U8 { dims, .. } => format!("{}-D u8", dims.len()),
            RawTensor::F32 { dims, .. } => format!("{}-D f32", dims.len()),
        }
    }

    /// Interprets a 2-D u8 tensor as a label map with the given class count.
    pub fn into_label_map(self, num_classes: usize) -> Result<LabelMap, FormatError> {
        match self {
            RawTensor::U8 { dims, data } if dims.len() == 2 => Ok(LabelMap::new(
                dims[0] as usize,
                dims[1] as usize,
                num_classes,
                data,
            )?),
            other => Err(FormatError::WrongKind {
                expected: "2-D u8 label map",
                got: other.describe(),
            }),
        }
    }

    /// Interprets a 3-D f32 tensor as a probability map.
    pub fn into_probability_map(self) -> Result<ProbabilityMap, FormatError> {
        match self {
            RawTensor::F32 { dims, data } if dims.len() == 3 => Ok(ProbabilityMap::new(
                dims[0] as usize,
                dims[1] as usize,
                dims[2] as usize,
                data,
            )?),
            other => Err(FormatError::WrongKind {
                expected: "3-D f32 probability map",
                got: other.describe(),
            }),
        }
    }

    /// Interprets a 3-D f32 tensor as a raw prior stack.
    pub fn into_raw_prior_stack(self) -> Result<PriorStack, FormatError> {
        match self {
            RawTensor::F32 { dims, data } if dims.len() == 3 => Ok(PriorStack::new_raw(
                dims[0] as usize,
                dims[1] as usize,
                dims[2] as usize,
                data,
            )?),
            other => Err(FormatError::WrongKind {
                expected: "3-D f32 prior stack",
                got: other.describe(),
            }),
        }
    }

    /// Interprets a 3-D f32 tensor as a smoothed prior stack with the
    /// given cutoff floor.
    pub fn into_smoothed_prior_stack(self, cutoff: f32) -> Result<PriorStack, FormatError> {
        match self {
            RawTensor::F32 { dims, data } if dims.len() == 3 => Ok(PriorStack::new_smoothed(
                dims[0] as usize,
                dims[1] as usize,
                dims[2] as usize,
                data,
                cutoff,
            )?),
            other => Err(FormatError::WrongKind {
                expected: "3-D f32 prior stack",
                got: other.describe(),
            }),
        }
    }

    /// Interprets a 3-D f32 tensor as a prior stack, deciding raw vs
    /// smoothed from the data: unit channel sums with values in [0, 1]
    /// mean raw, otherwise the stack is taken as smoothed with the
    /// observed minimum as its cutoff.
    pub fn into_prior_stack_auto(self) -> Result<PriorStack, FormatError> {
        match self {
            RawTensor::F32 { dims, data } if dims.len() == 3 => {
                let (h, w, n) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
                match PriorStack::new_raw(h, w, n, data.clone()) {
                    Ok(stack) => Ok(stack),
                    Err(_) => {
                        let min = data.iter().copied().fold(f32::INFINITY, f32::min);
                        Ok(PriorStack::new_smoothed(h, w, n, data, min)?)
                    }
                }
            }
            other => Err(FormatError::WrongKind {
                expected: "3-D f32 prior stack",
                got: other.describe(),
            }),
        }
    }

    /// Interprets a 2-D f32 tensor as a feature image.
    pub fn into_feature_map(self) -> Result<FeatureMap, FormatError> {
        match self {
            RawTensor::F32 { dims, data } if dims.len() == 2 => {
                Ok(FeatureMap::new(dims[0] as usize, dims[1] as usize, data)?)
            }
            other => Err(FormatError::WrongKind {
                expected: "2-D f32 feature map",
                got: other.describe(),
            }),
        }
    }
}

fn write_header<W: Write>(
    out: &mut W,
    dtype: Dtype,
    dims: &[u32],
) -> Result<(), FormatError> {
    out.write_all(&MAGIC)?;
    out.write_all(&[VERSION, dtype.byte(), dims.len() as u8, 0x00])?;
    for &d in dims {
        out.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn write_file(
    path: &Path,
    dtype: Dtype,
    dims: &[u32],
    payload: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), FormatError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, dtype, dims)?;
    payload(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_label_map(path: impl AsRef<Path>, map: &LabelMap) -> Result<(), FormatError> {
    write_file(
        path.as_ref(),
        Dtype::U8,
        &[map.height() as u32, map.width() as u32],
        |out| out.write_all(map.data()),
    )
}

fn write_f32_payload<W: Write>(out: &mut W, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn write_probability_map(
    path: impl AsRef<Path>,
    map: &ProbabilityMap,
) -> Result<(), FormatError> {
    write_file(
        path.as_ref(),
        Dtype::F32,
        &[
            map.height() as u32,
            map.width() as u32,
            map.num_classes() as u32,
        ],
        |out| write_f32_payload(out, map.data()),
    )
}

pub fn write_prior_stack(path: impl AsRef<Path>, stack: &PriorStack) -> Result<(), FormatError> {
    write_file(
        path.as_ref(),
        Dtype::F32,
        &[
            stack.height() as u32,
            stack.width() as u32,
            stack.num_classes() as u32,
        ],
        |out| write_f32_payload(out, stack.data()),
    )
}

pub fn write_feature_map(path: impl AsRef<Path>, map: &FeatureMap) -> Result<(), FormatError> {
    write_file(
        path.as_ref(),
        Dtype::F32,
        &[map.height() as u32, map.width() as u32],
        |out| write_f32_payload(out, map.data()),
    )
}

/// Reads and validates an SGT1 file.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<RawTensor, FormatError> {
    let file = File::open(path.as_ref())?;
    let file_len = file.metadata()?.len();
    let mut reader = BufReader::new(file);

    let mut head = [0u8; 8];
    reader.read_exact(&mut head)?;
    let magic: [u8; 4] = head[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if head[4] != VERSION {
        return Err(FormatError::BadVersion(head[4]));
    }
    let dtype = Dtype::from_byte(head[5])?;
    let ndim = head[6];
    if ndim != 2 && ndim != 3 {
        return Err(FormatError::BadNdim(ndim));
    }
    if head[7] != 0x00 {
        return Err(FormatError::BadReserved(head[7]));
    }

    let mut dims = Vec::with_capacity(ndim as usize);
    for index in 0..ndim as usize {
        let mut b = [0u8; 4];
        reader.read_exact(&mut b)?;
        let d = u32::from_le_bytes(b);
        if d == 0 {
            return Err(FormatError::ZeroDim { index });
        }
        dims.push(d);
    }

    let count: u64 = dims.iter().map(|&d| u64::from(d)).product();
    let payload_bytes = count
        .checked_mul(dtype.size())
        .filter(|&b| b <= MAX_PAYLOAD_BYTES)
        .ok_or(FormatError::PayloadTooLarge(u64::MAX))?;
    let header_bytes = 8 + 4 * u64::from(ndim);
    let expected_len = header_bytes + payload_bytes;
    if file_len < expected_len {
        return Err(FormatError::Truncated {
            expected: payload_bytes,
            got: file_len.saturating_sub(header_bytes),
        });
    }
    if file_len > expected_len {
        return Err(FormatError::TrailingBytes(file_len - expected_len));
    }

    let mut payload = vec![0u8; payload_bytes as usize];
    reader.read_exact(&mut payload)?;

    Ok(match dtype {
        Dtype::U8 => RawTensor::U8 {
            dims,
            data: payload,
        },
        Dtype::F32 => RawTensor::F32 {
            dims,
            data: payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        },
    })
}

/// Writes a binary PGM (P5) grayscale image.
///
/// Samples are 8-bit when `max_val <= 255`, otherwise 16-bit big-endian,
/// matching the PGM specification.
pub fn write_pgm(
    path: impl AsRef<Path>,
    values: &[u16],
    height: usize,
    width: usize,
    max_val: u16,
) -> Result<(), FormatError> {
    if max_val == 0 {
        return Err(FormatError::PgmBadMaxVal);
    }
    if values.len() != height * width || height == 0 || width == 0 {
        return Err(FormatError::PgmLengthMismatch);
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, &v)| v > max_val) {
        return Err(FormatError::PgmValueTooLarge {
            index,
            value,
            max_val,
        });
    }
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    write!(out, "P5\n{width} {height}\n{max_val}\n")?;
    if max_val <= 255 {
        let bytes: Vec<u8> = values.iter().map(|&v| v as u8).collect();
        out.write_all(&bytes)?;
    } else {
        let mut bytes = Vec::with_capacity(values.len() * 2);
        for &v in values {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        out.write_all(&bytes)?;
    }
    out.flush()?;
    Ok(())
}
