//! NPY format version 1.0, little-endian `<f4`, `<f8` and `<i4`, C order.
//!
//! Float data is widened to `f64` on read.

use std::io::Write;

use super::FormatError;
use crate::volume::{LabelVolume, ProbVolume, SampleStack, ScalarVolume, Shape};

pub(crate) const NPY_MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F64(Vec<f64>),
    I32(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Descr {
    F4,
    F8,
    I4,
}

impl Descr {
    fn parse(s: &str) -> Result<Self, FormatError> {
        match s {
            "<f4" => Ok(Descr::F4),
            "<f8" => Ok(Descr::F8),
            "<i4" => Ok(Descr::I4),
            other => Err(FormatError::UnsupportedNpy(format!("dtype {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            Descr::F4 | Descr::I4 => 4,
            Descr::F8 => 8,
        }
    }
}

/// Reads an NPY file from disk.
pub fn read_npy(path: impl AsRef<std::path::Path>) -> Result<NpyArray, FormatError> {
    parse(&std::fs::read(path)?)
}

pub(crate) fn parse(bytes: &[u8]) -> Result<NpyArray, FormatError> {
    if !bytes.starts_with(NPY_MAGIC) {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < 10 {
        return Err(FormatError::MalformedHeader("truncated npy preamble".into()));
    }
    if (bytes[6], bytes[7]) != (1, 0) {
        return Err(FormatError::UnsupportedNpy(format!(
            "format version {}.{}",
            bytes[6], bytes[7]
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let body = 10 + header_len;
    if bytes.len() < body {
        return Err(FormatError::MalformedHeader("truncated npy header".into()));
    }
    let dict = std::str::from_utf8(&bytes[10..body])
        .map_err(|_| FormatError::MalformedHeader("npy header is not ASCII".into()))?;
    let (descr, fortran, shape) = parse_dict(dict)?;
    if fortran {
        return Err(FormatError::UnsupportedNpy("fortran_order".into()));
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[body..];
    let expected = count * descr.size();
    if payload.len() != expected {
        return Err(FormatError::PayloadMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let data = match descr {
        Descr::F4 => NpyData::F64(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        ),
        Descr::F8 => NpyData::F64(
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        Descr::I4 => NpyData::I32(
            payload
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
    };
    if let NpyData::F64(v) = &data {
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(FormatError::NonFinite(i));
        }
    }
    Ok(NpyArray { shape, data })
}

fn malformed(what: &str) -> FormatError {
    FormatError::MalformedHeader(format!("npy header: {what}"))
}

/// Value text following `'key':` in the header dict.
fn field<'a>(dict: &'a str, key: &str) -> Result<&'a str, FormatError> {
    let pat = format!("'{key}':");
    let at = dict.find(&pat).ok_or_else(|| malformed(&format!("missing {key}")))?;
    Ok(dict[at + pat.len()..].trim_start())
}

fn parse_dict(dict: &str) -> Result<(Descr, bool, Vec<usize>), FormatError> {
    let descr = {
        let rest = field(dict, "descr")?;
        let rest = rest.strip_prefix('\'').ok_or_else(|| malformed("descr"))?;
        let end = rest.find('\'').ok_or_else(|| malformed("descr"))?;
        Descr::parse(&rest[..end])?
    };
    let fortran = {
        let rest = field(dict, "fortran_order")?;
        if rest.starts_with("False") {
            false
        } else if rest.starts_with("True") {
            true
        } else {
            return Err(malformed("fortran_order"));
        }
    };
    let shape = {
        let rest = field(dict, "shape")?;
        let rest = rest.strip_prefix('(').ok_or_else(|| malformed("shape"))?;
        let end = rest.find(')').ok_or_else(|| malformed("shape"))?;
        rest[..end]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|_| malformed("shape")))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok((descr, fortran, shape))
}

/// Writes a rank-N array as NPY v1.0 (`<f8` or `<i4`).
pub fn write_npy<W: Write>(w: &mut W, shape: &[usize], data: &NpyData) -> Result<(), FormatError> {
    let descr = match data {
        NpyData::F64(_) => "<f8",
        NpyData::I32(_) => "<i4",
    };
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {dims}, }}");
    // Pad so the payload starts on a 64-byte boundary.
    let unpadded = 10 + dict.len() + 1;
    dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    dict.push('\n');
    w.write_all(NPY_MAGIC)?;
    w.write_all(&[1, 0])?;
    w.write_all(&(dict.len() as u16).to_le_bytes())?;
    w.write_all(dict.as_bytes())?;
    match data {
        NpyData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        NpyData::I32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
    }
    Ok(())
}

impl NpyArray {
    fn floats(self, what: &str) -> Result<(Vec<usize>, Vec<f64>), FormatError> {
        match self.data {
            NpyData::F64(v) => Ok((self.shape, v)),
            NpyData::I32(_) => Err(FormatError::UnsupportedNpy(format!(
                "{what} needs a float array"
            ))),
        }
    }

    /// `(T, C, ...spatial)` with class-major passes, transposed to voxel-major.
    pub fn into_stack(self) -> Result<SampleStack, FormatError> {
        let (dims, values) = self.floats("a sample stack")?;
        if !(4..=5).contains(&dims.len()) {
            return Err(FormatError::UnsupportedNpy(format!(
                "sample stack must be (T, C, H, W) or (T, C, D, H, W), got {dims:?}"
            )));
        }
        let (passes, classes) = (dims[0], dims[1]);
        let shape = Shape::new(&dims[2..])?;
        let per_pass = classes * shape.voxel_count();
        let volumes = values
            .chunks_exact(per_pass.max(1))
            .take(passes)
            .map(|chunk| {
                ProbVolume::new(shape.clone(), classes, class_to_voxel_major(chunk, classes))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SampleStack::new(volumes)?)
    }

    /// `(C, ...spatial)`.
    pub fn into_prob(self) -> Result<ProbVolume, FormatError> {
        let (dims, values) = self.floats("a probability volume")?;
        if !(3..=4).contains(&dims.len()) {
            return Err(FormatError::UnsupportedNpy(format!(
                "probability volume must be (C, H, W) or (C, D, H, W), got {dims:?}"
            )));
        }
        let shape = Shape::new(&dims[1..])?;
        Ok(ProbVolume::new(
            shape,
            dims[0],
            class_to_voxel_major(&values, dims[0]),
        )?)
    }

    pub fn into_scalar(self) -> Result<ScalarVolume, FormatError> {
        let (dims, values) = self.floats("a scalar map")?;
        Ok(ScalarVolume::new(Shape::new(&dims)?, values)?)
    }

    pub fn into_labels(self, classes: Option<usize>) -> Result<LabelVolume, FormatError> {
        let raw = match self.data {
            NpyData::I32(v) => v,
            NpyData::F64(_) => {
                return Err(FormatError::UnsupportedNpy(
                    "labels must be stored as <i4".into(),
                ))
            }
        };
        let shape = Shape::new(&self.shape)?;
        let classes =
            classes.unwrap_or_else(|| (raw.iter().copied().max().unwrap_or(0).max(1) + 1) as usize);
        Ok(LabelVolume::from_i32(shape, classes, &raw)?)
    }
}

fn class_to_voxel_major(values: &[f64], classes: usize) -> Vec<f64> {
    if classes == 0 {
        return Vec::new();
    }
    let voxels = values.len() / classes;
    let mut out = vec![0.0; values.len()];
    for c in 0..classes {
        for v in 0..voxels {
            out[v * classes + c] = values[c * voxels + v];
        }
    }
    out
}
