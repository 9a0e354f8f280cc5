//! UVF: 16-byte magic, one JSON header line, raw little-endian payload.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{FormatError, Volume};
use crate::volume::{LabelVolume, ProbVolume, SampleStack, ScalarVolume, Shape};

pub const UVF_MAGIC: [u8; 16] = *b"UNCMAP-VOL\0\0\0\0\0\x01";

const MAX_HEADER: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Scalar,
    Prob,
    Label,
    /// `passes` consecutive prob payloads.
    Stack,
}

impl VolumeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VolumeKind::Scalar => "scalar",
            VolumeKind::Prob => "prob",
            VolumeKind::Label => "label",
            VolumeKind::Stack => "stack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    I32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UvfHeader {
    pub kind: VolumeKind,
    pub dims: Vec<usize>,
    pub classes: usize,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl UvfHeader {
    fn element_count(&self) -> usize {
        let voxels: usize = self.dims.iter().product();
        match self.kind {
            VolumeKind::Scalar | VolumeKind::Label => voxels,
            VolumeKind::Prob => voxels * self.classes,
            VolumeKind::Stack => voxels * self.classes * self.passes.unwrap_or(0),
        }
    }

    fn element_size(&self) -> usize {
        match self.dtype {
            Dtype::F64 => 8,
            Dtype::I32 => 4,
        }
    }
}

/// Self-describing extras carried in the header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata {
    pub estimator: Option<serde_json::Value>,
    pub config_hash: Option<String>,
}

fn header_for(volume: &Volume, meta: &Metadata) -> UvfHeader {
    let (kind, shape, classes, dtype, passes) = match volume {
        Volume::Scalar(s) => (VolumeKind::Scalar, s.shape(), 1, Dtype::F64, None),
        Volume::Prob(p) => (VolumeKind::Prob, p.shape(), p.classes(), Dtype::F64, None),
        Volume::Label(l) => (VolumeKind::Label, l.shape(), l.classes(), Dtype::I32, None),
        Volume::Stack(s) => (
            VolumeKind::Stack,
            s.shape(),
            s.classes(),
            Dtype::F64,
            Some(s.pass_count()),
        ),
    };
    UvfHeader {
        kind,
        dims: shape.dims().to_vec(),
        classes,
        dtype,
        passes,
        estimator: meta.estimator.clone(),
        config_hash: meta.config_hash.clone(),
    }
}

pub fn write_uvf<W: Write>(w: &mut W, volume: &Volume, meta: &Metadata) -> Result<(), FormatError> {
    let header = header_for(volume, meta);
    w.write_all(&UVF_MAGIC)?;
    let line = serde_json::to_string(&header)
        .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(header.element_count() * header.element_size());
    match volume {
        Volume::Scalar(s) => put_f64(&mut payload, s.values()),
        Volume::Prob(p) => put_f64(&mut payload, p.values()),
        Volume::Label(l) => {
            for &x in l.labels() {
                payload.extend_from_slice(&(x as i32).to_le_bytes());
            }
        }
        Volume::Stack(s) => {
            for pass in s.passes() {
                put_f64(&mut payload, pass.values());
            }
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

fn put_f64(out: &mut Vec<u8>, values: &[f64]) {
    for &x in values {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<UvfHeader, FormatError> {
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic).map_err(|_| FormatError::BadMagic)?;
    if magic != UVF_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut line = Vec::new();
    r.take(MAX_HEADER as u64).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(FormatError::MalformedHeader(
            "header line is not newline-terminated".into(),
        ));
    }
    line.pop();
    let text = std::str::from_utf8(&line)
        .map_err(|_| FormatError::MalformedHeader("header is not UTF-8".into()))?;
    let header: UvfHeader =
        serde_json::from_str(text).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    let dtype_ok = match header.kind {
        VolumeKind::Label => header.dtype == Dtype::I32,
        _ => header.dtype == Dtype::F64,
    };
    if !dtype_ok {
        return Err(FormatError::MalformedHeader(format!(
            "dtype {:?} is not valid for kind {}",
            header.dtype,
            header.kind.as_str()
        )));
    }
    if header.kind == VolumeKind::Stack && header.passes.is_none() {
        return Err(FormatError::MalformedHeader(
            "stack header lacks `passes`".into(),
        ));
    }
    Ok(header)
}

pub fn read_uvf<R: BufRead>(r: &mut R) -> Result<(Volume, Metadata), FormatError> {
    let header = read_header(r)?;
    let shape = Shape::new(&header.dims)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = header.element_count() * header.element_size();
    if payload.len() != expected {
        return Err(FormatError::PayloadMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let volume = match header.kind {
        VolumeKind::Label => {
            let raw: Vec<i32> = payload
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Volume::Label(LabelVolume::from_i32(shape, header.classes, &raw)?)
        }
        kind => {
            let values = get_f64(&payload)?;
            match kind {
                VolumeKind::Scalar => Volume::Scalar(ScalarVolume::new(shape, values)?),
                VolumeKind::Prob => Volume::Prob(ProbVolume::new(shape, header.classes, values)?),
                _ => {
                    let per_pass = shape.voxel_count() * header.classes;
                    let passes = values
                        .chunks_exact(per_pass)
                        .map(|c| ProbVolume::new(shape.clone(), header.classes, c.to_vec()))
                        .collect::<Result<Vec<_>, _>>()?;
                    Volume::Stack(SampleStack::new(passes)?)
                }
            }
        }
    };
    let meta = Metadata {
        estimator: header.estimator,
        config_hash: header.config_hash,
    };
    Ok((volume, meta))
}

fn get_f64(payload: &[u8]) -> Result<Vec<f64>, FormatError> {
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(FormatError::NonFinite(i)),
        None => Ok(values),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> Volume {
        let shape = Shape::new(&[2, 3]).unwrap();
        Volume::Scalar(ScalarVolume::new(shape, vec![0.0, -1.5, 2.25, 1e-300, 7.0, 3.0]).unwrap())
    }

    fn encode(v: &Volume) -> Vec<u8> {
        let mut buf = Vec::new();
        write_uvf(&mut buf, v, &Metadata::default()).unwrap();
        buf
    }

    #[test]
    fn magic_is_sixteen_bytes() {
        assert_eq!(UVF_MAGIC.len(), 16);
        assert_eq!(&UVF_MAGIC[..10], b"UNCMAP-VOL");
        assert_eq!(UVF_MAGIC[15], 1);
    }

    #[test]
    fn header_line_layout() {
        let buf = encode(&scalar());
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let line = std::str::from_utf8(&buf[16..nl]).unwrap();
        assert_eq!(
            line,
            r#"{"kind":"scalar","dims":[2,3],"classes":1,"dtype":"f64"}"#
        );
        assert_eq!(buf.len() - nl - 1, 6 * 8);
    }

    #[test]
    fn declared_count_larger_than_payload_is_rejected() {
        let mut bytes = UVF_MAGIC.to_vec();
        bytes.extend_from_slice(br#"{"kind":"scalar","dims":[2,4],"classes":1,"dtype":"f64"}"#);
        bytes.push(b'\n');
        bytes.extend_from_slice(&[0u8; 4 * 8]);
        match read_uvf(&mut bytes.as_slice()) {
            Err(FormatError::PayloadMismatch { expected, actual }) => {
                assert_eq!((expected, actual), (64, 32));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut buf = encode(&scalar());
        buf.push(0);
        assert!(matches!(
            read_uvf(&mut buf.as_slice()),
            Err(FormatError::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_and_header_are_distinct_errors() {
        let mut buf = encode(&scalar());
        buf[0] = b'X';
        assert!(matches!(
            read_uvf(&mut buf.as_slice()),
            Err(FormatError::BadMagic)
        ));
        let mut bad = UVF_MAGIC.to_vec();
        bad.extend_from_slice(b"{not json\n");
        assert!(matches!(
            read_uvf(&mut bad.as_slice()),
            Err(FormatError::MalformedHeader(_))
        ));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let mut buf = encode(&scalar());
        let n = buf.len();
        buf[n - 8..].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(
            read_uvf(&mut buf.as_slice()),
            Err(FormatError::NonFinite(5))
        ));
    }

    #[test]
    fn label_with_wrong_dtype_is_malformed() {
        let mut bytes = UVF_MAGIC.to_vec();
        bytes.extend_from_slice(
            br#"{"kind":"label","dims":[1,1],"classes":2,"dtype":"f64"}"#,
        );
        bytes.push(b'\n');
        bytes.extend_from_slice(&0f64.to_le_bytes());
        assert!(matches!(
            read_uvf(&mut bytes.as_slice()),
            Err(FormatError::MalformedHeader(_))
        ));
    }

    #[test]
    fn metadata_survives() {
        let meta = Metadata {
            estimator: Some(serde_json::json!({"method": "entropy"})),
            config_hash: Some("abc".into()),
        };
        let mut buf = Vec::new();
        write_uvf(&mut buf, &scalar(), &meta).unwrap();
        let (v, m) = read_uvf(&mut buf.as_slice()).unwrap();
        assert_eq!(v, scalar());
        assert_eq!(m, meta);
    }
}
