//! On-disk formats: the native UVF container (read/write) and NPY v1.0
//! (read, plus a small writer for scalar and label maps).

mod npy;
mod uvf;

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::volume::{LabelVolume, ProbVolume, SampleStack, ScalarVolume, VolumeError};

pub use npy::{read_npy, write_npy, NpyArray, NpyData};
pub use uvf::{read_uvf, write_uvf, Dtype, Metadata, UvfHeader, VolumeKind, UVF_MAGIC};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("unrecognised file signature (expected UVF or NPY magic)")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload size mismatch: header declares {expected} bytes, file holds {actual}")]
    PayloadMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("unsupported npy content: {0}")]
    UnsupportedNpy(String),
    #[error("expected a {expected} volume, found {found}")]
    WrongKind { expected: String, found: String },
    #[error("invalid volume: {0}")]
    Invalid(VolumeError),
}

impl From<VolumeError> for FormatError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::NonFinite(i) => FormatError::NonFinite(i),
            other => FormatError::Invalid(other),
        }
    }
}

/// Any of the volume kinds a UVF file can carry.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Prob(ProbVolume),
    Label(LabelVolume),
    Stack(SampleStack),
}

impl Volume {
    pub fn kind(&self) -> VolumeKind {
        match self {
            Volume::Scalar(_) => VolumeKind::Scalar,
            Volume::Prob(_) => VolumeKind::Prob,
            Volume::Label(_) => VolumeKind::Label,
            Volume::Stack(_) => VolumeKind::Stack,
        }
    }
}

enum Format {
    Uvf,
    Npy,
}

fn sniff(bytes: &[u8]) -> Result<Format, FormatError> {
    if bytes.starts_with(&UVF_MAGIC) {
        Ok(Format::Uvf)
    } else if bytes.starts_with(npy::NPY_MAGIC) {
        Ok(Format::Npy)
    } else {
        Err(FormatError::BadMagic)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>, FormatError> {
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Reads a UVF file.
pub fn read_volume(path: impl AsRef<Path>) -> Result<(Volume, Metadata), FormatError> {
    let bytes = read_all(path.as_ref())?;
    match sniff(&bytes)? {
        Format::Uvf => read_uvf(&mut bytes.as_slice()),
        Format::Npy => Err(FormatError::UnsupportedNpy(
            "npy files carry no volume kind; use a typed reader".into(),
        )),
    }
}

/// Writes `volume` as UVF via a temporary sibling and a rename.
pub fn write_volume(
    path: impl AsRef<Path>,
    volume: &Volume,
    meta: &Metadata,
) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_uvf(&mut buf, volume, meta)?;
    write_atomic(path.as_ref(), &buf)?;
    Ok(())
}

/// Writes `bytes` to `path` through `path.tmp` + rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

fn wrong_kind(expected: &str, found: VolumeKind) -> FormatError {
    FormatError::WrongKind {
        expected: expected.into(),
        found: found.as_str().into(),
    }
}

/// Reads a sample stack from UVF (`kind: "stack"`) or NPY of shape
/// `(T, C, H, W)` / `(T, C, D, H, W)`.
pub fn read_stack(path: impl AsRef<Path>) -> Result<SampleStack, FormatError> {
    let bytes = read_all(path.as_ref())?;
    match sniff(&bytes)? {
        Format::Uvf => match read_uvf(&mut bytes.as_slice())?.0 {
            Volume::Stack(s) => Ok(s),
            other => Err(wrong_kind("stack", other.kind())),
        },
        Format::Npy => npy::parse(&bytes)?.into_stack(),
    }
}

/// Reads a scalar map from UVF or a rank-2/3 float NPY.
pub fn read_scalar(path: impl AsRef<Path>) -> Result<(ScalarVolume, Metadata), FormatError> {
    let bytes = read_all(path.as_ref())?;
    match sniff(&bytes)? {
        Format::Uvf => match read_uvf(&mut bytes.as_slice())? {
            (Volume::Scalar(s), meta) => Ok((s, meta)),
            (other, _) => Err(wrong_kind("scalar", other.kind())),
        },
        Format::Npy => Ok((npy::parse(&bytes)?.into_scalar()?, Metadata::default())),
    }
}

/// Reads a probability volume from UVF or NPY of shape `(C, ...spatial)`.
pub fn read_prob(path: impl AsRef<Path>) -> Result<ProbVolume, FormatError> {
    let bytes = read_all(path.as_ref())?;
    match sniff(&bytes)? {
        Format::Uvf => match read_uvf(&mut bytes.as_slice())?.0 {
            Volume::Prob(p) => Ok(p),
            other => Err(wrong_kind("prob", other.kind())),
        },
        Format::Npy => npy::parse(&bytes)?.into_prob(),
    }
}

/// Reads labels from UVF or a rank-2/3 `<i4` NPY. NPY files carry no class
/// count, so `classes` is required there unless it can default to `max + 1`.
pub fn read_labels(
    path: impl AsRef<Path>,
    classes: Option<usize>,
) -> Result<LabelVolume, FormatError> {
    let bytes = read_all(path.as_ref())?;
    match sniff(&bytes)? {
        Format::Uvf => match read_uvf(&mut bytes.as_slice())?.0 {
            Volume::Label(l) => match classes {
                Some(c) if c != l.classes() => Ok(LabelVolume::new(
                    l.shape().clone(),
                    c,
                    l.labels().to_vec(),
                )?),
                _ => Ok(l),
            },
            other => Err(wrong_kind("label", other.kind())),
        },
        Format::Npy => npy::parse(&bytes)?.into_labels(classes),
    }
}
