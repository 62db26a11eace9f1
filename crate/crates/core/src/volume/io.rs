//! `<name>.vol.json` sidecar + `<name>.vol.raw` packed little-endian scalars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelVolume, MaskVolume, ScalarVolume, VolumeGeometry};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub fov_mm: [f64; 3],
    pub dtype: Dtype,
    pub byte_order: String,
    /// Declared label dictionary (label volumes only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

/// Resolves `path` (base name, `.vol.json` or `.vol.raw`) to the header/raw pair.
pub fn volume_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let s = path.as_ref().to_string_lossy().into_owned();
    let base = s
        .strip_suffix(".vol.json")
        .or_else(|| s.strip_suffix(".vol.raw"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{base}.vol.json")),
        PathBuf::from(format!("{base}.vol.raw")),
    )
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if header.byte_order != "little" {
        return Err(Error::Header {
            path: path.to_path_buf(),
            reason: format!("unsupported byte order `{}`", header.byte_order),
        });
    }
    VolumeGeometry::new(header.dims, header.fov_mm).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(header)
}

fn read_raw(header_path: &Path, raw_path: &Path) -> Result<(VolumeHeader, Vec<u8>)> {
    let header = read_header(header_path)?;
    let bytes = fs::read(raw_path).map_err(|e| Error::io(raw_path, e))?;
    let n = header.dims.iter().product::<usize>();
    let expected = n * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path: raw_path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((header, bytes))
}

fn write_pair(path: &Path, header: &VolumeHeader, bytes: &[u8]) -> Result<()> {
    let (hp, rp) = volume_paths(path);
    if let Some(parent) = hp.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let json = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&hp, json + "\n").map_err(|e| Error::io(&hp, e))?;
    fs::write(&rp, bytes).map_err(|e| Error::io(&rp, e))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let (hp, rp) = volume_paths(path);
    let (header, bytes) = read_raw(&hp, &rp)?;
    let size = header.dtype.size();
    let mut data = Vec::with_capacity(bytes.len() / size);
    for (i, chunk) in bytes.chunks_exact(size).enumerate() {
        let v = match header.dtype {
            Dtype::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
            Dtype::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            Dtype::U8 => chunk[0] as f64,
        };
        if !v.is_finite() {
            return Err(Error::NonFinite {
                path: rp,
                offset: i * size,
            });
        }
        data.push(v);
    }
    let geometry = VolumeGeometry::new(header.dims, header.fov_mm)?;
    Ok(ScalarVolume::from_vec_unchecked(geometry, data))
}

/// Writes as f64 so that a reload is bit-exact.
pub fn save_volume(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    let g = vol.geometry();
    let header = VolumeHeader {
        dims: g.dims,
        fov_mm: g.fov_mm,
        dtype: Dtype::F64,
        byte_order: "little".into(),
        labels: None,
    };
    let mut bytes = Vec::with_capacity(vol.data().len() * 8);
    for v in vol.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_pair(path.as_ref(), &header, &bytes)
}

pub fn save_mask(mask: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    let g = mask.geometry();
    let header = VolumeHeader {
        dims: g.dims,
        fov_mm: g.fov_mm,
        dtype: Dtype::U8,
        byte_order: "little".into(),
        labels: None,
    };
    let bytes: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
    write_pair(path.as_ref(), &header, &bytes)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let (hp, rp) = volume_paths(path);
    let (header, bytes) = read_raw(&hp, &rp)?;
    if header.dtype != Dtype::U8 {
        return Err(Error::Header {
            path: hp,
            reason: "mask volumes must be u8".into(),
        });
    }
    let geometry = VolumeGeometry::new(header.dims, header.fov_mm)?;
    MaskVolume::new(geometry, bytes.into_iter().map(|b| b != 0).collect())
}

pub fn save_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let g = labels.geometry();
    let header = VolumeHeader {
        dims: g.dims,
        fov_mm: g.fov_mm,
        dtype: Dtype::U8,
        byte_order: "little".into(),
        labels: Some(labels.labels().to_vec()),
    };
    write_pair(path.as_ref(), &header, labels.data())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let (hp, rp) = volume_paths(path);
    let (header, bytes) = read_raw(&hp, &rp)?;
    if header.dtype != Dtype::U8 {
        return Err(Error::Header {
            path: hp,
            reason: "label volumes must be u8".into(),
        });
    }
    let geometry = VolumeGeometry::new(header.dims, header.fov_mm)?;
    match header.labels {
        Some(dict) => LabelVolume::new(geometry, bytes, dict),
        None => LabelVolume::from_data(geometry, bytes),
    }
}
