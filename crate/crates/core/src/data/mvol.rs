//! MVOL on-disk format.
//!
//! ```text
//! <root>/dataset.json
//! <root>/<case_id>/header.json
//! <root>/<case_id>/channel_0.raw      f32 little-endian, x fastest
//! <root>/<case_id>/channel_1.raw
//! <root>/<case_id>/segmentation.raw   u8 (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Volume, CHANNEL_NAMES};
use crate::nn::{voxel_count, Dims};

pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    case_id: String,
    patient_id: String,
    shape: Dims,
    spacing: [f64; 3],
    channel_names: Vec<String>,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub patient_id: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub num_cases: usize,
    pub patients: Vec<String>,
    pub cases: Vec<CaseEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> DataError + '_ {
    move |source| DataError::Json {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<(), DataError> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected * 4 {
        return Err(DataError::Format {
            path: path.display().to_string(),
            message: format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_u8(path: &Path, expected: usize) -> Result<Vec<u8>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected {
        return Err(DataError::Format {
            path: path.display().to_string(),
            message: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok(bytes)
}

pub fn write_volume(dir: &Path, volume: &Volume) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let header = Header {
        case_id: volume.case_id.clone(),
        patient_id: volume.patient_id.clone(),
        shape: volume.dims,
        spacing: volume.spacing,
        channel_names: (0..volume.num_channels())
            .map(|c| {
                CHANNEL_NAMES
                    .get(c)
                    .map_or_else(|| format!("channel{c}"), |s| s.to_string())
            })
            .collect(),
        dtype: DTYPE.into(),
    };
    let hp = dir.join("header.json");
    let text = serde_json::to_string_pretty(&header).map_err(json_err(&hp))?;
    fs::write(&hp, text).map_err(io_err(&hp))?;
    for (c, ch) in volume.channels.iter().enumerate() {
        write_f32(&dir.join(format!("channel_{c}.raw")), ch)?;
    }
    let sp = dir.join("segmentation.raw");
    match &volume.segmentation {
        Some(seg) => fs::write(&sp, seg).map_err(io_err(&sp))?,
        None if sp.exists() => fs::remove_file(&sp).map_err(io_err(&sp))?,
        None => {}
    }
    Ok(())
}

pub fn read_volume(dir: &Path) -> Result<Volume, DataError> {
    let hp = dir.join("header.json");
    let text = fs::read_to_string(&hp).map_err(io_err(&hp))?;
    let header: Header = serde_json::from_str(&text).map_err(json_err(&hp))?;
    if header.dtype != DTYPE {
        return Err(DataError::Format {
            path: hp.display().to_string(),
            message: format!("unsupported dtype {}", header.dtype),
        });
    }
    let n = voxel_count(header.shape);
    let channels = (0..header.channel_names.len())
        .map(|c| read_f32(&dir.join(format!("channel_{c}.raw")), n))
        .collect::<Result<_, _>>()?;
    let sp = dir.join("segmentation.raw");
    let segmentation = if sp.exists() { Some(read_u8(&sp, n)?) } else { None };
    Volume::new(
        header.case_id,
        header.patient_id,
        header.shape,
        header.spacing,
        channels,
        segmentation,
    )
}

pub fn write_dataset(root: &Path, volumes: &[Volume]) -> Result<DatasetIndex, DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut patients: Vec<String> = volumes.iter().map(|v| v.patient_id.clone()).collect();
    patients.sort();
    patients.dedup();
    let cases = volumes
        .iter()
        .map(|v| {
            write_volume(&root.join(&v.case_id), v)?;
            Ok(CaseEntry {
                case_id: v.case_id.clone(),
                patient_id: v.patient_id.clone(),
                path: v.case_id.clone(),
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let index = DatasetIndex {
        num_cases: cases.len(),
        patients,
        cases,
    };
    let ip = root.join("dataset.json");
    let text = serde_json::to_string_pretty(&index).map_err(json_err(&ip))?;
    fs::write(&ip, text).map_err(io_err(&ip))?;
    Ok(index)
}

pub fn read_index(root: &Path) -> Result<DatasetIndex, DataError> {
    let ip = root.join("dataset.json");
    let text = fs::read_to_string(&ip).map_err(io_err(&ip))?;
    serde_json::from_str(&text).map_err(json_err(&ip))
}

pub fn read_dataset(root: &Path) -> Result<Vec<Volume>, DataError> {
    read_index(root)?
        .cases
        .iter()
        .map(|c| read_volume(&case_dir(root, c)))
        .collect()
}

pub fn case_dir(root: &Path, entry: &CaseEntry) -> PathBuf {
    root.join(&entry.path)
}
