//! Two-channel lesion volumes: synthetic generation, CT-scheme intensity
//! normalization, patient-stratified folds, patch sampling and on-disk I/O.

mod folds;
mod mvol;
mod normalize;
mod sampling;
mod synthetic;

pub use folds::{assign_folds, assign_folds_by_patient, FoldAssignment};
pub use mvol::{
    case_dir, read_dataset, read_f32, read_index, read_u8, read_volume, write_dataset, write_f32, write_volume,
    CaseEntry, DatasetIndex,
};
pub use normalize::{
    compute_normalization_stats, compute_whole_volume_stats, normalize, percentile, ChannelStats, NormalizationStats,
    STD_EPSILON,
};
pub use sampling::{crop_labels, sample_patch, Patch, PatchSampler};
pub use synthetic::{generate_synthetic_dataset, CasesPerPatient, SyntheticSpec, EMPTY_CASE_PROBABILITY};

use thiserror::Error;

use crate::nn::{voxel_count, Dims, Tensor};

pub const CHANNEL_NAMES: [&str; 2] = ["CT", "PET"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("volume {case_id}: {message}")]
    Shape { case_id: String, message: String },
    #[error("training split has no foreground voxels; fall back to whole-volume statistics")]
    NoForeground,
    #[error("{patients} patients cannot fill {folds} folds")]
    TooFewPatients { patients: usize, folds: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed volume file {path}: {message}")]
    Format { path: String, message: String },
}

/// One case: two co-registered intensity channels and an optional binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub case_id: String,
    pub patient_id: String,
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub channels: Vec<Vec<f32>>,
    pub segmentation: Option<Vec<u8>>,
}

impl Volume {
    pub fn new(
        case_id: impl Into<String>,
        patient_id: impl Into<String>,
        dims: Dims,
        spacing: [f64; 3],
        channels: Vec<Vec<f32>>,
        segmentation: Option<Vec<u8>>,
    ) -> Result<Self, DataError> {
        let v = Self {
            case_id: case_id.into(),
            patient_id: patient_id.into(),
            dims,
            spacing,
            channels,
            segmentation,
        };
        v.check()?;
        Ok(v)
    }

    pub fn check(&self) -> Result<(), DataError> {
        let fail = |message: String| {
            Err(DataError::Shape {
                case_id: self.case_id.clone(),
                message,
            })
        };
        let n = self.voxels();
        if n == 0 {
            return fail("empty shape".into());
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return fail(format!("spacing {:?} must be positive", self.spacing));
        }
        if self.channels.is_empty() || self.channels.iter().any(|c| c.len() != n) {
            return fail(format!("every channel needs {n} voxels"));
        }
        if let Some(seg) = &self.segmentation {
            if seg.len() != n {
                return fail(format!("segmentation needs {n} voxels"));
            }
            if seg.iter().any(|&l| l > 1) {
                return fail("segmentation labels must be 0 or 1".into());
            }
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Flat indices (x fastest) of foreground voxels.
    pub fn foreground_indices(&self) -> Vec<usize> {
        self.segmentation
            .as_ref()
            .map(|s| s.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i).collect())
            .unwrap_or_default()
    }

    pub fn has_foreground(&self) -> bool {
        self.segmentation.as_ref().is_some_and(|s| s.contains(&1))
    }

    /// Intensities as a network input tensor.
    pub fn image(&self) -> Tensor<f32> {
        Tensor::from_vec(self.num_channels(), self.dims, self.channels.concat())
    }
}

/// Flat index -> `[x, y, z]`.
pub fn unravel(i: usize, dims: Dims) -> [usize; 3] {
    [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
}
