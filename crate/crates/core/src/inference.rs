//! Sliding-window prediction of whole volumes.
//!
//! Volumes smaller than the patch are zero-padded symmetrically (odd voxel on
//! the high side), tiled, and every tile's softmax is accumulated with a
//! Gaussian weight. Mirror test-time augmentation averages the softmax over
//! every subset of the requested axes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{normalize, write_f32, DataError, NormalizationStats, Volume};
use crate::nn::{voxel_count, Checkpoint, CheckpointError, Dims, NetworkError, SegmentationNetwork, Tensor};
use crate::plans::ResolvedConfiguration;

/// Class probabilities, one channel per class.
pub type ProbabilityMap = Tensor<f32>;

/// Tiles evaluated together before their results are merged in order.
const TILE_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite network output in tile at {corner:?}")]
    NonFinite { corner: [usize; 3] },
    #[error("probability maps differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, Dims), (usize, Dims)),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint {path} lacks normalization statistics")]
    MissingNormalization { path: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> InferenceError + '_ {
    move |source| InferenceError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub patch_size: Dims,
    pub positions: Vec<[usize; 3]>,
    pub step_fraction: f64,
}

/// Tile corners along one axis of length `image` (already >= `patch`).
pub fn axis_positions(image: usize, patch: usize, step_fraction: f64) -> Vec<usize> {
    if image <= patch {
        return vec![0];
    }
    let span = (image - patch) as f64;
    let target = patch as f64 * step_fraction;
    let n = (span / target).ceil() as usize + 1;
    let spacing = span / (n - 1) as f64;
    let mut out: Vec<usize> = (0..n).map(|i| (i as f64 * spacing).round() as usize).collect();
    out.dedup();
    out
}

/// Tile corners for an image padded to at least `patch` on every axis.
pub fn compute_tiling(image: Dims, patch: Dims, step_fraction: f64) -> Result<TilingPlan, InferenceError> {
    if !(step_fraction > 0.0 && step_fraction <= 1.0) {
        return Err(InferenceError::InvalidParameter(format!(
            "step fraction {step_fraction} outside (0, 1]"
        )));
    }
    if patch.contains(&0) {
        return Err(InferenceError::InvalidParameter("patch size must be positive".into()));
    }
    let axes: [Vec<usize>; 3] =
        std::array::from_fn(|a| axis_positions(image[a].max(patch[a]), patch[a], step_fraction));
    let mut positions = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                positions.push([x, y, z]);
            }
        }
    }
    Ok(TilingPlan {
        patch_size: patch,
        positions,
        step_fraction,
    })
}

/// Separable Gaussian (sigma = patch/8) peaking at 1, floored at its smallest positive value.
pub fn gaussian_importance_map(patch: Dims) -> Vec<f64> {
    let axis: [Vec<f64>; 3] = std::array::from_fn(|a| {
        let c = (patch[a] as f64 - 1.0) / 2.0;
        let sigma = patch[a] as f64 / 8.0;
        (0..patch[a])
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect()
    });
    let mut map = Vec::with_capacity(voxel_count(patch));
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            for x in 0..patch[0] {
                map.push(axis[0][x] * axis[1][y] * axis[2][z]);
            }
        }
    }
    let max = map.iter().copied().fold(0.0, f64::max);
    map.iter_mut().for_each(|v| *v /= max);
    let floor = map.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    map.iter_mut().for_each(|v| *v = v.max(floor));
    map
}

/// Anything that maps a patch to per-class logits of the same spatial shape.
pub trait PatchPredictor: Sync {
    fn predict_logits(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>, InferenceError>;
}

impl PatchPredictor for SegmentationNetwork<f32> {
    fn predict_logits(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>, InferenceError> {
        Ok(self.forward_primary(patch)?)
    }
}

/// Voxelwise softmax over channels, computed in f64.
pub fn softmax(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    let c = logits.channels();
    let n = logits.voxels();
    let mut out = vec![vec![0.0; n]; c];
    for v in 0..n {
        let m = (0..c)
            .map(|k| logits.channel(k)[v] as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for k in 0..c {
            let e = (logits.channel(k)[v] as f64 - m).exp();
            out[k][v] = e;
            s += e;
        }
        for row in out.iter_mut() {
            row[v] /= s;
        }
    }
    out
}

/// Every subset of `axes`, the empty one first.
pub fn mirror_subsets(axes: &[usize]) -> Vec<Vec<usize>> {
    (0..1usize << axes.len())
        .map(|m| (0..axes.len()).filter(|b| m >> b & 1 == 1).map(|b| axes[b]).collect())
        .collect()
}

fn flip_rows(rows: Vec<Vec<f64>>, dims: Dims, axes: &[usize]) -> Vec<Vec<f64>> {
    if axes.is_empty() {
        return rows;
    }
    let c = rows.len();
    let t = Tensor::<f64>::from_vec(c, dims, rows.concat()).flip(axes);
    t.data().chunks(voxel_count(dims)).map(<[f64]>::to_vec).collect()
}

fn predict_tile<P: PatchPredictor + ?Sized>(
    predictor: &P,
    tile: &Tensor<f32>,
    corner: [usize; 3],
    subsets: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>, InferenceError> {
    let dims = tile.dims();
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for s in subsets {
        let logits = predictor.predict_logits(&tile.flip(s))?;
        if logits.dims() != dims {
            return Err(InferenceError::InvalidParameter(format!(
                "predictor returned {:?} for a {:?} patch",
                logits.dims(),
                dims
            )));
        }
        if !logits.is_finite() {
            return Err(InferenceError::NonFinite { corner });
        }
        let probs = flip_rows(softmax(&logits), dims, s);
        match &mut acc {
            None => acc = Some(probs),
            Some(a) => {
                for (ar, pr) in a.iter_mut().zip(&probs) {
                    ar.iter_mut().zip(pr).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let k = subsets.len() as f64;
    let mut acc = acc.expect("at least the identity subset");
    acc.iter_mut().flatten().for_each(|v| *v /= k);
    Ok(acc)
}

/// Gaussian-weighted sliding-window probabilities for a normalised image.
pub fn predict_volume<P: PatchPredictor + ?Sized>(
    predictor: &P,
    image: &Tensor<f32>,
    patch: Dims,
    step_fraction: f64,
    mirror_axes: &[usize],
) -> Result<ProbabilityMap, InferenceError> {
    if let Some(&a) = mirror_axes.iter().find(|&&a| a > 2) {
        return Err(InferenceError::InvalidParameter(format!(
            "mirror axis {a} out of range"
        )));
    }
    let mut axes = mirror_axes.to_vec();
    axes.sort_unstable();
    axes.dedup();
    let dims = image.dims();
    let padded: Dims = std::array::from_fn(|a| dims[a].max(patch[a]));
    let pad_lo: [isize; 3] = std::array::from_fn(|a| ((padded[a] - dims[a]) / 2) as isize);
    let plan = compute_tiling(padded, patch, step_fraction)?;
    let weights = gaussian_importance_map(patch);
    let subsets = mirror_subsets(&axes);
    let n = voxel_count(padded);
    let mut classes = 0;
    let mut acc: Vec<Vec<f64>> = Vec::new();
    let mut wsum = vec![0.0f64; n];
    for chunk in plan.positions.chunks(TILE_CHUNK) {
        let results = chunk
            .par_iter()
            .map(|&corner| {
                let origin: [isize; 3] = std::array::from_fn(|a| corner[a] as isize - pad_lo[a]);
                predict_tile(predictor, &image.crop(origin, patch), corner, &subsets)
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (&corner, probs) in chunk.iter().zip(results) {
            if acc.is_empty() {
                classes = probs.len();
                acc = vec![vec![0.0; n]; classes];
            }
            let mut t = 0;
            for z in 0..patch[2] {
                for y in 0..patch[1] {
                    let row = ((corner[2] + z) * padded[1] + corner[1] + y) * padded[0] + corner[0];
                    for x in 0..patch[0] {
                        let w = weights[t];
                        wsum[row + x] += w;
                        for k in 0..classes {
                            acc[k][row + x] += w * probs[k][t];
                        }
                        t += 1;
                    }
                }
            }
        }
    }
    let mut data = Vec::with_capacity(classes * voxel_count(dims));
    for row in &acc {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let base = ((z as isize + pad_lo[2]) as usize * padded[1] + (y as isize + pad_lo[1]) as usize)
                    * padded[0]
                    + pad_lo[0] as usize;
                for x in 0..dims[0] {
                    data.push((row[base + x] / wsum[base + x]) as f32);
                }
            }
        }
    }
    Ok(Tensor::from_vec(classes, dims, data))
}

/// Voxelwise mean of probability maps (accumulated in f64).
pub fn ensemble(maps: &[ProbabilityMap]) -> Result<ProbabilityMap, InferenceError> {
    let first = maps
        .first()
        .ok_or_else(|| InferenceError::InvalidParameter("ensemble of zero maps".into()))?;
    let key = |m: &ProbabilityMap| (m.channels(), m.dims());
    if let Some(m) = maps.iter().find(|m| key(m) != key(first)) {
        return Err(InferenceError::ShapeMismatch(key(first), key(m)));
    }
    let mut acc = vec![0.0f64; first.data().len()];
    for m in maps {
        acc.iter_mut().zip(m.data()).for_each(|(a, &v)| *a += v as f64);
    }
    let k = maps.len() as f64;
    Ok(Tensor::from_vec(
        first.channels(),
        first.dims(),
        acc.into_iter().map(|v| (v / k) as f32).collect(),
    ))
}

/// Voxelwise argmax; ties go to the lower class index.
pub fn segment(map: &ProbabilityMap) -> Vec<u8> {
    (0..map.voxels())
        .map(|v| {
            let mut best = 0;
            for k in 1..map.channels() {
                if map.channel(k)[v] > map.channel(best)[v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// A trained network together with the intensity statistics it was trained on.
#[derive(Debug, Clone)]
pub struct Model {
    pub id: String,
    pub network: SegmentationNetwork<f32>,
    pub normalization: NormalizationStats,
    /// Training configuration, when the checkpoint records one.
    pub configuration: Option<ResolvedConfiguration>,
}

impl Model {
    pub fn from_checkpoint(id: impl Into<String>, ckpt: &Checkpoint) -> Result<Self, InferenceError> {
        let id = id.into();
        let normalization = ckpt
            .metadata
            .get("normalization")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| InferenceError::MissingNormalization { path: id.clone() })?;
        let configuration = ckpt
            .metadata
            .get("config")
            .and_then(|v| serde_json::from_value(v.clone()).ok());
        Ok(Self {
            network: ckpt.restore_network()?,
            normalization,
            configuration,
            id,
        })
    }

    pub fn load(path: &Path) -> Result<Self, InferenceError> {
        Self::from_checkpoint(path.display().to_string(), &Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceSettings<'a> {
    pub patch_size: Dims,
    pub step_fraction: f64,
    pub mirror_axes: &'a [usize],
}

/// Ensemble prediction for one raw (unnormalised) case; each model sees the
/// case normalised with its own statistics.
pub fn predict_case(
    models: &[Model],
    volume: &Volume,
    settings: InferenceSettings,
) -> Result<ProbabilityMap, InferenceError> {
    let maps = models
        .iter()
        .map(|m| {
            let image = normalize(volume, &m.normalization).image();
            predict_volume(
                &m.network,
                &image,
                settings.patch_size,
                settings.step_fraction,
                settings.mirror_axes,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    ensemble(&maps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCase {
    pub case_id: String,
    pub shape: Dims,
    pub spacing: [f64; 3],
    pub seconds: f64,
}

/// Contents of `prediction.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub configuration: String,
    pub checkpoints: Vec<String>,
    pub step_fraction: f64,
    pub mirror_axes: Vec<usize>,
    pub num_classes: usize,
    pub cases: Vec<PredictionCase>,
}

pub const PREDICTION_JSON: &str = "prediction.json";
pub const PROBABILITIES_RAW: &str = "probabilities.raw";
pub const SEGMENTATION_RAW: &str = "segmentation.raw";

/// Writes `<dir>/<case_id>/{probabilities.raw, segmentation.raw}`.
pub fn write_case_prediction(dir: &Path, case_id: &str, map: &ProbabilityMap) -> Result<PathBuf, InferenceError> {
    let case_dir = dir.join(case_id);
    fs::create_dir_all(&case_dir).map_err(io_err(&case_dir))?;
    write_f32(&case_dir.join(PROBABILITIES_RAW), map.data())?;
    let sp = case_dir.join(SEGMENTATION_RAW);
    fs::write(&sp, segment(map)).map_err(io_err(&sp))?;
    Ok(case_dir)
}

pub fn write_prediction_record(dir: &Path, record: &PredictionRecord) -> Result<(), InferenceError> {
    let p = dir.join(PREDICTION_JSON);
    let text = serde_json::to_string_pretty(record).expect("record serializes");
    fs::write(&p, text + "\n").map_err(io_err(&p))
}

pub fn read_prediction_record(dir: &Path) -> Result<PredictionRecord, InferenceError> {
    let p = dir.join(PREDICTION_JSON);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    serde_json::from_str(&text).map_err(|e| InferenceError::Io {
        path: p.display().to_string(),
        source: std::io::Error::other(e),
    })
}

/// Predicts every case, writing per-case outputs and `prediction.json` under `dir`.
pub fn predict_dataset(
    models: &[Model],
    volumes: &[Volume],
    settings: InferenceSettings,
    configuration: &str,
    dir: &Path,
) -> Result<PredictionRecord, InferenceError> {
    let mut cases = Vec::with_capacity(volumes.len());
    let mut num_classes = 0;
    for v in volumes {
        let start = Instant::now();
        let map = predict_case(models, v, settings)?;
        write_case_prediction(dir, &v.case_id, &map)?;
        num_classes = map.channels();
        cases.push(PredictionCase {
            case_id: v.case_id.clone(),
            shape: v.dims,
            spacing: v.spacing,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let record = PredictionRecord {
        configuration: configuration.to_string(),
        checkpoints: models.iter().map(|m| m.id.clone()).collect(),
        step_fraction: settings.step_fraction,
        mirror_axes: settings.mirror_axes.to_vec(),
        num_classes,
        cases,
    };
    write_prediction_record(dir, &record)?;
    Ok(record)
}

/// Reads back the label maps written by [`predict_dataset`], keyed by case id.
pub fn read_segmentations(dir: &Path) -> Result<BTreeMap<String, (PredictionCase, Vec<u8>)>, InferenceError> {
    let record = read_prediction_record(dir)?;
    record
        .cases
        .into_iter()
        .map(|c| {
            let p = dir.join(&c.case_id).join(SEGMENTATION_RAW);
            let seg = fs::read(&p).map_err(io_err(&p))?;
            if seg.len() != voxel_count(c.shape) {
                return Err(InferenceError::InvalidParameter(format!(
                    "{} holds {} voxels, expected {}",
                    p.display(),
                    seg.len(),
                    voxel_count(c.shape)
                )));
            }
            Ok((c.case_id.clone(), (c, seg)))
        })
        .collect()
}
