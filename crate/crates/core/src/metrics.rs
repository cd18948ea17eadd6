//! Per-case Dice, false-positive / false-negative lesion volumes, and the two
//! aggregation conventions for cases whose ground truth is empty.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{voxel_count, Dims};

pub const CONVENTION_NOTE: &str = "mean_dice_challenge averages over all cases and scores an empty prediction on an empty ground truth as 0; mean_dice_nnunet excludes such cases (null if every case is excluded). Empty ground truth with a non-empty prediction scores 0 under both.";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: prediction has {pred} voxels, ground truth {gt}")]
    ShapeMismatch { pred: usize, gt: usize },
    #[error("cannot aggregate zero cases")]
    Empty,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn check_shapes(pred: &[u8], gt: &[u8]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; `None` when both masks are empty.
pub fn dice(pred: &[u8], gt: &[u8]) -> Result<Option<f64>, MetricsError> {
    check_shapes(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok((p + g > 0).then(|| 2.0 * inter as f64 / (p + g) as f64))
}

/// 26-connected component labels (0 = background, components numbered from 1
/// in scan order) and the component count.
pub fn label_components(mask: &[u8], dims: Dims) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), voxel_count(dims));
    let [dx, dy, dz] = dims;
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y, z) = (i % dx, (i / dx) % dy, i / (dx * dy));
            for nz in z.saturating_sub(1)..=(z + 1).min(dz - 1) {
                for ny in y.saturating_sub(1)..=(y + 1).min(dy - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(dx - 1) {
                        let j = (nz * dy + ny) * dx + nx;
                        if mask[j] != 0 && labels[j] == 0 {
                            labels[j] = count;
                            stack.push(j);
                        }
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Voxels of `a`'s components that share no voxel with `b`.
fn unmatched_voxels(a: &[u8], b: &[u8], dims: Dims) -> usize {
    let (labels, count) = label_components(a, dims);
    let mut size = vec![0usize; count + 1];
    let mut touched = vec![false; count + 1];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            size[l as usize] += 1;
            touched[l as usize] |= b[i] != 0;
        }
    }
    (1..=count).filter(|&c| !touched[c]).map(|c| size[c]).sum()
}

/// `(fp_ml, fn_ml)`: volume of predicted components with no ground-truth
/// overlap, and of ground-truth components with no predicted overlap.
pub fn fp_fn_volumes(pred: &[u8], gt: &[u8], dims: Dims, spacing: [f64; 3]) -> Result<(f64, f64), MetricsError> {
    check_shapes(pred, gt)?;
    if pred.len() != voxel_count(dims) {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.len(),
            gt: voxel_count(dims),
        });
    }
    let voxel_ml = spacing.iter().product::<f64>() / 1000.0;
    Ok((
        unmatched_voxels(pred, gt, dims) as f64 * voxel_ml,
        unmatched_voxels(gt, pred, dims) as f64 * voxel_ml,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// `None` when prediction and ground truth are both empty.
    pub dice: Option<f64>,
    pub fp_volume_ml: f64,
    pub fn_volume_ml: f64,
    pub gt_empty: bool,
    pub pred_empty: bool,
}

pub fn evaluate_case(
    case_id: &str,
    pred: &[u8],
    gt: &[u8],
    dims: Dims,
    spacing: [f64; 3],
) -> Result<CaseMetrics, MetricsError> {
    let d = dice(pred, gt)?;
    let (fp, fn_) = fp_fn_volumes(pred, gt, dims, spacing)?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dice: d,
        fp_volume_ml: fp,
        fn_volume_ml: fn_,
        gt_empty: gt.iter().all(|&v| v == 0),
        pred_empty: pred.iter().all(|&v| v == 0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub mean_dice_challenge: f64,
    /// `None` when every case is excluded.
    pub mean_dice_nnunet: Option<f64>,
    pub mean_fp_volume: f64,
    pub mean_fn_volume: f64,
    pub convention_note: String,
}

pub fn aggregate(cases: &[CaseMetrics]) -> Result<EvalReport, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = cases.len() as f64;
    let challenge = cases.iter().map(|c| c.dice.unwrap_or(0.0)).sum::<f64>() / n;
    let defined: Vec<f64> = cases.iter().filter_map(|c| c.dice).collect();
    let nnunet = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EvalReport {
        cases: cases.to_vec(),
        mean_dice_challenge: challenge,
        mean_dice_nnunet: nnunet,
        mean_fp_volume: cases.iter().map(|c| c.fp_volume_ml).sum::<f64>() / n,
        mean_fn_volume: cases.iter().map(|c| c.fn_volume_ml).sum::<f64>() / n,
        convention_note: CONVENTION_NOTE.to_string(),
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<(), MetricsError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// One row per case; an undefined Dice is an empty cell.
    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "case_id",
            "dice",
            "fp_volume_ml",
            "fn_volume_ml",
            "gt_empty",
            "pred_empty",
        ])?;
        for c in &self.cases {
            w.write_record([
                c.case_id.clone(),
                c.dice.map(|d| d.to_string()).unwrap_or_default(),
                c.fp_volume_ml.to_string(),
                c.fn_volume_ml.to_string(),
                c.gt_empty.to_string(),
                c.pred_empty.to_string(),
            ])?;
        }
        w.flush().map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
