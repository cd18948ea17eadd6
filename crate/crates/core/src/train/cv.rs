//! K-fold cross-validation: train, predict the held-out fold, evaluate.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::fold::{train_fold, TrainOptions};
use super::TrainError;
use crate::data::{assign_folds, FoldAssignment, Volume};
use crate::inference::{predict_case, segment, InferenceSettings, Model};
use crate::metrics::{aggregate, evaluate_case, CaseMetrics, EvalReport};
use crate::plans::ResolvedConfiguration;

pub const DEFAULT_FOLDS: usize = 5;
pub const CV_REPORT: &str = "cv_report.json";

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub num_folds: usize,
    pub workers: usize,
    /// Per-fold training output goes to `<out_dir>/fold_<k>`.
    pub out_dir: Option<PathBuf>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            num_folds: DEFAULT_FOLDS,
            workers: 1,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub fold: usize,
    pub metrics: CaseMetrics,
    pub inference_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: FoldAssignment,
    /// Mean validation Dice of each fold, empty-vs-empty cases excluded.
    pub fold_dice: Vec<Option<f64>>,
    pub cases: Vec<CaseRecord>,
    /// Both aggregation conventions over every validation case of every fold.
    pub pooled: EvalReport,
}

impl CvResult {
    pub fn mean_dice_nnunet(&self) -> Option<f64> {
        self.pooled.mean_dice_nnunet
    }

    pub fn mean_dice_challenge(&self) -> f64 {
        self.pooled.mean_dice_challenge
    }
}

/// Trains one model per fold and evaluates it on that fold's held-out cases.
pub fn run_cross_validation(
    config: &ResolvedConfiguration,
    dataset: &[Volume],
    seed: u64,
    options: &CvOptions,
) -> Result<CvResult, TrainError> {
    let folds = assign_folds(dataset, options.num_folds, seed)?;
    let settings = InferenceSettings {
        patch_size: config.patch_size,
        step_fraction: config.inference_step_fraction,
        mirror_axes: &config.mirror_axes,
    };
    let mut cases = Vec::with_capacity(dataset.len());
    let mut fold_dice = Vec::with_capacity(options.num_folds);
    for fold in 0..options.num_folds {
        let train_opts = TrainOptions {
            out_dir: options.out_dir.as_ref().map(|d| d.join(format!("fold_{fold}"))),
            workers: options.workers,
        };
        let state = train_fold(config, dataset, &folds, fold, seed, &train_opts)?;
        let model = Model {
            id: format!("fold_{fold}"),
            network: state.network,
            normalization: state.normalization,
            configuration: Some(state.config),
        };
        let mut fold_cases = Vec::new();
        for v in dataset.iter().filter(|v| folds.fold_of_case[&v.case_id] == fold) {
            let gt = v
                .segmentation
                .as_ref()
                .ok_or_else(|| TrainError::Config(format!("validation case {} has no segmentation", v.case_id)))?;
            let start = Instant::now();
            let map = predict_case(std::slice::from_ref(&model), v, settings)?;
            let seconds = start.elapsed().as_secs_f64();
            let metrics = evaluate_case(&v.case_id, &segment(&map), gt, v.dims, v.spacing)?;
            fold_cases.push(metrics.clone());
            cases.push(CaseRecord {
                fold,
                metrics,
                inference_seconds: seconds,
            });
        }
        fold_dice.push(aggregate(&fold_cases).ok().and_then(|r| r.mean_dice_nnunet));
    }
    let all: Vec<CaseMetrics> = cases.iter().map(|c| c.metrics.clone()).collect();
    let pooled = aggregate(&all)?;
    let result = CvResult {
        folds,
        fold_dice,
        cases,
        pooled,
    };
    if let Some(dir) = &options.out_dir {
        let p = dir.join(CV_REPORT);
        let text = serde_json::to_string_pretty(&result).expect("result serializes");
        std::fs::write(&p, text + "\n").map_err(|e| TrainError::io(&p, e))?;
    }
    Ok(result)
}
