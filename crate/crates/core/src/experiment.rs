//! Batch-size / patch-size / encoder scaling grid over cross-validation runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Volume;
use crate::plans::{resolve_configuration, PlanFile, PlansError, ResolvedConfiguration};
use crate::topology::EncoderType;
use crate::train::{run_cross_validation, CvOptions};

pub const SCALING_CSV: &str = "scaling.csv";
pub const SCALING_PLOT: &str = "scaling_plot.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("experiment grid has no {0}")]
    EmptyGrid(&'static str),
    #[error(transparent)]
    Plans(#[from] PlansError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub configurations: Vec<String>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// One (configuration, seed) cell. A failed cell keeps its error and no Dice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub configuration: String,
    pub encoder: EncoderType,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub seed: u64,
    pub dice_nnunet: Option<f64>,
    pub dice_challenge: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub batch_size: usize,
    pub configuration: String,
    /// Pooled CV Dice (nnU-Net convention) of every successful seed.
    pub dice: Vec<f64>,
    pub mean_dice: Option<f64>,
}

/// One line of the plot: a fixed encoder and patch size over batch sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub encoder: EncoderType,
    pub patch_size: [usize; 3],
    pub points: Vec<PlotPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x: String,
    pub y: String,
    pub series: Vec<PlotSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn dice(&self, configuration: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.configuration == configuration && r.seed == seed)
            .and_then(|r| r.dice_nnunet)
    }

    pub fn plot_data(&self) -> PlotData {
        let mut series: BTreeMap<String, PlotSeries> = BTreeMap::new();
        for r in &self.rows {
            let name = format!("{}/{}", r.encoder, patch_label(r.patch_size));
            let s = series.entry(name.clone()).or_insert_with(|| PlotSeries {
                name,
                encoder: r.encoder,
                patch_size: r.patch_size,
                points: Vec::new(),
            });
            let idx = match s.points.iter().position(|p| p.configuration == r.configuration) {
                Some(i) => i,
                None => {
                    s.points.push(PlotPoint {
                        batch_size: r.batch_size,
                        configuration: r.configuration.clone(),
                        dice: Vec::new(),
                        mean_dice: None,
                    });
                    s.points.len() - 1
                }
            };
            if let Some(d) = r.dice_nnunet {
                s.points[idx].dice.push(d);
            }
        }
        let mut out: Vec<PlotSeries> = series.into_values().collect();
        for s in &mut out {
            s.points
                .sort_by(|a, b| (a.batch_size, &a.configuration).cmp(&(b.batch_size, &b.configuration)));
            for p in &mut s.points {
                p.mean_dice = (!p.dice.is_empty()).then(|| p.dice.iter().sum::<f64>() / p.dice.len() as f64);
            }
        }
        PlotData {
            x: "batch_size".into(),
            y: "pooled cross-validation Dice (nnU-Net convention)".into(),
            series: out,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "configuration",
            "encoder",
            "batch_size",
            "patch_size",
            "seed",
            "dice_nnunet",
            "dice_challenge",
            "seconds",
            "error",
        ])?;
        let opt = |v: Option<f64>| v.map(|d| d.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.configuration.clone(),
                r.encoder.to_string(),
                r.batch_size.to_string(),
                patch_label(r.patch_size),
                r.seed.to_string(),
                opt(r.dice_nnunet),
                opt(r.dice_challenge),
                format!("{:.1}", r.seconds),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(io(path))
    }

    fn write_outputs(&self, dir: &Path) -> Result<(), ExperimentError> {
        self.write_csv(&dir.join(SCALING_CSV))?;
        let p = dir.join(SCALING_PLOT);
        let text = serde_json::to_string_pretty(&self.plot_data()).expect("plot data serializes");
        std::fs::write(&p, text + "\n").map_err(io(&p))
    }
}

fn patch_label(p: [usize; 3]) -> String {
    format!("{}x{}x{}", p[0], p[1], p[2])
}

/// Runs cross-validation for every configuration and seed in the grid.
///
/// Names are resolved up front so a typo fails before any training. The CSV
/// and plot file are rewritten after each cell, so an interrupted run keeps
/// its finished cells.
pub fn run_scaling_experiment(
    plan: &PlanFile,
    grid: &ExperimentGrid,
    dataset: &[Volume],
    num_folds: usize,
    workers: usize,
) -> Result<ExperimentReport, ExperimentError> {
    if grid.configurations.is_empty() {
        return Err(ExperimentError::EmptyGrid("configurations"));
    }
    if grid.seeds.is_empty() {
        return Err(ExperimentError::EmptyGrid("seeds"));
    }
    let configs: Vec<(String, ResolvedConfiguration)> = grid
        .configurations
        .iter()
        .map(|n| Ok((n.clone(), resolve_configuration(plan, n)?)))
        .collect::<Result<_, PlansError>>()?;
    std::fs::create_dir_all(&grid.out_dir).map_err(io(&grid.out_dir))?;
    let mut report = ExperimentReport { rows: Vec::new() };
    for (name, cfg) in &configs {
        for &seed in &grid.seeds {
            let opts = CvOptions {
                num_folds,
                workers,
                out_dir: Some(grid.out_dir.join(name).join(format!("seed_{seed}"))),
            };
            let start = Instant::now();
            let outcome = opts
                .out_dir
                .as_ref()
                .map(|d| std::fs::create_dir_all(d).map_err(|e| e.to_string()))
                .transpose()
                .and_then(|_| run_cross_validation(cfg, dataset, seed, &opts).map_err(|e| e.to_string()));
            let (nnunet, challenge, error) = match outcome {
                Ok(cv) => (cv.mean_dice_nnunet(), Some(cv.mean_dice_challenge()), None),
                Err(e) => (None, None, Some(e)),
            };
            report.rows.push(ExperimentRow {
                configuration: name.clone(),
                encoder: cfg.encoder_type,
                batch_size: cfg.batch_size,
                patch_size: cfg.patch_size,
                seed,
                dice_nnunet: nnunet,
                dice_challenge: challenge,
                seconds: start.elapsed().as_secs_f64(),
                error,
            });
            report.write_outputs(&grid.out_dir)?;
        }
    }
    Ok(report)
}
