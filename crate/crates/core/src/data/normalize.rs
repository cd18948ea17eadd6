//! "CT" intensity scheme: clip to foreground percentiles, then z-score with
//! the foreground mean/std of the training split.

use serde::{Deserialize, Serialize};

use super::{DataError, Volume};

pub const STD_EPSILON: f64 = 1e-8;
pub const LOWER_PERCENTILE: f64 = 0.5;
pub const UPPER_PERCENTILE: f64 = 99.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub clip_lower: f64,
    pub clip_upper: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub channels: Vec<ChannelStats>,
}

/// Linear-interpolation percentile of an ascending slice (`p` in [0, 100]).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty set");
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn channel_stats(mut values: Vec<f64>) -> ChannelStats {
    values.sort_by(f64::total_cmp);
    let clip_lower = percentile(&values, LOWER_PERCENTILE);
    let clip_upper = percentile(&values, UPPER_PERCENTILE);
    let mut inside: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| (clip_lower..=clip_upper).contains(v))
        .collect();
    // Two foreground voxels can both sit outside the interpolated bounds.
    if inside.is_empty() {
        inside = values.iter().map(|v| v.clamp(clip_lower, clip_upper)).collect();
    }
    let n = inside.len() as f64;
    let mean = inside.iter().sum::<f64>() / n;
    let var = inside.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ChannelStats {
        clip_lower,
        clip_upper,
        mean,
        std: var.sqrt().max(STD_EPSILON),
    }
}

fn pooled_stats<'a>(
    volumes: &[&'a Volume],
    select: impl Fn(&'a Volume) -> Vec<usize>,
) -> Result<NormalizationStats, DataError> {
    let picks: Vec<Vec<usize>> = volumes.iter().map(|v| select(v)).collect();
    if picks.iter().all(Vec::is_empty) {
        return Err(DataError::NoForeground);
    }
    let num_channels = volumes[0].num_channels();
    let channels = (0..num_channels)
        .map(|c| {
            let values = volumes
                .iter()
                .zip(&picks)
                .flat_map(|(v, idx)| idx.iter().map(move |&i| v.channels[c][i] as f64))
                .collect();
            channel_stats(values)
        })
        .collect();
    Ok(NormalizationStats { channels })
}

/// Statistics over the pooled foreground voxels of the training volumes.
pub fn compute_normalization_stats(training: &[&Volume]) -> Result<NormalizationStats, DataError> {
    pooled_stats(training, Volume::foreground_indices)
}

/// Fallback for splits without any lesion voxels: pool every voxel.
pub fn compute_whole_volume_stats(training: &[&Volume]) -> Result<NormalizationStats, DataError> {
    pooled_stats(training, |v| (0..v.voxels()).collect())
}

impl ChannelStats {
    pub fn apply(&self, v: f32) -> f32 {
        ((v as f64).clamp(self.clip_lower, self.clip_upper) - self.mean) as f32 / self.std as f32
    }
}

pub fn normalize(volume: &Volume, stats: &NormalizationStats) -> Volume {
    assert_eq!(volume.num_channels(), stats.channels.len(), "channel count mismatch");
    let channels = volume
        .channels
        .iter()
        .zip(&stats.channels)
        .map(|(ch, s)| ch.iter().map(|&v| s.apply(v)).collect())
        .collect();
    Volume {
        channels,
        ..volume.clone()
    }
}
