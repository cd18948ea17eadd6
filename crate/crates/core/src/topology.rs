//! Network topology planning.
//!
//! Derives the per-stage U-Net layout from a patch size, and provides the
//! receptive-field and memory estimates used to reason about patch and batch
//! scaling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest patch extent the planner accepts on any axis.
pub const MIN_PATCH_AXIS: usize = 8;
/// Pooling stops once an axis would drop below this many voxels.
pub const MIN_FEATURE_MAP: usize = 4;
pub const MAX_DOWNSAMPLINGS: usize = 5;
pub const DEFAULT_FEATURES_BASE: usize = 32;
pub const DEFAULT_FEATURES_CAP: usize = 320;
pub const DEFAULT_KERNEL: [usize; 3] = [3, 3, 3];
/// Residual blocks per encoder stage; the last entry repeats for deeper networks.
pub const RESIDUAL_BLOCK_SCHEDULE: [usize; 6] = [1, 3, 4, 6, 6, 6];
pub const PLAIN_CONVS_PER_STAGE: usize = 2;
pub const DECODER_CONVS_PER_STAGE: usize = 2;

const BYTES_PER_VALUE: u64 = 4;
/// Activations, their gradients and workspace.
const ACTIVATION_COPIES: u64 = 3;
/// Parameters, gradients and two optimizer slots.
const PARAMETER_COPIES: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanningError {
    #[error("patch axis {axis} is {size} voxels; at least {MIN_PATCH_AXIS} required")]
    AxisTooSmall { axis: usize, size: usize },
    #[error("patch axis {axis} ({size}) is not divisible by its cumulative stride {stride}")]
    Indivisible { axis: usize, size: usize, stride: usize },
    #[error("spacing axis {axis} must be positive, got {value}")]
    BadSpacing { axis: usize, value: f64 },
    #[error("invalid topology: {0}")]
    InvalidDescriptor(String),
    #[error("budget of {budget} bytes is below the batch-1 footprint of {required} bytes")]
    Infeasible { budget: u64, required: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderType {
    Plain,
    Residual,
}

impl std::fmt::Display for EncoderType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderType::Plain => "plain",
            EncoderType::Residual => "residual",
        })
    }
}

/// Per-stage structure of an encoder/decoder segmentation network.
///
/// `blocks_per_stage_encoder` counts conv units for a plain encoder and
/// residual blocks (after the strided entry block) for a residual encoder.
/// The decoder has `num_stages - 1` stages, finest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyDescriptor {
    pub num_stages: usize,
    pub features_per_stage: Vec<usize>,
    pub strides_per_stage: Vec<[usize; 3]>,
    pub kernel_sizes: Vec<[usize; 3]>,
    pub encoder_type: EncoderType,
    pub blocks_per_stage_encoder: Vec<usize>,
    pub convs_per_stage_decoder: Vec<usize>,
    pub deep_supervision: bool,
    pub num_input_channels: usize,
    pub num_classes: usize,
}

impl TopologyDescriptor {
    pub fn validate(&self) -> Result<(), PlanningError> {
        let bad = |m: String| Err(PlanningError::InvalidDescriptor(m));
        let n = self.num_stages;
        if n < 2 {
            return bad(format!("num_stages must be >= 2, got {n}"));
        }
        if self.features_per_stage.len() != n
            || self.strides_per_stage.len() != n
            || self.kernel_sizes.len() != n
            || self.blocks_per_stage_encoder.len() != n
        {
            return bad("per-stage lists must all have num_stages entries".into());
        }
        if self.convs_per_stage_decoder.len() != n - 1 {
            return bad(format!("convs_per_stage_decoder needs {} entries", n - 1));
        }
        if self.strides_per_stage[0] != [1, 1, 1] {
            return bad("first stage stride must be (1,1,1)".into());
        }
        if self
            .features_per_stage
            .iter()
            .chain(&self.blocks_per_stage_encoder)
            .chain(&self.convs_per_stage_decoder)
            .any(|&v| v == 0)
        {
            return bad("feature, block and conv counts must be positive".into());
        }
        if self.strides_per_stage.iter().flatten().any(|&s| s == 0) {
            return bad("strides must be positive".into());
        }
        if self.kernel_sizes.iter().flatten().any(|&k| k % 2 == 0) {
            return bad("kernel sizes must be odd".into());
        }
        if self.num_input_channels == 0 || self.num_classes < 2 {
            return bad("need >= 1 input channel and >= 2 classes".into());
        }
        Ok(())
    }

    /// Product of strides up to and including each stage.
    pub fn cumulative_strides(&self) -> Vec<[usize; 3]> {
        let mut acc = [1, 1, 1];
        self.strides_per_stage
            .iter()
            .map(|s| {
                for a in 0..3 {
                    acc[a] *= s[a];
                }
                acc
            })
            .collect()
    }

    pub fn total_stride(&self) -> [usize; 3] {
        *self.cumulative_strides().last().expect("num_stages >= 2")
    }

    /// Checks that every stage's feature map has integer extent for `patch`.
    pub fn check_input(&self, patch: [usize; 3]) -> Result<(), PlanningError> {
        let total = self.total_stride();
        for a in 0..3 {
            if patch[a] == 0 || !patch[a].is_multiple_of(total[a]) {
                return Err(PlanningError::Indivisible {
                    axis: a,
                    size: patch[a],
                    stride: total[a],
                });
            }
        }
        Ok(())
    }

    pub fn stage_dims(&self, patch: [usize; 3]) -> Vec<[usize; 3]> {
        self.cumulative_strides()
            .iter()
            .map(|c| [patch[0] / c[0], patch[1] / c[1], patch[2] / c[2]])
            .collect()
    }

    /// Number of logits maps the network emits (one per resolution with deep supervision).
    pub fn num_outputs(&self) -> usize {
        if self.deep_supervision {
            self.num_stages
        } else {
            1
        }
    }

    /// Input channels of encoder stage `s`.
    pub fn stage_input_channels(&self, s: usize) -> usize {
        if s == 0 {
            self.num_input_channels
        } else {
            self.features_per_stage[s - 1]
        }
    }
}

/// Downsamplings per axis: the largest `d <= 5` with `4 * 2^d <= patch`.
pub fn downsamplings_per_axis(patch: [usize; 3]) -> [usize; 3] {
    let mut d = [0; 3];
    for a in 0..3 {
        while d[a] < MAX_DOWNSAMPLINGS && MIN_FEATURE_MAP << (d[a] + 1) <= patch[a] {
            d[a] += 1;
        }
    }
    d
}

pub fn derive_features(base: usize, cap: usize, num_stages: usize) -> Vec<usize> {
    (0..num_stages)
        .map(|s| base.saturating_mul(1usize << s.min(40)).min(cap))
        .collect()
}

pub fn default_encoder_blocks(encoder: EncoderType, num_stages: usize) -> Vec<usize> {
    match encoder {
        EncoderType::Plain => vec![PLAIN_CONVS_PER_STAGE; num_stages],
        EncoderType::Residual => (0..num_stages)
            .map(|s| RESIDUAL_BLOCK_SCHEDULE[s.min(RESIDUAL_BLOCK_SCHEDULE.len() - 1)])
            .collect(),
    }
}

/// Plan the default topology for a patch size.
pub fn plan_topology(
    patch_size: [usize; 3],
    spacing: [f64; 3],
    encoder_type: EncoderType,
    num_input_channels: usize,
    num_classes: usize,
) -> Result<TopologyDescriptor, PlanningError> {
    for (axis, &value) in spacing.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(PlanningError::BadSpacing { axis, value });
        }
    }
    for (axis, &size) in patch_size.iter().enumerate() {
        if size < MIN_PATCH_AXIS {
            return Err(PlanningError::AxisTooSmall { axis, size });
        }
    }
    let d = downsamplings_per_axis(patch_size);
    for a in 0..3 {
        let stride = 1usize << d[a];
        if !patch_size[a].is_multiple_of(stride) {
            return Err(PlanningError::Indivisible {
                axis: a,
                size: patch_size[a],
                stride,
            });
        }
    }
    let num_stages = d.iter().max().copied().unwrap_or(0) + 1;
    let strides_per_stage = (0..num_stages)
        .map(|s| {
            let mut st = [1; 3];
            for a in 0..3 {
                if s >= 1 && s <= d[a] {
                    st[a] = 2;
                }
            }
            st
        })
        .collect();
    let topo = TopologyDescriptor {
        num_stages,
        features_per_stage: derive_features(DEFAULT_FEATURES_BASE, DEFAULT_FEATURES_CAP, num_stages),
        strides_per_stage,
        kernel_sizes: vec![DEFAULT_KERNEL; num_stages],
        encoder_type,
        blocks_per_stage_encoder: default_encoder_blocks(encoder_type, num_stages),
        convs_per_stage_decoder: vec![DECODER_CONVS_PER_STAGE; num_stages - 1],
        deep_supervision: true,
        num_input_channels,
        num_classes,
    };
    topo.validate()?;
    Ok(topo)
}

/// `(kernel, stride)` of every convolution on the encoder's main path, in order.
pub fn encoder_conv_sequence(topo: &TopologyDescriptor) -> Vec<([usize; 3], [usize; 3])> {
    let mut seq = Vec::new();
    for s in 0..topo.num_stages {
        let k = topo.kernel_sizes[s];
        let stride = topo.strides_per_stage[s];
        let convs = match topo.encoder_type {
            EncoderType::Plain => topo.blocks_per_stage_encoder[s],
            EncoderType::Residual => 2 + 2 * topo.blocks_per_stage_encoder[s],
        };
        for i in 0..convs {
            seq.push((k, if i == 0 { stride } else { [1, 1, 1] }));
        }
    }
    seq
}

/// Receptive field of one bottleneck voxel, per axis.
pub fn compute_receptive_field(topo: &TopologyDescriptor) -> [usize; 3] {
    let mut rf = [1usize; 3];
    let mut jump = [1usize; 3];
    for (k, s) in encoder_conv_sequence(topo) {
        for a in 0..3 {
            rf[a] += (k[a] - 1) * jump[a];
            jump[a] *= s[a];
        }
    }
    rf
}

fn conv_params(cin: usize, cout: usize, k: [usize; 3]) -> usize {
    cout * cin * k.iter().product::<usize>() + cout
}

/// Exact learnable-parameter count of the network `network_factory` builds.
pub fn parameter_count(topo: &TopologyDescriptor) -> usize {
    let f = &topo.features_per_stage;
    let mut total = 0;
    for s in 0..topo.num_stages {
        let cin = topo.stage_input_channels(s);
        let k = topo.kernel_sizes[s];
        let c = f[s];
        match topo.encoder_type {
            EncoderType::Plain => {
                for i in 0..topo.blocks_per_stage_encoder[s] {
                    total += conv_params(if i == 0 { cin } else { c }, c, k) + 2 * c;
                }
            }
            EncoderType::Residual => {
                total += conv_params(cin, c, k) + 2 * c + conv_params(c, c, k);
                if cin != c || topo.strides_per_stage[s] != [1, 1, 1] {
                    total += conv_params(cin, c, [1, 1, 1]);
                }
                total += topo.blocks_per_stage_encoder[s] * (2 * (2 * c) + 2 * conv_params(c, c, k));
            }
        }
    }
    for s in 0..topo.num_stages - 1 {
        let up_k = topo.strides_per_stage[s + 1];
        total += conv_params(f[s + 1], f[s], up_k);
        let k = topo.kernel_sizes[s];
        for i in 0..topo.convs_per_stage_decoder[s] {
            total += conv_params(if i == 0 { 2 * f[s] } else { f[s] }, f[s], k) + 2 * f[s];
        }
    }
    for r in 0..topo.num_outputs() {
        total += conv_params(f[r], topo.num_classes, [1, 1, 1]);
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintEstimate {
    pub activation_voxels: u64,
    pub parameter_count: u64,
    pub training_bytes: u64,
}

/// Linear memory proxy used to rank candidate batch sizes.
pub fn estimate_footprint(
    topo: &TopologyDescriptor,
    patch_size: [usize; 3],
    batch_size: usize,
) -> Result<FootprintEstimate, PlanningError> {
    topo.validate()?;
    topo.check_input(patch_size)?;
    if batch_size == 0 {
        return Err(PlanningError::InvalidDescriptor("batch size must be positive".into()));
    }
    let dims = topo.stage_dims(patch_size);
    let vox = |s: usize| dims[s].iter().map(|&v| v as u64).product::<u64>();
    let f = &topo.features_per_stage;
    let encoder: u64 = (0..topo.num_stages).map(|s| f[s] as u64 * vox(s)).sum();
    let decoder: u64 = (0..topo.num_stages - 1).map(|s| f[s] as u64 * vox(s)).sum();
    let activation_voxels = encoder + decoder;
    let params = parameter_count(topo) as u64;
    Ok(FootprintEstimate {
        activation_voxels,
        parameter_count: params,
        training_bytes: batch_term(activation_voxels) * batch_size as u64 + fixed_term(params),
    })
}

fn batch_term(activation_voxels: u64) -> u64 {
    BYTES_PER_VALUE * activation_voxels * ACTIVATION_COPIES
}

fn fixed_term(params: u64) -> u64 {
    BYTES_PER_VALUE * params * PARAMETER_COPIES
}

/// Largest batch whose estimated training footprint fits in `budget_bytes`.
pub fn max_batch_size(
    topo: &TopologyDescriptor,
    patch_size: [usize; 3],
    budget_bytes: u64,
) -> Result<usize, PlanningError> {
    let one = estimate_footprint(topo, patch_size, 1)?;
    if budget_bytes < one.training_bytes {
        return Err(PlanningError::Infeasible {
            budget: budget_bytes,
            required: one.training_bytes,
        });
    }
    let per_sample = batch_term(one.activation_voxels);
    Ok(((budget_bytes - fixed_term(one.parameter_count)) / per_sample) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(p: usize, enc: EncoderType) -> TopologyDescriptor {
        plan_topology([p; 3], [1.0; 3], enc, 2, 2).unwrap()
    }

    #[test]
    fn default_128_has_six_stages_with_capped_features() {
        let t = plan(128, EncoderType::Plain);
        assert_eq!(downsamplings_per_axis([128; 3]), [5, 5, 5]);
        assert_eq!(t.num_stages, 6);
        assert_eq!(t.features_per_stage, vec![32, 64, 128, 256, 320, 320]);
        assert_eq!(t.strides_per_stage[0], [1, 1, 1]);
        assert!(t.strides_per_stage[1..].iter().all(|s| *s == [2, 2, 2]));
    }

    #[test]
    fn larger_patch_keeps_topology() {
        let a = plan(128, EncoderType::Residual);
        let b = plan(192, EncoderType::Residual);
        assert_eq!(a, b);
        assert_eq!(a.blocks_per_stage_encoder, vec![1, 3, 4, 6, 6, 6]);
    }

    #[test]
    fn minimal_patch() {
        let t = plan(8, EncoderType::Plain);
        assert_eq!(t.num_stages, 2);
        assert_eq!(t.strides_per_stage, vec![[1, 1, 1], [2, 2, 2]]);
    }

    #[test]
    fn anisotropic_patch_pools_short_axis_less() {
        let t = plan_topology([64, 16, 32], [1.0; 3], EncoderType::Plain, 1, 2).unwrap();
        assert_eq!(downsamplings_per_axis([64, 16, 32]), [4, 2, 3]);
        assert_eq!(t.num_stages, 5);
        assert_eq!(t.strides_per_stage[3], [2, 1, 2]);
        assert_eq!(t.strides_per_stage[4], [2, 1, 1]);
        assert_eq!(t.total_stride(), [16, 4, 8]);
    }

    #[test]
    fn residual_schedule_extends_past_six_stages() {
        assert_eq!(default_encoder_blocks(EncoderType::Residual, 2), vec![1, 3]);
        assert_eq!(
            default_encoder_blocks(EncoderType::Residual, 7),
            vec![1, 3, 4, 6, 6, 6, 6]
        );
    }

    #[test]
    fn planning_errors() {
        assert_eq!(
            plan_topology([7, 8, 8], [1.0; 3], EncoderType::Plain, 2, 2),
            Err(PlanningError::AxisTooSmall { axis: 0, size: 7 })
        );
        // 36 pools three times (4 * 8 <= 36) but 36 % 8 != 0
        assert_eq!(
            plan_topology([32, 36, 32], [1.0; 3], EncoderType::Plain, 2, 2),
            Err(PlanningError::Indivisible {
                axis: 1,
                size: 36,
                stride: 8
            })
        );
        assert!(matches!(
            plan_topology([32; 3], [1.0, 0.0, 1.0], EncoderType::Plain, 2, 2),
            Err(PlanningError::BadSpacing { axis: 1, .. })
        ));
    }

    #[test]
    fn receptive_field_recurrence_by_hand() {
        let two = plan(8, EncoderType::Plain);
        let single = TopologyDescriptor {
            num_stages: 1,
            strides_per_stage: vec![[1; 3]],
            kernel_sizes: vec![[3; 3]],
            blocks_per_stage_encoder: vec![2],
            ..two.clone()
        };
        // 1 + 2 + 2
        assert_eq!(compute_receptive_field(&single), [5, 5, 5]);
        // stage0: 5 (jump 1); strided conv: 7 (jump 2); last conv: 11
        assert_eq!(compute_receptive_field(&two), [11, 11, 11]);
        assert_eq!(compute_receptive_field(&plan(128, EncoderType::Plain)), [191; 3]);
    }

    #[test]
    fn footprint_linear_in_batch() {
        let t = plan(128, EncoderType::Residual);
        let a = estimate_footprint(&t, [128; 3], 2).unwrap();
        let b = estimate_footprint(&t, [128; 3], 80).unwrap();
        let fixed = 16 * a.parameter_count;
        assert_eq!((b.training_bytes - fixed) / (a.training_bytes - fixed), 40);
        assert_eq!((b.training_bytes - fixed) % (a.training_bytes - fixed), 0);
    }

    #[test]
    fn footprint_scales_with_patch_volume() {
        let t = plan(128, EncoderType::Plain);
        let a = estimate_footprint(&t, [128; 3], 1).unwrap();
        let b = estimate_footprint(&t, [192; 3], 1).unwrap();
        let ratio = b.activation_voxels as f64 / a.activation_voxels as f64;
        assert!((ratio - 3.375).abs() < 0.3375, "ratio {ratio}");
    }

    #[test]
    fn max_batch_boundary_and_infeasible() {
        let t = plan(32, EncoderType::Plain);
        let f5 = estimate_footprint(&t, [32; 3], 5).unwrap().training_bytes;
        assert_eq!(max_batch_size(&t, [32; 3], f5).unwrap(), 5);
        assert_eq!(max_batch_size(&t, [32; 3], f5 - 1).unwrap(), 4);
        let f1 = estimate_footprint(&t, [32; 3], 1).unwrap().training_bytes;
        assert!(matches!(
            max_batch_size(&t, [32; 3], f1 - 1),
            Err(PlanningError::Infeasible { .. })
        ));
    }
}
