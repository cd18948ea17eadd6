//! Deep-supervised soft Dice + cross-entropy.
//!
//! Per resolution `r`: `(1 - dice_r) + ce_r`, where `dice_r` is the
//! batch-pooled soft Dice of the foreground class (smoothing 1e-5 in numerator
//! and denominator) and `ce_r` the voxel-mean cross-entropy over the batch.
//! Resolutions are weighted by `2^-r`, normalised to sum to one.

use crate::nn::{voxel_count, Dims, Real, Tensor};

pub const DICE_SMOOTH: f64 = 1e-5;

pub fn deep_supervision_weights(outputs: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..outputs).map(|r| 0.5f64.powi(r as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Max-pools a binary label map by `factor` per axis (any foreground voxel in
/// a block makes the block foreground).
pub fn downsample_labels(labels: &[u8], dims: Dims, factor: [usize; 3]) -> Vec<u8> {
    if factor == [1, 1, 1] {
        return labels.to_vec();
    }
    let out: Dims = std::array::from_fn(|a| dims[a] / factor[a]);
    let mut y = vec![0u8; voxel_count(out)];
    for z in 0..dims[2] {
        let oz = z / factor[2];
        if oz >= out[2] {
            continue;
        }
        for yy in 0..dims[1] {
            let oy = yy / factor[1];
            if oy >= out[1] {
                continue;
            }
            let row = (z * dims[1] + yy) * dims[0];
            let orow = (oz * out[1] + oy) * out[0];
            for x in 0..out[0] * factor[0] {
                let v = labels[row + x];
                let o = &mut y[orow + x / factor[0]];
                *o = (*o).max(v);
            }
        }
    }
    y
}

/// Loss value and its gradient with respect to every logit tensor.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub value: f64,
    /// Per-resolution terms before weighting: `(1 - dice, ce)`.
    pub terms: Vec<(f64, f64)>,
    /// `[sample][resolution]`, shaped like the logits.
    pub grads: Vec<Vec<Tensor<T>>>,
}

/// Two-class softmax probability of class 1 from logits `(z0, z1)`.
#[inline]
fn prob1(z0: f64, z1: f64) -> f64 {
    1.0 / (1.0 + (z0 - z1).exp())
}

/// `-ln p_label` computed stably.
#[inline]
fn nll(z0: f64, z1: f64, label: u8) -> f64 {
    let (zy, zo) = if label == 1 { (z1, z0) } else { (z0, z1) };
    let m = zy.max(zo);
    m + ((zy - m).exp() + (zo - m).exp()).ln() - zy
}

/// `logits[sample][resolution]` are 2-channel tensors; `labels[sample][resolution]`
/// the matching binary maps.
pub fn training_loss<T: Real>(logits: &[Vec<Tensor<T>>], labels: &[Vec<Vec<u8>>], weights: &[f64]) -> LossOutput<T> {
    assert_eq!(logits.len(), labels.len(), "batch size mismatch");
    let outputs = weights.len();
    let mut grads: Vec<Vec<Tensor<T>>> = logits
        .iter()
        .map(|s| s.iter().map(|t| Tensor::zeros(t.channels(), t.dims())).collect())
        .collect();
    let mut value = 0.0;
    let mut terms = Vec::with_capacity(outputs);
    for r in 0..outputs {
        let total: usize = logits.iter().map(|s| s[r].voxels()).sum();
        let (mut inter, mut psum, mut ysum, mut ce) = (0.0, 0.0, 0.0, 0.0);
        for (s, lab) in logits.iter().zip(labels) {
            let t = &s[r];
            assert_eq!(t.channels(), 2, "binary segmentation expects 2 logit channels");
            let (z0, z1) = (t.channel(0), t.channel(1));
            for (v, &y) in lab[r].iter().enumerate() {
                let (a, b) = (z0[v].as_f64(), z1[v].as_f64());
                let p = prob1(a, b);
                inter += p * y as f64;
                psum += p;
                ysum += y as f64;
                ce += nll(a, b, y);
            }
        }
        let n = total as f64;
        ce /= n;
        let denom = psum + ysum + DICE_SMOOTH;
        let dice = (2.0 * inter + DICE_SMOOTH) / denom;
        terms.push((1.0 - dice, ce));
        value += weights[r] * (1.0 - dice + ce);

        // d(1 - dice)/dp1 for each voxel, then through the softmax.
        let w = weights[r];
        for ((s, lab), g) in logits.iter().zip(labels).zip(grads.iter_mut()) {
            let t = &s[r];
            let (z0, z1) = (t.channel(0), t.channel(1));
            let mut d0 = vec![T::zero(); t.voxels()];
            let mut d1 = vec![T::zero(); t.voxels()];
            for (v, &y) in lab[r].iter().enumerate() {
                let p = prob1(z0[v].as_f64(), z1[v].as_f64());
                let yf = y as f64;
                let d_dice_dp = (2.0 * yf * denom - (2.0 * inter + DICE_SMOOTH)) / (denom * denom);
                // p1 = sigmoid(z1 - z0): dp1/dz1 = p(1-p) = -dp1/dz0
                let dz1_dice = -d_dice_dp * p * (1.0 - p);
                let dz1_ce = (p - yf) / n;
                let d = w * (dz1_dice + dz1_ce);
                d1[v] = T::lit(d);
                d0[v] = T::lit(-d);
            }
            let gr = &mut g[r];
            gr.channel_mut(0).copy_from_slice(&d0);
            gr.channel_mut(1).copy_from_slice(&d1);
        }
    }
    LossOutput { value, terms, grads }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(dims: Dims, z: impl Fn(usize) -> (f64, f64)) -> Tensor<f64> {
        let n = voxel_count(dims);
        let mut data = vec![0.0; 2 * n];
        for v in 0..n {
            let (a, b) = z(v);
            data[v] = a;
            data[n + v] = b;
        }
        Tensor::from_vec(2, dims, data)
    }

    #[test]
    fn weights_halve_and_normalise() {
        let w = deep_supervision_weights(3);
        assert!((w[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((w[2] - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(deep_supervision_weights(1), vec![1.0]);
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let dims = [4, 2, 2];
        let labels: Vec<u8> = (0..16).map(|v| (v % 2) as u8).collect();
        let out = training_loss(&[vec![logits(dims, |_| (0.3, 0.3))]], &[vec![labels]], &[1.0]);
        assert!((out.terms[0].1 - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn saturated_and_flipped() {
        let dims = [4, 4, 2];
        let labels: Vec<u8> = (0..32).map(|v| (v < 10) as u8).collect();
        let lab = labels.clone();
        let good = logits(dims, |v| if lab[v] == 1 { (-20.0, 20.0) } else { (20.0, -20.0) });
        let lab = labels.clone();
        let bad = logits(dims, |v| if lab[v] == 1 { (20.0, -20.0) } else { (-20.0, 20.0) });
        let l_good = training_loss(&[vec![good]], &[vec![labels.clone()]], &[1.0]).value;
        let l_bad = training_loss(&[vec![bad]], &[vec![labels]], &[1.0]).value;
        assert!(l_good < 0.02, "{l_good}");
        assert!(l_bad > 0.5, "{l_bad}");
    }

    #[test]
    fn max_pool_keeps_foreground() {
        let dims = [4, 2, 2];
        let mut l = vec![0u8; 16];
        l[3 * 4 + 3] = 1;
        let d = downsample_labels(&l, dims, [2, 2, 2]);
        assert_eq!(d, vec![0, 1]);
    }
}
