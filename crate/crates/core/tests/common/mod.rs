//! Independent oracles shared by the property tests and the acceptance suite.
#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use planseg::data::{generate_synthetic_dataset, CasesPerPatient, SyntheticSpec, Volume};
use planseg::inference::{InferenceError, PatchPredictor};
use planseg::nn::{voxel_count, Dims, NetworkMode, SegmentationNetwork, Tensor};
use planseg::plans::{resolve_configuration, PlanFile, RawConfiguration, ResolvedConfiguration};
use planseg::topology::{derive_features, plan_topology, EncoderType, TopologyDescriptor};
use planseg::train::{deep_supervision_weights, downsample_labels, training_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

// ---------------------------------------------------------------- tiling

/// Tile corners along one axis, written out step by step from the stated rule.
pub fn oracle_axis_positions(image: usize, patch: usize, fraction: f64) -> Vec<usize> {
    if image == patch {
        return vec![0];
    }
    let target = patch as f64 * fraction;
    let mut n = 1usize;
    while ((n - 1) as f64) < (image - patch) as f64 / target {
        n += 1;
    }
    let spacing = (image - patch) as f64 / (n - 1) as f64;
    let mut out = Vec::new();
    for i in 0..n {
        let p = (i as f64 * spacing + 0.5).floor() as usize;
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

/// Marks every voxel touched by a tile; true if all are covered.
pub fn tiles_cover(image: Dims, patch: Dims, positions: &[[usize; 3]]) -> bool {
    let mut hit = vec![false; voxel_count(image)];
    for p in positions {
        for z in p[2]..p[2] + patch[2] {
            for y in p[1]..p[1] + patch[1] {
                for x in p[0]..p[0] + patch[0] {
                    hit[(z * image[1] + y) * image[0] + x] = true;
                }
            }
        }
    }
    hit.into_iter().all(|h| h)
}

pub fn lexicographic_unique(positions: &[[usize; 3]]) -> bool {
    positions.windows(2).all(|w| w[0] < w[1])
}

// --------------------------------------------------------------- gaussian

/// Unnormalised Gaussian at one voxel of a patch, sigma = patch/8.
pub fn gaussian_at(patch: Dims, v: [usize; 3]) -> f64 {
    (0..3)
        .map(|a| {
            let c = (patch[a] as f64 - 1.0) / 2.0;
            let s = patch[a] as f64 / 8.0;
            let d = v[a] as f64 - c;
            (-d * d / (2.0 * s * s)).exp()
        })
        .product()
}

// ------------------------------------------------------------- components

/// Component partition by union-find over all 26-neighbour pairs, returned as
/// a canonical map from each foreground voxel to the smallest voxel index in
/// its component.
pub fn union_find_components(mask: &[u8], dims: Dims) -> BTreeMap<usize, usize> {
    let n = mask.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let idx = |x: usize, y: usize, z: usize| (z * dims[1] + y) * dims[0] + x;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = idx(x, y, z);
                if mask[i] == 0 {
                    continue;
                }
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if nx < 0 || ny < 0 || nz < 0 {
                                continue;
                            }
                            let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                            if nx >= dims[0] || ny >= dims[1] || nz >= dims[2] {
                                continue;
                            }
                            let j = idx(nx, ny, nz);
                            if mask[j] != 0 {
                                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                                if a != b {
                                    parent[a.max(b)] = a.min(b);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut smallest: BTreeMap<usize, usize> = BTreeMap::new();
    for i in (0..n).filter(|&i| mask[i] != 0) {
        let r = find(&mut parent, i);
        smallest.entry(r).or_insert(i);
    }
    (0..n)
        .filter(|&i| mask[i] != 0)
        .map(|i| {
            let r = find(&mut parent, i);
            (i, smallest[&r])
        })
        .collect()
}

/// FP/FN volume from the union-find partition.
pub fn oracle_fp_fn(pred: &[u8], gt: &[u8], dims: Dims, spacing: [f64; 3]) -> (f64, f64) {
    let unmatched = |a: &[u8], b: &[u8]| -> usize {
        let comps = union_find_components(a, dims);
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (v, c) in comps {
            members.entry(c).or_default().push(v);
        }
        members
            .values()
            .filter(|vs| vs.iter().all(|&v| b[v] == 0))
            .map(Vec::len)
            .sum()
    };
    let ml = spacing[0] * spacing[1] * spacing[2] / 1000.0;
    (unmatched(pred, gt) as f64 * ml, unmatched(gt, pred) as f64 * ml)
}

pub fn random_mask(rng: &mut ChaCha8Rng, dims: Dims, density: f64) -> Vec<u8> {
    (0..voxel_count(dims)).map(|_| rng.random_bool(density) as u8).collect()
}

// --------------------------------------------------------------- networks

pub fn random_input(channels: usize, dims: Dims, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(
        channels,
        dims,
        (0..channels * voxel_count(dims))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

/// A planner-derived topology for a random patch, with features shrunk so the
/// network stays cheap to run.
pub fn random_planned_topology(rng: &mut ChaCha8Rng) -> (TopologyDescriptor, Dims) {
    let sizes = [8usize, 12, 16, 20, 24, 32];
    let patch: Dims = std::array::from_fn(|_| sizes[rng.random_range(0..sizes.len())]);
    let enc = if rng.random_bool(0.5) {
        EncoderType::Plain
    } else {
        EncoderType::Residual
    };
    let mut t = plan_topology(patch, [1.0; 3], enc, 2, 2).expect("plannable patch");
    t.features_per_stage = derive_features(2, 8, t.num_stages);
    t.deep_supervision = rng.random_bool(0.7);
    (t, patch)
}

/// Receptive field of one bottleneck voxel measured on the linear network.
///
/// Along axis `a` with total stride `J`, the window of bottleneck voxel `o` is
/// `{i0 + r + kJ : o - k in R(i0 + r)}`, where `R(i)` is the set of bottleneck
/// positions that respond to an impulse at `i`. Away from the borders the
/// network is equivariant to shifts by `J`, so `J` impulses per axis recover the
/// window size as the sum of `|R(i0 + r)|`. Returns 0 for an axis whose
/// response sets are not contiguous.
pub fn probe_receptive_field(t: &TopologyDescriptor) -> [usize; 3] {
    let expected = planseg::topology::compute_receptive_field(t);
    let stride = t.total_stride();
    // room on both sides so zero padding never truncates a response
    let dims: Dims = std::array::from_fn(|a| {
        let need = 2 * expected[a] + 4 * stride[a];
        need.div_ceil(stride[a]) * stride[a]
    });
    let mut single = t.clone();
    single.num_input_channels = 1;
    let net = SegmentationNetwork::<f64>::build_with_mode(&single, 17, NetworkMode::Linear).unwrap();
    let bott: Dims = std::array::from_fn(|a| dims[a] / stride[a]);
    let centre: Dims = std::array::from_fn(|a| bott[a] / 2);
    std::array::from_fn(|a| {
        let mut total = 0;
        for r in 0..stride[a] {
            let mut v: Dims = std::array::from_fn(|b| centre[b] * stride[b]);
            v[a] += r;
            let mut x = Tensor::<f64>::zeros(1, dims);
            x.set(0, v[0], v[1], v[2], 1.0);
            let e = net.encode(&x).unwrap();
            let hits: Vec<usize> = (0..bott[a])
                .filter(|&o| {
                    let mut p = centre;
                    p[a] = o;
                    (0..e.channels()).any(|c| e.get(c, p[0], p[1], p[2]).abs() > 1e-12)
                })
                .collect();
            match (hits.first(), hits.last()) {
                (Some(&lo), Some(&hi)) if hits.len() == hi - lo + 1 => total += hits.len(),
                _ => return 0,
            }
        }
        total
    })
}

/// Unit-stride topology whose conv kernels are made symmetric under every
/// axis flip, so the whole network commutes with mirroring.
pub fn mirror_equivariant_network(seed: u64, stages: usize, encoder: EncoderType) -> SegmentationNetwork<f32> {
    let t = TopologyDescriptor {
        num_stages: stages,
        features_per_stage: derive_features(2, 8, stages),
        strides_per_stage: vec![[1; 3]; stages],
        kernel_sizes: vec![[3; 3]; stages],
        encoder_type: encoder,
        blocks_per_stage_encoder: vec![1; stages],
        convs_per_stage_decoder: vec![1; stages - 1],
        deep_supervision: false,
        num_input_channels: 2,
        num_classes: 2,
    };
    let mut net = SegmentationNetwork::<f32>::build(&t, seed).unwrap();
    for p in net.params_mut().entries_mut() {
        if p.shape.len() != 5 {
            continue;
        }
        let (kz, ky, kx) = (p.shape[2], p.shape[3], p.shape[4]);
        let kv = kz * ky * kx;
        for block in p.data.chunks_mut(kv) {
            let orig = block.to_vec();
            for z in 0..kz {
                for y in 0..ky {
                    for x in 0..kx {
                        let mut s = 0.0;
                        for (zz, yy, xx) in [
                            (z, y, x),
                            (kz - 1 - z, y, x),
                            (z, ky - 1 - y, x),
                            (z, y, kx - 1 - x),
                            (kz - 1 - z, ky - 1 - y, x),
                            (kz - 1 - z, y, kx - 1 - x),
                            (z, ky - 1 - y, kx - 1 - x),
                            (kz - 1 - z, ky - 1 - y, kx - 1 - x),
                        ] {
                            s += orig[(zz * ky + yy) * kx + xx];
                        }
                        block[(z * ky + y) * kx + x] = s / 8.0;
                    }
                }
            }
        }
    }
    net
}

/// Returns the same logits everywhere and counts calls.
pub struct ConstantPredictor {
    pub logits: Vec<f32>,
    pub calls: AtomicUsize,
}

impl ConstantPredictor {
    pub fn new(logits: Vec<f32>) -> Self {
        Self {
            logits,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl PatchPredictor for ConstantPredictor {
    fn predict_logits(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>, InferenceError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let n = patch.voxels();
        let data = self.logits.iter().flat_map(|&l| std::iter::repeat_n(l, n)).collect();
        Ok(Tensor::from_vec(self.logits.len(), patch.dims(), data))
    }
}

/// Central-difference check of the end-to-end loss gradient on a tiny f64
/// network; returns the worst relative error over `samples` parameters.
pub fn gradient_check(encoder: EncoderType, samples: usize, step: f64) -> f64 {
    let t = TopologyDescriptor {
        num_stages: 2,
        features_per_stage: vec![2, 4],
        strides_per_stage: vec![[1; 3], [2; 3]],
        kernel_sizes: vec![[3; 3]; 2],
        encoder_type: encoder,
        blocks_per_stage_encoder: vec![1, 1],
        convs_per_stage_decoder: vec![1],
        deep_supervision: true,
        num_input_channels: 2,
        num_classes: 2,
    };
    let dims = [8, 8, 8];
    let net = SegmentationNetwork::<f64>::build(&t, 5).unwrap();
    let x = random_input(2, dims, 6).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labels: Vec<u8> = (0..512).map(|_| rng.random_bool(0.3) as u8).collect();
    let factors = t.cumulative_strides();
    let per_res: Vec<Vec<u8>> = (0..t.num_outputs())
        .map(|r| downsample_labels(&labels, dims, factors[r]))
        .collect();
    let weights = deep_supervision_weights(t.num_outputs());
    let loss_of = |n: &SegmentationNetwork<f64>| {
        let out = n.forward(&x).unwrap();
        training_loss(&[out], std::slice::from_ref(&per_res), &weights).value
    };
    let (logits, cache) = net.forward_train(&x).unwrap();
    let lo = training_loss(&[logits], std::slice::from_ref(&per_res), &weights);
    let grads = net.backward(&cache, &lo.grads[0]).unwrap();
    let mut worst: f64 = 0.0;
    let ids: Vec<(usize, usize)> = net
        .params()
        .entries()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.data.len()).map(move |j| (i, j)))
        .collect();
    // Central differences are only valid where both perturbed points sit on
    // the same linear piece of every leaky ReLU; skip samples that cross a kink.
    let base_signs = cache.activation_signs();
    let same_piece = |n: &SegmentationNetwork<f64>| n.forward_train(&x).unwrap().1.activation_signs() == base_signs;
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < samples {
        attempts += 1;
        assert!(attempts <= samples * 20, "too many kink crossings");
        let (i, j) = ids[rng.random_range(0..ids.len())];
        let mut plus = net.clone();
        plus.params_mut().entries_mut()[i].data[j] += step;
        let mut minus = net.clone();
        minus.params_mut().entries_mut()[i].data[j] -= step;
        if !same_piece(&plus) || !same_piece(&minus) {
            continue;
        }
        accepted += 1;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
        let an = grads.data[i][j];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

// --------------------------------------------------------------- training

/// A desk-scale configuration small enough for unit-test budgets.
pub fn tiny_config(
    encoder: &str,
    patch: usize,
    batch: usize,
    epochs: usize,
    iterations: usize,
) -> ResolvedConfiguration {
    let mut plan = PlanFile::new("tiny");
    plan.configurations.insert(
        "c".into(),
        RawConfiguration::new(None)
            .with("patch_size", json!([patch, patch, patch]))
            .with("batch_size", json!(batch))
            .with("encoder_type", json!(encoder))
            .with("features_base", json!(4))
            .with("features_cap", json!(16))
            .with("num_epochs", json!(epochs))
            .with("num_iterations_per_epoch", json!(iterations))
            .with("mirror_axes", json!([1, 2])),
    );
    resolve_configuration(&plan, "c").expect("tiny config resolves")
}

pub fn tiny_dataset(patients: usize, side: usize, seed: u64) -> Vec<Volume> {
    generate_synthetic_dataset(&SyntheticSpec {
        num_patients: patients,
        cases_per_patient: CasesPerPatient::Fixed(1),
        shape: [side; 3],
        spacing: [1.0; 3],
        lesion_count: (1, 2),
        seed,
    })
    .expect("synthetic dataset")
}
