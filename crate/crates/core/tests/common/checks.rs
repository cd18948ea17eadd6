//! Seeded oracle sweeps shared by the property tests and the acceptance run.
//! Each returns a one-line summary on success and the first failure otherwise.
// `ensure!` negates its condition so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use super::*;
use planseg::inference::{compute_tiling, ensemble, gaussian_importance_map, predict_volume, softmax};
use planseg::metrics::{aggregate, dice, fp_fn_volumes, label_components, CaseMetrics};
use planseg::plans::{
    diff_configurations, parse_plans, resolve_configuration, serialize_plans, PlanFile, PlansError, RawConfiguration,
    ResolvedConfiguration,
};
use planseg::topology::{compute_receptive_field, parameter_count};
use serde_json::{json, Map, Value};

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn tiling(trials: usize) -> Check {
    for (image, patch, f, want) in [
        (256, 128, 0.5, vec![0, 64, 128]),
        (200, 128, 0.5, vec![0, 36, 72]),
        (128, 128, 0.5, vec![0]),
        (128, 128, 0.9, vec![0]),
    ] {
        let plan = compute_tiling([image, 1, 1], [patch, 1, 1], f).map_err(|e| e.to_string())?;
        let got: Vec<usize> = plan.positions.iter().map(|p| p[0]).collect();
        ensure!(got == want, "{image}/{patch}/{f}: {got:?}, want {want:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x711e);
    for _ in 0..trials {
        let patch: Dims = std::array::from_fn(|_| rng.random_range(1..=24));
        let image: Dims = std::array::from_fn(|a| patch[a] + rng.random_range(0..=40));
        let f = rng.random_range(0.05..=1.0);
        let plan = compute_tiling(image, patch, f).map_err(|e| e.to_string())?;
        let axes: [Vec<usize>; 3] = std::array::from_fn(|a| oracle_axis_positions(image[a], patch[a], f));
        let mut want = Vec::new();
        for &x in &axes[0] {
            for &y in &axes[1] {
                for &z in &axes[2] {
                    want.push([x, y, z]);
                }
            }
        }
        ensure!(
            plan.positions == want,
            "{image:?}/{patch:?}/{f}: positions differ from oracle"
        );
        ensure!(
            lexicographic_unique(&plan.positions),
            "{image:?}/{patch:?}/{f}: not sorted/unique"
        );
        ensure!(
            tiles_cover(image, patch, &plan.positions),
            "{image:?}/{patch:?}/{f}: gap in coverage"
        );
        for a in 0..3 {
            ensure!(
                axes[a].first() == Some(&0) && axes[a].last() == Some(&(image[a] - patch[a])),
                "{image:?}/{patch:?}/{f}: axis {a} does not span the image"
            );
        }
        let n5 = compute_tiling(image, patch, 0.5).unwrap().positions.len();
        let n6 = compute_tiling(image, patch, 0.6).unwrap().positions.len();
        ensure!(n6 <= n5, "{image:?}/{patch:?}: {n6} tiles at 0.6 > {n5} at 0.5");
    }
    Ok(format!("{trials} random triples + 4 worked examples"))
}

fn same_partition(labels: &[u32], oracle: &BTreeMap<usize, usize>) -> bool {
    // labels agree with the oracle iff voxels share a label exactly when they
    // share an oracle representative
    let mut rep_of_label: BTreeMap<u32, usize> = BTreeMap::new();
    let mut label_of_rep: BTreeMap<usize, u32> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        match (l, oracle.get(&i)) {
            (0, None) => {}
            (0, Some(_)) | (_, None) => return false,
            (l, Some(&r)) => {
                if *rep_of_label.entry(l).or_insert(r) != r || *label_of_rep.entry(r).or_insert(l) != l {
                    return false;
                }
            }
        }
    }
    true
}

fn case(id: &str, d: Option<f64>) -> CaseMetrics {
    CaseMetrics {
        case_id: id.into(),
        dice: d,
        fp_volume_ml: 0.0,
        fn_volume_ml: 0.0,
        gt_empty: d.is_none(),
        pred_empty: d.is_none(),
    }
}

pub fn metrics(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    for t in 0..trials {
        let dims: Dims = std::array::from_fn(|_| rng.random_range(1..=16));
        let density = rng.random_range(0.02..0.5);
        let pred = random_mask(&mut rng, dims, density);
        let gt = random_mask(&mut rng, dims, density);
        let spacing: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..3.0));
        let (labels, count) = label_components(&pred, dims);
        let oracle = union_find_components(&pred, dims);
        let oracle_count = oracle.iter().filter(|(v, r)| v == r).count();
        ensure!(
            count == oracle_count,
            "trial {t}: {count} components, oracle {oracle_count}"
        );
        ensure!(
            same_partition(&labels, &oracle),
            "trial {t}: component partition differs"
        );
        let got = fp_fn_volumes(&pred, &gt, dims, spacing).map_err(|e| e.to_string())?;
        let want = oracle_fp_fn(&pred, &gt, dims, spacing);
        ensure!(got == want, "trial {t}: fp/fn {got:?}, oracle {want:?}");
        let d = dice(&pred, &gt).map_err(|e| e.to_string())?;
        let inter = pred.iter().zip(&gt).filter(|(a, b)| **a != 0 && **b != 0).count();
        let sizes = pred.iter().chain(&gt).filter(|v| **v != 0).count();
        let want = (sizes > 0).then(|| 2.0 * inter as f64 / sizes as f64);
        ensure!(d == want, "trial {t}: dice {d:?}, oracle {want:?}");
    }
    // one 2x2x2 blob away from the ground truth at 2 mm spacing
    let dims = [6, 6, 6];
    let mut pred = vec![0u8; 216];
    let mut gt = vec![0u8; 216];
    for z in 0..2 {
        for y in 0..2 {
            for x in 0..2 {
                pred[(z * 6 + y) * 6 + x] = 1;
            }
        }
    }
    gt[215] = 1;
    let (fp, fn_) = fp_fn_volumes(&pred, &gt, dims, [2.0; 3]).map_err(|e| e.to_string())?;
    ensure!((fp - 0.064).abs() < 1e-12, "8-voxel blob: fp {fp}, want 0.064");
    ensure!((fn_ - 0.008).abs() < 1e-12, "single-voxel gt: fn {fn_}, want 0.008");
    let r = aggregate(&[case("a", Some(1.0)), case("b", None)]).map_err(|e| e.to_string())?;
    ensure!(
        r.mean_dice_challenge == 0.5 && r.mean_dice_nnunet == Some(1.0),
        "two-case set: challenge {} nnunet {:?}",
        r.mean_dice_challenge,
        r.mean_dice_nnunet
    );
    Ok(format!(
        "{trials} random masks, 0.064 ml blob, challenge 0.5 vs nnU-Net 1.0"
    ))
}

pub fn network_contracts() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..12 {
        let (t, patch) = random_planned_topology(&mut rng);
        let net = SegmentationNetwork::<f32>::build(&t, i).map_err(|e| e.to_string())?;
        ensure!(
            net.parameter_count() == parameter_count(&t),
            "topology {i}: parameter count"
        );
        let out = net.forward(&random_input(2, patch, i)).map_err(|e| e.to_string())?;
        ensure!(out.len() == t.num_outputs(), "topology {i}: {} outputs", out.len());
        for (r, (o, d)) in out.iter().zip(t.stage_dims(patch)).enumerate() {
            ensure!(
                o.channels() == 2 && o.dims() == d && o.is_finite(),
                "topology {i} output {r}: {:?} vs {d:?}",
                o.dims()
            );
        }
    }
    let mut worst: f64 = 0.0;
    for enc in [EncoderType::Plain, EncoderType::Residual] {
        worst = worst.max(gradient_check(enc, 24, 1e-3));
    }
    ensure!(worst < 1e-2, "gradient relative error {worst:.3e}");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut probed = 0;
    while probed < 10 {
        let (mut t, _) = random_planned_topology(&mut rng);
        if t.num_stages > 3 || compute_receptive_field(&t).iter().any(|&r| r > 48) {
            continue;
        }
        t.features_per_stage = vec![1; t.num_stages];
        let (want, got) = (compute_receptive_field(&t), probe_receptive_field(&t));
        ensure!(want == got, "receptive field {want:?}, probe {got:?} for {t:?}");
        probed += 1;
    }
    Ok(format!(
        "12 topologies, gradient rel err {worst:.1e}, {probed} receptive-field probes"
    ))
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn inference_invariants(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1f5);
    let all_axes = [vec![], vec![0], vec![1, 2], vec![0, 1, 2]];
    let (mut tta, mut constant, mut norm) = (0.0f32, 0.0f32, 0.0f32);
    for t in 0..trials {
        let patch: Dims = std::array::from_fn(|_| rng.random_range(3..=8));
        let dims: Dims = std::array::from_fn(|a| rng.random_range(patch[a] - 2..=patch[a] + 6));
        let f = rng.random_range(0.3..=1.0);
        let axes = &all_axes[rng.random_range(0..all_axes.len())];
        let image = random_input(2, dims, t as u64);

        let logits = vec![rng.random_range(-3.0f32..3.0), rng.random_range(-3.0f32..3.0)];
        let stub = ConstantPredictor::new(logits.clone());
        let map = predict_volume(&stub, &image, patch, f, axes).map_err(|e| e.to_string())?;
        let tiles = compute_tiling(std::array::from_fn(|a| dims[a].max(patch[a])), patch, f)
            .unwrap()
            .positions
            .len();
        ensure!(
            stub.calls() == tiles << axes.len(),
            "trial {t}: {} forward passes for {tiles} tiles and axes {axes:?}",
            stub.calls()
        );
        let one = Tensor::from_vec(2, [1, 1, 1], logits);
        let want = softmax(&one);
        for k in 0..2 {
            let w = want[k][0] as f32;
            constant = constant.max(map.channel(k).iter().map(|v| (v - w).abs()).fold(0.0, f32::max));
        }

        let net = mirror_equivariant_network(t as u64, 2, EncoderType::Residual);
        let plain = predict_volume(&net, &image, patch, f, &[]).map_err(|e| e.to_string())?;
        let mirrored = predict_volume(&net, &image, patch, f, &[0, 1, 2]).map_err(|e| e.to_string())?;
        tta = tta.max(max_abs_diff(plain.data(), mirrored.data()));
        let avg = ensemble(&[plain, mirrored]).map_err(|e| e.to_string())?;
        for v in 0..avg.voxels() {
            let s: f32 = (0..2).map(|k| avg.channel(k)[v]).sum();
            norm = norm.max((s - 1.0).abs());
        }
    }
    ensure!(constant <= 1e-6, "constant-network deviation {constant:.2e}");
    ensure!(tta <= 1e-5, "TTA deviation on equivariant network {tta:.2e}");
    ensure!(norm <= 1e-4, "probability sum deviation {norm:.2e}");

    let map = random_probability_map(&mut rng, 3, [5, 4, 3]);
    for n in [1, 2, 3, 7, 10] {
        let copies = vec![map.clone(); n];
        let e = ensemble(&copies).map_err(|e| e.to_string())?;
        ensure!(e.data() == map.data(), "ensemble of {n} copies is not the map");
    }
    let g = gaussian_importance_map([32; 3]);
    let centre = g[(16 * 32 + 16) * 32 + 16];
    let want = gaussian_at([32; 3], [16; 3]) / gaussian_at([32; 3], [0; 3]);
    ensure!(
        ((centre / g[0]) / want - 1.0).abs() < 1e-9,
        "gaussian centre/corner ratio {} vs {want}",
        centre / g[0]
    );
    Ok(format!(
        "{trials} volumes: TTA {tta:.1e}, constant {constant:.1e}, sum-to-one {norm:.1e}; ensemble idempotent"
    ))
}

pub fn random_probability_map(rng: &mut ChaCha8Rng, classes: usize, dims: Dims) -> Tensor<f32> {
    let n = voxel_count(dims);
    let raw: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..n).map(|_| rng.random_range(0.01f32..1.0)).collect())
        .collect();
    let mut data = vec![0.0f32; classes * n];
    for v in 0..n {
        let s: f32 = raw.iter().map(|r| r[v]).sum();
        for k in 0..classes {
            data[k * n + v] = raw[k][v] / s;
        }
    }
    Tensor::from_vec(classes, dims, data)
}

fn random_field(rng: &mut ChaCha8Rng) -> (&'static str, Value) {
    let patches = [
        [32, 32, 32],
        [64, 64, 64],
        [128, 128, 128],
        [192, 192, 192],
        [64, 64, 32],
    ];
    match rng.random_range(0..13) {
        0 => ("batch_size", json!(rng.random_range(1..100))),
        1 => ("patch_size", json!(patches[rng.random_range(0..patches.len())])),
        2 => (
            "spacing",
            json!([
                rng.random_range(0.25..5.0),
                rng.random_range(0.25..5.0),
                rng.random_range(0.25..5.0)
            ]),
        ),
        3 => (
            "encoder_type",
            json!(if rng.random_bool(0.5) { "plain" } else { "residual" }),
        ),
        4 => ("features_base", json!(rng.random_range(1..32))),
        5 => ("features_cap", json!(rng.random_range(32..400))),
        6 => ("deep_supervision", json!(rng.random_bool(0.5))),
        7 => ("oversample_foreground_fraction", json!(rng.random_range(0.0..=1.0))),
        8 => ("num_epochs", json!(rng.random_range(1..1000))),
        9 => ("num_iterations_per_epoch", json!(rng.random_range(1..500))),
        10 => ("initial_learning_rate", json!(rng.random_range(1e-5..1.0))),
        11 => ("inference_step_fraction", json!(rng.random_range(0.05..=1.0))),
        _ => (
            "mirror_axes",
            json!((0..3).filter(|_| rng.random_bool(0.5)).collect::<Vec<usize>>()),
        ),
    }
}

fn random_overrides(rng: &mut ChaCha8Rng) -> Map<String, Value> {
    (0..rng.random_range(0..5))
        .map(|_| {
            let (k, v) = random_field(rng);
            (k.to_string(), v)
        })
        .collect()
}

/// Round trip, chain resolution against plain dictionary updates, and the
/// single-override diff, on `trials` random plan files; then the demo
/// bs2 -> bs80 pair.
pub fn plans(trials: usize, demo: &str) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x91a5);
    let err = |e: PlansError| e.to_string();
    for t in 0..trials {
        // a random acyclic file: configurations inherit only from earlier ones
        let mut plan = PlanFile::new("random");
        for i in 0..rng.random_range(1..7) {
            let parent = (i > 0 && rng.random_bool(0.7)).then(|| format!("c{}", rng.random_range(0..i)));
            let mut raw = RawConfiguration {
                inherits_from: parent,
                overrides: random_overrides(&mut rng),
            };
            if raw.inherits_from.is_none() {
                raw.overrides.entry("patch_size").or_insert(json!([64, 64, 64]));
            }
            plan.configurations.insert(format!("c{i}"), raw);
        }
        let text = serialize_plans(&plan);
        let back = parse_plans(&text).map_err(err)?;
        ensure!(
            back == plan && serialize_plans(&back) == text,
            "trial {t}: round trip changed the file"
        );
        for name in plan.configurations.keys() {
            ensure!(
                resolve_configuration(&plan, name) == resolve_configuration(&back, name),
                "trial {t}: {name} resolves differently after reparse"
            );
        }

        // chain A <- B <- C over a fully specified root
        let mut root_plan = PlanFile::new("root");
        root_plan.configurations.insert(
            "a".into(),
            RawConfiguration::new(None).with("patch_size", json!([64, 64, 64])),
        );
        let root = resolve_configuration(&root_plan, "a").map_err(err)?;
        let (b, c) = (random_overrides(&mut rng), random_overrides(&mut rng));
        let mut chain = PlanFile::new("chain");
        chain.configurations.insert("A".into(), root.to_raw());
        chain.configurations.insert(
            "B".into(),
            RawConfiguration {
                inherits_from: Some("A".into()),
                overrides: b.clone(),
            },
        );
        chain.configurations.insert(
            "C".into(),
            RawConfiguration {
                inherits_from: Some("B".into()),
                overrides: c.clone(),
            },
        );
        let mut dict = root.to_raw().overrides;
        for layer in [&b, &c] {
            dict.extend(layer.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        let expected: ResolvedConfiguration = serde_json::from_value(Value::Object(dict)).map_err(|e| e.to_string())?;
        match resolve_configuration(&chain, "C") {
            Ok(got) => ensure!(
                got == expected,
                "trial {t}: chain resolution differs from dictionary updates"
            ),
            Err(PlansError::Validation { field, .. }) => {
                ensure!(
                    expected.validate().is_err(),
                    "trial {t}: resolver rejected {field}, oracle valid"
                )
            }
            Err(e) => return Err(format!("trial {t}: {e}")),
        }

        // one override on a fully specified parent changes exactly that field
        let (field, value) = random_field(&mut rng);
        let mut single = PlanFile::new("single");
        single.configurations.insert("parent".into(), root.to_raw());
        single.configurations.insert(
            "child".into(),
            RawConfiguration::new(Some("parent")).with(field, value.clone()),
        );
        match resolve_configuration(&single, "child") {
            Ok(child) => {
                let diff = diff_configurations(&root, &child);
                let changed = root.to_raw().overrides[field] != value;
                ensure!(
                    diff.len() == usize::from(changed) && diff.iter().all(|d| d.field == field && d.b == value),
                    "trial {t}: overriding {field} changed {:?}",
                    diff.iter().map(|d| &d.field).collect::<Vec<_>>()
                );
            }
            Err(PlansError::Validation { field: f, .. }) if f == "patch_size" => {}
            Err(e) => return Err(format!("trial {t}: {e}")),
        }
    }
    let demo = parse_plans(demo).map_err(err)?;
    let a = resolve_configuration(&demo, "3d_fullres").map_err(err)?;
    let b = resolve_configuration(&demo, "3d_fullres_bs80").map_err(err)?;
    let diff = diff_configurations(&a, &b);
    ensure!(
        diff.len() == 1 && diff[0].field == "batch_size" && diff[0].a == json!(2) && diff[0].b == json!(80),
        "bs80 diff: {diff:?}"
    );
    Ok(format!("{trials} random plan files; bs2 -> bs80 diff is one line"))
}
