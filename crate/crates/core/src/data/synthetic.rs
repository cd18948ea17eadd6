//! Synthetic CT/PET-like lesion volumes.
//!
//! CT: air outside an ellipsoidal body, soft tissue with a smooth
//! low-frequency variation inside, additive noise, lesions slightly denser.
//! PET: low uptake background with hot ellipsoidal lesions. The mask is the
//! union of the lesion ellipsoids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{DataError, Volume};
use crate::nn::{voxel_count, Dims};

pub const EMPTY_CASE_PROBABILITY: f64 = 0.1;
const MIN_AXIS: usize = 32;
const CT_RANGE: (f32, f32) = (-100.0, 200.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CasesPerPatient {
    /// Exactly this many cases per patient.
    Fixed(usize),
    /// This many cases overall: one per patient, the rest spread at random.
    Total(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_patients: usize,
    pub cases_per_patient: CasesPerPatient,
    pub shape: Dims,
    pub spacing: [f64; 3],
    /// Inclusive range of lesions in a non-empty case.
    pub lesion_count: (usize, usize),
    pub seed: u64,
}

impl SyntheticSpec {
    fn check(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidParameter(m));
        if self.num_patients == 0 {
            return bad("num_patients must be positive".into());
        }
        if self.shape.iter().any(|&s| s < MIN_AXIS) {
            return bad(format!("every shape axis must be >= {MIN_AXIS}, got {:?}", self.shape));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return bad(format!("lesion range {:?} is inverted", self.lesion_count));
        }
        match self.cases_per_patient {
            CasesPerPatient::Fixed(0) => bad("cases per patient must be positive".into()),
            CasesPerPatient::Total(t) if t < self.num_patients => {
                bad(format!("{t} cases cannot cover {} patients", self.num_patients))
            }
            _ => Ok(()),
        }
    }
}

/// Patient index of every case, in case order.
fn case_patients(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let counts = match spec.cases_per_patient {
        CasesPerPatient::Fixed(k) => vec![k; spec.num_patients],
        CasesPerPatient::Total(t) => {
            let mut counts = vec![1; spec.num_patients];
            for _ in spec.num_patients..t {
                counts[rng.random_range(0..spec.num_patients)] += 1;
            }
            counts
        }
    };
    counts
        .iter()
        .enumerate()
        .flat_map(|(p, c)| std::iter::repeat_n(p, *c))
        .collect()
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<Volume>, DataError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patients = case_patients(spec, &mut rng);
    let mut case_in_patient = vec![0usize; spec.num_patients];
    let ids: Vec<(String, String)> = patients
        .iter()
        .map(|&p| {
            let k = case_in_patient[p];
            case_in_patient[p] += 1;
            (format!("patient{p:04}_case{k}"), format!("patient{p:04}"))
        })
        .collect();
    ids.into_par_iter()
        .enumerate()
        .map(|(i, (case_id, patient_id))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            generate_case(spec, case_id, patient_id, &mut rng)
        })
        .collect()
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Voxel bounding box, clamped to the volume.
    fn bounds(&self, dims: Dims) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            let lo = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a]).ceil() as usize + 1).min(dims[a]);
            (lo, hi)
        })
    }
}

fn generate_case(
    spec: &SyntheticSpec,
    case_id: String,
    patient_id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Volume, DataError> {
    let dims = spec.shape;
    let n = voxel_count(dims);
    let d: [f64; 3] = dims.map(|v| v as f64);
    let body = Ellipsoid {
        center: std::array::from_fn(|a| d[a] / 2.0 + rng.random_range(-0.05..0.05) * d[a]),
        radii: std::array::from_fn(|a| rng.random_range(0.36..0.46) * d[a]),
    };
    // smooth tissue texture: a few random low-frequency plane waves
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = std::array::from_fn(|a| {
                rng.random_range(0.5..2.0) * std::f64::consts::TAU / d[a]
                    * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
            });
            (k, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let ct_noise = Normal::new(0.0, 10.0).expect("valid sigma");
    let pet_noise = Normal::new(0.0, 0.1).expect("valid sigma");

    let mut ct = vec![0f32; n];
    let mut pet = vec![0f32; n];
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let (c, u) = if body.contains(p) {
                    let t: f64 = waves
                        .iter()
                        .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin())
                        .sum::<f64>()
                        / 3.0;
                    (40.0 + 45.0 * t, 1.0 + 0.5 * t)
                } else {
                    (-95.0, 0.1)
                };
                ct[i] = (c + ct_noise.sample(rng)) as f32;
                pet[i] = ((u + pet_noise.sample(rng)) as f32).max(0.0);
                i += 1;
            }
        }
    }

    let num_lesions = if rng.random_bool(EMPTY_CASE_PROBABILITY) {
        0
    } else {
        rng.random_range(spec.lesion_count.0..=spec.lesion_count.1)
    };
    let mut seg = vec![0u8; n];
    let max_r = (dims.iter().min().copied().unwrap_or(MIN_AXIS) as f64 / 10.0).max(3.0);
    for _ in 0..num_lesions {
        let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(2.0..max_r));
        // keep lesion centres well inside the body
        let center = std::array::from_fn(|a| {
            let half = (body.radii[a] * 0.6 - radii[a]).max(1.0);
            body.center[a] + rng.random_range(-half..half)
        });
        let lesion = Ellipsoid { center, radii };
        let uptake = rng.random_range(4.0..15.0) as f32;
        let [bx, by, bz] = lesion.bounds(dims);
        for z in bz.0..bz.1 {
            for y in by.0..by.1 {
                for x in bx.0..bx.1 {
                    let j = (z * dims[1] + y) * dims[0] + x;
                    // overlapping lesions keep the first lesion's uptake
                    if seg[j] == 0 && lesion.contains([x as f64, y as f64, z as f64]) {
                        seg[j] = 1;
                        pet[j] = uptake + (pet[j] - 1.0) * 2.0;
                        ct[j] += 25.0;
                    }
                }
            }
        }
    }
    for v in &mut ct {
        *v = v.clamp(CT_RANGE.0, CT_RANGE.1);
    }
    for v in &mut pet {
        *v = v.max(0.0);
    }
    Volume::new(case_id, patient_id, dims, spec.spacing, vec![ct, pet], Some(seg))
}
