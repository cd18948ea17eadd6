//! Single-fold training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::loss::{deep_supervision_weights, downsample_labels, training_loss};
use super::optim::{poly_learning_rate, Sgd, DEFAULT_MOMENTUM};
use super::TrainError;
use crate::data::{
    compute_normalization_stats, compute_whole_volume_stats, normalize, DataError, FoldAssignment, NormalizationStats,
    Patch, PatchSampler, Volume,
};
use crate::nn::{Checkpoint, Grads, SegmentationNetwork, Tensor};
use crate::plans::ResolvedConfiguration;

pub const FINAL_CHECKPOINT: &str = "checkpoint_final.ckpt";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.ckpt";
pub const TRAINING_LOG: &str = "training_log.jsonl";

/// Multiplicative intensity jitter range applied per channel.
pub const INTENSITY_JITTER: f64 = 0.1;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the iterations that completed; `None` if none did.
    pub train_loss: Option<f64>,
    pub val_dice: f64,
    pub lr: f64,
    pub divergence_flag: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Where checkpoints and the log go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Threads for per-sample forward/backward. Results do not depend on it.
    pub workers: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingState {
    pub config: ResolvedConfiguration,
    pub fold: usize,
    pub seed: u64,
    pub epoch: usize,
    pub network: SegmentationNetwork<f32>,
    pub optimizer: Sgd<f32>,
    pub rng: ChaCha8Rng,
    pub best_validation_dice: f64,
    pub history: Vec<EpochRecord>,
    /// Product of the halvings applied after divergences.
    pub lr_scale: f64,
    pub normalization: NormalizationStats,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng, TrainError> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse::<u128>()
            .map_err(|e| TrainError::Resume(format!("rng word position: {e}")))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct TrainingMetadata {
    config: ResolvedConfiguration,
    fold: usize,
    seed: u64,
    rng: RngState,
    best_validation_dice: f64,
    history: Vec<EpochRecord>,
    lr_scale: f64,
    normalization: NormalizationStats,
}

/// Network init seed for a fold, so folds start from different weights.
pub fn network_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64)
}

fn sampling_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + fold as u64);
    rng
}

fn validation_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000 + fold as u64);
    rng
}

/// Foreground statistics of the training split, or whole-volume statistics
/// when the split has no lesion voxels.
pub fn fold_normalization(training: &[&Volume]) -> Result<NormalizationStats, TrainError> {
    match compute_normalization_stats(training) {
        Err(DataError::NoForeground) => Ok(compute_whole_volume_stats(training)?),
        other => Ok(other?),
    }
}

fn split<'a>(
    dataset: &'a [Volume],
    folds: &FoldAssignment,
    fold: usize,
) -> Result<(Vec<&'a Volume>, Vec<&'a Volume>), TrainError> {
    if fold >= folds.num_folds {
        return Err(TrainError::Config(format!(
            "fold {fold} out of range for {} folds",
            folds.num_folds
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for v in dataset {
        match folds.fold_of_case.get(&v.case_id) {
            Some(&f) if f == fold => val.push(v),
            Some(_) => train.push(v),
            None => return Err(TrainError::Config(format!("case {} has no fold assignment", v.case_id))),
        }
    }
    if train.is_empty() {
        return Err(TrainError::Config(format!("fold {fold} has no training cases")));
    }
    Ok((train, val))
}

fn check_channels(config: &ResolvedConfiguration, dataset: &[Volume]) -> Result<(), TrainError> {
    let want = config.num_input_channels();
    if let Some(v) = dataset.iter().find(|v| v.num_channels() != want) {
        return Err(TrainError::Config(format!(
            "configuration expects {want} input channels but case {} has {}",
            v.case_id,
            v.num_channels()
        )));
    }
    Ok(())
}

fn flip_labels(labels: &[u8], dims: [usize; 3], axes: &[usize]) -> Vec<u8> {
    let t = Tensor::<f32>::from_vec(1, dims, labels.iter().map(|&l| l as f32).collect());
    t.flip(axes).data().iter().map(|&v| v as u8).collect()
}

/// Random mirroring over every axis plus per-channel intensity scaling.
fn augment<R: Rng + ?Sized>(patch: Patch, rng: &mut R) -> Patch {
    let axes: Vec<usize> = (0..3).filter(|_| rng.random_bool(0.5)).collect();
    let dims = patch.image.dims();
    let mut image = patch.image.flip(&axes);
    for c in 0..image.channels() {
        let f = rng.random_range(1.0 - INTENSITY_JITTER..1.0 + INTENSITY_JITTER) as f32;
        image.channel_mut(c).iter_mut().for_each(|v| *v *= f);
    }
    Patch {
        image,
        labels: flip_labels(&patch.labels, dims, &axes),
        corner: patch.corner,
    }
}

/// Global Dice of argmax predictions pooled over all validation patches.
/// Zero when neither predictions nor labels contain foreground.
fn pseudo_dice(net: &SegmentationNetwork<f32>, patches: &[Patch]) -> Result<f64, TrainError> {
    let counts = patches
        .par_iter()
        .map(|p| -> Result<(usize, usize, usize), TrainError> {
            let logits = net.forward_primary(&p.image)?;
            let (z0, z1) = (logits.channel(0), logits.channel(1));
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (v, &y) in p.labels.iter().enumerate() {
                let pred = z1[v] > z0[v];
                match (pred, y == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            Ok((tp, fp, fn_))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (tp, fp, fn_) = counts.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Owns a fold's normalised data and its [`TrainingState`].
pub struct FoldTrainer {
    state: TrainingState,
    train: Vec<Volume>,
    validation: Vec<Patch>,
    out_dir: Option<PathBuf>,
    pool: rayon::ThreadPool,
}

impl FoldTrainer {
    pub fn new(
        config: &ResolvedConfiguration,
        dataset: &[Volume],
        folds: &FoldAssignment,
        fold: usize,
        seed: u64,
        options: &TrainOptions,
    ) -> Result<Self, TrainError> {
        config
            .validate()
            .map_err(|(field, msg)| TrainError::Config(format!("{field}: {msg}")))?;
        check_channels(config, dataset)?;
        let (train, _) = split(dataset, folds, fold)?;
        let normalization = fold_normalization(&train)?;
        let network = SegmentationNetwork::<f32>::build(&config.topology(), network_seed(seed, fold))?;
        let optimizer = Sgd::new(network.params(), DEFAULT_MOMENTUM);
        let state = TrainingState {
            config: config.clone(),
            fold,
            seed,
            epoch: 0,
            network,
            optimizer,
            rng: sampling_rng(seed, fold),
            best_validation_dice: -1.0,
            history: Vec::new(),
            lr_scale: 1.0,
            normalization,
        };
        Self::with_state(state, dataset, folds, options)
    }

    /// Continues training from a checkpoint written by [`Self::checkpoint`].
    pub fn resume(
        checkpoint: &Checkpoint,
        dataset: &[Volume],
        folds: &FoldAssignment,
        options: &TrainOptions,
    ) -> Result<Self, TrainError> {
        let meta: TrainingMetadata = serde_json::from_value(checkpoint.metadata.clone())
            .map_err(|e| TrainError::Resume(format!("checkpoint metadata: {e}")))?;
        let network = checkpoint.restore_network()?;
        let velocity = checkpoint
            .momentum(&network)?
            .ok_or_else(|| TrainError::Resume("checkpoint has no optimizer state".into()))?;
        if meta.history.len() != checkpoint.epoch {
            return Err(TrainError::Resume(format!(
                "history has {} entries but checkpoint epoch is {}",
                meta.history.len(),
                checkpoint.epoch
            )));
        }
        check_channels(&meta.config, dataset)?;
        let state = TrainingState {
            epoch: checkpoint.epoch,
            network,
            optimizer: Sgd {
                momentum: DEFAULT_MOMENTUM,
                velocity,
            },
            rng: meta.rng.restore()?,
            best_validation_dice: meta.best_validation_dice,
            history: meta.history,
            lr_scale: meta.lr_scale,
            normalization: meta.normalization,
            config: meta.config,
            fold: meta.fold,
            seed: meta.seed,
        };
        Self::with_state(state, dataset, folds, options)
    }

    fn with_state(
        state: TrainingState,
        dataset: &[Volume],
        folds: &FoldAssignment,
        options: &TrainOptions,
    ) -> Result<Self, TrainError> {
        let (train, val) = split(dataset, folds, state.fold)?;
        let train: Vec<Volume> = train.into_iter().map(|v| normalize(v, &state.normalization)).collect();
        let patch = state.config.patch_size;
        let mut vrng = validation_rng(state.seed, state.fold);
        let validation = val
            .into_iter()
            .map(|v| {
                let nv = normalize(v, &state.normalization);
                PatchSampler::new(&nv).sample(patch, true, &mut vrng)
            })
            .collect();
        if let Some(dir) = &options.out_dir {
            fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers.max(1))
            .build()
            .map_err(|e| TrainError::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            state,
            train,
            validation,
            out_dir: options.out_dir.clone(),
            pool,
        })
    }

    pub fn state(&self) -> &TrainingState {
        &self.state
    }

    pub fn into_state(self) -> TrainingState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.state.config.num_epochs
    }

    /// Everything needed to resume bit-identically.
    pub fn checkpoint(&self) -> Checkpoint {
        let s = &self.state;
        let meta = TrainingMetadata {
            config: s.config.clone(),
            fold: s.fold,
            seed: s.seed,
            rng: RngState::capture(&s.rng),
            best_validation_dice: s.best_validation_dice,
            history: s.history.clone(),
            lr_scale: s.lr_scale,
            normalization: s.normalization.clone(),
        };
        let metadata = serde_json::to_value(meta).expect("metadata serializes");
        Checkpoint::from_network(&s.network, s.epoch, Some(&s.optimizer.velocity), metadata)
    }

    fn build_batch(&mut self) -> Vec<Patch> {
        let cfg = &self.state.config;
        let bs = cfg.batch_size;
        let forced = cfg.foreground_samples_per_batch().min(bs);
        let rng = &mut self.state.rng;
        (0..bs)
            .map(|i| {
                let v = &self.train[rng.random_range(0..self.train.len())];
                let p = PatchSampler::new(v).sample(cfg.patch_size, i >= bs - forced, rng);
                augment(p, rng)
            })
            .collect()
    }

    /// One optimizer step; returns the loss, or `None` on a non-finite loss or gradient.
    fn iteration(&mut self, lr: f64) -> Result<Option<f64>, TrainError> {
        let batch = self.build_batch();
        let net = &self.state.network;
        let topo = net.descriptor();
        let outputs = topo.num_outputs();
        let factors = topo.cumulative_strides();
        let patch = self.state.config.patch_size;
        let weights = deep_supervision_weights(outputs);
        let labels: Vec<Vec<Vec<u8>>> = batch
            .iter()
            .map(|p| {
                (0..outputs)
                    .map(|r| downsample_labels(&p.labels, patch, factors[r]))
                    .collect()
            })
            .collect();
        let forwards = self.pool.install(|| {
            batch
                .par_iter()
                .map(|p| net.forward_train(&p.image))
                .collect::<Result<Vec<_>, _>>()
        })?;
        let (logits, caches): (Vec<_>, Vec<_>) = forwards.into_iter().unzip();
        if logits.iter().flatten().any(|t| !t.is_finite()) {
            return Ok(None);
        }
        let loss = training_loss(&logits, &labels, &weights);
        if !loss.value.is_finite() {
            return Ok(None);
        }
        let per_sample = self.pool.install(|| {
            caches
                .par_iter()
                .zip(&loss.grads)
                .map(|(c, d)| net.backward(c, d))
                .collect::<Result<Vec<Grads<f32>>, _>>()
        })?;
        let mut grads = per_sample.into_iter();
        let mut total = grads.next().expect("batch_size >= 1");
        for g in grads {
            total.add_assign(&g);
        }
        if !total.is_finite() {
            return Ok(None);
        }
        let params = self.state.network.params_mut();
        self.state.optimizer.step(params, &total, lr);
        if self
            .state
            .network
            .params()
            .entries()
            .iter()
            .any(|p| p.data.iter().any(|v| !v.is_finite()))
        {
            return Ok(None);
        }
        Ok(Some(loss.value))
    }

    /// Runs one epoch, validates, logs and writes the best checkpoint if improved.
    pub fn run_epoch(&mut self) -> Result<EpochRecord, TrainError> {
        let cfg = self.state.config.clone();
        let lr = poly_learning_rate(cfg.initial_learning_rate, self.state.epoch, cfg.num_epochs) * self.state.lr_scale;
        let snapshot = (self.state.network.clone(), self.state.optimizer.clone());
        let mut losses = Vec::with_capacity(cfg.num_iterations_per_epoch);
        let mut diverged = false;
        for _ in 0..cfg.num_iterations_per_epoch {
            match self.iteration(lr)? {
                Some(l) => losses.push(l),
                None => {
                    diverged = true;
                    break;
                }
            }
        }
        if diverged {
            // back to the state at the start of this epoch, at half the rate
            self.state.network = snapshot.0;
            self.state.optimizer = snapshot.1;
            self.state.lr_scale *= 0.5;
        }
        let val_dice = self
            .pool
            .install(|| pseudo_dice(&self.state.network, &self.validation))?;
        let record = EpochRecord {
            epoch: self.state.epoch,
            train_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            val_dice,
            lr,
            divergence_flag: diverged,
        };
        self.state.history.push(record.clone());
        self.state.epoch += 1;
        if let Some(dir) = &self.out_dir {
            append_log(&dir.join(TRAINING_LOG), &record)?;
        }
        if !diverged && val_dice > self.state.best_validation_dice {
            self.state.best_validation_dice = val_dice;
            if let Some(dir) = &self.out_dir {
                self.checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        Ok(record)
    }

    /// Trains the remaining epochs and writes the final checkpoint.
    pub fn run(mut self) -> Result<TrainingState, TrainError> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        if let Some(dir) = &self.out_dir {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(self.state)
    }
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<(), TrainError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| TrainError::io(path, e))?;
    let line: Value = json!(record);
    writeln!(f, "{line}").map_err(|e| TrainError::io(path, e))
}

/// Trains `config.num_epochs` epochs on one fold.
pub fn train_fold(
    config: &ResolvedConfiguration,
    dataset: &[Volume],
    folds: &FoldAssignment,
    fold: usize,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainingState, TrainError> {
    FoldTrainer::new(config, dataset, folds, fold, seed, options)?.run()
}
