//! Glue between raw encounters and the engine: source train/validation split,
//! preprocessing fit on the training encounters, and the standard shifted benchmark.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{self, DataError, Encounter, Preprocessor, ShiftSpec, SynthConfig};
use crate::engine::{self, EngineConfig, EngineError, Pretrained, Sample};
use crate::model::FeatureStats;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Fraction of source encounters held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Everything needed to pretrain on the source and score the target.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub pre: Preprocessor,
    pub stats: FeatureStats,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub target: Vec<Sample>,
}

impl Benchmark {
    pub fn gated_dim(&self) -> usize {
        self.pre.dynamic()
    }
}

/// Split by encounter (stratified by label) so no encounter straddles the split.
pub fn split_source(source: &[Encounter], seed: u64) -> (Vec<Encounter>, Vec<Encounter>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_11D);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for positive in [true, false] {
        let mut group: Vec<&Encounter> = source.iter().filter(|e| e.label == positive).collect();
        group.shuffle(&mut rng);
        let nv = ((group.len() as f64) * VALIDATION_FRACTION).round() as usize;
        for (i, e) in group.into_iter().enumerate() {
            if i < nv {
                val.push(e.clone());
            } else {
                train.push(e.clone());
            }
        }
    }
    let key = |e: &Encounter| e.id.clone();
    train.sort_by_key(key);
    val.sort_by_key(key);
    (train, val)
}

/// Preprocessing and standardization fit on the training part of `source`.
pub fn prepare_source(source: &[Encounter], statics: usize, seed: u64) -> Result<Benchmark> {
    let (train_enc, val_enc) = split_source(source, seed);
    let pre = Preprocessor::fit(&train_enc, statics)?;
    let train_raw = pre.all_instances(&train_enc)?;
    let stats = engine::fit_stats(&train_raw, seed)?;
    let train = engine::to_samples(&train_raw, &stats);
    let val = engine::to_samples(&pre.all_instances(&val_enc)?, &stats);
    Ok(Benchmark {
        pre,
        stats,
        train,
        val,
        target: Vec::new(),
    })
}

/// Target timestamps through a fitted preprocessor and frozen statistics.
pub fn target_samples(pre: &Preprocessor, stats: &FeatureStats, target: &[Encounter]) -> Result<Vec<Sample>> {
    Ok(engine::to_samples(&pre.all_instances(target)?, stats))
}

pub fn build(source: &[Encounter], target: &[Encounter], statics: usize, seed: u64) -> Result<Benchmark> {
    let mut bench = prepare_source(source, statics, seed)?;
    bench.target = target_samples(&bench.pre, &bench.stats, target)?;
    Ok(bench)
}

/// Covariate plus label-prior shift used for the directional comparisons.
pub fn standard_shift(features: usize, seed: u64) -> ShiftSpec {
    let mut scale = vec![1.0; features];
    let mut offset = vec![0.0; features];
    for j in 0..features {
        match j % 3 {
            0 => offset[j] = 3.0,
            1 => scale[j] = 1.5,
            _ => {}
        }
    }
    ShiftSpec {
        scale,
        offset,
        prior_ratio: 1.5,
        missingness: 0.1,
        noise: 0.3,
        seed,
    }
}

pub fn standard_benchmark(cfg: &SynthConfig, seed: u64) -> Result<Benchmark> {
    let shift = standard_shift(cfg.features, seed);
    let (source, target) = datagen::synth_generate(cfg, &shift, seed)?;
    build(&source, &target, cfg.statics, seed)
}

/// Pretrain with the masking regime `cfg.method` calls for.
pub fn pretrain(bench: &Benchmark, cfg: &EngineConfig, on_epoch: impl FnMut(&engine::EpochLog)) -> Result<Pretrained> {
    Ok(engine::pretrain(
        bench.stats.clone(),
        bench.gated_dim(),
        &bench.train,
        &bench.val,
        cfg,
        on_epoch,
    )?)
}
