//! Pretraining with the two-phase masking schedule, per-instance test-time
//! adaptation (reset or sequential), and multi-run evaluation of the method variants.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Instance;
use crate::masking::{self, MaskError, MaskState, ModelInput, Phase};
use crate::metrics::{self, ConfusionReport, MetricError, MetricsReport, ScoredTimestamp};
use crate::model::{Architecture, FeatureStats, ModelError, ModelState};
use crate::objectives::{
    self, LossWeights, ObjectiveError, OtInputs, PreparedInstance, TrainOptions, TrainTerms,
};
use crate::transport::{self, TransportError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("no training data")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Method variants: no adaptation, plain SSL adaptation, and the three masking/OT
/// combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TEST")]
    Test,
    #[serde(rename = "TTT")]
    Ttt,
    #[serde(rename = "PriTTT")]
    PriTtt,
    #[serde(rename = "DynTTT")]
    DynTtt,
    #[serde(rename = "AdaTTT")]
    AdaTtt,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Test,
        Method::Ttt,
        Method::PriTtt,
        Method::DynTtt,
        Method::AdaTtt,
    ];

    pub fn adapts(self) -> bool {
        self != Method::Test
    }

    /// Relevance-driven masking, both in pretraining and at test time.
    pub fn dynamic_masking(self) -> bool {
        matches!(self, Method::Test | Method::PriTtt | Method::AdaTtt)
    }

    pub fn uses_ot(self) -> bool {
        matches!(self, Method::DynTtt | Method::AdaTtt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Test => "TEST",
            Method::Ttt => "TTT",
            Method::PriTtt => "PriTTT",
            Method::DynTtt => "DynTTT",
            Method::AdaTtt => "AdaTTT",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown method {s:?} (TEST, TTT, PriTTT, DynTTT, AdaTTT)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Reset,
    Sequential,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "reset" => Ok(Mode::Reset),
            "sequential" => Ok(Mode::Sequential),
            _ => Err(format!("unknown mode {s:?} (reset, sequential)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub method: Method,
    pub ttt_steps: usize,
    pub ttt_lr: f64,
    pub mode: Mode,
    pub warmup_epochs: usize,
    pub prior: f64,
    pub k: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Keep the parameters of the epoch with the best validation AUC.
    pub early_stopping: bool,
    /// Global-norm gradient clip in pretraining; 0 disables.
    pub grad_clip: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Soft-assignment temperature for the balance gradient.
    pub temperature: f64,
    /// Training instances per epoch used to recompute relevance.
    pub relevance_samples: usize,
    pub epsilon: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    /// Draw the transport duplicates once per instance instead of at every step.
    pub freeze_duplicates: bool,
    /// Independent evaluation runs (seeds `seed, seed+1, ...`).
    pub runs: usize,
    pub parallel: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            method: Method::AdaTtt,
            ttt_steps: 5,
            ttt_lr: 1e-3,
            mode: Mode::Reset,
            warmup_epochs: 5,
            prior: 0.5,
            k: 4,
            weights: LossWeights::default(),
            seed: 0,
            epochs: 8,
            batch_size: 64,
            lr: 0.003,
            momentum: 0.9,
            early_stopping: true,
            grad_clip: 5.0,
            hidden: vec![64, 64],
            embed_dim: 32,
            temperature: 1.0,
            relevance_samples: 512,
            epsilon: transport::DEFAULT_EPSILON,
            sinkhorn_max_iter: transport::DEFAULT_MAX_ITER,
            sinkhorn_tol: transport::DEFAULT_TOL,
            freeze_duplicates: false,
            runs: 1,
            parallel: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.ttt_steps == 0 {
            return bad("ttt_steps must be >= 1");
        }
        if !(self.ttt_lr >= 0.0) || !self.ttt_lr.is_finite() {
            return bad("ttt_lr must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.prior) {
            return bad("prior must be in [0, 1]");
        }
        if self.k < 2 {
            return bad("k must be >= 2");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("epochs and batch_size must be >= 1");
        }
        if self.runs == 0 {
            return bad("runs must be >= 1");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be > 0 and momentum in [0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.temperature > 0.0) {
            return bad("epsilon and temperature must be > 0");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be >= 1");
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Sequential mode takes one step per data point.
    pub fn effective_steps(&self) -> usize {
        match self.mode {
            Mode::Reset => self.ttt_steps,
            Mode::Sequential => 1,
        }
    }

    pub fn architecture(&self, input_dim: usize, gated_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            gated_dim,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            k: self.k,
        }
    }
}

/// One standardized timestamp ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub encounter_id: String,
    pub time: f64,
    pub x: Vec<f64>,
    pub dt: Vec<f64>,
    pub label: f64,
    pub positive_encounter: bool,
    pub t0: Option<f64>,
}

pub fn fit_stats(instances: &[Instance], seed: u64) -> Result<FeatureStats> {
    let rows: Vec<Vec<f64>> = instances.iter().map(|i| i.features.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFEA7);
    Ok(FeatureStats::fit(&rows, &mut rng)?)
}

pub fn to_samples(instances: &[Instance], stats: &FeatureStats) -> Vec<Sample> {
    instances
        .iter()
        .map(|i| Sample {
            encounter_id: i.encounter_id.clone(),
            time: i.time,
            x: stats.standardize(&i.features),
            dt: i.dt.clone(),
            label: i.label,
            positive_encounter: i.positive_encounter,
            t0: i.t0,
        })
        .collect()
}

/// FNV-1a over the identifying fields, finished with a splitmix64 round.
pub fn instance_seed(global: u64, run: u64, encounter_id: &str, time: f64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&global.to_le_bytes());
    eat(&run.to_le_bytes());
    eat(encounter_id.as_bytes());
    eat(&time.to_bits().to_le_bytes());
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Short hex digest of a probability vector, for log lines.
pub fn digest(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub terms: TrainTerms,
    pub auc: Option<f64>,
    pub mask_probs_digest: String,
    pub mask_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub model: ModelState,
    pub mask: MaskState,
    /// Youden-optimal threshold on the validation split.
    pub threshold: f64,
    pub val_auc: Option<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn scores(model: &ModelState, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| Ok(model.risk(&s.x, &s.dt)?))
        .collect()
}

fn labels(samples: &[Sample]) -> Vec<f64> {
    samples.iter().map(|s| s.label).collect()
}

fn auc_or_none(scores: &[f64], labels: &[f64]) -> Option<f64> {
    metrics::auc(scores, labels).ok()
}

fn clip(grads: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

/// Mini-batch momentum descent on the joint objective. Masking follows the prior
/// for the first `warmup_epochs` epochs, then (for dynamic methods) relevance from
/// the model as it stood at the end of the previous epoch. Prototypes are seeded
/// from the embeddings of `k` random training instances after epoch 1, and the
/// prototype terms switch on from then.
pub fn pretrain(
    stats: FeatureStats,
    gated_dim: usize,
    train: &[Sample],
    val: &[Sample],
    cfg: &EngineConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Pretrained> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(EngineError::NoData);
    }
    let d = stats.mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModelState::new(cfg.architecture(d, gated_dim), stats, &mut rng)?;
    let mut mask = MaskState::warmup(d, cfg.prior);
    let mut velocity = vec![0.0; model.layout().total()];
    let mut protos_ready = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let dynamic = cfg.method.dynamic_masking();
    let mut best: Option<(f64, usize, crate::model::Snapshot, MaskState)> = None;

    for epoch in 1..=cfg.epochs {
        if dynamic {
            let picks = rand::seq::index::sample(
                &mut rng,
                train.len(),
                cfg.relevance_samples.min(train.len()).max(1),
            );
            let batch: Vec<ModelInput<'_>> = picks
                .iter()
                .map(|i| ModelInput {
                    x: &train[i].x,
                    dt: &train[i].dt,
                })
                .collect();
            let rel = masking::compute_relevance(&model, &batch)?;
            mask = masking::advance_schedule(&mask, epoch, cfg.warmup_epochs, &rel);
        }

        order.shuffle(&mut rng);
        let opts = TrainOptions {
            weights: cfg.weights,
            temperature: cfg.temperature,
            use_prototypes: protos_ready,
        };
        let mut loss_sum = 0.0;
        let mut terms = TrainTerms::default();
        let mut nb = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    objectives::prepare_with_state(&model, &s.x, &s.dt, s.label, &mask, &mut rng)
                })
                .collect::<std::result::Result<Vec<PreparedInstance>, _>>()?;
            let obj = objectives::objective_train(&model, &batch, &opts)?;
            if !obj.surrogate.is_finite() || obj.grads.iter().any(|g| !g.is_finite()) {
                return Err(EngineError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                });
            }
            let mut grads = obj.grads;
            clip(&mut grads, cfg.grad_clip);
            let mut params = model.flatten();
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                *v = cfg.momentum * *v - cfg.lr * g;
                *p += *v;
            }
            model.unflatten(&params)?;
            loss_sum += obj.value;
            terms.main += obj.terms.main;
            terms.ssl += obj.terms.ssl;
            terms.proto += obj.terms.proto;
            terms.reg_hard += obj.terms.reg_hard;
            terms.reg_soft += obj.terms.reg_soft;
            nb += 1;
        }

        if !protos_ready {
            let picks = rand::seq::index::sample(&mut rng, train.len(), cfg.k.min(train.len()));
            for (j, i) in picks.iter().enumerate() {
                model.prototypes[j] = model.encode(&train[i].x, &train[i].dt)?.0;
            }
            protos_ready = true;
        }

        let n = nb as f64;
        terms.main /= n;
        terms.ssl /= n;
        terms.proto /= n;
        terms.reg_hard /= n;
        terms.reg_soft /= n;
        let auc = if val.is_empty() {
            None
        } else {
            auc_or_none(&scores(&model, val)?, &labels(val))
        };
        let entry = EpochLog {
            epoch,
            phase: mask.phase,
            loss: loss_sum / n,
            terms,
            auc,
            mask_probs_digest: digest(&mask.probs),
            mask_probs: mask.probs.clone(),
        };
        on_epoch(&entry);
        log.push(entry);
        if cfg.early_stopping {
            if let Some(a) = auc {
                if best.as_ref().is_none_or(|(b, ..)| a > *b) {
                    best = Some((a, epoch, model.snapshot(), mask.clone()));
                }
            }
        }
    }
    let mut best_epoch = cfg.epochs;
    if let Some((_, epoch, snap, m)) = best {
        model.restore(&snap)?;
        mask = m;
        best_epoch = epoch;
    }

    let (threshold, val_auc) = if val.is_empty() {
        (0.5, None)
    } else {
        let s = scores(&model, val)?;
        let l = labels(val);
        (
            metrics::youden_threshold(&s, &l).unwrap_or(0.5),
            auc_or_none(&s, &l),
        )
    };
    Ok(Pretrained {
        model,
        mask,
        threshold,
        val_auc,
        best_epoch,
        log,
    })
}

/// Per-instance adaptation record. `risk[0]` is the unadapted score and `risk[s]`
/// the score after `s` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub objective: Vec<f64>,
    pub ssl: Vec<f64>,
    pub ot: Vec<f64>,
    pub mask_probs: Vec<Vec<f64>>,
    pub sinkhorn_iterations: Vec<usize>,
    pub risk: Vec<f64>,
    pub prediction: f64,
    /// Adaptation produced a non-finite loss and the unadapted score was used.
    pub fallback: bool,
}

fn masking_probs(model: &ModelState, x: &[f64], dt: &[f64], cfg: &EngineConfig) -> Result<Vec<f64>> {
    if cfg.method.dynamic_masking() {
        let rel = masking::instance_relevance(model, x, dt)?;
        if rel.iter().all(|r| r.is_finite()) {
            return Ok(masking::relevance_to_probs(&rel, cfg.prior));
        }
    }
    Ok(vec![cfg.prior; x.len()])
}

/// `steps` descent steps on the test objective without any restore. On a
/// non-finite loss the caller's snapshot must be restored.
fn descend<R: rand::Rng + ?Sized>(
    model: &mut ModelState,
    x: &[f64],
    dt: &[f64],
    cfg: &EngineConfig,
    steps: usize,
    rng: &mut R,
    trace: &mut AdaptationTrace,
) -> Result<bool> {
    let adaptable = model.layout().adaptable();
    let mut frozen_noise: Option<Vec<Vec<f64>>> = None;
    for _ in 0..steps {
        let probs = masking_probs(model, x, dt, cfg)?;
        let prep = objectives::prepare_instance(model, x, dt, 0.0, &probs, rng)?;
        let ot_parts = if cfg.method.uses_ot() {
            let z = model.encode(x, dt)?;
            let aug = match &frozen_noise {
                Some(noise) => transport::AugmentedSet {
                    rows: noise
                        .iter()
                        .map(|n| z.0.iter().zip(n).map(|(a, b)| a + b).collect())
                        .collect(),
                    noise: noise.clone(),
                },
                None => transport::augment(&z.0, &model.prototypes, rng)?,
            };
            if cfg.freeze_duplicates && frozen_noise.is_none() {
                frozen_noise = Some(aug.noise.clone());
            }
            let cost = transport::cost_matrix(&aug.rows, &model.prototypes);
            let u = transport::uniform(model.prototypes.len());
            match transport::sinkhorn(&cost, &u, &u, cfg.epsilon, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol) {
                Ok(plan) => Some((aug, plan)),
                Err(TransportError::NonFinite(_)) => return Ok(false),
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        let ot = ot_parts.as_ref().map(|(augmented, plan)| OtInputs { augmented, plan });
        let obj = match objectives::objective_test(model, &prep, ot, &cfg.weights) {
            Ok(o) => o,
            Err(ObjectiveError::InfeasiblePlan(_)) => return Ok(false),
            Err(e) => return Err(e.into()),
        };
        if !obj.value.is_finite() || obj.grads.iter().any(|g| !g.is_finite()) {
            return Ok(false);
        }
        let mut params = model.flatten();
        for i in adaptable.clone() {
            params[i] -= cfg.ttt_lr * obj.grads[i];
        }
        model.unflatten(&params)?;
        let r = model.risk(x, dt)?;
        if !r.is_finite() {
            return Ok(false);
        }
        trace.objective.push(obj.value);
        trace.ssl.push(obj.ssl);
        trace.ot.push(obj.ot);
        trace.mask_probs.push(probs);
        trace.sinkhorn_iterations
            .push(ot_parts.as_ref().map_or(0, |(_, p)| p.iterations_used));
        trace.risk.push(r);
    }
    Ok(true)
}

fn empty_trace(risk0: f64) -> AdaptationTrace {
    AdaptationTrace {
        objective: Vec::new(),
        ssl: Vec::new(),
        ot: Vec::new(),
        mask_probs: Vec::new(),
        sinkhorn_iterations: Vec::new(),
        risk: vec![risk0],
        prediction: risk0,
        fallback: false,
    }
}

/// Adapt the encoder to one input and score it. In reset mode the model is
/// restored afterwards, so repeated calls leave it bitwise unchanged; in
/// sequential mode the single step is kept. A non-finite loss restores the
/// pre-call state and returns the unadapted score.
pub fn adapt_instance<R: rand::Rng + ?Sized>(
    model: &mut ModelState,
    x: &[f64],
    dt: &[f64],
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<AdaptationTrace> {
    let risk0 = model.risk(x, dt)?;
    let mut trace = empty_trace(risk0);
    if !cfg.method.adapts() {
        return Ok(trace);
    }
    let snap = model.snapshot();
    let ok = descend(model, x, dt, cfg, cfg.effective_steps(), rng, &mut trace)?;
    if ok {
        trace.prediction = *trace.risk.last().expect("risk has the unadapted entry");
        if cfg.mode == Mode::Reset {
            model.restore(&snap)?;
        }
    } else {
        model.restore(&snap)?;
        trace.fallback = true;
        trace.prediction = risk0;
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub encounter_id: String,
    pub time: f64,
    pub label: f64,
    pub trace: AdaptationTrace,
}

fn adapt_sample(model: &mut ModelState, s: &Sample, cfg: &EngineConfig, run: u64) -> Result<InstanceResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(cfg.seed, run, &s.encounter_id, s.time));
    let trace = adapt_instance(model, &s.x, &s.dt, cfg, &mut rng)?;
    Ok(InstanceResult {
        encounter_id: s.encounter_id.clone(),
        time: s.time,
        label: s.label,
        trace,
    })
}

/// Reset-mode scoring of every sample; parallel runs give the same results as
/// serial ones because every instance draws from its own seeded generator.
pub fn adapt_all(model: &ModelState, samples: &[Sample], cfg: &EngineConfig, run: u64) -> Result<Vec<InstanceResult>> {
    if cfg.parallel {
        samples
            .par_iter()
            .map_init(|| model.clone(), |m, s| adapt_sample(m, s, cfg, run))
            .collect()
    } else {
        let mut m = model.clone();
        samples.iter().map(|s| adapt_sample(&mut m, s, cfg, run)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub encounters: usize,
    pub timestamps: usize,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    pub results: Vec<InstanceResult>,
    pub cumulative: Vec<CumulativePoint>,
    pub model: ModelState,
}

/// Sequential adaptation over an ordered stream: one retained step per data point,
/// with the cumulative AUC recorded each time an encounter ends.
pub fn adapt_stream(model: &ModelState, samples: &[Sample], cfg: &EngineConfig, run: u64) -> Result<StreamResult> {
    if cfg.mode != Mode::Sequential {
        return Err(EngineError::Config("adapt_stream needs mode=sequential".into()));
    }
    let mut m = model.clone();
    let mut results = Vec::with_capacity(samples.len());
    let mut cumulative = Vec::new();
    let mut sc = Vec::with_capacity(samples.len());
    let mut lb = Vec::with_capacity(samples.len());
    let mut encounters = 0;
    for (i, s) in samples.iter().enumerate() {
        let r = adapt_sample(&mut m, s, cfg, run)?;
        sc.push(r.trace.prediction);
        lb.push(s.label);
        results.push(r);
        let ends = samples
            .get(i + 1)
            .is_none_or(|n| n.encounter_id != s.encounter_id);
        if ends {
            encounters += 1;
            cumulative.push(CumulativePoint {
                encounters,
                timestamps: sc.len(),
                auc: auc_or_none(&sc, &lb),
            });
        }
    }
    Ok(StreamResult {
        results,
        cumulative,
        model: m,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: u64,
    pub auc: f64,
    pub brier: f64,
    /// AUC of `risk[s]` for `s = 0..=steps`.
    pub step_auc: Vec<f64>,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub runs: Vec<RunSummary>,
    /// Per-instance results of the first run.
    pub first_run: Vec<InstanceResult>,
    pub cumulative: Option<Vec<CumulativePoint>>,
}

fn summarize(run: u64, results: &[InstanceResult]) -> Result<RunSummary> {
    let lb: Vec<f64> = results.iter().map(|r| r.label).collect();
    let pred: Vec<f64> = results.iter().map(|r| r.trace.prediction).collect();
    let steps = results.iter().map(|r| r.trace.risk.len()).max().unwrap_or(1);
    let step_auc = (0..steps)
        .map(|s| {
            let sc: Vec<f64> = results
                .iter()
                .map(|r| r.trace.risk.get(s).copied().unwrap_or(r.trace.prediction))
                .collect();
            metrics::auc(&sc, &lb)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(RunSummary {
        run,
        auc: metrics::auc(&pred, &lb)?,
        brier: metrics::brier(&pred, &lb)?,
        step_auc,
        fallbacks: results.iter().filter(|r| r.trace.fallback).count(),
    })
}

/// Score every timestamp `cfg.runs` times with run-specific seeds, then report
/// mean ± s.e. of AUC and Brier and the encounter confusion of the first run.
pub fn evaluate_method(
    model: &ModelState,
    test: &[Sample],
    cfg: &EngineConfig,
    threshold: f64,
    site: &str,
) -> Result<Evaluation> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.runs);
    let mut first_run = Vec::new();
    let mut cumulative = None;
    for run in 0..cfg.runs as u64 {
        let results = match cfg.mode {
            Mode::Reset => adapt_all(model, test, cfg, run)?,
            Mode::Sequential => {
                let s = adapt_stream(model, test, cfg, run)?;
                if run == 0 {
                    cumulative = Some(s.cumulative);
                }
                s.results
            }
        };
        runs.push(summarize(run, &results)?);
        if run == 0 {
            first_run = results;
        }
    }
    let scored: Vec<ScoredTimestamp> = first_run
        .iter()
        .zip(test)
        .map(|(r, s)| ScoredTimestamp {
            encounter_id: s.encounter_id.clone(),
            time: s.time,
            score: r.trace.prediction,
            label: s.label,
            positive_encounter: s.positive_encounter,
            t0: s.t0,
        })
        .collect();
    let confusion: ConfusionReport = metrics::encounter_confusion(&scored, threshold)?;
    let auc = metrics::aggregate(&runs.iter().map(|r| r.auc).collect::<Vec<_>>())?;
    let brier = metrics::aggregate(&runs.iter().map(|r| r.brier).collect::<Vec<_>>())?;
    Ok(Evaluation {
        report: MetricsReport {
            method: cfg.method.name().to_string(),
            site: site.to_string(),
            auc_mean: auc.mean,
            auc_se: auc.se,
            brier_mean: brier.mean,
            brier_se: brier.se,
            confusion,
            runs: cfg.runs,
        },
        runs,
        first_run,
        cumulative,
    })
}
