//! Encounter data: a seeded synthetic generator with controllable domain shift, the
//! CSV interchange format, hourly binning with carry-forward imputation, and the
//! derived baseline/trend/recency features.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Carried values expire after this many hours of staleness.
pub const CARRY_FORWARD_HOURS: f64 = 24.0;
/// Recency is capped here; never-measured features report the cap.
pub const DT_CAP_HOURS: f64 = 72.0;
/// Trailing window for the baseline feature.
pub const BASELINE_WINDOW_HOURS: f64 = 72.0;
/// Positive timestamps fall in `(T0 − PREDICTION_WINDOW_HOURS, T0]`.
pub const PREDICTION_WINDOW_HOURS: f64 = 24.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("bad header: {0}")]
    Header(String),
    #[error("need at least 2 encounters per class, got {positives} positive / {negatives} negative")]
    TooFewPerClass { positives: usize, negatives: usize },
    #[error("invalid shift: {0}")]
    InvalidShift(String),
    #[error("feature count mismatch: expected {expected}, got {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One raw measurement row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Hours since admission.
    pub time: f64,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub id: String,
    pub rows: Vec<Observation>,
    pub label: bool,
    /// Event time for positive encounters.
    pub t0: Option<f64>,
    pub site: String,
}

/// Covariate and label shift applied to the target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Per-feature scale about the feature's population mean; missing entries are 1.
    pub scale: Vec<f64>,
    /// Per-feature additive offset in raw units; missing entries are 0.
    pub offset: Vec<f64>,
    /// Target prevalence = source prevalence × this ratio.
    pub prior_ratio: f64,
    /// Extra missingness probability on top of the source rate.
    pub missingness: f64,
    /// Extra Gaussian noise, in units of each feature's within-patient sd.
    pub noise: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn identity(seed: u64) -> Self {
        Self {
            scale: Vec::new(),
            offset: Vec::new(),
            prior_ratio: 1.0,
            missingness: 0.0,
            noise: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(DataError::InvalidShift("scale must be > 0".into()));
        }
        if self.offset.iter().any(|o| !o.is_finite()) {
            return Err(DataError::InvalidShift("offset must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.missingness) {
            return Err(DataError::InvalidShift("missingness outside [0,1]".into()));
        }
        if !(self.prior_ratio > 0.0) || !self.prior_ratio.is_finite() {
            return Err(DataError::InvalidShift("prior_ratio must be > 0".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(DataError::InvalidShift("noise must be >= 0".into()));
        }
        Ok(())
    }

    fn scale_of(&self, j: usize) -> f64 {
        self.scale.get(j).copied().unwrap_or(1.0)
    }

    fn offset_of(&self, j: usize) -> f64 {
        self.offset.get(j).copied().unwrap_or(0.0)
    }
}

/// Size and shape of a synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_source: usize,
    pub n_target: usize,
    /// Time-varying features.
    pub features: usize,
    /// One-hot static columns appended after the time-varying ones.
    pub statics: usize,
    pub prevalence: f64,
    pub min_hours: usize,
    pub max_hours: usize,
    pub base_missingness: f64,
    pub ar_coef: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_source: 2000,
            n_target: 500,
            features: 6,
            statics: 3,
            prevalence: 0.06,
            min_hours: 8,
            max_hours: 30,
            base_missingness: 0.1,
            ar_coef: 0.8,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Latent structure shared by both domains.
struct World {
    mean: Vec<f64>,
    sd: Vec<f64>,
    drift: Vec<f64>,
    static_effect: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.features;
        let mean = (0..d).map(|j| 20.0 + 15.0 * j as f64).collect();
        let sd: Vec<f64> = (0..d).map(|_| rng.random_range(1.0..4.0)).collect();
        let drift = sd
            .iter()
            .map(|s| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * rng.random_range(0.3..0.8) * s
            })
            .collect();
        let static_effect = (0..cfg.statics.max(1))
            .map(|_| {
                sd.iter()
                    .map(|s| 0.3 * s * gauss(rng))
                    .collect()
            })
            .collect();
        Self {
            mean,
            sd,
            drift,
            static_effect,
        }
    }
}

fn category_probs(statics: usize, positive: bool) -> Vec<f64> {
    let w: Vec<f64> = (0..statics)
        .map(|c| {
            let t = if statics > 1 { c as f64 / (statics - 1) as f64 } else { 0.0 };
            if positive {
                1.0 + 1.5 * t
            } else {
                2.5 - 1.5 * t
            }
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn draw_category(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    probs.len().saturating_sub(1)
}

fn generate_domain(
    cfg: &SynthConfig,
    world: &World,
    n: usize,
    prevalence: f64,
    shift: Option<&ShiftSpec>,
    site: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Encounter>> {
    let positives = ((n as f64) * prevalence).round() as usize;
    let negatives = n.saturating_sub(positives);
    if positives < 2 || negatives < 2 {
        return Err(DataError::TooFewPerClass {
            positives,
            negatives,
        });
    }
    let mut labels: Vec<bool> = (0..n).map(|i| i < positives).collect();
    // Fisher–Yates so positives are spread through the file
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }

    let d = cfg.features;
    let innov = (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt();
    let extra_missing = shift.map_or(0.0, |s| s.missingness);
    let missing = 1.0 - (1.0 - cfg.base_missingness) * (1.0 - extra_missing);
    let mut out = Vec::with_capacity(n);
    for (e, &label) in labels.iter().enumerate() {
        let len = rng.random_range(cfg.min_hours..=cfg.max_hours);
        let t0 = (len - 1) as f64;
        let cat = if cfg.statics > 0 {
            draw_category(&category_probs(cfg.statics, label), rng)
        } else {
            0
        };
        let patient: Vec<f64> = world
            .sd
            .iter()
            .map(|s| 0.5 * s * gauss(rng))
            .collect();
        let mut ar: Vec<f64> = world
            .sd
            .iter()
            .map(|s| 0.5 * s * gauss(rng))
            .collect();
        let mut rows = Vec::with_capacity(len);
        for t in 0..len {
            let time = t as f64;
            let ramp = if label {
                (1.0 - (t0 - time) / PREDICTION_WINDOW_HOURS).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut values = Vec::with_capacity(d + cfg.statics);
            for j in 0..d {
                if t > 0 {
                    let eps = gauss(rng);
                    ar[j] = cfg.ar_coef * ar[j] + innov * 0.5 * world.sd[j] * eps;
                }
                let class_shift = if label { 0.3 * world.drift[j] } else { 0.0 };
                let mut v = world.mean[j]
                    + world.static_effect[cat.min(world.static_effect.len() - 1)][j]
                    + patient[j]
                    + class_shift
                    + ramp * world.drift[j]
                    + ar[j];
                if let Some(s) = shift {
                    v = world.mean[j] + s.scale_of(j) * (v - world.mean[j]) + s.offset_of(j);
                    if s.noise > 0.0 {
                        let nz = Normal::new(0.0, s.noise * world.sd[j]).expect("noise sd > 0");
                        v += nz.sample(rng);
                    }
                }
                let observed = rng.random::<f64>() >= missing;
                values.push(observed.then_some(v));
            }
            for c in 0..cfg.statics {
                values.push(Some(if c == cat { 1.0 } else { 0.0 }));
            }
            rows.push(Observation { time, values });
        }
        out.push(Encounter {
            id: format!("{site}-{e:05}"),
            rows,
            label,
            t0: label.then_some(t0),
            site: site.to_string(),
        });
    }
    Ok(out)
}

/// Source and target cohorts from one seed. The target shares the generative
/// process and is then passed through `shift`.
pub fn synth_generate(
    cfg: &SynthConfig,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(Vec<Encounter>, Vec<Encounter>)> {
    shift.validate()?;
    let mut world_rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::new(cfg, &mut world_rng);
    let mut src_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0001);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(seed ^ shift.seed.rotate_left(17) ^ 0x5EED_0002);
    let source = generate_domain(cfg, &world, cfg.n_source, cfg.prevalence, None, "source", &mut src_rng)?;
    let target_prev = (cfg.prevalence * shift.prior_ratio).min(0.5);
    let target = generate_domain(
        cfg,
        &world,
        cfg.n_target,
        target_prev,
        Some(shift),
        "target",
        &mut tgt_rng,
    )?;
    Ok((source, target))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// Write encounters as `encounter_id,timestamp_h,label,t0_h,f_0,...,f_{d-1}`.
pub fn write_csv<W: Write>(encounters: &[Encounter], out: W) -> Result<()> {
    let d = encounters
        .first()
        .and_then(|e| e.rows.first())
        .map_or(0, |r| r.values.len());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec![
        "encounter_id".to_string(),
        "timestamp_h".into(),
        "label".into(),
        "t0_h".into(),
    ];
    header.extend((0..d).map(|j| format!("f_{j}")));
    w.write_record(&header)?;
    for e in encounters {
        for r in &e.rows {
            if r.values.len() != d {
                return Err(DataError::FeatureMismatch {
                    expected: d,
                    got: r.values.len(),
                });
            }
            let mut rec = vec![
                e.id.clone(),
                format!("{:?}", r.time),
                if e.label { "1".into() } else { "0".into() },
                fmt_opt(e.t0),
            ];
            rec.extend(r.values.iter().map(|v| fmt_opt(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(encounters: &[Encounter], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(encounters, std::io::BufWriter::new(f))
}

/// Encounter dropped during ingestion, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejected {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub encounters: Vec<Encounter>,
    pub rejected: Vec<Rejected>,
    pub features: usize,
}

fn parse_opt(s: &str, line: u64, what: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| DataError::Malformed {
            line,
            msg: format!("{what}: cannot parse {s:?}"),
        })
}

/// Parse and validate a CSV in the interchange schema. Malformed rows fail the whole
/// file; encounters with non-increasing timestamps, inconsistent labels, or a
/// positive label without `t0_h` are rejected individually.
pub fn ingest_csv<R: Read>(input: R, site: &str) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    let fixed = ["encounter_id", "timestamp_h", "label", "t0_h"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(h, f)| h.trim() != f) {
        return Err(DataError::Header(format!(
            "expected {} then f_0..f_{{d-1}}",
            fixed.join(",")
        )));
    }
    let d = header.len() - fixed.len();
    for (j, h) in header.iter().skip(fixed.len()).enumerate() {
        if h.trim() != format!("f_{j}") {
            return Err(DataError::Header(format!("column {} should be f_{j}, got {h}", j + 4)));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, (Vec<Observation>, Vec<(bool, Option<f64>)>)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(DataError::Malformed {
                line,
                msg: format!("expected {} fields, got {}", header.len(), rec.len()),
            });
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(DataError::Malformed {
                line,
                msg: "empty encounter_id".into(),
            });
        }
        let time = parse_opt(&rec[1], line, "timestamp_h")?.ok_or_else(|| DataError::Malformed {
            line,
            msg: "missing timestamp_h".into(),
        })?;
        let label = match rec[2].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(DataError::Malformed {
                    line,
                    msg: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let t0 = parse_opt(&rec[3], line, "t0_h")?;
        let values = (0..d)
            .map(|j| parse_opt(&rec[4 + j], line, "feature"))
            .collect::<Result<Vec<_>>>()?;
        let entry = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(Observation { time, values });
        entry.1.push((label, t0));
    }

    let mut encounters = Vec::new();
    let mut rejected = Vec::new();
    for id in order {
        let (rows, meta) = by_id.remove(&id).expect("id recorded");
        let reject = |reason: String| Rejected {
            id: id.clone(),
            reason,
        };
        if let Some(w) = rows.windows(2).find(|w| !(w[1].time > w[0].time)) {
            rejected.push(reject(format!(
                "timestamps not strictly increasing at {} -> {}",
                w[0].time, w[1].time
            )));
            continue;
        }
        if meta.windows(2).any(|w| w[0] != w[1]) {
            rejected.push(reject("label or t0_h varies within encounter".into()));
            continue;
        }
        let (label, t0) = meta[0];
        if label && t0.is_none() {
            rejected.push(reject("positive encounter without t0_h".into()));
            continue;
        }
        encounters.push(Encounter {
            id,
            rows,
            label,
            t0: if label { t0 } else { None },
            site: site.to_string(),
        });
    }
    Ok(Ingested {
        encounters,
        rejected,
        features: d,
    })
}

pub fn ingest_csv_file(path: &Path, site: &str) -> Result<Ingested> {
    let f = std::fs::File::open(path)?;
    ingest_csv(std::io::BufReader::new(f), site)
}

/// Hourly grid of imputed values with staleness.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    /// Bin start hours.
    pub hours: Vec<f64>,
    /// Imputed value per bin and feature.
    pub values: Vec<Vec<f64>>,
    /// Hours since the last actual measurement, capped.
    pub dt: Vec<Vec<f64>>,
    /// Median of actual measurements in the bin, if any.
    pub measured: Vec<Vec<Option<f64>>>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Bin by hour (median within a bin), carry the last measurement forward for up to
/// 24 hours, and fall back to the training mean after that.
pub fn impute(enc: &Encounter, train_means: &[f64]) -> Result<Grid> {
    let d = train_means.len();
    let Some(first) = enc.rows.first() else {
        return Ok(Grid {
            hours: vec![],
            values: vec![],
            dt: vec![],
            measured: vec![],
        });
    };
    if first.values.len() != d {
        return Err(DataError::FeatureMismatch {
            expected: d,
            got: first.values.len(),
        });
    }
    let start = first.time.floor();
    let end = enc.rows.last().expect("nonempty").time.floor();
    let nbins = (end - start) as usize + 1;

    let mut buckets: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); d]; nbins];
    for r in &enc.rows {
        if r.values.len() != d {
            return Err(DataError::FeatureMismatch {
                expected: d,
                got: r.values.len(),
            });
        }
        let b = (r.time.floor() - start) as usize;
        for (j, v) in r.values.iter().enumerate() {
            if let Some(v) = v {
                buckets[b][j].push(*v);
            }
        }
    }

    let mut grid = Grid {
        hours: Vec::with_capacity(nbins),
        values: Vec::with_capacity(nbins),
        dt: Vec::with_capacity(nbins),
        measured: Vec::with_capacity(nbins),
    };
    let mut last: Vec<Option<(f64, f64)>> = vec![None; d];
    for (b, bucket) in buckets.iter_mut().enumerate() {
        let hour = start + b as f64;
        let mut vals = vec![0.0; d];
        let mut dts = vec![0.0; d];
        let mut meas = vec![None; d];
        for j in 0..d {
            if !bucket[j].is_empty() {
                let m = median(&mut bucket[j]);
                meas[j] = Some(m);
                last[j] = Some((hour, m));
            }
            match last[j] {
                Some((h, v)) => {
                    let stale = hour - h;
                    vals[j] = if stale <= CARRY_FORWARD_HOURS { v } else { train_means[j] };
                    dts[j] = stale.min(DT_CAP_HOURS);
                }
                None => {
                    vals[j] = train_means[j];
                    dts[j] = DT_CAP_HOURS;
                }
            }
        }
        grid.hours.push(hour);
        grid.values.push(vals);
        grid.dt.push(dts);
        grid.measured.push(meas);
    }
    Ok(grid)
}

/// Per timestamp: `[values(d), baseline(d), trend(d), dt(d), statics]`, where the
/// trailing `statics` columns of the grid pass through unchanged.
///
/// Baseline is the mean of actual measurements in the trailing 72h window (the
/// current value when there are none); trend is the latest actual measurement minus
/// the one before it while the value is still carried, otherwise 0.
pub fn derive_features(grid: &Grid, statics: usize) -> Vec<Vec<f64>> {
    let total = grid.values.first().map_or(0, Vec::len);
    let d = total.saturating_sub(statics);
    let mut history: Vec<Vec<(f64, f64)>> = vec![Vec::new(); d];
    let mut out = Vec::with_capacity(grid.hours.len());
    for (t, &hour) in grid.hours.iter().enumerate() {
        let mut row = Vec::with_capacity(4 * d + statics);
        let mut baseline = Vec::with_capacity(d);
        let mut trend = Vec::with_capacity(d);
        for j in 0..d {
            if let Some(m) = grid.measured[t][j] {
                history[j].push((hour, m));
            }
            let cur = grid.values[t][j];
            let window: Vec<f64> = history[j]
                .iter()
                .rev()
                .take_while(|(h, _)| hour - h < BASELINE_WINDOW_HOURS)
                .map(|(_, v)| *v)
                .collect();
            baseline.push(if window.is_empty() {
                cur
            } else {
                window.iter().sum::<f64>() / window.len() as f64
            });
            let carried = grid.dt[t][j] <= CARRY_FORWARD_HOURS && !history[j].is_empty();
            let h = &history[j];
            trend.push(if carried && h.len() >= 2 {
                h[h.len() - 1].1 - h[h.len() - 2].1
            } else {
                0.0
            });
        }
        row.extend_from_slice(&grid.values[t][..d]);
        row.extend(baseline);
        row.extend(trend);
        row.extend_from_slice(&grid.dt[t][..d]);
        row.extend_from_slice(&grid.values[t][d..]);
        out.push(row);
    }
    out
}

/// One scored timestamp, before standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub encounter_id: String,
    pub time: f64,
    pub features: Vec<f64>,
    /// Recency of the time-varying features (the gated block).
    pub dt: Vec<f64>,
    pub label: f64,
    pub positive_encounter: bool,
    pub t0: Option<f64>,
}

/// Settings needed to turn raw encounters into model inputs; persisted with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub raw_means: Vec<f64>,
    pub statics: usize,
}

impl Preprocessor {
    /// Means over all actual measurements in the training encounters.
    pub fn fit(encounters: &[Encounter], statics: usize) -> Result<Self> {
        let d = encounters
            .iter()
            .find_map(|e| e.rows.first())
            .map_or(0, |r| r.values.len());
        if statics > d {
            return Err(DataError::FeatureMismatch {
                expected: d,
                got: statics,
            });
        }
        let mut sum = vec![0.0; d];
        let mut cnt = vec![0usize; d];
        for e in encounters {
            for r in &e.rows {
                for (j, v) in r.values.iter().enumerate().take(d) {
                    if let Some(v) = v {
                        sum[j] += v;
                        cnt[j] += 1;
                    }
                }
            }
        }
        let raw_means = sum
            .iter()
            .zip(&cnt)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        Ok(Self { raw_means, statics })
    }

    pub fn dynamic(&self) -> usize {
        self.raw_means.len() - self.statics
    }

    pub fn input_dim(&self) -> usize {
        4 * self.dynamic() + self.statics
    }

    pub fn instances(&self, enc: &Encounter) -> Result<Vec<Instance>> {
        let grid = impute(enc, &self.raw_means)?;
        let feats = derive_features(&grid, self.statics);
        let d = self.dynamic();
        Ok(grid
            .hours
            .iter()
            .zip(feats)
            .enumerate()
            .map(|(t, (&hour, features))| {
                let label = match enc.t0 {
                    Some(t0) if enc.label => {
                        (hour > t0 - PREDICTION_WINDOW_HOURS && hour <= t0) as u8 as f64
                    }
                    _ => 0.0,
                };
                Instance {
                    encounter_id: enc.id.clone(),
                    time: hour,
                    features,
                    dt: grid.dt[t][..d].to_vec(),
                    label,
                    positive_encounter: enc.label,
                    t0: enc.t0,
                }
            })
            .collect())
    }

    pub fn all_instances(&self, encounters: &[Encounter]) -> Result<Vec<Instance>> {
        let mut out = Vec::new();
        for e in encounters {
            out.extend(self.instances(e)?);
        }
        Ok(out)
    }
}
