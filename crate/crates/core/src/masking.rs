//! Feature-aware masking: gradient-times-input relevance, min–max probabilities,
//! Bernoulli mask draws, reservoir replacement, and the warm-up/adaptive schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Tape, Tensor};
use crate::model::{FeatureStats, ModelError, ModelState, Trainable};

/// Empty draws are retried this many times before forcing a feature in.
pub const MAX_RESAMPLES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("relevance batch is empty")]
    EmptyBatch,
    #[error("non-finite relevance gradient for instance {0}")]
    NonFinite(usize),
    #[error("empty replacement reservoir for feature {0}")]
    EmptyReservoir(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MaskError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub relevance: Vec<f64>,
    pub probs: Vec<f64>,
    pub phase: Phase,
    pub prior: f64,
}

impl MaskState {
    pub fn warmup(d: usize, prior: f64) -> Self {
        Self {
            relevance: vec![0.0; d],
            probs: vec![prior; d],
            phase: Phase::Warmup,
            prior,
        }
    }
}

/// Binary mask `m` and the index set `M = {j : m_j = 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskDraw {
    pub mask: Vec<bool>,
    pub indices: Vec<usize>,
}

impl MaskDraw {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let indices = mask
            .iter()
            .enumerate()
            .filter_map(|(j, &m)| m.then_some(j))
            .collect();
        Self { mask, indices }
    }
}

/// Standardized input with its recency vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<'a> {
    pub x: &'a [f64],
    pub dt: &'a [f64],
}

/// `|∂logit/∂x_j · x_j|` for one instance, gradient taken w.r.t. the standardized
/// input of the pre-sigmoid logit.
pub fn instance_relevance(model: &ModelState, x: &[f64], dt: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::with_capacity(48);
    let b = model.bind(&mut tape, Trainable::Nothing)?;
    let xv = tape.leaf(Tensor::vector(x.to_vec()));
    let z = model.encode_on_tape(&mut tape, &b, xv, dt)?;
    let l = model.logit_on_tape(&mut tape, &b, z)?;
    tape.backward(l).map_err(ModelError::from)?;
    Ok(tape
        .adjoint(xv)
        .data()
        .iter()
        .zip(x)
        .map(|(g, v)| (g * v).abs())
        .collect())
}

/// Batch-averaged gradient-times-input relevance.
pub fn compute_relevance(model: &ModelState, batch: &[ModelInput<'_>]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(MaskError::EmptyBatch);
    }
    let mut acc = vec![0.0; model.arch.input_dim];
    for (i, inst) in batch.iter().enumerate() {
        let r = instance_relevance(model, inst.x, inst.dt)?;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(MaskError::NonFinite(i));
        }
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = batch.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Min–max normalization; all-equal relevances map to `prior`.
pub fn relevance_to_probs(relevance: &[f64], prior: f64) -> Vec<f64> {
    let lo = relevance.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = relevance.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 || !span.is_finite() {
        return vec![prior; relevance.len()];
    }
    relevance
        .iter()
        .map(|&r| ((r - lo) / span).clamp(0.0, 1.0))
        .collect()
}

/// Independent Bernoulli draws; never returns an empty set.
pub fn sample_mask<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> MaskDraw {
    for _ in 0..=MAX_RESAMPLES {
        let mask: Vec<bool> = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
        if mask.iter().any(|&m| m) {
            return MaskDraw::from_mask(mask);
        }
    }
    let mut best = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = j;
        }
    }
    let mut mask = vec![false; probs.len()];
    if !mask.is_empty() {
        mask[best] = true;
    }
    MaskDraw::from_mask(mask)
}

/// Replace masked coordinates with a uniform draw from that feature's reservoir.
pub fn corrupt<R: Rng + ?Sized>(
    x: &[f64],
    draw: &MaskDraw,
    stats: &FeatureStats,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if draw.mask.len() != x.len() {
        return Err(MaskError::LengthMismatch(draw.mask.len(), x.len()));
    }
    let mut out = x.to_vec();
    for &j in &draw.indices {
        let res = stats
            .reservoirs
            .get(j)
            .filter(|r| !r.is_empty())
            .ok_or(MaskError::EmptyReservoir(j))?;
        out[j] = res[rng.random_range(0..res.len())];
    }
    Ok(out)
}

/// Two-phase schedule: prior probabilities through epoch `warmup_epochs`, then
/// min–max relevance from the previous epoch.
pub fn advance_schedule(
    state: &MaskState,
    epoch: usize,
    warmup_epochs: usize,
    latest_relevance: &[f64],
) -> MaskState {
    if epoch <= warmup_epochs {
        MaskState {
            relevance: latest_relevance.to_vec(),
            probs: vec![state.prior; state.probs.len()],
            phase: Phase::Warmup,
            prior: state.prior,
        }
    } else {
        MaskState {
            relevance: latest_relevance.to_vec(),
            probs: relevance_to_probs(latest_relevance, state.prior),
            phase: Phase::Adaptive,
            prior: state.prior,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Dense};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_model(w: &[f64]) -> ModelState {
        let d = w.len();
        let arch = Architecture {
            input_dim: d,
            gated_dim: 0,
            hidden: vec![],
            embed_dim: d,
            k: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ModelState::new(arch, FeatureStats::identity(d, vec![7.0]), &mut rng).unwrap();
        m.encoder[0] = Dense::identity(d);
        m.main_head = Dense {
            rows: 1,
            cols: d,
            weight: w.to_vec(),
            bias: vec![0.0],
        };
        m
    }

    #[test]
    fn linear_relevance_is_weight_times_input() {
        let m = linear_model(&[2.0, -1.0]);
        let x = [3.0, 4.0];
        let r = compute_relevance(&m, &[ModelInput { x: &x, dt: &[] }]).unwrap();
        assert_eq!(r, vec![6.0, 4.0]);
    }

    #[test]
    fn zero_inputs_have_zero_relevance() {
        let m = linear_model(&[2.0, -1.0]);
        let a = [0.0, 1.0];
        let b = [0.0, -2.0];
        let r = compute_relevance(
            &m,
            &[ModelInput { x: &a, dt: &[] }, ModelInput { x: &b, dt: &[] }],
        )
        .unwrap();
        assert_eq!(r[0], 0.0);
        assert_eq!(r[1], 1.5);
    }

    #[test]
    fn sign_flip_symmetry_on_linear_model() {
        let m = linear_model(&[0.7, -1.3, 2.1]);
        let flipped = linear_model(&[-0.7, 1.3, -2.1]);
        let x = [1.5, 0.2, -0.9];
        let nx: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = compute_relevance(&m, &[ModelInput { x: &x, dt: &[] }]).unwrap();
        let b = compute_relevance(&flipped, &[ModelInput { x: &nx, dt: &[] }]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = linear_model(&[1.0]);
        assert_eq!(compute_relevance(&m, &[]), Err(MaskError::EmptyBatch));
    }

    #[test]
    fn minmax_probabilities() {
        assert_eq!(relevance_to_probs(&[1.0, 3.0, 5.0], 0.5), vec![0.0, 0.5, 1.0]);
        assert_eq!(relevance_to_probs(&[2.0, 2.0, 2.0], 0.5), vec![0.5; 3]);
        assert_eq!(relevance_to_probs(&[0.0, 10.0], 0.5), vec![0.0, 1.0]);
    }

    #[test]
    fn mask_boundary_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = sample_mask(&[0.0; 5], &mut rng);
        assert_eq!(d.indices.len(), 1);
        let d = sample_mask(&[0.0, 0.2, 0.0], &mut rng);
        assert_eq!(d.indices.len(), 1);
        let d = sample_mask(&[1.0; 4], &mut rng);
        assert_eq!(d.indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn forced_feature_is_argmax() {
        // Probabilities this small never fire in 11 attempts with this seed.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = sample_mask(&[1e-12, 3e-12, 2e-12], &mut rng);
        assert_eq!(d.indices, vec![1]);
    }

    #[test]
    fn corruption_rules() {
        let stats = FeatureStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
            reservoirs: vec![vec![9.0], vec![-4.0], vec![1.0, 2.0]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = [0.1, 0.2, 0.3];
        let none = MaskDraw::from_mask(vec![false; 3]);
        assert_eq!(corrupt(&x, &none, &stats, &mut rng).unwrap(), x.to_vec());
        let some = MaskDraw::from_mask(vec![true, false, false]);
        let c = corrupt(&x, &some, &stats, &mut rng).unwrap();
        assert_eq!(c[0], 9.0);
        assert_eq!(c[1].to_bits(), x[1].to_bits());
        assert_eq!(c[2].to_bits(), x[2].to_bits());

        let empty = FeatureStats {
            reservoirs: vec![vec![], vec![1.0], vec![1.0]],
            ..stats
        };
        assert_eq!(
            corrupt(&x, &some, &empty, &mut rng),
            Err(MaskError::EmptyReservoir(0))
        );
    }

    #[test]
    fn schedule_phases() {
        let s = MaskState::warmup(3, 0.5);
        let i = [1.0, 3.0, 5.0];
        let w = advance_schedule(&s, 5, 5, &i);
        assert_eq!(w.phase, Phase::Warmup);
        assert_eq!(w.probs, vec![0.5; 3]);
        let a = advance_schedule(&s, 6, 5, &i);
        assert_eq!(a.phase, Phase::Adaptive);
        assert_eq!(a.probs, vec![0.0, 0.5, 1.0]);
        let z = advance_schedule(&s, 1, 0, &i);
        assert_eq!(z.phase, Phase::Adaptive);
    }
}
