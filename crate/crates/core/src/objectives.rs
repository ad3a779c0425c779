//! Loss terms and the two composite objectives (pretraining and test-time).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::masking::{self, MaskDraw, MaskError, MaskState};
use crate::model::{nearest, ModelError, ModelState, Trainable};
use crate::transport::{AugmentedSet, TransportPlan};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

/// Marginal residual above which a transport plan is rejected.
pub const PLAN_FEASIBILITY_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("masked index set is empty")]
    EmptyMask,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("balance regularization needs k >= 2, got {0}")]
    TooFewPrototypes(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("transport plan infeasible: {0}")]
    InfeasiblePlan(String),
    #[error("loss weights must be finite and nonnegative")]
    InvalidWeights,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

impl From<DiffError> for ObjectiveError {
    fn from(e: DiffError) -> Self {
        ObjectiveError::Model(ModelError::Diff(e))
    }
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub proto: f64,
    pub reg: f64,
    pub ot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 0.5,
            proto: 0.5,
            reg: 0.5,
            ot: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.recon, self.proto, self.reg, self.ot]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(ObjectiveError::InvalidWeights)
        }
    }
}

pub fn loss_recon(x: &[f64], xhat: &[f64]) -> f64 {
    let d = x.len() as f64;
    x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d
}

pub fn loss_mfm(x: &[f64], xhat: &[f64], masked: &[usize]) -> Result<f64> {
    if masked.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    let s: f64 = masked.iter().map(|&j| (x[j] - xhat[j]).powi(2)).sum();
    Ok(s / masked.len() as f64)
}

pub fn loss_ssl(x: &[f64], xhat: &[f64], masked: &[usize], lambda_recon: f64) -> Result<f64> {
    Ok(lambda_recon * loss_recon(x, xhat) + loss_mfm(x, xhat, masked)?)
}

/// Binary cross-entropy with clamped probability.
pub fn loss_main(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Squared distance to the nearest prototype.
pub fn loss_proto(z: &[f64], prototypes: &[Vec<f64>]) -> Result<f64> {
    Ok(nearest(prototypes, z)?.1)
}

/// `Σ_j (frac_j − 1/k)²` over hard assignment counts.
pub fn loss_balance(assignments: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(ObjectiveError::TooFewPrototypes(k));
    }
    if assignments.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        if a >= k {
            return Err(ObjectiveError::LengthMismatch(a, k));
        }
        counts[a] += 1;
    }
    let n = assignments.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| (c as f64 / n - 1.0 / k as f64).powi(2))
        .sum())
}

pub fn recon_on_tape(tape: &mut Tape, target: Var, xhat: Var) -> Result<Var> {
    let sq = tape.sq_diff(target, xhat)?;
    Ok(tape.mean(sq))
}

pub fn mfm_on_tape(tape: &mut Tape, target: Var, xhat: Var, masked: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        return Err(ObjectiveError::EmptyMask);
    }
    let t = tape.gather(target, masked)?;
    let h = tape.gather(xhat, masked)?;
    let sq = tape.sq_diff(t, h)?;
    Ok(tape.mean(sq))
}

pub fn ssl_on_tape(
    tape: &mut Tape,
    target: Var,
    xhat: Var,
    masked: &[usize],
    lambda_recon: f64,
) -> Result<Var> {
    let r = recon_on_tape(tape, target, xhat)?;
    let r = tape.scale(r, lambda_recon);
    let m = mfm_on_tape(tape, target, xhat, masked)?;
    Ok(tape.add(r, m)?)
}

pub fn bce_on_tape(tape: &mut Tape, logit: Var, y: f64) -> Var {
    let p = tape.sigmoid(logit);
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = tape.ln(p);
    let q = tape.scale(p, -1.0);
    let q = tape.add_scalar(q, 1.0);
    let lq = tape.ln(q);
    let a = tape.scale(lp, -y);
    let b = tape.scale(lq, -(1.0 - y));
    tape.add(a, b).expect("scalar shapes")
}

/// Soft assignment fractions `mean_i softmax_j(−‖z_i − p_j‖²/τ)` and their
/// squared deviation from `1/k`.
pub fn balance_soft_on_tape(
    tape: &mut Tape,
    zs: &[Var],
    prototypes: &[Var],
    temperature: f64,
) -> Result<Var> {
    let k = prototypes.len();
    if k < 2 {
        return Err(ObjectiveError::TooFewPrototypes(k));
    }
    if zs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut total: Option<Var> = None;
    for &z in zs {
        let mut neg = Vec::with_capacity(k);
        for &p in prototypes {
            let d = tape.sq_diff(z, p)?;
            let d = tape.sum(d);
            neg.push(tape.scale(d, -1.0 / temperature));
        }
        let logits = tape.concat(&neg)?;
        let q = tape.softmax(logits);
        total = Some(match total {
            None => q,
            Some(t) => tape.add(t, q)?,
        });
    }
    let frac = tape.scale(total.expect("nonempty"), 1.0 / zs.len() as f64);
    let dev = tape.add_scalar(frac, -1.0 / k as f64);
    let sq = tape.square(dev);
    Ok(tape.sum(sq))
}

/// One instance with its mask draw and corrupted copy already sampled, so that
/// objective evaluation is a deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInstance {
    pub x: Vec<f64>,
    pub dt: Vec<f64>,
    pub label: f64,
    pub corrupted: Vec<f64>,
    pub mask: MaskDraw,
}

pub fn prepare_instance<R: Rng + ?Sized>(
    model: &ModelState,
    x: &[f64],
    dt: &[f64],
    label: f64,
    probs: &[f64],
    rng: &mut R,
) -> Result<PreparedInstance> {
    let mask = masking::sample_mask(probs, rng);
    let corrupted = masking::corrupt(x, &mask, &model.feature_stats, rng)?;
    Ok(PreparedInstance {
        x: x.to_vec(),
        dt: dt.to_vec(),
        label,
        corrupted,
        mask,
    })
}

/// Convenience wrapper drawing from a [`MaskState`].
pub fn prepare_with_state<R: Rng + ?Sized>(
    model: &ModelState,
    x: &[f64],
    dt: &[f64],
    label: f64,
    state: &MaskState,
    rng: &mut R,
) -> Result<PreparedInstance> {
    prepare_instance(model, x, dt, label, &state.probs, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub weights: LossWeights,
    /// Soft-assignment temperature for the balance gradient.
    pub temperature: f64,
    /// Prototype terms are skipped until prototypes have been initialized.
    pub use_prototypes: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            temperature: 1.0,
            use_prototypes: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTerms {
    pub main: f64,
    pub ssl: f64,
    pub proto: f64,
    pub reg_hard: f64,
    pub reg_soft: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainObjective {
    /// Batch-averaged objective with the balance term from hard counts.
    pub value: f64,
    /// The differentiated objective: balance term from soft assignments.
    pub surrogate: f64,
    pub terms: TrainTerms,
    /// Gradient of `surrogate` in [`ModelState::flatten`] order.
    pub grads: Vec<f64>,
}

/// Batch-averaged `L_main + L_ssl + λ_proto·L_proto`, plus `λ_reg·L_reg` once per batch.
pub fn objective_train(
    model: &ModelState,
    batch: &[PreparedInstance],
    opts: &TrainOptions,
) -> Result<TrainObjective> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    opts.weights.validate()?;
    let w = opts.weights;
    let n = batch.len() as f64;
    let mut tape = Tape::with_capacity(batch.len() * 48 + 32);
    let b = model.bind(&mut tape, Trainable::All)?;

    let mut terms = TrainTerms::default();
    let mut per_instance: Option<Var> = None;
    let mut zs = Vec::with_capacity(batch.len());
    let mut hard = Vec::with_capacity(batch.len());
    for inst in batch {
        let xv = tape.constant(Tensor::vector(inst.x.clone()));
        let z = model.encode_on_tape(&mut tape, &b, xv, &inst.dt)?;
        let logit = model.logit_on_tape(&mut tape, &b, z)?;
        let main = bce_on_tape(&mut tape, logit, inst.label);
        terms.main += tape.scalar(main) / n;

        let xc = tape.constant(Tensor::vector(inst.corrupted.clone()));
        let zc = model.encode_on_tape(&mut tape, &b, xc, &inst.dt)?;
        let xhat = model.ssl_on_tape(&mut tape, &b, zc)?;
        let ssl = ssl_on_tape(&mut tape, xv, xhat, &inst.mask.indices, w.recon)?;
        terms.ssl += tape.scalar(ssl) / n;

        let mut li = tape.add(main, ssl)?;
        if opts.use_prototypes {
            let (j, _) = nearest(&model.prototypes, tape.value(z).data())?;
            hard.push(j);
            let d = tape.sq_diff(z, b.prototypes[j])?;
            let proto = tape.sum(d);
            terms.proto += tape.scalar(proto) / n;
            let wp = tape.scale(proto, w.proto);
            li = tape.add(li, wp)?;
        }
        zs.push(z);
        per_instance = Some(match per_instance {
            None => li,
            Some(acc) => tape.add(acc, li)?,
        });
    }
    let mean = tape.scale(per_instance.expect("nonempty batch"), 1.0 / n);
    let mut total = mean;
    let mut value = tape.scalar(mean);
    if opts.use_prototypes {
        let soft = balance_soft_on_tape(&mut tape, &zs, &b.prototypes, opts.temperature)?;
        terms.reg_soft = tape.scalar(soft);
        terms.reg_hard = loss_balance(&hard, model.prototypes.len())?;
        value += w.reg * terms.reg_hard;
        let ws = tape.scale(soft, w.reg);
        total = tape.add(total, ws)?;
    }
    tape.backward(total)?;
    Ok(TrainObjective {
        value,
        surrogate: tape.scalar(total),
        terms,
        grads: model.gather_grads(&tape, &b),
    })
}

/// Transport term inputs: the augmentation noise and the (constant) plan.
#[derive(Debug, Clone, Copy)]
pub struct OtInputs<'a> {
    pub augmented: &'a AugmentedSet,
    pub plan: &'a TransportPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestObjective {
    pub value: f64,
    pub ssl: f64,
    pub ot: f64,
    /// Gradient in [`ModelState::flatten`] order; only the adaptable range is nonzero.
    pub grads: Vec<f64>,
}

fn check_plan(plan: &TransportPlan, k: usize) -> Result<()> {
    if plan.gamma.len() != k || plan.gamma.iter().any(|r| r.len() != k) {
        return Err(ObjectiveError::InfeasiblePlan(format!("plan is not {k}×{k}")));
    }
    if plan.gamma.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ObjectiveError::InfeasiblePlan("negative or non-finite mass".into()));
    }
    let u = crate::transport::uniform(k);
    let (r, c) = plan.marginal_residuals(&u, &u);
    if r > PLAN_FEASIBILITY_TOL || c > PLAN_FEASIBILITY_TOL {
        return Err(ObjectiveError::InfeasiblePlan(format!(
            "marginal residuals {r:.3e}/{c:.3e}"
        )));
    }
    Ok(())
}

/// `L_ssl(x′) + λ_ot·Σ γ_ij ‖z′ + n_i − p_j‖²` with γ held constant; only the
/// encoder and TSLM gate receive gradients.
pub fn objective_test(
    model: &ModelState,
    inst: &PreparedInstance,
    ot: Option<OtInputs<'_>>,
    weights: &LossWeights,
) -> Result<TestObjective> {
    weights.validate()?;
    let mut tape = Tape::with_capacity(96);
    let b = model.bind(&mut tape, Trainable::EncoderOnly)?;
    let xv = tape.constant(Tensor::vector(inst.x.clone()));
    let xc = tape.constant(Tensor::vector(inst.corrupted.clone()));
    let zc = model.encode_on_tape(&mut tape, &b, xc, &inst.dt)?;
    let xhat = model.ssl_on_tape(&mut tape, &b, zc)?;
    let ssl = ssl_on_tape(&mut tape, xv, xhat, &inst.mask.indices, weights.recon)?;
    let ssl_value = tape.scalar(ssl);
    let mut total = ssl;
    let mut ot_value = 0.0;

    if let Some(OtInputs { augmented, plan }) = ot {
        let k = model.prototypes.len();
        check_plan(plan, k)?;
        if augmented.noise.len() != k {
            return Err(ObjectiveError::LengthMismatch(augmented.noise.len(), k));
        }
        let z = model.encode_on_tape(&mut tape, &b, xv, &inst.dt)?;
        // Σ_ij γ_ij‖z − t_ij‖² with t_ij = p_j − n_i equals M‖z − c‖² + R, where
        // M = Σγ, c = Σγ·t / M and R = Σγ‖t‖² − M‖c‖²; one tape node instead of k².
        let dz = model.arch.embed_dim;
        let mut mass = 0.0;
        let mut first = vec![0.0; dz];
        let mut second = 0.0;
        for (i, noise) in augmented.noise.iter().enumerate() {
            for (j, p) in model.prototypes.iter().enumerate() {
                let g = plan.gamma[i][j];
                if g == 0.0 {
                    continue;
                }
                mass += g;
                for ((f, pv), nv) in first.iter_mut().zip(p).zip(noise) {
                    let t = pv - nv;
                    *f += g * t;
                    second += g * t * t;
                }
            }
        }
        if mass > 0.0 {
            let c: Vec<f64> = first.iter().map(|f| f / mass).collect();
            let rest = second - mass * c.iter().map(|v| v * v).sum::<f64>();
            let cv = tape.constant(Tensor::vector(c));
            let d = tape.sq_diff(z, cv)?;
            let d = tape.sum(d);
            let d = tape.scale(d, mass);
            let a = tape.add_scalar(d, rest);
            ot_value = tape.scalar(a);
            let wa = tape.scale(a, weights.ot);
            total = tape.add(total, wa)?;
        }
    }
    tape.backward(total)?;
    Ok(TestObjective {
        value: tape.scalar(total),
        ssl: ssl_value,
        ot: ot_value,
        grads: model.gather_grads(&tape, &b),
    })
}
