//! The P-DRO simultaneous-gradient game.
//!
//! Each minibatch feeds both players computed from the *same* pre-update
//! state: the model takes a step on the importance-weighted loss while the
//! adversary takes a step on its own objective, then both updates are
//! applied. Three adversary updates are implemented:
//!
//! * `Relaxed` — gradient ascent on the exp(ℓ/τ)-weighted log-likelihood of
//!   the batch, normalized by a running window normalizer. This is the full
//!   method; the update always pulls the adversary toward (reweighted) data,
//!   which is what makes it stable.
//! * `Bare` — score-function gradient ascent on the raw zero-sum payoff,
//!   estimated from samples drawn from the adversary itself. Nothing
//!   anchors the adversary to the data, so it random-walks away; kept as an
//!   ablation and expected to diverge.
//! * `KlProjected` — the bare update followed by an exact projection onto
//!   the KL ball of radius κ around ψ₀ (Gaussian family only).
//!
//! A run is declared dead in two situations: parameters go non-finite, or
//! every importance weight of a batch underflows to exactly zero (the
//! adversary left the support of the data, so the model has no learning
//! signal left). Either way the run aborts with a diagnostic and its final
//! checkpoint records the degenerate all-negative predictor — on IEEE
//! semantics that is what a poisoned model outputs, since a NaN margin
//! never clears the decision threshold.
//!
//! Divergence (non-finite parameters) is not an error: the run stops,
//! records the last finite state as a final checkpoint and reports the
//! abort in the returned history.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::adversaries::{
    self, batch_log_weights, mle_fit, project_onto_kl_ball, AdversaryParams, AdversarySnapshot,
    FamilyConfig,
};
use crate::data::{Dataset, DatasetBundle, Example, Features};
use crate::math;
use crate::models::{self, ModelKind, ModelParams, Optimizer};
use crate::numerics::log_sum_exp;
use crate::rng::Rng;
use crate::{Error, Result};

/// Which adversary update the game runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Bare,
    KlProjected,
    Relaxed,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Bare => "bare",
            Variant::KlProjected => "kl_projected",
            Variant::Relaxed => "relaxed",
        }
    }
}

/// Adversary-side hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PdroHypers {
    pub variant: Variant,
    pub family: FamilyConfig,
    /// Temperature of the exponential tilt (Relaxed).
    pub tau: f64,
    /// Normalizer window length in batches (Relaxed).
    pub k_window: usize,
    /// Adversary learning rate λ.
    pub adv_lr: f64,
    /// KL ball radius (KlProjected).
    pub kappa: f64,
    /// Sample count of the bare estimator; defaults to the batch size.
    pub n_samples: Option<usize>,
    /// Optional cap W on importance weights (clamped to [1/W, W]).
    /// Off by default: the plain ratio is the object of interest.
    pub weight_clip: Option<f64>,
}

impl PdroHypers {
    pub fn relaxed(family: FamilyConfig, tau: f64, k_window: usize, adv_lr: f64) -> Self {
        PdroHypers {
            variant: Variant::Relaxed,
            family,
            tau,
            k_window,
            adv_lr,
            kappa: 1.0,
            n_samples: None,
            weight_clip: None,
        }
    }
}

/// Method selector shared by every trainer in the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodConfig {
    Erm,
    Pdro(PdroHypers),
    NonParam { kappa: f64 },
    GroupDro { eta: f64, soft: bool },
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Erm => "erm",
            MethodConfig::Pdro(h) => match h.variant {
                Variant::Bare => "pdro_bare",
                Variant::KlProjected => "pdro_kl",
                Variant::Relaxed => "pdro_relaxed",
            },
            MethodConfig::NonParam { .. } => "nonparam",
            MethodConfig::GroupDro { soft: false, .. } => "groupdro",
            MethodConfig::GroupDro { soft: true, .. } => "groupdro_soft",
        }
    }
}

/// One training run's full configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: MethodConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub model_lr: f64,
    /// Use the Adam rule instead of plain SGD for the model.
    pub adam: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.model_lr > 0.0) {
            return Err(Error::InvalidConfig("model_lr must be positive".into()));
        }
        if let MethodConfig::Pdro(h) = &self.method {
            if !(h.tau > 0.0) {
                return Err(Error::InvalidConfig("tau must be positive".into()));
            }
            if h.k_window == 0 {
                return Err(Error::InvalidConfig("k_window must be at least 1".into()));
            }
            if !(h.adv_lr >= 0.0) {
                return Err(Error::InvalidConfig("adv_lr must be non-negative".into()));
            }
            if h.variant == Variant::KlProjected && !(h.kappa > 0.0) {
                return Err(Error::InvalidConfig("kappa must be positive".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Running normalizer
// ---------------------------------------------------------------------------

/// Ring buffer realizing the windowed normalizer
/// Z̃ = (Σᵢ Σ_{x∈Bᵢ} e^{ℓ/τ}) / (Σᵢ |Bᵢ|) over the most recent k batches.
///
/// Batch totals are stored in log space, so the accumulator itself can never
/// overflow; only converting to the linear scale with [`Self::z`] can.
#[derive(Debug, Clone)]
pub struct RunningNormalizer {
    window: VecDeque<(f64, usize)>,
    cap: usize,
}

impl RunningNormalizer {
    pub fn new(k_window: usize) -> Self {
        RunningNormalizer { window: VecDeque::new(), cap: k_window.max(1) }
    }

    /// Push one batch of losses (evicting the oldest batch beyond the
    /// window).
    pub fn push(&mut self, batch_losses: &[f64], tau: f64) -> Result<()> {
        if batch_losses.is_empty() {
            return Err(Error::EmptyInput("RunningNormalizer::push"));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig("tau must be positive".into()));
        }
        let scaled: Vec<f64> = batch_losses.iter().map(|l| l / tau).collect();
        if !scaled.iter().all(|v| v.is_finite()) {
            return Err(Error::NormalizerOverflow);
        }
        let log_sum = log_sum_exp(&scaled)?;
        if self.window.len() == self.cap {
            self.window.pop_front();
        }
        self.window.push_back((log_sum, batch_losses.len()));
        Ok(())
    }

    /// log Z̃ over the current window; the form every in-training consumer
    /// uses.
    pub fn log_z(&self) -> f64 {
        let total: usize = self.window.iter().map(|(_, n)| n).sum();
        if total == 0 {
            return f64::NEG_INFINITY;
        }
        let logs: Vec<f64> = self.window.iter().map(|(s, _)| *s).collect();
        log_sum_exp(&logs).expect("window sums are finite") - math::ln(total as f64)
    }

    /// Z̃ on the linear scale.
    pub fn z(&self) -> f64 {
        math::exp(self.log_z())
    }

    /// Push a batch and return the new Z̃, signalling if the linear-scale
    /// value is not representable.
    pub fn update(&mut self, batch_losses: &[f64], tau: f64) -> Result<f64> {
        self.push(batch_losses, tau)?;
        let z = self.z();
        if !z.is_finite() {
            return Err(Error::NormalizerOverflow);
        }
        Ok(z)
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Game steps
// ---------------------------------------------------------------------------

/// Importance weights wᵢ = q_ψ(xᵢ,yᵢ) / q_ψ₀(xᵢ,yᵢ), computed in log space.
///
/// With `clip = Some(W)` the log-ratio is clamped to [−ln W, ln W]; the
/// default (`None`) is the plain ratio.
pub fn importance_weights(
    batch: &[&Example],
    psi: &AdversaryParams,
    psi0: &AdversaryParams,
    clip: Option<f64>,
) -> Result<Vec<f64>> {
    let log_w = batch_log_weights(batch, psi, psi0)?;
    let bound = clip.map(math::ln);
    log_w
        .into_iter()
        .map(|lw| {
            if !lw.is_finite() {
                return Err(Error::NonFinite("importance log-weight"));
            }
            let lw = match bound {
                Some(b) => lw.clamp(-b, b),
                None => lw,
            };
            Ok(math::exp(lw))
        })
        .collect()
}

/// One SGD step on the weighted loss: θ − lr · (1/|B|) Σ wᵢ ∇ℓᵢ.
pub fn model_step(
    batch: &[&Example],
    theta: &ModelParams,
    weights: &[f64],
    lr: f64,
) -> Result<ModelParams> {
    let grad = models::weighted_mean_grad(batch, theta, weights)?;
    let mut out = theta.clone();
    Optimizer::sgd().step(&mut out, &grad, lr);
    Ok(out)
}

/// Relaxed adversary ascent: ψ + λ · (1/|B|) Σ vᵢ ∇_ψ log q_ψ(xᵢ,yᵢ) with
/// vᵢ = exp(ℓᵢ/τ − log Z̃).
///
/// Because the normalizer window always contains the current batch, every
/// vᵢ is bounded by the window's total example count and the update cannot
/// overflow.
pub fn adversary_step_relaxed(
    batch: &[&Example],
    psi: &AdversaryParams,
    batch_losses: &[f64],
    log_z: f64,
    tau: f64,
    adv_lr: f64,
) -> Result<AdversaryParams> {
    if batch.len() != batch_losses.len() {
        return Err(Error::DimensionMismatch { expected: batch.len(), got: batch_losses.len() });
    }
    if !log_z.is_finite() {
        return Err(Error::NonFinite("log normalizer"));
    }
    let prepared = adversaries::prepare(psi)?;
    let mut acc = vec![0.0; psi.psi.len()];
    for (ex, &l) in batch.iter().zip(batch_losses) {
        let v = math::exp(l / tau - log_z);
        prepared.accumulate_grad(ex, v, &mut acc)?;
    }
    let scale = adv_lr / batch.len() as f64;
    let psi_new = psi.psi.iter().zip(&acc).map(|(p, a)| p + scale * a).collect();
    Ok(AdversaryParams { family: psi.family.clone(), psi: psi_new })
}

/// Bare zero-sum ascent via the score-function estimator: draw samples from
/// q_ψ and move along mean[ℓ(x̃,ỹ;θ) ∇_ψ log q_ψ(x̃,ỹ)]. The unknown density
/// ratio p/q_ψ₀ is treated as the constant 1. Gaussian family only.
pub fn adversary_step_bare(
    theta: &ModelParams,
    psi: &AdversaryParams,
    label_marginal: &[f64; 2],
    adv_lr: f64,
    rng: &mut Rng,
    n_samples: usize,
) -> Result<AdversaryParams> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be positive".into()));
    }
    let prepared = adversaries::prepare(psi)?;
    let mut acc = vec![0.0; psi.psi.len()];
    for _ in 0..n_samples {
        let drawn = adversaries::sample(psi, rng, label_marginal)?;
        let payoff = models::loss(&drawn, theta)?;
        prepared.accumulate_grad(&drawn, payoff, &mut acc)?;
    }
    let scale = adv_lr / n_samples as f64;
    let psi_new = psi.psi.iter().zip(&acc).map(|(p, a)| p + scale * a).collect();
    Ok(AdversaryParams { family: psi.family.clone(), psi: psi_new })
}

/// Bare step followed by exact projection onto the KL ball around ψ₀.
#[allow(clippy::too_many_arguments)]
pub fn adversary_step_kl_projected(
    theta: &ModelParams,
    psi: &AdversaryParams,
    psi0: &AdversaryParams,
    kappa: f64,
    label_marginal: &[f64; 2],
    adv_lr: f64,
    rng: &mut Rng,
    n_samples: usize,
) -> Result<AdversaryParams> {
    let stepped = adversary_step_bare(theta, psi, label_marginal, adv_lr, rng, n_samples)?;
    project_onto_kl_ball(&stepped, psi0, kappa)
}

// ---------------------------------------------------------------------------
// Run history
// ---------------------------------------------------------------------------

/// Sufficient statistics of one evaluation checkpoint: enough to replay any
/// selection criterion without the parameters themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub epoch: usize,
    /// log(q_ψt / q_ψ₀) per validation example; all zeros at record 0.
    pub log_weights: Vec<f64>,
    /// Validation loss per example under θt.
    pub losses: Vec<f64>,
    /// Validation 0-1 error per example under θt.
    pub errors: Vec<f64>,
    /// Mean training loss observed over the epoch's batches.
    pub train_loss: f64,
    pub params: Option<ModelParams>,
    pub adversary: Option<AdversaryParams>,
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct AbortInfo {
    pub epoch: usize,
    pub batch: usize,
    pub reason: String,
}

/// Ordered checkpoints and final state of one training run.
#[derive(Debug, Clone)]
pub struct RunHistory {
    pub config: TrainConfig,
    pub records: Vec<CheckpointRecord>,
    pub final_params: ModelParams,
    pub psi0: Option<AdversarySnapshot>,
    pub valid_fingerprint: u64,
    pub abort: Option<AbortInfo>,
}

impl RunHistory {
    pub fn last_epoch(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

/// Model shape implied by a dataset.
pub fn model_kind_for(ds: &Dataset) -> Result<ModelKind> {
    match ds.examples.first() {
        Some(Example { features: Features::Dense(x), .. }) => {
            Ok(ModelKind::Dense { dim: x.len() })
        }
        Some(Example { features: Features::Tokens(_), .. }) => {
            let vocab = ds
                .vocab_size
                .ok_or_else(|| Error::InvalidConfig("dataset has no vocabulary".into()))?;
            Ok(ModelKind::BagOfTokens { vocab: vocab as usize })
        }
        None => Err(Error::EmptyInput("model_kind_for")),
    }
}

/// Build the checkpoint for the current state.
pub(crate) fn make_record(
    epoch: usize,
    valid: &Dataset,
    theta: &ModelParams,
    log_weights: Vec<f64>,
    train_loss: f64,
    adversary: Option<AdversaryParams>,
) -> Result<CheckpointRecord> {
    let mut losses = Vec::with_capacity(valid.len());
    let mut errors = Vec::with_capacity(valid.len());
    for ex in &valid.examples {
        losses.push(models::loss(ex, theta)?);
        errors.push((models::predict(ex, theta)? != ex.label) as u8 as f64);
    }
    Ok(CheckpointRecord {
        epoch,
        log_weights,
        losses,
        errors,
        train_loss,
        params: Some(theta.clone()),
        adversary,
    })
}

pub(crate) fn mean_train_loss(train: &Dataset, theta: &ModelParams) -> Result<f64> {
    let mut total = 0.0;
    for ex in &train.examples {
        total += models::loss(ex, theta)?;
    }
    Ok(total / train.len().max(1) as f64)
}

/// Train the P-DRO game. ψ is initialized at the maximum-likelihood fit
/// ψ₀; for the importance-weighted variants the first gradient step then
/// coincides exactly with ERM's.
pub fn train_pdro(config: &TrainConfig, data: &DatasetBundle) -> Result<RunHistory> {
    config.validate()?;
    let hypers = match &config.method {
        MethodConfig::Pdro(h) => h.clone(),
        _ => return Err(Error::InvalidConfig("train_pdro needs a P-DRO method config".into())),
    };
    let kind = model_kind_for(&data.train)?;
    let psi0 = mle_fit(&data.train, &hypers.family)?;
    let mut psi = psi0.params().clone();
    let mut theta = ModelParams::zeros(kind);
    let mut optimizer = if config.adam {
        Optimizer::adam(theta.weights.len())
    } else {
        Optimizer::sgd()
    };
    let mut normalizer = RunningNormalizer::new(hypers.k_window);
    let label_marginal = data.train.label_marginal();
    // The sampler gets its own substream so that variants which draw samples
    // shuffle identically to those which do not.
    let mut rng = Rng::new(config.seed);
    let mut sampler_rng = Rng::new(config.seed ^ 0x5851_F42D_4C95_7F2D);

    let init_train_loss = mean_train_loss(&data.train, &theta)?;
    let mut records = vec![make_record(
        0,
        &data.valid,
        &theta,
        vec![0.0; data.valid.len()],
        init_train_loss,
        Some(psi.clone()),
    )?];
    let mut abort: Option<AbortInfo> = None;

    // Divergence is expected for the bare variants and possible for any
    // aggressive λ; keep the last finite adversary so an aborted run still
    // records usable checkpoint weights.
    let mut last_finite_psi = psi.clone();

    'training: for epoch in 1..=config.epochs {
        let order = rng.shuffled_indices(data.train.len());
        let mut epoch_loss_sum = 0.0;
        let mut epoch_loss_count = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> =
                chunk.iter().map(|&i| &data.train.examples[i]).collect();
            let losses = models::batch_losses(&batch, &theta)?;
            epoch_loss_sum += losses.iter().sum::<f64>();
            epoch_loss_count += losses.len();

            // Both players act on the same pre-update (θ, ψ).
            let stepped = (|| -> Result<(Vec<f64>, AdversaryParams)> {
                let weights =
                    importance_weights(&batch, &psi, psi0.params(), hypers.weight_clip)?;
                if weights.iter().all(|&w| w == 0.0) {
                    return Err(Error::NonFinite(
                        "importance weights (all underflowed to zero)",
                    ));
                }
                let grad = models::weighted_mean_grad(&batch, &theta, &weights)?;
                let n_samples = hypers.n_samples.unwrap_or(batch.len());
                let psi_next = match hypers.variant {
                    Variant::Relaxed => {
                        normalizer.push(&losses, hypers.tau)?;
                        adversary_step_relaxed(
                            &batch,
                            &psi,
                            &losses,
                            normalizer.log_z(),
                            hypers.tau,
                            hypers.adv_lr,
                        )?
                    }
                    Variant::Bare => adversary_step_bare(
                        &theta,
                        &psi,
                        &label_marginal,
                        hypers.adv_lr,
                        &mut sampler_rng,
                        n_samples,
                    )?,
                    Variant::KlProjected => adversary_step_kl_projected(
                        &theta,
                        &psi,
                        psi0.params(),
                        hypers.kappa,
                        &label_marginal,
                        hypers.adv_lr,
                        &mut sampler_rng,
                        n_samples,
                    )?,
                };
                Ok((grad, psi_next))
            })();
            let reason = match stepped {
                Ok((grad, psi_next)) => {
                    optimizer.step(&mut theta, &grad, config.model_lr);
                    psi = psi_next;
                    if theta.is_finite() && psi.is_finite() {
                        last_finite_psi.psi.copy_from_slice(&psi.psi);
                        continue;
                    }
                    let what = if theta.is_finite() { "adversary" } else { "model" };
                    format!("non-finite {what} parameters")
                }
                // Numerical blow-ups stop the run but keep its history.
                Err(Error::NonFinite(what)) => format!("non-finite {what}"),
                Err(Error::NormalizerOverflow) => {
                    "exp(loss/tau) overflowed the normalizer; raise tau".into()
                }
                Err(other) => return Err(other),
            };
            abort = Some(AbortInfo { epoch, batch: batch_no, reason });
            // The blow-up destroyed the model: a NaN-poisoned margin never
            // clears the decision threshold, so the faithful remnant is the
            // degenerate all-negative predictor, i.e. the zero model. The
            // adversary reverts to its last finite value for the record.
            theta = ModelParams::zeros(kind);
            psi = last_finite_psi.clone();
            let train_loss = epoch_loss_sum / epoch_loss_count.max(1) as f64;
            let valid_refs: Vec<&Example> = data.valid.examples.iter().collect();
            let log_w = batch_log_weights(&valid_refs, &psi, psi0.params())?;
            records.push(make_record(
                epoch,
                &data.valid,
                &theta,
                log_w,
                train_loss,
                Some(psi.clone()),
            )?);
            break 'training;
        }
        let valid_refs: Vec<&Example> = data.valid.examples.iter().collect();
        let log_w = batch_log_weights(&valid_refs, &psi, psi0.params())?;
        let train_loss = epoch_loss_sum / epoch_loss_count.max(1) as f64;
        records.push(make_record(
            epoch,
            &data.valid,
            &theta,
            log_w,
            train_loss,
            Some(psi.clone()),
        )?);
    }

    Ok(RunHistory {
        config: config.clone(),
        records,
        final_params: theta,
        psi0: Some(psi0),
        valid_fingerprint: data.valid.fingerprint(),
        abort,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversaries::{gaussian_kl, Family};
    use crate::data::{gen_toy_gaussian, GroupId, ToyTaskConfig};

    fn dense(x: Vec<f64>, label: u8) -> Example {
        Example { features: Features::Dense(x), label, group: 0 as GroupId, posterior: None }
    }

    fn gaussian(mu: Vec<f64>, sigma: f64) -> AdversaryParams {
        AdversaryParams { family: Family::Gaussian { sigma }, psi: mu }
    }

    fn small_bundle() -> DatasetBundle {
        let cfg = ToyTaskConfig {
            n_train: 400,
            n_valid: 150,
            n_test: 400,
            min_test_per_group: 2,
            ..ToyTaskConfig::default()
        };
        gen_toy_gaussian(&cfg, 5).unwrap()
    }

    #[test]
    fn weights_at_snapshot_are_exactly_one() {
        let bundle = small_bundle();
        let psi0 = mle_fit(&bundle.train, &FamilyConfig::Gaussian { sigma: None }).unwrap();
        let batch: Vec<&Example> = bundle.train.examples.iter().take(16).collect();
        let w = importance_weights(&batch, psi0.params(), psi0.params(), None).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn weight_of_a_point_grows_when_psi_moves_toward_it() {
        let psi0 = gaussian(vec![0.0, 0.0], 1.0);
        let x = dense(vec![2.0, 1.0], 0);
        let towards = gaussian(vec![1.0, 0.5], 1.0);
        let batch = [&x];
        let w0 = importance_weights(&batch, &psi0, &psi0, None).unwrap()[0];
        let w1 = importance_weights(&batch, &towards, &psi0, None).unwrap()[0];
        assert!(w1 > w0);
    }

    #[test]
    fn weights_match_direct_density_ratio() {
        let mut rng = Rng::new(33);
        let psi0 = gaussian(vec![0.1, -0.4], 1.2);
        for _ in 0..100 {
            let psi = gaussian(vec![rng.normal(), rng.normal()], 1.2);
            let ex = dense(vec![rng.normal() * 2.0, rng.normal() * 2.0], 0);
            let w = importance_weights(&[&ex], &psi, &psi0, None).unwrap()[0];
            let direct = math::exp(adversaries::log_density(&ex, &psi).unwrap())
                / math::exp(adversaries::log_density(&ex, &psi0).unwrap());
            assert!((w - direct).abs() / direct < 1e-10);
        }
    }

    #[test]
    fn weight_clip_caps_the_ratio() {
        let psi0 = gaussian(vec![0.0, 0.0], 1.0);
        let psi = gaussian(vec![6.0, 0.0], 1.0);
        let ex = dense(vec![6.0, 0.0], 0);
        let unclipped = importance_weights(&[&ex], &psi, &psi0, None).unwrap()[0];
        let clipped = importance_weights(&[&ex], &psi, &psi0, Some(10.0)).unwrap()[0];
        assert!(unclipped > 10.0);
        assert!((clipped - 10.0).abs() < 1e-12);
    }

    #[test]
    fn model_step_reductions() {
        let bundle = small_bundle();
        let batch: Vec<&Example> = bundle.train.examples.iter().take(8).collect();
        let theta = ModelParams {
            kind: ModelKind::Dense { dim: 2 },
            weights: vec![0.3, -0.2, 0.1],
        };
        // All-ones weights equal an unweighted step.
        let erm_grad = models::weighted_mean_grad(&batch, &theta, &vec![1.0; 8]).unwrap();
        let mut erm = theta.clone();
        Optimizer::sgd().step(&mut erm, &erm_grad, 0.1);
        let stepped = model_step(&batch, &theta, &vec![1.0; 8], 0.1).unwrap();
        assert_eq!(stepped.weights, erm.weights);
        // Zero weights leave θ untouched.
        let frozen = model_step(&batch, &theta, &vec![0.0; 8], 0.1).unwrap();
        assert_eq!(frozen.weights, theta.weights);
        // Weights [2, 0] equal a plain step on the first example alone.
        let two = model_step(&batch[..2], &theta, &[2.0, 0.0], 0.1).unwrap();
        let solo = model_step(&batch[..1], &theta, &[1.0], 0.1).unwrap();
        assert_eq!(two.weights, solo.weights);
    }

    #[test]
    fn normalizer_equal_losses_give_exp_c_over_tau() {
        let mut norm = RunningNormalizer::new(4);
        for _ in 0..3 {
            norm.push(&[0.7; 5], 0.35).unwrap();
        }
        assert!((norm.z() - math::exp(2.0)).abs() < 1e-12);
    }

    #[test]
    fn normalizer_with_k1_is_the_batch_mean() {
        let mut norm = RunningNormalizer::new(1);
        let losses = [0.2, 1.1, 0.5, 2.0];
        norm.push(&[9.0, 9.0], 1.0).unwrap(); // evicted next push
        let z = norm.update(&losses, 0.8).unwrap();
        let mean: f64 =
            losses.iter().map(|l| math::exp(l / 0.8)).sum::<f64>() / losses.len() as f64;
        assert!((z - mean).abs() / mean < 1e-12);
    }

    #[test]
    fn normalizer_window_matches_scratch_recomputation() {
        let mut rng = Rng::new(50);
        let mut norm = RunningNormalizer::new(5);
        let mut batches: Vec<Vec<f64>> = Vec::new();
        for i in 0..7 {
            let batch: Vec<f64> = (0..4 + i % 3).map(|_| rng.next_f64() * 3.0).collect();
            norm.push(&batch, 0.9).unwrap();
            batches.push(batch);
        }
        let tail = &batches[2..]; // window of 5 out of 7
        let total: usize = tail.iter().map(|b| b.len()).sum();
        let scratch: f64 = tail
            .iter()
            .flat_map(|b| b.iter().map(|l| math::exp(l / 0.9)))
            .sum::<f64>()
            / total as f64;
        assert!((norm.z() - scratch).abs() / scratch < 1e-12);
    }

    #[test]
    fn normalizer_rejects_non_finite_scale() {
        let mut norm = RunningNormalizer::new(2);
        assert_eq!(norm.push(&[f64::MAX], 1e-300), Err(Error::NormalizerOverflow));
        let mut norm = RunningNormalizer::new(2);
        norm.push(&[900.0], 1.0).unwrap();
        assert_eq!(norm.update(&[900.0], 1.0), Err(Error::NormalizerOverflow));
    }

    #[test]
    fn relaxed_tilt_weights_average_to_one_within_a_batch() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let losses: Vec<f64> = (0..16).map(|_| rng.next_f64() * 4.0).collect();
            let mut norm = RunningNormalizer::new(1);
            norm.push(&losses, 0.7).unwrap();
            let log_z = norm.log_z();
            let mean_v: f64 = losses.iter().map(|l| math::exp(l / 0.7 - log_z)).sum::<f64>()
                / losses.len() as f64;
            assert!((mean_v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tilt_weights_increase_with_loss() {
        let log_z = 1.3;
        let tau = 0.5;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..10 {
            let v = math::exp(i as f64 * 0.3 / tau - log_z);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn relaxed_step_with_uniform_losses_is_mle_ascent() {
        let psi = gaussian(vec![0.5, -0.5], 1.0);
        let batch_owned = [dense(vec![1.0, 0.0], 0), dense(vec![-1.0, 2.0], 1)];
        let batch: Vec<&Example> = batch_owned.iter().collect();
        let losses = [1.3, 1.3];
        let mut norm = RunningNormalizer::new(1);
        norm.push(&losses, 0.4).unwrap();
        let stepped =
            adversary_step_relaxed(&batch, &psi, &losses, norm.log_z(), 0.4, 0.2).unwrap();
        // v = 1, so the move is toward the plain batch mean.
        let mle_dir = [
            0.5 * ((1.0 - 0.5) + (-1.0 - 0.5)),
            0.5 * ((0.0 + 0.5) + (2.0 + 0.5)),
        ];
        for i in 0..2 {
            assert!((stepped.psi[i] - (psi.psi[i] + 0.2 * mle_dir[i])).abs() < 1e-12);
        }
        // A very large temperature reaches the same limit.
        let mut norm = RunningNormalizer::new(1);
        let varied = [0.2, 2.4];
        norm.push(&varied, 1e9).unwrap();
        let hot =
            adversary_step_relaxed(&batch, &psi, &varied, norm.log_z(), 1e9, 0.2).unwrap();
        for i in 0..2 {
            assert!((hot.psi[i] - (psi.psi[i] + 0.2 * mle_dir[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn relaxed_step_prefers_the_high_loss_example() {
        let psi = gaussian(vec![0.0, 0.0], 1.0);
        let x1 = dense(vec![3.0, 0.0], 0);
        let x2 = dense(vec![-3.0, 0.0], 1);
        let batch: Vec<&Example> = vec![&x1, &x2];
        let losses = [4.0, 0.1];
        let mut norm = RunningNormalizer::new(1);
        norm.push(&losses, 1.0).unwrap();
        let tilted =
            adversary_step_relaxed(&batch, &psi, &losses, norm.log_z(), 1.0, 0.5).unwrap();
        let uniform_losses = [1.0, 1.0];
        let mut norm_u = RunningNormalizer::new(1);
        norm_u.push(&uniform_losses, 1.0).unwrap();
        let mle = adversary_step_relaxed(
            &batch,
            &psi,
            &uniform_losses,
            norm_u.log_z(),
            1.0,
            0.5,
        )
        .unwrap();
        // Projection onto the direction of x1 moves strictly further than
        // the MLE step does.
        let toward_x1 = |p: &AdversaryParams| p.psi[0] * 3.0;
        assert!(toward_x1(&tilted) > toward_x1(&mle));
    }

    #[test]
    fn bare_step_is_exact_zero_for_zero_payoff() {
        // A giant bias makes the logistic loss of label-1 samples exactly 0.
        let theta = ModelParams {
            kind: ModelKind::Dense { dim: 2 },
            weights: vec![0.0, 0.0, 1000.0],
        };
        let psi = gaussian(vec![0.4, -0.1], 1.0);
        let mut rng = Rng::new(10);
        let stepped =
            adversary_step_bare(&theta, &psi, &[0.0, 1.0], 1.0, &mut rng, 200).unwrap();
        assert_eq!(stepped.psi, psi.psi);
    }

    #[test]
    fn bare_step_has_zero_mean_under_constant_payoff() {
        // θ = 0 makes the loss ln 2 everywhere; the score function then has
        // zero expectation and the empirical update obeys the CLT envelope.
        let theta = ModelParams::zeros(ModelKind::Dense { dim: 2 });
        let sigma = 1.4;
        let psi = gaussian(vec![0.7, 0.2], sigma);
        let n = 100_000;
        let mut rng = Rng::new(60);
        let stepped =
            adversary_step_bare(&theta, &psi, &[0.5, 0.5], 1.0, &mut rng, n).unwrap();
        let bound = 4.0 * math::LN_2 / (sigma * math::sqrt(n as f64));
        for i in 0..2 {
            assert!(
                (stepped.psi[i] - psi.psi[i]).abs() < bound,
                "coordinate {i} moved {}",
                stepped.psi[i] - psi.psi[i]
            );
        }
    }

    #[test]
    fn kl_projected_step_respects_the_ball() {
        let bundle = small_bundle();
        let psi0 = mle_fit(&bundle.train, &FamilyConfig::Gaussian { sigma: None }).unwrap();
        let theta = ModelParams {
            kind: ModelKind::Dense { dim: 2 },
            weights: vec![2.0, -1.0, 0.2],
        };
        let mut rng = Rng::new(3);
        let mut psi = psi0.params().clone();
        for kappa in [1e-9, 0.1, 1.0] {
            for _ in 0..30 {
                psi = adversary_step_kl_projected(
                    &theta,
                    &psi,
                    psi0.params(),
                    kappa,
                    &[0.5, 0.5],
                    5.0,
                    &mut rng,
                    16,
                )
                .unwrap();
                assert!(gaussian_kl(&psi, psi0.params()).unwrap() <= kappa + 1e-10);
            }
            // κ → 0 pins ψ at ψ₀.
            if kappa <= 1e-9 {
                let drift: f64 = psi
                    .psi
                    .iter()
                    .zip(&psi0.params().psi)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(math::sqrt(drift) < 1e-4);
            }
        }
    }

    fn toy_config(method: MethodConfig, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            epochs,
            batch_size: 64,
            model_lr: 0.1,
            adam: false,
            seed,
        }
    }

    #[test]
    fn zero_epochs_yield_only_the_snapshot_record() {
        let bundle = small_bundle();
        let cfg = toy_config(
            MethodConfig::Pdro(PdroHypers::relaxed(
                FamilyConfig::Gaussian { sigma: None },
                1.0,
                5,
                0.5,
            )),
            0,
            1,
        );
        let history = train_pdro(&cfg, &bundle).unwrap();
        assert_eq!(history.records.len(), 1);
        assert!(history.records[0].log_weights.iter().all(|&w| w == 0.0));
        assert!(history.abort.is_none());
    }

    #[test]
    fn frozen_adversary_matches_erm_bitwise() {
        let bundle = small_bundle();
        let pdro_cfg = toy_config(
            MethodConfig::Pdro(PdroHypers::relaxed(
                FamilyConfig::Gaussian { sigma: None },
                1.0,
                5,
                0.0,
            )),
            4,
            7,
        );
        let erm_cfg = toy_config(MethodConfig::Erm, 4, 7);
        let pdro = train_pdro(&pdro_cfg, &bundle).unwrap();
        let erm = crate::baselines::train_erm(&erm_cfg, &bundle).unwrap();
        assert_eq!(pdro.final_params.weights, erm.final_params.weights);
        for (a, b) in pdro.records.iter().zip(&erm.records) {
            assert_eq!(a.losses, b.losses);
            assert_eq!(a.errors, b.errors);
        }
    }

    #[test]
    fn first_epoch_single_batch_equals_erm_even_with_live_adversary() {
        let mut bundle = small_bundle();
        bundle.train.examples.truncate(64);
        let mut cfg = toy_config(
            MethodConfig::Pdro(PdroHypers::relaxed(
                FamilyConfig::Gaussian { sigma: None },
                1.0,
                5,
                2.0,
            )),
            1,
            3,
        );
        cfg.batch_size = 64; // one batch per epoch: ψ is still ψ₀ at step 1
        let pdro = train_pdro(&cfg, &bundle).unwrap();
        let erm = crate::baselines::train_erm(&toy_config(MethodConfig::Erm, 1, 3), &bundle)
            .unwrap();
        assert_eq!(
            pdro.records[1].params.as_ref().unwrap().weights,
            erm.records[1].params.as_ref().unwrap().weights
        );
    }
}
