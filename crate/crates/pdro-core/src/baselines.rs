//! Baseline trainers: ERM, non-parametric KL-DRO and exponentiated-gradient
//! Group-DRO.
//!
//! All three produce the same [`RunHistory`] shape as the P-DRO trainer so
//! the selection machinery applies uniformly. ERM records carry uniform
//! weights. NonParam records carry the analytically tilted weights re-solved
//! on the validation set at each checkpoint. Group-DRO records carry
//! uniform weights (model selection for it is oracle robust validation
//! accuracy, which does not consume weights).

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{DatasetBundle, Example, GroupId};
use crate::math;
use crate::models::{self, ModelParams, Optimizer};
use crate::numerics::log_sum_exp;
use crate::rng::Rng;
use crate::trainer::{
    make_record, mean_train_loss, model_kind_for, MethodConfig, RunHistory, TrainConfig,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// ERM
// ---------------------------------------------------------------------------

/// Plain minibatch SGD on the unweighted loss. Bitwise identical to the
/// P-DRO trainer with a frozen adversary (λ = 0) on the same seed.
pub fn train_erm(config: &TrainConfig, data: &DatasetBundle) -> Result<RunHistory> {
    config.validate()?;
    let kind = model_kind_for(&data.train)?;
    let mut theta = ModelParams::zeros(kind);
    let mut optimizer = if config.adam {
        Optimizer::adam(theta.weights.len())
    } else {
        Optimizer::sgd()
    };
    let mut rng = Rng::new(config.seed);
    let init_loss = mean_train_loss(&data.train, &theta)?;
    let mut records = vec![make_record(
        0,
        &data.valid,
        &theta,
        vec![0.0; data.valid.len()],
        init_loss,
        None,
    )?];
    for epoch in 1..=config.epochs {
        let order = rng.shuffled_indices(data.train.len());
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> =
                chunk.iter().map(|&i| &data.train.examples[i]).collect();
            let losses = models::batch_losses(&batch, &theta)?;
            loss_sum += losses.iter().sum::<f64>();
            loss_count += losses.len();
            let weights = vec![1.0; batch.len()];
            let grad = models::weighted_mean_grad(&batch, &theta, &weights)?;
            optimizer.step(&mut theta, &grad, config.model_lr);
        }
        records.push(make_record(
            epoch,
            &data.valid,
            &theta,
            vec![0.0; data.valid.len()],
            loss_sum / loss_count.max(1) as f64,
            None,
        )?);
    }
    Ok(RunHistory {
        config: config.clone(),
        records,
        final_params: theta,
        psi0: None,
        valid_fingerprint: data.valid.fingerprint(),
        abort: None,
    })
}

// ---------------------------------------------------------------------------
// Non-parametric KL-DRO
// ---------------------------------------------------------------------------

/// Where the temperature search ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipStatus {
    /// The target KL was attainable; τ* solves KL(q‖uniform) = κ.
    Interior,
    /// Clipped at the most concentrated end of the interval.
    Low,
    /// Clipped at the flattest end of the interval.
    High,
}

const LOG10_TAU_LO: f64 = -10.0;
const LOG10_TAU_HI: f64 = 10.0;
const BISECTION_ITERS: usize = 100;

fn tilted(losses: &[f64], tau: f64) -> Result<(Vec<f64>, f64)> {
    let n = losses.len() as f64;
    let scaled: Vec<f64> = losses.iter().map(|l| l / tau).collect();
    let lse = log_sum_exp(&scaled)?;
    let mut kl = 0.0;
    let mut weights = Vec::with_capacity(losses.len());
    for s in scaled {
        let log_q = s - lse;
        let q = math::exp(log_q);
        weights.push(q);
        if q > 0.0 {
            kl += q * (math::ln(n) + log_q);
        }
    }
    Ok((weights, kl))
}

/// Worst-case in-batch reweighting under a KL budget.
///
/// Solves for q ∝ exp(ℓ/τ*) with batch-empirical KL(q ‖ uniform) = κ by
/// bisection on log₁₀ τ over [−10, 10]. The achieved KL is decreasing in τ,
/// which justifies bisection. When no τ in the interval attains κ, the end
/// whose KL is closest to κ is reported as clipped (ties prefer the flat
/// end, so equal losses yield uniform weights and a high clip).
pub fn nonparam_inner(batch_losses: &[f64], kappa: f64) -> Result<(Vec<f64>, f64, ClipStatus)> {
    if batch_losses.is_empty() {
        return Err(Error::EmptyInput("nonparam_inner"));
    }
    if !math::all_finite(batch_losses) {
        return Err(Error::NonFinite("nonparam_inner losses"));
    }
    if !(kappa > 0.0) {
        return Err(Error::InvalidConfig("kappa must be positive".into()));
    }
    let tau_at = |t: f64| math::exp(t * math::LN_10);
    let (_, kl_lo) = tilted(batch_losses, tau_at(LOG10_TAU_LO))?;
    let (_, kl_hi) = tilted(batch_losses, tau_at(LOG10_TAU_HI))?;
    if kl_lo <= kappa {
        // Even the most concentrated tilt stays inside the ball: clip.
        let (t, status) = if math::abs(kl_lo - kappa) < math::abs(kl_hi - kappa) {
            (LOG10_TAU_LO, ClipStatus::Low)
        } else {
            (LOG10_TAU_HI, ClipStatus::High)
        };
        let tau = tau_at(t);
        let (weights, _) = tilted(batch_losses, tau)?;
        return Ok((weights, tau, status));
    }
    let (mut lo, mut hi) = (LOG10_TAU_LO, LOG10_TAU_HI);
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        let (_, kl) = tilted(batch_losses, tau_at(mid))?;
        if kl > kappa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = tau_at(0.5 * (lo + hi));
    let (weights, _) = tilted(batch_losses, tau)?;
    Ok((weights, tau, ClipStatus::Interior))
}

/// Online NonParam: each batch is reweighted by its own inner solution,
/// scaled by the batch size so that uniform weights reproduce an ERM step.
pub fn train_nonparam(config: &TrainConfig, data: &DatasetBundle) -> Result<RunHistory> {
    config.validate()?;
    let kappa = match &config.method {
        MethodConfig::NonParam { kappa } => *kappa,
        _ => return Err(Error::InvalidConfig("train_nonparam needs a NonParam config".into())),
    };
    let kind = model_kind_for(&data.train)?;
    let mut theta = ModelParams::zeros(kind);
    let mut optimizer = if config.adam {
        Optimizer::adam(theta.weights.len())
    } else {
        Optimizer::sgd()
    };
    let mut rng = Rng::new(config.seed);

    // Checkpoint weights: the same tilt solved on the validation losses,
    // stored as log(n·q) so that a ratio-to-uniform convention matches the
    // parametric adversaries.
    let record_weights = |theta: &ModelParams| -> Result<Vec<f64>> {
        let mut valid_losses = Vec::with_capacity(data.valid.len());
        for ex in &data.valid.examples {
            valid_losses.push(models::loss(ex, theta)?);
        }
        let (q, _, _) = nonparam_inner(&valid_losses, kappa)?;
        let n = q.len() as f64;
        Ok(q.iter().map(|qi| math::ln(n * qi.max(f64::MIN_POSITIVE))).collect())
    };

    let init_loss = mean_train_loss(&data.train, &theta)?;
    let mut records = vec![make_record(
        0,
        &data.valid,
        &theta,
        vec![0.0; data.valid.len()],
        init_loss,
        None,
    )?];
    for epoch in 1..=config.epochs {
        let order = rng.shuffled_indices(data.train.len());
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> =
                chunk.iter().map(|&i| &data.train.examples[i]).collect();
            let losses = models::batch_losses(&batch, &theta)?;
            loss_sum += losses.iter().sum::<f64>();
            loss_count += losses.len();
            let (q, _, _) = nonparam_inner(&losses, kappa)?;
            let weights: Vec<f64> = q.iter().map(|qi| qi * batch.len() as f64).collect();
            let grad = models::weighted_mean_grad(&batch, &theta, &weights)?;
            optimizer.step(&mut theta, &grad, config.model_lr);
        }
        records.push(make_record(
            epoch,
            &data.valid,
            &theta,
            record_weights(&theta)?,
            loss_sum / loss_count.max(1) as f64,
            None,
        )?);
    }
    Ok(RunHistory {
        config: config.clone(),
        records,
        final_params: theta,
        psi0: None,
        valid_fingerprint: data.valid.fingerprint(),
        abort: None,
    })
}

// ---------------------------------------------------------------------------
// Group-DRO (exponentiated gradients)
// ---------------------------------------------------------------------------

/// Simplex of group weights plus its step size.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights {
    pub weights: Vec<f64>,
    pub eta: f64,
}

impl GroupWeights {
    pub fn uniform(n_groups: usize, eta: f64) -> Self {
        GroupWeights { weights: vec![1.0 / n_groups as f64; n_groups], eta }
    }

    fn renormalize(&mut self) {
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
    }
}

/// Stable index assignment for the raw group ids seen during training.
pub fn group_index(examples: &[Example]) -> BTreeMap<GroupId, usize> {
    let mut ids: Vec<GroupId> = examples.iter().map(|e| e.group).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, g)| (g, i)).collect()
}

/// One exponentiated-gradient Group-DRO step on oracle (hard) groups.
///
/// Groups absent from the batch keep their weight (their mean loss is
/// treated as zero, and exp(0) = 1 before renormalization).
pub fn groupdro_step(
    batch: &[&Example],
    theta: &ModelParams,
    gw: &GroupWeights,
    grouping: &BTreeMap<GroupId, usize>,
    lr: f64,
) -> Result<(ModelParams, GroupWeights)> {
    let n_groups = gw.weights.len();
    let mut sums = vec![0.0f64; n_groups];
    let mut counts = vec![0usize; n_groups];
    let mut member = Vec::with_capacity(batch.len());
    for ex in batch {
        let &g = grouping.get(&ex.group).ok_or(Error::UnmappedGroup(ex.group))?;
        sums[g] += models::loss(ex, theta)?;
        counts[g] += 1;
        member.push(g);
    }
    let mut gw_new = gw.clone();
    for g in 0..n_groups {
        if counts[g] > 0 {
            gw_new.weights[g] *= math::exp(gw.eta * sums[g] / counts[g] as f64);
        }
    }
    gw_new.renormalize();
    // ∇ Σ_g gw_g · mean-loss_g as a per-example weighted step.
    let weights: Vec<f64> = member
        .iter()
        .map(|&g| batch.len() as f64 * gw_new.weights[g] / counts[g] as f64)
        .collect();
    let grad = models::weighted_mean_grad(batch, theta, &weights)?;
    let mut theta_new = theta.clone();
    Optimizer::sgd().step(&mut theta_new, &grad, lr);
    Ok((theta_new, gw_new))
}

/// Group-DRO step on soft group posteriors: mean group losses become
/// posterior-weighted averages; groups with zero posterior mass in the
/// batch are skipped.
pub fn groupdro_soft_step(
    batch: &[&Example],
    theta: &ModelParams,
    gw: &GroupWeights,
    lr: f64,
) -> Result<(ModelParams, GroupWeights)> {
    let n_groups = gw.weights.len();
    let mut sums = vec![0.0f64; n_groups];
    let mut mass = vec![0.0f64; n_groups];
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let post = ex.posterior.as_ref().ok_or(Error::BadPosterior)?;
        if post.len() != n_groups
            || post.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p))
            || (post.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::BadPosterior);
        }
        let l = models::loss(ex, theta)?;
        losses.push(l);
        for g in 0..n_groups {
            sums[g] += post[g] * l;
            mass[g] += post[g];
        }
    }
    let mut gw_new = gw.clone();
    for g in 0..n_groups {
        if mass[g] > 0.0 {
            gw_new.weights[g] *= math::exp(gw.eta * sums[g] / mass[g]);
        }
    }
    gw_new.renormalize();
    let weights: Vec<f64> = batch
        .iter()
        .map(|ex| {
            let post = ex.posterior.as_ref().expect("validated above");
            let mut w = 0.0;
            for g in 0..n_groups {
                if mass[g] > 0.0 {
                    w += gw_new.weights[g] * post[g] / mass[g];
                }
            }
            batch.len() as f64 * w
        })
        .collect();
    let grad = models::weighted_mean_grad(batch, theta, &weights)?;
    let mut theta_new = theta.clone();
    Optimizer::sgd().step(&mut theta_new, &grad, lr);
    Ok((theta_new, gw_new))
}

/// Online Group-DRO over oracle groups (or soft posteriors when configured).
pub fn train_groupdro(config: &TrainConfig, data: &DatasetBundle) -> Result<RunHistory> {
    config.validate()?;
    let (eta, soft) = match &config.method {
        MethodConfig::GroupDro { eta, soft } => (*eta, *soft),
        _ => return Err(Error::InvalidConfig("train_groupdro needs a GroupDro config".into())),
    };
    let kind = model_kind_for(&data.train)?;
    let mut theta = ModelParams::zeros(kind);
    let mut rng = Rng::new(config.seed);
    let grouping = group_index(&data.train.examples);
    let n_groups = if soft {
        data.train
            .examples
            .first()
            .and_then(|e| e.posterior.as_ref())
            .map(|p| p.len())
            .ok_or(Error::BadPosterior)?
    } else {
        grouping.len()
    };
    let mut gw = GroupWeights::uniform(n_groups, eta);

    let init_loss = mean_train_loss(&data.train, &theta)?;
    let mut records = vec![make_record(
        0,
        &data.valid,
        &theta,
        vec![0.0; data.valid.len()],
        init_loss,
        None,
    )?];
    for epoch in 1..=config.epochs {
        let order = rng.shuffled_indices(data.train.len());
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> =
                chunk.iter().map(|&i| &data.train.examples[i]).collect();
            let losses = models::batch_losses(&batch, &theta)?;
            loss_sum += losses.iter().sum::<f64>();
            loss_count += losses.len();
            let (theta_new, gw_new) = if soft {
                groupdro_soft_step(&batch, &theta, &gw, config.model_lr)?
            } else {
                groupdro_step(&batch, &theta, &gw, &grouping, config.model_lr)?
            };
            theta = theta_new;
            gw = gw_new;
        }
        records.push(make_record(
            epoch,
            &data.valid,
            &theta,
            vec![0.0; data.valid.len()],
            loss_sum / loss_count.max(1) as f64,
            None,
        )?);
    }
    Ok(RunHistory {
        config: config.clone(),
        records,
        final_params: theta,
        psi0: None,
        valid_fingerprint: data.valid.fingerprint(),
        abort: None,
    })
}
