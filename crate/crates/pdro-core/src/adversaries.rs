//! Parametric generative adversaries: density evaluation, log-density
//! gradients, maximum-likelihood initialization, sampling and KL utilities.
//!
//! Two families share one contract:
//!
//! * **Gaussian** — an isotropic normal over the 2-D inputs with fixed
//!   standard deviation; the parameters are the location. Only the input
//!   distribution is modeled: the conditional label density is common to
//!   adversary and snapshot and cancels in every ratio.
//! * **Bigram** — a label-conditioned bigram over token sequences. A
//!   label-specific start state is prepended and an end-of-sequence token
//!   (id 0, reserved) is appended, so the parameters are logits over
//!   (token-or-start) × next-token transitions. `log_density` is the
//!   conditional log q(x | y); the label marginal is shared with the
//!   snapshot and cancels in ratios exactly like the Gaussian conditional.
//!
//! Densities of both families therefore omit ψ-independent label terms,
//! which leaves importance ratios, gradients and KL estimates unchanged.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Dataset, Example, Features, GroupId};
use crate::math;
use crate::numerics::log_sum_exp;
use crate::rng::Rng;
use crate::{Error, Result};

/// Family tag plus its fixed (non-learned) constants.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Gaussian { sigma: f64 },
    Bigram { vocab: u32, alpha: f64 },
}

/// How to fit a family to data; the Gaussian σ defaults to the pooled
/// empirical standard deviation of the training inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum FamilyConfig {
    Gaussian { sigma: Option<f64> },
    Bigram { alpha: f64 },
}

/// Learnable adversary parameters ψ.
///
/// Gaussian: ψ = the location vector. Bigram: ψ = row-major transition
/// logits of shape (vocab + 2) × vocab, where rows 0..vocab are
/// previous-token states (row 0, the EOS state, is never visited), row
/// `vocab` is the start state for label 0 and row `vocab + 1` for label 1;
/// column 0 is the end-of-sequence symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryParams {
    pub family: Family,
    pub psi: Vec<f64>,
}

impl AdversaryParams {
    pub fn is_finite(&self) -> bool {
        self.psi.iter().all(|v| v.is_finite())
    }

    fn bigram_shape(&self) -> Option<(usize, usize)> {
        match self.family {
            Family::Bigram { vocab, .. } => Some((vocab as usize + 2, vocab as usize)),
            _ => None,
        }
    }
}

/// Frozen maximum-likelihood fit ψ₀; the denominator of every importance
/// ratio. Never mutated after creation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarySnapshot {
    params: AdversaryParams,
}

impl AdversarySnapshot {
    pub fn new(params: AdversaryParams) -> Self {
        AdversarySnapshot { params }
    }

    pub fn params(&self) -> &AdversaryParams {
        &self.params
    }
}

// ---------------------------------------------------------------------------
// Density evaluation
// ---------------------------------------------------------------------------

/// Density evaluator with per-row log-normalizers cached, so scoring a batch
/// against one ψ does not recompute the same softmax denominators.
pub struct PreparedDensity<'a> {
    params: &'a AdversaryParams,
    row_log_z: Vec<f64>,
}

/// Transition rows visited by an example: (row, next-column) pairs.
fn visits(tokens: &[u32], label: u8, vocab: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let start_row = vocab + label as usize;
    let first = tokens.first().map_or(0usize, |&t| t as usize);
    core::iter::once((start_row, first))
        .chain(tokens.windows(2).map(|w| (w[0] as usize, w[1] as usize)))
        .chain(tokens.last().map(|&t| (t as usize, 0usize)))
}

pub fn prepare(params: &AdversaryParams) -> Result<PreparedDensity<'_>> {
    if !params.is_finite() {
        return Err(Error::NonFinite("adversary parameters"));
    }
    let row_log_z = match params.bigram_shape() {
        Some((rows, cols)) => {
            if params.psi.len() != rows * cols {
                return Err(Error::DimensionMismatch {
                    expected: rows * cols,
                    got: params.psi.len(),
                });
            }
            let mut z = Vec::with_capacity(rows);
            for r in 0..rows {
                z.push(log_sum_exp(&params.psi[r * cols..(r + 1) * cols])?);
            }
            z
        }
        None => Vec::new(),
    };
    Ok(PreparedDensity { params, row_log_z })
}

impl PreparedDensity<'_> {
    /// Log-density of an example under ψ (up to the ψ-independent label
    /// terms described in the module docs).
    pub fn log_density(&self, example: &Example) -> Result<f64> {
        match (&self.params.family, &example.features) {
            (Family::Gaussian { sigma }, Features::Dense(x)) => {
                let mu = &self.params.psi;
                if x.len() != mu.len() {
                    return Err(Error::DimensionMismatch { expected: mu.len(), got: x.len() });
                }
                let d = x.len() as f64;
                let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok(-0.5 * d * math::ln(2.0 * math::PI * sigma * sigma)
                    - sq / (2.0 * sigma * sigma))
            }
            (Family::Bigram { vocab, .. }, Features::Tokens(tokens)) => {
                let cols = *vocab as usize;
                let mut total = 0.0;
                for (row, col) in visits(tokens, example.label, cols) {
                    if col >= cols || row >= cols + 2 {
                        return Err(Error::OutOfVocab { id: col as u32, vocab: cols });
                    }
                    total += self.params.psi[row * cols + col] - self.row_log_z[row];
                }
                Ok(total)
            }
            _ => Err(Error::FamilyMismatch),
        }
    }

    /// Add `scale · ∇_ψ log q_ψ(example)` into `acc`.
    pub fn accumulate_grad(&self, example: &Example, scale: f64, acc: &mut [f64]) -> Result<()> {
        if acc.len() != self.params.psi.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.psi.len(),
                got: acc.len(),
            });
        }
        match (&self.params.family, &example.features) {
            (Family::Gaussian { sigma }, Features::Dense(x)) => {
                let mu = &self.params.psi;
                if x.len() != mu.len() {
                    return Err(Error::DimensionMismatch { expected: mu.len(), got: x.len() });
                }
                let inv = 1.0 / (sigma * sigma);
                for i in 0..x.len() {
                    acc[i] += scale * (x[i] - mu[i]) * inv;
                }
                Ok(())
            }
            (Family::Bigram { vocab, .. }, Features::Tokens(tokens)) => {
                let cols = *vocab as usize;
                for (row, col) in visits(tokens, example.label, cols) {
                    if col >= cols || row >= cols + 2 {
                        return Err(Error::OutOfVocab { id: col as u32, vocab: cols });
                    }
                    let base = row * cols;
                    let log_z = self.row_log_z[row];
                    for c in 0..cols {
                        acc[base + c] -=
                            scale * math::exp(self.params.psi[base + c] - log_z);
                    }
                    acc[base + col] += scale;
                }
                Ok(())
            }
            _ => Err(Error::FamilyMismatch),
        }
    }
}

/// Log-density of one example; see [`PreparedDensity::log_density`].
pub fn log_density(example: &Example, params: &AdversaryParams) -> Result<f64> {
    prepare(params)?.log_density(example)
}

/// Analytic gradient of [`log_density`] with respect to ψ.
pub fn grad_log_density(example: &Example, params: &AdversaryParams) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.psi.len()];
    prepare(params)?.accumulate_grad(example, 1.0, &mut grad)?;
    Ok(grad)
}

/// Per-example log importance weights log q_ψ − log q_ψ₀ for a batch.
pub fn batch_log_weights(
    batch: &[&Example],
    params: &AdversaryParams,
    snapshot: &AdversaryParams,
) -> Result<Vec<f64>> {
    if params.family != snapshot.family {
        return Err(Error::FamilyMismatch);
    }
    let cur = prepare(params)?;
    let base = prepare(snapshot)?;
    batch
        .iter()
        .map(|ex| Ok(cur.log_density(ex)? - base.log_density(ex)?))
        .collect()
}

// ---------------------------------------------------------------------------
// Maximum-likelihood fit
// ---------------------------------------------------------------------------

/// Fit ψ₀ by maximum likelihood.
///
/// Gaussian: the location is the empirical mean and σ² is the pooled
/// empirical variance (population form, averaged over dimensions).
/// Bigram: logits are logarithms of add-α-smoothed transition counts, so
/// every sequence keeps nonzero density and ratios stay defined.
pub fn mle_fit(data: &Dataset, config: &FamilyConfig) -> Result<AdversarySnapshot> {
    if data.is_empty() {
        return Err(Error::EmptyInput("mle_fit"));
    }
    match config {
        FamilyConfig::Gaussian { sigma } => {
            let dim = match &data.examples[0].features {
                Features::Dense(x) => x.len(),
                _ => return Err(Error::FamilyMismatch),
            };
            let n = data.len() as f64;
            let mut mean = vec![0.0; dim];
            for ex in &data.examples {
                let x = match &ex.features {
                    Features::Dense(x) => x,
                    _ => return Err(Error::FamilyMismatch),
                };
                if x.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: x.len() });
                }
                for i in 0..dim {
                    mean[i] += x[i];
                }
            }
            for m in &mut mean {
                *m /= n;
            }
            let sigma = match sigma {
                Some(s) if *s > 0.0 => *s,
                Some(_) => return Err(Error::InvalidConfig("sigma must be positive".into())),
                None => {
                    let mut pooled = 0.0;
                    for ex in &data.examples {
                        if let Features::Dense(x) = &ex.features {
                            for i in 0..dim {
                                let d = x[i] - mean[i];
                                pooled += d * d;
                            }
                        }
                    }
                    math::sqrt(pooled / (n * dim as f64))
                }
            };
            Ok(AdversarySnapshot::new(AdversaryParams {
                family: Family::Gaussian { sigma },
                psi: mean,
            }))
        }
        FamilyConfig::Bigram { alpha } => {
            if *alpha <= 0.0 {
                return Err(Error::InvalidConfig("alpha must be positive".into()));
            }
            let vocab = data
                .vocab_size
                .ok_or_else(|| Error::InvalidConfig("dataset has no vocabulary".into()))?
                as usize;
            let mut counts = vec![0.0f64; (vocab + 2) * vocab];
            for ex in &data.examples {
                let tokens = match &ex.features {
                    Features::Tokens(t) => t,
                    _ => return Err(Error::FamilyMismatch),
                };
                for (row, col) in visits(tokens, ex.label, vocab) {
                    if col >= vocab || row >= vocab + 2 {
                        return Err(Error::OutOfVocab { id: col as u32, vocab });
                    }
                    counts[row * vocab + col] += 1.0;
                }
            }
            let psi = counts.iter().map(|c| math::ln(c + alpha)).collect();
            Ok(AdversarySnapshot::new(AdversaryParams {
                family: Family::Bigram { vocab: vocab as u32, alpha: *alpha },
                psi,
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling (Gaussian only; used by the bare zero-sum variant)
// ---------------------------------------------------------------------------

/// Draw x ~ N(μ, σ²I) and a label from the given empirical marginal. The
/// returned example carries group 0, which no consumer reads.
pub fn sample(
    params: &AdversaryParams,
    rng: &mut Rng,
    label_marginal: &[f64; 2],
) -> Result<Example> {
    match &params.family {
        Family::Gaussian { sigma } => {
            let x = params.psi.iter().map(|mu| mu + sigma * rng.normal()).collect();
            let label = rng.categorical(label_marginal) as u8;
            Ok(Example {
                features: Features::Dense(x),
                label,
                group: 0 as GroupId,
                posterior: None,
            })
        }
        Family::Bigram { .. } => Err(Error::UnsupportedFamily("sample")),
    }
}

// ---------------------------------------------------------------------------
// Gaussian KL geometry
// ---------------------------------------------------------------------------

/// Closed-form KL between two isotropic Gaussians with the same σ:
/// ‖μ − μ₀‖² / (2σ²). Symmetric in its arguments.
pub fn gaussian_kl(a: &AdversaryParams, b: &AdversaryParams) -> Result<f64> {
    match (&a.family, &b.family) {
        (Family::Gaussian { sigma: sa }, Family::Gaussian { sigma: sb }) if sa == sb => {
            if a.psi.len() != b.psi.len() {
                return Err(Error::DimensionMismatch {
                    expected: a.psi.len(),
                    got: b.psi.len(),
                });
            }
            let sq: f64 = a.psi.iter().zip(&b.psi).map(|(x, y)| (x - y) * (x - y)).sum();
            Ok(sq / (2.0 * sa * sa))
        }
        _ => Err(Error::FamilyMismatch),
    }
}

/// Project ψ onto the KL ball of radius κ around ψ₀:
/// ψ₀ + (√(2κ)·σ / ‖ψ − ψ₀‖)(ψ − ψ₀) when outside, identity inside.
///
/// The interior test allows a few ulps of slack above κ so that projecting a
/// projected point returns it bitwise unchanged.
pub fn project_onto_kl_ball(
    psi: &AdversaryParams,
    psi0: &AdversaryParams,
    kappa: f64,
) -> Result<AdversaryParams> {
    if kappa <= 0.0 {
        return Err(Error::InvalidConfig("kappa must be positive".into()));
    }
    let kl = gaussian_kl(psi, psi0)?;
    if kl <= kappa * (1.0 + 1e-12) {
        return Ok(psi.clone());
    }
    let sigma = match psi.family {
        Family::Gaussian { sigma } => sigma,
        _ => unreachable!("gaussian_kl verified the family"),
    };
    let dist = math::sqrt(kl * 2.0 * sigma * sigma);
    let scale = math::sqrt(2.0 * kappa) * sigma / dist;
    let psi_new = psi0
        .psi
        .iter()
        .zip(&psi.psi)
        .map(|(base, cur)| base + scale * (cur - base))
        .collect();
    Ok(AdversaryParams { family: psi.family.clone(), psi: psi_new })
}

// ---------------------------------------------------------------------------
// Exhaustive enumeration (small-vocabulary oracles)
// ---------------------------------------------------------------------------

/// All token sequences of length 1..=max_len over the non-EOS alphabet
/// {1, .., vocab−1}. Only intended for tiny vocabularies.
pub fn enumerate_sequences(vocab: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut current: Vec<Vec<u32>> = (1..vocab).map(|t| vec![t]).collect();
    for _ in 0..max_len {
        out.extend(current.iter().cloned());
        let mut next = Vec::new();
        for seq in &current {
            for t in 1..vocab {
                let mut longer = seq.clone();
                longer.push(t);
                next.push(longer);
            }
        }
        current = next;
    }
    out
}

/// Forward-recursion mass accounting for a bigram adversary at one label:
/// returns (mass of sequences of length 1..=max_len followed by EOS, all
/// remaining mass — the empty sequence plus unterminated prefixes). The two
/// always sum to 1 for a well-formed model.
pub fn bigram_terminated_mass(
    params: &AdversaryParams,
    label: u8,
    max_len: usize,
) -> Result<(f64, f64)> {
    let (rows, cols) = params.bigram_shape().ok_or(Error::FamilyMismatch)?;
    let prep = prepare(params)?;
    let prob = |row: usize, col: usize| math::exp(params.psi[row * cols + col] - prep.row_log_z[row]);
    // alpha[s] = probability of an unterminated prefix currently in state s.
    let mut alpha = vec![0.0f64; cols];
    let start = cols + label as usize;
    debug_assert!(start < rows);
    let empty_mass = prob(start, 0);
    for s in 1..cols {
        alpha[s] = prob(start, s);
    }
    let mut terminated = 0.0;
    for _ in 0..max_len {
        let mut next = vec![0.0f64; cols];
        for s in 1..cols {
            if alpha[s] == 0.0 {
                continue;
            }
            terminated += alpha[s] * prob(s, 0);
            for t in 1..cols {
                next[t] += alpha[s] * prob(s, t);
            }
        }
        alpha = next;
    }
    let continuing: f64 = empty_mass + alpha.iter().sum::<f64>();
    Ok((terminated, continuing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::numerics::check_gradient;

    fn dense(x: Vec<f64>, label: u8) -> Example {
        Example { features: Features::Dense(x), label, group: 0, posterior: None }
    }

    fn tokens(t: Vec<u32>, label: u8) -> Example {
        Example { features: Features::Tokens(t), label, group: 0, posterior: None }
    }

    fn gaussian(mu: Vec<f64>, sigma: f64) -> AdversaryParams {
        AdversaryParams { family: Family::Gaussian { sigma }, psi: mu }
    }

    fn random_bigram(rng: &mut Rng, vocab: u32) -> AdversaryParams {
        let len = (vocab as usize + 2) * vocab as usize;
        AdversaryParams {
            family: Family::Bigram { vocab, alpha: 0.1 },
            psi: (0..len).map(|_| rng.normal()).collect(),
        }
    }

    #[test]
    fn gaussian_density_at_mode_is_minus_log_2pi() {
        let psi = gaussian(vec![0.3, -0.7], 1.0);
        let got = log_density(&dense(vec![0.3, -0.7], 0), &psi).unwrap();
        assert!((got + math::ln(2.0 * math::PI)).abs() < 1e-12);
    }

    #[test]
    fn uniform_bigram_density_is_length_plus_one_log_vocab() {
        let vocab = 5u32;
        let psi = AdversaryParams {
            family: Family::Bigram { vocab, alpha: 0.1 },
            psi: vec![0.0; (vocab as usize + 2) * vocab as usize],
        };
        for len in 1..=4usize {
            let seq: Vec<u32> = (0..len).map(|i| 1 + (i as u32 % (vocab - 1))).collect();
            let got = log_density(&tokens(seq, 1), &psi).unwrap();
            let expected = -((len + 1) as f64) * math::ln(vocab as f64);
            assert!((got - expected).abs() < 1e-12, "len {len}: {got} vs {expected}");
        }
    }

    #[test]
    fn brute_force_mass_matches_forward_recursion() {
        let mut rng = Rng::new(4);
        for _ in 0..5 {
            let psi = random_bigram(&mut rng, 4);
            for label in 0..2u8 {
                let brute: f64 = enumerate_sequences(4, 3)
                    .into_iter()
                    .map(|seq| math::exp(log_density(&tokens(seq, label), &psi).unwrap()))
                    .sum();
                let (terminated, continuing) = bigram_terminated_mass(&psi, label, 3).unwrap();
                assert!((brute - terminated).abs() < 1e-10, "{brute} vs {terminated}");
                assert!((terminated + continuing - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn terminated_mass_converges_to_one_for_eos_heavy_model() {
        // Start states emit a token, token states then overwhelmingly end
        // the sequence: nearly all mass sits on sequences of length >= 1.
        let vocab = 4u32;
        let cols = vocab as usize;
        let mut logits = vec![0.0; (cols + 2) * cols];
        for row in 0..cols {
            logits[row * cols] = 24.0; // EOS strongly preferred after a token
        }
        for start in [cols, cols + 1] {
            logits[start * cols] = -24.0; // empty sequence suppressed
        }
        let psi = AdversaryParams { family: Family::Bigram { vocab, alpha: 0.1 }, psi: logits };
        let (terminated, continuing) = bigram_terminated_mass(&psi, 0, 4).unwrap();
        assert!((terminated - 1.0).abs() < 1e-8, "terminated = {terminated}");
        assert!((terminated + continuing - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_gradient_is_zero_at_mode() {
        let psi = gaussian(vec![1.0, 2.0], 1.5);
        let g = grad_log_density(&dense(vec![1.0, 2.0], 0), &psi).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences_both_families() {
        let mut rng = Rng::new(12);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let ex = dense(vec![rng.normal() * 2.0, rng.normal() * 2.0], 0);
            let sigma = 0.5 + rng.next_f64() * 2.0;
            let point = vec![rng.normal(), rng.normal()];
            let err = check_gradient(
                |mu| log_density(&ex, &gaussian(mu.to_vec(), sigma)).unwrap(),
                |mu| grad_log_density(&ex, &gaussian(mu.to_vec(), sigma)).unwrap(),
                &point,
                1e-5,
            )
            .unwrap();
            worst = worst.max(err);
        }
        for _ in 0..100 {
            let vocab = 4u32;
            let len = 1 + rng.below(4);
            let seq: Vec<u32> = (0..len).map(|_| 1 + rng.below(3) as u32).collect();
            let ex = tokens(seq, rng.bernoulli(0.5) as u8);
            let base = random_bigram(&mut rng, vocab);
            let family = base.family.clone();
            let err = check_gradient(
                |p| {
                    let cand = AdversaryParams { family: family.clone(), psi: p.to_vec() };
                    log_density(&ex, &cand).unwrap()
                },
                |p| {
                    let cand = AdversaryParams { family: family.clone(), psi: p.to_vec() };
                    grad_log_density(&ex, &cand).unwrap()
                },
                &base.psi,
                1e-5,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst = {worst}");
    }

    #[test]
    fn unvisited_bigram_rows_have_zero_gradient() {
        let mut rng = Rng::new(3);
        let vocab = 4u32;
        let psi = random_bigram(&mut rng, vocab);
        let ex = tokens(vec![2, 2], 0); // visits: start0 -> 2, 2 -> 2, 2 -> EOS
        let g = grad_log_density(&ex, &psi).unwrap();
        let cols = vocab as usize;
        for row in [1usize, 3, cols + 1] {
            for c in 0..cols {
                assert_eq!(g[row * cols + c], 0.0, "row {row} col {c}");
            }
        }
        // Visited row, column not the target: pure negative expected count.
        let soft = crate::numerics::softmax(&psi.psi[2 * cols..3 * cols]).unwrap();
        assert!((g[2 * cols + 1] + 2.0 * soft[1]).abs() < 1e-12);
    }

    fn dense_dataset(points: Vec<Vec<f64>>) -> Dataset {
        Dataset {
            examples: points.into_iter().map(|p| dense(p, 0)).collect(),
            split: Split::Train,
            vocab_size: None,
        }
    }

    #[test]
    fn gaussian_mle_matches_hand_mean() {
        let ds = dense_dataset(vec![vec![0.0, 0.0], vec![2.0, 2.0]]);
        let fit = mle_fit(&ds, &FamilyConfig::Gaussian { sigma: None }).unwrap();
        assert_eq!(fit.params().psi, vec![1.0, 1.0]);
        match fit.params().family {
            Family::Gaussian { sigma } => assert!((sigma - 1.0).abs() < 1e-12),
            _ => panic!(),
        }
    }

    #[test]
    fn gaussian_mle_recovers_a_known_mean() {
        let mut rng = Rng::new(21);
        let n = 100_000;
        let truth = [0.7, -1.3];
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![truth[0] + rng.normal(), truth[1] + rng.normal()])
            .collect();
        let fit = mle_fit(&dense_dataset(points), &FamilyConfig::Gaussian { sigma: None }).unwrap();
        let tol = 3.0 / math::sqrt(n as f64);
        assert!((fit.params().psi[0] - truth[0]).abs() < tol);
        assert!((fit.params().psi[1] - truth[1]).abs() < tol);
    }

    #[test]
    fn bigram_mle_prefers_its_training_sequence() {
        let seq = vec![2u32, 3, 1];
        let examples: Vec<Example> = (0..50).map(|_| tokens(seq.clone(), 1)).collect();
        let ds = Dataset { examples, split: Split::Train, vocab_size: Some(4) };
        let fit = mle_fit(&ds, &FamilyConfig::Bigram { alpha: 0.1 }).unwrap();
        let target = log_density(&tokens(seq.clone(), 1), fit.params()).unwrap();
        for other in enumerate_sequences(4, 3) {
            if other.len() == 3 && other != seq {
                let ld = log_density(&tokens(other, 1), fit.params()).unwrap();
                assert!(target >= ld);
            }
        }
    }

    #[test]
    fn mle_is_a_local_maximum_of_mean_log_likelihood() {
        let mut rng = Rng::new(14);
        let cfg = crate::data::BiasedSeqConfig {
            n_train: 400,
            n_valid: 100,
            n_test: 100,
            vocab_size: 8,
            ..Default::default()
        };
        let bundle = crate::data::gen_biased_sequences(&cfg, 1).unwrap();
        let fit = mle_fit(&bundle.train, &FamilyConfig::Bigram { alpha: 0.1 }).unwrap();
        let mean_ll = |p: &AdversaryParams| {
            let prep = prepare(p).unwrap();
            bundle
                .train
                .examples
                .iter()
                .map(|ex| prep.log_density(ex).unwrap())
                .sum::<f64>()
                / bundle.train.len() as f64
        };
        let base = mean_ll(fit.params());
        for _ in 0..40 {
            let mut bumped = fit.params().clone();
            let i = rng.below(bumped.psi.len());
            bumped.psi[i] += if rng.bernoulli(0.5) { 0.05 } else { -0.05 };
            // Smoothing keeps the fit slightly off the unsmoothed optimum,
            // so allow equality up to the smoothing scale.
            assert!(mean_ll(&bumped) <= base + 5e-4);
        }
    }

    #[test]
    fn sampling_obeys_the_law_of_large_numbers() {
        let psi = gaussian(vec![2.0, -1.0], 0.8);
        let mut rng = Rng::new(6);
        let n = 100_000;
        let mut mean = [0.0f64; 2];
        for _ in 0..n {
            let ex = sample(&psi, &mut rng, &[0.4, 0.6]).unwrap();
            if let Features::Dense(x) = &ex.features {
                mean[0] += x[0];
                mean[1] += x[1];
            }
        }
        let tol = 3.0 * 0.8 / math::sqrt(n as f64);
        assert!((mean[0] / n as f64 - 2.0).abs() < tol);
        assert!((mean[1] / n as f64 + 1.0).abs() < tol);
    }

    #[test]
    fn sampling_is_reproducible_and_concentrates_with_small_sigma() {
        let psi = gaussian(vec![3.0, 3.0], 1e-4);
        let a: Vec<f64> = {
            let mut rng = Rng::new(9);
            match sample(&psi, &mut rng, &[0.5, 0.5]).unwrap().features {
                Features::Dense(x) => x,
                _ => unreachable!(),
            }
        };
        let b: Vec<f64> = {
            let mut rng = Rng::new(9);
            match sample(&psi, &mut rng, &[0.5, 0.5]).unwrap().features {
                Features::Dense(x) => x,
                _ => unreachable!(),
            }
        };
        assert_eq!(a, b);
        assert!((a[0] - 3.0).abs() < 1e-3 && (a[1] - 3.0).abs() < 1e-3);
        let bigram = AdversaryParams {
            family: Family::Bigram { vocab: 4, alpha: 0.1 },
            psi: vec![0.0; 24],
        };
        let mut rng = Rng::new(1);
        assert_eq!(
            sample(&bigram, &mut rng, &[0.5, 0.5]),
            Err(Error::UnsupportedFamily("sample"))
        );
    }

    #[test]
    fn kl_closed_form_properties() {
        let a = gaussian(vec![1.0, 1.0], 2.0);
        assert_eq!(gaussian_kl(&a, &a).unwrap(), 0.0);
        // Distance σ√2 gives KL exactly 1.
        let b = gaussian(vec![1.0 + 2.0 * math::sqrt(2.0), 1.0], 2.0);
        assert!((gaussian_kl(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            gaussian_kl(&a, &b).unwrap().to_bits(),
            gaussian_kl(&b, &a).unwrap().to_bits()
        );
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let a = gaussian(vec![0.4, -0.2], 1.3);
        let b = gaussian(vec![-0.9, 0.7], 1.3);
        let closed = gaussian_kl(&a, &b).unwrap();
        let mut rng = Rng::new(2024);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let ex = sample(&a, &mut rng, &[0.5, 0.5]).unwrap();
            acc += log_density(&ex, &a).unwrap() - log_density(&ex, &b).unwrap();
        }
        let mc = acc / n as f64;
        assert!((mc - closed).abs() / closed < 0.01, "mc {mc} vs closed {closed}");
    }

    #[test]
    fn projection_identity_inside_and_exact_on_boundary() {
        let psi0 = gaussian(vec![0.0, 0.0], 1.0);
        let inside = gaussian(vec![0.3, 0.1], 1.0);
        let kept = project_onto_kl_ball(&inside, &psi0, 1.0).unwrap();
        assert_eq!(kept, inside);
        let same = project_onto_kl_ball(&psi0, &psi0, 0.5).unwrap();
        assert_eq!(same, psi0);

        let mut rng = Rng::new(15);
        for _ in 0..50 {
            let kappa = 0.01 + rng.next_f64() * 5.0;
            let outside = gaussian(vec![rng.normal() * 9.0, rng.normal() * 9.0], 1.0);
            if gaussian_kl(&outside, &psi0).unwrap() <= kappa {
                continue;
            }
            let proj = project_onto_kl_ball(&outside, &psi0, kappa).unwrap();
            let kl = gaussian_kl(&proj, &psi0).unwrap();
            assert!((kl - kappa).abs() < 1e-10, "kl {kl} kappa {kappa}");
            // Result lies on the segment [psi0, psi]: cross product ~ 0 and
            // the scale is within (0, 1).
            let cross = proj.psi[0] * outside.psi[1] - proj.psi[1] * outside.psi[0];
            assert!(cross.abs() < 1e-9);
            let again = project_onto_kl_ball(&proj, &psi0, kappa).unwrap();
            assert_eq!(again.psi[0].to_bits(), proj.psi[0].to_bits());
            assert_eq!(again.psi[1].to_bits(), proj.psi[1].to_bits());
        }
    }
}
