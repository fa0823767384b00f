//! Exact, enumeration-based quantities of KL-constrained reward maximization on
//! small discrete tables.
//!
//! A context is one `(Q, I)` combination; each context has a reference row
//! `π_ref(·|Q,I)` and a reward row `r(Q,I,·)` over a shared answer vocabulary.
//! The optimal policy is `π*(A) = π_ref(A)·exp(r(A)/β) / Z`, with
//! `Z = Σ_A π_ref(A)·exp(r(A)/β)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ln_sigmoid, ordered_mean, pairwise_sum, sigmoid, Dual};
use crate::error::{Error, Result};

/// Tolerance on row sums of probability tables.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    ref_policy: Vec<Vec<f64>>,
    reward: Vec<Vec<f64>>,
    beta: f64,
}

/// One preference: answer `answer` is preferred under context `good_ctx` over `bad_ctx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefTuple {
    pub answer: usize,
    pub good_ctx: usize,
    pub bad_ctx: usize,
}

impl DiscreteInstance {
    pub fn new(ref_policy: Vec<Vec<f64>>, reward: Vec<Vec<f64>>, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
        }
        if ref_policy.is_empty() || ref_policy.len() != reward.len() {
            return Err(Error::Parameter(format!(
                "{} reference rows vs {} reward rows",
                ref_policy.len(),
                reward.len()
            )));
        }
        let vocab = ref_policy[0].len();
        if vocab == 0 {
            return Err(Error::Parameter("empty answer vocabulary".into()));
        }
        for (c, (p, r)) in ref_policy.iter().zip(&reward).enumerate() {
            if p.len() != vocab || r.len() != vocab {
                return Err(Error::Parameter(format!("context {c}: ragged row")));
            }
            validate_row(p).map_err(|e| Error::Validation(format!("context {c}: {e}")))?;
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("context {c}: non-finite reward")));
            }
        }
        Ok(DiscreteInstance {
            ref_policy,
            reward,
            beta,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_contexts(&self) -> usize {
        self.ref_policy.len()
    }

    pub fn vocab(&self) -> usize {
        self.ref_policy[0].len()
    }

    pub fn ref_row(&self, ctx: usize) -> Result<&[f64]> {
        self.ref_policy
            .get(ctx)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("no context {ctx}")))
    }

    pub fn reward_row(&self, ctx: usize) -> Result<&[f64]> {
        self.reward
            .get(ctx)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("no context {ctx}")))
    }

    fn reward_at(&self, ctx: usize, answer: usize) -> Result<f64> {
        self.reward_row(ctx)?
            .get(answer)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no answer {answer} in context {ctx}")))
    }
}

fn validate_row(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err("probabilities must be finite and nonnegative".into());
    }
    let s = pairwise_sum(row);
    if (s - 1.0).abs() > ROW_SUM_TOL {
        return Err(format!("row sums to {s}"));
    }
    Ok(())
}

/// `exp(r_good) / (exp(r_good) + exp(r_bad))`, evaluated as `σ(r_good − r_bad)`.
pub fn bt_probability(r_good: f64, r_bad: f64) -> f64 {
    sigmoid(r_good - r_bad)
}

/// `−mean log σ(r(good, A) − r(bad, A))`.
pub fn reward_nll(instance: &DiscreteInstance, prefs: &[PrefTuple]) -> Result<f64> {
    if prefs.is_empty() {
        return Err(Error::Parameter("no preferences".into()));
    }
    let terms = prefs
        .iter()
        .map(|p| {
            let rw = instance.reward_at(p.good_ctx, p.answer)?;
            let rl = instance.reward_at(p.bad_ctx, p.answer)?;
            Ok(-ln_sigmoid(rw - rl))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ordered_mean(&terms))
}

/// `(max_A r/β, Σ_A π_ref·exp(r/β − max))`, so that `Z = exp(max)·sum`.
fn shifted_partition(instance: &DiscreteInstance, ctx: usize) -> Result<(f64, Vec<f64>, f64)> {
    let p = instance.ref_row(ctx)?;
    let r = instance.reward_row(ctx)?;
    let scaled: Vec<f64> = r.iter().map(|v| v / instance.beta).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = p
        .iter()
        .zip(&scaled)
        .map(|(pi, s)| pi * (s - m).exp())
        .collect();
    let total = pairwise_sum(&weights);
    Ok((m, weights, total))
}

/// `Z(Q,I) = Σ_A π_ref(A|Q,I)·exp(r(Q,I,A)/β)`.
pub fn partition_z(instance: &DiscreteInstance, ctx: usize) -> Result<f64> {
    let (m, _, total) = shifted_partition(instance, ctx)?;
    Ok(if m == 0.0 { total } else { m.exp() * total })
}

/// `log Z(Q,I)` without forming `Z`.
pub fn log_partition_z(instance: &DiscreteInstance, ctx: usize) -> Result<f64> {
    let (m, _, total) = shifted_partition(instance, ctx)?;
    Ok(m + total.ln())
}

/// The KL-constrained optimum `π*(·|Q,I)`.
pub fn optimal_policy(instance: &DiscreteInstance, ctx: usize) -> Result<Vec<f64>> {
    let (_, weights, total) = shifted_partition(instance, ctx)?;
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Reward implied by a policy: `r(A) = β log(π(A)/π_ref(A)) + β log Z`.
pub fn implied_reward(pi: &[f64], reference: &[f64], beta: f64, z: f64) -> Result<Vec<f64>> {
    if pi.len() != reference.len() || pi.is_empty() {
        return Err(Error::Parameter(format!(
            "policy has {} entries, reference {}",
            pi.len(),
            reference.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("beta must be positive, got {beta}")));
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Domain(format!("partition value {z} must be positive")));
    }
    pi.iter()
        .zip(reference)
        .enumerate()
        .map(|(a, (p, r))| {
            if *p <= 0.0 || *r <= 0.0 {
                return Err(Error::Domain(format!("zero probability at answer {a}")));
            }
            Ok(beta * (p / r).ln() + beta * z.ln())
        })
        .collect()
}

/// `mean_ctx [Σ_A π(A)r(A) − β Σ_A π(A) log(π(A)/π_ref(A))]` over `contexts`.
///
/// `policy` is indexed by context like the instance tables.
pub fn rlhf_objective_exact(
    policy: &[Vec<f64>],
    instance: &DiscreteInstance,
    contexts: &[usize],
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::Parameter("no contexts".into()));
    }
    let per_ctx = contexts
        .iter()
        .map(|&c| {
            let pi = policy
                .get(c)
                .ok_or_else(|| Error::Lookup(format!("policy has no context {c}")))?;
            let p_ref = instance.ref_row(c)?;
            let r = instance.reward_row(c)?;
            if pi.len() != p_ref.len() {
                return Err(Error::Validation(format!("context {c}: row length mismatch")));
            }
            let s = pairwise_sum(pi);
            if (s - 1.0).abs() > 1e-9 || pi.iter().any(|v| *v < 0.0) {
                return Err(Error::Validation(format!("context {c}: policy row sums to {s}")));
            }
            let mut reward_terms = Vec::with_capacity(pi.len());
            let mut kl_terms = Vec::with_capacity(pi.len());
            for a in 0..pi.len() {
                if pi[a] == 0.0 {
                    continue;
                }
                if p_ref[a] == 0.0 {
                    return Err(Error::Domain(format!(
                        "context {c}: policy puts mass on answer {a} where the reference has none"
                    )));
                }
                reward_terms.push(pi[a] * r[a]);
                kl_terms.push(pi[a] * (pi[a] / p_ref[a]).ln());
            }
            Ok(pairwise_sum(&reward_terms) - instance.beta * pairwise_sum(&kl_terms))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ordered_mean(&per_ctx))
}

/// Outcome of checking the Jensen majorant on one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// Exact BT negative log-likelihood including the partition terms.
    pub lhs: f64,
    /// Jensen majorant `mean[−½ log σ(2a) − ½ log σ(2z)]`.
    pub rhs: f64,
    pub holds: bool,
    /// Directional derivative of `rhs` over that of the image-contrast loss at `α = 2β`.
    pub grad_ratio: f64,
}

impl BoundCheck {
    pub fn gap(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Absolute slack allowed on `lhs ≤ rhs`.
pub const BOUND_TOL: f64 = 1e-12;

/// Dual-valued `log π_θ(·|ctx)` under `log π_θ + t·direction`, differentiated at `t = 0`.
fn dual_log_row(row: &[f64], direction: &[f64]) -> Vec<Dual> {
    let logits: Vec<Dual> = row
        .iter()
        .zip(direction)
        .map(|(p, d)| Dual::variable(p.ln(), *d))
        .collect();
    let max = logits.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<Dual> = logits.iter().map(|l| *l - Dual::constant(max)).collect();
    let total = shifted
        .iter()
        .fold(Dual::constant(0.0), |acc, l| acc + l.exp());
    let log_total = total.ln();
    shifted.into_iter().map(|l| l - log_total).collect()
}

struct PairTerms {
    /// `β[log Δratio_w − log Δratio_l]`, carrying its directional derivative.
    a: Dual,
    /// `β[log Z_w − log Z_l]`, constant in θ.
    z: f64,
}

fn pair_terms(
    instance: &DiscreteInstance,
    theta_log_rows: &[Vec<Dual>],
    log_z: &[f64],
    pairs: &[PrefTuple],
) -> Result<Vec<PairTerms>> {
    let beta = instance.beta;
    pairs
        .iter()
        .map(|p| {
            let lookup = |ctx: usize| -> Result<(Dual, f64)> {
                let row = theta_log_rows
                    .get(ctx)
                    .ok_or_else(|| Error::Lookup(format!("policy has no context {ctx}")))?;
                let lt = *row
                    .get(p.answer)
                    .ok_or_else(|| Error::Lookup(format!("no answer {}", p.answer)))?;
                let pr = instance.ref_row(ctx)?[p.answer];
                if pr <= 0.0 {
                    return Err(Error::Domain(format!(
                        "reference assigns zero probability to answer {} in context {ctx}",
                        p.answer
                    )));
                }
                Ok((lt, pr.ln()))
            };
            let (lt_w, lr_w) = lookup(p.good_ctx)?;
            let (lt_l, lr_l) = lookup(p.bad_ctx)?;
            let a = ((lt_w - Dual::constant(lr_w)) - (lt_l - Dual::constant(lr_l))).scale(beta);
            let z = beta * (log_z[p.good_ctx] - log_z[p.bad_ctx]);
            Ok(PairTerms { a, z })
        })
        .collect()
}

/// Image-contrast loss on probability tables, `−mean log σ(α[Δ_w − Δ_l])`,
/// with its directional derivative along `direction` (over per-context logits).
pub fn table_image_dpo_loss(
    instance: &DiscreteInstance,
    theta_tables: &[Vec<f64>],
    pairs: &[PrefTuple],
    alpha: f64,
    direction: &[Vec<f64>],
) -> Result<Dual> {
    let rows = dual_rows(theta_tables, direction)?;
    let mut acc = Dual::constant(0.0);
    for p in pairs {
        let ratio = |ctx: usize| -> Result<Dual> {
            let lt = rows
                .get(ctx)
                .ok_or_else(|| Error::Lookup(format!("policy has no context {ctx}")))?[p.answer];
            Ok(lt - Dual::constant(instance.ref_row(ctx)?[p.answer].ln()))
        };
        let u = (ratio(p.good_ctx)? - ratio(p.bad_ctx)?).scale(alpha);
        acc = acc - u.ln_sigmoid();
    }
    Ok(acc.scale(1.0 / pairs.len() as f64))
}

fn dual_rows(theta_tables: &[Vec<f64>], direction: &[Vec<f64>]) -> Result<Vec<Vec<Dual>>> {
    if direction.len() != theta_tables.len() {
        return Err(Error::Parameter("direction does not match policy tables".into()));
    }
    theta_tables
        .iter()
        .zip(direction)
        .enumerate()
        .map(|(c, (row, d))| {
            validate_row(row).map_err(|e| Error::Validation(format!("policy context {c}: {e}")))?;
            if row.iter().any(|v| *v <= 0.0) || d.len() != row.len() {
                return Err(Error::Domain(format!(
                    "policy context {c} needs strictly positive entries and a matching direction"
                )));
            }
            Ok(dual_log_row(row, d))
        })
        .collect()
}

/// Checks `lhs ≤ rhs` for the exact BT likelihood with partition terms against its
/// Jensen majorant, and the gradient link between the majorant and the
/// image-contrast loss at `α = 2β` along `direction`.
pub fn verify_upper_bound(
    instance: &DiscreteInstance,
    theta_tables: &[Vec<f64>],
    pairs: &[PrefTuple],
    direction: &[Vec<f64>],
) -> Result<BoundCheck> {
    if pairs.is_empty() {
        return Err(Error::Parameter("no preference pairs".into()));
    }
    if theta_tables.len() != instance.n_contexts() {
        return Err(Error::Lookup(format!(
            "policy has {} contexts, instance {}",
            theta_tables.len(),
            instance.n_contexts()
        )));
    }
    let log_z = (0..instance.n_contexts())
        .map(|c| log_partition_z(instance, c))
        .collect::<Result<Vec<f64>>>()?;
    let rows = dual_rows(theta_tables, direction)?;
    let terms = pair_terms(instance, &rows, &log_z, pairs)?;

    let n = terms.len() as f64;
    let mut lhs = Vec::with_capacity(terms.len());
    let mut rhs = Dual::constant(0.0);
    let mut rhs_vals = Vec::with_capacity(terms.len());
    for t in &terms {
        lhs.push(-ln_sigmoid(t.a.re + t.z));
        let theta_half = -(t.a.scale(2.0).ln_sigmoid()).scale(0.5);
        let const_half = -0.5 * ln_sigmoid(2.0 * t.z);
        rhs_vals.push(theta_half.re + const_half);
        rhs = rhs + theta_half + Dual::constant(const_half);
    }
    let lhs = ordered_mean(&lhs);
    let rhs_value = ordered_mean(&rhs_vals);
    let rhs_slope = rhs.eps / n;

    let dpo = table_image_dpo_loss(instance, theta_tables, pairs, 2.0 * instance.beta, direction)?;
    Ok(BoundCheck {
        lhs,
        rhs: rhs_value,
        holds: lhs <= rhs_value + BOUND_TOL,
        grad_ratio: rhs_slope / dpo.eps,
    })
}

/// Shape of randomly sampled verification cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseShape {
    pub max_vocab: usize,
    pub max_contexts: usize,
    pub max_pairs: usize,
    /// Rewards are drawn uniformly from `[-reward_scale, reward_scale]`.
    pub reward_scale: f64,
}

impl Default for CaseShape {
    fn default() -> Self {
        CaseShape {
            max_vocab: 8,
            max_contexts: 6,
            max_pairs: 10,
            reward_scale: 2.0,
        }
    }
}

/// One randomly drawn verification case.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCase {
    pub instance: DiscreteInstance,
    pub theta_tables: Vec<Vec<f64>>,
    pub pairs: Vec<PrefTuple>,
    pub direction: Vec<Vec<f64>>,
}

/// Strictly positive random probability row.
pub fn random_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total = pairwise_sum(&raw);
    let mut row: Vec<f64> = raw.into_iter().map(|v| v / total).collect();
    // fold the rounding residue into the largest entry so the row sums to 1
    let resid = 1.0 - pairwise_sum(&row);
    let (imax, _) = row
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |b, (i, v)| if *v > b.1 { (i, *v) } else { b });
    row[imax] += resid;
    row
}

pub fn sample_case<R: Rng>(rng: &mut R, beta: f64, shape: &CaseShape) -> Result<BoundCase> {
    let vocab = rng.gen_range(2..=shape.max_vocab.max(2));
    let n_ctx = rng.gen_range(2..=shape.max_contexts.max(2));
    let ref_policy: Vec<Vec<f64>> = (0..n_ctx).map(|_| random_row(rng, vocab)).collect();
    let reward: Vec<Vec<f64>> = (0..n_ctx)
        .map(|_| {
            (0..vocab)
                .map(|_| rng.gen_range(-shape.reward_scale..=shape.reward_scale))
                .collect()
        })
        .collect();
    let instance = DiscreteInstance::new(ref_policy, reward, beta)?;
    let theta_tables = (0..n_ctx).map(|_| random_row(rng, vocab)).collect();
    let n_pairs = rng.gen_range(1..=shape.max_pairs.max(1));
    let pairs = (0..n_pairs)
        .map(|_| {
            let good_ctx = rng.gen_range(0..n_ctx);
            let bad_ctx = (good_ctx + rng.gen_range(1..n_ctx)) % n_ctx;
            PrefTuple {
                answer: rng.gen_range(0..vocab),
                good_ctx,
                bad_ctx,
            }
        })
        .collect();
    let direction = (0..n_ctx)
        .map(|_| (0..vocab).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    Ok(BoundCase {
        instance,
        theta_tables,
        pairs,
        direction,
    })
}

/// Aggregate over many [`BoundCheck`]s, as written by the verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub instances: usize,
    pub violations: usize,
    pub max_gap: f64,
    pub min_gap: f64,
    pub grad_ratio_stats: RatioStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Largest `|ratio − 0.5|`.
    pub max_abs_dev: f64,
}

pub fn summarize(checks: &[BoundCheck]) -> BoundSummary {
    let gaps: Vec<f64> = checks.iter().map(BoundCheck::gap).collect();
    let ratios: Vec<f64> = checks.iter().map(|c| c.grad_ratio).collect();
    let fold = |v: &[f64], init: f64, f: fn(f64, f64) -> f64| v.iter().copied().fold(init, f);
    BoundSummary {
        instances: checks.len(),
        violations: checks.iter().filter(|c| !c.holds).count(),
        max_gap: fold(&gaps, f64::NEG_INFINITY, f64::max),
        min_gap: fold(&gaps, f64::INFINITY, f64::min),
        grad_ratio_stats: RatioStats {
            min: fold(&ratios, f64::INFINITY, f64::min),
            max: fold(&ratios, f64::NEG_INFINITY, f64::max),
            mean: ordered_mean(&ratios),
            max_abs_dev: ratios.iter().map(|r| (r - 0.5).abs()).fold(0.0, f64::max),
        },
    }
}
