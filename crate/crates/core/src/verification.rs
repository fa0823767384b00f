//! Batch verification runs shared by the CLI and the acceptance suite: the
//! RLHF upper bound over random discrete instances, finite-difference checks of
//! every objective, and the one-step direction check of the image contrast.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{grad_check, GradCheckReport};
use crate::error::{Error, Result};
use crate::imageops::{gaussian_blur, ImageGrid};
use crate::objectives::discrete::{
    log_partition_z, sample_case, summarize, verify_upper_bound, BoundSummary, CaseShape,
    PrefTuple, BOUND_TOL,
};
use crate::objectives::{
    image_dpo_loss, image_dpo_loss_view, mle_loss, mle_loss_view, text_dpo_loss,
    text_dpo_loss_view, ImagePrefItem, RatioForm, SupervisedItem, TextPrefItem,
};
use crate::policy::{init_params, log_prob, AnswerId, PolicyDims, PolicyParams, TokenSeq};
use crate::trainer::Objective;

/// Tolerance on `|grad_ratio − ½|`.
pub const GRAD_RATIO_TOL: f64 = 1e-9;
/// Tolerance on finite-difference relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub beta: f64,
    #[serde(flatten)]
    pub summary: BoundSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessSummary {
    /// Instances where `a = z` could be forced on a pair.
    pub cases: usize,
    pub max_abs_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub seed: u64,
    pub betas: Vec<f64>,
    #[serde(flatten)]
    pub overall: BoundSummary,
    pub per_beta: Vec<BetaSummary>,
    pub tightness: TightnessSummary,
}

impl BoundReport {
    pub fn passes(&self) -> bool {
        self.overall.violations == 0
            && self.overall.grad_ratio_stats.max_abs_dev < GRAD_RATIO_TOL
            && self.tightness.max_abs_gap < BOUND_TOL
    }
}

/// Rescales `θ(k|ctx0)` so the log-ratio contrast equals the partition gap
/// between contexts 0 and 1; `None` when that needs a probability ≥ 0.99.
fn forced_equal_case(
    instance: &crate::objectives::discrete::DiscreteInstance,
    k: usize,
) -> Result<Option<Vec<Vec<f64>>>> {
    let d = log_partition_z(instance, 0)? - log_partition_z(instance, 1)?;
    let r0 = instance.ref_row(0)?;
    let target = r0[k] * d.exp();
    if !(target < 0.99) {
        return Ok(None);
    }
    let rest = (1.0 - target) / (1.0 - r0[k]);
    let mut theta: Vec<Vec<f64>> = (0..instance.n_contexts())
        .map(|c| instance.ref_row(c).map(<[f64]>::to_vec))
        .collect::<Result<_>>()?;
    theta[0] = r0
        .iter()
        .enumerate()
        .map(|(a, p)| if a == k { target } else { p * rest })
        .collect();
    let s: f64 = theta[0].iter().sum();
    Ok(((s - 1.0).abs() <= 1e-12).then_some(theta))
}

/// Instance `i` uses `betas[i % betas.len()]` and its own random stream.
pub fn run_bound_verification(instances: usize, betas: &[f64], seed: u64) -> Result<BoundReport> {
    if instances == 0 {
        return Err(Error::Parameter("--instances must be at least 1".into()));
    }
    if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
        return Err(Error::Parameter(format!("betas must be positive and finite, got {betas:?}")));
    }
    let shape = CaseShape::default();
    let results = (0..instances)
        .into_par_iter()
        .map(|i| {
            let beta = betas[i % betas.len()];
            let mut rng = trial_rng(seed, i as u64);
            let case = sample_case(&mut rng, beta, &shape)?;
            let chk = verify_upper_bound(&case.instance, &case.theta_tables, &case.pairs, &case.direction)?;
            let k = rng.gen_range(0..case.instance.vocab());
            let tight = match forced_equal_case(&case.instance, k)? {
                Some(theta) => {
                    let pairs = [PrefTuple {
                        answer: k,
                        good_ctx: 0,
                        bad_ctx: 1,
                    }];
                    let t = verify_upper_bound(&case.instance, &theta, &pairs, &case.direction)?;
                    Some((t.lhs - t.rhs).abs())
                }
                None => None,
            };
            Ok((beta, chk, tight))
        })
        .collect::<Result<Vec<_>>>()?;
    let checks: Vec<_> = results.iter().map(|r| r.1).collect();
    let per_beta = betas
        .iter()
        .map(|&beta| BetaSummary {
            beta,
            summary: summarize(
                &results
                    .iter()
                    .filter(|r| r.0 == beta)
                    .map(|r| r.1)
                    .collect::<Vec<_>>(),
            ),
        })
        .collect();
    let tight: Vec<f64> = results.iter().filter_map(|r| r.2).collect();
    Ok(BoundReport {
        seed,
        betas: betas.to_vec(),
        overall: summarize(&checks),
        per_beta,
        tightness: TightnessSummary {
            cases: tight.len(),
            max_abs_gap: tight.iter().copied().fold(0.0, f64::max),
        },
    })
}

/// Random per-tile brightness plus pixel noise, so tile features vary widely.
pub fn random_image<R: Rng>(rng: &mut R, dims: &PolicyDims) -> Result<ImageGrid> {
    let grid = dims.patch_grid()?;
    let side = 32.max(grid);
    let levels: Vec<f64> = (0..grid * grid).map(|_| rng.gen::<f64>()).collect();
    let pixels = (0..side * side)
        .map(|i| {
            let (x, y) = (i % side, i / side);
            let base = levels[(y * grid / side) * grid + x * grid / side];
            (base + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
        })
        .collect();
    ImageGrid::new(side, side, pixels)
}

pub fn random_question<R: Rng>(rng: &mut R, dims: &PolicyDims) -> Result<TokenSeq> {
    let n = rng.gen_range(1..7);
    TokenSeq::new(
        (0..n).map(|_| rng.gen_range(0..dims.question_vocab)).collect(),
        dims.question_vocab,
    )
}

/// Clean noise images against their blurred copies.
pub fn random_image_items<R: Rng>(rng: &mut R, dims: &PolicyDims, n: usize) -> Result<Vec<ImagePrefItem>> {
    (0..n)
        .map(|_| {
            let good = random_image(rng, dims)?;
            let bad = gaussian_blur(&good, 9)?;
            Ok(ImagePrefItem {
                q: random_question(rng, dims)?,
                a: AnswerId(rng.gen_range(0..dims.answer_vocab)),
                img_good: good,
                img_bad: bad,
            })
        })
        .collect()
}

fn random_params<R: Rng>(rng: &mut R, dims: PolicyDims) -> Result<PolicyParams> {
    // larger weights than the init range, so the losses are far from their flat start
    let mut p = init_params(dims, rng.gen())?;
    p.as_flat_mut().iter_mut().for_each(|v| *v *= 3.0);
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub objective: Objective,
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    pub failures: usize,
    pub max_rel_error: f64,
    pub worst: GradCheckReport,
    pub worst_trial: usize,
}

impl GradCheckSummary {
    pub fn passes(&self) -> bool {
        self.failures == 0
    }
}

fn gradcheck_trial(objective: Objective, seed: u64, trial: usize, step: f64) -> Result<GradCheckReport> {
    let dims = PolicyDims::default();
    let mut rng = trial_rng(seed, trial as u64);
    let theta = random_params(&mut rng, dims)?;
    let n = 8;
    let (grad, f): (Vec<f64>, Box<dyn Fn(&[f64]) -> f64 + Sync>) = match objective {
        Objective::ImageDpo => {
            let reference = random_params(&mut rng, dims)?;
            let items = random_image_items(&mut rng, &dims, n)?;
            let alpha = rng.gen_range(0.2..2.0);
            let form = if trial % 2 == 0 { RatioForm::Log } else { RatioForm::Raw };
            let g = image_dpo_loss(&theta, &reference, &items, alpha, form, true)?.grad;
            let th = theta.clone();
            (
                g.unwrap_or_default(),
                Box::new(move |x: &[f64]| {
                    image_dpo_loss_view(&th.view(x), &reference, &items, alpha, form, false)
                        .map_or(f64::NAN, |r| r.loss)
                }),
            )
        }
        Objective::TextDpo | Objective::TextDpoCorrupted => {
            let reference = random_params(&mut rng, dims)?;
            let items = (0..n)
                .map(|_| {
                    let a_good = rng.gen_range(0..dims.answer_vocab);
                    let a_bad = (a_good + rng.gen_range(1..dims.answer_vocab)) % dims.answer_vocab;
                    Ok(TextPrefItem {
                        q: random_question(&mut rng, &dims)?,
                        img: random_image(&mut rng, &dims)?,
                        a_good: AnswerId(a_good),
                        a_bad: AnswerId(a_bad),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let beta = rng.gen_range(0.2..2.0);
            let g = text_dpo_loss(&theta, &reference, &items, beta, true)?.grad;
            let th = theta.clone();
            (
                g.unwrap_or_default(),
                Box::new(move |x: &[f64]| {
                    text_dpo_loss_view(&th.view(x), &reference, &items, beta, false)
                        .map_or(f64::NAN, |r| r.loss)
                }),
            )
        }
        Objective::MlePretrain => {
            let items = (0..n)
                .map(|_| {
                    Ok(SupervisedItem {
                        q: random_question(&mut rng, &dims)?,
                        img: random_image(&mut rng, &dims)?,
                        a: AnswerId(rng.gen_range(0..dims.answer_vocab)),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let g = mle_loss(&theta, &items, true)?.grad;
            let th = theta.clone();
            (
                g.unwrap_or_default(),
                Box::new(move |x: &[f64]| {
                    mle_loss_view(&th.view(x), &items, false).map_or(f64::NAN, |r| r.loss)
                }),
            )
        }
    };
    grad_check(f, theta.as_flat(), &grad, step)
}

/// Finite-difference checks of `objective` on `trials` random draws.
pub fn run_gradcheck(objective: Objective, trials: usize, seed: u64, step: f64) -> Result<GradCheckSummary> {
    if trials == 0 {
        return Err(Error::Parameter("--trials must be at least 1".into()));
    }
    // trials run one after another; each check is already parallel over coordinates
    let reports = (0..trials)
        .map(|t| gradcheck_trial(objective, seed, t, step))
        .collect::<Result<Vec<_>>>()?;
    let (worst_trial, worst) = reports
        .iter()
        .enumerate()
        .fold((0, reports[0]), |b, (i, r)| {
            if r.max_rel_error > b.1.max_rel_error {
                (i, *r)
            } else {
                b
            }
        });
    Ok(GradCheckSummary {
        objective,
        trials,
        seed,
        tolerance: GRADCHECK_TOL,
        step,
        failures: reports.iter().filter(|r| !r.passes(GRADCHECK_TOL)).count(),
        max_rel_error: worst.max_rel_error,
        worst,
        worst_trial,
    })
}

/// Outcome of one gradient step from `θ = ref` on the image contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionTrial {
    pub trial: usize,
    pub items: usize,
    /// Items whose clean-image log-probability rose.
    pub good_up: usize,
    /// Items whose corrupted-image log-probability fell.
    pub bad_down: usize,
    /// Change of the batch mean of `Δ_w − Δ_l`.
    pub margin_change: f64,
}

impl DirectionTrial {
    pub fn all_items_move(&self) -> bool {
        self.good_up == self.items && self.bad_down == self.items
    }
}

/// One step of size `eta` on the image-contrast loss from `θ = ref`, per trial.
pub fn direction_trials(trials: usize, items: usize, eta: f64, seed: u64) -> Result<Vec<DirectionTrial>> {
    let dims = PolicyDims::default();
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t as u64);
            let reference = random_params(&mut rng, dims)?;
            let batch = random_image_items(&mut rng, &dims, items)?;
            let r = image_dpo_loss(&reference, &reference, &batch, 1.0, RatioForm::Log, true)?;
            let grad = r
                .grad
                .ok_or_else(|| Error::Parameter("loss returned no gradient".into()))?;
            let mut theta = reference.clone();
            theta
                .as_flat_mut()
                .iter_mut()
                .zip(&grad)
                .for_each(|(v, g)| *v -= eta * g);
            let mut good_up = 0;
            let mut bad_down = 0;
            let mut margin = 0.0;
            for it in &batch {
                let dw = log_prob(&theta, &it.q, &it.img_good, it.a)?
                    - log_prob(&reference, &it.q, &it.img_good, it.a)?;
                let dl = log_prob(&theta, &it.q, &it.img_bad, it.a)?
                    - log_prob(&reference, &it.q, &it.img_bad, it.a)?;
                good_up += usize::from(dw > 0.0);
                bad_down += usize::from(dl < 0.0);
                margin += (dw - dl) / batch.len() as f64;
            }
            Ok(DirectionTrial {
                trial: t,
                items,
                good_up,
                bad_down,
                margin_change: margin,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bound_run_passes_and_is_deterministic() {
        let a = run_bound_verification(60, &[0.1, 1.0, 5.0], 3).unwrap();
        assert!(a.passes(), "{a:?}");
        assert_eq!(a.overall.instances, 60);
        assert_eq!(a.per_beta.iter().map(|b| b.summary.instances).sum::<usize>(), 60);
        assert!(a.tightness.cases > 0);
        assert_eq!(a, run_bound_verification(60, &[0.1, 1.0, 5.0], 3).unwrap());
        assert!(run_bound_verification(0, &[1.0], 3).is_err());
        assert!(run_bound_verification(5, &[-1.0], 3).is_err());
    }

    #[test]
    fn gradcheck_runs_pass() {
        for obj in [Objective::ImageDpo, Objective::TextDpo, Objective::MlePretrain] {
            let s = run_gradcheck(obj, 2, 5, FD_STEP).unwrap();
            assert!(s.passes(), "{s:?}");
        }
    }

    #[test]
    fn one_step_always_widens_the_mean_margin() {
        for t in direction_trials(10, 8, 1e-3, 2).unwrap() {
            assert!(t.margin_change > 0.0, "{t:?}");
        }
    }
}
