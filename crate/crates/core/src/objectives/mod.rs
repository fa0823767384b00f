//! Preference and likelihood objectives on the neural policy, plus the exact
//! discrete-table machinery behind the RLHF upper bound ([`discrete`]).
//!
//! Image-DPO contrasts one answer under a clean and a corrupted image:
//!
//! ```text
//! u = α[(log π_θ(A|Q,I_w) − log π_ref(A|Q,I_w)) − (log π_θ(A|Q,I_l) − log π_ref(A|Q,I_l))]
//! L = −mean log σ(u)
//! ```
//!
//! Text-DPO is the usual answer-contrast form with the image held fixed.

pub mod discrete;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ln_sigmoid, ordered_mean, sigmoid};
use crate::error::{Error, Result};
use crate::imageops::ImageGrid;
use crate::policy::{AnswerId, ParamsView, PolicyParams, TokenSeq};

/// How the policy/reference ratio enters the sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioForm {
    /// Log-ratios, as in the reward reparametrization.
    #[default]
    Log,
    /// Plain probability ratios `π_θ / π_ref`.
    Raw,
}

impl std::str::FromStr for RatioForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(RatioForm::Log),
            "raw" => Ok(RatioForm::Raw),
            other => Err(Error::Parameter(format!("unknown ratio form {other:?}"))),
        }
    }
}

/// `(Q, A, I_w, I_l)`: same question and answer, clean vs corrupted image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrefItem {
    pub q: TokenSeq,
    pub a: AnswerId,
    pub img_good: ImageGrid,
    pub img_bad: ImageGrid,
}

/// `(Q, I, A_w, A_l)`: same question and image, chosen vs rejected answer.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrefItem {
    pub q: TokenSeq,
    pub img: ImageGrid,
    pub a_good: AnswerId,
    pub a_bad: AnswerId,
}

/// `(Q, I, A)` for supervised likelihood training.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedItem {
    pub q: TokenSeq,
    pub img: ImageGrid,
    pub a: AnswerId,
}

/// Validated, nonempty image-preference batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrefBatch(Vec<ImagePrefItem>);

impl ImagePrefBatch {
    pub fn new(items: Vec<ImagePrefItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Parameter("empty image preference batch".into()));
        }
        for (i, it) in items.iter().enumerate() {
            let same_shape = it.img_good.width() == it.img_bad.width()
                && it.img_good.height() == it.img_bad.height();
            if same_shape && it.img_good.diff_count(&it.img_bad) == 0 {
                return Err(Error::Validation(format!(
                    "item {i}: chosen and rejected images are identical"
                )));
            }
        }
        Ok(ImagePrefBatch(items))
    }

    pub fn items(&self) -> &[ImagePrefItem] {
        &self.0
    }

    pub fn into_items(self) -> Vec<ImagePrefItem> {
        self.0
    }
}

/// Validated, nonempty text-preference batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrefBatch(Vec<TextPrefItem>);

impl TextPrefBatch {
    pub fn new(items: Vec<TextPrefItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Parameter("empty text preference batch".into()));
        }
        if let Some(i) = items.iter().position(|it| it.a_good == it.a_bad) {
            return Err(Error::Validation(format!(
                "item {i}: chosen and rejected answers are identical"
            )));
        }
        Ok(TextPrefBatch(items))
    }

    pub fn items(&self) -> &[TextPrefItem] {
        &self.0
    }

    pub fn into_items(self) -> Vec<TextPrefItem> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Sigmoid argument per item (empty for likelihood losses).
    pub per_example_margin: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

/// Per-item contribution computed in parallel and reduced in item order.
struct ItemTerm {
    loss: f64,
    margin: f64,
    grad: Option<Vec<f64>>,
}

fn reduce(terms: Vec<ItemTerm>, n_params: usize, want_grad: bool) -> LossReport {
    let losses: Vec<f64> = terms.iter().map(|t| t.loss).collect();
    let loss = ordered_mean(&losses);
    let per_example_margin = terms.iter().map(|t| t.margin).collect();
    let grad = want_grad.then(|| {
        let n = terms.len() as f64;
        let mut g = vec![0.0; n_params];
        for t in &terms {
            for (acc, v) in g.iter_mut().zip(t.grad.as_ref().expect("item gradient")) {
                *acc += v;
            }
        }
        g.iter_mut().for_each(|v| *v /= n);
        g
    });
    LossReport {
        loss,
        per_example_margin,
        grad,
    }
}

fn check_pair(theta: &ParamsView<'_>, reference: &PolicyParams) -> Result<()> {
    if theta.dims() != reference.dims() {
        return Err(Error::Parameter(
            "policy and reference have different dimensions".into(),
        ));
    }
    Ok(())
}

fn check_scale(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// Image-DPO loss over `items`; `want_grad` adds the analytic gradient w.r.t. θ.
pub fn image_dpo_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    items: &[ImagePrefItem],
    alpha: f64,
    ratio_form: RatioForm,
    want_grad: bool,
) -> Result<LossReport> {
    image_dpo_loss_view(
        &theta.view(theta.as_flat()),
        reference,
        items,
        alpha,
        ratio_form,
        want_grad,
    )
}

/// [`image_dpo_loss`] over borrowed parameters (used by finite-difference checks).
pub fn image_dpo_loss_view(
    theta: &ParamsView<'_>,
    reference: &PolicyParams,
    items: &[ImagePrefItem],
    alpha: f64,
    ratio_form: RatioForm,
    want_grad: bool,
) -> Result<LossReport> {
    check_scale("alpha", alpha)?;
    check_pair(theta, reference)?;
    if items.is_empty() {
        return Err(Error::Parameter("empty image preference batch".into()));
    }
    let n_params = theta.len();
    let terms = items
        .par_iter()
        .map(|it| -> Result<ItemTerm> {
            let fw = reference.featurize(&it.img_good)?;
            let fl = reference.featurize(&it.img_bad)?;
            let ref_w = reference.log_prob_features(&it.q, &fw, it.a)?;
            let ref_l = reference.log_prob_features(&it.q, &fl, it.a)?;
            let mut gw = want_grad.then(|| vec![0.0; n_params]);
            let mut gl = want_grad.then(|| vec![0.0; n_params]);
            let th_w = match gw.as_mut() {
                Some(g) => theta.accumulate_log_prob_grad(&it.q, &fw, it.a, 1.0, g)?,
                None => theta.log_prob_features(&it.q, &fw, it.a)?,
            };
            let th_l = match gl.as_mut() {
                Some(g) => theta.accumulate_log_prob_grad(&it.q, &fl, it.a, 1.0, g)?,
                None => theta.log_prob_features(&it.q, &fl, it.a)?,
            };
            // (coefficient on ∇log π_θ(I_w), coefficient on ∇log π_θ(I_l))
            let (u, cw, cl) = match ratio_form {
                RatioForm::Log => {
                    let u = alpha * ((th_w - ref_w) - (th_l - ref_l));
                    (u, alpha, alpha)
                }
                RatioForm::Raw => {
                    let rw = (th_w - ref_w).exp();
                    let rl = (th_l - ref_l).exp();
                    (alpha * (rw - rl), alpha * rw, alpha * rl)
                }
            };
            let grad = match (gw, gl) {
                (Some(mut gw), Some(gl)) => {
                    let dl_du = -sigmoid(-u);
                    for (a, b) in gw.iter_mut().zip(&gl) {
                        *a = dl_du * (cw * *a - cl * b);
                    }
                    Some(gw)
                }
                _ => None,
            };
            Ok(ItemTerm {
                loss: -ln_sigmoid(u),
                margin: u,
                grad,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    finite_report(reduce(terms, n_params, want_grad))
}

/// Standard DPO over chosen/rejected answers with a shared image.
pub fn text_dpo_loss(
    theta: &PolicyParams,
    reference: &PolicyParams,
    items: &[TextPrefItem],
    beta: f64,
    want_grad: bool,
) -> Result<LossReport> {
    text_dpo_loss_view(&theta.view(theta.as_flat()), reference, items, beta, want_grad)
}

pub fn text_dpo_loss_view(
    theta: &ParamsView<'_>,
    reference: &PolicyParams,
    items: &[TextPrefItem],
    beta: f64,
    want_grad: bool,
) -> Result<LossReport> {
    check_scale("beta", beta)?;
    check_pair(theta, reference)?;
    if items.is_empty() {
        return Err(Error::Parameter("empty text preference batch".into()));
    }
    let n_params = theta.len();
    let terms = items
        .par_iter()
        .map(|it| -> Result<ItemTerm> {
            let f = reference.featurize(&it.img)?;
            let ref_c = reference.as_view().answer_contrast(&it.q, &f, it.a_good, it.a_bad)?;
            let th_c = theta.answer_contrast(&it.q, &f, it.a_good, it.a_bad)?;
            let mut gw = want_grad.then(|| vec![0.0; n_params]);
            let mut gl = want_grad.then(|| vec![0.0; n_params]);
            if let (Some(gw), Some(gl)) = (gw.as_mut(), gl.as_mut()) {
                theta.accumulate_log_prob_grad(&it.q, &f, it.a_good, 1.0, gw)?;
                theta.accumulate_log_prob_grad(&it.q, &f, it.a_bad, 1.0, gl)?;
            }
            let u = beta * (th_c - ref_c);
            let grad = match (gw, gl) {
                (Some(mut gw), Some(gl)) => {
                    let c = -sigmoid(-u) * beta;
                    for (a, b) in gw.iter_mut().zip(&gl) {
                        *a = c * (*a - b);
                    }
                    Some(gw)
                }
                _ => None,
            };
            Ok(ItemTerm {
                loss: -ln_sigmoid(u),
                margin: u,
                grad,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    finite_report(reduce(terms, n_params, want_grad))
}

/// Negative mean log-likelihood `−mean log π_θ(a | q, I)`.
pub fn mle_loss(theta: &PolicyParams, items: &[SupervisedItem], want_grad: bool) -> Result<LossReport> {
    mle_loss_view(&theta.view(theta.as_flat()), items, want_grad)
}

pub fn mle_loss_view(
    theta: &ParamsView<'_>,
    items: &[SupervisedItem],
    want_grad: bool,
) -> Result<LossReport> {
    if items.is_empty() {
        return Err(Error::Parameter("empty supervised batch".into()));
    }
    let n_params = theta.len();
    let grid = theta.dims().patch_grid()?;
    let terms = items
        .par_iter()
        .map(|it| -> Result<ItemTerm> {
            let f = crate::policy::image_features(&it.img, grid)?;
            let (lp, grad) = if want_grad {
                let mut g = vec![0.0; n_params];
                let lp = theta.accumulate_log_prob_grad(&it.q, &f, it.a, -1.0, &mut g)?;
                (lp, Some(g))
            } else {
                (theta.log_prob_features(&it.q, &f, it.a)?, None)
            };
            Ok(ItemTerm {
                loss: -lp,
                margin: lp,
                grad,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = reduce(terms, n_params, want_grad);
    report.per_example_margin.clear();
    finite_report(report)
}

fn finite_report(report: LossReport) -> Result<LossReport> {
    if !report.loss.is_finite() {
        return Err(Error::Domain(format!("non-finite loss {}", report.loss)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::imageops::gaussian_blur;
    use crate::policy::{init_params, log_prob, PolicyDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn random_image(rng: &mut ChaCha8Rng) -> ImageGrid {
        ImageGrid::new(32, 32, (0..1024).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn random_q(rng: &mut ChaCha8Rng) -> TokenSeq {
        let n = rng.gen_range(1..7);
        TokenSeq::new((0..n).map(|_| rng.gen_range(0..32)).collect(), 32).unwrap()
    }

    fn image_items(seed: u64, n: usize) -> Vec<ImagePrefItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let good = random_image(&mut rng);
                let bad = gaussian_blur(&good, 9).unwrap();
                ImagePrefItem {
                    q: random_q(&mut rng),
                    a: AnswerId(rng.gen_range(0..16)),
                    img_good: good,
                    img_bad: bad,
                }
            })
            .collect()
    }

    fn text_items(seed: u64, n: usize) -> Vec<TextPrefItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a_good = rng.gen_range(0..16);
                let a_bad = (a_good + rng.gen_range(1..16)) % 16;
                TextPrefItem {
                    q: random_q(&mut rng),
                    img: random_image(&mut rng),
                    a_good: AnswerId(a_good),
                    a_bad: AnswerId(a_bad),
                }
            })
            .collect()
    }

    fn scaled_params(seed: u64, scale: f64) -> PolicyParams {
        let mut p = init_params(PolicyDims::default(), seed).unwrap();
        p.as_flat_mut().iter_mut().for_each(|v| *v *= scale);
        p
    }

    #[test]
    fn losses_equal_ln2_at_reference() {
        let reference = init_params(PolicyDims::default(), 1).unwrap();
        let theta = reference.clone();
        for n in [1, 3, 7] {
            let items = image_items(n as u64, n);
            for form in [RatioForm::Log, RatioForm::Raw] {
                let r = image_dpo_loss(&theta, &reference, &items, 0.7, form, false).unwrap();
                assert_eq!(r.loss, LN2);
                assert!(r.per_example_margin.iter().all(|m| *m == 0.0));
            }
            let t = text_dpo_loss(&theta, &reference, &text_items(n as u64, n), 0.3, false).unwrap();
            assert_eq!(t.loss, LN2);
        }
    }

    #[test]
    fn single_item_with_margin_two() {
        let theta = scaled_params(2, 3.0);
        let reference = scaled_params(3, 3.0);
        let items = image_items(2, 1);
        let unit = image_dpo_loss(&theta, &reference, &items, 1.0, RatioForm::Log, false).unwrap();
        let alpha = 2.0 / unit.per_example_margin[0].abs();
        let mut items = items;
        if unit.per_example_margin[0] < 0.0 {
            let it = &mut items[0];
            std::mem::swap(&mut it.img_good, &mut it.img_bad);
        }
        let r = image_dpo_loss(&theta, &reference, &items, alpha, RatioForm::Log, false).unwrap();
        assert!((r.per_example_margin[0] - 2.0).abs() < 1e-12);
        assert!((r.loss - 0.126_928_011_042_972_6).abs() < 1e-12);
    }

    #[test]
    fn image_dpo_matches_recomputation_and_fd() {
        for seed in 0..4 {
            let theta = scaled_params(10 + seed, 3.0);
            let reference = scaled_params(20 + seed, 3.0);
            let items = image_items(30 + seed, 8);
            for form in [RatioForm::Log, RatioForm::Raw] {
                let alpha = 0.8;
                let r = image_dpo_loss(&theta, &reference, &items, alpha, form, true).unwrap();
                let mut manual = 0.0;
                for (it, m) in items.iter().zip(&r.per_example_margin) {
                    let tw = log_prob(&theta, &it.q, &it.img_good, it.a).unwrap();
                    let rw = log_prob(&reference, &it.q, &it.img_good, it.a).unwrap();
                    let tl = log_prob(&theta, &it.q, &it.img_bad, it.a).unwrap();
                    let rl = log_prob(&reference, &it.q, &it.img_bad, it.a).unwrap();
                    let u = match form {
                        RatioForm::Log => alpha * ((tw - rw) - (tl - rl)),
                        RatioForm::Raw => alpha * ((tw - rw).exp() - (tl - rl).exp()),
                    };
                    assert!((u - m).abs() < 1e-12);
                    manual += -(1.0 / (1.0 + (-u).exp())).ln() / items.len() as f64;
                }
                assert!((manual - r.loss).abs() < 1e-12);
                let f = |x: &[f64]| {
                    image_dpo_loss_view(&theta.view(x), &reference, &items, alpha, form, false)
                        .unwrap()
                        .loss
                };
                let rep = grad_check(f, theta.as_flat(), r.grad.as_ref().unwrap(), 1e-4).unwrap();
                assert!(rep.max_rel_error < 1e-4, "{form:?} seed {seed}: {rep:?}");
            }
        }
    }

    #[test]
    fn text_dpo_positive_margin_and_fd() {
        let reference = PolicyParams::zeros(PolicyDims::default()).unwrap();
        let mut theta = reference.clone();
        let c_start = theta.len() - 16;
        theta.as_flat_mut()[c_start + 4] = 5.0;
        let mut items = text_items(3, 4);
        for it in &mut items {
            it.a_good = AnswerId(4);
            it.a_bad = AnswerId(9);
        }
        let r = text_dpo_loss(&theta, &reference, &items, 0.5, false).unwrap();
        assert!(r.loss < LN2);

        let theta = scaled_params(40, 3.0);
        let reference = scaled_params(41, 3.0);
        let items = text_items(42, 8);
        let r = text_dpo_loss(&theta, &reference, &items, 0.5, true).unwrap();
        let f = |x: &[f64]| {
            text_dpo_loss_view(&theta.view(x), &reference, &items, 0.5, false)
                .unwrap()
                .loss
        };
        let rep = grad_check(f, theta.as_flat(), r.grad.as_ref().unwrap(), 1e-4).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn mle_gradient_passes_fd() {
        let theta = scaled_params(50, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let items: Vec<SupervisedItem> = (0..6)
            .map(|_| SupervisedItem {
                q: random_q(&mut rng),
                img: random_image(&mut rng),
                a: AnswerId(rng.gen_range(0..16)),
            })
            .collect();
        let r = mle_loss(&theta, &items, true).unwrap();
        assert!(r.loss > 0.0);
        let f = |x: &[f64]| mle_loss_view(&theta.view(x), &items, false).unwrap().loss;
        let rep = grad_check(f, theta.as_flat(), r.grad.as_ref().unwrap(), 1e-4).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn empty_batches_and_bad_scales_are_rejected() {
        let p = init_params(PolicyDims::default(), 0).unwrap();
        assert!(image_dpo_loss(&p, &p, &[], 1.0, RatioForm::Log, false).is_err());
        assert!(text_dpo_loss(&p, &p, &[], 1.0, false).is_err());
        assert!(mle_loss(&p, &[], false).is_err());
        let items = image_items(0, 1);
        assert!(image_dpo_loss(&p, &p, &items, 0.0, RatioForm::Log, false).is_err());
        assert!(ImagePrefBatch::new(vec![]).is_err());
        let mut same = items.clone();
        same[0].img_bad = same[0].img_good.clone();
        assert!(ImagePrefBatch::new(same).is_err());
        let mut t = text_items(0, 1);
        t[0].a_bad = t[0].a_good;
        assert!(TextPrefBatch::new(t).is_err());
    }

    #[test]
    fn losses_are_positive() {
        for seed in 0..5 {
            let theta = scaled_params(60 + seed, 5.0);
            let reference = scaled_params(70 + seed, 5.0);
            let r = image_dpo_loss(&theta, &reference, &image_items(seed, 4), 2.0, RatioForm::Log, false)
                .unwrap();
            assert!(r.loss > 0.0);
            let t = text_dpo_loss(&theta, &reference, &text_items(seed, 4), 2.0, false).unwrap();
            assert!(t.loss > 0.0);
        }
    }
}
