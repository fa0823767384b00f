//! Deterministic plain gradient descent for likelihood pretraining and the
//! preference objectives.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::world::item_rng;
use crate::error::{Error, Result};
use crate::imageops::ImageGrid;
use crate::objectives::{
    image_dpo_loss, mle_loss, text_dpo_loss, ImagePrefItem, LossReport, RatioForm, SupervisedItem,
    TextPrefItem,
};
use crate::policy::{AnswerId, PolicyParams, TokenSeq};
use crate::records::write_bytes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    ImageDpo,
    TextDpo,
    TextDpoCorrupted,
    MlePretrain,
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "image_dpo" => Ok(Objective::ImageDpo),
            "text_dpo" => Ok(Objective::TextDpo),
            "text_dpo_corrupted" => Ok(Objective::TextDpoCorrupted),
            "mle_pretrain" | "mle" => Ok(Objective::MlePretrain),
            other => Err(Error::Parameter(format!("unknown objective {other:?}"))),
        }
    }
}

/// Stable learning rate for likelihood pretraining.
pub const DEFAULT_MLE_LR: f64 = 0.05;
/// Stable learning rate for the preference objectives.
pub const DEFAULT_DPO_LR: f64 = 0.01;
/// Default `α` (image contrast) or `β` (answer contrast).
pub const DEFAULT_ALPHA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    /// `α` for the image-contrast loss, `β` for the answer-contrast loss; unused by MLE.
    pub alpha_or_beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub ratio_form: RatioForm,
    /// Stop after this many updates even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    pub fn default_for(objective: Objective) -> Self {
        match objective {
            Objective::MlePretrain => TrainConfig {
                objective,
                alpha_or_beta: 1.0,
                learning_rate: DEFAULT_MLE_LR,
                epochs: 200,
                batch_size: 1,
                seed: 0,
                ratio_form: RatioForm::Log,
                max_steps: None,
            },
            _ => TrainConfig {
                objective,
                alpha_or_beta: DEFAULT_ALPHA,
                learning_rate: DEFAULT_DPO_LR,
                epochs: 200,
                batch_size: 256,
                seed: 0,
                ratio_form: RatioForm::Log,
                max_steps: Some(200),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning_rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !(self.alpha_or_beta > 0.0 && self.alpha_or_beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "alpha_or_beta must be positive, got {}",
                self.alpha_or_beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Mean sigmoid argument over the batch; empty for likelihood training.
    pub mean_margin: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    /// Loss and margin of each update, measured before the update.
    pub steps: Vec<StepRecord>,
    /// Loss on the full training set before training and after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Full-set mean margin before and after training (preference objectives).
    pub initial_mean_margin: Option<f64>,
    pub final_mean_margin: Option<f64>,
    pub final_clean_accuracy: f64,
    /// Accuracy on the rejected images of image pairs.
    pub final_corrupted_accuracy: Option<f64>,
}

impl TrainHistory {
    /// CSV with columns `step,loss,mean_margin,grad_norm`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.steps {
            w.serialize(s)
                .map_err(|e| Error::Validation(format!("csv encoding failed: {e}")))?;
        }
        w.into_inner()
            .map_err(|e| Error::Validation(format!("csv encoding failed: {e}")))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_csv()?)
    }
}

/// Fraction of `(q, img, a)` whose argmax answer (lowest index on ties) is `a`.
pub fn accuracy<'a, I>(params: &PolicyParams, items: I) -> Result<f64>
where
    I: IntoParallelIterator<Item = (&'a TokenSeq, &'a ImageGrid, AnswerId)>,
{
    let hits: Vec<bool> = items
        .into_par_iter()
        .map(|(q, img, a)| Ok(predict(params, q, img)? == a))
        .collect::<Result<_>>()?;
    if hits.is_empty() {
        return Err(Error::Parameter("accuracy over an empty set".into()));
    }
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Argmax answer with ties going to the lowest index.
pub fn predict(params: &PolicyParams, q: &TokenSeq, img: &ImageGrid) -> Result<AnswerId> {
    let lp = crate::policy::forward(params, q, img)?;
    let mut best = 0;
    for (i, v) in lp.iter().enumerate() {
        if *v > lp[best] {
            best = i;
        }
    }
    Ok(AnswerId(best))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mean(v: &[f64]) -> f64 {
    crate::diffcore::ordered_mean(v)
}

/// Generic loop: `eval(batch, want_grad)` returns the batch loss report.
fn descend<T: Clone + Sync>(
    params: &mut PolicyParams,
    data: &[T],
    config: &TrainConfig,
    has_margin: bool,
    eval: impl Fn(&PolicyParams, &[T], bool) -> Result<LossReport>,
) -> Result<(Vec<StepRecord>, Vec<f64>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("no training data".into()));
    }
    let max_steps = config.max_steps.unwrap_or(usize::MAX);
    let diverged = |step: usize, e: Error| Error::Training {
        step,
        message: e.to_string(),
    };
    let mut steps = Vec::new();
    let mut epoch_losses = vec![eval(params, data, false).map_err(|e| diverged(0, e))?.loss];
    let mut order: Vec<usize> = (0..data.len()).collect();
    'epochs: for epoch in 0..config.epochs {
        let batches: Vec<Vec<T>>;
        let slices: Vec<&[T]> = if config.batch_size >= data.len() {
            vec![data]
        } else {
            order.shuffle(&mut item_rng(config.seed, epoch as u64));
            batches = order
                .chunks(config.batch_size)
                .map(|idx| idx.iter().map(|&i| data[i].clone()).collect())
                .collect();
            batches.iter().map(Vec::as_slice).collect()
        };
        for batch in slices {
            if steps.len() >= max_steps {
                break 'epochs;
            }
            let step = steps.len() + 1;
            let report = eval(params, batch, true).map_err(|e| diverged(step, e))?;
            let grad = report.grad.expect("gradient requested");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(step, Error::Domain("non-finite gradient".into())));
            }
            for (p, g) in params.as_flat_mut().iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
            steps.push(StepRecord {
                step,
                loss: report.loss,
                mean_margin: has_margin.then(|| mean(&report.per_example_margin)),
                grad_norm: l2(&grad),
            });
        }
        let after = eval(params, data, false).map_err(|e| diverged(steps.len(), e))?;
        epoch_losses.push(after.loss);
    }
    Ok((steps, epoch_losses))
}

/// Minimizes `−mean log π_θ(a | q, I)`.
pub fn mle_pretrain(
    params: &PolicyParams,
    items: &[SupervisedItem],
    config: &TrainConfig,
) -> Result<(PolicyParams, TrainHistory)> {
    if config.objective != Objective::MlePretrain {
        return Err(Error::Parameter(format!(
            "mle_pretrain called with objective {:?}",
            config.objective
        )));
    }
    let mut theta = params.clone();
    let (steps, epoch_losses) =
        descend(&mut theta, items, config, false, |p, b, g| mle_loss(p, b, g))?;
    let clean = accuracy(&theta, items.par_iter().map(|it| (&it.q, &it.img, it.a)))?;
    Ok((
        theta,
        TrainHistory {
            config: *config,
            steps,
            epoch_losses,
            initial_mean_margin: None,
            final_mean_margin: None,
            final_clean_accuracy: clean,
            final_corrupted_accuracy: None,
        },
    ))
}

/// Preference data for [`train_dpo`].
#[derive(Debug, Clone, Copy)]
pub enum PrefData<'a> {
    Image(&'a [ImagePrefItem]),
    Text(&'a [TextPrefItem]),
}

/// Fine-tunes `theta` against the frozen `reference`.
pub fn train_dpo(
    theta: &PolicyParams,
    reference: &PolicyParams,
    data: PrefData<'_>,
    config: &TrainConfig,
) -> Result<(PolicyParams, TrainHistory)> {
    let mut params = theta.clone();
    let k = config.alpha_or_beta;
    let form = config.ratio_form;
    match (config.objective, data) {
        (Objective::ImageDpo, PrefData::Image(items)) => {
            let eval = |p: &PolicyParams, b: &[ImagePrefItem], g: bool| {
                image_dpo_loss(p, reference, b, k, form, g)
            };
            let initial = eval(&params, items, false)?;
            let (steps, epoch_losses) = descend(&mut params, items, config, true, eval)?;
            let fin = eval(&params, items, false)?;
            let clean = accuracy(&params, items.par_iter().map(|it| (&it.q, &it.img_good, it.a)))?;
            let corrupted =
                accuracy(&params, items.par_iter().map(|it| (&it.q, &it.img_bad, it.a)))?;
            Ok((
                params,
                TrainHistory {
                    config: *config,
                    steps,
                    epoch_losses,
                    initial_mean_margin: Some(mean(&initial.per_example_margin)),
                    final_mean_margin: Some(mean(&fin.per_example_margin)),
                    final_clean_accuracy: clean,
                    final_corrupted_accuracy: Some(corrupted),
                },
            ))
        }
        (Objective::TextDpo | Objective::TextDpoCorrupted, PrefData::Text(items)) => {
            let eval = |p: &PolicyParams, b: &[TextPrefItem], g: bool| {
                text_dpo_loss(p, reference, b, k, g)
            };
            let initial = eval(&params, items, false)?;
            let (steps, epoch_losses) = descend(&mut params, items, config, true, eval)?;
            let fin = eval(&params, items, false)?;
            let clean = accuracy(&params, items.par_iter().map(|it| (&it.q, &it.img, it.a_good)))?;
            Ok((
                params,
                TrainHistory {
                    config: *config,
                    steps,
                    epoch_losses,
                    initial_mean_margin: Some(mean(&initial.per_example_margin)),
                    final_mean_margin: Some(mean(&fin.per_example_margin)),
                    final_clean_accuracy: clean,
                    final_corrupted_accuracy: None,
                },
            ))
        }
        (obj, _) => Err(Error::Parameter(format!(
            "objective {obj:?} does not match the supplied preference data"
        ))),
    }
}

/// Trailing moving average with window `w` (defined from index `w − 1` on).
pub fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || v.len() < w {
        return Vec::new();
    }
    (0..=v.len() - w).map(|i| mean(&v[i..i + w])).collect()
}
