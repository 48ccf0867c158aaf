//! Joint teacher-forced training, dev-perplexity model selection and
//! finite-difference gradient checks.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::labeling::SentenceLabelSet;
use crate::model::{Example, Grads, LossBundle, LossOptions, Model, ParamId, Params, Tensor, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Dev perplexity is measured every `eval_every` steps and after the
    /// last step.
    pub eval_every: usize,
    pub seed: u64,
    pub ext_weight: f64,
    /// Fraction of batches trained with the null aspect.
    pub null_aspect_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 20,
            clip_norm: 2.0,
            eval_every: 100,
            seed: 0,
            ext_weight: 1.0,
            null_aspect_rate: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("clip_norm", self.clip_norm),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Validation("epochs, batch_size and eval_every must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.null_aspect_rate) {
            return Err(Error::Validation(format!(
                "null_aspect_rate must be in [0, 1], got {}",
                self.null_aspect_rate
            )));
        }
        if !(self.ext_weight >= 0.0 && self.ext_weight.is_finite()) {
            return Err(Error::Validation(format!("ext_weight must be non-negative, got {}", self.ext_weight)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
    pub loss_ext: f64,
    pub loss_gen: f64,
    pub null_aspect: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevPoint {
    pub step: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLoss>,
    pub dev_history: Vec<DevPoint>,
    pub best_step: usize,
    pub best_perplexity: f64,
    /// Path of the best checkpoint, if one was written.
    pub best_checkpoint: Option<PathBuf>,
}

/// Character vocabulary of the training inputs and summaries.
pub fn vocab_from_instances(instances: &[Instance], separator: char) -> Vocab {
    Vocab::build(
        instances
            .iter()
            .flat_map(|i| i.sentences.iter().map(String::as_str).chain(std::iter::once(i.summary.as_str()))),
        separator,
    )
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(params: &Params) -> Self {
        let zeros: Vec<Tensor> = params.zero_grads().tensors().to_vec();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn update(&mut self, params: &mut Params, grads: &Grads, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            for ((p, gi), (mi, vi)) in params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *p -= cfg.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn prepare_all(model: &Model, instances: &[Instance], labels: Option<&[SentenceLabelSet]>) -> Result<Vec<Example>> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| model.prepare(inst, labels.map(|l| l[i].labels.as_slice())))
        .collect()
}

/// Trains `model` in place and leaves it holding the parameters with the
/// lowest dev perplexity. When `checkpoint` is given, the best model is
/// written there each time it improves.
pub fn train(
    model: &mut Model,
    train: &[Instance],
    labels: &[SentenceLabelSet],
    dev: &[Instance],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::InvalidArgument("train and dev sets must be non-empty".into()));
    }
    if labels.len() != train.len() {
        return Err(Error::Shape(format!(
            "{} label sets for {} training instances",
            labels.len(),
            train.len()
        )));
    }
    let examples = prepare_all(model, train, Some(labels))?;
    let dev_examples = prepare_all(model, dev, None)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let total_steps = cfg.epochs * examples.len().div_ceil(cfg.batch_size);

    let mut report = TrainReport {
        steps: Vec::with_capacity(total_steps),
        dev_history: Vec::new(),
        best_step: 0,
        best_perplexity: f64::INFINITY,
        best_checkpoint: None,
    };
    let mut best_params = model.params().clone();
    let mut step = 0;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let null_aspect = cfg.null_aspect_rate > 0.0 && rng.gen::<f64>() < cfg.null_aspect_rate;
            let opts = LossOptions {
                ext_weight: cfg.ext_weight,
                null_aspect,
            };
            let m: &Model = model;
            let results = cfg
                .execution
                .map(batch, |&i| m.loss_and_grads(&examples[i], opts));
            let mut grads = model.params().zero_grads();
            let mut mean = LossBundle::default();
            for r in results {
                let (b, g) = r?;
                grads.add_assign(&g);
                mean.loss_total += b.loss_total;
                mean.loss_ext += b.loss_ext;
                mean.loss_gen += b.loss_gen;
            }
            let k = 1.0 / batch.len() as f64;
            grads.scale(k);
            let entry = StepLoss {
                step,
                loss: mean.loss_total * k,
                loss_ext: mean.loss_ext * k,
                loss_gen: mean.loss_gen * k,
                null_aspect,
            };
            if !entry.loss.is_finite() || !grads.is_finite() {
                let snapshot = snapshot_path(checkpoint, step);
                if let Some(p) = &snapshot {
                    model.save(p)?;
                }
                return Err(Error::NonFiniteLoss {
                    step,
                    snapshot: format!(
                        "loss {} (ext {}, gen {}), batch {:?}, parameters saved to {}",
                        entry.loss,
                        entry.loss_ext,
                        entry.loss_gen,
                        batch,
                        snapshot.map_or("<none>".into(), |p| p.display().to_string())
                    ),
                });
            }
            report.steps.push(entry);

            let norm = grads.norm();
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            adam.update(model.params_mut(), &grads, cfg);

            if step % cfg.eval_every == 0 || step == total_steps {
                let ppl = perplexity_of(model, &dev_examples, cfg.execution)?;
                log::info!("step {step} loss {:.4} dev ppl {ppl:.4}", entry.loss);
                report.dev_history.push(DevPoint { step, perplexity: ppl });
                if ppl < report.best_perplexity {
                    report.best_perplexity = ppl;
                    report.best_step = step;
                    best_params = model.params().clone();
                    if let Some(path) = checkpoint {
                        model.save(path)?;
                        report.best_checkpoint = Some(path.to_path_buf());
                    }
                }
            }
        }
    }
    *model.params_mut() = best_params;
    Ok(report)
}

fn snapshot_path(checkpoint: Option<&Path>, step: usize) -> Option<PathBuf> {
    checkpoint.map(|p| p.with_extension(format!("nonfinite-{step}.ckpt")))
}

/// `exp` of the token-mean NLL over all instances, teacher-forced, with
/// the instances' own aspects.
pub fn perplexity(model: &Model, instances: &[Instance]) -> Result<f64> {
    perplexity_with(model, instances, Execution::default())
}

pub fn perplexity_with(model: &Model, instances: &[Instance], exec: Execution) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("perplexity of an empty set".into()));
    }
    let examples = prepare_all(model, instances, None)?;
    perplexity_of(model, &examples, exec)
}

fn perplexity_of(model: &Model, examples: &[Example], exec: Execution) -> Result<f64> {
    let opts = LossOptions::default();
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for b in exec.map(examples, |ex| model.loss(ex, opts)) {
        let b = b?;
        nll += b.loss_gen * b.target_length as f64;
        tokens += b.target_length;
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entry with the largest error: (flat index, analytic, numeric).
    pub worst: (usize, f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: Vec<ParamCheck>,
}

/// Options of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Entries sampled per parameter tensor; `None` checks all of them.
    pub per_param: Option<usize>,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub seed: u64,
    pub loss: LossOptions,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            per_param: None,
            floor: 1e-6,
            seed: 0,
            loss: LossOptions::default(),
        }
    }
}

/// Compares analytic gradients of the total loss with fourth-order central
/// differences `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, floor)`.
/// The model's parameters are restored afterwards.
pub fn gradient_check(model: &mut Model, example: &Example, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(example, opts.loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<ParamId> = model.params().ids().collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: Vec::with_capacity(ids.len()),
    };
    for id in ids {
        let len = model.params().get(id).data().len();
        let mut entries: Vec<usize> = (0..len).collect();
        if let Some(k) = opts.per_param {
            entries.shuffle(&mut rng);
            entries.truncate(k);
            entries.sort_unstable();
        }
        let mut check = ParamCheck {
            name: model.params().name(id).to_string(),
            checked: entries.len(),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for k in entries {
            let orig = model.params().get(id).data()[k];
            let mut at = |delta: f64| -> Result<f64> {
                model.params_mut().get_mut(id).data_mut()[k] = orig + delta;
                let l = model.loss(example, opts.loss).map(|b| b.loss_total);
                model.params_mut().get_mut(id).data_mut()[k] = orig;
                l
            };
            let h = opts.epsilon;
            let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            let analytic = grads.get(id).data()[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst = (k, analytic, numeric);
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.per_param.push(check);
    }
    Ok(report)
}
