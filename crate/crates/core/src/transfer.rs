//! Source pretraining and regularized target fine-tuning.
//!
//! The source model is trained once on annotated data. Each target model
//! starts from the source parameters and is trained on unannotated target
//! sentences with an L2 penalty pulling prior, emission and flow parameters
//! back towards the frozen source values.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::ObservedSequence;
use crate::error::{Error, Result};
use crate::eval::{tag_tally, uas_tally, Tally};
use crate::flow::FlowKind;
use crate::model::{ModelParams, ModelSpec, Objective, Task};
use crate::optim::Adam;
use crate::params::{Group, Tensors};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub task: Task,
    /// Penalty weight for prior parameters.
    pub beta1: f64,
    /// Penalty weight for emission parameters.
    pub beta2: f64,
    /// Penalty weight for flow parameters.
    pub beta3: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fine-tuning skips longer sentences; evaluation never does.
    pub max_finetune_length: Option<usize>,
    pub restarts: usize,
    pub seed: u64,
    pub num_categories: usize,
    pub flow: FlowKind,
    pub coupling_layers: usize,
    /// Width of the tag embeddings concatenated to word vectors when parsing.
    pub tag_dim: usize,
    /// Keep the best epoch by dev metric during source training.
    #[serde(default = "default_true")]
    pub select_best_epoch: bool,
}

impl TransferConfig {
    pub fn source_defaults(task: Task) -> Self {
        let base = TransferConfig {
            task,
            beta1: 0.0,
            beta2: 500.0,
            beta3: 80.0,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            max_finetune_length: None,
            restarts: 5,
            seed: 0,
            num_categories: crate::corpus::NUM_UPOS,
            flow: FlowKind::Nice,
            coupling_layers: 8,
            tag_dim: 0,
            select_best_epoch: true,
        };
        match task {
            Task::Tag => base,
            Task::Parse => TransferConfig {
                beta1: 0.1,
                beta2: 0.1,
                beta3: 0.1,
                batch_size: 16,
                max_finetune_length: Some(39),
                tag_dim: 50,
                ..base
            },
        }
    }

    /// 10 fine-tuning epochs for tagging, 5 for parsing.
    pub fn finetune_defaults(task: Task) -> Self {
        let base = Self::source_defaults(task);
        match task {
            Task::Tag => base,
            Task::Parse => TransferConfig { epochs: 5, ..base },
        }
    }

    /// Stronger anchoring used for parsing into languages close to the source.
    pub fn with_nearby_parse_betas(self) -> Self {
        TransferConfig {
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn betas(&self) -> [f64; 3] {
        [self.beta1, self.beta2, self.beta3]
    }

    pub fn model_spec(&self, word_dim: usize) -> ModelSpec {
        ModelSpec {
            task: self.task,
            num_categories: self.num_categories,
            word_dim,
            tag_dim: if self.task == Task::Parse { self.tag_dim } else { 0 },
            flow: self.flow,
            coupling_layers: self.coupling_layers,
        }
    }
}

fn beta_for(group: Group, betas: [f64; 3]) -> Option<f64> {
    match group {
        Group::Prior => Some(betas[0]),
        Group::Emission => Some(betas[1]),
        Group::Flow => Some(betas[2]),
        Group::TagEmbedding => None,
    }
}

/// Adds the gradient of the anchor penalty into `grads` and returns its value:
/// `sum_g beta_g / 2 * ||q_g - p_g||^2` over prior, emission and flow groups.
/// Tag embeddings are not penalized.
pub fn l2_penalty_into(
    params: &ModelParams,
    anchor: &ModelParams,
    betas: [f64; 3],
    grads: &mut ModelParams,
) -> Result<f64> {
    let q = params.tensors();
    let p = anchor.tensors();
    if q.len() != p.len() {
        return Err(Error::shape("model and anchor have different tensor layouts"));
    }
    let mut value = 0.0;
    for ((qt, pt), gt) in q.iter().zip(&p).zip(grads.tensors_mut()) {
        if qt.name != pt.name || qt.shape != pt.shape || gt.shape != qt.shape {
            return Err(Error::shape(format!(
                "tensor {} {:?} does not match anchor {} {:?}",
                qt.name, qt.shape, pt.name, pt.shape
            )));
        }
        let Some(beta) = beta_for(qt.group, betas) else {
            continue;
        };
        if beta == 0.0 {
            continue;
        }
        for ((a, b), g) in qt.data.iter().zip(pt.data).zip(gt.data.iter_mut()) {
            let diff = a - b;
            value += 0.5 * beta * diff * diff;
            *g += beta * diff;
        }
    }
    Ok(value)
}

pub fn l2_penalty(
    params: &ModelParams,
    anchor: &ModelParams,
    betas: [f64; 3],
) -> Result<(f64, ModelParams)> {
    let mut grads = params.zeros_like();
    let v = l2_penalty_into(params, anchor, betas, &mut grads)?;
    Ok((v, grads))
}

/// Euclidean distance between two models over the penalized groups.
pub fn anchor_distance(params: &ModelParams, anchor: &ModelParams) -> f64 {
    params
        .tensors()
        .iter()
        .zip(anchor.tensors())
        .filter(|(t, _)| t.group != Group::TagEmbedding)
        .flat_map(|(q, p)| q.data.iter().zip(p.data).map(|(a, b)| (a - b) * (a - b)))
        .sum::<f64>()
        .sqrt()
}

fn supervised_objective<'a>(task: Task, obs: &'a ObservedSequence) -> Result<Objective<'a>> {
    match task {
        Task::Tag => Ok(Objective::SupervisedTag(&obs.upos)),
        Task::Parse => obs
            .gold_heads
            .as_deref()
            .map(Objective::SupervisedParse)
            .ok_or_else(|| Error::data("parsing requires gold heads in the source corpus")),
    }
}

fn unsupervised_objective(task: Task) -> Objective<'static> {
    match task {
        Task::Tag => Objective::UnsupervisedTag,
        Task::Parse => Objective::UnsupervisedParse,
    }
}

/// Tagging accuracy or UAS of `params` on `data`.
pub fn dev_metric(params: &ModelParams, data: &[ObservedSequence]) -> Result<f64> {
    let mut tally = Tally::default();
    for obs in data {
        match params.task() {
            Task::Tag => tally.merge(tag_tally(&params.decode_tags(obs)?, &obs.upos)?),
            Task::Parse => {
                let gold = obs
                    .gold_heads
                    .as_ref()
                    .ok_or_else(|| Error::data("dev sentence has no gold heads"))?;
                let pred = params.decode_parse(obs)?;
                tally.merge(uas_tally(pred.heads(), gold, &obs.upos)?);
            }
        }
    }
    Ok(tally.ratio())
}

/// Mean per-sentence unsupervised negative log-likelihood.
pub fn mean_unsupervised_nll(params: &ModelParams, data: &[ObservedSequence]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("no sentences to score"));
    }
    let objective = unsupervised_objective(params.task());
    let mut total = 0.0;
    for obs in data {
        total += params.loss(obs, objective, None)?;
    }
    Ok(total / data.len() as f64)
}

/// Summed loss gradients over one minibatch, accumulated in index order.
fn batch_gradient(
    params: &ModelParams,
    data: &[ObservedSequence],
    batch: &[usize],
    supervised: bool,
    grads: &mut ModelParams,
) -> Result<f64> {
    grads.fill_zero();
    let mut total = 0.0;
    for &idx in batch {
        let obs = &data[idx];
        let objective = if supervised {
            supervised_objective(params.task(), obs)?
        } else {
            unsupervised_objective(params.task())
        };
        total += params.loss(obs, objective, Some(grads))?;
    }
    Ok(total)
}

fn check_dims(spec: &ModelSpec, data: &[ObservedSequence]) -> Result<()> {
    if let Some(bad) = data.iter().find(|o| o.word_dim != spec.word_dim) {
        return Err(Error::shape(format!(
            "observations have word dimension {}, model expects {}",
            bad.word_dim, spec.word_dim
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartResult {
    pub seed: u64,
    pub dev_metric: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub restarts: Vec<RestartResult>,
}

/// Supervised source training with random restarts.
///
/// Restart `r` uses seed `config.seed + r`. Each restart trains for
/// `config.epochs` epochs; the restart with the best dev metric wins, ties
/// going to the lowest seed. An empty `dev` set scores on `train`.
pub fn pretrain_source(
    train: &[ObservedSequence],
    dev: &[ObservedSequence],
    config: &TransferConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::data("source corpus is empty"))?;
    let spec = config.model_spec(first.word_dim);
    spec.validate()?;
    check_dims(&spec, train)?;
    check_dims(&spec, dev)?;
    let dev = if dev.is_empty() { train } else { dev };

    let mut best: Option<(f64, ModelParams, Adam, u64)> = None;
    let mut restarts = Vec::with_capacity(config.restarts);
    for r in 0..config.restarts {
        let seed = config.seed.wrapping_add(r as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&spec, &mut rng)?;
        let mut adam = Adam::new(&params);
        let mut grads = params.zeros_like();
        let mut order: Vec<usize> = (0..train.len()).collect();

        let mut restart_best = (dev_metric(&params, dev)?, params.clone(), adam.clone());
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                batch_gradient(&params, train, batch, true, &mut grads)?;
                adam.step(&mut params, &grads, config.learning_rate);
                params.flow.check_invertible()?;
            }
            if config.select_best_epoch {
                let metric = dev_metric(&params, dev)?;
                if metric > restart_best.0 {
                    restart_best = (metric, params.clone(), adam.clone());
                }
            }
        }
        if !config.select_best_epoch {
            restart_best = (dev_metric(&params, dev)?, params, adam);
        }
        let (metric, params, adam) = restart_best;
        restarts.push(RestartResult {
            seed,
            dev_metric: metric,
        });
        if best.as_ref().is_none_or(|(m, ..)| metric > *m) {
            best = Some((metric, params, adam, seed));
        }
    }
    let (metric, params, adam, seed) = best.expect("at least one restart");
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            spec,
            config: config.clone(),
            seed,
            dev_metric: Some(metric),
            params,
            optimizer: Some(adam),
        },
        restarts,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    /// Mean unsupervised NLL over the fine-tuning set before training and
    /// after each epoch.
    pub nll_trace: Vec<f64>,
    /// Sentences skipped for exceeding `max_finetune_length`.
    pub excluded: usize,
}

/// Unsupervised training from `init`, optionally anchored to `anchor`.
///
/// Tag embeddings stay frozen. With no anchor this is plain unsupervised
/// training of the structured flow model.
pub fn train_unsupervised(
    init: &ModelParams,
    anchor: Option<&ModelParams>,
    target: &[ObservedSequence],
    config: &TransferConfig,
) -> Result<(ModelParams, Vec<f64>, usize)> {
    config.validate()?;
    let kept: Vec<ObservedSequence> = target
        .iter()
        .filter(|o| config.max_finetune_length.is_none_or(|max| o.len() <= max))
        .cloned()
        .collect();
    let excluded = target.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::data("no target sentences left for fine-tuning"));
    }
    let mut params = init.clone();
    let mut adam = Adam::new(&params);
    let mut grads = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..kept.len()).collect();
    let mut trace = vec![mean_unsupervised_nll(&params, &kept)?];
    let trainable = |g: Group| g != Group::TagEmbedding;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            batch_gradient(&params, &kept, batch, false, &mut grads)?;
            if let Some(anchor) = anchor {
                l2_penalty_into(&params, anchor, config.betas(), &mut grads)?;
            }
            adam.update(&mut params, &grads, config.learning_rate, trainable);
            params.flow.check_invertible()?;
        }
        trace.push(mean_unsupervised_nll(&params, &kept)?);
    }
    Ok((params, trace, excluded))
}

/// Fine-tunes a copy of the source model on target sentences with the
/// anchor penalty towards the unchanged source parameters.
pub fn finetune_target(
    source: &Checkpoint,
    target: &[ObservedSequence],
    config: &TransferConfig,
) -> Result<FinetuneOutcome> {
    if config.task != source.spec.task {
        return Err(Error::Config(format!(
            "source checkpoint is for task {}, config asks for {}",
            source.spec.task, config.task
        )));
    }
    check_dims(&source.spec, target)?;
    let (params, nll_trace, excluded) =
        train_unsupervised(&source.params, Some(&source.params), target, config)?;
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            spec: source.spec.clone(),
            config: config.clone(),
            seed: config.seed,
            dev_metric: None,
            params,
            optimizer: None,
        },
        nll_trace,
        excluded,
    })
}
