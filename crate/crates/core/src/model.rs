//! Structured flow model: prior + Gaussian emissions + invertible projection.
//!
//! Each loss is a single value-and-gradient pass:
//! flow inverse, emission log-likelihoods, the prior's dynamic program,
//! then the reverse pass through emissions and flow. Values are negative
//! log-likelihoods; gradients are of that value.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::ObservedSequence;
use crate::dmv::{DepTree, DmvParams};
use crate::emission::EmissionParams;
use crate::error::{Error, Result};
use crate::flow::{FlowKind, FlowParams};
use crate::markov::MarkovParams;
use crate::params::{view, view_mut, Group, TensorView, TensorViewMut, Tensors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Tag,
    Parse,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Tag => "tag",
            Task::Parse => "parse",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tag" => Ok(Task::Tag),
            "parse" => Ok(Task::Parse),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Shape of a model: everything needed to allocate its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub num_categories: usize,
    pub word_dim: usize,
    /// Tag-embedding width; must be 0 for tagging.
    pub tag_dim: usize,
    pub flow: FlowKind,
    pub coupling_layers: usize,
}

impl ModelSpec {
    pub fn dim(&self) -> usize {
        self.word_dim + self.tag_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 {
            return Err(Error::Config("need at least one category".into()));
        }
        if self.word_dim == 0 {
            return Err(Error::Config("word dimension must be positive".into()));
        }
        if self.task == Task::Tag && self.tag_dim != 0 {
            return Err(Error::Config("tag embeddings are only used for parsing".into()));
        }
        if self.flow == FlowKind::Nice && self.dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "observation dimension {} is odd; pick a tag dimension that makes it even",
                self.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Markov(MarkovParams),
    Dmv(DmvParams),
}

impl Prior {
    pub fn num_categories(&self) -> usize {
        match self {
            Prior::Markov(p) => p.num_categories(),
            Prior::Dmv(p) => p.num_categories(),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Prior::Markov(p) => Prior::Markov(p.zeros_like()),
            Prior::Dmv(p) => Prior::Dmv(p.zeros_like()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub prior: Prior,
    pub emission: EmissionParams,
    pub flow: FlowParams,
    /// `K x tag_dim`, parsing only.
    pub tag_embeddings: Option<Array2<f64>>,
}

/// Which of the four objectives to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective<'a> {
    /// Marginal over tag sequences (Markov prior).
    UnsupervisedTag,
    /// Joint with the given tag sequence (Markov prior).
    SupervisedTag(&'a [usize]),
    /// Marginal over projective trees, tags clamped to the observed UPOS.
    UnsupervisedParse,
    /// Joint with the given heads (DMV prior).
    SupervisedParse(&'a [usize]),
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let k = spec.num_categories;
        let prior = match spec.task {
            Task::Tag => Prior::Markov(MarkovParams::init(k, rng)),
            Task::Parse => Prior::Dmv(DmvParams::init(k, rng)),
        };
        let tag_embeddings = (spec.task == Task::Parse && spec.tag_dim > 0).then(|| {
            let normal = Normal::new(0.0, 0.1).unwrap();
            Array2::from_shape_fn((k, spec.tag_dim), |_| normal.sample(rng))
        });
        let flow = FlowParams::init(spec.flow, spec.dim(), spec.coupling_layers, rng)?;
        let emission = EmissionParams::init(k, spec.dim(), rng);
        Ok(ModelParams {
            prior,
            emission,
            flow,
            tag_embeddings,
        })
    }

    pub fn task(&self) -> Task {
        match self.prior {
            Prior::Markov(_) => Task::Tag,
            Prior::Dmv(_) => Task::Parse,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.prior.num_categories()
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn tag_dim(&self) -> usize {
        self.tag_embeddings.as_ref().map_or(0, |t| t.ncols())
    }

    /// Checks that prior, emission, flow and tag embeddings agree.
    pub fn validate(&self) -> Result<()> {
        let k = self.num_categories();
        if self.emission.num_categories() != k {
            return Err(Error::shape(format!(
                "emission has {} categories, prior has {k}",
                self.emission.num_categories()
            )));
        }
        if self.emission.dim() != self.flow.dim() {
            return Err(Error::shape(format!(
                "emission dimension {} differs from flow dimension {}",
                self.emission.dim(),
                self.flow.dim()
            )));
        }
        if let Some(t) = &self.tag_embeddings {
            if t.nrows() != k || t.ncols() >= self.dim() {
                return Err(Error::shape("tag embedding table does not fit the model"));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            prior: self.prior.zeros_like(),
            emission: self.emission.zeros_like(),
            flow: self.flow.zeros_like(),
            tag_embeddings: self.tag_embeddings.as_ref().map(|t| Array2::zeros(t.raw_dim())),
        }
    }

    /// Observation rows as the flow sees them: word part from `obs`, tag part
    /// from the current tag embeddings.
    pub fn assemble_inputs(&self, obs: &ObservedSequence) -> Result<Array2<f64>> {
        if obs.is_empty() {
            return Err(Error::data("empty observation sequence"));
        }
        let dim = self.dim();
        match &self.tag_embeddings {
            None => {
                if obs.dim() != dim {
                    return Err(Error::shape(format!(
                        "observations have dimension {}, model expects {dim}",
                        obs.dim()
                    )));
                }
                Ok(obs.x.clone())
            }
            Some(tags) => {
                let word_dim = dim - tags.ncols();
                if obs.word_dim != word_dim || obs.dim() < word_dim {
                    return Err(Error::shape(format!(
                        "word vectors have dimension {}, model expects {word_dim}",
                        obs.word_dim
                    )));
                }
                let mut x = Array2::zeros((obs.len(), dim));
                x.slice_mut(s![.., ..word_dim])
                    .assign(&obs.x.slice(s![.., ..word_dim]));
                for (i, &t) in obs.upos.iter().enumerate() {
                    if t >= tags.nrows() {
                        return Err(Error::data(format!("tag id {t} has no tag embedding")));
                    }
                    x.slice_mut(s![i, word_dim..]).assign(&tags.row(t));
                }
                Ok(x)
            }
        }
    }

    /// Latent embeddings `e = f^{-1}(x)`.
    pub fn latents(&self, obs: &ObservedSequence) -> Result<Array2<f64>> {
        let x = self.assemble_inputs(obs)?;
        Ok(self.flow.inverse(x.view())?.e)
    }

    fn markov(&self) -> Result<&MarkovParams> {
        match &self.prior {
            Prior::Markov(p) => Ok(p),
            Prior::Dmv(_) => Err(Error::Config("tagging objective needs a Markov prior".into())),
        }
    }

    fn dmv(&self) -> Result<&DmvParams> {
        match &self.prior {
            Prior::Dmv(p) => Ok(p),
            Prior::Markov(_) => Err(Error::Config("parsing objective needs a DMV prior".into())),
        }
    }

    /// Negative log-likelihood of one sentence. When `grads` is given, the
    /// gradient of that value is added into it.
    pub fn loss(
        &self,
        obs: &ObservedSequence,
        objective: Objective<'_>,
        grads: Option<&mut ModelParams>,
    ) -> Result<f64> {
        let x = self.assemble_inputs(obs)?;
        let l = x.nrows();
        let flow_out = self.flow.inverse(x.view())?;
        let e = flow_out.e;
        let loglikes = self.emission.loglikes(e.view())?;
        let k_n = loglikes.ncols();

        let one_hot = |tags: &[usize]| -> Result<Array2<f64>> {
            if tags.len() != l {
                return Err(Error::shape(format!("{} labels for {l} tokens", tags.len())));
            }
            let mut w = Array2::zeros((l, k_n));
            for (i, &t) in tags.iter().enumerate() {
                if t >= k_n {
                    return Err(Error::data(format!("tag {t} out of range for {k_n} categories")));
                }
                w[[i, t]] = 1.0;
            }
            Ok(w)
        };
        let gold_emission = |tags: &[usize]| -> f64 {
            tags.iter().enumerate().map(|(i, &t)| loglikes[[i, t]]).sum()
        };

        let mut prior_grad = grads.is_some().then(|| self.prior.zeros_like());
        let (structured, weights) = match objective {
            Objective::UnsupervisedTag => {
                let markov = self.markov()?;
                let post = markov.posteriors(loglikes.view())?;
                if let Some(Prior::Markov(g)) = prior_grad.as_mut() {
                    markov.accumulate_expected_grad(&post, -1.0, g);
                }
                (post.log_z, post.gamma)
            }
            Objective::SupervisedTag(tags) => {
                let markov = self.markov()?;
                let w = one_hot(tags)?;
                let prior = markov.sequence_logprob(tags)?;
                if let Some(Prior::Markov(g)) = prior_grad.as_mut() {
                    markov.accumulate_observed_grad(tags, -1.0, g);
                }
                (prior + gold_emission(tags), w)
            }
            Objective::UnsupervisedParse => {
                let dmv = self.dmv()?;
                let w = one_hot(&obs.upos)?;
                let (log_z, counts) = dmv.expected_counts(&obs.upos)?;
                if let Some(Prior::Dmv(g)) = prior_grad.as_mut() {
                    dmv.accumulate_count_grad(&counts, -1.0, g);
                }
                (log_z + gold_emission(&obs.upos), w)
            }
            Objective::SupervisedParse(heads) => {
                let dmv = self.dmv()?;
                let w = one_hot(&obs.upos)?;
                let counts = dmv.tree_counts(&obs.upos, heads)?;
                let (prior, _) = dmv.tree_logprob(&obs.upos, heads)?;
                if let Some(Prior::Dmv(g)) = prior_grad.as_mut() {
                    dmv.accumulate_count_grad(&counts, -1.0, g);
                }
                (prior + gold_emission(&obs.upos), w)
            }
        };
        let value = -(structured + l as f64 * flow_out.logdet_per_token);
        if !value.is_finite() {
            return Err(Error::numerical("sentence negative log-likelihood is not finite"));
        }

        if let Some(grads) = grads {
            match (&mut grads.prior, prior_grad.unwrap()) {
                (Prior::Markov(g), Prior::Markov(p)) => {
                    g.init_logits += &p.init_logits;
                    g.trans_logits += &p.trans_logits;
                }
                (Prior::Dmv(g), Prior::Dmv(p)) => {
                    g.root_logits += &p.root_logits;
                    g.child_logits += &p.child_logits;
                    g.stop_logits += &p.stop_logits;
                }
                _ => return Err(Error::shape("gradient buffer has the wrong prior type")),
            }
            let neg_weights = weights.mapv(|w| -w);
            let grad_e =
                self.emission
                    .backward_into(e.view(), neg_weights.view(), &mut grads.emission)?;
            let grad_x = self.flow.backward_into(
                &flow_out.cache,
                grad_e.view(),
                -(l as f64),
                &mut grads.flow,
            )?;
            if let (Some(_), Some(gt)) = (&self.tag_embeddings, grads.tag_embeddings.as_mut()) {
                let word_dim = self.dim() - gt.ncols();
                for (i, &t) in obs.upos.iter().enumerate() {
                    let mut row = gt.row_mut(t);
                    row += &grad_x.slice(s![i, word_dim..]);
                }
            }
        }
        Ok(value)
    }

    fn loss_with_grads(&self, obs: &ObservedSequence, objective: Objective<'_>) -> Result<(f64, ModelParams)> {
        let mut grads = self.zeros_like();
        let v = self.loss(obs, objective, Some(&mut grads))?;
        Ok((v, grads))
    }

    pub fn unsupervised_tag_loss(&self, obs: &ObservedSequence) -> Result<(f64, ModelParams)> {
        self.loss_with_grads(obs, Objective::UnsupervisedTag)
    }

    pub fn supervised_tag_loss(&self, obs: &ObservedSequence, tags: &[usize]) -> Result<(f64, ModelParams)> {
        self.loss_with_grads(obs, Objective::SupervisedTag(tags))
    }

    pub fn unsupervised_parse_loss(&self, obs: &ObservedSequence) -> Result<(f64, ModelParams)> {
        self.loss_with_grads(obs, Objective::UnsupervisedParse)
    }

    pub fn supervised_parse_loss(
        &self,
        obs: &ObservedSequence,
        heads: &[usize],
    ) -> Result<(f64, ModelParams)> {
        self.loss_with_grads(obs, Objective::SupervisedParse(heads))
    }

    /// Emission log-likelihoods at the latent embeddings, `l x K`.
    pub fn emission_loglikes(&self, obs: &ObservedSequence) -> Result<Array2<f64>> {
        let e = self.latents(obs)?;
        self.emission.loglikes(e.view())
    }

    pub fn decode_tags(&self, obs: &ObservedSequence) -> Result<Vec<usize>> {
        let ll = self.emission_loglikes(obs)?;
        self.markov()?.viterbi(ll.view())
    }

    /// The tree decode depends only on the DMV parameters, since categories
    /// are clamped to the observed tags.
    pub fn decode_parse(&self, obs: &ObservedSequence) -> Result<DepTree> {
        if obs.is_empty() {
            return Err(Error::data("empty observation sequence"));
        }
        self.dmv()?.viterbi_parse(&obs.upos)
    }
}

/// Structured Gaussian marginal at fixed latents, without the flow term.
pub fn markov_gaussian_logprob(
    prior: &MarkovParams,
    emission: &EmissionParams,
    e: ArrayView2<f64>,
) -> Result<f64> {
    let ll = emission.loglikes(e)?;
    prior.forward_logprob(ll.view())
}

impl Tensors for ModelParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = match &self.prior {
            Prior::Markov(p) => p.tensors(),
            Prior::Dmv(p) => p.tensors(),
        };
        out.extend(self.emission.tensors());
        out.extend(self.flow.tensors());
        if let Some(t) = &self.tag_embeddings {
            out.push(view("tag_embeddings", Group::TagEmbedding, t));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = match &mut self.prior {
            Prior::Markov(p) => p.tensors_mut(),
            Prior::Dmv(p) => p.tensors_mut(),
        };
        out.extend(self.emission.tensors_mut());
        out.extend(self.flow.tensors_mut());
        if let Some(t) = &mut self.tag_embeddings {
            out.push(view_mut("tag_embeddings", Group::TagEmbedding, t));
        }
        out
    }
}
