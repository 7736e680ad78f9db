//! First-order Markov prior over tag sequences.
//!
//! Initial and transition distributions are row-wise softmaxes of free
//! logits. All recursions run in log space.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{log_softmax, log_sum_exp, softmax};
use crate::params::{view, view_mut, Group, TensorView, TensorViewMut, Tensors};

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovParams {
    pub init_logits: Array1<f64>,
    /// Row is the previous tag.
    pub trans_logits: Array2<f64>,
}

/// Forward-backward output.
#[derive(Debug, Clone)]
pub struct Posteriors {
    /// `l x K` token marginals.
    pub gamma: Array2<f64>,
    /// `(l-1) x K x K` pair marginals, `xi[i][j][k] = p(z_i = j, z_{i+1} = k | x)`.
    pub xi: Array3<f64>,
    pub log_z: f64,
}

impl MarkovParams {
    pub fn uniform(num_categories: usize) -> Self {
        MarkovParams {
            init_logits: Array1::zeros(num_categories),
            trans_logits: Array2::zeros((num_categories, num_categories)),
        }
    }

    /// Small random logits so restarts differ.
    pub fn init<R: Rng + ?Sized>(num_categories: usize, rng: &mut R) -> Self {
        let mut p = Self::uniform(num_categories);
        p.init_logits.mapv_inplace(|_| rng.random_range(-0.01..0.01));
        p.trans_logits.mapv_inplace(|_| rng.random_range(-0.01..0.01));
        p
    }

    pub fn num_categories(&self) -> usize {
        self.init_logits.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::uniform(self.num_categories())
    }

    pub fn log_init(&self) -> Vec<f64> {
        log_softmax(self.init_logits.as_slice().unwrap())
    }

    pub fn log_trans(&self) -> Array2<f64> {
        let k = self.num_categories();
        let mut out = Array2::zeros((k, k));
        for (j, row) in self.trans_logits.rows().into_iter().enumerate() {
            let lp = log_softmax(&row.to_vec());
            out.row_mut(j).assign(&Array1::from(lp));
        }
        out
    }

    fn check(&self, loglikes: ArrayView2<f64>) -> Result<()> {
        if loglikes.nrows() == 0 {
            return Err(Error::data("tag sequence must have at least one token"));
        }
        if loglikes.ncols() != self.num_categories() {
            return Err(Error::shape(format!(
                "emission scores have {} categories, prior has {}",
                loglikes.ncols(),
                self.num_categories()
            )));
        }
        Ok(())
    }

    fn forward_table(&self, loglikes: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (l, k_n) = loglikes.dim();
        let log_init = self.log_init();
        let log_trans = self.log_trans();
        let mut alpha = Array2::from_elem((l, k_n), f64::NEG_INFINITY);
        for k in 0..k_n {
            alpha[[0, k]] = log_init[k] + loglikes[[0, k]];
        }
        let mut buf = vec![0.0; k_n];
        for i in 1..l {
            for k in 0..k_n {
                for j in 0..k_n {
                    buf[j] = alpha[[i - 1, j]] + log_trans[[j, k]];
                }
                alpha[[i, k]] = log_sum_exp(&buf) + loglikes[[i, k]];
            }
        }
        (alpha, log_trans)
    }

    /// `log sum_z p(z) prod_i exp(loglikes[i][z_i])`.
    pub fn forward_logprob(&self, loglikes: ArrayView2<f64>) -> Result<f64> {
        self.check(loglikes)?;
        let (alpha, _) = self.forward_table(loglikes);
        let z = log_sum_exp(&alpha.row(alpha.nrows() - 1).to_vec());
        if !z.is_finite() {
            return Err(Error::numerical("Markov forward pass produced a non-finite value"));
        }
        Ok(z)
    }

    pub fn posteriors(&self, loglikes: ArrayView2<f64>) -> Result<Posteriors> {
        self.check(loglikes)?;
        let (l, k_n) = loglikes.dim();
        let (alpha, log_trans) = self.forward_table(loglikes);
        let log_z = log_sum_exp(&alpha.row(l - 1).to_vec());
        if !log_z.is_finite() {
            return Err(Error::numerical("Markov forward pass produced a non-finite value"));
        }
        let mut beta = Array2::zeros((l, k_n));
        let mut buf = vec![0.0; k_n];
        for i in (0..l - 1).rev() {
            for j in 0..k_n {
                for k in 0..k_n {
                    buf[k] = log_trans[[j, k]] + loglikes[[i + 1, k]] + beta[[i + 1, k]];
                }
                beta[[i, j]] = log_sum_exp(&buf);
            }
        }
        let gamma = (&alpha + &beta).mapv(|v| (v - log_z).exp());
        let mut xi = Array3::zeros((l.saturating_sub(1), k_n, k_n));
        for i in 0..l.saturating_sub(1) {
            for j in 0..k_n {
                for k in 0..k_n {
                    xi[[i, j, k]] = (alpha[[i, j]]
                        + log_trans[[j, k]]
                        + loglikes[[i + 1, k]]
                        + beta[[i + 1, k]]
                        - log_z)
                        .exp();
                }
            }
        }
        Ok(Posteriors { gamma, xi, log_z })
    }

    /// Adds `scale * d logZ / d logits` given forward-backward marginals.
    ///
    /// Expected counts minus the softmax-weighted totals for each visited row.
    pub fn accumulate_expected_grad(&self, post: &Posteriors, scale: f64, grads: &mut MarkovParams) {
        let k_n = self.num_categories();
        let p_init = softmax(self.init_logits.as_slice().unwrap());
        for k in 0..k_n {
            grads.init_logits[k] += scale * (post.gamma[[0, k]] - p_init[k]);
        }
        if post.xi.is_empty() {
            return;
        }
        let counts = post.xi.sum_axis(Axis(0));
        let p_trans = self.log_trans().mapv(f64::exp);
        for j in 0..k_n {
            let total: f64 = counts.row(j).sum();
            for k in 0..k_n {
                grads.trans_logits[[j, k]] += scale * (counts[[j, k]] - total * p_trans[[j, k]]);
            }
        }
    }

    /// Most probable tag sequence; ties go to the lower tag index.
    pub fn viterbi(&self, loglikes: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.check(loglikes)?;
        let (l, k_n) = loglikes.dim();
        let log_init = self.log_init();
        let log_trans = self.log_trans();
        let mut score = Array2::from_elem((l, k_n), f64::NEG_INFINITY);
        let mut back = Array2::<usize>::zeros((l, k_n));
        for k in 0..k_n {
            score[[0, k]] = log_init[k] + loglikes[[0, k]];
        }
        for i in 1..l {
            for k in 0..k_n {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for j in 0..k_n {
                    let s = score[[i - 1, j]] + log_trans[[j, k]];
                    if s > best {
                        best = s;
                        arg = j;
                    }
                }
                score[[i, k]] = best + loglikes[[i, k]];
                back[[i, k]] = arg;
            }
        }
        let mut last = 0;
        for k in 1..k_n {
            if score[[l - 1, k]] > score[[l - 1, last]] {
                last = k;
            }
        }
        if !score[[l - 1, last]].is_finite() {
            return Err(Error::numerical("Viterbi score is not finite"));
        }
        let mut tags = vec![0; l];
        tags[l - 1] = last;
        for i in (1..l).rev() {
            tags[i - 1] = back[[i, tags[i]]];
        }
        Ok(tags)
    }

    /// Log prior of an observed tag sequence under the chain (no emissions).
    pub fn sequence_logprob(&self, tags: &[usize]) -> Result<f64> {
        self.check_tags(tags)?;
        let log_init = self.log_init();
        let log_trans = self.log_trans();
        let mut lp = log_init[tags[0]];
        for w in tags.windows(2) {
            lp += log_trans[[w[0], w[1]]];
        }
        Ok(lp)
    }

    fn check_tags(&self, tags: &[usize]) -> Result<()> {
        if tags.is_empty() {
            return Err(Error::data("tag sequence must have at least one token"));
        }
        if let Some(t) = tags.iter().find(|&&t| t >= self.num_categories()) {
            return Err(Error::data(format!(
                "tag {t} out of range for {} categories",
                self.num_categories()
            )));
        }
        Ok(())
    }

    /// Adds `scale * d log p(tags) / d logits`.
    pub fn accumulate_observed_grad(&self, tags: &[usize], scale: f64, grads: &mut MarkovParams) {
        let p_init = softmax(self.init_logits.as_slice().unwrap());
        for (k, p) in p_init.iter().enumerate() {
            let observed = if k == tags[0] { 1.0 } else { 0.0 };
            grads.init_logits[k] += scale * (observed - p);
        }
        let p_trans = self.log_trans().mapv(f64::exp);
        for w in tags.windows(2) {
            let (j, k_obs) = (w[0], w[1]);
            for k in 0..self.num_categories() {
                let observed = if k == k_obs { 1.0 } else { 0.0 };
                grads.trans_logits[[j, k]] += scale * (observed - p_trans[[j, k]]);
            }
        }
    }

    /// Log prior of observed tags and its gradient with respect to the logits.
    pub fn supervised_logprob(&self, tags: &[usize]) -> Result<(f64, MarkovParams)> {
        let lp = self.sequence_logprob(tags)?;
        let mut grads = self.zeros_like();
        self.accumulate_observed_grad(tags, 1.0, &mut grads);
        Ok((lp, grads))
    }
}

impl Tensors for MarkovParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            view("prior.markov.init_logits", Group::Prior, &self.init_logits),
            view("prior.markov.trans_logits", Group::Prior, &self.trans_logits),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        vec![
            view_mut("prior.markov.init_logits", Group::Prior, &mut self.init_logits),
            view_mut("prior.markov.trans_logits", Group::Prior, &mut self.trans_logits),
        ]
    }
}
