//! Independent oracles and fixtures shared by the integration tests.
//!
//! Nothing here calls the dynamic programs under test: probabilities are
//! recomputed from raw logits with plain loops.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use structflow::corpus::ObservedSequence;
use structflow::dmv::DmvParams;
use structflow::emission::EmissionParams;
use structflow::flow::FlowParams;
use structflow::markov::MarkovParams;
use structflow::Tensors;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randomize<T: Tensors>(params: &mut T, rng: &mut impl Rng, scale: f64) {
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Naive normalisation, deliberately not shared with the library.
pub fn probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / z).collect()
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------- HMM oracle

pub fn all_sequences(k: usize, l: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..l {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..k).map(move |t| {
                    let mut s = s.clone();
                    s.push(t);
                    s
                })
            })
            .collect();
    }
    out
}

/// `log p(z) + sum_i loglikes[i][z_i]` for one tag sequence.
pub fn hmm_joint(params: &MarkovParams, loglikes: &Array2<f64>, tags: &[usize]) -> f64 {
    let init = probs(params.init_logits.as_slice().unwrap());
    let mut score = init[tags[0]].ln() + loglikes[[0, tags[0]]];
    for i in 1..tags.len() {
        let row = params.trans_logits.row(tags[i - 1]).to_vec();
        score += probs(&row)[tags[i]].ln() + loglikes[[i, tags[i]]];
    }
    score
}

pub struct HmmBrute {
    pub log_z: f64,
    pub gamma: Array2<f64>,
    pub best: Vec<usize>,
    pub best_score: f64,
    /// Gap between the best and second-best sequence scores.
    pub margin: f64,
}

pub fn hmm_brute(params: &MarkovParams, loglikes: &Array2<f64>) -> HmmBrute {
    let (l, k) = loglikes.dim();
    let seqs = all_sequences(k, l);
    let scores: Vec<f64> = seqs.iter().map(|s| hmm_joint(params, loglikes, s)).collect();
    let log_z = logsumexp(&scores);
    let mut gamma = Array2::zeros((l, k));
    for (s, &sc) in seqs.iter().zip(&scores) {
        let p = (sc - log_z).exp();
        for (i, &t) in s.iter().enumerate() {
            gamma[[i, t]] += p;
        }
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let margin = if order.len() > 1 {
        scores[order[0]] - scores[order[1]]
    } else {
        f64::INFINITY
    };
    HmmBrute {
        log_z,
        gamma,
        best: seqs[order[0]].clone(),
        best_score: scores[order[0]],
        margin,
    }
}

// ---------------------------------------------------------------- DMV oracle

fn crosses(a: (usize, usize), b: (usize, usize)) -> bool {
    let (a0, a1) = (a.0.min(a.1), a.0.max(a.1));
    let (b0, b1) = (b.0.min(b.1), b.0.max(b.1));
    (a0 < b0 && b0 < a1 && a1 < b1) || (b0 < a0 && a0 < b1 && b1 < a1)
}

/// Arcs drawn above the sentence with the root at position 0 do not cross.
pub fn projective(heads: &[usize]) -> bool {
    let arcs: Vec<(usize, usize)> = heads.iter().enumerate().map(|(i, &h)| (h, i + 1)).collect();
    for (x, &a) in arcs.iter().enumerate() {
        for &b in &arcs[x + 1..] {
            if crosses(a, b) {
                return false;
            }
        }
    }
    true
}

pub fn is_tree(heads: &[usize]) -> bool {
    let l = heads.len();
    if heads.iter().filter(|&&h| h == 0).count() != 1 {
        return false;
    }
    for (i, &h) in heads.iter().enumerate() {
        if h > l || h == i + 1 {
            return false;
        }
    }
    // every token reaches the root within l steps
    (1..=l).all(|start| {
        let mut node = start;
        for _ in 0..=l {
            if node == 0 {
                return true;
            }
            node = heads[node - 1];
        }
        false
    })
}

pub fn all_trees(l: usize) -> Vec<Vec<usize>> {
    all_sequences(l + 1, l)
        .into_iter()
        .filter(|h| is_tree(h))
        .collect()
}

pub fn projective_trees(l: usize) -> Vec<Vec<usize>> {
    all_trees(l).into_iter().filter(|h| projective(h)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-probability of the DMV generative story for one tree.
///
/// Each head emits its left dependents nearest-first, then its right
/// dependents nearest-first; before each attempt it flips a stop coin whose
/// probability is `sigmoid(stop_logit[head, dir, adjacency])`, where
/// adjacency is 1 once a dependent has been generated in that direction.
pub fn dmv_tree_score(params: &DmvParams, tags: &[usize], heads: &[usize]) -> f64 {
    let l = tags.len();
    let root = heads.iter().position(|&h| h == 0).unwrap();
    let mut score = probs(params.root_logits.as_slice().unwrap())[tags[root]].ln();
    for h in 1..=l {
        let t = tags[h - 1];
        let mut left: Vec<usize> = (1..h).filter(|&c| heads[c - 1] == h).collect();
        left.reverse();
        let right: Vec<usize> = (h + 1..=l).filter(|&c| heads[c - 1] == h).collect();
        for (dir, deps) in [(0usize, left), (1usize, right)] {
            let child_row: Vec<f64> = (0..params.root_logits.len())
                .map(|c| params.child_logits[[t, dir, c]])
                .collect();
            let child_p = probs(&child_row);
            for (n, &c) in deps.iter().enumerate() {
                let adj = usize::from(n > 0);
                score += (1.0 - sigmoid(params.stop_logits[[t, dir, adj]])).ln();
                score += child_p[tags[c - 1]].ln();
            }
            let adj = usize::from(!deps.is_empty());
            score += sigmoid(params.stop_logits[[t, dir, adj]]).ln();
        }
    }
    score
}

/// Random (not necessarily projective) tree: nodes join in random order,
/// each attaching to an already placed node.
pub fn random_tree(rng: &mut impl Rng, l: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (1..=l).collect();
    for i in (1..l).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut heads = vec![0; l];
    for (pos, &node) in order.iter().enumerate() {
        heads[node - 1] = if pos == 0 {
            0
        } else {
            order[rng.random_range(0..pos)]
        };
    }
    heads
}

// ---------------------------------------------------- finite differences

pub struct FdReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central differences of `f` against `analytic`, coordinate by coordinate.
///
/// The relative error uses a denominator floor of 1e-5 so entries whose
/// true gradient is zero are compared on an absolute scale instead of
/// amplifying rounding noise.
pub fn fd_check<T: Tensors + Clone>(
    params: &T,
    analytic: &T,
    step: f64,
    f: impl Fn(&T) -> f64,
) -> FdReport {
    let mut report = FdReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.to_vec()).collect();
    let names: Vec<String> = params.tensors().iter().map(|t| t.name.clone()).collect();
    let mut probe = params.clone();
    for (ti, name) in names.iter().enumerate() {
        for j in 0..grads[ti].len() {
            let original = params.tensors()[ti].data[j];
            probe.tensors_mut()[ti].data[j] = original + step;
            let up = f(&probe);
            probe.tensors_mut()[ti].data[j] = original - step;
            let down = f(&probe);
            probe.tensors_mut()[ti].data[j] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = grads[ti][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            report.checked += 1;
            if err > report.max_rel {
                report.max_rel = err;
                report.worst = format!("{name}[{j}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    report
}

// ------------------------------------------------------- synthetic data

/// A known HMM + Gaussian + flow generator.
pub struct Generator {
    pub prior: MarkovParams,
    pub emission: EmissionParams,
    pub flow: FlowParams,
}

pub struct Sample {
    pub tags: Vec<usize>,
    pub latents: Array2<f64>,
}

fn logits_of(p: &[f64]) -> Array1<f64> {
    Array1::from_iter(p.iter().map(|v| v.ln()))
}

impl Generator {
    /// K = 3, D = 4: a cyclic chain, means on scaled axes, std 0.5 and a
    /// mild two-layer coupling flow.
    pub fn standard(seed: u64) -> Generator {
        let mut r = rng(seed);
        let k = 3;
        let d = 4;
        let trans = [[0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.8, 0.1, 0.1]];
        let prior = MarkovParams {
            init_logits: logits_of(&[0.5, 0.3, 0.2]),
            trans_logits: Array2::from_shape_fn((k, k), |(i, j)| f64::ln(trans[i][j])),
        };
        let mut means = Array2::zeros((k, d));
        means[[0, 0]] = 2.0;
        means[[1, 1]] = 2.0;
        means[[2, 2]] = 2.0;
        means[[2, 3]] = -1.0;
        let emission = EmissionParams {
            means,
            log_vars: Array2::from_elem((k, d), (0.25f64 - 1e-4).ln()),
        };
        let mut flow = FlowParams::nice(d, 2, &mut r).unwrap();
        if let FlowParams::Nice { layers, .. } = &mut flow {
            for layer in layers {
                layer.w2 = random_matrix(&mut r, layer.w2.nrows(), layer.w2.ncols(), 0.3);
            }
        }
        Generator {
            prior,
            emission,
            flow,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng, min_len: usize, max_len: usize) -> Sample {
        let l = rng.random_range(min_len..=max_len);
        let draw = |rng: &mut dyn rand::RngCore, logits: Vec<f64>| -> usize {
            let p = probs(&logits);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        };
        let mut tags = Vec::with_capacity(l);
        tags.push(draw(rng, self.prior.init_logits.to_vec()));
        for i in 1..l {
            tags.push(draw(rng, self.prior.trans_logits.row(tags[i - 1]).to_vec()));
        }
        let d = self.emission.dim();
        let mut latents = Array2::zeros((l, d));
        for (i, &t) in tags.iter().enumerate() {
            for j in 0..d {
                let sd = self.emission.variance(t, j).sqrt();
                latents[[i, j]] = Normal::new(self.emission.means[[t, j]], sd).unwrap().sample(rng);
            }
        }
        Sample { tags, latents }
    }

    /// Observations `x = f(e)` under the generating flow, then `map`.
    pub fn observe(&self, sample: &Sample, map: Option<&Array2<f64>>) -> ObservedSequence {
        let mut x = self.flow.forward(sample.latents.view()).unwrap();
        if let Some(q) = map {
            x = x.dot(&q.t());
        }
        let d = x.ncols();
        ObservedSequence {
            x,
            word_dim: d,
            upos: sample.tags.clone(),
            gold_heads: None,
        }
    }

    pub fn corpus(
        &self,
        rng: &mut impl Rng,
        n: usize,
        map: Option<&Array2<f64>>,
    ) -> Vec<ObservedSequence> {
        (0..n)
            .map(|_| {
                let s = self.sample(rng, 5, 15);
                self.observe(&s, map)
            })
            .collect()
    }
}

/// Orthogonal matrix `(I - A)^{-1} (I + A)` from a random skew-symmetric `A`.
pub fn random_rotation(rng: &mut impl Rng, d: usize, scale: f64) -> Array2<f64> {
    let mut a = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in i + 1..d {
            let v = rng.random_range(-scale..scale);
            a[[i, j]] = v;
            a[[j, i]] = -v;
        }
    }
    let eye = Array2::<f64>::eye(d);
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| eye[[i, j]] - a[[i, j]]);
    let p = nalgebra::DMatrix::from_fn(d, d, |i, j| eye[[i, j]] + a[[i, j]]);
    let q = m.try_inverse().unwrap() * p;
    Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)])
}

pub fn tag_accuracy(
    params: &structflow::ModelParams,
    data: &[ObservedSequence],
) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for obs in data {
        let pred = params.decode_tags(obs).unwrap();
        correct += pred.iter().zip(&obs.upos).filter(|(a, b)| a == b).count();
        total += obs.len();
    }
    correct as f64 / total as f64
}

// ------------------------------------------------------ random models

use structflow::flow::{FlowCache, FlowKind};
use structflow::model::{ModelParams, ModelSpec, Task};

pub fn random_model(
    rng: &mut impl Rng,
    task: Task,
    flow: FlowKind,
    k: usize,
    word_dim: usize,
    tag_dim: usize,
    layers: usize,
) -> ModelParams {
    let spec = ModelSpec {
        task,
        num_categories: k,
        word_dim,
        tag_dim,
        flow,
        coupling_layers: layers,
    };
    let mut params = ModelParams::init(&spec, rng).unwrap();
    randomize(&mut params, rng, 0.8);
    if let FlowParams::Linear { weight } = &mut params.flow {
        let d = weight.nrows();
        *weight = Array2::eye(d) * 1.5 + random_matrix(rng, d, d, 0.3);
    }
    params
}

pub fn random_observations(
    rng: &mut impl Rng,
    l: usize,
    word_dim: usize,
    k: usize,
) -> ObservedSequence {
    ObservedSequence {
        x: random_matrix(rng, l, word_dim, 1.5),
        word_dim,
        upos: (0..l).map(|_| rng.random_range(0..k)).collect(),
        gold_heads: None,
    }
}

/// Smallest distance of any coupling pre-activation from the ReLU kink.
/// Finite differences straddling the kink are meaningless, so gradient
/// tests redraw instances that come too close.
pub fn kink_margin(params: &ModelParams, obs: &ObservedSequence) -> f64 {
    let x = params.assemble_inputs(obs).unwrap();
    match params.flow.inverse(x.view()).unwrap().cache {
        FlowCache::Nice { pre, .. } => pre
            .iter()
            .flat_map(|p| p.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min),
        _ => f64::INFINITY,
    }
}
