//! Dependency Model with Valence over observed tag sequences.
//!
//! Generative story for a sentence with tags `t_1..t_l`: the root picks the
//! tag of its single dependent; then every head `h` generates its left
//! dependents (nearest first) and then its right dependents (nearest first).
//! Before each attempt the head decides to stop or continue with a Bernoulli
//! whose parameter depends on the head tag, the direction, and whether a
//! dependent was already generated on that side (adjacency). Continuing
//! draws the dependent's tag from a per-(head tag, direction) categorical.
//!
//! Categories are clamped to the observed tags, so the marginal sums over
//! projective single-root trees only. The inside program uses split-head
//! items: open/closed half constituents and incomplete arcs, each over a span
//! of positions, giving O(l^3) time.

use ndarray::{Array1, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{log_sigmoid, log_sum_exp, sigmoid, softmax};
use crate::params::{view, view_mut, Group, TensorView, TensorViewMut, Tensors};

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
/// Adjacency index: no dependent generated yet on this side.
pub const NO_CHILD: usize = 0;
pub const HAS_CHILD: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DmvParams {
    pub root_logits: Array1<f64>,
    /// head tag x direction x child tag
    pub child_logits: Array3<f64>,
    /// head tag x direction x adjacency; `sigmoid(logit)` is the stop probability.
    pub stop_logits: Array3<f64>,
}

/// A dependency tree: `heads[i]` is the head of token `i + 1`, 0 for the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepTree {
    heads: Vec<usize>,
}

impl DepTree {
    pub fn new(heads: Vec<usize>) -> Result<Self> {
        crate::corpus::validate_heads(&heads).map_err(Error::data)?;
        Ok(DepTree { heads })
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn into_heads(self) -> Vec<usize> {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// No crossing arcs, with the root drawn at position 0.
    pub fn is_projective(&self) -> bool {
        is_projective(&self.heads)
    }
}

/// Every token strictly between a head and its dependent descends from the head.
pub fn is_projective(heads: &[usize]) -> bool {
    let dominated = |ancestor: usize, mut node: usize| -> bool {
        loop {
            if node == ancestor {
                return true;
            }
            if node == 0 {
                return false;
            }
            node = heads[node - 1];
        }
    };
    heads.iter().enumerate().all(|(i, &h)| {
        let d = i + 1;
        let (lo, hi) = if h < d { (h, d) } else { (d, h) };
        (lo + 1..hi).all(|k| dominated(h, k))
    })
}

/// Log-probability tables indexed by tag.
struct LogTables {
    root: Vec<f64>,
    /// `[h][dir][c]`
    child: Array3<f64>,
    /// `[h][dir][adj]`
    stop: Array3<f64>,
    cont: Array3<f64>,
}

/// Usage counts of each generative decision, indexed like the log tables.
///
/// For the inside program these are expected counts under the tree
/// posterior; for a fixed tree they are observed counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DmvCounts {
    pub root: Array1<f64>,
    pub child: Array3<f64>,
    pub stop: Array3<f64>,
    pub cont: Array3<f64>,
}

impl DmvCounts {
    fn zeros(k: usize) -> Self {
        DmvCounts {
            root: Array1::zeros(k),
            child: Array3::zeros((k, 2, k)),
            stop: Array3::zeros((k, 2, 2)),
            cont: Array3::zeros((k, 2, 2)),
        }
    }

    /// Total number of attachments (excluding the root choice).
    pub fn arcs(&self) -> f64 {
        self.child.sum()
    }
}

impl DmvParams {
    pub fn uniform(num_categories: usize) -> Self {
        DmvParams {
            root_logits: Array1::zeros(num_categories),
            child_logits: Array3::zeros((num_categories, 2, num_categories)),
            stop_logits: Array3::zeros((num_categories, 2, 2)),
        }
    }

    pub fn init<R: Rng + ?Sized>(num_categories: usize, rng: &mut R) -> Self {
        let mut p = Self::uniform(num_categories);
        for t in p.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.01..0.01));
        }
        p
    }

    pub fn num_categories(&self) -> usize {
        self.root_logits.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::uniform(self.num_categories())
    }

    fn tables(&self) -> LogTables {
        let k = self.num_categories();
        let root = softmax(self.root_logits.as_slice().unwrap())
            .into_iter()
            .map(f64::ln)
            .collect();
        let mut child = Array3::zeros((k, 2, k));
        for h in 0..k {
            for dir in 0..2 {
                let row: Vec<f64> = (0..k).map(|c| self.child_logits[[h, dir, c]]).collect();
                let lse = log_sum_exp(&row);
                for c in 0..k {
                    child[[h, dir, c]] = row[c] - lse;
                }
            }
        }
        let stop = self.stop_logits.mapv(log_sigmoid);
        let cont = self.stop_logits.mapv(|s| log_sigmoid(-s));
        LogTables {
            root,
            child,
            stop,
            cont,
        }
    }

    fn check(&self, tags: &[usize]) -> Result<()> {
        if tags.is_empty() {
            return Err(Error::data("DMV needs a sentence of length at least 1"));
        }
        if let Some(t) = tags.iter().find(|&&t| t >= self.num_categories()) {
            return Err(Error::data(format!(
                "tag {t} out of range for {} categories",
                self.num_categories()
            )));
        }
        Ok(())
    }

    /// Log of the total probability of `tags` summed over projective trees.
    pub fn inside_logprob(&self, tags: &[usize]) -> Result<f64> {
        self.check(tags)?;
        let chart = Chart::inside(&self.tables(), tags);
        finite(chart.log_z)
    }

    /// Expected usage counts of every decision under the tree posterior, and log Z.
    pub fn expected_counts(&self, tags: &[usize]) -> Result<(f64, DmvCounts)> {
        self.check(tags)?;
        let tables = self.tables();
        let chart = Chart::inside(&tables, tags);
        let log_z = finite(chart.log_z)?;
        let counts = chart.outside(&tables, tags, self.num_categories());
        Ok((log_z, counts))
    }

    /// Gradient of `inside_logprob` with respect to every logit.
    pub fn dmv_expected_counts(&self, tags: &[usize]) -> Result<DmvParams> {
        let (_, counts) = self.expected_counts(tags)?;
        let mut grads = self.zeros_like();
        self.accumulate_count_grad(&counts, 1.0, &mut grads);
        Ok(grads)
    }

    /// Adds `scale * d(sum counts * log tables) / d logits`.
    pub fn accumulate_count_grad(&self, counts: &DmvCounts, scale: f64, grads: &mut DmvParams) {
        let k = self.num_categories();
        let p_root = softmax(self.root_logits.as_slice().unwrap());
        let n_root = counts.root.sum();
        for c in 0..k {
            grads.root_logits[c] += scale * (counts.root[c] - n_root * p_root[c]);
        }
        for h in 0..k {
            for dir in 0..2 {
                let row: Vec<f64> = (0..k).map(|c| self.child_logits[[h, dir, c]]).collect();
                let p = softmax(&row);
                let n: f64 = (0..k).map(|c| counts.child[[h, dir, c]]).sum();
                for c in 0..k {
                    grads.child_logits[[h, dir, c]] += scale * (counts.child[[h, dir, c]] - n * p[c]);
                }
                for adj in 0..2 {
                    let s = sigmoid(self.stop_logits[[h, dir, adj]]);
                    grads.stop_logits[[h, dir, adj]] += scale
                        * (counts.stop[[h, dir, adj]] * (1.0 - s) - counts.cont[[h, dir, adj]] * s);
                }
            }
        }
    }

    /// Decision counts of the generative story for a given tree.
    ///
    /// Works for non-projective trees too: valence follows each head's own
    /// dependents ordered by distance.
    pub fn tree_counts(&self, tags: &[usize], heads: &[usize]) -> Result<DmvCounts> {
        self.check(tags)?;
        if heads.len() != tags.len() {
            return Err(Error::shape(format!(
                "{} heads for {} tags",
                heads.len(),
                tags.len()
            )));
        }
        crate::corpus::validate_heads(heads).map_err(Error::data)?;
        let l = tags.len();
        let mut counts = DmvCounts::zeros(self.num_categories());
        let mut left = vec![0usize; l];
        let mut right = vec![0usize; l];
        for (i, &h) in heads.iter().enumerate() {
            if h == 0 {
                counts.root[tags[i]] += 1.0;
                continue;
            }
            let (hp, hd) = (h - 1, tags[h - 1]);
            let dir = if i < hp { LEFT } else { RIGHT };
            counts.child[[hd, dir, tags[i]]] += 1.0;
            if dir == LEFT {
                left[hp] += 1;
            } else {
                right[hp] += 1;
            }
        }
        for h in 0..l {
            let t = tags[h];
            for (dir, n) in [(LEFT, left[h]), (RIGHT, right[h])] {
                if n > 0 {
                    counts.cont[[t, dir, NO_CHILD]] += 1.0;
                    counts.cont[[t, dir, HAS_CHILD]] += (n - 1) as f64;
                    counts.stop[[t, dir, HAS_CHILD]] += 1.0;
                } else {
                    counts.stop[[t, dir, NO_CHILD]] += 1.0;
                }
            }
        }
        Ok(counts)
    }

    fn score_counts(&self, counts: &DmvCounts) -> f64 {
        let t = self.tables();
        let dot = |a: &Array3<f64>, b: &Array3<f64>| -> f64 {
            a.iter().zip(b.iter()).filter(|(c, _)| **c != 0.0).map(|(c, v)| c * v).sum()
        };
        counts
            .root
            .iter()
            .zip(&t.root)
            .filter(|(c, _)| **c != 0.0)
            .map(|(c, v)| c * v)
            .sum::<f64>()
            + dot(&counts.child, &t.child)
            + dot(&counts.stop, &t.stop)
            + dot(&counts.cont, &t.cont)
    }

    /// Log probability of one tree and its gradient with respect to the logits.
    pub fn tree_logprob(&self, tags: &[usize], heads: &[usize]) -> Result<(f64, DmvParams)> {
        let counts = self.tree_counts(tags, heads)?;
        let mut grads = self.zeros_like();
        self.accumulate_count_grad(&counts, 1.0, &mut grads);
        Ok((finite(self.score_counts(&counts))?, grads))
    }

    /// Highest-scoring projective tree and its log score.
    pub fn viterbi_parse_scored(&self, tags: &[usize]) -> Result<(DepTree, f64)> {
        self.check(tags)?;
        let (heads, score) = viterbi(&self.tables(), tags);
        let score = finite(score)?;
        assert!(
            is_projective(&heads) && crate::corpus::validate_heads(&heads).is_ok(),
            "decoder produced an invalid tree {heads:?}"
        );
        Ok((DepTree { heads }, score))
    }

    pub fn viterbi_parse(&self, tags: &[usize]) -> Result<DepTree> {
        self.viterbi_parse_scored(tags).map(|(t, _)| t)
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numerical("DMV score is not finite"))
    }
}

/// Split-head inside chart in log space. Index `[a * n + b]`.
///
/// - `ro[h][j]`: head `h` has generated right dependents covering `h..=j`
///   and has not stopped; `rc` is the same after stopping.
/// - `ri[h][m]`: `h` has just attached `m > h`; covers `h..=m` including
///   the left half of `m`.
/// - `lo`, `lc`, `li` mirror these to the left.
struct Chart {
    n: usize,
    ro: Vec<f64>,
    rc: Vec<f64>,
    ri: Vec<f64>,
    lo: Vec<f64>,
    lc: Vec<f64>,
    li: Vec<f64>,
    log_z: f64,
}

fn adjacency(has_child: bool) -> usize {
    if has_child {
        HAS_CHILD
    } else {
        NO_CHILD
    }
}

impl Chart {
    fn inside(t: &LogTables, tags: &[usize]) -> Chart {
        let n = tags.len();
        let ninf = f64::NEG_INFINITY;
        let mut c = Chart {
            n,
            ro: vec![ninf; n * n],
            rc: vec![ninf; n * n],
            ri: vec![ninf; n * n],
            lo: vec![ninf; n * n],
            lc: vec![ninf; n * n],
            li: vec![ninf; n * n],
            log_z: ninf,
        };
        for h in 0..n {
            let x = tags[h];
            c.ro[h * n + h] = 0.0;
            c.lo[h * n + h] = 0.0;
            c.rc[h * n + h] = t.stop[[x, RIGHT, NO_CHILD]];
            c.lc[h * n + h] = t.stop[[x, LEFT, NO_CHILD]];
        }
        let mut buf = Vec::with_capacity(n);
        for w in 1..n {
            for h in 0..n - w {
                let m = h + w;
                let th = tags[h];
                buf.clear();
                for k in h..m {
                    buf.push(
                        c.ro[h * n + k]
                            + t.cont[[th, RIGHT, adjacency(k > h)]]
                            + c.lc[m * n + k + 1],
                    );
                }
                c.ri[h * n + m] = t.child[[th, RIGHT, tags[m]]] + log_sum_exp(&buf);
            }
            for h in w..n {
                let m = h - w;
                let th = tags[h];
                buf.clear();
                for k in m + 1..=h {
                    buf.push(
                        c.lo[h * n + k] + t.cont[[th, LEFT, adjacency(k < h)]] + c.rc[m * n + k - 1],
                    );
                }
                c.li[h * n + m] = t.child[[th, LEFT, tags[m]]] + log_sum_exp(&buf);
            }
            for h in 0..n - w {
                let j = h + w;
                buf.clear();
                for m in h + 1..=j {
                    buf.push(c.ri[h * n + m] + c.rc[m * n + j]);
                }
                c.ro[h * n + j] = log_sum_exp(&buf);
                c.rc[h * n + j] = c.ro[h * n + j] + t.stop[[tags[h], RIGHT, HAS_CHILD]];
            }
            for h in w..n {
                let i = h - w;
                buf.clear();
                for m in i..h {
                    buf.push(c.li[h * n + m] + c.lc[m * n + i]);
                }
                c.lo[h * n + i] = log_sum_exp(&buf);
                c.lc[h * n + i] = c.lo[h * n + i] + t.stop[[tags[h], LEFT, HAS_CHILD]];
            }
        }
        let roots: Vec<f64> = (0..n)
            .map(|r| t.root[tags[r]] + c.lc[r * n] + c.rc[r * n + n - 1])
            .collect();
        c.log_z = log_sum_exp(&roots);
        c
    }

    /// Reverse pass over the inside program; returns expected decision counts.
    fn outside(&self, t: &LogTables, tags: &[usize], k: usize) -> DmvCounts {
        let n = self.n;
        let z = self.log_z;
        let mut counts = DmvCounts::zeros(k);
        let mut d_ro = vec![0.0; n * n];
        let mut d_rc = vec![0.0; n * n];
        let mut d_ri = vec![0.0; n * n];
        let mut d_lo = vec![0.0; n * n];
        let mut d_lc = vec![0.0; n * n];
        let mut d_li = vec![0.0; n * n];

        for r in 0..n {
            let wgt = (t.root[tags[r]] + self.lc[r * n] + self.rc[r * n + n - 1] - z).exp();
            counts.root[tags[r]] += wgt;
            d_lc[r * n] += wgt;
            d_rc[r * n + n - 1] += wgt;
        }

        for w in (1..n).rev() {
            for h in (w..n).rev() {
                let i = h - w;
                let th = tags[h];
                let g = d_lc[h * n + i];
                counts.stop[[th, LEFT, HAS_CHILD]] += g;
                d_lo[h * n + i] += g;
                let g = d_lo[h * n + i];
                if g != 0.0 {
                    let total = self.lo[h * n + i];
                    for m in i..h {
                        let wgt = g * (self.li[h * n + m] + self.lc[m * n + i] - total).exp();
                        d_li[h * n + m] += wgt;
                        d_lc[m * n + i] += wgt;
                    }
                }
            }
            for h in (0..n - w).rev() {
                let j = h + w;
                let th = tags[h];
                let g = d_rc[h * n + j];
                counts.stop[[th, RIGHT, HAS_CHILD]] += g;
                d_ro[h * n + j] += g;
                let g = d_ro[h * n + j];
                if g != 0.0 {
                    let total = self.ro[h * n + j];
                    for m in h + 1..=j {
                        let wgt = g * (self.ri[h * n + m] + self.rc[m * n + j] - total).exp();
                        d_ri[h * n + m] += wgt;
                        d_rc[m * n + j] += wgt;
                    }
                }
            }
            for h in (w..n).rev() {
                let m = h - w;
                let th = tags[h];
                let g = d_li[h * n + m];
                if g == 0.0 {
                    continue;
                }
                counts.child[[th, LEFT, tags[m]]] += g;
                let total = self.li[h * n + m] - t.child[[th, LEFT, tags[m]]];
                for kk in m + 1..=h {
                    let adj = adjacency(kk < h);
                    let term = self.lo[h * n + kk] + t.cont[[th, LEFT, adj]] + self.rc[m * n + kk - 1];
                    let wgt = g * (term - total).exp();
                    d_lo[h * n + kk] += wgt;
                    counts.cont[[th, LEFT, adj]] += wgt;
                    d_rc[m * n + kk - 1] += wgt;
                }
            }
            for h in (0..n - w).rev() {
                let m = h + w;
                let th = tags[h];
                let g = d_ri[h * n + m];
                if g == 0.0 {
                    continue;
                }
                counts.child[[th, RIGHT, tags[m]]] += g;
                let total = self.ri[h * n + m] - t.child[[th, RIGHT, tags[m]]];
                for kk in h..m {
                    let adj = adjacency(kk > h);
                    let term = self.ro[h * n + kk] + t.cont[[th, RIGHT, adj]] + self.lc[m * n + kk + 1];
                    let wgt = g * (term - total).exp();
                    d_ro[h * n + kk] += wgt;
                    counts.cont[[th, RIGHT, adj]] += wgt;
                    d_lc[m * n + kk + 1] += wgt;
                }
            }
        }
        for h in 0..n {
            let th = tags[h];
            counts.stop[[th, RIGHT, NO_CHILD]] += d_rc[h * n + h];
            counts.stop[[th, LEFT, NO_CHILD]] += d_lc[h * n + h];
        }
        counts
    }
}

/// Max-product version of the inside program with backpointers.
///
/// Candidates are scanned in increasing position order and only a strictly
/// better score replaces the incumbent, so earlier split points win ties.
fn viterbi(t: &LogTables, tags: &[usize]) -> (Vec<usize>, f64) {
    let n = tags.len();
    let ninf = f64::NEG_INFINITY;
    let mut ro = vec![ninf; n * n];
    let mut rc = vec![ninf; n * n];
    let mut ri = vec![ninf; n * n];
    let mut lo = vec![ninf; n * n];
    let mut lc = vec![ninf; n * n];
    let mut li = vec![ninf; n * n];
    let mut bp_ri = vec![0usize; n * n];
    let mut bp_li = vec![0usize; n * n];
    let mut bp_ro = vec![0usize; n * n];
    let mut bp_lo = vec![0usize; n * n];

    fn argmax(items: impl Iterator<Item = (usize, f64)>) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (idx, s) in items {
            if s > best.1 {
                best = (idx, s);
            }
        }
        best
    }

    for h in 0..n {
        ro[h * n + h] = 0.0;
        lo[h * n + h] = 0.0;
        rc[h * n + h] = t.stop[[tags[h], RIGHT, NO_CHILD]];
        lc[h * n + h] = t.stop[[tags[h], LEFT, NO_CHILD]];
    }
    for w in 1..n {
        for h in 0..n - w {
            let m = h + w;
            let th = tags[h];
            let (k, s) = argmax(
                (h..m).map(|k| (k, ro[h * n + k] + t.cont[[th, RIGHT, adjacency(k > h)]] + lc[m * n + k + 1])),
            );
            ri[h * n + m] = t.child[[th, RIGHT, tags[m]]] + s;
            bp_ri[h * n + m] = k;
        }
        for h in w..n {
            let m = h - w;
            let th = tags[h];
            let (k, s) = argmax(
                (m + 1..=h).map(|k| (k, lo[h * n + k] + t.cont[[th, LEFT, adjacency(k < h)]] + rc[m * n + k - 1])),
            );
            li[h * n + m] = t.child[[th, LEFT, tags[m]]] + s;
            bp_li[h * n + m] = k;
        }
        for h in 0..n - w {
            let j = h + w;
            let (m, s) = argmax((h + 1..=j).map(|m| (m, ri[h * n + m] + rc[m * n + j])));
            ro[h * n + j] = s;
            bp_ro[h * n + j] = m;
            rc[h * n + j] = s + t.stop[[tags[h], RIGHT, HAS_CHILD]];
        }
        for h in w..n {
            let i = h - w;
            let (m, s) = argmax((i..h).map(|m| (m, li[h * n + m] + lc[m * n + i])));
            lo[h * n + i] = s;
            bp_lo[h * n + i] = m;
            lc[h * n + i] = s + t.stop[[tags[h], LEFT, HAS_CHILD]];
        }
    }
    let (root, score) =
        argmax((0..n).map(|r| (r, t.root[tags[r]] + lc[r * n] + rc[r * n + n - 1])));

    enum Item {
        Ro(usize, usize),
        Ri(usize, usize),
        Lo(usize, usize),
        Li(usize, usize),
    }
    let mut heads = vec![0usize; n];
    let mut stack = vec![Item::Lo(root, 0), Item::Ro(root, n - 1)];
    while let Some(item) = stack.pop() {
        match item {
            Item::Ro(h, j) => {
                if j > h {
                    let m = bp_ro[h * n + j];
                    heads[m] = h + 1;
                    stack.push(Item::Ri(h, m));
                    stack.push(Item::Ro(m, j));
                }
            }
            Item::Lo(h, i) => {
                if i < h {
                    let m = bp_lo[h * n + i];
                    heads[m] = h + 1;
                    stack.push(Item::Li(h, m));
                    stack.push(Item::Lo(m, i));
                }
            }
            Item::Ri(h, m) => {
                let k = bp_ri[h * n + m];
                stack.push(Item::Ro(h, k));
                stack.push(Item::Lo(m, k + 1));
            }
            Item::Li(h, m) => {
                let k = bp_li[h * n + m];
                stack.push(Item::Lo(h, k));
                stack.push(Item::Ro(m, k - 1));
            }
        }
    }
    heads[root] = 0;
    (heads, score)
}

impl Tensors for DmvParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            view("prior.dmv.root_logits", Group::Prior, &self.root_logits),
            view("prior.dmv.child_logits", Group::Prior, &self.child_logits),
            view("prior.dmv.stop_logits", Group::Prior, &self.stop_logits),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        vec![
            view_mut("prior.dmv.root_logits", Group::Prior, &mut self.root_logits),
            view_mut("prior.dmv.child_logits", Group::Prior, &mut self.child_logits),
            view_mut("prior.dmv.stop_logits", Group::Prior, &mut self.stop_logits),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(k: usize, seed: u64) -> DmvParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DmvParams::uniform(k);
        for t in p.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        }
        p
    }

    #[test]
    fn single_token_closed_form() {
        let p = random_params(3, 1);
        let lr = softmax(p.root_logits.as_slice().unwrap())[2].ln();
        let expected = lr
            + log_sigmoid(p.stop_logits[[2, LEFT, NO_CHILD]])
            + log_sigmoid(p.stop_logits[[2, RIGHT, NO_CHILD]]);
        assert!((p.inside_logprob(&[2]).unwrap() - expected).abs() < 1e-12);
        let (tree_lp, _) = p.tree_logprob(&[2], &[0]).unwrap();
        assert!((tree_lp - expected).abs() < 1e-12);
        assert_eq!(p.viterbi_parse(&[2]).unwrap().heads(), &[0]);
    }

    #[test]
    fn single_token_gradient() {
        let p = random_params(3, 2);
        let g = p.dmv_expected_counts(&[1]).unwrap();
        let soft = softmax(p.root_logits.as_slice().unwrap());
        for c in 0..3 {
            let one_hot = if c == 1 { 1.0 } else { 0.0 };
            assert!((g.root_logits[c] - (one_hot - soft[c])).abs() < 1e-12);
        }
        assert!(g.child_logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_tokens_sum_both_trees() {
        let p = random_params(2, 3);
        let tags = [0, 1];
        let (a, _) = p.tree_logprob(&tags, &[2, 0]).unwrap();
        let (b, _) = p.tree_logprob(&tags, &[0, 1]).unwrap();
        let total = crate::math::log_add(a, b);
        assert!((total - p.inside_logprob(&tags).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn expected_arcs_count_length_minus_one() {
        let p = random_params(3, 4);
        let tags = [0, 2, 1, 1, 0];
        let (_, counts) = p.expected_counts(&tags).unwrap();
        assert!((counts.arcs() - 4.0).abs() < 1e-9);
        assert!((counts.root.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projectivity() {
        assert!(is_projective(&[2, 0, 2]));
        assert!(!is_projective(&[3, 4, 0, 3]));
        assert!(!is_projective(&[0, 4, 1, 1]));
        let t = DepTree::new(vec![2, 0]).unwrap();
        assert!(t.is_projective());
        assert!(DepTree::new(vec![0, 0]).is_err());
    }

    #[test]
    fn non_projective_tree_is_scored() {
        let p = random_params(2, 5);
        let tags = [0, 1, 0, 1];
        let heads = [3, 4, 0, 3];
        let (lp, _) = p.tree_logprob(&tags, &heads).unwrap();
        assert!(lp.is_finite());
        assert!(lp < p.inside_logprob(&tags).unwrap() + 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        let p = DmvParams::uniform(2);
        assert!(p.inside_logprob(&[]).is_err());
        assert!(p.inside_logprob(&[2]).is_err());
        assert!(p.tree_logprob(&[0, 1], &[0]).is_err());
    }
}
