mod common;

use common::*;
use rand::Rng;
use structflow::dmv::{is_projective, DepTree, DmvParams, HAS_CHILD, LEFT, NO_CHILD, RIGHT};

fn random_params(r: &mut impl Rng, k: usize) -> DmvParams {
    let mut p = DmvParams::uniform(k);
    randomize(&mut p, r, 2.0);
    p
}

fn ln_sigmoid(x: f64) -> f64 {
    -(1.0 + (-x).exp()).ln()
}

#[test]
fn tree_counts_are_catalan_like() {
    let counts: Vec<usize> = (1..=4).map(|l| projective_trees(l).len()).collect();
    assert_eq!(counts, vec![1, 2, 7, 30]);
    // l=3 has 9 single-root trees overall; two of them cross
    assert_eq!(all_trees(3).len(), 9);
}

#[test]
fn single_token_closed_form() {
    let mut r = rng(1);
    let p = random_params(&mut r, 3);
    let t = 2;
    let expected = probs(p.root_logits.as_slice().unwrap())[t].ln()
        + ln_sigmoid(p.stop_logits[[t, LEFT, NO_CHILD]])
        + ln_sigmoid(p.stop_logits[[t, RIGHT, NO_CHILD]]);
    assert!(rel_err(p.inside_logprob(&[t]).unwrap(), expected) < 1e-12);
    assert!(rel_err(p.tree_logprob(&[t], &[0]).unwrap().0, expected) < 1e-12);
    assert_eq!(p.viterbi_parse(&[t]).unwrap().heads(), &[0]);
}

#[test]
fn two_tokens_hand_expansion() {
    let mut r = rng(2);
    let p = random_params(&mut r, 2);
    let (a, b) = (0, 1);
    let root = probs(p.root_logits.as_slice().unwrap());
    let child = |h: usize, dir: usize, c: usize| {
        let row: Vec<f64> = (0..2).map(|x| p.child_logits[[h, dir, x]]).collect();
        probs(&row)[c].ln()
    };
    let stop = |h: usize, dir: usize, adj: usize| ln_sigmoid(p.stop_logits[[h, dir, adj]]);
    let cont = |h: usize, dir: usize, adj: usize| ln_sigmoid(-p.stop_logits[[h, dir, adj]]);
    // 1 -> 2: token 1 is root, takes 2 on its right
    let t12 = root[a].ln()
        + stop(a, LEFT, NO_CHILD)
        + cont(a, RIGHT, NO_CHILD)
        + child(a, RIGHT, b)
        + stop(a, RIGHT, HAS_CHILD)
        + stop(b, LEFT, NO_CHILD)
        + stop(b, RIGHT, NO_CHILD);
    // 2 -> 1
    let t21 = root[b].ln()
        + cont(b, LEFT, NO_CHILD)
        + child(b, LEFT, a)
        + stop(b, LEFT, HAS_CHILD)
        + stop(b, RIGHT, NO_CHILD)
        + stop(a, LEFT, NO_CHILD)
        + stop(a, RIGHT, NO_CHILD);
    let tags = [a, b];
    assert!(rel_err(p.tree_logprob(&tags, &[0, 1]).unwrap().0, t12) < 1e-12);
    assert!(rel_err(p.tree_logprob(&tags, &[2, 0]).unwrap().0, t21) < 1e-12);
    assert!(rel_err(p.inside_logprob(&tags).unwrap(), logsumexp(&[t12, t21])) < 1e-10);
}

#[test]
fn brute_force_agreement_up_to_four_tokens() {
    let mut r = rng(3);
    for _ in 0..40 {
        let k = r.random_range(1..=3);
        let l = r.random_range(1..=4);
        let p = random_params(&mut r, k);
        let tags: Vec<usize> = (0..l).map(|_| r.random_range(0..k)).collect();
        let trees = projective_trees(l);
        let scores: Vec<f64> = trees.iter().map(|h| dmv_tree_score(&p, &tags, h)).collect();
        let inside = p.inside_logprob(&tags).unwrap();
        assert!(rel_err(inside, logsumexp(&scores)) < 1e-8);
        let lib: Vec<f64> = trees.iter().map(|h| p.tree_logprob(&tags, h).unwrap().0).collect();
        for (a, b) in lib.iter().zip(&scores) {
            assert!(rel_err(*a, *b) < 1e-10);
            assert!(*a <= inside + 1e-12);
        }
        assert!(rel_err(logsumexp(&lib), inside) < 1e-8);
        let (tree, score) = p.viterbi_parse_scored(&tags).unwrap();
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(rel_err(score, best) < 1e-10);
        assert!(rel_err(dmv_tree_score(&p, &tags, tree.heads()), best) < 1e-10);
        assert!(projective(tree.heads()));
    }
}

#[test]
fn single_token_gradient_closed_form() {
    let mut r = rng(4);
    let p = random_params(&mut r, 3);
    let g = p.dmv_expected_counts(&[1]).unwrap();
    let sm = probs(p.root_logits.as_slice().unwrap());
    for k in 0..3 {
        let expected = f64::from(k == 1) - sm[k];
        assert!((g.root_logits[k] - expected).abs() < 1e-12);
    }
    assert!(g.child_logits.iter().all(|&v| v == 0.0));
}

#[test]
fn expected_counts_gradient_matches_finite_differences() {
    let mut r = rng(5);
    for _ in 0..15 {
        let k = r.random_range(1..=3);
        let l = r.random_range(1..=4);
        let p = random_params(&mut r, k);
        let tags: Vec<usize> = (0..l).map(|_| r.random_range(0..k)).collect();
        let g = p.dmv_expected_counts(&tags).unwrap();
        let rep = fd_check(&p, &g, 1e-4, |q| q.inside_logprob(&tags).unwrap());
        assert!(rep.max_rel < 1e-4, "{}", rep.worst);
    }
}

#[test]
fn expected_arcs_sum_to_length_minus_one() {
    let mut r = rng(6);
    for l in 1..=6 {
        let p = random_params(&mut r, 3);
        let tags: Vec<usize> = (0..l).map(|_| r.random_range(0..3)).collect();
        let (_, counts) = p.expected_counts(&tags).unwrap();
        assert!((counts.arcs() - (l as f64 - 1.0)).abs() < 1e-9);
        assert!((counts.root.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn expected_counts_match_enumeration() {
    let mut r = rng(7);
    let p = random_params(&mut r, 2);
    let tags = [0, 1, 1, 0];
    let trees = projective_trees(4);
    let scores: Vec<f64> = trees.iter().map(|h| dmv_tree_score(&p, &tags, h)).collect();
    let z = logsumexp(&scores);
    let (_, expected) = p.expected_counts(&tags).unwrap();
    let mut child = ndarray::Array3::<f64>::zeros((2, 2, 2));
    for (h, s) in trees.iter().zip(&scores) {
        let w = (s - z).exp();
        let c = p.tree_counts(&tags, h).unwrap();
        child.scaled_add(w, &c.child);
    }
    for (a, b) in child.iter().zip(expected.child.iter()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn tree_gradient_matches_finite_differences() {
    let mut r = rng(8);
    for _ in 0..15 {
        let l = r.random_range(1..=6);
        let p = random_params(&mut r, 3);
        let tags: Vec<usize> = (0..l).map(|_| r.random_range(0..3)).collect();
        // includes non-projective trees, which are scored arc by arc
        let heads = random_tree(&mut r, l);
        let (lp, g) = p.tree_logprob(&tags, &heads).unwrap();
        assert!(rel_err(lp, dmv_tree_score(&p, &tags, &heads)) < 1e-10);
        let rep = fd_check(&p, &g, 1e-4, |q| q.tree_logprob(&tags, &heads).unwrap().0);
        assert!(rep.max_rel < 1e-4, "{}", rep.worst);
    }
}

#[test]
fn permuting_categories_leaves_inside_unchanged() {
    let mut r = rng(9);
    let p = random_params(&mut r, 3);
    let perm = [2, 0, 1];
    let mut q = p.clone();
    for a in 0..3 {
        q.root_logits[perm[a]] = p.root_logits[a];
        for d in 0..2 {
            for v in 0..2 {
                q.stop_logits[[perm[a], d, v]] = p.stop_logits[[a, d, v]];
            }
            for b in 0..3 {
                q.child_logits[[perm[a], d, perm[b]]] = p.child_logits[[a, d, b]];
            }
        }
    }
    let tags = [0, 2, 1, 1, 0];
    let mapped: Vec<usize> = tags.iter().map(|&t| perm[t]).collect();
    let a = p.inside_logprob(&tags).unwrap();
    let b = q.inside_logprob(&mapped).unwrap();
    assert!(rel_err(a, b) < 1e-12);
}

#[test]
fn viterbi_output_is_a_projective_tree() {
    let mut r = rng(10);
    for _ in 0..30 {
        let l = r.random_range(1..=12);
        let p = random_params(&mut r, 4);
        let tags: Vec<usize> = (0..l).map(|_| r.random_range(0..4)).collect();
        let tree = p.viterbi_parse(&tags).unwrap();
        assert!(is_tree(tree.heads()));
        assert!(projective(tree.heads()));
        assert!(tree.is_projective());
    }
}

#[test]
fn projectivity_agrees_with_oracle() {
    for l in 1..=5 {
        for h in all_trees(l) {
            assert_eq!(is_projective(&h), projective(&h), "{h:?}");
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let p = DmvParams::uniform(2);
    assert!(p.inside_logprob(&[]).is_err());
    assert!(p.inside_logprob(&[0, 5]).is_err());
    assert!(p.tree_logprob(&[0, 1], &[0, 0]).is_err());
    assert!(DepTree::new(vec![2, 1]).is_err());
}
