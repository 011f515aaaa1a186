//! Random trees and scan instances for equivalence testing.
//!
//! These generators back both the unit tests and the CLI's verification
//! suites, so the same instance families exercise the library in CI and
//! from the command line.

use alloc::vec::Vec;

use crate::math;
use crate::rng::SplitMix64;
use crate::tree::PrefixTokenTree;

/// Random tree with 1..=max_nodes nodes in topological order. Each node
/// hangs off a uniformly chosen earlier node, which skews trees bushy near
/// the root; that is the regime tree decoding cares about.
pub fn random_tree(rng: &mut SplitMix64, max_nodes: usize, vocab: u32) -> PrefixTokenTree {
    assert!(max_nodes >= 1 && vocab >= 1);
    let n = 1 + rng.below(max_nodes);
    let mut tokens = Vec::with_capacity(n);
    let mut parent = Vec::with_capacity(n);
    for i in 0..n {
        tokens.push(rng.below(vocab as usize) as u32);
        parent.push(if i == 0 { None } else { Some(rng.below(i)) });
    }
    PrefixTokenTree::new(tokens, parent).expect("construction is topological by design")
}

/// Random chain with 1..=max_len tokens.
pub fn random_chain(rng: &mut SplitMix64, max_len: usize, vocab: u32) -> PrefixTokenTree {
    assert!(max_len >= 1 && vocab >= 1);
    let n = 1 + rng.below(max_len);
    let tokens: Vec<u32> = (0..n).map(|_| rng.below(vocab as usize) as u32).collect();
    PrefixTokenTree::chain(&tokens).expect("non-empty")
}

/// One fully materialized scan problem: a tree plus per-node kernel
/// parameters and an initial state, independent of any model.
#[derive(Debug, Clone)]
pub struct ScanInstance {
    pub tree: PrefixTokenTree,
    pub d_state: usize,
    pub d_model: usize,
    /// Per-node log-decay, strictly negative, length d_state each.
    pub a_log: Vec<Vec<f64>>,
    /// Per-node input projection, length d_state each.
    pub b: Vec<Vec<f64>>,
    /// Per-node output projection, length d_state each.
    pub c: Vec<Vec<f64>>,
    /// Per-node input vector, length d_model each.
    pub u: Vec<Vec<f64>>,
    /// Starting state, row-major d_state x d_model.
    pub x0: Vec<f64>,
    /// Skip gate, length d_model.
    pub d_skip: Vec<f64>,
}

/// Draws a scan instance with n in 1..=max_nodes, d_state in 1..=max_state,
/// d_model in 1..=max_model. Decays land in (ln 0.05, ln 0.999), everything
/// else in (-1, 1).
pub fn random_scan_instance(
    rng: &mut SplitMix64,
    max_nodes: usize,
    max_state: usize,
    max_model: usize,
) -> ScanInstance {
    let tree = random_tree(rng, max_nodes, 64);
    let d_state = 1 + rng.below(max_state);
    let d_model = 1 + rng.below(max_model);
    scan_instance_on(rng, tree, d_state, d_model)
}

/// Fills a given tree with random kernel parameters of the given dims.
pub fn scan_instance_on(
    rng: &mut SplitMix64,
    tree: PrefixTokenTree,
    d_state: usize,
    d_model: usize,
) -> ScanInstance {
    assert!(d_state >= 1 && d_model >= 1);
    let n = tree.len();

    let mut a_log = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    for _ in 0..n {
        a_log.push(
            (0..d_state)
                .map(|_| math::ln(rng.uniform(0.05, 0.999)))
                .collect(),
        );
        b.push((0..d_state).map(|_| rng.uniform(-1.0, 1.0)).collect());
        c.push((0..d_state).map(|_| rng.uniform(-1.0, 1.0)).collect());
        u.push((0..d_model).map(|_| rng.uniform(-1.0, 1.0)).collect());
    }
    let x0 = (0..d_state * d_model)
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    let d_skip = (0..d_model).map(|_| rng.uniform(-1.0, 1.0)).collect();

    ScanInstance {
        tree,
        d_state,
        d_model,
        a_log,
        b,
        c,
        u,
        x0,
        d_skip,
    }
}
