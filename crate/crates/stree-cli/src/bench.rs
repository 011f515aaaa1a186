//! Wall-clock comparison of packed tree forwarding against the unrolled
//! per-branch baseline.

use std::time::Instant;

use anyhow::{ensure, Context, Result};

use stree_core::decode::TreeShape;
use stree_core::model::{Model, Session};
use stree_core::tree::{tree_stats, unroll, PrefixTokenTree};

use crate::formats::BenchRow;

pub struct BenchConfig {
    pub depths: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            depths: vec![4, 5, 6],
            warmup: 3,
            reps: 11,
        }
    }
}

/// Runs `f` a few times untimed, then `reps` timed repetitions, and returns
/// the median wall time in milliseconds.
pub fn median_ms(warmup: usize, reps: usize, mut f: impl FnMut()) -> f64 {
    assert!(reps >= 1, "need at least one timed repetition");
    for _ in 0..warmup {
        f();
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f();
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[reps / 2]
}

fn binary_tree_for(model: &Model, depth: usize) -> Result<PrefixTokenTree> {
    let shape = TreeShape::full_binary(depth)?;
    let n = shape.node_count();
    let vocab = model.config.vocab_size as u64;
    // Token values do not affect the arithmetic cost; any in-vocab ids do.
    let tokens: Vec<u32> = (0..n).map(|i| ((i as u64 * 7 + 3) % vocab) as u32).collect();
    Ok(PrefixTokenTree::new(tokens, shape.parent.clone())?)
}

fn run_packed(model: &Model, session: &Session, tree: &PrefixTokenTree) {
    model
        .forward_tree(session, tree)
        .expect("packed forward failed mid-bench");
}

fn run_unrolled(model: &Model, session: &Session, tree: &PrefixTokenTree, paths: &[Vec<usize>]) {
    for path in paths {
        let mut branch = session.clone();
        for &node in path {
            model
                .forward_step(&mut branch, tree.tokens[node])
                .expect("unrolled forward failed mid-bench");
        }
    }
}

pub fn run_bench(model: &Model, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    ensure!(!cfg.depths.is_empty(), "no depths requested");
    ensure!(cfg.reps >= 1, "need at least one timed repetition");
    ensure!(
        model.config.vocab_size >= 4,
        "bench prompt needs vocab_size >= 4"
    );

    let mut session = model.session();
    model
        .prefill(&mut session, &[1, 2, 3])
        .context("prefilling bench session")?;

    let mut rows = Vec::new();
    for &depth in &cfg.depths {
        ensure!(depth >= 1, "tree depth must be at least 1");
        let tree = binary_tree_for(model, depth)?;
        let stats = tree_stats(&tree);
        let paths = unroll(&tree);

        // One checked pass so errors surface before the timed loop.
        model.forward_tree(&session, &tree)?;

        let packed_ms = median_ms(cfg.warmup, cfg.reps, || {
            run_packed(model, &session, &tree)
        });
        let unrolled_ms = median_ms(cfg.warmup, cfg.reps, || {
            run_unrolled(model, &session, &tree, &paths)
        });
        log::debug!(
            "depth {depth}: packed {} tokens in {packed_ms:.3} ms, unrolled {} tokens in {unrolled_ms:.3} ms",
            stats.packed_tokens,
            stats.unrolled_tokens
        );
        rows.push(BenchRow {
            depth,
            packed_tokens: stats.packed_tokens,
            unrolled_tokens: stats.unrolled_tokens,
            packed_ms,
            unrolled_ms,
        });
    }
    Ok(rows)
}
