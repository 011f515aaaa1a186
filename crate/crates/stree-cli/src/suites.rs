//! Randomized self-check suites behind `stree verify`.

use anyhow::{bail, Result};
use serde::Serialize;

use stree_core::decode::{autoregressive, decode, DecodeParams, DraftStrategy, Verifier};
use stree_core::math::max_rel_error;
use stree_core::model::{Model, ModelConfig};
use stree_core::rng::SplitMix64;
use stree_core::ssm::{sequential_step, tree_scan, unrolled_scan, SsmState};
use stree_core::synth::{random_chain, random_scan_instance, scan_instance_on, ScanInstance};
use stree_core::tree::build_tree_mask;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl SuiteReport {
    fn new(name: &str, instances: usize, max_err: f64, tolerance: f64) -> Self {
        SuiteReport {
            name: name.to_string(),
            instances,
            max_rel_error: max_err,
            pass: max_err <= tolerance,
            tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteSelection {
    All,
    Scan,
    Chain,
    Replay,
    Losslessness,
}

const SCAN_TOLERANCE: f64 = 1e-6;

fn state_of(inst: &ScanInstance) -> SsmState {
    let mut x0 = SsmState::zeros(inst.d_state, inst.d_model);
    x0.h.copy_from_slice(&inst.x0);
    x0
}

fn worst_row_error(got: &[Vec<f64>], want: &[Vec<f64>]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| max_rel_error(g, w))
        .fold(0.0f64, f64::max)
}

/// Packed tree scan against the per-branch unrolled reference.
pub fn suite_scan_vs_unrolled(seed: u64, instances: usize, inject_error: bool) -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let inst = random_scan_instance(&mut rng, 63, 16, 32);
        let x0 = state_of(&inst);
        let mask = build_tree_mask(&inst.tree)?;
        let mut scan = tree_scan(&mask, &inst.a_log, &inst.b, &inst.c, &inst.u, &x0, &inst.d_skip)?;
        if inject_error && i == 0 {
            // Test hook: prove a real mismatch is caught and fails the run.
            scan.y[0][0] += 1e-3;
        }
        let reference = unrolled_scan(&inst.tree, &inst.a_log, &inst.b, &inst.c, &inst.u, &x0, &inst.d_skip);
        worst = worst.max(worst_row_error(&scan.y, &reference));
    }
    Ok(SuiteReport::new("scan_vs_unrolled", instances, worst, SCAN_TOLERANCE))
}

/// On a chain, the packed scan must reduce to plain sequential stepping.
pub fn suite_chain_reduction(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let chain = random_chain(&mut rng, 32, 64);
        let d_state = 1 + rng.below(16);
        let d_model = 1 + rng.below(32);
        let inst = scan_instance_on(&mut rng, chain, d_state, d_model);
        let x0 = state_of(&inst);
        let mask = build_tree_mask(&inst.tree)?;
        let scan = tree_scan(&mask, &inst.a_log, &inst.b, &inst.c, &inst.u, &x0, &inst.d_skip)?;

        let mut state = state_of(&inst);
        for t in 0..inst.tree.len() {
            let y = sequential_step(&mut state, &inst.a_log[t], &inst.b[t], &inst.c[t], &inst.u[t], &inst.d_skip);
            worst = worst.max(max_rel_error(&scan.y[t], &y));
        }
    }
    Ok(SuiteReport::new("chain_reduction", instances, worst, SCAN_TOLERANCE))
}

/// Replayed states against rerunning the recurrence along the same path.
pub fn suite_activation_replay(seed: u64, pairs: usize) -> Result<SuiteReport> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let inst = random_scan_instance(&mut rng, 48, 12, 24);
        let x0 = state_of(&inst);
        let mask = build_tree_mask(&inst.tree)?;
        let scan = tree_scan(&mask, &inst.a_log, &inst.b, &inst.c, &inst.u, &x0, &inst.d_skip)?;

        let node = rng.below(inst.tree.len());
        let path = inst.tree.root_path(node);
        let replayed = scan.cache.replay(&path)?;

        let mut state = state_of(&inst);
        for &t in &path {
            sequential_step(&mut state, &inst.a_log[t], &inst.b[t], &inst.c[t], &inst.u[t], &inst.d_skip);
        }
        worst = worst.max(max_rel_error(&replayed.h, &state.h));
    }
    Ok(SuiteReport::new("activation_replay", pairs, worst, SCAN_TOLERANCE))
}

fn suite_models() -> Result<(Model, Model)> {
    let target = Model::init(ModelConfig {
        vocab_size: 32,
        d_model: 16,
        d_state: 4,
        n_layers: 3,
        attn_layers: vec![1],
        seed: 21,
    })?;
    let draft = Model::init(ModelConfig {
        vocab_size: 32,
        d_model: 16,
        d_state: 4,
        n_layers: 2,
        attn_layers: vec![],
        seed: 22,
    })?;
    Ok((target, draft))
}

/// Greedy tree decoding must emit exactly the autoregressive stream.
pub fn suite_greedy_losslessness(seed: u64, prompts: usize) -> Result<SuiteReport> {
    let (target, draft) = suite_models()?;
    let mut rng = SplitMix64::new(seed);
    let mut mismatches = 0usize;
    for case in 0..prompts {
        let prompt: Vec<u32> = (0..1 + rng.below(4))
            .map(|_| rng.below(target.config.vocab_size) as u32)
            .collect();
        let draft_spec = ["binary:3", "A", "chain:4", "beam:2,3", "E"][case % 5];
        let params = DecodeParams {
            max_tokens: 48,
            temperature: 0.0,
            seed: seed ^ case as u64,
            verifier: Verifier::Greedy,
            draft: DraftStrategy::parse(draft_spec)?,
        };
        let speculated = decode(&target, &draft, &prompt, &params)?;
        let base = autoregressive(&target, &prompt, params.max_tokens, 0.0, params.seed)?;
        if speculated.tokens != base.tokens {
            mismatches += 1;
            log::debug!(
                "losslessness mismatch on prompt {prompt:?} with draft {draft_spec}: {:?} vs {:?}",
                speculated.tokens,
                base.tokens
            );
        }
    }
    Ok(SuiteReport::new(
        "greedy_losslessness",
        prompts,
        mismatches as f64,
        0.0,
    ))
}

pub fn run_suites(
    selection: SuiteSelection,
    seed: u64,
    instances: usize,
    inject_error: bool,
) -> Result<Vec<SuiteReport>> {
    if instances == 0 {
        bail!("--instances must be at least 1");
    }
    let mut reports = Vec::new();
    let wants = |s: SuiteSelection| selection == SuiteSelection::All || selection == s;
    if wants(SuiteSelection::Scan) {
        reports.push(suite_scan_vs_unrolled(seed, instances, inject_error)?);
    }
    if wants(SuiteSelection::Chain) {
        reports.push(suite_chain_reduction(seed.wrapping_add(1), instances)?);
    }
    if wants(SuiteSelection::Replay) {
        reports.push(suite_activation_replay(seed.wrapping_add(2), instances.max(100))?);
    }
    if wants(SuiteSelection::Losslessness) {
        reports.push(suite_greedy_losslessness(seed.wrapping_add(3), 10)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_clean() {
        let reports = run_suites(SuiteSelection::All, 7, 40, false).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert!(r.pass, "{} failed: max err {}", r.name, r.max_rel_error);
        }
        assert_eq!(reports[2].instances, 100);
    }

    #[test]
    fn injected_error_fails_scan_suite() {
        let report = suite_scan_vs_unrolled(7, 5, true).unwrap();
        assert!(!report.pass);
        assert!(report.max_rel_error > SCAN_TOLERANCE);
    }

    #[test]
    fn chain_suite_covers_long_chains() {
        let report = suite_chain_reduction(123, 60).unwrap();
        assert!(report.pass, "max err {}", report.max_rel_error);
    }
}
