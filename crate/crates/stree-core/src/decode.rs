//! Draft tree construction, branch verification, and the speculative
//! decoding loop that ties the model, the scan, and the replay together.
//!
//! One iteration drafts a tree rooted at the last emitted token, scores
//! the packed tree with the target model in a single call, walks it with a
//! verifier, commits the accepted root path into both sessions, and emits
//! the accepted tokens plus one bonus token from the target distribution
//! at the deepest accepted node. The committed state therefore always
//! trails the emitted text by exactly one token: the next tree root.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math::{self, argmax, sample_index, softmax_with_temperature};
use crate::model::{Model, Session};
use crate::rng::SplitMix64;
use crate::tree::PrefixTokenTree;
use crate::{Error, Result};

/// A token-free tree skeleton: node i's parent, topologically ordered.
/// Drafting fills node i with the k-th ranked draft token at its parent,
/// where k is i's position among its siblings.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeShape {
    pub parent: Vec<Option<usize>>,
}

impl TreeShape {
    /// Root plus a single chain of `n` drafted tokens.
    pub fn chain(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Structure("chain shape needs at least 1 node".into()));
        }
        Ok(TreeShape {
            parent: (0..=n).map(|i| i.checked_sub(1)).collect(),
        })
    }

    /// Full binary tree with `levels` levels of nodes (2^levels - 1 total),
    /// the root being level one.
    pub fn full_binary(levels: usize) -> Result<Self> {
        if levels == 0 || levels > 16 {
            return Err(Error::Structure(
                "binary shape levels must be in 1..=16".into(),
            ));
        }
        let n = (1usize << levels) - 1;
        Ok(TreeShape {
            parent: (0..n)
                .map(|i| if i == 0 { None } else { Some((i - 1) / 2) })
                .collect(),
        })
    }

    /// Named preset shapes, small trees tuned for different branching
    /// profiles. Within each, every node's children are contiguous and
    /// ascending, so sibling order equals node order.
    pub fn preset(name: &str) -> Option<Self> {
        let parent: Vec<isize> = match name {
            "A" => vec![-1, 0, 0, 0, 1, 1, 2, 4, 4, 5, 7, 7, 8],
            "B" => {
                let mut p = vec![-1isize];
                p.extend((1..=8).map(|_| 0isize));
                for i in 9..=24 {
                    p.push((i - 9) / 2 + 1);
                }
                p.extend([9, 10, 11, 12]);
                p
            }
            "C" => vec![-1, 0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 3, 7, 7, 8],
            "D" => vec![-1, 0, 0, 0, 0, 1, 1, 2, 3, 5, 6, 9, 10],
            "E" => vec![-1, 0, 0, 0, 1, 1, 2, 4, 4, 5, 7, 7, 8, 10, 10, 11],
            _ => return None,
        };
        Some(TreeShape {
            parent: parent
                .into_iter()
                .map(|p| if p < 0 { None } else { Some(p as usize) })
                .collect(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    /// Children of each node, ascending.
    pub fn children_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.parent.len()];
        for (i, p) in self.parent.iter().enumerate() {
            if let Some(j) = p {
                lists[*j].push(i);
            }
        }
        lists
    }

    /// Edge count of the longest root-to-leaf path.
    pub fn edge_depth(&self) -> usize {
        let mut depth = vec![0usize; self.parent.len()];
        let mut max = 0;
        for i in 1..self.parent.len() {
            depth[i] = depth[self.parent[i].expect("non-root")] + 1;
            if depth[i] > max {
                max = depth[i];
            }
        }
        max
    }

    /// Widest level, the root level being width one.
    pub fn max_level_width(&self) -> usize {
        let mut depth = vec![0usize; self.parent.len()];
        let mut width = vec![0usize; self.parent.len() + 1];
        for i in 0..self.parent.len() {
            if let Some(p) = self.parent[i] {
                depth[i] = depth[p] + 1;
            }
            width[depth[i]] += 1;
        }
        width.into_iter().max().unwrap_or(0)
    }
}

/// How draft trees are produced each iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum DraftStrategy {
    /// Fixed shape, filled with ranked draft tokens.
    Static(TreeShape),
    /// A single chain of `depth` tokens sampled from the draft
    /// distribution, i.e. classic draft-then-verify decoding.
    Chain { depth: usize },
    /// Beam search: `steps` rounds, each keeping the `beams` best
    /// extensions by joint log-probability; the tree keeps every beam ever
    /// opened, 1 + steps * beams nodes in total.
    Beam { beams: usize, steps: usize },
}

impl DraftStrategy {
    /// Parses the tree argument syntax: `chain:N`, `binary:D`, `beam:M,N`,
    /// or a preset letter `A`..`E`.
    pub fn parse(s: &str) -> Result<DraftStrategy> {
        if let Some(shape) = TreeShape::preset(s) {
            return Ok(DraftStrategy::Static(shape));
        }
        if let Some(rest) = s.strip_prefix("chain:") {
            let n: usize = rest
                .parse()
                .map_err(|_| Error::Structure(alloc::format!("bad chain length {rest:?}")))?;
            return Ok(DraftStrategy::Static(TreeShape::chain(n)?));
        }
        if let Some(rest) = s.strip_prefix("binary:") {
            let d: usize = rest
                .parse()
                .map_err(|_| Error::Structure(alloc::format!("bad binary depth {rest:?}")))?;
            return Ok(DraftStrategy::Static(TreeShape::full_binary(d)?));
        }
        if let Some(rest) = s.strip_prefix("beam:") {
            let (m, n) = rest.split_once(',').ok_or_else(|| {
                Error::Structure(alloc::format!("beam spec {rest:?} wants beam:M,N"))
            })?;
            let beams: usize = m
                .parse()
                .map_err(|_| Error::Structure(alloc::format!("bad beam count {m:?}")))?;
            let steps: usize = n
                .parse()
                .map_err(|_| Error::Structure(alloc::format!("bad beam steps {n:?}")))?;
            if beams == 0 || steps == 0 {
                return Err(Error::Structure("beam:M,N needs M,N >= 1".into()));
            }
            return Ok(DraftStrategy::Beam { beams, steps });
        }
        Err(Error::Structure(alloc::format!(
            "unknown tree spec {s:?}; try chain:N, binary:D, beam:M,N or A..E"
        )))
    }
}

/// Token ranks at one node: vocab indices sorted by raw logit, descending,
/// ties toward the lower token id. Rank order deliberately ignores
/// temperature so that a shape drafts the same tree at any temperature.
fn rank_tokens(logits: &[f64], k: usize) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| i as u32).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| if x > m { x } else { m });
    let lse = max + math::ln(logits.iter().map(|&l| math::exp(l - max)).sum::<f64>());
    logits.iter().map(|&l| l - lse).collect()
}

/// Draws from post-temperature probabilities; at temperature zero this is
/// plain argmax and consumes no randomness.
fn select(rng: &mut SplitMix64, probs: &[f64], temperature: f64) -> usize {
    if temperature == 0.0 {
        argmax(probs)
    } else {
        sample_index(rng, probs)
    }
}

/// Fills a static shape with draft tokens, level by level. Node i gets the
/// rank-k token of the draft distribution at its parent, k being i's
/// sibling index; `draft_probs` records the post-temperature distribution
/// at every expanded node.
pub fn draft_static(
    draft: &Model,
    session: &Session,
    root_token: u32,
    shape: &TreeShape,
    temperature: f64,
) -> Result<PrefixTokenTree> {
    let n = shape.node_count();
    let children = shape.children_lists();
    if let Some(widest) = children.iter().map(|c| c.len()).max() {
        if widest > draft.config.vocab_size {
            return Err(Error::Structure(alloc::format!(
                "shape wants {widest} children but vocab is {}",
                draft.config.vocab_size
            )));
        }
    }

    let mut tree = PrefixTokenTree::single(root_token);
    tree.tokens.reserve(n);
    // Build level by level: each level's tokens need draft logits at their
    // parents, which the previous level already placed in the tree. Shapes
    // need not be level-ordered, so shape indices are remapped to built
    // positions (the built tree ends up level-ordered, ranks preserved).
    let mut depth = vec![0usize; n];
    for i in 1..n {
        depth[i] = depth[shape.parent[i].expect("non-root")] + 1;
    }
    let max_depth = depth.iter().copied().max().unwrap_or(0);
    let mut built_of = vec![usize::MAX; n];
    built_of[0] = 0;

    for level in 1..=max_depth {
        let staged = draft.forward_tree(session, &tree)?;
        for parent in 0..n {
            if depth[parent] + 1 != level || children[parent].is_empty() {
                continue;
            }
            let bp = built_of[parent];
            let logits = &staged.logits[bp];
            let ranked = rank_tokens(logits, children[parent].len());
            tree.draft_probs[bp] = Some(softmax_with_temperature(logits, temperature));
            for (rank, &child) in children[parent].iter().enumerate() {
                built_of[child] = tree.tokens.len();
                tree.tokens.push(ranked[rank]);
                tree.parent.push(Some(bp));
                tree.draft_probs.push(None);
            }
        }
    }
    debug_assert_eq!(tree.len(), n);
    Ok(tree)
}

/// Samples a chain of `depth` tokens from the draft model, the vanilla
/// speculative decoding draft. Each node records the distribution its
/// child was drawn from.
pub fn draft_chain(
    draft: &Model,
    session: &Session,
    root_token: u32,
    depth: usize,
    temperature: f64,
    rng: &mut SplitMix64,
) -> Result<PrefixTokenTree> {
    if depth == 0 {
        return Err(Error::Structure("chain draft needs depth >= 1".into()));
    }
    let mut scratch = session.clone();
    let mut tree = PrefixTokenTree::single(root_token);
    let mut cur = root_token;
    for i in 0..depth {
        let logits = draft.forward_step(&mut scratch, cur)?;
        let probs = softmax_with_temperature(&logits, temperature);
        let next = select(rng, &probs, temperature) as u32;
        tree.draft_probs[i] = Some(probs);
        tree.tokens.push(next);
        tree.parent.push(Some(i));
        tree.draft_probs.push(None);
        cur = next;
    }
    Ok(tree)
}

/// Beam-search drafting: every step extends the live beams by their best
/// joint-score continuations and keeps the top `beams` of them as new
/// nodes. Scores are cumulative raw log-softmax values, so the search is
/// temperature-independent; `draft_probs` still records post-temperature
/// distributions for the verifiers.
pub fn draft_beam(
    draft: &Model,
    session: &Session,
    root_token: u32,
    beams: usize,
    steps: usize,
    temperature: f64,
) -> Result<PrefixTokenTree> {
    if beams == 0 || steps == 0 {
        return Err(Error::Structure("beam draft needs beams, steps >= 1".into()));
    }
    if beams > draft.config.vocab_size {
        return Err(Error::Structure(alloc::format!(
            "{beams} beams but vocab is {}",
            draft.config.vocab_size
        )));
    }
    let mut tree = PrefixTokenTree::single(root_token);
    let mut live: Vec<(usize, f64)> = vec![(0, 0.0)];
    for _ in 0..steps {
        let staged = draft.forward_tree(session, &tree)?;
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for &(node, score) in &live {
            let lp = log_softmax(&staged.logits[node]);
            tree.draft_probs[node] = Some(softmax_with_temperature(
                &staged.logits[node],
                temperature,
            ));
            for (t, &l) in lp.iter().enumerate() {
                candidates.push((score + l, node, t as u32));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(beams);
        live = candidates
            .into_iter()
            .map(|(score, parent, token)| {
                let idx = tree.tokens.len();
                tree.tokens.push(token);
                tree.parent.push(Some(parent));
                tree.draft_probs.push(None);
                (idx, score)
            })
            .collect();
    }
    Ok(tree)
}

/// Branch acceptance rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verifier {
    /// Walk the target argmax; deterministic, exact greedy decoding.
    Greedy,
    /// Multi-draft rejection sampling against the recorded draft
    /// distributions; preserves the target distribution for sampled drafts.
    Mss,
    /// One target sample per node, descend on coincidence.
    Naive,
}

/// Outcome of verifying one tree: the accepted nodes below the root, in
/// path order, plus the bonus token drawn at the deepest accepted node.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyResult {
    pub accepted_path: Vec<usize>,
    pub bonus_token: u32,
}

impl VerifyResult {
    /// Tokens the call hands to the output: accepted plus the bonus.
    pub fn accepted_len(&self) -> usize {
        self.accepted_path.len() + 1
    }
}

pub fn verify(
    tree: &PrefixTokenTree,
    probs: &[Vec<f64>],
    verifier: Verifier,
    rng: &mut SplitMix64,
) -> Result<VerifyResult> {
    match verifier {
        Verifier::Greedy => Ok(verify_greedy(tree, probs)),
        Verifier::Mss => verify_mss(tree, probs, rng),
        Verifier::Naive => Ok(verify_naive(tree, probs, rng)),
    }
}

/// Follows the target argmax down the tree: a child is accepted iff its
/// token is the argmax at the current node; the walk's final argmax is the
/// bonus token.
pub fn verify_greedy(tree: &PrefixTokenTree, probs: &[Vec<f64>]) -> VerifyResult {
    let children = tree.children_lists();
    let mut cur = 0usize;
    let mut path = Vec::new();
    loop {
        let want = argmax(&probs[cur]) as u32;
        match children[cur].iter().find(|&&ch| tree.tokens[ch] == want) {
            Some(&ch) => {
                path.push(ch);
                cur = ch;
            }
            None => {
                return VerifyResult {
                    accepted_path: path,
                    bonus_token: want,
                }
            }
        }
    }
}

/// Rejection-samples the children of each node against the draft
/// distribution recorded there: child with token t is accepted with
/// probability min(1, p(t)/q(t)); each rejection folds q out of p
/// (p <- normalize(max(0, p - q))) before the next sibling, and the bonus
/// token is drawn from whatever distribution is left.
pub fn verify_mss(
    tree: &PrefixTokenTree,
    probs: &[Vec<f64>],
    rng: &mut SplitMix64,
) -> Result<VerifyResult> {
    let children = tree.children_lists();
    let mut cur = 0usize;
    let mut path = Vec::new();
    'walk: loop {
        let p = &probs[cur];
        let mut p_work = p.clone();
        let kids = &children[cur];
        if !kids.is_empty() {
            let q = tree.draft_probs[cur].as_ref().ok_or_else(|| {
                Error::Structure(alloc::format!(
                    "node {cur} has children but no draft distribution"
                ))
            })?;
            if q.len() != p.len() {
                return Err(Error::Structure(alloc::format!(
                    "draft distribution at node {cur} has {} entries, target has {}",
                    q.len(),
                    p.len()
                )));
            }
            // Most probable drafts first.
            let mut ordered = kids.clone();
            ordered.sort_by(|&a, &b| {
                q[tree.tokens[b] as usize]
                    .total_cmp(&q[tree.tokens[a] as usize])
                    .then(a.cmp(&b))
            });
            for ch in ordered {
                let t = tree.tokens[ch] as usize;
                let accept_p = if q[t] > 0.0 {
                    (p_work[t] / q[t]).min(1.0)
                } else if p_work[t] > 0.0 {
                    1.0
                } else {
                    0.0
                };
                if rng.next_f64() < accept_p {
                    path.push(ch);
                    cur = ch;
                    continue 'walk;
                }
                subtract_and_renormalize(&mut p_work, p, q, t);
            }
        }
        let bonus = sample_index(rng, &p_work) as u32;
        return Ok(VerifyResult {
            accepted_path: path,
            bonus_token: bonus,
        });
    }
}

/// p_work <- normalize(max(0, p_work - q)). If rounding wipes the residual
/// out (p nearly equal to q), fall back to p with the rejected token
/// removed, and to p itself if even that is empty.
fn subtract_and_renormalize(p_work: &mut [f64], p: &[f64], q: &[f64], rejected: usize) {
    for (w, &qv) in p_work.iter_mut().zip(q) {
        *w = (*w - qv).max(0.0);
    }
    let sum: f64 = p_work.iter().sum();
    if sum > 1e-15 {
        for w in p_work.iter_mut() {
            *w /= sum;
        }
        return;
    }
    p_work.copy_from_slice(p);
    p_work[rejected] = 0.0;
    let sum: f64 = p_work.iter().sum();
    if sum > 0.0 {
        for w in p_work.iter_mut() {
            *w /= sum;
        }
    } else {
        p_work.copy_from_slice(p);
    }
}

/// Draws one token from the target distribution at each node and descends
/// while the draw happens to match a drafted child.
pub fn verify_naive(
    tree: &PrefixTokenTree,
    probs: &[Vec<f64>],
    rng: &mut SplitMix64,
) -> VerifyResult {
    let children = tree.children_lists();
    let mut cur = 0usize;
    let mut path = Vec::new();
    loop {
        let t = sample_index(rng, &probs[cur]) as u32;
        match children[cur].iter().find(|&&ch| tree.tokens[ch] == t) {
            Some(&ch) => {
                path.push(ch);
                cur = ch;
            }
            None => {
                return VerifyResult {
                    accepted_path: path,
                    bonus_token: t,
                }
            }
        }
    }
}

/// Per-run accounting. `histogram[l]` counts the calls that emitted l
/// tokens; `tau` is tokens per target call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub tokens: usize,
    pub calls: usize,
    pub tau: f64,
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub stats: GenStats,
}

#[derive(Debug, Clone)]
pub struct DecodeParams {
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub verifier: Verifier,
    pub draft: DraftStrategy,
}

fn bump(histogram: &mut Vec<usize>, emitted: usize) {
    if histogram.len() <= emitted {
        histogram.resize(emitted + 1, 0);
    }
    histogram[emitted] += 1;
}

/// Speculative decoding: draft with `draft_model`, verify with `target`.
/// Both sessions always cover everything emitted except the newest token,
/// which roots the next tree. Passing the same model twice gives
/// self-drafting.
pub fn decode(
    target: &Model,
    draft_model: &Model,
    prompt: &[u32],
    params: &DecodeParams,
) -> Result<DecodeOutput> {
    if prompt.is_empty() {
        return Err(Error::Structure("prompt must not be empty".into()));
    }
    if target.config.vocab_size != draft_model.config.vocab_size {
        return Err(Error::Structure(alloc::format!(
            "target vocab {} != draft vocab {}",
            target.config.vocab_size,
            draft_model.config.vocab_size
        )));
    }
    let mut rng = SplitMix64::new(params.seed);
    let mut target_session = target.session();
    let mut draft_session = draft_model.session();
    target.prefill(&mut target_session, &prompt[..prompt.len() - 1])?;
    draft_model.prefill(&mut draft_session, &prompt[..prompt.len() - 1])?;

    let mut root = *prompt.last().expect("non-empty");
    let mut emitted: Vec<u32> = Vec::new();
    let mut calls = 0usize;
    let mut histogram = Vec::new();

    while emitted.len() < params.max_tokens {
        let tree = match &params.draft {
            DraftStrategy::Static(shape) => {
                draft_static(draft_model, &draft_session, root, shape, params.temperature)?
            }
            DraftStrategy::Chain { depth } => draft_chain(
                draft_model,
                &draft_session,
                root,
                *depth,
                params.temperature,
                &mut rng,
            )?,
            DraftStrategy::Beam { beams, steps } => draft_beam(
                draft_model,
                &draft_session,
                root,
                *beams,
                *steps,
                params.temperature,
            )?,
        };

        let staged = target.forward_tree(&target_session, &tree)?;
        calls += 1;
        let probs: Vec<Vec<f64>> = staged
            .logits
            .iter()
            .map(|l| softmax_with_temperature(l, params.temperature))
            .collect();
        let result = verify(&tree, &probs, params.verifier, &mut rng)?;

        let mut commit_path = vec![0usize];
        commit_path.extend_from_slice(&result.accepted_path);
        target.commit_nodes(&mut target_session, &staged, &commit_path)?;
        draft_model.forward_step(&mut draft_session, root)?;
        for &node in &result.accepted_path {
            draft_model.forward_step(&mut draft_session, tree.tokens[node])?;
        }

        let mut call_emitted = 0usize;
        for &node in &result.accepted_path {
            if emitted.len() >= params.max_tokens {
                break;
            }
            emitted.push(tree.tokens[node]);
            call_emitted += 1;
        }
        if emitted.len() < params.max_tokens {
            emitted.push(result.bonus_token);
            call_emitted += 1;
        }
        bump(&mut histogram, call_emitted);
        root = *emitted.last().expect("at least one token per call");
    }

    let stats = GenStats {
        tokens: emitted.len(),
        calls,
        tau: emitted.len() as f64 / calls as f64,
        histogram,
    };
    Ok(DecodeOutput {
        tokens: emitted,
        stats,
    })
}

/// Plain sequential decoding, one target call per token. The reference
/// point both for losslessness checks and for tau comparisons.
pub fn autoregressive(
    model: &Model,
    prompt: &[u32],
    max_tokens: usize,
    temperature: f64,
    seed: u64,
) -> Result<DecodeOutput> {
    if prompt.is_empty() {
        return Err(Error::Structure("prompt must not be empty".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut session = model.session();
    model.prefill(&mut session, &prompt[..prompt.len() - 1])?;
    let mut token = *prompt.last().expect("non-empty");
    let mut emitted = Vec::with_capacity(max_tokens);
    for _ in 0..max_tokens {
        let logits = model.forward_step(&mut session, token)?;
        let probs = softmax_with_temperature(&logits, temperature);
        token = select(&mut rng, &probs, temperature) as u32;
        emitted.push(token);
    }
    let mut histogram = vec![0; 2];
    histogram[1] = emitted.len();
    let stats = GenStats {
        tokens: emitted.len(),
        calls: emitted.len(),
        tau: 1.0,
        histogram,
    };
    Ok(DecodeOutput {
        tokens: emitted,
        stats,
    })
}
