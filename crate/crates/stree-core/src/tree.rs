//! Prefix token trees packed into a single sequence, plus the binary
//! ancestor mask that lets one forward pass score every branch at once.
//!
//! Nodes are stored in topological order: index 0 is the root and every
//! other node's parent precedes it. Packing order is exactly node order,
//! so "packed position" and "node index" are the same thing throughout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A token tree whose root extends an already-committed prefix.
///
/// `draft_probs[i]`, when present, is the draft model's post-temperature
/// distribution over the next token *at* node i; verifiers use it to score
/// the children of i. Trees built by hand carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixTokenTree {
    pub tokens: Vec<u32>,
    pub parent: Vec<Option<usize>>,
    pub draft_probs: Vec<Option<Vec<f64>>>,
}

impl PrefixTokenTree {
    /// Validates and wraps a (tokens, parents) pair.
    pub fn new(tokens: Vec<u32>, parent: Vec<Option<usize>>) -> Result<Self> {
        let n = tokens.len();
        let tree = PrefixTokenTree {
            tokens,
            parent,
            draft_probs: vec![None; n],
        };
        tree.validate()?;
        Ok(tree)
    }

    /// Single-node tree: just the root token.
    pub fn single(token: u32) -> Self {
        PrefixTokenTree {
            tokens: vec![token],
            parent: vec![None],
            draft_probs: vec![None],
        }
    }

    /// Degenerate tree: a chain, i.e. an ordinary sequence.
    pub fn chain(tokens: &[u32]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Structure("chain needs at least one token".into()));
        }
        let parent = (0..tokens.len())
            .map(|i| if i == 0 { None } else { Some(i - 1) })
            .collect();
        PrefixTokenTree::new(tokens.to_vec(), parent)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks topological order: node 0 is the only root and every other
    /// node points at an earlier node.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Structure("empty tree".into()));
        }
        if self.parent.len() != n {
            return Err(Error::Structure(format!(
                "{} tokens but {} parent entries",
                n,
                self.parent.len()
            )));
        }
        if self.draft_probs.len() != n {
            return Err(Error::Structure(format!(
                "{} tokens but {} draft_probs entries",
                n,
                self.draft_probs.len()
            )));
        }
        if self.parent[0].is_some() {
            return Err(Error::Structure("node 0 must be the root".into()));
        }
        for (i, p) in self.parent.iter().enumerate().skip(1) {
            match p {
                None => {
                    return Err(Error::Structure(format!("node {i} is a second root")));
                }
                Some(j) if *j >= i => {
                    return Err(Error::Structure(format!(
                        "node {i} points at parent {j}, breaking topological order"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Children of each node, ascending within each list.
    pub fn children_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.len()];
        for (i, p) in self.parent.iter().enumerate() {
            if let Some(j) = p {
                lists[*j].push(i);
            }
        }
        lists
    }

    /// Node indices from the root down to `i`, inclusive.
    pub fn root_path(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = i;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Number of nodes on the root path of each node (root itself counts 1).
    pub fn node_depths(&self) -> Vec<usize> {
        let mut depths = vec![0usize; self.len()];
        depths[0] = 1;
        for i in 1..self.len() {
            depths[i] = depths[self.parent[i].expect("validated tree")] + 1;
        }
        depths
    }
}

/// Dense binary ancestor mask: `get(i, j)` is true iff node j lies on the
/// root-to-i path (including i itself). Rows follow packing order, so for a
/// chain this is exactly the causal lower-triangular mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMask {
    pub n: usize,
    bits: Vec<u8>,
}

impl TreeMask {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j] != 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }
}

/// Builds the ancestor mask by OR-ing each node's bit into its parent row.
pub fn build_tree_mask(tree: &PrefixTokenTree) -> Result<TreeMask> {
    tree.validate()?;
    let n = tree.len();
    let mut bits = vec![0u8; n * n];
    bits[0] = 1;
    for i in 1..n {
        let p = tree.parent[i].expect("validated tree");
        let (head, tail) = bits.split_at_mut(i * n);
        tail[..n].copy_from_slice(&head[p * n..p * n + n]);
        tail[i] = 1;
    }
    Ok(TreeMask { n, bits })
}

/// Token accounting for one tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeStats {
    /// Tokens scored by a packed pass: one per node.
    pub packed_tokens: usize,
    /// Tokens scored when each root-to-leaf path runs as its own sequence.
    pub unrolled_tokens: usize,
    /// Nodes on the longest root-to-leaf path.
    pub depth: usize,
    pub leaves: usize,
}

/// Counts packed vs unrolled work. `unrolled_tokens` is the sum of
/// root-to-leaf path lengths, i.e. one independent sequence per leaf.
pub fn tree_stats(tree: &PrefixTokenTree) -> TreeStats {
    let depths = tree.node_depths();
    let children = tree.children_lists();
    let mut unrolled = 0;
    let mut leaves = 0;
    let mut depth = 0;
    for i in 0..tree.len() {
        if children[i].is_empty() {
            leaves += 1;
            unrolled += depths[i];
        }
        if depths[i] > depth {
            depth = depths[i];
        }
    }
    TreeStats {
        packed_tokens: tree.len(),
        unrolled_tokens: unrolled,
        depth,
        leaves,
    }
}

/// Expands the tree into independent root-to-leaf node paths, leaves in
/// node order. This is the sequence set the unrolled baseline would run.
pub fn unroll(tree: &PrefixTokenTree) -> Vec<Vec<usize>> {
    let children = tree.children_lists();
    (0..tree.len())
        .filter(|&i| children[i].is_empty())
        .map(|leaf| tree.root_path(leaf))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_node_tree() -> PrefixTokenTree {
        // 0 -> {1, 2}, 1 -> {3}
        PrefixTokenTree::new(vec![10, 11, 12, 13], vec![None, Some(0), Some(0), Some(1)])
            .unwrap()
    }

    #[test]
    fn mask_rows_match_hand_derivation() {
        let mask = build_tree_mask(&four_node_tree()).unwrap();
        assert_eq!(mask.row(0), &[1, 0, 0, 0]);
        assert_eq!(mask.row(1), &[1, 1, 0, 0]);
        assert_eq!(mask.row(2), &[1, 0, 1, 0]);
        assert_eq!(mask.row(3), &[1, 1, 0, 1]);
    }

    #[test]
    fn chain_mask_is_causal() {
        let tree = PrefixTokenTree::chain(&[1, 2, 3, 4, 5]).unwrap();
        let mask = build_tree_mask(&tree).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(mask.get(i, j), j <= i, "({i},{j})");
            }
        }
    }

    #[test]
    fn mask_row_extends_parent_row() {
        let tree = four_node_tree();
        let mask = build_tree_mask(&tree).unwrap();
        for i in 1..tree.len() {
            let p = tree.parent[i].unwrap();
            for j in 0..tree.len() {
                let expect = mask.get(p, j) || j == i;
                assert_eq!(mask.get(i, j), expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn stats_count_paths_per_leaf() {
        let stats = tree_stats(&four_node_tree());
        // Leaves are 2 (depth 2) and 3 (depth 3).
        assert_eq!(stats.packed_tokens, 4);
        assert_eq!(stats.unrolled_tokens, 5);
        assert_eq!(stats.depth, 3);
        assert_eq!(stats.leaves, 2);
    }

    #[test]
    fn single_node_stats() {
        let stats = tree_stats(&PrefixTokenTree::single(7));
        assert_eq!(stats.packed_tokens, 1);
        assert_eq!(stats.unrolled_tokens, 1);
        assert_eq!(stats.depth, 1);
        assert_eq!(stats.leaves, 1);
    }

    #[test]
    fn unroll_lists_root_to_leaf_paths() {
        let paths = unroll(&four_node_tree());
        assert_eq!(paths, vec![vec![0, 2], vec![0, 1, 3]]);
        let total: usize = paths.iter().map(|p| p.len()).sum();
        assert_eq!(total, tree_stats(&four_node_tree()).unrolled_tokens);
    }

    #[test]
    fn children_and_root_paths() {
        let tree = four_node_tree();
        assert_eq!(
            tree.children_lists(),
            vec![vec![1, 2], vec![3], vec![], vec![]]
        );
        assert_eq!(tree.root_path(3), vec![0, 1, 3]);
        assert_eq!(tree.root_path(2), vec![0, 2]);
        assert_eq!(tree.root_path(0), vec![0]);
        assert_eq!(tree.node_depths(), vec![1, 2, 2, 3]);
    }

    #[test]
    fn rejects_malformed_trees() {
        let err = PrefixTokenTree::new(vec![1, 2], vec![Some(1), Some(0)]).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));

        let err = PrefixTokenTree::new(vec![1, 2], vec![None, None]).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));

        let err =
            PrefixTokenTree::new(vec![1, 2, 3], vec![None, Some(2), Some(1)]).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));

        let err = PrefixTokenTree::new(vec![], vec![]).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));

        let err = PrefixTokenTree::new(vec![1], vec![None, Some(0)]).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn chain_of_one_is_single() {
        let tree = PrefixTokenTree::chain(&[9]).unwrap();
        assert_eq!(tree, PrefixTokenTree::single(9));
        assert!(PrefixTokenTree::chain(&[]).is_err());
    }
}
