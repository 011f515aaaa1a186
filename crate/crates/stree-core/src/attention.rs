//! Single-head tree attention with a commit-on-accept KV cache.
//!
//! Speculative nodes attend every committed row plus the speculative rows
//! on their own root path, selected by the ancestor mask as an additive
//! -inf term before the softmax. Staged key/value rows only enter the
//! cache when their node is accepted, so a discarded branch leaves no
//! trace. No positional terms anywhere: ordering information reaches the
//! mixed stack through the SSM layers.

use alloc::vec;
use alloc::vec::Vec;

use crate::mat::dot;
use crate::math;
use crate::tree::TreeMask;
use crate::{Error, Result};

/// Committed key/value rows, one pair per accepted token.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub d_model: usize,
    pub capacity: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Key/value rows produced for a packed tree, held aside until the
/// verifier decides which nodes survive.
#[derive(Debug, Clone)]
pub struct StagedKv {
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(d_model: usize, capacity: usize) -> Self {
        KvCache {
            d_model,
            capacity,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Appends one committed row.
    pub fn append(&mut self, k: Vec<f64>, v: Vec<f64>) -> Result<()> {
        debug_assert_eq!(k.len(), self.d_model);
        debug_assert_eq!(v.len(), self.d_model);
        if self.keys.len() + 1 > self.capacity {
            return Err(Error::Capacity {
                needed: self.keys.len() + 1,
                capacity: self.capacity,
            });
        }
        self.keys.push(k);
        self.values.push(v);
        Ok(())
    }

    /// Appends the staged rows of the accepted nodes, in path order.
    pub fn commit(&mut self, staged: &StagedKv, nodes: &[usize]) -> Result<()> {
        let needed = self.keys.len() + nodes.len();
        if needed > self.capacity {
            return Err(Error::Capacity {
                needed,
                capacity: self.capacity,
            });
        }
        for &i in nodes {
            if i >= staged.k.len() {
                return Err(Error::Structure(alloc::format!(
                    "commit of node {i} but only {} staged rows",
                    staged.k.len()
                )));
            }
            self.keys.push(staged.k[i].clone());
            self.values.push(staged.v[i].clone());
        }
        Ok(())
    }

    /// Attention for one committed token: the row joins the cache first,
    /// then the query attends over everything, itself included.
    pub fn step(&mut self, q: &[f64], k: Vec<f64>, v: Vec<f64>) -> Result<Vec<f64>> {
        self.append(k, v)?;
        let scale = 1.0 / math::sqrt(self.d_model as f64);
        let scores: Vec<f64> = self.keys.iter().map(|key| scale * dot(q, key)).collect();
        Ok(weighted_values(&scores, &self.values, self.d_model))
    }

    /// Scores a packed tree against this cache without committing anything.
    /// Row i of the result attends the whole cache plus the staged rows on
    /// node i's root path.
    pub fn tree_attention(
        &self,
        mask: &TreeMask,
        q: &[Vec<f64>],
        staged: &StagedKv,
    ) -> Result<Vec<Vec<f64>>> {
        let n = mask.n;
        if q.len() != n || staged.k.len() != n || staged.v.len() != n {
            return Err(Error::Structure(alloc::format!(
                "tree attention over {n} nodes got {} queries, {} keys, {} values",
                q.len(),
                staged.k.len(),
                staged.v.len()
            )));
        }
        let committed = self.keys.len();
        let scale = 1.0 / math::sqrt(self.d_model as f64);
        let mut out = Vec::with_capacity(n);
        for (i, qi) in q.iter().enumerate() {
            let mut scores = Vec::with_capacity(committed + n);
            for key in &self.keys {
                scores.push(scale * dot(qi, key));
            }
            for j in 0..n {
                if mask.get(i, j) {
                    scores.push(scale * dot(qi, &staged.k[j]));
                } else {
                    scores.push(f64::NEG_INFINITY);
                }
            }
            let values = self
                .values
                .iter()
                .chain(staged.v.iter())
                .cloned()
                .collect::<Vec<_>>();
            let y = weighted_values(&scores, &values, self.d_model);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { node: i });
            }
            out.push(y);
        }
        Ok(out)
    }
}

/// Softmax the scores (ignoring -inf entries) and mix the value rows.
fn weighted_values(scores: &[f64], values: &[Vec<f64>], d_model: usize) -> Vec<f64> {
    let max = scores
        .iter()
        .fold(f64::NEG_INFINITY, |m, &s| if s > m { s } else { m });
    let mut weights = vec![0.0; scores.len()];
    let mut sum = 0.0;
    for (w, &s) in weights.iter_mut().zip(scores) {
        if s > f64::NEG_INFINITY {
            *w = math::exp(s - max);
            sum += *w;
        }
    }
    let mut out = vec![0.0; d_model];
    for (w, v) in weights.iter().zip(values) {
        if *w > 0.0 {
            let norm = *w / sum;
            for (o, x) in out.iter_mut().zip(v) {
                *o += norm * x;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::max_rel_error;
    use crate::rng::SplitMix64;
    use crate::synth::random_tree;
    use crate::tree::{build_tree_mask, PrefixTokenTree};

    fn seeded_rows(rng: &mut SplitMix64, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect()
    }

    #[test]
    fn chain_attention_matches_hand_computation() {
        let mut cache = KvCache::new(1, 16);
        cache.append(vec![1.0], vec![2.0]).unwrap();

        let tree = PrefixTokenTree::chain(&[5, 6]).unwrap();
        let mask = build_tree_mask(&tree).unwrap();
        let staged = StagedKv {
            k: vec![vec![0.2], vec![0.4]],
            v: vec![vec![10.0], vec![20.0]],
        };
        let q = vec![vec![1.0], vec![0.5]];
        let out = cache.tree_attention(&mask, &q, &staged).unwrap();
        assert!((out[0][0] - 4.4802041509791).abs() < 1e-12);
        assert!((out[1][0] - 9.754548380177074).abs() < 1e-12);
    }

    #[test]
    fn sibling_branch_does_not_see_the_other_branch() {
        let mut cache = KvCache::new(1, 16);
        cache.append(vec![1.0], vec![2.0]).unwrap();

        // 0 -> {1, 2}; node 2 must not attend node 1's row.
        let tree =
            PrefixTokenTree::new(vec![5, 6, 7], vec![None, Some(0), Some(0)]).unwrap();
        let mask = build_tree_mask(&tree).unwrap();
        let staged = StagedKv {
            k: vec![vec![0.2], vec![0.4], vec![0.3]],
            v: vec![vec![10.0], vec![20.0], vec![30.0]],
        };
        let q = vec![vec![1.0], vec![0.5], vec![-1.0]];
        let out = cache.tree_attention(&mask, &q, &staged).unwrap();
        assert!((out[2][0] - 16.160191886912177).abs() < 1e-12);
    }

    #[test]
    fn tree_rows_match_direct_attention_over_their_paths() {
        // Oracle: recompute each node's attention from its root path alone,
        // with no mask involved.
        let mut rng = SplitMix64::new(33);
        for _ in 0..25 {
            let tree = random_tree(&mut rng, 25, 64);
            let n = tree.len();
            let d = 1 + rng.below(8);
            let mut cache = KvCache::new(d, 128);
            for _ in 0..3 {
                let k: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let v: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
                cache.append(k, v).unwrap();
            }
            let q = seeded_rows(&mut rng, n, d);
            let staged = StagedKv {
                k: seeded_rows(&mut rng, n, d),
                v: seeded_rows(&mut rng, n, d),
            };
            let mask = build_tree_mask(&tree).unwrap();
            let out = cache.tree_attention(&mask, &q, &staged).unwrap();

            let scale = 1.0 / math::sqrt(d as f64);
            for i in 0..n {
                let mut scores = Vec::new();
                let mut values = Vec::new();
                for r in 0..cache.len() {
                    scores.push(scale * dot(&q[i], &cache.keys[r]));
                    values.push(cache.values[r].clone());
                }
                for t in tree.root_path(i) {
                    scores.push(scale * dot(&q[i], &staged.k[t]));
                    values.push(staged.v[t].clone());
                }
                let direct = weighted_values(&scores, &values, d);
                assert!(max_rel_error(&out[i], &direct) <= 1e-12, "node {i}");
            }
        }
    }

    #[test]
    fn chain_tree_matches_sequential_steps() {
        let mut rng = SplitMix64::new(404);
        for _ in 0..20 {
            let n = 1 + rng.below(12);
            let d = 1 + rng.below(6);
            let tokens: Vec<u32> = (0..n).map(|_| rng.below(50) as u32).collect();
            let tree = PrefixTokenTree::chain(&tokens).unwrap();
            let mask = build_tree_mask(&tree).unwrap();

            let mut packed_cache = KvCache::new(d, 64);
            let mut seq_cache = KvCache::new(d, 64);
            for _ in 0..2 {
                let k: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let v: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
                packed_cache.append(k.clone(), v.clone()).unwrap();
                seq_cache.append(k, v).unwrap();
            }

            let q = seeded_rows(&mut rng, n, d);
            let staged = StagedKv {
                k: seeded_rows(&mut rng, n, d),
                v: seeded_rows(&mut rng, n, d),
            };
            let packed = packed_cache.tree_attention(&mask, &q, &staged).unwrap();
            for i in 0..n {
                let y = seq_cache
                    .step(&q[i], staged.k[i].clone(), staged.v[i].clone())
                    .unwrap();
                assert!(max_rel_error(&packed[i], &y) <= 1e-12, "position {i}");
            }
        }
    }

    #[test]
    fn commit_appends_accepted_rows_in_order() {
        let mut cache = KvCache::new(1, 4);
        let staged = StagedKv {
            k: vec![vec![1.0], vec![2.0], vec![3.0]],
            v: vec![vec![4.0], vec![5.0], vec![6.0]],
        };
        cache.commit(&staged, &[0, 2]).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.keys, vec![vec![1.0], vec![3.0]]);
        assert_eq!(cache.values, vec![vec![4.0], vec![6.0]]);

        assert!(matches!(
            cache.commit(&staged, &[5]),
            Err(Error::Structure(_))
        ));
        cache.commit(&staged, &[0, 1]).unwrap();
        assert_eq!(
            cache.commit(&staged, &[0]),
            Err(Error::Capacity {
                needed: 5,
                capacity: 4
            })
        );
    }

    #[test]
    fn append_respects_capacity() {
        let mut cache = KvCache::new(1, 1);
        cache.append(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(
            cache.append(vec![0.0], vec![0.0]),
            Err(Error::Capacity {
                needed: 2,
                capacity: 1
            })
        );
    }

    #[test]
    fn tree_attention_rejects_row_count_mismatch() {
        let cache = KvCache::new(1, 4);
        let tree = PrefixTokenTree::chain(&[1, 2]).unwrap();
        let mask = build_tree_mask(&tree).unwrap();
        let staged = StagedKv {
            k: vec![vec![0.0]],
            v: vec![vec![0.0]],
        };
        let qs = vec![vec![0.0], vec![0.0]];
        assert!(matches!(
            cache.tree_attention(&mask, &qs, &staged),
            Err(Error::Structure(_))
        ));
    }
}
