//! Diagonal selective state-space kernels over packed token trees.
//!
//! The recurrence per token is
//!
//! ```text
//! h' = exp(a_log) (x) h + b (x) u      (row-wise decay, rank-1 input)
//! y  = c^T h' + d_skip (.) u
//! ```
//!
//! with per-token vectors `a_log < 0`, `b`, `c` of length d_state and state
//! `h` of shape d_state x d_model. Because the decay is diagonal, the
//! product of transition matrices along any root path collapses into a sum
//! of log-decays. Summing those per node through the ancestor mask gives
//! `a_tree`, and one pass over the packed tree reproduces what a separate
//! sequential run per branch would compute.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tree::{PrefixTokenTree, TreeMask};
use crate::{Error, Result};

/// Recurrent state: d_state rows of d_model, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    pub d_state: usize,
    pub d_model: usize,
    pub h: Vec<f64>,
}

impl SsmState {
    pub fn zeros(d_state: usize, d_model: usize) -> Self {
        SsmState {
            d_state,
            d_model,
            h: vec![0.0; d_state * d_model],
        }
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.h[s * self.d_model..(s + 1) * self.d_model]
    }
}

/// Advances the state by one token and returns the output vector.
pub fn sequential_step(
    state: &mut SsmState,
    a_log: &[f64],
    b: &[f64],
    c: &[f64],
    u: &[f64],
    d_skip: &[f64],
) -> Vec<f64> {
    let (d_state, d_model) = (state.d_state, state.d_model);
    debug_assert_eq!(a_log.len(), d_state);
    debug_assert_eq!(b.len(), d_state);
    debug_assert_eq!(c.len(), d_state);
    debug_assert_eq!(u.len(), d_model);
    debug_assert_eq!(d_skip.len(), d_model);

    let mut y = vec![0.0; d_model];
    for s in 0..d_state {
        let decay = math::exp(a_log[s]);
        let row = &mut state.h[s * d_model..(s + 1) * d_model];
        for (m, hv) in row.iter_mut().enumerate() {
            *hv = decay * *hv + b[s] * u[m];
            y[m] += c[s] * *hv;
        }
    }
    for m in 0..d_model {
        y[m] += d_skip[m] * u[m];
    }
    y
}

/// Log-decay accumulated along each node's root path: row i of the mask
/// times the stack of per-node `a_log` vectors.
pub fn accumulate_a_tree(mask: &TreeMask, a_log: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = mask.n;
    debug_assert_eq!(a_log.len(), n);
    let d_state = a_log.first().map_or(0, |v| v.len());
    let mut a_tree = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = vec![0.0; d_state];
        for (j, &on) in mask.row(i).iter().enumerate() {
            if on != 0 {
                for (s, v) in acc.iter_mut().enumerate() {
                    *v += a_log[j][s];
                }
            }
        }
        a_tree.push(acc);
    }
    a_tree
}

/// Everything the scan leaves behind that state restoration needs: the
/// factored per-node inputs rather than their outer products.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub mask: TreeMask,
    pub a_tree: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub x0: SsmState,
}

impl ActivationCache {
    /// Rebuilds the state after accepting `path` without rerunning the
    /// model. `path` must be the complete root path of its last node; the
    /// closed form
    ///
    /// ```text
    /// x* = exp(a_tree[k]) (x) x0 + sum_t exp(a_tree[k] - a_tree[t]) (x) (b_t (x) u_t)
    /// ```
    ///
    /// only equals the sequential walk under that condition, so anything
    /// else is rejected. An empty path returns `x0` unchanged.
    pub fn replay(&self, path: &[usize]) -> Result<SsmState> {
        let Some(&k) = path.last() else {
            return Ok(self.x0.clone());
        };
        let n = self.mask.n;
        for &t in path {
            if t >= n {
                return Err(Error::Structure(alloc::format!(
                    "replay node {t} outside tree of {n} nodes"
                )));
            }
        }
        let expected: usize = self.mask.row(k).iter().map(|&b| b as usize).sum();
        if path.len() != expected || path.iter().any(|&t| !self.mask.get(k, t)) {
            return Err(Error::Structure(alloc::format!(
                "replay path is not the root path of node {k}"
            )));
        }

        let (d_state, d_model) = (self.x0.d_state, self.x0.d_model);
        let mut out = SsmState::zeros(d_state, d_model);
        for s in 0..d_state {
            let base = math::exp(self.a_tree[k][s]);
            let row = &mut out.h[s * d_model..(s + 1) * d_model];
            for (m, v) in row.iter_mut().enumerate() {
                *v = base * self.x0.h[s * d_model + m];
            }
            for &t in path {
                let w = math::exp(self.a_tree[k][s] - self.a_tree[t][s]) * self.b[t][s];
                for (m, v) in row.iter_mut().enumerate() {
                    *v += w * self.u[t][m];
                }
            }
        }
        Ok(out)
    }
}

/// Packed scan result: per-node outputs plus the replay cache.
#[derive(Debug, Clone)]
pub struct TreeScan {
    pub y: Vec<Vec<f64>>,
    pub cache: ActivationCache,
}

/// Scores every node of a packed tree in one pass.
///
/// For node i with accumulated decay `A_i = a_tree[i]`,
///
/// ```text
/// y_i = c_i . (exp(A_i) (x) x0) + sum_{j on path(i)} (c_i . (exp(A_i - A_j) (x) b_j)) u_j
///       + d_skip (.) u_i
/// ```
///
/// where the path includes i itself (`exp(0) = 1` recovers the fresh
/// `b_i (x) u_i` term). Matches `sequential_step` run along each root path.
pub fn tree_scan(
    mask: &TreeMask,
    a_log: &[Vec<f64>],
    b: &[Vec<f64>],
    c: &[Vec<f64>],
    u: &[Vec<f64>],
    x0: &SsmState,
    d_skip: &[f64],
) -> Result<TreeScan> {
    let n = mask.n;
    let (d_state, d_model) = (x0.d_state, x0.d_model);
    check_lengths("a_log", a_log, n, d_state)?;
    check_lengths("b", b, n, d_state)?;
    check_lengths("c", c, n, d_state)?;
    check_lengths("u", u, n, d_model)?;
    if d_skip.len() != d_model {
        return Err(Error::Structure(alloc::format!(
            "d_skip has {} entries, expected {d_model}",
            d_skip.len()
        )));
    }

    let a_tree = accumulate_a_tree(mask, a_log);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut out = vec![0.0; d_model];
        for s in 0..d_state {
            // State carried in from before the tree.
            let carry = c[i][s] * math::exp(a_tree[i][s]);
            let x0_row = x0.row(s);
            for (m, o) in out.iter_mut().enumerate() {
                *o += carry * x0_row[m];
            }
            // Inputs injected along the root path, decayed by the gap.
            for (j, &on) in mask.row(i).iter().enumerate() {
                if on != 0 {
                    let g = c[i][s] * math::exp(a_tree[i][s] - a_tree[j][s]) * b[j][s];
                    for (m, o) in out.iter_mut().enumerate() {
                        *o += g * u[j][m];
                    }
                }
            }
        }
        for m in 0..d_model {
            out[m] += d_skip[m] * u[i][m];
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node: i });
        }
        y.push(out);
    }

    Ok(TreeScan {
        y,
        cache: ActivationCache {
            mask: mask.clone(),
            a_tree,
            b: b.to_vec(),
            u: u.to_vec(),
            x0: x0.clone(),
        },
    })
}

/// Reference implementation: reruns the recurrence from `x0` along every
/// node's root path independently. Quadratic in tree size, but free of any
/// mask algebra, which is the point.
pub fn unrolled_scan(
    tree: &PrefixTokenTree,
    a_log: &[Vec<f64>],
    b: &[Vec<f64>],
    c: &[Vec<f64>],
    u: &[Vec<f64>],
    x0: &SsmState,
    d_skip: &[f64],
) -> Vec<Vec<f64>> {
    let mut y = Vec::with_capacity(tree.len());
    for i in 0..tree.len() {
        let mut state = x0.clone();
        let mut last = vec![0.0; x0.d_model];
        for t in tree.root_path(i) {
            last = sequential_step(&mut state, &a_log[t], &b[t], &c[t], &u[t], d_skip);
        }
        y.push(last);
    }
    y
}

fn check_lengths(name: &str, rows: &[Vec<f64>], n: usize, width: usize) -> Result<()> {
    if rows.len() != n {
        return Err(Error::Structure(alloc::format!(
            "{name} has {} rows, expected {n}",
            rows.len()
        )));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Structure(alloc::format!(
                "{name}[{i}] has {} entries, expected {width}",
                row.len()
            )));
        }
    }
    Ok(())
}
