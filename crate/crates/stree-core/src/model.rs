//! A small pre-norm residual language model mixing diagonal SSM layers
//! with tree-masked attention layers, sized for CPU experiments.
//!
//! The model itself is immutable after init; all inference state lives in
//! a `Session` (one recurrent state or KV cache per layer). A packed tree
//! pass never touches the session: it returns staged per-layer data, and
//! `commit_nodes` folds the accepted path back in, by activation replay
//! for SSM layers and by appending staged rows for attention layers.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::attention::{KvCache, StagedKv};
use crate::mat::Mat;
use crate::math;
use crate::rng::SplitMix64;
use crate::ssm::{self, ActivationCache, SsmState};
use crate::tree::{build_tree_mask, PrefixTokenTree};
use crate::{Error, Result};

pub const RMS_EPS: f64 = 1e-5;
pub const DEFAULT_KV_CAPACITY: usize = 4096;

/// Model shape and init seed. `attn_layers` lists the layer indices that
/// use attention; everything else is an SSM layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub n_layers: usize,
    #[serde(default)]
    pub attn_layers: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SsmLayerParams {
    pub w_a: Mat,
    pub w_b: Mat,
    pub w_c: Mat,
    pub d_skip: Vec<f64>,
    pub w_out: Mat,
}

#[derive(Debug, Clone)]
pub struct AttnLayerParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

#[derive(Debug, Clone)]
pub enum LayerParams {
    Ssm(SsmLayerParams),
    Attn(AttnLayerParams),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Mat,
    pub layers: Vec<LayerParams>,
    pub lm_head: Mat,
}

/// Per-layer inference state.
#[derive(Debug, Clone)]
pub enum LayerState {
    Ssm(SsmState),
    Attn(KvCache),
}

/// Mutable decoding state: everything the committed prefix determines.
#[derive(Debug, Clone)]
pub struct Session {
    pub states: Vec<LayerState>,
}

/// Result of a packed tree pass: per-node logits plus whatever each layer
/// needs to commit an accepted path later.
#[derive(Debug, Clone)]
pub struct StagedForward {
    pub logits: Vec<Vec<f64>>,
    pub layers: Vec<StagedLayer>,
}

#[derive(Debug, Clone)]
pub enum StagedLayer {
    Ssm(ActivationCache),
    Attn(StagedKv),
}

fn rand_mat(rng: &mut SplitMix64, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.uniform(-0.05, 0.05))
}

fn rand_vec(rng: &mut SplitMix64, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.uniform(-0.05, 0.05)).collect()
}

impl Model {
    /// Initializes all weights from `config.seed`, uniform in (-0.05, 0.05),
    /// drawn in a fixed order: embedding, then each layer's matrices
    /// (SSM: w_a, w_b, w_c, d_skip, w_out; attention: w_q, w_k, w_v, w_o),
    /// then the LM head. The order is part of the reproducibility contract.
    pub fn init(config: ModelConfig) -> Result<Model> {
        if config.vocab_size < 2 {
            return Err(Error::Structure("vocab_size must be at least 2".into()));
        }
        if config.d_model == 0 || config.d_state == 0 || config.n_layers == 0 {
            return Err(Error::Structure(
                "d_model, d_state and n_layers must be positive".into(),
            ));
        }
        if let Some(&bad) = config.attn_layers.iter().find(|&&i| i >= config.n_layers) {
            return Err(Error::Structure(alloc::format!(
                "attn layer index {bad} out of range for {} layers",
                config.n_layers
            )));
        }

        let mut rng = SplitMix64::new(config.seed);
        let embed = rand_mat(&mut rng, config.vocab_size, config.d_model);
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            if config.attn_layers.contains(&i) {
                layers.push(LayerParams::Attn(AttnLayerParams {
                    w_q: rand_mat(&mut rng, config.d_model, config.d_model),
                    w_k: rand_mat(&mut rng, config.d_model, config.d_model),
                    w_v: rand_mat(&mut rng, config.d_model, config.d_model),
                    w_o: rand_mat(&mut rng, config.d_model, config.d_model),
                }));
            } else {
                layers.push(LayerParams::Ssm(SsmLayerParams {
                    w_a: rand_mat(&mut rng, config.d_state, config.d_model),
                    w_b: rand_mat(&mut rng, config.d_state, config.d_model),
                    w_c: rand_mat(&mut rng, config.d_state, config.d_model),
                    d_skip: rand_vec(&mut rng, config.d_model),
                    w_out: rand_mat(&mut rng, config.d_model, config.d_model),
                }));
            }
        }
        let lm_head = rand_mat(&mut rng, config.vocab_size, config.d_model);
        Ok(Model {
            config,
            embed,
            layers,
            lm_head,
        })
    }

    pub fn session(&self) -> Session {
        self.session_with_capacity(DEFAULT_KV_CAPACITY)
    }

    pub fn session_with_capacity(&self, kv_capacity: usize) -> Session {
        let states = self
            .layers
            .iter()
            .map(|layer| match layer {
                LayerParams::Ssm(_) => {
                    LayerState::Ssm(SsmState::zeros(self.config.d_state, self.config.d_model))
                }
                LayerParams::Attn(_) => {
                    LayerState::Attn(KvCache::new(self.config.d_model, kv_capacity))
                }
            })
            .collect();
        Session { states }
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if (token as usize) < self.config.vocab_size {
            Ok(())
        } else {
            Err(Error::Structure(alloc::format!(
                "token {token} outside vocab of {}",
                self.config.vocab_size
            )))
        }
    }

    /// SSM kernel projections for one normalized input.
    fn ssm_kernel(p: &SsmLayerParams, u: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut a_log = p.w_a.matvec(u);
        for a in a_log.iter_mut() {
            *a = -math::softplus(*a);
        }
        (a_log, p.w_b.matvec(u), p.w_c.matvec(u))
    }

    /// Advances the session by one committed token and returns the logits.
    pub fn forward_step(&self, session: &mut Session, token: u32) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let mut x = self.embed.row(token as usize).to_vec();
        for (layer, state) in self.layers.iter().zip(session.states.iter_mut()) {
            let u = math::rms_norm(&x, RMS_EPS);
            let o = match (layer, state) {
                (LayerParams::Ssm(p), LayerState::Ssm(h)) => {
                    let (a_log, b, c) = Self::ssm_kernel(p, &u);
                    let y = ssm::sequential_step(h, &a_log, &b, &c, &u, &p.d_skip);
                    p.w_out.matvec(&y)
                }
                (LayerParams::Attn(p), LayerState::Attn(cache)) => {
                    let q = p.w_q.matvec(&u);
                    let k = p.w_k.matvec(&u);
                    let v = p.w_v.matvec(&u);
                    let y = cache.step(&q, k, v)?;
                    p.w_o.matvec(&y)
                }
                _ => {
                    return Err(Error::Structure(
                        "session layout does not match model".into(),
                    ))
                }
            };
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }
        }
        let final_u = math::rms_norm(&x, RMS_EPS);
        Ok(self.lm_head.matvec(&final_u))
    }

    /// Runs `forward_step` over a token slice, collecting per-token logits.
    pub fn prefill(&self, session: &mut Session, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let mut logits = Vec::with_capacity(tokens.len());
        for &t in tokens {
            logits.push(self.forward_step(session, t)?);
        }
        Ok(logits)
    }

    /// Scores a packed token tree against the committed session state
    /// without mutating it. Per-node logits come back along with the staged
    /// layer data a later `commit_nodes` needs.
    pub fn forward_tree(
        &self,
        session: &Session,
        tree: &PrefixTokenTree,
    ) -> Result<StagedForward> {
        for &t in &tree.tokens {
            self.check_token(t)?;
        }
        let mask = build_tree_mask(tree)?;
        let n = tree.len();
        let mut xs: Vec<Vec<f64>> = tree
            .tokens
            .iter()
            .map(|&t| self.embed.row(t as usize).to_vec())
            .collect();

        let mut staged_layers = Vec::with_capacity(self.layers.len());
        for (layer, state) in self.layers.iter().zip(&session.states) {
            let us: Vec<Vec<f64>> = xs.iter().map(|x| math::rms_norm(x, RMS_EPS)).collect();
            match (layer, state) {
                (LayerParams::Ssm(p), LayerState::Ssm(h)) => {
                    let mut a_log = Vec::with_capacity(n);
                    let mut b = Vec::with_capacity(n);
                    let mut c = Vec::with_capacity(n);
                    for u in &us {
                        let (ai, bi, ci) = Self::ssm_kernel(p, u);
                        a_log.push(ai);
                        b.push(bi);
                        c.push(ci);
                    }
                    let scan = ssm::tree_scan(&mask, &a_log, &b, &c, &us, h, &p.d_skip)?;
                    for (x, y) in xs.iter_mut().zip(&scan.y) {
                        let o = p.w_out.matvec(y);
                        for (xv, ov) in x.iter_mut().zip(&o) {
                            *xv += ov;
                        }
                    }
                    staged_layers.push(StagedLayer::Ssm(scan.cache));
                }
                (LayerParams::Attn(p), LayerState::Attn(cache)) => {
                    let qs: Vec<Vec<f64>> = us.iter().map(|u| p.w_q.matvec(u)).collect();
                    let staged = StagedKv {
                        k: us.iter().map(|u| p.w_k.matvec(u)).collect(),
                        v: us.iter().map(|u| p.w_v.matvec(u)).collect(),
                    };
                    let ys = cache.tree_attention(&mask, &qs, &staged)?;
                    for (x, y) in xs.iter_mut().zip(&ys) {
                        let o = p.w_o.matvec(y);
                        for (xv, ov) in x.iter_mut().zip(&o) {
                            *xv += ov;
                        }
                    }
                    staged_layers.push(StagedLayer::Attn(staged));
                }
                _ => {
                    return Err(Error::Structure(
                        "session layout does not match model".into(),
                    ))
                }
            }
        }

        let logits = xs
            .iter()
            .map(|x| self.lm_head.matvec(&math::rms_norm(x, RMS_EPS)))
            .collect();
        Ok(StagedForward {
            logits,
            layers: staged_layers,
        })
    }

    /// Commits an accepted root path into the session: SSM layers restore
    /// their state by activation replay, attention layers append the staged
    /// rows of the accepted nodes.
    pub fn commit_nodes(
        &self,
        session: &mut Session,
        staged: &StagedForward,
        path: &[usize],
    ) -> Result<()> {
        if staged.layers.len() != session.states.len() {
            return Err(Error::Structure(
                "staged forward does not match session".into(),
            ));
        }
        for (staged_layer, state) in staged.layers.iter().zip(session.states.iter_mut()) {
            match (staged_layer, state) {
                (StagedLayer::Ssm(cache), LayerState::Ssm(h)) => {
                    *h = cache.replay(path)?;
                }
                (StagedLayer::Attn(kv), LayerState::Attn(cache)) => {
                    cache.commit(kv, path)?;
                }
                _ => {
                    return Err(Error::Structure(
                        "staged layer kind does not match session".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}
