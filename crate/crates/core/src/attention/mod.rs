//! Conjunct attention over backbone feature patches.
//!
//! Every pyramid level is folded to the base channel count, cut into `(5, 4)` patches, given
//! a learned positional embedding and passed through one multi-head self-attention block
//! without an MLP. The block's weights and the positional table are shared by all levels.
//! The tokens are then put back into a map of the level's original shape.

mod backbone;
mod tokens;

pub use backbone::{Backbone, BackboneConfig, FeaturePyramid, NUM_LEVELS};
pub use tokens::{
    count_reference_patches, fold_channels, level_patch_grids, patchify, unfold_channels,
    unpatchify, TokenSequence,
};

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub heads: usize,
    pub depth: usize,
    /// `MSA(LN(z) + z)` when true, `z + MSA(LN(z))` otherwise.
    pub residual_before_msa: bool,
    /// Largest fold factor; the positional table has `N * max_fold` rows.
    pub max_fold: usize,
    pub ln_eps: f64,
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            patch_h: 5,
            patch_w: 4,
            heads: 8,
            depth: 1,
            residual_before_msa: true,
            max_fold: 8,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
struct MsaWeights {
    ln_gamma: ParamId,
    ln_beta: ParamId,
    q: (ParamId, ParamId),
    /// No bias: it adds the same constant to every score in a softmax row.
    k: ParamId,
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
}

/// Attention weights shared across pyramid levels.
#[derive(Clone, Debug)]
pub struct ConjunctAttention {
    pub config: AttnConfig,
    pub base_channels: usize,
    pub dim: usize,
    pub pos_table: ParamId,
    pub table_len: usize,
    blocks: Vec<MsaWeights>,
}

impl ConjunctAttention {
    /// `input_dims` is the backbone input `(H, W)`; it fixes the level-0 patch count `N`.
    pub fn new(
        config: AttnConfig,
        base_channels: usize,
        input_dims: (usize, usize),
        params: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dim = base_channels * config.patch_h * config.patch_w;
        if config.heads == 0 || !dim.is_multiple_of(config.heads) {
            return Err(Error::InvalidArgument(format!(
                "token dim {dim} is not divisible by {} heads",
                config.heads
            )));
        }
        if config.depth == 0 || config.max_fold == 0 {
            return Err(Error::InvalidArgument(
                "attention depth and max_fold must be positive".into(),
            ));
        }
        let grids = level_patch_grids(input_dims, (config.patch_h, config.patch_w), 1);
        let n = grids[0].0 * grids[0].1;
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "input {input_dims:?} is smaller than one level-0 patch"
            )));
        }
        let table_len = n * config.max_fold;
        let pos_table = params.add(
            "attn.pos_table",
            Tensor::uniform(vec![table_len, dim], 0.02, rng),
        )?;
        let mut blocks = Vec::with_capacity(config.depth);
        for b in 0..config.depth {
            let weight = |params: &mut ParamStore, name: &str, rng: &mut Rng| {
                params.add_glorot(
                    format!("attn.{b}.{name}.weight"),
                    &[dim, dim],
                    dim,
                    dim,
                    rng,
                )
            };
            let bias = |params: &mut ParamStore, name: &str| {
                params.add_zeros(format!("attn.{b}.{name}.bias"), &[dim])
            };
            let q = (weight(params, "q", rng)?, bias(params, "q")?);
            let k = weight(params, "k", rng)?;
            let v = (weight(params, "v", rng)?, bias(params, "v")?);
            let o = (weight(params, "o", rng)?, bias(params, "o")?);
            let ln_gamma =
                params.add(format!("attn.{b}.ln.gamma"), Tensor::full(vec![dim], 1.0))?;
            let ln_beta = params.add_zeros(format!("attn.{b}.ln.beta"), &[dim])?;
            blocks.push(MsaWeights {
                ln_gamma,
                ln_beta,
                q,
                k,
                v,
                o,
            });
        }
        Ok(ConjunctAttention {
            config,
            base_channels,
            dim,
            pos_table,
            table_len,
            blocks,
        })
    }

    /// Output projection of every block, for tests and ablations.
    pub fn output_projections(&self) -> Vec<(ParamId, ParamId)> {
        self.blocks.iter().map(|b| b.o).collect()
    }

    /// `tokens[i] += table[i]` for the first `T` rows of the table.
    pub fn add_positional_graph(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        tokens: NodeId,
    ) -> Result<NodeId> {
        let (t, _) = g.value(tokens).dims2("add_positional")?;
        if t > self.table_len {
            return Err(Error::shape(
                "add_positional",
                format!(
                    "{t} tokens exceed the {}-row positional table",
                    self.table_len
                ),
            ));
        }
        let table = g.param(params, self.pos_table);
        let prefix = g.slice_rows(table, 0, t)?;
        g.add(tokens, prefix)
    }

    /// Runs every attention block on `(T, D)` tokens. Per-head attention matrices are pushed
    /// to `attn` when given.
    pub fn msa_graph(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        mut z: NodeId,
        mut attn: Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        let (t, d) = g.value(z).dims2("msa_block")?;
        if d != self.dim {
            return Err(Error::shape(
                "msa_block",
                format!("token dim {d}, expected {}", self.dim),
            ));
        }
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for blk in &self.blocks {
            let gamma = g.param(params, blk.ln_gamma);
            let beta = g.param(params, blk.ln_beta);
            let ln = g.layer_norm(z, gamma, beta, self.config.ln_eps)?;
            let u = if self.config.residual_before_msa {
                g.add(ln, z)?
            } else {
                ln
            };
            let proj = |g: &mut Graph, (w, b): (ParamId, ParamId)| {
                let wn = g.param(params, w);
                let bn = g.param(params, b);
                g.linear(u, wn, Some(bn))
            };
            let q = proj(g, blk.q)?;
            let wk = g.param(params, blk.k);
            let k = g.linear(u, wk, None)?;
            let v = proj(g, blk.v)?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let map: Rc<[usize]> = (0..t)
                    .flat_map(|row| (0..dh).map(move |j| row * d + h * dh + j))
                    .collect();
                let qh = g.gather(q, map.clone(), vec![t, dh])?;
                let kh = g.gather(k, map.clone(), vec![t, dh])?;
                let vh = g.gather(v, map, vec![t, dh])?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let a = g.softmax(scores, 1)?;
                if let Some(list) = attn.as_deref_mut() {
                    list.push(a);
                }
                outs.push(g.matmul(a, vh)?);
            }
            let cat = g.concat_cols(&outs)?;
            let (wo, bo) = (g.param(params, blk.o.0), g.param(params, blk.o.1));
            let o = g.linear(cat, wo, Some(bo))?;
            z = if self.config.residual_before_msa {
                o
            } else {
                g.add(z, o)?
            };
        }
        Ok(z)
    }

    /// Index maps taking a level map to tokens and back.
    fn level_maps(
        &self,
        shape: &[usize],
        level: usize,
    ) -> Result<(Rc<[usize]>, Vec<usize>, Rc<[usize]>)> {
        let (c, h, w) = match *shape {
            [1, c, h, w] => (c, h, w),
            ref s => {
                return Err(Error::shape(
                    "conjunct_attention",
                    format!("level {level}: expected (1, C, H, W), got {s:?}"),
                ))
            }
        };
        let base = self.base_channels;
        if c % base != 0 {
            return Err(Error::shape(
                "conjunct_attention",
                format!("level {level}: {c} channels are not a multiple of {base}"),
            ));
        }
        let k = c / base;
        let patch = (self.config.patch_h, self.config.patch_w);
        let (fwd, tok_shape) = Tensor::index_map(shape, |t| {
            let folded = fold_channels(t, base)?;
            Ok(patchify(&folded, patch, level, k)?.tokens)
        })?;
        let (inv, _) = Tensor::index_map(&tok_shape, |t| {
            let folded = unpatchify(t, (base, k * h, w), patch)?;
            unfold_channels(&folded, k)?.reshape(vec![1, c, h, w])
        })?;
        Ok((fwd.into(), tok_shape, inv.into()))
    }

    /// fold, patchify, add positions, attend, unpatchify and unfold each level.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        levels: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(levels.len());
        for (l, &x) in levels.iter().enumerate() {
            let shape = g.shape(x).to_vec();
            let (fwd, tok_shape, inv) = self.level_maps(&shape, l)?;
            let tokens = g.gather(x, fwd, tok_shape)?;
            let z = self.add_positional_graph(g, params, tokens)?;
            let z = self.msa_graph(g, params, z, None)?;
            out.push(g.gather(z, inv, shape)?);
        }
        Ok(out)
    }

    pub fn forward(&self, params: &ParamStore, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = pyr.levels.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward_graph(&mut g, params, &nodes)?;
        Ok(FeaturePyramid {
            levels: out.into_iter().map(|n| g.value(n).clone()).collect(),
        })
    }
}

/// Adds the first `T` rows of `table` to the tokens.
pub fn add_positional(
    seq: &TokenSequence,
    attn: &ConjunctAttention,
    params: &ParamStore,
) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let x = g.constant(seq.tokens.clone());
    let z = attn.add_positional_graph(&mut g, params, x)?;
    Ok(TokenSequence {
        tokens: g.value(z).clone(),
        ..seq.clone()
    })
}

pub fn msa_block(
    seq: &TokenSequence,
    attn: &ConjunctAttention,
    params: &ParamStore,
) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let x = g.constant(seq.tokens.clone());
    let z = attn.msa_graph(&mut g, params, x, None)?;
    Ok(TokenSequence {
        tokens: g.value(z).clone(),
        ..seq.clone()
    })
}

pub fn conjunct_attention(
    pyr: &FeaturePyramid,
    attn: &ConjunctAttention,
    params: &ParamStore,
) -> Result<FeaturePyramid> {
    attn.forward(params, pyr)
}
