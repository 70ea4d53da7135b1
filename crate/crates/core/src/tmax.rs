//! Masked metadata cross-attention.
//!
//! Spatial patch tokens `Q: [N, D]` attend over the four modality tokens
//! `K, V: [4, D]` produced by [`crate::metadata::MetadataEncoder`]:
//!
//! ```text
//! S = Q K^T / sqrt(D)
//! A = softmax_rows(S + M)        M[:, j] = -inf if modality j is missing
//! E = Q + A V
//! out = LN(E) + FFN(LN(E))
//! ```
//!
//! Missing modalities get attention weight exactly `0.0`, so their keys and
//! values cannot influence the output. Cost of `S` and `A V` is `O(N * 4)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::{ModalityMask, N_MODALITIES};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmaxConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_modalities: usize,
    pub ffn_hidden: usize,
    pub n_layers: usize,
}

impl Default for TmaxConfig {
    fn default() -> Self {
        Self::with_dim(16)
    }
}

impl TmaxConfig {
    /// Patch size 4, one layer, FFN width `4 * embed_dim`.
    pub fn with_dim(embed_dim: usize) -> Self {
        Self {
            patch_size: 4,
            embed_dim,
            n_modalities: N_MODALITIES,
            ffn_hidden: 4 * embed_dim,
            n_layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tmax.patch_size", self.patch_size),
            ("tmax.embed_dim", self.embed_dim),
            ("tmax.ffn_hidden", self.ffn_hidden),
            ("tmax.n_layers", self.n_layers),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.n_modalities != N_MODALITIES {
            return Err(Error::config(
                "tmax.n_modalities",
                format!("the modality dictionary has exactly {N_MODALITIES} entries"),
            ));
        }
        Ok(())
    }

    /// Token grid for a volume of the given extent.
    pub fn grid_for(&self, extent: [usize; 3]) -> Result<[usize; 3]> {
        let p = self.patch_size;
        if extent.iter().any(|&e| e == 0 || e % p != 0) {
            return Err(Error::dim(
                "tokenize",
                format!("extent {extent:?} is not divisible by patch size {p}"),
            ));
        }
        Ok(extent.map(|e| e / p))
    }
}

/// Tokens of a volume, with the grid they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid_extent: [usize; 3],
    pub positional: Tensor,
}

impl TokenGrid {
    pub fn n_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }
}

/// Patch projection (a stride-`p` convolution) plus a learned positional
/// embedding per token.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    pub weight: ParamId,
    pub bias: ParamId,
    pub positional: ParamId,
    in_channels: usize,
    grid: [usize; 3],
    cfg: TmaxConfig,
}

impl PatchEmbedding {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: TmaxConfig,
        in_channels: usize,
        extent: [usize; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid_for(extent)?;
        let p = cfg.patch_size;
        let d = cfg.embed_dim;
        let fan_in = in_channels * p * p * p;
        let n: usize = grid.iter().product();
        Ok(Self {
            weight: store.add_uniform(format!("{prefix}.weight"), &[d, in_channels, p, p, p], fan_in, rng),
            bias: store.add_uniform(format!("{prefix}.bias"), &[d], fan_in, rng),
            positional: store.add(format!("{prefix}.positional"), Tensor::uniform(&[n, d], -0.02, 0.02, rng)),
            in_channels,
            grid,
            cfg,
        })
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    /// `x: [1, C, d, h, w]` to tokens `[N, D]`, positional embedding added.
    /// Token order is row-major over the patch grid.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 5 || xs[0] != 1 || xs[1] != self.in_channels {
            return Err(Error::dim(
                "tokenize",
                format!("expected [1, {}, d, h, w], got {xs:?}", self.in_channels),
            ));
        }
        let grid = self.cfg.grid_for([xs[2], xs[3], xs[4]])?;
        if grid != self.grid {
            return Err(Error::dim(
                "tokenize",
                format!("patch grid {grid:?} differs from configured {:?}", self.grid),
            ));
        }
        let d = self.cfg.embed_dim;
        let n = self.n_tokens();
        let y = tape.conv3d(x, p[self.weight], Some(p[self.bias]), self.cfg.patch_size, 0)?;
        let y = tape.reshape(y, &[d, n])?;
        let t = tape.transpose(y)?;
        tape.add(t, p[self.positional])
    }

    /// Tokenize a `[C, d, h, w]` volume outside of training.
    pub fn tokenize(&self, store: &ParamStore, volume: &Tensor) -> Result<TokenGrid> {
        let s = volume.shape();
        if s.len() != 4 {
            return Err(Error::dim("tokenize", format!("volume must be [C, d, h, w], got {s:?}")));
        }
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(volume.reshape(&[1, s[0], s[1], s[2], s[3]])?);
        let t = self.forward(&mut tape, &p, x)?;
        Ok(TokenGrid {
            tokens: tape.value(t).clone(),
            grid_extent: self.grid,
            positional: store.get(self.positional).clone(),
        })
    }
}

/// Row-major `[N, D]` tokens back to `[1, D, gd, gh, gw]` on a tape.
pub fn detokenize_var(tape: &mut Tape, tokens: Var, grid: [usize; 3]) -> Result<Var> {
    let [n, d] = tape.shape(tokens)[..] else {
        return Err(Error::dim("detokenize", format!("tokens must be [N, D], got {:?}", tape.shape(tokens))));
    };
    if grid.iter().product::<usize>() != n {
        return Err(Error::dim(
            "detokenize",
            format!("{n} tokens cannot fill a {grid:?} grid"),
        ));
    }
    let t = tape.transpose(tokens)?;
    tape.reshape(t, &[1, d, grid[0], grid[1], grid[2]])
}

/// Inverse of the tokenizer's flattening: `[N, D]` to `[D, gd, gh, gw]`.
pub fn detokenize(grid: &TokenGrid) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(grid.tokens.clone());
    let v = detokenize_var(&mut tape, t, grid.grid_extent)?;
    let s = tape.shape(v).to_vec();
    tape.value(v).reshape(&s[1..])
}

/// One attention layer with its norm and feed-forward.
#[derive(Debug, Clone)]
pub struct TmaxBlock {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    embed_dim: usize,
}

/// Intermediate values of a block pass, for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub attention: Var,
    pub enriched: Var,
    pub output: Var,
}

impl TmaxBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &TmaxConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.embed_dim, cfg.ffn_hidden);
        Ok(Self {
            ln_gain: store.add(format!("{prefix}.ln.gain"), Tensor::ones(&[d])),
            ln_bias: store.add(format!("{prefix}.ln.bias"), Tensor::zeros(&[d])),
            ffn_w1: store.add_uniform(format!("{prefix}.ffn.w1"), &[d, h], d, rng),
            ffn_b1: store.add_uniform(format!("{prefix}.ffn.b1"), &[h], d, rng),
            ffn_w2: store.add_uniform(format!("{prefix}.ffn.w2"), &[h, d], h, rng),
            ffn_b2: store.add_uniform(format!("{prefix}.ffn.b2"), &[d], h, rng),
            embed_dim: d,
        })
    }

    pub fn param_count(cfg: &TmaxConfig) -> usize {
        let (d, h) = (cfg.embed_dim, cfg.ffn_hidden);
        2 * d + d * h + h + h * d + d
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, q: Var, k: Var, v: Var, mask: &ModalityMask) -> Result<Var> {
        Ok(self.forward_traced(tape, p, q, k, v, mask)?.output)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        p: &Bound,
        q: Var,
        k: Var,
        v: Var,
        mask: &ModalityMask,
    ) -> Result<BlockTrace> {
        let d = self.embed_dim;
        let [n, qd] = tape.shape(q)[..] else {
            return Err(Error::dim("tmax_block", format!("Q must be [N, D], got {:?}", tape.shape(q))));
        };
        for (name, t) in [("K", k), ("V", v)] {
            if tape.shape(t) != [N_MODALITIES, d] {
                return Err(Error::dim(
                    "tmax_block",
                    format!("{name} must be [{N_MODALITIES}, {d}], got {:?}", tape.shape(t)),
                ));
            }
        }
        if qd != d {
            return Err(Error::dim("tmax_block", format!("Q width {qd} != embed dim {d}")));
        }
        let additive = mask.with_tokens(n)?.additive();

        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / (d as f64).sqrt());
        let attention = tape.masked_softmax_rows(s, &additive)?;
        let av = tape.matmul(attention, v)?;
        let enriched = tape.add(q, av)?;

        let h = tape.layer_norm(enriched, p[self.ln_gain], p[self.ln_bias], LN_EPS)?;
        let f = tape.linear(h, p[self.ffn_w1], Some(p[self.ffn_b1]))?;
        let f = tape.gelu(f);
        let f = tape.linear(f, p[self.ffn_w2], Some(p[self.ffn_b2]))?;
        let output = tape.add(h, f)?;
        Ok(BlockTrace {
            attention,
            enriched,
            output,
        })
    }
}

/// Run one block on a token grid outside of training.
pub fn tmax_block(
    store: &ParamStore,
    block: &TmaxBlock,
    q_tokens: &TokenGrid,
    k: &Tensor,
    v: &Tensor,
    mask: &ModalityMask,
) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let q = tape.constant(q_tokens.tokens.clone());
    let kv = tape.constant(k.clone());
    let vv = tape.constant(v.clone());
    let out = block.forward(&mut tape, &p, q, kv, vv, mask)?;
    Ok(TokenGrid {
        tokens: tape.value(out).clone(),
        grid_extent: q_tokens.grid_extent,
        positional: q_tokens.positional.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Tokens attend to all `N` tokens.
    SelfAttention,
    /// Tokens attend to the `M` metadata tokens.
    MetadataCross,
}

/// FLOPs of the attention logits plus the weighted sum of values, counting
/// a multiply-add as 2: self mode `4 N^2 D`, cross mode `4 N M D`.
/// Projections are not included.
pub fn attention_flops(cfg: &TmaxConfig, n_tokens: u64, mode: AttentionMode) -> u64 {
    let d = cfg.embed_dim as u64;
    let keys = match mode {
        AttentionMode::SelfAttention => n_tokens,
        AttentionMode::MetadataCross => cfg.n_modalities as u64,
    };
    let logits = 2 * n_tokens * keys * d;
    let weighted = 2 * n_tokens * keys * d;
    logits + weighted
}
