//! Patch-attention backbone: non-overlapping `p × p` patches, learned
//! positional embedding, pre-norm transformer blocks, and an MLP head that
//! projects every token back to a `p × p` patch.
//!
//! Volumetric inputs `(B, C, T, H, W)` are tokenized frame by frame and
//! attended jointly across all `T·L` tokens; the positional embedding is
//! shared between frames.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

use super::layers::{LayerNorm, Linear};
use super::params::{Fwd, ParamId, ParamInit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_depth: usize,
    pub drop_path: f64,
    pub dropout: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            hidden_dim: 128,
            depth: 2,
            heads: 8,
            mlp_ratio: 4,
            decoder_depth: 2,
            drop_path: 0.1,
            dropout: 0.1,
        }
    }
}

impl VitConfig {
    /// Two 32-wide blocks with four heads, no dropout.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            decoder_depth: 1,
            drop_path: 0.0,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, path: &str, height: usize, width: usize) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || height % p != 0 || width % p != 0 {
            return Err(Error::config(
                format!("{path}.patch_size"),
                format!("grid {height}x{width} is not divisible into {p}x{p} patches"),
            ));
        }
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::config(
                format!("{path}.heads"),
                "hidden_dim must be a positive multiple of heads",
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config(format!("{path}.mlp_ratio"), "must be positive"));
        }
        for (name, v) in [("drop_path", self.drop_path), ("dropout", self.dropout)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{path}.{name}"), "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Vit {
    cfg: VitConfig,
    cin: usize,
    cout: usize,
    height: usize,
    width: usize,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    decoder: Vec<Linear>,
    out: Linear,
}

impl Vit {
    pub fn new(init: &mut ParamInit, cfg: &VitConfig, cin: usize, cout: usize, height: usize, width: usize) -> Self {
        let p = cfg.patch_size;
        let d = cfg.hidden_dim;
        let tokens = (height / p) * (width / p);
        let embed = Linear::new(init, "patch_embed", cin * p * p, d, 1.0);
        let pos = init.positional("pos_embed", &[tokens, d], 0.02);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let mut s = init.scope(&format!("block{i}"));
                Block {
                    ln1: LayerNorm::new(&mut s, "ln1", d),
                    qkv: Linear::new(&mut s, "qkv", d, 3 * d, 1.0),
                    proj: Linear::new(&mut s, "proj", d, d, 1.0),
                    ln2: LayerNorm::new(&mut s, "ln2", d),
                    fc1: Linear::new(&mut s, "fc1", d, d * cfg.mlp_ratio, 1.0),
                    fc2: Linear::new(&mut s, "fc2", d * cfg.mlp_ratio, d, 1.0),
                }
            })
            .collect();
        let norm = LayerNorm::new(init, "norm", d);
        let decoder = (0..cfg.decoder_depth)
            .map(|i| Linear::new(init, &format!("decoder{i}"), d, d, 1.0))
            .collect();
        let out = Linear::new(init, "head", d, cout * p * p, 1.0);
        Self {
            cfg: cfg.clone(),
            cin,
            cout,
            height,
            width,
            embed,
            pos,
            blocks,
            norm,
            decoder,
            out,
        }
    }

    /// `(B, C, H, W)` → `(B, O, H, W)`, or `(B, C, T, H, W)` → `(B, O, T, H, W)`.
    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let shape = f.tape.shape(x).to_vec();
        let planar = shape.len() == 4;
        let (b, c, t) = if planar {
            (shape[0], shape[1], 1)
        } else {
            (shape[0], shape[1], shape[2])
        };
        assert_eq!(c, self.cin, "vit: input channel count");
        let (h, w, p, d) = (self.height, self.width, self.cfg.patch_size, self.cfg.hidden_dim);
        let (hp, wp) = (h / p, w / p);
        let tokens = hp * wp;

        // Patchify: (B, C, T, hp, p, wp, p) → (B, T, hp, wp, C, p, p).
        let x = f.tape.reshape(x, &[b, c, t, hp, p, wp, p]);
        let x = f.tape.permute(x, &[0, 2, 3, 5, 1, 4, 6]);
        let x = f.tape.reshape(x, &[b, t * tokens, c * p * p]);
        let x = self.embed.forward(f, x);
        let x = f.tape.reshape(x, &[b, t, tokens, d]);
        let pos = f.p(self.pos);
        let x = f.tape.add_trailing(x, pos);
        let mut x = f.tape.reshape(x, &[b, t * tokens, d]);
        x = f.dropout(x, self.cfg.dropout);

        for block in &self.blocks {
            let y = block.ln1.forward(f, x);
            let y = self.attention(f, block, y);
            let y = f.drop_path(y, self.cfg.drop_path);
            x = f.tape.add(x, y);
            let y = block.ln2.forward(f, x);
            let y = block.fc1.forward(f, y);
            let y = f.tape.gelu(y);
            let y = f.dropout(y, self.cfg.dropout);
            let y = block.fc2.forward(f, y);
            let y = f.drop_path(y, self.cfg.drop_path);
            x = f.tape.add(x, y);
        }
        let mut x = self.norm.forward(f, x);
        for layer in &self.decoder {
            x = layer.forward(f, x);
            x = f.tape.gelu(x);
        }
        let x = self.out.forward(f, x);

        // Unpatchify: (B, T, hp, wp, O, p, p) → (B, O, T, hp, p, wp, p).
        let o = self.cout;
        let x = f.tape.reshape(x, &[b, t, hp, wp, o, p, p]);
        let x = f.tape.permute(x, &[0, 4, 1, 2, 5, 3, 6]);
        if planar {
            f.tape.reshape(x, &[b, o, h, w])
        } else {
            f.tape.reshape(x, &[b, o, t, h, w])
        }
    }

    fn attention(&self, f: &mut Fwd, block: &Block, x: Var) -> Var {
        let shape = f.tape.shape(x).to_vec();
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let qkv = block.qkv.forward(f, x);
        let qkv = f.tape.reshape(qkv, &[b, s, 3, heads, dh]);
        let qkv = f.tape.permute(qkv, &[2, 0, 3, 1, 4]);
        let qkv = f.tape.reshape(qkv, &[3, b * heads, s, dh]);
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let part = f.tape.slice_axis(qkv, 0, i, i + 1);
            parts.push(f.tape.reshape(part, &[b * heads, s, dh]));
        }
        let (q, k, v) = (parts[0], parts[1], parts[2]);
        let kt = f.tape.permute(k, &[0, 2, 1]);
        let scores = f.tape.bmm(q, kt);
        let scores = f.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = f.tape.softmax_last(scores);
        let attn = f.dropout(attn, self.cfg.dropout);
        let y = f.tape.bmm(attn, v);
        let y = f.tape.reshape(y, &[b, heads, s, dh]);
        let y = f.tape.permute(y, &[0, 2, 1, 3]);
        let y = f.tape.reshape(y, &[b, s, d]);
        block.proj.forward(f, y)
    }
}
