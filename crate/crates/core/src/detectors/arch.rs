//! The three detector bodies. All activations are SiLU so input gradients
//! are smooth enough for finite-difference checks.

use candle_core::{Tensor, D};

use super::Architecture;
use crate::error::Result;
use crate::nn::{self, Conv2d, Init, LayerNorm, Linear, Scope};

#[derive(Debug, Clone)]
pub(super) enum Trunk {
    Small(Small),
    Deep(Deep),
    Attention(Box<Attention>),
}

impl Trunk {
    pub(super) fn new(s: &Scope, arch: Architecture, image_size: usize) -> Result<Self> {
        Ok(match arch {
            Architecture::ConvnetSmall => Trunk::Small(Small::new(s)?),
            Architecture::ConvnetDeep => Trunk::Deep(Deep::new(s)?),
            Architecture::AttentionLite => Trunk::Attention(Box::new(Attention::new(s, image_size)?)),
        })
    }

    pub(super) fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        match self {
            Trunk::Small(m) => m.features(x),
            Trunk::Deep(m) => m.features(x),
            Trunk::Attention(m) => m.features(x),
        }
    }

    pub(super) fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (feats, head) = match self {
            Trunk::Small(m) => (m.features(x)?, &m.head),
            Trunk::Deep(m) => (m.features(x)?, &m.head),
            Trunk::Attention(m) => return m.logits(x),
        };
        let last = feats.last().expect("trunk has layers");
        let pooled = last.flatten_from(2)?.mean(D::Minus1)?;
        Ok(head.forward(&pooled)?.squeeze(1)?)
    }
}

/// Four plain convolutions (the first at full resolution), global average
/// pooling, linear head.
#[derive(Debug, Clone)]
pub(super) struct Small {
    convs: [Conv2d; 4],
    head: Linear,
}

impl Small {
    fn new(s: &Scope) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv2d::new(&s.pp("conv1"), 3, 16, 3, 1)?,
                Conv2d::new(&s.pp("conv2"), 16, 32, 3, 2)?,
                Conv2d::new(&s.pp("conv3"), 32, 48, 3, 2)?,
                Conv2d::new(&s.pp("conv4"), 48, 64, 3, 2)?,
            ],
            head: Linear::new(&s.pp("head"), 64, 1)?,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(4);
        let mut h = x.clone();
        for c in &self.convs {
            h = nn::silu(&c.forward(&h)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(s: &Scope, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&s.pp("conv1"), c, c, 3, 1)?,
            conv2: Conv2d::with_init(&s.pp("conv2"), c, c, 3, 1, Init::He(c * 9 * 4), true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&nn::silu(&self.conv1.forward(x)?)?)?;
        Ok(nn::silu(&(x + h)?)?)
    }
}

/// Stem plus three residual stages with strided transitions; twice the depth
/// of [`Small`].
#[derive(Debug, Clone)]
pub(super) struct Deep {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    head: Linear,
}

impl Deep {
    fn new(s: &Scope) -> Result<Self> {
        let widths = [16, 32, 48, 64];
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for (i, w) in widths.iter().enumerate() {
            blocks.push(ResBlock::new(&s.pp(&format!("block{i}")), *w)?);
            if i + 1 < widths.len() {
                downs.push(Conv2d::new(&s.pp(&format!("down{i}")), *w, widths[i + 1], 3, 2)?);
            }
        }
        Ok(Self {
            stem: Conv2d::new(&s.pp("stem"), 3, 16, 3, 1)?,
            blocks,
            downs,
            head: Linear::new(&s.pp("head"), 64, 1)?,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = nn::silu(&self.stem.forward(x)?)?;
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(&h)?;
            out.push(h.clone());
            if let Some(d) = self.downs.get(i) {
                h = nn::silu(&d.forward(&h)?)?;
            }
        }
        Ok(out)
    }
}

/// Patch embedding (4×4, stride 4), learned positions, one pre-norm
/// self-attention block with an MLP, mean pooling, linear head.
#[derive(Debug, Clone)]
pub(super) struct Attention {
    patch_w: Tensor,
    patch_b: Tensor,
    pos: Tensor,
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    ln_out: LayerNorm,
    head: Linear,
    heads: usize,
}

const PATCH: usize = 4;

impl Attention {
    fn new(s: &Scope, image_size: usize) -> Result<Self> {
        let dim = 48;
        let tokens = (image_size / PATCH).pow(2);
        let p = s.pp("patch");
        Ok(Self {
            patch_w: p.get("weight", &[dim, 3, PATCH, PATCH], Init::He(3 * PATCH * PATCH))?,
            patch_b: p.get("bias", &[dim], Init::Zeros)?,
            pos: s.get("pos", &[1, tokens, dim], Init::Normal(0.02))?,
            ln1: LayerNorm::new(&s.pp("ln1"), dim)?,
            qkv: Linear::new(&s.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&s.pp("proj"), dim, dim)?,
            ln2: LayerNorm::new(&s.pp("ln2"), dim)?,
            fc1: Linear::new(&s.pp("fc1"), dim, 2 * dim)?,
            fc2: Linear::new(&s.pp("fc2"), 2 * dim, dim)?,
            ln_out: LayerNorm::new(&s.pp("ln_out"), dim)?,
            head: Linear::new(&s.pp("head"), dim, 1)?,
            heads: 2,
        })
    }

    fn tokens(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let e = nn::conv2d(x, &self.patch_w, Some(&self.patch_b), PATCH, 0)?;
        let t = e.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let t = t.broadcast_add(&self.pos)?;
        Ok((e, t))
    }

    fn attend(&self, t: &Tensor) -> Result<Tensor> {
        let (b, n, d) = t.dims3()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(&self.ln1.forward(t)?)?;
        let split = |i: usize| -> candle_core::Result<Tensor> {
            qkv.narrow(2, i * d, d)?
                .reshape((b, n, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b * self.heads, n, hd))
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = attn.matmul(&v)?;
        let o = o.reshape((b, self.heads, n, hd))?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        let t = (t + self.proj.forward(&o)?)?;
        let m = self.fc2.forward(&nn::silu(&self.fc1.forward(&self.ln2.forward(&t)?)?)?)?;
        Ok((t + m)?)
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (e, t) = self.tokens(x)?;
        let (b, d, gh, gw) = e.dims4()?;
        let t = self.attend(&t)?;
        let grid = t.transpose(1, 2)?.contiguous()?.reshape((b, d, gh, gw))?;
        Ok(vec![nn::silu(&e)?, grid])
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t) = self.tokens(x)?;
        let t = self.ln_out.forward(&self.attend(&t)?)?;
        Ok(self.head.forward(&t.mean(1)?)?.squeeze(1)?)
    }
}
