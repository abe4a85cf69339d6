//! Layers shared by the encoders, the fusion stack and the heads.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder, ParamId};

/// `y = x·W (+ b)` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let mut s = b.scoped(name);
        let weight = s.param(
            "weight",
            &[input, output],
            Init::Xavier {
                fan_in: input,
                fan_out: output,
            },
        )?;
        let bias = if bias {
            Some(s.param("bias", &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, width: usize) -> Result<Self> {
        let mut s = b.scoped(name);
        Ok(Self {
            gain: s.param("gain", &[width], Init::Ones)?,
            bias: s.param("bias", &[width], Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

pub fn check_heads(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "width {width} is not divisible by {heads} attention heads"
        )));
    }
    Ok(width / heads)
}

/// Scaled dot-product attention over already projected `q`, `k`, `v`,
/// split into `heads` column groups. `key_valid` hides keys (padding).
/// Returns the concatenated per-head contexts (`N_q × width`).
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_valid: Option<&[bool]>,
) -> Result<Var> {
    let width = tape.shape(q)[1];
    let dh = check_heads(width, heads)?;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax_rows(scores, key_valid)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, width: usize, heads: usize) -> Result<Self> {
        check_heads(width, heads)?;
        let mut s = b.scoped(name);
        Ok(Self {
            query: Linear::new(&mut s, "query", width, width, true)?,
            key: Linear::new(&mut s, "key", width, width, true)?,
            value: Linear::new(&mut s, "value", width, width, true)?,
            output: Linear::new(&mut s, "output", width, width, true)?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, key_valid: Option<&[bool]>) -> Result<Var> {
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let ctx = multi_head_attention(tape, q, k, v, self.heads, key_valid)?;
        self.output.forward(tape, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder, name: &str, width: usize, hidden: usize) -> Result<Self> {
        let mut s = b.scoped(name);
        Ok(Self {
            up: Linear::new(&mut s, "up", width, hidden, true)?,
            down: Linear::new(&mut s, "down", hidden, width, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, h)
    }
}

/// Pre-norm transformer block:
/// `h = x + Attn(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attention: SelfAttention,
    pub norm_ff: LayerNorm,
    pub feed_forward: FeedForward,
}

impl TransformerBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, width: usize, heads: usize, hidden: usize) -> Result<Self> {
        let mut s = b.scoped(name);
        Ok(Self {
            norm_attn: LayerNorm::new(&mut s, "norm_attn", width)?,
            attention: SelfAttention::new(&mut s, "attention", width, heads)?,
            norm_ff: LayerNorm::new(&mut s, "norm_ff", width)?,
            feed_forward: FeedForward::new(&mut s, "feed_forward", width, hidden)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, key_valid: Option<&[bool]>) -> Result<Var> {
        let n = self.norm_attn.forward(tape, x)?;
        let a = self.attention.forward(tape, n, key_valid)?;
        let h = tape.add(x, a)?;
        let n = self.norm_ff.forward(tape, h)?;
        let f = self.feed_forward.forward(tape, n)?;
        tape.add(h, f)
    }
}

/// Three affine layers with GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new(b: &mut ParamBuilder, name: &str, input: usize, hidden: usize, output: usize) -> Result<Self> {
        let mut s = b.scoped(name);
        Ok(Self {
            layers: [
                Linear::new(&mut s, "layer0", input, hidden, true)?,
                Linear::new(&mut s, "layer1", hidden, hidden, true)?,
                Linear::new(&mut s, "layer2", hidden, output, true)?,
            ],
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(tape, x)?;
        let h = tape.gelu(h)?;
        let h = self.layers[1].forward(tape, h)?;
        let h = tape.gelu(h)?;
        self.layers[2].forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_count_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        assert!(matches!(SelfAttention::new(&mut b, "a", 6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn padded_keys_do_not_change_valid_queries() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            TransformerBlock::new(&mut b, "blk", 8, 2, 16).unwrap()
        };
        let x: Vec<f64> = (0..32).map(|i| libm::sin(i as f64 * 0.37)).collect();
        let mut tape = Tape::new(&store);
        let full = tape.constant(Tensor::new(alloc::vec![4, 8], x.clone()).unwrap()).unwrap();
        let y_full = block.forward(&mut tape, full, Some(&[true, true, false, false])).unwrap();
        let short = tape.constant(Tensor::new(alloc::vec![2, 8], x[..16].to_vec()).unwrap()).unwrap();
        let y_short = block.forward(&mut tape, short, None).unwrap();
        let a = tape.value(y_full).data()[..16].to_vec();
        let b = tape.value(y_short).data();
        for (p, q) in a.iter().zip(b) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
