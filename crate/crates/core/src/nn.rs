//! Layers shared by the encoders: affine maps, normalizations, attention
//! and pre-norm transformer blocks.

use std::ops::{Deref, DerefMut};

use rand::Rng;

use crate::autodiff::{BatchNormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Whether batch statistics are being learned or frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A tape paired with the parameter table it reads from.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Ctx { tape, store, mode }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

impl Deref for Ctx<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        self.tape
    }
}

impl DerefMut for Ctx<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        self.tape
    }
}

/// `y = x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[d_in, d_out], bound, rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), ParamKind::Bias));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let y = cx.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = cx.p(b);
                cx.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Sets weight and bias to zero, e.g. to make a residual branch vanish.
    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[width]), ParamKind::Bias),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]), ParamKind::Bias),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        cx.layer_norm(x, g, b, Self::EPS)
    }
}

/// Channels-last batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Bias),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Bias),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        match cx.mode {
            Mode::Train => {
                let rows = cx.value(x).len() / cx.store.value(self.gamma).len();
                let (y, stats) = cx.batch_norm(x, g, b, BatchNormMode::Training, Self::EPS)?;
                let (mean, var) = stats.expect("training mode returns batch statistics");
                // Running variance tracks the unbiased estimate.
                let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
                let m = self.momentum;
                let blend = |old: &Tensor, new: &[f64], k: f64| {
                    let data = old.data().iter().zip(new).map(|(o, n)| (1.0 - m) * o + m * n * k).collect();
                    Tensor::new(old.shape().to_vec(), data).expect("same shape")
                };
                let rm = blend(cx.store.value(self.running_mean), &mean, 1.0);
                let rv = blend(cx.store.value(self.running_var), &var, unbias);
                cx.tape.record_buffer_update(self.running_mean, rm);
                cx.tape.record_buffer_update(self.running_var, rv);
                Ok(y)
            }
            Mode::Eval => {
                let store = cx.store;
                let mode = BatchNormMode::Inference {
                    mean: store.value(self.running_mean).data(),
                    var: store.value(self.running_var).data(),
                };
                Ok(cx.tape.batch_norm(x, g, b, mode, Self::EPS)?.0)
            }
        }
    }
}

/// Scaled dot-product multi-head attention over `[B, n, d]` tokens.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("{name}: width {width} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.query"), width, width, true),
            key: Linear::new(store, rng, &format!("{name}.key"), width, width, true),
            value: Linear::new(store, rng, &format!("{name}.value"), width, width, true),
            out: Linear::new(store, rng, &format!("{name}.out"), width, width, true),
            heads,
            width,
        })
    }

    /// `[B, n, d] → [B·h, n, d/h]`
    fn split_heads(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.shape(x).to_vec();
        let (b, n, dh) = (s[0], s[1], self.width / self.heads);
        let x = cx.reshape(x, &[b, n, self.heads, dh])?;
        let x = cx.permute(x, &[0, 2, 1, 3])?;
        cx.reshape(x, &[b * self.heads, n, dh])
    }

    /// Queries come from `query_tokens`, keys and values from `context`.
    pub fn forward(&self, cx: &mut Ctx, query_tokens: Var, context: Var) -> Result<Var> {
        let (qs, ks) = (cx.shape(query_tokens).to_vec(), cx.shape(context).to_vec());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.width || ks[2] != self.width {
            return Err(Error::shape("attention", &qs, &ks));
        }
        let (b, nq) = (qs[0], qs[1]);
        let q = self.query.forward(cx, query_tokens)?;
        let k = self.key.forward(cx, context)?;
        let v = self.value.forward(cx, context)?;
        let (q, k, v) = (self.split_heads(cx, q)?, self.split_heads(cx, k)?, self.split_heads(cx, v)?);
        let kt = cx.transpose(k)?;
        let scores = cx.matmul(q, kt)?;
        let scores = cx.scale(scores, 1.0 / ((self.width / self.heads) as f64).sqrt())?;
        let attn = cx.softmax(scores, 2)?;
        let ctx = cx.matmul(attn, v)?;
        let ctx = cx.reshape(ctx, &[b, self.heads, nq, self.width / self.heads])?;
        let ctx = cx.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = cx.reshape(ctx, &[b, nq, self.width])?;
        self.out.forward(cx, ctx)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), width, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, width, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.gelu(h)?;
        self.fc2.forward(cx, h)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), width, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), width, width * ff_mult),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.norm1.forward(cx, x)?;
        let a = self.attn.forward(cx, h, h)?;
        let x = cx.add(x, a)?;
        let h = self.norm2.forward(cx, x)?;
        let f = self.ff.forward(cx, h)?;
        cx.add(x, f)
    }

    /// Zeros both residual branches so the block is the identity map.
    pub fn zero_residuals(&self, store: &mut ParamStore) {
        self.attn.out.zero(store);
        self.ff.fc2.zero(store);
    }
}

pub fn blocks<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    depth: usize,
    width: usize,
    heads: usize,
) -> Result<Vec<TransformerBlock>> {
    (0..depth)
        .map(|i| TransformerBlock::new(store, rng, &format!("{name}.{i}"), width, heads, 2))
        .collect()
}

pub fn run_blocks(blocks: &[TransformerBlock], cx: &mut Ctx, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(cx, x)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck;

    #[test]
    fn attention_block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, &mut rng, "blk", 8, 2, 2).unwrap();
        let x = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let report = gradcheck::check(&mut store, &ids, 1e-5, 16, |tape, store| {
            let mut cx = Ctx::new(tape, store, Mode::Train);
            let xv = cx.constant(x.clone());
            let y = block.forward(&mut cx, xv)?;
            let wv = cx.constant(w.clone());
            let yw = cx.mul(y, wv)?;
            cx.sum_all(yw)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:#?}", report.entries);
    }

    #[test]
    fn zeroed_residual_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, &mut rng, "blk", 8, 4, 2).unwrap();
        block.zero_residuals(&mut store);
        let x = Tensor::randn(&[1, 5, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let xv = cx.constant(x.clone());
        let y = block.forward(&mut cx, xv).unwrap();
        assert_eq!(cx.value(y), &x);
    }

    #[test]
    fn batch_norm_records_running_statistics_only_in_training() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let x = Tensor::new(vec![2, 2], vec![1.0, 10.0, 3.0, 20.0]).unwrap();
        let mut tape = Tape::new();
        {
            let mut cx = Ctx::new(&mut tape, &store, Mode::Train);
            let xv = cx.constant(x.clone());
            bn.forward(&mut cx, xv).unwrap();
        }
        tape.apply_buffer_updates(&mut store);
        // mean [2, 15], unbiased var [2, 50], momentum 0.1
        assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((store.value(bn.running_mean).data()[1] - 1.5).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[1] - (0.9 + 5.0)).abs() < 1e-12);

        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let xv = cx.constant(x);
        bn.forward(&mut cx, xv).unwrap();
        assert!(tape.buffer_updates().is_empty());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, &mut rng, "a", 10, 4).is_err());
    }
}
