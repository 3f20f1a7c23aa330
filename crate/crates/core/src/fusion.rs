//! Salient fusion: halve each modality's tokens, re-weight the full set by
//! cross-attention against the survivors, then classify the joint sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SalienceDirection};
use crate::error::{Error, Result};
use crate::nn::{blocks, run_blocks, BatchNorm, Ctx, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
use crate::params::ParamStore;
use crate::Var;

/// Which token of the original sequence survived into every slot.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownsampleTrace {
    /// Token counts before the first and after every iteration.
    pub counts: Vec<usize>,
    /// `selected[iteration][batch][slot]` as an original token index.
    pub selected: Vec<Vec<Vec<usize>>>,
}

impl DownsampleTrace {
    pub fn iterations(&self) -> usize {
        self.selected.len()
    }

    /// Surviving original indices of one sample, or all tokens with no iterations.
    pub fn survivors(&self, batch: usize) -> Vec<usize> {
        match self.selected.last() {
            Some(last) => last[batch].clone(),
            None => (0..self.counts.first().copied().unwrap_or(0)).collect(),
        }
    }
}

/// One linear → layer norm → adaptive max pool stage per iteration.
#[derive(Clone, Debug)]
pub struct Downsampler {
    pub stages: Vec<(Linear, LayerNorm)>,
}

impl Downsampler {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, width: usize, iterations: usize) -> Self {
        let stages = (0..iterations)
            .map(|i| {
                (
                    Linear::new(store, rng, &format!("{name}.{i}.linear"), width, width, true),
                    LayerNorm::new(store, &format!("{name}.{i}.norm"), width),
                )
            })
            .collect();
        Downsampler { stages }
    }

    /// `[B, n, d]` to `[B, n / 2^k, d]` with floor halving per iteration.
    pub fn forward(&self, cx: &mut Ctx, tokens: Var) -> Result<(Var, DownsampleTrace)> {
        let s = cx.shape(tokens).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("fine_grained_downsample", format!("expected [B, n, d], got {s:?}")));
        }
        let (b, n) = (s[0], s[1]);
        let k = self.stages.len();
        if n < 1 << k {
            return Err(Error::invalid(
                "fine_grained_downsample",
                format!("{n} tokens cannot be halved {k} times"),
            ));
        }
        let mut trace = DownsampleTrace {
            counts: vec![n],
            selected: Vec::new(),
        };
        let mut origin: Vec<Vec<usize>> = vec![(0..n).collect(); b];
        let mut x = tokens;
        for (linear, norm) in &self.stages {
            let cur = cx.shape(x)[1];
            let h = linear.forward(cx, x)?;
            let h = norm.forward(cx, h)?;
            let pool = cx.adaptive_max_pool(h, cur / 2)?;
            let m = cur / 2;
            origin = (0..b)
                .map(|bi| (0..m).map(|slot| origin[bi][pool.slot_winner[bi * m + slot]]).collect())
                .collect();
            trace.counts.push(m);
            trace.selected.push(origin.clone());
            x = pool.out;
        }
        Ok((x, trace))
    }
}

/// `full + Attention(q = full, kv = down)`.
pub fn salience_attention(cx: &mut Ctx, attn: &MultiHeadAttention, full: Var, down: Var) -> Result<Var> {
    let a = attn.forward(cx, full, down)?;
    cx.add(full, a)
}

/// Per-modality downsampling, salience and projection to the fusion width.
#[derive(Clone, Debug)]
pub struct ModalityBranch {
    pub down: Downsampler,
    pub salience: MultiHeadAttention,
    pub proj: Linear,
    pub direction: SalienceDirection,
}

impl ModalityBranch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        iterations: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let down = Downsampler::new(store, rng, &format!("{name}.down"), width, iterations);
        let salience = MultiHeadAttention::new(store, rng, &format!("{name}.salience"), width, cfg.salience_heads)?;
        // Starts as an exact residual identity.
        salience.out.zero(store);
        let proj = Linear::new(store, rng, &format!("{name}.proj"), width, cfg.fusion_width, true);
        Ok(ModalityBranch {
            down,
            salience,
            proj,
            direction: cfg.salience_direction,
        })
    }

    /// `[B, n, d]` tokens to `[B, n', d_f]` fusion tokens.
    pub fn forward(&self, cx: &mut Ctx, tokens: Var) -> Result<(Var, DownsampleTrace)> {
        let (down, trace) = self.down.forward(cx, tokens)?;
        let kept = match self.direction {
            SalienceDirection::FullToDown => {
                let weighted = salience_attention(cx, &self.salience, tokens, down)?;
                if trace.iterations() == 0 {
                    weighted
                } else {
                    // Keep the re-weighted tokens at the surviving positions.
                    let s = cx.shape(weighted).to_vec();
                    let (b, n, d) = (s[0], s[1], s[2]);
                    let mut index = Vec::new();
                    for bi in 0..b {
                        for t in trace.survivors(bi) {
                            index.extend((0..d).map(|c| (bi * n + t) * d + c));
                        }
                    }
                    let m = trace.counts.last().copied().unwrap_or(n);
                    cx.gather("salience_select", weighted, index, vec![b, m, d])?
                }
            }
            SalienceDirection::DownToFull => salience_attention(cx, &self.salience, down, tokens)?,
        };
        let out = self.proj.forward(cx, kept)?;
        Ok((out, trace))
    }
}

/// Output of [`FusionModule::forward`].
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// `[B, C]`
    pub logits: Var,
    /// `[B, n_s' + n_v', d_f]` tokens entering the fusion transformer.
    pub tokens: Var,
    pub skeleton_trace: Option<DownsampleTrace>,
    pub visual_trace: Option<DownsampleTrace>,
}

#[derive(Clone, Debug)]
pub struct FusionModule {
    pub skeleton: Option<ModalityBranch>,
    pub visual: Option<ModalityBranch>,
    pub norm: BatchNorm,
    pub blocks: Vec<TransformerBlock>,
    pub head: Linear,
}

impl FusionModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        let skeleton = cfg
            .modality
            .uses_skeleton()
            .then(|| {
                ModalityBranch::new(store, rng, "fusion.skeleton", cfg.skeleton_width(), cfg.skeleton_iterations, cfg)
            })
            .transpose()?;
        let visual = cfg
            .modality
            .uses_video()
            .then(|| ModalityBranch::new(store, rng, "fusion.visual", cfg.visual_width, cfg.visual_iterations, cfg))
            .transpose()?;
        Ok(FusionModule {
            skeleton,
            visual,
            norm: BatchNorm::new(store, "fusion.norm", cfg.fusion_width),
            blocks: blocks(store, rng, "fusion.blocks", cfg.fusion_depth, cfg.fusion_width, cfg.fusion_heads)?,
            head: Linear::new(store, rng, "fusion.head", cfg.fusion_width, classes, true),
        })
    }

    /// Batch norm, transformer, token mean and the linear head.
    pub fn classify_tokens(&self, cx: &mut Ctx, tokens: Var) -> Result<Var> {
        let s = cx.shape(tokens).to_vec();
        let flat = cx.reshape(tokens, &[s[0] * s[1], s[2]])?;
        let flat = self.norm.forward(cx, flat)?;
        let x = cx.reshape(flat, &s)?;
        let x = run_blocks(&self.blocks, cx, x)?;
        let x = cx.mean(x, 1)?;
        self.head.forward(cx, x)
    }

    pub fn forward(&self, cx: &mut Ctx, skeleton: Option<Var>, visual: Option<Var>) -> Result<FusionOutput> {
        let mut parts = Vec::new();
        let mut skeleton_trace = None;
        let mut visual_trace = None;
        match (&self.skeleton, skeleton) {
            (Some(branch), Some(tokens)) => {
                let (t, trace) = branch.forward(cx, tokens)?;
                parts.push(t);
                skeleton_trace = Some(trace);
            }
            (None, None) => {}
            _ => return Err(Error::Config("skeleton tokens do not match the configured modality".into())),
        }
        match (&self.visual, visual) {
            (Some(branch), Some(tokens)) => {
                let (t, trace) = branch.forward(cx, tokens)?;
                parts.push(t);
                visual_trace = Some(trace);
            }
            (None, None) => {}
            _ => return Err(Error::Config("visual tokens do not match the configured modality".into())),
        }
        let tokens = if parts.len() == 1 { parts[0] } else { cx.concat(&parts, 1)? };
        let logits = self.classify_tokens(cx, tokens)?;
        Ok(FusionOutput {
            logits,
            tokens,
            skeleton_trace,
            visual_trace,
        })
    }
}
