//! Video encoder: a small ViT per frame followed by a temporal transformer
//! over the per-frame classification tokens.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{blocks, run_blocks, Ctx, LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::Var;

/// Splits `[.., H, W, 3]` frames into `[.., H·W/P², P²·3]` patch rows.
pub fn patchify(cx: &mut Ctx, frames: Var, patch: usize) -> Result<Var> {
    cx.patchify(frames, patch)
}

/// Broadcasts a `[n, d]` parameter to `[batch, n, d]`.
fn tile(cx: &mut Ctx, x: Var, batch: usize) -> Result<Var> {
    let s = cx.shape(x).to_vec();
    let mut shape = vec![1];
    shape.extend(&s);
    let x = cx.reshape(x, &shape)?;
    cx.select(x, 0, &vec![0; batch])
}

#[derive(Clone, Debug)]
pub struct FrameEncoder {
    pub embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub patch: usize,
    pub image_size: usize,
}

impl FrameEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.visual_width;
        let n = cfg.patches_per_frame();
        Ok(FrameEncoder {
            embed: Linear::new(store, rng, "visual.patch_embed", cfg.patch * cfg.patch * 3, d, true),
            cls_token: store.add("visual.cls_token", Tensor::randn(&[1, d], 0.02, rng), ParamKind::Weight),
            pos_embed: store.add("visual.pos_embed", Tensor::randn(&[n + 1, d], 0.02, rng), ParamKind::Weight),
            blocks: blocks(store, rng, "visual.blocks", cfg.visual_depth, d, cfg.visual_heads)?,
            norm: LayerNorm::new(store, "visual.norm", d),
            patch: cfg.patch,
            image_size: cfg.image_size,
        })
    }

    /// `[F, H, W, 3]` frames to `[F, d_v]` classification-token features.
    pub fn forward(&self, cx: &mut Ctx, frames: Var) -> Result<Var> {
        let s = cx.shape(frames).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::invalid("encode_frame", format!("expected [F, H, W, 3], got {s:?}")));
        }
        if s[1] != self.image_size || s[2] != self.image_size {
            return Err(Error::shape("encode_frame", &[self.image_size, self.image_size], &s[1..3]));
        }
        let f = s[0];
        let patches = patchify(cx, frames, self.patch)?;
        let tokens = self.embed.forward(cx, patches)?;
        let cls = cx.p(self.cls_token);
        let cls = tile(cx, cls, f)?;
        let x = cx.concat(&[cls, tokens], 1)?;
        let pos = cx.p(self.pos_embed);
        let x = cx.add(x, pos)?;
        let x = run_blocks(&self.blocks, cx, x)?;
        let x = self.norm.forward(cx, x)?;
        let cls_out = cx.select(x, 1, &[0])?;
        let d = cx.shape(cls_out)[2];
        cx.reshape(cls_out, &[f, d])
    }
}

/// Output of [`VisualEncoder::encode`].
#[derive(Clone, Debug)]
pub struct VisualEncoding {
    /// `[B, T, d_v]`
    pub tokens: Var,
    /// `[B, d_e]`
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct TemporalModule {
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub proj: Linear,
    pub frames: usize,
}

impl TemporalModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.visual_width;
        Ok(TemporalModule {
            pos_embed: store.add("visual.temporal.pos_embed", Tensor::randn(&[cfg.frames, d], 0.02, rng), ParamKind::Weight),
            blocks: blocks(store, rng, "visual.temporal.blocks", cfg.temporal_depth, d, cfg.visual_heads)?,
            proj: Linear::new(store, rng, "visual.temporal.proj", d, cfg.embed_dim, true),
            frames: cfg.frames,
        })
    }

    /// `[B, T, d_v]` frame features to frame tokens plus a pooled feature.
    pub fn forward(&self, cx: &mut Ctx, feats: Var) -> Result<VisualEncoding> {
        let s = cx.shape(feats).to_vec();
        if s.len() != 3 || s[1] != self.frames {
            return Err(Error::shape("temporal_module", &[self.frames], &s));
        }
        let pos = cx.p(self.pos_embed);
        let x = cx.add(feats, pos)?;
        let tokens = run_blocks(&self.blocks, cx, x)?;
        let mean = cx.mean(tokens, 1)?;
        let pooled = self.proj.forward(cx, mean)?;
        Ok(VisualEncoding { tokens, pooled })
    }
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub frame: FrameEncoder,
    pub temporal: TemporalModule,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        Ok(VisualEncoder {
            frame: FrameEncoder::new(store, rng, cfg)?,
            temporal: TemporalModule::new(store, rng, cfg)?,
        })
    }

    /// Encodes `[B, T, H, W, 3]` pixel values in `[0, 1]`.
    pub fn encode(&self, cx: &mut Ctx, frames: Var) -> Result<VisualEncoding> {
        let s = cx.shape(frames).to_vec();
        if s.len() != 5 {
            return Err(Error::invalid("encode_video", format!("expected [B, T, H, W, 3], got {s:?}")));
        }
        let (b, t) = (s[0], s[1]);
        let flat = cx.reshape(frames, &[b * t, s[2], s[3], s[4]])?;
        let feats = self.frame.forward(cx, flat)?;
        let d = cx.shape(feats)[1];
        let feats = cx.reshape(feats, &[b, t, d])?;
        self.temporal.forward(cx, feats)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Mode;
    use crate::Tape;

    fn setup(seed: u64) -> (ModelConfig, ParamStore, VisualEncoder) {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = VisualEncoder::new(&mut store, &mut rng, &cfg).unwrap();
        (cfg, store, enc)
    }

    #[test]
    fn patch_counts() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let big = cx.constant(Tensor::zeros(&[224, 224, 3]));
        let p = patchify(&mut cx, big, 16).unwrap();
        assert_eq!(cx.shape(p), &[196, 768]);
        let small = cx.constant(Tensor::zeros(&[32, 32, 3]));
        let p = patchify(&mut cx, small, 16).unwrap();
        assert_eq!(cx.shape(p), &[4, 768]);
        let odd = cx.constant(Tensor::zeros(&[30, 32, 3]));
        assert!(patchify(&mut cx, odd, 16).is_err());
    }

    #[test]
    fn constant_image_gives_identical_patch_rows() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let img = cx.constant(Tensor::full(&[32, 32, 3], 0.3));
        let p = patchify(&mut cx, img, 8).unwrap();
        let v = cx.value(p);
        for r in 1..16 {
            assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn frame_features_are_deterministic_and_position_aware() {
        let (_, store, enc) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::uniform(&[32, 32, 3], 1.0, &mut rng).map(f64::abs);
        // Swap the top-left and bottom-right 8×8 patches.
        let mut swapped = img.clone();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let a = img.get(&[y, x, c]);
                    let b = img.get(&[24 + y, 24 + x, c]);
                    swapped.set(&[y, x, c], b);
                    swapped.set(&[24 + y, 24 + x, c], a);
                }
            }
        }
        let mut batch = Tensor::zeros(&[3, 32, 32, 3]);
        let n = img.len();
        batch.data_mut()[..n].copy_from_slice(img.data());
        batch.data_mut()[n..2 * n].copy_from_slice(img.data());
        batch.data_mut()[2 * n..].copy_from_slice(swapped.data());
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let x = cx.constant(batch);
        let f = enc.frame.forward(&mut cx, x).unwrap();
        let v = cx.value(f);
        assert_eq!(v.row(0), v.row(1));
        assert_ne!(v.row(0), v.row(2));
    }

    #[test]
    fn frame_features_are_finite_and_distinguish_inputs() {
        let (_, store, enc) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut batch = Tensor::zeros(&[4, 32, 32, 3]);
        let n = 32 * 32 * 3;
        batch.data_mut()[n..2 * n].fill(1.0);
        for v in &mut batch.data_mut()[2 * n..3 * n] {
            *v = rng.random();
        }
        batch.data_mut()[3 * n + 100] = 1.0;
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let x = cx.constant(batch);
        let f = enc.frame.forward(&mut cx, x).unwrap();
        let v = cx.value(f);
        assert!(v.is_finite());
        assert_ne!(v.row(0), v.row(3));
    }

    #[test]
    fn temporal_module_emits_one_token_per_frame() {
        let (cfg, store, enc) = setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let x = cx.constant(Tensor::randn(&[2, 16, cfg.visual_width], 1.0, &mut rng));
        let out = enc.temporal.forward(&mut cx, x).unwrap();
        assert_eq!(cx.shape(out.tokens), &[2, 16, cfg.visual_width]);
        assert_eq!(cx.shape(out.pooled), &[2, cfg.embed_dim]);
        let short = cx.constant(Tensor::zeros(&[1, 8, cfg.visual_width]));
        assert!(enc.temporal.forward(&mut cx, short).is_err());
    }

    #[test]
    fn zeroed_residuals_leave_inputs_plus_positions() {
        let (cfg, mut store, enc) = setup(7);
        for b in &enc.temporal.blocks {
            b.zero_residuals(&mut store);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats = Tensor::randn(&[1, 16, cfg.visual_width], 1.0, &mut rng);
        let pos = store.value(enc.temporal.pos_embed).clone();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let x = cx.constant(feats.clone());
        let out = enc.temporal.forward(&mut cx, x).unwrap();
        let tokens = cx.value(out.tokens);
        for (i, v) in tokens.data().iter().enumerate() {
            assert_eq!(*v, feats.data()[i] + pos.data()[i]);
        }
    }

    fn temporal_outputs(store: &ParamStore, enc: &VisualEncoder, feats: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, store, Mode::Eval);
        let x = cx.constant(feats.clone());
        let out = enc.temporal.forward(&mut cx, x).unwrap();
        (cx.value(out.tokens).clone(), cx.value(out.pooled).clone())
    }

    fn reverse_frames(t: &Tensor) -> Tensor {
        let s = t.shape();
        let (frames, d) = (s[1], s[2]);
        let mut out = t.clone();
        for f in 0..frames {
            for c in 0..d {
                out.set(&[0, f, c], t.get(&[0, frames - 1 - f, c]));
            }
        }
        out
    }

    #[test]
    fn temporal_positions_break_frame_permutation_symmetry() {
        let (cfg, mut store, enc) = setup(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let feats = Tensor::randn(&[1, 16, cfg.visual_width], 1.0, &mut rng);
        let rev = reverse_frames(&feats);

        let (_, pooled) = temporal_outputs(&store, &enc, &feats);
        let (_, pooled_rev) = temporal_outputs(&store, &enc, &rev);
        assert!(pooled.max_abs_diff(&pooled_rev) > 1e-9);

        store.value_mut(enc.temporal.pos_embed).data_mut().fill(0.0);
        let (tokens, pooled) = temporal_outputs(&store, &enc, &feats);
        let (tokens_rev, pooled_rev) = temporal_outputs(&store, &enc, &rev);
        assert!(pooled.max_abs_diff(&pooled_rev) < 1e-9);
        assert!(reverse_frames(&tokens).max_abs_diff(&tokens_rev) < 1e-9);
    }

    #[test]
    fn video_encoding_shapes() {
        let (cfg, store, enc) = setup(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let x = cx.constant(Tensor::uniform(&[2, 16, 32, 32, 3], 1.0, &mut rng));
        let out = enc.encode(&mut cx, x).unwrap();
        assert_eq!(cx.shape(out.tokens), &[2, 16, cfg.visual_width]);
        assert!(cx.value(out.pooled).is_finite());
    }
}
