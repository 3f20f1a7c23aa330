//! Full network: both encoders, the fusion classifier and the
//! training-only text branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{Batch, Manifest};
use crate::error::{Error, Result};
use crate::fusion::{FusionModule, FusionOutput};
use crate::losses::{classification_loss, contrastive_loss, LossTerms};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::skeleton::{LimbPartition, SkeletonEncoder, SkeletonEncoding, SkeletonGraph};
use crate::tensor::Tensor;
use crate::text::TextModule;
use crate::visual::{VisualEncoder, VisualEncoding};
use crate::Var;

pub struct Model {
    pub config: ModelConfig,
    pub labels: Vec<String>,
    pub skeleton: Option<SkeletonEncoder>,
    pub visual: Option<VisualEncoder>,
    pub fusion: FusionModule,
    pub text: TextModule,
    /// Log inverse temperature of the contrastive similarities.
    pub logit_scale: ParamId,
}

/// Everything the inference path produces for one batch.
pub struct Forward {
    pub logits: Var,
    pub skeleton: Option<SkeletonEncoding>,
    pub visual: Option<VisualEncoding>,
    pub fusion: FusionOutput,
}

impl Model {
    /// Builds the model and its parameter table from `seed`.
    pub fn new(
        config: &ModelConfig,
        graph: &SkeletonGraph,
        partition: &LimbPartition,
        labels: &[String],
        seed: u64,
    ) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let skeleton = config
            .modality
            .uses_skeleton()
            .then(|| SkeletonEncoder::new(&mut store, &mut rng, config, graph, partition))
            .transpose()?;
        let visual = config
            .modality
            .uses_video()
            .then(|| VisualEncoder::new(&mut store, &mut rng, config))
            .transpose()?;
        let fusion = FusionModule::new(&mut store, &mut rng, config, labels.len())?;
        let text = TextModule::new(&mut store, &mut rng, config, labels)?;
        let logit_scale = store.add(
            "text.logit_scale",
            Tensor::scalar((1.0 / config.init_temperature).ln()),
            ParamKind::Bias,
        );
        if !config.learnable_prompts {
            for bank in &text.banks {
                store.param_mut(bank.context).trainable = false;
            }
        }
        let model = Model {
            config: config.clone(),
            labels: labels.to_vec(),
            skeleton,
            visual,
            fusion,
            text,
            logit_scale,
        };
        Ok((model, store))
    }

    /// Builds against a dataset manifest, checking its geometry first.
    pub fn for_manifest(config: &ModelConfig, manifest: &Manifest, seed: u64) -> Result<(Model, ParamStore)> {
        check_geometry(config, manifest)?;
        Model::new(config, &manifest.graph()?, &manifest.partition, &manifest.labels(), seed)
    }

    /// Inference path: encoders and fusion only.
    pub fn forward(&self, cx: &mut Ctx, batch: &Batch) -> Result<Forward> {
        let skeleton = match &self.skeleton {
            Some(enc) => {
                let x = cx.constant(batch.skeleton.clone());
                Some(enc.encode(cx, x)?)
            }
            None => None,
        };
        let visual = match &self.visual {
            Some(enc) => {
                let x = cx.constant(batch.frames.clone());
                Some(enc.encode(cx, x)?)
            }
            None => None,
        };
        let fusion = self.fusion.forward(
            cx,
            skeleton.as_ref().map(|s| s.tokens),
            visual.as_ref().map(|v| v.tokens),
        )?;
        Ok(Forward {
            logits: fusion.logits,
            skeleton,
            visual,
            fusion,
        })
    }

    /// Classification loss plus every enabled contrastive term.
    pub fn loss(&self, cx: &mut Ctx, fwd: &Forward, labels: &[usize]) -> Result<LossTerms> {
        let cls = classification_loss(cx, fwd.logits, labels)?;
        let cfg = &self.config;
        let contrast = labels.len() >= 2 && cfg.text_supervision();
        let mut parts = None;
        let mut video = None;
        if contrast {
            let scale = cx.p(self.logit_scale);
            let skel = fwd.skeleton.as_ref().filter(|_| cfg.text_sup_skeleton);
            let shifts = match skel {
                Some(s) => self.text.shifts(cx, s.global, &s.limbs)?,
                None => [None; 5],
            };
            let texts = self.text.features(cx, labels, &shifts)?;
            if let Some(s) = skel {
                let feats = [s.global, s.limbs[0], s.limbs[1], s.limbs[2], s.limbs[3]];
                let mut out = Vec::with_capacity(5);
                for (f, t) in feats.iter().zip(&texts) {
                    out.push(contrastive_loss(cx, *f, *t, scale, labels)?);
                }
                parts = Some(out.try_into().expect("five parts"));
            }
            if let (true, Some(v)) = (cfg.text_sup_video, &fwd.visual) {
                video = Some(contrastive_loss(cx, v.pooled, texts[0], scale, labels)?);
            }
        }
        LossTerms::new(cx, cls, parts, video, cfg.lambda)
    }

    /// Parameter-name prefixes that inference must never read.
    pub fn training_only_prefix() -> &'static str {
        TextModule::PREFIX
    }
}

/// Dataset and model must agree on joints, persons, frame size and classes.
pub fn check_geometry(config: &ModelConfig, manifest: &Manifest) -> Result<()> {
    let fail = |m: String| Err(Error::Dataset(format!("geometry mismatch: {m}")));
    if manifest.joints != config.joints {
        return fail(format!("dataset has {} joints, model expects {}", manifest.joints, config.joints));
    }
    if manifest.persons != config.persons {
        return fail(format!("dataset has {} persons, model expects {}", manifest.persons, config.persons));
    }
    let f = manifest.frames;
    if f.height != config.image_size || f.width != config.image_size {
        return fail(format!(
            "dataset frames are {}×{}, model expects {}×{}",
            f.height, f.width, config.image_size, config.image_size
        ));
    }
    Ok(())
}

/// Index of the largest logit per row; ties go to the lowest class.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
