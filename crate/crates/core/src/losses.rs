//! Classification cross-entropy, the bidirectional skeleton/text contrastive
//! loss and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::tensor::Tensor;
use crate::Var;

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn classification_loss(cx: &mut Ctx, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = cx.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("classification_loss", &s, &[labels.len()]));
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid("classification_loss", format!("label {bad} out of range for {c} classes")));
    }
    let logp = cx.log_softmax(logits, 1)?;
    let index = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let picked = cx.gather("classification_loss", logp, index, vec![labels.len()])?;
    let mean = cx.mean_all(picked)?;
    cx.scale(mean, -1.0)
}

/// Similarity logits `exp(logit_scale) · cos(s_i, t_j)` as `[B, B]`.
fn similarity_logits(cx: &mut Ctx, s: Var, t: Var, logit_scale: Var) -> Result<Var> {
    let (ss, ts) = (cx.shape(s).to_vec(), cx.shape(t).to_vec());
    if ss.len() != 2 || ss != ts {
        return Err(Error::shape("pairwise_probabilities", &ss, &ts));
    }
    if !cx.shape(logit_scale).is_empty() {
        return Err(Error::invalid("pairwise_probabilities", "logit scale must be a scalar"));
    }
    let s = cx.l2_normalize(s)?;
    let t = cx.l2_normalize(t)?;
    let tt = cx.transpose(t)?;
    let sim = cx.matmul(s, tt)?;
    let scale = cx.exp(logit_scale)?;
    cx.mul(sim, scale)
}

/// Row-softmax probabilities in both directions: `p_s2t[i][j]` over texts
/// for skeleton `i`, `p_t2s[i][j]` over skeletons for text `i`.
pub fn pairwise_probabilities(cx: &mut Ctx, s: Var, t: Var, logit_scale: Var) -> Result<(Var, Var)> {
    let logits = similarity_logits(cx, s, t, logit_scale)?;
    let p_s2t = cx.softmax(logits, 1)?;
    let lt = cx.transpose(logits)?;
    let p_t2s = cx.softmax(lt, 1)?;
    Ok((p_s2t, p_t2s))
}

/// `[B, B]` targets spreading unit mass over same-class entries of each row.
pub fn contrastive_targets(labels: &[usize]) -> Tensor {
    let b = labels.len();
    let mut y = Tensor::zeros(&[b, b]);
    for i in 0..b {
        let same = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
        for j in 0..b {
            if labels[j] == labels[i] {
                y.set(&[i, j], 1.0 / same);
            }
        }
    }
    y
}

/// `½ · mean_i [KL(y_i ‖ p_s2t,i) + KL(y_i ‖ p_t2s,i)]`.
pub fn contrastive_loss(cx: &mut Ctx, s: Var, t: Var, logit_scale: Var, labels: &[usize]) -> Result<Var> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::invalid("contrastive_loss", format!("batch of {b} cannot be contrasted")));
    }
    if cx.shape(s).first() != Some(&b) {
        return Err(Error::shape("contrastive_loss", cx.shape(s), &[b]));
    }
    let logits = similarity_logits(cx, s, t, logit_scale)?;
    let targets = contrastive_targets(labels);
    // Class equality is symmetric, so both directions share the targets.
    let entropy: f64 = targets.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let y = cx.constant(targets);
    let mut ce = Vec::with_capacity(2);
    for transpose in [false, true] {
        let l = if transpose { cx.transpose(logits)? } else { logits };
        let logp = cx.log_softmax(l, 1)?;
        let yl = cx.mul(y, logp)?;
        ce.push(cx.sum_all(yl)?);
    }
    let sum = cx.add(ce[0], ce[1])?;
    // KL = Σ y ln y − Σ y ln p, summed over both directions.
    let neg = cx.scale(sum, -1.0)?;
    let offset = cx.constant(Tensor::scalar(2.0 * entropy));
    let kl = cx.add(neg, offset)?;
    cx.scale(kl, 0.5 / b as f64)
}

/// Scalar breakdown of one loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    /// global, head, hands, hip, legs
    pub parts: [f64; 5],
    pub video: Option<f64>,
    pub tcont: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Combines already-evaluated terms; parts are averaged into `tcont`.
pub fn total_loss(cls: f64, parts: [f64; 5], lambda: f64) -> Result<LossReport> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let tcont = parts.iter().sum::<f64>() / 5.0;
    Ok(LossReport {
        cls,
        parts,
        video: None,
        tcont,
        total: lambda * tcont + cls,
        lambda,
    })
}

/// Differentiable loss terms of one batch.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub parts: Option<[Var; 5]>,
    pub video: Option<Var>,
    pub tcont: Option<Var>,
    pub total: Var,
    pub lambda: f64,
}

impl LossTerms {
    /// `total = λ · tcont + cls`, where `tcont` averages every active
    /// contrastive term. Without any, `total` is `cls` itself.
    pub fn new(cx: &mut Ctx, cls: Var, parts: Option<[Var; 5]>, video: Option<Var>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
        }
        let mut terms: Vec<Var> = parts.iter().flatten().copied().collect();
        terms.extend(video);
        let (tcont, total) = if terms.is_empty() {
            (None, cls)
        } else {
            let mut sum = terms[0];
            for &t in &terms[1..] {
                sum = cx.add(sum, t)?;
            }
            let tcont = cx.scale(sum, 1.0 / terms.len() as f64)?;
            let weighted = cx.scale(tcont, lambda)?;
            (Some(tcont), cx.add(weighted, cls)?)
        };
        Ok(LossTerms {
            cls,
            parts,
            video,
            tcont,
            total,
            lambda,
        })
    }

    pub fn report(&self, cx: &Ctx) -> LossReport {
        let v = |x: Var| cx.value(x).item();
        LossReport {
            cls: v(self.cls),
            parts: self.parts.map_or([0.0; 5], |p| p.map(v)),
            video: self.video.map(v),
            tcont: self.tcont.map_or(0.0, v),
            total: v(self.total),
            lambda: self.lambda,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Mode;
    use crate::params::{ParamKind, ParamStore};
    use crate::{gradcheck, Tape};

    fn eval<T>(f: impl FnOnce(&mut Ctx) -> T) -> T {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        f(&mut cx)
    }

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    #[test]
    fn classification_examples() {
        eval(|cx| {
            let sure = cx.constant(rows(&[&[0.0, 800.0, 0.0]]));
            let l = classification_loss(cx, sure, &[1]).unwrap();
            assert!(cx.value(l).item().abs() < 1e-12);

            let flat = cx.constant(Tensor::zeros(&[2, 5]));
            let l = classification_loss(cx, flat, &[0, 3]).unwrap();
            assert!((cx.value(l).item() - 5f64.ln()).abs() < 1e-12);

            let x = cx.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
            let l = classification_loss(cx, x, &[0, 1]).unwrap();
            let e = 1f64.exp();
            assert!((cx.value(l).item() + (e / (e + 1.0)).ln()).abs() < 1e-12);

            assert!(classification_loss(cx, x, &[0, 2]).is_err());
        });
    }

    fn scale(cx: &mut Ctx, tau: f64) -> Var {
        cx.constant(Tensor::scalar((1.0 / tau).ln()))
    }

    #[test]
    fn pairwise_examples() {
        eval(|cx| {
            let same = cx.constant(Tensor::full(&[3, 4], 0.5));
            let tau = scale(cx, 0.07);
            let (a, b) = pairwise_probabilities(cx, same, same, tau).unwrap();
            for p in [a, b] {
                for v in cx.value(p).data() {
                    assert!((v - 1.0 / 3.0).abs() < 1e-12);
                }
            }

            let eye = cx.constant(Tensor::eye(2));
            let one = scale(cx, 1.0);
            let (a, _) = pairwise_probabilities(cx, eye, eye, one).unwrap();
            let e = 1f64.exp();
            assert!((cx.value(a).get(&[0, 0]) - e / (e + 1.0)).abs() < 1e-12);
            assert!((cx.value(a).get(&[0, 0]) - 0.7311).abs() < 1e-4);

            let s = cx.constant(rows(&[&[1.0, 0.2], &[0.1, 1.0]]));
            let cold = scale(cx, 1e-4);
            let (a, _) = pairwise_probabilities(cx, s, eye, cold).unwrap();
            assert!((cx.value(a).get(&[0, 0]) - 1.0).abs() < 1e-9);
            assert!((cx.value(a).get(&[1, 1]) - 1.0).abs() < 1e-9);

            let zero = cx.constant(rows(&[&[0.0, 0.0], &[1.0, 0.0]]));
            assert!(pairwise_probabilities(cx, zero, eye, one).is_err());
        });
    }

    #[test]
    fn contrastive_examples() {
        eval(|cx| {
            let eye = cx.constant(Tensor::eye(2));
            let one = scale(cx, 1.0);
            let l = contrastive_loss(cx, eye, eye, one, &[0, 1]).unwrap();
            let e = 1f64.exp();
            let want = -(e / (e + 1.0)).ln();
            assert!((cx.value(l).item() - want).abs() < 1e-12);
            assert!((cx.value(l).item() - 0.3133).abs() < 1e-4);

            let eye4 = cx.constant(Tensor::eye(4));
            let cold = scale(cx, 1e-3);
            let l = contrastive_loss(cx, eye4, eye4, cold, &[0, 1, 2, 3]).unwrap();
            assert!(cx.value(l).item() < 1e-12);

            let single = cx.constant(rows(&[&[1.0, 0.0]]));
            assert!(contrastive_loss(cx, single, single, one, &[0]).is_err());
        });
    }

    #[test]
    fn duplicate_classes_share_target_mass() {
        let y = contrastive_targets(&[2, 0, 2]);
        assert_eq!(y.row(0), &[0.5, 0.0, 0.5]);
        assert_eq!(y.row(1), &[0.0, 1.0, 0.0]);
        // Identical same-class features reach the zero minimum.
        eval(|cx| {
            let s = cx.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]));
            let cold = scale(cx, 1e-3);
            let l = contrastive_loss(cx, s, s, cold, &[2, 0, 2]).unwrap();
            assert!(cx.value(l).item().abs() < 1e-9);
        });
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, [0.7; 5], 0.8).unwrap().tcont, 0.7);
        assert_eq!(total_loss(1.25, [3.0, 1.0, 2.0, 0.5, 9.0], 0.0).unwrap().total, 1.25);
        let r = total_loss(2.0, [1.0; 5], 0.8).unwrap();
        assert!((r.total - 2.8).abs() < 1e-15);
        assert!(total_loss(1.0, [1.0; 5], -0.1).is_err());
    }

    #[test]
    fn loss_terms_without_contrast_are_the_classification_loss() {
        eval(|cx| {
            let cls = cx.constant(Tensor::scalar(1.7));
            let terms = LossTerms::new(cx, cls, None, None, 0.8).unwrap();
            assert_eq!(terms.total, cls);
            let r = terms.report(cx);
            assert_eq!(r.total, r.cls);

            let parts = [0.1, 0.2, 0.3, 0.4, 0.5].map(|v| cx.constant(Tensor::scalar(v)));
            let terms = LossTerms::new(cx, cls, Some(parts), None, 0.8).unwrap();
            let r = terms.report(cx);
            assert!((r.tcont - 0.3).abs() < 1e-15);
            assert!((r.total - (1.7 + 0.8 * 0.3)).abs() < 1e-15);
        });
    }

    #[test]
    fn temperature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ls = store.add("logit_scale", Tensor::scalar((1.0f64 / 0.3).ln()), ParamKind::Bias);
        let s0 = store.add("s", Tensor::randn(&[5, 4], 1.0, &mut rng), ParamKind::Weight);
        let t0 = store.add("t", Tensor::randn(&[5, 4], 1.0, &mut rng), ParamKind::Weight);
        let labels = [0, 1, 0, 2, 3];
        let report = gradcheck::check(&mut store, &[ls, s0, t0], 1e-5, 20, |tape, store| {
            let mut cx = Ctx::new(tape, store, Mode::Train);
            let (a, b, c) = (cx.p(s0), cx.p(t0), cx.p(ls));
            contrastive_loss(&mut cx, a, b, c, &labels)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:#?}", report.entries);
    }

    fn random_batch(seed: u64, b: usize, d: usize) -> (Tensor, Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor::randn(&[b, d], 1.0, &mut rng);
        let t = Tensor::randn(&[b, d], 1.0, &mut rng);
        let labels = (0..b).map(|_| rng.random_range(0..4)).collect();
        (s, t, labels)
    }

    proptest! {
        #[test]
        fn probability_rows_sum_to_one(seed in any::<u64>(), b in 2usize..7, tau in 0.01f64..2.0) {
            let (s, t, _) = random_batch(seed, b, 5);
            eval(|cx| {
                let (sv, tv, lv) = (cx.constant(s), cx.constant(t), scale(cx, tau));
                let (a, c) = pairwise_probabilities(cx, sv, tv, lv).unwrap();
                for p in [a, c] {
                    for r in 0..b {
                        let sum: f64 = cx.value(p).row(r).iter().sum();
                        prop_assert!((sum - 1.0).abs() < 1e-9);
                    }
                }
                Ok(())
            })?;
        }

        #[test]
        fn contrastive_loss_is_nonnegative_and_symmetric(seed in any::<u64>(), b in 2usize..7, tau in 0.01f64..2.0) {
            let (s, t, labels) = random_batch(seed, b, 5);
            eval(|cx| {
                let (sv, tv, lv) = (cx.constant(s), cx.constant(t), scale(cx, tau));
                let l = contrastive_loss(cx, sv, tv, lv, &labels).unwrap();
                let swapped = contrastive_loss(cx, tv, sv, lv, &labels).unwrap();
                let (a, c) = (cx.value(l).item(), cx.value(swapped).item());
                prop_assert!(a >= -1e-12);
                prop_assert!((a - c).abs() < 1e-12);
                Ok(())
            })?;
        }

        #[test]
        fn shrinking_temperature_scales_logits(seed in any::<u64>(), k in 1.5f64..8.0) {
            let (s, t, _) = random_batch(seed, 4, 5);
            eval(|cx| {
                let (sv, tv) = (cx.constant(s), cx.constant(t));
                let base = scale(cx, 0.5);
                let sharp = scale(cx, 0.5 / k);
                let a = similarity_logits(cx, sv, tv, base).unwrap();
                let b = similarity_logits(cx, sv, tv, sharp).unwrap();
                for (x, y) in cx.value(a).data().iter().zip(cx.value(b).data()) {
                    prop_assert!((x * k - y).abs() < 1e-9 * y.abs().max(1.0));
                }
                let (pa, _) = pairwise_probabilities(cx, sv, tv, base).unwrap();
                let (pb, _) = pairwise_probabilities(cx, sv, tv, sharp).unwrap();
                let argmax = |r: &[f64]| r.iter().enumerate().fold(0, |m, (i, v)| if *v > r[m] { i } else { m });
                for r in 0..4 {
                    prop_assert_eq!(argmax(cx.value(pa).row(r)), argmax(cx.value(pb).row(r)));
                }
                Ok(())
            })?;
        }
    }
}
