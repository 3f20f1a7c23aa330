//! Training loop, evaluation and saliency inspection.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::checkpoint::Checkpoint;
use crate::data::{stack, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::{argmax_rows, Model};
use crate::nn::{Ctx, Mode};
use crate::optim::{AdamW, AdamWConfig, GroupRates, Schedule};
use crate::params::{ParamStore, RateGroup};
use crate::Tape;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Sample-weighted mean over the epoch's batches.
    pub loss: LossReport,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub fresh_rate: f64,
    pub pretrained_rate: f64,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<(String, usize, usize)>,
}

/// Runs the inference path over a whole split.
pub fn evaluate(model: &Model, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    let c = model.labels.len();
    let mut confusion = vec![vec![0; c]; c];
    let mut predictions = Vec::with_capacity(data.len());
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, store, Mode::Eval);
        let fwd = model.forward(&mut cx, &batch)?;
        let logits = cx.value(fwd.logits);
        if !logits.is_finite() {
            return Err(Error::NonFinite { op: "evaluate" });
        }
        for (&i, p) in chunk.iter().zip(argmax_rows(logits)) {
            let s = &data.samples[i];
            confusion[s.class][p] += 1;
            predictions.push((s.id.clone(), s.class, p));
        }
    }
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    Ok(EvalReport {
        split: data.split,
        accuracy: correct as f64 / data.len() as f64,
        confusion,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSelection {
    pub token: usize,
    /// Encoder output step and the input frames it covers.
    pub step: usize,
    pub frames: [usize; 2],
    pub joint: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub sample: String,
    pub class: usize,
    pub predicted: usize,
    /// Model frame indices kept by the visual downsampler.
    pub visual_frames: Vec<usize>,
    /// The same frames in native (pre-resampling) numbering.
    pub visual_native_frames: Vec<usize>,
    pub skeleton: Vec<SkeletonSelection>,
    pub active_window: Option<[usize; 2]>,
    /// Selected frames whose native index falls inside `active_window`.
    pub visual_in_window: Option<usize>,
}

/// Reconstructs which frames and joint windows survived downsampling.
pub fn saliency(model: &Model, store: &ParamStore, data: &Dataset, id: &str) -> Result<SaliencyReport> {
    let s = &data.samples[data.position(id)?];
    let batch = stack([s])?;
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, store, Mode::Eval);
    let fwd = model.forward(&mut cx, &batch)?;
    let predicted = argmax_rows(cx.value(fwd.logits))[0];
    let visual_frames = fwd.fusion.visual_trace.as_ref().map_or_else(Vec::new, |t| t.survivors(0));
    let visual_native_frames: Vec<usize> = visual_frames.iter().map(|&f| s.indices[f]).collect();
    let skeleton = match (&fwd.fusion.skeleton_trace, &fwd.skeleton) {
        (Some(trace), Some(enc)) => trace
            .survivors(0)
            .into_iter()
            .map(|token| {
                let (step, joint) = enc.reduction.token_coords(token);
                let w = enc.reduction.window(step);
                SkeletonSelection {
                    token,
                    step,
                    frames: [w.start, w.end],
                    joint,
                }
            })
            .collect(),
        _ => Vec::new(),
    };
    let visual_in_window = s
        .active_window
        .map(|[a, b]| visual_native_frames.iter().filter(|&&f| a <= f && f < b).count());
    Ok(SaliencyReport {
        sample: s.id.clone(),
        class: s.class,
        predicted,
        visual_frames,
        visual_native_frames,
        skeleton,
        active_window: s.active_window,
        visual_in_window,
    })
}

/// Epoch shuffle depends only on the seed and the epoch number.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore,
    pub optim: AdamW,
    pub train: Dataset,
    pub test: Option<Dataset>,
    /// Last completed epoch.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, data_dir: &Path) -> Result<Self> {
        config.validate()?;
        let train = Dataset::load(data_dir, Split::Train, config.model.frames)?;
        let test = match train.manifest.split(Split::Test).next() {
            Some(_) => Some(Dataset::load(data_dir, Split::Test, config.model.frames)?),
            None => None,
        };
        let (model, store) = Model::for_manifest(&config.model, &train.manifest, config.seed)?;
        let optim = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            &store,
        );
        Ok(Trainer {
            config,
            model,
            store,
            optim,
            train,
            test,
            epoch: 0,
        })
    }

    /// Loads encoder weights from a prior run; they then train at the
    /// pretrained rate. Returns the number of tensors restored.
    pub fn warm_start(&mut self, ck: &Checkpoint) -> Result<usize> {
        let mut restored = 0;
        for (name, t) in &ck.tensors {
            if !(name.starts_with("skeleton.") || name.starts_with("visual.")) {
                continue;
            }
            let Some(id) = self.store.id(name) else { continue };
            if self.store.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("warm start: `{name}` has a different shape")));
            }
            *self.store.value_mut(id) = t.clone();
            self.store.param_mut(id).group = RateGroup::Pretrained;
            restored += 1;
        }
        if restored == 0 {
            return Err(Error::Checkpoint("warm start: no encoder tensors matched".into()));
        }
        Ok(restored)
    }

    /// Continues an interrupted run from its checkpoint.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.check_config(&self.config.model)?;
        if ck.seed != self.config.seed {
            return Err(Error::Checkpoint(format!("checkpoint seed {} differs from run seed {}", ck.seed, self.config.seed)));
        }
        if ck.labels != self.model.labels {
            return Err(Error::Checkpoint("checkpoint class labels differ from the dataset".into()));
        }
        ck.restore(&mut self.store)?;
        self.optim = ck
            .optimizer(&self.store)?
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        self.epoch = ck.epoch;
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_epochs: self.config.warmup_epochs,
            decay_epochs: self.config.decay_epochs.clone(),
            decay_factor: self.config.decay_factor,
        }
    }

    pub fn rates(&self, epoch: usize) -> GroupRates {
        let m = self.schedule().multiplier(epoch);
        GroupRates {
            fresh: self.config.fresh_rate * m,
            pretrained: self.config.pretrained_rate * m,
        }
    }

    /// Trains one epoch and evaluates.
    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        let epoch = self.epoch + 1;
        let rates = self.rates(epoch);
        let order = epoch_order(self.config.seed, epoch, self.train.len());
        let mut sum = LossSum::default();
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch = self.train.batch(chunk)?;
            let mut tape = Tape::new();
            let at = |cause: String| Error::NonFiniteLoss { epoch, batch: bi, cause };
            let report = {
                let mut cx = Ctx::new(&mut tape, &self.store, Mode::Train);
                let terms = self
                    .model
                    .forward(&mut cx, &batch)
                    .and_then(|fwd| self.model.loss(&mut cx, &fwd, &batch.labels))
                    .map_err(|e| match e {
                        Error::NonFinite { .. } => at(e.to_string()),
                        e => e,
                    })?;
                let report = terms.report(&cx);
                if !report.total.is_finite() {
                    return Err(at(format!("total = {}", report.total)));
                }
                cx.backward(terms.total)?;
                report
            };
            self.store.zero_grads();
            tape.accumulate_param_grads(&mut self.store);
            tape.apply_buffer_updates(&mut self.store);
            self.optim.step(&mut self.store, rates)?;
            sum.add(&report, chunk.len());
        }
        self.epoch = epoch;
        let bs = self.config.batch_size;
        let train_accuracy = evaluate(&self.model, &self.store, &self.train, bs)?.accuracy;
        let test_accuracy = match (&self.test, self.config.eval_each_epoch) {
            (Some(t), true) => Some(evaluate(&self.model, &self.store, t, bs)?.accuracy),
            _ => None,
        };
        Ok(MetricsRecord {
            epoch,
            loss: sum.mean(),
            train_accuracy,
            test_accuracy,
            fresh_rate: rates.fresh,
            pretrained_rate: rates.pretrained,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.epoch, &self.model.labels, &self.store, Some(&self.optim))
    }

    /// Trains until `config.epochs`, appending one metrics line per epoch.
    pub fn fit(&mut self, out: &RunOutputs) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        let mut metrics = out.metrics.as_deref().map(open_append).transpose()?;
        let mut timing = out.timing.as_deref().map(open_append).transpose()?;
        while self.epoch < self.config.epochs {
            let start = Instant::now();
            let rec = self.run_epoch()?;
            if let Some(f) = metrics.as_mut() {
                writeln!(f, "{}", rec.to_line())?;
                f.flush()?;
            }
            if let Some(f) = timing.as_mut() {
                writeln!(f, "{{\"epoch\":{},\"seconds\":{:.3}}}", rec.epoch, start.elapsed().as_secs_f64())?;
            }
            if let Some(p) = &out.checkpoint {
                self.checkpoint().save(p)?;
            }
            let done = self.config.stop_at_full_train_accuracy && rec.train_accuracy >= 1.0;
            records.push(rec);
            if done {
                break;
            }
        }
        if let Some(p) = &out.checkpoint {
            self.checkpoint().save(p)?;
        }
        Ok(records)
    }
}

/// Where a run writes its artifacts; any may be omitted.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub timing: Option<PathBuf>,
}

fn open_append(p: &Path) -> Result<std::fs::File> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::fs::OpenOptions::new().create(true).append(true).open(p)?)
}

#[derive(Default)]
struct LossSum {
    n: usize,
    cls: f64,
    parts: [f64; 5],
    video: Option<f64>,
    tcont: f64,
    total: f64,
    lambda: f64,
}

impl LossSum {
    fn add(&mut self, r: &LossReport, n: usize) {
        let w = n as f64;
        self.n += n;
        self.cls += w * r.cls;
        for (a, b) in self.parts.iter_mut().zip(r.parts) {
            *a += w * b;
        }
        if let Some(v) = r.video {
            *self.video.get_or_insert(0.0) += w * v;
        }
        self.tcont += w * r.tcont;
        self.total += w * r.total;
        self.lambda = r.lambda;
    }

    fn mean(&self) -> LossReport {
        let n = self.n.max(1) as f64;
        LossReport {
            cls: self.cls / n,
            parts: self.parts.map(|p| p / n),
            video: self.video.map(|v| v / n),
            tcont: self.tcont / n,
            total: self.total / n,
            lambda: self.lambda,
        }
    }
}
