//! Synthetic skeleton + video dataset with controllable modality informativeness.
//!
//! Each class owns a motion signature (which limb swings, how fast, in which
//! direction) and a static distractor pattern. Depending on [`SynthMode`] a
//! sample's skeleton, rendered video and distractor follow its own class or a
//! decoy class.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::blob::{Blob, Payload};
use super::manifest::{ClassEntry, FrameGeometry, Manifest, SampleRecord, Split, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::skeleton::{Limb, SkeletonTemplate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthMode {
    Both,
    SkeletonOnly,
    VisualOnly,
    Complementary,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(SynthMode::Both),
            "skeleton-only" => Ok(SynthMode::SkeletonOnly),
            "visual-only" => Ok(SynthMode::VisualOnly),
            "complementary" => Ok(SynthMode::Complementary),
            _ => Err(Error::Config(format!("unknown synth mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub joints: usize,
    pub native_frames: usize,
    pub height: usize,
    pub width: usize,
    pub mode: SynthMode,
    /// Standard deviation of coordinate noise in metres.
    pub noise: f64,
    /// Native frame range `[start, end)` outside which every sample is at rest.
    pub motion_window: Option<[usize; 2]>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            per_class: 20,
            joints: 11,
            native_frames: 32,
            height: 32,
            width: 32,
            mode: SynthMode::Both,
            noise: 0.01,
            motion_window: None,
        }
    }
}

const TRAIN_FRACTION: f64 = 0.75;

/// Which class drives each part of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Signatures {
    skeleton: usize,
    video: usize,
    distractor: usize,
}

#[derive(Clone, Debug)]
struct ClassMotion {
    /// Per-limb swing amplitude, phase and unit direction.
    amplitude: [f64; 4],
    phase: [f64; 4],
    direction: [[f64; 3]; 4],
    /// Cycles per clip.
    frequency: f64,
    /// Static distractor blob centres in `[0, 1]²`.
    distractor: Vec<[f64; 2]>,
}

struct Jitter {
    phase: f64,
    gain: f64,
}

impl SynthSpec {
    pub fn template(&self) -> Result<SkeletonTemplate> {
        let name = match self.joints {
            11 => "toy11",
            20 => "kinect20",
            25 => "ntu25",
            34 => "body34",
            j => return Err(Error::Config(format!("no skeleton template with {j} joints (use 11, 20, 25 or 34)"))),
        };
        Ok(SkeletonTemplate::by_name(name).expect("known template"))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.classes < 2 {
            return fail("need at least 2 classes".into());
        }
        if self.mode == SynthMode::Complementary && self.classes % 2 != 0 {
            return fail("complementary mode needs an even class count".into());
        }
        if self.per_class < 2 {
            return fail("need at least 2 samples per class for a train/test split".into());
        }
        if self.native_frames == 0 {
            return fail("native_frames must be positive".into());
        }
        if self.height < 4 || self.width < 4 {
            return fail("frames must be at least 4×4".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return fail("noise must be finite and non-negative".into());
        }
        if let Some([a, b]) = self.motion_window {
            if a >= b || b > self.native_frames {
                return fail(format!("motion window [{a}, {b}) outside {} frames", self.native_frames));
            }
        }
        self.template()?;
        Ok(())
    }

    /// Training samples per class; the rest go to the test split.
    pub fn train_per_class(&self) -> usize {
        let n = (self.per_class as f64 * TRAIN_FRACTION).round() as usize;
        n.clamp(1, self.per_class - 1)
    }

    fn signatures<R: Rng>(&self, class: usize, rng: &mut R) -> Signatures {
        let c = self.classes;
        match self.mode {
            SynthMode::Both => Signatures {
                skeleton: class,
                video: class,
                distractor: class,
            },
            SynthMode::SkeletonOnly => Signatures {
                skeleton: class,
                video: rng.random_range(0..c),
                distractor: rng.random_range(0..c),
            },
            SynthMode::VisualOnly => Signatures {
                skeleton: rng.random_range(0..c),
                video: class,
                distractor: class,
            },
            SynthMode::Complementary => {
                let pair = class / 2;
                let lead = 2 * pair;
                if pair % 2 == 0 {
                    Signatures {
                        skeleton: class,
                        video: lead,
                        distractor: lead,
                    }
                } else {
                    Signatures {
                        skeleton: lead,
                        video: class,
                        distractor: class,
                    }
                }
            }
        }
    }

    /// Writes `manifest.toml` and all blobs under `root`.
    pub fn generate(&self, root: &Path, seed: u64) -> Result<Manifest> {
        self.validate()?;
        let template = self.template()?;
        let rest = rest_pose(&template);
        let motions: Vec<ClassMotion> = (0..self.classes).map(|k| class_motion(seed, k)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = self.train_per_class();

        let mut samples = Vec::with_capacity(self.classes * self.per_class);
        for class in 0..self.classes {
            for i in 0..self.per_class {
                let id = format!("c{class:02}_s{i:03}");
                let sig = self.signatures(class, &mut rng);
                let jitter = Jitter {
                    phase: 0.2 * rng.sample::<f64, _>(StandardNormal),
                    gain: 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal),
                };
                let skel = self.trajectory(&template, &rest, &motions[sig.skeleton], &jitter);
                let shown = if sig.video == sig.skeleton {
                    skel.clone()
                } else {
                    self.trajectory(&template, &rest, &motions[sig.video], &jitter)
                };
                let mut coords: Vec<f32> = Vec::with_capacity(skel.len() * 3);
                for pose in &skel {
                    for &c in pose.iter().flatten() {
                        coords.push((c + self.noise * rng.sample::<f64, _>(StandardNormal)) as f32);
                    }
                }
                let pixels = self.render(&template, &shown, &motions[sig.distractor], &mut rng);

                let skeleton = format!("skeleton/{id}.sfhb");
                let frames = format!("frames/{id}.sfhb");
                let j = template.joints;
                Blob::new(vec![self.native_frames, 1, j, 3], Payload::Skeleton(coords))?.write(&root.join(&skeleton))?;
                Blob::new(vec![self.native_frames, self.height, self.width, 3], Payload::Frames(pixels))?
                    .write(&root.join(&frames))?;
                samples.push(SampleRecord {
                    id,
                    class,
                    split: if i < train { Split::Train } else { Split::Test },
                    skeleton,
                    frames,
                    native_frames: self.native_frames,
                    crop: None,
                    active_window: self.motion_window,
                });
            }
        }

        let manifest = Manifest {
            version: MANIFEST_VERSION.to_string(),
            joints: template.joints,
            persons: 1,
            root_joint: template.root,
            edges: template.edges.iter().map(|&(a, b)| [a, b]).collect(),
            partition: template.partition.clone(),
            frames: FrameGeometry {
                height: self.height,
                width: self.width,
            },
            classes: (0..self.classes)
                .map(|id| ClassEntry {
                    id,
                    label: class_label(id),
                })
                .collect(),
            samples,
        };
        manifest.validate()?;
        manifest.save(root)?;
        Ok(manifest)
    }

    /// Joint positions `[T_native][J]` for one motion signature.
    fn trajectory(&self, template: &SkeletonTemplate, rest: &[[f64; 3]], m: &ClassMotion, jit: &Jitter) -> Vec<Vec<[f64; 3]>> {
        let tn = self.native_frames;
        let [a, b] = self.motion_window.unwrap_or([0, tn]);
        (0..tn)
            .map(|t| {
                let (tau, envelope) = if t < a || t >= b {
                    (0.0, 0.0)
                } else {
                    let tau = (t - a) as f64 / (b - a) as f64;
                    let env = if self.motion_window.is_some() { (PI * (t - a) as f64 / (b - a - 1).max(1) as f64).sin().max(0.2) } else { 1.0 };
                    (tau, env)
                };
                let mut pose = rest.to_vec();
                for (li, limb) in Limb::ALL.iter().enumerate() {
                    for (rank, &q) in template.partition.joints(*limb).iter().enumerate() {
                        let angle = 2.0 * PI * m.frequency * tau + m.phase[li] + jit.phase + 0.4 * rank as f64;
                        let s = envelope * jit.gain * m.amplitude[li] * angle.sin();
                        for c in 0..3 {
                            pose[q][c] += s * m.direction[li][c];
                        }
                    }
                }
                pose
            })
            .collect()
    }

    /// RGB frames: joints in red, hand joints in green, distractor in blue.
    fn render<R: Rng>(&self, template: &SkeletonTemplate, traj: &[Vec<[f64; 3]>], m: &ClassMotion, rng: &mut R) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let scale = h.min(w) as f64;
        let sigma = (scale / 32.0).max(0.6);
        let hands = template.partition.joints(Limb::Hands);
        let mut distractor = vec![0.0; h * w];
        for &[cx, cy] in &m.distractor {
            splat(&mut distractor, h, w, cy * h as f64, cx * w as f64, 2.0 * sigma);
        }
        let mut out = Vec::with_capacity(traj.len() * h * w * 3);
        for pose in traj {
            let mut body = vec![0.0; h * w];
            let mut hand = vec![0.0; h * w];
            for (q, p) in pose.iter().enumerate() {
                let u = w as f64 / 2.0 + p[0] * scale / 2.4;
                let v = h as f64 * 0.45 - p[1] * scale / 2.4;
                splat(&mut body, h, w, v, u, sigma);
                if hands.contains(&q) {
                    splat(&mut hand, h, w, v, u, sigma);
                }
            }
            for i in 0..h * w {
                for ch in [body[i], hand[i], distractor[i]] {
                    let v = ch.min(1.0) * 255.0 + 4.0 * rng.sample::<f64, _>(StandardNormal);
                    out.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }
}

pub fn class_label(id: usize) -> String {
    const VERBS: [&str; 8] = ["wave", "kick", "nod", "bow", "clap", "stomp", "shrug", "sway"];
    let verb = VERBS[id % VERBS.len()];
    match id / VERBS.len() {
        0 => verb.to_string(),
        r => format!("{verb} variant {r}"),
    }
}

fn splat(img: &mut [f64], h: usize, w: usize, v: f64, u: f64, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let (vi, ui) = (v.round() as isize, u.round() as isize);
    for y in (vi - r).max(0)..(vi + r + 1).min(h as isize) {
        for x in (ui - r).max(0)..(ui + r + 1).min(w as isize) {
            let d2 = (y as f64 - v).powi(2) + (x as f64 - u).powi(2);
            img[y as usize * w + x as usize] += (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
}

/// Stick-figure rest pose laid out by limb group.
fn rest_pose(t: &SkeletonTemplate) -> Vec<[f64; 3]> {
    let mut pose = vec![[0.0; 3]; t.joints];
    let p = &t.partition;
    for (i, &q) in p.hip.iter().enumerate() {
        pose[q] = [0.0, 0.12 * i as f64, 0.0];
    }
    for (i, &q) in p.head.iter().enumerate() {
        pose[q] = [0.0, 0.7 + 0.1 * i as f64, 0.0];
    }
    for (i, &q) in p.hands.iter().enumerate() {
        let side = if i % 2 == 0 { -1.0 } else { 1.0 };
        pose[q] = [side * (0.2 + 0.12 * (i / 2) as f64), 0.5 - 0.04 * (i / 2) as f64, 0.0];
    }
    for (i, &q) in p.legs.iter().enumerate() {
        let side = if i % 2 == 0 { -1.0 } else { 1.0 };
        pose[q] = [side * 0.15, -0.2 - 0.15 * (i / 2) as f64, 0.0];
    }
    pose
}

fn class_motion(seed: u64, class: usize) -> ClassMotion {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (class as u64 + 1));
    let lead = class % 4;
    let mut amplitude = [0.0; 4];
    let mut phase = [0.0; 4];
    let mut direction = [[0.0; 3]; 4];
    for li in 0..4 {
        amplitude[li] = if li == lead { 0.3 } else { 0.04 + 0.04 * rng.random::<f64>() };
        phase[li] = 2.0 * PI * rng.random::<f64>();
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        direction[li] = v.map(|x| x / n);
    }
    let frequency = 1.0 + ((class / 4) % 3) as f64 + 0.25 * rng.random::<f64>();
    let distractor = (0..3).map(|_| [0.1 + 0.8 * rng.random::<f64>(), 0.1 + 0.8 * rng.random::<f64>()]).collect();
    ClassMotion {
        amplitude,
        phase,
        direction,
        frequency,
        distractor,
    }
}
