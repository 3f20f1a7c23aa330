//! Skeleton encoder: graph convolutions over the joint graph interleaved
//! with multi-scale temporal convolutions.
//!
//! Activations are kept channels-last as `[batch, time, joint, channel]`.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::Var;

/// Undirected joint graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    joints: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Tensor,
}

impl SkeletonGraph {
    pub fn new(joints: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if joints == 0 {
            return Err(Error::invalid("skeleton_graph", "graph needs at least one joint"));
        }
        let mut adjacency = Tensor::zeros(&[joints, joints]);
        for &(a, b) in edges {
            if a >= joints || b >= joints {
                return Err(Error::invalid("skeleton_graph", format!("edge ({a}, {b}) outside {joints} joints")));
            }
            if a == b {
                return Err(Error::invalid("skeleton_graph", format!("self edge on joint {a}")));
            }
            adjacency.set(&[a, b], 1.0);
            adjacency.set(&[b, a], 1.0);
        }
        Ok(SkeletonGraph {
            joints,
            edges: edges.to_vec(),
            adjacency,
        })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn normalized_adjacency(&self) -> Result<Tensor> {
        normalize_adjacency(&self.adjacency)
    }
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` where `D̂` is the degree matrix of `A + I`.
pub fn normalize_adjacency(adjacency: &Tensor) -> Result<Tensor> {
    let s = adjacency.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::invalid("normalize_adjacency", format!("adjacency must be square, got {s:?}")));
    }
    let n = s[0];
    for i in 0..n {
        for j in 0..n {
            let v = adjacency.get(&[i, j]);
            if v != 0.0 && v != 1.0 {
                return Err(Error::invalid("normalize_adjacency", format!("entry ({i}, {j}) = {v} is not 0/1")));
            }
            if v != adjacency.get(&[j, i]) {
                return Err(Error::invalid("normalize_adjacency", format!("not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut a_hat = adjacency.clone();
    for i in 0..n {
        a_hat.set(&[i, i], 1.0);
    }
    let deg: Vec<f64> = (0..n).map(|i| a_hat.row(i).iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = a_hat.get(&[i, j]) / (deg[i] * deg[j]).sqrt();
            a_hat.set(&[i, j], v);
        }
    }
    Ok(a_hat)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Limb {
    Head,
    Hands,
    Hip,
    Legs,
}

impl Limb {
    pub const ALL: [Limb; 4] = [Limb::Head, Limb::Hands, Limb::Hip, Limb::Legs];

    pub fn name(self) -> &'static str {
        match self {
            Limb::Head => "head",
            Limb::Hands => "hands",
            Limb::Hip => "hip",
            Limb::Legs => "legs",
        }
    }
}

/// Joint indices belonging to each limb group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimbPartition {
    pub head: Vec<usize>,
    pub hands: Vec<usize>,
    pub hip: Vec<usize>,
    pub legs: Vec<usize>,
}

impl LimbPartition {
    pub fn joints(&self, limb: Limb) -> &[usize] {
        match limb {
            Limb::Head => &self.head,
            Limb::Hands => &self.hands,
            Limb::Hip => &self.hip,
            Limb::Legs => &self.legs,
        }
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        let mut owner = vec![None; joints];
        for limb in Limb::ALL {
            let set = self.joints(limb);
            if set.is_empty() {
                return Err(Error::Config(format!("limb `{}` has no joints", limb.name())));
            }
            for &j in set {
                if j >= joints {
                    return Err(Error::Config(format!("limb `{}` joint {j} outside {joints} joints", limb.name())));
                }
                if let Some(other) = owner[j].replace(limb) {
                    return Err(Error::Config(format!(
                        "joint {j} in both `{}` and `{}`",
                        Limb::name(other),
                        limb.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A joint layout with its bones and limb grouping.
#[derive(Clone, Debug)]
pub struct SkeletonTemplate {
    pub name: &'static str,
    pub joints: usize,
    pub edges: Vec<(usize, usize)>,
    pub partition: LimbPartition,
    /// Joint used to centre each frame.
    pub root: usize,
}

impl SkeletonTemplate {
    pub fn graph(&self) -> SkeletonGraph {
        SkeletonGraph::new(self.joints, &self.edges).expect("template edges are valid")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "ntu25" => Some(Self::ntu25()),
            "kinect20" => Some(Self::kinect20()),
            "body34" => Some(Self::body34()),
            "toy11" => Some(Self::toy11()),
            _ => None,
        }
    }

    /// 25-joint Kinect v2 layout.
    pub fn ntu25() -> Self {
        // 1-based bone list.
        let bones = [
            (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
            (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15),
            (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8), (24, 25), (25, 12),
        ];
        SkeletonTemplate {
            name: "ntu25",
            joints: 25,
            edges: bones.iter().map(|&(a, b)| (a - 1, b - 1)).collect(),
            partition: LimbPartition {
                head: vec![2, 3],
                hands: vec![4, 5, 6, 7, 8, 9, 10, 11, 21, 22, 23, 24],
                hip: vec![0, 1, 12, 16, 20],
                legs: vec![13, 14, 15, 17, 18, 19],
            },
            root: 0,
        }
    }

    /// 20-joint Kinect v1 layout.
    pub fn kinect20() -> Self {
        let bones = [
            (1, 2), (2, 3), (3, 4), (3, 5), (5, 6), (6, 7), (7, 8), (3, 9), (9, 10), (10, 11),
            (11, 12), (1, 13), (13, 14), (14, 15), (15, 16), (1, 17), (17, 18), (18, 19), (19, 20),
        ];
        SkeletonTemplate {
            name: "kinect20",
            joints: 20,
            edges: bones.iter().map(|&(a, b)| (a - 1, b - 1)).collect(),
            partition: LimbPartition {
                head: vec![2, 3],
                hands: vec![4, 5, 6, 7, 8, 9, 10, 11],
                hip: vec![0, 1, 12, 16],
                legs: vec![13, 14, 15, 17, 18, 19],
            },
            root: 0,
        }
    }

    /// 34-joint stereo body-tracking layout.
    pub fn body34() -> Self {
        let edges = vec![
            (0, 1), (1, 2), (2, 3), (2, 4), (4, 5), (5, 6), (6, 7), (7, 8), (8, 9), (7, 10),
            (2, 11), (11, 12), (12, 13), (13, 14), (14, 15), (15, 16), (14, 17), (0, 18),
            (18, 19), (19, 20), (20, 21), (0, 22), (22, 23), (23, 24), (24, 25), (3, 26),
            (26, 27), (27, 28), (28, 29), (27, 30), (30, 31), (20, 32), (24, 33),
        ];
        SkeletonTemplate {
            name: "body34",
            joints: 34,
            edges,
            partition: LimbPartition {
                head: vec![3, 26, 27, 28, 29, 30, 31],
                hands: (4..=17).collect(),
                hip: vec![0, 1, 2, 18, 22],
                legs: vec![19, 20, 21, 23, 24, 25, 32, 33],
            },
            root: 0,
        }
    }

    /// Minimal 11-joint stick figure used by the synthetic generator.
    pub fn toy11() -> Self {
        SkeletonTemplate {
            name: "toy11",
            joints: 11,
            edges: vec![(0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (0, 7), (7, 8), (0, 9), (9, 10)],
            partition: LimbPartition {
                head: vec![2],
                hands: vec![3, 4, 5, 6],
                hip: vec![0, 1],
                legs: vec![7, 8, 9, 10],
            },
            root: 0,
        }
    }
}

/// One graph convolution `ReLU(Â · H · W)` over the joint axis of `[.., J, F]`.
pub fn gc_layer(cx: &mut Ctx, h: Var, norm_adj: Var, weight: Var) -> Result<Var> {
    let hs = cx.shape(h).to_vec();
    let js = cx.shape(norm_adj).to_vec();
    if hs.len() < 2 || js.len() != 2 || js[0] != js[1] || js[0] != hs[hs.len() - 2] {
        return Err(Error::shape("gc_layer", &hs, &js));
    }
    let hw = cx.matmul(h, weight)?;
    let mixed = mix_joints(cx, hw, norm_adj)?;
    cx.relu(mixed)
}

/// `Â · X` applied independently to every `[J, F]` slice of `x`.
fn mix_joints(cx: &mut Ctx, x: Var, norm_adj: Var) -> Result<Var> {
    let xt = cx.transpose(x)?;
    let at = cx.transpose(norm_adj)?;
    let y = cx.matmul(xt, at)?;
    cx.transpose(y)
}

/// Temporal convolution weights `[K, C_in, C_out]` plus bias.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub dilation: usize,
}

impl TemporalConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let bound = (6.0 / ((c_in + c_out) * kernel) as f64).sqrt();
        TemporalConv {
            weight: store.add(format!("{name}.weight"), Tensor::uniform(&[kernel, c_in, c_out], bound, rng), ParamKind::Weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), ParamKind::Bias),
            kernel,
            dilation,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        let pad = self.dilation * (self.kernel - 1) / 2;
        cx.conv_temporal(x, w, Some(b), stride, self.dilation, pad)
    }
}

/// Multi-scale temporal convolution: max-pool, dilation-1, dilation-2 and
/// plain 1×1 branches, each behind its own 1×1 channel reduction, joined by
/// channel concatenation.
#[derive(Clone, Debug)]
pub struct MtcBlock {
    pub reduce: [TemporalConv; 4],
    pub dilated: [TemporalConv; 2],
    pub branch_width: usize,
}

impl MtcBlock {
    pub const KERNEL: usize = 3;
    pub const MAX_DILATION: usize = 2;

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        if c_out % 4 != 0 {
            return Err(Error::Config(format!("{name}: output width {c_out} not divisible by 4 branches")));
        }
        let bw = c_out / 4;
        let reduce = std::array::from_fn(|i| TemporalConv::new(store, rng, &format!("{name}.reduce{i}"), c_in, bw, 1, 1));
        let dilated = std::array::from_fn(|i| {
            TemporalConv::new(store, rng, &format!("{name}.dilated{}", i + 1), bw, bw, Self::KERNEL, i + 1)
        });
        Ok(MtcBlock {
            reduce,
            dilated,
            branch_width: bw,
        })
    }

    /// Shortest sequence the widest branch can cover.
    pub fn receptive_field() -> usize {
        Self::MAX_DILATION * (Self::KERNEL - 1) + 1
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, stride: usize) -> Result<Var> {
        let t = cx.shape(x)[1];
        let need = Self::receptive_field();
        if t < need {
            return Err(Error::invalid(
                "mtc_block",
                format!("sequence of {t} frames is shorter than the minimum length {need}"),
            ));
        }
        // Max-pool branch.
        let r0 = self.reduce[0].forward(cx, x, 1)?;
        let r0 = cx.relu(r0)?;
        let b0 = cx.max_pool_temporal(r0, Self::KERNEL, stride, 1)?;
        // Dilated branches.
        let mut outs = vec![b0];
        for (i, conv) in self.dilated.iter().enumerate() {
            let r = self.reduce[i + 1].forward(cx, x, 1)?;
            let r = cx.relu(r)?;
            outs.push(conv.forward(cx, r, stride)?);
        }
        // Plain 1×1 branch carries the stride itself.
        outs.push(self.reduce[3].forward(cx, x, stride)?);
        cx.concat(&outs, 3)
    }
}

/// Graph convolution followed by an MTC block with a residual connection.
#[derive(Clone, Debug)]
pub struct GcMtcStage {
    pub gc_weight: ParamId,
    pub mtc: MtcBlock,
    pub residual: Option<TemporalConv>,
    pub stride: usize,
}

impl GcMtcStage {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, stage: Stage) -> Result<Self> {
        let bound = (6.0 / (c_in + stage.channels) as f64).sqrt();
        let gc_weight = store.add(
            format!("{name}.gc.weight"),
            Tensor::uniform(&[c_in, stage.channels], bound, rng),
            ParamKind::Weight,
        );
        let mtc = MtcBlock::new(store, rng, &format!("{name}.mtc"), stage.channels, stage.channels)?;
        let residual = (c_in != stage.channels || stage.stride != 1)
            .then(|| TemporalConv::new(store, rng, &format!("{name}.residual"), c_in, stage.channels, 1, 1));
        Ok(GcMtcStage {
            gc_weight,
            mtc,
            residual,
            stride: stage.stride,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, norm_adj: Var) -> Result<Var> {
        let w = cx.p(self.gc_weight);
        let h = gc_layer(cx, x, norm_adj, w)?;
        let y = self.mtc.forward(cx, h, self.stride)?;
        let res = match &self.residual {
            Some(conv) => conv.forward(cx, x, self.stride)?,
            None => x,
        };
        let sum = cx.add(y, res)?;
        cx.relu(sum)
    }
}

/// Output of [`SkeletonEncoder::encode`].
#[derive(Clone, Debug)]
pub struct SkeletonEncoding {
    /// `[B, T'·J, C_s]`, time-major: token `t'·J + j`.
    pub tokens: Var,
    /// `[B, d_e]`
    pub global: Var,
    /// `[B, d_e]` per limb, in [`Limb::ALL`] order.
    pub limbs: [Var; 4],
    /// `[B·N, T, J, stem]` joint-local embedding before any graph mixing.
    pub embedding: Var,
    pub reduction: TemporalReduction,
}

/// Mapping from token time index back to input frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalReduction {
    pub frames_in: usize,
    pub frames_out: usize,
    pub joints: usize,
    pub total_stride: usize,
}

impl TemporalReduction {
    /// Input frames summarized by output time step `t`.
    pub fn window(&self, t: usize) -> Range<usize> {
        let start = t * self.total_stride;
        start..(start + self.total_stride).min(self.frames_in)
    }

    /// `(time step, joint)` of a token index.
    pub fn token_coords(&self, token: usize) -> (usize, usize) {
        (token / self.joints, token % self.joints)
    }
}

#[derive(Clone, Debug)]
pub struct SkeletonEncoder {
    pub stem: Linear,
    pub stages: Vec<GcMtcStage>,
    pub global_proj: Linear,
    pub limb_proj: [Linear; 4],
    pub norm_adj: Tensor,
    pub partition: LimbPartition,
    pub joints: usize,
    pub persons: usize,
    pub frames: usize,
}

impl SkeletonEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ModelConfig,
        graph: &SkeletonGraph,
        partition: &LimbPartition,
    ) -> Result<Self> {
        if graph.joints() != cfg.joints {
            return Err(Error::Config(format!(
                "graph has {} joints, config expects {}",
                graph.joints(),
                cfg.joints
            )));
        }
        partition.validate(cfg.joints)?;
        let stem = Linear::new(store, rng, "skeleton.stem", 3, cfg.skeleton_stem, true);
        let mut c_in = cfg.skeleton_stem;
        let mut stages = Vec::new();
        for (i, &stage) in cfg.skeleton_stages.iter().enumerate() {
            stages.push(GcMtcStage::new(store, rng, &format!("skeleton.stage{i}"), c_in, stage)?);
            c_in = stage.channels;
        }
        let global_proj = Linear::new(store, rng, "skeleton.global_proj", c_in, cfg.embed_dim, true);
        let limb_proj = Limb::ALL.map(|l| Linear::new(store, rng, &format!("skeleton.{}_proj", l.name()), c_in, cfg.embed_dim, true));
        Ok(SkeletonEncoder {
            stem,
            stages,
            global_proj,
            limb_proj,
            norm_adj: graph.normalized_adjacency()?,
            partition: partition.clone(),
            joints: cfg.joints,
            persons: cfg.persons,
            frames: cfg.frames,
        })
    }

    /// Encodes `[B, N, T, J, 3]` joint coordinates.
    pub fn encode(&self, cx: &mut Ctx, coords: Var) -> Result<SkeletonEncoding> {
        let s = cx.shape(coords).to_vec();
        if s.len() != 5 || s[4] != 3 {
            return Err(Error::invalid("encode_skeleton", format!("expected [B, N, T, J, 3], got {s:?}")));
        }
        if s[3] != self.joints {
            return Err(Error::shape("encode_skeleton", &[self.joints], &[s[3]]));
        }
        if s[1] != self.persons || s[2] != self.frames {
            return Err(Error::invalid(
                "encode_skeleton",
                format!("expected {} persons × {} frames, got {s:?}", self.persons, self.frames),
            ));
        }
        let (b, n, t, j) = (s[0], s[1], s[2], s[3]);
        let x = cx.reshape(coords, &[b * n, t, j, 3])?;
        let embedding = self.stem.forward(cx, x)?;
        let mut h = cx.relu(embedding)?;
        let adj = cx.constant(self.norm_adj.clone());
        for stage in &self.stages {
            h = stage.forward(cx, h, adj)?;
        }
        let hs = cx.shape(h).to_vec();
        let (t_out, c) = (hs[1], hs[3]);
        let grid = if n == 1 {
            h
        } else {
            // Shared weights per person, merged by element-wise max.
            let per = cx.reshape(h, &[b, n, t_out, j, c])?;
            let mut merged = cx.select(per, 1, &[0])?;
            for p in 1..n {
                let other = cx.select(per, 1, &[p])?;
                merged = cx.maximum(merged, other)?;
            }
            cx.reshape(merged, &[b, t_out, j, c])?
        };
        let tokens = cx.reshape(grid, &[b, t_out * j, c])?;
        let pooled = cx.mean(tokens, 1)?;
        let global = self.global_proj.forward(cx, pooled)?;
        let mut limbs = Vec::with_capacity(4);
        for (limb, proj) in Limb::ALL.iter().zip(&self.limb_proj) {
            let idx = self.partition.joints(*limb);
            let part = cx.select(grid, 2, idx)?;
            let part = cx.reshape(part, &[b, t_out * idx.len(), c])?;
            let part = cx.mean(part, 1)?;
            limbs.push(proj.forward(cx, part)?);
        }
        let total_stride = self.stages.iter().map(|s| s.stride).product();
        Ok(SkeletonEncoding {
            tokens,
            global,
            limbs: limbs.try_into().expect("four limbs"),
            embedding,
            reduction: TemporalReduction {
                frames_in: t,
                frames_out: t_out,
                joints: j,
                total_stride,
            },
        })
    }
}
