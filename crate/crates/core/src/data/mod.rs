//! Dataset ingestion, synthetic generation and checkpoints.

pub mod blob;
pub mod checkpoint;
pub mod manifest;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use blob::{Blob, Payload};
pub use manifest::{ClassEntry, FrameGeometry, Manifest, SampleRecord, Split};

/// `floor(i * native / target)` for `i in 0..target`.
pub fn uniform_sample_indices(native: usize, target: usize) -> Vec<usize> {
    (0..target).map(|i| i * native / target).collect()
}

/// One clip resampled to the model frame count.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub class: usize,
    /// `[N, T, J, 3]`, root-centred.
    pub skeleton: Tensor,
    /// `[T, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor,
    /// Native frame index behind each model frame, shared by both modalities.
    pub indices: Vec<usize>,
    pub active_window: Option<[usize; 2]>,
}

/// Stacked inputs for one minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, N, T, J, 3]`
    pub skeleton: Tensor,
    /// `[B, T, H, W, 3]`
    pub frames: Tensor,
    pub labels: Vec<usize>,
}

fn check_extents(path: &Path, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(Error::Extent {
            path: path.to_path_buf(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

/// Reads both blobs of `id`, resamples them to `frames` steps and normalizes.
pub fn load_sample(root: &Path, manifest: &Manifest, id: &str, frames: usize) -> Result<Sample> {
    let rec = manifest.sample(id)?;
    let (tn, n, j) = (rec.native_frames, manifest.persons, manifest.joints);
    let (h, w) = (manifest.frames.height, manifest.frames.width);
    let indices = uniform_sample_indices(tn, frames);

    let skel_path = root.join(&rec.skeleton);
    let skel = Blob::read(&skel_path)?;
    check_extents(&skel_path, &[tn, n, j, 3], &skel.extents)?;
    let Payload::Skeleton(coords) = skel.payload else {
        return Err(Error::Format {
            path: skel_path,
            msg: "expected a skeleton blob".into(),
        });
    };
    let root_joint = manifest.root_joint;
    let mut skeleton = Tensor::zeros(&[n, frames, j, 3]);
    for (t, &src) in indices.iter().enumerate() {
        for p in 0..n {
            let base = ((src * n + p) * j) * 3;
            let r = &coords[base + root_joint * 3..base + root_joint * 3 + 3];
            for q in 0..j {
                for c in 0..3 {
                    skeleton.set(&[p, t, q, c], f64::from(coords[base + q * 3 + c]) - f64::from(r[c]));
                }
            }
        }
    }

    let frame_path = root.join(&rec.frames);
    let fb = Blob::read(&frame_path)?;
    check_extents(&frame_path, &[tn, h, w, 3], &fb.extents)?;
    let Payload::Frames(pixels) = fb.payload else {
        return Err(Error::Format {
            path: frame_path,
            msg: "expected a frame blob".into(),
        });
    };
    let per = h * w * 3;
    let mut data = Vec::with_capacity(frames * per);
    for &src in &indices {
        data.extend(pixels[src * per..(src + 1) * per].iter().map(|&v| f64::from(v) / 255.0));
    }
    let frames = Tensor::new(vec![frames, h, w, 3], data)?;

    Ok(Sample {
        id: rec.id.clone(),
        class: rec.class,
        skeleton,
        frames,
        indices,
        active_window: rec.active_window,
    })
}

/// A manifest plus every sample of one split, held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(root: &Path, split: Split, frames: usize) -> Result<Self> {
        let manifest = Manifest::load(root)?;
        let samples = manifest
            .split(split)
            .map(|r| load_sample(root, &manifest, &r.id, frames))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Dataset(format!("split `{}` is empty", split.name())));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            split,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.samples
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::Dataset(format!("no sample `{id}` in split `{}`", self.split.name())))
    }

    pub fn batch(&self, order: &[usize]) -> Result<Batch> {
        stack(order.iter().map(|&i| &self.samples[i]))
    }
}

/// Stacks samples into one batch.
pub fn stack<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Batch> {
    let samples: Vec<&Sample> = samples.into_iter().collect();
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("stack", "empty batch".to_string()))?;
    let mut skel = Vec::new();
    let mut frames = Vec::new();
    for s in &samples {
        if s.skeleton.shape() != first.skeleton.shape() || s.frames.shape() != first.frames.shape() {
            return Err(Error::invalid("stack", format!("sample `{}` geometry differs", s.id)));
        }
        skel.extend_from_slice(s.skeleton.data());
        frames.extend_from_slice(s.frames.data());
    }
    let b = samples.len();
    let mut ss = vec![b];
    ss.extend_from_slice(first.skeleton.shape());
    let mut fs = vec![b];
    fs.extend_from_slice(first.frames.shape());
    Ok(Batch {
        skeleton: Tensor::new(ss, skel)?,
        frames: Tensor::new(fs, frames)?,
        labels: samples.iter().map(|s| s.class).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_indices_examples() {
        assert_eq!(uniform_sample_indices(32, 16), (0..16).map(|i| 2 * i).collect::<Vec<_>>());
        assert_eq!(uniform_sample_indices(16, 16), (0..16).collect::<Vec<_>>());
        // floor(13 * 5 / 16) = 4
        assert_eq!(
            uniform_sample_indices(5, 16),
            [0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]
        );
    }

    proptest::proptest! {
        #[test]
        fn uniform_indices_are_monotone_and_in_range(native in 1usize..200, target in 1usize..64) {
            let idx = uniform_sample_indices(native, target);
            proptest::prop_assert_eq!(idx.len(), target);
            proptest::prop_assert_eq!(idx[0], 0);
            proptest::prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            proptest::prop_assert!(idx.iter().all(|&i| i < native));
        }
    }
}
