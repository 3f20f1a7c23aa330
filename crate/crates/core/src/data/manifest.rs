//! Dataset manifest: `manifest.toml` at the dataset root.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{LimbPartition, SkeletonGraph};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: &str = "sfh-manifest/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: usize,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameGeometry {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub class: usize,
    pub split: Split,
    /// Blob paths relative to the dataset root.
    pub skeleton: String,
    pub frames: String,
    pub native_frames: usize,
    /// `[x, y, width, height]` of the person crop in the source video.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<[usize; 4]>,
    /// Native frame range `[start, end)` where the generator placed motion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_window: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub joints: usize,
    #[serde(default = "one")]
    pub persons: usize,
    /// Joint subtracted from every frame to centre the skeleton.
    #[serde(default)]
    pub root_joint: usize,
    pub edges: Vec<[usize; 2]>,
    pub partition: LimbPartition,
    pub frames: FrameGeometry,
    pub classes: Vec<ClassEntry>,
    pub samples: Vec<SampleRecord>,
}

fn one() -> usize {
    1
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), self.to_toml())?;
        Ok(())
    }

    pub fn graph(&self) -> Result<SkeletonGraph> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        SkeletonGraph::new(self.joints, &edges).map_err(|e| Error::Dataset(e.to_string()))
    }

    pub fn labels(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.label.clone()).collect()
    }

    pub fn sample(&self, id: &str) -> Result<&SampleRecord> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Dataset(format!("no sample `{id}`")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Dataset(m));
        if self.version != MANIFEST_VERSION {
            return fail(format!("unsupported manifest version `{}`", self.version));
        }
        if self.joints == 0 {
            return fail("joint count must be positive".into());
        }
        if !(1..=2).contains(&self.persons) {
            return fail(format!("persons must be 1 or 2, got {}", self.persons));
        }
        if self.root_joint >= self.joints {
            return fail(format!("root joint {} outside {} joints", self.root_joint, self.joints));
        }
        self.graph()?;
        self.partition
            .validate(self.joints)
            .map_err(|e| Error::Dataset(e.to_string()))?;
        if self.frames.height == 0 || self.frames.width == 0 {
            return fail("frame geometry must be positive".into());
        }
        if self.classes.is_empty() {
            return fail("manifest lists no classes".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return fail(format!("class ids must be dense from 0; entry {i} has id {}", c.id));
            }
            if c.label.split_whitespace().next().is_none() {
                return fail(format!("class {i} has an empty label"));
            }
        }
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return fail(format!("sample `{}` listed twice", s.id));
            }
            if s.class >= self.classes.len() {
                return fail(format!("sample `{}` has unknown class {}", s.id, s.class));
            }
            if s.native_frames == 0 {
                return fail(format!("sample `{}` has no frames", s.id));
            }
            if let Some([a, b]) = s.active_window {
                if a >= b || b > s.native_frames {
                    return fail(format!("sample `{}` has an invalid active window", s.id));
                }
            }
            for p in [&s.skeleton, &s.frames] {
                if Path::new(p).is_absolute() || p.split('/').any(|c| c == "..") {
                    return fail(format!("sample `{}` path `{p}` must stay inside the dataset", s.id));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
version = "sfh-manifest/1"
joints = 3
edges = [[0, 1], [1, 2]]

[partition]
head = [2]
hands = [1]
hip = [0]
legs = []

[frames]
height = 8
width = 8

[[classes]]
id = 0
label = "wave"

[[samples]]
id = "a"
class = 0
split = "train"
skeleton = "skeleton/a.sfhb"
frames = "frames/a.sfhb"
native_frames = 4
"#;

    #[test]
    fn empty_limb_is_rejected() {
        assert!(Manifest::from_toml(TEXT).is_err());
    }

    #[test]
    fn parse_and_round_trip() {
        let four = TEXT
            .replace("joints = 3", "joints = 4")
            .replace("edges = [[0, 1], [1, 2]]", "edges = [[0, 1], [1, 2], [1, 3]]")
            .replace("legs = []", "legs = [3]");
        let m = Manifest::from_toml(&four).unwrap();
        assert_eq!(m.persons, 1);
        assert_eq!(m.samples[0].split, Split::Train);
        assert_eq!(Manifest::from_toml(&m.to_toml()).unwrap(), m);

        let dup = format!("{four}\n[[samples]]\nid = \"a\"\nclass = 0\nsplit = \"test\"\nskeleton = \"s\"\nframes = \"f\"\nnative_frames = 4\n");
        assert!(Manifest::from_toml(&dup).is_err());
        let sparse = four.replace("id = 0\nlabel", "id = 1\nlabel");
        assert!(Manifest::from_toml(&sparse).is_err());
        let escape = four.replace("skeleton/a.sfhb", "../a.sfhb");
        assert!(Manifest::from_toml(&escape).is_err());
        let unknown = four.replace("joints = 4", "joints = 4\ncolour = 1");
        assert!(Manifest::from_toml(&unknown).is_err());
    }
}
