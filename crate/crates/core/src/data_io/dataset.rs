//! Dataset manifests and on-disk synthetic dataset generation.
//!
//! A manifest is a line-oriented text file:
//!
//! ```text
//! # comment
//! version 1
//! normalization 0 255 -1 1
//! sequence train seq_000 label=3
//! scene test scenes/a.toml
//! ```
//!
//! `sequence` entries name a directory of frame images (lexicographic
//! order) plus optional `.flo` files, one per consecutive frame pair.
//! `scene` entries name a TOML scene spec rendered on load. Paths are
//! relative to the manifest's directory. `label=` is optional.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::flow::{read_flo, write_flo, FlowField};
use super::frames::{list_frame_files, load_frame, save_frame, FrameSequence};
use super::synthetic::{generate_moving_shapes, SceneSampler, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::util::derive_seed;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EntrySource {
    Sequence(PathBuf),
    Scene(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub source: EntrySource,
    pub split: Split,
    pub label: Option<usize>,
}

/// Affine pixel mapping recorded with the dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub raw_min: f64,
    pub raw_max: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            raw_min: 0.0,
            raw_max: 255.0,
            min: -1.0,
            max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub normalization: Normalization,
}

/// A sequence with its ground-truth flows when available.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSequence {
    pub frames: FrameSequence,
    pub flows: Option<Vec<FlowField>>,
    pub label: Option<usize>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            entries: Vec::new(),
            normalization: Normalization::default(),
        }
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut manifest = Self::new(root);
        let mut offset = 0u64;
        let mut saw_version = false;
        for line in text.lines() {
            let here = offset;
            offset += line.len() as u64 + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| Error::Format { offset: here, reason };
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "version" => {
                    let v: u32 = fields
                        .get(1)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad("missing version number".into()))?;
                    if v != MANIFEST_VERSION {
                        return Err(bad(format!("unsupported manifest version {v}")));
                    }
                    saw_version = true;
                }
                "normalization" => {
                    let nums: Vec<f64> = fields[1..]
                        .iter()
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(format!("bad normalization: {e}")))?;
                    if nums.len() != 4 {
                        return Err(bad("normalization needs 4 numbers".into()));
                    }
                    manifest.normalization = Normalization {
                        raw_min: nums[0],
                        raw_max: nums[1],
                        min: nums[2],
                        max: nums[3],
                    };
                }
                kind @ ("sequence" | "scene") => {
                    if fields.len() < 3 {
                        return Err(bad(format!("`{kind}` needs a split and a path")));
                    }
                    let split: Split = fields[1].parse().map_err(|e: Error| bad(e.to_string()))?;
                    let path = PathBuf::from(fields[2]);
                    let mut label = None;
                    for extra in &fields[3..] {
                        match extra.split_once('=') {
                            Some(("label", v)) => label = Some(v.parse().map_err(|_| bad(format!("bad label `{v}`")))?),
                            _ => return Err(bad(format!("unknown attribute `{extra}`"))),
                        }
                    }
                    let source = if kind == "sequence" {
                        EntrySource::Sequence(path)
                    } else {
                        EntrySource::Scene(path)
                    };
                    manifest.entries.push(ManifestEntry { source, split, label });
                }
                other => return Err(bad(format!("unknown record `{other}`"))),
            }
        }
        if !saw_version {
            return Err(Error::Format {
                offset: 0,
                reason: "missing `version` record".into(),
            });
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let m = Self::parse(&text, &root)?;
        m.check_resolvable()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let n = self.normalization;
        let mut out = format!(
            "# dualmotion dataset manifest\nversion {MANIFEST_VERSION}\nnormalization {} {} {} {}\n",
            n.raw_min, n.raw_max, n.min, n.max
        );
        for e in &self.entries {
            let (kind, path) = match &e.source {
                EntrySource::Sequence(p) => ("sequence", p),
                EntrySource::Scene(p) => ("scene", p),
            };
            out.push_str(&format!("{kind} {} {}", e.split, path.display()));
            if let Some(l) = e.label {
                out.push_str(&format!(" label={l}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn check_resolvable(&self) -> Result<()> {
        for e in &self.entries {
            let (p, want_dir) = match &e.source {
                EntrySource::Sequence(p) => (self.resolve(p), true),
                EntrySource::Scene(p) => (self.resolve(p), false),
            };
            if (want_dir && !p.is_dir()) || (!want_dir && !p.is_file()) {
                return Err(Error::Dataset(format!(
                    "manifest entry {} does not resolve",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<LoadedSequence> {
        match &entry.source {
            EntrySource::Sequence(p) => {
                let mut seq = load_sequence_dir(&self.resolve(p))?;
                seq.label = entry.label;
                Ok(seq)
            }
            EntrySource::Scene(p) => {
                let path = self.resolve(p);
                let text = std::fs::read_to_string(&path)?;
                let spec: SyntheticSceneSpec = toml::from_str(&text).map_err(|e| Error::Ingestion {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                let (mut frames, flows) = generate_moving_shapes(&spec)?;
                frames.source_id = path.display().to_string();
                Ok(LoadedSequence {
                    frames,
                    flows: Some(flows),
                    label: entry.label,
                })
            }
        }
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedSequence>> {
        self.split(split).map(|e| self.load_entry(e)).collect()
    }
}

/// Loads frames at native size plus `.flo` files when present.
pub fn load_sequence_dir(dir: &Path) -> Result<LoadedSequence> {
    let files = list_frame_files(dir)?;
    if files.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} contains {} frame image(s), need at least 2",
            dir.display(),
            files.len()
        )));
    }
    let first = load_frame(&files[0], None)?;
    let (_, h, w) = first.chw();
    let mut frames = vec![first];
    for f in &files[1..] {
        frames.push(load_frame(f, Some((h, w)))?);
    }
    let mut flo_files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "flo"))
        .collect();
    flo_files.sort();
    let flows = if flo_files.is_empty() {
        None
    } else {
        if flo_files.len() != frames.len() - 1 {
            return Err(Error::Dataset(format!(
                "{}: {} frames but {} flow files",
                dir.display(),
                frames.len(),
                flo_files.len()
            )));
        }
        let flows = flo_files.iter().map(|p| read_flo(p)).collect::<Result<Vec<_>>>()?;
        if flows.iter().any(|f| (f.height(), f.width()) != (h, w)) {
            return Err(Error::Dataset(format!(
                "{}: flow size differs from frames",
                dir.display()
            )));
        }
        Some(flows)
    };
    Ok(LoadedSequence {
        frames: FrameSequence::new(frames, dir.display().to_string())?,
        flows,
        label: None,
    })
}

/// Writes frames as `frame_NNNN.png` and flows as `flow_NNNN.flo`.
pub fn write_sequence_dir(dir: &Path, frames: &FrameSequence, flows: &[FlowField]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, f) in frames.frames().iter().enumerate() {
        save_frame(f, &dir.join(format!("frame_{t:04}.png")))?;
    }
    for (t, f) in flows.iter().enumerate() {
        write_flo(f, &dir.join(format!("flow_{t:04}.flo")))?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DatasetPlan {
    pub sampler: SceneSampler,
    pub sequences: usize,
    pub val: usize,
    pub test: usize,
    /// Sequence `i` moves all shapes along direction `i mod 8` and is labeled with it.
    pub direction_labels: bool,
}

/// Renders a synthetic dataset under `out` and writes its manifest.
/// The last `test` sequences go to the test split, the `val` before them to
/// validation. Output is byte-identical for the same plan and seed.
pub fn make_dataset(out: &Path, plan: &DatasetPlan, seed: u64) -> Result<DatasetManifest> {
    if plan.val + plan.test > plan.sequences {
        return Err(Error::Dataset("val + test exceed the number of sequences".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut manifest = DatasetManifest::new(out);
    let first_val = plan.sequences - plan.val - plan.test;
    let first_test = plan.sequences - plan.test;
    for i in 0..plan.sequences {
        let mut sampler = plan.sampler.clone();
        let label = plan.direction_labels.then_some(i % 8);
        if let Some(d) = label {
            sampler.direction = Some(d);
        }
        let spec = sampler.sample(derive_seed(seed, i as u64))?;
        let (frames, flows) = generate_moving_shapes(&spec)?;
        let name = format!("seq_{i:03}");
        let dir = out.join(&name);
        write_sequence_dir(&dir, &frames, &flows)?;
        std::fs::write(
            dir.join("scene.toml"),
            toml::to_string(&spec).map_err(|e| Error::Dataset(e.to_string()))?,
        )?;
        let split = if i >= first_test {
            Split::Test
        } else if i >= first_val {
            Split::Val
        } else {
            Split::Train
        };
        manifest.entries.push(ManifestEntry {
            source: EntrySource::Sequence(PathBuf::from(name)),
            split,
            label,
        });
    }
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_round_trip() {
        let text = "# x\nversion 1\nnormalization 0 255 -1 1\nsequence train a label=2\nscene test b.toml\n";
        let m = DatasetManifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].label, Some(2));
        assert_eq!(m.entries[1].split, Split::Test);
        let again = DatasetManifest::parse(&m.to_text(), Path::new("/data")).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn manifest_errors_point_at_lines() {
        let err = DatasetManifest::parse("version 1\nsequence nope a\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 10, .. }));
        assert!(DatasetManifest::parse("sequence train a\n", Path::new(".")).is_err());
        assert!(DatasetManifest::parse("version 1\nfoo\n", Path::new(".")).is_err());
    }
}
