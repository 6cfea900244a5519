use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::read_latent;
use crate::error::{Error, Result};
use crate::layout::BoundingBox;
use crate::model::{StoryMeta, StorySequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Bench,
}

/// Most sequences a bench manifest keeps per video category.
pub const BENCH_CAP_PER_CATEGORY: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u64,
    pub video_id: String,
    pub category: String,
    pub frame_indices: Vec<usize>,
    /// Latent file of each frame, relative to the manifest's directory.
    pub latents: Vec<String>,
    pub boxes: Vec<BoundingBox>,
    pub global_caption: String,
    pub subject_captions: Vec<String>,
    pub ref_frame: usize,
    #[serde(default)]
    pub meta: Option<StoryMeta>,
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn load(&self, base: &Path) -> Result<StorySequence> {
        let frames = self
            .latents
            .iter()
            .map(|p| read_latent(&base.join(p)))
            .collect::<Result<Vec<_>>>()?;
        let s = StorySequence {
            id: self.id,
            video_id: self.video_id.clone(),
            frames,
            global_caption: self.global_caption.clone(),
            subject_captions: self.subject_captions.clone(),
            boxes: self.boxes.clone(),
            ref_frame: self.ref_frame,
            meta: self.meta.clone(),
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub split: Split,
    pub seed: u64,
    pub source_videos: Vec<String>,
    /// Number of sequences of each length.
    pub length_histogram: BTreeMap<usize, usize>,
    pub sets: usize,
    /// One prompt per frame.
    pub prompts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestRules {
    pub min_len: usize,
    pub max_len: usize,
    pub bench_cap_per_category: usize,
}

impl Default for ManifestRules {
    fn default() -> Self {
        ManifestRules {
            min_len: 4,
            max_len: 6,
            bench_cap_per_category: BENCH_CAP_PER_CATEGORY,
        }
    }
}

/// Video ids present in both entry lists, sorted.
pub fn shared_videos(a: &[ManifestEntry], b: &[ManifestEntry]) -> Vec<String> {
    let sa: BTreeSet<&str> = a.iter().map(|e| e.video_id.as_str()).collect();
    let sb: BTreeSet<&str> = b.iter().map(|e| e.video_id.as_str()).collect();
    sa.intersection(&sb).map(|s| s.to_string()).collect()
}

/// Assemble one split. Bench manifests keep at most the first
/// `bench_cap_per_category` sequences of each category. `other` is the opposite
/// split; any shared video id is a [`Error::SplitLeak`].
pub fn build_manifest(
    entries: Vec<ManifestEntry>,
    split: Split,
    rules: &ManifestRules,
    other: Option<&[ManifestEntry]>,
    seed: u64,
) -> Result<DatasetManifest> {
    if let Some(o) = other {
        let leak = shared_videos(&entries, o);
        if !leak.is_empty() {
            return Err(Error::SplitLeak(leak));
        }
    }
    let mut kept = Vec::with_capacity(entries.len());
    let mut per_cat: BTreeMap<String, usize> = BTreeMap::new();
    for e in entries {
        let n = e.len();
        if !(rules.min_len..=rules.max_len).contains(&n) {
            return Err(Error::InvalidRecord(format!("sequence {} has length {n}", e.id)));
        }
        if e.boxes.len() != n || e.subject_captions.len() != n || e.frame_indices.len() != n || e.ref_frame >= n {
            return Err(Error::InvalidRecord(format!("sequence {} has inconsistent annotations", e.id)));
        }
        if !e.frame_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidRecord(format!("sequence {} frames are not in temporal order", e.id)));
        }
        if split == Split::Bench {
            let c = per_cat.entry(e.category.clone()).or_default();
            if *c >= rules.bench_cap_per_category {
                continue;
            }
            *c += 1;
        }
        kept.push(e);
    }
    let mut hist = BTreeMap::new();
    for e in &kept {
        *hist.entry(e.len()).or_insert(0) += 1;
    }
    let videos: BTreeSet<String> = kept.iter().map(|e| e.video_id.clone()).collect();
    Ok(DatasetManifest {
        header: ManifestHeader {
            split,
            seed,
            source_videos: videos.into_iter().collect(),
            length_histogram: hist,
            sets: kept.len(),
            prompts: kept.iter().map(|e| e.len()).sum(),
        },
        entries: kept,
    })
}

impl DatasetManifest {
    /// Header line, then one entry per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(fs::File::open(path)?).lines();
        let bad = |i: usize, e: serde_json::Error| Error::InvalidRecord(format!("{}:{i}: {e}", path.display()));
        let first = lines
            .next()
            .ok_or_else(|| Error::InvalidRecord(format!("{}: empty manifest", path.display())))??;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| bad(1, e))?;
        let mut entries = Vec::new();
        for (i, l) in lines.enumerate() {
            let l = l?;
            if !l.trim().is_empty() {
                entries.push(serde_json::from_str(&l).map_err(|e| bad(i + 2, e))?);
            }
        }
        if entries.len() != header.sets {
            return Err(Error::InvalidRecord(format!(
                "{}: header lists {} sets, found {}",
                path.display(),
                header.sets,
                entries.len()
            )));
        }
        Ok(DatasetManifest { header, entries })
    }

    pub fn load_stories(&self, base: &Path) -> Result<Vec<StorySequence>> {
        self.entries.iter().map(|e| e.load(base)).collect()
    }
}
