//! Corpus manifest and loading of sequences from disk.
//!
//! Paths inside a manifest are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{load_features, FeatureSequence};
use crate::error::{Error, Result};
use crate::mesh::{MeshSequence, TemplateMesh};
use crate::oracle::{CorpusConfig, SyntheticSpeaker};
use crate::supervision::{ClosureWeights, PhonemeTiming};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Reference sequences of a held-out speaker.
    Adapt,
    /// Evaluation sequences of a held-out speaker.
    AdaptTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerEntry {
    pub name: String,
    /// Training identity index; `None` for held-out speakers.
    pub identity: Option<usize>,
    pub template: String,
    pub lips: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<SyntheticSpeaker>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: String,
    pub speaker: String,
    pub split: Split,
    pub mesh: String,
    pub features: String,
    pub timing: String,
    #[serde(default)]
    pub weights: Option<String>,
    #[serde(default)]
    pub phonemes: String,
    #[serde(default)]
    pub closures: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusConfig>,
    pub speakers: Vec<SpeakerEntry>,
    pub sequences: Vec<SequenceEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Metadata(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.sequences {
            if !self.speakers.iter().any(|k| k.name == s.speaker) {
                return Err(Error::Metadata(format!("sequence {} names unknown speaker {}", s.id, s.speaker)));
            }
            if !ids.insert(&s.id) {
                return Err(Error::Metadata(format!("duplicate sequence id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn speaker(&self, name: &str) -> Option<&SpeakerEntry> {
        self.speakers.iter().find(|s| s.name == name)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &SequenceEntry> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    pub fn identity_count(&self) -> usize {
        self.speakers.iter().filter_map(|s| s.identity).map(|i| i + 1).max().unwrap_or(0)
    }
}

/// A sequence loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub id: String,
    pub speaker: String,
    pub identity: Option<usize>,
    pub split: Split,
    pub mesh: MeshSequence,
    pub features: FeatureSequence,
    pub timing: PhonemeTiming,
    pub weights: Option<ClosureWeights>,
    pub template: TemplateMesh,
}

pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Corpus {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let p = manifest_path.as_ref();
        let manifest = Manifest::load(p)?;
        let root = p.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Corpus { root, manifest })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn template(&self, speaker: &str) -> Result<TemplateMesh> {
        let s = self
            .manifest
            .speaker(speaker)
            .ok_or_else(|| Error::Metadata(format!("unknown speaker {speaker}")))?;
        TemplateMesh::load(self.resolve(&s.template), self.resolve(&s.lips))
    }

    pub fn load_entry(&self, e: &SequenceEntry) -> Result<LoadedSequence> {
        let spk = self
            .manifest
            .speaker(&e.speaker)
            .ok_or_else(|| Error::Metadata(format!("unknown speaker {}", e.speaker)))?;
        let template = self.template(&e.speaker)?;
        let mesh = MeshSequence::load(self.resolve(&e.mesh))?;
        template.check_vertices(mesh.vertex_count())?;
        let weights = e
            .weights
            .as_ref()
            .map(|w| ClosureWeights::load(self.resolve(w)))
            .transpose()?;
        if let Some(w) = &weights {
            if w.len() != mesh.frames() {
                return Err(Error::Length(format!(
                    "{}: {} weights for {} frames",
                    e.id,
                    w.len(),
                    mesh.frames()
                )));
            }
        }
        Ok(LoadedSequence {
            id: e.id.clone(),
            speaker: e.speaker.clone(),
            identity: spk.identity,
            split: e.split,
            mesh,
            features: load_features(self.resolve(&e.features))?,
            timing: PhonemeTiming::load(self.resolve(&e.timing))?,
            weights,
            template,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedSequence>> {
        self.manifest.in_split(split).map(|e| self.load_entry(e)).collect()
    }

    pub fn load_speaker(&self, speaker: &str, split: Split) -> Result<Vec<LoadedSequence>> {
        self.manifest
            .in_split(split)
            .filter(|e| e.speaker == speaker)
            .map(|e| self.load_entry(e))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_and_speakers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"version":1,"seed":0,"fps":30,"speakers":[],"sequences":[],"extra":1}"#).unwrap();
        assert!(matches!(Manifest::load(&p), Err(Error::Metadata(_))));
        std::fs::write(
            &p,
            r#"{"version":1,"seed":0,"fps":30,"speakers":[],"sequences":[{"id":"a","speaker":"x","split":"train","mesh":"","features":"","timing":""}]}"#,
        )
        .unwrap();
        assert!(matches!(Manifest::load(&p), Err(Error::Metadata(_))));
    }

    #[test]
    fn split_names() {
        assert_eq!(serde_json::to_string(&Split::AdaptTest).unwrap(), "\"adapt_test\"");
    }
}
