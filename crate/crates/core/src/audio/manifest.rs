use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_wav, AudioClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub audio_path: PathBuf,
    #[serde(default)]
    pub transcript: Option<String>,
    #[serde(default)]
    pub speaker_id: Option<String>,
}

/// Line-delimited JSON list of utterances. Relative audio paths resolve against `base_dir`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Manifest {
            entries,
            base_dir: PathBuf::new(),
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate utt_id '{}' in manifest",
                    e.utt_id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            entries.push(entry);
        }
        let mut m = Manifest::new(entries)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("manifest entries serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.audio_path.is_absolute() {
            entry.audio_path.clone()
        } else {
            self.base_dir.join(&entry.audio_path)
        }
    }

    /// Loads the entry's audio and attaches its id, transcript and speaker.
    pub fn load_clip(&self, entry: &ManifestEntry) -> Result<AudioClip> {
        let mut clip = load_wav(self.resolve(entry))?;
        clip.utt_id = entry.utt_id.clone();
        clip.transcript = entry.transcript.clone();
        clip.speaker_id = entry.speaker_id.clone();
        Ok(clip)
    }

    pub fn get(&self, utt_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.utt_id == utt_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> ManifestEntry {
        ManifestEntry {
            utt_id: id.into(),
            audio_path: format!("{id}.wav").into(),
            transcript: Some("héllo wörld".into()),
            speaker_id: None,
        }
    }

    #[test]
    fn round_trip_and_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let m = Manifest::new(vec![entry("a"), entry("b")]).unwrap();
        m.save(&p).unwrap();
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.resolve(&back.entries[0]), dir.path().join("a.wav"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(Manifest::new(vec![entry("a"), entry("a")]).is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"utt_id\":\"a\",\"audio_path\":\"a.wav\",\"speaker\":\"x\"}\n",
        )
        .unwrap();
        assert!(matches!(Manifest::load(&p), Err(Error::Format(_))));
    }
}
