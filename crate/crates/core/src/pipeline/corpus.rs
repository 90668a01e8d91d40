use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{parallel_map, stable_hash};
use crate::audio::{save_wav, Manifest, ManifestEntry};
use crate::degrade::{backend_by_name, degrade, sample_recipe, DegradationRecipe, Pattern};
use crate::error::{ensure, Error, Result};
use crate::seed;

/// Degradation pattern for a whole corpus: one fixed pattern, or a per-utterance draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PatternChoice {
    Fixed(Pattern),
    Mixed,
}

impl std::str::FromStr for PatternChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "mixed" {
            Ok(PatternChoice::Mixed)
        } else {
            s.parse().map(PatternChoice::Fixed)
        }
    }
}

impl TryFrom<String> for PatternChoice {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PatternChoice> for String {
    fn from(p: PatternChoice) -> String {
        p.to_string()
    }
}

impl std::fmt::Display for PatternChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PatternChoice::Fixed(p) => write!(f, "{p}"),
            PatternChoice::Mixed => f.write_str("mixed"),
        }
    }
}

/// One clean/degraded pair with the recipe that links them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedEntry {
    pub utt_id: String,
    pub clean_path: PathBuf,
    pub degraded_path: PathBuf,
    #[serde(default)]
    pub transcript: Option<String>,
    #[serde(default)]
    pub speaker_id: Option<String>,
    pub recipe: DegradationRecipe,
}

/// Line-delimited list of [`PairedEntry`]; relative paths resolve against `base_dir`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedManifest {
    pub entries: Vec<PairedEntry>,
    pub base_dir: PathBuf,
}

impl PairedManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let entry: PairedEntry = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            entries.push(entry);
        }
        Ok(PairedManifest {
            entries,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path.as_ref(), &self.entries)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The clean side as a plain manifest.
    pub fn clean_manifest(&self) -> Result<Manifest> {
        self.side(|e| &e.clean_path)
    }

    /// The degraded side as a plain manifest.
    pub fn degraded_manifest(&self) -> Result<Manifest> {
        self.side(|e| &e.degraded_path)
    }

    fn side(&self, pick: impl Fn(&PairedEntry) -> &PathBuf) -> Result<Manifest> {
        let entries = self
            .entries
            .iter()
            .map(|e| ManifestEntry {
                utt_id: e.utt_id.clone(),
                audio_path: self.resolve(pick(e)),
                transcript: e.transcript.clone(),
                speaker_id: e.speaker_id.clone(),
            })
            .collect();
        Manifest::new(entries)
    }
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusOptions {
    pub pattern: PatternChoice,
    pub seed: u64,
    /// Codec backend name, see [`backend_by_name`].
    pub codec_backend: String,
    pub workers: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            pattern: PatternChoice::Mixed,
            seed: 0,
            codec_backend: "surrogate".into(),
            workers: 1,
        }
    }
}

/// Files written by [`degrade_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusOutput {
    pub paired_manifest: PathBuf,
    pub degraded_manifest: PathBuf,
    pub recipes: PathBuf,
    pub paired: PairedManifest,
}

/// Recipe for one utterance. Depends only on the corpus seed, the utterance id and
/// the sorted noise ids, never on manifest order or worker count.
pub fn recipe_for(
    utt_id: &str,
    noise_ids: &[String],
    pattern: PatternChoice,
    corpus_seed: u64,
) -> DegradationRecipe {
    let utt_seed = seed::derive_seed(corpus_seed, stable_hash(utt_id));
    let mut rng = seed::sub_rng(utt_seed, 0xC0);
    let pattern = match pattern {
        PatternChoice::Fixed(p) => p,
        PatternChoice::Mixed => Pattern::ALL[rng.random_range(0..Pattern::ALL.len())],
    };
    let noise_id = noise_ids[rng.random_range(0..noise_ids.len())].clone();
    DegradationRecipe {
        utt_id: utt_id.to_string(),
        noise_id,
        ..sample_recipe(utt_seed, pattern)
    }
}

/// Degrades every clip of `clean` into `out_dir/degraded/<utt_id>.wav` and writes
/// `paired.jsonl`, `degraded.jsonl` and `recipes.jsonl`.
pub fn degrade_corpus(
    clean: &Manifest,
    noise: &Manifest,
    opts: &CorpusOptions,
    out_dir: &Path,
) -> Result<CorpusOutput> {
    ensure!(!clean.is_empty(), "clean manifest is empty");
    ensure!(!noise.is_empty(), "noise manifest is empty");
    let backend = backend_by_name(&opts.codec_backend)?;
    let mut noise_ids: Vec<String> = noise.entries.iter().map(|e| e.utt_id.clone()).collect();
    noise_ids.sort();
    let audio_dir = out_dir.join("degraded");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;

    let entries = parallel_map(&clean.entries, opts.workers, |entry| {
        let clip = clean.load_clip(entry)?;
        let mut recipe = recipe_for(&entry.utt_id, &noise_ids, opts.pattern, opts.seed);
        recipe.codec_backend = recipe.codec.is_some().then(|| backend.name().to_string());
        let degraded = degrade(&clip, noise, &recipe, backend.as_ref())?;
        let rel = PathBuf::from("degraded").join(format!("{}.wav", entry.utt_id));
        save_wav(&degraded, out_dir.join(&rel))?;
        Ok(PairedEntry {
            utt_id: entry.utt_id.clone(),
            clean_path: absolute(&clean.resolve(entry)),
            degraded_path: rel,
            transcript: entry.transcript.clone(),
            speaker_id: entry.speaker_id.clone(),
            recipe,
        })
    })?;

    let paired = PairedManifest {
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    let paired_path = out_dir.join("paired.jsonl");
    paired.save(&paired_path)?;
    let recipes_path = out_dir.join("recipes.jsonl");
    let recipes: Vec<&DegradationRecipe> = paired.entries.iter().map(|e| &e.recipe).collect();
    write_jsonl(&recipes_path, &recipes)?;
    let degraded_path = out_dir.join("degraded.jsonl");
    let mut degraded = paired.degraded_manifest()?;
    for e in &mut degraded.entries {
        e.audio_path = e
            .audio_path
            .strip_prefix(out_dir)
            .map(Path::to_path_buf)
            .unwrap_or(e.audio_path.clone());
    }
    degraded.save(&degraded_path)?;
    Ok(CorpusOutput {
        paired_manifest: paired_path,
        degraded_manifest: degraded_path,
        recipes: recipes_path,
        paired,
    })
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}
