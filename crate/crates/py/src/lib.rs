use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use miipher::audio::AudioClip;
use miipher::cleaner::{cleaner_loss_tensors, CleanerModel, IterationOutput};
use miipher::degrade::{DegradationRecipe, Pattern, SurrogateCodec};
use miipher::features::{ExtractorSpec, FeatureExtractor, SpeakerEmbedding};
use miipher::nn::Tensor;
use miipher::vocoder::VocoderModel;
use miipher::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Validation(_) | Error::Format(_) | Error::Config(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Backend(_) | Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err(
            "expected a non-empty rectangular list of rows",
        ));
    }
    Ok(Tensor::from_rows(&rows))
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Reads a PCM-16 or float-32 WAV file; returns `(samples, sample_rate)`.
#[pyfunction]
fn load_wav(path: PathBuf) -> PyResult<(Vec<f64>, u32)> {
    let clip = miipher::audio::load_wav(path).map_err(py_err)?;
    Ok((clip.samples, clip.sample_rate))
}

/// Writes samples in [-1, 1] as a PCM-16 WAV file.
#[pyfunction]
fn save_wav(path: PathBuf, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
    miipher::audio::save_wav(&AudioClip::new(samples, sample_rate), path).map_err(py_err)
}

#[pyfunction]
fn resample(samples: Vec<f64>, sample_rate: u32, target_rate: u32) -> PyResult<Vec<f64>> {
    let clip = miipher::audio::resample(&AudioClip::new(samples, sample_rate), target_rate)
        .map_err(py_err)?;
    Ok(clip.samples)
}

/// Draws a degradation recipe and returns it as JSON.
#[pyfunction]
#[pyo3(signature = (seed, pattern = "noise"))]
fn sample_recipe(seed: u64, pattern: &str) -> PyResult<String> {
    let pattern: Pattern = pattern.parse().map_err(py_err)?;
    let recipe = miipher::degrade::sample_recipe(seed, pattern);
    serde_json::to_string(&recipe).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Applies a JSON recipe to a clean clip with the given noise clip and the surrogate
/// codecs. Output is at 24 kHz.
#[pyfunction]
fn degrade(
    samples: Vec<f64>,
    sample_rate: u32,
    noise: Vec<f64>,
    noise_rate: u32,
    recipe_json: &str,
) -> PyResult<Vec<f64>> {
    let recipe: DegradationRecipe =
        serde_json::from_str(recipe_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut bank = BTreeMap::new();
    bank.insert(recipe.noise_id.clone(), AudioClip::new(noise, noise_rate));
    let out = miipher::degrade::degrade(
        &AudioClip::new(samples, sample_rate),
        &bank,
        &recipe,
        &SurrogateCodec,
    )
    .map_err(py_err)?;
    Ok(out.samples)
}

/// `lambda * y / max|y|`.
#[pyfunction]
#[pyo3(signature = (y, lambda_gain = 0.9))]
fn gain_normalize(y: Vec<f64>, lambda_gain: f64) -> PyResult<Vec<f64>> {
    miipher::vocoder::gain_normalize(&y, lambda_gain).map_err(py_err)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let wrap = |values| SpeakerEmbedding {
        values,
        unit_norm: false,
    };
    miipher::features::cosine_similarity(&wrap(a), &wrap(b)).map_err(py_err)
}

/// Cleaner loss of `target` against `(pre_postnet, post_postnet)` pairs.
/// Returns a dict with `l1`, `l2sq`, `sc` and `total`.
#[pyfunction]
fn cleaner_loss(
    target: Vec<Vec<f64>>,
    outputs: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let outputs = outputs
        .into_iter()
        .map(|(pre, post)| {
            Ok(IterationOutput {
                pre_postnet: matrix(pre)?,
                post_postnet: matrix(post)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let r = cleaner_loss_tensors(&matrix(target)?, &outputs).map_err(py_err)?;
    Ok(BTreeMap::from([
        ("l1", r.l1),
        ("l2sq", r.l2sq),
        ("sc", r.sc),
        ("total", r.total),
    ]))
}

/// Runs the command-line tool with `argv` (without the program name).
#[pyfunction]
fn run_cli(argv: Vec<String>) -> i32 {
    miipher::cli::run(std::iter::once("miipher".to_string()).chain(argv))
}

/// Deterministic surrogate feature extractor.
#[pyclass(frozen)]
struct Extractor {
    inner: Box<dyn FeatureExtractor>,
    spec: ExtractorSpec,
}

#[pymethods]
impl Extractor {
    #[new]
    #[pyo3(signature = (d = 64, w = 32, q = 16, seed = 0))]
    fn new(d: usize, w: usize, q: usize, seed: u64) -> PyResult<Self> {
        let spec = ExtractorSpec {
            d,
            w,
            q,
            rng_seed: seed,
            ..ExtractorSpec::desk_scale()
        };
        Ok(Extractor {
            inner: spec.build().map_err(py_err)?,
            spec,
        })
    }

    /// `[K x D]` speech features at 25 frames per second.
    fn speech_features(&self, samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
        let f = self
            .inner
            .speech_features(&AudioClip::new(samples, sample_rate))
            .map_err(py_err)?;
        Ok(to_rows(&f.values))
    }

    /// `[M x W]` text condition, one row per character.
    fn text_condition(&self, transcript: &str) -> PyResult<Vec<Vec<f64>>> {
        let t = self.inner.text_condition("", transcript).map_err(py_err)?;
        Ok(to_rows(&t.values))
    }

    /// Unit-norm speaker embedding of length Q.
    fn speaker_embedding(&self, samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<f64>> {
        let e = self
            .inner
            .speaker_embedding(&AudioClip::new(samples, sample_rate))
            .map_err(py_err)?;
        Ok(e.values)
    }

    fn __repr__(&self) -> String {
        format!(
            "Extractor(d={}, w={}, q={}, seed={})",
            self.spec.d, self.spec.w, self.spec.q, self.spec.rng_seed
        )
    }
}

/// Cleaner and vocoder checkpoints loaded together.
#[pyclass(frozen)]
struct Restorer {
    inner: miipher::pipeline::Restorer,
}

#[pymethods]
impl Restorer {
    #[new]
    fn new(cleaner: PathBuf, vocoder: PathBuf) -> PyResult<Self> {
        let c = CleanerModel::load(cleaner).map_err(py_err)?;
        let v = VocoderModel::load(vocoder).map_err(py_err)?;
        Ok(Restorer {
            inner: miipher::pipeline::Restorer::new(c, v).map_err(py_err)?,
        })
    }

    /// Restores one clip; returns `(samples, 24000)`.
    #[pyo3(signature = (samples, sample_rate, transcript, extractor, seed = 0))]
    fn restore(
        &self,
        samples: Vec<f64>,
        sample_rate: u32,
        transcript: &str,
        extractor: &Extractor,
        seed: u64,
    ) -> PyResult<(Vec<f64>, u32)> {
        let y = self
            .inner
            .restore(
                &AudioClip::new(samples, sample_rate),
                transcript,
                extractor.inner.as_ref(),
                seed,
            )
            .map_err(py_err)?;
        Ok((y.samples, y.sample_rate))
    }

    fn num_parameters(&self) -> (usize, usize) {
        (
            self.inner.cleaner.num_parameters(),
            self.inner.vocoder.generator.num_scalars(),
        )
    }
}

#[pymodule]
fn pymiipher(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(save_wav, m)?)?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(sample_recipe, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(gain_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(cleaner_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Extractor>()?;
    m.add_class::<Restorer>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rejects_ragged_rows() {
        assert!(matrix(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(matrix(vec![]).is_err());
        let t = matrix(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(to_rows(&t), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
    }
}
