//! Python bindings. Tensors cross the boundary as nested lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use repcnn::data::{generate_synthetic_dataset, read_wav_samples, write_wav as write_wav_file, SynthSpec};
use repcnn::experiment::{self, ExperimentSpec};
use repcnn::features::MfccConfig;
use repcnn::model::{Architecture, GraphMode, ModelGraph, RepCnnConfig};
use repcnn::Tensor;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_rows(t: &Tensor) -> Vec<Vec<f32>> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..rows).map(|r| t.data()[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f32>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(err("feature rows must all have the same length"));
    }
    let n = rows.len();
    Tensor::new(vec![n, cols], rows.into_iter().flatten().collect()).map_err(err)
}

/// A RepCNN graph, either the multi-branch training form or the fused form.
#[pyclass(name = "Model", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    graph: ModelGraph,
}

#[pymethods]
impl PyModel {
    /// Builds a randomly initialized training graph.
    #[staticmethod]
    #[pyo3(signature = (branches=2, width=44, seed=0, single_branch=false))]
    fn build(branches: usize, width: usize, seed: u64, single_branch: bool) -> PyResult<Self> {
        let cfg = RepCnnConfig {
            num_branches: branches,
            width,
            ..RepCnnConfig::default()
        };
        let arch = if single_branch {
            Architecture::SingleBranch
        } else {
            Architecture::RepCnn
        };
        Ok(Self {
            graph: ModelGraph::build(arch, &cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            graph: repcnn::io::load_model(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        repcnn::io::save_model(&self.graph, &path).map_err(err)
    }

    fn fuse(&self) -> PyResult<Self> {
        Ok(Self {
            graph: self.graph.fuse().map_err(err)?,
        })
    }

    #[getter]
    fn fused(&self) -> bool {
        self.graph.mode == GraphMode::Fused
    }

    #[getter]
    fn receptive_field(&self) -> usize {
        self.graph.receptive_field()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    #[getter]
    fn stride(&self) -> usize {
        self.graph.total_stride()
    }

    /// Logits for a `(16, T)` feature matrix, one per stride frames.
    fn forward(&self, features: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        let x = from_rows(features)?;
        Ok(self.graph.forward_eval(&x).map_err(err)?.into_data())
    }

    /// Logits for raw 16 kHz samples.
    fn score(&self, samples: Vec<f32>) -> PyResult<Vec<f32>> {
        let feats = repcnn::features::mfcc(&samples, &MfccConfig::default()).map_err(err)?;
        Ok(self.graph.forward_eval(&feats).map_err(err)?.into_data())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(arch={:?}, mode={:?}, branches={}, params={})",
            self.graph.arch,
            self.graph.mode,
            self.graph.config.num_branches,
            self.graph.param_count()
        )
    }
}

/// Frame-by-frame inference over a fused model.
#[pyclass(name = "Streamer")]
struct PyStreamer {
    inner: repcnn::stream::Streamer,
}

#[pymethods]
impl PyStreamer {
    #[new]
    fn new(model: &PyModel) -> PyResult<Self> {
        Ok(Self {
            inner: repcnn::stream::Streamer::new(&model.graph).map_err(err)?,
        })
    }

    /// Consumes one 16-coefficient frame; returns a logit on emitting frames.
    fn push(&mut self, frame: Vec<f32>) -> PyResult<Option<f32>> {
        self.inner.push(&frame).map_err(err)
    }

    fn push_frames(&mut self, features: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        let x = from_rows(features)?;
        self.inner.push_frames(&x).map_err(err)
    }

    fn reset(&mut self) {
        self.inner.reset();
    }

    #[getter]
    fn state_bytes(&self) -> usize {
        self.inner.state_bytes()
    }
}

/// MFCC features of 16 kHz samples as 16 rows of frames.
#[pyfunction]
fn mfcc(samples: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
    let t = repcnn::features::mfcc(&samples, &MfccConfig::default()).map_err(err)?;
    Ok(to_rows(&t))
}

#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<Vec<f32>> {
    read_wav_samples(&path).map_err(err)
}

#[pyfunction]
fn write_wav(path: PathBuf, samples: Vec<f32>) -> PyResult<()> {
    write_wav_file(&path, &samples).map_err(err)
}

#[pyfunction]
fn roc_auc(positive: Vec<f32>, negative: Vec<f32>) -> PyResult<f64> {
    repcnn::eval::roc_auc(&positive, &negative).map_err(err)
}

/// Writes a synthetic corpus and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, num_train=1000, num_val=200, num_test_positive=200, num_test_negative=30, negative_seconds=60.0))]
fn synthesize(
    out_dir: PathBuf,
    seed: u64,
    num_train: usize,
    num_val: usize,
    num_test_positive: usize,
    num_test_negative: usize,
    negative_seconds: f64,
) -> PyResult<PathBuf> {
    let spec = SynthSpec {
        num_train,
        num_val,
        num_test_positive,
        num_test_negative,
        negative_seconds,
        ..SynthSpec::default()
    };
    generate_synthetic_dataset(&spec, seed, &out_dir).map_err(err)?;
    Ok(out_dir.join("manifest.csv"))
}

/// Trains every seed of an experiment spec; returns the model file paths.
#[pyfunction]
fn train(spec: PathBuf) -> PyResult<Vec<PathBuf>> {
    let spec = ExperimentSpec::load(&spec).map_err(err)?;
    Ok(experiment::run_train(&spec).map_err(err)?.model_paths)
}

/// Fuses a model file; returns the worst relative deviation over 20 inputs.
#[pyfunction]
fn fuse_file(model: PathBuf, out: PathBuf) -> PyResult<f32> {
    Ok(experiment::run_fuse(&model, &out, None).map_err(err)?.max_rel_deviation)
}

/// Evaluates a model on a manifest's test splits; returns (FRR % at target, AUC).
#[pyfunction]
#[pyo3(signature = (model, manifest, out_dir, fa_target=experiment::DEFAULT_FA))]
fn evaluate(model: PathBuf, manifest: PathBuf, out_dir: PathBuf, fa_target: f64) -> PyResult<(f64, f64)> {
    let s = experiment::run_eval(&model, &manifest, &out_dir, fa_target).map_err(err)?;
    Ok((s.frr_at_target, s.auc))
}

#[pymodule]
fn pyrepcnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyStreamer>()?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_file, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
