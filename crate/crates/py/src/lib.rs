//! Python bindings: caption/label helpers, the Fréchet distance, the sampler
//! timestep grid, toy reports and config round-tripping.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use histodiff::conditioning;
use histodiff::config::RunConfig;
use histodiff::data::{make_toy_corpus, ToyCorpusConfig};
use histodiff::metrics::{self, GaussianStats};
use histodiff::schedule;
use histodiff::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Shape { .. } | Error::Empty(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// `"{Level} tumor; {level} til; {summary}"` for the two probabilities.
#[pyfunction]
fn build_caption(tumor_prob: f64, til_prob: f64, summary: &str) -> PyResult<String> {
    Ok(conditioning::build_caption(tumor_prob, til_prob, summary).map_err(to_py)?.rendered)
}

/// Class id `2·[tumor high] + [til high]`.
#[pyfunction]
fn class_label(tumor_prob: f64, til_prob: f64) -> PyResult<u8> {
    Ok(conditioning::class_label(tumor_prob, til_prob).map_err(to_py)?.id())
}

fn stats(mu: Vec<f64>, sigma: Vec<Vec<f64>>) -> PyResult<GaussianStats> {
    let d = mu.len();
    if sigma.len() != d || sigma.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("covariance must be {d}x{d}")));
    }
    let flat: Vec<f64> = sigma.into_iter().flatten().collect();
    Ok(GaussianStats { mu: DVector::from_vec(mu), sigma: DMatrix::from_row_slice(d, d, &flat), n: 0 })
}

/// Fréchet distance between two Gaussians given as mean vectors and covariance rows.
#[pyfunction]
fn frechet_distance(mu_a: Vec<f64>, sigma_a: Vec<Vec<f64>>, mu_b: Vec<f64>, sigma_b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::frechet_distance(&stats(mu_a, sigma_a)?, &stats(mu_b, sigma_b)?).map_err(to_py)
}

/// Mean and unbiased covariance of row-major features.
#[pyfunction]
fn gaussian_fit(features: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged feature rows"));
    }
    let flat: Vec<f64> = features.into_iter().flatten().collect();
    let s = metrics::gaussian_fit(&DMatrix::from_row_slice(n, d, &flat)).map_err(to_py)?;
    let sigma = (0..d).map(|i| s.sigma.row(i).iter().copied().collect()).collect();
    Ok((s.mu.iter().copied().collect(), sigma))
}

/// Decreasing DDIM timesteps.
#[pyfunction]
fn ddim_timesteps(total: usize, num_steps: usize) -> PyResult<Vec<usize>> {
    schedule::ddim_timesteps(total, num_steps).map_err(to_py)
}

/// Report texts of a toy corpus.
#[pyfunction]
#[pyo3(signature = (n_slides, seed=0))]
fn toy_reports(n_slides: usize, seed: u64) -> PyResult<Vec<String>> {
    let cfg = ToyCorpusConfig { n_slides, patches_per_slide: 1, seed, ..Default::default() };
    Ok(make_toy_corpus(&cfg).map_err(to_py)?.reports)
}

/// Default run configuration as TOML, or `text` parsed, validated and re-rendered.
#[pyfunction]
#[pyo3(signature = (text=None))]
fn resolve_config(text: Option<&str>) -> PyResult<String> {
    let cfg = match text {
        Some(t) => RunConfig::from_toml_str(t).map_err(to_py)?,
        None => RunConfig::default(),
    };
    cfg.to_toml_string().map_err(to_py)
}

#[pymodule]
fn histodiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(build_caption, m)?)?;
    m.add_function(wrap_pyfunction!(class_label, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_fit, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_timesteps, m)?)?;
    m.add_function(wrap_pyfunction!(toy_reports, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add("MAX_TOKENS", conditioning::MAX_TOKENS)?;
    Ok(())
}
