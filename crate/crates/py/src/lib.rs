//! Python bindings: Otsu thresholding, Dice, synthetic data, the
//! selection-loop simulator and evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use flim_core::criterion::{dice_binary, otsu_values, Mask};
use flim_core::dataset::{Dataset, Split};
use flim_core::io::{load_checkpoint, synth_dataset, SynthConfig};
use flim_core::session::evaluate_split;
use flim_core::simulate::{simulate as run_simulation, SimConfig, Strategy};
use flim_core::train::TrainConfig;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: flim_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Otsu threshold of a flat list of values.
#[pyfunction]
fn otsu_threshold(values: Vec<f32>) -> PyResult<f64> {
    otsu_values(&values).map_err(err)
}

/// Dice coefficient of two equally long boolean masks.
#[pyfunction]
fn dice(a: Vec<bool>, b: Vec<bool>) -> PyResult<f64> {
    let dims = vec![1, a.len()];
    dice_binary(&Mask::new(dims.clone(), a), &Mask::new(vec![1, b.len()], b)).map_err(err)
}

/// Writes a synthetic dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, cases, dims, seed = 0))]
fn synth(
    py: Python<'_>,
    out: PathBuf,
    cases: usize,
    dims: Vec<usize>,
    seed: u64,
) -> PyResult<PathBuf> {
    let cfg = SynthConfig::new(cases, dims, seed);
    py.detach(|| synth_dataset(&cfg, &out)).map_err(err)?;
    Ok(out.join("manifest.json"))
}

/// Replays the selection loop; returns the result CSV. `epochs = 0` runs
/// selection only.
#[pyfunction]
#[pyo3(signature = (manifest, budget = 8, strategy = "interactive", seeds = vec![0], epochs = 0))]
fn simulate(
    py: Python<'_>,
    manifest: PathBuf,
    budget: usize,
    strategy: &str,
    seeds: Vec<u64>,
    epochs: usize,
) -> PyResult<String> {
    let strategy: Strategy = strategy.parse().map_err(err)?;
    let mut cfg = SimConfig::new(strategy, budget, seeds);
    cfg.train = (epochs > 0).then(|| TrainConfig {
        epochs,
        ..TrainConfig::default()
    });
    py.detach(|| {
        let ds = Dataset::load(&manifest)?;
        Ok(run_simulation(&ds, &cfg)?.to_csv())
    })
    .map_err(err)
}

/// Mean and std Dice per region of a trained checkpoint on the test split.
#[pyfunction]
fn evaluate(
    py: Python<'_>,
    manifest: PathBuf,
    checkpoint: PathBuf,
) -> PyResult<BTreeMap<String, (f64, f64)>> {
    py.detach(|| {
        let net = load_checkpoint(&checkpoint)?.to_net()?;
        let ds = Dataset::load(&manifest)?;
        let report = evaluate_split(&net, &ds, Split::Test)?;
        Ok(report
            .regions
            .iter()
            .map(|r| (r.region.to_string(), (r.mean, r.std)))
            .collect())
    })
    .map_err(err)
}

#[pymodule]
fn flimsel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(otsu_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
