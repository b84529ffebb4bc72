//! Python bindings for the phenoflow pipeline.
//!
//! Matrices cross the boundary as nested lists with the library's row
//! convention: variables or components are rows, instances are columns.

use std::path::Path;

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use phenoflow::config::PipelineConfig;
use phenoflow::cross_section::Instance;
use phenoflow::curves::{estimate_intensity, Grid, IntensityConfig, MonotoneCubic};
use phenoflow::evaluation::{self, ReproductionSummary};
use phenoflow::forest::{self, ForestHyperParams, LabeledInstances};
use phenoflow::ica::{self, IcaModel, IcaOptions};
use phenoflow::ingest::{EventSeries, RecordSpan};

fn perr(e: phenoflow::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(PyValueError::new_err(format!("{what} must be non-empty")));
    }
    let ncols = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!(
            "{what} rows have uneven lengths ({} vs {ncols})",
            bad.len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Pipeline configuration; starts from the library defaults.
#[pyclass]
struct Config {
    inner: PipelineConfig,
}

#[pymethods]
impl Config {
    #[new]
    fn new() -> Config {
        Config {
            inner: PipelineConfig::default(),
        }
    }

    /// Parses `key = value` lines on top of the defaults.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Config> {
        let inner = PipelineConfig::parse(text, Path::new("<python>")).map_err(perr)?;
        Ok(Config { inner })
    }

    /// The full configuration in canonical `key = value` form.
    fn canonical(&self) -> String {
        self.inner.canonical()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(perr)
    }

    #[getter]
    fn get_n_patients(&self) -> usize {
        self.inner.n_patients
    }

    #[setter]
    fn set_n_patients(&mut self, v: usize) {
        self.inner.n_patients = v;
    }

    #[getter]
    fn get_k(&self) -> usize {
        self.inner.k
    }

    #[setter]
    fn set_k(&mut self, v: usize) {
        self.inner.k = v;
    }

    #[getter]
    fn get_k_true(&self) -> usize {
        self.inner.k_true
    }

    #[setter]
    fn set_k_true(&mut self, v: usize) {
        self.inner.k_true = v;
    }

    #[getter]
    fn get_n_trees(&self) -> usize {
        self.inner.n_trees
    }

    #[setter]
    fn set_n_trees(&mut self, v: usize) {
        self.inner.n_trees = v;
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(n_patients={}, k_true={}, k={}, seed={})",
            self.inner.n_patients, self.inner.k_true, self.inner.k, self.inner.seed
        )
    }
}

/// Shape-preserving monotone cubic interpolant through (x, y) knots.
#[pyclass]
struct Curve {
    inner: MonotoneCubic,
}

#[pymethods]
impl Curve {
    #[new]
    fn new(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<Curve> {
        Ok(Curve {
            inner: MonotoneCubic::new(xs, ys).map_err(perr)?,
        })
    }

    fn eval(&self, t: f64) -> f64 {
        self.inner.eval(t)
    }

    fn eval_many(&self, ts: Vec<f64>) -> Vec<f64> {
        ts.into_iter().map(|t| self.inner.eval(t)).collect()
    }
}

/// A fitted decomposition: whitening plus the orthogonal unmixing rotation.
#[pyclass]
struct IcaResult {
    model: IcaModel,
    s_train: DMatrix<f64>,
}

#[pymethods]
impl IcaResult {
    #[getter]
    fn rank(&self) -> usize {
        self.model.rank
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.model.convergence.iterations
    }

    #[getter]
    fn converged(&self) -> bool {
        self.model.convergence.converged
    }

    /// Variables-by-components loading matrix.
    fn mixing(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.model.mixing)
    }

    /// Component expressions of the training data (components x instances).
    fn expressions(&self) -> Vec<Vec<f64>> {
        from_matrix(&self.s_train)
    }

    /// Projects new data (variables x instances) onto the components.
    fn project(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = to_matrix(&x, "x")?;
        Ok(from_matrix(&ica::project(&self.model, &m).map_err(perr)?))
    }
}

/// A trained random forest classifier.
#[pyclass]
struct Forest {
    model: forest::ForestModel,
}

#[pymethods]
impl Forest {
    #[getter]
    fn importances(&self) -> Vec<f64> {
        self.model.importances.clone()
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.model.trees.len()
    }

    /// Positive-class scores for instances given as feature rows x columns.
    fn predict_proba(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let m = to_matrix(&features, "features")?;
        forest::predict_proba(&self.model, &m).map_err(perr)
    }
}

/// Metrics of one end-to-end reproduction run.
#[pyclass]
struct Outcome {
    inner: ReproductionSummary,
}

#[pymethods]
impl Outcome {
    #[getter]
    fn n_records(&self) -> usize {
        self.inner.n_records
    }

    #[getter]
    fn n_instances(&self) -> usize {
        self.inner.n_instances
    }

    #[getter]
    fn mean_matched_correlation(&self) -> f64 {
        self.inner.recovery.mean_correlation
    }

    #[getter]
    fn amari_matched(&self) -> Option<f64> {
        self.inner.amari_matched
    }

    #[getter]
    fn target_component(&self) -> Option<usize> {
        self.inner.target_component
    }

    #[getter]
    fn target_correlation(&self) -> f64 {
        self.inner.target_correlation
    }

    #[getter]
    fn n_positive(&self) -> usize {
        self.inner.n_positive
    }

    #[getter]
    fn auc_oob(&self) -> f64 {
        self.inner.auc_oob
    }

    #[getter]
    fn auc_test(&self) -> f64 {
        self.inner.auc_test
    }

    #[getter]
    fn target_importance_rank(&self) -> Option<usize> {
        self.inner.target_importance_rank
    }

    /// (true source, recovered component, |correlation|) per matched pair.
    fn pairs(&self) -> Vec<(usize, usize, f64)> {
        self.inner
            .recovery
            .pairs
            .iter()
            .map(|p| (p.truth, p.recovered, p.correlation))
            .collect()
    }

    /// The same key = value block run_reproduction writes to metrics.txt.
    fn metrics(&self) -> String {
        self.inner.metrics_block()
    }
}

/// Estimates an event-intensity curve; returns (grid times, events/year).
#[pyfunction]
#[pyo3(signature = (times, start, end, points_per_year=52.0, iterations=100, seed=0))]
fn intensity_curve(
    times: Vec<f64>,
    start: f64,
    end: f64,
    points_per_year: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let span = RecordSpan {
        record_id: "py".into(),
        start,
        end,
    };
    let series = EventSeries {
        record_id: "py".into(),
        variable_id: "events".into(),
        times,
    };
    let grid = Grid::covering(&span, points_per_year).map_err(perr)?;
    let cfg = IntensityConfig {
        iterations,
        seed,
        ..IntensityConfig::default()
    };
    let curve = estimate_intensity(&series, &span, &grid, &cfg).map_err(perr)?;
    Ok((grid.points().collect(), curve.values))
}

/// Fits the decomposition to data given as variable rows x instance columns.
#[pyfunction]
#[pyo3(signature = (x, rank, seed=0))]
fn fit_ica(x: Vec<Vec<f64>>, rank: usize, seed: u64) -> PyResult<IcaResult> {
    let m = to_matrix(&x, "x")?;
    let fit = ica::fit_ica(&m, &IcaOptions::new(rank, seed)).map_err(perr)?;
    Ok(IcaResult {
        model: fit.model,
        s_train: fit.s_train,
    })
}

/// Mean |correlation| plus the matched (truth, recovered, |correlation|) pairs.
type MatchOutcome = (f64, Vec<(usize, usize, f64)>);

/// Greedy-free optimal matching of recovered to true components; returns
/// (mean |correlation|, [(truth, recovered, |correlation|), ...]).
#[pyfunction]
fn match_components(s_true: Vec<Vec<f64>>, s_rec: Vec<Vec<f64>>) -> PyResult<MatchOutcome> {
    let t = to_matrix(&s_true, "s_true")?;
    let r = to_matrix(&s_rec, "s_rec")?;
    let report = evaluation::match_components(&t, &r).map_err(perr)?;
    let pairs = report
        .pairs
        .iter()
        .map(|p| (p.truth, p.recovered, p.correlation))
        .collect();
    Ok((report.mean_correlation, pairs))
}

/// Distance of a composite unmixing-times-mixing map from a scaled
/// permutation; 0 means perfect separation.
#[pyfunction]
fn amari_index(p: Vec<Vec<f64>>) -> PyResult<f64> {
    evaluation::amari_index(&to_matrix(&p, "p")?).map_err(perr)
}

/// Area under the ROC curve with tie handling.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    forest::auc(&scores, &labels).map_err(perr)
}

/// Trains a random forest on features given as feature rows x instance
/// columns with one boolean label per column.
#[pyfunction]
#[pyo3(signature = (features, labels, n_trees=300, seed=0))]
fn train_forest(
    features: Vec<Vec<f64>>,
    labels: Vec<bool>,
    n_trees: usize,
    seed: u64,
) -> PyResult<Forest> {
    let m = to_matrix(&features, "features")?;
    let provenance = (0..m.ncols())
        .map(|j| Instance {
            record_id: format!("i{j}"),
            time: 0.0,
        })
        .collect();
    let data = LabeledInstances::new(m, labels, provenance).map_err(perr)?;
    let params = ForestHyperParams {
        n_trees,
        ..ForestHyperParams::default()
    };
    let model = forest::train_forest(&data, &params, seed).map_err(perr)?;
    Ok(Forest { model })
}

/// Runs the full synthetic reproduction into `out_dir` and returns metrics.
#[pyfunction]
fn reproduce(config: &Config, out_dir: &str) -> PyResult<Outcome> {
    let inner = evaluation::run_reproduction(&config.inner, Path::new(out_dir)).map_err(perr)?;
    Ok(Outcome { inner })
}

#[pymodule]
pub fn phenoflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Curve>()?;
    m.add_class::<IcaResult>()?;
    m.add_class::<Forest>()?;
    m.add_class::<Outcome>()?;
    m.add_function(wrap_pyfunction!(intensity_curve, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ica, m)?)?;
    m.add_function(wrap_pyfunction!(match_components, m)?)?;
    m.add_function(wrap_pyfunction!(amari_index, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(train_forest, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce, m)?)?;
    Ok(())
}
