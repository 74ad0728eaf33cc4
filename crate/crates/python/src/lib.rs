//! Python bindings for the nested kNN precipitation detector.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nestknn::calibration::{calibrate_all, CalibrationConfig, CalibrationQuery, DEFAULT_CANDIDATE_KS};
use nestknn::config::{format_params, parse_params};
use nestknn::database::{self as db, build_balanced_database, AprioriDatabase, BuildConfig};
use nestknn::detector::{Detector, ParamSet, Query, Stage};
use nestknn::grid::{grid_accumulate, GeoDetection, PhaseGrid, Season};
use nestknn::io::{load_database, persist_database};
use nestknn::knn::{brute_force_knn, build_index, NeighborHit, SearchIndex};
use nestknn::metrics::{self, EvalConfig, EvalRecord, ProbabilityHistogram};
use nestknn::synth::{scenario_separable, ScenarioConfig};
use nestknn::{ContingencyTable, ErrorKind, LandSurfaceClass, MatchedSample, PhaseLabel, WeightMatrix};

create_exception!(nestknn_py, ConfigError, PyValueError, "Invalid configuration or parameters.");
create_exception!(nestknn_py, DataError, PyValueError, "Malformed or inconsistent input data.");
create_exception!(nestknn_py, InternalError, PyRuntimeError, "Violated internal invariant.");

fn to_py(e: nestknn::Error) -> PyErr {
    if let nestknn::Error::Io { .. } = e {
        return PyOSError::new_err(e.to_string());
    }
    match e.kind() {
        ErrorKind::Config => ConfigError::new_err(e.to_string()),
        ErrorKind::Data => DataError::new_err(e.to_string()),
        ErrorKind::Internal => InternalError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for nestknn::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn parse_land(s: &str) -> PyResult<LandSurfaceClass> {
    s.parse().py_err()
}

/// `None` is the identity; a flat list is a diagonal; a list of rows is a
/// full symmetric positive semi-definite matrix.
fn weights_from(dim: usize, diag: Option<Vec<f64>>, full: Option<Vec<Vec<f64>>>) -> PyResult<WeightMatrix> {
    match (diag, full) {
        (Some(_), Some(_)) => Err(ConfigError::new_err("give either diagonal or full weights, not both")),
        (Some(d), None) => WeightMatrix::diagonal(d).py_err(),
        (None, Some(rows)) => {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(ConfigError::new_err("full weight matrix must be square"));
            }
            WeightMatrix::full(n, rows.concat()).py_err()
        }
        (None, None) => Ok(WeightMatrix::identity(dim)),
    }
}

/// One matched observation: brightness temperatures plus truth.
#[pyclass(name = "Sample", module = "nestknn_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySample(MatchedSample);

#[pymethods]
impl PySample {
    #[new]
    #[pyo3(signature = (sample_id, tb, rate, ref_phase=None, snow_fraction=0.0, latitude=0.0, longitude=0.0, timestamp=0, skin_temp=280.0, air_temp=280.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        sample_id: u64,
        tb: Vec<f64>,
        rate: f64,
        ref_phase: Option<&str>,
        snow_fraction: f64,
        latitude: f64,
        longitude: f64,
        timestamp: i64,
        skin_temp: f64,
        air_temp: f64,
    ) -> PyResult<Self> {
        let phase = ref_phase.map(str::parse::<PhaseLabel>).transpose().py_err()?;
        let dim = tb.len();
        let s = MatchedSample {
            sample_id,
            tb: nestknn::ChannelVector::new(tb).py_err()?,
            rate,
            active_phase: phase,
            passive_phase_prob: None,
            ref_phase: phase,
            snow_fraction,
            skin_temp,
            air_temp,
            latitude,
            longitude,
            timestamp,
        };
        Ok(PySample(nestknn::validate_sample(s, dim).py_err()?))
    }

    #[getter]
    fn sample_id(&self) -> u64 {
        self.0.sample_id
    }

    #[getter]
    fn tb(&self) -> Vec<f64> {
        self.0.tb.as_slice().to_vec()
    }

    #[getter]
    fn rate(&self) -> f64 {
        self.0.rate
    }

    #[getter]
    fn ref_phase(&self) -> Option<&'static str> {
        self.0.ref_phase.map(PhaseLabel::as_str)
    }

    #[getter]
    fn atmospheric_class(&self) -> &'static str {
        self.0.atmospheric_class().as_str()
    }

    #[getter]
    fn land(&self) -> &'static str {
        db::land_class(&self.0).as_str()
    }

    #[getter]
    fn snow_fraction(&self) -> f64 {
        self.0.snow_fraction
    }

    #[getter]
    fn latitude(&self) -> f64 {
        self.0.latitude
    }

    #[getter]
    fn longitude(&self) -> f64 {
        self.0.longitude
    }

    #[getter]
    fn timestamp(&self) -> i64 {
        self.0.timestamp
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(id={}, class={}, land={})",
            self.0.sample_id,
            self.atmospheric_class(),
            self.land()
        )
    }
}

fn unwrap_samples(samples: Vec<PyRef<'_, PySample>>) -> Vec<MatchedSample> {
    samples.iter().map(|s| s.0.clone()).collect()
}

/// Synthetic build, calibration and holdout streams.
#[pyfunction]
#[pyo3(signature = (separation=6.0, n_per_class=1000, seed=0, n_calibration=None, n_holdout=None, channel_count=13))]
fn synth_scenario(
    py: Python<'_>,
    separation: f64,
    n_per_class: usize,
    seed: u64,
    n_calibration: Option<usize>,
    n_holdout: Option<usize>,
    channel_count: usize,
) -> PyResult<(Vec<PySample>, Vec<PySample>, Vec<PySample>)> {
    let mut cfg = ScenarioConfig::new(separation, n_per_class, seed);
    cfg.channel_count = channel_count;
    cfg.n_calibration = n_calibration.unwrap_or(n_per_class);
    cfg.n_holdout = n_holdout.unwrap_or(n_per_class);
    let sc = py.detach(|| scenario_separable(&cfg)).py_err()?;
    let wrap = |v: Vec<MatchedSample>| v.into_iter().map(PySample).collect();
    Ok((wrap(sc.build), wrap(sc.calibration), wrap(sc.holdout)))
}

/// Balanced a-priori database, one stratum per land class.
#[pyclass(name = "Database", module = "nestknn_py", frozen)]
struct PyDatabase(Arc<AprioriDatabase>);

#[pymethods]
impl PyDatabase {
    #[staticmethod]
    #[pyo3(signature = (samples, samples_per_land, seed=0, ref_threshold=0.5))]
    fn build(
        py: Python<'_>,
        samples: Vec<PyRef<'_, PySample>>,
        samples_per_land: usize,
        seed: u64,
        ref_threshold: f64,
    ) -> PyResult<Self> {
        let samples = unwrap_samples(samples);
        let dim = samples.first().map_or(nestknn::model::DEFAULT_CHANNEL_COUNT, |s| s.tb.len());
        let mut cfg = BuildConfig::new(dim, samples_per_land, seed);
        cfg.ref_threshold = ref_threshold;
        let built = py.detach(|| build_balanced_database(samples, &cfg)).py_err()?;
        Ok(PyDatabase(Arc::new(built)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDatabase(Arc::new(load_database(&path).py_err()?)))
    }

    /// Writes the database and returns its CRC-64 checksum.
    fn save(&self, path: PathBuf) -> PyResult<u64> {
        persist_database(&self.0, &path).py_err()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn channel_count(&self) -> usize {
        self.0.channel_count
    }

    /// Sample count per `(land, atmospheric class)`.
    fn counts(&self) -> Vec<(String, String, usize)> {
        self.0
            .counts()
            .into_iter()
            .map(|((l, a), n)| (l.to_string(), a.to_string(), n))
            .collect()
    }

    fn stratum(&self, land: &str) -> PyResult<Vec<PySample>> {
        Ok(self.0.stratum(parse_land(land)?).py_err()?.iter().cloned().map(PySample).collect())
    }
}

/// Calibrated `(k, W, p)` triples for every stage and land class.
#[pyclass(name = "Params", module = "nestknn_py", frozen)]
struct PyParams {
    set: ParamSet,
    dim: usize,
}

#[pymethods]
impl PyParams {
    #[staticmethod]
    fn from_text(text: &str, channel_count: usize) -> PyResult<Self> {
        Ok(PyParams {
            set: parse_params(text, channel_count, std::path::Path::new(".")).py_err()?,
            dim: channel_count,
        })
    }

    fn to_text(&self) -> String {
        format_params(&self.set)
    }

    /// `(k, (num, den))` of one stage; stages are numbered 1 to 3.
    fn stage(&self, land: &str, stage: usize) -> PyResult<(usize, (u64, u64))> {
        let land = parse_land(land)?;
        let st = Stage::from_number(stage).ok_or_else(|| ConfigError::new_err(format!("no stage {stage}")))?;
        let cascade = self
            .set
            .get(&land)
            .ok_or_else(|| DataError::new_err(format!("no parameters for {land}")))?;
        let p = cascade.stage(st);
        Ok((p.k, (p.p.num(), p.p.den())))
    }

    #[getter]
    fn channel_count(&self) -> usize {
        self.dim
    }
}

/// `(land, stage, k, auc)` of one calibrated stage.
type StageSummary = (String, usize, usize, f64);

/// Per-stage calibration: returns the parameters and one summary per stage.
#[pyfunction]
#[pyo3(signature = (database, samples, candidate_ks=None))]
fn calibrate(
    py: Python<'_>,
    database: &PyDatabase,
    samples: Vec<PyRef<'_, PySample>>,
    candidate_ks: Option<Vec<usize>>,
) -> PyResult<(PyParams, Vec<StageSummary>)> {
    let queries: Vec<CalibrationQuery> = samples.iter().map(|s| CalibrationQuery::from_sample(&s.0)).collect();
    let cfg = CalibrationConfig {
        candidate_ks: candidate_ks.unwrap_or_else(|| DEFAULT_CANDIDATE_KS.to_vec()),
        ..CalibrationConfig::default()
    };
    let dbr = &database.0;
    let outcome = py.detach(|| calibrate_all(&queries, dbr, &cfg)).py_err()?;
    let summary = outcome
        .stages
        .iter()
        .map(|s| (s.land.to_string(), s.stage.number(), s.params.k, s.auc))
        .collect();
    Ok((
        PyParams {
            set: outcome.params,
            dim: dbr.channel_count,
        },
        summary,
    ))
}

/// Detector output for one query.
#[pyclass(name = "Detection", module = "nestknn_py", frozen, get_all, from_py_object)]
#[derive(Clone)]
struct PyDetection {
    sample_id: u64,
    precipitating: bool,
    phase: Option<&'static str>,
    n_p: usize,
    n_l: Option<usize>,
    n_s: Option<usize>,
    n_m: Option<usize>,
}

#[pymethods]
impl PyDetection {
    fn __repr__(&self) -> String {
        format!(
            "Detection(id={}, precipitating={}, phase={})",
            self.sample_id,
            self.precipitating,
            self.phase.unwrap_or("none")
        )
    }
}

fn detection_from(sample_id: u64, d: &nestknn::detector::Detection) -> PyDetection {
    let v = &d.stage_votes;
    let sm = v.solid_mixed.as_ref();
    PyDetection {
        sample_id,
        precipitating: d.precipitating,
        phase: d.phase.map(PhaseLabel::as_str),
        n_p: v.occurrence.n_p,
        n_l: v.liquid.as_ref().map(|l| l.n_l),
        n_s: sm.map(|s| s.n_s).or(v.liquid.as_ref().map(|l| l.n_s)),
        n_m: sm.map(|s| s.n_m).or(v.liquid.as_ref().map(|l| l.n_m)),
    }
}

#[pyclass(name = "Detector", module = "nestknn_py", frozen)]
struct PyDetector(Detector<Arc<AprioriDatabase>>);

#[pymethods]
impl PyDetector {
    #[new]
    fn new(py: Python<'_>, database: &PyDatabase, params: &PyParams) -> PyResult<Self> {
        let db = Arc::clone(&database.0);
        Ok(PyDetector(py.detach(|| Detector::new(db, &params.set)).py_err()?))
    }

    fn retrieve(&self, tb: Vec<f64>, land: &str) -> PyResult<PyDetection> {
        let d = self.0.retrieve(&tb, parse_land(land)?).py_err()?;
        Ok(detection_from(0, &d))
    }

    /// Retrieves every sample, taking the land class from its snow fraction.
    fn retrieve_samples(&self, py: Python<'_>, samples: Vec<PyRef<'_, PySample>>) -> PyResult<Vec<PyDetection>> {
        let queries: Vec<Query> = samples
            .iter()
            .map(|s| Query {
                sample_id: s.0.sample_id,
                tb: s.0.tb.as_slice().to_vec(),
                land: db::land_class(&s.0),
            })
            .collect();
        let records = py.detach(|| self.0.retrieve_batch(&queries)).py_err()?;
        Ok(records.iter().map(|r| detection_from(r.sample_id, &r.detection)).collect())
    }
}

/// Exact kNN index over one stratum.
#[pyclass(name = "SearchIndex", module = "nestknn_py", frozen)]
struct PySearchIndex {
    db: Arc<AprioriDatabase>,
    land: LandSurfaceClass,
    index: SearchIndex,
}

fn hits_out(hits: Vec<NeighborHit>) -> Vec<(u64, f64, &'static str)> {
    hits.into_iter()
        .map(|h| (h.sample_id, h.distance, h.atmospheric_class.as_str()))
        .collect()
}

#[pymethods]
impl PySearchIndex {
    #[new]
    #[pyo3(signature = (database, land, diagonal=None, full=None))]
    fn new(database: &PyDatabase, land: &str, diagonal: Option<Vec<f64>>, full: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let land = parse_land(land)?;
        let w = weights_from(database.0.channel_count, diagonal, full)?;
        let stratum = database.0.stratum(land).py_err()?;
        Ok(PySearchIndex {
            db: Arc::clone(&database.0),
            land,
            index: build_index(stratum, &w).py_err()?,
        })
    }

    /// `(sample_id, squared distance, class)` of the `k` nearest samples.
    fn query(&self, y: Vec<f64>, k: usize) -> PyResult<Vec<(u64, f64, &'static str)>> {
        Ok(hits_out(self.index.query_knn(&y, k).py_err()?))
    }

    /// The same answer by exhaustive scan.
    fn brute_force(&self, y: Vec<f64>, k: usize) -> PyResult<Vec<(u64, f64, &'static str)>> {
        let stratum = self.db.stratum(self.land).py_err()?;
        Ok(hits_out(brute_force_knn(stratum, &y, k, self.index.weights()).py_err()?))
    }

    fn __len__(&self) -> usize {
        self.index.len()
    }
}

/// Contingency counts `(a, b, c, d)` from paired predictions and truth.
#[pyfunction]
fn contingency(pred: Vec<bool>, truth: Vec<bool>) -> PyResult<(u64, u64, u64, u64)> {
    let t = metrics::contingency(&pred, &truth).py_err()?;
    Ok((t.a, t.b, t.c, t.d))
}

#[pyfunction]
fn pod(a: u64, b: u64, c: u64, d: u64) -> PyResult<f64> {
    metrics::pod(&ContingencyTable::new(a, b, c, d)).py_err()
}

#[pyfunction]
fn pofa(a: u64, b: u64, c: u64, d: u64) -> PyResult<f64> {
    metrics::pofa(&ContingencyTable::new(a, b, c, d)).py_err()
}

#[pyfunction]
fn hss(a: u64, b: u64, c: u64, d: u64) -> PyResult<f64> {
    metrics::hss(&ContingencyTable::new(a, b, c, d)).py_err()
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&x, &y).py_err()
}

#[pyfunction]
fn rmse_normalized(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::rmse_normalized(&x, &y).py_err()
}

/// KL divergence of two count histograms over the same bins.
#[pyfunction]
fn kl_divergence(p: Vec<u64>, q: Vec<u64>) -> PyResult<f64> {
    let p = ProbabilityHistogram::from_counts(p).py_err()?;
    let q = ProbabilityHistogram::from_counts(q).py_err()?;
    metrics::kl_divergence(&p, &q).py_err()
}

/// Reference phase from the active phase and the passive liquid probability.
#[pyfunction]
#[pyo3(signature = (active, passive_prob, threshold=0.5))]
fn merge_ref_phase(active: &str, passive_prob: f64, threshold: f64) -> PyResult<&'static str> {
    let active: PhaseLabel = active.parse().py_err()?;
    Ok(db::merge_ref_phase(active, passive_prob, threshold).py_err()?.as_str())
}

/// Evaluation report text (skill table and map similarity) for detections
/// of the given truth samples.
#[pyfunction]
#[pyo3(signature = (truth, detections, cell_deg=0.1))]
fn evaluate(truth: Vec<PyRef<'_, PySample>>, detections: Vec<PyDetection>, cell_deg: f64) -> PyResult<String> {
    let by_id: std::collections::HashMap<u64, &MatchedSample> = truth.iter().map(|s| (s.0.sample_id, &s.0)).collect();
    let records = detections
        .iter()
        .map(|d| {
            let t = by_id
                .get(&d.sample_id)
                .ok_or_else(|| DataError::new_err(format!("detection {} has no truth sample", d.sample_id)))?;
            Ok(EvalRecord {
                truth: (*t).clone(),
                precipitating: d.precipitating,
                phase: d.phase.map(str::parse::<PhaseLabel>).transpose().py_err()?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = EvalConfig {
        cell_deg,
        ..EvalConfig::default()
    };
    let report = metrics::evaluation_report(&records, &cfg).py_err()?;
    let mut buf = Vec::new();
    metrics::write_report(&mut buf, &report).map_err(|e| PyOSError::new_err(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| InternalError::new_err(e.to_string()))
}

/// Mean phase index per cell: `[(lat, lon, mean, count)]` at cell centers.
/// Detections are `(lat, lon, timestamp, phase or None)`.
#[pyfunction]
#[pyo3(signature = (detections, cell_deg=0.1, season=None))]
fn phase_grid(
    detections: Vec<(f64, f64, i64, Option<String>)>,
    cell_deg: f64,
    season: Option<&str>,
) -> PyResult<Vec<(f64, f64, f64, u64)>> {
    let season = season.map(str::parse::<Season>).transpose().py_err()?;
    let geo = detections
        .into_iter()
        .map(|(latitude, longitude, timestamp, phase)| {
            let phase = phase.as_deref().map(str::parse::<PhaseLabel>).transpose().py_err()?;
            Ok(GeoDetection {
                latitude,
                longitude,
                timestamp,
                precipitating: phase.is_some(),
                phase,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let grid: PhaseGrid = grid_accumulate(&geo, cell_deg, season, None).py_err()?;
    Ok(grid
        .cells()
        .iter()
        .filter_map(|(&cell, acc)| {
            let (lat, lon) = grid.center(cell);
            acc.mean().map(|m| (lat, lon, m, acc.count))
        })
        .collect())
}

#[pymodule]
pub fn nestknn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add("InternalError", m.py().get_type::<InternalError>())?;
    m.add_class::<PySample>()?;
    m.add_class::<PyDatabase>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PySearchIndex>()?;
    m.add_function(wrap_pyfunction!(synth_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(contingency, m)?)?;
    m.add_function(wrap_pyfunction!(pod, m)?)?;
    m.add_function(wrap_pyfunction!(pofa, m)?)?;
    m.add_function(wrap_pyfunction!(hss, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(rmse_normalized, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(merge_ref_phase, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(phase_grid, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_shapes() {
        assert_eq!(weights_from(3, None, None).unwrap(), WeightMatrix::identity(3));
        assert!(weights_from(2, Some(vec![1.0, 2.0]), None).unwrap().is_diagonal());
        let full = weights_from(2, None, Some(vec![vec![2.0, 1.0], vec![1.0, 2.0]])).unwrap();
        assert_eq!(full.get(0, 1), 1.0);
        assert!(weights_from(2, None, Some(vec![vec![1.0], vec![1.0, 2.0]])).is_err());
        assert!(weights_from(2, Some(vec![1.0]), Some(vec![vec![1.0]])).is_err());
    }
}
