//! Python bindings: tensors, HOSVD, multilinear maps, synthetic datasets,
//! the surrogate scan and the correlation statistics.

use std::fmt::Display;

use mcl_core::search::{Fixture, SearchOptions};
use mcl_core::{
    build_report, compression_rate as core_rate, downsample as core_downsample, hosvd as core_hosvd,
    make_synthetic, multilinear_map as core_map, pearson as core_pearson, spearman as core_spearman,
    surrogate_scan, ConfigGrid, ConfigPoint, CorrelationReport, DenseTensor, EvalRecord, FactorMatrix,
    LabeledDataset, OptimizerConfig, SplitPart, SyntheticSpec, TensorShape,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn shape(dims: Vec<usize>) -> PyResult<TensorShape> {
    TensorShape::new(dims).map_err(err)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<FactorMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(err("matrix rows have different lengths"));
    }
    FactorMatrix::new(rows.len(), cols, rows.concat()).map_err(err)
}

fn rows(m: &FactorMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Dense row-major tensor of f64, last mode fastest. Modes are 1-based.
#[pyclass(name = "Tensor", module = "mcl", skip_from_py_object)]
#[derive(Clone, Debug)]
pub struct PyTensor {
    pub inner: DenseTensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor { inner: DenseTensor::new(shape(dims)?, data).map_err(err)? })
    }

    #[staticmethod]
    pub fn zeros(dims: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor { inner: DenseTensor::zeros(shape(dims)?) })
    }

    #[getter]
    pub fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    pub fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    pub fn unfold(&self, mode: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.unfold(mode).map_err(err)?))
    }

    pub fn mode_product(&self, matrix_rows: Vec<Vec<f64>>, mode: usize) -> PyResult<PyTensor> {
        let a = matrix(&matrix_rows)?;
        Ok(PyTensor { inner: self.inner.mode_product(&a, mode).map_err(err)? })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.frobenius_norm()
    }

    pub fn mse(&self, other: &PyTensor) -> PyResult<f64> {
        self.inner.mse(&other.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?})", self.inner.dims())
    }
}

/// Applies `factors[k]` along mode k+1 for every mode.
#[pyfunction]
pub fn multilinear_map(t: &PyTensor, factors: Vec<Vec<Vec<f64>>>) -> PyResult<PyTensor> {
    let fs = factors.iter().map(|f| matrix(f)).collect::<PyResult<Vec<_>>>()?;
    Ok(PyTensor { inner: core_map(&t.inner, &fs).map_err(err)? })
}

/// Truncated HOSVD: returns `(core, factors)` with factor k of shape `target_k × I_k`.
#[pyfunction]
pub fn hosvd(t: &PyTensor, target: Vec<usize>) -> PyResult<(PyTensor, Vec<Vec<Vec<f64>>>)> {
    let h = core_hosvd(&t.inner, &shape(target)?).map_err(err)?;
    Ok((PyTensor { inner: h.core }, h.factors.iter().map(rows).collect()))
}

/// Area-average resampling to the target dims.
#[pyfunction]
pub fn downsample(t: &PyTensor, target: Vec<usize>) -> PyResult<PyTensor> {
    Ok(PyTensor { inner: core_downsample(&t.inner, &shape(target)?).map_err(err)? })
}

#[pyfunction]
pub fn compression_rate(input: Vec<usize>, measurements: Vec<usize>) -> PyResult<f64> {
    let c = ConfigPoint::from_dims(&input, &measurements).map_err(err)?;
    Ok(core_rate(&c))
}

#[pyfunction]
pub fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    core_pearson(&xs, &ys).map_err(err)
}

#[pyfunction]
pub fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    core_spearman(&xs, &ys).map_err(err)
}

/// Labeled tensor dataset with a stratified train/val/test split.
#[pyclass(name = "Dataset", module = "mcl", skip_from_py_object)]
#[derive(Clone, Debug)]
pub struct PyDataset {
    pub inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (class_count, samples_per_class, dims, rank, noise_std, seed))]
    pub fn synthetic(
        class_count: usize,
        samples_per_class: usize,
        dims: Vec<usize>,
        rank: Vec<usize>,
        noise_std: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec::new(class_count, samples_per_class, shape(dims)?, shape(rank)?, noise_std, seed);
        Ok(PyDataset { inner: make_synthetic(&spec).map_err(err)? })
    }

    #[getter]
    pub fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    pub fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    /// Sample indices of `"train"`, `"val"` or `"test"`.
    pub fn split(&self, part: &str) -> PyResult<Vec<usize>> {
        let p = match part {
            "train" => SplitPart::Train,
            "val" => SplitPart::Val,
            "test" => SplitPart::Test,
            other => return Err(err(format!("unknown split `{other}`"))),
        };
        Ok(self.inner.indices(p).to_vec())
    }

    pub fn sample(&self, index: usize) -> PyResult<PyTensor> {
        let t = self.inner.samples().get(index).ok_or_else(|| err(format!("index {index} out of range")))?;
        Ok(PyTensor { inner: t.clone() })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// One surrogate or evaluation record, flattened for Python.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub input: Vec<usize>,
    pub measurements: Vec<usize>,
    pub compression_rate: f64,
    pub init_mse: f64,
    pub accuracy: Option<f64>,
    pub ce: Option<f64>,
    pub seed: u64,
}

impl From<&EvalRecord> for Row {
    fn from(r: &EvalRecord) -> Self {
        Row {
            input: r.config.input.dims().to_vec(),
            measurements: r.config.measurements.dims().to_vec(),
            compression_rate: r.compression_rate,
            init_mse: r.init_mse,
            accuracy: r.accuracy,
            ce: r.ce,
            seed: r.seed,
        }
    }
}

fn row_dict<'py>(py: Python<'py>, r: &Row) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("input", r.input.clone())?;
    d.set_item("measurements", r.measurements.clone())?;
    d.set_item("compression_rate", r.compression_rate)?;
    d.set_item("init_mse", r.init_mse)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("ce", r.ce)?;
    d.set_item("seed", r.seed)?;
    Ok(d)
}

fn correlation_dict<'py>(py: Python<'py>, c: &CorrelationReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("pearson_ce_mse", c.pearson_ce_mse)?;
    d.set_item("pearson_ce_rate", c.pearson_ce_rate)?;
    d.set_item("spearman_ce_mse", c.spearman_ce_mse)?;
    d.set_item("n", c.n)?;
    Ok(d)
}

pub fn fixture_from_name(name: &str) -> PyResult<Fixture> {
    name.parse().map_err(err)
}

pub fn scan_rows(
    ds: &LabeledDataset,
    inputs: Vec<Vec<usize>>,
    measurements: Vec<Vec<usize>>,
    seeds: Vec<u64>,
    epochs: usize,
) -> PyResult<Vec<Row>> {
    let grid = ConfigGrid::new(
        inputs.into_iter().map(shape).collect::<PyResult<_>>()?,
        measurements.into_iter().map(shape).collect::<PyResult<_>>()?,
    );
    let opts = SearchOptions {
        init: OptimizerConfig::reconstruction().with_epochs(epochs),
        seeds,
        dataset_name: "python".into(),
        ..SearchOptions::default()
    };
    let recs = surrogate_scan(ds, &grid, &opts).map_err(err)?;
    Ok(recs.iter().map(Row::from).collect())
}

/// Records of a bundled reference table (`"pubfig83"` or `"caltech101"`).
#[pyfunction]
pub fn fixture_records<'py>(py: Python<'py>, name: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    fixture_from_name(name)?.records().iter().map(|r| row_dict(py, &Row::from(r))).collect()
}

/// Seed-averaged correlation report of a bundled reference table.
#[pyfunction]
pub fn correlate_fixture<'py>(py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyDict>> {
    let report = build_report(&fixture_from_name(name)?.records(), false).map_err(err)?;
    correlation_dict(py, &report.correlation)
}

/// Reconstruction-initialization MSE for every `(input, measurements, seed)`,
/// in grid order with seeds innermost.
#[pyfunction]
#[pyo3(signature = (dataset, inputs, measurements, seeds = vec![0], epochs = 35))]
pub fn scan<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    inputs: Vec<Vec<usize>>,
    measurements: Vec<Vec<usize>>,
    seeds: Vec<u64>,
    epochs: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = py.detach(|| scan_rows(&dataset.inner, inputs, measurements, seeds, epochs))?;
    rows.iter().map(|r| row_dict(py, r)).collect()
}

#[pymodule]
fn mcl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(multilinear_map, m)?)?;
    m.add_function(wrap_pyfunction!(hosvd, m)?)?;
    m.add_function(wrap_pyfunction!(downsample, m)?)?;
    m.add_function(wrap_pyfunction!(compression_rate, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(fixture_records, m)?)?;
    m.add_function(wrap_pyfunction!(correlate_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(scan, m)?)?;
    Ok(())
}
