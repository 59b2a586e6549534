//! Sensor-configuration search: grid enumeration, the initialization-MSE
//! surrogate scan, ranking, full evaluation and correlation analysis.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SplitPart};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::model::{
    fit_joint, fit_reconstruction, init_task_head, evaluate_paired, reconstruction_mse,
    starting_operators, MclModel, PairedSamples,
};
use crate::optim::OptimizerConfig;
use crate::tensor::TensorShape;

/// One sensor configuration: sampling resolution `I` and measurement
/// dims `M`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfigPoint {
    pub input: TensorShape,
    pub measurements: TensorShape,
}

impl ConfigPoint {
    pub fn new(input: TensorShape, measurements: TensorShape) -> Result<Self> {
        if input.order() != measurements.order() {
            return Err(Error::DimensionMismatch(format!(
                "I = {input} and M = {measurements} have different orders"
            )));
        }
        Ok(ConfigPoint {
            input,
            measurements,
        })
    }

    pub fn from_dims(input: &[usize], measurements: &[usize]) -> Result<Self> {
        ConfigPoint::new(
            TensorShape::new(input.to_vec())?,
            TensorShape::new(measurements.to_vec())?,
        )
    }

    /// `∏ I_k / ∏ M_k`.
    pub fn compression_rate(&self) -> f64 {
        compression_rate(self)
    }

    /// Orders by `I` descending, then `M` descending.
    fn table_order(&self, other: &Self) -> std::cmp::Ordering {
        other
            .input
            .cmp(&self.input)
            .then_with(|| other.measurements.cmp(&self.measurements))
    }
}

impl std::fmt::Display for ConfigPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "I={} M={}", self.input, self.measurements)
    }
}

pub fn compression_rate(c: &ConfigPoint) -> f64 {
    c.input.numel() as f64 / c.measurements.numel() as f64
}

/// Feasible sensor resolutions and measurement dims.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigGrid {
    pub inputs: Vec<TensorShape>,
    pub measurements: Vec<TensorShape>,
}

/// Inclusive per-mode range `min..=max` stepping by `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRange {
    pub min: usize,
    pub max: usize,
    pub step: usize,
}

impl ModeRange {
    fn values(&self) -> Result<Vec<usize>> {
        if self.step == 0 || self.min == 0 || self.min > self.max {
            return Err(Error::InvalidConfig(format!("bad range {self:?}")));
        }
        Ok((self.min..=self.max).step_by(self.step).collect())
    }
}

fn cartesian(ranges: &[ModeRange]) -> Result<Vec<TensorShape>> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new()];
    for r in ranges {
        let vals = r.values()?;
        out = out
            .into_iter()
            .flat_map(|prefix| {
                vals.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out.into_iter().map(TensorShape::new).collect()
}

impl ConfigGrid {
    pub fn new(inputs: Vec<TensorShape>, measurements: Vec<TensorShape>) -> Self {
        ConfigGrid {
            inputs,
            measurements,
        }
    }

    /// Per-mode bounds with steps; every combination of per-mode values is
    /// feasible.
    pub fn from_bounds(inputs: &[ModeRange], measurements: &[ModeRange]) -> Result<Self> {
        Ok(ConfigGrid {
            inputs: cartesian(inputs)?,
            measurements: cartesian(measurements)?,
        })
    }

    /// The 5 × 6 grid of the reference experiments on 256×256×3 images.
    pub fn reference() -> Self {
        let sq = |n: usize, c: usize| TensorShape::new(vec![n, n, c]).expect("positive");
        ConfigGrid {
            inputs: [256, 224, 192, 160, 128].iter().map(|&n| sq(n, 3)).collect(),
            measurements: [30, 28, 26, 24, 22, 20].iter().map(|&n| sq(n, 1)).collect(),
        }
    }

    /// Per-mode maximum of the listed resolutions.
    pub fn max_input(&self) -> Option<TensorShape> {
        let first = self.inputs.first()?;
        let dims = (0..first.order())
            .map(|k| self.inputs.iter().map(|s| s.dims()[k]).max().unwrap_or(1))
            .collect::<Vec<_>>();
        TensorShape::new(dims).ok()
    }

    /// Checks `I_k <= I_k^max` and `M_k <= I_k^max` for every listed shape.
    pub fn validate(&self, max_shape: &TensorShape) -> Result<()> {
        if self.inputs.is_empty() || self.measurements.is_empty() {
            return Err(Error::Empty("configuration grid".into()));
        }
        for s in self.inputs.iter().chain(&self.measurements) {
            crate::tensor::check_truncation(max_shape, s).map_err(|e| {
                Error::InvalidConfig(format!("grid shape {s} infeasible for I^max {max_shape}: {e}"))
            })?;
        }
        Ok(())
    }
}

/// Cartesian product of resolutions × measurement dims, ordered by `I`
/// descending and then `M` descending. Duplicates are dropped.
pub fn enumerate_grid(g: &ConfigGrid) -> Result<Vec<ConfigPoint>> {
    if g.inputs.is_empty() || g.measurements.is_empty() {
        return Err(Error::Empty("configuration grid".into()));
    }
    let mut inputs = g.inputs.clone();
    let mut meas = g.measurements.clone();
    inputs.sort_by(|a, b| b.cmp(a));
    inputs.dedup();
    meas.sort_by(|a, b| b.cmp(a));
    meas.dedup();
    let mut out = Vec::with_capacity(inputs.len() * meas.len());
    for i in &inputs {
        for m in &meas {
            out.push(ConfigPoint::new(i.clone(), m.clone())?);
        }
    }
    Ok(out)
}

/// One configuration's surrogate and (optionally) final performance.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub dataset: String,
    pub config: ConfigPoint,
    pub compression_rate: f64,
    pub init_mse: f64,
    pub accuracy: Option<f64>,
    pub ce: Option<f64>,
    pub seed: u64,
    pub runtime_s: Option<f64>,
}

/// Knobs shared by scans and full evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchOptions {
    #[serde(deserialize_with = "crate::optim::reconstruction_or_default")]
    pub init: OptimizerConfig,
    #[serde(deserialize_with = "crate::optim::joint_or_default")]
    pub joint: OptimizerConfig,
    pub head: HeadConfig,
    pub seeds: Vec<u64>,
    /// Split the surrogate MSE is measured on.
    pub mse_split: SplitPart,
    pub dataset_name: String,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            init: OptimizerConfig::reconstruction(),
            joint: OptimizerConfig::joint(),
            head: HeadConfig::default(),
            seeds: vec![0],
            mse_split: SplitPart::Test,
            dataset_name: "dataset".into(),
        }
    }
}

fn tagged(config: &ConfigPoint, e: Error) -> Error {
    Error::AtConfig {
        config: config.to_string(),
        source: Box::new(e),
    }
}

fn require_split(ds: &LabeledDataset) -> Result<&TensorShape> {
    if ds.split.is_empty() {
        return Err(Error::InvalidConfig("dataset has no train/val/test split".into()));
    }
    if ds.split.train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    ds.shape().ok_or_else(|| Error::Empty("dataset".into()))
}

/// Runs the reconstruction initialization for every grid point and seed and
/// records the resulting MSE on the chosen split. Records come back in grid
/// order, seeds innermost; the result is independent of the worker count.
pub fn surrogate_scan(
    ds: &LabeledDataset,
    grid: &ConfigGrid,
    opts: &SearchOptions,
) -> Result<Vec<EvalRecord>> {
    let max_shape = require_split(ds)?;
    grid.validate(max_shape)?;
    opts.init.validate()?;
    if opts.seeds.is_empty() {
        return Err(Error::Empty("seed list".into()));
    }
    let points = enumerate_grid(grid)?;
    let jobs: Vec<(ConfigPoint, u64)> = points
        .iter()
        .flat_map(|p| opts.seeds.iter().map(move |&s| (p.clone(), s)))
        .collect();
    let train = ds.view(SplitPart::Train);
    let eval = ds.view(opts.mse_split);
    jobs.par_iter()
        .map(|(config, seed)| {
            let start = Instant::now();
            let run = || -> Result<f64> {
                let opt = opts.init.clone().with_seed(*seed);
                let train_p = PairedSamples::new(&train, &config.input)?;
                let (cs, fs) = starting_operators(&train, config, *seed)?;
                let fit = fit_reconstruction(cs, fs, &train_p, &opt)?;
                let eval_p = PairedSamples::new(&eval, &config.input)?;
                reconstruction_mse(&fit.cs, &fit.fs, &eval_p)
            };
            let init_mse = run().map_err(|e| tagged(config, e))?;
            Ok(EvalRecord {
                dataset: opts.dataset_name.clone(),
                config: config.clone(),
                compression_rate: compression_rate(config),
                init_mse,
                accuracy: None,
                ce: None,
                seed: *seed,
                runtime_s: Some(start.elapsed().as_secs_f64()),
            })
        })
        .collect()
}

fn record_order(a: &EvalRecord, b: &EvalRecord) -> std::cmp::Ordering {
    a.init_mse
        .total_cmp(&b.init_mse)
        .then_with(|| a.config.table_order(&b.config))
        .then_with(|| a.seed.cmp(&b.seed))
}

/// Ascending `init_mse`; ties broken by `(I, M)` descending, then seed.
pub fn rank_by_mse(records: &[EvalRecord]) -> Vec<EvalRecord> {
    let mut out = records.to_vec();
    out.sort_by(record_order);
    out
}

/// Per-configuration means over seeds, in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigSummary {
    pub config: ConfigPoint,
    pub compression_rate: f64,
    pub init_mse: f64,
    pub ce: Option<f64>,
    pub runs: usize,
}

pub fn average_over_seeds(records: &[EvalRecord]) -> Vec<ConfigSummary> {
    let mut order: Vec<ConfigPoint> = Vec::new();
    let mut groups: HashMap<&ConfigPoint, Vec<&EvalRecord>> = HashMap::new();
    for r in records {
        let entry = groups.entry(&r.config).or_default();
        if entry.is_empty() {
            order.push(r.config.clone());
        }
        entry.push(r);
    }
    order
        .into_iter()
        .map(|config| {
            let rs = &groups[&config];
            let n = rs.len() as f64;
            let ces: Vec<f64> = rs.iter().filter_map(|r| r.ce).collect();
            ConfigSummary {
                compression_rate: compression_rate(&config),
                init_mse: rs.iter().map(|r| r.init_mse).sum::<f64>() / n,
                ce: (ces.len() == rs.len()).then(|| ces.iter().sum::<f64>() / n),
                runs: rs.len(),
                config,
            }
        })
        .collect()
}

/// Configurations ranked by seed-averaged `init_mse` (ties by `(I, M)`
/// descending).
pub fn rank_configs(records: &[EvalRecord]) -> Vec<ConfigSummary> {
    let mut s = average_over_seeds(records);
    s.sort_by(|a, b| {
        a.init_mse
            .total_cmp(&b.init_mse)
            .then_with(|| a.config.table_order(&b.config))
    });
    s
}

/// Trains and tests the full pipeline for the selected records: all of
/// them, or every seed of the `top_k` configurations by seed-averaged
/// surrogate MSE. The task head is pretrained once per seed and reused for
/// every configuration. Records are returned in input order.
pub fn full_evaluate(
    ds: &LabeledDataset,
    records: &[EvalRecord],
    opts: &SearchOptions,
    top_k: Option<usize>,
) -> Result<Vec<EvalRecord>> {
    if top_k == Some(0) || records.is_empty() {
        return Ok(records.to_vec());
    }
    let max_shape = require_split(ds)?.clone();
    opts.init.validate()?;
    opts.joint.validate()?;
    let selected: Vec<ConfigPoint> = match top_k {
        None => average_over_seeds(records).into_iter().map(|s| s.config).collect(),
        Some(k) => rank_configs(records).into_iter().take(k).map(|s| s.config).collect(),
    };
    let chosen: Vec<usize> = (0..records.len())
        .filter(|&i| selected.contains(&records[i].config))
        .collect();

    let train = ds.view(SplitPart::Train);
    let val = ds.view(SplitPart::Val);
    let test = ds.view(SplitPart::Test);
    let mut seeds: Vec<u64> = chosen.iter().map(|&i| records[i].seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let heads = seeds
        .iter()
        .map(|&s| Ok((s, init_task_head(&train, &opts.joint.clone().with_seed(s), opts.head)?)))
        .collect::<Result<HashMap<_, _>>>()?;

    let filled = chosen
        .par_iter()
        .map(|&i| {
            let rec = &records[i];
            let start = Instant::now();
            let config = &rec.config;
            let run = || -> Result<f64> {
                crate::tensor::check_truncation(&max_shape, &config.input)?;
                let train_p = PairedSamples::new(&train, &config.input)?;
                let (cs, fs) = starting_operators(&train, config, rec.seed)?;
                let init = fit_reconstruction(cs, fs, &train_p, &opts.init.clone().with_seed(rec.seed))?;
                let model = MclModel::new(init.cs, init.fs, heads[&rec.seed].clone(), config.clone())?;
                let val_p = PairedSamples::new(&val, &config.input)?;
                let trained = fit_joint(&model, &train_p, &val_p, &opts.joint.clone().with_seed(rec.seed))?;
                let test_p = PairedSamples::new(&test, &config.input)?;
                Ok(evaluate_paired(&trained.model, &test_p)?.accuracy)
            };
            let accuracy = run().map_err(|e| tagged(config, e))?;
            let mut out = rec.clone();
            out.accuracy = Some(accuracy);
            out.ce = Some(1.0 - accuracy);
            out.runtime_s = Some(rec.runtime_s.unwrap_or(0.0) + start.elapsed().as_secs_f64());
            Ok((i, out))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = records.to_vec();
    for (i, r) in filled {
        out[i] = r;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// statistics

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "pearson over {} and {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidConfig("pearson needs at least two points".into()));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties get their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson over average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub pearson_ce_mse: f64,
    pub pearson_ce_rate: f64,
    pub spearman_ce_mse: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub config: ConfigPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub correlation: CorrelationReport,
    /// `(init_mse, ce)` per point.
    pub ce_vs_mse: Vec<PlotPoint>,
    /// `(compression_rate, ce)` per point.
    pub ce_vs_rate: Vec<PlotPoint>,
}

/// Correlates classification error with the surrogate MSE and with the
/// compression rate. By default each configuration contributes its
/// seed-averaged `(ce, init_mse)`; `per_seed` uses every record instead.
/// Records without `ce` are ignored.
pub fn build_report(records: &[EvalRecord], per_seed: bool) -> Result<Report> {
    let points: Vec<(ConfigPoint, f64, f64, f64)> = if per_seed {
        records
            .iter()
            .filter_map(|r| r.ce.map(|ce| (r.config.clone(), r.init_mse, r.compression_rate, ce)))
            .collect()
    } else {
        let complete: Vec<EvalRecord> = records.iter().filter(|r| r.ce.is_some()).cloned().collect();
        average_over_seeds(&complete)
            .into_iter()
            .filter_map(|s| s.ce.map(|ce| (s.config, s.init_mse, s.compression_rate, ce)))
            .collect()
    };
    if points.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "a report needs at least 2 evaluated points, have {}",
            points.len()
        )));
    }
    let ce: Vec<f64> = points.iter().map(|p| p.3).collect();
    let mse: Vec<f64> = points.iter().map(|p| p.1).collect();
    let rate: Vec<f64> = points.iter().map(|p| p.2).collect();
    let correlation = CorrelationReport {
        pearson_ce_mse: pearson(&ce, &mse)?,
        pearson_ce_rate: pearson(&ce, &rate)?,
        spearman_ce_mse: spearman(&ce, &mse)?,
        n: points.len(),
    };
    let series = |x: &[f64]| {
        points
            .iter()
            .zip(x)
            .map(|(p, &x)| PlotPoint {
                x,
                y: p.3,
                config: p.0.clone(),
            })
            .collect()
    };
    Ok(Report {
        correlation,
        ce_vs_mse: series(&mse),
        ce_vs_rate: series(&rate),
    })
}

// ---------------------------------------------------------------------------
// CSV

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Results CSV with columns
/// `dataset,I1..IK,M1..MK,compression_rate,init_mse,accuracy,ce,seed,runtime_s`.
/// Runtimes are written only when `with_runtime` is set.
pub fn write_results_csv<W: Write>(out: W, records: &[EvalRecord], with_runtime: bool) -> Result<()> {
    let k = records.first().map_or(0, |r| r.config.input.order());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["dataset".to_string()];
    header.extend((1..=k).map(|i| format!("I{i}")));
    header.extend((1..=k).map(|i| format!("M{i}")));
    header.extend(
        ["compression_rate", "init_mse", "accuracy", "ce", "seed", "runtime_s"]
            .iter()
            .map(|s| s.to_string()),
    );
    let csv_err = |e: csv::Error| Error::format("<results csv>", e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        if r.config.input.order() != k {
            return Err(Error::DimensionMismatch("records of mixed tensor order".into()));
        }
        let mut row = vec![r.dataset.clone()];
        row.extend(r.config.input.dims().iter().map(|d| d.to_string()));
        row.extend(r.config.measurements.dims().iter().map(|d| d.to_string()));
        row.push(r.compression_rate.to_string());
        row.push(r.init_mse.to_string());
        row.push(opt_num(r.accuracy));
        row.push(opt_num(r.ce));
        row.push(r.seed.to_string());
        row.push(if with_runtime { opt_num(r.runtime_s) } else { String::new() });
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<results csv>", e))?;
    Ok(())
}

pub fn read_results_csv<R: Read>(input: R, origin: &Path) -> Result<Vec<EvalRecord>> {
    let ferr = |msg: String| Error::format(origin, msg);
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| ferr(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let k = header.iter().filter(|h| h.starts_with('I')).count();
    let mut expected = vec!["dataset".to_string()];
    expected.extend((1..=k).map(|i| format!("I{i}")));
    expected.extend((1..=k).map(|i| format!("M{i}")));
    expected.extend(
        ["compression_rate", "init_mse", "accuracy", "ce", "seed", "runtime_s"]
            .iter()
            .map(|s| s.to_string()),
    );
    if k == 0 || header != expected {
        return Err(ferr(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| ferr(e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| ferr(format!("row {}: column {} is not a number", line + 2, header[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if field(i).is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let dims = |from: usize| -> Result<Vec<usize>> {
            (from..from + k)
                .map(|i| {
                    field(i)
                        .parse::<usize>()
                        .map_err(|_| ferr(format!("row {}: bad extent in {}", line + 2, header[i])))
                })
                .collect()
        };
        let config = ConfigPoint::from_dims(&dims(1)?, &dims(1 + k)?)?;
        let base = 1 + 2 * k;
        let seed = field(base + 4)
            .parse::<u64>()
            .map_err(|_| ferr(format!("row {}: bad seed", line + 2)))?;
        out.push(EvalRecord {
            dataset: field(0).to_string(),
            config,
            compression_rate: num(base)?,
            init_mse: num(base + 1)?,
            accuracy: opt(base + 2)?,
            ce: opt(base + 3)?,
            seed,
            runtime_s: opt(base + 5)?,
        });
    }
    Ok(out)
}

pub fn read_results_file(path: &Path) -> Result<Vec<EvalRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_results_csv(f, path)
}

/// Report series CSV with header `x,y,I,M`.
pub fn write_series_csv<W: Write>(out: W, points: &[PlotPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::format("<series csv>", e.to_string());
    w.write_record(["x", "y", "I", "M"]).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.x.to_string(),
            p.y.to_string(),
            p.config.input.to_string(),
            p.config.measurements.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<series csv>", e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// bundled reference tables

pub const PUBFIG83_CSV: &str = include_str!("../fixtures/pubfig83.csv");
pub const CALTECH101_CSV: &str = include_str!("../fixtures/caltech101.csv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fixture {
    Pubfig83,
    Caltech101,
}

impl Fixture {
    pub fn name(self) -> &'static str {
        match self {
            Fixture::Pubfig83 => "pubfig83",
            Fixture::Caltech101 => "caltech101",
        }
    }

    pub fn csv(self) -> &'static str {
        match self {
            Fixture::Pubfig83 => PUBFIG83_CSV,
            Fixture::Caltech101 => CALTECH101_CSV,
        }
    }

    pub fn records(self) -> Vec<EvalRecord> {
        read_results_csv(self.csv().as_bytes(), Path::new(self.name()))
            .expect("bundled fixtures parse")
    }
}

impl std::str::FromStr for Fixture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pubfig83" => Ok(Fixture::Pubfig83),
            "caltech101" => Ok(Fixture::Caltech101),
            other => Err(Error::InvalidConfig(format!(
                "unknown fixture `{other}` (expected pubfig83 or caltech101)"
            ))),
        }
    }
}
