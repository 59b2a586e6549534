//! Datasets: the `MCLT` tensor container, manifest loading, stratified
//! 60/20/20 splitting and synthetic low-multilinear-rank data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{multilinear_map, DenseTensor, FactorMatrix, TensorShape};

pub const TENSOR_MAGIC: &[u8; 4] = b"MCLT";
pub const TENSOR_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.csv";
pub const SPLIT_NAME: &str = "split.json";

/// Disjoint train/validation/test index lists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty() && self.test.is_empty()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Checks disjointness and that the parts cover `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::InvalidConfig(format!("split index {i} >= {n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidConfig(format!("split index {i} appears twice")));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidConfig(format!("sample {i} is in no split")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

/// Samples at the maximum resolution with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<DenseTensor>,
    labels: Vec<usize>,
    class_count: usize,
    pub split: SplitIndices,
}

/// Borrowed subset of a dataset.
#[derive(Clone, Debug)]
pub struct DatasetView<'a> {
    pub samples: Vec<&'a DenseTensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> Option<&'a TensorShape> {
        self.samples.first().map(|s| s.shape())
    }
}

impl LabeledDataset {
    pub fn new(samples: Vec<DenseTensor>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(first) = samples.first() {
            if let Some(bad) = samples.iter().position(|s| s.shape() != first.shape()) {
                return Err(Error::DimensionMismatch(format!(
                    "sample {bad} has shape {}, expected {}",
                    samples[bad].shape(),
                    first.shape()
                )));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidConfig(format!(
                "label {l} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            samples,
            labels,
            class_count,
            split: SplitIndices::default(),
        })
    }

    pub fn with_split(mut self, split: SplitIndices) -> Result<Self> {
        split.validate(self.len())?;
        self.split = split;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[DenseTensor] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Shape shared by all samples (`I^max`).
    pub fn shape(&self) -> Option<&TensorShape> {
        self.samples.first().map(|s| s.shape())
    }

    pub fn indices(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.split.train,
            SplitPart::Val => &self.split.val,
            SplitPart::Test => &self.split.test,
        }
    }

    pub fn view(&self, part: SplitPart) -> DatasetView<'_> {
        self.view_indices(self.indices(part))
    }

    pub fn view_all(&self) -> DatasetView<'_> {
        DatasetView {
            samples: self.samples.iter().collect(),
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }

    pub fn view_indices(&self, idx: &[usize]) -> DatasetView<'_> {
        DatasetView {
            samples: idx.iter().map(|&i| &self.samples[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Assigns a seeded 60/20/20 stratified split if none is set.
    pub fn ensure_split(&mut self, seed: u64) -> Result<()> {
        if self.split.is_empty() {
            self.split = stratified_split(self, (0.6, 0.2, 0.2), seed)?;
        }
        Ok(())
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Per class: `floor(f_val·n)` validation and `floor(f_test·n)` test
/// samples, the remainder to train. Index lists come back sorted.
pub fn stratified_split(
    ds: &LabeledDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices> {
    let (f_train, f_val, f_test) = fractions;
    if [f_train, f_val, f_test].iter().any(|f| !(0.0..=1.0).contains(f))
        || f_train + f_val + f_test > 1.0 + 1e-9
    {
        return Err(Error::InvalidConfig(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to at most 1"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = SplitIndices::default();
    for (class, mut members) in by_class.into_iter().enumerate() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            return Err(Error::ClassTooSmall { class, count: n });
        }
        members.shuffle(&mut rng);
        let n_test = (f_test * n as f64 + 1e-9).floor() as usize;
        let n_val = (f_val * n as f64 + 1e-9).floor() as usize;
        split.test.extend_from_slice(&members[..n_test]);
        split.val.extend_from_slice(&members[n_test..n_test + n_val]);
        split.train.extend_from_slice(&members[n_test + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

// ---------------------------------------------------------------------------
// container format

pub fn encode_tensor(t: &DenseTensor) -> Vec<u8> {
    let dims = t.dims();
    let mut buf = Vec::with_capacity(12 + 4 * dims.len() + 8 * t.data().len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub(crate) struct ByteReader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("payload size overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_tensor(buf: &[u8]) -> std::result::Result<DenseTensor, String> {
    let mut r = ByteReader { buf, pos: 0 };
    if r.take(4)? != TENSOR_MAGIC {
        return Err("bad magic, expected MCLT".into());
    }
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(format!("unsupported container version {version}"));
    }
    let k = r.u32()? as usize;
    let dims = (0..k)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let shape = TensorShape::new(dims).map_err(|e| e.to_string())?;
    let data = r.f64s(shape.numel())?;
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    DenseTensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &DenseTensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<DenseTensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&buf).map_err(|m| Error::format(path, m))
}

/// Maps stored values into [0, 1]: values already there are kept, values in
/// [0, 255] are divided by 255, anything else is rejected.
fn normalize_unit(t: DenseTensor, path: &Path) -> Result<DenseTensor> {
    let (lo, hi) = (t.min(), t.max());
    if lo >= 0.0 && hi <= 1.0 {
        return Ok(t);
    }
    if lo >= 0.0 && hi <= 255.0 {
        let shape = t.shape().clone();
        let data = t.into_data().into_iter().map(|v| v / 255.0).collect();
        return DenseTensor::new(shape, data);
    }
    Err(Error::format(
        path,
        format!("values span [{lo}, {hi}], expected [0, 1] or [0, 255]"),
    ))
}

#[derive(Deserialize)]
struct ManifestRow {
    file: String,
    label: String,
}

fn manifest_path(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(MANIFEST_NAME), path.to_path_buf())
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path.to_path_buf(), dir)
    }
}

/// Loads a dataset from a directory holding `manifest.csv` (or from the
/// manifest path itself). Sample files are resolved relative to the
/// manifest; labels must be non-negative integers. A `split.json` next to
/// the manifest is picked up when present.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let (manifest, dir) = manifest_path(path);
    let mut reader = csv::Reader::from_path(&manifest)
        .map_err(|e| Error::format(&manifest, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(&manifest, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["file", "label"] {
        return Err(Error::format(&manifest, "header must be `file,label`"));
    }
    let mut entries = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| Error::format(&manifest, e.to_string()))?;
        let label: usize = row.label.trim().parse().map_err(|_| {
            Error::format(&manifest, format!("unknown label `{}` for {}", row.label, row.file))
        })?;
        entries.push((dir.join(row.file.trim()), label));
    }
    if entries.is_empty() {
        return Err(Error::Empty(format!("manifest {}", manifest.display())));
    }
    let samples = entries
        .par_iter()
        .map(|(file, _)| read_tensor(file).and_then(|t| normalize_unit(t, file)))
        .collect::<Result<Vec<_>>>()?;
    let expected = samples[0].shape();
    for ((file, _), s) in entries.iter().zip(&samples) {
        if s.shape() != expected {
            return Err(Error::format(
                file,
                format!("shape {} does not match {expected}", s.shape()),
            ));
        }
    }
    let labels: Vec<usize> = entries.iter().map(|(_, l)| *l).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let mut ds = LabeledDataset::new(samples, labels, class_count)?;
    let split_path = dir.join(SPLIT_NAME);
    if split_path.exists() {
        let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
        let split: SplitIndices = serde_json::from_str(&text)
            .map_err(|e| Error::format(&split_path, e.to_string()))?;
        ds = ds.with_split(split)?;
    }
    Ok(ds)
}

/// Writes `sample_NNNNN.mclt` files, `manifest.csv` and, when a split is
/// set, `split.json` into `dir`.
pub fn save_dataset(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut out = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut text = String::from("file,label\n");
    for (i, (s, l)) in ds.samples.iter().zip(&ds.labels).enumerate() {
        let name = format!("sample_{i:05}.mclt");
        write_tensor(&dir.join(&name), s)?;
        text.push_str(&format!("{name},{l}\n"));
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(&manifest, e))?;
    if !ds.split.is_empty() {
        let path = dir.join(SPLIT_NAME);
        let json = serde_json::to_string(&ds.split).expect("split serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synthetic data

/// Class-conditional low-multilinear-rank tensors plus Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub shape: TensorShape,
    pub rank: TensorShape,
    /// Noise std relative to the RMS of the clean signal.
    pub noise_std: f64,
    /// How far each class's factor subspaces tilt away from the shared ones.
    #[serde(default = "default_class_spread")]
    pub class_spread: f64,
    /// Std of the per-sample core around its class mean.
    #[serde(default = "default_within_class")]
    pub within_class_std: f64,
    pub seed: u64,
}

fn default_class_spread() -> f64 {
    0.5
}

fn default_within_class() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(
        class_count: usize,
        samples_per_class: usize,
        shape: TensorShape,
        rank: TensorShape,
        noise_std: f64,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            class_count,
            samples_per_class,
            shape,
            rank,
            noise_std,
            class_spread: default_class_spread(),
            within_class_std: default_within_class(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::tensor::check_truncation(&self.shape, &self.rank)?;
        if self.class_count == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig(
                "class_count and samples_per_class must be positive".into(),
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.class_spread >= 0.0) || !(self.within_class_std >= 0.0) {
            return Err(Error::InvalidConfig(
                "noise_std, class_spread and within_class_std must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `n × r` matrix with orthonormal columns (modified Gram-Schmidt). The
/// constant vector is always the first column so a global offset stays
/// inside the spanned subspace; `candidate(j)` proposes column `j >= 1`.
fn constant_led_basis(
    n: usize,
    r: usize,
    mut candidate: impl FnMut(usize) -> Vec<f64>,
) -> FactorMatrix {
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64).sqrt(); n]];
    let mut attempts = 0;
    while cols.len() < r {
        let mut v = candidate(cols.len());
        for q in &cols {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
        attempts += 1;
        assert!(attempts < 100 * r, "could not complete an orthonormal basis");
    }
    let mut m = FactorMatrix::zeros(n, r);
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            m.data_mut()[i * r + j] = x;
        }
    }
    m
}

fn gaussian_vec(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    FactorMatrix::gaussian(n, 1, std, rng).into_data()
}

/// Generates a labeled dataset: each class has its own factor matrices
/// (a random tilt of shared ones) and a mean core; samples are
/// `core ×_k U_k^{(c)}` plus noise, globally rescaled to [0, 1]. Without
/// noise every sample has multilinear rank at most `spec.rank`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.shape.dims();
    let ranks = spec.rank.dims();
    let shared: Vec<FactorMatrix> = dims
        .iter()
        .zip(ranks)
        .map(|(&n, &r)| constant_led_basis(n, r, |_| gaussian_vec(n, 1.0, &mut rng)))
        .collect();
    let class_factors: Vec<Vec<FactorMatrix>> = (0..spec.class_count)
        .map(|_| {
            dims.iter()
                .zip(ranks)
                .zip(&shared)
                .map(|((&n, &r), base)| {
                    constant_led_basis(n, r, |j| {
                        let g = gaussian_vec(n, spec.class_spread / (n as f64).sqrt(), &mut rng);
                        (0..n).map(|i| base.get(i, j) + g[i]).collect()
                    })
                })
                .collect()
        })
        .collect();
    let means: Vec<DenseTensor> = (0..spec.class_count)
        .map(|_| DenseTensor::gaussian(spec.rank.clone(), 1.0, &mut rng))
        .collect();

    let mut samples = Vec::with_capacity(spec.class_count * spec.samples_per_class);
    let mut labels = Vec::with_capacity(samples.capacity());
    for _ in 0..spec.samples_per_class {
        for c in 0..spec.class_count {
            let mut core = DenseTensor::gaussian(spec.rank.clone(), spec.within_class_std, &mut rng);
            core.data_mut()
                .iter_mut()
                .zip(means[c].data())
                .for_each(|(x, m)| *x += m);
            samples.push(multilinear_map(&core, &class_factors[c])?);
            labels.push(c);
        }
    }

    let numel = spec.shape.numel() as f64;
    let rms = (samples.iter().map(|s| s.frobenius_norm().powi(2)).sum::<f64>()
        / (numel * samples.len() as f64))
        .sqrt()
        .max(f64::MIN_POSITIVE);
    for s in &mut samples {
        for x in s.data_mut() {
            *x /= rms;
        }
    }
    if spec.noise_std > 0.0 {
        for s in &mut samples {
            let noise = DenseTensor::gaussian(spec.shape.clone(), spec.noise_std, &mut rng);
            s.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(x, n)| *x += n);
        }
    }
    let lo = samples.iter().map(|s| s.min()).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.max()).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for s in &mut samples {
        for x in s.data_mut() {
            *x = ((*x - lo) / span).clamp(0.0, 1.0);
        }
    }

    let mut ds = LabeledDataset::new(samples, labels, spec.class_count)?;
    if spec.samples_per_class >= 3 {
        ds.ensure_split(spec.seed)?;
    }
    Ok(ds)
}
