//! The compressive learning model: multilinear sensing (CS), multilinear
//! feature synthesis (FS) and a task head, with the HOSVD and
//! reconstruction initializations, task-head pretraining, joint training
//! and evaluation.
//!
//! Every sample-parallel loop reduces per-sample results in index order, so
//! results depend only on seeds, never on the worker count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ByteReader, DatasetView};
use crate::error::{Error, Result};
use crate::head::{argmax, cross_entropy, hwc, HeadCache, HeadConfig, TaskHead, HEAD_BLOCKS};
use crate::optim::{lr_at, AdamState, OptimizerConfig};
use crate::search::ConfigPoint;
use crate::tensor::{
    downsample, leading_eigenrows, multilinear_map, DenseTensor, FactorMatrix, TensorShape,
};

/// Per-mode sensing matrices `Φ_k` (`M_k × I_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct SensingOperator {
    factors: Vec<FactorMatrix>,
}

/// Per-mode synthesis matrices `Θ_k` (`I_k^max × M_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOperator {
    factors: Vec<FactorMatrix>,
}

macro_rules! operator_common {
    ($ty:ident) => {
        impl $ty {
            pub fn new(factors: Vec<FactorMatrix>) -> Result<Self> {
                if factors.is_empty() {
                    return Err(Error::Empty(concat!(stringify!($ty), " factor list").into()));
                }
                Ok($ty { factors })
            }

            pub fn factors(&self) -> &[FactorMatrix] {
                &self.factors
            }

            pub fn factors_mut(&mut self) -> &mut [FactorMatrix] {
                &mut self.factors
            }

            pub fn input_shape(&self) -> TensorShape {
                TensorShape::new(self.factors.iter().map(|f| f.cols()).collect::<Vec<_>>())
                    .expect("factor matrices have positive extents")
            }

            pub fn output_shape(&self) -> TensorShape {
                TensorShape::new(self.factors.iter().map(|f| f.rows()).collect::<Vec<_>>())
                    .expect("factor matrices have positive extents")
            }

            pub fn apply(&self, t: &DenseTensor) -> Result<DenseTensor> {
                if t.shape() != &self.input_shape() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} expects {}, got {}",
                        stringify!($ty),
                        self.input_shape(),
                        t.shape()
                    )));
                }
                multilinear_map(t, &self.factors)
            }
        }
    };
}

operator_common!(SensingOperator);
operator_common!(SynthesisOperator);

impl SensingOperator {
    /// Entries from N(0, 1/I_k) per mode.
    pub fn gaussian(config: &ConfigPoint, rng: &mut ChaCha8Rng) -> Self {
        let factors = config
            .measurements
            .dims()
            .iter()
            .zip(config.input.dims())
            .map(|(&m, &i)| FactorMatrix::gaussian(m, i, 1.0 / (i as f64).sqrt(), rng))
            .collect();
        SensingOperator { factors }
    }
}

impl SynthesisOperator {
    /// Entries from N(0, 1/M_k) per mode.
    pub fn gaussian(config: &ConfigPoint, max_shape: &TensorShape, rng: &mut ChaCha8Rng) -> Self {
        let factors = max_shape
            .dims()
            .iter()
            .zip(config.measurements.dims())
            .map(|(&n, &m)| FactorMatrix::gaussian(n, m, 1.0 / (m as f64).sqrt(), rng))
            .collect();
        SynthesisOperator { factors }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MclModel {
    pub cs: SensingOperator,
    pub fs: SynthesisOperator,
    pub head: TaskHead,
    config: ConfigPoint,
}

impl MclModel {
    pub fn new(
        cs: SensingOperator,
        fs: SynthesisOperator,
        head: TaskHead,
        config: ConfigPoint,
    ) -> Result<Self> {
        if cs.input_shape() != config.input || cs.output_shape() != config.measurements {
            return Err(Error::DimensionMismatch(format!(
                "sensing operator maps {} -> {}, config is {config}",
                cs.input_shape(),
                cs.output_shape()
            )));
        }
        if fs.input_shape() != config.measurements {
            return Err(Error::DimensionMismatch(format!(
                "synthesis operator takes {}, measurements are {}",
                fs.input_shape(),
                config.measurements
            )));
        }
        let (_, _, c) = hwc(fs.output_shape().dims())?;
        if c != head.in_channels() {
            return Err(Error::DimensionMismatch(format!(
                "synthesized features have {c} channels, head expects {}",
                head.in_channels()
            )));
        }
        Ok(MclModel {
            cs,
            fs,
            head,
            config,
        })
    }

    pub fn config(&self) -> &ConfigPoint {
        &self.config
    }

    /// Output dims of feature synthesis (`I^max`).
    pub fn max_shape(&self) -> TensorShape {
        self.fs.output_shape()
    }

    pub fn sense(&self, y: &DenseTensor) -> Result<DenseTensor> {
        self.cs.apply(y)
    }

    pub fn synthesize(&self, z: &DenseTensor) -> Result<DenseTensor> {
        self.fs.apply(z)
    }

    /// Class scores (logits) of `head(synthesize(sense(y)))`.
    pub fn forward(&self, y: &DenseTensor) -> Result<Vec<f64>> {
        let t = self.synthesize(&self.sense(y)?)?;
        self.head.scores(&t)
    }

    pub fn predict(&self, y: &DenseTensor) -> Result<usize> {
        Ok(argmax(&self.forward(y)?))
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.extend(self.cs.factors.iter().map(|f| f.data()));
        out.extend(self.fs.factors.iter().map(|f| f.data()));
        out.extend(self.head.params.iter().map(|p| p.as_slice()));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.cs.factors.iter_mut().map(|f| f.data_mut()));
        out.extend(self.fs.factors.iter_mut().map(|f| f.data_mut()));
        out.extend(self.head.params.iter_mut().map(|p| p.as_mut_slice()));
        out
    }

    /// All parameters concatenated: `Φ_1..Φ_K, Θ_1..Θ_K`, head blocks.
    pub fn flat_params(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.blocks().iter().map(|b| b.len()).sum();
        if flat.len() != total {
            return Err(Error::DimensionMismatch(format!(
                "model has {total} parameters, got {}",
                flat.len()
            )));
        }
        let mut off = 0;
        for b in self.blocks_mut() {
            b.copy_from_slice(&flat[off..off + b.len()]);
            off += b.len();
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// paired samples

/// Inputs down-sampled to the sensor resolution, paired with their
/// full-resolution targets and labels.
#[derive(Clone, Debug)]
pub struct PairedSamples<'a> {
    pub inputs: Vec<DenseTensor>,
    pub targets: Vec<&'a DenseTensor>,
    pub labels: Vec<usize>,
}

impl<'a> PairedSamples<'a> {
    pub fn new(view: &DatasetView<'a>, input_shape: &TensorShape) -> Result<Self> {
        let inputs = view
            .samples
            .par_iter()
            .map(|s| {
                if s.shape() == input_shape {
                    Ok((*s).clone())
                } else {
                    downsample(s, input_shape)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairedSamples {
            inputs,
            targets: view.samples.clone(),
            labels: view.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

// ---------------------------------------------------------------------------
// gradients

/// Forward through `x ×_1 A_1 … ×_K A_K`, keeping every intermediate.
fn chain_forward(x: &DenseTensor, factors: &[FactorMatrix]) -> Vec<DenseTensor> {
    let mut stages = Vec::with_capacity(factors.len() + 1);
    stages.push(x.clone());
    for (axis, f) in factors.iter().enumerate() {
        let next = stages[axis].mode_product_axis(f, axis);
        stages.push(next);
    }
    stages
}

/// `g += unfold_axis(dout) · unfold_axis(t)ᵀ`.
fn accumulate_mode_grad(dout: &DenseTensor, t: &DenseTensor, axis: usize, g: &mut FactorMatrix) {
    let (outer, m, inner) = dout.shape().split_at_axis(axis);
    let n = t.dims()[axis];
    let cols = g.cols();
    let (dd, td) = (dout.data(), t.data());
    let gd = g.data_mut();
    for o in 0..outer {
        for r in 0..m {
            let drow = &dd[(o * m + r) * inner..(o * m + r + 1) * inner];
            for j in 0..n {
                let trow = &td[(o * n + j) * inner..(o * n + j + 1) * inner];
                gd[r * cols + j] += drow.iter().zip(trow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// Backward through a chain built by [`chain_forward`]. Accumulates factor
/// gradients and returns the gradient of the chain input when requested.
fn chain_backward(
    stages: &[DenseTensor],
    factors: &[FactorMatrix],
    dout: DenseTensor,
    grads: &mut [FactorMatrix],
    want_input_grad: bool,
) -> Option<DenseTensor> {
    let mut d = dout;
    for axis in (0..factors.len()).rev() {
        accumulate_mode_grad(&d, &stages[axis], axis, &mut grads[axis]);
        if axis > 0 || want_input_grad {
            d = d.mode_product_axis(&factors[axis].transpose(), axis);
        }
    }
    want_input_grad.then_some(d)
}

fn zero_like(factors: &[FactorMatrix]) -> Vec<FactorMatrix> {
    factors
        .iter()
        .map(|f| FactorMatrix::zeros(f.rows(), f.cols()))
        .collect()
}

/// Reconstruction loss `‖FS(CS(x)) − target‖²/numel` of one sample with its
/// factor gradients (`Φ` grads, then `Θ` grads).
fn reconstruction_sample(
    cs: &SensingOperator,
    fs: &SynthesisOperator,
    x: &DenseTensor,
    target: &DenseTensor,
) -> (f64, Vec<FactorMatrix>, Vec<FactorMatrix>) {
    let k = cs.factors.len();
    let cs_stages = chain_forward(x, &cs.factors);
    let fs_stages = chain_forward(&cs_stages[k], &fs.factors);
    let out = &fs_stages[k];
    let numel = out.data().len() as f64;
    let mut loss = 0.0;
    let diff: Vec<f64> = out
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let e = a - b;
            loss += e * e;
            2.0 * e / numel
        })
        .collect();
    let dout = DenseTensor::from_parts(out.shape().clone(), diff);
    let mut g_fs = zero_like(&fs.factors);
    let dz = chain_backward(&fs_stages, &fs.factors, dout, &mut g_fs, true)
        .expect("input gradient requested");
    let mut g_cs = zero_like(&cs.factors);
    chain_backward(&cs_stages, &cs.factors, dz, &mut g_cs, false);
    (loss / numel, g_cs, g_fs)
}

fn add_into(acc: &mut [FactorMatrix], g: &[FactorMatrix]) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    }
}

fn scale_all(acc: &mut [FactorMatrix], s: f64) {
    for a in acc {
        a.data_mut().iter_mut().for_each(|x| *x *= s);
    }
}

/// Gradients of a batch objective with respect to every model part.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub cs: Vec<FactorMatrix>,
    pub fs: Vec<FactorMatrix>,
    pub head: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for f in self.cs.iter().chain(&self.fs) {
            out.extend_from_slice(f.data());
        }
        for b in &self.head {
            out.extend_from_slice(b);
        }
        out
    }
}

/// Mean per-element squared reconstruction error over `idx` and its
/// gradients with respect to `Φ` and `Θ`.
pub fn reconstruction_objective(
    cs: &SensingOperator,
    fs: &SynthesisOperator,
    inputs: &[DenseTensor],
    targets: &[&DenseTensor],
    idx: &[usize],
) -> (f64, Vec<FactorMatrix>, Vec<FactorMatrix>) {
    let parts: Vec<_> = idx
        .par_iter()
        .map(|&i| reconstruction_sample(cs, fs, &inputs[i], targets[i]))
        .collect();
    let mut g_cs = zero_like(&cs.factors);
    let mut g_fs = zero_like(&fs.factors);
    let mut loss = 0.0;
    for (l, gc, gf) in &parts {
        loss += l;
        add_into(&mut g_cs, gc);
        add_into(&mut g_fs, gf);
    }
    let inv = 1.0 / idx.len().max(1) as f64;
    scale_all(&mut g_cs, inv);
    scale_all(&mut g_fs, inv);
    (loss * inv, g_cs, g_fs)
}

struct SampleGrad {
    loss: f64,
    cs: Vec<FactorMatrix>,
    fs: Vec<FactorMatrix>,
    head: Vec<Vec<f64>>,
}

fn classification_sample(model: &MclModel, x: &DenseTensor, label: usize) -> Result<SampleGrad> {
    let k = model.cs.factors.len();
    let cs_stages = chain_forward(x, &model.cs.factors);
    let fs_stages = chain_forward(&cs_stages[k], &model.fs.factors);
    let feat = &fs_stages[k];
    let cache = model.head.forward(feat)?;
    let (loss, dlogits) = cross_entropy(&cache.logits, label);
    let mut head = model.head.zero_grads();
    let dfeat = model.head.backward(&cache, &dlogits, &mut head);
    let dfeat = DenseTensor::from_parts(feat.shape().clone(), dfeat);
    let mut g_fs = zero_like(&model.fs.factors);
    let dz = chain_backward(&fs_stages, &model.fs.factors, dfeat, &mut g_fs, true)
        .expect("input gradient requested");
    let mut g_cs = zero_like(&model.cs.factors);
    chain_backward(&cs_stages, &model.cs.factors, dz, &mut g_cs, false);
    Ok(SampleGrad {
        loss,
        cs: g_cs,
        fs: g_fs,
        head,
    })
}

/// Mean softmax cross-entropy of the full pipeline over `idx` and its
/// gradients with respect to `Φ`, `Θ` and the head parameters.
pub fn classification_objective(
    model: &MclModel,
    inputs: &[DenseTensor],
    labels: &[usize],
    idx: &[usize],
) -> Result<(f64, ModelGrads)> {
    let parts = idx
        .par_iter()
        .map(|&i| classification_sample(model, &inputs[i], labels[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = ModelGrads {
        cs: zero_like(&model.cs.factors),
        fs: zero_like(&model.fs.factors),
        head: model.head.zero_grads(),
    };
    let mut loss = 0.0;
    for p in &parts {
        loss += p.loss;
        add_into(&mut grads.cs, &p.cs);
        add_into(&mut grads.fs, &p.fs);
        for (a, b) in grads.head.iter_mut().zip(&p.head) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    let inv = 1.0 / idx.len().max(1) as f64;
    scale_all(&mut grads.cs, inv);
    scale_all(&mut grads.fs, inv);
    grads
        .head
        .iter_mut()
        .for_each(|b| b.iter_mut().for_each(|x| *x *= inv));
    Ok((loss * inv, grads))
}

// ---------------------------------------------------------------------------
// training

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Independent RNG streams derived from one seed.
fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

fn divergence(epoch: usize, what: &str, err: Error) -> Error {
    match err {
        Error::NonFinite(detail) => Error::Divergence {
            epoch,
            detail: format!("{what}: non-finite {detail}"),
        },
        other => other,
    }
}

fn check_config_against(config: &ConfigPoint, max_shape: &TensorShape) -> Result<()> {
    if config.input.order() != max_shape.order() || config.measurements.order() != max_shape.order() {
        return Err(Error::DimensionMismatch(format!(
            "config {config} does not match data order {}",
            max_shape.order()
        )));
    }
    crate::tensor::check_truncation(max_shape, &config.input)
}

/// Dataset-level HOSVD: factor k holds the top-`M_k` eigenvectors (as rows)
/// of the mode-k scatter `Σ_i unfold_k(Y_i) unfold_k(Y_i)ᵀ`. Returns
/// `Φ_k = U_k` (row form) and `Θ_k = U_kᵀ`.
pub fn init_hosvd(
    train: &DatasetView<'_>,
    config: &ConfigPoint,
) -> Result<(SensingOperator, SynthesisOperator)> {
    let max_shape = train
        .shape()
        .ok_or_else(|| Error::Empty("training set".into()))?;
    if &config.input != max_shape {
        return Err(Error::InvalidConfig(format!(
            "HOSVD initialization needs I = I^max = {max_shape}, config has I = {}",
            config.input
        )));
    }
    crate::tensor::check_truncation(max_shape, &config.measurements)?;
    let factors: Vec<FactorMatrix> = (0..max_shape.order())
        .map(|axis| {
            let grams: Vec<FactorMatrix> = train
                .samples
                .par_iter()
                .map(|s| s.unfold_axis(axis).gram())
                .collect();
            let mut scatter = grams[0].clone();
            for g in &grams[1..] {
                add_into(std::slice::from_mut(&mut scatter), std::slice::from_ref(g));
            }
            leading_eigenrows(&scatter, config.measurements.dims()[axis])
        })
        .collect();
    let theta = factors.iter().map(|f| f.transpose()).collect();
    Ok((SensingOperator { factors }, SynthesisOperator { factors: theta }))
}

/// Starting operators for the reconstruction initialization: dataset HOSVD
/// when sensing at full resolution, scaled Gaussian otherwise.
pub fn starting_operators(
    train: &DatasetView<'_>,
    config: &ConfigPoint,
    seed: u64,
) -> Result<(SensingOperator, SynthesisOperator)> {
    let max_shape = train
        .shape()
        .ok_or_else(|| Error::Empty("training set".into()))?;
    let hosvd_ok = &config.input == max_shape
        && config
            .measurements
            .dims()
            .iter()
            .zip(max_shape.dims())
            .all(|(m, i)| m <= i);
    if hosvd_ok {
        init_hosvd(train, config)
    } else {
        let mut rng = rng_stream(seed, STREAM_INIT);
        let cs = SensingOperator::gaussian(config, &mut rng);
        let fs = SynthesisOperator::gaussian(config, max_shape, &mut rng);
        Ok((cs, fs))
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionInit {
    pub cs: SensingOperator,
    pub fs: SynthesisOperator,
    /// Mean training loss of each epoch.
    pub history: Vec<f64>,
}

/// Optimizes `Φ`, `Θ` for the mean per-element squared error between
/// `FS(CS(Y@I))` and `Y@I^max` over the training view, with Adam.
pub fn init_reconstruction(
    train: &DatasetView<'_>,
    config: &ConfigPoint,
    opt: &OptimizerConfig,
) -> Result<ReconstructionInit> {
    opt.validate()?;
    let max_shape = train
        .shape()
        .ok_or_else(|| Error::Empty("training set".into()))?;
    check_config_against(config, max_shape)?;
    let paired = PairedSamples::new(train, &config.input)?;
    let (cs, fs) = starting_operators(train, config, opt.seed)?;
    fit_reconstruction(cs, fs, &paired, opt)
}

/// Adam loop behind [`init_reconstruction`], starting from given operators.
pub fn fit_reconstruction(
    mut cs: SensingOperator,
    mut fs: SynthesisOperator,
    paired: &PairedSamples<'_>,
    opt: &OptimizerConfig,
) -> Result<ReconstructionInit> {
    opt.validate()?;
    if paired.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let k = cs.factors.len();
    let sizes: Vec<usize> = cs
        .factors
        .iter()
        .chain(&fs.factors)
        .map(|f| f.data().len())
        .collect();
    let mut adam = AdamState::new(&sizes);
    let mut rng = rng_stream(opt.seed, STREAM_SHUFFLE);
    let mut history = Vec::with_capacity(opt.epochs);
    for epoch in 1..=opt.epochs {
        let lr = lr_at(opt, epoch)?;
        let mut total = 0.0;
        for batch in shuffled_batches(paired.len(), opt.batch_size, &mut rng) {
            let (loss, g_cs, g_fs) =
                reconstruction_objective(&cs, &fs, &paired.inputs, &paired.targets, &batch);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("reconstruction loss is {loss}"),
                });
            }
            total += loss * batch.len() as f64;
            let grads: Vec<&[f64]> = g_cs.iter().chain(&g_fs).map(|g| g.data()).collect();
            let mut params: Vec<&mut [f64]> = cs
                .factors
                .iter_mut()
                .chain(fs.factors.iter_mut())
                .map(|f| f.data_mut())
                .collect();
            adam.step(&mut params, &grads, lr, opt)
                .map_err(|e| divergence(epoch, "reconstruction", e))?;
        }
        history.push(total / paired.len() as f64);
    }
    debug_assert_eq!(cs.factors.len(), k);
    Ok(ReconstructionInit { cs, fs, history })
}

/// Mean per-element reconstruction error of `FS(CS(Y@I))` against `Y@I^max`.
pub fn reconstruction_mse(
    cs: &SensingOperator,
    fs: &SynthesisOperator,
    paired: &PairedSamples<'_>,
) -> Result<f64> {
    if paired.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let errs = paired
        .inputs
        .par_iter()
        .zip(paired.targets.par_iter())
        .map(|(x, t)| fs.apply(&cs.apply(x)?)?.mse(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Trains the task head alone on full-resolution inputs with softmax
/// cross-entropy.
pub fn init_task_head(
    train: &DatasetView<'_>,
    opt: &OptimizerConfig,
    head_cfg: HeadConfig,
) -> Result<TaskHead> {
    opt.validate()?;
    let shape = train
        .shape()
        .ok_or_else(|| Error::Empty("training set".into()))?;
    if train.class_count < 2 {
        return Err(Error::InvalidConfig(format!(
            "class_count must be at least 2, got {}",
            train.class_count
        )));
    }
    let (_, _, channels) = hwc(shape.dims())?;
    let mut head = TaskHead::new(channels, train.class_count, head_cfg, rng_stream(opt.seed, STREAM_INIT).random())?;
    let mut adam = AdamState::new(&TaskHead::block_sizes(channels, train.class_count, head_cfg));
    let mut rng = rng_stream(opt.seed, STREAM_SHUFFLE);
    for epoch in 1..=opt.epochs {
        let lr = lr_at(opt, epoch)?;
        for batch in shuffled_batches(train.len(), opt.batch_size, &mut rng) {
            let parts = batch
                .par_iter()
                .map(|&i| -> Result<(f64, Vec<Vec<f64>>)> {
                    let cache: HeadCache = head.forward(train.samples[i])?;
                    let (loss, dl) = cross_entropy(&cache.logits, train.labels[i]);
                    let mut g = head.zero_grads();
                    head.backward(&cache, &dl, &mut g);
                    Ok((loss, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = head.zero_grads();
            let mut loss = 0.0;
            for (l, g) in &parts {
                loss += l;
                for (a, b) in grads.iter_mut().zip(g) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("task-head loss is {loss}"),
                });
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|b| b.iter_mut().for_each(|x| *x *= inv));
            let grefs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut [f64]> = head.params.iter_mut().map(Vec::as_mut_slice).collect();
            adam.step(&mut params, &grefs, lr, opt)
                .map_err(|e| divergence(epoch, "task head", e))?;
        }
    }
    Ok(head)
}

/// Fraction of correctly classified full-resolution samples by the head alone.
pub fn head_accuracy(head: &TaskHead, view: &DatasetView<'_>) -> Result<f64> {
    if view.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let hits = view
        .samples
        .par_iter()
        .zip(view.labels.par_iter())
        .map(|(s, &l)| Ok(usize::from(argmax(&head.scores(s)?) == l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / hits.len() as f64)
}

#[derive(Clone, Debug)]
pub struct JointTraining {
    /// Snapshot with the best validation accuracy (earliest on ties; the
    /// untrained model counts as epoch 0).
    pub model: MclModel,
    pub best_epoch: usize,
    /// Validation accuracy after each epoch, starting with epoch 0.
    pub val_accuracy: Vec<f64>,
    pub train_loss: Vec<f64>,
}

/// Optimizes `Φ`, `Θ` and the head jointly on cross-entropy.
pub fn train_joint(
    model: &MclModel,
    train: &DatasetView<'_>,
    val: &DatasetView<'_>,
    opt: &OptimizerConfig,
) -> Result<JointTraining> {
    opt.validate()?;
    let train_p = PairedSamples::new(train, &model.config.input)?;
    let val_p = PairedSamples::new(val, &model.config.input)?;
    fit_joint(model, &train_p, &val_p, opt)
}

pub fn fit_joint(
    model: &MclModel,
    train: &PairedSamples<'_>,
    val: &PairedSamples<'_>,
    opt: &OptimizerConfig,
) -> Result<JointTraining> {
    opt.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let val_acc = |m: &MclModel| -> Result<f64> {
        if val.is_empty() {
            Ok(0.0)
        } else {
            Ok(evaluate_paired(m, val)?.accuracy)
        }
    };
    let mut current = model.clone();
    let sizes: Vec<usize> = current.blocks().iter().map(|b| b.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut rng = rng_stream(opt.seed, STREAM_SHUFFLE);
    let mut out = JointTraining {
        model: model.clone(),
        best_epoch: 0,
        val_accuracy: vec![val_acc(model)?],
        train_loss: Vec::new(),
    };
    let mut best = out.val_accuracy[0];
    for epoch in 1..=opt.epochs {
        let lr = lr_at(opt, epoch)?;
        let mut total = 0.0;
        for batch in shuffled_batches(train.len(), opt.batch_size, &mut rng) {
            let (loss, grads) = classification_objective(&current, &train.inputs, &train.labels, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("cross-entropy is {loss}"),
                });
            }
            total += loss * batch.len() as f64;
            let mut grefs: Vec<&[f64]> = Vec::with_capacity(sizes.len());
            grefs.extend(grads.cs.iter().chain(&grads.fs).map(|g| g.data()));
            grefs.extend(grads.head.iter().map(Vec::as_slice));
            let mut params = current.blocks_mut();
            adam.step(&mut params, &grefs, lr, opt)
                .map_err(|e| divergence(epoch, "joint training", e))?;
        }
        out.train_loss.push(total / train.len() as f64);
        let acc = val_acc(&current)?;
        out.val_accuracy.push(acc);
        if acc > best {
            best = acc;
            out.best_epoch = epoch;
            out.model = current.clone();
        }
    }
    if val.is_empty() {
        out.model = current;
        out.best_epoch = opt.epochs;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub ce: f64,
    /// Per-element mean squared error of the synthesized features against
    /// the full-resolution samples.
    pub mse: f64,
}

/// Accuracy, classification error and reconstruction MSE on a split given at
/// full resolution (inputs are down-sampled to the sensor resolution).
pub fn evaluate(model: &MclModel, split: &DatasetView<'_>) -> Result<Evaluation> {
    let paired = PairedSamples::new(split, &model.config.input)?;
    evaluate_paired(model, &paired)
}

pub fn evaluate_paired(model: &MclModel, paired: &PairedSamples<'_>) -> Result<Evaluation> {
    if paired.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let per = (0..paired.len())
        .into_par_iter()
        .map(|i| -> Result<(bool, f64)> {
            let t = model.synthesize(&model.sense(&paired.inputs[i])?)?;
            let mse = t.mse(paired.targets[i])?;
            let hit = argmax(&model.head.scores(&t)?) == paired.labels[i];
            Ok((hit, mse))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    let accuracy = per.iter().filter(|(h, _)| *h).count() as f64 / n;
    let mse = per.iter().map(|(_, m)| m).sum::<f64>() / n;
    Ok(Evaluation {
        accuracy,
        ce: 1.0 - accuracy,
        mse,
    })
}

// ---------------------------------------------------------------------------
// checkpoint

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCLM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint layout, all little-endian:
/// `"MCLM"`, u32 version, u32 K, K×u32 `I`, K×u32 `M`, K×u32 `I^max`,
/// u32 head input channels, u32 conv1 channels, u32 conv2 channels,
/// u32 class count, then f64 payload: `Φ_1..Φ_K`, `Θ_1..Θ_K`, head blocks,
/// each row-major.
pub fn encode_checkpoint(m: &MclModel) -> Vec<u8> {
    let mut buf = Vec::new();
    let push_u32 = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_u32(&mut buf, m.config.input.order());
    for shape in [&m.config.input, &m.config.measurements, &m.max_shape()] {
        for &d in shape.dims() {
            push_u32(&mut buf, d);
        }
    }
    let hc = m.head.config();
    for v in [m.head.in_channels(), hc.conv1_channels, hc.conv2_channels, m.head.class_count()] {
        push_u32(&mut buf, v);
    }
    for v in m.flat_params() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(buf: &[u8]) -> std::result::Result<MclModel, String> {
    let mut r = ByteReader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic, expected MCLM".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let k = r.u32()? as usize;
    let read_shape = |r: &mut ByteReader<'_>| -> std::result::Result<TensorShape, String> {
        let dims = (0..k)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        TensorShape::new(dims).map_err(|e| e.to_string())
    };
    let input = read_shape(&mut r)?;
    let meas = read_shape(&mut r)?;
    let max = read_shape(&mut r)?;
    let in_ch = r.u32()? as usize;
    let head_cfg = HeadConfig {
        conv1_channels: r.u32()? as usize,
        conv2_channels: r.u32()? as usize,
    };
    let classes = r.u32()? as usize;
    let read_factors = |r: &mut ByteReader<'_>, rows: &[usize], cols: &[usize]| {
        rows.iter()
            .zip(cols)
            .map(|(&m, &n)| {
                let data = r.f64s(m * n)?;
                FactorMatrix::new(m, n, data).map_err(|e| e.to_string())
            })
            .collect::<std::result::Result<Vec<_>, String>>()
    };
    let phi = read_factors(&mut r, meas.dims(), input.dims())?;
    let theta = read_factors(&mut r, max.dims(), meas.dims())?;
    let head_blocks = TaskHead::block_sizes(in_ch, classes, head_cfg)
        .iter()
        .map(|&n| r.f64s(n))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    debug_assert_eq!(head_blocks.len(), HEAD_BLOCKS);
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    let head = TaskHead::from_params(in_ch, classes, head_cfg, head_blocks).map_err(|e| e.to_string())?;
    let config = ConfigPoint::new(input, meas).map_err(|e| e.to_string())?;
    MclModel::new(
        SensingOperator::new(phi).map_err(|e| e.to_string())?,
        SynthesisOperator::new(theta).map_err(|e| e.to_string())?,
        head,
        config,
    )
    .map_err(|e| e.to_string())
}

pub fn save_checkpoint(m: &MclModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(m)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MclModel> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf).map_err(|m| Error::format(path, m))
}
