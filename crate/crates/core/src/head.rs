//! Small fixed convolutional classifier used as the task network.
//!
//! Input is an `H × W × C` tensor (channels fastest; an order-2 input is
//! read as a single channel). Architecture:
//! conv3x3(C→c1) → ReLU → avgpool2 → conv3x3(c1→c2) → ReLU → avgpool2 →
//! global average pool → linear(c2→classes). Convolutions use zero padding
//! of 1; pooling is 2×2 with stride 2 in ceil mode (partial windows average
//! over the cells they cover).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, FactorMatrix};

pub const CONV1_W: usize = 0;
pub const CONV1_B: usize = 1;
pub const CONV2_W: usize = 2;
pub const CONV2_B: usize = 3;
pub const FC_W: usize = 4;
pub const FC_B: usize = 5;
pub const HEAD_BLOCKS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            conv1_channels: 8,
            conv2_channels: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    in_channels: usize,
    class_count: usize,
    cfg: HeadConfig,
    /// Blocks in order: conv1 weights `[c1][3][3][C]`, conv1 bias, conv2
    /// weights `[c2][3][3][c1]`, conv2 bias, linear weights `[classes][c2]`,
    /// linear bias.
    pub params: Vec<Vec<f64>>,
}

/// Spatial extents and channel count of a head input.
pub(crate) fn hwc(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match *dims {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::DimensionMismatch(format!(
            "task head takes order-2 or order-3 inputs, got {dims:?}"
        ))),
    }
}

impl TaskHead {
    pub fn block_sizes(in_channels: usize, class_count: usize, cfg: HeadConfig) -> [usize; HEAD_BLOCKS] {
        let (c1, c2) = (cfg.conv1_channels, cfg.conv2_channels);
        [c1 * 9 * in_channels, c1, c2 * 9 * c1, c2, class_count * c2, class_count]
    }

    /// He-normal weights, zero biases.
    pub fn new(in_channels: usize, class_count: usize, cfg: HeadConfig, seed: u64) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "class_count must be at least 2, got {class_count}"
            )));
        }
        if in_channels == 0 || cfg.conv1_channels == 0 || cfg.conv2_channels == 0 {
            return Err(Error::InvalidConfig("head channel counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = Self::block_sizes(in_channels, class_count, cfg);
        let fan_in = [9 * in_channels, 0, 9 * cfg.conv1_channels, 0, cfg.conv2_channels, 0];
        let params = sizes
            .iter()
            .zip(fan_in)
            .map(|(&n, fan)| {
                if fan == 0 {
                    vec![0.0; n]
                } else {
                    FactorMatrix::gaussian(n, 1, (2.0 / fan as f64).sqrt(), &mut rng).into_data()
                }
            })
            .collect();
        Ok(TaskHead {
            in_channels,
            class_count,
            cfg,
            params,
        })
    }

    pub fn from_params(
        in_channels: usize,
        class_count: usize,
        cfg: HeadConfig,
        params: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let sizes = Self::block_sizes(in_channels, class_count, cfg);
        if params.len() != HEAD_BLOCKS || params.iter().zip(sizes).any(|(p, n)| p.len() != n) {
            return Err(Error::DimensionMismatch("head parameter blocks".into()));
        }
        if params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("head parameters".into()));
        }
        Ok(TaskHead {
            in_channels,
            class_count,
            cfg,
            params,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn config(&self) -> HeadConfig {
        self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn scores(&self, x: &DenseTensor) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    pub(crate) fn forward(&self, x: &DenseTensor) -> Result<HeadCache> {
        let (h, w, c) = hwc(x.dims())?;
        if c != self.in_channels {
            return Err(Error::DimensionMismatch(format!(
                "head expects {} channels, input has {c}",
                self.in_channels
            )));
        }
        let (c1, c2) = (self.cfg.conv1_channels, self.cfg.conv2_channels);
        let a1 = conv3x3(x.data(), h, w, c, &self.params[CONV1_W], &self.params[CONV1_B], c1);
        let r1 = relu(&a1);
        let (p1, h1, w1) = avgpool2(&r1, h, w, c1);
        let a2 = conv3x3(&p1, h1, w1, c1, &self.params[CONV2_W], &self.params[CONV2_B], c2);
        let r2 = relu(&a2);
        let (p2, h2, w2) = avgpool2(&r2, h1, w1, c2);
        let mut g = vec![0.0; c2];
        for cell in p2.chunks_exact(c2) {
            g.iter_mut().zip(cell).for_each(|(a, b)| *a += b);
        }
        let area = (h2 * w2) as f64;
        g.iter_mut().for_each(|v| *v /= area);
        let logits = (0..self.class_count)
            .map(|k| {
                let row = &self.params[FC_W][k * c2..(k + 1) * c2];
                self.params[FC_B][k] + row.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(HeadCache {
            x: x.data().to_vec(),
            dims: [h, w, c, h1, w1, h2, w2],
            a1,
            p1,
            a2,
            g,
            logits,
        })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input, given `d loss / d logits`.
    pub(crate) fn backward(
        &self,
        cache: &HeadCache,
        dlogits: &[f64],
        grads: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let [h, w, c, h1, w1, h2, w2] = cache.dims;
        let (c1, c2) = (self.cfg.conv1_channels, self.cfg.conv2_channels);
        let mut dg = vec![0.0; c2];
        for (k, &d) in dlogits.iter().enumerate() {
            grads[FC_B][k] += d;
            let row = &self.params[FC_W][k * c2..(k + 1) * c2];
            let grow = &mut grads[FC_W][k * c2..(k + 1) * c2];
            for j in 0..c2 {
                grow[j] += d * cache.g[j];
                dg[j] += d * row[j];
            }
        }
        let area = (h2 * w2) as f64;
        let mut dp2 = vec![0.0; h2 * w2 * c2];
        for cell in dp2.chunks_exact_mut(c2) {
            cell.iter_mut().zip(&dg).for_each(|(a, b)| *a = b / area);
        }
        let dr2 = avgpool2_backward(&dp2, h1, w1, c2);
        let da2 = relu_backward(&cache.a2, &dr2);
        let dp1 = conv3x3_backward(
            &cache.p1,
            h1,
            w1,
            c1,
            &self.params[CONV2_W],
            c2,
            &da2,
            grads,
            CONV2_W,
            CONV2_B,
        );
        let dr1 = avgpool2_backward(&dp1, h, w, c1);
        let da1 = relu_backward(&cache.a1, &dr1);
        conv3x3_backward(
            &cache.x,
            h,
            w,
            c,
            &self.params[CONV1_W],
            c1,
            &da1,
            grads,
            CONV1_W,
            CONV1_B,
        )
    }
}

pub(crate) struct HeadCache {
    x: Vec<f64>,
    dims: [usize; 7],
    a1: Vec<f64>,
    p1: Vec<f64>,
    a2: Vec<f64>,
    g: Vec<f64>,
    pub logits: Vec<f64>,
}

fn conv3x3(x: &[f64], h: usize, w: usize, cin: usize, wt: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; h * w * cout];
    for i in 0..h {
        for j in 0..w {
            let out = &mut y[(i * w + j) * cout..(i * w + j + 1) * cout];
            out.copy_from_slice(b);
            for di in 0..3 {
                let Some(ii) = (i + di).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for dj in 0..3 {
                    let Some(jj) = (j + dj).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let xin = &x[(ii * w + jj) * cin..(ii * w + jj + 1) * cin];
                    let tap = di * 3 + dj;
                    for (o, acc) in out.iter_mut().enumerate() {
                        let k = &wt[(o * 9 + tap) * cin..(o * 9 + tap + 1) * cin];
                        *acc += k.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    wt: &[f64],
    cout: usize,
    dy: &[f64],
    grads: &mut [Vec<f64>],
    w_block: usize,
    b_block: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; h * w * cin];
    let (gw, gb) = pair_mut(grads, w_block, b_block);
    for i in 0..h {
        for j in 0..w {
            let d = &dy[(i * w + j) * cout..(i * w + j + 1) * cout];
            gb.iter_mut().zip(d).for_each(|(a, g)| *a += g);
            for di in 0..3 {
                let Some(ii) = (i + di).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for dj in 0..3 {
                    let Some(jj) = (j + dj).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let base = (ii * w + jj) * cin;
                    let xin = &x[base..base + cin];
                    let dxs = &mut dx[base..base + cin];
                    let tap = di * 3 + dj;
                    for (o, &g) in d.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let off = (o * 9 + tap) * cin;
                        let gk = &mut gw[off..off + cin];
                        let k = &wt[off..off + cin];
                        for ci in 0..cin {
                            gk[ci] += g * xin[ci];
                            dxs[ci] += g * k[ci];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pair_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dy)
        .map(|(&p, &d)| if p > 0.0 { d } else { 0.0 })
        .collect()
}

fn avgpool2(x: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = vec![0.0; ho * wo * c];
    for i in 0..ho {
        for j in 0..wo {
            let out = &mut y[(i * wo + j) * c..(i * wo + j + 1) * c];
            let rows = (2 * i)..(2 * i + 2).min(h);
            let cols = (2 * j)..(2 * j + 2).min(w);
            let count = (rows.len() * cols.len()) as f64;
            for ii in rows {
                for jj in cols.clone() {
                    let src = &x[(ii * w + jj) * c..(ii * w + jj + 1) * c];
                    out.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            out.iter_mut().for_each(|v| *v /= count);
        }
    }
    (y, ho, wo)
}

fn avgpool2_backward(dy: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut dx = vec![0.0; h * w * c];
    for i in 0..ho {
        for j in 0..wo {
            let d = &dy[(i * wo + j) * c..(i * wo + j + 1) * c];
            let rows = (2 * i)..(2 * i + 2).min(h);
            let cols = (2 * j)..(2 * j + 2).min(w);
            let count = (rows.len() * cols.len()) as f64;
            for ii in rows {
                for jj in cols.clone() {
                    let dst = &mut dx[(ii * w + jj) * c..(ii * w + jj + 1) * c];
                    dst.iter_mut().zip(d).for_each(|(a, b)| *a += b / count);
                }
            }
        }
    }
    dx
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label` and its gradient
/// with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
