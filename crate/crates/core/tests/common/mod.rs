//! Independent reference implementations and fixtures shared by the
//! integration tests. Everything here is written with plain nested loops
//! and does not call the library's kernels.
#![allow(dead_code)]

use exuseg::dataset::{synthetic, PatchSet};
use exuseg::nn::{Layer, Model, ModelConfig, Param};
use exuseg::training::{ShardOrder, TrainSchedule};
use exuseg::{Real, Result, Rng, Tensor};

/// Largest elementwise difference scaled by the largest reference magnitude.
pub fn rel_diff(got: &[Real], want: &[Real]) -> Real {
    assert_eq!(got.len(), want.len(), "length mismatch");
    let scale = want.iter().fold(0.0 as Real, |m, v| m.max(v.abs())).max(1e-300);
    got.iter()
        .zip(want)
        .fold(0.0 as Real, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

fn idx4(s: &[usize], n: usize, y: usize, x: usize, c: usize) -> usize {
    ((n * s[1] + y) * s[2] + x) * s[3] + c
}

/// Reads `x[n, y, x, c]` with zero padding outside the image.
fn padded(x: &Tensor, n: usize, y: isize, xx: isize, c: usize) -> Real {
    let s = x.shape();
    if y < 0 || xx < 0 || y as usize >= s[1] || xx as usize >= s[2] {
        0.0
    } else {
        x.as_slice()[idx4(s, n, y as usize, xx as usize, c)]
    }
}

pub fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// `y[n,oy,ox,co] = b[co] + Σ x[n, oy·s+ky−p, ox·s+kx−p, ci] · w[ky,kx,ci,co]`
pub fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, cout) = (ws[0], ws[3]);
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let mut y = vec![0.0; n * oh * ow * cout];
    for e in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b.as_slice()[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            for ci in 0..cin {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                acc += padded(x, e, iy, ix, ci) * w.as_slice()[((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    y[((e * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, cout], y).unwrap()
}

/// `(dx, dw, db)` for upstream gradient `gy`.
pub fn conv_backward(x: &Tensor, w: &Tensor, gy: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (xs, ws, gs) = (x.shape(), w.shape(), gy.shape());
    let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, cout) = (ws[0], ws[3]);
    let (oh, ow) = (gs[1], gs[2]);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for e in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let g = gy.as_slice()[((e * oh + oy) * ow + ox) * cout + co];
                    db[co] += g;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                continue;
                            }
                            for ci in 0..cin {
                                let wi = ((ky * k + kx) * cin + ci) * cout + co;
                                let xi = idx4(xs, e, iy as usize, ix as usize, ci);
                                dw[wi] += x.as_slice()[xi] * g;
                                dx[xi] += w.as_slice()[wi] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(xs.to_vec(), dx).unwrap(),
        Tensor::new(ws.to_vec(), dw).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

/// Max pooling with the first maximum (row-major window order) winning ties.
/// Returns the output and, for each output, the flat index of its source.
pub fn maxpool_forward(x: &Tensor, size: usize) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let mut y = Vec::new();
    let mut src = Vec::new();
    for e in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best: Option<(Real, usize)> = None;
                    for ky in 0..size {
                        for kx in 0..size {
                            let i = idx4(s, e, oy * size + ky, ox * size + kx, ch);
                            let v = x.as_slice()[i];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, i));
                            }
                        }
                    }
                    let (v, i) = best.unwrap();
                    y.push(v);
                    src.push(i);
                }
            }
        }
    }
    (Tensor::new(vec![n, oh, ow, c], y).unwrap(), src)
}

pub fn maxpool_backward(x: &Tensor, size: usize, gy: &Tensor) -> Tensor {
    let (_, src) = maxpool_forward(x, size);
    let mut dx = vec![0.0; x.len()];
    for (&i, &g) in src.iter().zip(gy.as_slice()) {
        dx[i] += g;
    }
    Tensor::new(x.shape().to_vec(), dx).unwrap()
}

/// Wraps a layer and scales the input gradient its backward returns.
pub struct CorruptBackward {
    pub inner: Box<dyn Layer>,
    pub scale: Real,
}

impl Layer for CorruptBackward {
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }
    fn forward_train(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        self.inner.forward_train(x, rng)
    }
    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.infer(x)
    }
    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        self.inner.backward(g)?.map(|v| v * self.scale)
    }
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.inner.output_shape(input)
    }
    fn clear_cache(&mut self) {
        self.inner.clear_cache()
    }
    fn has_cache(&self) -> bool {
        self.inner.has_cache()
    }
    fn params(&self) -> Vec<&Param> {
        self.inner.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.inner.params_mut()
    }
    fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        self.inner.buffers()
    }
    fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        self.inner.buffers_mut()
    }
}

/// Swaps layer `index` of `model` for a [`CorruptBackward`] wrapper.
pub fn corrupt_layer(model: &mut Model, index: usize, scale: Real) {
    let layers = model.layers_mut();
    let inner = std::mem::replace(&mut layers[index], Box::new(exuseg::nn::Relu::new()));
    layers[index] = Box::new(CorruptBackward { inner, scale });
}

/// A short schedule over the synthetic blob set: `shards` shards of
/// `shard_size`, `epochs` epochs each, one streak.
pub fn small_schedule(shards: usize, shard_size: usize, epochs: usize, batch: usize, seed: u64) -> TrainSchedule {
    TrainSchedule {
        shard_count: shards,
        shard_size,
        epochs_per_shard: epochs,
        streaks: 1,
        batch_size: batch,
        seed,
        order: ShardOrder::Sequential,
        allow_scale_down: false,
        checkpoint_every: 0,
    }
}

pub fn blobs(count: usize, seed: u64) -> PatchSet {
    synthetic::blob_patches(count, seed)
}

pub fn tiny() -> ModelConfig {
    ModelConfig::tiny()
}
