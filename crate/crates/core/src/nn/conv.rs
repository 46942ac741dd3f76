use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng::Rng;
use crate::tensor::{linalg, Real, Tensor};

use super::{missing_cache, Layer, Param};

// Examples per backward work unit. Fixed so that the reduction order of the
// weight gradient is independent of thread count.
const BACKWARD_CHUNK: usize = 8;

/// 2-D cross-correlation over NHWC input with HWIO weights
/// `[kernel, kernel, in_channels, out_channels]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
    exec: Exec,
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    oh: usize,
    ow: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Gathers every receptive field of one example into a
    /// `[oh·ow, k·k·cin]` matrix; out-of-image taps read as zero.
    fn im2col(&self, x: &[Real], cols: &mut [Real]) {
        let plen = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * plen..][..plen];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let dst = &mut row[(ky * self.k + kx) * self.cin..][..self.cin];
                        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
                            dst.fill(0.0);
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * self.cin;
                            dst.copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
    }

    /// Forward pass of one example without materializing the im2col matrix.
    /// Products are summed in the same tap order as `im2col` + `matmul_acc`.
    fn direct(&self, x: &[Real], weight: &[Real], bias: &[Real], y: &mut [Real]) {
        let (k, cin, cout) = (self.k, self.cin, self.cout);
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let out = &mut y[(oy * self.ow + ox) * cout..][..cout];
                out.copy_from_slice(bias);
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy as usize >= self.h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix as usize >= self.w {
                            continue;
                        }
                        let src = &x[(iy as usize * self.w + ix as usize) * cin..][..cin];
                        let taps = &weight[(ky * k + kx) * cin * cout..][..cin * cout];
                        for (&xv, w_row) in src.iter().zip(taps.chunks_exact(cout)) {
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, &wv) in out.iter_mut().zip(w_row) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`].
    fn col2im(&self, cols: &[Real], dx: &mut [Real]) {
        let plen = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * plen..][..plen];
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy as usize >= self.h {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix as usize >= self.w {
                            continue;
                        }
                        let src = &row[(ky * self.k + kx) * self.cin..][..self.cin];
                        let dst = &mut dx[(iy as usize * self.w + ix as usize) * self.cin..][..self.cin];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

impl Conv2d {
    /// He-initialized convolution: weights ~ N(0, 2 / (k·k·in_channels)), zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv2d needs positive channels, kernel and stride (got {in_channels}→{out_channels}, k={kernel}, s={stride})"
            )));
        }
        let fan_in = (kernel * kernel * in_channels) as Real;
        let weight = rng.normal_tensor(
            &[kernel, kernel, in_channels, out_channels],
            0.0,
            (2.0 / fan_in).sqrt(),
        )?;
        Ok(Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new("weight", weight),
            bias: Param::new("bias", Tensor::zeros(&[out_channels])),
            input: None,
            exec: Exec::default(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn geometry(&self, shape: &[usize]) -> Result<Geometry> {
        let per_example = &shape[shape.len().saturating_sub(3)..];
        if shape.len() != 4 || per_example[2] != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                &[0, 0, 0, self.in_channels],
                shape,
            ));
        }
        let (h, w) = (shape[1], shape[2]);
        let span_h = h + 2 * self.padding;
        let span_w = w + 2 * self.padding;
        if span_h < self.kernel || span_w < self.kernel {
            return Err(Error::InvalidConfig(format!(
                "conv2d: {h}×{w} input too small for kernel {} with padding {}",
                self.kernel, self.padding
            )));
        }
        Ok(Geometry {
            h,
            w,
            cin: self.in_channels,
            oh: (span_h - self.kernel) / self.stride + 1,
            ow: (span_w - self.kernel) / self.stride + 1,
            cout: self.out_channels,
            k: self.kernel,
            stride: self.stride,
            pad: self.padding,
        })
    }
}

impl Layer for Conv2d {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn forward_train(&mut self, x: &Tensor, _rng: &mut Rng) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x.shape())?;
        let n = x.shape()[0];
        let in_len = g.h * g.w * g.cin;
        let out_len = g.out_pixels() * g.cout;
        let mut out = vec![0.0; n * out_len];
        if n == 0 {
            return Ok(Tensor::from_parts(vec![0, g.oh, g.ow, g.cout], out));
        }
        let weight = self.weight.value.as_slice();
        let bias = self.bias.value.as_slice();
        let xs = x.as_slice();
        par::for_each_chunk_mut(self.exec, &mut out, out_len, |i, y| {
            g.direct(&xs[i * in_len..(i + 1) * in_len], weight, bias, y);
        });
        Ok(Tensor::from_parts(vec![n, g.oh, g.ow, g.cout], out))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv2d"))?;
        let g = self.geometry(x.shape())?;
        let n = x.shape()[0];
        let expected = [n, g.oh, g.ow, g.cout];
        if grad_out.shape() != expected {
            return Err(Error::shape("conv2d_backward", &expected, grad_out.shape()));
        }
        let in_len = g.h * g.w * g.cin;
        let out_len = g.out_pixels() * g.cout;
        let wlen = g.patch_len() * g.cout;
        let weight = self.weight.value.as_slice();
        let xs = x.as_slice();
        let gs = grad_out.as_slice();

        let chunks = n.div_ceil(BACKWARD_CHUNK);
        let partials = par::map_range(self.exec, chunks, |c| {
            let lo = c * BACKWARD_CHUNK;
            let hi = (lo + BACKWARD_CHUNK).min(n);
            let mut dw = vec![0.0; wlen];
            let mut db = vec![0.0; g.cout];
            let mut dx = vec![0.0; (hi - lo) * in_len];
            let mut cols = vec![0.0; g.out_pixels() * g.patch_len()];
            for (j, e) in (lo..hi).enumerate() {
                let gy = &gs[e * out_len..(e + 1) * out_len];
                g.im2col(&xs[e * in_len..(e + 1) * in_len], &mut cols);
                linalg::matmul_at_b_acc(&cols, gy, &mut dw, g.out_pixels(), g.patch_len(), g.cout);
                for row in gy.chunks_exact(g.cout) {
                    for (b, &v) in db.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                linalg::matmul_a_bt(gy, weight, &mut cols, g.out_pixels(), g.cout, g.patch_len());
                g.col2im(&cols, &mut dx[j * in_len..(j + 1) * in_len]);
            }
            (dw, db, dx)
        });

        let mut dw = vec![0.0; wlen];
        let mut db = vec![0.0; g.cout];
        let mut dx = Vec::with_capacity(n * in_len);
        for (pw, pb, px) in partials {
            dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
            db.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
            dx.extend_from_slice(&px);
        }
        self.weight.grad = Tensor::from_parts(self.weight.value.shape().to_vec(), dw);
        self.bias.grad = Tensor::from_parts(vec![g.cout], db);
        Ok(Tensor::from_parts(x.shape().to_vec(), dx))
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut batched = vec![1];
        batched.extend_from_slice(input);
        let g = self.geometry(&batched)?;
        Ok(vec![g.oh, g.ow, g.cout])
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }

    fn has_cache(&self) -> bool {
        self.input.is_some()
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }
}
