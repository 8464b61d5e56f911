//! Layer types with explicit forward/backward passes.
//!
//! Convolution activations use a channel-major batch layout `[C, N, H, W]`,
//! so im2col columns for the whole batch form one matrix and a single GEMM
//! covers every image.

use rand::Rng;

use super::{DiffError, ParamId, ParamSet, Result, Scalar, Tensor};

/// Kaiming-uniform fan-in initialisation: `U(-√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    /// im2col matrix `[cin·k·k, n·ho·wo]`; for 1×1 stride-1 convs this is the
    /// input itself.
    cols: Vec<T>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl Conv2d {
    /// Square kernel with "same" padding (`kernel / 2`).
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 || kernel == 0 || stride == 0 {
            return Err(DiffError::Invalid(format!("{name}: zero-sized convolution")));
        }
        let fan_in = cin * kernel * kernel;
        let weight = params.add(
            &format!("{name}.weight"),
            kaiming_uniform(&[cout, cin, kernel, kernel], fan_in, rng),
        )?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self {
            name: name.into(),
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// `x`: `[cin, n, h, w]` → `[cout, n, ho, wo]`.
    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let s = x.shape();
        if s.len() != 4 || s[0] != self.cin {
            return Err(DiffError::ShapeMismatch {
                layer: self.name.clone(),
                expected: vec![self.cin, 0, 0, 0],
                got: s.to_vec(),
            });
        }
        let (n, h, w) = (s[1], s[2], s[3]);
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(DiffError::ShapeMismatch {
                layer: self.name.clone(),
                expected: vec![self.cin, n, self.kernel, self.kernel],
                got: s.to_vec(),
            });
        }
        let (ho, wo) = self.out_size(h, w);
        let cols = if self.is_pointwise() {
            x.data().to_vec()
        } else {
            self.im2col(x.data(), n, h, w, ho, wo)
        };
        let np = n * ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        let mut y = vec![T::ZERO; self.cout * np];
        let bias = params.value(self.bias);
        for (o, row) in y.chunks_mut(np).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        T::matmul(self.cout, kk, np, params.value(self.weight), false, &cols, false, &mut y, true);
        let cache = ConvCache {
            cols,
            in_shape: [self.cin, n, h, w],
            out_hw: (ho, wo),
        };
        Ok((Tensor::from_vec(&[self.cout, n, ho, wo], y)?, cache))
    }

    /// Accumulates weight/bias grads and returns the input gradient.
    pub fn backward<T: Scalar>(&self, params: &mut ParamSet<T>, cache: &ConvCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let [cin, n, h, w] = cache.in_shape;
        let (ho, wo) = cache.out_hw;
        dy.ensure_shape(&self.name, &[self.cout, n, ho, wo])?;
        let np = n * ho * wo;
        let kk = cin * self.kernel * self.kernel;
        {
            let db = params.grad_mut(self.bias);
            for (o, row) in dy.data().chunks(np).enumerate() {
                let mut acc = T::ZERO;
                for &v in row {
                    acc += v;
                }
                db[o] += acc;
            }
        }
        // dW[cout, kk] += dY[cout, np] · colsᵀ
        T::matmul(self.cout, np, kk, dy.data(), false, &cache.cols, true, params.grad_mut(self.weight), true);
        // dcols[kk, np] = Wᵀ · dY
        let mut dcols = vec![T::ZERO; kk * np];
        T::matmul(kk, self.cout, np, params.value(self.weight), true, dy.data(), false, &mut dcols, false);
        let dx = if self.is_pointwise() {
            dcols
        } else {
            self.col2im(&dcols, n, h, w, ho, wo)
        };
        Tensor::from_vec(&[cin, n, h, w], dx)
    }

    fn im2col<T: Scalar>(&self, x: &[T], n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
        let k = self.kernel;
        let np = n * ho * wo;
        let mut cols = vec![T::ZERO; self.cin * k * k * np];
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    for b in 0..n {
                        let src = &x[(c * n + b) * h * w..(c * n + b + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let base = (b * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
        let k = self.kernel;
        let np = n * ho * wo;
        let mut x = vec![T::ZERO; self.cin * n * h * w];
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * np..(row + 1) * np];
                    for b in 0..n {
                        let dst = &mut x[(c * n + b) * h * w..(c * n + b + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (b * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[iy as usize * w + ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Fully connected layer over row vectors: `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add(&format!("{name}.weight"), kaiming_uniform(&[dout, din], din, rng))?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[dout]))?;
        Ok(Self {
            name: name.into(),
            weight,
            bias,
            din,
            dout,
        })
    }

    /// `x`: `[m, din]` → `[m, dout]`.
    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.din {
            return Err(DiffError::ShapeMismatch {
                layer: self.name.clone(),
                expected: vec![s.first().copied().unwrap_or(0), self.din],
                got: s.to_vec(),
            });
        }
        let m = s[0];
        let bias = params.value(self.bias);
        let mut y = Vec::with_capacity(m * self.dout);
        for _ in 0..m {
            y.extend_from_slice(bias);
        }
        T::matmul(m, self.din, self.dout, x.data(), false, params.value(self.weight), true, &mut y, true);
        Tensor::from_vec(&[m, self.dout], y)
    }

    pub fn backward<T: Scalar>(&self, params: &mut ParamSet<T>, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let m = x.shape()[0];
        dy.ensure_shape(&self.name, &[m, self.dout])?;
        {
            let db = params.grad_mut(self.bias);
            for row in dy.data().chunks(self.dout) {
                for (g, &v) in db.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        // dW[dout, din] += dyᵀ · x
        T::matmul(self.dout, m, self.din, dy.data(), true, x.data(), false, params.grad_mut(self.weight), true);
        let mut dx = vec![T::ZERO; m * self.din];
        T::matmul(m, self.dout, self.din, dy.data(), false, params.value(self.weight), false, &mut dx, false);
        Tensor::from_vec(&[m, self.din], dx)
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// SiLU activation `x·σ(x)`; returns the output, the input is kept by the
/// caller for the backward pass.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::ONE + v * (T::ONE - s))
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Softmax along the leading axis of a `[d, rest]` buffer.
pub fn softmax_rows<T: Scalar>(logits: &[T], d: usize) -> Vec<T> {
    let rest = logits.len() / d;
    let mut out = vec![T::ZERO; logits.len()];
    for j in 0..rest {
        let mut mx = logits[j];
        for i in 1..d {
            mx = mx.max(logits[i * rest + j]);
        }
        let mut sum = T::ZERO;
        for i in 0..d {
            let e = (logits[i * rest + j] - mx).exp();
            out[i * rest + j] = e;
            sum += e;
        }
        for i in 0..d {
            out[i * rest + j] = out[i * rest + j] / sum;
        }
    }
    out
}

/// Backward of [`softmax_rows`] given its output `p`.
pub fn softmax_rows_backward<T: Scalar>(p: &[T], dp: &[T], d: usize) -> Vec<T> {
    let rest = p.len() / d;
    let mut dx = vec![T::ZERO; p.len()];
    for j in 0..rest {
        let mut dot = T::ZERO;
        for i in 0..d {
            dot += p[i * rest + j] * dp[i * rest + j];
        }
        for i in 0..d {
            dx[i * rest + j] = p[i * rest + j] * (dp[i * rest + j] - dot);
        }
    }
    dx
}
