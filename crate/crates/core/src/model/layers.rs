//! Explicit (unconstrained) layers around the equilibrium core: dense
//! projections, the convolutional stem, and the pooling pair used by the
//! single-convolution architecture.

use crate::error::{Error, Result};
use crate::numeric::{im2col_sample, matmul, matmul_tl, matmul_tr, ConvShape, Matrix, Rng, Vector};

/// Fully-connected layer `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Dense {
    /// Uniform `[-1/sqrt(in), 1/sqrt(in)]` weights, zero bias.
    pub fn init(out_features: usize, in_features: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let data = (0..out_features * in_features).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            weight: Matrix::from_vec(out_features, in_features, data).expect("sized above"),
            bias: Vector::zeros(out_features),
        }
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let mut out = matmul_tr(input, &self.weight)?;
        for s in 0..out.rows() {
            for (v, b) in out.row_mut(s).iter_mut().zip(self.bias.as_slice()) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(&self, input: &Matrix, grad_out: &Matrix) -> Result<(Matrix, Matrix, Vector)> {
        let grad_w = matmul_tl(grad_out, input)?;
        let mut grad_b = Vector::zeros(self.bias.len());
        for s in 0..grad_out.rows() {
            for (b, v) in grad_b.as_mut_slice().iter_mut().zip(grad_out.row(s)) {
                *b += v;
            }
        }
        let grad_in = matmul(grad_out, &self.weight)?;
        Ok((grad_in, grad_w, grad_b))
    }
}

/// Convolutional stem, `kernel` stored flattened as `out_c x (in_c k^2)`.
#[derive(Clone, Debug)]
pub struct ConvStem {
    pub kernel: Matrix,
    pub bias: Vector,
    pub shape: ConvShape,
    pub out_channels: usize,
}

impl ConvStem {
    pub fn init(out_channels: usize, shape: ConvShape, rng: &mut Rng) -> Result<Self> {
        shape.validate()?;
        let fan_in = shape.patch_len();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..out_channels * fan_in).map(|_| rng.uniform(-bound, bound)).collect();
        Ok(Self {
            kernel: Matrix::from_vec(out_channels, fan_in, data)?,
            bias: Vector::zeros(out_channels),
            shape,
            out_channels,
        })
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.shape.out_positions()
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.shape.input_len() {
            return Err(Error::DimensionMismatch {
                op: "ConvStem::forward",
                detail: format!("input width {}, expected {}", input.cols(), self.shape.input_len()),
            });
        }
        let positions = self.shape.out_positions();
        let mut out = Matrix::zeros(input.rows(), self.out_len());
        let per_row = self.out_channels * self.shape.patch_len() * positions;
        let shape = self.shape;
        let kernel = &self.kernel;
        let bias = &self.bias;
        crate::numeric::for_each_row(out.data_mut(), self.out_len(), per_row, |s, row| {
            let cols = im2col_sample(input.row(s), shape).expect("validated shape");
            let pre = matmul(kernel, &cols).expect("validated shape");
            row.copy_from_slice(pre.data());
            for c in 0..bias.len() {
                for v in &mut row[c * positions..(c + 1) * positions] {
                    *v += bias[c];
                }
            }
        });
        Ok(out)
    }

    /// Gradients for kernel and bias only; the stem is the first layer so the
    /// input gradient is never needed.
    pub fn backward(&self, input: &Matrix, grad_out: &Matrix) -> Result<(Matrix, Vector)> {
        let positions = self.shape.out_positions();
        let mut grad_kernel = Matrix::zeros(self.out_channels, self.shape.patch_len());
        let mut grad_bias = Vector::zeros(self.out_channels);
        for s in 0..input.rows() {
            let cols = im2col_sample(input.row(s), self.shape)?;
            let g = Matrix::from_vec(self.out_channels, positions, grad_out.row(s).to_vec())?;
            grad_kernel.add_assign(&matmul_tr(&g, &cols)?)?;
            for c in 0..self.out_channels {
                grad_bias[c] += g.row(c).iter().sum::<f64>();
            }
        }
        Ok((grad_kernel, grad_bias))
    }
}

/// Max pooling with argmax bookkeeping for the backward scatter.
#[derive(Clone, Debug)]
pub struct MaxPool {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.out_height() * self.out_width()
    }

    /// Returns the pooled batch plus, per output entry, the flat input index
    /// that won the max (padding cells never win: real entries are preferred
    /// over the implicit negative-infinity border).
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, Vec<u32>)> {
        let (h, w) = (self.height, self.width);
        if input.cols() != self.channels * h * w {
            return Err(Error::DimensionMismatch {
                op: "MaxPool::forward",
                detail: format!("input width {}, expected {}", input.cols(), self.channels * h * w),
            });
        }
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut out = Matrix::zeros(input.rows(), self.out_len());
        let mut argmax = vec![0u32; input.rows() * self.out_len()];
        for s in 0..input.rows() {
            let row = input.row(s);
            let orow = out.row_mut(s);
            let arow = &mut argmax[s * self.out_len()..(s + 1) * self.out_len()];
            for c in 0..self.channels {
                let plane = &row[c * h * w..(c + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = iy as usize * w + ix as usize;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = c * h * w + idx;
                                }
                            }
                        }
                        let o = c * oh * ow + oy * ow + ox;
                        orow[o] = best;
                        arow[o] = best_idx as u32;
                    }
                }
            }
        }
        Ok((out, argmax))
    }

    pub fn backward(&self, argmax: &[u32], grad_out: &Matrix) -> Matrix {
        let mut grad_in = Matrix::zeros(grad_out.rows(), self.channels * self.height * self.width);
        let per = self.out_len();
        for s in 0..grad_out.rows() {
            let grow = grad_out.row(s);
            let arow = &argmax[s * per..(s + 1) * per];
            let irow = grad_in.row_mut(s);
            for (o, &idx) in arow.iter().enumerate() {
                irow[idx as usize] += grow[o];
            }
        }
        grad_in
    }
}

/// Average pooling with kernel == stride (non-overlapping windows).
#[derive(Clone, Debug)]
pub struct AvgPool {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl AvgPool {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.kernel + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.kernel + 1
    }

    pub fn out_len(&self) -> usize {
        self.channels * self.out_height() * self.out_width()
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let (h, w) = (self.height, self.width);
        if input.cols() != self.channels * h * w {
            return Err(Error::DimensionMismatch {
                op: "AvgPool::forward",
                detail: format!("input width {}, expected {}", input.cols(), self.channels * h * w),
            });
        }
        let (oh, ow) = (self.out_height(), self.out_width());
        let window = (self.kernel * self.kernel) as f64;
        let mut out = Matrix::zeros(input.rows(), self.out_len());
        for s in 0..input.rows() {
            let row = input.row(s);
            let orow = out.row_mut(s);
            for c in 0..self.channels {
                let plane = &row[c * h * w..(c + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..self.kernel {
                            let base = (oy * self.kernel + ky) * w + ox * self.kernel;
                            for kx in 0..self.kernel {
                                acc += plane[base + kx];
                            }
                        }
                        orow[c * oh * ow + oy * ow + ox] = acc / window;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Matrix) -> Matrix {
        let (h, w) = (self.height, self.width);
        let (oh, ow) = (self.out_height(), self.out_width());
        let window = (self.kernel * self.kernel) as f64;
        let mut grad_in = Matrix::zeros(grad_out.rows(), self.channels * h * w);
        for s in 0..grad_out.rows() {
            let grow = grad_out.row(s);
            let irow = grad_in.row_mut(s);
            for c in 0..self.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = grow[c * oh * ow + oy * ow + ox] / window;
                        for ky in 0..self.kernel {
                            let base = c * h * w + (oy * self.kernel + ky) * w + ox * self.kernel;
                            for kx in 0..self.kernel {
                                irow[base + kx] += g;
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}
