use super::Matrix;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution over a `channels x height x width` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("empty convolution input".into()));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument("kernel and stride must be >= 1".into()));
        }
        if self.kernel > self.height + 2 * self.padding || self.kernel > self.width + 2 * self.padding {
            return Err(Error::InvalidArgument(format!(
                "kernel {} exceeds padded extent {}x{}",
                self.kernel,
                self.height + 2 * self.padding,
                self.width + 2 * self.padding
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Flattened input length per sample.
    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Rows of the unfolded patch matrix: `channels * kernel^2`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfold one flattened `channels x height x width` sample into a
/// `patch_len x out_positions` column matrix, so that a flattened kernel
/// matrix times the result equals the direct convolution.
pub fn im2col_sample(sample: &[f64], shape: ConvShape) -> Result<Matrix> {
    shape.validate()?;
    if sample.len() != shape.input_len() {
        return Err(Error::DimensionMismatch {
            op: "im2col_sample",
            detail: format!("sample length {} != {}", sample.len(), shape.input_len()),
        });
    }
    let (oh, ow) = (shape.out_height(), shape.out_width());
    let mut out = Matrix::zeros(shape.patch_len(), oh * ow);
    fill_sample_columns(sample, shape, 0, 1, &mut out);
    Ok(out)
}

/// Unfold a whole batch (one sample per row of `input`); sample `s` occupies
/// the contiguous column block `[s * out_positions, (s+1) * out_positions)`.
pub fn im2col(input: &Matrix, shape: ConvShape) -> Result<Matrix> {
    shape.validate()?;
    if input.cols() != shape.input_len() {
        return Err(Error::DimensionMismatch {
            op: "im2col",
            detail: format!("row length {} != {}", input.cols(), shape.input_len()),
        });
    }
    let batch = input.rows();
    let mut out = Matrix::zeros(shape.patch_len(), batch * shape.out_positions());
    for s in 0..batch {
        fill_sample_columns(input.row(s), shape, s, batch, &mut out);
    }
    Ok(out)
}

fn fill_sample_columns(sample: &[f64], shape: ConvShape, s: usize, _batch: usize, out: &mut Matrix) {
    let (h, w, k) = (shape.height, shape.width, shape.kernel);
    let (oh, ow) = (shape.out_height(), shape.out_width());
    let positions = oh * ow;
    let col0 = s * positions;
    for c in 0..shape.channels {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let row = out.row_mut(r);
                for oy in 0..oh {
                    // Input row index before padding shift; may be out of range.
                    let iy = (oy * shape.stride + ky) as isize - shape.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * shape.stride + kx) as isize - shape.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            row[col0 + oy * ow + ox] = plane[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_sample`]: scatter-add a `patch_len x out_positions`
/// matrix back onto a flattened sample. `im2col` and `col2im` form an
/// adjoint pair, which is exactly what the backward pass needs.
pub fn col2im_sample(cols: &Matrix, shape: ConvShape) -> Result<Vec<f64>> {
    shape.validate()?;
    let (oh, ow) = (shape.out_height(), shape.out_width());
    if cols.rows() != shape.patch_len() || cols.cols() != oh * ow {
        return Err(Error::DimensionMismatch {
            op: "col2im_sample",
            detail: format!(
                "cols {}x{}, expected {}x{}",
                cols.rows(),
                cols.cols(),
                shape.patch_len(),
                oh * ow
            ),
        });
    }
    let (h, w, k) = (shape.height, shape.width, shape.kernel);
    let mut out = vec![0.0; shape.input_len()];
    for c in 0..shape.channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let row = cols.row(r);
                for oy in 0..oh {
                    let iy = (oy * shape.stride + ky) as isize - shape.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * shape.stride + kx) as isize - shape.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{matmul, Rng};

    /// Nested-loop convolution oracle, independent of the im2col path.
    fn conv_direct(sample: &[f64], kernel: &Matrix, shape: ConvShape) -> Vec<f64> {
        let (h, w, k) = (shape.height, shape.width, shape.kernel);
        let (oh, ow) = (shape.out_height(), shape.out_width());
        let out_c = kernel.rows();
        let mut out = vec![0.0; out_c * oh * ow];
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..shape.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * shape.stride + ky) as isize - shape.padding as isize;
                                let ix = (ox * shape.stride + kx) as isize - shape.padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    let iv = sample[c * h * w + iy as usize * w + ix as usize];
                                    let kv = kernel.get(oc, (c * k + ky) * k + kx);
                                    acc += iv * kv;
                                }
                            }
                        }
                    }
                    out[oc * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_columns_are_the_pixels() {
        let shape = ConvShape { channels: 1, height: 2, width: 2, kernel: 1, stride: 1, padding: 0 };
        let cols = im2col_sample(&[1.0, 2.0, 3.0, 4.0], shape).unwrap();
        assert_eq!((cols.rows(), cols.cols()), (1, 4));
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn full_kernel_gives_single_column() {
        let shape = ConvShape { channels: 1, height: 3, width: 3, kernel: 3, stride: 1, padding: 0 };
        let sample: Vec<f64> = (1..=9).map(f64::from).collect();
        let cols = im2col_sample(&sample, shape).unwrap();
        assert_eq!((cols.rows(), cols.cols()), (9, 1));
        assert_eq!(cols.data(), sample.as_slice());
    }

    #[test]
    fn padded_conv_matches_direct_oracle() {
        let mut rng = Rng::new(13);
        let shape = ConvShape { channels: 1, height: 4, width: 4, kernel: 3, stride: 1, padding: 1 };
        let sample: Vec<f64> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let kernel =
            Matrix::from_vec(2, 9, (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let cols = im2col_sample(&sample, shape).unwrap();
        let got = matmul(&kernel, &cols).unwrap();
        let want = conv_direct(&sample, &kernel, shape);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn random_shapes_match_direct_oracle() {
        let mut rng = Rng::new(29);
        for trial in 0..50 {
            let shape = ConvShape {
                channels: 1 + rng.index(3),
                height: 3 + rng.index(6),
                width: 3 + rng.index(6),
                kernel: 1 + rng.index(3),
                stride: 1 + rng.index(2),
                padding: rng.index(2),
            };
            if shape.validate().is_err() {
                continue;
            }
            let out_c = 1 + rng.index(3);
            let sample: Vec<f64> =
                (0..shape.input_len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let kernel = Matrix::from_vec(
                out_c,
                shape.patch_len(),
                (0..out_c * shape.patch_len()).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap();
            let got = matmul(&kernel, &im2col_sample(&sample, shape).unwrap()).unwrap();
            let want = conv_direct(&sample, &kernel, shape);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "trial {trial} shape {shape:?}");
            }
        }
    }

    #[test]
    fn batched_unfold_blocks_match_per_sample() {
        let mut rng = Rng::new(31);
        let shape = ConvShape { channels: 2, height: 3, width: 3, kernel: 2, stride: 1, padding: 0 };
        let batch = Matrix::from_vec(
            3,
            shape.input_len(),
            (0..3 * shape.input_len()).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap();
        let all = im2col(&batch, shape).unwrap();
        let p = shape.out_positions();
        for s in 0..3 {
            let single = im2col_sample(batch.row(s), shape).unwrap();
            for r in 0..shape.patch_len() {
                for c in 0..p {
                    assert_eq!(all.get(r, s * p + c), single.get(r, c));
                }
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = Rng::new(37);
        let shape = ConvShape { channels: 2, height: 4, width: 5, kernel: 3, stride: 1, padding: 1 };
        let x: Vec<f64> = (0..shape.input_len()).map(|_| rng.normal()).collect();
        let y = Matrix::from_vec(
            shape.patch_len(),
            shape.out_positions(),
            (0..shape.patch_len() * shape.out_positions()).map(|_| rng.normal()).collect(),
        )
        .unwrap();
        let ax = im2col_sample(&x, shape).unwrap();
        let aty = col2im_sample(&y, shape).unwrap();
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let shape = ConvShape { channels: 1, height: 2, width: 2, kernel: 5, stride: 1, padding: 0 };
        assert!(im2col_sample(&[0.0; 4], shape).is_err());
    }
}
