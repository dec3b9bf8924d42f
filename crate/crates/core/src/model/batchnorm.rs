use crate::error::{Error, Result};
use crate::numeric::{Matrix, Vector};

/// Batch normalization over features, with optional spatial grouping for
/// convolutional maps: a row is laid out feature-major as
/// `[f0 * spatial, f1 * spatial, ...]` and statistics are taken per feature
/// over `batch * spatial` entries.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Vector,
    pub beta: Vector,
    pub running_mean: Vector,
    pub running_var: Vector,
    pub momentum: f64,
    pub epsilon: f64,
    spatial: usize,
}

/// Intermediates needed by the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(features: usize, spatial: usize) -> Self {
        Self {
            gamma: Vector::filled(features, 1.0),
            beta: Vector::zeros(features),
            running_mean: Vector::zeros(features),
            running_var: Vector::filled(features, 1.0),
            momentum: 0.1,
            epsilon: 1e-5,
            spatial,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn spatial(&self) -> usize {
        self.spatial
    }

    fn check(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.features() * self.spatial {
            return Err(Error::DimensionMismatch {
                op: "BatchNorm",
                detail: format!(
                    "input width {}, expected {} features x {} spatial",
                    input.cols(),
                    self.features(),
                    self.spatial
                ),
            });
        }
        Ok(())
    }

    /// Training-mode forward: normalize by batch statistics and fold them
    /// into the running estimates (unbiased variance, as is conventional).
    pub fn forward_train(&mut self, input: &Matrix) -> Result<(Matrix, BnCache)> {
        self.check(input)?;
        let (features, spatial) = (self.features(), self.spatial);
        let group = input.rows() * spatial;
        if group == 0 {
            return Err(Error::InvalidArgument("batch norm over an empty batch".into()));
        }
        let mut mean = vec![0.0; features];
        let mut var = vec![0.0; features];
        for s in 0..input.rows() {
            let row = input.row(s);
            for f in 0..features {
                for v in &row[f * spatial..(f + 1) * spatial] {
                    mean[f] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= group as f64;
        }
        for s in 0..input.rows() {
            let row = input.row(s);
            for f in 0..features {
                for v in &row[f * spatial..(f + 1) * spatial] {
                    let d = v - mean[f];
                    var[f] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= group as f64;
        }

        let unbias = if group > 1 { group as f64 / (group - 1) as f64 } else { 1.0 };
        for f in 0..features {
            self.running_mean[f] =
                (1.0 - self.momentum) * self.running_mean[f] + self.momentum * mean[f];
            self.running_var[f] =
                (1.0 - self.momentum) * self.running_var[f] + self.momentum * var[f] * unbias;
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut normalized = input.clone();
        let mut out = Matrix::zeros(input.rows(), input.cols());
        for s in 0..input.rows() {
            let nrow = normalized.row_mut(s);
            let orow = out.row_mut(s);
            for f in 0..features {
                for i in f * spatial..(f + 1) * spatial {
                    let xh = (nrow[i] - mean[f]) * inv_std[f];
                    nrow[i] = xh;
                    orow[i] = self.gamma[f] * xh + self.beta[f];
                }
            }
        }
        Ok((out, BnCache { normalized, inv_std }))
    }

    /// Inference-mode forward using running statistics; batch-size invariant.
    pub fn forward_eval(&self, input: &Matrix) -> Result<Matrix> {
        self.check(input)?;
        let (features, spatial) = (self.features(), self.spatial);
        let mut out = Matrix::zeros(input.rows(), input.cols());
        for s in 0..input.rows() {
            let row = input.row(s);
            let orow = out.row_mut(s);
            for f in 0..features {
                let inv = 1.0 / (self.running_var[f] + self.epsilon).sqrt();
                for i in f * spatial..(f + 1) * spatial {
                    orow[i] = self.gamma[f] * (row[i] - self.running_mean[f]) * inv + self.beta[f];
                }
            }
        }
        Ok(out)
    }

    /// Backward through the training-mode normalization.
    pub fn backward(&self, cache: &BnCache, grad_out: &Matrix) -> Result<(Matrix, Vector, Vector)> {
        self.check(grad_out)?;
        let (features, spatial) = (self.features(), self.spatial);
        let group = (grad_out.rows() * spatial) as f64;
        let mut grad_gamma = Vector::zeros(features);
        let mut grad_beta = Vector::zeros(features);
        let mut sum_dxh = vec![0.0; features];
        let mut sum_dxh_xh = vec![0.0; features];
        for s in 0..grad_out.rows() {
            let grow = grad_out.row(s);
            let xrow = cache.normalized.row(s);
            for f in 0..features {
                for i in f * spatial..(f + 1) * spatial {
                    grad_gamma[f] += grow[i] * xrow[i];
                    grad_beta[f] += grow[i];
                    let dxh = grow[i] * self.gamma[f];
                    sum_dxh[f] += dxh;
                    sum_dxh_xh[f] += dxh * xrow[i];
                }
            }
        }
        let mut grad_in = Matrix::zeros(grad_out.rows(), grad_out.cols());
        for s in 0..grad_out.rows() {
            let grow = grad_out.row(s);
            let xrow = cache.normalized.row(s);
            let irow = grad_in.row_mut(s);
            for f in 0..features {
                let mean_dxh = sum_dxh[f] / group;
                let mean_dxh_xh = sum_dxh_xh[f] / group;
                for i in f * spatial..(f + 1) * spatial {
                    let dxh = grow[i] * self.gamma[f];
                    irow[i] = cache.inv_std[f] * (dxh - mean_dxh - xrow[i] * mean_dxh_xh);
                }
            }
        }
        Ok((grad_in, grad_gamma, grad_beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    #[test]
    fn train_output_is_standardized() {
        let mut rng = Rng::new(51);
        let mut bn = BatchNorm::new(4, 1);
        let input = Matrix::from_vec(256, 4, (0..1024).map(|_| rng.uniform(-3.0, 9.0)).collect()).unwrap();
        let (out, _) = bn.forward_train(&input).unwrap();
        for f in 0..4 {
            let col: Vec<f64> = (0..256).map(|s| out.get(s, f)).collect();
            let mean = col.iter().sum::<f64>() / 256.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 256.0;
            assert!(mean.abs() < 1e-5, "feature {f} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "feature {f} var {var}");
        }
    }

    #[test]
    fn eval_is_batch_size_invariant() {
        let mut rng = Rng::new(53);
        let mut bn = BatchNorm::new(3, 1);
        for _ in 0..10 {
            let input = Matrix::from_vec(32, 3, (0..96).map(|_| rng.normal()).collect()).unwrap();
            bn.forward_train(&input).unwrap();
        }
        let sample = Matrix::from_vec(1, 3, vec![0.3, -0.2, 1.4]).unwrap();
        let single = bn.forward_eval(&sample).unwrap();
        let mut batch = Matrix::zeros(16, 3);
        for s in 0..16 {
            batch.row_mut(s).copy_from_slice(sample.row(0));
        }
        let batched = bn.forward_eval(&batch).unwrap();
        for s in 0..16 {
            assert_eq!(batched.row(s), single.row(0));
        }
    }

    #[test]
    fn per_channel_grouping_shares_statistics() {
        let mut bn = BatchNorm::new(2, 3);
        let input = Matrix::from_vec(2, 6, vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0, 4.0, 5.0, 6.0, 40.0, 50.0, 60.0]).unwrap();
        let (out, _) = bn.forward_train(&input).unwrap();
        // Channel 0 entries {1..6} standardize to mean 0 across batch+spatial.
        let c0: Vec<f64> = (0..2).flat_map(|s| out.row(s)[0..3].to_vec()).collect();
        let mean = c0.iter().sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(57);
        let input = Matrix::from_vec(5, 6, (0..30).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let g = Matrix::from_vec(5, 6, (0..30).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let bn0 = {
            let mut bn = BatchNorm::new(3, 2);
            bn.gamma = Vector::from_vec(vec![1.2, 0.8, 1.5]);
            bn.beta = Vector::from_vec(vec![0.1, -0.2, 0.05]);
            bn
        };
        let objective = |inp: &Matrix, gamma: &Vector, beta: &Vector| -> f64 {
            let mut bn = bn0.clone();
            bn.gamma = gamma.clone();
            bn.beta = beta.clone();
            let (out, _) = bn.forward_train(inp).unwrap();
            out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let mut bn = bn0.clone();
        let (out, cache) = bn.forward_train(&input).unwrap();
        let _ = out;
        let (grad_in, grad_gamma, grad_beta) = bn.backward(&cache, &g).unwrap();
        let h = 1e-6;
        for idx in 0..input.data().len() {
            let mut p = input.clone();
            p.data_mut()[idx] += h;
            let mut m = input.clone();
            m.data_mut()[idx] -= h;
            let fd = (objective(&p, &bn0.gamma, &bn0.beta) - objective(&m, &bn0.gamma, &bn0.beta)) / (2.0 * h);
            assert!((grad_in.data()[idx] - fd).abs() < 1e-5, "input grad {idx}");
        }
        for f in 0..3 {
            let mut gp = bn0.gamma.clone();
            gp[f] += h;
            let mut gm = bn0.gamma.clone();
            gm[f] -= h;
            let fd = (objective(&input, &gp, &bn0.beta) - objective(&input, &gm, &bn0.beta)) / (2.0 * h);
            assert!((grad_gamma[f] - fd).abs() < 1e-5, "gamma grad {f}");
            let mut bp = bn0.beta.clone();
            bp[f] += h;
            let mut bm = bn0.beta.clone();
            bm[f] -= h;
            let fd = (objective(&input, &bn0.gamma, &bp) - objective(&input, &bn0.gamma, &bm)) / (2.0 * h);
            assert!((grad_beta[f] - fd).abs() < 1e-5, "beta grad {f}");
        }
    }

    #[test]
    fn running_variance_stays_nonnegative() {
        let mut bn = BatchNorm::new(2, 1);
        let input = Matrix::from_vec(4, 2, vec![0.0; 8]).unwrap();
        for _ in 0..100 {
            bn.forward_train(&input).unwrap();
        }
        assert!(bn.running_var.as_slice().iter().all(|&v| v >= 0.0));
    }
}
