//! The equilibrium layer: a nonnegative weight operator composed with a
//! concave activation, whose output is the unique fixed point of
//! `z = sigma(W z + x)`.
//!
//! The forward pass runs the plain fixed-point iteration with a relative-error
//! stopping rule on the whole batch. The backward pass solves the transposed
//! linear system `u = J^T u + g` by the same iteration and routes the result
//! into input and parameter gradients through the weight-norm
//! reparameterization. No acceleration schemes: the mapping class makes the
//! plain iteration converge geometrically, and the solve trace records the
//! empirical contraction factor so that claim stays observable.

use crate::activations::{activate, activate_deriv, ActivationClass, ActivationKind};
use crate::error::{Error, Result};
use crate::numeric::{
    col2im_sample, im2col_sample, matmul, matmul_tl, matmul_tr, solve_dense, ConvShape, Matrix,
    Rng, Vector,
};

/// Strict-positivity floor: softplus outputs can underflow to zero, so
/// "strictly positive" is enforced as `>= X_POSITIVITY_FLOOR`.
pub const X_POSITIVITY_FLOOR: f64 = 1e-30;

/// Largest state dimension for which the backward pass may fall back on a
/// dense direct solve.
pub const DENSE_FALLBACK_LIMIT: usize = 512;

/// Stopping rule and iteration caps for the fixed-point solves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverSettings {
    /// Relative-error tolerance: stop when `|z_next - z|_F / |z_next|_F` drops below it.
    pub tolerance: f64,
    pub max_iters: usize,
    pub backward_max_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_iters: 300,
            backward_max_iters: 300,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("solver tolerance must be > 0".into()));
        }
        if self.max_iters == 0 || self.backward_max_iters == 0 {
            return Err(Error::InvalidArgument("solver iteration caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-solve record: one relative error per iteration, plus the fitted
/// empirical contraction factor when at least four residuals exist.
#[derive(Clone, Debug)]
pub struct SolveTrace {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub rate_estimate: Option<f64>,
    pub converged: bool,
}

impl SolveTrace {
    fn new(residuals: Vec<f64>, converged: bool) -> Self {
        Self {
            iterations: residuals.len(),
            rate_estimate: estimate_rate(&residuals),
            residuals,
            converged,
        }
    }
}

/// Empirical geometric contraction factor: the least-squares slope of
/// `ln(residual)` against the iteration index, exponentiated. Values below 1
/// certify observed geometric decay; `None` when fewer than four residuals
/// are available.
pub fn estimate_rate(residuals: &[f64]) -> Option<f64> {
    if residuals.len() < 4 {
        return None;
    }
    let n = residuals.len() as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (k, &r) in residuals.iter().enumerate() {
        let x = k as f64;
        let y = r.max(1e-300).ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    Some(slope.exp())
}

/// The linear operator inside the layer: a dense square matrix or a
/// shape-preserving square convolution applied via im2col.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateShape {
    Dense { dim: usize },
    Conv(ConvShape),
}

impl StateShape {
    pub fn dim(&self) -> usize {
        match self {
            StateShape::Dense { dim } => *dim,
            StateShape::Conv(c) => c.input_len(),
        }
    }

    /// (rows, cols) of the stored weight-direction matrix.
    fn weight_dims(&self) -> (usize, usize) {
        match self {
            StateShape::Dense { dim } => (*dim, *dim),
            StateShape::Conv(c) => (c.channels, c.patch_len()),
        }
    }
}

/// A deep-equilibrium layer with nonnegative weights under weight-norm
/// reparameterization: effective row `i` is `scale[i] * v[i,:] / |v[i,:]|`.
#[derive(Clone, Debug)]
pub struct EquilibriumLayer {
    weight_v: Matrix,
    weight_scale: Vector,
    activation: ActivationKind,
    solver: SolverSettings,
    shape: StateShape,
}

impl EquilibriumLayer {
    /// Dense layer over an `n`-dimensional state.
    pub fn dense(
        weight_v: Matrix,
        weight_scale: Vector,
        activation: ActivationKind,
        solver: SolverSettings,
    ) -> Result<Self> {
        let shape = StateShape::Dense { dim: weight_v.rows() };
        Self::with_shape(weight_v, weight_scale, activation, solver, shape)
    }

    /// Convolutional layer whose state is a flattened `channels x h x w` map.
    /// The convolution must preserve the state shape (stride 1, padding
    /// `(kernel - 1) / 2`), otherwise the fixed-point equation is ill-posed.
    pub fn conv(
        kernel_v: Matrix,
        weight_scale: Vector,
        conv: ConvShape,
        activation: ActivationKind,
        solver: SolverSettings,
    ) -> Result<Self> {
        conv.validate()?;
        if conv.stride != 1 || conv.kernel != 2 * conv.padding + 1 {
            return Err(Error::InvalidArgument(format!(
                "equilibrium convolution must preserve the state shape; kernel {} stride {} padding {} does not",
                conv.kernel, conv.stride, conv.padding
            )));
        }
        Self::with_shape(kernel_v, weight_scale, activation, solver, StateShape::Conv(conv))
    }

    fn with_shape(
        weight_v: Matrix,
        weight_scale: Vector,
        activation: ActivationKind,
        solver: SolverSettings,
        shape: StateShape,
    ) -> Result<Self> {
        solver.validate()?;
        match activation.class() {
            ActivationClass::NonnegativeConcave | ActivationClass::PositiveConcave => {}
            ActivationClass::Conditioner => {
                return Err(Error::InvalidArgument(format!(
                    "{} is an input conditioner, not a layer activation",
                    activation.name()
                )))
            }
        }
        let (r, c) = shape.weight_dims();
        if weight_v.rows() != r || weight_v.cols() != c {
            return Err(Error::DimensionMismatch {
                op: "EquilibriumLayer",
                detail: format!("weight {}x{}, expected {}x{}", weight_v.rows(), weight_v.cols(), r, c),
            });
        }
        if weight_scale.len() != r {
            return Err(Error::DimensionMismatch {
                op: "EquilibriumLayer",
                detail: format!("scale length {}, expected {}", weight_scale.len(), r),
            });
        }
        if weight_v.data().iter().any(|&v| v < 0.0) || weight_scale.as_slice().iter().any(|&v| v < 0.0)
        {
            return Err(Error::Precondition(
                "equilibrium weights must be nonnegative; call project_nonnegative first".into(),
            ));
        }
        Ok(Self { weight_v, weight_scale, activation, solver, shape })
    }

    /// Random dense layer with entries uniform in `[0, 1/sqrt(dim)]` and
    /// scales set to the row norms, so the effective weight equals the drawn
    /// direction at construction.
    pub fn random_dense(
        dim: usize,
        activation: ActivationKind,
        solver: SolverSettings,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let data: Vec<f64> = (0..dim * dim).map(|_| rng.uniform(0.0, bound)).collect();
        let v = Matrix::from_vec(dim, dim, data)?;
        let scale = row_norms(&v);
        Self::dense(v, scale, activation, solver)
    }

    /// Random shape-preserving convolutional layer, same initialization
    /// scheme with fan-in `channels * kernel^2`.
    pub fn random_conv(
        conv: ConvShape,
        activation: ActivationKind,
        solver: SolverSettings,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (conv.patch_len() as f64).sqrt();
        let data: Vec<f64> =
            (0..conv.channels * conv.patch_len()).map(|_| rng.uniform(0.0, bound)).collect();
        let v = Matrix::from_vec(conv.channels, conv.patch_len(), data)?;
        let scale = row_norms(&v);
        Self::conv(v, scale, conv, activation, solver)
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn solver(&self) -> SolverSettings {
        self.solver
    }

    pub fn set_solver(&mut self, solver: SolverSettings) -> Result<()> {
        solver.validate()?;
        self.solver = solver;
        Ok(())
    }

    pub fn state_shape(&self) -> StateShape {
        self.shape
    }

    /// Dimension of the flattened per-sample state.
    pub fn state_dim(&self) -> usize {
        self.shape.dim()
    }

    pub fn weight_v(&self) -> &Matrix {
        &self.weight_v
    }

    pub fn weight_scale(&self) -> &Vector {
        &self.weight_scale
    }

    /// Direct mutable access for the optimizer; callers are responsible for
    /// re-projecting onto the nonnegative orthant afterwards.
    pub fn weight_v_mut(&mut self) -> &mut Matrix {
        &mut self.weight_v
    }

    pub fn weight_scale_mut(&mut self) -> &mut Vector {
        &mut self.weight_scale
    }

    /// Both constrained parameter tensors at once (split borrow for the
    /// optimizer).
    pub fn params_mut(&mut self) -> (&mut Matrix, &mut Vector) {
        (&mut self.weight_v, &mut self.weight_scale)
    }

    /// Clamp the constrained parameters onto the nonnegative orthant.
    /// Idempotent; called after every optimizer step.
    pub fn project_nonnegative(&mut self) {
        self.weight_v.clamp_nonnegative();
        self.weight_scale.clamp_nonnegative();
    }

    /// Effective weight under weight normalization: row `i` equals
    /// `scale[i] * v[i,:] / |v[i,:]|`; rows with zero norm map to zero rows.
    pub fn effective_weight(&self) -> Matrix {
        let mut w = self.weight_v.clone();
        for i in 0..w.rows() {
            let row = w.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let factor = if norm > 0.0 { self.weight_scale[i] / norm } else { 0.0 };
            for v in row {
                *v *= factor;
            }
        }
        w
    }

    /// Apply the linear operator to a batch (one flattened state per row).
    fn apply_linear(&self, w: &Matrix, z: &Matrix) -> Result<Matrix> {
        match self.shape {
            StateShape::Dense { .. } => matmul_tr(z, w),
            StateShape::Conv(conv) => {
                let mut out = Matrix::zeros(z.rows(), z.cols());
                let per_row = conv.channels * conv.patch_len() * conv.out_positions();
                crate::numeric::for_each_row(out.data_mut(), conv.input_len(), per_row, |s, row| {
                    let cols = im2col_sample(z.row(s), conv).expect("validated shape");
                    let pre = matmul(w, &cols).expect("validated shape");
                    row.copy_from_slice(pre.data());
                });
                Ok(out)
            }
        }
    }

    /// Apply the transposed operator, used by the adjoint iteration.
    fn apply_linear_transpose(&self, w: &Matrix, y: &Matrix) -> Result<Matrix> {
        match self.shape {
            StateShape::Dense { .. } => matmul(y, w),
            StateShape::Conv(conv) => {
                let wt = w.transpose();
                let mut out = Matrix::zeros(y.rows(), y.cols());
                let per_row = conv.channels * conv.patch_len() * conv.out_positions();
                crate::numeric::for_each_row(out.data_mut(), conv.input_len(), per_row, |s, row| {
                    let ymat = Matrix::from_vec(conv.channels, conv.out_positions(), y.row(s).to_vec())
                        .expect("validated shape");
                    let cols = matmul(&wt, &ymat).expect("validated shape");
                    let back = col2im_sample(&cols, conv).expect("validated shape");
                    row.copy_from_slice(&back);
                });
                Ok(out)
            }
        }
    }

    fn validate_batch(&self, name: &'static str, m: &Matrix) -> Result<()> {
        if m.cols() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                op: "forward_solve",
                detail: format!("{name} has {} columns, state dim is {}", m.cols(), self.state_dim()),
            });
        }
        Ok(())
    }

    fn validate_input(&self, x: &Matrix) -> Result<()> {
        self.validate_batch("x", x)?;
        match self.activation.class() {
            ActivationClass::NonnegativeConcave => {
                if x.data().iter().any(|&v| v < X_POSITIVITY_FLOOR) {
                    return Err(Error::Precondition(format!(
                        "{} layers need strictly positive input (floor {:e})",
                        self.activation.name(),
                        X_POSITIVITY_FLOOR
                    )));
                }
            }
            _ => {
                if x.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::Precondition("layer input must be nonnegative".into()));
                }
            }
        }
        Ok(())
    }

    /// A single application of the layer map `g_x(z) = sigma(W z + x)`,
    /// without iterating. Property verification probes the mapping itself.
    pub fn map_once(&self, x: &Matrix, z: &Matrix) -> Result<Matrix> {
        self.validate_input(x)?;
        self.validate_batch("z", z)?;
        let w = self.effective_weight();
        let mut out = self.apply_linear(&w, z)?;
        out.add_assign(x)?;
        out.map_inplace(|v| activate(self.activation, v));
        Ok(out)
    }

    /// Run the fixed-point iteration `z <- sigma(W z + x)` from the zero
    /// start until the whole-batch relative error drops below the tolerance.
    ///
    /// Non-convergence within the iteration cap is not an error: the trace
    /// comes back with `converged == false` and the caller decides.
    pub fn forward_solve(&self, x: &Matrix) -> Result<(Matrix, SolveTrace)> {
        let z0 = Matrix::zeros(x.rows(), x.cols());
        self.forward_solve_from(x, &z0)
    }

    /// [`forward_solve`] from an explicit nonnegative start.
    pub fn forward_solve_from(&self, x: &Matrix, z0: &Matrix) -> Result<(Matrix, SolveTrace)> {
        self.validate_input(x)?;
        self.validate_batch("z0", z0)?;
        if z0.rows() != x.rows() {
            return Err(Error::DimensionMismatch {
                op: "forward_solve",
                detail: format!("z0 has {} rows, x has {}", z0.rows(), x.rows()),
            });
        }
        if z0.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Precondition("start point must be nonnegative".into()));
        }
        let w = self.effective_weight();
        let mut z = z0.clone();
        let mut residuals = Vec::new();
        let mut converged = false;
        for _ in 0..self.solver.max_iters {
            let mut z_next = self.apply_linear(&w, &z)?;
            z_next.add_assign(x)?;
            z_next.map_inplace(|v| activate(self.activation, v));
            let res = relative_step(&z_next, &z);
            residuals.push(res);
            z = z_next;
            if res <= self.solver.tolerance {
                converged = true;
                break;
            }
        }
        Ok((z, SolveTrace::new(residuals, converged)))
    }

    /// Implicit backward pass at a converged fixed point.
    ///
    /// With `D = diag(sigma'(W z* + x))` and `J = D W`, solves
    /// `u = J^T u + grad_out` by fixed-point iteration at the forward
    /// tolerance, then reads off `grad_x = D u`, accumulates the effective
    /// weight gradient over the batch, and chain-rules it into the
    /// weight-norm direction and scale.
    ///
    /// If the iteration stalls, state dimensions up to
    /// [`DENSE_FALLBACK_LIMIT`] get a dense direct solve; larger systems
    /// surface a diagnosable error.
    pub fn backward_solve(
        &self,
        z_star: &Matrix,
        x: &Matrix,
        grad_out: &Matrix,
    ) -> Result<BackwardOutput> {
        self.validate_batch("z_star", z_star)?;
        self.validate_batch("x", x)?;
        self.validate_batch("grad_out", grad_out)?;
        let w = self.effective_weight();

        let mut deriv = self.apply_linear(&w, z_star)?;
        deriv.add_assign(x)?;
        deriv.map_inplace(|v| activate_deriv(self.activation, v));

        let mut u = Matrix::zeros(grad_out.rows(), grad_out.cols());
        let mut residuals = Vec::new();
        let mut converged = false;
        for _ in 0..self.solver.backward_max_iters {
            let mut damped = u.clone();
            hadamard_inplace(&mut damped, &deriv);
            let mut u_next = self.apply_linear_transpose(&w, &damped)?;
            u_next.add_assign(grad_out)?;
            let res = relative_step(&u_next, &u);
            residuals.push(res);
            u = u_next;
            if res <= self.solver.tolerance {
                converged = true;
                break;
            }
        }
        if !converged {
            if self.state_dim() > DENSE_FALLBACK_LIMIT {
                return Err(Error::NonConvergence(format!(
                    "adjoint iteration exhausted {} iterations (last residual {:.3e}) and state dim {} exceeds the dense fallback limit {}",
                    self.solver.backward_max_iters,
                    residuals.last().copied().unwrap_or(f64::NAN),
                    self.state_dim(),
                    DENSE_FALLBACK_LIMIT
                )));
            }
            u = self.dense_adjoint_solve(&w, &deriv, grad_out)?;
        }
        let trace = SolveTrace::new(residuals, converged);

        // a = D u; grad_x is exactly a.
        let mut routed = u;
        hadamard_inplace(&mut routed, &deriv);
        let grad_w_eff = self.weight_gradient(&routed, z_star)?;
        let (grad_v, grad_scale) = self.chain_weight_norm(&grad_w_eff);
        Ok(BackwardOutput { grad_x: routed, grad_v, grad_scale, trace })
    }

    /// Direct solve of `(I - W^T D_s) u_s = g_s` per sample.
    fn dense_adjoint_solve(&self, w: &Matrix, deriv: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
        let n = self.state_dim();
        let w_dense = self.materialize_dense(w)?;
        let mut out = Matrix::zeros(grad_out.rows(), grad_out.cols());
        for s in 0..grad_out.rows() {
            let d = deriv.row(s);
            let mut system = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let v = -w_dense.get(j, i) * d[j];
                    system.set(i, j, if i == j { 1.0 + v } else { v });
                }
            }
            let sol = solve_dense(&system, grad_out.row(s))?;
            out.row_mut(s).copy_from_slice(&sol);
        }
        Ok(out)
    }

    /// Materialize the linear operator as a dense `n x n` matrix (fallback
    /// path only; the conv operator is expanded column by column).
    fn materialize_dense(&self, w: &Matrix) -> Result<Matrix> {
        match self.shape {
            StateShape::Dense { .. } => Ok(w.clone()),
            StateShape::Conv(conv) => {
                let n = conv.input_len();
                let mut dense = Matrix::zeros(n, n);
                let mut basis = vec![0.0; n];
                for j in 0..n {
                    basis[j] = 1.0;
                    let cols = im2col_sample(&basis, conv)?;
                    let out = matmul(w, &cols)?;
                    for (i, &v) in out.data().iter().enumerate() {
                        dense.set(i, j, v);
                    }
                    basis[j] = 0.0;
                }
                Ok(dense)
            }
        }
    }

    /// Gradient of the loss with respect to the effective weight, summed
    /// over the batch.
    fn weight_gradient(&self, routed: &Matrix, z_star: &Matrix) -> Result<Matrix> {
        match self.shape {
            StateShape::Dense { .. } => matmul_tl(routed, z_star),
            StateShape::Conv(conv) => {
                let mut grad = Matrix::zeros(conv.channels, conv.patch_len());
                for s in 0..routed.rows() {
                    let a = Matrix::from_vec(conv.channels, conv.out_positions(), routed.row(s).to_vec())?;
                    let cols = im2col_sample(z_star.row(s), conv)?;
                    grad.add_assign(&matmul_tr(&a, &cols)?)?;
                }
                Ok(grad)
            }
        }
    }

    /// Chain rule through `W_i = scale_i * v_i / |v_i|`. Rows with zero norm
    /// produce zero output rows in the forward map, so their gradients are
    /// zeroed as well.
    fn chain_weight_norm(&self, grad_w: &Matrix) -> (Matrix, Vector) {
        let rows = grad_w.rows();
        let mut grad_v = Matrix::zeros(rows, grad_w.cols());
        let mut grad_scale = Vector::zeros(rows);
        for i in 0..rows {
            let v_row = self.weight_v.row(i);
            let norm = v_row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let g_row = grad_w.row(i);
            let dot: f64 = g_row.iter().zip(v_row).map(|(g, v)| g * v / norm).sum();
            grad_scale[i] = dot;
            let factor = self.weight_scale[i] / norm;
            let out = grad_v.row_mut(i);
            for ((o, &g), &v) in out.iter_mut().zip(g_row).zip(v_row) {
                *o = factor * (g - dot * v / norm);
            }
        }
        (grad_v, grad_scale)
    }

    /// Finite-`p` probe of the asymptotic mapping: `|sigma(W (p z) + x)|_2 / p`.
    /// For every admissible activation this decays like `O(1/p)`.
    pub fn asymptotic_norm(&self, z: &Vector, x: &Vector, p: f64) -> Result<f64> {
        if p < 1.0 {
            return Err(Error::InvalidArgument("asymptotic probe needs p >= 1".into()));
        }
        let n = self.state_dim();
        if z.len() != n || x.len() != n {
            return Err(Error::DimensionMismatch {
                op: "asymptotic_norm",
                detail: format!("z len {}, x len {}, state dim {}", z.len(), x.len(), n),
            });
        }
        let scaled = Matrix::from_vec(1, n, z.as_slice().iter().map(|v| v * p).collect())?;
        let w = self.effective_weight();
        let mut pre = self.apply_linear(&w, &scaled)?;
        for (v, &xv) in pre.data_mut().iter_mut().zip(x.as_slice()) {
            *v = activate(self.activation, *v + xv);
        }
        Ok(pre.frobenius_norm() / p)
    }
}

/// Gradients produced by [`EquilibriumLayer::backward_solve`].
#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub grad_x: Matrix,
    pub grad_v: Matrix,
    pub grad_scale: Vector,
    pub trace: SolveTrace,
}

fn row_norms(m: &Matrix) -> Vector {
    let mut out = Vector::zeros(m.rows());
    for i in 0..m.rows() {
        out[i] = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    out
}

fn hadamard_inplace(a: &mut Matrix, b: &Matrix) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
}

/// Whole-batch relative step `|next - prev|_F / |next|_F`, guarded against a
/// zero denominator.
fn relative_step(next: &Matrix, prev: &Matrix) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in next.data().iter().zip(prev.data()) {
        let d = a - b;
        num += d * d;
        den += a * a;
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}
