//! Network assembly and training for the two single-equilibrium-layer
//! architectures: a linear stem (`L`) and a convolutional stem (`SC`).
//!
//! Both wrap the equilibrium layer in the same sandwich: explicit stem,
//! batch norm plus input conditioner (softplus for variant 1, ReLU for
//! variant 2), the equilibrium layer, batch norm (after max pooling in the
//! convolutional case), then an explicit affine head. Only the equilibrium
//! layer carries the nonnegativity constraint; the explicit layers are
//! unconstrained.

mod batchnorm;
mod checkpoint;
mod layers;
mod optimizer;
mod train;

pub use batchnorm::{BatchNorm, BnCache};
pub use checkpoint::{checkpoint_load, checkpoint_save};
pub use layers::{AvgPool, ConvStem, Dense, MaxPool};
pub use optimizer::AdamWState;
pub use train::{cross_entropy, diagnose, evaluate, train, BatchDiagnostics, EpochStats, TrainConfig, TrainingLog};

use crate::activations::{activate, activate_deriv, ActivationClass, ActivationKind};
use crate::equilibrium::{EquilibriumLayer, SolveTrace, SolverSettings, X_POSITIVITY_FLOOR};
use crate::error::{Error, Result};
use crate::numeric::{ConvShape, Matrix, Rng, Vector};

/// Which sufficient condition the equilibrium layer satisfies: variant 1
/// pairs a nonnegative-concave activation with strictly positive input,
/// variant 2 pairs the positive-concave activation with nonnegative input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    One,
    Two,
}

impl Variant {
    pub fn conditioner(self) -> ActivationKind {
        match self {
            Variant::One => ActivationKind::Softplus,
            Variant::Two => ActivationKind::ReLU,
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Variant::One => 1,
            Variant::Two => 2,
        }
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            1 => Some(Variant::One),
            2 => Some(Variant::Two),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputShape {
    Features(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Features(n) => n,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }
}

/// Everything needed to rebuild a network skeleton (checkpoints store this
/// alongside the tensors).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchDescriptor {
    pub variant: Variant,
    pub convolutional: bool,
    pub activation: ActivationKind,
    pub channels: usize,
    pub classes: usize,
    pub input: InputShape,
    pub solver: SolverSettings,
}

#[derive(Clone, Debug)]
enum Stem {
    Dense(Dense),
    Conv(ConvStem),
}

/// A trainable network with a single equilibrium layer at its core.
#[derive(Clone, Debug)]
pub struct Network {
    desc: ArchDescriptor,
    stem: Stem,
    pre_bn: BatchNorm,
    deq: EquilibriumLayer,
    max_pool: Option<MaxPool>,
    post_bn: BatchNorm,
    avg_pool: Option<AvgPool>,
    head: Dense,
}

/// Per-parameter gradients in the network's canonical slot order.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub stem_weight: Matrix,
    pub stem_bias: Vector,
    pub pre_gamma: Vector,
    pub pre_beta: Vector,
    pub deq_v: Matrix,
    pub deq_scale: Vector,
    pub post_gamma: Vector,
    pub post_beta: Vector,
    pub head_weight: Matrix,
    pub head_bias: Vector,
}

/// Intermediates from a training-mode forward pass.
pub struct ForwardCache {
    input: Matrix,
    pre_bn_cache: BnCache,
    cond_in: Matrix,
    deq_x: Matrix,
    pub z_star: Matrix,
    pub fwd_trace: SolveTrace,
    max_argmax: Option<Vec<u32>>,
    post_bn_cache: BnCache,
    head_in: Matrix,
}

/// Build the single-linear-equilibrium-layer architecture:
/// `Linear -> BN + conditioner -> equilibrium -> BN -> Linear`.
pub fn build_pcdeq_l(
    variant: Variant,
    activation: ActivationKind,
    channels: usize,
    input: InputShape,
    classes: usize,
    solver: SolverSettings,
    rng: &mut Rng,
) -> Result<Network> {
    Network::build(
        ArchDescriptor { variant, convolutional: false, activation, channels, classes, input, solver },
        rng,
    )
}

/// Build the single-convolutional-equilibrium-layer architecture:
/// `Conv -> BN + conditioner -> equilibrium conv -> MaxPool + BN -> AvgPool -> Linear`.
pub fn build_pcdeq_sc(
    variant: Variant,
    activation: ActivationKind,
    channels: usize,
    input: InputShape,
    classes: usize,
    solver: SolverSettings,
    rng: &mut Rng,
) -> Result<Network> {
    Network::build(
        ArchDescriptor { variant, convolutional: true, activation, channels, classes, input, solver },
        rng,
    )
}

fn check_variant(variant: Variant, activation: ActivationKind) -> Result<()> {
    let ok = match variant {
        Variant::One => activation.class() == ActivationClass::NonnegativeConcave,
        Variant::Two => activation.class() == ActivationClass::PositiveConcave,
    };
    if !ok {
        return Err(Error::Config(format!(
            "variant {} cannot use {}: variant 1 takes a nonnegative-concave activation, variant 2 the positive-concave one",
            variant.index(),
            activation.name()
        )));
    }
    Ok(())
}

impl Network {
    pub fn build(desc: ArchDescriptor, rng: &mut Rng) -> Result<Network> {
        check_variant(desc.variant, desc.activation)?;
        if desc.channels == 0 || desc.classes == 0 {
            return Err(Error::Config("channels and classes must be >= 1".into()));
        }
        desc.solver.validate()?;
        if desc.convolutional {
            let (in_c, h, w) = match desc.input {
                InputShape::Image { channels, height, width } => (channels, height, width),
                InputShape::Features(_) => {
                    return Err(Error::Config("convolutional architecture needs an image input shape".into()))
                }
            };
            let stem_shape =
                ConvShape { channels: in_c, height: h, width: w, kernel: 3, stride: 1, padding: 1 };
            let stem = ConvStem::init(desc.channels, stem_shape, rng)?;
            let deq_shape =
                ConvShape { channels: desc.channels, height: h, width: w, kernel: 3, stride: 1, padding: 1 };
            let deq = EquilibriumLayer::random_conv(deq_shape, desc.activation, desc.solver, rng)?;
            let max_pool = MaxPool { channels: desc.channels, height: h, width: w, kernel: 3, stride: 1, padding: 1 };
            let avg_pool = AvgPool { channels: desc.channels, height: h, width: w, kernel: 8.min(h).min(w) };
            let head = Dense::init(desc.classes, avg_pool.out_len(), rng);
            Ok(Network {
                desc,
                stem: Stem::Conv(stem),
                pre_bn: BatchNorm::new(desc.channels, h * w),
                deq,
                max_pool: Some(max_pool),
                post_bn: BatchNorm::new(desc.channels, h * w),
                avg_pool: Some(avg_pool),
                head,
            })
        } else {
            let in_features = desc.input.len();
            let stem = Dense::init(desc.channels, in_features, rng);
            let deq = EquilibriumLayer::random_dense(desc.channels, desc.activation, desc.solver, rng)?;
            let head = Dense::init(desc.classes, desc.channels, rng);
            Ok(Network {
                desc,
                stem: Stem::Dense(stem),
                pre_bn: BatchNorm::new(desc.channels, 1),
                deq,
                max_pool: None,
                post_bn: BatchNorm::new(desc.channels, 1),
                avg_pool: None,
                head,
            })
        }
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        self.desc
    }

    pub fn equilibrium(&self) -> &EquilibriumLayer {
        &self.deq
    }

    pub fn set_solver(&mut self, solver: SolverSettings) -> Result<()> {
        self.deq.set_solver(solver)?;
        self.desc.solver = solver;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_specs().iter().filter(|t| t.param).map(|t| t.len).sum()
    }

    /// Apply the input conditioner to the pre-normalized stem output. The
    /// softplus path floors its output so the strict-positivity requirement
    /// survives underflow.
    fn condition(&self, pre: &Matrix) -> Matrix {
        let kind = self.desc.variant.conditioner();
        match self.desc.variant {
            Variant::One => pre.map(|v| activate(kind, v).max(X_POSITIVITY_FLOOR)),
            Variant::Two => pre.map(|v| activate(kind, v)),
        }
    }

    fn stem_forward(&self, input: &Matrix) -> Result<Matrix> {
        match &self.stem {
            Stem::Dense(d) => d.forward(input),
            Stem::Conv(c) => c.forward(input),
        }
    }

    /// Training-mode forward pass; updates batch-norm running statistics.
    pub fn forward_train(&mut self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let stem_out = self.stem_forward(input)?;
        let (cond_in, pre_bn_cache) = self.pre_bn.forward_train(&stem_out)?;
        let deq_x = self.condition(&cond_in);
        let (z_star, fwd_trace) = self.deq.forward_solve(&deq_x)?;
        let (pooled, max_argmax) = match &self.max_pool {
            Some(mp) => {
                let (p, arg) = mp.forward(&z_star)?;
                (p, Some(arg))
            }
            None => (z_star.clone(), None),
        };
        let (bn_out, post_bn_cache) = self.post_bn.forward_train(&pooled)?;
        let head_in = match &self.avg_pool {
            Some(ap) => ap.forward(&bn_out)?,
            None => bn_out,
        };
        let logits = self.head.forward(&head_in)?;
        Ok((
            logits,
            ForwardCache {
                input: input.clone(),
                pre_bn_cache,
                cond_in,
                deq_x,
                z_star,
                fwd_trace,
                max_argmax,
                post_bn_cache,
                head_in,
            },
        ))
    }

    /// Inference-mode forward pass using batch-norm running statistics.
    pub fn forward_eval(&self, input: &Matrix) -> Result<Matrix> {
        let stem_out = self.stem_forward(input)?;
        let cond_in = self.pre_bn.forward_eval(&stem_out)?;
        let deq_x = self.condition(&cond_in);
        let (z_star, _) = self.deq.forward_solve(&deq_x)?;
        let pooled = match &self.max_pool {
            Some(mp) => mp.forward(&z_star)?.0,
            None => z_star,
        };
        let bn_out = self.post_bn.forward_eval(&pooled)?;
        let head_in = match &self.avg_pool {
            Some(ap) => ap.forward(&bn_out)?,
            None => bn_out,
        };
        self.head.forward(&head_in)
    }

    /// Backward pass from the logits gradient; returns parameter gradients
    /// and the adjoint solve trace.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<(Gradients, SolveTrace)> {
        let (d_head_in, head_weight, head_bias) = self.head.backward(&cache.head_in, grad_logits)?;
        let d_bn_out = match &self.avg_pool {
            Some(ap) => ap.backward(&d_head_in),
            None => d_head_in,
        };
        let (d_pooled, post_gamma, post_beta) = self.post_bn.backward(&cache.post_bn_cache, &d_bn_out)?;
        let d_z = match (&self.max_pool, &cache.max_argmax) {
            (Some(mp), Some(arg)) => mp.backward(arg, &d_pooled),
            _ => d_pooled,
        };
        let adj = self.deq.backward_solve(&cache.z_star, &cache.deq_x, &d_z)?;
        let cond = self.desc.variant.conditioner();
        let mut d_cond_in = adj.grad_x;
        for (g, &pre) in d_cond_in.data_mut().iter_mut().zip(cache.cond_in.data()) {
            *g *= activate_deriv(cond, pre);
        }
        let (d_stem_out, pre_gamma, pre_beta) = self.pre_bn.backward(&cache.pre_bn_cache, &d_cond_in)?;
        let (stem_weight, stem_bias) = match &self.stem {
            Stem::Dense(d) => {
                let (_, w, b) = d.backward(&cache.input, &d_stem_out)?;
                (w, b)
            }
            Stem::Conv(c) => c.backward(&cache.input, &d_stem_out)?,
        };
        Ok((
            Gradients {
                stem_weight,
                stem_bias,
                pre_gamma,
                pre_beta,
                deq_v: adj.grad_v,
                deq_scale: adj.grad_scale,
                post_gamma,
                post_beta,
                head_weight,
                head_bias,
            },
            adj.trace,
        ))
    }

    /// One optimizer step followed by projection of the constrained
    /// parameters onto the nonnegative orthant.
    pub fn optimizer_step(
        &mut self,
        state: &mut AdamWState,
        grads: &Gradients,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let grad_slices: Vec<&[f64]> = vec![
            grads.stem_weight.data(),
            grads.stem_bias.as_slice(),
            grads.pre_gamma.as_slice(),
            grads.pre_beta.as_slice(),
            grads.deq_v.data(),
            grads.deq_scale.as_slice(),
            grads.post_gamma.as_slice(),
            grads.post_beta.as_slice(),
            grads.head_weight.data(),
            grads.head_bias.as_slice(),
        ];
        {
            let (deq_v, deq_scale) = self.deq.params_mut();
            let mut params: Vec<&mut [f64]> = Vec::with_capacity(10);
            match &mut self.stem {
                Stem::Dense(d) => {
                    params.push(d.weight.data_mut());
                    params.push(d.bias.as_mut_slice());
                }
                Stem::Conv(c) => {
                    params.push(c.kernel.data_mut());
                    params.push(c.bias.as_mut_slice());
                }
            }
            params.push(self.pre_bn.gamma.as_mut_slice());
            params.push(self.pre_bn.beta.as_mut_slice());
            params.push(deq_v.data_mut());
            params.push(deq_scale.as_mut_slice());
            params.push(self.post_bn.gamma.as_mut_slice());
            params.push(self.post_bn.beta.as_mut_slice());
            params.push(self.head.weight.data_mut());
            params.push(self.head.bias.as_mut_slice());
            state.step(&mut params, &grad_slices, lr, weight_decay)?;
        }
        self.deq.project_nonnegative();
        Ok(())
    }

    pub fn optimizer_state(&self) -> AdamWState {
        AdamWState::new(&self.tensor_specs().iter().filter(|t| t.param).map(|t| t.len).collect::<Vec<_>>())
    }

    fn tensor_specs(&self) -> Vec<TensorSpec> {
        let (stem_rows, stem_cols, stem_bias) = match &self.stem {
            Stem::Dense(d) => (d.weight.rows(), d.weight.cols(), d.bias.len()),
            Stem::Conv(c) => (c.kernel.rows(), c.kernel.cols(), c.bias.len()),
        };
        let f1 = self.pre_bn.features();
        let f2 = self.post_bn.features();
        vec![
            TensorSpec::new("stem.weight", stem_rows, stem_cols, true),
            TensorSpec::new("stem.bias", 1, stem_bias, true),
            TensorSpec::new("pre_bn.gamma", 1, f1, true),
            TensorSpec::new("pre_bn.beta", 1, f1, true),
            TensorSpec::new("pre_bn.running_mean", 1, f1, false),
            TensorSpec::new("pre_bn.running_var", 1, f1, false),
            TensorSpec::new("deq.weight_v", self.deq.weight_v().rows(), self.deq.weight_v().cols(), true),
            TensorSpec::new("deq.weight_scale", 1, self.deq.weight_scale().len(), true),
            TensorSpec::new("post_bn.gamma", 1, f2, true),
            TensorSpec::new("post_bn.beta", 1, f2, true),
            TensorSpec::new("post_bn.running_mean", 1, f2, false),
            TensorSpec::new("post_bn.running_var", 1, f2, false),
            TensorSpec::new("head.weight", self.head.weight.rows(), self.head.weight.cols(), true),
            TensorSpec::new("head.bias", 1, self.head.bias.len(), true),
        ]
    }

    /// All persistent tensors (parameters plus batch-norm running statistics)
    /// in checkpoint order. The two traversals below must stay in sync with
    /// `tensor_specs`.
    pub(crate) fn tensor_data(&self) -> Vec<(TensorSpec, &[f64])> {
        let stem: [&[f64]; 2] = match &self.stem {
            Stem::Dense(d) => [d.weight.data(), d.bias.as_slice()],
            Stem::Conv(c) => [c.kernel.data(), c.bias.as_slice()],
        };
        let data: Vec<&[f64]> = vec![
            stem[0],
            stem[1],
            self.pre_bn.gamma.as_slice(),
            self.pre_bn.beta.as_slice(),
            self.pre_bn.running_mean.as_slice(),
            self.pre_bn.running_var.as_slice(),
            self.deq.weight_v().data(),
            self.deq.weight_scale().as_slice(),
            self.post_bn.gamma.as_slice(),
            self.post_bn.beta.as_slice(),
            self.post_bn.running_mean.as_slice(),
            self.post_bn.running_var.as_slice(),
            self.head.weight.data(),
            self.head.bias.as_slice(),
        ];
        self.tensor_specs().into_iter().zip(data).collect()
    }

    pub(crate) fn tensor_data_mut(&mut self) -> Vec<(TensorSpec, &mut [f64])> {
        let specs = self.tensor_specs();
        let (deq_v, deq_scale) = self.deq.params_mut();
        let stem: [&mut [f64]; 2] = match &mut self.stem {
            Stem::Dense(d) => [d.weight.data_mut(), d.bias.as_mut_slice()],
            Stem::Conv(c) => [c.kernel.data_mut(), c.bias.as_mut_slice()],
        };
        let [stem_w, stem_b] = stem;
        let data: Vec<&mut [f64]> = vec![
            stem_w,
            stem_b,
            self.pre_bn.gamma.as_mut_slice(),
            self.pre_bn.beta.as_mut_slice(),
            self.pre_bn.running_mean.as_mut_slice(),
            self.pre_bn.running_var.as_mut_slice(),
            deq_v.data_mut(),
            deq_scale.as_mut_slice(),
            self.post_bn.gamma.as_mut_slice(),
            self.post_bn.beta.as_mut_slice(),
            self.post_bn.running_mean.as_mut_slice(),
            self.post_bn.running_var.as_mut_slice(),
            self.head.weight.data_mut(),
            self.head.bias.as_mut_slice(),
        ];
        specs.into_iter().zip(data).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct TensorSpec {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub len: usize,
    /// Trainable parameter (false for running statistics).
    pub param: bool,
}

impl TensorSpec {
    fn new(name: &'static str, rows: usize, cols: usize, param: bool) -> Self {
        Self { name, rows, cols, len: rows * cols, param }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ActivationKind::*;

    fn mnist_input() -> InputShape {
        InputShape::Image { channels: 1, height: 28, width: 28 }
    }

    #[test]
    fn linear_architecture_parameter_count_matches_published_size() {
        let mut rng = Rng::new(1);
        let net = build_pcdeq_l(
            Variant::One,
            Tanh,
            80,
            InputShape::Features(784),
            10,
            SolverSettings::default(),
            &mut rng,
        )
        .unwrap();
        // 784*80 + 80 stem, 80*80 + 80 equilibrium, 4*80 batch norm, 80*10 + 10 head.
        assert_eq!(net.parameter_count(), 70_410);
        assert!((net.parameter_count() as f64 - 70_000.0).abs() < 1_000.0);
    }

    #[test]
    fn conv_architecture_parameter_count_matches_published_size() {
        let mut rng = Rng::new(2);
        let net = build_pcdeq_sc(
            Variant::One,
            ReLU6,
            82,
            mnist_input(),
            10,
            SolverSettings::default(),
            &mut rng,
        )
        .unwrap();
        // 82*9+82 stem, 82*82*9+82 equilibrium, 4*82 batch norm, 738*10+10 head.
        let count = net.parameter_count();
        assert!((count as f64 - 69_000.0).abs() < 1_000.0, "count {count}");
    }

    #[test]
    fn variant_two_requires_positive_concave_activation() {
        let mut rng = Rng::new(3);
        let err = build_pcdeq_l(
            Variant::Two,
            Tanh,
            8,
            InputShape::Features(16),
            4,
            SolverSettings::default(),
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(build_pcdeq_l(
            Variant::Two,
            Sigmoid,
            8,
            InputShape::Features(16),
            4,
            SolverSettings::default(),
            &mut rng,
        )
        .is_ok());
        // Variant 1 with sigmoid is also a mismatch.
        assert!(build_pcdeq_l(
            Variant::One,
            Sigmoid,
            8,
            InputShape::Features(16),
            4,
            SolverSettings::default(),
            &mut rng,
        )
        .is_err());
    }

    #[test]
    fn tiny_conv_network_propagates_shapes() {
        let mut rng = Rng::new(4);
        let mut net = build_pcdeq_sc(
            Variant::One,
            Tanh,
            8,
            InputShape::Image { channels: 1, height: 10, width: 10 },
            10,
            SolverSettings::default(),
            &mut rng,
        )
        .unwrap();
        let x = Matrix::from_vec(3, 100, (0..300).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let (logits, cache) = net.forward_train(&x).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (3, 10));
        assert!(cache.fwd_trace.converged);
        let eval_logits = net.forward_eval(&x).unwrap();
        assert_eq!((eval_logits.rows(), eval_logits.cols()), (3, 10));
    }

    #[test]
    fn constrained_parameters_stay_nonnegative_after_steps() {
        let mut rng = Rng::new(5);
        let mut net = build_pcdeq_l(
            Variant::Two,
            Sigmoid,
            6,
            InputShape::Features(12),
            3,
            SolverSettings::default(),
            &mut rng,
        )
        .unwrap();
        let mut opt = net.optimizer_state();
        let x = Matrix::from_vec(8, 12, (0..96).map(|_| rng.normal()).collect()).unwrap();
        let labels: Vec<u8> = (0..8).map(|i| (i % 3) as u8).collect();
        for _ in 0..5 {
            let (logits, cache) = net.forward_train(&x).unwrap();
            let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
            let (grads, _) = net.backward(&cache, &dlogits).unwrap();
            net.optimizer_step(&mut opt, &grads, 0.05, 0.01).unwrap();
            assert!(net.equilibrium().weight_v().data().iter().all(|&v| v >= 0.0));
            assert!(net.equilibrium().weight_scale().as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // Freeze batch-norm statistics out of the picture by checking the
        // whole loss through training-mode forward on a fixed batch.
        let mut rng = Rng::new(6);
        let net = build_pcdeq_l(
            Variant::One,
            Softsign,
            5,
            InputShape::Features(7),
            3,
            SolverSettings { tolerance: 1e-12, max_iters: 5_000, backward_max_iters: 5_000 },
            &mut rng,
        )
        .unwrap();
        let x = Matrix::from_vec(4, 7, (0..28).map(|_| rng.normal()).collect()).unwrap();
        let labels = vec![0u8, 1, 2, 1];
        let loss_of = |n: &Network| -> f64 {
            let mut n = n.clone();
            let (logits, _) = n.forward_train(&x).unwrap();
            cross_entropy(&logits, &labels).unwrap().0
        };
        let mut work = net.clone();
        let (logits, cache) = work.forward_train(&x).unwrap();
        let (_, dlogits) = cross_entropy(&logits, &labels).unwrap();
        let (grads, _) = work.backward(&cache, &dlogits).unwrap();
        let h = 1e-6;

        // Spot-check a few coordinates from distinct parameter tensors.
        let mut p = net.clone();
        if let Stem::Dense(d) = &mut p.stem {
            d.weight.data_mut()[3] += h;
        }
        let mut m = net.clone();
        if let Stem::Dense(d) = &mut m.stem {
            d.weight.data_mut()[3] -= h;
        }
        let fd = (loss_of(&p) - loss_of(&m)) / (2.0 * h);
        assert!((grads.stem_weight.data()[3] - fd).abs() < 1e-5, "stem: {fd} vs {}", grads.stem_weight.data()[3]);

        let mut p = net.clone();
        p.deq.params_mut().0.data_mut()[7] += h;
        let mut m = net.clone();
        m.deq.params_mut().0.data_mut()[7] -= h;
        let fd = (loss_of(&p) - loss_of(&m)) / (2.0 * h);
        assert!((grads.deq_v.data()[7] - fd).abs() < 1e-5, "deq_v: {fd} vs {}", grads.deq_v.data()[7]);

        let mut p = net.clone();
        p.pre_bn.gamma[2] += h;
        let mut m = net.clone();
        m.pre_bn.gamma[2] -= h;
        let fd = (loss_of(&p) - loss_of(&m)) / (2.0 * h);
        assert!((grads.pre_gamma[2] - fd).abs() < 1e-5, "pre_gamma: {fd} vs {}", grads.pre_gamma[2]);

        let mut p = net.clone();
        p.head.bias[1] += h;
        let mut m = net.clone();
        m.head.bias[1] -= h;
        let fd = (loss_of(&p) - loss_of(&m)) / (2.0 * h);
        assert!((grads.head_bias[1] - fd).abs() < 1e-5, "head_bias: {fd} vs {}", grads.head_bias[1]);
    }
}
