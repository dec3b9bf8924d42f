//! Numerical certification of the mapping properties the equilibrium layers
//! are designed around: order preservation, strict scalability, concavity
//! with respect to the cone order, fixed-point uniqueness from many starts,
//! asymptotic vanishing, and spectral-norm Lipschitz bounds.
//!
//! The checks are sampling-based. Strict inequalities are tested with an
//! explicit floating-point margin (1e-12 unless stated otherwise) because
//! strictness at machine precision is meaningless; every report records the
//! worst margin seen. Adversarial mappings that must fail are provided so
//! the failure path of the verifier is itself exercised.

use std::fmt;

use crate::equilibrium::EquilibriumLayer;
use crate::error::{Error, Result};
use crate::numeric::{spectral_norm_default, Matrix, Rng, Vector};

/// Margin below which a "strictly greater" comparison counts as violated.
pub const STRICT_MARGIN: f64 = 1e-12;
/// Slack for the concavity comparison (accumulated rounding across the map).
pub const CONCAVE_SLACK: f64 = 1e-10;
/// Pairwise relative distance under which two fixed points count as equal.
pub const UNIQUENESS_TOL: f64 = 1e-3;

/// Outcome of one sampled property check.
#[derive(Clone, Debug)]
pub struct PropertyReport {
    pub property: String,
    pub samples: usize,
    pub violations: usize,
    /// Worst (most adverse) margin observed; its sign convention depends on
    /// the property, but passing checks always keep it on the safe side.
    pub worst_margin: f64,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "property={} samples={} violations={} worst_margin={:.6e} verdict={}",
            self.property,
            self.samples,
            self.violations,
            self.worst_margin,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

fn exp_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.exponential()).collect()
}

/// Order preservation of an arbitrary map: `z <= z~  =>  g(z) <= g(z~)`
/// coordinatewise, sampled over ordered pairs with exponential coordinates.
pub fn check_monotone_map<F>(name: &str, map: F, dim: usize, samples: usize, rng: &mut Rng) -> PropertyReport
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let z = exp_vector(dim, rng);
        let bigger: Vec<f64> = z.iter().map(|v| v + rng.exponential()).collect();
        let gz = map(&z);
        let gb = map(&bigger);
        let margin = gb.iter().zip(&gz).map(|(b, a)| b - a).fold(f64::INFINITY, f64::min);
        worst = worst.min(margin);
        if margin < -STRICT_MARGIN {
            violations += 1;
        }
    }
    PropertyReport { property: name.into(), samples, violations, worst_margin: worst }
}

/// Strict scalability: `g(lambda z) << lambda g(z)` for every lambda > 1,
/// tested coordinatewise with the strictness margin.
pub fn check_scalable_map<F>(
    name: &str,
    map: F,
    dim: usize,
    samples: usize,
    lambdas: &[f64],
    rng: &mut Rng,
) -> PropertyReport
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    assert!(lambdas.iter().all(|&l| l > 1.0), "scalability requires lambda > 1");
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut total = 0;
    for _ in 0..samples {
        let z = exp_vector(dim, rng);
        let gz = map(&z);
        for &lambda in lambdas {
            total += 1;
            let scaled: Vec<f64> = z.iter().map(|v| v * lambda).collect();
            let gs = map(&scaled);
            let margin =
                gz.iter().zip(&gs).map(|(g, s)| lambda * g - s).fold(f64::INFINITY, f64::min);
            worst = worst.min(margin);
            if margin <= STRICT_MARGIN {
                violations += 1;
            }
        }
    }
    PropertyReport { property: name.into(), samples: total, violations, worst_margin: worst }
}

/// Concavity with respect to the cone order on random segments.
pub fn check_concave_map<F>(name: &str, map: F, dim: usize, samples: usize, rng: &mut Rng) -> PropertyReport
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let z1 = exp_vector(dim, rng);
        let z2 = exp_vector(dim, rng);
        let t = rng.next_f64().clamp(1e-6, 1.0 - 1e-6);
        let mid: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let gm = map(&mid);
        let g1 = map(&z1);
        let g2 = map(&z2);
        let margin = gm
            .iter()
            .zip(g1.iter().zip(&g2))
            .map(|(m, (a, b))| m - (t * a + (1.0 - t) * b))
            .fold(f64::INFINITY, f64::min);
        worst = worst.min(margin);
        if margin < -CONCAVE_SLACK {
            violations += 1;
        }
    }
    PropertyReport { property: name.into(), samples, violations, worst_margin: worst }
}

fn layer_map<'a>(layer: &'a EquilibriumLayer, x: &'a Matrix) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    move |z: &[f64]| {
        let zm = Matrix::from_vec(1, z.len(), z.to_vec()).expect("sized");
        layer.map_once(x, &zm).expect("valid layer input").data().to_vec()
    }
}

fn input_row(layer: &EquilibriumLayer, x: &Vector) -> Result<Matrix> {
    if x.len() != layer.state_dim() {
        return Err(Error::DimensionMismatch {
            op: "verifier",
            detail: format!("x len {}, state dim {}", x.len(), layer.state_dim()),
        });
    }
    Matrix::from_vec(1, x.len(), x.as_slice().to_vec())
}

/// [`check_monotone_map`] applied to a layer's map at input `x`.
pub fn check_monotone(
    layer: &EquilibriumLayer,
    x: &Vector,
    samples: usize,
    rng: &mut Rng,
) -> Result<PropertyReport> {
    let xm = input_row(layer, x)?;
    let name = format!("monotone-{}", layer.activation().name());
    Ok(check_monotone_map(&name, layer_map(layer, &xm), layer.state_dim(), samples, rng))
}

pub fn check_scalable(
    layer: &EquilibriumLayer,
    x: &Vector,
    samples: usize,
    lambdas: &[f64],
    rng: &mut Rng,
) -> Result<PropertyReport> {
    let xm = input_row(layer, x)?;
    let name = format!("scalable-{}", layer.activation().name());
    Ok(check_scalable_map(&name, layer_map(layer, &xm), layer.state_dim(), samples, lambdas, rng))
}

pub fn check_concave(
    layer: &EquilibriumLayer,
    x: &Vector,
    samples: usize,
    rng: &mut Rng,
) -> Result<PropertyReport> {
    let xm = input_row(layer, x)?;
    let name = format!("concave-{}", layer.activation().name());
    Ok(check_concave_map(&name, layer_map(layer, &xm), layer.state_dim(), samples, rng))
}

/// Solve the fixed point from `starts` random nonnegative initial points and
/// require every run to converge to the same point (pairwise relative
/// distance within [`UNIQUENESS_TOL`]). `worst_margin` reports the largest
/// pairwise distance.
pub fn probe_uniqueness(
    layer: &EquilibriumLayer,
    x: &Matrix,
    starts: usize,
    rng: &mut Rng,
) -> Result<PropertyReport> {
    if starts < 2 {
        return Err(Error::InvalidArgument("uniqueness probe needs at least 2 starts".into()));
    }
    let name = format!("uniqueness-{}", layer.activation().name());
    let mut fixed_points = Vec::with_capacity(starts);
    let mut violations = 0;
    for _ in 0..starts {
        let z0 = Matrix::from_vec(
            x.rows(),
            x.cols(),
            (0..x.rows() * x.cols()).map(|_| rng.exponential()).collect(),
        )?;
        let (z, trace) = layer.forward_solve_from(x, &z0)?;
        if !trace.converged {
            violations += 1;
            continue;
        }
        fixed_points.push(z);
    }
    let mut worst: f64 = 0.0;
    for i in 0..fixed_points.len() {
        for j in i + 1..fixed_points.len() {
            let a = &fixed_points[i];
            let b = &fixed_points[j];
            let mut num = 0.0;
            for (x, y) in a.data().iter().zip(b.data()) {
                num += (x - y) * (x - y);
            }
            let dist = num.sqrt() / a.frobenius_norm().max(b.frobenius_norm()).max(1e-300);
            worst = worst.max(dist);
            if dist > UNIQUENESS_TOL {
                violations += 1;
            }
        }
    }
    Ok(PropertyReport { property: name, samples: starts, violations, worst_margin: worst })
}

/// Finite-`p` certificate that the asymptotic mapping vanishes: the probe at
/// `p = 1e6` must sit under the activation ceiling divided by `p`, and
/// growing `p` a hundredfold must shrink it accordingly (allowing 2x slack).
pub fn check_asymptotic_decay(
    layer: &EquilibriumLayer,
    x: &Vector,
    samples: usize,
    rng: &mut Rng,
) -> Result<PropertyReport> {
    let name = format!("asymptotic-{}", layer.activation().name());
    let n = layer.state_dim() as f64;
    let ceiling = n.sqrt() * 6.0; // ReLU6 has the largest bound of the admissible activations
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    // A saturated ReLU6 sits exactly on the ceiling, so "<=" needs room for
    // one rounding error.
    let slack = ceiling / 1e6 * 1e-12;
    for _ in 0..samples {
        let z = Vector::from_vec(exp_vector(layer.state_dim(), rng));
        let v6 = layer.asymptotic_norm(&z, x, 1e6)?;
        let v8 = layer.asymptotic_norm(&z, x, 1e8)?;
        let bound_margin = ceiling / 1e6 - v6;
        let decay_margin = 2e-2 * v6 + 1e-300 - v8;
        let margin = bound_margin.min(decay_margin);
        worst = worst.min(margin);
        if margin < -slack {
            violations += 1;
        }
    }
    Ok(PropertyReport { property: name, samples, violations, worst_margin: worst })
}

/// Upper bound on the Lipschitz constant of a composition: the product of
/// the spectral norms of the given effective weight matrices.
pub fn lipschitz_bound(weights: &[Matrix]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("lipschitz_bound needs at least one matrix".into()));
    }
    Ok(weights.iter().map(spectral_norm_default).product())
}

/// Self-test mapping that must fail monotonicity: `z -> sigma(-W z + x)`.
pub fn adversarial_negated<'a>(
    layer: &'a EquilibriumLayer,
    x: &'a Vector,
) -> impl Fn(&[f64]) -> Vec<f64> + 'a {
    let w = layer.effective_weight();
    let act = layer.activation();
    move |z: &[f64]| {
        (0..w.rows())
            .map(|i| {
                let dot: f64 = w.row(i).iter().zip(z).map(|(a, b)| a * b).sum();
                crate::activations::activate(act, -dot + x[i])
            })
            .collect()
    }
}

/// Self-test mapping that must fail strict scalability: the identity (a
/// homogeneous map achieves equality, never strict domination).
pub fn identity_map() -> impl Fn(&[f64]) -> Vec<f64> {
    |z: &[f64]| z.to_vec()
}

/// Self-test mapping that must fail concavity: the coordinatewise square.
pub fn square_map() -> impl Fn(&[f64]) -> Vec<f64> {
    |z: &[f64]| z.iter().map(|v| v * v).collect()
}
