use super::{Matrix, Rng, Vector};

/// Default power-iteration cap.
pub const SPECTRAL_ITERS: usize = 200;
/// Default relative-change stopping tolerance.
pub const SPECTRAL_TOL: f64 = 1e-10;

/// Seed for the fixed start vector used by [`spectral_norm_default`], so that
/// logged norms are reproducible across runs without threading an Rng around.
const DEFAULT_SEED: u64 = 0x5EED_0001;

fn matvec(w: &Matrix, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = w.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn matvec_t(w: &Matrix, u: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (i, &ui) in u.iter().enumerate() {
        if ui != 0.0 {
            for (o, &wv) in out.iter_mut().zip(w.row(i)) {
                *o += ui * wv;
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value of `w`, estimated by power iteration on `w^T w`.
///
/// Stops when the estimate's relative change drops below `tol` or after
/// `iters` rounds. A zero matrix returns exactly `0.0` without iterating.
/// The start vector is drawn from `rng`, so the result is deterministic for
/// a given seed.
pub fn spectral_norm(w: &Matrix, iters: usize, tol: f64, rng: &mut Rng) -> f64 {
    if w.data().iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let (m, n) = (w.rows(), w.cols());
    let mut v: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let nv = norm(&v);
    for x in &mut v {
        *x /= nv;
    }
    let mut u = vec![0.0; m];
    let mut t = vec![0.0; n];
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        matvec(w, &v, &mut u);
        let s = norm(&u);
        if s == 0.0 {
            // Start vector landed in the null space; redraw.
            for x in &mut v {
                *x = rng.uniform(-1.0, 1.0);
            }
            let nv = norm(&v);
            for x in &mut v {
                *x /= nv;
            }
            continue;
        }
        matvec_t(w, &u, &mut t);
        let nt = norm(&t);
        for (vi, ti) in v.iter_mut().zip(&t) {
            *vi = ti / nt;
        }
        if (s - sigma).abs() <= tol * s.max(1e-300) {
            return s;
        }
        sigma = s;
    }
    sigma
}

/// [`spectral_norm`] with the default cap, tolerance, and a fixed start seed.
pub fn spectral_norm_default(w: &Matrix) -> f64 {
    spectral_norm(w, SPECTRAL_ITERS, SPECTRAL_TOL, &mut Rng::new(DEFAULT_SEED))
}

/// `‖w v‖ / ‖v‖` for an arbitrary direction; any valid spectral norm bounds
/// this from above.
pub fn rayleigh_ratio(w: &Matrix, v: &Vector) -> f64 {
    let mut u = vec![0.0; w.rows()];
    matvec(w, v.as_slice(), &mut u);
    norm(&u) / v.norm()
}
