//! Independent oracles used by the test suites.
//!
//! Everything in this module is deliberately written as plain, direct math
//! with its own tiny linear algebra, so it shares no code path with the
//! implementation it checks: brute-force kernel sums, finite differences,
//! quadrature, a Jacobi eigensolver, and a closed-form GP marginal.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::param::ParameterStore;

// ---- finite differences ------------------------------------------------------

/// Central finite-difference gradient of `f` with respect to every raw
/// (unconstrained) entry of every trainable parameter in `store`.
///
/// Returns `(name, gradient)` pairs in store order. `f` must be
/// deterministic: it is re-evaluated at perturbed parameter values.
pub fn fd_gradients(
    store: &mut ParameterStore,
    eps: f64,
    mut f: impl FnMut(&ParameterStore) -> f64,
) -> Vec<(String, Vec<f64>)> {
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let mut out = Vec::new();
    for name in names {
        let n = store.get(&name).raw.len();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = store.get(&name).raw[i];
            store.get_mut(&name).raw[i] = orig + eps;
            let fp = f(store);
            store.get_mut(&name).raw[i] = orig - eps;
            let fm = f(store);
            store.get_mut(&name).raw[i] = orig;
            grad[i] = (fp - fm) / (2.0 * eps);
        }
        out.push((name, grad));
    }
    out
}

/// Central finite differences of a scalar function of a flat value vector.
pub fn fd_gradient_values(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + eps;
        let fp = f(&xs);
        xs[i] = orig - eps;
        let fm = f(&xs);
        xs[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Relative agreement check used by the gradient suites: |a-b| scaled by
/// max(|a|, |b|, 1).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

// ---- direct kernel evaluations ------------------------------------------------

/// Squared exponential covariance, one pair of points.
pub fn se_kernel(a: &[f64], b: &[f64], variance: f64, lengthscales: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for (d, (&x, &y)) in a.iter().zip(b).enumerate() {
        let ls = lengthscales[d.min(lengthscales.len() - 1)];
        let diff = (x - y) / ls;
        r2 += diff * diff;
    }
    variance * (-0.5 * r2).exp()
}

/// Matérn-3/2 covariance, one pair of points.
pub fn matern32_kernel(a: &[f64], b: &[f64], variance: f64, lengthscales: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for (d, (&x, &y)) in a.iter().zip(b).enumerate() {
        let ls = lengthscales[d.min(lengthscales.len() - 1)];
        let diff = (x - y) / ls;
        r2 += diff * diff;
    }
    let r = r2.sqrt();
    let s = 3f64.sqrt() * r;
    variance * (1.0 + s) * (-s).exp()
}

/// All patches of one image (row-major pixels), patch upper-left corners in
/// row-major order, stride one.
pub fn patches_of(pixels: &[f64], h: usize, w: usize, ph: usize, pw: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for r in 0..=(h - ph) {
        for c in 0..=(w - pw) {
            let mut patch = Vec::with_capacity(ph * pw);
            for dr in 0..ph {
                for dc in 0..pw {
                    patch.push(pixels[(r + dr) * w + (c + dc)]);
                }
            }
            out.push(patch);
        }
    }
    out
}

/// Brute-force single-output convolutional kernel matrix: the full double
/// sum over patch pairs, with optional per-patch weights and an optional
/// patch-location kernel.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_conv_gram(
    images_a: &[Vec<f64>],
    images_b: &[Vec<f64>],
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    weights: Option<&[f64]>,
    patch_kernel: &dyn Fn(&[f64], &[f64]) -> f64,
    loc_kernel: Option<&dyn Fn(&[f64], &[f64]) -> f64>,
) -> Vec<f64> {
    let locs = patch_locations_of(h, w, ph, pw);
    let pa: Vec<Vec<Vec<f64>>> = images_a.iter().map(|im| patches_of(im, h, w, ph, pw)).collect();
    let pb: Vec<Vec<Vec<f64>>> = images_b.iter().map(|im| patches_of(im, h, w, ph, pw)).collect();
    let np = locs.len();
    let mut out = vec![0.0; images_a.len() * images_b.len()];
    for (i, pi) in pa.iter().enumerate() {
        for (j, pj) in pb.iter().enumerate() {
            let mut acc = 0.0;
            for p in 0..np {
                for q in 0..np {
                    let wp = weights.map_or(1.0, |w| w[p]);
                    let wq = weights.map_or(1.0, |w| w[q]);
                    let mut k = patch_kernel(&pi[p], &pj[q]);
                    if let Some(lk) = loc_kernel {
                        k *= lk(&locs[p], &locs[q]);
                    }
                    acc += wp * wq * k;
                }
            }
            out[i * images_b.len() + j] = acc;
        }
    }
    out
}

pub fn patch_locations_of(h: usize, w: usize, ph: usize, pw: usize) -> Vec<Vec<f64>> {
    let mut locs = Vec::new();
    for r in 0..=(h - ph) {
        for c in 0..=(w - pw) {
            locs.push(vec![r as f64, c as f64]);
        }
    }
    locs
}

// ---- tiny self-contained linear algebra ----------------------------------------

fn chol_local(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 {
            return None;
        }
        l[j * n + j] = d.sqrt();
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / l[j * n + j];
        }
    }
    Some(l)
}

fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        for j in 0..i {
            x[i] -= l[i * n + j] * x[j];
        }
        x[i] /= l[i * n + i];
    }
    x
}

/// Exact log marginal likelihood of a zero-mean GP with Gaussian noise:
/// log N(y; 0, K + σ²I).
pub fn exact_gp_log_marginal(gram: &[f64], y: &[f64], noise_variance: f64) -> f64 {
    let n = y.len();
    let mut ky = gram.to_vec();
    for i in 0..n {
        ky[i * n + i] += noise_variance;
    }
    let l = chol_local(&ky, n).expect("oracle covariance not positive definite");
    let alpha = forward_sub(&l, n, y);
    let quad: f64 = alpha.iter().map(|v| v * v).sum();
    let logdet: f64 = (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0;
    -0.5 * quad - 0.5 * logdet - 0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    // symmetrize defensively; callers pass Gram matrices
    for i in 0..n {
        for j in 0..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig
}

pub fn min_eigenvalue(a: &[f64], n: usize) -> f64 {
    symmetric_eigenvalues(a, n)[0]
}

// ---- Gaussian KL by quadrature ---------------------------------------------------

/// Log density of N(mean, cov) at x, for small dense cov (own elimination).
fn mvn_log_pdf(x: &[f64], mean: &[f64], cov: &[f64]) -> f64 {
    let n = x.len();
    let l = chol_local(cov, n).expect("oracle covariance not positive definite");
    let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let alpha = forward_sub(&l, n, &diff);
    let quad: f64 = alpha.iter().map(|v| v * v).sum();
    let logdet: f64 = (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0;
    -0.5 * quad - 0.5 * logdet - 0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln()
}

/// KL(N(mq, sq) || N(0, sp)) for 2x2 covariances by Gauss-Hermite quadrature
/// under q. Five nodes per axis integrate the quadratic integrand exactly.
pub fn gaussian_kl_quadrature_2d(mq: &[f64], sq: &[f64], sp: &[f64]) -> f64 {
    const NODES: [f64; 5] = [
        -2.020182870456085632,
        -0.9585724646138185072,
        0.0,
        0.9585724646138185072,
        2.020182870456085632,
    ];
    const WEIGHTS: [f64; 5] = [
        0.01995324205904591321,
        0.3936193231522411598,
        0.9453087204829418812,
        0.3936193231522411598,
        0.01995324205904591321,
    ];
    let lq = chol_local(sq, 2).expect("q covariance not positive definite");
    let zero = [0.0, 0.0];
    let mut acc = 0.0;
    for (i, &zi) in NODES.iter().enumerate() {
        for (j, &zj) in NODES.iter().enumerate() {
            let s2 = 2f64.sqrt();
            let x = [
                mq[0] + s2 * (lq[0] * zi),
                mq[1] + s2 * (lq[2] * zi + lq[3] * zj),
            ];
            let f = mvn_log_pdf(&x, mq, sq) - mvn_log_pdf(&x, &zero, sp);
            acc += WEIGHTS[i] * WEIGHTS[j] * f;
        }
    }
    acc / std::f64::consts::PI
}

// ---- GP sampling oracle (zero crossings) -------------------------------------------

/// Draws `draws` sample paths of a zero-mean GP with the given stationary
/// kernel on a uniform grid over [0, 1] and returns the mean and standard
/// error of the per-path count of strict sign changes.
pub fn monte_carlo_crossings(
    kernel: &dyn Fn(f64, f64) -> f64,
    grid_points: usize,
    draws: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let xs: Vec<f64> = (0..grid_points)
        .map(|i| i as f64 / (grid_points - 1) as f64)
        .collect();
    let n = grid_points;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = kernel(xs[i], xs[j]);
        }
        k[i * n + i] += 1e-10;
    }
    let l = chol_local(&k, n).expect("grid covariance not positive definite");
    let mut counts = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // f = L z
        let mut prev = 0.0f64;
        let mut count = 0usize;
        for i in 0..n {
            let mut fi = 0.0;
            for j in 0..=i {
                fi += l[i * n + j] * z[j];
            }
            if i > 0 && prev * fi < 0.0 {
                count += 1;
            }
            prev = fi;
        }
        counts.push(count as f64);
    }
    let mean = counts.iter().sum::<f64>() / draws as f64;
    let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (draws as f64 - 1.0);
    (mean, (var / draws as f64).sqrt())
}

// ---- simple statistics ----------------------------------------------------------

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let eig = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((eig[0] - 1.0).abs() < 1e-12);
        assert!((eig[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_kl_matches_closed_form_diagonal_case() {
        let mq = [0.3, -0.2];
        let sq = [0.5, 0.0, 0.0, 1.5];
        let sp = [1.0, 0.0, 0.0, 1.0];
        let quad = gaussian_kl_quadrature_2d(&mq, &sq, &sp);
        let closed = 0.5
            * ((0.5f64 + 1.5) + (0.3f64 * 0.3 + 0.2 * 0.2) - 2.0 - (0.5f64.ln() + 1.5f64.ln()));
        assert!((quad - closed).abs() < 1e-10, "quad {quad} vs closed {closed}");
    }

    #[test]
    fn exact_marginal_matches_direct_1d() {
        // N(y; 0, k+s) in one dimension
        let lm = exact_gp_log_marginal(&[2.0], &[0.7], 0.5);
        let var: f64 = 2.5;
        let direct = -0.5 * (0.7f64 * 0.7) / var
            - 0.5 * var.ln()
            - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lm - direct).abs() < 1e-12);
    }

    #[test]
    fn fd_gradient_of_quadratic() {
        let g = fd_gradient_values(&[1.0, 2.0], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn crossings_oracle_sees_more_crossings_for_shorter_lengthscales() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let k_long = |a: f64, b: f64| se_kernel(&[a], &[b], 1.0, &[0.5]);
        let (m_long, _) = monte_carlo_crossings(&k_long, 200, 50, &mut rng);
        let k_short = |a: f64, b: f64| se_kernel(&[a], &[b], 1.0, &[0.05]);
        let (m_short, _) = monte_carlo_crossings(&k_short, 200, 50, &mut rng);
        assert!(m_short > m_long);
    }
}
