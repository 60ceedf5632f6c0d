//! One-dimensional quadrature rules underlying the velocity and Fourier
//! discretizations: Gauss–Hermite (for Maxwellian-weighted axes), Gauss–
//! Legendre (finite intervals), and the periodic trapezoid rule.
//!
//! Gauss rules are generated by the Golub–Welsch algorithm: nodes are the
//! eigenvalues of the symmetric Jacobi matrix of the orthogonal-polynomial
//! recurrence and weights come from the first components of its eigenvectors.

use ndarray::{Array1, Array2};
use ndarray_linalg::Eigh;
use ndarray_linalg::UPLO;

/// Nodes and weights of a 1-D quadrature rule.
#[derive(Debug, Clone)]
pub struct Rule1d {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

impl Rule1d {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Apply the rule to a function.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.x.iter().zip(&self.w).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Nodes/weights from a symmetric tridiagonal Jacobi matrix with zero
/// diagonal and off-diagonal `beta`, weights scaled by `mu0` (the total mass
/// of the weight function).
fn golub_welsch(beta: &[f64], mu0: f64) -> Rule1d {
    crate::init_single_thread_blas();
    let n = beta.len() + 1;
    let mut jac = Array2::<f64>::zeros((n, n));
    for (k, &b) in beta.iter().enumerate() {
        jac[[k, k + 1]] = b;
        jac[[k + 1, k]] = b;
    }
    let (vals, vecs) = jac.eigh(UPLO::Lower).expect("Jacobi matrix eigensolve");
    let mut x: Vec<f64> = vals.to_vec();
    let mut w: Vec<f64> = (0..n).map(|j| mu0 * vecs[[0, j]] * vecs[[0, j]]).collect();
    // eigh returns ascending eigenvalues already; keep the pairing explicit
    // in case the backend changes ordering.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    x = idx.iter().map(|&i| x[i]).collect();
    w = idx.iter().map(|&i| w[i]).collect();
    Rule1d { x, w }
}

/// Enforce exact ± symmetry on a rule whose nodes are symmetric in exact
/// arithmetic. Mirror-paired nodes and weights are averaged so that
/// `x[i] = -x[n-1-i]` and `w[i] = w[n-1-i]` hold bitwise; parity arguments
/// downstream (odd moments vanishing, mirror-image assembly) then hold
/// exactly rather than to roundoff.
fn symmetrize(rule: &mut Rule1d) {
    let n = rule.x.len();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (rule.x[j] - rule.x[i]);
        rule.x[j] = x;
        rule.x[i] = -x;
        let w = 0.5 * (rule.w[i] + rule.w[j]);
        rule.w[i] = w;
        rule.w[j] = w;
    }
    if n % 2 == 1 {
        rule.x[n / 2] = 0.0;
    }
}

/// Gauss–Hermite rule for the weight `e^{-y²}` on the real line (physicists'
/// convention): exact on polynomials of degree `2n-1`.
pub fn gauss_hermite(n: usize) -> Rule1d {
    assert!(n >= 1, "Hermite rule needs at least one node");
    let beta: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    let mu0 = std::f64::consts::PI.sqrt();
    let mut rule = golub_welsch(&beta, mu0);
    symmetrize(&mut rule);
    rule
}

/// Velocity-axis rule: rescales Gauss–Hermite to the standard-Maxwellian
/// weight, returning nodes `x = √2·y` and open weights `w = √2·w_GH·e^{y²}`
/// so that `Σ w_i g(x_i) ≈ ∫ g(x) dx` for integrands `g` decaying like
/// `e^{-x²/2}` times a polynomial.
pub fn velocity_axis(n: usize) -> Rule1d {
    let gh = gauss_hermite(n);
    let sqrt2 = std::f64::consts::SQRT_2;
    let x: Vec<f64> = gh.x.iter().map(|&y| sqrt2 * y).collect();
    let w: Vec<f64> = gh
        .x
        .iter()
        .zip(&gh.w)
        .map(|(&y, &w)| sqrt2 * w * (y * y).exp())
        .collect();
    let mut rule = Rule1d { x, w };
    symmetrize(&mut rule);
    rule
}

/// Gauss–Legendre rule on `[a, b]`: exact on polynomials of degree `2n-1`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Rule1d {
    assert!(n >= 1 && b > a, "Legendre rule needs n >= 1 and b > a");
    let beta: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    let mut rule = golub_welsch(&beta, 2.0);
    symmetrize(&mut rule);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    for i in 0..rule.x.len() {
        rule.x[i] = mid + half * rule.x[i];
        rule.w[i] *= half;
    }
    Rule1d {
        x: rule.x,
        w: rule.w,
    }
}

/// Uniform rule for periodic integrands on `[0, period)`: the trapezoid rule,
/// spectrally accurate (exact for trigonometric polynomials of degree < n).
pub fn trapezoid_periodic(n: usize, period: f64) -> Rule1d {
    let h = period / n as f64;
    Rule1d {
        x: (0..n).map(|k| k as f64 * h).collect(),
        w: vec![h; n],
    }
}

/// Geometric grid of `n` points spanning `[a, b]`, inclusive.
pub fn geometric_grid(n: usize, a: f64, b: f64) -> Vec<f64> {
    assert!(n >= 2 && a > 0.0 && b > a, "geometric grid needs 0 < a < b");
    let r = (b / a).powf(1.0 / (n - 1) as f64);
    (0..n).map(|k| a * r.powi(k as i32)).collect()
}

/// Tensor product of three copies of a 1-D rule: nodes as an `(n³, 3)` array
/// in row-major axis order, weights as the product weights.
pub fn tensor3(rule: &Rule1d) -> (Array2<f64>, Array1<f64>) {
    let n = rule.len();
    let nv = n * n * n;
    let mut nodes = Array2::<f64>::zeros((nv, 3));
    let mut weights = Array1::<f64>::zeros(nv);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let r = (i * n + j) * n + k;
                nodes[[r, 0]] = rule.x[i];
                nodes[[r, 1]] = rule.x[j];
                nodes[[r, 2]] = rule.x[k];
                weights[r] = rule.w[i] * rule.w[j] * rule.w[k];
            }
        }
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQRT_2PI: f64 = 2.5066282746310002;

    /// Quadrature-exactness tolerance: Gauss rules hit polynomial moments at
    /// machine precision; 1e-12 absorbs accumulation over ≤ 64 nodes.
    const EXACT_TOL: f64 = 1e-12;

    #[test]
    fn hermite_polynomial_moments() {
        // Oracle: ∫ y^{2k} e^{-y²} dy = Γ(k+1/2) = √π·(2k-1)!!/2^k.
        let rule = gauss_hermite(8);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut expected = sqrt_pi;
        let mut double_fact = 1.0;
        for k in 0..8 {
            if k > 0 {
                double_fact *= (2 * k - 1) as f64;
                expected = sqrt_pi * double_fact / 2f64.powi(k as i32);
            }
            let got = rule.integrate(|y| y.powi(2 * k as i32));
            assert!(
                (got - expected).abs() <= EXACT_TOL * expected.max(1.0),
                "moment 2k={}: got {got}, expected {expected}",
                2 * k
            );
        }
    }

    #[test]
    fn hermite_nodes_are_symmetric() {
        for n in [7, 8, 12, 16] {
            let rule = gauss_hermite(n);
            for i in 0..n {
                assert_eq!(rule.x[i], -rule.x[n - 1 - i], "node symmetry at n={n}");
                assert_eq!(rule.w[i], rule.w[n - 1 - i], "weight symmetry at n={n}");
            }
        }
    }

    #[test]
    fn velocity_axis_gaussian_moments() {
        // Oracle: ∫ x^{2k} e^{-x²/2} dx = √(2π)·(2k-1)!!.
        let rule = velocity_axis(8);
        let m = |k: i32| rule.integrate(|x| x.powi(k) * (-x * x / 2.0).exp());
        assert!((m(0) - SQRT_2PI).abs() <= EXACT_TOL);
        assert!((m(2) - SQRT_2PI).abs() <= EXACT_TOL * SQRT_2PI);
        assert!((m(4) - 3.0 * SQRT_2PI).abs() <= EXACT_TOL * 3.0 * SQRT_2PI);
        assert!(m(1).abs() <= EXACT_TOL && m(3).abs() <= EXACT_TOL);
    }

    #[test]
    fn velocity_axis_refinement_non_increasing() {
        // The Gaussian moment errors must not grow under refinement.
        let err = |n: usize| {
            let rule = velocity_axis(n);
            let m6 = rule.integrate(|x| x.powi(6) * (-x * x / 2.0).exp());
            (m6 - 15.0 * SQRT_2PI).abs()
        };
        assert!(err(16) <= err(8) + EXACT_TOL);
    }

    #[test]
    fn legendre_monomials() {
        // Oracle: ∫₀¹ x^k dx = 1/(k+1) for k ≤ 2n-1.
        let rule = gauss_legendre(6, 0.0, 1.0);
        for k in 0..12 {
            let got = rule.integrate(|x| x.powi(k));
            let expected = 1.0 / (k as f64 + 1.0);
            assert!(
                (got - expected).abs() <= EXACT_TOL,
                "x^{k}: got {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn trapezoid_kills_harmonics() {
        // Exact for e^{ikφ}, 0 < |k| < n, and for constants.
        let rule = trapezoid_periodic(16, 2.0 * std::f64::consts::PI);
        for k in 1..16 {
            let c = rule.integrate(|p| (k as f64 * p).cos());
            let s = rule.integrate(|p| (k as f64 * p).sin());
            assert!(c.abs() <= 1e-13 && s.abs() <= 1e-13, "harmonic k={k}");
        }
        let total = rule.integrate(|_| 1.0);
        assert!((total - 2.0 * std::f64::consts::PI).abs() <= EXACT_TOL);
    }

    #[test]
    fn tensor_grid_shape_and_mass() {
        let rule = velocity_axis(8);
        let (nodes, weights) = tensor3(&rule);
        assert_eq!(nodes.nrows(), 512);
        // Maxwellian mass: (2π)^{-3/2} Σ W_i e^{-|v_i|²/2} = 1.
        let mut mass = 0.0;
        for (row, &w) in nodes.rows().into_iter().zip(weights.iter()) {
            let v2 = row[0] * row[0] + row[1] * row[1] + row[2] * row[2];
            mass += w * (-v2 / 2.0).exp();
        }
        mass /= SQRT_2PI.powi(3);
        assert!((mass - 1.0).abs() <= 1e-10, "Maxwellian mass {mass}");
    }

    #[test]
    fn geometric_grid_endpoints_and_ratio() {
        let g = geometric_grid(5, 0.01, 1.0);
        assert!((g[0] - 0.01).abs() < 1e-15 && (g[4] - 1.0).abs() < 1e-12);
        let r0 = g[1] / g[0];
        let r3 = g[4] / g[3];
        assert!((r0 - r3).abs() < 1e-12, "constant ratio");
    }
}
