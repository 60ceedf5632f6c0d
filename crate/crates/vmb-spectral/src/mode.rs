//! Per-Fourier-mode generator of the coupled kinetic/field system, its
//! weighted inner product, brute-force eigensolves, and the closed-form
//! leading-order eigenvalue/eigenvector tables used to label the spectrum.
//!
//! All computations fix the mode direction `ω = e₁` (eigenvalues depend only
//! on `s = |ξ|`); eigenvectors for other directions are reconstructed through
//! an orthonormal transverse frame. The state vector stacks the kinetic part
//! `f` (length `n_v`, weighted coordinates) with four field coordinates: the
//! two transverse components of the rotated electric field `ω×E` and of the
//! rotated magnetic field `ω×B`, in the frame basis `(W₂, W₃)`.

use ndarray::{Array1, Array2, ArrayView1};
use ndarray_linalg::Eig;

use crate::collision::{CollisionMatrices, MacroMoments};
use crate::{C64, Error, Result};

/// Metric floor: below this `s` the `1/s²` weight on the density component
/// makes the mode metric ill-conditioned, and the continuum treatment of the
/// zero mode takes over; sweeps exclude it.
pub const S_MIN: f64 = 1e-4;

/// Two eigenvalue assignments closer than this are treated as the same
/// branch (crossing/cluster); also the scale for bi-orthogonality checks.
/// Chosen three orders above eigensolver noise (≈1e−12·‖A‖) and well below
/// every branch separation met in the sweeps.
pub const MATCHING_TOL: f64 = 1e-6;

const IM: C64 = C64::new(0.0, 1.0);

/// Weighted inner product `(U, V)_ξ = (f, g) + s⁻²·(f, χ₀)(g, χ₀)* + Σ
/// field·field*` on mode states; conjugate-linear in the second argument.
#[derive(Debug, Clone)]
pub struct XiMetric {
    pub s: f64,
    /// Density invariant in weighted coordinates (real).
    pub chi0: Array1<f64>,
}

impl XiMetric {
    pub fn new(s: f64, chi0: Array1<f64>) -> Result<Self> {
        if !(s >= S_MIN) {
            return Err(Error::InvalidInput(format!(
                "mode metric degenerates below s_min = {S_MIN:.0e} (got s = {s})"
            )));
        }
        Ok(XiMetric { s, chi0 })
    }

    pub fn n_v(&self) -> usize {
        self.chi0.len()
    }

    pub fn dim(&self) -> usize {
        self.chi0.len() + 4
    }

    fn density_component(&self, u: ArrayView1<'_, C64>) -> C64 {
        self.chi0
            .iter()
            .zip(u.iter())
            .map(|(&c, &x)| c * x)
            .sum()
    }

    /// `(U, V)_ξ`; conjugate-linear in `v`.
    pub fn inner(&self, u: ArrayView1<'_, C64>, v: ArrayView1<'_, C64>) -> C64 {
        debug_assert_eq!(u.len(), self.dim());
        debug_assert_eq!(v.len(), self.dim());
        let mut acc = C64::new(0.0, 0.0);
        for (a, b) in u.iter().zip(v.iter()) {
            acc += a * b.conj();
        }
        let nv = self.n_v();
        let du = self.density_component(u.slice(ndarray::s![..nv]));
        let dv = self.density_component(v.slice(ndarray::s![..nv]));
        acc + du * dv.conj() / (self.s * self.s)
    }

    pub fn norm(&self, u: ArrayView1<'_, C64>) -> f64 {
        self.inner(u, u).re.max(0.0).sqrt()
    }

    /// Apply the Gram operator: `G U = U + s⁻²·χ₀·(f, χ₀)` on the kinetic
    /// part, identity on the fields.
    pub fn gram_apply(&self, u: ArrayView1<'_, C64>) -> Array1<C64> {
        let nv = self.n_v();
        let mut out = u.to_owned();
        let du = self.density_component(u.slice(ndarray::s![..nv]));
        let w = du / (self.s * self.s);
        for i in 0..nv {
            out[i] += w * self.chi0[i];
        }
        out
    }

    /// Apply the inverse Gram operator (rank-one update inverted in closed
    /// form): `G⁻¹U = U − (1+s²)⁻¹·χ₀·(f, χ₀)` on the kinetic part.
    pub fn gram_solve(&self, u: ArrayView1<'_, C64>) -> Array1<C64> {
        let nv = self.n_v();
        let mut out = u.to_owned();
        let du = self.density_component(u.slice(ndarray::s![..nv]));
        let w = du / (1.0 + self.s * self.s);
        for i in 0..nv {
            out[i] -= w * self.chi0[i];
        }
        out
    }
}

/// Weighted inner product of two mode states (convenience form building the
/// metric from the collision data; errors below the metric floor).
pub fn weighted_inner(
    c: &CollisionMatrices,
    u: ArrayView1<'_, C64>,
    v: ArrayView1<'_, C64>,
    s: f64,
) -> Result<C64> {
    let metric = XiMetric::new(s, c.chi(0).to_owned())?;
    Ok(metric.inner(u, v))
}

/// Dense per-mode generator at `ξ = s·ω` in the rotated frame.
pub struct ModeOperator {
    pub s: f64,
    pub eps: f64,
    /// Dense complex matrix of dimension `n_v + 4`.
    pub matrix: Array2<C64>,
    pub n_v: usize,
    pub metric: XiMetric,
}

impl ModeOperator {
    pub fn dim(&self) -> usize {
        self.n_v + 4
    }

    pub fn apply(&self, u: ArrayView1<'_, C64>) -> Array1<C64> {
        self.matrix.dot(&u)
    }

    /// The ξ-adjoint `A* = G⁻¹ Aᴴ G`.
    pub fn xi_adjoint_apply(&self, u: ArrayView1<'_, C64>) -> Array1<C64> {
        let gu = self.metric.gram_apply(u);
        let ah_gu = self.matrix.t().mapv(|z| z.conj()).dot(&gu);
        self.metric.gram_solve(ah_gu.view())
    }
}

/// Kinetic block of the per-mode generator: `L − iεs·v₁ − i(ε/s)·
/// (v₁χ₀)⊗χ₀ᵀ` (collision, streaming, and electrostatic drag).
pub(crate) fn kinetic_block(c: &CollisionMatrices, s: f64, eps: f64) -> Array2<C64> {
    let nv = c.n_nodes();
    let mut b = Array2::<C64>::zeros((nv, nv));
    let v1 = c.quadrature.nodes.column(0);
    let chi0 = c.chi(0);
    let v1chi0 = c.v_times(0, chi0);
    let coul = -IM * eps / s;
    for i in 0..nv {
        let row_factor = coul * v1chi0[i];
        for j in 0..nv {
            b[[i, j]] = C64::new(c.l_mat[[i, j]], 0.0) + row_factor * chi0[j];
        }
        b[[i, i]] -= IM * eps * s * v1[i];
    }
    b
}

/// Assemble the per-mode generator: kinetic block `L − iεs·v₁ − i(ε/s)·
/// (v₁χ₀)⊗χ₀`, the `±ε` kinetic/electric couplings, and the `±iεs` rotations
/// between the transverse electric and magnetic coordinates.
pub fn assemble_mode(c: &CollisionMatrices, s: f64, eps: f64) -> Result<ModeOperator> {
    if !(s >= S_MIN) {
        return Err(Error::InvalidInput(format!(
            "assemble_mode requires s ≥ {S_MIN:.0e} (got {s})"
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidInput(format!(
            "assemble_mode requires eps in [0, 1) (got {eps})"
        )));
    }
    let nv = c.n_nodes();
    let dim = nv + 4;
    let (x2, x3, y2, y3) = (nv, nv + 1, nv + 2, nv + 3);
    let mut a = Array2::<C64>::zeros((dim, dim));

    let block = kinetic_block(c, s, eps);
    for i in 0..nv {
        for j in 0..nv {
            a[[i, j]] = block[[i, j]];
        }
    }
    let chi0 = c.chi(0);
    let v2chi0 = c.v_times(1, chi0);
    let v3chi0 = c.v_times(2, chi0);
    for i in 0..nv {
        a[[i, x2]] = C64::new(-eps * v3chi0[i], 0.0);
        a[[i, x3]] = C64::new(eps * v2chi0[i], 0.0);
        a[[x2, i]] = C64::new(eps * v3chi0[i], 0.0);
        a[[x3, i]] = C64::new(-eps * v2chi0[i], 0.0);
    }
    let rot = IM * eps * s;
    a[[x2, y3]] = -rot;
    a[[x3, y2]] = rot;
    a[[y2, x3]] = rot;
    a[[y3, x2]] = -rot;

    let metric = XiMetric::new(s, chi0.to_owned())?;
    Ok(ModeOperator {
        s,
        eps,
        matrix: a,
        n_v: nv,
        metric,
    })
}

/// One eigenvalue of a mode operator together with its (ξ-normalized) right
/// eigenvector and, once labeled, the closed-form prediction it matches.
#[derive(Debug, Clone)]
pub struct SpectralBranch {
    /// Low-frequency label −1..7, high-frequency label 1..4, or unlabeled.
    pub label: Option<i32>,
    /// Eigenvalue of the mode operator itself (not rescaled by ε²).
    pub lambda: C64,
    pub eigvec: Array1<C64>,
    /// Closed-form asymptotic value the branch was matched against.
    pub predicted: Option<C64>,
    /// `|lambda − predicted|` once labeled.
    pub residual: Option<f64>,
    /// Set when a competing assignment sat within [`MATCHING_TOL`] (branch
    /// crossing); both assignments are then reported by the caller.
    pub ambiguous: bool,
}

/// Full spectrum of a mode operator, sorted by decreasing real part.
pub struct EigModeOutcome {
    pub branches: Vec<SpectralBranch>,
    /// Number of eigenvalues with `Re λ > −gap_mu/2` (the dominant cluster).
    pub dominant_count: usize,
    /// The threshold used for the count.
    pub threshold: f64,
}

/// Brute-force dense eigensolve of the mode operator; eigenvectors are
/// ξ-normalized; eigenvalues sorted by `Re` descending (then `Im`).
pub fn eig_mode(op: &ModeOperator, gap_mu: f64) -> Result<EigModeOutcome> {
    crate::init_single_thread_blas();
    let (vals, vecs) = op.matrix.eig()?;
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| {
        vals[b]
            .re
            .total_cmp(&vals[a].re)
            .then(vals[b].im.total_cmp(&vals[a].im))
    });
    let threshold = -0.5 * gap_mu;
    let mut branches = Vec::with_capacity(order.len());
    let mut dominant = 0usize;
    for &k in &order {
        let mut v = vecs.column(k).to_owned();
        let n = op.metric.norm(v.view());
        if n > 0.0 {
            v.mapv_inplace(|z| z / n);
        }
        if vals[k].re > threshold {
            dominant += 1;
        }
        branches.push(SpectralBranch {
            label: None,
            lambda: vals[k],
            eigvec: v,
            predicted: None,
            residual: None,
            ambiguous: false,
        });
    }
    Ok(EigModeOutcome {
        branches,
        dominant_count: dominant,
        threshold,
    })
}

/// Leading-order eigenvalue coefficient `η_j(s)` (the `O(ε)` drift): acoustic
/// pair `±i√(1+5s²/3)`, three zeros, and the two double oscillatory pairs
/// `∓i√(1+s²)`.
pub fn eta_of_s(j: i32, s: f64) -> C64 {
    match j {
        -1 => -IM * (1.0 + 5.0 / 3.0 * s * s).sqrt(),
        1 => IM * (1.0 + 5.0 / 3.0 * s * s).sqrt(),
        0 | 2 | 3 => C64::new(0.0, 0.0),
        4 | 5 => -IM * (1.0 + s * s).sqrt(),
        6 | 7 => IM * (1.0 + s * s).sqrt(),
        _ => panic!("undefined low-frequency label {j}"),
    }
}

/// Second-order decay coefficient `b_j(s) ≥ 0` (the `O(ε²)` damping), built
/// from the transport moments.
pub fn b_of_s(j: i32, s: f64, m: &MacroMoments) -> f64 {
    let s2 = s * s;
    match j {
        0 => -3.0 * (s2 + s2 * s2) * m.m44 / (3.0 + 5.0 * s2),
        -1 | 1 => -0.5 * s2 * m.m11 - s2 * s2 * m.m44 / (3.0 + 5.0 * s2),
        2 | 3 => -s2 * s2 * m.m22 / (1.0 + s2),
        4 | 5 | 6 | 7 => -s2 * m.m22 / (2.0 * (1.0 + s2)),
        _ => panic!("undefined low-frequency label {j}"),
    }
}

/// Deterministic orthonormal transverse frame `(W₂, W₃)` completing a unit
/// direction `ω`; reduces to `(e₂, e₃)` at `ω = e₁`.
pub fn transverse_frame(omega: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let norm = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    let w = [omega[0] / norm, omega[1] / norm, omega[2] / norm];
    // Axis least aligned with ω (first in case of ties).
    let mut k = 0;
    for cand in 1..3 {
        if w[cand].abs() < w[k].abs() {
            k = cand;
        }
    }
    let mut e = [0.0; 3];
    e[k] = 1.0;
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let mut w3 = cross(w, e);
    let n3 = (w3[0] * w3[0] + w3[1] * w3[1] + w3[2] * w3[2]).sqrt();
    for c in &mut w3 {
        *c /= n3;
    }
    let w2 = cross(w3, w);
    (w2, w3)
}

/// Closed-form leading-order eigenvector `Λ_j(ξ)` as a mode state in the
/// frame of `ω`; the nine vectors are ξ-orthonormal.
pub fn low_freq_eigvec(
    c: &CollisionMatrices,
    j: i32,
    omega: [f64; 3],
    s: f64,
) -> Result<Array1<C64>> {
    if !(s >= S_MIN) {
        return Err(Error::InvalidInput(format!(
            "low_freq_eigvec requires s ≥ {S_MIN:.0e} (got {s})"
        )));
    }
    let nv = c.n_nodes();
    let (x2, x3, y2, y3) = (nv, nv + 1, nv + 2, nv + 3);
    let (w2, w3) = transverse_frame(omega);
    let norm = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    let w1 = [omega[0] / norm, omega[1] / norm, omega[2] / norm];

    // Node-wise (v·u)·χ₀ for a fixed 3-vector u.
    let directional = |u: [f64; 3]| -> Array1<f64> {
        let chi0 = c.chi(0);
        let nodes = &c.quadrature.nodes;
        Array1::from_iter((0..nv).map(|i| {
            (u[0] * nodes[[i, 0]] + u[1] * nodes[[i, 1]] + u[2] * nodes[[i, 2]]) * chi0[i]
        }))
    };

    let s2 = s * s;
    let d1 = (1.0 + s2).sqrt();
    let d35 = (3.0 + 5.0 * s2).sqrt();
    let mut out = Array1::<C64>::zeros(nv + 4);
    let set_f_real = |out: &mut Array1<C64>, vec: &Array1<f64>, scale: f64| {
        for i in 0..nv {
            out[i] += C64::new(scale * vec[i], 0.0);
        }
    };

    match j {
        -1 | 1 => {
            let chi0 = c.chi(0).to_owned();
            let chi4 = c.chi(4).to_owned();
            let vomega = directional(w1);
            let sign = if j == 1 { -1.0 } else { 1.0 };
            set_f_real(&mut out, &chi0, (1.5_f64).sqrt() * s / d35);
            set_f_real(&mut out, &vomega, sign * (0.5_f64).sqrt());
            set_f_real(&mut out, &chi4, s / d35);
        }
        0 => {
            let chi0 = c.chi(0).to_owned();
            let chi4 = c.chi(4).to_owned();
            set_f_real(&mut out, &chi0, (2.0_f64).sqrt() * s2 / (d35 * d1));
            set_f_real(&mut out, &chi4, -(3.0 + 3.0 * s2).sqrt() / d35);
        }
        2 | 3 => {
            let w = if j == 2 { w2 } else { w3 };
            let vw = directional(w);
            set_f_real(&mut out, &vw, s / d1);
            let slot = if j == 2 { y2 } else { y3 };
            out[slot] = -IM / d1;
        }
        4 | 5 | 6 | 7 => {
            let w = if j % 2 == 0 { w2 } else { w3 };
            let eta = eta_of_s(j, s);
            let denom = (2.0 * (1.0 + s2)).sqrt();
            let vw = directional(w);
            set_f_real(&mut out, &vw, 1.0 / denom);
            // ω × W₂ = +W₃ (slot X₃), ω × W₃ = −W₂ (slot X₂).
            if j % 2 == 0 {
                out[x3] = eta / denom;
                out[y2] = IM * s / denom;
            } else {
                out[x2] = -eta / denom;
                out[y3] = IM * s / denom;
            }
        }
        _ => {
            return Err(Error::InvalidInput(format!(
                "undefined low-frequency label {j}"
            )))
        }
    }
    Ok(out)
}

/// All nine leading-order eigenvectors at `ω = e₁`, indexed by `label + 1`.
pub fn lambda_basis(c: &CollisionMatrices, s: f64) -> Result<Vec<Array1<C64>>> {
    (-1..=7)
        .map(|j| low_freq_eigvec(c, j, [1.0, 0.0, 0.0], s))
        .collect()
}

/// Left (dual) vector pattern: `(f, X, Y) ↦ (f + s⁻²(f,χ₀)χ₀, −X, −Y)`.
/// Pairing it bilinearly (no conjugation) with a right eigenvector of a
/// different eigenvalue gives zero; against its own, the ξ-normalization.
pub fn dual_left(metric: &XiMetric, u: ArrayView1<'_, C64>) -> Array1<C64> {
    let nv = metric.n_v();
    let mut out = u.to_owned();
    let du: C64 = metric
        .chi0
        .iter()
        .zip(u.iter())
        .map(|(&c, &x)| c * x)
        .sum();
    let w = du / (metric.s * metric.s);
    for i in 0..nv {
        out[i] += w * metric.chi0[i];
    }
    for k in nv..nv + 4 {
        out[k] = -out[k];
    }
    out
}

/// Bilinear pairing `Σ_k a_k·b_k` (no conjugation) used with [`dual_left`].
pub fn bilinear_pair(a: ArrayView1<'_, C64>, b: ArrayView1<'_, C64>) -> C64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

/// Plain 2-norm relative residual `‖A·u − λu‖/‖u‖` of a candidate eigenpair.
pub fn eigpair_residual(op: &ModeOperator, lambda: C64, u: ArrayView1<'_, C64>) -> f64 {
    let au = op.apply(u);
    let mut num = 0.0_f64;
    let mut den = 0.0_f64;
    for (a, x) in au.iter().zip(u.iter()) {
        num += (a - lambda * x).norm_sqr();
        den += x.norm_sqr();
    }
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Assign the nine dominant eigenvalues to labels −1..7 by minimizing the
/// distance to the closed-form prediction `ε·η_j(s) − ε²·b_j(s)`, breaking
/// exact-double clusters ({2,3}, {4,5}, {6,7}) by eigenvector overlap with
/// the closed-form eigenvectors. Returns branches in label order.
pub fn match_branches(
    outcome: &EigModeOutcome,
    c: &CollisionMatrices,
    s: f64,
    eps: f64,
    m: &MacroMoments,
) -> Result<Vec<SpectralBranch>> {
    if outcome.dominant_count != 9 {
        return Err(Error::InvalidInput(format!(
            "low-frequency labeling needs the nine-eigenvalue regime; found {} \
             eigenvalues above the gap line at s = {s}, eps = {eps}",
            outcome.dominant_count
        )));
    }
    let labels: [i32; 9] = [-1, 0, 1, 2, 3, 4, 5, 6, 7];
    let predicted: Vec<C64> = labels
        .iter()
        .map(|&j| eps * eta_of_s(j, s) - C64::new(eps * eps * b_of_s(j, s, m), 0.0))
        .collect();
    let cands = &outcome.branches[..9];

    // Global greedy min-cost bijection; exact doubles share predictions, so
    // the pairwise order within a cluster is refined afterwards.
    let mut cost = [[0.0_f64; 9]; 9];
    for (a, p) in predicted.iter().enumerate() {
        for (k, cand) in cands.iter().enumerate() {
            cost[a][k] = (cand.lambda - p).norm();
        }
    }
    let mut label_taken = [false; 9];
    let mut cand_taken = [false; 9];
    let mut assign = [usize::MAX; 9]; // label slot -> candidate index
    for _ in 0..9 {
        let mut best = (f64::INFINITY, 0usize, 0usize);
        for a in 0..9 {
            if label_taken[a] {
                continue;
            }
            for k in 0..9 {
                if cand_taken[k] {
                    continue;
                }
                if cost[a][k] < best.0 {
                    best = (cost[a][k], a, k);
                }
            }
        }
        assign[best.1] = best.2;
        label_taken[best.1] = true;
        cand_taken[best.2] = true;
    }

    // Refine the double clusters by overlap against the closed-form vectors.
    let basis = lambda_basis(c, s)?;
    let metric = XiMetric::new(s, c.chi(0).to_owned())?;
    for pair in [[3usize, 4], [5, 6], [7, 8]] {
        let (a0, a1) = (pair[0], pair[1]);
        let (k0, k1) = (assign[a0], assign[a1]);
        let ov = |k: usize, a: usize| -> f64 {
            metric
                .inner(cands[k].eigvec.view(), basis[a].view())
                .norm()
        };
        if ov(k0, a0) + ov(k1, a1) < ov(k1, a0) + ov(k0, a1) {
            assign[a0] = k1;
            assign[a1] = k0;
        }
    }

    // Ambiguity scan: a competing candidate essentially as close as the
    // chosen one (outside the designated double clusters) marks a crossing.
    let cluster_of = |a: usize| -> Option<usize> {
        match a {
            3 | 4 => Some(0),
            5 | 6 => Some(1),
            7 | 8 => Some(2),
            _ => None,
        }
    };
    let mut out = Vec::with_capacity(9);
    for a in 0..9 {
        let k = assign[a];
        let chosen = cost[a][k];
        let mut ambiguous = false;
        for other in 0..9 {
            if other == k {
                continue;
            }
            // Skip the in-cluster partner: exact doubles are expected ties.
            if let Some(cl) = cluster_of(a) {
                let partner = match cl {
                    0 => [3usize, 4],
                    1 => [5, 6],
                    _ => [7, 8],
                };
                let partner_k = partner
                    .iter()
                    .map(|&slot| assign[slot])
                    .find(|&kk| kk == other);
                if partner_k.is_some() {
                    continue;
                }
            }
            if (cost[a][other] - chosen).abs() < MATCHING_TOL {
                ambiguous = true;
            }
        }
        let mut branch = cands[k].clone();
        branch.label = Some(labels[a]);
        branch.predicted = Some(predicted[a]);
        branch.residual = Some(chosen);
        branch.ambiguous = ambiguous;
        out.push(branch);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::shared_n8;
    use ndarray::Array1;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, dim: usize) -> Array1<C64> {
        Array1::from_iter(
            (0..dim).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
        )
    }

    #[test]
    fn metric_examples_and_floor() {
        let (c, _) = shared_n8();
        let nv = c.n_nodes();
        // Pure microscopic data: the density weight is inactive.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut u = random_state(&mut rng, nv + 4);
        let p1 = c.project_p1(
            Array1::from_iter(u.iter().take(nv).map(|z| z.re)).view(),
        );
        for i in 0..nv {
            u[i] = C64::new(p1[i], 0.0);
        }
        let plain: f64 = u.iter().map(|z| z.norm_sqr()).sum();
        let w = weighted_inner(c, u.view(), u.view(), 1.0).unwrap();
        assert!((w.re - plain).abs() < 1e-10 * plain);
        // Density direction: 1 + 1/s².
        let mut chi_state = Array1::<C64>::zeros(nv + 4);
        for i in 0..nv {
            chi_state[i] = C64::new(c.chi(0)[i], 0.0);
        }
        let at1 = weighted_inner(c, chi_state.view(), chi_state.view(), 1.0).unwrap();
        assert!((at1.re - 2.0).abs() < 1e-10);
        let at_half = weighted_inner(c, chi_state.view(), chi_state.view(), 0.5).unwrap();
        assert!((at_half.re - 5.0).abs() < 1e-10);
        assert!(weighted_inner(c, u.view(), u.view(), 1e-5).is_err());
    }

    #[test]
    fn assembled_mode_at_zero_coupling_is_block_diagonal() {
        let (c, _) = shared_n8();
        let op = assemble_mode(c, 0.8, 0.0).unwrap();
        let nv = c.n_nodes();
        for i in 0..nv {
            for j in 0..nv {
                assert_eq!(op.matrix[[i, j]], C64::new(c.l_mat[[i, j]], 0.0));
            }
        }
        for k in nv..nv + 4 {
            for j in 0..nv + 4 {
                assert_eq!(op.matrix[[k, j]], C64::new(0.0, 0.0));
                assert_eq!(op.matrix[[j, k]], C64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn mode_dissipativity_matches_kinetic_quadratic_form() {
        let (c, _) = shared_n8();
        let op = assemble_mode(c, 1.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let u = random_state(&mut rng, op.dim());
            let au = op.apply(u.view());
            let quad = op.metric.inner(au.view(), u.view());
            let norm2 = op.metric.inner(u.view(), u.view()).re;
            // Re(AU, U)_ξ equals the collision quadratic form of the kinetic
            // part: every transport/coupling term is skew in this metric.
            let f_re = Array1::from_iter(u.iter().take(op.n_v).map(|z| z.re));
            let f_im = Array1::from_iter(u.iter().take(op.n_v).map(|z| z.im));
            let lf: f64 =
                c.l_mat.dot(&f_re).dot(&f_re) + c.l_mat.dot(&f_im).dot(&f_im);
            assert!(quad.re <= 1e-10 * norm2);
            assert!(
                (quad.re - lf).abs() <= 1e-8 * norm2,
                "Re(AU,U)_ξ = {} vs (Lf,f) = {lf}",
                quad.re
            );
        }
    }

    #[test]
    fn xi_adjoint_identity_holds() {
        let (c, _) = shared_n8();
        let op = assemble_mode(c, 1.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let u = random_state(&mut rng, op.dim());
        let v = random_state(&mut rng, op.dim());
        let lhs = op.metric.inner(op.apply(u.view()).view(), v.view());
        let rhs = op
            .metric
            .inner(u.view(), op.xi_adjoint_apply(v.view()).view());
        assert!(
            (lhs - rhs).norm() < 1e-10 * op.metric.norm(u.view()) * op.metric.norm(v.view()),
            "adjoint mismatch {lhs} vs {rhs}"
        );
    }

    #[test]
    fn eta_and_b_reference_values() {
        let (_, m) = shared_n8();
        assert_eq!(eta_of_s(1, 0.0), C64::new(0.0, 1.0));
        assert_eq!(eta_of_s(-1, 0.0), C64::new(0.0, -1.0));
        for j in [0, 2, 3] {
            assert_eq!(eta_of_s(j, 0.0), C64::new(0.0, 0.0));
        }
        assert_eq!(eta_of_s(4, 0.0), C64::new(0.0, -1.0));
        assert_eq!(eta_of_s(5, 0.0), C64::new(0.0, -1.0));
        assert_eq!(eta_of_s(6, 0.0), C64::new(0.0, 1.0));
        assert_eq!(eta_of_s(7, 0.0), C64::new(0.0, 1.0));
        assert!((b_of_s(2, 1.0, m) - (-0.5 * m.m22)).abs() < 1e-14);
        assert_eq!(b_of_s(0, 0.0, m), 0.0);
        for j in -1..=7 {
            assert!(b_of_s(j, 0.7, m) > 0.0, "b_{j}(0.7) must be positive");
            assert_eq!(b_of_s(j, 0.0, m), 0.0);
        }
    }

    #[test]
    fn closed_form_vectors_are_xi_orthonormal() {
        let (c, _) = shared_n8();
        let s = 0.7;
        let basis = lambda_basis(c, s).unwrap();
        let metric = XiMetric::new(s, c.chi(0).to_owned()).unwrap();
        for (a, ua) in basis.iter().enumerate() {
            for (b, ub) in basis.iter().enumerate() {
                let ip = metric.inner(ua.view(), ub.view());
                let target = if a == b { 1.0 } else { 0.0 };
                assert!(
                    (ip - C64::new(target, 0.0)).norm() < 1e-10,
                    "(Λ_{}, Λ_{})_ξ = {ip}",
                    a as i32 - 1,
                    b as i32 - 1
                );
            }
        }
    }

    #[test]
    fn closed_form_vector_structure() {
        let (c, _) = shared_n8();
        // Density coefficient of the incompressible-heat branch ~ √2·s²/√3.
        let s = 1e-2;
        let h0 = low_freq_eigvec(c, 0, [1.0, 0.0, 0.0], s).unwrap();
        let coef: C64 = c
            .chi(0)
            .iter()
            .zip(h0.iter())
            .map(|(&x, &z)| x * z)
            .sum();
        let lead = (2.0_f64).sqrt() * s * s / (3.0_f64).sqrt();
        // Next correction is (4/3)s² relative, ≈1.33e−4 at s = 1e−2.
        assert!(
            (coef.re - lead).abs() < 2e-4 * lead.max(1e-12),
            "χ₀ coefficient {} vs leading order {lead}",
            coef.re
        );
        // No odd component along v·ω χ₀.
        let vomega = c.v_times(0, c.chi(0));
        let odd: C64 = vomega.iter().zip(h0.iter()).map(|(&x, &z)| x * z).sum();
        assert!(odd.norm() < 1e-12);
        // Frame reconstruction away from e₁ keeps orthonormality.
        let omega = [1.0 / 3.0_f64.sqrt(), 1.0 / 3.0_f64.sqrt(), 1.0 / 3.0_f64.sqrt()];
        let metric = XiMetric::new(0.7, c.chi(0).to_owned()).unwrap();
        for ja in -1..=7 {
            let ua = low_freq_eigvec(c, ja, omega, 0.7).unwrap();
            for jb in -1..=7 {
                let ub = low_freq_eigvec(c, jb, omega, 0.7).unwrap();
                let ip = metric.inner(ua.view(), ub.view());
                let target = if ja == jb { 1.0 } else { 0.0 };
                assert!(
                    (ip - C64::new(target, 0.0)).norm() < 1e-10,
                    "rotated (Λ_{ja}, Λ_{jb})_ξ = {ip}"
                );
            }
        }
    }

    #[test]
    fn spectrum_at_zero_coupling_contains_zero() {
        let (c, _) = shared_n8();
        let op = assemble_mode(c, 0.5, 0.0).unwrap();
        let out = eig_mode(&op, c.gap_mu).unwrap();
        let min_mod = out
            .branches
            .iter()
            .map(|b| b.lambda.norm())
            .fold(f64::INFINITY, f64::min);
        assert!(min_mod < 1e-10, "smallest |λ| = {min_mod:.3e}");
        // Sorted by decreasing real part.
        for w in out.branches.windows(2) {
            assert!(w[0].lambda.re >= w[1].lambda.re - 1e-12);
        }
    }

    #[test]
    fn low_regime_matching_is_consistent() {
        let (c, m) = shared_n8();
        let (s, eps) = (0.5, 0.05);
        let op = assemble_mode(c, s, eps).unwrap();
        let out = eig_mode(&op, c.gap_mu).unwrap();
        assert_eq!(out.dominant_count, 9, "nine-branch regime expected");
        // Every eigenvalue strictly decays.
        let scale = out.branches[0].lambda.norm().max(1.0);
        for b in &out.branches {
            assert!(b.lambda.re < 1e-12 * scale);
        }
        let matched = match_branches(&out, c, s, eps, m).unwrap();
        assert_eq!(matched.len(), 9);
        // Bijection over the dominant nine.
        let mut seen: Vec<u64> = matched
            .iter()
            .map(|b| b.lambda.re.to_bits() ^ b.lambda.im.to_bits())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert!(seen.len() >= 8, "clusters may coincide, singles must not");
        // Total residual within the second-order window.
        let b_max = (-1..=7).map(|j| b_of_s(j, s, m)).fold(0.0, f64::max);
        let slack = 10.0 * eps.powi(3) * s.powi(3);
        let total: f64 = matched.iter().map(|b| b.residual.unwrap()).sum();
        assert!(
            total <= 2.0 * eps * eps * b_max + slack,
            "total residual {total:.3e}"
        );
        // Purely damped pair is real; double clusters coincide.
        for b in &matched {
            match b.label.unwrap() {
                2 | 3 => assert!(b.lambda.im.abs() < 1e-10, "thermal branch must be real"),
                _ => {}
            }
        }
        let lam_of = |j: i32| {
            matched
                .iter()
                .find(|b| b.label == Some(j))
                .unwrap()
                .lambda
        };
        assert!((lam_of(4) - lam_of(5)).norm() < 1e-10);
        assert!((lam_of(6) - lam_of(7)).norm() < 1e-10);
        // Conjugate structure of the acoustic pair.
        assert!((lam_of(1) - lam_of(-1).conj()).norm() < 1e-9);
    }

    #[test]
    fn dual_vectors_are_bi_orthogonal() {
        let (c, m) = shared_n8();
        let (s, eps) = (0.5, 0.05);
        let op = assemble_mode(c, s, eps).unwrap();
        let out = eig_mode(&op, c.gap_mu).unwrap();
        let matched = match_branches(&out, c, s, eps, m).unwrap();
        for a in &matched {
            let w = dual_left(&op.metric, a.eigvec.view());
            // Left eigenvector property: Aᵀw = λw.
            let atw = op.matrix.t().dot(&w);
            let mut resid = 0.0_f64;
            for (x, y) in atw.iter().zip(w.iter()) {
                resid = resid.max((x - a.lambda * y).norm());
            }
            assert!(resid < 1e-8, "left-eigenvector residual {resid:.3e}");
            let self_pair = bilinear_pair(w.view(), a.eigvec.view());
            for b in &matched {
                if (a.lambda - b.lambda).norm() < 1e-8 {
                    continue; // same eigenvalue (self or exact double)
                }
                let cross = bilinear_pair(w.view(), b.eigvec.view());
                assert!(
                    cross.norm() < MATCHING_TOL * self_pair.norm().max(1e-30),
                    "dual pairing {:?}/{:?} = {cross}",
                    a.label,
                    b.label
                );
            }
        }
    }
}
