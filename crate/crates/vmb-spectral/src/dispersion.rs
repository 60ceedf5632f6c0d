//! Scalar dispersion relations of the per-mode generator: resolvent moments
//! of the shifted collision operator, the two low-frequency cubics and the
//! high-frequency quadratic built from them, contraction-map root solvers,
//! and the exact eigenpairs reconstructed from those roots.
//!
//! The mode spectrum near the origin is governed by two cubic polynomials —
//! one for the longitudinal (acoustic/heat) branches, one for the transverse
//! (shear/oscillatory) branches — whose coefficients are bilinear moments of
//! the resolvent `R(εz, εs) = (L − εz − iεs·P₁v₁P₁)⁻¹` on the microscopic
//! subspace. For `εs` beyond the plasma-oscillation radius the four surviving
//! field branches solve a quadratic whose coefficient is a resolvent moment
//! of the full kinetic block instead.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, OwnedRepr};
use ndarray_linalg::solve::LUFactorized;
use ndarray_linalg::{Factorize, Solve, SVD};

use crate::collision::CollisionMatrices;
use crate::mode::kinetic_block;
use crate::{C64, Error, Result};

/// Convergence target on the dispersion-polynomial residual at a root.
/// Doubles as the step tolerance scale; the contraction maps gain a fixed
/// factor per step, so the final polynomial residual lands well below it.
pub const ROOT_TOL: f64 = 1e-12;

/// Iteration budget for the root solvers (contraction plus secant polish).
pub const MAX_ITER: usize = 200;

/// Low-frequency regime boundary: the cubic root solvers (and the nine-branch
/// expansion they feed) are used only for `εs ≤ LOW_FREQ_RADIUS`.
pub const LOW_FREQ_RADIUS: f64 = 0.1;

/// High-frequency regime boundary: the field-branch quadratic is used only
/// for `εs ≥ HIGH_FREQ_RADIUS`.
pub const HIGH_FREQ_RADIUS: f64 = 5.0;

/// Fixed-point step convergence: stop once `|Δz| ≤ STEP_TOL·max(1, |z|)`.
const STEP_TOL: f64 = 1e-13;

const IM: C64 = C64::new(0.0, 1.0);

/// Bilinear resolvent moments `R_ij = (R(εz, εs)·P₁(v₁χ_i), P₁(v₁χ_j))`
/// (no conjugation; the pairing is complex-bilinear).
#[derive(Debug, Clone, Copy)]
pub struct ResolventMoments {
    pub r11: C64,
    pub r14: C64,
    pub r41: C64,
    pub r44: C64,
    pub r22: C64,
}

type ShiftKey = (u64, u64, u64);

fn shift_key(ez: C64, es: f64) -> ShiftKey {
    (ez.re.to_bits(), ez.im.to_bits(), es.to_bits())
}

/// Per-worker evaluation context: dense ingredients of the shifted resolvent
/// (built once per collision assembly) plus memoized moment evaluations.
/// Interior mutability makes it single-threaded by design; parallel sweeps
/// construct one context per worker.
pub struct DispersionContext<'a> {
    pub c: &'a CollisionMatrices,
    /// `P₁(v₁χ_j)` for j = 1, 2, 4 (the three microscopic forcing vectors).
    w1: Array1<f64>,
    w2: Array1<f64>,
    w4: Array1<f64>,
    /// `(v·e₂)χ₀` and `(v·e₃)χ₀`, forcing vectors of the field quadratic.
    v2chi0: Array1<f64>,
    v3chi0: Array1<f64>,
    /// Dense `P₁·v₁·P₁`.
    p1v1p1: Array2<f64>,
    /// `Σ_j χ_j χ_jᵀ`, the macroscopic projector (regularizer at `εz = 0`).
    chi_gram: Array2<f64>,
    memo: RefCell<HashMap<ShiftKey, ResolventMoments>>,
    /// Kinetic block cache for the field quadratic, keyed by `(s, eps)` bits.
    kinetic: RefCell<Option<((u64, u64), Array2<C64>)>>,
}

impl<'a> DispersionContext<'a> {
    pub fn new(c: &'a CollisionMatrices) -> Self {
        crate::init_single_thread_blas();
        let nv = c.n_nodes();
        let chi0 = c.chi(0);
        let w1 = c.project_p1(c.v_times(0, c.chi(1)).view());
        let w2 = c.project_p1(c.v_times(0, c.chi(2)).view());
        let w4 = c.project_p1(c.v_times(0, c.chi(4)).view());
        let v2chi0 = c.v_times(1, chi0);
        let v3chi0 = c.v_times(2, chi0);

        // P₁ v₁ P₁ = v₁ − Pd·v₁ − v₁·Pd + Pd·v₁·Pd with Pd = χᵀχ, assembled
        // from rank-5 pieces.
        let chi = &c.chi_basis;
        let v1 = c.quadrature.nodes.column(0);
        let mut ct = chi.to_owned();
        for j in 0..ct.nrows() {
            for i in 0..nv {
                ct[[j, i]] *= v1[i];
            }
        }
        let small = ct.dot(&chi.t());
        let mut p1v1p1 = chi.t().dot(&small.dot(chi));
        p1v1p1 -= &chi.t().dot(&ct);
        p1v1p1 -= &ct.t().dot(chi);
        for i in 0..nv {
            p1v1p1[[i, i]] += v1[i];
        }
        let chi_gram = chi.t().dot(chi);

        DispersionContext {
            c,
            w1,
            w2,
            w4,
            v2chi0,
            v3chi0,
            p1v1p1,
            chi_gram,
            memo: RefCell::new(HashMap::new()),
            kinetic: RefCell::new(None),
        }
    }

    fn project_p1_c(&self, x: &mut Array1<C64>) {
        let chi = &self.c.chi_basis;
        for j in 0..chi.nrows() {
            let row = chi.row(j);
            let coef: C64 = row.iter().zip(x.iter()).map(|(&r, &z)| r * z).sum();
            for (xi, &r) in x.iter_mut().zip(row.iter()) {
                *xi -= coef * r;
            }
        }
    }

    /// LU of `L − εz − iεs·P₁v₁P₁`; at `εz = 0` exactly, the macroscopic
    /// projector is added instead of the shift so the matrix stays invertible
    /// without touching the microscopic subspace.
    fn shift_factorization(&self, ez: C64, es: f64) -> Result<LUFactorized<OwnedRepr<C64>>> {
        let nv = self.c.n_nodes();
        let regularize = ez == C64::new(0.0, 0.0);
        let mut a = Array2::<C64>::zeros((nv, nv));
        for i in 0..nv {
            for j in 0..nv {
                let mut val = C64::new(self.c.l_mat[[i, j]], -es * self.p1v1p1[[i, j]]);
                if regularize {
                    val.re += self.chi_gram[[i, j]];
                }
                a[[i, j]] = val;
            }
            if !regularize {
                a[[i, i]] -= ez;
            }
        }
        Ok(a.factorize()?)
    }

    /// `R(εz, εs)·P₁g` for complex `g`: project, solve, project back.
    pub fn resolvent_p1(&self, ez: C64, es: f64, g: ArrayView1<'_, C64>) -> Result<Array1<C64>> {
        let mut rhs = g.to_owned();
        self.project_p1_c(&mut rhs);
        let fact = self.shift_factorization(ez, es)?;
        let mut x = fact.solve(&rhs)?;
        self.project_p1_c(&mut x);
        Ok(x)
    }

    /// All five bilinear moments from a single factorization (memoized on
    /// the exact bit pattern of `(εz, εs)`).
    pub fn moments_at(&self, ez: C64, es: f64) -> Result<ResolventMoments> {
        let key = shift_key(ez, es);
        if let Some(m) = self.memo.borrow().get(&key) {
            return Ok(*m);
        }
        let fact = self.shift_factorization(ez, es)?;
        let mut sols = Vec::with_capacity(3);
        for w in [&self.w1, &self.w2, &self.w4] {
            let rhs = w.mapv(|x| C64::new(x, 0.0));
            let mut x = fact.solve(&rhs)?;
            self.project_p1_c(&mut x);
            sols.push(x);
        }
        let pair = |sol: &Array1<C64>, w: &Array1<f64>| -> C64 {
            sol.iter().zip(w.iter()).map(|(&z, &r)| z * r).sum()
        };
        let m = ResolventMoments {
            r11: pair(&sols[0], &self.w1),
            r14: pair(&sols[0], &self.w4),
            r41: pair(&sols[2], &self.w1),
            r44: pair(&sols[2], &self.w4),
            r22: pair(&sols[1], &self.w2),
        };
        self.memo.borrow_mut().insert(key, m);
        Ok(m)
    }

    /// Longitudinal cubic `D₀(z)`; its three roots carry the acoustic pair
    /// and the incompressible-heat branch.
    pub fn d0(&self, z: C64, s: f64, eps: f64) -> Result<C64> {
        let m = self.moments_at(z * eps, s * eps)?;
        let s2 = s * s;
        let lin = C64::new(1.0 + 5.0 * s2 / 3.0, 0.0)
            + IM * (eps * s2 * s * (2.0_f64 / 3.0).sqrt()) * (m.r14 + m.r41)
            + (eps * eps * s2 * s2) * (m.r11 * m.r44 - m.r14 * m.r41);
        Ok(z * z * z - (eps * s2) * (m.r11 + m.r44) * z * z + lin * z
            - (eps * (s2 + s2 * s2)) * m.r44)
    }

    /// Transverse cubic `D₁(z)`; its roots carry the shear branch (double)
    /// and the two low-frequency field oscillation pairs (each double).
    pub fn d1(&self, z: C64, s: f64, eps: f64) -> Result<C64> {
        let m = self.moments_at(z * eps, s * eps)?;
        let s2 = s * s;
        Ok(z * z * z - (eps * s2) * m.r22 * z * z + (1.0 + s2) * z - (eps * s2 * s2) * m.r22)
    }

    /// The 3×3 longitudinal dispersion matrix `𝕄(z)` whose determinant
    /// vanishing is equivalent to `D₀(z) = 0`; its null vector gives the
    /// macroscopic composition of the corresponding eigenvector.
    pub fn dispersion_matrix(&self, z: C64, s: f64, eps: f64) -> Result<Array2<C64>> {
        let m = self.moments_at(z * eps, s * eps)?;
        let s2 = s * s;
        let rt23 = (2.0_f64 / 3.0).sqrt();
        let mut mm = Array2::<C64>::zeros((3, 3));
        mm[[0, 0]] = z;
        mm[[0, 1]] = IM * s;
        mm[[1, 0]] = IM * (s + 1.0 / s);
        mm[[1, 1]] = z - (eps * s2) * m.r11;
        mm[[1, 2]] = IM * (s * rt23) - (eps * s2) * m.r41;
        mm[[2, 1]] = IM * (s * rt23) - (eps * s2) * m.r14;
        mm[[2, 2]] = z - (eps * s2) * m.r44;
        Ok(mm)
    }

    fn kinetic_cached(&self, s: f64, eps: f64) -> Array2<C64> {
        let key = (s.to_bits(), eps.to_bits());
        if let Some((k, b)) = self.kinetic.borrow().as_ref() {
            if *k == key {
                return b.clone();
            }
        }
        let b = kinetic_block(self.c, s, eps);
        *self.kinetic.borrow_mut() = Some((key, b.clone()));
        b
    }

    /// Field-branch resolvent moment `R̃(εz) = ((B̃ − εz)⁻¹(v₂χ₀), v₂χ₀)`
    /// of the full kinetic block (bilinear pairing).
    pub fn transverse_resolvent(&self, ez: C64, s: f64, eps: f64) -> Result<C64> {
        let mut a = self.kinetic_cached(s, eps);
        for i in 0..a.nrows() {
            a[[i, i]] -= ez;
        }
        let fact = a.factorize()?;
        let rhs = self.v2chi0.mapv(|x| C64::new(x, 0.0));
        let sol = fact.solve(&rhs)?;
        Ok(sol
            .iter()
            .zip(self.v2chi0.iter())
            .map(|(&z, &r)| z * r)
            .sum())
    }

    /// High-frequency quadratic `D₂(z) = z² − ε·R̃(εz)·z + s²`.
    pub fn d2(&self, z: C64, s: f64, eps: f64) -> Result<C64> {
        let rt = self.transverse_resolvent(z * eps, s, eps)?;
        Ok(z * z - eps * rt * z + C64::new(s * s, 0.0))
    }
}

/// Result of a dispersion root solve.
#[derive(Debug, Clone, Copy)]
pub struct RootOutcome {
    pub z: C64,
    /// `|D(z)|` for the low-frequency cubics; `|D₂(z)|/max(1, |z|²)` for the
    /// high-frequency quadratic (whose raw scale grows like `s²`).
    pub residual: f64,
    pub iterations: usize,
    /// Largest ratio of successive undamped step sizes along the accepted
    /// trajectory; a value below 1 certifies the map contracted throughout.
    /// Zero when fewer than two full steps were taken.
    pub contraction_ratio: f64,
    /// Whether the secant fallback had to refine the fixed-point result.
    pub polished: bool,
}

fn guard_low(s: f64, eps: f64) -> Result<()> {
    if !(s > 0.0) || !(eps >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "dispersion solve requires s > 0 and eps ≥ 0 (got s = {s}, eps = {eps})"
        )));
    }
    if eps * s > LOW_FREQ_RADIUS {
        return Err(Error::InvalidInput(format!(
            "low-frequency cubic is only valid for εs ≤ {LOW_FREQ_RADIUS} (got εs = {})",
            eps * s
        )));
    }
    Ok(())
}

fn contract_root<F>(mut f: F, z0: C64, denom: C64) -> Result<RootOutcome>
where
    F: FnMut(C64) -> Result<C64>,
{
    let mut z = z0;
    let mut fz = f(z)?;
    let mut alpha = 1.0_f64;
    let mut iterations = 0usize;
    let mut ratio = 0.0_f64;
    let mut prev_step = f64::NAN;
    let mut trail = (z, fz);
    let mut converged = false;
    while iterations < MAX_ITER {
        let step = (fz / denom) * alpha;
        let cand = z - step;
        let fc = f(cand)?;
        iterations += 1;
        if fc.norm() <= fz.norm() || alpha <= 1.0 / 16.0 {
            if alpha == 1.0 && prev_step.is_finite() && prev_step > 0.0 {
                ratio = ratio.max(step.norm() / prev_step);
            }
            prev_step = step.norm();
            trail = (z, fz);
            z = cand;
            fz = fc;
            alpha = (2.0 * alpha).min(1.0);
            if step.norm() <= STEP_TOL * z.norm().max(1.0) {
                converged = true;
                break;
            }
        } else {
            alpha *= 0.5;
        }
    }
    let mut polished = false;
    if !converged || fz.norm() > ROOT_TOL {
        // Secant refinement from the last two iterates.
        let (mut za, mut fa) = trail;
        if za == z {
            za = z + C64::new(1e-9, 1e-9);
            fa = f(za)?;
        }
        let (mut zb, mut fb) = (z, fz);
        for _ in 0..60 {
            let df = fb - fa;
            if df.norm() == 0.0 {
                break;
            }
            let zn = zb - fb * (zb - za) / df;
            let fnv = f(zn)?;
            za = zb;
            fa = fb;
            zb = zn;
            fb = fnv;
            polished = true;
            if fb.norm() <= 0.1 * ROOT_TOL {
                break;
            }
        }
        if fb.norm() < fz.norm() {
            z = zb;
            fz = fb;
        }
    }
    if fz.norm() > ROOT_TOL {
        return Err(Error::RootSolve(format!(
            "dispersion root stalled at |D| = {:.3e} (target {ROOT_TOL:.0e}) near z = {z}",
            fz.norm()
        )));
    }
    Ok(RootOutcome {
        z,
        residual: fz.norm(),
        iterations,
        contraction_ratio: ratio,
        polished,
    })
}

/// Root of the longitudinal cubic on branch `j ∈ {−1, 0, 1}`, started at the
/// uncoupled eigenvalue `η_j = ij·√(1+5s²/3)` and driven by the contraction
/// map `z ↦ z − D₀(z)/(3η_j² + 1 + 5s²/3)`.
pub fn solve_root_d0(ctx: &DispersionContext<'_>, j: i32, s: f64, eps: f64) -> Result<RootOutcome> {
    guard_low(s, eps)?;
    if !(-1..=1).contains(&j) {
        return Err(Error::InvalidInput(format!(
            "longitudinal branch index must be −1, 0, or 1 (got {j})"
        )));
    }
    let s2 = s * s;
    let eta = C64::new(0.0, j as f64 * (1.0 + 5.0 * s2 / 3.0).sqrt());
    let denom = 3.0 * eta * eta + C64::new(1.0 + 5.0 * s2 / 3.0, 0.0);
    contract_root(|z| ctx.d0(z, s, eps), eta, denom)
}

/// Root of the transverse cubic on branch `j ∈ {−1, 0, 1}`, started at
/// `γ_j = ij·√(1+s²)`.
pub fn solve_root_d1(ctx: &DispersionContext<'_>, j: i32, s: f64, eps: f64) -> Result<RootOutcome> {
    guard_low(s, eps)?;
    if !(-1..=1).contains(&j) {
        return Err(Error::InvalidInput(format!(
            "transverse branch index must be −1, 0, or 1 (got {j})"
        )));
    }
    let s2 = s * s;
    let gamma = C64::new(0.0, j as f64 * (1.0 + s2).sqrt());
    let denom = 3.0 * gamma * gamma + C64::new(1.0 + s2, 0.0);
    contract_root(|z| ctx.d1(z, s, eps), gamma, denom)
}

/// Root of the high-frequency quadratic on branch `j ∈ {−1, +1}`. The fixed
/// point `z ↦ (R₀ − √(R₀² − 4s²))/2` (with `R₀ = ε·R̃(εz)`) converges on the
/// lower branch; the upper branch is its complex conjugate.
pub fn solve_root_d2(
    ctx: &DispersionContext<'_>,
    j: i32,
    s: f64,
    eps: f64,
) -> Result<RootOutcome> {
    if j != -1 && j != 1 {
        return Err(Error::InvalidInput(format!(
            "field branch index must be −1 or +1 (got {j})"
        )));
    }
    if eps * s < HIGH_FREQ_RADIUS {
        return Err(Error::InvalidInput(format!(
            "field quadratic is only valid for εs ≥ {HIGH_FREQ_RADIUS} (got εs = {})",
            eps * s
        )));
    }
    let mut z = -IM * s;
    let mut iterations = 0usize;
    let mut ratio = 0.0_f64;
    let mut prev_step = f64::NAN;
    let mut converged = false;
    while iterations < MAX_ITER {
        let r0 = eps * ctx.transverse_resolvent(z * eps, s, eps)?;
        let zn = 0.5 * (r0 - (r0 * r0 - C64::new(4.0 * s * s, 0.0)).sqrt());
        iterations += 1;
        let step = (zn - z).norm();
        if prev_step.is_finite() && prev_step > 0.0 {
            ratio = ratio.max(step / prev_step);
        }
        prev_step = step;
        z = zn;
        if step <= STEP_TOL * z.norm().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::RootSolve(format!(
            "field-branch fixed point did not settle within {MAX_ITER} iterations at s = {s}, \
             eps = {eps}"
        )));
    }
    let z_out = if j == 1 { z.conj() } else { z };
    let residual = ctx.d2(z_out, s, eps)?.norm() / z_out.norm_sqr().max(1.0);
    Ok(RootOutcome {
        z: z_out,
        residual,
        iterations,
        contraction_ratio: ratio,
        polished: false,
    })
}

/// An eigenpair of the mode operator reconstructed in closed form from a
/// dispersion root (exact up to the root residual and one resolvent solve).
#[derive(Debug, Clone)]
pub struct ConstructedPair {
    /// Low-frequency label −1..7.
    pub label: i32,
    /// Mode-operator eigenvalue `λ = ε·z`.
    pub lambda: C64,
    pub state: Array1<C64>,
    pub root: RootOutcome,
}

/// All nine low-frequency eigenpairs at `ω = e₁`, labels −1..7 in order:
/// the longitudinal trio from the 3×3 dispersion matrix's null vector plus a
/// microscopic resolvent correction, and the transverse sextet in closed
/// form from the second cubic's roots.
pub fn low_freq_pairs(
    ctx: &DispersionContext<'_>,
    s: f64,
    eps: f64,
) -> Result<Vec<ConstructedPair>> {
    guard_low(s, eps)?;
    let c = ctx.c;
    let nv = c.n_nodes();
    let (x2, x3, y2, y3) = (nv, nv + 1, nv + 2, nv + 3);
    let chi0 = c.chi(0).to_owned();
    let chi4 = c.chi(4).to_owned();
    let v1chi0 = c.v_times(0, c.chi(0));
    let v1 = c.quadrature.nodes.column(0);
    let mut out = Vec::with_capacity(9);

    for j in [-1, 0, 1] {
        let root = solve_root_d0(ctx, j, s, eps)?;
        let z = root.z;
        let mm = ctx.dispersion_matrix(z, s, eps)?;
        let (_, _, vt) = mm.svd(false, true)?;
        let vt = vt.ok_or_else(|| Error::RootSolve("SVD returned no right factor".into()))?;
        let null = vt.row(2).mapv(|x| x.conj());
        let mut p0 = Array1::<C64>::zeros(nv);
        for i in 0..nv {
            p0[i] = null[0] * chi0[i] + null[1] * v1chi0[i] + null[2] * chi4[i];
        }
        let rhs = Array1::from_iter((0..nv).map(|i| v1[i] * p0[i]));
        let corr = ctx.resolvent_p1(z * eps, s * eps, rhs.view())?;
        let mut state = Array1::<C64>::zeros(nv + 4);
        for i in 0..nv {
            state[i] = p0[i] + IM * (eps * s) * corr[i];
        }
        out.push(ConstructedPair {
            label: j,
            lambda: eps * z,
            state,
            root,
        });
    }

    let mut d1_roots: HashMap<i32, RootOutcome> = HashMap::new();
    for jj in [-1, 0, 1] {
        d1_roots.insert(jj, solve_root_d1(ctx, jj, s, eps)?);
    }
    for (label, jj, wsel) in [
        (2, 0, 2usize),
        (3, 0, 3),
        (4, -1, 2),
        (5, -1, 3),
        (6, 1, 2),
        (7, 1, 3),
    ] {
        let root = d1_roots[&jj];
        let y = root.z;
        let r22 = ctx.moments_at(y * eps, s * eps)?.r22;
        let vw = c.v_times(wsel - 1, c.chi(0));
        let rhs = Array1::from_iter((0..nv).map(|i| C64::new(v1[i] * vw[i], 0.0)));
        let corr = ctx.resolvent_p1(y * eps, s * eps, rhs.view())?;
        let mut state = Array1::<C64>::zeros(nv + 4);
        for i in 0..nv {
            state[i] = C64::new(vw[i], 0.0) + IM * (eps * s) * corr[i];
        }
        let xcoef = y - (eps * s * s) * r22;
        let ycoef = IM * s / y * xcoef;
        if wsel == 2 {
            state[x3] = xcoef;
            state[y2] = ycoef;
        } else {
            state[x2] = -xcoef;
            state[y3] = ycoef;
        }
        out.push(ConstructedPair {
            label,
            lambda: eps * y,
            state,
            root,
        });
    }
    Ok(out)
}

/// A field-branch eigenpair for `εs ≥ HIGH_FREQ_RADIUS`: kinetic part
/// `ε(β − B̃)⁻¹(v·W)χ₀`, rotated electric field `ω×W`, rotated magnetic
/// field `(iεs/β)W`, with `β = ε·z` from the quadratic's root.
#[derive(Debug, Clone)]
pub struct HighFreqPair {
    /// Quadratic branch: −1 (lower half-plane) or +1 (conjugate).
    pub branch: i32,
    /// Transverse direction index: 2 for `W = e₂`, 3 for `W = e₃`.
    pub transverse: usize,
    pub beta: C64,
    pub state: Array1<C64>,
    pub root: RootOutcome,
}

pub fn high_freq_eigpair(
    ctx: &DispersionContext<'_>,
    branch: i32,
    transverse: usize,
    s: f64,
    eps: f64,
) -> Result<HighFreqPair> {
    if transverse != 2 && transverse != 3 {
        return Err(Error::InvalidInput(format!(
            "transverse direction must be 2 or 3 (got {transverse})"
        )));
    }
    let root = solve_root_d2(ctx, branch, s, eps)?;
    let beta = eps * root.z;
    let c = ctx.c;
    let nv = c.n_nodes();
    let (x2, x3, y2, y3) = (nv, nv + 1, nv + 2, nv + 3);
    let mut a = ctx.kinetic_cached(s, eps);
    a.mapv_inplace(|v| -v);
    for i in 0..nv {
        a[[i, i]] += beta;
    }
    let fact = a.factorize()?;
    let vw = if transverse == 2 {
        &ctx.v2chi0
    } else {
        &ctx.v3chi0
    };
    let rhs = vw.mapv(|x| C64::new(eps * x, 0.0));
    let w = fact.solve(&rhs)?;
    let mut state = Array1::<C64>::zeros(nv + 4);
    for i in 0..nv {
        state[i] = w[i];
    }
    let ycoef = IM * (eps * s) / beta;
    if transverse == 2 {
        state[x3] = C64::new(1.0, 0.0);
        state[y2] = ycoef;
    } else {
        state[x2] = C64::new(-1.0, 0.0);
        state[y3] = ycoef;
    }
    Ok(HighFreqPair {
        branch,
        transverse,
        beta,
        state,
        root,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mode::{assemble_mode, b_of_s, eig_mode, eigpair_residual, eta_of_s};
    use crate::test_support::shared_n8;

    #[test]
    fn resolvent_moments_reference_points() {
        let (c, m) = shared_n8();
        let ctx = DispersionContext::new(c);
        let zero = C64::new(0.0, 0.0);
        let at0 = ctx.moments_at(zero, 0.0).unwrap();
        assert!((at0.r11.re - m.m11).abs() < 1e-9, "r11 {} vs {}", at0.r11.re, m.m11);
        assert!((at0.r22.re - m.m22).abs() < 1e-9);
        assert!((at0.r44.re - m.m44).abs() < 1e-9);
        assert!((at0.r14.re - m.m14).abs() < 1e-9);
        assert!(at0.r11.im.abs() < 1e-12 && at0.r44.im.abs() < 1e-12);
        // The shifted operator stays complex-symmetric, so the two cross
        // moments coincide at any argument.
        let generic = ctx.moments_at(C64::new(0.02, 0.01), 0.3).unwrap();
        assert!(
            (generic.r14 - generic.r41).norm() < 1e-10,
            "cross moments differ: {} vs {}",
            generic.r14,
            generic.r41
        );
        // Transport damping washes out as the streaming frequency grows.
        let mags: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&es| ctx.moments_at(zero, es).unwrap().r22.norm())
            .collect();
        assert!(mags[0] > mags[1] && mags[1] > mags[2], "{mags:?}");
    }

    #[test]
    fn uncoupled_roots_land_in_one_step() {
        let (c, _) = shared_n8();
        let ctx = DispersionContext::new(c);
        let s = 0.7;
        for j in [-1, 0, 1] {
            let r0 = solve_root_d0(&ctx, j, s, 0.0).unwrap();
            let eta = C64::new(0.0, j as f64 * (1.0 + 5.0 * s * s / 3.0).sqrt());
            assert!((r0.z - eta).norm() < 1e-13);
            assert!(r0.iterations <= 1, "expected immediate fixed point");
            let r1 = solve_root_d1(&ctx, j, s, 0.0).unwrap();
            let gamma = C64::new(0.0, j as f64 * (1.0 + s * s).sqrt());
            assert!((r1.z - gamma).norm() < 1e-13);
        }
    }

    #[test]
    fn low_freq_roots_follow_second_order_expansion() {
        let (c, m) = shared_n8();
        let ctx = DispersionContext::new(c);
        let s = 0.5;
        // λ-level residual |εz − (εη − ε²b)| is third order; z-level is
        // second order, so halving ε divides it by ≈4.
        let res_z = |eps: f64, j: i32, d1: bool| -> (f64, f64) {
            let (root, eta, b) = if d1 {
                let label = match j {
                    -1 => 4,
                    1 => 6,
                    _ => 2,
                };
                (
                    solve_root_d1(&ctx, j, s, eps).unwrap(),
                    eta_of_s(label, s),
                    b_of_s(label, s, m),
                )
            } else {
                (
                    solve_root_d0(&ctx, j, s, eps).unwrap(),
                    eta_of_s(j, s),
                    b_of_s(j, s, m),
                )
            };
            assert!(root.residual <= ROOT_TOL);
            assert!(
                root.contraction_ratio <= 1.0 + 1e-10,
                "contraction violated: ratio {}",
                root.contraction_ratio
            );
            let zres = (root.z - (eta - eps * b)).norm();
            let lres = (eps * root.z - (eps * eta - eps * eps * b)).norm();
            (zres, lres)
        };
        for (j, d1) in [(1, false), (-1, false), (1, true), (-1, true)] {
            let (za, la) = res_z(0.02, j, d1);
            let (zb, lb) = res_z(0.01, j, d1);
            let zr = za / zb;
            let lr = la / lb;
            assert!(
                (3.4..=4.6).contains(&zr),
                "z-residual ratio {zr:.2} out of range for j={j} d1={d1}"
            );
            assert!(
                (5.0..=12.0).contains(&lr),
                "λ-residual ratio {lr:.2} out of range for j={j} d1={d1}"
            );
        }
        // The two purely damped branches (heat root of the longitudinal
        // cubic, shear root of the transverse one) are real with drift odd
        // in ε: the third-order error term cancels and the residual is
        // fourth order, so halving ε quarters the z-residual (ratio ≈ 8)
        // and sixteenths the λ-residual.
        for d1 in [false, true] {
            let (za, la) = res_z(0.02, 0, d1);
            let (zb, lb) = res_z(0.01, 0, d1);
            assert!(
                (6.5..=9.5).contains(&(za / zb)),
                "damped-branch z ratio {:.2} (d1={d1})",
                za / zb
            );
            assert!(
                (13.0..=19.0).contains(&(la / lb)),
                "damped-branch λ ratio {:.2} (d1={d1})",
                la / lb
            );
        }
        // Conjugate structure of the two oscillation pairs.
        let zp = solve_root_d0(&ctx, 1, s, 0.02).unwrap().z;
        let zm = solve_root_d0(&ctx, -1, s, 0.02).unwrap().z;
        assert!((zp - zm.conj()).norm() < 1e-10);
        let yp = solve_root_d1(&ctx, 1, s, 0.02).unwrap().z;
        let ym = solve_root_d1(&ctx, -1, s, 0.02).unwrap().z;
        assert!((yp - ym.conj()).norm() < 1e-10);
    }

    #[test]
    fn constructed_pairs_match_brute_force_spectrum() {
        let (c, _) = shared_n8();
        let ctx = DispersionContext::new(c);
        let (s, eps) = (0.5, 0.05);
        let pairs = low_freq_pairs(&ctx, s, eps).unwrap();
        assert_eq!(pairs.len(), 9);
        let op = assemble_mode(c, s, eps).unwrap();
        for p in &pairs {
            let res = eigpair_residual(&op, p.lambda, p.state.view());
            assert!(
                res < 1e-8,
                "constructed pair {} has residual {res:.3e}",
                p.label
            );
        }
        // Each dispersion eigenvalue sits on top of a brute-force one.
        let out = eig_mode(&op, c.gap_mu).unwrap();
        for p in &pairs {
            let dist = out
                .branches
                .iter()
                .map(|b| (b.lambda - p.lambda).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(
                dist <= 10.0 * ROOT_TOL,
                "label {}: eigensolve distance {dist:.3e}",
                p.label
            );
        }
    }

    #[test]
    fn field_branch_roots_and_eigpairs() {
        let (c, _) = shared_n8();
        let ctx = DispersionContext::new(c);
        let (s, eps) = (60.0, 0.1);
        let lower = solve_root_d2(&ctx, -1, s, eps).unwrap();
        let upper = solve_root_d2(&ctx, 1, s, eps).unwrap();
        assert!((upper.z - lower.z.conj()).norm() < 1e-12);
        assert!(lower.z.re < 0.0, "field branch must decay: {}", lower.z);
        assert!(lower.residual < 1e-10, "normalized residual {:.3e}", lower.residual);
        // Oscillation frequency carries the unit plasma offset: |Im z| ≈
        // √(1+s²), which exceeds s by ≈1/(2s).
        let target = (1.0 + s * s).sqrt();
        assert!(
            (lower.z.im + target).abs() < 0.05,
            "Im z = {} vs −√(1+s²) = {}",
            lower.z.im,
            -target
        );
        // Decay weakens like 1/s.
        let farther = solve_root_d2(&ctx, -1, 2.0 * s, eps).unwrap();
        let ratio = lower.z.re / farther.z.re;
        assert!(
            (1.2..=3.0).contains(&ratio),
            "1/s decay scaling violated: ratio {ratio:.2}"
        );
        // All four constructed eigenpairs check out against the assembled
        // operator.
        let op = assemble_mode(c, s, eps).unwrap();
        for branch in [-1, 1] {
            for transverse in [2usize, 3] {
                let hf = high_freq_eigpair(&ctx, branch, transverse, s, eps).unwrap();
                let res = eigpair_residual(&op, hf.beta, hf.state.view());
                assert!(
                    res <= 10.0 * ROOT_TOL,
                    "branch {branch} W=e{transverse}: residual {res:.3e}"
                );
            }
        }
    }

    #[test]
    fn regime_guards_reject_out_of_range_requests() {
        let (c, _) = shared_n8();
        let ctx = DispersionContext::new(c);
        assert!(solve_root_d0(&ctx, 1, 10.0, 0.05).is_err());
        assert!(solve_root_d1(&ctx, 2, 0.5, 0.01).is_err());
        assert!(solve_root_d2(&ctx, 1, 10.0, 0.1).is_err());
        assert!(solve_root_d2(&ctx, 0, 100.0, 0.1).is_err());
        assert!(high_freq_eigpair(&ctx, 1, 4, 100.0, 0.1).is_err());
    }
}
