//! Closed-form scalars of `(k, d, β)`: the balance root `p`, `u`, first and
//! second moment rates, the overlap objective and its solver, the Lagrangian
//! overlap optimiser and asymptotic reference thresholds.
//!
//! All logarithms are natural.

use std::f64::consts::LN_2;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::{Beta, ModelParams};
use crate::real::{Hp, Real};

/// Root of `1 - 2p - c(1-p)^k` in `(0, 1/2]` with `c = 1 - e^{-β}`.
pub fn solve_p(k: usize, beta: Beta) -> f64 {
    solve_p_with_c(k, beta.penalty())
}

pub(crate) fn solve_p_with_c(k: usize, c: f64) -> f64 {
    assert!(k >= 1 && (0.0..=1.0).contains(&c), "solve_p needs k >= 1 and c in [0, 1]");
    if c == 0.0 {
        return 0.5;
    }
    let g = |p: f64| 1.0 - 2.0 * p - c * (1.0 - p).powi(k as i32);
    // g(0) = 1 - c >= 0 and g(1/2) < 0; g is decreasing on [0, 1/2].
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut p = 0.5 * (lo + hi);
    for _ in 0..3 {
        let dg = -2.0 + c * k as f64 * (1.0 - p).powi(k as i32 - 1);
        let next = p - g(p) / dg;
        if next > 0.0 && next <= 0.5 && g(next).abs() <= g(p).abs() {
            p = next;
        }
    }
    p
}

/// `solve_p` polished by Newton steps in the given arithmetic.
pub fn solve_p_real<T: Real>(k: usize, c: &T) -> T {
    let mut p = T::from_f64(solve_p_with_c(k, c.to_f64()));
    let one = T::int(1);
    let two = T::int(2);
    for _ in 0..6 {
        let q = one.clone() - p.clone();
        let g = one.clone() - two.clone() * p.clone() - c.clone() * q.powi(k as u32);
        let dg = -two.clone() + c.clone() * T::int(k as i64) * q.powi(k as u32 - 1);
        p = p - g / dg;
    }
    p
}

pub fn p_residual(k: usize, beta: Beta, p: f64) -> f64 {
    1.0 - 2.0 * p - beta.penalty() * (1.0 - p).powi(k as i32)
}

/// `u = (1-2p) / (2p(e^β - 1))`, evaluated as `e^{-β}(1-p)^k / (2p)` which is
/// the same quantity once `p` solves its equation.
pub fn compute_u(k: usize, beta: Beta) -> Result<f64> {
    let b = beta.require_finite("u")?;
    if b <= 0.0 {
        return invalid("u needs β > 0");
    }
    let p = solve_p(k, beta);
    Ok((-b).exp() * (1.0 - p).powi(k as i32) / (2.0 * p))
}

/// As [`compute_u`], but returns the limit 0 at `β = ∞`.
pub fn compute_u_or_limit(k: usize, beta: Beta) -> Result<f64> {
    match beta {
        Beta::Inf => Ok(0.0),
        _ => compute_u(k, beta),
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateParams {
    pub p: f64,
    pub u: f64,
    /// Offset in `d/k = 2^k ln 2 - c`.
    pub c: f64,
}

pub fn rate_params(p: &ModelParams) -> Result<RateParams> {
    Ok(RateParams { p: solve_p(p.k, p.beta), u: compute_u(p.k, p.beta)?, c: p.c() })
}

/// `ln 2 + (d/k) ln(1 - 2^{-k}(1 - e^{-β}))`.
pub fn first_moment_rate(p: &ModelParams) -> f64 {
    LN_2 + p.d / p.k as f64 * (-(-(p.k as f64)).exp2() * p.beta.penalty()).ln_1p()
}

/// `(1 - (k-1)d/k) ln 2 - (d/2) ln(p(1-p)) + (d/k) ln p`.
///
/// With `e = 1 - 2p` this equals `ln 2 - (d/2) ln(1 - e²) + (d/k) ln(1 - e)`,
/// which avoids cancelling terms of size `d`.
pub fn balanced_lower_bound(p: &ModelParams) -> f64 {
    let root = solve_p(p.k, p.beta);
    let e = p.beta.penalty() * (1.0 - root).powi(p.k as i32);
    LN_2 - 0.5 * p.d * (-e * e).ln_1p() + p.d / p.k as f64 * (-e).ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FAlpha {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Second moment exponent `f(α)` and its first two derivatives.
pub fn f_alpha(alpha: f64, p: &ModelParams) -> FAlpha {
    f_alpha_t(alpha, 1.0 - alpha, p)
}

/// Same as [`f_alpha`] with `t = 1 - α` supplied separately, for `α` near 1.
pub fn f_alpha_t(alpha: f64, t: f64, p: &ModelParams) -> FAlpha {
    assert!((0.0..=1.0).contains(&alpha) && (0.0..=1.0).contains(&t), "α outside [0, 1]");
    let k = p.k as f64;
    let c = p.beta.penalty();
    let two_k = k.exp2();
    let ak = if t < 0.5 { (k * (-t).ln_1p()).exp() } else { alpha.powi(p.k as i32) };
    let ak1 = if alpha > 0.0 { ak / alpha } else { 0.0 };
    let ak2 = if alpha > 0.0 { ak1 / alpha } else { 0.0 };
    let shift = -2.0 * c / two_k + ak * c * c / two_k;
    let denom = 1.0 + shift;
    let xlnx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    let value = LN_2 - xlnx(alpha) - xlnx(t) + p.d / k * shift.ln_1p();
    let drift = p.d * ak1 * c * c / (two_k * denom);
    let d1 = (t / alpha).ln() + drift;
    let d2 = -1.0 / alpha - 1.0 / t + (k - 1.0) * p.d * ak2 * c * c / (two_k * denom)
        - k * p.d * ak1 * ak1 * c.powi(4) / (two_k * two_k * denom * denom);
    FAlpha { value, d1, d2 }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stationary {
    pub alpha: f64,
    /// `1 - α`, kept separately since it can be far below machine epsilon relative to 1.
    pub one_minus_alpha: f64,
    pub value: f64,
    pub is_max: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FScan {
    /// Local maximum closest to 1/2.
    pub alpha_star: f64,
    /// Local maximum nearest to 1, distinct from `alpha_star`.
    pub alpha_low_star: Option<Stationary>,
    /// Local minimum between the two maxima.
    pub local_min: Option<Stationary>,
    pub global_max_location: f64,
    pub stationary: Vec<Stationary>,
}

/// Locates the stationary points of `f` on `(0, 1)`.
///
/// The grid is uniform in `α` with `grid` points plus a geometric grid in
/// `1 - α` reaching down to `2^{-3k}`, so maxima exponentially close to 1 are
/// resolved. Each sign change of `f'` is refined by golden-section search on
/// `f` in the coordinate `ln(1 - α)`.
pub fn scan_f(p: &ModelParams, grid: usize) -> FScan {
    assert!(grid >= 4, "grid needs at least 4 points");
    let mut ts: Vec<f64> = (1..grid).map(|i| 1.0 - i as f64 / grid as f64).collect();
    let floor = (-3.0 * p.k as f64).exp2().max(1e-300);
    let mut t = 1.0 / grid as f64;
    while t > floor {
        t *= 0.95;
        ts.push(t);
    }
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let eval = |t: f64| f_alpha_t(1.0 - t, t, p);
    let mut out = Vec::new();
    for w in ts.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let (da, db) = (eval(ta).d1, eval(tb).d1);
        if (da > 0.0) == (db > 0.0) {
            continue;
        }
        // Moving towards α = 1 means decreasing t, so a max has d1 going + to -.
        let is_max = da > 0.0;
        let sign = if is_max { 1.0 } else { -1.0 };
        let lt = golden(|lt: f64| sign * eval(lt.exp()).value, tb.ln(), ta.ln());
        let t_opt = lt.exp();
        out.push(Stationary {
            alpha: 1.0 - t_opt,
            one_minus_alpha: t_opt,
            value: eval(t_opt).value,
            is_max,
        });
    }
    let maxima: Vec<&Stationary> = out.iter().filter(|s| s.is_max).collect();
    let bulk = maxima
        .iter()
        .min_by(|a, b| (a.alpha - 0.5).abs().partial_cmp(&(b.alpha - 0.5).abs()).unwrap())
        .map(|s| s.alpha)
        .unwrap_or(f64::NAN);
    let high = maxima
        .iter()
        .filter(|s| s.alpha != bulk)
        .min_by(|a, b| a.one_minus_alpha.partial_cmp(&b.one_minus_alpha).unwrap())
        .copied()
        .copied();
    let local_min = high.and_then(|h| {
        out.iter()
            .filter(|s| !s.is_max && s.alpha > bulk && s.alpha < h.alpha)
            .min_by(|a, b| a.value.partial_cmp(&b.value).unwrap())
            .copied()
    });
    let global = maxima
        .iter()
        .max_by(|a, b| a.value.partial_cmp(&b.value).unwrap())
        .map(|s| s.alpha)
        .unwrap_or(f64::NAN);
    FScan { alpha_star: bulk, alpha_low_star: high, local_min, global_max_location: global, stationary: out }
}

/// Maximiser of a unimodal function on `[a, b]`.
fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        }
    }
    0.5 * (a + b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverlapSolution {
    pub p11: f64,
    pub p1m1: f64,
    pub pm11: f64,
    pub pm1m1: f64,
}

impl OverlapSolution {
    pub fn from_free(p11: f64, p1m1: f64) -> Self {
        OverlapSolution { p11, p1m1, pm11: p1m1, pm1m1: 1.0 - p11 - 2.0 * p1m1 }
    }
    pub fn sum(&self) -> f64 {
        self.p11 + self.p1m1 + self.pm11 + self.pm1m1
    }
}

/// Precomputed `(k, β, c, p, u)` for the overlap objective in arithmetic `T`.
#[derive(Debug, Clone)]
pub struct OverlapCtx<T: Real> {
    pub k: usize,
    pub beta: T,
    pub p: T,
    pub u: T,
}

fn xlogy<T: Real>(x: &T, y: &T) -> T {
    if *x == T::int(0) {
        T::int(0)
    } else {
        x.clone() * (x.clone() / y.clone()).ln()
    }
}

fn kl4<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    a.iter().zip(b.iter()).fold(T::int(0), |acc, (x, y)| acc + xlogy(x, y))
}

impl<T: Real> OverlapCtx<T> {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let b = params.beta.require_finite("overlap objective")?;
        if b <= 0.0 {
            return invalid("overlap objective needs β > 0");
        }
        let beta = T::from_f64(b);
        let one = T::int(1);
        let emb = (-beta.clone()).exp();
        let c = one.clone() - emb.clone();
        let p = solve_p_real(params.k, &c);
        let u = emb * (one - p.clone()).powi(params.k as u32) / (T::int(2) * p.clone());
        Ok(OverlapCtx { k: params.k, beta, p, u })
    }

    fn split(&self, p11: &T, p1m: &T) -> (T, T) {
        let pmm = T::int(1) - p11.clone() - T::int(2) * p1m.clone();
        let pm = p1m.clone() + pmm.clone();
        (pmm, pm)
    }

    /// Objective with the symmetric constraints substituted.
    pub fn frak_f(&self, omega: &T, s: &T, p11: &T, p1m: &T) -> T {
        let k = self.k as u32;
        let (pmm, pm) = self.split(p11, p1m);
        let one = T::int(1);
        let two = T::int(2);
        let half = one.clone() / two.clone();
        let u = self.u.clone();
        let pmk = pm.powi(k);
        let pmmk = pmm.powi(k);
        let first = kl4(
            [s.clone(), u.clone() - s.clone(), u.clone() - s.clone(), one.clone() - two.clone() * u + s.clone()],
            [
                pmmk.clone(),
                pmk.clone() - pmmk.clone(),
                pmk.clone() - pmmk.clone(),
                one - two * pmk + pmmk,
            ],
        );
        let second = kl4(
            [omega.clone(), half.clone() - omega.clone(), half - omega.clone(), omega.clone()],
            [p11.clone(), p1m.clone(), p1m.clone(), pmm],
        );
        -first + T::int(self.k as i64) * second
    }

    /// Residuals of the two defining equations.
    pub fn residual(&self, omega: &T, s: &T, p11: &T, p1m: &T) -> (T, T) {
        let k = self.k as u32;
        let (pmm, pm) = self.split(p11, p1m);
        let one = T::int(1);
        let two = T::int(2);
        let u = self.u.clone();
        let pmk1 = pm.powi(k - 1);
        let pmk = pmk1.clone() * pm.clone();
        let pmmk = pmm.powi(k);
        let d1 = one.clone() - two.clone() * pmk.clone() + pmmk.clone();
        let d2 = pmk - pmmk;
        let w = one.clone() - two.clone() * u.clone() + s.clone();
        let e1 = w.clone() * p11.clone() / d1.clone() - omega.clone();
        let e2 = (u - s.clone()) * p1m.clone() * pmk1.clone() / d2
            + w * p1m.clone() * (one.clone() - pmk1) / d1
            - (one / two - omega.clone());
        (e1, e2)
    }

    fn res_norm(&self, omega: &T, s: &T, p11: &T, p1m: &T) -> f64 {
        let (a, b) = self.residual(omega, s, p11, p1m);
        a.to_f64().abs().max(b.to_f64().abs())
    }

    fn feasible(&self, p11: &T, p1m: &T) -> bool {
        let zero = T::int(0);
        let (pmm, _) = self.split(p11, p1m);
        *p11 > zero && *p1m > zero && pmm > zero
    }

    /// Newton on `(p11, p1m1)` from `(ω, 1/2 - ω)` with a central-difference
    /// Jacobian (step `jac_h`) and step halving whenever the residual grows.
    pub fn solve(&self, omega: &T, s: &T, jac_h: f64, tol: f64, accept: f64) -> Result<(T, T)> {
        let half = T::int(1) / T::int(2);
        let mut x = (omega.clone(), half - omega.clone());
        let mut r = self.res_norm(omega, s, &x.0, &x.1);
        let mut history = vec![r];
        let h = T::from_f64(jac_h);
        let two = T::int(2);
        for _ in 0..60 {
            if r <= tol {
                break;
            }
            let (e1, e2) = self.residual(omega, s, &x.0, &x.1);
            let col = |dx: &T, dy: &T| {
                let (a1, a2) =
                    self.residual(omega, s, &(x.0.clone() + dx.clone()), &(x.1.clone() + dy.clone()));
                let (b1, b2) =
                    self.residual(omega, s, &(x.0.clone() - dx.clone()), &(x.1.clone() - dy.clone()));
                let den = two.clone() * h.clone();
                ((a1 - b1) / den.clone(), (a2 - b2) / den)
            };
            let zero = T::int(0);
            let (j11, j21) = col(&h, &zero);
            let (j12, j22) = col(&zero, &h);
            let det = j11.clone() * j22.clone() - j12.clone() * j21.clone();
            if det == zero {
                break;
            }
            let dx0 = (j22 * e1.clone() - j12 * e2.clone()) / det.clone();
            let dx1 = (j11 * e2 - j21 * e1) / det;
            let mut scale = T::int(1);
            let mut moved = false;
            for _ in 0..40 {
                let cand = (x.0.clone() - scale.clone() * dx0.clone(), x.1.clone() - scale.clone() * dx1.clone());
                if self.feasible(&cand.0, &cand.1) {
                    let rc = self.res_norm(omega, s, &cand.0, &cand.1);
                    if rc < r {
                        x = cand;
                        r = rc;
                        moved = true;
                        break;
                    }
                }
                scale = scale / two.clone();
            }
            history.push(r);
            if !moved {
                break;
            }
        }
        if r <= accept {
            Ok(x)
        } else {
            Err(Error::SolverFailure(format!("overlap system did not converge, residual trace {history:?}")))
        }
    }
}

fn check_overlap_domain(k: usize, u: f64, omega: f64, s: f64) -> Result<()> {
    let w = (-(k as f64) / 3.0).exp2();
    if !(omega >= 0.25 - w && omega <= 0.25 + w) {
        return invalid(format!("ω = {omega} outside [1/4 - 2^(-k/3), 1/4 + 2^(-k/3)]"));
    }
    if !(s >= 0.0 && s <= u) {
        return invalid(format!("s = {s} outside [0, u = {u}]"));
    }
    Ok(())
}

/// Solution of the symmetric overlap system at `(ω, s)`.
pub fn solve_frakp(omega: f64, s: f64, p: &ModelParams) -> Result<OverlapSolution> {
    let ctx = OverlapCtx::<f64>::new(p)?;
    check_overlap_domain(p.k, ctx.u, omega, s)?;
    let (p11, p1m) = ctx.solve(&omega, &s, 1e-7, 1e-15, 1e-12)?;
    Ok(OverlapSolution::from_free(p11, p1m))
}

/// The two-term divergence objective at an explicit `q`.
#[allow(non_snake_case)]
pub fn frak_F(omega: f64, s: f64, q: &OverlapSolution, p: &ModelParams) -> Result<f64> {
    let ctx = OverlapCtx::<f64>::new(p)?;
    if !(omega > 0.0 && omega < 0.5) || !(s >= 0.0 && s <= ctx.u) {
        return invalid("need ω in (0, 1/2) and s in [0, u]");
    }
    let entries = [q.p11, q.p1m1, q.pm11, q.pm1m1];
    if entries.iter().any(|&v| !(v > 0.0 && v < 1.0)) || (q.sum() - 1.0).abs() > 1e-12 || q.p1m1 != q.pm11 {
        return invalid("q must be a symmetric distribution with interior entries");
    }
    Ok(ctx.frak_f(&omega, &s, &q.p11, &q.p1m1))
}

#[allow(non_snake_case)]
/// Objective evaluated at the solved overlap distribution.
pub fn F_of(omega: f64, s: f64, p: &ModelParams) -> Result<f64> {
    let ctx = OverlapCtx::<f64>::new(p)?;
    check_overlap_domain(p.k, ctx.u, omega, s)?;
    let (p11, p1m) = ctx.solve(&omega, &s, 1e-7, 1e-15, 1e-12)?;
    Ok(ctx.frak_f(&omega, &s, &p11, &p1m))
}

/// `F(1/4, u²)` from its closed form
/// `-2(k-1) ln 2 - k ln(p(1-p)) + 2 ln p + 2βu`.
pub fn f_stationary_closed_form(p: &ModelParams) -> Result<f64> {
    let b = p.beta.require_finite("overlap objective")?;
    let k = p.k as f64;
    let root = solve_p(p.k, p.beta);
    let u = compute_u(p.k, p.beta)?;
    Ok(-2.0 * (k - 1.0) * LN_2 - k * (root * (1.0 - root)).ln() + 2.0 * root.ln() + 2.0 * b * u)
}

/// Central-difference gradient `(∂F/∂ω, ∂F/∂s)` in 40-digit arithmetic.
/// `s = None` evaluates at the candidate stationary point `s = u²`.
pub fn grad_f_hp(omega: f64, s: Option<f64>, p: &ModelParams) -> Result<[f64; 2]> {
    let ctx = OverlapCtx::<Hp>::new(p)?;
    let omega = Hp::from_f64(omega);
    let s = match s {
        Some(s) => Hp::from_f64(s),
        None => ctx.u.clone() * ctx.u.clone(),
    };
    let eval = |w: &Hp, s: &Hp| -> Result<Hp> {
        let (a, b) = ctx.solve(w, s, 1e-20, 1e-38, 1e-30)?;
        Ok(ctx.frak_f(w, s, &a, &b))
    };
    let hw = Hp::from_f64(1e-12);
    let hs = Hp::from_f64(1e-12) * ctx.u.clone();
    let two = Hp::int(2);
    let gw = (eval(&(omega.clone() + hw.clone()), &s)? - eval(&(omega.clone() - hw.clone()), &s)?)
        / (two.clone() * hw);
    let gs = (eval(&omega, &(s.clone() + hs.clone()))? - eval(&omega, &(s - hs.clone()))?) / (two * hs);
    Ok([gw.to_f64(), gs.to_f64()])
}

#[derive(Debug, Clone, Serialize)]
pub struct LagrangeSolution {
    pub lambda: f64,
    /// `α₁₁` indexed by the total degree `d⁺ + d⁻`.
    pub alpha11: Vec<f64>,
    /// Entropy objective at the optimum.
    pub m_value: f64,
    /// `Σ P(d⁺)P(d⁻)(d⁺ + d⁻) α₁₁ - dω`.
    pub constraint_residual: f64,
}

/// Poisson truncation point leaving negligible mass.
pub fn lagrange_trunc(d: f64) -> usize {
    50usize.max((d + 12.0 * d.sqrt()).ceil() as usize)
}

/// `Po(d)` probabilities of `0..=trunc`, which also give the law of `d⁺ + d⁻`
/// for independent `d^± ~ Po(d/2)`.
fn poisson_pmf(d: f64, trunc: usize) -> Vec<f64> {
    let mut lp = -d;
    let mut out = Vec::with_capacity(trunc + 1);
    for n in 0..=trunc {
        if n > 0 {
            lp += (d / n as f64).ln();
        }
        out.push(lp.exp());
    }
    out
}

/// Achieved `ω` for a given `λ`.
pub fn lagrange_omega(lambda: f64, d: f64, trunc: usize) -> f64 {
    let pmf = poisson_pmf(d, trunc);
    0.25 - pmf.iter().enumerate().map(|(n, w)| w * n as f64 * (lambda * n as f64 / 2.0).tanh()).sum::<f64>()
        / (4.0 * d)
}

/// Solves for `λ` with `α₁₁(n) = (1 - tanh(λn/2))/4` hitting the target
/// overlap. The achieved overlap decreases strictly in `λ` from 1/2 to 0.
pub fn lagrange_overlap(omega_target: f64, d: f64, trunc: Option<usize>) -> Result<LagrangeSolution> {
    if !(d > 0.0 && d.is_finite()) {
        return invalid("Lagrangian overlap needs finite d > 0");
    }
    if !(omega_target > 0.0 && omega_target < 0.5) {
        return invalid(format!("target overlap {omega_target} outside the achievable range (0, 1/2)"));
    }
    let trunc = trunc.unwrap_or_else(|| lagrange_trunc(d));
    let pmf = poisson_pmf(d, trunc);
    let omega_of = |l: f64| {
        0.25 - pmf.iter().enumerate().map(|(n, w)| w * n as f64 * (l * n as f64 / 2.0).tanh()).sum::<f64>()
            / (4.0 * d)
    };
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while omega_of(lo) < omega_target {
        lo *= 2.0;
        if lo < -1e6 {
            return Err(Error::SolverFailure("λ bracket diverged".into()));
        }
    }
    while omega_of(hi) > omega_target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::SolverFailure("λ bracket diverged".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if omega_of(mid) > omega_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    let alpha11: Vec<f64> = (0..=trunc).map(|n| (1.0 - (lambda * n as f64 / 2.0).tanh()) / 4.0).collect();
    let xlnx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    let m_value = -2.0 * pmf.iter().zip(&alpha11).map(|(w, &a)| w * (xlnx(a) + xlnx(0.5 - a))).sum::<f64>();
    let achieved: f64 = pmf.iter().zip(&alpha11).enumerate().map(|(n, (w, a))| w * n as f64 * a).sum();
    Ok(LagrangeSolution { lambda, alpha11, m_value, constraint_residual: achieved - d * omega_target })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Thresholds {
    /// `2^k k ln 2 - (1 + ln 2)k/2`.
    pub d_sat_asym: f64,
    /// `k 2^k ln 2 - 10k²`.
    pub d_star: f64,
    /// `2^k k ln 2 - 3k ln 2 / 2`.
    pub rsb_low: f64,
}

/// Asymptotic reference degrees with vanishing corrections dropped.
pub fn reference_thresholds(k: usize) -> Thresholds {
    let kf = k as f64;
    let lead = kf.exp2() * kf * LN_2;
    Thresholds {
        d_sat_asym: lead - (1.0 + LN_2) * kf / 2.0,
        d_star: lead - 10.0 * kf * kf,
        rsb_low: lead - 3.0 * kf * LN_2 / 2.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(k: usize, d: f64, beta: f64) -> ModelParams {
        ModelParams::finite(k, d, beta).unwrap()
    }

    #[test]
    fn p_examples() {
        assert_eq!(solve_p(5, Beta::Finite(0.0)), 0.5);
        let hard = solve_p(3, Beta::Inf);
        assert!((hard - (3.0 - 5f64.sqrt()) / 2.0).abs() < 1e-15);
        // 40-digit value from an independent root finder.
        assert!((solve_p(3, Beta::Finite(LN_2)) - 0.460_811_127_189_110_883_474_124).abs() < 1e-15);
        assert!((solve_p(20, Beta::Finite(2.0)) - 0.499_999_587_688_933_702_298_563).abs() < 1e-16);
    }

    #[test]
    fn p_second_order_expansion() {
        let (k, beta) = (20usize, 2.0f64);
        let c = -(-beta).exp_m1();
        let kf = k as f64;
        let tk = (-kf).exp2();
        let e = 0.5 - c * tk / 2.0 - kf * c * c * tk * tk / 2.0;
        assert!((solve_p(k, Beta::Finite(beta)) - e).abs() <= 32.0 * kf * kf * tk * tk * tk);
    }

    #[test]
    fn p_residual_grid() {
        for k in 3..=25 {
            for beta in [Beta::Finite(0.1), Beta::Finite(1.0), Beta::Finite(2.0), Beta::Finite(8.0), Beta::Inf] {
                let p = solve_p(k, beta);
                assert!(p > 0.0 && p <= 0.5);
                assert!(p_residual(k, beta, p).abs() < 1e-12, "k={k} β={beta}");
            }
        }
    }

    #[test]
    fn u_examples() {
        let u = compute_u(3, Beta::Finite(LN_2)).unwrap();
        assert!((u - 0.085_043_243_313_016_861_351_627_88).abs() < 1e-15);
        assert!(compute_u(3, Beta::Inf).is_err());
        assert_eq!(compute_u_or_limit(3, Beta::Inf).unwrap(), 0.0);
        for k in [3usize, 5, 10, 20] {
            let mut prev = f64::INFINITY;
            for beta in [0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
                let u = compute_u(k, Beta::Finite(beta)).unwrap();
                assert!(u > 0.0 && u < 1.0 && u < prev);
                prev = u;
            }
        }
    }

    #[test]
    fn moment_rates() {
        assert_eq!(first_moment_rate(&params(3, 3.0, 0.0)), LN_2);
        assert!((first_moment_rate(&params(3, 3.0, 1.0)) - 0.610_835_575_208_944_395_339_816).abs() < 1e-15);
        for (k, d, b) in [(3, 3.0, 1.0), (10, 500.0, 2.0), (20, 1e6, 3.0)] {
            let p = params(k, d, b);
            assert!((f_alpha(0.5, &p).value - 2.0 * first_moment_rate(&p)).abs() < 1e-12);
        }
        let k = 20;
        let d = reference_thresholds(k).d_star;
        let bal = balanced_lower_bound(&params(k, d, 2.0));
        assert!((bal - 0.093_967_003_736_090_547_460_027_5).abs() < 1e-12);
    }

    #[test]
    fn balanced_bound_expansion_and_monotonicity() {
        let (k, beta) = (20usize, 2.0f64);
        let c = -(-beta).exp_m1();
        let tk = (-(k as f64)).exp2();
        for d in [1e3, 1e5, reference_thresholds(k).d_star] {
            let kf = k as f64;
            // Second-order coefficient -(k+1)/(2k), from e = 1 - 2p = c 2^{-k} + k c² 4^{-k} + ...
            let expansion = LN_2 - d / kf * c * tk - d * (kf + 1.0) / (2.0 * kf) * tk * tk * c * c;
            let err = (balanced_lower_bound(&params(k, d, beta)) - expansion).abs();
            assert!(err <= 64.0 * d * kf * kf * tk * tk * tk, "d={d} err={err}");
        }
        let mut prev = f64::INFINITY;
        for d in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let v = balanced_lower_bound(&params(5, d, 1.0));
            assert!(v < prev);
            prev = v;
        }
        let small = balanced_lower_bound(&params(5, 0.01, 1.0));
        assert!((small - LN_2).abs() < 0.01 / 5.0 * (-5f64).exp2() * 2.0);
    }

    #[test]
    fn f_alpha_derivatives_and_symmetry() {
        for (k, d, b) in [(3, 4.0, 1.0), (10, 6000.0, 2.0), (12, 20000.0, 5.0)] {
            let p = params(k, d, b);
            for i in 1..40 {
                let a = i as f64 / 40.0;
                let h = 1e-6;
                let fa = f_alpha(a, &p);
                let num1 = (f_alpha(a + h, &p).value - f_alpha(a - h, &p).value) / (2.0 * h);
                let num2 = (f_alpha(a + h, &p).d1 - f_alpha(a - h, &p).d1) / (2.0 * h);
                assert!((num1 - fa.d1).abs() <= 1e-6 * (1.0 + fa.d1.abs()), "k={k} α={a} {num1} {}", fa.d1);
                assert!((num2 - fa.d2).abs() <= 1e-6 * (1.0 + fa.d2.abs()), "k={k} α={a} {num2} {}", fa.d2);
                if a < 0.5 {
                    assert!(fa.value <= f_alpha(1.0 - a, &p).value + 1e-15);
                }
            }
        }
        let p = params(3, 1.0, 1.0);
        assert_eq!(f_alpha(1.0, &p).value, f_alpha_t(1.0, 0.0, &p).value);
        assert!(f_alpha(0.0, &p).value.is_finite());
    }

    #[test]
    fn landscape_at_k20() {
        let k = 20;
        let p = params(k, reference_thresholds(k).d_star, 2.0);
        let scan = scan_f(&p, 2000);
        assert!((scan.alpha_star - 0.5).abs() < 1e-4);
        assert_eq!(scan.global_max_location, scan.alpha_star);
        let min = scan.local_min.unwrap();
        let kf = k as f64;
        assert!(min.alpha > 1.0 - 2.0 * kf.ln() / kf && min.alpha < 1.0 - kf.powf(-1.5));
    }

    #[test]
    fn overlap_solution_at_stationary_point() {
        for k in [10usize, 12] {
            let p = params(k, 1.0, 2.0);
            let u = compute_u(k, p.beta).unwrap();
            let root = solve_p(k, p.beta);
            let q = solve_frakp(0.25, u * u, &p).unwrap();
            assert!((q.p11 - root * root).abs() < 1e-10);
            assert!((q.p1m1 - root * (1.0 - root)).abs() < 1e-10);
            assert!((q.pm1m1 - (1.0 - root).powi(2)).abs() < 1e-10);
            assert!((q.sum() - 1.0).abs() < 1e-14);
            let f = F_of(0.25, u * u, &p).unwrap();
            assert!((f - f_stationary_closed_form(&p).unwrap()).abs() < 1e-8);
        }
        // Pinned value from a 40-digit evaluation.
        let p = params(12, 1.0, 2.0);
        let u = compute_u(12, p.beta).unwrap();
        let f = F_of(0.25, u * u, &p).unwrap();
        assert!((f - -0.000_290_252_919_699_862_562_183_582).abs() < 1e-12);
    }

    #[test]
    fn overlap_box_and_validation() {
        let k = 12;
        let p = params(k, 1.0, 1.0);
        let u = compute_u(k, p.beta).unwrap();
        let w = (-(k as f64) / 3.0).exp2();
        for i in 0..=4 {
            for j in 0..=4 {
                let omega = 0.25 - 0.45 * w + 0.9 * w * i as f64 / 4.0;
                let s = u * j as f64 / 4.0;
                let q = solve_frakp(omega, s, &p).unwrap();
                for v in [q.p11, q.p1m1, q.pm11, q.pm1m1] {
                    assert!((v - 0.25).abs() <= w / 2.0, "ω={omega} s={s} v={v}");
                }
            }
        }
        assert!(solve_frakp(0.4, 0.0, &p).is_err());
        // Edge of the admissible ω range: p11 tracks ω, so it leaves the half-width box.
        let edge = solve_frakp(0.25 - w, 0.0, &p).unwrap();
        assert!((edge.p11 - (0.25 - w)).abs() < 1e-3);
        assert!(solve_frakp(0.25, 2.0 * u, &p).is_err());
        let bad = OverlapSolution::from_free(0.5, 0.3);
        assert!(frak_F(0.25, 0.0, &bad, &p).is_err());
    }

    #[test]
    fn frak_f_first_term_vanishes_when_matched() {
        let p = params(10, 1.0, 2.0);
        let ctx = OverlapCtx::<f64>::new(&p).unwrap();
        let q = OverlapSolution::from_free(0.26, 0.245);
        // Choose u and s so that the first distribution equals the second argument.
        let pm: f64 = q.p1m1 + q.pm1m1;
        let mut matched = ctx.clone();
        matched.u = pm.powi(10);
        let s = q.pm1m1.powi(10);
        let only_second = 10.0
            * [(0.25, q.p11), (0.25, q.p1m1), (0.25, q.p1m1), (0.25, q.pm1m1)]
                .iter()
                .map(|(a, b): &(f64, f64)| a * (a / b).ln())
                .sum::<f64>();
        assert!((matched.frak_f(&0.25, &s, &q.p11, &q.p1m1) - only_second).abs() < 1e-15);
    }

    #[test]
    fn stationarity_of_f_at_quarter() {
        let p = params(10, 1.0, 1.0);
        let g = grad_f_hp(0.25, None, &p).unwrap();
        assert!(g[0].abs() < 1e-6 && g[1].abs() < 1e-6, "{g:?}");
    }

    #[test]
    fn stationary_s_root() {
        // (u - s)² = s(1 - 2u + s) holds exactly at s = u².
        for u in [0.1f64, 1e-3, 1e-6] {
            let s = u * u;
            assert!(((u - s).powi(2) / (s * (1.0 - 2.0 * u + s))).ln().abs() < 1e-12);
        }
    }

    #[test]
    fn lagrangian() {
        let d = 5.0;
        let trunc = lagrange_trunc(d);
        assert_eq!(lagrange_omega(0.0, d, trunc), 0.25);
        let sol = lagrange_overlap(0.25, d, None).unwrap();
        assert!(sol.lambda.abs() < 1e-12);
        assert!(sol.alpha11.iter().all(|a| (a - 0.25).abs() < 1e-12));
        assert!((sol.m_value - 4f64.ln()).abs() < 1e-12);
        for target in [0.05, 0.2, 0.3, 0.45] {
            let sol = lagrange_overlap(target, d, None).unwrap();
            assert!(sol.constraint_residual.abs() < 1e-10);
        }
        let mut prev = f64::INFINITY;
        for i in -10..=10 {
            let w = lagrange_omega(i as f64 * 0.3, d, trunc);
            assert!(w < prev);
            prev = w;
        }
        assert!(lagrange_overlap(0.5, d, None).is_err());
        assert!(lagrange_overlap(0.2, 0.0, None).is_err());
    }

    #[test]
    fn thresholds() {
        let t = reference_thresholds(10);
        assert!((t.d_star - (10.0 * 1024.0 * LN_2 - 1000.0)).abs() < 1e-9);
        for k in 3..=40 {
            let t = reference_thresholds(k);
            assert!(t.rsb_low < t.d_sat_asym);
            if k >= 30 {
                assert!(t.d_star < t.d_sat_asym);
            }
        }
    }
}
