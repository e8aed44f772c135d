//! Bethe functional, the 1-RSB interpolation bound, the scalar gap function,
//! stable sets and polarization.
//!
//! Message laws are given as populations of `ρ` values. The clause-side
//! messages `μ` are `ρ` reflected to `1 - ρ` with probability 1/2; estimators
//! realize that law exactly by sampling from the population together with its
//! mirror image.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::f64::consts::LN_2;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::Serialize;

use crate::bp::log_add_exp;
use crate::density::{fast_index, FactorPool, Population, Sampling};
use crate::error::{invalid, Error, Result};
use crate::model::{check_len, Assignment, Formula, ModelParams};
use crate::rng::{self, Pois, CHUNK};

/// Monte Carlo value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Running mean and sum of squared deviations, merged chunk by chunk so the
/// result does not depend on the thread count.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0 {
            return o;
        }
        if o.n == 0 {
            return self;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * o.n as f64 / n as f64,
            m2: self.m2 + o.m2 + delta * delta * (self.n as f64 * o.n as f64) / n as f64,
        }
    }

    fn estimate(&self, shift: f64) -> McEstimate {
        let stderr = if self.n > 1 { (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt() } else { 0.0 };
        McEstimate { value: self.mean + shift, stderr, samples: self.n }
    }
}

fn finite_c(p: &ModelParams, op: &str) -> Result<f64> {
    Ok(-(-p.beta.require_finite(op)?).exp_m1())
}

/// The population followed by its mirror image.
fn reflected(pop: &Population) -> Vec<f64> {
    pop.samples().iter().copied().chain(pop.samples().iter().map(|&r| 1.0 - r)).collect()
}

fn pool_size(n: usize) -> usize {
    match Sampling::pooled_for(n) {
        Sampling::Pooled(s) => s,
        Sampling::Direct => n,
    }
}

/// Lazily computed moments `E μ^m` of the reflected law.
struct MuMoments<'a> {
    rho: &'a [f64],
    pw: Vec<f64>,
    pw1: Vec<f64>,
    values: Vec<f64>,
    /// Largest atom of the reflected law.
    max_mu: f64,
}

impl<'a> MuMoments<'a> {
    fn new(rho: &'a [f64]) -> Self {
        let max_mu = rho.iter().fold(0.0f64, |m, &r| m.max(r).max(1.0 - r));
        MuMoments { rho, pw: vec![1.0; rho.len()], pw1: vec![1.0; rho.len()], values: vec![1.0], max_mu }
    }

    /// `E μ^m`.
    fn get(&mut self, m: usize) -> f64 {
        while self.values.len() <= m {
            let mut s = 0.0;
            let mut s1 = 0.0;
            for ((a, b), &r) in self.pw.iter_mut().zip(self.pw1.iter_mut()).zip(self.rho) {
                *a *= r;
                *b *= 1.0 - r;
                s += *a;
                s1 += *b;
            }
            self.values.push(0.5 * (s + s1) / self.rho.len() as f64);
        }
        self.values[m]
    }
}

const SERIES_CAP: usize = 100_000;

/// Sums `Σ_{m≥1} coef(m) c^m (E μ^m)^e` for coefficients of non-increasing
/// magnitude. The tail is bounded geometrically by the largest atom.
fn moment_series(mom: &mut MuMoments<'_>, c: f64, e: usize, mut coef: impl FnMut(usize) -> f64) -> Result<f64> {
    let r_inf = c * mom.max_mu.powi(e as i32);
    let mut sum = 0.0;
    for m in 1..=SERIES_CAP {
        let term = coef(m) * c.powi(m as i32) * mom.get(m).powi(e as i32);
        sum += term;
        if r_inf < 1.0 {
            let tail = term.abs() * r_inf / (1.0 - r_inf);
            if tail <= 1e-17 * sum.abs() || tail < 1e-300 {
                return Ok(sum);
            }
        }
    }
    Err(Error::Undefined(format!("moment series did not converge in {SERIES_CAP} terms")))
}

/// `E ln(1 - c ∏_{j≤e} μ_j)`.
fn expected_log_factor(mom: &mut MuMoments<'_>, c: f64, e: usize) -> Result<f64> {
    moment_series(mom, c, e, |m| -1.0 / m as f64)
}

/// `ln E (1 - c ∏_{j≤e} μ_j)^y`.
fn log_expected_power(mom: &mut MuMoments<'_>, c: f64, e: usize, y: f64) -> Result<f64> {
    let mut a = 1.0;
    let s = moment_series(mom, c, e, |m| {
        a *= (m as f64 - 1.0 - y) / m as f64;
        a
    })?;
    Ok(s.ln_1p())
}

/// Plain Monte Carlo estimate of the Bethe functional. Each sample draws
/// `γ^± ~ Po(d/2)` and reflected messages and evaluates
/// `ln(P⁺ + P⁻) - (d(k-1)/k) ln(1 - c ∏_{j≤k} μ_j)`. The `k-1`-fold factors
/// come from a pool built on the reflected population.
pub fn bethe_functional<R: Rng + ?Sized>(
    pop: &Population,
    p: &ModelParams,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let c = finite_c(p, "the Bethe functional")?;
    if samples == 0 {
        return invalid("samples must be at least 1");
    }
    if p.d == 0.0 {
        return Ok(McEstimate { value: LN_2, stderr: 0.0, samples });
    }
    let k = p.k;
    let seed = rng::fork(rng);
    let refl = reflected(pop);
    let mu = &refl[..];
    let pool = FactorPool::build(&[mu], k - 1, c, pool_size(pop.len()), rng::stream(seed, 1).next_u64());
    let half = Pois::new(p.d / 2.0);
    let weight = p.d * (k - 1) as f64 / k as f64;
    let out_seed = rng::stream(seed, 2).next_u64();
    let chunks: Vec<Moments> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut r = rng::stream(out_seed, ci as u64);
            let mut acc = Moments::default();
            for _ in 0..CHUNK.min(samples - ci * CHUNK) {
                let mut plus = [0.0];
                let mut minus = [0.0];
                let gp = half.sample(&mut r);
                let gm = half.sample(&mut r);
                pool.accumulate(gp, &mut r, &mut plus);
                pool.accumulate(gm, &mut r, &mut minus);
                let mut prod = 1.0;
                for _ in 0..k {
                    prod *= mu[fast_index(&mut r, mu.len())];
                }
                acc.push(log_add_exp(plus[0], minus[0]) - weight * (-c * prod).ln_1p());
            }
            acc
        })
        .collect();
    Ok(chunks.into_iter().fold(Moments::default(), Moments::merge).estimate(0.0))
}

/// Rao-Blackwellized Bethe functional. Writing
/// `ln(P⁺ + P⁻) = (L⁺ + L⁻)/2 + ln 2cosh((L⁺ - L⁻)/2)`, the first part and the
/// clause term are computed from the moments of the reflected law, and only
/// the `2cosh` part is sampled. Same target as [`bethe_functional`], far
/// smaller variance at large `d`.
pub fn bethe_functional_rb<R: Rng + ?Sized>(
    pop: &Population,
    p: &ModelParams,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    let c = finite_c(p, "the Bethe functional")?;
    if samples == 0 {
        return invalid("samples must be at least 1");
    }
    if p.d == 0.0 {
        return Ok(McEstimate { value: LN_2, stderr: 0.0, samples });
    }
    let k = p.k;
    let mut mom = MuMoments::new(pop.samples());
    let e_factor = expected_log_factor(&mut mom, c, k - 1)?;
    let e_clause = expected_log_factor(&mut mom, c, k)?;
    let weight = p.d * (k - 1) as f64 / k as f64;
    let shift = 0.5 * p.d * e_factor - weight * e_clause;

    let seed = rng::fork(rng);
    let refl = reflected(pop);
    let pool = FactorPool::build(&[&refl], k - 1, c, pool_size(pop.len()), rng::stream(seed, 1).next_u64());
    let half = Pois::new(p.d / 2.0);
    let out_seed = rng::stream(seed, 2).next_u64();
    let chunks: Vec<Moments> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut r = rng::stream(out_seed, ci as u64);
            let mut acc = Moments::default();
            for _ in 0..CHUNK.min(samples - ci * CHUNK) {
                let mut plus = [0.0];
                let mut minus = [0.0];
                let gp = half.sample(&mut r);
                let gm = half.sample(&mut r);
                pool.accumulate(gp, &mut r, &mut plus);
                pool.accumulate(gm, &mut r, &mut minus);
                acc.push(log_2cosh_half(plus[0] - minus[0]));
            }
            acc
        })
        .collect();
    Ok(chunks.into_iter().fold(Moments::default(), Moments::merge).estimate(shift))
}

#[inline]
fn log_2cosh_half(delta: f64) -> f64 {
    let a = 0.5 * delta.abs();
    a + (-delta.abs()).exp().ln_1p()
}

/// Poisson log-pmf over the window carrying all but a negligible mass.
fn poisson_window(mean: f64) -> (usize, Vec<f64>) {
    if mean == 0.0 {
        return (0, vec![0.0]);
    }
    let sd = mean.sqrt();
    let lo = (mean - 12.0 * sd - 50.0).max(0.0).floor() as usize;
    let hi = (mean + 12.0 * sd + 50.0).ceil() as usize;
    let ln_mean = mean.ln();
    // ln(i!) accumulated up to `lo`, then carried along.
    let mut ln_fact: f64 = (1..=lo).map(|i| (i as f64).ln()).sum();
    let mut out = Vec::with_capacity(hi - lo + 1);
    for i in lo..=hi {
        if i > lo {
            ln_fact += (i as f64).ln();
        }
        out.push(i as f64 * ln_mean - mean - ln_fact);
    }
    (lo, out)
}

/// Bethe functional at the point mass `δ_{1/2}`:
/// `E ln(q^{γ⁺} + q^{γ⁻}) - (d(k-1)/k) ln(1 - c 2^{-k})` with
/// `q = 1 - c 2^{1-k}`, summed over a truncated pair of Poisson laws.
pub fn delta_half_closed_form(p: &ModelParams) -> Result<f64> {
    let c = finite_c(p, "the Bethe functional")?;
    let k = p.k as i32;
    let lq = (-c * 2f64.powi(1 - k)).ln_1p();
    let (lo, lp) = poisson_window(p.d / 2.0);
    let w: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let mut first = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let a = (lo + i) as f64 * lq;
        let mut row = 0.0;
        for (j, wj) in w.iter().enumerate() {
            row += wj * log_add_exp(a, (lo + j) as f64 * lq);
        }
        first += wi * row;
    }
    let weight = p.d * (k - 1) as f64 / k as f64;
    Ok(first - weight * (-c * 2f64.powi(-k)).ln_1p())
}

/// Message law fed to the interpolation bound.
#[derive(Debug, Clone, Copy)]
pub enum PiSpec<'a> {
    /// `(δ₀ + δ₁)/2`.
    Atomic,
    Population(&'a Population),
}

#[derive(Debug, Clone, Copy)]
pub struct InterpolationOptions {
    /// Outer samples of `(γ⁺, γ⁻)`.
    pub samples: usize,
    /// Inner replicas per outer sample for general laws at `y < 1`.
    pub inner: usize,
}

impl InterpolationOptions {
    pub fn new(samples: usize) -> Self {
        InterpolationOptions { samples, inner: 64 }
    }
}

/// Bound values over a grid of `y`, all computed from the same `(γ⁺, γ⁻)`
/// draws so differences between grid points carry paired errors.
#[derive(Debug, Clone, Serialize)]
pub struct InterpolationScan {
    pub ys: Vec<f64>,
    pub bounds: Vec<McEstimate>,
    /// Index of the largest `y`, the reference for `gaps`.
    pub reference: usize,
    /// `bound(y) - bound(y_ref)` with paired standard errors.
    pub gaps: Vec<McEstimate>,
    /// Index of the smallest bound value.
    pub argmin: usize,
}

/// Interpolation bound on `(1/n) E ln Z` at a single `y ∈ (0, 1]`.
pub fn interpolation_bound<R: Rng + ?Sized>(
    pi: PiSpec<'_>,
    y: f64,
    p: &ModelParams,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    Ok(interpolation_scan(pi, &[y], p, InterpolationOptions::new(samples), rng)?.bounds[0])
}

/// Log-pmf of `Bin(n, a)` restricted to the window within `LOG_CUT` of its mode.
fn binomial_window(n: usize, a: f64) -> (usize, Vec<f64>) {
    const LOG_CUT: f64 = 60.0;
    if n == 0 || a == 0.0 {
        return (0, vec![0.0]);
    }
    let lr = (a / (1.0 - a)).ln();
    let mut lp = n as f64 * (-a).ln_1p();
    let mut all = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for b in 0..=n {
        all.push(lp);
        best = best.max(lp);
        if lp < best - LOG_CUT {
            break;
        }
        lp += ((n - b) as f64 / (b + 1) as f64).ln() + lr;
    }
    let start = all.iter().position(|&l| l >= best - LOG_CUT).unwrap_or(0);
    let end = all.iter().rposition(|&l| l >= best - LOG_CUT).unwrap_or(0);
    (start, all[start..=end].to_vec())
}

/// `ln E[(P⁺ + P⁻)^y | γ^±]` for the atomic law. `P^± = e^{-β B^±}` with
/// `B^± ~ Bin(γ^±, 2^{1-k})` counting factors whose `k-1` messages all equal 1.
fn atomic_inner(plus: &(usize, Vec<f64>), minus: &(usize, Vec<f64>), beta: f64, y: f64, buf: &mut Vec<f64>) -> f64 {
    let (s1, l1) = plus;
    let (s2, l2) = minus;
    let max_delta = (s1 + l1.len()).max(s2 + l2.len());
    // ln (1 + e^{-βδ})^y
    let g: Vec<f64> = (0..=max_delta).map(|dl| y * (-beta * dl as f64).exp().ln_1p()).collect();
    buf.clear();
    let mut best = f64::NEG_INFINITY;
    for (i, a) in l1.iter().enumerate() {
        let bi = s1 + i;
        for (j, b) in l2.iter().enumerate() {
            let bj = s2 + j;
            let t = a + b - y * beta * bi.min(bj) as f64 + g[bi.abs_diff(bj)];
            best = best.max(t);
            buf.push(t);
        }
    }
    best + buf.iter().map(|t| (t - best).exp()).sum::<f64>().ln()
}

/// Jackknife-corrected `ln mean exp(v)`.
fn jackknife_log_mean_exp(v: &[f64]) -> f64 {
    let r = v.len();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let full = m + (s / r as f64).ln();
    if r < 2 {
        return full;
    }
    let loo: f64 = e.iter().map(|ei| m + ((s - ei).max(f64::MIN_POSITIVE) / (r - 1) as f64).ln()).sum::<f64>() / r as f64;
    r as f64 * full - (r - 1) as f64 * loo
}

/// Regression-adjusted mean of `x` using control variates with known mean zero.
fn control_variate_mean(x: &[f64], z: &[[f64; 2]]) -> McEstimate {
    let n = x.len();
    let nf = n as f64;
    let xm = x.iter().sum::<f64>() / nf;
    let zm = [z.iter().map(|v| v[0]).sum::<f64>() / nf, z.iter().map(|v| v[1]).sum::<f64>() / nf];
    let (mut s00, mut s01, mut s11, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (xi, zi) in x.iter().zip(z) {
        let (a, b, dx) = (zi[0] - zm[0], zi[1] - zm[1], xi - xm);
        s00 += a * a;
        s01 += a * b;
        s11 += b * b;
        t0 += a * dx;
        t1 += b * dx;
    }
    let det = s00 * s11 - s01 * s01;
    let (b0, b1, used) = if n > 4 && det > 1e-12 * s00 * s11 && det > 0.0 {
        ((s11 * t0 - s01 * t1) / det, (s00 * t1 - s01 * t0) / det, 2)
    } else if n > 3 && s00 > 0.0 {
        (t0 / s00, 0.0, 1)
    } else {
        (0.0, 0.0, 0)
    };
    let value = xm - b0 * zm[0] - b1 * zm[1];
    let rss: f64 = x
        .iter()
        .zip(z)
        .map(|(xi, zi)| {
            let e = xi - xm - b0 * (zi[0] - zm[0]) - b1 * (zi[1] - zm[1]);
            e * e
        })
        .sum();
    let dof = n.saturating_sub(1 + used).max(1) as f64;
    McEstimate { value, stderr: (rss / dof / nf).sqrt(), samples: n }
}

/// Interpolation bound on a grid of `y`. Each value is the right-hand side of
/// the 1-RSB interpolation inequality divided by `y`:
/// `(1/y) E_γ ln E[(P⁺ + P⁻)^y | γ] - (d(k-1)/(k y)) ln E (1 - c ∏_{j≤k} μ_j)^y`.
///
/// The outer average over `γ^±` uses `γ⁺ + γ⁻ - d` and `(γ⁺ - γ⁻)² - d` as
/// control variates. At `y = 1` the inner expectation is `q^{γ⁺} + q^{γ⁻}`
/// exactly; for the atomic law it is an exact binomial sum for every `y`;
/// otherwise it is a jackknifed nested Monte Carlo average.
pub fn interpolation_scan<R: Rng + ?Sized>(
    pi: PiSpec<'_>,
    ys: &[f64],
    p: &ModelParams,
    opts: InterpolationOptions,
    rng: &mut R,
) -> Result<InterpolationScan> {
    let beta = p.beta.require_finite("the interpolation bound")?;
    let c = -(-beta).exp_m1();
    if ys.is_empty() || ys.iter().any(|&y| !(y > 0.0 && y <= 1.0)) {
        return invalid("every y must lie in (0, 1]");
    }
    if opts.samples == 0 || opts.inner == 0 {
        return invalid("samples and inner replicas must be at least 1");
    }
    let k = p.k;
    let weight = p.d * (k - 1) as f64 / k as f64;
    let lq = (-c * 2f64.powi(1 - k as i32)).ln_1p();

    // Clause term per y, already divided by y.
    let clause: Vec<f64> = match pi {
        PiSpec::Atomic => ys
            .iter()
            .map(|&y| -weight / y * (-2f64.powi(-(k as i32)) * -(-beta * y).exp_m1()).ln_1p())
            .collect(),
        PiSpec::Population(pop) => {
            let mut mom = MuMoments::new(pop.samples());
            ys.iter()
                .map(|&y| {
                    let l = if y == 1.0 {
                        (-c * 2f64.powi(-(k as i32))).ln_1p()
                    } else {
                        log_expected_power(&mut mom, c, k, y)?
                    };
                    Ok(-weight / y * l)
                })
                .collect::<Result<_>>()?
        }
    };

    let seed = rng::fork(rng);
    let pool = match pi {
        PiSpec::Population(pop) if ys.iter().any(|&y| y < 1.0) => {
            let refl = reflected(pop);
            Some(FactorPool::build(&[&refl], k - 1, c, pool_size(pop.len()), rng::stream(seed, 1).next_u64()))
        }
        _ => None,
    };
    let half = Pois::new(p.d / 2.0);
    let a = 2f64.powi(1 - k as i32);
    let out_seed = rng::stream(seed, 2).next_u64();
    let ny = ys.len();
    let samples = opts.samples;
    let chunks: Vec<Vec<([f64; 2], Vec<f64>)>> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut r = rng::stream(out_seed, ci as u64);
            let mut buf = Vec::new();
            let mut reps = vec![0.0; opts.inner];
            let mut out = Vec::with_capacity(CHUNK);
            for _ in 0..CHUNK.min(samples - ci * CHUNK) {
                let gp = half.sample(&mut r);
                let gm = half.sample(&mut r);
                let z = [(gp + gm) as f64 - p.d, (gp as f64 - gm as f64).powi(2) - p.d];
                let exact_one = log_add_exp(gp as f64 * lq, gm as f64 * lq);
                let mut xs = vec![0.0; ny];
                match (pi, &pool) {
                    (PiSpec::Atomic, _) => {
                        let (wp, wm) = if ys.iter().any(|&y| y < 1.0) {
                            (binomial_window(gp, a), binomial_window(gm, a))
                        } else {
                            ((0, vec![]), (0, vec![]))
                        };
                        for (x, &y) in xs.iter_mut().zip(ys) {
                            *x = if y == 1.0 { exact_one } else { atomic_inner(&wp, &wm, beta, y, &mut buf) / y };
                        }
                    }
                    (PiSpec::Population(_), Some(pool)) => {
                        let mut pairs = Vec::with_capacity(opts.inner);
                        for _ in 0..opts.inner {
                            let mut plus = [0.0];
                            let mut minus = [0.0];
                            pool.accumulate(gp, &mut r, &mut plus);
                            pool.accumulate(gm, &mut r, &mut minus);
                            pairs.push(log_add_exp(plus[0], minus[0]));
                        }
                        for (x, &y) in xs.iter_mut().zip(ys) {
                            *x = if y == 1.0 {
                                exact_one
                            } else {
                                reps.iter_mut().zip(&pairs).for_each(|(v, l)| *v = y * l);
                                jackknife_log_mean_exp(&reps) / y
                            };
                        }
                    }
                    (PiSpec::Population(_), None) => xs.iter_mut().for_each(|x| *x = exact_one),
                }
                out.push((z, xs));
            }
            out
        })
        .collect();
    let rows: Vec<([f64; 2], Vec<f64>)> = chunks.into_iter().flatten().collect();
    let z: Vec<[f64; 2]> = rows.iter().map(|r| r.0).collect();

    let reference = (0..ny).max_by(|&i, &j| ys[i].total_cmp(&ys[j])).expect("non-empty grid");
    let mut bounds = Vec::with_capacity(ny);
    let mut gaps = Vec::with_capacity(ny);
    for i in 0..ny {
        let x: Vec<f64> = rows.iter().map(|r| r.1[i]).collect();
        let mut b = control_variate_mean(&x, &z);
        b.value += clause[i];
        bounds.push(b);
        let dx: Vec<f64> = rows.iter().map(|r| r.1[i] - r.1[reference]).collect();
        let mut g = control_variate_mean(&dx, &z);
        g.value += clause[i] - clause[reference];
        gaps.push(g);
    }
    let argmin = (0..ny).min_by(|&i, &j| bounds[i].value.total_cmp(&bounds[j].value)).expect("non-empty grid");
    Ok(InterpolationScan { ys: ys.to_vec(), bounds, reference, gaps, argmin })
}

/// `φ(y) = (c - 1 + 2^{y-1} - ln2/2) / y`, the scalar 1-RSB comparison function.
pub fn phi(c: f64, y: f64) -> f64 {
    (c - 0.5 * LN_2 + ((y - 1.0) * LN_2).exp_m1()) / y
}

pub fn phi_derivative(c: f64, y: f64) -> f64 {
    let t = (y - 1.0) * LN_2;
    (y * LN_2 * t.exp() - (c - 0.5 * LN_2 + t.exp_m1())) / (y * y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarGap {
    pub argmin_y: f64,
    pub phi_min: f64,
    pub phi_at_1: f64,
}

/// Minimizes [`phi`] over `(0, 1]`: grid scan, then golden section between
/// the neighbours of the best grid point. The boundary `y = 1` is returned
/// exactly when it is the grid minimum and `φ` still decreases there.
pub fn rsb_scalar_gap(c: f64, y_grid: &[f64]) -> Result<ScalarGap> {
    if !(c > 0.0 && c.is_finite()) {
        return invalid("c must be positive and finite");
    }
    if y_grid.iter().any(|&y| !(y > 0.0 && y <= 1.0)) {
        return invalid("grid points must lie in (0, 1]");
    }
    let mut grid: Vec<f64> = y_grid.to_vec();
    grid.push(1.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let phi_at_1 = c - 0.5 * LN_2;
    let best = (0..grid.len()).min_by(|&i, &j| phi(c, grid[i]).total_cmp(&phi(c, grid[j]))).expect("grid has 1");
    if best + 1 == grid.len() && phi_derivative(c, 1.0) <= 0.0 {
        return Ok(ScalarGap { argmin_y: 1.0, phi_min: phi_at_1, phi_at_1 });
    }
    let lo = if best == 0 { grid[0] * 0.5 } else { grid[best - 1] };
    let hi = if best + 1 == grid.len() { 1.0 } else { grid[best + 1] };
    let y = golden_min(|y| phi(c, y), lo, hi, 1e-12);
    let (argmin_y, phi_min) = if phi(c, y) <= phi(c, grid[best]) { (y, phi(c, y)) } else { (grid[best], phi(c, grid[best])) };
    if argmin_y == 1.0 {
        return Ok(ScalarGap { argmin_y, phi_min: phi_at_1, phi_at_1 });
    }
    Ok(ScalarGap { argmin_y, phi_min, phi_at_1 })
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    0.5 * (a + b)
}

/// Number of clauses in which `x` carries the only true literal under `a`.
pub fn support_count(f: &Formula, a: &Assignment, x: usize) -> Result<usize> {
    check_len(f, a)?;
    if x >= f.n() {
        return invalid(format!("variable {x} out of range (n = {})", f.n()));
    }
    let k = f.k();
    Ok(f.occurrences(x)
        .iter()
        .filter(|&&e| {
            let i = e as usize / k;
            a.values()[x] == f.signs()[e as usize] && crate::model::true_literals(f, a, i) == 1
        })
        .count())
}

/// Minimum number of internal supported clauses per member.
pub fn st1_threshold(k: usize) -> f64 {
    1e-5 * k as f64
}

/// Maximum number of clauses without a true member literal per member.
pub fn st2_threshold(k: usize) -> f64 {
    1e-6 * k as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StableSet {
    /// Sorted variable ids.
    pub members: Vec<u32>,
}

/// Which violator the peeler removes next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeelOrder {
    LowestId,
    HighestId,
}

/// Largest stable set: peel violators of either condition from the full
/// variable set until none remain, lowest id first.
pub fn stable_set(f: &Formula, a: &Assignment) -> Result<StableSet> {
    stable_set_ordered(f, a, PeelOrder::LowestId)
}

pub fn stable_set_ordered(f: &Formula, a: &Assignment, order: PeelOrder) -> Result<StableSet> {
    check_len(f, a)?;
    let (n, k, m) = (f.n(), f.k(), f.m());
    let t1 = st1_threshold(k);
    let t2 = st2_threshold(k);
    let truth = |e: usize| a.values()[f.vars()[e] as usize] == f.signs()[e];

    let mut in_s = vec![true; n];
    let mut outside = vec![0u32; m];
    let mut true_in_s = vec![0u32; m];
    let mut sole: Vec<Option<u32>> = vec![None; m];
    for i in 0..m {
        let trues: Vec<usize> = (i * k..(i + 1) * k).filter(|&e| truth(e)).collect();
        true_in_s[i] = trues.len() as u32;
        if trues.len() == 1 {
            sole[i] = Some(f.vars()[trues[0]]);
        }
    }
    let mut supp = vec![0u32; n];
    let mut bad = vec![0u32; n];
    for i in 0..m {
        if let Some(x) = sole[i] {
            supp[x as usize] += 1;
        }
        if true_in_s[i] == 0 {
            for &x in f.clause_vars(i) {
                bad[x as usize] += 1;
            }
        }
    }

    let key = |x: usize| match order {
        PeelOrder::LowestId => Reverse(x as i64),
        PeelOrder::HighestId => Reverse(-(x as i64)),
    };
    let unkey = |r: Reverse<i64>| r.0.unsigned_abs() as usize;
    let violates = |supp: &[u32], bad: &[u32], x: usize| (supp[x] as f64) < t1 || (bad[x] as f64) > t2;
    let mut heap: BinaryHeap<Reverse<i64>> = (0..n).filter(|&x| violates(&supp, &bad, x)).map(key).collect();
    while let Some(top) = heap.pop() {
        let x = unkey(top);
        if !in_s[x] || !violates(&supp, &bad, x) {
            continue;
        }
        in_s[x] = false;
        for &e in f.occurrences(x) {
            let e = e as usize;
            let i = e / k;
            outside[i] += 1;
            if outside[i] == 1 {
                if let Some(s) = sole[i] {
                    let s = s as usize;
                    if in_s[s] {
                        supp[s] -= 1;
                        if violates(&supp, &bad, s) {
                            heap.push(key(s));
                        }
                    }
                }
            }
            if truth(e) {
                true_in_s[i] -= 1;
                if true_in_s[i] == 0 {
                    for &z in f.clause_vars(i) {
                        let z = z as usize;
                        if in_s[z] {
                            bad[z] += 1;
                            if violates(&supp, &bad, z) {
                                heap.push(key(z));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(StableSet { members: (0..n as u32).filter(|&x| in_s[x as usize]).collect() })
}

/// Members of `set` that fail either condition relative to `set`,
/// recounted from scratch.
pub fn stable_violations(f: &Formula, a: &Assignment, set: &[u32]) -> Result<Vec<u32>> {
    check_len(f, a)?;
    let k = f.k();
    let mut member = vec![false; f.n()];
    for &x in set {
        if x as usize >= f.n() {
            return invalid(format!("variable {x} out of range"));
        }
        member[x as usize] = true;
    }
    let sat = |x: u32, s: i8| a.values()[x as usize] == s;
    let mut out = Vec::new();
    for &x in set {
        let mut internal_support = 0usize;
        let mut unsupported = 0usize;
        for &e in f.occurrences(x as usize) {
            let i = e as usize / k;
            let vars = f.clause_vars(i);
            let signs = f.clause_signs(i);
            let trues: Vec<u32> = vars.iter().zip(signs).filter(|(&v, &s)| sat(v, s)).map(|(&v, _)| v).collect();
            if trues == [x] && vars.iter().all(|&v| member[v as usize]) {
                internal_support += 1;
            }
            if !trues.iter().any(|&v| member[v as usize]) {
                unsupported += 1;
            }
        }
        if (internal_support as f64) < st1_threshold(k) || (unsupported as f64) > st2_threshold(k) {
            out.push(x);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Polarization {
    pub fraction_polarized: f64,
    pub passes_a: bool,
}

/// Fraction of marginals in `(0, e^{-β}) ∪ (1 - e^{-β}, 1)`; the event holds
/// when that fraction is at least `1 - 2^{-0.98 k}`.
pub fn polarization_check(marginals: &[f64], k: usize, beta: f64) -> Result<Polarization> {
    if !beta.is_finite() || beta < 0.0 {
        return invalid("beta must be finite and non-negative");
    }
    if marginals.is_empty() {
        return invalid("no marginals given");
    }
    let w = (-beta).exp();
    let hits = marginals.iter().filter(|&&m| (m > 0.0 && m < w) || (m > 1.0 - w && m < 1.0)).count();
    let fraction_polarized = hits as f64 / marginals.len() as f64;
    Ok(Polarization { fraction_polarized, passes_a: fraction_polarized >= 1.0 - 2f64.powf(-0.98 * k as f64) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_random, true_literals};
    use crate::rng::from_seed;

    #[test]
    fn empty_factor_graph_gives_ln2() {
        let p = ModelParams::finite(4, 0.0, 1.0).unwrap();
        let pop = Population::delta(0.3, 10);
        let b = bethe_functional(&pop, &p, 100, &mut from_seed(1)).unwrap();
        assert_eq!((b.value, b.stderr), (LN_2, 0.0));
        assert!((delta_half_closed_form(&p).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn delta_half_estimators_agree() {
        let p = ModelParams::finite(5, 10.0, 1.0).unwrap();
        let pop = Population::delta(0.5, 1000);
        let exact = delta_half_closed_form(&p).unwrap();
        let mc = bethe_functional(&pop, &p, 200_000, &mut from_seed(2)).unwrap();
        assert!((mc.value - exact).abs() < 4.0 * mc.stderr, "{mc:?} vs {exact}");
        let rb = bethe_functional_rb(&pop, &p, 200_000, &mut from_seed(3)).unwrap();
        assert!((rb.value - exact).abs() < 4.0 * rb.stderr + 1e-12, "{rb:?} vs {exact}");
    }

    #[test]
    fn rao_blackwell_matches_plain_on_spread_law() {
        let p = ModelParams::finite(4, 6.0, 1.5).unwrap();
        let mut rng = from_seed(4);
        let pop = Population::new((0..4000).map(|_| rng.random_range(0.2..0.9)).collect()).unwrap();
        let a = bethe_functional(&pop, &p, 400_000, &mut rng).unwrap();
        let b = bethe_functional_rb(&pop, &p, 400_000, &mut rng).unwrap();
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 4.0 * se, "{a:?} {b:?}");
        assert!(b.stderr < a.stderr);
    }

    #[test]
    fn series_matches_direct_average() {
        let rho = [0.1, 0.45, 0.7, 0.95];
        let mut mom = MuMoments::new(&rho);
        let atoms: Vec<f64> = rho.iter().flat_map(|&r| [r, 1.0 - r]).collect();
        let c = 0.8;
        // Exhaustive average over ordered triples of reflected atoms.
        let (mut lf, mut pw) = (0.0, 0.0);
        for &x in &atoms {
            for &y in &atoms {
                for &z in &atoms {
                    lf += (-c * x * y * z).ln_1p();
                    pw += (1.0 - c * x * y * z).powf(0.4);
                }
            }
        }
        let cnt = (atoms.len() as f64).powi(3);
        assert!((expected_log_factor(&mut mom, c, 3).unwrap() - lf / cnt).abs() < 1e-14);
        assert!((log_expected_power(&mut mom, c, 3, 0.4).unwrap() - (pw / cnt).ln()).abs() < 1e-14);
    }

    #[test]
    fn atomic_inner_sum_matches_brute_force() {
        let (beta, y, a) = (1.3f64, 0.7f64, 0.25f64);
        let (gp, gm) = (5usize, 3usize);
        let exact = {
            let mut s = 0.0;
            for bp in 0..=gp {
                for bm in 0..=gm {
                    let pmf = |n: usize, b: usize| {
                        let binom = (1..=b).fold(1.0, |acc, i| acc * (n + 1 - i) as f64 / i as f64);
                        binom * a.powi(b as i32) * (1.0 - a).powi((n - b) as i32)
                    };
                    let v = (-beta * bp as f64).exp() + (-beta * bm as f64).exp();
                    s += pmf(gp, bp) * pmf(gm, bm) * v.powf(y);
                }
            }
            s.ln()
        };
        let got = atomic_inner(&binomial_window(gp, a), &binomial_window(gm, a), beta, y, &mut Vec::new());
        assert!((got - exact).abs() < 1e-13, "{got} vs {exact}");
    }

    #[test]
    fn y_one_matches_delta_half() {
        let p = ModelParams::finite(6, 40.0, 2.0).unwrap();
        let exact = delta_half_closed_form(&p).unwrap();
        let b = interpolation_bound(PiSpec::Atomic, 1.0, &p, 20_000, &mut from_seed(5)).unwrap();
        assert!((b.value - exact).abs() < 3.0 * b.stderr + 1e-12, "{b:?} vs {exact}");
        let pop = Population::new(vec![0.2, 0.6, 0.9]).unwrap();
        let b2 = interpolation_bound(PiSpec::Population(&pop), 1.0, &p, 20_000, &mut from_seed(5)).unwrap();
        assert!((b2.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn atomic_clause_term_closed_form() {
        // With d/2 vanishing on the factor side only the clause term is left
        // when every γ is zero; the Poisson law at tiny d makes that exact.
        let p = ModelParams::finite(3, 1e-300, 2.0).unwrap();
        let y = 0.5;
        let b = interpolation_bound(PiSpec::Atomic, y, &p, 100, &mut from_seed(6)).unwrap();
        let expect = LN_2 - p.d * 2.0 / 3.0 / y * (1.0 - 0.125 + 0.125 * (-2.0 * y).exp()).ln();
        assert!((b.value - expect).abs() < 1e-15);
    }

    #[test]
    fn nested_estimate_tracks_atomic_sum() {
        // A population of 0/1 values is the atomic law; the nested estimator
        // must agree with the exact binomial sum.
        let p = ModelParams::finite(4, 8.0, 1.5).unwrap();
        let pop = Population::new((0..2000).map(|i| (i % 2) as f64).collect()).unwrap();
        let ys = [0.6, 1.0];
        let opts = InterpolationOptions { samples: 20_000, inner: 64 };
        let at = interpolation_scan(PiSpec::Atomic, &ys, &p, opts, &mut from_seed(7)).unwrap();
        let ne = interpolation_scan(PiSpec::Population(&pop), &ys, &p, opts, &mut from_seed(7)).unwrap();
        let se = (at.bounds[0].stderr.powi(2) + ne.bounds[0].stderr.powi(2)).sqrt();
        assert!((at.bounds[0].value - ne.bounds[0].value).abs() < 4.0 * se + 2e-3, "{at:?} {ne:?}");
    }

    #[test]
    fn scalar_gap_cases() {
        let grid: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let g = rsb_scalar_gap(0.9, &grid).unwrap();
        assert!(g.argmin_y < 1.0 - 1e-3 && g.phi_min < g.phi_at_1 - 1e-4);
        assert_eq!(g.phi_at_1, 0.9 - LN_2 / 2.0);
        assert_eq!(phi(0.9, 1.0), g.phi_at_1);
        let g = rsb_scalar_gap(1.2, &grid).unwrap();
        assert_eq!(g.argmin_y, 1.0);
        assert_eq!(g.phi_min, g.phi_at_1);
        assert!(phi_derivative(1.5 * LN_2, 1.0).abs() < 1e-10);
        let h = 1e-6;
        let fd = (phi(0.7, 0.5 + h) - phi(0.7, 0.5 - h)) / (2.0 * h);
        assert!((fd - phi_derivative(0.7, 0.5)).abs() < 1e-8);
    }

    #[test]
    fn support_counts() {
        let f = Formula::empty(3, 3);
        let a = Assignment::all(3, 1);
        assert_eq!(support_count(&f, &a, 0).unwrap(), 0);
        let f = Formula::new(3, 3, &[(vec![0, 1, 2], vec![-1, 1, -1])]).unwrap();
        assert_eq!(
            (0..3).map(|x| support_count(&f, &a, x).unwrap()).collect::<Vec<_>>(),
            vec![0, 1, 0]
        );
        let p = ModelParams::finite(3, 3.0, 1.0).unwrap();
        let mut rng = from_seed(8);
        let f = gen_random(&p, 30, &mut rng).unwrap();
        let a = Assignment::random(30, &mut rng);
        let total: usize = (0..30).map(|x| support_count(&f, &a, x).unwrap()).sum();
        assert_eq!(total, (0..f.m()).filter(|&i| true_literals(&f, &a, i) == 1).count());
    }

    #[test]
    fn stable_set_small_cases() {
        let f = Formula::empty(4, 3);
        assert!(stable_set(&f, &Assignment::all(4, 1)).unwrap().members.is_empty());
        // Five variables, each the sole true literal of two clauses on the group.
        let mut clauses = Vec::new();
        for x in 0..5u32 {
            for off in [1u32, 2] {
                let y = (x + off) % 5;
                let z = (x + off + 1) % 5;
                clauses.push((vec![x, y, z], vec![1, -1, -1]));
            }
        }
        let f = Formula::new(5, 3, &clauses).unwrap();
        let a = Assignment::all(5, 1);
        let s = stable_set(&f, &a).unwrap();
        assert_eq!(s.members, vec![0, 1, 2, 3, 4]);
        assert!(stable_violations(&f, &a, &s.members).unwrap().is_empty());
    }

    #[test]
    fn polarization_cases() {
        let r = polarization_check(&[0.5; 10], 5, 1.0).unwrap();
        assert_eq!((r.fraction_polarized, r.passes_a), (0.0, false));
        let r = polarization_check(&[1e-9, 1.0 - 1e-9, 1e-9], 5, 10.0).unwrap();
        assert_eq!((r.fraction_polarized, r.passes_a), (1.0, true));
        let r = polarization_check(&[0.0, 1e-9, 0.4, 1.0], 5, 10.0).unwrap();
        assert_eq!(r.fraction_polarized, 0.25);
    }
}
