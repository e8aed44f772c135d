//! Population dynamics for the distributional recursion
//! `R = P⁺/(P⁺ + P⁻)`, `P^± = ∏_{i ≤ γ^±} (1 - c ∏_{j < k} η^±_{ij})`, `γ^± ~ Po(d/2)`.
//!
//! Laws are represented by sample arrays and every functional is a plug-in
//! estimate. Products are accumulated as sums of logarithms.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bp::sigmoid;
use crate::error::{invalid, Error, Result};
use crate::model::ModelParams;
use crate::rng::{self, mean_stderr, Pois, CHUNK};

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    samples: Vec<f64>,
}

impl Population {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return invalid("population must be non-empty");
        }
        if let Some(x) = samples.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return invalid(format!("population sample {x} outside [0, 1]"));
        }
        Ok(Population { samples })
    }

    pub fn delta(x: f64, n: usize) -> Self {
        Population::new(vec![x; n]).expect("valid point mass")
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_stderr(&self) -> (f64, f64) {
        mean_stderr(&self.samples)
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// How the inner clause factors `ln(1 - c ∏ η)` are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "pool")]
pub enum Sampling {
    /// Fresh `η`'s for every factor of every output.
    Direct,
    /// Factors are drawn with replacement from a pool of this many
    /// independently built factors, rebuilt on every application.
    Pooled(usize),
}

impl Sampling {
    pub fn pooled_for(n: usize) -> Sampling {
        Sampling::Pooled(n.max(1 << 16))
    }
}

/// Uniform index in `0..n` from 32 random bits (multiply-shift).
#[inline]
pub(crate) fn fast_index<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> usize {
    ((rng.next_u32() as u64 * n as u64) >> 32) as usize
}

/// Pool of clause log-factors `ln(1 - c ∏_{j<m} η_j)` for each population,
/// built from shared indices. Entry `i` of population `j` sits at
/// `values[i * width + j]`, so a coupled draw touches one cache line.
pub(crate) struct FactorPool {
    values: Vec<f64>,
    width: usize,
    len: usize,
    /// `Some(v)` when every entry of that population's pool equals `v`.
    pub constant: Vec<Option<f64>>,
}

impl FactorPool {
    pub fn build(pops: &[&[f64]], arity: usize, c: f64, size: usize, seed: u64) -> FactorPool {
        let width = pops.len();
        let chunks: Vec<Vec<f64>> = (0..size.div_ceil(CHUNK))
            .into_par_iter()
            .map(|ci| {
                let mut r = rng::stream(seed, ci as u64);
                let count = CHUNK.min(size - ci * CHUNK);
                let mut out = Vec::with_capacity(count * width);
                let mut prods = vec![1.0f64; width];
                for _ in 0..count {
                    prods.iter_mut().for_each(|v| *v = 1.0);
                    for _ in 0..arity {
                        let i = fast_index(&mut r, pops[0].len());
                        for (j, pop) in pops.iter().enumerate() {
                            prods[j] *= pop[i];
                        }
                    }
                    out.extend(prods.iter().map(|pr| (-c * pr).ln_1p()));
                }
                out
            })
            .collect();
        let values: Vec<f64> = chunks.concat();
        let constant = (0..width)
            .map(|j| {
                let first = values[j];
                values.iter().skip(j).step_by(width).all(|&x| x == first).then_some(first)
            })
            .collect();
        FactorPool { values, width, len: size, constant }
    }

    /// Adds the sum of `count` random pool entries to `acc[j]` for every population.
    #[inline]
    pub fn accumulate<R: RngCore + ?Sized>(&self, count: usize, rng: &mut R, acc: &mut [f64]) {
        if self.constant.iter().all(Option::is_some) {
            for (a, v) in acc.iter_mut().zip(&self.constant) {
                *a += count as f64 * v.unwrap();
            }
            return;
        }
        match self.width {
            1 => {
                let mut s = 0.0;
                for _ in 0..count {
                    s += self.values[fast_index(rng, self.len)];
                }
                acc[0] += s;
            }
            2 => {
                let (mut s0, mut s1) = (0.0, 0.0);
                for _ in 0..count {
                    let i = 2 * fast_index(rng, self.len);
                    s0 += self.values[i];
                    s1 += self.values[i + 1];
                }
                acc[0] += s0;
                acc[1] += s1;
            }
            w => {
                for _ in 0..count {
                    let i = w * fast_index(rng, self.len);
                    for (a, v) in acc.iter_mut().zip(&self.values[i..i + w]) {
                        *a += v;
                    }
                }
            }
        }
    }
}

/// Log-factor sums `(L⁺, L⁻)` for one output, per population.
fn draw_direct<R: RngCore + ?Sized>(pops: &[&[f64]], k: usize, c: f64, count: usize, rng: &mut R, acc: &mut [f64]) {
    let n = pops[0].len();
    let mut prods = vec![1.0f64; pops.len()];
    for _ in 0..count {
        prods.iter_mut().for_each(|v| *v = 1.0);
        for _ in 1..k {
            let i = fast_index(rng, n);
            for (j, pop) in pops.iter().enumerate() {
                prods[j] *= pop[i];
            }
        }
        for (a, pr) in acc.iter_mut().zip(&prods) {
            *a += (-c * pr).ln_1p();
        }
    }
}

/// Applies the recursion to several populations with shared randomness: the
/// same `γ^±`, the same source indices and, when pooled, the same pool layout.
pub(crate) fn apply_r_coupled(
    pops: &[&[f64]],
    p: &ModelParams,
    n_out: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let c = p.beta.require_finite("population dynamics").map(|b| -(-b).exp_m1())?;
    if n_out == 0 {
        return invalid("n_out must be at least 1");
    }
    if pops.iter().any(|q| q.len() != pops[0].len() || q.is_empty()) {
        return invalid("coupled populations need equal, non-zero sizes");
    }
    let k = p.k;
    let half = Pois::new(p.d / 2.0);
    let pool = match sampling {
        Sampling::Pooled(size) => Some(FactorPool::build(pops, k - 1, c, size.max(1), rng::stream(seed, 0).next_u64())),
        Sampling::Direct => None,
    };
    let out_seed = rng::stream(seed, 1).next_u64();
    let chunks: Vec<Vec<Vec<f64>>> = (0..n_out.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut r = rng::stream(out_seed, ci as u64);
            let count = CHUNK.min(n_out - ci * CHUNK);
            let mut out = vec![Vec::with_capacity(count); pops.len()];
            let mut plus = vec![0.0f64; pops.len()];
            let mut minus = vec![0.0f64; pops.len()];
            for _ in 0..count {
                plus.iter_mut().chain(minus.iter_mut()).for_each(|v| *v = 0.0);
                let gp = half.sample(&mut r);
                let gm = half.sample(&mut r);
                match &pool {
                    Some(pool) => {
                        pool.accumulate(gp, &mut r, &mut plus);
                        pool.accumulate(gm, &mut r, &mut minus);
                    }
                    None => {
                        draw_direct(pops, k, c, gp, &mut r, &mut plus);
                        draw_direct(pops, k, c, gm, &mut r, &mut minus);
                    }
                }
                for j in 0..pops.len() {
                    out[j].push(sigmoid(plus[j] - minus[j]));
                }
            }
            out
        })
        .collect();
    let mut outs = vec![Vec::with_capacity(n_out); pops.len()];
    for chunk in chunks {
        for (j, v) in chunk.into_iter().enumerate() {
            outs[j].extend(v);
        }
    }
    Ok(outs)
}

/// One application of the recursion with fresh draws from `rng`.
pub fn apply_r<R: Rng + ?Sized>(pop: &Population, p: &ModelParams, rng: &mut R, n_out: usize) -> Result<Population> {
    apply_r_with(pop, p, n_out, Sampling::pooled_for(pop.len()), rng)
}

pub fn apply_r_with<R: Rng + ?Sized>(
    pop: &Population,
    p: &ModelParams,
    n_out: usize,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Population> {
    let seed = rng::fork(rng);
    let mut outs = apply_r_coupled(&[pop.samples()], p, n_out, sampling, seed)?;
    Ok(Population { samples: outs.pop().expect("one output") })
}

/// Reflects each sample `x → 1 - x` independently with probability 1/2.
pub fn symmetrize<R: Rng + ?Sized>(pop: &Population, rng: &mut R) -> Population {
    let seed = rng::fork(rng);
    let samples = pop
        .samples
        .par_chunks(CHUNK)
        .enumerate()
        .flat_map_iter(|(ci, chunk)| {
            let mut r = rng::stream(seed, ci as u64);
            chunk.iter().map(move |&x| if r.random::<bool>() { 1.0 - x } else { x }).collect::<Vec<_>>()
        })
        .collect();
    Population { samples }
}

/// Replaces samples outside `[eps, 1 - eps]` by 1/2.
pub fn truncate(pop: &Population, eps: f64) -> Result<Population> {
    if !(0.0..0.5).contains(&eps) {
        return invalid(format!("truncation level {eps} outside [0, 1/2)"));
    }
    let samples = pop.samples.iter().map(|&x| if x < eps || x > 1.0 - eps { 0.5 } else { x }).collect();
    Ok(Population { samples })
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.par_sort_unstable_by(|a, b| a.total_cmp(b));
    v
}

/// Empirical `W_r` through the monotone coupling, exact for unequal sizes.
/// Evaluated as `M (Σ w |Δ/M|^r)^{1/r}` with `M` the largest gap, so large `r`
/// cannot overflow.
pub fn wasserstein(a: &Population, b: &Population, r: f64) -> f64 {
    assert!(r >= 1.0, "W_r needs r >= 1");
    wasserstein_sorted(&sorted(&a.samples), &sorted(&b.samples), r)
}

pub(crate) fn wasserstein_sorted(a: &[f64], b: &[f64], r: f64) -> f64 {
    let (na, nb) = (a.len() as u128, b.len() as u128);
    // Quantile breakpoints in units of 1/(na*nb).
    let mut pieces = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j, mut pos) = (0usize, 0usize, 0u128);
    while i < a.len() && j < b.len() {
        let ea = (i as u128 + 1) * nb;
        let eb = (j as u128 + 1) * na;
        let next = ea.min(eb);
        pieces.push(((a[i] - b[j]).abs(), (next - pos) as f64));
        pos = next;
        if ea == next {
            i += 1;
        }
        if eb == next {
            j += 1;
        }
    }
    let total = (na * nb) as f64;
    let m = pieces.iter().map(|x| x.0).fold(0.0, f64::max);
    if m == 0.0 {
        return 0.0;
    }
    let s: f64 = pieces.iter().map(|&(d, w)| w / total * (d / m).powf(r)).sum();
    m * s.powf(1.0 / r)
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub p_dagger_pass: bool,
    pub slim: bool,
    pub very_slim: bool,
    /// Smallest `bound - mass` over the tail grid; negative means a violation.
    pub worst_margin: f64,
    /// Mass outside `[1/2 - 2^{-k/10}, 1/2 + 2^{-k/10}]`.
    pub slim_mass: f64,
    /// Mass outside `[1/2 - 2^{-k/9}, 1/2 + 2^{-k/9}]`.
    pub very_slim_mass: f64,
}

/// Checks the log-odds tail bound `μ(logit ≥ s) ≤ exp(-s 2^{k/4})` on the
/// grid `s = 2^{-k/4} 2^j` (both tails), plus the slim and very slim conditions.
pub fn tail_report(pop: &Population, k: usize) -> TailReport {
    let kf = k as f64;
    let n = pop.len() as f64;
    let logits: Vec<f64> = pop.samples.iter().map(|&q| (q / (1.0 - q)).ln()).collect();
    let beta_max = logits.iter().filter(|x| x.is_finite()).fold(1.0f64, |m, x| m.max(x.abs()));
    let jmax = (kf / 4.0 + beta_max.log2()).ceil().max(0.0) as i32;
    let base = (-kf / 4.0).exp2();
    let mut worst = f64::INFINITY;
    for j in 0..=jmax {
        let s = base * (j as f64).exp2();
        let upper = logits.iter().filter(|&&x| x >= s).count() as f64 / n;
        let lower = logits.iter().filter(|&&x| x <= -s).count() as f64 / n;
        let bound = (-s * (kf / 4.0).exp2()).exp();
        worst = worst.min(bound - upper.max(lower));
    }
    let band_mass = |w: f64| pop.samples.iter().filter(|&&q| q <= 0.5 - w || q >= 0.5 + w).count() as f64 / n;
    let slim_mass = band_mass((-kf / 10.0).exp2());
    let very_slim_mass = band_mass((-kf / 9.0).exp2());
    TailReport {
        p_dagger_pass: worst >= 0.0,
        slim: slim_mass <= (-kf / 10.0).exp2(),
        very_slim: very_slim_mass <= (-kf / 9.0).exp2(),
        worst_margin: worst,
        slim_mass,
        very_slim_mass,
    }
}

#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub pop: Population,
    /// `W_1` between consecutive iterates.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FixedPointOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub sampling: Sampling,
}

impl FixedPointOptions {
    /// `tol = 5/√N` and a pool of at least `N` factors.
    pub fn for_size(n: usize) -> Self {
        FixedPointOptions { max_iters: 60, tol: 5.0 / (n as f64).sqrt(), sampling: Sampling::pooled_for(n) }
    }
}

/// Iterates the recursion from the point mass at 1/2 until the `W_1` step
/// drops below `tol`.
pub fn fixed_point<R: Rng + ?Sized>(
    p: &ModelParams,
    n: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<FixedPoint> {
    fixed_point_with(p, n, &FixedPointOptions { max_iters, tol, ..FixedPointOptions::for_size(n) }, rng)
}

pub fn fixed_point_with<R: Rng + ?Sized>(
    p: &ModelParams,
    n: usize,
    opts: &FixedPointOptions,
    rng: &mut R,
) -> Result<FixedPoint> {
    fixed_point_observed(p, n, opts, rng, |_, _| {})
}

/// As [`fixed_point_with`], calling `observe(iteration, population)` after each step.
pub fn fixed_point_observed<R: Rng + ?Sized>(
    p: &ModelParams,
    n: usize,
    opts: &FixedPointOptions,
    rng: &mut R,
    mut observe: impl FnMut(usize, &Population),
) -> Result<FixedPoint> {
    p.beta.require_finite("population dynamics")?;
    if n == 0 || opts.max_iters == 0 {
        return invalid("population size and max_iters must be positive");
    }
    let mut pop = Population::delta(0.5, n);
    let mut sorted_prev = pop.samples.clone();
    let mut trace = Vec::new();
    for it in 1..=opts.max_iters {
        let next = apply_r_with(&pop, p, n, opts.sampling, rng)?;
        let sorted_next = sorted(&next.samples);
        let step = wasserstein_sorted(&sorted_prev, &sorted_next, 1.0);
        trace.push(step);
        pop = next;
        sorted_prev = sorted_next;
        observe(it, &pop);
        if step < opts.tol {
            return Ok(FixedPoint { pop, trace, converged: true, iterations: it });
        }
    }
    Ok(FixedPoint { pop, trace, converged: false, iterations: opts.max_iters })
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    pub r: f64,
    pub ratios: Vec<f64>,
    pub skipped: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub stderr: f64,
}

/// `W_r(Rπ, Rπ′) / W_r(π, π′)` under the coupled recursion, with both inputs
/// sorted so shared indices realise the monotone coupling. `None` when the
/// inputs coincide.
pub fn contraction_ratio<R: Rng + ?Sized>(
    a: &Population,
    b: &Population,
    p: &ModelParams,
    r: f64,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Option<f64>> {
    let (sa, sb) = (sorted(&a.samples), sorted(&b.samples));
    let before = wasserstein_sorted(&sa, &sb, r);
    if before == 0.0 {
        return Ok(None);
    }
    let seed = rng::fork(rng);
    let outs = apply_r_coupled(&[&sa, &sb], p, sa.len(), sampling, seed)?;
    let after = wasserstein_sorted(&sorted(&outs[0]), &sorted(&outs[1]), r);
    Ok(Some(after / before))
}

/// Random symmetric population inside the slim band `1/2 ± 2^{-k/10-1}`.
pub fn slim_perturbation<R: Rng + ?Sized>(k: usize, n: usize, rng: &mut R) -> Population {
    let width = (-(k as f64) / 10.0 - 1.0).exp2() * rng.random_range(0.2..1.0);
    let samples = (0..n)
        .map(|i| {
            let x = 0.5 + width * rng.random::<f64>();
            if i % 2 == 0 {
                x
            } else {
                1.0 - x
            }
        })
        .collect();
    Population { samples }
}

/// Measures contraction on `pairs` random slim-tailed pairs.
pub fn contraction_probe<R: Rng + ?Sized>(
    p: &ModelParams,
    n: usize,
    r: f64,
    pairs: usize,
    rng: &mut R,
) -> Result<ContractionReport> {
    p.beta.require_finite("population dynamics")?;
    let mut ratios = Vec::with_capacity(pairs);
    let mut skipped = 0;
    for _ in 0..pairs {
        let a = slim_perturbation(p.k, n, rng);
        let b = slim_perturbation(p.k, n, rng);
        match contraction_ratio(&a, &b, p, r, Sampling::pooled_for(n), rng)? {
            Some(x) => ratios.push(x),
            None => skipped += 1,
        }
    }
    let (mean_ratio, stderr) = mean_stderr(&ratios);
    let max_ratio = ratios.iter().copied().fold(f64::NAN, f64::max);
    Ok(ContractionReport { r, ratios, skipped, max_ratio, mean_ratio, stderr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    #[serde(rename = "N")]
    pub n: usize,
    pub k: usize,
    pub d: f64,
    pub beta: crate::model::Beta,
    pub seed: u64,
    pub iteration: usize,
}

const MAGIC: &[u8; 8] = b"KSATPOP1";

/// Binary snapshot: magic, little-endian `u64` header length, JSON header,
/// then `N` little-endian `f64` samples.
pub fn write_snapshot(path: &Path, header: &SnapshotHeader, pop: &Population) -> Result<()> {
    if header.n != pop.len() {
        return invalid("snapshot header N does not match the population");
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Parse(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * pop.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for x in &pop.samples {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(SnapshotHeader, Population)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = || Error::Parse("malformed population snapshot".into());
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(bad());
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let body = buf.get(16..16 + hlen).ok_or_else(bad)?;
    let header: SnapshotHeader = serde_json::from_slice(body).map_err(|e| Error::Parse(e.to_string()))?;
    let data = &buf[16 + hlen..];
    if data.len() != 8 * header.n {
        return Err(bad());
    }
    let samples = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, Population::new(samples)?))
}
