//! Brute-force oracles over all `2^n` assignments and a heat-bath sampler.
//!
//! Enumeration walks the hypercube in Gray-code order so each step flips one
//! variable and updates the violated-clause count through its occurrence list.
//! The space is split into blocks on the high bits; block results are merged in
//! block order, so the output does not depend on the thread count.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::{Assignment, Beta, Formula, ModelParams};
use crate::rng;

/// Default variable cap for enumeration.
pub const DEFAULT_CAP: usize = 24;
/// Default variable cap for the two-replica overlap distribution.
pub const DEFAULT_OVERLAP_CAP: usize = 14;

const MAX_BLOCK_BITS: usize = 6;

fn check_cap(f: &Formula, cap: usize) -> Result<()> {
    if f.n() > cap || f.n() > 40 {
        return Err(Error::ResourceLimit(format!(
            "enumeration over n = {} variables exceeds the cap of {cap}",
            f.n()
        )));
    }
    Ok(())
}

/// Visits every assignment of the block whose high bits equal `prefix`,
/// reporting `(bits, violated clauses)`. Bit `x` set means `σ_x = +1`.
fn walk_block<F: FnMut(u64, usize)>(f: &Formula, low: usize, prefix: u64, mut visit: F) {
    let k = f.k();
    let m = f.m();
    let signs = f.signs();
    let mut bits = prefix << low;
    let value = |bits: u64, x: usize| -> i8 { if bits >> x & 1 == 1 { 1 } else { -1 } };
    let mut count = vec![0u16; m];
    let mut h = 0usize;
    for (c, slot) in count.iter_mut().enumerate() {
        let vars = f.clause_vars(c);
        let sg = f.clause_signs(c);
        *slot = (0..k).filter(|&j| value(bits, vars[j] as usize) == sg[j]).count() as u16;
        if *slot == 0 {
            h += 1;
        }
    }
    visit(bits, h);
    for i in 1u64..(1u64 << low) {
        let x = i.trailing_zeros() as usize;
        bits ^= 1 << x;
        let now = value(bits, x);
        for &e in f.occurrences(x) {
            let c = e as usize / k;
            if signs[e as usize] == now {
                if count[c] == 0 {
                    h -= 1;
                }
                count[c] += 1;
            } else {
                count[c] -= 1;
                if count[c] == 0 {
                    h += 1;
                }
            }
        }
        visit(bits, h);
    }
}

fn split(n: usize) -> (usize, usize) {
    let high = n.min(MAX_BLOCK_BITS);
    (high, n - high)
}

/// Number of assignments with exactly `h` violated clauses, for every `h`.
pub fn energy_histogram(f: &Formula, cap: usize) -> Result<Vec<u64>> {
    check_cap(f, cap)?;
    let (high, low) = split(f.n());
    let parts: Vec<Vec<u64>> = (0..1u64 << high)
        .into_par_iter()
        .map(|prefix| {
            let mut hist = vec![0u64; f.m() + 1];
            walk_block(f, low, prefix, |_, h| hist[h] += 1);
            hist
        })
        .collect();
    let mut hist = vec![0u64; f.m() + 1];
    for p in parts {
        for (a, b) in hist.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok(hist)
}

/// `ln(weight)` of an assignment violating `h` clauses.
#[inline]
fn log_weight(beta: Beta, h: usize) -> f64 {
    match beta {
        Beta::Finite(b) => -b * h as f64,
        Beta::Inf => {
            if h == 0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

fn log_z_from_histogram(hist: &[u64], beta: Beta) -> f64 {
    let terms: Vec<f64> = hist
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(h, &c)| (c as f64).ln() + log_weight(beta, h))
        .collect();
    log_sum_exp(&terms)
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `ln Z` over all `2^n` assignments.
pub fn exact_log_z(f: &Formula, p: &ModelParams) -> Result<f64> {
    exact_log_z_capped(f, p, DEFAULT_CAP)
}

pub fn exact_log_z_capped(f: &Formula, p: &ModelParams, cap: usize) -> Result<f64> {
    Ok(log_z_from_histogram(&energy_histogram(f, cap)?, p.beta))
}

/// Boltzmann weights relative to the lightest energy level present.
struct Weights {
    table: Vec<f64>,
}

impl Weights {
    fn new(f: &Formula, p: &ModelParams, cap: usize) -> Result<(Self, f64)> {
        let hist = energy_histogram(f, cap)?;
        let log_z = log_z_from_histogram(&hist, p.beta);
        if log_z == f64::NEG_INFINITY {
            return Err(Error::Undefined("partition function is zero".into()));
        }
        let h_min = hist.iter().position(|&c| c > 0).unwrap_or(0);
        let table = (0..hist.len())
            .map(|h| match p.beta {
                Beta::Finite(b) => (-b * (h as f64 - h_min as f64)).exp(),
                Beta::Inf => (h == 0) as u8 as f64,
            })
            .collect();
        Ok((Weights { table }, log_z))
    }
}

struct Moments {
    z: f64,
    first: Vec<f64>,
    second: Vec<f64>,
}

fn moments(f: &Formula, p: &ModelParams, cap: usize, pairs: bool) -> Result<(Moments, f64)> {
    let (w, log_z) = Weights::new(f, p, cap)?;
    let n = f.n();
    let (high, low) = split(n);
    let parts: Vec<Moments> = (0..1u64 << high)
        .into_par_iter()
        .map(|prefix| {
            let mut acc = Moments {
                z: 0.0,
                first: vec![0.0; n],
                second: if pairs { vec![0.0; n * n] } else { Vec::new() },
            };
            walk_block(f, low, prefix, |bits, h| {
                let wt = w.table[h];
                if wt == 0.0 {
                    return;
                }
                acc.z += wt;
                let mut b = bits;
                while b != 0 {
                    let x = b.trailing_zeros() as usize;
                    acc.first[x] += wt;
                    if pairs {
                        let mut c = bits;
                        while c != 0 {
                            let y = c.trailing_zeros() as usize;
                            acc.second[x * n + y] += wt;
                            c &= c - 1;
                        }
                    }
                    b &= b - 1;
                }
            });
            acc
        })
        .collect();
    let mut total = Moments {
        z: 0.0,
        first: vec![0.0; n],
        second: if pairs { vec![0.0; n * n] } else { Vec::new() },
    };
    for part in parts {
        total.z += part.z;
        for (a, b) in total.first.iter_mut().zip(&part.first) {
            *a += b;
        }
        for (a, b) in total.second.iter_mut().zip(&part.second) {
            *a += b;
        }
    }
    let z = total.z;
    total.first.iter_mut().for_each(|v| *v /= z);
    total.second.iter_mut().for_each(|v| *v /= z);
    Ok((total, log_z))
}

/// Exact marginals `P(σ_x = +1)`.
pub fn exact_marginals(f: &Formula, p: &ModelParams) -> Result<Vec<f64>> {
    exact_marginals_capped(f, p, DEFAULT_CAP)
}

pub fn exact_marginals_capped(f: &Formula, p: &ModelParams, cap: usize) -> Result<Vec<f64>> {
    Ok(moments(f, p, cap, false)?.0.first)
}

/// Marginals and the row-major matrix of `P(σ_x = σ_y = +1)`.
pub fn pair_marginals(f: &Formula, p: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, _) = moments(f, p, DEFAULT_CAP, true)?;
    Ok((m.first, m.second))
}

fn defect_from(first: &[f64], second: &[f64]) -> f64 {
    let n = first.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            s += (second[i * n + j] - first[i] * first[j]).abs();
        }
    }
    s / (n * (n - 1)) as f64
}

/// Average over ordered pairs of distinct variables of
/// `|P(σ_i = σ_j = 1) - P(σ_i = 1) P(σ_j = 1)|`.
pub fn rs_defect(f: &Formula, p: &ModelParams) -> Result<f64> {
    let (first, second) = pair_marginals(f, p)?;
    Ok(defect_from(&first, &second))
}

/// Distribution of the overlap of two independent Boltzmann samples.
#[derive(Debug, Clone, Serialize)]
pub struct OverlapStats {
    pub mean: f64,
    /// `histogram[a]` is the probability that the replicas agree on `a` coordinates.
    pub histogram: Vec<f64>,
}

/// Exact overlap law under `μ ⊗ μ` by XOR autocorrelation of the weight vector,
/// computed with a fast Walsh-Hadamard transform in `O(n 2^n)`.
pub fn overlap_statistics(f: &Formula, p: &ModelParams) -> Result<OverlapStats> {
    overlap_statistics_capped(f, p, DEFAULT_OVERLAP_CAP)
}

pub fn overlap_statistics_capped(f: &Formula, p: &ModelParams, cap: usize) -> Result<OverlapStats> {
    check_cap(f, cap)?;
    let n = f.n();
    if n == 0 {
        return Err(Error::Undefined("overlap of an empty variable set".into()));
    }
    let (w, _) = Weights::new(f, p, cap)?;
    let size = 1usize << n;
    let mut v = vec![0.0f64; size];
    let (high, low) = split(n);
    let blocks: Vec<Vec<f64>> = (0..1u64 << high)
        .into_par_iter()
        .map(|prefix| {
            let mut out = vec![0.0; 1 << low];
            let base = prefix << low;
            walk_block(f, low, prefix, |bits, h| out[(bits - base) as usize] = w.table[h]);
            out
        })
        .collect();
    for (prefix, block) in blocks.into_iter().enumerate() {
        let base = prefix << low;
        v[base..base + block.len()].copy_from_slice(&block);
    }
    let z: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= z);
    walsh_hadamard(&mut v);
    v.iter_mut().for_each(|x| *x *= *x);
    walsh_hadamard(&mut v);
    let mut histogram = vec![0.0; n + 1];
    for (zmask, val) in v.iter().enumerate() {
        let agree = n - (zmask as u64).count_ones() as usize;
        histogram[agree] += val / size as f64;
    }
    histogram.iter_mut().for_each(|h| *h = h.max(0.0));
    let mean = histogram.iter().enumerate().map(|(a, h)| a as f64 * h).sum::<f64>() / n as f64;
    Ok(OverlapStats { mean, histogram })
}

fn walsh_hadamard(v: &mut [f64]) {
    let mut h = 1;
    while h < v.len() {
        for block in v.chunks_mut(2 * h) {
            let (a, b) = block.split_at_mut(h);
            for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                let (s, t) = (*x + *y, *x - *y);
                *x = s;
                *y = t;
            }
        }
        h *= 2;
    }
}

/// Everything the oracle reports for one formula.
#[derive(Debug, Clone, Serialize)]
pub struct ExactSummary {
    pub log_z: f64,
    pub marginals: Vec<f64>,
    pub pair_defect: f64,
    pub mean_overlap: f64,
}

pub fn exact_summary(f: &Formula, p: &ModelParams, cap: usize) -> Result<ExactSummary> {
    let (m, log_z) = moments(f, p, cap, true)?;
    let pair_defect = defect_from(&m.first, &m.second);
    let n = f.n().max(1) as f64;
    let mean_overlap = m.first.iter().map(|q| q * q + (1.0 - q) * (1.0 - q)).sum::<f64>() / n;
    Ok(ExactSummary { log_z, marginals: m.first, pair_defect, mean_overlap })
}

/// Single-site heat-bath chain for the Boltzmann distribution.
pub struct GlauberChain<'a> {
    f: &'a Formula,
    beta: f64,
    state: Vec<i8>,
    true_count: Vec<u16>,
}

impl<'a> GlauberChain<'a> {
    pub fn new(f: &'a Formula, p: &ModelParams, init: Assignment) -> Result<Self> {
        let beta = p.beta.require_finite("heat-bath sampling")?;
        if init.len() != f.n() {
            return invalid("initial assignment has the wrong length");
        }
        let state = init.values().to_vec();
        let true_count = (0..f.m())
            .map(|c| {
                f.clause_vars(c)
                    .iter()
                    .zip(f.clause_signs(c))
                    .filter(|(&x, &s)| state[x as usize] == s)
                    .count() as u16
            })
            .collect();
        Ok(GlauberChain { f, beta, state, true_count })
    }

    pub fn state(&self) -> Assignment {
        Assignment::new(self.state.clone()).expect("chain state is ±1")
    }

    /// Conditional probability of `σ_x = +1` given all other coordinates.
    pub fn prob_plus(&self, x: usize) -> f64 {
        let k = self.f.k();
        let (mut h_plus, mut h_minus) = (0i64, 0i64);
        for &e in self.f.occurrences(x) {
            let c = e as usize / k;
            let s = self.f.signs()[e as usize];
            let mine = (self.state[x] == s) as u16;
            if self.true_count[c] - mine == 0 {
                if s > 0 {
                    h_minus += 1;
                } else {
                    h_plus += 1;
                }
            }
        }
        1.0 / (1.0 + (-self.beta * (h_minus - h_plus) as f64).exp())
    }

    fn set(&mut self, x: usize, v: i8) {
        if self.state[x] == v {
            return;
        }
        let k = self.f.k();
        for &e in self.f.occurrences(x) {
            let c = e as usize / k;
            if self.f.signs()[e as usize] == v {
                self.true_count[c] += 1;
            } else {
                self.true_count[c] -= 1;
            }
        }
        self.state[x] = v;
    }

    /// Heat-bath update of site `x` driven by the uniform variate `u`.
    pub fn update_site(&mut self, x: usize, u: f64) {
        let v = if u < self.prob_plus(x) { 1 } else { -1 };
        self.set(x, v);
    }

    /// One sweep: `n` site updates in a fresh random order.
    pub fn sweep<R: Rng + ?Sized>(&mut self, order: &mut Vec<usize>, rng: &mut R) {
        order.clear();
        order.extend(0..self.f.n());
        order.shuffle(rng);
        for &x in order.iter() {
            let u: f64 = rng.random();
            self.update_site(x, u);
        }
    }
}

/// States after each of `sweeps` sweeps, starting from a uniform assignment.
pub fn glauber_sample<R: Rng + ?Sized>(
    f: &Formula,
    p: &ModelParams,
    sweeps: usize,
    rng: &mut R,
) -> Result<Vec<Assignment>> {
    let init = Assignment::random(f.n(), rng);
    let mut chain = GlauberChain::new(f, p, init)?;
    let mut order = Vec::new();
    let mut out = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        chain.sweep(&mut order, rng);
        out.push(chain.state());
    }
    Ok(out)
}

/// Marginal estimates from independent chains run in parallel, each discarding
/// `burn_in` sweeps and then averaging over `sweeps` sweeps.
pub fn glauber_marginals<R: Rng + ?Sized>(
    f: &Formula,
    p: &ModelParams,
    chains: usize,
    burn_in: usize,
    sweeps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    p.beta.require_finite("heat-bath sampling")?;
    let seed = rng::fork(rng);
    let n = f.n();
    let sums: Vec<Vec<u64>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, c as u64);
            let init = Assignment::random(n, &mut r);
            let mut chain = GlauberChain::new(f, p, init).expect("validated above");
            let mut order = Vec::new();
            for _ in 0..burn_in {
                chain.sweep(&mut order, &mut r);
            }
            let mut hits = vec![0u64; n];
            for _ in 0..sweeps {
                chain.sweep(&mut order, &mut r);
                for (h, &v) in hits.iter_mut().zip(&chain.state) {
                    *h += (v == 1) as u64;
                }
            }
            hits
        })
        .collect();
    let total = (chains * sweeps) as f64;
    Ok((0..n).map(|x| sums.iter().map(|s| s[x]).sum::<u64>() as f64 / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_random, hamiltonian};
    use crate::rng::from_seed;

    /// Direct sum over assignments in plain binary order, no Gray code.
    fn naive(f: &Formula, beta: f64) -> (f64, Vec<f64>) {
        let n = f.n();
        let mut z = 0.0;
        let mut m = vec![0.0; n];
        for bits in 0..1u64 << n {
            let a = Assignment::from_bits(n, bits);
            let w = (-beta * hamiltonian(f, &a).unwrap() as f64).exp();
            z += w;
            for x in 0..n {
                if a.values()[x] == 1 {
                    m[x] += w;
                }
            }
        }
        (z.ln(), m.iter().map(|v| v / z).collect())
    }

    #[test]
    fn empty_and_zero_temperature() {
        let p = ModelParams::finite(3, 1.0, 2.0).unwrap();
        let e = Formula::empty(7, 3);
        assert!((exact_log_z(&e, &p).unwrap() - 7.0 * 2f64.ln()).abs() < 1e-12);
        let f = gen_random(&ModelParams::finite(3, 3.0, 0.0).unwrap(), 9, &mut from_seed(1)).unwrap();
        let p0 = ModelParams::finite(3, 3.0, 0.0).unwrap();
        assert!((exact_log_z(&f, &p0).unwrap() - 9.0 * 2f64.ln()).abs() < 1e-12);
        let ptiny = ModelParams::finite(3, 3.0, 1e-12).unwrap();
        assert!((exact_log_z(&f, &ptiny).unwrap() - 9.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn single_clause_log_z() {
        let f = Formula::new(3, 3, &[(vec![0, 1, 2], vec![1, -1, 1])]).unwrap();
        let p = ModelParams::finite(3, 1.0, 2.0).unwrap();
        let expect = (7.0 + (-2.0f64).exp()).ln();
        assert!((exact_log_z(&f, &p).unwrap() - expect).abs() < 1e-13);
    }

    #[test]
    fn gray_code_matches_naive_enumeration() {
        let mut rng = from_seed(11);
        for t in 0..20 {
            let n = 4 + t % 8;
            let p = ModelParams::finite(3, 2.5, 0.3 + t as f64 * 0.2).unwrap();
            let f = gen_random(&p, n, &mut rng).unwrap();
            let (lz, m) = naive(&f, p.beta.finite().unwrap());
            assert!((exact_log_z(&f, &p).unwrap() - lz).abs() < 1e-11);
            for (a, b) in exact_marginals(&f, &p).unwrap().iter().zip(&m) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_variable_clause_marginal() {
        let f = Formula::new(2, 2, &[(vec![0, 1], vec![1, 1])]).unwrap();
        for beta in [0.5, 1.0, 3.0] {
            let p = ModelParams::finite(2, 1.0, beta).unwrap();
            let m = exact_marginals(&f, &p).unwrap();
            let expect = 2.0 / (3.0 + (-beta).exp());
            assert!((m[0] - expect).abs() < 1e-14);
            assert!((m[1] - expect).abs() < 1e-14);
            let flipped = exact_marginals(&f.flip_variable(0), &p).unwrap();
            assert!((flipped[0] - (1.0 - m[0])).abs() < 1e-14);
        }
        let iso = Formula::new(3, 2, &[(vec![0, 1], vec![1, 1])]).unwrap();
        let p = ModelParams::finite(2, 1.0, 1.0).unwrap();
        assert!((exact_marginals(&iso, &p).unwrap()[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn infinite_beta_counts_solutions() {
        let f = Formula::new(2, 2, &[(vec![0, 1], vec![1, 1])]).unwrap();
        let p = ModelParams::new(2, 1.0, Beta::Inf).unwrap();
        assert!((exact_log_z(&f, &p).unwrap() - 3f64.ln()).abs() < 1e-14);
        let unsat = Formula::new(
            2,
            2,
            &[
                (vec![0, 1], vec![1, 1]),
                (vec![0, 1], vec![1, -1]),
                (vec![0, 1], vec![-1, 1]),
                (vec![0, 1], vec![-1, -1]),
            ],
        )
        .unwrap();
        assert_eq!(exact_log_z(&unsat, &p).unwrap(), f64::NEG_INFINITY);
        assert!(exact_marginals(&unsat, &p).is_err());
    }

    #[test]
    fn cap_is_enforced() {
        let f = Formula::empty(30, 3);
        let p = ModelParams::finite(3, 1.0, 1.0).unwrap();
        assert!(matches!(exact_log_z(&f, &p), Err(Error::ResourceLimit(_))));
        assert!(matches!(overlap_statistics(&Formula::empty(15, 3), &p), Err(Error::ResourceLimit(_))));
    }

    #[test]
    fn log_z_non_increasing_in_beta() {
        let mut rng = from_seed(12);
        for _ in 0..10 {
            let f = gen_random(&ModelParams::finite(3, 3.0, 1.0).unwrap(), 10, &mut rng).unwrap();
            let mut last = f64::INFINITY;
            for beta in [0.5, 1.0, 2.0, 4.0] {
                let v = exact_log_z(&f, &ModelParams::finite(3, 3.0, beta).unwrap()).unwrap();
                assert!(v <= last + 1e-12);
                last = v;
            }
        }
    }

    #[test]
    fn defect_examples() {
        let p = ModelParams::finite(2, 1.0, 1.0).unwrap();
        let f = Formula::new(2, 2, &[(vec![0, 1], vec![1, 1])]).unwrap();
        let d = rs_defect(&f, &p).unwrap();
        assert!(d > 0.0);
        let swapped = Formula::new(2, 2, &[(vec![1, 0], vec![1, 1])]).unwrap();
        assert!((rs_defect(&swapped, &p).unwrap() - d).abs() < 1e-15);
        // By hand: Z = 3 + e^{-1}, P(+,+) = 1/Z, marginals 2/Z.
        let z = 3.0 + (-1.0f64).exp();
        let q = 2.0 / z;
        let off = (1.0 / z - q * q).abs();
        assert!((d - off).abs() < 1e-14);
        let (first, second) = pair_marginals(&f, &p).unwrap();
        assert!((second[1] - second[2]).abs() < 1e-15);
        assert!((second[0] - first[0]).abs() < 1e-15);
    }

    #[test]
    fn defect_of_product_measure_is_zero() {
        let p = ModelParams::finite(3, 1.0, 1.0).unwrap();
        assert_eq!(rs_defect(&Formula::empty(5, 3), &p).unwrap(), 0.0);
        assert_eq!(rs_defect(&Formula::empty(1, 3), &p).unwrap(), 0.0);
    }

    #[test]
    fn overlap_statistics_examples() {
        let p = ModelParams::finite(3, 1.0, 1.0).unwrap();
        let s = overlap_statistics(&Formula::empty(6, 3), &p).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-14);
        assert!((s.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Binomial(6, 1/2) agreement counts.
        assert!((s.histogram[3] - 20.0 / 64.0).abs() < 1e-14);

        // (x ∨ y) ∧ (x ∨ ¬y) for consecutive pairs pins the all-plus ground state.
        let n = 5u32;
        let clauses: Vec<(Vec<u32>, Vec<i8>)> = (0..n)
            .flat_map(|x| [(vec![x, (x + 1) % n], vec![1, 1]), (vec![x, (x + 1) % n], vec![1, -1])])
            .collect();
        let pin = Formula::new(n as usize, 2, &clauses).unwrap();
        let cold = ModelParams::finite(2, 1.0, 50.0).unwrap();
        let s = overlap_statistics(&pin, &cold).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-3);
    }

    #[test]
    fn overlap_transform_matches_double_sum() {
        let mut rng = from_seed(13);
        let p = ModelParams::finite(3, 3.0, 1.3).unwrap();
        let f = gen_random(&p, 7, &mut rng).unwrap();
        let n = f.n();
        let mut w = vec![0.0; 1 << n];
        for (bits, slot) in w.iter_mut().enumerate() {
            let a = Assignment::from_bits(n, bits as u64);
            *slot = (-1.3 * hamiltonian(&f, &a).unwrap() as f64).exp();
        }
        let z: f64 = w.iter().sum();
        let mut hist = vec![0.0; n + 1];
        for s in 0..1usize << n {
            for t in 0..1usize << n {
                hist[n - (s ^ t).count_ones() as usize] += w[s] * w[t] / (z * z);
            }
        }
        let got = overlap_statistics(&f, &p).unwrap();
        for (a, b) in got.histogram.iter().zip(&hist) {
            assert!((a - b).abs() < 1e-13);
        }
        let marg = exact_marginals(&f, &p).unwrap();
        let mean: f64 = marg.iter().map(|q| q * q + (1.0 - q) * (1.0 - q)).sum::<f64>() / n as f64;
        assert!((got.mean - mean).abs() < 1e-13);
    }

    /// Transition matrix of one update at a uniformly chosen site.
    fn kernel(f: &Formula, p: &ModelParams) -> Vec<Vec<f64>> {
        let n = f.n();
        let size = 1usize << n;
        let mut k = vec![vec![0.0; size]; size];
        for s in 0..size {
            let chain = GlauberChain::new(f, p, Assignment::from_bits(n, s as u64)).unwrap();
            for x in 0..n {
                let q = chain.prob_plus(x);
                let up = s | 1 << x;
                let down = s & !(1 << x);
                k[s][up] += q / n as f64;
                k[s][down] += (1.0 - q) / n as f64;
            }
        }
        k
    }

    #[test]
    fn heat_bath_detailed_balance() {
        let f = Formula::new(2, 2, &[(vec![0, 1], vec![1, -1])]).unwrap();
        let p = ModelParams::finite(2, 1.0, 1.7).unwrap();
        let k = kernel(&f, &p);
        let pi: Vec<f64> = (0..4u64)
            .map(|s| (-1.7 * hamiltonian(&f, &Assignment::from_bits(2, s)).unwrap() as f64).exp())
            .collect();
        for s in 0..4 {
            assert!((k[s].iter().sum::<f64>() - 1.0).abs() < 1e-15);
            for t in 0..4 {
                assert!((pi[s] * k[s][t] - pi[t] * k[t][s]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn heat_bath_single_free_variable() {
        let f = Formula::empty(1, 2);
        let p = ModelParams::finite(2, 1.0, 1.0).unwrap();
        let samples = glauber_sample(&f, &p, 10_000, &mut from_seed(14)).unwrap();
        let frac = samples.iter().filter(|a| a.values()[0] == 1).count() as f64 / 1e4;
        assert!((frac - 0.5).abs() < 3.0 * (0.25f64 / 1e4).sqrt());
        let inf = ModelParams::new(2, 1.0, Beta::Inf).unwrap();
        assert!(glauber_sample(&f, &inf, 1, &mut from_seed(1)).is_err());
    }

    #[test]
    fn heat_bath_stationary_distribution() {
        let f = Formula::new(4, 3, &[(vec![0, 1, 2], vec![1, 1, -1]), (vec![1, 2, 3], vec![-1, 1, 1])]).unwrap();
        let p = ModelParams::finite(3, 1.0, 1.2).unwrap();
        let mut rng = from_seed(15);
        let mut chain = GlauberChain::new(&f, &p, Assignment::all(4, 1)).unwrap();
        let mut counts = [0f64; 16];
        let steps = 1_000_000;
        for _ in 0..steps {
            let x = rng.random_range(0..4);
            let u: f64 = rng.random();
            chain.update_site(x, u);
            let bits = chain.state.iter().enumerate().fold(0usize, |b, (i, &v)| b | ((v == 1) as usize) << i);
            counts[bits] += 1.0;
        }
        let w: Vec<f64> = (0..16u64)
            .map(|s| (-1.2 * hamiltonian(&f, &Assignment::from_bits(4, s)).unwrap() as f64).exp())
            .collect();
        let z: f64 = w.iter().sum();
        let tv: f64 = (0..16).map(|s| (counts[s] / steps as f64 - w[s] / z).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn heat_bath_marginals_match_oracle() {
        let p = ModelParams::finite(3, 1.0, 1.0).unwrap();
        let f = gen_random(&p, 10, &mut from_seed(16)).unwrap();
        let exact = exact_marginals(&f, &p).unwrap();
        let est = glauber_marginals(&f, &p, 4, 100, 25_000, &mut from_seed(17)).unwrap();
        for (a, b) in exact.iter().zip(&est) {
            assert!((a - b).abs() < 0.01, "{a} vs {b}");
        }
    }
}
