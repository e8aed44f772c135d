//! Formulas, assignments and the random and planted ensembles.
//!
//! A literal of variable `x` with sign `J` is true under `σ` iff `σ_x == J`; a
//! clause is violated when none of its literals is true.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Pois, CHUNK};

/// Largest clause length accepted anywhere in the crate.
pub const MAX_K: usize = 30;

/// Inverse temperature, possibly infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Finite(f64),
    Inf,
}

impl Beta {
    /// `1 - e^{-β}`, the weight removed from a violated clause.
    #[inline]
    pub fn penalty(self) -> f64 {
        match self {
            Beta::Finite(b) => -(-b).exp_m1(),
            Beta::Inf => 1.0,
        }
    }

    /// `e^{-β}`, the Boltzmann weight of one violated clause.
    #[inline]
    pub fn violated_weight(self) -> f64 {
        match self {
            Beta::Finite(b) => (-b).exp(),
            Beta::Inf => 0.0,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Beta::Finite(b) => Some(b),
            Beta::Inf => None,
        }
    }

    pub fn is_inf(self) -> bool {
        matches!(self, Beta::Inf)
    }

    /// Finite value or an error naming the operation that needs it.
    pub fn require_finite(self, op: &str) -> Result<f64> {
        self.finite()
            .ok_or_else(|| Error::InvalidInput(format!("{op} requires a finite beta")))
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Finite(b) => write!(f, "{b}"),
            Beta::Inf => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for Beta {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(Beta::Inf);
        }
        let b: f64 = t
            .parse()
            .map_err(|_| Error::Parse(format!("bad beta value '{s}'")))?;
        if b.is_infinite() && b > 0.0 {
            return Ok(Beta::Inf);
        }
        if !(b >= 0.0) {
            return invalid(format!("beta must be >= 0, got {s}"));
        }
        Ok(Beta::Finite(b))
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Beta::Finite(b) => s.serialize_f64(*b),
            Beta::Inf => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(b) => Ok(Beta::Finite(b)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Clause length, expected variable degree and inverse temperature.
///
/// `d = 0` is accepted as the degenerate limit in which every Poisson draw is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub k: usize,
    pub d: f64,
    pub beta: Beta,
}

impl ModelParams {
    pub fn new(k: usize, d: f64, beta: Beta) -> Result<Self> {
        if !(2..=MAX_K).contains(&k) {
            return invalid(format!("k must lie in [2, {MAX_K}], got {k}"));
        }
        if !(d >= 0.0) || !d.is_finite() {
            return invalid(format!("d must be finite and >= 0, got {d}"));
        }
        if let Beta::Finite(b) = beta {
            if !(b >= 0.0) || !b.is_finite() {
                return invalid(format!("beta must be >= 0, got {b}"));
            }
        }
        Ok(ModelParams { k, d, beta })
    }

    pub fn finite(k: usize, d: f64, beta: f64) -> Result<Self> {
        Self::new(k, d, Beta::Finite(beta))
    }

    /// Clause density parameter `c` defined by `d/k = 2^k ln 2 - c`.
    pub fn c(&self) -> f64 {
        (self.k as f64).exp2() * std::f64::consts::LN_2 - self.d / self.k as f64
    }

    /// Degree for a given `c`, inverse of [`ModelParams::c`].
    pub fn d_from_c(k: usize, c: f64) -> f64 {
        k as f64 * ((k as f64).exp2() * std::f64::consts::LN_2 - c)
    }
}

/// A k-CNF formula stored flat: clause `i` occupies slots `i*k .. (i+1)*k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    n: usize,
    k: usize,
    vars: Vec<u32>,
    signs: Vec<i8>,
    occ_start: Vec<u32>,
    occ: Vec<u32>,
}

impl Formula {
    /// Builds a formula from flat variable and sign arrays.
    pub fn from_flat(n: usize, k: usize, vars: Vec<u32>, signs: Vec<i8>) -> Result<Self> {
        if !(1..=MAX_K).contains(&k) {
            return invalid(format!("clause length must lie in [1, {MAX_K}], got {k}"));
        }
        if vars.len() != signs.len() || vars.len() % k != 0 {
            return invalid("variable and sign arrays must have equal length divisible by k");
        }
        if n > u32::MAX as usize {
            return invalid("too many variables");
        }
        for (i, chunk) in vars.chunks(k).enumerate() {
            for (a, &x) in chunk.iter().enumerate() {
                if x as usize >= n {
                    return invalid(format!("clause {i}: variable {x} out of range (n = {n})"));
                }
                if chunk[..a].contains(&x) {
                    return invalid(format!("clause {i}: variable {x} repeated"));
                }
            }
        }
        if let Some(s) = signs.iter().find(|&&s| s != 1 && s != -1) {
            return invalid(format!("sign {s} is not +1 or -1"));
        }
        let (occ_start, occ) = build_occurrences(n, &vars);
        Ok(Formula { n, k, vars, signs, occ_start, occ })
    }

    /// Builds a formula from explicit clauses given as `(variables, signs)`.
    pub fn new(n: usize, k: usize, clauses: &[(Vec<u32>, Vec<i8>)]) -> Result<Self> {
        let mut vars = Vec::with_capacity(clauses.len() * k);
        let mut signs = Vec::with_capacity(clauses.len() * k);
        for (i, (v, s)) in clauses.iter().enumerate() {
            if v.len() != k || s.len() != k {
                return invalid(format!("clause {i} does not have length {k}"));
            }
            vars.extend_from_slice(v);
            signs.extend_from_slice(s);
        }
        Self::from_flat(n, k, vars, signs)
    }

    pub fn empty(n: usize, k: usize) -> Self {
        Self::from_flat(n, k, Vec::new(), Vec::new()).expect("empty formula is valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn m(&self) -> usize {
        self.vars.len() / self.k
    }
    pub fn num_edges(&self) -> usize {
        self.vars.len()
    }
    pub fn vars(&self) -> &[u32] {
        &self.vars
    }
    pub fn signs(&self) -> &[i8] {
        &self.signs
    }
    pub fn clause_vars(&self, i: usize) -> &[u32] {
        &self.vars[i * self.k..(i + 1) * self.k]
    }
    pub fn clause_signs(&self, i: usize) -> &[i8] {
        &self.signs[i * self.k..(i + 1) * self.k]
    }

    /// Edge ids (`clause * k + slot`) of every occurrence of variable `x`.
    pub fn occurrences(&self, x: usize) -> &[u32] {
        &self.occ[self.occ_start[x] as usize..self.occ_start[x + 1] as usize]
    }

    pub fn degree(&self, x: usize) -> usize {
        (self.occ_start[x + 1] - self.occ_start[x]) as usize
    }

    /// Copy with the clauses flagged in `drop` removed.
    pub fn without_clauses(&self, drop: &[bool]) -> Formula {
        assert_eq!(drop.len(), self.m());
        let k = self.k;
        let mut vars = Vec::with_capacity(self.vars.len());
        let mut signs = Vec::with_capacity(self.signs.len());
        for i in (0..self.m()).filter(|&i| !drop[i]) {
            vars.extend_from_slice(&self.vars[i * k..(i + 1) * k]);
            signs.extend_from_slice(&self.signs[i * k..(i + 1) * k]);
        }
        Formula::from_flat(self.n, k, vars, signs).expect("sub-formula stays valid")
    }

    /// Copy with every occurrence of variable `x` negated.
    pub fn flip_variable(&self, x: usize) -> Formula {
        let mut f = self.clone();
        for &e in self.occurrences(x) {
            f.signs[e as usize] = -f.signs[e as usize];
        }
        f
    }

    /// Copy with the clauses reordered by `perm` (new clause `i` is old `perm[i]`).
    pub fn permute_clauses(&self, perm: &[usize]) -> Formula {
        let k = self.k;
        let mut vars = Vec::with_capacity(self.vars.len());
        let mut signs = Vec::with_capacity(self.signs.len());
        for &i in perm {
            vars.extend_from_slice(&self.vars[i * k..(i + 1) * k]);
            signs.extend_from_slice(&self.signs[i * k..(i + 1) * k]);
        }
        Formula::from_flat(self.n, k, vars, signs).expect("permutation keeps validity")
    }

    pub fn literal_degrees(&self) -> LiteralDegrees {
        let mut deg = vec![(0u32, 0u32); self.n];
        for (&x, &s) in self.vars.iter().zip(&self.signs) {
            if s > 0 {
                deg[x as usize].0 += 1;
            } else {
                deg[x as usize].1 += 1;
            }
        }
        LiteralDegrees(deg)
    }

    /// DIMACS CNF text with signed 1-based literals.
    pub fn to_dimacs(&self) -> String {
        let mut out = format!("p cnf {} {}\n", self.n, self.m());
        for i in 0..self.m() {
            for (&x, &s) in self.clause_vars(i).iter().zip(self.clause_signs(i)) {
                let lit = (x as i64 + 1) * s as i64;
                out.push_str(&lit.to_string());
                out.push(' ');
            }
            out.push_str("0\n");
        }
        out
    }

    /// Parses DIMACS CNF. All clauses must share one length.
    pub fn from_dimacs(text: &str) -> Result<Formula> {
        let mut header: Option<(usize, usize)> = None;
        let mut lits: Vec<i64> = Vec::new();
        let mut clauses: Vec<Vec<i64>> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('c') || line.starts_with('%') {
                continue;
            }
            if line.starts_with('p') {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 4 || parts[1] != "cnf" {
                    return Err(Error::Parse(format!("bad header '{line}'")));
                }
                let n = parts[2].parse().map_err(|_| Error::Parse("bad n".into()))?;
                let m = parts[3].parse().map_err(|_| Error::Parse("bad m".into()))?;
                header = Some((n, m));
                continue;
            }
            for tok in line.split_whitespace() {
                let v: i64 = tok
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad literal '{tok}'")))?;
                if v == 0 {
                    clauses.push(std::mem::take(&mut lits));
                } else {
                    lits.push(v);
                }
            }
        }
        if !lits.is_empty() {
            clauses.push(lits);
        }
        let (n, m) = header.ok_or_else(|| Error::Parse("missing 'p cnf' header".into()))?;
        if clauses.len() != m {
            return Err(Error::Parse(format!("header says {m} clauses, found {}", clauses.len())));
        }
        let k = clauses.first().map_or(1, |c| c.len());
        let mut vars = Vec::with_capacity(m * k);
        let mut signs = Vec::with_capacity(m * k);
        for c in &clauses {
            if c.len() != k {
                return Err(Error::Parse("clauses of different lengths".into()));
            }
            for &l in c {
                let x = l.unsigned_abs() as usize;
                if x == 0 || x > n {
                    return Err(Error::Parse(format!("literal {l} out of range")));
                }
                vars.push((x - 1) as u32);
                signs.push(if l > 0 { 1 } else { -1 });
            }
        }
        Formula::from_flat(n, k, vars, signs)
    }
}

fn build_occurrences(n: usize, vars: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut start = vec![0u32; n + 1];
    for &x in vars {
        start[x as usize + 1] += 1;
    }
    for i in 0..n {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut occ = vec![0u32; vars.len()];
    for (e, &x) in vars.iter().enumerate() {
        occ[fill[x as usize] as usize] = e as u32;
        fill[x as usize] += 1;
    }
    (start, occ)
}

/// A ±1 assignment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment(Vec<i8>);

impl Assignment {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if values.iter().any(|&v| v != 1 && v != -1) {
            return invalid("assignment entries must be +1 or -1");
        }
        Ok(Assignment(values))
    }

    pub fn all(n: usize, v: i8) -> Self {
        assert!(v == 1 || v == -1);
        Assignment(vec![v; n])
    }

    /// Bit `x` of `bits` set means `σ_x = +1`.
    pub fn from_bits(n: usize, bits: u64) -> Self {
        Assignment((0..n).map(|x| if bits >> x & 1 == 1 { 1 } else { -1 }).collect())
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        Assignment((0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn negated(&self) -> Self {
        Assignment(self.0.iter().map(|v| -v).collect())
    }
}

/// Per-variable counts of positive and negative occurrences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiteralDegrees(pub Vec<(u32, u32)>);

impl LiteralDegrees {
    pub fn plus(&self, x: usize) -> u32 {
        self.0[x].0
    }
    pub fn minus(&self, x: usize) -> u32 {
        self.0[x].1
    }
}

/// Samples `k` distinct indices from `[0, n)` by a partial Fisher-Yates shuffle
/// over a virtual index pool; only the displaced positions are stored.
fn sample_distinct<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R, out: &mut Vec<u32>) {
    let mut swaps: Vec<(usize, usize)> = Vec::with_capacity(k);
    let lookup = |swaps: &[(usize, usize)], p: usize| -> usize {
        swaps.iter().rev().find(|s| s.0 == p).map_or(p, |s| s.1)
    };
    for i in 0..k {
        let j = rng.random_range(i..n);
        let vj = lookup(&swaps, j);
        let vi = lookup(&swaps, i);
        out.push(vj as u32);
        swaps.push((j, vi));
        swaps.push((i, vj));
    }
}

fn check_n(params: &ModelParams, n: usize) -> Result<()> {
    if n < params.k {
        return invalid(format!("n = {n} is smaller than k = {}", params.k));
    }
    Ok(())
}

/// Random formula: `Po(dn/k)` clauses, variables without replacement, fair signs.
pub fn gen_random<R: Rng + ?Sized>(params: &ModelParams, n: usize, rng: &mut R) -> Result<Formula> {
    check_n(params, n)?;
    let k = params.k;
    let m = Pois::new(params.d * n as f64 / k as f64).sample(rng);
    let seed = rng::fork(rng);
    let chunks: Vec<(Vec<u32>, Vec<i8>)> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, c as u64);
            let count = CHUNK.min(m - c * CHUNK);
            let mut vars = Vec::with_capacity(count * k);
            let mut signs = Vec::with_capacity(count * k);
            for _ in 0..count {
                sample_distinct(n, k, &mut r, &mut vars);
                for _ in 0..k {
                    signs.push(if r.random::<bool>() { 1 } else { -1 });
                }
            }
            (vars, signs)
        })
        .collect();
    let (vars, signs) = concat(chunks);
    Formula::from_flat(n, k, vars, signs)
}

/// Probability that a planted clause is violated by the planted assignment.
pub fn planted_violation_probability(k: usize, beta: f64) -> f64 {
    let w = (-beta).exp();
    w / ((k as f64).exp2() - 1.0 + w)
}

/// Planted formula: uniform assignment, then each clause violated by it with
/// probability `e^{-β}/(2^k-1+e^{-β})` and otherwise uniform among satisfying
/// sign patterns.
pub fn gen_planted<R: Rng + ?Sized>(
    params: &ModelParams,
    n: usize,
    rng: &mut R,
) -> Result<(Formula, Assignment)> {
    let beta = params.beta.require_finite("planted generation")?;
    check_n(params, n)?;
    let k = params.k;
    let sigma = Assignment::random(n, rng);
    let m = Pois::new(params.d * n as f64 / k as f64).sample(rng);
    let seed = rng::fork(rng);
    let q = planted_violation_probability(k, beta);
    let patterns = 1u64 << k;
    let chunks: Vec<(Vec<u32>, Vec<i8>)> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, c as u64);
            let count = CHUNK.min(m - c * CHUNK);
            let mut vars = Vec::with_capacity(count * k);
            let mut signs = Vec::with_capacity(count * k);
            for _ in 0..count {
                let base = vars.len();
                sample_distinct(n, k, &mut r, &mut vars);
                let truth = if r.random::<f64>() < q { 0 } else { r.random_range(1..patterns) };
                for j in 0..k {
                    let s = sigma.0[vars[base + j] as usize];
                    signs.push(if truth >> j & 1 == 1 { s } else { -s });
                }
            }
            (vars, signs)
        })
        .collect();
    let (vars, signs) = concat(chunks);
    Ok((Formula::from_flat(n, k, vars, signs)?, sigma))
}

fn concat(chunks: Vec<(Vec<u32>, Vec<i8>)>) -> (Vec<u32>, Vec<i8>) {
    let mut vars = Vec::new();
    let mut signs = Vec::new();
    for (v, s) in chunks {
        vars.extend(v);
        signs.extend(s);
    }
    (vars, signs)
}

pub(crate) fn check_len(f: &Formula, a: &Assignment) -> Result<()> {
    if a.len() != f.n() {
        return invalid(format!("assignment length {} does not match n = {}", a.len(), f.n()));
    }
    Ok(())
}

/// Number of true literals of clause `i` under `a`.
#[inline]
pub fn true_literals(f: &Formula, a: &Assignment, i: usize) -> usize {
    f.clause_vars(i)
        .iter()
        .zip(f.clause_signs(i))
        .filter(|(&x, &s)| a.0[x as usize] == s)
        .count()
}

/// Number of violated clauses.
pub fn hamiltonian(f: &Formula, a: &Assignment) -> Result<usize> {
    check_len(f, a)?;
    Ok((0..f.m()).filter(|&i| true_literals(f, a, i) == 0).count())
}

/// Fraction of coordinates on which the two assignments agree.
pub fn overlap(a: &Assignment, b: &Assignment) -> Result<f64> {
    if a.len() != b.len() {
        return invalid("assignments of different lengths");
    }
    if a.is_empty() {
        return Err(Error::Undefined("overlap of empty assignments".into()));
    }
    let agree = a.0.iter().zip(&b.0).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.len() as f64)
}

/// Fraction of literal occurrences that are true under both assignments.
pub fn weighted_overlap(f: &Formula, a: &Assignment, b: &Assignment) -> Result<f64> {
    check_len(f, a)?;
    check_len(f, b)?;
    if f.m() == 0 {
        return Err(Error::Undefined("weighted overlap of a formula without clauses".into()));
    }
    let deg = f.literal_degrees();
    let mut total = 0u64;
    for x in 0..f.n() {
        match (a.0[x], b.0[x]) {
            (1, 1) => total += deg.plus(x) as u64,
            (-1, -1) => total += deg.minus(x) as u64,
            _ => {}
        }
    }
    Ok(total as f64 / f.num_edges() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BalanceReport {
    pub balanced: bool,
    pub strongly_balanced: bool,
}

/// Balance of the literal truth values. The strong condition runs over every
/// degree class `(d+, d-)`, including variables that occur nowhere.
pub fn balance_check(f: &Formula, a: &Assignment) -> Result<BalanceReport> {
    check_len(f, a)?;
    let deg = f.literal_degrees();
    let mut imbalance = 0i64;
    let mut classes: HashMap<(u32, u32), i64> = HashMap::new();
    for x in 0..f.n() {
        let s = a.0[x] as i64;
        imbalance += s * (deg.plus(x) as i64 - deg.minus(x) as i64);
        *classes.entry(deg.0[x]).or_insert(0) += s;
    }
    let target = (f.num_edges() % 2) as i64;
    let balanced = imbalance == target;
    let n = f.n() as i64;
    let strongly_balanced = balanced && classes.values().all(|&v| v * v <= n);
    Ok(BalanceReport { balanced, strongly_balanced })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn two_clause() -> Formula {
        // (x0 ∨ ¬x1) ∧ (x1 ∨ x2), n = 3
        Formula::new(3, 2, &[(vec![0, 1], vec![1, -1]), (vec![1, 2], vec![1, 1])]).unwrap()
    }

    #[test]
    fn formula_validation() {
        assert!(Formula::new(3, 2, &[(vec![0, 0], vec![1, 1])]).is_err());
        assert!(Formula::new(3, 2, &[(vec![0, 3], vec![1, 1])]).is_err());
        assert!(Formula::from_flat(3, 2, vec![0, 1], vec![1, 2]).is_err());
        let f = two_clause();
        assert_eq!(f.m(), 2);
        assert_eq!(f.occurrences(1), &[1, 2]);
        assert_eq!(f.degree(0), 1);
    }

    #[test]
    fn poisson_zero_gives_no_clauses() {
        let p = ModelParams::finite(3, 0.0, 1.0).unwrap();
        let f = gen_random(&p, 10, &mut from_seed(1)).unwrap();
        assert_eq!(f.m(), 0);
        assert!(gen_random(&p, 2, &mut from_seed(1)).is_err());
    }

    #[test]
    fn random_clause_count_is_poisson_mean() {
        let p = ModelParams::finite(3, 3.0, 1.0).unwrap();
        let mut rng = from_seed(2);
        let draws = 10_000;
        let mut total = 0usize;
        let mut pos = 0usize;
        let mut lits = 0usize;
        for _ in 0..draws {
            let f = gen_random(&p, 100, &mut rng).unwrap();
            total += f.m();
            pos += f.signs().iter().filter(|&&s| s > 0).count();
            lits += f.num_edges();
        }
        let mean = total as f64 / draws as f64;
        let se = (100.0f64 / draws as f64).sqrt();
        assert!((mean - 100.0).abs() < 3.0 * se, "mean clause count {mean}");
        let frac = pos as f64 / lits as f64;
        let se = (0.25 / lits as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * se, "positive fraction {frac}");
    }

    #[test]
    fn clauses_have_distinct_variables() {
        let p = ModelParams::finite(5, 4.0, 1.0).unwrap();
        let f = gen_random(&p, 6, &mut from_seed(3)).unwrap();
        for i in 0..f.m() {
            let mut v = f.clause_vars(i).to_vec();
            v.sort();
            v.dedup();
            assert_eq!(v.len(), 5);
        }
    }

    #[test]
    fn planted_violation_frequency() {
        let p = ModelParams::finite(3, 100.0, 1.0).unwrap();
        let (f, s) = gen_planted(&p, 300, &mut from_seed(4)).unwrap();
        let q = planted_violation_probability(3, 1.0);
        let viol = hamiltonian(&f, &s).unwrap() as f64;
        let m = f.m() as f64;
        assert!((viol / m - q).abs() < 3.0 * (q * (1.0 - q) / m).sqrt());

        let p = ModelParams::finite(3, 100.0, 700.0).unwrap();
        let (f, s) = gen_planted(&p, 300, &mut from_seed(5)).unwrap();
        assert_eq!(hamiltonian(&f, &s).unwrap(), 0);
        let p = ModelParams::new(3, 1.0, Beta::Inf).unwrap();
        assert!(gen_planted(&p, 300, &mut from_seed(5)).is_err());
    }

    #[test]
    fn planted_satisfying_patterns_uniform() {
        // k = 2: three satisfying truth patterns, chi-square with 2 dof.
        let p = ModelParams::finite(2, 200.0, 1.0).unwrap();
        let mut counts = [0f64; 4];
        let mut rng = from_seed(6);
        for _ in 0..20 {
            let (f, s) = gen_planted(&p, 50, &mut rng).unwrap();
            for i in 0..f.m() {
                let mut pat = 0;
                for j in 0..2 {
                    if s.values()[f.clause_vars(i)[j] as usize] == f.clause_signs(i)[j] {
                        pat |= 1 << j;
                    }
                }
                counts[pat] += 1.0;
            }
        }
        let sat: f64 = counts[1..].iter().sum();
        let chi2: f64 = counts[1..].iter().map(|c| (c - sat / 3.0).powi(2) / (sat / 3.0)).sum();
        // 0.999 quantile of chi-square with 2 degrees of freedom.
        assert!(chi2 < 13.82, "chi2 = {chi2}");
    }

    #[test]
    fn planted_reweighted_sign_patterns_uniform() {
        // Reweighting planted clauses by e^{βH} recovers uniform signs relative to σ.
        let beta = 1.5;
        let p = ModelParams::finite(2, 1.0, beta).unwrap();
        let mut rng = from_seed(7);
        let mut w = [0f64; 4];
        let mut w2 = [0f64; 4];
        for _ in 0..100_000 {
            let (f, s) = gen_planted(&p, 6, &mut rng).unwrap();
            for i in 0..f.m() {
                let pat = (0..2)
                    .map(|j| ((s.values()[f.clause_vars(i)[j] as usize] == f.clause_signs(i)[j]) as usize) << j)
                    .sum::<usize>();
                let weight = if pat == 0 { beta.exp() } else { 1.0 };
                w[pat] += weight;
                w2[pat] += weight * weight;
            }
        }
        let tot: f64 = w.iter().sum();
        for j in 0..4 {
            let frac = w[j] / tot;
            let se = w2[j].sqrt() / tot;
            assert!((frac - 0.25).abs() < 4.0 * se + 1e-3, "pattern {j}: {frac}");
        }
    }

    #[test]
    fn hamiltonian_examples() {
        let e = Formula::empty(4, 3);
        assert_eq!(hamiltonian(&e, &Assignment::all(4, 1)).unwrap(), 0);
        let one = Formula::new(3, 3, &[(vec![0, 1, 2], vec![1, -1, 1])]).unwrap();
        let falsify = Assignment::new(vec![-1, 1, -1]).unwrap();
        assert_eq!(hamiltonian(&one, &falsify).unwrap(), 1);
        let f = two_clause();
        for bits in 0..8u64 {
            let a = Assignment::from_bits(3, bits);
            let v = a.values();
            let c1 = v[0] == 1 || v[1] == -1;
            let c2 = v[1] == 1 || v[2] == 1;
            assert_eq!(hamiltonian(&f, &a).unwrap(), (!c1) as usize + (!c2) as usize);
        }
        assert!(hamiltonian(&f, &Assignment::all(2, 1)).is_err());
    }

    #[test]
    fn overlap_examples() {
        let a = Assignment::new(vec![1, 1, -1, -1]).unwrap();
        let b = Assignment::new(vec![1, -1, -1, 1]).unwrap();
        assert_eq!(overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap(&a, &a.negated()).unwrap(), 0.0);
        assert_eq!(overlap(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn weighted_overlap_examples() {
        let pos = Formula::new(3, 2, &[(vec![0, 1], vec![1, 1]), (vec![1, 2], vec![1, 1])]).unwrap();
        let t = Assignment::all(3, 1);
        let fl = Assignment::all(3, -1);
        assert_eq!(weighted_overlap(&pos, &t, &t).unwrap(), 1.0);
        assert_eq!(weighted_overlap(&pos, &fl, &fl).unwrap(), 0.0);
        let f = two_clause();
        let a = Assignment::new(vec![1, -1, 1]).unwrap();
        let b = Assignment::new(vec![1, -1, -1]).unwrap();
        // literals: x0+ (true,true), x1- (true,true), x1+ (false,false), x2+ (true,false)
        assert_eq!(weighted_overlap(&f, &a, &b).unwrap(), 2.0 / 4.0);
        assert!(weighted_overlap(&Formula::empty(3, 2), &a, &b).is_err());
    }

    #[test]
    fn balance_examples() {
        let e = Formula::empty(4, 3);
        let alt = Assignment::new(vec![1, -1, 1, -1]).unwrap();
        assert_eq!(
            balance_check(&e, &alt).unwrap(),
            BalanceReport { balanced: true, strongly_balanced: true }
        );
        // All variables in the zero-degree class with the same value: imbalance n > √n.
        let r = balance_check(&e, &Assignment::all(4, 1)).unwrap();
        assert!(r.balanced && !r.strongly_balanced);
        let one = Formula::new(4, 1, &[(vec![0], vec![1])]).unwrap();
        let a = Assignment::new(vec![1, 1, -1, 1]).unwrap();
        assert!(balance_check(&one, &a).unwrap().balanced);
    }

    #[test]
    fn dimacs_round_trip() {
        let f = two_clause();
        let text = f.to_dimacs();
        assert_eq!(text, "p cnf 3 2\n1 -2 0\n2 3 0\n");
        assert_eq!(Formula::from_dimacs(&text).unwrap(), f);
        assert!(Formula::from_dimacs("p cnf 3 2\n1 2 0\n").is_err());
    }

    #[test]
    fn beta_parsing() {
        assert_eq!("inf".parse::<Beta>().unwrap(), Beta::Inf);
        assert_eq!("2".parse::<Beta>().unwrap(), Beta::Finite(2.0));
        assert!("-1".parse::<Beta>().is_err());
        assert_eq!(Beta::Inf.penalty(), 1.0);
        assert_eq!(serde_json::to_string(&Beta::Inf).unwrap(), "\"inf\"");
    }
}
