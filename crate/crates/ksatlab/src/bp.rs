//! Belief propagation on the clause/variable factor graph.
//!
//! Messages are stored per directed edge `e = clause * k + slot` as the log-odds
//! `ln μ(+1)/μ(-1)`, so every stored message is a normalised pair by construction.
//! Updates are synchronous: clause messages at `t+1` read variable messages at
//! `t`, and variable messages at `t+1` read clause messages at `t+1`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact;
use crate::model::{Beta, Formula, ModelParams};

/// Floor for `1 - P` in the clause update when `β` is infinite.
pub const HARD_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct MessageSet {
    /// Clause-to-variable log-odds per edge.
    pub c2v: Vec<f64>,
    /// Variable-to-clause log-odds per edge.
    pub v2c: Vec<f64>,
    pub t: usize,
}

impl MessageSet {
    pub fn c2v_prob(&self, e: usize) -> f64 {
        sigmoid(self.c2v[e])
    }
    pub fn v2c_prob(&self, e: usize) -> f64 {
        sigmoid(self.v2c[e])
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x) = -ln(1 + e^{-x})`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// All messages at 1/2.
pub fn init_messages(f: &Formula) -> MessageSet {
    MessageSet { c2v: vec![0.0; f.num_edges()], v2c: vec![0.0; f.num_edges()], t: 0 }
}

/// `ln(1 - (1 - e^{-β}) P)` from `ln P`, written as `ln(e^{-β} + (1-e^{-β})(1-P))`.
#[inline]
pub(crate) fn log_clause_factor(beta: Beta, log_p: f64) -> f64 {
    let one_minus_p = -log_p.exp_m1();
    match beta {
        Beta::Finite(_) => (beta.violated_weight() + beta.penalty() * one_minus_p).ln(),
        Beta::Inf => one_minus_p.max(HARD_FLOOR).ln(),
    }
}

fn clause_update(f: &Formula, beta: Beta, v2c: &[f64], c2v: &mut [f64]) {
    let k = f.k();
    let signs = f.signs();
    c2v.par_chunks_mut(k).enumerate().for_each(|(a, out)| {
        let base = a * k;
        // ln μ_{x_h→a}(value violating the literal) for every slot.
        let mut lv = [0.0f64; crate::model::MAX_K];
        for h in 0..k {
            lv[h] = log_sigmoid(-(signs[base + h] as f64) * v2c[base + h]);
        }
        let mut prefix = 0.0;
        let mut suffix = [0.0f64; crate::model::MAX_K + 1];
        for h in (0..k).rev() {
            suffix[h] = suffix[h + 1] + lv[h];
        }
        for j in 0..k {
            let log_p = prefix + suffix[j + 1];
            out[j] = -(signs[base + j] as f64) * log_clause_factor(beta, log_p);
            prefix += lv[j];
        }
    });
}

fn variable_update(f: &Formula, c2v: &[f64], v2c: &mut [f64]) {
    let n = f.n();
    let per_var: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map(|x| {
            let occ = f.occurrences(x);
            let mut out = Vec::with_capacity(occ.len());
            let mut prefix = 0.0;
            let mut suffix = vec![0.0; occ.len() + 1];
            for i in (0..occ.len()).rev() {
                suffix[i] = suffix[i + 1] + c2v[occ[i] as usize];
            }
            for (i, &e) in occ.iter().enumerate() {
                out.push((e, prefix + suffix[i + 1]));
                prefix += c2v[e as usize];
            }
            out
        })
        .collect();
    for list in per_var {
        for (e, v) in list {
            v2c[e as usize] = v;
        }
    }
}

/// One synchronous round.
pub fn bp_step(f: &Formula, p: &ModelParams, msgs: &MessageSet) -> MessageSet {
    bp_step_damped(f, p, msgs, 0.0)
}

/// One synchronous round with clause messages mixed as
/// `(1 - damping) * new + damping * old` in log-odds.
pub fn bp_step_damped(f: &Formula, p: &ModelParams, msgs: &MessageSet, damping: f64) -> MessageSet {
    let mut c2v = vec![0.0; f.num_edges()];
    clause_update(f, p.beta, &msgs.v2c, &mut c2v);
    if damping > 0.0 {
        for (new, old) in c2v.iter_mut().zip(&msgs.c2v) {
            *new = (1.0 - damping) * *new + damping * old;
        }
    }
    let mut v2c = vec![0.0; f.num_edges()];
    variable_update(f, &c2v, &mut v2c);
    MessageSet { c2v, v2c, t: msgs.t + 1 }
}

fn max_change(a: &MessageSet, b: &MessageSet) -> f64 {
    a.c2v
        .iter()
        .zip(&b.c2v)
        .chain(a.v2c.iter().zip(&b.v2c))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub max_delta: f64,
    pub bethe: f64,
}

#[derive(Debug, Clone)]
pub struct BpRun {
    pub msgs: MessageSet,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct BpOptions {
    pub t_max: usize,
    pub tol: f64,
    pub damping: f64,
    /// Record the Bethe free energy after every round.
    pub trace_bethe: bool,
}

impl Default for BpOptions {
    fn default() -> Self {
        BpOptions { t_max: 1000, tol: 1e-10, damping: 0.0, trace_bethe: false }
    }
}

/// Iterates until the largest log-odds change drops below `tol` or `t_max` rounds.
pub fn run_bp(f: &Formula, p: &ModelParams, t_max: usize, tol: f64) -> BpRun {
    run_bp_with(f, p, &BpOptions { t_max, tol, ..BpOptions::default() })
}

pub fn run_bp_with(f: &Formula, p: &ModelParams, opts: &BpOptions) -> BpRun {
    assert!(opts.t_max >= 1 && opts.tol > 0.0, "t_max >= 1 and tol > 0 required");
    let mut msgs = init_messages(f);
    let mut trace = Vec::new();
    for t in 1..=opts.t_max {
        let next = bp_step_damped(f, p, &msgs, opts.damping);
        let delta = max_change(&msgs, &next);
        msgs = next;
        let bethe = if opts.trace_bethe { bethe_free_energy(f, p, &msgs) } else { f64::NAN };
        trace.push(TraceRow { iteration: t, max_delta: delta, bethe });
        if delta < opts.tol {
            return BpRun { msgs, iterations: t, converged: true, trace };
        }
    }
    BpRun { msgs, iterations: opts.t_max, converged: false, trace }
}

/// Runs exactly `t` rounds from the uniform initialisation.
pub fn bp_rounds(f: &Formula, p: &ModelParams, t: usize) -> MessageSet {
    let mut msgs = init_messages(f);
    for _ in 0..t {
        msgs = bp_step(f, p, &msgs);
    }
    msgs
}

/// BP estimate of `P(σ_x = +1)`: normalised product of incoming clause messages.
pub fn bp_marginal(f: &Formula, msgs: &MessageSet, x: usize) -> f64 {
    sigmoid(f.occurrences(x).iter().map(|&e| msgs.c2v[e as usize]).sum())
}

pub fn bp_marginals(f: &Formula, msgs: &MessageSet) -> Vec<f64> {
    (0..f.n()).map(|x| bp_marginal(f, msgs, x)).collect()
}

/// Bethe free energy: variable terms plus clause terms minus edge terms.
pub fn bethe_free_energy(f: &Formula, p: &ModelParams, msgs: &MessageSet) -> f64 {
    let k = f.k();
    let signs = f.signs();
    let variables: f64 = (0..f.n())
        .map(|x| {
            let (mut plus, mut minus) = (0.0, 0.0);
            for &e in f.occurrences(x) {
                plus += log_sigmoid(msgs.c2v[e as usize]);
                minus += log_sigmoid(-msgs.c2v[e as usize]);
            }
            log_add_exp(plus, minus)
        })
        .sum();
    let clauses: f64 = (0..f.m())
        .map(|a| {
            let log_p: f64 = (0..k)
                .map(|j| log_sigmoid(-(signs[a * k + j] as f64) * msgs.v2c[a * k + j]))
                .sum();
            log_clause_factor(p.beta, log_p)
        })
        .sum();
    let edges: f64 = (0..f.num_edges())
        .map(|e| {
            let (c, v) = (msgs.c2v[e], msgs.v2c[e]);
            log_add_exp(log_sigmoid(c) + log_sigmoid(v), log_sigmoid(-c) + log_sigmoid(-v))
        })
        .sum();
    variables + clauses - edges
}

/// Mean absolute deviation between BP messages after `t` rounds and the
/// pseudo-messages, which are exact marginals of clause-deleted formulas:
/// `Φ - a` for the variable-to-clause direction and `Φ - (∂x \ {a})` for the
/// clause-to-variable direction. Both directions are summed per edge and the
/// total is divided by the number of edges.
pub fn pseudo_message_gap(f: &Formula, p: &ModelParams, t: usize, cap_n: usize) -> Result<f64> {
    if f.n() > cap_n {
        return Err(Error::ResourceLimit(format!(
            "pseudo-messages need enumeration of n = {} > {cap_n}",
            f.n()
        )));
    }
    if f.num_edges() == 0 {
        return Ok(0.0);
    }
    let k = f.k();
    let m = f.m();
    let msgs = bp_rounds(f, p, t);
    let mut without_clause: Vec<Vec<f64>> = Vec::with_capacity(m);
    for a in 0..m {
        let mut drop = vec![false; m];
        drop[a] = true;
        without_clause.push(exact::exact_marginals_capped(&f.without_clauses(&drop), p, cap_n)?);
    }
    let mut total = 0.0;
    for e in 0..f.num_edges() {
        let a = e / k;
        let x = f.vars()[e] as usize;
        let v2c_pseudo = without_clause[a][x];
        let mut drop = vec![false; m];
        for &o in f.occurrences(x) {
            drop[o as usize / k] = o as usize / k != a;
        }
        let c2v_pseudo = exact::exact_marginals_capped(&f.without_clauses(&drop), p, cap_n)?[x];
        total += (v2c_pseudo - msgs.v2c_prob(e)).abs() + (c2v_pseudo - msgs.c2v_prob(e)).abs();
    }
    Ok(total / f.num_edges() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{exact_log_z, exact_marginals};
    use crate::model::gen_random;
    use crate::rng::from_seed;
    use rand::Rng;

    /// Tree-shaped formula: each new clause hangs k-1 fresh variables off one
    /// existing variable.
    fn random_tree<R: Rng>(k: usize, clauses: usize, rng: &mut R) -> Formula {
        let mut n = 1usize;
        let mut list = Vec::new();
        for _ in 0..clauses {
            let anchor = rng.random_range(0..n) as u32;
            let mut vars = vec![anchor];
            for _ in 1..k {
                vars.push(n as u32);
                n += 1;
            }
            let signs = (0..k).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
            list.push((vars, signs));
        }
        Formula::new(n, k, &list).unwrap()
    }

    #[test]
    fn init_is_uniform_and_idempotent() {
        let p = ModelParams::finite(3, 2.0, 1.0).unwrap();
        let f = gen_random(&p, 12, &mut from_seed(1)).unwrap();
        let m = init_messages(&f);
        assert!(m.c2v.iter().chain(&m.v2c).all(|&v| v == 0.0));
        assert!((0..f.num_edges()).all(|e| m.c2v_prob(e) == 0.5 && m.v2c_prob(e) == 0.5));
        assert_eq!(m, init_messages(&f));
    }

    /// Clause-to-variable message by summing the clause weight over all
    /// configurations of the other k-1 variables.
    fn brute_clause_message(k: usize, beta: f64, sign: i8) -> f64 {
        let mut w = [0.0f64; 2];
        for s_idx in 0..2 {
            let s: i8 = if s_idx == 0 { 1 } else { -1 };
            for bits in 0..1u32 << (k - 1) {
                // Signs of the other literals are irrelevant with uniform inputs;
                // take them all positive.
                let others_true = bits != 0;
                let violated = !others_true && s != sign;
                w[s_idx] += if violated { (-beta).exp() } else { 1.0 } * 0.5f64.powi(k as i32 - 1);
            }
        }
        w[0] / (w[0] + w[1])
    }

    #[test]
    fn single_clause_closed_form_and_fixed_point() {
        for k in [2usize, 3, 5] {
            for beta in [0.5, 1.0, 4.0] {
                let p = ModelParams::finite(k, 1.0, beta).unwrap();
                let signs: Vec<i8> = (0..k).map(|j| if j % 2 == 0 { 1 } else { -1 }).collect();
                let f = Formula::new(k, k, &[((0..k as u32).collect(), signs.clone())]).unwrap();
                let one = bp_step(&f, &p, &init_messages(&f));
                let c = -(-beta).exp_m1();
                let q = 0.5f64.powi(k as i32 - 1);
                let violating = (1.0 - c * q) / (2.0 - c * q);
                for j in 0..k {
                    let plus = one.c2v_prob(j);
                    let viol = if signs[j] > 0 { 1.0 - plus } else { plus };
                    assert!((viol - violating).abs() < 1e-15);
                    assert!((plus - brute_clause_message(k, beta, signs[j])).abs() < 1e-14);
                    assert_eq!(one.v2c[j], 0.0);
                }
                let two = bp_step(&f, &p, &one);
                assert_eq!(one.c2v, two.c2v);
                assert_eq!(one.v2c, two.v2c);
                let run = run_bp(&f, &p, 100, 1e-12);
                assert!(run.converged && run.iterations <= 3);
            }
        }
    }

    #[test]
    fn empty_formula_converges_immediately() {
        let p = ModelParams::finite(3, 1.0, 1.0).unwrap();
        let f = Formula::empty(4, 3);
        let run = run_bp(&f, &p, 10, 1e-10);
        assert!(run.converged);
        assert_eq!(run.iterations, 1);
        assert_eq!(run.trace[0].max_delta, 0.0);
        assert!((bethe_free_energy(&f, &p, &run.msgs) - 4.0 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(bp_marginal(&f, &run.msgs, 2), 0.5);
    }

    #[test]
    fn update_reads_only_previous_variable_messages() {
        let p = ModelParams::finite(3, 3.0, 2.0).unwrap();
        let f = gen_random(&p, 15, &mut from_seed(2)).unwrap();
        let mut msgs = init_messages(&f);
        for _ in 0..3 {
            msgs = bp_step(&f, &p, &msgs);
        }
        let mut scrambled = msgs.clone();
        let mut rng = from_seed(3);
        scrambled.c2v.iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0));
        assert_eq!(bp_step(&f, &p, &msgs), bp_step(&f, &p, &scrambled));
    }

    #[test]
    fn two_variable_clause_marginal_is_exact() {
        let f = Formula::new(2, 2, &[(vec![0, 1], vec![1, 1])]).unwrap();
        let p = ModelParams::finite(2, 1.0, 1.3).unwrap();
        let run = run_bp(&f, &p, 50, 1e-13);
        let exact = exact_marginals(&f, &p).unwrap();
        assert!((bp_marginal(&f, &run.msgs, 0) - exact[0]).abs() < 1e-13);
    }

    #[test]
    fn tree_formulas_are_exact() {
        let mut rng = from_seed(4);
        for trial in 0..30 {
            let k = 2 + trial % 3;
            let f = random_tree(k, 1 + trial % 6, &mut rng);
            let p = ModelParams::finite(k, 1.0, 0.5 + trial as f64 * 0.1).unwrap();
            let run = run_bp(&f, &p, 200, 1e-13);
            assert!(run.converged);
            let exact = exact_marginals(&f, &p).unwrap();
            for (x, q) in exact.iter().enumerate() {
                assert!((bp_marginal(&f, &run.msgs, x) - q).abs() < 1e-10);
            }
            let bethe = bethe_free_energy(&f, &p, &run.msgs);
            assert!((bethe - exact_log_z(&f, &p).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn sign_flip_gauge() {
        let p = ModelParams::finite(3, 3.0, 1.5).unwrap();
        let f = gen_random(&p, 14, &mut from_seed(5)).unwrap();
        let x = (0..f.n()).max_by_key(|&x| f.degree(x)).unwrap();
        let g = f.flip_variable(x);
        let a = bp_rounds(&f, &p, 15);
        let b = bp_rounds(&g, &p, 15);
        for &e in f.occurrences(x) {
            assert!((a.c2v_prob(e as usize) - (1.0 - b.c2v_prob(e as usize))).abs() < 1e-12);
            assert!((a.v2c_prob(e as usize) - (1.0 - b.v2c_prob(e as usize))).abs() < 1e-12);
        }
        assert!((bp_marginal(&f, &a, x) - (1.0 - bp_marginal(&g, &b, x))).abs() < 1e-12);
        assert!((bethe_free_energy(&f, &p, &a) - bethe_free_energy(&g, &p, &b)).abs() < 1e-12);
    }

    #[test]
    fn large_beta_stays_finite() {
        let p = ModelParams::finite(3, 4.0, 700.0).unwrap();
        let f = gen_random(&p, 30, &mut from_seed(6)).unwrap();
        let run = run_bp(&f, &p, 50, 1e-10);
        assert!(run.msgs.c2v.iter().chain(&run.msgs.v2c).all(|v| v.is_finite()));
        assert!(bethe_free_energy(&f, &p, &run.msgs).is_finite());
        let hard = ModelParams::new(3, 4.0, Beta::Inf).unwrap();
        let run = run_bp(&f, &hard, 50, 1e-10);
        assert!(run.msgs.c2v.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pseudo_gap_examples() {
        let p = ModelParams::finite(3, 1.0, 1.0).unwrap();
        assert_eq!(pseudo_message_gap(&Formula::empty(5, 3), &p, 3, 12).unwrap(), 0.0);
        let one = Formula::new(3, 3, &[(vec![0, 1, 2], vec![1, 1, -1])]).unwrap();
        // Pseudo-messages of a lone clause equal its BP fixed point.
        assert!(pseudo_message_gap(&one, &p, 1, 12).unwrap() < 1e-15);
        let tree = random_tree(3, 5, &mut from_seed(7));
        let early = pseudo_message_gap(&tree, &p, 1, 12).unwrap();
        let late = pseudo_message_gap(&tree, &p, 20, 12).unwrap();
        assert!(late <= early + 1e-15);
        assert!(late < 1e-12);
        assert!(matches!(pseudo_message_gap(&tree, &p, 1, 5), Err(Error::ResourceLimit(_))));
    }
}
