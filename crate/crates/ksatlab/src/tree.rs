//! Galton-Watson trees and BP on them.
//!
//! A variable has `Po(d)` clause children and each clause has `k-1` fresh
//! variable children with independent fair signs. Variables at the truncation
//! depth draw no children; they feed the recursion with leaf messages instead.

use rand::Rng;
use rayon::prelude::*;

use crate::bp::{log_clause_factor, log_sigmoid, sigmoid};
use crate::error::{Error, Result};
use crate::model::{Formula, ModelParams};
use crate::rng::{self, Pois, CHUNK};

pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct VarNode {
    pub depth: usize,
    /// Clause children (ids into `clauses`).
    pub clauses: Vec<u32>,
    /// Sits at the truncation depth, so its subtree was never drawn.
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct ClauseNode {
    pub parent: u32,
    /// Sign of the parent variable in this clause.
    pub parent_sign: i8,
    /// `(variable id, sign)` for the k-1 children.
    pub children: Vec<(u32, i8)>,
}

/// Arena tree; variable 0 is the root.
#[derive(Debug, Clone)]
pub struct GWTree {
    pub k: usize,
    pub vars: Vec<VarNode>,
    pub clauses: Vec<ClauseNode>,
}

impl GWTree {
    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn num_clauses(&self) -> usize {
        self.clauses.len()
    }

    /// Largest variable depth present.
    pub fn height(&self) -> usize {
        self.vars.iter().map(|v| v.depth).max().unwrap_or(0)
    }

    /// Longest path between two variables, counted in clause hops.
    pub fn diameter(&self) -> usize {
        let mut best = 0;
        // Children are created after parents, so a reverse sweep sees subtrees first.
        let mut down = vec![0usize; self.vars.len()];
        for x in (0..self.vars.len()).rev() {
            let mut top = [0usize; 2];
            for &a in &self.vars[x].clauses {
                let h = 1 + self.clauses[a as usize]
                    .children
                    .iter()
                    .map(|&(y, _)| down[y as usize])
                    .max()
                    .unwrap_or(0);
                if h > top[0] {
                    top = [h, top[0]];
                } else if h > top[1] {
                    top[1] = h;
                }
                // Two children of the same clause are also two hops apart through it.
                let mut inner: Vec<usize> =
                    self.clauses[a as usize].children.iter().map(|&(y, _)| down[y as usize]).collect();
                inner.sort_unstable_by(|a, b| b.cmp(a));
                if inner.len() >= 2 {
                    best = best.max(inner[0] + inner[1] + 1);
                }
            }
            down[x] = top[0];
            best = best.max(top[0] + top[1]);
        }
        best
    }

    /// The tree as a formula; variable ids follow the arena order and every
    /// clause lists its parent first.
    pub fn to_formula(&self) -> Formula {
        let mut vars = Vec::with_capacity(self.clauses.len() * self.k);
        let mut signs = Vec::with_capacity(self.clauses.len() * self.k);
        for c in &self.clauses {
            vars.push(c.parent);
            signs.push(c.parent_sign);
            for &(y, s) in &c.children {
                vars.push(y);
                signs.push(s);
            }
        }
        Formula::from_flat(self.vars.len(), self.k, vars, signs).expect("tree clauses are well formed")
    }
}

/// Samples a tree truncated at variable depth `depth` with the default node budget.
pub fn sample_gw<R: Rng + ?Sized>(p: &ModelParams, depth: usize, rng: &mut R) -> Result<GWTree> {
    sample_gw_budget(p, depth, DEFAULT_NODE_BUDGET, rng)
}

pub fn sample_gw_budget<R: Rng + ?Sized>(
    p: &ModelParams,
    depth: usize,
    budget: usize,
    rng: &mut R,
) -> Result<GWTree> {
    let k = p.k;
    let pois = Pois::new(p.d);
    let mut t = GWTree {
        k,
        vars: vec![VarNode { depth: 0, clauses: Vec::new(), truncated: depth == 0 }],
        clauses: Vec::new(),
    };
    let mut next = 0usize;
    while next < t.vars.len() {
        let x = next;
        next += 1;
        let dx = t.vars[x].depth;
        if dx >= depth {
            continue;
        }
        let children = pois.sample(rng);
        for _ in 0..children {
            if t.vars.len() + t.clauses.len() + k > budget {
                return Err(Error::ResourceLimit(format!("tree exceeds node budget {budget}")));
            }
            let a = t.clauses.len() as u32;
            let parent_sign = sign(rng);
            let mut kids = Vec::with_capacity(k - 1);
            for _ in 1..k {
                let y = t.vars.len() as u32;
                t.vars.push(VarNode { depth: dx + 1, clauses: Vec::new(), truncated: dx + 1 >= depth });
                kids.push((y, sign(rng)));
            }
            t.clauses.push(ClauseNode { parent: x as u32, parent_sign, children: kids });
            t.vars[x].clauses.push(a);
        }
    }
    Ok(t)
}

#[inline]
fn sign<R: Rng + ?Sized>(rng: &mut R) -> i8 {
    if rng.random::<bool>() {
        1
    } else {
        -1
    }
}

/// Where the time-0 variable messages come from.
#[derive(Debug, Clone, Copy)]
pub enum LeafInit<'a> {
    /// Every leaf sends this probability of `+1`.
    Constant(f64),
    /// Independent uniform draws from these samples.
    Sample(&'a [f64]),
}

impl LeafInit<'_> {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let q = match *self {
            LeafInit::Constant(q) => q,
            LeafInit::Sample(s) => s[rng.random_range(0..s.len())],
        };
        (q / (1.0 - q)).ln()
    }
}

/// Root marginal after `rounds` synchronous rounds. A variable at depth `j`
/// reports its time `rounds - j` message; time-0 messages and messages from
/// truncated variables come from `init`, while variables without children send 1/2.
pub fn tree_bp<R: Rng + ?Sized>(
    t: &GWTree,
    p: &ModelParams,
    init: LeafInit<'_>,
    rounds: usize,
    rng: &mut R,
) -> f64 {
    assert!(rounds >= 1, "rounds must be at least 1");
    if let LeafInit::Sample(s) = init {
        assert!(!s.is_empty(), "empty leaf sample");
    }
    // Bottom-up over the arena; children always have larger ids than parents.
    let mut v2c = vec![0.0f64; t.vars.len()];
    for x in (1..t.vars.len()).rev() {
        let node = &t.vars[x];
        v2c[x] = if node.depth >= rounds || node.truncated {
            init.draw(rng)
        } else {
            node.clauses.iter().map(|&a| clause_message(t, p, a as usize, &v2c)).sum()
        };
    }
    sigmoid(t.vars[0].clauses.iter().map(|&a| clause_message(t, p, a as usize, &v2c)).sum())
}

fn clause_message(t: &GWTree, p: &ModelParams, a: usize, v2c: &[f64]) -> f64 {
    let c = &t.clauses[a];
    let log_p: f64 = c.children.iter().map(|&(y, s)| log_sigmoid(-(s as f64) * v2c[y as usize])).sum();
    -(c.parent_sign as f64) * log_clause_factor(p.beta, log_p)
}

/// `count` independent root marginals on fresh trees of the given depth,
/// run for `rounds` rounds.
pub fn root_marginals(
    p: &ModelParams,
    depth: usize,
    rounds: usize,
    init: LeafInit<'_>,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let chunks: Vec<Result<Vec<f64>>> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, c as u64);
            (0..CHUNK.min(count - c * CHUNK))
                .map(|_| {
                    let tree = sample_gw(p, depth, &mut r)?;
                    Ok(tree_bp(&tree, p, init, rounds, &mut r))
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bp::{bp_marginal, run_bp};
    use crate::exact::exact_marginals;
    use crate::rng::from_seed;

    #[test]
    fn degenerate_trees() {
        let p = ModelParams::finite(3, 0.0, 1.0).unwrap();
        let t = sample_gw(&p, 5, &mut from_seed(1)).unwrap();
        assert_eq!((t.num_vars(), t.num_clauses()), (1, 0));
        assert_eq!(tree_bp(&t, &p, LeafInit::Constant(0.9), 3, &mut from_seed(1)), 0.5);
        let p = ModelParams::finite(3, 50.0, 1.0).unwrap();
        let t = sample_gw(&p, 0, &mut from_seed(2)).unwrap();
        assert_eq!(t.num_vars(), 1);
        assert!(t.vars[0].truncated);
    }

    #[test]
    fn root_offspring_mean() {
        let p = ModelParams::finite(3, 2.5, 1.0).unwrap();
        let mut rng = from_seed(3);
        let n = 10_000;
        let counts: Vec<f64> =
            (0..n).map(|_| sample_gw(&p, 1, &mut rng).unwrap().vars[0].clauses.len() as f64).collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        assert!((mean - 2.5).abs() < 3.0 * (2.5f64 / n as f64).sqrt());
    }

    #[test]
    fn budget_is_enforced() {
        let p = ModelParams::finite(3, 6.0, 1.0).unwrap();
        assert!(matches!(sample_gw_budget(&p, 6, 1000, &mut from_seed(4)), Err(Error::ResourceLimit(_))));
    }

    #[test]
    fn single_clause_matches_graph_bp() {
        for k in [2usize, 3, 5] {
            let p = ModelParams::finite(k, 1.0, 1.7).unwrap();
            let mut rng = from_seed(5);
            let t = loop {
                let t = sample_gw(&p, 1, &mut rng).unwrap();
                if t.num_clauses() == 1 {
                    break t;
                }
            };
            let f = t.to_formula();
            let run = run_bp(&f, &p, 50, 1e-13);
            let root = tree_bp(&t, &p, LeafInit::Constant(0.5), 1, &mut rng);
            assert!((root - bp_marginal(&f, &run.msgs, 0)).abs() < 1e-15);
        }
    }

    #[test]
    fn root_marginal_is_exact() {
        let mut rng = from_seed(6);
        let mut checked = 0;
        while checked < 40 {
            let p = ModelParams::finite(3, 1.2, 1.5).unwrap();
            let t = sample_gw(&p, 3, &mut rng).unwrap();
            if t.num_vars() > 20 {
                continue;
            }
            let exact = exact_marginals(&t.to_formula(), &p).unwrap();
            let rounds = t.height().max(1);
            let root = tree_bp(&t, &p, LeafInit::Constant(0.5), rounds, &mut rng);
            assert!((root - exact[0]).abs() < 1e-12, "{root} vs {}", exact[0]);
            checked += 1;
        }
    }

    #[test]
    fn diameter_of_small_shapes() {
        let p = ModelParams::finite(3, 0.0, 1.0).unwrap();
        let mut t = sample_gw(&p, 0, &mut from_seed(0)).unwrap();
        assert_eq!(t.diameter(), 0);
        t.vars.push(VarNode { depth: 1, clauses: vec![], truncated: true });
        t.vars.push(VarNode { depth: 1, clauses: vec![], truncated: true });
        t.clauses.push(ClauseNode { parent: 0, parent_sign: 1, children: vec![(1, 1), (2, -1)] });
        t.vars[0].clauses.push(0);
        assert_eq!(t.diameter(), 1);
        assert_eq!(t.to_formula().m(), 1);
    }
}
