//! Validated systems of structural equations over a shared noise space.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{discrete_valued, indicator, Expr};
use crate::probability_space::{NoiseBatch, NoiseSpace};

/// Index-resolved expression used for evaluation.
#[derive(Debug, Clone)]
enum Node {
    Const(f64),
    Noise(usize),
    Var(usize),
    Add(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Min(Box<Node>, Box<Node>),
    Max(Box<Node>, Box<Node>),
    Indicator(Box<Node>),
    Table { inputs: Vec<Node>, map: HashMap<Vec<u64>, f64> },
}

// -0.0 and 0.0 must hit the same table row
#[inline]
fn key_bits(v: f64) -> u64 {
    (v + 0.0).to_bits()
}

impl Node {
    fn eval(&self, noise: &[f64], vals: &[f64], var: usize, names: &[String]) -> Result<f64> {
        Ok(match self {
            Node::Const(c) => *c,
            Node::Noise(j) => noise[*j],
            Node::Var(k) => vals[*k],
            Node::Add(a, b) => a.eval(noise, vals, var, names)? + b.eval(noise, vals, var, names)?,
            Node::Mul(a, b) => a.eval(noise, vals, var, names)? * b.eval(noise, vals, var, names)?,
            Node::Neg(a) => -a.eval(noise, vals, var, names)?,
            Node::Min(a, b) => a.eval(noise, vals, var, names)?.min(b.eval(noise, vals, var, names)?),
            Node::Max(a, b) => a.eval(noise, vals, var, names)?.max(b.eval(noise, vals, var, names)?),
            Node::Indicator(a) => indicator(a.eval(noise, vals, var, names)?),
            Node::Table { inputs, map } => {
                let mut key = Vec::with_capacity(inputs.len());
                for i in inputs {
                    key.push(i.eval(noise, vals, var, names)?);
                }
                let bits: Vec<u64> = key.iter().map(|v| key_bits(*v)).collect();
                match map.get(&bits) {
                    Some(v) => *v,
                    None => {
                        return Err(Error::MissingTableEntry { var: names[var].clone(), key });
                    }
                }
            }
        })
    }
}

/// An acyclic system of named equations with a cached evaluation order.
#[derive(Debug, Clone)]
pub struct Program {
    noise: Arc<NoiseSpace>,
    names: Vec<String>,
    exprs: Vec<Expr>,
    nodes: Vec<Node>,
    order: Vec<usize>,
    parents: Vec<Vec<usize>>,
    exo: Vec<Vec<usize>>,
    discrete: Vec<bool>,
}

impl Program {
    pub fn new(noise: Arc<NoiseSpace>, equations: Vec<(String, Expr)>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, (name, _)) in equations.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() || noise.index_of(name).is_some() {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        let mut parents = Vec::with_capacity(equations.len());
        let mut exo = Vec::with_capacity(equations.len());
        for (_, e) in &equations {
            let mut ps: Vec<usize> = Vec::new();
            for r in e.var_refs() {
                let k = *index.get(r).ok_or_else(|| Error::UnknownReference(r.to_string()))?;
                if !ps.contains(&k) {
                    ps.push(k);
                }
            }
            let mut us: Vec<usize> = Vec::new();
            for r in e.noise_refs() {
                let j = noise.index_of(r).ok_or_else(|| Error::UnknownReference(r.to_string()))?;
                if !us.contains(&j) {
                    us.push(j);
                }
            }
            ps.sort_unstable();
            us.sort_unstable();
            parents.push(ps);
            exo.push(us);
        }
        let names: Vec<String> = equations.iter().map(|(n, _)| n.clone()).collect();
        let order = topological_order(&names, &parents)?;

        let discrete_noises: HashSet<String> =
            noise.specs().iter().filter(|s| s.dist.is_discrete()).map(|s| s.name.clone()).collect();
        let defs: Vec<(&str, &Expr)> = order.iter().map(|&i| (names[i].as_str(), &equations[i].1)).collect();
        let disc_map = discrete_valued(&defs, &discrete_noises);
        let discrete: Vec<bool> = names.iter().map(|n| disc_map[n]).collect();

        let mut nodes = Vec::with_capacity(equations.len());
        for (_, e) in &equations {
            nodes.push(compile(e, &index, &noise, &discrete)?);
        }
        let exprs = equations.into_iter().map(|(_, e)| e).collect();
        Ok(Program { noise, names, exprs, nodes, order, parents, exo, discrete })
    }

    pub fn noise(&self) -> &Arc<NoiseSpace> {
        &self.noise
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn exprs(&self) -> &[Expr] {
        &self.exprs
    }

    pub fn expr(&self, i: usize) -> &Expr {
        &self.exprs[i]
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn exo(&self, i: usize) -> &[usize] {
        &self.exo[i]
    }

    pub fn is_discrete(&self, i: usize) -> bool {
        self.discrete[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::UnknownReference(name.to_string()))
    }

    pub fn equations(&self) -> Vec<(String, Expr)> {
        self.names.iter().cloned().zip(self.exprs.iter().cloned()).collect()
    }

    /// Solves one noise realization into `out` (one slot per variable).
    pub fn eval_row(&self, noise: &[f64], out: &mut [f64]) -> Result<()> {
        for &i in &self.order {
            out[i] = self.nodes[i].eval(noise, out, i, &self.names)?;
        }
        Ok(())
    }

    /// Solves every draw; the result is row-major `n × len()`.
    pub fn solve(&self, batch: &NoiseBatch) -> Result<Vec<f64>> {
        if batch.width() != self.noise.len() {
            return Err(Error::DimensionMismatch(batch.width(), self.noise.len()));
        }
        let m = self.len();
        let mut out = vec![0.0; batch.len() * m];
        for (r, row) in batch.rows().enumerate() {
            self.eval_row(row, &mut out[r * m..(r + 1) * m])?;
        }
        Ok(out)
    }

    /// Same noise, some equations swapped.
    pub fn with_replaced(&self, replacements: &[(usize, Expr)]) -> Result<Program> {
        let mut eqs = self.equations();
        for (i, e) in replacements {
            eqs[*i].1 = e.clone();
        }
        Program::new(self.noise.clone(), eqs)
    }

    /// Appends equations that may reference existing variables.
    pub fn extend(&self, extra: Vec<(String, Expr)>) -> Result<Program> {
        let mut eqs = self.equations();
        eqs.extend(extra);
        Program::new(self.noise.clone(), eqs)
    }

    /// Indicator mask of `set` and everything downstream of it.
    pub fn descendants(&self, set: &[usize]) -> Vec<bool> {
        let mut mark = vec![false; self.len()];
        for &i in set {
            mark[i] = true;
        }
        for &i in &self.order {
            if self.parents[i].iter().any(|&p| mark[p]) {
                mark[i] = true;
            }
        }
        mark
    }

    /// Noise indices that `vars` depend on, directly or through ancestors.
    pub fn noise_ancestry(&self, vars: &[usize]) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack: Vec<usize> = vars.to_vec();
        let mut out = vec![false; self.noise.len()];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            for &j in &self.exo[i] {
                out[j] = true;
            }
            stack.extend(self.parents[i].iter().copied());
        }
        out
    }

    /// Builds a twin network: the factual variables plus one copy per world
    /// of every variable downstream of that world's intervention. Returns the
    /// combined program and, for each world, the index of every original
    /// variable inside it.
    pub fn twin(&self, worlds: &[Vec<(usize, f64)>]) -> Result<(Program, Vec<Vec<usize>>)> {
        let mut eqs = self.equations();
        let mut maps = Vec::with_capacity(worlds.len());
        for (w, assignments) in worlds.iter().enumerate() {
            let set: Vec<usize> = assignments.iter().map(|(i, _)| *i).collect();
            let desc = self.descendants(&set);
            let mut map: Vec<usize> = (0..self.len()).collect();
            let base = eqs.len();
            for i in 0..self.len() {
                let name = format!("{}#{}", self.names[i], w);
                let e = if let Some((_, v)) = assignments.iter().find(|(k, _)| *k == i) {
                    Expr::Const(*v)
                } else if desc[i] {
                    self.exprs[i].map_refs(&|e| match e {
                        Expr::Var(n) => {
                            let k = self.index_of(n).expect("validated reference");
                            let target = if desc[k] { format!("{n}#{w}") } else { n.clone() };
                            Some(Expr::Var(target))
                        }
                        _ => None,
                    })
                } else {
                    continue;
                };
                eqs.push((name, e));
            }
            // copies were pushed for descendants only, in index order
            let mut next = base;
            for (i, m) in map.iter_mut().enumerate() {
                if desc[i] {
                    *m = next;
                    next += 1;
                }
            }
            maps.push(map);
        }
        Ok((Program::new(self.noise.clone(), eqs)?, maps))
    }
}

fn compile(e: &Expr, index: &HashMap<String, usize>, noise: &NoiseSpace, discrete: &[bool]) -> Result<Node> {
    let rec = |x: &Expr| compile(x, index, noise, discrete).map(Box::new);
    Ok(match e {
        Expr::Const(c) => Node::Const(*c),
        Expr::Noise(n) => Node::Noise(noise.index_of(n).ok_or_else(|| Error::UnknownReference(n.clone()))?),
        Expr::Var(n) => Node::Var(*index.get(n).ok_or_else(|| Error::UnknownReference(n.clone()))?),
        Expr::Add(a, b) => Node::Add(rec(a)?, rec(b)?),
        Expr::Mul(a, b) => Node::Mul(rec(a)?, rec(b)?),
        Expr::Min(a, b) => Node::Min(rec(a)?, rec(b)?),
        Expr::Max(a, b) => Node::Max(rec(a)?, rec(b)?),
        Expr::Neg(a) => Node::Neg(rec(a)?),
        Expr::Indicator(a) => Node::Indicator(rec(a)?),
        Expr::Table { inputs, rows } => {
            for inp in inputs {
                let ok = match inp {
                    Expr::Noise(n) => noise
                        .index_of(n)
                        .map(|j| noise.specs()[j].dist.is_discrete())
                        .ok_or_else(|| Error::UnknownReference(n.clone()))?,
                    Expr::Var(n) => discrete[*index.get(n).ok_or_else(|| Error::UnknownReference(n.clone()))?],
                    _ => false,
                };
                if !ok {
                    return Err(Error::TableInputNotDiscrete(inp.to_string()));
                }
            }
            let mut map = HashMap::with_capacity(rows.len());
            for (key, v) in rows {
                if key.len() != inputs.len() {
                    return Err(Error::DimensionMismatch(key.len(), inputs.len()));
                }
                map.insert(key.iter().map(|k| key_bits(*k)).collect(), *v);
            }
            let inputs = inputs.iter().map(|x| compile(x, index, noise, discrete)).collect::<Result<_>>()?;
            Node::Table { inputs, map }
        }
    })
}

/// Kahn's algorithm, always taking the earliest-declared ready variable.
fn topological_order(names: &[String], parents: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = names.len();
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let next = (0..n).find(|&i| !placed[i] && parents[i].iter().all(|&p| placed[p]));
        match next {
            Some(i) => {
                placed[i] = true;
                order.push(i);
            }
            None => return Err(Error::CyclicGraph { cycle: find_cycle(names, parents, &placed) }),
        }
    }
    Ok(order)
}

/// A cycle among unplaced nodes, listed along edge direction (parent to
/// child) starting from the earliest-declared member.
fn find_cycle(names: &[String], parents: &[Vec<usize>], placed: &[bool]) -> Vec<String> {
    let start = (0..names.len()).find(|&i| !placed[i]).expect("some node unplaced");
    // walking parent links among unplaced nodes must revisit a node
    let mut path = vec![start];
    let mut pos: HashMap<usize, usize> = HashMap::from([(start, 0)]);
    let mut cur = start;
    loop {
        let p = *parents[cur].iter().find(|&&p| !placed[p]).expect("unplaced node has unplaced parent");
        if let Some(&k) = pos.get(&p) {
            let mut cyc: Vec<usize> = path[k..].to_vec();
            cyc.reverse();
            let m = cyc.iter().enumerate().min_by_key(|(_, &v)| v).map(|(i, _)| i).unwrap();
            cyc.rotate_left(m);
            return cyc.into_iter().map(|i| names[i].clone()).collect();
        }
        pos.insert(p, path.len());
        path.push(p);
        cur = p;
    }
}
