//! Exact inference for programs that are affine in their Gaussian noises
//! once the discrete noises are fixed.
//!
//! Discrete noises are enumerated. Under each atom every variable is
//! propagated as an affine form `c + Σ_k a_k Z_k` over independent standard
//! normals; anything else (an indicator of a Gaussian, a product of two
//! random terms) is marked nonlinear. Conditioning on evidence is Gaussian
//! conditioning per atom, reweighted by the evidence density. Evidence
//! variables are replaced by their observed values before targets are
//! built, so an indicator that is itself observed never needs to be
//! inverted.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{indicator, Expr};
use crate::law::{row_major, Component, Law};
use crate::probability_space::Distribution;
use crate::program::Program;

const MAX_ATOMS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Form {
    Lin { c: f64, a: Vec<f64> },
    NonLin,
}

impl Form {
    fn constant(c: f64, g: usize) -> Form {
        Form::Lin { c, a: vec![0.0; g] }
    }

    pub(crate) fn as_const(&self) -> Option<f64> {
        match self {
            Form::Lin { c, a } if a.iter().all(|x| *x == 0.0) => Some(*c),
            _ => None,
        }
    }
}

enum NoiseKind {
    Discrete,
    Gauss { k: usize, mean: f64, sd: f64 },
}

pub(crate) struct LinearEngine<'a> {
    program: &'a Program,
    kinds: Vec<NoiseKind>,
    gauss: usize,
    atoms: Vec<(Vec<f64>, f64)>,
    index: HashMap<&'a str, usize>,
}

impl<'a> LinearEngine<'a> {
    pub(crate) fn new(program: &'a Program) -> Result<Self> {
        let mut kinds = Vec::new();
        let mut gauss = 0;
        let mut supports: Vec<(usize, Vec<(f64, f64)>)> = Vec::new();
        for (j, s) in program.noise().specs().iter().enumerate() {
            match &s.dist {
                Distribution::Gaussian { mean, variance } => {
                    kinds.push(NoiseKind::Gauss { k: gauss, mean: *mean, sd: variance.sqrt() });
                    gauss += 1;
                }
                Distribution::Uniform { .. } => {
                    return Err(Error::EngineInapplicable(format!(
                        "noise `{}` is uniform; the linear engine handles discrete and Gaussian noise",
                        s.name
                    )))
                }
                d => {
                    kinds.push(NoiseKind::Discrete);
                    supports.push((j, d.atoms().expect("discrete")));
                }
            }
        }
        let count = supports.iter().try_fold(1usize, |acc, (_, s)| acc.checked_mul(s.len()));
        if count.is_none_or(|c| c > MAX_ATOMS) {
            return Err(Error::EngineInapplicable("too many discrete atoms".into()));
        }
        let width = program.noise().len();
        let mut atoms = vec![(vec![0.0; width], 1.0)];
        for (j, support) in &supports {
            let mut next = Vec::with_capacity(atoms.len() * support.len());
            for (coords, p) in &atoms {
                for (v, q) in support {
                    let mut c = coords.clone();
                    c[*j] = *v;
                    next.push((c, p * q));
                }
            }
            atoms = next;
        }
        let index = program.names().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        Ok(LinearEngine { program, kinds, gauss, atoms, index })
    }

    pub(crate) fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub(crate) fn atom(&self, a: usize) -> (&[f64], f64) {
        (&self.atoms[a].0, self.atoms[a].1)
    }

    pub(crate) fn gauss_dim(&self) -> usize {
        self.gauss
    }

    /// Affine forms of every variable under atom `a`, with `cut` variables
    /// pinned to the given values.
    pub(crate) fn forms(&self, a: usize, cut: &[(usize, f64)]) -> Result<Vec<Form>> {
        let p = self.program;
        let mut out: Vec<Form> = vec![Form::NonLin; p.len()];
        for &i in p.order() {
            out[i] = match cut.iter().find(|(k, _)| *k == i) {
                Some((_, v)) => Form::constant(*v, self.gauss),
                None => self.eval(p.expr(i), a, &out, i)?,
            };
        }
        Ok(out)
    }

    fn eval(&self, e: &Expr, atom: usize, vars: &[Form], var: usize) -> Result<Form> {
        let g = self.gauss;
        let bin = |x: &Expr, y: &Expr| -> Result<(Form, Form)> {
            Ok((self.eval(x, atom, vars, var)?, self.eval(y, atom, vars, var)?))
        };
        Ok(match e {
            Expr::Const(c) => Form::constant(*c, g),
            Expr::Noise(n) => {
                let j = self.program.noise().index_of(n).expect("validated");
                match self.kinds[j] {
                    NoiseKind::Discrete => Form::constant(self.atoms[atom].0[j], g),
                    NoiseKind::Gauss { k, mean, sd } => {
                        let mut a = vec![0.0; g];
                        a[k] = sd;
                        Form::Lin { c: mean, a }
                    }
                }
            }
            Expr::Var(n) => vars[self.index[n.as_str()]].clone(),
            Expr::Add(x, y) => match bin(x, y)? {
                (Form::Lin { c: c1, a: a1 }, Form::Lin { c: c2, a: a2 }) => {
                    Form::Lin { c: c1 + c2, a: a1.iter().zip(&a2).map(|(p, q)| p + q).collect() }
                }
                _ => Form::NonLin,
            },
            Expr::Neg(x) => match self.eval(x, atom, vars, var)? {
                Form::Lin { c, a } => Form::Lin { c: -c, a: a.into_iter().map(|v| -v).collect() },
                f => f,
            },
            Expr::Mul(x, y) => {
                let (fx, fy) = bin(x, y)?;
                match (fx.as_const(), fy.as_const(), fx, fy) {
                    (Some(s), Some(t), _, _) => Form::constant(s * t, g),
                    (Some(s), None, _, Form::Lin { c, a }) | (None, Some(s), Form::Lin { c, a }, _) => {
                        Form::Lin { c: s * c, a: a.into_iter().map(|v| s * v).collect() }
                    }
                    _ => Form::NonLin,
                }
            }
            Expr::Min(x, y) | Expr::Max(x, y) => {
                let (fx, fy) = bin(x, y)?;
                match (fx.as_const(), fy.as_const()) {
                    (Some(s), Some(t)) => {
                        Form::constant(if matches!(e, Expr::Min(..)) { s.min(t) } else { s.max(t) }, g)
                    }
                    _ => Form::NonLin,
                }
            }
            Expr::Indicator(x) => match self.eval(x, atom, vars, var)?.as_const() {
                Some(s) => Form::constant(indicator(s), g),
                None => Form::NonLin,
            },
            Expr::Table { inputs, rows } => {
                let mut key = Vec::with_capacity(inputs.len());
                for inp in inputs {
                    match self.eval(inp, atom, vars, var)?.as_const() {
                        Some(v) => key.push(v + 0.0),
                        None => return Ok(Form::NonLin),
                    }
                }
                match rows.iter().find(|(k, _)| k.iter().map(|v| v + 0.0).eq(key.iter().copied())) {
                    Some((_, v)) => Form::constant(*v, g),
                    None => return Err(Error::MissingTableEntry { var: self.program.names()[var].clone(), key }),
                }
            }
        })
    }

    /// Law of the target combinations given `evidence`, as a Gaussian
    /// mixture with one component per surviving atom.
    pub(crate) fn query(
        &self,
        evidence: &[(usize, f64)],
        targets: &[Vec<(usize, f64)>],
        labels: Vec<String>,
    ) -> Result<Law> {
        let g = self.gauss;
        let ev_vars: Vec<usize> = evidence.iter().map(|(i, _)| *i).collect();
        let ancestry = self.program.noise_ancestry(&ev_vars);

        let mut per_atom = Vec::with_capacity(self.atoms.len());
        let mut all_linear = true;
        for a in 0..self.atoms.len() {
            let raw = self.forms(a, &[])?;
            let cut = if evidence.is_empty() { raw.clone() } else { self.forms(a, evidence)? };
            let mut t_rows: Vec<(f64, Vec<f64>)> = Vec::with_capacity(targets.len());
            for combo in targets {
                let mut c = 0.0;
                let mut coef = vec![0.0; g];
                for (i, w) in combo {
                    match &cut[*i] {
                        Form::Lin { c: ci, a: ai } => {
                            c += w * ci;
                            coef.iter_mut().zip(ai).for_each(|(x, y)| *x += w * y);
                        }
                        Form::NonLin => {
                            return Err(Error::EngineInapplicable(format!(
                                "`{}` is not affine in the Gaussian noise",
                                self.program.names()[*i]
                            )))
                        }
                    }
                }
                t_rows.push((c, coef));
            }
            let ev_forms: Vec<Form> = ev_vars.iter().map(|&i| raw[i].clone()).collect();
            all_linear &= ev_forms.iter().all(|f| matches!(f, Form::Lin { .. }));
            per_atom.push((ev_forms, t_rows));
        }

        if !all_linear {
            // prior suffices when the targets do not touch anything upstream of the evidence
            let discrete_upstream = self
                .kinds
                .iter()
                .enumerate()
                .any(|(j, k)| matches!(k, NoiseKind::Discrete) && ancestry[j] && self.atom_varies(j));
            let gauss_upstream: Vec<bool> = {
                let mut v = vec![false; g];
                for (j, k) in self.kinds.iter().enumerate() {
                    if let NoiseKind::Gauss { k, .. } = k {
                        v[*k] = ancestry[j];
                    }
                }
                v
            };
            let touches = per_atom.iter().any(|(_, rows)| {
                rows.iter().any(|(_, coef)| coef.iter().zip(&gauss_upstream).any(|(c, u)| *c != 0.0 && *u))
            });
            if discrete_upstream || touches {
                return Err(Error::EngineInapplicable(
                    "indicator on the conditioning path; use the exact or Monte Carlo engine".into(),
                ));
            }
        }

        let mut log_w = Vec::with_capacity(per_atom.len());
        let mut comps = Vec::with_capacity(per_atom.len());
        for (a, (ev_forms, t_rows)) in per_atom.iter().enumerate() {
            let prior = self.atoms[a].1;
            let b = DMatrix::from_fn(t_rows.len(), g, |i, k| t_rows[i].1[k]);
            let c = DVector::from_iterator(t_rows.len(), t_rows.iter().map(|r| r.0));
            let (lw, mu_z, sigma_z) = if all_linear && !evidence.is_empty() {
                match condition(ev_forms, evidence, g)? {
                    Some((lw, m, s)) => (prior.ln() + lw, m, s),
                    None => continue,
                }
            } else {
                (prior.ln(), DVector::zeros(g), DMatrix::identity(g, g))
            };
            let mean = &c + &b * mu_z;
            let cov = &b * sigma_z * b.transpose();
            log_w.push(lw);
            comps.push(Component { tag: a, weight: 0.0, mean: mean.iter().copied().collect(), cov: row_major(&cov) });
        }
        let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::ZeroProbabilityEvidence);
        }
        let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        for (c, wi) in comps.iter_mut().zip(&w) {
            c.weight = wi / total;
        }
        comps.retain(|c| c.weight > 0.0);
        Ok(Law::mixture(labels, comps))
    }

    fn atom_varies(&self, j: usize) -> bool {
        let first = self.atoms[0].0[j];
        self.atoms.iter().any(|(c, _)| c[j] != first)
    }
}

/// Log evidence density, posterior mean and posterior covariance.
type Conditioned = (f64, DVector<f64>, DMatrix<f64>);

/// Gaussian conditioning of standard normal `Z` on `A Z + c = x`.
/// Returns the log evidence density, posterior mean and covariance, or
/// `None` when a deterministic evidence row contradicts the observation.
fn condition(forms: &[Form], evidence: &[(usize, f64)], g: usize) -> Result<Option<Conditioned>> {
    let mut rows: Vec<(&Vec<f64>, f64)> = Vec::new();
    for (f, (_, x)) in forms.iter().zip(evidence) {
        let Form::Lin { c, a } = f else { unreachable!("checked linear") };
        if a.iter().all(|v| *v == 0.0) {
            if (c - x).abs() > 1e-12 * x.abs().max(1.0) {
                return Ok(None);
            }
        } else {
            rows.push((a, x - c));
        }
    }
    if rows.is_empty() {
        return Ok(Some((0.0, DVector::zeros(g), DMatrix::identity(g, g))));
    }
    let r = rows.len();
    let a = DMatrix::from_fn(r, g, |i, k| rows[i].0[k]);
    let resid = DVector::from_iterator(r, rows.iter().map(|(_, v)| *v));
    let s = &a * a.transpose();
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::EngineInapplicable("evidence variables are linearly dependent".into()))?;
    let sol = chol.solve(&resid);
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let lw = -0.5 * resid.dot(&sol) - 0.5 * log_det - 0.5 * r as f64 * (2.0 * std::f64::consts::PI).ln();
    let mean = a.transpose() * sol;
    let gain = a.transpose() * chol.solve(&a);
    let cov = DMatrix::identity(g, g) - gain;
    Ok(Some((lw, mean, cov)))
}
