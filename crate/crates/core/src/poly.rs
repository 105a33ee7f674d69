//! Sparse multivariate polynomials over an ordered, named variable set.
//!
//! Monomials are ordered graded-lexicographically: first by total degree,
//! then by exponent vector with earlier variables ranking first (so over
//! `(x, y)` the degree-one block is `x, y` and the degree-two block is
//! `x^2, x*y, y^2`). Every basis and every constraint index derived from a
//! polynomial inherits this order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Coefficients with magnitude below this are dropped when assembling.
pub const PRUNE_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolyError {
    #[error("variable sets differ: [{left}] vs [{right}]")]
    VarSetMismatch { left: String, right: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("variable `{0}` is not bound to a value")]
    Unbound(String),
    #[error("substitution targets do not share a variable set")]
    InconsistentBindings,
}

/// An ordered set of distinct variable names.
#[derive(Clone)]
pub struct VarSet(Arc<[String]>);

impl VarSet {
    pub fn new<I, S>(names: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(PolyError::DuplicateVariable(n.clone()));
            }
        }
        Ok(VarSet(names.into()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    fn require(&self, name: &str) -> Result<usize, PolyError> {
        self.index_of(name)
            .ok_or_else(|| PolyError::UnknownVariable(name.to_string()))
    }

    fn check_same(&self, other: &VarSet) -> Result<(), PolyError> {
        if self == other {
            Ok(())
        } else {
            Err(PolyError::VarSetMismatch {
                left: self.0.join(","),
                right: other.0.join(","),
            })
        }
    }
}

impl PartialEq for VarSet {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0 == other.0
    }
}

impl Eq for VarSet {}

impl fmt::Debug for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

/// Exponent vector, one entry per variable of the owning [`VarSet`].
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial(exponents)
    }

    pub fn one(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    pub fn var(nvars: usize, index: usize) -> Self {
        let mut e = vec![0; nvars];
        e[index] = 1;
        Monomial(e)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Total degree restricted to the variables at `indices`.
    pub fn degree_in(&self, indices: &[usize]) -> u32 {
        indices.iter().map(|&i| self.0[i]).sum()
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.0.len(), other.0.len());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn is_one(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .filter(|(e, _)| **e > 0)
            .map(|(&e, &v)| v.powi(e as i32))
            .product()
    }

    /// Renders the monomial using `vars`, e.g. `x*z^2`; the unit monomial is `1`.
    pub fn render(&self, vars: &VarSet) -> String {
        let parts: Vec<String> = self
            .0
            .iter()
            .zip(vars.names())
            .filter(|(e, _)| **e > 0)
            .map(|(&e, n)| if e == 1 { n.clone() } else { format!("{n}^{e}") })
            .collect();
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join("*")
        }
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials of total degree `<= degree` in graded-lex order.
pub fn monomials_upto(vars: &VarSet, degree: u32) -> Vec<Monomial> {
    let n = vars.len();
    let mut out = Vec::new();
    let mut cur = vec![0u32; n];
    fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Monomial>) {
        if i == cur.len() {
            out.push(Monomial(cur.clone()));
            return;
        }
        for e in 0..=left {
            cur[i] = e;
            rec(i + 1, left - e, cur, out);
        }
        cur[i] = 0;
    }
    rec(0, degree, &mut cur, &mut out);
    out.sort();
    out
}

/// Value bound to a variable during substitution.
#[derive(Clone, Debug)]
pub enum Binding {
    Const(f64),
    Poly(Polynomial),
}

impl From<f64> for Binding {
    fn from(v: f64) -> Self {
        Binding::Const(v)
    }
}

impl From<Polynomial> for Binding {
    fn from(p: Polynomial) -> Self {
        Binding::Poly(p)
    }
}

/// Resolves substitution bindings into one polynomial per source variable,
/// all living over a common target variable set.
pub(crate) fn resolve_bindings(
    source: &VarSet,
    bindings: &[(&str, Binding)],
) -> Result<(VarSet, Vec<Polynomial>), PolyError> {
    let mut target: Option<VarSet> = None;
    for (_, b) in bindings {
        if let Binding::Poly(p) = b {
            match &target {
                None => target = Some(p.vars.clone()),
                Some(t) if t != &p.vars => return Err(PolyError::InconsistentBindings),
                _ => {}
            }
        }
    }
    let target = target.unwrap_or_else(|| source.clone());
    let mut images: Vec<Option<Polynomial>> = vec![None; source.len()];
    for (name, b) in bindings {
        let i = source.require(name)?;
        images[i] = Some(match b {
            Binding::Const(c) => Polynomial::constant(&target, *c),
            Binding::Poly(p) => p.clone(),
        });
    }
    let images = images
        .into_iter()
        .enumerate()
        .map(|(i, img)| match img {
            Some(p) => Ok(p),
            None => Polynomial::var(&target, &source.names()[i]),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((target, images))
}

/// Caches powers of substitution images so a monomial can be expanded by
/// repeated lookups.
pub(crate) struct PowerCache {
    images: Vec<Polynomial>,
    powers: Vec<Vec<Polynomial>>,
}

impl PowerCache {
    pub(crate) fn new(images: Vec<Polynomial>) -> Self {
        let powers = images
            .iter()
            .map(|p| vec![Polynomial::constant(&p.vars, 1.0)])
            .collect();
        PowerCache { images, powers }
    }

    fn power(&mut self, var: usize, e: u32) -> &Polynomial {
        while self.powers[var].len() <= e as usize {
            let next = self.powers[var].last().unwrap() * &self.images[var];
            self.powers[var].push(next);
        }
        &self.powers[var][e as usize]
    }

    pub(crate) fn expand(&mut self, target: &VarSet, m: &Monomial) -> Polynomial {
        let mut acc = Polynomial::constant(target, 1.0);
        for (i, &e) in m.exponents().iter().enumerate() {
            if e > 0 {
                acc = &acc * self.power(i, e);
            }
        }
        acc
    }
}

/// Sparse polynomial with real coefficients. Zero coefficients are never stored.
#[derive(Clone, PartialEq)]
pub struct Polynomial {
    vars: VarSet,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(vars: &VarSet) -> Self {
        Polynomial {
            vars: vars.clone(),
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(vars: &VarSet, c: f64) -> Self {
        let mut p = Self::zero(vars);
        p.add_term(Monomial::one(vars.len()), c);
        p
    }

    pub fn var(vars: &VarSet, name: &str) -> Result<Self, PolyError> {
        let i = vars.require(name)?;
        let mut p = Self::zero(vars);
        p.add_term(Monomial::var(vars.len(), i), 1.0);
        Ok(p)
    }

    /// Builds a polynomial from `(monomial, coefficient)` pairs; repeated
    /// monomials accumulate.
    pub fn from_terms<I>(vars: &VarSet, terms: I) -> Self
    where
        I: IntoIterator<Item = (Monomial, f64)>,
    {
        let mut p = Self::zero(vars);
        for (m, c) in terms {
            assert_eq!(m.nvars(), vars.len(), "monomial arity mismatch");
            p.add_term(m, c);
        }
        p
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn terms(&self) -> impl DoubleEndedIterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, c)| (m, *c))
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; `None` for the zero polynomial.
    pub fn degree(&self) -> Option<u32> {
        self.terms.keys().map(Monomial::degree).max()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        match self.terms.entry(m) {
            std::collections::btree_map::Entry::Occupied(mut e) => {
                let v = *e.get() + c;
                if v == 0.0 {
                    e.remove();
                } else {
                    *e.get_mut() = v;
                }
            }
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(c);
            }
        }
    }

    /// Drops coefficients with magnitude below `tol`.
    pub fn pruned(mut self, tol: f64) -> Self {
        self.terms.retain(|_, c| c.abs() >= tol);
        self
    }

    pub fn try_add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.vars.check_same(&other.vars)?;
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), *c);
        }
        Ok(out)
    }

    pub fn try_sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.vars.check_same(&other.vars)?;
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), -*c);
        }
        Ok(out)
    }

    pub fn try_mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.vars.check_same(&other.vars)?;
        let mut out = Polynomial::zero(&self.vars);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.add_term(ma.mul(mb), ca * cb);
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        if s == 0.0 {
            return Polynomial::zero(&self.vars);
        }
        Polynomial {
            vars: self.vars.clone(),
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c * s)).collect(),
        }
    }

    pub fn pow(&self, e: u32) -> Polynomial {
        let mut acc = Polynomial::constant(&self.vars, 1.0);
        for _ in 0..e {
            acc = &acc * self;
        }
        acc
    }

    /// Partial derivative with respect to `name`.
    pub fn diff(&self, name: &str) -> Result<Polynomial, PolyError> {
        let i = self.vars.require(name)?;
        let mut out = Polynomial::zero(&self.vars);
        for (m, c) in &self.terms {
            let e = m.0[i];
            if e > 0 {
                let mut d = m.clone();
                d.0[i] -= 1;
                out.add_term(d, c * e as f64);
            }
        }
        Ok(out)
    }

    /// Simultaneous substitution. Polynomial bindings must share one variable
    /// set, which becomes the result's; unbound variables map to the
    /// same-named variable of that set.
    pub fn substitute(&self, bindings: &[(&str, Binding)]) -> Result<Polynomial, PolyError> {
        let (target, images) = resolve_bindings(&self.vars, bindings)?;
        let mut cache = PowerCache::new(images);
        let mut out = Polynomial::zero(&target);
        for (m, c) in &self.terms {
            let img = cache.expand(&target, m);
            for (mm, cc) in img.terms {
                out.add_term(mm, c * cc);
            }
        }
        Ok(out)
    }

    /// Re-expresses the polynomial over `target`, matching variables by name.
    pub fn embed(&self, target: &VarSet) -> Result<Polynomial, PolyError> {
        let map: Vec<usize> = self
            .vars
            .names()
            .iter()
            .map(|n| target.require(n))
            .collect::<Result<_, _>>()?;
        let mut out = Polynomial::zero(target);
        for (m, c) in &self.terms {
            let mut e = vec![0u32; target.len()];
            for (src, &dst) in map.iter().enumerate() {
                e[dst] = m.0[src];
            }
            out.add_term(Monomial(e), *c);
        }
        Ok(out)
    }

    /// Evaluates at named values; every variable must be bound.
    pub fn eval(&self, point: &HashMap<&str, f64>) -> Result<f64, PolyError> {
        let vals = self
            .vars
            .names()
            .iter()
            .map(|n| {
                point
                    .get(n.as_str())
                    .copied()
                    .ok_or_else(|| PolyError::Unbound(n.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.eval_slice(&vals))
    }

    /// Evaluates at values given in variable-set order.
    pub fn eval_slice(&self, point: &[f64]) -> f64 {
        assert_eq!(point.len(), self.vars.len(), "point arity mismatch");
        self.terms.iter().map(|(m, c)| c * m.eval(point)).sum()
    }
}

impl fmt::Display for Polynomial {
    /// Canonical text: terms in descending graded-lex order, explicit `*`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (m, &c)) in self.terms.iter().rev().enumerate() {
            let (neg, mag) = (c < 0.0, c.abs());
            match (k, neg) {
                (0, true) => write!(f, "-")?,
                (0, false) => {}
                (_, true) => write!(f, " - ")?,
                (_, false) => write!(f, " + ")?,
            }
            if m.is_one() {
                write!(f, "{mag}")?;
            } else if mag == 1.0 {
                write!(f, "{}", m.render(&self.vars))?;
            } else {
                write!(f, "{mag}*{}", m.render(&self.vars))?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Polynomial({:?}: {})", self.vars, self)
    }
}

macro_rules! binop {
    ($tr:ident, $method:ident, $try:ident) => {
        impl std::ops::$tr<&Polynomial> for &Polynomial {
            type Output = Polynomial;
            fn $method(self, rhs: &Polynomial) -> Polynomial {
                self.$try(rhs).expect("polynomial operands over different variable sets")
            }
        }
        impl std::ops::$tr<Polynomial> for Polynomial {
            type Output = Polynomial;
            fn $method(self, rhs: Polynomial) -> Polynomial {
                (&self).$method(&rhs)
            }
        }
    };
}

binop!(Add, add, try_add);
binop!(Sub, sub, try_sub);
binop!(Mul, mul, try_mul);

impl std::ops::Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x() -> VarSet {
        VarSet::new(["x"]).unwrap()
    }

    fn xz() -> VarSet {
        VarSet::new(["x", "z"]).unwrap()
    }

    fn binom(n: u64, k: u64) -> u64 {
        (1..=k).fold(1, |acc, i| acc * (n - k + i) / i)
    }

    #[test]
    fn add_collapses_cancelled_terms() {
        let v = x();
        let xx = Polynomial::var(&v, "x").unwrap();
        let p = &xx.pow(2) + &Polynomial::constant(&v, 1.0);
        let q = &xx.pow(2).scale(2.0) - &Polynomial::constant(&v, 1.0);
        let s = &p + &q;
        assert_eq!(s, xx.pow(2).scale(3.0));
        assert_eq!(s.len(), 1);
        assert_eq!(&p + &Polynomial::zero(&v), p);
    }

    #[test]
    fn mismatched_varsets_are_rejected() {
        let p = Polynomial::var(&x(), "x").unwrap();
        let q = Polynomial::var(&xz(), "x").unwrap();
        assert!(matches!(p.try_add(&q), Err(PolyError::VarSetMismatch { .. })));
        assert!(matches!(p.try_mul(&q), Err(PolyError::VarSetMismatch { .. })));
    }

    #[test]
    fn products() {
        let v = xz();
        let xx = Polynomial::var(&v, "x").unwrap();
        let zz = Polynomial::var(&v, "z").unwrap();
        let one = Polynomial::constant(&v, 1.0);
        assert_eq!(&(&xx + &one) * &(&xx - &one), &xx.pow(2) - &one);
        assert_eq!(&xx * &one, xx);
        let p = &xx.scale(2.0) * &zz.scale(3.0);
        assert_eq!(p.coeff(&Monomial::new(vec![1, 1])), 6.0);
        assert_eq!(p.len(), 1);
        assert_eq!(p.degree(), Some(2));
    }

    #[test]
    fn derivatives() {
        let v = xz();
        let xx = Polynomial::var(&v, "x").unwrap();
        let zz = Polynomial::var(&v, "z").unwrap();
        assert_eq!(xx.pow(3).diff("x").unwrap(), xx.pow(2).scale(3.0));
        assert_eq!((&xx * &xx.pow(2)).diff("x").unwrap(), xx.pow(2).scale(3.0));
        assert_eq!(zz.pow(4).diff("z").unwrap(), zz.pow(3).scale(4.0));
        assert!(matches!(xx.diff("q"), Err(PolyError::UnknownVariable(_))));
    }

    #[test]
    fn substitution_examples() {
        let v = VarSet::new(["t", "T"]).unwrap();
        let t = Polynomial::var(&v, "t").unwrap();
        let big_t = Polynomial::var(&v, "T").unwrap();
        let g = &t * &(&big_t - &t);
        let g1 = g.substitute(&[("T", 1.8.into())]).unwrap();
        let g2 = g1.substitute(&[("t", 1.8.into())]).unwrap();
        assert!(g2.is_zero());

        let v = VarSet::new(["t", "x", "z"]).unwrap();
        let f = &Polynomial::var(&v, "t").unwrap() * &Polynomial::var(&v, "z").unwrap().pow(2);
        let xv = Polynomial::var(&v, "x").unwrap();
        let r = f
            .substitute(&[("t", 0.0.into()), ("z", xv.into())])
            .unwrap();
        assert!(r.is_zero());
    }

    #[test]
    fn substitution_into_other_varset() {
        let src = VarSet::new(["z"]).unwrap();
        let dst = VarSet::new(["a", "b"]).unwrap();
        let p = Polynomial::var(&src, "z").unwrap().pow(2);
        let img = &Polynomial::var(&dst, "a").unwrap() + &Polynomial::var(&dst, "b").unwrap();
        let r = p.substitute(&[("z", img.clone().into())]).unwrap();
        assert_eq!(r, img.pow(2));
        let other = Polynomial::var(&src, "z").unwrap();
        assert!(matches!(
            p.substitute(&[("z", img.into()), ("z", other.into())]),
            Err(PolyError::InconsistentBindings)
        ));
    }

    #[test]
    fn evaluation() {
        let v = VarSet::new(["z", "x"]).unwrap();
        let z = Polynomial::var(&v, "z").unwrap();
        let xx = Polynomial::var(&v, "x").unwrap();
        let f = &(&z.pow(3).scale(-1.0) + &z.pow(2).scale(2.0)) - &xx.scale(1.1);
        let pt: HashMap<&str, f64> = [("z", 1.0), ("x", 1.0)].into_iter().collect();
        assert!((f.eval(&pt).unwrap() - (-0.1)).abs() < 1e-15);
        assert_eq!(Polynomial::zero(&v).eval(&pt).unwrap(), 0.0);
        let partial: HashMap<&str, f64> = [("z", 1.0)].into_iter().collect();
        assert!(matches!(f.eval(&partial), Err(PolyError::Unbound(_))));

        let basis = monomials_upto(&x(), 2);
        let vals: Vec<f64> = basis.iter().map(|m| m.eval(&[2.0])).collect();
        assert_eq!(vals, vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn monomial_counts_match_binomials() {
        assert_eq!(monomials_upto(&x(), 2).len(), 3);
        assert_eq!(monomials_upto(&xz(), 2).len(), 6);
        for n in 1..=6usize {
            let v = VarSet::new((0..n).map(|i| format!("v{i}"))).unwrap();
            for d in 0..=12u32 {
                let got = monomials_upto(&v, d).len() as u64;
                assert_eq!(got, binom(n as u64 + d as u64, d as u64), "n={n} d={d}");
            }
        }
    }

    #[test]
    fn graded_lex_order() {
        let v = xz();
        let r: Vec<String> = monomials_upto(&v, 2).iter().map(|m| m.render(&v)).collect();
        assert_eq!(r, ["1", "x", "z", "x^2", "x*z", "z^2"]);
    }

    #[test]
    fn zero_polynomial_has_no_degree() {
        let v = x();
        assert_eq!(Polynomial::zero(&v).degree(), None);
        assert_eq!(Polynomial::constant(&v, 3.0).degree(), Some(0));
    }

    #[test]
    fn display_is_canonical() {
        let v = VarSet::new(["z", "x"]).unwrap();
        let z = Polynomial::var(&v, "z").unwrap();
        let xx = Polynomial::var(&v, "x").unwrap();
        let f = &(&z.pow(3).scale(-1.0) + &z.pow(2).scale(2.0)) - &xx.scale(1.1);
        assert_eq!(f.to_string(), "-z^3 + 2*z^2 - 1.1*x");
        assert_eq!(Polynomial::zero(&v).to_string(), "0");
    }

    #[test]
    fn embedding_renames_by_name() {
        let small = VarSet::new(["z"]).unwrap();
        let big = VarSet::new(["t", "x", "z"]).unwrap();
        let p = Polynomial::var(&small, "z").unwrap().pow(2);
        let e = p.embed(&big).unwrap();
        assert_eq!(e.coeff(&Monomial::new(vec![0, 0, 2])), 1.0);
        assert!(Polynomial::var(&big, "t").unwrap().embed(&small).is_err());
    }
}
