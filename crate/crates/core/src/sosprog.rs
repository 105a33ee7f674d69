//! Sum-of-squares programs: decision polynomials, Gram-parameterized SOS
//! polynomials and coefficient-matching constraints, compiled to a conic
//! problem over free scalars and PSD blocks.
//!
//! All decision polynomials of one program share a single table of scalar
//! unknowns, so a polynomial used in several constraints couples them.

use std::collections::btree_map::Entry as MapEntry;
use std::collections::BTreeMap;

use faer::Mat;
use thiserror::Error;

use crate::conic::{Block, BlockKind, ConicProblem, ConicSolution, Entry, ObjectiveEntry};
use crate::poly::{
    monomials_upto, resolve_bindings, Binding, Monomial, PolyError, Polynomial, PowerCache,
    VarSet, PRUNE_TOL,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SosError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("an SOS polynomial must have even degree, got {0}")]
    OddDegree(u32),
    #[error("product of two expressions that both depend on unknowns")]
    Nonlinear,
    #[error("coefficient of `{monomial}` cannot be matched: no unknown reaches it (lhs - rhs = {residual:e})")]
    InfeasibleRow { monomial: String, residual: f64 },
    #[error("program has no constraints")]
    Empty,
    #[error("expected {expected} multiplier degrees, got {got}")]
    DegreeCount { expected: usize, got: usize },
}

/// Index of a scalar unknown in a program's table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Unknown(pub usize);

/// Affine combination of unknowns: `constant + sum(coeff * unknown)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub constant: f64,
    terms: BTreeMap<usize, f64>,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        LinExpr {
            constant: c,
            terms: BTreeMap::new(),
        }
    }

    pub fn unknown(u: Unknown) -> Self {
        Self::term(u, 1.0)
    }

    pub fn term(u: Unknown, c: f64) -> Self {
        let mut e = LinExpr::default();
        e.add_term(u, c);
        e
    }

    pub fn add_term(&mut self, u: Unknown, c: f64) {
        if c == 0.0 {
            return;
        }
        match self.terms.entry(u.0) {
            MapEntry::Occupied(mut o) => {
                let v = *o.get() + c;
                if v == 0.0 {
                    o.remove();
                } else {
                    *o.get_mut() = v;
                }
            }
            MapEntry::Vacant(v) => {
                v.insert(c);
            }
        }
    }

    pub fn add_scaled(&mut self, other: &LinExpr, s: f64) {
        self.constant += other.constant * s;
        for (&u, &c) in &other.terms {
            self.add_term(Unknown(u), c * s);
        }
    }

    pub fn scaled(&self, s: f64) -> LinExpr {
        let mut e = LinExpr::default();
        e.add_scaled(self, s);
        e
    }

    pub fn terms(&self) -> impl Iterator<Item = (Unknown, f64)> + '_ {
        self.terms.iter().map(|(&u, &c)| (Unknown(u), c))
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() && self.constant == 0.0
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(&u, &c)| c * values[u]).sum::<f64>()
    }
}

/// Polynomial whose coefficients are affine in the program's unknowns.
#[derive(Clone, Debug, PartialEq)]
pub struct LinPoly {
    vars: VarSet,
    terms: BTreeMap<Monomial, LinExpr>,
}

impl LinPoly {
    pub fn zero(vars: &VarSet) -> Self {
        LinPoly {
            vars: vars.clone(),
            terms: BTreeMap::new(),
        }
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &LinExpr)> + '_ {
        self.terms.iter()
    }

    pub fn add_coeff(&mut self, m: Monomial, e: &LinExpr, s: f64) {
        if s == 0.0 || e.is_zero() {
            return;
        }
        match self.terms.entry(m) {
            MapEntry::Occupied(mut o) => {
                o.get_mut().add_scaled(e, s);
                if o.get().is_zero() {
                    o.remove();
                }
            }
            MapEntry::Vacant(v) => {
                v.insert(e.scaled(s));
            }
        }
    }

    /// Degree of the support; `None` when identically zero.
    pub fn degree(&self) -> Option<u32> {
        self.terms.keys().map(Monomial::degree).max()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.values().all(LinExpr::is_constant)
    }

    pub fn try_add(&self, other: &LinPoly) -> Result<LinPoly, SosError> {
        self.combine(other, 1.0)
    }

    pub fn try_sub(&self, other: &LinPoly) -> Result<LinPoly, SosError> {
        self.combine(other, -1.0)
    }

    fn combine(&self, other: &LinPoly, s: f64) -> Result<LinPoly, SosError> {
        check_vars(&self.vars, &other.vars)?;
        let mut out = self.clone();
        for (m, e) in &other.terms {
            out.add_coeff(m.clone(), e, s);
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> LinPoly {
        let mut out = LinPoly::zero(&self.vars);
        for (m, e) in &self.terms {
            out.add_coeff(m.clone(), e, s);
        }
        out
    }

    pub fn mul_poly(&self, p: &Polynomial) -> Result<LinPoly, SosError> {
        check_vars(&self.vars, p.vars())?;
        let mut out = LinPoly::zero(&self.vars);
        for (m, e) in &self.terms {
            for (pm, pc) in p.terms() {
                out.add_coeff(m.mul(pm), e, pc);
            }
        }
        Ok(out)
    }

    /// Product of two affine polynomials; fails unless one side is free of unknowns.
    pub fn try_mul(&self, other: &LinPoly) -> Result<LinPoly, SosError> {
        if self.is_constant() {
            other.mul_poly(&self.constant_part())
        } else if other.is_constant() {
            self.mul_poly(&other.constant_part())
        } else {
            Err(SosError::Nonlinear)
        }
    }

    fn constant_part(&self) -> Polynomial {
        Polynomial::from_terms(
            &self.vars,
            self.terms.iter().map(|(m, e)| (m.clone(), e.constant)),
        )
    }

    pub fn diff(&self, name: &str) -> Result<LinPoly, SosError> {
        let i = self
            .vars
            .index_of(name)
            .ok_or_else(|| PolyError::UnknownVariable(name.to_string()))?;
        let mut out = LinPoly::zero(&self.vars);
        for (m, e) in &self.terms {
            let k = m.exponents()[i];
            if k > 0 {
                let mut ex = m.exponents().to_vec();
                ex[i] -= 1;
                out.add_coeff(Monomial::new(ex), e, k as f64);
            }
        }
        Ok(out)
    }

    /// Simultaneous substitution with the same rules as [`Polynomial::substitute`].
    pub fn substitute(&self, bindings: &[(&str, Binding)]) -> Result<LinPoly, SosError> {
        let (target, images) = resolve_bindings(&self.vars, bindings)?;
        let mut cache = PowerCache::new(images);
        let mut out = LinPoly::zero(&target);
        for (m, e) in &self.terms {
            let img = cache.expand(&target, m);
            for (mm, c) in img.terms() {
                out.add_coeff(mm.clone(), e, c);
            }
        }
        Ok(out)
    }

    pub fn embed(&self, target: &VarSet) -> Result<LinPoly, SosError> {
        let map: Vec<usize> = self
            .vars
            .names()
            .iter()
            .map(|n| {
                target
                    .index_of(n)
                    .ok_or_else(|| PolyError::UnknownVariable(n.clone()))
            })
            .collect::<Result<_, _>>()?;
        let mut out = LinPoly::zero(target);
        for (m, e) in &self.terms {
            let mut ex = vec![0u32; target.len()];
            for (src, &dst) in map.iter().enumerate() {
                ex[dst] = m.exponents()[src];
            }
            out.add_coeff(Monomial::new(ex), e, 1.0);
        }
        Ok(out)
    }

    /// Concrete polynomial obtained by plugging in unknown values.
    pub fn evaluate(&self, values: &[f64]) -> Polynomial {
        Polynomial::from_terms(
            &self.vars,
            self.terms.iter().map(|(m, e)| (m.clone(), e.eval(values))),
        )
    }
}

impl From<&Polynomial> for LinPoly {
    fn from(p: &Polynomial) -> Self {
        let mut out = LinPoly::zero(p.vars());
        for (m, c) in p.terms() {
            out.add_coeff(m.clone(), &LinExpr::constant(c), 1.0);
        }
        out
    }
}

fn check_vars(a: &VarSet, b: &VarSet) -> Result<(), SosError> {
    if a == b {
        Ok(())
    } else {
        Err(PolyError::VarSetMismatch {
            left: a.names().join(","),
            right: b.names().join(","),
        }
        .into())
    }
}

/// Polynomial with one free unknown per basis monomial.
#[derive(Clone, Debug)]
pub struct DecisionPoly {
    vars: VarSet,
    basis: Vec<Monomial>,
    unknowns: Vec<Unknown>,
}

impl DecisionPoly {
    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn basis(&self) -> &[Monomial] {
        &self.basis
    }

    pub fn unknowns(&self) -> &[Unknown] {
        &self.unknowns
    }

    pub fn poly(&self) -> LinPoly {
        let mut out = LinPoly::zero(&self.vars);
        for (m, &u) in self.basis.iter().zip(&self.unknowns) {
            out.add_coeff(m.clone(), &LinExpr::unknown(u), 1.0);
        }
        out
    }
}

/// SOS polynomial `Z^T G Z` with `G` a PSD block of unknowns.
#[derive(Clone, Debug)]
pub struct SosDecisionPoly {
    vars: VarSet,
    basis: Vec<Monomial>,
    block: usize,
    first: usize,
}

impl SosDecisionPoly {
    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    /// The half-degree monomial vector `Z`.
    pub fn basis(&self) -> &[Monomial] {
        &self.basis
    }

    pub fn size(&self) -> usize {
        self.basis.len()
    }

    /// Index of this polynomial's PSD block among the program's blocks.
    pub fn block(&self) -> usize {
        self.block
    }

    /// Unknown holding `G[i][j]` (symmetric, any order).
    pub fn gram_unknown(&self, i: usize, j: usize) -> Unknown {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        Unknown(self.first + upper_index(self.basis.len(), i, j))
    }

    pub fn poly(&self) -> LinPoly {
        let n = self.basis.len();
        let mut out = LinPoly::zero(&self.vars);
        for i in 0..n {
            for j in i..n {
                let c = if i == j { 1.0 } else { 2.0 };
                out.add_coeff(
                    self.basis[i].mul(&self.basis[j]),
                    &LinExpr::unknown(self.gram_unknown(i, j)),
                    c,
                );
            }
        }
        out
    }

    /// `trace(G)` as an affine expression.
    pub fn trace(&self) -> LinExpr {
        let mut e = LinExpr::default();
        for i in 0..self.basis.len() {
            e.add_term(self.gram_unknown(i, i), 1.0);
        }
        e
    }
}

fn upper_index(n: usize, i: usize, j: usize) -> usize {
    // row-major over the upper triangle
    i * (2 * n - i + 1) / 2 + (j - i)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnknownKind {
    Free,
    Gram { block: usize, i: usize, j: usize },
}

#[derive(Clone, Debug)]
struct Row {
    terms: Vec<(usize, f64)>,
    rhs: f64,
    label: String,
}

/// Multipliers created by [`SosProgram::psatz_combine`].
#[derive(Clone, Debug)]
pub struct Multipliers {
    pub s0: SosDecisionPoly,
    /// One multiplier per localizer, in order.
    pub localized: Vec<SosDecisionPoly>,
}

/// Options for [`SosProgram::psatz_combine`].
#[derive(Default)]
pub struct PsatzOptions<'a> {
    /// Explicit degrees for `s0, s1, ...`; auto-sized when `None`.
    pub degrees: Option<Vec<u32>>,
    /// Keeps only the half-degree basis monomials accepted by the filter.
    pub basis_filter: Option<&'a dyn Fn(&Monomial) -> bool>,
}

fn even_ceil(d: i64) -> u32 {
    let d = d.max(0) as u32;
    d + d % 2
}

/// Builder for an SOS feasibility (or optimization) program.
#[derive(Clone, Debug, Default)]
pub struct SosProgram {
    kinds: Vec<UnknownKind>,
    block_sizes: Vec<usize>,
    rows: Vec<Row>,
    objective: LinExpr,
}

impl SosProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_unknowns(&self) -> usize {
        self.kinds.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn psd_block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn num_free(&self) -> usize {
        self.kinds.iter().filter(|k| **k == UnknownKind::Free).count()
    }

    fn fresh_free(&mut self) -> Unknown {
        self.kinds.push(UnknownKind::Free);
        Unknown(self.kinds.len() - 1)
    }

    /// Decision polynomial over all monomials of degree `<= degree`.
    pub fn new_decision_poly(&mut self, vars: &VarSet, degree: u32) -> DecisionPoly {
        self.new_decision_poly_with_basis(vars, monomials_upto(vars, degree))
    }

    pub fn new_decision_poly_with_basis(
        &mut self,
        vars: &VarSet,
        basis: Vec<Monomial>,
    ) -> DecisionPoly {
        let unknowns = basis.iter().map(|_| self.fresh_free()).collect();
        DecisionPoly {
            vars: vars.clone(),
            basis,
            unknowns,
        }
    }

    /// SOS polynomial of the given even degree, Gram basis `monomials_upto(vars, degree / 2)`.
    pub fn new_sos_poly(&mut self, vars: &VarSet, degree: u32) -> Result<SosDecisionPoly, SosError> {
        if degree % 2 == 1 {
            return Err(SosError::OddDegree(degree));
        }
        Ok(self.new_sos_poly_with_basis(vars, monomials_upto(vars, degree / 2)))
    }

    pub fn new_sos_poly_with_basis(&mut self, vars: &VarSet, basis: Vec<Monomial>) -> SosDecisionPoly {
        let n = basis.len();
        let block = self.block_sizes.len();
        self.block_sizes.push(n);
        let first = self.kinds.len();
        for i in 0..n {
            for j in i..n {
                self.kinds.push(UnknownKind::Gram { block, i, j });
            }
        }
        SosDecisionPoly {
            vars: vars.clone(),
            basis,
            block,
            first,
        }
    }

    /// Adds `expr = rhs` as a single row.
    pub fn assert_linear_eq(&mut self, expr: &LinExpr, rhs: f64) -> Result<(), SosError> {
        let terms: Vec<(usize, f64)> = expr
            .terms()
            .filter(|(_, c)| c.abs() >= PRUNE_TOL)
            .map(|(u, c)| (u.0, c))
            .collect();
        let rhs = rhs - expr.constant;
        if terms.is_empty() {
            if rhs.abs() >= PRUNE_TOL {
                return Err(SosError::InfeasibleRow {
                    monomial: "<scalar>".into(),
                    residual: rhs,
                });
            }
            return Ok(());
        }
        self.rows.push(Row {
            terms,
            rhs,
            label: "<scalar>".into(),
        });
        Ok(())
    }

    /// Coefficient matching: one row per monomial in the union of supports.
    /// Returns the number of rows added.
    pub fn assert_poly_eq(&mut self, lhs: &LinPoly, rhs: &LinPoly) -> Result<usize, SosError> {
        let diff = lhs.try_sub(rhs)?;
        let mut added = Vec::new();
        for (m, e) in diff.terms() {
            let terms: Vec<(usize, f64)> = e
                .terms()
                .filter(|(_, c)| c.abs() >= PRUNE_TOL)
                .map(|(u, c)| (u.0, c))
                .collect();
            if terms.is_empty() {
                if e.constant.abs() >= PRUNE_TOL {
                    return Err(SosError::InfeasibleRow {
                        monomial: m.render(diff.vars()),
                        residual: e.constant,
                    });
                }
                continue;
            }
            added.push(Row {
                terms,
                rhs: -e.constant,
                label: m.render(diff.vars()),
            });
        }
        let n = added.len();
        self.rows.extend(added);
        Ok(n)
    }

    /// Asserts `target = s0 + sum_i s_i * g_i` with fresh SOS multipliers.
    ///
    /// Auto-sized degrees: `deg s0` is the smallest even integer `>= deg target`
    /// and `deg s_i` the smallest even integer `>= deg target - deg g_i`.
    pub fn psatz_combine(
        &mut self,
        target: &LinPoly,
        localizers: &[Polynomial],
        opts: &PsatzOptions<'_>,
    ) -> Result<Multipliers, SosError> {
        let vars = target.vars().clone();
        for g in localizers {
            check_vars(&vars, g.vars())?;
        }
        let degrees = match &opts.degrees {
            Some(d) => {
                if d.len() != localizers.len() + 1 {
                    return Err(SosError::DegreeCount {
                        expected: localizers.len() + 1,
                        got: d.len(),
                    });
                }
                d.clone()
            }
            None => {
                let dt = target.degree().unwrap_or(0) as i64;
                std::iter::once(even_ceil(dt))
                    .chain(
                        localizers
                            .iter()
                            .map(|g| even_ceil(dt - g.degree().unwrap_or(0) as i64)),
                    )
                    .collect()
            }
        };
        if let Some(&odd) = degrees.iter().find(|d| *d % 2 == 1) {
            return Err(SosError::OddDegree(odd));
        }
        let mut make = |deg: u32| {
            let basis: Vec<Monomial> = monomials_upto(&vars, deg / 2)
                .into_iter()
                .filter(|m| opts.basis_filter.map_or(true, |f| f(m)))
                .collect();
            self.new_sos_poly_with_basis(&vars, basis)
        };
        let s0 = make(degrees[0]);
        let localized: Vec<SosDecisionPoly> = degrees[1..].iter().map(|&d| make(d)).collect();
        let mut rhs = s0.poly();
        for (s, g) in localized.iter().zip(localizers) {
            rhs = rhs.try_add(&s.poly().mul_poly(g)?)?;
        }
        self.assert_poly_eq(target, &rhs)?;
        Ok(Multipliers { s0, localized })
    }

    /// Minimizes `expr`; the default objective is zero (pure feasibility).
    pub fn set_objective(&mut self, expr: LinExpr) {
        self.objective = expr;
    }

    /// Gram basis positions that every solution must leave at zero.
    ///
    /// A row with zero right-hand side whose remaining entries are all
    /// diagonal Gram entries of one sign forces each of those diagonals, and
    /// hence its whole row and column, to zero. Eliminations are propagated
    /// until nothing changes.
    pub fn forced_zero_basis(&self) -> Vec<Vec<bool>> {
        let mut dead: Vec<Vec<bool>> = self.block_sizes.iter().map(|&n| vec![false; n]).collect();
        loop {
            let mut changed = false;
            'rows: for row in &self.rows {
                if row.rhs.abs() >= PRUNE_TOL {
                    continue;
                }
                let mut sign = 0.0;
                let mut diag = Vec::new();
                for &(u, c) in &row.terms {
                    match self.kinds[u] {
                        UnknownKind::Free => continue 'rows,
                        UnknownKind::Gram { block, i, j } => {
                            if dead[block][i] || dead[block][j] {
                                continue;
                            }
                            if i != j || (sign != 0.0 && c.signum() != sign) {
                                continue 'rows;
                            }
                            sign = c.signum();
                            diag.push((block, i));
                        }
                    }
                }
                for &(b, i) in &diag {
                    dead[b][i] = true;
                    changed = true;
                }
            }
            if !changed {
                return dead;
            }
        }
    }

    /// Block numbering after elimination: `(offset, per-block index, per-block position maps)`.
    fn layout(&self, dead: &[Vec<bool>]) -> (usize, Vec<Option<usize>>, Vec<Vec<Option<usize>>>) {
        let offset = usize::from(self.num_free() > 0);
        let mut next = offset;
        let mut block_map = Vec::with_capacity(dead.len());
        let mut pos_map = Vec::with_capacity(dead.len());
        for d in dead {
            let mut k = 0;
            let map: Vec<Option<usize>> = d
                .iter()
                .map(|&gone| {
                    (!gone).then(|| {
                        k += 1;
                        k - 1
                    })
                })
                .collect();
            if k > 0 {
                block_map.push(Some(next));
                next += 1;
            } else {
                block_map.push(None);
            }
            pos_map.push(map);
        }
        (offset, block_map, pos_map)
    }

    /// Conic form: block 0 holds the free unknowns in creation order (when
    /// any exist), followed by one PSD block per SOS polynomial in creation
    /// order. Basis positions found by [`Self::forced_zero_basis`] are
    /// removed, and blocks left empty are dropped.
    pub fn compile(&self) -> Result<ConicProblem, SosError> {
        if self.rows.is_empty() {
            return Err(SosError::Empty);
        }
        let nfree = self.num_free();
        let dead = self.forced_zero_basis();
        let (_, block_map, pos_map) = self.layout(&dead);
        let mut blocks = Vec::with_capacity(self.block_sizes.len() + 1);
        if nfree > 0 {
            blocks.push(Block {
                kind: BlockKind::Free,
                size: nfree,
            });
        }
        for (b, map) in pos_map.iter().enumerate() {
            if block_map[b].is_some() {
                blocks.push(Block {
                    kind: BlockKind::Psd,
                    size: map.iter().flatten().count(),
                });
            }
        }
        let mut free_index = vec![usize::MAX; self.kinds.len()];
        let mut next = 0;
        for (u, k) in self.kinds.iter().enumerate() {
            if *k == UnknownKind::Free {
                free_index[u] = next;
                next += 1;
            }
        }
        let locate = |u: usize| -> Option<(usize, usize, usize)> {
            match self.kinds[u] {
                UnknownKind::Free => Some((0, free_index[u], 0)),
                UnknownKind::Gram { block, i, j } => {
                    let nb = block_map[block]?;
                    let (pi, pj) = (pos_map[block][i]?, pos_map[block][j]?);
                    Some((nb, pi.min(pj), pi.max(pj)))
                }
            }
        };
        let mut entries = Vec::new();
        let mut rhs = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let r = rhs.len();
            let mut es: Vec<Entry> = row
                .terms
                .iter()
                .filter_map(|&(u, value)| {
                    locate(u).map(|(block, i, j)| Entry {
                        row: r,
                        block,
                        i,
                        j,
                        value,
                    })
                })
                .collect();
            if es.is_empty() {
                if row.rhs.abs() >= PRUNE_TOL {
                    return Err(SosError::InfeasibleRow {
                        monomial: row.label.clone(),
                        residual: -row.rhs,
                    });
                }
                continue;
            }
            es.sort_by_key(|e| (e.block, e.i, e.j));
            entries.extend(es);
            rhs.push(row.rhs);
        }
        if rhs.is_empty() {
            return Err(SosError::Empty);
        }
        let objective = self
            .objective
            .terms()
            .filter_map(|(u, value)| locate(u.0).map(|(block, i, j)| ObjectiveEntry { block, i, j, value }))
            .collect();
        Ok(ConicProblem {
            blocks,
            entries,
            rhs,
            objective,
        })
    }

    /// Maps a solution of [`Self::compile`]'s problem back onto the unknown table.
    pub fn extract(&self, sol: &ConicSolution) -> SosValues {
        let dead = self.forced_zero_basis();
        let (_, block_map, pos_map) = self.layout(&dead);
        let mut values = vec![0.0; self.kinds.len()];
        let mut next = 0;
        for (u, k) in self.kinds.iter().enumerate() {
            values[u] = match *k {
                UnknownKind::Free => {
                    let v = sol.free_value(0, next);
                    next += 1;
                    v
                }
                UnknownKind::Gram { block, i, j } => match (block_map[block], pos_map[block][i], pos_map[block][j]) {
                    (Some(b), Some(pi), Some(pj)) => sol.psd_value(b, pi, pj),
                    _ => 0.0,
                },
            };
        }
        SosValues { values }
    }
}

/// Numeric values for every unknown of a program.
#[derive(Clone, Debug)]
pub struct SosValues {
    pub values: Vec<f64>,
}

impl SosValues {
    pub fn poly(&self, p: &LinPoly) -> Polynomial {
        p.evaluate(&self.values)
    }

    pub fn gram(&self, s: &SosDecisionPoly) -> Mat<f64> {
        let n = s.size();
        Mat::from_fn(n, n, |i, j| self.values[s.gram_unknown(i, j).0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xv() -> VarSet {
        VarSet::new(["x"]).unwrap()
    }

    #[test]
    fn upper_triangle_indexing_is_row_major() {
        for n in 1..8 {
            let mut k = 0;
            for i in 0..n {
                for j in i..n {
                    assert_eq!(upper_index(n, i, j), k, "n={n} i={i} j={j}");
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn decision_poly_sizes() {
        let mut p = SosProgram::new();
        assert_eq!(p.new_decision_poly(&xv(), 4).unknowns().len(), 5);
        let txz = VarSet::new(["t", "x", "z"]).unwrap();
        assert_eq!(p.new_decision_poly(&txz, 4).unknowns().len(), 35);
        assert_eq!(p.new_decision_poly(&xv(), 0).unknowns().len(), 1);
    }

    #[test]
    fn sos_poly_sizes() {
        let mut p = SosProgram::new();
        assert_eq!(p.new_sos_poly(&xv(), 2).unwrap().size(), 2);
        let txz = VarSet::new(["t", "x", "z"]).unwrap();
        assert_eq!(p.new_sos_poly(&txz, 6).unwrap().size(), 20);
        assert_eq!(p.new_sos_poly(&xv(), 3).unwrap_err(), SosError::OddDegree(3));
    }

    #[test]
    fn matching_single_coefficient() {
        let v = xv();
        let mut p = SosProgram::new();
        let c = p.new_decision_poly_with_basis(&v, vec![Monomial::new(vec![2])]);
        let three_x2 = LinPoly::from(&Polynomial::var(&v, "x").unwrap().pow(2).scale(3.0));
        assert_eq!(p.assert_poly_eq(&c.poly(), &three_x2).unwrap(), 1);
        let prob = p.compile().unwrap();
        assert_eq!(prob.rhs, vec![3.0]);
        assert_eq!(prob.entries.len(), 1);
    }

    #[test]
    fn extra_monomial_is_forced_to_zero() {
        let v = xv();
        let mut p = SosProgram::new();
        let d = p.new_decision_poly(&v, 1);
        let one = LinPoly::from(&Polynomial::constant(&v, 1.0));
        assert_eq!(p.assert_poly_eq(&d.poly(), &one).unwrap(), 2);
        let prob = p.compile().unwrap();
        assert_eq!(prob.rhs, vec![1.0, 0.0]);
    }

    #[test]
    fn unreachable_monomial_is_reported() {
        let v = xv();
        let mut p = SosProgram::new();
        let d = p.new_decision_poly(&v, 1);
        let x2 = LinPoly::from(&Polynomial::var(&v, "x").unwrap().pow(2));
        let err = p.assert_poly_eq(&d.poly(), &x2).unwrap_err();
        assert_eq!(
            err,
            SosError::InfeasibleRow {
                monomial: "x^2".into(),
                residual: -1.0
            }
        );
    }

    #[test]
    fn product_of_unknown_polys_is_rejected() {
        let v = xv();
        let mut p = SosProgram::new();
        let a = p.new_decision_poly(&v, 1).poly();
        let b = p.new_decision_poly(&v, 1).poly();
        assert_eq!(a.try_mul(&b).unwrap_err(), SosError::Nonlinear);
        let k = LinPoly::from(&Polynomial::constant(&v, 2.0));
        assert!(a.try_mul(&k).is_ok());
    }

    #[test]
    fn gram_expansion() {
        let v = xv();
        let mut p = SosProgram::new();
        let s = p.new_sos_poly(&v, 2).unwrap();
        let values: Vec<f64> = {
            // G = [[2, 1], [1, 1]] -> x^2 + 2x + 2
            let mut vals = vec![0.0; p.num_unknowns()];
            vals[s.gram_unknown(0, 0).0] = 2.0;
            vals[s.gram_unknown(0, 1).0] = 1.0;
            vals[s.gram_unknown(1, 1).0] = 1.0;
            vals
        };
        let poly = s.poly().evaluate(&values);
        assert_eq!(poly.to_string(), "x^2 + 2*x + 2");
    }

    #[test]
    fn compile_sos_constraint_shape() {
        let v = xv();
        let mut p = SosProgram::new();
        let target = LinPoly::from(&crate::expr::parse_polynomial("x^2 + 2*x + 2", &v).unwrap());
        let m = p.psatz_combine(&target, &[], &PsatzOptions::default()).unwrap();
        assert_eq!(m.s0.size(), 2);
        let prob = p.compile().unwrap();
        assert_eq!(prob.blocks, vec![Block { kind: BlockKind::Psd, size: 2 }]);
        assert_eq!(prob.nrows(), 3);
        prob.validate().unwrap();
    }

    #[test]
    fn psatz_identity_holds_for_hand_multipliers() {
        // t(T - t) = s0 + s1 * t(T - t) with s1 = 1, s0 = 0
        let v = VarSet::new(["t"]).unwrap();
        let t = Polynomial::var(&v, "t").unwrap();
        let g = &t * &(&Polynomial::constant(&v, 1.8) - &t);
        let mut p = SosProgram::new();
        let target = LinPoly::from(&g);
        let m = p.psatz_combine(&target, &[g.clone()], &PsatzOptions::default()).unwrap();
        assert_eq!(m.s0.basis().len(), 2);
        assert_eq!(m.localized[0].basis().len(), 1);
        let mut vals = vec![0.0; p.num_unknowns()];
        vals[m.localized[0].gram_unknown(0, 0).0] = 1.0;
        let lhs = target.evaluate(&vals);
        let rhs = &m.s0.poly().evaluate(&vals) + &(&m.localized[0].poly().evaluate(&vals) * &g);
        assert!((&lhs - &rhs).pruned(1e-12).is_zero());
    }

    #[test]
    fn asynchronous_localizers_generate_two_multipliers() {
        let v = VarSet::new(["t", "T"]).unwrap();
        let t = Polynomial::var(&v, "t").unwrap();
        let tt = Polynomial::var(&v, "T").unwrap();
        let g1 = &t * &(&tt - &t);
        let g2 = &(&tt - &Polynomial::constant(&v, 0.0)) * &(&Polynomial::constant(&v, 1.6) - &tt);
        let mut p = SosProgram::new();
        let target = LinPoly::from(&(&t * &tt).pow(2));
        let m = p
            .psatz_combine(&target, &[g1, g2], &PsatzOptions::default())
            .unwrap();
        assert_eq!(m.localized.len(), 2);
        // deg target 4: s0 degree 4, s1 and s2 degree 2
        assert_eq!(m.s0.size(), 6);
        assert_eq!(m.localized[0].size(), 3);
        assert_eq!(m.localized[1].size(), 3);
    }

    #[test]
    fn diff_and_substitute_on_affine_polys() {
        let v = VarSet::new(["t", "x", "z"]).unwrap();
        let mut p = SosProgram::new();
        let f = p.new_decision_poly(&v, 2).poly();
        let vals: Vec<f64> = (0..p.num_unknowns()).map(|i| 1.0 + i as f64).collect();
        let concrete = f.evaluate(&vals);
        assert_eq!(f.diff("z").unwrap().evaluate(&vals), concrete.diff("z").unwrap());
        let xpoly = Polynomial::var(&v, "x").unwrap();
        let b = [("t", Binding::Const(0.5)), ("z", Binding::Poly(xpoly))];
        assert_eq!(f.substitute(&b).unwrap().evaluate(&vals), concrete.substitute(&b).unwrap());
    }
}
