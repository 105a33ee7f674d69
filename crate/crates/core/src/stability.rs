//! Lyapunov certificates for sampled-data systems.
//!
//! A certificate is a pair `(V, F)`: `V(z)` is a Lyapunov function for the
//! continuous state and `F(t, x, z)` is a spacing function that may grow
//! inside a sampling interval but returns to its starting value at the next
//! sample. Both are found by one SOS feasibility program.
//!
//! Variable naming follows the system files: `z1..zn` is the current state,
//! `xk1..xkn` the held sample, `t` the time since the last sample and, in
//! asynchronous mode, `T` the length of the current interval.
//!
//! All SOS bases exclude monomials that are pure in `(t, T)`. At the zero
//! state the decrease identity must vanish identically (its integral over an
//! interval is zero and its sign is fixed), so those Gram rows are forced to
//! zero in every solution. Dropping them removes a face on which no interior
//! point exists and leaves the feasible set unchanged.

use std::collections::BTreeMap;
use std::fmt;

use faer::Mat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, check_psd, SolveStatus, SolverOptions};
use crate::expr::{sample_var, state_var, SystemDef, SystemError, SystemFile};
use crate::poly::{Binding, Monomial, PolyError, Polynomial, VarSet};
use crate::sosprog::{
    DecisionPoly, LinPoly, PsatzOptions, SosDecisionPoly, SosError, SosProgram, SosValues,
};

/// Coefficient residuals are accepted up to this multiple of the identity's scale.
pub const IDENTITY_TOL: f64 = 1e-6;
/// Smallest accepted Gram eigenvalue.
pub const GRAM_TOL: f64 = 1e-8;

pub const T_VAR: &str = "t";
pub const PERIOD_VAR: &str = "T";

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("degree must be a positive even integer, got {0}")]
    OddDegree(u32),
    #[error("invalid sampling period: {0}")]
    InvalidPeriod(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dynamics do not vanish at the origin (component {0})")]
    NonzeroEquilibrium(usize),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Conic(#[from] conic::ConicError),
    #[error("certificate is inconsistent: {0}")]
    Certificate(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    /// Every interval has length `period`.
    Synchronous { period: f64 },
    /// Interval lengths vary in `[t_min, t_max]`.
    Asynchronous { t_min: f64, t_max: f64 },
}

impl Mode {
    /// Longest interval length allowed by the mode.
    pub fn longest(&self) -> f64 {
        match *self {
            Mode::Synchronous { period } => period,
            Mode::Asynchronous { t_max, .. } => t_max,
        }
    }

    pub fn validate(&self) -> Result<(), StabilityError> {
        match *self {
            Mode::Synchronous { period } if !(period > 0.0 && period.is_finite()) => Err(
                StabilityError::InvalidPeriod(format!("T must be positive, got {period}")),
            ),
            Mode::Asynchronous { t_min, t_max }
                if !(t_min >= 0.0 && t_min < t_max && t_max.is_finite()) =>
            {
                Err(StabilityError::InvalidPeriod(format!(
                    "need 0 <= Tmin < Tmax, got [{t_min}, {t_max}]"
                )))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Synchronous { period } => write!(f, "synchronous T={period}"),
            Mode::Asynchronous { t_min, t_max } => write!(f, "asynchronous T in [{t_min}, {t_max}]"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StabilityQuery {
    pub system: SystemDef,
    pub mode: Mode,
    /// Degree of `V` and `F`.
    pub degree: u32,
    /// Decay rate.
    pub alpha: f64,
    /// Lower bound `V >= mu1 |z|^2`.
    pub mu1: f64,
    /// Strict decrease margin added as `eps |z|^2`.
    pub eps: f64,
}

impl StabilityQuery {
    pub const DEFAULT_MU1: f64 = 1e-2;
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(system: SystemDef, mode: Mode, degree: u32) -> Self {
        StabilityQuery {
            system,
            mode,
            degree,
            alpha: 0.0,
            mu1: Self::DEFAULT_MU1,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<(), StabilityError> {
        if self.degree == 0 || self.degree % 2 == 1 {
            return Err(StabilityError::OddDegree(self.degree));
        }
        self.mode.validate()?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(StabilityError::InvalidParameter(format!("alpha = {}", self.alpha)));
        }
        if !(self.mu1 > 0.0 && self.mu1.is_finite()) {
            return Err(StabilityError::InvalidParameter(format!("mu1 = {}", self.mu1)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(StabilityError::InvalidParameter(format!("eps = {}", self.eps)));
        }
        let origin = vec![0.0; self.system.vars.len()];
        for (i, f) in self.system.dynamics.iter().enumerate() {
            if f.eval_slice(&origin) != 0.0 {
                return Err(StabilityError::NonzeroEquilibrium(i));
            }
        }
        Ok(())
    }

    /// Factor relating `F` at the end of an interval to its start.
    pub fn boundary_factor(&self) -> f64 {
        (-2.0 * self.alpha * self.mode.longest()).exp()
    }

    fn record(&self) -> QueryRecord {
        QueryRecord {
            system: self.system.to_file(),
            mode: self.mode,
            degree: self.degree,
            alpha: self.alpha,
            mu1: self.mu1,
            eps: self.eps,
        }
    }
}

/// Variable layout shared by the encoder and the verifier.
#[derive(Clone, Debug)]
pub struct Layout {
    pub n: usize,
    /// `z1..zn`, the domain of `V`.
    pub state: VarSet,
    /// `t, xk1..xkn, z1..zn` and, asynchronously, `T`.
    pub full: VarSet,
    pub asynchronous: bool,
}

impl Layout {
    pub fn new(n: usize, mode: &Mode) -> Layout {
        let state = VarSet::new((0..n).map(state_var)).expect("distinct names");
        let asynchronous = matches!(mode, Mode::Asynchronous { .. });
        let mut names = vec![T_VAR.to_string()];
        names.extend((0..n).map(sample_var));
        names.extend((0..n).map(state_var));
        if asynchronous {
            names.push(PERIOD_VAR.to_string());
        }
        Layout {
            n,
            state,
            full: VarSet::new(names).expect("distinct names"),
            asynchronous,
        }
    }

    fn state_indices(&self) -> Vec<usize> {
        (1..=2 * self.n).collect()
    }

    /// Total degree in the state variables `xk, z`.
    pub fn state_degree(&self, m: &Monomial) -> u32 {
        m.degree_in(&self.state_indices())
    }

    fn var(&self, name: &str) -> Polynomial {
        Polynomial::var(&self.full, name).expect("layout variable")
    }

    fn constant(&self, c: f64) -> Polynomial {
        Polynomial::constant(&self.full, c)
    }

    /// `|z|^2` over the given variable set.
    fn z_norm2(&self, vars: &VarSet) -> Polynomial {
        let mut p = Polynomial::zero(vars);
        for i in 0..self.n {
            let z = Polynomial::var(vars, &state_var(i)).expect("state variable");
            p = &p + &(&z * &z);
        }
        p
    }

    /// Interval localizers `t (T - t)` and, asynchronously, `(T - Tmin)(Tmax - T)`.
    fn localizers(&self, mode: &Mode) -> Vec<Polynomial> {
        let t = self.var(T_VAR);
        match *mode {
            Mode::Synchronous { period } => vec![&t * &(&self.constant(period) - &t)],
            Mode::Asynchronous { t_min, t_max } => {
                let tt = self.var(PERIOD_VAR);
                vec![
                    &t * &(&tt - &t),
                    &(&tt - &self.constant(t_min)) * &(&self.constant(t_max) - &tt),
                ]
            }
        }
    }

    fn dynamics(&self, system: &SystemDef) -> Result<Vec<Polynomial>, PolyError> {
        system.dynamics.iter().map(|f| f.embed(&self.full)).collect()
    }

    /// Bindings for `F(0, x, x[, T])`.
    fn start_bindings(&self) -> Vec<(String, Binding)> {
        let mut b = vec![(T_VAR.to_string(), Binding::Poly(self.constant(0.0)))];
        for i in 0..self.n {
            b.push((state_var(i), Binding::Poly(self.var(&sample_var(i)))));
        }
        b
    }

    /// Bindings for `F` at the end of an interval: `t := T`.
    fn end_bindings(&self, mode: &Mode) -> Vec<(String, Binding)> {
        let end = match mode {
            Mode::Synchronous { period } => self.constant(*period),
            Mode::Asynchronous { .. } => self.var(PERIOD_VAR),
        };
        vec![(T_VAR.to_string(), Binding::Poly(end))]
    }
}

fn as_refs(b: &[(String, Binding)]) -> Vec<(&str, Binding)> {
    b.iter().map(|(n, v)| (n.as_str(), v.clone())).collect()
}

/// An encoded stability program together with handles to its parts.
pub struct Encoding {
    pub layout: Layout,
    pub program: SosProgram,
    pub v: DecisionPoly,
    pub f: DecisionPoly,
    /// Gram form of `V - mu1 |z|^2`.
    pub positivity: SosDecisionPoly,
    /// `s0, s1[, s2]`.
    pub multipliers: Vec<SosDecisionPoly>,
}

fn encode(query: &StabilityQuery) -> Result<Encoding, StabilityError> {
    query.validate()?;
    let n = query.system.dim();
    let layout = Layout::new(n, &query.mode);
    let full = layout.full.clone();
    let mut prog = SosProgram::new();

    // V(z) with V(0) = 0 and V - mu1 |z|^2 = Z^T G Z over z-monomials of degree >= 1
    let v_basis: Vec<Monomial> = crate::poly::monomials_upto(&layout.state, query.degree)
        .into_iter()
        .filter(|m| m.degree() >= 2)
        .collect();
    let v = prog.new_decision_poly_with_basis(&layout.state, v_basis);
    let half: Vec<Monomial> = crate::poly::monomials_upto(&layout.state, query.degree / 2)
        .into_iter()
        .filter(|m| m.degree() >= 1)
        .collect();
    let positivity = prog.new_sos_poly_with_basis(&layout.state, half);
    let lower = LinPoly::from(&layout.z_norm2(&layout.state).scale(query.mu1));
    prog.assert_poly_eq(&v.poly().try_sub(&lower)?, &positivity.poly())?;
    prog.assert_linear_eq(&positivity.trace(), 1.0)?;

    // F over all monomials of degree <= N that involve the state
    let f_basis: Vec<Monomial> = crate::poly::monomials_upto(&full, query.degree)
        .into_iter()
        .filter(|m| layout.state_degree(m) >= 1)
        .collect();
    let f = prog.new_decision_poly_with_basis(&full, f_basis);

    let dyn_full = layout.dynamics(&query.system)?;
    let v_full = v.poly().embed(&full)?;
    let f_poly = f.poly();
    let mut lhs = f_poly.diff(T_VAR)?;
    for (i, fi) in dyn_full.iter().enumerate() {
        let zi = state_var(i);
        lhs = lhs.try_add(&v_full.diff(&zi)?.mul_poly(fi)?)?;
        lhs = lhs.try_add(&f_poly.diff(&zi)?.mul_poly(fi)?)?;
    }
    if query.alpha != 0.0 {
        lhs = lhs.try_add(&v_full.scale(2.0 * query.alpha))?;
        lhs = lhs.try_add(&f_poly.scale(2.0 * query.alpha))?;
    }
    if query.eps != 0.0 {
        lhs = lhs.try_add(&LinPoly::from(&layout.z_norm2(&full).scale(query.eps)))?;
    }
    let state_filter = |m: &Monomial| layout.state_degree(m) >= 1;
    let mults = prog.psatz_combine(
        &lhs.scale(-1.0),
        &layout.localizers(&query.mode),
        &PsatzOptions {
            degrees: None,
            basis_filter: Some(&state_filter),
        },
    )?;

    // boundary: F(T, x, z[, T]) = e^{-2 alpha T} F(0, x, x[, T])
    let end = f_poly.substitute(&as_refs(&layout.end_bindings(&query.mode)))?;
    let start = f_poly.substitute(&as_refs(&layout.start_bindings()))?;
    prog.assert_poly_eq(&end, &start.scale(query.boundary_factor()))?;

    let mut multipliers = vec![mults.s0];
    multipliers.extend(mults.localized);
    Ok(Encoding {
        layout,
        program: prog,
        v,
        f,
        positivity,
        multipliers,
    })
}

/// Builds the SOS program for a synchronous query.
pub fn encode_synchronous(query: &StabilityQuery) -> Result<Encoding, StabilityError> {
    if !matches!(query.mode, Mode::Synchronous { .. }) {
        return Err(StabilityError::InvalidPeriod("expected synchronous mode".into()));
    }
    encode(query)
}

/// Builds the SOS program for an asynchronous query.
pub fn encode_asynchronous(query: &StabilityQuery) -> Result<Encoding, StabilityError> {
    if !matches!(query.mode, Mode::Asynchronous { .. }) {
        return Err(StabilityError::InvalidPeriod("expected asynchronous mode".into()));
    }
    encode(query)
}

/// Builds the program for either mode.
pub fn encode_query(query: &StabilityQuery) -> Result<Encoding, StabilityError> {
    encode(query)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub exponents: Vec<u32>,
    pub coeff: f64,
}

/// Polynomial as a monomial list in ascending graded-lex order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyRecord {
    pub vars: Vec<String>,
    pub terms: Vec<TermRecord>,
}

impl PolyRecord {
    pub fn from_poly(p: &Polynomial) -> Self {
        PolyRecord {
            vars: p.vars().names().to_vec(),
            terms: p
                .terms()
                .map(|(m, c)| TermRecord {
                    exponents: m.exponents().to_vec(),
                    coeff: c,
                })
                .collect(),
        }
    }

    pub fn to_poly(&self) -> Result<Polynomial, StabilityError> {
        let vars = VarSet::new(self.vars.iter().cloned())?;
        for t in &self.terms {
            if t.exponents.len() != vars.len() {
                return Err(StabilityError::Certificate(format!(
                    "term has {} exponents for {} variables",
                    t.exponents.len(),
                    vars.len()
                )));
            }
        }
        Ok(Polynomial::from_terms(
            &vars,
            self.terms.iter().map(|t| (Monomial::new(t.exponents.clone()), t.coeff)),
        ))
    }
}

/// SOS polynomial `Z^T G Z` with `G` stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramRecord {
    pub name: String,
    pub vars: Vec<String>,
    pub basis: Vec<Vec<u32>>,
    pub gram: Vec<Vec<f64>>,
}

impl GramRecord {
    fn new(name: &str, s: &SosDecisionPoly, values: &SosValues) -> Self {
        let g = values.gram(s);
        GramRecord {
            name: name.to_string(),
            vars: s.vars().names().to_vec(),
            basis: s.basis().iter().map(|m| m.exponents().to_vec()).collect(),
            gram: (0..g.nrows())
                .map(|i| (0..g.ncols()).map(|j| g[(i, j)]).collect())
                .collect(),
        }
    }

    pub fn matrix(&self) -> Result<Mat<f64>, StabilityError> {
        let n = self.basis.len();
        if self.gram.len() != n || self.gram.iter().any(|r| r.len() != n) {
            return Err(StabilityError::Certificate(format!(
                "Gram `{}` is not {n}x{n}",
                self.name
            )));
        }
        Ok(Mat::from_fn(n, n, |i, j| self.gram[i][j]))
    }

    /// `sum_ij G[i][j] Z_i Z_j`, using every stored entry.
    pub fn polynomial(&self) -> Result<Polynomial, StabilityError> {
        let vars = VarSet::new(self.vars.iter().cloned())?;
        if self.basis.iter().any(|b| b.len() != vars.len()) {
            return Err(StabilityError::Certificate(format!(
                "basis of `{}` does not match its variables",
                self.name
            )));
        }
        let g = self.matrix()?;
        let z: Vec<Monomial> = self.basis.iter().map(|b| Monomial::new(b.clone())).collect();
        let mut p = Polynomial::zero(&vars);
        for i in 0..z.len() {
            for j in 0..z.len() {
                p.add_term(z[i].mul(&z[j]), g[(i, j)]);
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub system: SystemFile,
    pub mode: Mode,
    pub degree: u32,
    pub alpha: f64,
    pub mu1: f64,
    pub eps: f64,
}

impl QueryRecord {
    pub fn to_query(&self) -> Result<StabilityQuery, StabilityError> {
        Ok(StabilityQuery {
            system: self.system.clone().into_system()?,
            mode: self.mode,
            degree: self.degree,
            alpha: self.alpha,
            mu1: self.mu1,
            eps: self.eps,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverRecord {
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub margin: Option<f64>,
    pub rows: usize,
    pub unknowns: usize,
}

/// A location where verification failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// `decrease`, `boundary`, `positivity`, `gram:<name>` or `structure`.
    pub check: String,
    pub monomial: Option<String>,
    pub value: f64,
    pub limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub passed: bool,
    /// Largest coefficient of the decrease identity's residual, and the scale it is measured against.
    pub identity_residual: f64,
    pub identity_scale: f64,
    pub boundary_residual: f64,
    pub boundary_scale: f64,
    pub positivity_residual: f64,
    pub positivity_scale: f64,
    pub min_gram_eigenvalue: f64,
    pub violations: Vec<Violation>,
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verification: {}", if self.passed { "PASS" } else { "FAIL" })?;
        writeln!(
            f,
            "  decrease identity residual {:.3e} (scale {:.3e})",
            self.identity_residual, self.identity_scale
        )?;
        writeln!(
            f,
            "  boundary identity residual {:.3e} (scale {:.3e})",
            self.boundary_residual, self.boundary_scale
        )?;
        writeln!(
            f,
            "  positivity identity residual {:.3e} (scale {:.3e})",
            self.positivity_residual, self.positivity_scale
        )?;
        write!(f, "  min Gram eigenvalue {:.3e}", self.min_gram_eigenvalue)?;
        for v in &self.violations {
            write!(f, "\n  violated: {}", v.check)?;
            if let Some(m) = &v.monomial {
                write!(f, " at {m}")?;
            }
            write!(f, " ({:.3e} > {:.3e})", v.value, v.limit)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub query: QueryRecord,
    pub v: PolyRecord,
    pub f: PolyRecord,
    /// Gram form of `V - mu1 |z|^2`.
    pub positivity: GramRecord,
    /// `s0, s1` and, asynchronously, `s2`.
    pub multipliers: Vec<GramRecord>,
    pub solver: SolverRecord,
    pub report: Option<VerificationReport>,
}

impl Certificate {
    pub fn v_poly(&self) -> Result<Polynomial, StabilityError> {
        self.v.to_poly()
    }

    pub fn f_poly(&self) -> Result<Polynomial, StabilityError> {
        self.f.to_poly()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Result of [`certify`].
#[derive(Clone, Debug)]
pub enum CertifyOutcome {
    Certified(Box<Certificate>),
    /// The program has no solution: the solver produced a dual ray or a
    /// coefficient could not be matched at all.
    Infeasible { reason: String },
    /// Neither a verified certificate nor a proof of infeasibility.
    Inconclusive { reason: String },
}

impl CertifyOutcome {
    pub fn certificate(&self) -> Option<&Certificate> {
        match self {
            CertifyOutcome::Certified(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_certified(&self) -> bool {
        matches!(self, CertifyOutcome::Certified(_))
    }
}

/// Encodes, solves, extracts and verifies. A certificate is returned only
/// when it passes [`verify_certificate`].
pub fn certify(query: &StabilityQuery, solver: &SolverOptions) -> Result<CertifyOutcome, StabilityError> {
    let enc = match encode(query) {
        Ok(e) => e,
        Err(StabilityError::Sos(SosError::InfeasibleRow { monomial, residual })) => {
            return Ok(CertifyOutcome::Infeasible {
                reason: format!("coefficient of {monomial} cannot be matched (residual {residual:e})"),
            })
        }
        Err(e) => return Err(e),
    };
    let problem = enc.program.compile()?;
    let sol = conic::solve(&problem, solver)?;
    let record = SolverRecord {
        status: sol.status,
        iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        dual_residual: sol.dual_residual,
        margin: sol.margin,
        rows: problem.nrows(),
        unknowns: enc.program.num_unknowns(),
    };
    match sol.status {
        SolveStatus::Feasible | SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            return Ok(CertifyOutcome::Infeasible {
                reason: format!("solver found a dual infeasibility ray after {} iterations", sol.iterations),
            })
        }
        s => {
            return Ok(CertifyOutcome::Inconclusive {
                reason: format!("solver stopped with status {s:?} after {} iterations", sol.iterations),
            })
        }
    }
    let values = enc.program.extract(&sol);
    let names = ["s0", "s1", "s2"];
    let mut cert = Certificate {
        query: query.record(),
        v: PolyRecord::from_poly(&values.poly(&enc.v.poly())),
        f: PolyRecord::from_poly(&values.poly(&enc.f.poly())),
        positivity: GramRecord::new("positivity", &enc.positivity, &values),
        multipliers: enc
            .multipliers
            .iter()
            .zip(names)
            .map(|(s, name)| GramRecord::new(name, s, &values))
            .collect(),
        solver: record,
        report: None,
    };
    let report = verify_certificate(&cert);
    let passed = report.passed;
    let summary = report.to_string();
    cert.report = Some(report);
    if passed {
        Ok(CertifyOutcome::Certified(Box::new(cert)))
    } else {
        Ok(CertifyOutcome::Inconclusive {
            reason: format!("solver point failed verification\n{summary}"),
        })
    }
}

struct Residual {
    max: f64,
    scale: f64,
    worst: Option<String>,
}

/// Max coefficient of `sum(parts)`, and the largest coefficient among the parts.
fn residual(parts: &[Polynomial]) -> Result<Residual, StabilityError> {
    let vars = parts[0].vars().clone();
    let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
    let mut scale = 0.0f64;
    for p in parts {
        if p.vars() != &vars {
            return Err(StabilityError::Certificate("variable sets differ".into()));
        }
        scale = scale.max(p.max_abs_coeff());
        for (m, c) in p.terms() {
            *acc.entry(m.clone()).or_insert(0.0) += c;
        }
    }
    let mut max = 0.0;
    let mut worst = None;
    for (m, c) in &acc {
        if c.abs() > max {
            max = c.abs();
            worst = Some(m.render(&vars));
        }
    }
    Ok(Residual { max, scale, worst })
}

/// Re-derives every identity from the certificate's numbers with plain
/// polynomial arithmetic and checks each Gram matrix.
pub fn verify_certificate(cert: &Certificate) -> VerificationReport {
    match verify_inner(cert) {
        Ok(r) => r,
        Err(e) => VerificationReport {
            passed: false,
            identity_residual: f64::NAN,
            identity_scale: f64::NAN,
            boundary_residual: f64::NAN,
            boundary_scale: f64::NAN,
            positivity_residual: f64::NAN,
            positivity_scale: f64::NAN,
            min_gram_eigenvalue: f64::NAN,
            violations: vec![Violation {
                check: format!("structure: {e}"),
                monomial: None,
                value: f64::NAN,
                limit: 0.0,
            }],
        },
    }
}

fn verify_inner(cert: &Certificate) -> Result<VerificationReport, StabilityError> {
    let query = cert.query.to_query()?;
    query.validate()?;
    let layout = Layout::new(query.system.dim(), &query.mode);
    let v = cert.v_poly()?;
    let f = cert.f_poly()?;
    if v.vars() != &layout.state {
        return Err(StabilityError::Certificate(format!(
            "V must be over {:?}",
            layout.state.names()
        )));
    }
    if f.vars() != &layout.full {
        return Err(StabilityError::Certificate(format!(
            "F must be over {:?}",
            layout.full.names()
        )));
    }
    let expected = if layout.asynchronous { 3 } else { 2 };
    if cert.multipliers.len() != expected {
        return Err(StabilityError::Certificate(format!(
            "expected {expected} multipliers, found {}",
            cert.multipliers.len()
        )));
    }
    if v.degree().unwrap_or(0) > query.degree {
        return Err(StabilityError::Certificate("deg V exceeds N".into()));
    }
    let mut violations = Vec::new();
    let check = |name: &str, r: &Residual, violations: &mut Vec<Violation>| {
        let limit = IDENTITY_TOL * r.scale.max(f64::MIN_POSITIVE);
        if !(r.max <= limit) {
            violations.push(Violation {
                check: name.to_string(),
                monomial: r.worst.clone(),
                value: r.max,
                limit,
            });
        }
    };

    // V - mu1 |z|^2 - Z^T G Z = 0
    let pos = cert.positivity.polynomial()?;
    let pos_res = residual(&[
        v.clone(),
        layout.z_norm2(&layout.state).scale(-query.mu1),
        pos.scale(-1.0),
    ])?;
    check("positivity", &pos_res, &mut violations);

    // decrease identity plus multipliers must vanish
    let full = &layout.full;
    let dynamics = layout.dynamics(&query.system)?;
    let v_full = v.embed(full)?;
    let mut parts = vec![f.diff(T_VAR)?];
    for (i, fi) in dynamics.iter().enumerate() {
        let zi = state_var(i);
        parts.push(&v_full.diff(&zi)? * fi);
        parts.push(&f.diff(&zi)? * fi);
    }
    if query.alpha != 0.0 {
        parts.push(v_full.scale(2.0 * query.alpha));
        parts.push(f.scale(2.0 * query.alpha));
    }
    parts.push(layout.z_norm2(full).scale(query.eps));
    let localizers = layout.localizers(&query.mode);
    for (k, g) in cert.multipliers.iter().enumerate() {
        let s = g.polynomial()?;
        if s.vars() != full {
            return Err(StabilityError::Certificate(format!("{} has wrong variables", g.name)));
        }
        parts.push(if k == 0 { s } else { &s * &localizers[k - 1] });
    }
    let id_res = residual(&parts)?;
    check("decrease", &id_res, &mut violations);

    // boundary identity
    let end = f.substitute(&as_refs(&layout.end_bindings(&query.mode)))?;
    let start = f.substitute(&as_refs(&layout.start_bindings()))?;
    let bd_res = residual(&[end, start.scale(-query.boundary_factor())])?;
    check("boundary", &bd_res, &mut violations);

    let mut min_eig = f64::INFINITY;
    for g in std::iter::once(&cert.positivity).chain(&cert.multipliers) {
        let m = g.matrix()?;
        match check_psd(m.as_ref(), GRAM_TOL) {
            Ok((ok, e)) => {
                min_eig = min_eig.min(e);
                if !ok {
                    violations.push(Violation {
                        check: format!("gram:{}", g.name),
                        monomial: None,
                        value: -e,
                        limit: GRAM_TOL,
                    });
                }
            }
            Err(e) => violations.push(Violation {
                check: format!("gram:{}: {e}", g.name),
                monomial: None,
                value: f64::NAN,
                limit: GRAM_TOL,
            }),
        }
    }

    Ok(VerificationReport {
        passed: violations.is_empty(),
        identity_residual: id_res.max,
        identity_scale: id_res.scale,
        boundary_residual: bd_res.max,
        boundary_scale: bd_res.scale,
        positivity_residual: pos_res.max,
        positivity_scale: pos_res.scale,
        min_gram_eigenvalue: min_eig,
        violations,
    })
}

/// One probe of a bisection.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub period: f64,
    pub certified: bool,
    pub note: String,
}

#[derive(Clone, Debug)]
pub struct MaxPeriod {
    /// Largest period certified, `None` when no period was.
    pub period: Option<f64>,
    pub certificate: Option<Certificate>,
    /// Probes in the order they were run.
    pub probes: Vec<Probe>,
}

/// Parameters of [`max_sampling_period`] besides the system.
#[derive(Clone, Copy, Debug)]
pub struct SearchOptions {
    pub degree: u32,
    /// `None` searches synchronous periods; `Some(t_min)` searches `Tmax` with `Tmin` fixed.
    pub asynchronous_t_min: Option<f64>,
    pub lo: f64,
    pub hi: f64,
    pub resolution: f64,
    pub alpha: f64,
    pub mu1: f64,
    pub eps: f64,
}

impl SearchOptions {
    pub fn new(degree: u32) -> Self {
        SearchOptions {
            degree,
            asynchronous_t_min: None,
            lo: 0.0,
            hi: 5.0,
            resolution: 1e-3,
            alpha: 0.0,
            mu1: StabilityQuery::DEFAULT_MU1,
            eps: StabilityQuery::DEFAULT_EPS,
        }
    }

    fn query(&self, system: &SystemDef, period: f64) -> StabilityQuery {
        let mode = match self.asynchronous_t_min {
            None => Mode::Synchronous { period },
            Some(t_min) => Mode::Asynchronous { t_min, t_max: period },
        };
        StabilityQuery {
            system: system.clone(),
            mode,
            degree: self.degree,
            alpha: self.alpha,
            mu1: self.mu1,
            eps: self.eps,
        }
    }
}

/// Bisection for the largest certifiable period (synchronous `T`, or `Tmax`
/// with `Tmin` fixed). The lower end is taken as certifiable when it equals
/// zero (or `Tmin`), where no program exists; otherwise it is probed.
/// Inconclusive probes count as not certifiable.
pub fn max_sampling_period(
    system: &SystemDef,
    opts: &SearchOptions,
    solver: &SolverOptions,
) -> Result<MaxPeriod, StabilityError> {
    let floor = opts.asynchronous_t_min.unwrap_or(0.0);
    if !(opts.resolution > 0.0) || !(opts.hi > opts.lo) || opts.lo < floor {
        return Err(StabilityError::InvalidParameter(format!(
            "bracket [{}, {}] with resolution {}",
            opts.lo, opts.hi, opts.resolution
        )));
    }
    let mut probes = Vec::new();
    let probe = |period: f64, probes: &mut Vec<Probe>| -> Result<Option<Certificate>, StabilityError> {
        let out = certify(&opts.query(system, period), solver)?;
        let (certified, note) = match &out {
            CertifyOutcome::Certified(_) => (true, "certified".to_string()),
            CertifyOutcome::Infeasible { reason } => (false, format!("infeasible: {reason}")),
            CertifyOutcome::Inconclusive { reason } => (false, format!("inconclusive: {reason}")),
        };
        probes.push(Probe {
            period,
            certified,
            note,
        });
        Ok(match out {
            CertifyOutcome::Certified(c) => Some(*c),
            _ => None,
        })
    };

    let mut best: Option<Certificate> = None;
    let mut lo = opts.lo;
    if lo > floor {
        match probe(lo, &mut probes)? {
            Some(c) => best = Some(c),
            None => {
                return Ok(MaxPeriod {
                    period: None,
                    certificate: None,
                    probes,
                })
            }
        }
    }
    let mut hi = opts.hi;
    if let Some(c) = probe(hi, &mut probes)? {
        return Ok(MaxPeriod {
            period: Some(hi),
            certificate: Some(c),
            probes,
        });
    }
    while hi - lo > opts.resolution {
        let mid = 0.5 * (lo + hi);
        match probe(mid, &mut probes)? {
            Some(c) => {
                lo = mid;
                best = Some(c);
            }
            None => hi = mid,
        }
    }
    Ok(MaxPeriod {
        period: best.as_ref().map(|_| lo),
        certificate: best,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example1() -> SystemDef {
        SystemDef::from_strings("ex1", &["-z1^3 + 2*z1^2 - 1.1*xk1"]).unwrap()
    }

    fn query(period: f64, degree: u32) -> StabilityQuery {
        StabilityQuery::new(example1(), Mode::Synchronous { period }, degree)
    }

    #[test]
    fn layout_names() {
        let l = Layout::new(2, &Mode::Asynchronous { t_min: 0.0, t_max: 1.0 });
        assert_eq!(l.full.names(), ["t", "xk1", "xk2", "z1", "z2", "T"]);
        assert_eq!(l.state.names(), ["z1", "z2"]);
        let m = Monomial::new(vec![3, 0, 1, 0, 1, 2]);
        assert_eq!(l.state_degree(&m), 2);
    }

    #[test]
    fn query_validation() {
        assert!(matches!(query(0.5, 3).validate(), Err(StabilityError::OddDegree(3))));
        assert!(matches!(query(0.0, 4).validate(), Err(StabilityError::InvalidPeriod(_))));
        let mut q = query(0.5, 4);
        q.mode = Mode::Asynchronous { t_min: 0.7, t_max: 0.7 };
        assert!(matches!(q.validate(), Err(StabilityError::InvalidPeriod(_))));
        let sys = SystemDef::from_strings("c", &["1 - z1"]).unwrap();
        let q = StabilityQuery::new(sys, Mode::Synchronous { period: 1.0 }, 2);
        assert!(matches!(q.validate(), Err(StabilityError::NonzeroEquilibrium(0))));
    }

    #[test]
    fn multiplier_sizes_follow_degree_rule() {
        // identity degree N + 2 = 6 for N = 4; bases exclude pure-t monomials
        let enc = encode(&query(0.5, 4)).unwrap();
        let s0 = &enc.multipliers[0];
        let s1 = &enc.multipliers[1];
        assert_eq!(s0.size(), 20 - 4);
        assert_eq!(s1.size(), 10 - 3);
        assert_eq!(enc.positivity.size(), 2);
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        assert!(encode_asynchronous(&query(0.5, 4)).is_err());
        let mut q = query(0.5, 4);
        q.mode = Mode::Asynchronous { t_min: 0.0, t_max: 0.7 };
        assert!(encode_synchronous(&q).is_err());
        assert_eq!(encode_asynchronous(&q).unwrap().multipliers.len(), 3);
    }

    #[test]
    fn example1_short_period_certifies() {
        let out = certify(&query(0.1, 4), &SolverOptions::default()).unwrap();
        let cert = out.certificate().expect("certificate at T = 0.1");
        assert!(cert.report.as_ref().unwrap().passed);
    }

    #[test]
    fn example1_degree_two_fails() {
        let out = certify(&query(0.5, 2), &SolverOptions::default()).unwrap();
        assert!(!out.is_certified());
    }

    #[test]
    fn perturbed_gram_is_rejected() {
        let out = certify(&query(0.5, 4), &SolverOptions::default()).unwrap();
        let mut cert = out.certificate().unwrap().clone();
        cert.multipliers[0].gram[0][1] += 0.1;
        let r = verify_certificate(&cert);
        assert!(!r.passed);
        assert!(r.violations.iter().any(|v| v.check == "decrease" && v.monomial.is_some()));
    }

    #[test]
    fn negative_gram_is_rejected() {
        let out = certify(&query(0.5, 4), &SolverOptions::default()).unwrap();
        let mut cert = out.certificate().unwrap().clone();
        let n = cert.multipliers[1].basis.len();
        for i in 0..n {
            for j in 0..n {
                cert.multipliers[1].gram[i][j] = if i == j { -1.0 } else { 0.0 };
            }
        }
        let r = verify_certificate(&cert);
        assert!(r.violations.iter().any(|v| v.check == "gram:s1"));
    }

    #[test]
    fn certificate_json_round_trip() {
        let out = certify(&query(0.3, 4), &SolverOptions::default()).unwrap();
        let cert = out.certificate().unwrap();
        let back = Certificate::from_json(&cert.to_json()).unwrap();
        assert_eq!(&back, cert);
        assert!(verify_certificate(&back).passed);
    }
}
