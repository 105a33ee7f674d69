//! Trajectories of sampled-data systems and linear flow-map oracles.
//!
//! Integration is classical RK4 with the sample held constant over each
//! interval. The last substep of every interval is shortened so the grid
//! lands on `t_{k+1} = t_k + T_k` exactly.

use std::io::{self, Write};

use faer::linalg::solvers::Solve;
use faer::{Mat, MatRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::SystemDef;
use crate::poly::Polynomial;
use crate::stability::{Certificate, Layout, StabilityError};

/// Divergence guard on `|x|`.
pub const OVERFLOW_NORM: f64 = 1e9;
/// Substeps per interval when no step is given.
pub const DEFAULT_SUBSTEPS: usize = 200;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid step {step}: must be positive and at most {limit} (a tenth of the shortest period)")]
    InvalidStep { step: f64, limit: f64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("initial state has {got} entries, system has dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("certificate does not match the system: {0}")]
    Certificate(String),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error("no period in (0, {hi}] gives spectral radius below one")]
    NoStablePeriod { hi: f64 },
    #[error("spectral radius stays below one on the whole bracket (0, {hi}]")]
    BracketExhausted { hi: f64 },
    #[error("eigenvalue computation failed")]
    Eigen,
}

/// How interval lengths `T_k` are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingSchedule {
    Fixed { period: f64 },
    /// Used in order; must be at least as long as the number of periods simulated.
    Sequence { periods: Vec<f64> },
    /// Independent draws from `[t_min, t_max]`, zero-length draws rejected.
    RandomUniform { t_min: f64, t_max: f64, seed: u64 },
}

impl SamplingSchedule {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidSchedule(msg));
        match self {
            SamplingSchedule::Fixed { period } if !(*period > 0.0 && period.is_finite()) => {
                bad(format!("period {period} must be positive"))
            }
            SamplingSchedule::Sequence { periods } => match periods.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
                Some(p) => bad(format!("period {p} must be positive")),
                None if periods.is_empty() => bad("empty sequence".into()),
                None => Ok(()),
            },
            SamplingSchedule::RandomUniform { t_min, t_max, .. }
                if !(*t_min >= 0.0 && t_max > t_min && t_max.is_finite()) =>
            {
                bad(format!("bounds [{t_min}, {t_max}] need 0 <= t_min < t_max"))
            }
            _ => Ok(()),
        }
    }

    /// The first `count` interval lengths.
    pub fn periods(&self, count: usize) -> Result<Vec<f64>, SimError> {
        self.validate()?;
        match self {
            SamplingSchedule::Fixed { period } => Ok(vec![*period; count]),
            SamplingSchedule::Sequence { periods } => {
                if periods.len() < count {
                    return Err(SimError::InvalidSchedule(format!(
                        "{} periods requested, sequence has {}",
                        count,
                        periods.len()
                    )));
                }
                Ok(periods[..count].to_vec())
            }
            SamplingSchedule::RandomUniform { t_min, t_max, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok((0..count)
                    .map(|_| loop {
                        let p = rng.gen_range(*t_min..=*t_max);
                        if p > 0.0 {
                            break p;
                        }
                    })
                    .collect())
            }
        }
    }
}

/// A simulated trajectory.
///
/// Rows are grouped by interval. Each interval starts with a row at `t_k`
/// (offset 0) and ends with a row at `t_{k+1}`, so sampling instants inside
/// the horizon appear twice: as the end of one interval and the start of the
/// next, with the same state.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    pub n: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Interval index of each row.
    pub interval: Vec<usize>,
    /// `t_0, t_1, ...`, one more than the number of completed intervals.
    pub sample_instants: Vec<f64>,
    /// `x(t_k)` for every started interval.
    pub held_samples: Vec<Vec<f64>>,
    pub schedule: Vec<f64>,
    /// Time at which `|x|` exceeded [`OVERFLOW_NORM`], if it did.
    pub overflow: Option<f64>,
}

impl SimTrace {
    /// Row range of interval `k`.
    pub fn rows_of(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.interval.partition_point(|&i| i < k);
        let end = self.interval.partition_point(|&i| i <= k);
        start..end
    }

    pub fn intervals(&self) -> usize {
        self.held_samples.len()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trace has at least the initial row")
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn rk4_step(system: &SystemDef, x: &[f64], xk: &[f64], h: f64, k: &mut [Vec<f64>; 4], tmp: &mut [f64]) -> Vec<f64> {
    let n = x.len();
    system.eval_into(x, xk, &mut k[0]);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k[0][i];
    }
    system.eval_into(tmp, xk, &mut k[1]);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k[1][i];
    }
    system.eval_into(tmp, xk, &mut k[2]);
    for i in 0..n {
        tmp[i] = x[i] + h * k[2][i];
    }
    system.eval_into(tmp, xk, &mut k[3]);
    (0..n)
        .map(|i| x[i] + h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]))
        .collect()
}

/// Integrates `periods` intervals from `x0`. With `step = None` every
/// interval is split into [`DEFAULT_SUBSTEPS`] equal steps.
pub fn simulate(
    system: &SystemDef,
    x0: &[f64],
    schedule: &SamplingSchedule,
    periods: usize,
    step: Option<f64>,
) -> Result<SimTrace, SimError> {
    let n = system.dim();
    if x0.len() != n {
        return Err(SimError::Dimension {
            expected: n,
            got: x0.len(),
        });
    }
    let lengths = schedule.periods(periods)?;
    if let Some(h) = step {
        let limit = lengths.iter().copied().fold(f64::INFINITY, f64::min) / 10.0;
        if !(h > 0.0 && h <= limit) {
            return Err(SimError::InvalidStep { step: h, limit });
        }
    }

    let mut trace = SimTrace {
        n,
        times: vec![],
        states: vec![],
        interval: vec![],
        sample_instants: vec![0.0],
        held_samples: vec![],
        schedule: lengths.clone(),
        overflow: None,
    };
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut tmp = vec![0.0; n];
    let mut x = x0.to_vec();
    let mut tk = 0.0;
    for (idx, &len) in lengths.iter().enumerate() {
        let h = step.unwrap_or(len / DEFAULT_SUBSTEPS as f64);
        let xk = x.clone();
        trace.held_samples.push(xk.clone());
        trace.times.push(tk);
        trace.states.push(x.clone());
        trace.interval.push(idx);
        let next = tk + len;
        let mut s = 0.0;
        loop {
            let remaining = len - s;
            // merge a sliver left by rounding into the final substep
            let last = remaining <= h * (1.0 + 1e-9);
            let dt = if last { remaining } else { h };
            x = rk4_step(system, &x, &xk, dt, &mut k, &mut tmp);
            s = if last { len } else { s + dt };
            let t = if last { next } else { tk + s };
            trace.times.push(t);
            trace.states.push(x.clone());
            trace.interval.push(idx);
            let r = norm(&x);
            if !(r <= OVERFLOW_NORM) {
                trace.overflow = Some(t);
                return Ok(trace);
            }
            if last {
                break;
            }
        }
        tk = next;
        trace.sample_instants.push(tk);
    }
    Ok(trace)
}

/// `V`, `Q` and their sum at one trace row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Functional {
    pub time: f64,
    pub interval: usize,
    pub v: f64,
    pub q: f64,
}

impl Functional {
    pub fn total(&self) -> f64 {
        self.v + self.q
    }
}

/// Evaluates `V(x(t))` and `Q_k(t - t_k) = F(t - t_k, x(t_k), x(t)[, T_k])` on every row.
pub fn trace_functionals(trace: &SimTrace, cert: &Certificate) -> Result<Vec<Functional>, SimError> {
    let v = cert.v_poly()?;
    let f = cert.f_poly()?;
    let query = cert.query.to_query()?;
    let layout = Layout::new(query.system.dim(), &query.mode);
    if layout.n != trace.n {
        return Err(SimError::Certificate(format!(
            "certificate is for dimension {}, trace has {}",
            layout.n, trace.n
        )));
    }
    if v.vars() != &layout.state || f.vars() != &layout.full {
        return Err(SimError::Certificate("unexpected variable sets".into()));
    }
    Ok(evaluate(trace, &v, &f, layout.asynchronous))
}

fn evaluate(trace: &SimTrace, v: &Polynomial, f: &Polynomial, with_period: bool) -> Vec<Functional> {
    let n = trace.n;
    let mut pt = vec![0.0; 1 + 2 * n + usize::from(with_period)];
    (0..trace.times.len())
        .map(|r| {
            let k = trace.interval[r];
            let z = &trace.states[r];
            pt[0] = trace.times[r] - trace.sample_instants[k];
            if r + 1 == trace.times.len() || trace.interval[r + 1] != k {
                // exact offset at the end of an interval
                pt[0] = trace.schedule[k];
            }
            pt[1..=n].copy_from_slice(&trace.held_samples[k]);
            pt[1 + n..1 + 2 * n].copy_from_slice(z);
            if with_period {
                pt[1 + 2 * n] = trace.schedule[k];
            }
            Functional {
                time: trace.times[r],
                interval: k,
                v: v.eval_slice(z),
                q: f.eval_slice(&pt),
            }
        })
        .collect()
}

/// Writes `t,x1..xn,k[,V,Q,VplusQ]`, one line per row.
pub fn write_trace_csv<W: Write>(out: &mut W, trace: &SimTrace, functionals: Option<&[Functional]>) -> io::Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=trace.n).map(|i| format!("x{i}")));
    header.push("k".into());
    if functionals.is_some() {
        header.extend(["V", "Q", "VplusQ"].map(String::from));
    }
    writeln!(out, "{}", header.join(","))?;
    for r in 0..trace.times.len() {
        write!(out, "{}", trace.times[r])?;
        for x in &trace.states[r] {
            write!(out, ",{x}")?;
        }
        write!(out, ",{}", trace.interval[r])?;
        if let Some(fs) = functionals {
            let f = &fs[r];
            write!(out, ",{},{},{}", f.v, f.q, f.total())?;
        }
        writeln!(out)?;
    }
    Ok(())
}

// Pade-13 coefficients for the scaling-and-squaring exponential.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: MatRef<'_, f64>) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a degree-13 Pade approximant.
pub fn expm(a: MatRef<'_, f64>) -> Mat<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    let nrm = one_norm(a);
    let s = if nrm > THETA13 { (nrm / THETA13).log2().ceil() as i32 } else { 0 };
    let a = a * faer::Scale(0.5f64.powi(s));
    let id = Mat::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]) + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = &a * &u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.partial_piv_lu().solve(&p);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// `Gamma(s) = e^{A0 s} + int_0^s e^{A0 (s - theta)} A1 dtheta`, read off the
/// exponential of the augmented matrix `[[A0, A1], [0, 0]] s`.
pub fn linear_flow_map(a0: MatRef<'_, f64>, a1: MatRef<'_, f64>, s: f64) -> Mat<f64> {
    let n = a0.nrows();
    let m = Mat::from_fn(2 * n, 2 * n, |i, j| match (i < n, j < n) {
        (true, true) => a0[(i, j)] * s,
        (true, false) => a1[(i, j - n)] * s,
        _ => 0.0,
    });
    let e = expm(m.as_ref());
    Mat::from_fn(n, n, |i, j| e[(i, j)] + e[(i, j + n)])
}

pub fn spectral_radius(m: MatRef<'_, f64>) -> Result<f64, SimError> {
    let ev = m.eigenvalues().map_err(|_| SimError::Eigen)?;
    Ok(ev.iter().map(|c| c.norm()).fold(0.0, f64::max))
}

/// Largest `T` with `rho(Gamma(T)) < 1`, to within `resolution`.
///
/// Scans `(0, hi]` on a grid of spacing `resolution` for the end of the first
/// stable run, then bisects the last grid cell.
pub fn linear_max_t(a0: MatRef<'_, f64>, a1: MatRef<'_, f64>, resolution: f64, hi: f64) -> Result<f64, SimError> {
    assert!(resolution > 0.0 && hi > resolution, "bracket too small");
    let stable = |t: f64| -> Result<bool, SimError> { Ok(spectral_radius(linear_flow_map(a0, a1, t).as_ref())? < 1.0) };
    let cells = (hi / resolution).ceil() as usize;
    let mut last_stable = None;
    for i in 1..=cells {
        let t = (i as f64 * resolution).min(hi);
        if stable(t)? {
            last_stable = Some(t);
        } else if let Some(lo) = last_stable {
            let (mut lo, mut up) = (lo, t);
            while up - lo > resolution * 1e-3 {
                let mid = 0.5 * (lo + up);
                if stable(mid)? {
                    lo = mid;
                } else {
                    up = mid;
                }
            }
            return Ok(lo);
        }
    }
    match last_stable {
        Some(_) => Err(SimError::BracketExhausted { hi }),
        None => Err(SimError::NoStablePeriod { hi }),
    }
}

/// `(A0, A1)` with `f(z, xk) = A0 z + A1 xk`, or `None` if the system is not linear.
pub fn linear_parts(system: &SystemDef) -> Option<(Mat<f64>, Mat<f64>)> {
    let n = system.dim();
    let mut a0 = Mat::zeros(n, n);
    let mut a1 = Mat::zeros(n, n);
    for (i, f) in system.dynamics.iter().enumerate() {
        for (m, c) in f.terms() {
            if m.degree() != 1 {
                return None;
            }
            let j = m.exponents().iter().position(|&e| e == 1)?;
            if j < n {
                a0[(i, j)] = c;
            } else {
                a1[(i, j - n)] = c;
            }
        }
    }
    Some((a0, a1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Mat<f64> {
        Mat::from_fn(1, 1, |_, _| v)
    }

    #[test]
    fn held_feedback_is_exact() {
        let sys = SystemDef::from_strings("hold", &["-xk1"]).unwrap();
        let tr = simulate(&sys, &[1.0], &SamplingSchedule::Fixed { period: 1.0 }, 1, None).unwrap();
        assert!(tr.final_state()[0].abs() < 1e-12);
        assert_eq!(tr.sample_instants, vec![0.0, 1.0]);
        assert_eq!(tr.times.len(), DEFAULT_SUBSTEPS + 1);
    }

    #[test]
    fn step_is_validated() {
        let sys = SystemDef::from_strings("hold", &["-xk1"]).unwrap();
        let sched = SamplingSchedule::Fixed { period: 1.0 };
        assert!(matches!(simulate(&sys, &[1.0], &sched, 2, Some(0.2)), Err(SimError::InvalidStep { .. })));
        assert!(matches!(simulate(&sys, &[1.0], &sched, 2, Some(0.0)), Err(SimError::InvalidStep { .. })));
        assert!(matches!(simulate(&sys, &[1.0, 2.0], &sched, 2, None), Err(SimError::Dimension { .. })));
    }

    #[test]
    fn shortened_last_substep_lands_on_grid() {
        let sys = SystemDef::from_strings("hold", &["-xk1"]).unwrap();
        let tr = simulate(&sys, &[1.0], &SamplingSchedule::Fixed { period: 0.7 }, 3, Some(0.03)).unwrap();
        assert_eq!(tr.sample_instants.len(), 4);
        for k in 0..3 {
            let rows = tr.rows_of(k);
            assert_eq!(tr.times[rows.start], tr.sample_instants[k]);
            assert_eq!(tr.times[rows.end - 1], tr.sample_instants[k + 1]);
        }
    }

    #[test]
    fn schedules() {
        let r = SamplingSchedule::RandomUniform {
            t_min: 0.1,
            t_max: 0.5,
            seed: 7,
        };
        let a = r.periods(50).unwrap();
        assert_eq!(a, r.periods(50).unwrap());
        assert!(a.iter().all(|p| (0.1..=0.5).contains(p)));
        let seq = SamplingSchedule::Sequence { periods: vec![0.1, 0.2] };
        assert!(seq.periods(3).is_err());
        assert!(SamplingSchedule::Fixed { period: -1.0 }.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        // |1 - T| = 3 per period
        let sys = SystemDef::from_strings("hold", &["-xk1"]).unwrap();
        let tr = simulate(&sys, &[1.0], &SamplingSchedule::Fixed { period: 4.0 }, 30, None).unwrap();
        let t = tr.overflow.expect("overflow");
        // 3^18 |1 - s| crosses 1e9 late in interval 18
        assert_eq!(tr.intervals(), 19);
        assert!(t > tr.sample_instants[18] + 3.5 && t <= tr.sample_instants[18] + 4.0, "{t}");
    }

    #[test]
    fn cubic_damping_keeps_long_periods_bounded() {
        // settles on a period-two orbit instead of diverging
        let sys = SystemDef::from_strings("ex1", &["-z1^3 + 2*z1^2 - 1.1*xk1"]).unwrap();
        let tr = simulate(&sys, &[3.0], &SamplingSchedule::Fixed { period: 2.5 }, 30, None).unwrap();
        assert!(tr.overflow.is_none());
        let last = tr.final_state()[0];
        assert!((last - 2.19863).abs() < 1e-4 || (last + 0.91014).abs() < 1e-4, "{last}");
    }

    #[test]
    fn flow_map_scalar_cases() {
        let g = linear_flow_map(scalar(0.0).as_ref(), scalar(-1.0).as_ref(), 0.3);
        assert!((g[(0, 0)] - 0.7).abs() < 1e-14);
        let g = linear_flow_map(scalar(-1.0).as_ref(), scalar(0.0).as_ref(), 1.0);
        assert!((g[(0, 0)] - (-1.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn expm_matches_rotation() {
        // exp([[0, -w], [w, 0]]) is a rotation by w; the norm forces squaring
        let w = 20.0;
        let a = Mat::from_fn(2, 2, |i, j| [[0.0, -w], [w, 0.0]][i][j]);
        let e = expm(a.as_ref());
        let want = [[w.cos(), -w.sin()], [w.sin(), w.cos()]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((e[(i, j)] - want[i][j]).abs() < 1e-12, "{i}{j}");
            }
        }
    }

    #[test]
    fn max_t_oracles() {
        let t = linear_max_t(scalar(0.0).as_ref(), scalar(-1.0).as_ref(), 1e-3, 10.0).unwrap();
        assert!((t - 2.0).abs() <= 1e-3);
        let t = linear_max_t(scalar(1.0).as_ref(), scalar(-3.0).as_ref(), 1e-3, 10.0).unwrap();
        assert!((t - 2f64.ln()).abs() <= 1e-3);
        assert!(matches!(
            linear_max_t(scalar(-1.0).as_ref(), scalar(0.0).as_ref(), 1e-2, 5.0),
            Err(SimError::BracketExhausted { .. })
        ));
        assert!(matches!(
            linear_max_t(scalar(1.0).as_ref(), scalar(0.0).as_ref(), 1e-2, 5.0),
            Err(SimError::NoStablePeriod { .. })
        ));
    }

    #[test]
    fn linear_parts_extraction() {
        let sys = SystemDef::from_strings("lin", &["-xk2 + 0.5*z1", "z1 - z2"]).unwrap();
        let (a0, a1) = linear_parts(&sys).unwrap();
        assert_eq!(a0[(0, 0)], 0.5);
        assert_eq!(a1[(0, 1)], -1.0);
        assert_eq!(a0[(1, 1)], -1.0);
        assert!(linear_parts(&SystemDef::from_strings("nl", &["z1^2"]).unwrap()).is_none());
    }
}
