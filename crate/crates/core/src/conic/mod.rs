//! Conic programs over free scalars and PSD blocks, with an in-crate
//! interior-point solver.
//!
//! Problems without an objective are pure feasibility questions. They are
//! solved through an auxiliary problem that shifts every PSD block by a free
//! scalar `-lambda * I` and minimizes `lambda` subject to `lambda >= -1`. A
//! negative optimum yields a strictly feasible point, a positive one a dual
//! ray proving infeasibility. The auxiliary problem always has an interior
//! point, which keeps the iterates well defined in both cases.
//!
//! A feasibility problem whose feasible set touches no interior point makes
//! the auxiliary optimum zero and the iterates degenerate. Before solving, such
//! problems are therefore restricted to a smaller face (see [`find_face`]).
//! Faces that no diagonal certificate exposes show up as a solve that stalls
//! at a zero shift; its dual then names the face, the problem is rewritten on
//! it and solved again.

mod ipm;
mod polish;
mod problem;
mod reduce;
mod subspace;

use faer::{Mat, MatRef, Side};
use thiserror::Error;

pub use problem::{Block, BlockKind, ConicProblem, Entry, ObjectiveEntry};
pub use reduce::{find_face, Face, Restriction};

use ipm::{Outcome, StopRule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConicError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("problem has no rows or no variables")]
    Empty,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("eigenvalue computation failed")]
    Eigen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// A point satisfying the constraints with every PSD block positive definite.
    Feasible,
    /// Optimal to tolerance (problems with an objective).
    Optimal,
    /// A dual ray certifies that no feasible point exists.
    Infeasible,
    /// The method stopped without a decision.
    Inaccurate,
    IterationLimit,
}

#[derive(Clone, Debug)]
pub enum BlockValue {
    Free(Vec<f64>),
    Psd(Mat<f64>),
}

#[derive(Clone, Debug)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub values: Vec<BlockValue>,
    /// Equality multipliers.
    pub dual: Vec<f64>,
    /// `||b - A x|| / (1 + ||b||)` at the returned point.
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Smallest eigenvalue lower bound over the PSD blocks (feasibility problems).
    pub margin: Option<f64>,
    /// For infeasible problems: `y` with `A_free^T y = 0`, `-A_psd^*(y)` PSD and `b^T y > 0`.
    pub certificate: Option<Vec<f64>>,
}

impl ConicSolution {
    pub fn free_value(&self, block: usize, i: usize) -> f64 {
        match &self.values[block] {
            BlockValue::Free(v) => v[i],
            BlockValue::Psd(_) => panic!("block {block} is not free"),
        }
    }

    pub fn psd_value(&self, block: usize, i: usize, j: usize) -> f64 {
        match &self.values[block] {
            BlockValue::Psd(m) => m[(i, j)],
            BlockValue::Free(_) => panic!("block {block} is not PSD"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Required eigenvalue margin before a feasibility problem is declared feasible.
    pub margin: f64,
    /// Restrict feasibility problems to the face found by [`find_face`] first.
    pub facial_reduction: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 200,
            margin: 1e-7,
            facial_reduction: true,
        }
    }
}

pub fn solve(problem: &ConicProblem, opts: &SolverOptions) -> Result<ConicSolution, ConicError> {
    problem.validate()?;
    if problem.nrows() == 0 || problem.blocks.iter().all(|b| b.size == 0) {
        return Err(ConicError::Empty);
    }
    if problem.has_objective() {
        return solve_objective(problem, opts);
    }
    if !opts.facial_reduction {
        return solve_feasibility(problem, opts);
    }
    reduce_and_solve(problem, opts)
}

/// Rounds of facial reduction before giving up on a stalled problem.
const MAX_ROUNDS: usize = 6;
/// Shift magnitude below which a stalled solve is taken to sit on a face.
const STALL_SHIFT: f64 = 1e-3;

enum Stage {
    Coordinates(Restriction),
    Rotation(subspace::Rotation),
}

/// Alternates diagonal reduction, a solve, and reduction read off the
/// stalled dual, then lifts the final solution back through every stage.
fn reduce_and_solve(problem: &ConicProblem, opts: &SolverOptions) -> Result<ConicSolution, ConicError> {
    let mut stages: Vec<(Stage, ConicProblem)> = Vec::new();
    let mut current = problem.clone();
    let mut rotated = false;
    let mut result = None;
    for round in 0..MAX_ROUNDS {
        let face = find_face(&current, opts);
        if face.removed() > 0 {
            let r = face.restrict(&current);
            let next = r.problem.clone();
            let conflict = r.conflict.is_some();
            stages.push((Stage::Coordinates(r), std::mem::replace(&mut current, next)));
            if conflict {
                // a nonzero right-hand side on a row that the face forces to zero
                result = Some(trivial_solution(&current, SolveStatus::Infeasible));
                break;
            }
        }
        if current.nrows() == 0 {
            result = Some(trivial_solution(&current, SolveStatus::Feasible));
            break;
        }
        let sol = solve_feasibility(&current, opts)?;
        let stalled = matches!(sol.status, SolveStatus::Inaccurate | SolveStatus::IterationLimit)
            && sol.margin.is_some_and(|m| m.abs() <= STALL_SHIFT);
        let ranges = if stalled && round + 1 < MAX_ROUNDS {
            subspace::dual_face(&current, &sol.dual)
        } else {
            None
        };
        let Some(ranges) = ranges else {
            result = Some(sol);
            break;
        };
        let rot = subspace::rotate(&current, &ranges);
        if rot.conflict {
            result = Some(sol);
            break;
        }
        rotated = true;
        let next = rot.problem.clone();
        stages.push((Stage::Rotation(rot), std::mem::replace(&mut current, next)));
    }
    let mut sol = result.expect("the last round always produces a solution");
    if rotated && sol.status == SolveStatus::Infeasible {
        // the dual-derived faces hold only to solver accuracy
        sol.status = SolveStatus::Inaccurate;
        sol.certificate = None;
    }
    for (stage, outer) in stages.iter().rev() {
        sol = match stage {
            Stage::Coordinates(r) => r.lift(outer, sol),
            Stage::Rotation(r) => r.lift(outer, sol),
        };
    }
    Ok(sol)
}

/// Zero free part and identity PSD blocks, used when no rows are left to solve.
fn trivial_solution(problem: &ConicProblem, status: SolveStatus) -> ConicSolution {
    let psd: Vec<Mat<f64>> = problem
        .blocks
        .iter()
        .filter(|b| b.kind == BlockKind::Psd)
        .map(|b| Mat::identity(b.size, b.size))
        .collect();
    let nfree = problem.blocks.iter().filter(|b| b.kind == BlockKind::Free).map(|b| b.size).sum();
    let values = values_from(problem, &vec![0.0; nfree], &psd);
    ConicSolution {
        status,
        primal_residual: primal_residual(problem, &values),
        values,
        dual: vec![0.0; problem.nrows()],
        dual_residual: 0.0,
        iterations: 0,
        margin: (status == SolveStatus::Feasible).then_some(1.0),
        certificate: None,
    }
}

fn values_from(problem: &ConicProblem, free: &[f64], psd: &[Mat<f64>]) -> Vec<BlockValue> {
    let mut fo = 0;
    let mut po = 0;
    problem
        .blocks
        .iter()
        .map(|b| match b.kind {
            BlockKind::Free => {
                fo += b.size;
                BlockValue::Free(free[fo - b.size..fo].to_vec())
            }
            BlockKind::Psd => {
                po += 1;
                BlockValue::Psd(psd[po - 1].clone())
            }
        })
        .collect()
}

/// Relative primal residual of `values` in `problem`.
pub fn primal_residual(problem: &ConicProblem, values: &[BlockValue]) -> f64 {
    let mut r = problem.rhs.clone();
    for e in &problem.entries {
        let x = match &values[e.block] {
            BlockValue::Free(v) => v[e.i],
            BlockValue::Psd(m) => m[(e.i, e.j)],
        };
        r[e.row] -= e.value * x;
    }
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    n(&r) / (1.0 + n(&problem.rhs))
}

fn solve_objective(problem: &ConicProblem, opts: &SolverOptions) -> Result<ConicSolution, ConicError> {
    let it = ipm::run(
        problem,
        opts.tol,
        opts.max_iter,
        StopRule {
            free_below: None,
            dual_above: None,
        },
    );
    let status = match it.outcome {
        Outcome::Converged => SolveStatus::Optimal,
        Outcome::IterationLimit => SolveStatus::IterationLimit,
        _ => SolveStatus::Inaccurate,
    };
    let values = values_from(problem, &it.free, &it.psd);
    Ok(ConicSolution {
        status,
        primal_residual: primal_residual(problem, &values),
        values,
        dual: it.y,
        dual_residual: it.dual_residual,
        iterations: it.iterations,
        margin: None,
        certificate: None,
    })
}

fn solve_feasibility(problem: &ConicProblem, opts: &SolverOptions) -> Result<ConicSolution, ConicError> {
    let m = problem.nrows();
    let nb = problem.blocks.len();
    let mut aux = problem.clone();
    aux.blocks.push(Block {
        kind: BlockKind::Free,
        size: 1,
    });
    aux.blocks.push(Block {
        kind: BlockKind::Psd,
        size: 1,
    });
    let mut shift = vec![0.0; m];
    for e in &problem.entries {
        if problem.blocks[e.block].kind == BlockKind::Psd && e.i == e.j {
            shift[e.row] += e.value;
        }
    }
    for (row, &s) in shift.iter().enumerate() {
        if s != 0.0 {
            aux.entries.push(Entry {
                row,
                block: nb,
                i: 0,
                j: 0,
                value: -s,
            });
        }
    }
    aux.entries.push(Entry {
        row: m,
        block: nb,
        i: 0,
        j: 0,
        value: 1.0,
    });
    aux.entries.push(Entry {
        row: m,
        block: nb + 1,
        i: 0,
        j: 0,
        value: -1.0,
    });
    aux.rhs.push(-1.0);
    aux.objective = vec![ObjectiveEntry {
        block: nb,
        i: 0,
        j: 0,
        value: 1.0,
    }];
    let lambda_index: usize = problem
        .blocks
        .iter()
        .filter(|b| b.kind == BlockKind::Free)
        .map(|b| b.size)
        .sum();

    let it = ipm::run(
        &aux,
        opts.tol,
        opts.max_iter,
        StopRule {
            free_below: Some((lambda_index, -opts.margin)),
            dual_above: Some(opts.margin),
        },
    );
    let lambda = it.free[lambda_index];
    let psd: Vec<Mat<f64>> = it.psd[..it.psd.len() - 1]
        .iter()
        .map(|x| Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - if i == j { lambda } else { 0.0 }))
        .collect();
    let values = values_from(problem, &it.free[..lambda_index], &psd);
    let residual = primal_residual(problem, &values);
    let feasible_point = lambda < 0.0 && residual <= opts.tol;
    let (status, certificate) = match it.outcome {
        Outcome::PrimalStop => (SolveStatus::Feasible, None),
        Outcome::DualStop => (SolveStatus::Infeasible, Some(it.y[..m].to_vec())),
        Outcome::Converged if feasible_point => (SolveStatus::Feasible, None),
        Outcome::Converged if it.dual_objective > 0.0 => (SolveStatus::Infeasible, Some(it.y[..m].to_vec())),
        Outcome::IterationLimit if feasible_point => (SolveStatus::Feasible, None),
        Outcome::IterationLimit => (SolveStatus::IterationLimit, None),
        _ => (SolveStatus::Inaccurate, None),
    };
    let (mut status, mut values, mut residual, mut margin) = (status, values, residual, -lambda);
    if matches!(status, SolveStatus::Inaccurate | SolveStatus::IterationLimit) && margin > opts.margin {
        // stalled with room to spare: repair the affine part and keep it if the blocks survive
        if let Some(repaired) = polish::project(problem, &values) {
            let r = primal_residual(problem, &repaired);
            let least = min_eigenvalue(&repaired);
            if r <= opts.tol && least.is_some_and(|l| l > 0.0) {
                status = SolveStatus::Feasible;
                values = repaired;
                residual = r;
                margin = least.unwrap_or(0.0);
            }
        }
    }
    let feasible = status == SolveStatus::Feasible;
    Ok(ConicSolution {
        status,
        primal_residual: residual,
        values,
        dual: if feasible { vec![0.0; m] } else { it.y[..m].to_vec() },
        dual_residual: if feasible { 0.0 } else { it.dual_residual },
        iterations: it.iterations,
        margin: Some(margin),
        certificate,
    })
}

/// Smallest eigenvalue over all PSD blocks (`f64::INFINITY` when there are none).
fn min_eigenvalue(values: &[BlockValue]) -> Option<f64> {
    let mut least = f64::INFINITY;
    for v in values {
        if let BlockValue::Psd(m) = v {
            if m.nrows() > 0 {
                least = least.min(check_psd(m.as_ref(), 0.0).ok()?.1);
            }
        }
    }
    Some(least)
}

/// Whether a symmetric matrix is PSD up to `tol`, together with its smallest eigenvalue.
pub fn check_psd(matrix: MatRef<'_, f64>, tol: f64) -> Result<(bool, f64), ConicError> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(ConicError::Malformed(format!("{}x{} matrix is not square", n, matrix.ncols())));
    }
    if n == 0 {
        return Ok((true, 0.0));
    }
    let mut scale = 0.0f64;
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            scale = scale.max(matrix[(i, j)].abs());
            asym = asym.max((matrix[(i, j)] - matrix[(j, i)]).abs());
        }
    }
    if asym > 1e-9 * scale.max(1.0) {
        return Err(ConicError::NotSymmetric(asym));
    }
    let ev = matrix
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|_| ConicError::Eigen)?;
    let min = ev[0];
    Ok((min >= -tol, min))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn psd_entry(row: usize, block: usize, i: usize, j: usize, value: f64) -> Entry {
        Entry { row, block, i, j, value }
    }

    #[test]
    fn check_psd_known_matrices() {
        let m = Mat::from_fn(2, 2, |i, j| [[2.0, 1.0], [1.0, 2.0]][i][j]);
        let (ok, min) = check_psd(m.as_ref(), 1e-12).unwrap();
        assert!(ok && (min - 1.0).abs() < 1e-12);
        let m = Mat::from_fn(2, 2, |i, j| [[1.0, 2.0], [2.0, 1.0]][i][j]);
        let (ok, min) = check_psd(m.as_ref(), 1e-12).unwrap();
        assert!(!ok && (min + 1.0).abs() < 1e-12);
        let m = Mat::from_fn(2, 2, |i, j| [[1.0, 2.0], [0.0, 1.0]][i][j]);
        assert!(matches!(check_psd(m.as_ref(), 1e-12), Err(ConicError::NotSymmetric(_))));
    }

    #[test]
    fn feasible_two_by_two() {
        // X11 = 1, X22 = 1, X12 free: feasible with margin up to 1
        let p = ConicProblem {
            blocks: vec![Block { kind: BlockKind::Psd, size: 2 }],
            entries: vec![psd_entry(0, 0, 0, 0, 1.0), psd_entry(1, 0, 1, 1, 1.0)],
            rhs: vec![1.0, 1.0],
            objective: vec![],
        };
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Feasible);
        assert!(s.primal_residual <= 1e-8);
        let BlockValue::Psd(x) = &s.values[0] else { panic!() };
        assert!(check_psd(x.as_ref(), 0.0).unwrap().0);
    }

    #[test]
    fn infeasible_psd_with_ray() {
        // X11 = -1 cannot hold for PSD X
        let p = ConicProblem {
            blocks: vec![Block { kind: BlockKind::Psd, size: 2 }],
            entries: vec![psd_entry(0, 0, 0, 0, 1.0)],
            rhs: vec![-1.0],
            objective: vec![],
        };
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
        let y = s.certificate.unwrap();
        // b^T y > 0 and -y * E11 PSD
        assert!(y[0] < 0.0);
    }

    #[test]
    fn infeasible_through_off_diagonal() {
        // X11 = 0, X12 = 1 (entry value 2 means 2 * X12 = 2)
        let p = ConicProblem {
            blocks: vec![Block { kind: BlockKind::Psd, size: 2 }],
            entries: vec![psd_entry(0, 0, 0, 0, 1.0), psd_entry(1, 0, 0, 1, 2.0)],
            rhs: vec![0.0, 2.0],
            objective: vec![],
        };
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_ne!(s.status, SolveStatus::Feasible);
    }

    #[test]
    fn free_and_psd_mixed() {
        // x + X11 = 3, x - X22 = 0, X12 = 0.5
        let p = ConicProblem {
            blocks: vec![
                Block { kind: BlockKind::Free, size: 1 },
                Block { kind: BlockKind::Psd, size: 2 },
            ],
            entries: vec![
                psd_entry(0, 0, 0, 0, 1.0),
                psd_entry(0, 1, 0, 0, 1.0),
                psd_entry(1, 0, 0, 0, 1.0),
                psd_entry(1, 1, 1, 1, -1.0),
                psd_entry(2, 1, 0, 1, 1.0),
            ],
            rhs: vec![3.0, 0.0, 0.5],
            objective: vec![],
        };
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Feasible);
        let x = s.free_value(0, 0);
        assert!((x + s.psd_value(1, 0, 0) - 3.0).abs() < 1e-7);
        assert!((x - s.psd_value(1, 1, 1)).abs() < 1e-7);
    }

    #[test]
    fn inconsistent_free_rows_are_infeasible() {
        // x = 1 and x = 2
        let p = ConicProblem {
            blocks: vec![
                Block { kind: BlockKind::Free, size: 1 },
                Block { kind: BlockKind::Psd, size: 1 },
            ],
            entries: vec![
                psd_entry(0, 0, 0, 0, 1.0),
                psd_entry(1, 0, 0, 0, 1.0),
                psd_entry(2, 1, 0, 0, 1.0),
            ],
            rhs: vec![1.0, 2.0, 1.0],
            objective: vec![],
        };
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn minimize_trace_against_known_optimum() {
        // min X11 + X22 s.t. X12 = 1: optimum 2 at X = [[1,1],[1,1]]
        let p = ConicProblem {
            blocks: vec![Block { kind: BlockKind::Psd, size: 2 }],
            entries: vec![psd_entry(0, 0, 0, 1, 1.0)],
            rhs: vec![1.0],
            objective: vec![
                ObjectiveEntry { block: 0, i: 0, j: 0, value: 1.0 },
                ObjectiveEntry { block: 0, i: 1, j: 1, value: 1.0 },
            ],
        };
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        let obj = s.psd_value(0, 0, 0) + s.psd_value(0, 1, 1);
        assert!((obj - 2.0).abs() < 1e-6, "{obj}");
    }

    #[test]
    fn malformed_entries_rejected() {
        let p = ConicProblem {
            blocks: vec![Block { kind: BlockKind::Psd, size: 2 }],
            entries: vec![psd_entry(0, 0, 1, 0, 1.0)],
            rhs: vec![1.0],
            objective: vec![],
        };
        assert!(matches!(solve(&p, &SolverOptions::default()), Err(ConicError::Malformed(_))));
    }
}
