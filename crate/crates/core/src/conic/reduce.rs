//! Facial reduction with diagonal certificates.
//!
//! Suppose `y` satisfies `b^T y = 0`, annihilates every free column, and makes
//! `A^T y` diagonal with nonnegative entries on every PSD block. Then every
//! feasible point has a zero diagonal, and therefore a zero row and column, at
//! each position where that diagonal is positive. Such positions are dropped
//! and the search repeats on the smaller problem until no certificate is left.
//!
//! Finding a certificate with the largest support is a small linear program in
//! the span of admissible `y`, solved with the same interior-point code.

use std::collections::BTreeMap;

use faer::Mat;

use super::ipm::{self, Outcome, StopRule};
use super::problem::{Block, BlockKind, ConicProblem, Entry, ObjectiveEntry};
use super::{BlockValue, ConicSolution, SolverOptions};

/// Relative singular value below which a direction counts as null.
const RANK_TOL: f64 = 1e-10;
/// Certificate weight (out of 1) above which a diagonal is declared zero.
const KILL_TOL: f64 = 1e-6;

/// Positions of every block that may be nonzero on the feasible set.
#[derive(Clone, Debug, PartialEq)]
pub struct Face {
    pub alive: Vec<Vec<bool>>,
}

impl Face {
    pub fn whole(problem: &ConicProblem) -> Face {
        Face {
            alive: problem.blocks.iter().map(|b| vec![true; b.size]).collect(),
        }
    }

    /// Number of PSD positions removed.
    pub fn removed(&self) -> usize {
        self.alive.iter().flatten().filter(|a| !**a).count()
    }

    pub fn restrict(&self, problem: &ConicProblem) -> Restriction {
        let mut block_map = Vec::with_capacity(problem.blocks.len());
        let mut pos = Vec::with_capacity(problem.blocks.len());
        let mut blocks = Vec::new();
        for (b, blk) in problem.blocks.iter().enumerate() {
            let mut k = 0;
            let map: Vec<Option<usize>> = self.alive[b]
                .iter()
                .map(|&a| {
                    a.then(|| {
                        k += 1;
                        k - 1
                    })
                })
                .collect();
            if k > 0 {
                block_map.push(Some(blocks.len()));
                blocks.push(Block { kind: blk.kind, size: k });
            } else {
                block_map.push(None);
            }
            pos.push(map);
        }
        let locate = |block: usize, i: usize, j: usize| -> Option<(usize, usize, usize)> {
            let nb = block_map[block]?;
            if problem.blocks[block].kind == BlockKind::Free {
                return Some((nb, pos[block][i]?, 0));
            }
            Some((nb, pos[block][i]?, pos[block][j]?))
        };
        let mut by_row: Vec<Vec<Entry>> = vec![Vec::new(); problem.nrows()];
        for e in &problem.entries {
            if let Some((block, i, j)) = locate(e.block, e.i, e.j) {
                by_row[e.row].push(Entry { block, i, j, ..*e });
            }
        }
        let mut row_map = Vec::with_capacity(problem.nrows());
        let mut rhs = Vec::new();
        let mut entries = Vec::new();
        let mut conflict = None;
        for (r, es) in by_row.into_iter().enumerate() {
            if es.is_empty() {
                if problem.rhs[r] != 0.0 && conflict.is_none() {
                    conflict = Some(r);
                }
                row_map.push(None);
                continue;
            }
            let nr = rhs.len();
            row_map.push(Some(nr));
            rhs.push(problem.rhs[r]);
            entries.extend(es.into_iter().map(|e| Entry { row: nr, ..e }));
        }
        let objective = problem
            .objective
            .iter()
            .filter_map(|o| locate(o.block, o.i, o.j).map(|(block, i, j)| ObjectiveEntry { block, i, j, ..*o }))
            .collect();
        Restriction {
            problem: ConicProblem {
                blocks,
                entries,
                rhs,
                objective,
            },
            block_map,
            pos,
            row_map,
            conflict,
        }
    }
}

/// A problem restricted to a [`Face`], with the maps needed to lift solutions back.
#[derive(Clone, Debug)]
pub struct Restriction {
    pub problem: ConicProblem,
    block_map: Vec<Option<usize>>,
    pos: Vec<Vec<Option<usize>>>,
    row_map: Vec<Option<usize>>,
    /// An original row left without entries although its right-hand side is nonzero.
    pub conflict: Option<usize>,
}

impl Restriction {
    /// Embeds a solution of the restricted problem into the original one.
    /// Removed positions and dropped rows are filled with zeros.
    pub fn lift(&self, original: &ConicProblem, sol: ConicSolution) -> ConicSolution {
        let values = original
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                let inner = self.block_map[b].map(|nb| &sol.values[nb]);
                let at = |i: usize, j: usize| -> f64 {
                    match (inner, self.pos[b][i], self.pos[b][j]) {
                        (Some(BlockValue::Psd(m)), Some(pi), Some(pj)) => m[(pi, pj)],
                        _ => 0.0,
                    }
                };
                match blk.kind {
                    BlockKind::Free => BlockValue::Free(match inner {
                        Some(BlockValue::Free(v)) => v.clone(),
                        _ => vec![0.0; blk.size],
                    }),
                    BlockKind::Psd => BlockValue::Psd(Mat::from_fn(blk.size, blk.size, at)),
                }
            })
            .collect::<Vec<_>>();
        let rows = |v: &[f64]| -> Vec<f64> { self.row_map.iter().map(|r| r.map_or(0.0, |r| v[r])).collect() };
        ConicSolution {
            primal_residual: super::primal_residual(original, &values),
            values,
            dual: rows(&sol.dual),
            certificate: sol.certificate.as_deref().map(rows),
            ..sol
        }
    }
}

/// Iterated diagonal facial reduction of a feasibility problem.
pub fn find_face(problem: &ConicProblem, opts: &SolverOptions) -> Face {
    let mut face = Face::whole(problem);
    let m = problem.nrows();
    loop {
        let mut cols: BTreeMap<(usize, usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
        for e in &problem.entries {
            let alive = &face.alive[e.block];
            let live = match problem.blocks[e.block].kind {
                BlockKind::Free => true,
                BlockKind::Psd => alive[e.i] && alive[e.j],
            };
            if live {
                cols.entry((e.block, e.i, e.j)).or_default().push((e.row, e.value));
            }
        }
        let (diag, fixed): (Vec<_>, Vec<_>) = cols
            .iter()
            .partition(|((b, i, j), _)| problem.blocks[*b].kind == BlockKind::Psd && i == j);
        if diag.is_empty() {
            break;
        }

        // admissible y: zero on fixed columns and orthogonal to b
        let mut e = Mat::<f64>::zeros((fixed.len() + 1).max(m), m);
        for (k, (_, es)) in fixed.iter().enumerate() {
            for &(r, v) in es.iter() {
                e[(k, r)] += v;
            }
        }
        for r in 0..m {
            e[(fixed.len(), r)] = problem.rhs[r];
        }
        for k in 0..e.nrows() {
            let n = (0..m).map(|c| e[(k, c)].powi(2)).sum::<f64>().sqrt();
            if n > 0.0 {
                for c in 0..m {
                    e[(k, c)] /= n;
                }
            }
        }
        let Some(null) = null_space(&e) else { break };
        if null.ncols() == 0 {
            break;
        }
        let mut g = Mat::<f64>::zeros(diag.len(), null.ncols());
        for (k, (_, es)) in diag.iter().enumerate() {
            for &(r, v) in es.iter() {
                for c in 0..null.ncols() {
                    g[(k, c)] += v * null[(r, c)];
                }
            }
        }
        let Some(h) = range(&g) else { break };
        if h.ncols() == 0 {
            break;
        }
        let Some(d) = largest_certificate(&h, opts) else {
            break;
        };
        let mut changed = false;
        for (k, ((b, i, _), _)) in diag.iter().enumerate() {
            if d[k] > KILL_TOL {
                face.alive[*b][*i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    face
}

/// Orthonormal basis of `{y : E y = 0}`; `e` must have at least as many rows as columns.
fn null_space(e: &Mat<f64>) -> Option<Mat<f64>> {
    let svd = e.thin_svd().ok()?;
    let s = svd.S().column_vector();
    let top = (0..s.nrows()).map(|i| s[i]).fold(0.0f64, f64::max);
    let cols: Vec<usize> = (0..s.nrows()).filter(|&i| s[i] <= RANK_TOL * top.max(1.0)).collect();
    let v = svd.V();
    Some(Mat::from_fn(v.nrows(), cols.len(), |i, c| v[(i, cols[c])]))
}

/// Orthonormal basis of the column space of `g`.
fn range(g: &Mat<f64>) -> Option<Mat<f64>> {
    let svd = g.thin_svd().ok()?;
    let s = svd.S().column_vector();
    let top = (0..s.nrows()).map(|i| s[i]).fold(0.0f64, f64::max);
    if top == 0.0 {
        return Some(Mat::zeros(g.nrows(), 0));
    }
    let cols: Vec<usize> = (0..s.nrows()).filter(|&i| s[i] > RANK_TOL * top).collect();
    let u = svd.U();
    Some(Mat::from_fn(u.nrows(), cols.len(), |i, c| u[(i, cols[c])]))
}

/// `max sum(H v)` subject to `0 <= H v <= 1`, returning `H v`.
fn largest_certificate(h: &Mat<f64>, opts: &SolverOptions) -> Option<Vec<f64>> {
    let (nd, r) = (h.nrows(), h.ncols());
    let active: Vec<usize> = (0..nd)
        .filter(|&i| (0..r).map(|c| h[(i, c)].powi(2)).sum::<f64>().sqrt() > RANK_TOL)
        .collect();
    let mut lp = ConicProblem {
        blocks: vec![Block { kind: BlockKind::Psd, size: 1 }; 2 * active.len()],
        entries: Vec::new(),
        rhs: vec![0.0; r],
        objective: Vec::new(),
    };
    for (a, &i) in active.iter().enumerate() {
        for c in 0..r {
            let v = h[(i, c)];
            if v != 0.0 {
                lp.entries.push(Entry { row: c, block: 2 * a, i: 0, j: 0, value: -v });
                lp.entries.push(Entry { row: c, block: 2 * a + 1, i: 0, j: 0, value: v });
                lp.rhs[c] += v;
            }
        }
        lp.objective.push(ObjectiveEntry { block: 2 * a + 1, i: 0, j: 0, value: 1.0 });
    }
    lp.entries.sort_by_key(|e| (e.row, e.block));
    let it = ipm::run(&lp, opts.tol, opts.max_iter, StopRule { free_below: None, dual_above: None });
    if it.outcome != Outcome::Converged {
        return None;
    }
    Some((0..nd).map(|i| (0..r).map(|c| h[(i, c)] * it.y[c]).sum()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn psd(row: usize, block: usize, i: usize, j: usize, value: f64) -> Entry {
        Entry { row, block, i, j, value }
    }

    #[test]
    fn diagonal_forced_by_combined_rows() {
        // X00 - X11 = 0 and X11 + X22 = 0 only combine to a certificate:
        // adding them gives X00 + X22 = 0, after which X11 = 0 as well.
        let p = ConicProblem {
            blocks: vec![Block { kind: BlockKind::Psd, size: 3 }],
            entries: vec![psd(0, 0, 0, 0, 1.0), psd(0, 0, 1, 1, -1.0), psd(1, 0, 1, 1, 1.0), psd(1, 0, 2, 2, 1.0), psd(2, 0, 0, 1, 1.0)],
            rhs: vec![0.0, 0.0, 0.0],
            objective: vec![],
        };
        let face = find_face(&p, &SolverOptions::default());
        assert_eq!(face.alive[0], vec![false, false, false]);
    }

    #[test]
    fn strictly_feasible_problem_is_untouched() {
        let p = ConicProblem {
            blocks: vec![Block { kind: BlockKind::Psd, size: 2 }],
            entries: vec![psd(0, 0, 0, 0, 1.0), psd(0, 0, 1, 1, 1.0), psd(1, 0, 0, 1, 1.0)],
            rhs: vec![1.0, 0.2],
            objective: vec![],
        };
        assert_eq!(find_face(&p, &SolverOptions::default()).removed(), 0);
    }

    #[test]
    fn restriction_drops_rows_and_reports_conflicts() {
        let p = ConicProblem {
            blocks: vec![Block { kind: BlockKind::Free, size: 1 }, Block { kind: BlockKind::Psd, size: 2 }],
            entries: vec![psd(0, 1, 0, 0, 1.0), psd(1, 1, 0, 1, 1.0), psd(1, 0, 0, 0, 1.0), psd(2, 1, 1, 1, 1.0)],
            rhs: vec![0.0, 0.5, 2.0],
            objective: vec![],
        };
        let face = Face {
            alive: vec![vec![true], vec![false, true]],
        };
        let r = face.restrict(&p);
        assert_eq!(r.conflict, None);
        assert_eq!(r.problem.nrows(), 2);
        assert_eq!(r.problem.blocks[1].size, 1);
        let face = Face {
            alive: vec![vec![true], vec![true, false]],
        };
        assert_eq!(face.restrict(&p).conflict, Some(2));
    }
}
