//! Facial reduction read off a stalled dual.
//!
//! When the shifted feasibility problem converges to a zero shift, its dual
//! multipliers `y` approach a certificate with `b^T y = 0`, no action on free
//! columns and `W = -A^T y` PSD. Every feasible `X` then satisfies
//! `<W, X> = 0`, so `X` lives on the orthogonal complement of `range(W)`.
//! The certificate is usually supported on a handful of basis positions, so
//! the change of basis only mixes those positions and leaves the others alone,
//! which keeps the problem sparse.

use std::collections::BTreeMap;

use faer::{Mat, Side};

use super::problem::{Block, BlockKind, ConicProblem, Entry};
use super::{BlockValue, ConicSolution};

/// Eigenvalues above this fraction of the largest span the range of `W`.
const RANGE_TOL: f64 = 1e-3;
/// Everything below the range must be this much smaller, or the split is not trusted.
const GAP_TOL: f64 = 1e-6;
/// Relative violation allowed in the certificate's linear conditions.
const CERT_TOL: f64 = 1e-4;
/// Rotated coefficients below this fraction of their row's scale are rounding
/// leftovers of a cancellation and are dropped.
const PRUNE_TOL: f64 = 1e-8;
/// Component size treated as outside the support of a range vector.
const SUPPORT_TOL: f64 = 1e-9;
/// Range rows below this fraction of the largest are outside the refined support.
const REFINE_SUPPORT: f64 = 1e-3;
/// Singular values of the (row-normalized) support conditions treated as zero.
const NULL_TOL: f64 = 1e-9;

/// Range of `W` for every PSD block (`None` where it is empty), when `y` is a
/// usable certificate.
///
/// The solver's `y` is only as accurate as its dual residual, so the range is
/// re-read from the projection of `y` onto the exact certificates supported on
/// the same Gram positions. Without that, the rotated rows keep remnants of
/// order the residual and the next solve is badly conditioned.
pub(crate) fn dual_face(problem: &ConicProblem, y: &[f64]) -> Option<Vec<Option<Mat<f64>>>> {
    let rough = read_face(problem, y, false)?;
    let inside = support(problem, &rough);
    if let Some(null) = supported_certificates(problem, &inside) {
        let projected = project(&null, y);
        let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let kept = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
        // most of the certificate must survive the projection
        if kept > 0.5 * ynorm {
            if let Some(exact) = read_face(problem, &projected, true) {
                return Some(exact);
            }
        }
    }
    read_face(problem, y, true)
}

/// Basis positions of every block carried by the range vectors.
fn support(problem: &ConicProblem, ranges: &[Option<Mat<f64>>]) -> Vec<Vec<bool>> {
    problem
        .blocks
        .iter()
        .zip(ranges)
        .map(|(b, r)| match r {
            Some(u) => {
                let norms: Vec<f64> =
                    (0..b.size).map(|i| (0..u.ncols()).map(|c| u[(i, c)].powi(2)).sum::<f64>().sqrt()).collect();
                let top = norms.iter().cloned().fold(0.0, f64::max);
                norms.iter().map(|&v| v > REFINE_SUPPORT * top).collect()
            }
            None => vec![false; b.size],
        })
        .collect()
}

/// Orthonormal basis of `{y : b^T y = 0, A^T y vanishes off the support}`.
fn supported_certificates(problem: &ConicProblem, inside: &[Vec<bool>]) -> Option<Mat<f64>> {
    let mut columns: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    for e in &problem.entries {
        let free = problem.blocks[e.block].kind == BlockKind::Free;
        let allowed = !free && inside[e.block][e.i] && inside[e.block][e.j];
        if !allowed {
            let next = columns.len();
            columns.entry((e.block, e.i.min(e.j), e.i.max(e.j))).or_insert(next);
        }
    }
    let m = problem.nrows();
    let k = columns.len() + 1;
    let mut c = Mat::<f64>::zeros(k.max(m), m);
    for e in &problem.entries {
        if let Some(&row) = columns.get(&(e.block, e.i.min(e.j), e.i.max(e.j))) {
            c[(row, e.row)] += e.value;
        }
    }
    let bnorm = problem.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (r, &b) in problem.rhs.iter().enumerate() {
        c[(k - 1, r)] = if bnorm > 0.0 { b / bnorm } else { 0.0 };
    }
    // row scaling so every condition counts equally
    for row in 0..k {
        let n = (0..m).map(|r| c[(row, r)].powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            for r in 0..m {
                c[(row, r)] /= n;
            }
        }
    }
    let svd = c.thin_svd().ok()?;
    let s = svd.S().column_vector();
    let v = svd.V();
    let null: Vec<usize> = (0..s.nrows()).filter(|&i| s[i] <= NULL_TOL).collect();
    (!null.is_empty()).then(|| Mat::from_fn(m, null.len(), |r, c| v[(r, null[c])]))
}

fn project(null: &Mat<f64>, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for col in 0..null.ncols() {
        let w: f64 = (0..y.len()).map(|r| null[(r, col)] * y[r]).sum();
        for (r, o) in out.iter_mut().enumerate() {
            *o += null[(r, col)] * w;
        }
    }
    out
}

/// `strict` also demands `b^T y = 0`; the rough read leaves that to `refine`.
fn read_face(problem: &ConicProblem, y: &[f64], strict: bool) -> Option<Vec<Option<Mat<f64>>>> {
    if y.len() != problem.nrows() || y.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut ws: Vec<Option<Mat<f64>>> = problem
        .blocks
        .iter()
        .map(|b| (b.kind == BlockKind::Psd).then(|| Mat::zeros(b.size, b.size)))
        .collect();
    let mut free: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for e in &problem.entries {
        let v = y[e.row] * e.value;
        match &mut ws[e.block] {
            Some(w) if e.i == e.j => w[(e.i, e.i)] -= v,
            Some(w) => {
                w[(e.i, e.j)] -= 0.5 * v;
                w[(e.j, e.i)] -= 0.5 * v;
            }
            None => {
                let acc = free.entry((e.block, e.i)).or_insert((0.0, 0.0));
                acc.0 += v;
                acc.1 += v.abs();
            }
        }
    }
    let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let bnorm = problem.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let by: f64 = problem.rhs.iter().zip(y).map(|(b, v)| b * v).sum();
    if strict && by.abs() > CERT_TOL * bnorm * ynorm {
        return None;
    }
    let activity = free.values().map(|(_, a)| *a).fold(0.0, f64::max);
    if free.values().any(|(s, _)| s.abs() > CERT_TOL * activity) {
        return None;
    }

    let mut eig = Vec::with_capacity(ws.len());
    let mut top = 0.0f64;
    for w in &ws {
        eig.push(match w {
            Some(w) if w.nrows() > 0 => {
                let e = w.self_adjoint_eigen(Side::Lower).ok()?;
                let s = e.S().column_vector();
                top = top.max(s[s.nrows() - 1]);
                Some(e)
            }
            _ => None,
        });
    }
    if !(top > 0.0) {
        return None;
    }
    let mut ranges = Vec::with_capacity(ws.len());
    for e in &eig {
        let Some(e) = e else {
            ranges.push(None);
            continue;
        };
        let s = e.S().column_vector();
        let n = s.nrows();
        if s[0] < -GAP_TOL * top {
            return None;
        }
        let keep: Vec<usize> = (0..n).filter(|&k| s[k] > RANGE_TOL * top).collect();
        let below = (0..n).filter(|&k| s[k] <= RANGE_TOL * top).map(|k| s[k].abs()).fold(0.0, f64::max);
        if strict && below > GAP_TOL * top && !keep.is_empty() {
            return None;
        }
        ranges.push((!keep.is_empty()).then(|| Mat::from_fn(n, keep.len(), |i, c| e.U()[(i, keep[c])])));
    }
    ranges.iter().any(Option::is_some).then_some(ranges)
}

/// Row `i` of the basis matrix `P` of one block, as `(new column, coefficient)`.
type BasisRows = Vec<Vec<(usize, f64)>>;

/// A problem rewritten over `X = P Y P^T` on some PSD blocks.
#[derive(Clone, Debug)]
pub(crate) struct Rotation {
    pub problem: ConicProblem,
    basis: Vec<Option<BasisRows>>,
    /// New size of every original block.
    sizes: Vec<usize>,
    block_map: Vec<Option<usize>>,
    row_map: Vec<Option<usize>>,
    pub conflict: bool,
}

/// `P` for one block: untouched coordinates first, then an orthonormal basis
/// of the part of the support orthogonal to `u`.
fn basis_for(n: usize, u: &Mat<f64>) -> BasisRows {
    let support: Vec<usize> = (0..n)
        .filter(|&i| (0..u.ncols()).any(|c| u[(i, c)].abs() > SUPPORT_TOL))
        .collect();
    let mut rows: BasisRows = vec![Vec::new(); n];
    let mut next = 0;
    for (i, row) in rows.iter_mut().enumerate() {
        if !support.contains(&i) {
            row.push((next, 1.0));
            next += 1;
        }
    }
    let k = support.len();
    // complement of span(u restricted to the support)
    let proj = Mat::from_fn(k, k, |a, b| {
        let uu: f64 = (0..u.ncols()).map(|c| u[(support[a], c)] * u[(support[b], c)]).sum();
        f64::from(u8::from(a == b)) - uu
    });
    if let Ok(e) = proj.self_adjoint_eigen(Side::Lower) {
        let s = e.S().column_vector();
        for c in (0..k).filter(|&c| s[c] > 0.5) {
            for (a, &i) in support.iter().enumerate() {
                let v = e.U()[(a, c)];
                if v != 0.0 {
                    rows[i].push((next, v));
                }
            }
            next += 1;
        }
    }
    rows
}

fn new_size(rows: &BasisRows) -> usize {
    rows.iter().flatten().map(|(c, _)| c + 1).max().unwrap_or(0)
}

pub(crate) fn rotate(problem: &ConicProblem, ranges: &[Option<Mat<f64>>]) -> Rotation {
    let basis: Vec<Option<BasisRows>> = problem
        .blocks
        .iter()
        .zip(ranges)
        .map(|(b, r)| r.as_ref().map(|u| basis_for(b.size, u)))
        .collect();
    let sizes: Vec<usize> = problem
        .blocks
        .iter()
        .zip(&basis)
        .map(|(b, p)| p.as_ref().map_or(b.size, new_size))
        .collect();
    let mut block_map = Vec::with_capacity(sizes.len());
    let mut blocks = Vec::new();
    for (b, &size) in problem.blocks.iter().zip(&sizes) {
        if size > 0 {
            block_map.push(Some(blocks.len()));
            blocks.push(Block { kind: b.kind, size });
        } else {
            block_map.push(None);
        }
    }

    let mut acc: BTreeMap<(usize, usize, usize, usize), f64> = BTreeMap::new();
    for e in &problem.entries {
        let Some(nb) = block_map[e.block] else { continue };
        match &basis[e.block] {
            None => *acc.entry((e.row, nb, e.i, e.j)).or_insert(0.0) += e.value,
            Some(p) => {
                for &(a, pa) in &p[e.i] {
                    for &(b, pb) in &p[e.j] {
                        let c = e.value * pa * pb;
                        if e.i == e.j && a > b {
                            // counted through the (b, a) term
                            continue;
                        }
                        let c = if e.i == e.j && a != b { 2.0 * c } else { c };
                        *acc.entry((e.row, nb, a.min(b), a.max(b))).or_insert(0.0) += c;
                    }
                }
            }
        }
    }
    let mut row_scale = vec![0.0f64; problem.nrows()];
    for e in &problem.entries {
        row_scale[e.row] = row_scale[e.row].max(e.value.abs());
    }
    let mut by_row: Vec<Vec<Entry>> = vec![Vec::new(); problem.nrows()];
    for ((row, block, i, j), value) in acc {
        if value.abs() > PRUNE_TOL * row_scale[row] {
            by_row[row].push(Entry { row, block, i, j, value });
        }
    }
    let mut row_map = Vec::with_capacity(problem.nrows());
    let mut rhs = Vec::new();
    let mut entries = Vec::new();
    let mut conflict = false;
    for (r, es) in by_row.into_iter().enumerate() {
        if es.is_empty() {
            conflict |= problem.rhs[r] != 0.0;
            row_map.push(None);
            continue;
        }
        let nr = rhs.len();
        row_map.push(Some(nr));
        rhs.push(problem.rhs[r]);
        entries.extend(es.into_iter().map(|e| Entry { row: nr, ..e }));
    }
    Rotation {
        problem: ConicProblem {
            blocks,
            entries,
            rhs,
            objective: Vec::new(),
        },
        basis,
        sizes,
        block_map,
        row_map,
        conflict,
    }
}

impl Rotation {
    /// Maps a solution back through `X = P Y P^T`.
    pub fn lift(&self, original: &ConicProblem, sol: ConicSolution) -> ConicSolution {
        let values = original
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                let inner = self.block_map[b].map(|nb| &sol.values[nb]);
                match (blk.kind, inner) {
                    (BlockKind::Free, Some(BlockValue::Free(v))) => BlockValue::Free(v.clone()),
                    (BlockKind::Free, _) => BlockValue::Free(vec![0.0; blk.size]),
                    (BlockKind::Psd, Some(BlockValue::Psd(y))) => BlockValue::Psd(match &self.basis[b] {
                        None => y.clone(),
                        Some(p) => {
                            let dense = Mat::from_fn(blk.size, self.sizes[b], |i, c| {
                                p[i].iter().find(|(k, _)| *k == c).map_or(0.0, |(_, v)| *v)
                            });
                            &dense * y * dense.transpose()
                        }
                    }),
                    (BlockKind::Psd, _) => BlockValue::Psd(Mat::zeros(blk.size, blk.size)),
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{solve, SolveStatus, SolverOptions};

    fn psd(row: usize, block: usize, i: usize, j: usize, value: f64) -> Entry {
        Entry { row, block, i, j, value }
    }

    #[test]
    fn rotation_preserves_constraint_values() {
        // X 3x3, rows: X00 + X11, X01, X22; rotate away u = (1, 1, 0)/sqrt2
        let p = ConicProblem {
            blocks: vec![Block { kind: BlockKind::Psd, size: 3 }],
            entries: vec![psd(0, 0, 0, 0, 1.0), psd(0, 0, 1, 1, 1.0), psd(1, 0, 0, 1, 1.0), psd(2, 0, 2, 2, 1.0)],
            rhs: vec![2.0, -1.0, 1.0],
            objective: vec![],
        };
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let u = Mat::from_fn(3, 1, |i, _| if i < 2 { h } else { 0.0 });
        let rot = rotate(&p, &[Some(u)]);
        assert_eq!(rot.problem.blocks[0].size, 2);
        // Y = I lifts to X = P P^T, which must satisfy the rotated rows exactly
        let y = vec![BlockValue::Psd(Mat::identity(2, 2))];
        let sol = ConicSolution {
            status: SolveStatus::Feasible,
            values: y.clone(),
            dual: vec![0.0; rot.problem.nrows()],
            primal_residual: 0.0,
            dual_residual: 0.0,
            iterations: 0,
            margin: None,
            certificate: None,
        };
        let lifted = rot.lift(&p, sol);
        let BlockValue::Psd(x) = &lifted.values[0] else { panic!() };
        assert!((x[(0, 0)] + x[(0, 1)]).abs() < 1e-14 && (x[(1, 1)] + x[(0, 1)]).abs() < 1e-14);
        let r_orig = crate::conic::primal_residual(&p, &lifted.values);
        let r_rot = crate::conic::primal_residual(&rot.problem, &y);
        let scale = |q: &ConicProblem| 1.0 + q.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((r_orig * scale(&p) - r_rot * scale(&rot.problem)).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_face_is_found_and_solved() {
        // X00 + 2 X01 + X11 = 0 forces X (1, 1)^T = 0, which no diagonal certificate shows
        let p = ConicProblem {
            blocks: vec![Block { kind: BlockKind::Psd, size: 3 }],
            entries: vec![
                psd(0, 0, 0, 0, 1.0),
                psd(0, 0, 0, 1, 2.0),
                psd(0, 0, 1, 1, 1.0),
                psd(1, 0, 2, 2, 1.0),
                psd(2, 0, 0, 0, 1.0),
            ],
            rhs: vec![0.0, 1.0, 1.0],
            objective: vec![],
        };
        let s = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(s.status, SolveStatus::Feasible, "{:?}", s.status);
        assert!(s.primal_residual < 1e-9);
        let BlockValue::Psd(x) = &s.values[0] else { panic!() };
        assert!((x[(0, 0)] - 1.0).abs() < 1e-9 && (x[(0, 1)] + 1.0).abs() < 1e-9);
    }
}
