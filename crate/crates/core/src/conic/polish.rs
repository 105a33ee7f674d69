//! Affine repair of a nearly feasible point.
//!
//! The interior-point method sometimes stalls with a healthy eigenvalue margin
//! but a primal residual well above tolerance. Projecting the point onto the
//! affine constraint set with the minimum-norm correction then usually leaves
//! every block positive definite, since the correction is of the same order as
//! the residual.

use faer::Mat;

use super::{BlockKind, BlockValue, ConicProblem};

const PASSES: usize = 3;
const RANK_TOL: f64 = 1e-12;

/// Coordinate of every unknown: free scalars and the upper triangle of each PSD block.
struct Coords {
    offset: Vec<usize>,
    total: usize,
}

impl Coords {
    fn new(problem: &ConicProblem) -> Coords {
        let mut offset = Vec::with_capacity(problem.blocks.len());
        let mut total = 0;
        for b in &problem.blocks {
            offset.push(total);
            total += match b.kind {
                BlockKind::Free => b.size,
                BlockKind::Psd => b.size * (b.size + 1) / 2,
            };
        }
        Coords { offset, total }
    }

    fn index(&self, problem: &ConicProblem, block: usize, i: usize, j: usize) -> usize {
        match problem.blocks[block].kind {
            BlockKind::Free => self.offset[block] + i,
            // column-major upper triangle
            BlockKind::Psd => self.offset[block] + j * (j + 1) / 2 + i,
        }
    }
}

/// Returns the projected values, or `None` when the SVD fails.
pub(crate) fn project(problem: &ConicProblem, values: &[BlockValue]) -> Option<Vec<BlockValue>> {
    let coords = Coords::new(problem);
    let m = problem.nrows();
    let mut x = vec![0.0; coords.total];
    for (b, v) in values.iter().enumerate() {
        match v {
            BlockValue::Free(f) => {
                for (i, &fi) in f.iter().enumerate() {
                    x[coords.index(problem, b, i, 0)] = fi;
                }
            }
            BlockValue::Psd(mat) => {
                for j in 0..mat.ncols() {
                    for i in 0..=j {
                        x[coords.index(problem, b, i, j)] = 0.5 * (mat[(i, j)] + mat[(j, i)]);
                    }
                }
            }
        }
    }
    let mut a = Mat::<f64>::zeros(m, coords.total);
    for e in &problem.entries {
        a[(e.row, coords.index(problem, e.block, e.i, e.j))] += e.value;
    }
    let svd = a.thin_svd().ok()?;
    let s = svd.S().column_vector();
    let smax = (0..s.nrows()).map(|k| s[k]).fold(0.0, f64::max);
    let (u, v) = (svd.U(), svd.V());
    for _ in 0..PASSES {
        let mut r = problem.rhs.clone();
        for e in &problem.entries {
            r[e.row] -= e.value * x[coords.index(problem, e.block, e.i, e.j)];
        }
        for k in 0..s.nrows() {
            if s[k] <= RANK_TOL * smax {
                continue;
            }
            let w = (0..m).map(|row| u[(row, k)] * r[row]).sum::<f64>() / s[k];
            for (c, xc) in x.iter_mut().enumerate() {
                *xc += v[(c, k)] * w;
            }
        }
    }
    Some(
        problem
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| match blk.kind {
                BlockKind::Free => BlockValue::Free((0..blk.size).map(|i| x[coords.index(problem, b, i, 0)]).collect()),
                BlockKind::Psd => BlockValue::Psd(Mat::from_fn(blk.size, blk.size, |i, j| {
                    x[coords.index(problem, b, i.min(j), i.max(j))]
                })),
            })
            .collect(),
    )
}
