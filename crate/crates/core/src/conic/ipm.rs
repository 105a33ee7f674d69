//! Infeasible-start primal-dual interior-point method for problems over free
//! scalars and PSD blocks. HKM search direction with a Mehrotra
//! predictor-corrector; the Schur complement and free columns are solved
//! together as one symmetric indefinite system.

use std::collections::BTreeMap;

use faer::linalg::matmul::matmul;
use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::linalg::triangular_inverse::invert_lower_triangular;
use faer::{Accum, Mat, MatRef, Par, Side};

use super::problem::{BlockKind, ConicProblem};

/// Cap on iterative refinement sweeps per saddle solve.
const MAX_REFINE: usize = 50;
/// Relative diagonal shift of the factored saddle matrix. Refinement runs
/// against the unshifted matrix, so this only needs to keep the pivots finite.
const REGULARIZATION: f64 = 1e-14;

#[derive(Clone, Copy, Debug)]
pub(crate) struct StopRule {
    /// Stop once the primal residual is small and this free scalar is below the bound.
    pub free_below: Option<(usize, f64)>,
    /// Stop once the dual residual is small and the dual objective exceeds this value.
    pub dual_above: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Outcome {
    Converged,
    PrimalStop,
    DualStop,
    IterationLimit,
    Failed,
}

/// Final iterate in the problem's own (unscaled) units.
#[derive(Clone, Debug)]
pub(crate) struct Iterate {
    pub free: Vec<f64>,
    pub psd: Vec<Mat<f64>>,
    pub y: Vec<f64>,
    pub iterations: usize,
    pub dual_residual: f64,
    pub dual_objective: f64,
    pub outcome: Outcome,
}

struct PsdData {
    n: usize,
    /// Per touching row: global row index and upper-triangle entries `(p, q, v)`.
    rows: Vec<(usize, Vec<(usize, usize, f64)>)>,
    c: Mat<f64>,
}

struct Data {
    m: usize,
    /// Per free column: `(row, value)`.
    af: Vec<Vec<(usize, f64)>>,
    cf: Vec<f64>,
    psd: Vec<PsdData>,
    b: Vec<f64>,
}

struct Scaling {
    rows: Vec<f64>,
    free: Vec<f64>,
    psd: Vec<f64>,
}

fn mm(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut c = Mat::zeros(a.nrows(), b.ncols());
    matmul(c.as_mut(), Accum::Replace, a, b, 1.0, Par::Seq);
    c
}

fn sym(a: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

/// `sym(X D Z)`.
fn sym3(x: &Mat<f64>, d: &Mat<f64>, z: &Mat<f64>) -> Mat<f64> {
    sym(&mm(mm(x.as_ref(), d.as_ref()).as_ref(), z.as_ref()))
}

fn frob_dot(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)] * b[(i, j)];
        }
    }
    s
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Inner product of an upper-triangle entry list with a symmetric matrix.
fn entry_dot(entries: &[(usize, usize, f64)], x: &Mat<f64>) -> f64 {
    entries.iter().map(|&(p, q, v)| v * x[(p, q)]).sum()
}

fn add_entry_sym(out: &mut Mat<f64>, p: usize, q: usize, w: f64) {
    if p == q {
        out[(p, p)] += w;
    } else {
        out[(p, q)] += 0.5 * w;
        out[(q, p)] += 0.5 * w;
    }
}

impl Data {
    fn build(problem: &ConicProblem) -> Data {
        let mut layout = Vec::with_capacity(problem.blocks.len());
        let mut nf = 0;
        let mut np = 0;
        for b in &problem.blocks {
            match b.kind {
                BlockKind::Free => {
                    layout.push((BlockKind::Free, nf));
                    nf += b.size;
                }
                BlockKind::Psd => {
                    layout.push((BlockKind::Psd, np));
                    np += 1;
                }
            }
        }
        let mut af = vec![Vec::new(); nf];
        let mut psd_rows: Vec<BTreeMap<usize, Vec<(usize, usize, f64)>>> = vec![BTreeMap::new(); np];
        for e in &problem.entries {
            match layout[e.block] {
                (BlockKind::Free, off) => af[off + e.i].push((e.row, e.value)),
                (BlockKind::Psd, k) => psd_rows[k].entry(e.row).or_default().push((e.i, e.j, e.value)),
            }
        }
        let mut cf = vec![0.0; nf];
        let mut psd: Vec<PsdData> = problem
            .blocks
            .iter()
            .filter(|b| b.kind == BlockKind::Psd)
            .zip(psd_rows)
            .map(|(b, rows)| PsdData {
                n: b.size,
                rows: rows.into_iter().collect(),
                c: Mat::zeros(b.size, b.size),
            })
            .collect();
        for o in &problem.objective {
            match layout[o.block] {
                (BlockKind::Free, off) => cf[off + o.i] += o.value,
                (BlockKind::Psd, k) => add_entry_sym(&mut psd[k].c, o.i, o.j, o.value),
            }
        }
        Data {
            m: problem.nrows(),
            af,
            cf,
            psd,
            b: problem.rhs.clone(),
        }
    }

    /// Ruiz-style equilibration. PSD blocks get one scalar each so the cone is preserved.
    fn equilibrate(&mut self) -> Scaling {
        let mut s = Scaling {
            rows: vec![1.0; self.m],
            free: vec![1.0; self.af.len()],
            psd: vec![1.0; self.psd.len()],
        };
        for _ in 0..12 {
            let mut rn = vec![0.0f64; self.m];
            let mut fnorm = vec![0.0f64; self.af.len()];
            let mut pnorm = vec![0.0f64; self.psd.len()];
            for (j, col) in self.af.iter().enumerate() {
                for &(r, v) in col {
                    let a = (v * s.rows[r] * s.free[j]).abs();
                    rn[r] = rn[r].max(a);
                    fnorm[j] = fnorm[j].max(a);
                }
            }
            for (k, blk) in self.psd.iter().enumerate() {
                for (r, es) in &blk.rows {
                    for &(_, _, v) in es {
                        let a = (v * s.rows[*r] * s.psd[k]).abs();
                        rn[*r] = rn[*r].max(a);
                        pnorm[k] = pnorm[k].max(a);
                    }
                }
            }
            let upd = |d: &mut f64, n: f64| {
                if n > 0.0 {
                    *d /= n.sqrt();
                }
            };
            s.rows.iter_mut().zip(&rn).for_each(|(d, &n)| upd(d, n));
            s.free.iter_mut().zip(&fnorm).for_each(|(d, &n)| upd(d, n));
            s.psd.iter_mut().zip(&pnorm).for_each(|(d, &n)| upd(d, n));
        }
        for (j, col) in self.af.iter_mut().enumerate() {
            for (r, v) in col.iter_mut() {
                *v *= s.rows[*r] * s.free[j];
            }
            self.cf[j] *= s.free[j];
        }
        for (k, blk) in self.psd.iter_mut().enumerate() {
            for (r, es) in blk.rows.iter_mut() {
                for e in es.iter_mut() {
                    e.2 *= s.rows[*r] * s.psd[k];
                }
            }
            let d = s.psd[k];
            blk.c = Mat::from_fn(blk.n, blk.n, |i, j| blk.c[(i, j)] * d);
        }
        for (r, b) in self.b.iter_mut().enumerate() {
            *b *= s.rows[r];
        }
        s
    }

    fn apply_a(&self, xf: &[f64], xs: &[Mat<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (col, &x) in self.af.iter().zip(xf) {
            for &(r, v) in col {
                out[r] += v * x;
            }
        }
        for (blk, x) in self.psd.iter().zip(xs) {
            for (r, es) in &blk.rows {
                out[*r] += entry_dot(es, x);
            }
        }
        out
    }

    fn apply_at_free(&self, y: &[f64]) -> Vec<f64> {
        self.af
            .iter()
            .map(|col| col.iter().map(|&(r, v)| v * y[r]).sum())
            .collect()
    }

    fn apply_at_psd(&self, k: usize, y: &[f64]) -> Mat<f64> {
        let blk = &self.psd[k];
        let mut out = Mat::zeros(blk.n, blk.n);
        for (r, es) in &blk.rows {
            for &(p, q, v) in es {
                add_entry_sym(&mut out, p, q, v * y[*r]);
            }
        }
        out
    }

    /// HKM Schur complement `M[i][j] = sum_k tr(A_i X_k A_j Z_k)`.
    fn schur(&self, xs: &[Mat<f64>], zs: &[Mat<f64>]) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.m, self.m);
        for (k, blk) in self.psd.iter().enumerate() {
            let n = blk.n;
            let (x, z) = (&xs[k], &zs[k]);
            let mut slot = vec![usize::MAX; n];
            let mut support = Vec::new();
            for (rj, ej) in &blk.rows {
                support.clear();
                for &(p, q, _) in ej {
                    for t in [p, q] {
                        if slot[t] == usize::MAX {
                            slot[t] = support.len();
                            support.push(t);
                        }
                    }
                }
                let s = support.len();
                // (A_j Z) restricted to its nonzero rows
                let mut az = Mat::<f64>::zeros(s, n);
                for &(p, q, v) in ej {
                    let (wp, wq) = if p == q { (v, 0.0) } else { (0.5 * v, 0.5 * v) };
                    for c in 0..n {
                        az[(slot[p], c)] += wp * z[(q, c)];
                    }
                    if wq != 0.0 {
                        for c in 0..n {
                            az[(slot[q], c)] += wq * z[(p, c)];
                        }
                    }
                }
                let xp = Mat::from_fn(n, s, |i, c| x[(i, support[c])]);
                let t = mm(xp.as_ref(), az.as_ref());
                for &p in &support {
                    slot[p] = usize::MAX;
                }
                for (ri, ei) in &blk.rows {
                    let mut acc = 0.0;
                    for &(p, q, v) in ei {
                        acc += if p == q {
                            v * t[(p, p)]
                        } else {
                            0.5 * v * (t[(p, q)] + t[(q, p)])
                        };
                    }
                    m[(*ri, *rj)] += acc;
                }
            }
        }
        for i in 0..self.m {
            for j in 0..i {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

/// `[M + dI, Af; Af^T, -dI]` factored once per iteration, solved with refinement
/// against the unregularized matrix.
struct Saddle {
    k: Mat<f64>,
    fact: faer::linalg::solvers::Lblt<f64>,
}

impl Saddle {
    fn new(data: &Data, schur: Mat<f64>) -> Saddle {
        let m = data.m;
        let nf = data.af.len();
        let dim = m + nf;
        let mut k = Mat::<f64>::zeros(dim, dim);
        let mut maxdiag = 1.0f64;
        for j in 0..m {
            for i in 0..m {
                k[(i, j)] = schur[(i, j)];
            }
            maxdiag = maxdiag.max(schur[(j, j)].abs());
        }
        for (c, col) in data.af.iter().enumerate() {
            for &(r, v) in col {
                k[(r, m + c)] += v;
                k[(m + c, r)] += v;
            }
        }
        let delta = REGULARIZATION * maxdiag;
        let mut reg = k.clone();
        for i in 0..dim {
            reg[(i, i)] += if i < m { delta } else { -delta };
        }
        let fact = reg.lblt(Side::Lower);
        Saddle { k, fact }
    }

    /// Refines until the residual of the unregularized system stops shrinking.
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let dim = rhs.len();
        let r = Mat::from_fn(dim, 1, |i, _| rhs[i]);
        let residual = |sol: &Mat<f64>| {
            let ks = mm(self.k.as_ref(), sol.as_ref());
            Mat::from_fn(dim, 1, |i, _| r[(i, 0)] - ks[(i, 0)])
        };
        let norm = |m: &Mat<f64>| (0..dim).map(|i| m[(i, 0)].powi(2)).sum::<f64>().sqrt();
        let target = 1e-15 * norm(&r);
        let mut sol = self.fact.solve(&r);
        let mut res = residual(&sol);
        let mut err = norm(&res);
        for _ in 0..MAX_REFINE {
            if err <= target {
                break;
            }
            let corr = self.fact.solve(&res);
            let next = Mat::from_fn(dim, 1, |i, _| sol[(i, 0)] + corr[(i, 0)]);
            let next_res = residual(&next);
            let next_err = norm(&next_res);
            if next_err >= err {
                break;
            }
            let slow = next_err > 0.9 * err;
            (sol, res, err) = (next, next_res, next_err);
            if slow {
                break;
            }
        }
        (0..dim).map(|i| sol[(i, 0)]).collect()
    }
}

/// Largest `a` with `X + a dX` PSD (infinite when `dX` is PSD).
fn max_step(x: &Mat<f64>, dx: &Mat<f64>) -> f64 {
    let n = x.nrows();
    let Ok(llt) = x.llt(Side::Lower) else {
        return 0.0;
    };
    let mut linv = Mat::<f64>::zeros(n, n);
    invert_lower_triangular(linv.as_mut(), llt.L(), Par::Seq);
    let w = mm(mm(linv.as_ref(), dx.as_ref()).as_ref(), linv.transpose());
    let w = sym(&w);
    match w.self_adjoint_eigenvalues(Side::Lower) {
        Ok(ev) => {
            let lo = ev.first().copied().unwrap_or(0.0);
            if lo >= 0.0 {
                f64::INFINITY
            } else {
                -1.0 / lo
            }
        }
        Err(_) => 0.0,
    }
}

struct Direction {
    dxf: Vec<f64>,
    dx: Vec<Mat<f64>>,
    dy: Vec<f64>,
    ds: Vec<Mat<f64>>,
}

pub(crate) fn run(problem: &ConicProblem, tol: f64, max_iter: usize, stop: StopRule) -> Iterate {
    let mut data = Data::build(problem);
    let b_norm = norm2(&data.b);
    let c_norm = {
        let mut s: f64 = data.cf.iter().map(|v| v * v).sum();
        for blk in &data.psd {
            s += frob_dot(&blk.c, &blk.c);
        }
        s.sqrt()
    };
    let sc = data.equilibrate();
    let m = data.m;
    let nf = data.af.len();
    let nblocks = data.psd.len();
    let total_dim: usize = data.psd.iter().map(|b| b.n).sum::<usize>().max(1);

    // starting point in the spirit of SDPT3
    let mut xs = Vec::with_capacity(nblocks);
    let mut ss = Vec::with_capacity(nblocks);
    for blk in &data.psd {
        let n = blk.n as f64;
        let mut an = vec![0.0f64; m];
        for (r, es) in &blk.rows {
            an[*r] = es.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt();
        }
        let mut xi = 10.0f64.max(n.sqrt());
        let mut eta = 10.0f64.max(n.sqrt());
        for (r, _) in &blk.rows {
            xi = xi.max(n * (1.0 + data.b[*r].abs()) / (1.0 + an[*r]));
            eta = eta.max(an[*r]);
        }
        eta = eta.max(frob_dot(&blk.c, &blk.c).sqrt());
        xs.push(Mat::from_fn(blk.n, blk.n, |i, j| if i == j { xi } else { 0.0 }));
        ss.push(Mat::from_fn(blk.n, blk.n, |i, j| if i == j { eta } else { 0.0 }));
    }
    let mut xf = vec![0.0; nf];
    let mut y = vec![0.0; m];

    let unscale_free = |xf: &[f64], j: usize| xf[j] * sc.free[j];
    let mut outcome = Outcome::IterationLimit;
    let mut iterations = 0;
    let (mut relp, mut reld, mut dobj): (f64, f64, f64);
    let mut stalls = 0;
    let trace = std::env::var_os("SAMPCERT_TRACE").is_some();
    let mut best_mu = f64::INFINITY;

    loop {
        // residuals
        let ax = data.apply_a(&xf, &xs);
        let rp: Vec<f64> = (0..m).map(|r| data.b[r] - ax[r]).collect();
        let atf = data.apply_at_free(&y);
        let rdf: Vec<f64> = (0..nf).map(|j| data.cf[j] - atf[j]).collect();
        let rd: Vec<Mat<f64>> = (0..nblocks)
            .map(|k| {
                let at = data.apply_at_psd(k, &y);
                let blk = &data.psd[k];
                Mat::from_fn(blk.n, blk.n, |i, j| blk.c[(i, j)] - at[(i, j)] - ss[k][(i, j)])
            })
            .collect();
        let mu = (0..nblocks).map(|k| frob_dot(&xs[k], &ss[k])).sum::<f64>() / total_dim as f64;

        // metrics in original units
        relp = norm2(&rp.iter().zip(&sc.rows).map(|(v, d)| v / d).collect::<Vec<_>>()) / (1.0 + b_norm);
        let mut dn: f64 = rdf.iter().zip(&sc.free).map(|(v, d)| (v / d).powi(2)).sum();
        for k in 0..nblocks {
            dn += frob_dot(&rd[k], &rd[k]) / sc.psd[k].powi(2);
        }
        reld = dn.sqrt() / (1.0 + c_norm);
        let pobj: f64 = data.cf.iter().zip(&xf).map(|(c, x)| c * x).sum::<f64>()
            + (0..nblocks).map(|k| frob_dot(&data.psd[k].c, &xs[k])).sum::<f64>();
        dobj = data.b.iter().zip(&y).map(|(b, y)| b * y).sum();
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());

        if trace {
            eprintln!(
                "ipm {iterations:3} relp {relp:.2e} reld {reld:.2e} gap {gap:.2e} mu {mu:.2e} pobj {pobj:+.6e} dobj {dobj:+.6e}"
            );
        }
        if let Some((j, bound)) = stop.free_below {
            if relp <= tol && unscale_free(&xf, j) <= bound {
                outcome = Outcome::PrimalStop;
                break;
            }
        }
        if let Some(bound) = stop.dual_above {
            if reld <= tol && dobj > bound {
                outcome = Outcome::DualStop;
                break;
            }
        }
        if relp <= tol && reld <= tol && gap <= tol {
            outcome = Outcome::Converged;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        if mu < best_mu * 0.999 {
            best_mu = mu;
            stalls = 0;
        } else {
            stalls += 1;
            if stalls > 15 {
                outcome = Outcome::Failed;
                break;
            }
        }
        iterations += 1;

        let mut zs = Vec::with_capacity(nblocks);
        for s in &ss {
            match s.llt(Side::Lower) {
                Ok(f) => zs.push(sym(&f.inverse())),
                Err(_) => {
                    outcome = Outcome::Failed;
                    break;
                }
            }
        }
        if zs.len() != nblocks {
            break;
        }
        let saddle = Saddle::new(&data, data.schur(&xs, &zs));

        let direction = |rc: &[Mat<f64>]| -> Direction {
            let mut h = rp.clone();
            let mut tmp = Vec::with_capacity(nblocks);
            for k in 0..nblocks {
                let t = sym3(&xs[k], &rd[k], &zs[k]);
                tmp.push(Mat::from_fn(t.nrows(), t.ncols(), |i, j| rc[k][(i, j)] - t[(i, j)]));
            }
            let at = data.apply_a(&vec![0.0; nf], &tmp);
            for r in 0..m {
                h[r] -= at[r];
            }
            let mut rhs = h;
            rhs.extend_from_slice(&rdf);
            let sol = saddle.solve(&rhs);
            let dy = sol[..m].to_vec();
            let dxf = sol[m..].to_vec();
            let mut ds = Vec::with_capacity(nblocks);
            let mut dx = Vec::with_capacity(nblocks);
            for k in 0..nblocks {
                let at = data.apply_at_psd(k, &dy);
                let dsk = Mat::from_fn(at.nrows(), at.ncols(), |i, j| rd[k][(i, j)] - at[(i, j)]);
                let t = sym3(&xs[k], &dsk, &zs[k]);
                dx.push(Mat::from_fn(t.nrows(), t.ncols(), |i, j| rc[k][(i, j)] - t[(i, j)]));
                ds.push(dsk);
            }
            Direction { dxf, dx, dy, ds }
        };
        let steps = |d: &Direction| -> (f64, f64) {
            let mut ap = f64::INFINITY;
            let mut ad = f64::INFINITY;
            for k in 0..nblocks {
                ap = ap.min(max_step(&xs[k], &d.dx[k]));
                ad = ad.min(max_step(&ss[k], &d.ds[k]));
            }
            (ap, ad)
        };

        // predictor
        let rc_aff: Vec<Mat<f64>> = xs.iter().map(|x| Mat::from_fn(x.nrows(), x.ncols(), |i, j| -x[(i, j)])).collect();
        let pred = direction(&rc_aff);
        let (ap, ad) = steps(&pred);
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let mut mu_aff = 0.0;
        for k in 0..nblocks {
            let n = xs[k].nrows();
            let xa = Mat::from_fn(n, n, |i, j| xs[k][(i, j)] + ap * pred.dx[k][(i, j)]);
            let sa = Mat::from_fn(n, n, |i, j| ss[k][(i, j)] + ad * pred.ds[k][(i, j)]);
            mu_aff += frob_dot(&xa, &sa);
        }
        mu_aff /= total_dim as f64;
        let sigma = if mu > 0.0 { (mu_aff / mu).clamp(0.0, 1.0).powi(3) } else { 0.0 };

        // corrector
        let rc: Vec<Mat<f64>> = (0..nblocks)
            .map(|k| {
                let second = sym3(&pred.dx[k], &pred.ds[k], &zs[k]);
                let n = xs[k].nrows();
                Mat::from_fn(n, n, |i, j| {
                    sigma * mu * zs[k][(i, j)] - xs[k][(i, j)] - second[(i, j)]
                })
            })
            .collect();
        let corr = direction(&rc);
        let (ap_max, ad_max) = steps(&corr);
        let gamma = 0.9 + 0.09 * ap.min(ad);
        let ap = (gamma * ap_max).min(1.0);
        let ad = (gamma * ad_max).min(1.0);
        if trace {
            let ax = data.apply_a(&corr.dxf, &corr.dx);
            let err: f64 = (0..m).map(|r| (ax[r] - rp[r]).powi(2)).sum::<f64>().sqrt();
            eprintln!("    step ap {ap:.3e} ad {ad:.3e} sigma {sigma:.2e} newton-primal-err {err:.2e} |rp| {:.2e}", norm2(&rp));
        }
        if ap < 1e-12 && ad < 1e-12 {
            outcome = Outcome::Failed;
            break;
        }
        for j in 0..nf {
            xf[j] += ap * corr.dxf[j];
        }
        for r in 0..m {
            y[r] += ad * corr.dy[r];
        }
        for k in 0..nblocks {
            let n = xs[k].nrows();
            xs[k] = sym(&Mat::from_fn(n, n, |i, j| xs[k][(i, j)] + ap * corr.dx[k][(i, j)]));
            ss[k] = sym(&Mat::from_fn(n, n, |i, j| ss[k][(i, j)] + ad * corr.ds[k][(i, j)]));
        }
    }

    Iterate {
        free: xf.iter().zip(&sc.free).map(|(x, d)| x * d).collect(),
        psd: xs
            .iter()
            .zip(&sc.psd)
            .map(|(x, d)| Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * d))
            .collect(),
        y: y.iter().zip(&sc.rows).map(|(v, d)| v * d).collect(),
        iterations,

        dual_residual: reld,
        dual_objective: dobj,
        outcome,
    }
}
