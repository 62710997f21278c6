//! Block Gauss-Newton refinement of frames `G_i`.
//!
//! Steps `E_i` are stacked as `x = [vec(E_1); ...; vec(E_n)]` with column-major
//! `vec`. With `A_i = G_i^{-1}`, `P_ij = A_i G_j` and `R_ij = G_ij - P_ij`, the
//! linearized edge residual is `R_ij - A_i E_j + A_i E_i P_ij`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SyncError};
use crate::graph::FrameGraph;
use crate::linalg::{self, kron, vec_cols};
use crate::matrices::{BlockAccumulator, BlockMatrix, EdgeTransforms, StoragePolicy};
use crate::objective;
use crate::sync_direct::{FrameSolution, Method};

/// Normal equations `H_GN x = -c_GN` of one Gauss-Newton step.
#[derive(Clone, Debug)]
pub struct GNSystem {
    pub n: usize,
    pub d: usize,
    /// `nd^2 x nd^2`, blocks of size `d^2`.
    pub h: BlockMatrix,
    /// Gradient of the objective at the current frames.
    pub c: DVector<f64>,
}

/// Entry-wise residual weights `w`; the objective becomes `Σ ½ ||w ⊙ R_ij||^2`.
pub type ResidualWeights = DMatrix<f64>;

fn inverses(frames: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    objective::frame_inverses(frames)
}

/// Assembles `H_GN` and `c_GN` from the closed-form Kronecker blocks.
pub fn build_gn_system(g: &FrameGraph, t: &EdgeTransforms, frames: &[DMatrix<f64>]) -> Result<GNSystem> {
    let n = g.n();
    let d = t.d();
    let d2 = d * d;
    let inv = inverses(frames)?;
    let eye = DMatrix::<f64>::identity(d, d);
    let mut acc = BlockAccumulator::new(n, d2);
    let mut c = DVector::zeros(n * d2);
    for (i, j) in g.edges() {
        let a = &inv[i];
        let ata = a.tr_mul(a);
        let p = a * &frames[j];
        let r = t.require(i, j)? - &p;
        acc.add(i, i, &kron(&(&p * p.transpose()), &ata));
        acc.add(j, j, &kron(&eye, &ata));
        let off = kron(&p, &ata);
        acc.add(i, j, &-&off);
        acc.add(j, i, &-off.transpose());
        let mut ci = c.rows_mut(i * d2, d2);
        ci += vec_cols(&(a.tr_mul(&r) * p.transpose()));
        let mut cj = c.rows_mut(j * d2, d2);
        cj -= vec_cols(&a.tr_mul(&r));
    }
    Ok(GNSystem { n, d, h: acc.finish(StoragePolicy::Auto), c })
}

/// Same system assembled from explicit edge Jacobians, with optional residual
/// weights.
pub fn build_gn_system_weighted(
    g: &FrameGraph,
    t: &EdgeTransforms,
    frames: &[DMatrix<f64>],
    weights: Option<&ResidualWeights>,
) -> Result<GNSystem> {
    let n = g.n();
    let d = t.d();
    let d2 = d * d;
    let inv = inverses(frames)?;
    let eye = DMatrix::<f64>::identity(d, d);
    let w = weights.map(vec_cols).unwrap_or_else(|| DVector::from_element(d2, 1.0));
    let wdiag = DMatrix::from_diagonal(&w);
    let mut acc = BlockAccumulator::new(n, d2);
    let mut c = DVector::zeros(n * d2);
    for (i, j) in g.edges() {
        let a = &inv[i];
        let p = a * &frames[j];
        let r = vec_cols(&(t.require(i, j)? - &p)).component_mul(&w);
        let j_src = &wdiag * kron(&p.transpose(), a);
        let j_tgt = &wdiag * -kron(&eye, a);
        acc.add(i, i, &j_src.tr_mul(&j_src));
        acc.add(j, j, &j_tgt.tr_mul(&j_tgt));
        acc.add(i, j, &j_src.tr_mul(&j_tgt));
        acc.add(j, i, &j_tgt.tr_mul(&j_src));
        let mut ci = c.rows_mut(i * d2, d2);
        ci += j_src.tr_mul(&r);
        let mut cj = c.rows_mut(j * d2, d2);
        cj += j_tgt.tr_mul(&r);
    }
    Ok(GNSystem { n, d, h: acc.finish(StoragePolicy::Auto), c })
}

/// `Σ ½ ||w ⊙ (G_ij - G_i^{-1} G_j)||_F^2`.
pub fn weighted_g(
    g: &FrameGraph,
    t: &EdgeTransforms,
    frames: &[DMatrix<f64>],
    weights: Option<&ResidualWeights>,
) -> Result<f64> {
    let Some(w) = weights else {
        return objective::objective_g(g, t, frames);
    };
    let inv = inverses(frames)?;
    let mut total = 0.0;
    for (i, j) in g.edges() {
        total += 0.5 * (t.require(i, j)? - &inv[i] * &frames[j]).component_mul(w).norm_squared();
    }
    Ok(total)
}

/// Objective of the linearized residuals at steps `E_i`.
pub fn linearized_g(
    g: &FrameGraph,
    t: &EdgeTransforms,
    frames: &[DMatrix<f64>],
    steps: &[DMatrix<f64>],
) -> Result<f64> {
    let inv = inverses(frames)?;
    let mut total = 0.0;
    for (i, j) in g.edges() {
        let a = &inv[i];
        let p = a * &frames[j];
        let r = t.require(i, j)? - &p - a * &steps[j] + a * &steps[i] * &p;
        total += 0.5 * r.norm_squared();
    }
    Ok(total)
}

/// Indices of `vec(E_i)` entries kept when the last row of every `E_i` is
/// fixed at zero.
pub fn affine_mask_indices(n: usize, dim: usize) -> Vec<usize> {
    let d2 = dim * dim;
    (0..n)
        .flat_map(|i| (0..dim).flat_map(move |c| (0..dim - 1).map(move |r| i * d2 + c * dim + r)))
        .collect()
}

/// Selector `X` with orthonormal columns mapping reduced variables into the
/// full step space. Every reconstructed `E_i` has a zero last row.
pub fn affine_mask_selector(n: usize, dim: usize) -> DMatrix<f64> {
    let kept = affine_mask_indices(n, dim);
    let mut x = DMatrix::zeros(n * dim * dim, kept.len());
    for (col, &row) in kept.iter().enumerate() {
        x[(row, col)] = 1.0;
    }
    x
}

/// Columns `vec(M G_i)` stacked over frames for a basis of `M`; these span
/// the gauge directions of global left multiplication. With `affine`, `M` is
/// restricted to a zero last row and the result is expressed in the reduced
/// coordinates of [`affine_mask_indices`].
pub fn gauge_basis(frames: &[DMatrix<f64>], affine: bool) -> DMatrix<f64> {
    let n = frames.len();
    let d = frames.first().map_or(0, |f| f.nrows());
    let d2 = d * d;
    let rows_m = if affine { d - 1 } else { d };
    let mut cols = Vec::new();
    for c in 0..d {
        for r in 0..rows_m {
            let mut m = DMatrix::zeros(d, d);
            m[(r, c)] = 1.0;
            let mut v = DVector::zeros(n * d2);
            for (i, f) in frames.iter().enumerate() {
                v.rows_mut(i * d2, d2).copy_from(&vec_cols(&(&m * f)));
            }
            cols.push(v);
        }
    }
    let full = DMatrix::from_columns(&cols);
    if affine {
        let kept = affine_mask_indices(n, d);
        DMatrix::from_fn(kept.len(), full.ncols(), |r, c| full[(kept[r], c)])
    } else {
        full
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LinearSolver {
    /// Dense pseudo-inverse up to [`DENSE_SOLVE_LIMIT`] unknowns, preconditioned CG beyond.
    #[default]
    Auto,
    Dense,
    ConjugateGradient,
}

/// Largest system solved with a dense eigendecomposition under [`LinearSolver::Auto`].
pub const DENSE_SOLVE_LIMIT: usize = 4000;

/// Minimum-norm solution of `h x = rhs` for symmetric PSD `h` whose kernel is
/// spanned by `kernel` (used by the iterative path only).
pub fn solve_psd(
    h: &DMatrix<f64>,
    rhs: &DVector<f64>,
    kernel: Option<&DMatrix<f64>>,
    solver: LinearSolver,
) -> Result<DVector<f64>> {
    let dense = match solver {
        LinearSolver::Dense => true,
        LinearSolver::ConjugateGradient => false,
        LinearSolver::Auto => h.nrows() <= DENSE_SOLVE_LIMIT,
    };
    if dense {
        return Ok(linalg::symmetric_pinv_solve(h, rhs, 1e-10));
    }
    let q = kernel.map(|k| k.clone().qr().q());
    let project = |v: &mut DVector<f64>| {
        if let Some(q) = &q {
            let coef = q.tr_mul(v);
            *v -= q * coef;
        }
    };
    let mut b = rhs.clone();
    project(&mut b);
    let mut x = preconditioned_cg(h, &b, 1e-12, 10 * h.nrows().max(10))?;
    project(&mut x);
    Ok(x)
}

fn preconditioned_cg(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64, max_iters: usize) -> Result<DVector<f64>> {
    let dim = b.len();
    let bnorm = b.norm();
    let mut x = DVector::zeros(dim);
    if bnorm == 0.0 {
        return Ok(x);
    }
    let diag: DVector<f64> = a.diagonal().map(|v| if v.abs() > 0.0 { 1.0 / v } else { 1.0 });
    let mut r = b.clone();
    let mut z = r.component_mul(&diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iters {
        let ap = a * &p;
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        if r.norm() <= tol * bnorm {
            return Ok(x);
        }
        z = r.component_mul(&diag);
        let rz_next = r.dot(&z);
        p = &z + &p * (rz_next / rz);
        rz = rz_next;
    }
    if (b - a * &x).norm() <= 1e-8 * bnorm {
        return Ok(x);
    }
    Err(SyncError::NoConvergence { what: "preconditioned conjugate gradient", iterations: max_iters })
}

fn unpack_steps(x: &DVector<f64>, n: usize, d: usize) -> Vec<DMatrix<f64>> {
    let d2 = d * d;
    (0..n).map(|i| linalg::unvec(x.rows(i * d2, d2).as_slice(), d, d)).collect()
}

/// Steps `E_i` from the minimum-norm solution of `H_GN x = -c_GN`.
pub fn gn_step(sys: &GNSystem, frames: &[DMatrix<f64>], solver: LinearSolver) -> Result<Vec<DMatrix<f64>>> {
    let kernel = gauge_basis(frames, false);
    let x = solve_psd(&sys.h.to_dense(), &-&sys.c, Some(&kernel), solver)?;
    Ok(unpack_steps(&x, sys.n, sys.d))
}

/// Step restricted to `E_i` with zero last row.
pub fn gn_step_masked(sys: &GNSystem, frames: &[DMatrix<f64>], solver: LinearSolver) -> Result<Vec<DMatrix<f64>>> {
    let kept = affine_mask_indices(sys.n, sys.d);
    let h = sys.h.to_dense();
    let hr = DMatrix::from_fn(kept.len(), kept.len(), |r, c| h[(kept[r], kept[c])]);
    let cr = DVector::from_fn(kept.len(), |r, _| -sys.c[kept[r]]);
    let kernel = gauge_basis(frames, true);
    let v = solve_psd(&hr, &cr, Some(&kernel), solver)?;
    let mut x = DVector::zeros(sys.c.len());
    for (r, &idx) in kept.iter().enumerate() {
        x[idx] = v[r];
    }
    Ok(unpack_steps(&x, sys.n, sys.d))
}

/// Structure kept by every iterate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Constraint {
    #[default]
    None,
    /// Last homogeneous row stays `(0, ..., 0, 1)`.
    Affine,
    /// As `Affine`, with linear parts re-projected onto `O(d)` after each step.
    Euclidean,
}

#[derive(Clone, Debug)]
pub struct GnOptions {
    pub max_iters: usize,
    /// Stop when the relative improvement of `g` falls below this.
    pub rel_tol: f64,
    /// Backtracking on `β` in `G + β E`; without it every full step is taken.
    pub damping: bool,
    pub min_beta: f64,
    pub solver: LinearSolver,
    pub constraint: Constraint,
    pub weights: Option<ResidualWeights>,
}

impl Default for GnOptions {
    fn default() -> Self {
        Self {
            max_iters: 5,
            rel_tol: 1e-8,
            damping: true,
            min_beta: 1.0 / 16.0,
            solver: LinearSolver::Auto,
            constraint: Constraint::None,
            weights: None,
        }
    }
}

/// Iteration record of [`run_gn`].
#[derive(Clone, Debug)]
pub struct GNState {
    pub frames: Vec<DMatrix<f64>>,
    /// Last accepted steps, already scaled by `β`.
    pub steps: Vec<DMatrix<f64>>,
    pub iterations: usize,
    /// `g` before the first iteration and after each accepted one.
    pub g_history: Vec<f64>,
    pub betas: Vec<f64>,
}

fn reproject_linear_parts(frames: &mut [DMatrix<f64>]) {
    for f in frames {
        let d = f.nrows() - 1;
        let q = linalg::project_orthogonal(&f.view((0, 0), (d, d)).into_owned());
        f.view_mut((0, 0), (d, d)).copy_from(&q);
    }
}

/// Gauss-Newton iterations `G_i <- G_i + β E_i` starting from `init`.
pub fn run_gn(
    g: &FrameGraph,
    t: &EdgeTransforms,
    init: &FrameSolution,
    opts: &GnOptions,
) -> Result<(FrameSolution, GNState)> {
    t.validate(g)?;
    let weights = opts.weights.as_ref();
    let mut frames = init.frames.clone();
    let mut current = weighted_g(g, t, &frames, weights)?;
    let mut state = GNState {
        frames: frames.clone(),
        steps: vec![DMatrix::zeros(t.d(), t.d()); g.n()],
        iterations: 0,
        g_history: vec![current],
        betas: vec![],
    };
    for _ in 0..opts.max_iters {
        if current == 0.0 {
            break;
        }
        let sys = match weights {
            Some(_) => build_gn_system_weighted(g, t, &frames, weights)?,
            None => build_gn_system(g, t, &frames)?,
        };
        let steps = match opts.constraint {
            Constraint::None => gn_step(&sys, &frames, opts.solver)?,
            Constraint::Affine | Constraint::Euclidean => gn_step_masked(&sys, &frames, opts.solver)?,
        };
        let mut beta = 1.0;
        let accepted = loop {
            let mut cand: Vec<_> = frames.iter().zip(&steps).map(|(f, e)| f + e * beta).collect();
            if opts.constraint == Constraint::Euclidean {
                reproject_linear_parts(&mut cand);
            }
            let value = weighted_g(g, t, &cand, weights).unwrap_or(f64::INFINITY);
            if !opts.damping || value <= current {
                break Some((cand, value));
            }
            beta *= 0.5;
            if beta < opts.min_beta {
                break None;
            }
        };
        let Some((cand, value)) = accepted else {
            break;
        };
        if !value.is_finite() {
            return Err(SyncError::SingularBlock { frame: 0, cond: f64::INFINITY });
        }
        let improvement = (current - value) / current;
        state.steps = steps.iter().map(|e| e * beta).collect();
        state.betas.push(beta);
        state.iterations += 1;
        state.g_history.push(value);
        frames = cand;
        current = value;
        if improvement < opts.rel_tol {
            break;
        }
    }
    state.frames = frames.clone();
    let mut sol = FrameSolution::from_frames(frames, Method::GaussNewton);
    sol.projected = opts.constraint == Constraint::Euclidean;
    Ok((sol, state))
}
