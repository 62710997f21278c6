//! Direct solvers: the `Z` and `H` spectral methods, orthogonal projection
//! with its optimality-gap certificate, and the spanning-tree reference method.

use std::collections::VecDeque;
use std::fmt;
use std::time::Duration;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SyncError};
use crate::graph::{self, FrameGraph};
use crate::linalg;
use crate::matrices::{self, BlockMatrix, EdgeTransforms};
use crate::objective;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "z")]
    Z,
    #[serde(rename = "h")]
    H,
    #[serde(rename = "ref")]
    Reference,
    #[serde(rename = "gn")]
    GaussNewton,
    #[serde(rename = "affine")]
    Affine,
    #[serde(rename = "euclidean")]
    Euclidean,
    #[serde(rename = "dist-z")]
    DistributedZ,
    #[serde(rename = "dist-h")]
    DistributedH,
    #[serde(rename = "gradflow")]
    GradientFlow,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Z,
        Method::H,
        Method::Reference,
        Method::GaussNewton,
        Method::Affine,
        Method::Euclidean,
        Method::DistributedZ,
        Method::DistributedH,
        Method::GradientFlow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Z => "z",
            Method::H => "h",
            Method::Reference => "ref",
            Method::GaussNewton => "gn",
            Method::Affine => "affine",
            Method::Euclidean => "euclidean",
            Method::DistributedZ => "dist-z",
            Method::DistributedH => "dist-h",
            Method::GradientFlow => "gradflow",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = SyncError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SyncError::InvalidInput(format!("unknown method {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Extreme singular values of one extracted block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlockConditioning {
    pub min_sv: f64,
    pub max_sv: f64,
}

impl BlockConditioning {
    pub fn of(m: &DMatrix<f64>) -> Self {
        let s = linalg::singular_values(m);
        Self { min_sv: s.last().copied().unwrap_or(0.0), max_sv: s.first().copied().unwrap_or(0.0) }
    }

    pub fn condition(&self) -> f64 {
        if self.min_sv > 0.0 {
            self.max_sv / self.min_sv
        } else {
            f64::INFINITY
        }
    }
}

/// Synchronized frames `G_i`, defined up to a common left multiplier.
#[derive(Clone, Debug)]
pub struct FrameSolution {
    pub d: usize,
    pub frames: Vec<DMatrix<f64>>,
    pub method: Method,
    pub projected: bool,
    pub conditioning: Vec<BlockConditioning>,
    /// Orthonormal `nd x d` basis the frames were read from, when spectral.
    pub basis: Option<DMatrix<f64>>,
    /// Singular values belonging to `basis`, ascending.
    pub singular_values: Vec<f64>,
}

impl FrameSolution {
    pub fn from_frames(frames: Vec<DMatrix<f64>>, method: Method) -> Self {
        let d = frames.first().map_or(0, |f| f.nrows());
        let conditioning = frames.iter().map(BlockConditioning::of).collect();
        Self { d, frames, method, projected: false, conditioning, basis: None, singular_values: vec![] }
    }

    pub fn n(&self) -> usize {
        self.frames.len()
    }

    /// Consistent pairwise set `G_i^{-1} G_j` over the edges of `g`.
    pub fn pairwise(&self, g: &FrameGraph) -> EdgeTransforms {
        EdgeTransforms::from_frames(g, &self.frames)
    }

    /// Every frame multiplied from the left by `q`.
    pub fn left_multiply(&self, q: &DMatrix<f64>) -> Self {
        let mut out = self.clone();
        out.frames = self.frames.iter().map(|f| q * f).collect();
        out.conditioning = out.frames.iter().map(BlockConditioning::of).collect();
        out.basis = None;
        out
    }

    /// Whether `other` equals `Q * self` for one global `Q`, taking
    /// `Q = G''_1 G_1^{-1}`. The tolerance is relative to each frame's norm.
    pub fn left_equivalent(&self, other: &Self, tol: f64) -> bool {
        if self.n() != other.n() || self.d != other.d {
            return false;
        }
        let Some(first) = self.frames.first() else {
            return true;
        };
        let q = &other.frames[0] * linalg::inverse(first);
        self.frames
            .iter()
            .zip(&other.frames)
            .all(|(a, b)| (&q * a - b).norm() <= tol * b.norm().max(1.0))
    }
}

/// Reads frames from the row blocks of a tall basis: `G_i = (block_i)^{-1}`.
pub fn extract_frames(basis: &DMatrix<f64>, d: usize, method: Method) -> Result<FrameSolution> {
    let n = basis.nrows() / d;
    let mut frames = Vec::with_capacity(n);
    let mut conditioning = Vec::with_capacity(n);
    for i in 0..n {
        let block = linalg::row_block(basis, i, d);
        let cond = BlockConditioning::of(&block);
        match linalg::checked_inverse(&block, linalg::SINGULAR_CONDITION) {
            (Some(inv), _) => frames.push(inv),
            (None, c) => return Err(SyncError::SingularBlock { frame: i, cond: c }),
        }
        conditioning.push(cond);
    }
    Ok(FrameSolution {
        d,
        frames,
        method,
        projected: false,
        conditioning,
        basis: Some(basis.clone()),
        singular_values: vec![],
    })
}

fn spectral_solve(m: &BlockMatrix, d: usize, method: Method) -> Result<FrameSolution> {
    let sub = matrices::smallest_singular_subspace(m, d)?;
    let mut s = extract_frames(&sub.basis, d, method)?;
    s.singular_values = sub.singular_values;
    Ok(s)
}

/// Frames from the `d` smallest right-singular vectors of `Z`. Requires a QSC graph.
pub fn solve_z(g: &FrameGraph, t: &EdgeTransforms) -> Result<FrameSolution> {
    if !g.is_qsc() {
        return Err(SyncError::NonQscGraph);
    }
    t.validate(g)?;
    spectral_solve(&matrices::build_z(g, t)?, t.d(), Method::Z)
}

/// Frames from the `d` smallest eigenvectors of `H`. Requires a connected graph.
pub fn solve_h(g: &FrameGraph, t: &EdgeTransforms) -> Result<FrameSolution> {
    if !g.is_connected() {
        return Err(SyncError::DisconnectedGraph);
    }
    t.validate(g)?;
    spectral_solve(&matrices::build_h(g, t)?, t.d(), Method::H)
}

fn check_spd(q: &DMatrix<f64>, d: usize) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    if q.shape() != (d, d) {
        return Err(SyncError::DimensionMismatch {
            expected: format!("{d}x{d}"),
            got: format!("{}x{}", q.nrows(), q.ncols()),
        });
    }
    if (q - q.transpose()).norm() > 1e-12 * q.norm() {
        return Err(SyncError::InvalidInput("Q is not symmetric".into()));
    }
    let eig = q.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(SyncError::InvalidInput("Q is not positive definite".into()));
    }
    Ok(eig)
}

/// Minimizer of `tr(X^T H X)` subject to `X^T X = Q`, returned as frames.
///
/// With `V` the `d` smallest eigenvectors of `H` (eigenvalues ascending) and
/// `U` the eigenvectors of `Q` sorted by descending eigenvalue, the optimum is
/// `X = V U^T Q^{1/2}`.
pub fn solve_constrained(g: &FrameGraph, t: &EdgeTransforms, q: &DMatrix<f64>) -> Result<FrameSolution> {
    if !g.is_connected() {
        return Err(SyncError::DisconnectedGraph);
    }
    t.validate(g)?;
    let d = t.d();
    let eig = check_spd(q, d)?;
    let h = matrices::build_h(g, t)?;
    let sub = matrices::smallest_singular_subspace(&h, d)?;

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let u = DMatrix::from_columns(&order.iter().map(|&c| eig.eigenvectors.column(c).into_owned()).collect::<Vec<_>>());
    let sqrt_q = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
        * eig.eigenvectors.transpose();
    let x = &sub.basis * u.transpose() * sqrt_q;
    let mut s = extract_frames(&x, d, Method::H)?;
    s.singular_values = sub.singular_values;
    Ok(s)
}

/// Solves the constrained problem for `q1` and `q2` and reports whether the
/// objective values agree (relative 1e-8) and the solutions are left-equivalent.
pub fn q_independence_check(
    g: &FrameGraph,
    t: &EdgeTransforms,
    q1: &DMatrix<f64>,
    q2: &DMatrix<f64>,
) -> Result<bool> {
    let a = solve_constrained(g, t, q1)?;
    let b = solve_constrained(g, t, q2)?;
    let ga = objective::objective_g(g, t, &a.frames)?;
    let gb = objective::objective_g(g, t, &b.frames)?;
    let same_value = (ga - gb).abs() <= 1e-8 * ga.abs().max(gb.abs()) + 1e-14;
    Ok(same_value && a.left_equivalent(&b, 1e-6))
}

/// Replaces every frame by its nearest orthogonal matrix.
pub fn project_orthogonal(s: &FrameSolution) -> FrameSolution {
    let frames: Vec<_> = s.frames.iter().map(linalg::project_orthogonal).collect();
    FrameSolution {
        d: s.d,
        conditioning: frames.iter().map(BlockConditioning::of).collect(),
        frames,
        method: s.method,
        projected: true,
        basis: s.basis.clone(),
        singular_values: s.singular_values.clone(),
    }
}

/// Relative optimality gap of a projected orthogonal solution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapCertificate {
    pub h: f64,
    /// Relaxation lower bound `f(√n G*^{-1})`.
    pub lower_bound: f64,
    /// `g` of the projected frames.
    pub g_projected: f64,
    /// Both numerator terms vanished; `h = 0` by definition.
    pub exact: bool,
}

/// Values below this are treated as zero when forming the gap ratio.
const GAP_ZERO: f64 = 1e-20;

/// `h = (g(G**) - f(√n G*^{-1})) / f(√n G*^{-1})`.
///
/// `s_unprojected` must come from [`solve_h`] so that its basis is orthonormal.
pub fn gap_bound(
    s_unprojected: &FrameSolution,
    s_projected: &FrameSolution,
    g: &FrameGraph,
    t: &EdgeTransforms,
) -> Result<GapCertificate> {
    let n = g.n() as f64;
    let inverses = objective::frame_inverses(&s_unprojected.frames)?;
    let scaled: Vec<_> = inverses.iter().map(|x| x * n.sqrt()).collect();
    let lower = objective::objective_f(g, t, &scaled)?;
    let homogeneous = n * objective::objective_f(g, t, &inverses)?;
    let scale = g.num_edges().max(1) as f64;
    if (lower - homogeneous).abs() > 1e-10 * lower.abs().max(homogeneous.abs()) + GAP_ZERO * scale {
        return Err(SyncError::Consistency(format!(
            "f(√n X) = {lower:e} disagrees with n f(X) = {homogeneous:e}"
        )));
    }
    let g_proj = objective::objective_g(g, t, &s_projected.frames)?;
    if lower <= GAP_ZERO * scale {
        if g_proj <= 1e-16 * scale {
            return Ok(GapCertificate { h: 0.0, lower_bound: lower, g_projected: g_proj, exact: true });
        }
        return Err(SyncError::ZeroDenominator { g: g_proj });
    }
    Ok(GapCertificate { h: (g_proj - lower) / lower, lower_bound: lower, g_projected: g_proj, exact: false })
}

/// Frames propagated along a random spanning tree from a random center with
/// `G_c = I` and `G_i = G_j G_ij^{-1}` for every tree edge `(i, j)`.
pub fn reference_baseline<R: Rng + ?Sized>(
    g: &FrameGraph,
    t: &EdgeTransforms,
    rng: &mut R,
) -> Result<FrameSolution> {
    t.validate(g)?;
    let (tree, center) = graph::random_min_qsc_subgraph(g, rng)?;
    let d = t.d();
    let mut frames: Vec<Option<DMatrix<f64>>> = vec![None; g.n()];
    frames[center] = Some(DMatrix::identity(d, d));
    let mut queue = VecDeque::from([center]);
    while let Some(j) = queue.pop_front() {
        let gj = frames[j].clone().expect("assigned before enqueue");
        for i in tree.in_neighbors(j) {
            let gij = t.require(i, j)?;
            let inv = match linalg::checked_inverse(gij, linalg::SINGULAR_CONDITION) {
                (Some(inv), _) => inv,
                (None, cond) => return Err(SyncError::SingularEdgeMatrix { i, j, cond }),
            };
            debug_assert!(frames[i].is_none());
            frames[i] = Some(&gj * inv);
            queue.push_back(i);
        }
    }
    let frames = frames
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| SyncError::Consistency("spanning tree left a frame unassigned".into()))?;
    Ok(FrameSolution::from_frames(frames, Method::Reference))
}

/// Objective values of a solution against observed transforms.
#[derive(Clone, Debug, Serialize)]
pub struct SyncReport {
    pub g_total: f64,
    pub g_prime: f64,
    pub f_value: f64,
    pub gap_h: Option<f64>,
    /// `||G_ij - G_i^{-1} G_j||_F^2` per edge.
    pub edge_residuals: Vec<((usize, usize), f64)>,
    pub runtime: Option<Duration>,
}

/// `g`, `g'` and `f` evaluated by separate edge sums.
pub fn metrics(g: &FrameGraph, t_observed: &EdgeTransforms, s: &FrameSolution) -> Result<SyncReport> {
    let inverses = objective::frame_inverses(&s.frames)?;
    let mut edge_residuals = Vec::with_capacity(g.num_edges());
    let mut sum_sq = 0.0;
    for (i, j) in g.edges() {
        let r = (t_observed.require(i, j)? - &inverses[i] * &s.frames[j]).norm_squared();
        sum_sq += r;
        edge_residuals.push(((i, j), r));
    }
    let g_prime = if g.num_edges() == 0 { 0.0 } else { sum_sq / g.num_edges() as f64 };
    Ok(SyncReport {
        g_total: objective::objective_g(g, t_observed, &s.frames)?,
        g_prime,
        f_value: objective::objective_f(g, t_observed, &inverses)?,
        gap_h: None,
        edge_residuals,
        runtime: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{gaussian, random_invertible, random_orthogonal_frames};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noisy(t: &EdgeTransforms, sigma: f64, rng: &mut ChaCha8Rng) -> EdgeTransforms {
        t.map(|m| m + gaussian(m.nrows(), m.ncols(), rng) * sigma)
    }

    fn qsc_instance(n: usize, d: usize, rho: f64, rng: &mut ChaCha8Rng) -> (FrameGraph, Vec<DMatrix<f64>>) {
        let (tree, dens) = graph::generate_min_qsc(n, rng);
        let g = graph::densify(&tree, &dens.qsc_edges, rho, rng).unwrap();
        let frames = (0..n).map(|_| random_invertible(d, rng)).collect();
        (g, frames)
    }

    #[test]
    fn tree_is_reproduced_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (tree, _) = graph::generate_min_qsc(8, &mut rng);
        let mut t = EdgeTransforms::new(3);
        for (i, j) in tree.edges() {
            t.insert(i, j, random_invertible(3, &mut rng)).unwrap();
        }
        for s in [solve_z(&tree, &t).unwrap(), solve_h(&tree, &t).unwrap()] {
            assert!(metrics(&tree, &t, &s).unwrap().g_prime < 1e-20);
        }
    }

    #[test]
    fn consistent_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g, frames) = qsc_instance(10, 3, 0.3, &mut rng);
        let t = EdgeTransforms::from_frames(&g, &frames);
        let truth = FrameSolution::from_frames(frames, Method::Z);
        for s in [solve_z(&g, &t).unwrap(), solve_h(&g, &t).unwrap()] {
            assert!(s.left_equivalent(&truth, 1e-8));
            let p = s.pairwise(&g);
            for ((i, j), m) in t.iter() {
                assert!((p.get(i, j).unwrap() - m).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn single_edge_metrics_by_hand() {
        let g = FrameGraph::from_edges(2, [(0, 1)]).unwrap();
        let mut t = EdgeTransforms::new(2);
        t.insert(0, 1, DMatrix::identity(2, 2) * 2.0).unwrap();
        let s = FrameSolution::from_frames(vec![DMatrix::identity(2, 2); 2], Method::Z);
        let r = metrics(&g, &t, &s).unwrap();
        assert!((r.g_total - 1.0).abs() < 1e-15);
        assert!((r.g_prime - 2.0).abs() < 1e-15);
        assert!((r.f_value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_qsc_and_disconnected_are_rejected() {
        // Node 0 points to 1 and 2; neither 1 nor 2 reaches the other.
        let g = FrameGraph::from_edges(3, [(0, 1), (0, 2)]).unwrap();
        let mut t = EdgeTransforms::new(2);
        t.insert(0, 1, DMatrix::identity(2, 2)).unwrap();
        t.insert(0, 2, DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(solve_z(&g, &t), Err(SyncError::NonQscGraph)));
        assert!(solve_h(&g, &t).is_ok());
        let g = FrameGraph::from_edges(3, [(0, 1)]).unwrap();
        assert!(matches!(solve_h(&g, &t), Err(SyncError::DisconnectedGraph)));
    }

    #[test]
    fn perturbed_out_edges_keep_consistent_kernel() {
        // Scaling the two out-edges of node 0 by (1 + α) and (1 - α) leaves the
        // kernel of Z unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = FrameGraph::from_edges(3, [(0, 1), (0, 2), (1, 2), (2, 1)]).unwrap();
        let frames: Vec<_> = (0..3).map(|_| random_invertible(2, &mut rng)).collect();
        let truth = EdgeTransforms::from_frames(&g, &frames);
        let mut observed = truth.clone();
        *observed.get_mut(0, 1).unwrap() *= 1.1;
        *observed.get_mut(0, 2).unwrap() *= 0.9;
        let s = solve_z(&g, &observed).unwrap();
        let p = s.pairwise(&g);
        for ((i, j), m) in truth.iter() {
            assert!((p.get(i, j).unwrap() - m).norm() < 1e-10);
        }
        assert!(metrics(&g, &observed, &s).unwrap().g_prime > 1e-4);
    }

    #[test]
    fn projection_examples() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5]));
        let s = project_orthogonal(&FrameSolution::from_frames(vec![d], Method::H));
        assert!((&s.frames[0] - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_orthogonal_frames(3, 3, &mut rng);
        let s = project_orthogonal(&FrameSolution::from_frames(q.clone(), Method::H));
        for (a, b) in s.frames.iter().zip(&q) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn gap_is_zero_on_consistent_orthogonal_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = FrameGraph::complete(6);
        let frames = random_orthogonal_frames(6, 3, &mut rng);
        let t = EdgeTransforms::from_frames(&g, &frames);
        let s = solve_h(&g, &t).unwrap();
        let cert = gap_bound(&s, &project_orthogonal(&s), &g, &t).unwrap();
        assert!(cert.exact);
        assert_eq!(cert.h, 0.0);
    }

    #[test]
    fn gap_is_nonnegative_on_noisy_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = FrameGraph::complete(10);
        let frames = random_orthogonal_frames(10, 3, &mut rng);
        let t = EdgeTransforms::from_frames(&g, &frames).map(|m| linalg::project_orthogonal(m));
        let t = noisy(&t, 0.2, &mut rng).map(linalg::project_orthogonal);
        let s = solve_h(&g, &t).unwrap();
        let cert = gap_bound(&s, &project_orthogonal(&s), &g, &t).unwrap();
        assert!(cert.lower_bound <= cert.g_projected + 1e-9);
        assert!(cert.h >= 0.0 && cert.h < 0.05, "h = {}", cert.h);
    }

    #[test]
    fn q_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (g, frames) = qsc_instance(8, 3, 0.4, &mut rng);
        let t = noisy(&EdgeTransforms::from_frames(&g, &frames), 0.1, &mut rng);
        let eye = DMatrix::identity(3, 3);
        assert!(q_independence_check(&g, &t, &eye, &eye).unwrap());
        let a = gaussian(3, 3, &mut rng);
        let spd = &a * a.transpose() + DMatrix::identity(3, 3);
        assert!(q_independence_check(&g, &t, &eye, &spd).unwrap());
        assert!(q_independence_check(&g, &t, &eye, &-eye.clone()).is_err());
    }

    #[test]
    fn reference_recovers_consistent_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (g, frames) = qsc_instance(9, 2, 0.5, &mut rng);
        let t = EdgeTransforms::from_frames(&g, &frames);
        let s = reference_baseline(&g, &t, &mut rng).unwrap();
        assert!(metrics(&g, &t, &s).unwrap().g_prime < 1e-18);
    }

    #[test]
    fn reference_flags_singular_tree_edge() {
        let g = FrameGraph::from_edges(2, [(0, 1)]).unwrap();
        let mut t = EdgeTransforms::new(2);
        t.insert(0, 1, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(reference_baseline(&g, &t, &mut rng), Err(SyncError::SingularEdgeMatrix { i: 0, j: 1, .. })));
    }
}
