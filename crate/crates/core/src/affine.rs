//! Affine and Euclidean synchronization in homogeneous coordinates.
//!
//! Spatial dimension is `d`; homogeneous matrices are `(d+1) x (d+1)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SyncError};
use crate::gauss_newton::{self, Constraint, GNState, GnOptions, LinearSolver};
use crate::graph::FrameGraph;
use crate::linalg;
use crate::matrices::{BlockAccumulator, BlockMatrix, EdgeTransforms, StoragePolicy};
use crate::objective;
use crate::sync_direct::{self, FrameSolution, Method};

/// `[[Q, t], [0, 1]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTransform {
    pub q: DMatrix<f64>,
    pub t: DVector<f64>,
}

impl AffineTransform {
    pub fn identity(d: usize) -> Self {
        Self { q: DMatrix::identity(d, d), t: DVector::zeros(d) }
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// Splits a homogeneous matrix; the last row must be exactly `(0, ..., 0, 1)`.
    pub fn split(hom: &DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = hom.shape();
        if rows != cols || rows < 2 {
            return Err(SyncError::DimensionMismatch {
                expected: "square homogeneous matrix".into(),
                got: format!("{rows}x{cols}"),
            });
        }
        let d = rows - 1;
        let last = hom.row(d);
        if last.iter().take(d).any(|&v| v != 0.0) || last[d] != 1.0 {
            return Err(SyncError::InvalidInput(format!("last row {last} is not (0, ..., 0, 1)")));
        }
        Ok(Self { q: hom.view((0, 0), (d, d)).into_owned(), t: hom.view((0, d), (d, 1)).column(0).into_owned() })
    }

    pub fn compose(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d + 1, d + 1);
        m.view_mut((0, 0), (d, d)).copy_from(&self.q);
        m.view_mut((0, d), (d, 1)).copy_from(&self.t);
        m[(d, d)] = 1.0;
        m
    }

    /// `[[Q^{-1}, -Q^{-1} t], [0, 1]]`.
    pub fn inverse(&self) -> Self {
        let qi = linalg::inverse(&self.q);
        let t = -(&qi * &self.t);
        Self { q: qi, t }
    }

    /// Product `self * other` of the homogeneous matrices.
    pub fn then(&self, other: &Self) -> Self {
        Self { q: &self.q * &other.q, t: &self.q * &other.t + &self.t }
    }

    pub fn is_euclidean(&self, tol: f64) -> bool {
        linalg::orthogonality_defect(&self.q) <= tol
    }
}

/// Translation parts `t_ij` keyed by edge.
pub type EdgeTranslations = BTreeMap<(usize, usize), DVector<f64>>;

/// Splits homogeneous edge transforms into linear parts and translations.
pub fn split_transforms(t: &EdgeTransforms) -> Result<(EdgeTransforms, EdgeTranslations)> {
    let d = t.d().saturating_sub(1);
    let mut linear = EdgeTransforms::new(d);
    let mut trans = EdgeTranslations::new();
    for ((i, j), m) in t.iter() {
        let a = AffineTransform::split(m)?;
        linear.insert(i, j, a.q)?;
        trans.insert((i, j), a.t);
    }
    Ok((linear, trans))
}

/// Linear system `H t = -c` for the translations given fixed linear parts.
#[derive(Clone, Debug)]
pub struct TranslationSystem {
    pub h: BlockMatrix,
    pub c: DVector<f64>,
}

pub fn build_translation_system(
    g: &FrameGraph,
    linear: &[DMatrix<f64>],
    t_obs: &EdgeTranslations,
) -> Result<TranslationSystem> {
    let n = g.n();
    let d = linear.first().map_or(0, |q| q.nrows());
    let inv = objective::frame_inverses(linear)?;
    let mut acc = BlockAccumulator::new(n, d);
    let mut c = DVector::zeros(n * d);
    for (i, j) in g.edges() {
        let tij = t_obs.get(&(i, j)).ok_or(SyncError::MissingTransform(i, j))?;
        let a = &inv[i];
        let ata = a.tr_mul(a);
        acc.add(i, i, &ata);
        acc.add(j, j, &ata);
        acc.add(i, j, &-&ata);
        acc.add(j, i, &-&ata);
        let at = a.tr_mul(tij);
        let mut ci = c.rows_mut(i * d, d);
        ci += &at;
        let mut cj = c.rows_mut(j * d, d);
        cj -= &at;
    }
    Ok(TranslationSystem { h: acc.finish(StoragePolicy::Auto), c })
}

/// `Σ ½ ||t_ij - Q_i^{-1} (t_j - t_i)||^2`.
pub fn translation_objective(
    g: &FrameGraph,
    linear: &[DMatrix<f64>],
    t_obs: &EdgeTranslations,
    translations: &[DVector<f64>],
) -> Result<f64> {
    let inv = objective::frame_inverses(linear)?;
    let mut total = 0.0;
    for (i, j) in g.edges() {
        let tij = t_obs.get(&(i, j)).ok_or(SyncError::MissingTransform(i, j))?;
        total += 0.5 * (tij - &inv[i] * (&translations[j] - &translations[i])).norm_squared();
    }
    Ok(total)
}

/// Minimum-norm translations (mean zero) minimizing [`translation_objective`].
pub fn solve_translations(
    g: &FrameGraph,
    linear: &[DMatrix<f64>],
    t_obs: &EdgeTranslations,
) -> Result<Vec<DVector<f64>>> {
    let n = g.n();
    let d = linear.first().map_or(0, |q| q.nrows());
    let sys = build_translation_system(g, linear, t_obs)?;
    // Σ_i c_i vanishes, so c lies in the range of H.
    let mut drift = DVector::zeros(d);
    for i in 0..n {
        drift += sys.c.rows(i * d, d);
    }
    if drift.norm() > 1e-9 * sys.c.norm().max(1.0) {
        return Err(SyncError::Consistency(format!("translation system is inconsistent (drift {:e})", drift.norm())));
    }
    let ones = DMatrix::from_element(n, 1, 1.0).kronecker(&DMatrix::<f64>::identity(d, d));
    let x = gauss_newton::solve_psd(&sys.h.to_dense(), &-&sys.c, Some(&ones), LinearSolver::Auto)?;
    Ok((0..n).map(|i| x.rows(i * d, d).into_owned()).collect())
}

#[derive(Clone, Debug)]
pub struct AffineOptions {
    /// Run the masked Gauss-Newton refinement after the closed-form steps.
    pub refine: bool,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub damping: bool,
    /// Weight of squared translation residuals relative to the linear ones.
    pub translation_weight: f64,
    /// Euclidean only: re-project linear parts onto `O(d)` after each step.
    pub reproject: bool,
}

impl Default for AffineOptions {
    fn default() -> Self {
        let gn = GnOptions::default();
        Self {
            refine: true,
            max_iters: gn.max_iters,
            rel_tol: gn.rel_tol,
            damping: gn.damping,
            translation_weight: 1.0,
            reproject: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AffineResult {
    pub solution: FrameSolution,
    /// Frames after the linear and translation solves, before refinement.
    pub initial: FrameSolution,
    pub gn_state: Option<GNState>,
}

fn residual_weights(dim: usize, w: f64) -> Option<DMatrix<f64>> {
    if w == 1.0 {
        return None;
    }
    let d = dim - 1;
    let mut m = DMatrix::from_element(dim, dim, 1.0);
    for r in 0..d {
        m[(r, d)] = w.sqrt();
    }
    Some(m)
}

fn compose_frames(linear: &[DMatrix<f64>], translations: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
    linear
        .iter()
        .zip(translations)
        .map(|(q, t)| AffineTransform { q: q.clone(), t: t.clone() }.compose())
        .collect()
}

fn run_split(
    g: &FrameGraph,
    t: &EdgeTransforms,
    opts: &AffineOptions,
    euclidean: bool,
) -> Result<AffineResult> {
    if opts.translation_weight <= 0.0 {
        return Err(SyncError::InvalidInput("translation weight must be positive".into()));
    }
    t.validate(g)?;
    let (linear_t, trans_t) = split_transforms(t)?;
    let mut lin = sync_direct::solve_h(g, &linear_t)?;
    if euclidean {
        lin = sync_direct::project_orthogonal(&lin);
    }
    let translations = solve_translations(g, &lin.frames, &trans_t)?;
    let method = if euclidean { Method::Euclidean } else { Method::Affine };
    let mut initial = FrameSolution::from_frames(compose_frames(&lin.frames, &translations), method);
    initial.projected = euclidean;
    if !opts.refine {
        return Ok(AffineResult { solution: initial.clone(), initial, gn_state: None });
    }
    let constraint = if euclidean && opts.reproject { Constraint::Euclidean } else { Constraint::Affine };
    let gn_opts = GnOptions {
        max_iters: opts.max_iters,
        rel_tol: opts.rel_tol,
        damping: opts.damping,
        constraint,
        weights: residual_weights(t.d(), opts.translation_weight),
        ..GnOptions::default()
    };
    let (mut solution, state) = gauss_newton::run_gn(g, t, &initial, &gn_opts)?;
    solution.method = method;
    solution.projected = euclidean && opts.reproject;
    Ok(AffineResult { solution, initial, gn_state: Some(state) })
}

/// Linear parts by the `H` method, then translations, then masked
/// Gauss-Newton on the homogeneous matrices.
pub fn run_affine(g: &FrameGraph, t: &EdgeTransforms, opts: &AffineOptions) -> Result<AffineResult> {
    run_split(g, t, opts, false)
}

/// As [`run_affine`] with linear parts projected onto `O(d)`.
pub fn run_euclidean(g: &FrameGraph, t: &EdgeTransforms, opts: &AffineOptions) -> Result<AffineResult> {
    run_split(g, t, opts, true)
}

/// Homogeneous frames from a generic linear solver mapped into `E(d)`: gauge
/// fixed so the first frame is the identity, linear blocks projected onto
/// `O(d)`, last row reset.
pub fn naive_euclidean_projection(s: &FrameSolution) -> Result<FrameSolution> {
    let inv0 = objective::frame_inverses(&s.frames[..1])?.remove(0);
    let frames = s
        .frames
        .iter()
        .map(|f| {
            let m = &inv0 * f;
            let d = m.nrows() - 1;
            let q = linalg::project_orthogonal(&m.view((0, 0), (d, d)).into_owned());
            let t = m.view((0, d), (d, 1)).column(0).into_owned();
            AffineTransform { q, t }.compose()
        })
        .collect();
    let mut out = FrameSolution::from_frames(frames, s.method);
    out.projected = true;
    Ok(out)
}

/// As [`naive_euclidean_projection`] without the orthogonal projection.
pub fn naive_affine_projection(s: &FrameSolution) -> Result<FrameSolution> {
    let inv0 = objective::frame_inverses(&s.frames[..1])?.remove(0);
    let frames = s
        .frames
        .iter()
        .map(|f| {
            let mut m = &inv0 * f;
            let d = m.nrows() - 1;
            m.row_mut(d).fill(0.0);
            m[(d, d)] = 1.0;
            m
        })
        .collect();
    Ok(FrameSolution::from_frames(frames, s.method))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph;
    use crate::testutil::{gaussian, random_invertible, random_orthogonal_frames};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_affine(d: usize, euclidean: bool, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let q = if euclidean { random_orthogonal_frames(1, d, rng).remove(0) } else { random_invertible(d, rng) };
        let t = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
        AffineTransform { q, t }.compose()
    }

    fn affine_instance(
        n: usize,
        d: usize,
        euclidean: bool,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> (FrameGraph, EdgeTransforms) {
        let (tree, dens) = graph::generate_min_qsc(n, rng);
        let g = graph::densify(&tree, &dens.qsc_edges, 0.5, rng).unwrap();
        let frames: Vec<_> = (0..n).map(|_| AffineTransform::split(&random_affine(d, euclidean, rng)).unwrap()).collect();
        let mut t = EdgeTransforms::new(d + 1);
        for (i, j) in g.edges() {
            let mut a = frames[i].inverse().then(&frames[j]);
            a.q += gaussian(d, d, rng) * sigma;
            if euclidean {
                a.q = linalg::project_orthogonal(&a.q);
            }
            a.t += gaussian(d, 1, rng).column(0) * sigma;
            t.insert(i, j, a.compose()).unwrap();
        }
        (g, t)
    }

    #[test]
    fn split_examples() {
        let a = AffineTransform::split(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(a, AffineTransform::identity(2));
        let mut m = DMatrix::identity(3, 3);
        m[(0, 2)] = 1.0;
        m[(1, 2)] = 2.0;
        let a = AffineTransform::split(&m).unwrap();
        assert_eq!(a.q, DMatrix::identity(2, 2));
        assert_eq!(a.t.as_slice(), &[1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_affine(3, false, &mut rng);
        assert_eq!(AffineTransform::split(&g).unwrap().compose(), g);
        m[(2, 0)] = 1e-300;
        assert!(AffineTransform::split(&m).is_err());
    }

    #[test]
    fn inverse_is_homogeneous_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = AffineTransform::split(&random_affine(3, false, &mut rng)).unwrap();
        let prod = a.compose() * a.inverse().compose();
        assert!((prod - DMatrix::<f64>::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn single_edge_translation() {
        let g = FrameGraph::from_edges(2, [(0, 1)]).unwrap();
        let mut obs = EdgeTranslations::new();
        obs.insert((0, 1), DVector::from_vec(vec![1.0, 0.0]));
        let q = vec![DMatrix::identity(2, 2); 2];
        let t = solve_translations(&g, &q, &obs).unwrap();
        assert!((&t[1] - &t[0] - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-12);
        assert!((&t[0] + &t[1]).norm() < 1e-12);
    }

    #[test]
    fn translation_gauge_is_in_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, t) = affine_instance(6, 3, false, 0.1, &mut rng);
        let (_, trans) = split_transforms(&t).unwrap();
        let q: Vec<_> = (0..6).map(|_| random_invertible(3, &mut rng)).collect();
        let sys = build_translation_system(&g, &q, &trans).unwrap();
        let ones = DMatrix::from_element(6, 1, 1.0).kronecker(&DMatrix::<f64>::identity(3, 3));
        assert!(sys.h.mul(&ones).norm() < 1e-12 * sys.h.frobenius_norm());
    }

    #[test]
    fn translations_match_least_squares_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g, t) = affine_instance(8, 3, false, 0.3, &mut rng);
        let (_, trans) = split_transforms(&t).unwrap();
        let q: Vec<_> = (0..8).map(|_| random_invertible(3, &mut rng)).collect();
        let sol = solve_translations(&g, &q, &trans).unwrap();
        // Stack the residual map r = b - A x and solve densely.
        let inv = objective::frame_inverses(&q).unwrap();
        let m = g.num_edges();
        let mut a = DMatrix::zeros(3 * m, 24);
        let mut b = DVector::zeros(3 * m);
        for (k, (i, j)) in g.edges().enumerate() {
            a.view_mut((3 * k, 3 * j), (3, 3)).copy_from(&inv[i]);
            a.view_mut((3 * k, 3 * i), (3, 3)).copy_from(&-&inv[i]);
            b.rows_mut(3 * k, 3).copy_from(&trans[&(i, j)]);
        }
        let x = a.clone().pseudo_inverse(1e-12).unwrap() * &b;
        let oracle = 0.5 * (&b - &a * &x).norm_squared();
        let ours = translation_objective(&g, &q, &trans, &sol).unwrap();
        assert!((ours - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn objective_splits_into_linear_and_translation_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, t) = affine_instance(7, 3, false, 0.2, &mut rng);
        let frames: Vec<_> = (0..7).map(|_| random_affine(3, false, &mut rng)).collect();
        let parts: Vec<_> = frames.iter().map(|f| AffineTransform::split(f).unwrap()).collect();
        let q: Vec<_> = parts.iter().map(|p| p.q.clone()).collect();
        let tr: Vec<_> = parts.iter().map(|p| p.t.clone()).collect();
        let (lin_t, trans_t) = split_transforms(&t).unwrap();
        let whole = objective::objective_g(&g, &t, &frames).unwrap();
        let split = objective::objective_g(&g, &lin_t, &q).unwrap() + translation_objective(&g, &q, &trans_t, &tr).unwrap();
        assert!((whole - split).abs() <= 1e-10 * whole);
    }

    #[test]
    fn consistent_affine_and_euclidean_recovery() {
        for euclidean in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let (g, t) = affine_instance(8, 3, euclidean, 0.0, &mut rng);
            let run = if euclidean { run_euclidean } else { run_affine };
            let res = run(&g, &t, &AffineOptions::default()).unwrap();
            assert!(objective::objective_g_prime(&g, &t, &res.solution.frames).unwrap() < 1e-9);
        }
    }

    #[test]
    fn refinement_keeps_structure_and_improves() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (g, t) = affine_instance(10, 3, false, 0.3, &mut rng);
        let res = run_affine(&g, &t, &AffineOptions::default()).unwrap();
        for f in &res.solution.frames {
            assert!(AffineTransform::split(f).is_ok());
        }
        let before = objective::objective_g(&g, &t, &res.initial.frames).unwrap();
        let after = objective::objective_g(&g, &t, &res.solution.frames).unwrap();
        assert!(after < before);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (g, t) = affine_instance(10, 3, true, 0.3, &mut rng);
        let res = run_euclidean(&g, &t, &AffineOptions::default()).unwrap();
        for f in &res.solution.frames {
            assert!(AffineTransform::split(f).unwrap().is_euclidean(1e-10));
        }
    }

    #[test]
    fn weighted_refinement_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (g, t) = affine_instance(6, 2, false, 0.2, &mut rng);
        let opts = AffineOptions { translation_weight: 4.0, ..AffineOptions::default() };
        let res = run_affine(&g, &t, &opts).unwrap();
        let hist = &res.gn_state.unwrap().g_history;
        assert!(hist.windows(2).all(|w| w[1] <= w[0]));
    }
}
