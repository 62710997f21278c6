//! Block matrices built from a frame graph and its pairwise transforms
//! (`W`, `Z`, `Z2`, `H`) and the spectral routines the solvers share.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Result, SyncError};
use crate::graph::FrameGraph;
use crate::linalg;

/// Pairwise transforms `G_ij` keyed by directed edge (0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeTransforms {
    d: usize,
    map: BTreeMap<(usize, usize), DMatrix<f64>>,
}

impl EdgeTransforms {
    pub fn new(d: usize) -> Self {
        Self { d, map: BTreeMap::new() }
    }

    /// Consistent set `G_ij = G_i^{-1} G_j` over the edges of `g`.
    pub fn from_frames(g: &FrameGraph, frames: &[DMatrix<f64>]) -> Self {
        let d = frames.first().map_or(0, |f| f.nrows());
        let inverses: Vec<_> = frames.iter().map(linalg::inverse).collect();
        let mut t = Self::new(d);
        for (i, j) in g.edges() {
            t.map.insert((i, j), &inverses[i] * &frames[j]);
        }
        t
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, i: usize, j: usize, m: DMatrix<f64>) -> Result<()> {
        if m.shape() != (self.d, self.d) {
            return Err(SyncError::DimensionMismatch {
                expected: format!("{0}x{0}", self.d),
                got: format!("{}x{}", m.nrows(), m.ncols()),
            });
        }
        self.map.insert((i, j), m);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.map.get(&(i, j))
    }

    pub fn require(&self, i: usize, j: usize) -> Result<&DMatrix<f64>> {
        self.get(i, j).ok_or(SyncError::MissingTransform(i, j))
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> Option<&mut DMatrix<f64>> {
        self.map.get_mut(&(i, j))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &DMatrix<f64>)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    /// Every edge of `g` has a transform.
    pub fn validate(&self, g: &FrameGraph) -> Result<()> {
        for (i, j) in g.edges() {
            self.require(i, j)?;
        }
        Ok(())
    }

    /// Applies `f` to every stored matrix. The output dimension is taken from
    /// the first result.
    pub fn map<F>(&self, mut f: F) -> Self
    where
        F: FnMut(&DMatrix<f64>) -> DMatrix<f64>,
    {
        let map: BTreeMap<_, _> = self.map.iter().map(|(k, v)| (*k, f(v))).collect();
        let d = map.values().next().map_or(self.d, |m| m.nrows());
        Self { d, map }
    }

    /// Transforms restricted to the edges of `g`.
    pub fn restrict(&self, g: &FrameGraph) -> Result<Self> {
        let mut out = Self::new(self.d);
        for (i, j) in g.edges() {
            out.map.insert((i, j), self.require(i, j)?.clone());
        }
        Ok(out)
    }
}

/// Dense blocks are used up to this many rows; larger matrices stay block-sparse.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StoragePolicy {
    #[default]
    Auto,
    Dense,
    Sparse,
}

#[derive(Clone, Debug)]
enum Storage {
    Dense(DMatrix<f64>),
    Sparse(BTreeMap<(usize, usize), DMatrix<f64>>),
}

/// Square matrix made of `n x n` blocks of size `d x d`.
#[derive(Clone, Debug)]
pub struct BlockMatrix {
    n: usize,
    d: usize,
    storage: Storage,
}

/// Accumulates block contributions before choosing a storage layout.
#[derive(Debug)]
pub struct BlockAccumulator {
    n: usize,
    d: usize,
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
}

impl BlockAccumulator {
    pub fn new(n: usize, d: usize) -> Self {
        Self { n, d, blocks: BTreeMap::new() }
    }

    pub fn add(&mut self, i: usize, j: usize, m: &DMatrix<f64>) {
        debug_assert_eq!(m.shape(), (self.d, self.d));
        match self.blocks.get_mut(&(i, j)) {
            Some(b) => *b += m,
            None => {
                self.blocks.insert((i, j), m.clone());
            }
        }
    }

    pub fn add_scaled_identity(&mut self, i: usize, alpha: f64) {
        let eye = DMatrix::<f64>::identity(self.d, self.d) * alpha;
        self.add(i, i, &eye);
    }

    pub fn finish(self, policy: StoragePolicy) -> BlockMatrix {
        let dim = self.n * self.d;
        let dense = match policy {
            StoragePolicy::Dense => true,
            StoragePolicy::Sparse => false,
            StoragePolicy::Auto => dim <= DENSE_LIMIT,
        };
        let storage = if dense {
            let mut m = DMatrix::zeros(dim, dim);
            for ((i, j), b) in &self.blocks {
                m.view_mut((i * self.d, j * self.d), (self.d, self.d)).copy_from(b);
            }
            Storage::Dense(m)
        } else {
            Storage::Sparse(self.blocks)
        };
        BlockMatrix { n: self.n, d: self.d, storage }
    }
}

impl BlockMatrix {
    pub fn from_dense(n: usize, d: usize, m: DMatrix<f64>) -> Result<Self> {
        if m.shape() != (n * d, n * d) {
            return Err(SyncError::DimensionMismatch {
                expected: format!("{0}x{0}", n * d),
                got: format!("{}x{}", m.nrows(), m.ncols()),
            });
        }
        Ok(Self { n, d, storage: Storage::Dense(m) })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        self.n * self.d
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let d = self.d;
        match &self.storage {
            Storage::Dense(m) => m.view((i * d, j * d), (d, d)).into_owned(),
            Storage::Sparse(b) => b.get(&(i, j)).cloned().unwrap_or_else(|| DMatrix::zeros(d, d)),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(_) => {
                let mut acc = BlockAccumulator::new(self.n, self.d);
                if let Storage::Sparse(b) = &self.storage {
                    acc.blocks = b.clone();
                }
                match acc.finish(StoragePolicy::Dense).storage {
                    Storage::Dense(m) => m,
                    Storage::Sparse(_) => unreachable!(),
                }
            }
        }
    }

    /// Same matrix held in the requested layout.
    pub fn with_policy(&self, policy: StoragePolicy) -> Self {
        let mut acc = BlockAccumulator::new(self.n, self.d);
        for i in 0..self.n {
            for j in 0..self.n {
                let b = self.block(i, j);
                if b.iter().any(|v| *v != 0.0) {
                    acc.blocks.insert((i, j), b);
                }
            }
        }
        acc.finish(policy)
    }

    pub fn as_dense(&self) -> Option<&DMatrix<f64>> {
        match &self.storage {
            Storage::Dense(m) => Some(m),
            Storage::Sparse(_) => None,
        }
    }

    /// `M X`.
    pub fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            Storage::Dense(m) => m * x,
            Storage::Sparse(blocks) => {
                let d = self.d;
                let mut out = DMatrix::zeros(self.dim(), x.ncols());
                for ((i, j), b) in blocks {
                    let prod = b * x.rows(j * d, d);
                    let mut dst = out.rows_mut(i * d, d);
                    dst += prod;
                }
                out
            }
        }
    }

    /// `M^T X`.
    pub fn tr_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            Storage::Dense(m) => m.tr_mul(x),
            Storage::Sparse(blocks) => {
                let d = self.d;
                let mut out = DMatrix::zeros(self.dim(), x.ncols());
                for ((i, j), b) in blocks {
                    let prod = b.tr_mul(&x.rows(i * d, d));
                    let mut dst = out.rows_mut(j * d, d);
                    dst += prod;
                }
                out
            }
        }
    }

    pub fn transpose(&self) -> Self {
        let storage = match &self.storage {
            Storage::Dense(m) => Storage::Dense(m.transpose()),
            Storage::Sparse(b) => {
                Storage::Sparse(b.iter().map(|((i, j), m)| ((*j, *i), m.transpose())).collect())
            }
        };
        Self { n: self.n, d: self.d, storage }
    }

    /// Entry-wise sum; the result is dense if either operand is.
    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.n, self.d), (other.n, other.d));
        match (&self.storage, &other.storage) {
            (Storage::Sparse(a), Storage::Sparse(b)) => {
                let mut acc = BlockAccumulator::new(self.n, self.d);
                for ((i, j), m) in a.iter().chain(b.iter()) {
                    acc.add(*i, *j, m);
                }
                acc.finish(StoragePolicy::Sparse)
            }
            _ => Self {
                n: self.n,
                d: self.d,
                storage: Storage::Dense(self.to_dense() + other.to_dense()),
            },
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match &self.storage {
            Storage::Dense(m) => m.norm(),
            Storage::Sparse(b) => b.values().map(|m| m.norm_squared()).sum::<f64>().sqrt(),
        }
    }

    /// `||M - M^T||_F <= tol * ||M||_F`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let scale = self.frobenius_norm();
        match &self.storage {
            Storage::Dense(m) => (m - m.transpose()).norm() <= tol * scale,
            Storage::Sparse(b) => {
                let mut diff = 0.0;
                for ((i, j), m) in b {
                    let mirror = b.get(&(*j, *i)).map(|t| t.transpose());
                    diff += match mirror {
                        Some(t) => (m - t).norm_squared(),
                        None => m.norm_squared(),
                    };
                }
                diff.sqrt() <= tol * scale
            }
        }
    }

    /// Row-major debug dump.
    pub fn dump(&self) -> MatrixDump {
        let m = self.to_dense();
        let data = (0..m.nrows()).flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>()).collect();
        MatrixDump { rows: m.nrows(), cols: m.ncols(), block_size: self.d, data }
    }
}

/// Row-major dump of a matrix for debugging output.
#[derive(Clone, Debug, Serialize)]
pub struct MatrixDump {
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    pub data: Vec<f64>,
}

fn out_degree_identity(g: &FrameGraph, acc: &mut BlockAccumulator) {
    for i in 0..g.n() {
        let deg = g.out_degree(i);
        if deg > 0 {
            acc.add_scaled_identity(i, deg as f64);
        }
    }
}

/// `W`: block `(i, j)` is `G_ij` on edges, zero elsewhere.
pub fn build_w(g: &FrameGraph, t: &EdgeTransforms) -> Result<BlockMatrix> {
    build_w_with(g, t, StoragePolicy::Auto)
}

pub fn build_w_with(g: &FrameGraph, t: &EdgeTransforms, policy: StoragePolicy) -> Result<BlockMatrix> {
    let mut acc = BlockAccumulator::new(g.n(), t.d());
    for (i, j) in g.edges() {
        acc.add(i, j, t.require(i, j)?);
    }
    Ok(acc.finish(policy))
}

/// `Z = diag(A 1) ⊗ I_d - W`.
pub fn build_z(g: &FrameGraph, t: &EdgeTransforms) -> Result<BlockMatrix> {
    build_z_with(g, t, StoragePolicy::Auto)
}

pub fn build_z_with(g: &FrameGraph, t: &EdgeTransforms, policy: StoragePolicy) -> Result<BlockMatrix> {
    let mut acc = BlockAccumulator::new(g.n(), t.d());
    out_degree_identity(g, &mut acc);
    for (i, j) in g.edges() {
        acc.add(i, j, &(-t.require(i, j)?.clone()));
    }
    Ok(acc.finish(policy))
}

/// `Z2 = blockdiag(W̄ W̄^T) - W̄`, where `W̄` is `W` of the reversed graph with
/// transforms `Ḡ_ij = G_ji^T`.
pub fn build_z2(g: &FrameGraph, t: &EdgeTransforms) -> Result<BlockMatrix> {
    build_z2_with(g, t, StoragePolicy::Auto)
}

pub fn build_z2_with(g: &FrameGraph, t: &EdgeTransforms, policy: StoragePolicy) -> Result<BlockMatrix> {
    let rev = g.reverse();
    let mut acc = BlockAccumulator::new(g.n(), t.d());
    for i in 0..rev.n() {
        for k in rev.out_neighbors(i) {
            // Ḡ_ik = G_ki^T
            let bar = t.require(k, i)?.transpose();
            acc.add(i, i, &(&bar * bar.transpose()));
            acc.add(i, k, &-bar);
        }
    }
    Ok(acc.finish(policy))
}

/// `H = Z + Z2`, the Hessian of `f(X) = Σ ½ ||G_ij X_j - X_i||_F^2`.
pub fn build_h(g: &FrameGraph, t: &EdgeTransforms) -> Result<BlockMatrix> {
    build_h_with(g, t, StoragePolicy::Auto)
}

pub fn build_h_with(g: &FrameGraph, t: &EdgeTransforms, policy: StoragePolicy) -> Result<BlockMatrix> {
    let z = build_z_with(g, t, policy)?;
    let z2 = build_z2_with(g, t, policy)?;
    Ok(z.add(&z2))
}

/// Orthonormal basis of the right-singular subspace belonging to the smallest
/// singular values, together with those singular values (ascending).
#[derive(Clone, Debug)]
pub struct SmallestSubspace {
    pub basis: DMatrix<f64>,
    pub singular_values: Vec<f64>,
}

/// Right-singular vectors for the `k` smallest singular values of `m`.
///
/// Dense matrices use a full SVD, or a symmetric eigendecomposition when `m`
/// is symmetric. Block-sparse matrices use a restarted block Krylov method on
/// `M^T M`. Ties at the `k`-th value are broken by the factorization order.
pub fn smallest_singular_subspace(m: &BlockMatrix, k: usize) -> Result<SmallestSubspace> {
    if k > m.dim() {
        return Err(SyncError::InvalidInput(format!(
            "requested {k} singular vectors of a {0}x{0} matrix",
            m.dim()
        )));
    }
    match m.as_dense() {
        Some(dense) => Ok(dense_smallest_subspace(dense, k, m.is_symmetric(1e-13))),
        None => krylov_smallest_subspace(m, k, &KrylovOptions::default()),
    }
}

fn dense_smallest_subspace(m: &DMatrix<f64>, k: usize, symmetric: bool) -> SmallestSubspace {
    let dim = m.nrows();
    if symmetric {
        let eig = m.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].abs().total_cmp(&eig.eigenvalues[b].abs()));
        let cols: Vec<_> = order[..k].iter().map(|&c| eig.eigenvectors.column(c).into_owned()).collect();
        let basis = if cols.is_empty() { DMatrix::zeros(dim, 0) } else { DMatrix::from_columns(&cols) };
        let singular_values = order[..k].iter().map(|&c| eig.eigenvalues[c].abs()).collect();
        return SmallestSubspace { basis, singular_values };
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let cols: Vec<DVector<f64>> = order[..k].iter().map(|&r| v_t.row(r).transpose()).collect();
    let basis = if cols.is_empty() { DMatrix::zeros(dim, 0) } else { DMatrix::from_columns(&cols) };
    let singular_values = order[..k].iter().map(|&r| svd.singular_values[r]).collect();
    SmallestSubspace { basis, singular_values }
}

/// Settings for the block Krylov extractor used on block-sparse matrices.
#[derive(Clone, Debug)]
pub struct KrylovOptions {
    /// Extra vectors carried beyond the requested count.
    pub oversample: usize,
    /// Krylov blocks generated per restart.
    pub blocks_per_restart: usize,
    pub max_restarts: usize,
    /// Residual tolerance relative to the largest Ritz value of `M^T M`.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self { oversample: 4, blocks_per_restart: 24, max_restarts: 200, tol: 1e-11, seed: 0x5eed }
    }
}

fn orthonormalize_against(basis: &[DMatrix<f64>], block: &mut DMatrix<f64>) {
    for _ in 0..2 {
        for q in basis {
            let proj = q.tr_mul(block);
            *block -= q * proj;
        }
    }
}

fn orthonormal_columns(block: DMatrix<f64>) -> DMatrix<f64> {
    let scale = block.norm().max(f64::MIN_POSITIVE);
    let qr = block.clone().qr();
    let (q, r) = (qr.q(), qr.r());
    let keep: Vec<usize> = (0..r.ncols().min(r.nrows())).filter(|&c| r[(c, c)].abs() > 1e-10 * scale).collect();
    let cols: Vec<_> = keep.iter().map(|&c| q.column(c).into_owned()).collect();
    if cols.is_empty() {
        DMatrix::zeros(block.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Restarted block Krylov / Rayleigh-Ritz iteration for the `k` smallest
/// eigenpairs of `M^T M`, with full reorthogonalization.
pub fn krylov_smallest_subspace(m: &BlockMatrix, k: usize, opts: &KrylovOptions) -> Result<SmallestSubspace> {
    let dim = m.dim();
    if k == 0 {
        return Ok(SmallestSubspace { basis: DMatrix::zeros(dim, 0), singular_values: vec![] });
    }
    let p = (k + opts.oversample).min(dim);
    let apply = |x: &DMatrix<f64>| m.tr_mul(&m.mul(x));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut start = orthonormal_columns(DMatrix::from_fn(dim, p, |_, _| rng.sample(StandardNormal)));

    for _ in 0..opts.max_restarts {
        let mut basis: Vec<DMatrix<f64>> = Vec::new();
        let mut images: Vec<DMatrix<f64>> = Vec::new();
        let mut current = start.clone();
        let mut total = 0;
        for _ in 0..opts.blocks_per_restart {
            if current.ncols() == 0 || total >= dim {
                break;
            }
            let image = apply(&current);
            total += current.ncols();
            let mut next = image.clone();
            basis.push(current);
            images.push(image);
            orthonormalize_against(&basis, &mut next);
            current = orthonormal_columns(next);
            if total + current.ncols() > dim {
                let room = dim - total;
                current = current.columns(0, room.min(current.ncols())).into_owned();
            }
        }
        let q = DMatrix::from_columns(&basis.iter().flat_map(|b| b.column_iter().map(|c| c.into_owned())).collect::<Vec<_>>());
        let aq = DMatrix::from_columns(&images.iter().flat_map(|b| b.column_iter().map(|c| c.into_owned())).collect::<Vec<_>>());
        let t = q.tr_mul(&aq);
        let t = (&t + t.transpose()) * 0.5;
        let eig = t.symmetric_eigen();
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let norm_est = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);

        let take = p.min(order.len());
        let y = DMatrix::from_columns(&order[..take].iter().map(|&c| eig.eigenvectors.column(c).into_owned()).collect::<Vec<_>>());
        let ritz = &q * &y;
        let ritz_images = &aq * &y;
        let converged = (0..k).all(|c| {
            let theta = eig.eigenvalues[order[c]];
            (ritz_images.column(c) - ritz.column(c) * theta).norm() <= opts.tol * norm_est
        });
        if converged {
            let basis = ritz.columns(0, k).into_owned();
            let singular_values = order[..k].iter().map(|&c| eig.eigenvalues[c].max(0.0).sqrt()).collect();
            return Ok(SmallestSubspace { basis, singular_values });
        }
        start = orthonormal_columns(ritz);
    }
    Err(SyncError::NoConvergence { what: "block Krylov smallest subspace", iterations: opts.max_restarts })
}

/// Estimate of the spectral radius via power iteration on `M^T M`.
///
/// This yields `||M||_2`, which equals the spectral radius for symmetric `M`
/// and is an upper bound otherwise.
pub fn spectral_radius(m: &BlockMatrix, tol: f64) -> Result<f64> {
    const MAX_ITERS: usize = 100_000;
    let dim = m.dim();
    if dim == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let mut x = DMatrix::from_fn(dim, 1, |_, _| 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal));
    x /= x.norm();
    let mut estimate = 0.0;
    for _ in 0..MAX_ITERS {
        let y = m.tr_mul(&m.mul(&x));
        let lambda = x.dot(&y);
        let norm = y.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let next = lambda.max(0.0).sqrt();
        if (next - estimate).abs() <= tol * next {
            return Ok(next);
        }
        estimate = next;
        x = y / norm;
    }
    Err(SyncError::NoConvergence { what: "power iteration", iterations: MAX_ITERS })
}

/// Default relative tolerance for [`kernel_dimension`].
pub const KERNEL_TOL: f64 = 1e-8;

/// Number of singular values below `tol * σ_max`. The zero matrix has a full
/// kernel.
pub fn kernel_dimension(m: &BlockMatrix, tol: f64) -> usize {
    let s = linalg::singular_values(&m.to_dense());
    let max = s.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return m.dim();
    }
    s.iter().filter(|&&v| v < tol * max).count()
}
