//! Synchronization objectives evaluated directly from edge transforms.

use nalgebra::DMatrix;

use crate::error::{Result, SyncError};
use crate::graph::FrameGraph;
use crate::linalg;
use crate::matrices::EdgeTransforms;

/// Inverses of all frames, failing on ill-conditioned ones.
pub fn frame_inverses(frames: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| match linalg::checked_inverse(f, linalg::SINGULAR_CONDITION) {
            (Some(inv), _) => Ok(inv),
            (None, cond) => Err(SyncError::SingularBlock { frame: k, cond }),
        })
        .collect()
}

fn check_frames(g: &FrameGraph, t: &EdgeTransforms, frames: &[DMatrix<f64>]) -> Result<()> {
    if frames.len() != g.n() {
        return Err(SyncError::DimensionMismatch {
            expected: format!("{} frames", g.n()),
            got: format!("{} frames", frames.len()),
        });
    }
    if let Some(f) = frames.iter().find(|f| f.nrows() != t.d() || f.ncols() != t.d()) {
        return Err(SyncError::DimensionMismatch {
            expected: format!("{0}x{0} frames", t.d()),
            got: format!("{}x{}", f.nrows(), f.ncols()),
        });
    }
    Ok(())
}

/// `Σ_(i,j) ½ ||G_ij - G_i^{-1} G_j||_F^2`.
pub fn objective_g(g: &FrameGraph, t: &EdgeTransforms, frames: &[DMatrix<f64>]) -> Result<f64> {
    check_frames(g, t, frames)?;
    let inv = frame_inverses(frames)?;
    let mut total = 0.0;
    for (i, j) in g.edges() {
        total += 0.5 * (t.require(i, j)? - &inv[i] * &frames[j]).norm_squared();
    }
    Ok(total)
}

/// Mean squared edge residual, `(1/|E|) Σ ||G_ij - G_i^{-1} G_j||_F^2`.
pub fn objective_g_prime(g: &FrameGraph, t: &EdgeTransforms, frames: &[DMatrix<f64>]) -> Result<f64> {
    if g.num_edges() == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * objective_g(g, t, frames)? / g.num_edges() as f64)
}

/// `Σ_(i,j) ½ ||G_ij X_j - X_i||_F^2` for blocks `X_i` of equal shape.
pub fn objective_f(g: &FrameGraph, t: &EdgeTransforms, blocks: &[DMatrix<f64>]) -> Result<f64> {
    if blocks.len() != g.n() {
        return Err(SyncError::DimensionMismatch {
            expected: format!("{} blocks", g.n()),
            got: format!("{} blocks", blocks.len()),
        });
    }
    let mut total = 0.0;
    for (i, j) in g.edges() {
        total += 0.5 * (t.require(i, j)? * &blocks[j] - &blocks[i]).norm_squared();
    }
    Ok(total)
}

/// [`objective_f`] on a vertically stacked `nd x k` matrix.
pub fn objective_f_stacked(g: &FrameGraph, t: &EdgeTransforms, x: &DMatrix<f64>) -> Result<f64> {
    let d = t.d();
    if x.nrows() != g.n() * d {
        return Err(SyncError::DimensionMismatch {
            expected: format!("{} rows", g.n() * d),
            got: format!("{} rows", x.nrows()),
        });
    }
    let blocks: Vec<_> = (0..g.n()).map(|i| linalg::row_block(x, i, d)).collect();
    objective_f(g, t, &blocks)
}
