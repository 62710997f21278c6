//! Gradient flow of `g` on `O(d)^n`, started from projected `H`-method frames.

use nalgebra::DMatrix;

use crate::error::{Result, SyncError};
use crate::graph::FrameGraph;
use crate::linalg;
use crate::matrices::EdgeTransforms;
use crate::objective;
use crate::sync_direct::{self, FrameSolution, GapCertificate, Method, SyncReport};

/// Euclidean gradient of `Σ ½ ||G_ij - G_i^T G_j||_F^2` with respect to each frame.
pub fn euclidean_gradient(g: &FrameGraph, t: &EdgeTransforms, frames: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let d = t.d();
    let mut grad = vec![DMatrix::zeros(d, d); g.n()];
    for (i, j) in g.edges() {
        let r = t.require(i, j)? - frames[i].tr_mul(&frames[j]);
        grad[i] -= &frames[j] * r.transpose();
        grad[j] -= &frames[i] * r;
    }
    Ok(grad)
}

/// `Ġ_i = -skew(∇_i G_i^T) G_i`, the negative Riemannian gradient.
pub fn flow_rhs(g: &FrameGraph, t: &EdgeTransforms, frames: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    let grad = euclidean_gradient(g, t, frames)?;
    Ok(grad
        .iter()
        .zip(frames)
        .map(|(e, f)| -(linalg::skew(&(e * f.transpose())) * f))
        .collect())
}

/// `Σ_i <∇_i, Ġ_i>`, the rate of change of `g` along the flow.
pub fn energy_rate(g: &FrameGraph, t: &EdgeTransforms, frames: &[DMatrix<f64>]) -> Result<f64> {
    let grad = euclidean_gradient(g, t, frames)?;
    let rhs = flow_rhs(g, t, frames)?;
    Ok(grad.iter().zip(&rhs).map(|(a, b)| a.dot(b)).sum())
}

fn orthogonal_objective(g: &FrameGraph, t: &EdgeTransforms, frames: &[DMatrix<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (i, j) in g.edges() {
        total += 0.5 * (t.require(i, j)? - frames[i].tr_mul(&frames[j])).norm_squared();
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct FlowOptions {
    pub horizon: f64,
    pub step: f64,
    /// Re-orthonormalize once `||G^T G - I||_F` exceeds this.
    pub drift_tol: f64,
    pub min_step: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { horizon: 10.0, step: 0.01, drift_tol: 1e-6, min_step: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub frames: Vec<DMatrix<f64>>,
    pub time: f64,
    pub energy: f64,
    /// Energy after every accepted step, starting with the initial value.
    pub energy_history: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub reorthonormalizations: usize,
    pub final_step: f64,
}

fn axpy(frames: &[DMatrix<f64>], k: &[DMatrix<f64>], h: f64) -> Vec<DMatrix<f64>> {
    frames.iter().zip(k).map(|(f, v)| f + v * h).collect()
}

/// Fixed-step RK4 on `[0, horizon]`. A step that increases `g` is rejected and
/// the step size halved.
pub fn integrate_flow(
    g: &FrameGraph,
    t: &EdgeTransforms,
    init: &[DMatrix<f64>],
    opts: &FlowOptions,
) -> Result<FlowState> {
    if opts.step <= 0.0 || opts.horizon < 0.0 {
        return Err(SyncError::InvalidInput("flow step and horizon must be positive".into()));
    }
    t.validate(g)?;
    let mut frames: Vec<_> = init.to_vec();
    let mut energy = orthogonal_objective(g, t, &frames)?;
    let mut state = FlowState {
        frames: vec![],
        time: 0.0,
        energy,
        energy_history: vec![energy],
        accepted_steps: 0,
        rejected_steps: 0,
        reorthonormalizations: 0,
        final_step: opts.step,
    };
    let mut h = opts.step;
    let mut time = 0.0;
    while opts.horizon - time > 1e-12 * opts.horizon.max(1.0) {
        let dt = h.min(opts.horizon - time);
        let k1 = flow_rhs(g, t, &frames)?;
        let k2 = flow_rhs(g, t, &axpy(&frames, &k1, dt / 2.0))?;
        let k3 = flow_rhs(g, t, &axpy(&frames, &k2, dt / 2.0))?;
        let k4 = flow_rhs(g, t, &axpy(&frames, &k3, dt))?;
        let mut next: Vec<DMatrix<f64>> = (0..frames.len())
            .map(|i| &frames[i] + (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (dt / 6.0))
            .collect();
        let drift = next.iter().map(linalg::orthogonality_defect).fold(0.0, f64::max);
        let mut reprojected = false;
        if drift > opts.drift_tol {
            next = next.iter().map(linalg::project_orthogonal).collect();
            reprojected = true;
        }
        let value = orthogonal_objective(g, t, &next)?;
        if value > energy * (1.0 + 1e-12) + 1e-300 {
            state.rejected_steps += 1;
            h /= 2.0;
            if h < opts.min_step {
                return Err(SyncError::StepSizeUnderflow { floor: opts.min_step });
            }
            continue;
        }
        if reprojected {
            state.reorthonormalizations += 1;
        }
        frames = next;
        energy = value;
        time += dt;
        state.accepted_steps += 1;
        state.energy_history.push(energy);
    }
    frames = frames.iter().map(linalg::project_orthogonal).collect();
    state.energy = orthogonal_objective(g, t, &frames)?;
    state.frames = frames;
    state.time = time;
    state.final_step = h;
    Ok(state)
}

/// Result of the projected-spectral-then-flow pipeline.
#[derive(Clone, Debug)]
pub struct FlowRun {
    pub solution: FrameSolution,
    pub report: SyncReport,
    pub flow: FlowState,
    /// Projected `H`-method frames used as the starting point.
    pub start: FrameSolution,
    pub start_gap: GapCertificate,
    pub gap: GapCertificate,
}

/// `H` method, projection onto `O(d)`, then the gradient flow. The gap of the
/// final frames uses the same relaxation lower bound as the start.
pub fn run_algorithm8(g: &FrameGraph, t: &EdgeTransforms, opts: &FlowOptions) -> Result<FlowRun> {
    let raw = sync_direct::solve_h(g, t)?;
    let start = sync_direct::project_orthogonal(&raw);
    let start_gap = sync_direct::gap_bound(&raw, &start, g, t)?;
    let flow = integrate_flow(g, t, &start.frames, opts)?;
    let mut solution = FrameSolution::from_frames(flow.frames.clone(), Method::GradientFlow);
    solution.projected = true;
    let gap = sync_direct::gap_bound(&raw, &solution, g, t)?;
    let mut report = sync_direct::metrics(g, t, &solution)?;
    report.gap_h = Some(gap.h);
    debug_assert!((report.g_total - objective::objective_g(g, t, &solution.frames)?).abs() <= 1e-9 * report.g_total.max(1.0));
    Ok(FlowRun { solution, report, flow, start, start_gap, gap })
}
