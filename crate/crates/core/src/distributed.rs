//! Synchronous-round simulator for the distributed `Z` and `H` protocols.
//!
//! Every round each node reads its communication neighbors' states from the
//! previous round and applies
//! `X_i <- X_i + ε (Σ_j C_ij X_j - D_i X_i)`, which stacks to `X <- (I - εM) X`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SyncError};
use crate::graph::FrameGraph;
use crate::linalg;
use crate::matrices::{self, EdgeTransforms};
use crate::objective;
use crate::sync_direct::{FrameSolution, Method};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Z,
    H,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Z => "z",
            Variant::H => "h",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSize {
    Fixed(f64),
    /// `0.9 / ρ̂` with `ρ̂` a power-iteration estimate of `||M||_2`.
    Auto,
}

#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub variant: Variant,
    pub epsilon: StepSize,
    pub rounds: usize,
    pub seed: u64,
    /// Record a trace row every this many rounds (0 disables intermediate rows).
    pub trace_every: usize,
    /// Finalize as `polar(X_i)^T` (orthogonal transforms) rather than `X_i^{-1}`.
    pub project: bool,
    /// Update nodes on the rayon pool within each round.
    pub parallel: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Z,
            epsilon: StepSize::Fixed(0.01),
            rounds: 5000,
            seed: 0,
            trace_every: 100,
            project: true,
            parallel: false,
        }
    }
}

/// One node's state and the coefficients it applies to incoming messages.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: usize,
    pub x: DMatrix<f64>,
    /// `(j, C_ij)` for every communication neighbor `j`.
    coupling: Vec<(usize, DMatrix<f64>)>,
    /// `D_i`.
    self_weight: DMatrix<f64>,
}

impl NodeState {
    fn update(&self, states: &[DMatrix<f64>], eps: f64) -> DMatrix<f64> {
        let mut acc = -(&self.self_weight * &self.x);
        for (j, c) in &self.coupling {
            acc += c * &states[*j];
        }
        &self.x + acc * eps
    }
}

#[derive(Clone, Debug)]
pub struct Simulator {
    pub config: ProtocolConfig,
    pub epsilon: f64,
    pub nodes: Vec<NodeState>,
    pub round: usize,
    pub messages: u64,
    com_edges: usize,
    d: usize,
}

/// Uniform entries on the open interval `(-0.5, 0.5)`.
fn draw_state(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| loop {
        let v: f64 = rng.random_range(-0.5..0.5);
        if v != -0.5 {
            break v;
        }
    })
}

/// Builds the per-node coefficients and the seeded initial states.
pub fn init_network(g: &FrameGraph, t: &EdgeTransforms, cfg: &ProtocolConfig) -> Result<Simulator> {
    t.validate(g)?;
    let n = g.n();
    let d = t.d();
    let eye = DMatrix::<f64>::identity(d, d);
    let (nodes_coupling, com_edges): (Vec<_>, usize) = match cfg.variant {
        Variant::Z => {
            if !g.is_qsc() {
                return Err(SyncError::NonQscGraph);
            }
            let coupling = (0..n)
                .map(|i| {
                    let c: Vec<_> = g.out_neighbors(i).map(|j| (j, t.get(i, j).expect("validated").clone())).collect();
                    let w = &eye * c.len() as f64;
                    (c, w)
                })
                .collect();
            (coupling, g.num_edges())
        }
        Variant::H => {
            if !g.is_connected() {
                return Err(SyncError::DisconnectedGraph);
            }
            let com = g.symmetrized();
            let coupling = (0..n)
                .map(|i| {
                    let mut w = DMatrix::zeros(d, d);
                    let c: Vec<_> = com
                        .out_neighbors(i)
                        .map(|j| {
                            let mut q = DMatrix::zeros(d, d);
                            if let Some(gij) = t.get(i, j).filter(|_| g.has_edge(i, j)) {
                                q += gij;
                                w += &eye;
                            }
                            if let Some(gji) = t.get(j, i).filter(|_| g.has_edge(j, i)) {
                                q += gji.transpose();
                                w += gji.tr_mul(gji);
                            }
                            (j, q)
                        })
                        .collect();
                    (c, w)
                })
                .collect();
            (coupling, com.num_edges())
        }
    };

    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(i as u64);
            r
        })
        .collect();
    let mut states: Vec<DMatrix<f64>>;
    loop {
        states = rngs.iter_mut().map(|r| draw_state(r, d)).collect();
        let stacked = linalg::stack_rows(&states);
        let s = linalg::singular_values(&stacked);
        if s.last().is_some_and(|&v| v > 1e-12 * s[0]) {
            break;
        }
    }

    let nodes: Vec<NodeState> = nodes_coupling
        .into_iter()
        .zip(states)
        .enumerate()
        .map(|(id, ((coupling, self_weight), x))| NodeState { id, x, coupling, self_weight })
        .collect();

    let mut sim = Simulator { config: cfg.clone(), epsilon: 0.0, nodes, round: 0, messages: 0, com_edges, d };
    sim.epsilon = match cfg.epsilon {
        StepSize::Fixed(e) if e > 0.0 && e.is_finite() => e,
        StepSize::Fixed(e) => return Err(SyncError::InvalidInput(format!("step size {e} must be positive"))),
        StepSize::Auto => {
            let m = sim.protocol_matrix(g, t)?;
            let rho = matrices::spectral_radius(&m, 1e-8)?;
            if rho > 0.0 {
                0.9 / rho
            } else {
                0.01
            }
        }
    };
    Ok(sim)
}

/// One row of a protocol trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub round: usize,
    pub g_prime: f64,
    pub max_state_norm: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Simulator {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Directed communication links, one message per link and round.
    pub fn com_edges(&self) -> usize {
        self.com_edges
    }

    /// The matrix `M` whose iteration the protocol realizes (`Z` or `H`).
    pub fn protocol_matrix(&self, g: &FrameGraph, t: &EdgeTransforms) -> Result<matrices::BlockMatrix> {
        match self.config.variant {
            Variant::Z => matrices::build_z(g, t),
            Variant::H => matrices::build_h(g, t),
        }
    }

    pub fn states(&self) -> Vec<DMatrix<f64>> {
        self.nodes.iter().map(|n| n.x.clone()).collect()
    }

    /// States stacked into an `nd x d` matrix.
    pub fn stacked_state(&self) -> DMatrix<f64> {
        linalg::stack_rows(&self.states())
    }

    pub fn max_state_norm(&self) -> f64 {
        self.nodes.iter().map(|n| n.x.norm()).fold(0.0, f64::max)
    }

    /// One synchronous round.
    pub fn step(&mut self) {
        let snapshot = self.states();
        let eps = self.epsilon;
        let next: Vec<DMatrix<f64>> = if self.config.parallel {
            self.nodes.par_iter().map(|node| node.update(&snapshot, eps)).collect()
        } else {
            self.nodes.iter().map(|node| node.update(&snapshot, eps)).collect()
        };
        for (node, x) in self.nodes.iter_mut().zip(next) {
            node.x = x;
        }
        self.round += 1;
        self.messages += self.com_edges as u64;
    }

    pub fn run_rounds(&mut self, rounds: usize) {
        for _ in 0..rounds {
            self.step();
        }
    }

    /// Frames from the current states: `polar(X_i)^T` when projecting,
    /// `X_i^{-1}` otherwise.
    pub fn finalize(&self) -> Result<FrameSolution> {
        let project = self.config.project;
        let frames = if project {
            self.nodes.iter().map(|n| linalg::project_orthogonal(&n.x).transpose()).collect()
        } else {
            let mut frames = Vec::with_capacity(self.n());
            for n in &self.nodes {
                match linalg::checked_inverse(&n.x, linalg::SINGULAR_CONDITION) {
                    (Some(inv), _) => frames.push(inv),
                    (None, cond) => return Err(SyncError::SingularBlock { frame: n.id, cond }),
                }
            }
            frames
        };
        let method = match self.config.variant {
            Variant::Z => Method::DistributedZ,
            Variant::H => Method::DistributedH,
        };
        let mut s = FrameSolution::from_frames(frames, method);
        s.projected = project;
        Ok(s)
    }

    fn trace_row(&self, g: &FrameGraph, t: &EdgeTransforms) -> TraceRow {
        let g_prime = self
            .finalize()
            .and_then(|s| objective::objective_g_prime(g, t, &s.frames))
            .unwrap_or(f64::NAN);
        TraceRow {
            round: self.round,
            g_prime,
            max_state_norm: self.max_state_norm(),
            variant: self.config.variant,
            seed: self.config.seed,
        }
    }
}

/// Protocol run with its trace. The last row is always the final round.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub solution: FrameSolution,
    pub trace: Vec<TraceRow>,
    pub messages: u64,
    pub epsilon: f64,
}

/// Runs `rounds` rounds, recording the trace at the configured cadence.
pub fn run_protocol(sim: &mut Simulator, g: &FrameGraph, t: &EdgeTransforms, rounds: usize) -> Result<ProtocolRun> {
    let every = sim.config.trace_every;
    let mut trace = vec![sim.trace_row(g, t)];
    for k in 1..=rounds {
        sim.step();
        if (every > 0 && k % every == 0) || k == rounds {
            trace.push(sim.trace_row(g, t));
        }
    }
    Ok(ProtocolRun { solution: sim.finalize()?, trace, messages: sim.messages, epsilon: sim.epsilon })
}

/// Convenience wrapper: initialize and run for `cfg.rounds`.
pub fn simulate(g: &FrameGraph, t: &EdgeTransforms, cfg: &ProtocolConfig) -> Result<ProtocolRun> {
    let mut sim = init_network(g, t, cfg)?;
    run_protocol(&mut sim, g, t, cfg.rounds)
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "g_prime", "max_state_norm", "variant", "seed"])?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            format!("{:e}", r.g_prime),
            format!("{:e}", r.max_state_norm),
            r.variant.as_str().to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
