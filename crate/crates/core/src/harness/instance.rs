//! Random problem instances and their JSON form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::affine::AffineTransform;
use crate::error::{Result, SyncError};
use crate::graph::{self, FrameGraph};
use crate::linalg;
use crate::matrices::EdgeTransforms;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformClass {
    Orthogonal,
    Linear,
    Affine,
    Euclidean,
}

impl TransformClass {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformClass::Orthogonal => "orthogonal",
            TransformClass::Linear => "linear",
            TransformClass::Affine => "affine",
            TransformClass::Euclidean => "euclidean",
        }
    }

    /// Transforms are stored as homogeneous `(d+1) x (d+1)` matrices.
    pub fn is_homogeneous(self) -> bool {
        matches!(self, TransformClass::Affine | TransformClass::Euclidean)
    }

    /// Linear parts are orthogonal.
    pub fn is_orthogonal(self) -> bool {
        matches!(self, TransformClass::Orthogonal | TransformClass::Euclidean)
    }

    pub fn default_noise(self) -> NoiseModel {
        match self {
            TransformClass::Orthogonal | TransformClass::Euclidean => NoiseModel::GaussProj,
            TransformClass::Linear | TransformClass::Affine => NoiseModel::GaussRaw,
        }
    }
}

impl fmt::Display for TransformClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformClass {
    type Err = SyncError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(Self::Orthogonal),
            "linear" => Ok(Self::Linear),
            "affine" => Ok(Self::Affine),
            "euclidean" => Ok(Self::Euclidean),
            _ => Err(SyncError::InvalidInput(format!("unknown transform class {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModel {
    /// Element-wise Gaussian noise, then projection onto `O(d)`.
    GaussProj,
    /// Element-wise Gaussian noise only.
    GaussRaw,
    /// Right multiplication by `exp(S)`, `S` uniform in a skew-symmetric ball.
    Geodesic { radius: f64 },
}

impl NoiseModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseModel::GaussProj => "gauss-proj",
            NoiseModel::GaussRaw => "gauss-raw",
            NoiseModel::Geodesic { .. } => "geodesic",
        }
    }
}

/// Everything needed to regenerate one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub rho: f64,
    pub class: TransformClass,
    pub noise: NoiseModel,
    pub seed: u64,
    /// When set, the graph is complete except for this many random edges
    /// outside the embedded tree, and `rho` is ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_edges: Option<usize>,
}

impl InstanceSpec {
    pub fn new(n: usize, d: usize, sigma: f64, rho: f64, class: TransformClass, seed: u64) -> Self {
        Self { n, d, sigma, rho, class, noise: class.default_noise(), seed, missing_edges: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.d < 2 {
            return Err(SyncError::InvalidInput(format!("need n >= 2 and d >= 2, got n = {}, d = {}", self.n, self.d)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(SyncError::InvalidInput(format!("sigma = {} must be finite and >= 0", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(SyncError::InvalidInput(format!("rho = {} outside [0, 1]", self.rho)));
        }
        if let NoiseModel::Geodesic { radius } = self.noise {
            if !(radius > 0.0 && radius.is_finite()) {
                return Err(SyncError::InvalidInput(format!("geodesic radius {radius} must be positive")));
            }
        }
        if self.class.is_orthogonal() && self.noise == NoiseModel::GaussRaw {
            return Err(SyncError::InvalidInput(format!("{} transforms need projected or geodesic noise", self.class)));
        }
        Ok(())
    }
}

/// Graph, observed transforms and ground truth of one problem.
#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub spec: InstanceSpec,
    pub graph: FrameGraph,
    pub qsc_edges: Vec<(usize, usize)>,
    /// `d x d`, or `(d+1) x (d+1)` homogeneous matrices for affine classes.
    pub transforms: EdgeTransforms,
    pub ground_truth: Option<Vec<DMatrix<f64>>>,
}

impl ProblemInstance {
    /// Graph density relative to the embedded tree.
    pub fn density(&self) -> f64 {
        graph::density(&self.graph, &self.qsc_edges)
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Orthogonal polar factor of an i.i.d. Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    linalg::project_orthogonal(&gaussian(d, d, rng))
}

/// Skew-symmetric matrix with the given strictly-upper entries (row-major).
pub fn skew_from_entries(d: usize, entries: &[f64]) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(d, d);
    let mut k = 0;
    for r in 0..d {
        for c in r + 1..d {
            s[(r, c)] = entries[k];
            s[(c, r)] = -entries[k];
            k += 1;
        }
    }
    s
}

/// `exp(S)` with the `d(d-1)/2` independent entries of `S` uniform in the
/// Euclidean ball of the given radius.
pub fn geodesic_noise<R: Rng + ?Sized>(d: usize, radius: f64, rng: &mut R) -> DMatrix<f64> {
    let m = d * (d - 1) / 2;
    if m == 0 {
        return DMatrix::identity(d, d);
    }
    let dir = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / m as f64);
    let entries = if norm > 0.0 { dir * (r / norm) } else { DVector::zeros(m) };
    skew_from_entries(d, entries.as_slice()).exp()
}

fn perturb_linear<R: Rng + ?Sized>(m: &DMatrix<f64>, spec: &InstanceSpec, rng: &mut R) -> DMatrix<f64> {
    let d = m.nrows();
    match spec.noise {
        NoiseModel::GaussProj => linalg::project_orthogonal(&(m + gaussian(d, d, rng) * spec.sigma)),
        NoiseModel::GaussRaw => m + gaussian(d, d, rng) * spec.sigma,
        NoiseModel::Geodesic { radius } => m * geodesic_noise(d, radius, rng),
    }
}

/// Draws the graph, ground truth and noisy observations for `spec`.
pub fn make_instance(spec: &InstanceSpec) -> Result<ProblemInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (tree, dens) = graph::generate_min_qsc(spec.n, &mut rng);
    let g = match spec.missing_edges {
        Some(k) => graph::remove_random_edges(spec.n, &dens.qsc_edges, k, &mut rng)?,
        None => graph::densify(&tree, &dens.qsc_edges, spec.rho, &mut rng)?,
    };
    let d = spec.d;
    let mut transforms = EdgeTransforms::new(if spec.class.is_homogeneous() { d + 1 } else { d });
    let truth: Vec<DMatrix<f64>> = if spec.class.is_homogeneous() {
        let frames: Vec<AffineTransform> = (0..spec.n)
            .map(|_| AffineTransform {
                q: random_orthogonal(d, &mut rng),
                t: DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0)),
            })
            .collect();
        for (i, j) in g.edges() {
            let mut rel = frames[i].inverse().then(&frames[j]);
            if spec.sigma > 0.0 || matches!(spec.noise, NoiseModel::Geodesic { .. }) {
                rel.q = perturb_linear(&rel.q, spec, &mut rng);
                rel.t += gaussian(d, 1, &mut rng).column(0) * spec.sigma;
            }
            transforms.insert(i, j, rel.compose())?;
        }
        frames.iter().map(AffineTransform::compose).collect()
    } else {
        let frames: Vec<_> = (0..spec.n).map(|_| random_orthogonal(d, &mut rng)).collect();
        for (i, j) in g.edges() {
            let rel = frames[i].tr_mul(&frames[j]);
            let obs = if spec.sigma > 0.0 || matches!(spec.noise, NoiseModel::Geodesic { .. }) {
                perturb_linear(&rel, spec, &mut rng)
            } else {
                rel
            };
            transforms.insert(i, j, obs)?;
        }
        frames
    };
    let mut spec = spec.clone();
    if spec.missing_edges.is_some() {
        spec.rho = graph::density(&g, &dens.qsc_edges);
    }
    Ok(ProblemInstance { spec, graph: g, qsc_edges: dens.qsc_edges, transforms, ground_truth: Some(truth) })
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>()).collect()
}

fn from_row_major(data: &[f64], dim: usize) -> Result<DMatrix<f64>> {
    if data.len() != dim * dim {
        return Err(SyncError::DimensionMismatch { expected: format!("{} entries", dim * dim), got: format!("{} entries", data.len()) });
    }
    Ok(DMatrix::from_row_slice(dim, dim, data))
}

/// `{"spec", "graph", "transforms": {"i,j": [row-major]}, "ground_truth"}`
/// with 1-based node ids.
pub fn instance_to_json(inst: &ProblemInstance) -> Value {
    let transforms: BTreeMap<String, Vec<f64>> =
        inst.transforms.iter().map(|((i, j), m)| (format!("{},{}", i + 1, j + 1), row_major(m))).collect();
    let mut doc = json!({
        "spec": inst.spec,
        "graph": graph::graph_to_json(&inst.graph, Some(&inst.qsc_edges)),
        "transforms": transforms,
    });
    if let Some(truth) = &inst.ground_truth {
        doc["ground_truth"] = json!(truth.iter().map(row_major).collect::<Vec<_>>());
    }
    doc
}

pub fn instance_from_json(value: &Value) -> Result<ProblemInstance> {
    let spec: InstanceSpec = serde_json::from_value(value.get("spec").cloned().ok_or_else(|| missing("spec"))?)?;
    let (graph, qsc) = graph::graph_from_json(value.get("graph").ok_or_else(|| missing("graph"))?)?;
    let dim = if spec.class.is_homogeneous() { spec.d + 1 } else { spec.d };
    let raw: BTreeMap<String, Vec<f64>> =
        serde_json::from_value(value.get("transforms").cloned().ok_or_else(|| missing("transforms"))?)?;
    let mut transforms = EdgeTransforms::new(dim);
    for (key, data) in raw {
        let (i, j) = parse_edge_key(&key)?;
        transforms.insert(i, j, from_row_major(&data, dim)?)?;
    }
    transforms.validate(&graph)?;
    let ground_truth = match value.get("ground_truth") {
        Some(Value::Null) | None => None,
        Some(v) => {
            let rows: Vec<Vec<f64>> = serde_json::from_value(v.clone())?;
            Some(rows.iter().map(|r| from_row_major(r, dim)).collect::<Result<Vec<_>>>()?)
        }
    };
    let qsc_edges = qsc.unwrap_or_default();
    Ok(ProblemInstance { spec, graph, qsc_edges, transforms, ground_truth })
}

fn missing(field: &str) -> SyncError {
    SyncError::InvalidInput(format!("instance JSON lacks {field:?}"))
}

fn parse_edge_key(key: &str) -> Result<(usize, usize)> {
    let bad = || SyncError::InvalidInput(format!("edge key {key:?} is not \"i,j\" with 1-based ids"));
    let (a, b) = key.split_once(',').ok_or_else(bad)?;
    let i: usize = a.trim().parse().map_err(|_| bad())?;
    let j: usize = b.trim().parse().map_err(|_| bad())?;
    if i == 0 || j == 0 {
        return Err(bad());
    }
    Ok((i - 1, j - 1))
}
