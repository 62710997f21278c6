//! Directed frame graphs: construction, connectivity classification and the
//! random generators used by the experiment harness.
//!
//! Nodes are 0-based internally. The JSON representation and everything shown
//! to a user is 1-based.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SyncError};

/// Directed graph over `n` coordinate frames. Self-loops are never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameGraph {
    n: usize,
    out: Vec<BTreeSet<usize>>,
    inc: Vec<BTreeSet<usize>>,
    num_edges: usize,
}

impl FrameGraph {
    /// Graph with `n` nodes and no edges.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            out: vec![BTreeSet::new(); n],
            inc: vec![BTreeSet::new(); n],
            num_edges: 0,
        }
    }

    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut g = Self::new(n);
        for (i, j) in edges {
            g.add_edge(i, j)?;
        }
        Ok(g)
    }

    /// All `n(n-1)` ordered pairs.
    pub fn complete(n: usize) -> Self {
        let mut g = Self::new(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    g.insert(i, j);
                }
            }
        }
        g
    }

    /// Adds edge `(i, j)`. Returns `Ok(false)` if it was already present.
    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<bool> {
        if i >= self.n || j >= self.n {
            return Err(SyncError::InvalidGraph(format!(
                "edge ({}, {}) out of range for n = {}",
                i + 1,
                j + 1,
                self.n
            )));
        }
        if i == j {
            return Err(SyncError::InvalidGraph(format!("self-loop at node {}", i + 1)));
        }
        Ok(self.insert(i, j))
    }

    fn insert(&mut self, i: usize, j: usize) -> bool {
        let fresh = self.out[i].insert(j);
        if fresh {
            self.inc[j].insert(i);
            self.num_edges += 1;
        }
        fresh
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && self.out[i].contains(&j)
    }

    /// Edges in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
    }

    /// `N_i = { j : (i, j) in E }`.
    pub fn out_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.out[i].iter().copied()
    }

    /// `{ j : (j, i) in E }`.
    pub fn in_neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.inc[i].iter().copied()
    }

    pub fn out_degree(&self, i: usize) -> usize {
        self.out[i].len()
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.inc[i].len()
    }

    pub fn is_complete(&self) -> bool {
        self.num_edges == self.n * self.n.saturating_sub(1)
    }

    pub fn is_symmetric(&self) -> bool {
        self.edges().all(|(i, j)| self.has_edge(j, i))
    }

    /// Binary adjacency matrix, `A_ij = 1` iff `(i, j)` is an edge.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for (i, j) in self.edges() {
            a[(i, j)] = 1.0;
        }
        a
    }

    /// `L = diag(A 1) - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.adjacency();
        for i in 0..self.n {
            l[(i, i)] = self.out_degree(i) as f64;
        }
        l
    }

    /// Graph with every edge direction flipped.
    pub fn reverse(&self) -> Self {
        Self {
            n: self.n,
            out: self.inc.clone(),
            inc: self.out.clone(),
            num_edges: self.num_edges,
        }
    }

    /// Union of `self` and its reverse.
    pub fn symmetrized(&self) -> Self {
        let mut g = self.clone();
        for (i, j) in self.edges() {
            g.insert(j, i);
        }
        g
    }

    /// True iff the undirected version of the graph has a single component.
    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for w in self.out[v].iter().chain(self.inc[v].iter()) {
                if !seen[*w] {
                    seen[*w] = true;
                    count += 1;
                    queue.push_back(*w);
                }
            }
        }
        count == self.n
    }

    /// Nodes reachable from every node along directed paths.
    pub fn find_centers(&self) -> Vec<usize> {
        (0..self.n).filter(|&c| self.reached_by_all(c)).collect()
    }

    pub fn is_qsc(&self) -> bool {
        (0..self.n).any(|c| self.reached_by_all(c))
    }

    // Reverse BFS from `c` along incoming edges.
    fn reached_by_all(&self, c: usize) -> bool {
        let mut seen = vec![false; self.n];
        seen[c] = true;
        let mut count = 1;
        let mut queue = VecDeque::from([c]);
        while let Some(v) = queue.pop_front() {
            for &w in &self.inc[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n
    }

    /// Strongly connected components (Kosaraju). Each component is sorted.
    pub fn strongly_connected_components(&self) -> Vec<Vec<usize>> {
        let mut finished = Vec::with_capacity(self.n);
        let mut seen = vec![false; self.n];
        for root in 0..self.n {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            let mut stack = vec![(root, self.out[root].iter())];
            while let Some((v, it)) = stack.last_mut() {
                let v = *v;
                match it.find(|w| !seen[**w]) {
                    Some(&w) => {
                        seen[w] = true;
                        stack.push((w, self.out[w].iter()));
                    }
                    None => {
                        finished.push(v);
                        stack.pop();
                    }
                }
            }
        }
        let mut comp = vec![usize::MAX; self.n];
        let mut components = Vec::new();
        for &root in finished.iter().rev() {
            if comp[root] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut members = vec![root];
            comp[root] = id;
            let mut stack = vec![root];
            while let Some(v) = stack.pop() {
                for &w in &self.inc[v] {
                    if comp[w] == usize::MAX {
                        comp[w] = id;
                        members.push(w);
                        stack.push(w);
                    }
                }
            }
            members.sort_unstable();
            components.push(members);
        }
        components
    }

    pub fn contains_all(&self, edges: &[(usize, usize)]) -> bool {
        edges.iter().all(|&(i, j)| self.has_edge(i, j))
    }
}

/// Density of a graph relative to its embedded minimum QSC tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDensity {
    pub rho: f64,
    pub qsc_edges: Vec<(usize, usize)>,
}

/// Fraction of optional entries of the adjacency matrix that are present:
/// `sum_{(i,j) not in E_qsc} A_ij / (n^2 - |E_qsc|)`.
///
/// The denominator counts the diagonal, which can never be filled because
/// self-loops are not stored, so the complete graph is assigned 1 by convention.
pub fn density(g: &FrameGraph, qsc_edges: &[(usize, usize)]) -> f64 {
    if g.is_complete() {
        return 1.0;
    }
    let n = g.n();
    let qsc: BTreeSet<_> = qsc_edges.iter().copied().collect();
    let denom = (n * n - qsc.len()) as f64;
    if denom <= 0.0 {
        return 0.0;
    }
    let present = g.edges().filter(|e| !qsc.contains(e)).count() as f64;
    present / denom
}

/// Random minimum QSC graph: a spanning tree in which every node is attached
/// by an edge pointing toward a node already in the tree. The random root is a
/// center of the result.
pub fn generate_min_qsc<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (FrameGraph, GraphDensity) {
    let mut g = FrameGraph::new(n);
    if n == 0 {
        return (g, GraphDensity { rho: 0.0, qsc_edges: vec![] });
    }
    let root = rng.random_range(0..n);
    let mut included = vec![root];
    let mut pending: Vec<usize> = (0..n).filter(|&v| v != root).collect();
    let mut qsc_edges = Vec::with_capacity(n - 1);
    while !pending.is_empty() {
        let i = pending.swap_remove(rng.random_range(0..pending.len()));
        let j = included[rng.random_range(0..included.len())];
        g.insert(i, j);
        qsc_edges.push((i, j));
        included.push(i);
    }
    qsc_edges.sort_unstable();
    (g, GraphDensity { rho: 0.0, qsc_edges })
}

/// Adds uniformly random absent edges until the density reaches `target_rho`.
pub fn densify<R: Rng + ?Sized>(
    g: &FrameGraph,
    qsc_edges: &[(usize, usize)],
    target_rho: f64,
    rng: &mut R,
) -> Result<FrameGraph> {
    if !(0.0..=1.0).contains(&target_rho) {
        return Err(SyncError::InvalidInput(format!("target density {target_rho} outside [0, 1]")));
    }
    if !g.contains_all(qsc_edges) {
        return Err(SyncError::InvalidGraph("graph does not contain its QSC tree".into()));
    }
    let mut out = g.clone();
    if density(&out, qsc_edges) >= target_rho {
        return Ok(out);
    }
    let n = g.n();
    let mut absent: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && !g.has_edge(i, j))
        .collect();
    absent.shuffle(rng);
    for (i, j) in absent {
        out.insert(i, j);
        if density(&out, qsc_edges) >= target_rho {
            break;
        }
    }
    Ok(out)
}

/// Complete graph with `missing` randomly chosen off-tree edges removed. The
/// QSC tree is always kept, so the result stays QSC.
pub fn remove_random_edges<R: Rng + ?Sized>(
    n: usize,
    qsc_edges: &[(usize, usize)],
    missing: usize,
    rng: &mut R,
) -> Result<FrameGraph> {
    let tree: BTreeSet<_> = qsc_edges.iter().copied().collect();
    let mut optional: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && !tree.contains(&(i, j)))
        .collect();
    if missing > optional.len() {
        return Err(SyncError::InvalidInput(format!(
            "cannot remove {missing} edges, only {} optional edges exist",
            optional.len()
        )));
    }
    optional.shuffle(rng);
    let removed: BTreeSet<_> = optional[..missing].iter().copied().collect();
    let mut g = FrameGraph::new(n);
    for i in 0..n {
        for j in 0..n {
            if i != j && !removed.contains(&(i, j)) {
                g.insert(i, j);
            }
        }
    }
    Ok(g)
}

/// Random spanning tree drawn from the edges of a QSC graph, grown outward from
/// a uniformly chosen center along incoming edges. Returns the tree and its
/// root.
pub fn random_min_qsc_subgraph<R: Rng + ?Sized>(
    g: &FrameGraph,
    rng: &mut R,
) -> Result<(FrameGraph, usize)> {
    let centers = g.find_centers();
    let &center = centers.choose(rng).ok_or(SyncError::NonQscGraph)?;
    let n = g.n();
    let mut tree = FrameGraph::new(n);
    let mut in_tree = vec![false; n];
    in_tree[center] = true;
    let mut members = vec![center];
    while tree.num_edges() + 1 < n {
        // Restricting the draw to members that still have a free in-neighbor
        // is equivalent to rejection sampling over all members.
        let open: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&r| g.in_neighbors(r).any(|i| !in_tree[i]))
            .collect();
        let &r = open.choose(rng).ok_or(SyncError::NonQscGraph)?;
        let candidates: Vec<usize> = g.in_neighbors(r).filter(|&i| !in_tree[i]).collect();
        let &r_prime = candidates.choose(rng).expect("open member has a candidate");
        tree.insert(r_prime, r);
        in_tree[r_prime] = true;
        members.push(r_prime);
    }
    Ok((tree, center))
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qsc_edges: Option<Vec<[usize; 2]>>,
}

fn to_one_based(edges: impl Iterator<Item = (usize, usize)>) -> Vec<[usize; 2]> {
    edges.map(|(i, j)| [i + 1, j + 1]).collect()
}

fn from_one_based(edges: &[[usize; 2]]) -> Result<Vec<(usize, usize)>> {
    edges
        .iter()
        .map(|&[i, j]| {
            if i == 0 || j == 0 {
                Err(SyncError::InvalidGraph("node ids are 1-based".into()))
            } else {
                Ok((i - 1, j - 1))
            }
        })
        .collect()
}

/// Serializes to `{"n", "edges", "qsc_edges"?}` with 1-based node ids.
pub fn graph_to_json(g: &FrameGraph, qsc_edges: Option<&[(usize, usize)]>) -> serde_json::Value {
    let doc = GraphJson {
        n: g.n(),
        edges: to_one_based(g.edges()),
        qsc_edges: qsc_edges.map(|e| to_one_based(e.iter().copied())),
    };
    serde_json::to_value(doc).expect("graph serializes")
}

pub fn graph_from_json(value: &serde_json::Value) -> Result<(FrameGraph, Option<Vec<(usize, usize)>>)> {
    let doc: GraphJson = serde_json::from_value(value.clone())?;
    let g = FrameGraph::from_edges(doc.n, from_one_based(&doc.edges)?)?;
    let qsc = doc.qsc_edges.as_deref().map(from_one_based).transpose()?;
    Ok((g, qsc))
}
