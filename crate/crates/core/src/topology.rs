//! Semi-random undirected topologies with degree bounds and connectivity.
//!
//! Generation builds a seeded random spanning tree (connected, every degree
//! at least one) and then adds uniformly chosen edges between nodes that
//! still have spare degree until the target average degree is reached.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TopologyError;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyGraph {
    adjacency: Vec<Vec<usize>>,
}

impl TopologyGraph {
    /// Builds a graph from an undirected edge list.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        let mut adjacency = vec![Vec::new(); node_count];
        for &(a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(TopologyError::Malformed(format!(
                    "edge ({a}, {b}) outside 0..{node_count}"
                )));
            }
            if a == b {
                return Err(TopologyError::Malformed(format!("self-loop at {a}")));
            }
            if adjacency[a].contains(&b) {
                return Err(TopologyError::Malformed(format!(
                    "duplicate edge ({a}, {b})"
                )));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(TopologyGraph { adjacency })
    }

    /// Takes adjacency lists as given (sorted, otherwise unchecked); see
    /// [`validate`] for well-formedness checks.
    pub fn from_adjacency(mut adjacency: Vec<Vec<usize>>) -> Self {
        for list in &mut adjacency {
            list.sort_unstable();
        }
        TopologyGraph { adjacency }
    }

    pub fn ring(n: usize) -> Self {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::from_edges(n, &edges).expect("ring of n >= 3")
    }

    pub fn complete(n: usize) -> Self {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        Self::from_edges(n, &edges).expect("complete graph")
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges).expect("path graph")
    }

    pub fn star(leaves: usize) -> Self {
        let edges: Vec<_> = (1..=leaves).map(|i| (0, i)).collect();
        Self::from_edges(leaves + 1, &edges).expect("star graph")
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn avg_degree(&self) -> f64 {
        if self.adjacency.is_empty() {
            return 0.0;
        }
        2.0 * self.edge_count() as f64 / self.node_count() as f64
    }

    /// Hop distances from `source`; `None` for unreachable nodes.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.node_count()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or(0);
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.node_count() == 0 || self.bfs_distances(0).iter().all(Option::is_some)
    }

    fn check_well_formed(&self) -> Result<(), TopologyError> {
        let n = self.node_count();
        for (i, list) in self.adjacency.iter().enumerate() {
            for (pos, &j) in list.iter().enumerate() {
                if j >= n {
                    return Err(TopologyError::Malformed(format!(
                        "node {i} lists unknown {j}"
                    )));
                }
                if j == i {
                    return Err(TopologyError::Malformed(format!("self-loop at {i}")));
                }
                if pos > 0 && list[pos - 1] == j {
                    return Err(TopologyError::Malformed(format!(
                        "duplicate edge ({i}, {j})"
                    )));
                }
                if self.adjacency[j].binary_search(&i).is_err() {
                    return Err(TopologyError::Malformed(format!(
                        "asymmetric edge: {i} lists {j} but not the reverse"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Space-separated edge list, one `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        self.edges()
            .into_iter()
            .map(|(i, j)| format!("{i} {j}\n"))
            .collect()
    }

    pub fn parse_edge_list(node_count: usize, text: &str) -> Result<Self, TopologyError> {
        let mut edges = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse = |s: Option<&str>| {
                s.and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| TopologyError::Parse {
                        line: line_no + 1,
                        message: format!("expected two node indices, got {line:?}"),
                    })
            };
            let mut parts = line.split_whitespace();
            let a = parse(parts.next())?;
            let b = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(TopologyError::Parse {
                    line: line_no + 1,
                    message: "trailing tokens".into(),
                });
            }
            edges.push((a, b));
        }
        Self::from_edges(node_count, &edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyConstraints {
    pub min_degree: usize,
    pub max_degree: usize,
    pub require_connected: bool,
    pub target_avg_degree: f64,
}

impl TopologyConstraints {
    /// Degrees in `[1, 8]`, connected, with the given average degree.
    pub fn with_target(target_avg_degree: f64) -> Self {
        TopologyConstraints {
            min_degree: 1,
            max_degree: 8,
            require_connected: true,
            target_avg_degree,
        }
    }
}

/// Permitted deviation of the generated average degree from the target.
pub const AVG_DEGREE_TOLERANCE: f64 = 0.5;
const ATTEMPT_BUDGET: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub connected: bool,
    /// `(node, degree)` for every node outside the degree bounds.
    pub degree_violations: Vec<(usize, usize)>,
    pub avg_degree: f64,
}

impl ValidationReport {
    pub fn passes(&self, constraints: &TopologyConstraints) -> bool {
        (self.connected || !constraints.require_connected)
            && self.degree_violations.is_empty()
            && (self.avg_degree - constraints.target_avg_degree).abs()
                <= AVG_DEGREE_TOLERANCE + 1e-12
    }
}

pub fn validate(
    graph: &TopologyGraph,
    constraints: &TopologyConstraints,
) -> Result<ValidationReport, TopologyError> {
    graph.check_well_formed()?;
    let degree_violations = (0..graph.node_count())
        .filter_map(|i| {
            let d = graph.degree(i);
            (d < constraints.min_degree || d > constraints.max_degree).then_some((i, d))
        })
        .collect();
    Ok(ValidationReport {
        connected: graph.is_connected(),
        degree_violations,
        avg_degree: graph.avg_degree(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub avg_degree: f64,
    pub min_degree: usize,
    pub max_degree: usize,
    pub diameter: usize,
    /// Edges whose removal disconnects the graph.
    pub bridges: usize,
}

pub fn stats(graph: &TopologyGraph) -> Result<GraphStats, TopologyError> {
    graph.check_well_formed()?;
    if graph.node_count() == 0 || !graph.is_connected() {
        return Err(TopologyError::Disconnected);
    }
    let diameter = (0..graph.node_count())
        .map(|s| {
            graph
                .bfs_distances(s)
                .into_iter()
                .flatten()
                .max()
                .unwrap_or(0)
        })
        .max()
        .unwrap_or(0);
    let bridges = graph
        .edges()
        .into_iter()
        .filter(|&(a, b)| {
            let mut adj = graph.adjacency.clone();
            adj[a].retain(|&x| x != b);
            adj[b].retain(|&x| x != a);
            !TopologyGraph { adjacency: adj }.is_connected()
        })
        .count();
    let degrees = (0..graph.node_count()).map(|i| graph.degree(i));
    Ok(GraphStats {
        avg_degree: graph.avg_degree(),
        min_degree: degrees.clone().min().unwrap_or(0),
        max_degree: degrees.max().unwrap_or(0),
        diameter,
        bridges,
    })
}

/// Edge count achieving the target average within tolerance, or why none does.
fn target_edge_count(n: usize, c: &TopologyConstraints) -> Result<usize, TopologyError> {
    let unsat = |msg: String| Err(TopologyError::Unsatisfiable(msg));
    if n < 2 {
        return unsat(format!("need at least 2 nodes, got {n}"));
    }
    if c.min_degree < 1 || c.min_degree > c.max_degree {
        return unsat(format!(
            "degree bounds [{}, {}] invalid",
            c.min_degree, c.max_degree
        ));
    }
    let t = c.target_avg_degree;
    if !t.is_finite() || t < c.min_degree as f64 || t > c.max_degree as f64 {
        return unsat(format!(
            "target average degree {t} outside [{}, {}]",
            c.min_degree, c.max_degree
        ));
    }
    if t >= n as f64 {
        return unsat(format!(
            "target average degree {t} not below node count {n}"
        ));
    }
    if n > 2 && c.max_degree < 2 {
        return unsat("a connected graph on more than 2 nodes needs max_degree >= 2".into());
    }
    if c.min_degree > n - 1 {
        return unsat(format!(
            "min_degree {} impossible with {n} nodes",
            c.min_degree
        ));
    }
    let lowest = n - 1;
    let highest = (n * c.max_degree.min(n - 1)) / 2;
    let wanted = (t * n as f64 / 2.0).round() as usize;
    let edges = wanted.clamp(lowest, highest);
    let avg = 2.0 * edges as f64 / n as f64;
    if (avg - t).abs() > AVG_DEGREE_TOLERANCE {
        return unsat(format!(
            "closest reachable average degree {avg:.3} is more than {AVG_DEGREE_TOLERANCE} from {t}"
        ));
    }
    Ok(edges)
}

struct Builder {
    adj: Vec<Vec<usize>>,
    max_degree: usize,
}

impl Builder {
    fn has(&self, a: usize, b: usize) -> bool {
        self.adj[a].contains(&b)
    }

    fn link(&mut self, a: usize, b: usize) {
        self.adj[a].push(b);
        self.adj[b].push(a);
    }

    fn unlink(&mut self, a: usize, b: usize) {
        self.adj[a].retain(|&x| x != b);
        self.adj[b].retain(|&x| x != a);
    }

    fn spare(&self, a: usize) -> bool {
        self.adj[a].len() < self.max_degree
    }

    fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<_> = self
            .adj
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect();
        e.sort_unstable();
        e
    }

    /// When no free pair is left, rewires one edge to give spare-capacity
    /// nodes one more edge. Connectivity is preserved: either `u` and `v` are
    /// adjacent, or both new edges touch `u`.
    fn rewire(&mut self, rng: &mut ChaCha8Rng) -> bool {
        let spare: Vec<usize> = (0..self.adj.len()).filter(|&i| self.spare(i)).collect();
        let mut options: Vec<(usize, usize, usize, usize)> = Vec::new();
        for &(x, y) in &self.edges() {
            for &u in &spare {
                for &v in &spare {
                    let ok_pair = if u == v {
                        self.adj[u].len() + 2 <= self.max_degree
                    } else {
                        u < v && self.has(u, v)
                    };
                    if !ok_pair || [u, v].contains(&x) || [u, v].contains(&y) {
                        continue;
                    }
                    for (a, b) in [(x, y), (y, x)] {
                        if !self.has(u, a) && !self.has(v, b) {
                            options.push((u, v, a, b));
                        }
                    }
                }
            }
        }
        let Some(&(u, v, a, b)) = options.choose(rng) else {
            return false;
        };
        self.unlink(a, b);
        self.link(u, a);
        self.link(v, b);
        true
    }
}

fn attempt(
    n: usize,
    c: &TopologyConstraints,
    edges_wanted: usize,
    rng: &mut ChaCha8Rng,
) -> Option<TopologyGraph> {
    let mut b = Builder {
        adj: vec![Vec::new(); n],
        max_degree: c.max_degree,
    };
    // random spanning tree: attach nodes in shuffled order to an earlier node
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    for i in 1..n {
        let open: Vec<usize> = order[..i].iter().copied().filter(|&p| b.spare(p)).collect();
        let &parent = open.choose(rng)?;
        b.link(order[i], parent);
    }

    while b.edge_count() < edges_wanted {
        let needy: Vec<bool> = (0..n).map(|i| b.adj[i].len() < c.min_degree).collect();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if b.spare(i) && b.spare(j) && !b.has(i, j) {
                    pairs.push((i, j));
                }
            }
        }
        if needy.iter().any(|&x| x) {
            let urgent: Vec<_> = pairs
                .iter()
                .copied()
                .filter(|&(i, j)| needy[i] || needy[j])
                .collect();
            if !urgent.is_empty() {
                pairs = urgent;
            }
        }
        match pairs.choose(rng) {
            Some(&(i, j)) => b.link(i, j),
            None => {
                if !b.rewire(rng) {
                    return None;
                }
            }
        }
    }
    let graph = TopologyGraph::from_adjacency(b.adj);
    let ok = (0..n).all(|i| (c.min_degree..=c.max_degree).contains(&graph.degree(i)))
        && graph.is_connected();
    ok.then_some(graph)
}

/// Seeded semi-random topology satisfying `constraints`.
pub fn generate_semi_random(
    n: usize,
    constraints: &TopologyConstraints,
    seed: u64,
) -> Result<TopologyGraph, TopologyError> {
    let edges_wanted = target_edge_count(n, constraints)?;
    for a in 0..ATTEMPT_BUDGET {
        let mut rng = rng::stream(seed, &[rng::TAG_TOPOLOGY, n as u64, a as u64]);
        if let Some(g) = attempt(n, constraints, edges_wanted, &mut rng) {
            return Ok(g);
        }
    }
    Err(TopologyError::AttemptBudgetExhausted {
        attempts: ATTEMPT_BUDGET,
    })
}

/// JSON companion to an edge-list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyDescriptor {
    pub node_count: usize,
    pub seed: u64,
    pub constraints: TopologyConstraints,
    /// Edge-list file name, relative to the descriptor.
    pub edges_file: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TopologyError + '_ {
    move |source| TopologyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<stem>.edges` and `<stem>.json` into `dir`. Returns the
/// descriptor path.
pub fn save_topology(
    graph: &TopologyGraph,
    seed: u64,
    constraints: &TopologyConstraints,
    dir: &Path,
    stem: &str,
) -> Result<PathBuf, TopologyError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let edges_name = format!("{stem}.edges");
    let edges_path = dir.join(&edges_name);
    fs::write(&edges_path, graph.to_edge_list()).map_err(io_err(&edges_path))?;
    let descriptor = TopologyDescriptor {
        node_count: graph.node_count(),
        seed,
        constraints: *constraints,
        edges_file: edges_name,
    };
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&descriptor)?;
    fs::write(&json_path, text + "\n").map_err(io_err(&json_path))?;
    Ok(json_path)
}

pub fn load_topology(
    descriptor_path: &Path,
) -> Result<(TopologyGraph, TopologyDescriptor), TopologyError> {
    let text = fs::read_to_string(descriptor_path).map_err(io_err(descriptor_path))?;
    let descriptor: TopologyDescriptor = serde_json::from_str(&text)?;
    let edges_path = descriptor_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&descriptor.edges_file);
    let edges = fs::read_to_string(&edges_path).map_err(io_err(&edges_path))?;
    let graph = TopologyGraph::parse_edge_list(descriptor.node_count, &edges)?;
    Ok((graph, descriptor))
}
