//! Computation graph over transformer nodes, and circuits (kept-edge subsets).
//!
//! The graph has one node per attention head and per MLP, plus an input node
//! (embeddings) and an output node (unembedding). Edges follow the residual
//! rewrite: a node reads the sum of all upstream node outputs, where
//! "upstream" means any earlier layer, plus same-layer heads for an MLP.
//! Attention heads in the same layer do not connect to each other.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Input,
    Attn { layer: usize, head: usize },
    Mlp { layer: usize },
    Output,
}

impl NodeId {
    pub fn layer(&self) -> Option<usize> {
        match self {
            NodeId::Attn { layer, .. } | NodeId::Mlp { layer } => Some(*layer),
            _ => None,
        }
    }

    pub fn is_attn(&self) -> bool {
        matches!(self, NodeId::Attn { .. })
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Input => write!(f, "input"),
            NodeId::Attn { layer, head } => write!(f, "a{layer}.h{head}"),
            NodeId::Mlp { layer } => write!(f, "m{layer}"),
            NodeId::Output => write!(f, "output"),
        }
    }
}

impl FromStr for NodeId {
    type Err = Error;

    /// Parses the canonical names `input`, `a{l}.h{h}`, `m{l}`, `output`;
    /// the aliases `L{l}H{h}` and `MLP{l}` are accepted on load.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Schema(format!("unknown node name `{s}`"));
        match s {
            "input" => return Ok(NodeId::Input),
            "output" => return Ok(NodeId::Output),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("MLP").or_else(|| s.strip_prefix("m")) {
            if let Ok(layer) = rest.parse::<usize>() {
                return Ok(NodeId::Mlp { layer });
            }
        }
        if let Some(rest) = s.strip_prefix('a') {
            if let Some((l, h)) = rest.split_once(".h") {
                if let (Ok(layer), Ok(head)) = (l.parse(), h.parse()) {
                    return Ok(NodeId::Attn { layer, head });
                }
            }
        }
        if let Some(rest) = s.strip_prefix('L') {
            if let Some((l, h)) = rest.split_once('H') {
                if let (Ok(layer), Ok(head)) = (l.parse(), h.parse()) {
                    return Ok(NodeId::Attn { layer, head });
                }
            }
        }
        Err(bad())
    }
}

/// Dense computation graph for a given architecture.
///
/// Nodes are stored in topological order: input, then per layer the heads
/// (by index) followed by the MLP, then output. Edges are stored grouped by
/// destination (destinations in topological order, sources ascending), which
/// fixes the deterministic summation order used everywhere downstream.
#[derive(Debug)]
pub struct ComputationGraph {
    n_layers: usize,
    n_heads: usize,
    nodes: Vec<NodeId>,
    edges: Vec<(usize, usize)>,
    in_edges: Vec<std::ops::Range<usize>>,
    out_edges: Vec<Vec<usize>>,
    edge_index: HashMap<(usize, usize), usize>,
}

impl ComputationGraph {
    pub fn build(config: &ModelConfig) -> Arc<Self> {
        Self::build_dims(config.n_layers, config.n_heads)
    }

    pub fn build_dims(n_layers: usize, n_heads: usize) -> Arc<Self> {
        assert!(n_layers > 0 && n_heads > 0);
        let mut nodes = Vec::with_capacity(2 + n_layers * (n_heads + 1));
        nodes.push(NodeId::Input);
        for layer in 0..n_layers {
            for head in 0..n_heads {
                nodes.push(NodeId::Attn { layer, head });
            }
            nodes.push(NodeId::Mlp { layer });
        }
        nodes.push(NodeId::Output);

        let mut edges = Vec::new();
        let mut in_edges = Vec::with_capacity(nodes.len());
        for (dst_idx, dst) in nodes.iter().enumerate() {
            let start = edges.len();
            for (src_idx, src) in nodes.iter().enumerate().take(dst_idx) {
                if allowed_edge(*src, *dst) {
                    edges.push((src_idx, dst_idx));
                }
            }
            in_edges.push(start..edges.len());
        }
        let mut out_edges = vec![Vec::new(); nodes.len()];
        let mut edge_index = HashMap::with_capacity(edges.len());
        for (id, &(src, dst)) in edges.iter().enumerate() {
            out_edges[src].push(id);
            edge_index.insert((src, dst), id);
        }
        Arc::new(ComputationGraph {
            n_layers,
            n_heads,
            nodes,
            edges,
            in_edges,
            out_edges,
            edge_index,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Nodes in topological order. Every edge goes from an earlier to a
    /// later position in this slice.
    pub fn topo_order(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> NodeId {
        self.nodes[idx]
    }

    /// Topological rank of a node; the input node has rank 0 and the output
    /// node the maximal rank.
    pub fn node_index(&self, node: NodeId) -> Result<usize> {
        let idx = match node {
            NodeId::Input => 0,
            NodeId::Attn { layer, head } => {
                if layer >= self.n_layers || head >= self.n_heads {
                    return Err(Error::Graph(format!("node {node} out of range")));
                }
                1 + layer * (self.n_heads + 1) + head
            }
            NodeId::Mlp { layer } => {
                if layer >= self.n_layers {
                    return Err(Error::Graph(format!("node {node} out of range")));
                }
                1 + layer * (self.n_heads + 1) + self.n_heads
            }
            NodeId::Output => self.nodes.len() - 1,
        };
        Ok(idx)
    }

    pub fn output_index(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn edge(&self, id: usize) -> (usize, usize) {
        self.edges[id]
    }

    pub fn edge_nodes(&self, id: usize) -> (NodeId, NodeId) {
        let (s, d) = self.edges[id];
        (self.nodes[s], self.nodes[d])
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Edge ids entering `dst`, sources in ascending topological order.
    pub fn in_edge_ids(&self, dst: usize) -> std::ops::Range<usize> {
        self.in_edges[dst].clone()
    }

    pub fn out_edge_ids(&self, src: usize) -> &[usize] {
        &self.out_edges[src]
    }

    /// Looks up an edge by endpoints; errors for pairs outside the graph
    /// (e.g. a same-layer head-to-head edge).
    pub fn edge_id(&self, src: NodeId, dst: NodeId) -> Result<usize> {
        let s = self.node_index(src)?;
        let d = self.node_index(dst)?;
        self.edge_index
            .get(&(s, d))
            .copied()
            .ok_or_else(|| Error::Graph(format!("edge {src} -> {dst} is not in the graph")))
    }
}

/// The residual-rewrite upstream relation. A head at layer `l` reads the
/// input, all heads and MLPs of layers `< l`; an MLP at layer `l`
/// additionally reads the heads of layer `l` itself; the output reads
/// everything.
fn allowed_edge(src: NodeId, dst: NodeId) -> bool {
    use NodeId::*;
    match (src, dst) {
        (_, Input) | (Output, _) => false,
        (Input, _) => true,
        (_, Output) => true,
        (Attn { layer: ls, .. }, Attn { layer: ld, .. }) => ls < ld,
        (Attn { layer: ls, .. }, Mlp { layer: ld }) => ls <= ld,
        (Mlp { layer: ls }, Attn { layer: ld, .. }) => ls < ld,
        (Mlp { layer: ls }, Mlp { layer: ld }) => ls < ld,
    }
}

/// How [`Circuit::is_connected`] interprets connectivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConnectivityRule {
    /// A directed input-to-output path exists over kept edges (default).
    #[default]
    InputOutputPath,
    /// Every node touched by a kept edge lies on some input-to-output path.
    AllNodesOnPath,
}

/// Provenance recorded with a circuit (threshold, metric, ablation mode,
/// dataset, and creation timestamp).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub tau: Option<f64>,
    pub metric: String,
    pub ablation: String,
    pub dataset_id: String,
    pub timestamp: String,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            tau: None,
            metric: "match_nll".to_owned(),
            ablation: "zero".to_owned(),
            dataset_id: String::new(),
            timestamp: String::new(),
        }
    }
}

/// A kept-edge subset of a computation graph. The node set is derived from
/// the kept edges (endpoints, plus input and output).
#[derive(Debug, Clone)]
pub struct Circuit {
    pub graph: Arc<ComputationGraph>,
    kept: Vec<bool>,
    kept_count: usize,
    pub provenance: Provenance,
}

impl Circuit {
    pub fn full(graph: Arc<ComputationGraph>) -> Self {
        let kept_count = graph.edge_count();
        Circuit {
            kept: vec![true; kept_count],
            kept_count,
            graph,
            provenance: Provenance::default(),
        }
    }

    pub fn empty(graph: Arc<ComputationGraph>) -> Self {
        Circuit {
            kept: vec![false; graph.edge_count()],
            kept_count: 0,
            graph,
            provenance: Provenance::default(),
        }
    }

    pub fn from_kept(graph: Arc<ComputationGraph>, kept: Vec<bool>) -> Result<Self> {
        if kept.len() != graph.edge_count() {
            return Err(Error::Graph(format!(
                "kept mask has {} entries for {} edges",
                kept.len(),
                graph.edge_count()
            )));
        }
        let kept_count = kept.iter().filter(|&&k| k).count();
        Ok(Circuit {
            graph,
            kept,
            kept_count,
            provenance: Provenance::default(),
        })
    }

    /// Builds a circuit from explicit endpoint pairs, rejecting any pair
    /// that is not an edge of the graph.
    pub fn from_edge_list(graph: Arc<ComputationGraph>, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        let mut kept = vec![false; graph.edge_count()];
        let mut kept_count = 0;
        for &(src, dst) in edges {
            let id = graph.edge_id(src, dst)?;
            if !kept[id] {
                kept[id] = true;
                kept_count += 1;
            }
        }
        Ok(Circuit {
            graph,
            kept,
            kept_count,
            provenance: Provenance::default(),
        })
    }

    pub fn contains(&self, edge_id: usize) -> bool {
        self.kept[edge_id]
    }

    pub fn kept_mask(&self) -> &[bool] {
        &self.kept
    }

    pub fn edge_count(&self) -> usize {
        self.kept_count
    }

    pub fn is_full(&self) -> bool {
        self.kept_count == self.graph.edge_count()
    }

    pub fn remove(&mut self, edge_id: usize) {
        if self.kept[edge_id] {
            self.kept[edge_id] = false;
            self.kept_count -= 1;
        }
    }

    pub fn insert(&mut self, edge_id: usize) {
        if !self.kept[edge_id] {
            self.kept[edge_id] = true;
            self.kept_count += 1;
        }
    }

    pub fn kept_edge_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.kept
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
    }

    /// Node indices of the circuit: endpoints of kept edges plus input and
    /// output.
    pub fn node_set(&self) -> std::collections::BTreeSet<usize> {
        let mut set = std::collections::BTreeSet::new();
        set.insert(0);
        set.insert(self.graph.output_index());
        for id in self.kept_edge_ids() {
            let (s, d) = self.graph.edge(id);
            set.insert(s);
            set.insert(d);
        }
        set
    }

    /// True iff a directed input-to-output path exists over kept edges
    /// (or, under [`ConnectivityRule::AllNodesOnPath`], additionally every
    /// kept node lies on such a path).
    pub fn is_connected(&self, rule: ConnectivityRule) -> bool {
        let n = self.graph.node_count();
        let out_idx = self.graph.output_index();
        // forward reachability from input
        let mut fwd = vec![false; n];
        fwd[0] = true;
        for dst in 1..n {
            for eid in self.graph.in_edge_ids(dst) {
                if self.kept[eid] && fwd[self.graph.edge(eid).0] {
                    fwd[dst] = true;
                    break;
                }
            }
        }
        if !fwd[out_idx] {
            return false;
        }
        match rule {
            ConnectivityRule::InputOutputPath => true,
            ConnectivityRule::AllNodesOnPath => {
                let mut bwd = vec![false; n];
                bwd[out_idx] = true;
                for dst in (1..n).rev() {
                    if !bwd[dst] {
                        continue;
                    }
                    for eid in self.graph.in_edge_ids(dst) {
                        if self.kept[eid] {
                            bwd[self.graph.edge(eid).0] = true;
                        }
                    }
                }
                self.node_set().iter().all(|&i| fwd[i] && bwd[i])
            }
        }
    }
}

/// Uniformly samples a connected circuit with exactly `target_edge_count`
/// kept edges, rejection-sampling until the input-output path exists.
/// Deterministic for a given seed; fails once `retry_cap` draws were
/// rejected (default cap used by callers: 1000).
pub fn random_circuit(
    graph: Arc<ComputationGraph>,
    target_edge_count: usize,
    seed: u64,
    retry_cap: usize,
) -> Result<Circuit> {
    let total = graph.edge_count();
    if target_edge_count == 0 || target_edge_count > total {
        return Err(Error::invalid(format!(
            "target_edge_count must be in 1..={total}, got {target_edge_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..retry_cap {
        let picked = rand::seq::index::sample(&mut rng, total, target_edge_count);
        let mut kept = vec![false; total];
        for i in picked {
            kept[i] = true;
        }
        let circuit = Circuit::from_kept(Arc::clone(&graph), kept)?;
        if circuit.is_connected(ConnectivityRule::InputOutputPath) {
            return Ok(circuit);
        }
    }
    Err(Error::invalid(format!(
        "no connected circuit with {target_edge_count} edges found in {retry_cap} draws"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overlap {
    pub node_hit: f64,
    pub edge_hit: f64,
}

/// Overlap of circuit `b` against the reference circuit `a`:
/// `node_hit = |N_b ∩ N_a| / |N_a|`, and analogously for edges.
pub fn overlap(a: &Circuit, b: &Circuit) -> Result<Overlap> {
    if !Arc::ptr_eq(&a.graph, &b.graph)
        && (a.graph.n_layers != b.graph.n_layers || a.graph.n_heads != b.graph.n_heads)
    {
        return Err(Error::Graph(
            "overlap requires circuits over the same graph".to_owned(),
        ));
    }
    if a.edge_count() == 0 {
        return Err(Error::invalid("reference circuit has no edges"));
    }
    let na = a.node_set();
    let nb = b.node_set();
    let node_shared = na.intersection(&nb).count();
    let edge_shared = a
        .kept_edge_ids()
        .filter(|&id| b.contains(id))
        .count();
    Ok(Overlap {
        node_hit: node_shared as f64 / na.len() as f64,
        edge_hit: edge_shared as f64 / a.edge_count() as f64,
    })
}
