//! Bipartite node/hyperedge structure shared by tables and triple sets.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Table, TripleSet};

pub const REVERSE_MARKER: &str = " [reverse]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Cell,
    Entity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Row,
    Column,
    Relation,
    ReverseRelation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    None,
    HeadSlot,
    TailSlot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub label: String,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperedge {
    pub id: usize,
    pub label: String,
    pub kind: EdgeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incidence {
    pub node: usize,
    pub hyperedge: usize,
    pub tag: Slot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    OfNode,
    OfHyperedge,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    nodes: Vec<Node>,
    hyperedges: Vec<Hyperedge>,
    incidence: Vec<Incidence>,
}

/// Immutable after construction. Adjacency lists are kept in incidence
/// insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HyperGraph {
    nodes: Vec<Node>,
    hyperedges: Vec<Hyperedge>,
    incidence: Vec<Incidence>,
    node_edges: Vec<Vec<usize>>,
    edge_nodes: Vec<Vec<usize>>,
}

impl HyperGraph {
    /// Validates ids (dense, 0-based, matching position), references,
    /// duplicate pairs, and the per-kind degree rules.
    pub fn new(nodes: Vec<Node>, hyperedges: Vec<Hyperedge>, incidence: Vec<Incidence>) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidGraph(msg));
        if let Some(n) = nodes.iter().enumerate().find(|(i, n)| n.id != *i) {
            return bad(format!("node at position {} has id {}", n.0, n.1.id));
        }
        if let Some(e) = hyperedges.iter().enumerate().find(|(i, e)| e.id != *i) {
            return bad(format!("hyperedge at position {} has id {}", e.0, e.1.id));
        }
        let mut node_edges = vec![Vec::new(); nodes.len()];
        let mut edge_nodes = vec![Vec::new(); hyperedges.len()];
        let mut seen = HashSet::new();
        for inc in &incidence {
            if inc.node >= nodes.len() {
                return Err(Error::UnknownId {
                    side: "node",
                    id: inc.node,
                });
            }
            if inc.hyperedge >= hyperedges.len() {
                return Err(Error::UnknownId {
                    side: "hyperedge",
                    id: inc.hyperedge,
                });
            }
            if !seen.insert((inc.node, inc.hyperedge)) {
                return bad(format!("duplicate incidence ({}, {})", inc.node, inc.hyperedge));
            }
            node_edges[inc.node].push(inc.hyperedge);
            edge_nodes[inc.hyperedge].push(inc.node);
        }
        let g = Self {
            nodes,
            hyperedges,
            incidence,
            node_edges,
            edge_nodes,
        };
        g.check_kinds()?;
        Ok(g)
    }

    fn check_kinds(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGraph(msg));
        let mut slots: Vec<Vec<Slot>> = vec![Vec::new(); self.hyperedges.len()];
        for inc in &self.incidence {
            let node = &self.nodes[inc.node];
            let edge = &self.hyperedges[inc.hyperedge];
            let structural = matches!(edge.kind, EdgeKind::Row | EdgeKind::Column);
            let cell = node.kind == NodeKind::Cell;
            if structural != cell {
                return bad(format!(
                    "{:?} node {} joined to {:?} hyperedge {}",
                    node.kind, node.id, edge.kind, edge.id
                ));
            }
            if structural && inc.tag != Slot::None {
                return bad(format!("tagged incidence on {:?} hyperedge {}", edge.kind, edge.id));
            }
            slots[inc.hyperedge].push(inc.tag);
        }
        for (e, s) in self.hyperedges.iter().zip(&slots) {
            if matches!(e.kind, EdgeKind::Relation | EdgeKind::ReverseRelation) {
                let head = s.iter().filter(|t| **t == Slot::HeadSlot).count();
                let tail = s.iter().filter(|t| **t == Slot::TailSlot).count();
                if s.len() != 2 || head != 1 || tail != 1 {
                    return bad(format!("relation hyperedge {} needs one head and one tail", e.id));
                }
            }
        }
        for n in &self.nodes {
            if n.kind == NodeKind::Cell {
                let kinds: Vec<EdgeKind> = self.node_edges[n.id].iter().map(|&e| self.hyperedges[e].kind).collect();
                let rows = kinds.iter().filter(|k| **k == EdgeKind::Row).count();
                if kinds.len() != 2 || rows != 1 {
                    return bad(format!("cell node {} needs one row and one column hyperedge", n.id));
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn hyperedges(&self) -> &[Hyperedge] {
        &self.hyperedges
    }

    pub fn incidence(&self) -> &[Incidence] {
        &self.incidence
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_hyperedges(&self) -> usize {
        self.hyperedges.len()
    }

    pub fn neighbors(&self, id: usize, side: Side) -> Result<&[usize]> {
        let (lists, name) = match side {
            Side::OfNode => (&self.node_edges, "node"),
            Side::OfHyperedge => (&self.edge_nodes, "hyperedge"),
        };
        lists
            .get(id)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownId { side: name, id })
    }

    /// Hyperedges incident to every node, indexed by node id.
    pub fn node_adjacency(&self) -> &[Vec<usize>] {
        &self.node_edges
    }

    /// Nodes incident to every hyperedge, indexed by hyperedge id.
    pub fn edge_adjacency(&self) -> &[Vec<usize>] {
        &self.edge_nodes
    }

    pub fn to_json(&self) -> String {
        let raw = RawGraph {
            nodes: self.nodes.clone(),
            hyperedges: self.hyperedges.clone(),
            incidence: self.incidence.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("graph serialization is infallible")
    }

    pub fn from_json(raw: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(raw).map_err(|e| Error::Decode(e.to_string()))?;
        let r: RawGraph = serde_json::from_str(text).map_err(|e| Error::Decode(e.to_string()))?;
        Self::new(r.nodes, r.hyperedges, r.incidence)
    }

    /// Order-free summary: sorted list of (node label, sorted labels of the
    /// nodes reachable through each incident hyperedge, with the hyperedge
    /// kind). Equal for hypergraphs related by a row or column permutation.
    pub fn fingerprint(&self) -> Vec<(String, Vec<(EdgeKind, Vec<String>)>)> {
        let mut out: Vec<_> = self
            .nodes
            .iter()
            .map(|n| {
                let mut around: Vec<(EdgeKind, Vec<String>)> = self.node_edges[n.id]
                    .iter()
                    .map(|&e| {
                        let mut labels: Vec<String> = self.edge_nodes[e]
                            .iter()
                            .map(|&v| self.nodes[v].label.clone())
                            .collect();
                        labels.sort();
                        (self.hyperedges[e].kind, labels)
                    })
                    .collect();
                around.sort_by(|a, b| (a.0 as u8, &a.1).cmp(&(b.0 as u8, &b.1)));
                (n.label.clone(), around)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| cmp_around(&a.1, &b.1)));
        out
    }

    /// Sorted node-degree list.
    pub fn degree_multiset(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.node_edges.iter().map(Vec::len).collect();
        d.sort_unstable();
        d
    }

    /// Splits into connected components. Each entry lists the node ids and
    /// hyperedge ids of one component in ascending order.
    pub fn components(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut node_comp = vec![usize::MAX; self.nodes.len()];
        let mut out = Vec::new();
        for start in 0..self.nodes.len() {
            if node_comp[start] != usize::MAX {
                continue;
            }
            let c = out.len();
            let mut stack = vec![start];
            node_comp[start] = c;
            let mut nodes = Vec::new();
            let mut edges = HashSet::new();
            while let Some(v) = stack.pop() {
                nodes.push(v);
                for &e in &self.node_edges[v] {
                    if edges.insert(e) {
                        for &u in &self.edge_nodes[e] {
                            if node_comp[u] == usize::MAX {
                                node_comp[u] = c;
                                stack.push(u);
                            }
                        }
                    }
                }
            }
            nodes.sort_unstable();
            let mut edges: Vec<usize> = edges.into_iter().collect();
            edges.sort_unstable();
            out.push((nodes, edges));
        }
        out
    }

    /// The subgraph on the given node and hyperedge ids, renumbered densely
    /// in the given order.
    pub fn subgraph(&self, nodes: &[usize], edges: &[usize]) -> Result<Self> {
        let nmap: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let emap: HashMap<usize, usize> = edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let new_nodes = nodes
            .iter()
            .enumerate()
            .map(|(i, &v)| Node {
                id: i,
                ..self.nodes[v].clone()
            })
            .collect();
        let new_edges = edges
            .iter()
            .enumerate()
            .map(|(i, &e)| Hyperedge {
                id: i,
                ..self.hyperedges[e].clone()
            })
            .collect();
        let inc = self
            .incidence
            .iter()
            .filter_map(|inc| {
                Some(Incidence {
                    node: *nmap.get(&inc.node)?,
                    hyperedge: *emap.get(&inc.hyperedge)?,
                    tag: inc.tag,
                })
            })
            .collect();
        Self::new(new_nodes, new_edges, inc)
    }

    /// Text form of the source structure: the markdown table rebuilt from
    /// row and column hyperedges, then one `(head, relation, tail)` line per
    /// forward relation hyperedge. Cells missing from a subgraph are empty.
    pub fn structure_text(&self) -> String {
        let rows: Vec<usize> = self.edges_of(EdgeKind::Row);
        let cols: Vec<usize> = self.edges_of(EdgeKind::Column);
        let mut parts = Vec::new();
        if !rows.is_empty() && !cols.is_empty() {
            let rpos: HashMap<usize, usize> = rows.iter().enumerate().map(|(i, &e)| (e, i)).collect();
            let cpos: HashMap<usize, usize> = cols.iter().enumerate().map(|(j, &e)| (e, j)).collect();
            let mut grid = vec![vec![String::new(); cols.len()]; rows.len()];
            for (v, edges) in self.node_adjacency().iter().enumerate() {
                let r = edges.iter().find_map(|e| rpos.get(e));
                let c = edges.iter().find_map(|e| cpos.get(e));
                if let (Some(&r), Some(&c)) = (r, c) {
                    grid[r][c] = self.nodes[v].label.clone();
                }
            }
            let headers = cols.iter().map(|&e| self.hyperedges[e].label.clone()).collect();
            if let Ok(t) = Table::new(headers, grid) {
                parts.push(crate::ingest::serialize_table(&t));
            }
        }
        let mut lines = Vec::new();
        for e in self.edges_of(EdgeKind::Relation) {
            let slot = |tag| {
                self.incidence
                    .iter()
                    .find(|i| i.hyperedge == e && i.tag == tag)
                    .map(|i| self.nodes[i.node].label.as_str())
            };
            if let (Some(h), Some(t)) = (slot(Slot::HeadSlot), slot(Slot::TailSlot)) {
                lines.push(format!("({h}, {}, {t})", self.hyperedges[e].label));
            }
        }
        if !lines.is_empty() {
            parts.push(lines.join("\n"));
        }
        parts.join("\n")
    }

    fn edges_of(&self, kind: EdgeKind) -> Vec<usize> {
        self.hyperedges
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.id)
            .collect()
    }
}

fn cmp_around(a: &[(EdgeKind, Vec<String>)], b: &[(EdgeKind, Vec<String>)]) -> std::cmp::Ordering {
    let key = |x: &[(EdgeKind, Vec<String>)]| x.iter().map(|(k, l)| (*k as u8, l.clone())).collect::<Vec<_>>();
    key(a).cmp(&key(b))
}

impl fmt::Display for HyperGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} nodes, {} hyperedges, {} incidences",
            self.nodes.len(),
            self.hyperedges.len(),
            self.incidence.len()
        )
    }
}

/// Cell `(i, j)` becomes node `i·n + j`; rows are hyperedges `0..m`,
/// columns `m..m+n`.
pub fn table_to_hypergraph(t: &Table) -> HyperGraph {
    let (m, n) = (t.n_rows(), t.n_cols());
    let mut nodes = Vec::with_capacity(m * n);
    let mut incidence = Vec::with_capacity(2 * m * n);
    for (i, row) in t.rows().iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let id = i * n + j;
            nodes.push(Node {
                id,
                label: cell.clone(),
                kind: NodeKind::Cell,
            });
            incidence.push(Incidence {
                node: id,
                hyperedge: i,
                tag: Slot::None,
            });
            incidence.push(Incidence {
                node: id,
                hyperedge: m + j,
                tag: Slot::None,
            });
        }
    }
    let rows = (0..m).map(|i| Hyperedge {
        id: i,
        label: format!("row_{i}"),
        kind: EdgeKind::Row,
    });
    let cols = t.headers().iter().enumerate().map(|(j, h)| Hyperedge {
        id: m + j,
        label: h.clone(),
        kind: EdgeKind::Column,
    });
    let hyperedges = rows.chain(cols).collect();
    HyperGraph::new(nodes, hyperedges, incidence).expect("table conversion yields a valid hypergraph")
}

/// Entities are numbered by first appearance. Triple `k` produces the
/// forward hyperedge `2k` and the reverse hyperedge `2k + 1`.
pub fn triples_to_hypergraph(ts: &TripleSet) -> Result<HyperGraph> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut nodes = Vec::new();
    for t in ts.triples() {
        for s in [t.head.as_str(), t.tail.as_str()] {
            let next = nodes.len();
            if *index.entry(s).or_insert(next) == next {
                nodes.push(Node {
                    id: next,
                    label: s.to_string(),
                    kind: NodeKind::Entity,
                });
            }
        }
    }
    let mut hyperedges = Vec::with_capacity(2 * ts.len());
    let mut incidence = Vec::with_capacity(4 * ts.len());
    for t in ts.triples() {
        if t.head == t.tail {
            return Err(Error::SelfLoopUnsupported(t.head.clone()));
        }
        let (h, tl) = (index[t.head.as_str()], index[t.tail.as_str()]);
        let fwd = hyperedges.len();
        hyperedges.push(Hyperedge {
            id: fwd,
            label: t.relation.clone(),
            kind: EdgeKind::Relation,
        });
        hyperedges.push(Hyperedge {
            id: fwd + 1,
            label: format!("{}{REVERSE_MARKER}", t.relation),
            kind: EdgeKind::ReverseRelation,
        });
        incidence.extend([
            Incidence {
                node: h,
                hyperedge: fwd,
                tag: Slot::HeadSlot,
            },
            Incidence {
                node: tl,
                hyperedge: fwd,
                tag: Slot::TailSlot,
            },
            Incidence {
                node: tl,
                hyperedge: fwd + 1,
                tag: Slot::HeadSlot,
            },
            Incidence {
                node: h,
                hyperedge: fwd + 1,
                tag: Slot::TailSlot,
            },
        ]);
    }
    HyperGraph::new(nodes, hyperedges, incidence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Triple;

    fn table(m: usize, n: usize) -> Table {
        Table::new(
            (0..n).map(|j| format!("h{j}")).collect(),
            (0..m).map(|i| (0..n).map(|j| format!("c{i}{j}")).collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn structure_text_rebuilds_sources() {
        let t = table(2, 3);
        assert_eq!(
            table_to_hypergraph(&t).structure_text(),
            crate::ingest::serialize_table(&t)
        );
        let ts = TripleSet::new(vec![
            Triple::new("Rome", "capital_of", "Italy"),
            Triple::new("Paris", "capital_of", "France"),
        ])
        .unwrap();
        let g = triples_to_hypergraph(&ts).unwrap();
        assert_eq!(g.structure_text(), crate::ingest::serialize_triples(&ts));
    }

    #[test]
    fn table_counts() {
        let g = table_to_hypergraph(&table(2, 3));
        assert_eq!((g.n_nodes(), g.n_hyperedges(), g.incidence().len()), (6, 5, 12));
        let g = table_to_hypergraph(&table(1, 1));
        assert_eq!((g.n_nodes(), g.n_hyperedges(), g.incidence().len()), (1, 2, 2));
    }

    #[test]
    fn table_neighbors() {
        let g = table_to_hypergraph(&table(2, 3));
        assert_eq!(g.neighbors(0, Side::OfNode).unwrap(), &[0, 2]);
        assert_eq!(g.hyperedges()[2].label, "h0");
        assert_eq!(g.neighbors(0, Side::OfHyperedge).unwrap(), &[0, 1, 2]);
        assert!(matches!(g.neighbors(99, Side::OfNode), Err(Error::UnknownId { .. })));
        assert!(matches!(
            g.neighbors(5, Side::OfHyperedge),
            Err(Error::UnknownId { .. })
        ));
    }

    #[test]
    fn triple_counts() {
        let ts = TripleSet::new(vec![Triple::new("A", "r1", "B"), Triple::new("B", "r2", "C")]).unwrap();
        let g = triples_to_hypergraph(&ts).unwrap();
        assert_eq!((g.n_nodes(), g.n_hyperedges(), g.incidence().len()), (3, 4, 8));
        assert_eq!(g.hyperedges()[1].label, "r1 [reverse]");
        let one = TripleSet::new(vec![Triple::new("A", "r", "B")]).unwrap();
        let g = triples_to_hypergraph(&one).unwrap();
        assert_eq!((g.n_nodes(), g.n_hyperedges(), g.incidence().len()), (2, 2, 4));
    }

    #[test]
    fn self_loop() {
        let ts = TripleSet::new(vec![Triple::new("A", "r", "A")]).unwrap();
        assert!(matches!(triples_to_hypergraph(&ts), Err(Error::SelfLoopUnsupported(_))));
    }

    #[test]
    fn json_round_trip() {
        let g = table_to_hypergraph(&table(2, 2));
        assert_eq!(HyperGraph::from_json(g.to_json().as_bytes()).unwrap(), g);
    }

    #[test]
    fn json_rejects_bad_refs() {
        let bad = r#"{"nodes":[{"id":0,"label":"a","kind":"entity"}],"hyperedges":[],
            "incidence":[{"node":0,"hyperedge":3,"tag":"none"}]}"#;
        assert!(matches!(
            HyperGraph::from_json(bad.as_bytes()),
            Err(Error::UnknownId { .. })
        ));
        let sparse = r#"{"nodes":[{"id":1,"label":"a","kind":"entity"}],"hyperedges":[],"incidence":[]}"#;
        assert!(matches!(
            HyperGraph::from_json(sparse.as_bytes()),
            Err(Error::InvalidGraph(_))
        ));
        assert!(matches!(HyperGraph::from_json(b"{"), Err(Error::Decode(_))));
    }

    #[test]
    fn components_of_triples() {
        let ts = TripleSet::new(vec![Triple::new("A", "r", "B"), Triple::new("C", "r", "D")]).unwrap();
        let g = triples_to_hypergraph(&ts).unwrap();
        let comps = g.components();
        assert_eq!(comps, vec![(vec![0, 1], vec![0, 1]), (vec![2, 3], vec![2, 3])]);
        let sub = g.subgraph(&comps[1].0, &comps[1].1).unwrap();
        assert_eq!(sub.nodes()[0].label, "C");
    }
}
