//! Set-attention hypergraph encoder.
//!
//! Each layer pools node states into every hyperedge, fuses the pooled
//! vector with the hyperedge's previous state, then pools the updated
//! hyperedge states back into every node.

mod embed;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{EdgeKind, HyperGraph};
use crate::numerics::nn::{Ffn, LayerNorm, Linear, ParamBuilder};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub use embed::LabelEmbedder;

pub const PREFIX: &str = "hypertrans.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub seed: u64,
    pub node_fusion: bool,
    pub embed_buckets: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 2,
            seed: 0,
            node_fusion: true,
            embed_buckets: 4096,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

/// Label used to initialise a hyperedge. Row hyperedges share one label so
/// that reordering rows only relabels, never changes, the input.
pub fn hyperedge_init_label(kind: EdgeKind, label: &str) -> &str {
    match kind {
        EdgeKind::Row => "row",
        _ => label,
    }
}

/// Multi-head pooling of a set against a learned query `ω`, followed by two
/// residual post-norm blocks: `Y = LN(ω + SetMHA(ω, X))`, `LN(Y + FFN(Y))`.
#[derive(Clone, Debug)]
pub struct SetAttention {
    pub omega: ParamId,
    pub wk: Linear,
    pub wv: Linear,
    pub ln1: LayerNorm,
    pub ffn: Ffn,
    pub ln2: LayerNorm,
    pub heads: usize,
    pub dim: usize,
}

impl SetAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        let mut c = pb.child(name);
        Ok(Self {
            omega: c.normal("omega", 1, dim, 1.0 / (dim as f64).sqrt())?,
            wk: Linear::new(&mut c, "wk", dim, dim, false)?,
            wv: Linear::new(&mut c, "wv", dim, dim, false)?,
            ln1: LayerNorm::new(&mut c, "ln1", dim)?,
            ffn: Ffn::new(&mut c, "ffn", dim, dim * ffn_mult, dim)?,
            ln2: LayerNorm::new(&mut c, "ln2", dim)?,
            heads,
            dim,
        })
    }

    /// Raw `Softmax(ω(XW^K)ᵀ)(XW^V)` per head for every segment of `x`.
    pub fn pool(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let omega = g.param(store, self.omega);
        let k = self.wk.forward(g, store, x)?;
        let v = self.wv.forward(g, store, x)?;
        let per_dim = g.mul_row(k, omega)?;
        let scores = g.sum_blocks(per_dim, self.dim / self.heads)?;
        g.segment_attention(scores, v, segments)
    }

    /// One output row per segment.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let pooled = self.pool(g, store, x, segments)?;
        let omega = g.param(store, self.omega);
        let y = g.add_row(pooled, omega)?;
        let y = self.ln1.forward(g, store, y)?;
        let f = self.ffn.forward(g, store, y)?;
        let z = g.add(y, f)?;
        self.ln2.forward(g, store, z)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.omega];
        v.extend(self.wk.params());
        v.extend(self.wv.params());
        v.extend(self.ln1.params());
        v.extend(self.ffn.params());
        v.extend(self.ln2.params());
        v
    }
}

#[derive(Clone, Debug)]
pub struct HyperTransLayer {
    pub node_to_edge: SetAttention,
    pub edge_to_node: SetAttention,
    pub edge_fusion: Ffn,
    pub node_fusion: Option<Ffn>,
}

impl HyperTransLayer {
    fn new(pb: &mut ParamBuilder<'_>, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            node_to_edge: SetAttention::new(pb, "v2e", d, cfg.heads, cfg.ffn_mult)?,
            edge_to_node: SetAttention::new(pb, "e2v", d, cfg.heads, cfg.ffn_mult)?,
            edge_fusion: Ffn::new(pb, "edge_fusion", 2 * d, d, d)?,
            node_fusion: if cfg.node_fusion {
                Some(Ffn::new(pb, "node_fusion", 2 * d, d, d)?)
            } else {
                None
            },
        })
    }

    /// Returns updated `(nodes, hyperedges)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hg: &HyperGraph,
        nodes: Var,
        edges: Var,
    ) -> Result<(Var, Var)> {
        check_rows(g, hg, nodes, edges)?;
        check_degrees(hg)?;
        let pooled_e = self.node_to_edge.forward(g, store, nodes, hg.edge_adjacency())?;
        let cat = g.concat_cols(&[edges, pooled_e])?;
        let new_edges = self.edge_fusion.forward(g, store, cat)?;
        let pooled_v = self.edge_to_node.forward(g, store, new_edges, hg.node_adjacency())?;
        let new_nodes = match &self.node_fusion {
            Some(f) => {
                let cat = g.concat_cols(&[nodes, pooled_v])?;
                f.forward(g, store, cat)?
            }
            None => pooled_v,
        };
        Ok((new_nodes, new_edges))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.node_to_edge.params();
        v.extend(self.edge_to_node.params());
        v.extend(self.edge_fusion.params());
        if let Some(f) = &self.node_fusion {
            v.extend(f.params());
        }
        v
    }
}

fn check_rows(g: &Graph, hg: &HyperGraph, nodes: Var, edges: Var) -> Result<()> {
    let (nr, _) = g.shape(nodes);
    let (er, _) = g.shape(edges);
    if nr != hg.n_nodes() || er != hg.n_hyperedges() {
        return Err(Error::shape(
            "hypertrans_layer",
            format!(
                "{nr}/{er} rows for {} nodes and {} hyperedges",
                hg.n_nodes(),
                hg.n_hyperedges()
            ),
        ));
    }
    Ok(())
}

fn check_degrees(hg: &HyperGraph) -> Result<()> {
    if let Some(v) = hg.node_adjacency().iter().position(Vec::is_empty) {
        return Err(Error::IsolatedNode(v));
    }
    if let Some(e) = hg.edge_adjacency().iter().position(Vec::is_empty) {
        return Err(Error::IsolatedHyperedge(e));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGraph {
    pub nodes: Tensor,
    pub hyperedges: Tensor,
}

#[derive(Clone, Debug)]
pub struct HyperTrans {
    pub cfg: EncoderConfig,
    pub layers: Vec<HyperTransLayer>,
    pub embedder: LabelEmbedder,
}

impl HyperTrans {
    /// Registers all parameters under `hypertrans.`; initial values depend
    /// only on `cfg.seed`.
    pub fn new(cfg: EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(store, &mut rng, PREFIX);
        let layers = (0..cfg.layers)
            .map(|l| HyperTransLayer::new(&mut pb.child(&format!("layer{l}")), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let embedder = LabelEmbedder::new(cfg.dim, cfg.embed_buckets, cfg.seed);
        Ok(Self { cfg, layers, embedder })
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Initial `(node, hyperedge)` states from their labels.
    pub fn initial_states(&self, hg: &HyperGraph) -> (Tensor, Tensor) {
        let nodes: Vec<&str> = hg.nodes().iter().map(|n| n.label.as_str()).collect();
        let edges: Vec<&str> = hg
            .hyperedges()
            .iter()
            .map(|e| hyperedge_init_label(e.kind, &e.label))
            .collect();
        (self.embedder.embed_all(&nodes), self.embedder.embed_all(&edges))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hg: &HyperGraph) -> Result<(Var, Var)> {
        let (n0, e0) = self.initial_states(hg);
        let mut nodes = g.constant(n0);
        let mut edges = g.constant(e0);
        for layer in &self.layers {
            (nodes, edges) = layer.forward(g, store, hg, nodes, edges)?;
        }
        Ok((nodes, edges))
    }

    pub fn encode(&self, store: &ParamStore, hg: &HyperGraph) -> Result<EncodedGraph> {
        let mut g = Graph::inference();
        let (n, e) = self.forward(&mut g, store, hg)?;
        Ok(EncodedGraph {
            nodes: g.value(n).clone(),
            hyperedges: g.value(e).clone(),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(HyperTransLayer::params).collect()
    }
}
