//! Query-token former: a post-norm transformer over `[queries; text]` in
//! which only the query rows cross-attend to node embeddings. Produces the
//! soft prompt and hosts the two pretraining objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{Ffn, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::toylm::Tokenizer;

pub const PREFIX: &str = "gformer.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    MultimodalCausal,
    Unimodal,
}

/// Row-major `(m+T)×(m+T)` permission matrix; `true` means row may attend to
/// column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub mode: MaskMode,
    pub size: usize,
    pub allow: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.size + j]
    }
}

pub fn build_attention_mask(mode: MaskMode, m: usize, t: usize) -> AttentionMask {
    let size = m + t;
    let mut allow = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            allow[i * size + j] = match (i < m, j < m, mode) {
                (true, q, _) => q,
                (false, true, MaskMode::MultimodalCausal) => true,
                (false, false, MaskMode::MultimodalCausal) => j <= i,
                (false, true, MaskMode::Unimodal) => false,
                (false, false, MaskMode::Unimodal) => true,
            };
        }
    }
    AttentionMask { mode, size, allow }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GFormerConfig {
    pub queries: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Initial contrastive temperature; learned in log space.
    pub tau: f64,
    /// Width of the node embeddings it reads.
    pub node_dim: usize,
    /// Width of the soft prompt it emits.
    pub lm_dim: usize,
    pub max_text: usize,
    pub seed: u64,
}

impl Default for GFormerConfig {
    fn default() -> Self {
        Self {
            queries: 10,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 2,
            tau: 0.07,
            node_dim: 64,
            lm_dim: 128,
            max_text: 256,
            seed: 1,
        }
    }
}

impl GFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 {
            return Err(Error::Config("need at least one query token".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.layers == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} with {} heads and {} layers",
                self.hidden, self.heads, self.layers
            )));
        }
        if self.max_text < 2 {
            return Err(Error::Config("max_text must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GFormerLayer {
    pub self_attn: MultiHeadAttention,
    pub ln_self: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub ffn: Ffn,
    pub ln_ffn: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct GFormer {
    pub cfg: GFormerConfig,
    pub query: ParamId,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub emb_ln: LayerNorm,
    pub layers: Vec<GFormerLayer>,
    pub fc: Linear,
    pub text_head: Linear,
    pub log_tau: ParamId,
    /// Used only by the ablation that skips the former entirely.
    pub node_fc: Linear,
}

/// One tokenized answer-generation example: `[CLS] question ␠ answer EOS`
/// with targets on the answer bytes and EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct QaTokens {
    pub ids: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl GFormer {
    pub fn new(cfg: GFormerConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(store, &mut rng, PREFIX);
        let h = cfg.hidden;
        let query = pb.normal("query", cfg.queries, h, 1.0)?;
        let tok_emb = pb.normal("tok_emb", Tokenizer::VOCAB, h, 1.0)?;
        let pos_emb = pb.normal("pos_emb", cfg.max_text, h, 0.1)?;
        let emb_ln = LayerNorm::new(&mut pb, "emb_ln", h)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut c = pb.child(&format!("layer{l}"));
            layers.push(GFormerLayer {
                self_attn: MultiHeadAttention::new(&mut c, "self_attn", h, h, cfg.heads)?,
                ln_self: LayerNorm::new(&mut c, "ln_self", h)?,
                cross_attn: MultiHeadAttention::new(&mut c, "cross_attn", h, cfg.node_dim, cfg.heads)?,
                ln_cross: LayerNorm::new(&mut c, "ln_cross", h)?,
                ffn: Ffn::new(&mut c, "ffn", h, h * cfg.ffn_mult, h)?,
                ln_ffn: LayerNorm::new(&mut c, "ln_ffn", h)?,
            });
        }
        let fc = Linear::new(&mut pb, "fc", h, cfg.lm_dim, true)?;
        let text_head = Linear::with_std(&mut pb, "text_head", h, Tokenizer::VOCAB, true, 0.02)?;
        let log_tau = pb.constant("log_tau", 1, 1, cfg.tau.ln())?;
        let node_fc = Linear::new(&mut pb, "node_fc", cfg.node_dim, cfg.lm_dim, true)?;
        Ok(Self {
            cfg,
            query,
            tok_emb,
            pos_emb,
            emb_ln,
            layers,
            fc,
            text_head,
            log_tau,
            node_fc,
        })
    }

    /// Raw token plus position embeddings, `T × hidden`.
    pub fn embed_text(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.cfg.max_text {
            return Err(Error::shape(
                "gformer_text",
                format!("{} tokens exceed max_text {}", ids.len(), self.cfg.max_text),
            ));
        }
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let t = g.gather_rows(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather_rows(pos, &positions)?;
        g.add(t, p)
    }

    /// Runs the stack on pre-built inputs: `x0` holds `m` query rows then the
    /// text rows. `nodes = None` skips cross-attention.
    pub fn forward_inputs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x0: Var,
        m: usize,
        nodes: Option<Var>,
        mode: MaskMode,
    ) -> Result<(Var, Option<Var>)> {
        let (rows, cols) = g.shape(x0);
        if cols != self.cfg.hidden || m > rows {
            return Err(Error::shape(
                "gformer_forward",
                format!("input {rows}×{cols} with {m} queries"),
            ));
        }
        if let Some(n) = nodes {
            let (nr, nc) = g.shape(n);
            if nc != self.cfg.node_dim || nr == 0 {
                return Err(Error::shape("gformer_forward", format!("node embeddings {nr}×{nc}")));
            }
        }
        let t = rows - m;
        let mask = build_attention_mask(mode, m, t);
        let mut x = self.emb_ln.forward(g, store, x0)?;
        for layer in &self.layers {
            let a = layer.self_attn.forward(g, store, x, x, Some(&mask.allow))?;
            let s = g.add(x, a)?;
            x = layer.ln_self.forward(g, store, s)?;
            if let Some(n) = nodes {
                if m > 0 {
                    let q = g.slice_rows(x, 0, m)?;
                    let c = layer.cross_attn.forward(g, store, q, n, None)?;
                    let s = g.add(q, c)?;
                    let q = layer.ln_cross.forward(g, store, s)?;
                    x = if t > 0 {
                        let txt = g.slice_rows(x, m, t)?;
                        g.concat_rows(&[q, txt])?
                    } else {
                        q
                    };
                }
            }
            let f = layer.ffn.forward(g, store, x)?;
            let s = g.add(x, f)?;
            x = layer.ln_ffn.forward(g, store, s)?;
        }
        let q = if m > 0 { g.slice_rows(x, 0, m)? } else { x };
        let txt = if t > 0 { Some(g.slice_rows(x, m, t)?) } else { None };
        Ok((q, txt))
    }

    /// `(query outputs m×hidden, text outputs T×hidden)`; text outputs are
    /// `None` when `text` is empty.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        nodes: Option<Var>,
        text: &[usize],
        mode: MaskMode,
    ) -> Result<(Var, Option<Var>)> {
        let q = g.param(store, self.query);
        let x0 = if text.is_empty() {
            q
        } else {
            let t = self.embed_text(g, store, text)?;
            g.concat_rows(&[q, t])?
        };
        self.forward_inputs(g, store, x0, self.cfg.queries, nodes, mode)
    }

    /// Text-only pass (no query rows), as seen under the unimodal mask.
    pub fn text_stream(&self, g: &mut Graph, store: &ParamStore, text: &[usize]) -> Result<Var> {
        let x0 = self.embed_text(g, store, text)?;
        let (out, _) = self.forward_inputs(g, store, x0, 0, None, MaskMode::Unimodal)?;
        Ok(out)
    }

    /// Soft prompt `m × lm_dim` from the graph stream alone.
    pub fn soft_prompt(&self, g: &mut Graph, store: &ParamStore, nodes: Option<Var>) -> Result<Var> {
        let (q, _) = self.forward(g, store, nodes, &[], MaskMode::Unimodal)?;
        self.fc.forward(g, store, q)
    }

    /// Ablation path: mean node embedding through a linear map, `1 × lm_dim`.
    pub fn direct_prompt(&self, g: &mut Graph, store: &ParamStore, nodes: Var) -> Result<Var> {
        let mean = g.mean_rows(nodes)?;
        self.node_fc.forward(g, store, mean)
    }

    /// Builds the answer-generation sequence, dropping question bytes from
    /// the front if it would exceed `max_text`.
    pub fn qa_tokens(&self, question: &str, answer: &str) -> Result<QaTokens> {
        let tok = Tokenizer;
        let mut a = tok.encode(answer);
        if a.is_empty() {
            return Err(Error::EmptyAnswer);
        }
        a.push(Tokenizer::EOS);
        let mut q = tok.encode(question);
        q.extend(tok.encode(" "));
        let room = self.cfg.max_text - 1;
        if a.len() > room {
            a.truncate(room);
        }
        if q.len() + a.len() > room {
            q.drain(..q.len() + a.len() - room);
        }
        let mut ids = Vec::with_capacity(1 + q.len() + a.len());
        ids.push(Tokenizer::CLS);
        ids.extend(&q);
        let first_answer = ids.len();
        ids.extend(&a);
        // Position p predicts token p + 1.
        let targets = (0..ids.len())
            .map(|p| {
                if p + 1 >= first_answer && p + 1 < ids.len() {
                    Some(ids[p + 1])
                } else {
                    None
                }
            })
            .collect();
        ids.pop();
        let mut targets: Vec<Option<usize>> = targets;
        targets.pop();
        Ok(QaTokens { ids, targets })
    }

    /// Mean next-token cross-entropy over answer positions, text conditioned
    /// on the queries under the multimodal causal mask.
    pub fn answer_generation_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        nodes: Option<Var>,
        qa: &QaTokens,
    ) -> Result<Var> {
        let (_, txt) = self.forward(g, store, nodes, &qa.ids, MaskMode::MultimodalCausal)?;
        let txt = txt.ok_or(Error::EmptyAnswer)?;
        let logits = self.text_head.forward(g, store, txt)?;
        g.cross_entropy(logits, &qa.targets)
    }

    /// Text tokens for the contrastive stream: `[CLS]` then the text,
    /// truncated to `max_text`.
    pub fn cls_tokens(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![Tokenizer::CLS];
        ids.extend(Tokenizer.encode(text));
        ids.truncate(self.cfg.max_text);
        ids
    }

    /// Graph representation: mean of the query outputs.
    pub fn graph_rep(&self, g: &mut Graph, store: &ParamStore, nodes: Option<Var>) -> Result<Var> {
        let (q, _) = self.forward(g, store, nodes, &[], MaskMode::Unimodal)?;
        g.mean_rows(q)
    }

    /// Text representation: output at the `[CLS]` position.
    pub fn text_rep(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let out = self.text_stream(g, store, ids)?;
        g.slice_rows(out, 0, 1)
    }

    /// Symmetric InfoNCE over cosine similarities scaled by `1/τ`; row `i`
    /// of `graphs` pairs with row `i` of `texts`.
    pub fn contrastive_from_reps(&self, g: &mut Graph, store: &ParamStore, graphs: Var, texts: Var) -> Result<Var> {
        let (b, _) = g.shape(graphs);
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        if g.shape(texts).0 != b {
            return Err(Error::shape("contrastive_loss", "graph and text batch sizes differ"));
        }
        let gn = g.l2_normalize_rows(graphs)?;
        let tn = g.l2_normalize_rows(texts)?;
        let sim = g.matmul_nt(gn, tn)?;
        let log_tau = g.param(store, self.log_tau);
        let neg = g.scale(log_tau, -1.0);
        let inv_tau = g.exp(neg);
        let logits = g.mul_scalar(sim, inv_tau)?;
        let targets: Vec<Option<usize>> = (0..b).map(Some).collect();
        let rows = g.cross_entropy(logits, &targets)?;
        let lt = g.transpose(logits)?;
        let cols = g.cross_entropy(lt, &targets)?;
        let both = g.add(rows, cols)?;
        Ok(g.scale(both, 0.5))
    }

    pub fn contrastive_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        nodes: &[Option<Var>],
        texts: &[Vec<usize>],
    ) -> Result<Var> {
        if nodes.len() < 2 {
            return Err(Error::BatchTooSmall(nodes.len()));
        }
        if nodes.len() != texts.len() {
            return Err(Error::shape("contrastive_loss", "graph and text batch sizes differ"));
        }
        let mut gr = Vec::with_capacity(nodes.len());
        let mut tr = Vec::with_capacity(nodes.len());
        for (n, t) in nodes.iter().zip(texts) {
            gr.push(self.graph_rep(g, store, *n)?);
            tr.push(self.text_rep(g, store, t)?);
        }
        let gs = g.concat_rows(&gr)?;
        let ts = g.concat_rows(&tr)?;
        self.contrastive_from_reps(g, store, gs, ts)
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).data()[0].exp()
    }

    /// Parameters on the query/graph path, excluding the text-only pieces
    /// and the ablation head.
    pub fn prompt_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.query];
        v.extend(self.emb_ln.params());
        for l in &self.layers {
            v.extend(l.self_attn.params());
            v.extend(l.ln_self.params());
            v.extend(l.cross_attn.params());
            v.extend(l.ln_cross.params());
            v.extend(l.ffn.params());
            v.extend(l.ln_ffn.params());
        }
        v.extend(self.fc.params());
        v
    }

    /// Everything except the ablation head.
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.prompt_params();
        v.extend([self.tok_emb, self.pos_emb, self.log_tau]);
        v.extend(self.text_head.params());
        v
    }
}

/// Soft-prompt export: `u64 rows, u64 cols` little-endian, then the f64
/// payload row-major.
pub fn encode_soft_prompt(t: &Tensor) -> Vec<u8> {
    crate::numerics::checkpoint::encode_matrix(t)
}

pub fn decode_soft_prompt(raw: &[u8]) -> Result<Tensor> {
    crate::numerics::checkpoint::decode_matrix(raw)
}
