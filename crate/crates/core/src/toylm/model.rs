use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::mix;
use crate::numerics::nn::{Ffn, LayerNorm, Linear, LoraPair, MultiHeadAttention, ParamBuilder};
use crate::numerics::{kernels, Graph, ParamId, ParamStore, Tensor, Var};
use crate::toylm::Tokenizer;

pub const PREFIX: &str = "toylm.";
pub const LORA_PREFIX: &str = "lora.";

/// Where the soft prompt goes relative to the text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPlacement {
    #[default]
    Append,
    Prepend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Size of the learned position table.
    pub max_positions: usize,
    /// Token budget for structure text plus question.
    pub max_len: usize,
    pub max_new: usize,
    pub placement: PromptPlacement,
    /// Add position embeddings to soft-prompt rows.
    pub prompt_positions: bool,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            max_positions: 512,
            max_len: 256,
            max_new: 64,
            placement: PromptPlacement::Append,
            prompt_positions: true,
            seed: 2,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("toy LM sizes must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_len == 0 || self.max_len > self.max_positions {
            return Err(Error::Config("max_len must be in 1..=max_positions".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

/// Per-layer keys and values of already processed rows.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub len: usize,
    /// Logits of the last cached row.
    pub last_logits: Option<Tensor>,
}

impl KvCache {
    fn empty(layers: usize, dim: usize) -> Self {
        Self {
            keys: vec![Tensor::zeros(0, dim); layers],
            values: vec![Tensor::zeros(0, dim); layers],
            len: 0,
            last_logits: None,
        }
    }
}

struct RunOut {
    logits: Var,
    kv: Vec<(Var, Var)>,
}

/// Token ids of the text segment plus whether anything was cut.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptText {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct ToyLm {
    pub cfg: ToyLmConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl ToyLm {
    pub fn new(cfg: ToyLmConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder::new(store, &mut rng, PREFIX);
        let d = cfg.dim;
        let tok_emb = pb.normal("tok_emb", Tokenizer::VOCAB, d, 1.0)?;
        let pos_emb = pb.normal("pos_emb", cfg.max_positions, d, 0.1)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut c = pb.child(&format!("block{l}"));
            blocks.push(Block {
                ln1: LayerNorm::new(&mut c, "ln1", d)?,
                attn: MultiHeadAttention::new(&mut c, "attn", d, d, cfg.heads)?,
                ln2: LayerNorm::new(&mut c, "ln2", d)?,
                ffn: Ffn::new(&mut c, "ffn", d, d * cfg.ffn_mult, d)?,
            });
        }
        let ln_f = LayerNorm::new(&mut pb, "ln_f", d)?;
        let head = Linear::with_std(&mut pb, "head", d, Tokenizer::VOCAB, true, 0.02)?;
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Base-model parameters (no adapters).
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            v.extend(b.ln1.params());
            v.extend(b.attn.params().into_iter().filter(|p| !self.is_adapter(*p)));
            v.extend(b.ln2.params());
            v.extend(b.ffn.params().into_iter().filter(|p| !self.is_adapter(*p)));
        }
        v.extend(self.ln_f.params());
        v.extend(self.head.params());
        v
    }

    fn is_adapter(&self, id: ParamId) -> bool {
        self.adapter_params().contains(&id)
    }

    fn adapted(&self) -> Vec<&Linear> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.ffn.up, &b.ffn.down])
            .collect()
    }

    fn adapted_mut(&mut self) -> Vec<&mut Linear> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                let Block { attn, ffn, .. } = b;
                let MultiHeadAttention { q, k, v, o, .. } = attn;
                let Ffn { up, down } = ffn;
                [q, k, v, o, up, down]
            })
            .collect()
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.adapted()
            .into_iter()
            .filter_map(|l| l.lora.as_ref())
            .flat_map(|p| [p.a, p.b])
            .collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.base_params();
        v.extend(self.adapter_params());
        v
    }

    /// Token ids for the structure text followed by the question. When the
    /// total exceeds `max_len`, the structure is cut from its end first so
    /// the question survives; a question longer than `max_len` keeps its
    /// tail.
    pub fn prompt_text(&self, structure: &str, question: &str) -> PromptText {
        let tok = Tokenizer;
        let mut q = tok.encode(question);
        q.extend(tok.encode("\n"));
        let mut s = if structure.is_empty() {
            Vec::new()
        } else {
            let mut s = tok.encode(structure);
            s.extend(tok.encode("\n"));
            s
        };
        let max = self.cfg.max_len;
        let truncated = s.len() + q.len() > max;
        if q.len() >= max {
            q.drain(..q.len() - max);
            s.clear();
        } else if truncated {
            s.truncate(max - q.len());
        }
        s.extend(q);
        PromptText { ids: s, truncated }
    }

    fn check_positions(&self, end: usize) -> Result<()> {
        if end > self.cfg.max_positions {
            return Err(Error::shape(
                "toylm_positions",
                format!("sequence of {end} rows exceeds {} positions", self.cfg.max_positions),
            ));
        }
        Ok(())
    }

    /// Token plus position embeddings for `ids` at positions `start..`.
    pub fn embed_at(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], start: usize) -> Result<Var> {
        self.check_positions(start + ids.len())?;
        let tok = g.param(store, self.tok_emb);
        let t = g.gather_rows(tok, ids)?;
        let pos = self.positions(g, store, start, ids.len())?;
        g.add(t, pos)
    }

    /// Text embeddings `h_t`, one row per token.
    pub fn embed_text(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        self.embed_at(g, store, ids, 0)
    }

    fn positions(&self, g: &mut Graph, store: &ParamStore, start: usize, len: usize) -> Result<Var> {
        let pos = g.param(store, self.pos_emb);
        let idx: Vec<usize> = (start..start + len).collect();
        g.gather_rows(pos, &idx)
    }

    fn check_prompt(&self, g: &Graph, prompt: Option<Var>) -> Result<usize> {
        match prompt {
            None => Ok(0),
            Some(p) => {
                let (m, w) = g.shape(p);
                if w != self.cfg.dim {
                    return Err(Error::WidthMismatch {
                        expected: self.cfg.dim,
                        found: w,
                    });
                }
                Ok(m)
            }
        }
    }

    fn prompt_rows(&self, g: &mut Graph, store: &ParamStore, prompt: Var, start: usize) -> Result<Var> {
        if !self.cfg.prompt_positions {
            return Ok(prompt);
        }
        let m = g.shape(prompt).0;
        self.check_positions(start + m)?;
        let pos = self.positions(g, store, start, m)?;
        g.add(prompt, pos)
    }

    /// Text rows and soft-prompt rows in the configured order. Positions
    /// continue across the boundary.
    pub fn assemble_input(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: &[usize],
        prompt: Option<Var>,
    ) -> Result<Var> {
        let m = self.check_prompt(g, prompt)?;
        if text.is_empty() && m == 0 {
            return Err(Error::shape("assemble_input", "empty input"));
        }
        let mut parts = Vec::with_capacity(2);
        match self.cfg.placement {
            PromptPlacement::Append => {
                if !text.is_empty() {
                    parts.push(self.embed_at(g, store, text, 0)?);
                }
                if let Some(p) = prompt {
                    parts.push(self.prompt_rows(g, store, p, text.len())?);
                }
            }
            PromptPlacement::Prepend => {
                if let Some(p) = prompt {
                    parts.push(self.prompt_rows(g, store, p, 0)?);
                }
                if !text.is_empty() {
                    parts.push(self.embed_at(g, store, text, m)?);
                }
            }
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }

    /// Causal pass over `x` (rows at positions `past.len..`), attending to
    /// the cached rows as well.
    fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, past: Option<&KvCache>) -> Result<RunOut> {
        let (rows, cols) = g.shape(x);
        if cols != self.cfg.dim {
            return Err(Error::shape("toylm_forward", format!("input width {cols}")));
        }
        let p0 = past.map_or(0, |c| c.len);
        let total = p0 + rows;
        let mut allow = vec![false; rows * total];
        for i in 0..rows {
            for j in 0..=p0 + i {
                allow[i * total + j] = true;
            }
        }
        let mut h = x;
        let mut kv = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let a = b.ln1.forward(g, store, h)?;
            let q = b.attn.q.forward(g, store, a)?;
            let k = b.attn.k.forward(g, store, a)?;
            let v = b.attn.v.forward(g, store, a)?;
            kv.push((k, v));
            let (k_all, v_all) = match past {
                Some(c) if c.len > 0 => {
                    let pk = g.constant(c.keys[l].clone());
                    let pv = g.constant(c.values[l].clone());
                    (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?)
                }
                _ => (k, v),
            };
            let att = b.attn.attend(g, store, q, k_all, v_all, Some(&allow))?;
            h = g.add(h, att)?;
            let f = b.ln2.forward(g, store, h)?;
            let f = b.ffn.forward(g, store, f)?;
            h = g.add(h, f)?;
        }
        let h = self.ln_f.forward(g, store, h)?;
        let logits = self.head.forward(g, store, h)?;
        Ok(RunOut { logits, kv })
    }

    /// Next-token logits for every row of `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.run(g, store, x, None)?.logits)
    }

    /// Keys and values for a text prefix, to be reused while the model
    /// weights stay fixed.
    pub fn prefix_cache(&self, store: &ParamStore, text: &[usize]) -> Result<KvCache> {
        let mut cache = KvCache::empty(self.blocks.len(), self.cfg.dim);
        if text.is_empty() {
            return Ok(cache);
        }
        let mut g = Graph::inference();
        let x = self.embed_at(&mut g, store, text, 0)?;
        let out = self.run(&mut g, store, x, None)?;
        self.extend(&g, &mut cache, &out.kv, text.len());
        let logits = g.value(out.logits);
        cache.last_logits = Some(kernels::slice_rows(logits, logits.rows() - 1, 1)?);
        Ok(cache)
    }

    fn extend(&self, g: &Graph, cache: &mut KvCache, kv: &[(Var, Var)], rows: usize) {
        for (l, (k, v)) in kv.iter().enumerate() {
            cache.keys[l] = kernels::concat_rows(&[&cache.keys[l], g.value(*k)]).expect("same width");
            cache.values[l] = kernels::concat_rows(&[&cache.values[l], g.value(*v)]).expect("same width");
        }
        cache.len += rows;
    }

    fn answer_targets(answer: &[usize], offset: usize, rows: usize) -> Vec<Option<usize>> {
        let mut targets = vec![None; rows];
        for (k, &t) in answer.iter().chain(std::iter::once(&Tokenizer::EOS)).enumerate() {
            targets[offset + k] = Some(t);
        }
        targets
    }

    /// Mean next-token loss over the answer bytes and the closing EOS,
    /// given the text and the soft prompt.
    pub fn lm_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: &[usize],
        prompt: Option<Var>,
        answer: &[usize],
    ) -> Result<Var> {
        if answer.is_empty() {
            return Err(Error::EmptyAnswer);
        }
        let x = self.assemble_input(g, store, text, prompt)?;
        let n = g.shape(x).0;
        let a = self.embed_at(g, store, answer, n)?;
        let x = g.concat_rows(&[x, a])?;
        let logits = self.forward(g, store, x)?;
        let targets = Self::answer_targets(answer, n - 1, n + answer.len());
        g.cross_entropy(logits, &targets)
    }

    /// Same value as [`ToyLm::lm_loss`] with appended prompts, reusing the
    /// cached text rows. Gradients do not reach the text path, so this is
    /// only for runs where the model weights are frozen.
    pub fn lm_loss_cached(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cache: &KvCache,
        prompt: Option<Var>,
        answer: &[usize],
    ) -> Result<Var> {
        if answer.is_empty() {
            return Err(Error::EmptyAnswer);
        }
        if self.cfg.placement != PromptPlacement::Append {
            return Err(Error::Config("cached loss needs appended prompts".into()));
        }
        let m = self.check_prompt(g, prompt)?;
        if cache.len == 0 && m == 0 {
            return Err(Error::shape("lm_loss_cached", "empty input"));
        }
        let a = self.embed_at(g, store, answer, cache.len + m)?;
        let x = match prompt {
            Some(p) => {
                let p = self.prompt_rows(g, store, p, cache.len)?;
                g.concat_rows(&[p, a])?
            }
            None => a,
        };
        let logits = self.run(g, store, x, Some(cache))?.logits;
        if m > 0 {
            let targets = Self::answer_targets(answer, m - 1, live_rows(m, answer));
            return g.cross_entropy(logits, &targets);
        }
        // The first answer byte is predicted by the last cached row.
        let first = cache
            .last_logits
            .clone()
            .ok_or_else(|| Error::shape("lm_loss_cached", "empty input"))?;
        let first = g.constant(first);
        let logits = g.concat_rows(&[first, logits])?;
        let targets = Self::answer_targets(answer, 0, 1 + answer.len());
        g.cross_entropy(logits, &targets)
    }

    /// Greedy decoding after `text` and `prompt` until EOS or `max_new`
    /// bytes.
    pub fn generate(
        &self,
        store: &ParamStore,
        text: &[usize],
        prompt: Option<&Tensor>,
        max_new: usize,
    ) -> Result<String> {
        let ids = self.generate_ids(store, text, prompt, max_new)?;
        Ok(Tokenizer.decode(&ids))
    }

    pub fn generate_ids(
        &self,
        store: &ParamStore,
        text: &[usize],
        prompt: Option<&Tensor>,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        if max_new == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference();
        let p = prompt.map(|t| g.constant(t.clone()));
        let x = self.assemble_input(&mut g, store, text, p)?;
        let n = g.shape(x).0;
        let mut cache = KvCache::empty(self.blocks.len(), self.cfg.dim);
        let out = self.run(&mut g, store, x, None)?;
        self.extend(&g, &mut cache, &out.kv, n);
        let mut next = argmax(g.value(out.logits).row(n - 1));
        let mut ids = Vec::new();
        while next != Tokenizer::EOS && ids.len() < max_new && cache.len < self.cfg.max_positions {
            ids.push(next);
            let mut g = Graph::inference();
            let x = self.embed_at(&mut g, store, &[next], cache.len)?;
            let out = self.run(&mut g, store, x, Some(&cache))?;
            self.extend(&g, &mut cache, &out.kv, 1);
            next = argmax(g.value(out.logits).row(0));
        }
        Ok(ids)
    }

    /// Generation that reuses a prefix cache of the text (appended prompts
    /// only).
    pub fn generate_cached(
        &self,
        store: &ParamStore,
        cache: &KvCache,
        prompt: &Tensor,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        if max_new == 0 {
            return Ok(Vec::new());
        }
        if self.cfg.placement != PromptPlacement::Append {
            return Err(Error::Config("cached generation needs appended prompts".into()));
        }
        let mut cache = cache.clone();
        let mut g = Graph::inference();
        let p = g.constant(prompt.clone());
        self.check_prompt(&g, Some(p))?;
        let x = self.prompt_rows(&mut g, store, p, cache.len)?;
        let m = prompt.rows();
        let out = self.run(&mut g, store, x, Some(&cache))?;
        self.extend(&g, &mut cache, &out.kv, m);
        let mut next = argmax(g.value(out.logits).row(m - 1));
        let mut ids = Vec::new();
        while next != Tokenizer::EOS && ids.len() < max_new && cache.len < self.cfg.max_positions {
            ids.push(next);
            let mut g = Graph::inference();
            let x = self.embed_at(&mut g, store, &[next], cache.len)?;
            let out = self.run(&mut g, store, x, Some(&cache))?;
            self.extend(&g, &mut cache, &out.kv, 1);
            next = argmax(g.value(out.logits).row(0));
        }
        Ok(ids)
    }

    /// Attaches rank-`r` adapters to every attention and FFN projection.
    /// `A` is Gaussian, `B` starts at zero. Returns the new parameters.
    pub fn apply_lora(&mut self, store: &mut ParamStore, rank: usize, alpha: f64) -> Result<Vec<ParamId>> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        for l in self.adapted() {
            if rank > l.d_in.min(l.d_out) {
                return Err(Error::RankTooLarge {
                    rank,
                    d_in: l.d_in,
                    d_out: l.d_out,
                });
            }
            if l.lora.is_some() {
                return Err(Error::Config("adapters already attached".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, 0x10a));
        let names: Vec<String> = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(i, _)| {
                ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.up", "ffn.down"].map(|n| format!("block{i}.{n}"))
            })
            .collect();
        let scale = alpha / rank as f64;
        let mut added = Vec::new();
        for (l, name) in self.adapted_mut().into_iter().zip(names) {
            let a = Tensor::randn(rank, l.d_in, 1.0 / (l.d_in as f64).sqrt(), &mut rng);
            let a = store.insert(format!("{LORA_PREFIX}{name}.a"), a)?;
            let b = store.insert(format!("{LORA_PREFIX}{name}.b"), Tensor::zeros(l.d_out, rank))?;
            l.lora = Some(LoraPair { a, b, scale });
            added.extend([a, b]);
        }
        Ok(added)
    }

    /// Re-attaches adapters stored under `lora.` (for example after a
    /// checkpoint load).
    pub fn attach_lora(&mut self, store: &ParamStore, rank: usize, alpha: f64) -> Result<()> {
        let names: Vec<String> = (0..self.blocks.len())
            .flat_map(|i| {
                ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.up", "ffn.down"].map(|n| format!("block{i}.{n}"))
            })
            .collect();
        let scale = alpha / rank as f64;
        for (l, name) in self.adapted_mut().into_iter().zip(names) {
            let find = |s: &str| {
                store
                    .id(&format!("{LORA_PREFIX}{name}.{s}"))
                    .ok_or_else(|| Error::UnknownParam(format!("{LORA_PREFIX}{name}.{s}")))
            };
            l.lora = Some(LoraPair {
                a: find("a")?,
                b: find("b")?,
                scale,
            });
        }
        Ok(())
    }

    /// Folds each adapter into its weight, `W += scale · Aᵀ·Bᵀ`, and
    /// detaches it. The adapter tensors stay in the store.
    pub fn merge_lora(&mut self, store: &mut ParamStore) -> Result<()> {
        for l in self.adapted_mut() {
            if let Some(p) = l.lora.take() {
                let delta = kernels::matmul_tn(store.get(p.a), &store.get(p.b).transpose())?;
                let w = store.get(l.w);
                let data = w
                    .data()
                    .iter()
                    .zip(delta.data())
                    .map(|(w, d)| w + p.scale * d)
                    .collect();
                store.set(l.w, Tensor::matrix(l.d_in, l.d_out, data))?;
            }
        }
        Ok(())
    }

    /// Detaches adapters without touching the base weights.
    pub fn strip_lora(&mut self) {
        for l in self.adapted_mut() {
            l.lora = None;
        }
    }
}

fn live_rows(m: usize, answer: &[usize]) -> usize {
    m + answer.len()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
