//! Parameterized layers shared by the encoder, the query-token former and the
//! toy language model.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels::LAYER_NORM_EPS;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: impl Into<String>) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.into(),
        }
    }

    pub fn child(&mut self, name: &str) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix: format!("{}{}.", self.prefix, name),
        }
    }

    fn full(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let t = Tensor::randn(rows, cols, std, self.rng);
        self.store.insert(self.full(name), t)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Result<ParamId> {
        self.store.insert(self.full(name), Tensor::filled(rows, cols, value))
    }
}

#[derive(Clone, Debug)]
pub struct LoraPair {
    /// `r × d_in`
    pub a: ParamId,
    /// `d_out × r`
    pub b: ParamId,
    pub scale: f64,
}

/// `y = x·W + b`, with `W` stored `d_in × d_out`, plus an optional low-rank
/// delta `scale · x·Aᵀ·Bᵀ`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub lora: Option<LoraPair>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        Self::with_std(pb, name, d_in, d_out, bias, std)
    }

    pub fn with_std(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let mut c = pb.child(name);
        let w = c.normal("weight", d_in, d_out, std)?;
        let b = if bias {
            Some(c.constant("bias", 1, d_out, 0.0)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            lora: None,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = g.param(store, b);
            y = g.add_row(y, b)?;
        }
        if let Some(l) = &self.lora {
            let a = g.param(store, l.a);
            let b = g.param(store, l.b);
            let down = g.matmul_nt(x, a)?;
            let up = g.matmul_nt(down, b)?;
            let up = g.scale(up, l.scale);
            y = g.add(y, up)?;
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        if let Some(l) = &self.lora {
            v.push(l.a);
            v.push(l.b);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut c = pb.child(name);
        Ok(Self {
            gain: c.constant("gain", 1, dim, 1.0)?,
            bias: c.constant("bias", 1, dim, 0.0)?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Two-layer position-wise MLP with a GELU between.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        let mut c = pb.child(name);
        Ok(Self {
            up: Linear::new(&mut c, "up", d_in, hidden, true)?,
            down: Linear::new(&mut c, "down", hidden, d_out, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.up.params();
        v.extend(self.down.params());
        v
    }
}

/// Scaled dot-product multi-head attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    /// Queries come from `dim`-wide rows, keys/values from `kv_dim`-wide rows.
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let mut c = pb.child(name);
        Ok(Self {
            q: Linear::new(&mut c, "q", dim, dim, true)?,
            k: Linear::new(&mut c, "k", kv_dim, dim, false)?,
            v: Linear::new(&mut c, "v", kv_dim, dim, true)?,
            o: Linear::new(&mut c, "o", dim, dim, true)?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, kv: Var, mask: Option<&[bool]>) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, kv)?;
        let v = self.v.forward(g, store, kv)?;
        self.attend(g, store, q, k, v, mask)
    }

    /// Attention over already-projected `q`, `k`, `v`; `mask` is row-major
    /// `rows(q) × rows(k)`.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let p = g.softmax_rows_masked(s, mask)?;
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.o.forward(g, store, cat)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}
