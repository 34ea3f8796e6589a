//! Parameterized building blocks. Each holds only parameter ids; values
//! live in the model's [`ParamStore`].

use crate::rng::Rng;
use crate::tensor::{AttnMask, LaneGroup, ParamId, ParamStore, Result, Tape, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    pub fn randn(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.store.add(name, t)
    }

    pub fn full(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, v))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: init.randn(format!("{name}.w"), &[cin, cout], INIT_STD),
            b: Some(init.full(format!("{name}.b"), &[cout], 0.0)),
        }
    }

    /// Without a bias, for projections where a bias has no effect (keys:
    /// a shared shift of every score cancels in the softmax).
    pub fn unbiased(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: init.randn(format!("{name}.w"), &[cin, cout], INIT_STD),
            b: None,
        }
    }

    pub fn zeros(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: init.full(format!("{name}.w"), &[cin, cout], 0.0),
            b: Some(init.full(format!("{name}.b"), &[cout], 0.0)),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(s, self.w);
        let b = self.b.map(|b| t.param(s, b));
        t.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            g: init.full(format!("{name}.g"), &[d], 1.0),
            b: init.full(format!("{name}.b"), &[d], 0.0),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let g = t.param(s, self.g);
        let b = t.param(s, self.b);
        t.layer_norm(x, Some((g, b)))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init, name: &str, d: usize, d_ff: usize) -> Self {
        Self {
            up: Linear::new(init, &format!("{name}.up"), d, d_ff),
            down: Linear::new(init, &format!("{name}.down"), d_ff, d),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(t, s, x)?;
        let h = t.gelu(h)?;
        self.down.forward(t, s, h)
    }
}

/// Query, key, value and output projections.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Proj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Proj {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d),
            k: Linear::unbiased(init, &format!("{name}.k"), d, d),
            v: Linear::new(init, &format!("{name}.v"), d, d),
            o: Linear::new(init, &format!("{name}.o"), d, d),
        }
    }
}

/// Pre-norm cross-attention block followed by a feed-forward block:
/// queries from one token set, keys and values from another.
#[derive(Clone, Copy, Debug)]
pub(crate) struct CrossBlock {
    pub ln_q: Norm,
    pub ln_kv: Norm,
    pub proj: Proj,
    pub ln_ff: Norm,
    pub ffn: Ffn,
}

impl CrossBlock {
    pub fn new(init: &mut Init, name: &str, d: usize, d_ff: usize) -> Self {
        Self {
            ln_q: Norm::new(init, &format!("{name}.ln_q"), d),
            ln_kv: Norm::new(init, &format!("{name}.ln_kv"), d),
            proj: Proj::new(init, &format!("{name}.attn"), d),
            ln_ff: Norm::new(init, &format!("{name}.ln_ff"), d),
            ffn: Ffn::new(init, &format!("{name}.ffn"), d, d_ff),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, kv: Var, heads: usize) -> Result<Var> {
        let xn = self.ln_q.forward(t, s, x)?;
        let kvn = self.ln_kv.forward(t, s, kv)?;
        let q = self.proj.q.forward(t, s, xn)?;
        let k = self.proj.k.forward(t, s, kvn)?;
        let v = self.proj.v.forward(t, s, kvn)?;
        let a = t.attention(q, k, v, heads, AttnMask::Full)?;
        let a = self.proj.o.forward(t, s, a)?;
        let x = t.add(x, a)?;
        ffn_residual(t, s, &self.ln_ff, &self.ffn, x)
    }

    /// Each group of rows in `x` attends to itself and to the first
    /// `latent` rows of `kv` (the group's own stream joined with a shared
    /// key set).
    pub fn forward_joint(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        x: Var,
        kv: Var,
        heads: usize,
        groups: &[LaneGroup],
    ) -> Result<Var> {
        let xn = self.ln_q.forward(t, s, x)?;
        let kvn = self.ln_kv.forward(t, s, kv)?;
        let q = self.proj.q.forward(t, s, xn)?;
        let ks = self.proj.k.forward(t, s, xn)?;
        let vs = self.proj.v.forward(t, s, xn)?;
        let kl = self.proj.k.forward(t, s, kvn)?;
        let vl = self.proj.v.forward(t, s, kvn)?;
        let a = t.lane_attention(q, ks, vs, kl, vl, heads, groups)?;
        let a = self.proj.o.forward(t, s, a)?;
        let x = t.add(x, a)?;
        ffn_residual(t, s, &self.ln_ff, &self.ffn, x)
    }
}

/// Pre-norm self-attention block with an arbitrary mask.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SelfBlock {
    pub ln: Norm,
    pub proj: Proj,
    pub ln_ff: Norm,
    pub ffn: Ffn,
}

impl SelfBlock {
    pub fn new(init: &mut Init, name: &str, d: usize, d_ff: usize) -> Self {
        Self {
            ln: Norm::new(init, &format!("{name}.ln"), d),
            proj: Proj::new(init, &format!("{name}.attn"), d),
            ln_ff: Norm::new(init, &format!("{name}.ln_ff"), d),
            ffn: Ffn::new(init, &format!("{name}.ffn"), d, d_ff),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let xn = self.ln.forward(t, s, x)?;
        let q = self.proj.q.forward(t, s, xn)?;
        let k = self.proj.k.forward(t, s, xn)?;
        let v = self.proj.v.forward(t, s, xn)?;
        let a = t.attention(q, k, v, heads, mask)?;
        let a = self.proj.o.forward(t, s, a)?;
        let x = t.add(x, a)?;
        ffn_residual(t, s, &self.ln_ff, &self.ffn, x)
    }
}

fn ffn_residual(t: &mut Tape, s: &ParamStore, ln: &Norm, ffn: &Ffn, x: Var) -> Result<Var> {
    let h = ln.forward(t, s, x)?;
    let h = ffn.forward(t, s, h)?;
    t.add(x, h)
}

/// Decoding block: condition-modulated norm, attention over the block's
/// own tokens plus a latent prefix, then a feed-forward block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LaneBlock {
    pub cond: Linear,
    pub alpha: Linear,
    pub beta: Linear,
    pub proj: Proj,
    pub ln_ff: Norm,
    pub ffn: Ffn,
}

impl LaneBlock {
    pub fn new(init: &mut Init, name: &str, d: usize, d_ff: usize) -> Self {
        Self {
            cond: Linear::new(init, &format!("{name}.cond"), d, d),
            alpha: Linear::zeros(init, &format!("{name}.alpha"), d, d),
            beta: Linear::zeros(init, &format!("{name}.beta"), d, d),
            proj: Proj::new(init, &format!("{name}.attn"), d),
            ln_ff: Norm::new(init, &format!("{name}.ln_ff"), d),
            ffn: Ffn::new(init, &format!("{name}.ffn"), d, d_ff),
        }
    }

    /// `x`: `B * l_sub` query rows, `cond`: one row per pathway, `latent`:
    /// the shared latent rows; pathway `b` sees `groups[b].latent` of them.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        x: Var,
        cond: Var,
        latent: Var,
        heads: usize,
        groups: &[LaneGroup],
    ) -> Result<Var> {
        let l_sub = groups[0].rows;
        let c = self.cond.forward(t, s, cond)?;
        let c = t.gelu(c)?;
        let alpha = self.alpha.forward(t, s, c)?;
        let beta = self.beta.forward(t, s, c)?;
        let xn = t.layer_norm(x, None)?;
        let xm = t.modulate(xn, alpha, beta, l_sub)?;
        let q = self.proj.q.forward(t, s, xm)?;
        let ks = self.proj.k.forward(t, s, xm)?;
        let vs = self.proj.v.forward(t, s, xm)?;
        let kl = self.proj.k.forward(t, s, latent)?;
        let vl = self.proj.v.forward(t, s, latent)?;
        let a = t.lane_attention(q, ks, vs, kl, vl, heads, groups)?;
        let a = self.proj.o.forward(t, s, a)?;
        let x = t.add(x, a)?;
        ffn_residual(t, s, &self.ln_ff, &self.ffn, x)
    }
}
