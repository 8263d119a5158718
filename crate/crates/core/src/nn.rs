//! Parameter initialisation and the layers shared by the ViT and E-RADIO
//! students, the synthetic teachers and the adaptor heads.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Element, Graph, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

/// Parameters and graph for one forward pass, addressed by name prefix.
pub struct Scope<'a, T: Element> {
    pub store: &'a ParamStore<T>,
    pub prefix: String,
}

impl<'a, T: Element> Scope<'a, T> {
    pub fn new(store: &'a ParamStore<T>, prefix: impl Into<String>) -> Self {
        Self { store, prefix: prefix.into() }
    }

    pub fn sub(&self, name: &str) -> Scope<'a, T> {
        Scope { store: self.store, prefix: join(&self.prefix, name) }
    }

    pub fn get(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        g.param(self.store, &join(&self.prefix, name))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(&join(&self.prefix, name))
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Builder that fills a [`ParamStore`] under a prefix.
pub struct Init<'a, T: Element, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub prefix: String,
}

impl<'a, T: Element, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, prefix: impl Into<String>) -> Self {
        Self { store, rng, prefix: prefix.into() }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape.to_vec(), std, self.rng);
        self.store.insert(join(&self.prefix, name), t);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store.insert(join(&self.prefix, name), Tensor::full(shape.to_vec(), T::from_f64(value)));
    }

    /// `[din, dout]` weight with fan-in scaling and a zero bias.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.normal(&format!("{name}.w"), &[din, dout], (1.0 / din as f64).sqrt());
        self.constant(&format!("{name}.b"), &[dout], 0.0);
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) {
        self.constant(&format!("{name}.g"), &[d], 1.0);
        self.constant(&format!("{name}.b"), &[d], 0.0);
    }

    /// Pre-norm attention + MLP block.
    pub fn block(&mut self, name: &str, d: usize, hidden: usize) {
        self.layer_norm(&format!("{name}.ln1"), d);
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.attn.{p}"), d, d);
        }
        self.layer_norm(&format!("{name}.ln2"), d);
        self.linear(&format!("{name}.mlp.fc1"), d, hidden);
        self.linear(&format!("{name}.mlp.fc2"), hidden, d);
    }
}

pub fn linear<T: Element>(g: &mut Graph<T>, s: &Scope<T>, name: &str, x: Var) -> Result<Var> {
    let w = s.get(g, &format!("{name}.w"))?;
    let b = s.get(g, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm<T: Element>(g: &mut Graph<T>, s: &Scope<T>, name: &str, x: Var) -> Result<Var> {
    let gamma = s.get(g, &format!("{name}.g"))?;
    let beta = s.get(g, &format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Pre-norm transformer block over `groups` independent sequences stacked
/// as `[groups*t, d]`.
pub fn block<T: Element>(g: &mut Graph<T>, s: &Scope<T>, x: Var, groups: usize, heads: usize) -> Result<Var> {
    let h = layer_norm(g, s, "ln1", x)?;
    let q = linear(g, s, "attn.q", h)?;
    let k = linear(g, s, "attn.k", h)?;
    let v = linear(g, s, "attn.v", h)?;
    let a = g.attention(q, k, v, groups, heads)?;
    let o = linear(g, s, "attn.o", a)?;
    let x = g.add(x, o)?;
    let h = layer_norm(g, s, "ln2", x)?;
    let h = linear(g, s, "mlp.fc1", h)?;
    let h = g.gelu(h)?;
    let h = linear(g, s, "mlp.fc2", h)?;
    g.add(x, h)
}

/// Analytic FLOPs of [`block`] on `n` rows split into `groups` sequences.
pub fn block_flops(n: usize, groups: usize, d: usize, hidden: usize) -> u64 {
    let t = n / groups;
    (2 * n * d * d * 4 + 4 * groups * t * t * d + 2 * 2 * n * d * hidden) as u64
}

/// Two-layer GELU MLP `fc1 -> gelu -> fc2` on rows.
pub fn mlp<T: Element>(g: &mut Graph<T>, s: &Scope<T>, x: Var) -> Result<Var> {
    let h = linear(g, s, "fc1", x)?;
    let h = g.gelu(h)?;
    linear(g, s, "fc2", h)
}
