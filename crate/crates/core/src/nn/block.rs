use super::attention::MultiHeadAttention;
use super::params::{Bound, Init, ParamId, ParamStore};
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Initialization of the attention and MLP weight matrices.
pub(crate) const BLOCK_WEIGHT_INIT: Init = Init::Normal(0.02);

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.init(format!("{prefix}.gain"), &[dim], Init::Ones, rng)?,
            bias: store.init(format!("{prefix}.bias"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], T::c(LN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        weight_init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.init(format!("{prefix}.weight"), &[fan_in, fan_out], weight_init, rng)?,
            bias: store.init(format!("{prefix}.bias"), &[fan_out], Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add_row(y, p[self.bias])
    }
}

/// Two-layer perceptron, `D → 4D → D`, GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{prefix}.hidden"), dim, 4 * dim, BLOCK_WEIGHT_INIT)?,
            out: Linear::new(store, rng, &format!("{prefix}.out"), 4 * dim, dim, BLOCK_WEIGHT_INIT)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.gelu(h);
        self.out.forward(g, p, h)
    }
}

/// Per-channel residual-branch scales (λ, λ′).
#[derive(Clone, Debug)]
pub struct LayerScale {
    pub attention: ParamId,
    pub mlp: ParamId,
}

impl LayerScale {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        init: f64,
    ) -> Result<Self> {
        Ok(Self {
            attention: store.init(format!("{prefix}.scale_attention"), &[dim], Init::Constant(init), rng)?,
            mlp: store.init(format!("{prefix}.scale_mlp"), &[dim], Init::Constant(init), rng)?,
        })
    }
}

fn scaled<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, scale: Option<ParamId>) -> Result<Var> {
    match scale {
        Some(s) => g.mul_row(x, p[s]),
        None => Ok(x),
    }
}

/// Pre-norm transformer encoder layer:
/// `z′ = S₁·MSA(LN(z)) + z`, `z_out = S₂·MLP(LN(z′)) + z′`,
/// with `S` the LayerScale diagonals when present.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub layer_scale: Option<LayerScale>,
}

impl EncoderBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        layer_scale_init: Option<f64>,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, rng, &format!("{prefix}.norm1"), dim)?,
            attention: MultiHeadAttention::new(store, rng, &format!("{prefix}.attention"), dim, heads)?,
            norm2: LayerNorm::new(store, rng, &format!("{prefix}.norm2"), dim)?,
            mlp: Mlp::new(store, rng, &format!("{prefix}.mlp"), dim)?,
            layer_scale: layer_scale_init
                .map(|v| LayerScale::new(store, rng, prefix, dim, v))
                .transpose()?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let a = self.norm1.forward(g, p, z)?;
        let a = self.attention.forward(g, p, a)?;
        let a = scaled(g, p, a, self.layer_scale.as_ref().map(|s| s.attention))?;
        let z1 = g.add(a, z)?;
        let m = self.norm2.forward(g, p, z1)?;
        let m = self.mlp.forward(g, p, m)?;
        let m = scaled(g, p, m, self.layer_scale.as_ref().map(|s| s.mlp))?;
        g.add(m, z1)
    }
}

/// Class-attention layer: the class row attends over `[class; patches]`
/// and is the only row updated. Patch rows are never written.
#[derive(Clone, Debug)]
pub struct ClassAttentionBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub layer_scale: Option<LayerScale>,
}

impl ClassAttentionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
        layer_scale_init: Option<f64>,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, rng, &format!("{prefix}.norm1"), dim)?,
            attention: MultiHeadAttention::new(store, rng, &format!("{prefix}.attention"), dim, heads)?,
            norm2: LayerNorm::new(store, rng, &format!("{prefix}.norm2"), dim)?,
            mlp: Mlp::new(store, rng, &format!("{prefix}.mlp"), dim)?,
            layer_scale: layer_scale_init
                .map(|v| LayerScale::new(store, rng, prefix, dim, v))
                .transpose()?,
        })
    }

    /// `class`: `1×D`; `patches`: `n×D` (n may be zero). Returns the new class row.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        class: Var,
        patches: Var,
    ) -> Result<Var> {
        let z = if g.value(patches).is_empty() {
            class
        } else {
            g.concat_rows(&[class, patches])?
        };
        let a = self.norm1.forward(g, p, z)?;
        let a = self.attention.forward_class(g, p, a)?;
        let a = scaled(g, p, a, self.layer_scale.as_ref().map(|s| s.attention))?;
        let c1 = g.add(a, class)?;
        let m = self.norm2.forward(g, p, c1)?;
        let m = self.mlp.forward(g, p, m)?;
        let m = scaled(g, p, m, self.layer_scale.as_ref().map(|s| s.mlp))?;
        g.add(m, c1)
    }
}
