use super::params::{Bound, ParamId, ParamStore};
use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Attention weights `softmax(QKᵀ/√d_h)` (rows sum to one).
pub fn attention_weights<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var) -> Result<Var> {
    let (_, dh) = g.value(q).dims2()?;
    let (_, dk) = g.value(k).dims2()?;
    if dh != dk {
        return Err(dim_err!(
            "query width {dh} differs from key width {dk}"
        ));
    }
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, T::one() / T::c(dh as f64).sqrt());
    g.softmax(scaled, 1)
}

/// `softmax(QKᵀ/√d_h)·V`.
pub fn scaled_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (nk, _) = g.value(k).dims2()?;
    let (nv, _) = g.value(v).dims2()?;
    if nk != nv {
        return Err(dim_err!("keys have {nk} rows but values have {nv}"));
    }
    let w = attention_weights(g, q, k)?;
    g.matmul(w, v)
}

/// Multi-head attention projections. Each head owns a `D×D_h` column block
/// of the query, key and value matrices.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        let mut w = |name: &str| store.init(format!("{prefix}.{name}"), &[dim, dim], super::block::BLOCK_WEIGHT_INIT, rng);
        Ok(Self {
            query: w("query")?,
            key: w("key")?,
            value: w("value")?,
            output: w("output")?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Self-attention: every token attends to every token.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let q = g.matmul(x, p[self.query])?;
        self.attend(g, p, q, x)
    }

    /// Class attention: only the first row issues a query; keys and values
    /// come from the whole sequence. Returns one row.
    pub fn forward_class<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let first = g.slice_rows(x, 0, 1)?;
        let q = g.matmul(first, p[self.query])?;
        self.attend(g, p, q, x)
    }

    fn attend<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, q: Var, x: Var) -> Result<Var> {
        let k = g.matmul(x, p[self.key])?;
        let v = g.matmul(x, p[self.value])?;
        let dh = self.head_dim();
        let heads = if self.heads == 1 {
            vec![scaled_attention(g, q, k, v)?]
        } else {
            let mut out = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                out.push(scaled_attention(g, qh, kh, vh)?);
            }
            out
        };
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        g.matmul(joined, p[self.output])
    }
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "embedding dimension {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    #[test]
    fn single_token_returns_value_row() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_rows(&[&[0.3, -1.0]]));
        let k = g.constant(Tensor::from_rows(&[&[2.0, 0.5]]));
        let v = g.constant(Tensor::from_rows(&[&[7.0, -3.0, 1.5]]));
        let out = scaled_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, -3.0, 1.5]);
    }

    #[test]
    fn orthogonal_query_gives_column_mean() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let k = g.constant(Tensor::from_rows(&[&[0.0, 1.0], &[0.0, -2.0], &[0.0, 5.0]]));
        let v = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 9.0]]));
        let out = scaled_attention(&mut g, q, k, v).unwrap();
        let o = g.value(out).data();
        assert!((o[0] - 3.0).abs() < 1e-12 && (o[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn three_tokens_match_hand_softmax() {
        // d_h = 1, so scores are q·k directly.
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_rows(&[&[1.0]]));
        let k = g.constant(Tensor::from_rows(&[&[0.0], &[1.0], &[2.0]]));
        let v = g.constant(Tensor::from_rows(&[&[10.0], &[20.0], &[30.0]]));
        let out = scaled_attention(&mut g, q, k, v).unwrap();
        let e = [1.0f64, 1f64.exp(), 2f64.exp()];
        let s: f64 = e.iter().sum();
        let want = (10.0 * e[0] + 20.0 * e[1] + 30.0 * e[2]) / s;
        assert!((g.value(out).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn one_head_with_identity_output_is_plain_attention() {
        let mut rng = seeded(3);
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 4, 1).unwrap();
        store.set(mha.output, Tensor::identity(4)).unwrap();
        let x = Tensor::from_rows(&[&[0.1, 0.2, -0.3, 0.4], &[1.0, -1.0, 0.5, 0.0], &[0.0, 0.3, 0.3, 0.3]]);

        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x);
        let out = mha.forward(&mut g, &p, xv).unwrap();
        let q = g.matmul(xv, p[mha.query]).unwrap();
        let k = g.matmul(xv, p[mha.key]).unwrap();
        let v = g.matmul(xv, p[mha.value]).unwrap();
        let direct = scaled_attention(&mut g, q, k, v).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(direct)) < 1e-12);
    }

    #[test]
    fn head_split_for_paper_geometry_and_indivisible_rejected() {
        let mut rng = seeded(0);
        let mut store = ParamStore::<f32>::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 384, 6).unwrap();
        assert_eq!(mha.head_dim(), 64);
        assert!(matches!(
            MultiHeadAttention::new(&mut store, &mut rng, "b", 64, 6),
            Err(Error::Config(_))
        ));
    }
}
