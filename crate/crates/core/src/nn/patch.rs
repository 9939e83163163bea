use super::params::{Bound, Init, ParamId, ParamStore};
use crate::error::{dim_err, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const CHANNELS: usize = 3;

fn grid(side: usize, patch: usize) -> Result<usize> {
    if patch == 0 || side % patch != 0 {
        return Err(dim_err!("image side {side} is not divisible by patch width {patch}"));
    }
    Ok(side / patch)
}

/// Splits a `side×side×3` image into `n_p` flattened patches in raster order.
///
/// Row `i` holds patch `i` (grid row-major), its pixels flattened `(y, x, c)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (side, per_side) = match image.shape() {
        [h, w, CHANNELS] if h == w => (*h, grid(*h, patch)?),
        s => return Err(dim_err!("expected a square {CHANNELS}-channel image, got {:?}", s)),
    };
    let width = patch * patch * CHANNELS;
    let src = image.data();
    let mut out = Vec::with_capacity(per_side * per_side * width);
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..patch {
                let row = (py * patch + y) * side + px * patch;
                out.extend_from_slice(&src[row * CHANNELS..(row + patch) * CHANNELS]);
            }
        }
    }
    Tensor::new([per_side * per_side, width], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (n, width) = patches.dims2()?;
    let per_side = (n as f64).sqrt().round() as usize;
    if per_side * per_side != n || width != patch * patch * CHANNELS {
        return Err(dim_err!(
            "{:?} is not a square grid of {patch}px patches",
            patches.shape()
        ));
    }
    let side = per_side * patch;
    let mut out = vec![T::zero(); side * side * CHANNELS];
    let src = patches.data();
    for py in 0..per_side {
        for px in 0..per_side {
            let p = (py * per_side + px) * width;
            for y in 0..patch {
                let row = (py * patch + y) * side + px * patch;
                out[row * CHANNELS..(row + patch) * CHANNELS]
                    .copy_from_slice(&src[p + y * patch * CHANNELS..p + (y + 1) * patch * CHANNELS]);
            }
        }
    }
    Tensor::new([side, side, CHANNELS], out)
}

/// Extra learned tokens around the patch sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub class_token: bool,
    pub distill_token: bool,
}

impl TokenLayout {
    pub fn extra(&self) -> usize {
        self.class_token as usize + self.distill_token as usize
    }

    /// Row range of the patch tokens within the embedded sequence.
    pub fn patch_rows(&self, n_patches: usize) -> std::ops::Range<usize> {
        let start = self.class_token as usize;
        start..start + n_patches
    }
}

/// Linear patch projection plus learned positions and tokens:
/// `z₀ = [cls; x¹E; …; xⁿE; dist] + E_pos`.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub projection: ParamId,
    pub positions: ParamId,
    pub class_token: Option<ParamId>,
    pub distill_token: Option<ParamId>,
    pub patch: usize,
    pub n_patches: usize,
    pub dim: usize,
}

impl PatchEmbedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        image_side: usize,
        patch: usize,
        dim: usize,
        layout: TokenLayout,
    ) -> Result<Self> {
        let per_side = grid(image_side, patch)?;
        let n_patches = per_side * per_side;
        let width = patch * patch * CHANNELS;
        let projection = store.init("embed.projection", &[width, dim], Init::XavierUniform, rng)?;
        let class_token = if layout.class_token {
            Some(store.init("embed.class_token", &[1, dim], Init::Normal(0.02), rng)?)
        } else {
            None
        };
        let distill_token = if layout.distill_token {
            Some(store.init("embed.distill_token", &[1, dim], Init::Normal(0.02), rng)?)
        } else {
            None
        };
        let positions = store.init(
            "embed.positions",
            &[n_patches + layout.extra(), dim],
            Init::Normal(0.02),
            rng,
        )?;
        Ok(Self {
            projection,
            positions,
            class_token,
            distill_token,
            patch,
            n_patches,
            dim,
        })
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            class_token: self.class_token.is_some(),
            distill_token: self.distill_token.is_some(),
        }
    }

    pub fn sequence_len(&self) -> usize {
        self.n_patches + self.layout().extra()
    }

    /// `patches · E`, one row per patch.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: Var) -> Result<Var> {
        let (_, width) = g.value(patches).dims2()?;
        let (ew, _) = g.value(p[self.projection]).dims2()?;
        if width != ew {
            return Err(dim_err!(
                "patch rows of width {width} do not match projection {:?}",
                g.value(p[self.projection]).shape()
            ));
        }
        g.matmul(patches, p[self.projection])
    }

    /// Assembles the token sequence from projected patch rows and adds positions.
    pub fn assemble<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(3);
        if let Some(cls) = self.class_token {
            parts.push(p[cls]);
        }
        parts.push(tokens);
        if let Some(dist) = self.distill_token {
            parts.push(p[dist]);
        }
        let seq = if parts.len() == 1 {
            tokens
        } else {
            g.concat_rows(&parts)?
        };
        if g.value(seq).shape() != g.value(p[self.positions]).shape() {
            return Err(dim_err!(
                "token sequence {:?} does not match position table {:?}",
                g.value(seq).shape(),
                g.value(p[self.positions]).shape()
            ));
        }
        g.add(seq, p[self.positions])
    }

    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: Var) -> Result<Var> {
        let tokens = self.project(g, p, patches)?;
        self.assemble(g, p, tokens)
    }
}
