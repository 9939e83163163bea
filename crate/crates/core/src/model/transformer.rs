use super::config::{ModelConfig, Variant, CLASS_ATTENTION_DEPTH, LAYER_SCALE_INIT};
use crate::error::{Error, Result};
use crate::nn::{
    patchify, softmax_row, Bound, ClassAttentionBlock, EncoderBlock, Init, LayerNorm, LinearHead,
    MlpHead, ParamId, ParamStore, PatchEmbedding, TokenLayout,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub enum Head {
    /// ViT / BEiT: `LN(z_L⁰)` through the Mish MLP head.
    Mlp(MlpHead),
    /// DeiT: one linear head on the class token, one on the distillation token.
    Distilled { class: LinearHead, distill: LinearHead },
    /// CaiT: class token inserted after the self-attention stage.
    ClassAttention {
        class_token: ParamId,
        blocks: Vec<ClassAttentionBlock>,
        head: LinearHead,
    },
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub embed: PatchEmbedding,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pub head: Head,
}

/// Pre-softmax outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub logits: Var,
    /// DeiT distillation-token logits.
    pub distill_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct TransformerModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub arch: Architecture,
}

impl<T: Scalar> TransformerModel<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = match config.variant {
            Variant::Vit | Variant::Beit => TokenLayout { class_token: true, distill_token: false },
            Variant::Deit => TokenLayout { class_token: true, distill_token: true },
            Variant::Cait => TokenLayout { class_token: false, distill_token: false },
        };
        let embed = PatchEmbedding::new(&mut store, rng, config.image_side, config.patch, config.dim, layout)?;
        let layer_scale = (config.variant == Variant::Cait).then_some(LAYER_SCALE_INIT);
        let blocks = (0..config.depth)
            .map(|l| {
                EncoderBlock::new(&mut store, rng, &format!("block{l}"), config.dim, config.heads, layer_scale)
            })
            .collect::<Result<Vec<_>>>()?;
        let head = match config.variant {
            Variant::Vit | Variant::Beit => Head::Mlp(MlpHead::new(&mut store, rng, "head", config.dim)?),
            Variant::Deit => Head::Distilled {
                class: LinearHead::new(&mut store, rng, "head.class", config.dim)?,
                distill: LinearHead::new(&mut store, rng, "head.distill", config.dim)?,
            },
            Variant::Cait => {
                let class_token = store.init("head.class_token", &[1, config.dim], Init::Normal(0.02), rng)?;
                let blocks = (0..CLASS_ATTENTION_DEPTH)
                    .map(|l| {
                        ClassAttentionBlock::new(
                            &mut store,
                            rng,
                            &format!("class_block{l}"),
                            config.dim,
                            config.heads,
                            Some(LAYER_SCALE_INIT),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Head::ClassAttention {
                    class_token,
                    blocks,
                    head: LinearHead::new(&mut store, rng, "head.linear", config.dim)?,
                }
            }
        };
        let norm = LayerNorm::new(&mut store, rng, "norm", config.dim)?;
        Ok(Self {
            config,
            params: store,
            arch: Architecture { embed, blocks, norm, head },
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Flattened patches of an image, after checking it matches the config.
    pub fn patches(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let side = self.config.image_side;
        if image.shape() != [side, side, crate::nn::CHANNELS] {
            return Err(Error::Config(format!(
                "image of shape {:?} does not match the configured {side}×{side}×3",
                image.shape()
            )));
        }
        patchify(image, self.config.patch)
    }

    /// `z₀`: projected patches (masked rows replaced by `mask_token`) with
    /// extra tokens and positions.
    pub fn embed(&self, g: &mut Graph<T>, p: &Bound, patches: Var, mask: Option<(&[usize], Var)>) -> Result<Var> {
        let tokens = self.arch.embed.project(g, p, patches)?;
        let tokens = match mask {
            None => tokens,
            Some((masked, token)) => {
                let n = self.config.n_patches();
                let with_mask = g.concat_rows(&[tokens, token])?;
                let mut index: Vec<usize> = (0..n).collect();
                for &m in masked {
                    if m >= n {
                        return Err(Error::Contract(format!("masked index {m} out of range for {n} patches")));
                    }
                    index[m] = n;
                }
                g.gather_rows(with_mask, &index)?
            }
        };
        self.arch.embed.assemble(g, p, tokens)
    }

    /// Runs every encoder block but the last; the result is the last block's input.
    pub fn encode_to_last(&self, g: &mut Graph<T>, p: &Bound, z0: Var) -> Result<Var> {
        let mut z = z0;
        for block in &self.arch.blocks[..self.arch.blocks.len() - 1] {
            z = block.forward(g, p, z)?;
        }
        Ok(z)
    }

    /// Final encoder block and normalized token sequence (`LN(z_L)`).
    /// For CaiT this is the raw patch sequence: normalization follows the
    /// class-attention stage.
    pub fn last_block(&self, g: &mut Graph<T>, p: &Bound, a: Var) -> Result<Var> {
        let last = self.arch.blocks.last().expect("validated depth ≥ 1");
        let z = last.forward(g, p, a)?;
        match self.arch.head {
            Head::ClassAttention { .. } => Ok(z),
            _ => self.arch.norm.forward(g, p, z),
        }
    }

    /// Classification head on the output of [`Self::last_block`].
    pub fn classify(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Outputs> {
        match &self.arch.head {
            Head::Mlp(head) => {
                let y = g.slice_rows(z, 0, 1)?;
                Ok(Outputs {
                    logits: head.logits(g, p, y)?,
                    distill_logits: None,
                })
            }
            Head::Distilled { class, distill } => {
                let (rows, _) = g.value(z).dims2()?;
                let yc = g.slice_rows(z, 0, 1)?;
                let yd = g.slice_rows(z, rows - 1, 1)?;
                Ok(Outputs {
                    logits: class.logits(g, p, yc)?,
                    distill_logits: Some(distill.logits(g, p, yd)?),
                })
            }
            Head::ClassAttention { class_token, blocks, head } => {
                let mut cls = p[*class_token];
                for block in blocks {
                    cls = block.forward(g, p, cls, z)?;
                }
                let y = self.arch.norm.forward(g, p, cls)?;
                Ok(Outputs {
                    logits: head.logits(g, p, y)?,
                    distill_logits: None,
                })
            }
        }
    }

    /// Everything downstream of the final block's input.
    pub fn finish(&self, g: &mut Graph<T>, p: &Bound, a: Var) -> Result<Outputs> {
        let z = self.last_block(g, p, a)?;
        self.classify(g, p, z)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, image: &Tensor<T>) -> Result<Outputs> {
        let patches = g.constant(self.patches(image)?);
        let z0 = self.embed(g, p, patches, None)?;
        let a = self.encode_to_last(g, p, z0)?;
        self.finish(g, p, a)
    }

    /// Class probabilities of one output (DeiT: fused heads).
    pub fn probabilities(&self, g: &Graph<T>, out: &Outputs) -> Vec<f64> {
        let pc = softmax_row(g.value(out.logits).data());
        match out.distill_logits {
            None => pc,
            Some(d) => fuse_probabilities(&pc, &softmax_row(g.value(d).data())),
        }
    }

    /// Score Grad-CAM differentiates: the logit row, averaged over heads for DeiT.
    pub fn score(&self, g: &mut Graph<T>, out: &Outputs) -> Result<Var> {
        match out.distill_logits {
            None => Ok(out.logits),
            Some(d) => {
                let s = g.add(out.logits, d)?;
                Ok(g.scale(s, T::c(0.5)))
            }
        }
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, image)?;
        Ok(self.probabilities(&g, &out))
    }

    /// Training loss for one sample. DeiT needs the teacher's hard label.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &Tensor<T>,
        label: usize,
        teacher_label: Option<usize>,
    ) -> Result<Var> {
        let out = self.forward(g, p, image)?;
        self.loss_from(g, &out, label, teacher_label)
    }

    /// `CE(logits, y)`, or for DeiT `½·CE(class, y) + ½·CE(distill, y_t)`.
    pub fn loss_from(&self, g: &mut Graph<T>, out: &Outputs, label: usize, teacher_label: Option<usize>) -> Result<Var> {
        match out.distill_logits {
            None => g.cross_entropy(out.logits, &[label]),
            Some(d) => {
                let yt = teacher_label.ok_or_else(|| {
                    Error::Contract("distilled model trained without a teacher label".into())
                })?;
                let a = g.cross_entropy(out.logits, &[label])?;
                let b = g.cross_entropy(d, &[yt])?;
                let s = g.add(a, b)?;
                Ok(g.scale(s, T::c(0.5)))
            }
        }
    }
}

/// Elementwise mean of two distributions, renormalized.
pub fn fuse_probabilities(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mean: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    let total: f64 = mean.iter().sum();
    mean.into_iter().map(|v| v / total).collect()
}

/// Anything that can act as a distillation teacher.
pub trait Teacher<T: Scalar>: Sync {
    fn teacher_logits(&self, image: &Tensor<T>) -> Result<Vec<f64>>;
}

impl<T: Scalar> Teacher<T> for TransformerModel<T> {
    fn teacher_logits(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, image)?;
        let s = self.score(&mut g, &out)?;
        Ok(g.value(s).to_f64_vec())
    }
}
