//! Masked image modeling: a vector-quantized patch tokenizer, mask plans and
//! the masked-token prediction objective.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::config::Variant;
use super::transformer::{Head, TransformerModel};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{scale_gradients, summed_gradients, AdamW, AdamWConfig};

pub const MASK_RATIO: f64 = 0.4;
pub const COMMITMENT_BETA: f64 = 0.25;
pub const CODE_DIM: usize = 16;

/// Patch tokenizer. The encoder is a projection with orthonormal columns
/// `W` around a learned center `μ`; the decoder is tied to it,
/// `dec(c) = c·Wᵀ + μ`, so `enc(dec(c)) = c`.
#[derive(Clone, Debug)]
pub struct VqTokenizer<T: Scalar> {
    pub params: ParamStore<T>,
    pub encoder: ParamId,
    pub center: ParamId,
    pub codebook: ParamId,
    pub beta: f64,
    trained: bool,
}

/// Loss of one tokenizer step, split into its terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl<T: Scalar> VqTokenizer<T> {
    pub fn new(patch_width: usize, vocab: usize, code_dim: usize, rng: &mut Rng) -> Result<Self> {
        if vocab == 0 || code_dim == 0 || code_dim > patch_width {
            return Err(Error::Config(format!(
                "tokenizer needs vocab ≥ 1 and 1 ≤ code_dim ≤ {patch_width}, got {vocab}, {code_dim}"
            )));
        }
        let mut params = ParamStore::new();
        let encoder = params.init("vq.encoder", &[patch_width, code_dim], Init::Normal(1.0), rng)?;
        let center = params.init("vq.center", &[patch_width], Init::Zeros, rng)?;
        let codebook = params.init("vq.codebook", &[vocab, code_dim], Init::Normal(0.1), rng)?;
        let mut vq = Self {
            params,
            encoder,
            center,
            codebook,
            beta: COMMITMENT_BETA,
            trained: false,
        };
        vq.orthonormalize();
        Ok(vq)
    }

    pub fn vocab(&self) -> usize {
        self.params.get(self.codebook).shape()[0]
    }

    pub fn code_dim(&self) -> usize {
        self.params.get(self.codebook).shape()[1]
    }

    pub fn patch_width(&self) -> usize {
        self.params.get(self.encoder).shape()[0]
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Modified Gram-Schmidt on the encoder columns.
    fn orthonormalize(&mut self) {
        let w = self.params.get_mut(self.encoder);
        let (p, d) = w.dims2().expect("matrix");
        let data = w.data_mut();
        for j in 0..d {
            for k in 0..j {
                let dot = (0..p).fold(T::zero(), |s, i| s + data[i * d + j] * data[i * d + k]);
                for i in 0..p {
                    data[i * d + j] = data[i * d + j] - dot * data[i * d + k];
                }
            }
            let norm = (0..p).fold(T::zero(), |s, i| s + data[i * d + j] * data[i * d + j]).sqrt();
            for i in 0..p {
                data[i * d + j] = data[i * d + j] / norm;
            }
        }
    }

    fn check_width(&self, patches: &Tensor<T>) -> Result<usize> {
        let (n, w) = patches.dims2()?;
        if w != self.patch_width() {
            return Err(Error::Dimension(format!(
                "patch width {w} does not match tokenizer width {}",
                self.patch_width()
            )));
        }
        Ok(n)
    }

    /// `(x − μ)·W`, one code-space row per patch.
    pub fn encode(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(patches)?;
        let mu = self.params.get(self.center).data();
        let centered = Tensor::new(
            patches.shape().to_vec(),
            patches
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v - mu[i % mu.len()])
                .collect(),
        )?;
        centered.matmul(self.params.get(self.encoder))
    }

    /// `c·Wᵀ + μ`.
    pub fn decode(&self, codes: &Tensor<T>) -> Result<Tensor<T>> {
        let wt = self.params.get(self.encoder).transpose()?;
        let mut out = codes.matmul(&wt)?;
        let mu = self.params.get(self.center).data();
        let n = mu.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + mu[i % n];
        }
        Ok(out)
    }

    /// Code vectors `e_k` of the given indices, decoded to patch space.
    pub fn decode_indices(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let book = self.params.get(self.codebook);
        let d = self.code_dim();
        let mut rows = Vec::with_capacity(indices.len() * d);
        for &k in indices {
            if k >= self.vocab() {
                return Err(Error::Contract(format!("code index {k} out of range for vocab {}", self.vocab())));
            }
            rows.extend_from_slice(book.row(k));
        }
        self.decode(&Tensor::new([indices.len(), d], rows)?)
    }

    /// Nearest code (Euclidean, lowest index on ties) of each code-space row.
    pub fn nearest(&self, z: &Tensor<T>) -> Result<Vec<usize>> {
        let (n, d) = z.dims2()?;
        let book = self.params.get(self.codebook);
        Ok((0..n)
            .map(|i| {
                let row = &z.data()[i * d..(i + 1) * d];
                let mut best = (0, T::infinity());
                for k in 0..self.vocab() {
                    let dist = row
                        .iter()
                        .zip(book.row(k))
                        .fold(T::zero(), |s, (&a, &b)| s + (a - b) * (a - b));
                    if dist < best.1 {
                        best = (k, dist);
                    }
                }
                best.0
            })
            .collect())
    }

    /// Visual token per patch row.
    pub fn tokenize(&self, patches: &Tensor<T>) -> Result<Vec<usize>> {
        if !self.trained {
            return Err(Error::State("tokenizer has not been trained".into()));
        }
        self.nearest(&self.encode(patches)?)
    }

    /// Reconstruction loss graph:
    /// `mse(dec(z_q), x) + ‖sg(z_e) − z_q‖² + β·‖z_e − sg(z_q)‖²`, each term a
    /// mean over elements, with a straight-through gradient from `z_q` to `z_e`.
    pub fn loss_graph(&self, g: &mut Graph<T>, p: &Bound, patches: &Tensor<T>) -> Result<(Var, [Var; 3])> {
        self.check_width(patches)?;
        let x = g.constant(patches.clone());
        let neg_mu = g.scale(p[self.center], -T::one());
        let xc = g.add_row(x, neg_mu)?;
        let ze = g.matmul(xc, p[self.encoder])?;
        let idx = self.nearest(g.value(ze))?;
        let zq = g.gather_rows(p[self.codebook], &idx)?;
        let ze_sg = g.detach(ze);
        let zq_sg = g.detach(zq);
        let jump = g.sub(zq_sg, ze_sg)?;
        let st = g.add(ze, jump)?;
        let dec = g.matmul_nt(st, p[self.encoder])?;
        let dec = g.add_row(dec, p[self.center])?;
        let err = g.sub(dec, x)?;
        let sq = g.mul(err, err)?;
        let recon = g.mean(sq)?;
        let cb = g.sub(zq, ze_sg)?;
        let cb = g.mul(cb, cb)?;
        let cb = g.mean(cb)?;
        let cm = g.sub(ze, zq_sg)?;
        let cm = g.mul(cm, cm)?;
        let cm = g.mean(cm)?;
        let cm_scaled = g.scale(cm, T::c(self.beta));
        let total = g.add(recon, cb)?;
        let total = g.add(total, cm_scaled)?;
        Ok((total, [recon, cb, cm]))
    }

    pub fn loss(&self, patches: &Tensor<T>) -> Result<VqLoss> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (total, [r, c, m]) = self.loss_graph(&mut g, &p, patches)?;
        let v = |x: Var| g.value(x).data()[0].as_f64();
        Ok(VqLoss {
            total: v(total),
            reconstruction: v(r),
            codebook: v(c),
            commitment: v(m),
        })
    }

    /// One optimizer step on a batch of patches; returns the pre-step loss.
    pub fn train_step(&mut self, opt: &mut AdamW<T>, patches: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let (total, _) = self.loss_graph(&mut g, &p, patches)?;
        let loss = g.value(total).data()[0].as_f64();
        g.backward(total)?;
        let grads: Vec<_> = p
            .grads(&g)
            .into_iter()
            .zip(self.params.ids())
            .map(|(gr, id)| gr.or_else(|| Some(Tensor::zeros(self.params.get(id).shape().to_vec()))))
            .collect();
        drop(g);
        opt.step(&mut self.params, &grads)?;
        self.orthonormalize();
        Ok(loss)
    }

    /// Fits the tokenizer on a pool of patch rows: center at the mean patch,
    /// seed the codebook from encoded pool rows, then `steps` full-batch steps.
    pub fn fit(&mut self, pool: &Tensor<T>, steps: usize, lr: f64, rng: &mut Rng) -> Result<Vec<f64>> {
        let n = self.check_width(pool)?;
        if n == 0 {
            return Err(Error::Config("tokenizer pool is empty".into()));
        }
        let width = self.patch_width();
        let mut mean = vec![0.0f64; width];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(pool.row(i)) {
                *m += v.as_f64() / n as f64;
            }
        }
        self.params.set(self.center, Tensor::from_f64([width], &mean)?)?;
        let z = self.encode(pool)?;
        let picks: Vec<usize> = (0..self.vocab()).map(|_| rng.gen_range(0..n)).collect();
        let d = self.code_dim();
        let mut book = Vec::with_capacity(self.vocab() * d);
        for &i in &picks {
            book.extend_from_slice(z.row(i));
        }
        self.params.set(self.codebook, Tensor::new([self.vocab(), d], book)?)?;
        let mut opt = AdamW::for_all(&self.params, AdamWConfig { lr, weight_decay: 0.0, ..Default::default() });
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            history.push(self.train_step(&mut opt, pool)?);
        }
        self.trained = true;
        Ok(history)
    }
}

/// Masked patch positions for one pre-training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    n_patches: usize,
    indices: Vec<usize>,
}

impl MaskPlan {
    pub fn new(n_patches: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_patches) {
            return Err(Error::Contract(format!("mask index {bad} out of range for {n_patches} patches")));
        }
        Ok(Self { n_patches, indices })
    }

    /// `round(ratio·n)` positions chosen uniformly.
    pub fn random(n_patches: usize, ratio: f64, rng: &mut Rng) -> Self {
        let count = ((ratio * n_patches as f64).round() as usize).min(n_patches);
        let mut indices = sample(rng, n_patches, count).into_vec();
        indices.sort_unstable();
        Self { n_patches, indices }
    }

    pub fn all(n_patches: usize) -> Self {
        Self {
            n_patches,
            indices: (0..n_patches).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Pre-training-only parameters: the mask embedding `e_[M]` and the
/// token-prediction layer `(W_M, b_M)`. Discarded at fine-tuning.
#[derive(Clone, Debug)]
pub struct MimHead<T: Scalar> {
    pub params: ParamStore<T>,
    pub mask_token: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl<T: Scalar> MimHead<T> {
    /// Prediction layer starts at zero, i.e. uniform over the vocabulary.
    pub fn new(dim: usize, vocab: usize, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamStore::new();
        let mask_token = params.init("mim.mask_token", &[1, dim], Init::Normal(0.02), rng)?;
        let weight = params.init("mim.weight", &[dim, vocab], Init::Zeros, rng)?;
        let bias = params.init("mim.bias", &[vocab], Init::Zeros, rng)?;
        Ok(Self {
            params,
            mask_token,
            weight,
            bias,
        })
    }
}

fn check_mim_backbone<T: Scalar>(model: &TransformerModel<T>) -> Result<()> {
    match (&model.arch.head, model.arch.embed.layout().class_token) {
        (Head::Mlp(_), true) => Ok(()),
        _ => Err(Error::Config(format!(
            "masked-token pre-training needs a ViT-style backbone, got {}",
            model.variant()
        ))),
    }
}

/// Mean negative log-likelihood of the visual tokens at the masked positions.
/// `tokens` holds one target per patch; unmasked targets are ignored.
#[allow(clippy::too_many_arguments)]
pub fn mim_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &TransformerModel<T>,
    pm: &Bound,
    head: &MimHead<T>,
    ph: &Bound,
    patches: &Tensor<T>,
    plan: &MaskPlan,
    tokens: &[usize],
) -> Result<Var> {
    check_mim_backbone(model)?;
    if plan.is_empty() {
        return Err(Error::Contract("mask plan is empty; the masked-token loss is undefined".into()));
    }
    let n = model.config.n_patches();
    if plan.n_patches() != n || tokens.len() != n {
        return Err(Error::Contract(format!(
            "mask plan over {} patches and {} targets for a {n}-patch model",
            plan.n_patches(),
            tokens.len()
        )));
    }
    let x = g.constant(patches.clone());
    let z0 = model.embed(g, pm, x, Some((plan.indices(), ph[head.mask_token])))?;
    let a = model.encode_to_last(g, pm, z0)?;
    let z = model.last_block(g, pm, a)?;
    let offset = model.arch.embed.layout().patch_rows(n).start;
    let rows: Vec<usize> = plan.indices().iter().map(|&i| i + offset).collect();
    let h = g.gather_rows(z, &rows)?;
    let logits = g.matmul(h, ph[head.weight])?;
    let logits = g.add_row(logits, ph[head.bias])?;
    let targets: Vec<usize> = plan.indices().iter().map(|&i| tokens[i]).collect();
    g.cross_entropy(logits, &targets)
}

/// Masked-token pre-training of `model`'s backbone against a trained tokenizer.
/// Each epoch visits every image once in shuffled mini-batches with fresh
/// masks. Returns the mean loss per epoch.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_mim<T: Scalar>(
    model: &mut TransformerModel<T>,
    head: &mut MimHead<T>,
    tokenizer: &VqTokenizer<T>,
    images: &[Tensor<T>],
    epochs: usize,
    batch_size: usize,
    optim: AdamWConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_mim_backbone(model)?;
    if images.is_empty() || batch_size == 0 {
        return Err(Error::Config("pre-training needs images and a positive batch size".into()));
    }
    let patches: Vec<Tensor<T>> = images.iter().map(|im| model.patches(im)).collect::<Result<_>>()?;
    let tokens: Vec<Vec<usize>> = patches.iter().map(|p| tokenizer.tokenize(p)).collect::<Result<_>>()?;
    let backbone: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, name, _)| !name.starts_with("head."))
        .map(|(id, _, _)| id)
        .collect();
    let mut opt_model = AdamW::new(&model.params, backbone, optim);
    let mut opt_head = AdamW::for_all(&head.params, optim);
    let n = model.config.n_patches();
    let n_model = model.params.ids().count();
    let n_head = head.params.ids().count();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let items: Vec<(usize, MaskPlan)> = batch
                .iter()
                .map(|&i| (i, MaskPlan::random(n, MASK_RATIO, rng)))
                .collect();
            let m: &TransformerModel<T> = model;
            let hd: &MimHead<T> = head;
            let (loss, mut grads) = summed_gradients(n_model + n_head, &items, |(i, plan)| {
                let mut g = Graph::new();
                let pm = m.params.bind(&mut g, true);
                let ph = hd.params.bind(&mut g, true);
                let l = mim_loss(&mut g, m, &pm, hd, &ph, &patches[*i], plan, &tokens[*i])?;
                let value = g.value(l).data()[0].as_f64();
                g.backward(l)?;
                let mut grads = pm.grads(&g);
                grads.extend(ph.grads(&g));
                Ok((value, grads))
            })?;
            scale_gradients(&mut grads, 1.0 / batch.len() as f64);
            let head_grads = grads.split_off(n_model);
            opt_model.step(&mut model.params, &grads)?;
            opt_head.step(&mut head.params, &head_grads)?;
            epoch_loss += loss;
        }
        history.push(epoch_loss / images.len() as f64);
    }
    Ok(history)
}

/// Copies every backbone tensor (everything outside the classifier head)
/// from `source` into `target` by name.
pub fn transfer_backbone<T: Scalar>(source: &TransformerModel<T>, target: &mut TransformerModel<T>) -> Result<()> {
    if source.variant() != Variant::Beit && source.variant() != Variant::Vit {
        return Err(Error::Config(format!("cannot transfer a {} backbone", source.variant())));
    }
    for (_, name, value) in source.params.iter() {
        if name.starts_with("head.") {
            continue;
        }
        let tid = target
            .params
            .id(name)
            .ok_or_else(|| Error::Incompatible(format!("target has no parameter {name}")))?;
        target.params.set(tid, value.clone())?;
    }
    Ok(())
}
