//! End-to-end pipeline: frozen stub encoder with trainable adapters, U-NET
//! refinement of the deepest feature, a prompt bank, and the four-level
//! deep-to-shallow decode loop.
//!
//! Every block draws its initial weights from a stream derived from the
//! global seed and the block's own name, so a block keeps the same
//! initialization whether or not sibling blocks exist under a different
//! flag combination.

use rand_chacha::ChaCha8Rng;

use crate::blocks::{Conv2dLayer, ConvGate, LinearLayer, MafaBlock, UmfebBlock};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng;
use crate::scalar::Scalar;
use crate::spectral::PATCH;
use crate::tensor::{fmt_shape, Param, Tensor};

fn block_rng(seed: u64, prefix: &str) -> ChaCha8Rng {
    rng::seeded(rng::subseed(seed, prefix))
}

/// One layernorm-free transformer layer: single-head attention and a
/// two-layer MLP, both residual, plus an optional adapter residual.
struct EncoderLayer {
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    o: LinearLayer,
    fc1: LinearLayer,
    fc2: LinearLayer,
    adapter: Option<MafaBlock>,
    dim: usize,
}

impl EncoderLayer {
    /// Frozen weights come from `frozen_rng` (one shared stream for the
    /// whole encoder); the adapter draws from its own named stream. The
    /// sub-unity gains on the projection outputs keep the 12-deep residual
    /// stack from blowing up without normalization layers.
    fn new(prefix: &str, dim: usize, adapter: Option<MafaBlock>, frozen_rng: &mut ChaCha8Rng) -> Self {
        let layer = EncoderLayer {
            q: LinearLayer::with_gain(&format!("{prefix}.attn.q"), dim, dim, 0.3, frozen_rng),
            k: LinearLayer::with_gain(&format!("{prefix}.attn.k"), dim, dim, 0.3, frozen_rng),
            v: LinearLayer::with_gain(&format!("{prefix}.attn.v"), dim, dim, 1.0, frozen_rng),
            o: LinearLayer::with_gain(&format!("{prefix}.attn.o"), dim, dim, 0.35, frozen_rng),
            fc1: LinearLayer::with_gain(&format!("{prefix}.mlp.fc1"), dim, dim, 1.0, frozen_rng),
            fc2: LinearLayer::with_gain(&format!("{prefix}.mlp.fc2"), dim, dim, 0.35, frozen_rng),
            adapter,
            dim,
        };
        for p in layer.frozen_params() {
            p.set_trainable(false);
        }
        layer
    }

    fn frozen_params(&self) -> Vec<Param> {
        let mut ps = self.q.params();
        ps.extend(self.k.params());
        ps.extend(self.v.params());
        ps.extend(self.o.params());
        ps.extend(self.fc1.params());
        ps.extend(self.fc2.params());
        ps
    }

    fn params(&self) -> Vec<Param> {
        let mut ps = self.frozen_params();
        if let Some(a) = &self.adapter {
            ps.extend(a.params());
        }
        ps
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let scores = g.bmm_nt(&q, &k)?;
        let scores = g.scale(&scores, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax(&scores, 2)?;
        let mixed = g.bmm_nn(&attn, &v)?;
        let o = self.o.forward(g, &mixed)?;
        let x = g.add(x, &o)?;

        let h1 = self.fc1.forward(g, &x)?;
        let h1 = g.gelu(&h1);
        let h2 = self.fc2.forward(g, &h1)?;
        let x = g.add(&x, &h2)?;

        if let Some(a) = &self.adapter {
            let delta = a.forward_tokens(g, &x, h, w)?;
            g.add(&x, &delta)
        } else {
            Ok(x)
        }
    }
}

/// Patch-embedding encoder whose transformer weights are frozen at their
/// seeded initialization; only the adapters learn.
pub struct EncoderStub {
    patch_embed: Conv2dLayer,
    layers: Vec<EncoderLayer>,
    taps: Vec<usize>,
    dim: usize,
}

impl EncoderStub {
    pub fn new(cfg: &Config) -> Result<Self> {
        let mut frozen_rng = block_rng(cfg.seed, "encoder.frozen");
        let patch_embed = Conv2dLayer::new("encoder.patch_embed", 3, cfg.embed_dim, 4, 4, 0, 1, &mut frozen_rng);
        for p in patch_embed.params() {
            p.set_trainable(false);
        }
        let mut layers = Vec::new();
        for i in 0..cfg.encoder_layers {
            let prefix = format!("encoder.layers.{i}");
            let adapter = if cfg.use_mafa {
                let mut arng = block_rng(cfg.seed, &format!("{prefix}.adapter"));
                Some(MafaBlock::new(&format!("{prefix}.adapter"), cfg.embed_dim, PATCH, cfg.use_fourier_filter, &mut arng)?)
            } else {
                None
            };
            layers.push(EncoderLayer::new(&prefix, cfg.embed_dim, adapter, &mut frozen_rng));
        }
        Ok(EncoderStub { patch_embed, layers, taps: cfg.tap_indices.clone(), dim: cfg.embed_dim })
    }

    pub fn frozen_params(&self) -> Vec<Param> {
        let mut ps = self.patch_embed.params();
        for l in &self.layers {
            ps.extend(l.frozen_params());
        }
        ps
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = self.patch_embed.params();
        for l in &self.layers {
            ps.extend(l.params());
        }
        ps
    }

    /// Tapped feature maps in shallow-to-deep order, each [n, d, h/4, w/4].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let is = image.shape();
        if is.len() != 4 || is[1] != 3 {
            return Err(Error::Config(format!("encoder expects [n, 3, h, w] images, got {}", fmt_shape(is))));
        }
        if is[2] == 0 || is[2] % 32 != 0 || is[3] == 0 || is[3] % 32 != 0 {
            return Err(Error::Config(format!(
                "image dims must be positive multiples of 32, got {}x{}",
                is[2], is[3]
            )));
        }
        let (h, w) = (is[2] / 4, is[3] / 4);
        let embedded = self.patch_embed.forward(g, image)?;
        let mut x = g.map_to_tokens(&embedded)?;
        let mut taps = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, &x, h, w)?;
            if self.taps.contains(&(i + 1)) {
                taps.push(g.tokens_to_map(&x, h, w)?);
            }
        }
        Ok(taps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Small two-level encoder-decoder used to refine the deepest feature
/// before it seeds the prompt bank.
pub struct Unet {
    down1: Conv2dLayer,
    down2: Conv2dLayer,
    up1: Conv2dLayer,
    fuse1: Conv2dLayer,
    up2: Conv2dLayer,
    fuse2: Conv2dLayer,
}

impl Unet {
    pub fn new(prefix: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Unet {
            down1: Conv2dLayer::new(&format!("{prefix}.down1"), c, c, 3, 2, 1, 1, rng),
            down2: Conv2dLayer::new(&format!("{prefix}.down2"), c, c, 3, 2, 1, 1, rng),
            up1: Conv2dLayer::new(&format!("{prefix}.up1"), c, c, 3, 1, 1, 1, rng),
            fuse1: Conv2dLayer::new(&format!("{prefix}.fuse1"), 2 * c, c, 1, 1, 0, 1, rng),
            up2: Conv2dLayer::new(&format!("{prefix}.up2"), c, c, 3, 1, 1, 1, rng),
            fuse2: Conv2dLayer::new(&format!("{prefix}.fuse2"), 2 * c, c, 1, 1, 0, 1, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::shape("unet", format!("expected rank 4, got {}", fmt_shape(xs))));
        }
        let (h, w) = (xs[2], xs[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("unet needs dims divisible by 4, got {}x{}", h, w)));
        }
        let e1 = self.down1.forward(g, x)?;
        let e1 = g.gelu(&e1);
        let e2 = self.down2.forward(g, &e1)?;
        let e2 = g.gelu(&e2);

        let u1 = g.bilinear_resize(&e2, h / 2, w / 2)?;
        let u1 = self.up1.forward(g, &u1)?;
        let u1 = g.gelu(&u1);
        let cat1 = g.concat(&[&u1, &e1], 1)?;
        let m1 = self.fuse1.forward(g, &cat1)?;

        let u2 = g.bilinear_resize(&m1, h, w)?;
        let u2 = self.up2.forward(g, &u2)?;
        let u2 = g.gelu(&u2);
        let cat2 = g.concat(&[&u2, x], 1)?;
        self.fuse2.forward(g, &cat2)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = self.down1.params();
        ps.extend(self.down2.params());
        ps.extend(self.up1.params());
        ps.extend(self.fuse1.params());
        ps.extend(self.up2.params());
        ps.extend(self.fuse2.params());
        ps
    }
}

/// Plain fusion fallback used when the embedding block is ablated away:
/// a 1x1 convolution over the channel-concat, plus the feature shortcut.
pub struct ConcatFuse {
    conv: Conv2dLayer,
    c: usize,
    ctx_channels: usize,
}

impl ConcatFuse {
    pub fn new(prefix: &str, c: usize, ctx_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ConcatFuse {
            conv: Conv2dLayer::new(&format!("{prefix}.conv"), c + ctx_channels, c, 1, 1, 0, 1, rng),
            c,
            ctx_channels,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, f1: &Tensor<T>, ctx: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if ctx.is_empty() {
            return Err(Error::Usage("fusion requires at least one context feature".to_string()));
        }
        let fs = f1.shape();
        if fs.len() != 4 || fs[1] != self.c {
            return Err(Error::shape(
                "concat_fuse",
                format!("expected feature [n, {}, h, w], got {}", self.c, fmt_shape(fs)),
            ));
        }
        let total: usize = ctx.iter().map(|t| t.shape()[1]).sum();
        if total != self.ctx_channels {
            return Err(Error::shape(
                "concat_fuse",
                format!("context channels sum to {}, block built for {}", total, self.ctx_channels),
            ));
        }
        let (n, h, w) = (fs[0], fs[2], fs[3]);
        let mut parts: Vec<Tensor<T>> = vec![f1.clone()];
        for t in ctx {
            if t.shape()[0] != n {
                return Err(Error::shape(
                    "concat_fuse",
                    format!("context batch {} does not match feature batch {}", t.shape()[0], n),
                ));
            }
            parts.push(g.bilinear_resize(t, h, w)?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let cat = g.concat(&refs, 1)?;
        let mixed = self.conv.forward(g, &cat)?;
        g.add(&mixed, f1)
    }

    pub fn params(&self) -> Vec<Param> {
        self.conv.params()
    }
}

/// Either the full embedding block or the concat fallback, chosen by flag.
pub enum Fuse {
    Umfeb(UmfebBlock),
    Concat(ConcatFuse),
}

impl Fuse {
    pub fn new(prefix: &str, c: usize, ctx_channels: usize, use_umfeb: bool, seed: u64) -> Result<Self> {
        let mut rng = block_rng(seed, prefix);
        if use_umfeb {
            Ok(Fuse::Umfeb(UmfebBlock::new(prefix, c, ctx_channels, &mut rng)?))
        } else {
            Ok(Fuse::Concat(ConcatFuse::new(prefix, c, ctx_channels, &mut rng)))
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, f1: &Tensor<T>, ctx: &[&Tensor<T>]) -> Result<Tensor<T>> {
        match self {
            Fuse::Umfeb(b) => b.forward(g, f1, ctx),
            Fuse::Concat(b) => b.forward(g, f1, ctx),
        }
    }

    pub fn params(&self) -> Vec<Param> {
        match self {
            Fuse::Umfeb(b) => b.params(),
            Fuse::Concat(b) => b.params(),
        }
    }
}

/// One decode stage: optional bank fusion, gated refinement, and the two
/// output heads. The shallowest level has no prompt head; its prompt would
/// be discarded anyway.
struct DecoderLevel {
    fuse: Option<Fuse>,
    gate: ConvGate,
    saliency_head: Conv2dLayer,
    prompt_head: Option<Conv2dLayer>,
}

/// Everything a forward pass produces: saliency logits per level in
/// production order (deepest first), the prompts emitted by the three
/// deepest levels, and the bank occupancy after the pass.
pub struct ForwardOutput<T: Scalar = f32> {
    pub logits: Vec<Tensor<T>>,
    pub prompts: Vec<Tensor<T>>,
    pub bank_len: usize,
}

/// The full model. Construction wires blocks according to the config's
/// ablation flags; the parameter set therefore depends on the flags.
pub struct SplfModel {
    pub cfg: Config,
    encoder: EncoderStub,
    unet: Option<Unet>,
    levels: Vec<DecoderLevel>,
    bank_fuse: Vec<Fuse>,
    feat_fuse: Vec<Fuse>,
}

impl SplfModel {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let cap = cfg.bank_capacity;
        let encoder = EncoderStub::new(cfg)?;
        let unet = if cfg.use_prompts {
            let mut rng = block_rng(cfg.seed, "unet");
            Some(Unet::new("unet", c, &mut rng))
        } else {
            None
        };

        let mut levels = Vec::new();
        for i in (1..=4).rev() {
            let prefix = format!("decoder.levels.{i}");
            let fuse = if cfg.use_prompts {
                let bank_len = cap.min(5 - i);
                Some(Fuse::new(&format!("{prefix}.fuse"), c, bank_len * c, cfg.use_umfeb, cfg.seed)?)
            } else {
                None
            };
            let mut rng = block_rng(cfg.seed, &prefix);
            let gate = ConvGate::new(&format!("{prefix}.gate"), c, &mut rng);
            let saliency_head = Conv2dLayer::new(&format!("{prefix}.saliency_head"), c, 1, 1, 1, 0, 1, &mut rng);
            let prompt_head = (i > 1)
                .then(|| Conv2dLayer::new(&format!("{prefix}.prompt_head"), c, c, 1, 1, 0, 1, &mut rng));
            levels.push(DecoderLevel { fuse, gate, saliency_head, prompt_head });
        }

        let mut bank_fuse = Vec::new();
        if cfg.use_prompts {
            for i in (2..=4).rev() {
                let bank_len = cap.min(5 - i);
                bank_fuse.push(Fuse::new(&format!("decoder.bank_fuse.{i}"), c, bank_len * c, cfg.use_umfeb, cfg.seed)?);
            }
        }

        let mut feat_fuse = Vec::new();
        for i in (1..=3).rev() {
            feat_fuse.push(Fuse::new(&format!("decoder.feat_fuse.{i}"), c, c, cfg.use_umfeb, cfg.seed)?);
        }

        Ok(SplfModel { cfg: cfg.clone(), encoder, unet, levels, bank_fuse, feat_fuse })
    }

    /// All parameters in a stable order (the checkpoint order).
    pub fn params(&self) -> Vec<Param> {
        let mut ps = self.encoder.params();
        if let Some(u) = &self.unet {
            ps.extend(u.params());
        }
        for level in &self.levels {
            if let Some(f) = &level.fuse {
                ps.extend(f.params());
            }
            ps.extend(level.gate.params());
            ps.extend(level.saliency_head.params());
            if let Some(p) = &level.prompt_head {
                ps.extend(p.params());
            }
        }
        for f in &self.bank_fuse {
            ps.extend(f.params());
        }
        for f in &self.feat_fuse {
            ps.extend(f.params());
        }
        ps
    }

    pub fn trainable_params(&self) -> Vec<Param> {
        self.params().into_iter().filter(|p| p.trainable()).collect()
    }

    /// Frozen-encoder toggle for the full-fine-tune ablation row.
    pub fn set_encoder_trainable(&self, on: bool) {
        for p in self.encoder.frozen_params() {
            p.set_trainable(on);
        }
    }

    pub fn encoder_frozen_params(&self) -> Vec<Param> {
        self.encoder.frozen_params()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let is = image.shape();
        if is.len() != 4 {
            return Err(Error::Config(format!("expected [n, 3, h, w] image batch, got {}", fmt_shape(is))));
        }
        let (img_h, img_w) = (is[2], is[3]);
        let taps = self.encoder.forward(g, image)?;
        debug_assert_eq!(taps.len(), 4);

        let mut bank: Vec<Tensor<T>> = Vec::new();
        if let Some(unet) = &self.unet {
            bank.push(unet.forward(g, &taps[3])?);
        }

        let mut feature = taps[3].clone();
        let mut logits = Vec::new();
        let mut prompts = Vec::new();
        for (idx, i) in (1..=4).rev().enumerate() {
            let level = &self.levels[idx];
            let fused = match &level.fuse {
                Some(fuse) => {
                    let ctx: Vec<&Tensor<T>> = bank.iter().collect();
                    fuse.forward(g, &feature, &ctx)?
                }
                None => feature.clone(),
            };
            let gated = level.gate.forward(g, &fused)?;
            let sal = level.saliency_head.forward(g, &gated)?;
            logits.push(g.bilinear_resize(&sal, img_h, img_w)?);

            if let Some(head) = &level.prompt_head {
                let prompt = head.forward(g, &gated)?;
                if self.cfg.use_prompts {
                    let ctx: Vec<&Tensor<T>> = bank.iter().collect();
                    let merged = self.bank_fuse[idx].forward(g, &prompt, &ctx)?;
                    bank.push(merged);
                    if bank.len() > self.cfg.bank_capacity {
                        bank.remove(0);
                    }
                }
                prompts.push(prompt);
            }

            if i > 1 {
                feature = self.feat_fuse[idx].forward(g, &taps[i - 2], &[&feature])?;
            }
        }

        Ok(ForwardOutput { logits, prompts, bank_len: bank.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> Config {
        // full default wiring at the default toy scale
        Config::default()
    }

    #[test]
    fn forward_structural_contract() {
        let cfg = tiny_cfg();
        let model = SplfModel::new(&cfg).unwrap();
        let mut g = Graph::<f32>::inference();
        let img = Tensor::full(&[1, 3, 64, 64], 0.5);
        let out = model.forward(&mut g, &img).unwrap();
        assert_eq!(out.logits.len(), 4);
        assert_eq!(out.prompts.len(), 3);
        assert_eq!(out.bank_len, 4.min(cfg.bank_capacity));
        for l in &out.logits {
            assert_eq!(l.shape(), &[1, 1, 64, 64]);
        }
    }

    #[test]
    fn indivisible_image_rejected() {
        let model = SplfModel::new(&tiny_cfg()).unwrap();
        let mut g = Graph::<f32>::inference();
        let img = Tensor::zeros(&[1, 3, 48, 48]);
        assert!(matches!(model.forward(&mut g, &img), Err(Error::Config(_))));
    }

    #[test]
    fn unet_zero_input_zero_output_at_init() {
        let mut rng = block_rng(9, "unet-test");
        let unet = Unet::new("u", 8, &mut rng);
        let mut g = Graph::<f32>::inference();
        let x = Tensor::zeros(&[1, 8, 16, 16]);
        let y = unet.forward(&mut g, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_set_excludes_exactly_the_adapters() {
        let cfg = tiny_cfg();
        let model = SplfModel::new(&cfg).unwrap();
        for p in model.params() {
            let in_encoder = p.name().starts_with("encoder.");
            let is_adapter = p.name().contains(".adapter.");
            assert_eq!(
                p.trainable(),
                !in_encoder || is_adapter,
                "unexpected trainability for {}",
                p.name()
            );
        }
    }
}
