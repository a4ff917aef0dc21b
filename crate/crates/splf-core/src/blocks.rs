//! Network building blocks: thin conv/linear layer wrappers and the four
//! composite blocks of the architecture (multi-scale filtering adapter,
//! multi-scale fusion block, channel attention, unified feature embedding,
//! and the decoder's convolutional gate).
//!
//! Weights are Kaiming-uniform from the caller's seeded generator; all
//! biases start at zero so zero input propagates to zero output through
//! purely convolutional paths.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::spectral::{spectral_branch, FrequencyKernel};
use crate::tensor::{fmt_shape, Init, Param, Tensor};

/// conv2d with owned weight/bias parameters.
pub struct Conv2dLayer {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dLayer {
    pub fn new(
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv2dLayer {
            w: Param::new(format!("{prefix}.weight"), &[cout, cin / groups, k, k], Init::Kaiming { gain: 1.0 }, rng),
            b: Some(Param::zeros(format!("{prefix}.bias"), &[cout])),
            stride,
            pad,
            groups,
        }
    }

    /// Like `new` but without a bias term, for projections whose output
    /// feeds a shift-invariant consumer (a per-channel bias on attention
    /// keys cancels inside the softmax, so the parameter would never
    /// receive gradient).
    pub fn without_bias(
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv2dLayer {
            w: Param::new(format!("{prefix}.weight"), &[cout, cin / groups, k, k], Init::Kaiming { gain: 1.0 }, rng),
            b: None,
            stride,
            pad,
            groups,
        }
    }

    /// Weights and bias all zero, so the layer output is exactly zero until
    /// the first optimizer step.
    pub fn zeroed(prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2dLayer {
            w: Param::zeros(format!("{prefix}.weight"), &[cout, cin, k, k]),
            b: Some(Param::zeros(format!("{prefix}.bias"), &[cout])),
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = g.param(&self.w);
        let b = self.b.as_ref().map(|b| g.param(b));
        g.conv2d(x, &w, b.as_ref(), self.stride, self.pad, self.groups)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = vec![self.w.clone()];
        if let Some(b) = &self.b {
            ps.push(b.clone());
        }
        ps
    }
}

/// Fully connected layer over the last dimension.
pub struct LinearLayer {
    pub w: Param,
    pub b: Param,
}

impl LinearLayer {
    pub fn new(prefix: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_gain(prefix, din, dout, 1.0, rng)
    }

    /// Kaiming-uniform weights scaled by `gain`; used to keep deep frozen
    /// residual stacks well-conditioned.
    pub fn with_gain(prefix: &str, din: usize, dout: usize, gain: f32, rng: &mut ChaCha8Rng) -> Self {
        LinearLayer {
            w: Param::new(format!("{prefix}.weight"), &[dout, din], Init::Kaiming { gain }, rng),
            b: Param::zeros(format!("{prefix}.bias"), &[dout]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        g.linear(x, &w, Some(&b))
    }

    pub fn params(&self) -> Vec<Param> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// Multi-scale filtering adapter: bottleneck projection, three parallel
/// convolution branches at kernel sizes 1/3/5 with optional per-branch
/// frequency filtering, and a zero-initialized fusing projection. Returns a
/// residual delta, which is exactly zero at initialization.
pub struct MafaBlock {
    in_proj: LinearLayer,
    branches: Vec<(Conv2dLayer, Option<FrequencyKernel>)>,
    out_proj: Conv2dLayer,
    dim: usize,
}

pub const MAFA_KERNELS: [usize; 3] = [1, 3, 5];

impl MafaBlock {
    pub fn new(prefix: &str, dim: usize, patch: usize, use_filter: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::Config(format!("adapter dim must be even, got {dim}")));
        }
        let half = dim / 2;
        let in_proj = LinearLayer::new(&format!("{prefix}.in_proj"), dim, half, rng);
        let mut branches = Vec::new();
        for k in MAFA_KERNELS {
            let conv = Conv2dLayer::new(&format!("{prefix}.branches.{k}.conv"), half, half, k, 1, k / 2, 1, rng);
            let filter = use_filter
                .then(|| FrequencyKernel::identity(&format!("{prefix}.branches.{k}.filter"), half, patch));
            branches.push((conv, filter));
        }
        let out_proj = Conv2dLayer::zeroed(&format!("{prefix}.out_proj"), 3 * half, dim, 1, 1, 0);
        Ok(MafaBlock { in_proj, branches, out_proj, dim })
    }

    /// Token-form input [n, h*w, d]; the returned delta has the same shape.
    pub fn forward_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: &Tensor<T>,
        h: usize,
        w: usize,
    ) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 3 || xs[2] != self.dim || xs[1] != h * w {
            return Err(Error::shape(
                "mafa",
                format!("expected [n, {}, {}], got {}", h * w, self.dim, fmt_shape(xs)),
            ));
        }
        let proj = self.in_proj.forward(g, x)?;
        let proj = g.gelu(&proj);
        let map = g.tokens_to_map(&proj, h, w)?;
        let delta_map = self.forward_inner(g, &map)?;
        g.map_to_tokens(&delta_map)
    }

    /// Map-form input [n, d, h, w]; the returned delta has the same shape.
    pub fn forward_map<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.dim {
            return Err(Error::shape(
                "mafa",
                format!("expected [n, {}, h, w], got {}", self.dim, fmt_shape(xs)),
            ));
        }
        let tokens = g.map_to_tokens(x)?;
        let proj = self.in_proj.forward(g, &tokens)?;
        let proj = g.gelu(&proj);
        let map = g.tokens_to_map(&proj, xs[2], xs[3])?;
        self.forward_inner(g, &map)
    }

    fn forward_inner<T: Scalar>(&self, g: &mut Graph<T>, map: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (map.shape()[2], map.shape()[3]);
        if let Some((_, Some(f))) = self.branches.first().map(|b| (&b.0, b.1.as_ref())) {
            if h % f.patch != 0 || w % f.patch != 0 {
                return Err(Error::Config(format!(
                    "adapter grid {}x{} not divisible by filter patch {}",
                    h, w, f.patch
                )));
            }
        }
        let mut outs = Vec::new();
        for (conv, filter) in &self.branches {
            let c = conv.forward(g, map)?;
            let mut c = g.gelu(&c);
            if let Some(f) = filter {
                c = spectral_branch(g, &c, f)?;
            }
            outs.push(c);
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        let cat = g.concat(&refs, 1)?;
        self.out_proj.forward(g, &cat)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = self.in_proj.params();
        for (conv, filter) in &self.branches {
            ps.extend(conv.params());
            if let Some(f) = filter {
                ps.extend(f.params());
            }
        }
        ps.extend(self.out_proj.params());
        ps
    }
}

/// Multi-scale fusion block: 1x1 channel adapter, four parallel depthwise
/// convolutions (k = 1,3,5,7), 1x1 fuse, residual shortcut. The shortcut is
/// the input when channel counts already match, otherwise the 1x1 adapter's
/// output.
pub struct MfbBlock {
    pre: Conv2dLayer,
    dw: Vec<Conv2dLayer>,
    fuse: Conv2dLayer,
    cin: usize,
    c: usize,
}

pub const MFB_KERNELS: [usize; 4] = [1, 3, 5, 7];

impl MfbBlock {
    pub fn new(prefix: &str, cin: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let pre = Conv2dLayer::new(&format!("{prefix}.pre"), cin, c, 1, 1, 0, 1, rng);
        let dw = MFB_KERNELS
            .iter()
            .map(|&k| Conv2dLayer::new(&format!("{prefix}.dw.{k}"), c, c, k, 1, k / 2, c, rng))
            .collect();
        let fuse = Conv2dLayer::new(&format!("{prefix}.fuse"), 4 * c, c, 1, 1, 0, 1, rng);
        MfbBlock { pre, dw, fuse, cin, c }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.cin {
            return Err(Error::shape(
                "mfb",
                format!("expected [n, {}, h, w], got {}", self.cin, fmt_shape(xs)),
            ));
        }
        if xs[2] < 7 || xs[3] < 7 {
            return Err(Error::Config(format!(
                "mfb needs spatial dims of at least 7 for its largest kernel, got {}x{}",
                xs[2], xs[3]
            )));
        }
        let p = self.pre.forward(g, x)?;
        let mut outs = Vec::new();
        for conv in &self.dw {
            outs.push(conv.forward(g, &p)?);
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        let cat = g.concat(&refs, 1)?;
        let fused = self.fuse.forward(g, &cat)?;
        let shortcut = if self.cin == self.c { x } else { &p };
        g.add(&fused, shortcut)
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = self.pre.params();
        for conv in &self.dw {
            ps.extend(conv.params());
        }
        ps.extend(self.fuse.params());
        ps
    }
}

/// Squeeze-excitation channel attention with reduction 4: global average
/// pool, two-layer bottleneck, sigmoid gate applied per channel.
pub struct ChannelAttention {
    fc1: LinearLayer,
    fc2: LinearLayer,
    pub c: usize,
}

pub const CA_REDUCTION: usize = 4;

impl ChannelAttention {
    pub fn new(prefix: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if c < CA_REDUCTION {
            return Err(Error::Config(format!(
                "channel attention needs at least {CA_REDUCTION} channels, got {c}"
            )));
        }
        let hidden = c / CA_REDUCTION;
        Ok(ChannelAttention {
            fc1: LinearLayer::new(&format!("{prefix}.fc1"), c, hidden, rng),
            fc2: LinearLayer::new(&format!("{prefix}.fc2"), hidden, c, rng),
            c,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.c {
            return Err(Error::shape(
                "channel_attention",
                format!("expected [n, {}, h, w], got {}", self.c, fmt_shape(xs)),
            ));
        }
        let n = xs[0];
        let pooled = g.global_avg_pool(x)?;
        let flat = g.reshape(&pooled, &[n, self.c])?;
        let h1 = self.fc1.forward(g, &flat)?;
        let h1 = g.relu(&h1);
        let h2 = self.fc2.forward(g, &h1)?;
        let gate = g.sigmoid(&h2);
        let gate = g.reshape(&gate, &[n, self.c, 1, 1])?;
        g.mul_channel(x, &gate)
    }

    /// The second bottleneck layer; exposed so tests can force the gate.
    pub fn gate_bias(&self) -> &Param {
        &self.fc2.b
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = self.fc1.params();
        ps.extend(self.fc2.params());
        ps
    }
}

/// Unified multi-scale feature embedding: refines the incoming feature and
/// the fused context separately, attends from the feature (query/value) to
/// the context (key), and gates the attended map with a sigmoid spatial mask
/// before the residual add.
pub struct UmfebBlock {
    mfb_new: MfbBlock,
    mfb_ctx: MfbBlock,
    chan_attn: ChannelAttention,
    q_proj: Conv2dLayer,
    k_proj: Conv2dLayer,
    v_proj: Conv2dLayer,
    attn_map_conv: Conv2dLayer,
    c: usize,
    ctx_channels: usize,
}

impl UmfebBlock {
    /// `ctx_channels` is the channel total of the concatenated context.
    pub fn new(prefix: &str, c: usize, ctx_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(UmfebBlock {
            mfb_new: MfbBlock::new(&format!("{prefix}.mfb_new"), c, c, rng),
            mfb_ctx: MfbBlock::new(&format!("{prefix}.mfb_ctx"), ctx_channels, c, rng),
            chan_attn: ChannelAttention::new(&format!("{prefix}.chan_attn"), c, rng)?,
            q_proj: Conv2dLayer::new(&format!("{prefix}.q_proj"), c, c, 1, 1, 0, 1, rng),
            k_proj: Conv2dLayer::without_bias(&format!("{prefix}.k_proj"), c, c, 1, 1, 0, 1, rng),
            v_proj: Conv2dLayer::new(&format!("{prefix}.v_proj"), c, c, 1, 1, 0, 1, rng),
            attn_map_conv: Conv2dLayer::new(&format!("{prefix}.attn_map"), c, 1, 1, 1, 0, 1, rng),
            c,
            ctx_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, f1: &Tensor<T>, ctx: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if ctx.is_empty() {
            return Err(Error::Usage("umfeb requires at least one context feature".to_string()));
        }
        let fs = f1.shape();
        if fs.len() != 4 || fs[1] != self.c {
            return Err(Error::shape(
                "umfeb",
                format!("expected feature [n, {}, h, w], got {}", self.c, fmt_shape(fs)),
            ));
        }
        let (n, h, w) = (fs[0], fs[2], fs[3]);
        let total: usize = ctx.iter().map(|t| t.shape()[1]).sum();
        if total != self.ctx_channels {
            return Err(Error::shape(
                "umfeb",
                format!("context channels sum to {}, block built for {}", total, self.ctx_channels),
            ));
        }
        let mut resized = Vec::new();
        for t in ctx {
            if t.shape()[0] != n {
                return Err(Error::shape(
                    "umfeb",
                    format!("context batch {} does not match feature batch {}", t.shape()[0], n),
                ));
            }
            resized.push(g.bilinear_resize(t, h, w)?);
        }
        let refs: Vec<&Tensor<T>> = resized.iter().collect();
        let cat = g.concat(&refs, 1)?;

        let f1m = self.mfb_new.forward(g, f1)?;
        let q = self.q_proj.forward(g, &f1m)?;
        let v = self.v_proj.forward(g, &f1m)?;
        let ctxm = self.mfb_ctx.forward(g, &cat)?;
        let ctxm = self.chan_attn.forward(g, &ctxm)?;
        let k = self.k_proj.forward(g, &ctxm)?;

        let qt = g.map_to_tokens(&q)?;
        let kt = g.map_to_tokens(&k)?;
        let vt = g.map_to_tokens(&v)?;
        let scores = g.bmm_nt(&qt, &kt)?;
        let scores = g.scale(&scores, 1.0 / (self.c as f64).sqrt());
        let attn = g.softmax(&scores, 2)?;
        let mixed = g.bmm_nn(&attn, &vt)?;
        let mixed = g.tokens_to_map(&mixed, h, w)?;

        let gate_logits = self.attn_map_conv.forward(g, &ctxm)?;
        let gate = g.sigmoid(&gate_logits);
        let gated = g.mul_gate(&mixed, &gate)?;
        g.add(&gated, f1)
    }

    /// The gate conv's bias; exposed so tests can force the gate open/closed.
    pub fn gate_bias(&self) -> &Param {
        self.attn_map_conv.b.as_ref().expect("gate conv is built with a bias")
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = self.mfb_new.params();
        ps.extend(self.mfb_ctx.params());
        ps.extend(self.chan_attn.params());
        ps.extend(self.q_proj.params());
        ps.extend(self.k_proj.params());
        ps.extend(self.v_proj.params());
        ps.extend(self.attn_map_conv.params());
        ps
    }
}

/// Gated residual refinement: x + sigmoid(gate_conv(x)) * feat_conv(x).
pub struct ConvGate {
    gate_conv: Conv2dLayer,
    feat_conv: Conv2dLayer,
}

impl ConvGate {
    pub fn new(prefix: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvGate {
            gate_conv: Conv2dLayer::new(&format!("{prefix}.gate_conv"), c, c, 3, 1, 1, 1, rng),
            feat_conv: Conv2dLayer::new(&format!("{prefix}.feat_conv"), c, c, 3, 1, 1, 1, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let gate_logits = self.gate_conv.forward(g, x)?;
        let gate = g.sigmoid(&gate_logits);
        let feat = self.feat_conv.forward(g, x)?;
        let gated = g.mul(&gate, &feat)?;
        g.add(x, &gated)
    }

    /// The gate conv's bias; exposed so tests can force the gate.
    pub fn gate_bias(&self) -> &Param {
        self.gate_conv.b.as_ref().expect("gate conv is built with a bias")
    }

    pub fn params(&self) -> Vec<Param> {
        let mut ps = self.gate_conv.params();
        ps.extend(self.feat_conv.params());
        ps
    }
}
