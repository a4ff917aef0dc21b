//! Reverse-mode autodiff over a recorded op tape.
//!
//! A [`Graph`] owns one forward/backward pass. Ops compute eagerly and, when
//! recording is on and at least one input is tracked, push a record holding
//! the op kind, input/output node ids, and `Rc` clones of whatever buffers
//! the adjoint needs. `backward` walks the records once in reverse,
//! accumulating gradients additively per node; gradients of registered
//! [`Param`] leaves are folded into the parameter's grad slot at the end.
//!
//! Tracking is sparse: constants and frozen parameters enter as untracked
//! tensors, so subgraphs that cannot influence any trainable leaf never
//! touch the tape.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::fft;
use crate::kernels as k;
use crate::scalar::Scalar;
use crate::tensor::{fmt_shape, numel, NodeId, Param, Tensor};

/// A saved operand: where its gradient goes (if tracked) and the forward
/// value the adjoint reads.
struct Src<T: Scalar> {
    id: Option<NodeId>,
    data: Rc<Vec<T>>,
}

impl<T: Scalar> Src<T> {
    fn of(t: &Tensor<T>) -> Self {
        Src { id: t.node(), data: t.data_rc() }
    }
}

#[allow(clippy::large_enum_variant)]
enum Op<T: Scalar> {
    Conv2d {
        x: Src<T>,
        w: Src<T>,
        b: Option<Src<T>>,
        y: NodeId,
        n: usize,
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Linear {
        x: Src<T>,
        w: Src<T>,
        b: Option<Src<T>>,
        y: NodeId,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Gelu { x: Src<T>, y: NodeId },
    Sigmoid { x_id: Option<NodeId>, y_data: Rc<Vec<T>>, y: NodeId },
    Relu { x: Src<T>, y: NodeId },
    Softmax { x_id: Option<NodeId>, y_data: Rc<Vec<T>>, y: NodeId, outer: usize, lanes: usize, inner: usize },
    Add { a: Option<NodeId>, b: Option<NodeId>, y: NodeId },
    Mul { a: Src<T>, b: Src<T>, y: NodeId },
    Scale { x: Option<NodeId>, c: T, y: NodeId },
    MulChannel { map: Src<T>, gate: Src<T>, y: NodeId, nc: usize, plane: usize },
    MulGate { map: Src<T>, gate: Src<T>, y: NodeId, n: usize, c: usize, plane: usize },
    Concat { parts: Vec<(Option<NodeId>, usize)>, y: NodeId, outer: usize },
    Gap { x: Option<NodeId>, y: NodeId, nc: usize, plane: usize },
    Bilinear { x: Option<NodeId>, y: NodeId, planes: usize, h: usize, w: usize, oh: usize, ow: usize },
    /// Any pure index permutation: gradient scatters through the inverse map.
    Permute { x: Option<NodeId>, y: NodeId, kind: PermKind },
    Reshape { x: Option<NodeId>, y: NodeId },
    BmmNT { a: Src<T>, b: Src<T>, y: NodeId, bt: usize, m: usize, kk: usize, n: usize },
    BmmNN { a: Src<T>, b: Src<T>, y: NodeId, bt: usize, m: usize, kk: usize, n: usize },
    Fft2 { x: Option<NodeId>, re: NodeId, im: NodeId, planes: usize, p: usize },
    Ifft2 { re: Option<NodeId>, im: Option<NodeId>, y: NodeId, planes: usize, p: usize },
    ComplexMul {
        sre: Src<T>,
        sim: Src<T>,
        kre: Src<T>,
        kim: Src<T>,
        ore: NodeId,
        oim: NodeId,
        np: usize,
        csz: usize,
    },
    SumAll { x: Option<NodeId>, y: NodeId },
    BceWithLogits { logits: Src<T>, gt: Rc<Vec<T>>, y: NodeId },
}

#[derive(Clone, Copy)]
enum PermKind {
    TokensToMap { n: usize, h: usize, w: usize, d: usize },
    MapToTokens { n: usize, h: usize, w: usize, d: usize },
    Partition { n: usize, c: usize, h: usize, w: usize, p: usize },
    Merge { n: usize, c: usize, h: usize, w: usize, p: usize },
}

/// Tape-owning context for one forward (and optionally backward) pass.
pub struct Graph<T: Scalar = f32> {
    recording: bool,
    node_sizes: Vec<usize>,
    ops: Vec<Op<T>>,
    params: Vec<(NodeId, Param)>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph: ops push tape records, `backward` is available.
    pub fn new() -> Self {
        Graph { recording: true, node_sizes: Vec::new(), ops: Vec::new(), params: Vec::new(), grads: Vec::new() }
    }

    /// A non-recording graph for inference; ops only compute values.
    pub fn inference() -> Self {
        Graph { recording: false, ..Graph::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_records(&self) -> usize {
        self.ops.len()
    }

    /// Drops the tape and every saved activation it holds.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.node_sizes.clear();
        self.params.clear();
        self.grads.clear();
    }

    fn alloc_node(&mut self, size: usize) -> NodeId {
        self.node_sizes.push(size);
        self.node_sizes.len() - 1
    }

    fn out_node(&mut self, tracked: bool, size: usize) -> Option<NodeId> {
        if self.recording && tracked {
            Some(self.alloc_node(size))
        } else {
            None
        }
    }

    /// Registers a tensor as a differentiable leaf. Its gradient can be read
    /// with [`Graph::grad`] after `backward`.
    pub fn var(&mut self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.clone();
        }
        let id = self.alloc_node(t.numel());
        Tensor::tracked_rc(t.data_rc(), t.shape(), Some(id))
    }

    /// Brings a parameter into the pass. Trainable parameters become tracked
    /// leaves whose gradients accumulate into the parameter; frozen ones
    /// enter as constants and stay off the tape.
    pub fn param(&mut self, p: &Param) -> Tensor<T> {
        let data: Vec<T> = p.value_as::<T>();
        if self.recording && p.trainable() {
            let id = self.alloc_node(data.len());
            self.params.push((id, p.clone()));
            Tensor::tracked(data, p.shape(), Some(id))
        } else {
            Tensor::new(data, p.shape())
        }
    }

    /// Gradient of a tracked leaf created with [`Graph::var`], if `backward`
    /// reached it.
    pub fn grad(&self, t: &Tensor<T>) -> Option<Vec<T>> {
        let id = t.node()?;
        self.grads.get(id).and_then(|g| g.clone())
    }

    // -- ops ----------------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and weight, got {} and {}", fmt_shape(xs), fmt_shape(ws)),
            ));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1".to_string()));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("groups {} must divide cin {} and cout {}", groups, cin, cout),
            ));
        }
        if wcin != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {} input channels per group, input has {} ({} groups)", wcin, cin / groups, groups),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, wd + 2 * pad),
            ));
        }
        if let Some(bt) = b {
            if bt.shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {} does not match cout {}", fmt_shape(bt.shape()), cout),
                ));
            }
        }
        let oh = k::conv_out_dim(h, kh, stride, pad);
        let ow = k::conv_out_dim(wd, kw, stride, pad);
        let mut y = vec![T::ZERO; n * cout * oh * ow];
        k::conv2d_fwd(x.data(), w.data(), b.map(|t| t.data()), &mut y, n, cin, h, wd, cout, kh, kw, stride, pad, groups);

        let tracked = x.node().is_some() || w.node().is_some() || b.and_then(|t| t.node()).is_some();
        let node = self.out_node(tracked, y.len());
        let out = Tensor::tracked(y, &[n, cout, oh, ow], node);
        if let Some(yid) = node {
            self.ops.push(Op::Conv2d {
                x: Src::of(x),
                w: Src::of(w),
                b: b.map(Src::of),
                y: yid,
                n,
                cin,
                h,
                wd,
                cout,
                kh,
                kw,
                stride,
                pad,
                groups,
            });
        }
        Ok(out)
    }

    /// x [.., din] * w[dout, din]^T + b. Leading dims are flattened to rows.
    pub fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.is_empty() || ws.len() != 2 {
            return Err(Error::shape(
                "linear",
                format!("expected input [.., din] and weight [dout, din], got {} and {}", fmt_shape(xs), fmt_shape(ws)),
            ));
        }
        let din = *xs.last().unwrap();
        let (dout, wdin) = (ws[0], ws[1]);
        if wdin != din {
            return Err(Error::shape(
                "linear",
                format!("input feature dim {} does not match weight fan-in {}", din, wdin),
            ));
        }
        if let Some(bt) = b {
            if bt.shape() != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {} does not match dout {}", fmt_shape(bt.shape()), dout),
                ));
            }
        }
        let rows = x.numel() / din;
        let mut y = vec![T::ZERO; rows * dout];
        if let Some(bt) = b {
            for r in 0..rows {
                y[r * dout..(r + 1) * dout].copy_from_slice(bt.data());
            }
        }
        k::mm_nt(x.data(), w.data(), rows, din, dout, &mut y);

        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let tracked = x.node().is_some() || w.node().is_some() || b.and_then(|t| t.node()).is_some();
        let node = self.out_node(tracked, y.len());
        let out = Tensor::tracked(y, &out_shape, node);
        if let Some(yid) = node {
            self.ops.push(Op::Linear { x: Src::of(x), w: Src::of(w), b: b.map(Src::of), y: yid, rows, din, dout });
        }
        Ok(out)
    }

    pub fn gelu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y: Vec<T> = x.data().iter().map(|&v| k::gelu(v)).collect();
        let node = self.out_node(x.node().is_some(), y.len());
        let out = Tensor::tracked(y, x.shape(), node);
        if let Some(yid) = node {
            self.ops.push(Op::Gelu { x: Src::of(x), y: yid });
        }
        out
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y: Vec<T> = x.data().iter().map(|&v| k::sigmoid(v)).collect();
        let node = self.out_node(x.node().is_some(), y.len());
        let out = Tensor::tracked(y, x.shape(), node);
        if let Some(yid) = node {
            self.ops.push(Op::Sigmoid { x_id: x.node(), y_data: out.data_rc(), y: yid });
        }
        out
    }

    pub fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y: Vec<T> = x.data().iter().map(|&v| v.max_s(T::ZERO)).collect();
        let node = self.out_node(x.node().is_some(), y.len());
        let out = Tensor::tracked(y, x.shape(), node);
        if let Some(yid) = node {
            self.ops.push(Op::Relu { x: Src::of(x), y: yid });
        }
        out
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let xs = x.shape();
        if axis >= xs.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {} out of range for shape {}", axis, fmt_shape(xs)),
            ));
        }
        let lanes = xs[axis];
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut y = x.data().to_vec();
        if inner == 1 {
            k::softmax_rows(&mut y, outer, lanes);
        } else {
            let mut lane = vec![T::ZERO; lanes];
            for o in 0..outer {
                for i in 0..inner {
                    for (l, lv) in lane.iter_mut().enumerate() {
                        *lv = y[(o * lanes + l) * inner + i];
                    }
                    k::softmax_rows(&mut lane, 1, lanes);
                    for (l, &lv) in lane.iter().enumerate() {
                        y[(o * lanes + l) * inner + i] = lv;
                    }
                }
            }
        }
        let node = self.out_node(x.node().is_some(), y.len());
        let out = Tensor::tracked(y, xs, node);
        if let Some(yid) = node {
            self.ops.push(Op::Softmax { x_id: x.node(), y_data: out.data_rc(), y: yid, outer, lanes, inner });
        }
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "add",
                format!("{} vs {}", fmt_shape(a.shape()), fmt_shape(b.shape())),
            ));
        }
        let y: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &z)| x + z).collect();
        let tracked = a.node().is_some() || b.node().is_some();
        let node = self.out_node(tracked, y.len());
        let out = Tensor::tracked(y, a.shape(), node);
        if let Some(yid) = node {
            self.ops.push(Op::Add { a: a.node(), b: b.node(), y: yid });
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "mul",
                format!("{} vs {}", fmt_shape(a.shape()), fmt_shape(b.shape())),
            ));
        }
        let y: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &z)| x * z).collect();
        let tracked = a.node().is_some() || b.node().is_some();
        let node = self.out_node(tracked, y.len());
        let out = Tensor::tracked(y, a.shape(), node);
        if let Some(yid) = node {
            self.ops.push(Op::Mul { a: Src::of(a), b: Src::of(b), y: yid });
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: &Tensor<T>, c: f64) -> Tensor<T> {
        let cv = T::from_f64(c);
        let y: Vec<T> = x.data().iter().map(|&v| v * cv).collect();
        let node = self.out_node(x.node().is_some(), y.len());
        let out = Tensor::tracked(y, x.shape(), node);
        if let Some(yid) = node {
            self.ops.push(Op::Scale { x: x.node(), c: cv, y: yid });
        }
        out
    }

    /// [n,c,h,w] * [n,c,1,1] with the gate broadcast over each plane.
    pub fn mul_channel(&mut self, map: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
        let ms = map.shape();
        let gs = gate.shape();
        if ms.len() != 4 || gs.len() != 4 || gs[0] != ms[0] || gs[1] != ms[1] || gs[2] != 1 || gs[3] != 1 {
            return Err(Error::shape(
                "mul_channel",
                format!("map {} needs gate [n,c,1,1], got {}", fmt_shape(ms), fmt_shape(gs)),
            ));
        }
        let nc = ms[0] * ms[1];
        let plane = ms[2] * ms[3];
        let mut y = vec![T::ZERO; map.numel()];
        for i in 0..nc {
            let g = gate.data()[i];
            for (yv, &mv) in y[i * plane..(i + 1) * plane].iter_mut().zip(&map.data()[i * plane..(i + 1) * plane]) {
                *yv = g * mv;
            }
        }
        let tracked = map.node().is_some() || gate.node().is_some();
        let node = self.out_node(tracked, y.len());
        let out = Tensor::tracked(y, ms, node);
        if let Some(yid) = node {
            self.ops.push(Op::MulChannel { map: Src::of(map), gate: Src::of(gate), y: yid, nc, plane });
        }
        Ok(out)
    }

    /// [n,c,h,w] * [n,1,h,w] with the spatial gate broadcast over channels.
    pub fn mul_gate(&mut self, map: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
        let ms = map.shape();
        let gs = gate.shape();
        if ms.len() != 4 || gs.len() != 4 || gs[0] != ms[0] || gs[1] != 1 || gs[2] != ms[2] || gs[3] != ms[3] {
            return Err(Error::shape(
                "mul_gate",
                format!("map {} needs gate [n,1,h,w], got {}", fmt_shape(ms), fmt_shape(gs)),
            ));
        }
        let (n, c) = (ms[0], ms[1]);
        let plane = ms[2] * ms[3];
        let mut y = vec![T::ZERO; map.numel()];
        for ni in 0..n {
            let g = &gate.data()[ni * plane..(ni + 1) * plane];
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for ((yv, &mv), &gv) in y[base..base + plane].iter_mut().zip(&map.data()[base..base + plane]).zip(g) {
                    *yv = gv * mv;
                }
            }
        }
        let tracked = map.node().is_some() || gate.node().is_some();
        let node = self.out_node(tracked, y.len());
        let out = Tensor::tracked(y, ms, node);
        if let Some(yid) = node {
            self.ops.push(Op::MulGate { map: Src::of(map), gate: Src::of(gate), y: yid, n, c, plane });
        }
        Ok(out)
    }

    pub fn concat(&mut self, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs".to_string()));
        }
        let first = parts[0].shape();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for shape {}", axis, fmt_shape(first)),
            ));
        }
        for t in parts {
            let s = t.shape();
            if s.len() != first.len()
                || s.iter().zip(first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{} vs {} along axis {}", fmt_shape(s), fmt_shape(first), axis),
                ));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|t| t.shape()[axis]).sum();
        let mut shape = first.to_vec();
        shape[axis] = total_axis;
        let mut y = vec![T::ZERO; outer * total_axis * inner];
        let row = total_axis * inner;
        let mut off = 0usize;
        let mut rec = Vec::with_capacity(parts.len());
        for t in parts {
            let block = t.shape()[axis] * inner;
            for o in 0..outer {
                y[o * row + off..o * row + off + block].copy_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
            rec.push((t.node(), block));
            off += block;
        }
        let tracked = parts.iter().any(|t| t.node().is_some());
        let node = self.out_node(tracked, y.len());
        let out = Tensor::tracked(y, &shape, node);
        if let Some(yid) = node {
            self.ops.push(Op::Concat { parts: rec, y: yid, outer });
        }
        Ok(out)
    }

    /// [n,c,h,w] -> [n,c,1,1] spatial mean.
    pub fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected rank 4, got {}", fmt_shape(xs))));
        }
        let nc = xs[0] * xs[1];
        let plane = xs[2] * xs[3];
        let inv = T::from_f64(1.0 / plane as f64);
        let mut y = vec![T::ZERO; nc];
        for i in 0..nc {
            let mut acc = T::ZERO;
            for &v in &x.data()[i * plane..(i + 1) * plane] {
                acc += v;
            }
            y[i] = acc * inv;
        }
        let node = self.out_node(x.node().is_some(), nc);
        let out = Tensor::tracked(y, &[xs[0], xs[1], 1, 1], node);
        if let Some(yid) = node {
            self.ops.push(Op::Gap { x: x.node(), y: yid, nc, plane });
        }
        Ok(out)
    }

    /// Bilinear resample of [n,c,h,w] to (oh, ow), align_corners=false.
    pub fn bilinear_resize(&mut self, x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::shape("bilinear_resize", format!("expected rank 4, got {}", fmt_shape(xs))));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::shape("bilinear_resize", "output dims must be positive".to_string()));
        }
        let planes = xs[0] * xs[1];
        let (h, w) = (xs[2], xs[3]);
        if (h, w) == (oh, ow) {
            // identity resize: still a distinct tensor, but no resampling
            let node = self.out_node(x.node().is_some(), x.numel());
            let out = Tensor::tracked(x.data().to_vec(), xs, node);
            if let Some(yid) = node {
                self.ops.push(Op::Reshape { x: x.node(), y: yid });
            }
            return Ok(out);
        }
        let mut y = vec![T::ZERO; planes * oh * ow];
        k::bilinear_fwd(x.data(), &mut y, planes, h, w, oh, ow);
        let node = self.out_node(x.node().is_some(), y.len());
        let out = Tensor::tracked(y, &[xs[0], xs[1], oh, ow], node);
        if let Some(yid) = node {
            self.ops.push(Op::Bilinear { x: x.node(), y: yid, planes, h, w, oh, ow });
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != x.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {} changes element count", fmt_shape(x.shape()), fmt_shape(shape)),
            ));
        }
        let node = self.out_node(x.node().is_some(), x.numel());
        let out = Tensor::tracked_rc(x.data_rc(), shape, node);
        if let Some(yid) = node {
            self.ops.push(Op::Reshape { x: x.node(), y: yid });
        }
        Ok(out)
    }

    /// [n, h*w, d] tokens -> [n, d, h, w] feature map.
    pub fn tokens_to_map(&mut self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 3 || xs[1] != h * w {
            return Err(Error::shape(
                "tokens_to_map",
                format!("expected [n, {}, d] for a {}x{} grid, got {}", h * w, h, w, fmt_shape(xs)),
            ));
        }
        let (n, d) = (xs[0], xs[2]);
        let mut y = vec![T::ZERO; x.numel()];
        k::tokens_to_map(x.data(), &mut y, n, h, w, d);
        let node = self.out_node(x.node().is_some(), y.len());
        let out = Tensor::tracked(y, &[n, d, h, w], node);
        if let Some(yid) = node {
            self.ops.push(Op::Permute { x: x.node(), y: yid, kind: PermKind::TokensToMap { n, h, w, d } });
        }
        Ok(out)
    }

    /// [n, d, h, w] feature map -> [n, h*w, d] tokens.
    pub fn map_to_tokens(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::shape("map_to_tokens", format!("expected rank 4, got {}", fmt_shape(xs))));
        }
        let (n, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let mut y = vec![T::ZERO; x.numel()];
        k::map_to_tokens(x.data(), &mut y, n, h, w, d);
        let node = self.out_node(x.node().is_some(), y.len());
        let out = Tensor::tracked(y, &[n, h * w, d], node);
        if let Some(yid) = node {
            self.ops.push(Op::Permute { x: x.node(), y: yid, kind: PermKind::MapToTokens { n, h, w, d } });
        }
        Ok(out)
    }

    /// [n,c,h,w] -> [n*(h/p)*(w/p), c, p, p]; h and w must be multiples of p.
    pub fn partition_patches(&mut self, x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::shape("partition_patches", format!("expected rank 4, got {}", fmt_shape(xs))));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::shape(
                "partition_patches",
                format!("spatial dims {}x{} not divisible by patch size {}", h, w, p),
            ));
        }
        let mut y = vec![T::ZERO; x.numel()];
        k::partition_patches(x.data(), &mut y, n, c, h, w, p);
        let np = n * (h / p) * (w / p);
        let node = self.out_node(x.node().is_some(), y.len());
        let out = Tensor::tracked(y, &[np, c, p, p], node);
        if let Some(yid) = node {
            self.ops.push(Op::Permute { x: x.node(), y: yid, kind: PermKind::Partition { n, c, h, w, p } });
        }
        Ok(out)
    }

    /// Inverse of [`Graph::partition_patches`] for an n-image batch of h*w maps.
    pub fn merge_patches(&mut self, patches: &Tensor<T>, n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let ps = patches.shape();
        if ps.len() != 4 || ps[2] != ps[3] {
            return Err(Error::shape("merge_patches", format!("expected [np, c, p, p], got {}", fmt_shape(ps))));
        }
        let p = ps[2];
        let c = ps[1];
        if p == 0 || h % p != 0 || w % p != 0 || ps[0] != n * (h / p) * (w / p) {
            return Err(Error::shape(
                "merge_patches",
                format!("{} patches do not tile {} maps of {}x{} at patch size {}", ps[0], n, h, w, p),
            ));
        }
        let mut y = vec![T::ZERO; n * c * h * w];
        k::merge_patches(patches.data(), &mut y, n, c, h, w, p);
        let node = self.out_node(patches.node().is_some(), y.len());
        let out = Tensor::tracked(y, &[n, c, h, w], node);
        if let Some(yid) = node {
            self.ops.push(Op::Permute { x: patches.node(), y: yid, kind: PermKind::Merge { n, c, h, w, p } });
        }
        Ok(out)
    }

    /// Batched A[b,m,k] * B[b,n,k]^T -> [b,m,n].
    pub fn bmm_nt(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (as_, bs) = (a.shape(), b.shape());
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] || as_[2] != bs[2] {
            return Err(Error::shape(
                "bmm_nt",
                format!("{} vs {} (want [b,m,k] x [b,n,k])", fmt_shape(as_), fmt_shape(bs)),
            ));
        }
        let (bt, m, kk, n) = (as_[0], as_[1], as_[2], bs[1]);
        let mut y = vec![T::ZERO; bt * m * n];
        for bi in 0..bt {
            k::mm_nt(
                &a.data()[bi * m * kk..(bi + 1) * m * kk],
                &b.data()[bi * n * kk..(bi + 1) * n * kk],
                m,
                kk,
                n,
                &mut y[bi * m * n..(bi + 1) * m * n],
            );
        }
        let tracked = a.node().is_some() || b.node().is_some();
        let node = self.out_node(tracked, y.len());
        let out = Tensor::tracked(y, &[bt, m, n], node);
        if let Some(yid) = node {
            self.ops.push(Op::BmmNT { a: Src::of(a), b: Src::of(b), y: yid, bt, m, kk, n });
        }
        Ok(out)
    }

    /// Batched A[b,m,k] * B[b,k,n] -> [b,m,n].
    pub fn bmm_nn(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (as_, bs) = (a.shape(), b.shape());
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] || as_[2] != bs[1] {
            return Err(Error::shape(
                "bmm_nn",
                format!("{} vs {} (want [b,m,k] x [b,k,n])", fmt_shape(as_), fmt_shape(bs)),
            ));
        }
        let (bt, m, kk, n) = (as_[0], as_[1], as_[2], bs[2]);
        let mut y = vec![T::ZERO; bt * m * n];
        for bi in 0..bt {
            k::mm_nn(
                &a.data()[bi * m * kk..(bi + 1) * m * kk],
                &b.data()[bi * kk * n..(bi + 1) * kk * n],
                m,
                kk,
                n,
                &mut y[bi * m * n..(bi + 1) * m * n],
            );
        }
        let tracked = a.node().is_some() || b.node().is_some();
        let node = self.out_node(tracked, y.len());
        let out = Tensor::tracked(y, &[bt, m, n], node);
        if let Some(yid) = node {
            self.ops.push(Op::BmmNN { a: Src::of(a), b: Src::of(b), y: yid, bt, m, kk, n });
        }
        Ok(out)
    }

    /// Forward FFT of every trailing p*p plane of a real tensor. Returns the
    /// (real, imaginary) spectrum parts, both shaped like the input.
    pub fn fft2(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let xs = x.shape();
        if xs.len() < 2 || xs[xs.len() - 1] != xs[xs.len() - 2] || !xs[xs.len() - 1].is_power_of_two() {
            return Err(Error::shape(
                "fft2",
                format!("expected trailing square power-of-two patch dims, got {}", fmt_shape(xs)),
            ));
        }
        let p = xs[xs.len() - 1];
        let planes = x.numel() / (p * p);
        let mut re = vec![T::ZERO; x.numel()];
        let mut im = vec![T::ZERO; x.numel()];
        for i in 0..planes {
            fft::fft2_real(&x.data()[i * p * p..(i + 1) * p * p], &mut re[i * p * p..(i + 1) * p * p], &mut im[i * p * p..(i + 1) * p * p], p);
        }
        let tracked = x.node().is_some();
        let (re_node, im_node) = if self.recording && tracked {
            (Some(self.alloc_node(x.numel())), Some(self.alloc_node(x.numel())))
        } else {
            (None, None)
        };
        let re_t = Tensor::tracked(re, xs, re_node);
        let im_t = Tensor::tracked(im, xs, im_node);
        if let (Some(rid), Some(iid)) = (re_node, im_node) {
            self.ops.push(Op::Fft2 { x: x.node(), re: rid, im: iid, planes, p });
        }
        Ok((re_t, im_t))
    }

    /// Inverse FFT (scaled by 1/p^2) of a complex spectrum, keeping the real
    /// part. Filtered spectra are generally not conjugate symmetric, so the
    /// discarded imaginary part can be nonzero; the adjoint accounts for the
    /// projection.
    pub fn ifft2(&mut self, re: &Tensor<T>, im: &Tensor<T>) -> Result<Tensor<T>> {
        let rs = re.shape();
        if rs != im.shape() {
            return Err(Error::shape(
                "ifft2",
                format!("real {} vs imaginary {}", fmt_shape(rs), fmt_shape(im.shape())),
            ));
        }
        if rs.len() < 2 || rs[rs.len() - 1] != rs[rs.len() - 2] || !rs[rs.len() - 1].is_power_of_two() {
            return Err(Error::shape(
                "ifft2",
                format!("expected trailing square power-of-two patch dims, got {}", fmt_shape(rs)),
            ));
        }
        let p = rs[rs.len() - 1];
        let planes = re.numel() / (p * p);
        let mut y = vec![T::ZERO; re.numel()];
        for i in 0..planes {
            fft::ifft2_real_part(
                &re.data()[i * p * p..(i + 1) * p * p],
                &im.data()[i * p * p..(i + 1) * p * p],
                &mut y[i * p * p..(i + 1) * p * p],
                p,
            );
        }
        let tracked = re.node().is_some() || im.node().is_some();
        let node = self.out_node(tracked, y.len());
        let out = Tensor::tracked(y, rs, node);
        if let Some(yid) = node {
            self.ops.push(Op::Ifft2 { re: re.node(), im: im.node(), y: yid, planes, p });
        }
        Ok(out)
    }

    /// Complex elementwise product of a spectrum [np, c, p, p] with a
    /// per-channel kernel [c, p, p] broadcast over dim 0.
    pub fn complex_mul_bcast(
        &mut self,
        sre: &Tensor<T>,
        sim: &Tensor<T>,
        kre: &Tensor<T>,
        kim: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let ss = sre.shape();
        let ks = kre.shape();
        if ss != sim.shape() || ks != kim.shape() {
            return Err(Error::shape(
                "complex_mul",
                format!(
                    "real/imaginary parts disagree: {} vs {} and {} vs {}",
                    fmt_shape(ss),
                    fmt_shape(sim.shape()),
                    fmt_shape(ks),
                    fmt_shape(kim.shape())
                ),
            ));
        }
        if ss.len() != 4 || ks.len() != 3 || ss[1] != ks[0] || ss[2] != ks[1] || ss[3] != ks[2] {
            return Err(Error::shape(
                "complex_mul",
                format!("spectrum {} incompatible with kernel {}", fmt_shape(ss), fmt_shape(ks)),
            ));
        }
        let np = ss[0];
        let csz = ks[0] * ks[1] * ks[2];
        let mut ore = vec![T::ZERO; sre.numel()];
        let mut oim = vec![T::ZERO; sre.numel()];
        for pi in 0..np {
            let b = pi * csz;
            for i in 0..csz {
                let (ar, ai) = (sre.data()[b + i], sim.data()[b + i]);
                let (br, bi) = (kre.data()[i], kim.data()[i]);
                ore[b + i] = ar * br - ai * bi;
                oim[b + i] = ar * bi + ai * br;
            }
        }
        let tracked = sre.node().is_some() || sim.node().is_some() || kre.node().is_some() || kim.node().is_some();
        let (ore_node, oim_node) = if self.recording && tracked {
            (Some(self.alloc_node(ore.len())), Some(self.alloc_node(oim.len())))
        } else {
            (None, None)
        };
        let ore_t = Tensor::tracked(ore, ss, ore_node);
        let oim_t = Tensor::tracked(oim, ss, oim_node);
        if let (Some(orid), Some(oiid)) = (ore_node, oim_node) {
            self.ops.push(Op::ComplexMul {
                sre: Src::of(sre),
                sim: Src::of(sim),
                kre: Src::of(kre),
                kim: Src::of(kim),
                ore: orid,
                oim: oiid,
                np,
                csz,
            });
        }
        Ok((ore_t, oim_t))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, x: &Tensor<T>) -> Tensor<T> {
        // accumulate in f64 so the scalar is insensitive to element order
        let s: f64 = x.data().iter().map(|v| v.to_f64()).sum();
        let node = self.out_node(x.node().is_some(), 1);
        let out = Tensor::tracked(vec![T::from_f64(s)], &[], node);
        if let Some(yid) = node {
            self.ops.push(Op::SumAll { x: x.node(), y: yid });
        }
        out
    }

    /// Mean binary cross-entropy between logits and targets in [0,1], in the
    /// stable form mean(gt * softplus(-x) + (1 - gt) * softplus(x)).
    /// The target is treated as a constant; gradients flow to logits only.
    pub fn bce_with_logits(&mut self, logits: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
        if logits.shape() != gt.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {} vs target {}", fmt_shape(logits.shape()), fmt_shape(gt.shape())),
            ));
        }
        let mut acc = 0.0f64;
        for (&x, &t) in logits.data().iter().zip(gt.data()) {
            let xp = k::softplus(x).to_f64();
            let xn = k::softplus(-x).to_f64();
            acc += t.to_f64() * xn + (1.0 - t.to_f64()) * xp;
        }
        let mean = acc / logits.numel() as f64;
        let node = self.out_node(logits.node().is_some(), 1);
        let out = Tensor::tracked(vec![T::from_f64(mean)], &[], node);
        if let Some(yid) = node {
            self.ops.push(Op::BceWithLogits { logits: Src::of(logits), gt: gt.data_rc(), y: yid });
        }
        Ok(out)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Visits each tape record exactly
    /// once in reverse order; gradients of trainable parameters accumulate
    /// additively into their grad slots.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                fmt_shape(loss.shape())
            )));
        }
        let Some(root) = loss.node() else {
            return Err(Error::Usage("backward on an untracked tensor (did you record the forward pass?)".to_string()));
        };
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.node_sizes.len()];
        grads[root] = Some(vec![T::ONE]);

        for op in self.ops.iter().rev() {
            step_backward(op, &mut grads, &self.node_sizes);
        }

        for (node, param) in &self.params {
            if let Some(g) = &grads[*node] {
                let g32: Vec<f32> = g.iter().map(|v| v.to_f32()).collect();
                param.accumulate_grad(&g32);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn acc_into<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    sizes: &[usize],
    id: Option<NodeId>,
    f: impl FnOnce(&mut [T]),
) {
    let Some(id) = id else { return };
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![T::ZERO; sizes[id]]);
    }
    f(slot.as_mut().unwrap());
}

/// Takes the gradient flowing into `id`, leaving the slot empty. The
/// producer op is visited exactly once, after every consumer, so the value
/// is never needed again.
fn take_grad<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId) -> Option<Vec<T>> {
    grads[id].take()
}

fn step_backward<T: Scalar>(op: &Op<T>, grads: &mut [Option<Vec<T>>], sizes: &[usize]) {
    match op {
        Op::Conv2d { x, w, b, y, n, cin, h, wd, cout, kh, kw, stride, pad, groups } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, x.id, |dx| {
                k::conv2d_bwd_input(&dy, &w.data, dx, *n, *cin, *h, *wd, *cout, *kh, *kw, *stride, *pad, *groups);
            });
            acc_into(grads, sizes, w.id, |dw| {
                k::conv2d_bwd_weight(&x.data, &dy, dw, *n, *cin, *h, *wd, *cout, *kh, *kw, *stride, *pad, *groups);
            });
            if let Some(bs) = b {
                let oh = k::conv_out_dim(*h, *kh, *stride, *pad);
                let ow = k::conv_out_dim(*wd, *kw, *stride, *pad);
                acc_into(grads, sizes, bs.id, |db| {
                    k::conv2d_bwd_bias(&dy, db, *n, *cout, oh * ow);
                });
            }
        }
        Op::Linear { x, w, b, y, rows, din, dout } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, x.id, |dx| {
                k::mm_nn(&dy, &w.data, *rows, *dout, *din, dx);
            });
            acc_into(grads, sizes, w.id, |dw| {
                k::mm_tn(&dy, &x.data, *rows, *dout, *din, dw);
            });
            if let Some(bs) = b {
                acc_into(grads, sizes, bs.id, |db| {
                    for r in 0..*rows {
                        for (dbv, &g) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
                            *dbv += g;
                        }
                    }
                });
            }
        }
        Op::Gelu { x, y } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, x.id, |dx| {
                for ((dv, &g), &xv) in dx.iter_mut().zip(&dy).zip(x.data.iter()) {
                    *dv += g * k::gelu_grad(xv);
                }
            });
        }
        Op::Sigmoid { x_id, y_data, y } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, *x_id, |dx| {
                for ((dv, &g), &yv) in dx.iter_mut().zip(&dy).zip(y_data.iter()) {
                    *dv += g * yv * (T::ONE - yv);
                }
            });
        }
        Op::Relu { x, y } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, x.id, |dx| {
                for ((dv, &g), &xv) in dx.iter_mut().zip(&dy).zip(x.data.iter()) {
                    if xv > T::ZERO {
                        *dv += g;
                    }
                }
            });
        }
        Op::Softmax { x_id, y_data, y, outer, lanes, inner } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, *x_id, |dx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |l: usize| (o * lanes + l) * inner + i;
                        let mut dot = T::ZERO;
                        for l in 0..*lanes {
                            dot += dy[idx(l)] * y_data[idx(l)];
                        }
                        for l in 0..*lanes {
                            let j = idx(l);
                            dx[j] += y_data[j] * (dy[j] - dot);
                        }
                    }
                }
            });
        }
        Op::Add { a, b, y } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, *a, |da| {
                for (dv, &g) in da.iter_mut().zip(&dy) {
                    *dv += g;
                }
            });
            acc_into(grads, sizes, *b, |db| {
                for (dv, &g) in db.iter_mut().zip(&dy) {
                    *dv += g;
                }
            });
        }
        Op::Mul { a, b, y } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, a.id, |da| {
                for ((dv, &g), &bv) in da.iter_mut().zip(&dy).zip(b.data.iter()) {
                    *dv += g * bv;
                }
            });
            acc_into(grads, sizes, b.id, |db| {
                for ((dv, &g), &av) in db.iter_mut().zip(&dy).zip(a.data.iter()) {
                    *dv += g * av;
                }
            });
        }
        Op::Scale { x, c, y } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, *x, |dx| {
                for (dv, &g) in dx.iter_mut().zip(&dy) {
                    *dv += g * *c;
                }
            });
        }
        Op::MulChannel { map, gate, y, nc, plane } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, map.id, |dm| {
                for i in 0..*nc {
                    let g = gate.data[i];
                    for (dv, &gy) in dm[i * plane..(i + 1) * plane].iter_mut().zip(&dy[i * plane..(i + 1) * plane]) {
                        *dv += g * gy;
                    }
                }
            });
            acc_into(grads, sizes, gate.id, |dg| {
                for i in 0..*nc {
                    let mut acc = T::ZERO;
                    for (&mv, &gy) in map.data[i * plane..(i + 1) * plane].iter().zip(&dy[i * plane..(i + 1) * plane]) {
                        acc += mv * gy;
                    }
                    dg[i] += acc;
                }
            });
        }
        Op::MulGate { map, gate, y, n, c, plane } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, map.id, |dm| {
                for ni in 0..*n {
                    let g = &gate.data[ni * plane..(ni + 1) * plane];
                    for ci in 0..*c {
                        let base = (ni * c + ci) * plane;
                        for ((dv, &gy), &gv) in dm[base..base + plane].iter_mut().zip(&dy[base..base + plane]).zip(g) {
                            *dv += gv * gy;
                        }
                    }
                }
            });
            acc_into(grads, sizes, gate.id, |dg| {
                for ni in 0..*n {
                    let dgp = &mut dg[ni * plane..(ni + 1) * plane];
                    for ci in 0..*c {
                        let base = (ni * c + ci) * plane;
                        for ((dv, &gy), &mv) in dgp.iter_mut().zip(&dy[base..base + plane]).zip(&map.data[base..base + plane]) {
                            *dv += mv * gy;
                        }
                    }
                }
            });
        }
        Op::Concat { parts, y, outer } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            let row: usize = parts.iter().map(|(_, b)| b).sum();
            let mut off = 0usize;
            for (id, block) in parts {
                acc_into(grads, sizes, *id, |dp| {
                    for o in 0..*outer {
                        for (dv, &g) in dp[o * block..(o + 1) * block].iter_mut().zip(&dy[o * row + off..o * row + off + block]) {
                            *dv += g;
                        }
                    }
                });
                off += block;
            }
        }
        Op::Gap { x, y, nc, plane } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            let inv = T::from_f64(1.0 / *plane as f64);
            acc_into(grads, sizes, *x, |dx| {
                for i in 0..*nc {
                    let g = dy[i] * inv;
                    for dv in &mut dx[i * plane..(i + 1) * plane] {
                        *dv += g;
                    }
                }
            });
        }
        Op::Bilinear { x, y, planes, h, w, oh, ow } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, *x, |dx| {
                k::bilinear_bwd(&dy, dx, *planes, *h, *w, *oh, *ow);
            });
        }
        Op::Permute { x, y, kind } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, *x, |dx| {
                let mut tmp = vec![T::ZERO; dx.len()];
                match kind {
                    PermKind::TokensToMap { n, h, w, d } => k::map_to_tokens(&dy, &mut tmp, *n, *h, *w, *d),
                    PermKind::MapToTokens { n, h, w, d } => k::tokens_to_map(&dy, &mut tmp, *n, *h, *w, *d),
                    PermKind::Partition { n, c, h, w, p } => k::merge_patches(&dy, &mut tmp, *n, *c, *h, *w, *p),
                    PermKind::Merge { n, c, h, w, p } => k::partition_patches(&dy, &mut tmp, *n, *c, *h, *w, *p),
                }
                for (dv, &g) in dx.iter_mut().zip(&tmp) {
                    *dv += g;
                }
            });
        }
        Op::Reshape { x, y } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, *x, |dx| {
                for (dv, &g) in dx.iter_mut().zip(&dy) {
                    *dv += g;
                }
            });
        }
        Op::BmmNT { a, b, y, bt, m, kk, n } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, a.id, |da| {
                for bi in 0..*bt {
                    k::mm_nn(&dy[bi * m * n..(bi + 1) * m * n], &b.data[bi * n * kk..(bi + 1) * n * kk], *m, *n, *kk, &mut da[bi * m * kk..(bi + 1) * m * kk]);
                }
            });
            acc_into(grads, sizes, b.id, |db| {
                for bi in 0..*bt {
                    k::mm_tn(&dy[bi * m * n..(bi + 1) * m * n], &a.data[bi * m * kk..(bi + 1) * m * kk], *m, *n, *kk, &mut db[bi * n * kk..(bi + 1) * n * kk]);
                }
            });
        }
        Op::BmmNN { a, b, y, bt, m, kk, n } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            acc_into(grads, sizes, a.id, |da| {
                for bi in 0..*bt {
                    k::mm_nt(&dy[bi * m * n..(bi + 1) * m * n], &b.data[bi * kk * n..(bi + 1) * kk * n], *m, *n, *kk, &mut da[bi * m * kk..(bi + 1) * m * kk]);
                }
            });
            acc_into(grads, sizes, b.id, |db| {
                for bi in 0..*bt {
                    k::mm_tn(&a.data[bi * m * kk..(bi + 1) * m * kk], &dy[bi * m * n..(bi + 1) * m * n], *m, *kk, *n, &mut db[bi * kk * n..(bi + 1) * kk * n]);
                }
            });
        }
        Op::Fft2 { x, re, im, planes, p } => {
            let dre = take_grad(grads, *re);
            let dim = take_grad(grads, *im);
            if dre.is_none() && dim.is_none() {
                return;
            }
            let pp = p * p;
            acc_into(grads, sizes, *x, |dx| {
                let zeros = vec![T::ZERO; pp];
                let mut tr = vec![T::ZERO; pp];
                let mut ti = vec![T::ZERO; pp];
                // the DFT real/imag part maps are symmetric, so each adjoint
                // is a forward transform of the incoming gradient
                if let Some(dre) = &dre {
                    for i in 0..*planes {
                        fft::fft2_complex(&dre[i * pp..(i + 1) * pp], &zeros, &mut tr, &mut ti, *p, false);
                        for (dv, &g) in dx[i * pp..(i + 1) * pp].iter_mut().zip(&tr) {
                            *dv += g;
                        }
                    }
                }
                if let Some(dim) = &dim {
                    for i in 0..*planes {
                        fft::fft2_complex(&dim[i * pp..(i + 1) * pp], &zeros, &mut tr, &mut ti, *p, false);
                        for (dv, &g) in dx[i * pp..(i + 1) * pp].iter_mut().zip(&ti) {
                            *dv += g;
                        }
                    }
                }
            });
        }
        Op::Ifft2 { re, im, y, planes, p } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            let pp = p * p;
            let scale = T::from_f64(1.0 / (pp) as f64);
            let zeros = vec![T::ZERO; pp];
            let mut tr = vec![T::ZERO; pp];
            let mut ti = vec![T::ZERO; pp];
            // adjoint of "inverse FFT then take the real part" splits into
            // scaled forward-transform parts toward re and im
            for i in 0..*planes {
                fft::fft2_complex(&dy[i * pp..(i + 1) * pp], &zeros, &mut tr, &mut ti, *p, false);
                acc_into(grads, sizes, *re, |dre| {
                    for (dv, &g) in dre[i * pp..(i + 1) * pp].iter_mut().zip(&tr) {
                        *dv += g * scale;
                    }
                });
                acc_into(grads, sizes, *im, |dim| {
                    for (dv, &g) in dim[i * pp..(i + 1) * pp].iter_mut().zip(&ti) {
                        *dv += g * scale;
                    }
                });
            }
        }
        Op::ComplexMul { sre, sim, kre, kim, ore, oim, np, csz } => {
            let dre = take_grad(grads, *ore);
            let dim = take_grad(grads, *oim);
            if dre.is_none() && dim.is_none() {
                return;
            }
            let zero = vec![T::ZERO; np * csz];
            let dre = dre.unwrap_or_else(|| zero.clone());
            let dim = dim.unwrap_or(zero);
            acc_into(grads, sizes, sre.id, |d| {
                for pi in 0..*np {
                    let b = pi * csz;
                    for i in 0..*csz {
                        d[b + i] += dre[b + i] * kre.data[i] + dim[b + i] * kim.data[i];
                    }
                }
            });
            acc_into(grads, sizes, sim.id, |d| {
                for pi in 0..*np {
                    let b = pi * csz;
                    for i in 0..*csz {
                        d[b + i] += dim[b + i] * kre.data[i] - dre[b + i] * kim.data[i];
                    }
                }
            });
            acc_into(grads, sizes, kre.id, |d| {
                for pi in 0..*np {
                    let b = pi * csz;
                    for i in 0..*csz {
                        d[i] += dre[b + i] * sre.data[b + i] + dim[b + i] * sim.data[b + i];
                    }
                }
            });
            acc_into(grads, sizes, kim.id, |d| {
                for pi in 0..*np {
                    let b = pi * csz;
                    for i in 0..*csz {
                        d[i] += dim[b + i] * sre.data[b + i] - dre[b + i] * sim.data[b + i];
                    }
                }
            });
        }
        Op::SumAll { x, y } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            let g = dy[0];
            acc_into(grads, sizes, *x, |dx| {
                for dv in dx.iter_mut() {
                    *dv += g;
                }
            });
        }
        Op::BceWithLogits { logits, gt, y } => {
            let Some(dy) = take_grad(grads, *y) else { return };
            let g = dy[0];
            let inv_n = T::from_f64(1.0 / logits.data.len() as f64);
            acc_into(grads, sizes, logits.id, |dx| {
                for ((dv, &x), &t) in dx.iter_mut().zip(logits.data.iter()).zip(gt.iter()) {
                    *dv += g * inv_n * (k::sigmoid(x) - t);
                }
            });
        }
    }
}
