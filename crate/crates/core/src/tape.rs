//! Reverse-mode autodiff over [`crate::kernels`].
//!
//! A [`Tape`] executes eagerly and records one node per op. Backward walks
//! the node list in reverse, so graphs must be built in topological order
//! (which eager construction guarantees). Tapes are per-sample and cheap to
//! drop; parallel training builds one tape per batch item.

use crate::kernels as k;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// a*x + b elementwise, constants.
    Affine(NodeId, S, S),
    Sqrt(NodeId),
    Silu(NodeId),
    Softplus(NodeId),
    Matmul(NodeId, NodeId),
    MatmulTB(NodeId, NodeId),
    /// x[n,d] + b[d]
    AddRowBc(NodeId, NodeId),
    /// x[c,h,w] + b[c]
    AddChanBc(NodeId, NodeId),
    /// x[n,k] * s[n], broadcast over columns
    MulRowScale(NodeId, NodeId),
    Softmax(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        cols: Option<Tensor<S>>,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        stats: k::NormStats<S>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: k::NormStats<S>,
    },
    AvgPool2(NodeId),
    AdaptiveAvgPool(NodeId),
    NearestUp2(NodeId),
    SpaceToDepth(NodeId, usize),
    DepthToSpace(NodeId, usize),
    ChwToTokens(NodeId),
    TokensToChw(NodeId),
    ConcatChan(Vec<NodeId>),
    SliceChan {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Depthwise3x3Rep(NodeId, [f64; 9]),
    ReplicatePad1(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    MeanPerChannel(NodeId),
    Reshape(NodeId),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    needs_grad: bool,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// When false, backward bookkeeping (im2col caches) is skipped; the tape
    /// then serves as a forward-only evaluator.
    pub grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(512),
            grad_enabled: true,
        }
    }

    pub fn forward_only() -> Self {
        Tape {
            nodes: Vec::with_capacity(512),
            grad_enabled: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            needs_grad: needs_grad && self.grad_enabled,
            op,
        });
        id
    }

    pub fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> NodeId {
        self.push(value, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
            let mut v = ta.clone();
            for (x, &y) in v.data_mut().iter_mut().zip(tb.data()) {
                *x += y;
            }
            v
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
            let mut v = ta.clone();
            for (x, &y) in v.data_mut().iter_mut().zip(tb.data()) {
                *x -= y;
            }
            v
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
            let mut v = ta.clone();
            for (x, &y) in v.data_mut().iter_mut().zip(tb.data()) {
                *x *= y;
            }
            v
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (ta, tb) = (self.value(a), self.value(b));
            assert_eq!(ta.shape(), tb.shape(), "div shape mismatch");
            let mut v = ta.clone();
            for (x, &y) in v.data_mut().iter_mut().zip(tb.data()) {
                *x = *x / y;
            }
            v
        };
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Div(a, b))
    }

    /// a*x + b with scalar constants.
    pub fn affine(&mut self, x: NodeId, a: S, b: S) -> NodeId {
        let v = self.value(x).map(|e| a * e + b);
        let ng = self.needs(x);
        self.push(v, ng, Op::Affine(x, a, b))
    }

    pub fn scale(&mut self, x: NodeId, a: S) -> NodeId {
        self.affine(x, a, S::ZERO)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.sqrt());
        let ng = self.needs(x);
        self.push(v, ng, Op::Sqrt(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = k::silu(self.value(x));
        let ng = self.needs(x);
        self.push(v, ng, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = k::softplus(self.value(x));
        let ng = self.needs(x);
        self.push(v, ng, Op::Softplus(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = k::matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Matmul(a, b))
    }

    /// a[m,k] @ b[n,k]^T
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = k::matmul_tb(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::MatmulTB(a, b))
    }

    pub fn add_row_bc(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (tx, tb) = (self.value(x), self.value(b));
            let (n, d) = (tx.shape()[0], tx.shape()[1]);
            assert_eq!(tb.len(), d, "row bias length");
            let mut v = tx.clone();
            for r in 0..n {
                for j in 0..d {
                    v.data_mut()[r * d + j] += tb.data()[j];
                }
            }
            v
        };
        let ng = self.needs(x) || self.needs(b);
        self.push(v, ng, Op::AddRowBc(x, b))
    }

    pub fn add_chan_bc(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (tx, tb) = (self.value(x), self.value(b));
            let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
            assert_eq!(tb.len(), c, "channel bias length");
            let mut v = tx.clone();
            for ci in 0..c {
                let bv = tb.data()[ci];
                for e in &mut v.data_mut()[ci * h * w..(ci + 1) * h * w] {
                    *e += bv;
                }
            }
            v
        };
        let ng = self.needs(x) || self.needs(b);
        self.push(v, ng, Op::AddChanBc(x, b))
    }

    /// x[n,k] * s[n] with s broadcast across the key axis.
    pub fn mul_row_scale(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let v = {
            let (tx, ts) = (self.value(x), self.value(s));
            let (n, kk) = (tx.shape()[0], tx.shape()[1]);
            assert_eq!(ts.len(), n, "row scale length");
            let mut v = tx.clone();
            for r in 0..n {
                let sv = ts.data()[r];
                for e in &mut v.data_mut()[r * kk..(r + 1) * kk] {
                    *e *= sv;
                }
            }
            v
        };
        let ng = self.needs(x) || self.needs(s);
        self.push(v, ng, Op::MulRowScale(x, s))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = k::softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(v, ng, Op::Softmax(x))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let (v, cols) = k::conv2d(
            self.value(x),
            self.value(w),
            b.map(|bb| self.value(bb)),
            stride,
            pad,
        );
        let ng =
            self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        let cols = if ng { Some(cols) } else { None };
        self.push(
            v,
            ng,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        )
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        groups: usize,
        gamma: NodeId,
        beta: NodeId,
    ) -> NodeId {
        let (v, stats) = k::group_norm(self.value(x), groups, self.value(gamma), self.value(beta));
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            v,
            ng,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        )
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (v, stats) = k::layer_norm(self.value(x), self.value(gamma), self.value(beta));
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            v,
            ng,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        )
    }

    pub fn avgpool2(&mut self, x: NodeId) -> NodeId {
        let v = k::avgpool2(self.value(x));
        let ng = self.needs(x);
        self.push(v, ng, Op::AvgPool2(x))
    }

    pub fn adaptive_avgpool(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let v = k::adaptive_avgpool(self.value(x), oh, ow);
        let ng = self.needs(x);
        self.push(v, ng, Op::AdaptiveAvgPool(x))
    }

    pub fn nearest_up2(&mut self, x: NodeId) -> NodeId {
        let v = k::nearest_up2(self.value(x));
        let ng = self.needs(x);
        self.push(v, ng, Op::NearestUp2(x))
    }

    pub fn space_to_depth(&mut self, x: NodeId, f: usize) -> NodeId {
        let v = k::space_to_depth(self.value(x), f);
        let ng = self.needs(x);
        self.push(v, ng, Op::SpaceToDepth(x, f))
    }

    pub fn depth_to_space(&mut self, x: NodeId, f: usize) -> NodeId {
        let v = k::depth_to_space(self.value(x), f);
        let ng = self.needs(x);
        self.push(v, ng, Op::DepthToSpace(x, f))
    }

    pub fn chw_to_tokens(&mut self, x: NodeId) -> NodeId {
        let v = k::chw_to_tokens(self.value(x));
        let ng = self.needs(x);
        self.push(v, ng, Op::ChwToTokens(x))
    }

    pub fn tokens_to_chw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let v = k::tokens_to_chw(self.value(x), h, w);
        let ng = self.needs(x);
        self.push(v, ng, Op::TokensToChw(x))
    }

    pub fn concat_chan(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (h, w) = {
            let t = self.value(parts[0]);
            (t.shape()[1], t.shape()[2])
        };
        let mut total_c = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &[h, w], "concat_chan spatial mismatch");
            total_c += t.shape()[0];
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(&[total_c, h, w], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, ng, Op::ConcatChan(parts.to_vec()))
    }

    pub fn slice_chan(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = {
            let t = self.value(x);
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            assert!(start + len <= c, "slice_chan out of range");
            Tensor::from_vec(
                &[len, h, w],
                t.data()[start * h * w..(start + len) * h * w].to_vec(),
            )
        };
        let ng = self.needs(x);
        self.push(v, ng, Op::SliceChan { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).shape()[0];
        let mut total_d = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.shape()[0], n, "concat_cols row mismatch");
            total_d += t.shape()[1];
        }
        let mut v = Tensor::zeros(&[n, total_d]);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p).clone();
            let d = t.shape()[1];
            for r in 0..n {
                v.data_mut()[r * total_d + off..r * total_d + off + d]
                    .copy_from_slice(&t.data()[r * d..(r + 1) * d]);
            }
            off += d;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, ng, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = {
            let t = self.value(x);
            let (n, d) = (t.shape()[0], t.shape()[1]);
            assert!(start + len <= d, "slice_cols out of range");
            let mut v = Tensor::zeros(&[n, len]);
            for r in 0..n {
                v.data_mut()[r * len..(r + 1) * len]
                    .copy_from_slice(&t.data()[r * d + start..r * d + start + len]);
            }
            v
        };
        let ng = self.needs(x);
        self.push(v, ng, Op::SliceCols { x, start, len })
    }

    pub fn replicate_pad1(&mut self, x: NodeId) -> NodeId {
        let v = k::replicate_pad1(self.value(x));
        let ng = self.needs(x);
        self.push(v, ng, Op::ReplicatePad1(x))
    }

    pub fn depthwise3x3_replicate(&mut self, x: NodeId, kernel: [f64; 9]) -> NodeId {
        let v = k::depthwise3x3_replicate(self.value(x), &kernel);
        let ng = self.needs(x);
        self.push(v, ng, Op::Depthwise3x3Rep(x, kernel))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let n = t.len();
        let mut s = S::ZERO;
        for &v in t.data() {
            s += v;
        }
        let v = Tensor::scalar(s * S::from_f64(1.0 / n as f64));
        let ng = self.needs(x);
        self.push(v, ng, Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let mut s = S::ZERO;
        for &v in t.data() {
            s += v;
        }
        let v = Tensor::scalar(s);
        let ng = self.needs(x);
        self.push(v, ng, Op::SumAll(x))
    }

    /// [c,h,w] -> [c] spatial means.
    pub fn mean_per_channel(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let hw = h * w;
        let mut v = Tensor::zeros(&[c]);
        for ci in 0..c {
            let mut s = S::ZERO;
            for &e in &t.data()[ci * hw..(ci + 1) * hw] {
                s += e;
            }
            v.data_mut()[ci] = s * S::from_f64(1.0 / hw as f64);
        }
        let ng = self.needs(x);
        self.push(v, ng, Op::MeanPerChannel(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).clone().reshaped(shape);
        let ng = self.needs(x);
        self.push(v, ng, Op::Reshape(x))
    }

    /// Convenience: tokens[n,din] @ w[din,dout] + b.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row_bc(y, b),
            None => y,
        }
    }

    // -----------------------------------------------------------------------
    // Backward
    // -----------------------------------------------------------------------

    /// Run backward from a scalar root; returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients<S> {
        assert!(self.grad_enabled, "backward on a forward-only tape");
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(S::ONE));

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        let acc = |grads: &mut [Option<Tensor<S>>], id: NodeId, t: Tensor<S>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (x, &y) in existing.data_mut().iter_mut().zip(t.data()) {
                        *x += y;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                if self.nodes[a.0].needs_grad {
                    let mut da = g.clone();
                    for (x, &y) in da.data_mut().iter_mut().zip(tb.data()) {
                        *x *= y;
                    }
                    acc(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = g.clone();
                    for (x, &y) in db.data_mut().iter_mut().zip(ta.data()) {
                        *x *= y;
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                let y = &node.value;
                if self.nodes[a.0].needs_grad {
                    let mut da = g.clone();
                    for (x, &bv) in da.data_mut().iter_mut().zip(tb.data()) {
                        *x = *x / bv;
                    }
                    acc(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = g.clone();
                    for ((x, &yv), &bv) in db.data_mut().iter_mut().zip(y.data()).zip(tb.data())
                    {
                        *x = -(*x) * yv / bv;
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Affine(x, a, _) => {
                acc(grads, *x, g.map(|v| *a * v));
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d = *d / (S::from_f64(2.0) * yv);
                }
                acc(grads, *x, dx);
            }
            Op::Silu(x) => {
                acc(grads, *x, k::silu_backward(g, self.value(*x)));
            }
            Op::Softplus(x) => {
                acc(grads, *x, k::softplus_backward(g, self.value(*x)));
            }
            Op::Matmul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(grads, *a, k::matmul_tb(g, self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    acc(grads, *b, k::matmul_ta(self.value(*a), g));
                }
            }
            Op::MatmulTB(a, b) => {
                // y = a @ b^T : da = g @ b ; db = g^T @ a
                if self.nodes[a.0].needs_grad {
                    acc(grads, *a, k::matmul(g, self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    acc(grads, *b, k::matmul_ta(g, self.value(*a)));
                }
            }
            Op::AddRowBc(x, b) => {
                if self.nodes[x.0].needs_grad {
                    acc(grads, *x, g.clone());
                }
                if self.nodes[b.0].needs_grad {
                    let (n, d) = (g.shape()[0], g.shape()[1]);
                    let mut db = Tensor::zeros(&[d]);
                    for r in 0..n {
                        for j in 0..d {
                            db.data_mut()[j] += g.data()[r * d + j];
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::AddChanBc(x, b) => {
                if self.nodes[x.0].needs_grad {
                    acc(grads, *x, g.clone());
                }
                if self.nodes[b.0].needs_grad {
                    let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                    let mut db = Tensor::zeros(&[c]);
                    for ci in 0..c {
                        let mut s = S::ZERO;
                        for &v in &g.data()[ci * h * w..(ci + 1) * h * w] {
                            s += v;
                        }
                        db.data_mut()[ci] = s;
                    }
                    acc(grads, *b, db);
                }
            }
            Op::MulRowScale(x, s) => {
                let (n, kk) = (g.shape()[0], g.shape()[1]);
                if self.nodes[x.0].needs_grad {
                    let ts = self.value(*s);
                    let mut dx = g.clone();
                    for r in 0..n {
                        let sv = ts.data()[r];
                        for e in &mut dx.data_mut()[r * kk..(r + 1) * kk] {
                            *e *= sv;
                        }
                    }
                    acc(grads, *x, dx);
                }
                if self.nodes[s.0].needs_grad {
                    let tx = self.value(*x);
                    let mut ds = Tensor::zeros(&[n]);
                    for r in 0..n {
                        let mut acc_v = S::ZERO;
                        for j in 0..kk {
                            acc_v += g.data()[r * kk + j] * tx.data()[r * kk + j];
                        }
                        ds.data_mut()[r] = acc_v;
                    }
                    acc(grads, *s, ds);
                }
            }
            Op::Softmax(x) => {
                acc(grads, *x, k::softmax_rows_backward(&node.value, g));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let cols_owned;
                let cols_ref = match cols {
                    Some(c) => c,
                    None => {
                        let wsh = self.value(*w).shape().to_vec();
                        cols_owned = k::im2col(self.value(*x), wsh[2], wsh[3], *stride, *pad);
                        &cols_owned
                    }
                };
                let (dx, dw, db) = k::conv2d_backward(
                    g,
                    cols_ref,
                    self.value(*w),
                    self.value(*x).shape(),
                    *stride,
                    *pad,
                );
                if self.nodes[x.0].needs_grad {
                    acc(grads, *x, dx);
                }
                if self.nodes[w.0].needs_grad {
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        acc(grads, *b, db);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (dx, dgamma, dbeta) =
                    k::group_norm_backward(g, self.value(*x), *groups, self.value(*gamma), stats);
                if self.nodes[x.0].needs_grad {
                    acc(grads, *x, dx);
                }
                if self.nodes[gamma.0].needs_grad {
                    acc(grads, *gamma, dgamma);
                }
                if self.nodes[beta.0].needs_grad {
                    acc(grads, *beta, dbeta);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dgamma, dbeta) =
                    k::layer_norm_backward(g, self.value(*x), self.value(*gamma), stats);
                if self.nodes[x.0].needs_grad {
                    acc(grads, *x, dx);
                }
                if self.nodes[gamma.0].needs_grad {
                    acc(grads, *gamma, dgamma);
                }
                if self.nodes[beta.0].needs_grad {
                    acc(grads, *beta, dbeta);
                }
            }
            Op::AvgPool2(x) => {
                let xs = self.value(*x).shape();
                acc(grads, *x, k::avgpool2_backward(g, xs[1], xs[2]));
            }
            Op::AdaptiveAvgPool(x) => {
                let xs = self.value(*x).shape();
                acc(grads, *x, k::adaptive_avgpool_backward(g, xs[1], xs[2]));
            }
            Op::NearestUp2(x) => {
                acc(grads, *x, k::nearest_up2_backward(g));
            }
            Op::SpaceToDepth(x, f) => {
                acc(grads, *x, k::depth_to_space(g, *f));
            }
            Op::DepthToSpace(x, f) => {
                acc(grads, *x, k::space_to_depth(g, *f));
            }
            Op::ChwToTokens(x) => {
                let xs = self.value(*x).shape();
                acc(grads, *x, k::tokens_to_chw(g, xs[1], xs[2]));
            }
            Op::TokensToChw(x) => {
                acc(grads, *x, k::chw_to_tokens(g));
            }
            Op::ConcatChan(parts) => {
                let (h, w) = (g.shape()[1], g.shape()[2]);
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).shape()[0];
                    if self.nodes[p.0].needs_grad {
                        let dp = Tensor::from_vec(
                            &[c, h, w],
                            g.data()[off * h * w..(off + c) * h * w].to_vec(),
                        );
                        acc(grads, p, dp);
                    }
                    off += c;
                }
            }
            Op::SliceChan { x, start, len } => {
                let xs = self.value(*x).shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = Tensor::zeros(&[c, h, w]);
                dx.data_mut()[start * h * w..(start + len) * h * w].copy_from_slice(g.data());
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let (n, total_d) = (g.shape()[0], g.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let d = self.value(p).shape()[1];
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Tensor::zeros(&[n, d]);
                        for r in 0..n {
                            dp.data_mut()[r * d..(r + 1) * d].copy_from_slice(
                                &g.data()[r * total_d + off..r * total_d + off + d],
                            );
                        }
                        acc(grads, p, dp);
                    }
                    off += d;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xs = self.value(*x).shape();
                let (n, d) = (xs[0], xs[1]);
                let mut dx = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    dx.data_mut()[r * d + start..r * d + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *x, dx);
            }
            Op::Depthwise3x3Rep(x, kernel) => {
                acc(grads, *x, k::depthwise3x3_replicate_backward(g, kernel));
            }
            Op::ReplicatePad1(x) => {
                acc(grads, *x, k::replicate_pad1_backward(g));
            }
            Op::MeanAll(x) => {
                let t = self.value(*x);
                let n = t.len();
                let gv = g.item() * S::from_f64(1.0 / n as f64);
                acc(grads, *x, Tensor::full(t.shape(), gv));
            }
            Op::SumAll(x) => {
                let t = self.value(*x);
                acc(grads, *x, Tensor::full(t.shape(), g.item()));
            }
            Op::MeanPerChannel(x) => {
                let t = self.value(*x);
                let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let hw = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    let gv = g.data()[ci] * S::from_f64(1.0 / hw as f64);
                    for e in &mut dx.data_mut()[ci * hw..(ci + 1) * hw] {
                        *e = gv;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let xs = self.value(*x).shape().to_vec();
                acc(grads, *x, g.clone().reshaped(&xs));
            }
        }
    }
}

pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads[id.0].take()
    }
}
