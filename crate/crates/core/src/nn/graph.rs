//! Reverse-mode tape autodiff over `ndarray` (f64).
//!
//! A `Graph` is rebuilt per training step (define-by-run). Ops record the
//! node indices of their parents plus whatever the backward pass needs
//! (normalization statistics, mode flags); `backward` walks the tape in
//! reverse creation order and accumulates gradients into every node that
//! requires them. Gradients flow through inputs as well as parameters, so a
//! frozen downstream network still backpropagates into whatever produced its
//! input — the property the detection-consistency losses rely on.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use rand::Rng;

use super::kernels as k;

pub type Arr = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

// Some recorded op parameters (e.g. the AddConst offset) are not needed by
// backward; they stay on the tape for debug inspection.
#[derive(Debug)]
#[allow(dead_code)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddConst(NodeId, f64),
    MulConst(NodeId, f64),
    Abs(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Pad2d {
        x: NodeId,
        pad: usize,
        mode: PadMode,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    MaxPool2(NodeId),
    Upsample2x(NodeId),
    ConcatC(NodeId, NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Array1<f64>,
        invstd: Array1<f64>,
        training: bool,
    },
    InstanceNorm {
        x: NodeId,
        mean: Array2<f64>,
        invstd: Array2<f64>,
    },
    MeanAll(NodeId),
    SumAll(NodeId),
    SumPerImage(NodeId),
}

struct Node {
    value: Arr,
    grad: Option<Arr>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. One instance per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(v: &Arr) -> (usize, usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn slice_of(v: &Arr) -> &[f64] {
    v.as_slice().expect("tensor must be standard layout")
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arr, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Arr, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradients (fixed kernels, dropout masks, targets).
    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    /// Cut the tape: same value, no gradient path.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn val(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar_val(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar_val on non-scalar node");
        v[[0]]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Arr> {
        self.nodes[id.0].grad.as_ref()
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(&Arr, &Arr) -> Arr, op: Op) -> NodeId {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "elementwise op on mismatched shapes"
        );
        let v = f(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rq = self.requires(a) || self.requires(b);
        self.push(v, op, rq)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f);
        let rq = self.requires(a);
        self.push(v, op, rq)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddConst(a, c))
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x * c, Op::MulConst(a, c))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Inverted dropout: keep with probability `1-p`, scale kept values by
    /// `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut impl Rng) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask = self.nodes[x.0]
            .value
            .mapv(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    // ---- spatial ---------------------------------------------------------

    pub fn pad2d(&mut self, x: NodeId, pad: usize, mode: PadMode) -> NodeId {
        if pad == 0 {
            return x;
        }
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h + 2 * pad, w + 2 * pad]));
        {
            let src = slice_of(&self.nodes[x.0].value);
            let dst = out.as_slice_mut().unwrap();
            let in_sz = c * h * w;
            let out_sz = c * (h + 2 * pad) * (w + 2 * pad);
            for img in 0..n {
                k::pad2d_forward(
                    &src[img * in_sz..(img + 1) * in_sz],
                    c,
                    h,
                    w,
                    pad,
                    mode == PadMode::Reflect,
                    &mut dst[img * out_sz..(img + 1) * out_sz],
                );
            }
        }
        let rq = self.requires(x);
        self.push(out, Op::Pad2d { x, pad, mode }, rq)
    }

    /// Convolution without padding (pad explicitly first), floor semantics.
    /// `w` is `[Cout, Cin, kh, kw]`, bias `[Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize) -> NodeId {
        let (n, cin, h, wd) = dims4(&self.nodes[x.0].value);
        let (cout, cin2, kh, kw) = dims4(&self.nodes[w.0].value);
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert!(h >= kh && wd >= kw, "conv2d input smaller than kernel");
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let kdim = cin * kh * kw;
        let mut out = ArrayD::zeros(IxDyn(&[n, cout, oh, ow]));
        {
            let xs = slice_of(&self.nodes[x.0].value);
            let ws = slice_of(&self.nodes[w.0].value);
            let w_mat = ArrayView2::from_shape((cout, kdim), ws).unwrap();
            let os = out.as_slice_mut().unwrap();
            let mut cols = vec![0.0; kdim * oh * ow];
            for img in 0..n {
                k::im2col(
                    &xs[img * cin * h * wd..(img + 1) * cin * h * wd],
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    0,
                    oh,
                    ow,
                    &mut cols,
                );
                let cview = ArrayView2::from_shape((kdim, oh * ow), &cols[..]).unwrap();
                let oview = ArrayViewMut2::from_shape(
                    (cout, oh * ow),
                    &mut os[img * cout * oh * ow..(img + 1) * cout * oh * ow],
                )
                .unwrap();
                k::gemm(w_mat, cview, 0.0, oview);
            }
            if let Some(bid) = b {
                let bs = slice_of(&self.nodes[bid.0].value);
                assert_eq!(bs.len(), cout, "conv2d bias length");
                for img in 0..n {
                    for co in 0..cout {
                        let off = (img * cout + co) * oh * ow;
                        let bv = bs[co];
                        for v in &mut os[off..off + oh * ow] {
                            *v += bv;
                        }
                    }
                }
            }
        }
        let rq = self.requires(x) || self.requires(w) || b.is_some_and(|bb| self.requires(bb));
        self.push(out, Op::Conv2d { x, w, b, stride }, rq)
    }

    /// Transposed convolution. `w` is `[Cin, Cout, kh, kw]`;
    /// `out = (in-1)*stride - 2*pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> NodeId {
        let (n, cin, h, wd) = dims4(&self.nodes[x.0].value);
        let (cin2, cout, kh, kw) = dims4(&self.nodes[w.0].value);
        assert_eq!(cin, cin2, "conv_transpose2d channel mismatch");
        let oh = (h - 1) * stride + kh + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + kw + out_pad - 2 * pad;
        let kdim = cout * kh * kw;
        let mut out = ArrayD::zeros(IxDyn(&[n, cout, oh, ow]));
        {
            let xs = slice_of(&self.nodes[x.0].value);
            let ws = slice_of(&self.nodes[w.0].value);
            let w_mat = ArrayView2::from_shape((cin, kdim), ws).unwrap();
            let os = out.as_slice_mut().unwrap();
            let mut cols = vec![0.0; kdim * h * wd];
            for img in 0..n {
                let xv = ArrayView2::from_shape(
                    (cin, h * wd),
                    &xs[img * cin * h * wd..(img + 1) * cin * h * wd],
                )
                .unwrap();
                let cview = ArrayViewMut2::from_shape((kdim, h * wd), &mut cols[..]).unwrap();
                k::gemm(w_mat.t(), xv, 0.0, cview);
                k::col2im_add(
                    &cols,
                    cout,
                    oh,
                    ow,
                    kh,
                    kw,
                    stride,
                    pad,
                    h,
                    wd,
                    &mut os[img * cout * oh * ow..(img + 1) * cout * oh * ow],
                );
            }
            if let Some(bid) = b {
                let bs = slice_of(&self.nodes[bid.0].value);
                for img in 0..n {
                    for co in 0..cout {
                        let off = (img * cout + co) * oh * ow;
                        let bv = bs[co];
                        for v in &mut os[off..off + oh * ow] {
                            *v += bv;
                        }
                    }
                }
            }
        }
        let rq = self.requires(x) || self.requires(w) || b.is_some_and(|bb| self.requires(bb));
        self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
                out_pad,
            },
            rq,
        )
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial size");
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h / 2, w / 2]));
        {
            let src = slice_of(&self.nodes[x.0].value);
            let dst = out.as_slice_mut().unwrap();
            for img in 0..n {
                k::maxpool2_forward(
                    &src[img * c * h * w..(img + 1) * c * h * w],
                    c,
                    h,
                    w,
                    &mut dst[img * c * (h / 2) * (w / 2)..(img + 1) * c * (h / 2) * (w / 2)],
                );
            }
        }
        let rq = self.requires(x);
        self.push(out, Op::MaxPool2(x), rq)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        {
            let src = slice_of(&self.nodes[x.0].value);
            let dst = out.as_slice_mut().unwrap();
            for img in 0..n {
                k::upsample2_forward(
                    &src[img * c * h * w..(img + 1) * c * h * w],
                    c,
                    h,
                    w,
                    &mut dst[img * c * 4 * h * w..(img + 1) * c * 4 * h * w],
                );
            }
        }
        let rq = self.requires(x);
        self.push(out, Op::Upsample2x(x), rq)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, ca, h, w) = dims4(&self.nodes[a.0].value);
        let (nb, cb, hb, wb) = dims4(&self.nodes[b.0].value);
        assert!(n == nb && h == hb && w == wb, "concat_c spatial mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[n, ca + cb, h, w]));
        {
            let sa = slice_of(&self.nodes[a.0].value);
            let sb = slice_of(&self.nodes[b.0].value);
            let dst = out.as_slice_mut().unwrap();
            let hw = h * w;
            for img in 0..n {
                let off = img * (ca + cb) * hw;
                dst[off..off + ca * hw].copy_from_slice(&sa[img * ca * hw..(img + 1) * ca * hw]);
                dst[off + ca * hw..off + (ca + cb) * hw]
                    .copy_from_slice(&sb[img * cb * hw..(img + 1) * cb * hw]);
            }
        }
        let rq = self.requires(a) || self.requires(b);
        self.push(out, Op::ConcatC(a, b), rq)
    }

    // ---- normalization ---------------------------------------------------

    /// Batch normalization with affine parameters.
    ///
    /// In training mode normalizes with batch statistics and updates
    /// `running` (mean, var) in place with the given momentum (unbiased
    /// variance in the running estimate, biased for normalization, matching
    /// common deep-learning practice). In eval mode uses `running` as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> NodeId {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        let m = (n * h * w) as f64;
        let (mean, invstd) = if training {
            let mut mu = Array1::<f64>::zeros(c);
            let mut var = Array1::<f64>::zeros(c);
            {
                let xs = slice_of(&self.nodes[x.0].value);
                for ch in 0..c {
                    let mut s = 0.0;
                    let mut s2 = 0.0;
                    for img in 0..n {
                        let off = (img * c + ch) * h * w;
                        for &v in &xs[off..off + h * w] {
                            s += v;
                            s2 += v * v;
                        }
                    }
                    let mu_c = s / m;
                    mu[ch] = mu_c;
                    var[ch] = (s2 / m - mu_c * mu_c).max(0.0);
                }
            }
            if let Some((rm, rv)) = running {
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mu[ch];
                    rv[ch] = (1.0 - momentum) * rv[ch] + momentum * var[ch] * unbias;
                }
            }
            let invstd = var.mapv(|v| 1.0 / (v + eps).sqrt());
            (mu, invstd)
        } else {
            let (rm, rv) = running.expect("eval-mode batch_norm needs running stats");
            (rm.clone(), rv.mapv(|v| 1.0 / (v + eps).sqrt()))
        };
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
        {
            let xs = slice_of(&self.nodes[x.0].value);
            let gs = slice_of(&self.nodes[gamma.0].value);
            let bs = slice_of(&self.nodes[beta.0].value);
            let os = out.as_slice_mut().unwrap();
            for img in 0..n {
                for ch in 0..c {
                    let off = (img * c + ch) * h * w;
                    let (mu, is, g, b) = (mean[ch], invstd[ch], gs[ch], bs[ch]);
                    for i in 0..h * w {
                        os[off + i] = (xs[off + i] - mu) * is * g + b;
                    }
                }
            }
        }
        let rq = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                training,
            },
            rq,
        )
    }

    /// Instance normalization without affine parameters (per sample and
    /// channel over the spatial extent), the CycleGAN default.
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        let m = (h * w) as f64;
        let mut mean = Array2::<f64>::zeros((n, c));
        let mut invstd = Array2::<f64>::zeros((n, c));
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
        {
            let xs = slice_of(&self.nodes[x.0].value);
            let os = out.as_slice_mut().unwrap();
            for img in 0..n {
                for ch in 0..c {
                    let off = (img * c + ch) * h * w;
                    let chunk = &xs[off..off + h * w];
                    let mu = chunk.iter().sum::<f64>() / m;
                    let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                    let is = 1.0 / (var + eps).sqrt();
                    mean[[img, ch]] = mu;
                    invstd[[img, ch]] = is;
                    for (o, &v) in os[off..off + h * w].iter_mut().zip(chunk) {
                        *o = (v - mu) * is;
                    }
                }
            }
        }
        let rq = self.requires(x);
        self.push(out, Op::InstanceNorm { x, mean, invstd }, rq)
    }

    // ---- reductions -------------------------------------------------------

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.sum() / self.nodes[x.0].value.len() as f64;
        let rq = self.requires(x);
        self.push(ArrayD::from_elem(IxDyn(&[1]), v), Op::MeanAll(x), rq)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.sum();
        let rq = self.requires(x);
        self.push(ArrayD::from_elem(IxDyn(&[1]), v), Op::SumAll(x), rq)
    }

    /// Sum over all axes but the first: `[N, ...] -> [N]`.
    pub fn sum_per_image(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let n = shape[0];
        let per: usize = shape[1..].iter().product();
        let xs = slice_of(&self.nodes[x.0].value);
        let mut out = Array1::<f64>::zeros(n);
        for img in 0..n {
            out[img] = xs[img * per..(img + 1) * per].iter().sum();
        }
        let rq = self.requires(x);
        self.push(out.into_dyn(), Op::SumPerImage(x), rq)
    }

    // ---- composite helpers -------------------------------------------------

    /// mean((a - b)^2)
    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// mean((a - t)^2) against a constant target.
    pub fn mse_const(&mut self, a: NodeId, t: f64) -> NodeId {
        let d = self.add_const(a, -t);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// mean(|a - b|)
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean_all(ad)
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagate from a scalar root. Gradients of every node wanting them
    /// are available through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar node"
        );
        assert!(
            self.nodes[root.0].requires_grad,
            "backward root does not require grad"
        );
        let shape = self.nodes[root.0].value.raw_dim();
        self.nodes[root.0].grad = Some(ArrayD::ones(shape));
        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let contribs = self.backprop_node(id);
            for (pid, c) in contribs {
                self.accumulate(pid, c);
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, c: Arr) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &c,
            slot => *slot = Some(c),
        }
    }

    fn backprop_node(&self, id: usize) -> Vec<(NodeId, Arr)> {
        let g = self.nodes[id].grad.as_ref().unwrap();
        let out_val = &self.nodes[id].value;
        let mut res: Vec<(NodeId, Arr)> = Vec::new();
        let want = |n: NodeId| self.nodes[n.0].requires_grad;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    res.push((*a, g.clone()));
                }
                if want(*b) {
                    res.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    res.push((*a, g.clone()));
                }
                if want(*b) {
                    res.push((*b, g.mapv(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    res.push((*a, g * &self.nodes[b.0].value));
                }
                if want(*b) {
                    res.push((*b, g * &self.nodes[a.0].value));
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                if want(*a) {
                    res.push((*a, g / bv));
                }
                if want(*b) {
                    let av = &self.nodes[a.0].value;
                    res.push((*b, -(g * av) / (bv * bv)));
                }
            }
            Op::AddConst(a, _) => {
                if want(*a) {
                    res.push((*a, g.clone()));
                }
            }
            Op::MulConst(a, c) => {
                if want(*a) {
                    res.push((*a, g.mapv(|v| v * c)));
                }
            }
            Op::Abs(a) => {
                if want(*a) {
                    let av = &self.nodes[a.0].value;
                    let mut d = g.clone();
                    d.zip_mut_with(av, |gv, &x| *gv *= x.signum() * f64::from(x != 0.0));
                    res.push((*a, d));
                }
            }
            Op::Exp(a) => {
                if want(*a) {
                    res.push((*a, g * out_val));
                }
            }
            Op::Ln(a) => {
                if want(*a) {
                    res.push((*a, g / &self.nodes[a.0].value));
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[a.0].value, |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    res.push((*a, d));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if want(*a) {
                    let mut d = g.clone();
                    let s = *slope;
                    d.zip_mut_with(&self.nodes[a.0].value, |gv, &x| {
                        if x <= 0.0 {
                            *gv *= s;
                        }
                    });
                    res.push((*a, d));
                }
            }
            Op::Sigmoid(a) => {
                if want(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(out_val, |gv, &y| *gv *= y * (1.0 - y));
                    res.push((*a, d));
                }
            }
            Op::Tanh(a) => {
                if want(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(out_val, |gv, &y| *gv *= 1.0 - y * y);
                    res.push((*a, d));
                }
            }
            Op::Pad2d { x, pad, mode } => {
                if want(*x) {
                    let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                    let mut gi = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    let gos = slice_of(g);
                    let gis = gi.as_slice_mut().unwrap();
                    let in_sz = c * h * w;
                    let out_sz = c * (h + 2 * pad) * (w + 2 * pad);
                    for img in 0..n {
                        k::pad2d_backward(
                            &gos[img * out_sz..(img + 1) * out_sz],
                            c,
                            h,
                            w,
                            *pad,
                            *mode == PadMode::Reflect,
                            &mut gis[img * in_sz..(img + 1) * in_sz],
                        );
                    }
                    res.push((*x, gi));
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                self.conv2d_backward(g, *x, *w, *b, *stride, &mut res);
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
                out_pad: _,
            } => {
                self.conv_transpose2d_backward(g, *x, *w, *b, *stride, *pad, &mut res);
            }
            Op::MaxPool2(x) => {
                if want(*x) {
                    let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                    let mut gi = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    let src = slice_of(&self.nodes[x.0].value);
                    let gos = slice_of(g);
                    let gis = gi.as_slice_mut().unwrap();
                    for img in 0..n {
                        k::maxpool2_backward(
                            &src[img * c * h * w..(img + 1) * c * h * w],
                            &gos[img * c * (h / 2) * (w / 2)..(img + 1) * c * (h / 2) * (w / 2)],
                            c,
                            h,
                            w,
                            &mut gis[img * c * h * w..(img + 1) * c * h * w],
                        );
                    }
                    res.push((*x, gi));
                }
            }
            Op::Upsample2x(x) => {
                if want(*x) {
                    let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                    let mut gi = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    let gos = slice_of(g);
                    let gis = gi.as_slice_mut().unwrap();
                    for img in 0..n {
                        k::upsample2_backward(
                            &gos[img * c * 4 * h * w..(img + 1) * c * 4 * h * w],
                            c,
                            h,
                            w,
                            &mut gis[img * c * h * w..(img + 1) * c * h * w],
                        );
                    }
                    res.push((*x, gi));
                }
            }
            Op::ConcatC(a, b) => {
                let (n, ca, h, w) = dims4(&self.nodes[a.0].value);
                let (_, cb, _, _) = dims4(&self.nodes[b.0].value);
                let hw = h * w;
                let gs = slice_of(g);
                if want(*a) {
                    let mut ga = ArrayD::zeros(self.nodes[a.0].value.raw_dim());
                    let gas = ga.as_slice_mut().unwrap();
                    for img in 0..n {
                        let off = img * (ca + cb) * hw;
                        gas[img * ca * hw..(img + 1) * ca * hw]
                            .copy_from_slice(&gs[off..off + ca * hw]);
                    }
                    res.push((*a, ga));
                }
                if want(*b) {
                    let mut gb = ArrayD::zeros(self.nodes[b.0].value.raw_dim());
                    let gbs = gb.as_slice_mut().unwrap();
                    for img in 0..n {
                        let off = img * (ca + cb) * hw;
                        gbs[img * cb * hw..(img + 1) * cb * hw]
                            .copy_from_slice(&gs[off + ca * hw..off + (ca + cb) * hw]);
                    }
                    res.push((*b, gb));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                training,
            } => {
                self.batch_norm_backward(g, *x, *gamma, *beta, mean, invstd, *training, &mut res);
            }
            Op::InstanceNorm { x, mean, invstd } => {
                if want(*x) {
                    let (n, c, h, w) = dims4(&self.nodes[x.0].value);
                    let m = (h * w) as f64;
                    let xs = slice_of(&self.nodes[x.0].value);
                    let gs = slice_of(g);
                    let mut gi = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    let gis = gi.as_slice_mut().unwrap();
                    for img in 0..n {
                        for ch in 0..c {
                            let off = (img * c + ch) * h * w;
                            let (mu, is) = (mean[[img, ch]], invstd[[img, ch]]);
                            let mut sg = 0.0;
                            let mut sgx = 0.0;
                            for i in 0..h * w {
                                let xh = (xs[off + i] - mu) * is;
                                sg += gs[off + i];
                                sgx += gs[off + i] * xh;
                            }
                            let (mg, mgx) = (sg / m, sgx / m);
                            for i in 0..h * w {
                                let xh = (xs[off + i] - mu) * is;
                                gis[off + i] = is * (gs[off + i] - mg - xh * mgx);
                            }
                        }
                    }
                    res.push((*x, gi));
                }
            }
            Op::MeanAll(x) => {
                if want(*x) {
                    let len = self.nodes[x.0].value.len() as f64;
                    let gv = g[[0]] / len;
                    res.push((*x, ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv)));
                }
            }
            Op::SumAll(x) => {
                if want(*x) {
                    let gv = g[[0]];
                    res.push((*x, ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv)));
                }
            }
            Op::SumPerImage(x) => {
                if want(*x) {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let n = shape[0];
                    let per: usize = shape[1..].iter().product();
                    let gs = slice_of(g);
                    let mut gi = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    let gis = gi.as_slice_mut().unwrap();
                    for img in 0..n {
                        gis[img * per..(img + 1) * per].fill(gs[img]);
                    }
                    res.push((*x, gi));
                }
            }
        }
        res
    }

    fn conv2d_backward(
        &self,
        g: &Arr,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        res: &mut Vec<(NodeId, Arr)>,
    ) {
        let (n, cin, h, wd) = dims4(&self.nodes[x.0].value);
        let (cout, _, kh, kw) = dims4(&self.nodes[w.0].value);
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let kdim = cin * kh * kw;
        let gs = slice_of(g);
        let want_x = self.nodes[x.0].requires_grad;
        let want_w = self.nodes[w.0].requires_grad;

        let mut dw = if want_w {
            Some(ArrayD::<f64>::zeros(self.nodes[w.0].value.raw_dim()))
        } else {
            None
        };
        let mut dx = if want_x {
            Some(ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim()))
        } else {
            None
        };
        let xs = slice_of(&self.nodes[x.0].value);
        let ws = slice_of(&self.nodes[w.0].value);
        let w_mat = ArrayView2::from_shape((cout, kdim), ws).unwrap();
        let mut cols = vec![0.0; kdim * oh * ow];
        let mut dcols = vec![0.0; kdim * oh * ow];
        for img in 0..n {
            let gview = ArrayView2::from_shape(
                (cout, oh * ow),
                &gs[img * cout * oh * ow..(img + 1) * cout * oh * ow],
            )
            .unwrap();
            if let Some(dwa) = dw.as_mut() {
                k::im2col(
                    &xs[img * cin * h * wd..(img + 1) * cin * h * wd],
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    0,
                    oh,
                    ow,
                    &mut cols,
                );
                let cview = ArrayView2::from_shape((kdim, oh * ow), &cols[..]).unwrap();
                let dw_mat =
                    ArrayViewMut2::from_shape((cout, kdim), dwa.as_slice_mut().unwrap()).unwrap();
                k::gemm(gview, cview.t(), 1.0, dw_mat);
            }
            if let Some(dxa) = dx.as_mut() {
                let dcview = ArrayViewMut2::from_shape((kdim, oh * ow), &mut dcols[..]).unwrap();
                k::gemm(w_mat.t(), gview, 0.0, dcview);
                k::col2im_add(
                    &dcols,
                    cin,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    0,
                    oh,
                    ow,
                    &mut dxa.as_slice_mut().unwrap()[img * cin * h * wd..(img + 1) * cin * h * wd],
                );
            }
        }
        if let Some(dxa) = dx {
            res.push((x, dxa));
        }
        if let Some(dwa) = dw {
            res.push((w, dwa));
        }
        if let Some(bid) = b {
            if self.nodes[bid.0].requires_grad {
                let mut db = Array1::<f64>::zeros(cout);
                for img in 0..n {
                    for co in 0..cout {
                        let off = (img * cout + co) * oh * ow;
                        db[co] += gs[off..off + oh * ow].iter().sum::<f64>();
                    }
                }
                res.push((bid, db.into_dyn()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &self,
        g: &Arr,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        res: &mut Vec<(NodeId, Arr)>,
    ) {
        let (n, cin, h, wd) = dims4(&self.nodes[x.0].value);
        let (_, cout, kh, kw) = dims4(&self.nodes[w.0].value);
        let (_, _, oh, ow) = dims4(g);
        let kdim = cout * kh * kw;
        let gs = slice_of(g);
        let want_x = self.nodes[x.0].requires_grad;
        let want_w = self.nodes[w.0].requires_grad;

        let mut dw = if want_w {
            Some(ArrayD::<f64>::zeros(self.nodes[w.0].value.raw_dim()))
        } else {
            None
        };
        let mut dx = if want_x {
            Some(ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim()))
        } else {
            None
        };
        let xs = slice_of(&self.nodes[x.0].value);
        let ws = slice_of(&self.nodes[w.0].value);
        let w_mat = ArrayView2::from_shape((cin, kdim), ws).unwrap();
        let mut dcols = vec![0.0; kdim * h * wd];
        for img in 0..n {
            // dcols[row, i*wd+j] = g[co, i*s - p + ki, j*s - p + kj]
            k::im2col(
                &gs[img * cout * oh * ow..(img + 1) * cout * oh * ow],
                cout,
                oh,
                ow,
                kh,
                kw,
                stride,
                pad,
                h,
                wd,
                &mut dcols,
            );
            let dcview = ArrayView2::from_shape((kdim, h * wd), &dcols[..]).unwrap();
            if let Some(dxa) = dx.as_mut() {
                let dxview = ArrayViewMut2::from_shape(
                    (cin, h * wd),
                    &mut dxa.as_slice_mut().unwrap()[img * cin * h * wd..(img + 1) * cin * h * wd],
                )
                .unwrap();
                k::gemm(w_mat, dcview, 0.0, dxview);
            }
            if let Some(dwa) = dw.as_mut() {
                let xview = ArrayView2::from_shape(
                    (cin, h * wd),
                    &xs[img * cin * h * wd..(img + 1) * cin * h * wd],
                )
                .unwrap();
                let dw_mat =
                    ArrayViewMut2::from_shape((cin, kdim), dwa.as_slice_mut().unwrap()).unwrap();
                k::gemm(xview, dcview.t(), 1.0, dw_mat);
            }
        }
        if let Some(dxa) = dx {
            res.push((x, dxa));
        }
        if let Some(dwa) = dw {
            res.push((w, dwa));
        }
        if let Some(bid) = b {
            if self.nodes[bid.0].requires_grad {
                let mut db = Array1::<f64>::zeros(cout);
                for img in 0..n {
                    for co in 0..cout {
                        let off = (img * cout + co) * oh * ow;
                        db[co] += gs[off..off + oh * ow].iter().sum::<f64>();
                    }
                }
                res.push((bid, db.into_dyn()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        g: &Arr,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Array1<f64>,
        invstd: &Array1<f64>,
        training: bool,
        res: &mut Vec<(NodeId, Arr)>,
    ) {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value);
        let m = (n * h * w) as f64;
        let xs = slice_of(&self.nodes[x.0].value);
        let gs = slice_of(g);
        let gammas = slice_of(&self.nodes[gamma.0].value);
        let want_x = self.nodes[x.0].requires_grad;
        let want_g = self.nodes[gamma.0].requires_grad;
        let want_b = self.nodes[beta.0].requires_grad;

        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        let mut dx = if want_x {
            Some(ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim()))
        } else {
            None
        };
        for ch in 0..c {
            let (mu, is, ga) = (mean[ch], invstd[ch], gammas[ch]);
            let mut sg = 0.0; // sum of dy*gamma  (i.e. d xhat)
            let mut sgx = 0.0; // sum of (dy*gamma)*xhat
            for img in 0..n {
                let off = (img * c + ch) * h * w;
                for i in 0..h * w {
                    let xh = (xs[off + i] - mu) * is;
                    let gv = gs[off + i];
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                    sg += gv * ga;
                    sgx += gv * ga * xh;
                }
            }
            if let Some(dxa) = dx.as_mut() {
                let dxs = dxa.as_slice_mut().unwrap();
                if training {
                    let (mg, mgx) = (sg / m, sgx / m);
                    for img in 0..n {
                        let off = (img * c + ch) * h * w;
                        for i in 0..h * w {
                            let xh = (xs[off + i] - mu) * is;
                            dxs[off + i] = is * (gs[off + i] * ga - mg - xh * mgx);
                        }
                    }
                } else {
                    for img in 0..n {
                        let off = (img * c + ch) * h * w;
                        for i in 0..h * w {
                            dxs[off + i] = gs[off + i] * ga * is;
                        }
                    }
                }
            }
        }
        if let Some(dxa) = dx {
            res.push((x, dxa));
        }
        if want_g {
            res.push((gamma, dgamma.into_dyn()));
        }
        if want_b {
            res.push((beta, dbeta.into_dyn()));
        }
    }
}
