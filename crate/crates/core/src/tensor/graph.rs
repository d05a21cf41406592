use std::collections::HashMap;

use super::conv;
use super::{numel, ParamId, ParamStore, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    SharedConv1d {
        x: Var,
        w: Var,
        vertical: bool,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Abs(Var),
    Square(Var),
    Log(Var),
    Sigmoid(Var),
    SumAll(Var),
    SumPerSample(Var),
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations; every op records its output so a single
/// reverse sweep produces gradients for all leaves that require them.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph whose parameters never require gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients (when the graph has gradients enabled).
    pub fn input(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf bound to a stored parameter. Repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let rg = self.grad_enabled;
        let v = self.push(store.get(id).clone(), Op::Leaf, rg);
        self.params.insert(key, v);
        v
    }

    /// Copy of `v`'s value that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Var {
        let [_, cin, _, _] = self.shape(x);
        let [_, wcin, k, k2] = self.shape(w);
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        assert!(k == k2 && k % 2 == 1, "conv2d needs an odd square kernel");
        assert!(dilation >= 1);
        let out = conv::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            dilation,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out, Op::Conv2d { x, w, b, dilation }, rg)
    }

    /// 1-D correlation shared across channels; `w` is `[1, 1, 1, k]`.
    pub fn shared_conv1d(&mut self, x: Var, w: Var, vertical: bool) -> Var {
        let out = conv::shared_conv1d_forward(self.value(x), self.value(w).data(), vertical);
        let rg = self.rg(&[x, w]);
        self.push(out, Op::SharedConv1d { x, w, vertical }, rg)
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in out.data_mut().chunks_mut(hw) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::InstanceNorm { x, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb);
        let mut out = Tensor::zeros(out_shape);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        if sa == sb {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for ((o, &x), &y) in out.data_mut().iter_mut().zip(av).zip(bv) {
                *o = f(x, y);
            }
        } else {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let (ra, rb) = (strides(sa, out_shape), strides(sb, out_shape));
            for_each_index(out_shape, |i, idx| {
                out.data_mut()[i] = f(av[dot(idx, ra)], bv[dot(idx, rb)]);
            });
        }
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Binary { a, b, kind }, rg)
    }

    /// Elementwise sum with broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinaryKind::Mul)
    }

    /// `scale·x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + offset);
        let rg = self.rg(&[x]);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let [n, _, h, w] = self.shape(parts[0]);
        let c: usize = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!([s[0], s[2], s[3]], [n, h, w], "concat shape mismatch");
                s[1]
            })
            .sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(b));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_vec([n, c, h, w], data), Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert!(start + len <= c);
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let s = self.value(x).sample(b);
            data.extend_from_slice(&s[start * hw..(start + len) * hw]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec([n, len, h, w], data),
            Op::SliceChannels { x, start },
            rg,
        )
    }

    /// 2×2 average pooling with stride 2 (even spatial sizes only).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let [_, _, h, w] = self.shape(x);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let out = conv::avg_pool2_forward(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::AvgPool2(x), rg)
    }

    /// Bilinear ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = conv::upsample2_forward(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Upsample2(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(&[x]);
        self.push(out, Op::Log(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over channels and pixels: `[n, c, h, w] -> [n, 1, 1, 1]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.batch();
        let data = (0..n).map(|b| t.sample(b).iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec([n, 1, 1, 1], data), Op::SumPerSample(x), rg)
    }

    /// Spatial mean: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        let data = t
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec([n, c, 1, 1], data), Op::GlobalAvgPool(x), rg)
    }

    /// Mean per-pixel cross-entropy of channel logits against class indices
    /// laid out `[n, h, w]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = self.value(logits);
        let [n, c, h, w] = t.shape();
        let hw = h * w;
        assert_eq!(targets.len(), n * hw, "target count mismatch");
        let probs = t.softmax_channels();
        let mut loss = 0.0;
        for b in 0..n {
            for p in 0..hw {
                let k = targets[b * hw + p];
                assert!(k < c, "target class out of range");
                loss -= probs.data()[(b * c + k) * hw + p].max(1e-300).ln();
            }
        }
        loss /= (n * hw) as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            numel(self.shape(root)),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dilation } => {
                let want = [
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                ];
                let (dx, dw, db) =
                    conv::conv2d_backward(self.value(*x), self.value(*w), *dilation, g, want);
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    let shape = self.shape(*b);
                    acc(*b, Tensor::from_vec(shape, db.into_data()));
                }
            }
            Op::SharedConv1d { x, w, vertical } => {
                let (dx, dw) = conv::shared_conv1d_backward(
                    self.value(*x),
                    self.value(*w).data(),
                    *vertical,
                    g,
                );
                acc(*x, dx);
                acc(*w, Tensor::from_vec(self.shape(*w), dw));
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &node.value;
                let [_, _, h, w] = y.shape();
                let hw = h * w;
                let nf = hw as f64;
                let mut dx = Tensor::zeros(y.shape());
                for (p, ((dxp, yp), gp)) in dx
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(y.data().chunks(hw))
                    .zip(g.data().chunks(hw))
                    .enumerate()
                {
                    let sg: f64 = gp.iter().sum();
                    let sgy: f64 = gp.iter().zip(yp).map(|(a, b)| a * b).sum();
                    let is = inv_std[p];
                    for ((d, &gy), &yy) in dxp.iter_mut().zip(gp).zip(yp) {
                        *d = is / nf * (nf * gy - sg - yy * sgy);
                    }
                }
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*x, dx);
            }
            Op::Binary { a, b, kind } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let out_shape = node.value.shape();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (ra, rb) = (strides(sa, out_shape), strides(sb, out_shape));
                let mut da = Tensor::zeros(sa);
                let mut db = Tensor::zeros(sb);
                for_each_index(out_shape, |k, idx| {
                    let (ia, ib) = (dot(idx, ra), dot(idx, rb));
                    let gv = g.data()[k];
                    let (ga, gb) = match kind {
                        BinaryKind::Add => (gv, gv),
                        BinaryKind::Sub => (gv, -gv),
                        BinaryKind::Mul => (gv * bv[ib], gv * av[ia]),
                    };
                    da.data_mut()[ia] += ga;
                    db.data_mut()[ib] += gb;
                });
                acc(*a, da);
                acc(*b, db);
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
            Op::Concat(parts) => {
                let [n, c, h, w] = node.value.shape();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    let mut d = Vec::with_capacity(n * pc * hw);
                    for b in 0..n {
                        let s = &g.data()[(b * c + offset) * hw..(b * c + offset + pc) * hw];
                        d.extend_from_slice(s);
                    }
                    acc(p, Tensor::from_vec([n, pc, h, w], d));
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.shape(*x);
                let len = node.value.channels();
                let hw = h * w;
                let mut dx = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    let dst = &mut dx.data_mut()[(b * c + start) * hw..(b * c + start + len) * hw];
                    dst.copy_from_slice(g.sample(b));
                }
                acc(*x, dx);
            }
            Op::AvgPool2(x) => acc(*x, conv::avg_pool2_backward(g, self.shape(*x))),
            Op::Upsample2(x) => acc(*x, conv::upsample2_backward(g, self.shape(*x))),
            Op::Abs(x) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *d *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                acc(*x, dx);
            }
            Op::Square(x) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *d *= 2.0 * v;
                }
                acc(*x, dx);
            }
            Op::Log(x) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *d /= v;
                }
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= s * (1.0 - s);
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::SumPerSample(x) => {
                let shape = self.shape(*x);
                let per = shape[1] * shape[2] * shape[3];
                let mut dx = Tensor::zeros(shape);
                for (b, chunk) in dx.data_mut().chunks_mut(per).enumerate() {
                    chunk.fill(g.data()[b]);
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.shape(*x);
                let hw = shape[2] * shape[3];
                let mut dx = Tensor::zeros(shape);
                for (p, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                    chunk.fill(g.data()[p] / hw as f64);
                }
                acc(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let [n, c, h, w] = probs.shape();
                let hw = h * w;
                let scale = g.item() / (n * hw) as f64;
                let mut dx = probs.map(|p| p * scale);
                for b in 0..n {
                    for p in 0..hw {
                        let k = targets[b * hw + p];
                        dx.data_mut()[(b * c + k) * hw + p] -= scale;
                    }
                }
                acc(*logits, dx);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store` that took part in `graph`.
    pub fn for_store<'a>(
        &'a self,
        graph: &Graph,
        store: &ParamStore,
    ) -> Vec<(ParamId, &'a Tensor)> {
        let mut out: Vec<_> = graph
            .params
            .iter()
            .filter(|((uid, _), _)| *uid == store.uid())
            .filter_map(|((_, id), v)| self.wrt(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Shape {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

fn strides(s: Shape, out: Shape) -> [usize; 4] {
    let full = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut r = [0; 4];
    for d in 0..4 {
        r[d] = if s[d] == out[d] { full[d] } else { 0 };
    }
    r
}

fn dot(idx: [usize; 4], s: [usize; 4]) -> usize {
    idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] + idx[3] * s[3]
}

fn for_each_index(shape: Shape, mut f: impl FnMut(usize, [usize; 4])) {
    let mut i = 0;
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            for y in 0..shape[2] {
                for x in 0..shape[3] {
                    f(i, [n, c, y, x]);
                    i += 1;
                }
            }
        }
    }
}
