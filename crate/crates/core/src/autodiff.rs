//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! The op set is exactly what the victim denoiser and the attack losses need:
//! 3x3 convolutions, pooling, token reshapes, matrix products, row softmax and
//! a few reductions. Values are `f64` so finite-difference checks stay tight.

use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Conv3x3 { x: Var, w: Var, b: Var },
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    ChannelsToTokens(Var),
    TokensToChannels(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    SoftmaxRows(Var),
    SumSquares(Var),
    ColumnVariance(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A linear record of operations, evaluated eagerly.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every recorded value that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [C, H, W], got {s:?}");
    (s[0], s[1], s[2])
}

fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected [rows, cols], got {s:?}");
    (s[0], s[1])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Valid output range for a shifted 3x3 tap along one axis.
#[inline]
fn tap_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset.max(0)) as usize;
    (lo, hi)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Same-padded 3x3 convolution. `x: [Ci,H,W]`, `w: [Co,Ci,3,3]`, `b: [Co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (ci, h, wd) = dims3(xv);
        let co = wv.shape()[0];
        assert_eq!(wv.shape(), &[co, ci, 3, 3], "conv weight shape");
        assert_eq!(bv.len(), co, "conv bias length");
        let plane = h * wd;
        let (xd, wdat) = (xv.data(), wv.data());
        let mut out = vec![0.0; co * plane];
        for o in 0..co {
            let oc = &mut out[o * plane..(o + 1) * plane];
            oc.fill(bv.data()[o]);
            for i in 0..ci {
                let xc = &xd[i * plane..(i + 1) * plane];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = tap_range(wd, dx);
                        let k = wdat[((o * ci + i) * 3 + ky) * 3 + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut oc[y * wd + x0..y * wd + x1];
                            let start = (sy * wd + x0) as isize + dx;
                            let srow = &xc[start as usize..start as usize + (x1 - x0)];
                            for (ov, sv) in orow.iter_mut().zip(srow) {
                                *ov += k * sv;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![co, h, wd], out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv3x3 { x, w, b }, rg)
    }

    /// Adds `b[c]` to every element of channel `c` of a `[C,H,W]` value.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let (c, h, w) = dims3(xv);
        assert_eq!(bv.len(), c, "channel bias length");
        let plane = h * w;
        let mut out = xv.data().to_vec();
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            let bias = bv.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let out = Tensor::from_parts(vec![c, h, w], out);
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddChannelBias(x, b), rg)
    }

    /// Adds `b[j]` to column `j` of a `[rows, cols]` value.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let (r, c) = dims2(xv);
        assert_eq!(bv.len(), c, "row bias length");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (v, bias) in row.iter_mut().zip(bv.data()) {
                *v += bias;
            }
        }
        let out = Tensor::from_parts(vec![r, c], out);
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddRowBias(x, b), rg)
    }

    /// 2x2 average pooling of a `[C,H,W]` value with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] = 0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                }
            }
        }
        let out = Tensor::from_parts(vec![c, oh, ow], out);
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2(x), rg)
    }

    /// Nearest-neighbour 2x upsampling of a `[C,H,W]` value.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let (oh, ow) = (2 * h, 2 * w);
        let d = xv.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = d[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_parts(vec![c, oh, ow], out);
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (ca, h, w) = dims3(va);
        let (cb, hb, wb) = dims3(vb);
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::from_parts(vec![ca + cb, h, w], data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatChannels(a, b), rg)
    }

    /// `[C,H,W]` to `[H*W, C]`: one row per spatial position.
    pub fn channels_to_tokens(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = dims3(xv);
        let q = h * w;
        let d = xv.data();
        let mut out = vec![0.0; q * c];
        for ch in 0..c {
            for p in 0..q {
                out[p * c + ch] = d[ch * q + p];
            }
        }
        let out = Tensor::from_parts(vec![q, c], out);
        let rg = self.rg(x);
        self.push(out, Op::ChannelsToTokens(x), rg)
    }

    /// `[H*W, C]` back to `[C,H,W]`.
    pub fn tokens_to_channels(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (q, c) = dims2(xv);
        assert_eq!(q, h * w, "token count does not match spatial size");
        let d = xv.data();
        let mut out = vec![0.0; q * c];
        for p in 0..q {
            for ch in 0..c {
                out[ch * q + p] = d[p * c + ch];
            }
        }
        let out = Tensor::from_parts(vec![c, h, w], out);
        let rg = self.rg(x);
        self.push(out, Op::TokensToChannels(x), rg)
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = dims2(va);
        let (kb, n) = dims2(vb);
        assert_eq!(k, kb, "matmul inner dim");
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `[m,k] x [n,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = dims2(va);
        let (n, kb) = dims2(vb);
        assert_eq!(k, kb, "matmul_nt inner dim");
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    /// Numerically stable softmax over each row of a `[rows, cols]` value.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = dims2(xv);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::from_parts(vec![r, c], out);
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Sum of squared elements, as a one-element value.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_squares());
        let rg = self.rg(x);
        self.push(out, Op::SumSquares(x), rg)
    }

    /// Population variance of every column of a `[rows, cols]` value, averaged over columns.
    pub fn column_variance(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = dims2(xv);
        let d = xv.data();
        let means = column_means(d, r, c);
        let mut total = 0.0;
        for row in d.chunks(c) {
            for (v, m) in row.iter().zip(&means) {
                total += (v - m) * (v - m);
            }
        }
        let out = Tensor::scalar(total / (r * c) as f64);
        let rg = self.rg(x);
        self.push(out, Op::ColumnVariance(x), rg)
    }

    /// Sum of several one-element values.
    pub fn sum_scalars(&mut self, vars: &[Var]) -> Var {
        let (first, rest) = vars.split_first().expect("sum_scalars needs a value");
        rest.iter().fold(*first, |acc, &v| self.add(acc, v))
    }

    /// Gradients of the one-element `root` with respect to all values requiring them.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&contribution, 1.0),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::Scale(a, f) => self.accumulate(grads, a, g.map(|v| v * f)),
            Op::Silu(a) => {
                let x = self.value(a);
                let data = x
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, a, Tensor::from_parts(x.shape().to_vec(), data));
            }
            Op::Conv3x3 { x, w, b } => self.conv3x3_backward(x, w, b, g, grads),
            Op::AddChannelBias(x, b) => {
                self.accumulate(grads, x, g.clone());
                if self.rg(b) {
                    let c = self.value(b).len();
                    let plane = g.len() / c;
                    let data = gd.chunks(plane).map(|ch| ch.iter().sum()).collect();
                    let shape = self.value(b).shape().to_vec();
                    self.accumulate(grads, b, Tensor::from_parts(shape, data));
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, x, g.clone());
                if self.rg(b) {
                    let c = self.value(b).len();
                    let mut data = vec![0.0; c];
                    for row in gd.chunks(c) {
                        data.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    let shape = self.value(b).shape().to_vec();
                    self.accumulate(grads, b, Tensor::from_parts(shape, data));
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = dims3(self.value(x));
                let (oh, ow) = (h / 2, w / 2);
                let mut data = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            data[(ch * h + y) * w + xx] = 0.25 * gd[(ch * oh + y / 2) * ow + xx / 2];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![c, h, w], data));
            }
            Op::Upsample2(x) => {
                let (c, h, w) = dims3(self.value(x));
                let (oh, ow) = (2 * h, 2 * w);
                let mut data = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            data[(ch * h + y / 2) * w + xx / 2] += gd[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![c, h, w], data));
            }
            Op::ConcatChannels(a, b) => {
                let va = self.value(a);
                let split = va.len();
                let ga = Tensor::from_parts(va.shape().to_vec(), gd[..split].to_vec());
                let gb = Tensor::from_parts(self.value(b).shape().to_vec(), gd[split..].to_vec());
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::ChannelsToTokens(x) => {
                let (c, h, w) = dims3(self.value(x));
                let q = h * w;
                let mut data = vec![0.0; c * q];
                for p in 0..q {
                    for ch in 0..c {
                        data[ch * q + p] = gd[p * c + ch];
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![c, h, w], data));
            }
            Op::TokensToChannels(x) => {
                let (q, c) = dims2(self.value(x));
                let mut data = vec![0.0; q * c];
                for ch in 0..c {
                    for p in 0..q {
                        data[p * c + ch] = gd[ch * q + p];
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![q, c], data));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = dims2(va);
                let n = vb.shape()[1];
                let (ad, bd) = (va.data(), vb.data());
                if self.rg(a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = grow.iter().zip(&bd[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = dims2(va);
                let n = vb.shape()[0];
                let (ad, bd) = (va.data(), vb.data());
                if self.rg(a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let row = &mut ga[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = gd[i * n + j];
                            for (o, bv) in row.iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                *o += gv * bv;
                            }
                        }
                    }
                    self.accumulate(grads, a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; n * k];
                    for i in 0..m {
                        let arow = &ad[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = gd[i * n + j];
                            for (o, av) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *o += gv * av;
                            }
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_parts(vec![n, k], gb));
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (r, c) = dims2(y);
                let mut data = vec![0.0; r * c];
                for ((out, yr), gr) in data.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![r, c], data));
            }
            Op::SumSquares(x) => {
                let s = 2.0 * gd[0];
                self.accumulate(grads, x, self.value(x).map(|v| s * v));
            }
            Op::ColumnVariance(x) => {
                let xv = self.value(x);
                let (r, c) = dims2(xv);
                let means = column_means(xv.data(), r, c);
                let s = 2.0 * gd[0] / (r * c) as f64;
                let mut data = xv.data().to_vec();
                for row in data.chunks_mut(c) {
                    for (v, m) in row.iter_mut().zip(&means) {
                        *v = s * (*v - m);
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![r, c], data));
            }
        }
    }

    fn conv3x3_backward(&self, x: Var, w: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (ci, h, wd) = dims3(xv);
        let co = wv.shape()[0];
        let plane = h * wd;
        let (xd, wdat, gd) = (xv.data(), wv.data(), g.data());

        if self.rg(b) {
            let data = gd.chunks(plane).map(|ch| ch.iter().sum()).collect();
            self.accumulate(grads, b, Tensor::from_parts(vec![co], data));
        }
        if self.rg(w) {
            let mut gw = vec![0.0; co * ci * 9];
            for o in 0..co {
                let gc = &gd[o * plane..(o + 1) * plane];
                for i in 0..ci {
                    let xc = &xd[i * plane..(i + 1) * plane];
                    for ky in 0..3 {
                        let dy = ky as isize - 1;
                        let (y0, y1) = tap_range(h, dy);
                        for kx in 0..3 {
                            let dx = kx as isize - 1;
                            let (x0, x1) = tap_range(wd, dx);
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &gc[y * wd + x0..y * wd + x1];
                                let start = ((sy * wd + x0) as isize + dx) as usize;
                                let srow = &xc[start..start + (x1 - x0)];
                                acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gw[((o * ci + i) * 3 + ky) * 3 + kx] = acc;
                        }
                    }
                }
            }
            self.accumulate(grads, w, Tensor::from_parts(vec![co, ci, 3, 3], gw));
        }
        if self.rg(x) {
            let mut gx = vec![0.0; ci * plane];
            for o in 0..co {
                let gc = &gd[o * plane..(o + 1) * plane];
                for i in 0..ci {
                    let xc = &mut gx[i * plane..(i + 1) * plane];
                    for ky in 0..3 {
                        let dy = ky as isize - 1;
                        let (y0, y1) = tap_range(h, dy);
                        for kx in 0..3 {
                            let dx = kx as isize - 1;
                            let (x0, x1) = tap_range(wd, dx);
                            let k = wdat[((o * ci + i) * 3 + ky) * 3 + kx];
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &gc[y * wd + x0..y * wd + x1];
                                let start = ((sy * wd + x0) as isize + dx) as usize;
                                let srow = &mut xc[start..start + (x1 - x0)];
                                for (s, gv) in srow.iter_mut().zip(grow) {
                                    *s += k * gv;
                                }
                            }
                        }
                    }
                }
            }
            self.accumulate(grads, x, Tensor::from_parts(vec![ci, h, wd], gx));
        }
    }
}

fn column_means(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut means = vec![0.0; c];
    for row in d.chunks(c) {
        means.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    means.iter_mut().for_each(|m| *m /= r as f64);
    means
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(root)/d(leaf) for a graph builder.
    fn check(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);
        let h = 1e-5;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[which]).expect("gradient");
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let mut t2 = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, t)| {
                            let mut t = t.clone();
                            if k == which {
                                t.data_mut()[idx] += delta;
                            }
                            t2.leaf(t, true)
                        })
                        .collect();
                    let r = build(&mut t2, &vs);
                    t2.value(r).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {which} idx {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 4, 6], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        check(
            |t, v| {
                let c = t.conv3x3(v[0], v[1], v[2]);
                let s = t.silu(c);
                let p = t.avg_pool2(s);
                let u = t.upsample2(p);
                let cat = t.concat_channels(u, v[0]);
                t.sum_squares(cat)
            },
            vec![x, w, b],
        );
    }

    #[test]
    fn attention_path_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 2, 2], &mut rng);
        let wq = random(&[3, 4], &mut rng);
        let keys = random(&[5, 4], &mut rng);
        let bias = random(&[4], &mut rng);
        check(
            |t, v| {
                let tok = t.channels_to_tokens(v[0]);
                let q = t.matmul(tok, v[1]);
                let q = t.add_row_bias(q, v[3]);
                let s = t.matmul_nt(q, v[2]);
                let p = t.softmax_rows(s);
                let var = t.column_variance(p);
                let o = t.matmul(p, v[2]);
                let back = t.tokens_to_channels(o, 2, 2);
                let bias_c = t.scale(v[3], 0.5);
                let biased = t.add_channel_bias(back, bias_c);
                let sq = t.sum_squares(biased);
                let diff = t.sub(sq, var);
                t.scale(diff, 0.3)
            },
            vec![x, wq, keys, bias],
        );
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[7, 5], &mut rng).map(|v| 40.0 * v));
        let p = tape.softmax_rows(x);
        for row in tape.value(p).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn no_gradient_without_requirement() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(2.0));
        let y = tape.sum_squares(x);
        let grads = tape.backward(y);
        assert!(grads.get(x).is_none());
    }
}
