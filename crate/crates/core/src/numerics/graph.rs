//! Append-order compute graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse append order once, so a graph can be differentiated only
//! once; the next forward pass builds a fresh [`Graph`].

use super::tensor::{axis_split, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Affine(Var, f64),
    Relu(Var),
    Log(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ChannelBias(Var, Var),
    MaskedMean {
        x: Var,
        active: Vec<usize>,
        plane: usize,
    },
    CosineMap {
        feat: Var,
        proto: Var,
        eps: f64,
    },
    MatVec(Var, Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Nll {
        logp: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch() * p];
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.w_out + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = iy as usize * self.w;
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[base + ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha · a (m×k) · b (k×n) + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k > 0 {
        debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: bounds are checked above for the strided extents touched by dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward trace and its reverse pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    differentiated: bool,
}

impl Graph {
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

    /// Adds a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Adds a constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Smallest distance from any traced piecewise op to its switching point:
    /// relu inputs to 0, clamp inputs to the floor, and the top-two gap of a max.
    /// Only nodes on a gradient path count. Returns infinity when there are none.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) if self.rg(*x) => {
                    for v in self.nodes[x.0].value.data() {
                        m = m.min(v.abs());
                    }
                }
                Op::ClampMin(x, lo) if self.rg(*x) => {
                    for v in self.nodes[x.0].value.data() {
                        m = m.min((v - lo).abs());
                    }
                }
                Op::MaxAxis { x, axis, argmax } if self.rg(*x) => {
                    let v = &self.nodes[x.0].value;
                    let Ok((_, len, inner)) = axis_split(v.shape(), *axis) else {
                        continue;
                    };
                    let d = v.data();
                    for &best in argmax {
                        let (o, i) = (best / (len * inner), best % inner);
                        for a in 0..len {
                            let j = (o * len + a) * inner + i;
                            if j != best {
                                m = m.min(d[best] - d[j]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        m
    }

    /// Gradient of the differentiated loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.numel() != c.len() {
            return shape_err(format!("mul_const: {} values vs {}", v.numel(), c.len()));
        }
        let data = v.data().iter().zip(c).map(|(a, b)| a * b).collect();
        let value = Tensor::new(v.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst(x, c.to_vec()), rg))
    }

    /// `scale * x + offset`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + offset)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// `max(x, min)` elementwise; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.unary(x, Op::ClampMin(x, min), |v| v.max(min))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.numel() != weights.len() {
            return shape_err(format!(
                "weighted_sum: {} values vs {} weights",
                v.numel(),
                weights.len()
            ));
        }
        let s = v.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum(x, weights.to_vec()),
            rg,
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let (outer, len, inner) = axis_split(v.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for a in 0..len {
                let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (t, s) in dst.iter_mut().zip(src) {
                    *t += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumAxis { x, axis }, rg))
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let (outer, len, inner) = axis_split(v.shape(), axis)?;
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| out[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (out[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] /= z;
                }
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let (outer, len, inner) = axis_split(v.shape(), axis)?;
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| out[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|a| (out[idx(a)] - m).exp()).sum();
                let lse = m + z.ln();
                for a in 0..len {
                    out[idx(a)] -= lse;
                }
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax { x, axis }, rg))
    }

    /// Maximum along `axis`; ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let (outer, len, inner) = axis_split(v.shape(), axis)?;
        if len == 0 {
            return shape_err("max_axis over empty axis");
        }
        let d = v.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for a in 1..len {
                    let j = (o * len + a) * inner + i;
                    if d[j] > d[best] {
                        best = j;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxAxis { x, axis, argmax }, rg))
    }

    /// Cross-correlation of `x [C_in×H×W]` with `kernel [C_out×C_in×k×k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return shape_err(format!("conv2d: input {xs:?}, kernel {ks:?}"));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c_in || kh != kw || kh % 2 == 0 || stride == 0 {
            return shape_err(format!(
                "conv2d: input {xs:?} incompatible with kernel {ks:?} (stride {stride})"
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err(format!("conv2d: kernel {kh} larger than padded input {xs:?}"));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = geom.im2col(self.value(x).data());
        let p = geom.positions();
        let mut out = vec![0.0; c_out * p];
        gemm(
            c_out,
            geom.patch(),
            p,
            self.value(kernel).data(),
            (geom.patch(), 1),
            &cols,
            (p, 1),
            0.0,
            &mut out,
        );
        let value = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of `x [C×…]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || self.shape(bias) != [xs[0]] {
            return shape_err(format!(
                "channel_bias: input {xs:?}, bias {:?}",
                self.shape(bias)
            ));
        }
        let c = xs[0];
        let plane = self.value(x).numel() / c.max(1);
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (ch, chunk) in value.data_mut().chunks_mut(plane.max(1)).enumerate().take(c) {
            for v in chunk {
                *v += b[ch];
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::ChannelBias(x, bias), rg))
    }

    /// Per-channel mean of `x [C×…]` over the active spatial positions.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return shape_err("masked_mean on scalar");
        }
        let c = xs[0];
        let plane: usize = xs[1..].iter().product();
        if mask.len() != plane {
            return shape_err(format!(
                "masked_mean: mask of {} for spatial size {plane}",
                mask.len()
            ));
        }
        let active: Vec<usize> = (0..plane).filter(|&i| mask[i]).collect();
        if active.is_empty() {
            return Err(Error::EmptyRegion("masked_mean over empty mask".into()));
        }
        let n = active.len() as f64;
        let d = self.value(x).data();
        let out: Vec<f64> = (0..c)
            .map(|ch| active.iter().map(|&i| d[ch * plane + i]).sum::<f64>() / n)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::MaskedMean { x, active, plane },
            rg,
        ))
    }

    /// Cosine similarity between every spatial column of `feat [C×…]` and `proto [C]`.
    ///
    /// The denominator `‖f‖·‖p‖` is clamped below by `eps`.
    pub fn cosine_map(&mut self, feat: Var, proto: Var, eps: f64) -> Result<Var> {
        let fs = self.shape(feat).to_vec();
        if fs.is_empty() || self.shape(proto) != [fs[0]] {
            return shape_err(format!(
                "cosine_map: features {fs:?}, prototype {:?}",
                self.shape(proto)
            ));
        }
        let c = fs[0];
        let plane: usize = fs[1..].iter().product();
        let f = self.value(feat).data();
        let p = self.value(proto).data();
        let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut dots = vec![0.0; plane];
        let mut norms = vec![0.0; plane];
        for ch in 0..c {
            let row = &f[ch * plane..(ch + 1) * plane];
            let pc = p[ch];
            for i in 0..plane {
                dots[i] += row[i] * pc;
                norms[i] += row[i] * row[i];
            }
        }
        let out: Vec<f64> = dots
            .iter()
            .zip(&norms)
            .map(|(d, n2)| d / (n2.sqrt() * pn).max(eps))
            .collect();
        let value = Tensor::new(&fs[1..], out)?;
        let rg = self.rg(feat) || self.rg(proto);
        Ok(self.push(value, Op::CosineMap { feat, proto, eps }, rg))
    }

    /// Cosine similarity of two vectors as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 1 || sa[0] == 0 {
            return shape_err(format!("cosine_similarity: operand shape {sa:?}"));
        }
        let col = self.reshape(a, &[sa[0], 1])?;
        let map = self.cosine_map(col, b, eps)?;
        self.reshape(map, &[])
    }

    /// `W [m×n] · x [n] -> [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || self.shape(x) != [ws[1]] {
            return shape_err(format!(
                "matvec: matrix {ws:?}, vector {:?}",
                self.shape(x)
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..m)
            .map(|i| wd[i * n..(i + 1) * n].iter().zip(xd).map(|(a, b)| a * b).sum())
            .collect();
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Tensor::from_vec(out), Op::MatVec(w, x), rg))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.iter().any(|&p| self.shape(p).len() != 1) {
            return shape_err("concat expects vectors");
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return shape_err("stack of nothing"),
        };
        if parts.iter().any(|&p| self.shape(p) != first.as_slice()) {
            return shape_err("stack expects equal shapes");
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `-Σ_p w_p · logp[t_p, p]` for `logp [K×…]` with one target class per position.
    pub fn nll(&mut self, logp: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let ls = self.shape(logp).to_vec();
        if ls.is_empty() {
            return shape_err("nll on scalar");
        }
        let k = ls[0];
        let plane: usize = ls[1..].iter().product();
        if targets.len() != plane || weights.len() != plane {
            return shape_err(format!(
                "nll: {} targets / {} weights for {plane} positions",
                targets.len(),
                weights.len()
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return shape_err(format!("nll: target {t} out of range for {k} classes"));
        }
        let d = self.value(logp).data();
        let s: f64 = (0..plane)
            .filter(|&p| weights[p] != 0.0)
            .map(|p| -weights[p] * d[targets[p] * plane + p])
            .sum();
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::State(
                "backward already ran on this graph; trace a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(t, v)| *t -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * va[j];
                    }
                });
            }
            Op::MulConst(x, c) => acc(*x, &mut |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * c[j];
                }
            }),
            Op::Affine(x, scale) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(t, v)| *t += scale * v)
            }),
            Op::Relu(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        if vx[j] > 0.0 {
                            s[j] += g[j];
                        }
                    }
                })
            }
            Op::Log(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] / vx[j];
                    }
                })
            }
            Op::Softplus(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] * sigmoid(vx[j]);
                    }
                })
            }
            Op::ClampMin(x, min) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for j in 0..s.len() {
                        if vx[j] > *min {
                            s[j] += g[j];
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|t| *t += g[0])),
            Op::WeightedSum(x, w) => acc(*x, &mut |s| {
                s.iter_mut().zip(w).for_each(|(t, wj)| *t += g[0] * wj)
            }),
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) =
                    axis_split(nodes[x.0].value.shape(), *axis).expect("checked in forward");
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for a in 0..len {
                            let dst = &mut s[(o * len + a) * inner..(o * len + a + 1) * inner];
                            add_into(dst, &g[o * inner..(o + 1) * inner]);
                        }
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis).expect("checked");
                let y = out.data();
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + ii;
                            let dot: f64 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                            for a in 0..len {
                                s[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis).expect("checked");
                let y = out.data();
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + ii;
                            let gs: f64 = (0..len).map(|a| g[idx(a)]).sum();
                            for a in 0..len {
                                s[idx(a)] += g[idx(a)] - y[idx(a)].exp() * gs;
                            }
                        }
                    }
                })
            }
            Op::MaxAxis { x, argmax, .. } => acc(*x, &mut |s| {
                for (j, &src) in argmax.iter().enumerate() {
                    s[src] += g[j];
                }
            }),
            Op::Conv2d {
                x,
                kernel,
                geom,
                cols,
            } => {
                let p = geom.positions();
                let patch = geom.patch();
                acc(*kernel, &mut |s| {
                    // dK += dY · colsᵀ
                    gemm(geom.c_out, p, patch, g, (p, 1), cols, (1, p), 1.0, s);
                });
                if wants(*x) {
                    let kd = nodes[kernel.0].value.data();
                    let mut dcols = vec![0.0; patch * p];
                    // dcols = Kᵀ · dY
                    gemm(patch, geom.c_out, p, kd, (1, patch), g, (p, 1), 0.0, &mut dcols);
                    acc(*x, &mut |s| geom.col2im_add(&dcols, s));
                }
            }
            Op::ChannelBias(x, b) => {
                acc(*x, &mut |s| add_into(s, g));
                let c = nodes[b.0].value.numel();
                let plane = g.len() / c.max(1);
                acc(*b, &mut |s| {
                    for (ch, t) in s.iter_mut().enumerate() {
                        *t += g[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                    }
                })
            }
            Op::MaskedMean { x, active, plane } => {
                let n = active.len() as f64;
                acc(*x, &mut |s| {
                    for (ch, gc) in g.iter().enumerate() {
                        for &p in active {
                            s[ch * plane + p] += gc / n;
                        }
                    }
                })
            }
            Op::CosineMap { feat, proto, eps } => {
                let f = nodes[feat.0].value.data();
                let p = nodes[proto.0].value.data();
                let c = p.len();
                let plane = f.len() / c;
                let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                let y = out.data();
                let mut fnorm = vec![0.0; plane];
                for ch in 0..c {
                    for i in 0..plane {
                        fnorm[i] += f[ch * plane + i] * f[ch * plane + i];
                    }
                }
                fnorm.iter_mut().for_each(|v| *v = v.sqrt());
                // Per position: cos = dot / D with D = max(|f||p|, eps).
                // Unclamped: dcos/df = p/D - cos f/|f|², dcos/dp = f/D - cos p/|p|².
                let clamped: Vec<bool> = fnorm.iter().map(|n| n * pn < *eps).collect();
                let denom: Vec<f64> = fnorm.iter().map(|n| (n * pn).max(*eps)).collect();
                acc(*feat, &mut |s| {
                    for ch in 0..c {
                        for i in 0..plane {
                            let fi = f[ch * plane + i];
                            let mut d = p[ch] / denom[i];
                            if !clamped[i] {
                                d -= y[i] * fi / (fnorm[i] * fnorm[i]);
                            }
                            s[ch * plane + i] += g[i] * d;
                        }
                    }
                });
                acc(*proto, &mut |s| {
                    for ch in 0..c {
                        let mut t = 0.0;
                        for i in 0..plane {
                            let fi = f[ch * plane + i];
                            let mut d = fi / denom[i];
                            if !clamped[i] {
                                d -= y[i] * p[ch] / (pn * pn);
                            }
                            t += g[i] * d;
                        }
                        s[ch] += t;
                    }
                });
            }
            Op::MatVec(w, x) => {
                let wd = nodes[w.0].value.data();
                let xd = nodes[x.0].value.data();
                let n = xd.len();
                acc(*w, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..n {
                            s[i * n + j] += gi * xd[j];
                        }
                    }
                });
                acc(*x, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        for j in 0..n {
                            s[j] += wd[i * n + j] * gi;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &part in parts {
                    let n = nodes[part.0].value.numel();
                    acc(part, &mut |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Nll {
                logp,
                targets,
                weights,
            } => {
                let plane = targets.len();
                acc(*logp, &mut |s| {
                    for p in 0..plane {
                        s[targets[p] * plane + p] -= g[0] * weights[p];
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(t, v)| *t += v);
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_graph(values: &[f64]) -> (Graph, Var) {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(values.to_vec()));
        (g, x)
    }

    #[test]
    fn softmax_examples() {
        let (mut g, x) = vec_graph(&[0.0, 0.0]);
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let (mut g, x) = vec_graph(&[1.0, 1.0, 1.0]);
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let (mut g, x) = vec_graph(&[0.0, 3f64.ln()]);
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_axis_and_survives_huge_logits() {
        let (mut g, x) = vec_graph(&[1000.0, 0.0]);
        assert!(matches!(g.softmax(x, 1), Err(Error::Shape(_))));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).all_finite());
        assert_eq!(g.value(y).data()[0], 1.0);
    }

    #[test]
    fn conv_identity_zero_and_average() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 4 * 4).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = g.constant(Tensor::new(&[2, 4, 4], data.clone()).unwrap());
        let mut ident = Tensor::zeros(&[2, 2, 1, 1]);
        ident.data_mut()[0] = 1.0;
        ident.data_mut()[3] = 1.0;
        let k = g.constant(ident);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());

        let kz = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let y = g.conv2d(x, kz, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let c7 = g.constant(Tensor::full(&[1, 5, 5], 7.0));
        let avg = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = g.conv2d(c7, avg, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        for v in g.value(y).data() {
            assert!((v - 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_stride_two_halves_resolution() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 64, 64]));
        let k = g.constant(Tensor::zeros(&[4, 1, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[4, 32, 32]);
        let bad = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(matches!(g.conv2d(x, bad, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_mean_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 2], vec![2.0, 9.0, 4.0, 9.0]).unwrap());
        let m = g.masked_mean(x, &[true, false, true, false]).unwrap();
        assert_eq!(g.value(m).data(), &[3.0]);
        assert!(matches!(
            g.masked_mean(x, &[false; 4]),
            Err(Error::EmptyRegion(_))
        ));
        let full = g.masked_mean(x, &[true; 4]).unwrap();
        assert_eq!(g.value(full).data(), &[6.0]);
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let b = g.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let o = g.constant(Tensor::from_vec(vec![0.0, 1.0]));
        let c = g.cosine_similarity(a, b, 1e-8).unwrap();
        assert!((g.value(c).item() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let c = g.cosine_similarity(a, o, 1e-8).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
        let c = g.cosine_similarity(b, b, 1e-8).unwrap();
        assert!((g.value(c).item() - 1.0).abs() < 1e-15);
        let z = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let c = g.cosine_similarity(z, b, 1e-8).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[2, 3], vec![0.3; 6]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_pass() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let c = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn max_axis_ties_pick_lowest_index() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3, 1], vec![0.2, 0.2, 0.1]).unwrap());
        let m = g.max_axis(x, 0).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn kink_margin_tracks_switch_points() {
        let mut g = Graph::new();
        assert_eq!(g.kink_margin(), f64::INFINITY);
        let x = g.param(Tensor::from_vec(vec![-0.5, 0.03, 2.0]));
        g.relu(x);
        assert!((g.kink_margin() - 0.03).abs() < 1e-15);
        let p = g.param(Tensor::new(&[3, 1], vec![0.2, 0.21, 0.1]).unwrap());
        g.max_axis(p, 0).unwrap();
        assert!((g.kink_margin() - 0.01).abs() < 1e-12);
        let c = g.constant(Tensor::from_vec(vec![0.0]));
        g.relu(c);
        assert!((g.kink_margin() - 0.01).abs() < 1e-12);
    }
}
