//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its forward value and a record of
//! its inputs. Nodes are only ever appended, so the tape is in topological
//! order by construction and [`Tape::backward`] is a single reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability clamp used by [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    ScalarMul(usize, f64),
    Mul(usize, usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>),
    Channel { src: usize, index: usize },
    Relu(usize),
    Sigmoid(usize),
    Bce { prob: usize, target: usize },
    Conv { input: usize, kernel: usize, bias: usize, geom: ConvGeom },
    // `geom` describes the forward convolution whose data gradient this is.
    ConvTranspose { input: usize, kernel: usize, bias: usize, geom: ConvGeom },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Recording of a computation, owning every intermediate value.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.idx(v)?;
        let value = self.nodes[i].value.clone();
        Ok(self.constant(value))
    }

    /// Forward value of `v`.
    ///
    /// Panics if `v` was recorded on another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("variable from another tape")].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.idx(v).ok().and_then(|i| self.nodes[i].grad.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let i = self.idx(v).ok()?;
        self.nodes[i].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Clears all gradients so that [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(value.shape().iter().product::<usize>() == value.len());
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.map(f);
        let rg = self.rg(&[i]);
        Ok(self.push(value, rg, op(i)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        va.check_same_shape(vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, rg, Op::Add(ia, ib)))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |x| x * s, |i| Op::ScalarMul(i, s))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        va.check_same_shape(vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, rg, Op::Mul(ia, ib)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let value = Tensor::scalar(self.nodes[i].value.sum());
        let rg = self.rg(&[i]);
        Ok(self.push(value, rg, Op::Sum(i)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let v = &self.nodes[i].value;
        if v.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(&[i]);
        Ok(self.push(value, rg, Op::Mean(i)))
    }

    /// Concatenates `[C_i, ...]` tensors along the leading (channel) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[*ids.first().ok_or(Error::Empty("concat input"))?].value.shape();
        let rest = first.get(1..).ok_or_else(|| Error::shape("concat_channels", "scalar input"))?.to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &i in &ids {
            let v = &self.nodes[i].value;
            if v.shape().len() != rest.len() + 1 || v.shape()[1..] != rest[..] {
                return Err(Error::shape(
                    "concat_channels",
                    format!("trailing dims {:?} do not match {:?}", &v.shape()[1.min(v.shape().len())..], rest),
                ));
            }
            channels += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&rest);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&ids);
        Ok(self.push(value, rg, Op::Concat(ids)))
    }

    /// Channel `index` of a `[C, ...]` tensor.
    pub fn channel(&mut self, x: Var, index: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.channel(index)?;
        let rg = self.rg(&[i]);
        Ok(self.push(value, rg, Op::Channel { src: i, index }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    /// Mean binary cross-entropy of probabilities against a binary target.
    ///
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`; the gradient is
    /// zero where the clamp is active.
    pub fn bce(&mut self, prob: Var, target: Var) -> Result<Var> {
        let (ip, it) = (self.idx(prob)?, self.idx(target)?);
        let (p, t) = (&self.nodes[ip].value, &self.nodes[it].value);
        p.check_same_shape(t, "bce")?;
        if let Some((index, value)) = t.first_non_binary() {
            return Err(Error::NonBinary { op: "bce", index, value });
        }
        if p.is_empty() {
            return Err(Error::Empty("bce input"));
        }
        let value = Tensor::scalar(bce_value(p.data(), t.data()));
        let rg = self.rg(&[ip]);
        Ok(self.push(value, rg, Op::Bce { prob: ip, target: it }))
    }

    /// Strided, zero-padded 3D cross-correlation.
    ///
    /// `input: [C_in, D, H, W]`, `kernel: [C_out, C_in, k, k, k]` with odd `k`,
    /// `bias: [C_out]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ii, ik, ib) = (self.idx(input)?, self.idx(kernel)?, self.idx(bias)?);
        let x = &self.nodes[ii].value;
        let w = &self.nodes[ik].value;
        let b = &self.nodes[ib].value;
        let [c_in, d, h, wd] = x.dims4("conv3d")?;
        let (c_out, wc_in, k) = kernel_dims(w, "conv3d")?;
        if k % 2 == 0 {
            return Err(Error::shape("conv3d", format!("kernel size {k} must be odd")));
        }
        if wc_in != c_in {
            return Err(Error::shape("conv3d", format!("input has {c_in} channels but kernel expects {wc_in}")));
        }
        check_bias(b, c_out, "conv3d")?;
        if stride == 0 {
            return Err(Error::shape("conv3d", "stride must be positive"));
        }
        let mut output = [0usize; 3];
        for (axis, (&n, o)) in ["depth", "height", "width"].iter().zip([d, h, wd].iter().zip(output.iter_mut())) {
            *o = conv::conv_out_len(n, k, stride, padding).ok_or_else(|| {
                Error::shape(
                    "conv3d",
                    format!("{axis} {n} with padding {padding} is smaller than kernel size {k}"),
                )
            })?;
        }
        let geom = ConvGeom { c_in, c_out, k, stride, pad: padding, input: [d, h, wd], output };
        let vox: usize = output.iter().product();
        let mut out = Vec::with_capacity(c_out * vox);
        for &bv in b.data() {
            out.extend(core::iter::repeat_n(bv, vox));
        }
        conv::forward(&geom, x.data(), w.data(), &mut out);
        let value = Tensor::new(vec![c_out, output[0], output[1], output[2]], out)?;
        let rg = self.rg(&[ii, ik, ib]);
        Ok(self.push(value, rg, Op::Conv { input: ii, kernel: ik, bias: ib, geom }))
    }

    /// Transposed 3D convolution (the data gradient of [`Tape::conv3d`] used
    /// as a forward operation).
    ///
    /// `input: [C_in, D, H, W]`, `kernel: [C_in, C_out, k, k, k]`,
    /// `bias: [C_out]`; output spatial size is `(D - 1) * stride - 2 * padding + k`.
    pub fn conv3d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ii, ik, ib) = (self.idx(input)?, self.idx(kernel)?, self.idx(bias)?);
        let x = &self.nodes[ii].value;
        let w = &self.nodes[ik].value;
        let b = &self.nodes[ib].value;
        let [c_in, d, h, wd] = x.dims4("conv3d_transpose")?;
        let (wc_in, c_out, k) = kernel_dims(w, "conv3d_transpose")?;
        if wc_in != c_in {
            return Err(Error::shape(
                "conv3d_transpose",
                format!("input has {c_in} channels but kernel expects {wc_in}"),
            ));
        }
        check_bias(b, c_out, "conv3d_transpose")?;
        if stride == 0 {
            return Err(Error::shape("conv3d_transpose", "stride must be positive"));
        }
        let mut output = [0usize; 3];
        for (axis, (&n, o)) in ["depth", "height", "width"].iter().zip([d, h, wd].iter().zip(output.iter_mut())) {
            *o = conv::conv_transpose_out_len(n, k, stride, padding).ok_or_else(|| {
                Error::shape(
                    "conv3d_transpose",
                    format!("{axis} {n} gives a non-positive output with stride {stride}, padding {padding}, kernel {k}"),
                )
            })?;
        }
        let geom = ConvGeom { c_in: c_out, c_out: c_in, k, stride, pad: padding, input: output, output: [d, h, wd] };
        let vox: usize = output.iter().product();
        let mut out = Vec::with_capacity(c_out * vox);
        for &bv in b.data() {
            out.extend(core::iter::repeat_n(bv, vox));
        }
        conv::backward_data(&geom, x.data(), w.data(), &mut out);
        let value = Tensor::new(vec![c_out, output[0], output[1], output[2]], out)?;
        let rg = self.rg(&[ii, ik, ib]);
        Ok(self.push(value, rg, Op::ConvTranspose { input: ii, kernel: ik, bias: ib, geom }))
    }

    /// Populates gradients of `loss` with respect to every recorded value that
    /// requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[li].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::Detached);
        }
        self.backward_done = true;
        self.nodes[li].grad = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.as_ref() else { continue };
            let contributions = self.input_grads(i, g)?;
            for (j, c) in contributions {
                self.accumulate(j, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, j: usize, c: Tensor) {
        let node = &mut self.nodes[j];
        match node.grad.as_mut() {
            None => node.grad = Some(c),
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(c.data()) {
                    *e += v;
                }
            }
        }
    }

    /// Gradient contributions of node `i` to those of its inputs that require one.
    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].requires_grad;
        let val = |j: usize| &self.nodes[j].value;
        let mut out = Vec::new();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for j in [a, b] {
                    if needs(j) {
                        out.push((j, g.clone()));
                    }
                }
            }
            Op::ScalarMul(a, s) => {
                if needs(a) {
                    out.push((a, g.map(|x| x * s)));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    out.push((a, zip_with(g, val(b), |gv, y| gv * y)));
                }
                if needs(b) {
                    out.push((b, zip_with(g, val(a), |gv, x| gv * x)));
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    out.push((a, Tensor::full(val(a).shape(), g.item())));
                }
            }
            Op::Mean(a) => {
                if needs(a) {
                    let n = val(a).len() as f64;
                    out.push((a, Tensor::full(val(a).shape(), g.item() / n)));
                }
            }
            Op::Concat(ref ids) => {
                let mut offset = 0;
                for &j in ids {
                    let n = val(j).len();
                    if needs(j) {
                        out.push((j, Tensor::new(val(j).shape().to_vec(), g.data()[offset..offset + n].to_vec())?));
                    }
                    offset += n;
                }
            }
            Op::Channel { src, index } => {
                if needs(src) {
                    let mut full = Tensor::zeros(val(src).shape());
                    let n = g.len();
                    full.data_mut()[index * n..(index + 1) * n].copy_from_slice(g.data());
                    out.push((src, full));
                }
            }
            Op::Relu(a) => {
                if needs(a) {
                    out.push((a, zip_with(g, val(a), |gv, x| if x > 0.0 { gv } else { 0.0 })));
                }
            }
            Op::Sigmoid(a) => {
                if needs(a) {
                    out.push((a, zip_with(g, &node.value, |gv, y| gv * y * (1.0 - y))));
                }
            }
            Op::Bce { prob, target } => {
                if needs(prob) {
                    let p = val(prob);
                    let t = val(target);
                    let scale = g.item() / p.len() as f64;
                    let data = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&p, &t)| {
                            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                                0.0
                            } else {
                                scale * ((1.0 - t) / (1.0 - p) - t / p)
                            }
                        })
                        .collect();
                    out.push((prob, Tensor::new(p.shape().to_vec(), data)?));
                }
            }
            Op::Conv { input, kernel, bias, geom } => {
                if needs(input) {
                    let mut gi = Tensor::zeros(val(input).shape());
                    conv::backward_data(&geom, g.data(), val(kernel).data(), gi.data_mut());
                    out.push((input, gi));
                }
                if needs(kernel) {
                    let mut gk = Tensor::zeros(val(kernel).shape());
                    conv::backward_kernel(&geom, val(input).data(), g.data(), gk.data_mut());
                    out.push((kernel, gk));
                }
                if needs(bias) {
                    out.push((bias, channel_sums(g, geom.c_out)));
                }
            }
            Op::ConvTranspose { input, kernel, bias, geom } => {
                // geom.input is this op's output grid; geom.output its input grid.
                if needs(input) {
                    let mut gi = Tensor::zeros(val(input).shape());
                    conv::forward(&geom, g.data(), val(kernel).data(), gi.data_mut());
                    out.push((input, gi));
                }
                if needs(kernel) {
                    let mut gk = Tensor::zeros(val(kernel).shape());
                    conv::backward_kernel(&geom, g.data(), val(input).data(), gk.data_mut());
                    out.push((kernel, gk));
                }
                if needs(bias) {
                    out.push((bias, channel_sums(g, geom.c_in)));
                }
            }
        }
        Ok(out)
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn bce_value(p: &[f64], t: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p))
        })
        .sum();
    total / p.len() as f64
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_with on equal shapes")
}

fn channel_sums(g: &Tensor, channels: usize) -> Tensor {
    let per = g.len() / channels;
    Tensor::from_fn(&[channels], |c| g.data()[c * per..(c + 1) * per].iter().sum())
}

fn kernel_dims(w: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *w.shape() {
        [a, b, k0, k1, k2] if k0 == k1 && k1 == k2 && k0 > 0 => Ok((a, b, k0)),
        _ => Err(Error::shape(op, format!("kernel must be [C, C, k, k, k] with a cubic window, got {:?}", w.shape()))),
    }
}

fn check_bias(b: &Tensor, c_out: usize, op: &'static str) -> Result<()> {
    if b.shape() != [c_out] {
        return Err(Error::shape(op, format!("bias shape {:?} does not match {c_out} output channels", b.shape())));
    }
    Ok(())
}
