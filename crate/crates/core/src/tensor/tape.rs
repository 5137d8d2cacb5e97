use super::kernels::{
    bilinear_resize_backward, conv2d_backward, log_softmax_backward, nearest_resize_backward,
    normalize_backward, normalize_forward,
};
use super::{bilinear_resize, conv2d, log_softmax, nearest_resize, Float, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::wavelet::{self, Arrangement};

pub use super::kernels::NormMode;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Float> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SpatialMean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Bilinear(Var),
    Nearest(Var),
    LogSoftmax(Var),
    Normalize {
        input: Var,
        mode: NormMode,
        inv_std: Vec<T>,
    },
    ConcatChannels(Vec<Var>),
    ConcatBatch(Vec<Var>),
    SliceBatch {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Dwt(Var, Arrangement),
    Iwt(Var, Arrangement),
    Arrange {
        input: Var,
        from: Arrangement,
        to: Arrangement,
    },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Set on leaves marked as real-image data and inherited by every
    /// downstream value.
    tainted: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor<T>>,
}

/// Arena of recorded operations. Every op's inputs precede it, so a reverse
/// sweep over the arena is a valid topological order for backpropagation.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tainted: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Tags a leaf as real-image data for provenance auditing.
    pub fn mark_real(&mut self, v: Var) {
        self.nodes[v.0].tainted = true;
    }

    /// Whether `v` depends on any value tagged by [`Tape::mark_real`].
    pub fn is_tainted(&self, v: Var) -> bool {
        self.nodes[v.0].tainted
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Copies the value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        let tainted = self.nodes[v.0].tainted;
        let d = self.constant(value);
        self.nodes[d.0].tainted = tainted;
        d
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let tainted = inputs.iter().any(|v| self.nodes[v.0].tainted);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            tainted,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push("leaky_relu", v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.tanh());
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(softplus);
        self.push("softplus", v, Op::Softplus(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / T::lit(x.numel() as f64));
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// Averages each `H×W` plane: `N×C×H×W → N×C×1×1`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let inv = T::one() / T::lit((h * w) as f64);
        let data = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(&[n, c, 1, 1], data)?;
        self.push("spatial_mean", v, Op::SpatialMean(a), &[a])
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &inputs,
        )
    }

    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = bilinear_resize(self.value(a), out_h, out_w)?;
        self.push("bilinear_resize", v, Op::Bilinear(a), &[a])
    }

    pub fn nearest_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = nearest_resize(self.value(a), out_h, out_w)?;
        self.push("nearest_resize", v, Op::Nearest(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = log_softmax(self.value(a))?;
        self.push("log_softmax", v, Op::LogSoftmax(a), &[a])
    }

    pub fn normalize(&mut self, a: Var, mode: NormMode, eps: T) -> Result<Var> {
        let (v, inv_std) = normalize_forward(self.value(a), mode, eps)?;
        self.push(
            "normalize_features",
            v,
            Op::Normalize {
                input: a,
                mode,
                inv_std,
            },
            &[a],
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_channels of nothing".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(*first), self.shape(p)),
                );
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(n * total * h * w);
        for ni in 0..n {
            for (&p, &pc) in parts.iter().zip(&chans) {
                let per = pc * h * w;
                data.extend_from_slice(&self.value(p).data()[ni * per..(ni + 1) * per]);
            }
        }
        let v = Tensor::new(&[n, total, h, w], data)?;
        self.push("concat_channels", v, Op::ConcatChannels(parts.to_vec()), parts)
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_batch(&vals)?;
        self.push("concat_batch", v, Op::ConcatBatch(parts.to_vec()), parts)
    }

    pub fn slice_batch(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_batch(start, len)?;
        self.push("slice_batch", v, Op::SliceBatch { input: a, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn dwt(&mut self, a: Var, arrangement: Arrangement) -> Result<Var> {
        let v = wavelet::dwt(self.value(a), arrangement)?;
        self.push("dwt", v, Op::Dwt(a, arrangement), &[a])
    }

    pub fn iwt(&mut self, a: Var, arrangement: Arrangement) -> Result<Var> {
        let v = wavelet::iwt(self.value(a), arrangement)?;
        self.push("iwt", v, Op::Iwt(a, arrangement), &[a])
    }

    pub fn arrange(&mut self, a: Var, from: Arrangement, to: Arrangement) -> Result<Var> {
        let v = wavelet::rearrange(self.value(a), from, to)?;
        self.push("arrange", v, Op::Arrange { input: a, from, to }, &[a])
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(acc) => acc.add_assign(&g)?,
                    None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*b) {
                    send(*b, g.clone())?;
                }
                send(*a, g)?;
            }
            Op::Sub(a, b) => {
                if needs(*b) {
                    send(*b, g.map(|x| -x))?;
                }
                send(*a, g)?;
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if needs(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                send(*a, g.map(|x| x * c))?;
            }
            Op::AddScalar(a) => send(*a, g)?,
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let d = g.zip_map(self.value(*a), |gy, x| if x > T::zero() { gy } else { gy * s })?;
                send(*a, d)?;
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gy, y| gy * (T::one() - y * y))?;
                send(*a, d)?;
            }
            Op::Softplus(a) => {
                let d = g.zip_map(self.value(*a), |gy, x| gy * sigmoid(x))?;
                send(*a, d)?;
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                send(*a, Tensor::full(self.shape(*a), gv))?;
            }
            Op::Mean(a) => {
                let n = T::lit(self.value(*a).numel() as f64);
                let gv = g.data()[0] / n;
                send(*a, Tensor::full(self.shape(*a), gv))?;
            }
            Op::SpatialMean(a) => {
                let (_, _, h, w) = self.value(*a).dims4()?;
                let inv = T::one() / T::lit((h * w) as f64);
                let mut data = Vec::with_capacity(self.value(*a).numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                send(*a, Tensor::new(self.shape(*a), data)?)?;
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let need = [needs(*input), needs(*weight), bias.is_some_and(needs)];
                let cg = conv2d_backward(self.value(*input), self.value(*weight), *stride, *pad, &g, need)?;
                if let Some(d) = cg.input {
                    send(*input, d)?;
                }
                if let Some(d) = cg.weight {
                    send(*weight, d)?;
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    send(*b, d)?;
                }
            }
            Op::Bilinear(a) => send(*a, bilinear_resize_backward(self.shape(*a), &g)?)?,
            Op::Nearest(a) => send(*a, nearest_resize_backward(self.shape(*a), &g)?)?,
            Op::LogSoftmax(a) => send(*a, log_softmax_backward(&node.value, &g)?)?,
            Op::Normalize {
                input,
                mode,
                inv_std,
            } => send(*input, normalize_backward(&node.value, inv_std, *mode, &g)?)?,
            Op::ConcatChannels(parts) => {
                let (n, total, h, w) = g.dims4()?;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if needs(p) {
                        let mut data = Vec::with_capacity(n * pc * h * w);
                        for ni in 0..n {
                            let s = (ni * total + offset) * h * w;
                            data.extend_from_slice(&g.data()[s..s + pc * h * w]);
                        }
                        send(p, Tensor::new(self.shape(p), data)?)?;
                    }
                    offset += pc;
                }
            }
            Op::ConcatBatch(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[0];
                    if needs(p) {
                        send(p, g.slice_batch(start, len)?)?;
                    }
                    start += len;
                }
            }
            Op::SliceBatch { input, start } => {
                let full = self.value(*input);
                let per = full.numel() / full.shape()[0];
                let mut d = Tensor::zeros(full.shape());
                d.data_mut()[start * per..start * per + g.numel()].copy_from_slice(g.data());
                send(*input, d)?;
            }
            Op::Reshape(a) => send(*a, g.reshape(self.shape(*a))?)?,
            // Orthonormal Haar: the adjoint of each transform is its inverse.
            Op::Dwt(a, arr) => send(*a, wavelet::iwt(&g, *arr)?)?,
            Op::Iwt(a, arr) => send(*a, wavelet::dwt(&g, *arr)?)?,
            Op::Arrange { input, from, to } => send(*input, wavelet::rearrange(&g, *to, *from)?)?,
        }
        Ok(())
    }
}

pub(crate) fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::new(&[3], vec![1., 2., 3.]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2., 4., 6.]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[4., 8., 12.]);
        tape.zero_grads();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::full(&[2], f32::MAX));
        assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::full(&[2], 3.0));
        let c = tape.constant(Tensor::full(&[2], 5.0));
        let p = tape.mul(w, c).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[5.0, 5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn taint_propagates_but_detach_keeps_it() {
        let mut tape = Tape::<f32>::new();
        let real = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        tape.mark_real(real);
        let clean = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let mixed = tape.add(real, clean).unwrap();
        assert!(tape.is_tainted(mixed));
        assert!(!tape.is_tainted(clean));
        let d = tape.detach(mixed);
        assert!(tape.is_tainted(d));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((sigmoid(-800.0f64)).is_finite());
    }
}
