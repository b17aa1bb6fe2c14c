use crate::error::{Error, Result};

use super::kernels;
use super::{Shape, Tensor};

/// Handle to a node recorded on a [`Tape`].
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
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    L1 {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the graph. Each node that requires a gradient owns
/// a gradient buffer once [`Tape::backward`] has run; repeated backward
/// passes add into those buffers until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    released: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad length matches value"))
    }

    /// Free the values of nodes `start..end`. Inference-only: once anything
    /// has been released, [`Tape::backward`] refuses to run.
    pub fn release(&mut self, start: usize, end: usize) {
        let end = end.min(self.nodes.len());
        for node in &mut self.nodes[start..end] {
            node.value = Tensor::zeros(Shape::new(0, 0, 0, 0));
            node.op = Op::Leaf;
        }
        self.released = true;
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must lie in (0, 1), got {slope}"
            )));
        }
        let out = kernels::leaky_relu(self.value(x), slope);
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::LeakyRelu { x, slope }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        let rg = self.needs(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d(self.value(x), k)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::bilinear_upsample(self.value(x), factor)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Upsample { x, factor }, rg))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.value(x), r)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::PixelShuffle { x, r }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&values)?;
        let rg = self.needs(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow_channels(self.value(x), start, len)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Narrow { x, start, len }, rg))
    }

    /// Split into `parts` equal channel groups, in order.
    pub fn split_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(x).channels;
        if parts == 0 || c % parts != 0 {
            return Err(Error::Shape(format!(
                "cannot split {} into {parts} equal channel groups",
                self.shape(x)
            )));
        }
        let len = c / parts;
        (0..parts).map(|i| self.narrow_channels(x, i * len, len)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        kernels::check_same_shape("add", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        kernels::check_same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(self.shape(x), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.needs(&[x]);
        self.push(out, Op::Sum { x }, rg)
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let v = kernels::l1_loss(self.value(pred), self.value(target))?;
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(v), Op::L1 { pred, target }, rg))
    }

    /// Propagate d(loss)/d(node) to every node that requires a gradient,
    /// adding into any gradients left by earlier passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.released {
            return Err(Error::InvalidArgument(
                "backward on a tape whose intermediates were released".into(),
            ));
        }
        if !self.shape(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        let mut fresh: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        fresh[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = fresh[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut fresh)?;
            }
            fresh[i] = Some(g);
        }
        for (i, g) in fresh.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], fresh: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        // Gradient buffer for an input, created lazily; None for inputs that
        // do not require gradients.
        fn slot<'a>(nodes: &[Node], fresh: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(fresh[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let mut take = |v: Var| {
                    nodes[v.0].requires_grad.then(|| {
                        fresh[v.0]
                            .take()
                            .unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()])
                    })
                };
                let mut gi = take(*input);
                let mut gw = take(*weight);
                let mut gb = take(*bias);
                kernels::conv2d_backward(
                    &nodes[input.0].value,
                    &nodes[weight.0].value,
                    g,
                    *stride,
                    *pad,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                )?;
                for (v, buf) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                    if let Some(buf) = buf {
                        fresh[v.0] = Some(buf);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if let Some(gx) = slot(nodes, fresh, *x) {
                    kernels::leaky_relu_backward(&nodes[x.0].value, *slope, g, gx);
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = slot(nodes, fresh, *x) {
                    kernels::sigmoid_backward(&nodes[i].value, g, gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = slot(nodes, fresh, *x) {
                    kernels::max_pool2d_backward(argmax, g, gx);
                }
            }
            Op::Upsample { x, factor } => {
                if let Some(gx) = slot(nodes, fresh, *x) {
                    kernels::bilinear_upsample_backward(nodes[x.0].value.shape(), *factor, g, gx);
                }
            }
            Op::PixelShuffle { x, r } => {
                if let Some(gx) = slot(nodes, fresh, *x) {
                    kernels::pixel_shuffle_backward(nodes[x.0].value.shape(), *r, g, gx);
                }
            }
            Op::Concat { parts } => {
                let out = nodes[i].value.shape();
                let mut start = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape().channels;
                    if let Some(gp) = slot(nodes, fresh, p) {
                        // Slicing the output gradient is the adjoint of concat.
                        let plane = out.plane();
                        for b in 0..out.batch {
                            let src = (b * out.channels + start) * plane;
                            let dst = b * len * plane;
                            for (d, s) in gp[dst..dst + len * plane]
                                .iter_mut()
                                .zip(&g[src..src + len * plane])
                            {
                                *d += s;
                            }
                        }
                    }
                    start += len;
                }
            }
            Op::Narrow { x, start, len } => {
                if let Some(gx) = slot(nodes, fresh, *x) {
                    kernels::narrow_channels_backward(nodes[x.0].value.shape(), *start, *len, g, gx);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(nodes, fresh, v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (nodes[a.0].value.data().to_vec(), nodes[b.0].value.data());
                if let Some(ga) = slot(nodes, fresh, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = slot(nodes, fresh, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(&va) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = slot(nodes, fresh, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * factor);
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = slot(nodes, fresh, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::L1 { pred, target } => {
                let p = nodes[pred.0].value.data();
                let t = nodes[target.0].value.data();
                let n = p.len().max(1) as f64;
                // Subgradient 0 where prediction equals target.
                let sign: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            g[0] / n
                        } else if d < 0.0 {
                            -g[0] / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if let Some(gp) = slot(nodes, fresh, *pred) {
                    gp.iter_mut().zip(&sign).for_each(|(d, s)| *d += s);
                }
                if let Some(gt) = slot(nodes, fresh, *target) {
                    gt.iter_mut().zip(&sign).for_each(|(d, s)| *d -= s);
                }
            }
        }
        Ok(())
    }
}
