//! Every network here is a fixed straight-line program over a closed set of
//! ops. Running it records each intermediate value; the reverse pass walks
//! the ops backwards, accumulating gradients per node.

use super::descriptor::{AdaptorArch, ConvDims, NetDescriptor};
use super::params::{Grads, NetParams};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, conv3d, conv3d_backward, Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

type Node = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    Conv { x: Node, layer: usize },
    LeakyRelu { x: Node },
    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    Up2 { x: Node },
    Add { a: Node, b: Node },
}

/// Node 0 is the input; op `i` produces node `i + 1`.
#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<Op>,
    outputs: Vec<Node>,
}

/// Values of every node from one run.
#[derive(Debug, Clone)]
pub struct Trace<T: Real> {
    values: Vec<Tensor<T>>,
    outputs: Vec<Node>,
}

impl<T: Real> Trace<T> {
    pub fn outputs(&self) -> Vec<&Tensor<T>> {
        self.outputs.iter().map(|&n| &self.values[n]).collect()
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.values[*self.outputs.last().expect("program has an output")]
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.values[0]
    }
}

struct Builder {
    ops: Vec<Op>,
}

impl Builder {
    fn push(&mut self, op: Op) -> Node {
        self.ops.push(op);
        self.ops.len()
    }
    fn conv(&mut self, x: Node, layer: usize) -> Node {
        self.push(Op::Conv { x, layer })
    }
    fn act(&mut self, x: Node) -> Node {
        self.push(Op::LeakyRelu { x })
    }
    fn conv_act(&mut self, x: Node, layer: usize) -> Node {
        let c = self.conv(x, layer);
        self.act(c)
    }
}

impl Program {
    pub fn for_descriptor(desc: &NetDescriptor) -> Self {
        Self::build(desc, true)
    }

    /// The same network with the U-shape skip additions removed; only
    /// meaningful for U-shape adaptors.
    pub fn without_skips(desc: &NetDescriptor) -> Self {
        Self::build(desc, false)
    }

    fn build(desc: &NetDescriptor, skips: bool) -> Self {
        let mut b = Builder { ops: Vec::new() };
        let outputs = match *desc {
            NetDescriptor::Feature(_) => {
                let h = b.conv_act(0, 0);
                let h = b.conv_act(h, 1);
                vec![b.conv(h, 2)]
            }
            NetDescriptor::Adaptor(d) => match d.arch {
                AdaptorArch::Linear => vec![b.conv(0, 0)],
                AdaptorArch::NonLinear => {
                    let h = b.conv_act(0, 0);
                    vec![b.conv(h, 1)]
                }
                AdaptorArch::UShape => {
                    let e0 = b.conv_act(0, 0);
                    let e1 = b.conv_act(e0, 1);
                    let e2 = b.conv_act(e1, 2);
                    let m = b.conv_act(e2, 3);
                    let up = b.push(Op::Up2 { x: m });
                    let mut u1 = b.conv_act(up, 4);
                    if skips {
                        u1 = b.push(Op::Add { a: u1, b: e1 });
                    }
                    let up = b.push(Op::Up2 { x: u1 });
                    let mut u0 = b.conv_act(up, 5);
                    if skips {
                        u0 = b.push(Op::Add { a: u0, b: e0 });
                    }
                    vec![b.conv(u0, 6)]
                }
            },
            NetDescriptor::Aggregator(d) => {
                let mut hidden = vec![b.conv_act(0, 0)];
                for i in 1..d.depth - 1 {
                    let mut h = b.conv_act(*hidden.last().unwrap(), i);
                    if i == d.depth - 2 && d.has_residual() {
                        h = b.push(Op::Add { a: h, b: hidden[0] });
                    }
                    hidden.push(h);
                }
                let last = hidden.len() - 1;
                let mut outs = Vec::new();
                for j in (1..d.heads).rev() {
                    outs.push(b.conv(hidden[last - j], d.depth - 1 + j));
                }
                outs.push(b.conv(hidden[last], d.depth - 1));
                outs
            }
        };
        Program { ops: b.ops, outputs }
    }

    /// Feeds the sign of every activation input into `h`; two runs hash
    /// alike only if no activation crossed its kink between them.
    pub fn hash_kinks<T: Real>(&self, trace: &Trace<T>, h: &mut impl std::hash::Hasher) {
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::LeakyRelu { .. } = op {
                for &v in trace.values[i + 1].data() {
                    h.write_u8((v > T::zero()) as u8);
                }
            }
        }
    }

    pub fn output_count(&self) -> usize {
        self.outputs.len()
    }

    pub fn run<T: Real>(&self, params: &NetParams<T>, input: Tensor<T>) -> Result<Trace<T>> {
        let mut values = Vec::with_capacity(self.ops.len() + 1);
        values.push(input);
        let slope = T::of(LEAKY_SLOPE);
        for op in &self.ops {
            let v = match *op {
                Op::Conv { x, layer } => {
                    let l = &params.layers()[layer];
                    let (s, p) = (l.spec.stride, l.spec.pad);
                    match l.spec.dims {
                        ConvDims::Two => conv2d(&values[x], &l.kernel, &l.bias, s, p)?,
                        ConvDims::Three => conv3d(&values[x], &l.kernel, &l.bias, s, p)?,
                    }
                }
                Op::LeakyRelu { x } => values[x].map(|v| if v > T::zero() { v } else { v * slope }),
                Op::Up2 { x } => upsample2(&values[x])?,
                Op::Add { a, b } => {
                    let mut out = values[a].clone();
                    out.axpy(T::one(), &values[b])?;
                    out
                }
            };
            values.push(v);
        }
        Ok(Trace {
            values,
            outputs: self.outputs.clone(),
        })
    }

    /// Gradients with respect to the input and every non-frozen layer, given
    /// upstream gradients for each output (`None` means zero).
    pub fn backward<T: Real>(
        &self,
        params: &NetParams<T>,
        trace: &Trace<T>,
        output_grads: &[Option<Tensor<T>>],
    ) -> Result<(Tensor<T>, Grads<T>)> {
        if output_grads.len() != self.outputs.len() {
            return Err(Error::shape(format!(
                "{} output gradients for {} outputs",
                output_grads.len(),
                self.outputs.len()
            )));
        }
        let v = &trace.values;
        let mut g: Vec<Option<Tensor<T>>> = vec![None; v.len()];
        for (&n, og) in self.outputs.iter().zip(output_grads) {
            if let Some(t) = og {
                accumulate(&mut g[n], t.clone())?;
            }
        }
        let mut grads = Grads::zeros_for(params);
        let slope = T::of(LEAKY_SLOPE);
        for (i, op) in self.ops.iter().enumerate().rev() {
            let node = i + 1;
            let Some(up) = g[node].take() else { continue };
            match *op {
                Op::Conv { x, layer } => {
                    let l = &params.layers()[layer];
                    let (s, p) = (l.spec.stride, l.spec.pad);
                    let cg = match l.spec.dims {
                        ConvDims::Two => conv2d_backward(&v[x], &l.kernel, &up, s, p)?,
                        ConvDims::Three => conv3d_backward(&v[x], &l.kernel, &up, s, p)?,
                    };
                    if !l.frozen {
                        grads.layers[layer].0.axpy(T::one(), &cg.kernel)?;
                        grads.layers[layer].1.axpy(T::one(), &cg.bias)?;
                    }
                    accumulate(&mut g[x], cg.input)?;
                }
                Op::LeakyRelu { x } => {
                    // the output has the sign of the pre-activation
                    let y = v[node].data();
                    let mut d = up;
                    for (dv, &yv) in d.data_mut().iter_mut().zip(y) {
                        if yv <= T::zero() {
                            *dv *= slope;
                        }
                    }
                    accumulate(&mut g[x], d)?;
                }
                Op::Up2 { x } => accumulate(&mut g[x], upsample2_backward(&up)?)?,
                Op::Add { a, b } => {
                    accumulate(&mut g[b], up.clone())?;
                    accumulate(&mut g[a], up)?;
                }
            }
        }
        let dx = match g[0].take() {
            Some(t) => t,
            None => v[0].zeros_like(),
        };
        Ok((dx, grads))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(T::one(), &t),
        None => {
            *slot = Some(t);
            Ok(())
        }
    }
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, h, w] = x.dims3("upsample input")?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let srow = &src[(ch * h + y / 2) * w..][..w];
            let orow = &mut out[(ch * oh + y) * ow..][..ow];
            for (ox, o) in orow.iter_mut().enumerate() {
                *o = srow[ox / 2];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, oh, ow] = grad.dims3("upsample gradient")?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::shape("upsample gradient with odd extent"));
    }
    let (h, w) = (oh / 2, ow / 2);
    let src = grad.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * h + y / 2) * w + x / 2] += src[(ch * oh + y) * ow + x];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}
