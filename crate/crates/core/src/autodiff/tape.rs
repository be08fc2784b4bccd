use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};

use super::conv::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

type Deriv<T> = Box<dyn Fn(T, T) -> T>;

enum Op<T> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        batch: usize,
    },
    /// `geom` describes the forward convolution whose input-gradient this op is.
    ConvTranspose {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        batch: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Square(usize),
    Sqrt(usize),
    Scale(usize, T),
    ClampMax(usize, T),
    SumAll(usize),
    MeanAll(usize),
    Concat {
        a: usize,
        b: usize,
        batch: usize,
        ca: usize,
        cb: usize,
        spatial: usize,
    },
    /// Elementwise `y = f(x)` with a caller-supplied derivative `f'(x, y)`.
    Map {
        a: usize,
        deriv: Deriv<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them once in reverse.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of leaf values, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = if a.len() == b.len() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.len() == 1 {
        let x = a.data()[0];
        b.data().iter().map(|&y| f(x, y)).collect()
    } else {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    };
    let shape = if a.len() >= b.len() { a.shape() } else { b.shape() };
    Tensor::from_vec(shape.to_vec(), data).expect("broadcast shape")
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Adds `contrib` into a gradient slot, reducing to one value when the slot is a
/// broadcast scalar.
fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, len: usize, contrib: &[T]) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    if len == contrib.len() {
        for (d, &c) in buf.iter_mut().zip(contrib) {
            *d += c;
        }
    } else {
        debug_assert_eq!(len, 1);
        let mut s = 0.0f64;
        for &c in contrib {
            s += c.as_f64();
        }
        buf[0] += T::of(s);
    }
}

fn sum_f64<T: Element>(values: &[T]) -> f64 {
    values.iter().map(|v| v.as_f64()).sum()
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::of(value)))
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Hash of which side of its kink every input of a non-smooth op
    /// (`relu`, `clamp_max`, `sqrt` at zero) falls on. Two evaluations with
    /// equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for (id, node) in nodes.iter().enumerate() {
            let (input, kink) = match node.op {
                Op::Relu(a) | Op::Sqrt(a) => (a, T::zero()),
                Op::ClampMax(a, c) => (a, c),
                _ => continue,
            };
            id.hash(&mut h);
            let mut word = 0u64;
            for (k, &x) in nodes[input].value.data().iter().enumerate() {
                word = (word << 1) | (x > kink) as u64;
                if k % 64 == 63 {
                    h.write_u64(word);
                    word = 0;
                }
            }
            h.write_u64(word);
        }
        h.finish()
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn check_own(&self, var: Var<'_, T>) -> Result<usize> {
        if !std::ptr::eq(self, var.tape) {
            return Err(Error::InvalidArgument("variable belongs to another tape".into()));
        }
        Ok(var.id)
    }

    /// Runs reverse accumulation from a scalar `loss`.
    ///
    /// Gradients are accumulated in strictly decreasing node order, so results
    /// are bit-reproducible. A tape supports exactly one backward pass.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let root = self.check_own(loss)?;
        if self.consumed.replace(true) {
            return Err(Error::Backward("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        pending[root] = Some(vec![T::one()]);

        for id in (0..=root).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let wants = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| &nodes[i].value;
            let len = |i: usize| nodes[i].value.len();
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::from_vec(node.value.shape().to_vec(), g)?);
                }
                Op::Relu(a) => {
                    let d: Vec<T> = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut pending[*a], len(*a), &d);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<T> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect();
                    accumulate(&mut pending[*a], len(*a), &d);
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut pending[*a], len(*a), &g);
                    }
                    if wants(*b) {
                        accumulate(&mut pending[*b], len(*b), &g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut pending[*a], len(*a), &g);
                    }
                    if wants(*b) {
                        let d: Vec<T> = g.iter().map(|&g| -g).collect();
                        accumulate(&mut pending[*b], len(*b), &d);
                    }
                }
                Op::Mul(a, b) => {
                    let ga = Tensor::from_vec(node.value.shape().to_vec(), g)?;
                    if wants(*a) {
                        let d = zip_map(&ga, val(*b), |g, y| g * y);
                        accumulate(&mut pending[*a], len(*a), d.data());
                    }
                    if wants(*b) {
                        let d = zip_map(&ga, val(*a), |g, x| g * x);
                        accumulate(&mut pending[*b], len(*b), d.data());
                    }
                }
                Op::Div(a, b) => {
                    let ga = Tensor::from_vec(node.value.shape().to_vec(), g)?;
                    if wants(*a) {
                        let d = zip_map(&ga, val(*b), |g, y| g / y);
                        accumulate(&mut pending[*a], len(*a), d.data());
                    }
                    if wants(*b) {
                        // d(a/b)/db = -(a/b)/b
                        let gq = zip_map(&ga, &node.value, |g, q| g * q);
                        let d = zip_map(&gq, val(*b), |gq, y| -gq / y);
                        accumulate(&mut pending[*b], len(*b), d.data());
                    }
                }
                Op::Square(a) => {
                    let two = T::of(2.0);
                    let d: Vec<T> = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&g, &x)| g * two * x)
                        .collect();
                    accumulate(&mut pending[*a], len(*a), &d);
                }
                Op::Sqrt(a) => {
                    // Subgradient 0 at the origin.
                    let half = T::of(0.5);
                    let d: Vec<T> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &y)| if y > T::zero() { g * half / y } else { T::zero() })
                        .collect();
                    accumulate(&mut pending[*a], len(*a), &d);
                }
                Op::Scale(a, c) => {
                    let d: Vec<T> = g.iter().map(|&g| g * *c).collect();
                    accumulate(&mut pending[*a], len(*a), &d);
                }
                Op::ClampMax(a, c) => {
                    let d: Vec<T> = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&g, &x)| if x < *c { g } else { T::zero() })
                        .collect();
                    accumulate(&mut pending[*a], len(*a), &d);
                }
                Op::SumAll(a) => {
                    let d = vec![g[0]; len(*a)];
                    accumulate(&mut pending[*a], len(*a), &d);
                }
                Op::MeanAll(a) => {
                    let n = len(*a);
                    let d = vec![g[0] / T::of(n as f64); n];
                    accumulate(&mut pending[*a], n, &d);
                }
                Op::Concat {
                    a,
                    b,
                    batch,
                    ca,
                    cb,
                    spatial,
                } => {
                    let (sa, sb) = (ca * spatial, cb * spatial);
                    if wants(*a) {
                        let mut d = Vec::with_capacity(batch * sa);
                        for bi in 0..*batch {
                            let off = bi * (sa + sb);
                            d.extend_from_slice(&g[off..off + sa]);
                        }
                        accumulate(&mut pending[*a], len(*a), &d);
                    }
                    if wants(*b) {
                        let mut d = Vec::with_capacity(batch * sb);
                        for bi in 0..*batch {
                            let off = bi * (sa + sb) + sa;
                            d.extend_from_slice(&g[off..off + sb]);
                        }
                        accumulate(&mut pending[*b], len(*b), &d);
                    }
                }
                Op::Map { a, deriv } => {
                    let d: Vec<T> = g
                        .iter()
                        .zip(val(*a).data().iter().zip(node.value.data()))
                        .map(|(&g, (&x, &y))| g * deriv(x, y))
                        .collect();
                    accumulate(&mut pending[*a], len(*a), &d);
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    geom,
                    batch,
                } => {
                    let (xin, xout) = (geom.cin * geom.in_spatial(), geom.cout * geom.out_spatial());
                    if wants(*b) {
                        let d = bias_grad(&g, geom.cout, geom.out_spatial(), *batch);
                        accumulate(&mut pending[*b], len(*b), &d);
                    }
                    if wants(*w) {
                        let mut d = vec![T::zero(); len(*w)];
                        for bi in 0..*batch {
                            conv::conv_backward_weight(
                                &val(*x).data()[bi * xin..(bi + 1) * xin],
                                &g[bi * xout..(bi + 1) * xout],
                                geom,
                                &mut d,
                            );
                        }
                        accumulate(&mut pending[*w], len(*w), &d);
                    }
                    if wants(*x) {
                        let slot = pending[*x].get_or_insert_with(|| vec![T::zero(); len(*x)]);
                        for bi in 0..*batch {
                            conv::conv_backward_input(
                                &g[bi * xout..(bi + 1) * xout],
                                val(*w).data(),
                                geom,
                                &mut slot[bi * xin..(bi + 1) * xin],
                            );
                        }
                    }
                }
                Op::ConvTranspose {
                    x,
                    w,
                    b,
                    geom,
                    batch,
                } => {
                    // Output of this op is the forward conv's input and vice versa.
                    let (yin, yout) = (geom.cin * geom.in_spatial(), geom.cout * geom.out_spatial());
                    if wants(*b) {
                        let d = bias_grad(&g, geom.cin, geom.in_spatial(), *batch);
                        accumulate(&mut pending[*b], len(*b), &d);
                    }
                    if wants(*w) {
                        let mut d = vec![T::zero(); len(*w)];
                        for bi in 0..*batch {
                            conv::conv_backward_weight(
                                &g[bi * yin..(bi + 1) * yin],
                                &val(*x).data()[bi * yout..(bi + 1) * yout],
                                geom,
                                &mut d,
                            );
                        }
                        accumulate(&mut pending[*w], len(*w), &d);
                    }
                    if wants(*x) {
                        let mut d = vec![T::zero(); len(*x)];
                        for bi in 0..*batch {
                            conv::conv_forward(
                                &g[bi * yin..(bi + 1) * yin],
                                val(*w).data(),
                                geom,
                                &mut d[bi * yout..(bi + 1) * yout],
                            );
                        }
                        accumulate(&mut pending[*x], len(*x), &d);
                    }
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn bias_grad<T: Element>(g: &[T], channels: usize, spatial: usize, batch: usize) -> Vec<T> {
    (0..channels)
        .map(|c| {
            let mut s = 0.0f64;
            for bi in 0..batch {
                let off = (bi * channels + c) * spatial;
                s += sum_f64(&g[off..off + spatial]);
            }
            T::of(s)
        })
        .collect()
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], spatial: usize) {
    for (chunk, &b) in out.chunks_mut(spatial).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn conv_shapes(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    b: &[usize],
    transpose: bool,
) -> Result<(usize, usize, usize, usize)> {
    if x.len() != 5 || w.len() != 5 {
        return Err(Error::shape(op, format!("expected rank-5 input and weight, got {x:?} and {w:?}")));
    }
    let k = w[2];
    if k == 0 || w[3] != k || w[4] != k {
        return Err(Error::shape(op, format!("kernel must be a non-empty cube, got {w:?}")));
    }
    // conv: w = [cout, cin, k, k, k]; transpose: w = [cin, cout, k, k, k]
    let (cin, cout) = (w[1 - transpose as usize], w[transpose as usize]);
    if x[1] != cin {
        return Err(Error::shape(op, format!("input has {} channels, weight expects {cin}", x[1])));
    }
    if b != [cout] {
        return Err(Error::shape(op, format!("bias shape {b:?}, expected [{cout}]")));
    }
    Ok((x[0], cin, cout, k))
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_ref(self.id).clone()
    }

    /// Borrows the recorded value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    /// Value of a scalar result as f64.
    pub fn item(&self) -> f64 {
        self.tape.value_ref(self.id).data()[0].as_f64()
    }

    fn same_tape(&self, other: Var<'t, T>) -> Result<()> {
        self.tape.check_own(other).map(|_| ())
    }

    fn unary(
        self,
        op_name: &'static str,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let value = {
            let x = self.tape.value_ref(self.id);
            let data = x.data().iter().map(|&v| f(v)).collect();
            Tensor::from_vec(x.shape().to_vec(), data)?
        };
        self.tape.push(op_name, value, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'t, T>,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() && a.len() != 1 && b.len() != 1 {
                return Err(Error::shape(op_name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            zip_map(a, b, f)
        };
        self.tape.push(op_name, value, op, &[self.id, other.id])
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary("relu", |x| x.max(T::zero()), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary("square", |x| x * x, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.with_value(|t| t.data().iter().copied().find(|v| *v < T::zero())) {
            return Err(Error::Domain(format!("sqrt of negative value {bad:?}")));
        }
        self.unary("sqrt", |x| x.sqrt(), Op::Sqrt(self.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        self.unary("scale", |x| x * c, Op::Scale(self.id, c))
    }

    /// `min(x, c)`; the gradient is 0 wherever `x >= c`.
    pub fn clamp_max(self, c: f64) -> Result<Var<'t, T>> {
        let c = T::of(c);
        self.unary("clamp_max", |x| if x < c { x } else { c }, Op::ClampMax(self.id, c))
    }

    /// Elementwise `f(x)` with derivative `deriv(x, f(x))`.
    pub fn map(
        self,
        f: impl Fn(T) -> T,
        deriv: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        let op = Op::Map {
            a: self.id,
            deriv: Box::new(deriv),
        };
        self.unary("map", f, op)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        if other.with_value(|t| t.data().iter().any(|v| *v == T::zero())) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let s = self.with_value(|t| sum_f64(t.data()));
        self.tape
            .push("sum_all", Tensor::scalar(T::of(s)), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let (s, n) = self.with_value(|t| (sum_f64(t.data()), t.len()));
        self.tape.push(
            "mean_all",
            Tensor::scalar(T::of(s / n as f64)),
            Op::MeanAll(self.id),
            &[self.id],
        )
    }

    /// Concatenates along the channel axis of two `(B, C, D, H, W)` tensors.
    pub fn concat_channels(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (value, op) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 5 || sb.len() != 5 || sa[0] != sb[0] || sa[2..] != sb[2..] {
                return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
            }
            let spatial: usize = sa[2..].iter().product();
            let (batch, ca, cb) = (sa[0], sa[1], sb[1]);
            let mut data = Vec::with_capacity(a.len() + b.len());
            for bi in 0..batch {
                data.extend_from_slice(&a.data()[bi * ca * spatial..(bi + 1) * ca * spatial]);
                data.extend_from_slice(&b.data()[bi * cb * spatial..(bi + 1) * cb * spatial]);
            }
            let mut shape = sa.to_vec();
            shape[1] = ca + cb;
            let op = Op::Concat {
                a: self.id,
                b: other.id,
                batch,
                ca,
                cb,
                spatial,
            };
            (Tensor::from_vec(shape, data)?, op)
        };
        self.tape.push("concat_channels", value, op, &[self.id, other.id])
    }

    /// 3D convolution. `weight` is `(Cout, Cin, k, k, k)`, `bias` is `(Cout)`.
    pub fn conv3d(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv3d stride must be >= 1".into()));
        }
        let (value, op) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (&nodes[self.id].value, &nodes[weight.id].value, &nodes[bias.id].value);
            let (batch, cin, cout, k) = conv_shapes("conv3d", x.shape(), w.shape(), b.shape(), false)?;
            let input = [x.shape()[2], x.shape()[3], x.shape()[4]];
            let mut output = [0; 3];
            for (o, &n) in output.iter_mut().zip(&input) {
                *o = conv::conv_output_extent(n, k, stride, padding).ok_or_else(|| {
                    Error::shape("conv3d", format!("non-positive output extent for input {input:?}, k={k}"))
                })?;
            }
            let geom = ConvGeom {
                cin,
                cout,
                k,
                stride,
                pad: padding,
                input,
                output,
            };
            let (xin, xout) = (cin * geom.in_spatial(), cout * geom.out_spatial());
            let mut data = vec![T::zero(); batch * xout];
            for bi in 0..batch {
                let out = &mut data[bi * xout..(bi + 1) * xout];
                conv::conv_forward(&x.data()[bi * xin..(bi + 1) * xin], w.data(), &geom, out);
                add_bias(out, b.data(), geom.out_spatial());
            }
            let shape = vec![batch, cout, output[0], output[1], output[2]];
            let op = Op::Conv {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                batch,
            };
            (Tensor::from_vec(shape, data)?, op)
        };
        self.tape.push("conv3d", value, op, &[self.id, weight.id, bias.id])
    }

    /// Transposed 3D convolution (adjoint of [`Var::conv3d`]).
    /// `weight` is `(Cin, Cout, k, k, k)`, `bias` is `(Cout)`.
    pub fn conv_transpose3d(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        if stride == 0 {
            return Err(Error::InvalidArgument("conv_transpose3d stride must be >= 1".into()));
        }
        let (value, op) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (&nodes[self.id].value, &nodes[weight.id].value, &nodes[bias.id].value);
            let (batch, cin, cout, k) =
                conv_shapes("conv_transpose3d", x.shape(), w.shape(), b.shape(), true)?;
            let input = [x.shape()[2], x.shape()[3], x.shape()[4]];
            let mut output = [0; 3];
            for (o, &n) in output.iter_mut().zip(&input) {
                *o = conv::conv_transpose_output_extent(n, k, stride, padding).ok_or_else(|| {
                    Error::shape(
                        "conv_transpose3d",
                        format!("non-positive output extent for input {input:?}, k={k}"),
                    )
                })?;
            }
            // The forward conv maps this op's output back onto its input.
            let geom = ConvGeom {
                cin: cout,
                cout: cin,
                k,
                stride,
                pad: padding,
                input: output,
                output: input,
            };
            let (yin, yout) = (cout * geom.in_spatial(), cin * geom.out_spatial());
            let mut data = vec![T::zero(); batch * yin];
            for bi in 0..batch {
                let out = &mut data[bi * yin..(bi + 1) * yin];
                conv::conv_backward_input(&x.data()[bi * yout..(bi + 1) * yout], w.data(), &geom, out);
                add_bias(out, b.data(), geom.in_spatial());
            }
            let shape = vec![batch, cout, output[0], output[1], output[2]];
            let op = Op::ConvTranspose {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                batch,
            };
            (Tensor::from_vec(shape, data)?, op)
        };
        self.tape
            .push("conv_transpose3d", value, op, &[self.id, weight.id, bias.id])
    }
}
