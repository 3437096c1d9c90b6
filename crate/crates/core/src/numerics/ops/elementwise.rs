//! Element-wise arithmetic with same-rank broadcasting, activations,
//! reductions and softmax.

use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::numerics::tensor::{strides, Tensor};

/// Output shape of broadcasting `a` against `b`. Ranks must match and each
/// axis must agree or be 1 on one side.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape.iter().zip(out))
        .map(|(s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Visit every output position with the flat offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..numel {
        f(i, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sum `grad` (shaped `out`) down to `shape` over broadcast axes.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut acc = Tensor::zeros(shape);
    let s = broadcast_strides(shape, grad.shape());
    let zero = vec![0; shape.len()];
    let g = grad.data();
    let dst = acc.data_mut();
    for_each_broadcast(grad.shape(), &s, &zero, |i, ia, _| dst[ia] += g[i]);
    acc
}

fn broadcast_apply(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (da, db) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
    Tensor::new(&out, data)
}

fn unary<'g>(
    x: Var<'g>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'g> {
    let xv = x.value();
    let y = xv.map(f);
    let yv = std::rc::Rc::new(y.clone());
    x.graph().record(y, &[x], move |g| {
        let mut dx = g.clone();
        for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(xv.data()).zip(yv.data()) {
            *d *= df(xi, yi);
        }
        vec![Some(dx)]
    })
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'g> Var<'g> {
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let y = broadcast_apply(&a, &b, |p, q| p + q)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.graph().record(y, &[self, other], move |g| {
            vec![Some(reduce_to(g, &sa)), Some(reduce_to(g, &sb))]
        }))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let y = broadcast_apply(&a, &b, |p, q| p - q)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.graph().record(y, &[self, other], move |g| {
            let mut gb = reduce_to(g, &sb);
            gb.scale_in_place(-1.0);
            vec![Some(reduce_to(g, &sa)), Some(gb)]
        }))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let y = broadcast_apply(&a, &b, |p, q| p * q)?;
        Ok(self.graph().record(y, &[self, other], move |g| {
            let ga = broadcast_apply(g, &b, |p, q| p * q).expect("broadcast checked in forward");
            let gb = broadcast_apply(g, &a, |p, q| p * q).expect("broadcast checked in forward");
            vec![Some(reduce_to(&ga, a.shape())), Some(reduce_to(&gb, b.shape()))]
        }))
    }

    /// Element-wise quotient; `other` must be nonzero.
    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let y = broadcast_apply(&a, &b, |p, q| p / q)?;
        Ok(self.graph().record(y, &[self, other], move |g| {
            let ga = broadcast_apply(g, &b, |p, q| p / q).expect("broadcast checked in forward");
            let ab = broadcast_apply(&a, &b, |p, q| -p / (q * q)).expect("broadcast checked");
            let gb = broadcast_apply(g, &ab, |p, q| p * q).expect("broadcast checked");
            vec![Some(reduce_to(&ga, a.shape())), Some(reduce_to(&gb, b.shape()))]
        }))
    }

    pub fn scale(self, alpha: f64) -> Var<'g> {
        let y = self.value().map(|v| v * alpha);
        self.graph().record(y, &[self], move |g| vec![Some(g.map(|v| v * alpha))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let y = self.value().map(|v| v + c);
        self.graph().record(y, &[self], move |g| vec![Some(g.clone())])
    }

    pub fn square(self) -> Var<'g> {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn relu(self) -> Var<'g> {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'g> {
        unary(self, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g> {
        unary(self, gelu_scalar, |x, _| gelu_grad(x))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Var<'g> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.graph()
            .record(Tensor::scalar(xv.sum()), &[self], move |g| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut y = (*xv).clone();
        if inner == 1 {
            for row in y.data_mut().chunks_exact_mut(len) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                let inv = 1.0 / s;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        } else {
            let d = y.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut m = f64::NEG_INFINITY;
                    for k in 0..len {
                        m = m.max(d[base + k * inner]);
                    }
                    let mut s = 0.0;
                    for k in 0..len {
                        let e = (d[base + k * inner] - m).exp();
                        d[base + k * inner] = e;
                        s += e;
                    }
                    for k in 0..len {
                        d[base + k * inner] /= s;
                    }
                }
            }
        }
        let yv = std::rc::Rc::new(y);
        let yb = std::rc::Rc::clone(&yv);
        Ok(self.graph().record_shared(yv, &[self], move |g| {
            // dx = y * (g - sum_k g_k y_k)
            let mut dx = g.clone();
            let (gd, yd) = (g.data(), yb.data());
            let d = dx.data_mut();
            if inner == 1 {
                for ((dr, gr), yr) in d.chunks_exact_mut(len).zip(gd.chunks_exact(len)).zip(yd.chunks_exact(len)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gk), &yk) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yk * (gk - dot);
                    }
                }
                return vec![Some(dx)];
            }
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len)
                        .map(|k| gd[base + k * inner] * yd[base + k * inner])
                        .sum();
                    for k in 0..len {
                        let j = base + k * inner;
                        d[j] = yd[j] * (gd[j] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}
