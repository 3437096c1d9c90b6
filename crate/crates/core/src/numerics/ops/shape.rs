use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::numerics::tensor::{strides, Tensor};

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    // stride in the source for each output axis
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut data = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let xd = x.data();
    for _ in 0..x.numel() {
        data.push(xd[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, data).expect("permutation preserves element count")
}

impl<'g> Var<'g> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let xv = self.value();
        let y = xv.reshape(shape)?;
        let orig = xv.shape().to_vec();
        Ok(self.graph().record(y, &[self], move |g| {
            vec![Some(g.reshape(&orig).expect("same element count"))]
        }))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g>> {
        let xv = self.value();
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!(
                "{axes:?} is not a permutation of the axes of {:?}",
                xv.shape()
            )));
        }
        let y = permute_tensor(&xv, axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self
            .graph()
            .record(y, &[self], move |g| vec![Some(permute_tensor(g, &inverse))]))
    }

    /// `[N, C, H, W]` feature map to `[N, H*W, C]` token sequence.
    pub fn map_to_tokens(self) -> Result<Var<'g>> {
        let [n, c, h, w] = self.value().dims4()?;
        self.reshape(&[n, c, h * w])?.permute(&[0, 2, 1])
    }

    /// `[N, H*W, C]` token sequence back to a `[N, C, H, W]` map.
    pub fn tokens_to_map(self, h: usize, w: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        let [n, l, c] = shape[..] else {
            return Err(Error::shape(format!("expected [N, L, C] tokens, got {shape:?}")));
        };
        if l != h * w {
            return Err(Error::shape(format!("{l} tokens cannot form a {h}x{w} map")));
        }
        self.permute(&[0, 2, 1])?.reshape(&[n, c, h, w])
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of an empty list"))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
    }
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let mut sizes = Vec::with_capacity(parts.len());
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape(format!(
                "concat along axis {axis}: {s:?} does not match {base:?}"
            )));
        }
        sizes.push(s[axis]);
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let total: usize = sizes.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &s) in values.iter().zip(&sizes) {
            data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
        }
    }
    let y = Tensor::new(&out_shape, data)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.graph().record(y, parts, move |g| {
        let gd = g.data();
        let mut out: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
        for o in 0..outer {
            let mut off = o * total * inner;
            for (buf, &s) in out.iter_mut().zip(&sizes) {
                buf.extend_from_slice(&gd[off..off + s * inner]);
                off += s * inner;
            }
        }
        out.into_iter()
            .zip(&shapes)
            .map(|(d, s)| Some(Tensor::new(s, d).expect("split sizes")))
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;

    #[test]
    fn permute_transposes() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap());
        let y = x.permute(&[1, 0]).unwrap().value();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn tokens_round_trip() {
        let g = Graph::new();
        let x = g.input(Tensor::new(&[1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap());
        let t = x.map_to_tokens().unwrap();
        assert_eq!(t.shape(), vec![1, 6, 2]);
        // token 1 = pixel (0,1) across both channels
        assert_eq!(&t.value().data()[2..4], &[1.0, 7.0]);
        let back = t.tokens_to_map(2, 3).unwrap();
        assert_eq!(*back.value(), *x.value());
    }

    #[test]
    fn concat_channels_and_split_gradient() {
        let g = Graph::new();
        let a = g.input(Tensor::full(&[2, 1, 2, 2], 1.0));
        let b = g.input(Tensor::full(&[2, 3, 2, 2], 2.0));
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 4, 2, 2]);
        assert_eq!(&c.value().data()[..8], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let w = g.constant(Tensor::new(&[2, 4, 2, 2], (0..32).map(f64::from).collect()).unwrap());
        let grads = g.backward(c.mul(w).unwrap().sum()).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 2.0, 3.0, 16.0, 17.0, 18.0, 19.0]);
        assert_eq!(grads.get(b).unwrap().data()[0], 4.0);
    }

    #[test]
    fn concat_rejects_mismatch() {
        let g = Graph::new();
        let a = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.input(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(concat(&[a, b], 1).is_err());
    }
}
