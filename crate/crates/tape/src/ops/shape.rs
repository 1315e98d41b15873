use crate::tensor::strides;
use crate::{Graph, Real, Tensor, Var};

fn permute_data<T: Real>(src: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = src.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    // Stride in the source for each output axis.
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; out_shape.len()];
    let data = src.data();
    if src.is_empty() {
        return Tensor::new(&out_shape, out);
    }
    let mut offset = 0usize;
    loop {
        out.push(data[offset]);
        // Odometer increment over the output index.
        let mut axis = out_shape.len();
        loop {
            if axis == 0 {
                return Tensor::new(&out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            offset += walk[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= walk[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let original = av.shape().to_vec();
        let value = (*av).clone().reshaped(shape);
        self.record(&[a], value, Box::new(move |c| vec![Some(c.grad.clone().reshaped(&original))]))
    }

    /// General axis permutation; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(perm.len(), av.rank(), "permute rank mismatch");
        let value = permute_data(&av, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.record(&[a], value, Box::new(move |c| vec![Some(permute_data(c.grad, &inverse))]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self, a: Var) -> Var {
        let r = self.shape(a).len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let base = values[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                let s = v.shape();
                assert!(
                    s.len() == base.len() && s[..axis] == base[..axis] && s[axis + 1..] == base[axis + 1..],
                    "concat shape mismatch: {s:?} vs {base:?}"
                );
                s[axis]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let part_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.record(
            parts,
            Tensor::new(&shape, out),
            Box::new(move |c| {
                let g = c.grad.data();
                let mut start = 0;
                widths
                    .iter()
                    .zip(&part_shapes)
                    .enumerate()
                    .map(|(i, (&w, ps))| {
                        let offset = start;
                        start += w;
                        c.needs[i].then(|| {
                            let mut d = Vec::with_capacity(outer * w * inner);
                            for o in 0..outer {
                                let row = o * total * inner + offset * inner;
                                d.extend_from_slice(&g[row..row + w * inner]);
                            }
                            Tensor::new(ps, d)
                        })
                    })
                    .collect()
            }),
        )
    }

    /// `a[.., start..start + len, ..]` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        assert!(start + len <= shape[axis], "slice {start}+{len} out of range for {shape:?} axis {axis}");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let row = (o * full + start) * inner;
            out.extend_from_slice(&av.data()[row..row + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.record(
            &[a],
            Tensor::new(&out_shape, out),
            Box::new(move |c| {
                let mut d = vec![T::zero(); outer * full * inner];
                for (o, chunk) in c.grad.data().chunks(len * inner).enumerate() {
                    let row = (o * full + start) * inner;
                    d[row..row + len * inner].copy_from_slice(chunk);
                }
                vec![Some(Tensor::new(&shape, d))]
            }),
        )
    }

    /// Zero padding on the last axis.
    pub fn pad_last(&self, a: Var, left: usize, right: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let len = *shape.last().expect("pad_last on scalar");
        let new_len = left + len + right;
        let mut out = Vec::with_capacity(av.len() / len.max(1) * new_len);
        for row in av.data().chunks(len) {
            out.extend(std::iter::repeat_n(T::zero(), left));
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(T::zero(), right));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = new_len;
        self.record(
            &[a],
            Tensor::new(&out_shape, out),
            Box::new(move |c| {
                let mut d = Vec::with_capacity(shape.iter().product());
                for row in c.grad.data().chunks(new_len) {
                    d.extend_from_slice(&row[left..left + len]);
                }
                vec![Some(Tensor::new(&shape, d))]
            }),
        )
    }
}
