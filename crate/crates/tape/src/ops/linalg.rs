use crate::{Graph, Real, Tensor, Var};

/// Shape bookkeeping for a (batched) matrix product.
#[derive(Clone, Copy)]
struct MatmulDims {
    batch: usize,
    m: usize,
    n: usize,
    k: usize,
    /// `b` is a single 2-D matrix shared by every batch entry.
    shared_rhs: bool,
}

fn dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> (MatmulDims, Vec<usize>) {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2 operands");
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner dims differ: {a:?} x {b:?} (ta={ta}, tb={tb})");
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_rhs = b_batch.is_empty();
    assert!(shared_rhs || a_batch == b_batch, "matmul batch dims differ: {a:?} x {b:?}");
    let batch = a_batch.iter().product();
    let mut out = a_batch.to_vec();
    out.extend([m, n]);
    (MatmulDims { batch, m, n, k, shared_rhs }, out)
}

impl<T: Real> Graph<T> {
    /// `op(a) @ op(b)` over trailing matrix axes; leading axes are batch axes.
    /// A 2-D `b` is shared across the batch of `a`.
    pub fn matmul_t(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (d, out_shape) = dims(av.shape(), bv.shape(), trans_a, trans_b);

        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        if d.shared_rhs && !trans_a {
            // Fold the batch into the row dimension.
            T::gemm(false, trans_b, d.batch * d.m, d.n, d.k, T::one(), av.data(), bv.data(), T::zero(), &mut out);
        } else {
            let b_stride = if d.shared_rhs { 0 } else { d.k * d.n };
            for i in 0..d.batch {
                T::gemm(
                    trans_a,
                    trans_b,
                    d.m,
                    d.n,
                    d.k,
                    T::one(),
                    &av.data()[i * d.m * d.k..],
                    &bv.data()[i * b_stride..],
                    T::zero(),
                    &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
                );
            }
        }
        let a_shape = av.shape().to_vec();
        let b_shape = bv.shape().to_vec();
        self.record(
            &[a, b],
            Tensor::new(&out_shape, out),
            Box::new(move |c| {
                let g = c.grad.data();
                let (x, y) = (c.inputs[0].data(), c.inputs[1].data());
                let (m, n, k) = (d.m, d.n, d.k);
                if d.shared_rhs && !trans_a {
                    let rows = d.batch * m;
                    let ga = c.needs[0].then(|| {
                        let mut ga = vec![T::zero(); x.len()];
                        T::gemm(false, !trans_b, rows, k, n, T::one(), g, y, T::zero(), &mut ga);
                        Tensor::new(&a_shape, ga)
                    });
                    let gb = c.needs[1].then(|| {
                        let mut gb = vec![T::zero(); y.len()];
                        if trans_b {
                            T::gemm(true, false, n, k, rows, T::one(), g, x, T::zero(), &mut gb);
                        } else {
                            T::gemm(true, false, k, n, rows, T::one(), x, g, T::zero(), &mut gb);
                        }
                        Tensor::new(&b_shape, gb)
                    });
                    return vec![ga, gb];
                }
                let ga = c.needs[0].then(|| {
                    let mut ga = vec![T::zero(); x.len()];
                    let b_stride = if d.shared_rhs { 0 } else { k * n };
                    for i in 0..d.batch {
                        let gi = &g[i * m * n..];
                        let yi = &y[i * b_stride..];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        // dA = G op(B)^T, transposed back when A was transposed.
                        if trans_a {
                            T::gemm(trans_b, true, k, m, n, T::one(), yi, gi, T::zero(), dst);
                        } else {
                            T::gemm(false, !trans_b, m, k, n, T::one(), gi, yi, T::zero(), dst);
                        }
                    }
                    Tensor::new(&a_shape, ga)
                });
                let gb = c.needs[1].then(|| {
                    let mut gb = vec![T::zero(); y.len()];
                    let b_stride = if d.shared_rhs { 0 } else { k * n };
                    for i in 0..d.batch {
                        let gi = &g[i * m * n..];
                        let xi = &x[i * m * k..];
                        let dst_range = i * b_stride..i * b_stride + k * n;
                        let beta = if d.shared_rhs && i > 0 { T::one() } else { T::zero() };
                        let dst = &mut gb[dst_range];
                        // dB = op(A)^T G, transposed back when B was transposed.
                        if trans_b {
                            T::gemm(true, trans_a, n, k, m, T::one(), gi, xi, beta, dst);
                        } else {
                            T::gemm(!trans_a, false, k, n, m, T::one(), xi, gi, beta, dst);
                        }
                    }
                    Tensor::new(&b_shape, gb)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x @ w + bias` with `w: [in, out]`, applied over the last axis of `x`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match bias {
            Some(b) => self.add_broadcast(y, b),
            None => y,
        }
    }
}
