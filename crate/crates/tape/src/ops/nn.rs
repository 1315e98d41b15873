use crate::{Graph, Real, Tensor, Var};

/// Geometry of a strided 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeometry {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dGeometry {
    pub fn same(kernel: usize) -> Self {
        let total = kernel - 1;
        Self { stride: 1, pad_left: total / 2, pad_right: total - total / 2 }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        let padded = len + self.pad_left + self.pad_right;
        assert!(padded >= kernel, "conv1d input ({len}) shorter than kernel ({kernel})");
        (padded - kernel) / self.stride + 1
    }
}

fn im2col<T: Real>(x: &[T], cin: usize, len: usize, k: usize, geo: Conv1dGeometry, lout: usize, cols: &mut [T]) {
    for ci in 0..cin {
        let row_in = &x[ci * len..(ci + 1) * len];
        for kk in 0..k {
            let dst = &mut cols[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
            for (t, d) in dst.iter_mut().enumerate() {
                let pos = (t * geo.stride + kk) as isize - geo.pad_left as isize;
                *d = if pos >= 0 && (pos as usize) < len { row_in[pos as usize] } else { T::zero() };
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], cin: usize, len: usize, k: usize, geo: Conv1dGeometry, lout: usize, dx: &mut [T]) {
    for ci in 0..cin {
        for kk in 0..k {
            let src = &cols[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
            for (t, &v) in src.iter().enumerate() {
                let pos = (t * geo.stride + kk) as isize - geo.pad_left as isize;
                if pos >= 0 && (pos as usize) < len {
                    dx[ci * len + pos as usize] += v;
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("layer_norm on scalar");
        let eps_t = T::lit(eps);
        let nt = T::from_usize(n).unwrap();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        assert_eq!(gv.len(), n);
        assert_eq!(bv.len(), n);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let inv = T::one() / (var + eps_t).sqrt();
            for (i, &v) in row.iter().enumerate() {
                out.push((v - mean) * inv * gv.data()[i] + bv.data()[i]);
            }
        }
        let shape = xv.shape().to_vec();
        self.record(
            &[x, gamma, beta],
            Tensor::new(&shape, out),
            Box::new(move |c| {
                let (xd, gd) = (c.inputs[0].data(), c.inputs[1].data());
                let mut dx = vec![T::zero(); xd.len()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for (r, (row, grow)) in xd.chunks(n).zip(c.grad.data().chunks(n)).enumerate() {
                    let mean = row.iter().copied().sum::<T>() / nt;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
                    let inv = T::one() / (var + eps_t).sqrt();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..n {
                        xhat[i] = (row[i] - mean) * inv;
                        dxhat[i] = grow[i] * gd[i];
                        dgamma[i] += grow[i] * xhat[i];
                        dbeta[i] += grow[i];
                        m1 += dxhat[i];
                        m2 += dxhat[i] * xhat[i];
                    }
                    m1 /= nt;
                    m2 /= nt;
                    for i in 0..n {
                        dx[r * n + i] = inv * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                vec![
                    Some(Tensor::new(&shape, dx)),
                    c.needs[1].then(|| Tensor::new(&[n], dgamma)),
                    c.needs[2].then(|| Tensor::new(&[n], dbeta)),
                ]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("softmax on scalar");
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        self.record(
            &[x],
            Tensor::new(xv.shape(), out),
            Box::new(move |c| {
                let mut dx = Vec::with_capacity(c.output.len());
                for (y, g) in c.output.data().chunks(n).zip(c.grad.data().chunks(n)) {
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    dx.extend(y.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
                }
                vec![Some(Tensor::new(c.output.shape(), dx))]
            }),
        )
    }

    /// 1-D convolution: `x: [B, Cin, L]`, `w: [Cout, Cin, K]` -> `[B, Cout, Lout]`.
    pub fn conv1d(&self, x: Var, w: Var, geo: Conv1dGeometry) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.rank(), 3, "conv1d input must be [B, Cin, L]");
        assert_eq!(wv.rank(), 3, "conv1d weight must be [Cout, Cin, K]");
        let (batch, cin, len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (cout, wcin, k) = (wv.dim(0), wv.dim(1), wv.dim(2));
        assert_eq!(cin, wcin, "conv1d channel mismatch");
        let lout = geo.out_len(len, k);
        let ck = cin * k;
        let mut cols = vec![T::zero(); ck * lout];
        let mut out = vec![T::zero(); batch * cout * lout];
        for b in 0..batch {
            im2col(&xv.data()[b * cin * len..(b + 1) * cin * len], cin, len, k, geo, lout, &mut cols);
            T::gemm(false, false, cout, lout, ck, T::one(), wv.data(), &cols, T::zero(), &mut out[b * cout * lout..(b + 1) * cout * lout]);
        }
        self.record(
            &[x, w],
            Tensor::new(&[batch, cout, lout], out),
            Box::new(move |c| {
                let (xd, wd, gd) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let mut cols = vec![T::zero(); ck * lout];
                let mut dcols = vec![T::zero(); ck * lout];
                let mut dx = c.needs[0].then(|| vec![T::zero(); xd.len()]);
                let mut dw = c.needs[1].then(|| vec![T::zero(); wd.len()]);
                for b in 0..batch {
                    let gb = &gd[b * cout * lout..(b + 1) * cout * lout];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xd[b * cin * len..(b + 1) * cin * len], cin, len, k, geo, lout, &mut cols);
                        T::gemm(false, true, cout, ck, lout, T::one(), gb, &cols, T::one(), dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(true, false, ck, lout, cout, T::one(), wd, gb, T::zero(), &mut dcols);
                        col2im(&dcols, cin, len, k, geo, lout, &mut dx[b * cin * len..(b + 1) * cin * len]);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(&[batch, cin, len], d)),
                    dw.map(|d| Tensor::new(&[cout, cin, k], d)),
                ]
            }),
        )
    }

    /// Transposed 1-D convolution: `x: [B, Cin, L]`, `w: [Cin, Cout, K]`
    /// -> `[B, Cout, (L - 1) * stride + K]`.
    pub fn conv_transpose1d(&self, x: Var, w: Var, stride: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.rank(), 3, "conv_transpose1d input must be [B, Cin, L]");
        assert_eq!(wv.rank(), 3, "conv_transpose1d weight must be [Cin, Cout, K]");
        let (batch, cin, len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (wcin, cout, k) = (wv.dim(0), wv.dim(1), wv.dim(2));
        assert_eq!(cin, wcin, "conv_transpose1d channel mismatch");
        let lout = (len - 1) * stride + k;
        let ck = cout * k;
        // Scattering cols [Cout*K, L] with this geometry is exactly col2im of a
        // stride-`stride` convolution over the output.
        let geo = Conv1dGeometry { stride, pad_left: 0, pad_right: 0 };
        let mut cols = vec![T::zero(); ck * len];
        let mut out = vec![T::zero(); batch * cout * lout];
        for b in 0..batch {
            T::gemm(true, false, ck, len, cin, T::one(), wv.data(), &xv.data()[b * cin * len..], T::zero(), &mut cols);
            col2im(&cols, cout, lout, k, geo, len, &mut out[b * cout * lout..(b + 1) * cout * lout]);
        }
        self.record(
            &[x, w],
            Tensor::new(&[batch, cout, lout], out),
            Box::new(move |c| {
                let (xd, wd, gd) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let mut dcols = vec![T::zero(); ck * len];
                let mut dx = c.needs[0].then(|| vec![T::zero(); xd.len()]);
                let mut dw = c.needs[1].then(|| vec![T::zero(); wd.len()]);
                for b in 0..batch {
                    im2col(&gd[b * cout * lout..(b + 1) * cout * lout], cout, lout, k, geo, len, &mut dcols);
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(false, false, cin, len, ck, T::one(), wd, &dcols, T::zero(), &mut dx[b * cin * len..(b + 1) * cin * len]);
                    }
                    if let Some(dw) = dw.as_mut() {
                        T::gemm(false, true, cin, ck, len, T::one(), &xd[b * cin * len..], &dcols, T::one(), dw);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(&[batch, cin, len], d)),
                    dw.map(|d| Tensor::new(&[cin, cout, k], d)),
                ]
            }),
        )
    }

    /// Expands a relative-position table `[H, 2 * max_offset + 1]` into
    /// `[H, S, S]` with entry `(h, i, j)` = `table[h, clamp(j - i) + max_offset]`.
    pub fn relative_bias(&self, table: Var, seq: usize, max_offset: usize) -> Var {
        let tv = self.value(table);
        assert_eq!(tv.rank(), 2);
        let heads = tv.dim(0);
        let width = 2 * max_offset + 1;
        assert_eq!(tv.dim(1), width, "relative bias table width");
        let bucket = move |i: usize, j: usize| {
            let off = (j as isize - i as isize).clamp(-(max_offset as isize), max_offset as isize);
            (off + max_offset as isize) as usize
        };
        let mut out = Vec::with_capacity(heads * seq * seq);
        for h in 0..heads {
            for i in 0..seq {
                for j in 0..seq {
                    out.push(tv.data()[h * width + bucket(i, j)]);
                }
            }
        }
        self.record(
            &[table],
            Tensor::new(&[heads, seq, seq], out),
            Box::new(move |c| {
                let mut d = vec![T::zero(); heads * width];
                let g = c.grad.data();
                for h in 0..heads {
                    for i in 0..seq {
                        for j in 0..seq {
                            d[h * width + bucket(i, j)] += g[(h * seq + i) * seq + j];
                        }
                    }
                }
                vec![Some(Tensor::new(&[heads, width], d))]
            }),
        )
    }
}
