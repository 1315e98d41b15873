use crate::{Graph, Real, Tensor, Var};

impl<T: Real> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.record(&[a, b], value, Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.record(
            &[a, b],
            value,
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))]),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.record(
            &[a, b],
            value,
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.record(&[a], value, Box::new(move |c| vec![Some(c.grad.map(|g| g * factor))]))
    }

    /// `a + b` where `b` is broadcast over every leading axis of `a`
    /// (`b.shape()` must be a suffix of `a.shape()`).
    pub fn add_broadcast(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let n = bv.len();
        assert!(
            av.shape().ends_with(bv.shape()),
            "add_broadcast: {:?} is not a suffix of {:?}",
            bv.shape(),
            av.shape()
        );
        let mut out = (*av).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let b_shape = bv.shape().to_vec();
        self.record(
            &[a, b],
            out,
            Box::new(move |c| {
                let gb = c.needs[1].then(|| {
                    let mut acc = vec![T::zero(); n];
                    for chunk in c.grad.data().chunks(n) {
                        for (a, &g) in acc.iter_mut().zip(chunk) {
                            *a += g;
                        }
                    }
                    Tensor::new(&b_shape, acc)
                });
                vec![Some(c.grad.clone()), gb]
            }),
        )
    }

    /// Adds a per-channel bias `b: [C]` to `a: [B, C, L]`.
    pub fn add_channel_bias(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.rank(), 3, "add_channel_bias expects [B, C, L]");
        let (ch, len) = (av.dim(1), av.dim(2));
        assert_eq!(bv.len(), ch);
        let mut out = (*av).clone();
        for (i, row) in out.data_mut().chunks_mut(len).enumerate() {
            let bias = bv.data()[i % ch];
            row.iter_mut().for_each(|x| *x += bias);
        }
        self.record(
            &[a, b],
            out,
            Box::new(move |c| {
                let gb = c.needs[1].then(|| {
                    let mut acc = vec![T::zero(); ch];
                    for (i, row) in c.grad.data().chunks(len).enumerate() {
                        acc[i % ch] += row.iter().copied().sum::<T>();
                    }
                    Tensor::new(&[ch], acc)
                });
                vec![Some(c.grad.clone()), gb]
            }),
        )
    }

    pub fn elu(&self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x.exp() - T::one() });
        self.record(
            &[a],
            value,
            Box::new(|c| {
                let mut g = c.grad.clone();
                for (gi, &y) in g.data_mut().iter_mut().zip(c.output.data()) {
                    if y <= T::zero() {
                        *gi *= y + T::one();
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.record(
            &[a],
            value,
            Box::new(|c| {
                vec![Some(c.grad.zip_map(c.output, |g, y| if y > T::zero() { g } else { T::zero() }))]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c3 = T::lit(0.044715);
        let half = T::lit(0.5);
        let value = self.value(a).map(|x| half * x * (T::one() + (k * (x + c3 * x * x * x)).tanh()));
        self.record(
            &[a],
            value,
            Box::new(move |c| {
                let g = c.grad.zip_map(c.inputs[0], |g, x| {
                    let u = k * (x + c3 * x * x * x);
                    let t = u.tanh();
                    let du = k * (T::one() + T::lit(3.0) * c3 * x * x);
                    g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.record(
            &[a],
            value,
            Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, y| g * (T::one() - y * y)))]),
        )
    }

    /// Value of `quantized`, gradient of identity with respect to `a`
    /// (straight-through estimator).
    pub fn straight_through(&self, a: Var, quantized: Tensor<T>) -> Var {
        assert_eq!(self.shape(a), quantized.shape(), "straight_through shape mismatch");
        self.record(&[a], quantized, Box::new(|c| vec![Some(c.grad.clone())]))
    }
}
