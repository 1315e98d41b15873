use crate::{Graph, Real, Tensor, Var};

impl<T: Real> Graph<T> {
    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        self.record(
            &[a],
            Tensor::scalar(av.sum()),
            Box::new(move |c| vec![Some(Tensor::full(&shape, c.grad.item()))]),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let n = T::from_usize(av.len()).unwrap();
        let value = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        self.record(
            &[a, b],
            Tensor::scalar(value),
            Box::new(move |c| {
                let k = T::lit(2.0) * c.grad.item() / n;
                let d = c.inputs[0].zip_map(c.inputs[1], |x, y| k * (x - y));
                let nd = c.needs[1].then(|| d.map(|v| -v));
                vec![c.needs[0].then_some(d), nd]
            }),
        )
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = *av.shape().last().expect("l2_normalize_rows on scalar");
        let mut out = Vec::with_capacity(av.len());
        for row in av.data().chunks(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            assert!(norm > T::zero(), "cannot normalize a zero row");
            out.extend(row.iter().map(|&v| v / norm));
        }
        self.record(
            &[a],
            Tensor::new(av.shape(), out),
            Box::new(move |c| {
                let mut dx = Vec::with_capacity(c.output.len());
                for ((x, y), g) in c.inputs[0].data().chunks(n).zip(c.output.data().chunks(n)).zip(c.grad.data().chunks(n)) {
                    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    dx.extend(y.iter().zip(g).map(|(&yi, &gi)| (gi - yi * dot) / norm));
                }
                vec![Some(Tensor::new(c.output.shape(), dx))]
            }),
        )
    }

    /// Mean softmax cross-entropy of `logits: [N, C]` against class indices.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rank(), 2, "cross_entropy expects [N, C] logits");
        let (rows, classes) = (lv.dim(0), lv.dim(1));
        assert_eq!(targets.len(), rows);
        assert!(targets.iter().all(|&t| t < classes), "target out of range");
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = T::zero();
        for (row, &t) in lv.data().chunks(classes).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let nt = T::from_usize(rows).unwrap();
        let targets = targets.to_vec();
        self.record(
            &[logits],
            Tensor::scalar(total / nt),
            Box::new(move |c| {
                let k = c.grad.item() / nt;
                let mut d: Vec<T> = probs.iter().map(|&p| p * k).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * classes + t] -= k;
                }
                vec![Some(Tensor::new(&[rows, classes], d))]
            }),
        )
    }
}
