use crate::{ParamStore, Real, Tensor};

/// Adam with decoupled bookkeeping per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: Vec<Option<Tensor<T>>>, lr: f64) -> f64 {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        let clip = T::lit(clip);
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            let shape = g.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let g = g * clip;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}

/// Cosine decay from `base` to `base * floor` over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64, floor: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base * (floor + (1.0 - floor) * cos)
}
