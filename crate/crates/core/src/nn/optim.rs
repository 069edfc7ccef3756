use super::params::ParamSet;
use super::tape::Gradients;
use crate::scalar::Scalar;

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub clip_norm: Option<T>,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            clip_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = T::of(beta1);
        self.beta2 = T::of(beta2);
        self
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(T::of(norm));
        self
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) {
        if self.m.len() != params.len() {
            self.m = (0..params.len()).map(|i| vec![T::zero(); params.get(i).len()]).collect();
            self.v = self.m.clone();
        }
        let collected: Vec<Option<Vec<T>>> = (0..params.len()).map(|i| grads.param(i)).collect();
        let scale = match self.clip_norm {
            Some(limit) => {
                let norm = collected
                    .iter()
                    .flatten()
                    .flat_map(|g| g.iter())
                    .map(|&x| x * x)
                    .sum::<T>()
                    .sqrt();
                if norm > limit { limit / norm } else { T::one() }
            }
            None => T::one(),
        };
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for (i, g) in collected.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(i);
            for j in 0..g.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Plain stochastic gradient descent.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr: T::of(lr) }
    }

    pub fn step(&self, params: &mut ParamSet<T>, grads: &Gradients<T>) {
        for i in 0..params.len() {
            if let Some(g) = grads.param(i) {
                let p = params.get_mut(i);
                p.data.iter_mut().zip(&g).for_each(|(x, &d)| *x -= self.lr * d);
            }
        }
    }
}
