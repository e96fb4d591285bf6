//! Adaptive-moment gradient descent and parameter averaging.

use ndarray::ArrayD;

use super::{sc, GradSet, ParamSet, Scalar};

pub struct Adam<F: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamSet<F>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.arrays().iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
            v: params.arrays().iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &GradSet<F>) {
        self.step += 1;
        let b1 = sc::<F>(self.beta1);
        let b2 = sc::<F>(self.beta2);
        let one = F::one();
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        let rate = sc::<F>(self.lr / bias1);
        let bias2_sqrt = sc::<F>(bias2.sqrt());
        let eps = sc::<F>(self.eps);
        for ((p, g), (m, v)) in params
            .arrays_mut()
            .iter_mut()
            .zip(grads.arrays())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= rate * *m / ((*v).sqrt() / bias2_sqrt + eps);
            });
        }
    }
}

/// Exponential moving average of parameters with warmup-capped decay
/// min(decay, (1 + t) / (10 + t)), evaluated before each update.
pub struct Ema<F: Scalar> {
    decay: f64,
    updates: u64,
    pub shadow: ParamSet<F>,
}

impl<F: Scalar> Ema<F> {
    pub fn new(params: &ParamSet<F>, decay: f64) -> Self {
        Self { decay, updates: 0, shadow: params.clone() }
    }

    pub fn update(&mut self, params: &ParamSet<F>) {
        self.updates += 1;
        let d = self.decay.min((1.0 + self.updates as f64) / (10.0 + self.updates as f64));
        let df = sc::<F>(d);
        let one = F::one();
        for (s, p) in self.shadow.arrays_mut().iter_mut().zip(params.arrays()) {
            ndarray::Zip::from(s).and(p).for_each(|s, &p| {
                *s = df * *s + (one - df) * p;
            });
        }
    }
}
