//! Adam with global-norm clipping and a warmup + linear-decay schedule.

use ndarray::NdFloat;

use crate::model::Parameters;

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Parameters<F>,
    v: Parameters<F>,
    t: i32,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(params: &Parameters<F>, beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Parameters<F>, grads: &Parameters<F>, lr: f64) {
        self.t += 1;
        let b1 = F::from(self.beta1).unwrap();
        let b2 = F::from(self.beta2).unwrap();
        let one = F::one();
        let bc1 = F::from(1.0 - self.beta1.powi(self.t)).unwrap();
        let bc2 = F::from(1.0 - self.beta2.powi(self.t)).unwrap();
        let lr = F::from(lr).unwrap();
        let eps = F::from(self.eps).unwrap();
        let g_all = grads.named_tensors();
        let iter = params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(g_all.iter());
        for (((mut p, mut m), mut v), (_, g)) in iter {
            ndarray::Zip::from(&mut p)
                .and(&mut m)
                .and(&mut v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

pub fn global_norm<F: NdFloat>(grads: &Parameters<F>) -> f64 {
    grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().map(|v| v.to_f64().unwrap().powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so its global norm is at most `max_norm`. Returns the
/// norm before and after clipping.
pub fn clip_global_norm<F: NdFloat>(grads: &mut Parameters<F>, max_norm: f64) -> (f64, f64) {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = F::from(max_norm / norm).unwrap();
        for mut t in grads.tensors_mut() {
            t.mapv_inplace(|v| v * scale);
        }
        (norm, global_norm(grads))
    } else {
        (norm, norm)
    }
}

/// Linear warmup over `warmup_fraction` of the steps, then linear decay to zero.
pub fn learning_rate_at(step: usize, total_steps: usize, base: f64, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).ceil() as usize;
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        let remaining = total_steps.saturating_sub(warmup).max(1);
        base * (total_steps.saturating_sub(step)) as f64 / remaining as f64
    }
}
