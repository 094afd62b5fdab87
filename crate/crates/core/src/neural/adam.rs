use super::{Gradients, Network, Real};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: i32,
    m: Gradients<F>,
    v: Gradients<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(net: &Network<F>, lr: f64) -> Self {
        Adam {
            lr: F::from_f64_lossy(lr),
            beta1: F::from_f64_lossy(0.9),
            beta2: F::from_f64_lossy(0.999),
            eps: F::from_f64_lossy(1e-8),
            t: 0,
            m: net.zero_gradients(),
            v: net.zero_gradients(),
        }
    }

    pub fn step(&mut self, net: &mut Network<F>, grads: &Gradients<F>) {
        self.t += 1;
        let one = F::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        let step = self.lr * c2.sqrt() / c1;
        let eps_hat = self.eps * c2.sqrt();
        let (b1, b2) = (self.beta1, self.beta2);
        for ((layer, g), (m, v)) in net
            .layers
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p = *p - step * *m / (v.sqrt() + eps_hat);
                });
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p = *p - step * *m / (v.sqrt() + eps_hat);
                });
        }
    }
}
