use super::{Gradients, Network};

/// Step learning-rate decay: `base * gamma^(floor((epoch - 1) / step))` for
/// 1-based epochs. A step of 0 disables decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub base: f64,
    pub step: usize,
    pub gamma: f64,
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.step == 0 {
            return self.base;
        }
        let k = (epoch.saturating_sub(1) / self.step) as i32;
        self.base * self.gamma.powi(k)
    }
}

/// Plain SGD: `θ ← θ − lr·(g + weight_decay·θ)` for every parameter.
pub fn sgd_step(net: &mut Network, grads: &Gradients, lr: f64, weight_decay: f64) {
    update(net, grads, lr, weight_decay, None);
}

/// SGD restricted to `active` flat parameter indices. Inactive parameters are
/// left untouched, including by weight decay.
pub fn sgd_step_masked(net: &mut Network, grads: &Gradients, lr: f64, weight_decay: f64, active: &[bool]) {
    assert_eq!(active.len(), net.num_params(), "activity mask must cover every parameter");
    update(net, grads, lr, weight_decay, Some(active));
}

fn update(net: &mut Network, grads: &Gradients, lr: f64, weight_decay: f64, active: Option<&[bool]>) {
    let mut offset = 0;
    for (p, g) in net.params_mut().iter_mut().zip(&grads.layers) {
        let (Some(p), Some(g)) = (p, g) else { continue };
        for (theta, grad) in [(&mut p.weight, &g.weight), (&mut p.bias, &g.bias)] {
            for (i, (t, &d)) in theta.data_mut().iter_mut().zip(grad.data()).enumerate() {
                if active.is_some_and(|a| !a[offset + i]) {
                    continue;
                }
                let step = d + weight_decay * *t;
                if step != 0.0 {
                    *t -= lr * step;
                }
            }
            offset += grad.len();
        }
    }
}
