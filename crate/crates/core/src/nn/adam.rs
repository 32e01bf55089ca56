use std::collections::BTreeMap;

use super::tape::Arr;
use super::VarStore;

/// Adam with decoupled-from-nothing classic L2: weight decay is added to the
/// raw gradient before the moment updates.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment maps, for checkpointing.
    pub fn moments(&self) -> (&BTreeMap<String, Arr>, &BTreeMap<String, Arr>) {
        (&self.m, &self.v)
    }

    /// Rebuild an optimizer mid-run from checkpointed state.
    pub fn restore(
        lr: f64,
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
        step: u64,
        m: BTreeMap<String, Arr>,
        v: BTreeMap<String, Arr>,
    ) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step,
            m,
            v,
        }
    }

    /// Apply one update from named gradients. Parameters without a gradient
    /// entry are left untouched (frozen or unused this step).
    pub fn step(&mut self, store: &mut VarStore, grads: &BTreeMap<String, Arr>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else {
                continue;
            };
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g = &g + &param.mapv(|p| p * self.weight_decay);
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(&g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize f(w) = (w - 3)^2 elementwise
        let mut store = VarStore::new();
        store.insert("w", Arr::from_elem(IxDyn(&[4]), 0.0), true);
        let mut opt = Adam::new(0.1, 0.9, 0.999, 0.0);
        for _ in 0..500 {
            let w = store.get("w").unwrap();
            let grad = w.mapv(|v| 2.0 * (v - 3.0));
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), grad);
            opt.step(&mut store, &grads);
        }
        let w = store.get("w").unwrap();
        assert!(w.iter().all(|v| (v - 3.0).abs() < 1e-3), "w = {w:?}");
    }

    #[test]
    fn weight_decay_shrinks_stationary_weights() {
        let mut store = VarStore::new();
        store.insert("w", Arr::from_elem(IxDyn(&[1]), 5.0), true);
        let mut opt = Adam::new(0.05, 0.9, 0.999, 0.1);
        for _ in 0..200 {
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Arr::zeros(IxDyn(&[1])));
            opt.step(&mut store, &grads);
        }
        let w = store.get("w").unwrap()[[0]];
        assert!(w.abs() < 5.0, "decay failed: {w}");
    }
}
