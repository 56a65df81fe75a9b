//! Adam and the step-decay learning-rate schedule.

use cvaegan_tensor::{EntryKind, ParamStore, Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one [`ParamStore`], indexed like its entries.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments of entry `index`, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match (self.m.get(index), self.v.get(index)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    /// Rebuilds optimizer state from saved parts (used on resume).
    pub fn restore(&mut self, step: u64, moments: Vec<Option<(Tensor<T>, Tensor<T>)>>) {
        self.step = step;
        let (m, v) = moments
            .into_iter()
            .map(|o| match o {
                Some((m, v)) => (Some(m), Some(v)),
                None => (None, None),
            })
            .unzip();
        self.m = m;
        self.v = v;
    }

    /// One bias-corrected Adam update of every trainable entry, consuming
    /// (and clearing) the accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        let n = store.len();
        for e in store.entries() {
            if e.kind == EntryKind::Trainable && e.grad.is_none() {
                return Err(Error::Contract(format!("parameter `{}` has no gradient", e.name)));
            }
        }
        self.m.resize(n, None);
        self.v.resize(n, None);
        self.step += 1;

        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));

        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let entry = store.entry_mut(id);
            if entry.kind != EntryKind::Trainable {
                continue;
            }
            let grad = entry.grad.take().expect("checked above");
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            let p = entry.value.data_mut();
            for (((p, &g), m), v) in p
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// `lr(epoch) = base_lr · decay_factor^floor(epoch / decay_every)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, decay_factor: f64, decay_every: usize) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::config(format!("base learning rate must be positive, got {base_lr}")));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(Error::config(format!("decay factor must lie in (0, 1], got {decay_factor}")));
        }
        if decay_every == 0 {
            return Err(Error::config("decay_every must be positive"));
        }
        Ok(Schedule {
            base_lr,
            decay_factor,
            decay_every,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.decay_every).min(i32::MAX as usize) as i32;
        self.base_lr * self.decay_factor.powi(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_trainable("p", Tensor::scalar(value));
        s
    }

    fn set_grad(store: &mut ParamStore<f64>, g: f64) {
        let id = store.find("p").unwrap();
        store.entry_mut(id).grad = Some(Tensor::scalar(g));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        set_grad(&mut store, 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, 0.001).unwrap();
        let p = store.value(store.find("p").unwrap()).item().unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((p - (-0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = scalar_store(0.25);
        set_grad(&mut store, 0.0);
        Adam::new(AdamConfig::default()).step(&mut store, 0.01).unwrap();
        assert_eq!(store.value(store.find("p").unwrap()).item().unwrap(), 0.25);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut store = scalar_store(0.0);
        let err = Adam::new(AdamConfig::default()).step(&mut store, 0.01).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = scalar_store(0.0);
        store.add_buffer("b", Tensor::scalar(3.0));
        set_grad(&mut store, 1.0);
        Adam::new(AdamConfig::default()).step(&mut store, 0.1).unwrap();
        assert_eq!(store.value(store.find("b").unwrap()).item().unwrap(), 3.0);
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(0.0002, 0.2, 25).unwrap();
        assert_eq!(s.lr_at(0), 0.0002);
        assert!((s.lr_at(24) - 0.0002).abs() < 1e-18);
        assert!((s.lr_at(25) - 4e-5).abs() < 1e-18);
        let s = Schedule::new(0.002, 0.2, 25).unwrap();
        assert!((s.lr_at(50) - 8e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_rejects_bad_values() {
        assert!(Schedule::new(0.0, 0.2, 25).is_err());
        assert!(Schedule::new(0.1, 1.5, 25).is_err());
        assert!(Schedule::new(0.1, 0.2, 0).is_err());
    }
}
