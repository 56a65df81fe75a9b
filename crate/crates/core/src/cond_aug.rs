//! Conditioning augmentation: embedding → diagonal Gaussian → sampled
//! condition, plus the KL regularizer that keeps it near N(0, I).

use cvaegan_tensor::{Dense, Graph, Mode, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

pub const COND_DIM: usize = 128;

#[derive(Clone, Debug)]
pub struct CondAug {
    pub dense: Dense,
    pub embed_dim: usize,
    pub cond_dim: usize,
}

/// Graph handles for one conditioned batch, each `[batch, cond_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct ConditionVars {
    pub mu: Var,
    pub log_var: Var,
    pub c_hat: Var,
}

/// Materialized values of [`ConditionVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedLatent<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
    pub c_hat: Tensor<T>,
}

impl<T: Scalar> ConditionedLatent<T> {
    pub fn from_graph(g: &Graph<T>, vars: ConditionVars) -> Self {
        ConditionedLatent {
            mu: g.value(vars.mu).clone(),
            log_var: g.value(vars.log_var).clone(),
            c_hat: g.value(vars.c_hat).clone(),
        }
    }
}

impl CondAug {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        embed_dim: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Self {
        CondAug {
            dense: Dense::new(store, name, embed_dim, 2 * cond_dim, true, rng),
            embed_dim,
            cond_dim,
        }
    }

    /// One dense layer whose `2·cond_dim` outputs split into `(mu, log_var)`.
    pub fn embed_to_gaussian<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        phi: Var,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(phi);
        if shape.len() != 2 || shape[1] != self.embed_dim {
            return Err(Error::config(format!(
                "embedding of shape {shape:?} does not match embedding dim {}",
                self.embed_dim
            )));
        }
        let out = self.dense.forward(g, store, phi, mode)?;
        let mu = g.narrow(out, 0, self.cond_dim)?;
        let log_var = g.narrow(out, self.cond_dim, self.cond_dim)?;
        Ok((mu, log_var))
    }

    /// Gaussian parameters and a reparameterized sample using the supplied
    /// standard-normal `eps` of shape `[batch, cond_dim]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        phi: Var,
        eps: Tensor<T>,
        mode: Mode,
    ) -> Result<ConditionVars> {
        let (mu, log_var) = self.embed_to_gaussian(g, store, phi, mode)?;
        let eps = g.constant(eps);
        let c_hat = sample_condition(g, mu, log_var, eps)?;
        Ok(ConditionVars { mu, log_var, c_hat })
    }
}

/// `c_hat = mu + exp(log_var / 2) ⊙ eps`.
pub fn sample_condition<T: Scalar>(g: &mut Graph<T>, mu: Var, log_var: Var, eps: Var) -> Result<Var> {
    let half = g.scale(log_var, 0.5)?;
    let std = g.exp(half)?;
    let noise = g.mul(std, eps)?;
    Ok(g.add(mu, noise)?)
}

/// `½ Σ (mu² + exp(log_var) − 1 − log_var)` summed over features and averaged
/// over the leading batch axis (a rank-1 input is a batch of one).
pub fn kl_to_standard_normal<T: Scalar>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Result<Var> {
    let batch = match g.shape(mu) {
        [b, _, ..] => *b,
        _ => 1,
    };
    let mu2 = g.square(mu)?;
    let var = g.exp(log_var)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, log_var)?;
    let c = g.add_scalar(b, -1.0)?;
    let s = g.sum(c)?;
    Ok(g.scale(s, 0.5 / batch as f64)?)
}

/// i.i.d. standard-normal tensor, drawn in `f64` so that both precisions see
/// the same noise for the same RNG state.
pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Tensor<T> {
    cvaegan_tensor::normal_tensor(shape, 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kl_value(mu: &[f64], lv: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let n = mu.len();
        let mu = g.input(Tensor::from_f64([1, n], mu).unwrap(), false);
        let lv = g.input(Tensor::from_f64([1, n], lv).unwrap(), false);
        let kl = kl_to_standard_normal(&mut g, mu, lv).unwrap();
        g.value(kl).item().unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_value(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_value(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        assert!((kl_value(&[0.0], &[1.0]) - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_wrt_mu_is_mu() {
        let mut g = Graph::<f64>::new();
        let mu_v = [0.3, -1.2, 2.0];
        let mu = g.input(Tensor::from_f64([1, 3], &mu_v).unwrap(), true);
        let lv = g.input(Tensor::from_f64([1, 3], &[0.1, 0.2, -0.4]).unwrap(), true);
        let kl = kl_to_standard_normal(&mut g, mu, lv).unwrap();
        g.backward(kl).unwrap();
        assert_eq!(g.grad(mu).unwrap(), &mu_v);
    }

    #[test]
    fn sample_condition_examples() {
        let run = |mu: f64, lv: f64, eps: f64| {
            let mut g = Graph::<f64>::new();
            let mu = g.input(Tensor::scalar(mu), false);
            let lv = g.input(Tensor::scalar(lv), false);
            let eps = g.input(Tensor::scalar(eps), false);
            let c = sample_condition(&mut g, mu, lv, eps).unwrap();
            g.value(c).item().unwrap()
        };
        assert_eq!(run(0.7, 0.3, 0.0), 0.7);
        assert_eq!(run(0.0, 0.0, -1.25), -1.25);
        assert!((run(1.0, 4f64.ln(), 0.5) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sample_gradient_skips_eps() {
        let mut g = Graph::<f64>::new();
        let mu = g.input(Tensor::scalar(0.5), true);
        let lv = g.input(Tensor::scalar(0.2), true);
        let eps = g.constant(Tensor::scalar(0.9));
        let c = sample_condition(&mut g, mu, lv, eps).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(mu).unwrap(), &[1.0]);
        assert!((g.grad(lv).unwrap()[0] - 0.5 * 0.9 * (0.1f64).exp()).abs() < 1e-12);
        assert!(g.grad(eps).is_none());
    }

    #[test]
    fn embed_to_gaussian_shapes_and_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let ca = CondAug::new(&mut store, "ca", 64, COND_DIM, &mut rng);
        let mut g = Graph::new();
        let phi = g.input(Tensor::ones([2, 64]), false);
        let (mu, lv) = ca.embed_to_gaussian(&mut g, &store, phi, Mode::EVAL).unwrap();
        assert_eq!(g.shape(mu), &[2, 128]);
        assert_eq!(g.shape(lv), &[2, 128]);

        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let mut g = Graph::new();
        let phi = g.input(Tensor::ones([1, 64]), false);
        let (mu, lv) = ca.embed_to_gaussian(&mut g, &store, phi, Mode::EVAL).unwrap();
        assert!(g.value(mu).data().iter().chain(g.value(lv).data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weight_copies_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let ca = CondAug::new(&mut store, "ca", 130, 128, &mut rng);
        let mut w = Tensor::zeros([130, 256]);
        for i in 0..128 {
            w.data_mut()[i * 256 + i] = 1.0;
        }
        store.set_value(ca.dense.weight, w).unwrap();
        store.set_value(ca.dense.bias.unwrap(), Tensor::zeros([256])).unwrap();
        let phi_v: Vec<f64> = (0..130).map(|i| i as f64 * 0.01 - 0.5).collect();
        let mut g = Graph::new();
        let phi = g.input(Tensor::from_f64([1, 130], &phi_v).unwrap(), false);
        let (mu, _) = ca.embed_to_gaussian(&mut g, &store, phi, Mode::EVAL).unwrap();
        assert_eq!(g.value(mu).data(), &phi_v[..128]);
    }

    #[test]
    fn wrong_embedding_dim_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let ca = CondAug::new(&mut store, "ca", 64, 128, &mut rng);
        let mut g = Graph::new();
        let phi = g.input(Tensor::ones([1, 32]), false);
        let err = ca.embed_to_gaussian(&mut g, &store, phi, Mode::EVAL).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
