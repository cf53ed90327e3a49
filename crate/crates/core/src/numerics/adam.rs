use super::{NumericsError, ParamStore};

/// Adam optimizer state with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// β₁ = 0.9, β₂ = 0.99, ε = 1e-8.
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyperparameters(store, 0.9, 0.99, 1e-8).expect("default Adam hyperparameters")
    }

    pub fn with_hyperparameters(
        store: &ParamStore,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self, NumericsError> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta1) || !in_unit(beta2) || epsilon <= 0.0 {
            return Err(NumericsError::InvalidArgument(format!(
                "Adam needs betas in (0,1) and epsilon > 0, got {beta1}, {beta2}, {epsilon}"
            )));
        }
        let buffers = || store.iter().map(|(_, p)| vec![0.0; p.tensor().numel()]).collect();
        Ok(Self {
            step: 0,
            beta1,
            beta2,
            epsilon,
            first: buffers(),
            second: buffers(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable parameter. Frozen
    /// parameters are skipped; a trainable parameter without a gradient is an
    /// error and nothing is modified.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), NumericsError> {
        if !(lr > 0.0) {
            return Err(NumericsError::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        if store.len() != self.first.len() {
            return Err(NumericsError::InvalidArgument(
                "optimizer state was built for a different parameter set".into(),
            ));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.is_frozen() && p.tensor().grad().is_none()) {
            return Err(NumericsError::MissingGradient(p.name().to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        for (id, p) in store.iter_mut() {
            if p.is_frozen() {
                continue;
            }
            let grad = p.tensor().grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            for (((value, g), m), v) in p.tensor_mut().data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *value -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, lr: f64) -> Result<(), NumericsError> {
    state.step(store, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Backend, Graph, Tensor};

    fn scalar_store(x: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(x)).unwrap();
        store
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut store = scalar_store(1.5);
        let id = store.id("x").unwrap();
        store.get_mut(id).tensor_mut().accumulate_grad(&[0.0]).unwrap();
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).tensor().data(), &[1.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after bias correction, so the step is lr / (1 + ε).
        let mut store = scalar_store(2.0);
        let id = store.id("x").unwrap();
        store.get_mut(id).tensor_mut().accumulate_grad(&[1.0]).unwrap();
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, 0.1).unwrap();
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.get(id).tensor().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store);
        assert!(matches!(adam.step(&mut store, 0.1), Err(NumericsError::MissingGradient(_))));
        assert!(adam.step(&mut store, 0.0).is_err());
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = scalar_store(1.0);
        store.add_frozen("k", Tensor::scalar(3.0)).unwrap();
        let x = store.id("x").unwrap();
        store.get_mut(x).tensor_mut().accumulate_grad(&[1.0]).unwrap();
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(store.by_name("k").unwrap().tensor().data(), &[3.0]);
    }

    #[test]
    fn converges_on_a_parabola() {
        let mut store = scalar_store(5.0);
        let id = store.id("x").unwrap();
        let mut adam = AdamState::new(&store);
        for _ in 0..1000 {
            store.zero_grad();
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(&x, &x).unwrap();
            let loss = g.sum(&sq);
            g.backward(loss, &mut store).unwrap();
            adam.step(&mut store, 0.1).unwrap();
        }
        assert!(store.get(id).tensor().data()[0].abs() < 0.1);
    }
}
