//! AdamW with decoupled weight decay.

use crate::{ParamId, ParamKind, ParamStore, Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates, indexed like the parameter store they were built for.
#[derive(Debug, Clone)]
pub struct OptState<T> {
    pub hyper: AdamW,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Real> OptState<T> {
    pub fn new(hyper: AdamW, n_params: usize) -> Self {
        Self {
            hyper,
            step: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// Weight decay is applied only to entries registered with
    /// `ParamKind::Trainable { decay: true }`. Buffers are never touched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(TensorError::InvalidArgument(format!("learning rate {lr}")));
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        // Validate everything before mutating anything.
        for (id, g) in grads {
            if store.get(*id).shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    left: store.get(*id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (id, g) in grads {
            let decay = match store.entry(*id).kind {
                ParamKind::Trainable { decay } => decay,
                ParamKind::Buffer => continue,
            };
            let p = store.get_mut(*id);
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            adamw_kernel(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), h, decay, lr, bc1, bc2);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn adamw_kernel<T: Real>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    h: AdamW,
    decay: bool,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - h.beta1), T::lit(1.0 - h.beta2));
    let shrink = T::lit(1.0 - lr * h.weight_decay);
    let (lr_t, eps) = (T::lit(lr), T::lit(h.eps));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    for i in 0..p.len() {
        if decay {
            p[i] *= shrink;
        }
        m[i] = b1 * m[i] + one_b1 * g[i];
        v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Slice-level form of one AdamW update, for callers that keep parameters
/// outside a store. `state` holds one `(m, v)` pair per parameter and the
/// step counter.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(TensorError::InvalidArgument(format!(
            "{} params but {} grads",
            params.len(),
            grads.len()
        )));
    }
    let mut store = ParamStore::new();
    for (i, p) in params.iter().enumerate() {
        store.add(i.to_string(), p.clone(), ParamKind::Trainable { decay: true });
    }
    let pairs: Vec<_> = grads.iter().cloned().enumerate().map(|(i, g)| (ParamId(i), g)).collect();
    state.update(&mut store, &pairs, lr)?;
    for (dst, e) in params.iter_mut().zip(store.entries()) {
        *dst = e.value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one(1.0);
        let mut st = OptState::new(AdamW::default(), 1);
        adamw_step(&mut p, &one(1.0), &mut st, 0.1).unwrap();
        assert!((p[0].item() - 0.9).abs() < 1e-7);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = one(0.37);
        let mut st = OptState::new(AdamW::default(), 1);
        adamw_step(&mut p, &one(0.0), &mut st, 0.1).unwrap();
        assert_eq!(p[0].item(), 0.37);
    }

    #[test]
    fn decay_only_update_scales_parameter() {
        let mut p = one(2.0);
        let hyper = AdamW { weight_decay: 0.1, ..AdamW::default() };
        let mut st = OptState::new(hyper, 1);
        adamw_step(&mut p, &one(0.0), &mut st, 0.1).unwrap();
        assert!((p[0].item() - 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = vec![Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()];
        let before = p.clone();
        let hyper = AdamW { weight_decay: 0.3, ..AdamW::default() };
        let mut st = OptState::new(hyper, 1);
        let g = vec![Tensor::new(vec![3], vec![1.0, 2.0, -3.0]).unwrap()];
        adamw_step(&mut p, &g, &mut st, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f64>::zeros(vec![2])];
        let mut st = OptState::new(AdamW::default(), 1);
        let g = vec![Tensor::zeros(vec![3])];
        assert!(matches!(
            adamw_step(&mut p, &g, &mut st, 0.1),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::<f64>::new();
        let b = store.add("running", Tensor::scalar(1.0), ParamKind::Buffer);
        let mut st = OptState::new(AdamW::default(), 1);
        st.update(&mut store, &[(b, Tensor::scalar(5.0))], 0.1).unwrap();
        assert_eq!(store.get(b).item(), 1.0);
    }
}
