use super::params::ParamSet;
use crate::error::Result;

/// `params − lr · grads`, key-wise. Returns a new set; `params` is untouched.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    let mut out = params.clone();
    out.axpy(-lr, grads)?;
    Ok(out)
}

/// In-place SGD restricted to keys with the given prefix.
pub fn sgd_step_prefix(params: &mut ParamSet, grads: &ParamSet, prefix: &str, lr: f64) -> Result<()> {
    params.check_compatible(grads)?;
    for ((key, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
        if key.starts_with(prefix) {
            p.axpy(-lr, g);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: ParamSet,
    second: ParamSet,
}

impl AdamState {
    pub fn new(like: &ParamSet) -> Self {
        Self {
            config: AdamConfig::default(),
            step: 0,
            first: like.zeros_like(),
            second: like.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.first)?;
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let moments = state.first.iter_mut().zip(state.second.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    fn one(key: &str, values: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(key, Tensor::row(values)).unwrap();
        p
    }

    #[test]
    fn sgd_examples() {
        let p = one("w", vec![2.0]);
        let g = one("w", vec![1.0]);
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap().get("w").unwrap().data(), &[1.5]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        assert!(sgd_step(&p, &one("v", vec![1.0]), 0.1).is_err());
    }

    #[test]
    fn sgd_leaves_source_untouched() {
        let p = one("w", vec![1.0, 2.0]);
        let copy = p.clone();
        let _ = sgd_step(&copy, &one("w", vec![3.0, 3.0]), 1.0).unwrap();
        assert_eq!(p, copy);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = one("w", vec![0.3, -0.7]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &one("w", vec![0.0, 0.0]), &mut st, 0.01).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = one("w", vec![0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &one("w", vec![3.0, -0.2, 50.0]), &mut st, 0.01).unwrap();
        for (x, sign) in p.get("w").unwrap().data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - sign * 0.01).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn adam_minimises_squared_norm() {
        let mut p = one("w", vec![1.0, 1.0, 1.0, 1.0]);
        let mut st = AdamState::new(&p);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let grad = ParamSet::weighted_sum(&[&p], &[2.0]).unwrap();
            adam_step(&mut p, &grad, &mut st, 0.018).unwrap();
            let norm = p.get("w").unwrap().data().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm < last);
            last = norm;
        }
        assert!(last < 1e-2, "{last}");
    }

    #[test]
    fn adam_rejects_key_mismatch() {
        let mut p = one("w", vec![1.0]);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &one("x", vec![1.0]), &mut st, 0.1).is_err());
    }
}
