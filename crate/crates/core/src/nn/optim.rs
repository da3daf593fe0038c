use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{bail, Result};

fn check_shapes(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.dims != y.dims) {
        bail!(Shape, "tensor lists do not align ({} vs {})", a.len(), b.len());
    }
    Ok(())
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Moments shaped like `params`, with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes(params, grads)?;
        check_shapes(params, &self.m)?;
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(params: &[Tensor], decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            bail!(InvalidArgument, "EMA decay {decay} not in [0, 1]");
        }
        Ok(Self {
            decay,
            shadow: params.to_vec(),
        })
    }

    /// `shadow ← decay·shadow + (1 − decay)·params`.
    pub fn update(&mut self, params: &[Tensor]) -> Result<()> {
        check_shapes(&self.shadow, params)?;
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sv, pv) in s.data.iter_mut().zip(&p.data) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }

    /// Exchanges shadow and live parameters (call twice to restore).
    pub fn swap(&mut self, params: &mut [Tensor]) -> Result<()> {
        check_shapes(&self.shadow, params)?;
        for (s, p) in self.shadow.iter_mut().zip(params.iter_mut()) {
            core::mem::swap(s, p);
        }
        Ok(())
    }
}

/// Scales every gradient in place.
pub fn scale_grads(grads: &mut [Tensor], k: f64) {
    grads.iter_mut().for_each(|g| g.scale_assign(k));
}

/// Elementwise sum of two aligned gradient lists into `acc`.
pub fn accumulate(acc: &mut [Tensor], more: &[Tensor]) -> Result<()> {
    check_shapes(acc, more)?;
    acc.iter_mut().zip(more).for_each(|(a, b)| a.add_assign(b));
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_list(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = scalar_list(0.0);
        let mut adam = AdamState::new(&p, 0.1);
        adam.step(&mut p, &scalar_list(1.0)).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = −lr·1/(1 + ε).
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p[0].item() - expect).abs() < 1e-15);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_counts_steps() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5])];
        let before = p.clone();
        let mut adam = AdamState::new(&p, 0.01);
        for k in 1..=3 {
            adam.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
            assert_eq!(adam.step, k);
        }
        assert_eq!(p, before);
        assert!(adam.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn ema_rules() {
        let params = scalar_list(2.0);
        let mut e = EmaState::new(&scalar_list(0.0), 0.0).unwrap();
        e.update(&params).unwrap();
        assert_eq!(e.shadow[0].item(), 2.0);

        let mut e = EmaState::new(&scalar_list(0.0), 1.0).unwrap();
        e.update(&params).unwrap();
        assert_eq!(e.shadow[0].item(), 0.0);

        let mut e = EmaState::new(&scalar_list(0.0), 0.5).unwrap();
        e.update(&params).unwrap();
        assert_eq!(e.shadow[0].item(), 1.0);

        let mut live = scalar_list(5.0);
        e.swap(&mut live).unwrap();
        assert_eq!((live[0].item(), e.shadow[0].item()), (1.0, 5.0));
        assert!(e.update(&[Tensor::zeros(&[2])]).is_err());
        assert!(EmaState::new(&params, 1.5).is_err());
    }
}
