use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments with their bias-correction counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl Moments {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.data_mut().iter_mut().for_each(|x| *x = 0.0);
        self.v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    /// Folds `g` into the moments and returns the normalised direction
    /// `m̂ / (√v̂ + ε)`.
    pub fn update(&mut self, g: &Tensor, h: &AdamHyper) -> Result<Tensor> {
        if g.shape() != self.m.shape() {
            return Err(Error::shape(
                "adam",
                format!("gradient {:?} vs moments {:?}", g.shape(), self.m.shape()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        let mut dir = Vec::with_capacity(g.len());
        let (m, v) = (self.m.data_mut(), self.v.data_mut());
        for i in 0..g.len() {
            let gi = g.data()[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            dir.push(mhat / (vhat.sqrt() + h.eps));
        }
        Ok(Tensor::from_parts(g.shape().to_vec(), dir))
    }
}

/// Full-space AdamW: `ΔW = −lr·m̂/(√v̂+ε) − lr·λ·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub moments: Moments,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            moments: Moments::zeros(shape),
        }
    }

    pub fn step(&mut self, w: &Tensor, g: &Tensor, lr: f64, h: &AdamHyper) -> Result<Tensor> {
        let dir = self.moments.update(g, h)?;
        let delta: Vec<f64> = dir
            .data()
            .iter()
            .zip(w.data())
            .map(|(d, wi)| -lr * d - lr * h.weight_decay * wi)
            .collect();
        let delta = Tensor::from_parts(w.shape().to_vec(), delta);
        delta.ensure_finite("adamw_step")?;
        Ok(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_like() {
        let mut s = AdamState::new(&[3]);
        let w = Tensor::zeros(&[3]);
        let g = Tensor::new(vec![3], vec![2.0, -0.5, 0.0]).unwrap();
        let d = s.step(&w, &g, 0.1, &AdamHyper::default()).unwrap();
        assert!((d.data()[0] + 0.1).abs() < 1e-8);
        assert!((d.data()[1] - 0.1).abs() < 1e-7);
        assert_eq!(d.data()[2], 0.0);
    }

    #[test]
    fn decoupled_decay() {
        let mut s = AdamState::new(&[1]);
        let w = Tensor::new(vec![1], vec![2.0]).unwrap();
        let h = AdamHyper {
            weight_decay: 0.5,
            ..AdamHyper::default()
        };
        let d = s.step(&w, &Tensor::zeros(&[1]), 0.1, &h).unwrap();
        assert!((d.data()[0] + 0.1).abs() < 1e-15);
    }
}
