//! First-order optimizers over complex parameter tensors.
//!
//! A complex parameter is optimized as two independent real coordinates:
//! updates read the packaged gradient `dJ/d(re p) + j dJ/d(im p)` and move
//! each component separately. Adam keeps f64 moment estimates per
//! component with the standard bias correction; plain SGD is provided as
//! the no-state baseline.

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// Adam state: step counter plus first/second moments, two f64 entries
/// (re, im) per complex parameter, in parameter-list order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub hp: AdamHyper,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(hp: AdamHyper) -> Result<Self> {
        hp.validate()?;
        Ok(Self { hp, t: 0, m: Vec::new(), v: Vec::new() })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. The parameter and gradient lists must be parallel
    /// and keep the same shapes across calls; the first call sizes the
    /// moment buffers.
    pub fn step<R: Real>(
        &mut self,
        params: &mut [&mut CTensor<R>],
        grads: &[&CTensor<R>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len() * 2]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer was sized for {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hp.beta2.powi(self.t as i32);
        let (b1, b2) = (self.hp.beta1, self.hp.beta2);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "parameter shape {:?} does not match gradient shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if m.len() != p.len() * 2 {
                return Err(Error::Contract(format!(
                    "moment buffer holds {} entries, parameter needs {}",
                    m.len(),
                    p.len() * 2
                )));
            }
            for (k, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                for (comp, grad_comp) in [(0usize, gv.re.to_f64()), (1, gv.im.to_f64())] {
                    let s = 2 * k + comp;
                    m[s] = b1 * m[s] + (1.0 - b1) * grad_comp;
                    v[s] = b2 * v[s] + (1.0 - b2) * grad_comp * grad_comp;
                    let update =
                        self.hp.lr * (m[s] / bc1) / ((v[s] / bc2).sqrt() + self.hp.epsilon);
                    if comp == 0 {
                        pv.re -= R::from_f64(update);
                    } else {
                        pv.im -= R::from_f64(update);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One plain gradient-descent update: `p -= lr * g` per component.
pub fn sgd_step<R: Real>(
    params: &mut [&mut CTensor<R>],
    grads: &[&CTensor<R>],
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameter tensors but {} gradient tensors",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "parameter shape {:?} does not match gradient shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let lr = R::from_f64(lr);
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            pv.re -= lr * gv.re;
            pv.im -= lr * gv.im;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::c;
    use num_complex::Complex;

    #[test]
    fn zero_gradient_from_fresh_state_changes_nothing() {
        let mut p = CTensor::from_vec(&[2], vec![c(1.0, -2.0), c(0.5, 0.25)]).unwrap();
        let before = p.clone();
        let g = CTensor::<f64>::zeros(&[2]).unwrap();
        let mut adam = Adam::new(AdamHyper::default()).unwrap();
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // Bias correction makes the first Adam step ~lr regardless of the
        // gradient scale.
        let mut p: CTensor<f64> = CTensor::from_vec(&[1], vec![c(0.0, 0.0)]).unwrap();
        let g = CTensor::from_vec(&[1], vec![c(1234.5, -0.001)]).unwrap();
        let hp = AdamHyper { lr: 0.01, ..Default::default() };
        let mut adam = Adam::new(hp).unwrap();
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0].re + 0.01).abs() < 1e-6, "re = {}", p.data()[0].re);
        assert!((p.data()[0].im - 0.01).abs() < 1e-6, "im = {}", p.data()[0].im);
    }

    #[test]
    fn adam_minimizes_a_convex_complex_bowl() {
        // J = |z - (3 - 2j)|^2, dJ packaged = 2(z - target) components.
        let target = Complex::new(3.0, -2.0);
        let mut z: CTensor<f64> = CTensor::from_vec(&[1], vec![c(0.0, 0.0)]).unwrap();
        let hp = AdamHyper { lr: 0.05, ..Default::default() };
        let mut adam = Adam::new(hp).unwrap();
        for _ in 0..2000 {
            let d = z.data()[0] - target;
            let g = CTensor::from_vec(&[1], vec![d * 2.0]).unwrap();
            adam.step(&mut [&mut z], &[&g]).unwrap();
        }
        assert!((z.data()[0] - target).norm() < 1e-3, "ended at {}", z.data()[0]);
    }

    #[test]
    fn sgd_minimizes_the_same_bowl() {
        let target = Complex::new(-1.0, 0.5);
        let mut z: CTensor<f64> = CTensor::from_vec(&[1], vec![c(2.0, 2.0)]).unwrap();
        for _ in 0..200 {
            let d = z.data()[0] - target;
            let g = CTensor::from_vec(&[1], vec![d * 2.0]).unwrap();
            sgd_step(&mut [&mut z], &[&g], 0.1).unwrap();
        }
        assert!((z.data()[0] - target).norm() < 1e-6);
    }

    #[test]
    fn mismatches_are_contract_violations() {
        let mut p = CTensor::<f64>::zeros(&[2]).unwrap();
        let g = CTensor::<f64>::zeros(&[3]).unwrap();
        let mut adam = Adam::new(AdamHyper::default()).unwrap();
        assert!(matches!(
            adam.step(&mut [&mut p], &[&g]),
            Err(Error::Contract(_))
        ));
        let g2 = CTensor::<f64>::zeros(&[2]).unwrap();
        assert!(matches!(
            adam.step(&mut [&mut p], &[&g2, &g2]),
            Err(Error::Contract(_))
        ));
        assert!(Adam::new(AdamHyper { lr: -1.0, ..Default::default() }).is_err());
    }
}
