//! Decoupled-weight-decay adaptive-moment optimizer (AdamW).
//!
//! Update equations, pinned for the oracle tests:
//!
//! ```text
//! t <- t + 1
//! m <- b1*m + (1-b1)*g
//! v <- b2*v + (1-b2)*g^2
//! mhat = m / (1 - b1^t);  vhat = v / (1 - b2^t)
//! x <- x*(1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps)
//! ```
//!
//! The decay multiplies the parameter directly (decoupled from the adaptive
//! step) and is applied before the moment update is subtracted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Param(format!(
                "betas must lie in [0,1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Param(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Param(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One scalar update; shared by the dense and sparse (per-voxel) paths.
#[inline]
pub fn adamw_scalar(
    x: f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    t: u64,
    hyper: &AdamWHyper,
    lr: f64,
) -> f64 {
    *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
    *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
    let mhat = *m / (1.0 - hyper.beta1.powi(t as i32));
    let vhat = *v / (1.0 - hyper.beta2.powi(t as i32));
    x * (1.0 - lr * hyper.weight_decay) - lr * mhat / (vhat.sqrt() + hyper.eps)
}

/// Dense AdamW over a flat indexed collection of parameter arrays.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(hyper: AdamWHyper, shapes: &[usize]) -> Self {
        Self {
            hyper,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(hyper: AdamWHyper, params: &[Vec<f64>]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(hyper, &shapes)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} arrays, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        for (ai, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != self.m[ai].len() || g.len() != self.m[ai].len() {
                return Err(Error::Shape(format!("array {ai} length mismatch")));
            }
            let m = &mut self.m[ai];
            let v = &mut self.v[ai];
            for i in 0..p.len() {
                p[i] = adamw_scalar(p[i], g[i], &mut m[i], &mut v[i], self.t, &self.hyper, lr);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    /// Straight-line oracle of the documented update equations, written
    /// without the shared helper.
    struct Oracle {
        x: f64,
        m: f64,
        v: f64,
        t: u64,
    }

    impl Oracle {
        fn step(&mut self, g: f64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) {
            self.t += 1;
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let mhat = self.m / (1.0 - b1.powi(self.t as i32));
            let vhat = self.v / (1.0 - b2.powi(self.t as i32));
            self.x = self.x * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
        }
    }

    #[test]
    fn hundred_scalar_steps_match_oracle() {
        let hyper = AdamWHyper::default();
        let mut opt = AdamW::new(hyper, &[1]);
        let mut params = vec![vec![0.5]];
        let mut oracle = Oracle {
            x: 0.5,
            m: 0.0,
            v: 0.0,
            t: 0,
        };
        let mut rng = SplitMix64::new(404);
        for _ in 0..100 {
            let g = (rng.next_u64() % 2000) as f64 / 1000.0 - 1.0;
            let lr = 1e-3 + (rng.next_u64() % 100) as f64 * 1e-5;
            opt.step(&mut params, &[vec![g]], lr).unwrap();
            oracle.step(g, lr, hyper.beta1, hyper.beta2, hyper.eps, hyper.weight_decay);
            assert!(
                (params[0][0] - oracle.x).abs() < 1e-12,
                "divergence: {} vs {}",
                params[0][0],
                oracle.x
            );
        }
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let hyper = AdamWHyper {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(hyper, &[1]);
        let mut params = vec![vec![1.0]];
        opt.step(&mut params, &[vec![0.0]], 0.5).unwrap();
        // Zero gradient, zero moments: only the decay acts.
        assert!((params[0][0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_decay_zero_grad_is_identity() {
        let hyper = AdamWHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(hyper, &[2]);
        let mut params = vec![vec![0.3, -0.7]];
        let before = params.clone();
        opt.step(&mut params, &[vec![0.0, 0.0]], 1.0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = AdamW::new(AdamWHyper::default(), &[2]);
        let mut params = vec![vec![0.0; 3]];
        assert!(opt.step(&mut params, &[vec![0.0; 3]], 0.1).is_err());
    }

    #[test]
    fn hyper_validation() {
        assert!(AdamWHyper::default().validate().is_ok());
        assert!(AdamWHyper {
            beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdamWHyper {
            eps: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
