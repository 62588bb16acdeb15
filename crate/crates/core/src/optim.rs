//! Adam with bias correction and a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `lr0 / anneal_factor^⌊iteration / anneal_every⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub lr0: f64,
    pub anneal_every: u64,
    pub anneal_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            anneal_every: 3000,
            anneal_factor: 2.0,
        }
    }
}

impl LrSchedule {
    pub fn new(lr0: f64, anneal_every: u64, anneal_factor: f64) -> Result<Self> {
        let s = Self {
            lr0,
            anneal_every,
            anneal_factor,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Argument(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.anneal_every == 0 {
            return Err(Error::Argument("anneal_every must be positive".into()));
        }
        if !(self.anneal_factor > 1.0 && self.anneal_factor.is_finite()) {
            return Err(Error::Argument(format!(
                "anneal_factor must exceed 1, got {}",
                self.anneal_factor
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let drops = (iteration / self.anneal_every) as i32;
        self.lr0 / self.anneal_factor.powi(drops)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = ModelParams::zeros(params.hidden(), params.dim());
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &ModelParams {
        &self.m
    }

    pub fn second_moment(&self) -> &ModelParams {
        &self.v
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(Error::DimensionMismatch {
            what: "adam step",
            expected: format!("H={}, D={}", params.hidden(), params.dim()),
            found: format!(
                "gradients H={}, D={}; state H={}, D={}",
                grads.hidden(),
                grads.dim(),
                state.m.hidden(),
                state.m.dim()
            ),
        });
    }
    if !(lr > 0.0) {
        return Err(Error::Argument(format!("learning rate must be positive, got {lr}")));
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powf(state.t as f64);
    let bc2 = 1.0 - BETA2.powf(state.t as f64);
    let AdamState { m, v, .. } = state;
    for (((theta, g), m), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(m.blocks_mut())
        .zip(v.blocks_mut())
    {
        for i in 0..theta.len() {
            let gi = g[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(2999), 0.001);
        assert_eq!(s.lr_at(3000), 0.0005);
        assert_eq!(s.lr_at(7000), 0.00025);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::new(0.0, 10, 2.0).is_err());
        assert!(LrSchedule::new(0.1, 0, 2.0).is_err());
        assert!(LrSchedule::new(0.1, 10, 1.0).is_err());
        assert!(LrSchedule::new(0.1, 10, 2.0).is_ok());
    }

    fn scalar_params(v: f64) -> ModelParams {
        let mut p = ModelParams::zeros(1, 1);
        p.b_fc = v;
        p
    }

    #[test]
    fn first_step_scalar() {
        let mut p = scalar_params(0.0);
        let g = scalar_params(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        // m̂ = v̂ = 1 → Δ = −0.1 / (1 + 1e-8)
        assert!((p.b_fc - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p.b_fc + 0.099999999).abs() < 1e-9);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradients_fixed_point() {
        let mut p = init_params(3, 2, 0.1, &mut Rng::new(1)).unwrap();
        let before = p.clone();
        let g = ModelParams::zeros(3, 2);
        let mut st = AdamState::new(&p);
        for _ in 0..25 {
            adam_step(&mut p, &g, &mut st, 0.01).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 25);
    }

    #[test]
    fn deterministic() {
        let mut rng = Rng::new(4);
        let p0 = init_params(3, 2, 0.1, &mut rng).unwrap();
        let g = init_params(3, 2, 1.0, &mut rng).unwrap();
        let (mut a, mut b) = (p0.clone(), p0.clone());
        let (mut sa, mut sb) = (AdamState::new(&p0), AdamState::new(&p0));
        adam_step(&mut a, &g, &mut sa, 0.01).unwrap();
        adam_step(&mut b, &g, &mut sb, 0.01).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = ModelParams::zeros(2, 2);
        let g = ModelParams::zeros(3, 2);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut st, 0.1).is_err());
        let g = ModelParams::zeros(2, 2);
        assert!(adam_step(&mut p, &g, &mut st, 0.0).is_err());
    }

    proptest! {
        // |Δθ| ≤ lr·(1−β1)/√(1−β2); sparse gradients come closest.
        #[test]
        fn update_bounded(seed in any::<u64>(), sparse in any::<bool>(), lr in 1e-4f64..0.1) {
            let mut rng = Rng::new(seed);
            let mut p = init_params(2, 2, 0.1, &mut rng).unwrap();
            let mut st = AdamState::new(&p);
            let bound = lr * ((1.0 - BETA1) / (1.0 - BETA2).sqrt()).max(1.0) * (1.0 + 1e-6);
            for step in 0..60 {
                let mut g = init_params(2, 2, 1.0, &mut rng).unwrap();
                if sparse && step > 0 {
                    g = ModelParams::zeros(2, 2);
                }
                let before = p.clone();
                adam_step(&mut p, &g, &mut st, lr).unwrap();
                for (a, b) in p.blocks().iter().zip(before.blocks()) {
                    for (x, y) in a.iter().zip(b) {
                        prop_assert!((x - y).abs() <= bound);
                    }
                }
                prop_assert!(st.second_moment().blocks().iter().all(|b| b.iter().all(|&v| v >= 0.0)));
            }
        }

        #[test]
        fn schedule_monotone_step(lr0 in 1e-5f64..1.0, every in 1u64..500, factor in 1.01f64..10.0, raw in any::<u64>()) {
            let it = raw % (every * 40);
            let s = LrSchedule::new(lr0, every, factor).unwrap();
            prop_assert!(s.lr_at(it + 1) <= s.lr_at(it));
            if (it + 1) % every != 0 {
                prop_assert_eq!(s.lr_at(it + 1), s.lr_at(it));
            } else {
                prop_assert!(s.lr_at(it + 1) < s.lr_at(it));
            }
        }
    }
}
