//! AdamW with decoupled weight decay and two learning-rate groups.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamSet};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct AdamHyper {
    pub lr_main: f64,
    pub lr_backbone: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr_main: 1e-4,
            lr_backbone: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment buffers, aligned with the parameter registry.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(set: &ParamSet<T>) -> Self {
        AdamState {
            m: set.iter().map(|(_, e)| vec![0.0; e.values.len()]).collect(),
            v: set.iter().map(|(_, e)| vec![0.0; e.values.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay adaptive-moment update. Decay multiplies
/// parameters by (1 - lr * wd) before the moment step. Non-finite
/// gradients abort the step without touching parameters or state.
/// `lr_scale` implements step-decay schedules (1.0 = base rate).
pub fn adamw_step<T: Scalar>(
    set: &mut ParamSet<T>,
    grads: &[Vec<T>],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr_scale: f64,
) -> Result<()> {
    if grads.len() != set.len() {
        return Err(Error::contract(format!(
            "adamw_step: {} gradient buffers for {} parameters",
            grads.len(),
            set.len()
        )));
    }
    for ((_, e), g) in set.iter().zip(grads) {
        if e.values.len() != g.len() {
            return Err(Error::contract(format!(
                "adamw_step: gradient size {} for parameter {} of size {}",
                g.len(),
                e.name,
                e.values.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "adamw_step: non-finite gradient for {}, step aborted",
                e.name
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (idx, (_, e)) in set.iter_mut().enumerate() {
        let lr = lr_scale
            * match e.group {
                ParamGroup::Backbone => hyper.lr_backbone,
                ParamGroup::Main => hyper.lr_main,
            };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let decay = 1.0 - lr * hyper.weight_decay;
        for (j, p) in e.values.iter_mut().enumerate() {
            let g = grads[idx][j].to_f64();
            let mut pv = p.to_f64() * decay;
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            pv -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
            *p = T::from_f64(pv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn one_param(v: f64, group: ParamGroup) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        set.add("p", vec![1], vec![v], group);
        set
    }

    #[test]
    fn zero_grads_zero_decay_leave_params_unchanged() {
        let mut set = one_param(0.7, ParamGroup::Main);
        let mut state = AdamState::new(&set);
        let hyper = AdamHyper { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut set, &[vec![0.0]], &mut state, &hyper, 1.0).unwrap();
        assert_eq!(set.entry(crate::params::ParamId(0)).values[0], 0.7);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // from zero moments: update = lr * ghat / (sqrt(ghat^2) + eps)
        for &g in &[0.3f64, -1.7, 4.0] {
            let mut set = one_param(0.0, ParamGroup::Main);
            let mut state = AdamState::new(&set);
            let hyper = AdamHyper { weight_decay: 0.0, ..Default::default() };
            adamw_step(&mut set, &[vec![g]], &mut state, &hyper, 1.0).unwrap();
            let got = set.entry(crate::params::ParamId(0)).values[0];
            let want = -hyper.lr_main * g / (g.abs() + hyper.eps);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            assert_eq!(got.signum(), -g.signum());
        }
    }

    #[test]
    fn decay_only_shrinks_by_decoupled_factor() {
        let mut set = one_param(2.0, ParamGroup::Main);
        let mut state = AdamState::new(&set);
        let hyper = AdamHyper { weight_decay: 0.05, ..Default::default() };
        adamw_step(&mut set, &[vec![0.0]], &mut state, &hyper, 1.0).unwrap();
        let want = 2.0 * (1.0 - hyper.lr_main * 0.05);
        assert!((set.entry(crate::params::ParamId(0)).values[0] - want).abs() < 1e-15);
    }

    #[test]
    fn backbone_group_uses_its_own_rate() {
        let mut set = one_param(0.0, ParamGroup::Backbone);
        let mut state = AdamState::new(&set);
        let hyper = AdamHyper { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut set, &[vec![1.0]], &mut state, &hyper, 1.0).unwrap();
        let got = set.entry(crate::params::ParamId(0)).values[0];
        assert!((got + hyper.lr_backbone).abs() < 1e-12, "{got}");
    }

    #[test]
    fn non_finite_grads_abort_without_mutation() {
        let mut set = one_param(1.0, ParamGroup::Main);
        let mut state = AdamState::new(&set);
        let hyper = AdamHyper::default();
        let err = adamw_step(&mut set, &[vec![f64::NAN]], &mut state, &hyper, 1.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(set.entry(crate::params::ParamId(0)).values[0], 1.0);
        assert_eq!(state.step_count(), 0);
    }
}
