//! Adam updates over the raw fields of a [`GaussianSet`], per-field learning
//! rates, and the velocity learning-rate annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::{Field, GaussianSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent.
    pub position: f64,
    /// Final position rate after log-linear decay, multiplied by the scene extent.
    pub position_final: f64,
    pub time: f64,
    pub duration: f64,
    /// Base velocity rate, multiplied by the annealing schedule.
    pub velocity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            time: 1e-4,
            duration: 2e-3,
            velocity: 1e-3,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 0.05,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.position,
            self.position_final,
            self.time,
            self.duration,
            self.velocity,
            self.scale,
            self.rotation,
            self.opacity,
            self.sh_dc,
            self.sh_rest,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "learning rates must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleForm {
    /// `λ₀^(1−p)·λ₁^p`.
    Geometric,
    /// `λ₀^(1−p) + λ₁^p`, kept for comparison.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocitySchedule {
    pub lambda0: f64,
    pub lambda1: f64,
    pub form: ScheduleForm,
}

impl Default for VelocitySchedule {
    fn default() -> Self {
        VelocitySchedule {
            lambda0: 1.0,
            lambda1: 0.01,
            form: ScheduleForm::Geometric,
        }
    }
}

impl VelocitySchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0 && self.lambda1 >= 0.0)
            || !self.lambda0.is_finite()
            || !self.lambda1.is_finite()
        {
            return Err(Error::Config(
                "velocity schedule endpoints must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn scale(&self, progress: f64) -> f64 {
        match self.form {
            ScheduleForm::Geometric => velocity_lr_schedule(progress, self.lambda0, self.lambda1),
            ScheduleForm::Sum => self.lambda0.powf(1.0 - progress) + self.lambda1.powf(progress),
        }
    }
}

/// Geometric interpolation `λ₀^(1−p)·λ₁^p`, exact at both ends.
pub fn velocity_lr_schedule(progress: f64, lambda0: f64, lambda1: f64) -> f64 {
    if progress <= 0.0 {
        return lambda0;
    }
    if progress >= 1.0 {
        return lambda1;
    }
    if progress == 0.5 {
        return (lambda0 * lambda1).sqrt();
    }
    lambda0.powf(1.0 - progress) * lambda1.powf(progress)
}

/// Log-linear decay from `start` to `end`.
pub fn exp_decay(progress: f64, start: f64, end: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    if start <= 0.0 || end <= 0.0 {
        return start + (end - start) * p;
    }
    (start.ln() * (1.0 - p) + end.ln() * p).exp()
}

/// Effective per-field rates for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub position: f64,
    pub time: f64,
    pub duration: f64,
    pub velocity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

impl StepRates {
    pub fn at(lr: &LearningRates, schedule: &VelocitySchedule, extent: f64, progress: f64) -> Self {
        StepRates {
            position: extent * exp_decay(progress, lr.position, lr.position_final),
            time: lr.time,
            duration: lr.duration,
            velocity: lr.velocity * schedule.scale(progress),
            scale: lr.scale,
            rotation: lr.rotation,
            opacity: lr.opacity,
            sh_dc: lr.sh_dc,
            sh_rest: lr.sh_rest,
        }
    }

    pub fn uniform(lr: f64) -> Self {
        StepRates {
            position: lr,
            time: lr,
            duration: lr,
            velocity: lr,
            scale: lr,
            rotation: lr,
            opacity: lr,
            sh_dc: lr,
            sh_rest: lr,
        }
    }

    fn field(&self, f: Field) -> f64 {
        match f {
            Field::Position => self.position,
            Field::Time => self.time,
            Field::Duration => self.duration,
            Field::Velocity => self.velocity,
            Field::Scale => self.scale,
            Field::Rotation => self.rotation,
            Field::Opacity => self.opacity,
            Field::Sh => self.sh_dc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: GaussianSet,
    pub v: GaussianSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradient entries skipped because they were not finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(params: &GaussianSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            skipped: 0,
        }
    }

    pub fn zero_primitive(&mut self, i: usize) {
        self.m.zero_primitive(i);
        self.v.zero_primitive(i);
    }
}

/// One bias-corrected Adam step; returns the number of skipped non-finite entries.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut GaussianSet,
    grads: &GaussianSet,
    rates: &StepRates,
) -> Result<usize> {
    if grads.count() != params.count()
        || state.m.count() != params.count()
        || grads.sh_degree() != params.sh_degree()
    {
        return Err(Error::Shape {
            field: "adam".into(),
            expected: params.count(),
            found: grads.count(),
        });
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let stride = params.sh_stride();
    let k = stride / 3;
    let mut skipped = 0;
    for f in Field::ALL {
        let base = rates.field(f);
        let g = grads.field(f);
        let m = state.m.field_mut(f);
        let v = state.v.field_mut(f);
        let p = params.field_mut(f);
        for i in 0..p.len() {
            let gi = g[i];
            if !gi.is_finite() {
                skipped += 1;
                continue;
            }
            let lr = if f == Field::Sh && !(i % stride).is_multiple_of(k) {
                rates.sh_rest
            } else {
                base
            };
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            if lr == 0.0 {
                continue;
            }
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    state.skipped += skipped as u64;
    Ok(skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::RawPrimitive;
    use proptest::prelude::*;

    fn one(sh_degree: usize) -> GaussianSet {
        GaussianSet::from_primitives(
            sh_degree,
            &[RawPrimitive::at([0.1, 0.2, 0.3], 0.5, sh_degree)],
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one(1);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = p.zeros_like();
        adam_step(&mut s, &mut p, &g, &StepRates::uniform(1e-3)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_and_second_step_closed_form() {
        let mut p = one(0);
        let mut s = AdamState::new(&p);
        let mut g = p.zeros_like();
        g.time[0] = 1.0;
        let t0 = p.time[0];
        adam_step(&mut s, &mut p, &g, &StepRates::uniform(1e-3)).unwrap();
        let d1 = p.time[0] - t0;
        assert!((d1 + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((d1 + 9.99999e-4).abs() < 1e-9);
        let t1 = p.time[0];
        adam_step(&mut s, &mut p, &g, &StepRates::uniform(1e-3)).unwrap();
        assert!(((p.time[0] - t1) + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn non_finite_entries_are_skipped() {
        let mut p = one(0);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let mut g = p.zeros_like();
        g.position[1] = f64::NAN;
        g.log_scale[0] = f64::INFINITY;
        let n = adam_step(&mut s, &mut p, &g, &StepRates::uniform(1e-3)).unwrap();
        assert_eq!(n, 2);
        assert_eq!(s.skipped, 2);
        assert_eq!(p, before);
    }

    #[test]
    fn sh_rest_uses_its_own_rate() {
        let mut p = one(1);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let mut g = p.zeros_like();
        g.sh.fill(1.0);
        let rates = StepRates {
            sh_dc: 1e-2,
            sh_rest: 1e-4,
            ..StepRates::uniform(0.0)
        };
        adam_step(&mut s, &mut p, &g, &rates).unwrap();
        for i in 0..12 {
            let d = before.sh[i] - p.sh[i];
            let want = if i % 4 == 0 { 1e-2 } else { 1e-4 };
            assert!((d - want).abs() < 1e-7 * want);
        }
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(velocity_lr_schedule(0.0, 1e-2, 1e-4), 1e-2);
        assert_eq!(velocity_lr_schedule(1.0, 1e-2, 1e-4), 1e-4);
        assert_eq!(velocity_lr_schedule(0.5, 1e-2, 1e-4), 1e-3);
        assert_eq!(velocity_lr_schedule(0.3, 0.0, 0.0), 0.0);
        let sum = VelocitySchedule {
            lambda0: 1.0,
            lambda1: 0.01,
            form: ScheduleForm::Sum,
        };
        assert!((sum.scale(0.0) - 2.0).abs() < 1e-15);
        assert!((sum.scale(1.0) - 1.01).abs() < 1e-15);
    }

    #[test]
    fn position_decay_endpoints() {
        assert!((exp_decay(0.0, 1.6e-4, 1.6e-6) - 1.6e-4).abs() < 1e-18);
        assert!((exp_decay(1.0, 1.6e-4, 1.6e-6) - 1.6e-6).abs() < 1e-18);
        assert!((exp_decay(0.5, 1.6e-4, 1.6e-6) - 1.6e-5).abs() < 1e-17);
    }

    #[test]
    fn scaled_gradients_keep_update_signs() {
        let mut p = one(1);
        let mut q = p.clone();
        let mut sp = AdamState::new(&p);
        let mut sq = AdamState::new(&q);
        let mut g = p.zeros_like();
        for (i, v) in g.sh.iter_mut().enumerate() {
            *v = (i as f64 * 1.7).sin();
        }
        g.position = vec![0.3, -0.7, 0.01];
        let mut g2 = g.clone();
        for f in Field::ALL {
            g2.field_mut(f).iter_mut().for_each(|v| *v *= 37.0);
        }
        let before = p.clone();
        for _ in 0..3 {
            adam_step(&mut sp, &mut p, &g, &StepRates::uniform(1e-3)).unwrap();
            adam_step(&mut sq, &mut q, &g2, &StepRates::uniform(1e-3)).unwrap();
        }
        for f in Field::ALL {
            for ((a, b), o) in p.field(f).iter().zip(q.field(f)).zip(before.field(f)) {
                assert_eq!((a - o).partial_cmp(&0.0), (b - o).partial_cmp(&0.0));
            }
        }
    }

    proptest! {
        #[test]
        fn schedule_is_strictly_decreasing(l0 in 1e-3f64..10.0, ratio in 1.01f64..1e3, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!((a - b).abs() > 1e-6);
            let l1 = l0 / ratio;
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(velocity_lr_schedule(lo, l0, l1) > velocity_lr_schedule(hi, l0, l1));
        }

        #[test]
        fn second_moment_stays_non_negative(gs in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
            let mut p = one(0);
            let mut s = AdamState::new(&p);
            for gv in gs {
                let mut g = p.zeros_like();
                g.opacity_logit[0] = gv;
                adam_step(&mut s, &mut p, &g, &StepRates::uniform(1e-3)).unwrap();
                prop_assert!(s.v.opacity_logit[0] >= 0.0);
            }
        }
    }
}
