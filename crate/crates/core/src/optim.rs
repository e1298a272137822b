//! RMSProp and Adam parameter updates, staircase learning-rate schedules,
//! and the four standard optimization presets.
//!
//! The two algorithms place epsilon differently, and that placement is the
//! whole point of keeping both:
//!
//! - RMSProp divides by `sqrt(E[g^2] + eps)` -- epsilon inside the radical,
//!   so `eps = 1` caps the per-parameter factor at 1 (quasi-adaptive);
//! - Adam divides by `sqrt(v_hat) + eps` -- epsilon outside the radical, so
//!   a small eps leaves the factor free up to `1/eps`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    RmsProp,
    Adam,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::RmsProp => "rmsprop",
            Algorithm::Adam => "adam",
        }
    }
}

/// Staircase exponential decay: `eta(e) = eta0 * rate^floor(e / interval)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub decay_rate: f64,
    pub interval_epochs: usize,
}

impl LrSchedule {
    pub fn constant() -> Self {
        LrSchedule {
            decay_rate: 1.0,
            interval_epochs: 1,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.decay_rate == 1.0
    }
}

/// Learning rate in effect for a given epoch.
pub fn lr_at(epoch: usize, schedule: &LrSchedule, eta0: f64) -> f64 {
    let num_decays = epoch / schedule.interval_epochs.max(1);
    eta0 * schedule.decay_rate.powi(num_decays as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub eta0: f64,
    /// RMSProp averaging coefficient for E[g^2].
    pub rho: f64,
    /// Adam moment coefficients.
    pub beta1: f64,
    pub beta2: f64,
    pub schedule: LrSchedule,
}

pub const RMSPROP_RHO: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    O1,
    O2,
    O3,
    O4,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "O1" => Ok(Preset::O1),
            "O2" => Ok(Preset::O2),
            "O3" => Ok(Preset::O3),
            "O4" => Ok(Preset::O4),
            other => Err(Error::config(format!("unknown optimizer preset '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::O1 => "O1",
            Preset::O2 => "O2",
            Preset::O3 => "O3",
            Preset::O4 => "O4",
        }
    }
}

/// The four standard strategies:
/// O1 = RMSProp, eps 1, lr 0.045 decaying by 0.94 every 2 epochs;
/// O2 = RMSProp, eps 1, lr 0.1 decaying by 0.16 every 30 epochs;
/// O3 = Adam, lr 0.001, constant;
/// O4 = Adam, lr 0.001 decaying by 0.96 every epoch.
pub fn preset(p: Preset) -> OptimizerConfig {
    let (algorithm, epsilon, eta0, schedule) = match p {
        Preset::O1 => (
            Algorithm::RmsProp,
            1.0,
            0.045,
            LrSchedule {
                decay_rate: 0.94,
                interval_epochs: 2,
            },
        ),
        Preset::O2 => (
            Algorithm::RmsProp,
            1.0,
            0.1,
            LrSchedule {
                decay_rate: 0.16,
                interval_epochs: 30,
            },
        ),
        Preset::O3 => (Algorithm::Adam, ADAM_EPSILON, 0.001, LrSchedule::constant()),
        Preset::O4 => (
            Algorithm::Adam,
            ADAM_EPSILON,
            0.001,
            LrSchedule {
                decay_rate: 0.96,
                interval_epochs: 1,
            },
        ),
    };
    OptimizerConfig {
        algorithm,
        epsilon,
        eta0,
        rho: RMSPROP_RHO,
        beta1: ADAM_BETA1,
        beta2: ADAM_BETA2,
        schedule,
    }
}

fn check_grad<T: Scalar>(param: &Tensor<T>, grad: &Tensor<T>) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "gradient shape {:?} vs parameter shape {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    if !grad.is_all_finite() {
        return Err(Error::divergence("non-finite gradient in optimizer step"));
    }
    Ok(())
}

/// One RMSProp update:
/// `E <- rho*E + (1-rho)*g^2; param <- param - eta * g / sqrt(E + eps)`.
/// Epsilon sits inside the radical.
pub fn rmsprop_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    eg2: &mut Tensor<T>,
    rho: f64,
    epsilon: f64,
    eta: f64,
) -> Result<()> {
    check_grad(param, grad)?;
    if eta < 0.0 {
        return Err(Error::config(format!("negative learning rate {eta}")));
    }
    let rho = T::from_f64(rho);
    let one_rho = T::one() - rho;
    let eps = T::from_f64(epsilon);
    let eta = T::from_f64(eta);
    for ((p, &g), e) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(eg2.data_mut())
    {
        *e = rho * *e + one_rho * g * g;
        *p = *p - eta * g / (*e + eps).sqrt();
    }
    Ok(())
}

/// One Adam update with bias correction:
/// `m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2;`
/// `param <- param - eta * m_hat / (sqrt(v_hat) + eps)`.
/// Epsilon sits outside the radical. `t` is the 1-based step count.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    eta: f64,
) -> Result<()> {
    check_grad(param, grad)?;
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one_b1 = T::one() - b1;
    let one_b2 = T::one() - b2;
    let corr1 = T::one() - T::from_f64(beta1.powi(t as i32));
    let corr2 = T::one() - T::from_f64(beta2.powi(t as i32));
    let eps = T::from_f64(epsilon);
    let eta = T::from_f64(eta);
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = b1 * *mi + one_b1 * g;
        *vi = b2 * *vi + one_b2 * g * g;
        let m_hat = *mi / corr1;
        let v_hat = *vi / corr2;
        *p = *p - eta * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

enum Slot<T> {
    Rms { eg2: Tensor<T> },
    Adam { m: Tensor<T>, v: Tensor<T> },
}

/// Optimizer state for a fixed list of parameter tensors, updated in
/// registration order.
pub struct Optimizer<T: Scalar> {
    cfg: OptimizerConfig,
    slots: Vec<Slot<T>>,
    t: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, shapes: &[Vec<usize>]) -> Self {
        let slots = shapes
            .iter()
            .map(|s| match cfg.algorithm {
                Algorithm::RmsProp => Slot::Rms {
                    eg2: Tensor::zeros(s),
                },
                Algorithm::Adam => Slot::Adam {
                    m: Tensor::zeros(s),
                    v: Tensor::zeros(s),
                },
            })
            .collect();
        Optimizer { cfg, slots, t: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update to every parameter, in registration order.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], eta: f64) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::config(format!(
                "optimizer registered {} parameters, got {} params / {} grads",
                self.slots.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(self.slots.iter_mut()) {
            match slot {
                Slot::Rms { eg2 } => rmsprop_step(
                    param,
                    grad,
                    eg2,
                    self.cfg.rho,
                    self.cfg.epsilon,
                    eta,
                )?,
                Slot::Adam { m, v } => adam_step(
                    param,
                    grad,
                    m,
                    v,
                    self.t,
                    self.cfg.beta1,
                    self.cfg.beta2,
                    self.cfg.epsilon,
                    eta,
                )?,
            }
        }
        Ok(())
    }

    /// Named state tensors for checkpointing, plus the step counter.
    pub fn export_state(&self, param_names: &[String]) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, slot) in param_names.iter().zip(&self.slots) {
            match slot {
                Slot::Rms { eg2 } => out.push((format!("opt/{name}/eg2"), eg2.clone())),
                Slot::Adam { m, v } => {
                    out.push((format!("opt/{name}/m"), m.clone()));
                    out.push((format!("opt/{name}/v"), v.clone()));
                }
            }
        }
        out.push((
            "opt/step".to_string(),
            Tensor::scalar(T::from_f64(self.t as f64)),
        ));
        out
    }

    pub fn import_state(
        &mut self,
        param_names: &[String],
        lookup: &mut impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        for (name, slot) in param_names.iter().zip(self.slots.iter_mut()) {
            match slot {
                Slot::Rms { eg2 } => {
                    *eg2 = lookup(&format!("opt/{name}/eg2"))
                        .ok_or_else(|| Error::corrupt(format!("missing opt state for {name}")))?;
                }
                Slot::Adam { m, v } => {
                    *m = lookup(&format!("opt/{name}/m"))
                        .ok_or_else(|| Error::corrupt(format!("missing opt state for {name}")))?;
                    *v = lookup(&format!("opt/{name}/v"))
                        .ok_or_else(|| Error::corrupt(format!("missing opt state for {name}")))?;
                }
            }
        }
        let t = lookup("opt/step")
            .ok_or_else(|| Error::corrupt("missing opt/step"))?
            .item()?;
        self.t = t.to_f64() as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = Tensor::<f64>::full(&[3], 1.5);
        let g = Tensor::<f64>::zeros(&[3]);
        let mut e = Tensor::<f64>::zeros(&[3]);
        rmsprop_step(&mut p, &g, &mut e, 0.9, 1.0, 0.045).unwrap();
        assert_eq!(p.data(), &[1.5, 1.5, 1.5]);

        let mut m = Tensor::<f64>::zeros(&[3]);
        let mut v = Tensor::<f64>::zeros(&[3]);
        adam_step(&mut p, &g, &mut m, &mut v, 1, 0.9, 0.999, 1e-10, 0.001).unwrap();
        assert_eq!(p.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn rmsprop_first_step_matches_hand_derivation() {
        // g=1, E0=0, rho=0.9: E becomes 0.1.
        // eps=1:     delta = -0.045 / sqrt(1.1)
        // eps=1e-10: delta = -0.045 / sqrt(0.1 + 1e-10)
        for (eps, expected) in [
            (1.0, -0.045 / 1.1f64.sqrt()),
            (1e-10, -0.045 / (0.1f64 + 1e-10).sqrt()),
        ] {
            let mut p = Tensor::<f64>::zeros(&[1]);
            let g = Tensor::<f64>::ones(&[1]);
            let mut e = Tensor::<f64>::zeros(&[1]);
            rmsprop_step(&mut p, &g, &mut e, 0.9, eps, 0.045).unwrap();
            assert!((e.data()[0] - 0.1).abs() < 1e-15);
            let rel = ((p.data()[0] - expected) / expected.abs()).abs();
            assert!(rel < 1e-12, "eps {eps}: got {} want {expected}", p.data()[0]);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_eta() {
        // At t=1 the bias-corrected ratio m_hat/sqrt(v_hat) is sign(g).
        for &g0 in &[0.5f64, -3.0, 10.0] {
            let mut p = Tensor::<f64>::zeros(&[1]);
            let g = Tensor::<f64>::full(&[1], g0);
            let mut m = Tensor::<f64>::zeros(&[1]);
            let mut v = Tensor::<f64>::zeros(&[1]);
            adam_step(&mut p, &g, &mut m, &mut v, 1, 0.9, 0.999, 1e-12, 0.001).unwrap();
            let delta = p.data()[0];
            assert!(
                (delta.abs() - 0.001).abs() < 1e-6,
                "g {g0}: |delta| = {}",
                delta.abs()
            );
            assert_eq!(delta.signum(), -g0.signum());
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = Tensor::<f64>::zeros(&[1]);
        let g = Tensor::<f64>::full(&[1], f64::NAN);
        let mut e = Tensor::<f64>::zeros(&[1]);
        assert!(matches!(
            rmsprop_step(&mut p, &g, &mut e, 0.9, 1.0, 0.045),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn epsilon_placement_differs_between_algorithms() {
        // Same accumulator value E = v_hat = 0.25, eps = 1:
        // RMSProp factor 1/sqrt(1.25), Adam factor 1/(0.5 + 1).
        let e = 0.25f64;
        let eps = 1.0f64;
        let rms_factor = 1.0 / (e + eps).sqrt();
        let adam_factor = 1.0 / (e.sqrt() + eps);
        assert!((rms_factor - 0.894427).abs() < 1e-6);
        assert!((adam_factor - 0.666667).abs() < 1e-6);
        assert!(rms_factor != adam_factor);
    }

    #[test]
    fn quasi_adaptive_bound_with_unit_epsilon() {
        // 1/sqrt(E+1) <= 1 for any E >= 0.
        let mut rng = SeededRng::new(3);
        for _ in 0..10_000 {
            let g = rng.normal() * 100.0;
            let e = g * g;
            let factor = 1.0 / (e + 1.0f64).sqrt();
            assert!(factor > 0.0 && factor <= 1.0);
        }
    }

    #[test]
    fn adam_factor_bounded_by_inverse_epsilon() {
        let eps = 1e-10f64;
        let mut rng = SeededRng::new(4);
        for _ in 0..10_000 {
            let v_hat = (rng.normal() * 1e-3).powi(2);
            let factor = 1.0 / (v_hat.sqrt() + eps);
            assert!(factor <= 1.0 / eps);
        }
    }

    #[test]
    fn rmsprop_scale_equivariance_at_tiny_epsilon() {
        // Scaling g by c and E by c^2 leaves the update magnitude unchanged.
        let c = 37.5f64;
        for &(g0, e0) in &[(0.8f64, 0.04f64), (-1.6, 2.0), (0.02, 1e-4)] {
            let step = |g: f64, e0: f64| {
                let mut p = Tensor::<f64>::zeros(&[1]);
                let gt = Tensor::<f64>::full(&[1], g);
                let mut e = Tensor::<f64>::full(&[1], e0);
                rmsprop_step(&mut p, &gt, &mut e, 0.9, 1e-30, 0.01).unwrap();
                p.data()[0]
            };
            let base = step(g0, e0);
            let scaled = step(c * g0, c * c * e0);
            assert!(
                ((base - scaled) / base.abs()).abs() < 1e-12,
                "base {base} scaled {scaled}"
            );
        }
    }

    #[test]
    fn schedules_match_table_values() {
        let o1 = preset(Preset::O1);
        assert_eq!(lr_at(0, &o1.schedule, o1.eta0), 0.045);
        assert!((lr_at(2, &o1.schedule, o1.eta0) - 0.045 * 0.94).abs() < 1e-15);
        assert_eq!(lr_at(3, &o1.schedule, o1.eta0), lr_at(2, &o1.schedule, o1.eta0));

        let o3 = preset(Preset::O3);
        assert!(o3.schedule.is_constant());
        assert_eq!(lr_at(57, &o3.schedule, o3.eta0), 0.001);

        let o4 = preset(Preset::O4);
        assert!((lr_at(1, &o4.schedule, o4.eta0) - 0.001 * 0.96).abs() < 1e-15);
    }

    #[test]
    fn presets_reproduce_table() {
        let o1 = preset(Preset::O1);
        assert_eq!(o1.algorithm, Algorithm::RmsProp);
        assert_eq!(o1.epsilon, 1.0);
        assert_eq!(o1.eta0, 0.045);
        assert_eq!(o1.schedule.decay_rate, 0.94);
        assert_eq!(o1.schedule.interval_epochs, 2);

        let o2 = preset(Preset::O2);
        assert_eq!(o2.epsilon, 1.0);
        assert_eq!(o2.eta0, 0.1);
        assert_eq!(o2.schedule.decay_rate, 0.16);
        assert_eq!(o2.schedule.interval_epochs, 30);

        let o4 = preset(Preset::O4);
        assert_eq!(o4.algorithm, Algorithm::Adam);
        assert_eq!(o4.schedule.decay_rate, 0.96);

        assert!(Preset::parse("o3").is_ok());
        assert!(matches!(Preset::parse("O9"), Err(Error::Config(_))));
    }

    #[test]
    fn state_evolution_is_deterministic() {
        let cfg = preset(Preset::O3);
        let shapes = vec![vec![4], vec![2, 2]];
        let run = || {
            let mut opt = Optimizer::<f32>::new(cfg, &shapes);
            let mut params = vec![Tensor::<f32>::full(&[4], 1.0), Tensor::<f32>::full(&[2, 2], -0.5)];
            let mut rng = SeededRng::new(42);
            for _ in 0..25 {
                let grads: Vec<Tensor<f32>> = shapes
                    .iter()
                    .map(|s| {
                        Tensor::create(
                            s,
                            crate::tensor::Fill::Normal {
                                mean: 0.0,
                                std: 1.0,
                                rng: &mut rng,
                            },
                        )
                        .unwrap()
                    })
                    .collect();
                opt.step(&mut params, &grads, 0.001).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }
}
