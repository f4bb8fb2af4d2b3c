//! Outer level: a PI controller that sets the accuracy-loss weight, and the
//! scalarization of all objective losses into one training loss.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiConfig {
    pub kp: f64,
    pub ki: f64,
    pub alpha_min: f64,
    /// Bound on `|ki * err_sum|`; `None` means `10 * kp`.
    pub windup_cap: Option<f64>,
}

impl Default for PiConfig {
    fn default() -> Self {
        Self {
            kp: 0.01,
            ki: 0.001,
            alpha_min: 0.1,
            windup_cap: None,
        }
    }
}

impl PiConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(ok(self.kp) && ok(self.ki) && ok(self.alpha_min) && self.windup_cap.is_none_or(ok)) {
            return Err(Error::config("PI gains, alpha_min and windup_cap must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Controller state. `err = target - loss`, so a batch loss above target
/// gives a negative error and a larger accuracy weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiController {
    pub kp: f64,
    pub ki: f64,
    pub alpha_min: f64,
    pub target: f64,
    pub windup_cap: f64,
    pub err_sum: f64,
    pub t: u64,
}

/// One controller output, as logged in the alpha trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiStep {
    pub step: u64,
    pub err: f64,
    pub err_sum: f64,
    pub alpha_acc: f64,
}

impl PiController {
    pub fn new(cfg: &PiConfig, target: f64) -> Self {
        Self {
            kp: cfg.kp,
            ki: cfg.ki,
            alpha_min: cfg.alpha_min,
            target,
            windup_cap: cfg.windup_cap.unwrap_or(10.0 * cfg.kp),
            err_sum: 0.0,
            t: 0,
        }
    }

    /// `alpha = kp / (1 + exp(err)) - ki * err_sum + alpha_min`, floored at 0.
    pub fn pi_alpha(&mut self, batch_loss: f64) -> PiStep {
        let err = self.target - batch_loss;
        self.err_sum += err;
        if self.ki > 0.0 {
            let bound = self.windup_cap / self.ki;
            self.err_sum = self.err_sum.clamp(-bound, bound);
        }
        // kp / (1 + e^err) written to stay finite for large |err|
        let p_term = self.kp * crate::backbone::sigmoid(-err);
        let alpha = (p_term - self.ki * self.err_sum + self.alpha_min).max(0.0);
        self.t += 1;
        PiStep {
            step: self.t,
            err,
            err_sum: self.err_sum,
            alpha_acc: alpha,
        }
    }

    /// Largest value `pi_alpha` can return.
    pub fn alpha_upper_bound(&self) -> f64 {
        self.alpha_min + self.kp + self.windup_cap
    }
}

/// Preference over the non-accuracy objectives and their global scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceVector {
    #[serde(default)]
    pub rho: Vec<f64>,
    pub lambda: f64,
}

impl PreferenceVector {
    pub fn new(rho: Vec<f64>, lambda: f64) -> Result<Self> {
        let p = Self { rho, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("preference entries and lambda must be finite and >= 0"));
        }
        if self.rho.len() > 1 && (self.rho.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("preference vector {:?} must sum to 1", self.rho)));
        }
        Ok(())
    }
}

/// `alpha_acc * losses[0] + lambda * sum_j rho[j] * losses[j + 1]`.
pub fn synthesize_loss(alpha_acc: f64, pref: &PreferenceVector, losses: &[f64]) -> Result<f64> {
    let (acc, rest) = losses.split_first().ok_or(Error::Empty("objective losses"))?;
    if rest.len() != pref.rho.len() {
        return Err(Error::Shape(format!(
            "{} non-accuracy losses for {} preference weights",
            rest.len(),
            pref.rho.len()
        )));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss(format!("{losses:?}")));
    }
    let others: f64 = pref.rho.iter().zip(rest).map(|(r, l)| r * l).sum();
    Ok(alpha_acc * acc + pref.lambda * others)
}

/// Static scalarization: the full weight vector (accuracy first) is used
/// unchanged at every step.
pub fn static_alpha(rho_full: &[f64]) -> Vec<f64> {
    rho_full.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(target: f64) -> PiController {
        PiController::new(&PiConfig::default(), target)
    }

    #[test]
    fn zero_error_gives_half_kp() {
        let mut c = fresh(0.2);
        let s = c.pi_alpha(0.2);
        assert!((s.alpha_acc - 0.105).abs() < 1e-12);
        assert_eq!(c.t, 1);
    }

    #[test]
    fn large_loss_raises_alpha() {
        let mut c = fresh(0.2);
        let s = c.pi_alpha(10.2);
        let expected = 0.01 / (1.0 + (-10.0f64).exp()) + 0.001 * 10.0 + 0.1;
        assert!((s.alpha_acc - expected).abs() < 1e-12);
        assert!((s.alpha_acc - 0.1200).abs() < 1e-4);
    }

    #[test]
    fn windup_is_capped() {
        let mut c = fresh(1.0);
        for _ in 0..100_000 {
            let s = c.pi_alpha(0.0);
            assert!(s.alpha_acc >= 0.0);
            assert!((c.ki * c.err_sum).abs() <= c.windup_cap + 1e-12);
        }
        assert!((c.ki * c.err_sum - c.windup_cap).abs() < 1e-12);
    }

    #[test]
    fn no_integral_means_constant_output() {
        let cfg = PiConfig {
            ki: 0.0,
            ..PiConfig::default()
        };
        let mut c = PiController::new(&cfg, 0.3);
        let first = c.pi_alpha(0.5).alpha_acc;
        for _ in 0..50 {
            assert_eq!(c.pi_alpha(0.5).alpha_acc, first);
        }
    }

    #[test]
    fn synthesis_examples() {
        let pref = PreferenceVector::new(vec![0.5, 0.5], 0.2).unwrap();
        let l = synthesize_loss(0.105, &pref, &[1.0, 2.0, 4.0]).unwrap();
        assert!((l - 0.705).abs() < 1e-12);

        let zero = PreferenceVector::new(vec![0.5, 0.5], 0.0).unwrap();
        assert_eq!(synthesize_loss(0.3, &zero, &[2.0, 5.0, 7.0]).unwrap(), 0.6);

        // lambda = 1 with alpha fixed to rho_acc is the static weighted sum
        let full = [0.4, 0.3, 0.3];
        let one = PreferenceVector::new(vec![0.5, 0.5], 1.0).unwrap();
        let a = synthesize_loss(full[0], &PreferenceVector { rho: full[1..].to_vec(), ..one }, &[1.0, 2.0, 3.0]).unwrap();
        let b: f64 = static_alpha(&full).iter().zip([1.0, 2.0, 3.0]).map(|(w, l)| w * l).sum();
        assert!((a - b).abs() < 1e-12);

        assert!(synthesize_loss(0.1, &pref, &[1.0, 2.0]).is_err());
        assert!(PreferenceVector::new(vec![0.5, 0.6], 0.2).is_err());
    }

    #[test]
    fn static_weights_are_stateless() {
        let w = [0.25; 4];
        assert_eq!(static_alpha(&w), static_alpha(&w));
        assert_eq!(static_alpha(&[1.0, 0.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0]);
    }
}
