use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable description of a schedule; `build` turns it into the
/// precomputed arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.kind, self.beta_start, self.beta_end)
    }
}

/// Precomputed variance schedule. Accessors take 1-based timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_sigmas: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRepr {
    betas: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(repr: ScheduleRepr) -> Result<Self> {
        NoiseSchedule::from_betas(repr.betas)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { betas: s.betas }
    }
}

/// Builds a schedule with `steps` betas interpolated between `beta_start`
/// and `beta_end`, endpoints included.
pub fn make_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidRange("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        }
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        // sigma_t^2 = beta_t, with a noise-free final step.
        let posterior_sigmas = betas
            .iter()
            .enumerate()
            .map(|(i, b)| if i == 0 { 0.0 } else { b.sqrt() })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_sigmas,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_sigmas(&self) -> &[f64] {
        &self.posterior_sigmas
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.posterior_sigmas[t - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_step_linear() {
        let s = make_schedule(4, ScheduleKind::Linear, 0.1, 0.4).unwrap();
        for (b, e) in s.betas().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((b - e).abs() < 1e-15);
        }
        assert!((s.alpha_bar(4) - 0.9 * 0.8 * 0.7 * 0.6).abs() < 1e-12);
        assert_eq!(s.sigma(1), 0.0);
        assert!((s.sigma(3) - 0.3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_step() {
        let s = make_schedule(1, ScheduleKind::Linear, 0.19, 0.19).unwrap();
        assert_eq!(s.betas(), &[0.19]);
        assert!((s.alpha_bar(1) - 0.81).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_regression() {
        // Oracle: running product of (1 - beta_i), accumulated independently
        // in log space.
        let s = ScheduleConfig::default().build().unwrap();
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar(1000) - log_sum.exp()).abs() < 1e-15);
        assert!((s.alpha_bar(1000) - 4.035_829_765_375_675e-5).abs() < 1e-17);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0, ScheduleKind::Linear, 0.1, 0.2).is_err());
        assert!(make_schedule(4, ScheduleKind::Linear, 0.0, 0.2).is_err());
        assert!(make_schedule(4, ScheduleKind::Linear, 0.3, 0.2).is_err());
        assert!(make_schedule(4, ScheduleKind::Linear, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.5]).is_err());
    }

    #[test]
    fn serde_round_trip_recomputes_derived_arrays() {
        let s = make_schedule(10, ScheduleKind::Linear, 0.01, 0.2).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
        assert!(serde_json::from_str::<NoiseSchedule>(r#"{"betas":[0.5,2.0]}"#).is_err());
    }

    proptest::proptest! {
        #[test]
        fn alpha_bars_are_running_products(steps in 1usize..300, start in 1e-5f64..0.3, extra in 0.0f64..0.5) {
            let end = (start + extra).min(0.99);
            let s = make_schedule(steps, ScheduleKind::Linear, start, end).unwrap();
            let mut acc = 1.0;
            for t in 1..=steps {
                acc *= s.alpha(t);
                proptest::prop_assert!((s.alpha_bar(t) - acc).abs() <= 1e-12);
                proptest::prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                proptest::prop_assert!(s.alpha_bar(t).sqrt() < s.alpha_bar(t - 1).sqrt());
            }
        }
    }
}
