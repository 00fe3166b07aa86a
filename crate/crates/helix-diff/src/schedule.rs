//! Forward-process noise schedule.

use crate::error::{Error, Result};

/// Linear beta schedule with the derived alpha / cumulative-product tables.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        t_steps,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_steps {
            return Err(Error::Usage(format!(
                "timestep {t} out of range for {}-step schedule",
                self.t_steps
            )));
        }
        Ok(())
    }

    /// Posterior variance of the reverse step at `t` (zero at t = 0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.beta, vec![0.1]);
        assert_eq!(s.alpha_bar, vec![0.9]);
    }

    #[test]
    fn two_step_cumulative_product() {
        // Hand multiplication: 0.9, then 0.9 * 0.8 = 0.72.
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn desk_scale_defaults_are_valid() {
        let s = make_linear_schedule(50, 1e-4, 0.02).unwrap();
        assert_eq!(s.t_steps, 50);
        assert!(s.beta.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bar.windows(2).all(|w| w[0] > w[1]));
        // alpha_bar consistent with an independent cumulative product.
        let mut prod = 1.0;
        for (i, &a) in s.alpha.iter().enumerate() {
            prod *= a;
            assert!((s.alpha_bar[i] - prod).abs() < 1e-15);
        }
        assert!((s.alpha_bar[0] - (1.0 - s.beta[0])).abs() < 1e-15);
    }

    #[test]
    fn bounds_are_enforced() {
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }
}
