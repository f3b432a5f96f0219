//! Noise schedule, forward noising, x0 estimation, deterministic DDIM
//! stepping and classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance schedule: beta[s] for s in 1..=t_max and the cumulative products
/// alpha_bar[t] = prod_{s<=t} (1 - beta[s]). alpha_bar(0) is defined as 1.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub t_max: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta interpolation from `beta_start` to `beta_end` over
    /// `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::param("schedule needs t_max >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(format!(
                "invalid beta range [{beta_start}, {beta_end}]"
            )));
        }
        let mut beta = Vec::with_capacity(t_max);
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for s in 0..t_max {
            let frac = if t_max == 1 { 0.0 } else { s as f64 / (t_max - 1) as f64 };
            let b = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - b;
            beta.push(b);
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            t_max,
            beta,
            alpha_bar,
        })
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "beta index {t}");
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "alpha_bar index {t}");
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(Error::param(format!(
                "timestep {t} outside [1, {}]",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
pub fn add_noise<S: Scalar>(
    x0: &Tensor<S>,
    eps: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    x0.same_shape(eps)?;
    let ab = sched.alpha_bar(t);
    let a = S::from_f64(ab.sqrt());
    let b = S::from_f64((1.0 - ab).sqrt());
    let mut out = x0.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// x0_hat = (x_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t)
pub fn estimate_x0<S: Scalar>(
    xt: &Tensor<S>,
    eps_pred: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    xt.same_shape(eps_pred)?;
    let ab = sched.alpha_bar(t);
    let inv = S::from_f64(1.0 / ab.sqrt());
    let b = S::from_f64((1.0 - ab).sqrt());
    let mut out = xt.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps_pred.data()) {
        *o = (*o - b * e) * inv;
    }
    Ok(out)
}

/// eps = eps_uncond + scale * (eps_cond - eps_uncond).
///
/// scale == 1 returns the conditional prediction bit-exactly.
pub fn cfg_combine<S: Scalar>(
    eps_uncond: &Tensor<S>,
    eps_cond: &Tensor<S>,
    scale: f64,
) -> Tensor<S> {
    assert_eq!(eps_uncond.shape(), eps_cond.shape(), "cfg shape mismatch");
    if scale == 1.0 {
        return eps_cond.clone();
    }
    let s = S::from_f64(scale);
    let mut out = eps_uncond.clone();
    for (o, &c) in out.data_mut().iter_mut().zip(eps_cond.data()) {
        *o = *o + s * (c - *o);
    }
    out
}

/// One deterministic DDIM step (eta = 0):
/// x_{t_prev} = sqrt(alpha_bar_{t_prev}) * x0_hat + sqrt(1 - alpha_bar_{t_prev}) * eps.
pub fn ddim_step<S: Scalar>(
    xt: &Tensor<S>,
    eps: &Tensor<S>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    if t_prev >= t {
        return Err(Error::param(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let x0 = estimate_x0(xt, eps, t, sched)?;
    let ab_prev = sched.alpha_bar(t_prev);
    let a = S::from_f64(ab_prev.sqrt());
    let b = S::from_f64((1.0 - ab_prev).sqrt());
    let mut out = x0;
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// Descending timesteps for a `steps`-step trajectory: ceil(T*i/steps) for
/// i = steps..1. With steps == T this is T, T-1, ..., 1.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && steps <= t_max, "steps must lie in [1, t_max]");
    (1..=steps)
        .rev()
        .map(|i| (t_max * i).div_ceil(steps))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 100,
            guidance_scale: 7.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.steps < 1 || self.steps > t_max {
            return Err(Error::param(format!(
                "sampler steps {} outside [1, {t_max}]",
                self.steps
            )));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::param("guidance scale must be >= 0"));
        }
        Ok(())
    }
}

/// Run the DDIM loop from seeded Gaussian noise down to the clean latent.
///
/// `predict(x_t, t, conditional)` returns the predicted noise for the
/// conditional or null-conditioned branch; guidance combines the two unless
/// the scale is exactly 1, in which case only the conditional branch runs.
pub fn sample_latent<S: Scalar>(
    predict: &dyn Fn(&Tensor<S>, usize, bool) -> Tensor<S>,
    latent_shape: &[usize],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    cfg.validate(sched.t_max)?;
    let mut rng = Rng::new(cfg.seed);
    let mut x: Tensor<S> = Tensor::randn(latent_shape, &mut rng, 1.0);
    let ts = ddim_timesteps(sched.t_max, cfg.steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let eps_cond = predict(&x, t, true);
        let eps = if cfg.guidance_scale == 1.0 {
            eps_cond
        } else {
            let eps_uncond = predict(&x, t, false);
            cfg_combine(&eps_uncond, &eps_cond, cfg.guidance_scale)
        };
        x = ddim_step(&x, &eps, t, t_prev, sched)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_endpoints_match_independent_product() {
        let s = sched();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
        // Independent accumulation, written without reusing the schedule's
        // own loop.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-18);
        assert!(
            (s.alpha_bar(1000) - 4.0358297653756754e-5).abs() < 1e-12,
            "alpha_bar(T) = {}",
            s.alpha_bar(1000)
        );
    }

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval() {
        let s = sched();
        let mut prev = 1.0;
        for t in 1..=1000 {
            let ab = s.alpha_bar(t);
            assert!(ab > 0.0 && ab < 1.0);
            assert!(ab < prev, "alpha_bar not strictly decreasing at t={t}");
            prev = ab;
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 1.0).is_err());
        let s = sched();
        let x: Tensor<f64> = Tensor::zeros(&[4]);
        assert!(add_noise(&x, &x, 0, &s).is_err());
        assert!(add_noise(&x, &x, 1001, &s).is_err());
        assert!(ddim_step(&x, &x, 5, 5, &s).is_err());
    }

    #[test]
    fn add_noise_limit_cases_and_scalar_example() {
        let s = sched();
        let t = 321;
        let ab = s.alpha_bar(t);
        let x0: Tensor<f64> = Tensor::from_vec(&[3], vec![0.2, -0.7, 1.0]);
        let zero = Tensor::zeros(&[3]);
        let xt = add_noise(&x0, &zero, t, &s).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - ab.sqrt() * b).abs() < 1e-15);
        }
        let eps: Tensor<f64> = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let xt = add_noise(&zero, &eps, t, &s).unwrap();
        for (a, b) in xt.data().iter().zip(eps.data()) {
            assert!((a - (1.0 - ab).sqrt() * b).abs() < 1e-15);
        }
        // Hand arithmetic with alpha_bar = 0.25: x_t = 0.5 + sqrt(0.75).
        let tiny = NoiseSchedule {
            t_max: 1,
            beta: vec![0.75],
            alpha_bar: vec![0.25],
        };
        let one: Tensor<f64> = Tensor::scalar(1.0);
        let xt = add_noise(&one, &one, 1, &tiny).unwrap();
        assert!((xt.item() - 1.3660254037844386).abs() < 1e-12);
        let x0_hat = estimate_x0(&xt, &one, 1, &tiny).unwrap();
        assert!((x0_hat.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noising_roundtrip_identity() {
        let s = sched();
        let mut rng = Rng::new(40);
        for _ in 0..200 {
            let t = 1 + rng.below(1000) as usize;
            let x0: Tensor<f64> = Tensor::randn(&[6], &mut rng, 1.0);
            let eps: Tensor<f64> = Tensor::randn(&[6], &mut rng, 1.0);
            let xt = add_noise(&x0, &eps, t, &s).unwrap();
            let rec = estimate_x0(&xt, &eps, t, &s).unwrap();
            assert!(rec.max_abs_diff(&x0) < 1e-5, "t={t}");
        }
    }

    #[test]
    fn cfg_identities() {
        let mut rng = Rng::new(41);
        let u: Tensor<f64> = Tensor::randn(&[10], &mut rng, 1.0);
        let c: Tensor<f64> = Tensor::randn(&[10], &mut rng, 1.0);
        assert_eq!(cfg_combine(&u, &u, 7.5), u);
        assert_eq!(cfg_combine(&u, &c, 1.0), c);
        let z: Tensor<f64> = Tensor::zeros(&[1]);
        let o: Tensor<f64> = Tensor::scalar(1.0);
        assert!((cfg_combine(&z, &o, 7.5).item() - 7.5).abs() < 1e-15);
        // Affine in the scale: combine(a,b,s1+s2) - combine(a,b,s1) == s2*(b-a).
        let s1 = 2.5;
        let s2 = 3.25;
        let lhs_a = cfg_combine(&u, &c, s1 + s2);
        let lhs_b = cfg_combine(&u, &c, s1);
        for i in 0..10 {
            let diff = lhs_a.data()[i] - lhs_b.data()[i];
            let expect = s2 * (c.data()[i] - u.data()[i]);
            assert!((diff - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_step_consistency() {
        let s = sched();
        let mut rng = Rng::new(42);
        let x0: Tensor<f64> = Tensor::randn(&[8], &mut rng, 1.0);
        let eps: Tensor<f64> = Tensor::randn(&[8], &mut rng, 1.0);
        let t = 700;
        let xt = add_noise(&x0, &eps, t, &s).unwrap();
        // t_prev = 0 returns x0_hat exactly (alpha_bar(0) = 1).
        let back = ddim_step(&xt, &eps, t, 0, &s).unwrap();
        let x0_hat = estimate_x0(&xt, &eps, t, &s).unwrap();
        assert_eq!(back, x0_hat);
        // With the true noise, stepping lands on add_noise(x0, eps, t_prev).
        let t_prev = 350;
        let stepped = ddim_step(&xt, &eps, t, t_prev, &s).unwrap();
        let direct = add_noise(&x0, &eps, t_prev, &s).unwrap();
        assert!(stepped.max_abs_diff(&direct) < 1e-10);
        // Determinism.
        let again = ddim_step(&xt, &eps, t, t_prev, &s).unwrap();
        assert_eq!(stepped, again);
    }

    #[test]
    fn timestep_grid_is_uniform_and_complete() {
        let ts = ddim_timesteps(1000, 100);
        assert_eq!(ts.len(), 100);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[99], 10);
        for w in ts.windows(2) {
            assert_eq!(w[0] - w[1], 10);
        }
        let full = ddim_timesteps(1000, 1000);
        assert_eq!(full[0], 1000);
        assert_eq!(full[999], 1);
    }

    #[test]
    fn oracle_predictor_recovers_one_point_dataset() {
        // A predictor that derives the exact noise from the known x0 turns
        // the sampler into an identity onto that x0.
        let s = sched();
        let mut rng = Rng::new(43);
        let x0: Tensor<f64> = Tensor::randn(&[12], &mut rng, 0.5);
        let predict = |xt: &Tensor<f64>, t: usize, _cond: bool| -> Tensor<f64> {
            let ab = s.alpha_bar(t);
            let mut eps = xt.clone();
            for (e, &x0v) in eps.data_mut().iter_mut().zip(x0.data()) {
                *e = (*e - ab.sqrt() * x0v) / (1.0 - ab).sqrt();
            }
            eps
        };
        let cfg = SamplerConfig {
            steps: 1000,
            guidance_scale: 1.0,
            seed: 99,
        };
        let out = sample_latent(&predict, &[12], &cfg, &s).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-3, "diff {}", out.max_abs_diff(&x0));
        // Determinism under a fixed seed.
        let out2 = sample_latent(&predict, &[12], &cfg, &s).unwrap();
        assert_eq!(out, out2);
    }
}
