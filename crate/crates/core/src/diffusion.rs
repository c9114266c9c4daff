//! Forward noising, one-step clean estimate, reverse steps and full chains.
//!
//! Step `t = 0` is the clean end of the chain: noising to step 0 and chains
//! of length 0 are identities.

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{gaussian_draw, RngStream, Tensor};
use crate::schedule::NoiseSchedule;

/// Anything that predicts the noise component of a single sample `x_t`.
///
/// Implementations may consume draws from `rng` (the fusion noise of the
/// denoiser does); given the same stream state they must be deterministic.
pub trait NoisePredictor {
    fn predict_noise(&self, xt: &Tensor, t: usize, rng: &mut RngStream) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, usize) -> Tensor,
{
    fn predict_noise(&self, xt: &Tensor, t: usize, _rng: &mut RngStream) -> Result<Tensor> {
        Ok(self(xt, t))
    }
}

/// The three closed-form maps of a fixed schedule.
#[derive(Clone, Debug)]
pub struct DiffusionProcess {
    schedule: NoiseSchedule,
}

impl DiffusionProcess {
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self { schedule }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    fn check_step(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = usize::from(!allow_zero);
        if t < lo || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside [{lo}, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`.
    pub fn forward_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_step(t, true)?;
        ensure_shape(x0.shape(), eps.shape())?;
        if t == 0 {
            return Ok(x0.clone());
        }
        let ab = self.schedule.alpha_bar(t);
        x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// `x0_hat = (x_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t)`.
    pub fn predict_x0(&self, xt: &Tensor, t: usize, eps_pred: &Tensor) -> Result<Tensor> {
        self.check_step(t, false)?;
        ensure_shape(xt.shape(), eps_pred.shape())?;
        let (a, b) = self.x0_coefs(t);
        xt.axpby(a, eps_pred, b)
    }

    /// Coefficients `(a, b)` with `x0_hat = a x_t + b eps_pred`.
    pub fn x0_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.schedule.alpha_bar(t);
        let inv = 1.0 / ab.sqrt();
        (inv, -(1.0 - ab).sqrt() * inv)
    }

    /// One ancestral step `x_t -> x_{t-1}` with explicit noise `z`.
    pub fn reverse_step(&self, xt: &Tensor, t: usize, eps_pred: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.check_step(t, false)?;
        ensure_shape(xt.shape(), eps_pred.shape())?;
        ensure_shape(xt.shape(), z.shape())?;
        let s = &self.schedule;
        let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
        let eps_coef = (1.0 - s.alpha(t)) / (1.0 - s.alpha_bar(t)).sqrt();
        let mut mean = xt.axpby(inv_sqrt_alpha, eps_pred, -inv_sqrt_alpha * eps_coef)?;
        let sigma = s.sigma(t);
        if sigma > 0.0 {
            for (m, zi) in mean.data_mut().iter_mut().zip(z.data()) {
                *m += sigma * zi;
            }
        }
        Ok(mean)
    }

    /// Predicts the noise with `model` and takes one reverse step, drawing the
    /// step noise from `rng` only when `sigma_t > 0`.
    pub fn model_step(&self, model: &dyn NoisePredictor, xt: &Tensor, t: usize, rng: &mut RngStream) -> Result<Tensor> {
        let eps = model.predict_noise(xt, t, rng)?;
        let z = if self.schedule.sigma(t) > 0.0 {
            gaussian_draw(rng, xt.shape())
        } else {
            Tensor::zeros(xt.shape())
        };
        self.reverse_step(xt, t, &eps, &z)
    }

    /// Noises `x_init` to `from_t` (or starts from pure noise when no
    /// `x_init` is given and `from_t == T`) and runs the chain down to 0.
    pub fn ancestral_sample(
        &self,
        model: &dyn NoisePredictor,
        rng: &mut RngStream,
        shape: &[usize],
        from_t: usize,
        x_init: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_step(from_t, x_init.is_some())?;
        let mut x = match x_init {
            Some(x0) => {
                ensure_shape(shape, x0.shape())?;
                let eps = gaussian_draw(rng, shape);
                self.forward_sample(x0, from_t, &eps)?
            }
            None if from_t == self.steps() => gaussian_draw(rng, shape),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "starting below T = {} needs an initial sample",
                    self.steps()
                )))
            }
        };
        for t in (1..=from_t).rev() {
            x = self.model_step(model, &x, t, rng)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::SigmaMode;

    fn cosine() -> DiffusionProcess {
        DiffusionProcess::new(NoiseSchedule::cosine(1000, SigmaMode::Posterior).unwrap())
    }

    /// Schedule with a single step whose `alpha_bar` is 0.25.
    fn quarter() -> DiffusionProcess {
        DiffusionProcess::new(NoiseSchedule::linear(1, 0.75, 0.75, SigmaMode::Posterior).unwrap())
    }

    #[test]
    fn forward_sample_direct_formula() {
        let d = quarter();
        let x0 = Tensor::from_vec(vec![2.0, 0.0]);
        let eps = Tensor::from_vec(vec![0.0, 2.0]);
        let xt = d.forward_sample(&x0, 1, &eps).unwrap();
        assert!((xt.data()[0] - 1.0).abs() < 1e-15);
        assert!((xt.data()[1] - 3f64.sqrt()).abs() < 1e-15);
        let back = d.predict_x0(&xt, 1, &eps).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-15);
    }

    #[test]
    fn forward_sample_endpoints() {
        let d = cosine();
        let x0 = Tensor::from_vec(vec![0.5, -0.25]);
        let eps = Tensor::from_vec(vec![3.0, 1.0]);
        assert_eq!(d.forward_sample(&x0, 0, &eps).unwrap(), x0);
        let zero = Tensor::zeros(&[2]);
        let shrunk = d.forward_sample(&x0, 10, &zero).unwrap();
        assert_eq!(shrunk, x0.scale(d.schedule().alpha_bar(10).sqrt()));
        assert!(d.forward_sample(&x0, 1, &Tensor::zeros(&[3])).is_err());
        assert!(d.forward_sample(&x0, 1001, &eps).is_err());
    }

    #[test]
    fn predict_x0_inverts_forward_for_every_step() {
        let d = cosine();
        let mut rng = RngStream::new(3, 0);
        let x0 = gaussian_draw(&mut rng, &[16]);
        let eps = gaussian_draw(&mut rng, &[16]);
        for t in 1..=1000 {
            let xt = d.forward_sample(&x0, t, &eps).unwrap();
            let back = d.predict_x0(&xt, t, &eps).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() < 1e-9, "t = {t}");
        }
        let xt = Tensor::from_vec(vec![1.0, 2.0]);
        let est = d.predict_x0(&xt, 7, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(est, xt.scale(1.0 / d.schedule().alpha_bar(7).sqrt()));
    }

    #[test]
    fn reverse_step_direct_formula() {
        let d = DiffusionProcess::new(NoiseSchedule::linear(1, 0.01, 0.01, SigmaMode::Posterior).unwrap());
        let x = Tensor::from_vec(vec![1.0]);
        let out = d
            .reverse_step(&x, 1, &Tensor::zeros(&[1]), &Tensor::from_vec(vec![5.0]))
            .unwrap();
        assert!((out.data()[0] - 1.005_037_815_259_212).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_matches_posterior_mean_with_true_noise() {
        let d = DiffusionProcess::new(NoiseSchedule::linear(50, 1e-3, 0.05, SigmaMode::Posterior).unwrap());
        let mut rng = RngStream::new(8, 0);
        let zero = Tensor::zeros(&[6]);
        for t in 1..=50 {
            let x0 = gaussian_draw(&mut rng, &[6]);
            let eps = gaussian_draw(&mut rng, &[6]);
            let xt = d.forward_sample(&x0, t, &eps).unwrap();
            let (cx0, cxt) = d.schedule().posterior_mean_coefs(t);
            let posterior = x0.axpby(cx0, &xt, cxt).unwrap();
            let mean = d.reverse_step(&xt, t, &eps, &zero).unwrap();
            assert!(mean.max_abs_diff(&posterior).unwrap() < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn noiseless_true_noise_replay_returns_to_x0() {
        let d = DiffusionProcess::new(NoiseSchedule::cosine(1000, SigmaMode::Posterior).unwrap());
        let x0 = Tensor::from_vec(vec![0.37]);
        let mut x = d.forward_sample(&x0, 1000, &Tensor::from_vec(vec![-1.2])).unwrap();
        let zero = Tensor::zeros(&[1]);
        for t in (1..=1000).rev() {
            let ab = d.schedule().alpha_bar(t);
            let eps = Tensor::from_vec(vec![(x.data()[0] - ab.sqrt() * x0.data()[0]) / (1.0 - ab).sqrt()]);
            x = d.reverse_step(&x, t, &eps, &zero).unwrap();
        }
        assert!((x.data()[0] - 0.37).abs() < 1e-6, "{}", x.data()[0]);
    }

    #[test]
    fn final_step_is_deterministic() {
        let d = cosine();
        let x = Tensor::from_vec(vec![0.2, 0.1]);
        let eps = Tensor::from_vec(vec![0.3, -0.3]);
        let a = d.reverse_step(&x, 1, &eps, &Tensor::from_vec(vec![9.0, 9.0])).unwrap();
        let b = d.reverse_step(&x, 1, &eps, &Tensor::from_vec(vec![-4.0, 2.0])).unwrap();
        assert_eq!(a, b);
    }

    fn zero_model(xt: &Tensor, _t: usize) -> Tensor {
        Tensor::zeros(xt.shape())
    }

    #[test]
    fn chain_of_length_one_is_one_step() {
        let d = cosine();
        let x0 = Tensor::from_vec(vec![0.5, 0.5]);
        let out = d
            .ancestral_sample(&zero_model, &mut RngStream::new(1, 0), &[2], 1, Some(&x0))
            .unwrap();
        let mut rng = RngStream::new(1, 0);
        let eps = gaussian_draw(&mut rng, &[2]);
        let x1 = d.forward_sample(&x0, 1, &eps).unwrap();
        let manual = d
            .reverse_step(&x1, 1, &Tensor::zeros(&[2]), &Tensor::zeros(&[2]))
            .unwrap();
        assert_eq!(out, manual);
    }

    #[test]
    fn chains_are_deterministic_and_shaped() {
        let d = DiffusionProcess::new(NoiseSchedule::linear(40, 1e-3, 0.1, SigmaMode::Posterior).unwrap());
        let a = d
            .ancestral_sample(&zero_model, &mut RngStream::new(4, 0), &[2, 3], 40, None)
            .unwrap();
        let b = d
            .ancestral_sample(&zero_model, &mut RngStream::new(4, 0), &[2, 3], 40, None)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 3]);
    }

    #[test]
    fn empty_chain_and_bad_starts() {
        let d = cosine();
        let x0 = Tensor::from_vec(vec![0.1]);
        let out = d
            .ancestral_sample(&zero_model, &mut RngStream::new(0, 0), &[1], 0, Some(&x0))
            .unwrap();
        assert_eq!(out, x0);
        assert!(d
            .ancestral_sample(&zero_model, &mut RngStream::new(0, 0), &[1], 0, None)
            .is_err());
        assert!(d
            .ancestral_sample(&zero_model, &mut RngStream::new(0, 0), &[1], 10, None)
            .is_err());
        assert!(d
            .ancestral_sample(&zero_model, &mut RngStream::new(0, 0), &[1], 1001, Some(&x0))
            .is_err());
    }
}
