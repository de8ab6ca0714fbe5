//! Cosine noise schedule, forward noising, ancestral DDPM steps and
//! classifier-free guidance.

mod sampler;

pub use sampler::{sample_batch, sample_loop, SampleRequest, Samples};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

/// Precomputed `alpha_bar[0..=T]` for the cosine schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// `alpha_bar(t) = f(t) / f(0)` with
    /// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("cosine_alpha_bar", "T must be at least 1"));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        alpha_bar[0] = 1.0;
        Ok(DiffusionSchedule { steps, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}`, clipped to `MAX_BETA`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps);
        (1.0 - self.alpha_bar[t] / self.alpha_bar[t - 1]).min(MAX_BETA)
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Posterior standard deviation `sigma_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        let var = self.beta(t) * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]);
        var.max(0.0).sqrt()
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            return Err(Error::StepOutOfRange {
                t,
                lo,
                hi: self.steps,
            });
        }
        Ok(())
    }

    /// Draws `eps ~ N(0, I)` and returns the noised latent at step `t`.
    pub fn add_noise<T: Real, R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        t: usize,
        rng: &mut R,
    ) -> Result<NoisedLatent<T>> {
        self.check(t, 0)?;
        let eps = standard_normal(x.shape(), rng);
        let x_t = self.noise_with(x, &eps, t)?;
        Ok(NoisedLatent { x_t, t, eps })
    }

    /// `sqrt(alpha_bar_t) * x + sqrt(1 - alpha_bar_t) * eps`
    pub fn noise_with<T: Real>(&self, x: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check(t, 0)?;
        if x.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_noise",
                lhs: x.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        if t == 0 {
            return Ok(x.clone());
        }
        let ab = self.alpha_bar[t];
        Ok(combine(x, eps, ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Posterior mean of `x_{t-1}` given `x_t` and predicted noise.
    pub fn ddpm_mean<T: Real>(&self, x_t: &Tensor<T>, eps_pred: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check(t, 1)?;
        if x_t.shape() != eps_pred.shape() {
            return Err(Error::ShapeMismatch {
                op: "ddpm_step",
                lhs: x_t.shape().to_vec(),
                rhs: eps_pred.shape().to_vec(),
            });
        }
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        let eps_coeff = self.beta(t) / (1.0 - self.alpha_bar[t]).sqrt();
        Ok(combine(x_t, eps_pred, inv_sqrt_alpha, -inv_sqrt_alpha * eps_coeff))
    }

    /// One ancestral step `x_t -> x_{t-1}`. No noise is injected at `t = 1`.
    pub fn ddpm_step<T: Real, R: Rng + ?Sized>(
        &self,
        x_t: &Tensor<T>,
        eps_pred: &Tensor<T>,
        t: usize,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let mut mean = self.ddpm_mean(x_t, eps_pred, t)?;
        if t > 1 {
            let sigma = T::from_f64_lossy(self.sigma(t));
            let z = standard_normal::<T, R>(x_t.shape(), rng);
            for (m, &zi) in mean.data_mut().iter_mut().zip(z.data()) {
                *m += sigma * zi;
            }
        }
        Ok(mean)
    }
}

/// A latent at noise level `t` together with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedLatent<T> {
    pub x_t: Tensor<T>,
    pub t: usize,
    pub eps: Tensor<T>,
}

fn combine<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ca: f64, cb: f64) -> Tensor<T> {
    let (ca, cb) = (T::from_f64_lossy(ca), T::from_f64_lossy(cb));
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ca * x + cb * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn standard_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// `eps_uncond + w * (eps_cond - eps_uncond)`; `w = 1` and `w = 0` return
/// the respective input unchanged.
pub fn cfg_combine<T: Real>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            lhs: eps_cond.shape().to_vec(),
            rhs: eps_uncond.shape().to_vec(),
        });
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let w = T::from_f64_lossy(w);
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&c, &u)| u + w * (c - u))
        .collect();
    Tensor::new(eps_cond.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        for steps in [1, 7, 100, 1000] {
            let s = DiffusionSchedule::cosine(steps).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=steps {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                let a = s.alpha(t);
                assert!(a > 0.0 && a <= 1.0);
                assert!(s.beta(t) <= MAX_BETA);
            }
            assert!(s.alpha_bar(steps) > 0.0 && s.alpha_bar(steps) < 0.01);
        }
        assert!(DiffusionSchedule::cosine(0).is_err());
    }

    #[test]
    fn alpha_bar_matches_closed_form() {
        let s = DiffusionSchedule::cosine(1000).unwrap();
        let f = |t: f64| (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        let want = f(500.0) / f(0.0);
        assert!((s.alpha_bar(500) - want).abs() < 1e-15);
        assert!((want - 0.4936).abs() < 1e-3);
    }

    #[test]
    fn add_noise_at_zero_is_identity() {
        let s = DiffusionSchedule::cosine(10).unwrap();
        let x = Tensor::new(vec![4], vec![0.1f32, -0.7, 0.3, 0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = s.add_noise(&x, 0, &mut rng).unwrap();
        assert_eq!(n.x_t, x);
        assert!(s.add_noise(&x, 11, &mut rng).is_err());
    }

    #[test]
    fn add_noise_reproduces_seeded_eps() {
        let s = DiffusionSchedule::cosine(100).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 8]);
        let n = s.add_noise(&x, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let eps: Tensor<f64> = standard_normal(&[2, 8], &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(n.eps, eps);
        let c = (1.0 - s.alpha_bar(50)).sqrt();
        for (a, e) in n.x_t.data().iter().zip(eps.data()) {
            assert!((a - c * e).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_step_rejects_t_zero_and_skips_noise_at_one() {
        let s = DiffusionSchedule::cosine(10).unwrap();
        let x = Tensor::new(vec![3], vec![0.5f64, -0.5, 0.25]).unwrap();
        let e = Tensor::new(vec![3], vec![0.1f64, 0.2, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(s.ddpm_step(&x, &e, 0, &mut rng).is_err());
        let step = s.ddpm_step(&x, &e, 1, &mut rng).unwrap();
        assert_eq!(step, s.ddpm_mean(&x, &e, 1).unwrap());
    }

    #[test]
    fn ddpm_step_is_deterministic_given_seed() {
        let s = DiffusionSchedule::cosine(50).unwrap();
        let x: Tensor<f32> = standard_normal(&[16], &mut ChaCha8Rng::seed_from_u64(4));
        let e: Tensor<f32> = standard_normal(&[16], &mut ChaCha8Rng::seed_from_u64(5));
        let a = s.ddpm_step(&x, &e, 30, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let b = s.ddpm_step(&x, &e, 30, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, s.ddpm_mean(&x, &e, 30).unwrap());
    }

    #[test]
    fn cfg_combine_examples() {
        let c = Tensor::new(vec![2], vec![1.0f32, 0.3]).unwrap();
        let u = Tensor::new(vec![2], vec![0.0f32, 1e8]).unwrap();
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let one = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let zero = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        assert_eq!(cfg_combine(&one, &zero, 1.55).unwrap().item(), 1.55);
        assert!(cfg_combine(&one, &c.cast(), 2.0).is_err());
    }
}
