//! Noise schedule, forward noising and the deterministic (η = 0) DDIM
//! reverse pass used for ε-prediction denoisers.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{normal, rng_for};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=K`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// `K` betas evenly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(k: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("diffusion steps K must be ≥ 1"));
        }
        let betas = (0..k)
            .map(|i| {
                if k == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("diffusion schedule needs at least one beta"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("beta[{}] = {b} must lie in (0, 1)", i + 1)));
            }
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn k(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_t for `t ∈ 0..=K`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.k() {
            return Err(Error::config(format!("timestep {t} outside 1..={}", self.k())));
        }
        Ok(())
    }

    /// `√ᾱ_t · a + √(1 − ᾱ_t) · ε`
    pub fn noisy(&self, a: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if a.shape() != eps.shape() {
            return Err(Error::shape("noisy", a.shape(), eps.shape()));
        }
        let ab = self.alpha_bar(t);
        let (ca, ce) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        let data = a.data().iter().zip(eps.data()).map(|(x, e)| ca * x + ce * e).collect();
        Tensor::new(a.shape(), data)
    }

    /// One deterministic update from `t` to `t_prev < t`.
    pub fn ddim_step(&self, a_t: &Tensor, eps_hat: &Tensor, t: usize, t_prev: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(Error::config(format!("DDIM step must decrease t, got {t} → {t_prev}")));
        }
        if a_t.shape() != eps_hat.shape() {
            return Err(Error::shape("ddim_step", a_t.shape(), eps_hat.shape()));
        }
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        let (s, n) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
        let (s_prev, n_prev) = (libm::sqrt(ab_prev), libm::sqrt(1.0 - ab_prev));
        let data = a_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&x, &e)| {
                let x0 = (x - n * e) / s;
                s_prev * x0 + n_prev * e
            })
            .collect();
        Tensor::new(a_t.shape(), data)
    }
}

/// `n` descending timesteps spread over `1..=k`: `ceil(i·k/n)` for `i = n..1`.
pub fn strided_timesteps(k: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > k {
        return Err(Error::config(format!("step count {n} must lie in 1..={k}")));
    }
    Ok((1..=n).rev().map(|i| (i * k).div_ceil(n)).collect())
}

/// Initial `A_K ~ 𝒩(0, I)` drawn from `seed`.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, 0);
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(&mut rng)).collect();
    Tensor::new(shape, data).expect("shape and length agree")
}

/// Reverse pass from pure noise through `timesteps` (descending), ending
/// at `t = 0`. `denoise(a_t, t)` returns ε̂.
pub fn ddim_sample<F>(schedule: &Schedule, start: Tensor, timesteps: &[usize], mut denoise: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut a = start;
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let eps_hat = denoise(&a, t)?;
        a = schedule.ddim_step(&a, &eps_hat, t, t_prev)?;
    }
    Ok(a)
}
