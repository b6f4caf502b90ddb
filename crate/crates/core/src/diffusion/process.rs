use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::NoiseSchedule;
use crate::error::{Error, Result};

/// A noised signal together with the step and the noise realization that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub noise: Vec<f64>,
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Closed-form marginal `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε` with `ε ~ N(0, I)` drawn from `seed`.
pub fn forward_diffuse(x0: &[f64], t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<DiffusionSample> {
    schedule.check_step(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal(&mut rng, x0.len());
    forward_diffuse_with_noise(x0, t, schedule, noise)
}

/// Closed-form marginal with a caller-supplied noise realization.
pub fn forward_diffuse_with_noise(
    x0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    noise: Vec<f64>,
) -> Result<DiffusionSample> {
    schedule.check_step(t)?;
    if noise.len() != x0.len() {
        return Err(Error::contract("noise and signal differ in length"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t = x0.iter().zip(&noise).map(|(x, e)| a * x + b * e).collect();
    Ok(DiffusionSample { x_t, t, noise })
}

/// Runs the Markov chain `x_s = √α_s·x_{s−1} + √β_s·ε_s` for `s = 1..=t`.
pub fn iterative_diffuse(x0: &[f64], t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.to_vec();
    for s in 1..=t {
        let (a, b) = (schedule.alpha(s).sqrt(), schedule.beta(s).sqrt());
        for v in x.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v = a * *v + b * e;
        }
    }
    Ok(x)
}

/// Mean squared error between the injected and the predicted noise.
pub fn diffusion_loss(noise: &[f64], predicted: &[f64]) -> Result<f64> {
    if noise.len() != predicted.len() {
        return Err(Error::contract(format!(
            "noise has {} elements, prediction {}",
            noise.len(),
            predicted.len()
        )));
    }
    if noise.is_empty() {
        return Err(Error::contract("diffusion loss over an empty array"));
    }
    let sum: f64 = noise.iter().zip(predicted).map(|(e, p)| (p - e).powi(2)).sum();
    Ok(sum / noise.len() as f64)
}

/// `∂L_D/∂ε̂_i = 2(ε̂_i − ε_i)/N`.
pub fn diffusion_loss_grad(noise: &[f64], predicted: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != predicted.len() || noise.is_empty() {
        return Err(Error::contract("noise and prediction differ in shape"));
    }
    let n = noise.len() as f64;
    Ok(noise.iter().zip(predicted).map(|(e, p)| 2.0 * (p - e) / n).collect())
}

pub fn diffusion_loss_tensor(noise: &Tensor, predicted: &Tensor) -> Result<Tensor> {
    if noise.dims() != predicted.dims() {
        return Err(Error::contract(format!(
            "noise {:?} and prediction {:?} differ in shape",
            noise.dims(),
            predicted.dims()
        )));
    }
    Ok((predicted - noise)?.sqr()?.mean_all()?)
}

/// Batched closed form for a `B×…` tensor with one step per batch element.
pub fn q_sample(x0: &Tensor, steps: &[usize], noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if steps.len() != b || noise.dims() != x0.dims() {
        return Err(Error::contract("steps, noise and batch disagree in shape"));
    }
    let mut coef_shape = vec![b];
    coef_shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
    let mut sa = Vec::with_capacity(b);
    let mut sb = Vec::with_capacity(b);
    for &t in steps {
        schedule.check_step(t)?;
        let ab = schedule.alpha_bar(t);
        sa.push(ab.sqrt() as f32);
        sb.push((1.0 - ab).sqrt() as f32);
    }
    let dev = x0.device();
    let sa = Tensor::from_vec(sa, coef_shape.clone(), dev)?.to_dtype(x0.dtype())?;
    let sb = Tensor::from_vec(sb, coef_shape, dev)?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&sa)? + noise.broadcast_mul(&sb)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_linear_schedule, ScheduleSpec};

    fn schedule() -> NoiseSchedule {
        ScheduleSpec::default().build().unwrap()
    }

    #[test]
    fn zero_noise_and_zero_signal() {
        let s = schedule();
        let x0 = vec![0.5, -0.25, 1.0];
        let z = forward_diffuse_with_noise(&x0, 50, &s, vec![0.0; 3]).unwrap();
        for (a, b) in z.x_t.iter().zip(&x0) {
            assert_eq!(*a, s.alpha_bar(50).sqrt() * b);
        }
        let d = forward_diffuse(&[0.0; 4], 80, &s, 3).unwrap();
        for (x, e) in d.x_t.iter().zip(&d.noise) {
            assert_eq!(*x, (1.0 - s.alpha_bar(80)).sqrt() * e);
        }
        assert!(matches!(forward_diffuse(&x0, 0, &s, 0), Err(Error::Param(_))));
        assert!(matches!(iterative_diffuse(&x0, 201, &s, 0), Err(Error::Param(_))));
    }

    #[test]
    fn closed_form_moments() {
        let s = schedule();
        let t = 100;
        let x0 = 0.7;
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|i| forward_diffuse(&[x0], t, &s, i).unwrap().x_t[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target_var = 1.0 - s.alpha_bar(t);
        let se_mean = (target_var / n as f64).sqrt();
        let se_var = target_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - s.alpha_bar(t).sqrt() * x0).abs() < 3.0 * se_mean);
        assert!((var - target_var).abs() < 3.0 * se_var);
    }

    #[test]
    fn constant_beta_variance_is_geometric() {
        let b = 0.02;
        let s = make_linear_schedule(30, b, b).unwrap();
        for t in [1, 7, 30] {
            assert!((1.0 - s.alpha_bar(t) - (1.0 - (1.0 - b).powi(t as i32))).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_cases() {
        let e = vec![0.1, -0.3, 2.0];
        assert_eq!(diffusion_loss(&e, &e).unwrap(), 0.0);
        let shifted: Vec<f64> = e.iter().map(|v| v + 1.0).collect();
        assert!((diffusion_loss(&e, &shifted).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(diffusion_loss(&e, &e[..2]), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_matches_naive_loop() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, c, h, w) = (2, 3, 4, 5);
        let e: Vec<f64> = (0..b * c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p: Vec<f64> = (0..b * c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut acc = 0.0;
        for i in 0..b {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let k = ((i * c + j) * h + y) * w + x;
                        acc += (e[k] - p[k]) * (e[k] - p[k]);
                    }
                }
            }
        }
        acc /= (b * c * h * w) as f64;
        assert!((diffusion_loss(&e, &p).unwrap() - acc).abs() < 1e-10);

        let dev = candle_core::Device::Cpu;
        let et = Tensor::from_vec(e.clone(), (b, c, h, w), &dev).unwrap();
        let pt = Tensor::from_vec(p.clone(), (b, c, h, w), &dev).unwrap();
        let lt = diffusion_loss_tensor(&et, &pt).unwrap().to_scalar::<f64>().unwrap();
        assert!((lt - acc).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let e = vec![0.3, -1.2, 0.8, 0.05];
        let p = vec![-0.4, 0.9, 0.8, 1.5];
        let g = diffusion_loss_grad(&e, &p).unwrap();
        let h = 1e-6;
        for i in 0..e.len() {
            let mut up = p.clone();
            let mut dn = p.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (diffusion_loss(&e, &up).unwrap() - diffusion_loss(&e, &dn).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-6), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn batched_matches_scalar() {
        let s = schedule();
        let dev = candle_core::Device::Cpu;
        let x0 = Tensor::new(&[[0.5f64, -0.5], [1.0, 0.0]], &dev).unwrap();
        let eps = Tensor::new(&[[0.1f64, 0.2], [-0.3, 0.4]], &dev).unwrap();
        let xt = q_sample(&x0, &[3, 150], &eps, &s).unwrap().to_vec2::<f64>().unwrap();
        let r0 = forward_diffuse_with_noise(&[0.5, -0.5], 3, &s, vec![0.1, 0.2]).unwrap();
        let r1 = forward_diffuse_with_noise(&[1.0, 0.0], 150, &s, vec![-0.3, 0.4]).unwrap();
        for (a, b) in xt[0].iter().zip(&r0.x_t).chain(xt[1].iter().zip(&r1.x_t)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn signal_decays(x in 0.01f64..5.0, t in 2usize..200) {
            let s = schedule();
            proptest::prop_assert!(s.alpha_bar(t).sqrt() * x < s.alpha_bar(t - 1).sqrt() * x);
        }
    }
}
