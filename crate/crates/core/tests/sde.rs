use dsr_core::autograd::Mat;
use dsr_core::diffusion::{
    forward_marginal, reverse_sample, GaussianPosteriorMean, NoiseSchedule, SamplerConfig,
};
use dsr_core::nn::gaussian;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Euler-Maruyama paths of dz = -beta z / 2 dt + sqrt(beta) dW.
fn simulate(z0: &[f64], t_end: f64, steps: usize, sched: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dt = t_end / steps as f64;
    let mut z = z0.to_vec();
    for i in 0..steps {
        let b = sched.beta(i as f64 * dt);
        for v in z.iter_mut() {
            *v += -0.5 * b * *v * dt + (b * dt).sqrt() * gaussian(rng);
        }
    }
    z
}

#[test]
fn marginal_moments_match_simulation() {
    let sched = NoiseSchedule::default();
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0: Vec<f64> = (0..n).map(|_| 0.8 + 0.3 * gaussian(&mut rng)).collect();
    for t in [0.1, 0.5, 0.9] {
        let em = simulate(&z0, t, 400, &sched, &mut rng);
        let noise = Mat::from_shape_fn((n, 1), |_| gaussian(&mut rng));
        let z = Mat::from_shape_vec((n, 1), z0.clone()).unwrap();
        let fm = forward_marginal(&z, t, &noise, &sched).unwrap();
        let (m1, v1) = moments(&em);
        let (m2, v2) = moments(fm.as_slice().unwrap());
        let nf = n as f64;
        assert!((m1 - m2).abs() < 4.0 * ((v1 + v2) / nf).sqrt(), "t={t} mean {m1} vs {m2}");
        assert!(
            (v1 - v2).abs() < 4.0 * (2.0 * (v1 * v1 + v2 * v2) / nf).sqrt(),
            "t={t} var {v1} vs {v2}"
        );
    }
}

#[test]
fn unit_gaussian_stays_unit_variance() {
    let sched = NoiseSchedule::default();
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = Mat::from_shape_fn((n, 1), |_| gaussian(&mut rng));
    for t in [0.2, 0.7] {
        let noise = Mat::from_shape_fn((n, 1), |_| gaussian(&mut rng));
        let (_, v) = moments(forward_marginal(&z, t, &noise, &sched).unwrap().as_slice().unwrap());
        assert!((v - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt(), "t={t} var {v}");
    }
}

#[test]
fn sampler_recovers_gaussian_target() {
    let sched = NoiseSchedule::default();
    let oracle = GaussianPosteriorMean { mean: -0.5, std: 0.8, schedule: sched };
    let cfg = SamplerConfig { steps: 200, ..Default::default() };
    let n = 3000;
    let out = reverse_sample(&oracle, (n, 1), &sched, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let (m, v) = moments(out.as_slice().unwrap());
    let nf = n as f64;
    assert!((m + 0.5).abs() < 4.0 * 0.8 / nf.sqrt(), "mean {m}");
    assert!((v - 0.64).abs() < 4.0 * 0.64 * (2.0 / nf).sqrt(), "var {v}");
}
