#![allow(clippy::needless_range_loop)]

use forcegrasp::nn::{Adam, AdamConfig, Mlp, Tensor};
use forcegrasp::policy::NoiseSchedule;
use forcegrasp::rng::{gaussian, stream, Purpose};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, Purpose::Noise, &[rows as u64, cols as u64]);
    Tensor::from_vec(
        &[rows, cols],
        (0..rows * cols).map(|_| gaussian(&mut rng)).collect(),
    )
    .unwrap()
}

fn weighted_sum(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mlp_gradients_match_central_differences(
        widths in prop::collection::vec(1usize..9, 2..5),
        batch in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut net = Mlp::new(&widths, &mut stream(seed, Purpose::Init, &[]));
        let x = tensor(batch, widths[0], seed);
        let w = tensor(batch, *widths.last().unwrap(), seed ^ 1);
        let (_, cache) = net.forward_cached(&x).unwrap();
        let (grads, gx) = net.backward(&cache, &w).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, fd: f64, right: f64, left: f64| {
            // one-sided slopes disagree across a ReLU kink
            if (right - left).abs() > 1e-4 * right.abs().max(left.abs()).max(1e-3) {
                return Ok(());
            }
            let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            prop_assert!(err < 1e-4, "analytic {analytic} vs numeric {fd}");
            Ok(())
        };
        for pi in 0..grads.len() {
            for j in 0..grads[pi].len() {
                let orig = net.params()[pi].data()[j];
                let l0 = weighted_sum(&net.forward(&x).unwrap(), &w);
                net.params_mut()[pi].data_mut()[j] = orig + h;
                let lp = weighted_sum(&net.forward(&x).unwrap(), &w);
                net.params_mut()[pi].data_mut()[j] = orig - h;
                let lm = weighted_sum(&net.forward(&x).unwrap(), &w);
                net.params_mut()[pi].data_mut()[j] = orig;
                check(grads[pi].data()[j], (lp - lm) / (2.0 * h), (lp - l0) / h, (l0 - lm) / h)?;
            }
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[j] += h;
            xm.data_mut()[j] -= h;
            let l0 = weighted_sum(&net.forward(&x).unwrap(), &w);
            let lp = weighted_sum(&net.forward(&xp).unwrap(), &w);
            let lm = weighted_sum(&net.forward(&xm).unwrap(), &w);
            check(gx.data()[j], (lp - lm) / (2.0 * h), (lp - l0) / h, (l0 - lm) / h)?;
        }
    }

    #[test]
    fn adam_matches_a_scalar_reference(
        grads in prop::collection::vec(-10.0..10.0f64, 1..50),
        lr in 1e-4..1e-1f64,
        start in -5.0..5.0f64,
    ) {
        let config = AdamConfig { lr, ..AdamConfig::default() };
        let mut p = Tensor::from_vec(&[1], vec![start]).unwrap();
        let mut adam = Adam::new(&[&p], config);
        let (mut m, mut v, mut x) = (0.0, 0.0, start);
        for (t, &g) in grads.iter().enumerate() {
            adam.step(&mut [&mut p], &[Tensor::from_vec(&[1], vec![g]).unwrap()]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            let m_hat = m / (1.0 - 0.9f64.powi(k));
            let v_hat = v / (1.0 - 0.999f64.powi(k));
            x -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            prop_assert!((p.data()[0] - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
        prop_assert_eq!(adam.steps_taken(), grads.len() as u64);
    }

    #[test]
    fn true_noise_reverse_mean_is_the_posterior_mean(
        t in 1usize..=100,
        seed in any::<u64>(),
    ) {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = stream(seed, Purpose::Noise, &[]);
        let x0: Vec<f64> = (0..8).map(|_| gaussian(&mut rng)).collect();
        let eps: Vec<f64> = (0..8).map(|_| gaussian(&mut rng)).collect();
        let xt = s.corrupt(&x0, &eps, t);
        let a = s.reverse_mean(&xt, &eps, t);
        let b = s.posterior_mean(&x0, &xt, t);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-9 * u.abs().max(1.0));
        }
        let ab = s.alpha_bar(t);
        let ab_prev = s.alpha_bar(t - 1);
        let expected_var = s.beta(t) * (1.0 - ab_prev) / (1.0 - ab);
        prop_assert!((s.posterior_variance(t) - expected_var).abs() < 1e-15);
    }
}

#[test]
fn last_reverse_step_is_deterministic() {
    let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    assert_eq!(s.alpha_bar(0), 1.0);
    assert_eq!(s.posterior_variance(1), 0.0);
}

#[test]
fn mlp_memorizes_a_fixed_batch() {
    let mut net = Mlp::new(&[3, 64, 64, 2], &mut stream(5, Purpose::Init, &[]));
    let x = tensor(8, 3, 10);
    let y = tensor(8, 2, 11);
    let mut adam = Adam::new(&net.params(), AdamConfig::default());
    let mut loss = f64::INFINITY;
    for _ in 0..2000 {
        let (out, cache) = net.forward_cached(&x).unwrap();
        let n = out.len() as f64;
        let diff: Vec<f64> = out
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a - b)
            .collect();
        loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let g = Tensor::from_vec(&[8, 2], diff.iter().map(|d| 2.0 * d / n).collect()).unwrap();
        let (grads, _) = net.backward(&cache, &g).unwrap();
        adam.step(&mut net.params_mut(), &grads).unwrap();
    }
    assert!(loss < 1e-3, "final loss {loss}");
}
