use promptpaint::schedule::{add_noise, add_noise_at, build_schedule, ScheduleConfig, ScheduleKind};
use promptpaint::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Double-double running product: (hi, lo) with the rounding error of every
/// multiplication carried in `lo` via fused multiply-add.
fn dd_products(factors: impl Iterator<Item = f64>) -> Vec<f64> {
    let (mut hi, mut lo) = (1.0f64, 0.0f64);
    let mut out = Vec::new();
    for f in factors {
        let p = hi * f;
        let err = hi.mul_add(f, -p);
        let l = lo * f + err;
        hi = p + l;
        lo = l - (hi - p);
        out.push(hi + lo);
    }
    out
}

#[test]
fn default_alpha_bars_match_an_extended_precision_product() {
    let s = ScheduleConfig::default().build().unwrap();
    let t = 1000;
    let oracle = dd_products((0..t).map(|i| {
        let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / ((t - 1) as f64);
        1.0 - beta
    }));
    for (i, (a, b)) in s.alpha_bars().iter().zip(&oracle).enumerate() {
        assert!(((a - b) / b).abs() < 1e-6, "t={i}: {a} vs {b}");
    }
    assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    assert!(s.alpha_bar(0) > 0.9);
    assert!(s.alpha_bar(999) < 0.01);
}

#[test]
fn tiny_and_invalid_schedules() {
    let s = build_schedule(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
    assert_eq!(s.alpha_bars(), [0.5, 0.25]);
    assert!(build_schedule(1, 1e-4, 0.02, ScheduleKind::Linear).is_err());
    assert!(build_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
    assert!(build_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
    assert!(build_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
}

#[test]
fn forward_process_closed_form_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = randn(&[4, 4, 3], &mut rng);
    let eps = randn(&[4, 4, 3], &mut rng);
    assert_eq!(add_noise_at(&x0, &eps, 1.0).unwrap(), x0);
    let zero = Tensor::zeros(&[4, 4, 3]);
    let out = add_noise_at(&zero, &eps, 0.25).unwrap();
    for (o, e) in out.data().iter().zip(eps.data()) {
        assert!((o - 0.75f32.sqrt() * e).abs() < 1e-7);
    }
    let s = ScheduleConfig::default().build().unwrap();
    assert!(add_noise(&x0, 1000, &eps, &s).is_err());
    assert!(add_noise(&x0, 3, &randn(&[4, 4, 2], &mut rng), &s).is_err());
}

#[test]
fn forward_process_is_linear() {
    let s = ScheduleConfig::default().build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let t = rng.random_range(0..1000);
        let (a, b) = (rng.random_range(-2.0..2.0f32), rng.random_range(-2.0..2.0f32));
        let (x, y) = (randn(&[8, 8, 3], &mut rng), randn(&[8, 8, 3], &mut rng));
        let (e, f) = (randn(&[8, 8, 3], &mut rng), randn(&[8, 8, 3], &mut rng));
        let comb = |p: &Tensor<f32>, q: &Tensor<f32>| p.zip_map(q, |u, v| a * u + b * v).unwrap();
        let lhs = add_noise(&comb(&x, &y), t, &comb(&e, &f), &s).unwrap();
        let rhs = comb(&add_noise(&x, t, &e, &s).unwrap(), &add_noise(&y, t, &f, &s).unwrap());
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() <= 1e-6 * (1.0 + r.abs()) * 4.0, "{l} vs {r}");
        }
    }
}

#[test]
fn noised_variance_matches_the_closed_form() {
    let s = ScheduleConfig::default().build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let bound = 3f32.sqrt();
    for t in [0usize, 250, 500, 999] {
        let x0 = Tensor::new(&[n], (0..n).map(|_| rng.random_range(-bound..bound)).collect()).unwrap();
        let eps = randn(&[n], &mut rng);
        let out = add_noise(&x0, t, &eps, &s).unwrap();
        let v: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let ab = s.alpha_bar(t);
        let want = ab * 1.0 + (1.0 - ab);
        assert!((var - want).abs() / want < 0.02, "t={t}: {var} vs {want}");
    }
}

#[test]
fn noised_mean_converges_to_scaled_signal() {
    let s = ScheduleConfig::default().build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = Tensor::new(&[6], vec![-1.0, -0.5, 0.0, 0.25, 0.6, 1.0]).unwrap();
    let t = 400;
    let draws = 20_000;
    let mut sums = [0.0f64; 6];
    for _ in 0..draws {
        let out = add_noise(&x0, t, &randn(&[6], &mut rng), &s).unwrap();
        for (acc, v) in sums.iter_mut().zip(out.data()) {
            *acc += *v as f64;
        }
    }
    let ab = s.alpha_bar(t);
    let sigma = ((1.0 - ab) / draws as f64).sqrt();
    for (sum, x) in sums.iter().zip(x0.data()) {
        let mean = sum / draws as f64;
        assert!((mean - ab.sqrt() * *x as f64).abs() < 3.0 * sigma, "{mean} vs {}", ab.sqrt() * *x as f64);
    }
}
