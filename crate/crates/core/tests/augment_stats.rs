//! Distributional checks on the mixing coefficients: Kolmogorov–Smirnov test
//! of mixup lambda draws against Beta(alpha, alpha) at the 1% level, with the
//! reference CDF supplied by statrs (independent of the sampling path).

use ftvit_core::augment::{mixup_batch, smooth_targets};
use ftvit_core::rng::{rng_for, Stream};
use ftvit_core::tensor::Tensor;
use statrs::distribution::{Beta, ContinuousCDF};

#[test]
fn mixup_lambda_passes_ks_against_beta() {
    let alpha = 0.8;
    let n = 100_000;
    let mut rng = rng_for(Stream::BatchMix, &[0xBEEF]);
    let mut draws = Vec::with_capacity(n);
    let images = Tensor::new(&[2, 3, 1, 1], vec![0.0f32; 6]);
    let targets = smooth_targets(&[0, 1], 2, 0.0).unwrap();
    for _ in 0..n {
        let out = mixup_batch(images.clone(), targets.clone(), alpha, &mut rng);
        draws.push(out.lambda_used);
    }
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let reference = Beta::new(alpha, alpha).unwrap();
    let mut d = 0.0f64;
    for (i, &x) in draws.iter().enumerate() {
        let cdf = reference.cdf(x);
        let lo = i as f64 / n as f64;
        let hi = (i + 1) as f64 / n as f64;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    // asymptotic 1% critical value
    let critical = 1.628 / (n as f64).sqrt();
    println!("KS statistic {d:.5}, critical (1%) {critical:.5}");
    assert!(d < critical, "KS {d} >= {critical}");
}
