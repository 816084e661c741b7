//! Central finite differences, the independent oracle for `backward()`.
//!
//! Everything here evaluates functions only through their forward path, never
//! through the reverse-mode machinery it is used to check. Verification runs
//! in `f64`; differences are too noisy in `f32`.

use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function returned a non-finite value while probing coordinate {0}")]
    NonFinite(usize),
}

/// Step size per coordinate: either a fixed h or h = c * (1 + |x_i|).
#[derive(Debug, Clone, Copy)]
pub enum Step {
    Fixed(f64),
    Scaled(f64),
}

impl Step {
    fn at(self, x: f64) -> f64 {
        match self {
            Step::Fixed(h) => h,
            Step::Scaled(c) => c * (1.0 + x.abs()),
        }
    }
}

/// Central differences per coordinate: (f(x + h e_i) - f(x - h e_i)) / 2h.
///
/// `f` must be pure and deterministic; it is called twice per coordinate.
pub fn finite_diff_grad<F>(
    mut f: F,
    x: &Tensor<f64>,
    step: Step,
) -> Result<Tensor<f64>, GradCheckError>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = vec![0.0f64; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let h = step.at(orig);
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GradCheckError::NonFinite(i));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(Tensor::new(x.shape(), grad))
}

/// Finite-difference gradient of a recorded graph's scalar loss with respect
/// to one leaf, probing coordinates in place and replaying the forward pass.
/// Between calls the graph is restored exactly.
pub fn graph_fd_grad(
    graph: &mut Graph<f64>,
    leaf: NodeId,
    loss: NodeId,
    step: Step,
) -> Result<Vec<f64>, GradCheckError> {
    let n = graph.value(leaf).numel();
    let mut grad = vec![0.0f64; n];
    for i in 0..n {
        let orig = graph.leaf_value_at(leaf, i);
        let h = step.at(orig);
        graph.set_leaf_value(leaf, i, orig + h);
        graph.recompute();
        let up = graph.value(loss).item();
        graph.set_leaf_value(leaf, i, orig - h);
        graph.recompute();
        let down = graph.value(loss).item();
        graph.set_leaf_value(leaf, i, orig);
        if !up.is_finite() || !down.is_finite() {
            graph.recompute();
            return Err(GradCheckError::NonFinite(i));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    graph.recompute();
    Ok(grad)
}

/// Max absolute deviation normalized by the largest reference coordinate
/// (floored so an all-zero reference gradient compares absolutely).
pub fn relative_error(got: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(got.len(), reference.len());
    let scale = reference
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    got.iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// Backward gradient vs finite differences for one leaf of a built graph.
/// Returns the normalized error; callers assert against their tolerance.
pub fn check_leaf(
    graph: &mut Graph<f64>,
    leaf: NodeId,
    loss: NodeId,
    step: Step,
) -> Result<f64, GradCheckError> {
    graph.zero_grad();
    graph
        .backward(loss)
        .expect("loss must be scalar for gradient checking");
    let analytic = graph.grad(leaf).expect("leaf requires grad").to_vec();
    let numeric = graph_fd_grad(graph, leaf, loss, step)?;
    Ok(relative_error(&analytic, &numeric))
}

/// Result of checking one kernel across a batch of random seeds.
#[derive(Debug, Clone)]
pub struct KernelReport {
    pub kernel: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
}

/// Run every primitive kernel (plus the attention composition) against the
/// finite-difference oracle over `seeds` random shape/value draws each.
/// Tolerance is left to the caller; 1e-4 is the usual bar in f64.
pub fn kernel_checks(seeds: u64) -> Vec<KernelReport> {
    use crate::rng::{rng_for, Stream};
    use rand::Rng;

    let step = Step::Scaled(1e-4);

    // Scalarize an output tensor with a fixed random weighting so the check
    // exercises the full Jacobian, not just the sum of rows.
    fn to_scalar(g: &mut Graph<f64>, out: NodeId, rng: &mut impl rand::Rng) -> NodeId {
        let n = g.value(out).numel();
        let shape = g.value(out).shape().to_vec();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wl = g.leaf(Tensor::new(&shape, w));
        let prod = g.mul(out, wl);
        g.sum(prod)
    }

    fn randn(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    let mut reports = Vec::new();
    let mut run = |kernel: &'static str,
                   build: &mut dyn FnMut(&mut Graph<f64>, &mut rand_chacha::ChaCha8Rng) -> (Vec<NodeId>, NodeId)| {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = rng_for(Stream::Init, &[0xC0FFEE, seed]);
            let mut g = Graph::new();
            let (leaves, loss) = build(&mut g, &mut rng);
            for leaf in leaves {
                let err = check_leaf(&mut g, leaf, loss, step).expect("finite forward");
                worst = worst.max(err);
            }
        }
        reports.push(KernelReport {
            kernel,
            seeds,
            max_rel_err: worst,
        });
    };

    run("matmul (shared weight)", &mut |g, rng| {
        let (l, m, k, n) = (
            rng.gen_range(1..4usize),
            rng.gen_range(1..6usize),
            rng.gen_range(1..6usize),
            rng.gen_range(1..6usize),
        );
        let a = g.leaf(Tensor::new(&[l, m, k], randn(rng, l * m * k)).with_grad());
        let b = g.leaf(Tensor::new(&[k, n], randn(rng, k * n)).with_grad());
        let out = g.matmul(a, b);
        let loss = to_scalar(g, out, rng);
        (vec![a, b], loss)
    });

    run("matmul (batched)", &mut |g, rng| {
        let (l, m, k, n) = (
            rng.gen_range(1..4usize),
            rng.gen_range(1..5usize),
            rng.gen_range(1..5usize),
            rng.gen_range(1..5usize),
        );
        let a = g.leaf(Tensor::new(&[l, m, k], randn(rng, l * m * k)).with_grad());
        let b = g.leaf(Tensor::new(&[l, k, n], randn(rng, l * k * n)).with_grad());
        let out = g.matmul(a, b);
        let loss = to_scalar(g, out, rng);
        (vec![a, b], loss)
    });

    run("add", &mut |g, rng| {
        let n = rng.gen_range(1..20usize);
        let a = g.leaf(Tensor::new(&[n], randn(rng, n)).with_grad());
        let b = g.leaf(Tensor::new(&[n], randn(rng, n)).with_grad());
        let out = g.add(a, b);
        let loss = to_scalar(g, out, rng);
        (vec![a, b], loss)
    });

    run("add (broadcast suffix)", &mut |g, rng| {
        let (b_, n, d) = (
            rng.gen_range(1..4usize),
            rng.gen_range(1..5usize),
            rng.gen_range(1..6usize),
        );
        let a = g.leaf(Tensor::new(&[b_, n, d], randn(rng, b_ * n * d)).with_grad());
        let bias = g.leaf(Tensor::new(&[n, d], randn(rng, n * d)).with_grad());
        let out = g.add_bcast(a, bias);
        let loss = to_scalar(g, out, rng);
        (vec![a, bias], loss)
    });

    run("mul", &mut |g, rng| {
        let n = rng.gen_range(1..20usize);
        let a = g.leaf(Tensor::new(&[n], randn(rng, n)).with_grad());
        let b = g.leaf(Tensor::new(&[n], randn(rng, n)).with_grad());
        let out = g.mul(a, b);
        let loss = to_scalar(g, out, rng);
        (vec![a, b], loss)
    });

    run("mul (channel broadcast)", &mut |g, rng| {
        let (m, d) = (rng.gen_range(1..6usize), rng.gen_range(1..6usize));
        let a = g.leaf(Tensor::new(&[m, d], randn(rng, m * d)).with_grad());
        let s = g.leaf(Tensor::new(&[d], randn(rng, d)).with_grad());
        let out = g.mul_bcast_last(a, s);
        let loss = to_scalar(g, out, rng);
        (vec![a, s], loss)
    });

    run("mul (sample broadcast)", &mut |g, rng| {
        let (b_, d) = (rng.gen_range(1..6usize), rng.gen_range(1..6usize));
        let a = g.leaf(Tensor::new(&[b_, d], randn(rng, b_ * d)).with_grad());
        let s = g.leaf(Tensor::new(&[b_], randn(rng, b_)).with_grad());
        let out = g.mul_bcast_sample(a, s);
        let loss = to_scalar(g, out, rng);
        (vec![a, s], loss)
    });

    run("scale", &mut |g, rng| {
        let n = rng.gen_range(1..20usize);
        let a = g.leaf(Tensor::new(&[n], randn(rng, n)).with_grad());
        let out = g.scale(a, rng.gen_range(-2.0..2.0));
        let loss = to_scalar(g, out, rng);
        (vec![a], loss)
    });

    run("gelu", &mut |g, rng| {
        let n = rng.gen_range(1..20usize);
        let a = g.leaf(Tensor::new(&[n], randn(rng, n)).with_grad());
        let out = g.gelu(a);
        let loss = to_scalar(g, out, rng);
        (vec![a], loss)
    });

    run("layernorm", &mut |g, rng| {
        let (m, d) = (rng.gen_range(1..5usize), rng.gen_range(2..8usize));
        let a = g.leaf(Tensor::new(&[m, d], randn(rng, m * d)).with_grad());
        let out = g.layer_norm(a);
        let loss = to_scalar(g, out, rng);
        (vec![a], loss)
    });

    run("softmax", &mut |g, rng| {
        let (m, d) = (rng.gen_range(1..5usize), rng.gen_range(2..8usize));
        let a = g.leaf(Tensor::new(&[m, d], randn(rng, m * d)).with_grad());
        let out = g.softmax(a);
        let loss = to_scalar(g, out, rng);
        (vec![a], loss)
    });

    run("attention (sdpa composition)", &mut |g, rng| {
        let (b_, h, n, dh) = (
            rng.gen_range(1..3usize),
            rng.gen_range(1..3usize),
            rng.gen_range(2..5usize),
            rng.gen_range(2..5usize),
        );
        let q = g.leaf(Tensor::new(&[b_, h, n, dh], randn(rng, b_ * h * n * dh)).with_grad());
        let k = g.leaf(Tensor::new(&[b_, h, n, dh], randn(rng, b_ * h * n * dh)).with_grad());
        let v = g.leaf(Tensor::new(&[b_, h, n, dh], randn(rng, b_ * h * n * dh)).with_grad());
        let kt = g.permute(k, &[0, 1, 3, 2]);
        let scores = g.matmul(q, kt);
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scaled);
        let out = g.matmul(attn, v);
        let loss = to_scalar(g, out, rng);
        (vec![q, k, v], loss)
    });

    run("mean-pool over tokens", &mut |g, rng| {
        let (b_, n, d) = (
            rng.gen_range(1..4usize),
            rng.gen_range(1..6usize),
            rng.gen_range(1..6usize),
        );
        let a = g.leaf(Tensor::new(&[b_, n, d], randn(rng, b_ * n * d)).with_grad());
        let out = g.mean_tokens(a);
        let loss = to_scalar(g, out, rng);
        (vec![a], loss)
    });

    run("dropout (eval mode = identity)", &mut |g, rng| {
        let n = rng.gen_range(1..20usize);
        let a = g.leaf(Tensor::new(&[n], randn(rng, n)).with_grad());
        let mut drop_rng = crate::rng::rng_for(Stream::DropPath, &[7]);
        let out = g.dropout(a, 0.5, false, &mut drop_rng);
        assert_eq!(out, a, "eval-mode dropout must be the identity");
        let loss = to_scalar(g, out, rng);
        (vec![a], loss)
    });

    run("permute", &mut |g, rng| {
        let (x, y, z) = (
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
        );
        let a = g.leaf(Tensor::new(&[x, y, z], randn(rng, x * y * z)).with_grad());
        let out = g.permute(a, &[2, 0, 1]);
        let loss = to_scalar(g, out, rng);
        (vec![a], loss)
    });

    run("reshape", &mut |g, rng| {
        let (x, y) = (rng.gen_range(1..5usize), rng.gen_range(1..5usize));
        let a = g.leaf(Tensor::new(&[x, y], randn(rng, x * y)).with_grad());
        let out = g.reshape(a, &[x * y]);
        let loss = to_scalar(g, out, rng);
        (vec![a], loss)
    });

    run("gather rows", &mut |g, rng| {
        let (r, c, picks) = (
            rng.gen_range(2..6usize),
            rng.gen_range(1..5usize),
            rng.gen_range(1..8usize),
        );
        let a = g.leaf(Tensor::new(&[r, c], randn(rng, r * c)).with_grad());
        let indices: Vec<usize> = (0..picks).map(|_| rng.gen_range(0..r)).collect();
        let out = g.gather_rows(a, &indices);
        let loss = to_scalar(g, out, rng);
        (vec![a], loss)
    });

    run("soft cross-entropy", &mut |g, rng| {
        let (b_, k) = (rng.gen_range(1..5usize), rng.gen_range(2..8usize));
        let z = g.leaf(Tensor::new(&[b_, k], randn(rng, b_ * k)).with_grad());
        // random probability rows
        let mut t = vec![0.0f64; b_ * k];
        for row in t.chunks_mut(k) {
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(0.01..1.0);
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let tl = g.leaf(Tensor::new(&[b_, k], t));
        let loss = g.soft_cross_entropy(z, tl);
        (vec![z], loss)
    });

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_is_all_ones() {
        let x = Tensor::new(&[4], vec![0.3, -2.0, 5.0, 0.0]);
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, Step::Fixed(1e-5)).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_of_square_at_three() {
        let x = Tensor::new(&[1], vec![3.0]);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, Step::Fixed(1e-5)).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_reports_non_finite() {
        let x = Tensor::new(&[1], vec![0.0]);
        let r = finite_diff_grad(|t| 1.0 / t.data()[0], &x, Step::Fixed(0.0_f64.max(0.0)));
        // h = 0 probe divides by zero -> inf
        assert!(matches!(r, Err(GradCheckError::NonFinite(_))));
    }
}
