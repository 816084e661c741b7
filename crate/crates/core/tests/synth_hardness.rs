//! Hardness floor of the synthetic dataset: brute-force 1-NN in raw pixel
//! space, and a pixel-space linear softmax classifier, must both stay under
//! 60% on 10 classes while the texture classes remain learnable by the ViT
//! (covered by the end-to-end suite).

use ftvit_core::data::{synth_dataset, Split};
use ftvit_core::graph::Graph;
use ftvit_core::tensor::Tensor;

#[test]
fn one_nn_pixel_space_stays_below_60_percent() {
    let train = synth_dataset(10, 500, 32, 0, Split::Train);
    let val = synth_dataset(10, 10, 32, 0, Split::Val);
    use rayon::prelude::*;
    let hits: usize = val
        .images
        .par_iter()
        .zip(val.labels.par_iter())
        .map(|(vimg, &vlabel)| {
            let mut best = u64::MAX;
            let mut best_label = usize::MAX;
            for (ti, timg) in train.images.iter().enumerate() {
                let dist: u64 = vimg
                    .data
                    .iter()
                    .zip(&timg.data)
                    .map(|(&a, &b)| {
                        let d = a as i64 - b as i64;
                        (d * d) as u64
                    })
                    .sum();
                if dist < best {
                    best = dist;
                    best_label = train.labels[ti];
                }
            }
            usize::from(best_label == vlabel)
        })
        .sum();
    let acc = hits as f64 / val.len() as f64;
    println!("1-NN pixel accuracy: {acc:.3}");
    assert!(acc < 0.60, "1-NN too easy: {acc}");
}

#[test]
fn linear_softmax_on_pixels_stays_below_60_percent() {
    let train = synth_dataset(10, 500, 32, 0, Split::Train);
    let val = synth_dataset(10, 10, 32, 0, Split::Val);
    let dim = 3 * 32 * 32;
    let k = 10;

    let flatten = |ds: &ftvit_core::data::Dataset| -> (Tensor<f64>, Vec<usize>) {
        let mut data = Vec::with_capacity(ds.len() * dim);
        for img in &ds.images {
            data.extend(img.data.iter().map(|&v| v as f64 / 255.0 - 0.5));
        }
        (Tensor::new(&[ds.len(), dim], data), ds.labels.clone())
    };
    let (x_train, y_train) = flatten(&train);
    let (x_val, y_val) = flatten(&val);
    let mut onehot = vec![0.0f64; train.len() * k];
    for (i, &l) in y_train.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }

    // full-batch gradient descent on softmax regression, one replayed graph
    let mut w = Tensor::<f64>::zeros(&[dim, k]).with_grad();
    let mut g = Graph::<f64>::new();
    let x = g.leaf(x_train);
    let wl = g.input("w", w.clone());
    let logits = g.matmul(x, wl);
    let t = g.leaf(Tensor::new(&[train.len(), k], onehot));
    let loss = g.soft_cross_entropy(logits, t);
    for _ in 0..300 {
        g.zero_grad();
        g.backward(loss).unwrap();
        let grad = g.grad(wl).unwrap().to_vec();
        for (wi, gi) in w.data_mut().iter_mut().zip(&grad) {
            *wi -= 1.0 * gi;
        }
        g.forward(&[("w", &w)]).unwrap();
    }

    let mut g = Graph::<f64>::new();
    let x = g.leaf(x_val.clone());
    let wl = g.leaf(w);
    let logits = g.matmul(x, wl);
    let out = g.value(logits).data();
    let mut hits = 0;
    for (i, &l) in y_val.iter().enumerate() {
        let row = &out[i * k..(i + 1) * k];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == l {
            hits += 1;
        }
    }
    let acc = hits as f64 / y_val.len() as f64;
    println!("linear softmax pixel accuracy: {acc:.3}");
    assert!(acc < 0.60, "linear model too easy: {acc}");
}
