//! Reference implementations written independently of the library code paths.

use ccr_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Six nested loops, zero padding, no kernel flip.
pub fn naive_conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, k) = (kernels.shape()[0], kernels.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.data()[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let kv = kernels.data()[((co * cin + ci) * k + ky) * k + kx];
                            acc += kv * input.at3(ci, iy as usize, ix as usize);
                        }
                    }
                }
                out.data_mut()[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn finite_difference(x: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// `Σ upstream ⊙ t`, the scalar whose gradient w.r.t. `t` is `upstream`.
pub fn dot(upstream: &Tensor, t: &Tensor) -> f64 {
    upstream.data().iter().zip(t.data()).map(|(a, b)| a * b).sum()
}

/// Recursive 8-connected flood fill; returns the partition as a label grid
/// (0 = background) with labels in raster order of first pixel.
pub fn flood_fill_labels(width: usize, height: usize, mask: &[bool]) -> Vec<u32> {
    fn fill(x: usize, y: usize, w: usize, h: usize, mask: &[bool], labels: &mut [u32], label: u32) {
        let i = y * w + x;
        if !mask[i] || labels[i] != 0 {
            return;
        }
        labels[i] = label;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if (dx, dy) != (0, 0) && nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    fill(nx as usize, ny as usize, w, h, mask, labels, label);
                }
            }
        }
    }
    let mut labels = vec![0u32; width * height];
    let mut next = 0;
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] && labels[y * width + x] == 0 {
                next += 1;
                fill(x, y, width, height, mask, &mut labels, next);
            }
        }
    }
    labels
}

/// Average precision by walking a ranking one unit at a time.
///
/// `units` are `(score, relevant, weight)`; ties keep input order.
pub fn walk_ap(units: &[(f64, bool, f64)], total_positive_weight: f64) -> f64 {
    let mut order: Vec<usize> = (0..units.len()).collect();
    // insertion sort: stable, descending score
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && units[order[j - 1]].0 < units[order[j]].0 {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let (mut seen, mut hits, mut ap) = (0.0, 0.0, 0.0);
    for &i in &order {
        let (_, rel, w) = units[i];
        seen += w;
        if rel {
            hits += w;
            ap += w * (hits / seen);
        }
    }
    ap / total_positive_weight
}
