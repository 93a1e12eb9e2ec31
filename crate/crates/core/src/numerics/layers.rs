use super::{LayerGrads, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.expect_shape("relu_backward", "upstream gradient", input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

fn pool_dims(op: &'static str, input: &Tensor) -> Result<(usize, usize, usize)> {
    input.expect_ndim(op, "input", 3)?;
    let &[c, h, w] = input.shape() else { unreachable!() };
    if h % 2 != 0 {
        return Err(Error::shape(op, "input height (must be even)", h + 1, h));
    }
    if w % 2 != 0 {
        return Err(Error::shape(op, "input width (must be even)", w + 1, w));
    }
    Ok((c, h, w))
}

/// Flat index of the maximum in the 2×2 window at output `(c, oy, ox)`;
/// ties go to the first position in raster order.
#[inline]
fn window_argmax(data: &[f64], h: usize, w: usize, c: usize, oy: usize, ox: usize) -> usize {
    let base = (c * h + 2 * oy) * w + 2 * ox;
    let mut best = base;
    for idx in [base + 1, base + w, base + w + 1] {
        if data[idx] > data[best] {
            best = idx;
        }
    }
    best
}

/// 2×2 max pooling with stride 2.
pub fn maxpool2_forward(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = pool_dims("maxpool2_forward", input)?;
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(src[window_argmax(src, h, w, ch, oy, ox)]);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Routes each upstream value to the argmax position of its window.
pub fn maxpool2_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    const OP: &str = "maxpool2_backward";
    let (c, h, w) = pool_dims(OP, input)?;
    let (oh, ow) = (h / 2, w / 2);
    upstream.expect_shape(OP, "upstream gradient", &[c, oh, ow])?;
    let src = input.data();
    let up = upstream.data();
    let mut dx = vec![0.0; src.len()];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[window_argmax(src, h, w, ch, oy, ox)] += up[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::from_vec(input.shape(), dx)
}

/// Global average pooling: spatial mean per channel.
pub fn gap_forward(input: &Tensor) -> Result<Tensor> {
    input.expect_ndim("gap_forward", "input", 3)?;
    let &[c, h, w] = input.shape() else { unreachable!() };
    let area = (h * w) as f64;
    let out = input
        .data()
        .chunks(h * w)
        .map(|ch| ch.iter().sum::<f64>() / area)
        .collect();
    Tensor::from_vec(&[c], out)
}

pub fn gap_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    const OP: &str = "gap_backward";
    let &[c, h, w] = input_shape else {
        return Err(Error::shape(OP, "input shape", "3-d", input_shape));
    };
    upstream.expect_shape(OP, "upstream gradient", &[c])?;
    let area = (h * w) as f64;
    let mut dx = Vec::with_capacity(c * h * w);
    for &g in upstream.data() {
        dx.extend(std::iter::repeat_n(g / area, h * w));
    }
    Tensor::from_vec(input_shape, dx)
}

fn linear_dims(op: &'static str, x: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    x.expect_ndim(op, "input", 1)?;
    weights.expect_ndim(op, "weights", 2)?;
    let (k, d) = (weights.shape()[0], weights.shape()[1]);
    if x.len() != d {
        return Err(Error::shape(op, "input length", d, x.len()));
    }
    Ok((k, d))
}

/// `W·x + b` for `x: [D]`, `W: [K×D]`, `b: [K]`.
pub fn linear_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "linear_forward";
    let (k, _) = linear_dims(OP, x, weights)?;
    bias.expect_shape(OP, "bias", &[k])?;
    let out = weights
        .data()
        .chunks(x.len())
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(x.data()).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    Tensor::from_vec(&[k], out)
}

/// Gradients of [`linear_forward`]: `params = [d_weights, d_bias]`.
pub fn linear_backward(x: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<LayerGrads> {
    const OP: &str = "linear_backward";
    let (k, d) = linear_dims(OP, x, weights)?;
    upstream.expect_shape(OP, "upstream gradient", &[k])?;
    let up = upstream.data();
    let mut dw = Vec::with_capacity(k * d);
    for &g in up {
        dw.extend(x.data().iter().map(|v| g * v));
    }
    let mut dx = vec![0.0; d];
    for (row, &g) in weights.data().chunks(d).zip(up) {
        for (acc, w) in dx.iter_mut().zip(row) {
            *acc += g * w;
        }
    }
    Ok(LayerGrads {
        params: vec![Tensor::from_vec(&[k, d], dw)?, upstream.clone()],
        input: Tensor::from_vec(&[d], dx)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_of_constant_channel() {
        let mut x = Tensor::full(&[2, 3, 3], 4.0);
        x.data_mut()[9..].fill(-1.5);
        let y = gap_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0, -1.5]);
    }

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2_forward(&x).unwrap().data(), &[4.0]);
        let up = Tensor::from_vec(&[1, 1, 1], vec![2.5]).unwrap();
        let dx = maxpool2_backward(&x, &up).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let up = Tensor::full(&[1, 1, 1], 1.0);
        let dx = maxpool2_backward(&x, &up).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_side() {
        assert!(maxpool2_forward(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn linear_shape_errors() {
        let x = Tensor::zeros(&[3]);
        let w = Tensor::zeros(&[2, 4]);
        let err = linear_forward(&x, &w, &Tensor::zeros(&[2])).unwrap_err();
        assert!(err.to_string().contains("input length"));
    }
}
