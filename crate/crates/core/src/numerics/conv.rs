use super::{LayerGrads, Tensor};
use crate::error::{Error, Result};

/// Output side length for a square-kernel convolution, if the geometry is integral.
pub fn conv_output_side(side: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (side + 2 * pad).checked_sub(k)?;
    if stride == 0 || span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry(
    op: &'static str,
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    input.expect_ndim(op, "input", 3)?;
    kernels.expect_ndim(op, "kernels", 4)?;
    let &[cin, h, w] = input.shape() else { unreachable!() };
    let &[cout, kcin, kh, kw] = kernels.shape() else { unreachable!() };
    if kcin != cin {
        return Err(Error::shape(op, "kernel input channels", cin, kcin));
    }
    if kh != kw {
        return Err(Error::shape(op, "kernel width", kh, kw));
    }
    if kh % 2 == 0 {
        return Err(Error::InvalidArgument(format!("{op}: kernel size {kh} must be odd")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
    }
    let oh = conv_output_side(h, kh, stride, pad)
        .ok_or_else(|| Error::shape(op, "input height (non-integral output)", "(H+2p-k) % s == 0", h))?;
    let ow = conv_output_side(w, kh, stride, pad)
        .ok_or_else(|| Error::shape(op, "input width (non-integral output)", "(W+2p-k) % s == 0", w))?;
    Ok(Geometry {
        cin,
        h,
        w,
        cout,
        k: kh,
        oh,
        ow,
        stride,
        pad,
    })
}

fn im2col(input: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.cols();
    let mut cols = vec![0.0; g.rows() * p];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &input[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.cols();
    let mut out = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut out[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c = a · b` for row-major/strided operands, overwriting `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe in-bounds views of `a` (m×k), `b` (k×n) and the
    // row-major `c` (m×n); all slices outlive the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of a `Cin×H×W` input with `Cout×Cin×k×k` kernels.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d_forward";
    let g = geometry(OP, input, kernels, stride, pad)?;
    bias.expect_shape(OP, "bias", &[g.cout])?;
    let cols = im2col(input.data(), &g);
    let (rows, p) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.cout * p];
    gemm(g.cout, rows, p, kernels.data(), (rows, 1), &cols, (p, 1), &mut out);
    for (co, chunk) in out.chunks_mut(p).enumerate() {
        let b = bias.data()[co];
        for v in chunk {
            *v += b;
        }
    }
    Tensor::from_vec(&[g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`]: `params = [d_kernels, d_bias]`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    upstream: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<LayerGrads> {
    const OP: &str = "conv2d_backward";
    let g = geometry(OP, input, kernels, stride, pad)?;
    upstream.expect_shape(OP, "upstream gradient", &[g.cout, g.oh, g.ow])?;
    let (rows, p) = (g.rows(), g.cols());
    let cols = im2col(input.data(), &g);
    let dy = upstream.data();

    let mut dk = vec![0.0; g.cout * rows];
    gemm(g.cout, p, rows, dy, (p, 1), &cols, (1, p), &mut dk);

    let db: Vec<f64> = dy.chunks(p).map(|row| row.iter().sum()).collect();

    let mut dcols = vec![0.0; rows * p];
    gemm(rows, g.cout, p, kernels.data(), (1, rows), dy, (p, 1), &mut dcols);
    let dx = col2im(&dcols, &g);

    Ok(LayerGrads {
        params: vec![
            Tensor::from_vec(kernels.shape(), dk)?,
            Tensor::from_vec(&[g.cout], db)?,
        ],
        input: Tensor::from_vec(input.shape(), dx)?,
    })
}
