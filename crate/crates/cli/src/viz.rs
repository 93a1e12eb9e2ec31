//! Overlay drawing for the `viz` command.

use ccr_core::numerics::Tensor;
use ccr_core::proposal::BBox;
use ccr_core::Result;

pub type Rgb = [f64; 3];

pub const PROPOSAL_COLOR: Rgb = [1.0, 0.9, 0.0];

/// Distinct box colours, cycled by identity.
pub const IDENTITY_COLORS: [Rgb; 6] = [
    [1.0, 0.2, 0.2],
    [0.2, 0.6, 1.0],
    [1.0, 0.9, 0.0],
    [0.9, 0.3, 1.0],
    [0.2, 1.0, 0.9],
    [1.0, 0.6, 0.1],
];

fn set(image: &mut Tensor, x: usize, y: usize, color: Rgb) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if x < w && y < h {
        for (c, v) in color.iter().enumerate() {
            image.data_mut()[(c * h + y) * w + x] = *v;
        }
    }
}

/// Two-pixel outline just inside `bbox`.
pub fn draw_box(image: &mut Tensor, bbox: &BBox, color: Rgb) {
    for t in 0..2usize {
        let (x0, y0) = (bbox.x0 + t, bbox.y0 + t);
        let (Some(x1), Some(y1)) = ((bbox.x1).checked_sub(1 + t), (bbox.y1).checked_sub(1 + t)) else {
            return;
        };
        if x0 > x1 || y0 > y1 {
            return;
        }
        for x in x0..=x1 {
            set(image, x, y0, color);
            set(image, x, y1, color);
        }
        for y in y0..=y1 {
            set(image, x0, y, color);
            set(image, x1, y, color);
        }
    }
}

/// Small cross at a (possibly fractional) point.
pub fn draw_cross(image: &mut Tensor, (cx, cy): (f64, f64), color: Rgb) {
    let (x, y) = (cx as isize, cy as isize);
    for d in -3isize..=3 {
        for (px, py) in [(x + d, y), (x, y + d)] {
            if px >= 0 && py >= 0 {
                set(image, px as usize, py as usize, color);
            }
        }
    }
}

/// Blend a `[0,1]` heat map (same `H×W` as the image) as a red-yellow ramp.
pub fn heat_overlay(image: &Tensor, heat: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    let plane = h * w;
    for i in 0..plane {
        let v = heat.data()[i];
        let ramp = [1.0, v, 0.0];
        for (c, r) in ramp.iter().enumerate() {
            let p = &mut out.data_mut()[c * plane + i];
            *p = 0.4 * *p + 0.6 * v * r;
        }
    }
    out
}

/// Place same-height images side by side.
pub fn hconcat(images: &[Tensor]) -> Result<Tensor> {
    let h = images[0].shape()[1];
    let total_w: usize = images.iter().map(|im| im.shape()[2]).sum();
    let mut out = Tensor::zeros(&[3, h, total_w]);
    let mut x0 = 0;
    for im in images {
        let w = im.shape()[2];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(c * h + y) * total_w + x0 + x] = im.at3(c, y, x);
                }
            }
        }
        x0 += w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_outline_stays_inside() {
        let mut im = Tensor::zeros(&[3, 10, 10]);
        draw_box(&mut im, &BBox::new(2, 3, 8, 9).unwrap(), [1.0, 1.0, 1.0]);
        assert_eq!(im.at3(0, 3, 2), 1.0);
        assert_eq!(im.at3(0, 8, 7), 1.0);
        assert_eq!(im.at3(0, 6, 5), 0.0);
        assert_eq!(im.at3(0, 9, 8), 0.0);
    }

    #[test]
    fn panels_concatenate() {
        let a = Tensor::full(&[3, 4, 2], 0.25);
        let b = Tensor::full(&[3, 4, 3], 0.75);
        let c = hconcat(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[3, 4, 5]);
        assert_eq!(c.at3(1, 2, 1), 0.25);
        assert_eq!(c.at3(1, 2, 2), 0.75);
    }
}
