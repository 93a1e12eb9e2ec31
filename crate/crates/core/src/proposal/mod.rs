//! Region proposals from class activation maps.
//!
//! A raw CAM is min-max normalised, upsampled to the full frame, thresholded,
//! and the bounding box of its largest 8-connected component becomes the crop.
//! The same chain applied to identity CAMs of the recognition network
//! localises individuals inside a crop.

mod components;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use components::{connected_components, Components};

use crate::error::{Error, Result};
use crate::imageops;
use crate::model::CamNet;
use crate::numerics::Tensor;

/// Which network a CAM was read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamSource {
    CountNet,
    RecogNet,
}

/// Raw (unnormalised) class activation map over the final feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub grid: Tensor,
    pub class_index: usize,
    pub source: CamSource,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn from_bools(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("BinaryMask", "data length", width * height, data.len()));
        }
        Ok(BinaryMask { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "empty bbox [{x0},{x1})x[{y0},{y1})"
            )));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn full(width: usize, height: usize) -> Self {
        BBox {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
        .ok()
    }

    /// Shift by `(dx, dy)`, e.g. from crop coordinates into frame coordinates.
    pub fn offset(&self, dx: usize, dy: usize) -> BBox {
        BBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

/// Box and centroid of one identity's CAM component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localisation {
    pub identity: usize,
    pub bbox: BBox,
    pub centroid: (f64, f64),
}

/// `(M - min M) / (max M - min M)`; a constant map normalises to all zeros.
pub fn normalize_cam(cam: &CamMap) -> Tensor {
    let (lo, hi) = (cam.grid.min(), cam.grid.max());
    let range = hi - lo;
    if !(range > 0.0) {
        return Tensor::zeros(cam.grid.shape());
    }
    cam.grid.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Corner-aligned bilinear upsampling of an `h×w` map to `height×width`.
pub fn upsample_cam(norm: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    norm.expect_ndim("upsample_cam", "map", 2)?;
    let &[h, w] = norm.shape() else { unreachable!() };
    if height < h || width < w || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "upsample_cam: cannot upsample {h}x{w} to {height}x{width}"
        )));
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| coord(x, width, w)).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, h);
        for &(x0, x1, fx) in &xs {
            let top = norm.at2(y0, x0) * (1.0 - fx) + norm.at2(y0, x1) * fx;
            let bottom = norm.at2(y1, x0) * (1.0 - fx) + norm.at2(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::from_vec(&[height, width], out)
}

/// `1` where the normalised map is strictly above `threshold`.
pub fn threshold_cam(norm: &Tensor, threshold: f64) -> Result<BinaryMask> {
    norm.expect_ndim("threshold_cam", "map", 2)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} not in [0, 1]")));
    }
    let &[h, w] = norm.shape() else { unreachable!() };
    BinaryMask::from_bools(w, h, norm.data().iter().map(|&v| v > threshold).collect())
}

/// Bounding box of the largest component (ties: lowest label), or the whole
/// frame when the mask is empty.
pub fn largest_component_bbox(mask: &BinaryMask) -> BBox {
    let comps = connected_components(mask);
    let mut best: Option<(usize, u32)> = None;
    for (i, &size) in comps.sizes.iter().enumerate() {
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, i as u32 + 1));
        }
    }
    best.and_then(|(_, label)| comps.bbox(label))
        .unwrap_or_else(|| BBox::full(mask.width, mask.height))
}

/// Crop `bbox` from the full-resolution image and resize it to `side × side`.
pub fn crop_resize(image: &Tensor, bbox: &BBox, side: usize) -> Result<Tensor> {
    let region = imageops::crop(image, bbox)?;
    imageops::resize_bilinear(&region, side, side)
}

/// normalise → upsample to `width×height` → threshold → largest component box.
pub fn region_from_cam(cam: &CamMap, width: usize, height: usize, threshold: f64) -> Result<BBox> {
    let norm = normalize_cam(cam);
    let up = upsample_cam(&norm, height, width)?;
    let mask = threshold_cam(&up, threshold)?;
    Ok(largest_component_bbox(&mask))
}

/// Output of the crop stage for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub cam: CamMap,
    pub n_hat: usize,
}

/// Crop stage: count on the resized frame, then box the count CAM's largest
/// supra-threshold component in full-resolution coordinates. A predicted count
/// of zero proposes the whole frame.
pub fn propose_region(count_net: &CamNet, full_image: &Tensor, threshold: f64) -> Result<Proposal> {
    full_image.expect_ndim("propose_region", "image", 3)?;
    let (h, w) = (full_image.shape()[1], full_image.shape()[2]);
    let side = count_net.config().input_side;
    let input = imageops::resize_bilinear(full_image, side, side)?;
    let (n_hat, cam) = count_net.predict_count(&input)?;
    let bbox = if n_hat == 0 {
        BBox::full(w, h)
    } else {
        region_from_cam(&cam, w, h, threshold)?
    };
    Ok(Proposal { bbox, cam, n_hat })
}

/// The same crop rule driven by any network: box the CAM of its top-scoring
/// class, with no count-based fallback.
pub fn propose_from_top_class(net: &CamNet, full_image: &Tensor, threshold: f64) -> Result<(BBox, CamMap)> {
    full_image.expect_ndim("propose_from_top_class", "image", 3)?;
    let (h, w) = (full_image.shape()[1], full_image.shape()[2]);
    let side = net.config().input_side;
    let input = imageops::resize_bilinear(full_image, side, side)?;
    let out = net.forward(&input)?;
    let cam = net.cam(&out.features, out.logits.argmax())?;
    Ok((region_from_cam(&cam, w, h, threshold)?, cam))
}

/// Box and centroid for each listed identity from the recognition network's
/// CAMs, in the coordinates of `cropped_image`.
pub fn localise_individuals(
    recog_net: &CamNet,
    cropped_image: &Tensor,
    present_identities: &[usize],
    threshold: f64,
) -> Result<Vec<Localisation>> {
    cropped_image.expect_ndim("localise_individuals", "image", 3)?;
    let (h, w) = (cropped_image.shape()[1], cropped_image.shape()[2]);
    let side = recog_net.config().input_side;
    let input = imageops::resize_bilinear(cropped_image, side, side)?;
    let out = recog_net.forward(&input)?;
    present_identities
        .iter()
        .map(|&identity| {
            let cam = recog_net.cam(&out.features, identity)?;
            let bbox = region_from_cam(&cam, w, h, threshold)?;
            Ok(Localisation {
                identity,
                bbox,
                centroid: bbox.center(),
            })
        })
        .collect()
}

/// File name of a persisted CAM: `<frame_id>_cam_n<class>.pgm`.
pub fn cam_file_name(frame_id: u64, class_index: usize) -> String {
    format!("{frame_id}_cam_n{class_index}.pgm")
}

/// Persist a CAM as an 8-bit grey-scale PGM of its normalised values.
pub fn save_cam(path: &Path, cam: &CamMap) -> Result<()> {
    imageops::write_pgm(path, &normalize_cam(cam))
}

/// One line of the proposals JSON-lines file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub frame_id: u64,
    pub n_hat: usize,
    pub bbox: [usize; 4],
    pub cam_path: String,
}

impl ProposalRecord {
    pub fn bbox(&self) -> Result<BBox> {
        let [x0, y0, x1, y1] = self.bbox;
        BBox::new(x0, y0, x1, y1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(rows: usize, cols: usize, data: Vec<f64>) -> CamMap {
        CamMap {
            grid: Tensor::from_vec(&[rows, cols], data).unwrap(),
            class_index: 0,
            source: CamSource::CountNet,
        }
    }

    #[test]
    fn normalize_affine() {
        let n = normalize_cam(&cam(2, 2, vec![0.0, 1.0, 2.0, 3.0]));
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in n.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_constant_is_zero() {
        let n = normalize_cam(&cam(2, 3, vec![-4.0; 6]));
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_hits_both_ends_for_negative_maps() {
        let n = normalize_cam(&cam(1, 3, vec![-5.0, -3.0, -1.0]));
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn upsample_identity_and_center() {
        let m = Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(upsample_cam(&m, 2, 3).unwrap(), m);
        let x = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = upsample_cam(&x, 3, 3).unwrap();
        assert_eq!(up.at2(1, 1), 0.5);
        assert_eq!(up.at2(0, 0), 0.0);
        assert_eq!(up.at2(0, 2), 1.0);
        assert!(upsample_cam(&x, 1, 3).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let m = Tensor::from_vec(&[2, 2], vec![0.4, 0.6, 0.5, 1.0]).unwrap();
        let mask = threshold_cam(&m, 0.5).unwrap();
        assert_eq!(mask.as_slice(), &[false, true, false, true]);
        assert!(threshold_cam(&m, 1.5).is_err());
        let zero = threshold_cam(&m, 0.0).unwrap();
        assert_eq!(zero.count_ones(), 4);
    }

    #[test]
    fn single_pixel_bbox() {
        let mut data = vec![false; 6 * 5];
        data[3 * 6 + 2] = true; // x = 2, y = 3
        let mask = BinaryMask::from_bools(6, 5, data).unwrap();
        let b = largest_component_bbox(&mask);
        assert_eq!(b, BBox::new(2, 3, 3, 4).unwrap());
        let empty = BinaryMask::from_bools(6, 5, vec![false; 30]).unwrap();
        assert_eq!(largest_component_bbox(&empty), BBox::full(6, 5));
    }

    #[test]
    fn largest_component_tie_takes_first() {
        let rows = ["##..##", "......"];
        let data = rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
        let mask = BinaryMask::from_bools(6, 2, data).unwrap();
        assert_eq!(largest_component_bbox(&mask), BBox::new(0, 0, 2, 1).unwrap());
    }

    #[test]
    fn crop_resize_identity_and_single_pixel() {
        let img = Tensor::from_vec(&[3, 4, 4], (0..48).map(|v| v as f64 / 47.0).collect()).unwrap();
        assert_eq!(crop_resize(&img, &BBox::full(4, 4), 4).unwrap(), img);
        let px = crop_resize(&img, &BBox::new(1, 2, 2, 3).unwrap(), 5).unwrap();
        for c in 0..3 {
            let v = img.at3(c, 2, 1);
            assert!(px.data()[c * 25..(c + 1) * 25].iter().all(|&p| (p - v).abs() < 1e-15));
        }
        assert!(crop_resize(&img, &BBox::new(0, 0, 5, 4).unwrap(), 4).is_err());
    }

    #[test]
    fn bbox_validation() {
        assert!(BBox::new(1, 1, 1, 2).is_err());
        let b = BBox::new(0, 0, 2, 2).unwrap();
        assert_eq!(b.center(), (1.0, 1.0));
        assert_eq!(b.intersection(&BBox::new(2, 0, 3, 2).unwrap()), None);
    }
}
