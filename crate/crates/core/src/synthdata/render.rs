//! Painter's-algorithm rendering of one frame.
//!
//! A scene (identities, poses, clutter, occluders) is drawn from the scene
//! stream of its burst; each frame of the burst then only adds sensor noise
//! from its own stream.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    complement, BodyBox, FaceBox, FrameRecord, IndividualSpec, Rgb, SceneConfig, Split,
    FACE_COLOR, IMAGES_DIR,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seeds::{stream, stream_rng};

/// Identity-mask value for pixels showing no individual.
pub const NO_IDENTITY: u8 = u8::MAX;

const STRIPE_CONTRAST: f64 = 0.22;
const NOISE_SIGMA: f64 = 0.02;

pub struct RenderedFrame {
    /// `3×side×side`, values in `[0, 1]`.
    pub image: Tensor,
    pub record: FrameRecord,
    /// Per pixel, the identity whose body, head or face is visible there.
    pub identity_mask: Vec<u8>,
    /// Per pixel, whether a marking is visible there.
    pub marking_mask: Vec<bool>,
}

#[derive(Clone, Debug)]
struct Occluder {
    /// Offset from the body centre, in the body frame.
    u: f64,
    v: f64,
    rx: f64,
    ry: f64,
    color: Rgb,
}

#[derive(Clone, Debug)]
struct Individual {
    identity: usize,
    cx: f64,
    cy: f64,
    theta: f64,
    a: f64,
    b: f64,
    head_r: f64,
    face_visible: bool,
    occluder: Option<Occluder>,
}

impl Individual {
    /// Furthest reach of any part from the body centre.
    fn extent(&self) -> f64 {
        self.a + 2.0 * self.head_r
    }

    fn head_center(&self) -> (f64, f64) {
        let d = self.a + 0.5 * self.head_r;
        (self.cx + d * self.theta.cos(), self.cy + d * self.theta.sin())
    }

    fn face_center(&self) -> (f64, f64) {
        let (hx, hy) = self.head_center();
        let d = 0.25 * self.head_r;
        (hx + d * self.theta.cos(), hy + d * self.theta.sin())
    }

    fn face_r(&self) -> f64 {
        0.75 * self.head_r
    }

    /// Body-frame `(u, v)` to image coordinates.
    fn to_image(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }
}

#[derive(Clone, Debug)]
enum Clutter {
    Trunk { x0: f64, x1: f64, color: Rgb },
    Blob { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, color: Rgb },
}

#[derive(Clone, Debug)]
struct Scene {
    top: Rgb,
    bottom: Rgb,
    /// Low-frequency shading waves `(kx, ky, phase, amplitude)`.
    waves: Vec<(f64, f64, f64, f64)>,
    clutter: Vec<Clutter>,
    individuals: Vec<Individual>,
}

fn jittered(rng: &mut ChaCha8Rng, base: Rgb, amount: f64) -> Rgb {
    let shift = rng.random_range(-amount..amount);
    base.map(|c| c + shift + rng.random_range(-amount..amount) * 0.5)
}

fn sample_count(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (n, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return n;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Weighted draw of `n` distinct identities, `forced` (if any) always included.
fn sample_identities(
    rng: &mut ChaCha8Rng,
    weights: &[f64],
    n: usize,
    forced: Option<usize>,
) -> Vec<usize> {
    let mut chosen: Vec<usize> = forced.into_iter().collect();
    while chosen.len() < n {
        let total: f64 = (0..weights.len())
            .filter(|i| !chosen.contains(i))
            .map(|i| weights[i])
            .sum();
        let mut r = rng.random_range(0.0..total);
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            pick = Some(i);
            if r < w {
                break;
            }
            r -= w;
        }
        chosen.push(pick.expect("fewer identities than individuals"));
    }
    chosen.sort_unstable();
    chosen
}

fn sample_scene(specs: &[IndividualSpec], config: &SceneConfig, burst: u64) -> Scene {
    let mut rng = stream_rng(config.seed, stream::SCENE, burst);
    let side = config.image_side as f64;
    let k = specs.len();

    // The first K scenes of each split feature every identity once, so no
    // class is absent from either split.
    let train_bursts = (config.train_frames / config.burst_len) as u64;
    let burst_in_split = if burst < train_bursts { burst } else { burst - train_bursts };
    let forced = (burst_in_split < k as u64).then_some(burst_in_split as usize);

    let mut n = sample_count(&mut rng, &config.count_probs);
    if forced.is_some() {
        n = n.max(1);
    }
    let weights: Vec<f64> = (0..k)
        .map(|i| 1.0 / ((i + 1) as f64).powf(config.identity_skew))
        .collect();
    let identities = sample_identities(&mut rng, &weights, n, forced);

    let top = jittered(&mut rng, [0.46, 0.60, 0.40], 0.06);
    let bottom = jittered(&mut rng, [0.60, 0.58, 0.45], 0.06);
    let waves = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..2.0 * PI);
            let freq = rng.random_range(1.0..3.0) * 2.0 * PI / side;
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.01..0.04),
            )
        })
        .collect();

    let density = config.clutter_density;
    let mut clutter = Vec::new();
    let trunks = (density * rng.random_range(0.0..3.5)) as usize;
    for _ in 0..trunks {
        let x = rng.random_range(0.0..side);
        let w = rng.random_range(8.0..18.0);
        clutter.push(Clutter::Trunk {
            x0: x - w / 2.0,
            x1: x + w / 2.0,
            color: jittered(&mut rng, [0.42, 0.38, 0.33], 0.04),
        });
    }
    let rocks = (density * rng.random_range(1.0..4.0)) as usize;
    let leaves = (density * rng.random_range(4.0..11.0)) as usize;
    for (count, base, rmin, rmax) in [
        (rocks, [0.66, 0.66, 0.64], 10.0, 25.0),
        (leaves, [0.28, 0.52, 0.22], 5.0, 18.0),
    ] {
        for _ in 0..count {
            let rx = rng.random_range(rmin..rmax);
            clutter.push(Clutter::Blob {
                cx: rng.random_range(0.0..side),
                cy: rng.random_range(0.0..side),
                rx,
                ry: rx * rng.random_range(0.5..1.0),
                angle: rng.random_range(0.0..PI),
                color: jittered(&mut rng, base, 0.05),
            });
        }
    }

    let mut individuals: Vec<Individual> = identities
        .iter()
        .map(|&identity| {
            let a = rng.random_range(17.0..22.0) * side / 256.0;
            let b = a * rng.random_range(0.55..0.65);
            let head_r = b * rng.random_range(0.65..0.75);
            let face_visible = rng.random_bool(config.face_visibility);
            let occluder = rng.random_bool(config.occlusion_prob).then(|| Occluder {
                // hides the rear of the body, leaving the front and head
                u: -rng.random_range(0.35..0.55) * a,
                v: rng.random_range(-0.2..0.2) * b,
                rx: a * rng.random_range(0.6..0.75),
                ry: b * rng.random_range(1.1..1.4),
                color: jittered(&mut rng, [0.18, 0.46, 0.14], 0.04),
            });
            Individual {
                identity,
                cx: 0.0,
                cy: 0.0,
                theta: rng.random_range(0.0..2.0 * PI),
                a,
                b,
                head_r,
                face_visible,
                occluder,
            }
        })
        .collect();
    place_group(&mut rng, &mut individuals, side);
    Scene { top, bottom, waves, clutter, individuals }
}

/// Scatter the individuals around a common centre, inside the frame and
/// not on top of each other.
fn place_group(rng: &mut ChaCha8Rng, individuals: &mut [Individual], side: f64) {
    if individuals.is_empty() {
        return;
    }
    let spread = side * (0.06 + 0.035 * individuals.len() as f64);
    'group: loop {
        let gx = rng.random_range(0.3 * side..0.7 * side);
        let gy = rng.random_range(0.3 * side..0.7 * side);
        for i in 0..individuals.len() {
            let margin = individuals[i].extent() + 1.0;
            let mut placed = false;
            for _ in 0..100 {
                let cx = gx + rng.random_range(-spread..spread);
                let cy = gy + rng.random_range(-spread..spread);
                if cx < margin || cy < margin || cx > side - margin || cy > side - margin {
                    continue;
                }
                let clear = individuals[..i].iter().all(|o| {
                    let min = 0.9 * (o.a + individuals[i].a);
                    (o.cx - cx).hypot(o.cy - cy) >= min
                });
                if clear {
                    individuals[i].cx = cx;
                    individuals[i].cy = cy;
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'group;
            }
        }
        return;
    }
}

struct Canvas {
    side: usize,
    rgb: Vec<f64>,
    identity: Vec<u8>,
    marking: Vec<bool>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, color: Rgb, identity: u8, marking: bool) {
        let plane = self.side * self.side;
        let i = y * self.side + x;
        for (c, v) in color.iter().enumerate() {
            self.rgb[c * plane + i] = *v;
        }
        self.identity[i] = identity;
        self.marking[i] = marking;
    }

    /// Pixel range covering `[lo, hi)` in continuous coordinates.
    fn span(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = lo.floor().max(0.0) as usize;
        let b = (hi.ceil().max(0.0) as usize).min(self.side);
        a.min(b)..b
    }

    /// Visit every pixel whose centre satisfies `inside` within a square of
    /// radius `r` around `(cx, cy)`.
    fn for_each_in(
        &self,
        cx: f64,
        cy: f64,
        r: f64,
        inside: impl Fn(f64, f64) -> bool,
        mut visit: impl FnMut(usize, usize),
    ) {
        for y in self.span(cy - r, cy + r) {
            for x in self.span(cx - r, cx + r) {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    visit(x, y);
                }
            }
        }
    }
}

fn in_ellipse(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64, angle: f64) -> bool {
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (px - cx, py - cy);
    let u = (dx * c + dy * s) / rx;
    let v = (-dx * s + dy * c) / ry;
    u * u + v * v <= 1.0
}

/// Tight pixel box accumulator.
#[derive(Default)]
struct Extent(Option<(usize, usize, usize, usize)>);

impl Extent {
    fn add(&mut self, x: usize, y: usize) {
        self.0 = Some(match self.0 {
            None => (x, y, x + 1, y + 1),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
        });
    }
}

fn shade(base: Rgb, amount: f64) -> Rgb {
    base.map(|c| c + amount)
}

fn draw_individual(
    canvas: &mut Canvas,
    spec: &IndividualSpec,
    ind: &Individual,
) -> (Extent, Option<Extent>) {
    let id = ind.identity as u8;
    let mut body = Extent::default();
    let (cx, cy, a, b, theta) = (ind.cx, ind.cy, ind.a, ind.b, ind.theta);

    let phi = theta + spec.stripe_angle;
    let (sp, cp) = phi.sin_cos();
    // the coat stripes swing along the marking's hue axis, so they carry
    // identity colour but still average to the body colour
    let axis = {
        let d = [0, 1, 2].map(|i| spec.marking_color[i] - spec.body_color[i]);
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        d.map(|v| v / n)
    };
    let mut body_pixels = Vec::new();
    canvas.for_each_in(cx, cy, a, |px, py| in_ellipse(px, py, cx, cy, a, b, theta), |x, y| {
        body_pixels.push((x, y));
    });
    for &(x, y) in &body_pixels {
        body.add(x, y);
        let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let t = (px * cp + py * sp) / spec.stripe_period;
        let s = if t - t.floor() < 0.5 { STRIPE_CONTRAST } else { -STRIPE_CONTRAST };
        canvas.put(x, y, [0, 1, 2].map(|i| spec.body_color[i] + s * axis[i]), id, false);
    }

    // Markings: axis-aligned patches of fine horizontal stripes, two pixels
    // per stripe, clipped to the body.
    let other = complement(spec.marking_color, spec.body_color);
    let half = spec.marking_size / 2.0;
    for &(u, v) in &spec.marking_offsets {
        let (mx, my) = ind.to_image(u * a, v * b);
        for &(x, y) in &body_pixels {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if (px - mx).abs() <= half && (py - my).abs() <= half {
                let color = if (y >> 1) & 1 == 0 { spec.marking_color } else { other };
                canvas.put(x, y, color, id, true);
            }
        }
    }

    let (hx, hy) = ind.head_center();
    let hr = ind.head_r;
    let head_color = shade(spec.body_color, -0.06);
    let mut head_pixels = Vec::new();
    canvas.for_each_in(hx, hy, hr, |px, py| (px - hx).hypot(py - hy) <= hr, |x, y| {
        head_pixels.push((x, y));
    });
    for (x, y) in head_pixels {
        body.add(x, y);
        canvas.put(x, y, head_color, id, false);
    }

    if let Some(occ) = &ind.occluder {
        let (ox, oy) = ind.to_image(occ.u, occ.v);
        let r = occ.rx.max(occ.ry);
        let mut pixels = Vec::new();
        canvas.for_each_in(ox, oy, r, |px, py| in_ellipse(px, py, ox, oy, occ.rx, occ.ry, theta), |x, y| {
            pixels.push((x, y));
        });
        for (x, y) in pixels {
            // coarse leaf texture
            let leaf = if ((x / 5) + (y / 4)) % 3 == 0 { 0.05 } else { 0.0 };
            canvas.put(x, y, shade(occ.color, leaf), NO_IDENTITY, false);
        }
    }

    let face = ind.face_visible.then(|| {
        let mut extent = Extent::default();
        let (fx, fy) = ind.face_center();
        let fr = ind.face_r();
        let other = complement(spec.face_color, FACE_COLOR);
        let mut pixels = Vec::new();
        canvas.for_each_in(fx, fy, fr, |px, py| (px - fx).hypot(py - fy) <= fr, |x, y| {
            pixels.push((x, y));
        });
        for (x, y) in pixels {
            extent.add(x, y);
            body.add(x, y);
            let color = if ((x >> 1) + (y >> 1)) & 1 == 0 { spec.face_color } else { other };
            canvas.put(x, y, color, id, false);
        }
        extent
    });
    (body, face)
}

/// Render frame `frame_id` of the dataset described by `config`.
pub fn render_frame(
    specs: &[IndividualSpec],
    config: &SceneConfig,
    frame_id: u64,
) -> Result<RenderedFrame> {
    config.validate()?;
    if specs.len() != config.num_identities {
        return Err(Error::InvalidArgument(format!(
            "{} identity specs for num_identities {}",
            specs.len(),
            config.num_identities
        )));
    }
    if frame_id as usize >= config.total_frames() {
        return Err(Error::InvalidArgument(format!(
            "frame_id {frame_id} out of range 0..{}",
            config.total_frames()
        )));
    }
    let side = config.image_side;
    let scene = sample_scene(specs, config, config.burst_of(frame_id));
    let mut rng = stream_rng(config.seed, stream::FRAME, frame_id);

    let mut canvas = Canvas {
        side,
        rgb: vec![0.0; 3 * side * side],
        identity: vec![NO_IDENTITY; side * side],
        marking: vec![false; side * side],
    };
    for y in 0..side {
        let t = y as f64 / (side - 1) as f64;
        for x in 0..side {
            let wave: f64 = scene
                .waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * x as f64 + ky * y as f64 + ph).sin())
                .sum();
            let color = [0, 1, 2].map(|c| scene.top[c] * (1.0 - t) + scene.bottom[c] * t + wave);
            canvas.put(x, y, color, NO_IDENTITY, false);
        }
    }
    for item in &scene.clutter {
        match *item {
            Clutter::Trunk { x0, x1, color } => {
                for y in 0..side {
                    for x in canvas.span(x0, x1) {
                        let bark = if (y / 3 + x) % 7 == 0 { -0.03 } else { 0.0 };
                        canvas.put(x, y, shade(color, bark), NO_IDENTITY, false);
                    }
                }
            }
            Clutter::Blob { cx, cy, rx, ry, angle, color } => {
                let mut pixels = Vec::new();
                canvas.for_each_in(cx, cy, rx.max(ry), |px, py| in_ellipse(px, py, cx, cy, rx, ry, angle), |x, y| {
                    pixels.push((x, y));
                });
                for (x, y) in pixels {
                    canvas.put(x, y, color, NO_IDENTITY, false);
                }
            }
        }
    }

    let individuals = &scene.individuals;
    // nearer (lower) individuals are drawn last
    let mut order: Vec<usize> = (0..individuals.len()).collect();
    order.sort_by(|&i, &j| individuals[i].cy.total_cmp(&individuals[j].cy).then(i.cmp(&j)));

    let mut body_boxes = Vec::new();
    let mut face_boxes = Vec::new();
    for &i in &order {
        let ind = &individuals[i];
        let (body, face) = draw_individual(&mut canvas, &specs[ind.identity], ind);
        let (x0, y0, x1, y1) = body.0.expect("individual placed inside the frame");
        body_boxes.push(BodyBox { id: ind.identity, x0, y0, x1, y1, visible: ind.occluder.is_none() });
        if let Some(Extent(Some((x0, y0, x1, y1)))) = face {
            face_boxes.push(FaceBox { id: ind.identity, x0, y0, x1, y1, visible: true });
        }
    }
    body_boxes.sort_by_key(|b| b.id);
    face_boxes.sort_by_key(|b| b.id);

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for v in canvas.rgb.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }

    let mut y = vec![0u8; specs.len()];
    for ind in individuals {
        y[ind.identity] = 1;
    }
    let split = config.split_of(frame_id);
    debug_assert!(matches!(split, Split::Train | Split::Test));
    let record = FrameRecord {
        frame_id,
        path: format!("{IMAGES_DIR}/{frame_id:06}.ppm"),
        split,
        n: individuals.len(),
        y,
        body_boxes,
        face_boxes,
    };
    Ok(RenderedFrame {
        image: Tensor::from_vec(&[3, side, side], canvas.rgb)?,
        record,
        identity_mask: canvas.identity,
        marking_mask: canvas.marking,
    })
}
