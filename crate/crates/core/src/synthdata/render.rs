//! Procedural rendering of the synthetic endoscopy-like scenes.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Shape family drawn for an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Polyp,
    Ndbe,
    Neoplasia,
}

/// Rendering parameter ranges. Recorded verbatim in each split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderParams {
    /// Global hue rotation in degrees, drawn per image.
    pub hue_shift_deg: [i32; 2],
    /// Global brightness multiplier, drawn per image.
    pub brightness: [f64; 2],
    /// Multiplier on every object size, drawn per instance.
    pub size_scale: [f64; 2],
    /// Fraction of neoplasia instances drawn from the ellipse-like family.
    pub neoplasia_ellipse_fraction: f64,
    /// Uniform per-pixel noise amplitude in 8-bit levels.
    pub noise_amplitude: f64,
    /// Spacing of the lattice that object centers are drawn from; 0 places
    /// centers anywhere in the frame.
    pub lattice_stride: f64,
    /// Uniform jitter added to lattice centers, in pixels.
    pub lattice_jitter: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            hue_shift_deg: [-6, 6],
            brightness: [0.95, 1.05],
            size_scale: [1.0, 1.0],
            neoplasia_ellipse_fraction: 0.3,
            noise_amplitude: 5.0,
            lattice_stride: 15.0,
            lattice_jitter: 3.0,
        }
    }
}

impl RenderParams {
    /// Shifted ranges used for the out-of-distribution test set.
    pub fn shifted() -> Self {
        RenderParams {
            hue_shift_deg: [8, 14],
            brightness: [0.85, 0.95],
            size_scale: [0.85, 1.0],
            ..RenderParams::default()
        }
    }
}

const MARGIN: f64 = 2.0;

/// Mucosa base color.
const BACKGROUND: [f32; 3] = [208.0, 112.0, 112.0];
const PLACEMENT_TRIES: usize = 60;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, c: [f32; 3], alpha: f32) {
        let p = &mut self.px[y * self.w + x];
        for k in 0..3 {
            p[k] = p[k] * (1.0 - alpha) + c[k] * alpha;
        }
    }
}

fn jitter<R: Rng>(rng: &mut R, base: [f32; 3], amp: f32) -> [f32; 3] {
    let mut out = base;
    for v in &mut out {
        *v += rng.random_range(-amp..=amp);
    }
    out
}

fn scale(c: [f32; 3], f: f32) -> [f32; 3] {
    [c[0] * f, c[1] * f, c[2] * f]
}

fn background<R: Rng>(rng: &mut R, w: usize, h: usize) -> Canvas {
    let base = jitter(rng, BACKGROUND, 6.0);
    let dir = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (dir.cos(), dir.sin());
    let amp = rng.random_range(4.0f32..10.0);
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let rmax2 = cx * cx + cy * cy;
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let g = amp * (fx * dx + fy * dy) / cx;
            let vig = 1.0 - 0.2 * (fx * fx + fy * fy) / rmax2;
            px.push([
                (base[0] + g) * vig,
                (base[1] + 0.5 * g) * vig,
                (base[2] + 0.5 * g) * vig,
            ]);
        }
    }
    Canvas { w, h, px }
}

fn disc(canvas: &mut Canvas, cx: f32, cy: f32, r: f32, c: [f32; 3], alpha: f32) {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(canvas.w);
    let y1 = ((cy + r).ceil() as usize).min(canvas.h);
    for y in y0..y1 {
        for x in x0..x1 {
            let (fx, fy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let d2 = (fx * fx + fy * fy) / (r * r);
            if d2 <= 1.0 {
                canvas.blend(x, y, c, alpha * (1.0 - 0.5 * d2));
            }
        }
    }
}

/// Rotated ellipse used by several families.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (
            ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt(),
            ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt(),
        )
    }

    /// Normalized radius and the point's coordinates in the ellipse frame.
    fn local(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        ((u * u + v * v).sqrt(), u, v)
    }
}

/// Size and aspect of one instance before placement.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    a: f64,
    b: f64,
    theta: f64,
    /// Irregularity harmonics (amplitude, frequency, phase); empty for ellipses.
    wobble: [(f64, f64, f64); 3],
    irregular: bool,
}

impl Footprint {
    fn max_radius(&self) -> f64 {
        let amp: f64 = if self.irregular { self.wobble.iter().map(|w| w.0).sum() } else { 0.0 };
        self.a.max(self.b) * (1.0 + amp)
    }

    fn scaled(&self, f: f64) -> Footprint {
        Footprint { a: self.a * f, b: self.b * f, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Family {
    Polyp,
    Ndbe,
    NeoplasiaIrregular,
    NeoplasiaEllipse,
}

fn footprint<R: Rng>(rng: &mut R, family: Family, size_scale: f64) -> Footprint {
    let none = [(0.0, 0.0, 0.0); 3];
    let fp = match family {
        Family::Polyp | Family::NeoplasiaEllipse => {
            let d = rng.random_range(29.0..35.0);
            let aspect: f64 = rng.random_range(0.9..1.1);
            Footprint {
                a: 0.5 * d * aspect.sqrt(),
                b: 0.5 * d / aspect.sqrt(),
                theta: rng.random_range(0.0..std::f64::consts::PI),
                wobble: none,
                irregular: false,
            }
        }
        Family::Ndbe => {
            let long = rng.random_range(40.0..46.0);
            let ratio = rng.random_range(1.9..2.1);
            let vertical = rng.random_bool(0.5);
            let tilt = rng.random_range(-0.2..0.2);
            Footprint {
                a: 0.5 * long,
                b: 0.5 * long / ratio,
                theta: tilt + if vertical { std::f64::consts::FRAC_PI_2 } else { 0.0 },
                wobble: none,
                irregular: false,
            }
        }
        Family::NeoplasiaIrregular => {
            let r = rng.random_range(13.0..16.0);
            let aspect: f64 = rng.random_range(0.8..1.25);
            let mut wobble = none;
            for (slot, freq) in wobble.iter_mut().zip([2.0, 3.0, 5.0]) {
                *slot = (
                    rng.random_range(0.08..0.18),
                    freq,
                    rng.random_range(0.0..std::f64::consts::TAU),
                );
            }
            Footprint {
                a: r * aspect.sqrt(),
                b: r / aspect.sqrt(),
                theta: rng.random_range(0.0..std::f64::consts::PI),
                wobble,
                irregular: true,
            }
        }
    };
    fp.scaled(size_scale)
}

fn conservative_extent(fp: &Footprint) -> (f64, f64) {
    if fp.irregular {
        let r = fp.max_radius();
        (r, r)
    } else {
        Ellipse { cx: 0.0, cy: 0.0, a: fp.a, b: fp.b, theta: fp.theta }.half_extents()
    }
}

fn overlaps(candidate: &BBox, placed: &[BBox]) -> bool {
    placed.iter().any(|p| {
        let grown = BBox {
            x_min: p.x_min - 3.0,
            y_min: p.y_min - 3.0,
            x_max: p.x_max + 3.0,
            y_max: p.y_max + 3.0,
        };
        grown.intersection_area(candidate) > 0.0
    })
}

/// Centers of a regular lattice with spacing `stride`, centered in `extent`.
fn lattice(extent: f64, stride: f64) -> Vec<f64> {
    let n = ((extent / stride).floor() as usize).max(1);
    let offset = 0.5 * (extent - (n - 1) as f64 * stride);
    (0..n).map(|i| offset + i as f64 * stride).collect()
}

/// Finds a non-overlapping center, shrinking the footprint when the frame is
/// crowded. With a positive `lattice_stride` the center is a lattice point
/// plus a uniform jitter; lattice points too close to the border are skipped.
fn place<R: Rng>(
    rng: &mut R,
    fp: Footprint,
    w: f64,
    h: f64,
    placed: &[BBox],
    params: &RenderParams,
) -> (f64, f64, Footprint) {
    let mut fp = fp;
    let jitter = params.lattice_jitter.max(0.0);
    let (xs, ys) = if params.lattice_stride > 0.0 {
        (lattice(w, params.lattice_stride), lattice(h, params.lattice_stride))
    } else {
        (Vec::new(), Vec::new())
    };
    loop {
        let (hx, hy) = conservative_extent(&fp);
        let reach_x = hx + MARGIN + jitter;
        let reach_y = hy + MARGIN + jitter;
        let fit_x: Vec<f64> = xs.iter().copied().filter(|&c| c - reach_x >= 0.0 && c + reach_x <= w).collect();
        let fit_y: Vec<f64> = ys.iter().copied().filter(|&c| c - reach_y >= 0.0 && c + reach_y <= h).collect();
        let on_lattice = !fit_x.is_empty() && !fit_y.is_empty();
        if on_lattice || (2.0 * (hx + MARGIN) < w && 2.0 * (hy + MARGIN) < h) {
            for _ in 0..PLACEMENT_TRIES {
                let (cx, cy) = if on_lattice {
                    let jx = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
                    let jy = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
                    (fit_x[rng.random_range(0..fit_x.len())] + jx, fit_y[rng.random_range(0..fit_y.len())] + jy)
                } else {
                    (rng.random_range(hx + MARGIN..w - hx - MARGIN), rng.random_range(hy + MARGIN..h - hy - MARGIN))
                };
                let bb = BBox { x_min: cx - hx, y_min: cy - hy, x_max: cx + hx, y_max: cy + hy };
                if !overlaps(&bb, placed) {
                    return (cx, cy, fp);
                }
            }
        }
        fp = fp.scaled(0.85);
    }
}

struct Mask {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    count: usize,
}

impl Mask {
    fn empty() -> Self {
        Mask { x0: usize::MAX, y0: usize::MAX, x1: 0, y1: 0, count: 0 }
    }

    fn add(&mut self, x: usize, y: usize) {
        self.x0 = self.x0.min(x);
        self.y0 = self.y0.min(y);
        self.x1 = self.x1.max(x + 1);
        self.y1 = self.y1.max(y + 1);
        self.count += 1;
    }

    fn bbox(&self) -> Option<BBox> {
        (self.count > 0).then_some(BBox {
            x_min: self.x0 as f64,
            y_min: self.y0 as f64,
            x_max: self.x1 as f64,
            y_max: self.y1 as f64,
        })
    }
}

fn draw<R: Rng>(rng: &mut R, canvas: &mut Canvas, family: Family, cx: f64, cy: f64, fp: &Footprint) -> Option<BBox> {
    let el = Ellipse { cx, cy, a: fp.a, b: fp.b, theta: fp.theta };
    let reach = fp.max_radius() + 1.0;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(canvas.w);
    let y1 = ((cy + reach).ceil() as usize).min(canvas.h);

    let (color, speckle, highlight) = match family {
        Family::Polyp => (jitter(rng, [144.0, 48.0, 48.0], 6.0), 0.0, true),
        Family::NeoplasiaEllipse => (jitter(rng, [144.0, 48.0, 80.0], 6.0), 0.12, false),
        Family::NeoplasiaIrregular => (jitter(rng, [112.0, 48.0, 80.0], 6.0), 0.18, false),
        Family::Ndbe => (jitter(rng, [240.0, 112.0, 80.0], 6.0), 0.0, false),
    };

    let mut mask = Mask::empty();
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (rho, u, v) = el.local(px, py);
            let rho = if fp.irregular {
                let phi = v.atan2(u);
                let wob: f64 = fp.wobble.iter().map(|&(amp, f, ph)| amp * (f * phi + ph).sin()).sum();
                rho / (1.0 + wob)
            } else {
                rho
            };
            if rho > 1.0 {
                continue;
            }
            mask.add(x, y);
            let dome = 0.94 + 0.08 * (1.0 - rho * rho).max(0.0).sqrt();
            let mut c = scale(color, dome as f32);
            if speckle > 0.0 && rng.random_bool(speckle) {
                c = scale(c, 0.75);
            }
            canvas.blend(x, y, c, 1.0);
        }
    }
    if highlight {
        let (s, c) = fp.theta.sin_cos();
        let (hu, hv) = (-0.3 * fp.a, -0.35 * fp.b);
        let hx = cx + hu * c - hv * s;
        let hy = cy + hu * s + hv * c;
        let r = 0.16 * fp.a.min(fp.b);
        disc(canvas, hx as f32, hy as f32, r as f32, [250.0, 245.0, 240.0], 0.95);
    }
    mask.bbox()
}

/// Renders one image containing the requested shapes. Returns the raster and
/// one box per shape, in request order.
pub(crate) fn render_scene<R: Rng>(
    rng: &mut R,
    width: u32,
    height: u32,
    shapes: &[Shape],
    params: &RenderParams,
) -> (RgbImage, Vec<BBox>) {
    let (w, h) = (width as usize, height as usize);
    let mut canvas = background(rng, w, h);
    let mut placed: Vec<BBox> = Vec::with_capacity(shapes.len());
    for &shape in shapes {
        let family = match shape {
            Shape::Polyp => Family::Polyp,
            Shape::Ndbe => Family::Ndbe,
            Shape::Neoplasia => {
                if rng.random_bool(params.neoplasia_ellipse_fraction.clamp(0.0, 1.0)) {
                    Family::NeoplasiaEllipse
                } else {
                    Family::NeoplasiaIrregular
                }
            }
        };
        let size = rng.random_range(params.size_scale[0]..=params.size_scale[1]);
        let fp = footprint(rng, family, size);
        let (cx, cy, fp) = place(rng, fp, w as f64, h as f64, &placed, params);
        let bb = draw(rng, &mut canvas, family, cx, cy, &fp).unwrap_or(BBox {
            x_min: (cx - 2.0).floor(),
            y_min: (cy - 2.0).floor(),
            x_max: (cx + 2.0).floor(),
            y_max: (cy + 2.0).floor(),
        });
        placed.push(bb);
    }

    let gain = rng.random_range(params.brightness[0]..=params.brightness[1]) as f32;
    let amp = params.noise_amplitude as f32;
    let mut img = RgbImage::new(width, height);
    for (i, p) in img.pixels_mut().enumerate() {
        let src = canvas.px[i];
        let mut out = [0u8; 3];
        for k in 0..3 {
            let n = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            out[k] = (src[k] * gain + n).round().clamp(0.0, 255.0) as u8;
        }
        *p = Rgb(out);
    }
    let hue = rng.random_range(params.hue_shift_deg[0]..=params.hue_shift_deg[1]);
    if hue != 0 {
        img = image::imageops::huerotate(&img, hue);
    }
    (img, placed)
}
