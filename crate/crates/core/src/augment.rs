//! Training-time augmentations with consistent box transforms.
//!
//! Geometric ops (random quarter-turn rotation, flips, center crop) move both
//! raster and boxes; photometric ops touch only pixels. Every op is applied
//! independently with the policy's probability, in a fixed order, from a
//! random stream keyed by `(policy.seed, draw)`.

use std::collections::BTreeSet;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::{self, Domain};
use crate::synthdata::{ImageSample, LabeledBox, MIN_BOX_AREA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometricOp {
    Rot90Random,
    Hflip,
    Vflip,
    CenterCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotometricOp {
    Blur,
    Equalize,
    Contrast,
    Brightness,
    Darkness,
    Sharpness,
    Hue,
    Saturation,
}

/// Parameter ranges for photometric ops; `[lo, hi]` inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricRanges {
    /// Box blur kernel sizes; only odd sizes in the range are drawn.
    pub blur_kernel: [u32; 2],
    pub contrast: [f64; 2],
    /// Brightness scales pixel values by a factor at or above 1.
    pub brightness: [f64; 2],
    /// Darkness is the same scaling with a factor at or below 1.
    pub darkness: [f64; 2],
    pub saturation: [f64; 2],
    pub hue_degrees: [i32; 2],
    /// Unsharp-mask amount.
    pub sharpness: [f64; 2],
}

impl Default for PhotometricRanges {
    fn default() -> Self {
        PhotometricRanges {
            blur_kernel: [3, 5],
            contrast: [0.7, 1.3],
            brightness: [1.0, 1.3],
            darkness: [0.7, 1.0],
            saturation: [0.7, 1.3],
            hue_degrees: [-18, 18],
            sharpness: [0.5, 1.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub geometric: BTreeSet<GeometricOp>,
    pub photometric: BTreeSet<PhotometricOp>,
    /// Probability with which each enabled op fires.
    pub probability: f64,
    /// Side fraction kept by the center crop before rescaling.
    pub crop_fraction: f64,
    pub ranges: PhotometricRanges,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::none()
    }
}

const ALL_GEOMETRIC: [GeometricOp; 4] =
    [GeometricOp::Rot90Random, GeometricOp::Hflip, GeometricOp::Vflip, GeometricOp::CenterCrop];
const ALL_PHOTOMETRIC: [PhotometricOp; 8] = [
    PhotometricOp::Blur,
    PhotometricOp::Equalize,
    PhotometricOp::Contrast,
    PhotometricOp::Brightness,
    PhotometricOp::Darkness,
    PhotometricOp::Sharpness,
    PhotometricOp::Hue,
    PhotometricOp::Saturation,
];

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            geometric: BTreeSet::new(),
            photometric: BTreeSet::new(),
            probability: 0.5,
            crop_fraction: 0.8,
            ranges: PhotometricRanges::default(),
            seed: 0,
        }
    }

    pub fn geometric() -> Self {
        AugmentPolicy { geometric: ALL_GEOMETRIC.into_iter().collect(), ..Self::none() }
    }

    pub fn photometric() -> Self {
        AugmentPolicy { photometric: ALL_PHOTOMETRIC.into_iter().collect(), ..Self::none() }
    }

    pub fn combined() -> Self {
        AugmentPolicy {
            geometric: ALL_GEOMETRIC.into_iter().collect(),
            photometric: ALL_PHOTOMETRIC.into_iter().collect(),
            ..Self::none()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_identity(&self) -> bool {
        (self.geometric.is_empty() && self.photometric.is_empty()) || self.probability == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad("probability must be in [0, 1]");
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return bad("crop_fraction must be in (0, 1]");
        }
        let r = &self.ranges;
        let real = [
            ("contrast", r.contrast),
            ("brightness", r.brightness),
            ("darkness", r.darkness),
            ("saturation", r.saturation),
            ("sharpness", r.sharpness),
        ];
        for (name, [lo, hi]) in real {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return bad(&format!("{name} range [{lo}, {hi}] is empty or negative"));
            }
        }
        if r.brightness[0] < 1.0 || r.darkness[1] > 1.0 {
            return bad("brightness must scale up (>= 1) and darkness down (<= 1)");
        }
        if r.hue_degrees[0] > r.hue_degrees[1] {
            return bad("hue range is empty");
        }
        let [k0, k1] = r.blur_kernel;
        if k0 > k1 || k0 < 1 || !(k0..=k1).any(|k| k % 2 == 1) {
            return bad("blur_kernel range holds no odd size");
        }
        Ok(())
    }
}

/// Maps a box through `quarter_turns` counterclockwise quarter turns of a
/// `width x height` frame. One turn sends `(x_min, y_min, x_max, y_max)` to
/// `(y_min, W - x_max, y_max, W - x_min)` in the rotated `H x W` frame.
pub fn box_transform_rot90(bbox: &BBox, frame: (f64, f64), quarter_turns: u32) -> BBox {
    let (mut w, mut h) = frame;
    let mut b = *bbox;
    for _ in 0..quarter_turns % 4 {
        b = BBox { x_min: b.y_min, y_min: w - b.x_max, x_max: b.y_max, y_max: w - b.x_min };
        std::mem::swap(&mut w, &mut h);
    }
    b
}

pub fn box_hflip(bbox: &BBox, width: f64) -> BBox {
    BBox { x_min: width - bbox.x_max, x_max: width - bbox.x_min, ..*bbox }
}

pub fn box_vflip(bbox: &BBox, height: f64) -> BBox {
    BBox { y_min: height - bbox.y_max, y_max: height - bbox.y_min, ..*bbox }
}

fn map_boxes(sample: &mut ImageSample, f: impl Fn(&BBox) -> BBox) {
    for a in &mut sample.annotations {
        a.bbox = f(&a.bbox);
    }
}

pub fn rotate_ccw(sample: &ImageSample, quarter_turns: u32) -> ImageSample {
    let mut out = sample.clone();
    let frame = (sample.image.width() as f64, sample.image.height() as f64);
    for _ in 0..quarter_turns % 4 {
        out.image = imageops::rotate270(&out.image);
    }
    map_boxes(&mut out, |b| box_transform_rot90(b, frame, quarter_turns));
    out
}

pub fn hflip(sample: &ImageSample) -> ImageSample {
    let mut out = sample.clone();
    out.image = imageops::flip_horizontal(&sample.image);
    let w = sample.image.width() as f64;
    map_boxes(&mut out, |b| box_hflip(b, w));
    out
}

pub fn vflip(sample: &ImageSample) -> ImageSample {
    let mut out = sample.clone();
    out.image = imageops::flip_vertical(&sample.image);
    let h = sample.image.height() as f64;
    map_boxes(&mut out, |b| box_vflip(b, h));
    out
}

/// Keeps the central `fraction` of each side and rescales bilinearly to the
/// original size. Boxes left with less than the minimum area are dropped;
/// `None` if no box survives.
pub fn center_crop(sample: &ImageSample, fraction: f64) -> Option<ImageSample> {
    let (w, h) = sample.image.dimensions();
    let cw = ((w as f64 * fraction).round() as u32).clamp(1, w);
    let ch = ((h as f64 * fraction).round() as u32).clamp(1, h);
    let (x0, y0) = ((w - cw) / 2, (h - ch) / 2);
    let cropped = imageops::crop_imm(&sample.image, x0, y0, cw, ch).to_image();
    let image = imageops::resize(&cropped, w, h, FilterType::Triangle);

    let (sx, sy) = (w as f64 / cw as f64, h as f64 / ch as f64);
    let annotations: Vec<LabeledBox> = sample
        .annotations
        .iter()
        .filter_map(|a| {
            let b = BBox {
                x_min: ((a.bbox.x_min - x0 as f64) * sx).clamp(0.0, w as f64),
                y_min: ((a.bbox.y_min - y0 as f64) * sy).clamp(0.0, h as f64),
                x_max: ((a.bbox.x_max - x0 as f64) * sx).clamp(0.0, w as f64),
                y_max: ((a.bbox.y_max - y0 as f64) * sy).clamp(0.0, h as f64),
            };
            (b.is_valid() && b.area() >= MIN_BOX_AREA).then_some(LabeledBox { bbox: b, class: a.class })
        })
        .collect();
    (!annotations.is_empty()).then(|| ImageSample { image, annotations, source_id: sample.source_id.clone() })
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

#[inline]
fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Separable box blur with edge clamping. `k` must be odd.
pub fn box_blur(img: &RgbImage, k: u32) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let r = (k / 2) as isize;
    let n = (2 * r + 1) as u32;
    // Rounded mean; `n` is odd so the quotient never ends in exactly one half.
    let mean = |acc: u32| ((2 * acc + n) / (2 * n)) as u8;
    // One pass along lines of `len` pixels spaced `step` apart.
    let pass = |src: &[u8], len: usize, lines: usize, step: usize, stride: usize| {
        let mut out = vec![0u8; src.len()];
        for line in 0..lines {
            let base = line * stride;
            let at = |i: isize| base + (i.clamp(0, len as isize - 1) as usize) * step;
            for c in 0..3 {
                let mut acc: u32 = (-r..=r).map(|d| src[at(d) + c] as u32).sum();
                for i in 0..len as isize {
                    out[at(i) + c] = mean(acc);
                    acc += src[at(i + r + 1) + c] as u32;
                    acc -= src[at(i - r) + c] as u32;
                }
            }
        }
        out
    };
    let horizontal = pass(img.as_raw(), w, h, 3, 3 * w);
    let vertical = pass(&horizontal, h, w, 3 * w, 3);
    RgbImage::from_raw(w as u32, h as u32, vertical).expect("buffer size matches")
}

/// Per-channel histogram equalization.
pub fn equalize(img: &RgbImage) -> RgbImage {
    let n = (img.width() * img.height()) as u64;
    let mut luts = [[0u8; 256]; 3];
    for (c, lut) in luts.iter_mut().enumerate() {
        let mut hist = [0u64; 256];
        for p in img.pixels() {
            hist[p[c] as usize] += 1;
        }
        let mut cdf = [0u64; 256];
        let mut acc = 0;
        for (v, &count) in hist.iter().enumerate() {
            acc += count;
            cdf[v] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        for v in 0..256 {
            lut[v] = if n == cdf_min {
                v as u8
            } else {
                to_u8((cdf[v].saturating_sub(cdf_min)) as f64 * 255.0 / (n - cdf_min) as f64)
            };
        }
    }
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            p[c] = luts[c][p[c] as usize];
        }
    }
    out
}

fn map_pixels(img: &RgbImage, f: impl Fn(f64, f64) -> f64) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let y = luma(p);
        for c in 0..3 {
            p[c] = to_u8(f(p[c] as f64, y));
        }
    }
    out
}

/// Applies a per-value mapping through a 256-entry lookup table.
fn map_values(img: &RgbImage, f: impl Fn(f64) -> f64) -> RgbImage {
    let lut: [u8; 256] = std::array::from_fn(|v| to_u8(f(v as f64)));
    let mut out = img.clone();
    for v in out.iter_mut() {
        *v = lut[*v as usize];
    }
    out
}

pub fn scale_brightness(img: &RgbImage, factor: f64) -> RgbImage {
    map_values(img, |v| v * factor)
}

/// Blends each pixel toward (factor < 1) or away from the mean image luma.
pub fn adjust_contrast(img: &RgbImage, factor: f64) -> RgbImage {
    let n = (img.width() * img.height()) as f64;
    let mean = img.pixels().map(luma).sum::<f64>() / n;
    map_values(img, |v| mean + factor * (v - mean))
}

pub fn adjust_saturation(img: &RgbImage, factor: f64) -> RgbImage {
    map_pixels(img, |v, y| y + factor * (v - y))
}

/// Unsharp masking against a 3x3 box blur.
pub fn sharpen(img: &RgbImage, amount: f64) -> RgbImage {
    let blurred = box_blur(img, 3);
    let mut out = img.clone();
    for (p, b) in out.pixels_mut().zip(blurred.pixels()) {
        for c in 0..3 {
            let v = p[c] as f64;
            p[c] = to_u8(v + amount * (v - b[c] as f64));
        }
    }
    out
}

/// Applies `policy` to `sample` using sub-stream `draw`. Deterministic in
/// `(sample, policy, draw)`. The output keeps the input's size.
pub fn apply(sample: &ImageSample, policy: &AugmentPolicy, draw: u64) -> ImageSample {
    let mut rng = rng::stream(policy.seed, Domain::Augment, draw);
    let mut out = sample.clone();
    let p = policy.probability;

    for op in ALL_GEOMETRIC {
        // Coin and parameter are always drawn so each op's randomness stays put.
        let fire = rng.random_bool(p);
        let turns = rng.random_range(1..=3u32);
        if !fire || !policy.geometric.contains(&op) {
            continue;
        }
        out = match op {
            GeometricOp::Rot90Random => rotate_ccw(&out, turns),
            GeometricOp::Hflip => hflip(&out),
            GeometricOp::Vflip => vflip(&out),
            GeometricOp::CenterCrop => center_crop(&out, policy.crop_fraction).unwrap_or(out),
        };
    }

    let r = &policy.ranges;
    for op in ALL_PHOTOMETRIC {
        let fire = rng.random_bool(p);
        let u: f64 = rng.random();
        if !fire || !policy.photometric.contains(&op) {
            continue;
        }
        let lerp = |[lo, hi]: [f64; 2]| lo + u * (hi - lo);
        out.image = match op {
            PhotometricOp::Blur => {
                let odd: Vec<u32> = (r.blur_kernel[0]..=r.blur_kernel[1]).filter(|k| k % 2 == 1).collect();
                let k = odd[((u * odd.len() as f64) as usize).min(odd.len() - 1)];
                box_blur(&out.image, k)
            }
            PhotometricOp::Equalize => equalize(&out.image),
            PhotometricOp::Contrast => adjust_contrast(&out.image, lerp(r.contrast)),
            PhotometricOp::Brightness => scale_brightness(&out.image, lerp(r.brightness)),
            PhotometricOp::Darkness => scale_brightness(&out.image, lerp(r.darkness)),
            PhotometricOp::Sharpness => sharpen(&out.image, lerp(r.sharpness)),
            PhotometricOp::Hue => {
                let [lo, hi] = r.hue_degrees;
                let deg = lo + ((u * (hi - lo + 1) as f64) as i32).min(hi - lo);
                imageops::huerotate(&out.image, deg)
            }
            PhotometricOp::Saturation => adjust_saturation(&out.image, lerp(r.saturation)),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_split, polyp_proxy_plan, CorpusKind, RenderParams, SplitPlan};

    fn samples() -> Vec<ImageSample> {
        let plan = SplitPlan { images: 4, instances: [0, 0, 5], ..polyp_proxy_plan()[1].clone() };
        generate_split(CorpusKind::PolypProxy, &plan, 21, &RenderParams::default()).samples
    }

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn hflip_box_example() {
        assert_eq!(box_hflip(&bx(10.0, 20.0, 30.0, 40.0), 225.0), bx(195.0, 20.0, 215.0, 40.0));
    }

    #[test]
    fn rot90_box_examples() {
        let b = bx(0.0, 0.0, 10.0, 20.0);
        assert_eq!(box_transform_rot90(&b, (225.0, 225.0), 0), b);
        assert_eq!(box_transform_rot90(&b, (225.0, 225.0), 1), bx(0.0, 215.0, 20.0, 225.0));
        assert_eq!(box_transform_rot90(&b, (225.0, 225.0), 4), b);
        // Non-square frames swap dimensions each turn.
        let r = box_transform_rot90(&b, (100.0, 50.0), 2);
        assert_eq!(r, bx(90.0, 30.0, 100.0, 50.0));
    }

    #[test]
    fn raster_rotation_matches_box_rotation() {
        // A single bright pixel at (x, y) must land inside the rotated 1x1 box.
        let mut img = RgbImage::new(7, 5);
        img.put_pixel(1, 3, Rgb([255, 255, 255]));
        let s = ImageSample {
            image: img,
            annotations: vec![LabeledBox { bbox: bx(1.0, 3.0, 2.0, 4.0), class: 2 }],
            source_id: "t".into(),
        };
        for turns in 1..4 {
            let r = rotate_ccw(&s, turns);
            let b = r.annotations[0].bbox;
            assert_eq!(r.image.get_pixel(b.x_min as u32, b.y_min as u32)[0], 255, "turns={turns}");
        }
    }

    #[test]
    fn involutions_are_bit_exact() {
        for s in samples() {
            assert_eq!(hflip(&hflip(&s)), s);
            assert_eq!(vflip(&vflip(&s)), s);
            assert_eq!(rotate_ccw(&rotate_ccw(&s, 3), 1), s);
            let mut r = s.clone();
            for _ in 0..4 {
                r = rotate_ccw(&r, 1);
            }
            assert_eq!(r, s);
        }
    }

    #[test]
    fn center_crop_keeps_size_and_rolls_back() {
        let s = &samples()[0];
        let mut corner = s.clone();
        corner.annotations = vec![LabeledBox { bbox: bx(0.0, 0.0, 10.0, 10.0), class: 2 }];
        assert!(center_crop(&corner, 0.8).is_none());

        let policy = AugmentPolicy {
            geometric: [GeometricOp::CenterCrop].into_iter().collect(),
            probability: 1.0,
            ..AugmentPolicy::none()
        };
        assert_eq!(apply(&corner, &policy, 0), corner);

        let mut center = s.clone();
        center.annotations = vec![LabeledBox { bbox: bx(100.0, 100.0, 130.0, 120.0), class: 2 }];
        let out = center_crop(&center, 0.8).unwrap();
        assert_eq!(out.image.dimensions(), (225, 225));
        let b = out.annotations[0].bbox;
        assert!((b.width() - 30.0 * 225.0 / 180.0).abs() < 1e-9);
    }

    #[test]
    fn photometric_ops_leave_boxes_alone() {
        let policy = AugmentPolicy { probability: 1.0, ..AugmentPolicy::photometric() };
        for (i, s) in samples().iter().enumerate() {
            let out = apply(s, &policy, i as u64);
            assert_eq!(out.annotations, s.annotations);
            assert_eq!(out.image.dimensions(), s.image.dimensions());
            assert_ne!(out.image, s.image);
        }
    }

    #[test]
    fn apply_is_deterministic_and_valid() {
        let policy = AugmentPolicy::combined().with_seed(5);
        for (i, s) in samples().iter().enumerate() {
            for draw in 0..8 {
                let a = apply(s, &policy, draw * 10 + i as u64);
                let b = apply(s, &policy, draw * 10 + i as u64);
                assert_eq!(a, b);
                assert!(a.is_valid());
                assert_eq!(a.image.dimensions(), (225, 225));
            }
        }
    }

    #[test]
    fn constant_image_photometrics() {
        let img = RgbImage::from_pixel(8, 8, Rgb([100, 100, 100]));
        assert_eq!(equalize(&img), img);
        assert_eq!(box_blur(&img, 5), img);
        assert_eq!(sharpen(&img, 1.0), img);
        assert_eq!(adjust_contrast(&img, 1.3), img);
        assert_eq!(scale_brightness(&img, 1.1).get_pixel(0, 0), &Rgb([110, 110, 110]));
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::combined().validate().is_ok());
        let mut p = AugmentPolicy::combined();
        p.probability = 1.5;
        assert!(p.validate().is_err());
        let mut p = AugmentPolicy::combined();
        p.ranges.contrast = [1.2, 0.8];
        assert!(p.validate().is_err());
        let mut p = AugmentPolicy::combined();
        p.ranges.blur_kernel = [4, 4];
        assert!(p.validate().is_err());
    }

    #[test]
    fn box_blur_matches_naive_two_pass() {
        let img = RgbImage::from_fn(13, 9, |x, y| Rgb([(x * 19 + y * 7) as u8, (x * y * 3) as u8, (200 - x * 5 - y) as u8]));
        for k in [1u32, 3, 5] {
            let r = (k / 2) as i64;
            let naive_pass = |src: &RgbImage, horizontal: bool| {
                RgbImage::from_fn(src.width(), src.height(), |x, y| {
                    let mut acc = [0.0f64; 3];
                    for d in -r..=r {
                        let (sx, sy) = if horizontal {
                            ((x as i64 + d).clamp(0, src.width() as i64 - 1) as u32, y)
                        } else {
                            (x, (y as i64 + d).clamp(0, src.height() as i64 - 1) as u32)
                        };
                        for c in 0..3 {
                            acc[c] += src.get_pixel(sx, sy)[c] as f64;
                        }
                    }
                    Rgb(acc.map(|a| (a / k as f64).round() as u8))
                })
            };
            assert_eq!(box_blur(&img, k), naive_pass(&naive_pass(&img, true), false), "k = {k}");
        }
    }
}
