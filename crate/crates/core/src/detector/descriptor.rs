//! Fixed per-region descriptors.
//!
//! Layout (38 components, each in [0, 1]):
//!
//! | range  | content                                              |
//! |--------|------------------------------------------------------|
//! | 0..24  | 8-bin histogram per RGB channel, L1-normalized each   |
//! | 24..32 | magnitude-weighted signed gradient orientation, L1    |
//! | 32     | mean intensity                                        |
//! | 33     | intensity variance, scaled by 4                       |
//! | 34..38 | region center and size relative to the frame          |
//!
//! All sums come from summed-area tables so a descriptor costs O(1) per
//! component once a [`FeatureMap`] exists for the image.

use image::RgbImage;
use ndarray::Array2;

use crate::geometry::BBox;

pub const DESCRIPTOR_DIM: usize = 38;
pub const DESCRIPTOR_VERSION: u32 = 1;

const COLOR_BINS: usize = 8;
const ORIENT_BINS: usize = 8;
const ORIENT_OFFSET: usize = 3 * COLOR_BINS;
const SUM_I: usize = ORIENT_OFFSET + ORIENT_BINS;
const SUM_I2: usize = SUM_I + 1;
const CHANNELS: usize = SUM_I2 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub [f64; DESCRIPTOR_DIM]);

impl Descriptor {
    pub fn color_histogram(&self) -> &[f64] {
        &self.0[..ORIENT_OFFSET]
    }

    pub fn orientation_histogram(&self) -> &[f64] {
        &self.0[ORIENT_OFFSET..SUM_I]
    }

    pub fn mean_intensity(&self) -> f64 {
        self.0[SUM_I]
    }

    pub fn variance(&self) -> f64 {
        self.0[SUM_I2]
    }
}

/// Octant of the gradient direction, counted counterclockwise from -180
/// degrees: bin `k` covers `[-180 + 45k, -135 + 45k)`.
#[inline]
fn orientation_bin(gx: f64, gy: f64) -> usize {
    if gy >= 0.0 {
        if gx > 0.0 {
            if gy < gx { 4 } else { 5 }
        } else if gy > -gx {
            6
        } else {
            7
        }
    } else if gx >= 0.0 {
        if -gy < gx { 3 } else { 2 }
    } else if -gy > -gx {
        1
    } else {
        0
    }
}

/// Integer pixel span covered by `[lo, hi)` on an axis of `n` pixels, never empty.
fn pixel_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = (lo.round().max(0.0) as usize).min(n - 1);
    let b = (hi.round().max(0.0) as usize).min(n).max(a + 1);
    (a, b)
}

const NO_CUT: u32 = u32::MAX;

/// Summed-area tables over every per-pixel channel of one image.
///
/// The tables may be restricted to a set of cut positions per axis: a region
/// can be described only if its rounded edges fall on cuts. [`FeatureMap::new`]
/// cuts at every pixel edge; [`FeatureMap::for_regions`] cuts only at the
/// edges of the given regions, which is much cheaper for a fixed anchor grid
/// and gives identical descriptors for those regions up to summation order.
pub struct FeatureMap {
    width: usize,
    height: usize,
    /// Pixel edge -> cut index, or `NO_CUT`.
    x_cut: Vec<u32>,
    y_cut: Vec<u32>,
    /// Number of x cuts; the tables are `y_cuts x x_cuts x CHANNELS`.
    nx: usize,
    tables: Vec<f64>,
}

impl FeatureMap {
    pub fn new(img: &RgbImage) -> Self {
        let xs: Vec<usize> = (0..=img.width() as usize).collect();
        let ys: Vec<usize> = (0..=img.height() as usize).collect();
        Self::with_cuts(img, &xs, &ys)
    }

    /// Map able to describe exactly the given regions (and any other region
    /// whose rounded edges coincide with theirs).
    pub fn for_regions(img: &RgbImage, regions: &[BBox]) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut xs = vec![0, w];
        let mut ys = vec![0, h];
        for r in regions {
            let (x0, x1) = pixel_span(r.x_min, r.x_max, w);
            let (y0, y1) = pixel_span(r.y_min, r.y_max, h);
            xs.extend([x0, x1]);
            ys.extend([y0, y1]);
        }
        Self::with_cuts(img, &xs, &ys)
    }

    fn with_cuts(img: &RgbImage, xs: &[usize], ys: &[usize]) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let index = |cuts: &[usize], n: usize| {
            let mut map = vec![NO_CUT; n + 1];
            let mut sorted = cuts.to_vec();
            sorted.push(0);
            sorted.push(n);
            sorted.sort_unstable();
            sorted.dedup();
            for (i, &c) in sorted.iter().enumerate() {
                map[c] = i as u32;
            }
            // Cell of each pixel: the last cut at or before it.
            let mut cell = vec![0usize; n];
            let mut cur = 0;
            for (p, slot) in cell.iter_mut().enumerate() {
                if map[p] != NO_CUT {
                    cur = map[p] as usize;
                }
                *slot = cur;
            }
            (map, cell, sorted.len())
        };
        let (x_cut, x_cell, nx) = index(xs, w);
        let (y_cut, y_cell, ny) = index(ys, h);

        let raw = img.as_raw();
        let intensity: Vec<f64> = raw
            .chunks_exact(3)
            .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0))
            .collect();

        // Per-cell sums; cell (j, i) lies between cuts j..j+1 and i..i+1 and is
        // stored at table position (j + 1, i + 1) before the prefix pass.
        let stride = nx * CHANNELS;
        let mut tables = vec![0.0; ny * stride];
        for y in 0..h {
            let row_base = (y_cell[y] + 1) * stride;
            let up = if y == 0 { 0 } else { y - 1 };
            let down = (y + 1).min(h - 1);
            for x in 0..w {
                let base = row_base + (x_cell[x] + 1) * CHANNELS;
                let o = y * w + x;
                let p = &raw[o * 3..o * 3 + 3];
                for c in 0..3 {
                    tables[base + c * COLOR_BINS + (p[c] as usize * COLOR_BINS / 256)] += 1.0;
                }
                let left = if x == 0 { 0 } else { x - 1 };
                let right = (x + 1).min(w - 1);
                let gx = 0.5 * (intensity[y * w + right] - intensity[y * w + left]);
                let gy = 0.5 * (intensity[down * w + x] - intensity[up * w + x]);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag > 1e-12 {
                    tables[base + ORIENT_OFFSET + orientation_bin(gx, gy)] += mag;
                }
                let i = intensity[o];
                tables[base + SUM_I] += i;
                tables[base + SUM_I2] += i * i;
            }
        }
        // Two-dimensional prefix sums in place.
        for j in 1..ny {
            for i in 1..nx {
                let dst = j * stride + i * CHANNELS;
                let left = dst - CHANNELS;
                let up = dst - stride;
                let diag = up - CHANNELS;
                for c in 0..CHANNELS {
                    tables[dst + c] += tables[left + c] + tables[up + c] - tables[diag + c];
                }
            }
        }
        FeatureMap { width: w, height: h, x_cut, y_cut, nx, tables }
    }

    /// Integer pixel rectangle covered by `region`, never empty.
    fn pixel_rect(&self, region: &BBox) -> (usize, usize, usize, usize) {
        let (x0, x1) = pixel_span(region.x_min, region.x_max, self.width);
        let (y0, y1) = pixel_span(region.y_min, region.y_max, self.height);
        (x0, y0, x1, y1)
    }

    fn rect_sums(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> [f64; CHANNELS] {
        let cut = |map: &[u32], p: usize| {
            let c = map[p];
            assert!(c != NO_CUT, "region edge {p} is not a cut of this feature map");
            c as usize
        };
        let (i0, i1) = (cut(&self.x_cut, x0), cut(&self.x_cut, x1));
        let (j0, j1) = (cut(&self.y_cut, y0), cut(&self.y_cut, y1));
        let stride = self.nx * CHANNELS;
        let idx = |i: usize, j: usize| j * stride + i * CHANNELS;
        let (a, b, c, d) = (idx(i0, j0), idx(i1, j0), idx(i0, j1), idx(i1, j1));
        let mut out = [0.0; CHANNELS];
        for k in 0..CHANNELS {
            out[k] = self.tables[d + k] - self.tables[b + k] - self.tables[c + k] + self.tables[a + k];
        }
        out
    }

    pub fn describe(&self, region: &BBox) -> Descriptor {
        let (x0, y0, x1, y1) = self.pixel_rect(region);
        let s = self.rect_sums(x0, y0, x1, y1);
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        let mut d = [0.0; DESCRIPTOR_DIM];
        for k in 0..ORIENT_OFFSET {
            d[k] = (s[k] / n).clamp(0.0, 1.0);
        }
        let total: f64 = s[ORIENT_OFFSET..SUM_I].iter().sum();
        if total > 1e-12 {
            for k in ORIENT_OFFSET..SUM_I {
                d[k] = (s[k] / total).clamp(0.0, 1.0);
            }
        }
        let mean = s[SUM_I] / n;
        let var = (s[SUM_I2] / n - mean * mean).max(0.0);
        d[SUM_I] = mean.clamp(0.0, 1.0);
        d[SUM_I2] = (4.0 * var).clamp(0.0, 1.0);
        let (cx, cy) = region.center();
        let (fw, fh) = (self.width as f64, self.height as f64);
        d[SUM_I2 + 1] = (cx / fw).clamp(0.0, 1.0);
        d[SUM_I2 + 2] = (cy / fh).clamp(0.0, 1.0);
        d[SUM_I2 + 3] = (region.width() / fw).clamp(0.0, 1.0);
        d[SUM_I2 + 4] = (region.height() / fh).clamp(0.0, 1.0);
        Descriptor(d)
    }

    /// Descriptors for the selected anchors, one row each.
    pub fn describe_rows(&self, anchors: &[BBox], selection: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((selection.len(), DESCRIPTOR_DIM));
        for (row, &i) in selection.iter().enumerate() {
            let d = self.describe(&anchors[i]);
            out.row_mut(row).assign(&ndarray::ArrayView1::from(&d.0[..]));
        }
        out
    }

    pub fn describe_all(&self, anchors: &[BBox]) -> Array2<f64> {
        let all: Vec<usize> = (0..anchors.len()).collect();
        self.describe_rows(anchors, &all)
    }
}

/// Descriptor of one region. Builds a fresh [`FeatureMap`]; prefer the map
/// when describing many regions of one image.
pub fn describe(image: &RgbImage, region: &BBox) -> Descriptor {
    FeatureMap::new(image).describe(region)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::box_hflip;
    use image::Rgb;
    use rand::{Rng, SeedableRng};

    fn noisy(seed: u64) -> RgbImage {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(40, 30, |_, _| Rgb([r.random(), r.random(), r.random()]))
    }

    fn brute_color_hist(img: &RgbImage, x0: u32, y0: u32, x1: u32, y1: u32) -> Vec<f64> {
        let mut h = vec![0.0; 24];
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = img.get_pixel(x, y);
                for c in 0..3 {
                    h[c * 8 + p[c] as usize / 32] += 1.0 / n;
                }
            }
        }
        h
    }

    #[test]
    fn uniform_region() {
        let img = RgbImage::from_pixel(32, 32, Rgb([128, 128, 128]));
        let d = describe(&img, &BBox::new(4.0, 4.0, 20.0, 20.0).unwrap());
        // 128 / 32 = bin 4 in every channel.
        for c in 0..3 {
            for b in 0..8 {
                let want = if b == 4 { 1.0 } else { 0.0 };
                assert!((d.color_histogram()[c * 8 + b] - want).abs() < 1e-12);
            }
        }
        assert!(d.orientation_histogram().iter().all(|&v| v == 0.0));
        assert!(d.variance().abs() < 1e-12);
        assert!((d.mean_intensity() - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_histogram() {
        let img = noisy(3);
        let d = describe(&img, &BBox::new(5.0, 7.0, 33.0, 22.0).unwrap());
        let brute = brute_color_hist(&img, 5, 7, 33, 22);
        for (a, b) in d.color_histogram().iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
        let s: f64 = d.orientation_histogram().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(d.0.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_and_reflection_invariant_color() {
        let img = noisy(9);
        let region = BBox::new(3.0, 2.0, 17.0, 25.0).unwrap();
        assert_eq!(describe(&img, &region), describe(&img, &region));
        let flipped = image::imageops::flip_horizontal(&img);
        let fr = box_hflip(&region, 40.0);
        let a = describe(&img, &region);
        let b = describe(&flipped, &fr);
        // Summed-area lookups differ only by rounding between the two layouts.
        for (x, y) in a.color_histogram().iter().zip(b.color_histogram()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.mean_intensity() - b.mean_intensity()).abs() < 1e-12);
    }

    #[test]
    fn rows_match_single_descriptors() {
        let img = noisy(1);
        let fm = FeatureMap::new(&img);
        let anchors = vec![BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), BBox::new(20.0, 5.0, 40.0, 30.0).unwrap()];
        let rows = fm.describe_all(&anchors);
        assert_eq!(rows.dim(), (2, DESCRIPTOR_DIM));
        assert_eq!(rows.row(1).to_vec(), fm.describe(&anchors[1]).0.to_vec());
    }

    #[test]
    fn region_restricted_map_agrees_with_full_map() {
        let img = noisy(4);
        let regions = vec![
            BBox::new(0.0, 0.0, 10.4, 10.0).unwrap(),
            BBox::new(12.6, 5.0, 40.0, 29.5).unwrap(),
            BBox::new(3.2, 7.7, 21.0, 18.1).unwrap(),
        ];
        let full = FeatureMap::new(&img);
        let cut = FeatureMap::for_regions(&img, &regions);
        for r in &regions {
            let (a, b) = (full.describe(r), cut.describe(r));
            for (x, y) in a.0.iter().zip(&b.0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orientation_bins_match_angle_octants() {
        for k in 0..64 {
            let a = -std::f64::consts::PI + (k as f64 + 0.5) * std::f64::consts::TAU / 64.0;
            let want = ((a + std::f64::consts::PI) / std::f64::consts::FRAC_PI_4) as usize;
            assert_eq!(orientation_bin(a.cos(), a.sin()), want, "angle {a}");
        }
    }
}
