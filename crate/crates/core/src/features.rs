//! Keypoint detection, binary description and matching.
//!
//! The shipped extractor belongs to the ORB family: Harris-scored corners
//! over an 8-level scale pyramid, orientation from the intensity centroid
//! of a circular patch, and a 256-bit steered binary intensity-test
//! descriptor compared by Hamming distance. Other detectors can be plugged
//! in through [`FeatureExtractor`].

use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Correspondence, Point2};

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: u32 = 32;
pub const DESCRIPTOR_BYTES: usize = 32;
pub const DESCRIPTOR_BITS: u32 = 256;

const PATCH_RADIUS: i32 = 15;
/// Keeps rotated test pairs and the orientation patch inside the level.
const EDGE_MARGIN: i32 = 22;
const HARRIS_K: f32 = 0.04;
const NMS_RADIUS: i32 = 2;
const PATTERN_SEED: u64 = 0x5eed_0b1f;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image {width}x{height} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("pixel buffer has {got} bytes, expected {expected}")]
    BadBuffer { expected: usize, got: usize },
    #[error("cannot read image {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Row-major 8-bit luminance image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGray {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl ImageGray {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, FeatureError> {
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(FeatureError::ImageTooSmall { width, height });
        }
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(FeatureError::BadBuffer {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> u8,
    ) -> Result<Self, FeatureError> {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Decodes PNG or binary PGM. Color input is reduced to luminance
    /// `Y = 0.299 R + 0.587 G + 0.114 B`, rounded to nearest.
    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let decoded = image::open(path).map_err(|source| FeatureError::Decode {
            path: path.display().to_string(),
            source,
        })?;
        let (width, height) = (decoded.width(), decoded.height());
        let data = match decoded {
            image::DynamicImage::ImageLuma8(g) => g.into_raw(),
            other => other
                .to_rgb8()
                .pixels()
                .map(|p| luminance(p.0[0], p.0[1], p.0[2]))
                .collect(),
        };
        Self::new(width, height, data)
    }

    /// Writes an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), FeatureError> {
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width,
            self.height,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|source| FeatureError::Encode {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Integer luminance, exact half-up rounding.
pub fn luminance(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Position in full-resolution pixels.
    pub x: f32,
    pub y: f32,
    /// Patch diameter in full-resolution pixels.
    pub scale: f32,
    /// Radians in `[0, 2π)`.
    pub orientation: f32,
    pub response: f32,
}

impl Keypoint {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x as f64, self.y as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor(pub [u8; DESCRIPTOR_BYTES]);

impl Descriptor {
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0
            .chunks_exact(8)
            .zip(other.0.chunks_exact(8))
            .map(|(a, b)| {
                let a = u64::from_le_bytes(a.try_into().unwrap());
                let b = u64::from_le_bytes(b.try_into().unwrap());
                (a ^ b).count_ones()
            })
            .sum()
    }

    pub fn complement(&self) -> Descriptor {
        Descriptor(self.0.map(|b| !b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub keypoint: Keypoint,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub max_keypoints: usize,
    /// Minimum Harris response, intensities scaled to `[0, 1]`.
    pub threshold: f32,
    pub levels: usize,
    pub scale_factor: f32,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            max_keypoints: 1000,
            threshold: 1e-6,
            levels: 8,
            scale_factor: 1.2,
        }
    }
}

/// Anything that turns an image into keypoints with binary descriptors.
pub trait FeatureExtractor: Sync {
    fn detect_and_describe(&self, img: &ImageGray) -> Result<Vec<Feature>, FeatureError>;
}

/// Native multi-scale oriented binary extractor.
#[derive(Debug, Clone, Default)]
pub struct OrbExtractor {
    pub params: FeatureParams,
}

impl OrbExtractor {
    pub fn new(params: FeatureParams) -> Self {
        Self { params }
    }
}

impl FeatureExtractor for OrbExtractor {
    fn detect_and_describe(&self, img: &ImageGray) -> Result<Vec<Feature>, FeatureError> {
        detect_and_describe(img, &self.params)
    }
}

/// Float image used inside the pyramid.
#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    fn from_gray(img: &ImageGray) -> Self {
        Self {
            w: img.width as usize,
            h: img.height as usize,
            data: img.data.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    fn clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.at(x, y)
    }

    fn bilinear(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bot = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    fn resize(&self, w: usize, h: usize) -> Plane {
        let fx = self.w as f32 / w as f32;
        let fy = self.h as f32 / h as f32;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let sy = (y as f32 + 0.5) * fy - 0.5;
            for x in 0..w {
                let sx = (x as f32 + 0.5) * fx - 0.5;
                data.push(self.bilinear(sx, sy));
            }
        }
        Plane { w, h, data }
    }

    fn gaussian_blur(&self, sigma: f32) -> Plane {
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);

        let (w, h) = (self.w, self.h);
        let r = radius as usize;
        let mut padded = vec![0.0f32; w + 2 * r];
        let mut tmp = vec![0.0f32; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            padded[..r].fill(row[0]);
            padded[r..r + w].copy_from_slice(row);
            padded[r + w..].fill(row[w - 1]);
            for (out, win) in tmp[y * w..(y + 1) * w].iter_mut().zip(padded.windows(kernel.len())) {
                let mut acc = 0.0;
                for (wgt, v) in kernel.iter().zip(win) {
                    acc += wgt * v;
                }
                *out = acc;
            }
        }
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            let dst = &mut out[y * w..(y + 1) * w];
            for (k, wgt) in kernel.iter().enumerate() {
                let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                let src = &tmp[sy * w..(sy + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
        Plane { w, h, data: out }
    }
}

/// Harris corner measure from Sobel gradients and a Gaussian window.
fn harris_response(p: &Plane) -> Plane {
    let (w, h) = (p.w, p.h);
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h {
        let interior_row = y > 0 && y + 1 < h;
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let interior = interior_row && x > 0 && x + 1 < w;
            let g = |dx: isize, dy: isize| {
                if interior {
                    p.data[(yi + dy) as usize * w + (xi + dx) as usize]
                } else {
                    p.clamped(xi + dx, yi + dy)
                }
            };
            let gx = (g(1, -1) + 2.0 * g(1, 0) + g(1, 1) - g(-1, -1) - 2.0 * g(-1, 0) - g(-1, 1))
                / 8.0;
            let gy = (g(-1, 1) + 2.0 * g(0, 1) + g(1, 1) - g(-1, -1) - 2.0 * g(0, -1) - g(1, -1))
                / 8.0;
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let sxx = Plane { w, h, data: ixx }.gaussian_blur(1.5);
    let syy = Plane { w, h, data: iyy }.gaussian_blur(1.5);
    let sxy = Plane { w, h, data: ixy }.gaussian_blur(1.5);
    let data = (0..w * h)
        .map(|i| {
            let (a, b, c) = (sxx.data[i], syy.data[i], sxy.data[i]);
            let tr = a + b;
            a * b - c * c - HARRIS_K * tr * tr
        })
        .collect();
    Plane { w, h, data }
}

/// Half-widths of the rows of a disc of radius [`PATCH_RADIUS`].
fn disc_half_widths() -> &'static [i32] {
    static UMAX: OnceLock<Vec<i32>> = OnceLock::new();
    UMAX.get_or_init(|| {
        (0..=PATCH_RADIUS)
            .map(|v| {
                let r2 = (PATCH_RADIUS * PATCH_RADIUS - v * v) as f64;
                r2.sqrt().round() as i32
            })
            .collect()
    })
}

/// Fixed sampling pattern of 256 point pairs inside the 31×31 patch,
/// isotropic Gaussian with σ = 31/5, clipped to the patch.
fn test_pattern() -> &'static [[f32; 4]] {
    static PATTERN: OnceLock<Vec<[f32; 4]>> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
        let normal = Normal::new(0.0f64, 31.0 / 5.0).unwrap();
        let lim = PATCH_RADIUS as f64;
        let draw = |rng: &mut ChaCha8Rng| normal.sample(rng).round().clamp(-lim, lim) as f32;
        let mut pairs = Vec::with_capacity(DESCRIPTOR_BITS as usize);
        while pairs.len() < DESCRIPTOR_BITS as usize {
            let pair = [draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng)];
            if pair[0] != pair[2] || pair[1] != pair[3] {
                pairs.push(pair);
            }
        }
        pairs
    })
}

fn orientation(p: &Plane, cx: usize, cy: usize) -> f32 {
    let umax = disc_half_widths();
    let (mut m01, mut m10) = (0.0f64, 0.0f64);
    for v in -PATCH_RADIUS..=PATCH_RADIUS {
        let d = umax[v.unsigned_abs() as usize];
        for u in -d..=d {
            let val = p.at((cx as i32 + u) as usize, (cy as i32 + v) as usize) as f64;
            m10 += u as f64 * val;
            m01 += v as f64 * val;
        }
    }
    let a = m01.atan2(m10) as f32;
    let two_pi = std::f32::consts::TAU;
    let a = if a < 0.0 { a + two_pi } else { a };
    if a >= two_pi {
        0.0
    } else {
        a
    }
}

fn describe(smooth: &Plane, cx: usize, cy: usize, angle: f32) -> Descriptor {
    let (s, c) = angle.sin_cos();
    let sample = |px: f32, py: f32| {
        let rx = (c * px - s * py).round() as isize;
        let ry = (s * px + c * py).round() as isize;
        smooth.at((cx as isize + rx) as usize, (cy as isize + ry) as usize)
    };
    let mut bytes = [0u8; DESCRIPTOR_BYTES];
    for (i, pair) in test_pattern().iter().enumerate() {
        if sample(pair[0], pair[1]) < sample(pair[2], pair[3]) {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    Descriptor(bytes)
}

/// Local maxima of the response above `threshold`. Equal neighbours are
/// resolved in raster order so a flat 2×2 peak yields one maximum.
fn local_maxima(resp: &Plane, threshold: f32) -> Vec<(usize, usize, f32)> {
    let mut out = Vec::new();
    let (w, h) = (resp.w as i32, resp.h as i32);
    if w <= 2 * EDGE_MARGIN || h <= 2 * EDGE_MARGIN {
        return out;
    }
    for y in EDGE_MARGIN..h - EDGE_MARGIN {
        'px: for x in EDGE_MARGIN..w - EDGE_MARGIN {
            let v = resp.at(x as usize, y as usize);
            if !(v > threshold) {
                continue;
            }
            for dy in -NMS_RADIUS..=NMS_RADIUS {
                for dx in -NMS_RADIUS..=NMS_RADIUS {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = resp.at((x + dx) as usize, (y + dy) as usize);
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if n > v || (earlier && n == v) {
                        continue 'px;
                    }
                }
            }
            out.push((x as usize, y as usize, v));
        }
    }
    out
}

/// Vertex offset of a parabola through three samples, clamped to ±0.5.
fn parabolic_offset(l: f32, c: f32, r: f32) -> f32 {
    let denom = l - 2.0 * c + r;
    if denom.abs() < f32::EPSILON {
        return 0.0;
    }
    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
}

/// Detects up to `params.max_keypoints` oriented keypoints, sorted by
/// descending response.
pub fn detect_and_describe(
    img: &ImageGray,
    params: &FeatureParams,
) -> Result<Vec<Feature>, FeatureError> {
    if img.width < MIN_IMAGE_SIDE || img.height < MIN_IMAGE_SIDE {
        return Err(FeatureError::ImageTooSmall {
            width: img.width,
            height: img.height,
        });
    }
    let levels = params.levels.max(1);
    let inv = 1.0 / params.scale_factor.max(1.0 + 1e-3);
    let per_level_share = if (1.0 - inv.powi(levels as i32)).abs() > 0.0 {
        (1.0 - inv) / (1.0 - inv.powi(levels as i32))
    } else {
        1.0 / levels as f32
    };

    let base = Plane::from_gray(img);
    let mut level_plane = base.clone();
    let mut features = Vec::new();
    for level in 0..levels {
        if level > 0 {
            let s = params.scale_factor.powi(level as i32);
            let w = (base.w as f32 / s).round() as usize;
            let h = (base.h as f32 / s).round() as usize;
            if w <= 2 * EDGE_MARGIN as usize + 2 || h <= 2 * EDGE_MARGIN as usize + 2 {
                break;
            }
            level_plane = level_plane.resize(w, h);
        }
        let sx = base.w as f32 / level_plane.w as f32;
        let sy = base.h as f32 / level_plane.h as f32;
        let budget = ((params.max_keypoints as f32) * per_level_share * inv.powi(level as i32))
            .ceil() as usize;

        let resp = harris_response(&level_plane);
        let mut peaks = local_maxima(&resp, params.threshold);
        peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
        peaks.truncate(budget);
        if peaks.is_empty() {
            continue;
        }
        let smooth = level_plane.gaussian_blur(2.0);
        for (x, y, r) in peaks {
            let ox = parabolic_offset(resp.at(x - 1, y), r, resp.at(x + 1, y));
            let oy = parabolic_offset(resp.at(x, y - 1), r, resp.at(x, y + 1));
            let angle = orientation(&level_plane, x, y);
            let descriptor = describe(&smooth, x, y, angle);
            features.push(Feature {
                keypoint: Keypoint {
                    x: (x as f32 + ox + 0.5) * sx - 0.5,
                    y: (y as f32 + oy + 0.5) * sy - 0.5,
                    scale: (2 * PATCH_RADIUS + 1) as f32 * sx,
                    orientation: angle,
                    response: r,
                },
                descriptor,
            });
        }
    }

    features.sort_by(|a, b| {
        b.keypoint
            .response
            .total_cmp(&a.keypoint.response)
            .then(a.keypoint.y.total_cmp(&b.keypoint.y))
            .then(a.keypoint.x.total_cmp(&b.keypoint.x))
            .then(a.keypoint.scale.total_cmp(&b.keypoint.scale))
    });
    features.truncate(params.max_keypoints);
    Ok(features)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorMatch {
    /// Index into the first set.
    pub query: usize,
    /// Index into the second set.
    pub train: usize,
    pub distance: u32,
}

#[derive(Clone, Copy)]
struct Best2 {
    idx: usize,
    best: u32,
    second: u32,
}

impl Best2 {
    const EMPTY: Best2 = Best2 {
        idx: usize::MAX,
        best: u32::MAX,
        second: u32::MAX,
    };

    #[inline]
    fn push(&mut self, idx: usize, d: u32) {
        if d < self.best {
            self.second = self.best;
            self.best = d;
            self.idx = idx;
        } else if d < self.second {
            self.second = d;
        }
    }

    fn passes_ratio(&self, ratio: f32) -> bool {
        self.second == u32::MAX || (self.best as f32) < ratio * self.second as f32
    }
}

/// Mutual nearest neighbours that pass the ratio test from both sides,
/// sorted by ascending distance.
pub fn match_descriptors(a: &[Descriptor], b: &[Descriptor], ratio: f32) -> Vec<DescriptorMatch> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut rows = vec![Best2::EMPTY; a.len()];
    let mut cols = vec![Best2::EMPTY; b.len()];
    for (i, da) in a.iter().enumerate() {
        let row = &mut rows[i];
        for (j, db) in b.iter().enumerate() {
            let d = da.hamming(db);
            row.push(j, d);
            cols[j].push(i, d);
        }
    }
    let mut out: Vec<DescriptorMatch> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let j = row.idx;
            (cols[j].idx == i && row.passes_ratio(ratio) && cols[j].passes_ratio(ratio)).then_some(
                DescriptorMatch {
                    query: i,
                    train: j,
                    distance: row.best,
                },
            )
        })
        .collect();
    out.sort_by_key(|m| (m.distance, m.query));
    out
}

/// Matches two feature sets into point correspondences `a → b`.
pub fn match_features(a: &[Feature], b: &[Feature], ratio: f32) -> Vec<Correspondence> {
    let da: Vec<Descriptor> = a.iter().map(|f| f.descriptor).collect();
    let db: Vec<Descriptor> = b.iter().map(|f| f.descriptor).collect();
    match_descriptors(&da, &db, ratio)
        .into_iter()
        .map(|m| {
            Correspondence::new(
                a[m.query].keypoint.position(),
                b[m.train].keypoint.position(),
                m.distance,
            )
        })
        .collect()
}

/// Number of accepted matches between two feature sets.
pub fn match_score(a: &[Feature], b: &[Feature], ratio: f32) -> usize {
    let da: Vec<Descriptor> = a.iter().map(|f| f.descriptor).collect();
    let db: Vec<Descriptor> = b.iter().map(|f| f.descriptor).collect();
    match_descriptors(&da, &db, ratio).len()
}

/// Default Lowe ratio.
pub const DEFAULT_RATIO: f32 = 0.8;
