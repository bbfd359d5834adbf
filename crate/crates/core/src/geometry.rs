//! Planar projective geometry.
//!
//! Homographies are estimated with the normalized direct linear transform
//! and wrapped in a seeded RANSAC loop for match sets that contain
//! outliers. Points use image coordinates: origin at the top-left pixel,
//! `y` increasing downward.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `|w'|` below this maps a point to the line at infinity.
const W_EPS: f64 = 1e-12;
/// Relative size of the second-smallest singular value below which the
/// DLT system is treated as rank deficient.
const RANK_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point configuration (collinear or coincident points)")]
    DegenerateConfiguration,
    #[error("no consensus: best model has {found} inliers, need {needed}")]
    NoConsensus { found: usize, needed: usize },
    #[error("point maps to the line at infinity")]
    PointAtInfinity,
    #[error("matrix is not an invertible homography")]
    Singular,
    #[error("inverted or empty box [{0}, {1}, {2}, {3}]")]
    InvertedBox(f64, f64, f64, f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A point pair produced by descriptor matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src: Point2,
    pub dst: Point2,
    /// Descriptor distance (Hamming bits).
    pub distance: u32,
}

impl Correspondence {
    pub fn new(src: Point2, dst: Point2, distance: u32) -> Self {
        Self { src, dst, distance }
    }
}

/// Unit Frobenius norm, nonnegative lower-right entry. A matrix that is
/// already normalized comes back unchanged, so reloading a stored
/// homography is exact.
fn normalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let norm = m.norm();
    let mut n = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON { m } else { m / norm };
    if n[(2, 2)] < 0.0 {
        n = -n;
    }
    n
}

/// Invertible 3×3 projective map, stored with unit Frobenius norm and a
/// nonnegative lower-right entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[[f64; 3]; 3]", try_from = "[[f64; 3]; 3]")]
pub struct Homography33(Matrix3<f64>);

impl Homography33 {
    pub fn identity() -> Self {
        Self::from_matrix(Matrix3::identity()).expect("identity is invertible")
    }

    /// Normalizes `m` and checks it is finite and invertible.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if m.norm() == 0.0 {
            return Err(GeometryError::Singular);
        }
        let n = normalize(m);
        if n.determinant().abs() < 1e-15 {
            return Err(GeometryError::Singular);
        }
        Ok(Self(n))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_rows([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
            .expect("translation is invertible")
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    /// Rescales without the conditioning check. Used for results that are
    /// invertible whenever the inputs are, however badly conditioned.
    fn renormalized(m: Matrix3<f64>) -> Self {
        assert!(m.iter().all(|v| v.is_finite()), "non-finite homography");
        Self(normalize(m))
    }

    pub fn inverse(&self) -> Self {
        let inv = self.0.try_inverse().expect("homography invariant: invertible");
        Self::renormalized(inv)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography33) -> Self {
        Self::renormalized(self.0 * other.0)
    }

    pub fn apply(&self, p: Point2) -> Result<Point2, GeometryError> {
        transform_point(self, p)
    }

    /// Frobenius distance between two normalized homographies.
    pub fn distance(&self, other: &Homography33) -> f64 {
        (self.0 - other.0).norm()
    }
}

impl From<Homography33> for [[f64; 3]; 3] {
    fn from(h: Homography33) -> Self {
        h.to_rows()
    }
}

impl TryFrom<[[f64; 3]; 3]> for Homography33 {
    type Error = GeometryError;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self, Self::Error> {
        Self::from_rows(rows)
    }
}

/// Axis-aligned rectangle in pixel coordinates; `(x_min, y_min)` is the
/// upper-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvertedBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2 {
        Point2::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Strict containment: points on the boundary are outside.
    pub fn contains(&self, p: Point2) -> bool {
        p.x > self.x_min && p.x < self.x_max && p.y > self.y_min && p.y < self.y_max
    }

    /// Upper-left, upper-right, lower-right, lower-left.
    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.x_min, self.y_min),
            Point2::new(self.x_max, self.y_min),
            Point2::new(self.x_max, self.y_max),
            Point2::new(self.x_min, self.y_max),
        ]
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Intersection with `[0, width] × [0, height]`, or `None` when empty.
    pub fn clip(&self, width: f64, height: f64) -> Option<BoundingBox> {
        BoundingBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        )
        .ok()
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Maps `p` through `h` and dehomogenizes.
pub fn transform_point(h: &Homography33, p: Point2) -> Result<Point2, GeometryError> {
    if !p.is_finite() {
        return Err(GeometryError::NonFinite);
    }
    let v = h.0 * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() < W_EPS {
        return Err(GeometryError::PointAtInfinity);
    }
    Ok(Point2::new(v.x / v.z, v.y / v.z))
}

/// Axis-aligned hull of the four transformed corners.
pub fn transform_box(h: &Homography33, b: &BoundingBox) -> Result<BoundingBox, GeometryError> {
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for c in b.corners() {
        let q = transform_point(h, c)?;
        x_min = x_min.min(q.x);
        y_min = y_min.min(q.y);
        x_max = x_max.max(q.x);
        y_max = y_max.max(q.y);
    }
    BoundingBox::new(x_min, y_min, x_max, y_max)
}

/// Forward plus backward transfer distance of one correspondence.
pub fn symmetric_transfer_error(h: &Homography33, h_inv: &Homography33, c: &Correspondence) -> f64 {
    let fwd = match transform_point(h, c.src) {
        Ok(p) => p.distance(&c.dst),
        Err(_) => return f64::INFINITY,
    };
    let bwd = match transform_point(h_inv, c.dst) {
        Ok(p) => p.distance(&c.src),
        Err(_) => return f64::INFINITY,
    };
    fwd + bwd
}

/// RMS of forward transfer errors `|H src - dst|` over `corr`.
pub fn rms_transfer_error(h: &Homography33, corr: &[Correspondence]) -> f64 {
    if corr.is_empty() {
        return 0.0;
    }
    let sum: f64 = corr
        .iter()
        .map(|c| match transform_point(h, c.src) {
            Ok(p) => {
                let d = p.distance(&c.dst);
                d * d
            }
            Err(_) => f64::INFINITY,
        })
        .sum();
    (sum / corr.len() as f64).sqrt()
}

/// Similarity that moves the centroid to the origin and the mean distance
/// from it to √2.
fn hartley_normalizer(pts: &[Point2]) -> Result<Matrix3<f64>, GeometryError> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply_affine(t: &Matrix3<f64>, p: &Point2) -> (f64, f64) {
    (
        t[(0, 0)] * p.x + t[(0, 2)],
        t[(1, 1)] * p.y + t[(1, 2)],
    )
}

/// Least-squares homography mapping each `src` onto its `dst`.
pub fn estimate_homography_dlt(corr: &[Correspondence]) -> Result<Homography33, GeometryError> {
    if corr.len() < 4 {
        return Err(GeometryError::TooFewPoints(corr.len()));
    }
    if corr.iter().any(|c| !c.src.is_finite() || !c.dst.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let src: Vec<Point2> = corr.iter().map(|c| c.src).collect();
    let dst: Vec<Point2> = corr.iter().map(|c| c.dst).collect();
    let t_src = hartley_normalizer(&src)?;
    let t_dst = hartley_normalizer(&dst)?;

    let n = corr.len();
    // Zero rows pad the 4-point system to square so the SVD exposes the
    // full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let (sx, sy) = apply_affine(&t_src, &src[i]);
        let (dx, dy) = apply_affine(&t_dst, &dst[i]);
        let r = 2 * i;
        a[(r, 3)] = -sx;
        a[(r, 4)] = -sy;
        a[(r, 5)] = -1.0;
        a[(r, 6)] = dy * sx;
        a[(r, 7)] = dy * sy;
        a[(r, 8)] = dy;
        a[(r + 1, 0)] = sx;
        a[(r + 1, 1)] = sy;
        a[(r + 1, 2)] = 1.0;
        a[(r + 1, 6)] = -dx * sx;
        a[(r + 1, 7)] = -dx * sy;
        a[(r + 1, 8)] = -dx;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or(GeometryError::DegenerateConfiguration)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let s_max = svd.singular_values[order[order.len() - 1]];
    let s_second = svd.singular_values[order[1]];
    if !(s_max > 0.0) || s_second / s_max < RANK_EPS {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let row = v_t.row(order[0]);
    let h_norm = Matrix3::new(
        row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7], row[8],
    );
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or(GeometryError::DegenerateConfiguration)?;
    Homography33::from_matrix(t_dst_inv * h_norm * t_src)
        .map_err(|_| GeometryError::DegenerateConfiguration)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Symmetric transfer error below which a correspondence is an inlier.
    pub inlier_threshold_px: f64,
    pub max_iterations: usize,
    /// Probability of drawing at least one all-inlier sample; drives the
    /// adaptive iteration bound.
    pub confidence: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            inlier_threshold_px: 3.0,
            max_iterations: 2000,
            confidence: 0.995,
            min_inliers: 15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub homography: Homography33,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub iterations: usize,
}

fn collinear(a: &Point2, b: &Point2, c: &Point2) -> bool {
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let scale = a.distance(b).max(a.distance(c)).max(b.distance(c));
    cross.abs() <= 1e-9 * scale * scale
}

fn any_three_collinear(p: &[Point2; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| collinear(&p[t[0]], &p[t[1]], &p[t[2]]))
}

fn score(
    h: &Homography33,
    corr: &[Correspondence],
    threshold: f64,
    mask: &mut [bool],
) -> (usize, f64) {
    let h_inv = h.inverse();
    let mut count = 0;
    let mut err_sum = 0.0;
    for (c, m) in corr.iter().zip(mask.iter_mut()) {
        let e = symmetric_transfer_error(h, &h_inv, c);
        *m = e < threshold;
        if *m {
            count += 1;
            err_sum += e;
        }
    }
    (count, err_sum)
}

fn adaptive_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w4 = inlier_ratio.powi(4);
    if w4 >= 1.0 {
        return 1;
    }
    if w4 <= f64::EPSILON {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - w4).ln()).ceil();
    if n.is_finite() && n >= 1.0 {
        (n as usize).min(cap)
    } else {
        cap
    }
}

/// Robust homography from correspondences that may contain outliers.
///
/// Deterministic for a given `params.seed`.
pub fn estimate_homography_ransac(
    corr: &[Correspondence],
    params: &RansacParams,
) -> Result<RansacResult, GeometryError> {
    let n = corr.len();
    if n < 4 {
        return Err(GeometryError::TooFewPoints(n));
    }
    let needed = params.min_inliers.max(4);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut mask = vec![false; n];
    let mut best: Option<(usize, f64, Homography33, Vec<bool>)> = None;
    let mut limit = params.max_iterations.max(1);
    let mut iterations = 0;

    while iterations < limit {
        iterations += 1;
        let idx = rand::seq::index::sample(&mut rng, n, 4);
        let sample: [Correspondence; 4] = std::array::from_fn(|k| corr[idx.index(k)]);
        let src: [Point2; 4] = std::array::from_fn(|k| sample[k].src);
        let dst: [Point2; 4] = std::array::from_fn(|k| sample[k].dst);
        if any_three_collinear(&src) || any_three_collinear(&dst) {
            continue;
        }
        let Ok(h) = estimate_homography_dlt(&sample) else {
            continue;
        };
        let (count, err) = score(&h, corr, params.inlier_threshold_px, &mut mask);
        let better = match &best {
            None => true,
            Some((bc, be, _, _)) => count > *bc || (count == *bc && err < *be),
        };
        if better {
            best = Some((count, err, h, mask.clone()));
            limit = limit.min(adaptive_iterations(
                count as f64 / n as f64,
                params.confidence,
                params.max_iterations,
            ));
        }
    }

    let Some((count, _, mut h, mut best_mask)) = best else {
        return Err(GeometryError::NoConsensus {
            found: 0,
            needed,
        });
    };
    if count < needed {
        return Err(GeometryError::NoConsensus {
            found: count,
            needed,
        });
    }

    // Refit on the consensus set until it stops changing.
    for _ in 0..5 {
        let inliers: Vec<Correspondence> = corr
            .iter()
            .zip(&best_mask)
            .filter(|(_, &m)| m)
            .map(|(c, _)| *c)
            .collect();
        let Ok(refit) = estimate_homography_dlt(&inliers) else {
            break;
        };
        let (refit_count, _) = score(&refit, corr, params.inlier_threshold_px, &mut mask);
        if refit_count < inliers.len() && refit_count < needed {
            break;
        }
        h = refit;
        if mask == best_mask {
            break;
        }
        best_mask.copy_from_slice(&mask);
    }

    let inlier_count = best_mask.iter().filter(|&&m| m).count();
    Ok(RansacResult {
        homography: h,
        inliers: best_mask,
        inlier_count,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn stored_homography_reloads_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let h = Homography33::from_rows([
                [rng.random_range(0.5..1.5), rng.random_range(-0.3..0.3), rng.random_range(-40.0..40.0)],
                [rng.random_range(-0.3..0.3), rng.random_range(0.5..1.5), rng.random_range(-40.0..40.0)],
                [rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), 1.0],
            ])
            .unwrap();
            let text = serde_json::to_string(&h).unwrap();
            let back: Homography33 = serde_json::from_str(&text).unwrap();
            assert_eq!(back, h);
            assert_eq!(serde_json::to_string(&back).unwrap(), text);
        }
    }

    fn exact(h: &Homography33, pts: &[Point2]) -> Vec<Correspondence> {
        pts.iter()
            .map(|&p| Correspondence::new(p, transform_point(h, p).unwrap(), 0))
            .collect()
    }

    fn square4() -> Vec<Point2> {
        vec![
            Point2::new(10.0, 20.0),
            Point2::new(200.0, 15.0),
            Point2::new(210.0, 180.0),
            Point2::new(5.0, 170.0),
        ]
    }

    fn random_h(rng: &mut ChaCha8Rng) -> Homography33 {
        let a = rng.random_range(-0.3..0.3f64);
        let s = rng.random_range(0.8..1.2);
        Homography33::from_rows([
            [s * a.cos(), -s * a.sin(), rng.random_range(-30.0..30.0)],
            [s * a.sin(), s * a.cos(), rng.random_range(-30.0..30.0)],
            [
                rng.random_range(-5e-4..5e-4),
                rng.random_range(-5e-4..5e-4),
                1.0,
            ],
        ])
        .unwrap()
    }

    #[test]
    fn dlt_identity() {
        let h = estimate_homography_dlt(&exact(&Homography33::identity(), &square4())).unwrap();
        assert!(h.distance(&Homography33::identity()) <= 1e-9);
    }

    #[test]
    fn dlt_pure_scaling() {
        let truth = Homography33::from_rows([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
            .unwrap();
        let corr = exact(&truth, &square4());
        let h = estimate_homography_dlt(&corr).unwrap();
        assert!(h.distance(&truth) <= 1e-9);
        for c in &corr {
            assert!(transform_point(&h, c.src).unwrap().distance(&c.dst) <= 1e-9);
        }
    }

    #[test]
    fn dlt_noisy_fifty_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = random_h(&mut rng);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut corr = Vec::new();
        let mut clean = Vec::new();
        for _ in 0..50 {
            let p = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let q = transform_point(&truth, p).unwrap();
            clean.push(Correspondence::new(p, q, 0));
            let noisy = Point2::new(q.x + noise.sample(&mut rng), q.y + noise.sample(&mut rng));
            corr.push(Correspondence::new(p, noisy, 0));
        }
        let h = estimate_homography_dlt(&corr).unwrap();
        assert!(rms_transfer_error(&h, &clean) <= 1.0);
    }

    #[test]
    fn dlt_errors() {
        let corr = exact(&Homography33::identity(), &square4()[..3]);
        assert_eq!(
            estimate_homography_dlt(&corr),
            Err(GeometryError::TooFewPoints(3))
        );
        let line: Vec<Point2> = (0..5).map(|i| Point2::new(i as f64, 2.0 * i as f64)).collect();
        let corr = exact(&Homography33::identity(), &line);
        assert_eq!(
            estimate_homography_dlt(&corr),
            Err(GeometryError::DegenerateConfiguration)
        );
        let mut pts = square4();
        pts[3] = Point2::new(105.0, 17.5); // on the segment between the first two
        let corr = exact(&Homography33::identity(), &pts);
        assert_eq!(
            estimate_homography_dlt(&corr),
            Err(GeometryError::DegenerateConfiguration)
        );
    }

    #[test]
    fn ransac_rejects_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = random_h(&mut rng);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut corr = Vec::new();
        for i in 0..100 {
            let p = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let q = if i < 70 {
                let q = transform_point(&truth, p).unwrap();
                Point2::new(q.x + noise.sample(&mut rng), q.y + noise.sample(&mut rng))
            } else {
                Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
            };
            corr.push(Correspondence::new(p, q, 0));
        }
        let res = estimate_homography_ransac(&corr, &RansacParams::default()).unwrap();
        let recovered = res.inliers[..70].iter().filter(|&&m| m).count();
        assert!(recovered as f64 >= 0.95 * 70.0, "recovered {recovered}");
        let truth_inv = truth.inverse();
        for (c, &m) in corr[70..].iter().zip(&res.inliers[70..]) {
            if m {
                // An accepted outlier must agree with the true model anyway.
                assert!(symmetric_transfer_error(&truth, &truth_inv, c) < 4.0);
            }
        }
    }

    #[test]
    fn ransac_all_inliers_equals_dlt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_h(&mut rng);
        let pts: Vec<Point2> = (0..40)
            .map(|_| Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
            .collect();
        let corr = exact(&truth, &pts);
        let res = estimate_homography_ransac(&corr, &RansacParams::default()).unwrap();
        assert_eq!(res.inlier_count, 40);
        let dlt = estimate_homography_dlt(&corr).unwrap();
        assert!(res.homography.distance(&dlt) <= 1e-9);
    }

    #[test]
    fn ransac_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corr: Vec<Correspondence> = (0..10)
            .map(|_| {
                Correspondence::new(
                    Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                    Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                    0,
                )
            })
            .collect();
        assert!(matches!(
            estimate_homography_ransac(&corr, &RansacParams::default()),
            Err(GeometryError::NoConsensus { needed: 15, .. })
        ));
        assert_eq!(
            estimate_homography_ransac(&corr[..3], &RansacParams::default()),
            Err(GeometryError::TooFewPoints(3))
        );
    }

    #[test]
    fn point_transforms() {
        let p = transform_point(&Homography33::identity(), Point2::new(120.0, 340.0)).unwrap();
        assert!(p.distance(&Point2::new(120.0, 340.0)) < 1e-12);
        let t = Homography33::translation(10.0, -5.0);
        let p = transform_point(&t, Point2::new(0.0, 0.0)).unwrap();
        assert!(p.distance(&Point2::new(10.0, -5.0)) < 1e-12);
        let s = Homography33::from_rows([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
            .unwrap();
        let p = transform_point(&s, Point2::new(10.0, 20.0)).unwrap();
        assert!(p.distance(&Point2::new(20.0, 40.0)) < 1e-12);
    }

    #[test]
    fn point_at_infinity() {
        let h = Homography33::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.01, 0.0, 1.0]])
            .unwrap();
        assert_eq!(
            transform_point(&h, Point2::new(-100.0, 5.0)),
            Err(GeometryError::PointAtInfinity)
        );
    }

    #[test]
    fn box_transforms() {
        let b = BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        assert_eq!(transform_box(&Homography33::identity(), &b).unwrap(), b);
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let t = transform_box(&Homography33::translation(5.0, 5.0), &b).unwrap();
        for (got, want) in <[f64; 4]>::from(t).iter().zip([5.0, 5.0, 15.0, 15.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn box_rotated_thirty_degrees() {
        // Oracle: rotate the corners in closed form about the box center.
        let b = BoundingBox::new(45.0, 45.0, 55.0, 55.0).unwrap();
        let (s, c) = 30f64.to_radians().sin_cos();
        let (cx, cy) = (50.0, 50.0);
        let rot = Homography33::from_rows([
            [c, -s, cx - c * cx + s * cy],
            [s, c, cy - s * cx - c * cy],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let expected_side = 10.0 * (c + s);
        let hull = transform_box(&rot, &b).unwrap();
        assert!((hull.width() - expected_side).abs() < 1e-9);
        assert!((hull.height() - expected_side).abs() < 1e-9);
        assert!((expected_side - 13.66).abs() < 0.01);
        assert!(hull.center().distance(&Point2::new(50.0, 50.0)) < 1e-9);
    }

    #[test]
    fn box_validation_and_clip() {
        assert!(matches!(
            BoundingBox::new(5.0, 0.0, 5.0, 1.0),
            Err(GeometryError::InvertedBox(..))
        ));
        let b = BoundingBox::new(-5.0, 10.0, 50.0, 30.0).unwrap();
        let c = b.clip(40.0, 40.0).unwrap();
        assert_eq!(<[f64; 4]>::from(c), [0.0, 10.0, 40.0, 30.0]);
        assert!(BoundingBox::new(50.0, 50.0, 60.0, 60.0)
            .unwrap()
            .clip(40.0, 40.0)
            .is_none());
        assert!(!b.contains(Point2::new(-5.0, 20.0)));
    }

    #[test]
    fn homography_normalization() {
        let h = Homography33::from_rows([[-2.0, 0.0, 0.0], [0.0, -2.0, 0.0], [0.0, 0.0, -2.0]])
            .unwrap();
        assert!(h.matrix()[(2, 2)] > 0.0);
        assert!((h.matrix().norm() - 1.0).abs() < 1e-15);
        assert_eq!(
            Homography33::from_rows([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]),
            Err(GeometryError::Singular)
        );
        let json = serde_json::to_string(&h).unwrap();
        let back: Homography33 = serde_json::from_str(&json).unwrap();
        assert_eq!(back, h);
    }
}
