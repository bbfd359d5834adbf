//! Ground-truth generator: textured planar scenes, known-homography views
//! and scripted gaze sessions.
//!
//! Every view is rendered by inverse warping the base texture, so the
//! homography from view pixels to base pixels is known exactly. Session
//! scripts are written in base-image coordinates and projected into each
//! frame, which lets the analysis pipeline be checked end to end.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, ImageGray};
use crate::geometry::{transform_point, BoundingBox, GeometryError, Homography33, Point2};
use crate::metrics::round_to;
use crate::registry::CameraPose;
use crate::session::{FramesMeta, GazeSample, TestFrame};

/// Intensity used where a warp samples outside the base texture.
const FILL: f64 = 128.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid warp range: {0}")]
    InvalidWarpRange(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("fixation point ({x}, {y}) lies outside the scene")]
    PointOutsideScene { x: f64, y: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Image(#[from] FeatureError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Checker,
    Noise,
    Blended,
}

/// Ranges for the random view warps. Views are stratified over the
/// rotation and scale ranges so that no two views coincide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpRange {
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translation_px: f64,
    pub projective: f64,
}

impl Default for WarpRange {
    fn default() -> Self {
        Self {
            rotation_deg: 12.0,
            scale_min: 0.88,
            scale_max: 1.12,
            translation_px: 16.0,
            projective: 2e-4,
        }
    }
}

impl WarpRange {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            translation_px: 0.0,
            projective: 0.0,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let vals = [
            self.rotation_deg,
            self.scale_min,
            self.scale_max,
            self.translation_px,
            self.projective,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(SynthError::InvalidWarpRange("non-finite value".into()));
        }
        if self.scale_min <= 0.0 {
            return Err(SynthError::InvalidWarpRange(format!(
                "scale_min {} makes the warp non-invertible",
                self.scale_min
            )));
        }
        if self.scale_min > self.scale_max {
            return Err(SynthError::InvalidWarpRange(
                "scale_min exceeds scale_max".into(),
            ));
        }
        if self.rotation_deg < 0.0 || self.rotation_deg >= 90.0 {
            return Err(SynthError::InvalidWarpRange(
                "rotation_deg must lie in [0, 90)".into(),
            ));
        }
        if self.translation_px < 0.0 || self.projective < 0.0 || self.projective >= 1e-2 {
            return Err(SynthError::InvalidWarpRange(
                "translation_px must be >= 0 and projective in [0, 0.01)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoiSpec {
    pub id: String,
    pub label: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub texture: TextureKind,
    pub view_count: usize,
    pub warp: WarpRange,
    /// Ground-truth AOIs on the base image.
    pub aois: Vec<AoiSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let aoi = |id: &str, label: &str, b: [f64; 4]| AoiSpec {
            id: id.into(),
            label: label.into(),
            bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
        };
        Self {
            seed: 42,
            width: 320,
            height: 240,
            texture: TextureKind::Blended,
            view_count: 10,
            warp: WarpRange::default(),
            aois: vec![
                aoi("H1", "Trip hazard", [80.0, 70.0, 120.0, 105.0]),
                aoi("H2", "Live electrical wires", [140.0, 60.0, 180.0, 92.0]),
                aoi("H3", "Protruding rod", [200.0, 70.0, 240.0, 105.0]),
                aoi("H4", "Chemical hazard", [85.0, 140.0, 130.0, 175.0]),
                aoi("H5", "Electric junction box", [190.0, 140.0, 235.0, 175.0]),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticView {
    pub id: String,
    pub image: ImageGray,
    /// Maps view pixels to base pixels.
    pub to_base: Homography33,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub base: ImageGray,
    pub views: Vec<SyntheticView>,
}

impl Scene {
    pub fn aoi_at(&self, p: Point2) -> Option<&AoiSpec> {
        self.spec
            .aois
            .iter()
            .filter(|a| a.bbox.contains(p))
            .min_by(|a, b| {
                a.bbox
                    .area()
                    .total_cmp(&b.bbox.area())
                    .then_with(|| a.id.cmp(&b.id))
            })
    }
}

fn value_noise(w: u32, h: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const CELLS: [(f64, f64); 4] = [(32.0, 1.0), (16.0, 0.6), (8.0, 0.4), (4.0, 0.25)];
    let mut acc = vec![0.0; (w * h) as usize];
    for (cell, weight) in CELLS {
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
        for y in 0..h {
            let gy = y as f64 / cell;
            let y0 = gy.floor() as usize;
            let fy = gy - y0 as f64;
            let fy = fy * fy * (3.0 - 2.0 * fy);
            for x in 0..w {
                let gx = x as f64 / cell;
                let x0 = gx.floor() as usize;
                let fx = gx - x0 as f64;
                let fx = fx * fx * (3.0 - 2.0 * fx);
                let g = |xx: usize, yy: usize| grid[yy * gw + xx];
                let top = g(x0, y0) * (1.0 - fx) + g(x0 + 1, y0) * fx;
                let bot = g(x0, y0 + 1) * (1.0 - fx) + g(x0 + 1, y0 + 1) * fx;
                acc[(y * w + x) as usize] += weight * (top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    acc.iter().map(|v| (v - lo) / span).collect()
}

/// Checkerboard with `square`-pixel cells, dark cell at the origin.
pub fn checkerboard(width: u32, height: u32, square: u32, dark: u8, light: u8) -> ImageGray {
    ImageGray::from_fn(width, height, |x, y| {
        if ((x / square) + (y / square)) % 2 == 0 {
            dark
        } else {
            light
        }
    })
    .expect("checkerboard dimensions")
}

/// Procedural texture in `[0, 255]`.
pub fn texture(kind: TextureKind, width: u32, height: u32, seed: u64) -> Result<ImageGray, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (width * height) as usize;
    let checker = |i: usize| {
        let (x, y) = (i as u32 % width, i as u32 / width);
        if ((x / 20) + (y / 20)) % 2 == 0 {
            0.15
        } else {
            0.85
        }
    };
    let values: Vec<f64> = match kind {
        TextureKind::Checker => (0..n).map(checker).collect(),
        TextureKind::Noise => value_noise(width, height, &mut rng),
        TextureKind::Blended => {
            let noise = value_noise(width, height, &mut rng);
            (0..n).map(|i| 0.35 * checker(i) + 0.65 * noise[i]).collect()
        }
    };
    Ok(ImageGray::new(
        width,
        height,
        values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect(),
    )?)
}

fn sample_bilinear(img: &ImageGray, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
        return FILL;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as u32, y0 as u32);
    let x1 = (xi + 1).min(img.width() - 1);
    let y1 = (yi + 1).min(img.height() - 1);
    let p = |xx: u32, yy: u32| img.get(xx, yy) as f64;
    let top = p(xi, yi) * (1.0 - fx) + p(x1, yi) * fx;
    let bot = p(xi, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Renders `out(p) = src(to_src(p))` with bilinear sampling.
pub fn warp_image(
    src: &ImageGray,
    to_src: &Homography33,
    width: u32,
    height: u32,
) -> Result<ImageGray, SynthError> {
    let m = to_src.matrix();
    let mut data = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let w = m[(2, 0)] * xf + m[(2, 1)] * yf + m[(2, 2)];
            let v = if w.abs() < 1e-12 {
                FILL
            } else {
                let sx = (m[(0, 0)] * xf + m[(0, 1)] * yf + m[(0, 2)]) / w;
                let sy = (m[(1, 0)] * xf + m[(1, 1)] * yf + m[(1, 2)]) / w;
                sample_bilinear(src, sx, sy)
            };
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(ImageGray::new(width, height, data)?)
}

/// Homography about the image center: rotate, scale, shift and tilt.
pub fn centered_warp(
    width: u32,
    height: u32,
    rotation_rad: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    px: f64,
    py: f64,
) -> Result<Homography33, GeometryError> {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let (s, c) = rotation_rad.sin_cos();
    let to_center = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let back = Matrix3::new(1.0, 0.0, cx + tx, 0.0, 1.0, cy + ty, 0.0, 0.0, 1.0);
    let core = Matrix3::new(scale * c, -scale * s, 0.0, scale * s, scale * c, 0.0, px, py, 1.0);
    Homography33::from_matrix(back * core * to_center)
}

fn add_intensity_noise(img: &ImageGray, sigma: f64, rng: &mut ChaCha8Rng) -> Result<ImageGray, SynthError> {
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let data = img
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(ImageGray::new(img.width(), img.height(), data)?)
}

/// Base texture plus `view_count` warped views. Deterministic per seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SynthError> {
    spec.warp.validate()?;
    if spec.view_count == 0 {
        return Err(SynthError::InvalidScene("view_count must be >= 1".into()));
    }
    for aoi in &spec.aois {
        if !aoi.bbox.within(spec.width as f64, spec.height as f64) {
            return Err(SynthError::InvalidScene(format!(
                "AOI {} lies outside the base image",
                aoi.id
            )));
        }
    }
    let base = texture(spec.texture, spec.width, spec.height, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = spec.view_count;
    let w = &spec.warp;
    // Stratify rotation and scale, pairing the strata through a shuffle.
    let mut scale_order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        scale_order.swap(i, rng.random_range(0..=i));
    }
    let mut views = Vec::with_capacity(n);
    for k in 0..n {
        let strat = |slot: usize, rng: &mut ChaCha8Rng| (slot as f64 + rng.random::<f64>()) / n as f64;
        let rot = (-w.rotation_deg + 2.0 * w.rotation_deg * strat(k, &mut rng)).to_radians();
        let scale = w.scale_min + (w.scale_max - w.scale_min) * strat(scale_order[k], &mut rng);
        let sym = |r: f64, rng: &mut ChaCha8Rng| {
            if r == 0.0 {
                0.0
            } else {
                rng.random_range(-r..=r)
            }
        };
        let tx = sym(w.translation_px, &mut rng);
        let ty = sym(w.translation_px, &mut rng);
        let px = sym(w.projective, &mut rng);
        let py = sym(w.projective, &mut rng);
        let to_base = centered_warp(spec.width, spec.height, rot, scale, tx, ty, px, py)
            .map_err(|_| SynthError::InvalidWarpRange(format!("view {k} is not invertible")))?;
        let image = warp_image(&base, &to_base, spec.width, spec.height)?;
        let pose = CameraPose {
            position: Some([1.5 * k as f64, 0.5 * (k as f64).sin(), 1.6]),
            label: Some(format!("walk-{k:02}")),
        };
        views.push(SyntheticView {
            id: format!("v{k:02}"),
            image,
            to_base,
            pose,
        });
    }
    Ok(Scene {
        spec: spec.clone(),
        base,
        views,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptEvent {
    /// Hold gaze on a base-image point.
    Fixate { x: f64, y: f64, duration_ms: u32 },
    /// Rapid move to the next fixation point. The tracker cannot follow
    /// it and reports invalid samples, as during a blink.
    Saccade { duration_ms: u32 },
    /// Tracker reports no valid gaze.
    OffScene { duration_ms: u32 },
}

impl ScriptEvent {
    pub fn duration_ms(&self) -> u32 {
        match *self {
            ScriptEvent::Fixate { duration_ms, .. }
            | ScriptEvent::Saccade { duration_ms }
            | ScriptEvent::OffScene { duration_ms } => duration_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionScript {
    pub events: Vec<ScriptEvent>,
    pub fps: u32,
    pub gaze_hz: u32,
    /// Gaussian gaze noise in FPV pixels.
    pub noise_px: f64,
    /// Per-pixel intensity noise of rendered frames.
    pub frame_noise: f64,
    /// Half-range of the per-visit camera jitter, in pixels.
    pub jitter_px: f64,
    pub seed: u64,
}

impl Default for SessionScript {
    fn default() -> Self {
        Self::short_default()
    }
}

impl SessionScript {
    fn base(events: Vec<ScriptEvent>) -> Self {
        Self {
            events,
            fps: 25,
            gaze_hz: 100,
            noise_px: 1.0,
            frame_noise: 2.0,
            jitter_px: 1.5,
            seed: 7,
        }
    }

    pub fn frame_period_ms(&self) -> f64 {
        1000.0 / self.fps as f64
    }

    pub fn gaze_period_ms(&self) -> f64 {
        1000.0 / self.gaze_hz as f64
    }

    pub fn span_ms(&self) -> u64 {
        self.events.iter().map(|e| e.duration_ms() as u64).sum()
    }

    /// Short session: one dwell on each default AOI, interleaved with
    /// fixations between hazards and brief off-scene gaps.
    pub fn short_default() -> Self {
        use ScriptEvent::*;
        let fix = |x: f64, y: f64, d: u32| Fixate {
            x,
            y,
            duration_ms: d,
        };
        Self::base(vec![
            OffScene { duration_ms: 200 },
            fix(100.0, 87.5, 400),
            Saccade { duration_ms: 80 },
            fix(160.0, 125.0, 240),
            Saccade { duration_ms: 80 },
            fix(160.0, 76.0, 320),
            Saccade { duration_ms: 80 },
            fix(220.0, 87.5, 360),
            OffScene { duration_ms: 400 },
            fix(107.5, 157.5, 480),
            Saccade { duration_ms: 80 },
            fix(160.0, 170.0, 200),
            Saccade { duration_ms: 80 },
            fix(212.5, 157.5, 440),
            Saccade { duration_ms: 80 },
            fix(150.0, 120.0, 280),
            OffScene { duration_ms: 320 },
            fix(100.0, 87.5, 280),
            Saccade { duration_ms: 80 },
            fix(212.5, 157.5, 320),
            OffScene { duration_ms: 200 },
        ])
    }

    /// 18.2 s session whose per-AOI dwell totals follow the case-study
    /// attention distribution (900, 235, 257, 1148, 1270 ms), snapped to the
    /// 40 ms frame grid with a 240 ms floor.
    pub fn case_study() -> Self {
        use ScriptEvent::*;
        let targets = [
            (100.0, 87.5),  // H1
            (160.0, 76.0),  // H2
            (220.0, 87.5),  // H3
            (107.5, 157.5), // H4
            (212.5, 157.5), // H5
        ];
        let off_aoi = [
            (160.0, 125.0),
            (160.0, 170.0),
            (60.0, 125.0),
            (260.0, 125.0),
            (150.0, 120.0),
            (175.0, 130.0),
        ];
        // (aoi, duration) dwells; totals 880, 240, 240, 1160, 1280.
        let dwells: [(usize, u32); 11] = [
            (0, 280),
            (3, 400),
            (4, 440),
            (1, 240),
            (0, 320),
            (4, 400),
            (3, 360),
            (2, 240),
            (0, 280),
            (3, 400),
            (4, 440),
        ];
        let off_durations = [160, 200, 240, 200, 160, 200];
        let mut events = Vec::new();
        let mut off_i = 0;
        let mut push_off = |events: &mut Vec<ScriptEvent>, count: usize| {
            for _ in 0..count {
                let (x, y) = off_aoi[off_i % off_aoi.len()];
                let d = off_durations[off_i % off_durations.len()];
                off_i += 1;
                events.push(Saccade { duration_ms: 80 });
                events.push(Fixate {
                    x,
                    y,
                    duration_ms: d,
                });
            }
        };
        events.push(OffScene { duration_ms: 200 });
        for (i, &(aoi, d)) in dwells.iter().enumerate() {
            let (x, y) = targets[aoi];
            if i > 0 {
                events.push(Saccade { duration_ms: 80 });
            }
            events.push(Fixate {
                x,
                y,
                duration_ms: d,
            });
            push_off(&mut events, 2);
            events.push(OffScene { duration_ms: 520 });
        }
        let used: u64 = events.iter().map(|e| e.duration_ms() as u64).sum();
        let rest = 18_200u64.saturating_sub(used) as u32;
        if rest > 0 {
            events.push(OffScene { duration_ms: rest });
        }
        Self::base(events)
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.fps == 0 || self.gaze_hz == 0 {
            return Err(SynthError::InvalidScript("fps and gaze_hz must be > 0".into()));
        }
        if self.events.iter().any(|e| e.duration_ms() == 0) {
            return Err(SynthError::InvalidScript("event durations must be > 0".into()));
        }
        if self.span_ms() == 0 {
            return Err(SynthError::InvalidScript("script is empty".into()));
        }
        if !(self.noise_px >= 0.0 && self.frame_noise >= 0.0 && self.jitter_px >= 0.0) {
            return Err(SynthError::InvalidScript("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// Scripted ground truth, all times in ms from session start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFixation {
    pub start_ms: f64,
    pub end_ms: f64,
    /// Base-image coordinates.
    pub point: Point2,
    pub aoi: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDwell {
    pub aoi_id: String,
    pub start_ms: f64,
    pub end_ms: f64,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMetrics {
    pub sd_ms: f64,
    pub fc: usize,
    pub ft_ms: f64,
    pub mfd_ms: Option<f64>,
    pub roaft: Option<f64>,
    pub fr: Option<f64>,
    pub dwell_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub index: usize,
    pub t_ms: f64,
    pub view_id: String,
    /// Maps frame pixels to base pixels.
    pub to_base: Homography33,
    /// Maps frame pixels to the pixels of its source view.
    pub to_view: Homography33,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTruth {
    pub span_ms: f64,
    pub frame_period_ms: f64,
    pub fixations: Vec<TruthFixation>,
    pub dwells: Vec<TruthDwell>,
    pub metrics: TruthMetrics,
    pub frames: Vec<FrameTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSession {
    pub meta: FramesMeta,
    pub frames: Vec<TestFrame>,
    pub gaze: Vec<GazeSample>,
    pub truth: SessionTruth,
}

/// Minimum qualifying dwell used when deriving the truth record.
const TRUTH_MIN_DWELL_MS: f64 = 240.0;

/// Where the gaze is at time `t` according to the script.
enum GazeState {
    At(Point2),
    Invalid,
}

struct Timeline {
    /// (start, end, event index)
    spans: Vec<(u64, u64, usize)>,
    /// Visit number active from each event on; a visit starts at every
    /// fixation.
    visit_of_event: Vec<usize>,
}

impl Timeline {
    fn new(script: &SessionScript) -> Self {
        let mut spans = Vec::new();
        let mut visit_of_event = Vec::new();
        let mut t = 0u64;
        let mut visit = 0usize;
        let mut seen_fix = false;
        for (i, e) in script.events.iter().enumerate() {
            if matches!(e, ScriptEvent::Fixate { .. }) {
                if seen_fix {
                    visit += 1;
                }
                seen_fix = true;
            }
            let d = e.duration_ms() as u64;
            spans.push((t, t + d, i));
            visit_of_event.push(visit);
            t += d;
        }
        Self {
            spans,
            visit_of_event,
        }
    }

    fn event_at(&self, t: f64) -> usize {
        let idx = self.spans.partition_point(|&(_, end, _)| (end as f64) <= t);
        idx.min(self.spans.len() - 1)
    }
}

fn fixation_point(e: &ScriptEvent) -> Option<Point2> {
    match *e {
        ScriptEvent::Fixate { x, y, .. } => Some(Point2::new(x, y)),
        _ => None,
    }
}

fn gaze_state(script: &SessionScript, tl: &Timeline, t: f64) -> GazeState {
    match script.events[tl.event_at(t)] {
        ScriptEvent::Fixate { x, y, .. } => GazeState::At(Point2::new(x, y)),
        ScriptEvent::Saccade { .. } | ScriptEvent::OffScene { .. } => GazeState::Invalid,
    }
}

/// Renders frames, gaze samples and the analytic truth for `script`.
pub fn generate_session(scene: &Scene, script: &SessionScript) -> Result<SyntheticSession, SynthError> {
    script.validate()?;
    let (w, h) = (scene.spec.width, scene.spec.height);
    for e in &script.events {
        if let Some(p) = fixation_point(e) {
            if !(p.x > 0.0 && p.y > 0.0 && p.x < w as f64 && p.y < h as f64) {
                return Err(SynthError::PointOutsideScene { x: p.x, y: p.y });
            }
        }
    }

    let tl = Timeline::new(script);
    let span = script.span_ms() as f64;
    let frame_period = script.frame_period_ms();
    let gaze_period = script.gaze_period_ms();
    let frame_count = (span / frame_period).ceil() as usize;
    let visits = tl.visit_of_event.last().map_or(1, |v| v + 1);

    // Per-visit view choice and camera jitter.
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let mut visit_geom = Vec::with_capacity(visits);
    for v in 0..visits {
        let view = &scene.views[v % scene.views.len()];
        let j = script.jitter_px;
        let to_view = if j > 0.0 {
            let rot = rng.random_range(-0.5f64..=0.5).to_radians();
            let scale = 1.0 + rng.random_range(-0.01..=0.01);
            let tx = rng.random_range(-j..=j);
            let ty = rng.random_range(-j..=j);
            centered_warp(w, h, rot, scale, tx, ty, 0.0, 0.0)?
        } else {
            Homography33::identity()
        };
        let to_base = view.to_base.compose(&to_view);
        visit_geom.push((v % scene.views.len(), to_view, to_base));
    }

    // Frames: render each visit once, add per-frame sensor noise.
    let mut clean_cache: BTreeMap<usize, ImageGray> = BTreeMap::new();
    let mut frames = Vec::with_capacity(frame_count);
    let mut frame_truth = Vec::with_capacity(frame_count);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(script.seed ^ 0xf4a3_11d0);
    for i in 0..frame_count {
        let t = i as f64 * frame_period;
        let visit = tl.visit_of_event[tl.event_at(t)];
        let (view_idx, to_view, to_base) = &visit_geom[visit];
        if !clean_cache.contains_key(&visit) {
            let img = warp_image(&scene.base, to_base, w, h)?;
            clean_cache.insert(visit, img);
        }
        let img = add_intensity_noise(&clean_cache[&visit], script.frame_noise, &mut noise_rng)?;
        frames.push(TestFrame {
            index: i,
            t_ms: t,
            img,
        });
        frame_truth.push(FrameTruth {
            index: i,
            t_ms: t,
            view_id: scene.views[*view_idx].id.clone(),
            to_base: *to_base,
            to_view: *to_view,
        });
    }

    // Gaze at the tracker rate, projected into the active frame.
    let sample_count = (span / gaze_period).round() as usize;
    let normal = (script.noise_px > 0.0).then(|| Normal::new(0.0, script.noise_px).unwrap());
    let mut gaze_rng = ChaCha8Rng::seed_from_u64(script.seed ^ 0x0ddb_a11);
    let mut gaze = Vec::with_capacity(sample_count);
    for s in 0..sample_count {
        let t = s as f64 * gaze_period;
        let visit = tl.visit_of_event[tl.event_at(t)];
        let sample = match gaze_state(script, &tl, t) {
            GazeState::Invalid => GazeSample {
                t_ms: t.round() as i64,
                gaze: Point2::new(0.0, 0.0),
                valid: false,
            },
            GazeState::At(p) => {
                let from_base = visit_geom[visit].2.inverse();
                let q = transform_point(&from_base, p)?;
                let (nx, ny) = match &normal {
                    Some(n) => (n.sample(&mut gaze_rng), n.sample(&mut gaze_rng)),
                    None => (0.0, 0.0),
                };
                GazeSample {
                    t_ms: t.round() as i64,
                    gaze: Point2::new(round_to(q.x + nx, 3), round_to(q.y + ny, 3)),
                    valid: true,
                }
            }
        };
        gaze.push(sample);
    }

    // Analytic truth.
    let mut fixations = Vec::new();
    let mut dwells = Vec::new();
    for &(start, end, ei) in &tl.spans {
        if let ScriptEvent::Fixate { x, y, .. } = script.events[ei] {
            let point = Point2::new(x, y);
            let aoi = scene.aoi_at(point).map(|a| a.id.clone());
            if let Some(id) = &aoi {
                let s = (start as f64 / frame_period).floor() * frame_period;
                let e = (end as f64 / frame_period).ceil() * frame_period;
                if e - s >= TRUTH_MIN_DWELL_MS {
                    dwells.push(TruthDwell {
                        aoi_id: id.clone(),
                        start_ms: s,
                        end_ms: e,
                        duration_ms: e - s,
                    });
                }
            }
            fixations.push(TruthFixation {
                start_ms: start as f64,
                end_ms: end as f64,
                point,
                aoi,
            });
        }
    }
    let fc = fixations.len();
    let ft: f64 = fixations.iter().map(|f| f.end_ms - f.start_ms).sum();
    let on_target: f64 = fixations
        .iter()
        .filter(|f| f.aoi.is_some())
        .map(|f| f.end_ms - f.start_ms)
        .sum();
    let in_aoi = fixations.iter().filter(|f| f.aoi.is_some()).count();
    let mut dwell_ms = BTreeMap::new();
    for d in &dwells {
        *dwell_ms.entry(d.aoi_id.clone()).or_insert(0.0) += d.duration_ms;
    }
    let metrics = TruthMetrics {
        sd_ms: span,
        fc,
        ft_ms: ft,
        mfd_ms: (fc > 0).then(|| ft / fc as f64),
        roaft: (ft > 0.0).then(|| on_target / ft),
        fr: (fc > 0).then(|| in_aoi as f64 / fc as f64),
        dwell_ms,
    };

    Ok(SyntheticSession {
        meta: FramesMeta {
            fps: script.fps as f64,
            count: frame_count,
            width: w,
            height: h,
        },
        frames,
        gaze,
        truth: SessionTruth {
            span_ms: span,
            frame_period_ms: frame_period,
            fixations,
            dwells,
            metrics,
            frames: frame_truth,
        },
    })
}

/// Scene description written next to the rendered views.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub spec: SceneSpec,
    pub views: Vec<ViewRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewRecord {
    pub id: String,
    pub to_base: Homography33,
    pub pose: CameraPose,
}

/// Combined input for one synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub scene: SceneSpec,
    pub script: SessionScript,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            script: SessionScript::short_default(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Materializes a scene and session:
///
/// ```text
/// out/reference/base.png, v00.png, ...   registry inputs
/// out/poses.csv                          view poses
/// out/scene.json                         spec and true view homographies
/// out/frames/frame_000000.png, ...       FPV frames
/// out/frames/frames.json
/// out/gaze.csv
/// out/truth.json
/// ```
pub fn write_synthetic(
    out: &Path,
    scene: &Scene,
    session: &SyntheticSession,
) -> Result<(), SynthError> {
    let reference = out.join("reference");
    let frames_dir = out.join("frames");
    fs::create_dir_all(&reference).map_err(io_err(&reference))?;
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;

    scene.base.save_png(&reference.join("base.png"))?;
    for v in &scene.views {
        v.image.save_png(&reference.join(format!("{}.png", v.id)))?;
    }
    let poses_path = out.join("poses.csv");
    let mut poses = String::from("image_id,x_m,y_m,z_m,label\n");
    for v in &scene.views {
        let [x, y, z] = v.pose.position.unwrap_or_default();
        let label = v.pose.label.as_deref().unwrap_or("");
        poses.push_str(&format!("{},{x},{y},{z},{label}\n", v.id));
    }
    fs::write(&poses_path, poses).map_err(io_err(&poses_path))?;
    write_json(
        &out.join("scene.json"),
        &SceneManifest {
            spec: scene.spec.clone(),
            views: scene
                .views
                .iter()
                .map(|v| ViewRecord {
                    id: v.id.clone(),
                    to_base: v.to_base,
                    pose: v.pose.clone(),
                })
                .collect(),
        },
    )?;

    for f in &session.frames {
        f.img
            .save_png(&frames_dir.join(format!("frame_{:06}.png", f.index)))?;
    }
    write_json(&frames_dir.join("frames.json"), &session.meta)?;

    let gaze_path = out.join("gaze.csv");
    let file = fs::File::create(&gaze_path).map_err(io_err(&gaze_path))?;
    let mut wtr = std::io::BufWriter::new(file);
    let mut write_gaze = || -> std::io::Result<()> {
        writeln!(wtr, "t_ms,x_px,y_px,valid")?;
        for s in &session.gaze {
            writeln!(
                wtr,
                "{},{},{},{}",
                s.t_ms,
                s.gaze.x,
                s.gaze.y,
                u8::from(s.valid)
            )?;
        }
        wtr.flush()
    };
    write_gaze().map_err(io_err(&gaze_path))?;
    write_json(&out.join("truth.json"), &session.truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(warp: WarpRange) -> SceneSpec {
        SceneSpec {
            view_count: 3,
            warp,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn identity_views_match_base() {
        let scene = generate_scene(&small_spec(WarpRange::identity())).unwrap();
        for v in &scene.views {
            assert_eq!(v.image, scene.base);
        }
    }

    #[test]
    fn translated_view_is_shifted_base() {
        let base = texture(TextureKind::Blended, 320, 240, 1).unwrap();
        let shift = Homography33::translation(20.0, 0.0);
        let view = warp_image(&base, &shift, 320, 240).unwrap();
        for y in 0..240 {
            for x in 0..300 {
                assert_eq!(view.get(x, y), base.get(x + 20, y));
            }
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        let spec = small_spec(WarpRange::default());
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        let other = generate_scene(&SceneSpec {
            seed: 43,
            ..spec.clone()
        })
        .unwrap();
        assert_ne!(a.base, other.base);
    }

    #[test]
    fn invalid_warp_rejected() {
        let mut warp = WarpRange::default();
        warp.scale_min = 0.0;
        assert!(matches!(
            generate_scene(&small_spec(warp)),
            Err(SynthError::InvalidWarpRange(_))
        ));
        let mut warp = WarpRange::default();
        warp.scale_min = 1.2;
        warp.scale_max = 1.1;
        assert!(matches!(
            generate_scene(&small_spec(warp)),
            Err(SynthError::InvalidWarpRange(_))
        ));
    }

    #[test]
    fn single_dwell_script_truth() {
        use ScriptEvent::*;
        let scene = generate_scene(&small_spec(WarpRange::default())).unwrap();
        let h1 = scene.spec.aois[0].bbox.center();
        let script = SessionScript::base(vec![
            Fixate {
                x: h1.x,
                y: h1.y,
                duration_ms: 400,
            },
            Saccade { duration_ms: 100 },
            Fixate {
                x: 160.0,
                y: 125.0,
                duration_ms: 400,
            },
        ]);
        let s = generate_session(&scene, &script).unwrap();
        assert_eq!(s.truth.fixations.len(), 2);
        assert_eq!(s.truth.dwells.len(), 1);
        assert_eq!(s.truth.dwells[0].aoi_id, "H1");
        assert_eq!(s.truth.dwells[0].duration_ms, 400.0);
        assert_eq!(s.truth.metrics.ft_ms, 800.0);
        assert_eq!(s.gaze.len(), 90);
        assert_eq!(s.frames.len(), 23);
    }

    #[test]
    fn off_scene_only_script() {
        let scene = generate_scene(&small_spec(WarpRange::default())).unwrap();
        let script = SessionScript::base(vec![ScriptEvent::OffScene { duration_ms: 400 }]);
        let s = generate_session(&scene, &script).unwrap();
        assert!(s.truth.fixations.is_empty());
        assert!(s.truth.dwells.is_empty());
        assert!(s.gaze.iter().all(|g| !g.valid));
    }

    #[test]
    fn point_outside_scene_rejected() {
        let scene = generate_scene(&small_spec(WarpRange::default())).unwrap();
        let script = SessionScript::base(vec![ScriptEvent::Fixate {
            x: 500.0,
            y: 10.0,
            duration_ms: 200,
        }]);
        assert!(matches!(
            generate_session(&scene, &script),
            Err(SynthError::PointOutsideScene { .. })
        ));
    }

    #[test]
    fn case_study_script_mirrors_attention_distribution() {
        let script = SessionScript::case_study();
        assert_eq!(script.span_ms(), 18_200);
        let scene = generate_scene(&small_spec(WarpRange::default())).unwrap();
        let s = generate_session(&scene, &script).unwrap();
        let targets = [("H1", 900.0), ("H2", 235.0), ("H3", 257.0), ("H4", 1148.0), ("H5", 1270.0)];
        let totals = &s.truth.metrics.dwell_ms;
        for (id, want) in targets {
            let got = totals[id];
            // Closest 40 ms multiple at or above the 240 ms floor.
            assert!((got - want).abs() <= 20.0, "{id}: {got} vs {want}");
            assert_eq!(got % 40.0, 0.0);
        }
        let total: f64 = totals.values().sum();
        let target_total = 3810.0;
        for (id, want) in targets {
            let ratio_err = (totals[id] / total - want / target_total).abs();
            assert!(ratio_err < 0.01, "{id} ratio off by {ratio_err}");
        }
        assert_eq!(s.truth.metrics.fc, 33);
        assert_eq!(s.gaze.len(), 1820);
    }

    #[test]
    fn truth_gaze_projects_back_to_script_points() {
        let scene = generate_scene(&small_spec(WarpRange::default())).unwrap();
        let mut script = SessionScript::short_default();
        script.noise_px = 0.0;
        let s = generate_session(&scene, &script).unwrap();
        let period = s.truth.frame_period_ms;
        for g in s.gaze.iter().filter(|g| g.valid) {
            let frame = &s.truth.frames[(g.t_ms as f64 / period).floor() as usize];
            let on_base = transform_point(&frame.to_base, g.gaze).unwrap();
            assert!(on_base.x > 0.0 && on_base.x < 320.0);
            assert!(on_base.y > 0.0 && on_base.y < 240.0);
        }
        for f in &s.truth.fixations {
            let frame = &s.truth.frames[(f.start_ms / period) as usize];
            let sample = s
                .gaze
                .iter()
                .find(|g| g.t_ms as f64 == f.start_ms)
                .unwrap();
            let on_base = transform_point(&frame.to_base, sample.gaze).unwrap();
            assert!(on_base.distance(&f.point) < 0.01);
        }
    }
}
