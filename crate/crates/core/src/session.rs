//! Test-phase pipeline: gaze ingestion, frame synchronization, frame
//! localization against the registry, and fixation and dwell detection.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    detect_and_describe, match_features, FeatureError, ImageGray, DEFAULT_RATIO,
};
use crate::geometry::{
    estimate_homography_ransac, transform_point, BoundingBox, GeometryError, Homography33,
    Point2, RansacParams,
};
use crate::metrics::{compute_metrics, MetricsError, MetricsReport};
use crate::registry::{thumbnail_signature, CameraPose, Registry};

pub const GAZE_HEADER: [&str; 4] = ["t_ms", "x_px", "y_px", "valid"];
pub const FRAMES_META_FILE: &str = "frames.json";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("gaze log {0} has no samples")]
    EmptyLog(String),
    #[error("gaze log line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("gaze log line {line}: timestamp does not increase")]
    NonMonotonicTimestamp { line: u64 },
    #[error("frames: {0}")]
    Frames(String),
    #[error("cannot read frame {path}: {source}")]
    FrameImage {
        path: String,
        #[source]
        source: FeatureError,
    },
    #[error("frame has no homography")]
    NoHomography,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub t_ms: i64,
    /// FPV pixel coordinates.
    pub gaze: Point2,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestFrame {
    pub index: usize,
    pub t_ms: f64,
    pub img: ImageGray,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramesMeta {
    pub fps: f64,
    pub count: usize,
    pub width: u32,
    pub height: u32,
}

impl FramesMeta {
    pub fn period_ms(&self) -> f64 {
        1000.0 / self.fps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub frame_index: usize,
    pub t_ms: f64,
    pub ref_id: Option<String>,
    /// Maps frame pixels to reference pixels.
    pub homography: Option<Homography33>,
    pub inliers: usize,
    /// Descriptor matches with the chosen (or best tried) reference.
    pub match_count: usize,
    pub gaze_fpv: Option<Point2>,
    pub gaze_ref: Option<Point2>,
    pub hit_aoi: Option<String>,
    pub worker_pos: Option<CameraPose>,
    pub gaze_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub start_ms: f64,
    pub end_ms: f64,
    /// Reference coordinates when `ref_id` is set, otherwise FPV.
    pub centroid: Point2,
    pub ref_id: Option<String>,
    pub aoi_id: Option<String>,
}

impl Fixation {
    pub fn duration_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoiDwell {
    pub aoi_id: String,
    pub start_ms: f64,
    pub end_ms: f64,
    pub duration_ms: f64,
    pub start_frame: usize,
    pub frame_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub frame_index: usize,
    pub t_ms: f64,
    pub ref_id: String,
    pub pose: CameraPose,
}

/// Timestamped gaze point in some common coordinate frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazePoint {
    pub t_ms: f64,
    pub p: Point2,
}

/// Reads a `t_ms,x_px,y_px,valid` gaze log.
pub fn ingest_gaze_log(path: &Path) -> Result<Vec<GazeSample>, SessionError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_gaze_log(&text).map_err(|e| match e {
        SessionError::EmptyLog(_) => SessionError::EmptyLog(path.display().to_string()),
        other => other,
    })
}

pub fn parse_gaze_log(text: &str) -> Result<Vec<GazeSample>, SessionError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| SessionError::MalformedRow {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(GAZE_HEADER.iter().copied()) {
        return Err(SessionError::MalformedRow {
            line: 1,
            message: format!("expected header {}", GAZE_HEADER.join(",")),
        });
    }
    let mut out: Vec<GazeSample> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| SessionError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| SessionError::MalformedRow { line, message };
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", rec.len())));
        }
        let t_ms: i64 = rec[0]
            .parse()
            .map_err(|_| bad(format!("t_ms is not an integer: {:?}", &rec[0])))?;
        let coord = |s: &str, name: &str| -> Result<f64, SessionError> {
            let v: f64 = s
                .parse()
                .map_err(|_| bad(format!("{name} is not a number: {s:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("{name} is not finite")))
            }
        };
        let x = coord(&rec[1], "x_px")?;
        let y = coord(&rec[2], "y_px")?;
        let valid = match &rec[3] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("valid must be 0 or 1, got {other:?}"))),
        };
        if out.last().is_some_and(|prev| t_ms <= prev.t_ms) {
            return Err(SessionError::NonMonotonicTimestamp { line });
        }
        out.push(GazeSample {
            t_ms,
            gaze: Point2::new(x, y),
            valid,
        });
    }
    if out.is_empty() {
        return Err(SessionError::EmptyLog("<input>".into()));
    }
    Ok(out)
}

/// Last minus first timestamp.
pub fn gaze_span_ms(samples: &[GazeSample]) -> i64 {
    match (samples.first(), samples.last()) {
        (Some(a), Some(b)) => b.t_ms - a.t_ms,
        _ => 0,
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

/// Loads `frames.json` and the numbered frame images it announces.
pub fn load_frames(dir: &Path) -> Result<(FramesMeta, Vec<TestFrame>), SessionError> {
    let meta_path = dir.join(FRAMES_META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: FramesMeta = serde_json::from_str(&text)
        .map_err(|e| SessionError::Frames(format!("{}: {e}", meta_path.display())))?;
    if !(meta.fps > 0.0 && meta.fps.is_finite()) {
        return Err(SessionError::Frames(format!("fps must be positive, got {}", meta.fps)));
    }
    let period = meta.period_ms();
    let frames = (0..meta.count)
        .into_par_iter()
        .map(|i| {
            let path = dir.join(frame_file_name(i));
            let img = ImageGray::load(&path).map_err(|source| SessionError::FrameImage {
                path: path.display().to_string(),
                source,
            })?;
            if img.width() != meta.width || img.height() != meta.height {
                return Err(SessionError::Frames(format!(
                    "{} is {}x{}, frames.json says {}x{}",
                    path.display(),
                    img.width(),
                    img.height(),
                    meta.width,
                    meta.height
                )));
            }
            Ok(TestFrame {
                index: i,
                t_ms: i as f64 * period,
                img,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((meta, frames))
}

/// Assigns each frame time the nearest valid sample (ties to the earlier
/// one); frames farther than `slack_ms` from any valid sample get `None`.
pub fn sync_gaze_to_frames(
    samples: &[GazeSample],
    frame_times_ms: &[f64],
    slack_ms: f64,
) -> Vec<Option<usize>> {
    let valid: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].valid).collect();
    frame_times_ms
        .iter()
        .map(|&t| {
            if valid.is_empty() {
                return None;
            }
            let k = valid.partition_point(|&i| (samples[i].t_ms as f64) < t);
            let mut best: Option<(f64, usize)> = None;
            for cand in [k.checked_sub(1), Some(k)].into_iter().flatten() {
                if let Some(&i) = valid.get(cand) {
                    let d = (samples[i].t_ms as f64 - t).abs();
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
            }
            best.filter(|&(d, _)| d <= slack_ms).map(|(_, i)| i)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizeParams {
    /// References shortlisted by thumbnail signature.
    pub top_k: usize,
    pub ratio: f32,
    pub min_inliers: usize,
    pub ransac: RansacParams,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        Self {
            top_k: 10,
            ratio: DEFAULT_RATIO,
            min_inliers: 15,
            ransac: RansacParams::default(),
        }
    }
}

/// Finds the reference with the most RANSAC inliers among the thumbnail
/// shortlist. Gaze fields are left empty.
pub fn localize_frame(
    reg: &Registry,
    frame: &TestFrame,
    params: &LocalizeParams,
) -> Result<FrameObservation, SessionError> {
    let features = detect_and_describe(&frame.img, &reg.build_params().features).map_err(
        |source| SessionError::FrameImage {
            path: format!("frame {}", frame.index),
            source,
        },
    )?;
    let mut obs = FrameObservation {
        frame_index: frame.index,
        t_ms: frame.t_ms,
        ref_id: None,
        homography: None,
        inliers: 0,
        match_count: 0,
        gaze_fpv: None,
        gaze_ref: None,
        hit_aoi: None,
        worker_pos: None,
        gaze_missing: false,
    };
    if features.is_empty() {
        return Ok(obs);
    }
    let sig = thumbnail_signature(&frame.img);
    let mut ransac = params.ransac;
    ransac.min_inliers = params.min_inliers;
    // (inliers, image index, homography, matches)
    let mut best: Option<(usize, usize, Homography33, usize)> = None;
    let mut best_matches = 0;
    for idx in reg.candidates(&sig, params.top_k) {
        let reference = &reg.images()[idx];
        let corr = match_features(&features, &reference.features, params.ratio);
        best_matches = best_matches.max(corr.len());
        if corr.len() < params.min_inliers.max(4) {
            continue;
        }
        // Inliers never exceed matches, so a shortlist entry that cannot
        // win is skipped.
        if let Some((bi, bidx, _, _)) = best {
            let rid = &reference.id;
            let bid = &reg.images()[bidx].id;
            if corr.len() < bi || (corr.len() == bi && rid > bid) {
                continue;
            }
        }
        let Ok(r) = estimate_homography_ransac(&corr, &ransac) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((bi, bidx, _, _)) => {
                r.inlier_count > bi
                    || (r.inlier_count == bi && reference.id < reg.images()[bidx].id)
            }
        };
        if better {
            best = Some((r.inlier_count, idx, r.homography, corr.len()));
        }
    }
    obs.match_count = best_matches;
    if let Some((inliers, idx, h, matches)) = best {
        if inliers >= params.min_inliers {
            let reference = &reg.images()[idx];
            obs.ref_id = Some(reference.id.clone());
            obs.homography = Some(h);
            obs.inliers = inliers;
            obs.match_count = matches;
            obs.worker_pos = reference.pose.clone();
        }
    }
    Ok(obs)
}

/// Gaze in reference coordinates.
pub fn map_gaze(obs: &FrameObservation, gaze_fpv: Point2) -> Result<Point2, SessionError> {
    let h = obs.homography.as_ref().ok_or(SessionError::NoHomography)?;
    Ok(transform_point(h, gaze_fpv)?)
}

/// Strict containment; the smallest containing box wins, then the lower id.
pub fn hit_test(p: Point2, aois: &[(&str, BoundingBox)]) -> Option<String> {
    aois.iter()
        .filter(|(_, b)| b.contains(p))
        .min_by(|a, b| a.1.area().total_cmp(&b.1.area()).then_with(|| a.0.cmp(b.0)))
        .map(|(id, _)| id.to_string())
}

/// Maximal same-AOI runs of at least `min_dwell_ms`, each lasting
/// run length × frame period.
pub fn detect_aoi_dwells(
    hits: &[Option<String>],
    frame_period_ms: f64,
    min_dwell_ms: f64,
) -> Vec<AoiDwell> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < hits.len() {
        let Some(id) = &hits[i] else {
            i += 1;
            continue;
        };
        let len = hits[i..]
            .iter()
            .take_while(|h| h.as_ref() == Some(id))
            .count();
        let duration = len as f64 * frame_period_ms;
        // Tolerate representation error in the period.
        if duration + 1e-9 >= min_dwell_ms {
            let start = i as f64 * frame_period_ms;
            out.push(AoiDwell {
                aoi_id: id.clone(),
                start_ms: start,
                end_ms: start + duration,
                duration_ms: duration,
                start_frame: i,
                frame_count: len,
            });
        }
        i += len;
    }
    out
}

struct Extent {
    min_x: f64,
    max_x: f64,
    min_y: f64,
    max_y: f64,
}

impl Extent {
    fn of(points: &[GazePoint]) -> Self {
        let mut e = Extent {
            min_x: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            min_y: f64::INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for g in points {
            e.add(g.p);
        }
        e
    }

    fn add(&mut self, p: Point2) {
        self.min_x = self.min_x.min(p.x);
        self.max_x = self.max_x.max(p.x);
        self.min_y = self.min_y.min(p.y);
        self.max_y = self.max_y.max(p.y);
    }

    fn with(&self, p: Point2) -> f64 {
        (self.max_x.max(p.x) - self.min_x.min(p.x)) + (self.max_y.max(p.y) - self.min_y.min(p.y))
    }

    fn dispersion(&self) -> f64 {
        (self.max_x - self.min_x) + (self.max_y - self.min_y)
    }
}

/// Dispersion-threshold fixation identification.
///
/// Windows never bridge a gap longer than two sample periods. A fixation
/// starts at its first sample and ends one period after its last.
pub fn detect_fixations(
    points: &[GazePoint],
    period_ms: f64,
    dispersion_px: f64,
    min_duration_ms: f64,
) -> Vec<Fixation> {
    let mut out = Vec::new();
    let n = points.len();
    let max_gap = 2.0 * period_ms + 1e-9;
    let mut i = 0;
    while i < n {
        // Smallest window starting at i that spans the minimum duration.
        let mut j = i;
        let mut broken = false;
        while points[j].t_ms - points[i].t_ms + period_ms < min_duration_ms - 1e-9 {
            if j + 1 >= n || points[j + 1].t_ms - points[j].t_ms > max_gap {
                broken = true;
                break;
            }
            j += 1;
        }
        if broken {
            i = j + 1;
            continue;
        }
        let mut ext = Extent::of(&points[i..=j]);
        if ext.dispersion() > dispersion_px {
            i += 1;
            continue;
        }
        while j + 1 < n
            && points[j + 1].t_ms - points[j].t_ms <= max_gap
            && ext.with(points[j + 1].p) <= dispersion_px
        {
            j += 1;
            ext.add(points[j].p);
        }
        let window = &points[i..=j];
        let k = window.len() as f64;
        let cx = window.iter().map(|g| g.p.x).sum::<f64>() / k;
        let cy = window.iter().map(|g| g.p.y).sum::<f64>() / k;
        out.push(Fixation {
            start_ms: window[0].t_ms,
            end_ms: window[window.len() - 1].t_ms + period_ms,
            centroid: Point2::new(cx, cy),
            ref_id: None,
            aoi_id: None,
        });
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    pub localize: LocalizeParams,
    /// Nominal tracker sample period.
    pub gaze_period_ms: f64,
    /// Frames farther than this from a valid sample are gaze-missing.
    pub sync_slack_ms: f64,
    pub dispersion_px: f64,
    pub min_fixation_ms: f64,
    pub min_dwell_ms: f64,
}

impl Default for SessionParams {
    fn default() -> Self {
        Self {
            localize: LocalizeParams::default(),
            gaze_period_ms: 10.0,
            sync_slack_ms: 15.0,
            dispersion_px: 25.0,
            min_fixation_ms: 100.0,
            min_dwell_ms: 240.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub observations: Vec<FrameObservation>,
    pub fixations: Vec<Fixation>,
    pub dwells: Vec<AoiDwell>,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Search duration: last minus first gaze timestamp plus one period.
    pub span_ms: f64,
    pub metrics: MetricsReport,
    pub warnings: Vec<String>,
}

/// Full test-phase pipeline over in-memory inputs. Frames are localized in
/// parallel; everything downstream is an ordered fold.
pub fn run_session(
    reg: &Registry,
    samples: &[GazeSample],
    frames: &[TestFrame],
    frame_period_ms: f64,
    params: &SessionParams,
) -> Result<AttentionRecord, SessionError> {
    if samples.is_empty() {
        return Err(SessionError::EmptyLog("<input>".into()));
    }
    if frames.iter().enumerate().any(|(i, f)| f.index != i) {
        return Err(SessionError::Frames("frame indices must run 0, 1, 2, ...".into()));
    }
    let mut warnings = Vec::new();
    let times: Vec<f64> = frames.iter().map(|f| f.t_ms).collect();
    let sync = sync_gaze_to_frames(samples, &times, params.sync_slack_ms);
    let mut observations = frames
        .par_iter()
        .map(|f| localize_frame(reg, f, &params.localize))
        .collect::<Result<Vec<_>, _>>()?;

    for (obs, assigned) in observations.iter_mut().zip(&sync) {
        match assigned {
            None => obs.gaze_missing = true,
            Some(i) => {
                let g = samples[*i].gaze;
                obs.gaze_fpv = Some(g);
                if let (Some(ref_id), Some(_)) = (&obs.ref_id, &obs.homography) {
                    if let Ok(p) = map_gaze(obs, g) {
                        obs.gaze_ref = Some(p);
                        obs.hit_aoi = hit_test(p, &reg.aois_on(ref_id));
                    }
                }
            }
        }
    }
    let localized = observations.iter().filter(|o| o.ref_id.is_some()).count();
    if localized == 0 && !observations.is_empty() {
        warnings.push("no frame could be localized; AOI statistics are empty".to_string());
    } else if localized < observations.len() {
        warnings.push(format!(
            "{} of {} frames could not be localized",
            observations.len() - localized,
            observations.len()
        ));
    }
    if reg.aois().is_empty() {
        warnings.push("registry has no AOIs".to_string());
    }

    let hits: Vec<Option<String>> = observations.iter().map(|o| o.hit_aoi.clone()).collect();
    let dwells = detect_aoi_dwells(&hits, frame_period_ms, params.min_dwell_ms);

    let points: Vec<GazePoint> = samples
        .iter()
        .filter(|s| s.valid)
        .map(|s| GazePoint {
            t_ms: s.t_ms as f64,
            p: s.gaze,
        })
        .collect();
    let mut fixations = detect_fixations(
        &points,
        params.gaze_period_ms,
        params.dispersion_px,
        params.min_fixation_ms,
    );
    for fx in fixations.iter_mut() {
        attach_reference(fx, &observations, reg);
    }

    let trajectory = observations
        .iter()
        .filter_map(|o| match (&o.ref_id, &o.worker_pos) {
            (Some(r), Some(p)) => Some(TrajectoryPoint {
                frame_index: o.frame_index,
                t_ms: o.t_ms,
                ref_id: r.clone(),
                pose: p.clone(),
            }),
            _ => None,
        })
        .collect();
    let span = (gaze_span_ms(samples) as f64 + params.gaze_period_ms).max(params.gaze_period_ms);
    let metrics = compute_metrics(&fixations, &dwells, span)?;
    Ok(AttentionRecord {
        observations,
        fixations,
        dwells,
        trajectory,
        span_ms: span,
        metrics,
        warnings,
    })
}

/// Moves a fixation centroid into the reference of the localized frame
/// nearest its midpoint and hit-tests it there.
fn attach_reference(fx: &mut Fixation, observations: &[FrameObservation], reg: &Registry) {
    let mid = 0.5 * (fx.start_ms + fx.end_ms);
    let chosen = observations
        .iter()
        .filter(|o| o.homography.is_some() && o.t_ms >= fx.start_ms && o.t_ms < fx.end_ms)
        .min_by(|a, b| {
            (a.t_ms - mid)
                .abs()
                .total_cmp(&(b.t_ms - mid).abs())
                .then(a.frame_index.cmp(&b.frame_index))
        });
    let Some(obs) = chosen else { return };
    let (Some(ref_id), Ok(p)) = (&obs.ref_id, map_gaze(obs, fx.centroid)) else {
        return;
    };
    fx.centroid = p;
    fx.aoi_id = hit_test(p, &reg.aois_on(ref_id));
    fx.ref_id = Some(ref_id.clone());
}

/// [`run_session`] over files on disk.
pub fn run_session_files(
    reg: &Registry,
    gaze_path: &Path,
    frames_dir: &Path,
    params: &SessionParams,
) -> Result<AttentionRecord, SessionError> {
    let samples = ingest_gaze_log(gaze_path)?;
    let (meta, frames) = load_frames(frames_dir)?;
    run_session(reg, &samples, &frames, meta.period_ms(), params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: i64, x: f64, y: f64) -> GazeSample {
        GazeSample {
            t_ms: t,
            gaze: Point2::new(x, y),
            valid: true,
        }
    }

    #[test]
    fn parse_small_log() {
        let s = parse_gaze_log("t_ms,x_px,y_px,valid\n0,1.5,2,1\n10,3,4,0\n20,5,6,1\n").unwrap();
        assert_eq!(s.len(), 3);
        assert!(!s[1].valid);
        assert_eq!(s[2].gaze, Point2::new(5.0, 6.0));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        assert!(matches!(
            parse_gaze_log("t_ms,x_px,y_px,valid\n0,1,2,1\n0,1,2,1\n"),
            Err(SessionError::NonMonotonicTimestamp { line: 3 })
        ));
        assert!(matches!(
            parse_gaze_log("t_ms,x_px,y_px,valid\n0,1,2,1\n10,a,2,1\n"),
            Err(SessionError::MalformedRow { line: 3, .. })
        ));
        assert!(matches!(
            parse_gaze_log("t_ms,x_px,y_px,valid\n0,1,2,7\n"),
            Err(SessionError::MalformedRow { line: 2, .. })
        ));
        assert!(matches!(
            parse_gaze_log("t_ms,x_px,y_px,valid\n"),
            Err(SessionError::EmptyLog(_))
        ));
        assert!(matches!(
            parse_gaze_log("t,x,y\n1,2,3\n"),
            Err(SessionError::MalformedRow { line: 1, .. })
        ));
    }

    #[test]
    fn case_study_length_log() {
        let mut text = String::from("t_ms,x_px,y_px,valid\n");
        for i in 0..1820 {
            text.push_str(&format!("{},{},{},1\n", i * 10, 100 + i % 7, 200));
        }
        let s = parse_gaze_log(&text).unwrap();
        assert_eq!(s.len(), 1820);
        assert_eq!(gaze_span_ms(&s), 18_190);
    }

    #[test]
    fn sync_rules() {
        let s = vec![sample(30, 0.0, 0.0), sample(40, 1.0, 0.0), sample(50, 2.0, 0.0)];
        assert_eq!(sync_gaze_to_frames(&s, &[40.0], 15.0), vec![Some(1)]);
        let s = vec![sample(34, 0.0, 0.0), sample(46, 1.0, 0.0)];
        assert_eq!(sync_gaze_to_frames(&s, &[40.0], 15.0), vec![Some(0)]);
        let s = vec![sample(200, 0.0, 0.0)];
        assert_eq!(sync_gaze_to_frames(&s, &[40.0], 15.0), vec![None]);
        let mut s = vec![sample(40, 0.0, 0.0), sample(50, 1.0, 0.0)];
        s[0].valid = false;
        assert_eq!(sync_gaze_to_frames(&s, &[40.0], 15.0), vec![Some(1)]);
    }

    #[test]
    fn hit_test_rules() {
        let b = BoundingBox::new(100.0, 100.0, 200.0, 200.0).unwrap();
        assert_eq!(hit_test(Point2::new(150.0, 150.0), &[("A", b)]).as_deref(), Some("A"));
        assert_eq!(hit_test(Point2::new(100.0, 150.0), &[("A", b)]), None);
        let outer = BoundingBox::new(0.0, 0.0, 300.0, 300.0).unwrap();
        assert_eq!(
            hit_test(Point2::new(150.0, 150.0), &[("A", outer), ("B", b)]).as_deref(),
            Some("B")
        );
        assert_eq!(
            hit_test(Point2::new(150.0, 150.0), &[("Z", b), ("B", b)]).as_deref(),
            Some("B")
        );
    }

    fn run(id: &str, n: usize) -> Vec<Option<String>> {
        vec![Some(id.to_string()); n]
    }

    #[test]
    fn dwell_rules() {
        let d = detect_aoi_dwells(&run("H1", 6), 40.0, 240.0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].duration_ms, 240.0);
        assert!(detect_aoi_dwells(&run("H1", 5), 40.0, 240.0).is_empty());
        let mut hits = vec![None; 10];
        hits.extend(run("H4", 12));
        hits.push(None);
        let d = detect_aoi_dwells(&hits, 40.0, 240.0);
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].start_frame, d[0].frame_count), (10, 12));
        assert_eq!(d[0].duration_ms, 480.0);
        assert_eq!(d[0].start_ms, 400.0);
        let mut split = run("H1", 6);
        split.push(None);
        split.extend(run("H1", 6));
        assert_eq!(detect_aoi_dwells(&split, 40.0, 240.0).len(), 2);
    }

    fn pts(coords: &[(f64, f64)], t0: f64) -> Vec<GazePoint> {
        coords
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| GazePoint {
                t_ms: t0 + 10.0 * i as f64,
                p: Point2::new(x, y),
            })
            .collect()
    }

    #[test]
    fn stationary_trace_is_one_fixation() {
        let p = pts(&[(50.0, 60.0); 30], 0.0);
        let f = detect_fixations(&p, 10.0, 25.0, 100.0);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].duration_ms(), 300.0);
        assert_eq!(f[0].centroid, Point2::new(50.0, 60.0));
    }

    #[test]
    fn two_clusters_joined_by_sweep() {
        let mut c: Vec<(f64, f64)> = vec![(100.0, 100.0); 30];
        for k in 1..=5 {
            c.push((100.0 + 200.0 * k as f64 / 6.0, 100.0));
        }
        c.extend(vec![(300.0, 100.0); 30]);
        let f = detect_fixations(&pts(&c, 0.0), 10.0, 25.0, 100.0);
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].centroid, Point2::new(100.0, 100.0));
        assert_eq!(f[1].centroid, Point2::new(300.0, 100.0));
    }

    #[test]
    fn fast_sweep_has_no_fixation() {
        let c: Vec<(f64, f64)> = (0..50).map(|i| (10.0 * i as f64, 0.0)).collect();
        assert!(detect_fixations(&pts(&c, 0.0), 10.0, 25.0, 100.0).is_empty());
    }

    #[test]
    fn gaps_split_windows() {
        let mut p = pts(&[(10.0, 10.0); 8], 0.0);
        p.extend(pts(&[(10.0, 10.0); 8], 200.0));
        assert!(detect_fixations(&p, 10.0, 25.0, 100.0).is_empty());
    }
}
