//! `sitegaze` command-line front end.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage or input error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sitegaze::features::FeatureParams;
use sitegaze::geometry::RansacParams;
use sitegaze::metrics::{
    correlation_table, read_worker_csv, round_to, validation_accuracy, CorrelationRow,
    MetricsError, MetricsReport, ValidationReport,
};
use sitegaze::registry::{
    build_registry, list_images, load_registry, save_registry, BuildParams, PropagationParams,
    PropagationReport, RegistryError,
};
use sitegaze::session::{
    run_session_files, AoiDwell, Fixation, FrameObservation, LocalizeParams, SessionError,
    SessionParams, TrajectoryPoint,
};
use sitegaze::synth::{generate_scene, generate_session, write_synthetic, SessionScript, SynthError, SynthSpec};

pub const TOOL: &str = "sitegaze";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn registry_input(e: RegistryError) -> Failure {
    let name = match &e {
        RegistryError::NoSeeds => "NoSeeds",
        RegistryError::UnknownImage(_) => "UnknownImage",
        RegistryError::InvertedBox(_) => "InvertedBox",
        RegistryError::BoxOutOfBounds { .. } => "BoxOutOfBounds",
        RegistryError::UnreadableImage { .. } => "UnreadableImage",
        RegistryError::FormatVersionMismatch { .. } => "FormatVersionMismatch",
        RegistryError::ChecksumMismatch => "ChecksumMismatch",
        RegistryError::PoseForUnknownImage(_) => "PoseForUnknownImage",
        RegistryError::DuplicateImageId(_) => "DuplicateImageId",
        _ => "RegistryError",
    };
    Failure::input(format!("{name}: {e}"))
}

fn session_input(e: SessionError) -> Failure {
    Failure::input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "sitegaze", version, about = "Gaze-to-scene registration and visual-search analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Feature every image in a directory and save a registry.
    BuildRegistry(BuildArgs),
    /// Seed an AOI box on one reference image.
    Annotate(AnnotateArgs),
    /// Spread seeded AOIs to linked reference images.
    Propagate(PropagateArgs),
    /// Run the test-phase pipeline over frames and a gaze log.
    Analyze(AnalyzeArgs),
    /// Correlate per-worker search metrics with hazard recognition.
    Correlate(CorrelateArgs),
    /// Compare system dwell times with a manual count.
    Validate(ValidateArgs),
    /// Render a synthetic scene, session and ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct FeatureFlags {
    /// Maximum keypoints per image.
    #[arg(long, default_value_t = 1000)]
    max_keypoints: usize,
    /// Minimum corner response (intensities scaled to [0, 1]).
    #[arg(long, default_value_t = 1e-6)]
    threshold: f32,
    /// Pyramid levels.
    #[arg(long, default_value_t = 8)]
    levels: usize,
    /// Pyramid scale factor.
    #[arg(long, default_value_t = 1.2)]
    scale_factor: f32,
}

impl FeatureFlags {
    fn params(&self) -> CliResult<FeatureParams> {
        if self.max_keypoints == 0 || self.levels == 0 || !(self.scale_factor > 1.0) {
            return Err(Failure::input(
                "--max-keypoints and --levels must be >= 1 and --scale-factor > 1",
            ));
        }
        Ok(FeatureParams {
            max_keypoints: self.max_keypoints,
            threshold: self.threshold,
            levels: self.levels,
            scale_factor: self.scale_factor,
        })
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct RansacFlags {
    /// Symmetric transfer error (px) below which a match is an inlier.
    #[arg(long, default_value_t = 3.0)]
    inlier_threshold: f64,
    /// RANSAC iteration cap.
    #[arg(long, default_value_t = 2000)]
    max_iterations: usize,
    /// RANSAC confidence for the adaptive iteration bound.
    #[arg(long, default_value_t = 0.995)]
    confidence: f64,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RansacFlags {
    fn params(&self, min_inliers: usize) -> CliResult<RansacParams> {
        if !(self.inlier_threshold > 0.0) || !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Failure::input(
                "--inlier-threshold must be > 0 and --confidence in (0, 1)",
            ));
        }
        Ok(RansacParams {
            inlier_threshold_px: self.inlier_threshold,
            max_iterations: self.max_iterations.max(1),
            confidence: self.confidence,
            min_inliers,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// Directory of reference images (PNG or PGM).
    #[arg(long)]
    frames: PathBuf,
    /// Output registry directory.
    #[arg(long)]
    out: PathBuf,
    /// Poses CSV: image_id,x_m,y_m,z_m,label.
    #[arg(long)]
    poses: Option<PathBuf>,
    #[command(flatten)]
    features: FeatureFlags,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    #[arg(long)]
    registry: PathBuf,
    /// AOI identifier, e.g. H1.
    #[arg(long)]
    aoi: String,
    /// Hazard description.
    #[arg(long, default_value = "")]
    label: String,
    /// Reference image id (file stem).
    #[arg(long)]
    image: String,
    /// Box corners x_min,y_min,x_max,y_max in pixels.
    #[arg(long = "box", value_name = "X0,Y0,X1,Y1", allow_hyphen_values = true)]
    bbox: String,
}

#[derive(Debug, Args)]
struct PropagateArgs {
    #[arg(long)]
    registry: PathBuf,
    /// RANSAC inliers a link needs to carry a box.
    #[arg(long, default_value_t = 15)]
    min_inliers: usize,
    /// Thumbnail neighbours linked per image.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Descriptor ratio test.
    #[arg(long, default_value_t = 0.8)]
    ratio: f32,
    #[command(flatten)]
    ransac: RansacFlags,
    /// Write the propagation report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Omit the timestamp from the report.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    registry: PathBuf,
    /// Directory with frame_000000.png ... and frames.json.
    #[arg(long)]
    frames: PathBuf,
    /// Gaze CSV: t_ms,x_px,y_px,valid.
    #[arg(long)]
    gaze: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// References shortlisted per frame by thumbnail signature.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Descriptor ratio test.
    #[arg(long, default_value_t = 0.8)]
    ratio: f32,
    /// RANSAC inliers needed to localize a frame.
    #[arg(long, default_value_t = 15)]
    min_inliers: usize,
    #[command(flatten)]
    ransac: RansacFlags,
    /// Nominal gaze sample period (ms).
    #[arg(long, default_value_t = 10.0)]
    gaze_period_ms: f64,
    /// Frames farther than this (ms) from a valid sample are gaze-missing.
    #[arg(long, default_value_t = 15.0)]
    sync_slack_ms: f64,
    /// I-DT dispersion threshold (px).
    #[arg(long, default_value_t = 25.0)]
    dispersion_px: f64,
    /// I-DT minimum fixation duration (ms).
    #[arg(long, default_value_t = 100.0)]
    min_fixation_ms: f64,
    /// Minimum qualifying AOI dwell (ms).
    #[arg(long, default_value_t = 240.0)]
    min_dwell_ms: f64,
    /// Also write the dwell table (aoi_id,label,dwell_ms) as CSV.
    #[arg(long)]
    dwell_csv: Option<PathBuf>,
    /// Also write the search metrics (sd_ms,fc,ft_ms,mfd_ms) as CSV.
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
    /// Omit the timestamp from the report.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    /// CSV: worker_id,av_hri,sd_ms,ft_ms,fc,mfd_ms,roaft,fr.
    #[arg(long)]
    workers: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write metric,r,p,n as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// System dwell times: CSV aoi_id,dwell_ms, a JSON object, or an
    /// analyze report.
    #[arg(long)]
    system: PathBuf,
    /// Manual dwell times in the same formats.
    #[arg(long)]
    manual: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    /// Short walkthrough visiting each AOI.
    Short,
    /// 18.2 s session shaped like the case-study attention distribution.
    CaseStudy,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON spec with optional "scene" and "script" sections; defaults
    /// fill anything omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scene and script seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the script events with a built-in script.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::BuildRegistry(a) => cmd_build_registry(&a),
        Command::Annotate(a) => cmd_annotate(&a),
        Command::Propagate(a) => cmd_propagate(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Correlate(a) => cmd_correlate(&a),
        Command::Validate(a) => cmd_validate(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

#[derive(Debug, Serialize)]
struct Envelope<'a, C: Serialize, B: Serialize> {
    tool: &'static str,
    version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at_unix: Option<u64>,
    command: &'a str,
    config: &'a C,
    #[serde(flatten)]
    body: B,
}

fn write_report<C: Serialize, B: Serialize>(
    path: &Path,
    command: &str,
    config: &C,
    body: B,
    deterministic: bool,
) -> CliResult<()> {
    let generated_at_unix = (!deterministic).then(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    });
    let env = Envelope {
        tool: TOOL,
        version: VERSION,
        generated_at_unix,
        command,
        config,
        body,
    };
    let mut text = serde_json::to_string_pretty(&env)
        .map_err(|e| Failure::internal(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::internal(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::internal(format!("cannot write {}: {e}", path.display())))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn load_reg(dir: &Path) -> CliResult<sitegaze::registry::Registry> {
    if !dir.join(sitegaze::registry::MANIFEST_FILE).is_file() {
        return Err(Failure::input(format!("{} is not a registry directory", dir.display())));
    }
    load_registry(dir).map_err(registry_input)
}

fn save_reg(reg: &sitegaze::registry::Registry, dir: &Path) -> CliResult<()> {
    save_registry(reg, dir).map_err(|e| Failure::internal(format!("cannot save registry: {e}")))
}

fn cmd_build_registry(a: &BuildArgs) -> CliResult<()> {
    if !a.frames.is_dir() {
        return Err(Failure::input(format!("{} is not a directory", a.frames.display())));
    }
    let params = BuildParams {
        features: a.features.params()?,
    };
    let paths = list_images(&a.frames).map_err(registry_input)?;
    if paths.is_empty() {
        return Err(Failure::input(format!("no PNG or PGM images in {}", a.frames.display())));
    }
    let reg = build_registry(&paths, a.poses.as_deref(), params).map_err(registry_input)?;
    save_reg(&reg, &a.out)?;
    let keypoints: usize = reg.images().iter().map(|im| im.features.len()).sum();
    let posed = reg.images().iter().filter(|im| im.pose.is_some()).count();
    println!(
        "registry: {} images, {} keypoints, {} poses -> {}",
        reg.len(),
        keypoints,
        posed,
        a.out.display()
    );
    Ok(())
}

fn parse_box(s: &str) -> CliResult<[f64; 4]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Failure::input(format!("--box expects x0,y0,x1,y1, got {s:?}")));
    }
    let mut out = [0.0; 4];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Failure::input(format!("--box value {p:?} is not a number")))?;
    }
    Ok(out)
}

fn cmd_annotate(a: &AnnotateArgs) -> CliResult<()> {
    let coords = parse_box(&a.bbox)?;
    let reg = load_reg(&a.registry)?;
    let next = reg
        .seed_aoi(&a.aoi, &a.label, &a.image, coords)
        .map_err(registry_input)?;
    save_reg(&next, &a.registry)?;
    println!(
        "seeded {} on {} [{}, {}, {}, {}]",
        a.aoi, a.image, coords[0], coords[1], coords[2], coords[3]
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct PropagateConfig<'a> {
    registry: String,
    params: &'a PropagationParams,
}

#[derive(Debug, Serialize)]
struct PropagateBody<'a> {
    report: &'a PropagationReport,
}

fn cmd_propagate(a: &PropagateArgs) -> CliResult<()> {
    if !(a.ratio > 0.0 && a.ratio <= 1.0) {
        return Err(Failure::input("--ratio must lie in (0, 1]"));
    }
    let params = PropagationParams {
        min_inliers: a.min_inliers,
        link_top_k: a.top_k,
        ratio: a.ratio,
        ransac: a.ransac.params(a.min_inliers)?,
    };
    let reg = load_reg(&a.registry)?;
    let (next, report) = reg.propagate_aois(&params).map_err(registry_input)?;
    save_reg(&next, &a.registry)?;
    println!(
        "coverage {}/{} (propagated {}, uncovered {}, boxes added {}, out of view {})",
        report.covered,
        report.unseeded,
        report.propagated_images.len(),
        report.uncovered_images.len(),
        report.boxes_added,
        report.out_of_view.len()
    );
    if !report.uncovered_images.is_empty() {
        println!("uncovered: {}", report.uncovered_images.join(", "));
    }
    if let Some(path) = &a.report {
        let config = PropagateConfig {
            registry: path_str(&a.registry),
            params: &params,
        };
        write_report(path, "propagate", &config, PropagateBody { report: &report }, a.deterministic)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AnalyzeConfig {
    registry: String,
    frames: String,
    gaze: String,
    seed: u64,
    session: SessionParams,
}

#[derive(Debug, Serialize)]
struct DwellRow {
    aoi_id: String,
    label: String,
    dwell_ms: f64,
    dwells: usize,
}

#[derive(Debug, Serialize)]
struct LocalizationSummary {
    frames: usize,
    localized: usize,
    gaze_missing: usize,
}

#[derive(Debug, Serialize)]
struct AnalyzeBody<'a> {
    metrics: &'a MetricsReport,
    dwell_table: Vec<DwellRow>,
    dwells: &'a [AoiDwell],
    fixations: &'a [Fixation],
    trajectory: &'a [TrajectoryPoint],
    localization: LocalizationSummary,
    frames: &'a [FrameObservation],
    warnings: &'a [String],
}

fn cmd_analyze(a: &AnalyzeArgs) -> CliResult<()> {
    if !(a.ratio > 0.0 && a.ratio <= 1.0)
        || !(a.gaze_period_ms > 0.0)
        || !(a.sync_slack_ms >= 0.0)
        || !(a.dispersion_px > 0.0)
        || !(a.min_fixation_ms >= 0.0)
        || !(a.min_dwell_ms >= 0.0)
    {
        return Err(Failure::input("analysis thresholds out of range"));
    }
    let session = SessionParams {
        localize: LocalizeParams {
            top_k: a.top_k.max(1),
            ratio: a.ratio,
            min_inliers: a.min_inliers,
            ransac: a.ransac.params(a.min_inliers)?,
        },
        gaze_period_ms: a.gaze_period_ms,
        sync_slack_ms: a.sync_slack_ms,
        dispersion_px: a.dispersion_px,
        min_fixation_ms: a.min_fixation_ms,
        min_dwell_ms: a.min_dwell_ms,
    };
    let reg = load_reg(&a.registry)?;
    let rec = run_session_files(&reg, &a.gaze, &a.frames, &session).map_err(session_input)?;

    let mut dwell_table: Vec<DwellRow> = reg
        .aois()
        .iter()
        .map(|aoi| DwellRow {
            aoi_id: aoi.aoi_id.clone(),
            label: aoi.label.clone(),
            dwell_ms: rec.metrics.dwell_ms.get(&aoi.aoi_id).copied().unwrap_or(0.0),
            dwells: rec.dwells.iter().filter(|d| d.aoi_id == aoi.aoi_id).count(),
        })
        .collect();
    dwell_table.sort_by(|x, y| x.aoi_id.cmp(&y.aoi_id));
    let localized = rec.observations.iter().filter(|o| o.ref_id.is_some()).count();
    let gaze_missing = rec.observations.iter().filter(|o| o.gaze_missing).count();

    if let Some(path) = &a.dwell_csv {
        let mut text = String::from("aoi_id,label,dwell_ms\n");
        for row in &dwell_table {
            writeln!(text, "{},{},{}", row.aoi_id, csv_field(&row.label), row.dwell_ms).unwrap();
        }
        write_text(path, &text)?;
    }
    if let Some(path) = &a.metrics_csv {
        let m = &rec.metrics;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let text = format!(
            "sd_ms,fc,ft_ms,mfd_ms,roaft,fr\n{},{},{},{},{},{}\n",
            m.sd_ms,
            m.fc,
            m.ft_ms,
            opt(m.mfd_ms_2dp),
            opt(m.roaft.map(|v| round_to(v, 4))),
            opt(m.fr.map(|v| round_to(v, 4)))
        );
        write_text(path, &text)?;
    }

    let config = AnalyzeConfig {
        registry: path_str(&a.registry),
        frames: path_str(&a.frames),
        gaze: path_str(&a.gaze),
        seed: a.ransac.seed,
        session,
    };
    let body = AnalyzeBody {
        metrics: &rec.metrics,
        dwell_table,
        dwells: &rec.dwells,
        fixations: &rec.fixations,
        trajectory: &rec.trajectory,
        localization: LocalizationSummary {
            frames: rec.observations.len(),
            localized,
            gaze_missing,
        },
        frames: &rec.observations,
        warnings: &rec.warnings,
    };
    write_report(&a.out, "analyze", &config, body, a.deterministic)?;
    for w in &rec.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "frames {}/{} localized, {} fixations, {} dwells, SD {} ms, FT {} ms -> {}",
        localized,
        rec.observations.len(),
        rec.metrics.fc,
        rec.dwells.len(),
        rec.metrics.sd_ms,
        rec.metrics.ft_ms,
        a.out.display()
    );
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn metrics_input(e: MetricsError) -> Failure {
    Failure::input(e.to_string())
}

#[derive(Debug, Serialize)]
struct CorrelateConfig {
    workers: String,
}

#[derive(Debug, Serialize)]
struct CorrelateBody<'a> {
    rows: &'a [CorrelationRow],
}

fn cmd_correlate(a: &CorrelateArgs) -> CliResult<()> {
    let workers = read_worker_csv(&a.workers).map_err(metrics_input)?;
    let rows = correlation_table(&workers).map_err(metrics_input)?;
    if let Some(path) = &a.csv {
        let mut text = String::from("metric,r,p,n\n");
        for r in &rows {
            let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.3}"));
            writeln!(text, "{},{},{},{}", r.metric, f(r.r), f(r.p), r.n).unwrap();
        }
        write_text(path, &text)?;
    }
    let config = CorrelateConfig {
        workers: path_str(&a.workers),
    };
    write_report(&a.out, "correlate", &config, CorrelateBody { rows: &rows }, a.deterministic)?;
    for r in &rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!("{:<6} r={:>7} p={:>6} n={}", r.metric, f(r.r), f(r.p), r.n);
    }
    Ok(())
}

/// Reads per-AOI dwell times from CSV (`aoi_id,dwell_ms`), a flat JSON
/// object, or an analyze report.
fn read_dwell_map(path: &Path) -> CliResult<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let map = v
            .get("metrics")
            .and_then(|m| m.get("dwell_ms"))
            .unwrap_or(&v);
        let obj = map
            .as_object()
            .ok_or_else(|| Failure::input(format!("{}: expected an object of AOI dwell times", path.display())))?;
        return obj
            .iter()
            .map(|(k, v)| {
                v.as_f64()
                    .map(|x| (k.clone(), x))
                    .ok_or_else(|| Failure::input(format!("{}: dwell for {k} is not a number", path.display())))
            })
            .collect();
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    if header.iter().ne(["aoi_id", "dwell_ms"]) {
        return Err(Failure::input(format!(
            "{}: expected header aoi_id,dwell_ms",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        let v: f64 = rec[1].parse().map_err(|_| {
            Failure::input(format!("{} line {line}: bad dwell {:?}", path.display(), &rec[1]))
        })?;
        if out.insert(rec[0].to_string(), v).is_some() {
            return Err(Failure::input(format!(
                "{} line {line}: duplicate AOI {}",
                path.display(),
                &rec[0]
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ValidateConfig {
    system: String,
    manual: String,
}

#[derive(Debug, Serialize)]
struct ValidateBody<'a> {
    validation: &'a ValidationReport,
}

fn cmd_validate(a: &ValidateArgs) -> CliResult<()> {
    let system = read_dwell_map(&a.system)?;
    let manual = read_dwell_map(&a.manual)?;
    let rep = validation_accuracy(&system, &manual).map_err(metrics_input)?;
    for r in &rep.rows {
        println!(
            "{:<6} system {:>8} manual {:>8} variation {:>7} accuracy {}%",
            r.aoi_id, r.system_ms, r.manual_ms, r.variation_ms, r.accuracy_pct
        );
    }
    println!("mean accuracy {}%", rep.mean_accuracy_pct);
    if let Some(path) = &a.csv {
        let mut text = String::from("aoi_id,system_ms,manual_ms,variation_ms,accuracy_pct\n");
        for r in &rep.rows {
            writeln!(
                text,
                "{},{},{},{},{}",
                r.aoi_id, r.system_ms, r.manual_ms, r.variation_ms, r.accuracy_pct
            )
            .unwrap();
        }
        writeln!(text, "mean,,,,{}", rep.mean_accuracy_pct).unwrap();
        write_text(path, &text)?;
    }
    if let Some(path) = &a.out {
        let config = ValidateConfig {
            system: path_str(&a.system),
            manual: path_str(&a.manual),
        };
        write_report(path, "validate", &config, ValidateBody { validation: &rep }, a.deterministic)?;
    }
    Ok(())
}

fn synth_input(e: SynthError) -> Failure {
    match e {
        SynthError::Io { .. } | SynthError::Image(_) | SynthError::Json(_) => {
            Failure::internal(e.to_string())
        }
        other => Failure::input(other.to_string()),
    }
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.scene.seed = seed;
        spec.script.seed = seed;
    }
    match a.preset {
        Some(Preset::Short) => spec.script.events = SessionScript::short_default().events,
        Some(Preset::CaseStudy) => spec.script.events = SessionScript::case_study().events,
        None => {}
    }
    let scene = generate_scene(&spec.scene).map_err(synth_input)?;
    let session = generate_session(&scene, &spec.script).map_err(synth_input)?;
    write_synthetic(&a.out, &scene, &session).map_err(synth_input)?;
    let mut text = serde_json::to_string_pretty(&spec)
        .map_err(|e| Failure::internal(e.to_string()))?;
    text.push('\n');
    write_text(&a.out.join("spec.json"), &text)?;
    println!(
        "synth: {} views, {} frames, {} gaze samples, {} truth dwells -> {}",
        scene.views.len(),
        session.frames.len(),
        session.gaze.len(),
        session.truth.dwells.len(),
        a.out.display()
    );
    Ok(())
}
